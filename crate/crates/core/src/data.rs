//! Image datasets: directory ingestion and a synthetic shape generator.
//!
//! Images are held as `[C × s × s]` f32 planes, normalized per channel with
//! statistics computed once over the dataset they were fitted on.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    images: Vec<f32>,
    labels: Vec<usize>,
    /// Per image, `s × s` foreground bitmask when ground truth is known.
    foreground: Option<Vec<Vec<u8>>>,
    stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn from_raw(
        image_size: usize,
        channels: usize,
        class_names: Vec<String>,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} values for {} images of {channels}×{image_size}×{image_size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Dataset(format!(
                "label {bad} with {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            image_size,
            channels,
            class_names,
            images,
            labels,
            foreground: None,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn per_image(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw(&self) -> &[f32] {
        &self.images
    }

    pub fn foreground(&self, i: usize) -> Option<&[u8]> {
        self.foreground.as_ref().map(|f| f[i].as_slice())
    }

    pub fn has_foreground(&self) -> bool {
        self.foreground.is_some()
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    /// Stacks the given images into `[B × C × s × s]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(
            &[indices.len(), self.channels, self.image_size, self.image_size],
            data,
        )
        .expect("batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            image_size: self.image_size,
            channels: self.channels,
            class_names: self.class_names.clone(),
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            foreground: self
                .foreground
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i].clone()).collect()),
            stats: self.stats.clone(),
        }
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn compute_stats(&self) -> ChannelStats {
        let plane = self.image_size * self.image_size;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.images.chunks(self.per_image()) {
            for (c, ch) in img.chunks(plane).enumerate() {
                for &v in ch {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt()).max(1e-6) as f32)
            .collect();
        ChannelStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    /// Normalizes with this dataset's own statistics (computed once).
    pub fn normalize(&mut self) -> Result<ChannelStats> {
        let stats = match &self.stats {
            Some(s) => return Ok(s.clone()),
            None => self.compute_stats(),
        };
        self.normalize_with(&stats)?;
        Ok(stats)
    }

    /// Normalizes with statistics fitted elsewhere, e.g. on a training split.
    pub fn normalize_with(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.stats.is_some() {
            return Err(Error::Dataset("dataset is already normalized".into()));
        }
        if stats.mean.len() != self.channels || stats.std.len() != self.channels {
            return Err(Error::Dataset("statistics do not match channel count".into()));
        }
        let plane = self.image_size * self.image_size;
        let per = self.per_image();
        for img in self.images.chunks_mut(per) {
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                ch.iter_mut()
                    .for_each(|v| *v = (*v - stats.mean[c]) / stats.std[c]);
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Maps a normalized image back to 8-bit interleaved RGB.
    pub fn to_rgb8(&self, image: &[f32]) -> Vec<u8> {
        let plane = self.image_size * self.image_size;
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                let ch = c.min(self.channels - 1);
                let mut v = image[ch * plane + p];
                if let Some(s) = &self.stats {
                    v = v * s.std[ch] + s.mean[ch];
                }
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Cross,
}

impl ShapeKind {
    fn contains(self, dy: f64, dx: f64, half: f64) -> bool {
        match self {
            ShapeKind::Square => dy.abs() <= half && dx.abs() <= half,
            ShapeKind::Disc => dy * dy + dx * dx <= half * half,
            ShapeKind::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
            ShapeKind::Cross => {
                (dy.abs() <= half && dx.abs() <= half / 3.0)
                    || (dx.abs() <= half && dy.abs() <= half / 3.0)
            }
        }
    }
}

/// One filled shape per image at a random position over Gaussian noise;
/// class `c` draws shape `shapes[c % shapes.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeKind>,
    pub noise_sigma: f64,
    /// Shape extent as a fraction of the image side, `[min, max]`.
    pub shape_extent: (f64, f64),
    /// Per-channel spread of each image's foreground colour.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            images_per_class: 128,
            image_size: 32,
            channels: 3,
            shapes: vec![ShapeKind::Square, ShapeKind::Cross],
            noise_sigma: 0.15,
            shape_extent: (0.45, 0.65),
            tint: 0.0,
            seed: 0,
        }
    }
}

const BACKGROUND_LEVEL: f64 = 0.35;
const FOREGROUND_LEVEL: f64 = 0.85;

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes == 0 || self.images_per_class == 0 || self.shapes.is_empty() {
            return Err(Error::Dataset("a synthetic dataset needs classes, images and shapes".into()));
        }
        let (lo, hi) = self.shape_extent;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("shape_extent ({lo}, {hi}) outside (0, 1]")));
        }
        let s = self.image_size;
        let plane = s * s;
        let mut rng = Rng::derive(self.seed, 0x5157);
        let total = self.num_classes * self.images_per_class;
        let mut images = Vec::with_capacity(total * plane * self.channels);
        let mut labels = Vec::with_capacity(total);
        let mut masks = Vec::with_capacity(total);
        for class in 0..self.num_classes {
            let kind = self.shapes[class % self.shapes.len()];
            for _ in 0..self.images_per_class {
                let extent = rng.uniform_range(lo, hi) * s as f64;
                let half = extent / 2.0;
                let cy = rng.uniform_range(half, s as f64 - half);
                let cx = rng.uniform_range(half, s as f64 - half);
                let tint: Vec<f64> = (0..self.channels).map(|_| rng.uniform_range(-self.tint, self.tint)).collect();
                let mut fg = vec![0u8; plane];
                for (p, m) in fg.iter_mut().enumerate() {
                    let (y, x) = ((p / s) as f64 + 0.5, (p % s) as f64 + 0.5);
                    *m = u8::from(kind.contains(y - cy, x - cx, half));
                }
                for t in &tint {
                    for &m in &fg {
                        let noise = self.noise_sigma * rng.normal();
                        let base = if m == 1 { FOREGROUND_LEVEL + t } else { BACKGROUND_LEVEL };
                        images.push((base + noise) as f32);
                    }
                }
                labels.push(class);
                masks.push(fg);
            }
        }
        let names = (0..self.num_classes)
            .map(|c| format!("{:?}-{c}", self.shapes[c % self.shapes.len()]).to_lowercase())
            .collect();
        let mut ds = Dataset::from_raw(s, self.channels, names, images, labels)?;
        ds.foreground = Some(masks);
        Ok(ds)
    }
}

/// Outcome of reading an image directory.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Reads `root/<class>/<image>.{png,ppm}`; class ids follow lexicographic
/// folder order. Unreadable files are skipped and reported; a class with no
/// readable image is an error. Pixel values are scaled to `[0, 1]` but not
/// yet normalized.
pub fn ingest_dir(root: &Path, image_size: usize, channels: usize) -> Result<IngestReport> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("{channels} channels; directory images need 1 or 3")));
    }
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class folders", root.display())));
    }
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    let side = image_size as u32;
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut count = 0;
        for path in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
            let img = match image::open(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    skipped.push((path, e.to_string()));
                    continue;
                }
            };
            let img = img.resize_exact(side, side, image::imageops::FilterType::Triangle);
            let plane = image_size * image_size;
            let start = images.len();
            images.resize(start + channels * plane, 0.0);
            let buf = &mut images[start..];
            if channels == 3 {
                for (p, px) in img.to_rgb8().pixels().enumerate() {
                    for c in 0..3 {
                        buf[c * plane + p] = px[c] as f32 / 255.0;
                    }
                }
            } else {
                for (p, px) in img.to_luma8().pixels().enumerate() {
                    buf[p] = px[0] as f32 / 255.0;
                }
            }
            labels.push(label);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Dataset(format!("class folder {} holds no readable image", dir.display())));
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} unreadable file(s) under {}", skipped.len(), root.display());
    }
    Ok(IngestReport {
        dataset: Dataset::from_raw(image_size, channels, names, images, labels)?,
        skipped,
    })
}

/// Deterministic stratified split; returns `(train, test)` index lists.
pub fn split_indices(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = Rng::derive(seed, 0x5eed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
