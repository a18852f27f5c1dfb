//! Pivotal-region selection from fused class-token attention, the baseline
//! mask layouts, and pixel-level mask application.
//!
//! Per view: head-average each layer's attention, take the class-token row
//! over the patches, multiply the rows of all layers together (accumulated as
//! a sum of logs), keep the top `K = max(1, round((1−r)·N))` patches and zero
//! the pixels of the rest.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Rng, Tensor};
use crate::vit::{AttentionStack, VitConfig};

/// Guard added before taking logs of attention weights.
pub const FUSION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Top-K by fused attention.
    Location,
    Random,
    Grid,
    Border,
    /// Local branch disabled.
    None,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "location" => Ok(Self::Location),
            "random" => Ok(Self::Random),
            "grid" => Ok(Self::Grid),
            "border" => Ok(Self::Border),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Grid,
    Border,
}

/// Fused importance of the N patches of one view, in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImportance {
    pub log_weights: Vec<f64>,
    pub view_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    keep: Vec<bool>,
    /// Log-domain weight of the weakest kept patch; `None` for masks not
    /// derived from attention.
    threshold: Option<f64>,
    ratio: f64,
    /// Ratio the caller asked for when the layout implies its own.
    requested_ratio: f64,
}

impl PatchMask {
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn requested_ratio(&self) -> f64 {
        self.requested_ratio
    }

    pub fn num_patches(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn all_keep(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            threshold: None,
            ratio: 0.0,
            requested_ratio: 0.0,
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        let n = keep.len();
        let k = keep.iter().filter(|&&v| v).count();
        if k == 0 {
            return Err(Error::Contract("a mask must keep at least one patch".into()));
        }
        let ratio = 1.0 - k as f64 / n as f64;
        Ok(Self {
            keep,
            threshold: None,
            ratio,
            requested_ratio: ratio,
        })
    }

    /// The `√N × √N` keep grid, row-major.
    pub fn grid(&self) -> Result<Vec<Vec<bool>>> {
        let g = grid_side(self.keep.len())?;
        Ok(self.keep.chunks(g).map(<[bool]>::to_vec).collect())
    }
}

/// Pixel-level expansion of a [`PatchMask`]: `s × s` values in `{0, 1}`,
/// shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<u8>,
}

impl PixelMask {
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("masking ratio {r} outside [0, 1)")))
    }
}

fn grid_side(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || n == 0 {
        return Err(Error::Config(format!("{n} patches do not form a square grid")));
    }
    Ok(g)
}

/// `max(1, round((1−r)·N))`, rounding halves up.
pub fn kept_count(n: usize, r: f64) -> Result<usize> {
    check_ratio(r)?;
    let k = ((1.0 - r) * n as f64).round() as usize;
    Ok(k.clamp(1, n.max(1)))
}

/// Head-averaged class→patch attention, indexed `[view][layer][patch]`.
pub fn extract_class_attention<T: Float>(attn: &AttentionStack<T>) -> Result<Vec<Vec<Vec<f64>>>> {
    if attn.num_layers() == 0 {
        return Err(Error::Contract("attention stack has no layers".into()));
    }
    let (b, t) = (attn.batch(), attn.tokens());
    let n = t - 1;
    let mut out = vec![Vec::with_capacity(attn.num_layers()); b];
    for l in 0..attn.num_layers() {
        let rows = attn.class_rows(l);
        for (v, row) in rows.data().chunks(n).enumerate() {
            out[v].push(row.iter().map(|x| x.as_f64()).collect());
        }
    }
    Ok(out)
}

/// Hadamard product of the per-layer vectors, as `Σ_l log(a_l + ε)`.
pub fn fuse_attention(vectors: &[Vec<f64>], view_index: usize) -> Result<FusedImportance> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Contract("no attention vectors to fuse".into()))?;
    let n = first.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != n) {
        return Err(Error::Contract(format!(
            "attention vectors of length {n} and {}",
            v.len()
        )));
    }
    if vectors.iter().flatten().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Contract("attention weights must be finite and >= 0".into()));
    }
    let mut log_weights = vec![0.0; n];
    for v in vectors {
        for (acc, &a) in log_weights.iter_mut().zip(v) {
            *acc += (a + FUSION_EPS).ln();
        }
    }
    Ok(FusedImportance {
        log_weights,
        view_index,
    })
}

/// Descending order of `weights`, ties broken by ascending index.
fn rank_order(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    // `+ 0.0` folds −0 into +0 so signed zeros tie.
    idx.sort_by(|&a, &b| (weights[b] + 0.0).total_cmp(&(weights[a] + 0.0)).then(a.cmp(&b)));
    idx
}

/// Keeps the `K` highest-ranked patches.
pub fn select_pivotal(fi: &FusedImportance, r: f64) -> Result<PatchMask> {
    let n = fi.log_weights.len();
    let k = kept_count(n, r)?;
    if n == 0 {
        return Err(Error::Contract("no patches".into()));
    }
    let order = rank_order(&fi.log_weights);
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(PatchMask {
        keep,
        threshold: Some(fi.log_weights[order[k - 1]]),
        ratio: r,
        requested_ratio: r,
    })
}

/// Location-wise masks for every view of an attention stack.
pub fn location_masks<T: Float>(attn: &AttentionStack<T>, r: f64) -> Result<Vec<PatchMask>> {
    extract_class_attention(attn)?
        .iter()
        .enumerate()
        .map(|(v, layers)| select_pivotal(&fuse_attention(layers, v)?, r))
        .collect()
}

/// The fixed or random layouts the location-wise strategy is compared to.
///
/// `Grid` keeps the top-left patch of every 2×2 tile and ignores `r` (its
/// implied ratio is 0.75; the requested one is kept on the mask). `Border`
/// keeps a centred square of side `⌈√K⌉`, trimmed to `K` by dropping its
/// outermost patches first, raster order among equals.
pub fn baseline_mask(kind: BaselineKind, n: usize, r: f64, rng: &mut Rng) -> Result<PatchMask> {
    let k = kept_count(n, r)?;
    let g = grid_side(n)?;
    let mut keep = vec![false; n];
    let mut ratio = r;
    match kind {
        BaselineKind::Random => {
            for i in rng.sample_indices(n, k) {
                keep[i] = true;
            }
        }
        BaselineKind::Grid => {
            for row in (0..g).step_by(2) {
                for col in (0..g).step_by(2) {
                    keep[row * g + col] = true;
                }
            }
            ratio = 1.0 - keep.iter().filter(|&&v| v).count() as f64 / n as f64;
        }
        BaselineKind::Border => {
            let side = ((k as f64).sqrt().ceil() as usize).min(g);
            let off = (g - side) / 2;
            // Twice the Chebyshev distance from the square's centre.
            let ring = |i: usize| {
                let c2 = 2 * off + side - 1;
                let (y, x) = (2 * (i / g), 2 * (i % g));
                y.abs_diff(c2).max(x.abs_diff(c2))
            };
            let mut square: Vec<usize> = (off..off + side)
                .flat_map(|y| (off..off + side).map(move |x| y * g + x))
                .collect();
            square.sort_by(|&a, &b| ring(b).cmp(&ring(a)).then(a.cmp(&b)));
            for &i in &square[square.len() - k..] {
                keep[i] = true;
            }
        }
    }
    Ok(PatchMask {
        keep,
        threshold: None,
        ratio,
        requested_ratio: r,
    })
}

/// Masks for a batch under `strategy`; `None` for a disabled local branch.
pub fn build_masks<T: Float>(
    strategy: MaskStrategy,
    attn: &AttentionStack<T>,
    r: f64,
    rng: &mut Rng,
) -> Result<Option<Vec<PatchMask>>> {
    let n = attn.tokens().saturating_sub(1);
    let kind = match strategy {
        MaskStrategy::None => return Ok(None),
        MaskStrategy::Location => return location_masks(attn, r).map(Some),
        MaskStrategy::Random => BaselineKind::Random,
        MaskStrategy::Grid => BaselineKind::Grid,
        MaskStrategy::Border => BaselineKind::Border,
    };
    (0..attn.batch())
        .map(|_| baseline_mask(kind, n, r, rng))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn pixel_mask(mask: &PatchMask, cfg: &VitConfig) -> Result<PixelMask> {
    let g = grid_side(mask.num_patches())?;
    if g != cfg.grid_side() {
        return Err(Error::Config(format!(
            "mask grid {g}×{g} does not match a {}×{} patch grid",
            cfg.grid_side(),
            cfg.grid_side()
        )));
    }
    let (s, p) = (cfg.image_size, cfg.patch_size);
    let values = (0..s * s)
        .map(|i| u8::from(mask.keep[(i / s / p) * g + (i % s) / p]))
        .collect();
    Ok(PixelMask {
        side: s,
        channels: cfg.channels,
        values,
    })
}

/// `MP ⊙ x` for one `[C × s × s]` view.
pub fn expand_and_apply<T: Float>(mask: &PatchMask, view: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    if view.shape() != cfg.image_shape() {
        return Err(Error::dim(
            "apply_mask",
            format!("view {:?}, config {:?}", view.shape(), cfg.image_shape()),
        ));
    }
    let mp = pixel_mask(mask, cfg)?;
    let plane = mp.values.len();
    let data = view
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * T::lit(mp.values[i % plane] as f64))
        .collect();
    Tensor::new(view.shape(), data)
}

/// [`expand_and_apply`] over a `[B × C × s × s]` batch, one mask per view.
pub fn apply_batch<T: Float>(masks: &[PatchMask], views: &Tensor<T>, cfg: &VitConfig) -> Result<Tensor<T>> {
    let per: usize = cfg.image_shape().iter().product();
    if views.numel() != masks.len() * per {
        return Err(Error::dim(
            "apply_mask",
            format!("{} masks for views {:?}", masks.len(), views.shape()),
        ));
    }
    let mut out = Vec::with_capacity(views.numel());
    for (m, chunk) in masks.iter().zip(views.data().chunks(per)) {
        let v = Tensor::new(&cfg.image_shape(), chunk.to_vec())?;
        out.extend(expand_and_apply(m, &v, cfg)?.into_data());
    }
    Tensor::new(views.shape(), out)
}

/// Sidecar written next to each dumped masked view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub view_id: usize,
    pub ratio: f64,
    pub kept_indices: Vec<usize>,
    #[serde(rename = "A_t")]
    pub threshold: Option<f64>,
}

impl MaskRecord {
    pub fn new(view_id: usize, mask: &PatchMask) -> Self {
        Self {
            view_id,
            ratio: mask.ratio,
            kept_indices: mask.kept_indices(),
            threshold: mask.threshold,
        }
    }
}

/// Binary PPM (P6), 8-bit RGB, rows top to bottom.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dim("write_ppm", format!("{} bytes for {width}×{height}", rgb.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg4() -> VitConfig {
        VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            layers: 1,
            heads: 1,
            mlp_ratio: 1.0,
        }
    }

    #[test]
    fn kept_count_examples() {
        assert_eq!(kept_count(196, 0.7).unwrap(), 59);
        assert_eq!(kept_count(16, 0.0).unwrap(), 16);
        assert_eq!(kept_count(4, 0.99).unwrap(), 1);
        assert!(kept_count(16, 1.0).is_err());
        assert!(kept_count(16, -0.1).is_err());
    }

    #[test]
    fn hand_sorted_selection() {
        let fi = FusedImportance {
            log_weights: [0.4f64, 0.1, 0.3, 0.2].iter().map(|w| w.ln()).collect(),
            view_index: 0,
        };
        let m = select_pivotal(&fi, 0.5).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 2]);
        assert_eq!(m.threshold(), Some(0.3f64.ln()));
        let all = select_pivotal(&fi, 0.0).unwrap();
        assert_eq!(all.kept_count(), 4);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let fi = FusedImportance {
            log_weights: vec![0.0; 4],
            view_index: 0,
        };
        assert_eq!(select_pivotal(&fi, 0.5).unwrap().kept_indices(), vec![0, 1]);
    }

    #[test]
    fn hand_class_attention_average() {
        // B=1, H=2, one class row per head over 3 tokens.
        let mut data = vec![0.0f64; 2 * 9];
        data[..3].copy_from_slice(&[0.2, 0.3, 0.5]);
        data[9..12].copy_from_slice(&[0.4, 0.4, 0.2]);
        for h in 0..2 {
            for r in 1..3 {
                data[h * 9 + r * 3 + r] = 1.0;
            }
        }
        let stack = AttentionStack::new(vec![Tensor::new(&[1, 2, 3, 3], data).unwrap()]).unwrap();
        let a = extract_class_attention(&stack).unwrap();
        assert_eq!(a.len(), 1);
        let row = &a[0][0];
        assert!((row[0] - 0.35).abs() < 1e-12 && (row[1] - 0.35).abs() < 1e-12);
        assert!(extract_class_attention(&AttentionStack::<f64>::new(vec![]).unwrap()).is_err());
    }

    #[test]
    fn uniform_attention_gives_constant_vector() {
        let t = 5;
        let stack = AttentionStack::new(vec![Tensor::<f32>::full(&[1, 3, t, t], 0.2)]).unwrap();
        let a = extract_class_attention(&stack).unwrap();
        assert!(a[0][0].iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn fusion_by_hand() {
        let fi = fuse_attention(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.2, 0.7]], 0).unwrap();
        assert_eq!(rank_order(&fi.log_weights), vec![2, 1, 0]);
        let with_ones = fuse_attention(&[vec![0.2, 0.3, 0.5], vec![1.0; 3]], 0).unwrap();
        assert_eq!(rank_order(&with_ones.log_weights), vec![2, 1, 0]);
        assert!(fuse_attention(&[vec![0.2, 0.3], vec![0.1]], 0).is_err());
        assert!(fuse_attention(&[], 0).is_err());
    }

    #[test]
    fn checkerboard_expansion() {
        let cfg = cfg4();
        let mask = PatchMask::from_keep(vec![true, false, false, true]).unwrap();
        let img = Tensor::<f32>::full(&[1, 4, 4], 5.0);
        let out = expand_and_apply(&mask, &img, &cfg).unwrap();
        #[rustfmt::skip]
        let want = [
            5., 5., 0., 0.,
            5., 5., 0., 0.,
            0., 0., 5., 5.,
            0., 0., 5., 5.,
        ];
        assert_eq!(out.data(), &want);
    }

    #[test]
    fn all_keep_is_identity_and_single_keep_counts() {
        let cfg = VitConfig::default();
        let mut rng = Rng::seed(0);
        let img = Tensor::<f32>::from_fn(&cfg.image_shape(), |_| rng.normal() as f32);
        let out = expand_and_apply(&PatchMask::all_keep(16), &img, &cfg).unwrap();
        assert_eq!(out, img);

        let mut keep = vec![false; 16];
        keep[6] = true;
        let m = PatchMask::from_keep(keep).unwrap();
        let ones = Tensor::<f32>::full(&cfg.image_shape(), 1.0);
        let out = expand_and_apply(&m, &ones, &cfg).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v != 0.0).count(), 8 * 8 * 3);
    }

    #[test]
    fn non_square_patch_count_rejected() {
        let m = PatchMask::from_keep(vec![true, false, true]).unwrap();
        assert!(matches!(m.grid(), Err(Error::Config(_))));
        assert!(baseline_mask(BaselineKind::Grid, 12, 0.5, &mut Rng::seed(0)).is_err());
    }

    #[test]
    fn grid_layout_top_left_anchor() {
        let m = baseline_mask(BaselineKind::Grid, 16, 0.3, &mut Rng::seed(0)).unwrap();
        assert_eq!(m.kept_indices(), vec![0, 2, 8, 10]);
        assert_eq!(m.ratio(), 0.75);
        assert_eq!(m.requested_ratio(), 0.3);
    }

    #[test]
    fn border_layout_keeps_centre() {
        let m = baseline_mask(BaselineKind::Border, 16, 0.75, &mut Rng::seed(0)).unwrap();
        assert_eq!(m.kept_indices(), vec![5, 6, 9, 10]);
        for r in [0.3, 0.6, 0.7, 0.8] {
            for n in [4, 16, 196] {
                let m = baseline_mask(BaselineKind::Border, n, r, &mut Rng::seed(0)).unwrap();
                assert_eq!(m.kept_count(), kept_count(n, r).unwrap());
            }
        }
    }

    #[test]
    fn random_layout_is_seeded() {
        let a = baseline_mask(BaselineKind::Random, 196, 0.7, &mut Rng::seed(11)).unwrap();
        let b = baseline_mask(BaselineKind::Random, 196, 0.7, &mut Rng::seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kept_count(), 59);
    }

    #[test]
    fn ppm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&path, 2, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[1, 2, 3, 4, 5, 6]);
    }
}
