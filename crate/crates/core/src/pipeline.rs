//! Two-view augmentation and the global-local pre-training loop.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{DualEncoder, HeadConfig};
use crate::losses::{total_loss, BranchOutputs, LossConfig};
use crate::masking::{apply_batch, build_masks, kept_count, MaskStrategy, PatchMask};
use crate::numerics::{Binder, CosineSchedule, OptimizerKind, OptimizerState, Rng, Tape, Tensor};
use crate::vit::VitConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, `[min, max]`.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Brightness offset and contrast factor are drawn from `±strength`.
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.2,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Random-resized-crop recipe suited to full-size images.
    pub fn cropping() -> Self {
        Self {
            crop_scale: (0.4, 1.0),
            jitter_strength: 0.4,
            ..Self::default()
        }
    }

    /// Leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) outside (0, 1]")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!(
                "jitter_strength {} outside [0, 1)",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

const CROP_ATTEMPTS: usize = 10;

/// Crop window `(y0, x0, h, w)` with area fraction in `scale` and aspect
/// ratio in `[3/4, 4/3]`; falls back to the whole image.
fn crop_window(side: usize, scale: (f64, f64), rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (side * side) as f64;
    let (lr_lo, lr_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.uniform_range(scale.0, scale.1);
        let aspect = rng.uniform_range(lr_lo, lr_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=side).contains(&w) && (1..=side).contains(&h) {
            let y0 = rng.below(side - h + 1);
            let x0 = rng.below(side - w + 1);
            return (y0, x0, h, w);
        }
    }
    (0, 0, side, side)
}

/// Bilinear resample of the window back to `side × side`, half-pixel
/// centers. A full-image window reproduces the input exactly.
fn resize_crop(src: &[f32], channels: usize, side: usize, win: (usize, usize, usize, usize)) -> Vec<f32> {
    let (y0, x0, h, w) = win;
    let plane = side * side;
    let mut out = vec![0f32; channels * plane];
    let (sy, sx) = (h as f64 / side as f64, w as f64 / side as f64);
    let coord = |d: usize, s: f64, len: usize| {
        let c = ((d as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = c.floor() as usize;
        (i0, (i0 + 1).min(len - 1), (c - i0 as f64) as f32)
    };
    for oy in 0..side {
        let (ya, yb, fy) = coord(oy, sy, h);
        for ox in 0..side {
            let (xa, xb, fx) = coord(ox, sx, w);
            for c in 0..channels {
                let at = |y: usize, x: usize| src[c * plane + (y0 + y) * side + x0 + x];
                let top = at(ya, xa) + fx * (at(ya, xb) - at(ya, xa));
                let bot = at(yb, xa) + fx * (at(yb, xb) - at(yb, xa));
                out[c * plane + oy * side + ox] = top + fy * (bot - top);
            }
        }
    }
    out
}

/// One augmented view of a `[C × s × s]` image.
pub fn augment_view(image: &[f32], vit: &VitConfig, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    let (c, s) = (vit.channels, vit.image_size);
    let plane = s * s;
    let win = crop_window(s, cfg.crop_scale, rng);
    let mut v = if win == (0, 0, s, s) {
        image.to_vec()
    } else {
        resize_crop(image, c, s, win)
    };
    if rng.bernoulli(cfg.flip_prob) {
        for ch in v.chunks_mut(plane) {
            for row in ch.chunks_mut(s) {
                row.reverse();
            }
        }
    }
    if cfg.jitter_strength > 0.0 {
        let j = cfg.jitter_strength;
        let brightness = rng.uniform_range(-j, j) as f32;
        let contrast = rng.uniform_range(1.0 - j, 1.0 + j) as f32;
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        v.iter_mut()
            .for_each(|x| *x = (*x - mean) * contrast + mean + brightness);
    }
    if c == 3 && rng.bernoulli(cfg.grayscale_prob) {
        for p in 0..plane {
            let y = 0.299 * v[p] + 0.587 * v[plane + p] + 0.114 * v[2 * plane + p];
            v[p] = y;
            v[plane + p] = y;
            v[2 * plane + p] = y;
        }
    }
    v
}

/// Two independent views of one image.
pub fn augment(image: &[f32], vit: &VitConfig, cfg: &AugmentConfig, rng: &mut Rng) -> (Vec<f32>, Vec<f32>) {
    let a = augment_view(image, vit, cfg, rng);
    let b = augment_view(image, vit, cfg, rng);
    (a, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Momentum coefficient of the key encoder.
    pub momentum: f64,
    pub temperature: f64,
    pub masking_ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr_max: 4e-4,
            lr_min: 1e-5,
            weight_decay: 0.1,
            momentum: 0.99,
            temperature: 0.2,
            masking_ratio: 0.7,
            strategy: MaskStrategy::Location,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale fine-grained recipe: ratio 0.7, weight decay 0.5, 100 epochs.
    pub fn fine_grained() -> Self {
        Self {
            epochs: 100,
            weight_decay: 0.5,
            ..Self::default()
        }
    }

    /// Full-scale generic recipe: as [`Self::fine_grained`] with ratio 0.3.
    pub fn generic() -> Self {
        Self {
            masking_ratio: 0.3,
            ..Self::fine_grained()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates need 0 <= lr_min <= lr_max, lr_max > 0; got {} / {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        LossConfig {
            temperature: self.temperature,
        }
        .validate()?;
        kept_count(1, self.masking_ratio)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        if dataset_len < self.batch_size {
            usize::from(dataset_len > 0)
        } else {
            dataset_len / self.batch_size
        }
    }
}

/// Everything needed to rebuild a trainer from scratch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub vit: VitConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.heads.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub loss_g: f64,
    pub loss_l: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub mean_loss: f64,
    pub mean_loss_g: f64,
    pub mean_loss_l: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: PretrainConfig,
    pub encoder: DualEncoder<f32>,
    pub optimizer: OptimizerState<f32>,
    schedule: CosineSchedule,
    rng: Rng,
    step: u64,
    epoch: u64,
    last_masks: Option<Vec<PatchMask>>,
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

impl Trainer {
    /// Fresh encoders and optimizer for `dataset_len` training images.
    pub fn new(config: PretrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let mut init = Rng::derive(t.seed, INIT_STREAM);
        let encoder = DualEncoder::new(&config.vit, &config.heads, t.momentum, &mut init)?;
        let optimizer = OptimizerState::new(OptimizerKind::adamw(), t.weight_decay, &encoder.query);
        let total = (t.epochs * t.steps_per_epoch(dataset_len)) as u64;
        Ok(Self {
            schedule: CosineSchedule::new(t.lr_max, t.lr_min, total),
            rng: Rng::derive(t.seed, DATA_STREAM),
            config,
            encoder,
            optimizer,
            step: 0,
            epoch: 0,
            last_masks: None,
        })
    }

    /// Reassembles a trainer from saved parts, checking they belong together.
    pub(crate) fn from_parts(
        config: PretrainConfig,
        encoder: DualEncoder<f32>,
        optimizer: OptimizerState<f32>,
        rng: Rng,
        step: u64,
        epoch: u64,
        total_steps: u64,
    ) -> Result<Self> {
        let t = &config.train;
        let trainer = Self {
            schedule: CosineSchedule::new(t.lr_max, t.lr_min, total_steps),
            config,
            encoder,
            optimizer,
            rng,
            step,
            epoch,
            last_masks: None,
        };
        trainer.check_optimizer_alignment()?;
        Ok(trainer)
    }

    fn check_optimizer_alignment(&self) -> Result<()> {
        let names: Vec<&str> = self.encoder.query.iter().map(|(n, _)| n).collect();
        if names.len() != self.optimizer.param_names().len()
            || names.iter().zip(self.optimizer.param_names()).any(|(a, b)| a != b)
        {
            return Err(Error::Contract(
                "optimizer does not cover exactly the query encoder parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Masks applied to the first view of each pair in the latest step.
    pub fn last_masks(&self) -> Option<&[PatchMask]> {
        self.last_masks.as_deref()
    }

    fn views(&mut self, data: &Dataset, batch: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let vit = &self.config.vit;
        let [c, s, _] = vit.image_shape();
        if data.channels != c || data.image_size != s {
            return Err(Error::Config(format!(
                "dataset images are {}×{s2}×{s2}, encoder expects {c}×{s}×{s}",
                data.channels,
                s2 = data.image_size
            )));
        }
        let (mut x1, mut x2) = (Vec::new(), Vec::new());
        for &i in batch {
            let (a, b) = augment(data.image(i), vit, &self.config.augment, &mut self.rng);
            x1.extend(a);
            x2.extend(b);
        }
        let shape = [batch.len(), c, s, s];
        Ok((Tensor::new(&shape, x1)?, Tensor::new(&shape, x2)?))
    }

    /// One optimization step on the images `batch` of `data`.
    pub fn train_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<StepReport> {
        self.check_optimizer_alignment()?;
        let (x1, x2) = self.views(data, batch)?;
        let t = self.config.train.clone();
        let tape = Tape::new();
        let binder = Binder::trainable(&tape, &self.encoder.query);
        let z_q1 = self.encoder.encode_query(&binder, &x1)?;
        let z_q2 = self.encoder.encode_query(&binder, &x2)?;
        let (z_k1, attn1) = self.encoder.encode_key_with_attention(&x1)?;
        let (z_k2, attn2) = self.encoder.encode_key_with_attention(&x2)?;
        let masks1 = build_masks(t.strategy, &attn1, t.masking_ratio, &mut self.rng)?;
        let masks2 = build_masks(t.strategy, &attn2, t.masking_ratio, &mut self.rng)?;
        let local = match (&masks1, &masks2) {
            (Some(m1), Some(m2)) => {
                let vit = &self.config.vit;
                let l1 = self.encoder.encode_key(&apply_batch(m1, &x1, vit)?)?;
                let l2 = self.encoder.encode_key(&apply_batch(m2, &x2, vit)?)?;
                Some((l1, l2))
            }
            _ => None,
        };
        let terms = total_loss(
            BranchOutputs {
                z_q1,
                z_q2,
                z_k1,
                z_k2,
                local,
            },
            t.temperature,
        )?;
        let loss = terms.total.value().item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (epoch {})",
                self.step, self.epoch
            )));
        }
        let report = StepReport {
            step: self.step,
            epoch: self.epoch,
            loss,
            loss_g: terms.global.value().item() as f64,
            loss_l: terms.local.map(|l| l.value().item() as f64),
            lr: self.schedule.lr(self.step),
        };
        let grads = tape.backward(terms.total)?;
        let bindings = binder.into_bindings();
        self.encoder.query.zero_grad();
        self.encoder.query.accumulate_grads(&bindings, &grads)?;
        self.optimizer.step(&mut self.encoder.query, report.lr)?;
        self.encoder.query.zero_grad();
        self.encoder.momentum_update()?;
        self.last_masks = masks1;
        self.step += 1;
        Ok(report)
    }

    /// One pass over `data` in a freshly shuffled order; incomplete trailing
    /// batches are dropped. `on_step` sees every step report.
    pub fn train_epoch(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<EpochReport> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let b = self.config.train.batch_size.min(data.len().max(1));
        let steps = self.config.train.steps_per_epoch(data.len());
        if steps == 0 {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let (mut sum, mut sum_g, mut sum_l) = (0.0, 0.0, None::<f64>);
        for chunk in order.chunks(b).take(steps) {
            let r = self.train_step(data, chunk)?;
            sum += r.loss;
            sum_g += r.loss_g;
            if let Some(l) = r.loss_l {
                *sum_l.get_or_insert(0.0) += l;
            }
            on_step(&r);
        }
        let n = steps as f64;
        let report = EpochReport {
            epoch: self.epoch,
            mean_loss: sum / n,
            mean_loss_g: sum_g / n,
            mean_loss_l: sum_l.map(|s| s / n),
            steps,
        };
        self.epoch += 1;
        Ok(report)
    }
}
