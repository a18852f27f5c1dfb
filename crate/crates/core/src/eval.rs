//! Frozen-feature evaluation: linear probing and cosine retrieval.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::DualEncoder;
use crate::layers::Linear;
use crate::numerics::{Binder, CosineSchedule, OptimizerKind, OptimizerState, ParamStore, Rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-major `[M × D]` features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl FeatureBank {
    pub fn new(features: Vec<f32>, dim: usize, labels: Vec<usize>, split: Split) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Contract(format!(
                "{} feature values for {} labels of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

const EXTRACT_BATCH: usize = 64;

/// Backbone class-token features of the query encoder on un-augmented images.
pub fn extract_features(encoder: &DualEncoder<f32>, data: &Dataset, split: Split) -> Result<FeatureBank> {
    if data.is_empty() {
        return Err(Error::Contract("cannot extract features from an empty dataset".into()));
    }
    let mut features = Vec::new();
    let mut dim = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EXTRACT_BATCH) {
        let f = encoder.query_features(&data.batch(chunk))?;
        dim = f.shape()[1];
        features.extend_from_slice(f.data());
    }
    FeatureBank::new(features, dim, data.labels().to_vec(), split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            weight_decay: 0.0,
            momentum: 0.9,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
}

/// Class indices by descending score; equal scores keep ascending index.
fn ranked(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // `+ 0.0` folds −0 into +0 so signed zeros tie.
    idx.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(a.cmp(&b)));
    idx
}

/// Fraction of rows whose label is among the `k` best-scored classes.
pub fn top_k_accuracy(logits: &[f32], classes: usize, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| ranked(&logits[i * classes..(i + 1) * classes]).iter().take(k).any(|&c| c == y))
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains a linear classifier on `train` and scores it on `test`; the
/// features, and so the encoder, are never modified.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract("linear probe needs non-empty train and test banks".into()));
    }
    if train.dim != test.dim {
        return Err(Error::Contract(format!("feature dims {} vs {}", train.dim, test.dim)));
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Contract("linear probe needs at least two classes".into()));
    }
    let mut rng = Rng::derive(cfg.seed, 0x9b0be);
    let mut store = ParamStore::<f32>::new();
    let head = Linear::new(&mut store, "probe", train.dim, classes, &mut rng);
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum), cfg.weight_decay, &store);
    let b = cfg.batch_size.max(1).min(train.len());
    let steps_per_epoch = train.len().div_ceil(b);
    let schedule = CosineSchedule::new(cfg.lr, 0.0, (cfg.epochs * steps_per_epoch) as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(b) {
            let mut x = Vec::with_capacity(chunk.len() * train.dim);
            for &i in chunk {
                x.extend_from_slice(train.row(i));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let binder = Binder::trainable(&tape, &store);
            let xv = tape.constant(Tensor::new(&[chunk.len(), train.dim], x)?);
            let loss = head.forward(&binder, xv)?.cross_entropy(&labels)?;
            let grads = tape.backward(loss)?;
            let bindings = binder.into_bindings();
            store.zero_grad();
            store.accumulate_grads(&bindings, &grads)?;
            opt.step(&mut store, schedule.lr(step))?;
            step += 1;
        }
    }
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &store);
    let xv = tape.constant(Tensor::new(&[test.len(), test.dim], test.features.clone())?);
    let logits = head.forward(&binder, xv)?.detach();
    Ok(ProbeResult {
        top1: top_k_accuracy(logits.data(), classes, &test.labels, 1),
        top5: top_k_accuracy(logits.data(), classes, &test.labels, 5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    /// Queries left out because no gallery item shares their label.
    pub excluded_queries: usize,
    pub evaluated_queries: usize,
    /// Set when every query was excluded; the metrics are then 0.
    pub empty: bool,
}

fn unit_rows(bank: &FeatureBank) -> Vec<Vec<f64>> {
    (0..bank.len())
        .map(|i| {
            let r = bank.row(i);
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|&v| v as f64 / n).collect()
        })
        .collect()
}

/// Cosine-similarity retrieval. With `same_bank`, query `i` and gallery
/// item `i` are the same image and that pair is skipped.
pub fn retrieve(queries: &FeatureBank, gallery: &FeatureBank, same_bank: bool) -> Result<RetrievalResult> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Contract("retrieval needs non-empty query and gallery banks".into()));
    }
    if queries.dim != gallery.dim {
        return Err(Error::Contract(format!("feature dims {} vs {}", queries.dim, gallery.dim)));
    }
    if same_bank && queries.len() != gallery.len() {
        return Err(Error::Contract("a shared bank must serve as both query and gallery".into()));
    }
    let (q, g) = (unit_rows(queries), unit_rows(gallery));
    let (mut r1, mut r5, mut ap_sum) = (0.0, 0.0, 0.0);
    let (mut excluded, mut evaluated) = (0, 0);
    for (i, qi) in q.iter().enumerate() {
        let mut cand: Vec<(usize, f64)> = g
            .iter()
            .enumerate()
            .filter(|&(j, _)| !(same_bank && j == i))
            .map(|(j, gj)| (j, qi.iter().zip(gj).map(|(a, b)| a * b).sum()))
            .collect();
        cand.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
        let relevant: Vec<bool> = cand
            .iter()
            .map(|&(j, _)| gallery.labels[j] == queries.labels[i])
            .collect();
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        r1 += f64::from(u8::from(relevant[0]));
        r5 += f64::from(u8::from(relevant.iter().take(5).any(|&r| r)));
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, &rel) in relevant.iter().enumerate() {
            if rel {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / total as f64;
    }
    let n = evaluated.max(1) as f64;
    Ok(RetrievalResult {
        rank1: r1 / n,
        rank5: r5 / n,
        map: ap_sum / n,
        excluded_queries: excluded,
        evaluated_queries: evaluated,
        empty: evaluated == 0,
    })
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<S: Serialize>(config: &S) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub map: Option<f64>,
    pub excluded_queries: Option<usize>,
    pub config_hash: String,
}

impl Report {
    pub fn with_probe(mut self, p: &ProbeResult) -> Self {
        self.top1 = Some(p.top1);
        self.top5 = Some(p.top5);
        self
    }

    pub fn with_retrieval(mut self, r: &RetrievalResult) -> Self {
        self.rank1 = Some(r.rank1);
        self.rank5 = Some(r.rank5);
        self.map = Some(r.map);
        self.excluded_queries = Some(r.excluded_queries);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[[f32; 2]], labels: &[usize]) -> FeatureBank {
        FeatureBank::new(rows.iter().flatten().copied().collect(), 2, labels.to_vec(), Split::Test).unwrap()
    }

    #[test]
    fn ties_favor_low_class_index() {
        let logits = [1.0, 1.0, 0.0, 0.0, 2.0, 2.0];
        assert_eq!(top_k_accuracy(&logits, 3, &[0, 2], 1), 0.5);
        assert_eq!(top_k_accuracy(&logits, 3, &[1, 2], 5), 1.0);
    }

    #[test]
    fn retrieval_by_hand() {
        let g = bank(&[[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]], &[0, 1, 1]);
        let q = bank(&[[1.0, 0.05]], &[1]);
        let r = retrieve(&q, &g, false).unwrap();
        // Ranked gallery: 0 (wrong), 2 (right), 1 (right).
        assert_eq!(r.rank1, 0.0);
        assert_eq!(r.rank5, 1.0);
        assert!((r.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn self_match_is_excluded() {
        let b = bank(&[[1.0, 0.0], [0.0, 1.0], [0.1, 1.0]], &[0, 1, 1]);
        let r = retrieve(&b, &b, true).unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.evaluated_queries, 2);
        assert_eq!(r.rank1, 1.0);
        let lonely = bank(&[[1.0, 0.0]], &[0]);
        assert!(retrieve(&lonely, &lonely, true).unwrap().empty);
    }

    #[test]
    fn probe_separates_separable_classes() {
        let rows: Vec<[f32; 2]> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [s + 0.01 * i as f32, 0.3]
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let b = bank(&rows, &labels);
        let cfg = ProbeConfig { epochs: 20, ..ProbeConfig::default() };
        let before = b.clone();
        let r = linear_probe(&b, &b, &cfg).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.top5, 1.0);
        assert_eq!(b, before);
        let one = bank(&[[1.0, 0.0]], &[0]);
        assert!(matches!(linear_probe(&one, &one, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = config_hash(&ProbeConfig::default()).unwrap();
        let b = config_hash(&ProbeConfig { lr: 0.1, ..ProbeConfig::default() }).unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
    }
}
