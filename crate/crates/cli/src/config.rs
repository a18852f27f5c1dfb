//! Flat run configuration and its resolution from defaults, a JSON file,
//! the environment and `--key value` flags, in that order of precedence.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use lodisc::data::SyntheticSpec;
use lodisc::eval::ProbeConfig;
use lodisc::heads::HeadConfig;
use lodisc::masking::MaskStrategy;
use lodisc::pipeline::{AugmentConfig, PretrainConfig, TrainConfig};
use lodisc::vit::VitConfig;

use crate::CliError;

pub const SEED_ENV: &str = "LODISC_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Probe,
    Retrieve,
    DumpMasks,
    Sweep,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "pretrain" => Command::Pretrain,
            "probe" => Command::Probe,
            "retrieve" => Command::Retrieve,
            "dump-masks" => Command::DumpMasks,
            "sweep" => Command::Sweep,
            other => return Err(CliError::Usage(format!("unknown command {other:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Probe => "probe",
            Command::Retrieve => "retrieve",
            Command::DumpMasks => "dump-masks",
            Command::Sweep => "sweep",
        }
    }
}

/// Masking ratios visited by `sweep`.
pub const SWEEP_RATIOS: [f64; 4] = [0.3, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory of class folders; the synthetic generator is used when unset.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Checkpoint read by `probe`, `retrieve` and `dump-masks`.
    pub checkpoint: Option<PathBuf>,
    pub test_fraction: f64,

    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_noise: f64,

    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub hidden_dim: usize,
    pub out_dim: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub masking_ratio: f64,
    pub strategy: MaskStrategy,
    pub seed: u64,
    pub checkpoint_every: usize,

    pub crop_min: f64,
    pub crop_max: f64,
    pub flip_prob: f64,
    pub jitter: f64,
    pub grayscale_prob: f64,

    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_batch: usize,

    pub mask_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vit = VitConfig::default();
        let heads = HeadConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let probe = ProbeConfig::default();
        let synth = SyntheticSpec::default();
        Self {
            data: None,
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            test_fraction: 1.0 / 3.0,
            synthetic_classes: synth.num_classes,
            synthetic_per_class: 192,
            synthetic_noise: synth.noise_sigma,
            image_size: vit.image_size,
            patch_size: vit.patch_size,
            channels: vit.channels,
            embed_dim: vit.embed_dim,
            layers: vit.layers,
            heads: vit.heads,
            mlp_ratio: vit.mlp_ratio,
            hidden_dim: heads.hidden_dim,
            out_dim: heads.out_dim,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr_max: train.lr_max,
            lr_min: train.lr_min,
            weight_decay: train.weight_decay,
            momentum: train.momentum,
            temperature: train.temperature,
            masking_ratio: train.masking_ratio,
            strategy: train.strategy,
            seed: train.seed,
            checkpoint_every: 10,
            crop_min: aug.crop_scale.0,
            crop_max: aug.crop_scale.1,
            flip_prob: aug.flip_prob,
            jitter: aug.jitter_strength,
            grayscale_prob: aug.grayscale_prob,
            probe_lr: probe.lr,
            probe_epochs: probe.epochs,
            probe_batch: probe.batch_size,
            mask_count: 16,
        }
    }
}

impl RunConfig {
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            vit: VitConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                channels: self.channels,
                embed_dim: self.embed_dim,
                layers: self.layers,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            heads: HeadConfig {
                hidden_dim: self.hidden_dim,
                out_dim: self.out_dim,
                ..HeadConfig::default()
            },
            train: TrainConfig {
                batch_size: self.batch_size,
                epochs: self.epochs,
                lr_max: self.lr_max,
                lr_min: self.lr_min,
                weight_decay: self.weight_decay,
                momentum: self.momentum,
                temperature: self.temperature,
                masking_ratio: self.masking_ratio,
                strategy: self.strategy,
                seed: self.seed,
            },
            augment: AugmentConfig {
                crop_scale: (self.crop_min, self.crop_max),
                flip_prob: self.flip_prob,
                jitter_strength: self.jitter,
                grayscale_prob: self.grayscale_prob,
            },
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            epochs: self.probe_epochs,
            batch_size: self.probe_batch,
            seed: self.seed,
            ..ProbeConfig::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.synthetic_classes,
            images_per_class: self.synthetic_per_class,
            image_size: self.image_size,
            channels: self.channels,
            noise_sigma: self.synthetic_noise,
            seed: self.seed,
            ..SyntheticSpec::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

/// A resolved configuration and where each key's value came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub command: &'static str,
    pub config: RunConfig,
    pub sources: BTreeMap<String, Source>,
}

/// JSON object entries in file order, duplicates kept.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a flat JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Entries, A::Error> {
                let mut v = Vec::new();
                while let Some(e) = m.next_entry()? {
                    v.push(e);
                }
                Ok(Entries(v))
            }
        }
        d.deserialize_map(V)
    }
}

/// Command-line input after the command word has been split off.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub args: Vec<String>,
    /// Contents of the `--config` file, if any.
    pub file: Option<String>,
    pub env_seed: Option<String>,
}

/// Splits `--config <path>` out of the flag list.
pub fn take_config_path(args: &[String]) -> Result<(Option<PathBuf>, Vec<String>), CliError> {
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let p = it
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a path".into()))?;
            if path.replace(PathBuf::from(p)).is_some() {
                return Err(CliError::Usage("--config given twice".into()));
            }
        } else {
            rest.push(a.clone());
        }
    }
    Ok((path, rest))
}

fn parse_flag_value(default: &Value, raw: &str) -> Value {
    match default {
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

pub fn resolve(command: Command, inputs: &Inputs) -> Result<Resolved, CliError> {
    let defaults = match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    };
    let mut merged: Map<String, Value> = defaults.clone();
    let mut sources: BTreeMap<String, Source> =
        defaults.keys().map(|k| (k.clone(), Source::Default)).collect();

    if let Some(text) = &inputs.file {
        let Entries(entries) = serde_json::from_str(text)
            .map_err(|e| CliError::Usage(format!("config file: {e}")))?;
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in entries {
            if !defaults.contains_key(&k) {
                return Err(CliError::Usage(format!("config file: unknown key {k:?}")));
            }
            if !seen.insert(k.clone()) {
                return Err(CliError::Usage(format!("config file: duplicate key {k:?}")));
            }
            merged.insert(k.clone(), v);
            sources.insert(k, Source::File);
        }
    }

    if let Some(seed) = &inputs.env_seed {
        let v: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        merged.insert("seed".into(), Value::from(v));
        sources.insert("seed".into(), Source::Env);
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut it = inputs.args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key, got {flag:?}")))?
            .replace('-', "_");
        let Some(default) = defaults.get(&key) else {
            return Err(CliError::Usage(format!("unknown flag {flag}")));
        };
        let raw = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("{flag} needs a value")))?;
        if !seen.insert(key.clone()) {
            return Err(CliError::Usage(format!("{flag} given twice")));
        }
        merged.insert(key.clone(), parse_flag_value(default, raw));
        sources.insert(key, Source::Flag);
    }

    if command == Command::Sweep && sources["masking_ratio"] != Source::Default {
        return Err(CliError::Usage(
            "sweep sets masking_ratio itself; do not also set it explicitly".into(),
        ));
    }

    let config: RunConfig = serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    config
        .pretrain_config()
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    Ok(Resolved {
        command: command.name(),
        config,
        sources,
    })
}
