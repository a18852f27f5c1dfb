//! Command-line driver: pre-training, linear probing, retrieval, mask dumps
//! and masking-ratio sweeps, each writing its artifacts under one directory.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use lodisc::checkpoint;
use lodisc::data::{ingest_dir, split_indices, Dataset};
use lodisc::eval::{config_hash, extract_features, linear_probe, retrieve, Report, Split};
use lodisc::masking::{build_masks, expand_and_apply, write_ppm, MaskRecord, MaskStrategy};
use lodisc::numerics::{Rng, Tensor};
use lodisc::pipeline::{EpochReport, Trainer};
use lodisc::vit::VitConfig;

pub use config::{resolve, Command, Inputs, Resolved, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] lodisc::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Train/test images at the encoder's geometry, both normalized with
/// statistics of the training split.
pub fn load_data(cfg: &RunConfig, vit: &VitConfig) -> Result<Splits, CliError> {
    let all = match &cfg.data {
        Some(root) => {
            let report = ingest_dir(root, vit.image_size, vit.channels)?;
            if !report.skipped.is_empty() {
                log::warn!("{} unreadable image(s) skipped", report.skipped.len());
            }
            report.dataset
        }
        None => {
            let mut spec = cfg.synthetic_spec();
            spec.image_size = vit.image_size;
            spec.channels = vit.channels;
            spec.generate()?
        }
    };
    let (train_idx, test_idx) = split_indices(all.labels(), cfg.test_fraction, cfg.seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(CliError::Usage(format!(
            "test_fraction {} leaves an empty split",
            cfg.test_fraction
        )));
    }
    let mut train = all.subset(&train_idx);
    let mut test = all.subset(&test_idx);
    let stats = train.normalize()?;
    test.normalize_with(&stats)?;
    Ok(Splits { train, test })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochReport>,
    pub checkpoint: PathBuf,
}

/// Trains from scratch, streaming step metrics and writing checkpoints.
pub fn pretrain(cfg: &RunConfig, out: &Path, data: &Splits) -> Result<(Trainer, PretrainReport), CliError> {
    let pcfg = cfg.pretrain_config();
    let mut trainer = Trainer::new(pcfg.clone(), data.train.len())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut epochs = Vec::new();
    let mut write_err = None;
    let mut last_ckpt = PathBuf::new();
    for epoch in 1..=cfg.epochs {
        let report = trainer.train_epoch(&data.train, |r| {
            if write_err.is_none() {
                let line = serde_json::to_string(r).expect("step report serializes");
                write_err = writeln!(metrics, "{line}").err();
            }
        })?;
        if let Some(e) = write_err.take() {
            return Err(io_err(&metrics_path)(e));
        }
        log::info!("epoch {epoch}: loss {:.4}", report.mean_loss);
        epochs.push(report);
        if epoch == cfg.epochs || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
            last_ckpt = out.join(format!("checkpoint-{epoch}.ldsc"));
            checkpoint::save(&trainer, &last_ckpt)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    let report = PretrainReport {
        config_hash: config_hash(&pcfg)?,
        epochs,
        checkpoint: last_ckpt,
    };
    Ok((trainer, report))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Trainer, CliError> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --checkpoint".into()))?;
    Ok(checkpoint::load(path)?)
}

pub fn probe(cfg: &RunConfig, trainer: &Trainer, data: &Splits) -> Result<Report, CliError> {
    let train = extract_features(&trainer.encoder, &data.train, Split::Train)?;
    let test = extract_features(&trainer.encoder, &data.test, Split::Test)?;
    let result = linear_probe(&train, &test, &cfg.probe_config())?;
    let hash = config_hash(&(&trainer.config, cfg.probe_config()))?;
    Ok(Report {
        config_hash: hash,
        ..Report::default()
    }
    .with_probe(&result))
}

/// Test images query the training gallery.
pub fn retrieval(trainer: &Trainer, data: &Splits) -> Result<Report, CliError> {
    let gallery = extract_features(&trainer.encoder, &data.train, Split::Train)?;
    let queries = extract_features(&trainer.encoder, &data.test, Split::Test)?;
    let result = retrieve(&queries, &gallery, false)?;
    if result.empty {
        log::warn!("no retrieval query has a same-label gallery item");
    }
    Ok(Report {
        config_hash: config_hash(&trainer.config)?,
        ..Report::default()
    }
    .with_retrieval(&result))
}

/// Writes masked test views as PPM images with JSON sidecars.
pub fn dump_masks(cfg: &RunConfig, trainer: &Trainer, data: &Splits, dir: &Path) -> Result<usize, CliError> {
    if cfg.strategy == MaskStrategy::None {
        return Err(CliError::Usage("dump-masks needs a masking strategy other than none".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let vit = &trainer.config.vit;
    let ids: Vec<usize> = (0..data.test.len().min(cfg.mask_count)).collect();
    if ids.is_empty() {
        return Ok(0);
    }
    let views = data.test.batch(&ids);
    let (_, attn) = trainer.encoder.encode_key_with_attention(&views)?;
    let mut rng = Rng::derive(cfg.seed, 0xd0);
    let masks = build_masks(cfg.strategy, &attn, cfg.masking_ratio, &mut rng)?.expect("strategy is not none");
    let s = vit.image_size;
    for (&id, mask) in ids.iter().zip(&masks) {
        let view = Tensor::new(&vit.image_shape(), data.test.image(id).to_vec())?;
        let masked = expand_and_apply(mask, &view, vit)?;
        let stem = format!("view-{id:04}");
        write_ppm(&dir.join(format!("{stem}.ppm")), s, s, &data.test.to_rgb8(masked.data()))?;
        write_ppm(&dir.join(format!("{stem}-full.ppm")), s, s, &data.test.to_rgb8(view.data()))?;
        write_json(&dir.join(format!("{stem}.json")), &MaskRecord::new(id, mask))?;
    }
    Ok(ids.len())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub masking_ratio: f64,
    pub config_hash: String,
    pub final_loss: f64,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
}

/// Executes one resolved command; returns the report path.
pub fn run(resolved: &Resolved) -> Result<PathBuf, CliError> {
    let cfg = &resolved.config;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("resolved-config.json"), resolved)?;
    let report_path = out.join(format!("report-{}.json", resolved.command));
    match Command::parse(resolved.command)? {
        Command::Pretrain => {
            let data = load_data(cfg, &cfg.pretrain_config().vit)?;
            let (_, report) = pretrain(cfg, out, &data)?;
            write_json(&report_path, &report)?;
        }
        Command::Probe => {
            let trainer = load_checkpoint(cfg)?;
            let data = load_data(cfg, &trainer.config.vit)?;
            write_json(&report_path, &probe(cfg, &trainer, &data)?)?;
        }
        Command::Retrieve => {
            let trainer = load_checkpoint(cfg)?;
            let data = load_data(cfg, &trainer.config.vit)?;
            write_json(&report_path, &retrieval(&trainer, &data)?)?;
        }
        Command::DumpMasks => {
            let trainer = load_checkpoint(cfg)?;
            let data = load_data(cfg, &trainer.config.vit)?;
            let n = dump_masks(cfg, &trainer, &data, &out.join("masks"))?;
            write_json(
                &report_path,
                &serde_json::json!({ "masks_written": n, "config_hash": config_hash(&trainer.config)? }),
            )?;
        }
        Command::Sweep => {
            let data = load_data(cfg, &cfg.pretrain_config().vit)?;
            let mut entries = Vec::new();
            for ratio in config::SWEEP_RATIOS {
                let sub_cfg = RunConfig {
                    masking_ratio: ratio,
                    ..cfg.clone()
                };
                let sub = out.join(format!("ratio-{ratio}"));
                fs::create_dir_all(&sub).map_err(io_err(&sub))?;
                let (trainer, pre) = pretrain(&sub_cfg, &sub, &data)?;
                let report = probe(&sub_cfg, &trainer, &data)?;
                write_json(&sub.join("report-probe.json"), &report)?;
                entries.push(SweepEntry {
                    masking_ratio: ratio,
                    config_hash: pre.config_hash,
                    final_loss: pre.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
                    top1: report.top1,
                    top5: report.top5,
                });
            }
            write_json(&report_path, &entries)?;
        }
    }
    Ok(report_path)
}

/// Parses `argv[1..]`, resolves the configuration and runs it.
pub fn main_with(args: &[String], env_seed: Option<String>) -> Result<PathBuf, CliError> {
    let (cmd, rest) = args
        .split_first()
        .ok_or_else(|| CliError::Usage(usage().into()))?;
    let command = Command::parse(cmd)?;
    let (config_path, flags) = config::take_config_path(rest)?;
    let file = match &config_path {
        Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
        None => None,
    };
    let resolved = resolve(
        command,
        &Inputs {
            args: flags,
            file,
            env_seed,
        },
    )?;
    run(&resolved)
}

pub fn usage() -> &'static str {
    "lodisc <pretrain|probe|retrieve|dump-masks|sweep> [--config file.json] [--key value ...]"
}
