use std::fs;
use std::path::Path;
use std::process::Command as Process;

use lodisc_cli::config::{resolve, Command, Inputs, Source};
use lodisc_cli::{main_with, CliError};
use serde_json::Value;

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn inputs(flags: &str, file: Option<&str>, env: Option<&str>) -> Inputs {
    Inputs {
        args: args(flags),
        file: file.map(String::from),
        env_seed: env.map(String::from),
    }
}

#[test]
fn precedence_runs_default_file_env_flag() {
    let r = resolve(Command::Pretrain, &inputs("", None, None)).unwrap();
    assert_eq!(r.config.seed, 0);
    assert_eq!(r.sources["seed"], Source::Default);

    let file = r#"{"seed": 5, "epochs": 3}"#;
    let r = resolve(Command::Pretrain, &inputs("", Some(file), None)).unwrap();
    assert_eq!((r.config.seed, r.config.epochs), (5, 3));

    let r = resolve(Command::Pretrain, &inputs("", Some(file), Some("9"))).unwrap();
    assert_eq!(r.config.seed, 9);
    assert_eq!(r.sources["seed"], Source::Env);
    assert_eq!(r.sources["epochs"], Source::File);

    let r = resolve(Command::Pretrain, &inputs("--seed 11 --strategy random", Some(file), Some("9"))).unwrap();
    assert_eq!(r.config.seed, 11);
    assert_eq!(r.sources["seed"], Source::Flag);
    assert_eq!(r.config.strategy, lodisc::masking::MaskStrategy::Random);
}

fn is_usage(r: Result<impl std::fmt::Debug, CliError>) -> bool {
    matches!(r, Err(CliError::Usage(_)))
}

#[test]
fn malformed_configuration_fails_before_compute() {
    assert!(is_usage(resolve(Command::Pretrain, &inputs("--no-such-key 1", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("--seed 1 --seed 2", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("--seed", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("seed 1", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("", Some(r#"{"bogus": 1}"#), None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("", Some(r#"{"seed": 1, "seed": 2}"#), None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("--epochs many", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("--masking-ratio 1.0", None, None))));
    assert!(is_usage(resolve(Command::Pretrain, &inputs("", None, Some("abc")))));
    assert!(is_usage(main_with(&args("train"), None)));
}

#[test]
fn sweep_rejects_explicit_ratio() {
    assert!(is_usage(resolve(Command::Sweep, &inputs("--masking_ratio 0.5", None, None))));
    assert!(is_usage(resolve(Command::Sweep, &inputs("", Some(r#"{"masking_ratio": 0.7}"#), None))));
    assert!(resolve(Command::Sweep, &inputs("--seed 3", None, None)).is_ok());
}

const GEOMETRY: &str = concat!(
    "--image_size 16 --embed_dim 16 --layers 1 --heads 2 --hidden_dim 16 --out_dim 8 ",
    "--batch_size 4 --synthetic_per_class 6 --probe_epochs 5 --mask_count 3"
);
const TINY: &str = concat!(
    "--image_size 16 --embed_dim 16 --layers 1 --heads 2 --hidden_dim 16 --out_dim 8 ",
    "--batch_size 4 --synthetic_per_class 6 --probe_epochs 5 --mask_count 3 --epochs 2"
);

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    main_with(&args(&format!("pretrain {TINY} --out {out}")), None).unwrap();

    let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 8 training images, batch 4, 2 epochs.
    assert_eq!(lines.len(), 4);
    for key in ["step", "epoch", "loss", "loss_g", "loss_l", "lr"] {
        assert!(lines[0].get(key).is_some(), "metrics line lacks {key}");
    }
    let ckpt = dir.path().join("checkpoint-2.ldsc");
    assert!(ckpt.exists());
    assert!(read_json(&dir.path().join("report-pretrain.json"))["config_hash"].is_string());
    let resolved = read_json(&dir.path().join("resolved-config.json"));
    assert_eq!(resolved["sources"]["epochs"], "flag");

    let with_ckpt = format!("{TINY} --out {out} --checkpoint {}", ckpt.display());
    main_with(&args(&format!("probe {with_ckpt}")), None).unwrap();
    let probe = read_json(&dir.path().join("report-probe.json"));
    let top1 = probe["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(probe["top5"].as_f64(), Some(1.0));

    main_with(&args(&format!("retrieve {with_ckpt}")), None).unwrap();
    let ret = read_json(&dir.path().join("report-retrieve.json"));
    for key in ["rank1", "rank5", "map", "excluded_queries", "config_hash"] {
        assert!(!ret[key].is_null(), "retrieval report lacks {key}");
    }

    main_with(&args(&format!("dump-masks {with_ckpt}")), None).unwrap();
    let masks = dir.path().join("masks");
    let sidecar = read_json(&masks.join("view-0000.json"));
    assert_eq!(sidecar["kept_indices"].as_array().unwrap().len(), 1);
    assert!(sidecar["A_t"].is_number());
    assert_eq!(sidecar["view_id"], 0);
    let ppm = fs::read(masks.join("view-0000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
}

#[test]
fn probe_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = main_with(&args(&format!("probe {TINY} --out {}", dir.path().display())), None);
    assert!(is_usage(r));
}

#[test]
fn sweep_visits_every_ratio_with_distinct_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let flags = format!("sweep {GEOMETRY} --epochs 1 --out {}", dir.path().display());
    main_with(&args(&flags), None).unwrap();
    let report = read_json(&dir.path().join("report-sweep.json"));
    let entries = report.as_array().unwrap();
    let ratios: Vec<f64> = entries.iter().map(|e| e["masking_ratio"].as_f64().unwrap()).collect();
    assert_eq!(ratios, vec![0.3, 0.6, 0.7, 0.8]);
    let mut hashes: Vec<&str> = entries.iter().map(|e| e["config_hash"].as_str().unwrap()).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_lodisc");
    let bad = Process::new(bin).args(["pretrain", "--bogus", "1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let ok = Process::new(bin)
        .args(args(&format!("pretrain {GEOMETRY} --epochs 1 --out {}", dir.path().display())))
        .env("LODISC_SEED", "4")
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let resolved = read_json(&dir.path().join("resolved-config.json"));
    assert_eq!(resolved["config"]["seed"], 4);
    assert_eq!(resolved["sources"]["seed"], "env");
}
