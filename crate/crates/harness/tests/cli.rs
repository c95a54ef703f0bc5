use std::fs;
use std::path::Path;

use afa_core::episodes::GeneratorSpec;
use afa_harness::cli::{run, Cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use afa_harness::config::{Ablation, DataSource, ExperimentConfig};
use clap::Parser;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("afa").chain(args.iter().copied()).map(String::from).collect()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig {
        data: DataSource::Synthetic(GeneratorSpec {
            samples_per_cell: 24,
            ..GeneratorSpec::default_benchmark(1)
        }),
        pretrain_iterations: 6,
        pretrain_batch: 16,
        iterations: 4,
        trials: 4,
        queries: 4,
        workers: 1,
        ..ExperimentConfig::default()
    };
    cfg.encoder.channels = vec![4, 4];
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(run(argv(&["gradcheck", "--seed", "7", "--out", &out])), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["seed"], 7);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(argv(&["frobnicate"])), EXIT_USAGE);
    assert_eq!(run(argv(&["eval", "--no-such-flag"])), EXIT_USAGE);
    assert_eq!(run(argv(&[])), EXIT_USAGE);
    assert_eq!(run(argv(&["--help"])), EXIT_OK);
}

#[test]
fn eval_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(run(argv(&["eval", "--out", &out])), EXIT_RUNTIME);
    assert_eq!(run(argv(&["pretrain", "--out", &out, "--head", "gnn"])), EXIT_RUNTIME);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let cli = Cli::try_parse_from(argv(&[
        "meta-train",
        "--config",
        &config,
        "--seed",
        "9",
        "--ablation",
        "no_lg",
        "--lambda",
        "const:0.5",
        "--shots",
        "1",
        "--iters",
        "3",
        "--shared-bn-stats",
    ]))
    .unwrap();
    let cfg = cli.flags.resolve().unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.ablation, Ablation::NoLg);
    assert_eq!(cfg.iterations, 3);
    assert_eq!((cfg.shots, cfg.eval_shots.clone()), (1, vec![1]));
    assert!(cfg.shared_bn_stats);
    // untouched fields come from the file
    assert_eq!(cfg.trials, 4);
    assert_eq!(cfg.encoder.channels, vec![4, 4]);
}

#[test]
fn stages_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = out.display().to_string();
    assert_eq!(run(argv(&["gen-data", "--config", &config, "--out", &o])), EXIT_OK);
    assert!(out.join("data/manifest.json").exists());
    assert_eq!(run(argv(&["pretrain", "--config", &config, "--out", &o])), EXIT_OK);
    assert!(out.join("pretrain/checkpoint.json").exists());
    assert!(fs::read_to_string(out.join("pretrain/metrics.jsonl")).unwrap().lines().count() == 6);
    assert_eq!(run(argv(&["meta-train", "--config", &config, "--out", &o])), EXIT_OK);
    let meta = out.join("meta-none");
    assert_eq!(fs::read_to_string(meta.join("metrics.jsonl")).unwrap().lines().count(), 4);
    let ckpt = meta.display().to_string();
    assert_eq!(
        run(argv(&["eval", "--config", &config, "--out", &o, "--checkpoint", &ckpt])),
        EXIT_OK
    );
    assert!(out.join("eval/summary.json").exists());
    assert!(out.join("eval/far-5shot.jsonl").exists());
}
