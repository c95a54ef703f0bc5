use afa_core::adversary::{LambdaMode, Objective};
use afa_core::episodes::GeneratorSpec;
use afa_harness::ablation::run_ablation_suite;
use afa_harness::config::{Ablation, DataSource, ExperimentConfig, NoDdMode};
use afa_harness::eval::{stats_from_jsonl, TrialStats};
use afa_harness::model::{load_checkpoint, save_checkpoint, AfaKind};
use afa_harness::run;
use afa_harness::train::{attach_adversary, run_meta_train, run_pretrain, Variant};
use afa_tensor::Rng;

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        data: DataSource::Synthetic(GeneratorSpec {
            samples_per_cell: 24,
            ..GeneratorSpec::default_benchmark(3)
        }),
        pretrain_iterations: 12,
        pretrain_batch: 16,
        iterations: 8,
        trials: 6,
        queries: 4,
        probe_every: 4,
        workers: 1,
        seed: 5,
        ..ExperimentConfig::default()
    };
    cfg.encoder.channels = vec![4, 8];
    cfg
}

#[test]
fn no_afa_allocates_no_adversary() {
    let mut cfg = quick();
    let ds = run::prepare(&mut cfg).unwrap();
    let (pre, _) = run_pretrain(&cfg, &ds).unwrap();
    let v = Variant::from_ablation(Ablation::NoAfa, NoDdMode::Lg);
    let m = attach_adversary(pre.encoder.clone(), v, cfg.seed).unwrap();
    let (enc, afa, disc, cls) = m.census();
    assert!(enc > 0);
    assert_eq!((afa, disc, cls), (0, 0, 0));
    let full = attach_adversary(pre.encoder, Variant::from_ablation(Ablation::None, NoDdMode::Lg), cfg.seed).unwrap();
    let (_, afa, disc, _) = full.census();
    assert_eq!(afa, 2 * (4 + 8));
    assert_eq!(disc, 8 + 1);
}

#[test]
fn zero_lambda_full_matches_objective_free_variant() {
    let mut cfg = quick();
    cfg.lambda = LambdaMode::Const(0.0);
    let ds = run::prepare(&mut cfg).unwrap();
    let (pre, _) = run_pretrain(&cfg, &ds).unwrap();
    let full = Variant::from_ablation(Ablation::None, NoDdMode::Lg);
    let bare = Variant {
        afa: Some(AfaKind::Affine),
        objective: Objective {
            use_ld: false,
            use_lg: false,
            route_lc_into_afa: false,
        },
    };
    let (a, log_a) = run_meta_train(&cfg, &ds, attach_adversary(pre.encoder.clone(), full, cfg.seed).unwrap(), full).unwrap();
    let (b, log_b) = run_meta_train(&cfg, &ds, attach_adversary(pre.encoder, bare, cfg.seed).unwrap(), bare).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.afa, b.afa);
    let lc = |log: &[afa_harness::train::MetaRecord]| log.iter().map(|r| r.loss.l_c.to_bits()).collect::<Vec<_>>();
    assert_eq!(lc(&log_a), lc(&log_b));
}

#[test]
fn checkpoint_reload_is_exact() {
    let mut cfg = quick();
    let ds = run::prepare(&mut cfg).unwrap();
    let (pre, _) = run_pretrain(&cfg, &ds).unwrap();
    let v = Variant::from_ablation(Ablation::None, NoDdMode::Lg);
    let (model, _) = run_meta_train(&cfg, &ds, attach_adversary(pre.encoder, v, cfg.seed).unwrap(), v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = save_checkpoint(dir.path(), &model, "meta-train", &cfg.hash(), cfg.seed).unwrap();
    let (back, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(manifest.afa, Some(AfaKind::Affine));
    let a = afa_harness::ablation::evaluate_columns(&cfg, &ds, &model).unwrap();
    let b = afa_harness::ablation::evaluate_columns(&cfg, &ds, &back).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablation_table_layout_and_baseline_row() {
    let mut cfg = quick();
    let ds = run::prepare(&mut cfg).unwrap();
    let (pre, _) = run_pretrain(&cfg, &ds).unwrap();
    let table = run_ablation_suite(&cfg, &ds, &pre, &Ablation::ALL, &mut |_| Ok(())).unwrap();
    assert_eq!(table.rows.len(), 5);
    assert_eq!(table.columns.len(), 2 * 2);
    let tsv = table.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0], "variant\tnear/1-shot\tnear/5-shot\tfar/1-shot\tfar/5-shot");
    assert!(lines.iter().all(|l| l.split('\t').count() == 5));

    let v = Variant::from_ablation(Ablation::NoAfa, NoDdMode::Lg);
    let (alone, _) = run_meta_train(&cfg, &ds, attach_adversary(pre.encoder.clone(), v, cfg.seed).unwrap(), v).unwrap();
    let cells = afa_harness::ablation::evaluate_columns(&cfg, &ds, &alone).unwrap();
    assert_eq!(table.row(Ablation::NoAfa).unwrap().cells, cells);
}

#[test]
fn evaluation_is_worker_count_independent_and_replayable() {
    let mut cfg = quick();
    let ds = run::prepare(&mut cfg).unwrap();
    let (pre, _) = run_pretrain(&cfg, &ds).unwrap();
    let single = afa_harness::ablation::evaluate_columns(&cfg, &ds, &pre).unwrap();
    cfg.workers = 3;
    let threaded = afa_harness::ablation::evaluate_columns(&cfg, &ds, &pre).unwrap();
    assert_eq!(single, threaded);

    let out = tempfile::tempdir().unwrap();
    let summary = run::evaluate(&cfg, &ds, &pre, out.path()).unwrap();
    for s in summary {
        let text = std::fs::read_to_string(out.path().join("eval").join(&s.file)).unwrap();
        let replay = stats_from_jsonl(&text).unwrap();
        assert!((replay.mean - s.mean).abs() <= 1e-12);
        assert!((replay.half_width - s.half_width).abs() <= 1e-12);
    }
}

#[test]
fn trial_statistics() {
    let perfect = TrialStats::from_accuracies(vec![1.0; 50]);
    assert_eq!((perfect.mean, perfect.half_width), (1.0, 0.0));

    let mut rng = Rng::new(17);
    let acc: Vec<f64> = (0..2000).map(|_| if rng.uniform() < 0.6 { 1.0 } else { 0.0 }).collect();
    let s = TrialStats::from_accuracies(acc);
    let expected = 1.96 * 0.24f64.sqrt() / 2000f64.sqrt();
    assert!((s.half_width - expected).abs() <= 0.1 * expected);
}
