use std::path::Path;

use adaptive_ensemble::config::{DatasetSource, ExperimentConfig};
use adaptive_ensemble::data::{generate_synthetic, save_dataset, SplitPlan};
use adaptive_ensemble::ensemble::checkpoint::load_ensemble;
use adaptive_ensemble::ensemble::Strategy;
use adaptive_ensemble::model::checkpoint::{extractor_checksum, load_weak};
use adaptive_ensemble::pipeline::{self, ENSEMBLE_FILE, REPORT_CSV, SPLIT_FILE};
use adaptive_ensemble::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetSource::Synthetic {
        classes: 3,
        per_class: 12,
        shape: (3, 16, 16),
    });
    cfg.input_size = (16, 16);
    cfg.seeds = vec![3, 4];
    cfg.phase1.max_epochs = 30;
    cfg.phase2.max_epochs = 40;
    cfg
}

#[test]
fn phases_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config();
    let phase1 = pipeline::run_phase1(&cfg, out).unwrap();
    assert_eq!(phase1.checkpoints.len(), 2);
    assert!(out.join(SPLIT_FILE).exists());

    let plan = SplitPlan::load(&out.join(SPLIT_FILE)).unwrap();
    assert_eq!(plan.sizes(), vec![18, 18]);

    let mut cfg2 = cfg.clone();
    cfg2.ensemble_module_list = phase1.checkpoints.clone();
    let phase2 = pipeline::run_phase2(&cfg2, out).unwrap();
    assert!(cfg.seeds.contains(&phase2.best_seed));

    let (ens, manifest) = load_ensemble(&out.join(ENSEMBLE_FILE)).unwrap();
    assert_eq!(manifest.seed, phase2.best_seed);
    for (member, path) in ens.extractor_checksums().iter().zip(&phase1.checkpoints) {
        let (weak, _) = load_weak(path).unwrap();
        assert_eq!(member, &extractor_checksum(&weak));
    }

    // the saved ensemble scores exactly what the report claims for its seed
    let splits = pipeline::load_splits(&cfg).unwrap();
    let eval = pipeline::evaluate(&out.join(ENSEMBLE_FILE), &splits.test, &cfg).unwrap();
    let row = phase2
        .rows
        .iter()
        .find(|r| r.strategy == Strategy::Adaptive && r.seed == Some(phase2.best_seed))
        .unwrap();
    assert_eq!(eval.accuracy, row.test_accuracy);
    assert_eq!(eval.samples, splits.test.len());
    let counted: u64 = eval.confusion.iter().flatten().sum();
    assert_eq!(counted as usize, splits.test.len());

    let weak_eval = pipeline::evaluate(&phase1.checkpoints[0], &splits.valid, &cfg).unwrap();
    assert_eq!(weak_eval.accuracy, phase1.validation_accuracy[0]);
}

#[test]
fn report_rows_follow_strategy_order() {
    let dir = tempfile::tempdir().unwrap();
    let (_, phase2) = pipeline::run_pipeline(&small_config(), dir.path()).unwrap();
    let names: Vec<String> = phase2
        .rows
        .iter()
        .map(|r| format!("{}:{}", r.strategy, r.seed.map_or("median".into(), |s| s.to_string())))
        .collect();
    assert_eq!(
        names,
        [
            "weak_0:3",
            "weak_1:3",
            "vote:3",
            "output:3",
            "adaptive:3",
            "vote:4",
            "output:4",
            "adaptive:4",
            "summary:median",
        ]
    );
    let text = std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
    let parsed = pipeline::parse_report_csv(&text).unwrap();
    assert_eq!(pipeline::report_csv(&parsed), text);
    assert_eq!(parsed.len(), phase2.rows.len());

    let (ens, _) = load_ensemble(&phase2.ensemble).unwrap();
    let adaptive: Vec<_> = phase2
        .rows
        .iter()
        .filter(|r| r.strategy == Strategy::Adaptive)
        .collect();
    assert!(adaptive
        .iter()
        .all(|r| r.params_trainable == ens.trainable_param_count() as u64));
}

#[test]
fn file_datasets_match_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let splits = pipeline::load_splits(&cfg).unwrap();
    let save = |name: &str, ds| {
        let p = dir.path().join(name);
        save_dataset(ds, &p).unwrap();
        p
    };
    let mut file_cfg = cfg.clone();
    file_cfg.dataset = DatasetSource::File(save("train.aeib", &splits.train));
    file_cfg.valid_dataset = Some(save("valid.aeib", &splits.valid));
    file_cfg.test_dataset = Some(save("test.aeib", &splits.test));
    let loaded = pipeline::load_splits(&file_cfg).unwrap();
    assert_eq!(loaded.train.pixels, splits.train.pixels);
    assert_eq!(loaded.valid.labels, splits.valid.labels);
    assert_eq!(loaded.test.labels, splits.test.labels);
}

#[test]
fn semantic_override_groups_classes() {
    let mut cfg = small_config();
    cfg.split_override = Some(vec![vec![0, 2], vec![1]]);
    let train = generate_synthetic(3, 12, (3, 16, 16), 0).unwrap();
    let plan = pipeline::make_split(&cfg, &train).unwrap();
    for i in plan.indices(0) {
        assert_ne!(train.labels[i], 1);
    }
    assert!(plan.indices(1).iter().all(|&i| train.labels[i] == 1));
}

#[test]
fn missing_member_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let (phase1, _) = pipeline::run_pipeline(&small_config(), out).unwrap();
    std::fs::remove_file(&phase1.checkpoints[1]).unwrap();
    match load_ensemble(&out.join(ENSEMBLE_FILE)) {
        Err(Error::Load { reason, path }) => {
            let shown = format!("{} {reason}", path.display());
            assert!(shown.contains("weak_1"), "{shown}");
        }
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn bad_inputs_fail_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.dataset = DatasetSource::File(Path::new("/nonexistent/train.aeib").into());
    cfg.valid_dataset = Some("/nonexistent/valid.aeib".into());
    cfg.test_dataset = Some("/nonexistent/test.aeib".into());
    let err = pipeline::run_phase1(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err.category(), "io" | "load"), "{err}");

    let mut cfg = small_config();
    cfg.n = 13;
    let err = pipeline::run_phase1(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.category(), "split", "{err}");
}

#[test]
fn warm_start_seeds_phase_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let first = pipeline::run_phase1(&cfg, &dir.path().join("a")).unwrap();

    let mut warm = cfg.clone();
    warm.warm_start = Some(first.checkpoints[0].clone());
    let second = pipeline::run_phase1(&warm, &dir.path().join("b")).unwrap();
    let (w, manifest) = load_weak(&second.checkpoints[1]).unwrap();
    assert_eq!(w.classes, 3);
    assert!(manifest.history.epochs.len() <= cfg.phase1.max_epochs);

    let mut mismatched = warm.clone();
    mismatched.input_size = (20, 20);
    let err = pipeline::run_phase1(&mismatched, &dir.path().join("c")).unwrap_err();
    assert_eq!(err.category(), "build", "{err}");
}
