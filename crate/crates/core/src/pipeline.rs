//! The two-phase experiment: overfit weak learners on disjoint bags, then
//! fine-tune combination layers over their frozen extractors.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    generate_synthetic, load_dataset, preprocess, semantic_split_override, stratified_disjoint_split, Dataset,
    PreprocessSpec, SplitPlan, SplitTag,
};
use crate::ensemble::checkpoint::{load_ensemble, save_ensemble, ENSEMBLE_FORMAT};
use crate::ensemble::{run_comparison, summarize, ComparisonData, LabelledInputs, ReportRow, REPORT_HEADER};
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix};
use crate::model::checkpoint::{load_weak, read_file, save_weak, write_file, WeakMeta, WEAK_FORMAT};
use crate::model::{build_scaled_cnn, eff_tiny_base, train_weak_overfit, TrainConfig};
use crate::seeds::derive_seed;

pub const SPLIT_FILE: &str = "split.txt";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

// seed streams
const VALID_DATA: u64 = 1;
const TEST_DATA: u64 = 2;
const WEAK_INIT: u64 = 100;
const WEAK_ORDER: u64 = 200;

pub fn weak_file(i: usize) -> String {
    format!("weak_{i}.json")
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, tag: SplitTag) -> &Dataset {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Valid => &self.valid,
            SplitTag::Test => &self.test,
        }
    }
}

/// Loads or generates train, validation and test data. Synthetic
/// validation data has half as many samples per class as training data.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            classes,
            per_class,
            shape,
        } => Ok(Splits {
            train: generate_synthetic(*classes, *per_class, *shape, cfg.data_seed)?,
            valid: generate_synthetic(
                *classes,
                per_class.div_ceil(2),
                *shape,
                derive_seed(cfg.data_seed, VALID_DATA),
            )?
            .with_split(SplitTag::Valid),
            test: generate_synthetic(*classes, *per_class, *shape, derive_seed(cfg.data_seed, TEST_DATA))?
                .with_split(SplitTag::Test),
        }),
        DatasetSource::File(train) => {
            let path = |p: &Option<PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("{key}: required with a file dataset")))
            };
            let valid = path(&cfg.valid_dataset, "valid_dataset")?;
            let test = path(&cfg.test_dataset, "test_dataset")?;
            Ok(Splits {
                train: load_dataset(train)?,
                valid: load_dataset(&valid)?,
                test: load_dataset(&test)?,
            })
        }
    }
}

/// Resolution the weak learners see after compound scaling.
pub fn model_input_size(cfg: &ExperimentConfig) -> (usize, usize) {
    let (h, w) = cfg.input_size;
    (cfg.scaling.scale_resolution(h), cfg.scaling.scale_resolution(w))
}

pub fn preprocess_spec(cfg: &ExperimentConfig) -> PreprocessSpec {
    PreprocessSpec {
        target_size: model_input_size(cfg),
        channel_means: cfg.channel_means,
        channel_stds: cfg.channel_stds,
        kernel: cfg.resize,
    }
}

pub fn labelled(ds: &Dataset, cfg: &ExperimentConfig) -> Result<LabelledInputs> {
    Ok(LabelledInputs {
        inputs: preprocess(ds, &preprocess_spec(cfg))?,
        labels: ds.labels.clone(),
    })
}

pub fn make_split(cfg: &ExperimentConfig, train: &Dataset) -> Result<SplitPlan> {
    match &cfg.split_override {
        Some(groups) => semantic_split_override(train, groups),
        None => stratified_disjoint_split(train, cfg.n, cfg.base_seed()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Phase1Output {
    pub checkpoints: Vec<PathBuf>,
    pub split_file: PathBuf,
    /// Final training accuracy of each learner on its own bag.
    pub train_accuracy: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
}

/// Splits the training data and overfits one weak learner per bag, all
/// bags in parallel. Writes `weak_<i>.json` and the split file to `out`.
pub fn run_phase1(cfg: &ExperimentConfig, out: &Path) -> Result<Phase1Output> {
    if !cfg.ensemble_module_list.is_empty() {
        return Err(Error::Config(
            "ensemble_module_list: must be empty for weak-learner training".into(),
        ));
    }
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let plan = make_split(cfg, &splits.train)?;
    let split_file = out.join(SPLIT_FILE);
    write_file(&split_file, plan.to_text().as_bytes())?;
    let valid = labelled(&splits.valid, cfg)?;
    let seed = cfg.base_seed();
    let warm = match &cfg.warm_start {
        Some(p) => Some(load_weak(p)?.0),
        None => None,
    };

    let results = (0..cfg.n)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let bag = splits.train.subset(&plan.indices(i))?;
            let inputs = labelled(&bag, cfg)?;
            let mut model = build_scaled_cnn(
                &eff_tiny_base(),
                cfg.input_size,
                cfg.scaling,
                splits.train.class_count,
                derive_seed(seed, WEAK_INIT + i as u64),
            )?;
            if let Some(w) = &warm {
                model.warm_start_from(w)?;
            }
            let train_cfg = TrainConfig {
                batch_size: cfg.phase1.batch_size,
                max_epochs: cfg.phase1.max_epochs,
                optimizer: cfg.optimizer,
                seed: derive_seed(seed, WEAK_ORDER + i as u64),
            };
            let history = train_weak_overfit(&mut model, &inputs.inputs, &inputs.labels, &train_cfg)?;
            let train_accuracy = history.final_accuracy().unwrap_or(0.0);
            let validation_accuracy = crate::metrics::accuracy(&model.predict(&valid.inputs)?, &valid.labels)?;
            log::info!(
                "weak learner {i}: {} epochs, train accuracy {train_accuracy:.4}, validation accuracy {validation_accuracy:.4}",
                history.epochs.len()
            );
            let path = out.join(weak_file(i));
            let meta = WeakMeta {
                seed,
                subset: i,
                history,
                validation_accuracy: Some(validation_accuracy),
            };
            save_weak(&model, meta, &path)?;
            Ok((path, train_accuracy, validation_accuracy))
        })
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.context(format!("weak learner {i}"))))
        .collect::<Result<Vec<_>>>()?;

    Ok(Phase1Output {
        checkpoints: results.iter().map(|r| r.0.clone()).collect(),
        split_file,
        train_accuracy: results.iter().map(|r| r.1).collect(),
        validation_accuracy: results.iter().map(|r| r.2).collect(),
    })
}

/// Orders weak checkpoints by recorded validation accuracy, best first,
/// keeping the original order among ties.
pub fn rank_weak_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut scored = paths
        .iter()
        .map(|p| {
            Ok((
                load_weak(p)?.1.validation_accuracy.unwrap_or(f64::NEG_INFINITY),
                p.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug)]
pub struct Phase2Output {
    pub ensemble: PathBuf,
    pub report_csv: PathBuf,
    pub report_txt: PathBuf,
    pub rows: Vec<ReportRow>,
    pub best_seed: u64,
}

/// Fine-tunes the adaptive ensemble once per seed over the listed weak
/// checkpoints, compares it with voting and output combination, keeps the
/// seed with the best validation F1 and writes the report.
pub fn run_phase2(cfg: &ExperimentConfig, out: &Path) -> Result<Phase2Output> {
    cfg.validate()?;
    if cfg.ensemble_module_list.len() != cfg.n {
        return Err(Error::Config(format!(
            "ensemble_module_list: expected {} weak checkpoints, got {}",
            cfg.n,
            cfg.ensemble_module_list.len()
        )));
    }
    let learners = cfg
        .ensemble_module_list
        .iter()
        .map(|p| load_weak(p).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    if learners.iter().any(|l| l.input_size != model_input_size(cfg)) {
        return Err(Error::load(
            &cfg.ensemble_module_list[0],
            format!("weak learners do not take {:?} inputs", model_input_size(cfg)),
        ));
    }
    let splits = load_splits(cfg)?;
    let data = ComparisonData {
        train: labelled(&splits.train, cfg)?,
        valid: labelled(&splits.valid, cfg)?,
        test: labelled(&splits.test, cfg)?,
    };
    let comparison = run_comparison(&learners, &data, &cfg.seeds, cfg.base_seed(), &cfg.fine_tune())?;
    let (best, record) = &comparison.adaptive[comparison.best];
    log::info!(
        "best seed {} with validation F1 {:.4}",
        record.seed,
        record.best_valid_f1.unwrap_or(f64::NAN)
    );

    let ensemble = out.join(ENSEMBLE_FILE);
    let members: Vec<PathBuf> = cfg.ensemble_module_list.iter().map(|p| member_path(p, out)).collect();
    save_ensemble(best, &members, record, &ensemble)?;
    let (report_csv, report_txt) = emit_report(&comparison.rows, out)?;
    Ok(Phase2Output {
        ensemble,
        report_csv,
        report_txt,
        rows: comparison.rows,
        best_seed: record.seed,
    })
}

/// Absolute form of a member path so the ensemble manifest can refer to it
/// from `out`; paths already inside `out` stay relative to it.
fn member_path(p: &Path, out: &Path) -> PathBuf {
    match std::path::absolute(p) {
        Ok(abs) => match std::path::absolute(out) {
            Ok(out_abs) if abs.starts_with(&out_abs) => out.join(abs.strip_prefix(&out_abs).expect("prefix checked")),
            _ => abs,
        },
        Err(_) => p.to_path_buf(),
    }
}

/// Phase 1 followed by phase 2 over all phase-1 checkpoints, best
/// validation accuracy first.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<(Phase1Output, Phase2Output)> {
    let phase1 = run_phase1(cfg, out)?;
    let mut cfg2 = cfg.clone();
    cfg2.ensemble_module_list = rank_weak_checkpoints(&phase1.checkpoints)?;
    let phase2 = run_phase2(&cfg2, out)?;
    Ok((phase1, phase2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub samples: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalRecord {
    fn from_confusion(m: &ConfusionMatrix) -> Self {
        Self {
            samples: m.total() as usize,
            accuracy: m.accuracy(),
            weighted_f1: m.weighted_f1(),
            confusion: m.counts.clone(),
        }
    }
}

/// Scores a weak or ensemble checkpoint on a dataset.
pub fn evaluate(checkpoint: &Path, ds: &Dataset, cfg: &ExperimentConfig) -> Result<EvalRecord> {
    let text = read_file(checkpoint)?;
    let format = serde_json::from_slice::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("format").and_then(|f| f.as_str()).map(str::to_string));
    let mut spec = preprocess_spec(cfg);
    let (predictions, classes) = match format.as_deref() {
        Some(WEAK_FORMAT) => {
            let (model, _) = load_weak(checkpoint)?;
            spec.target_size = model.input_size;
            (model.predict(&preprocess(ds, &spec)?)?, model.classes)
        }
        Some(ENSEMBLE_FORMAT) => {
            let (ens, _) = load_ensemble(checkpoint)?;
            spec.target_size = ens.input_size();
            (ens.predict(&preprocess(ds, &spec)?)?, ens.classes())
        }
        _ => return Err(Error::load(checkpoint, "not a weak or ensemble checkpoint")),
    };
    Ok(EvalRecord::from_confusion(&confusion(
        &predictions,
        &ds.labels,
        classes,
    )?))
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == REPORT_HEADER => {}
        other => return Err(Error::Format(format!("report header mismatch: {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(ReportRow::from_csv)
        .collect()
}

/// Writes `report.csv` and `report.txt` into `out`.
pub fn emit_report(rows: &[ReportRow], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = out.join(REPORT_CSV);
    let txt = out.join(REPORT_TXT);
    write_file(&csv, report_csv(rows).as_bytes())?;
    write_file(&txt, summarize(rows).as_bytes())?;
    Ok((csv, txt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::Strategy;

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, txt) = emit_report(&[], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(csv).unwrap(), format!("{REPORT_HEADER}\n"));
        assert!(txt.exists());
    }

    #[test]
    fn report_round_trip() {
        let row = ReportRow {
            strategy: Strategy::Adaptive,
            seed: Some(3),
            test_accuracy: 0.875,
            weighted_f1: 0.8,
            params_total: 10,
            params_trainable: 2,
            flops_fwd: 99,
        };
        let text = report_csv(&[row]);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 7);
        assert_eq!(parse_report_csv(&text).unwrap(), vec![row]);
        assert!(matches!(parse_report_csv("a,b\n"), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_report_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        assert!(matches!(emit_report(&[], &blocker.join("sub")), Err(Error::Io { .. })));
    }

    #[test]
    fn file_dataset_needs_valid_and_test() {
        let cfg = ExperimentConfig::parse("dataset: train.aeib\n").unwrap();
        match load_splits(&cfg) {
            Err(Error::Config(m)) => assert!(m.starts_with("valid_dataset"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phase2_requires_n_checkpoints() {
        let cfg = ExperimentConfig::parse("dataset: synthetic:2x4@3,8,8\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_phase2(&cfg, dir.path()), Err(Error::Config(_))));
    }
}
