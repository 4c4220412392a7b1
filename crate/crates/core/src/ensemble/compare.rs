use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{majority_vote, train_linear_head, AdaptiveEnsemble, FineTuneConfig, FineTuneRecord, OutputCombiner};
use crate::complexity::{model_complexity, ComplexityReport};
use crate::error::{contract_err, Error, Result};
use crate::metrics::{accuracy, argmax_rows, weighted_f1};
use crate::model::{FeatureShape, LayerSpec, WeakLearner};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub const REPORT_HEADER: &str = "strategy,seed,test_accuracy,weighted_f1,params_total,params_trainable,flops_fwd";

// seed streams for the two trainable strategies
const ADAPTIVE_STREAM: u64 = 1;
const OUTPUT_STREAM: u64 = 2;

/// Preprocessed images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledInputs {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ComparisonData {
    pub train: LabelledInputs,
    pub valid: LabelledInputs,
    pub test: LabelledInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// One weak learner on its own.
    Weak(usize),
    Vote,
    Output,
    Adaptive,
    /// Median of the adaptive rows.
    Summary,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Weak(i) => write!(f, "weak_{i}"),
            Self::Vote => f.write_str("vote"),
            Self::Output => f.write_str("output"),
            Self::Adaptive => f.write_str("adaptive"),
            Self::Summary => f.write_str("summary"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vote" => Self::Vote,
            "output" => Self::Output,
            "adaptive" => Self::Adaptive,
            "summary" => Self::Summary,
            _ => match s.strip_prefix("weak_").and_then(|i| i.parse().ok()) {
                Some(i) => Self::Weak(i),
                None => return Err(Error::Format(format!("unknown strategy {s:?}"))),
            },
        })
    }
}

/// One line of the comparison report. `seed` is `None` on the summary row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub test_accuracy: f64,
    pub weighted_f1: f64,
    pub params_total: u64,
    pub params_trainable: u64,
    pub flops_fwd: u64,
}

impl ReportRow {
    fn new(strategy: Strategy, seed: Option<u64>, scores: (f64, f64), cost: &ComplexityReport) -> Self {
        Self {
            strategy,
            seed,
            test_accuracy: scores.0,
            weighted_f1: scores.1,
            params_total: cost.params_total,
            params_trainable: cost.params_trainable,
            flops_fwd: cost.flops_fwd,
        }
    }

    pub fn to_csv(&self) -> String {
        let seed = self.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
        format!(
            "{},{seed},{:.6},{:.6},{},{},{}",
            self.strategy,
            self.test_accuracy,
            self.weighted_f1,
            self.params_total,
            self.params_trainable,
            self.flops_fwd
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let [strategy, seed, acc, f1, total, trainable, flops] = fields[..] else {
            return Err(Error::Format(format!("report row needs 7 fields: {line:?}")));
        };
        let bad = |what: &str| Error::Format(format!("report row has a bad {what}: {line:?}"));
        Ok(Self {
            strategy: strategy.parse()?,
            seed: match seed {
                "median" => None,
                s => Some(s.parse().map_err(|_| bad("seed"))?),
            },
            test_accuracy: acc.parse().map_err(|_| bad("test_accuracy"))?,
            weighted_f1: f1.parse().map_err(|_| bad("weighted_f1"))?,
            params_total: total.parse().map_err(|_| bad("params_total"))?,
            params_trainable: trainable.parse().map_err(|_| bad("params_trainable"))?,
            flops_fwd: flops.parse().map_err(|_| bad("flops_fwd"))?,
        })
    }
}

/// Report rows plus the trained adaptive ensembles, one per seed.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rows: Vec<ReportRow>,
    pub adaptive: Vec<(AdaptiveEnsemble, FineTuneRecord)>,
    /// Index into `adaptive` with the highest validation F1.
    pub best: usize,
}

fn scores(predictions: &[usize], data: &LabelledInputs, classes: usize) -> Result<(f64, f64)> {
    Ok((
        accuracy(predictions, &data.labels)?,
        weighted_f1(predictions, &data.labels, classes)?,
    ))
}

fn input_shape(l: &WeakLearner) -> FeatureShape {
    FeatureShape::Map {
        channels: 3,
        height: l.input_size.0,
        width: l.input_size.1,
    }
}

fn head_specs(inputs: usize, classes: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::Linear {
            in_features: inputs,
            out_features: classes,
        },
        LayerSpec::LogSoftmax,
    ]
}

/// Complexity of one learner, optionally with its head, optionally frozen.
fn learner_complexity(l: &WeakLearner, with_head: bool, frozen: bool) -> Result<ComplexityReport> {
    let mut specs = l.architecture.clone();
    if with_head {
        specs.extend(head_specs(l.feature_dim, l.classes));
    }
    model_complexity(&specs, input_shape(l), &vec![frozen; specs.len()])
}

fn head_complexity(inputs: usize, classes: usize) -> Result<ComplexityReport> {
    model_complexity(
        &head_specs(inputs, classes),
        FeatureShape::Vector { features: inputs },
        &[],
    )
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

/// Evaluates every weak learner alone, majority voting, a trained output
/// combiner and the adaptive ensemble, the last two once per seed.
/// `phase1_seed` labels the rows of the untrained strategies.
pub fn run_comparison(
    learners: &[WeakLearner],
    data: &ComparisonData,
    seeds: &[u64],
    phase1_seed: u64,
    config: &FineTuneConfig,
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(contract_err!("comparison needs at least one seed"));
    }
    let template = AdaptiveEnsemble::new(learners.to_vec(), 0)?;
    let classes = template.classes();

    let mut rows = Vec::new();
    let mut weak_predictions = Vec::with_capacity(learners.len());
    let mut vote_cost = ComplexityReport::default();
    let mut frozen_full = ComplexityReport::default();
    for (i, l) in learners.iter().enumerate() {
        let predictions = l.predict(&data.test.inputs)?;
        let cost = learner_complexity(l, true, false)?;
        rows.push(ReportRow::new(
            Strategy::Weak(i),
            Some(phase1_seed),
            scores(&predictions, &data.test, classes)?,
            &cost,
        ));
        weak_predictions.push(predictions);
        vote_cost = vote_cost.combine(learner_complexity(l, true, true)?);
        frozen_full = frozen_full.combine(learner_complexity(l, true, true)?);
    }
    let vote_scores = scores(&majority_vote(&weak_predictions)?, &data.test, classes)?;

    let features = |x: &LabelledInputs| template.features_of(&x.inputs);
    let (feat_train, feat_valid, feat_test) = (features(&data.train)?, features(&data.valid)?, features(&data.test)?);
    let outputs = |x: &LabelledInputs| OutputCombiner::inputs_of(learners, &x.inputs);
    let (out_train, out_valid, out_test) = (outputs(&data.train)?, outputs(&data.valid)?, outputs(&data.test)?);

    let adaptive_cost = template
        .extractors()
        .iter()
        .map(|e| learner_complexity(e, false, true))
        .try_fold(head_complexity(feat_train.shape()[1], classes)?, |acc, c| {
            c.map(|c| acc.combine(c))
        })?;
    let output_cost = frozen_full.combine(head_complexity(out_train.shape()[1], classes)?);

    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<_> {
            let cfg = FineTuneConfig { seed, ..*config };
            let mut ens = AdaptiveEnsemble::new(learners.to_vec(), derive_seed(seed, ADAPTIVE_STREAM))?;
            let record = train_linear_head(
                &mut ens.combination,
                (&feat_train, &data.train.labels),
                (&feat_valid, &data.valid.labels),
                &cfg,
            )?;
            let adaptive_pred = argmax_rows(ens.combination.forward(&feat_test)?.data(), classes);

            let mut comb = OutputCombiner::new(learners.len(), classes, derive_seed(seed, OUTPUT_STREAM));
            train_linear_head(
                &mut comb.combination,
                (&out_train, &data.train.labels),
                (&out_valid, &data.valid.labels),
                &cfg,
            )?;
            let output_pred = argmax_rows(comb.combination.forward(&out_test)?.data(), classes);
            Ok((ens, record, adaptive_pred, output_pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut adaptive = Vec::with_capacity(seeds.len());
    let (mut accs, mut f1s) = (Vec::new(), Vec::new());
    for (&seed, (ens, record, adaptive_pred, output_pred)) in seeds.iter().zip(per_seed) {
        rows.push(ReportRow::new(Strategy::Vote, Some(seed), vote_scores, &vote_cost));
        rows.push(ReportRow::new(
            Strategy::Output,
            Some(seed),
            scores(&output_pred, &data.test, classes)?,
            &output_cost,
        ));
        let s = scores(&adaptive_pred, &data.test, classes)?;
        accs.push(s.0);
        f1s.push(s.1);
        rows.push(ReportRow::new(Strategy::Adaptive, Some(seed), s, &adaptive_cost));
        adaptive.push((ens, record));
    }
    rows.push(ReportRow::new(
        Strategy::Summary,
        None,
        (median(&mut accs), median(&mut f1s)),
        &adaptive_cost,
    ));

    // first seed wins ties
    let best = adaptive
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, (_, r))| {
            let f1 = r.best_valid_f1.unwrap_or(f64::NEG_INFINITY);
            match best {
                Some((_, b)) if b >= f1 => best,
                _ => Some((i, f1)),
            }
        })
        .map(|(i, _)| i)
        .expect("at least one seed");
    Ok(Comparison { rows, adaptive, best })
}

/// Human-readable digest of report rows: per-strategy medians, the best
/// row and complexity columns.
pub fn summarize(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let mut names: Vec<String> = Vec::new();
    for r in rows.iter().filter(|r| r.strategy != Strategy::Summary) {
        let name = r.strategy.to_string();
        if !names.contains(&name) {
            names.push(name);
        }
    }
    out.push_str(&format!(
        "{:<10} {:>5} {:>10} {:>10} {:>12} {:>10} {:>14}\n",
        "strategy", "runs", "median_acc", "median_f1", "params", "trainable", "flops_fwd"
    ));
    for name in &names {
        let group: Vec<&ReportRow> = rows.iter().filter(|r| &r.strategy.to_string() == name).collect();
        let mut accs: Vec<f64> = group.iter().map(|r| r.test_accuracy).collect();
        let mut f1s: Vec<f64> = group.iter().map(|r| r.weighted_f1).collect();
        let r = group[0];
        out.push_str(&format!(
            "{:<10} {:>5} {:>10.4} {:>10.4} {:>12} {:>10} {:>14}\n",
            name,
            group.len(),
            median(&mut accs),
            median(&mut f1s),
            r.params_total,
            r.params_trainable,
            r.flops_fwd
        ));
    }
    match rows
        .iter()
        .filter(|r| r.strategy != Strategy::Summary)
        .fold(None::<&ReportRow>, |best, r| match best {
            Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
            _ => Some(r),
        }) {
        Some(b) => out.push_str(&format!(
            "best test accuracy: {:.6} ({} seed {})\n",
            b.test_accuracy,
            b.strategy,
            b.seed.map_or_else(|| "median".into(), |s| s.to_string())
        )),
        None => out.push_str("best test accuracy: none\n"),
    }
    out
}
