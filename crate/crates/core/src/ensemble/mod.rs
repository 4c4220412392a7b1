//! Voting, output-level and feature-level ensembles of weak learners.

pub mod checkpoint;
mod compare;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract_err, shape_err, Result};
use crate::metrics::argmax_rows;
use crate::model::{checkpoint::extractor_checksum, WeakLearner};
use crate::tensor::{Tape, Tensor};

pub use compare::{
    median, run_comparison, summarize, Comparison, ComparisonData, LabelledInputs, ReportRow, Strategy, REPORT_HEADER,
};
pub use train::{
    fine_tune_ensemble, fine_tune_output_combiner, train_linear_head, FineTuneConfig, FineTuneEpoch, FineTuneRecord,
};

/// Trainable parameters of a combination layer over extractors of the
/// given feature widths.
pub fn trainable_param_count(feature_dims: &[usize], classes: usize) -> usize {
    classes * feature_dims.iter().sum::<usize>() + classes
}

/// Concatenates `[B,f_i]` blocks along the feature axis, in order.
pub fn feature_concat(features: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars: Vec<_> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let out = tape.concat(&vars)?;
    Ok(tape.value(out).clone())
}

/// Per-sample mode of the voters' labels; ties go to the lowest label.
pub fn majority_vote(predictions: &[Vec<usize>]) -> Result<Vec<usize>> {
    let Some(first) = predictions.first() else {
        return Err(contract_err!("majority vote needs at least one voter"));
    };
    let n = first.len();
    if let Some(p) = predictions.iter().find(|p| p.len() != n) {
        return Err(shape_err!("voters disagree on length: {n} vs {}", p.len()));
    }
    let top = predictions.iter().flatten().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    Ok((0..n)
        .map(|i| {
            counts.iter_mut().for_each(|c| *c = 0);
            for p in predictions {
                counts[p[i]] += 1;
            }
            // max_by_key keeps the last maximum, so scan in reverse
            counts
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|&(_, c)| *c)
                .map(|(label, _)| label)
                .expect("at least one label")
        })
        .collect())
}

/// Linear + log-softmax layer as `[classes, inputs]` weight and `[classes]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl LinearHead {
    /// Uniform fan-in weights, zero bias.
    pub fn init(inputs: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: crate::model::uniform(&[classes, inputs], bound, &mut rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let (w, b) = (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()));
        let y = tape.linear(x, w, b)?;
        let lp = tape.log_softmax(y)?;
        Ok(tape.value(lp).clone())
    }
}

fn check_members(learners: &[WeakLearner], need_head: bool) -> Result<()> {
    let Some(first) = learners.first() else {
        return Err(contract_err!("an ensemble needs at least one weak learner"));
    };
    for (i, l) in learners.iter().enumerate() {
        if l.input_size != first.input_size || l.classes != first.classes {
            return Err(shape_err!(
                "weak learner {i} expects {:?} input and {} classes, learner 0 expects {:?} and {}",
                l.input_size,
                l.classes,
                first.input_size,
                first.classes
            ));
        }
        if need_head && l.head.is_none() {
            return Err(contract_err!("weak learner {i} has no head"));
        }
    }
    Ok(())
}

/// Frozen extractors whose concatenated features feed one trainable
/// linear + log-softmax combination layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveEnsemble {
    extractors: Vec<WeakLearner>,
    pub combination: LinearHead,
}

impl AdaptiveEnsemble {
    /// Strips heads, freezes extractors and draws a fresh combination layer.
    pub fn new(learners: Vec<WeakLearner>, seed: u64) -> Result<Self> {
        check_members(&learners, false)?;
        let extractors: Vec<_> = learners.into_iter().map(WeakLearner::strip_head_and_freeze).collect();
        let dims: usize = extractors.iter().map(|e| e.feature_dim).sum();
        let combination = LinearHead::init(dims, extractors[0].classes, seed);
        Ok(Self {
            extractors,
            combination,
        })
    }

    /// Assembles an ensemble around an existing combination layer.
    pub fn from_parts(learners: Vec<WeakLearner>, combination: LinearHead) -> Result<Self> {
        check_members(&learners, false)?;
        let extractors: Vec<_> = learners.into_iter().map(WeakLearner::strip_head_and_freeze).collect();
        let dims: usize = extractors.iter().map(|e| e.feature_dim).sum();
        let classes = extractors[0].classes;
        if combination.weight.shape() != [classes, dims] || combination.bias.shape() != [classes] {
            return Err(shape_err!(
                "combination layer {:?}/{:?} does not fit {classes} classes over {dims} features",
                combination.weight.shape(),
                combination.bias.shape()
            ));
        }
        Ok(Self {
            extractors,
            combination,
        })
    }

    pub fn extractors(&self) -> &[WeakLearner] {
        &self.extractors
    }

    pub fn len(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extractors.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.combination.classes()
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.extractors[0].input_size
    }

    pub fn feature_dims(&self) -> Vec<usize> {
        self.extractors.iter().map(|e| e.feature_dim).collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        trainable_param_count(&self.feature_dims(), self.classes())
    }

    pub fn total_param_count(&self) -> usize {
        self.extractors.iter().map(WeakLearner::param_count).sum::<usize>() + self.trainable_param_count()
    }

    pub fn extractor_checksums(&self) -> Vec<String> {
        self.extractors.iter().map(extractor_checksum).collect()
    }

    /// Concatenated extractor features `[B, Σf]`; extractors run concurrently.
    pub fn features_of(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        let blocks = self
            .extractors
            .par_iter()
            .map(|e| e.features_of(inputs))
            .collect::<Result<Vec<_>>>()?;
        feature_concat(&blocks)
    }

    /// Ensemble log-probabilities `[B, classes]`.
    pub fn forward(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.combination.forward(&self.features_of(inputs)?)
    }

    pub fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.forward(inputs)?.data(), self.classes()))
    }
}

/// Ensemble log-probabilities for a batch.
pub fn adaptive_forward(ens: &AdaptiveEnsemble, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    ens.forward(batch)
}

/// Weak learners that keep their heads, combined by a linear + log-softmax
/// layer over their concatenated log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputCombiner {
    pub combination: LinearHead,
}

impl OutputCombiner {
    pub fn new(learners: usize, classes: usize, seed: u64) -> Self {
        Self {
            combination: LinearHead::init(learners * classes, classes, seed),
        }
    }

    /// Passes one learner's outputs through unchanged.
    pub fn identity(classes: usize) -> Self {
        Self {
            combination: LinearHead {
                weight: Tensor::from_fn(
                    &[classes, classes],
                    |i| if i / classes == i % classes { 1.0 } else { 0.0 },
                ),
                bias: Tensor::zeros(&[classes]),
            },
        }
    }

    /// Concatenated learner log-probabilities `[B, N·classes]`.
    pub fn inputs_of(learners: &[WeakLearner], inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_members(learners, true)?;
        let blocks = learners
            .par_iter()
            .map(|l| l.log_probs_of(inputs))
            .collect::<Result<Vec<_>>>()?;
        feature_concat(&blocks)
    }

    pub fn forward(&self, learners: &[WeakLearner], inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.combination.forward(&Self::inputs_of(learners, inputs)?)
    }
}

pub fn output_combination_forward(
    learners: &[WeakLearner],
    combiner: &OutputCombiner,
    batch: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    combiner.forward(learners, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::{build_scaled_cnn, eff_tiny_base, ScalingConfig};
    use rand::Rng;

    pub(super) fn learner(seed: u64) -> WeakLearner {
        build_scaled_cnn(&eff_tiny_base(), (16, 16), ScalingConfig::default(), 3, seed).unwrap()
    }

    pub(super) fn batch(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::model::uniform(&[b, 3, 16, 16], 1.0, &mut rng)
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(feature_concat(&[a.clone(), b]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(feature_concat(std::slice::from_ref(&a)).unwrap(), a);

        let parts = [
            Tensor::from_fn(&[2, 2], |i| i as f32),
            Tensor::from_fn(&[2, 3], |i| 10.0 + i as f32),
            Tensor::from_fn(&[2, 1], |i| 20.0 + i as f32),
        ];
        let cat = feature_concat(&parts).unwrap();
        assert_eq!(cat.shape(), &[2, 6]);
        assert_eq!(&cat.data()[6..8], &parts[0].data()[2..4]);
        assert_eq!(&cat.data()[8..11], &parts[1].data()[3..6]);
        assert_eq!(cat.data()[11], parts[2].data()[1]);

        let odd = Tensor::<f32>::zeros(&[3, 2]);
        assert!(matches!(feature_concat(&[a, odd]), Err(Error::Shape(_))));
    }

    #[test]
    fn vote_cases() {
        assert_eq!(majority_vote(&[vec![2], vec![2], vec![7]]).unwrap(), vec![2]);
        assert_eq!(majority_vote(&[vec![1], vec![2]]).unwrap(), vec![1]);
        assert_eq!(majority_vote(&[vec![2], vec![1]]).unwrap(), vec![1]);
        assert!(matches!(majority_vote(&[]), Err(Error::Contract(_))));
        assert!(majority_vote(&[vec![1, 2], vec![1]]).is_err());
    }

    fn vote_oracle(predictions: &[Vec<usize>], i: usize) -> usize {
        let mut best = (0usize, usize::MAX);
        for label in 0..=9 {
            let count = predictions.iter().filter(|p| p[i] == label).count();
            if count > best.0 {
                best = (count, label);
            }
        }
        best.1
    }

    #[test]
    fn vote_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for voters in 1..=7 {
            let predictions: Vec<Vec<usize>> = (0..voters)
                .map(|_| (0..100).map(|_| rng.random_range(0..10)).collect())
                .collect();
            let voted = majority_vote(&predictions).unwrap();
            for (i, &v) in voted.iter().enumerate() {
                assert_eq!(v, vote_oracle(&predictions, i));
            }
        }
    }

    #[test]
    fn forward_rows_are_log_probabilities() {
        let ens = AdaptiveEnsemble::new(vec![learner(0), learner(1)], 5).unwrap();
        let out = ens.forward(&batch(4, 2)).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        for row in out.data().chunks(3) {
            let total: f64 = row.iter().map(|v| f64::from(*v).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        assert_eq!(ens.forward(&batch(4, 2)).unwrap(), out);
    }

    #[test]
    fn zero_combination_is_uniform() {
        let mut ens = AdaptiveEnsemble::new(vec![learner(0), learner(1)], 5).unwrap();
        ens.combination.weight = Tensor::zeros(ens.combination.weight.shape());
        let out = ens.forward(&batch(3, 4)).unwrap();
        for v in out.data() {
            assert!((f64::from(*v) + 3f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn single_member_with_own_head_matches_learner() {
        let l = learner(9);
        let [w, b] = l.head.clone().unwrap();
        let x = batch(5, 1);
        let expected = l.forward_logits(&x).unwrap();
        let ens = AdaptiveEnsemble::from_parts(vec![l], LinearHead { weight: w, bias: b }).unwrap();
        for (a, e) in ens.forward(&x).unwrap().data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn trainable_count_formula() {
        assert_eq!(trainable_param_count(&[1280, 1280], 37), 94_757);
        let ens = AdaptiveEnsemble::new(vec![learner(0), learner(1)], 0).unwrap();
        assert_eq!(ens.trainable_param_count(), 3 * 80 + 3);
        assert_eq!(ens.combination.param_count(), ens.trainable_param_count());
        assert!(ens.extractors().iter().all(|e| e.frozen && e.head.is_none()));
    }

    #[test]
    fn mismatched_members_rejected() {
        let other = build_scaled_cnn(&eff_tiny_base(), (16, 16), ScalingConfig::default(), 4, 0).unwrap();
        assert!(AdaptiveEnsemble::new(vec![learner(0), other], 0).is_err());
        let bad = LinearHead::init(10, 3, 0);
        assert!(matches!(
            AdaptiveEnsemble::from_parts(vec![learner(0)], bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn identity_output_combiner_reproduces_learner() {
        let l = learner(2);
        let x = batch(4, 3);
        let expected = l.forward_logits(&x).unwrap();
        let out = OutputCombiner::identity(3)
            .forward(std::slice::from_ref(&l), &x)
            .unwrap();
        for (a, e) in out.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-6);
        }
        let two = OutputCombiner::new(2, 3, 0)
            .forward(&[l.clone(), learner(3)], &x)
            .unwrap();
        for row in two.data().chunks(3) {
            let total: f64 = row.iter().map(|v| f64::from(*v).exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let stripped = l.strip_head_and_freeze();
        assert!(matches!(
            OutputCombiner::inputs_of(&[stripped], &x),
            Err(Error::Contract(_))
        ));
    }
}
