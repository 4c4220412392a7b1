use serde::{Deserialize, Serialize};

use super::{AdaptiveEnsemble, LabelledInputs, LinearHead, OutputCombiner};
use crate::data::batch_iter;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::metrics::{argmax_rows, weighted_f1};
use crate::model::WeakLearner;
use crate::optim::{AdaBelief, AdaBeliefConfig, EarlyStopper, StopDecision};
use crate::seeds::derive_seed;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: AdaBeliefConfig,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_epochs: 200,
            patience: 10,
            optimizer: AdaBeliefConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub valid_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub seed: u64,
    pub epochs: Vec<FineTuneEpoch>,
    pub best_epoch: Option<usize>,
    pub best_valid_f1: Option<f64>,
    /// Optimizer steps taken.
    pub steps: usize,
    pub stopped_early: bool,
}

fn check_labelled(x: &Tensor<f32>, labels: &[usize], width: usize, what: &str) -> Result<()> {
    match *x.shape() {
        [n, w] if n == labels.len() && w == width => Ok(()),
        ref s => Err(shape_err!(
            "{what}: expected [{}, {width}] inputs, got {s:?}",
            labels.len()
        )),
    }
}

fn head_predictions(head: &LinearHead, x: &Tensor<f32>) -> Result<Vec<usize>> {
    Ok(argmax_rows(head.forward(x)?.data(), head.classes()))
}

/// Trains `head` on fixed inputs with AdaBelief, early-stops on validation
/// weighted F1 and leaves the best epoch's parameters in `head`.
pub fn train_linear_head(
    head: &mut LinearHead,
    train: (&Tensor<f32>, &[usize]),
    valid: (&Tensor<f32>, &[usize]),
    config: &FineTuneConfig,
) -> Result<FineTuneRecord> {
    check_labelled(train.0, train.1, head.inputs(), "fine-tune train set")?;
    check_labelled(valid.0, valid.1, head.inputs(), "fine-tune validation set")?;
    let classes = head.classes();
    let mut stopper = EarlyStopper::new(config.patience)?;
    let mut params = vec![head.weight.clone(), head.bias.clone()];
    let mut optimizer = AdaBelief::new(config.optimizer, &params)?;
    let mut record = FineTuneRecord {
        seed: config.seed,
        ..Default::default()
    };

    for epoch in 0..config.max_epochs {
        let batches = batch_iter(
            train.1.len(),
            config.batch_size,
            true,
            derive_seed(config.seed, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for idx in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(train.0.slice_rows(idx)?);
            let w = tape.param(params[0].clone());
            let b = tape.param(params[1].clone());
            let y = tape.linear(x, w, b)?;
            let lp = tape.log_softmax(y)?;
            let targets: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
            let loss = tape.nll_loss(lp, &targets)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite fine-tuning loss in epoch {epoch}"
                )));
            }
            loss_sum += f64::from(value) * idx.len() as f64;
            tape.backward(loss)?;
            let mut grads = vec![tape.take_grad(w), tape.take_grad(b)];
            optimizer.step(&mut params, &mut grads)?;
            record.steps += 1;
        }

        let current = LinearHead {
            weight: params[0].clone(),
            bias: params[1].clone(),
        };
        let f1 = weighted_f1(&head_predictions(&current, valid.0)?, valid.1, classes)?;
        record.epochs.push(FineTuneEpoch {
            epoch,
            loss: loss_sum / train.1.len() as f64,
            valid_f1: f1,
        });
        log::debug!("fine-tune seed {} epoch {epoch}: valid f1 {f1:.4}", config.seed);
        if stopper.update(epoch, f1, || current.clone()) == StopDecision::Stop {
            record.stopped_early = true;
            break;
        }
    }

    record.best_epoch = stopper.best_epoch();
    record.best_valid_f1 = stopper.best_score();
    if let Some(best) = stopper.into_best_checkpoint() {
        *head = best;
    }
    Ok(record)
}

/// Trains only the combination layer. Extractor features are computed once
/// and reused for every epoch.
pub fn fine_tune_ensemble(
    ens: &mut AdaptiveEnsemble,
    train: &LabelledInputs,
    valid: &LabelledInputs,
    config: &FineTuneConfig,
) -> Result<FineTuneRecord> {
    if let Some(i) = ens.extractors().iter().position(|e| !e.frozen) {
        return Err(contract_err!("extractor {i} is not frozen"));
    }
    let train_x = ens.features_of(&train.inputs)?;
    let valid_x = ens.features_of(&valid.inputs)?;
    train_linear_head(
        &mut ens.combination,
        (&train_x, &train.labels),
        (&valid_x, &valid.labels),
        config,
    )
}

/// Trains the combiner over fixed weak-learner outputs.
pub fn fine_tune_output_combiner(
    combiner: &mut OutputCombiner,
    learners: &[WeakLearner],
    train: &LabelledInputs,
    valid: &LabelledInputs,
    config: &FineTuneConfig,
) -> Result<FineTuneRecord> {
    let train_x = OutputCombiner::inputs_of(learners, &train.inputs)?;
    let valid_x = OutputCombiner::inputs_of(learners, &valid.inputs)?;
    train_linear_head(
        &mut combiner.combination,
        (&train_x, &train.labels),
        (&valid_x, &valid.labels),
        config,
    )
}
