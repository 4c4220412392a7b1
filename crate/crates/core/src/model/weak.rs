use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{propagate, Activation, FeatureShape, LayerSpec};
use super::ScalingConfig;
use crate::data::batch_iter;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::metrics::argmax_rows;
use crate::optim::{AdaBelief, AdaBeliefConfig};
use crate::seeds::derive_seed;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Consecutive epochs at 100% training accuracy that end overfit training.
pub const OVERFIT_EPOCHS: usize = 3;

/// Rows per chunk when running inference over a whole dataset.
const INFERENCE_CHUNK: usize = 128;

/// A CNN feature extractor plus a detachable linear + log-softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakLearner {
    /// Extractor layers, ending in global pooling.
    pub architecture: Vec<LayerSpec>,
    pub scaling: ScalingConfig,
    /// Expected `(height, width)` of the 3-channel input.
    pub input_size: (usize, usize),
    pub feature_dim: usize,
    pub classes: usize,
    /// Extractor tensors in the order the layers consume them.
    pub extractor: Vec<Tensor<f32>>,
    /// `[weight (classes×feature_dim), bias (classes)]`, absent once stripped.
    pub head: Option<[Tensor<f32>; 2]>,
    pub frozen: bool,
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32)
}

/// Builds the trainable form of `base` under compound scaling: widths and
/// repeats of every conv are scaled, the input resolution is scaled, and a
/// head for `classes` is attached. Weights are drawn from `seed`.
pub fn build_scaled_cnn(
    base: &[LayerSpec],
    base_size: (usize, usize),
    scaling: ScalingConfig,
    classes: usize,
    seed: u64,
) -> Result<WeakLearner> {
    scaling.validate()?;
    if classes < 2 {
        return Err(Error::Build(format!("need at least 2 classes, got {classes}")));
    }
    let mut architecture = Vec::with_capacity(base.len());
    let mut channels = 3;
    for spec in base {
        let scaled = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                groups,
                repeat,
                activation,
                ..
            } => {
                if *groups != 1 {
                    return Err(Error::Build("grouped convolutions are count-only".into()));
                }
                let out = scaling.scale_channels(*out_channels);
                let conv = LayerSpec::Conv {
                    in_channels: channels,
                    out_channels: out,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                    groups: 1,
                    repeat: scaling.scale_repeat(*repeat),
                    activation: *activation,
                };
                channels = out;
                conv
            }
            LayerSpec::Pool | LayerSpec::Activation { .. } => spec.clone(),
            other => {
                return Err(Error::Build(format!(
                    "{other:?} is not supported in a trainable extractor"
                )))
            }
        };
        architecture.push(scaled);
    }
    let input_size = (
        scaling.scale_resolution(base_size.0),
        scaling.scale_resolution(base_size.1),
    );
    let input = FeatureShape::Map {
        channels: 3,
        height: input_size.0,
        width: input_size.1,
    };
    let feature_dim = match propagate(&architecture, input).map_err(|e| Error::Build(e.to_string()))? {
        FeatureShape::Vector { features } => features,
        other => {
            return Err(Error::Build(format!(
                "extractor must end in pooling, ends with {other:?}"
            )))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extractor = Vec::new();
    for spec in &architecture {
        for shape in spec.param_shapes() {
            extractor.push(if shape.len() > 1 {
                let fan_in: usize = shape[1..].iter().product();
                uniform(&shape, (6.0 / fan_in as f64).sqrt(), &mut rng)
            } else {
                Tensor::zeros(&shape)
            });
        }
    }
    let bound = 1.0 / (feature_dim as f64).sqrt();
    let head = [
        uniform(&[classes, feature_dim], bound, &mut rng),
        uniform(&[classes], bound, &mut rng),
    ];
    Ok(WeakLearner {
        architecture,
        scaling,
        input_size,
        feature_dim,
        classes,
        extractor,
        head: Some(head),
        frozen: false,
    })
}

/// Records the extractor on `tape`, consuming `params` in layer order.
pub fn extractor_graph<T: Real>(
    architecture: &[LayerSpec],
    tape: &mut Tape<T>,
    input: Var,
    params: &[Var],
) -> Result<Var> {
    let mut params = params.iter().copied();
    let mut next = |what: &str| {
        params
            .next()
            .ok_or_else(|| contract_err!("extractor is missing the {what} tensor"))
    };
    let activate = |tape: &mut Tape<T>, x: Var, f: Activation| match f {
        Activation::Silu => tape.silu(x),
        Activation::Relu => tape.relu(x),
    };
    let mut x = input;
    for spec in architecture {
        match spec {
            LayerSpec::Conv { activation, .. } => {
                for conv in spec.conv_instances() {
                    let (w, b) = (next("conv weight")?, next("conv bias")?);
                    x = tape.conv2d(x, w, b, conv.stride, conv.padding)?;
                    if let Some(f) = activation {
                        x = activate(tape, x, *f);
                    }
                }
            }
            LayerSpec::Pool => x = tape.global_avg_pool(x)?,
            LayerSpec::Activation { function } => x = activate(tape, x, *function),
            LayerSpec::Linear { .. } => {
                let (w, b) = (next("linear weight")?, next("linear bias")?);
                x = tape.linear(x, w, b)?;
            }
            LayerSpec::LogSoftmax => x = tape.log_softmax(x)?,
            LayerSpec::SqueezeExcite { .. } => return Err(Error::Build("squeeze-excite layers are count-only".into())),
        }
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub reached_overfit: bool,
}

impl TrainingRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: AdaBeliefConfig,
    pub seed: u64,
}

impl WeakLearner {
    pub fn param_count(&self) -> usize {
        let head: usize = self.head.iter().flatten().map(Tensor::len).sum();
        self.extractor_param_count() + head
    }

    pub fn extractor_param_count(&self) -> usize {
        self.extractor.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, batch: &Tensor<f32>) -> Result<()> {
        let (h, w) = self.input_size;
        match *batch.shape() {
            [_, 3, bh, bw] if (bh, bw) == (h, w) => Ok(()),
            ref s => Err(shape_err!("model expects [B,3,{h},{w}] input, got {s:?}")),
        }
    }

    /// Extractor output `[B, feature_dim]`; records nothing for backward.
    pub fn forward_features(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let params: Vec<Var> = self.extractor.iter().map(|p| tape.constant(p.clone())).collect();
        let feats = extractor_graph(&self.architecture, &mut tape, x, &params)?;
        Ok(tape.value(feats).clone())
    }

    /// Head log-probabilities `[B, classes]`.
    pub fn forward_logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let Some([w, b]) = &self.head else {
            return Err(contract_err!("weak learner head was stripped"));
        };
        let feats = self.forward_features(batch)?;
        let mut tape = Tape::new();
        let f = tape.constant(feats);
        let (w, b) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.linear(f, w, b)?;
        let lp = tape.log_softmax(y)?;
        Ok(tape.value(lp).clone())
    }

    /// Runs `forward` over `inputs` in fixed-size chunks and stacks the rows.
    pub(crate) fn chunked(
        inputs: &Tensor<f32>,
        forward: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let n = inputs.shape()[0];
        let mut rows = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            let out = forward(&inputs.slice_rows(&idx)?)?;
            width = out.shape()[1];
            rows.extend_from_slice(out.data());
        }
        Tensor::new(vec![n, width], rows)
    }

    pub fn features_of(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        Self::chunked(inputs, |b| self.forward_features(b))
    }

    pub fn log_probs_of(&self, inputs: &Tensor<f32>) -> Result<Tensor<f32>> {
        Self::chunked(inputs, |b| self.forward_logits(b))
    }

    pub fn predict(&self, inputs: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.log_probs_of(inputs)?.data(), self.classes))
    }

    /// Copies the extractor of `source`, and its head when the class count
    /// matches. Both learners must share architecture and input size.
    pub fn warm_start_from(&mut self, source: &WeakLearner) -> Result<()> {
        if source.architecture != self.architecture || source.input_size != self.input_size {
            return Err(Error::Build(format!(
                "warm start needs the same architecture at {:?} inputs",
                self.input_size
            )));
        }
        self.extractor = source.extractor.clone();
        if let Some(head) = &source.head {
            if source.classes == self.classes {
                self.head = Some(head.clone());
            }
        }
        Ok(())
    }

    /// Detaches the head and freezes the extractor.
    pub fn strip_head_and_freeze(mut self) -> Self {
        self.head = None;
        self.frozen = true;
        self
    }
}

/// Trains the whole learner on one bag until training accuracy has been
/// 100% for [`OVERFIT_EPOCHS`] consecutive epochs, or `max_epochs` runs out.
pub fn train_weak_overfit(
    model: &mut WeakLearner,
    inputs: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainingRecord> {
    if model.frozen {
        return Err(contract_err!("cannot train a frozen weak learner"));
    }
    let Some(head) = model.head.take() else {
        return Err(contract_err!("weak learner has no head to train"));
    };
    model.check_input(inputs)?;
    if inputs.shape()[0] != labels.len() {
        return Err(shape_err!("{} inputs for {} labels", inputs.shape()[0], labels.len()));
    }

    let mut params = std::mem::take(&mut model.extractor);
    let extractor_len = params.len();
    params.extend(head);
    let result = run_epochs(model, &mut params, inputs, labels, config);
    let head_bias = params.pop().expect("head bias");
    let head_weight = params.pop().expect("head weight");
    model.head = Some([head_weight, head_bias]);
    model.extractor = params;
    debug_assert_eq!(model.extractor.len(), extractor_len);
    result
}

fn run_epochs(
    model: &WeakLearner,
    params: &mut [Tensor<f32>],
    inputs: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainingRecord> {
    let mut record = TrainingRecord {
        seed: config.seed,
        ..Default::default()
    };
    let mut optimizer = AdaBelief::new(config.optimizer, params)?;
    let mut perfect_streak = 0;
    for epoch in 0..config.max_epochs {
        let batches = batch_iter(
            labels.len(),
            config.batch_size,
            true,
            derive_seed(config.seed, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch = inputs.slice_rows(idx)?;
            let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let (extractor_vars, head_vars) = vars.split_at(vars.len() - 2);
            let feats = extractor_graph(&model.architecture, &mut tape, x, extractor_vars)?;
            let logits = tape.linear(feats, head_vars[0], head_vars[1])?;
            let lp = tape.log_softmax(logits)?;
            let loss = tape.nll_loss(lp, &targets)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += f64::from(value) * idx.len() as f64;
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f32>>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
            optimizer.step(params, &mut grads)?;
        }

        let (extractor, head) = params.split_at(params.len() - 2);
        let snapshot = WeakLearner {
            extractor: extractor.to_vec(),
            head: Some([head[0].clone(), head[1].clone()]),
            ..model.clone()
        };
        let predictions = snapshot.predict(inputs)?;
        let accuracy = crate::metrics::accuracy(&predictions, labels)?;
        let loss = loss_sum / labels.len() as f64;
        log::debug!("epoch {epoch}: loss {loss:.5} train accuracy {accuracy:.4}");
        record.epochs.push(EpochStats { epoch, loss, accuracy });
        perfect_streak = if accuracy == 1.0 { perfect_streak + 1 } else { 0 };
        if perfect_streak >= OVERFIT_EPOCHS {
            record.reached_overfit = true;
            break;
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::eff_tiny_base;

    fn tiny(classes: usize, seed: u64) -> WeakLearner {
        build_scaled_cnn(&eff_tiny_base(), (32, 32), ScalingConfig::default(), classes, seed).unwrap()
    }

    fn random_batch(b: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&[b, 3, size, size], 1.0, &mut rng)
    }

    #[test]
    fn phi_zero_keeps_base_stack() {
        let m = tiny(4, 0);
        assert_eq!(m.architecture, eff_tiny_base());
        assert_eq!(m.feature_dim, 40);
        assert_eq!(m.input_size, (32, 32));
    }

    #[test]
    fn phi_one_scales_widths_and_resolution() {
        let s = ScalingConfig {
            phi: 1.0,
            ..Default::default()
        };
        let m = build_scaled_cnn(&eff_tiny_base(), (32, 32), s, 4, 0).unwrap();
        let LayerSpec::Conv { out_channels, .. } = m.architecture[0] else {
            panic!()
        };
        assert_eq!(out_channels, 20);
        assert_eq!(m.input_size, (37, 37));
        assert_eq!(m.feature_dim, 44);
    }

    #[test]
    fn param_count_monotone_in_phi() {
        let mut last = 0;
        for phi in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let s = ScalingConfig {
                phi,
                ..Default::default()
            };
            let m = build_scaled_cnn(&eff_tiny_base(), (32, 32), s, 4, 0).unwrap();
            assert!(m.param_count() >= last);
            last = m.param_count();
        }
    }

    #[test]
    fn feature_and_logit_shapes() {
        let m = tiny(5, 1);
        for b in [1, 7] {
            let x = random_batch(b, 32, b as u64);
            assert_eq!(m.forward_features(&x).unwrap().shape(), &[b, 40]);
            let lp = m.forward_logits(&x).unwrap();
            assert_eq!(lp.shape(), &[b, 5]);
            for row in lp.data().chunks(5) {
                let s: f64 = row.iter().map(|&v| f64::from(v).exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let wrong = random_batch(2, 16, 0);
        assert!(matches!(m.forward_features(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = tiny(4, 2);
        m.head = Some([Tensor::zeros(&[4, 40]), Tensor::zeros(&[4])]);
        let lp = m.forward_logits(&random_batch(3, 32, 5)).unwrap();
        for &v in lp.data() {
            assert!((v - (0.25f32).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_compose_features_and_head() {
        let m = tiny(3, 4);
        let x = random_batch(2, 32, 9);
        let feats = m.forward_features(&x).unwrap();
        let [w, b] = m.head.clone().unwrap();
        let mut tape = Tape::new();
        let (f, w, b) = (tape.constant(feats), tape.constant(w), tape.constant(b));
        let y = tape.linear(f, w, b).unwrap();
        let lp = tape.log_softmax(y).unwrap();
        assert_eq!(tape.value(lp), &m.forward_logits(&x).unwrap());
        assert_eq!(m.forward_features(&x).unwrap(), m.forward_features(&x).unwrap());
    }

    #[test]
    fn stripping_keeps_extractor() {
        let m = tiny(3, 4);
        let before = m.extractor.clone();
        let count = m.extractor_param_count();
        let stripped = m.strip_head_and_freeze();
        assert!(stripped.frozen);
        assert_eq!(stripped.extractor, before);
        assert_eq!(stripped.param_count(), count);
        let x = random_batch(1, 32, 0);
        assert!(matches!(stripped.forward_logits(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut m = tiny(2, 0);
        let before = m.clone();
        let x = random_batch(4, 32, 1);
        let config = TrainConfig {
            batch_size: 2,
            max_epochs: 0,
            optimizer: AdaBeliefConfig::default(),
            seed: 0,
        };
        let record = train_weak_overfit(&mut m, &x, &[0, 1, 0, 1], &config).unwrap();
        assert!(record.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn frozen_model_refuses_training() {
        let mut m = tiny(2, 0);
        m.frozen = true;
        let config = TrainConfig {
            batch_size: 2,
            max_epochs: 1,
            optimizer: AdaBeliefConfig::default(),
            seed: 0,
        };
        let x = random_batch(2, 32, 1);
        assert!(train_weak_overfit(&mut m, &x, &[0, 1], &config).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny(2, 0);
        m.extractor[0].data_mut()[0] = f32::NAN;
        let config = TrainConfig {
            batch_size: 2,
            max_epochs: 3,
            optimizer: AdaBeliefConfig::default(),
            seed: 0,
        };
        let x = random_batch(2, 32, 1);
        let err = train_weak_overfit(&mut m, &x, &[0, 1], &config).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref msg) if msg.contains("epoch 0")));
    }

    #[test]
    fn warm_start_copies_matching_parts() {
        let source = tiny(4, 1);
        let mut same = tiny(4, 2);
        same.warm_start_from(&source).unwrap();
        assert_eq!(same, source);

        let mut other_classes = tiny(3, 2);
        let fresh_head = other_classes.head.clone();
        other_classes.warm_start_from(&source).unwrap();
        assert_eq!(other_classes.extractor, source.extractor);
        assert_eq!(other_classes.head, fresh_head);

        let wider = ScalingConfig {
            phi: 1.0,
            ..ScalingConfig::default()
        };
        let mut scaled = build_scaled_cnn(&eff_tiny_base(), (32, 32), wider, 4, 0).unwrap();
        assert!(matches!(scaled.warm_start_from(&source), Err(Error::Build(_))));
    }
}
