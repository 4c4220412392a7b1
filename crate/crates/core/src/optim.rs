//! AdaBelief with decoupled weight decay, and validation-driven early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBeliefConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub rectify: bool,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-16,
            weight_decay: 0.0,
            decoupled: true,
            rectify: false,
        }
    }
}

impl AdaBeliefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rectify {
            return Err(Error::Config("rectify: rectified AdaBelief is not supported".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr: must be positive, got {}", self.lr)));
        }
        for (key, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{key}: must lie in [0,1), got {beta}")));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("eps: must be >= 0, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay: must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First moment `m`, belief `s` and step count, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaBeliefState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub s: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct AdaBelief<T = f32> {
    pub config: AdaBeliefConfig,
    pub state: AdaBeliefState<T>,
}

impl<T: Real> AdaBelief<T> {
    pub fn new(config: AdaBeliefConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| vec![T::ZERO; p.len()]).collect();
        Ok(Self {
            config,
            state: AdaBeliefState {
                step: 0,
                m: zeros(),
                s: zeros(),
            },
        })
    }

    /// Applies one update to every parameter and clears the consumed grads.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        if params.len() != self.state.m.len() || grads.len() != params.len() {
            return Err(contract_err!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.state.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            match g {
                None => return Err(contract_err!("parameter {i} has no gradient")),
                Some(g) if g.len() != p.len() || self.state.m[i].len() != p.len() => {
                    return Err(contract_err!("parameter {i} changed size"));
                }
                Some(_) => {}
            }
        }

        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let beta1 = T::from_f64(c.beta1);
        let beta2 = T::from_f64(c.beta2);
        let one_m_b1 = T::from_f64(1.0 - c.beta1);
        let one_m_b2 = T::from_f64(1.0 - c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let wd = T::from_f64(c.weight_decay);

        for (i, (p, g)) in params.iter_mut().zip(grads.iter_mut()).enumerate() {
            let g = g.take().expect("checked above");
            let (m, s) = (&mut self.state.m[i], &mut self.state.s[i]);
            for (((theta, &grad), m), s) in p.data_mut().iter_mut().zip(&g).zip(m).zip(s) {
                let grad = if c.decoupled { grad } else { grad + wd * *theta };
                *m = beta1 * *m + one_m_b1 * grad;
                let diff = grad - *m;
                *s = beta2 * *s + one_m_b2 * diff * diff;
                let m_hat = *m / bc1;
                let s_hat = *s / bc2;
                let update = lr * (m_hat / (s_hat.sqrt() + eps));
                let decay = if c.decoupled { lr * wd * *theta } else { T::ZERO };
                *theta = *theta - update - decay;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation score (higher is better) and signals a stop
/// once `patience` consecutive epochs fail to strictly improve on it.
#[derive(Clone, Debug)]
pub struct EarlyStopper<C> {
    patience: usize,
    best_score: Option<f64>,
    best_epoch: Option<usize>,
    epochs_since_best: usize,
    best_checkpoint: Option<C>,
}

impl<C> EarlyStopper<C> {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience: must be >= 1".into()));
        }
        Ok(Self {
            patience,
            best_score: None,
            best_epoch: None,
            epochs_since_best: 0,
            best_checkpoint: None,
        })
    }

    pub fn patience(&self) -> usize {
        self.patience
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best_score
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn epochs_since_best(&self) -> usize {
        self.epochs_since_best
    }

    pub fn best_checkpoint(&self) -> Option<&C> {
        self.best_checkpoint.as_ref()
    }

    pub fn into_best_checkpoint(self) -> Option<C> {
        self.best_checkpoint
    }

    /// Records the score of `epoch`. `snapshot` is only called on a strict
    /// improvement, and its result replaces the stored checkpoint.
    pub fn update(&mut self, epoch: usize, score: f64, snapshot: impl FnOnce() -> C) -> StopDecision {
        let improved = match self.best_score {
            None => true,
            Some(best) => score > best,
        };
        if improved {
            self.best_score = Some(score);
            self.best_epoch = Some(epoch);
            self.epochs_since_best = 0;
            self.best_checkpoint = Some(snapshot());
        } else {
            self.epochs_since_best += 1;
        }
        if self.epochs_since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(opt: &mut AdaBelief<f64>, theta: &mut Tensor<f64>, g: f64) {
        let mut params = [theta.clone()];
        opt.step(&mut params, &mut [Some(vec![g])]).unwrap();
        *theta = params[0].clone();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::<f32>::full(&[3], 0.7), Tensor::full(&[2, 2], -1.5)];
        let before = params.clone();
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &params).unwrap();
        for _ in 0..5 {
            let mut grads = vec![Some(vec![0.0; 3]), Some(vec![0.0; 4])];
            opt.step(&mut params, &mut grads).unwrap();
            assert!(grads.iter().all(Option::is_none));
        }
        assert_eq!(params, before);
        assert_eq!(opt.state.step, 5);
    }

    #[test]
    fn first_step_hand_value() {
        let mut theta = Tensor::scalar(1.0f64);
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[theta.clone()]).unwrap();
        scalar_step(&mut opt, &mut theta, 1.0);
        // m̂ = 1, ŝ = 0.81, update = 5e-4 / 0.9
        assert!((theta.data()[0] - (1.0 - 5e-4 / 0.9)).abs() < 1e-12);
        assert!((theta.data()[0] - 0.99944).abs() < 1e-5);
    }

    #[test]
    fn two_steps_match_transcription() {
        let (lr, b1, b2, eps) = (5e-4f64, 0.9f64, 0.999f64, 1e-16f64);
        let (mut th, mut m, mut s) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            s = b2 * s + (1.0 - b2) * (g - m) * (g - m);
            th -= lr * (m / (1.0 - b1.powi(t))) / ((s / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut theta = Tensor::scalar(1.0f64);
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[theta.clone()]).unwrap();
        scalar_step(&mut opt, &mut theta, 1.0);
        scalar_step(&mut opt, &mut theta, 1.0);
        assert!((theta.data()[0] - th).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &params).unwrap();
        let err = opt.step(&mut params, &mut [None]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn rectify_rejected() {
        let config = AdaBeliefConfig {
            rectify: true,
            ..Default::default()
        };
        assert!(AdaBelief::<f32>::new(config, &[]).is_err());
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let config = AdaBeliefConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut theta = Tensor::scalar(2.0f64);
        let mut opt = AdaBelief::new(config, &[theta.clone()]).unwrap();
        scalar_step(&mut opt, &mut theta, 0.0);
        assert!((theta.data()[0] - (2.0 - 5e-4 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let mut theta = Tensor::scalar(1.0f64);
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &[theta.clone()]).unwrap();
        let mut last = 1.0;
        for _ in 0..100 {
            let x = theta.data()[0];
            scalar_step(&mut opt, &mut theta, 2.0 * x);
            let loss = theta.data()[0].powi(2);
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut params = vec![Tensor::<f32>::from_fn(&[5], |i| i as f32 * 0.3 - 0.7)];
        let mut opt = AdaBelief::new(AdaBeliefConfig::default(), &params).unwrap();
        for k in 0..3 {
            let g = (0..5).map(|i| ((i + k) as f32).sin() / 3.0).collect();
            opt.step(&mut params, &mut [Some(g)]).unwrap();
        }
        let json = serde_json::to_string(&opt.state).unwrap();
        let back: AdaBeliefState<f32> = serde_json::from_str(&json).unwrap();
        assert_eq!(back.step, opt.state.step);
        for (a, b) in back.m.iter().flatten().zip(opt.state.m.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.s.iter().flatten().zip(opt.state.s.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stopper_monotone_improvement() {
        let mut st = EarlyStopper::new(10).unwrap();
        for (e, s) in [0.5, 0.6, 0.7].into_iter().enumerate() {
            assert_eq!(st.update(e, s, || e), StopDecision::Continue);
        }
        assert_eq!(st.best_score(), Some(0.7));
        assert_eq!(st.best_checkpoint(), Some(&2));
    }

    #[test]
    fn stopper_stops_on_tenth_stale_epoch() {
        let mut st = EarlyStopper::new(10).unwrap();
        assert_eq!(st.update(0, 0.9, || 0), StopDecision::Continue);
        for e in 1..10 {
            assert_eq!(st.update(e, 0.8, || e), StopDecision::Continue);
        }
        assert_eq!(st.update(10, 0.8, || 10), StopDecision::Stop);
        assert_eq!(st.best_checkpoint(), Some(&0));
    }

    #[test]
    fn stopper_tie_is_not_improvement() {
        let mut st = EarlyStopper::new(2).unwrap();
        st.update(0, 0.5, || "first");
        assert_eq!(st.update(1, 0.5, || "tie"), StopDecision::Continue);
        assert_eq!(st.epochs_since_best(), 1);
        assert_eq!(st.best_checkpoint(), Some(&"first"));
        assert_eq!(st.update(2, 0.5, || "tie"), StopDecision::Stop);
    }

    #[test]
    fn zero_patience_rejected() {
        assert!(EarlyStopper::<()>::new(0).is_err());
    }
}
