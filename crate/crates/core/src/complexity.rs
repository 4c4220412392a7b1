//! Static parameter and FLOP accounting, plus the training-cost model.
//!
//! One multiply-accumulate counts as one FLOP unless the doubled
//! convention is requested.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{propagate, Activation, FeatureShape, LayerSpec};

/// FLOPs charged per trainable parameter for one optimizer update.
pub const UPDATE_FLOPS_PER_PARAM: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopConvention {
    #[default]
    Mac,
    /// Multiply and add counted separately.
    Double,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            Self::Mac => 1,
            Self::Double => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params_total: u64,
    pub params_trainable: u64,
    pub flops_fwd: u64,
    pub flops_back: u64,
    pub flops_update: u64,
}

impl ComplexityReport {
    pub fn with_convention(self, convention: FlopConvention) -> Self {
        let f = convention.factor();
        Self {
            flops_fwd: self.flops_fwd * f,
            flops_back: self.flops_back * f,
            flops_update: self.flops_update * f,
            ..self
        }
    }

    /// Sums two reports, as for models evaluated side by side.
    pub fn combine(self, other: Self) -> Self {
        Self {
            params_total: self.params_total + other.params_total,
            params_trainable: self.params_trainable + other.params_trainable,
            flops_fwd: self.flops_fwd + other.flops_fwd,
            flops_back: self.flops_back + other.flops_back,
            flops_update: self.flops_update + other.flops_update,
        }
    }
}

/// Parameters and forward FLOPs of one layer applied to `input`.
pub fn count_layer(spec: &LayerSpec, input: FeatureShape) -> Result<(u64, u64)> {
    let output = spec.output_shape(input)?;
    let counts = match *spec {
        LayerSpec::Conv { activation, .. } => {
            let FeatureShape::Map {
                mut height, mut width, ..
            } = input
            else {
                unreachable!("output_shape accepted a non-map conv input")
            };
            let (mut params, mut flops) = (0u64, 0u64);
            for c in spec.conv_instances() {
                let kk = (c.in_channels / c.groups * c.kernel * c.kernel) as u64;
                height = (height + 2 * c.padding - c.kernel) / c.stride + 1;
                width = (width + 2 * c.padding - c.kernel) / c.stride + 1;
                let positions = (height * width) as u64;
                params += c.out_channels as u64 * kk + c.out_channels as u64;
                flops += c.out_channels as u64 * kk * positions;
                if activation.is_some() {
                    flops += c.out_channels as u64 * positions;
                }
            }
            (params, flops)
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => {
            let (i, o) = (in_features as u64, out_features as u64);
            (o * i + o, o * i)
        }
        LayerSpec::Pool => (0, input.elements() as u64),
        LayerSpec::Activation { .. } | LayerSpec::LogSoftmax => (0, output.elements() as u64),
        LayerSpec::SqueezeExcite { channels, squeeze } => {
            let (c, s) = (channels as u64, squeeze as u64);
            let map = input.elements() as u64;
            // pool, reduce, activation, expand, gate, rescale
            (2 * c * s + s + c, map + c * s + s + s * c + c + map)
        }
    };
    Ok(counts)
}

/// Sums layer counts over a stack. `frozen[i]` excludes layer `i` from the
/// trainable count; a short mask leaves the remaining layers trainable.
pub fn model_complexity(specs: &[LayerSpec], input: FeatureShape, frozen: &[bool]) -> Result<ComplexityReport> {
    let mut shape = input;
    let mut report = ComplexityReport::default();
    for (i, spec) in specs.iter().enumerate() {
        let (params, flops) = count_layer(spec, shape)?;
        report.params_total += params;
        if !frozen.get(i).copied().unwrap_or(false) {
            report.params_trainable += params;
        }
        report.flops_fwd += flops;
        shape = spec.output_shape(shape)?;
    }
    report.flops_back = report.flops_fwd;
    report.flops_update = (UPDATE_FLOPS_PER_PARAM * report.params_trainable as f64) as u64;
    Ok(report)
}

/// EfficientNet-b0 as a counting descriptor: stem, seven MBConv stages with
/// depthwise convolutions and squeeze-excitation, 1×1 head, classifier.
pub fn efficientnet_b0_descriptor() -> Vec<LayerSpec> {
    let act = Some(Activation::Silu);
    // (expansion, kernel, stride, in, out, repeats)
    const STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
        (1, 3, 1, 32, 16, 1),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
        (6, 5, 2, 112, 192, 4),
        (6, 3, 1, 192, 320, 1),
    ];
    let mut specs = vec![LayerSpec::conv(3, 32, 3, 2, act)];
    for (e, k, s, c_in, c_out, r) in STAGES {
        for i in 0..r {
            let inp = if i == 0 { c_in } else { c_out };
            let stride = if i == 0 { s } else { 1 };
            let hidden = inp * e;
            if e != 1 {
                specs.push(LayerSpec::conv(inp, hidden, 1, 1, act));
            }
            specs.push(LayerSpec::conv(hidden, hidden, k, stride, act).with_groups(hidden));
            specs.push(LayerSpec::SqueezeExcite {
                channels: hidden,
                squeeze: (inp / 4).max(1),
            });
            specs.push(LayerSpec::conv(hidden, c_out, 1, 1, None));
        }
    }
    specs.push(LayerSpec::conv(320, 1280, 1, 1, act));
    specs.push(LayerSpec::Pool);
    specs.push(LayerSpec::Linear {
        in_features: 1280,
        out_features: 1000,
    });
    specs
}

/// Feature width a descriptor produces just before its classifier.
pub fn feature_dim(specs: &[LayerSpec], input: FeatureShape) -> Result<usize> {
    let body = match specs.last() {
        Some(LayerSpec::Linear { .. }) => &specs[..specs.len() - 1],
        _ => specs,
    };
    Ok(propagate(body, input)?.elements())
}

/// Inputs of the two-phase training cost estimate, all per image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// End-to-end weak trainings.
    pub a: u32,
    /// Fine-tuning runs.
    pub b: u32,
    /// Weak learners feeding the combination layer.
    pub n: u32,
    pub flops_fwd: f64,
    pub flops_back: f64,
    /// End-to-end trainable parameters of one weak learner.
    pub params: f64,
    /// Trainable parameters of the combination layer.
    pub head_params: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            a: 2,
            b: 5,
            n: 2,
            flops_fwd: 0.39e9,
            flops_back: 0.39e9,
            params: 5.0e6,
            head_params: 1.0e5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.a == 0 || self.b == 0 || self.n == 0 {
            return Err(Error::Config("cost model: A, B and N must be >= 1".into()));
        }
        for (name, v) in [
            ("flops_fwd", self.flops_fwd),
            ("flops_back", self.flops_back),
            ("params", self.params),
            ("head_params", self.head_params),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("cost model: {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn flops_update(&self) -> f64 {
        UPDATE_FLOPS_PER_PARAM * self.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostSummary {
    pub parallel: bool,
    /// Named contributions; they sum to `total`.
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

/// Per-image training FLOPs of the whole pipeline.
///
/// Serial: every end-to-end training and every fine-tuning run is charged.
/// Parallel: one end-to-end step plus one fine-tuning step, as when all
/// runs execute side by side.
pub fn pipeline_cost(model: &CostModel, parallel: bool) -> Result<CostSummary> {
    model.validate()?;
    let head_back = model.head_params;
    let head_update = UPDATE_FLOPS_PER_PARAM * model.head_params;
    let (a, b, n) = (f64::from(model.a), f64::from(model.b), f64::from(model.n));
    let terms: Vec<(String, f64)> = if parallel {
        vec![
            ("end_to_end.fwd".into(), model.flops_fwd),
            ("end_to_end.back".into(), model.flops_back),
            ("end_to_end.update".into(), model.flops_update()),
            ("fine.fwd".into(), model.flops_fwd),
            ("fine.head_back".into(), head_back),
            ("fine.head_update".into(), head_update),
        ]
    } else {
        vec![
            ("end_to_end.fwd".into(), a * model.flops_fwd),
            ("end_to_end.back".into(), a * model.flops_back),
            ("end_to_end.update".into(), a * model.flops_update()),
            ("fine.fwd".into(), b * n * model.flops_fwd),
            ("fine.head_back".into(), b * head_back),
            ("fine.head_update".into(), b * head_update),
        ]
    };
    let total = terms.iter().map(|(_, v)| v).sum();
    Ok(CostSummary { parallel, terms, total })
}
