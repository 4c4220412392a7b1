use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::conv_out_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Self::Silu),
            "relu" => Ok(Self::Relu),
            _ => Err(Error::Config(format!("activation: unknown function {s:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Silu => "silu",
            Self::Relu => "relu",
        })
    }
}

/// Per-sample activation shape flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Map {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector {
        features: usize,
    },
}

impl FeatureShape {
    pub fn elements(&self) -> usize {
        match *self {
            Self::Map {
                channels,
                height,
                width,
            } => channels * height * width,
            Self::Vector { features } => features,
        }
    }
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

/// One entry of a static architecture description. Used both to build
/// trainable networks and to count parameters and FLOPs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `repeat` stacked convolutions; only the first changes channel count
    /// and applies `stride`. `activation`, when set, follows every copy.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        groups: usize,
        #[serde(default = "one", skip_serializing_if = "is_one")]
        repeat: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<Activation>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Global average pooling, `[C,H,W] -> [C]`.
    Pool,
    Activation {
        function: Activation,
    },
    /// Squeeze-and-excitation gate (pool, reduce, expand, rescale). Count-only.
    SqueezeExcite {
        channels: usize,
        squeeze: usize,
    },
    LogSoftmax,
}

/// One concrete convolution produced by expanding a `Conv` spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvInstance {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl LayerSpec {
    /// Same-padded convolution followed by `activation`.
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Option<Activation>,
    ) -> Self {
        Self::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
            repeat: 1,
            activation,
        }
    }

    pub fn with_repeat(mut self, n: usize) -> Self {
        if let Self::Conv { repeat, .. } = &mut self {
            *repeat = n;
        }
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        if let Self::Conv { groups, .. } = &mut self {
            *groups = g;
        }
        self
    }

    pub fn conv_instances(&self) -> Vec<ConvInstance> {
        let Self::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            repeat,
            ..
        } = *self
        else {
            return Vec::new();
        };
        (0..repeat)
            .map(|j| ConvInstance {
                in_channels: if j == 0 { in_channels } else { out_channels },
                out_channels,
                kernel,
                stride: if j == 0 { stride } else { 1 },
                padding,
                groups,
            })
            .collect()
    }

    /// Shapes of the trainable tensors, in the order they are consumed.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Self::Conv { .. } => self
                .conv_instances()
                .iter()
                .flat_map(|c| {
                    [
                        vec![c.out_channels, c.in_channels / c.groups, c.kernel, c.kernel],
                        vec![c.out_channels],
                    ]
                })
                .collect(),
            Self::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            Self::SqueezeExcite { channels, squeeze } => vec![
                vec![squeeze, channels],
                vec![squeeze],
                vec![channels, squeeze],
                vec![channels],
            ],
            Self::Pool | Self::Activation { .. } | Self::LogSoftmax => Vec::new(),
        }
    }

    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        match (self, input) {
            (
                Self::Conv {
                    in_channels,
                    groups,
                    repeat,
                    out_channels,
                    ..
                },
                FeatureShape::Map {
                    channels,
                    mut height,
                    mut width,
                },
            ) => {
                if channels != *in_channels {
                    return Err(shape_err!("conv expects {in_channels} channels, got {channels}"));
                }
                if *repeat == 0 || *groups == 0 {
                    return Err(shape_err!("conv repeat and groups must be >= 1"));
                }
                if *groups > 1 && (*repeat > 1 || in_channels % groups != 0 || out_channels % groups != 0) {
                    return Err(shape_err!(
                        "grouped conv needs channels divisible by {groups} and no repeats"
                    ));
                }
                for c in self.conv_instances() {
                    let h = conv_out_dim(height, c.kernel, c.stride, c.padding);
                    let w = conv_out_dim(width, c.kernel, c.stride, c.padding);
                    let (Some(h), Some(w)) = (h, w) else {
                        return Err(shape_err!(
                            "conv k={} stride={} has no output on {height}x{width}",
                            c.kernel,
                            c.stride
                        ));
                    };
                    (height, width) = (h, w);
                }
                Ok(FeatureShape::Map {
                    channels: *out_channels,
                    height,
                    width,
                })
            }
            (Self::Pool, FeatureShape::Map { channels, .. }) => Ok(FeatureShape::Vector { features: channels }),
            (
                Self::Linear {
                    in_features,
                    out_features,
                },
                FeatureShape::Vector { features },
            ) => {
                if features != *in_features {
                    return Err(shape_err!("linear expects {in_features} features, got {features}"));
                }
                Ok(FeatureShape::Vector {
                    features: *out_features,
                })
            }
            (Self::SqueezeExcite { channels: c, .. }, FeatureShape::Map { channels, .. }) => {
                if *c != channels {
                    return Err(shape_err!("squeeze-excite expects {c} channels, got {channels}"));
                }
                Ok(input)
            }
            (Self::Activation { .. }, s) => Ok(s),
            (Self::LogSoftmax, s @ FeatureShape::Vector { .. }) => Ok(s),
            (spec, s) => Err(shape_err!("{spec:?} cannot follow shape {s:?}")),
        }
    }
}

/// Propagates `input` through a whole stack.
pub fn propagate(specs: &[LayerSpec], input: FeatureShape) -> Result<FeatureShape> {
    specs.iter().try_fold(input, |s, spec| spec.output_shape(s))
}

/// Desk-scale backbone: stride-2 stem, three conv stages of widths
/// 16/24/40 with repeats 1/2/2, global average pooling.
pub fn eff_tiny_base() -> Vec<LayerSpec> {
    let act = Some(Activation::Silu);
    vec![
        LayerSpec::conv(3, 16, 3, 2, act),
        LayerSpec::conv(16, 16, 3, 1, act),
        LayerSpec::conv(16, 24, 3, 2, act).with_repeat(2),
        LayerSpec::conv(24, 40, 3, 2, act).with_repeat(2),
        LayerSpec::Pool,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_base_shapes() {
        let out = propagate(
            &eff_tiny_base(),
            FeatureShape::Map {
                channels: 3,
                height: 32,
                width: 32,
            },
        )
        .unwrap();
        assert_eq!(out, FeatureShape::Vector { features: 40 });
    }

    #[test]
    fn incompatible_stack_rejected() {
        let specs = vec![LayerSpec::conv(3, 8, 3, 1, None), LayerSpec::conv(4, 8, 3, 1, None)];
        let input = FeatureShape::Map {
            channels: 3,
            height: 8,
            width: 8,
        };
        assert!(matches!(propagate(&specs, input), Err(Error::Shape(_))));
        assert!(LayerSpec::Pool
            .output_shape(FeatureShape::Vector { features: 3 })
            .is_err());
    }

    #[test]
    fn repeated_conv_expands() {
        let spec = LayerSpec::conv(16, 24, 3, 2, None).with_repeat(3);
        let inst = spec.conv_instances();
        assert_eq!(inst.len(), 3);
        assert_eq!((inst[0].in_channels, inst[0].stride), (16, 2));
        assert_eq!((inst[2].in_channels, inst[2].stride), (24, 1));
        assert_eq!(spec.param_shapes().len(), 6);
    }

    #[test]
    fn spec_json_is_compact() {
        let spec = LayerSpec::conv(3, 16, 3, 2, Some(Activation::Silu));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"conv","in_channels":3,"out_channels":16,"kernel":3,"stride":2,"padding":1,"activation":"silu"}"#
        );
        let back: LayerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
