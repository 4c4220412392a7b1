use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeKernel {
    #[default]
    Bilinear,
    Nearest,
}

impl std::str::FromStr for ResizeKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            _ => Err(Error::Config(format!("resize: unknown kernel {s:?}"))),
        }
    }
}

impl std::fmt::Display for ResizeKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bilinear => "bilinear",
            Self::Nearest => "nearest",
        })
    }
}

/// Resize target and per-channel standardization constants (on the [0,1]
/// pixel scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_size: (usize, usize),
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
    pub kernel: ResizeKernel,
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::Config("input_size: must be positive".into()));
        }
        if self.channel_stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("channel_stds: must be strictly positive".into()));
        }
        Ok(())
    }
}

/// Resamples one `h×w` plane to `oh×ow` with half-pixel centres.
fn resize_plane(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize), kernel: ResizeKernel, dst: &mut [f64]) {
    let coord = |o: usize, out: usize, inp: usize| -> f64 {
        ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64)
    };
    for oy in 0..oh {
        let sy = coord(oy, oh, h);
        for ox in 0..ow {
            let sx = coord(ox, ow, w);
            dst[oy * ow + ox] = match kernel {
                ResizeKernel::Nearest => src[(sy.round() as usize) * w + sx.round() as usize],
                ResizeKernel::Bilinear => {
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    top * (1.0 - fy) + bottom * fy
                }
            };
        }
    }
}

/// Resizes every image to the target size, then maps each channel to
/// `(x/255 - mean) / std`. Output is `[N,3,H,W]`.
pub fn preprocess(images: &Dataset, spec: &PreprocessSpec) -> Result<Tensor<f32>> {
    if images.channels != 3 {
        return Err(shape_err!("preprocess expects 3 channels, got {}", images.channels));
    }
    spec.validate()?;
    let (h, w) = (images.height, images.width);
    let (oh, ow) = spec.target_size;
    let mut out = Vec::with_capacity(images.len() * 3 * oh * ow);
    let mut src = vec![0.0; h * w];
    let mut dst = vec![0.0; oh * ow];
    for i in 0..images.len() {
        for (ch, plane) in images.image(i).chunks(h * w).enumerate() {
            for (s, &p) in src.iter_mut().zip(plane) {
                *s = p as f64;
            }
            if (h, w) == (oh, ow) {
                dst.copy_from_slice(&src);
            } else {
                resize_plane(&src, (h, w), (oh, ow), spec.kernel, &mut dst);
            }
            let (mean, std) = (spec.channel_means[ch], spec.channel_stds[ch]);
            out.extend(dst.iter().map(|&v| ((v / 255.0 - mean) / std) as f32));
        }
    }
    Tensor::new(vec![images.len(), 3, oh, ow], out)
}

/// Per-channel mean and population std of a dataset on the [0,1] scale.
pub fn channel_stats(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let plane = ds.height * ds.width;
    let mut sum = vec![0.0; ds.channels];
    let mut sq = vec![0.0; ds.channels];
    for i in 0..ds.len() {
        for (ch, p) in ds.image(i).chunks(plane).enumerate() {
            for &v in p {
                let v = v as f64 / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (ds.len() * plane) as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stds = sq
        .iter()
        .zip(&means)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    (means, stds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use proptest::prelude::*;

    fn identity_spec(size: (usize, usize)) -> PreprocessSpec {
        PreprocessSpec {
            target_size: size,
            channel_means: [0.0; 3],
            channel_stds: [1.0; 3],
            kernel: ResizeKernel::Bilinear,
        }
    }

    #[test]
    fn identity_spec_scales_pixels() {
        let ds = generate_synthetic(2, 2, (3, 5, 4), 0).unwrap();
        let out = preprocess(&ds, &identity_spec((5, 4))).unwrap();
        for (o, &p) in out.data().iter().zip(&ds.pixels) {
            assert_eq!(*o, (p as f64 / 255.0) as f32);
        }
    }

    #[test]
    fn mean_image_centres_to_zero() {
        let means = [0.2, 0.4, 0.6];
        let pixels: Vec<u8> = means
            .iter()
            .flat_map(|m| std::iter::repeat_n((m * 255.0) as u8, 4))
            .collect();
        let ds = Dataset::new((3, 2, 2), pixels, vec![0], 1).unwrap();
        let spec = PreprocessSpec {
            channel_means: [51.0 / 255.0, 102.0 / 255.0, 153.0 / 255.0],
            channel_stds: [0.3; 3],
            ..identity_spec((2, 2))
        };
        let out = preprocess(&ds, &spec).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn bilinear_upsample_hand_values() {
        // corners a=0, b=100 / c=200, d=60 on every channel
        let plane = [0u8, 100, 200, 60];
        let pixels: Vec<u8> = plane.iter().cycle().take(12).copied().collect();
        let ds = Dataset::new((3, 2, 2), pixels, vec![0], 1).unwrap();
        let out = preprocess(&ds, &identity_spec((4, 4))).unwrap();
        // source coordinates per output index: 0, 0.25, 0.75, 1
        let t = [0.0, 0.25, 0.75, 1.0];
        let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
        for oy in 0..4 {
            for ox in 0..4 {
                let top = lerp(0.0, 100.0, t[ox]);
                let bottom = lerp(200.0, 60.0, t[ox]);
                let expected = lerp(top, bottom, t[oy]) / 255.0;
                let got = out.data()[oy * 4 + ox] as f64;
                assert!((got - expected).abs() < 1e-6, "({oy},{ox}) {got} vs {expected}");
            }
        }
    }

    #[test]
    fn rejects_non_rgb() {
        let ds = Dataset::new((1, 2, 2), vec![0; 4], vec![0], 1).unwrap();
        assert!(matches!(preprocess(&ds, &identity_spec((2, 2))), Err(Error::Shape(_))));
    }

    #[test]
    fn own_statistics_standardize() {
        let ds = generate_synthetic(4, 10, (3, 16, 16), 3).unwrap();
        let (means, stds) = channel_stats(&ds);
        let spec = PreprocessSpec {
            target_size: (16, 16),
            channel_means: [means[0], means[1], means[2]],
            channel_stds: [stds[0], stds[1], stds[2]],
            kernel: ResizeKernel::Bilinear,
        };
        let out = preprocess(&ds, &spec).unwrap();
        let plane = 256;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..ds.len())
                .flat_map(|i| {
                    let start = (i * 3 + ch) * plane;
                    out.data()[start..start + plane].iter().map(|&v| v as f64)
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((s - 1.0).abs() < 1e-2, "std {s}");
        }
    }

    proptest! {
        #[test]
        fn unstandardize_recovers_resized(seed in 0u64..1000, oh in 2usize..9, ow in 2usize..9) {
            let ds = generate_synthetic(2, 1, (3, 5, 6), seed).unwrap();
            let means = [0.49, 0.48, 0.45];
            let stds = [0.25, 0.24, 0.26];
            let spec = PreprocessSpec { target_size: (oh, ow), channel_means: means, channel_stds: stds, kernel: ResizeKernel::Bilinear };
            let out = preprocess(&ds, &spec).unwrap();
            let raw = preprocess(&ds, &PreprocessSpec { channel_means: [0.0; 3], channel_stds: [1.0; 3], ..spec.clone() }).unwrap();
            let plane = oh * ow;
            for (i, (&o, &r)) in out.data().iter().zip(raw.data()).enumerate() {
                let ch = (i / plane) % 3;
                let back = o as f64 * stds[ch] + means[ch];
                prop_assert!((back - r as f64).abs() < 1e-5);
            }
        }
    }
}
