//! Raw slice kernels behind the tape ops. Shapes are validated by the caller.

use super::Real;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent of a strided, zero-padded window, or `None` when the
/// window does not fit.
pub(crate) fn conv_out_dim(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, c_in, h, w] = *input else {
            return Err(shape_err!("conv2d input must be rank 4, got {input:?}"));
        };
        let [c_out, wc_in, kh, kw] = *weight else {
            return Err(shape_err!("conv2d weight must be rank 4, got {weight:?}"));
        };
        if wc_in != c_in {
            return Err(shape_err!(
                "conv2d weight expects {wc_in} input channels, input has {c_in}"
            ));
        }
        if kh != kw || kh == 0 {
            return Err(shape_err!("conv2d kernel must be square and non-empty, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be >= 1"));
        }
        let (Some(h_out), Some(w_out)) = (
            conv_out_dim(h, kh, stride, padding),
            conv_out_dim(w, kw, stride, padding),
        ) else {
            return Err(shape_err!(
                "conv2d k={kh} stride={stride} padding={padding} has no output on {h}x{w}"
            ));
        };
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }

    /// Source coordinate of output position `o` under kernel offset `kk`.
    #[inline]
    fn src(&self, o: usize, kk: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Unfolds one sample `[C,H,W]` into columns `[C·k·k, H'·W']`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw_out = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let src_y = g.src(oy, ki, g.h);
                    for ox in 0..g.w_out {
                        dst[oy * g.w_out + ox] = match (src_y, g.src(ox, kj, g.w)) {
                            (Some(y), Some(x_)) => x[(c * g.h + y) * g.w + x_],
                            _ => T::ZERO,
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back into one sample, accumulating overlaps.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw_out = g.out_pixels();
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let Some(y) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.w_out {
                        if let Some(x_) = g.src(ox, kj, g.w) {
                            dx[(c * g.h + y) * g.w + x_] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let (pl, hw) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::ZERO; pl * hw];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let y = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        for (co, row) in y.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(g.c_out, pl, hw, weight, (pl, 1), &cols, (hw, 1), T::ONE, y, (hw, 1));
    }
}

/// Accumulates into whichever of `dx`, `dw`, `db` are requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (pl, hw) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![T::ZERO; pl * hw];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dy_b.chunks(hw).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            // dW[Cout, CKK] += dy_b[Cout, HW] · colsᵀ
            T::gemm(g.c_out, hw, pl, dy_b, (hw, 1), &cols, (1, hw), T::ONE, dw, (pl, 1));
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[CKK, HW] = Wᵀ · dy_b
            T::gemm(
                pl,
                g.c_out,
                hw,
                weight,
                (1, pl),
                dy_b,
                (hw, 1),
                T::ZERO,
                &mut cols,
                (hw, 1),
            );
            col2im(g, &cols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
}

/// `out[B,O] = x[B,F] · Wᵀ + b`.
pub(crate) fn linear_forward<T: Real>(
    batch: usize,
    fin: usize,
    fout: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    for row in out.chunks_mut(fout) {
        row.copy_from_slice(bias);
    }
    T::gemm(batch, fin, fout, x, (fin, 1), weight, (1, fin), T::ONE, out, (fout, 1));
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Real>(
    batch: usize,
    fin: usize,
    fout: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        T::gemm(batch, fout, fin, dy, (fout, 1), weight, (fin, 1), T::ONE, dx, (fin, 1));
    }
    if let Some(dw) = dw {
        T::gemm(fout, batch, fin, dy, (1, fout), x, (fin, 1), T::ONE, dw, (fin, 1));
    }
    if let Some(db) = db {
        for row in dy.chunks(fout) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
    }
}

/// Row-wise log-softmax over `[rows, k]`, shifting by the row max and
/// summing exponentials in `f64`.
pub(crate) fn log_softmax_rows<T: Real>(x: &[T], k: usize, out: &mut [T]) {
    for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = T::from_f64(v.to_f64() - lse);
        }
    }
}

/// Mean over the spatial extent of each `[B·C]` plane, accumulated in `f64`.
pub(crate) fn global_avg_pool<T: Real>(x: &[T], plane: usize, out: &mut [T]) {
    for (dst, src) in out.iter_mut().zip(x.chunks(plane)) {
        let sum: f64 = src.iter().map(|v| v.to_f64()).sum();
        *dst = T::from_f64(sum / plane as f64);
    }
}
