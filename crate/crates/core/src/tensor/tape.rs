use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation. Inputs always precede the output
/// on the tape, so the node order is a topological order.
#[derive(Clone, Debug)]
enum Op<T> {
    /// Leaf value, or an op none of whose inputs required a gradient.
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Silu(Var),
    Relu(Var),
    GlobalAvgPool(Var),
    LogSoftmax(Var),
    NllLoss {
        input: Var,
        targets: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays them in reverse.
///
/// A tape belongs to a single worker; build a fresh one per step.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    #[cfg(test)]
    pub(crate) corrupt_silu: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            #[cfg(test)]
            corrupt_silu: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that collects a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never collects a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if input == weight || input == bias || weight == bias {
            return Err(contract_err!("conv2d operands must be distinct tensors"));
        }
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        if b.shape() != [geom.c_out] {
            return Err(shape_err!("conv2d bias must be [{}], got {:?}", geom.c_out, b.shape()));
        }
        let mut out = vec![T::ZERO; geom.batch * geom.out_len()];
        kernels::conv2d_forward(&geom, x.data(), w.data(), b.data(), &mut out);
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            &[input, weight, bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        if input == weight || input == bias || weight == bias {
            return Err(contract_err!("linear operands must be distinct tensors"));
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (&[batch, fin], &[fout, wfin]) = (x.shape(), w.shape()) else {
            return Err(shape_err!(
                "linear expects [B,F] input and [O,F] weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ));
        };
        if fin != wfin {
            return Err(shape_err!("linear input has {fin} features, weight expects {wfin}"));
        }
        if b.shape() != [fout] {
            return Err(shape_err!("linear bias must be [{fout}], got {:?}", b.shape()));
        }
        let mut out = vec![T::ZERO; batch * fout];
        kernels::linear_forward(batch, fin, fout, x.data(), w.data(), b.data(), &mut out);
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(value, &[input, weight, bias], Op::Linear { input, weight, bias }))
    }

    fn map(&mut self, input: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(input);
        Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn silu(&mut self, input: Var) -> Var {
        let value = self.map(input, |v| v * v.sigmoid());
        self.push(value, &[input], Op::Silu(input))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.map(input, |v| if v > T::ZERO { v } else { T::ZERO });
        self.push(value, &[input], Op::Relu(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.map(input, |v| v * factor);
        self.push(value, &[input], Op::Scale(input, factor))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[batch, channels, h, w] = x.shape() else {
            return Err(shape_err!("global_avg_pool expects [B,C,H,W], got {:?}", x.shape()));
        };
        let mut out = vec![T::ZERO; batch * channels];
        kernels::global_avg_pool(x.data(), h * w, &mut out);
        let value = Tensor::new(vec![batch, channels], out)?;
        Ok(self.push(value, &[input], Op::GlobalAvgPool(input)))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[_, k] = x.shape() else {
            return Err(shape_err!("log_softmax expects [B,K], got {:?}", x.shape()));
        };
        let mut out = vec![T::ZERO; x.len()];
        kernels::log_softmax_rows(x.data(), k, &mut out);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, &[input], Op::LogSoftmax(input)))
    }

    /// Mean negative log-likelihood of the target classes.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        let &[batch, k] = lp.shape() else {
            return Err(shape_err!("nll_loss expects [B,K], got {:?}", lp.shape()));
        };
        if targets.len() != batch {
            return Err(shape_err!("nll_loss got {} targets for batch {batch}", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Label(format!("target {bad} outside [0,{k})")));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(b, &t)| -lp.data()[b * k + t].to_f64())
            .sum();
        let value = Tensor::scalar(T::from_f64(total / batch as f64));
        Ok(self.push(
            value,
            &[log_probs],
            Op::NllLoss {
                input: log_probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Concatenates `[B,f_i]` tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(contract_err!("concat needs at least one input"));
        };
        let batch = self.value(first).shape()[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            match *self.value(v).shape() {
                [b, f] if b == batch => widths.push(f),
                ref s => {
                    return Err(shape_err!("concat expects [{batch},f] inputs, got {s:?}"));
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for (&v, &f) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[b * f..(b + 1) * f]);
            }
        }
        let value = Tensor::new(vec![batch, total], out)?;
        Ok(self.push(value, inputs, Op::Concat(inputs.to_vec())))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(total)), &[input], Op::Sum(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x + y)?;
        Ok(self.push(value, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x * y)?;
        Ok(self.push(value, &[a, b], Op::Mul(a, b)))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("element-wise op on {:?} and {:?}", x.shape(), y.shape()));
        }
        Ok(Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        })
    }

    /// Grad buffer of `v` if it takes part in differentiation.
    fn take_buf(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &self.nodes[v.0];
        node.requires_grad.then(|| {
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; node.value.len()])
        })
    }

    fn put_buf(&mut self, v: Var, buf: Option<Vec<T>>) {
        if buf.is_some() {
            self.grads[v.0] = buf;
        }
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&Tensor<T>, &mut [T])) {
        if let Some(mut buf) = self.take_buf(v) {
            f(&self.nodes[v.0].value, &mut buf);
            self.grads[v.0] = Some(buf);
        }
    }

    /// Populates gradients of every `requires_grad` value reachable from
    /// `loss`. Gradients add up across repeated uses and repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut seed = self.take_buf(loss).expect("loss requires grad");
        seed[0] += T::ONE;
        self.grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let mut dx = self.take_buf(input);
                let mut dw = self.take_buf(weight);
                let mut db = self.take_buf(bias);
                kernels::conv2d_backward(
                    &geom,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put_buf(input, dx);
                self.put_buf(weight, dw);
                self.put_buf(bias, db);
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let (batch, fin) = (x.shape()[0], x.shape()[1]);
                let fout = self.nodes[weight.0].value.shape()[0];
                let mut dx = self.take_buf(input);
                let mut dw = self.take_buf(weight);
                let mut db = self.take_buf(bias);
                kernels::linear_backward(
                    batch,
                    fin,
                    fout,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.put_buf(input, dx);
                self.put_buf(weight, dw);
                self.put_buf(bias, db);
            }
            Op::Silu(input) => {
                #[cfg(test)]
                let skew = if self.corrupt_silu { T::from_f64(1.1) } else { T::ONE };
                #[cfg(not(test))]
                let skew = T::ONE;
                self.accumulate(input, |x, dx| {
                    for ((d, &v), &g) in dx.iter_mut().zip(x.data()).zip(dy) {
                        let s = v.sigmoid();
                        *d += g * s * (T::ONE + v * (T::ONE - s)) * skew;
                    }
                });
            }
            Op::Relu(input) => self.accumulate(input, |x, dx| {
                for ((d, &v), &g) in dx.iter_mut().zip(x.data()).zip(dy) {
                    if v > T::ZERO {
                        *d += g;
                    }
                }
            }),
            Op::Scale(input, factor) => self.accumulate(input, |_, dx| {
                for (d, &g) in dx.iter_mut().zip(dy) {
                    *d += g * factor;
                }
            }),
            Op::GlobalAvgPool(input) => self.accumulate(input, |x, dx| {
                let s = x.shape();
                let plane = s[2] * s[3];
                let inv = T::from_f64(1.0 / plane as f64);
                for (chunk, &g) in dx.chunks_mut(plane).zip(dy) {
                    for d in chunk {
                        *d += g * inv;
                    }
                }
            }),
            Op::LogSoftmax(input) => {
                let out = self.nodes[i].value.clone();
                let k = out.shape()[1];
                self.accumulate(input, |_, dx| {
                    for ((drow, orow), grow) in dx.chunks_mut(k).zip(out.data().chunks(k)).zip(dy.chunks(k)) {
                        let gsum: f64 = grow.iter().map(|g| g.to_f64()).sum();
                        for ((d, &o), &g) in drow.iter_mut().zip(orow).zip(grow) {
                            *d += g - T::from_f64(o.to_f64().exp() * gsum);
                        }
                    }
                });
            }
            Op::NllLoss { input, targets } => {
                let k = self.nodes[input.0].value.shape()[1];
                let scale = dy[0] / T::from_f64(targets.len() as f64);
                self.accumulate(input, |_, dx| {
                    for (b, &t) in targets.iter().enumerate() {
                        dx[b * k + t] += -scale;
                    }
                });
            }
            Op::Concat(inputs) => {
                let batch = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for v in inputs {
                    let f = self.nodes[v.0].value.shape()[1];
                    self.accumulate(v, |_, dx| {
                        for b in 0..batch {
                            let src = &dy[b * total + offset..b * total + offset + f];
                            for (d, &g) in dx[b * f..(b + 1) * f].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    });
                    offset += f;
                }
            }
            Op::Sum(input) => self.accumulate(input, |_, dx| {
                for d in dx {
                    *d += dy[0];
                }
            }),
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(v, |_, dx| {
                        for (d, &g) in dx.iter_mut().zip(dy) {
                            *d += g;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                self.accumulate(a, |_, dx| {
                    for ((d, &o), &g) in dx.iter_mut().zip(vb.data()).zip(dy) {
                        *d += g * o;
                    }
                });
                self.accumulate(b, |_, dx| {
                    for ((d, &o), &g) in dx.iter_mut().zip(va.data()).zip(dy) {
                        *d += g * o;
                    }
                });
            }
        }
    }
}
