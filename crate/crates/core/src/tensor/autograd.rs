//! Reverse-mode differentiation over a linear tape of recorded kernel calls.

use super::ops::{self, BatchStats};
use super::{shape_err, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        inv_std: Tensor<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Scale {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum {
        x: Var,
    },
}

struct Entry<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations as they execute; [`Tape::backward`] replays them in reverse.
pub struct Tape<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` for values that do not depend on any parameter.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// Batch norm normalised by the statistics of the current batch.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>), TensorError> {
        let (out, stats) = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: stats.mean.clone(),
            inv_std: stats.inv_std.clone(),
            batch_stats: true,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var, TensorError> {
        let out = ops::batchnorm(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let inv_std = var.map(|v| T::one() / (v + eps).sqrt());
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            inv_std,
            batch_stats: false,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// `s * x` for a single-element `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale", "a single-element scale", sv.shape()));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| k * v);
        Ok(self.push(out, Op::Scale { x, s }, &[x, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("matching shapes, left is {:?}", va.shape()), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let out = ops::avgpool2d(self.value(x), kernel, stride, padding)?;
        Ok(self.push(
            out,
            Op::AvgPool {
                x,
                kernel,
                stride,
                padding,
            },
            &[x],
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (out, argmax) = ops::maxpool2d(self.value(x), kernel, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// `(n, ...)` → `(n, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let n = *v.shape().first().ok_or_else(|| shape_err("flatten", "a batched tensor", v.shape()))?;
        let rest = v.len().checked_div(n).unwrap_or(0);
        let out = v.clone().reshape(&[n, rest])?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let (loss, probs) = ops::softmax_xent(self.value(logits), labels)?;
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    /// Every piecewise decision taken so far: the sign of each ReLU input and
    /// each max-pool selection. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for e in &self.entries {
            match &e.op {
                Op::Relu { x } => sig.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Gradients of a single-element `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            if !entry.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::new();
            match &entry.op {
                Op::Leaf => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let cg = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *padding)?;
                    contribs.push((*x, cg.x));
                    contribs.push((*w, cg.weight));
                    if let Some(b) = b {
                        contribs.push((*b, cg.bias));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let bg = ops::batchnorm_backward(self.value(*x), self.value(*gamma), mean, inv_std, &g, *batch_stats)?;
                    contribs.push((*x, bg.x));
                    contribs.push((*gamma, bg.gamma));
                    contribs.push((*beta, bg.beta));
                }
                Op::Relu { x } => contribs.push((*x, ops::relu_backward(self.value(*x), &g))),
                Op::Scale { x, s } => {
                    let k = self.value(*s).data()[0];
                    let xv = self.value(*x);
                    let mut ds = T::zero();
                    for (&a, &b) in xv.data().iter().zip(g.data()) {
                        ds += a * b;
                    }
                    contribs.push((*s, Tensor::new(self.value(*s).shape().to_vec(), vec![ds])?));
                    contribs.push((*x, g.map(|v| k * v)));
                }
                Op::Add { a, b } => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::AvgPool {
                    x,
                    kernel,
                    stride,
                    padding,
                } => {
                    let gx = ops::avgpool2d_backward(self.value(*x).shape(), &g, *kernel, *stride, *padding)?;
                    contribs.push((*x, gx));
                }
                Op::MaxPool { x, argmax } => {
                    contribs.push((*x, ops::maxpool2d_backward(self.value(*x).shape(), argmax, &g)));
                }
                Op::Reshape { x } => contribs.push((*x, g.clone().reshape(self.value(*x).shape())?)),
                Op::Linear { x, w, b } => {
                    let lg = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    contribs.push((*x, lg.x));
                    contribs.push((*w, lg.weight));
                    if let Some(b) = b {
                        contribs.push((*b, lg.bias));
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    contribs.push((*logits, ops::softmax_xent_backward(probs, labels, g.data()[0])));
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    contribs.push((*x, Tensor::full(self.value(*x).shape(), gv)));
                }
            }
            grads[idx] = Some(g);
            for (v, c) in contribs {
                if !self.entries[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_relu_on_positive_input_has_unit_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.5, 1.0, 2.0, 3.0, 0.1, 9.0]).unwrap());
        let r = tape.relu(x);
        let l = tape.sum(r);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_of_identity_conv_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng));
        let w = tape.param(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let r = tape.relu(x);
        assert!(matches!(tape.backward(r), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2], 1.0));
        let s = tape.param(Tensor::scalar(3.0));
        let y = tape.scale(x, s).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get(s).unwrap().data(), &[2.0]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, -2.0]));
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
