//! Reverse-mode gradient tape.
//!
//! Each op evaluates eagerly and appends a node holding its output plus what
//! its backward rule needs. [`Tape::backward`] walks the nodes once, newest
//! first.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::kernels::{self, BnSaved};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded op, as seen in the op trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    MaxPool2,
    Upsample2,
    Concat,
    Sigmoid,
    Add,
    Scale,
    Sum,
    DiceLoss,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Relu => "relu",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Concat => "concat",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::DiceLoss => "dice_loss",
        };
        f.write_str(s)
    }
}

/// Whether batch norm uses batch statistics (and updates the running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    /// Weight kept on the old running value per update.
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.99,
        }
    }
}

/// Running statistics of one batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[T], batch_var: &[T], momentum: T) {
        let keep = momentum;
        let take = T::one() - momentum;
        for ((m, v), (&bm, &bv)) in self
            .mean
            .iter_mut()
            .zip(self.var.iter_mut())
            .zip(batch_mean.iter().zip(batch_var))
        {
            *m = keep * *m + take * bm;
            *v = keep * *v + take * bv;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    BnInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Dice {
        p: Var,
        truth: Tensor<T>,
        smooth: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BnTrain { .. } | Op::BnInfer { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dice { .. } => OpKind::DiceLoss,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed ops.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    conv_grad_fault: Option<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            conv_grad_fault: None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Kinds of all recorded ops in execution order.
    pub fn trace(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records parameter `index` once; later calls return the same leaf so a
    /// shared parameter accumulates gradient from every use.
    pub fn param(&mut self, index: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&index) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.params.insert(index, v);
        v
    }

    pub fn param_var(&self, index: usize) -> Option<Var> {
        self.params.get(&index).copied()
    }

    /// Scales the weight gradient of every convolution; a negative control
    /// for gradient checking.
    #[doc(hidden)]
    pub fn inject_conv_grad_fault(&mut self, scale: T) {
        self.conv_grad_fault = Some(scale);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning<T>,
        cfg: BnConfig,
        mode: Mode,
    ) -> Result<Var> {
        let channels = self.shape(x).channels;
        if running.channels() != channels {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input has {channels} channels, running statistics have {}",
                    running.channels()
                ),
            ));
        }
        let eps = T::from_f64_lossy(cfg.eps);
        match mode {
            Mode::Train => {
                let (y, saved) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                running.update(&saved.mean, &saved.var, T::from_f64_lossy(cfg.momentum));
                Ok(self.push(y, Op::BnTrain { x, gamma, beta, saved }))
            }
            Mode::Infer => {
                let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let y = kernels::batch_norm_infer(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &running.mean,
                    &inv_std,
                )?;
                let mean = running.mean.clone();
                Ok(self.push(
                    y,
                    Op::BnInfer {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = kernels::upsample2(self.value(x));
        self.push(y, Op::Upsample2 { x })
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale { x, s })
    }

    /// Sum of several same-shaped values.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::shape("sum", "no inputs"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Scalar sum of every element.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// Scalar soft Dice loss of probabilities `p` against a fixed binary mask.
    pub fn dice_loss(&mut self, p: Var, truth: &Tensor<T>, smooth: T) -> Result<Var> {
        let l = kernels::soft_dice(self.value(p), truth, smooth)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::Dice {
                p,
                truth: truth.clone(),
                smooth,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut visited = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b } => {
                    let g = kernels::conv2d_backward(self.value(*x), self.value(*w), self.value(*b), &gy)?;
                    let gw = match self.conv_grad_fault {
                        Some(s) => g.w.scale(s),
                        None => g.w,
                    };
                    acc(*x, g.x);
                    acc(*w, gw);
                    acc(*b, g.b);
                }
                Op::BnTrain { gamma, beta, x, saved } => {
                    let (gx, gg, gb) = kernels::batch_norm_train_backward(saved, self.value(*gamma), &gy);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::BnInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (gx, gg, gb) =
                        kernels::batch_norm_infer_backward(self.value(*x), self.value(*gamma), mean, inv_std, &gy);
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
                Op::Relu { x } => acc(*x, kernels::relu_backward(self.value(*x), &gy)),
                Op::Sigmoid { x } => acc(*x, kernels::sigmoid_backward(&node.value, &gy)),
                Op::MaxPool2 { x, argmax } => acc(*x, kernels::maxpool2_backward(self.shape(*x), argmax, &gy)),
                Op::Upsample2 { x } => acc(*x, kernels::upsample2_backward(self.shape(*x), &gy)),
                Op::Concat { xs } => {
                    let parts: Vec<Shape> = xs.iter().map(|&v| self.shape(v)).collect();
                    for (v, g) in xs.iter().zip(kernels::split_channels(&gy, &parts)) {
                        acc(*v, g);
                    }
                }
                Op::Add { a, b } => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Scale { x, s } => acc(*x, gy.scale(*s)),
                Op::Sum { x } => acc(*x, Tensor::full(self.shape(*x), gy.item())),
                Op::Dice { p, truth, smooth } => {
                    let g = kernels::soft_dice_backward(self.value(*p), truth, *smooth, gy.item())?;
                    acc(*p, g);
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Gradients of recorded parameters, keyed by parameter index.
    pub fn param_grads(&self, grads: &Gradients<T>) -> HashMap<usize, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(&i, &v)| grads.get(v).map(|g| (i, g.clone())))
            .collect()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (or `None` if the loss does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_visits_each_op_once_in_reverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let a = tape.relu(x);
        let b = tape.scale(a, 2.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sigmoid(c);
        let l = tape
            .dice_loss(s, &Tensor::full(Shape::new(1, 1, 2, 2), 1.0), 1.0)
            .unwrap();
        let g = tape.backward(l).unwrap();
        let v = g.visited();
        assert_eq!(v.len(), 5);
        assert!(v.windows(2).all(|w| w[0] > w[1]));
        assert!(g.get(x).is_some());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = Tensor::full(Shape::vector(1), 3.0);
        let a = tape.param(0, &w);
        let b = tape.param(0, &w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn train_bn_updates_running_stats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(2, 1, 2, 2), |[n, _, y, x]| {
            (n * 4 + y * 2 + x) as f64
        }));
        let g = tape.leaf(Tensor::full(Shape::vector(1), 1.0));
        let b = tape.leaf(Tensor::full(Shape::vector(1), 0.0));
        let mut run = BnRunning::new(1);
        tape.batch_norm(x, g, b, &mut run, BnConfig::default(), Mode::Train)
            .unwrap();
        assert!((run.mean[0] - 0.01 * 3.5).abs() < 1e-12);
        assert!((run.var[0] - (0.99 + 0.01 * 5.25)).abs() < 1e-12);
    }
}
