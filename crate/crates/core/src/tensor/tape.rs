use super::ops;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: Var,
        mask: Vec<bool>,
    },
    Sigmoid {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Bce {
        pred: Var,
        target: Tensor<T>,
        eps: f64,
    },
    SoftDice {
        pred: Var,
        target: Tensor<T>,
    },
    Ln {
        input: Var,
    },
    Affine {
        input: Var,
        scale: T,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    SumSquares {
        inputs: Vec<Var>,
        scale: T,
    },
    Sum {
        input: Var,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Piecewise-linear branch choices made during one forward pass: the
/// active set of every ReLU and the selected site of every max-pool window,
/// in execution order.
///
/// Replaying a record evaluates the network on the same linear piece, which
/// is what a finite-difference check of the analytic gradient needs when a
/// perturbation would otherwise cross a kink.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchRecord {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

impl BranchRecord {
    pub fn relu_count(&self) -> usize {
        self.relu.len()
    }

    pub fn pool_count(&self) -> usize {
        self.pool.len()
    }
}

#[derive(Debug, Default)]
struct Replay {
    record: BranchRecord,
    relu_cursor: usize,
    pool_cursor: usize,
}

/// Ordered record of executed operations. `backward` replays the adjoints
/// once each, newest first.
#[derive(Debug)]
pub struct GradTape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    replay: Option<Replay>,
}

impl<T: Real> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            replay: None,
        }
    }

    /// A tape whose ReLU and max-pool nodes reuse the decisions in `record`
    /// instead of deciding from their inputs.
    pub fn replaying(record: BranchRecord) -> Self {
        Self {
            nodes: Vec::new(),
            replay: Some(Replay {
                record,
                ..Replay::default()
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Branch decisions taken so far on this tape.
    pub fn branch_record(&self) -> BranchRecord {
        let mut rec = BranchRecord::default();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { mask, .. } => rec.relu.push(mask.clone()),
                Op::MaxPool { argmax, .. } => rec.pool.push(argmax.clone()),
                _ => {}
            }
        }
        rec
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &deps,
        )
    }

    /// Batch normalization. In train mode also returns the batch mean and
    /// biased batch variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        epsilon: f64,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let x = self.value(input);
        let (g, b) = (self.value(gamma), self.value(beta));
        let train = running.is_none();
        let out = match running {
            None => ops::batch_norm_train(x, g, b, epsilon)?,
            Some((m, v)) => ops::batch_norm_eval(x, g, b, m, v, epsilon)?,
        };
        let stats = train.then(|| (out.batch_mean, out.batch_var));
        let var = self.push(
            out.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized: out.normalized,
                inv_std: out.inv_std,
                train,
            },
            &[input, gamma, beta],
        )?;
        Ok((var, stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let mask: Vec<bool> = match self.replay.as_mut() {
            Some(r) => {
                let m = r.record.relu.get(r.relu_cursor).cloned().ok_or_else(|| {
                    Error::Usage("branch record has fewer ReLU nodes than the replay".into())
                })?;
                r.relu_cursor += 1;
                if m.len() != x.len() {
                    return Err(Error::dim("relu replay", "mask length differs"));
                }
                m
            }
            None => x.data().iter().map(|&v| v > T::zero()).collect(),
        };
        let data = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &on)| if on { v } else { T::zero() })
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Relu { input, mask }, &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = ops::sigmoid(self.value(input));
        self.push(out, Op::Sigmoid { input }, &[input])
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (mut out, mut argmax) = ops::max_pool2d(self.value(input), window, stride)?;
        if let Some(r) = self.replay.as_mut() {
            let rec = r.record.pool.get(r.pool_cursor).cloned().ok_or_else(|| {
                Error::Usage("branch record has fewer pooling nodes than the replay".into())
            })?;
            r.pool_cursor += 1;
            if rec.len() != argmax.len() {
                return Err(Error::dim("max_pool replay", "index count differs"));
            }
            let x = &self.nodes[input.0].value;
            for (o, &i) in out.data_mut().iter_mut().zip(&rec) {
                *o = x.data()[i];
            }
            argmax = rec;
        }
        self.push(out, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(input), factor)?;
        self.push(out, Op::Upsample { input, factor }, &[input])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&vals)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    /// Scalar mean binary cross-entropy against a constant target.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let v = ops::bce(self.value(pred), target, eps)?;
        self.push(
            Tensor::scalar(v),
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
            },
            &[pred],
        )
    }

    /// Scalar soft Dice coefficient against a constant target.
    pub fn soft_dice(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let v = ops::soft_dice(self.value(pred), target)?;
        self.push(
            Tensor::scalar(v),
            Op::SoftDice {
                pred,
                target: target.clone(),
            },
            &[pred],
        )
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Numerical("logarithm of a non-positive value".into()));
        }
        let out = x.map(|v| v.ln());
        self.push(out, Op::Ln { input }, &[input])
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(input).map(|v| scale * v + shift);
        self.push(
            out,
            Op::Affine {
                input,
                scale,
            },
            &[input],
        )
    }

    /// `sum_k weight_k * term_k` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            acc += w * self
                .value(v)
                .item()
                .ok_or_else(|| Error::Usage("weighted_sum expects scalar terms".into()))?;
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            &deps,
        )
    }

    /// `scale * sum of squares` over every element of every input.
    pub fn sum_squares(&mut self, inputs: &[Var], scale: T) -> Result<Var> {
        let mut acc = T::zero();
        for &v in inputs {
            acc += self.value(v).data().iter().map(|&x| x * x).sum::<T>();
        }
        self.push(
            Tensor::scalar(scale * acc),
            Op::SumSquares {
                inputs: inputs.to_vec(),
                scale,
            },
            inputs,
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss variable is not on this tape".into()))?;
        if lv.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *stride,
                    *padding,
                    self.wants(*input),
                )?;
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    accumulate(&mut grads[weight.0], dw);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let (dx, dg, db) =
                    ops::batch_norm_backward(g, normalized, inv_std, val(*gamma), *train)?;
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], db);
                }
            }
            Op::Relu { input, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&d, &on)| if on { d } else { T::zero() })
                    .collect();
                accumulate(&mut grads[input.0], Tensor::new(g.shape(), data)?);
            }
            Op::Sigmoid { input } => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                accumulate(&mut grads[input.0], Tensor::new(g.shape(), data)?);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                for (&i, &d) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] += d;
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::Upsample { input, factor } => {
                let dx = ops::upsample_bilinear_backward(g, val(*input).shape(), *factor)?;
                accumulate(&mut grads[input.0], dx);
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for v in inputs {
                    let c = val(*v).shape()[1];
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], g.channel_slice(start, start + c)?);
                    }
                    start += c;
                }
            }
            Op::Bce { pred, target, eps } => {
                let s = g.data()[0];
                let d = ops::bce_grad(val(*pred), target, *eps).map(|v| v * s);
                accumulate(&mut grads[pred.0], d);
            }
            Op::SoftDice { pred, target } => {
                let s = g.data()[0];
                let d = ops::soft_dice_grad(val(*pred), target).map(|v| v * s);
                accumulate(&mut grads[pred.0], d);
            }
            Op::Ln { input } => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(*input).data())
                    .map(|(&d, &x)| d / x)
                    .collect();
                accumulate(&mut grads[input.0], Tensor::new(g.shape(), data)?);
            }
            Op::Affine { input, scale, .. } => {
                accumulate(&mut grads[input.0], g.map(|d| d * *scale));
            }
            Op::WeightedSum { terms } => {
                let s = g.data()[0];
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], Tensor::scalar(s * w));
                    }
                }
            }
            Op::SumSquares { inputs, scale } => {
                let k = T::of(2.0) * *scale * g.data()[0];
                for &v in inputs {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], val(v).map(|x| k * x));
                    }
                }
            }
            Op::Sum { input } => {
                accumulate(
                    &mut grads[input.0],
                    Tensor::full(val(*input).shape(), g.data()[0]),
                );
            }
        }
        Ok(())
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::MaxPool { .. } => "max_pool2d",
        Op::Upsample { .. } => "upsample_bilinear",
        Op::Concat { .. } => "concat_channels",
        Op::Bce { .. } => "bce",
        Op::SoftDice { .. } => "soft_dice",
        Op::Ln { .. } => "ln",
        Op::Affine { .. } => "affine",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::SumSquares { .. } => "sum_squares",
        Op::Sum { .. } => "sum",
    }
}
