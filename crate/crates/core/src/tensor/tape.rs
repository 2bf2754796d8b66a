use super::kernels::{self, BatchStats};
use super::{Result, Shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    LogSoftmaxChannels(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sum(Var),
    ConcatChannels(Var, Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    UpsampleNearest2(Var),
    NormalizeChannels {
        input: Var,
        norms: Vec<f64>,
    },
    /// Mean negative log-likelihood of the target channel over non-ignored pixels.
    Nll {
        log_probs: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    /// Mean absolute error over valid pixels.
    MaskedL1 {
        pred: Var,
        target: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
    /// Negative mean channel dot product over valid pixels.
    MaskedNegDot {
        pred: Var,
        target: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when some grad-enabled leaf feeds this node.
    needs_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and a reverse sweep is a valid topological replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every grad-enabled leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_shape(shape, g.clone()).expect("gradient matches value shape"),
            None => {
                let n = shape.numel();
                Tensor::from_shape(shape, vec![0.0; n]).expect("zero gradient")
            }
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn mask_count(valid: &[bool], op: &'static str) -> Result<usize> {
    match valid.iter().filter(|v| **v).count() {
        0 => Err(TensorError::invalid(op, "no valid pixels to average over")),
        n => Ok(n),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &Shape {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a value that gradients flow into (a parameter or a checked input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let op = Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        };
        Ok(self.push(out, op, &[input, weight, bias]))
    }

    /// Training-mode batch norm. Returns the batch statistics so the caller
    /// can fold them into its running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (out, stats) = kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized: out.normalized,
            inv_std: out.inv_std,
            training: true,
        };
        Ok((self.push(out.output, op, &[input, gamma, beta]), stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let out = kernels::batch_norm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            normalized: out.normalized,
            inv_std: out.inv_std,
            training: false,
        };
        Ok(self.push(out.output, op, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = kernels::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = kernels::log_softmax_channels(self.value(x))?;
        Ok(self.push(out, Op::LogSoftmaxChannels(x), &[x]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { input: x, argmax }, &[x]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2(self.value(x))?;
        Ok(self.push(out, Op::UpsampleNearest2(x), &[x]))
    }

    pub fn normalize_channels(&mut self, x: Var) -> Result<Var> {
        let (out, norms) = kernels::normalize_channels(self.value(x))?;
        Ok(self.push(out, Op::NormalizeChannels { input: x, norms }, &[x]))
    }

    /// Mean of `-log_probs[target]` over pixels whose target is `Some`.
    /// `targets` is indexed `(b, h, w)` row-major.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lp = self.value(log_probs);
        let (b, c, h, w) = lp.shape().dims4("nll_loss")?;
        let hw = h * w;
        if targets.len() != b * hw {
            return Err(TensorError::invalid(
                "nll_loss",
                format!("{} targets for log-probabilities {}", targets.len(), lp.shape()),
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(class) = *t {
                if class >= c {
                    return Err(TensorError::invalid(
                        "nll_loss",
                        format!("target class {class} out of range for {c} channels"),
                    ));
                }
                let (bi, p) = (i / hw, i % hw);
                total -= lp.data()[(bi * c + class) * hw + p];
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::invalid("nll_loss", "every pixel is ignored"));
        }
        let op = Op::Nll {
            log_probs,
            targets: targets.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(total / count as f64), op, &[log_probs]))
    }

    /// Mean `|pred - target|` over valid elements.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || valid.len() != p.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_l1",
                left: p.shape().clone(),
                right: target.shape().clone(),
            });
        }
        let count = mask_count(valid, "masked_l1")?;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(valid)
            .filter(|(_, v)| **v)
            .map(|((a, b), _)| (a - b).abs())
            .sum();
        let op = Op::MaskedL1 {
            pred,
            target: target.data().to_vec(),
            valid: valid.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(total / count as f64), op, &[pred]))
    }

    /// Negative mean over valid pixels of the channel-wise dot product
    /// between `pred` and `target` (both `[B, C, H, W]`); `valid` is per pixel.
    pub fn masked_neg_dot(&mut self, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        let (b, c, h, w) = p.shape().dims4("masked_neg_dot")?;
        let hw = h * w;
        if p.shape() != target.shape() || valid.len() != b * hw {
            return Err(TensorError::ShapeMismatch {
                op: "masked_neg_dot",
                left: p.shape().clone(),
                right: target.shape().clone(),
            });
        }
        let count = mask_count(valid, "masked_neg_dot")?;
        let mut total = 0.0;
        for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
            let (bi, px) = (i / hw, i % hw);
            for ci in 0..c {
                let k = (bi * c + ci) * hw + px;
                total += p.data()[k] * target.data()[k];
            }
        }
        let op = Op::MaskedNegDot {
            pred,
            target: target.data().to_vec(),
            valid: valid.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(-total / count as f64), op, &[pred]))
    }

    /// `sum_i weights[i] * inputs[i]` over one-element tensors.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: &[f64]) -> Result<Var> {
        if inputs.len() != weights.len() {
            return Err(TensorError::invalid(
                "weighted_sum",
                format!("{} inputs but {} weights", inputs.len(), weights.len()),
            ));
        }
        let mut total = 0.0;
        for (&v, &w) in inputs.iter().zip(weights) {
            let x = self.value(v).item().ok_or_else(|| {
                TensorError::invalid("weighted_sum", format!("input of shape {} is not a scalar", self.shape(v)))
            })?;
            total += w * x;
        }
        let op = Op::WeightedSum {
            inputs: inputs.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op, inputs))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn give(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *padding,
                    g,
                    self.wants(*input),
                )?;
                if let Some(dx) = cg.input {
                    self.give(grads, *input, &dx);
                }
                self.give(grads, *weight, &cg.weight);
                self.give(grads, *bias, &cg.bias);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
            } => {
                let bg = kernels::batch_norm_backward(
                    self.shape(*input),
                    self.value(*gamma).data(),
                    normalized,
                    inv_std,
                    g,
                    *training,
                );
                self.give(grads, *input, &bg.input);
                self.give(grads, *gamma, &bg.gamma);
                self.give(grads, *beta, &bg.beta);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(v, d)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.give(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = node.value.data().iter().zip(g).map(|(s, d)| d * s * (1.0 - s)).collect();
                self.give(grads, *x, &dx);
            }
            Op::LogSoftmaxChannels(x) => {
                let dx = kernels::log_softmax_channels_backward(&node.value, g);
                self.give(grads, *x, &dx);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().zip(vb).map(|(d, y)| d * y).collect();
                    self.give(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.iter().zip(va).map(|(d, x)| d * x).collect();
                    self.give(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.give(grads, *a, g);
                self.give(grads, *b, g);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.give(grads, *x, &dx);
            }
            Op::ConcatChannels(a, b) => {
                let (batch, ca, h, w) = self.shape(*a).dims4("concat_channels")?;
                let cb = self.shape(*b).dims()[1];
                let (ga, gb) = kernels::split_channels(g, batch, ca * h * w, cb * h * w);
                self.give(grads, *a, &ga);
                self.give(grads, *b, &gb);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (d, &src) in g.iter().zip(argmax) {
                    dx[src] += d;
                }
                self.give(grads, *input, &dx);
            }
            Op::UpsampleNearest2(x) => {
                let dx = kernels::upsample_nearest2_backward(self.shape(*x), g);
                self.give(grads, *x, &dx);
            }
            Op::NormalizeChannels { input, norms } => {
                let dx = kernels::normalize_channels_backward(&node.value, norms, g);
                self.give(grads, *input, &dx);
            }
            Op::Nll {
                log_probs,
                targets,
                count,
            } => {
                let (_, c, h, w) = self.shape(*log_probs).dims4("nll_loss")?;
                let hw = h * w;
                let mut dx = vec![0.0; self.value(*log_probs).numel()];
                let scale = -g[0] / *count as f64;
                for (i, t) in targets.iter().enumerate() {
                    if let Some(class) = *t {
                        dx[((i / hw) * c + class) * hw + i % hw] = scale;
                    }
                }
                self.give(grads, *log_probs, &dx);
            }
            Op::MaskedL1 {
                pred,
                target,
                valid,
                count,
            } => {
                let scale = g[0] / *count as f64;
                let dx: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(valid)
                    .map(|((p, t), v)| match (*v, p.partial_cmp(t)) {
                        (true, Some(std::cmp::Ordering::Greater)) => scale,
                        (true, Some(std::cmp::Ordering::Less)) => -scale,
                        _ => 0.0,
                    })
                    .collect();
                self.give(grads, *pred, &dx);
            }
            Op::MaskedNegDot {
                pred,
                target,
                valid,
                count,
            } => {
                let (_, c, h, w) = self.shape(*pred).dims4("masked_neg_dot")?;
                let hw = h * w;
                let scale = -g[0] / *count as f64;
                let mut dx = vec![0.0; target.len()];
                for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                    for ci in 0..c {
                        let k = ((i / hw) * c + ci) * hw + i % hw;
                        dx[k] = scale * target[k];
                    }
                }
                self.give(grads, *pred, &dx);
            }
            Op::WeightedSum { inputs, weights } => {
                for (v, w) in inputs.iter().zip(weights) {
                    self.give(grads, *v, &[g[0] * w]);
                }
            }
        }
        Ok(())
    }
}
