//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation.

use super::kernels::{self, Taps};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Conv3x3 {
        input: Var,
        weights: Var,
        bias: Var,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        cols: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
        batch: usize,
        f_in: usize,
        f_out: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        k: usize,
    },
    Gather {
        map: Var,
        taps: Taps,
        channels: usize,
        plane: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Sum {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    /// Records a constant (or independent variable) on the tape.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a model parameter; its gradient can later be accumulated back
    /// into the store with [`Gradients::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        self.push(value, Op::Leaf { param: Some(id) })
    }

    pub fn conv3x3(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = conv_dims(self.shape(input), self.shape(weights), self.shape(bias))?;
        let c_out = self.shape(weights)[0];
        let (out, cols) = kernels::conv3x3_forward(
            self.data(input),
            self.data(weights),
            self.data(bias),
            c_in,
            c_out,
            h,
            w,
        );
        let value = Tensor::from_parts(vec![c_out, h, w], out);
        Ok(self.push(
            value,
            Op::Conv3x3 {
                input,
                weights,
                bias,
                c_in,
                c_out,
                h,
                w,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let out = src
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let value = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(value, Op::Relu { input })
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = pool_dims(self.shape(input))?;
        let (out, argmax) = kernels::maxpool2x2_forward(self.data(input), c, h, w);
        let value = Tensor::from_parts(vec![c, h / 2, w / 2], out);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (batch, f_in, f_out) =
            linear_dims(self.shape(input), self.shape(weights), self.shape(bias))?;
        let out = kernels::linear_forward(
            self.data(input),
            self.data(weights),
            self.data(bias),
            batch,
            f_in,
            f_out,
        );
        let value = Tensor::from_parts(vec![batch, f_out], out);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weights,
                bias,
                batch,
                f_in,
                f_out,
            },
        ))
    }

    /// Mean softmax cross-entropy; yields a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, k) = ce_dims(self.shape(logits), targets)?;
        let (loss, probs) = kernels::softmax_cross_entropy(self.data(logits), targets, k);
        debug_assert_eq!(rows, targets.len());
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                k,
            },
        ))
    }

    /// Weighted gather from a `[C, H, W]` map: output row `p` holds, for every
    /// channel, the weighted sum of the spatial cells listed in `taps` for `p`.
    pub fn gather(&mut self, map: Var, taps: Taps) -> Result<Var> {
        let shape = self.shape(map);
        if shape.len() != 3 {
            return Err(Error::shape("gather", "rank", 3, shape.len()));
        }
        let (channels, plane) = (shape[0], shape[1] * shape[2]);
        taps.check_bounds(plane)?;
        let out = kernels::gather_weighted(self.data(map), channels, plane, &taps);
        let value = Tensor::from_parts(vec![taps.len(), channels], out);
        Ok(self.push(
            value,
            Op::Gather {
                map,
                taps,
                channels,
                plane,
            },
        ))
    }

    /// Column-wise concatenation of `[P, C_i]` matrices into `[P, sum C_i]`.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let shape = self.shape(v);
            if shape.len() != 2 {
                return Err(Error::shape("concat_cols", "rank", 2, shape.len()));
            }
            if shape[0] != rows {
                return Err(Error::shape("concat_cols", "rows", rows, shape[0]));
            }
            parts.push((v, shape[1]));
        }
        let width: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &(v, cols) in &parts {
                out.extend_from_slice(&self.data(v)[r * cols..(r + 1) * cols]);
            }
        }
        let value = Tensor::from_parts(vec![rows, width], out);
        Ok(self.push(value, Op::ConcatCols { parts, rows }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.data(input).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (i, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("dim {i}"), *x, *y));
            }
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(&self.nodes[idx], &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of tape node {idx}")));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((Var(i), id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv3x3 {
                input,
                weights,
                bias,
                c_in,
                c_out,
                h,
                w,
                cols,
            } => {
                let g = kernels::conv3x3_backward(
                    grad,
                    cols,
                    self.data(*weights),
                    *c_in,
                    *c_out,
                    *h,
                    *w,
                );
                accumulate(grads, *input, &g.input);
                accumulate(grads, *weights, &g.weights);
                accumulate(grads, *bias, &g.bias);
            }
            Op::Relu { input } => {
                let x = self.data(*input);
                let g: Vec<f64> = x
                    .iter()
                    .zip(grad)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &g);
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut g = vec![0.0; self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(grad) {
                    g[src] += gv;
                }
                accumulate(grads, *input, &g);
            }
            Op::Linear {
                input,
                weights,
                bias,
                batch,
                f_in,
                f_out,
            } => {
                let mut g_in = vec![0.0; batch * f_in];
                kernels::gemm_nn(*batch, *f_in, *f_out, grad, self.data(*weights), &mut g_in);
                let mut g_w = vec![0.0; f_out * f_in];
                kernels::gemm_tn(*batch, *f_out, *f_in, grad, self.data(*input), &mut g_w);
                let mut g_b = vec![0.0; *f_out];
                for row in grad.chunks_exact(*f_out) {
                    for (b, &v) in g_b.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                accumulate(grads, *input, &g_in);
                accumulate(grads, *weights, &g_w);
                accumulate(grads, *bias, &g_b);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                k,
            } => {
                let scale = grad[0] / targets.len() as f64;
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * k + t] -= 1.0;
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, &g);
            }
            Op::Gather {
                map,
                taps,
                channels,
                plane,
            } => {
                let mut g = vec![0.0; channels * plane];
                kernels::gather_weighted_backward(grad, *channels, *plane, taps, &mut g);
                accumulate(grads, *map, &g);
            }
            Op::ConcatCols { parts, rows } => {
                let width: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, cols) in parts {
                    let mut g = Vec::with_capacity(rows * cols);
                    for r in 0..*rows {
                        g.extend_from_slice(&grad[r * width + offset..r * width + offset + cols]);
                    }
                    accumulate(grads, v, &g);
                    offset += cols;
                }
            }
            Op::Sum { input } => {
                let g = vec![grad[0]; self.value(*input).numel()];
                accumulate(grads, *input, &g);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, grad);
                accumulate(grads, *b, grad);
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = grad.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = grad.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Gradients of one scalar loss with respect to every reachable tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient slots. Parameters
    /// with `requires_grad == false` are skipped; slots are never cleared here.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            let tensor = store.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            match self.get(var) {
                Some(g) => tensor.accumulate_grad(g),
                None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
            }
        }
    }
}

pub(crate) fn conv_dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize)> {
    const OP: &str = "conv2d";
    if input.len() != 3 {
        return Err(Error::shape(OP, "input rank", 3, input.len()));
    }
    if weights.len() != 4 {
        return Err(Error::shape(OP, "weight rank", 4, weights.len()));
    }
    if weights[1] != input[0] {
        return Err(Error::shape(OP, "weight in_channels", input[0], weights[1]));
    }
    if weights[2] != 3 {
        return Err(Error::shape(OP, "kernel height", 3, weights[2]));
    }
    if weights[3] != 3 {
        return Err(Error::shape(OP, "kernel width", 3, weights[3]));
    }
    if bias.len() != 1 || bias[0] != weights[0] {
        return Err(Error::shape(
            OP,
            "bias length",
            weights[0],
            bias.iter().product(),
        ));
    }
    Ok((input[0], input[1], input[2]))
}

pub(crate) fn pool_dims(input: &[usize]) -> Result<(usize, usize, usize)> {
    const OP: &str = "maxpool2x2";
    if input.len() != 3 {
        return Err(Error::shape(OP, "input rank", 3, input.len()));
    }
    if input[1] < 2 {
        return Err(Error::invalid(OP, format!("height {} < 2", input[1])));
    }
    if input[2] < 2 {
        return Err(Error::invalid(OP, format!("width {} < 2", input[2])));
    }
    Ok((input[0], input[1], input[2]))
}

pub(crate) fn linear_dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    if input.len() != 2 {
        return Err(Error::shape(OP, "input rank", 2, input.len()));
    }
    if weights.len() != 2 {
        return Err(Error::shape(OP, "weight rank", 2, weights.len()));
    }
    if weights[1] != input[1] {
        return Err(Error::shape(OP, "in_features", input[1], weights[1]));
    }
    if bias.len() != 1 || bias[0] != weights[0] {
        return Err(Error::shape(
            OP,
            "bias length",
            weights[0],
            bias.iter().product(),
        ));
    }
    Ok((input[0], input[1], weights[0]))
}

pub(crate) fn ce_dims(logits: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    const OP: &str = "softmax_cross_entropy";
    if logits.len() != 2 {
        return Err(Error::shape(OP, "logit rank", 2, logits.len()));
    }
    if logits[0] != targets.len() {
        return Err(Error::shape(OP, "batch", logits[0], targets.len()));
    }
    if targets.is_empty() {
        return Err(Error::invalid(OP, "empty batch"));
    }
    let k = logits[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(
            OP,
            format!("target {t} out of range for {k} classes"),
        ));
    }
    Ok((logits[0], k))
}
