//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the [`Graph`]; node order is execution order,
//! so a reverse scan from the output is a valid topological replay.

pub mod conv;
pub mod kernels;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use conv::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxChannels(Var),
    BilinearUpsample {
        input: Var,
        out_h: usize,
        out_w: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    LnFloor {
        input: Var,
        floor: f64,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    PixelCrossEntropy {
        scores: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Not shareable across threads while being built, but
/// a finished graph can be moved freely.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (out, cols, geom) = conv::conv2d_forward(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu_forward(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { input: x, argmax }))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_channels_forward(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxChannels(x)))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_upsample_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(
            out,
            Op::BilinearUpsample {
                input: x,
                out_h,
                out_w,
            },
        ))
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!(
                "{} of {:?} and {:?}",
                name,
                ta.shape(),
                tb.shape()
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * k).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    /// Picks elements by flat row-major index into a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(shape_err!("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(shape_err!(
                "gather index {} out of range for {:?}",
                bad,
                t.shape()
            ));
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(&[data.len()], data)?;
        Ok(self.push(out, Op::Gather { input: x, indices }))
    }

    /// Elementwise `ln(max(x, floor))`.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| v.max(floor).ln()).collect())
            .expect("same shape");
        self.push(out, Op::LnFloor { input: x, floor })
    }

    /// Global spatial max of each channel: `[C, H, W] -> [C]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (c, h, w) = t.dims3()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let start = ch * plane;
            let best = first_argmax(&t.data()[start..start + plane]);
            out.push(t.data()[start + best]);
            argmax.push(start + best);
        }
        let out = Tensor::new(&[c], out)?;
        Ok(self.push(out, Op::ChannelMax { input: x, argmax }))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err!(
                "bce logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            ));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&s, &y)| kernels::softplus(s) - s * y)
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }))
    }

    /// Mean per-pixel softmax cross-entropy of `[C, H, W]` scores against a
    /// class index per pixel.
    pub fn pixel_cross_entropy(&mut self, scores: Var, labels: Vec<usize>) -> Result<Var> {
        let t = self.value(scores);
        let (c, h, w) = t.dims3()?;
        if labels.len() != h * w {
            return Err(shape_err!(
                "{} labels for scores {:?}",
                labels.len(),
                t.shape()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err!("label {} out of range for {} classes", bad, c));
        }
        let probs = kernels::softmax_channels_forward(t)?.into_data();
        let plane = h * w;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(p, &l)| -probs[l * plane + p].max(f64::MIN_POSITIVE).ln())
            .sum();
        let out = Tensor::scalar(total / plane as f64);
        Ok(self.push(
            out,
            Op::PixelCrossEntropy {
                scores,
                probs,
                labels,
            },
        ))
    }

    /// Reverse accumulation from `output` seeded with `seed`. Each call
    /// starts from fresh zero buffers.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(shape_err!(
                "backward seed {:?} does not match output {:?}",
                seed.shape(),
                out_shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    /// Backward from a single-element output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape().to_vec();
        self.backward(output, &Tensor::full(&shape, 1.0))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let cg = conv::conv2d_backward(geom, cols, self.value(*kernel).data(), g);
                accumulate(grads, *input, cg.input);
                accumulate(grads, *kernel, cg.kernel);
                accumulate(grads, *bias, cg.bias);
            }
            Op::Relu(x) => {
                let d = kernels::relu_backward(self.value(*x).data(), g);
                accumulate(grads, *x, d);
            }
            Op::MaxPool2 { input, argmax } => {
                let d = kernels::maxpool2_backward(self.value(*input).numel(), argmax, g);
                accumulate(grads, *input, d);
            }
            Op::SoftmaxChannels(x) => {
                let d = kernels::softmax_channels_backward(&node.value, g);
                accumulate(grads, *x, d);
            }
            Op::BilinearUpsample {
                input,
                out_h,
                out_w,
            } => {
                let d = kernels::bilinear_upsample_backward(
                    self.value(*input).shape(),
                    *out_h,
                    *out_w,
                    g,
                );
                accumulate(grads, *input, d);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, v)| g * v).collect());
                accumulate(grads, *b, g.iter().zip(va).map(|(g, v)| g * v).collect());
            }
            Op::Scale(x, k) => {
                accumulate(grads, *x, g.iter().map(|v| v * k).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Gather { input, indices } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (&i, &gv) in indices.iter().zip(g) {
                    d[i] += gv;
                }
                accumulate(grads, *input, d);
            }
            Op::LnFloor { input, floor } => {
                let x = self.value(*input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > *floor { gv / v } else { 0.0 })
                    .collect();
                accumulate(grads, *input, d);
            }
            Op::ChannelMax { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
                accumulate(grads, *input, d);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let s = self.value(*logits).data();
                let d = s
                    .iter()
                    .zip(targets)
                    .map(|(&s, &y)| g[0] * (kernels::sigmoid(s) - y) / n)
                    .collect();
                accumulate(grads, *logits, d);
            }
            Op::PixelCrossEntropy {
                scores,
                probs,
                labels,
            } => {
                let plane = labels.len();
                let scale = g[0] / plane as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (p, &l) in labels.iter().enumerate() {
                    d[l * plane + p] -= scale;
                }
                accumulate(grads, *scores, d);
            }
        }
    }

    /// Smallest distance of any recorded kink (ReLU preactivation, max-pool
    /// runner-up, channel-max runner-up) from switching. Central differences
    /// with a step well below this margin stay on one linear piece.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let (_, _, w) = self.value(*input).dims3().expect("rank 3");
                    let src = self.value(*input).data();
                    for &best in argmax {
                        // Recover the window origin from the winning index.
                        let (row, col) = (best / w, best % w);
                        let top = (row - row % 2) * w + (col - col % 2);
                        for idx in [top, top + 1, top + w, top + w + 1] {
                            if idx != best && !(src[idx] == 0.0 && src[best] == 0.0) {
                                margin = margin.min(src[best] - src[idx]);
                            }
                        }
                    }
                }
                Op::ChannelMax { input, argmax } => {
                    let t = self.value(*input);
                    let (_, h, w) = t.dims3().expect("rank 3");
                    let plane = h * w;
                    for &best in argmax {
                        let start = best - best % plane;
                        for idx in start..start + plane {
                            if idx != best {
                                margin = margin.min(t.data()[best] - t.data()[idx]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

/// Index of the first maximum in row-major order.
pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Output of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` does not reach the output.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let y = g.sum(x);
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3], 2.0));
        let unused = g.leaf(Tensor::full(&[2, 2], 5.0));
        let y = g.mean(x);
        let grads = g.backward_scalar(y).unwrap();
        assert!(!grads.reached(unused));
        assert_eq!(grads.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn leaf_only_graph_backward_is_identity_on_seed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let seed = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let grads = g.backward(x, &seed).unwrap();
        assert_eq!(grads.get(x), seed);
    }

    #[test]
    fn seed_shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[4], |i| i as f64 + 0.5));
        let b = g.leaf(Tensor::from_fn(&[4], |i| 1.0 - i as f64));
        let m = g.mul(a, b).unwrap();
        let s = g.add(m, a).unwrap();
        let y = g.sum(s);
        let first = g.backward_scalar(y).unwrap();
        let second = g.backward_scalar(y).unwrap();
        assert_eq!(first.get(a), second.get(a));
        assert_eq!(first.get(b), second.get(b));
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x * x) -> dy/dx = 2x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn first_argmax_prefers_earliest() {
        assert_eq!(first_argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(first_argmax(&[0.0; 5]), 0);
    }
}
