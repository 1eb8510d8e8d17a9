//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] walks the nodes in
//! reverse, accumulating gradients in a scratch buffer, and finally adds the
//! gradients of leaf tensors into their `grad` slots. Leaf gradients are
//! accumulated, never overwritten: calling `backward` twice without
//! [`Tape::zero_grad`] doubles them.

use super::tensor::{split_axis, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// sqrt(2/pi), the GELU tanh-approximation constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTrailing(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand { input: Var, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { input: Var, axis: usize },
    ReduceMax { input: Var, argmax: Vec<usize> },
    SumAll(Var),
    MeanAxis { input: Var, axis: usize },
    Gelu(Var),
    MulMask { input: Var, mask: Vec<f64> },
    /// Normalisation over groups: layer norm groups the last axis, batch
    /// norm groups every position per channel.
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        per_channel: bool,
    },
    AffineEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv3x3 { input: Var, kernel: Var, bias: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
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

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|&v| self.requires(v));
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// C = A·B for matrices A (m×k) and B (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(&[m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for t in 0..batch {
            gemm(
                &da[t * m * k..(t + 1) * m * k],
                &db[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.push(&[batch, m, n], out, Op::BatchMatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Scale(a, s), &[a])
    }

    /// Adds `b` to every trailing block of `a`; `b.shape` must be a suffix of
    /// `a.shape`. This is the only broadcasting the tape offers.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_trailing", sa, sb));
        }
        let block = self.value(b).numel();
        let db = self.data(b);
        let out = self
            .data(a)
            .chunks(block)
            .flat_map(|row| row.iter().zip(db).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push(&shape, out, Op::AddTrailing(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape(a), &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(invalid(format!("invalid permutation {axes:?} for shape {shape:?}")));
        }
        let (out, out_shape) = permute_data(self.data(a), shape, axes);
        Ok(self.push(&out_shape, out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Repeats a unit-extent axis `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a);
        check_axis(shape, axis)?;
        if shape[axis] != 1 || n == 0 {
            return Err(invalid(format!("expand needs a unit axis, got {shape:?} axis {axis}")));
        }
        let (outer, _, inner) = split_axis(shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = n;
        Ok(self.push(&out_shape, out, Op::Expand { input: a, axis }, &[a]))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a);
        check_axis(shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(invalid(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.push(&out_shape, out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(
            &out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Softmax along `axis`, subtracting each slice's maximum first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let out = softmax_data(self.data(a), &shape, axis);
        Ok(self.push(&shape, out, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Maximum along `axis`, keeping it as a unit axis. Ties resolve to the
    /// lowest index, which receives the whole gradient.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * extent * inner + i;
                for t in 1..extent {
                    let idx = (o * extent + t) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(&out_shape, out, Op::ReduceMax { input: a, argmax }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(&[1], vec![s], Op::SumAll(a), &[a])
    }

    /// Mean along `axis`, keeping it as a unit axis.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis)?;
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..extent {
                let row = &src[(o * extent + t) * inner..(o * extent + t + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, v)| *acc += v);
            }
        }
        let inv = 1.0 / extent as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.push(&out_shape, out, Op::MeanAxis { input: a, axis }, &[a]))
    }

    /// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Gelu(a), &[a])
    }

    /// Elementwise product with a constant mask (dropout keeps its mask here).
    pub fn mul_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(shape_err("mul_mask", self.shape(a), &[mask.len()]));
        }
        let out = zip_map(self.data(a), &mask, |x, m| x * m);
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, Op::MulMask { input: a, mask }, &[a]))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let channels = *self.shape(x).last().expect("tensors have rank >= 1");
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(shape_err(op, self.shape(x), self.shape(p)));
            }
        }
        Ok(channels)
    }

    /// Normalises each last-axis vector to zero mean and unit variance, then
    /// applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.check_affine("layer_norm", x, gamma, beta)?;
        let src = self.data(x);
        let rows = src.len() / c;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let out = affine(&xhat, self.data(gamma), self.data(beta));
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            &shape,
            out,
            Op::Norm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
                per_channel: false,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalisation with statistics taken over every position of each
    /// channel (last axis). Returns the batch statistics for running updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        let src = self.data(x);
        let rows = src.len() / c;
        if rows < 2 {
            return Err(invalid("batch norm in training mode needs more than one value per channel"));
        }
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut sq = vec![0.0; c];
        for row in src.chunks(c) {
            for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let rstd: Vec<f64> = sq.iter().map(|s| 1.0 / (s / rows as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        for (orow, row) in xhat.chunks_mut(c).zip(src.chunks(c)) {
            for j in 0..c {
                orow[j] = (row[j] - mean[j]) * rstd[j];
            }
        }
        let stats = BatchStats {
            mean,
            var: sq.iter().map(|s| s / (rows - 1) as f64).collect(),
        };
        let out = affine(&xhat, self.data(gamma), self.data(beta));
        let shape = self.shape(x).to_vec();
        let y = self.push(
            &shape,
            out,
            Op::Norm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
                per_channel: true,
            },
            &[x, gamma, beta],
        );
        Ok((y, stats))
    }

    /// Batch normalisation with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_affine("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", self.shape(x), &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = self
            .data(x)
            .chunks(c)
            .flat_map(|row| (0..c).map(|j| (row[j] - running_mean[j]) * inv_std[j]).collect::<Vec<_>>())
            .collect();
        let out = affine(&xhat, self.data(gamma), self.data(beta));
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            &shape,
            out,
            Op::AffineEval {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Same-size 3×3 cross-correlation with zero padding on `[N, h, w, Cin]`
    /// input and a `[3, 3, Cin, Cout]` kernel.
    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 || sk[2] != sx[3] {
            return Err(shape_err("conv3x3", &sx, &sk));
        }
        let (n, h, w, cin, cout) = (sx[0], sx[1], sx[2], sx[3], sk[3]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv3x3 bias", &sk, self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * h * w * cout];
        if let Some(b) = bias {
            for px in out.chunks_mut(cout) {
                px.copy_from_slice(self.data(b));
            }
        }
        let (src, k) = (self.data(x), self.data(kernel));
        for_each_tap(n, h, w, |out_px, in_px, tap| {
            let o = &mut out[out_px * cout..(out_px + 1) * cout];
            let input = &src[in_px * cin..(in_px + 1) * cin];
            let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &v) in input.iter().enumerate() {
                if v != 0.0 {
                    for (acc, kv) in o.iter_mut().zip(&kt[ci * cout..(ci + 1) * cout]) {
                        *acc += v * kv;
                    }
                }
            }
        });
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(&[n, h, w, cout], out, Op::Conv3x3 { input: x, kernel, bias }, &inputs))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_data(self.data(logits), &shape, 1);
        let src = self.data(logits);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a single-element output, adding into the `grad`
    /// slot of every leaf that requires a gradient.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                self.backward_node(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.requires(v) {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| gemm_nt(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| gemm_tn(self.data(*a), g, db, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                acc(*a, &mut |da| {
                    for t in 0..batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &self.data(*b)[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for t in 0..batch {
                        gemm_tn(
                            &self.data(*a)[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddTrailing(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for chunk in g.chunks(d.len()) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*a, &mut |d| add_into(d, &back));
            }
            Op::Expand { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for t in 0..n {
                            add_into(
                                &mut d[o * inner..(o + 1) * inner],
                                &g[(o * n + t) * inner..(o * n + t + 1) * inner],
                            );
                        }
                    }
                });
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let extent = self.shape(*input)[*axis];
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        let base = (o * extent + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * ext * inner..(o + 1) * ext * inner], &g[src..src + ext * inner]);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |t: usize| (o * extent + t) * inner + i;
                            let dot: f64 = (0..extent).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..extent {
                                d[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::ReduceMax { input, argmax } => acc(*input, &mut |d| {
                for (&src, gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
            }),
            Op::SumAll(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanAxis { input, axis } => {
                let (outer, extent, inner) = split_axis(self.shape(*input), *axis);
                let inv = 1.0 / extent as f64;
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for t in 0..extent {
                            let row = &mut d[(o * extent + t) * inner..(o * extent + t + 1) * inner];
                            for (x, gi) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *x += gi * inv;
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |d| {
                    for ((di, gi), xi) in d.iter_mut().zip(g).zip(x) {
                        *di += gi * gelu_grad(*xi);
                    }
                });
            }
            Op::MulMask { input, mask } => acc(*input, &mut |d| {
                for ((di, gi), m) in d.iter_mut().zip(g).zip(mask) {
                    *di += gi * m;
                }
            }),
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
                per_channel,
            } => {
                let c = self.value(*gamma).numel();
                let gam = self.data(*gamma);
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                acc(*input, &mut |d| {
                    if *per_channel {
                        norm_backward_per_channel(g, gam, xhat, rstd, c, d)
                    } else {
                        norm_backward_per_row(g, gam, xhat, rstd, c, d)
                    }
                });
            }
            Op::AffineEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let gam = self.data(*gamma);
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
                acc(*input, &mut |d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            drow[j] += grow[j] * gam[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::Conv3x3 { input, kernel, bias } => {
                let sx = self.shape(*input);
                let (n, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
                let cout = self.shape(*kernel)[3];
                if let Some(b) = bias {
                    acc(*b, &mut |d| {
                        for px in g.chunks(cout) {
                            add_into(d, px);
                        }
                    });
                }
                let (src, k) = (self.data(*input), self.data(*kernel));
                acc(*input, &mut |d| {
                    for_each_tap(n, h, w, |out_px, in_px, tap| {
                        let go = &g[out_px * cout..(out_px + 1) * cout];
                        let kt = &k[tap * cin * cout..(tap + 1) * cin * cout];
                        for (ci, di) in d[in_px * cin..(in_px + 1) * cin].iter_mut().enumerate() {
                            *di += go.iter().zip(&kt[ci * cout..(ci + 1) * cout]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                });
                acc(*kernel, &mut |d| {
                    for_each_tap(n, h, w, |out_px, in_px, tap| {
                        let go = &g[out_px * cout..(out_px + 1) * cout];
                        let input = &src[in_px * cin..(in_px + 1) * cin];
                        let dt = &mut d[tap * cin * cout..(tap + 1) * cin * cout];
                        for (ci, &v) in input.iter().enumerate() {
                            if v != 0.0 {
                                for (dk, gv) in dt[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                                    *dk += v * gv;
                                }
                            }
                        }
                    });
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - target);
                        }
                    }
                });
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn affine(xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    xhat.chunks(c)
        .flat_map(|row| (0..c).map(move |j| row[j] * gamma[j] + beta[j]))
        .collect()
}

fn norm_backward_per_row(g: &[f64], gamma: &[f64], xhat: &[f64], rstd: &[f64], c: usize, d: &mut [f64]) {
    for (r, s) in rstd.iter().enumerate() {
        let range = r * c..(r + 1) * c;
        let (grow, xrow) = (&g[range.clone()], &xhat[range.clone()]);
        let mut sum = 0.0;
        let mut dot = 0.0;
        for j in 0..c {
            let dx = grow[j] * gamma[j];
            sum += dx;
            dot += dx * xrow[j];
        }
        let (mean, mean_dot) = (sum / c as f64, dot / c as f64);
        for (j, di) in d[range].iter_mut().enumerate() {
            *di += s * (grow[j] * gamma[j] - mean - xrow[j] * mean_dot);
        }
    }
}

fn norm_backward_per_channel(g: &[f64], gamma: &[f64], xhat: &[f64], rstd: &[f64], c: usize, d: &mut [f64]) {
    let rows = (g.len() / c) as f64;
    let mut sum = vec![0.0; c];
    let mut dot = vec![0.0; c];
    for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            let dx = grow[j] * gamma[j];
            sum[j] += dx;
            dot[j] += dx * xrow[j];
        }
    }
    for ((drow, grow), xrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
        for j in 0..c {
            drow[j] += rstd[j] * (grow[j] * gamma[j] - sum[j] / rows - xrow[j] * dot[j] / rows);
        }
    }
}

/// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds 3×3 tap of a
/// same-size convolution over `n` images of `h × w` pixels.
fn for_each_tap(n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let out_px = (b * h + y) * w + x;
                for ky in 0..3 {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                    for kx in 0..3 {
                        let Some(ix) = (x + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                        f(out_px, (b * h + iy) * w + ix, ky * 3 + kx);
                    }
                }
            }
        }
    }
}

/// out += a·b with a: m×k, b: k×n.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out += g·bᵀ with g: m×n, b: k×n, out: m×k.
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out += aᵀ·g with a: m×k, g: m×n, out: k×n.
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
}

pub(crate) fn softmax_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * extent + t) * inner + i;
            let max = (0..extent).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..extent {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            for t in 0..extent {
                out[idx(t)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0; rank];
    let mut offset = 0;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
