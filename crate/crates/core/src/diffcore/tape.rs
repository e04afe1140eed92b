//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward calls append nodes to the tape; `backward` replays the recorded
//! operations in reverse, accumulating gradients additively into every node
//! that requires them. One tape serves one forward/backward pair: it is
//! rebuilt each optimizer step, and a second `backward` without a fresh
//! forward is a usage error.

use std::collections::HashMap;

use crate::diffcore::params::{ParamId, ParamSet};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// out = a * b^T
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Broadcast-add a row vector to every row of a matrix.
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: f64 },
    /// Multiply by a scalar node (1-element tensor).
    ScaleByScalar { a: Var, s: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    LeakyRelu { a: Var, slope: f64 },
    Elu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Depthwise 1-d convolution along rows (sequence axis), zero padded.
    Conv1dDepthwise { x: Var, w: Var, kernel: usize },
    /// Slice a 1-d series into overlapping patches: [t] -> [l, patch_len].
    Patchify { x: Var, patch_len: usize, stride: usize },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// Each row repeated `times` consecutively: row i*times+t = a[i].
    RepeatRows { a: Var, times: usize },
    /// Whole matrix stacked `times`: row t*rows+i = a[i].
    TileRows { a: Var, times: usize },
    Reshape { a: Var },
    MeanAll { a: Var },
    SumAll { a: Var },
    /// Elementwise sum of same-shape tensors.
    SumList { parts: Vec<Var> },
    /// Pick one element of a vector as a scalar node.
    IndexScalar { a: Var, idx: usize },
    /// out[j] = a[indices[j]] for a 1-d tensor.
    Gather { a: Var, indices: Vec<usize> },
    /// Elementwise multiply by a fixed mask (entries 0 or 1/(1-p)).
    Dropout { a: Var, mask: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            tensor: t,
            op: Op::Leaf,
        });
        id
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    /// Bind a stored parameter as a differentiable leaf, deduplicating so a
    /// parameter used twice shares one node (gradients then accumulate).
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = set.get(id);
        let t = Tensor {
            shape: p.shape.clone(),
            data: p.data.clone(),
            grad: None,
            requires_grad: true,
        };
        let v = self.leaf(t);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    /// Add this tape's parameter gradients into the persistent store.
    pub fn accumulate_param_grads(&self, set: &mut ParamSet) {
        for &(pid, var) in &self.bindings {
            if let Some(g) = self.nodes[var.0].tensor.grad.as_ref() {
                set.get_mut(pid).accumulate_grad(g);
            }
        }
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value produced by {} at flat index {bad}",
                op_name(&op)
            )));
        }
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                grad: None,
                requires_grad,
            },
            op,
        });
        Ok(id)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tensor.requires_grad)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (&ta.data, &tb.data);
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(vec![m, n], out, rg, Op::Matmul { a, b })
    }

    /// a * b^T where a is m x k and b is n x k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(vec![m, n], out, rg, Op::MatmulNT { a, b })
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b })
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = (self.tensor(a).rows(), self.tensor(a).cols());
        if self.tensor(row).numel() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        let r = self.data(row);
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += r[j];
            }
        }
        let rg = self.needs_grad(&[a, row]);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale { a, c })
    }

    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.tensor(s).numel() != 1 {
            return Err(Error::usage("scale_by_scalar needs a 1-element scalar node"));
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(a).iter().map(|x| x * sv).collect();
        let rg = self.needs_grad(&[a, s]);
        self.push(self.shape(a).to_vec(), data, rg, Op::ScaleByScalar { a, s })
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.needs_grad(&[a]);
        self.push(self.shape(a).to_vec(), data, rg, op)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid { a }, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Op::LeakyRelu { a, slope }, |x| {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Elu { a }, |x| if x >= 0.0 { x } else { x.exp() - 1.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu { a }, |x| {
            0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
        })
    }

    /// x * sigmoid(x), composed from recorded primitives.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows). A vector is
    /// treated as a single row. Stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.tensor(a);
        if axis > 1 || (t.shape.len() == 1 && axis != 0) {
            return Err(Error::usage(format!(
                "softmax axis {axis} invalid for shape {:?}",
                t.shape
            )));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        // Normalize over rows (axis 1 for matrices, axis 0 for vectors);
        // axis 0 on a matrix walks columns instead.
        let over_rows = t.shape.len() == 1 || axis == 1;
        let (groups, span, stride_g, stride_e) = if over_rows {
            (rows, cols, cols, 1)
        } else {
            (cols, rows, 1, cols)
        };
        for g in 0..groups {
            let base = g * stride_g;
            let mut max = f64::NEG_INFINITY;
            for e in 0..span {
                max = max.max(t.data[base + e * stride_e]);
            }
            let mut denom = 0.0;
            for e in 0..span {
                let v = (t.data[base + e * stride_e] - max).exp();
                data[base + e * stride_e] = v;
                denom += v;
            }
            for e in 0..span {
                data[base + e * stride_e] /= denom;
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push(t.shape.clone(), data, rg, Op::Softmax { a, axis })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.tensor(x);
        let (rows, cols) = (t.rows(), t.cols());
        if self.tensor(gamma).numel() != cols || self.tensor(beta).numel() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: t.shape.clone(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let xd = self.data(x).to_vec();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[i * cols + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push(
            self.shape(x).to_vec(),
            data,
            rg,
            Op::LayerNorm { x, gamma, beta, eps },
        )
    }

    // ── Convolution / patching ──────────────────────────────────────

    /// Depthwise length-preserving conv along the sequence axis.
    /// x is [l, d], w is [kernel, d]; symmetric zero padding.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, kernel: usize) -> Result<Var> {
        if !matches!(kernel, 1 | 3 | 5) {
            return Err(Error::config(format!(
                "conv1d kernel size must be one of 1, 3, 5; got {kernel}"
            )));
        }
        let t = self.tensor(x);
        let (l, d) = (t.rows(), t.cols());
        let tw = self.tensor(w);
        if tw.shape != [kernel, d] {
            return Err(Error::Dimension {
                op: "conv1d_depthwise",
                lhs: vec![kernel, d],
                rhs: tw.shape.clone(),
            });
        }
        let pad = (kernel - 1) / 2;
        let xd = &t.data;
        let wd = &tw.data;
        let mut out = vec![0.0; l * d];
        for ti in 0..l {
            for u in 0..kernel {
                let src = ti as isize + u as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[ti * d + c] += xd[src * d + c] * wd[u * d + c];
                }
            }
        }
        let rg = self.needs_grad(&[x, w]);
        self.push(vec![l, d], out, rg, Op::Conv1dDepthwise { x, w, kernel })
    }

    pub fn patchify(&mut self, x: Var, patch_len: usize, stride: usize) -> Result<Var> {
        let t = self.tensor(x);
        if t.shape.len() != 1 {
            return Err(Error::usage("patchify expects a 1-d series"));
        }
        let n = t.shape[0];
        if n < patch_len {
            return Err(Error::config(format!(
                "series length {n} shorter than patch length {patch_len}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("patch stride must be positive"));
        }
        let l = (n - patch_len) / stride + 1;
        let mut out = vec![0.0; l * patch_len];
        for i in 0..l {
            out[i * patch_len..(i + 1) * patch_len]
                .copy_from_slice(&t.data[i * stride..i * stride + patch_len]);
        }
        let rg = self.needs_grad(&[x]);
        self.push(vec![l, patch_len], out, rg, Op::Patchify { x, patch_len, stride })
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.tensor(a);
        let (rows, cols) = (t.rows(), t.cols());
        if start + len > cols {
            return Err(Error::usage(format!(
                "slice_cols [{start}, {}) out of range for {cols} columns",
                start + len
            )));
        }
        let mut out = vec![0.0; rows * len];
        for i in 0..rows {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&t.data[i * cols + start..i * cols + start + len]);
        }
        let rg = self.needs_grad(&[a]);
        self.push(vec![rows, len], out, rg, Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols needs at least one part"));
        }
        let rows = self.tensor(parts[0]).rows();
        if parts.iter().any(|&p| self.tensor(p).rows() != rows) {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: self.shape(*parts.last().unwrap()).to_vec(),
            });
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.tensor(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let rg = self.needs_grad(parts);
        self.push(
            vec![rows, total],
            out,
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.tensor(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * times * cols];
        for i in 0..rows {
            let src = &t.data[i * cols..(i + 1) * cols];
            for r in 0..times {
                let dst = (i * times + r) * cols;
                out[dst..dst + cols].copy_from_slice(src);
            }
        }
        let rg = self.needs_grad(&[a]);
        self.push(vec![rows * times, cols], out, rg, Op::RepeatRows { a, times })
    }

    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.tensor(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; rows * times * cols];
        for r in 0..times {
            out[r * rows * cols..(r + 1) * rows * cols].copy_from_slice(&t.data);
        }
        let rg = self.needs_grad(&[a]);
        self.push(vec![rows * times, cols], out, rg, Op::TileRows { a, times })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.tensor(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape,
            });
        }
        let data = t.data.clone();
        let rg = self.needs_grad(&[a]);
        self.push(shape, data, rg, Op::Reshape { a })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a);
        let m = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.needs_grad(&[a]);
        self.push(vec![1], vec![m], rg, Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let t = self.tensor(a);
        let s = t.data.iter().sum::<f64>();
        let rg = self.needs_grad(&[a]);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    pub fn sum_list(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("sum_list needs at least one part"));
        }
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != shape {
                return Err(Error::Dimension {
                    op: "sum_list",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        for &p in parts {
            for (o, v) in out.iter_mut().zip(self.data(p)) {
                *o += v;
            }
        }
        let rg = self.needs_grad(parts);
        self.push(shape, out, rg, Op::SumList { parts: parts.to_vec() })
    }

    pub fn index_scalar(&mut self, a: Var, idx: usize) -> Result<Var> {
        let t = self.tensor(a);
        if idx >= t.numel() {
            return Err(Error::usage(format!(
                "index {idx} out of range for {} elements",
                t.numel()
            )));
        }
        let v = t.data[idx];
        let rg = self.needs_grad(&[a]);
        self.push(vec![1], vec![v], rg, Op::IndexScalar { a, idx })
    }

    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.tensor(a);
        if indices.iter().any(|&i| i >= t.numel()) {
            return Err(Error::usage("gather index out of range"));
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data[i]).collect();
        let rg = self.needs_grad(&[a]);
        self.push(
            vec![indices.len()],
            data,
            rg,
            Op::Gather { a, indices: indices.to_vec() },
        )
    }

    /// Apply a precomputed dropout mask (entries are 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.tensor(a);
        if mask.len() != t.numel() {
            return Err(Error::Dimension {
                op: "dropout",
                lhs: t.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data: Vec<f64> = t.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.needs_grad(&[a]);
        self.push(t.shape.clone(), data, rg, Op::Dropout { a, mask })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients for every node reachable from `loss` that requires
    /// them. Gradients accumulate additively across multiple uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage(
                "backward called twice on one tape; re-run the forward pass",
            ));
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.nodes[id].tensor.grad.is_none() || !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].tensor.requires_grad {
            return;
        }
        let numel = self.nodes[v.0].tensor.numel();
        let g = self.nodes[v.0]
            .tensor
            .grad
            .get_or_insert_with(|| vec![0.0; numel]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, id: usize, op: &Op) {
        let dout = self.nodes[id].tensor.grad.clone().unwrap();
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.tensor(a).rows(), self.tensor(a).cols());
                let n = self.tensor(b).cols();
                if self.nodes[a.0].tensor.requires_grad {
                    let bd = &self.nodes[b.0].tensor.data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += dout[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad {
                    let ad = self.nodes[a.0].tensor.data.clone();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * dout[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = (self.tensor(a).rows(), self.tensor(a).cols());
                let n = self.tensor(b).rows();
                if self.nodes[a.0].tensor.requires_grad {
                    let bd = &self.nodes[b.0].tensor.data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += d * bd[j * k + p];
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad {
                    let ad = self.nodes[a.0].tensor.data.clone();
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += d * ad[i * k + p];
                            }
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(a, &dout);
                self.add_grad(b, &dout);
            }
            Op::Sub { a, b } => {
                self.add_grad(a, &dout);
                let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].tensor.requires_grad {
                    let bd = &self.nodes[b.0].tensor.data;
                    let da: Vec<f64> = dout.iter().zip(bd).map(|(d, y)| d * y).collect();
                    self.add_grad(a, &da);
                }
                if self.nodes[b.0].tensor.requires_grad {
                    let ad = &self.nodes[a.0].tensor.data;
                    let db: Vec<f64> = dout.iter().zip(ad).map(|(d, x)| d * x).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddRow { a, row } => {
                self.add_grad(a, &dout);
                if self.nodes[row.0].tensor.requires_grad {
                    let cols = self.tensor(row).numel();
                    let rows = dout.len() / cols;
                    let mut dr = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dr[j] += dout[i * cols + j];
                        }
                    }
                    self.add_grad(row, &dr);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = dout.iter().map(|d| d * c).collect();
                self.add_grad(a, &da);
            }
            Op::ScaleByScalar { a, s } => {
                let sv = self.nodes[s.0].tensor.data[0];
                if self.nodes[a.0].tensor.requires_grad {
                    let da: Vec<f64> = dout.iter().map(|d| d * sv).collect();
                    self.add_grad(a, &da);
                }
                if self.nodes[s.0].tensor.requires_grad {
                    let ad = &self.nodes[a.0].tensor.data;
                    let ds: f64 = dout.iter().zip(ad).map(|(d, x)| d * x).sum();
                    self.add_grad(s, &[ds]);
                }
            }
            Op::Tanh { a } => {
                let yd = &self.nodes[id].tensor.data;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(yd)
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid { a } => {
                let yd = &self.nodes[id].tensor.data;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(yd)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Relu { a } => {
                let xd = &self.nodes[a.0].tensor.data;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(xd)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::LeakyRelu { a, slope } => {
                let xd = &self.nodes[a.0].tensor.data;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(xd)
                    .map(|(d, x)| if *x >= 0.0 { *d } else { d * slope })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Elu { a } => {
                let xd = &self.nodes[a.0].tensor.data;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(xd)
                    .map(|(d, x)| if *x >= 0.0 { *d } else { d * x.exp() })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Gelu { a } => {
                let xd = &self.nodes[a.0].tensor.data;
                let c = (2.0 / std::f64::consts::PI).sqrt() * 0.5;
                let da: Vec<f64> = dout
                    .iter()
                    .zip(xd)
                    .map(|(d, x)| {
                        let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                        d * (cdf + x * c * (-0.5 * x * x).exp())
                    })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Softmax { a, axis } => {
                let t = &self.nodes[id].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let over_rows = t.shape.len() == 1 || axis == 1;
                let (groups, span, stride_g, stride_e) = if over_rows {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                let yd = t.data.clone();
                let mut da = vec![0.0; yd.len()];
                for g in 0..groups {
                    let base = g * stride_g;
                    let mut dot = 0.0;
                    for e in 0..span {
                        let k = base + e * stride_e;
                        dot += dout[k] * yd[k];
                    }
                    for e in 0..span {
                        let k = base + e * stride_e;
                        da[k] = yd[k] * (dout[k] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let t = &self.nodes[x.0].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let xd = t.data.clone();
                let gd = self.nodes[gamma.0].tensor.data.clone();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for i in 0..rows {
                    let row = &xd[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let n = cols as f64;
                    let mut sum_dyg = 0.0;
                    let mut sum_dyg_xhat = 0.0;
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        let dyg = dout[i * cols + j] * gd[j];
                        sum_dyg += dyg;
                        sum_dyg_xhat += dyg * xhat;
                        dg[j] += dout[i * cols + j] * xhat;
                        db[j] += dout[i * cols + j];
                    }
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv;
                        let dyg = dout[i * cols + j] * gd[j];
                        dx[i * cols + j] =
                            inv * (dyg - sum_dyg / n - xhat * sum_dyg_xhat / n);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gamma, &dg);
                self.add_grad(beta, &db);
            }
            Op::Conv1dDepthwise { x, w, kernel } => {
                let t = &self.nodes[x.0].tensor;
                let (l, d) = (t.rows(), t.cols());
                let pad = (kernel - 1) / 2;
                let xd = t.data.clone();
                let wd = self.nodes[w.0].tensor.data.clone();
                let mut dx = vec![0.0; l * d];
                let mut dw = vec![0.0; kernel * d];
                for ti in 0..l {
                    for u in 0..kernel {
                        let src = ti as isize + u as isize - pad as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            let g = dout[ti * d + c];
                            dx[src * d + c] += wd[u * d + c] * g;
                            dw[u * d + c] += xd[src * d + c] * g;
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
            }
            Op::Patchify { x, patch_len, stride } => {
                let n = self.nodes[x.0].tensor.numel();
                let l = (n - patch_len) / stride + 1;
                let mut dx = vec![0.0; n];
                for i in 0..l {
                    for j in 0..patch_len {
                        dx[i * stride + j] += dout[i * patch_len + j];
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::SliceCols { a, start, len } => {
                let t = &self.nodes[a.0].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..len {
                        da[i * cols + start + j] = dout[i * len + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::ConcatCols { ref parts } => {
                let rows = self.nodes[id].tensor.rows();
                let total = self.nodes[id].tensor.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.tensor(p).cols();
                    if self.nodes[p.0].tensor.requires_grad {
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&dout[i * total + off..i * total + off + w]);
                        }
                        self.add_grad(p, &dp);
                    }
                    off += w;
                }
            }
            Op::RepeatRows { a, times } => {
                let t = &self.nodes[a.0].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    for r in 0..times {
                        let src = (i * times + r) * cols;
                        for j in 0..cols {
                            da[i * cols + j] += dout[src + j];
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::TileRows { a, times } => {
                let t = &self.nodes[a.0].tensor;
                let (rows, cols) = (t.rows(), t.cols());
                let mut da = vec![0.0; rows * cols];
                for r in 0..times {
                    for i in 0..rows {
                        let src = (r * rows + i) * cols;
                        for j in 0..cols {
                            da[i * cols + j] += dout[src + j];
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape { a } => {
                self.add_grad(a, &dout);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].tensor.numel();
                let g = dout[0] / n as f64;
                let da = vec![g; n];
                self.add_grad(a, &da);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].tensor.numel();
                let da = vec![dout[0]; n];
                self.add_grad(a, &da);
            }
            Op::SumList { ref parts } => {
                for &p in parts {
                    self.add_grad(p, &dout);
                }
            }
            Op::IndexScalar { a, idx } => {
                let n = self.nodes[a.0].tensor.numel();
                let mut da = vec![0.0; n];
                da[idx] = dout[0];
                self.add_grad(a, &da);
            }
            Op::Gather { a, ref indices } => {
                let n = self.nodes[a.0].tensor.numel();
                let mut da = vec![0.0; n];
                for (j, &i) in indices.iter().enumerate() {
                    da[i] += dout[j];
                }
                self.add_grad(a, &da);
            }
            Op::Dropout { a, ref mask } => {
                let da: Vec<f64> = dout.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.add_grad(a, &da);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRow { .. } => "add_row",
        Op::Scale { .. } => "scale",
        Op::ScaleByScalar { .. } => "scale_by_scalar",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Relu { .. } => "relu",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Elu { .. } => "elu",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1dDepthwise { .. } => "conv1d_depthwise",
        Op::Patchify { .. } => "patchify",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::RepeatRows { .. } => "repeat_rows",
        Op::TileRows { .. } => "tile_rows",
        Op::Reshape { .. } => "reshape",
        Op::MeanAll { .. } => "mean_all",
        Op::SumAll { .. } => "sum_all",
        Op::SumList { .. } => "sum_list",
        Op::IndexScalar { .. } => "index_scalar",
        Op::Gather { .. } => "gather",
        Op::Dropout { .. } => "dropout",
    }
}
