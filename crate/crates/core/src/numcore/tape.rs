//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse order,
//! so gradient reductions always happen in the same order and results are
//! bit-deterministic.

use crate::error::{shape_err, LslaError, Result};
use crate::numcore::tensor::{check_shape, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a_off: Vec<usize>,
        b_off: Vec<usize>,
    },
    Gather {
        a: usize,
        index: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
        d: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        cols: Vec<f64>,
        in_shape: [usize; 4],
        stride: usize,
        out_hw: (usize, usize),
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        a: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Numpy-style broadcast of two shapes, aligned on the right.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
/// Returns `None` when the source already has the output's shape.
fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let n = numel(out);
    let in_n = numel(input);
    if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
        return Some((0..n).map(|i| i % in_n).collect());
    }
    let r = out.len();
    let off = r - input.len();
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for d in (0..input.len()).rev() {
        if input[d] != 1 {
            strides[off + d] = s;
        }
        s *= input[d];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..r).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c`, arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the slices cover every index reached through the given strides
    // (checked above in debug builds, guaranteed by callers' shape checks).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err(format!("constant of shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            shape_err(format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let a_map = broadcast_map(&out, &sa);
        let b_map = broadcast_map(&out, &sb);
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let n = numel(&out);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Mul => x * y,
        };
        let value: Vec<f64> = (0..n)
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                f(va[ia], vb[ib])
            })
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(
            out,
            value,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                a_map,
                b_map,
            },
            needs,
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let needs = self.node(a).needs_grad;
        self.push(self.shape(a).to_vec(), value, Op::Scale { a: a.0, c }, needs)
    }

    /// Batched `a @ b`; leading dimensions broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` (transpose of the last two axes of `b`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(format!(
                "matmul inner dimensions differ: {sa:?} @ {sb:?}{}",
                if trans_b { "^T" } else { "" }
            )));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| shape_err(format!("matmul batch dims {sa:?} and {sb:?} do not broadcast")))?;
        let nb = numel(&batch);
        let a_off: Vec<usize> = match broadcast_map(&batch, ba) {
            Some(map) => map.into_iter().map(|i| i * m * k).collect(),
            None => (0..nb).map(|i| i * m * k).collect(),
        };
        let b_off: Vec<usize> = match broadcast_map(&batch, bb) {
            Some(map) => map.into_iter().map(|i| i * k * n).collect(),
            None => (0..nb).map(|i| i * k * n).collect(),
        };
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        let mut value = vec![0.0; nb * m * n];
        {
            let (va, vb) = (&self.node(a).value, &self.node(b).value);
            for i in 0..nb {
                gemm(
                    m,
                    k,
                    n,
                    &va[a_off[i]..a_off[i] + m * k],
                    (k, 1),
                    &vb[b_off[i]..b_off[i] + k * n],
                    b_strides,
                    &mut value[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
                m,
                k,
                n,
                a_off,
                b_off,
            },
            needs,
        ))
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`. Permutations, window
    /// partitioning, cyclic shifts and table lookups are all gathers.
    pub fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != index.len() {
            return Err(shape_err(format!("gather index of length {} for shape {shape:?}", index.len())));
        }
        let src = &self.node(a).value;
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!("gather index {bad} out of range for {} elements", src.len())));
        }
        let value = index.iter().map(|&i| src[i]).collect();
        let needs = self.node(a).needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Gather { a: a.0, index }, needs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for rank {r}")));
        }
        let mut in_strides = vec![1usize; r];
        for d in (0..r.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut cur = 0usize;
        for _ in 0..n {
            index.push(cur);
            for d in (0..r).rev() {
                idx[d] += 1;
                cur += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                cur -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        self.gather(a, &out_shape, index)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(a).len() {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a: a.0 }, needs))
    }

    /// Max-subtracted softmax over the last axis. Entries at `-inf` map to
    /// exactly zero; a row made only of `-inf` is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        let src = &self.node(a).value;
        let mut value = vec![0.0; src.len()];
        for (row, (x, y)) in src.chunks(d).zip(value.chunks_mut(d)).enumerate() {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(LslaError::DegenerateRow { row });
            }
            let mut sum = 0.0;
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - max).exp();
                sum += *yi;
            }
            y.iter_mut().for_each(|v| *v /= sum);
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(shape, value, Op::Softmax { a: a.0, d }, needs))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "layer_norm over {shape:?} needs gamma/beta of shape [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = &self.node(x).value;
        let (g, b) = (&self.node(gamma).value, &self.node(beta).value);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                value[r * d + j] = xh * g[j] + b[j];
            }
        }
        let needs = self.node(x).needs_grad || self.node(gamma).needs_grad || self.node(beta).needs_grad;
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * std_normal_cdf(x)).collect();
        let needs = self.node(a).needs_grad;
        self.push(self.shape(a).to_vec(), value, Op::Gelu { a: a.0 }, needs)
    }

    /// 3x3 cross-correlation with padding 1 on NHWC input.
    /// `kernel` is `[3, 3, c_in, c_out]`, `bias` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let [b, h, w, cin] = xs[..] else {
            return Err(shape_err(format!("conv2d input must be [b,h,w,c], got {xs:?}")));
        };
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != cin {
            return Err(shape_err(format!("conv2d kernel {ks:?} does not match input {xs:?}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(shape_err(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let cout = ks[3];
        if self.shape(bias) != [cout] {
            return Err(shape_err(format!("conv2d bias {:?} for {cout} output channels", self.shape(bias))));
        }
        let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let patch = 9 * cin;
        let rows = b * oh * ow;
        let src = &self.node(x).value;
        let mut cols = vec![0.0; rows * patch];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = (bi * oh + oy) * ow + ox;
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((bi * h + iy as usize) * w + ix as usize) * cin;
                            let d = (ky * 3 + kx) * cin;
                            dst[d..d + cin].copy_from_slice(&src[s..s + cin]);
                        }
                    }
                }
            }
        }
        let mut value = vec![0.0; rows * cout];
        {
            let bv = &self.node(bias).value;
            for r in 0..rows {
                value[r * cout..(r + 1) * cout].copy_from_slice(bv);
            }
            gemm(rows, patch, cout, &cols, (patch, 1), &self.node(kernel).value, (cout, 1), &mut value, 1.0);
        }
        let needs = self.node(x).needs_grad || self.node(kernel).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(
            vec![b, oh, ow, cout],
            value,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                cols,
                in_shape: [b, h, w, cin],
                stride,
                out_hw: (oh, ow),
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, classes] = shape[..] else {
            return Err(shape_err(format!("cross_entropy needs [batch, classes], got {shape:?}")));
        };
        if labels.len() != b {
            return Err(shape_err(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(LslaError::LabelOutOfRange { label, classes });
        }
        let src = &self.node(logits).value;
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for j in 0..classes {
                probs[i * classes + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss / b as f64],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(shape_err(format!("mean over axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(a).value;
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        value.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.node(a).needs_grad;
        Ok(self.push(out_shape, value, Op::MeanAxis { a: a.0, outer, len, inner }, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.node(a).needs_grad;
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, needs)
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let din = *shape.last().expect("tensors have rank >= 1");
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != din {
            return Err(shape_err(format!("linear weight {ws:?} for input {shape:?}")));
        }
        let rows = numel(&shape) / din;
        let flat = self.reshape(x, &[rows, din])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Back-propagates from a scalar `target`. Gradients from any earlier
    /// call are discarded first.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(shape_err(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(target)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[target.0] = Some(vec![1.0]);
        for i in (0..=target.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                a_map,
                b_map,
            } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                let ia = |j: usize| a_map.as_ref().map_or(j, |m| m[j]);
                let ib = |j: usize| b_map.as_ref().map_or(j, |m| m[j]);
                if nodes[a].needs_grad {
                    add_into(&mut grads[a], va.len(), |ga| {
                        for (j, &gj) in g.iter().enumerate() {
                            ga[ia(j)] += match kind {
                                BinKind::Add => gj,
                                BinKind::Mul => gj * vb[ib(j)],
                            };
                        }
                    });
                }
                if nodes[b].needs_grad {
                    add_into(&mut grads[b], vb.len(), |gb| {
                        for (j, &gj) in g.iter().enumerate() {
                            gb[ib(j)] += match kind {
                                BinKind::Add => gj,
                                BinKind::Mul => gj * va[ia(j)],
                            };
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                add_into(&mut grads[*a], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
                });
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                m,
                k,
                n,
                a_off,
                b_off,
            } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                if nodes[a].needs_grad {
                    // dA = dC @ B'^T
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    add_into(&mut grads[a], va.len(), |ga| {
                        for (bi, (&ao, &bo)) in a_off.iter().zip(b_off).enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                (n, 1),
                                &vb[bo..bo + k * n],
                                bt,
                                &mut ga[ao..ao + m * k],
                                1.0,
                            );
                        }
                    });
                }
                if nodes[b].needs_grad {
                    add_into(&mut grads[b], vb.len(), |gb| {
                        for (bi, (&ao, &bo)) in a_off.iter().zip(b_off).enumerate() {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let av = &va[ao..ao + m * k];
                            if *trans_b {
                                // dB[n,k] = dC^T @ A
                                gemm(n, m, k, gc, (1, n), av, (k, 1), &mut gb[bo..bo + k * n], 1.0);
                            } else {
                                // dB[k,n] = A^T @ dC
                                gemm(k, m, n, av, (1, k), gc, (n, 1), &mut gb[bo..bo + k * n], 1.0);
                            }
                        }
                    });
                }
            }
            Op::Gather { a, index } => {
                let len = nodes[*a].value.len();
                add_into(&mut grads[*a], len, |ga| {
                    for (&src, &gj) in index.iter().zip(g) {
                        ga[src] += gj;
                    }
                });
            }
            Op::Reshape { a } => {
                add_into(&mut grads[*a], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Softmax { a, d } => {
                let y = &node.value;
                add_into(&mut grads[*a], y.len(), |ga| {
                    for ((yr, gr), dr) in y.chunks(*d).zip(g.chunks(*d)).zip(ga.chunks_mut(*d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..*d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gv = &nodes[*gamma].value;
                if nodes[*x].needs_grad {
                    add_into(&mut grads[*x], xhat.len(), |gx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xr[j];
                            }
                            mean_dxh /= d as f64;
                            mean_dxh_xh /= d as f64;
                            for j in 0..d {
                                let dxh = gr[j] * gv[j];
                                gx[r * d + j] += rs * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                            }
                        }
                    });
                }
                if nodes[*gamma].needs_grad {
                    add_into(&mut grads[*gamma], d, |gg| {
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if nodes[*beta].needs_grad {
                    add_into(&mut grads[*beta], d, |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                let xv = &nodes[*a].value;
                add_into(&mut grads[*a], xv.len(), |ga| {
                    for ((o, &x), &gj) in ga.iter_mut().zip(xv).zip(g) {
                        *o += gj * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                cols,
                in_shape,
                stride,
                out_hw,
            } => {
                let [b, h, w, cin] = *in_shape;
                let (oh, ow) = *out_hw;
                let patch = 9 * cin;
                let rows = b * oh * ow;
                let cout = g.len() / rows;
                if nodes[*kernel].needs_grad {
                    add_into(&mut grads[*kernel], patch * cout, |gk| {
                        gemm(patch, rows, cout, cols, (1, patch), g, (cout, 1), gk, 1.0);
                    });
                }
                if nodes[*bias].needs_grad {
                    add_into(&mut grads[*bias], cout, |gb| {
                        for gr in g.chunks(cout) {
                            gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                if nodes[*x].needs_grad {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, cout, patch, g, (cout, 1), &nodes[*kernel].value, (1, cout), &mut dcols, 0.0);
                    add_into(&mut grads[*x], b * h * w * cin, |gx| {
                        for bi in 0..b {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let r = (bi * oh + oy) * ow + ox;
                                    let src = &dcols[r * patch..(r + 1) * patch];
                                    for ky in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3 {
                                            let ix = (ox * stride + kx) as isize - 1;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let dst = ((bi * h + iy as usize) * w + ix as usize) * cin;
                                            let s = (ky * 3 + kx) * cin;
                                            for c in 0..cin {
                                                gx[dst + c] += src[s + c];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let classes = probs.len() / b;
                let scale = g[0] / b as f64;
                add_into(&mut grads[*logits], probs.len(), |gl| {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[i * classes + j] += scale * (probs[i * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                add_into(&mut grads[*a], outer * len * inner, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let len = nodes[*a].value.len();
                add_into(&mut grads[*a], len, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 3]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 3]), None);
        assert_eq!(broadcast_map(&[2, 3], &[3]).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]).unwrap(), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_matches_transpose() {
        let mut tape = Tape::new();
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let v = tape.constant(&t);
        let p = tape.permute(v, &[1, 0]).unwrap();
        assert_eq!(tape.tensor(p), t.transpose2().unwrap());
        assert!(tape.permute(v, &[0, 0]).is_err());
    }

    #[test]
    fn grads_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[1], vec![3.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
