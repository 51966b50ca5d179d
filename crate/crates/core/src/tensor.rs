//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! The op set is fixed to what the network needs: same-padded 1-D
//! cross-correlation, affine layers, SiLU, element-wise addition, mean
//! pooling over rows, reshapes, and a fused softmax + cross-entropy loss.
//! Every node is appended to the tape after its inputs, so walking the tape
//! from the end is a reverse topological traversal.

use crate::error::{Error, Result};

/// Row-major dense tensor with positive extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor needs at least one axis".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Empty(format!("zero-length axis in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Zero tensor. Panics if any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
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
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MeanPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of executed operations. Confined to one thread; build a fresh tape
/// per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators, one per tape node, shaped like the node values.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.grads[v.0].shape.clone();
        std::mem::replace(&mut self.grads[v.0], Tensor::zeros(&shape))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Softmax of one row, shifted by the row max.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

// acc[t] += w * src[t + shift] over the overlapping range, zero elsewhere.
#[inline]
fn axpy_shifted(acc: &mut [f64], src: &[f64], w: f64, shift: isize) {
    let len = acc.len();
    if shift >= 0 {
        let s = shift as usize;
        if s >= len {
            return;
        }
        for (a, x) in acc[..len - s].iter_mut().zip(&src[s..]) {
            *a += w * x;
        }
    } else {
        let s = (-shift) as usize;
        if s >= len {
            return;
        }
        for (a, x) in acc[s..].iter_mut().zip(&src[..len - s]) {
            *a += w * x;
        }
    }
}

// sum_t g[t] * x[t + shift] over the overlapping range.
#[inline]
fn dot_shifted(g: &[f64], x: &[f64], shift: isize) -> f64 {
    let len = g.len();
    if shift >= 0 {
        let s = shift as usize;
        if s >= len {
            return 0.0;
        }
        g[..len - s].iter().zip(&x[s..]).map(|(a, b)| a * b).sum()
    } else {
        let s = (-shift) as usize;
        if s >= len {
            return 0.0;
        }
        g[s..].iter().zip(&x[..len - s]).map(|(a, b)| a * b).sum()
    }
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    k: usize,
}

fn conv_dims(input: &[usize], kernels: &[usize], bias: &[usize]) -> Result<ConvDims> {
    let (batch, c_in, len) = match *input {
        [c, l] => (1, c, l),
        [b, c, l] => (b, c, l),
        _ => return Err(Error::Shape(format!(
            "conv1d input must be [channels, length] or [batch, channels, length], got {input:?}"
        ))),
    };
    let [c_out, kc_in, k] = *kernels else {
        return Err(Error::Shape(format!(
            "conv1d kernels must be [out, in, k], got {kernels:?}"
        )));
    };
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv1d kernel size must be odd, got {k}"
        )));
    }
    if kc_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d kernels expect {kc_in} input channels, input has {c_in}"
        )));
    }
    if bias != [c_out] {
        return Err(Error::Shape(format!(
            "conv1d bias must be [{c_out}], got {bias:?}"
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        len,
        k,
    })
}

fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let pad = (d.k / 2) as isize;
    let mut out = vec![0.0; d.batch * d.c_out * d.len];
    for bi in 0..d.batch {
        for o in 0..d.c_out {
            let row = &mut out[(bi * d.c_out + o) * d.len..][..d.len];
            row.fill(b[o]);
            for i in 0..d.c_in {
                let xr = &x[(bi * d.c_in + i) * d.len..][..d.len];
                let wk = &w[(o * d.c_in + i) * d.k..][..d.k];
                for (j, &wj) in wk.iter().enumerate() {
                    axpy_shifted(row, xr, wj, j as isize - pad);
                }
            }
        }
    }
    out
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{what}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same-padded 1-D cross-correlation. Input is `[c_in, L]` or
    /// `[batch, c_in, L]`; kernels `[c_out, c_in, k]` with `k` odd.
    pub fn conv1d_same(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let xv = self.value(input);
        let wv = self.value(kernels);
        let bv = self.value(bias);
        let d = conv_dims(xv.shape(), wv.shape(), bv.shape())?;
        let out = conv1d_forward(xv.data(), wv.data(), bv.data(), &d);
        let shape = if xv.shape().len() == 2 {
            vec![d.c_out, d.len]
        } else {
            vec![d.batch, d.c_out, d.len]
        };
        let value = Tensor { shape, data: out };
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernels,
                bias,
            },
        ))
    }

    /// `input [n, d_in] · weight [d_in, d_out] + bias [d_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, d_in] = *x.shape() else {
            return Err(Error::Shape(format!(
                "linear input must be [n, d_in], got {:?}",
                x.shape()
            )));
        };
        let [w_in, d_out] = *w.shape() else {
            return Err(Error::Shape(format!(
                "linear weight must be [d_in, d_out], got {:?}",
                w.shape()
            )));
        };
        if w_in != d_in {
            return Err(Error::Shape(format!(
                "linear: input width {d_in} does not match weight rows {w_in}"
            )));
        }
        if b.shape() != [d_out] {
            return Err(Error::Shape(format!(
                "linear bias must be [{d_out}], got {:?}",
                b.shape()
            )));
        }
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            let row = &mut out[r * d_out..][..d_out];
            row.copy_from_slice(b.data());
            for (i, &xi) in x.data()[r * d_in..][..d_in].iter().enumerate() {
                for (o, wv) in row.iter_mut().zip(&w.data()[i * d_out..][..d_out]) {
                    *o += xi * wv;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, d_out],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| silu_scalar(v)).collect(),
        };
        self.push(value, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        check_same(av.shape(), bv.shape(), "elementwise add")?;
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Column means: `[n, d] -> [d]`, or per batch entry `[b, n, d] -> [b, d]`.
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (batch, n, d, out_shape) = match *xv.shape() {
            [n, d] => (1, n, d, vec![d]),
            [b, n, d] => (b, n, d, vec![b, d]),
            _ => {
                return Err(Error::Shape(format!(
                    "mean_pool_rows expects [n, d] or [b, n, d], got {:?}",
                    xv.shape()
                )))
            }
        };
        let inv = 1.0 / n as f64;
        let mut out = vec![0.0; batch * d];
        for bi in 0..batch {
            let acc = &mut out[bi * d..][..d];
            for r in 0..n {
                for (a, v) in acc.iter_mut().zip(&xv.data[(bi * n + r) * d..][..d]) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor {
            shape: out_shape,
            data: out,
        };
        Ok(self.push(value, Op::MeanPool { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Mean softmax cross-entropy over the rows of `logits [n, K]` against
    /// one-hot `labels [n, K]`. Produces a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = *lv.shape() else {
            return Err(Error::Shape(format!(
                "logits must be [n, K], got {:?}",
                lv.shape()
            )));
        };
        if k < 2 {
            return Err(Error::Config(format!(
                "cross-entropy needs K >= 2, got {k}"
            )));
        }
        check_same(lv.shape(), labels.shape(), "cross-entropy labels")?;
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = &lv.data[r * k..][..k];
            let y = &labels.data[r * k..][..k];
            let ones = y.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("label row {r} is not one-hot: {y:?}")));
            }
            let lse = log_sum_exp(row);
            let target = y.iter().position(|&v| v == 1.0).unwrap_or(0);
            loss += lse - row[target];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        loss /= n as f64;
        let targets = labels.data.clone();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            },
        ))
    }

    /// Softmax probabilities cached by a cross-entropy node.
    pub fn probabilities(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Propagates d(output)/d(node) for every node, seeding the scalar
    /// `output` with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[output.0].data[0] = 1.0;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut grads[idx], Tensor::zeros(&[1]));
            if g.data.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = g;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Tensor]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernels,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernels);
                let d = conv_dims(x.shape(), w.shape(), self.value(*bias).shape())
                    .expect("validated in forward");
                let pad = (d.k / 2) as isize;
                let mut dx = std::mem::take(&mut grads[input.0].data);
                let mut dw = std::mem::take(&mut grads[kernels.0].data);
                let mut db = std::mem::take(&mut grads[bias.0].data);
                for bi in 0..d.batch {
                    for o in 0..d.c_out {
                        let gr = &g.data[(bi * d.c_out + o) * d.len..][..d.len];
                        db[o] += gr.iter().sum::<f64>();
                        for i in 0..d.c_in {
                            let off = (bi * d.c_in + i) * d.len;
                            let xr = &x.data[off..][..d.len];
                            let woff = (o * d.c_in + i) * d.k;
                            for j in 0..d.k {
                                let s = j as isize - pad;
                                dw[woff + j] += dot_shifted(gr, xr, s);
                                // dx[t + s] += w * g[t]
                                axpy_shifted_rev(&mut dx[off..][..d.len], gr, w.data[woff + j], s);
                            }
                        }
                    }
                }
                grads[input.0].data = dx;
                grads[kernels.0].data = dw;
                grads[bias.0].data = db;
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d_in) = (x.shape[0], x.shape[1]);
                let d_out = w.shape[1];
                for r in 0..n {
                    let gr = &g.data[r * d_out..][..d_out];
                    let xr = &x.data[r * d_in..][..d_in];
                    for (db, gv) in grads[bias.0].data.iter_mut().zip(gr) {
                        *db += gv;
                    }
                    for i in 0..d_in {
                        let wr = &w.data[i * d_out..][..d_out];
                        let dot: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        grads[input.0].data[r * d_in + i] += dot;
                        let xi = xr[i];
                        for (dw, gv) in grads[weight.0].data[i * d_out..][..d_out]
                            .iter_mut()
                            .zip(gr)
                        {
                            *dw += xi * gv;
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                for ((dx, &xi), gv) in grads[x.0].data.iter_mut().zip(&xv.data).zip(&g.data) {
                    *dx += gv * silu_grad_scalar(xi);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    for (d, gv) in grads[v.0].data.iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                }
            }
            Op::MeanPool { x } => {
                let shape = &self.value(*x).shape;
                let (batch, n, d) = match shape[..] {
                    [n, d] => (1, n, d),
                    [b, n, d] => (b, n, d),
                    _ => unreachable!("validated in forward"),
                };
                let inv = 1.0 / n as f64;
                let dx = &mut grads[x.0].data;
                for bi in 0..batch {
                    let gr = &g.data[bi * d..][..d];
                    for r in 0..n {
                        for (dv, gv) in dx[(bi * n + r) * d..][..d].iter_mut().zip(gr) {
                            *dv += gv * inv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                for (d, gv) in grads[x.0].data.iter_mut().zip(&g.data) {
                    *d += gv;
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let n = self.value(*logits).shape[0] as f64;
                let scale = g.data[0] / n;
                for ((d, p), y) in grads[logits.0].data.iter_mut().zip(probs).zip(targets) {
                    *d += scale * (p - y);
                }
            }
        }
    }
}

// acc[t + shift] += w * g[t] over the overlapping range.
#[inline]
fn axpy_shifted_rev(acc: &mut [f64], g: &[f64], w: f64, shift: isize) {
    axpy_shifted(acc, g, w, -shift);
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter tensor, flat index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences `(f(θ+h) - f(θ-h)) / 2h` for every coordinate of `params`.
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(mut f: F, params: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (v0, analytic) = f(params)?;
    if !v0.is_finite() {
        return Err(Error::Numeric(format!("function value {v0} is not finite")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients returned for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (g, p) in analytic.iter().zip(params) {
        check_same(g.shape(), p.shape(), "gradient vs parameter")?;
    }
    let mut work = params.to_vec();
    let mut best = GradCheck {
        max_rel_error: f64::NEG_INFINITY,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + step;
            let (plus, _) = f(&work)?;
            work[pi].data[ci] = orig - step;
            let (minus, _) = f(&work)?;
            work[pi].data[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite evaluation perturbing parameter {pi}[{ci}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data[ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > best.max_rel_error {
                best = GradCheck {
                    max_rel_error: rel,
                    worst: (pi, ci),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    best.max_rel_error = best.max_rel_error.max(0.0);
    Ok(best)
}
