//! Differentiable kernels recorded on a [`Tape`].

use std::ops::Range;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, a.shape(), b.shape());
    }
    Ok(())
}

fn matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => dim_err(op, other, &[0, 0]),
    }
}

// ---------------------------------------------------------------- matmul

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Scalar> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Grads<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (x[0], x[1]);
        let da = wants[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            // dA = dC · op(B)ᵀ
            T::gemm(m, n, k, g.data(), false, b.data(), !self.trans_b, &mut out, false);
            Tensor::new(a.shape(), out).expect("matmul grad shape")
        });
        let db = wants[1].then(|| {
            let mut out = vec![T::zero(); k * n];
            if self.trans_b {
                // B stored n×k: dB = dCᵀ · A
                T::gemm(n, m, k, g.data(), true, a.data(), false, &mut out, false);
            } else {
                T::gemm(k, m, n, a.data(), true, g.data(), false, &mut out, false);
            }
            Tensor::new(b.shape(), out).expect("matmul grad shape")
        });
        Ok(vec![da, db])
    }
}

// ------------------------------------------------------------ elementwise

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl<T: Scalar> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        }
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Grads<T> {
        let (a, b) = (x[0], x[1]);
        let zero = T::zero();
        let (ga, gb) = match self {
            Binary::Add => (g.clone(), g.clone()),
            Binary::Sub => (g.clone(), g.map(|v| -v)),
            Binary::Mul => (g.zip_map(b, |g, b| g * b), g.zip_map(a, |g, a| g * a)),
            Binary::Div => {
                let ga = g.zip_map(b, |g, b| g / b);
                let q = a.zip_map(b, |a, b| a / (b * b));
                (ga, g.zip_map(&q, |g, q| -g * q))
            }
            // ties route the gradient to the first operand
            Binary::Max => {
                let first = a.zip_map(b, |a, b| if a >= b { T::one() } else { zero });
                (
                    g.zip_map(&first, |g, f| g * f),
                    g.zip_map(&first, |g, f| g * (T::one() - f)),
                )
            }
            Binary::Min => {
                let first = a.zip_map(b, |a, b| if a <= b { T::one() } else { zero });
                (
                    g.zip_map(&first, |g, f| g * f),
                    g.zip_map(&first, |g, f| g * (T::one() - f)),
                )
            }
        };
        Ok(vec![wants[0].then_some(ga), wants[1].then_some(gb)])
    }
}

struct AddBias {
    rows: usize,
}

impl<T: Scalar> Backward<T> for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Grads<T> {
        let db = wants[1].then(|| {
            let cols = x[1].numel();
            let mut acc = vec![T::zero(); cols];
            for r in 0..self.rows {
                for (a, &v) in acc.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                    *a += v;
                }
            }
            Tensor::new(x[1].shape(), acc).expect("bias grad shape")
        });
        Ok(vec![wants[0].then(|| g.clone()), db])
    }
}

#[derive(Clone, Copy)]
enum Unary<T> {
    Scale(T),
    Shift,
    Relu,
    Sigmoid,
    SmoothL1(T),
}

impl<T: Scalar> Backward<T> for Unary<T> {
    fn name(&self) -> &'static str {
        match self {
            Unary::Scale(_) => "scale",
            Unary::Shift => "add_scalar",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::SmoothL1(_) => "smooth_l1",
        }
    }

    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let zero = T::zero();
        let gx = match *self {
            Unary::Scale(s) => g.map(|v| v * s),
            Unary::Shift => g.clone(),
            Unary::Relu => g.zip_map(x[0], |g, x| if x > zero { g } else { zero }),
            Unary::Sigmoid => g.zip_map(y, |g, y| g * y * (T::one() - y)),
            Unary::SmoothL1(beta) => g.zip_map(x[0], |g, d| {
                if d.abs() < beta {
                    g * d / beta
                } else {
                    g * d.signum()
                }
            }),
        };
        Ok(vec![Some(gx)])
    }
}

// ------------------------------------------------------------ reductions

struct Sum {
    scale: f64,
}

impl<T: Scalar> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        if self.scale == 1.0 {
            "sum"
        } else {
            "mean"
        }
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let v = g.data()[0] * T::of(self.scale);
        Ok(vec![Some(Tensor::full(x[0].shape(), v))])
    }
}

struct MaskedMeanRows {
    weights: Vec<f64>,
}

impl<T: Scalar> Backward<T> for MaskedMeanRows {
    fn name(&self) -> &'static str {
        "masked_mean_rows"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let cols = g.numel();
        let mut out = Tensor::zeros(x[0].shape());
        for (r, &w) in self.weights.iter().enumerate() {
            let w = T::of(w);
            for (o, &gv) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(g.data()) {
                *o = gv * w;
            }
        }
        Ok(vec![Some(out)])
    }
}

struct MaskedMaxRows {
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaskedMaxRows {
    fn name(&self) -> &'static str {
        "masked_max_rows"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let cols = g.numel();
        let mut out = Tensor::zeros(x[0].shape());
        for (c, &r) in self.argmax.iter().enumerate() {
            out.data_mut()[r * cols + c] = g.data()[c];
        }
        Ok(vec![Some(out)])
    }
}

// ------------------------------------------------------- normalization

struct Softmax {
    cols: usize,
}

impl<T: Scalar> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let mut out = Tensor::zeros(y.shape());
        let c = self.cols;
        for ((yr, gr), or) in y
            .data()
            .chunks(c)
            .zip(g.data().chunks(c))
            .zip(out.data_mut().chunks_mut(c))
        {
            let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
            for ((o, &y), &g) in or.iter_mut().zip(yr).zip(gr) {
                *o = y * (g - dot);
            }
        }
        Ok(vec![Some(out)])
    }
}

struct LayerNorm<T> {
    cols: usize,
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNorm<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Grads<T> {
        let c = self.cols;
        let gamma = x[1].data();
        let mut dx = Tensor::zeros(x[0].shape());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let n = T::of(c as f64);
        for (r, ((xh, gr), dr)) in self
            .normalized
            .chunks(c)
            .zip(g.data().chunks(c))
            .zip(dx.data_mut().chunks_mut(c))
            .enumerate()
        {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..c {
                let d = gr[j] * gamma[j];
                mean_d += d;
                mean_dx += d * xh[j];
                dgamma[j] += gr[j] * xh[j];
                dbeta[j] += gr[j];
            }
            mean_d /= n;
            mean_dx /= n;
            let s = self.inv_std[r];
            for j in 0..c {
                dr[j] = s * (gr[j] * gamma[j] - mean_d - xh[j] * mean_dx);
            }
        }
        Ok(vec![
            wants[0].then_some(dx),
            wants[1].then(|| Tensor::new(x[1].shape(), dgamma).expect("gamma shape")),
            wants[2].then(|| Tensor::new(x[2].shape(), dbeta).expect("beta shape")),
        ])
    }
}

// -------------------------------------------------------------- layout

struct Transpose;

impl<T: Scalar> Backward<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(transpose2(g))])
    }
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose shape")
}

/// `outer × extent × inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Concat {
    axis: usize,
    extents: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, x: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, wants: &[bool]) -> Grads<T> {
        let (outer, total, inner) = split_axis(y.shape(), self.axis);
        let mut offset = 0;
        let mut grads = Vec::with_capacity(x.len());
        for (i, &ext) in self.extents.iter().enumerate() {
            if wants[i] {
                let mut out = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    out.extend_from_slice(&g.data()[base..base + ext * inner]);
                }
                grads.push(Some(Tensor::new(x[i].shape(), out)?));
            } else {
                grads.push(None);
            }
            offset += ext;
        }
        Ok(grads)
    }
}

struct Slice {
    axis: usize,
    range: Range<usize>,
}

impl<T: Scalar> Backward<T> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let (outer, total, inner) = split_axis(x[0].shape(), self.axis);
        let ext = self.range.len();
        let mut out = Tensor::zeros(x[0].shape());
        for o in 0..outer {
            let dst = (o * total + self.range.start) * inner;
            let src = o * ext * inner;
            out.data_mut()[dst..dst + ext * inner]
                .copy_from_slice(&g.data()[src..src + ext * inner]);
        }
        Ok(vec![Some(out)])
    }
}

struct Reshape;

impl<T: Scalar> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        Ok(vec![Some(g.clone().reshape(x[0].shape())?)])
    }
}

struct Embedding {
    ids: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Embedding {
    fn name(&self) -> &'static str {
        "embedding_lookup"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let d = x[0].shape()[1];
        let mut out = Tensor::zeros(x[0].shape());
        for (r, &id) in self.ids.iter().enumerate() {
            for (o, &v) in out.data_mut()[id * d..(id + 1) * d]
                .iter_mut()
                .zip(&g.data()[r * d..(r + 1) * d])
            {
                *o += v;
            }
        }
        Ok(vec![Some(out)])
    }
}

struct Dropout<T> {
    keep: Vec<T>,
}

impl<T: Scalar> Backward<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Grads<T> {
        let data = g.data().iter().zip(&self.keep).map(|(&g, &k)| g * k).collect();
        Ok(vec![Some(Tensor::new(y.shape(), data)?)])
    }
}

// ----------------------------------------------------------- public API

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let name = <Binary as Backward<T>>::name(&op);
        same_shape(name, x, y)?;
        let out = match op {
            Binary::Add => x.zip_map(y, |a, b| a + b),
            Binary::Sub => x.zip_map(y, |a, b| a - b),
            Binary::Mul => x.zip_map(y, |a, b| a * b),
            Binary::Div => x.zip_map(y, |a, b| a / b),
            Binary::Max => x.zip_map(y, |a, b| if a >= b { a } else { b }),
            Binary::Min => x.zip_map(y, |a, b| if a <= b { a } else { b }),
        };
        Ok(self.record(out, &[a, b], op))
    }

    fn unary(&mut self, a: Var, op: Unary<T>) -> Var {
        let zero = T::zero();
        let out = match op {
            Unary::Scale(s) => self.value(a).map(|x| x * s),
            Unary::Shift => unreachable!("shift carries its offset separately"),
            Unary::Relu => self.value(a).map(|x| if x > zero { x } else { zero }),
            Unary::Sigmoid => self.value(a).map(|x| T::one() / (T::one() + (-x).exp())),
            Unary::SmoothL1(beta) => self.value(a).map(|d| {
                let half = T::of(0.5);
                if d.abs() < beta {
                    half * d * d / beta
                } else {
                    d.abs() - half * beta
                }
            }),
        };
        self.record(out, &[a], op)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = matrix("matmul", x)?;
        let (kb, n) = match matrix("matmul", y)? {
            (r, c) if trans_b => (c, r),
            rc => rc,
        };
        if k != kb {
            return dim_err("matmul", x.shape(), y.shape());
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, x.data(), false, y.data(), trans_b, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.record(out, &[a, b], MatMul { m, k, n, trans_b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        matrix("transpose", self.value(a))?;
        let out = transpose2(self.value(a));
        Ok(self.record(out, &[a], Transpose))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    /// Adds a bias vector of length `n` to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let (rows, cols) = x.dims2()?;
        if b.numel() != cols {
            return dim_err("add_bias", x.shape(), b.shape());
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &v) in row.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        Ok(self.record(out, &[a, bias], AddBias { rows }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Unary::Scale(T::of(s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        self.record(out, &[a], Unary::<T>::Shift)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// Element-wise Huber-style penalty: `0.5 d²/β` inside `|d| < β`,
    /// `|d| − 0.5 β` outside.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::Contract(format!("smooth-l1 beta must be > 0, got {beta}")));
        }
        Ok(self.unary(a, Unary::SmoothL1(T::of(beta))))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, &[a], Sum { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let scale = 1.0 / x.numel() as f64;
        let out = Tensor::scalar(x.sum() * T::of(scale));
        self.record(out, &[a], Sum { scale })
    }

    /// Mean over the rows of `a[m×n]` whose mask entry is true, as `[1×n]`.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if mask.len() != rows {
            return dim_err("masked_mean_rows", x.shape(), &[mask.len()]);
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidMask("pooling over an all-masked sequence".into()));
        }
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let mut out = vec![T::zero(); cols];
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let w = T::of(w);
            for (o, &v) in out.iter_mut().zip(x.row(r)) {
                *o += v * w;
            }
        }
        let out = Tensor::new(&[1, cols], out)?;
        Ok(self.record(out, &[a], MaskedMeanRows { weights }))
    }

    /// Column-wise max over the unmasked rows of `a[m×n]`, as `[1×n]`.
    pub fn masked_max_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2()?;
        if mask.len() != rows {
            return dim_err("masked_max_rows", x.shape(), &[mask.len()]);
        }
        let Some(first) = mask.iter().position(|&m| m) else {
            return Err(Error::InvalidMask("pooling over an all-masked sequence".into()));
        };
        let mut argmax = vec![first; cols];
        let mut out = x.row(first).to_vec();
        for r in first + 1..rows {
            if !mask[r] {
                continue;
            }
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let out = Tensor::new(&[1, cols], out)?;
        Ok(self.record(out, &[a], MaskedMaxRows { argmax }))
    }

    /// Softmax over the last axis. `mask` is either one flag per column
    /// (applied to every row) or one flag per element; `false` entries get
    /// exactly zero weight.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().expect("tensors have rank >= 1");
        if let Some(m) = mask {
            if m.len() != cols && m.len() != x.numel() {
                return dim_err("softmax", x.shape(), &[m.len()]);
            }
        }
        let keep = |r: usize, c: usize| match mask {
            None => true,
            Some(m) if m.len() == cols => m[c],
            Some(m) => m[r * cols + c],
        };
        let mut out = Tensor::zeros(x.shape());
        for (r, (xr, or)) in x
            .data()
            .chunks(cols)
            .zip(out.data_mut().chunks_mut(cols))
            .enumerate()
        {
            let mut max = T::neg_infinity();
            for (c, &v) in xr.iter().enumerate() {
                if keep(r, c) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::InvalidMask(format!("softmax row {r} is fully masked")));
            }
            let mut total = T::zero();
            for (c, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
                if keep(r, c) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.record(out, &[a], Softmax { cols }))
    }

    /// Normalizes each row of `a[m×n]` to zero mean and unit variance, then
    /// applies `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (_, cols) = x.dims2()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != cols || b.numel() != cols {
            return dim_err("layer_norm", x.shape(), g.shape());
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be > 0".into()));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let mut normalized = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * s;
                normalized.push(xh);
                out.push(xh * g.data()[j] + b.data()[j]);
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let op = LayerNorm {
            cols,
            normalized,
            inv_std,
        };
        Ok(self.record(out, &[a, gamma, beta], op))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err("concat", &first, s);
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&p, &ext) in parts.iter().zip(&extents) {
                let base = o * ext * inner;
                out.extend_from_slice(&self.value(p).data()[base..base + ext * inner]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.record(out, parts, Concat { axis, extents }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || range.start >= range.end || range.end > x.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice {range:?} on axis {axis} out of bounds for {:?}",
                x.shape()
            )));
        }
        let (outer, total, inner) = split_axis(x.shape(), axis);
        let ext = range.len();
        let mut out = Vec::with_capacity(outer * ext * inner);
        for o in 0..outer {
            let base = (o * total + range.start) * inner;
            out.extend_from_slice(&x.data()[base..base + ext * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = ext;
        let out = Tensor::new(&shape, out)?;
        Ok(self.record(out, &[a], Slice { axis, range }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.record(out, &[a], Reshape))
    }

    /// Gathers rows `ids` of `table[V×d]` into `[len(ids)×d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = matrix("embedding_lookup", t)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of an empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.record(out, &[table], Embedding { ids: ids.to_vec() }))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`; otherwise the
    /// input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(out, &[a], Dropout { keep }))
    }
}
