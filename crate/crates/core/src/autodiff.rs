//! Reverse-mode automatic differentiation over tensors.
//!
//! A [`Tape`] records every operation as a node that refers to earlier nodes
//! only, so node order is a topological order and [`Tape::backward`] is a
//! single reverse sweep. Gradients accumulate in a fixed order, which makes
//! identical tapes produce bitwise-identical gradients.
//!
//! The op set is what the networks need: elementwise arithmetic, `relu_pow`,
//! `softmax` and `cumsum` for knot logits, batched contractions, min–max
//! normalization, a fused sparse B-spline layer and the knot-dependent
//! change-of-basis matrix. ReLU-type derivatives are zero at the kink.

use crate::cob::ChangeOfBasis;
use crate::error::{shape_err, KanError, Result};
use crate::spline::{trunc_power, trunc_power_deriv, KnotVector, MAX_ORDER};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-column affine map `y = scale * x + shift` recorded by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// Columns that were constant and mapped to the midpoint.
    pub degenerate: Vec<bool>,
}

impl ColumnAffine {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let p = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % p;
            *v = self.scale[j] * *v + self.shift[j];
        }
        out
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Affine(usize, f64),
    ReluPow(usize, u32),
    Softmax(usize),
    Cumsum(usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Sum(usize),
    Mse { pred: usize, residual: Vec<f64> },
    Contract { feats: usize, weights: usize },
    Mode3 { w: usize, a: usize },
    ShiftOuter { x: usize, t: usize },
    SubColumns { x: usize, t: usize },
    SplineLayer(Box<SplineCache>),
    CobMatrix { knots: usize, jac: Vec<f64> },
    Normalize { x: usize, affine: ColumnAffine, argmin: Vec<usize>, argmax: Vec<usize>, span: f64 },
    ColumnAffine { x: usize, scale: Vec<f64> },
}

struct SplineCache {
    x: usize,
    w: usize,
    order: usize,
    first: Vec<u32>,
    vals: Vec<f64>,
    ders: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not depend on any parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v` as a flat vector, zeros if it received none.
    pub fn flat(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a.0, c), rg)
    }

    /// `scale * x + shift` elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(v, Op::Affine(a.0, scale), rg)
    }

    /// `max(x, 0)^k` elementwise, `k >= 1`.
    pub fn relu_pow(&mut self, a: Var, k: u32) -> Result<Var> {
        if k < 1 {
            return Err(KanError::InvalidArgument {
                what: "relu_pow exponent",
                value: k.to_string(),
            });
        }
        let order = k as usize + 1;
        let v = self.value(a).map(|x| trunc_power(x, 0.0, order));
        let rg = self.rg(a);
        Ok(self.push(v, Op::ReluPow(a.0, k), rg))
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(shape_err("softmax", "vector", t.shape()));
        }
        let v = Tensor::vector(crate::spline::softmax(t.data()));
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax(a.0), rg))
    }

    /// Inclusive cumulative sum of a vector.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 {
            return Err(shape_err("cumsum", "vector", t.shape()));
        }
        let mut acc = 0.0;
        let data = t
            .data()
            .iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Cumsum(a.0), rg))
    }

    /// Concatenation of vectors (scalars count as length one).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() > 1 {
                return Err(shape_err("concat", "vector or scalar", t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// `a[start .. start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 1 || start + len > t.len() {
            return Err(shape_err("slice", format!("vector of length >= {}", start + len), t.shape()));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Slice(a.0, start), rg))
    }

    /// Sum of all entries.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("mse", target.shape(), p.shape()));
        }
        let residual: Vec<f64> = p.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / residual.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred: pred.0, residual }, rg))
    }

    /// `y[d, q] = Σ_m F[d, m] W[q, m]` where `m` runs over all trailing axes.
    ///
    /// With `F: D × P × C` and `W: Q × P × C` this is the layer contraction
    /// `Σ_p Σ_i W_qpi φ_i(x_p)`; with `F: D × P`, `W: Q × P` it is `X Wᵀ`.
    pub fn contract(&mut self, feats: Var, weights: Var) -> Result<Var> {
        let (f, w) = (self.value(feats), self.value(weights));
        if f.shape().len() < 2 || f.shape()[1..] != w.shape()[1..] {
            return Err(shape_err("contract", f.shape(), w.shape()));
        }
        let d = f.shape()[0];
        let q = w.shape()[0];
        let m: usize = f.shape()[1..].iter().product();
        let mut out = vec![0.0; d * q];
        gemm(d, m, q, f.data(), m, 1, w.data(), 1, m, &mut out, q, 1, false);
        let rg = self.rg(feats) || self.rg(weights);
        Ok(self.push(
            Tensor::new(vec![d, q], out)?,
            Op::Contract {
                feats: feats.0,
                weights: weights.0,
            },
            rg,
        ))
    }

    /// Mode-3 product `W[q, p, j] = Σ_i W̃[q, p, i] A[i, j]` with dense `A`.
    pub fn mode3(&mut self, w_tilde: Var, a: Var) -> Result<Var> {
        let (w, am) = (self.value(w_tilde), self.value(a));
        let c = *w.shape().last().unwrap_or(&0);
        if w.shape().len() != 3 || am.shape() != [c, c] {
            return Err(shape_err("mode3", format!("[Q, P, C] and [C, C] with C = {c}"), am.shape()));
        }
        let fibers = w.len() / c;
        let mut out = vec![0.0; w.len()];
        gemm(fibers, c, c, w.data(), c, 1, am.data(), c, 1, &mut out, c, 1, false);
        let rg = self.rg(w_tilde) || self.rg(a);
        let shape = w.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mode3 { w: w_tilde.0, a: a.0 }, rg))
    }

    /// `out[d, p, i] = x[d, p] - t[i]`.
    pub fn shift_outer(&mut self, x: Var, t: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(t));
        if xv.shape().len() != 2 || tv.shape().len() != 1 {
            return Err(shape_err("shift_outer", "[D, P] and [K]", (xv.shape(), tv.shape())));
        }
        let (d, p, k) = (xv.rows(), xv.cols(), tv.len());
        let mut out = Vec::with_capacity(d * p * k);
        for &xi in xv.data() {
            out.extend(tv.data().iter().map(|&ti| xi - ti));
        }
        let rg = self.rg(x) || self.rg(t);
        Ok(self.push(Tensor::new(vec![d, p, k], out)?, Op::ShiftOuter { x: x.0, t: t.0 }, rg))
    }

    /// `out[d, p] = x[d, p] - t[p]`.
    pub fn sub_columns(&mut self, x: Var, t: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(t));
        if xv.shape().len() != 2 || tv.shape() != [xv.cols()] {
            return Err(shape_err("sub_columns", [xv.cols()], tv.shape()));
        }
        let p = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v - tv.data()[k % p])
            .collect();
        let rg = self.rg(x) || self.rg(t);
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::SubColumns { x: x.0, t: t.0 }, rg))
    }

    /// Fused B-spline layer on a fixed knot vector:
    /// `y[d, q] = Σ_p Σ_i W[q, p, i] b_i(x[d, p])`.
    ///
    /// Only the `r` possibly nonzero B-splines per input are touched. Inputs
    /// outside `[a, b]` use the truncated-power expansion.
    pub fn spline_layer(&mut self, x: Var, w: Var, kv: &KnotVector) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let c = kv.dim();
        if xv.shape().len() != 2 || wv.shape().len() != 3 || wv.shape()[1] != xv.cols() || wv.shape()[2] != c {
            return Err(shape_err("spline_layer", format!("x [D, P], w [Q, P, {c}]"), (xv.shape(), wv.shape())));
        }
        if xv.has_nan() {
            return Err(KanError::NotANumber("spline layer input"));
        }
        let r = kv.order();
        let (d, p, q) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let mut first = vec![0u32; d * p];
        let mut vals = vec![0.0; d * p * r];
        let need_ders = self.rg(x);
        let mut ders = vec![0.0; if need_ders { d * p * r } else { 0 }];
        let mut outside: Option<ChangeOfBasis> = None;
        for (k, &xi) in xv.data().iter().enumerate() {
            let vs = &mut vals[k * r..(k + 1) * r];
            if kv.contains(xi) {
                if need_ders {
                    let mut bd = [0.0; MAX_ORDER];
                    first[k] = kv.nonzero_basis_with_derivs(xi, vs, &mut bd) as u32;
                    ders[k * r..(k + 1) * r].copy_from_slice(&bd[..r]);
                } else {
                    first[k] = kv.nonzero_basis(xi, vs) as u32;
                }
            } else {
                if outside.is_none() {
                    outside = Some(ChangeOfBasis::for_knots(kv)?);
                }
                let a = outside.as_ref().expect("built above");
                let f = if xi < kv.a() { 0 } else { c - r };
                first[k] = f as u32;
                let psi: Vec<f64> = kv.shifts().iter().map(|&t| trunc_power(xi, t, r)).collect();
                let mut full = vec![0.0; c];
                a.apply_vec(&psi, &mut full);
                vs.copy_from_slice(&full[f..f + r]);
                if need_ders {
                    let dpsi: Vec<f64> = kv.shifts().iter().map(|&t| trunc_power_deriv(xi, t, r)).collect();
                    a.apply_vec(&dpsi, &mut full);
                    ders[k * r..(k + 1) * r].copy_from_slice(&full[f..f + r]);
                }
            }
        }
        let wd = wv.data();
        let mut out = vec![0.0; d * q];
        for di in 0..d {
            let yrow = &mut out[di * q..(di + 1) * q];
            for pi in 0..p {
                let k = di * p + pi;
                let f = first[k] as usize;
                let vs = &vals[k * r..(k + 1) * r];
                for (qi, y) in yrow.iter_mut().enumerate() {
                    let base = (qi * p + pi) * c + f;
                    let ws = &wd[base..base + r];
                    *y += ws.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![d, q], out)?,
            Op::SplineLayer(Box::new(SplineCache {
                x: x.0,
                w: w.0,
                order: r,
                first,
                vals,
                ders,
            })),
            rg,
        ))
    }

    /// Dense change-of-basis matrix `A^[r]` as a differentiable function of
    /// the full extended knot vector (`n + 2r - 1` entries).
    pub fn cob_matrix(&mut self, knots: Var, order: usize) -> Result<Var> {
        let t = self.value(knots).data().to_vec();
        let kcount = t.len();
        if order < 1 || kcount < 2 * order {
            return Err(shape_err("cob_matrix", format!(">= {} knots", 2 * order), kcount));
        }
        let dim = kcount - order;
        // Forward-mode sweep: values and d/dt_k of every band entry.
        let bw = |s: usize| s + 1;
        let mut val = vec![0.0; dim * 2];
        let mut der = vec![0.0; dim * 2 * kcount];
        for i in 0..dim {
            val[i * 2] = 1.0;
            if i + 1 < dim {
                val[i * 2 + 1] = -1.0;
            }
        }
        for s in 2..=order {
            let (pw, nw) = (bw(s - 1), bw(s));
            let get = |v: &[f64], i: usize, j: usize| -> f64 {
                if i >= dim || j < i || j - i >= pw {
                    0.0
                } else {
                    v[i * pw + (j - i)]
                }
            };
            let mut nval = vec![0.0; dim * nw];
            let mut nder = vec![0.0; dim * nw * kcount];
            for i in 0..dim {
                let d1 = t[i + s - 1] - t[i];
                let d2 = t[i + s] - t[i + 1];
                if d1 <= 0.0 || d2 <= 0.0 {
                    return Err(KanError::DegenerateKnots {
                        index: i,
                        left: t[i],
                        right: t[i + s],
                    });
                }
                for j in i..(i + s + 1).min(dim) {
                    let p0 = get(&val, i, j);
                    let p1 = get(&val, i + 1, j);
                    let e = i * nw + (j - i);
                    nval[e] = p0 / d1 - p1 / d2;
                    let o = e * kcount;
                    let has0 = j >= i && j - i < pw;
                    let has1 = i + 1 < dim && j > i && j - (i + 1) < pw;
                    for k in 0..kcount {
                        let mut g = 0.0;
                        if has0 {
                            g += der[(i * pw + (j - i)) * kcount + k] / d1;
                        }
                        if has1 {
                            g -= der[((i + 1) * pw + (j - i - 1)) * kcount + k] / d2;
                        }
                        nder[o + k] = g;
                    }
                    // Knot-difference terms.
                    let c1 = -p0 / (d1 * d1);
                    nder[o + i + s - 1] += c1;
                    nder[o + i] -= c1;
                    let c2 = p1 / (d2 * d2);
                    nder[o + i + s] += c2;
                    nder[o + i + 1] -= c2;
                }
            }
            val = nval;
            der = nder;
        }
        let w = bw(order.max(1));
        let mut dense = vec![0.0; dim * dim];
        let mut jac = vec![0.0; dim * dim * kcount];
        for i in 0..dim {
            for k in 0..w.min(dim - i) {
                let j = i + k;
                dense[i * dim + j] = val[i * w + k];
                jac[(i * dim + j) * kcount..(i * dim + j + 1) * kcount]
                    .copy_from_slice(&der[(i * w + k) * kcount..(i * w + k + 1) * kcount]);
            }
        }
        let rg = self.rg(knots);
        Ok(self.push(
            Tensor::new(vec![dim, dim], dense)?,
            Op::CobMatrix { knots: knots.0, jac },
            rg,
        ))
    }

    /// Per-column min–max map of a batch onto `[lo, hi]`; constant columns go
    /// to the midpoint. Returns the output and the affine map that was used.
    pub fn minmax_normalize(&mut self, x: Var, lo: f64, hi: f64) -> Result<(Var, ColumnAffine)> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() == 0 {
            return Err(shape_err("minmax_normalize", "[D >= 1, P]", xv.shape()));
        }
        if xv.has_nan() {
            return Err(KanError::NotANumber("normalization input"));
        }
        let (d, p) = (xv.rows(), xv.cols());
        let mut argmin = vec![0usize; p];
        let mut argmax = vec![0usize; p];
        for j in 0..p {
            for i in 1..d {
                let v = xv.at2(i, j);
                if v < xv.at2(argmin[j], j) {
                    argmin[j] = i;
                }
                if v > xv.at2(argmax[j], j) {
                    argmax[j] = i;
                }
            }
        }
        let span = hi - lo;
        let mut affine = ColumnAffine {
            scale: vec![0.0; p],
            shift: vec![0.0; p],
            degenerate: vec![false; p],
        };
        for j in 0..p {
            let (mn, mx) = (xv.at2(argmin[j], j), xv.at2(argmax[j], j));
            if mx > mn {
                let s = span / (mx - mn);
                affine.scale[j] = s;
                affine.shift[j] = lo - s * mn;
            } else {
                affine.scale[j] = 0.0;
                affine.shift[j] = 0.5 * (lo + hi);
                affine.degenerate[j] = true;
            }
        }
        let mut out = affine.apply(xv);
        // Pin the extremes exactly to the interval ends.
        for j in 0..p {
            if !affine.degenerate[j] {
                out.set2(argmin[j], j, lo);
                out.set2(argmax[j], j, hi);
            }
        }
        let rg = self.rg(x);
        let var = self.push(
            out,
            Op::Normalize {
                x: x.0,
                affine: affine.clone(),
                argmin,
                argmax,
                span,
            },
            rg,
        );
        Ok((var, affine))
    }

    /// Applies a stored per-column affine map (frozen normalization).
    pub fn column_affine(&mut self, x: Var, affine: &ColumnAffine) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.cols() != affine.scale.len() {
            return Err(shape_err("column_affine", affine.scale.len(), xv.shape()));
        }
        let out = affine.apply(xv);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ColumnAffine {
                x: x.0,
                scale: affine.scale.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(KanError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only keep gradients of nodes that need them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if needs(i) {
                        accumulate(grads, i, val(i).shape(), |o| add_into(o, g.data(), 1.0));
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, val(*a).shape(), |o| add_into(o, g.data(), 1.0));
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*b).shape(), |o| add_into(o, g.data(), -1.0));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    accumulate(grads, *a, val(*a).shape(), |o| {
                        o.iter_mut().zip(g.data()).zip(vb).for_each(|((o, g), y)| *o += g * y)
                    });
                }
                if needs(*b) {
                    accumulate(grads, *b, val(*b).shape(), |o| {
                        o.iter_mut().zip(g.data()).zip(va).for_each(|((o, g), x)| *o += g * x)
                    });
                }
            }
            Op::Scale(a, c) | Op::Affine(a, c) => {
                accumulate(grads, *a, val(*a).shape(), |o| add_into(o, g.data(), *c));
            }
            Op::ReluPow(a, k) => {
                let x = val(*a).data();
                let order = *k as usize + 1;
                accumulate(grads, *a, val(*a).shape(), |o| {
                    for ((o, g), &xi) in o.iter_mut().zip(g.data()).zip(x) {
                        *o += g * trunc_power_deriv(xi, 0.0, order);
                    }
                });
            }
            Op::Softmax(a) => {
                let s = node.value.data();
                let dot: f64 = s.iter().zip(g.data()).map(|(s, g)| s * g).sum();
                accumulate(grads, *a, val(*a).shape(), |o| {
                    for ((o, s), g) in o.iter_mut().zip(s).zip(g.data()) {
                        *o += s * (g - dot);
                    }
                });
            }
            Op::Cumsum(a) => {
                accumulate(grads, *a, val(*a).shape(), |o| {
                    let mut acc = 0.0;
                    for (o, g) in o.iter_mut().zip(g.data()).rev() {
                        acc += g;
                        *o += acc;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        let seg = &g.data()[off..off + n];
                        accumulate(grads, p, val(p).shape(), |o| add_into(o, seg, 1.0));
                    }
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let n = g.len();
                accumulate(grads, *a, val(*a).shape(), |o| add_into(&mut o[*start..*start + n], g.data(), 1.0));
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, val(*a).shape(), |o| o.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mse { pred, residual } => {
                let c = 2.0 * g.item() / residual.len() as f64;
                accumulate(grads, *pred, val(*pred).shape(), |o| add_into(o, residual, c));
            }
            Op::Contract { feats, weights } => {
                let (f, w) = (val(*feats), val(*weights));
                let d = f.shape()[0];
                let q = w.shape()[0];
                let m = f.len() / d;
                if needs(*feats) {
                    // dF = G W   (D×Q · Q×M)
                    accumulate(grads, *feats, f.shape(), |o| {
                        gemm(d, q, m, g.data(), q, 1, w.data(), m, 1, o, m, 1, true)
                    });
                }
                if needs(*weights) {
                    // dW = Gᵀ F  (Q×D · D×M)
                    accumulate(grads, *weights, w.shape(), |o| {
                        gemm(q, d, m, g.data(), 1, q, f.data(), m, 1, o, m, 1, true)
                    });
                }
            }
            Op::Mode3 { w, a } => {
                let (wt, am) = (val(*w), val(*a));
                let c = am.rows();
                let fibers = wt.len() / c;
                if needs(*w) {
                    // dW̃ = G Aᵀ
                    accumulate(grads, *w, wt.shape(), |o| {
                        gemm(fibers, c, c, g.data(), c, 1, am.data(), 1, c, o, c, 1, true)
                    });
                }
                if needs(*a) {
                    // dA = W̃ᵀ G
                    accumulate(grads, *a, am.shape(), |o| {
                        gemm(c, fibers, c, wt.data(), 1, c, g.data(), c, 1, o, c, 1, true)
                    });
                }
            }
            Op::ShiftOuter { x, t } => {
                let k = val(*t).len();
                if needs(*x) {
                    accumulate(grads, *x, val(*x).shape(), |o| {
                        for (o, row) in o.iter_mut().zip(g.data().chunks(k)) {
                            *o += row.iter().sum::<f64>();
                        }
                    });
                }
                if needs(*t) {
                    accumulate(grads, *t, val(*t).shape(), |o| {
                        for row in g.data().chunks(k) {
                            for (o, gv) in o.iter_mut().zip(row) {
                                *o -= gv;
                            }
                        }
                    });
                }
            }
            Op::SubColumns { x, t } => {
                let p = val(*t).len();
                if needs(*x) {
                    accumulate(grads, *x, val(*x).shape(), |o| add_into(o, g.data(), 1.0));
                }
                if needs(*t) {
                    accumulate(grads, *t, val(*t).shape(), |o| {
                        for row in g.data().chunks(p) {
                            for (o, gv) in o.iter_mut().zip(row) {
                                *o -= gv;
                            }
                        }
                    });
                }
            }
            Op::SplineLayer(cache) => {
                let SplineCache {
                    x,
                    w,
                    order,
                    first,
                    vals,
                    ders,
                } = cache.as_ref();
                let r = *order;
                let (xv, wv) = (val(*x), val(*w));
                let (d, p) = (xv.rows(), xv.cols());
                let (q, c) = (wv.shape()[0], wv.shape()[2]);
                let gd = g.data();
                if needs(*w) {
                    accumulate(grads, *w, wv.shape(), |o| {
                        for di in 0..d {
                            for pi in 0..p {
                                let k = di * p + pi;
                                let f = first[k] as usize;
                                let vs = &vals[k * r..(k + 1) * r];
                                for qi in 0..q {
                                    let gq = gd[di * q + qi];
                                    let base = (qi * p + pi) * c + f;
                                    for (o, v) in o[base..base + r].iter_mut().zip(vs) {
                                        *o += gq * v;
                                    }
                                }
                            }
                        }
                    });
                }
                if needs(*x) {
                    let wd = wv.data();
                    accumulate(grads, *x, xv.shape(), |o| {
                        for di in 0..d {
                            for pi in 0..p {
                                let k = di * p + pi;
                                let f = first[k] as usize;
                                let ds = &ders[k * r..(k + 1) * r];
                                let mut acc = 0.0;
                                for qi in 0..q {
                                    let base = (qi * p + pi) * c + f;
                                    let s: f64 = wd[base..base + r].iter().zip(ds).map(|(a, b)| a * b).sum();
                                    acc += gd[di * q + qi] * s;
                                }
                                o[k] += acc;
                            }
                        }
                    });
                }
            }
            Op::CobMatrix { knots, jac } => {
                let kc = val(*knots).len();
                accumulate(grads, *knots, val(*knots).shape(), |o| {
                    for (e, gv) in g.data().iter().enumerate() {
                        if *gv != 0.0 {
                            for (o, j) in o.iter_mut().zip(&jac[e * kc..(e + 1) * kc]) {
                                *o += gv * j;
                            }
                        }
                    }
                });
            }
            Op::Normalize {
                x,
                affine,
                argmin,
                argmax,
                span,
            } => {
                let xv = val(*x);
                let p = xv.cols();
                accumulate(grads, *x, xv.shape(), |o| {
                    for j in 0..p {
                        if affine.degenerate[j] {
                            continue;
                        }
                        let s = affine.scale[j];
                        let (mn, mx) = (xv.at2(argmin[j], j), xv.at2(argmax[j], j));
                        let width = mx - mn;
                        let (mut gmin, mut gmax) = (0.0, 0.0);
                        for i in 0..xv.rows() {
                            let gi = g.at2(i, j);
                            o[i * p + j] += s * gi;
                            let u = (xv.at2(i, j) - mn) / width;
                            // y = lo + span (x - mn) / (mx - mn)
                            gmin += gi * s * (u - 1.0);
                            gmax -= gi * s * u;
                        }
                        let _ = span;
                        o[argmin[j] * p + j] += gmin;
                        o[argmax[j] * p + j] += gmax;
                    }
                });
            }
            Op::ColumnAffine { x, scale } => {
                let p = scale.len();
                accumulate(grads, *x, val(*x).shape(), |o| {
                    for (k, (o, gv)) in o.iter_mut().zip(g.data()).enumerate() {
                        *o += scale[k % p] * gv;
                    }
                });
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[i].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn add_into(o: &mut [f64], g: &[f64], c: f64) {
    for (o, g) in o.iter_mut().zip(g) {
        *o += c * g;
    }
}

/// `C (+)= A B` with explicit strides; `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every strided index
    // touched for the given m, k, n and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Max relative discrepancy `|g_ad - g_fd| / (|g_fd| + 1e-8)` between a
/// reported gradient and central differences of the same function.
pub fn grad_check<F>(mut f: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, g) = f(params)?;
    if g.len() != params.len() {
        return Err(shape_err("grad_check", params.len(), g.len()));
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (up, _) = f(&probe)?;
        probe[i] = params[i] - step;
        let (dn, _) = f(&probe)?;
        probe[i] = params[i];
        let fd = (up - dn) / (2.0 * step);
        worst = worst.max((g[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}
