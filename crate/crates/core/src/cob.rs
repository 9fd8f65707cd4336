//! Change of basis between truncated powers and B-splines.
//!
//! `B = A Φ` where `B` stacks the order-`r` B-splines and `Φ` the truncated
//! powers on the same extended knots. `A` is upper triangular with `r + 1`
//! nonzero diagonals, so it is stored as a band: row `i` holds the entries of
//! columns `i ..= i + r`.
//!
//! Weights transform as `W = W̃ ×₃ A`, i.e. every channel fiber `w̃` of a
//! spline-basis weight tensor maps to `w_j = Σ_i w̃_i A_ij`.

use crate::error::{shape_err, KanError, Result};
use crate::spline::KnotVector;
use crate::tensor::Tensor;

/// Banded upper-triangular change-of-basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeOfBasis {
    order: usize,
    dim: usize,
    /// `dim × (order + 1)` band; entry `(i, k)` is `A[i][i + k]`.
    band: Vec<f64>,
    /// Set when the matrix is `h^{r-1} A` for uniform spacing `h`.
    scaled: bool,
}

impl ChangeOfBasis {
    fn zeros(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            band: vec![0.0; dim * (order + 1)],
            scaled: false,
        }
    }

    /// Identity of size `dim`, stored as an order-zero band.
    pub fn identity(dim: usize) -> Self {
        Self {
            order: 0,
            dim,
            band: vec![1.0; dim],
            scaled: false,
        }
    }

    /// `A^[1]`: ones on the diagonal and `-1` on the first superdiagonal.
    pub fn order_one(dim: usize) -> Self {
        let mut a = Self::zeros(1, dim);
        for i in 0..dim {
            a.band[i * 2] = 1.0;
            if i + 1 < dim {
                a.band[i * 2 + 1] = -1.0;
            }
        }
        a
    }

    /// `A^[r]` for the knot vector's own order.
    pub fn for_knots(kv: &KnotVector) -> Result<Self> {
        Self::build(kv, kv.order())
    }

    /// `A^[order]` on the knots of `kv` (so `order <= kv.order()`).
    ///
    /// Uses the recurrence
    /// `A^[s]_ij = A^[s-1]_ij / (t_{i+s-1} - t_i) - A^[s-1]_{i+1,j} / (t_{i+s} - t_{i+1})`
    /// with the row past the last one taken as zero.
    pub fn build(kv: &KnotVector, order: usize) -> Result<Self> {
        if order < 1 || order > kv.order() {
            return Err(KanError::InvalidArgument {
                what: "change-of-basis order",
                value: order.to_string(),
            });
        }
        let dim = kv.dim();
        let t = kv.knots();
        let mut prev = Self::order_one(dim);
        for s in 2..=order {
            let mut next = Self::zeros(s, dim);
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
                    let mut v = prev.get(i, j) / d1;
                    if i + 1 < dim {
                        v -= prev.get(i + 1, j) / d2;
                    }
                    next.band[i * (s + 1) + (j - i)] = v;
                }
            }
            prev = next;
        }
        Ok(prev)
    }

    /// Closed form for uniform spacing `h`:
    /// `A_ij = (-1)^{j-i} r / ((j-i)! (r-j+i)! h^{r-1})` for `i <= j <= i + r`.
    pub fn uniform(h: f64, dim: usize, order: usize) -> Result<Self> {
        if !(h > 0.0) {
            return Err(KanError::InvalidArgument {
                what: "knot spacing h",
                value: h.to_string(),
            });
        }
        if order < 1 {
            return Err(KanError::InvalidArgument {
                what: "spline order r",
                value: order.to_string(),
            });
        }
        let mut a = Self::zeros(order, dim);
        let hp = h.powi(order as i32 - 1);
        for k in 0..=order {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let v = sign * order as f64 / (factorial(k) * factorial(order - k) * hp);
            for i in 0..dim {
                if i + k < dim {
                    a.band[i * (order + 1) + k] = v;
                }
            }
        }
        Ok(a)
    }

    /// `h^{r-1} A`, the matrix for the spacing-normalized powers
    /// `max((x - t_i) / h, 0)^{r-1}`.
    pub fn scaled(&self, h: f64) -> Self {
        let f = h.powi(self.order as i32 - 1);
        Self {
            order: self.order,
            dim: self.dim,
            band: self.band.iter().map(|v| v * f).collect(),
            scaled: true,
        }
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry `A[i][j]`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j < i || j > i + self.order || j >= self.dim {
            0.0
        } else {
            self.band[i * (self.order + 1) + (j - i)]
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `out = A v` (maps truncated-power values to B-spline values).
    pub fn apply_vec(&self, v: &[f64], out: &mut [f64]) {
        let w = self.order + 1;
        for i in 0..self.dim {
            let hi = (i + w).min(self.dim);
            let row = &self.band[i * w..i * w + (hi - i)];
            out[i] = row.iter().zip(&v[i..hi]).map(|(a, x)| a * x).sum();
        }
    }

    /// `out_j = Σ_i v_i A_ij`, i.e. `out = Aᵀ v` (spline to ReLU coefficients).
    pub fn apply_transpose_vec(&self, v: &[f64], out: &mut [f64]) {
        let w = self.order + 1;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate().take(self.dim) {
            let hi = (i + w).min(self.dim);
            for (k, o) in out[i..hi].iter_mut().enumerate() {
                *o += vi * self.band[i * w + k];
            }
        }
    }

    /// Solves `Aᵀ x = v` by forward substitution (ReLU to spline coefficients).
    pub fn solve_transpose_vec(&self, v: &[f64], out: &mut [f64]) {
        let w = self.order + 1;
        for j in 0..self.dim {
            let mut acc = v[j];
            for i in j.saturating_sub(self.order)..j {
                acc -= self.band[i * w + (j - i)] * out[i];
            }
            out[j] = acc / self.band[j * w];
        }
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

fn check_fibers(op: &'static str, w: &Tensor, a: &ChangeOfBasis) -> Result<()> {
    let s = w.shape();
    if s.len() != 3 || s[2] != a.dim() {
        return Err(shape_err(op, format!("[Q, P, {}]", a.dim()), s));
    }
    Ok(())
}

/// `W = W̃ ×₃ A`: spline-basis weights to truncated-power weights.
pub fn apply_cob(w_tilde: &Tensor, a: &ChangeOfBasis) -> Result<Tensor> {
    check_fibers("apply_cob", w_tilde, a)?;
    let c = a.dim();
    let mut out = Tensor::zeros(w_tilde.shape());
    for (src, dst) in w_tilde
        .data()
        .chunks(c)
        .zip(out.data_mut().chunks_mut(c))
    {
        a.apply_transpose_vec(src, dst);
    }
    Ok(out)
}

/// Inverse of [`apply_cob`] by banded triangular solves.
pub fn apply_cob_inverse(w: &Tensor, a: &ChangeOfBasis) -> Result<Tensor> {
    check_fibers("apply_cob_inverse", w, a)?;
    let c = a.dim();
    let mut out = Tensor::zeros(w.shape());
    for (src, dst) in w.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        a.solve_transpose_vec(src, dst);
    }
    Ok(out)
}

/// `2^r / (r-1)!`, the maximum of the generating function of `h^{r-1} A^[r]`
/// on uniform knots.
pub fn toeplitz_spectral_bound(order: usize) -> f64 {
    2f64.powi(order as i32) / factorial(order.saturating_sub(1))
}

/// One `A` per layer; acts block-diagonally on the concatenated weights,
/// once per `(q, p)` fiber.
#[derive(Debug, Clone)]
pub struct BlockDiagonalCob {
    pub blocks: Vec<ChangeOfBasis>,
}

impl BlockDiagonalCob {
    /// Maps spline weights of every layer to truncated-power weights.
    pub fn apply(&self, weights: &[Tensor]) -> Result<Vec<Tensor>> {
        if weights.len() != self.blocks.len() {
            return Err(shape_err("BlockDiagonalCob::apply", self.blocks.len(), weights.len()));
        }
        weights
            .iter()
            .zip(&self.blocks)
            .map(|(w, a)| apply_cob(w, a))
            .collect()
    }

    /// Number of diagonal blocks, `Σ_ℓ P_ℓ Q_ℓ`, for the given layer shapes.
    pub fn block_count(&self, weights: &[Tensor]) -> usize {
        weights.iter().map(|w| w.shape()[0] * w.shape()[1]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{eval_bspline_basis, eval_trunc_power_basis, make_uniform_knots, trunc_power};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kv(rng: &mut ChaCha8Rng, n: usize, r: usize) -> KnotVector {
        let mut knots = vec![-1.7];
        for _ in 1..n + 2 * r - 1 {
            let last = *knots.last().unwrap();
            knots.push(last + rng.gen_range(0.05..0.5));
        }
        KnotVector::new(r, n, knots).unwrap()
    }

    #[test]
    fn order_one_entries() {
        let a = ChangeOfBasis::order_one(3);
        assert_eq!(
            a.to_dense(),
            vec![vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0], vec![0.0, 0.0, 1.0]]
        );
        let mut out = vec![0.0; 4];
        ChangeOfBasis::order_one(4).apply_vec(&[1.0; 4], &mut out);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn indicator_is_difference_of_steps() {
        let kv = make_uniform_knots(0.0, 1.0, 5, 1).unwrap();
        let a = ChangeOfBasis::for_knots(&kv).unwrap();
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            let psi = eval_trunc_power_basis(&kv, x);
            let mut ab = vec![0.0; kv.dim()];
            a.apply_vec(&psi, &mut ab);
            assert_eq!(ab, eval_bspline_basis(&kv, x).unwrap());
        }
    }

    #[test]
    fn relu_power_recursion_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (x, a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let rho = rng.gen_range(1..5);
            let lhs = (x - a) * trunc_power(x, b, rho + 1);
            let rhs = trunc_power(x, b, rho + 2) + (b - a) * trunc_power(x, b, rho + 1);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn order_two_uniform_stencil() {
        let h = 0.25;
        let kv = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        let a = ChangeOfBasis::for_knots(&kv).unwrap();
        let d = a.to_dense();
        assert_eq!(a.dim(), 5);
        for (i, row) in d.iter().enumerate() {
            let expect = [1.0 / h, -2.0 / h, 1.0 / h];
            for (k, e) in expect.iter().enumerate() {
                if i + k < 5 {
                    assert!((row[i + k] - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_closed_form_order_three() {
        let a = ChangeOfBasis::uniform(1.0, 6, 3).unwrap();
        let row: Vec<f64> = (0..4).map(|j| a.get(0, j)).collect();
        assert_eq!(row, vec![0.5, -1.5, 1.5, -0.5]);
        assert!(ChangeOfBasis::uniform(0.0, 4, 2).is_err());
    }

    #[test]
    fn uniform_closed_form_matches_recurrence() {
        for r in 2..=4 {
            for n in [1usize, 3, 17, 64, 125] {
                let kv = make_uniform_knots(-1.0, 1.0, n, r).unwrap();
                let h = 2.0 / n as f64;
                let rec = ChangeOfBasis::for_knots(&kv).unwrap();
                let closed = ChangeOfBasis::uniform(h, kv.dim(), r).unwrap();
                let scale = h.powi(r as i32 - 1);
                for i in 0..kv.dim() {
                    for j in 0..kv.dim() {
                        // Compare on the h-normalized scale; entries grow like h^{1-r}.
                        assert!((rec.get(i, j) - closed.get(i, j)).abs() * scale <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bspline_equals_cob_times_trunc_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in 2..=4 {
            for trial in 0..4 {
                let kv = if trial == 0 {
                    make_uniform_knots(-1.0, 1.0, 9, r).unwrap()
                } else {
                    random_kv(&mut rng, 6 + trial, r)
                };
                let a = ChangeOfBasis::for_knots(&kv).unwrap();
                let mut worst: f64 = 0.0;
                for _ in 0..1000 {
                    let x = rng.gen_range(kv.a()..=kv.b());
                    let b = eval_bspline_basis(&kv, x).unwrap();
                    let mut ab = vec![0.0; kv.dim()];
                    a.apply_vec(&eval_trunc_power_basis(&kv, x), &mut ab);
                    worst = b.iter().zip(&ab).map(|(u, v)| (u - v).abs()).fold(worst, f64::max);
                }
                assert!(worst <= 1e-10, "r={r} trial={trial} residual={worst}");
            }
        }
    }

    #[test]
    fn band_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for r in 1..=4 {
            let kv = random_kv(&mut rng, 8, r);
            let a = ChangeOfBasis::for_knots(&kv).unwrap();
            let d = a.to_dense();
            for i in 0..kv.dim() {
                assert!(d[i][i] != 0.0);
                for j in 0..kv.dim() {
                    if j < i || j > i + r {
                        assert_eq!(d[i][j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_order_rejected() {
        let kv = make_uniform_knots(0.0, 1.0, 3, 2).unwrap();
        assert!(ChangeOfBasis::build(&kv, 3).is_err());
        assert!(ChangeOfBasis::build(&kv, 0).is_err());
    }

    #[test]
    fn apply_and_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let kv = random_kv(&mut rng, 7, 3);
        let a = ChangeOfBasis::for_knots(&kv).unwrap();
        let c = kv.dim();
        let data: Vec<f64> = (0..2 * 3 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Tensor::new(vec![2, 3, c], data).unwrap();
        let back = apply_cob_inverse(&apply_cob(&w, &a).unwrap(), &a).unwrap();
        assert!(back.max_abs_diff(&w) <= 1e-10);

        let zero = Tensor::zeros(&[2, 3, c]);
        assert_eq!(apply_cob(&zero, &a).unwrap(), zero);

        let wrong = Tensor::zeros(&[2, 3, c + 1]);
        assert!(apply_cob(&wrong, &a).is_err());
    }

    #[test]
    fn identity_when_order_one_has_unit_dim() {
        // A 1×1 A^[1] is the identity.
        let a = ChangeOfBasis::order_one(1);
        let w = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(apply_cob(&w, &a).unwrap(), w);
    }

    #[test]
    fn spectral_bound_values() {
        assert_eq!(toeplitz_spectral_bound(1), 2.0);
        assert_eq!(toeplitz_spectral_bound(2), 4.0);
        assert_eq!(toeplitz_spectral_bound(3), 4.0);
        assert!((toeplitz_spectral_bound(4) - 16.0 / 6.0).abs() < 1e-15);
    }
}
