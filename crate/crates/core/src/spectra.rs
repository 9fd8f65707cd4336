//! Gram matrices, condition numbers, Hessians, NTKs and related diagnostics.
//!
//! Dense linear algebra (symmetric eigenvalues, SVD) comes from `nalgebra`.
//! Integrals use composite Gauss–Legendre quadrature on each knot interval
//! with Lebesgue measure on `[a, b]`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tape;
use crate::cob::ChangeOfBasis;
use crate::error::{shape_err, KanError, Result};
use crate::net::{Layer, Network, NormMode};
use crate::spline::{eval_bspline_basis, eval_trunc_power_basis, BasisKind, KnotVector};
use crate::tensor::Tensor;

/// Largest Jacobian width accepted by [`empirical_ntk`].
pub const NTK_MAX_WEIGHTS: usize = 10_000;
/// Largest sample count accepted by [`empirical_ntk`].
pub const NTK_MAX_SAMPLES: usize = 200;
/// Eigenvalues below this fraction of the largest count as zero.
pub const ZERO_EIG_RTOL: f64 = 1e-12;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=m {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = m as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    }
    (nodes, weights)
}

fn basis_values(kv: &KnotVector, basis: BasisKind, x: f64) -> Result<Vec<f64>> {
    match basis {
        BasisKind::Spline => eval_bspline_basis(kv, x),
        BasisKind::TruncatedPower => Ok(eval_trunc_power_basis(kv, x)),
    }
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
    Tensor::new(vec![r, c], data).expect("sized")
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// `G_ij = ∫_a^b φ_i φ_j dx` by `quad_order`-point Gauss–Legendre per interval.
pub fn gram_matrix(kv: &KnotVector, basis: BasisKind, quad_order: usize) -> Result<Tensor> {
    if quad_order < kv.order() {
        return Err(KanError::InvalidArgument {
            what: "quadrature order",
            value: format!("{quad_order} < r = {}", kv.order()),
        });
    }
    let c = kv.dim();
    let (nodes, weights) = gauss_legendre(quad_order);
    let mut g = DMatrix::<f64>::zeros(c, c);
    for w in kv.interior().windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        for (z, wq) in nodes.iter().zip(&weights) {
            let x = lo + half * (z + 1.0);
            let phi = basis_values(kv, basis, x)?;
            let s = wq * half;
            for i in 0..c {
                if phi[i] == 0.0 {
                    continue;
                }
                for j in 0..c {
                    g[(i, j)] += s * phi[i] * phi[j];
                }
            }
        }
    }
    Ok(to_tensor(&g))
}

/// Condition number of a symmetric PSD matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub kappa: f64,
    pub lambda_max: f64,
    pub lambda_min_positive: f64,
    /// Eigenvalues treated as exact zeros.
    pub excluded: usize,
}

pub fn symmetric_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    if m.shape().len() != 2 || m.rows() != m.cols() {
        return Err(shape_err("symmetric_eigenvalues", "square matrix", m.shape()));
    }
    if m.has_nan() {
        return Err(KanError::NotANumber("eigenvalue input"));
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(to_dmatrix(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// `λ_max / λ_min⁺`, excluding eigenvalues below `1e-12 λ_max`.
pub fn condition_number(m: &Tensor) -> Result<Conditioning> {
    let ev = symmetric_eigenvalues(m)?;
    let lmax = ev.last().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return Err(KanError::Numerical("condition number of a zero matrix".into()));
    }
    let thr = ZERO_EIG_RTOL * lmax;
    let excluded = ev.iter().filter(|&&v| v < thr).count();
    let lmin = ev.iter().copied().find(|&v| v >= thr).unwrap_or(lmax);
    Ok(Conditioning {
        kappa: lmax / lmin,
        lambda_max: lmax,
        lambda_min_positive: lmin,
        excluded,
    })
}

/// Feature matrix `Φ(X)` with one column per sample.
pub fn feature_matrix(kv: &KnotVector, basis: BasisKind, xs: &[f64]) -> Result<Tensor> {
    let c = kv.dim();
    let mut data = vec![0.0; c * xs.len()];
    for (d, &x) in xs.iter().enumerate() {
        let phi = basis_values(kv, basis, x)?;
        for i in 0..c {
            data[i * xs.len() + d] = phi[i];
        }
    }
    Tensor::new(vec![c, xs.len()], data)
}

/// `H = (1/D) Φ(X) Φ(X)ᵀ`.
pub fn empirical_hessian(kv: &KnotVector, basis: BasisKind, xs: &[f64]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(KanError::InvalidArgument {
            what: "sample count",
            value: "0".into(),
        });
    }
    let phi = to_dmatrix(&feature_matrix(kv, basis, xs)?);
    let h = &phi * phi.transpose() / xs.len() as f64;
    Ok(to_tensor(&h))
}

/// Largest singular value of a dense matrix.
pub fn sigma_max(m: &Tensor) -> f64 {
    let sv = to_dmatrix(m).singular_values();
    sv.iter().copied().fold(0.0, f64::max)
}

/// Dense `Ã^[r] = h^{r-1} A^[r]` for uniform knots of size `dim`.
pub fn scaled_uniform_cob(dim: usize, order: usize) -> Result<Tensor> {
    let a = ChangeOfBasis::uniform(1.0, dim, order)?;
    let rows = a.to_dense();
    Tensor::from_rows(&rows)
}

/// Kernel `J Jᵀ` of the scalar outputs with respect to all KAN weights,
/// with `J` taken in truncated-power coordinates. For the spline basis the
/// weights are `w̃` with `w = Ãᵀ w̃` per fiber, giving `J Ãᵀ Ã Jᵀ` where
/// `Ã = h^{r-1} A` and `h = (b - a) / n`.
///
/// Normalization maps are frozen, so they must have been recorded first.
pub fn empirical_ntk(net: &Network, x: &Tensor, basis: BasisKind) -> Result<Tensor> {
    let d = x.rows();
    if d > NTK_MAX_SAMPLES {
        return Err(KanError::SizeGuard {
            what: "NTK samples",
            value: d,
            limit: NTK_MAX_SAMPLES,
        });
    }
    let mut relu = net.clone();
    let mut cobs = Vec::new();
    let mut weight_len = 0;
    for layer in &mut relu.layers {
        let Layer::Kan(l) = layer else {
            return Err(KanError::BasisMismatch("NTK is defined for KAN layers only"));
        };
        let kv = l.realized_knots()?;
        let mut converted = l.to_basis(BasisKind::TruncatedPower)?;
        converted.free_knots = None;
        converted.knots = kv.clone();
        weight_len += converted.weights.len();
        let h = (kv.b() - kv.a()) / kv.intervals() as f64;
        cobs.push((ChangeOfBasis::for_knots(&kv)?.scaled(h), converted.weights.shape().to_vec()));
        *l = converted;
    }
    if weight_len > NTK_MAX_WEIGHTS {
        return Err(KanError::SizeGuard {
            what: "NTK weights",
            value: weight_len,
            limit: NTK_MAX_WEIGHTS,
        });
    }
    let q = relu.outputs();
    let rows = d * q;
    let mut jac = DMatrix::<f64>::zeros(rows, weight_len);
    for s in 0..d {
        let xs = Tensor::new(vec![1, x.cols()], x.row(s).to_vec())?;
        for o in 0..q {
            let mut tape = Tape::new();
            let (y, leaves) = relu.record(&mut tape, &xs, NormMode::Frozen, true)?;
            let mut onehot = vec![0.0; q];
            onehot[o] = 1.0;
            let mask = tape.constant(Tensor::new(vec![1, q], onehot)?);
            let picked = tape.mul(y, mask)?;
            let out = tape.sum(picked);
            let grads = tape.backward(out)?;
            let mut col = 0;
            for (v, (a, shape)) in leaves.iter().zip(&cobs) {
                let n: usize = shape.iter().product();
                let mut g = grads.flat(*v, n);
                if basis == BasisKind::Spline {
                    // J_S = J_R Ãᵀ per fiber: row entries g ↦ Ã g.
                    let c = a.dim();
                    let mut tmp = vec![0.0; c];
                    for fiber in g.chunks_mut(c) {
                        a.apply_vec(fiber, &mut tmp);
                        fiber.copy_from_slice(&tmp);
                    }
                }
                for (k, gv) in g.iter().enumerate() {
                    jac[(s * q + o, col + k)] = *gv;
                }
                col += n;
            }
        }
    }
    Ok(to_tensor(&(&jac * jac.transpose())))
}

/// Spectral radius of a symmetric PSD matrix.
pub fn spectral_radius(m: &Tensor) -> Result<f64> {
    let ev = symmetric_eigenvalues(m)?;
    Ok(ev.iter().fold(0.0, |a, v| a.max(v.abs())))
}

/// Smallest batch size such that at least one sample lands in a region of
/// probability `1 - p_outside` with probability `tau`.
pub fn min_batch_size(tau: f64, p_outside: f64) -> Result<u64> {
    for (what, v) in [("tau", tau), ("p_outside", p_outside)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(KanError::InvalidArgument {
                what,
                value: v.to_string(),
            });
        }
    }
    let n = ((1.0 - tau).ln() / p_outside.ln()).ceil();
    Ok((n as u64).max(1))
}

/// Result of [`nullspace_demo`].
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceReport {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Unit vector `(1, …, 1, -1, …, -1, 0, …)/‖·‖` pairing inputs 0 and 1.
    pub kernel: Vec<f64>,
    /// `‖F v‖_∞` for the kernel vector.
    pub kernel_residual: f64,
}

/// Stacks `[Φ(x_1) | Φ(x_2) | …]` for `D × P` samples and reports its
/// smallest singular value and an explicit partition-of-unity kernel vector.
pub fn nullspace_demo(kv: &KnotVector, samples: &Tensor) -> Result<NullspaceReport> {
    let (d, p) = (samples.rows(), samples.cols());
    if samples.shape().len() != 2 || p < 1 {
        return Err(shape_err("nullspace_demo", "[D, P >= 1]", samples.shape()));
    }
    let c = kv.dim();
    let mut f = DMatrix::<f64>::zeros(d, p * c);
    for s in 0..d {
        for j in 0..p {
            let phi = eval_bspline_basis(kv, samples.at2(s, j))?;
            for i in 0..c {
                f[(s, j * c + i)] = phi[i];
            }
        }
    }
    let sv = f.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = if d >= p * c {
        sv.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let mut kernel = vec![0.0; p * c];
    let mut residual = f64::NAN;
    if p >= 2 {
        let norm = (2.0 * c as f64).sqrt();
        for i in 0..c {
            kernel[i] = 1.0 / norm;
            kernel[c + i] = -1.0 / norm;
        }
        let v = DMatrix::from_column_slice(p * c, 1, &kernel);
        residual = (&f * v).iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    Ok(NullspaceReport {
        sigma_min: smin,
        sigma_max: smax,
        kernel,
        kernel_residual: residual,
    })
}

/// One measured quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraRow {
    pub quantity: String,
    pub size: usize,
    pub value: f64,
}

/// Collected sweep results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpectraReport {
    pub rows: Vec<SpectraRow>,
}

impl SpectraReport {
    pub fn push(&mut self, quantity: &str, size: usize, value: f64) {
        self.rows.push(SpectraRow {
            quantity: quantity.to_string(),
            size,
            value,
        });
    }

    pub fn values(&self, quantity: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity)
            .map(|r| (r.size, r.value))
            .collect()
    }
}

/// Condition numbers of both Gram matrices over a sweep of interval counts.
pub fn conditioning_sweep(order: usize, sizes: &[usize]) -> Result<SpectraReport> {
    let mut rep = SpectraReport::default();
    for &n in sizes {
        let kv = KnotVector::uniform(-1.0, 1.0, n, order)?;
        let gs = gram_matrix(&kv, BasisKind::Spline, order + 1)?;
        let gr = gram_matrix(&kv, BasisKind::TruncatedPower, order + 1)?;
        rep.push("kappa_gram_spline", n, condition_number(&gs)?.kappa);
        rep.push("kappa_gram_relu", n, condition_number(&gr)?.kappa);
    }
    Ok(rep)
}

/// `σ_max(Ã^[r])` over a sweep of dimensions.
pub fn toeplitz_sweep(order: usize, dims: &[usize]) -> Result<SpectraReport> {
    let mut rep = SpectraReport::default();
    for &dim in dims {
        rep.push(&format!("sigma_max_cob_r{order}"), dim, sigma_max(&scaled_uniform_cob(dim, order)?));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::make_uniform_knots;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(4);
        let int = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((int(0) - 2.0).abs() < 1e-14);
        assert!((int(6) - 2.0 / 7.0).abs() < 1e-14);
        assert!(int(7).abs() < 1e-14);
    }

    #[test]
    fn indicator_gram_is_diagonal() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 1).unwrap();
        let g = gram_matrix(&kv, BasisKind::Spline, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 0.25 } else { 0.0 };
                assert!((g.at2(i, j) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hat_mass_matrix() {
        let h = 0.2;
        let kv = make_uniform_knots(0.0, 1.0, 5, 2).unwrap();
        let g = gram_matrix(&kv, BasisKind::Spline, 3).unwrap();
        for i in 1..5 {
            assert!((g.at2(i, i) - 2.0 * h / 3.0).abs() < 1e-14);
            assert!((g.at2(i, i + 1) - h / 6.0).abs() < 1e-14);
        }
        assert!((g.at2(0, 0) - h / 3.0).abs() < 1e-14);
        assert!(gram_matrix(&kv, BasisKind::Spline, 1).is_err());
    }

    #[test]
    fn condition_number_examples() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((condition_number(&id).unwrap().kappa - 1.0).abs() < 1e-14);
        let d = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 10.0]]).unwrap();
        assert!((condition_number(&d).unwrap().kappa - 10.0).abs() < 1e-12);
        let sing = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let c = condition_number(&sing).unwrap();
        assert_eq!(c.excluded, 1);
        assert!(condition_number(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn batch_size_examples() {
        assert_eq!(min_batch_size(0.999, 0.5).unwrap(), 10);
        assert_eq!(min_batch_size(1e-12, 0.5).unwrap(), 1);
        assert!(min_batch_size(1.0, 0.5).is_err());
        assert!(min_batch_size(0.5, 0.0).is_err());
    }

    #[test]
    fn single_sample_hessian_is_rank_one() {
        let kv = make_uniform_knots(-1.0, 1.0, 4, 3).unwrap();
        let h = empirical_hessian(&kv, BasisKind::Spline, &[0.3]).unwrap();
        let ev = symmetric_eigenvalues(&h).unwrap();
        let top = ev[ev.len() - 1];
        assert!(ev[..ev.len() - 1].iter().all(|v| v.abs() < 1e-12 * top));
    }
}
