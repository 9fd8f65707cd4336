//! Numerical property checks shared by the `verify` subcommand and the
//! acceptance suite.

use std::time::Instant;

use kan_core::cob::{toeplitz_spectral_bound, ChangeOfBasis};
use kan_core::net::{KanSpec, Network, NormMode};
use kan_core::optim::{preconditioned_gd_step, train_multilevel, OptimizerConfig};
use kan_core::refine::refine_network;
use kan_core::spectra::{
    conditioning_sweep, empirical_ntk, feature_matrix, min_batch_size, nullspace_demo, scaled_uniform_cob,
    sigma_max, spectral_radius, symmetric_eigenvalues,
};
use kan_core::spline::{eval_bspline_basis, eval_trunc_power_basis, BasisKind, KnotVector};
use kan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        format!("criterion {:>2} [{status}] {}: {}", self.id, self.name, self.detail)
    }
}

fn check(id: u8, name: &'static str, passed: bool, detail: String) -> Check {
    Check { id, name, passed, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_interior(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = gaps.iter().sum();
    let mut acc = 0.0;
    let mut out = vec![-1.0];
    for g in &gaps[..n - 1] {
        acc += g / total;
        out.push(-1.0 + 2.0 * acc);
    }
    out.push(1.0);
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

/// Basis equivalence `b = A Φ` on uniform and random knots.
pub fn basis_equivalence() -> Result<Check> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut r_ = rng(1);
    for r in 2..=4 {
        for uniform in [true, false] {
            let kv = if uniform {
                KnotVector::uniform(-1.0, 1.0, 10, r)?
            } else {
                KnotVector::from_interior(&random_interior(&mut r_, 10), r)?
            };
            let a = ChangeOfBasis::for_knots(&kv)?;
            let mut mapped = vec![0.0; kv.dim()];
            for _ in 0..1000 {
                let x = r_.gen_range(-1.0..=1.0);
                a.apply_vec(&eval_trunc_power_basis(&kv, x), &mut mapped);
                for (b, m) in eval_bspline_basis(&kv, x)?.iter().zip(&mapped) {
                    worst = worst.max((b - m).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(check(
        1,
        "basis equivalence",
        worst <= 1e-10 && secs < 5.0,
        format!("max |b - A phi| = {worst:.2e} (tol 1e-10), {secs:.2}s (limit 5s)"),
    ))
}

/// Closed-form uniform `A` against the recursion. Entries are compared in
/// the spacing-normalized scale `h^{r-1} A`, where they are `O(1)`.
pub fn uniform_closed_form() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for r in 1..=4 {
        for dim in [4usize, 16, 64, 128] {
            let n = dim + 1 - r;
            let kv = KnotVector::uniform(-1.0, 1.0, n, r)?;
            let h = 2.0 / n as f64;
            let rec = ChangeOfBasis::for_knots(&kv)?.scaled(h);
            let closed = ChangeOfBasis::uniform(h, dim, r)?.scaled(h);
            for i in 0..dim {
                for j in i..(i + r + 1).min(dim) {
                    worst = worst.max((rec.get(i, j) - closed.get(i, j)).abs());
                }
            }
        }
    }
    Ok(check(
        2,
        "uniform closed form",
        worst <= 1e-12,
        format!("max |h^(r-1) (A_closed - A_rec)| = {worst:.2e} over r<=4, dim<=128 (tol 1e-12)"),
    ))
}

fn kan_spec(widths: &[usize], n: usize, r: usize, basis: BasisKind, free: bool) -> KanSpec {
    KanSpec {
        widths: widths.to_vec(),
        intervals: n,
        order: r,
        basis,
        free_knots: free,
        domain: (-1.0, 1.0),
    }
}

/// Output and loss are unchanged by refinement.
pub fn refinement_exactness() -> Result<Check> {
    let mut r_ = rng(3);
    let x = random_tensor(&mut r_, 1000, 2);
    let mut worst: f64 = 0.0;
    let mut case = 0;
    for r in 2..=4 {
        for basis in [BasisKind::Spline, BasisKind::TruncatedPower] {
            for free in [false, true] {
                case += 1;
                let mut net = Network::kan(&kan_spec(&[2, 4, 1], 3, r, basis, free), case)?;
                let mut theta = net.params();
                for (t, m) in theta.iter_mut().zip(net.knot_logit_mask()) {
                    if m {
                        *t = r_.gen_range(-1.0..1.0);
                    }
                }
                net.set_params(&theta)?;
                let before = net.forward(&x, NormMode::Batch)?;
                let mut fine = refine_network(&net)?.fine;
                let after = fine.forward(&x, NormMode::Frozen)?;
                worst = worst.max(before.max_abs_diff(&after));
            }
        }
    }
    let y = Tensor::new(vec![1000, 1], x.data().chunks(2).map(|p| (3.0 * p[0]).sin() * p[1]).collect())?;
    let net = Network::kan(&kan_spec(&[2, 3, 1], 3, 3, BasisKind::Spline, true), 9)?;
    let out = train_multilevel(&net, &x, &y, &[3, 3, 3], &OptimizerConfig::default())?;
    let gap = out.transfer_gaps.iter().copied().fold(0.0, f64::max);
    Ok(check(
        3,
        "refinement exactness",
        worst <= 1e-10 && gap <= 1e-10,
        format!("sup |f_coarse - f_fine| = {worst:.2e}, max loss jump = {gap:.2e} (tol 1e-10)"),
    ))
}

struct Quadratic {
    h: Vec<Vec<f64>>,
    m: Vec<f64>,
}

impl Quadratic {
    fn new(kv: &KnotVector, basis: BasisKind, xs: &[f64], ys: &[f64]) -> Result<Self> {
        let phi = feature_matrix(kv, basis, xs)?;
        let (c, d) = (phi.rows(), xs.len() as f64);
        let h = (0..c)
            .map(|i| (0..c).map(|j| (0..xs.len()).map(|k| phi.at2(i, k) * phi.at2(j, k)).sum::<f64>() / d).collect())
            .collect();
        let m = (0..c).map(|i| (0..xs.len()).map(|k| phi.at2(i, k) * ys[k]).sum::<f64>() / d).collect();
        Ok(Self { h, m })
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.h
            .iter()
            .zip(&self.m)
            .map(|(row, m)| 2.0 * (row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - m))
            .collect()
    }

    fn lambda_max(&self) -> Result<f64> {
        let c = self.h.len();
        let ev = symmetric_eigenvalues(&Tensor::new(vec![c, c], self.h.concat())?)?;
        Ok(2.0 * ev[c - 1])
    }
}

/// Spline-basis gradient descent, mapped through `Aᵀ`, equals the
/// preconditioned truncated-power iteration.
pub fn precondition_equivalence() -> Result<Check> {
    let kv = KnotVector::uniform(-1.0, 1.0, 8, 3)?;
    let a = ChangeOfBasis::for_knots(&kv)?;
    let mut r_ = rng(4);
    let xs: Vec<f64> = (0..300).map(|_| r_.gen_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (2.5 * x).sin() + r_.gen_range(-0.1..0.1)).collect();
    let s = Quadratic::new(&kv, BasisKind::Spline, &xs, &ys)?;
    let q = Quadratic::new(&kv, BasisKind::TruncatedPower, &xs, &ys)?;
    let c = kv.dim();
    let eta = 1.0 / s.lambda_max()?;
    let mut wt: Vec<f64> = (0..c).map(|_| r_.gen_range(-1.0..1.0)).collect();
    let mut w = vec![0.0; c];
    a.apply_transpose_vec(&wt, &mut w);
    let mut mapped = vec![0.0; c];
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g = s.grad(&wt);
        wt.iter_mut().zip(&g).for_each(|(x, gi)| *x -= eta * gi);
        let gr = Tensor::new(vec![1, 1, c], q.grad(&w))?;
        w = preconditioned_gd_step(&Tensor::new(vec![1, 1, c], w)?, &gr, &a, eta)?.into_data();
        a.apply_transpose_vec(&wt, &mut mapped);
        let scale = mapped.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(mapped.iter().zip(&w).fold(0.0f64, |m, (u, v)| m.max((u - v).abs())) / scale);
    }
    Ok(check(
        4,
        "preconditioning equivalence",
        worst <= 1e-6,
        format!("50-step trajectory max relative deviation {worst:.2e} (tol 1e-6)"),
    ))
}

fn fd_errors(net: &mut Network, x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let theta = net.params();
    let mask = net.knot_logit_mask();
    let (_, g) = net.loss_and_grad(x, y)?;
    let step = 1e-6;
    let (mut we, mut se) = (0.0f64, 0.0f64);
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        net.set_params(&probe)?;
        let up = net.loss(x, y)?;
        probe[i] = theta[i] - step;
        net.set_params(&probe)?;
        let dn = net.loss(x, y)?;
        probe[i] = theta[i];
        let fd = (up - dn) / (2.0 * step);
        let err = (g[i] - fd).abs() / (fd.abs().max(g[i].abs()) + 1e-7);
        if mask[i] {
            se = se.max(err);
        } else {
            we = we.max(err);
        }
    }
    net.set_params(&theta)?;
    Ok((we, se))
}

/// Reverse-mode gradients against central differences on 20 networks.
pub fn gradient_checks() -> Result<Check> {
    let (mut we, mut se) = (0.0f64, 0.0f64);
    for case in 0..20u64 {
        let mut r_ = rng(500 + case);
        let r = 2 + (case % 3) as usize;
        let basis = if case % 2 == 0 { BasisKind::Spline } else { BasisKind::TruncatedPower };
        let widths = [vec![2, 1], vec![2, 3, 1], vec![1, 2, 2]][(case % 3) as usize].clone();
        let mut net = Network::kan(&kan_spec(&widths, r_.gen_range(2..6), r, basis, case % 4 < 2), case)?;
        let mut theta = net.params();
        for (t, m) in theta.iter_mut().zip(net.knot_logit_mask()) {
            if m {
                *t = r_.gen_range(-0.5..0.5);
            }
        }
        net.set_params(&theta)?;
        let x = random_tensor(&mut r_, 12, widths[0]);
        let y = random_tensor(&mut r_, 12, widths[widths.len() - 1]);
        let (w, s) = fd_errors(&mut net, &x, &y)?;
        we = we.max(w);
        se = se.max(s);
    }
    Ok(check(
        5,
        "gradient checks",
        we <= 1e-5 && se <= 1e-4,
        format!("20 configs: weights {we:.2e} (tol 1e-5), knot logits {se:.2e} (tol 1e-4)"),
    ))
}

/// Gram-matrix conditioning sweep for `r = 2`.
pub fn conditioning() -> Result<Check> {
    let start = Instant::now();
    let rep = conditioning_sweep(2, &[8, 16, 32, 64, 128])?;
    let s: Vec<f64> = rep.values("kappa_gram_spline").into_iter().map(|v| v.1).collect();
    let r: Vec<f64> = rep.values("kappa_gram_relu").into_iter().map(|v| v.1).collect();
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let growth = r[r.len() - 1] / r[0];
    let secs = start.elapsed().as_secs_f64();
    Ok(check(
        6,
        "conditioning",
        growth >= 10.0 && smax / smin <= 4.0 && secs < 30.0,
        format!(
            "kappa(G_R) grows x{growth:.2e} (need >= 10), kappa(G_S) varies x{:.2} (need <= 4), {secs:.2}s",
            smax / smin
        ),
    ))
}

/// NTK spectral radius ratio and the generator bound on `σ_max(Ã)`.
pub fn ntk_bound() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut r_ = rng(700 + case);
        let r = 2 + (case % 2) as usize;
        let mut net = Network::kan(&kan_spec(&[2, 3, 1], r_.gen_range(3..9), r, BasisKind::Spline, false), case)?;
        let x = random_tensor(&mut r_, 30, 2);
        net.forward(&x, NormMode::Batch)?;
        let s = spectral_radius(&empirical_ntk(&net, &x, BasisKind::Spline)?)?;
        let q = spectral_radius(&empirical_ntk(&net, &x, BasisKind::TruncatedPower)?)?;
        worst = worst.max(s / q);
    }
    let mut sig_ok = true;
    let mut sig_worst: f64 = 0.0;
    for r in 2..=3 {
        for dim in [8, 32, 128, 256] {
            let s = sigma_max(&scaled_uniform_cob(dim, r)?);
            sig_ok &= s <= toeplitz_spectral_bound(r) + 1e-12;
            sig_worst = sig_worst.max(s / toeplitz_spectral_bound(r));
        }
    }
    Ok(check(
        7,
        "NTK bound",
        worst <= 4.0 && sig_ok,
        format!("max rho(NTK_S)/rho(NTK_R) = {worst:.3e} over 20 nets (bound 4); max sigma_max/bound = {sig_worst:.4}"),
    ))
}

/// `σ_max(Ã^[r])` increases toward `2^r/(r-1)!` with the dimension.
pub fn toeplitz_convergence() -> Result<Check> {
    let dims = [2, 4, 8, 16, 32, 64, 128, 256];
    let mut ok = true;
    let mut gaps = Vec::new();
    for r in 1..=4 {
        let vals: Vec<f64> = dims.iter().map(|&d| scaled_uniform_cob(d, r).map(|m| sigma_max(&m))).collect::<std::result::Result<_, _>>()?;
        let bound = toeplitz_spectral_bound(r);
        ok &= vals.windows(2).all(|w| w[1] >= w[0] - 1e-3);
        ok &= vals.iter().all(|&v| v <= bound + 1e-12);
        let rel = (bound - vals[vals.len() - 1]) / bound;
        ok &= rel <= 0.01;
        gaps.push(format!("r={r}: {:.4}/{bound:.4}", vals[vals.len() - 1]));
    }
    Ok(check(
        8,
        "Toeplitz convergence",
        ok,
        format!("monotone within 1e-3, dim 256 values {}", gaps.join(", ")),
    ))
}

/// Batch size for a standard-normal sample to hit `[-3, -2]` with
/// probability 0.999.
pub fn batch_size_formula() -> Result<Check> {
    let z = Normal::new(0.0, 1.0).map_err(|e| crate::error::BenchError::Config(e.to_string()))?;
    let p_in = z.cdf(-2.0) - z.cdf(-3.0);
    let n = min_batch_size(0.999, 1.0 - p_in)?;
    Ok(check(
        9,
        "batch-size formula",
        (319..=321).contains(&n),
        format!("min_batch_size(0.999, 1 - {p_in:.5}) = {n} (expected 320 +- 1)"),
    ))
}

/// Rank deficiency of the stacked two-input feature matrix.
pub fn nullspace() -> Result<Check> {
    let kv = KnotVector::uniform(-1.0, 1.0, 8, 3)?;
    let x = random_tensor(&mut rng(11), 400, 2);
    let rep = nullspace_demo(&kv, &x)?;
    let ratio = rep.sigma_min / rep.sigma_max;
    Ok(check(
        11,
        "nullspace demonstration",
        ratio <= 1e-10 && rep.kernel_residual <= 1e-12,
        format!("sigma_min/sigma_max = {ratio:.2e} (tol 1e-10), |F v|_inf = {:.2e}", rep.kernel_residual),
    ))
}

/// All non-benchmark checks in criterion order.
pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        basis_equivalence()?,
        uniform_closed_form()?,
        refinement_exactness()?,
        precondition_equivalence()?,
        gradient_checks()?,
        conditioning()?,
        ntk_bound()?,
        toeplitz_convergence()?,
        batch_size_formula()?,
        nullspace()?,
    ])
}
