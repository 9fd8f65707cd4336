//! Adam, L-BFGS and the multilevel training loop.
//!
//! Both optimizers work on flat parameter vectors. One L-BFGS "epoch" is one
//! call to [`lbfgs_step`], which runs up to `max_iter` quasi-Newton
//! iterations and keeps its curvature history between calls.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cob::ChangeOfBasis;
use crate::error::{shape_err, KanError, Result};
use crate::net::Network;
use crate::refine::refine_network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, v: f64| KanError::InvalidArgument {
            what,
            value: v.to_string(),
        };
        if !(self.lr > 0.0) {
            return Err(bad("Adam learning rate", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(bad("Adam beta1", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("Adam beta2", self.beta2));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if grads.len() != params.len() {
        return Err(shape_err("adam_step", params.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(KanError::NotANumber("Adam gradient"));
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        if cfg.weight_decay != 0.0 {
            params[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Step-length rule for L-BFGS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    StrongWolfe,
    /// Unit step scaled by `lr` with no acceptance test.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub lr: f64,
    pub line_search: LineSearch,
    pub history: usize,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
    pub max_iter: usize,
    pub max_eval: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            line_search: LineSearch::StrongWolfe,
            history: 10,
            tolerance_grad: 1e-12,
            tolerance_change: 1e-9,
            max_iter: 20,
            max_eval: 25,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history < 1 {
            return Err(KanError::InvalidArgument {
                what: "L-BFGS history size",
                value: self.history.to_string(),
            });
        }
        if !(self.lr > 0.0) || !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(KanError::InvalidArgument {
                what: "L-BFGS step parameters",
                value: format!("lr={} c1={} c2={}", self.lr, self.c1, self.c2),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LbfgsState {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    /// Iterations taken over the lifetime of the state.
    pub iterations: usize,
    /// Line searches that had to fall back to the gradient direction.
    pub fallbacks: usize,
}

impl LbfgsState {
    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }
}

/// Result of one L-BFGS epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn two_loop(state: &LbfgsState, g: &[f64]) -> Vec<f64> {
    let k = state.s.len();
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha = vec![0.0; k];
    let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&state.y[i], &state.s[i])).collect();
    for i in (0..k).rev() {
        alpha[i] = rho[i] * dot(&state.s[i], &q);
        for (qj, yj) in q.iter_mut().zip(&state.y[i]) {
            *qj -= alpha[i] * yj;
        }
    }
    if k > 0 {
        let gamma = dot(&state.s[k - 1], &state.y[k - 1]) / dot(&state.y[k - 1], &state.y[k - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let beta = rho[i] * dot(&state.y[i], &q);
        for (qj, sj) in q.iter_mut().zip(&state.s[i]) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct Search {
    best: Option<Probe>,
    wolfe: bool,
    evals: usize,
}

/// Minimizer of the cubic interpolating two points with slopes, clamped
/// to `[lo, hi]`.
fn cubic_min(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, lo: f64, hi: f64) -> f64 {
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let sq = d1 * d1 - g1 * g2;
    if sq >= 0.0 {
        let d2 = sq.sqrt() * (x2 - x1).signum();
        let t = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2));
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

/// Strong-Wolfe line search (bracketing plus cubic zoom).
fn strong_wolfe<F>(
    obj: &mut F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    gtd0: f64,
    t0: f64,
    cfg: &LbfgsConfig,
    budget: usize,
) -> Result<Search>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut evals = 0;
    let mut eval = |t: f64, evals: &mut usize| -> Result<Probe> {
        *evals += 1;
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        match obj(&xt) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let gtd = dot(&g, d);
                Ok(Probe { t, f, g, gtd })
            }
            Ok(_) | Err(KanError::NotANumber(_)) => Ok(Probe {
                t,
                f: f64::INFINITY,
                g: vec![0.0; x.len()],
                gtd: f64::NAN,
            }),
            Err(e) => Err(e),
        }
    };
    let mut best: Option<Probe> = None;
    let keep = |p: &Probe, best: &mut Option<Probe>| {
        if p.f < f0 && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Probe {
                t: p.t,
                f: p.f,
                g: p.g.clone(),
                gtd: p.gtd,
            });
        }
    };
    let armijo = |p: &Probe| p.f <= f0 + cfg.c1 * p.t * gtd0;
    let curvature = |p: &Probe| p.gtd.abs() <= -cfg.c2 * gtd0;
    let dmax = inf_norm(d);

    let mut prev = Probe {
        t: 0.0,
        f: f0,
        g: Vec::new(),
        gtd: gtd0,
    };
    let mut t = t0;
    let (mut lo, mut hi);
    loop {
        let p = eval(t, &mut evals)?;
        keep(&p, &mut best);
        if !p.f.is_finite() {
            // Overshot into an invalid region: bracket with the last good point.
            lo = prev;
            hi = p;
            break;
        }
        if !armijo(&p) || (prev.t > 0.0 && p.f >= prev.f) {
            lo = prev;
            hi = p;
            break;
        }
        if curvature(&p) {
            return Ok(Search {
                best: Some(p),
                wolfe: true,
                evals,
            });
        }
        if p.gtd >= 0.0 {
            lo = p;
            hi = prev;
            break;
        }
        if evals >= budget {
            return Ok(Search { best, wolfe: false, evals });
        }
        let min_step = t + 0.01 * (t - prev.t);
        let max_step = t * 10.0;
        let next = cubic_min(prev.t, prev.f, prev.gtd, p.t, p.f, p.gtd, min_step, max_step);
        prev = p;
        t = next;
    }
    // Zoom: `lo` satisfies Armijo with the lower value, the minimizer lies between.
    while evals < budget {
        if (hi.t - lo.t).abs() * dmax < cfg.tolerance_change {
            break;
        }
        let (a, b) = (lo.t.min(hi.t), lo.t.max(hi.t));
        let w = b - a;
        let mut t = if hi.f.is_finite() && hi.gtd.is_finite() {
            cubic_min(lo.t, lo.f, lo.gtd, hi.t, hi.f, hi.gtd, a, b)
        } else {
            0.5 * (a + b)
        };
        if t - a < 0.1 * w || b - t < 0.1 * w {
            t = 0.5 * (a + b);
        }
        let p = eval(t, &mut evals)?;
        keep(&p, &mut best);
        if !p.f.is_finite() || !armijo(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Ok(Search {
                    best: Some(p),
                    wolfe: true,
                    evals,
                });
            }
            if p.gtd * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    Ok(Search { best, wolfe: false, evals })
}

/// Moves to the probe point and records the curvature pair.
/// Returns the loss decrease and the step taken.
fn accept(
    state: &mut LbfgsState,
    cfg: &LbfgsConfig,
    params: &mut [f64],
    d: &[f64],
    p: Probe,
    f: &mut f64,
    g: &mut Vec<f64>,
) -> (f64, Vec<f64>) {
    let s: Vec<f64> = d.iter().map(|v| p.t * v).collect();
    let y: Vec<f64> = p.g.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
    if dot(&y, &s) > 1e-10 {
        if state.s.len() == cfg.history {
            state.s.pop_front();
            state.y.pop_front();
        }
        state.s.push_back(s.clone());
        state.y.push_back(y);
    }
    for (x, si) in params.iter_mut().zip(&s) {
        *x += si;
    }
    let df = *f - p.f;
    *f = p.f;
    *g = p.g;
    (df, s)
}

/// One L-BFGS epoch of up to `max_iter` iterations starting at `params`.
///
/// The closure must return the loss and its gradient; it is deterministic,
/// so repeated evaluations at the same point agree.
pub fn lbfgs_step<F>(params: &mut [f64], mut closure: F, state: &mut LbfgsState, cfg: &LbfgsConfig) -> Result<StepOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let (mut f, mut g) = closure(params)?;
    if g.len() != params.len() {
        return Err(shape_err("lbfgs_step", params.len(), g.len()));
    }
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(KanError::NotANumber("L-BFGS objective"));
    }
    let mut evals = 1;
    let mut iters = 0;
    let mut gnorm = inf_norm(&g);
    if gnorm <= cfg.tolerance_grad {
        return Ok(StepOutcome {
            loss: f,
            grad_norm: gnorm,
            evaluations: evals,
            iterations: 0,
            converged: true,
        });
    }
    let mut converged = false;
    while iters < cfg.max_iter && evals < cfg.max_eval {
        let mut d = two_loop(state, &g);
        let mut gtd = dot(&g, &d);
        if gtd >= 0.0 || !gtd.is_finite() {
            state.reset();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
        }
        if gtd > -cfg.tolerance_change * cfg.tolerance_change {
            break;
        }
        let t0 = if state.iterations == 0 {
            cfg.lr * (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            cfg.lr
        };
        if cfg.line_search == LineSearch::Fixed {
            let xt: Vec<f64> = params.iter().zip(&d).map(|(x, di)| x + t0 * di).collect();
            let (fnew, gnew) = closure(&xt)?;
            evals += 1;
            if !fnew.is_finite() || gnew.iter().any(|v| !v.is_finite()) {
                return Err(KanError::NotANumber("L-BFGS objective"));
            }
            let probe = Probe {
                t: t0,
                f: fnew,
                gtd: dot(&gnew, &d),
                g: gnew,
            };
            iters += 1;
            state.iterations += 1;
            let (df, s) = accept(state, cfg, params, &d, probe, &mut f, &mut g);
            gnorm = inf_norm(&g);
            if gnorm <= cfg.tolerance_grad {
                converged = true;
                break;
            }
            if inf_norm(&s) <= cfg.tolerance_change || df.abs() < cfg.tolerance_change {
                break;
            }
            continue;
        }
        let budget = cfg.max_eval - evals;
        let mut search = strong_wolfe(&mut closure, params, &d, f, gtd, t0, cfg, budget)?;
        evals += search.evals;
        if !search.wolfe && search.best.is_none() && evals < cfg.max_eval {
            // No decrease along the quasi-Newton direction: restart from -g.
            state.fallbacks += 1;
            state.reset();
            d = g.iter().map(|v| -v).collect();
            gtd = dot(&g, &d);
            let budget = cfg.max_eval - evals;
            search = strong_wolfe(&mut closure, params, &d, f, gtd, cfg.lr, cfg, budget)?;
            evals += search.evals;
        }
        let Some(p) = search.best else { break };
        iters += 1;
        state.iterations += 1;
        let (df, s) = accept(state, cfg, params, &d, p, &mut f, &mut g);
        gnorm = inf_norm(&g);
        if gnorm <= cfg.tolerance_grad {
            converged = true;
            break;
        }
        if inf_norm(&s) <= cfg.tolerance_change || df.abs() < cfg.tolerance_change {
            break;
        }
    }
    Ok(StepOutcome {
        loss: f,
        grad_norm: gnorm,
        evaluations: evals,
        iterations: iters,
        converged,
    })
}

/// Which optimizer drives training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Lbfgs(LbfgsConfig),
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Lbfgs(LbfgsConfig::default())
    }
}

/// One row of the loss history. `epoch` counts epochs across all levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub level: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub history: Vec<HistoryRow>,
    /// `|loss before - loss after|` at every refinement.
    pub transfer_gaps: Vec<f64>,
    pub fallbacks: usize,
    pub converged: bool,
}

fn grad_inf(net: &mut Network, x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let (l, g) = net.loss_and_grad(x, y)?;
    Ok((l, inf_norm(&g)))
}

/// Trains `schedule[0]` epochs, refines, trains `schedule[1]` epochs, and so
/// on. L-BFGS history is reset and Adam moments are prolonged at each
/// refinement.
pub fn train_multilevel(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    schedule: &[usize],
    opt: &OptimizerConfig,
) -> Result<TrainOutcome> {
    if schedule.is_empty() {
        return Err(KanError::InvalidArgument {
            what: "schedule",
            value: "empty".into(),
        });
    }
    let mut net = net.clone();
    let mut history = Vec::new();
    let mut gaps = Vec::new();
    let mut lbfgs = LbfgsState::default();
    let mut adam = AdamState::new(net.param_count());
    let (l0, g0) = grad_inf(&mut net, x, y)?;
    history.push(HistoryRow {
        level: 0,
        epoch: 0,
        loss: l0,
        grad_norm: g0,
    });
    let mut epoch = 0;
    let mut converged = false;
    for (level, &epochs) in schedule.iter().enumerate() {
        if level > 0 {
            let before = net.loss(x, y)?;
            let refined = refine_network(&net)?;
            if let OptimizerConfig::Adam(_) = opt {
                adam.m = refined.prolong(&adam.m)?;
                adam.v = refined.prolong(&adam.v)?.into_iter().map(|v| v.max(0.0)).collect();
            }
            net = refined.fine;
            lbfgs.reset();
            let (after, g) = grad_inf(&mut net, x, y)?;
            gaps.push((after - before).abs());
            converged = false;
            history.push(HistoryRow {
                level,
                epoch,
                loss: after,
                grad_norm: g,
            });
        }
        for _ in 0..epochs {
            epoch += 1;
            let mut theta = net.params();
            let (loss, gnorm) = if converged {
                let (l, g) = grad_inf(&mut net, x, y)?;
                (l, g)
            } else {
                match opt {
                    OptimizerConfig::Lbfgs(cfg) => {
                        let mut work = net.clone();
                        let out = lbfgs_step(
                            &mut theta,
                            |p| {
                                work.set_params(p)?;
                                work.loss_and_grad(x, y)
                            },
                            &mut lbfgs,
                            cfg,
                        )?;
                        net.set_params(&theta)?;
                        converged = out.converged;
                        // Refresh normalization statistics at the accepted point.
                        net.loss_and_grad(x, y).map(|(l, g)| (l, inf_norm(&g)))?
                    }
                    OptimizerConfig::Adam(cfg) => {
                        let (_, g) = net.loss_and_grad(x, y)?;
                        adam_step(&mut theta, &g, &mut adam, cfg)?;
                        net.set_params(&theta)?;
                        grad_inf(&mut net, x, y)?
                    }
                }
            };
            history.push(HistoryRow {
                level,
                epoch,
                loss,
                grad_norm: gnorm,
            });
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        transfer_gaps: gaps,
        fallbacks: lbfgs.fallbacks,
        converged,
    })
}

/// Training cost of a schedule: `Σ_l epochs_l · flops_l`.
pub fn schedule_flops(schedule: &[usize], flops_per_level: &[u64]) -> u64 {
    schedule
        .iter()
        .zip(flops_per_level)
        .map(|(&e, &f)| e as u64 * f)
        .sum()
}

/// `W ← W - η (∇L ×₃ AᵀA)`: spline-coordinate gradient descent expressed in
/// truncated-power coordinates. Per fiber, `w ← w - η Aᵀ A g`.
pub fn preconditioned_gd_step(w_relu: &Tensor, grad: &Tensor, a: &ChangeOfBasis, lr: f64) -> Result<Tensor> {
    let c = a.dim();
    if w_relu.shape() != grad.shape() || w_relu.shape().last() != Some(&c) {
        return Err(shape_err("preconditioned_gd_step", w_relu.shape(), grad.shape()));
    }
    let mut out = w_relu.clone();
    let mut u = vec![0.0; c];
    let mut v = vec![0.0; c];
    for (wf, gf) in out.data_mut().chunks_mut(c).zip(grad.data().chunks(c)) {
        a.apply_vec(gf, &mut u);
        a.apply_transpose_vec(&u, &mut v);
        for (w, vi) in wf.iter_mut().zip(&v) {
            *w -= lr * vi;
        }
    }
    Ok(out)
}
