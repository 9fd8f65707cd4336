//! Knot vectors and the two equivalent bases of the spline space `S_r(T)`.
//!
//! A [`KnotVector`] of order `r` on `[a, b]` with `n` intervals stores the
//! extended, strictly increasing knots `t_{1-r} < … < t_{n+r-1}` with
//! `t_0 = a` and `t_n = b`. Both bases have `n + r - 1` functions indexed
//! `1-r ..= n-1`; in code they are stored 0-based, so basis index `m`
//! corresponds to the function supported on `knots()[m ..= m + r]`.
//!
//! * B-splines `b_i` come from the Cox–de Boor recursion and are locally
//!   supported on `[t_i, t_{i+r}]`.
//! * Truncated powers `ψ_i(x) = max(x - t_i, 0)^{r-1}` are the ReLU-power
//!   features of a multichannel MLP.

use serde::{Deserialize, Serialize};

use crate::cob::ChangeOfBasis;
use crate::error::{KanError, Result};

/// Largest supported spline order.
pub const MAX_ORDER: usize = 10;

/// Lower bound on a free-knot gap, as a fraction of the spanned width.
///
/// Keeps realized knots strictly increasing in `f64` even for extreme logits.
pub const MIN_GAP_FRACTION: f64 = 1e-12;

/// Which of the two equivalent bases a layer is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasisKind {
    #[serde(rename = "spline")]
    Spline,
    #[serde(rename = "relu")]
    TruncatedPower,
}

impl BasisKind {
    pub fn label(self) -> &'static str {
        match self {
            BasisKind::Spline => "spline",
            BasisKind::TruncatedPower => "relu",
        }
    }
}

impl std::str::FromStr for BasisKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spline" | "bspline" => Ok(BasisKind::Spline),
            "relu" | "truncated-power" | "truncated_power" => Ok(BasisKind::TruncatedPower),
            other => Err(KanError::InvalidArgument {
                what: "basis",
                value: other.to_string(),
            }),
        }
    }
}

/// Extended knot vector of a spline space of order `r` on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    a: f64,
    b: f64,
    order: usize,
    intervals: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Validates and wraps a full extended knot sequence of length `n + 2r - 1`.
    pub fn new(order: usize, intervals: usize, knots: Vec<f64>) -> Result<Self> {
        check_order(order)?;
        if intervals < 1 {
            return Err(KanError::InvalidArgument {
                what: "interval count n",
                value: intervals.to_string(),
            });
        }
        let expected = intervals + 2 * order - 1;
        if knots.len() != expected {
            return Err(crate::error::shape_err("KnotVector::new", expected, knots.len()));
        }
        for (i, w) in knots.windows(2).enumerate() {
            if w[0].is_nan() || w[1].is_nan() {
                return Err(KanError::NotANumber("knot vector"));
            }
            if w[0] >= w[1] {
                return Err(KanError::DegenerateKnots {
                    index: i,
                    left: w[0],
                    right: w[1],
                });
            }
        }
        let a = knots[order - 1];
        let b = knots[order - 1 + intervals];
        Ok(Self {
            a,
            b,
            order,
            intervals,
            knots,
        })
    }

    /// Uniform knots `t_i = a + i h`, `h = (b - a) / n`, for `i = 1-r ..= n+r-1`.
    pub fn uniform(a: f64, b: f64, intervals: usize, order: usize) -> Result<Self> {
        check_domain(a, b)?;
        check_order(order)?;
        if intervals < 1 {
            return Err(KanError::InvalidArgument {
                what: "interval count n",
                value: intervals.to_string(),
            });
        }
        let h = (b - a) / intervals as f64;
        let r = order as isize;
        let n = intervals as isize;
        let knots = (1 - r..=n + r - 1)
            .map(|i| match i {
                0 => a,
                i if i == n => b,
                i => a + i as f64 * h,
            })
            .collect();
        Self::new(order, intervals, knots)
    }

    /// Builds a knot vector from interior knots `t_0 = a < … < t_n = b`.
    ///
    /// Extension knots are evenly spaced with the outermost ones at
    /// `a - (b - a)` and `b + (b - a)`, the same endpoint rule used for free
    /// knots.
    pub fn from_interior(interior: &[f64], order: usize) -> Result<Self> {
        check_order(order)?;
        if interior.len() < 2 {
            return Err(KanError::InvalidArgument {
                what: "interior knot count",
                value: interior.len().to_string(),
            });
        }
        let a = interior[0];
        let b = interior[interior.len() - 1];
        check_domain(a, b)?;
        let width = b - a;
        let ext = order - 1;
        let mut knots = Vec::with_capacity(interior.len() + 2 * ext);
        for k in (1..=ext).rev() {
            knots.push(a - width * k as f64 / ext as f64);
        }
        knots.extend_from_slice(interior);
        for k in 1..=ext {
            knots.push(b + width * k as f64 / ext as f64);
        }
        Self::new(order, interior.len() - 1, knots)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Spline order `r` (piecewise degree `r - 1`).
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of interior intervals `n`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Basis dimension `n + r - 1`.
    pub fn dim(&self) -> usize {
        self.intervals + self.order - 1
    }

    /// All extended knots, `t_{1-r}` first.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot `t_i` using the signed index convention `i ∈ 1-r ..= n+r-1`.
    pub fn knot(&self, i: isize) -> f64 {
        self.knots[(i + self.order as isize - 1) as usize]
    }

    /// Interior knots `t_0 ..= t_n`.
    pub fn interior(&self) -> &[f64] {
        &self.knots[self.order - 1..self.order + self.intervals]
    }

    /// Knots the truncated-power features shift by: `t_{1-r} ..= t_{n-1}`.
    pub fn shifts(&self) -> &[f64] {
        &self.knots[..self.dim()]
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Interval index `k` with `t_k <= x < t_{k+1}`; the last interval is closed.
    ///
    /// `x` must lie in `[a, b]`.
    pub fn interval_of(&self, x: f64) -> usize {
        let interior = self.interior();
        let k = interior.partition_point(|&t| t <= x);
        k.saturating_sub(1).min(self.intervals - 1)
    }

    /// Evaluates the `r` B-splines that can be nonzero at `x ∈ [a, b]`.
    ///
    /// Writes them to `vals[..r]` and returns the 0-based index of the first.
    pub fn nonzero_basis(&self, x: f64, vals: &mut [f64]) -> usize {
        let k = self.interval_of(x);
        let span = k + self.order - 1;
        let p = self.order - 1;
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for rr in 0..j {
                let temp = vals[rr] / (right[rr + 1] + left[j - rr]);
                vals[rr] = saved + right[rr + 1] * temp;
                saved = left[j - rr] * temp;
            }
            vals[j] = saved;
        }
        k
    }

    /// Like [`nonzero_basis`](Self::nonzero_basis) but also returns the
    /// derivatives `d b_m / dx` in `ders[..r]`.
    pub fn nonzero_basis_with_derivs(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        let r = self.order;
        if r == 1 {
            ders[0] = 0.0;
            return self.nonzero_basis(x, vals);
        }
        // Order r-1 values on the same span: functions k+1 ..= k+r-1.
        let k = self.interval_of(x);
        let mut lower = [0.0; MAX_ORDER];
        let span = k + r - 1;
        {
            let p = r - 2;
            let mut left = [0.0; MAX_ORDER];
            let mut right = [0.0; MAX_ORDER];
            lower[0] = 1.0;
            for j in 1..=p {
                left[j] = x - self.knots[span + 1 - j];
                right[j] = self.knots[span + j] - x;
                let mut saved = 0.0;
                for rr in 0..j {
                    let temp = lower[rr] / (right[rr + 1] + left[j - rr]);
                    lower[rr] = saved + right[rr + 1] * temp;
                    saved = left[j - rr] * temp;
                }
                lower[j] = saved;
            }
        }
        // b'_m = (r-1) [ lo_m / (t_{m+r-1} - t_m) - lo_{m+1} / (t_{m+r} - t_{m+1}) ]
        // where lo_m is the order r-1 function m; lo is nonzero for m in k+1..=k+r-1.
        let scale = (r - 1) as f64;
        for (slot, der) in ders.iter_mut().enumerate().take(r) {
            let m = k + slot;
            let lo_m = if slot >= 1 { lower[slot - 1] } else { 0.0 };
            let lo_next = if slot + 1 < r { lower[slot] } else { 0.0 };
            let mut d = 0.0;
            if lo_m != 0.0 {
                d += lo_m / (self.knots[m + r - 1] - self.knots[m]);
            }
            if lo_next != 0.0 {
                d -= lo_next / (self.knots[m + r] - self.knots[m + 1]);
            }
            *der = scale * d;
        }
        self.nonzero_basis(x, vals)
    }
}

fn check_domain(a: f64, b: f64) -> Result<()> {
    if a.is_nan() || b.is_nan() || a >= b {
        return Err(KanError::InvalidDomain { a, b });
    }
    Ok(())
}

fn check_order(order: usize) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(KanError::InvalidArgument {
            what: "spline order r",
            value: order.to_string(),
        });
    }
    Ok(())
}

/// Uniformly spaced knots on `[a, b]` with `n` intervals and order `r`.
pub fn make_uniform_knots(a: f64, b: f64, n: usize, r: usize) -> Result<KnotVector> {
    KnotVector::uniform(a, b, n, r)
}

/// Evaluates all `n + r - 1` B-splines at `x`.
///
/// Inside `[a, b]` this is Cox–de Boor; outside, the value is taken from the
/// truncated-power expansion `A Φ(x)` so both bases agree on all of ℝ.
pub fn eval_bspline_basis(kv: &KnotVector, x: f64) -> Result<Vec<f64>> {
    if x.is_nan() {
        return Err(KanError::NotANumber("eval_bspline_basis input"));
    }
    let mut out = vec![0.0; kv.dim()];
    if kv.contains(x) {
        let mut vals = [0.0; MAX_ORDER];
        let first = kv.nonzero_basis(x, &mut vals);
        out[first..first + kv.order()].copy_from_slice(&vals[..kv.order()]);
    } else {
        let cob = ChangeOfBasis::for_knots(kv)?;
        cob.apply_vec(&eval_trunc_power_basis(kv, x), &mut out);
    }
    Ok(out)
}

/// `max(x - t, 0)^(r-1)`, with the step convention `x >= t` for `r = 1`.
#[inline]
pub fn trunc_power(x: f64, t: f64, order: usize) -> f64 {
    let d = x - t;
    match order {
        1 => {
            if d >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ if d <= 0.0 => 0.0,
        2 => d,
        3 => d * d,
        4 => d * d * d,
        r => d.powi(r as i32 - 1),
    }
}

/// Derivative of [`trunc_power`] in `x`; zero at the kink.
#[inline]
pub fn trunc_power_deriv(x: f64, t: f64, order: usize) -> f64 {
    let d = x - t;
    if order < 2 || d <= 0.0 {
        return 0.0;
    }
    match order {
        2 => 1.0,
        3 => 2.0 * d,
        r => (r - 1) as f64 * d.powi(r as i32 - 2),
    }
}

/// Evaluates all `n + r - 1` truncated powers `ψ_i(x) = max(x - t_i, 0)^{r-1}`.
pub fn eval_trunc_power_basis(kv: &KnotVector, x: f64) -> Vec<f64> {
    kv.shifts()
        .iter()
        .map(|&t| trunc_power(x, t, kv.order()))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gap fractions `(1 - mδ) softmax(s) + δ` with `δ = MIN_GAP_FRACTION`.
pub fn gap_fractions(s: &[f64]) -> Vec<f64> {
    let m = s.len() as f64;
    let keep = 1.0 - m * MIN_GAP_FRACTION;
    softmax(s)
        .into_iter()
        .map(|p| keep * p + MIN_GAP_FRACTION)
        .collect()
}

/// Inverse of [`gap_fractions`] up to the softmax shift: logits reproducing
/// the given positive fractions (which must sum to one).
pub fn logits_from_fractions(fractions: &[f64]) -> Vec<f64> {
    let m = fractions.len() as f64;
    let keep = 1.0 - m * MIN_GAP_FRACTION;
    fractions
        .iter()
        .map(|&f| ((f - MIN_GAP_FRACTION) / keep).max(f64::MIN_POSITIVE).ln())
        .collect()
}

/// Trainable knot parameterization by gap logits.
///
/// The interior knots are `t_i = a + (b - a) Σ_{j<=i} softmax(s)_j`. Knots
/// below `a` use the same construction on `[a - left_width, a]`, and knots
/// above `b` on `[b, b + right_width]`; both widths start at `b - a`. With
/// `r <= 2` a side has at most one extension knot and carries no logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeKnotParam {
    pub interior: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub left_width: f64,
    pub right_width: f64,
}

impl FreeKnotParam {
    /// All-zero logits, which realize uniformly spaced knots.
    pub fn zeros(a: f64, b: f64, intervals: usize, order: usize) -> Self {
        let ext = extension_logit_count(order);
        Self {
            interior: vec![0.0; intervals],
            left: vec![0.0; ext],
            right: vec![0.0; ext],
            left_width: b - a,
            right_width: b - a,
        }
    }

    /// Number of trainable logits.
    pub fn logit_count(&self) -> usize {
        self.interior.len() + self.left.len() + self.right.len()
    }

    /// Logits realizing the given knot vector exactly (up to rounding).
    pub fn from_knots(kv: &KnotVector) -> Self {
        let r = kv.order();
        let knots = kv.knots();
        let (a, b) = (kv.a(), kv.b());
        let fractions = |lo: f64, hi: f64, pts: &[f64]| -> Vec<f64> {
            let w = hi - lo;
            pts.windows(2).map(|p| (p[1] - p[0]) / w).collect()
        };
        let interior = logits_from_fractions(&fractions(a, b, kv.interior()));
        let left_pts = &knots[..r];
        let right_pts = &knots[r - 1 + kv.intervals()..];
        let left_width = a - knots[0];
        let right_width = knots[knots.len() - 1] - b;
        let ext = extension_logit_count(r);
        let (left, right) = if ext == 0 {
            (Vec::new(), Vec::new())
        } else {
            (
                logits_from_fractions(&fractions(knots[0], a, left_pts)),
                logits_from_fractions(&fractions(b, knots[knots.len() - 1], right_pts)),
            )
        };
        Self {
            interior,
            left,
            right,
            // r = 1 has no extension knots; keep the default widths.
            left_width: if r > 1 { left_width } else { b - a },
            right_width: if r > 1 { right_width } else { b - a },
        }
    }

    /// Flattened logits in the order interior, left, right.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.interior.clone();
        v.extend_from_slice(&self.left);
        v.extend_from_slice(&self.right);
        v
    }

    pub fn set_from_slice(&mut self, values: &[f64]) {
        let (ni, nl) = (self.interior.len(), self.left.len());
        self.interior.copy_from_slice(&values[..ni]);
        self.left.copy_from_slice(&values[ni..ni + nl]);
        self.right.copy_from_slice(&values[ni + nl..]);
    }
}

/// Logits per extension side: `r - 1` gaps, none needed when `r <= 2`.
pub fn extension_logit_count(order: usize) -> usize {
    if order >= 3 {
        order - 1
    } else {
        0
    }
}

/// Realizes the knot vector described by free-knot logits.
pub fn knots_from_params(a: f64, b: f64, p: &FreeKnotParam, order: usize) -> Result<KnotVector> {
    check_domain(a, b)?;
    check_order(order)?;
    let n = p.interior.len();
    let ext = extension_logit_count(order);
    if n < 1 || p.left.len() != ext || p.right.len() != ext {
        return Err(KanError::ShapeMismatch {
            op: "knots_from_params",
            expected: format!("interior >= 1, left = right = {ext}"),
            got: format!("{}, {}, {}", p.interior.len(), p.left.len(), p.right.len()),
        });
    }
    if p.to_vec().iter().any(|v| v.is_nan()) {
        return Err(KanError::NotANumber("free-knot logits"));
    }
    let mut knots = Vec::with_capacity(n + 2 * order - 1);
    if order >= 2 {
        let lo = a - p.left_width;
        knots.push(lo);
        knots.extend(cumulative(lo, p.left_width, &p.left));
    }
    knots.push(a);
    knots.extend(cumulative(a, b - a, &p.interior));
    knots.push(b);
    if order >= 2 {
        knots.extend(cumulative(b, p.right_width, &p.right));
        knots.push(b + p.right_width);
    }
    KnotVector::new(order, n, knots)
}

/// Partial sums `start + width * Σ_{j<=i} frac_j` for all but the last gap.
fn cumulative(start: f64, width: f64, logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let fr = gap_fractions(logits);
    let mut acc = 0.0;
    fr[..fr.len() - 1]
        .iter()
        .map(|f| {
            acc += f;
            start + width * acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_knots(rng: &mut ChaCha8Rng, n: usize, r: usize) -> KnotVector {
        let mut interior = vec![0.0];
        for _ in 0..n {
            let last = *interior.last().unwrap();
            interior.push(last + rng.gen_range(0.2..1.0));
        }
        let scale = interior[n];
        let interior: Vec<f64> = interior.iter().map(|t| -1.0 + 2.0 * t / scale).collect();
        let mut kv = KnotVector::from_interior(&interior, r).unwrap();
        // Perturb the extension knots so they are non-uniform too.
        let mut knots = kv.knots().to_vec();
        for k in 0..r.saturating_sub(1) {
            knots[k] -= 0.1 * rng.gen::<f64>() / (k + 1) as f64;
        }
        kv = KnotVector::new(r, n, knots).unwrap();
        kv
    }

    #[test]
    fn uniform_knot_examples() {
        let kv = make_uniform_knots(0.0, 1.0, 2, 2).unwrap();
        assert_eq!(kv.knots(), &[-0.5, 0.0, 0.5, 1.0, 1.5]);
        let kv = make_uniform_knots(0.0, 1.0, 4, 1).unwrap();
        assert_eq!(kv.knots(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let kv = make_uniform_knots(-3.0, 3.0, 6, 2).unwrap();
        assert_eq!(kv.interior(), &[-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(kv.dim(), 7);
        assert_eq!(kv.knot(-1), -4.0);
        assert_eq!(kv.knot(7), 4.0);
    }

    #[test]
    fn uniform_knot_errors() {
        assert!(make_uniform_knots(1.0, 1.0, 2, 2).is_err());
        assert!(make_uniform_knots(2.0, 1.0, 2, 2).is_err());
        assert!(make_uniform_knots(0.0, 1.0, 0, 2).is_err());
        assert!(make_uniform_knots(0.0, 1.0, 2, 0).is_err());
    }

    #[test]
    fn rejects_degenerate_knots() {
        let err = KnotVector::new(2, 2, vec![-1.0, 0.0, 0.0, 1.0, 2.0]).unwrap_err();
        assert!(matches!(err, KanError::DegenerateKnots { index: 1, .. }));
    }

    #[test]
    fn free_knot_examples() {
        let p = FreeKnotParam::zeros(0.0, 1.0, 4, 1);
        let kv = knots_from_params(0.0, 1.0, &p, 1).unwrap();
        for (t, e) in kv.knots().iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((t - e).abs() < 1e-15);
        }

        let mut p = FreeKnotParam::zeros(0.0, 1.0, 2, 2);
        p.interior = vec![3f64.ln(), 0.0];
        let kv = knots_from_params(0.0, 1.0, &p, 2).unwrap();
        assert!((kv.knot(1) - 0.75).abs() < 1e-11);
        assert_eq!(kv.knot(-1), -1.0);
        assert_eq!(kv.knot(3), 2.0);

        for pos in 0..4 {
            let mut p = FreeKnotParam::zeros(0.0, 1.0, 4, 3);
            p.interior[pos] = 50.0;
            p.left[pos % 2] = 50.0;
            let kv = knots_from_params(0.0, 1.0, &p, 3).unwrap();
            assert!(kv.knots().windows(2).all(|w| w[0] < w[1]));
            assert_eq!(kv.a(), 0.0);
            assert_eq!(kv.b(), 1.0);
        }
    }

    #[test]
    fn free_knot_shape_mismatch() {
        let mut p = FreeKnotParam::zeros(0.0, 1.0, 4, 3);
        p.left.pop();
        assert!(knots_from_params(0.0, 1.0, &p, 3).is_err());
    }

    #[test]
    fn free_knot_roundtrip_through_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for r in 1..=4 {
            let mut p = FreeKnotParam::zeros(-1.0, 1.0, 5, r);
            let mut v = p.to_vec();
            v.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
            p.set_from_slice(&v);
            let kv = knots_from_params(-1.0, 1.0, &p, r).unwrap();
            let back = FreeKnotParam::from_knots(&kv);
            let kv2 = knots_from_params(-1.0, 1.0, &back, r).unwrap();
            for (s, t) in kv.knots().iter().zip(kv2.knots()) {
                assert!((s - t).abs() < 1e-13, "r={r}: {s} vs {t}");
            }
        }
    }

    #[test]
    fn indicator_basis_for_order_one() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 1).unwrap();
        let b = eval_bspline_basis(&kv, 0.3).unwrap();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 0.0]);
        // Half-open intervals, last one closed.
        assert_eq!(eval_bspline_basis(&kv, 0.25).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(eval_bspline_basis(&kv, 1.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn hat_functions_peak_at_middle_knot() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        for m in 0..kv.dim() {
            let t = |j: usize| kv.knots()[j];
            let mid = t(m + 1);
            if kv.contains(mid) {
                assert!((eval_bspline_basis(&kv, mid).unwrap()[m] - 1.0).abs() < 1e-15);
            }
            for edge in [t(m), t(m + 2)] {
                if kv.contains(edge) {
                    assert_eq!(eval_bspline_basis(&kv, edge).unwrap()[m], 0.0);
                }
            }
        }
    }

    #[test]
    fn nan_rejected() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        assert!(eval_bspline_basis(&kv, f64::NAN).is_err());
    }

    #[test]
    fn trunc_power_examples() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        assert!(eval_trunc_power_basis(&kv, -5.0).iter().all(|&v| v == 0.0));
        let t = kv.knot(1);
        let v = eval_trunc_power_basis(&kv, t + 0.3);
        assert!((v[2] - 0.3).abs() < 1e-15);
        let kv = make_uniform_knots(0.0, 1.0, 4, 3).unwrap();
        let t = kv.knot(0);
        let v = eval_trunc_power_basis(&kv, t + 0.5);
        assert!((v[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for r in 1..=4 {
            for trial in 0..5 {
                let kv = if trial == 0 {
                    make_uniform_knots(-1.0, 1.0, 7, r).unwrap()
                } else {
                    random_knots(&mut rng, 6 + trial, r)
                };
                for _ in 0..2000 {
                    let x = rng.gen_range(kv.a()..=kv.b());
                    let b = eval_bspline_basis(&kv, x).unwrap();
                    let s: f64 = b.iter().sum();
                    assert!((s - 1.0).abs() <= 1e-12, "r={r} sum={s}");
                    for (m, v) in b.iter().enumerate() {
                        let k = kv.knots();
                        if x < k[m] || x > k[m + r] {
                            assert_eq!(*v, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn continuity_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 2..=4 {
            let kv = random_knots(&mut rng, 8, r);
            for &t in &kv.interior()[1..kv.intervals()] {
                let eps = 1e-12;
                let lo = eval_bspline_basis(&kv, t - eps).unwrap();
                let hi = eval_bspline_basis(&kv, t + eps).unwrap();
                for (l, h) in lo.iter().zip(&hi) {
                    assert!((l - h).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for r in 1..=5 {
            let kv = random_knots(&mut rng, 6, r);
            for _ in 0..200 {
                let x = rng.gen_range(kv.a() + 1e-3..kv.b() - 1e-3);
                if kv.knots().iter().any(|t| (t - x).abs() < 1e-4) {
                    continue;
                }
                let mut vals = [0.0; MAX_ORDER];
                let mut ders = [0.0; MAX_ORDER];
                let first = kv.nonzero_basis_with_derivs(x, &mut vals, &mut ders);
                let h = 1e-6;
                let up = eval_bspline_basis(&kv, x + h).unwrap();
                let dn = eval_bspline_basis(&kv, x - h).unwrap();
                for j in 0..r {
                    let fd = (up[first + j] - dn[first + j]) / (2.0 * h);
                    assert!((fd - ders[j]).abs() < 1e-5 * (1.0 + fd.abs()), "r={r}");
                }
            }
        }
    }

    #[test]
    fn random_free_knots_are_strictly_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let r = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=12);
            let mut p = FreeKnotParam::zeros(-1.0, 1.0, n, r);
            let mut v = p.to_vec();
            v.iter_mut().for_each(|x| *x = rng.gen_range(-8.0..8.0));
            p.set_from_slice(&v);
            let kv = knots_from_params(-1.0, 1.0, &p, r).unwrap();
            assert!(kv.knots().windows(2).all(|w| w[0] < w[1]));
            assert_eq!(kv.a(), -1.0);
            assert_eq!(kv.b(), 1.0);
        }
    }
}
