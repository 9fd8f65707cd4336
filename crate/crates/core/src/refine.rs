//! Nested knot refinement and exact prolongation of layer weights.
//!
//! Coarse B-splines are written in the fine basis by inserting the new knots
//! one at a time (Boehm's rule). With `ℐ` the resulting `coarse × fine`
//! matrix, `b_{i,T}(x) = Σ_j ℐ_ij b_{j,T'}(x)` on `[a, b]`, so mapping each
//! weight fiber `w ↦ ℐᵀ w` leaves a layer's function unchanged.

use crate::cob::{apply_cob, apply_cob_inverse, ChangeOfBasis};
use crate::error::{KanError, Result};
use crate::net::{KanLayer, Layer, Network};
use crate::spline::{BasisKind, FreeKnotParam, KnotVector};
use crate::tensor::Tensor;

/// Relative tolerance when matching coarse knots inside the fine set.
const NEST_TOL: f64 = 1e-12;

/// Prolongation between nested knot vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOp {
    pub coarse: KnotVector,
    pub fine: KnotVector,
    /// `coarse.dim() × fine.dim()` interpolation weights.
    pub weights: Tensor,
}

impl RefinementOp {
    /// `W'_{qpj} = Σ_i W_{qpi} ℐ_ij`.
    pub fn prolong(&self, w: &Tensor) -> Result<Tensor> {
        let (cd, fd) = (self.coarse.dim(), self.fine.dim());
        let s = w.shape();
        if s.len() != 3 || s[2] != cd {
            return Err(crate::error::shape_err("prolong", format!("[Q, P, {cd}]"), s));
        }
        let fibers = w.len() / cd;
        let mut out = vec![0.0; fibers * fd];
        let iw = self.weights.data();
        for f in 0..fibers {
            let src = &w.data()[f * cd..(f + 1) * cd];
            let dst = &mut out[f * fd..(f + 1) * fd];
            for (i, &wi) in src.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                for (d, &c) in dst.iter_mut().zip(&iw[i * fd..(i + 1) * fd]) {
                    *d += wi * c;
                }
            }
        }
        Tensor::new(vec![s[0], s[1], fd], out)
    }
}

/// Inserts the midpoint of every interval of the extended knot vector and
/// keeps `r - 1` extension knots per side, so `n' = 2n`.
pub fn subdivide_knots(kv: &KnotVector) -> Result<KnotVector> {
    let r = kv.order();
    let mut all = Vec::with_capacity(2 * kv.knots().len());
    for w in kv.knots().windows(2) {
        all.push(w[0]);
        all.push(0.5 * (w[0] + w[1]));
    }
    all.push(*kv.knots().last().expect("non-empty"));
    // Index of `a` in the merged list is 2 (r - 1).
    let start = 2 * (r - 1) - (r - 1);
    let n_fine = 2 * kv.intervals();
    let fine: Vec<f64> = all[start..start + n_fine + 2 * r - 1].to_vec();
    KnotVector::new(r, n_fine, fine)
}

fn nested(coarse: &KnotVector, fine: &KnotVector) -> Result<()> {
    let fk = fine.knots();
    let (lo, hi) = (fk[0], fk[fk.len() - 1]);
    let scale = (coarse.b() - coarse.a()).abs().max(1.0);
    let ck = coarse.knots();
    if lo < ck[0] - NEST_TOL * scale || hi > ck[ck.len() - 1] + NEST_TOL * scale {
        return Err(KanError::NotNested(if lo < ck[0] { lo } else { hi }));
    }
    for &t in ck.iter().filter(|&&t| t >= lo && t <= hi) {
        if !fk.iter().any(|&u| (u - t).abs() <= NEST_TOL * scale) {
            return Err(KanError::NotNested(t));
        }
    }
    Ok(())
}

/// Builds `ℐ` such that every coarse B-spline equals `Σ_j ℐ_ij b'_j` on `[a, b]`.
pub fn build_interpolation(coarse: &KnotVector, fine: &KnotVector) -> Result<RefinementOp> {
    let r = coarse.order();
    if fine.order() != r {
        return Err(KanError::InvalidArgument {
            what: "fine order",
            value: format!("{} (coarse order {r})", fine.order()),
        });
    }
    if fine.a() != coarse.a() || fine.b() != coarse.b() {
        return Err(KanError::NotNested(if fine.a() != coarse.a() { fine.a() } else { fine.b() }));
    }
    nested(coarse, fine)?;
    let scale = (coarse.b() - coarse.a()).abs().max(1.0);
    let mut u: Vec<f64> = coarse.knots().to_vec();
    let cd = coarse.dim();
    // m: cd × cur_dim, row-major.
    let mut m: Vec<Vec<f64>> = (0..cd)
        .map(|i| {
            let mut row = vec![0.0; cd];
            row[i] = 1.0;
            row
        })
        .collect();
    for &x in fine.knots() {
        if u.iter().any(|&t| (t - x).abs() <= NEST_TOL * scale) {
            continue;
        }
        let k = u.partition_point(|&t| t <= x) - 1;
        let dim = u.len() - r;
        let alpha = |j: usize| -> f64 {
            if j + r <= k + 1 {
                1.0
            } else if j > k {
                0.0
            } else {
                (x - u[j]) / (u[j + r - 1] - u[j])
            }
        };
        // N_j = α_j N'_j + (1 - α_{j+1}) N'_{j+1}
        let coeffs: Vec<(f64, f64)> = (0..dim).map(|j| (alpha(j), 1.0 - alpha(j + 1))).collect();
        for row in &mut m {
            let mut next = vec![0.0; dim + 1];
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    next[j] += v * coeffs[j].0;
                    next[j + 1] += v * coeffs[j].1;
                }
            }
            *row = next;
        }
        u.insert(k + 1, x);
    }
    // Fine knots form a contiguous run of the merged vector.
    let first = u
        .iter()
        .position(|&t| (t - fine.knots()[0]).abs() <= NEST_TOL * scale)
        .ok_or(KanError::NotNested(fine.knots()[0]))?;
    let fd = fine.dim();
    let mut data = Vec::with_capacity(cd * fd);
    for row in &m {
        data.extend_from_slice(&row[first..first + fd]);
    }
    Ok(RefinementOp {
        coarse: coarse.clone(),
        fine: fine.clone(),
        weights: Tensor::new(vec![cd, fd], data)?,
    })
}

/// Linear map carrying one layer's parameters (or optimizer moments) from the
/// coarse to the fine layer.
#[derive(Debug, Clone)]
pub enum LayerTransfer {
    Identity(usize),
    Kan {
        coarse_basis: Option<ChangeOfBasis>,
        op: RefinementOp,
        fine_basis: Option<ChangeOfBasis>,
        shape: (usize, usize),
        coarse_logits: usize,
        fine_logits: usize,
    },
}

impl LayerTransfer {
    fn apply(&self, src: &[f64], logits: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            LayerTransfer::Identity(_) => Ok(src.to_vec()),
            LayerTransfer::Kan {
                coarse_basis,
                op,
                fine_basis,
                shape,
                coarse_logits,
                fine_logits,
            } => {
                let cd = op.coarse.dim();
                let nw = shape.0 * shape.1 * cd;
                let mut w = Tensor::new(vec![shape.0, shape.1, cd], src[..nw].to_vec())?;
                if let Some(a) = coarse_basis {
                    w = apply_cob_inverse(&w, a)?;
                }
                let mut fine = op.prolong(&w)?;
                if let Some(a) = fine_basis {
                    fine = apply_cob(&fine, a)?;
                }
                let mut out = fine.into_data();
                debug_assert_eq!(src.len(), nw + coarse_logits);
                match logits {
                    Some(l) => out.extend_from_slice(l),
                    None => out.extend(std::iter::repeat_n(0.0, *fine_logits)),
                }
                Ok(out)
            }
        }
    }

    fn coarse_len(&self) -> usize {
        match self {
            LayerTransfer::Identity(n) => *n,
            LayerTransfer::Kan {
                op,
                shape,
                coarse_logits,
                ..
            } => shape.0 * shape.1 * op.coarse.dim() + coarse_logits,
        }
    }
}

/// A refined network plus the parameter-space prolongation that produced it.
#[derive(Debug, Clone)]
pub struct NetworkRefinement {
    pub fine: Network,
    pub transfers: Vec<LayerTransfer>,
}

impl NetworkRefinement {
    /// Prolongs a coarse parameter-shaped vector (such as an optimizer moment)
    /// with the weight map; knot-logit entries are reset to zero.
    pub fn prolong(&self, coarse: &[f64]) -> Result<Vec<f64>> {
        let total: usize = self.transfers.iter().map(LayerTransfer::coarse_len).sum();
        if coarse.len() != total {
            return Err(crate::error::shape_err("NetworkRefinement::prolong", total, coarse.len()));
        }
        let mut out = Vec::new();
        let mut off = 0;
        for t in &self.transfers {
            let n = t.coarse_len();
            out.extend(t.apply(&coarse[off..off + n], None)?);
            off += n;
        }
        Ok(out)
    }
}

/// Subdivides one KAN layer's grid and prolongs its weights exactly.
///
/// Truncated-power layers are mapped to the spline basis, refined and mapped
/// back. Free-knot layers refine their realized knots and re-derive logits.
pub fn refine_layer(layer: &KanLayer, op: &RefinementOp) -> Result<KanLayer> {
    let kv = layer.realized_knots()?;
    if kv != op.coarse {
        return Err(KanError::BasisMismatch("refinement operator was built for a different grid"));
    }
    let spline = layer.to_basis(BasisKind::Spline)?;
    let fine_w = op.prolong(&spline.weights)?;
    let mut fine = KanLayer::new(op.fine.clone(), BasisKind::Spline, fine_w, layer.free_knots.is_some())?;
    if layer.basis == BasisKind::TruncatedPower {
        let free = fine.free_knots.take();
        fine = fine.to_basis(BasisKind::TruncatedPower)?;
        fine.free_knots = free;
    }
    Ok(fine)
}

fn transfer_for(layer: &KanLayer) -> Result<(KanLayer, LayerTransfer)> {
    let coarse_kv = layer.realized_knots()?;
    let op = build_interpolation(&coarse_kv, &subdivide_knots(&coarse_kv)?)?;
    let fine = refine_layer(layer, &op)?;
    let relu = layer.basis == BasisKind::TruncatedPower;
    let transfer = LayerTransfer::Kan {
        coarse_basis: if relu { Some(ChangeOfBasis::for_knots(&coarse_kv)?) } else { None },
        fine_basis: if relu { Some(ChangeOfBasis::for_knots(&op.fine)?) } else { None },
        shape: (layer.outputs(), layer.inputs()),
        coarse_logits: layer.free_knots.as_ref().map_or(0, FreeKnotParam::logit_count),
        fine_logits: fine.free_knots.as_ref().map_or(0, FreeKnotParam::logit_count),
        op,
    };
    Ok((fine, transfer))
}

/// Refines every KAN layer once; MLP and linear layers are unchanged.
/// Normalization statistics carry over.
pub fn refine_network(net: &Network) -> Result<NetworkRefinement> {
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut transfers = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Kan(l) => {
                let (fine, t) = transfer_for(l)?;
                layers.push(Layer::Kan(fine));
                transfers.push(t);
            }
            other => {
                let n = other.clone();
                let len = match &n {
                    Layer::Mlp(m) => m.weights.len() + m.bias.len(),
                    Layer::Linear(m) => m.weights.len(),
                    Layer::Kan(_) => unreachable!(),
                };
                layers.push(n);
                transfers.push(LayerTransfer::Identity(len));
            }
        }
    }
    let mut fine = Network::new(layers, net.norms.clone())?;
    fine.frozen = net.frozen.clone();
    Ok(NetworkRefinement { fine, transfers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::{eval_bspline_basis, make_uniform_knots};

    #[test]
    fn subdivision_examples() {
        let kv = make_uniform_knots(0.0, 1.0, 2, 1).unwrap();
        let f = subdivide_knots(&kv).unwrap();
        assert_eq!(f.knots(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let kv = KnotVector::new(1, 2, vec![0.0, 0.2, 1.0]).unwrap();
        let f = subdivide_knots(&kv).unwrap();
        assert_eq!(f.interior(), &[0.0, 0.1, 0.2, 0.6, 1.0]);
        let kv = make_uniform_knots(-1.0, 1.0, 3, 3).unwrap();
        let f2 = subdivide_knots(&subdivide_knots(&kv).unwrap()).unwrap();
        assert_eq!(f2.intervals(), 12);
        assert_eq!(f2.knots().len(), 12 + 2 * 3 - 1);
    }

    #[test]
    fn indicator_rows_are_two_ones() {
        let kv = make_uniform_knots(0.0, 1.0, 3, 1).unwrap();
        let op = build_interpolation(&kv, &subdivide_knots(&kv).unwrap()).unwrap();
        for i in 0..3 {
            let row: Vec<f64> = (0..6).map(|j| op.weights.at2(i, j)).collect();
            let mut expected = vec![0.0; 6];
            expected[2 * i] = 1.0;
            expected[2 * i + 1] = 1.0;
            assert_eq!(row, expected);
        }
    }

    #[test]
    fn hat_refines_to_half_one_half() {
        let kv = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        let fine = subdivide_knots(&kv).unwrap();
        let op = build_interpolation(&kv, &fine).unwrap();
        // Coarse hat m peaks at the coarse knot with fine index 2m.
        for m in 1..4 {
            let row: Vec<f64> = (0..fine.dim()).map(|j| op.weights.at2(m, j)).collect();
            let nz: Vec<(usize, f64)> = row.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            assert_eq!(nz, vec![(2 * m - 1, 0.5), (2 * m, 1.0), (2 * m + 1, 0.5)]);
        }
    }

    #[test]
    fn column_sums_are_one() {
        for r in 1..=4 {
            let kv = make_uniform_knots(-1.0, 1.0, 5, r).unwrap();
            let op = build_interpolation(&kv, &subdivide_knots(&kv).unwrap()).unwrap();
            for j in 0..op.fine.dim() {
                let s: f64 = (0..kv.dim()).map(|i| op.weights.at2(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-14, "r={r} j={j} {s}");
            }
        }
    }

    #[test]
    fn basis_identity_on_domain() {
        for r in 1..=4 {
            let kv = KnotVector::new(r, 3, {
                let mut k: Vec<f64> = (0..3 + 2 * r - 1).map(|i| i as f64 * 0.3).collect();
                k[r] += 0.05;
                k
            })
            .unwrap();
            let fine = subdivide_knots(&kv).unwrap();
            let op = build_interpolation(&kv, &fine).unwrap();
            for s in 0..=200 {
                let x = kv.a() + (kv.b() - kv.a()) * s as f64 / 200.0;
                let bc = eval_bspline_basis(&kv, x).unwrap();
                let bf = eval_bspline_basis(&fine, x).unwrap();
                for (i, c) in bc.iter().enumerate() {
                    let v: f64 = (0..fine.dim()).map(|j| op.weights.at2(i, j) * bf[j]).sum();
                    assert!((v - c).abs() < 1e-12, "r={r} x={x}");
                }
            }
        }
    }

    #[test]
    fn rejects_non_nested() {
        let kv = make_uniform_knots(0.0, 1.0, 3, 2).unwrap();
        let other = make_uniform_knots(0.0, 1.0, 4, 2).unwrap();
        assert!(matches!(build_interpolation(&kv, &other), Err(KanError::NotNested(_))));
        let kv3 = make_uniform_knots(0.0, 1.0, 3, 3).unwrap();
        assert!(build_interpolation(&kv3, &subdivide_knots(&kv).unwrap()).is_err());
    }

    #[test]
    fn zero_layer_stays_zero() {
        let kv = make_uniform_knots(-1.0, 1.0, 3, 3).unwrap();
        let layer = KanLayer::new(kv.clone(), BasisKind::Spline, Tensor::zeros(&[2, 2, kv.dim()]), false).unwrap();
        let op = build_interpolation(&kv, &subdivide_knots(&kv).unwrap()).unwrap();
        let fine = refine_layer(&layer, &op).unwrap();
        assert!(fine.weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_layer_stays_constant() {
        let kv = make_uniform_knots(-1.0, 1.0, 3, 3).unwrap();
        let layer = KanLayer::new(kv.clone(), BasisKind::Spline, Tensor::full(&[1, 2, kv.dim()], 0.5), false).unwrap();
        let op = build_interpolation(&kv, &subdivide_knots(&kv).unwrap()).unwrap();
        let fine = refine_layer(&layer, &op).unwrap();
        assert!(fine.weights.data().iter().all(|&v| (v - 0.5).abs() < 1e-14));
    }
}
