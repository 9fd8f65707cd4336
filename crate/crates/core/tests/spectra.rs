use kan_core::cob::{toeplitz_spectral_bound, ChangeOfBasis};
use kan_core::net::{KanSpec, Network, NormMode};
use kan_core::spectra::{
    conditioning_sweep, empirical_hessian, empirical_ntk, min_batch_size, spectral_radius, toeplitz_sweep,
};
use kan_core::spline::{BasisKind, KnotVector};
use kan_core::{KanError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn gram_conditioning_sweep() {
    let rep = conditioning_sweep(2, &[8, 16, 32, 64, 128]).unwrap();
    let s: Vec<f64> = rep.values("kappa_gram_spline").iter().map(|v| v.1).collect();
    let r: Vec<f64> = rep.values("kappa_gram_relu").iter().map(|v| v.1).collect();
    let (smin, smax) = s.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    assert!(smax / smin <= 4.0, "{s:?}");
    assert!(r[4] / r[0] >= 10.0, "{r:?}");
}

#[test]
fn hessian_conjugation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for r in 1..=4 {
        let kv = KnotVector::uniform(-1.0, 1.0, 6, r).unwrap();
        let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hs = empirical_hessian(&kv, BasisKind::Spline, &xs).unwrap();
        let hr = empirical_hessian(&kv, BasisKind::TruncatedPower, &xs).unwrap();
        let a = ChangeOfBasis::for_knots(&kv).unwrap().to_dense();
        let c = kv.dim();
        for i in 0..c {
            for j in 0..c {
                let mut v = 0.0;
                for k in 0..c {
                    for l in 0..c {
                        v += a[i][k] * hr.at2(k, l) * a[j][l];
                    }
                }
                assert!((v - hs.at2(i, j)).abs() <= 1e-10, "r={r} ({i},{j})");
            }
        }
    }
}

#[test]
fn ntk_ratio_stays_below_four() {
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let spec = KanSpec {
            widths: vec![2, 3, 1],
            intervals: rng.gen_range(3..9),
            order: 2 + (case % 2) as usize,
            basis: BasisKind::Spline,
            free_knots: false,
            domain: (-1.0, 1.0),
        };
        let mut net = Network::kan(&spec, case).unwrap();
        let x = Tensor::new(vec![30, 2], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        net.forward(&x, NormMode::Batch).unwrap();
        let rs = spectral_radius(&empirical_ntk(&net, &x, BasisKind::Spline).unwrap()).unwrap();
        let rr = spectral_radius(&empirical_ntk(&net, &x, BasisKind::TruncatedPower).unwrap()).unwrap();
        let ratio = rs / rr;
        assert!(ratio <= 4.0, "case {case}: {ratio}");
        worst = worst.max(ratio);
    }
    eprintln!("max NTK ratio {worst:.4}");
}

#[test]
fn ntk_requires_frozen_statistics_and_size_limits() {
    let spec = KanSpec {
        widths: vec![1, 1],
        intervals: 3,
        order: 2,
        basis: BasisKind::Spline,
        free_knots: false,
        domain: (-1.0, 1.0),
    };
    let net = Network::kan(&spec, 0).unwrap();
    let x = Tensor::zeros(&[2, 1]);
    assert!(empirical_ntk(&net, &x, BasisKind::Spline).is_err());
    let big = Tensor::zeros(&[201, 1]);
    assert!(matches!(empirical_ntk(&net, &big, BasisKind::Spline), Err(KanError::SizeGuard { .. })));
}

#[test]
fn scaled_cob_norm_approaches_generator_maximum() {
    for r in 1..=4 {
        let dims = [2, 4, 8, 16, 32, 64, 128, 256];
        let rep = toeplitz_sweep(r, &dims).unwrap();
        let vals: Vec<f64> = rep.rows.iter().map(|row| row.value).collect();
        let bound = toeplitz_spectral_bound(r);
        assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-3), "r={r}: {vals:?}");
        assert!(vals.iter().all(|v| *v <= bound + 1e-12));
        assert!(bound - vals[vals.len() - 1] <= 0.01 * bound, "r={r}: {vals:?}");
    }
}

#[test]
fn batch_size_for_a_tail_interval() {
    let z = Normal::new(0.0, 1.0).unwrap();
    let inside = z.cdf(-2.0) - z.cdf(-3.0);
    let n = min_batch_size(0.999, 1.0 - inside).unwrap();
    assert!((319..=321).contains(&n), "{n}");
}
