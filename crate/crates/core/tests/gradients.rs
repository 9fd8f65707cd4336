use kan_core::net::{KanSpec, Network};
use kan_core::spline::BasisKind;
use kan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative central-difference error over weights and over logits.
fn check(net: &mut Network, x: &Tensor, y: &Tensor) -> (f64, f64) {
    let theta = net.params();
    let mask = net.knot_logit_mask();
    let (_, g) = net.loss_and_grad(x, y).unwrap();
    let step = 1e-6;
    let (mut w_err, mut s_err) = (0.0f64, 0.0f64);
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        net.set_params(&probe).unwrap();
        let up = net.loss(x, y).unwrap();
        probe[i] = theta[i] - step;
        net.set_params(&probe).unwrap();
        let dn = net.loss(x, y).unwrap();
        probe[i] = theta[i];
        let fd = (up - dn) / (2.0 * step);
        let err = (g[i] - fd).abs() / (fd.abs().max(g[i].abs()) + 1e-7);
        if mask[i] {
            s_err = s_err.max(err);
        } else {
            w_err = w_err.max(err);
        }
    }
    net.set_params(&theta).unwrap();
    (w_err, s_err)
}

#[test]
fn autodiff_matches_finite_differences() {
    let mut worst = (0.0f64, 0.0f64);
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let r = 2 + (case % 3) as usize;
        let basis = if case % 2 == 0 { BasisKind::Spline } else { BasisKind::TruncatedPower };
        let free = case % 4 < 2;
        let widths = match case % 3 {
            0 => vec![2, 1],
            1 => vec![2, 3, 1],
            _ => vec![1, 2, 2],
        };
        let spec = KanSpec {
            widths: widths.clone(),
            intervals: rng.gen_range(2..6),
            order: r,
            basis,
            free_knots: free,
            domain: (-1.0, 1.0),
        };
        let mut net = Network::kan(&spec, case).unwrap();
        let mut theta = net.params();
        for (t, m) in theta.iter_mut().zip(net.knot_logit_mask()) {
            if m {
                *t = rng.gen_range(-0.5..0.5);
            }
        }
        net.set_params(&theta).unwrap();
        let d = 12;
        let x = Tensor::new(vec![d, widths[0]], (0..d * widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let q = *widths.last().unwrap();
        let y = Tensor::new(vec![d, q], (0..d * q).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (w, s) = check(&mut net, &x, &y);
        assert!(w <= 1e-5, "case {case}: weight error {w}");
        assert!(s <= 1e-4, "case {case}: logit error {s}");
        worst = (worst.0.max(w), worst.1.max(s));
    }
    eprintln!("worst relative errors: weights {:.2e}, logits {:.2e}", worst.0, worst.1);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = Network::mlp(&[2, 6, 6, 1], 4).unwrap();
    let x = Tensor::new(vec![10, 2], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = Tensor::new(vec![10, 1], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (w, _) = check(&mut net, &x, &y);
    assert!(w <= 1e-5, "{w}");
}

#[test]
fn gradients_are_bitwise_reproducible() {
    let spec = KanSpec {
        widths: vec![2, 4, 1],
        intervals: 5,
        order: 3,
        basis: BasisKind::Spline,
        free_knots: true,
        domain: (-1.0, 1.0),
    };
    let x = Tensor::new(vec![4, 2], vec![0.1, -0.3, 0.5, 0.9, -0.7, 0.2, 0.0, -1.0]).unwrap();
    let y = Tensor::new(vec![4, 1], vec![1.0, 0.0, -1.0, 0.5]).unwrap();
    let mut a = Network::kan(&spec, 7).unwrap();
    let mut b = Network::kan(&spec, 7).unwrap();
    let (la, ga) = a.loss_and_grad(&x, &y).unwrap();
    let (lb, gb) = b.loss_and_grad(&x, &y).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert!(ga.iter().zip(&gb).all(|(u, v)| u.to_bits() == v.to_bits()));
}
