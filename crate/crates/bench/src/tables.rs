//! The model variants compared in the regression tables.

use kan_core::spline::BasisKind;

use crate::config::{Architecture, ExperimentConfig, ModelKind, Problem};

pub const COARSE: [usize; 4] = [128, 0, 0, 0];
pub const FINE: [usize; 4] = [0, 0, 0, 16];
pub const MULTILEVEL: [usize; 4] = [32, 16, 8, 4];
/// Epochs for the MLP baselines, matching the coarse KAN budget.
pub const MLP_EPOCHS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    Coarse,
    Fine,
    Multilevel,
}

impl Fidelity {
    pub fn schedule(self) -> Vec<usize> {
        match self {
            Fidelity::Coarse => COARSE.to_vec(),
            Fidelity::Fine => FINE.to_vec(),
            Fidelity::Multilevel => MULTILEVEL.to_vec(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Fidelity::Coarse => "coarse",
            Fidelity::Fine => "fine",
            Fidelity::Multilevel => "multilevel",
        }
    }
}

/// A KAN row of the tables.
pub fn kan_variant(problem: Problem, basis: BasisKind, free_knots: bool, fidelity: Fidelity) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_problem(problem);
    cfg.architecture.basis = basis;
    cfg.architecture.free_knots = free_knots;
    cfg.schedule = fidelity.schedule();
    cfg
}

/// An MLP baseline row.
pub fn mlp_variant(problem: Problem, widths: &[usize]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_problem(problem);
    cfg.architecture = Architecture {
        kind: ModelKind::Mlp,
        widths: widths.to_vec(),
        ..Architecture::default()
    };
    cfg.schedule = vec![MLP_EPOCHS];
    cfg
}

/// Every row of the table for `problem`, in table order.
pub fn table_variants(problem: Problem) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    for basis in [BasisKind::TruncatedPower, BasisKind::Spline] {
        for f in [Fidelity::Coarse, Fidelity::Fine, Fidelity::Multilevel] {
            out.push((format!("{} {}", basis.label(), f.label()), kan_variant(problem, basis, false, f)));
        }
    }
    for basis in [BasisKind::TruncatedPower, BasisKind::Spline] {
        for f in [Fidelity::Coarse, Fidelity::Fine] {
            out.push((format!("{} {} free-knot", basis.label(), f.label()), kan_variant(problem, basis, true, f)));
        }
    }
    let mlps: &[&[usize]] = match problem {
        Problem::Nonsmooth => &[&[2, 5, 1], &[2, 30, 1], &[2, 20, 20, 1]],
        Problem::Xor => &[&[2, 5, 5, 1], &[2, 40, 40, 1]],
    };
    for w in mlps {
        let cfg = mlp_variant(problem, w);
        out.push((format!("mlp {}", cfg.architecture.label()), cfg));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_have_expected_rows() {
        assert_eq!(table_variants(Problem::Nonsmooth).len(), 13);
        assert_eq!(table_variants(Problem::Xor).len(), 12);
        for (_, cfg) in table_variants(Problem::Xor) {
            cfg.validate().unwrap();
            assert_eq!(cfg.model_seeds, vec![1232, 1233, 1234, 1235, 1236]);
        }
    }

    #[test]
    fn mlp_parameter_counts() {
        let count = |w: &[usize]| mlp_variant(Problem::Nonsmooth, w).architecture.build(0).unwrap().param_count();
        assert_eq!(count(&[2, 5, 1]), 20);
        assert_eq!(count(&[2, 30, 1]), 120);
        assert_eq!(count(&[2, 20, 20, 1]), 500);
        assert_eq!(count(&[2, 5, 5, 1]), 50);
        assert_eq!(count(&[2, 40, 40, 1]), 1800);
    }
}
