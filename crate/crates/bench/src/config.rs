//! Experiment configuration, serializable as JSON.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use kan_core::net::{KanSpec, Network};
use kan_core::optim::OptimizerConfig;
use kan_core::spline::BasisKind;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Model seeds used for the nonsmooth problem.
pub const NONSMOOTH_SEEDS: [u64; 5] = [1234, 1235, 1236, 1237, 1238];
/// Model seeds used for the XOR problem.
pub const XOR_SEEDS: [u64; 5] = [1232, 1233, 1234, 1235, 1236];
/// Counterclockwise coordinate rotation applied to the nonsmooth target.
pub const DEFAULT_ROTATION: f64 = 0.175;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Nonsmooth,
    Xor,
}

impl Problem {
    pub fn label(self) -> &'static str {
        match self {
            Problem::Nonsmooth => "nonsmooth",
            Problem::Xor => "xor",
        }
    }

    pub fn default_seeds(self) -> Vec<u64> {
        match self {
            Problem::Nonsmooth => NONSMOOTH_SEEDS.to_vec(),
            Problem::Xor => XOR_SEEDS.to_vec(),
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Problem::Nonsmooth => vec![2, 5, 1],
            Problem::Xor => vec![2, 5, 5, 1],
        }
    }
}

impl FromStr for Problem {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonsmooth" => Ok(Problem::Nonsmooth),
            "xor" => Ok(Problem::Xor),
            other => Err(BenchError::Config(format!("unknown problem `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Kan,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub order: usize,
    pub intervals: usize,
    pub basis: BasisKind,
    pub free_knots: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            kind: ModelKind::Kan,
            widths: vec![2, 5, 1],
            order: 3,
            intervals: 3,
            basis: BasisKind::Spline,
            free_knots: false,
        }
    }
}

impl Architecture {
    /// Short label such as `kan[2,5,1]`.
    pub fn label(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        let kind = match self.kind {
            ModelKind::Kan => "kan",
            ModelKind::Mlp => "mlp",
        };
        format!("{kind}[{}]", w.join(","))
    }

    /// Fresh network for one model seed. KAN layers live on `[-1, 1]`.
    pub fn build(&self, seed: u64) -> Result<Network> {
        let net = match self.kind {
            ModelKind::Kan => Network::kan(
                &KanSpec {
                    widths: self.widths.clone(),
                    intervals: self.intervals,
                    order: self.order,
                    basis: self.basis,
                    free_knots: self.free_knots,
                    domain: (-1.0, 1.0),
                },
                seed,
            )?,
            ModelKind::Mlp => Network::mlp(&self.widths, seed)?,
        };
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub architecture: Architecture,
    pub schedule: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub data_seed: u64,
    pub model_seeds: Vec<u64>,
    pub data_count: usize,
    pub domain: [f64; 2],
    /// Signed counterclockwise rotation in radians (nonsmooth problem only).
    pub rotation: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Nonsmooth,
            architecture: Architecture::default(),
            schedule: vec![32, 16, 8, 4],
            optimizer: OptimizerConfig::default(),
            data_seed: 0,
            model_seeds: NONSMOOTH_SEEDS.to_vec(),
            data_count: 20_000,
            domain: [0.0001, 0.9999],
            rotation: DEFAULT_ROTATION,
        }
    }
}

impl ExperimentConfig {
    pub fn for_problem(problem: Problem) -> Self {
        let mut cfg = Self {
            problem,
            model_seeds: problem.default_seeds(),
            ..Self::default()
        };
        cfg.architecture.widths = problem.default_widths();
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        let a = &self.architecture;
        if a.widths.len() < 2 || a.widths.contains(&0) {
            return bad(format!("invalid widths {:?}", a.widths));
        }
        if a.widths[0] != 2 || a.widths[a.widths.len() - 1] != 1 {
            return bad("both problems map 2 inputs to 1 output".into());
        }
        if a.kind == ModelKind::Mlp && a.widths.len() < 3 {
            return bad("an MLP needs at least one hidden layer".into());
        }
        if a.kind == ModelKind::Kan {
            if a.order < 1 || a.order > kan_core::spline::MAX_ORDER || a.intervals < 1 {
                return bad(format!("invalid order {} / grid {}", a.order, a.intervals));
            }
            if (a.free_knots || a.basis == BasisKind::TruncatedPower) && a.order < 2 {
                return bad("ReLU basis and free knots need order >= 2".into());
            }
        }
        if self.schedule.is_empty() || self.schedule.iter().all(|&e| e == 0) {
            return bad(format!("schedule {:?} trains no epochs", self.schedule));
        }
        if a.kind == ModelKind::Mlp && self.schedule.len() > 1 {
            return bad("MLPs cannot be refined; use a single-level schedule".into());
        }
        if self.model_seeds.is_empty() {
            return bad("no model seeds".into());
        }
        if self.data_count < 2 {
            return bad(format!("data count {}", self.data_count));
        }
        let [lo, hi] = self.domain;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("domain {:?}", self.domain));
        }
        if !self.rotation.is_finite() {
            return bad("rotation must be finite".into());
        }
        match &self.optimizer {
            OptimizerConfig::Lbfgs(c) => c.validate()?,
            OptimizerConfig::Adam(c) => c.validate()?,
        }
        Ok(())
    }

    /// Desk-scale copy: dataset size and nonzero epoch counts are multiplied
    /// by `factor` (rounded up, at least one epoch and 16 samples).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(BenchError::Config(format!("scale {factor}")));
        }
        let mut cfg = self.clone();
        if factor != 1.0 {
            cfg.data_count = ((self.data_count as f64 * factor).round() as usize).max(16);
            cfg.schedule = self
                .schedule
                .iter()
                .map(|&e| if e == 0 { 0 } else { ((e as f64 * factor).ceil() as usize).max(1) })
                .collect();
        }
        Ok(cfg)
    }

    /// Schedule with trailing untrained levels removed; a final level that
    /// is never trained does not change the reported model.
    pub fn effective_schedule(&self) -> Vec<usize> {
        let mut s = self.schedule.clone();
        while s.len() > 1 && s[s.len() - 1] == 0 {
            s.pop();
        }
        s
    }

    /// Schedule in the `[32,16,8,4]` notation.
    pub fn schedule_label(&self) -> String {
        let s: Vec<String> = self.schedule.iter().map(usize::to_string).collect();
        format!("[{}]", s.join(","))
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.architecture;
        write!(f, "{} {} {}", self.problem.label(), a.label(), self.schedule_label())?;
        if a.kind == ModelKind::Kan {
            write!(f, " {} r={} n={}", a.basis.label(), a.order, a.intervals)?;
            if a.free_knots {
                write!(f, " free-knots")?;
            }
        }
        Ok(())
    }
}

/// Parses `32,16,8,4` (brackets optional).
pub fn parse_schedule(s: &str) -> Result<Vec<usize>> {
    s.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| BenchError::Config(format!("bad schedule entry `{p}`")))
        })
        .collect()
}
