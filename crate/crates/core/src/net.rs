//! KAN layers in both bases, reordered MLP layers and their composition.
//!
//! A network is a list of layers, each preceded by an optional per-column
//! min–max normalization onto the layer's domain. Trainable state is exposed
//! as one flat parameter vector (layer by layer: weights, then knot logits or
//! biases) so optimizers never need to know the layer structure.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ColumnAffine, Tape, Var};
use crate::cob::{apply_cob, ChangeOfBasis};
use crate::error::{shape_err, KanError, Result};
use crate::spline::{
    extension_logit_count, knots_from_params, make_uniform_knots, BasisKind, FreeKnotParam, KnotVector,
    MIN_GAP_FRACTION,
};
use crate::tensor::Tensor;

/// Flops per multiply–add in the cost model.
pub const FLOPS_PER_MAC: u64 = 2;

/// KAN layer `y_q = Σ_p Σ_i W_qpi φ_i(x_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub knots: KnotVector,
    pub basis: BasisKind,
    /// `Q × P × (n + r - 1)` coefficients in the coordinates of `basis`.
    pub weights: Tensor,
    pub free_knots: Option<FreeKnotParam>,
}

/// Reordered MLP layer `y_q = Σ_p W_qp ReLU(x_p - t_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Bias-free linear layer `y = W x`, the entry layer of reordered MLPs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weights: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Kan(KanLayer),
    Mlp(MlpLayer),
    Linear(LinearLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    UniformMinMax,
    None,
}

/// How normalization statistics are obtained during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Min–max of the current batch; refreshes the stored affine maps.
    Batch,
    /// Reuse the stored affine maps.
    Frozen,
}

impl KanLayer {
    pub fn new(knots: KnotVector, basis: BasisKind, weights: Tensor, free: bool) -> Result<Self> {
        let c = knots.dim();
        if weights.shape().len() != 3 || weights.shape()[2] != c {
            return Err(shape_err("KanLayer::new", format!("[Q, P, {c}]"), weights.shape()));
        }
        if basis == BasisKind::TruncatedPower && knots.order() < 2 {
            return Err(KanError::InvalidArgument {
                what: "order for the truncated-power basis",
                value: knots.order().to_string(),
            });
        }
        if free && knots.order() < 2 {
            return Err(KanError::InvalidArgument {
                what: "order for free knots",
                value: knots.order().to_string(),
            });
        }
        let free_knots = free.then(|| FreeKnotParam::from_knots(&knots));
        Ok(Self {
            knots,
            basis,
            weights,
            free_knots,
        })
    }

    /// Layer on uniform knots with weights drawn from `U(-σ, σ)`,
    /// `σ = (P (n + r - 1))^{-1/2}`.
    pub fn random(
        inputs: usize,
        outputs: usize,
        knots: KnotVector,
        basis: BasisKind,
        free: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = knots.dim();
        let sigma = 1.0 / ((inputs * c) as f64).sqrt();
        let dist = Uniform::new_inclusive(-sigma, sigma);
        let data = (0..outputs * inputs * c).map(|_| dist.sample(rng)).collect();
        Self::new(knots, basis, Tensor::new(vec![outputs, inputs, c], data)?, free)
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Knot vector currently realized by the layer.
    pub fn realized_knots(&self) -> Result<KnotVector> {
        match &self.free_knots {
            Some(p) => knots_from_params(self.knots.a(), self.knots.b(), p, self.knots.order()),
            None => Ok(self.knots.clone()),
        }
    }

    /// The same function expressed in the other basis.
    pub fn to_basis(&self, basis: BasisKind) -> Result<Self> {
        if basis == self.basis {
            return Ok(self.clone());
        }
        let kv = self.realized_knots()?;
        let a = ChangeOfBasis::for_knots(&kv)?;
        let weights = match basis {
            BasisKind::TruncatedPower => apply_cob(&self.weights, &a)?,
            BasisKind::Spline => crate::cob::apply_cob_inverse(&self.weights, &a)?,
        };
        let mut out = Self::new(kv, basis, weights, false)?;
        out.free_knots = self.free_knots.clone();
        Ok(out)
    }
}

impl MlpLayer {
    /// Weights from `U(-P^{-1/2}, P^{-1/2})`, biases from `U(-1, 1)`.
    pub fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (inputs as f64).sqrt();
        let wd = Uniform::new_inclusive(-s, s);
        let bd = Uniform::new_inclusive(-1.0, 1.0);
        let w = (0..outputs * inputs).map(|_| wd.sample(rng)).collect();
        let bias = (0..inputs).map(|_| bd.sample(rng)).collect();
        Self {
            weights: Tensor::new(vec![outputs, inputs], w).expect("sized"),
            bias,
        }
    }
}

impl LinearLayer {
    pub fn random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (inputs as f64).sqrt();
        let wd = Uniform::new_inclusive(-s, s);
        let w = (0..outputs * inputs).map(|_| wd.sample(rng)).collect();
        Self {
            weights: Tensor::new(vec![outputs, inputs], w).expect("sized"),
        }
    }
}

impl Layer {
    pub fn inputs(&self) -> usize {
        match self {
            Layer::Kan(l) => l.inputs(),
            Layer::Mlp(l) => l.weights.cols(),
            Layer::Linear(l) => l.weights.cols(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Layer::Kan(l) => l.outputs(),
            Layer::Mlp(l) => l.weights.rows(),
            Layer::Linear(l) => l.weights.rows(),
        }
    }

    /// Interval the layer expects its inputs in.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            Layer::Kan(l) => (l.knots.a(), l.knots.b()),
            _ => (-1.0, 1.0),
        }
    }

    fn param_len(&self) -> usize {
        match self {
            Layer::Kan(l) => l.weights.len() + l.free_knots.as_ref().map_or(0, FreeKnotParam::logit_count),
            Layer::Mlp(l) => l.weights.len() + l.bias.len(),
            Layer::Linear(l) => l.weights.len(),
        }
    }
}

/// Feed-forward composition of layers with per-layer input normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub norms: Vec<Normalization>,
    /// Last affine maps used by each normalized layer.
    pub frozen: Vec<Option<ColumnAffine>>,
}

/// Architecture of a KAN built by [`Network::kan`].
#[derive(Debug, Clone, PartialEq)]
pub struct KanSpec {
    pub widths: Vec<usize>,
    pub intervals: usize,
    pub order: usize,
    pub basis: BasisKind,
    pub free_knots: bool,
    pub domain: (f64, f64),
}

impl Network {
    pub fn new(layers: Vec<Layer>, norms: Vec<Normalization>) -> Result<Self> {
        if layers.is_empty() || norms.len() != layers.len() {
            return Err(shape_err("Network::new", layers.len(), norms.len()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(KanError::ShapeMismatch {
                    op: "Network::new",
                    expected: format!("layer {} inputs = {}", i + 1, w[0].outputs()),
                    got: w[1].inputs().to_string(),
                });
            }
        }
        let frozen = vec![None; layers.len()];
        Ok(Self { layers, norms, frozen })
    }

    /// KAN with the same uniform grid and basis on every layer and min–max
    /// normalization in front of each layer.
    pub fn kan(spec: &KanSpec, seed: u64) -> Result<Self> {
        if spec.widths.len() < 2 {
            return Err(shape_err("Network::kan", ">= 2 widths", spec.widths.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = spec.domain;
        let mut layers = Vec::new();
        for w in spec.widths.windows(2) {
            let kv = make_uniform_knots(a, b, spec.intervals, spec.order)?;
            layers.push(Layer::Kan(KanLayer::random(w[0], w[1], kv, spec.basis, spec.free_knots, &mut rng)?));
        }
        let norms = vec![Normalization::UniformMinMax; layers.len()];
        Self::new(layers, norms)
    }

    /// Reordered ReLU MLP: a linear layer followed by
    /// `W σ(x - t)` layers. Only the network input is normalized.
    pub fn mlp(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(shape_err("Network::mlp", ">= 3 widths", widths.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::Linear(LinearLayer::random(widths[0], widths[1], &mut rng))];
        for w in widths[1..].windows(2) {
            layers.push(Layer::Mlp(MlpLayer::random(w[0], w[1], &mut rng)));
        }
        let mut norms = vec![Normalization::None; layers.len()];
        norms[0] = Normalization::UniformMinMax;
        Self::new(layers, norms)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_len).sum()
    }

    /// Flat copy of all trainable parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Kan(l) => {
                    out.extend_from_slice(l.weights.data());
                    if let Some(p) = &l.free_knots {
                        out.extend(p.to_vec());
                    }
                }
                Layer::Mlp(l) => {
                    out.extend_from_slice(l.weights.data());
                    out.extend_from_slice(&l.bias);
                }
                Layer::Linear(l) => out.extend_from_slice(l.weights.data()),
            }
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(shape_err("Network::set_params", self.param_count(), theta.len()));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &theta[off..off + n];
            off += n;
            s
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Kan(l) => {
                    let n = l.weights.len();
                    l.weights.data_mut().copy_from_slice(take(n));
                    if let Some(p) = &mut l.free_knots {
                        let m = p.logit_count();
                        p.set_from_slice(take(m));
                    }
                }
                Layer::Mlp(l) => {
                    let n = l.weights.len();
                    l.weights.data_mut().copy_from_slice(take(n));
                    let m = l.bias.len();
                    l.bias.copy_from_slice(take(m));
                }
                Layer::Linear(l) => {
                    let n = l.weights.len();
                    l.weights.data_mut().copy_from_slice(take(n));
                }
            }
        }
        Ok(())
    }

    /// Mask of parameters that are knot logits.
    pub fn knot_logit_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let n = layer.param_len();
            let logits = match layer {
                Layer::Kan(l) => l.free_knots.as_ref().map_or(0, FreeKnotParam::logit_count),
                _ => 0,
            };
            out.extend(std::iter::repeat_n(false, n - logits));
            out.extend(std::iter::repeat_n(true, logits));
        }
        out
    }

    /// Records the forward pass on `tape`. Returns the output and the
    /// parameter leaves in flat-parameter order.
    pub fn record(&mut self, tape: &mut Tape, x: &Tensor, mode: NormMode, track: bool) -> Result<(Var, Vec<Var>)> {
        if x.shape().len() != 2 || x.cols() != self.inputs() {
            return Err(shape_err("network_forward", format!("[D, {}]", self.inputs()), x.shape()));
        }
        if x.has_nan() {
            return Err(KanError::NotANumber("network input"));
        }
        let mut h = tape.constant(x.clone());
        let mut leaves = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if self.norms[idx] == Normalization::UniformMinMax {
                let (lo, hi) = layer.domain();
                h = match mode {
                    NormMode::Batch => {
                        let (v, aff) = tape.minmax_normalize(h, lo, hi)?;
                        self.frozen[idx] = Some(aff);
                        v
                    }
                    NormMode::Frozen => {
                        let aff = self.frozen[idx]
                            .as_ref()
                            .ok_or(KanError::InvalidArgument {
                                what: "frozen normalization",
                                value: format!("layer {idx} has no stored statistics"),
                            })?;
                        tape.column_affine(h, aff)?
                    }
                };
            }
            h = record_layer(tape, layer, h, track, &mut leaves)?;
        }
        Ok((h, leaves))
    }

    /// Network output for a batch.
    pub fn forward(&mut self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (y, _) = self.record(&mut tape, x, mode, false)?;
        let out = tape.value(y).clone();
        if out.has_nan() {
            return Err(KanError::NotANumber("network output"));
        }
        Ok(out)
    }

    /// Mean squared error and its gradient with respect to [`Network::params`],
    /// using batch normalization statistics.
    pub fn loss_and_grad(&mut self, x: &Tensor, y: &Tensor) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let (pred, leaves) = self.record(&mut tape, x, NormMode::Batch, true)?;
        let loss = tape.mse(pred, y)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(KanError::NotANumber("loss"));
        }
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(self.param_count());
        for v in leaves {
            g.extend(grads.flat(v, tape.value(v).len()));
        }
        Ok((value, g))
    }

    /// Mean squared error with batch normalization statistics.
    pub fn loss(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let pred = self.forward(x, NormMode::Batch)?;
        if pred.shape() != y.shape() {
            return Err(shape_err("Network::loss", y.shape(), pred.shape()));
        }
        Ok(mse(&pred, y))
    }
}

pub fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    let n = pred.len() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

fn record_layer(tape: &mut Tape, layer: &Layer, h: Var, track: bool, leaves: &mut Vec<Var>) -> Result<Var> {
    let mut leaf = |tape: &mut Tape, t: Tensor| {
        let v = if track { tape.param(t) } else { tape.constant(t) };
        leaves.push(v);
        v
    };
    match layer {
        Layer::Linear(l) => {
            let w = leaf(tape, l.weights.clone());
            tape.contract(h, w)
        }
        Layer::Mlp(l) => {
            let w = leaf(tape, l.weights.clone());
            let t = leaf(tape, Tensor::vector(l.bias.clone()));
            let d = tape.sub_columns(h, t)?;
            let f = tape.relu_pow(d, 1)?;
            tape.contract(f, w)
        }
        Layer::Kan(l) => {
            let r = l.knots.order();
            let c = l.knots.dim();
            let w = leaf(tape, l.weights.clone());
            match &l.free_knots {
                None => match l.basis {
                    BasisKind::Spline => tape.spline_layer(h, w, &l.knots),
                    BasisKind::TruncatedPower => {
                        let shifts = tape.constant(Tensor::vector(l.knots.shifts().to_vec()));
                        let d = tape.shift_outer(h, shifts)?;
                        let f = tape.relu_pow(d, (r - 1) as u32)?;
                        tape.contract(f, w)
                    }
                },
                Some(p) => {
                    let s = leaf(tape, Tensor::vector(p.to_vec()));
                    let knots = record_knots(tape, l.knots.a(), l.knots.b(), p, r, s)?;
                    let shifts = tape.slice(knots, 0, c)?;
                    let d = tape.shift_outer(h, shifts)?;
                    let f = tape.relu_pow(d, (r - 1) as u32)?;
                    let weights = match l.basis {
                        BasisKind::Spline => {
                            let a = tape.cob_matrix(knots, r)?;
                            tape.mode3(w, a)?
                        }
                        BasisKind::TruncatedPower => w,
                    };
                    tape.contract(f, weights)
                }
            }
        }
    }
}

/// Differentiable version of [`knots_from_params`]; `logits` holds the
/// flattened interior, left and right logits.
pub fn record_knots(tape: &mut Tape, a: f64, b: f64, p: &FreeKnotParam, order: usize, logits: Var) -> Result<Var> {
    if tape.value(logits).has_nan() {
        return Err(KanError::NotANumber("free-knot logits"));
    }
    let n = p.interior.len();
    let ext = extension_logit_count(order);
    let mut parts = Vec::new();
    let segment = |tape: &mut Tape, parts: &mut Vec<Var>, off: usize, m: usize, start: f64, width: f64| -> Result<()> {
        if m < 2 {
            return Ok(());
        }
        let s = tape.slice(logits, off, m)?;
        let sm = tape.softmax(s)?;
        let fr = tape.affine(sm, 1.0 - m as f64 * MIN_GAP_FRACTION, MIN_GAP_FRACTION);
        let cs = tape.cumsum(fr)?;
        let cs = tape.slice(cs, 0, m - 1)?;
        parts.push(tape.affine(cs, width, start));
        Ok(())
    };
    if order >= 2 {
        let lo = a - p.left_width;
        parts.push(tape.constant(Tensor::vector(vec![lo])));
        segment(tape, &mut parts, n, ext, lo, p.left_width)?;
    }
    parts.push(tape.constant(Tensor::vector(vec![a])));
    segment(tape, &mut parts, 0, n, a, b - a)?;
    parts.push(tape.constant(Tensor::vector(vec![b])));
    if order >= 2 {
        segment(tape, &mut parts, n + ext, ext, b, p.right_width)?;
        parts.push(tape.constant(Tensor::vector(vec![b + p.right_width])));
    }
    tape.concat(&parts)
}

/// Evaluates a single KAN layer on inputs already inside its domain.
pub fn kan_layer_forward(layer: &KanLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    if x.has_nan() {
        return Err(KanError::NotANumber("layer input"));
    }
    let h = tape.constant(x.clone());
    let y = record_layer(&mut tape, &Layer::Kan(layer.clone()), h, false, &mut Vec::new())?;
    Ok(tape.value(y).clone())
}

/// Evaluates `y_q = Σ_p W_qp ReLU(x_p - t_p)`.
pub fn mlp_layer_forward(layer: &MlpLayer, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.constant(x.clone());
    let y = record_layer(&mut tape, &Layer::Mlp(layer.clone()), h, false, &mut Vec::new())?;
    Ok(tape.value(y).clone())
}

/// Per-column affine map of `[min, max]` onto `[lo, hi]`; constant columns
/// map to the midpoint.
pub fn normalize_uniform(batch: &Tensor, lo: f64, hi: f64) -> Result<(Tensor, ColumnAffine)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let (y, aff) = tape.minmax_normalize(x, lo, hi)?;
    Ok((tape.value(y).clone(), aff))
}

/// Network output, using stored normalization maps when every normalized
/// layer has them and batch statistics otherwise.
pub fn network_forward(net: &mut Network, x: &Tensor) -> Result<Tensor> {
    let frozen_ready = net
        .norms
        .iter()
        .zip(&net.frozen)
        .all(|(n, f)| *n == Normalization::None || f.is_some());
    let mode = if frozen_ready { NormMode::Frozen } else { NormMode::Batch };
    net.forward(x, mode)
}

pub fn count_params(net: &Network) -> usize {
    net.param_count()
}

/// Forward cost per sample: `2 P Q (n + r)` for KAN layers, `2 P Q` for
/// linear and MLP layers (plus `P` bias subtractions).
pub fn count_flops_per_sample(net: &Network) -> u64 {
    net.layers
        .iter()
        .map(|layer| {
            let (p, q) = (layer.inputs() as u64, layer.outputs() as u64);
            match layer {
                Layer::Kan(l) => FLOPS_PER_MAC * p * q * (l.knots.intervals() + l.knots.order()) as u64,
                Layer::Mlp(_) => FLOPS_PER_MAC * p * q + p,
                Layer::Linear(_) => FLOPS_PER_MAC * p * q,
            }
        })
        .sum()
}
