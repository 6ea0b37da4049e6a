//! The rule-list network.
//!
//! Architecture, for binary inputs `x ∈ {0,1}^D`:
//!
//! ```text
//! gates    z = hard-concrete(loc)                  [R × D], in [0,1]
//! weights  w = W_S ∘ z                             [R × D]
//! rule     y_r = Σ_i w_ri x_i − Σ_{w_ri>0} w_ri + 1
//! norm     y_bn = batchnorm(y)
//! fire     b_r = 1[y_bn ≥ τ]     (straight-through surrogate backward)
//! order    h_k = b_k Π_{j<k}(1−b_j),  h_R = Π_{j<R}(1−b_j)
//! output   probs = softmax(hᵀ W_out)
//! ```
//!
//! With exactly ternary weights and binary inputs, `y_r = 1` iff the rule's
//! conjunction holds (every positive literal is 1, every negative literal
//! is 0), so the network is an ordered rule list: the first firing rule — or
//! the final default neuron — selects a row of `W_out`.
//!
//! Two regimes share this module. The *relaxed* forward keeps every stage
//! differentiable enough to train (sampled gates, batch norm, a scaled
//! sigmoid surrogate at the firing threshold). The *discrete* forward
//! quantizes gates at 0.5 and weights to {−1, 0, +1}, bypasses batch norm
//! and fires on `y_r ≥ 1 − 1e−6`; it is the semantics the extracted rule
//! list must reproduce exactly.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor keeping gate noise strictly inside (0, 1).
pub const GATE_NOISE_EPS: f64 = 1e-6;
/// Variance floor for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Gated weights below this magnitude are treated as excluded when
/// quantizing to ternary.
pub const TERNARY_DEADBAND: f64 = 1e-3;
/// Discrete firing test `y ≥ 1 − DISCRETE_FIRE_TOL`, exact for ternary
/// weights where y is integer-valued.
pub const DISCRETE_FIRE_TOL: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stretched, clamped binary relaxation gating each rule weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardConcreteGate {
    /// Logits controlling mask sampling, `[R × D]`.
    pub loc: Array2<f64>,
    /// Temperature.
    pub beta: f64,
    /// Lower stretch bound, < 0.
    pub gamma: f64,
    /// Upper stretch bound, > 1.
    pub zeta: f64,
}

impl HardConcreteGate {
    pub fn new(loc: Array2<f64>, beta: f64, gamma: f64, zeta: f64) -> Self {
        assert!(gamma < 0.0 && zeta > 1.0, "stretch must contain [0,1]");
        assert!(beta > 0.0, "temperature must be positive");
        Self { loc, beta, gamma, zeta }
    }

    /// Stochastic training-mode gate values from uniform noise `u ∈ (0,1)`.
    ///
    /// `z = clamp(σ((ln u − ln(1−u) + loc)/β)·(ζ−γ) + γ, 0, 1)`
    pub fn sample(&self, u: &Array2<f64>) -> Array2<f64> {
        assert_eq!(u.dim(), self.loc.dim(), "noise shape must match loc");
        let mut z = Array2::zeros(self.loc.dim());
        for ((i, j), &un) in u.indexed_iter() {
            assert!(
                un > 0.0 && un < 1.0,
                "gate noise must lie strictly inside (0,1)"
            );
            let s = sigmoid((un.ln() - (1.0 - un).ln() + self.loc[(i, j)]) / self.beta);
            z[(i, j)] = (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0);
        }
        z
    }

    /// Deterministic evaluation-mode gate values.
    ///
    /// `z = clamp(σ(loc)·(ζ−γ) + γ, 0, 1)`
    pub fn eval(&self) -> Array2<f64> {
        self.loc
            .mapv(|l| (sigmoid(l) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0))
    }

    /// `∂z/∂loc` for either mode; zero where the clamp is active.
    fn grad_loc(&self, u: Option<&Array2<f64>>) -> Array2<f64> {
        let span = self.zeta - self.gamma;
        let mut g = Array2::zeros(self.loc.dim());
        for ((i, j), &l) in self.loc.indexed_iter() {
            let (s, scale) = match u {
                Some(noise) => {
                    let un = noise[(i, j)];
                    (sigmoid((un.ln() - (1.0 - un).ln() + l) / self.beta), 1.0 / self.beta)
                }
                None => (sigmoid(l), 1.0),
            };
            let pre = s * span + self.gamma;
            if pre > 0.0 && pre < 1.0 {
                g[(i, j)] = span * s * (1.0 - s) * scale;
            }
        }
        g
    }
}

/// Draws gate noise strictly inside `(GATE_NOISE_EPS, 1 − GATE_NOISE_EPS)`.
pub fn sample_gate_noise<R: Rng>(rng: &mut R, rules: usize, width: usize) -> Array2<f64> {
    let mut u = Array2::zeros((rules, width));
    for v in u.iter_mut() {
        *v = GATE_NOISE_EPS + (1.0 - 2.0 * GATE_NOISE_EPS) * rng.random::<f64>();
    }
    u
}

/// All trainable state of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleNetParams {
    /// Sign/magnitude carrier of the ternary weights, `[R × D]`, clamped to `[−1, 1]`.
    pub w_s: Array2<f64>,
    pub gate: HardConcreteGate,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub bn_running_mean: Array1<f64>,
    pub bn_running_var: Array1<f64>,
    /// Output class weights, `[(R+1) × C]`; row R belongs to the default rule.
    pub w_out: Array2<f64>,
}

impl RuleNetParams {
    /// Random initialization: `W_S ~ U(−0.3, 0.3)`, `loc ~ U(−1, 0)` biasing
    /// gates toward closed, `W_out ~ U(−0.1, 0.1)`, identity batch norm.
    pub fn init<R: Rng>(
        rules: usize,
        width: usize,
        classes: usize,
        beta: f64,
        gamma: f64,
        zeta: f64,
        rng: &mut R,
    ) -> Self {
        let mut w_s = Array2::zeros((rules, width));
        for v in w_s.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let mut loc = Array2::zeros((rules, width));
        for v in loc.iter_mut() {
            *v = rng.random_range(-1.0..0.0);
        }
        let mut w_out = Array2::zeros((rules + 1, classes));
        for v in w_out.iter_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
        Self {
            w_s,
            gate: HardConcreteGate::new(loc, beta, gamma, zeta),
            bn_scale: Array1::ones(rules),
            bn_shift: Array1::zeros(rules),
            bn_running_mean: Array1::zeros(rules),
            bn_running_var: Array1::ones(rules),
            w_out,
        }
    }

    pub fn rule_count(&self) -> usize {
        self.w_s.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.w_s.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.w_out.ncols()
    }

    /// Quantizes the gated weights to {−1, 0, +1}: a literal exists where the
    /// gate is open (`z_det ≥ 0.5`) and the gated weight clears the deadband.
    pub fn ternary_weights(&self) -> Array2<i8> {
        let z = self.gate.eval();
        let mut t = Array2::zeros(self.w_s.dim());
        for ((i, j), &w) in self.w_s.indexed_iter() {
            let g = w * z[(i, j)];
            if z[(i, j)] >= 0.5 && g.abs() >= TERNARY_DEADBAND {
                t[(i, j)] = if g > 0.0 { 1i8 } else { -1i8 };
            }
        }
        t
    }

    pub fn finite(&self) -> bool {
        self.w_s.iter().all(|v| v.is_finite())
            && self.gate.loc.iter().all(|v| v.is_finite())
            && self.bn_scale.iter().all(|v| v.is_finite())
            && self.bn_shift.iter().all(|v| v.is_finite())
            && self.w_out.iter().all(|v| v.is_finite())
    }
}

/// How gates are realized in a relaxed forward pass.
pub enum GateMode<'a> {
    /// Stochastic hard-concrete sample with the given noise (training).
    Sample(&'a Array2<f64>),
    /// Deterministic `gate_eval` (validation / inference).
    Deterministic,
}

/// How pre-activations are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics (training; batch ≥ 2).
    Batch,
    /// Normalize by running statistics (evaluation).
    Running,
    /// No normalization (ablation and discrete semantics).
    Bypass,
}

/// Forward behaviour at the firing threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Emit the hard indicator `1[y_bn ≥ τ]`; backward uses the surrogate
    /// slope (straight-through).
    Hard,
    /// Emit the surrogate `σ(k(y_bn − τ))` itself. The analytic backward is
    /// then the exact gradient of the forward, which is what the finite
    /// difference check verifies.
    Soft,
}

pub struct ForwardSettings<'a> {
    pub gate: GateMode<'a>,
    pub bn: BnMode,
    pub activation: Activation,
    /// Surrogate slope k.
    pub ste_slope: f64,
    /// Firing threshold τ applied after batch norm.
    pub bin_threshold: f64,
}

impl<'a> ForwardSettings<'a> {
    pub fn train(noise: &'a Array2<f64>, ste_slope: f64) -> Self {
        Self {
            gate: GateMode::Sample(noise),
            bn: BnMode::Batch,
            activation: Activation::Hard,
            ste_slope,
            bin_threshold: 0.0,
        }
    }

    pub fn eval(ste_slope: f64) -> Self {
        Self {
            gate: GateMode::Deterministic,
            bn: BnMode::Running,
            activation: Activation::Hard,
            ste_slope,
            bin_threshold: 0.0,
        }
    }

    /// Fully differentiable variant used by gradient checks.
    pub fn differentiable(noise: &'a Array2<f64>, ste_slope: f64) -> Self {
        Self {
            gate: GateMode::Sample(noise),
            bn: BnMode::Batch,
            activation: Activation::Soft,
            ste_slope,
            bin_threshold: 0.0,
        }
    }

    pub fn with_bn(mut self, bn: BnMode) -> Self {
        self.bn = bn;
        self
    }
}

/// Batch statistics captured by a batch-mode forward, needed both for the
/// backward pass and for the running-statistics update.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    /// Biased (1/N) variance used for normalization.
    pub var: Array1<f64>,
    pub batch_size: usize,
}

/// Every intermediate of one relaxed forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Gate values `[R × D]`, shared across the batch.
    pub z: Array2<f64>,
    /// Pre-activations `[B × R]`.
    pub y: Array2<f64>,
    /// Normalized pre-activations `[B × R]`.
    pub y_bn: Array2<f64>,
    /// Rule activations `[B × R]`.
    pub b: Array2<f64>,
    /// Hierarchy selection `[B × (R+1)]`; column R is the default rule.
    pub h: Array2<f64>,
    /// `[B × C]`.
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub bn_stats: Option<BnBatchStats>,
}

impl ForwardTrace {
    /// Argmax class per sample (first maximum wins).
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.axis_iter(Axis(0)).map(|row| argmax(row.as_slice().unwrap())).collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Rule-layer pre-activation `y_r = Σ_i w_ri x_i − Σ_{w_ri>0} w_ri + 1`
/// for a batch: `w` is `[R × D]`, `x` is `[B × D]`, result `[B × R]`.
pub fn preactivation(w: &Array2<f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rules, width) = w.dim();
    let batch = x.nrows();
    assert_eq!(x.ncols(), width, "input width mismatch");
    let mut offset = Array1::<f64>::zeros(rules);
    for r in 0..rules {
        let mut pos = 0.0;
        for d in 0..width {
            if w[(r, d)] > 0.0 {
                pos += w[(r, d)];
            }
        }
        offset[r] = 1.0 - pos;
    }
    let mut y = Array2::zeros((batch, rules));
    for m in 0..batch {
        for r in 0..rules {
            let mut acc = 0.0;
            for d in 0..width {
                acc += w[(r, d)] * x[(m, d)];
            }
            y[(m, r)] = acc + offset[r];
        }
    }
    y
}

/// First-match hierarchy over one sample's activations:
/// `h_k = b_k Π_{j<k}(1−b_j)` and a trailing default entry `Π_{j<R}(1−b_j)`.
pub fn hierarchy(b: &[f64]) -> Vec<f64> {
    let rules = b.len();
    let mut h = vec![0.0; rules + 1];
    let mut prefix = 1.0;
    for (k, &bk) in b.iter().enumerate() {
        h[k] = bk * prefix;
        prefix *= 1.0 - bk;
    }
    h[rules] = prefix;
    h
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Relaxed forward pass over a batch. Does not mutate `params`; batch-mode
/// statistics are returned in the trace so the trainer can apply the running
/// update explicitly.
pub fn forward(
    params: &RuleNetParams,
    x: ArrayView2<'_, f64>,
    settings: &ForwardSettings<'_>,
) -> ForwardTrace {
    let batch = x.nrows();
    let rules = params.rule_count();
    let classes = params.class_count();

    let z = match &settings.gate {
        GateMode::Sample(u) => params.gate.sample(u),
        GateMode::Deterministic => params.gate.eval(),
    };
    let w = &params.w_s * &z;
    let y = preactivation(&w, x);

    let (y_bn, bn_stats) = match settings.bn {
        BnMode::Batch => {
            assert!(batch >= 2, "batch normalization needs a batch of at least 2");
            let mean = y.mean_axis(Axis(0)).unwrap();
            let mut var = Array1::zeros(rules);
            for r in 0..rules {
                let mut acc = 0.0;
                for m in 0..batch {
                    let d = y[(m, r)] - mean[r];
                    acc += d * d;
                }
                var[r] = acc / batch as f64;
            }
            let mut out = Array2::zeros((batch, rules));
            for m in 0..batch {
                for r in 0..rules {
                    let xhat = (y[(m, r)] - mean[r]) / (var[r] + BN_EPS).sqrt();
                    out[(m, r)] = params.bn_scale[r] * xhat + params.bn_shift[r];
                }
            }
            (out, Some(BnBatchStats { mean, var, batch_size: batch }))
        }
        BnMode::Running => {
            let mut out = Array2::zeros((batch, rules));
            for m in 0..batch {
                for r in 0..rules {
                    let xhat = (y[(m, r)] - params.bn_running_mean[r])
                        / (params.bn_running_var[r] + BN_EPS).sqrt();
                    out[(m, r)] = params.bn_scale[r] * xhat + params.bn_shift[r];
                }
            }
            (out, None)
        }
        BnMode::Bypass => (y.clone(), None),
    };

    let k = settings.ste_slope;
    let tau = settings.bin_threshold;
    let b = match settings.activation {
        Activation::Hard => y_bn.mapv(|v| f64::from(v >= tau)),
        Activation::Soft => y_bn.mapv(|v| sigmoid(k * (v - tau))),
    };

    let mut h = Array2::zeros((batch, rules + 1));
    for m in 0..batch {
        let row = hierarchy(b.row(m).as_slice().unwrap());
        for (kk, v) in row.into_iter().enumerate() {
            h[(m, kk)] = v;
        }
    }

    let logits = h.dot(&params.w_out);
    let mut probs = Array2::zeros((batch, classes));
    for m in 0..batch {
        let p = softmax(logits.row(m).as_slice().unwrap());
        for (c, v) in p.into_iter().enumerate() {
            probs[(m, c)] = v;
        }
    }

    ForwardTrace { z, y, y_bn, b, h, logits, probs, bn_stats }
}

/// Applies the momentum update of the running statistics from a batch-mode
/// trace. Uses the unbiased batch variance, conventional for inference stats.
pub fn update_running_stats(params: &mut RuleNetParams, stats: &BnBatchStats, momentum: f64) {
    let n = stats.batch_size as f64;
    let unbias = if stats.batch_size > 1 { n / (n - 1.0) } else { 1.0 };
    for r in 0..params.rule_count() {
        params.bn_running_mean[r] =
            (1.0 - momentum) * params.bn_running_mean[r] + momentum * stats.mean[r];
        params.bn_running_var[r] =
            (1.0 - momentum) * params.bn_running_var[r] + momentum * stats.var[r] * unbias;
    }
}

/// Which expected-sparsity penalty is applied to the gate logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPenalty {
    /// `Σ σ((loc − γ)/(ζ − γ))`.
    Stretched,
    /// `Σ σ(loc − β ln(−γ/ζ))`, the usual expected-L0 form.
    ExpectedL0,
}

impl SparsityPenalty {
    pub fn value(&self, gate: &HardConcreteGate) -> f64 {
        gate.loc.iter().map(|&l| self.term(gate, l)).sum()
    }

    fn term(&self, gate: &HardConcreteGate, loc: f64) -> f64 {
        match self {
            SparsityPenalty::Stretched => sigmoid((loc - gate.gamma) / (gate.zeta - gate.gamma)),
            SparsityPenalty::ExpectedL0 => {
                sigmoid(loc - gate.beta * (-gate.gamma / gate.zeta).ln())
            }
        }
    }

    pub fn grad(&self, gate: &HardConcreteGate) -> Array2<f64> {
        match self {
            SparsityPenalty::Stretched => {
                let span = gate.zeta - gate.gamma;
                gate.loc.mapv(|l| {
                    let s = sigmoid((l - gate.gamma) / span);
                    s * (1.0 - s) / span
                })
            }
            SparsityPenalty::ExpectedL0 => {
                let shift = gate.beta * (-gate.gamma / gate.zeta).ln();
                gate.loc.mapv(|l| {
                    let s = sigmoid(l - shift);
                    s * (1.0 - s)
                })
            }
        }
    }
}

/// Composite loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: f64,
    pub cross_entropy: f64,
    pub sparsity: f64,
    pub l2: f64,
}

/// `L = L_CE + λ1 L_sparse + λ2 ‖W_out‖²` over a relaxed-mode trace.
pub fn composite_loss(
    trace: &ForwardTrace,
    labels: &[usize],
    params: &RuleNetParams,
    lambda1: f64,
    lambda2: f64,
    penalty: SparsityPenalty,
) -> LossTerms {
    let batch = labels.len();
    assert_eq!(trace.probs.nrows(), batch);
    let mut ce = 0.0;
    for (m, &label) in labels.iter().enumerate() {
        // log-softmax evaluated stably from the logits
        let row = trace.logits.row(m);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln() + mx;
        ce -= trace.logits[(m, label)] - lse;
    }
    ce /= batch as f64;
    let sparsity = penalty.value(&params.gate);
    let l2 = params.w_out.iter().map(|&w| w * w).sum::<f64>();
    LossTerms {
        total: ce + lambda1 * sparsity + lambda2 * l2,
        cross_entropy: ce,
        sparsity,
        l2,
    }
}

/// Gradients for every trainable group, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_s: Array2<f64>,
    pub loc: Array2<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub w_out: Array2<f64>,
}

/// Backward pass of the composite loss through a relaxed-mode trace.
///
/// The surrogate slope `k σ(k(y_bn−τ))(1−σ(·))` is used at the firing
/// threshold regardless of whether the forward emitted hard or soft
/// activations; with a soft forward this is the exact gradient, with a hard
/// forward it is the straight-through estimate.
pub fn backward(
    params: &RuleNetParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    trace: &ForwardTrace,
    settings: &ForwardSettings<'_>,
    lambda1: f64,
    lambda2: f64,
    penalty: SparsityPenalty,
) -> Gradients {
    let batch = labels.len();
    let rules = params.rule_count();
    let width = params.input_width();
    let classes = params.class_count();
    let bf = batch as f64;

    // softmax cross-entropy
    let mut dlogits = Array2::zeros((batch, classes));
    for m in 0..batch {
        for c in 0..classes {
            let target = f64::from(c == labels[m]);
            dlogits[(m, c)] = (trace.probs[(m, c)] - target) / bf;
        }
    }

    // output layer
    let mut d_w_out = trace.h.t().dot(&dlogits);
    if lambda2 != 0.0 {
        d_w_out += &(2.0 * lambda2 * &params.w_out);
    }
    let dh = dlogits.dot(&params.w_out.t()); // [B × (R+1)]

    // hierarchy: suffix recursion avoids dividing by (1 − b_j)
    let mut db = Array2::zeros((batch, rules));
    for m in 0..batch {
        let b_row = trace.b.row(m);
        let mut prefix = vec![1.0; rules];
        for j in 1..rules {
            prefix[j] = prefix[j - 1] * (1.0 - b_row[j - 1]);
        }
        let mut t = dh[(m, rules)];
        for j in (0..rules).rev() {
            db[(m, j)] = prefix[j] * (dh[(m, j)] - t);
            if j > 0 {
                t = dh[(m, j)] * b_row[j] + (1.0 - b_row[j]) * t;
            }
        }
    }

    // straight-through surrogate at the firing threshold
    let k = settings.ste_slope;
    let tau = settings.bin_threshold;
    let mut dy_bn = Array2::zeros((batch, rules));
    for m in 0..batch {
        for r in 0..rules {
            let s = sigmoid(k * (trace.y_bn[(m, r)] - tau));
            dy_bn[(m, r)] = db[(m, r)] * k * s * (1.0 - s);
        }
    }

    // batch norm
    let mut d_scale = Array1::zeros(rules);
    let mut d_shift = Array1::zeros(rules);
    let mut dy = Array2::zeros((batch, rules));
    match settings.bn {
        BnMode::Batch => {
            let stats = trace
                .bn_stats
                .as_ref()
                .expect("batch-mode trace must carry batch statistics");
            for r in 0..rules {
                let inv_std = 1.0 / (stats.var[r] + BN_EPS).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; batch];
                for m in 0..batch {
                    xhat[m] = (trace.y[(m, r)] - stats.mean[r]) * inv_std;
                    let dxh = dy_bn[(m, r)] * params.bn_scale[r];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat[m];
                    d_scale[r] += dy_bn[(m, r)] * xhat[m];
                    d_shift[r] += dy_bn[(m, r)];
                }
                for m in 0..batch {
                    let dxh = dy_bn[(m, r)] * params.bn_scale[r];
                    dy[(m, r)] =
                        inv_std / bf * (bf * dxh - sum_dxhat - xhat[m] * sum_dxhat_xhat);
                }
            }
        }
        BnMode::Running => {
            for r in 0..rules {
                let inv_std = 1.0 / (params.bn_running_var[r] + BN_EPS).sqrt();
                for m in 0..batch {
                    let xhat = (trace.y[(m, r)] - params.bn_running_mean[r]) * inv_std;
                    d_scale[r] += dy_bn[(m, r)] * xhat;
                    d_shift[r] += dy_bn[(m, r)];
                    dy[(m, r)] = dy_bn[(m, r)] * params.bn_scale[r] * inv_std;
                }
            }
        }
        BnMode::Bypass => {
            dy.assign(&dy_bn);
        }
    }

    // pre-activation: dy/dw_rd = x_md − 1[w_rd > 0]
    let w = &params.w_s * &trace.z;
    let mut dw = Array2::zeros((rules, width));
    for r in 0..rules {
        for d in 0..width {
            let ind = f64::from(w[(r, d)] > 0.0);
            let mut acc = 0.0;
            for m in 0..batch {
                acc += dy[(m, r)] * (x[(m, d)] - ind);
            }
            dw[(r, d)] = acc;
        }
    }

    let d_w_s = &dw * &trace.z;
    let dz = &dw * &params.w_s;
    let gate_noise = match &settings.gate {
        GateMode::Sample(u) => Some(*u),
        GateMode::Deterministic => None,
    };
    let mut d_loc = &dz * &params.gate.grad_loc(gate_noise);
    if lambda1 != 0.0 {
        d_loc += &(lambda1 * &penalty.grad(&params.gate));
    }

    Gradients {
        w_s: d_w_s,
        loc: d_loc,
        bn_scale: d_scale,
        bn_shift: d_shift,
        w_out: d_w_out,
    }
}

/// Outcome of the discrete (quantized) forward for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteOutcome {
    /// Index of the firing rule, or `rule_count` for the default.
    pub fired: usize,
    pub class: usize,
}

/// Discrete activation of each rule given ternary weights: a rule fires iff
/// its conjunction holds on the binary input.
pub fn discrete_activations(ternary: &Array2<i8>, x_bits: &[u8]) -> Vec<bool> {
    let (rules, width) = ternary.dim();
    assert_eq!(x_bits.len(), width, "input width mismatch");
    let mut out = Vec::with_capacity(rules);
    for r in 0..rules {
        let mut y = 1.0f64;
        for d in 0..width {
            match ternary[(r, d)] {
                1 => {
                    if x_bits[d] == 0 {
                        y -= 1.0;
                    }
                }
                -1 => {
                    if x_bits[d] == 1 {
                        y -= 1.0;
                    }
                }
                _ => {}
            }
        }
        out.push(y >= 1.0 - DISCRETE_FIRE_TOL);
    }
    out
}

/// Discrete-mode prediction: gates thresholded at 0.5, weights ternary,
/// batch norm bypassed, first firing rule (or the default) selects its
/// `W_out` row and the argmax of that row is the class.
pub fn discrete_forward(params: &RuleNetParams, x_bits: &[u8]) -> DiscreteOutcome {
    let ternary = params.ternary_weights();
    discrete_forward_with(&ternary, &params.w_out, x_bits)
}

/// Same as [`discrete_forward`] with the quantization precomputed.
pub fn discrete_forward_with(
    ternary: &Array2<i8>,
    w_out: &Array2<f64>,
    x_bits: &[u8],
) -> DiscreteOutcome {
    let rules = ternary.nrows();
    let active = discrete_activations(ternary, x_bits);
    let fired = active.iter().position(|&a| a).unwrap_or(rules);
    let class = argmax(w_out.row(fired).as_slice().unwrap());
    DiscreteOutcome { fired, class }
}
