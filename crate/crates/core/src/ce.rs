//! The channel equilibrium (CE) layer.
//!
//! A CE layer standardizes its input with batch statistics, applies the
//! per-channel affine `x̃ = γ ⊙ x̄ + β`, and then mixes two operators:
//!
//! * batch decorrelation (BD): the Newton–Schulz inverse square root of the
//!   trace-normalized covariance of x̃, shared by the whole batch;
//! * instance reweighting (IR): a per-sample diagonal `gate_n · s^{-1/2}`,
//!   where the gate is a sigmoid bottleneck over the instance variances
//!   of x̃ and `s` is their batch mean.
//!
//! `p = λ·B x̃ + (1 − λ)·diag(d_n) x̃` with `λ = logistic(lambda_raw)`.

use crate::checkpoint::NamedArrays;
use crate::decorrelate::{bd_backward, bd_forward, BdCache, GroupScheme, NewtonConfig};
use crate::error::{ensure, CeError, Result};
use crate::norm::{
    compute_stats_eps, ema_update, normalize_affine, standardize_backward, AffineParams, NormKind,
    NormStats, DEFAULT_EPS,
};
use crate::rng::Rng;
use crate::tensor::{check_len, reduce, FeatureMap, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which operators the layer mixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    Full,
    /// λ pinned to 1.
    BdOnly,
    /// λ pinned to 0.
    IrOnly,
}

impl Branches {
    fn code(self) -> f64 {
        match self {
            Branches::Full => 0.0,
            Branches::BdOnly => 1.0,
            Branches::IrOnly => 2.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(Branches::Full),
            1 => Ok(Branches::BdOnly),
            2 => Ok(Branches::IrOnly),
            _ => Err(CeError::Config(format!("unknown branch code {v}"))),
        }
    }
}

/// Parameters excluded from updates (fine-tuning regime).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Freeze {
    pub lambda: bool,
    pub ir_weights: bool,
}

/// Bottleneck gate `sigmoid(W2 · relu(LN(W1 · v)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct IrWeights {
    /// hidden x C
    pub w1: Matrix,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// C x hidden
    pub w2: Matrix,
}

impl IrWeights {
    pub fn init(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let b1 = (6.0 / channels as f64).sqrt();
        let b2 = (6.0 / hidden as f64).sqrt();
        IrWeights {
            w1: Matrix::from_fn(hidden, channels, |_, _| rng.uniform_range(-b1, b1)),
            ln_gain: vec![1.0; hidden],
            ln_bias: vec![0.0; hidden],
            w2: Matrix::from_fn(channels, hidden, |_, _| rng.uniform_range(-b2, b2)),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn zeros_like(&self) -> Self {
        IrWeights {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            ln_gain: vec![0.0; self.ln_gain.len()],
            ln_bias: vec![0.0; self.ln_bias.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
        }
    }
}

/// Hidden width of the gate, `max(1, round(C / r))`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    ((channels as f64 / reduction as f64).round() as usize).max(1)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Learnable and running state of one CE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CeState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda_raw: f64,
    pub ir: IrWeights,
    pub reduction: usize,
    pub newton: NewtonConfig,
    pub groups: GroupScheme,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub running_inv_sqrt: Matrix,
    pub running_s_inv_sqrt: f64,
    /// Set once a train-mode batch has been absorbed.
    pub running_populated: bool,
    pub momentum: f64,
    pub mode: Mode,
    pub branches: Branches,
    pub freeze: Freeze,
}

impl CeState {
    /// Fresh layer: γ = 1, β = 0, λ = 0.5, r = 4, T = 3, group size min(C, 16).
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self::with_config(channels, 4, NewtonConfig::default(), rng)
    }

    pub fn with_config(
        channels: usize,
        reduction: usize,
        newton: NewtonConfig,
        rng: &mut Rng,
    ) -> Self {
        assert!(channels >= 1 && reduction >= 1);
        let hidden = hidden_width(channels, reduction);
        CeState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            lambda_raw: 0.0,
            ir: IrWeights::init(channels, hidden, rng),
            reduction,
            newton,
            groups: GroupScheme::default_for(channels),
            eps: DEFAULT_EPS,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            running_inv_sqrt: Matrix::identity(channels),
            running_s_inv_sqrt: 1.0,
            running_populated: false,
            momentum: 0.1,
            mode: Mode::Train,
            branches: Branches::Full,
            freeze: Freeze::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Effective mixing weight, honoring pinned branches.
    pub fn lambda(&self) -> f64 {
        match self.branches {
            Branches::Full => sigmoid(self.lambda_raw),
            Branches::BdOnly => 1.0,
            Branches::IrOnly => 0.0,
        }
    }

    fn uses_bd(&self) -> bool {
        self.branches != Branches::IrOnly
    }

    fn uses_ir(&self) -> bool {
        self.branches != Branches::BdOnly
    }

    pub fn affine(&self) -> AffineParams {
        AffineParams {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_len("beta", self.beta.len(), c)?;
        check_len("running_mean", self.running_mean.len(), c)?;
        check_len("running_var", self.running_var.len(), c)?;
        ensure!(
            self.running_inv_sqrt.shape() == (c, c),
            Shape,
            "running_inv_sqrt must be {c}x{c}"
        );
        ensure!(
            self.ir.w1.cols() == c && self.ir.w2.rows() == c,
            Shape,
            "IR weights do not match {c} channels"
        );
        ensure!(
            (0.0..=1.0).contains(&self.momentum),
            Contract,
            "momentum {} outside [0, 1]",
            self.momentum
        );
        self.groups.validate_for(c)?;
        self.newton.validate()
    }

    /// Blends the running decorrelator and scale toward the batch values.
    pub fn update_running(&mut self, sigma_inv_sqrt: &Matrix, s_inv_sqrt: f64, momentum: f64) {
        assert!((0.0..=1.0).contains(&momentum), "momentum outside [0, 1]");
        let mut next = self.running_inv_sqrt.scale(1.0 - momentum);
        next.add_scaled_in_place(sigma_inv_sqrt, momentum);
        self.running_inv_sqrt = next;
        self.running_s_inv_sqrt =
            (1.0 - momentum) * self.running_s_inv_sqrt + momentum * s_inv_sqrt;
    }

    /// Folds one train-mode batch into every running estimate.
    pub fn absorb_batch(&mut self, cache: &CeCache) {
        let m = self.momentum;
        ema_update(&mut self.running_mean, &cache.stats.mean, m);
        ema_update(&mut self.running_var, &cache.stats.var, m);
        let op = cache
            .bd
            .as_ref()
            .map(|b| b.operator.clone())
            .unwrap_or_else(|| self.running_inv_sqrt.clone());
        let q = cache.s_inv_sqrt.unwrap_or(self.running_s_inv_sqrt);
        self.update_running(&op, q, m);
        self.running_populated = true;
    }
}

/// `σ̃²_{nc} = γ_c² σ²_IN,{nc} / denom_c`; `sigma2_in` is N x C row-major and
/// `denom` is the (ε-adjusted) batch variance.
pub fn instance_variance(gamma: &[f64], sigma2_in: &[f64], denom: &[f64]) -> Result<Vec<f64>> {
    let c = gamma.len();
    check_len("denominator", denom.len(), c)?;
    ensure!(
        sigma2_in.len() % c == 0,
        Shape,
        "instance variances are not N x {c}"
    );
    ensure!(
        denom.iter().all(|&d| d > 0.0),
        Contract,
        "batch variance denominators must be positive"
    );
    Ok(sigma2_in
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let ch = k % c;
            gamma[ch] * gamma[ch] * v / denom[ch]
        })
        .collect())
}

/// Intermediates of one gate evaluation.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub hidden: Vec<f64>,
    pub ln_inv_std: f64,
    pub normalized: Vec<f64>,
    pub pre_relu: Vec<f64>,
    pub post_relu: Vec<f64>,
    pub gate: Vec<f64>,
}

fn gate_trace(v: &[f64], w: &IrWeights) -> GateTrace {
    let hidden = w.w1.matvec(v);
    let (mu, var) = reduce::mean_var(&hidden);
    let ln_inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normalized: Vec<f64> = hidden.iter().map(|h| (h - mu) * ln_inv_std).collect();
    let pre_relu: Vec<f64> = normalized
        .iter()
        .zip(w.ln_gain.iter().zip(&w.ln_bias))
        .map(|(h, (g, b))| g * h + b)
        .collect();
    let post_relu: Vec<f64> = pre_relu.iter().map(|v| v.max(0.0)).collect();
    let gate = w.w2.matvec(&post_relu).into_iter().map(sigmoid).collect();
    GateTrace {
        hidden,
        ln_inv_std,
        normalized,
        pre_relu,
        post_relu,
        gate,
    }
}

/// Gate values in (0, 1) for one sample's instance-variance vector.
pub fn ir_gate(sigma2_tilde_n: &[f64], weights: &IrWeights) -> Result<Vec<f64>> {
    check_len(
        "instance variance vector",
        sigma2_tilde_n.len(),
        weights.w1.cols(),
    )?;
    Ok(gate_trace(sigma2_tilde_n, weights).gate)
}

/// Diagonal IR entries `gate(σ̃²_n) · s^{-1/2}` for every sample (N x C).
///
/// With `s_inv_sqrt = None` the scale comes from the batch mean of σ̃².
pub fn ir_branch(
    sigma2_tilde: &[f64],
    weights: &IrWeights,
    s_inv_sqrt: Option<f64>,
) -> Result<Vec<f64>> {
    let c = weights.w1.cols();
    ensure!(
        !sigma2_tilde.is_empty() && sigma2_tilde.len() % c == 0,
        Shape,
        "instance variances are not N x {c}"
    );
    let q = match s_inv_sqrt {
        Some(q) => q,
        None => batch_scale(sigma2_tilde)?.1,
    };
    let mut out = Vec::with_capacity(sigma2_tilde.len());
    for row in sigma2_tilde.chunks(c) {
        out.extend(gate_trace(row, weights).gate.into_iter().map(|g| g * q));
    }
    Ok(out)
}

/// `(s, s^{-1/2})` with `s` the mean of all instance variances.
fn batch_scale(sigma2_tilde: &[f64]) -> Result<(f64, f64)> {
    let s = sigma2_tilde.iter().sum::<f64>() / sigma2_tilde.len() as f64;
    if !(s > 0.0) {
        return Err(CeError::Degenerate(format!(
            "instance variance scale s = {s} is not positive"
        )));
    }
    Ok((s, 1.0 / s.sqrt()))
}

/// Intermediates kept by a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct CeCache {
    pub x: FeatureMap,
    pub stats: NormStats,
    pub xbar: FeatureMap,
    pub xtilde: FeatureMap,
    pub inst_mean: Vec<f64>,
    pub inst_var: Vec<f64>,
    pub sigma2_tilde: Vec<f64>,
    pub s: Option<f64>,
    pub s_inv_sqrt: Option<f64>,
    pub gates: Vec<GateTrace>,
    /// N x C diagonal IR entries.
    pub ir_diag: Vec<f64>,
    pub bd: Option<BdCache>,
    pub bd_out: Option<FeatureMap>,
    pub ir_out: Option<FeatureMap>,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct CeOutput {
    pub p: FeatureMap,
    /// Present for train-mode forwards.
    pub cache: Option<CeCache>,
}

/// Applies `op` (C x C) to the channel vector at every (n, i, j).
pub fn apply_channel_matrix(op: &Matrix, x: &FeatureMap) -> FeatureMap {
    let (n, c, _, _) = x.dims();
    let mut out = FeatureMap::zeros(x.dims());
    for s in 0..n {
        for co in 0..c {
            let dst: Vec<f64> = {
                let mut acc = vec![0.0; x.spatial()];
                for ci in 0..c {
                    let a = op[(co, ci)];
                    if a == 0.0 {
                        continue;
                    }
                    for (o, v) in acc.iter_mut().zip(x.plane(s, ci)) {
                        *o += a * v;
                    }
                }
                acc
            };
            out.plane_mut(s, co).copy_from_slice(&dst);
        }
    }
    out
}

fn scale_planes(x: &FeatureMap, diag: &[f64]) -> FeatureMap {
    let (n, c, _, _) = x.dims();
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let d = diag[s * c + ch];
            out.plane_mut(s, ch).iter_mut().for_each(|v| *v *= d);
        }
    }
    out
}

/// Forward pass. Train mode uses batch statistics and returns a cache;
/// eval mode uses the running estimates. Never mutates `state`.
pub fn ce_forward(x: &FeatureMap, state: &CeState, norm: NormKind) -> Result<CeOutput> {
    ensure!(
        norm == NormKind::Batch,
        Config,
        "CE layers are built on batch normalization, got {:?}",
        norm
    );
    check_len("input channels", x.channels(), state.channels())?;
    let (n, c, _, _) = x.dims();
    let train = state.mode == Mode::Train;
    if train {
        ensure!(
            n * x.spatial() >= 2,
            Contract,
            "train mode needs N*H*W >= 2"
        );
    } else if !state.running_populated {
        return Err(CeError::State(
            "eval-mode forward before running statistics were populated".into(),
        ));
    }

    let stats = if train {
        compute_stats_eps(x, NormKind::Batch, state.eps)
    } else {
        NormStats {
            kind: NormKind::Batch,
            mean: state.running_mean.clone(),
            var: state.running_var.clone(),
            eps: state.eps,
        }
    };
    let (xbar, xtilde) = normalize_affine(x, &stats, &state.affine())?;
    let lambda = state.lambda();

    let (bd, bd_out) = if state.uses_bd() {
        if train {
            let cache = bd_forward(&xbar, &state.gamma, &state.groups, &state.newton)?;
            let out = apply_channel_matrix(&cache.operator, &xtilde);
            (Some(cache), Some(out))
        } else {
            (
                None,
                Some(apply_channel_matrix(&state.running_inv_sqrt, &xtilde)),
            )
        }
    } else {
        (None, None)
    };

    let (inst_mean, inst_var) = reduce::instance_mean_var(x);
    let denom: Vec<f64> = stats.var.iter().map(|v| v + state.eps).collect();
    let sigma2_tilde = instance_variance(&state.gamma, &inst_var, &denom)?;

    let mut s = None;
    let mut s_inv_sqrt = None;
    let mut gates = Vec::new();
    let mut ir_diag = Vec::new();
    let mut ir_out = None;
    if state.uses_ir() {
        let q = if train {
            let (sv, q) = batch_scale(&sigma2_tilde)?;
            s = Some(sv);
            s_inv_sqrt = Some(q);
            q
        } else {
            state.running_s_inv_sqrt
        };
        gates = sigma2_tilde
            .chunks(c)
            .map(|row| gate_trace(row, &state.ir))
            .collect();
        ir_diag = gates
            .iter()
            .flat_map(|g| g.gate.iter().map(move |v| v * q))
            .collect();
        ir_out = Some(scale_planes(&xtilde, &ir_diag));
    }

    let p = match (&bd_out, &ir_out) {
        (Some(b), Some(r)) => b.zip_with(r, |u, v| lambda * u + (1.0 - lambda) * v)?,
        (Some(b), None) => b.clone(),
        (None, Some(r)) => r.clone(),
        (None, None) => unreachable!("at least one branch is active"),
    };
    ensure!(
        p.as_slice().iter().all(|v| v.is_finite()),
        Contract,
        "CE output is not finite"
    );

    let cache = train.then(|| CeCache {
        x: x.clone(),
        stats,
        xbar,
        xtilde,
        inst_mean,
        inst_var,
        sigma2_tilde,
        s,
        s_inv_sqrt,
        gates,
        ir_diag,
        bd,
        bd_out,
        ir_out,
        lambda,
    });
    Ok(CeOutput { p, cache })
}

/// Gradients of every CE input and parameter.
#[derive(Debug, Clone)]
pub struct CeGrads {
    pub x: FeatureMap,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda_raw: f64,
    pub ir: IrWeights,
}

/// Exact reverse-mode gradients of [`ce_forward`] (train mode).
///
/// Batch statistics (mean, variance, covariance, `s`) are differentiated as
/// functions of `x`; the Newton iterations are unrolled. Gradients of frozen
/// or pinned parameters are returned as zero.
pub fn ce_backward(
    grad_out: &FeatureMap,
    cache: Option<&CeCache>,
    state: &CeState,
) -> Result<CeGrads> {
    let cache = cache
        .ok_or_else(|| CeError::State("backward needs the cache of a train-mode forward".into()))?;
    ensure!(
        grad_out.dims() == cache.x.dims(),
        Shape,
        "gradient dims {:?} != input dims {:?}",
        grad_out.dims(),
        cache.x.dims()
    );
    let (n, c, _, _) = cache.x.dims();
    let p = cache.x.spatial();
    let lambda = cache.lambda;
    let gamma = &state.gamma;

    let mut d_lambda_raw = 0.0;
    let mut d_xtilde = FeatureMap::zeros(cache.x.dims());
    let mut d_gamma = vec![0.0; c];
    let mut d_xbar = FeatureMap::zeros(cache.x.dims());
    let mut d_ir = state.ir.zeros_like();
    // ∂L/∂(σ²_BN + ε) and ∂L/∂σ²_IN through the instance-variance input
    let mut d_var = vec![0.0; c];
    let mut d_inst_var = vec![0.0; n * c];

    if state.branches == Branches::Full && !state.freeze.lambda {
        let bd_out = cache.bd_out.as_ref().expect("full mode has BD output");
        let ir_out = cache.ir_out.as_ref().expect("full mode has IR output");
        let dl: f64 = grad_out
            .as_slice()
            .iter()
            .zip(bd_out.as_slice().iter().zip(ir_out.as_slice()))
            .map(|(g, (b, r))| g * (b - r))
            .sum();
        d_lambda_raw = dl * lambda * (1.0 - lambda);
    }

    if let Some(bd) = &cache.bd {
        let b = &bd.operator;
        // d x̃ += λ Bᵀ G ;  dB = λ Σ G x̃ᵀ
        let bt = b.transpose();
        let g_scaled = grad_out.scale(lambda);
        let back = apply_channel_matrix(&bt, &g_scaled);
        d_xtilde = d_xtilde.zip_with(&back, |a, v| a + v)?;
        let mut d_b = Matrix::zeros(c, c);
        for s in 0..n {
            for co in 0..c {
                let g = g_scaled.plane(s, co);
                for ci in 0..c {
                    let xt = cache.xtilde.plane(s, ci);
                    d_b[(co, ci)] += g.iter().zip(xt).map(|(a, v)| a * v).sum::<f64>();
                }
            }
        }
        let (dxb, dg) = bd_backward(bd, &cache.xbar, gamma, &state.newton, &d_b);
        d_xbar = d_xbar.zip_with(&dxb, |a, v| a + v)?;
        for (a, v) in d_gamma.iter_mut().zip(dg) {
            *a += v;
        }
    }

    if state.branches != Branches::BdOnly {
        let q = cache.s_inv_sqrt.expect("IR branch has a batch scale");
        let s_val = cache.s.expect("IR branch has a batch scale");
        let w_ir = 1.0 - lambda;
        let mut d_q = 0.0;
        let mut d_sig2 = vec![0.0; n * c];
        for s in 0..n {
            let mut d_gate = vec![0.0; c];
            for ch in 0..c {
                let k = s * c + ch;
                let g = grad_out.plane(s, ch);
                let xt = cache.xtilde.plane(s, ch);
                // x̃ path
                let d = cache.ir_diag[k];
                for (o, gv) in d_xtilde.plane_mut(s, ch).iter_mut().zip(g) {
                    *o += w_ir * d * gv;
                }
                let dd = w_ir * g.iter().zip(xt).map(|(a, v)| a * v).sum::<f64>();
                let gate = cache.gates[s].gate[ch];
                d_q += dd * gate;
                d_gate[ch] = dd * q;
            }
            let tr = &cache.gates[s];
            // sigmoid
            let d_z: Vec<f64> = d_gate
                .iter()
                .zip(&tr.gate)
                .map(|(d, g)| d * g * (1.0 - g))
                .collect();
            let hidden = state.ir.hidden();
            for co in 0..c {
                for k in 0..hidden {
                    d_ir.w2[(co, k)] += d_z[co] * tr.post_relu[k];
                }
            }
            let d_a = state.ir.w2.matvec_t(&d_z);
            let d_l: Vec<f64> = d_a
                .iter()
                .zip(&tr.pre_relu)
                .map(|(d, l)| if *l > 0.0 { *d } else { 0.0 })
                .collect();
            for k in 0..hidden {
                d_ir.ln_gain[k] += d_l[k] * tr.normalized[k];
                d_ir.ln_bias[k] += d_l[k];
            }
            let d_hat: Vec<f64> = d_l
                .iter()
                .zip(&state.ir.ln_gain)
                .map(|(d, g)| d * g)
                .collect();
            let kf = hidden as f64;
            let mean_d = d_hat.iter().sum::<f64>() / kf;
            let mean_dh = d_hat
                .iter()
                .zip(&tr.normalized)
                .map(|(d, h)| d * h)
                .sum::<f64>()
                / kf;
            let d_h: Vec<f64> = d_hat
                .iter()
                .zip(&tr.normalized)
                .map(|(d, h)| tr.ln_inv_std * (d - mean_d - h * mean_dh))
                .collect();
            let v = &cache.sigma2_tilde[s * c..(s + 1) * c];
            for k in 0..hidden {
                for ch in 0..c {
                    d_ir.w1[(k, ch)] += d_h[k] * v[ch];
                }
            }
            let d_v = state.ir.w1.matvec_t(&d_h);
            for ch in 0..c {
                d_sig2[s * c + ch] += d_v[ch];
            }
        }
        // q = s^{-1/2}, s = mean σ̃²
        let d_s = d_q * (-0.5) * s_val.powf(-1.5);
        let share = d_s / (n * c) as f64;
        d_sig2.iter_mut().for_each(|v| *v += share);
        // σ̃² = γ² u / (var + ε)
        for s in 0..n {
            for ch in 0..c {
                let k = s * c + ch;
                let denom = cache.stats.var[ch] + state.eps;
                let u = cache.inst_var[k];
                let ds = d_sig2[k];
                d_gamma[ch] += ds * 2.0 * gamma[ch] * u / denom;
                d_inst_var[k] += ds * gamma[ch] * gamma[ch] / denom;
                d_var[ch] -= ds * gamma[ch] * gamma[ch] * u / (denom * denom);
            }
        }
    }

    // x̃ = γ x̄ + β
    let mut d_beta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let dxt = d_xtilde.plane(s, ch);
            let xb = cache.xbar.plane(s, ch);
            d_gamma[ch] += dxt.iter().zip(xb).map(|(a, v)| a * v).sum::<f64>();
            d_beta[ch] += dxt.iter().sum::<f64>();
            let g = gamma[ch];
            let add: Vec<f64> = dxt.iter().map(|v| v * g).collect();
            for (o, a) in d_xbar.plane_mut(s, ch).iter_mut().zip(add) {
                *o += a;
            }
        }
    }

    let mut d_x = standardize_backward(&cache.xbar, &cache.stats, &d_xbar);
    let m = (n * p) as f64;
    for s in 0..n {
        for ch in 0..c {
            let mu = cache.stats.mean[ch];
            let mi = cache.inst_mean[s * c + ch];
            let dv = d_var[ch];
            let du = d_inst_var[s * c + ch];
            let xs = cache.x.plane(s, ch).to_vec();
            for (o, xv) in d_x.plane_mut(s, ch).iter_mut().zip(xs) {
                *o += dv * 2.0 * (xv - mu) / m + du * 2.0 * (xv - mi) / p as f64;
            }
        }
    }

    if state.freeze.ir_weights {
        d_ir = state.ir.zeros_like();
    }
    Ok(CeGrads {
        x: d_x,
        gamma: d_gamma,
        beta: d_beta,
        lambda_raw: d_lambda_raw,
        ir: d_ir,
    })
}

/// A channel-mixing linear map `y = W x + b` (1x1 convolution semantics).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLinear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Folds the eval-mode, λ-weighted BD path into the preceding linear map.
///
/// For `y = W x + b` followed by this layer, returns `(W', b')` with
/// `W' x + b' = λ Σ̂^{-1/2} (γ ⊙ (y − μ̂)/sqrt(v̂ + ε) + β)`.
pub fn fuse_bd(state: &CeState, weight: &Matrix, bias: &[f64]) -> Result<FusedLinear> {
    ensure!(
        state.mode == Mode::Eval,
        State,
        "BD fusion requires eval mode"
    );
    ensure!(
        state.running_populated,
        State,
        "BD fusion requires populated running statistics"
    );
    let c = state.channels();
    ensure!(
        weight.rows() == c,
        Shape,
        "linear map has {} outputs, layer has {c} channels",
        weight.rows()
    );
    check_len("bias", bias.len(), c)?;
    let lambda = state.lambda();
    let scale: Vec<f64> = (0..c)
        .map(|ch| state.gamma[ch] / (state.running_var[ch] + state.eps).sqrt())
        .collect();
    let op = state.running_inv_sqrt.scale(lambda);
    let scaled_w = Matrix::from_fn(c, weight.cols(), |i, j| scale[i] * weight[(i, j)]);
    let shift: Vec<f64> = (0..c)
        .map(|ch| scale[ch] * (bias[ch] - state.running_mean[ch]) + state.beta[ch])
        .collect();
    Ok(FusedLinear {
        weight: op.mul(&scaled_w),
        bias: op.matvec(&shift),
    })
}

/// Applies a channel-mixing linear map at every location.
pub fn apply_linear(lin: &FusedLinear, x: &FeatureMap) -> Result<FeatureMap> {
    check_len("linear input channels", x.channels(), lin.weight.cols())?;
    let (n, _, h, w) = x.dims();
    let cout = lin.weight.rows();
    let mut out = FeatureMap::zeros((n, cout, h, w));
    for s in 0..n {
        for co in 0..cout {
            let mut acc = vec![lin.bias[co]; x.spatial()];
            for ci in 0..x.channels() {
                let a = lin.weight[(co, ci)];
                for (o, v) in acc.iter_mut().zip(x.plane(s, ci)) {
                    *o += a * v;
                }
            }
            out.plane_mut(s, co).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Eval-mode IR contribution `(1 − λ) diag(d_n) x̃` for input `x`.
pub fn ir_path_eval(x: &FeatureMap, state: &CeState) -> Result<FeatureMap> {
    ensure!(
        state.mode == Mode::Eval,
        State,
        "IR path evaluation requires eval mode"
    );
    let stats = NormStats {
        kind: NormKind::Batch,
        mean: state.running_mean.clone(),
        var: state.running_var.clone(),
        eps: state.eps,
    };
    let (_, xtilde) = normalize_affine(x, &stats, &state.affine())?;
    if !state.uses_ir() {
        return Ok(FeatureMap::zeros(x.dims()));
    }
    let (_, inst_var) = reduce::instance_mean_var(x);
    let denom: Vec<f64> = stats.var.iter().map(|v| v + state.eps).collect();
    let sig2 = instance_variance(&state.gamma, &inst_var, &denom)?;
    let diag = ir_branch(&sig2, &state.ir, Some(state.running_s_inv_sqrt))?;
    Ok(scale_planes(&xtilde, &diag).scale(1.0 - state.lambda()))
}

/// Max |fused − unfused| for `linear → CE` on input `z`, where the fused
/// side is `fuse_bd(linear)(z) + ir_path_eval(linear(z))`.
pub fn fusion_gap(state: &CeState, linear: &FusedLinear, z: &FeatureMap) -> Result<f64> {
    let y = apply_linear(linear, z)?;
    let unfused = ce_forward(&y, state, NormKind::Batch)?.p;
    let fused = apply_linear(&fuse_bd(state, &linear.weight, &linear.bias)?, z)?;
    let total = fused.zip_with(&ir_path_eval(&y, state)?, |a, b| a + b)?;
    Ok(total.max_abs_diff(&unfused))
}

/// Checkpoint array order.
pub const CHECKPOINT_ARRAYS: [&str; 12] = [
    "gamma",
    "beta",
    "lambda_raw",
    "W1",
    "ln_gain",
    "ln_bias",
    "W2",
    "running_inv_sqrt",
    "running_s_inv_sqrt",
    "running_mean",
    "running_var",
    "settings",
];

impl CeState {
    /// Serializes to the flat container: header (C, r, T, g) then the
    /// arrays of [`CHECKPOINT_ARRAYS`] in order.
    pub fn to_checkpoint(&self) -> NamedArrays {
        let mut a = NamedArrays::new(vec![
            self.channels() as u64,
            self.reduction as u64,
            self.newton.iterations as u64,
            self.groups.group_size as u64,
        ]);
        a.push("gamma", &self.gamma);
        a.push("beta", &self.beta);
        a.push("lambda_raw", &[self.lambda_raw]);
        a.push("W1", self.ir.w1.as_slice());
        a.push("ln_gain", &self.ir.ln_gain);
        a.push("ln_bias", &self.ir.ln_bias);
        a.push("W2", self.ir.w2.as_slice());
        a.push("running_inv_sqrt", self.running_inv_sqrt.as_slice());
        a.push("running_s_inv_sqrt", &[self.running_s_inv_sqrt]);
        a.push("running_mean", &self.running_mean);
        a.push("running_var", &self.running_var);
        a.push(
            "settings",
            &[
                self.eps,
                self.momentum,
                self.newton.diag_eps,
                self.branches.code(),
                f64::from(u8::from(self.freeze.lambda)),
                f64::from(u8::from(self.freeze.ir_weights)),
                f64::from(u8::from(self.running_populated)),
                f64::from(u8::from(self.mode == Mode::Eval)),
                f64::from(u8::from(self.newton.trace_normalize)),
                f64::from(u8::from(self.newton.rescale)),
                self.newton.pool_threshold as f64,
            ],
        );
        a
    }

    pub fn from_checkpoint(a: &NamedArrays) -> Result<Self> {
        ensure!(
            a.header.len() == 4,
            Config,
            "CE checkpoint header must hold (C, r, T, g)"
        );
        let names = a.names();
        ensure!(
            names == CHECKPOINT_ARRAYS,
            Config,
            "unexpected CE checkpoint arrays {:?}",
            names
        );
        let (c, r, t, g) = (
            a.header[0] as usize,
            a.header[1] as usize,
            a.header[2] as usize,
            a.header[3] as usize,
        );
        ensure!(
            c >= 1 && r >= 1 && t >= 1 && g >= 1,
            Config,
            "invalid CE checkpoint dims"
        );
        let k = hidden_width(c, r);
        let scalar = |name: &str| -> Result<f64> {
            let v = a.get(name)?;
            ensure!(v.len() == 1, Config, "`{name}` must be a scalar");
            Ok(v[0])
        };
        let vec_of = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = a.get(name)?;
            ensure!(
                v.len() == len,
                Config,
                "`{name}` has length {}, expected {len}",
                v.len()
            );
            Ok(v.to_vec())
        };
        let settings = vec_of("settings", 11)?;
        let flag = |v: f64| v != 0.0;
        let newton = NewtonConfig {
            iterations: t,
            trace_normalize: flag(settings[8]),
            diag_eps: settings[2],
            rescale: flag(settings[9]),
            pool_threshold: settings[10] as usize,
        };
        let state = CeState {
            gamma: vec_of("gamma", c)?,
            beta: vec_of("beta", c)?,
            lambda_raw: scalar("lambda_raw")?,
            ir: IrWeights {
                w1: Matrix::from_vec(k, c, vec_of("W1", k * c)?)?,
                ln_gain: vec_of("ln_gain", k)?,
                ln_bias: vec_of("ln_bias", k)?,
                w2: Matrix::from_vec(c, k, vec_of("W2", c * k)?)?,
            },
            reduction: r,
            newton,
            groups: GroupScheme::new(c, g)?,
            eps: settings[0],
            running_mean: vec_of("running_mean", c)?,
            running_var: vec_of("running_var", c)?,
            running_inv_sqrt: Matrix::from_vec(c, c, vec_of("running_inv_sqrt", c * c)?)?,
            running_s_inv_sqrt: scalar("running_s_inv_sqrt")?,
            running_populated: flag(settings[6]),
            momentum: settings[1],
            mode: if flag(settings[7]) {
                Mode::Eval
            } else {
                Mode::Train
            },
            branches: Branches::from_code(settings[3])?,
            freeze: Freeze {
                lambda: flag(settings[4]),
                ir_weights: flag(settings[5]),
            },
        };
        state.validate()?;
        Ok(state)
    }
}
