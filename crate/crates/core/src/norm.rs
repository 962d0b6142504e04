//! Normalization statistics (BN / IN / LN), the standardize-then-affine
//! transform and rectified activations.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, CeError, Result};
use crate::tensor::{check_len, reduce, ChannelVector, FeatureMap};

/// Added to every variance before the square root.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Statistics per channel over (N, H, W).
    Batch,
    /// Statistics per (sample, channel) over (H, W).
    Instance,
    /// Statistics per sample over (C, H, W).
    Layer,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Batch => "bn",
            NormKind::Instance => "in",
            NormKind::Layer => "ln",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" | "batch" => Ok(NormKind::Batch),
            "in" | "instance" => Ok(NormKind::Instance),
            "ln" | "layer" => Ok(NormKind::Layer),
            other => Err(CeError::Config(format!("unknown normalizer `{other}`"))),
        }
    }
}

/// Means and biased variances for one normalizer.
///
/// Layout: BN → length C, IN → N x C row-major, LN → length N.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub kind: NormKind,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl NormStats {
    /// Index into `mean` / `var` for element (n, c).
    #[inline]
    fn slot(&self, n: usize, c: usize, channels: usize) -> usize {
        match self.kind {
            NormKind::Batch => c,
            NormKind::Instance => n * channels + c,
            NormKind::Layer => n,
        }
    }

    fn expected_len(kind: NormKind, n: usize, c: usize) -> usize {
        match kind {
            NormKind::Batch => c,
            NormKind::Instance => n * c,
            NormKind::Layer => n,
        }
    }

    pub fn check_for(&self, x: &FeatureMap) -> Result<()> {
        let want = Self::expected_len(self.kind, x.batch(), x.channels());
        check_len("norm stats mean", self.mean.len(), want)?;
        check_len("norm stats var", self.var.len(), want)?;
        ensure!(
            self.mean.iter().chain(&self.var).all(|v| v.is_finite()),
            Divergence,
            "non-finite normalization statistics"
        );
        ensure!(
            self.var.iter().all(|&v| v >= 0.0),
            Contract,
            "negative variance in stats"
        );
        Ok(())
    }

    /// `1/sqrt(var + eps)` per slot.
    pub fn inv_std(&self) -> Vec<f64> {
        self.var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect()
    }
}

pub fn compute_stats(x: &FeatureMap, kind: NormKind) -> NormStats {
    compute_stats_eps(x, kind, DEFAULT_EPS)
}

pub fn compute_stats_eps(x: &FeatureMap, kind: NormKind, eps: f64) -> NormStats {
    let (mean, var) = match kind {
        NormKind::Batch => reduce::channel_mean_var(x),
        NormKind::Instance => reduce::instance_mean_var(x),
        NormKind::Layer => reduce::sample_mean_var(x),
    };
    NormStats {
        kind,
        mean,
        var,
        eps,
    }
}

/// Per-channel scale and shift applied after standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gamma: ChannelVector,
    pub beta: ChannelVector,
}

impl AffineParams {
    pub fn identity(c: usize) -> Self {
        AffineParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Returns `(xbar, xtilde)` with `xbar = (x - μ)/sqrt(var + ε)` and
/// `xtilde = γ ⊙ xbar + β` channel-wise.
pub fn normalize_affine(
    x: &FeatureMap,
    stats: &NormStats,
    params: &AffineParams,
) -> Result<(FeatureMap, FeatureMap)> {
    stats.check_for(x)?;
    check_len("gamma", params.gamma.len(), x.channels())?;
    check_len("beta", params.beta.len(), x.channels())?;
    let (n, c, _, _) = x.dims();
    let inv = stats.inv_std();
    let mut xbar = x.clone();
    let mut xtilde = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let k = stats.slot(s, ch, c);
            let (mu, r) = (stats.mean[k], inv[k]);
            let (g, b) = (params.gamma[ch], params.beta[ch]);
            let bar = xbar.plane_mut(s, ch);
            for v in bar.iter_mut() {
                *v = (*v - mu) * r;
            }
            let bar = xbar.plane(s, ch).to_vec();
            for (t, v) in xtilde.plane_mut(s, ch).iter_mut().zip(bar) {
                *t = g * v + b;
            }
        }
    }
    Ok((xbar, xtilde))
}

/// Gradient of a train-mode standardization w.r.t. its input.
///
/// `xbar` is the standardized output and `dxbar` the incoming gradient; the
/// statistics are treated as functions of `x`.
pub fn standardize_backward(
    xbar: &FeatureMap,
    stats: &NormStats,
    dxbar: &FeatureMap,
) -> FeatureMap {
    let (n, c, _, _) = xbar.dims();
    let p = xbar.spatial();
    let inv = stats.inv_std();
    let mut dx = FeatureMap::zeros(xbar.dims());
    // Group members share (mean, var); visit each group's planes.
    let groups: Vec<Vec<(usize, usize)>> = match stats.kind {
        NormKind::Batch => (0..c).map(|ch| (0..n).map(|s| (s, ch)).collect()).collect(),
        NormKind::Instance => (0..n)
            .flat_map(|s| (0..c).map(move |ch| vec![(s, ch)]))
            .collect(),
        NormKind::Layer => (0..n).map(|s| (0..c).map(|ch| (s, ch)).collect()).collect(),
    };
    for members in groups {
        let count = (members.len() * p) as f64;
        let (s0, c0) = members[0];
        let r = inv[stats.slot(s0, c0, c)];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for &(s, ch) in &members {
            for (g, xb) in dxbar.plane(s, ch).iter().zip(xbar.plane(s, ch)) {
                mean_g += g;
                mean_gx += g * xb;
            }
        }
        mean_g /= count;
        mean_gx /= count;
        for &(s, ch) in &members {
            let g = dxbar.plane(s, ch).to_vec();
            let xb = xbar.plane(s, ch).to_vec();
            for ((o, g), xb) in dx.plane_mut(s, ch).iter_mut().zip(g).zip(xb) {
                *o = r * (g - mean_g - xb * mean_gx);
            }
        }
    }
    dx
}

/// Exponential moving average `running ← (1 - m)·running + m·current`.
pub fn ema_update(running: &mut [f64], current: &[f64], momentum: f64) {
    assert_eq!(running.len(), current.len());
    for (r, c) in running.iter_mut().zip(current) {
        *r = (1.0 - momentum) * *r + momentum * c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// `max(0, x)`.
    Relu,
    /// `x` for `x ≥ 0`, `a·x` otherwise; `a ∈ (0, 1)`.
    LeakyRelu(f64),
    /// `x` for `x ≥ 0`, `α(eˣ - 1)` otherwise.
    Elu(f64),
}

impl Activation {
    pub fn validate(self) -> Result<Self> {
        if let Activation::LeakyRelu(a) = self {
            ensure!(
                a > 0.0 && a < 1.0,
                Contract,
                "leaky relu slope {a} outside (0, 1)"
            );
        }
        if let Activation::Elu(alpha) = self {
            ensure!(
                alpha.is_finite() && alpha > 0.0,
                Contract,
                "elu alpha {alpha} must be positive"
            );
        }
        Ok(self)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Elu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
        }
    }

    /// Derivative at the pre-activation value `x` (right derivative at 0).
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x >= 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Elu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha * x.exp()
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse::<f64>()
                    .map_err(|_| CeError::Config(format!("bad activation parameter `{a}`")))
            })
        };
        let act = match name {
            "identity" | "none" => Activation::Identity,
            "relu" => Activation::Relu,
            "lrelu" | "leaky_relu" => Activation::LeakyRelu(num(0.1)?),
            "elu" => Activation::Elu(num(1.0)?),
            other => return Err(CeError::Config(format!("unknown activation `{other}`"))),
        };
        act.validate()
    }

    pub fn label(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => format!("lrelu:{a}"),
            Activation::Elu(a) => format!("elu:{a}"),
        }
    }
}

/// Elementwise rectified unit.
pub fn rectify(x: &FeatureMap, act: Activation) -> Result<FeatureMap> {
    let act = act.validate()?;
    Ok(x.map(|v| act.apply(v)))
}
