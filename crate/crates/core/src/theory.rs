//! Numerical companions to the analysis: rectified-Gaussian moments, the
//! magnitude-amplification claims, and the Gaussian interference game whose
//! equilibrium has the same algebraic shape as a CE layer.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, CeError, Result};
use crate::linalg::{inv_sqrt_eig, jacobi_eigh, solve};
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Matrix;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate in both tails.
pub fn big_phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[y]` and `E[y²]` for `y = max(0, γz + β)`, `z ~ N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub second: f64,
    /// Set when γ = 0 and the values are the pointwise limits.
    pub limit: bool,
}

/// Closed-form rectified-Gaussian moments.
///
/// For γ > 0:
/// `E[y]  = γ e^{-β²/2γ²}/√(2π) + (β/2)(1 + erf(β/(√2γ)))`,
/// `E[y²] = γβ e^{-β²/2γ²}/√(2π) + ((γ²+β²)/2)(1 + erf(β/(√2γ)))`.
/// The γ < 0 forms flip the sign of the exponential terms and of erf; both
/// reduce to the expressions below with `t = β/|γ|`. `1 ± erf` is evaluated
/// through erfc so small |γ| with β < 0 does not cancel.
pub fn rect_gauss_moments(gamma: f64, beta: f64) -> Moments {
    assert!(
        gamma.is_finite() && beta.is_finite(),
        "non-finite moment parameters"
    );
    if gamma == 0.0 {
        let m = beta.max(0.0);
        return Moments {
            mean: m,
            second: m * m,
            limit: true,
        };
    }
    let g = gamma.abs();
    let t = beta / g;
    let dens = phi(t);
    let cdf = big_phi(t);
    Moments {
        mean: g * dens + beta * cdf,
        second: g * beta * dens + (g * g + beta * beta) * cdf,
        limit: false,
    }
}

/// Monte Carlo estimate with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub samples: u64,
    pub mean: f64,
    pub mean_se: f64,
    pub second: f64,
    pub second_se: f64,
}

const MC_CHUNK: u64 = 1 << 16;

/// Monte Carlo moments for several (γ, β) pairs from one shared stream of
/// standard normals. Chunk `k` draws from `Rng::new(seed).derive(k)`, and
/// partial sums are combined in chunk order, so the result does not depend
/// on `exec`.
pub fn mc_moments_grid(
    points: &[(f64, f64)],
    samples: u64,
    seed: u64,
    exec: Exec,
) -> Vec<McEstimate> {
    assert!(samples >= 2, "need at least two samples");
    let chunks = samples.div_ceil(MC_CHUNK);
    let root = Rng::new(seed);
    let partial = exec.map(chunks as usize, |k| {
        let mut rng = root.derive(k as u64);
        let len = MC_CHUNK.min(samples - k as u64 * MC_CHUNK);
        // per point: Σy, Σy², Σy⁴
        let mut acc = vec![[0.0f64; 3]; points.len()];
        for _ in 0..len {
            let z = rng.normal();
            for (a, &(g, b)) in acc.iter_mut().zip(points) {
                let y = (g * z + b).max(0.0);
                let y2 = y * y;
                a[0] += y;
                a[1] += y2;
                a[2] += y2 * y2;
            }
        }
        acc
    });
    let n = samples as f64;
    (0..points.len())
        .map(|i| {
            let mut s = [0.0f64; 3];
            for part in &partial {
                for k in 0..3 {
                    s[k] += part[i][k];
                }
            }
            let mean = s[0] / n;
            let second = s[1] / n;
            let var1 = ((s[1] / n - mean * mean) * n / (n - 1.0)).max(0.0);
            let var2 = ((s[2] / n - second * second) * n / (n - 1.0)).max(0.0);
            McEstimate {
                samples,
                mean,
                mean_se: (var1 / n).sqrt(),
                second,
                second_se: (var2 / n).sqrt(),
            }
        })
        .collect()
}

pub fn mc_moments(gamma: f64, beta: f64, samples: u64, seed: u64, exec: Exec) -> McEstimate {
    mc_moments_grid(&[(gamma, beta)], samples, seed, exec)[0]
}

/// Distance between closed form and Monte Carlo in standard errors.
///
/// When a sample standard error is zero (every draw rectified to 0) the
/// standard error implied by the closed form is used instead.
pub fn z_scores(exact: &Moments, mc: &McEstimate) -> (f64, f64) {
    let n = mc.samples as f64;
    let theory_se1 = ((exact.second - exact.mean * exact.mean).max(0.0) / n).sqrt();
    let se1 = if mc.mean_se > 0.0 {
        mc.mean_se
    } else {
        theory_se1
    };
    let se2 = if mc.second_se > 0.0 {
        mc.second_se
    } else {
        // E[y⁴] is unavailable in closed form here; E[y²] bounds the spread
        // for the near-degenerate cases where this branch triggers.
        (exact.second / n).sqrt()
    };
    let z = |d: f64, se: f64| {
        if d == 0.0 {
            0.0
        } else if se > 0.0 {
            d.abs() / se
        } else {
            f64::INFINITY
        }
    };
    (
        z(exact.mean - mc.mean, se1),
        z(exact.second - mc.second, se2),
    )
}

/// Outcome of the γ̂ amplification check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaCheck {
    pub gamma_hat: Vec<f64>,
    /// Per channel: `|γ̂_c| > |γ_c|`.
    pub strict: Vec<bool>,
    /// ρ is the all-ones matrix, where equality is expected instead.
    pub boundary: bool,
}

impl GammaCheck {
    pub fn holds(&self) -> bool {
        if self.boundary {
            !self.strict.iter().any(|&s| s)
        } else {
            self.strict.iter().all(|&s| s)
        }
    }
}

/// `γ̂ = ½(3I − Σ_N)γ` with `Σ_N = (γγᵀ/‖γ‖²) ⊙ ρ`.
pub fn gamma_amplification_check(rho: &Matrix, gamma: &[f64]) -> Result<GammaCheck> {
    let c = gamma.len();
    ensure!(
        rho.shape() == (c, c),
        Shape,
        "correlation matrix must be {c}x{c}"
    );
    ensure!(
        rho.is_symmetric(1e-12),
        Contract,
        "correlation matrix is not symmetric"
    );
    for i in 0..c {
        ensure!(
            (rho[(i, i)] - 1.0).abs() < 1e-12,
            Contract,
            "correlation diagonal must be 1"
        );
        for j in 0..c {
            ensure!(
                rho[(i, j)].abs() <= 1.0 + 1e-12,
                Contract,
                "correlation entry outside [-1, 1]"
            );
        }
    }
    let norm2: f64 = gamma.iter().map(|g| g * g).sum();
    ensure!(norm2 > 0.0, Contract, "gamma must be non-zero");
    let boundary = rho.as_slice().iter().all(|&v| v == 1.0);
    let sigma_n = Matrix::from_fn(c, c, |i, j| gamma[i] * gamma[j] / norm2 * rho[(i, j)]);
    let sg = sigma_n.matvec(gamma);
    let gamma_hat: Vec<f64> = gamma
        .iter()
        .zip(&sg)
        .map(|(g, s)| 0.5 * (3.0 * g - s))
        .collect();
    let strict = gamma_hat
        .iter()
        .zip(gamma)
        .map(|(h, g)| h.abs() > g.abs())
        .collect();
    Ok(GammaCheck {
        gamma_hat,
        strict,
        boundary,
    })
}

/// Sample correlation of `samples` standard Gaussian draws in `c` dimensions
/// (full rank almost surely when `samples > c`).
pub fn random_correlation(c: usize, samples: usize, rng: &mut Rng) -> Matrix {
    let x = Matrix::from_fn(c, samples, |_, _| rng.normal());
    let mean: Vec<f64> = (0..c)
        .map(|i| x.row(i).iter().sum::<f64>() / samples as f64)
        .collect();
    let cov = Matrix::from_fn(c, c, |i, j| {
        x.row(i)
            .iter()
            .zip(x.row(j))
            .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
            .sum::<f64>()
    });
    let d: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    Matrix::from_fn(c, c, |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] / (d[i] * d[j])).clamp(-1.0, 1.0)
        }
    })
}

/// `‖Σ^{-1/2} x̃‖ / ‖x̃‖` via the eigendecomposition, and whether it exceeds 1.
pub fn norm_amplification_check(sigma_n: &Matrix, xtilde: &[f64]) -> Result<(f64, bool)> {
    ensure!(
        sigma_n.rows() == xtilde.len(),
        Shape,
        "vector length does not match covariance"
    );
    ensure!(
        (sigma_n.trace() - 1.0).abs() < 1e-9,
        Contract,
        "covariance must be trace-normalized"
    );
    let eig = jacobi_eigh(sigma_n)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    ensure!(
        min > 0.0,
        Contract,
        "covariance is singular (min eigenvalue {min:e})"
    );
    let n0 = xtilde.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(n0 > 0.0, Contract, "x̃ must be non-zero");
    let y = inv_sqrt_eig(sigma_n)?.matvec(xtilde);
    let ratio = y.iter().map(|v| v * v).sum::<f64>().sqrt() / n0;
    Ok((ratio, ratio > 1.0))
}

/// Gaussian interference game among C channels over H x W neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Gain matrix rows, `gain[c][d] = g_cd`.
    pub gain: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    /// Channel gains `h_cij`, C x (H·W) row-major.
    pub h: Vec<f64>,
    pub budget: Vec<f64>,
}

impl GameSpec {
    pub fn neurons(&self) -> usize {
        self.height * self.width
    }

    pub fn g(&self, c: usize, d: usize) -> f64 {
        self.gain[c][d]
    }

    pub fn gain_matrix(&self) -> Matrix {
        Matrix::from_fn(self.channels, self.channels, |i, j| self.gain[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k) = (self.channels, self.neurons());
        ensure!(
            c >= 1 && k >= 1,
            Config,
            "game needs at least one channel and neuron"
        );
        ensure!(
            self.gain.len() == c && self.gain.iter().all(|r| r.len() == c),
            Config,
            "gain must be {c}x{c}"
        );
        ensure!(
            self.sigma.len() == c && self.budget.len() == c,
            Config,
            "sigma and budget need {c} entries"
        );
        ensure!(self.h.len() == c * k, Config, "h needs {} entries", c * k);
        ensure!(
            (0..c).all(|i| self.gain[i][i] > 0.0),
            Config,
            "diagonal gains must be positive"
        );
        ensure!(
            self.gain
                .iter()
                .flatten()
                .all(|&v| v >= 0.0 && v.is_finite()),
            Config,
            "gains must be finite and non-negative"
        );
        ensure!(
            self.sigma.iter().all(|&v| v > 0.0),
            Config,
            "noise powers must be positive"
        );
        ensure!(
            self.h.iter().all(|&v| v > 0.0 && v.is_finite()),
            Config,
            "channel gains h must be positive"
        );
        ensure!(
            self.budget.iter().all(|&v| v > 0.0),
            Config,
            "budgets must be positive"
        );
        Ok(())
    }

    /// Random game with small positive cross gains and budgets large enough
    /// that the equilibrium is typically interior.
    pub fn random_interior(channels: usize, height: usize, width: usize, rng: &mut Rng) -> Self {
        let k = height * width;
        let gain = (0..channels)
            .map(|i| {
                (0..channels)
                    .map(|j| {
                        if i == j {
                            rng.uniform_range(0.8, 1.2)
                        } else {
                            rng.uniform_range(0.01, 0.1)
                        }
                    })
                    .collect()
            })
            .collect();
        GameSpec {
            channels,
            height,
            width,
            gain,
            sigma: (0..channels).map(|_| rng.uniform_range(0.5, 1.5)).collect(),
            h: (0..channels * k)
                .map(|_| rng.uniform_range(0.5, 2.0))
                .collect(),
            budget: (0..channels)
                .map(|_| k as f64 * rng.uniform_range(4.0, 8.0))
                .collect(),
        }
    }

    /// Interference seen by channel c at neuron j: `Σ_{d≠c} g_cd p_dj + σ_c/h_cj`.
    pub fn interference(&self, p: &[f64], c: usize, j: usize) -> f64 {
        let k = self.neurons();
        let cross: f64 = (0..self.channels)
            .filter(|&d| d != c)
            .map(|d| self.g(c, d) * p[d * k + j])
            .sum();
        cross + self.sigma[c] / self.h[c * k + j]
    }
}

/// Payoff `Σ_j ln(1 + g_cc p_cj / I_cj)` of channel c.
pub fn payoff(game: &GameSpec, p: &[f64], c: usize) -> f64 {
    let k = game.neurons();
    (0..k)
        .map(|j| (game.g(c, c) * p[c * k + j] / game.interference(p, c, j)).ln_1p())
        .sum()
}

/// Water-filling: `p_j = max(0, L − a_j)` with `Σ p_j = budget`.
/// Returns the powers and the water level `L`.
pub fn water_fill(floors: &[f64], budget: f64) -> (Vec<f64>, f64) {
    let mut sorted = floors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut level = 0.0;
    let mut acc = 0.0;
    for (i, &a) in sorted.iter().enumerate() {
        acc += a;
        let cand = (budget + acc) / (i + 1) as f64;
        let next = sorted.get(i + 1).copied().unwrap_or(f64::INFINITY);
        if cand <= next {
            level = cand;
            break;
        }
    }
    (floors.iter().map(|a| (level - a).max(0.0)).collect(), level)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashSolution {
    /// Powers, C x (H·W) row-major.
    pub p: Vec<f64>,
    /// Lagrange multipliers (inverse water levels).
    pub v0: Vec<f64>,
    pub rounds: usize,
}

impl NashSolution {
    pub fn is_interior(&self) -> bool {
        self.p.iter().all(|&v| v > 0.0)
    }
}

pub const NASH_TOL: f64 = 1e-10;
pub const NASH_MAX_ROUNDS: usize = 100_000;

/// Iterated best response, channels updated round-robin in index order.
pub fn solve_nash(game: &GameSpec) -> Result<NashSolution> {
    game.validate()?;
    let (c, k) = (game.channels, game.neurons());
    let mut p = vec![0.0; c * k];
    let mut levels = vec![0.0; c];
    for round in 1..=NASH_MAX_ROUNDS {
        let mut change = 0.0f64;
        for ch in 0..c {
            let gcc = game.g(ch, ch);
            let floors: Vec<f64> = (0..k).map(|j| game.interference(&p, ch, j) / gcc).collect();
            let (next, level) = water_fill(&floors, game.budget[ch]);
            for j in 0..k {
                change = change.max((next[j] - p[ch * k + j]).abs());
                p[ch * k + j] = next[j];
            }
            levels[ch] = level;
        }
        if change < NASH_TOL {
            return Ok(NashSolution {
                p,
                v0: levels.iter().map(|l| 1.0 / l).collect(),
                rounds: round,
            });
        }
    }
    Err(CeError::Divergence(format!(
        "best-response iteration did not settle within {NASH_MAX_ROUNDS} rounds"
    )))
}

/// Largest violation of the equilibrium conditions
/// `g_cc / (Σ_d g_cd p_dj + σ_c/h_cj) = v_c` (active) or `≤ v_c` (inactive),
/// relative to `v_c`.
pub fn kkt_residual(game: &GameSpec, sol: &NashSolution) -> f64 {
    let k = game.neurons();
    let mut worst = 0.0f64;
    for c in 0..game.channels {
        let v = sol.v0[c];
        for j in 0..k {
            let pc = sol.p[c * k + j];
            let ratio = game.g(c, c) / (game.g(c, c) * pc + game.interference(&sol.p, c, j));
            let r = if pc > 0.0 {
                (ratio - v).abs()
            } else {
                (ratio - v).max(0.0)
            };
            worst = worst.max(r / v);
        }
    }
    worst
}

/// Largest `|Σ_j p_cj − P_c|`.
pub fn budget_residual(game: &GameSpec, p: &[f64]) -> f64 {
    let k = game.neurons();
    (0..game.channels)
        .map(|c| (p[c * k..(c + 1) * k].iter().sum::<f64>() - game.budget[c]).abs())
        .fold(0.0, f64::max)
}

/// Interior equilibrium `p_j = G^{-1}(Diag(v0)^{-1} diag(G) − σ / h_j)`.
/// Returns `None` when some power would be non-positive.
pub fn nash_closed_form(game: &GameSpec, v0: &[f64]) -> Result<Option<Vec<f64>>> {
    game.validate()?;
    let (c, k) = (game.channels, game.neurons());
    ensure!(
        v0.len() == c && v0.iter().all(|&v| v > 0.0),
        Contract,
        "v0 must hold {c} positive entries"
    );
    let g = game.gain_matrix();
    let mut p = vec![0.0; c * k];
    for j in 0..k {
        let rhs: Vec<f64> = (0..c)
            .map(|i| g[(i, i)] / v0[i] - game.sigma[i] / game.h[i * k + j])
            .collect();
        let x = solve(&g, &rhs)?;
        for i in 0..c {
            p[i * k + j] = x[i];
        }
    }
    Ok(p.iter().all(|&v| v > 0.0).then_some(p))
}

/// Linear proxy of the interior equilibrium and its reading as a CE layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProxyReport {
    /// `G^{-1}(Diag(σ) h_j + Diag(v0)^{-1} diag(G) + (2+δ)σ)`, C x (H·W).
    pub powers: Vec<f64>,
    /// Plays the role of γ: σ.
    pub gamma_eq: Vec<f64>,
    /// Plays the role of β: `Diag(v0)^{-1} diag(G) + (2+δ)σ`.
    pub beta_eq: Vec<f64>,
    /// Plays the role of the decorrelating operator: `G^{-1}`.
    pub operator: Vec<Vec<f64>>,
    pub substitution: Vec<String>,
}

pub fn ce_proxy_map(game: &GameSpec, v0: &[f64], delta: &[f64]) -> Result<ProxyReport> {
    game.validate()?;
    let (c, k) = (game.channels, game.neurons());
    ensure!(
        v0.len() == c && v0.iter().all(|&v| v > 0.0),
        Contract,
        "v0 must hold {c} positive entries"
    );
    ensure!(delta.len() == c, Contract, "delta needs {c} entries");
    let g = game.gain_matrix();
    let beta_eq: Vec<f64> = (0..c)
        .map(|i| g[(i, i)] / v0[i] + (2.0 + delta[i]) * game.sigma[i])
        .collect();
    let mut powers = vec![0.0; c * k];
    for j in 0..k {
        let rhs: Vec<f64> = (0..c)
            .map(|i| game.sigma[i] * game.h[i * k + j] + beta_eq[i])
            .collect();
        let x = solve(&g, &rhs)?;
        for i in 0..c {
            powers[i * k + j] = x[i];
        }
    }
    let inv = Matrix::from_fn(c, c, |i, j| {
        let mut e = vec![0.0; c];
        e[j] = 1.0;
        solve(&g, &e).map(|col| col[i]).unwrap_or(f64::NAN)
    });
    Ok(ProxyReport {
        powers,
        gamma_eq: game.sigma.clone(),
        beta_eq,
        operator: (0..c).map(|i| inv.row(i).to_vec()).collect(),
        substitution: vec![
            "G = D^(1/2), so G^-1 is the per-sample decorrelator".into(),
            "h_ij = standardized feature x̄_ij".into(),
            "gamma = sigma".into(),
            "beta = Diag(v0)^-1 diag(G) + (2 + delta) sigma".into(),
        ],
    })
}
