//! Batch decorrelation: covariance of standardized features, trace
//! normalization and the Newton–Schulz inverse square root, with a
//! block-diagonal (group-wise) variant and exact reverse-mode gradients.

use std::ops::Range;

use crate::error::{ensure, CeError, Result};
use crate::tensor::{CovMatrix, FeatureMap, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Number of Newton–Schulz steps T.
    pub iterations: usize,
    pub trace_normalize: bool,
    /// Ridge added to the covariance diagonal before normalization.
    pub diag_eps: f64,
    /// Multiply the result by `tr(Σ)^{-1/2}` so it approximates `Σ^{-1/2}`
    /// instead of `(Σ/tr Σ)^{-1/2}`.
    pub rescale: bool,
    /// Max-pool (H, W) by 2x2 before the covariance when H*W exceeds this.
    pub pool_threshold: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            iterations: 3,
            trace_normalize: true,
            diag_eps: 1e-5,
            rescale: false,
            pool_threshold: 64 * 64,
        }
    }
}

impl NewtonConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        NewtonConfig {
            iterations,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.iterations >= 1,
            Contract,
            "Newton iterations must be >= 1"
        );
        ensure!(self.diag_eps >= 0.0, Contract, "diag_eps must be >= 0");
        Ok(())
    }
}

/// Contiguous channel groups for block-diagonal whitening.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupScheme {
    pub group_size: usize,
    pub groups: Vec<Range<usize>>,
}

impl GroupScheme {
    pub fn new(channels: usize, group_size: usize) -> Result<Self> {
        ensure!(channels >= 1, Contract, "need at least one channel");
        ensure!(group_size >= 1, Contract, "group size must be >= 1");
        let groups = (0..channels)
            .step_by(group_size)
            .map(|s| s..(s + group_size).min(channels))
            .collect();
        Ok(GroupScheme { group_size, groups })
    }

    /// Group size `min(C, 16)`.
    pub fn default_for(channels: usize) -> Self {
        GroupScheme::new(channels, channels.min(16)).expect("channels >= 1")
    }

    pub fn channels(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    pub fn validate_for(&self, channels: usize) -> Result<()> {
        let mut next = 0;
        for g in &self.groups {
            ensure!(
                g.start == next && g.end > g.start,
                Contract,
                "groups do not partition channels"
            );
            ensure!(
                g.len() <= self.group_size,
                Contract,
                "group {:?} exceeds size {}",
                g,
                self.group_size
            );
            next = g.end;
        }
        ensure!(
            next == channels,
            Contract,
            "groups cover {} of {} channels",
            next,
            channels
        );
        Ok(())
    }
}

/// `Σ = (γγᵀ) ⊙ (1/M) X̄ X̄ᵀ` with X̄ the C x M flattening of `xbar`.
pub fn covariance_bn(xbar: &FeatureMap, gamma: &[f64]) -> Result<CovMatrix> {
    ensure!(
        gamma.len() == xbar.channels(),
        Shape,
        "gamma length {} != channels {}",
        gamma.len(),
        xbar.channels()
    );
    let rows = xbar.channel_rows();
    let m = rows.cols();
    ensure!(m > 0, Contract, "covariance over zero samples");
    let r = gram(&rows);
    Ok(Matrix::from_fn(gamma.len(), gamma.len(), |i, j| {
        gamma[i] * gamma[j] * r[(i, j)]
    }))
}

/// `(1/M) X Xᵀ`, filled symmetrically.
fn gram(rows: &Matrix) -> Matrix {
    let (c, m) = rows.shape();
    let mut r = Matrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            let v: f64 = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / m as f64;
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

pub fn trace_normalize(sigma: &CovMatrix) -> Result<CovMatrix> {
    let tr = sigma.trace();
    if !(tr > 0.0) {
        return Err(CeError::Degenerate(format!(
            "covariance trace {tr} is not positive"
        )));
    }
    Ok(sigma.scale(1.0 / tr))
}

/// All Newton–Schulz iterates `Y_0 = I, …, Y_T` together with residuals
/// `‖Y_k² A − I‖_F`.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    pub iterates: Vec<Matrix>,
    pub residuals: Vec<f64>,
}

impl NewtonTrace {
    pub fn result(&self) -> &Matrix {
        self.iterates.last().expect("at least Y_0")
    }
}

fn newton_residual(y: &Matrix, a: &Matrix) -> f64 {
    y.mul(y).mul(a).sub(&Matrix::identity(a.rows())).frobenius()
}

const RESIDUAL_FLOOR: f64 = 1e-8;

/// Runs `Y_k = ½(3Y_{k-1} − Y_{k-1}³ A)` from `Y_0 = I` and records every iterate.
///
/// Fails with [`CeError::Numerical`] when the residual grows on two
/// consecutive steps while still above roundoff level.
pub fn newton_iterates(a: &CovMatrix, iterations: usize) -> Result<NewtonTrace> {
    ensure!(
        a.is_square(),
        Shape,
        "Newton iteration needs a square matrix"
    );
    ensure!(iterations >= 1, Contract, "Newton iterations must be >= 1");
    let n = a.rows();
    let mut y = Matrix::identity(n);
    let mut iterates = vec![y.clone()];
    let mut residuals = vec![newton_residual(&y, a)];
    let mut growth = 0;
    for _ in 0..iterations {
        let y3a = y.mul(&y).mul(&y).mul(a);
        y = y.scale(1.5).sub(&y3a.scale(0.5));
        let res = newton_residual(&y, a);
        if !res.is_finite() || !y.is_finite() {
            return Err(CeError::Numerical {
                message: "Newton iterate became non-finite".into(),
                residual: res,
            });
        }
        let prev = *residuals.last().expect("non-empty");
        // below the floor the residual only jitters with roundoff
        growth = if res > prev && res > RESIDUAL_FLOOR {
            growth + 1
        } else {
            0
        };
        if growth >= 2 {
            return Err(CeError::Numerical {
                message: "Newton residual grew on two consecutive iterations".into(),
                residual: res,
            });
        }
        residuals.push(res);
        iterates.push(y.clone());
    }
    Ok(NewtonTrace {
        iterates,
        residuals,
    })
}

/// Inverse square root of a trace-normalized covariance by `cfg.iterations`
/// Newton–Schulz steps.
pub fn newton_inv_sqrt(sigma_n: &CovMatrix, cfg: &NewtonConfig) -> Result<CovMatrix> {
    cfg.validate()?;
    Ok(newton_iterates(sigma_n, cfg.iterations)?.result().clone())
}

/// Reverse pass through [`newton_iterates`]: given `∂L/∂Y_T`, returns `∂L/∂A`.
pub fn newton_backward(trace: &NewtonTrace, a: &Matrix, d_out: &Matrix) -> Matrix {
    let mut g = d_out.clone();
    let mut d_a = Matrix::zeros(a.rows(), a.cols());
    for k in (1..trace.iterates.len()).rev() {
        let y = &trace.iterates[k - 1];
        let h = g.scale(-0.5);
        let yy = y.mul(y);
        let ya = y.mul(a);
        let yya = yy.mul(a);
        let yyy = yy.mul(y);
        d_a = d_a.add(&yyy.transpose().mul(&h));
        let mut d_y = g.scale(1.5);
        d_y = d_y.add(&h.mul(&yya.transpose()));
        d_y = d_y.add(&y.transpose().mul(&h).mul(&ya.transpose()));
        d_y = d_y.add(&yy.transpose().mul(&h).mul(&a.transpose()));
        g = d_y;
    }
    d_a
}

/// 2x2 max pooling over (H, W); odd edges pool over the remaining cells.
/// Returns the pooled map and, for each pooled cell, the flat source index.
pub fn maxpool2x2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (n, c, h, w) = x.dims();
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = FeatureMap::zeros((n, c, ph, pw));
    let mut arg = vec![0usize; n * c * ph * pw];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..ph {
                for j in 0..pw {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (si, sj) = (2 * i + di, 2 * j + dj);
                            if si < h && sj < w {
                                let k = x.index(s, ch, si, sj);
                                let v = x.as_slice()[k];
                                if v > best {
                                    best = v;
                                    best_k = k;
                                }
                            }
                        }
                    }
                    let o = out.index(s, ch, i, j);
                    out.as_mut_slice()[o] = best;
                    arg[o] = best_k;
                }
            }
        }
    }
    (out, arg)
}

/// Per-group intermediates of the decorrelation operator.
#[derive(Debug, Clone)]
pub struct GroupCache {
    pub range: Range<usize>,
    /// Regularized covariance block before trace normalization.
    pub sigma: Matrix,
    pub trace: f64,
    /// Matrix fed to the Newton iteration.
    pub normalized: Matrix,
    pub newton: NewtonTrace,
}

/// Everything the backward pass needs from [`bd_forward`].
#[derive(Debug, Clone)]
pub struct BdCache {
    pub groups: Vec<GroupCache>,
    /// Block-diagonal operator applied to x̃.
    pub operator: Matrix,
    /// Gram matrix `(1/M) X̄ X̄ᵀ` of the covariance source.
    pub gram: Matrix,
    /// C x M covariance source (x̄, possibly pooled).
    pub source: Matrix,
    /// Pooling argmax map when pooling was applied.
    pub pool_index: Option<Vec<usize>>,
}

/// Block-diagonal decorrelation operator from standardized features.
pub fn bd_forward(
    xbar: &FeatureMap,
    gamma: &[f64],
    scheme: &GroupScheme,
    cfg: &NewtonConfig,
) -> Result<BdCache> {
    cfg.validate()?;
    let c = xbar.channels();
    scheme.validate_for(c)?;
    ensure!(
        gamma.len() == c,
        Shape,
        "gamma length {} != channels {}",
        gamma.len(),
        c
    );

    let (source, pool_index) = if xbar.spatial() > cfg.pool_threshold {
        let (pooled, idx) = maxpool2x2(xbar);
        (pooled.channel_rows(), Some(idx))
    } else {
        (xbar.channel_rows(), None)
    };
    ensure!(source.cols() > 0, Contract, "covariance over zero samples");
    let r = gram(&source);

    let mut operator = Matrix::zeros(c, c);
    let mut groups = Vec::with_capacity(scheme.groups.len());
    for range in &scheme.groups {
        let len = range.len();
        let sigma = Matrix::from_fn(len, len, |i, j| {
            let (ci, cj) = (range.start + i, range.start + j);
            let v = gamma[ci] * gamma[cj] * r[(ci, cj)];
            if i == j {
                v + cfg.diag_eps
            } else {
                v
            }
        });
        let (trace, normalized) = if cfg.trace_normalize {
            let tr = sigma.trace();
            if !(tr > 0.0) {
                return Err(CeError::Degenerate(format!(
                    "covariance trace {tr} is not positive"
                )));
            }
            (tr, sigma.scale(1.0 / tr))
        } else {
            (1.0, sigma.clone())
        };
        let newton = newton_iterates(&normalized, cfg.iterations)?;
        let mut block = newton.result().clone();
        if cfg.rescale && cfg.trace_normalize {
            block = block.scale(1.0 / trace.sqrt());
        }
        operator.set_block(range.start, &block);
        groups.push(GroupCache {
            range: range.clone(),
            sigma,
            trace,
            normalized,
            newton,
        });
    }
    Ok(BdCache {
        groups,
        operator,
        gram: r,
        source,
        pool_index,
    })
}

/// Gradients of the decorrelation operator w.r.t. `xbar` and `gamma`, given
/// `∂L/∂operator`.
pub fn bd_backward(
    cache: &BdCache,
    xbar: &FeatureMap,
    gamma: &[f64],
    cfg: &NewtonConfig,
    d_operator: &Matrix,
) -> (FeatureMap, Vec<f64>) {
    let c = gamma.len();
    let mut d_sigma_full = Matrix::zeros(c, c);
    for g in &cache.groups {
        let start = g.range.start;
        let mut d_block = d_operator.block(start, g.range.len());
        let mut d_trace = 0.0;
        if cfg.rescale && cfg.trace_normalize {
            // operator = Y_T · τ^{-1/2}
            let y = g.newton.result();
            d_trace += d_block.dot(y) * (-0.5) * g.trace.powf(-1.5);
            d_block = d_block.scale(1.0 / g.trace.sqrt());
        }
        let d_norm = newton_backward(&g.newton, &g.normalized, &d_block);
        let d_sigma = if cfg.trace_normalize {
            // A = Σ/τ, τ = tr Σ
            d_trace -= d_norm.dot(&g.sigma) / (g.trace * g.trace);
            let mut ds = d_norm.scale(1.0 / g.trace);
            for i in 0..ds.rows() {
                ds[(i, i)] += d_trace;
            }
            ds
        } else {
            d_norm
        };
        d_sigma_full.set_block(start, &d_sigma);
    }

    let r = &cache.gram;
    let mut d_gamma = vec![0.0; c];
    let mut d_r = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            let ds = d_sigma_full[(i, j)];
            if ds == 0.0 {
                continue;
            }
            d_r[(i, j)] = ds * gamma[i] * gamma[j];
            d_gamma[i] += ds * gamma[j] * r[(i, j)];
            d_gamma[j] += ds * gamma[i] * r[(i, j)];
        }
    }
    // R = (1/M) S Sᵀ  =>  dS = (1/M)(dR + dRᵀ) S
    let m = cache.source.cols() as f64;
    let d_src = d_r.add(&d_r.transpose()).mul(&cache.source).scale(1.0 / m);

    let mut d_xbar = FeatureMap::zeros(xbar.dims());
    match &cache.pool_index {
        None => {
            let p = xbar.spatial();
            for n in 0..xbar.batch() {
                for ch in 0..c {
                    d_xbar
                        .plane_mut(n, ch)
                        .copy_from_slice(&d_src.row(ch)[n * p..(n + 1) * p]);
                }
            }
        }
        Some(idx) => {
            // pooled layout is (n, c, pi, pj); source columns are n*pp + cell
            let n_batch = xbar.batch();
            let pp = idx.len() / (n_batch * c);
            for n in 0..n_batch {
                for ch in 0..c {
                    for cell in 0..pp {
                        let o = (n * c + ch) * pp + cell;
                        d_xbar.as_mut_slice()[idx[o]] += d_src.row(ch)[n * pp + cell];
                    }
                }
            }
        }
    }
    (d_xbar, d_gamma)
}

/// Block-diagonal inverse square root assembled group by group.
pub fn groupwise_inv_sqrt(
    xbar: &FeatureMap,
    gamma: &[f64],
    scheme: &GroupScheme,
    cfg: &NewtonConfig,
) -> Result<CovMatrix> {
    Ok(bd_forward(xbar, gamma, scheme, cfg)?.operator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{inv_sqrt_eig, jacobi_eigh, random};
    use crate::rng::Rng;

    fn exact_cfg(t: usize) -> NewtonConfig {
        NewtonConfig {
            iterations: t,
            diag_eps: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn perfectly_correlated_rows_give_all_ones() {
        let xbar = FeatureMap::from_fn(
            (1, 2, 1, 4),
            |_, _, _, j| if j % 2 == 0 { 1.0 } else { -1.0 },
        );
        let s = covariance_bn(&xbar, &[1.0, 1.0]).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_gamma_kills_row_and_column() {
        let mut rng = Rng::new(1);
        let xbar = FeatureMap::random_normal((3, 2, 2, 2), &mut rng);
        let s = covariance_bn(&xbar, &[0.0, 1.0]).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(s[(1, 0)], 0.0);
    }

    #[test]
    fn covariance_matches_pairwise_loop() {
        let mut rng = Rng::new(2);
        let xbar = FeatureMap::random_normal((4, 5, 3, 2), &mut rng);
        let gamma: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let s = covariance_bn(&xbar, &gamma).unwrap();
        let (n, c, h, w) = xbar.dims();
        let m = (n * h * w) as f64;
        for a in 0..c {
            for b in 0..c {
                let mut acc = 0.0;
                for s_i in 0..n {
                    for i in 0..h {
                        for j in 0..w {
                            acc += gamma[a]
                                * xbar.get(s_i, a, i, j)
                                * gamma[b]
                                * xbar.get(s_i, b, i, j);
                        }
                    }
                }
                assert!((s[(a, b)] - acc / m).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trace_normalization() {
        let out = trace_normalize(&Matrix::identity(2)).unwrap();
        assert_eq!(out, Matrix::diag(&[0.5, 0.5]));
        let ones = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = trace_normalize(&ones).unwrap();
        assert_eq!(out.as_slice(), &[0.5; 4]);
        let e = jacobi_eigh(&out).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && e.values[1].abs() < 1e-14);
        assert!(matches!(
            trace_normalize(&Matrix::zeros(2, 2)),
            Err(CeError::Degenerate(_))
        ));
    }

    #[test]
    fn trace_normalized_spectrum_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let g = Matrix::from_fn(6, 9, |_, _| rng.normal());
            let sigma = random::symmetrize(&g.mul(&g.transpose()));
            let out = trace_normalize(&sigma).unwrap();
            assert!((out.trace() - 1.0).abs() < 1e-12);
            let e = jacobi_eigh(&out).unwrap();
            assert!(e
                .values
                .iter()
                .all(|&l| (-1e-12..=1.0 + 1e-12).contains(&l)));
            assert!((e.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_is_a_fixed_point() {
        for t in 1..6 {
            let y = newton_inv_sqrt(&Matrix::identity(3), &exact_cfg(t)).unwrap();
            assert!(y.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        }
    }

    #[test]
    fn scalar_recurrence_for_half() {
        // y: 1 -> 1.25 -> 1.38671875 -> 1.4134...
        let y = newton_inv_sqrt(&Matrix::diag(&[0.5, 0.5]), &exact_cfg(3)).unwrap();
        let mut s = 1.0f64;
        for _ in 0..3 {
            s = 0.5 * (3.0 * s - s * s * s * 0.5);
        }
        assert!((y[(0, 0)] - s).abs() < 1e-15);
        assert!((s - 1.41341).abs() < 1e-5);
        assert!(y[(0, 1)] == 0.0);
    }

    #[test]
    fn converges_to_eigen_oracle() {
        let mut rng = Rng::new(4);
        let a = random::trace_normalized_spd(16, 0.01, &mut rng);
        let y = newton_inv_sqrt(&a, &exact_cfg(10)).unwrap();
        let resid = y.mul(&a).mul(&y).sub(&Matrix::identity(16)).frobenius();
        assert!(resid < 1e-6, "residual {resid}");
        assert!(y.max_abs_diff(&inv_sqrt_eig(&a).unwrap()) < 1e-5);
    }

    #[test]
    fn divergence_is_reported() {
        // eigenvalue 6 lies far outside the convergence region (0, 2)
        let err = newton_inv_sqrt(&Matrix::diag(&[6.0, 0.5]), &exact_cfg(8)).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn steps_past_convergence_stay_at_roundoff() {
        // The uncoupled iteration amplifies roundoff once converged; by
        // T ≈ 15-20 the residual climbs back above 1e-8 on some inputs.
        let mut rng = Rng::new(0x4e53);
        for c in [4, 8, 16, 32] {
            for _ in 0..50 {
                let a = random::trace_normalized_spd(c, 0.01, &mut rng);
                let t = newton_iterates(&a, 12).unwrap();
                assert!(t.residuals[12] < 1e-9, "c {c}: {:e}", t.residuals[12]);
            }
        }
    }

    #[test]
    fn groups_of_one_are_per_channel_scalars() {
        let mut rng = Rng::new(5);
        let xbar = FeatureMap::random_normal((4, 3, 2, 2), &mut rng);
        let gamma = [0.5, 1.0, 2.0];
        let cfg = exact_cfg(3);
        let scheme = GroupScheme::new(3, 1).unwrap();
        let op = groupwise_inv_sqrt(&xbar, &gamma, &scheme, &cfg).unwrap();
        // a 1x1 trace-normalized block is exactly 1, a fixed point
        assert!(op.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn single_group_equals_full_path() {
        let mut rng = Rng::new(6);
        let xbar = FeatureMap::random_normal((5, 4, 2, 2), &mut rng);
        let gamma = [0.5, -1.0, 2.0, 1.5];
        let cfg = NewtonConfig::default();
        let scheme = GroupScheme::new(4, 4).unwrap();
        let op = groupwise_inv_sqrt(&xbar, &gamma, &scheme, &cfg).unwrap();
        let mut sigma = covariance_bn(&xbar, &gamma).unwrap();
        for i in 0..4 {
            sigma[(i, i)] += cfg.diag_eps;
        }
        let full = newton_inv_sqrt(&trace_normalize(&sigma).unwrap(), &cfg).unwrap();
        assert!(op.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn two_groups_are_independent_runs() {
        let mut rng = Rng::new(7);
        let xbar = FeatureMap::random_normal((6, 4, 2, 2), &mut rng);
        let gamma = [1.0, 0.7, -0.4, 1.3];
        let cfg = NewtonConfig::default();
        let op = groupwise_inv_sqrt(&xbar, &gamma, &GroupScheme::new(4, 2).unwrap(), &cfg).unwrap();
        for (start, chans) in [(0usize, [0usize, 1]), (2, [2, 3])] {
            let sub = xbar.select_channels(&chans);
            let g = [gamma[chans[0]], gamma[chans[1]]];
            let block =
                groupwise_inv_sqrt(&sub, &g, &GroupScheme::new(2, 2).unwrap(), &cfg).unwrap();
            assert!(op.block(start, 2).max_abs_diff(&block) < 1e-15);
        }
        assert_eq!(op[(0, 2)], 0.0);
        assert_eq!(op[(3, 1)], 0.0);
    }

    #[test]
    fn group_scheme_partition() {
        let s = GroupScheme::new(10, 4).unwrap();
        assert_eq!(s.groups, vec![0..4, 4..8, 8..10]);
        assert!(s.validate_for(10).is_ok());
        assert!(s.validate_for(11).is_err());
        assert_eq!(GroupScheme::default_for(40).group_size, 16);
    }

    fn bd_loss(
        xbar: &FeatureMap,
        gamma: &[f64],
        cfg: &NewtonConfig,
        w: &Matrix,
        scheme: &GroupScheme,
    ) -> f64 {
        bd_forward(xbar, gamma, scheme, cfg)
            .unwrap()
            .operator
            .dot(w)
    }

    #[test]
    fn bd_backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        for (cfg, scheme, dims) in [
            (
                NewtonConfig::default(),
                GroupScheme::new(4, 4).unwrap(),
                (3, 4, 2, 2),
            ),
            (
                NewtonConfig {
                    rescale: true,
                    iterations: 4,
                    ..Default::default()
                },
                GroupScheme::new(4, 3).unwrap(),
                (3, 4, 2, 2),
            ),
            (
                NewtonConfig {
                    pool_threshold: 4,
                    ..Default::default()
                },
                GroupScheme::new(3, 3).unwrap(),
                (2, 3, 3, 3),
            ),
        ] {
            let c = dims.1;
            let xbar = FeatureMap::random_normal(dims, &mut rng);
            let gamma: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let w = Matrix::from_fn(c, c, |_, _| rng.normal());
            let cache = bd_forward(&xbar, &gamma, &scheme, &cfg).unwrap();
            let (dx, dg) = bd_backward(&cache, &xbar, &gamma, &cfg, &w);
            let h = 1e-6;
            for k in 0..xbar.len() {
                let mut p = xbar.clone();
                p.as_mut_slice()[k] += h;
                let mut m = xbar.clone();
                m.as_mut_slice()[k] -= h;
                let fd = (bd_loss(&p, &gamma, &cfg, &w, &scheme)
                    - bd_loss(&m, &gamma, &cfg, &w, &scheme))
                    / (2.0 * h);
                assert!(
                    (fd - dx.as_slice()[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "x[{k}] {fd} vs {}",
                    dx.as_slice()[k]
                );
            }
            for k in 0..c {
                let mut p = gamma.clone();
                p[k] += h;
                let mut m = gamma.clone();
                m[k] -= h;
                let fd = (bd_loss(&xbar, &p, &cfg, &w, &scheme)
                    - bd_loss(&xbar, &m, &cfg, &w, &scheme))
                    / (2.0 * h);
                assert!(
                    (fd - dg[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "gamma[{k}] {fd} vs {}",
                    dg[k]
                );
            }
        }
    }
}
