//! Measurements: inhibited channels, cumulative ablation, per-location
//! channel magnitudes and inter-channel correlation.

use crate::ce::Mode;
use crate::data::Dataset;
use crate::error::{ensure, Result};
use crate::model::{argmax, Ablation, Model};
use crate::par::Exec;
use crate::report::{fmt_f64, Table};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Matrix};

pub const INHIBITED_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelReport {
    pub magnitude: Vec<f64>,
    pub inhibited: Vec<bool>,
    pub threshold: f64,
}

impl ChannelReport {
    pub fn from_magnitudes(magnitude: Vec<f64>, threshold: f64) -> Self {
        let inhibited = magnitude.iter().map(|&m| m < threshold).collect();
        ChannelReport {
            magnitude,
            inhibited,
            threshold,
        }
    }

    /// Uses |γ_c| as the channel magnitude.
    pub fn from_gamma(gamma: &[f64], threshold: f64) -> Self {
        Self::from_magnitudes(gamma.iter().map(|g| g.abs()).collect(), threshold)
    }

    pub fn ratio(&self) -> f64 {
        self.inhibited.iter().filter(|&&b| b).count() as f64 / self.inhibited.len() as f64
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["channel", "magnitude", "inhibited"]);
        for (c, (m, i)) in self.magnitude.iter().zip(&self.inhibited).enumerate() {
            t.push(vec![c.to_string(), fmt_f64(*m), u8::from(*i).to_string()]);
        }
        t
    }
}

/// Mean |activation| per channel over every (n, i, j) of every map, and the
/// fraction of channels below `threshold`.
pub fn inhibited_ratio(activations: &[FeatureMap], threshold: f64) -> Result<(f64, ChannelReport)> {
    ensure!(
        !activations.is_empty(),
        Contract,
        "inhibited ratio over an empty evaluation set"
    );
    let c = activations[0].channels();
    ensure!(
        activations.iter().all(|a| a.channels() == c),
        Shape,
        "activation maps disagree on channel count"
    );
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for a in activations {
        for s in 0..a.batch() {
            for (ch, acc) in sum.iter_mut().enumerate() {
                *acc += a.plane(s, ch).iter().map(|v| v.abs()).sum::<f64>();
            }
        }
        count += a.batch() * a.spatial();
    }
    let magnitude = sum.into_iter().map(|s| s / count as f64).collect();
    let report = ChannelReport::from_magnitudes(magnitude, threshold);
    Ok((report.ratio(), report))
}

/// `(H, W)` map of the mean over samples of the per-location channel norm.
pub fn channel_magnitude_map(x: &FeatureMap) -> Matrix {
    let (n, c, h, w) = x.dims();
    let mut out = Matrix::zeros(h, w);
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let sq: f64 = (0..c).map(|ch| x.get(s, ch, i, j).powi(2)).sum();
                out[(i, j)] += sq.sqrt() / n as f64;
            }
        }
    }
    out
}

/// Pearson correlation matrix over the C x (N·H·W) flattening.
pub fn correlation_matrix(x: &FeatureMap) -> Matrix {
    const EPS: f64 = 1e-12;
    let rows = x.channel_rows();
    let (c, m) = rows.shape();
    let mut centered = rows.clone();
    let mut sd = vec![0.0; c];
    for ch in 0..c {
        let r = centered.row_mut(ch);
        let mean = r.iter().sum::<f64>() / m as f64;
        r.iter_mut().for_each(|v| *v -= mean);
        sd[ch] = (r.iter().map(|v| v * v).sum::<f64>() / m as f64 + EPS).sqrt();
    }
    Matrix::from_fn(c, c, |i, j| {
        if i == j {
            return 1.0;
        }
        let cov = centered
            .row(i)
            .iter()
            .zip(centered.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / m as f64;
        (cov / (sd[i] * sd[j])).clamp(-1.0, 1.0)
    })
}

/// Mean |off-diagonal| Pearson correlation between channels.
pub fn correlation_summary(x: &FeatureMap) -> f64 {
    let c = x.channels();
    if c < 2 {
        return 0.0;
    }
    let r = correlation_matrix(x);
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                acc += r[(i, j)].abs();
            }
        }
    }
    acc / (c * (c - 1)) as f64
}

/// Classification accuracy of an eval-mode model, optionally with channels
/// zeroed at one layer.
pub fn evaluate(model: &Model, data: &Dataset, ablation: Option<Ablation<'_>>) -> Result<f64> {
    ensure!(
        model.mode == Mode::Eval,
        State,
        "evaluation requires an eval-mode model"
    );
    ensure!(!data.is_empty(), Contract, "empty evaluation set");
    let k = model.spec.classes;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch(chunk);
        let trace = model.forward(&x, ablation)?;
        for (s, &y) in labels.iter().enumerate() {
            if argmax(&trace.logits[s * k..(s + 1) * k]) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Post-block activations of every layer over a dataset (eval mode).
pub fn layer_activations(model: &Model, data: &Dataset) -> Result<Vec<Vec<FeatureMap>>> {
    ensure!(
        model.mode == Mode::Eval,
        State,
        "activations are measured in eval mode"
    );
    let mut per_layer = vec![Vec::new(); model.depth()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, _) = data.batch(chunk);
        let trace = model.forward(&x, None)?;
        for (l, out) in trace.outputs.into_iter().enumerate() {
            per_layer[l].push(out);
        }
    }
    Ok(per_layer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCurve {
    pub layer: usize,
    pub ratios: Vec<f64>,
    pub accuracy_mean: Vec<f64>,
    pub accuracy_std: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl AblationCurve {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["ratio", "accuracy_mean", "accuracy_std", "trials", "seed"]);
        for i in 0..self.ratios.len() {
            t.push(vec![
                fmt_f64(self.ratios[i]),
                fmt_f64(self.accuracy_mean[i]),
                fmt_f64(self.accuracy_std[i]),
                self.trials.to_string(),
                self.seed.to_string(),
            ]);
        }
        t
    }

    /// Mean accuracy at `ratio`, if it was measured.
    pub fn at(&self, ratio: f64) -> Option<f64> {
        self.ratios
            .iter()
            .position(|&r| (r - ratio).abs() < 1e-12)
            .map(|i| self.accuracy_mean[i])
    }
}

/// For each ratio ρ and trial t, zeroes ⌊ρ·C⌋ channels of `layer` drawn
/// without replacement from `Rng::new(seed).derive(ratio_index).derive(t)`
/// and records eval accuracy.
pub fn cumulative_ablation(
    model: &Model,
    data: &Dataset,
    layer: usize,
    ratios: &[f64],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<AblationCurve> {
    ensure!(
        layer < model.depth(),
        Config,
        "layer {layer} out of range (depth {})",
        model.depth()
    );
    ensure!(trials >= 1, Config, "need at least one trial");
    ensure!(!ratios.is_empty(), Config, "no ablation ratios given");
    ensure!(
        ratios.iter().all(|r| (0.0..=1.0).contains(r)),
        Config,
        "ablation ratios must lie in [0, 1]"
    );
    ensure!(
        ratios.windows(2).all(|w| w[0] < w[1]),
        Config,
        "ablation ratios must be strictly increasing"
    );
    let c = model.spec.width;
    let root = Rng::new(seed);
    let jobs: Vec<(usize, usize)> = (0..ratios.len())
        .flat_map(|r| (0..trials).map(move |t| (r, t)))
        .collect();
    let accs = exec.map(jobs.len(), |j| -> Result<f64> {
        let (r, t) = jobs[j];
        let count = (ratios[r] * c as f64 + 1e-9).floor() as usize;
        let channels = root
            .derive(r as u64)
            .derive(t as u64)
            .choose_distinct(c, count);
        evaluate(
            model,
            data,
            Some(Ablation {
                layer,
                channels: &channels,
            }),
        )
    });
    let accs = accs.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut mean = Vec::with_capacity(ratios.len());
    let mut std = Vec::with_capacity(ratios.len());
    for r in 0..ratios.len() {
        let v = &accs[r * trials..(r + 1) * trials];
        let m = v.iter().sum::<f64>() / trials as f64;
        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / trials as f64;
        mean.push(m);
        std.push(var.sqrt());
    }
    Ok(AblationCurve {
        layer,
        ratios: ratios.to_vec(),
        accuracy_mean: mean,
        accuracy_std: std,
        trials,
        seed,
    })
}

/// Ratios 0, 0.1, …, 0.9.
pub fn default_ratios() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        let zeros = FeatureMap::zeros((2, 3, 2, 2));
        assert_eq!(inhibited_ratio(&[zeros], 1e-2).unwrap().0, 1.0);
        let x = FeatureMap::from_fn((1, 3, 1, 2), |_, c, _, _| [0.5, 1e-3, 0.02][c]);
        let (r, rep) = inhibited_ratio(&[x.clone()], 1e-2).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.inhibited, vec![false, true, false]);
        assert_eq!(inhibited_ratio(&[x], 0.0).unwrap().0, 0.0);
        assert!(inhibited_ratio(&[], 1e-2).is_err());
    }

    #[test]
    fn ratio_ignores_sample_order() {
        let mut rng = Rng::new(1);
        let x = FeatureMap::from_fn((4, 3, 2, 2), |_, c, _, _| {
            rng.normal() * 10f64.powi(-(c as i32))
        });
        let mut order: Vec<usize> = (0..4).collect();
        rng.shuffle(&mut order);
        let mut y = FeatureMap::zeros(x.dims());
        for (dst, &src) in order.iter().enumerate() {
            for c in 0..3 {
                let mut plane = x.plane(src, c).to_vec();
                plane.reverse();
                y.plane_mut(dst, c).copy_from_slice(&plane);
            }
        }
        let a = inhibited_ratio(&[x], 1e-2).unwrap().1;
        let b = inhibited_ratio(&[y], 1e-2).unwrap().1;
        for (p, q) in a.magnitude.iter().zip(&b.magnitude) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn magnitude_map_examples() {
        let one_hot = FeatureMap::from_fn(
            (2, 3, 2, 2),
            |_, c, i, j| if c == (i + j) % 3 { 1.0 } else { 0.0 },
        );
        let m = channel_magnitude_map(&one_hot);
        assert!(m.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let mut rng = Rng::new(2);
        let x = FeatureMap::random_normal((3, 4, 2, 3), &mut rng);
        let m1 = channel_magnitude_map(&x);
        let m2 = channel_magnitude_map(&x.scale(2.0));
        assert!(m2.max_abs_diff(&m1.scale(2.0)) < 1e-12);
    }

    #[test]
    fn correlation_examples() {
        let mut rng = Rng::new(3);
        let base = FeatureMap::random_normal((10, 1, 2, 2), &mut rng);
        let dup = FeatureMap::from_fn((10, 3, 2, 2), |n, _, i, j| base.get(n, 0, i, j));
        assert!((correlation_summary(&dup) - 1.0).abs() < 1e-9);
        let ind = FeatureMap::random_normal((2500, 4, 2, 2), &mut rng);
        assert!(correlation_summary(&ind) < 0.05);
    }
}
