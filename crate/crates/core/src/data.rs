//! Synthetic classification data: class-conditional Gaussian mixtures over
//! small feature maps.

use std::path::Path;

use crate::error::{ensure, CeError, Result};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Scale of the class mean patterns relative to unit noise.
    pub separation: f64,
    /// Fraction of training labels replaced by a different class.
    pub corruption: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            classes: 4,
            channels: 8,
            height: 2,
            width: 2,
            train_size: 1024,
            test_size: 512,
            separation: 0.6,
            corruption: 0.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.classes >= 2, Config, "need at least two classes");
        ensure!(
            self.channels >= 1 && self.height >= 1 && self.width >= 1,
            Config,
            "input dims must be positive"
        );
        ensure!(
            self.height * self.width >= 2,
            Config,
            "instance statistics need H*W >= 2"
        );
        ensure!(
            self.train_size >= self.classes && self.test_size >= self.classes,
            Config,
            "each split needs one sample per class"
        );
        ensure!(
            self.separation >= 0.0,
            Config,
            "separation must be non-negative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.corruption),
            Config,
            "corruption fraction outside [0, 1]"
        );
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Flat samples with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: (usize, usize, usize),
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Gathers the given samples into an N x C x H x W batch.
    pub fn batch(&self, idx: &[usize]) -> (FeatureMap, Vec<usize>) {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.x[i * d..(i + 1) * d]);
        }
        let (c, h, w) = self.dims;
        let fm = FeatureMap::new((idx.len(), c, h, w), data).expect("dataset samples are finite");
        (fm, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Loads `label,v1,...,vD` rows (no header) with D = C·H·W.
    pub fn from_csv(path: &Path, dims: (usize, usize, usize), classes: usize) -> Result<Self> {
        let d = dims.0 * dims.1 * dims.2;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| CeError::Io(e.to_string()))?;
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| CeError::Io(e.to_string()))?;
            ensure!(
                rec.len() == d + 1,
                Config,
                "row {} has {} fields, expected {}",
                line + 1,
                rec.len(),
                d + 1
            );
            let label: usize = rec[0].trim().parse().map_err(|_| {
                CeError::Config(format!("row {}: bad label `{}`", line + 1, &rec[0]))
            })?;
            ensure!(
                label < classes,
                Config,
                "row {}: label {label} >= {classes}",
                line + 1
            );
            labels.push(label);
            for f in rec.iter().skip(1) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| CeError::Config(format!("row {}: bad value `{f}`", line + 1)))?;
                ensure!(v.is_finite(), Config, "row {}: non-finite value", line + 1);
                x.push(v);
            }
        }
        ensure!(
            !labels.is_empty(),
            Config,
            "{} holds no samples",
            path.display()
        );
        Ok(Dataset {
            dims,
            x,
            labels,
            classes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// Training labels before corruption.
    pub clean_labels: Vec<usize>,
}

impl SyntheticTask {
    /// Class k draws `x_{:,i,j} = μ_k[:, i, j] + A_k z`, `z ~ N(0, I)`, so
    /// classes differ in both mean pattern and channel covariance.
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let root = Rng::new(spec.seed);
        let mut prng = root.derive(0);
        let c = spec.channels;
        let means: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                (0..spec.sample_len())
                    .map(|_| spec.separation * prng.normal())
                    .collect()
            })
            .collect();
        let scale = 1.0 / (c as f64).sqrt();
        let mixes: Vec<Matrix> = (0..spec.classes)
            .map(|_| {
                Matrix::from_fn(
                    c,
                    c,
                    |i, j| if i == j { 0.5 } else { 0.0 } + scale * prng.normal(),
                )
            })
            .collect();

        let draw = |n: usize, rng: &mut Rng| -> Dataset {
            let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
            rng.shuffle(&mut labels);
            let p = spec.height * spec.width;
            let mut x = vec![0.0; n * spec.sample_len()];
            for (s, &k) in labels.iter().enumerate() {
                let base = s * spec.sample_len();
                for loc in 0..p {
                    let z: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                    let v = mixes[k].matvec(&z);
                    for ch in 0..c {
                        let off = ch * p + loc;
                        x[base + off] = means[k][off] + v[ch];
                    }
                }
            }
            Dataset {
                dims: (c, spec.height, spec.width),
                x,
                labels,
                classes: spec.classes,
            }
        };
        let mut train = draw(spec.train_size, &mut root.derive(1));
        let test = draw(spec.test_size, &mut root.derive(2));
        let clean_labels = train.labels.clone();
        corrupt_labels(
            &mut train.labels,
            spec.classes,
            spec.corruption,
            &mut root.derive(3),
        );
        Ok(SyntheticTask {
            spec: spec.clone(),
            train,
            test,
            clean_labels,
        })
    }
}

/// Replaces `round(fraction · n)` labels, chosen without replacement, with a
/// uniformly drawn different class.
pub fn corrupt_labels(labels: &mut [usize], classes: usize, fraction: f64, rng: &mut Rng) {
    let count = (fraction * labels.len() as f64).round() as usize;
    for i in rng.choose_distinct(labels.len(), count) {
        let shift = 1 + rng.below(classes as u64 - 1) as usize;
        labels[i] = (labels[i] + shift) % classes;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = TaskSpec::default();
        let a = SyntheticTask::generate(&spec).unwrap();
        let b = SyntheticTask::generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        for k in 0..spec.classes {
            let n = a.train.labels.iter().filter(|&&l| l == k).count();
            assert_eq!(n, spec.train_size / spec.classes);
        }
        assert_ne!(a.train.x[..32], a.test.x[..32]);
    }

    #[test]
    fn corruption_changes_exact_count() {
        let spec = TaskSpec {
            corruption: 0.25,
            ..TaskSpec::default()
        };
        let t = SyntheticTask::generate(&spec).unwrap();
        let changed = t
            .train
            .labels
            .iter()
            .zip(&t.clean_labels)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, spec.train_size / 4);
    }

    #[test]
    fn csv_loader_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "1,0.5,1.5\n0,-1,2\n").unwrap();
        let d = Dataset::from_csv(&p, (1, 1, 2), 2).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.x, vec![0.5, 1.5, -1.0, 2.0]);
        std::fs::write(&p, "2,0.5,1.5\n").unwrap();
        assert!(Dataset::from_csv(&p, (1, 1, 2), 2).is_err());
    }
}
