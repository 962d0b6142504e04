//! SGD training of [`Model`]s on a [`SyntheticTask`] and the named sweep
//! experiments built on it.

use crate::ce::Mode;
use crate::data::{Dataset, SyntheticTask, TaskSpec};
use crate::diagnostics::{
    correlation_summary, cumulative_ablation, evaluate, inhibited_ratio, layer_activations,
    INHIBITED_THRESHOLD,
};
use crate::error::{ensure, CeError, Result};
use crate::model::{softmax_xent, BlockSpec, Model, ModelSpec};
use crate::norm::Activation;
use crate::par::Exec;
use crate::report::{fmt_f64, Table};
use crate::rng::Rng;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            lr_milestones: vec![],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.batch_size >= 2,
            Config,
            "batch size must be >= 2 for batch statistics"
        );
        ensure!(
            self.weight_decay >= 0.0,
            Config,
            "weight decay must be >= 0"
        );
        ensure!(
            self.lr >= 0.0 && self.lr.is_finite(),
            Config,
            "learning rate must be finite and >= 0"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "momentum must lie in [0, 1)"
        );
        ensure!(
            self.lr_decay > 0.0,
            Config,
            "lr decay factor must be positive"
        );
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean over layers of the inhibited-channel ratio on the test set.
    pub inhibited: f64,
    pub inhibited_per_layer: Vec<f64>,
    /// Mean over layers of the mean |off-diagonal| channel correlation.
    pub correlation: f64,
}

pub fn log_table(logs: &[EpochLog]) -> Table {
    let depth = logs.first().map_or(0, |l| l.inhibited_per_layer.len());
    let mut header = vec![
        "epoch",
        "lr",
        "train_loss",
        "train_acc",
        "test_acc",
        "inhibited",
        "correlation",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    header.extend((0..depth).map(|l| format!("inhibited_l{l}")));
    let mut t = Table {
        header,
        rows: Vec::new(),
    };
    for l in logs {
        let mut row = vec![
            l.epoch.to_string(),
            fmt_f64(l.lr),
            fmt_f64(l.train_loss),
            fmt_f64(l.train_acc),
            fmt_f64(l.test_acc),
            fmt_f64(l.inhibited),
            fmt_f64(l.correlation),
        ];
        row.extend(l.inhibited_per_layer.iter().map(|v| fmt_f64(*v)));
        t.push(row);
    }
    t
}

/// Eval-mode measurements on a dataset: (accuracy, inhibited per layer,
/// mean correlation). Leaves the model in eval mode.
pub fn measure(model: &mut Model, data: &Dataset) -> Result<(f64, Vec<f64>, f64)> {
    model.set_mode(Mode::Eval);
    let acc = evaluate(model, data, None)?;
    let acts = layer_activations(model, data)?;
    let mut inhibited = Vec::with_capacity(acts.len());
    let mut corr = 0.0;
    for layer in &acts {
        inhibited.push(inhibited_ratio(layer, INHIBITED_THRESHOLD)?.0);
        let joined = concat_batches(layer);
        corr += correlation_summary(&joined);
    }
    Ok((acc, inhibited, corr / acts.len() as f64))
}

fn concat_batches(maps: &[FeatureMap]) -> FeatureMap {
    let (_, c, h, w) = maps[0].dims();
    let n: usize = maps.iter().map(|m| m.batch()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for m in maps {
        data.extend_from_slice(m.as_slice());
    }
    FeatureMap::new((n, c, h, w), data).expect("concatenated activations are valid")
}

/// SGD with momentum: `v ← μv + (g + wd·w)`, `w ← w − lr·v`, applied to every
/// trainable array (γ and β included).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &mut Model, momentum: f64, weight_decay: f64) -> Self {
        let velocity = model
            .params_mut()
            .iter()
            .map(|p| vec![0.0; p.values.len()])
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `grads` in [`Model::params_mut`] order.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        for ((p, g), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            if !p.trainable {
                continue;
            }
            for ((w, gi), vi) in p.values.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

/// Trains with [`Sgd`]. Full batches only; the sample order of epoch `e`
/// comes from `Rng::new(seed).derive(e)`.
pub fn train(model: &mut Model, task: &SyntheticTask, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    ensure!(
        task.train.len() >= cfg.batch_size,
        Config,
        "training set smaller than one batch"
    );
    ensure!(
        task.train.dims.0 == model.spec.input_channels,
        Config,
        "task channels do not match the model"
    );
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    let root = Rng::new(cfg.seed);
    let k = model.spec.classes;
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        root.derive(epoch as u64).shuffle(&mut order);
        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (step, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let (x, labels) = task.train.batch(idx);
            let trace = model
                .forward(&x, None)
                .map_err(|e| annotate(e, epoch, step))?;
            let (loss, dlogits, ok) = softmax_xent(&trace.logits, &labels, k);
            if !loss.is_finite() {
                return Err(CeError::Divergence(format!(
                    "loss became {loss} at epoch {epoch} step {step}; largest |parameter| = {:e}",
                    max_abs_param(model)
                )));
            }
            let grads = model.backward(&trace, &dlogits)?;
            model.absorb(&trace);
            sgd.step(model, &grads, lr);
            loss_sum += loss * labels.len() as f64;
            correct += ok;
            seen += labels.len();
        }
        let (test_acc, inhibited_per_layer, correlation) = measure(model, &task.test)?;
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            inhibited: inhibited_per_layer.iter().sum::<f64>() / inhibited_per_layer.len() as f64,
            inhibited_per_layer,
            correlation,
        });
    }
    model.set_mode(Mode::Eval);
    Ok(logs)
}

/// A degenerate batch after the first step means the parameters blew up.
fn annotate(e: CeError, epoch: usize, step: usize) -> CeError {
    match e {
        CeError::Degenerate(m) if epoch > 0 || step > 0 => CeError::Divergence(format!(
            "training diverged at epoch {epoch}, step {step}: {m}"
        )),
        other => other,
    }
}

fn max_abs_param(model: &mut Model) -> f64 {
    model
        .params_mut()
        .iter()
        .flat_map(|p| p.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub reduction: usize,
    pub newton_iterations: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            width: 16,
            depth: 6,
            activation: Activation::Relu,
            reduction: 4,
            newton_iterations: 3,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn model_spec(&self, block: BlockSpec) -> ModelSpec {
        let mut spec = ModelSpec::uniform(
            self.task.channels,
            self.width,
            self.task.classes,
            self.depth,
            block,
            self.seed,
        );
        spec.reduction = self.reduction;
        spec.newton.iterations = self.newton_iterations;
        spec
    }

    /// Derives the model, task and shuffle seeds from one seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = crate::rng::mix64(seed);
        self.task.seed = crate::rng::mix64(seed ^ 0x7461_736b);
        self.train.seed = crate::rng::mix64(seed ^ 0x7368_7566);
        self
    }

    /// Same configuration with every seed shifted to replicate `r`.
    pub fn replicate(&self, r: u64) -> RunConfig {
        let mix = |s: u64| crate::rng::mix64(s ^ r.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut out = self.clone();
        if r > 0 {
            out.seed = mix(self.seed);
            out.task.seed = mix(self.task.seed.wrapping_add(1));
            out.train.seed = mix(self.train.seed.wrapping_add(2));
        }
        out
    }
}

/// Trains one variant; returns the trained model and its log.
pub fn run_variant(cfg: &RunConfig, variant: &str) -> Result<(Model, Vec<EpochLog>)> {
    let block = BlockSpec::parse_variant(variant, cfg.activation)?;
    let task = SyntheticTask::generate(&cfg.task)?;
    let mut model = Model::new(cfg.model_spec(block))?;
    let logs = train(&mut model, &task, &cfg.train)?;
    Ok((model, logs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    WeightDecay,
    Ablation,
    CorruptedLabels,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weight-decay" => Ok(Experiment::WeightDecay),
            "ablation" => Ok(Experiment::Ablation),
            "corrupted-labels" => Ok(Experiment::CorruptedLabels),
            other => Err(CeError::Config(format!(
                "unknown experiment `{other}` (expected weight-decay, ablation or corrupted-labels)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::WeightDecay => "weight-decay",
            Experiment::Ablation => "ablation",
            Experiment::CorruptedLabels => "corrupted-labels",
        }
    }
}

/// Grid and replication settings for [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub base: RunConfig,
    pub variants: Vec<String>,
    /// Weight decays (weight-decay sweep) or corruption fractions
    /// (corrupted-labels sweep); unused by the ablation comparison.
    pub grid: Vec<f64>,
    pub replicates: usize,
    pub ablation_layer: usize,
    pub ablation_ratios: Vec<f64>,
    pub ablation_trials: usize,
}

impl ExperimentConfig {
    pub fn defaults(exp: Experiment) -> Self {
        let (variants, grid): (&[&str], Vec<f64>) = match exp {
            Experiment::WeightDecay => (&["bn", "bn+bd", "bn+ce"], vec![1e-4, 5e-4, 1e-3, 5e-3]),
            Experiment::Ablation => (&["bn", "bn+ce"], vec![]),
            Experiment::CorruptedLabels => (&["bn", "bn+ce"], vec![0.0, 0.1, 0.2, 0.3, 0.4]),
        };
        ExperimentConfig {
            base: RunConfig::default(),
            variants: variants.iter().map(|s| s.to_string()).collect(),
            grid,
            replicates: 1,
            ablation_layer: 2,
            ablation_ratios: crate::diagnostics::default_ratios(),
            ablation_trials: 5,
        }
    }
}

/// Metrics of one (variant, grid point, replicate) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub grid_value: f64,
    pub replicate: usize,
    pub metrics: Vec<(String, f64)>,
}

/// Aggregated result set of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    /// Mean of `metric` over replicates for one (variant, grid point).
    pub fn mean(&self, variant: &str, grid_value: f64, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant && r.grid_value == grid_value)
            .filter_map(|r| r.metrics.iter().find(|(m, _)| m == metric).map(|(_, v)| *v))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// One row per (variant, grid point, metric) with mean and std over
    /// replicates.
    pub fn to_table(&self) -> Table {
        let key = match self.experiment {
            Experiment::WeightDecay => "weight_decay",
            Experiment::Ablation => "ratio",
            Experiment::CorruptedLabels => "corruption",
        };
        let mut t = Table::new(&[
            "experiment",
            "variant",
            key,
            "metric",
            "mean",
            "std",
            "replicates",
        ]);
        let mut keys: Vec<(String, f64, String)> = Vec::new();
        for r in &self.runs {
            for (m, _) in &r.metrics {
                let k = (r.variant.clone(), r.grid_value, m.clone());
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        for (variant, g, metric) in keys {
            let vals: Vec<f64> = self
                .runs
                .iter()
                .filter(|r| r.variant == variant && r.grid_value == g)
                .filter_map(|r| {
                    r.metrics
                        .iter()
                        .find(|(m, _)| *m == metric)
                        .map(|(_, v)| *v)
                })
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            t.push(vec![
                self.experiment.name().into(),
                variant,
                fmt_f64(g),
                metric,
                fmt_f64(mean),
                fmt_f64(std),
                vals.len().to_string(),
            ]);
        }
        t
    }
}

/// Runs a named experiment. Grid points are independent and fan out over
/// `exec`; results are gathered in grid order, so output is deterministic.
pub fn run_experiment(
    exp: Experiment,
    cfg: &ExperimentConfig,
    exec: Exec,
) -> Result<ExperimentResult> {
    run_experiment_with(exp, cfg, exec, &|_| Ok(()))
}

/// As [`run_experiment`], calling `sink` from the worker as soon as each
/// (variant, grid point, replicate) job finishes.
pub fn run_experiment_with(
    exp: Experiment,
    cfg: &ExperimentConfig,
    exec: Exec,
    sink: &(dyn Fn(&[RunResult]) -> Result<()> + Sync),
) -> Result<ExperimentResult> {
    ensure!(!cfg.variants.is_empty(), Config, "no variants given");
    ensure!(cfg.replicates >= 1, Config, "need at least one replicate");
    for v in &cfg.variants {
        BlockSpec::parse_variant(v, cfg.base.activation)?;
    }
    let grid: Vec<f64> = match exp {
        Experiment::Ablation => vec![0.0],
        _ => {
            ensure!(
                !cfg.grid.is_empty(),
                Config,
                "empty grid for {}",
                exp.name()
            );
            cfg.grid.clone()
        }
    };
    let mut jobs = Vec::new();
    for v in &cfg.variants {
        for &g in &grid {
            for r in 0..cfg.replicates {
                jobs.push((v.clone(), g, r));
            }
        }
    }
    let results = exec.map(jobs.len(), |j| -> Result<Vec<RunResult>> {
        let out = run_job(exp, cfg, &jobs[j])?;
        sink(&out)?;
        Ok(out)
    });
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    Ok(ExperimentResult {
        experiment: exp,
        runs,
    })
}

fn run_job(
    exp: Experiment,
    cfg: &ExperimentConfig,
    job: &(String, f64, usize),
) -> Result<Vec<RunResult>> {
    let (variant, g, r) = job;
    let mut run = cfg.base.replicate(*r as u64);
    match exp {
        Experiment::WeightDecay => run.train.weight_decay = *g,
        Experiment::CorruptedLabels => run.task.corruption = *g,
        Experiment::Ablation => {}
    }
    let (model, logs) = run_variant(&run, variant)?;
    let last = logs
        .last()
        .ok_or_else(|| CeError::Config("zero epochs".into()))?;
    match exp {
        Experiment::Ablation => {
            let task = SyntheticTask::generate(&run.task)?;
            let curve = cumulative_ablation(
                &model,
                &task.test,
                cfg.ablation_layer,
                &cfg.ablation_ratios,
                cfg.ablation_trials,
                run.seed,
                Exec::Sequential,
            )?;
            Ok(curve
                .ratios
                .iter()
                .zip(&curve.accuracy_mean)
                .map(|(&ratio, &acc)| RunResult {
                    variant: variant.clone(),
                    grid_value: ratio,
                    replicate: *r,
                    metrics: vec![("accuracy".into(), acc)],
                })
                .collect())
        }
        _ => Ok(vec![RunResult {
            variant: variant.clone(),
            grid_value: *g,
            replicate: *r,
            metrics: vec![
                ("inhibited_ratio".into(), last.inhibited),
                ("test_acc".into(), last.test_acc),
                ("train_acc".into(), last.train_acc),
                ("correlation".into(), last.correlation),
            ],
        }]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_milestones: vec![2, 4],
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(
            [cfg.lr_at(0), cfg.lr_at(2), cfg.lr_at(3), cfg.lr_at(5)],
            [1.0, 0.5, 0.5, 0.25]
        );
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(Experiment::parse("nope").is_err());
    }
}
