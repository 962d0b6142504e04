use std::path::{Path, PathBuf};
use std::time::Instant;

use ce_core::ce::{ce_forward, fusion_gap, CeState, FusedLinear, Mode};
use ce_core::data::{Dataset, SyntheticTask};
use ce_core::decorrelate::newton_iterates;
use ce_core::diagnostics::{
    cumulative_ablation, inhibited_ratio, layer_activations, INHIBITED_THRESHOLD,
};
use ce_core::linalg::{inv_sqrt_eig, random};
use ce_core::model::{BlockSpec, Model};
use ce_core::norm::{Activation, NormKind};
use ce_core::par::Exec;
use ce_core::report::{fmt_f64, svg_line_chart, write_atomic, Series, Table};
use ce_core::theory::{
    budget_residual, ce_proxy_map, gamma_amplification_check, kkt_residual, mc_moments_grid,
    nash_closed_form, norm_amplification_check, random_correlation, rect_gauss_moments, solve_nash,
    z_scores, GameSpec,
};
use ce_core::train::{
    log_table, run_experiment_with, train, EpochLog, Experiment, ExperimentConfig, RunConfig,
    RunResult,
};
use ce_core::{CeError, FeatureMap, Matrix, Result, Rng};

use crate::config::{key, Key, Settings};

pub struct Spec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: fn() -> Vec<Key>,
    pub schema: &'static str,
    pub run: fn(&Settings, Option<&str>) -> Result<()>,
}

pub const SPECS: [Spec; 8] = [
    Spec {
        name: "newton-bench",
        about: "Newton-Schulz inverse square root on random trace-normalized SPD matrices",
        keys: newton_keys,
        schema: "  newton_bench.csv: trial,iteration,residual,oracle_max_abs_diff\n  \
                 newton_bench.svg: log10 mean residual per iteration",
        run: newton_bench,
    },
    Spec {
        name: "moments",
        about: "Closed-form moments of relu(gamma*x + beta), x ~ N(0,1), optionally against Monte Carlo",
        keys: moments_keys,
        schema: "  moments.csv: gamma,beta,mean,second,mc_samples,mc_mean,mc_mean_se,mc_second,mc_second_se,z_mean,z_second\n  \
                 moments.svg: E[y] against gamma for beta in {-1,0,1}",
        run: moments,
    },
    Spec {
        name: "nash",
        about: "Nash equilibrium of the Gaussian interference game and its CE-style linear proxy",
        keys: nash_keys,
        schema: "  nash_game.json, nash_solution.json\n  \
                 nash.csv: channel,neuron,power,closed_form,v0\n  \
                 proxy.csv: channel,neuron,proxy_power,gamma_eq,beta_eq",
        run: nash,
    },
    Spec {
        name: "prop-check",
        about: "Gamma and norm amplification checks of batch decorrelation on random instances",
        keys: prop_keys,
        schema: "  prop_check.csv: instance,check,value,holds\n  \
                 (value: min |gamma_hat|/|gamma| for gamma checks, norm ratio for norm checks)",
        run: prop_check,
    },
    Spec {
        name: "train",
        about: "Train one variant on the synthetic task (or CSV data)",
        keys: train_keys,
        schema: "  train_log.csv: epoch,lr,train_loss,train_acc,test_acc,inhibited,correlation,inhibited_l<k>...\n  \
                 channels.csv: layer,channel,magnitude,inhibited,gamma\n  \
                 model/: model.json manifest and weights.cear\n  \
                 train_log.svg: test accuracy and inhibited ratio per epoch",
        run: train_cmd,
    },
    Spec {
        name: "ablate",
        about: "Cumulative channel-ablation curve of a trained (or freshly trained) model",
        keys: ablate_keys,
        schema: "  ablation.csv: ratio,accuracy_mean,accuracy_std,trials,seed\n  \
                 ablation.svg: accuracy against ablated fraction",
        run: ablate,
    },
    Spec {
        name: "sweep",
        about: "Named experiment over variants and a grid: weight-decay, ablation, corrupted-labels",
        keys: sweep_keys,
        schema: "  sweep_<experiment>.csv: experiment,variant,<grid key>,metric,mean,std,replicates\n  \
                 runs_<experiment>.csv: experiment,variant,<grid key>,replicate,metric,value\n  \
                 runs/<experiment>/*.csv: one file per job, merged into runs_<experiment>.csv\n  \
                 sweep_<experiment>.svg",
        run: sweep,
    },
    Spec {
        name: "fuse-check",
        about: "Eval-mode fused BD linear map against the unfused computation",
        keys: fuse_keys,
        schema: "  fuse_check.csv: instance,channels,max_abs_diff",
        run: fuse_check,
    },
];

fn common() -> Vec<Key> {
    vec![
        key("out", "results", "output directory"),
        key("seed", "0", "random seed"),
    ]
}

fn with_common(mut keys: Vec<Key>) -> Vec<Key> {
    keys.extend(common());
    keys
}

fn newton_keys() -> Vec<Key> {
    with_common(vec![
        key("dim", "16", "matrix size"),
        key("iters", "3", "Newton iterations"),
        key("trials", "10", "number of random matrices"),
        key(
            "min-eig",
            "0.01",
            "smallest eigenvalue after trace normalization",
        ),
    ])
}

fn moments_keys() -> Vec<Key> {
    with_common(vec![
        key("gamma", "1", "scale"),
        key("beta", "0", "shift"),
        key(
            "grid",
            "false",
            "evaluate the 24-point (gamma, beta) grid instead of one point",
        ),
        key(
            "mc-samples",
            "0",
            "Monte Carlo samples per point (0 = closed form only)",
        ),
        key("exec", "parallel", "parallel or sequential"),
    ])
}

fn nash_keys() -> Vec<Key> {
    with_common(vec![
        key("channels", "2", "players"),
        key("height", "2", "neuron grid height"),
        key("width", "2", "neuron grid width"),
        key(
            "game",
            "",
            "JSON game file (random interior game when empty)",
        ),
        key("delta", "0", "proxy slack added to 2 in the shift"),
    ])
}

fn prop_keys() -> Vec<Key> {
    with_common(vec![
        key("instances", "100", "random instances per check"),
        key("channels", "8", "channels"),
        key(
            "samples",
            "64",
            "samples behind each random correlation matrix",
        ),
    ])
}

fn fuse_keys() -> Vec<Key> {
    with_common(vec![
        key("instances", "50", "random instances"),
        key("channels", "8", "CE channels"),
        key("in-channels", "6", "inputs of the preceding linear map"),
        key("batch", "4", "samples per batch"),
        key("tolerance", "1e-8", "largest accepted |fused - unfused|"),
    ])
}

fn model_keys() -> Vec<Key> {
    vec![
        key(
            "activation",
            "relu",
            "relu, identity, leaky-relu:<slope> or elu:<alpha>",
        ),
        key("model-width", "16", "channels per block"),
        key("depth", "6", "blocks"),
        key("reduction", "4", "IR bottleneck reduction"),
        key("newton-iters", "3", "Newton iterations in BD"),
        key("epochs", "30", "training epochs"),
        key("batch-size", "32", "minibatch size"),
        key("lr", "0.1", "learning rate"),
        key(
            "lr-milestones",
            "",
            "comma-separated epochs where lr is multiplied by lr-decay",
        ),
        key("lr-decay", "0.1", "learning-rate decay factor"),
        key("momentum", "0.9", "SGD momentum"),
        key(
            "weight-decay",
            "1e-4",
            "L2 penalty on every trainable parameter",
        ),
        key("classes", "4", "synthetic classes"),
        key("input-channels", "8", "synthetic input channels"),
        key("input-height", "2", "synthetic input height"),
        key("input-width", "2", "synthetic input width"),
        key("train-size", "1024", "synthetic training samples"),
        key("test-size", "512", "synthetic test samples"),
        key("separation", "0.6", "scale of the class mean patterns"),
        key("corruption", "0", "fraction of training labels flipped"),
        key(
            "train-csv",
            "",
            "CSV rows `label,v1..vD` replacing the synthetic training set",
        ),
        key("test-csv", "", "CSV rows replacing the synthetic test set"),
    ]
}

fn train_keys() -> Vec<Key> {
    let mut k = vec![key("variant", "bn+ce", "bn, in, ln, bn+ce, bn+bd or bn+ir")];
    k.extend(model_keys());
    with_common(k)
}

const DEFAULT_RATIOS: &str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";

fn ablate_keys() -> Vec<Key> {
    let mut k = train_keys();
    k.extend([
        key("model", "", "saved model directory (trains one when empty)"),
        key("layer", "2", "block whose outputs are ablated (0-based)"),
        key("ratios", DEFAULT_RATIOS, "ablated channel fractions"),
        key("trials", "5", "random channel subsets per ratio"),
        key("exec", "parallel", "parallel or sequential"),
    ]);
    k
}

fn sweep_keys() -> Vec<Key> {
    let mut k = model_keys();
    k.extend([
        key(
            "variants",
            "",
            "comma-separated variants (experiment default when empty)",
        ),
        key(
            "grid",
            "",
            "weight decays or corruption fractions (experiment default when empty)",
        ),
        key("replicates", "1", "independent seeds per grid point"),
        key(
            "ablation-layer",
            "2",
            "ablated block for the ablation experiment",
        ),
        key("ablation-ratios", DEFAULT_RATIOS, "ablated fractions"),
        key("ablation-trials", "5", "subsets per ratio"),
        key("exec", "parallel", "parallel or sequential"),
    ]);
    with_common(k)
}

fn exec(s: &Settings) -> Result<Exec> {
    match s.raw("exec") {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        other => Err(CeError::Config(format!(
            "`exec`: expected parallel or sequential, got `{other}`"
        ))),
    }
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.raw("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CeError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CeError::Io(e.to_string()))
}

fn elapsed(t: Instant) -> String {
    format!("{:.3}s", t.elapsed().as_secs_f64())
}

fn newton_bench(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let dim: usize = s.get("dim")?;
    let iters: usize = s.get("iters")?;
    let trials: usize = s.get("trials")?;
    let min_eig: f64 = s.get("min-eig")?;
    if dim == 0 || trials == 0 {
        return Err(CeError::Config(
            "`dim` and `trials` must be positive".into(),
        ));
    }
    if !(min_eig > 0.0 && min_eig * dim as f64 <= 1.0) {
        return Err(CeError::Config(format!(
            "`min-eig` must lie in (0, 1/dim] = (0, {}]",
            1.0 / dim as f64
        )));
    }
    let root = Rng::new(s.get("seed")?);
    let mut table = Table::new(&["trial", "iteration", "residual", "oracle_max_abs_diff"]);
    let mut sums = vec![0.0; iters + 1];
    let mut finals = Vec::with_capacity(trials);
    for trial in 0..trials {
        let a = random::trace_normalized_spd(dim, min_eig, &mut root.derive(trial as u64));
        let trace = newton_iterates(&a, iters)?;
        let oracle = inv_sqrt_eig(&a)?;
        for (k, (y, r)) in trace.iterates.iter().zip(&trace.residuals).enumerate() {
            let diff = y.max_abs_diff(&oracle);
            table.push(vec![
                trial.to_string(),
                k.to_string(),
                fmt_f64(*r),
                fmt_f64(diff),
            ]);
            sums[k] += r;
        }
        let y = trace.iterates.last().expect("at least one iterate");
        let sandwich = y.mul(&a).mul(y).sub(&Matrix::identity(dim)).frobenius();
        finals.push((sandwich, y.max_abs_diff(&oracle)));
    }
    let dir = out_dir(s)?;
    table.write_csv(&dir.join("newton_bench.csv"))?;
    let curve = Series {
        name: format!("C={dim}"),
        points: sums
            .iter()
            .enumerate()
            .map(|(k, r)| (k as f64, (r / trials as f64).log10()))
            .collect(),
    };
    write_text(
        &dir.join("newton_bench.svg"),
        &svg_line_chart(
            "Newton-Schulz convergence",
            "iteration",
            "log10 residual",
            &[curve],
        ),
    )?;
    let worst = finals
        .iter()
        .fold((0.0f64, 0.0f64), |m, f| (m.0.max(f.0), m.1.max(f.1)));
    println!("dim {dim}, T = {iters}, {trials} matrices");
    println!("max residual ||Y S Y - I||_F = {:.6e}", worst.0);
    println!("max |Y - S^(-1/2)| (eigen oracle) = {:.6e}", worst.1);
    println!("wall time {}", elapsed(t0));
    Ok(())
}

const MOMENT_GRID_GAMMA: [f64; 6] = [-2.0, -1.0, -0.1, 0.1, 1.0, 2.0];
const MOMENT_GRID_BETA: [f64; 4] = [-2.0, -1.0, 0.0, 1.0];

fn moments(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let samples: u64 = s.get("mc-samples")?;
    let seed: u64 = s.get("seed")?;
    let points: Vec<(f64, f64)> = if s.flag("grid")? {
        MOMENT_GRID_GAMMA
            .iter()
            .flat_map(|&g| MOMENT_GRID_BETA.iter().map(move |&b| (g, b)))
            .collect()
    } else {
        let (g, b): (f64, f64) = (s.get("gamma")?, s.get("beta")?);
        if !(g.is_finite() && b.is_finite()) {
            return Err(CeError::Config("gamma and beta must be finite".into()));
        }
        vec![(g, b)]
    };
    let mc = if samples > 0 {
        Some(mc_moments_grid(&points, samples, seed, exec(s)?))
    } else {
        None
    };
    let mut table = Table::new(&[
        "gamma",
        "beta",
        "mean",
        "second",
        "mc_samples",
        "mc_mean",
        "mc_mean_se",
        "mc_second",
        "mc_second_se",
        "z_mean",
        "z_second",
    ]);
    let mut worst_z = 0.0f64;
    for (i, &(g, b)) in points.iter().enumerate() {
        let m = rect_gauss_moments(g, b);
        let mut row = vec![fmt_f64(g), fmt_f64(b), fmt_f64(m.mean), fmt_f64(m.second)];
        match &mc {
            Some(est) => {
                let e = &est[i];
                let (z1, z2) = z_scores(&m, e);
                worst_z = worst_z.max(z1.abs()).max(z2.abs());
                row.extend([
                    e.samples.to_string(),
                    fmt_f64(e.mean),
                    fmt_f64(e.mean_se),
                    fmt_f64(e.second),
                    fmt_f64(e.second_se),
                    fmt_f64(z1),
                    fmt_f64(z2),
                ]);
            }
            None => row.extend(std::iter::repeat(String::new()).take(7)),
        }
        table.push(row);
        if points.len() == 1 {
            println!("E[y]   = {:.12}", m.mean);
            println!("E[y^2] = {:.12}", m.second);
        }
    }
    let dir = out_dir(s)?;
    table.write_csv(&dir.join("moments.csv"))?;
    let series: Vec<Series> = [-1.0, 0.0, 1.0]
        .iter()
        .map(|&b| Series {
            name: format!("beta={b}"),
            points: (0..=80)
                .map(|i| {
                    let g = -2.0 + 0.05 * i as f64;
                    (g, rect_gauss_moments(g, b).mean)
                })
                .collect(),
        })
        .collect();
    write_text(
        &dir.join("moments.svg"),
        &svg_line_chart("Rectified Gaussian mean", "gamma", "E[y]", &series),
    )?;
    if mc.is_some() {
        println!(
            "{} points, {samples} samples each, max |z| = {worst_z:.3}",
            points.len()
        );
    }
    println!("wall time {}", elapsed(t0));
    Ok(())
}

fn nash(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let game = match s.opt_str("game") {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| CeError::Io(format!("{path}: {e}")))?;
            let g: GameSpec =
                serde_json::from_str(&text).map_err(|e| CeError::Config(format!("{path}: {e}")))?;
            g.validate()?;
            g
        }
        None => {
            let (c, h, w): (usize, usize, usize) =
                (s.get("channels")?, s.get("height")?, s.get("width")?);
            if c == 0 || h == 0 || w == 0 {
                return Err(CeError::Config(
                    "channels, height and width must be positive".into(),
                ));
            }
            GameSpec::random_interior(c, h, w, &mut Rng::new(s.get("seed")?))
        }
    };
    let delta: f64 = s.get("delta")?;
    let sol = solve_nash(&game)?;
    let closed = nash_closed_form(&game, &sol.v0)?;
    let proxy = ce_proxy_map(&game, &sol.v0, &vec![delta; game.channels])?;
    let n = game.neurons();
    let dir = out_dir(s)?;
    write_text(&dir.join("nash_game.json"), &json(&game)?)?;
    write_text(&dir.join("nash_solution.json"), &json(&sol)?)?;
    let mut table = Table::new(&["channel", "neuron", "power", "closed_form", "v0"]);
    let mut proxy_table = Table::new(&["channel", "neuron", "proxy_power", "gamma_eq", "beta_eq"]);
    for c in 0..game.channels {
        for j in 0..n {
            let i = c * n + j;
            table.push(vec![
                c.to_string(),
                j.to_string(),
                fmt_f64(sol.p[i]),
                closed.as_ref().map_or(String::new(), |p| fmt_f64(p[i])),
                fmt_f64(sol.v0[c]),
            ]);
            proxy_table.push(vec![
                c.to_string(),
                j.to_string(),
                fmt_f64(proxy.powers[i]),
                fmt_f64(proxy.gamma_eq[c]),
                fmt_f64(proxy.beta_eq[c]),
            ]);
        }
    }
    table.write_csv(&dir.join("nash.csv"))?;
    proxy_table.write_csv(&dir.join("proxy.csv"))?;
    println!(
        "{} channels x {n} neurons, {} best-response rounds, interior: {}",
        game.channels,
        sol.rounds,
        sol.is_interior()
    );
    println!("KKT residual {:.3e}", kkt_residual(&game, &sol));
    println!("budget residual {:.3e}", budget_residual(&game, &sol.p));
    match closed {
        Some(p) => {
            let gap = p
                .iter()
                .zip(&sol.p)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            println!("closed form max |diff| {gap:.3e}");
        }
        None => println!("closed form not applicable (boundary equilibrium)"),
    }
    println!("wall time {}", elapsed(t0));
    Ok(())
}

fn prop_check(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let n: usize = s.get("instances")?;
    let c: usize = s.get("channels")?;
    let samples: usize = s.get("samples")?;
    if c < 2 || samples <= c {
        return Err(CeError::Config(
            "need channels >= 2 and samples > channels".into(),
        ));
    }
    let root = Rng::new(s.get("seed")?);
    let mut table = Table::new(&["instance", "check", "value", "holds"]);
    let mut failures = [0usize; 2];
    for i in 0..n {
        let mut rng = root.derive(i as u64);
        let rho = random_correlation(c, samples, &mut rng);
        let gamma: Vec<f64> = (0..c)
            .map(|_| {
                let m = rng.uniform_range(0.1, 2.0);
                if rng.uniform() < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect();
        let check = gamma_amplification_check(&rho, &gamma)?;
        let ratio = check
            .gamma_hat
            .iter()
            .zip(&gamma)
            .map(|(h, g)| h.abs() / g.abs())
            .fold(f64::INFINITY, f64::min);
        failures[0] += usize::from(!check.holds());
        table.push(vec![
            i.to_string(),
            "gamma".into(),
            fmt_f64(ratio),
            u8::from(check.holds()).to_string(),
        ]);

        let sigma = random::trace_normalized_spd(c, 0.1 / c as f64, &mut rng);
        let x: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let (r, ok) = norm_amplification_check(&sigma, &x)?;
        failures[1] += usize::from(!ok);
        table.push(vec![
            i.to_string(),
            "norm".into(),
            fmt_f64(r),
            u8::from(ok).to_string(),
        ]);
    }
    let ones = Matrix::from_fn(c, c, |_, _| 1.0);
    let gamma: Vec<f64> = (0..c).map(|k| 0.5 + k as f64 / c as f64).collect();
    let boundary = gamma_amplification_check(&ones, &gamma)?;
    let ratio = boundary
        .gamma_hat
        .iter()
        .zip(&gamma)
        .map(|(h, g)| h.abs() / g.abs())
        .fold(f64::INFINITY, f64::min);
    table.push(vec![
        n.to_string(),
        "gamma-boundary".into(),
        fmt_f64(ratio),
        u8::from(boundary.holds()).to_string(),
    ]);
    table.write_csv(&out_dir(s)?.join("prop_check.csv"))?;
    println!(
        "gamma amplification: {} / {n} instances hold",
        n - failures[0]
    );
    println!(
        "norm amplification:  {} / {n} instances hold",
        n - failures[1]
    );
    println!("all-ones boundary gives equality: {}", boundary.holds());
    println!("wall time {}", elapsed(t0));
    Ok(())
}

fn fuse_check(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let n: usize = s.get("instances")?;
    let c: usize = s.get("channels")?;
    let cin: usize = s.get("in-channels")?;
    let batch: usize = s.get("batch")?;
    let tol: f64 = s.get("tolerance")?;
    if c == 0 || cin == 0 || batch < 2 {
        return Err(CeError::Config(
            "need channels, in-channels >= 1 and batch >= 2".into(),
        ));
    }
    let root = Rng::new(s.get("seed")?);
    let mut table = Table::new(&["instance", "channels", "max_abs_diff"]);
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = root.derive(i as u64);
        let mut st = CeState::new(c, &mut rng);
        for g in st.gamma.iter_mut() {
            *g = rng.uniform_range(0.5, 1.5) * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        }
        for b in st.beta.iter_mut() {
            *b = 0.5 * rng.normal();
        }
        st.lambda_raw = rng.normal();
        for _ in 0..3 {
            let x = FeatureMap::random_normal((batch, c, 2, 2), &mut rng).map(|v| 1.5 * v + 0.3);
            let out = ce_forward(&x, &st, NormKind::Batch)?;
            st.absorb_batch(out.cache.as_ref().expect("train mode keeps a cache"));
        }
        st.mode = Mode::Eval;
        let lin = FusedLinear {
            weight: Matrix::from_fn(c, cin, |_, _| rng.normal()),
            bias: (0..c).map(|_| rng.normal()).collect(),
        };
        let z = FeatureMap::random_normal((batch, cin, 2, 2), &mut rng);
        let gap = fusion_gap(&st, &lin, &z)?;
        worst = worst.max(gap);
        table.push(vec![i.to_string(), c.to_string(), fmt_f64(gap)]);
    }
    table.write_csv(&out_dir(s)?.join("fuse_check.csv"))?;
    println!("{n} instances, max |fused - unfused| = {worst:.3e}");
    println!("wall time {}", elapsed(t0));
    if worst >= tol {
        return Err(CeError::Contract(format!(
            "fused path differs by {worst:e} (tolerance {tol:e})"
        )));
    }
    Ok(())
}

fn run_config(s: &Settings) -> Result<RunConfig> {
    let mut r = RunConfig::default();
    r.activation = Activation::parse(s.raw("activation"))?;
    r.width = s.get("model-width")?;
    r.depth = s.get("depth")?;
    r.reduction = s.get("reduction")?;
    r.newton_iterations = s.get("newton-iters")?;
    r.train.epochs = s.get("epochs")?;
    r.train.batch_size = s.get("batch-size")?;
    r.train.lr = s.get("lr")?;
    r.train.lr_milestones = s.list("lr-milestones")?;
    r.train.lr_decay = s.get("lr-decay")?;
    r.train.momentum = s.get("momentum")?;
    r.train.weight_decay = s.get("weight-decay")?;
    r.task.classes = s.get("classes")?;
    r.task.channels = s.get("input-channels")?;
    r.task.height = s.get("input-height")?;
    r.task.width = s.get("input-width")?;
    r.task.train_size = s.get("train-size")?;
    r.task.test_size = s.get("test-size")?;
    r.task.separation = s.get("separation")?;
    r.task.corruption = s.get("corruption")?;
    let r = r.with_seed(s.get("seed")?);
    r.train.validate()?;
    r.task.validate()?;
    Ok(r)
}

fn load_task(s: &Settings, run: &RunConfig) -> Result<SyntheticTask> {
    let dims = (run.task.channels, run.task.height, run.task.width);
    match (s.opt_str("train-csv"), s.opt_str("test-csv")) {
        (None, None) => SyntheticTask::generate(&run.task),
        (Some(tr), Some(te)) => {
            let train = Dataset::from_csv(Path::new(tr), dims, run.task.classes)?;
            let test = Dataset::from_csv(Path::new(te), dims, run.task.classes)?;
            Ok(SyntheticTask {
                spec: run.task.clone(),
                clean_labels: train.labels.clone(),
                train,
                test,
            })
        }
        _ => Err(CeError::Config(
            "`train-csv` and `test-csv` must be given together".into(),
        )),
    }
}

fn train_model(
    s: &Settings,
    run: &RunConfig,
    task: &SyntheticTask,
) -> Result<(Model, Vec<EpochLog>)> {
    let block = BlockSpec::parse_variant(s.raw("variant"), run.activation)?;
    let mut model = Model::new(run.model_spec(block))?;
    let logs = train(&mut model, task, &run.train)?;
    Ok((model, logs))
}

fn train_cmd(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let run = run_config(s)?;
    let task = load_task(s, &run)?;
    let (model, logs) = train_model(s, &run, &task)?;
    let log = log_table(&logs);
    let dir = out_dir(s)?;
    log.write_csv(&dir.join("train_log.csv"))?;
    let mut channels = Table::new(&["layer", "channel", "magnitude", "inhibited", "gamma"]);
    for (l, acts) in layer_activations(&model, &task.test)?.iter().enumerate() {
        let (_, report) = inhibited_ratio(acts, INHIBITED_THRESHOLD)?;
        let gamma = model.blocks[l].norm.gamma();
        for (c, (m, inh)) in report.magnitude.iter().zip(&report.inhibited).enumerate() {
            channels.push(vec![
                l.to_string(),
                c.to_string(),
                fmt_f64(*m),
                u8::from(*inh).to_string(),
                fmt_f64(gamma[c]),
            ]);
        }
    }
    channels.write_csv(&dir.join("channels.csv"))?;
    model.save(&dir.join("model"))?;
    let column = |name: &str| -> Vec<(f64, f64)> {
        let k = log.column(name).expect("logged column");
        log.rows
            .iter()
            .map(|r| {
                (
                    r[0].parse().unwrap_or(0.0),
                    r[k].parse().unwrap_or(f64::NAN),
                )
            })
            .collect()
    };
    let series = [
        Series {
            name: "test accuracy".into(),
            points: column("test_acc"),
        },
        Series {
            name: "inhibited ratio".into(),
            points: column("inhibited"),
        },
    ];
    write_text(
        &dir.join("train_log.svg"),
        &svg_line_chart(s.raw("variant"), "epoch", "value", &series),
    )?;
    if let Some(last) = logs.last() {
        println!(
            "{}: {} parameters, test accuracy {:.4}, inhibited ratio {:.4}",
            s.raw("variant"),
            model.parameter_count(),
            last.test_acc,
            last.inhibited
        );
    }
    println!("wall time {}", elapsed(t0));
    Ok(())
}

fn ablate(s: &Settings, _: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let run = run_config(s)?;
    let task = load_task(s, &run)?;
    let model = match s.opt_str("model") {
        Some(dir) => Model::load(Path::new(dir))?,
        None => train_model(s, &run, &task)?.0,
    };
    let ratios: Vec<f64> = s.list("ratios")?;
    let curve = cumulative_ablation(
        &model,
        &task.test,
        s.get("layer")?,
        &ratios,
        s.get("trials")?,
        s.get("seed")?,
        exec(s)?,
    )?;
    let dir = out_dir(s)?;
    curve.to_table().write_csv(&dir.join("ablation.csv"))?;
    let series = [Series {
        name: model.blocks[0].spec.variant(),
        points: curve
            .ratios
            .iter()
            .copied()
            .zip(curve.accuracy_mean.iter().copied())
            .collect(),
    }];
    write_text(
        &dir.join("ablation.svg"),
        &svg_line_chart(
            "Cumulative ablation",
            "ablated fraction",
            "accuracy",
            &series,
        ),
    )?;
    for (r, a) in curve.ratios.iter().zip(&curve.accuracy_mean) {
        println!("ratio {r:.2}: accuracy {a:.4}");
    }
    println!("wall time {}", elapsed(t0));
    Ok(())
}

fn run_file_name(exp: Experiment, r: &RunResult) -> String {
    let grid = match exp {
        Experiment::Ablation => "curve".to_string(),
        _ => format!("{}", r.grid_value),
    };
    format!(
        "{}_{}_r{}.csv",
        r.variant.replace('+', "-"),
        grid,
        r.replicate
    )
}

fn runs_table(exp: Experiment, key: &str, runs: &[RunResult]) -> Table {
    let mut t = Table::new(&["experiment", "variant", key, "replicate", "metric", "value"]);
    for r in runs {
        for (m, v) in &r.metrics {
            t.push(vec![
                exp.name().into(),
                r.variant.clone(),
                fmt_f64(r.grid_value),
                r.replicate.to_string(),
                m.clone(),
                fmt_f64(*v),
            ]);
        }
    }
    t
}

fn sweep(s: &Settings, name: Option<&str>) -> Result<()> {
    let t0 = Instant::now();
    let exp = Experiment::parse(name.unwrap_or(""))?;
    let mut cfg = ExperimentConfig::defaults(exp);
    cfg.base = run_config(s)?;
    let variants: Vec<String> = s.list("variants")?;
    if !variants.is_empty() {
        cfg.variants = variants;
    }
    let grid: Vec<f64> = s.list("grid")?;
    if !grid.is_empty() {
        cfg.grid = grid;
    }
    cfg.replicates = s.get("replicates")?;
    cfg.ablation_layer = s.get("ablation-layer")?;
    cfg.ablation_ratios = s.list("ablation-ratios")?;
    cfg.ablation_trials = s.get("ablation-trials")?;
    let (key, metric, x_label) = match exp {
        Experiment::WeightDecay => ("weight_decay", "inhibited_ratio", "log10 weight decay"),
        Experiment::Ablation => ("ratio", "accuracy", "ablated fraction"),
        Experiment::CorruptedLabels => ("corruption", "test_acc", "corrupted fraction"),
    };
    let dir = out_dir(s)?;
    let runs_dir = dir.join("runs").join(exp.name());
    let sink = |r: &[RunResult]| -> Result<()> {
        match r.first() {
            Some(first) => {
                runs_table(exp, key, r).write_csv(&runs_dir.join(run_file_name(exp, first)))
            }
            None => Ok(()),
        }
    };
    let result = run_experiment_with(exp, &cfg, exec(s)?, &sink)?;

    // Merge the per-job files in job order.
    let mut merged = Table::new(&["experiment", "variant", key, "replicate", "metric", "value"]);
    let mut seen: Vec<String> = Vec::new();
    for r in &result.runs {
        let file = run_file_name(exp, r);
        if seen.contains(&file) {
            continue;
        }
        let path = runs_dir.join(&file);
        let mut reader = csv::Reader::from_path(&path)
            .map_err(|e| CeError::Io(format!("{}: {e}", path.display())))?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| CeError::Io(e.to_string()))?;
            merged.push(rec.iter().map(String::from).collect());
        }
        seen.push(file);
    }
    merged.write_csv(&dir.join(format!("runs_{}.csv", exp.name())))?;
    result
        .to_table()
        .write_csv(&dir.join(format!("sweep_{}.csv", exp.name())))?;

    let mut series = Vec::new();
    for v in &cfg.variants {
        let mut xs: Vec<f64> = result
            .runs
            .iter()
            .filter(|r| &r.variant == v)
            .map(|r| r.grid_value)
            .collect();
        xs.dedup();
        let points = xs
            .iter()
            .filter_map(|&x| {
                let y = result.mean(v, x, metric)?;
                let x = if exp == Experiment::WeightDecay {
                    x.log10()
                } else {
                    x
                };
                Some((x, y))
            })
            .collect();
        series.push(Series {
            name: v.clone(),
            points,
        });
    }
    write_text(
        &dir.join(format!("sweep_{}.svg", exp.name())),
        &svg_line_chart(exp.name(), x_label, metric, &series),
    )?;
    for v in &series {
        let pts: Vec<String> = v
            .points
            .iter()
            .map(|(x, y)| format!("{x:.3}:{y:.4}"))
            .collect();
        println!("{:8} {metric}: {}", v.name, pts.join("  "));
    }
    println!("wall time {}", elapsed(t0));
    Ok(())
}
