//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances and sizes are fixed here, not tuned per run.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use ce_core::ce::{ce_forward, fusion_gap, FusedLinear, Mode};
use ce_core::decorrelate::newton_iterates;
use ce_core::linalg::{inv_sqrt_eig, random};
use ce_core::norm::NormKind;
use ce_core::par::Exec;
use ce_core::theory::{
    budget_residual, gamma_amplification_check, kkt_residual, mc_moments_grid, nash_closed_form,
    norm_amplification_check, payoff, random_correlation, rect_gauss_moments, solve_nash, z_scores,
    GameSpec,
};
use ce_core::train::{run_experiment, Experiment, ExperimentConfig};
use ce_core::{FeatureMap, Matrix, Rng};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn check(id: u32, name: &str, limit_s: f64, f: impl FnOnce() -> Verdict) -> bool {
    let t0 = Instant::now();
    let v = f();
    let secs = t0.elapsed().as_secs_f64();
    let pass = v.pass && secs < limit_s;
    println!(
        "{} {id} {name}: {} [{secs:.1}s, limit {limit_s}s]",
        if pass { "PASS" } else { "FAIL" },
        v.detail
    );
    pass
}

fn newton_schulz() -> Verdict {
    let mut rng = Rng::new(0x4e53);
    let (mut res10, mut oracle, mut res3, mut inv) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in [4, 8, 16, 32] {
        for _ in 0..50 {
            let a = random::trace_normalized_spd(c, 0.01, &mut rng);
            let exact = inv_sqrt_eig(&a).unwrap();
            let t10 = newton_iterates(&a, 10).unwrap();
            res10 = res10.max(t10.residuals[10]);
            oracle = oracle.max(t10.result().max_abs_diff(&exact));
            let t3 = newton_iterates(&a, 3).unwrap();
            res3 = res3.max(t3.residuals[3]);
            for y in &t3.iterates {
                let comm = y.mul(&a).sub(&a.mul(y)).frobenius();
                inv = inv.max(comm).max(y.asymmetry());
            }
        }
    }
    let ok10 = res10 < 1e-6 && oracle < 1e-5;
    let ok3 = res3 < 1e-1;
    let ok_inv = inv < 1e-12;
    verdict(
        ok10 && ok3 && ok_inv,
        format!(
            "200 matrices; T=10 residual {res10:.2e} (<1e-6), oracle diff {oracle:.2e} (<1e-5); \
             T=3 residual {res3:.2e} (<1e-1{}); commutator/asymmetry {inv:.2e}",
            if ok3 { "" } else { ", violated" }
        ),
    )
}

fn moments() -> Verdict {
    let mut points = Vec::new();
    for g in [-2.0, -1.0, -0.1, 0.1, 1.0, 2.0] {
        for b in [-2.0, -1.0, 0.0, 1.0] {
            points.push((g, b));
        }
    }
    let mc = mc_moments_grid(&points, 10_000_000, 0x6d6f, Exec::Parallel);
    let mut worst_z = 0.0f64;
    for (&(g, b), est) in points.iter().zip(&mc) {
        let (z1, z2) = z_scores(&rect_gauss_moments(g, b), est);
        worst_z = worst_z.max(z1).max(z2);
    }
    let mut vanish_fail = Vec::new();
    for b in [-2.0, -1.0, -0.5, 0.0] {
        let m = rect_gauss_moments(1e-6, b);
        if !(m.mean < 1e-10 && m.second < 1e-10) {
            vanish_fail.push(format!("beta={b}: E[y]={:.3e}", m.mean));
        }
    }
    verdict(
        worst_z < 4.0 && vanish_fail.is_empty(),
        format!(
            "{} points x 1e7 samples, max |z| {worst_z:.2} (<4); vanishing at gamma=1e-6: {}",
            points.len(),
            if vanish_fail.is_empty() {
                "ok".to_string()
            } else {
                format!("violated ({})", vanish_fail.join(", "))
            }
        ),
    )
}

/// `γ̂_c = γ_c (3 − f_c)/2`, `f_c = Σ_d γ_d² ρ_cd / ‖γ‖²`, written out per channel.
fn gamma_hat_oracle(rho: &Matrix, gamma: &[f64]) -> Vec<f64> {
    let n2: f64 = gamma.iter().map(|g| g * g).sum();
    (0..gamma.len())
        .map(|c| {
            let f: f64 = (0..gamma.len())
                .map(|d| gamma[d] * gamma[d] * rho[(c, d)])
                .sum::<f64>()
                / n2;
            gamma[c] * (3.0 - f) / 2.0
        })
        .collect()
}

fn amplification() -> Verdict {
    let mut rng = Rng::new(0x7031);
    let mut strict_ok = 0;
    let mut oracle_diff = 0.0f64;
    for _ in 0..100 {
        let c = 2 + rng.below(7) as usize;
        let rho = random_correlation(c, 4 * c + 8, &mut rng);
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
        let chk = gamma_amplification_check(&rho, &gamma).unwrap();
        let oracle = gamma_hat_oracle(&rho, &gamma);
        for (a, b) in chk.gamma_hat.iter().zip(&oracle) {
            oracle_diff = oracle_diff.max((a - b).abs());
        }
        if !chk.boundary && chk.holds() {
            strict_ok += 1;
        }
    }
    let ones = Matrix::from_fn(5, 5, |_, _| 1.0);
    let gamma = [0.3, -1.2, 0.7, 2.0, -0.5];
    let edge = gamma_amplification_check(&ones, &gamma).unwrap();
    let equality = edge.boundary
        && edge.holds()
        && edge
            .gamma_hat
            .iter()
            .zip(&gamma)
            .all(|(h, g)| (h - g).abs() < 1e-12);

    let mut norm_ok = 0;
    let mut min_ratio = f64::INFINITY;
    for _ in 0..100 {
        let c = 2 + rng.below(15) as usize;
        let sigma = random::trace_normalized_spd(c, 0.1 / c as f64, &mut rng);
        let x: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let (ratio, holds) = norm_amplification_check(&sigma, &x).unwrap();
        min_ratio = min_ratio.min(ratio);
        norm_ok += holds as usize;
    }
    verdict(
        strict_ok == 100 && equality && norm_ok == 100 && oracle_diff < 1e-12,
        format!(
            "gamma amplification strict on {strict_ok}/100, all-ones equality {equality}, \
             oracle diff {oracle_diff:.1e}; norm amplification on {norm_ok}/100 \
             (min ratio {min_ratio:.4})"
        ),
    )
}

fn nash() -> Verdict {
    let mut rng = Rng::new(0x6e61);
    let (mut kkt, mut budget, mut closed, mut gain) = (0.0f64, 0.0f64, 0.0f64, f64::MIN);
    let mut interior = 0;
    for _ in 0..50 {
        let c = 2 + rng.below(3) as usize;
        let (h, w) = (1 + rng.below(3) as usize, 1 + rng.below(3) as usize);
        let game = GameSpec::random_interior(c, h, w, &mut rng);
        let sol = solve_nash(&game).unwrap();
        kkt = kkt.max(kkt_residual(&game, &sol));
        budget = budget.max(budget_residual(&game, &sol.p));
        match nash_closed_form(&game, &sol.v0).unwrap() {
            Some(p) => {
                interior += 1;
                for (a, b) in p.iter().zip(&sol.p) {
                    closed = closed.max((a - b).abs());
                }
            }
            None => closed = f64::INFINITY,
        }
        let k = game.neurons();
        for dir in 0..100 {
            let ch = dir % c;
            let mut d: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let mean = d.iter().sum::<f64>() / k as f64;
            d.iter_mut().for_each(|v| *v -= mean);
            // largest step keeping every power non-negative
            let tmax = (0..k)
                .filter(|&j| d[j] < 0.0)
                .map(|j| sol.p[ch * k + j] / -d[j])
                .fold(f64::INFINITY, f64::min);
            let tmax = if tmax.is_finite() { tmax } else { 1.0 };
            let t = tmax * [1e-4, 1e-2, 0.5, 1.0][dir % 4];
            let mut p = sol.p.clone();
            for j in 0..k {
                p[ch * k + j] = (p[ch * k + j] + t * d[j]).max(0.0);
            }
            gain = gain.max(payoff(&game, &p, ch) - payoff(&game, &sol.p, ch));
        }
    }
    verdict(
        kkt < 1e-7 && budget < 1e-8 && closed < 1e-6 && gain <= 1e-9,
        format!(
            "50 games; KKT {kkt:.1e} (<1e-7), budget {budget:.1e} (<1e-8), \
             closed form {closed:.1e} (<1e-6, {interior} interior), \
             best deviation gain {gain:.1e} (<=1e-9)"
        ),
    )
}

fn gradients() -> Verdict {
    let mut rng = Rng::new(0x6664);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for i in 0..20 {
        let c = 3 + i % 4;
        let (x, st, g) = common::random_instance(c, 3, 2, &mut rng);
        for (name, err) in common::fd_report(&x, &st, &g, 1e-3) {
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        max <= 1e-4,
        format!(
            "20 instances, max rel err {max:.1e} (<=1e-4): {}",
            parts.join(", ")
        ),
    )
}

fn fusion() -> Verdict {
    let mut rng = Rng::new(0x6675);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let c = 2 + i % 7;
        let cin = 2 + rng.below(5) as usize;
        let (x, mut st, _) = common::random_instance(c, 6, 2, &mut rng);
        for _ in 0..3 {
            let out = ce_forward(&x, &st, NormKind::Batch).unwrap();
            st.absorb_batch(out.cache.as_ref().unwrap());
        }
        st.mode = Mode::Eval;
        let lin = FusedLinear {
            weight: Matrix::from_fn(c, cin, |_, _| rng.normal()),
            bias: (0..c).map(|_| rng.normal()).collect(),
        };
        let z = FeatureMap::random_normal((4, cin, 2, 2), &mut rng);
        worst = worst.max(fusion_gap(&st, &lin, &z).unwrap());
    }
    verdict(
        worst < 1e-8,
        format!("50 instances, max |fused - unfused| {worst:.1e} (<1e-8)"),
    )
}

fn mechanism() -> Verdict {
    let decays = [1e-4, 1e-3, 5e-3];
    let mut wd_cfg = ExperimentConfig::defaults(Experiment::WeightDecay);
    wd_cfg.grid = decays.to_vec();
    wd_cfg.replicates = 5;
    let wd = match run_experiment(Experiment::WeightDecay, &wd_cfg, Exec::Parallel) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("weight-decay sweep failed: {e}")),
    };
    let mut ab_cfg = ExperimentConfig::defaults(Experiment::Ablation);
    ab_cfg.replicates = 5;
    let ab = match run_experiment(Experiment::Ablation, &ab_cfg, Exec::Parallel) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("ablation runs failed: {e}")),
    };
    let inh = |v: &str, d: f64| wd.mean(v, d, "inhibited_ratio").unwrap();
    let bn: Vec<f64> = decays.iter().map(|&d| inh("bn", d)).collect();
    let bd: Vec<f64> = decays.iter().map(|&d| inh("bn+bd", d)).collect();
    let ce: Vec<f64> = decays.iter().map(|&d| inh("bn+ce", d)).collect();
    let monotone = bn.windows(2).all(|w| w[1] >= w[0]);
    let margin = bn[2] - ce[2];
    let a = monotone && margin >= 0.1;
    let acc_bn = ab.mean("bn", 0.5, "accuracy").unwrap();
    let acc_ce = ab.mean("bn+ce", 0.5, "accuracy").unwrap();
    let b = acc_ce > acc_bn;
    let c = bd[2] < bn[2];
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let mark = |ok: bool| if ok { "ok" } else { "violated" };
    verdict(
        a && b && c,
        format!(
            "inhibited at wd 1e-4/1e-3/5e-3 (5 seeds): bn {} bn+bd {} bn+ce {}; \
             (a) bn non-decreasing {monotone}, bn-ce margin {margin:.3} (>=0.1) {}; \
             (b) acc at ablation 0.5: bn+ce {acc_ce:.3} vs bn {acc_bn:.3} {}; \
             (c) bn+bd below bn at 5e-3 {}",
            fmt(&bn),
            fmt(&bd),
            fmt(&ce),
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let small_model = [
        "--epochs",
        "2",
        "--depth",
        "3",
        "--model-width",
        "8",
        "--train-size",
        "128",
        "--test-size",
        "64",
        "--seed",
        "7",
    ];
    let runs: Vec<(&str, Vec<&str>)> = vec![
        (
            "newton-bench",
            vec!["newton-bench", "--trials", "4", "--seed", "7"],
        ),
        (
            "moments",
            vec![
                "moments",
                "--grid",
                "true",
                "--mc-samples",
                "50000",
                "--seed",
                "7",
            ],
        ),
        ("nash", vec!["nash", "--channels", "3", "--seed", "7"]),
        (
            "prop-check",
            vec!["prop-check", "--instances", "20", "--seed", "7"],
        ),
        (
            "fuse-check",
            vec!["fuse-check", "--instances", "10", "--seed", "7"],
        ),
        (
            "train",
            [&["train", "--variant", "bn+ce"][..], &small_model].concat(),
        ),
        (
            "ablate",
            [&["ablate", "--trials", "2"][..], &small_model].concat(),
        ),
        (
            "sweep weight-decay",
            [
                &["sweep", "weight-decay", "--grid", "1e-4,5e-3"][..],
                &small_model,
            ]
            .concat(),
        ),
        (
            "sweep ablation",
            [
                &["sweep", "ablation", "--ablation-trials", "2"][..],
                &small_model,
            ]
            .concat(),
        ),
        (
            "sweep corrupted-labels",
            [
                &["sweep", "corrupted-labels", "--grid", "0,0.3"][..],
                &small_model,
            ]
            .concat(),
        ),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut bad = Vec::new();
    let mut compared = 0;
    for (i, (name, args)) in runs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{i}_{rep}"));
            let mut argv = vec!["celab".to_string()];
            argv.extend(args.iter().map(|s| s.to_string()));
            argv.extend(["--out".to_string(), dir.to_string_lossy().into_owned()]);
            let code = ce_cli::run(argv);
            if code != 0 {
                bad.push(format!("{name} exited {code}"));
            }
            outputs.push(files(&dir));
        }
        if outputs[0].is_empty() || outputs[0] != outputs[1] {
            bad.push(format!("{name} outputs differ"));
        }
        compared += outputs[0].len();
    }
    verdict(
        bad.is_empty(),
        format!(
            "{} invocations covering all 8 subcommands, {compared} files byte-identical across reruns{}",
            runs.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!("; {}", bad.join(", "))
            }
        ),
    )
}

fn main() -> ExitCode {
    let results = [
        check(1, "Newton-Schulz inverse square root", 10.0, newton_schulz),
        check(2, "rectified Gaussian moments", 60.0, moments),
        check(3, "gamma and norm amplification", 5.0, amplification),
        check(4, "Nash oracle", 30.0, nash),
        check(5, "CE block gradients", 30.0, gradients),
        check(6, "fused BD equivalence", 5.0, fusion),
        check(7, "inhibited-channel mechanism", 600.0, mechanism),
        check(8, "CLI determinism", 600.0, determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
