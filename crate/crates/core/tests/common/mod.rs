//! Oracles shared by the integration tests.
#![allow(dead_code)]

use ce_core::ce::{ce_backward, ce_forward, CeState};
use ce_core::norm::NormKind;
use ce_core::{FeatureMap, Matrix, Rng};

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `L = <G, p>` for a train-mode forward.
fn loss(x: &FeatureMap, st: &CeState, g: &FeatureMap) -> f64 {
    let p = ce_forward(x, st, NormKind::Batch).unwrap().p;
    p.as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Fourth-order five-point stencil; error O(h⁴) plus roundoff O(ε/h).
fn central(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Worst relative error per parameter class between `ce_backward` and
/// central differences of `<G, ce_forward(x)>`.
pub fn fd_report(x: &FeatureMap, st: &CeState, g: &FeatureMap, h: f64) -> Vec<(&'static str, f64)> {
    let out = ce_forward(x, st, NormKind::Batch).unwrap();
    let an = ce_backward(g, out.cache.as_ref(), st).unwrap();
    let mut report = Vec::new();

    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let num = central(
            |d| {
                let mut xp = x.clone();
                xp.as_mut_slice()[k] += d;
                loss(&xp, st, g)
            },
            h,
        );
        worst = worst.max(rel_err(an.x.as_slice()[k], num));
    }
    report.push(("x", worst));

    let vec_check =
        |name: &'static str, get: &dyn Fn(&mut CeState) -> &mut Vec<f64>, grad: &[f64]| {
            let mut worst = 0.0f64;
            for k in 0..grad.len() {
                let num = central(
                    |d| {
                        let mut s = st.clone();
                        get(&mut s)[k] += d;
                        loss(x, &s, g)
                    },
                    h,
                );
                worst = worst.max(rel_err(grad[k], num));
            }
            (name, worst)
        };
    report.push(vec_check("gamma", &|s| &mut s.gamma, &an.gamma));
    report.push(vec_check("beta", &|s| &mut s.beta, &an.beta));
    report.push(vec_check("ln_gain", &|s| &mut s.ir.ln_gain, &an.ir.ln_gain));
    report.push(vec_check("ln_bias", &|s| &mut s.ir.ln_bias, &an.ir.ln_bias));

    let mat_check =
        |name: &'static str, get: &dyn Fn(&mut CeState) -> &mut Matrix, grad: &Matrix| {
            let mut worst = 0.0f64;
            for k in 0..grad.as_slice().len() {
                let num = central(
                    |d| {
                        let mut s = st.clone();
                        get(&mut s).as_mut_slice()[k] += d;
                        loss(x, &s, g)
                    },
                    h,
                );
                worst = worst.max(rel_err(grad.as_slice()[k], num));
            }
            (name, worst)
        };
    report.push(mat_check("W1", &|s| &mut s.ir.w1, &an.ir.w1));
    report.push(mat_check("W2", &|s| &mut s.ir.w2, &an.ir.w2));

    let num = central(
        |d| {
            let mut s = st.clone();
            s.lambda_raw += d;
            loss(x, &s, g)
        },
        h,
    );
    report.push(("lambda_raw", rel_err(an.lambda_raw, num)));
    report
}

/// Random train-mode CE instance with non-trivial parameters.
pub fn random_instance(
    c: usize,
    n: usize,
    hw: usize,
    rng: &mut Rng,
) -> (FeatureMap, CeState, FeatureMap) {
    let mut st = CeState::new(c, rng);
    st.gamma = (0..c).map(|_| 0.5 + rng.uniform()).collect();
    st.beta = (0..c).map(|_| 0.3 * rng.normal()).collect();
    st.lambda_raw = 0.5 * rng.normal();
    let k = st.ir.hidden();
    st.ir.ln_gain = (0..k).map(|_| 1.0 + 0.2 * rng.normal()).collect();
    // keep LN outputs away from the ReLU kink
    st.ir.ln_bias = (0..k).map(|_| 0.5 + 0.2 * rng.uniform()).collect();
    let mix = Matrix::from_fn(c, c, |i, j| if i == j { 1.0 } else { 0.3 * rng.normal() });
    let base = FeatureMap::random_normal((n, c, hw, hw), rng);
    let mut x = FeatureMap::zeros(base.dims());
    for s in 0..n {
        for i in 0..hw * hw {
            for co in 0..c {
                let v: f64 = (0..c).map(|ci| mix[(co, ci)] * base.plane(s, ci)[i]).sum();
                x.plane_mut(s, co)[i] = v + 0.5 * co as f64;
            }
        }
    }
    let g = FeatureMap::random_normal(x.dims(), rng);
    (x, st, g)
}
