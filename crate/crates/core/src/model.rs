//! A small classifier built from `linear → Norm → [CE] → activation` blocks
//! with a global-average-pool + linear head, and its reverse pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ce::{ce_backward, ce_forward, Branches, CeCache, CeState, Mode, CHECKPOINT_ARRAYS};
use crate::checkpoint::NamedArrays;
use crate::decorrelate::NewtonConfig;
use crate::error::{ensure, CeError, Result};
use crate::norm::{
    compute_stats, ema_update, normalize_affine, standardize_backward, Activation, AffineParams,
    NormKind, NormStats,
};
use crate::report::write_atomic;
use crate::rng::Rng;
use crate::tensor::{FeatureMap, Matrix};

/// One block: the normalizer, an optional CE layer on top of it, and the
/// rectified unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub norm: NormKind,
    pub ce: Option<Branches>,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn plain(norm: NormKind) -> Self {
        BlockSpec {
            norm,
            ce: None,
            activation: Activation::Relu,
        }
    }

    pub fn with_ce(branches: Branches) -> Self {
        BlockSpec {
            norm: NormKind::Batch,
            ce: Some(branches),
            activation: Activation::Relu,
        }
    }

    /// Variant label: `bn`, `in`, `ln`, `bn+ce`, `bn+bd`, `bn+ir`.
    pub fn variant(&self) -> String {
        match self.ce {
            None => self.norm.name().to_string(),
            Some(Branches::Full) => format!("{}+ce", self.norm.name()),
            Some(Branches::BdOnly) => format!("{}+bd", self.norm.name()),
            Some(Branches::IrOnly) => format!("{}+ir", self.norm.name()),
        }
    }

    /// Parses a variant label.
    pub fn parse_variant(s: &str, activation: Activation) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (norm, ce) = match lower.split_once('+') {
            None => (NormKind::parse(&lower)?, None),
            Some((n, c)) => {
                let branches = match c {
                    "ce" => Branches::Full,
                    "bd" => Branches::BdOnly,
                    "ir" => Branches::IrOnly,
                    other => return Err(CeError::Config(format!("unknown CE variant `{other}`"))),
                };
                (NormKind::parse(n)?, Some(branches))
            }
        };
        ensure!(
            ce.is_none() || norm == NormKind::Batch,
            Config,
            "CE is defined on top of batch normalization, got `{s}`"
        );
        Ok(BlockSpec {
            norm,
            ce,
            activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub width: usize,
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub reduction: usize,
    pub newton: NewtonConfig,
    pub seed: u64,
}

impl ModelSpec {
    /// `depth` identical blocks of the given variant.
    pub fn uniform(
        input_channels: usize,
        width: usize,
        classes: usize,
        depth: usize,
        block: BlockSpec,
        seed: u64,
    ) -> Self {
        ModelSpec {
            input_channels,
            width,
            classes,
            blocks: vec![block; depth],
            reduction: 4,
            newton: NewtonConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.input_channels >= 1 && self.width >= 1,
            Config,
            "channel counts must be positive"
        );
        ensure!(self.classes >= 2, Config, "need at least two classes");
        ensure!(
            !self.blocks.is_empty(),
            Config,
            "model needs at least one block"
        );
        ensure!(self.reduction >= 1, Config, "reduction must be >= 1");
        for b in &self.blocks {
            b.activation.validate()?;
            ensure!(
                b.ce.is_none() || b.norm == NormKind::Batch,
                Config,
                "CE blocks need batch normalization"
            );
        }
        self.newton.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainNorm {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub populated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormLayer {
    Plain(PlainNorm),
    Ce(Box<CeState>),
}

impl NormLayer {
    pub fn gamma(&self) -> &[f64] {
        match self {
            NormLayer::Plain(p) => &p.gamma,
            NormLayer::Ce(s) => &s.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    /// out x in
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub norm: NormLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub blocks: Vec<Block>,
    /// classes x width
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub mode: Mode,
}

/// Zero a set of channels at one block's output.
#[derive(Debug, Clone, Copy)]
pub struct Ablation<'a> {
    pub layer: usize,
    pub channels: &'a [usize],
}

enum NormCache {
    Plain { stats: NormStats, xbar: FeatureMap },
    Ce(Box<CeCache>),
}

/// Intermediates of one forward pass.
pub struct Trace {
    inputs: Vec<FeatureMap>,
    norm: Vec<NormCache>,
    pre_act: Vec<FeatureMap>,
    /// Post-block activations (after any ablation).
    pub outputs: Vec<FeatureMap>,
    pooled: Vec<f64>,
    /// N x classes
    pub logits: Vec<f64>,
}

/// A named view of one parameter array.
pub struct ParamRef<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub trainable: bool,
}

/// Linear channel-mixing map applied at every location.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &FeatureMap) -> FeatureMap {
    let (n, cin, h, wd) = x.dims();
    debug_assert_eq!(cin, w.cols());
    let cout = w.rows();
    let p = h * wd;
    let mut out = FeatureMap::zeros((n, cout, h, wd));
    for s in 0..n {
        for co in 0..cout {
            let mut acc = vec![b[co]; p];
            for ci in 0..cin {
                let a = w[(co, ci)];
                for (o, v) in acc.iter_mut().zip(x.plane(s, ci)) {
                    *o += a * v;
                }
            }
            out.plane_mut(s, co).copy_from_slice(&acc);
        }
    }
    out
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let root = Rng::new(spec.seed);
        let c = spec.width;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, bs) in spec.blocks.iter().enumerate() {
            let mut rng = root.derive(i as u64);
            let cin = if i == 0 { spec.input_channels } else { c };
            let weight = uniform_matrix(c, cin, (6.0 / cin as f64).sqrt(), &mut rng);
            let norm = match bs.ce {
                None => NormLayer::Plain(PlainNorm {
                    kind: bs.norm,
                    gamma: vec![1.0; c],
                    beta: vec![0.0; c],
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                    populated: false,
                }),
                Some(branches) => {
                    let mut st = CeState::with_config(c, spec.reduction, spec.newton, &mut rng);
                    st.branches = branches;
                    NormLayer::Ce(Box::new(st))
                }
            };
            blocks.push(Block {
                spec: *bs,
                weight,
                bias: vec![0.0; c],
                norm,
            });
        }
        let mut rng = root.derive(spec.blocks.len() as u64);
        let head_w = uniform_matrix(spec.classes, c, 1.0 / (c as f64).sqrt(), &mut rng);
        Ok(Model {
            head_b: vec![0.0; spec.classes],
            head_w,
            blocks,
            spec,
            mode: Mode::Train,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for b in &mut self.blocks {
            if let NormLayer::Ce(st) = &mut b.norm {
                st.mode = mode;
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        let mut m = self.clone();
        m.params_mut().iter().map(|p| p.values.len()).sum()
    }

    /// Every learnable array in a fixed order shared with [`Model::backward`].
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(ParamRef {
                name: format!("block{i}.weight"),
                values: b.weight.as_mut_slice(),
                trainable: true,
            });
            out.push(ParamRef {
                name: format!("block{i}.bias"),
                values: &mut b.bias,
                trainable: true,
            });
            match &mut b.norm {
                NormLayer::Plain(p) => {
                    out.push(ParamRef {
                        name: format!("block{i}.gamma"),
                        values: &mut p.gamma,
                        trainable: true,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.beta"),
                        values: &mut p.beta,
                        trainable: true,
                    });
                }
                NormLayer::Ce(st) => {
                    let lambda_on = st.branches == Branches::Full && !st.freeze.lambda;
                    let ir_on = st.branches != Branches::BdOnly && !st.freeze.ir_weights;
                    let st = &mut **st;
                    out.push(ParamRef {
                        name: format!("block{i}.gamma"),
                        values: &mut st.gamma,
                        trainable: true,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.beta"),
                        values: &mut st.beta,
                        trainable: true,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.lambda_raw"),
                        values: std::slice::from_mut(&mut st.lambda_raw),
                        trainable: lambda_on,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.W1"),
                        values: st.ir.w1.as_mut_slice(),
                        trainable: ir_on,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.ln_gain"),
                        values: &mut st.ir.ln_gain,
                        trainable: ir_on,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.ln_bias"),
                        values: &mut st.ir.ln_bias,
                        trainable: ir_on,
                    });
                    out.push(ParamRef {
                        name: format!("block{i}.W2"),
                        values: st.ir.w2.as_mut_slice(),
                        trainable: ir_on,
                    });
                }
            }
        }
        out.push(ParamRef {
            name: "head.weight".into(),
            values: self.head_w.as_mut_slice(),
            trainable: true,
        });
        out.push(ParamRef {
            name: "head.bias".into(),
            values: &mut self.head_b,
            trainable: true,
        });
        out
    }

    /// Forward pass in the model's current mode. Never mutates the model;
    /// call [`Model::absorb`] afterwards to update running statistics.
    pub fn forward(&self, x: &FeatureMap, ablation: Option<Ablation<'_>>) -> Result<Trace> {
        ensure!(
            x.channels() == self.spec.input_channels,
            Shape,
            "input has {} channels, model expects {}",
            x.channels(),
            self.spec.input_channels
        );
        if let Some(a) = ablation {
            ensure!(
                a.layer < self.depth(),
                Config,
                "ablation layer {} out of range (depth {})",
                a.layer,
                self.depth()
            );
            ensure!(
                a.channels.iter().all(|&c| c < self.spec.width),
                Config,
                "ablation channel out of range"
            );
        }
        let train = self.mode == Mode::Train;
        let mut cur = x.clone();
        let mut trace = Trace {
            inputs: Vec::new(),
            norm: Vec::new(),
            pre_act: Vec::new(),
            outputs: Vec::new(),
            pooled: Vec::new(),
            logits: Vec::new(),
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let y = linear_forward(&b.weight, &b.bias, &cur);
            let (p, cache) = match &b.norm {
                NormLayer::Plain(pn) => {
                    let stats = if train || pn.kind != NormKind::Batch {
                        compute_stats(&y, pn.kind)
                    } else {
                        ensure!(
                            pn.populated,
                            State,
                            "eval-mode forward before running statistics were populated"
                        );
                        NormStats {
                            kind: NormKind::Batch,
                            mean: pn.running_mean.clone(),
                            var: pn.running_var.clone(),
                            eps: crate::norm::DEFAULT_EPS,
                        }
                    };
                    let (xbar, xt) = normalize_affine(
                        &y,
                        &stats,
                        &AffineParams {
                            gamma: pn.gamma.clone(),
                            beta: pn.beta.clone(),
                        },
                    )?;
                    (xt, NormCache::Plain { stats, xbar })
                }
                NormLayer::Ce(st) => {
                    let out = ce_forward(&y, st, NormKind::Batch)?;
                    let cache = match out.cache {
                        Some(c) => NormCache::Ce(Box::new(c)),
                        None => NormCache::Plain {
                            stats: NormStats {
                                kind: NormKind::Batch,
                                mean: vec![],
                                var: vec![],
                                eps: 0.0,
                            },
                            xbar: FeatureMap::zeros((1, 1, 1, 1)),
                        },
                    };
                    (out.p, cache)
                }
            };
            let act = b.spec.activation;
            let mut out = p.map(|v| act.apply(v));
            if let Some(a) = ablation.filter(|a| a.layer == i) {
                for s in 0..out.batch() {
                    for &ch in a.channels {
                        out.plane_mut(s, ch).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            trace.inputs.push(cur);
            trace.norm.push(cache);
            trace.pre_act.push(p);
            trace.outputs.push(out.clone());
            cur = out;
        }
        let (n, c, _, _) = cur.dims();
        let p = cur.spatial() as f64;
        let mut pooled = vec![0.0; n * c];
        for s in 0..n {
            for ch in 0..c {
                pooled[s * c + ch] = cur.plane(s, ch).iter().sum::<f64>() / p;
            }
        }
        let k = self.spec.classes;
        let mut logits = vec![0.0; n * k];
        for s in 0..n {
            let row = self.head_w.matvec(&pooled[s * c..(s + 1) * c]);
            for j in 0..k {
                logits[s * k + j] = row[j] + self.head_b[j];
            }
        }
        trace.pooled = pooled;
        trace.logits = logits;
        Ok(trace)
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// estimates.
    pub fn absorb(&mut self, trace: &Trace) {
        for (b, cache) in self.blocks.iter_mut().zip(&trace.norm) {
            match (&mut b.norm, cache) {
                (NormLayer::Plain(pn), NormCache::Plain { stats, .. })
                    if pn.kind == NormKind::Batch =>
                {
                    ema_update(&mut pn.running_mean, &stats.mean, 0.1);
                    ema_update(&mut pn.running_var, &stats.var, 0.1);
                    pn.populated = true;
                }
                (NormLayer::Ce(st), NormCache::Ce(c)) => st.absorb_batch(c),
                _ => {}
            }
        }
    }

    /// Gradients of a loss with `∂L/∂logits = dlogits`, in the order of
    /// [`Model::params_mut`]. Requires a train-mode trace without ablation.
    pub fn backward(&self, trace: &Trace, dlogits: &[f64]) -> Result<Vec<Vec<f64>>> {
        ensure!(
            self.mode == Mode::Train,
            State,
            "backward needs a train-mode trace"
        );
        let last = trace.outputs.last().expect("at least one block");
        let (n, c, h, w) = last.dims();
        let k = self.spec.classes;
        ensure!(
            dlogits.len() == n * k,
            Shape,
            "dlogits has {} entries, expected {}",
            dlogits.len(),
            n * k
        );

        let mut d_head_w = Matrix::zeros(k, c);
        let mut d_head_b = vec![0.0; k];
        let mut d_out = FeatureMap::zeros((n, c, h, w));
        let p = (h * w) as f64;
        for s in 0..n {
            let dl = &dlogits[s * k..(s + 1) * k];
            for j in 0..k {
                d_head_b[j] += dl[j];
                for ch in 0..c {
                    d_head_w[(j, ch)] += dl[j] * trace.pooled[s * c + ch];
                }
            }
            let dp = self.head_w.matvec_t(dl);
            for ch in 0..c {
                d_out
                    .plane_mut(s, ch)
                    .iter_mut()
                    .for_each(|v| *v = dp[ch] / p);
            }
        }

        let mut per_block: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.depth());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let act = b.spec.activation;
            let d_p = d_out.zip_with(&trace.pre_act[i], |g, v| g * act.derivative(v))?;
            let mut grads = Vec::new();
            let d_y = match (&b.norm, &trace.norm[i]) {
                (NormLayer::Plain(pn), NormCache::Plain { stats, xbar }) => {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    let mut d_xbar = d_p.clone();
                    for s in 0..n {
                        for ch in 0..c {
                            let g = d_p.plane(s, ch);
                            dg[ch] += g
                                .iter()
                                .zip(xbar.plane(s, ch))
                                .map(|(a, v)| a * v)
                                .sum::<f64>();
                            db[ch] += g.iter().sum::<f64>();
                            let gm = pn.gamma[ch];
                            d_xbar.plane_mut(s, ch).iter_mut().for_each(|v| *v *= gm);
                        }
                    }
                    grads.push(dg);
                    grads.push(db);
                    standardize_backward(xbar, stats, &d_xbar)
                }
                (NormLayer::Ce(st), NormCache::Ce(cache)) => {
                    let g = ce_backward(&d_p, Some(cache), st)?;
                    grads.push(g.gamma);
                    grads.push(g.beta);
                    grads.push(vec![g.lambda_raw]);
                    grads.push(g.ir.w1.as_slice().to_vec());
                    grads.push(g.ir.ln_gain);
                    grads.push(g.ir.ln_bias);
                    grads.push(g.ir.w2.as_slice().to_vec());
                    g.x
                }
                _ => return Err(CeError::State("trace does not match the model".into())),
            };
            let input = &trace.inputs[i];
            let cin = input.channels();
            let mut d_w = Matrix::zeros(c, cin);
            let mut d_b = vec![0.0; c];
            let mut d_in = FeatureMap::zeros(input.dims());
            for s in 0..n {
                for co in 0..c {
                    let g = d_y.plane(s, co);
                    d_b[co] += g.iter().sum::<f64>();
                    for ci in 0..cin {
                        d_w[(co, ci)] += g
                            .iter()
                            .zip(input.plane(s, ci))
                            .map(|(a, v)| a * v)
                            .sum::<f64>();
                    }
                }
                for ci in 0..cin {
                    let mut acc = vec![0.0; input.spatial()];
                    for co in 0..c {
                        let a = b.weight[(co, ci)];
                        for (o, v) in acc.iter_mut().zip(d_y.plane(s, co)) {
                            *o += a * v;
                        }
                    }
                    d_in.plane_mut(s, ci).copy_from_slice(&acc);
                }
            }
            let mut block_grads = vec![d_w.as_slice().to_vec(), d_b];
            block_grads.extend(grads);
            per_block.push(block_grads);
            d_out = d_in;
        }
        per_block.reverse();
        let mut out: Vec<Vec<f64>> = per_block.into_iter().flatten().collect();
        out.push(d_head_w.as_slice().to_vec());
        out.push(d_head_b);
        Ok(out)
    }

    /// Checkpoint: a JSON layer manifest plus a named-array weight file.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest::from_spec(&self.spec);
        let text =
            serde_json::to_string_pretty(&manifest).map_err(|e| CeError::Io(e.to_string()))?;
        write_atomic(&dir.join("model.json"), format!("{text}\n").as_bytes())?;
        self.to_arrays().write(&dir.join("weights.cear"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("model.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CeError::Config(format!("bad manifest: {e}")))?;
        let spec = manifest.to_spec()?;
        let arrays = NamedArrays::read(&dir.join("weights.cear"))?;
        Model::from_arrays(spec, &arrays)
    }

    pub fn to_arrays(&self) -> NamedArrays {
        let mut a = NamedArrays::new(vec![
            self.depth() as u64,
            self.spec.input_channels as u64,
            self.spec.width as u64,
            self.spec.classes as u64,
        ]);
        for (i, b) in self.blocks.iter().enumerate() {
            a.push(&format!("block{i}.weight"), b.weight.as_slice());
            a.push(&format!("block{i}.bias"), &b.bias);
            match &b.norm {
                NormLayer::Plain(p) => {
                    a.push(&format!("block{i}.gamma"), &p.gamma);
                    a.push(&format!("block{i}.beta"), &p.beta);
                    a.push(&format!("block{i}.running_mean"), &p.running_mean);
                    a.push(&format!("block{i}.running_var"), &p.running_var);
                    a.push(
                        &format!("block{i}.populated"),
                        &[f64::from(u8::from(p.populated))],
                    );
                }
                NormLayer::Ce(st) => {
                    let ce = st.to_checkpoint();
                    a.push(
                        &format!("block{i}.ce.header"),
                        &ce.header.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    );
                    for (name, values) in &ce.arrays {
                        a.push(&format!("block{i}.ce.{name}"), values);
                    }
                }
            }
        }
        a.push("head.weight", self.head_w.as_slice());
        a.push("head.bias", &self.head_b);
        a.push("mode", &[f64::from(u8::from(self.mode == Mode::Eval))]);
        a
    }

    pub fn from_arrays(spec: ModelSpec, a: &NamedArrays) -> Result<Self> {
        let mut m = Model::new(spec)?;
        ensure!(
            a.header
                == vec![
                    m.depth() as u64,
                    m.spec.input_channels as u64,
                    m.spec.width as u64,
                    m.spec.classes as u64
                ],
            Config,
            "weight file dims {:?} do not match the manifest",
            a.header
        );
        let take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = a.get(name)?;
            ensure!(
                v.len() == len,
                Config,
                "`{name}` has length {}, expected {len}",
                v.len()
            );
            Ok(v.to_vec())
        };
        for (i, b) in m.blocks.iter_mut().enumerate() {
            let (rows, cols) = b.weight.shape();
            b.weight =
                Matrix::from_vec(rows, cols, take(&format!("block{i}.weight"), rows * cols)?)?;
            b.bias = take(&format!("block{i}.bias"), rows)?;
            match &mut b.norm {
                NormLayer::Plain(p) => {
                    p.gamma = take(&format!("block{i}.gamma"), rows)?;
                    p.beta = take(&format!("block{i}.beta"), rows)?;
                    p.running_mean = take(&format!("block{i}.running_mean"), rows)?;
                    p.running_var = take(&format!("block{i}.running_var"), rows)?;
                    p.populated = take(&format!("block{i}.populated"), 1)?[0] != 0.0;
                }
                NormLayer::Ce(st) => {
                    let header = take(&format!("block{i}.ce.header"), 4)?;
                    let mut ce = NamedArrays::new(header.iter().map(|&v| v as u64).collect());
                    for name in CHECKPOINT_ARRAYS {
                        ce.push(name, a.get(&format!("block{i}.ce.{name}"))?);
                    }
                    **st = CeState::from_checkpoint(&ce)?;
                }
            }
        }
        let (k, c) = m.head_w.shape();
        m.head_w = Matrix::from_vec(k, c, take("head.weight", k * c)?)?;
        m.head_b = take("head.bias", k)?;
        let eval = take("mode", 1)?[0] != 0.0;
        m.set_mode(if eval { Mode::Eval } else { Mode::Train });
        Ok(m)
    }
}

/// Serialized layer manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_channels: usize,
    pub width: usize,
    pub classes: usize,
    pub reduction: usize,
    pub newton_iterations: usize,
    pub seed: u64,
    /// `variant activation` per block, e.g. `bn+ce relu`.
    pub blocks: Vec<String>,
}

impl Manifest {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        Manifest {
            input_channels: spec.input_channels,
            width: spec.width,
            classes: spec.classes,
            reduction: spec.reduction,
            newton_iterations: spec.newton.iterations,
            seed: spec.seed,
            blocks: spec
                .blocks
                .iter()
                .map(|b| format!("{} {}", b.variant(), b.activation.label()))
                .collect(),
        }
    }

    pub fn to_spec(&self) -> Result<ModelSpec> {
        let blocks = self
            .blocks
            .iter()
            .map(|s| {
                let (v, a) = s
                    .split_once(' ')
                    .ok_or_else(|| CeError::Config(format!("bad block entry `{s}`")))?;
                BlockSpec::parse_variant(v, Activation::parse(a)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            input_channels: self.input_channels,
            width: self.width,
            classes: self.classes,
            blocks,
            reduction: self.reduction,
            newton: NewtonConfig::with_iterations(self.newton_iterations),
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Mean softmax cross-entropy, its gradient w.r.t. the logits and the number
/// of correct argmax predictions.
pub fn softmax_xent(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[y];
        let pred = argmax(row);
        if pred == y {
            correct += 1;
        }
        for j in 0..classes {
            let prob = exps[j] / z;
            grad[s * classes + j] = (prob - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad, correct)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_labels_round_trip() {
        for v in ["bn", "in", "ln", "bn+ce", "bn+bd", "bn+ir"] {
            assert_eq!(
                BlockSpec::parse_variant(v, Activation::Relu)
                    .unwrap()
                    .variant(),
                v
            );
        }
        assert!(BlockSpec::parse_variant("ln+ce", Activation::Relu).is_err());
        assert!(BlockSpec::parse_variant("bn+zz", Activation::Relu).is_err());
    }

    #[test]
    fn param_order_matches_backward() {
        let spec = ModelSpec::uniform(3, 4, 2, 2, BlockSpec::with_ce(Branches::Full), 1);
        let mut m = Model::new(spec).unwrap();
        let mut rng = Rng::new(2);
        let x = FeatureMap::random_normal((4, 3, 2, 2), &mut rng);
        let t = m.forward(&x, None).unwrap();
        let (_, dl, _) = softmax_xent(&t.logits, &[0, 1, 0, 1], 2);
        let g = m.backward(&t, &dl).unwrap();
        let lens: Vec<usize> = m.params_mut().iter().map(|p| p.values.len()).collect();
        assert_eq!(g.iter().map(Vec::len).collect::<Vec<_>>(), lens);
    }

    #[test]
    fn xent_of_uniform_logits() {
        let (loss, grad, _) = softmax_xent(&[0.0; 4], &[1, 0], 2);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(grad, vec![0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ModelSpec::uniform(3, 4, 3, 2, BlockSpec::with_ce(Branches::Full), 5);
        spec.blocks[1] = BlockSpec::plain(NormKind::Batch);
        let mut m = Model::new(spec).unwrap();
        let x = FeatureMap::random_normal((4, 3, 2, 2), &mut Rng::new(3));
        let t = m.forward(&x, None).unwrap();
        m.absorb(&t);
        m.set_mode(Mode::Eval);
        m.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_arrays().to_bytes(), m.to_arrays().to_bytes());
    }

    #[test]
    fn unpopulated_eval_is_state_error() {
        let mut m = Model::new(ModelSpec::uniform(
            2,
            2,
            2,
            1,
            BlockSpec::plain(NormKind::Batch),
            0,
        ))
        .unwrap();
        m.set_mode(Mode::Eval);
        let x = FeatureMap::zeros((2, 2, 1, 2));
        assert!(matches!(m.forward(&x, None), Err(CeError::State(_))));
    }
}
