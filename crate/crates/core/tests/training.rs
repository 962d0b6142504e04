use ce_core::ce::Mode;
use ce_core::data::{SyntheticTask, TaskSpec};
use ce_core::diagnostics::{cumulative_ablation, evaluate};
use ce_core::model::{softmax_xent, BlockSpec, Model, ModelSpec};
use ce_core::norm::Activation;
use ce_core::par::Exec;
use ce_core::train::{
    run_experiment, train, Experiment, ExperimentConfig, RunConfig, Sgd, TrainConfig,
};
use ce_core::{CeError, Rng};

fn small_task(seed: u64) -> SyntheticTask {
    SyntheticTask::generate(&TaskSpec {
        train_size: 256,
        test_size: 128,
        seed,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn small_model(variant: &str, act: Activation, depth: usize, seed: u64) -> Model {
    let block = BlockSpec::parse_variant(variant, act).unwrap();
    Model::new(ModelSpec::uniform(8, 8, 4, depth, block, seed)).unwrap()
}

fn loss_of(model: &Model, x: &ce_core::FeatureMap, labels: &[usize]) -> f64 {
    let t = model.forward(x, None).unwrap();
    softmax_xent(&t.logits, labels, model.spec.classes).0
}

fn snapshot(model: &mut Model) -> Vec<Vec<f64>> {
    model
        .params_mut()
        .iter()
        .map(|p| p.values.to_vec())
        .collect()
}

#[test]
fn model_gradients_match_finite_differences() {
    let task = small_task(3);
    let idx: Vec<usize> = (0..16).collect();
    let (x, labels) = task.train.batch(&idx);
    for variant in ["bn", "bn+ce", "bn+bd", "bn+ir", "ln", "in"] {
        let mut model = small_model(variant, Activation::Elu(1.0), 2, 11);
        model.set_mode(Mode::Train);
        let trace = model.forward(&x, None).unwrap();
        let (_, dlogits, _) = softmax_xent(&trace.logits, &labels, 4);
        let grads = model.backward(&trace, &dlogits).unwrap();
        let mut rng = Rng::new(5);
        let n_params = grads.len();
        for pi in 0..n_params {
            let len = grads[pi].len();
            for _ in 0..len.min(4) {
                let k = rng.below(len as u64) as usize;
                let h = 1e-5;
                let orig = model.params_mut()[pi].values[k];
                model.params_mut()[pi].values[k] = orig + h;
                let up = loss_of(&model, &x, &labels);
                model.params_mut()[pi].values[k] = orig - h;
                let down = loss_of(&model, &x, &labels);
                model.params_mut()[pi].values[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads[pi][k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                let name = model.params_mut()[pi].name.clone();
                assert!(
                    err < 1e-3,
                    "{variant} {name}[{k}]: analytic {an:e} vs fd {fd:e}"
                );
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_trainables_unchanged() {
    let task = small_task(1);
    let mut model = small_model("bn+ce", Activation::Relu, 2, 2);
    let before = snapshot(&mut model);
    let cfg = TrainConfig {
        epochs: 1,
        lr: 0.0,
        weight_decay: 1e-2,
        ..TrainConfig::default()
    };
    train(&mut model, &task, &cfg).unwrap();
    assert_eq!(before, snapshot(&mut model));
}

#[test]
fn pure_decay_shrinks_geometrically() {
    let mut model = small_model("bn+bd", Activation::Relu, 1, 2);
    let (lr, wd) = (0.05, 0.1);
    let before = snapshot(&mut model);
    let zeros: Vec<Vec<f64>> = before.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut sgd = Sgd::new(&mut model, 0.0, wd);
    for _ in 0..3 {
        sgd.step(&mut model, &zeros, lr);
    }
    let after = snapshot(&mut model);
    let frozen = model
        .params_mut()
        .iter()
        .map(|p| p.trainable)
        .collect::<Vec<_>>();
    for ((a, b), trainable) in before.iter().zip(&after).zip(frozen) {
        for (x, y) in a.iter().zip(b) {
            let want = if trainable {
                x * (1.0 - lr * wd).powi(3)
            } else {
                *x
            };
            assert!((y - want).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }
}

#[test]
fn separable_task_is_learned() {
    let task = SyntheticTask::generate(&TaskSpec {
        classes: 2,
        separation: 2.0,
        train_size: 512,
        test_size: 256,
        seed: 4,
        ..TaskSpec::default()
    })
    .unwrap();
    for variant in ["bn", "bn+ce"] {
        let block = BlockSpec::parse_variant(variant, Activation::Relu).unwrap();
        let mut model = Model::new(ModelSpec::uniform(8, 8, 2, 2, block, 1)).unwrap();
        let logs = train(
            &mut model,
            &task,
            &TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let last = logs.last().unwrap();
        assert!(
            last.test_acc >= 0.99,
            "{variant}: test accuracy {}",
            last.test_acc
        );
        assert!(logs[0].train_loss > last.train_loss);
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let task = small_task(9);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = small_model("bn+ce", Activation::Relu, 2, 7);
        let logs = train(&mut m, &task, &cfg).unwrap();
        (m, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.to_arrays(), b.to_arrays());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let task = small_task(2);
    let mut model = small_model("bn", Activation::Relu, 2, 1);
    let cfg = TrainConfig {
        epochs: 50,
        lr: 1e12,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    match train(&mut model, &task, &cfg) {
        Err(e) => assert!(e.is_numerical(), "unexpected error {e}"),
        Ok(_) => panic!("training with lr=1e12 should not converge"),
    }
}

#[test]
fn strong_decay_inhibits_more_bn_channels() {
    let mut weak = 0.0;
    let mut strong = 0.0;
    for r in 0..2 {
        for (wd, acc) in [(1e-4, &mut weak), (5e-2, &mut strong)] {
            let mut cfg = RunConfig {
                width: 16,
                depth: 3,
                ..RunConfig::default()
            }
            .replicate(r);
            cfg.train.epochs = 20;
            cfg.train.weight_decay = wd;
            let (_, logs) = ce_core::train::run_variant(&cfg, "bn").unwrap();
            *acc += logs.last().unwrap().inhibited;
        }
    }
    assert!(
        strong > weak,
        "inhibited ratio {strong} (wd 5e-2) vs {weak} (wd 1e-4)"
    );
}

#[test]
fn ablation_curve_starts_at_unablated_accuracy() {
    let mut cfg = RunConfig {
        width: 8,
        depth: 2,
        ..RunConfig::default()
    };
    cfg.train.epochs = 5;
    let (model, _) = ce_core::train::run_variant(&cfg, "bn").unwrap();
    let task = SyntheticTask::generate(&cfg.task).unwrap();
    let full = evaluate(&model, &task.test, None).unwrap();
    let ratios = [0.0, 0.5, 1.0];
    let seq = cumulative_ablation(&model, &task.test, 1, &ratios, 3, 0, Exec::Sequential).unwrap();
    let par = cumulative_ablation(&model, &task.test, 1, &ratios, 3, 0, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    assert_eq!(seq.at(0.0), Some(full));
    assert_eq!(seq.accuracy_std[0], 0.0);
    assert!(seq.at(1.0).unwrap() < full);
}

#[test]
fn experiments_are_exec_independent() {
    let mut cfg = ExperimentConfig::defaults(Experiment::CorruptedLabels);
    cfg.base.width = 8;
    cfg.base.depth = 2;
    cfg.base.task.train_size = 128;
    cfg.base.task.test_size = 64;
    cfg.base.train.epochs = 2;
    cfg.grid = vec![0.0, 0.5];
    let a = run_experiment(Experiment::CorruptedLabels, &cfg, Exec::Sequential).unwrap();
    let b = run_experiment(Experiment::CorruptedLabels, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let table = a.to_table();
    assert_eq!(table.rows.len(), 2 * 2 * 4);
    assert!(matches!(
        Experiment::parse("sweep"),
        Err(CeError::Config(_))
    ));
}
