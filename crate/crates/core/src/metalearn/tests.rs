use rand::SeedableRng;

use super::*;
use crate::tensor::{finite_diff_grad, max_relative_error, NdArray};
use crate::verify::fixtures::{micro_meta_config, micro_setup, micro_setup_with};

fn c(v: &[f64]) -> Tensor {
    Tensor::constant(NdArray::from_vec(v.to_vec()))
}

fn norm(p: &ParamSet) -> f64 {
    p.sq_norm().sqrt()
}

fn zero_fc(params: &mut NetParams) {
    for name in ["M.fc.weight", "M.fc.bias"] {
        params.m.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn split_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = split_domains(4, &mut rng).unwrap();
    assert_eq!(p.trn_indices.len(), 3);
    assert!(!p.trn_indices.contains(&p.val_index));
    let p = split_domains(2, &mut rng).unwrap();
    assert_eq!(p.trn_indices.len(), 1);
    assert_eq!(p.trn_indices[0] + p.val_index, 1);
    assert!(split_domains(1, &mut rng).is_err());
}

#[test]
fn split_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[split_domains(4, &mut rng).unwrap().val_index] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn bce_examples() {
    let half = bce(&c(&[0.5, 0.5]), &c(&[1.0, 0.0])).unwrap().item();
    assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
    let perfect = bce(&c(&[1.0, 0.0]), &c(&[1.0, 0.0])).unwrap().item();
    assert!((perfect - -(1.0f64 - 1e-12).ln()).abs() < 1e-18 && perfect > 0.0);
    let two = bce(&c(&[0.8, 0.3]), &c(&[1.0, 0.0])).unwrap().item();
    let oracle = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
    assert!((two - oracle).abs() < 1e-15);
    assert!((two - 0.2899).abs() < 1e-4);
}

#[test]
fn zero_fc_classifies_at_one_half() {
    let mut s = micro_setup(1).unwrap();
    zero_fc(&mut s.params);
    let f = ParamVars::constants(&s.params.f);
    let m = ParamVars::constants(&s.params.m);
    let loss = cls_loss(&s.net, &f, &m, &s.batch.test).unwrap().item();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn depth_loss_examples() {
    let mut s = micro_setup(2).unwrap();
    for v in s.params.d.iter_mut().filter(|(k, _)| k.starts_with("D.out")) {
        v.1.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let f = ParamVars::constants(&s.params.f);
    let d = ParamVars::constants(&s.params.d);
    let batch = &s.batch.test;
    let loss = depth_loss(&s.net, &f, &d, batch, 1.0).unwrap().item();
    let oracle = batch.depth.data().iter().map(|v| v * v).sum::<f64>() / batch.depth.len() as f64;
    assert!((loss - oracle).abs() < 1e-15);
    assert!(oracle > 0.0);
    let weighted = depth_loss(&s.net, &f, &d, batch, 0.25).unwrap().item();
    assert!((weighted - 0.25 * oracle).abs() < 1e-15);

    let fakes: Vec<&crate::datagen::Sample> = s.domains[0].samples.iter().filter(|s| s.y == 0).take(3).collect();
    let fake_batch = Batch::from_samples(fakes, [3, 8, 8], [4, 4]).unwrap();
    assert_eq!(depth_loss(&s.net, &f, &d, &fake_batch, 1.0).unwrap().item(), 0.0);
}

#[test]
fn inner_update_examples() {
    let theta: ParamVars = [("w".to_string(), c(&[2.0]))].into_iter().collect();
    let grad: ParamVars = [("w".to_string(), c(&[3.0]))].into_iter().collect();
    let out = inner_update(&theta, &grad, 0.1).unwrap();
    assert!((out.require("w").unwrap().item() - 1.7).abs() < 1e-15);
    assert_eq!(inner_update(&theta, &grad, 0.0).unwrap().values(), theta.values());
    let zero: ParamVars = [("w".to_string(), c(&[0.0]))].into_iter().collect();
    assert_eq!(inner_update(&theta, &zero, 0.5).unwrap().values(), theta.values());
    let wrong: ParamVars = [("w".to_string(), c(&[1.0, 2.0]))].into_iter().collect();
    assert!(matches!(inner_update(&theta, &wrong, 0.1), Err(Error::Shape { .. })));
}

#[test]
fn alpha_zero_collapses_meta_test_terms() {
    let s = micro_setup(3).unwrap();
    let f = ParamVars::constants(&s.params.f);
    let m = ParamVars::constants(&s.params.m);
    let base = cls_loss(&s.net, &f, &m, &s.batch.test).unwrap().item();
    let zero = m.values().zeros_like();
    let updated: Vec<ParamVars> =
        (0..2).map(|_| inner_update(&m, &ParamVars::constants(&zero), 0.0).unwrap()).collect();
    let sum = meta_test_cls_loss(&s.net, &f, &updated, &s.batch.test).unwrap().item();
    assert!((sum - 2.0 * base).abs() < 1e-14);
    let single = meta_test_cls_loss(&s.net, &f, &updated[..1], &s.batch.test).unwrap().item();
    assert_eq!(single, base);
    assert!(meta_test_cls_loss(&s.net, &f, &[], &s.batch.test).is_err());

    let cfg = micro_meta_config(0.0);
    let obj = meta_cls_objective(&s.net, &s.params, &s.batch, &cfg).unwrap();
    let per_domain: f64 = s.batch.train.iter().map(|b| cls_loss(&s.net, &f, &m, b).unwrap().item()).sum();
    assert!((obj - (per_domain + 2.0 * base)).abs() < 1e-13);
}

#[test]
fn inner_update_counts_per_variant() {
    let s = micro_setup(4).unwrap();
    let expect = [
        (Variant::Finegrained, 2),
        (Variant::Aggregated, 1),
        (Variant::FirstOrder, 2),
        (Variant::Erm, 0),
        (Variant::Noreg, 2),
    ];
    for (variant, n) in expect {
        let cfg = MetaConfig { variant, ..micro_meta_config(1e-2) };
        assert_eq!(meta_grads(&s.net, &s.params, &s.batch, &cfg).unwrap().inner_updates, n, "{variant}");
    }
    let noreg = MetaConfig { variant: Variant::Noreg, ..micro_meta_config(1e-2) };
    let g = meta_grads(&s.net, &s.params, &s.batch, &noreg).unwrap();
    assert_eq!(g.depth_objective, 0.0);
    assert_eq!(g.grads.d.sq_norm(), 0.0);
}

#[test]
fn meta_learner_gradient_matches_finite_differences() {
    let s = micro_setup(5).unwrap();
    let cfg = micro_meta_config(1e-2);
    let g = meta_grads(&s.net, &s.params, &s.batch, &cfg).unwrap().grads.m;
    let fd = finite_diff_grad(
        |m| meta_cls_objective(&s.net, &NetParams { m: m.clone(), ..s.params.clone() }, &s.batch, &cfg),
        &s.params.m,
        1e-6,
    )
    .unwrap();
    let err = max_relative_error(&g, &fd, 1e-6).unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn full_gradient_matches_finite_differences() {
    let s = micro_setup(6).unwrap();
    for variant in [Variant::Finegrained, Variant::Aggregated, Variant::Erm] {
        let cfg = MetaConfig { variant, ..micro_meta_config(5e-2) };
        let g = meta_grads(&s.net, &s.params, &s.batch, &cfg).unwrap().grads.merged();
        let fd = finite_diff_grad(
            |p| meta_objective(&s.net, &NetParams::split(p), &s.batch, &cfg),
            &s.params.merged(),
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(&g, &fd, 1e-6).unwrap();
        assert!(err < 1e-3, "{variant}: max relative error {err}");
    }
}

#[test]
fn depth_and_classification_gradients_are_isolated() {
    let s = micro_setup(7).unwrap();
    let cfg = micro_meta_config(1e-2);
    let tape = Tape::new();
    let (f, m, d) = (tape.watch(&s.params.f), tape.watch(&s.params.m), tape.watch(&s.params.d));
    let obj = build_objective(&s.net, [&f, &m, &d], &s.batch, &cfg).unwrap();
    let dm = backward_grad(obj.depth.as_ref().unwrap(), &m, false).unwrap().values();
    assert!(dm.iter().all(|(_, v)| v.data().iter().all(|&x| x == 0.0)));
    let dd = backward_grad(&obj.cls, &d, false).unwrap().values();
    assert!(dd.iter().all(|(_, v)| v.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn first_and_second_order_agree_only_as_alpha_vanishes() {
    let s = micro_setup(8).unwrap();
    let rel = |alpha: f64| {
        let cfg = micro_meta_config(alpha);
        let a = meta_learner_grad(&s.net, &s.params, &s.batch, &cfg, Variant::Finegrained).unwrap();
        let b = meta_learner_grad(&s.net, &s.params, &s.batch, &cfg, Variant::FirstOrder).unwrap();
        norm(&a.axpy(-1.0, &b).unwrap()) / norm(&a)
    };
    assert!(rel(1e-6) < 1e-3);
    assert!(rel(1e-2) > 1e-3, "{}", rel(1e-2));
    let (r1, r2) = (rel(1e-3), rel(1e-4));
    let slope = loglog_slope(&[1e-4, 1e-3], &[r2, r1]).unwrap();
    assert!((slope - 1.0).abs() < 0.2, "slope {slope}");
}

#[test]
fn sgd_step_is_literal() {
    let s = micro_setup_with(9, 3, 4).unwrap();
    let cfg = MetaConfig { optimizer: OptimizerKind::Sgd, beta: 0.05, ..micro_meta_config(1e-2) };
    let mut state = TrainState::new(&s.net, &cfg);
    let mut replay = state.rng.clone();
    let before = state.params.merged();
    meta_step(&s.net, &mut state, &s.domains, &cfg).unwrap();
    let plan = split_domains(s.domains.len(), &mut replay).unwrap();
    let mb = MetaBatch::sample(&s.domains, &plan, cfg.batch_per_domain, &mut replay).unwrap();
    let g = meta_grads(&s.net, &NetParams::split(&before), &mb, &cfg).unwrap().grads.merged();
    let got = state.params.merged();
    for (name, p) in &before {
        let after = got.require(name).unwrap();
        for ((a, b), gv) in after.data().iter().zip(p.data()).zip(g.require(name).unwrap().data()) {
            assert_eq!(*a, b - cfg.beta * gv, "{name}");
        }
    }
    assert_eq!(state.iter, 1);
    assert_eq!(state.rng, replay);
}

#[test]
fn taylor_residual_is_second_order() {
    // needs an instance with no ReLU switching sign for step sizes up to 1e-2
    let s = micro_setup(0).unwrap();
    let (train, test) = (&s.batch.train[0], &s.batch.test);
    assert_eq!(taylor_residual(&s.net, &s.params, train, test, 0.0).unwrap(), 0.0);
    let alphas = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let res: Vec<f64> = alphas.iter().map(|&a| taylor_residual(&s.net, &s.params, train, test, a).unwrap()).collect();
    let slope = loglog_slope(&alphas, &res).unwrap();
    assert!((1.8..=2.2).contains(&slope), "slope {slope} from {res:?}");

    let flipped = |t: &ParamSet, g: &ParamSet, a: f64| plain_step(t, g, -a);
    let res: Vec<f64> =
        alphas.iter().map(|&a| taylor_residual_with(&s.net, &s.params, train, test, a, &flipped).unwrap()).collect();
    let slope = loglog_slope(&alphas, &res).unwrap();
    assert!(!(1.8..=2.2).contains(&slope), "sign error went unnoticed: slope {slope}");
}

#[test]
fn taylor_residual_vanishes_on_linear_model() {
    let theta: ParamSet = [("w".to_string(), NdArray::from_vec(vec![0.3, -1.2, 2.0]))].into_iter().collect();
    let linear = |coef: Vec<f64>| {
        move |t: &ParamSet| -> Result<(f64, ParamSet)> {
            let w = t.require("w")?;
            let v = w.data().iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 0.7;
            Ok((v, [("w".to_string(), NdArray::from_vec(coef.clone()))].into_iter().collect()))
        }
    };
    let (tr, te) = (linear(vec![1.0, -2.0, 0.5]), linear(vec![0.25, 3.0, -1.5]));
    for alpha in [0.0, 1e-3, 0.1, 1.0, 10.0] {
        let r = taylor_residual_fn(&tr, &te, &theta, alpha, &plain_step).unwrap();
        assert!(r < 1e-10, "alpha {alpha}: {r}");
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let s = micro_setup(11).unwrap();
    let cfg = MetaConfig { iters: 6, ..micro_meta_config(1e-2) };
    let (a, hist) = train(&s.net, &cfg, &s.domains).unwrap();
    let (b, _) = train(&s.net, &cfg, &s.domains).unwrap();
    assert_eq!(a, b);
    assert_eq!(hist.len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(&s.net, &cfg);
    let half = MetaConfig { iters: 3, ..cfg.clone() };
    train_until(&s.net, &mut state, &s.domains, &half, |_, _| Ok(())).unwrap();
    let ckpt = Checkpoint { net: s.net.config().clone(), meta: cfg.clone(), state };
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, ckpt);
    let mut resumed = loaded.state;
    train_until(&s.net, &mut resumed, &s.domains, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, a);
}

#[test]
fn zero_iterations_leave_state_unchanged() {
    let s = micro_setup(12).unwrap();
    let cfg = micro_meta_config(1e-2);
    let (state, hist) = train(&s.net, &cfg, &s.domains).unwrap();
    assert!(hist.is_empty());
    assert_eq!(state, TrainState::new(&s.net, &cfg));
    assert_eq!(state.params, s.net.init_params());
}

#[test]
fn sgd_checkpoint_round_trips() {
    let s = micro_setup(13).unwrap();
    let cfg = MetaConfig { optimizer: OptimizerKind::Sgd, iters: 2, ..micro_meta_config(1e-2) };
    let (state, _) = train(&s.net, &cfg, &s.domains).unwrap();
    let ckpt = Checkpoint { net: s.net.config().clone(), meta: cfg, state };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), ckpt);
    let f32s = load_f32_params(dir.path()).unwrap();
    for (name, v) in &ckpt.state.params.merged() {
        let got = f32s.require(name).unwrap();
        assert!(v.data().iter().zip(got.data()).all(|(a, b)| (*a as f32) as f64 == *b));
    }
}
