//! Checks of the meta-objective's gradient on the micro network.

use super::fixtures::{micro_meta_config, micro_setup, micro_setup_with, MicroSetup};
use super::{Bound, Check};
use crate::error::Result;
use crate::metalearn::{
    build_objective, loglog_slope, meta_cls_objective, meta_grads, meta_learner_grad, meta_step, plain_step,
    split_domains, taylor_residual, taylor_residual_fn, taylor_residual_with, MetaBatch, MetaConfig, OptimizerKind,
    TrainState, Variant,
};
use crate::nets::NetParams;
use crate::tensor::{backward_grad, finite_diff_grad, max_relative_error, NdArray, ParamSet, Tape};

pub const META_GRAD_TOLERANCE: f64 = 1e-3;
pub const MICRO_NET_MAX_PARAMS: usize = 500;
/// Step sizes of the Taylor slope fit.
pub const TAYLOR_ALPHAS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
pub const TAYLOR_SLOPE: (f64, f64) = (1.8, 2.2);

/// Meta-learner gradient through the inner updates against central
/// differences of the classification part of the meta-objective (the depth
/// terms do not depend on `M`).
pub fn meta_gradient_error(s: &MicroSetup, alpha: f64) -> Result<f64> {
    let cfg = micro_meta_config(alpha);
    let g = meta_grads(&s.net, &s.params, &s.batch, &cfg)?.grads.m;
    let fd = finite_diff_grad(
        |m| meta_cls_objective(&s.net, &NetParams { m: m.clone(), ..s.params.clone() }, &s.batch, &cfg),
        &s.params.m,
        1e-6,
    )?;
    max_relative_error(&g, &fd, 1e-6)
}

pub fn meta_gradient_checks() -> Result<Vec<Check>> {
    let s = micro_setup(5)?;
    Ok(vec![
        Check::new(
            "meta/micro_net_params",
            s.net.config().param_count() as f64,
            Bound::Within(1.0, MICRO_NET_MAX_PARAMS as f64),
        ),
        Check::new("meta/domains", s.domains.len() as f64, Bound::Equal(3.0)),
        Check::new("meta/grad_vs_finite_diff", meta_gradient_error(&s, 1e-2)?, Bound::Below(META_GRAD_TOLERANCE)),
    ])
}

/// Residuals of the first-order expansion at each of [`TAYLOR_ALPHAS`].
pub fn taylor_residuals(s: &MicroSetup) -> Result<Vec<f64>> {
    let (train, test) = (&s.batch.train[0], &s.batch.test);
    TAYLOR_ALPHAS.iter().map(|&a| taylor_residual(&s.net, &s.params, train, test, a)).collect()
}

fn linear_model_residual() -> Result<f64> {
    let theta: ParamSet = [("w".to_string(), NdArray::from_vec(vec![0.3, -1.2, 2.0]))].into_iter().collect();
    let linear = |coef: Vec<f64>| {
        move |t: &ParamSet| -> Result<(f64, ParamSet)> {
            let w = t.require("w")?;
            let v = w.data().iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 0.7;
            Ok((v, [("w".to_string(), NdArray::from_vec(coef.clone()))].into_iter().collect()))
        }
    };
    let (tr, te) = (linear(vec![1.0, -2.0, 0.5]), linear(vec![0.25, 3.0, -1.5]));
    let mut worst: f64 = 0.0;
    for alpha in TAYLOR_ALPHAS.iter().chain(&[0.1, 1.0, 10.0]) {
        worst = worst.max(taylor_residual_fn(&tr, &te, &theta, *alpha, &plain_step)?);
    }
    Ok(worst)
}

/// Zero residual at a zero step, the slope fit, the linear toy model and a
/// sign-flipped inner step that the slope fit must reject.
pub fn taylor_checks() -> Result<Vec<Check>> {
    // ReLU pattern of this instance stays fixed for steps up to 1e-2
    let s = micro_setup(0)?;
    let (train, test) = (&s.batch.train[0], &s.batch.test);
    let (lo, hi) = TAYLOR_SLOPE;
    let slope = loglog_slope(&TAYLOR_ALPHAS, &taylor_residuals(&s)?)?;
    let flipped = |t: &ParamSet, g: &ParamSet, a: f64| plain_step(t, g, -a);
    let mutated: Vec<f64> = TAYLOR_ALPHAS
        .iter()
        .map(|&a| taylor_residual_with(&s.net, &s.params, train, test, a, &flipped))
        .collect::<Result<_>>()?;
    Ok(vec![
        Check::new("taylor/zero_step", taylor_residual(&s.net, &s.params, train, test, 0.0)?, Bound::Equal(0.0)),
        Check::new("taylor/loglog_slope", slope, Bound::Within(lo, hi)),
        Check::new("taylor/linear_model", linear_model_residual()?, Bound::Below(1e-10)),
        Check::new("taylor/sign_mutation_detected", loglog_slope(&TAYLOR_ALPHAS, &mutated)?, Bound::Outside(lo, hi)),
    ])
}

/// `|g_second - g_first| / |g_second|` for the meta learner at `alpha`.
pub fn order_gap(s: &MicroSetup, alpha: f64) -> Result<f64> {
    let cfg = micro_meta_config(alpha);
    let a = meta_learner_grad(&s.net, &s.params, &s.batch, &cfg, Variant::Finegrained)?;
    let b = meta_learner_grad(&s.net, &s.params, &s.batch, &cfg, Variant::FirstOrder)?;
    Ok(a.axpy(-1.0, &b)?.sq_norm().sqrt() / a.sq_norm().sqrt())
}

pub fn order_checks() -> Result<Vec<Check>> {
    let s = micro_setup(8)?;
    Ok(vec![
        Check::new("order/gap_alpha_1e-6", order_gap(&s, 1e-6)?, Bound::Below(1e-3)),
        Check::new("order/gap_alpha_1e-2", order_gap(&s, 1e-2)?, Bound::Above(1e-3)),
    ])
}

fn max_abs(p: &ParamSet) -> f64 {
    p.iter().flat_map(|(_, v)| v.data().iter().map(|x| x.abs())).fold(0.0, f64::max)
}

/// Largest `|d depth / d M|` and `|d cls / d D|`; both must be exactly zero.
pub fn isolation_checks() -> Result<Vec<Check>> {
    let s = micro_setup(7)?;
    let cfg = micro_meta_config(1e-2);
    let tape = Tape::new();
    let (f, m, d) = (tape.watch(&s.params.f), tape.watch(&s.params.m), tape.watch(&s.params.d));
    let obj = build_objective(&s.net, [&f, &m, &d], &s.batch, &cfg)?;
    let depth = obj.depth.as_ref().expect("depth weight is positive");
    let dm = backward_grad(depth, &m, false)?.values();
    let dd = backward_grad(&obj.cls, &d, false)?.values();
    Ok(vec![
        Check::new("isolation/depth_wrt_meta", max_abs(&dm), Bound::Equal(0.0)),
        Check::new("isolation/cls_wrt_depth", max_abs(&dd), Bound::Equal(0.0)),
    ])
}

/// One SGD meta step against `param - beta * grad` recomputed from a replayed
/// generator; the value is the largest absolute difference.
pub fn sgd_literal_check() -> Result<Check> {
    let s = micro_setup_with(9, 3, 4)?;
    let cfg = MetaConfig { optimizer: OptimizerKind::Sgd, beta: 0.05, ..micro_meta_config(1e-2) };
    let mut state = TrainState::new(&s.net, &cfg);
    let mut replay = state.rng.clone();
    let before = state.params.merged();
    meta_step(&s.net, &mut state, &s.domains, &cfg)?;
    let plan = split_domains(s.domains.len(), &mut replay)?;
    let mb = MetaBatch::sample(&s.domains, &plan, cfg.batch_per_domain, &mut replay)?;
    let g = meta_grads(&s.net, &NetParams::split(&before), &mb, &cfg)?.grads.merged();
    let expected = before.axpy(-cfg.beta, &g)?;
    let diff = state.params.merged().axpy(-1.0, &expected)?;
    Ok(Check::new("sgd/literal_step", max_abs(&diff), Bound::Equal(0.0)))
}
