use super::{cls_loss, inner_update};
use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::nets::{NetParams, Network};
use crate::tensor::{backward_grad, ParamSet, ParamVars, Tape};

/// Inner update rule `(theta_m, grad, alpha) -> theta_m'`.
pub type InnerStep = dyn Fn(&ParamSet, &ParamSet, f64) -> Result<ParamSet>;

fn default_step(theta: &ParamSet, grad: &ParamSet, alpha: f64) -> Result<ParamSet> {
    inner_update(&ParamVars::constants(theta), &ParamVars::constants(grad), alpha).map(|v| v.values())
}

fn cls_value_and_grad(net: &Network, params: &NetParams, m: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet)> {
    let tape = Tape::new();
    let mv = tape.watch(m);
    let loss = cls_loss(net, &ParamVars::constants(&params.f), &mv, batch)?;
    Ok((loss.item(), backward_grad(&loss, &mv, false)?.values()))
}

fn dot(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let mut acc = 0.0;
    for (name, x) in a {
        acc += x.data().iter().zip(b.require(name)?.data()).map(|(p, q)| p * q).sum::<f64>();
    }
    Ok(acc)
}

/// First-order expansion error of the meta-test loss after one inner step:
/// `|Lt(M') - (Lt(M) - alpha * <g_train, g_test>)|`, with `F` held fixed.
pub fn taylor_residual(net: &Network, params: &NetParams, train: &Batch, test: &Batch, alpha: f64) -> Result<f64> {
    taylor_residual_with(net, params, train, test, alpha, &default_step)
}

/// [`taylor_residual`] with a caller-supplied inner update.
pub fn taylor_residual_with(
    net: &Network,
    params: &NetParams,
    train: &Batch,
    test: &Batch,
    alpha: f64,
    step: &InnerStep,
) -> Result<f64> {
    let train_loss = |m: &ParamSet| cls_value_and_grad(net, params, m, train);
    let test_loss = |m: &ParamSet| cls_value_and_grad(net, params, m, test);
    taylor_residual_fn(&train_loss, &test_loss, &params.m, alpha, step)
}

/// Value-and-gradient closure over the meta learner's parameters.
pub type LossFn<'a> = dyn Fn(&ParamSet) -> Result<(f64, ParamSet)> + 'a;

/// The residual for arbitrary train/test losses of `theta`.
pub fn taylor_residual_fn(
    train: &LossFn,
    test: &LossFn,
    theta: &ParamSet,
    alpha: f64,
    step: &InnerStep,
) -> Result<f64> {
    let (_, g_train) = train(theta)?;
    let (lt, g_test) = test(theta)?;
    let (lt_new, _) = test(&step(theta, &g_train, alpha)?)?;
    Ok((lt_new - (lt - alpha * dot(&g_train, &g_test)?)).abs())
}

/// The plain inner update as an [`InnerStep`].
pub fn plain_step(theta: &ParamSet, grad: &ParamSet, alpha: f64) -> Result<ParamSet> {
    default_step(theta, grad, alpha)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config(format!("slope needs >= 2 paired points, got {} and {}", xs.len(), ys.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Config("slope needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}
