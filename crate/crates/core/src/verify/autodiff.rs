//! Finite-difference checks of every recorded operator, first and second order.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Check};
use crate::error::Result;
use crate::tensor::{backward_grad, finite_diff_grad, max_relative_error, NdArray, OpKind, ParamSet, Tape, Tensor};

/// Central-difference step used by every operator check.
pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;
/// Largest tolerated relative error between analytic and numeric gradients.
pub const OP_TOLERANCE: f64 = 1e-4;
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-3;

type Inputs = fn(&mut ChaCha8Rng) -> Vec<NdArray>;
type Forward = fn(&[Tensor]) -> Result<Tensor>;

/// One operator under test: how to draw its inputs and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    inputs: Inputs,
    forward: Forward,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n = shape.iter().product();
    NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

fn centered(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    uniform(rng, shape, -1.0, 1.0)
}

/// Magnitudes in `[lo, hi)` with random signs, keeping clear of zero.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(lo..hi)).collect();
    NdArray::new(shape.to_vec(), data).expect("sized")
}

/// Distinct values spaced at least 0.05 apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    NdArray::new(shape.to_vec(), v).expect("sized")
}

/// Values in `[-1.5, 1.5]` at least 0.05 away from the clamp bounds `±1`.
fn away_from_bounds(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    uniform(rng, shape, 0.0, 1.0).map(|u| {
        let v = -1.5 + 3.0 * u;
        if (v.abs() - 1.0).abs() < 0.05 {
            v.signum() * 1.2
        } else {
            v
        }
    })
}

fn pool_index(shape: &[usize]) -> Vec<usize> {
    // fixed (non-max) selection pattern for exercising gather/scatter directly
    let n: usize = shape.iter().product();
    (0..n / 2).map(|i| (i * 7 + 3) % n).collect()
}

/// The operator set, including the adjoint operators backward passes record.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: |r| vec![centered(r, &[3, 4]), centered(r, &[3, 4])],
            forward: |t| t[0].add(&t[1]),
        },
        OpCase {
            name: "sub",
            inputs: |r| vec![centered(r, &[3, 4]), centered(r, &[3, 4])],
            forward: |t| t[0].sub(&t[1]),
        },
        OpCase {
            name: "mul",
            inputs: |r| vec![centered(r, &[3, 4]), centered(r, &[3, 4])],
            forward: |t| t[0].mul(&t[1]),
        },
        OpCase {
            name: "div",
            inputs: |r| vec![centered(r, &[3, 4]), signed_away_from_zero(r, &[3, 4], 0.5, 2.0)],
            forward: |t| t[0].div(&t[1]),
        },
        OpCase { name: "scale", inputs: |r| vec![centered(r, &[5])], forward: |t| Ok(t[0].scale(-1.7)) },
        OpCase { name: "shift", inputs: |r| vec![centered(r, &[5])], forward: |t| Ok(t[0].shift(0.3)) },
        OpCase { name: "log", inputs: |r| vec![uniform(r, &[6], 0.3, 3.0)], forward: |t| t[0].log() },
        OpCase { name: "sigmoid", inputs: |r| vec![uniform(r, &[6], -4.0, 4.0)], forward: |t| Ok(t[0].sigmoid()) },
        OpCase {
            name: "relu",
            inputs: |r| vec![signed_away_from_zero(r, &[8], 0.05, 1.5)],
            forward: |t| Ok(t[0].relu()),
        },
        OpCase { name: "square", inputs: |r| vec![centered(r, &[6])], forward: |t| Ok(t[0].square()) },
        OpCase { name: "powf", inputs: |r| vec![uniform(r, &[6], 0.3, 2.0)], forward: |t| Ok(t[0].powf(-0.5)) },
        OpCase { name: "clamp", inputs: |r| vec![away_from_bounds(r, &[8])], forward: |t| Ok(t[0].clamp(-1.0, 1.0)) },
        OpCase {
            name: "matmul",
            inputs: |r| vec![centered(r, &[3, 4]), centered(r, &[4, 2])],
            forward: |t| t[0].matmul(&t[1]),
        },
        OpCase { name: "transpose", inputs: |r| vec![centered(r, &[3, 5])], forward: |t| t[0].transpose() },
        OpCase {
            name: "conv2d/stride1",
            inputs: |r| vec![centered(r, &[2, 2, 5, 4]), centered(r, &[3, 2, 3, 3])],
            forward: |t| t[0].conv2d(&t[1], 1),
        },
        OpCase {
            name: "conv2d/stride2",
            inputs: |r| vec![centered(r, &[2, 2, 6, 5]), centered(r, &[2, 2, 3, 3])],
            forward: |t| t[0].conv2d(&t[1], 2),
        },
        OpCase {
            name: "conv2d_input_grad",
            inputs: |r| vec![centered(r, &[2, 3, 3, 3]), centered(r, &[3, 2, 3, 3])],
            forward: |t| Tensor::apply(OpKind::Conv2dInputGrad { stride: 2, in_hw: (6, 5) }, &[&t[0], &t[1]]),
        },
        OpCase {
            name: "conv2d_weight_grad",
            inputs: |r| vec![centered(r, &[2, 2, 5, 4]), centered(r, &[2, 3, 5, 4])],
            forward: |t| Tensor::apply(OpKind::Conv2dWeightGrad { stride: 1, k_hw: (3, 3) }, &[&t[0], &t[1]]),
        },
        OpCase { name: "max_pool2", inputs: |r| vec![distinct(r, &[2, 2, 4, 6])], forward: |t| t[0].max_pool2() },
        OpCase {
            name: "gather",
            inputs: |r| vec![centered(r, &[2, 3, 4])],
            forward: |t| {
                let index = pool_index(t[0].shape());
                let out_shape = vec![index.len()];
                Tensor::apply(OpKind::Gather { index: Rc::new(index), out_shape }, &[&t[0]])
            },
        },
        OpCase {
            name: "scatter",
            inputs: |r| vec![centered(r, &[12])],
            forward: |t| {
                Tensor::apply(
                    OpKind::Scatter { index: Rc::new(pool_index(&[2, 3, 4])), in_shape: vec![2, 3, 4] },
                    &[&t[0]],
                )
            },
        },
        OpCase { name: "sum", inputs: |r| vec![centered(r, &[3, 4])], forward: |t| Ok(t[0].sum()) },
        OpCase { name: "mean", inputs: |r| vec![centered(r, &[3, 4])], forward: |t| t[0].mean() },
        OpCase { name: "broadcast", inputs: |r| vec![centered(r, &[1])], forward: |t| t[0].broadcast(&[2, 3]) },
        OpCase { name: "channel_sum", inputs: |r| vec![centered(r, &[2, 3, 2, 2])], forward: |t| t[0].channel_sum() },
        OpCase {
            name: "channel_broadcast",
            inputs: |r| vec![centered(r, &[3])],
            forward: |t| t[0].channel_broadcast(&[2, 3, 2, 2]),
        },
        OpCase { name: "spatial_sum", inputs: |r| vec![centered(r, &[2, 3, 2, 3])], forward: |t| t[0].spatial_sum() },
        OpCase {
            name: "spatial_broadcast",
            inputs: |r| vec![centered(r, &[2, 3])],
            forward: |t| t[0].spatial_broadcast(2, 3),
        },
        OpCase {
            name: "global_avg_pool",
            inputs: |r| vec![centered(r, &[2, 3, 3, 2])],
            forward: |t| t[0].global_avg_pool(),
        },
        OpCase {
            name: "concat",
            inputs: |r| vec![centered(r, &[2, 1, 2, 2]), centered(r, &[2, 3, 2, 2])],
            forward: |t| Tensor::concat_channels(&[&t[0], &t[1]]),
        },
        OpCase {
            name: "channel_slice",
            inputs: |r| vec![centered(r, &[2, 4, 2, 2])],
            forward: |t| Tensor::apply(OpKind::ChannelSlice { start: 1, len: 2 }, &[&t[0]]),
        },
        OpCase {
            name: "channel_embed",
            inputs: |r| vec![centered(r, &[2, 2, 2, 2])],
            forward: |t| Tensor::apply(OpKind::ChannelEmbed { start: 1, total: 4 }, &[&t[0]]),
        },
        OpCase { name: "reshape", inputs: |r| vec![centered(r, &[2, 6])], forward: |t| t[0].reshape(&[3, 2, 2]) },
        OpCase {
            name: "standardize",
            inputs: |r| vec![centered(r, &[3, 2, 3, 3]), uniform(r, &[2], 0.5, 1.5), centered(r, &[2])],
            forward: |t| t[0].standardize(&t[1], &t[2], 1e-5),
        },
    ]
}

fn as_params(values: &[NdArray]) -> ParamSet {
    values.iter().enumerate().map(|(i, v)| (format!("in{i}"), v.clone())).collect()
}

/// `sum(op(inputs) * weights)` with fixed random weights, so every output
/// coordinate carries its own upstream gradient.
fn weighted_loss(
    case: &OpCase,
    params: &ParamSet,
    weights: &NdArray,
    tape: &Tape,
) -> Result<(Tensor, crate::tensor::ParamVars)> {
    let vars = tape.watch(params);
    let inputs: Vec<Tensor> = vars.iter().map(|(_, t)| t.clone()).collect();
    let out = (case.forward)(&inputs)?;
    let loss = out.mul(&Tensor::constant(weights.clone()))?.sum();
    Ok((loss, vars))
}

/// Largest relative error between `backward_grad` and central differences
/// over `instances` random draws of `case`.
pub fn op_gradient_error(case: &OpCase, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let params = as_params(&(case.inputs)(&mut rng));
        let consts: Vec<Tensor> = params.iter().map(|(_, v)| Tensor::constant(v.clone())).collect();
        let out_shape = (case.forward)(&consts)?.shape().to_vec();
        let weights = centered(&mut rng, &out_shape);

        let tape = Tape::new();
        let (loss, vars) = weighted_loss(case, &params, &weights, &tape)?;
        let analytic = backward_grad(&loss, &vars, false)?.values();
        let numeric = finite_diff_grad(
            |p| {
                let tape = Tape::new();
                Ok(weighted_loss(case, p, &weights, &tape)?.0.item())
            },
            &params,
            FD_EPS,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR)?);
    }
    Ok(worst)
}

/// One check per operator.
pub fn op_gradient_checks(instances: usize) -> Result<Vec<Check>> {
    op_cases()
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let err = op_gradient_error(case, instances, 1000 + i as u64)?;
            Ok(Check::new(format!("grad/{}", case.name), err, Bound::Below(OP_TOLERANCE)))
        })
        .collect()
}

fn small_net_loss(p: &crate::tensor::ParamVars, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let h = x.conv2d(p.require("w1")?, 1)?.standardize(p.require("g1")?, p.require("b1")?, 1e-5)?.sigmoid();
    let pooled = h.global_avg_pool()?;
    let logits = pooled.matmul(p.require("w2")?)?;
    let probs = logits.sigmoid().clamp(1e-12, 1.0 - 1e-12);
    let pos = y.mul(&probs.log()?)?;
    let neg = y.neg().shift(1.0).mul(&probs.neg().shift(1.0).log()?)?;
    Ok(pos.add(&neg)?.mean()?.neg())
}

/// Gradient of `g . g`, where `g` is a `create_graph` gradient of a small
/// convolutional network's loss, against central differences of `g . g`.
pub fn second_order_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::constant(centered(&mut rng, &[3, 2, 4, 4]));
    let y = Tensor::constant(NdArray::new(vec![3, 1], vec![1.0, 0.0, 1.0])?);
    let mut params = ParamSet::new();
    params.insert("w1", uniform(&mut rng, &[2, 2, 3, 3], -0.5, 0.5));
    params.insert("g1", uniform(&mut rng, &[2], 0.5, 1.5));
    params.insert("b1", centered(&mut rng, &[2]));
    params.insert("w2", centered(&mut rng, &[2, 1]));

    let grad_sq = |p: &ParamSet, create_graph: bool| -> Result<(Tensor, crate::tensor::ParamVars)> {
        let tape = Tape::new();
        let vars = tape.watch(p);
        let g = backward_grad(&small_net_loss(&vars, &x, &y)?, &vars, create_graph)?;
        let mut total = Tensor::scalar(0.0);
        for (_, gi) in &g {
            total = total.add(&gi.square().sum())?;
        }
        Ok((total, vars))
    };
    let (gg, vars) = grad_sq(&params, true)?;
    let analytic = backward_grad(&gg, &vars, false)?.values();
    let numeric = finite_diff_grad(|p| Ok(grad_sq(p, false)?.0.item()), &params, FD_EPS)?;
    max_relative_error(&analytic, &numeric, REL_FLOOR)
}

pub fn second_order_check() -> Result<Check> {
    Ok(Check::new("grad/second_order", second_order_error(7)?, Bound::Below(SECOND_ORDER_TOLERANCE)))
}
