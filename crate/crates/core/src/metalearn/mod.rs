//! Depth-regularized meta-learning with one inner update per meta-train domain, and its ablations.
//!
//! Each iteration splits the source domains into `N-1` meta-train domains and
//! one meta-test domain. Every meta-train domain gets its own inner update of
//! the meta learner, every updated learner is scored on the meta-test batch,
//! and all three modules are then updated from one joint objective:
//!
//! ```text
//! J = sum_i [ Lcls(T_i; M) + Lcls(T~; M_i') ] + w * [ Ldep(T~) + sum_i Ldep(T_i) ]
//! M_i' = M - alpha * grad_M Lcls(T_i; M)
//! ```
//!
//! The depth terms do not touch `M` and the classification terms do not touch
//! `D`, so one backward pass over `J` yields the per-module updates.

mod checkpoint;
mod config;
mod optim;
mod taylor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_f32_params, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{MetaConfig, OptimizerKind, Variant};
pub use optim::{OptState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use taylor::{
    loglog_slope, plain_step, taylor_residual, taylor_residual_fn, taylor_residual_with, InnerStep, LossFn,
};

use crate::datagen::{sample_batch, Batch, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::{FeatureMaps, NetParams, Network};
use crate::tensor::{backward_grad, ParamSet, ParamVars, Tape, Tensor};

/// Probabilities entering `log` are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

/// One iteration's partition of the source domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub trn_indices: Vec<usize>,
    pub val_index: usize,
}

/// Picks the meta-test domain uniformly; the rest are meta-train, in index order.
pub fn split_domains(n_domains: usize, rng: &mut ChaCha8Rng) -> Result<SplitPlan> {
    if n_domains < 2 {
        return Err(Error::Config(format!("need at least 2 domains to split, got {n_domains}")));
    }
    let val_index = rng.gen_range(0..n_domains);
    Ok(SplitPlan { trn_indices: (0..n_domains).filter(|&i| i != val_index).collect(), val_index })
}

/// Sampled data for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaBatch {
    pub train: Vec<Batch>,
    pub test: Batch,
}

impl MetaBatch {
    /// Samples one batch per meta-train domain (in plan order), then the meta-test batch.
    pub fn sample(domains: &[DomainDataset], plan: &SplitPlan, b: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let train = plan.trn_indices.iter().map(|&i| sample_batch(&domains[i], b, rng)).collect::<Result<Vec<_>>>()?;
        let test = sample_batch(&domains[plan.val_index], b, rng)?;
        Ok(MetaBatch { train, test })
    }
}

fn labels(batch: &Batch) -> Tensor {
    Tensor::constant(batch.y.clone())
}

/// Mean binary cross-entropy of probabilities `probs` against `y`.
pub fn bce(probs: &Tensor, y: &Tensor) -> Result<Tensor> {
    let p = probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pos = y.mul(&p.log()?)?;
    let neg = y.neg().shift(1.0).mul(&p.neg().shift(1.0).log()?)?;
    Ok(pos.add(&neg)?.mean()?.neg())
}

fn cls_loss_on(net: &Network, theta_m: &ParamVars, feats: &FeatureMaps, batch: &Batch) -> Result<Tensor> {
    bce(&net.classify(theta_m, feats)?, &labels(batch))
}

fn depth_loss_on(
    net: &Network,
    theta_d: &ParamVars,
    feats: &FeatureMaps,
    batch: &Batch,
    weight: f64,
) -> Result<Tensor> {
    let pred = net.estimate_depth(theta_d, feats)?;
    Ok(pred.sub(&Tensor::constant(batch.depth.clone()))?.square().mean()?.scale(weight))
}

/// Classification loss: mean negative log-likelihood of `M(F(x))`.
pub fn cls_loss(net: &Network, theta_f: &ParamVars, theta_m: &ParamVars, batch: &Batch) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Config("classification loss on an empty batch".into()));
    }
    let feats = net.feature_forward(theta_f, &Tensor::constant(batch.x.clone()))?;
    cls_loss_on(net, theta_m, &feats, batch)
}

/// Depth loss: mean squared error over samples and pixels, times `weight`.
pub fn depth_loss(
    net: &Network,
    theta_f: &ParamVars,
    theta_d: &ParamVars,
    batch: &Batch,
    weight: f64,
) -> Result<Tensor> {
    let feats = net.feature_forward(theta_f, &Tensor::constant(batch.x.clone()))?;
    depth_loss_on(net, theta_d, &feats, batch, weight)
}

/// `theta_m - alpha * grad`, kept on the tape when its inputs are.
pub fn inner_update(theta_m: &ParamVars, grad: &ParamVars, alpha: f64) -> Result<ParamVars> {
    theta_m
        .iter()
        .map(|(name, t)| {
            let g = grad.require(name)?;
            if g.shape() != t.shape() {
                return Err(Error::shape("inner_update", format!("`{name}`: {:?} vs {:?}", t.shape(), g.shape())));
            }
            Ok((name.clone(), t.sub(&g.scale(alpha))?))
        })
        .collect()
}

/// Sum over updated learners of the classification loss on the meta-test batch.
pub fn meta_test_cls_loss(net: &Network, theta_f: &ParamVars, updated: &[ParamVars], batch: &Batch) -> Result<Tensor> {
    if updated.is_empty() {
        return Err(Error::Config("meta-test loss needs at least one updated learner".into()));
    }
    let feats = net.feature_forward(theta_f, &Tensor::constant(batch.x.clone()))?;
    sum_losses(updated.iter().map(|m| cls_loss_on(net, m, &feats, batch)))
}

fn sum_losses(terms: impl IntoIterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for t in terms {
        let t = t?;
        acc = Some(match acc {
            Some(a) => a.add(&t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::Config("no loss terms".into()))
}

/// Per-module gradients plus the values that produced them.
#[derive(Clone, Debug)]
pub struct MetaGrads {
    pub grads: NetParams,
    pub objective: f64,
    /// Classification part of the objective (everything that touches `M`).
    pub cls_objective: f64,
    pub depth_objective: f64,
    pub inner_updates: usize,
}

/// The recorded objective for one iteration.
pub(crate) struct Objective {
    pub total: Tensor,
    pub cls: Tensor,
    pub depth: Option<Tensor>,
    pub inner_updates: usize,
}

fn forward(net: &Network, theta_f: &ParamVars, batch: &Batch) -> Result<FeatureMaps> {
    net.feature_forward(theta_f, &Tensor::constant(batch.x.clone()))
}

/// Builds the variant's objective on already-watched parameters.
pub(crate) fn build_objective(
    net: &Network,
    vars: [&ParamVars; 3],
    mb: &MetaBatch,
    cfg: &MetaConfig,
) -> Result<Objective> {
    let [theta_f, theta_m, theta_d] = vars;
    if mb.train.is_empty() || mb.test.is_empty() || mb.train.iter().any(Batch::is_empty) {
        return Err(Error::Config("meta batch needs non-empty meta-train and meta-test batches".into()));
    }
    let w = cfg.effective_depth_weight();
    let mut cls_terms = Vec::new();
    let mut depth_terms = Vec::new();
    let mut inner_updates = 0;

    let mut meta_round = |batches: Vec<(Batch, FeatureMaps)>, test: &FeatureMaps| -> Result<()> {
        let second_order = cfg.variant != Variant::FirstOrder;
        let mut updated = Vec::with_capacity(batches.len());
        for (batch, feats) in &batches {
            let train_loss = cls_loss_on(net, theta_m, feats, batch)?;
            let g = backward_grad(&train_loss, theta_m, second_order)?;
            updated.push(inner_update(theta_m, &g, cfg.alpha)?);
            inner_updates += 1;
            cls_terms.push(train_loss);
            if w > 0.0 {
                depth_terms.push(depth_loss_on(net, theta_d, feats, batch, w)?);
            }
        }
        for m in &updated {
            cls_terms.push(cls_loss_on(net, m, test, &mb.test)?);
        }
        Ok(())
    };

    match cfg.variant {
        Variant::Finegrained | Variant::FirstOrder | Variant::Noreg => {
            let batches =
                mb.train.iter().map(|b| Ok((b.clone(), forward(net, theta_f, b)?))).collect::<Result<Vec<_>>>()?;
            let test = forward(net, theta_f, &mb.test)?;
            meta_round(batches, &test)?;
            if w > 0.0 {
                depth_terms.push(depth_loss_on(net, theta_d, &test, &mb.test, w)?);
            }
        }
        Variant::Aggregated => {
            let parts: Vec<&Batch> = mb.train.iter().collect();
            let pooled = Batch::concat(&parts)?;
            let feats = forward(net, theta_f, &pooled)?;
            let test = forward(net, theta_f, &mb.test)?;
            meta_round(vec![(pooled, feats)], &test)?;
            if w > 0.0 {
                depth_terms.push(depth_loss_on(net, theta_d, &test, &mb.test, w)?);
            }
        }
        Variant::Erm => {
            for batch in mb.train.iter().chain(std::iter::once(&mb.test)) {
                let feats = forward(net, theta_f, batch)?;
                cls_terms.push(cls_loss_on(net, theta_m, &feats, batch)?);
                if w > 0.0 {
                    depth_terms.push(depth_loss_on(net, theta_d, &feats, batch, w)?);
                }
            }
        }
    }

    let cls = sum_losses(cls_terms.into_iter().map(Ok))?;
    let depth = if depth_terms.is_empty() { None } else { Some(sum_losses(depth_terms.into_iter().map(Ok))?) };
    let total = match &depth {
        Some(d) => cls.add(d)?,
        None => cls.clone(),
    };
    Ok(Objective { total, cls, depth, inner_updates })
}

/// Gradients of the variant's objective with respect to all three modules.
pub fn meta_grads(net: &Network, params: &NetParams, mb: &MetaBatch, cfg: &MetaConfig) -> Result<MetaGrads> {
    let tape = Tape::new();
    let (f, m, d) = (tape.watch(&params.f), tape.watch(&params.m), tape.watch(&params.d));
    let obj = build_objective(net, [&f, &m, &d], mb, cfg)?;
    let mut all = ParamVars::new();
    for set in [&f, &m, &d] {
        for (k, v) in set {
            all.insert(k.clone(), v.clone());
        }
    }
    let grads = backward_grad(&obj.total, &all, false)?.values();
    Ok(MetaGrads {
        grads: NetParams::split(&grads),
        objective: obj.total.item(),
        cls_objective: obj.cls.item(),
        depth_objective: obj.depth.as_ref().map_or(0.0, Tensor::item),
        inner_updates: obj.inner_updates,
    })
}

/// Classification part of the objective as a function of `M` alone, for
/// finite differencing; `F` and `D` are held fixed.
pub fn meta_cls_objective(net: &Network, params: &NetParams, mb: &MetaBatch, cfg: &MetaConfig) -> Result<f64> {
    let tape = Tape::new();
    let f = ParamVars::constants(&params.f);
    let d = ParamVars::constants(&params.d);
    // M must be on a tape so the inner gradient can be taken.
    let m = tape.watch(&params.m);
    Ok(build_objective(net, [&f, &m, &d], mb, cfg)?.cls.item())
}

/// Full objective value, for finite differencing over every parameter.
pub fn meta_objective(net: &Network, params: &NetParams, mb: &MetaBatch, cfg: &MetaConfig) -> Result<f64> {
    let tape = Tape::new();
    let (f, m, d) = (tape.watch(&params.f), tape.watch(&params.m), tape.watch(&params.d));
    Ok(build_objective(net, [&f, &m, &d], mb, cfg)?.total.item())
}

/// Mutable training state: parameters, optimizer moments, iteration count, RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetParams,
    pub opt: OptState,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters from the network seed and an RNG from the training seed.
    pub fn new(net: &Network, cfg: &MetaConfig) -> Self {
        let params = net.init_params();
        TrainState {
            opt: OptState::new(cfg.optimizer, &params.merged()),
            params,
            iter: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// Summary of one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: u64,
    pub objective: f64,
    pub cls_objective: f64,
    pub depth_objective: f64,
    pub inner_updates: usize,
    pub val_index: usize,
}

/// One iteration: split, sample, differentiate, update.
pub fn meta_step(
    net: &Network,
    state: &mut TrainState,
    domains: &[DomainDataset],
    cfg: &MetaConfig,
) -> Result<StepStats> {
    let plan = split_domains(domains.len(), &mut state.rng)?;
    let mb = MetaBatch::sample(domains, &plan, cfg.batch_per_domain, &mut state.rng)?;
    let g = meta_grads(net, &state.params, &mb, cfg)?;
    let merged = state.params.merged();
    let updated = state.opt.apply(&merged, &g.grads.merged(), cfg.beta)?;
    state.params = NetParams::split(&updated);
    state.iter += 1;
    Ok(StepStats {
        iter: state.iter,
        objective: g.objective,
        cls_objective: g.cls_objective,
        depth_objective: g.depth_objective,
        inner_updates: g.inner_updates,
        val_index: plan.val_index,
    })
}

/// Runs iterations until `state.iter == cfg.iters`, calling `on_step` after each.
pub fn train_until(
    net: &Network,
    state: &mut TrainState,
    domains: &[DomainDataset],
    cfg: &MetaConfig,
    mut on_step: impl FnMut(&TrainState, &StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if domains.len() < 2 {
        return Err(Error::Config(format!("need at least 2 source domains, got {}", domains.len())));
    }
    let mut history = Vec::new();
    while state.iter < cfg.iters {
        let stats = meta_step(net, state, domains, cfg)?;
        on_step(state, &stats)?;
        history.push(stats);
    }
    Ok(history)
}

/// Trains from scratch for `cfg.iters` iterations.
pub fn train(net: &Network, cfg: &MetaConfig, domains: &[DomainDataset]) -> Result<(TrainState, Vec<StepStats>)> {
    let mut state = TrainState::new(net, cfg);
    let history = train_until(net, &mut state, domains, cfg, |_, _| Ok(()))?;
    Ok((state, history))
}

/// Flattened `M` gradient for `variant`, other settings from `cfg`.
pub fn meta_learner_grad(
    net: &Network,
    params: &NetParams,
    mb: &MetaBatch,
    cfg: &MetaConfig,
    variant: Variant,
) -> Result<ParamSet> {
    let cfg = MetaConfig { variant, ..cfg.clone() };
    Ok(meta_grads(net, params, mb, &cfg)?.grads.m)
}

#[cfg(test)]
mod tests;
