//! Leave-one-domain-out experiments: train on the source domains, pick a
//! threshold on their held-out validation tails, score the unseen domain.

use serde::{Deserialize, Serialize};

use crate::datagen::{dataset_digest, Batch, DomainDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metalearn::{train_until, MetaConfig, StepStats, TrainState, Variant};
use crate::metrics::{MetricsReport, ScoreSet};
use crate::nets::{MetaLayer, NetConfig, NetParams, Network, Preset};

/// Fraction of each source class held out for threshold selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Environment variable capping how many cells run at once.
pub const THREADS_ENV: &str = "METADG_THREADS";

/// Source domains split for training, plus the held-out target.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<DomainDataset>,
    pub validation: Vec<DomainDataset>,
    pub target: DomainDataset,
}

/// Splits `domains` around `leave_out`, holding out the last
/// [`VALIDATION_FRACTION`] of each class of every source domain.
pub fn leave_one_out(domains: &[DomainDataset], leave_out: &str) -> Result<Split> {
    let target = domains
        .iter()
        .find(|d| d.name() == leave_out)
        .ok_or_else(|| Error::Config(format!("unknown leave-out domain `{leave_out}`")))?
        .clone();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for d in domains.iter().filter(|d| d.name() != leave_out) {
        let (t, v) = d.split_validation(VALIDATION_FRACTION)?;
        train.push(t);
        validation.push(v);
    }
    if train.len() < 2 {
        return Err(Error::Config(format!("need at least 2 source domains besides `{leave_out}`")));
    }
    Ok(Split { train, validation, target })
}

/// Real-class scores of every sample in `batch`, standardized over the batch.
pub fn score_batch(net: &Network, params: &NetParams, batch: &Batch) -> Result<ScoreSet> {
    let scores = net.score(params, &batch.x)?;
    ScoreSet::new(scores, batch.y.data().iter().map(|&v| v as u8).collect())
}

/// Scores `target`, thresholding at the EER of the pooled validation sets.
pub fn evaluate(
    net: &Network,
    params: &NetParams,
    validation: &[DomainDataset],
    target: &DomainDataset,
) -> Result<MetricsReport> {
    let val_batches = validation.iter().map(DomainDataset::full_batch).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Batch> = val_batches.iter().collect();
    let val = score_batch(net, params, &Batch::concat(&refs)?)?;
    let test = score_batch(net, params, &target.full_batch()?)?;
    Ok(MetricsReport::new(&test, &val))
}

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub leave_out: String,
    pub seed: u64,
    pub hter: f64,
    pub hter_oracle: f64,
    pub auc: f64,
    pub inner_updates: usize,
    /// Mean objective over the first and last tenth of training.
    pub early_loss: f64,
    pub late_loss: f64,
}

fn tenth_means(history: &[StepStats]) -> (f64, f64) {
    if history.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = (history.len() / 10).max(1);
    let mean = |s: &[StepStats]| s.iter().map(|h| h.objective).sum::<f64>() / s.len() as f64;
    (mean(&history[..k]), mean(&history[history.len() - k..]))
}

/// Trains one cell from scratch and evaluates it on the held-out domain.
pub fn run_cell(net_cfg: &NetConfig, meta: &MetaConfig, split: &Split, seed: u64) -> Result<(CellResult, TrainState)> {
    let net = Network::new(net_cfg.clone().with_seed(seed))?;
    let meta = MetaConfig { seed, ..meta.clone() };
    let mut state = TrainState::new(&net, &meta);
    let history = train_until(&net, &mut state, &split.train, &meta, |_, _| Ok(()))?;
    let report = evaluate(&net, &state.params, &split.validation, &split.target)?;
    let (early_loss, late_loss) = tenth_means(&history);
    let result = CellResult {
        variant: meta.variant,
        leave_out: split.target.name().to_string(),
        seed,
        hter: report.hter,
        hter_oracle: report.hter_oracle,
        auc: report.auc,
        inner_updates: history.last().map_or(0, |h| h.inner_updates),
        early_loss,
        late_loss,
    };
    Ok((result, state))
}

/// Which cells an ablation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    /// Held-out domains; empty means every domain in turn.
    pub leave_out: Vec<String>,
    pub seeds: u64,
    /// First seed; cells use `first_seed..first_seed + seeds`.
    pub first_seed: u64,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan { variants: Variant::ALL.to_vec(), leave_out: Vec::new(), seeds: 10, first_seed: 0 }
    }
}

/// Per-cell results and the digest of the data every cell consumed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub dataset_sha256: String,
    pub cells: Vec<CellResult>,
}

/// Number of worker threads: `METADG_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (variant, leave-out, seed) cell. Cells are independent and may
/// run concurrently; results come back in plan order.
pub fn run_ablation(
    net_cfg: &NetConfig,
    meta: &MetaConfig,
    domains: &[DomainDataset],
    plan: &AblationPlan,
    on_cell: impl Fn(&CellResult) + Sync,
) -> Result<AblationResult> {
    use rayon::prelude::*;

    if plan.seeds == 0 || plan.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let names: Vec<String> = if plan.leave_out.is_empty() {
        domains.iter().map(|d| d.name().to_string()).collect()
    } else {
        plan.leave_out.clone()
    };
    let splits = names.iter().map(|n| leave_one_out(domains, n)).collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for variant in &plan.variants {
        for split in &splits {
            for seed in plan.first_seed..plan.first_seed + plan.seeds {
                jobs.push((*variant, split, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|(variant, split, seed)| {
                let cfg = MetaConfig { variant: *variant, ..meta.clone() };
                let (cell, _) = run_cell(net_cfg, &cfg, split, *seed)?;
                on_cell(&cell);
                Ok(cell)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(AblationResult { dataset_sha256: dataset_digest(domains), cells })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        MeanStd { mean, std: var.sqrt(), n }
    }

    /// Standard error of `self.mean - other.mean` for independent samples.
    pub fn pooled_se(&self, other: &MeanStd) -> f64 {
        (self.std.powi(2) / self.n as f64 + other.std.powi(2) / other.n as f64).sqrt()
    }
}

/// Aggregate over seeds (and optionally leave-out domains) for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: Variant,
    /// `None` when pooled over every held-out domain.
    pub leave_out: Option<String>,
    pub hter: MeanStd,
    pub hter_oracle: MeanStd,
    pub auc: MeanStd,
}

fn summarize(variant: Variant, leave_out: Option<String>, cells: &[&CellResult]) -> Summary {
    let col = |f: fn(&CellResult) -> f64| MeanStd::of(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
    Summary { variant, leave_out, hter: col(|c| c.hter), hter_oracle: col(|c| c.hter_oracle), auc: col(|c| c.auc) }
}

impl AblationResult {
    /// One row per (variant, leave-out), in first-appearance order.
    pub fn per_domain(&self) -> Vec<Summary> {
        let mut keys: Vec<(Variant, String)> = Vec::new();
        for c in &self.cells {
            let k = (c.variant, c.leave_out.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(v, d)| {
                let cells: Vec<&CellResult> =
                    self.cells.iter().filter(|c| c.variant == v && c.leave_out == d).collect();
                summarize(v, Some(d), &cells)
            })
            .collect()
    }

    /// Everything for `variant`, pooled over domains and seeds.
    pub fn pooled(&self, variant: Variant) -> Option<Summary> {
        let cells: Vec<&CellResult> = self.cells.iter().filter(|c| c.variant == variant).collect();
        (!cells.is_empty()).then(|| summarize(variant, None, &cells))
    }

    /// The comparison table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,leave_out,n_seeds,hter_mean,hter_std,hter_oracle_mean,hter_oracle_std,auc_mean,auc_std\n",
        );
        let mut rows = self.per_domain();
        rows.extend(Variant::ALL.iter().filter_map(|v| self.pooled(*v)));
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant,
                r.leave_out.as_deref().unwrap_or("all"),
                r.hter.n,
                r.hter.mean,
                r.hter.std,
                r.hter_oracle.mean,
                r.hter_oracle.std,
                r.auc.mean,
                r.auc.std
            ));
        }
        out
    }
}

/// The synthetic benchmark: the four default domains at a reduced resolution,
/// with a network sized so the full ablation fits a laptop-CPU budget.
pub fn benchmark_spec() -> SynthSpec {
    let mut spec = SynthSpec::default();
    spec.image_shape = [3, 8, 8];
    spec.depth_shape = [4, 4];
    spec
}

pub fn benchmark_net() -> NetConfig {
    NetConfig {
        preset: Preset::Desk,
        input_shape: [3, 8, 8],
        feature_blocks: vec![vec![4]],
        meta_layers: vec![MetaLayer { width: 8, pool: false }],
        depth_widths: vec![4],
        seed: 0,
    }
}

pub fn benchmark_meta() -> MetaConfig {
    MetaConfig { iters: 2000, alpha: 0.02, ..MetaConfig::default() }
}
