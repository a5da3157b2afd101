use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training strategy; everything except `Finegrained` is an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One inner update and one meta-test term per meta-train domain,
    /// differentiated through the inner update.
    Finegrained,
    /// Meta-train batches pooled into one, single inner update.
    Aggregated,
    /// Finegrained, with the inner-update gradient held constant.
    FirstOrder,
    /// Plain joint training on every domain, no inner update.
    Erm,
    /// Finegrained without depth supervision.
    Noreg,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Finegrained, Variant::Aggregated, Variant::FirstOrder, Variant::Erm, Variant::Noreg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Finegrained => "finegrained",
            Variant::Aggregated => "aggregated",
            Variant::FirstOrder => "first_order",
            Variant::Erm => "erm",
            Variant::Noreg => "noreg",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner (meta-train) step size.
    pub alpha: f64,
    /// Outer (meta-optimization) step size.
    pub beta: f64,
    pub batch_per_domain: usize,
    pub iters: u64,
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    pub depth_weight: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 1e-3,
            beta: 1e-3,
            batch_per_domain: 20,
            iters: 2000,
            variant: Variant::Finegrained,
            optimizer: OptimizerKind::Adam,
            depth_weight: 1.0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be finite and > 0, got {}", self.beta));
        }
        if !(self.depth_weight >= 0.0) || !self.depth_weight.is_finite() {
            return bad(format!("depth_weight must be finite and >= 0, got {}", self.depth_weight));
        }
        if self.batch_per_domain == 0 || !self.batch_per_domain.is_multiple_of(2) {
            return bad(format!("batch_per_domain must be positive and even, got {}", self.batch_per_domain));
        }
        Ok(())
    }

    /// Depth weight actually applied by the variant.
    pub fn effective_depth_weight(&self) -> f64 {
        match self.variant {
            Variant::Noreg => 0.0,
            _ => self.depth_weight,
        }
    }
}
