//! Numerical self-checks of the autodiff engine, the meta-gradient and the metrics.
//!
//! Every check reports the measured value next to the bound it must satisfy,
//! so a failure says by how much it missed.

pub mod autodiff;
pub mod fixtures;
pub mod meta;
pub mod scoring;

use std::fmt;

use serde::Serialize;

use crate::error::Result;

/// Random instances per operator in the gradient suite.
pub const OP_INSTANCES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Bound {
    Below(f64),
    Above(f64),
    /// Inclusive range.
    Within(f64, f64),
    /// Outside the inclusive range.
    Outside(f64, f64),
    Equal(f64),
}

impl Bound {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Bound::Below(max) => v < max,
            Bound::Above(min) => v > min,
            Bound::Within(lo, hi) => (lo..=hi).contains(&v),
            Bound::Outside(lo, hi) => !(lo..=hi).contains(&v) && !v.is_nan(),
            Bound::Equal(value) => v == value,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Below(max) => write!(f, "< {max:e}"),
            Bound::Above(min) => write!(f, "> {min:e}"),
            Bound::Within(lo, hi) => write!(f, "in [{lo}, {hi}]"),
            Bound::Outside(lo, hi) => write!(f, "outside [{lo}, {hi}]"),
            Bound::Equal(value) => write!(f, "== {value}"),
        }
    }
}

/// A named measurement and the bound it must meet.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Check { name: name.into(), value, bound, pass: bound.holds(value) }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<32} {:>12.4e}  ({})", self.name, self.value, self.bound)
    }
}

/// Runs every check in a fixed order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut checks = autodiff::op_gradient_checks(OP_INSTANCES)?;
    checks.push(autodiff::second_order_check()?);
    checks.extend(meta::meta_gradient_checks()?);
    checks.extend(meta::taylor_checks()?);
    checks.extend(meta::order_checks()?);
    checks.extend(meta::isolation_checks()?);
    checks.push(meta::sgd_literal_check()?);
    checks.push(scoring::auc_agreement_check(1000)?);
    checks.extend(scoring::hter_example_checks()?);
    Ok(checks)
}
