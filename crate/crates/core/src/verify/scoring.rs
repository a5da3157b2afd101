use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Check};
use crate::error::Result;
use crate::metrics::{auc, auc_pairs, hter, roc_curve, ScoreSet};

/// Largest gap between trapezoidal and pair-counting AUC over `sets` random
/// score sets drawn on a coarse grid, so ties are frequent.
pub fn auc_agreement_check(sets: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let n = rng.gen_range(2..40);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) / 8.0).collect();
        let s = ScoreSet::new(scores, labels)?;
        worst = worst.max((auc(&roc_curve(&s)) - auc_pairs(&s)).abs());
    }
    Ok(Check::new("metrics/auc_trapezoid_vs_pairs", worst, Bound::Below(1e-12)))
}

pub fn hter_example_checks() -> Result<Vec<Check>> {
    let separated = ScoreSet::from_pairs(&[(0.9, 1), (0.7, 1), (0.3, 0), (0.1, 0)])?;
    let mixed = ScoreSet::from_pairs(&[(0.9, 1), (0.2, 1), (0.8, 0), (0.1, 0)])?;
    Ok(vec![
        Check::new("metrics/hter_separated", hter(&separated, 0.5), Bound::Equal(0.0)),
        Check::new("metrics/hter_below_all", hter(&separated, 0.0), Bound::Equal(0.5)),
        Check::new("metrics/hter_mixed", hter(&mixed, 0.5), Bound::Equal(0.5)),
    ])
}
