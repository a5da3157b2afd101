//! ROC, AUC, HTER and EER threshold on small hand-made score sets.
//!
//! ```text
//! cargo run --example metrics
//! ```

use metadg::metrics::{auc, auc_pairs, eer_threshold, hter, roc_curve, ScoreSet};

fn show(name: &str, pairs: &[(f64, u8)]) -> metadg::Result<()> {
    let s = ScoreSet::from_pairs(pairs)?;
    let roc = roc_curve(&s);
    let t = eer_threshold(&s);
    let (far, frr) = s.far_frr(t);
    println!("{name}");
    for p in &roc {
        println!("  threshold {:>5}  fpr {:.3}  tpr {:.3}", p.threshold, p.fpr, p.tpr);
    }
    println!(
        "  auc {:.4} (pairs {:.4})  eer threshold {t:.3}  far {far:.3}  frr {frr:.3}  hter {:.3}",
        auc(&roc),
        auc_pairs(&s),
        hter(&s, t)
    );
    Ok(())
}

fn main() -> metadg::Result<()> {
    show("separated", &[(0.9, 1), (0.8, 1), (0.4, 0), (0.1, 0)])?;
    show("crossed", &[(0.9, 1), (0.2, 1), (0.8, 0), (0.1, 0)])?;
    show("tied", &[(0.6, 1), (0.4, 0), (0.4, 1), (0.6, 0)])?;
    show("overlapping", &[(0.1, 0), (0.3, 1), (0.4, 0), (0.6, 1), (0.7, 0), (0.9, 1)])?;
    Ok(())
}
