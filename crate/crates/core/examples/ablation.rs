//! Runs the full leave-one-domain-out comparison of every training variant on
//! the synthetic benchmark and prints the per-domain and pooled table.
//!
//! ```text
//! cargo run --release --example ablation -- [seeds] [out_dir]
//! ```

use std::time::Instant;

use metadg::datagen::synth_domains;
use metadg::metalearn::Variant;
use metadg::protocol::{benchmark_meta, benchmark_net, benchmark_spec, run_ablation, AblationPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = args.next();

    let domains = synth_domains(&benchmark_spec())?;
    let plan = AblationPlan { seeds, ..AblationPlan::default() };
    let start = Instant::now();
    let result = run_ablation(&benchmark_net(), &benchmark_meta(), &domains, &plan, |c| {
        eprintln!("{:<12} {:<8} seed {:>2}  hter {:.4}  auc {:.4}", c.variant, c.leave_out, c.seed, c.hter, c.auc);
    })?;
    eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());

    print!("{}", result.to_csv());
    println!("dataset sha256 {}", result.dataset_sha256);
    for v in Variant::ALL {
        if let Some(s) = result.pooled(v) {
            println!("{v:<12} hter {:.4} ± {:.4}   auc {:.4} ± {:.4}", s.hter.mean, s.hter.std, s.auc.mean, s.auc.std);
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(format!("{dir}/ablation.csv"), result.to_csv())?;
        std::fs::write(format!("{dir}/cells.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(())
}
