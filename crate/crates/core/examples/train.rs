//! Trains one variant on three synthetic domains and scores the fourth.
//!
//! ```text
//! cargo run --release --example train -- [variant] [leave_out] [iters]
//! ```

use metadg::datagen::synth_domains;
use metadg::metalearn::{train_until, MetaConfig, TrainState, Variant};
use metadg::nets::Network;
use metadg::protocol::{benchmark_meta, benchmark_net, benchmark_spec, evaluate, leave_one_out};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("finegrained").parse()?;
    let leave_out = args.next().unwrap_or_else(|| "studio".into());
    let iters = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);

    let domains = synth_domains(&benchmark_spec())?;
    let split = leave_one_out(&domains, &leave_out)?;
    let net = Network::new(benchmark_net())?;
    let cfg = MetaConfig { variant, iters, ..benchmark_meta() };
    let mut state = TrainState::new(&net, &cfg);
    println!("{variant} on {} parameters, holding out {leave_out}", net.config().param_count());
    train_until(&net, &mut state, &split.train, &cfg, |_, s| {
        if s.iter % 200 == 0 {
            println!(
                "iter {:>5}  objective {:.4}  cls {:.4}  depth {:.4}",
                s.iter, s.objective, s.cls_objective, s.depth_objective
            );
        }
        Ok(())
    })?;
    let report = evaluate(&net, &state.params, &split.validation, &split.target)?;
    println!(
        "{leave_out}: hter {:.4} at validation threshold {:.4}, oracle hter {:.4}, auc {:.4}",
        report.hter, report.eer_threshold, report.hter_oracle, report.auc
    );
    Ok(())
}
