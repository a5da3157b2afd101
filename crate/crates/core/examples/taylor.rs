//! How the meta-objective departs from plain joint training as the inner
//! step grows: the first-order expansion residual and the gap between
//! second- and first-order meta-gradients.
//!
//! ```text
//! cargo run --release --example taylor
//! ```

use metadg::metalearn::loglog_slope;
use metadg::verify::fixtures::micro_setup;
use metadg::verify::meta::{order_gap, taylor_residuals, TAYLOR_ALPHAS};

fn main() -> metadg::Result<()> {
    let s = micro_setup(0)?;
    let residuals = taylor_residuals(&s)?;
    println!("alpha       expansion residual");
    for (a, r) in TAYLOR_ALPHAS.iter().zip(&residuals) {
        println!("{a:<10.2e}  {r:.3e}");
    }
    println!("log-log slope {:.3}", loglog_slope(&TAYLOR_ALPHAS, &residuals)?);

    println!("\nalpha       |g2 - g1| / |g2|");
    for alpha in [1e-6, 1e-4, 1e-2, 1e-1] {
        println!("{alpha:<10.0e}  {:.3e}", order_gap(&s, alpha)?);
    }
    Ok(())
}
