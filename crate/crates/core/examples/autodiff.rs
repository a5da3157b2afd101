//! Gradients of gradients on the tape, and the per-operator finite-difference
//! suite.
//!
//! ```text
//! cargo run --release --example autodiff
//! ```

use metadg::tensor::{backward_grad, NdArray, ParamSet, Tape};
use metadg::verify::{autodiff, OP_INSTANCES};

fn main() -> metadg::Result<()> {
    // d/dtheta of L(theta - alpha * dL/dtheta) with L = theta^2 / 2
    let (theta, alpha) = (2.0, 0.1);
    let mut params = ParamSet::new();
    params.insert("theta", NdArray::scalar(theta));
    let tape = Tape::new();
    let vars = tape.watch(&params);
    let t = vars.require("theta")?;
    let inner = t.square().scale(0.5);
    let g = backward_grad(&inner, &vars, true)?;
    let updated = t.sub(&g.require("theta")?.scale(alpha))?;
    let outer = updated.square().scale(0.5);
    let meta = backward_grad(&outer, &vars, false)?;
    println!(
        "meta-gradient {:.6} (closed form {:.6})",
        meta.require("theta")?.item(),
        theta * (1.0 - alpha) * (1.0 - alpha)
    );

    println!("\n{OP_INSTANCES} random instances per operator:");
    for check in autodiff::op_gradient_checks(OP_INSTANCES)? {
        println!("{check}");
    }
    println!("{}", autodiff::second_order_check()?);
    Ok(())
}
