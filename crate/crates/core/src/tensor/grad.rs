use std::collections::HashMap;

use super::{NdArray, OpKind, ParamSet, ParamVars, Tape, Tensor};
use crate::error::{Error, Result};

/// Restores the tape's recording flag on drop.
struct RecordingGuard<'a> {
    tape: &'a Tape,
    prev: bool,
}

impl Drop for RecordingGuard<'_> {
    fn drop(&mut self) {
        self.tape.set_recording(self.prev);
    }
}

/// Gradients of the scalar `loss` with respect to every tensor in `wrt`.
///
/// With `create_graph`, the backward pass is recorded on the tape and the
/// returned gradients are themselves differentiable. Tensors in `wrt` that
/// the loss does not depend on get exact zeros.
pub fn backward_grad(loss: &Tensor, wrt: &ParamVars, create_graph: bool) -> Result<ParamVars> {
    if loss.value().len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let zeros_for = |wrt: &ParamVars| -> ParamVars {
        wrt.iter().map(|(k, t)| (k.clone(), Tensor::constant(NdArray::zeros(t.shape())))).collect()
    };
    let Some(loss_id) = loss.node_id() else {
        // A constant loss still requires the wrt tensors to be real tape nodes.
        if let Some((name, _)) = wrt.iter().find(|(_, t)| t.node_id().is_none()) {
            return Err(Error::NotOnTape(name.clone()));
        }
        return Ok(zeros_for(wrt));
    };
    let tape = loss.tape().expect("tape node has a tape").clone();

    let mut targets: HashMap<usize, Vec<&String>> = HashMap::new();
    for (name, t) in wrt {
        match t.tape() {
            Some(tp) if tp.same(&tape) => {
                targets.entry(t.node_id().expect("tape tensor has id")).or_default().push(name)
            }
            _ => return Err(Error::NotOnTape(name.clone())),
        }
    }

    // Only nodes that depend on some target need gradients.
    let mut relevant = vec![false; loss_id + 1];
    for (id, rel) in relevant.iter_mut().enumerate() {
        if targets.contains_key(&id) {
            *rel = true;
        }
    }
    for id in 0..=loss_id {
        if relevant[id] {
            continue;
        }
        let node = tape.node(id);
        relevant[id] = node.inputs.iter().any(|i| i.id.is_some_and(|j| relevant[j]));
    }

    let _guard = RecordingGuard { tape: &tape, prev: tape.set_recording(create_graph) };

    let mut grads: Vec<Option<Tensor>> = vec![None; loss_id + 1];
    grads[loss_id] = Some(Tensor::constant(NdArray::full(loss.shape(), 1.0)));
    let mut found: HashMap<usize, Tensor> = HashMap::new();

    for id in (0..=loss_id).rev() {
        if !relevant[id] {
            continue;
        }
        let Some(gy) = grads[id].take() else { continue };
        if targets.contains_key(&id) {
            found.insert(id, gy.clone());
        }
        let node = tape.node(id);
        if matches!(node.op, OpKind::Leaf) {
            continue;
        }
        if !node.inputs.iter().any(|i| i.id.is_some_and(|j| relevant[j])) {
            continue;
        }
        let inputs: Vec<Tensor> = node.inputs.iter().map(|i| Tensor::from_node(&tape, i.id, i.value.clone())).collect();
        let out = Tensor::from_node(&tape, Some(id), node.output.clone());
        let vjps = node.op.vjp(&inputs, &out, &gy)?;
        for (input, g) in node.inputs.iter().zip(vjps) {
            let (Some(j), Some(g)) = (input.id, g) else { continue };
            if !relevant[j] {
                continue;
            }
            grads[j] = Some(match grads[j].take() {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
    }

    let mut out = ParamVars::new();
    for (name, t) in wrt {
        let id = t.node_id().expect("checked above");
        let g = match found.get(&id) {
            Some(g) => g.clone(),
            None => Tensor::constant(NdArray::zeros(t.shape())),
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.require(name)?.len();
        for i in 0..n {
            let orig = params.require(name)?.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            for v in [plus, minus] {
                if !v.is_finite() {
                    return Err(Error::NonFinite { param: name.clone(), value: v });
                }
            }
            out.get_mut(name).expect("zeros_like").data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest coordinatewise [`relative_error`] between two sets with matching
/// names and shapes.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, va) in a {
        let vb = b.require(name)?;
        if va.shape() != vb.shape() {
            return Err(Error::shape("max_relative_error", format!("`{name}`: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            worst = worst.max(relative_error(x, y, floor));
        }
    }
    Ok(worst)
}
