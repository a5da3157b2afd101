use serde::{Deserialize, Serialize};

use super::OptimizerKind;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer moments. `first` and `second` are empty for plain SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

/// Serializable header for an [`OptState`]; the moments live in binary blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct OptHeader {
    pub kind: OptimizerKind,
    pub step: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Adam => (params.zeros_like(), params.zeros_like()),
            OptimizerKind::Sgd => (ParamSet::new(), ParamSet::new()),
        };
        OptState { kind, step: 0, first, second }
    }

    /// Returns updated parameters; rejects gradients with non-finite entries.
    pub fn apply(&mut self, params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        for (name, g) in grads {
            if let Some(&bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { param: name.clone(), value: bad });
            }
        }
        self.step += 1;
        let mut out = params.clone();
        for (name, p) in out.iter_mut() {
            let g = grads.require(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer", format!("`{name}`: {:?} vs {:?}", p.shape(), g.shape())));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.step as i32;
                    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
                    let m = self.first.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                    let v = self.second.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                    for (((pv, gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn header(&self) -> OptHeader {
        OptHeader { kind: self.kind, step: self.step }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NdArray;

    fn set(v: &[f64]) -> ParamSet {
        [("w".to_string(), NdArray::from_vec(v.to_vec()))].into_iter().collect()
    }

    #[test]
    fn sgd_step_is_literal() {
        let p = set(&[1.0, -2.0]);
        let mut opt = OptState::new(OptimizerKind::Sgd, &p);
        let out = opt.apply(&p, &set(&[0.5, 4.0]), 0.1).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 4.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = set(&[1.0, -2.0]);
        let mut opt = OptState::new(OptimizerKind::Adam, &p);
        let out = opt.apply(&p, &set(&[0.5, -4.0]), 0.01).unwrap();
        let d = out.get("w").unwrap().data();
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((d[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let p = set(&[1.0]);
        let mut opt = OptState::new(OptimizerKind::Adam, &p);
        let err = opt.apply(&p, &set(&[f64::NAN]), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(opt.step, 0);
    }
}
