//! ROC, AUC, HTER, threshold selection and class-activation maps.
//!
//! Scores are real-class probabilities: a sample is accepted as real when its
//! score is at or above the threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NetParams, Network};
use crate::tensor::{NdArray, ParamVars, Tensor};

/// Scores with binary labels (1 real, 0 attack).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    n_real: usize,
    n_fake: usize,
}

impl ScoreSet {
    /// Requires equal lengths, finite scores, labels in {0, 1} and both classes.
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Config(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("non-finite score {s}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Config(format!("label {l} is not 0 or 1")));
        }
        let n_real = labels.iter().filter(|&&l| l == 1).count();
        let n_fake = labels.len() - n_real;
        if n_real == 0 || n_fake == 0 {
            return Err(Error::SingleClass { n_real, n_fake });
        }
        Ok(ScoreSet { scores, labels, n_real, n_fake })
    }

    pub fn from_pairs(pairs: &[(f64, u8)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_fake(&self) -> usize {
        self.n_fake
    }

    /// Accepted attacks and rejected reals at `threshold`.
    fn error_counts(&self, threshold: f64) -> (usize, usize) {
        let mut fa = 0;
        let mut fr = 0;
        for (&s, &l) in self.scores.iter().zip(&self.labels) {
            match l {
                0 if s >= threshold => fa += 1,
                1 if s < threshold => fr += 1,
                _ => {}
            }
        }
        (fa, fr)
    }

    /// `(FAR, FRR)` at `threshold`.
    pub fn far_frr(&self, threshold: f64) -> (f64, f64) {
        let (fa, fr) = self.error_counts(threshold);
        (fa as f64 / self.n_fake as f64, fr as f64 / self.n_real as f64)
    }

    fn distinct_ascending(&self) -> Vec<f64> {
        let mut v = self.scores.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One point per distinct score used as threshold (descending), preceded by
/// `(0, 0)` at threshold `+inf`. The lowest score yields `(1, 1)`.
pub fn roc_curve(s: &ScoreSet) -> Vec<RocPoint> {
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = s.scores[order[k]];
        while k < order.len() && s.scores[order[k]] == t {
            if s.labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / s.n_fake as f64, tpr: tp as f64 / s.n_real as f64 });
    }
    points
}

/// Trapezoidal area under `curve`.
pub fn auc(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Probability that a random real outscores a random attack, ties counted half.
pub fn auc_pairs(s: &ScoreSet) -> f64 {
    let reals: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|p| *p.1 == 1).map(|p| *p.0).collect();
    let fakes: Vec<f64> = s.scores.iter().zip(&s.labels).filter(|p| *p.1 == 0).map(|p| *p.0).collect();
    let mut twice = 0u64;
    for r in &reals {
        for f in &fakes {
            twice += match r.total_cmp(f) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2.0 * reals.len() as f64 * fakes.len() as f64)
}

/// Half total error rate at `threshold`.
pub fn hter(s: &ScoreSet, threshold: f64) -> f64 {
    let (far, frr) = s.far_frr(threshold);
    (far + frr) / 2.0
}

/// Threshold among midpoints of adjacent distinct scores minimizing
/// `|FAR - FRR|`, lowest first on ties. With a single distinct score, that score.
pub fn eer_threshold(s: &ScoreSet) -> f64 {
    let distinct = s.distinct_ascending();
    if distinct.len() == 1 {
        return distinct[0];
    }
    let mut best = (u128::MAX, f64::NAN);
    for w in distinct.windows(2) {
        let t = w[0] + (w[1] - w[0]) / 2.0;
        let (fa, fr) = s.error_counts(t);
        // |fa/n_fake - fr/n_real| scaled by n_fake * n_real, compared exactly.
        let gap = (fa as i128 * s.n_real as i128 - fr as i128 * s.n_fake as i128).unsigned_abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// HTER at the threshold chosen on source-domain validation data.
    pub hter: f64,
    /// HTER at the test set's own EER threshold.
    pub hter_oracle: f64,
    pub auc: f64,
    /// Validation-set EER threshold used for `hter`.
    pub eer_threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

impl MetricsReport {
    /// Scores `test`, thresholding at the EER of `validation`.
    pub fn new(test: &ScoreSet, validation: &ScoreSet) -> Self {
        let threshold = eer_threshold(validation);
        let roc = roc_curve(test);
        MetricsReport {
            hter: hter(test, threshold),
            hter_oracle: hter(test, eer_threshold(test)),
            auc: auc(&roc),
            eer_threshold: threshold,
            n_real: test.n_real,
            n_fake: test.n_fake,
            roc,
        }
    }

    /// Writes `metrics.json` and `roc.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("roc.csv");
        fs::write(&path, roc_csv(&self.roc)).map_err(|e| Error::io(&path, e))
    }
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in curve {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr).expect("writing to a String");
    }
    out
}

/// Class-activation maps `sum_k w_k A_k` over the meta learner's last
/// convolution, one per sample of `x` (`[n, c, h, w]`), each min-max
/// normalized to `[0, 1]`. Constant maps come out as zeros.
pub fn attention_maps(net: &Network, params: &NetParams, x: &NdArray) -> Result<Vec<NdArray>> {
    let feats = net.feature_forward(&ParamVars::constants(&params.f), &Tensor::constant(x.clone()))?;
    let act = net.meta_activation(&ParamVars::constants(&params.m), &feats)?;
    let w = params.m.require("M.fc.weight")?;
    let s = act.shape();
    let (n, k, h, wd) = (s[0], s[1], s[2], s[3]);
    if w.len() != k {
        return Err(Error::shape("attention_map", format!("fc weight {:?} vs {k} channels", w.shape())));
    }
    let a = act.value().data();
    (0..n)
        .map(|i| {
            let mut map = vec![0.0; h * wd];
            for (c, &wc) in w.data().iter().enumerate() {
                let plane = &a[(i * k + c) * h * wd..][..h * wd];
                for (m, v) in map.iter_mut().zip(plane) {
                    *m += wc * v;
                }
            }
            NdArray::new(vec![h, wd], min_max(map))
        })
        .collect()
}

/// Attention map of a single `[c, h, w]` sample.
pub fn attention_map(net: &Network, params: &NetParams, x: &NdArray) -> Result<NdArray> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.clone().reshaped(&shape)?;
    Ok(attention_maps(net, params, &batch)?.remove(0))
}

fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
    v
}

/// ASCII PGM (P2) with maximum value 255 for a `[h, w]` map in `[0, 1]`.
pub fn pgm(map: &NdArray) -> Result<String> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("pgm", format!("need a 2-D map, got {s:?}")));
    }
    let mut out = format!("P2\n{} {}\n255\n", s[1], s[0]);
    for row in map.data().chunks(s[1]) {
        let line: Vec<String> = row.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}
