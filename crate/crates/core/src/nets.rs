//! The three-part network: feature extractor `F`, meta learner `M` and depth
//! estimator `D`, written as pure functions of their parameter sets.
//!
//! Every 3x3 convolution except the final depth projection is followed by
//! per-batch standardization and a ReLU. Standardized convolutions carry no
//! bias since the standardization would cancel it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NdArray, ParamSet, ParamVars, Tensor};

/// Variance floor inside per-batch standardization.
pub const STD_EPS: f64 = 1e-5;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

/// One convolution of the meta learner, optionally followed by 2x2 pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaLayer {
    pub width: usize,
    #[serde(default)]
    pub pool: bool,
}

/// Architecture description. Fields left out of a JSON config fall back to
/// the chosen preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NetConfigSpec")]
pub struct NetConfig {
    pub preset: Preset,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    /// Convolution widths of each feature block; every block ends in a 2x2 pool.
    pub feature_blocks: Vec<Vec<usize>>,
    pub meta_layers: Vec<MetaLayer>,
    /// Hidden widths of the depth estimator before its 1-channel output conv.
    pub depth_widths: Vec<usize>,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetConfigSpec {
    #[serde(default = "default_preset")]
    preset: Preset,
    input_shape: Option<[usize; 3]>,
    feature_blocks: Option<Vec<Vec<usize>>>,
    meta_layers: Option<Vec<MetaLayer>>,
    depth_widths: Option<Vec<usize>>,
    #[serde(default)]
    seed: u64,
}

fn default_preset() -> Preset {
    Preset::Desk
}

impl From<NetConfigSpec> for NetConfig {
    fn from(s: NetConfigSpec) -> Self {
        let base = match s.preset {
            Preset::Desk => NetConfig::desk(),
            Preset::Paper => NetConfig::paper(),
        };
        NetConfig {
            preset: s.preset,
            input_shape: s.input_shape.unwrap_or(base.input_shape),
            feature_blocks: s.feature_blocks.unwrap_or(base.feature_blocks),
            meta_layers: s.meta_layers.unwrap_or(base.meta_layers),
            depth_widths: s.depth_widths.unwrap_or(base.depth_widths),
            seed: s.seed,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// Two blocks of widths 32/64 on 3x32x32 input; 8x8 depth maps.
    pub fn desk() -> Self {
        NetConfig {
            preset: Preset::Desk,
            input_shape: [3, 32, 32],
            feature_blocks: vec![vec![32, 32], vec![64, 64]],
            meta_layers: vec![MetaLayer { width: 64, pool: false }],
            depth_widths: vec![32],
            seed: 0,
        }
    }

    /// Full-size network on 6x256x256 RGB+HSV input; 32x32 depth maps.
    pub fn paper() -> Self {
        NetConfig {
            preset: Preset::Paper,
            input_shape: [6, 256, 256],
            feature_blocks: vec![vec![64, 128, 196, 128], vec![128, 196, 128], vec![128, 196, 128]],
            meta_layers: vec![
                MetaLayer { width: 128, pool: true },
                MetaLayer { width: 256, pool: true },
                MetaLayer { width: 512, pool: false },
            ],
            depth_widths: vec![128, 64],
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `[h, w]` of the depth map, i.e. the spatial size after the last feature block.
    pub fn depth_map_size(&self) -> [usize; 2] {
        let f = 1usize << self.feature_blocks.len();
        [self.input_shape[1] / f, self.input_shape[2] / f]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.feature_blocks.is_empty() || self.feature_blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return bad("feature blocks must be non-empty with positive widths".into());
        }
        if self.meta_layers.is_empty() || self.meta_layers.iter().any(|l| l.width == 0) {
            return bad("meta learner needs at least one layer of positive width".into());
        }
        if self.depth_widths.contains(&0) {
            return bad("depth widths must be positive".into());
        }
        let f = 1usize << self.feature_blocks.len();
        let mut side = [self.input_shape[1], self.input_shape[2]];
        if side.iter().any(|s| s % f != 0) {
            return bad(format!(
                "input {:?} not divisible by {f} for {} pooled blocks",
                self.input_shape,
                self.feature_blocks.len()
            ));
        }
        side = [side[0] / f, side[1] / f];
        for l in &self.meta_layers {
            if l.pool {
                if side.iter().any(|s| s % 2 != 0) {
                    return bad(format!("meta learner pools an odd map {side:?}"));
                }
                side = [side[0] / 2, side[1] / 2];
            }
        }
        match self.preset {
            Preset::Paper if self.input_shape != [6, 256, 256] => {
                bad(format!("paper preset fixes input 6x256x256, got {:?}", self.input_shape))
            }
            _ => Ok(()),
        }
    }

    fn skip_channels(&self) -> usize {
        self.feature_blocks.iter().map(|b| *b.last().expect("validated")).sum()
    }

    /// Parameter count by construction: `9·in·out + 2·out` per standardized
    /// conv, `9·in + 1` for the depth output, `width + 1` for the fc.
    pub fn param_count(&self) -> usize {
        let std_conv = |cin: usize, cout: usize| KERNEL * KERNEL * cin * cout + 2 * cout;
        let mut total = 0;
        let mut cin = self.input_shape[0];
        for block in &self.feature_blocks {
            for &w in block {
                total += std_conv(cin, w);
                cin = w;
            }
        }
        for l in &self.meta_layers {
            total += std_conv(cin, l.width);
            cin = l.width;
        }
        total += cin + 1;
        cin = self.skip_channels();
        for &w in &self.depth_widths {
            total += std_conv(cin, w);
            cin = w;
        }
        total + KERNEL * KERNEL * cin + 1
    }
}

/// Parameters of the three modules, in disjoint name spaces `F.`, `M.`, `D.`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub f: ParamSet,
    pub m: ParamSet,
    pub d: ParamSet,
}

impl NetParams {
    /// All parameters in one set.
    pub fn merged(&self) -> ParamSet {
        let mut all = self.f.clone();
        all.extend_disjoint(self.m.clone()).expect("disjoint prefixes");
        all.extend_disjoint(self.d.clone()).expect("disjoint prefixes");
        all
    }

    /// Splits a merged set by name prefix.
    pub fn split(all: &ParamSet) -> Self {
        NetParams { f: all.with_prefix("F."), m: all.with_prefix("M."), d: all.with_prefix("D.") }
    }

    pub fn num_values(&self) -> usize {
        self.f.num_values() + self.m.num_values() + self.d.num_values()
    }
}

/// Feature extractor outputs.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    /// Output of the last feature block; input to the meta learner.
    pub pool1: Tensor,
    /// Every block's pooled output, downsampled to the last block's size and
    /// concatenated along channels; input to the depth estimator.
    pub skip: Tensor,
}

/// A network architecture bound to its configuration.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
}

fn conv_name(prefix: &str, idx: usize) -> String {
    format!("{prefix}conv{idx}")
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Network { cfg })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Weights ~ N(0, 2/fan_in), biases and shifts zero, gains one.
    pub fn init_params(&self) -> NetParams {
        let mut shapes: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let std_conv = |prefix: &str, cin: usize, cout: usize, shapes: &mut Vec<_>| {
            shapes.push((format!("{prefix}.weight"), vec![cout, cin, KERNEL, KERNEL], Init::He(cin * KERNEL * KERNEL)));
            shapes.push((format!("{prefix}.gamma"), vec![cout], Init::One));
            shapes.push((format!("{prefix}.beta"), vec![cout], Init::Zero));
        };
        let mut cin = self.cfg.input_shape[0];
        for (b, block) in self.cfg.feature_blocks.iter().enumerate() {
            for (j, &w) in block.iter().enumerate() {
                std_conv(&conv_name(&format!("F.block{}.", b + 1), j + 1), cin, w, &mut shapes);
                cin = w;
            }
        }
        for (j, l) in self.cfg.meta_layers.iter().enumerate() {
            std_conv(&conv_name("M.", j + 1), cin, l.width, &mut shapes);
            cin = l.width;
        }
        shapes.push(("M.fc.weight".into(), vec![cin, 1], Init::He(cin)));
        shapes.push(("M.fc.bias".into(), vec![1], Init::Zero));
        cin = self.cfg.skip_channels();
        for (j, &w) in self.cfg.depth_widths.iter().enumerate() {
            std_conv(&conv_name("D.", j + 1), cin, w, &mut shapes);
            cin = w;
        }
        shapes.push(("D.out.weight".into(), vec![1, cin, KERNEL, KERNEL], Init::He(cin * KERNEL * KERNEL)));
        shapes.push(("D.out.bias".into(), vec![1], Init::Zero));

        // Draw in lexicographic name order so the stream is tied to names, not construction order.
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let all: ParamSet = shapes
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Zero => NdArray::zeros(&shape),
                    Init::One => NdArray::full(&shape, 1.0),
                    Init::He(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        let n = shape.iter().product();
                        NdArray::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
                    }
                };
                (name, value)
            })
            .collect();
        NetParams::split(&all)
    }

    fn std_conv(params: &ParamVars, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = params.require(&format!("{prefix}.weight"))?;
        let gamma = params.require(&format!("{prefix}.gamma"))?;
        let beta = params.require(&format!("{prefix}.beta"))?;
        Ok(x.conv2d(w, 1)?.standardize(gamma, beta, STD_EPS)?.relu())
    }

    /// Runs `F` on an `[n, c, h, w]` batch.
    pub fn feature_forward(&self, theta_f: &ParamVars, x: &Tensor) -> Result<FeatureMaps> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.cfg.input_shape[..] || s[0] == 0 {
            return Err(Error::shape(
                "feature_forward",
                format!("input {s:?} does not match [n, {:?}]", self.cfg.input_shape),
            ));
        }
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.cfg.feature_blocks.len());
        for (b, block) in self.cfg.feature_blocks.iter().enumerate() {
            for j in 0..block.len() {
                h = Self::std_conv(theta_f, &conv_name(&format!("F.block{}.", b + 1), j + 1), &h)?;
            }
            h = h.max_pool2()?;
            stages.push(h.clone());
        }
        let blocks = stages.len();
        let mut resized = Vec::with_capacity(blocks);
        for (b, stage) in stages.iter().enumerate() {
            let mut t = stage.clone();
            for _ in b + 1..blocks {
                t = t.max_pool2()?;
            }
            resized.push(t);
        }
        let refs: Vec<&Tensor> = resized.iter().collect();
        let skip = Tensor::concat_channels(&refs)?;
        Ok(FeatureMaps { pool1: h, skip })
    }

    /// Output of the meta learner's last convolution layer, before global pooling.
    pub fn meta_activation(&self, theta_m: &ParamVars, f: &FeatureMaps) -> Result<Tensor> {
        let mut h = f.pool1.clone();
        for (j, l) in self.cfg.meta_layers.iter().enumerate() {
            h = Self::std_conv(theta_m, &conv_name("M.", j + 1), &h)?;
            if l.pool {
                h = h.max_pool2()?;
            }
        }
        Ok(h)
    }

    /// Real-class probability per sample, shape `[n]`.
    pub fn classify(&self, theta_m: &ParamVars, f: &FeatureMaps) -> Result<Tensor> {
        let act = self.meta_activation(theta_m, f)?;
        let n = act.shape()[0];
        let logits = act.global_avg_pool()?.matmul(theta_m.require("M.fc.weight")?)?;
        let logits = add_row_bias(&logits, theta_m.require("M.fc.bias")?)?;
        logits.sigmoid().reshape(&[n])
    }

    /// Depth map per sample, shape `[n, 1, h_d, w_d]`.
    pub fn estimate_depth(&self, theta_d: &ParamVars, f: &FeatureMaps) -> Result<Tensor> {
        let s = f.skip.shape();
        let [hd, wd] = self.cfg.depth_map_size();
        if s.len() != 4 || s[1] != self.cfg.skip_channels() || s[2] != hd || s[3] != wd {
            return Err(Error::shape(
                "estimate_depth",
                format!("skip features {s:?}, expected [n, {}, {hd}, {wd}]", self.cfg.skip_channels()),
            ));
        }
        let mut h = f.skip.clone();
        for j in 0..self.cfg.depth_widths.len() {
            h = Self::std_conv(theta_d, &conv_name("D.", j + 1), &h)?;
        }
        let out = h.conv2d(theta_d.require("D.out.weight")?, 1)?;
        let shape = out.shape().to_vec();
        out.add(&theta_d.require("D.out.bias")?.channel_broadcast(&shape)?)
    }

    /// Scores a batch without recording anything.
    pub fn score(&self, params: &NetParams, x: &NdArray) -> Result<Vec<f64>> {
        let f = self.feature_forward(&ParamVars::constants(&params.f), &Tensor::constant(x.clone()))?;
        Ok(self.classify(&ParamVars::constants(&params.m), &f)?.value().data().to_vec())
    }
}

enum Init {
    Zero,
    One,
    He(usize),
}

/// Adds a per-column bias `[k]` to an `[n, k]` matrix.
fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let as4 = x.reshape(&[n, k, 1, 1])?;
    as4.add(&bias.channel_broadcast(&[n, k, 1, 1])?)?.reshape(&[n, k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward_grad, Tape};
    use rand::Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::constant(NdArray::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap())
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let net = Network::new(NetConfig::desk().with_seed(9)).unwrap();
        let (a, b) = (net.init_params(), net.init_params());
        assert_eq!(a, b);
        let all = a.merged();
        for (name, v) in &all {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(v.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let other = Network::new(NetConfig::desk().with_seed(10)).unwrap().init_params();
        assert_ne!(a, other);
    }

    #[test]
    fn desk_param_count_matches_closed_form() {
        let cfg = NetConfig::desk();
        // F: (3*9*32 + 64) + (32*9*32 + 64) + (32*9*64 + 128) + (64*9*64 + 128)
        // M: (64*9*64 + 128) + 64 + 1;  D: (96*9*32 + 64) + (32*9 + 1)
        let by_hand =
            (864 + 64) + (9216 + 64) + (18432 + 128) + (36864 + 128) + (36864 + 128) + 65 + (27648 + 64) + 289;
        assert_eq!(cfg.param_count(), by_hand);
        assert_eq!(Network::new(cfg).unwrap().init_params().num_values(), by_hand);
    }

    #[test]
    fn namespaces_are_disjoint() {
        let p = Network::new(NetConfig::desk()).unwrap().init_params();
        assert!(p.f.names().all(|n| n.starts_with("F.")));
        assert!(p.m.names().all(|n| n.starts_with("M.")));
        assert!(p.d.names().all(|n| n.starts_with("D.")));
        assert_eq!(p.merged().len(), p.f.len() + p.m.len() + p.d.len());
    }

    #[test]
    fn desk_shapes() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let p = net.init_params();
        let f = net.feature_forward(&ParamVars::constants(&p.f), &rand_input(&[2, 3, 32, 32], 1)).unwrap();
        assert_eq!(f.pool1.shape(), &[2, 64, 8, 8]);
        assert_eq!(f.skip.shape(), &[2, 96, 8, 8]);
        let probs = net.classify(&ParamVars::constants(&p.m), &f).unwrap();
        assert_eq!(probs.shape(), &[2]);
        assert!(probs.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let depth = net.estimate_depth(&ParamVars::constants(&p.d), &f).unwrap();
        assert_eq!(depth.shape(), &[2, 1, 8, 8]);
        assert_eq!(net.config().depth_map_size(), [8, 8]);
    }

    #[test]
    fn batch_of_one_works() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let p = net.init_params();
        let s = net.score(&p, rand_input(&[1, 3, 32, 32], 2).value()).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let p = net.init_params();
        let err = net.feature_forward(&ParamVars::constants(&p.f), &rand_input(&[1, 3, 16, 16], 0));
        assert!(matches!(err, Err(Error::Shape { op: "feature_forward", .. })));
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let mut p = net.init_params();
        for params in [&mut p.f, &mut p.d] {
            for (_, v) in params.iter_mut() {
                v.data_mut().fill(0.0);
            }
        }
        let x = Tensor::constant(NdArray::zeros(&[2, 3, 32, 32]));
        let f = net.feature_forward(&ParamVars::constants(&p.f), &x).unwrap();
        assert!(f.pool1.value().data().iter().all(|&v| v == 0.0));
        let d = net.estimate_depth(&ParamVars::constants(&p.d), &f).unwrap();
        assert!(d.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_fc_gives_half() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let mut p = net.init_params();
        p.m.get_mut("M.fc.weight").unwrap().data_mut().fill(0.0);
        let s = net.score(&p, rand_input(&[3, 3, 32, 32], 4).value()).unwrap();
        assert!(s.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_pure() {
        let net = Network::new(NetConfig::desk()).unwrap();
        let p = net.init_params();
        let x = rand_input(&[2, 3, 32, 32], 8);
        let a = net.score(&p, x.value()).unwrap();
        let b = net.score(&p, x.value()).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn classifier_and_depth_paths_are_separate() {
        let cfg = NetConfig {
            input_shape: [3, 8, 8],
            feature_blocks: vec![vec![2], vec![3]],
            meta_layers: vec![MetaLayer { width: 2, pool: false }],
            depth_widths: vec![2],
            ..NetConfig::desk()
        };
        let net = Network::new(cfg).unwrap();
        let p = net.init_params();
        let tape = Tape::new();
        let (f, m, d) = (tape.watch(&p.f), tape.watch(&p.m), tape.watch(&p.d));
        let feats = net.feature_forward(&f, &rand_input(&[2, 3, 8, 8], 3)).unwrap();
        let cls = net.classify(&m, &feats).unwrap().sum();
        let dep = net.estimate_depth(&d, &feats).unwrap().square().sum();
        let g = backward_grad(&cls, &d, false).unwrap().values();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        let g = backward_grad(&dep, &m, false).unwrap().values();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_size_heads_on_synthetic_features() {
        let net = Network::new(NetConfig::paper()).unwrap();
        let p = net.init_params();
        let f = FeatureMaps { pool1: rand_input(&[1, 128, 32, 32], 5), skip: rand_input(&[1, 384, 32, 32], 6) };
        let probs = net.classify(&ParamVars::constants(&p.m), &f).unwrap();
        assert_eq!(probs.shape(), &[1]);
        let depth = net.estimate_depth(&ParamVars::constants(&p.d), &f).unwrap();
        assert_eq!(depth.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn full_size_config_rejects_other_inputs() {
        let cfg = NetConfig { input_shape: [3, 256, 256], ..NetConfig::paper() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_falls_back_to_preset() {
        let cfg: NetConfig = serde_json::from_str(r#"{"preset":"desk","feature_blocks":[[4],[8]],"seed":3}"#).unwrap();
        assert_eq!(cfg.input_shape, [3, 32, 32]);
        assert_eq!(cfg.feature_blocks, vec![vec![4], vec![8]]);
        assert_eq!(cfg.seed, 3);
        let back: NetConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<NetConfig>(r#"{"presett":"desk"}"#).is_err());
    }
}
