//! Small, fast configurations shared by the self-test, unit tests and examples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{synth_domains, DomainDataset, SynthSpec};
use crate::error::Result;
use crate::metalearn::{split_domains, MetaBatch, MetaConfig};
use crate::nets::{MetaLayer, NetConfig, NetParams, Network, Preset};

/// Desk-family network with a few hundred parameters on 3x8x8 input.
pub fn micro_net_config(seed: u64) -> NetConfig {
    NetConfig {
        preset: Preset::Desk,
        input_shape: [3, 8, 8],
        feature_blocks: vec![vec![3]],
        meta_layers: vec![MetaLayer { width: 3, pool: false }],
        depth_widths: vec![2],
        seed,
    }
}

/// `n_domains` synthetic domains matching [`micro_net_config`].
pub fn micro_domains(n_domains: usize, per_class: usize) -> Result<Vec<DomainDataset>> {
    let mut spec = SynthSpec::default();
    spec.image_shape = [3, 8, 8];
    spec.depth_shape = [4, 4];
    spec.domains.truncate(n_domains);
    for d in &mut spec.domains {
        d.n_real = per_class;
        d.n_fake = per_class;
    }
    synth_domains(&spec)
}

/// A micro network, its initial parameters, and one sampled meta batch.
pub struct MicroSetup {
    pub net: Network,
    pub params: NetParams,
    pub domains: Vec<DomainDataset>,
    pub batch: MetaBatch,
}

/// Three domains, batch 4 per domain.
pub fn micro_setup(seed: u64) -> Result<MicroSetup> {
    micro_setup_with(seed, 3, 4)
}

pub fn micro_setup_with(seed: u64, n_domains: usize, batch_per_domain: usize) -> Result<MicroSetup> {
    let net = Network::new(micro_net_config(seed))?;
    let params = net.init_params();
    let domains = micro_domains(n_domains, 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = split_domains(domains.len(), &mut rng)?;
    let batch = MetaBatch::sample(&domains, &plan, batch_per_domain, &mut rng)?;
    Ok(MicroSetup { net, params, domains, batch })
}

/// Meta settings used with the micro setup.
pub fn micro_meta_config(alpha: f64) -> MetaConfig {
    MetaConfig { alpha, batch_per_domain: 4, iters: 0, ..MetaConfig::default() }
}
