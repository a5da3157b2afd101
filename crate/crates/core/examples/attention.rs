//! Class-activation maps of a briefly trained network, written as PGM files.
//!
//! ```text
//! cargo run --release --example attention -- [out_dir]
//! ```

use metadg::datagen::synth_domains;
use metadg::metalearn::{train_until, MetaConfig, TrainState};
use metadg::metrics::{attention_maps, pgm};
use metadg::nets::Network;
use metadg::protocol::{benchmark_meta, benchmark_net, benchmark_spec, leave_one_out};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "attention-maps".into());
    let domains = synth_domains(&benchmark_spec())?;
    let split = leave_one_out(&domains, "kiosk")?;
    let net = Network::new(benchmark_net())?;
    let cfg = MetaConfig { iters: 300, ..benchmark_meta() };
    let mut state = TrainState::new(&net, &cfg);
    train_until(&net, &mut state, &split.train, &cfg, |_, _| Ok(()))?;

    std::fs::create_dir_all(&out)?;
    let batch = split.target.full_batch()?;
    let maps = attention_maps(&net, &state.params, &batch.x)?;
    for (i, (map, s)) in maps.iter().zip(&split.target.samples).enumerate().take(8) {
        let kind = if s.y == 1 { "real" } else { "attack" };
        let path = format!("{out}/{i:02}_{kind}.pgm");
        std::fs::write(&path, pgm(map)?)?;
        let rows: Vec<String> = map
            .data()
            .chunks(map.shape()[1])
            .map(|r| r.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "))
            .collect();
        println!("{path}\n  {}", rows.join("\n  "));
    }
    Ok(())
}
