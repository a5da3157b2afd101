//! Generates the default four-domain dataset, writes it to disk and reads it
//! back.
//!
//! ```text
//! cargo run --release --example synth -- [out_dir]
//! ```

use metadg::datagen::{dataset_digest, load_dataset, save_dataset, synth_domains, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-data".into());
    let spec = SynthSpec::default();
    let domains = synth_domains(&spec)?;
    for d in &domains {
        let mean = |label: u8| {
            let xs: Vec<f64> = d.samples.iter().filter(|s| s.y == label).flat_map(|s| s.x.data().to_vec()).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        println!(
            "{:<8} hue {:>6.1}  brightness {:.2}  texture {}  noise {:.2}  mean intensity real {:.3} attack {:.3}",
            d.name(),
            d.spec.shift.hue_rotation,
            d.spec.shift.brightness_scale,
            d.spec.shift.background_texture_id,
            d.spec.shift.noise_sigma,
            mean(1),
            mean(0)
        );
    }
    save_dataset(&domains, &out)?;
    let back = load_dataset(&out)?;
    println!("wrote {out}; sha256 {}", dataset_digest(&domains));
    println!("reloaded digest matches: {}", dataset_digest(&back) == dataset_digest(&domains));
    Ok(())
}
