//! Loads an experiment file with optional `key=value` overrides, then prints the
//! network it describes and its per-layer cost.
//!
//! ```text
//! cargo run --example from_config -- examples/configs/resnet18_flowers.toml model.classes=200
//! ```

use kevo::config::ExperimentConfig;
use kevo::split::profile_network;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "examples/configs/blobs_kels.toml".into());
    let overrides: Vec<String> = args.collect();
    let cfg = ExperimentConfig::load(path.as_ref(), &overrides)?;
    let graph = cfg.build_graph()?;
    let input = cfg.input_shape().ok_or("config does not determine an input shape")?;

    println!("output directory: {}", cfg.out.display());
    println!(
        "training: {:?}, {} generations, s_r {}",
        cfg.train.technique, cfg.train.generations, cfg.train.split_rate
    );
    let report = profile_network(&graph, input)?;
    print!("{}", report.to_csv());
    Ok(())
}
