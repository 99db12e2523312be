//! Ops and parameter counts of the dense ResNet18 and its KELS slim network.
//!
//! ```text
//! cargo run --release --example profile_resnet18 -- [split_rate]
//! ```

use kevo::graph::{build_architecture, Family};
use kevo::split::{extract_slim, kels_split, profile_network};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let split_rate: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let input = [3, 224, 224];
    let dense = build_architecture(Family::Resnet18, 102, input)?;
    let params = dense.init_params::<f32>(0);
    let mask = kels_split(&dense, split_rate)?;
    let slim = extract_slim(&dense, &params, &mask)?;

    let d = profile_network(&dense, input)?;
    let s = profile_network(&slim.graph, input)?;
    println!("{:>8} {:>14} {:>14}", "", "G-ops", "M-params");
    println!(
        "{:>8} {:>14.6} {:>14.6}",
        "dense",
        d.total_ops as f64 / 1e9,
        d.total_params as f64 / 1e6
    );
    println!(
        "{:>8} {:>14.6} {:>14.6}",
        "slim",
        s.total_ops as f64 / 1e9,
        s.total_params as f64 / 1e6
    );
    println!(
        "ops ratio {:.4}, params ratio {:.4}",
        s.total_ops as f64 / d.total_ops as f64,
        s.total_params as f64 / d.total_params as f64
    );
    Ok(())
}
