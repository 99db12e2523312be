//! Draws a fresh WELS mask for each generation and reports per-layer popcounts,
//! fit overlap between consecutive generations, and the step-wise / cumulative
//! normalized Hamming distances.
//!
//! ```text
//! cargo run --example wels_hypotheses -- [split_rate] [generations]
//! ```

use kevo::graph::{build_architecture, Family};
use kevo::metrics::h2d_metrics;
use kevo::split::{wels_count, Technique};
use kevo::train::{mask_for_generation, MaskPolicy, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let s_r: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let generations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let graph = build_architecture(Family::SmallVggBn, 10, [3, 32, 32])?;
    let cfg = TrainConfig {
        technique: Technique::Wels,
        mask_policy: MaskPolicy::Resample,
        split_rate: s_r,
        generations,
        ..TrainConfig::default()
    };

    let masks = (1..=generations)
        .map(|g| mask_for_generation(&graph, &cfg, g))
        .collect::<Result<Vec<_>, _>>()?;
    println!("{:<10} {:>8} {:>8} {:>8}", "weight", "size", "fit", "target");
    for (key, fit) in masks[0].param_masks(&graph)? {
        println!(
            "{key:<10} {:>8} {:>8} {:>8}",
            fit.len(),
            fit.count_ones(),
            wels_count(s_r, fit.len())
        );
    }

    let flat = masks.iter().map(|m| m.flatten(&graph)).collect::<Result<Vec<_>, _>>()?;
    let d = flat[0].len() as f64;
    let (step, cumulative) = h2d_metrics(&flat)?;
    println!("\n{:<4} {:>10} {:>8} {:>8}", "g", "overlap", "S", "C");
    for g in 2..=generations {
        let overlap = flat[g - 2].overlap(&flat[g - 1]) as f64 / d;
        println!("{g:<4} {overlap:>10.4} {:>8.4} {:>8.4}", step[g - 2], cumulative[g - 2]);
    }
    println!("independent draws overlap near s_r^2 = {:.4}", s_r * s_r);
    Ok(())
}
