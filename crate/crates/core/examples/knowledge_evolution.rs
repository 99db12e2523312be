//! Several generations of knowledge evolution on synthetic image blobs,
//! printing dense and slim accuracy plus mean |w| inside each hypothesis.
//!
//! ```text
//! cargo run --release --example knowledge_evolution -- [family] [generations] [seed]
//! ```

use kevo::data::{synthetic_blobs, BlobsConfig};
use kevo::graph::{build_architecture, Family};
use kevo::train::{KeRun, LossKind, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let family: Family = args.next().as_deref().unwrap_or("small-vgg-bn").parse()?;
    let generations: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);

    let shape = [3, 16, 16];
    let classes = 10;
    let (train, eval) = synthetic_blobs(&BlobsConfig {
        classes,
        train_per_class: env("PER_CLASS", 50.0) as usize,
        eval_per_class: 50,
        shape,
        noise: env("NOISE", 4.0),
        grid: 4,
        seed,
    })?;
    let graph = build_architecture(family, classes, shape)?;
    let cfg = TrainConfig {
        epochs: env("EPOCHS", 20.0) as usize,
        batch_size: 32,
        lr: env("LR", 0.1),
        weight_decay: env("WD", 1e-4),
        loss: LossKind::SmoothCe { alpha: 0.1 },
        generations,
        seed,
        split_rate: 0.5,
        ..TrainConfig::default()
    };
    let mut run = KeRun::new(&graph, &cfg, &train, &eval)?;
    while !run.finished() {
        let log = run.next_generation()?;
        let resets: Vec<String> = log
            .hypothesis
            .iter()
            .filter(|h| h.node.contains("conv"))
            .map(|h| format!("{:.4}", h.mean_abs_reset.unwrap_or(0.0)))
            .collect();
        println!(
            "gen {} loss {:.3} dense {:.3} slim {:.3} ({:.1}s) reset |w| [{}]",
            log.generation,
            log.epoch_losses.last().unwrap(),
            log.dense.primary(),
            log.slim.map_or(f64::NAN, |s| s.primary()),
            log.wall_seconds,
            resets.join(" ")
        );
    }
    Ok(())
}
