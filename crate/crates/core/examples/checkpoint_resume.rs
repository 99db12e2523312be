//! Trains two generations, checkpoints, reloads, resumes for a third, and
//! verifies the result matches an uninterrupted run bit for bit.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use kevo::data::{synthetic_blobs, BlobsConfig};
use kevo::graph::{build_architecture, Family};
use kevo::io::{Checkpoint, CheckpointMeta};
use kevo::train::{run_knowledge_evolution, KeRun, KeState, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let shape = [3, 8, 8];
    let (train, eval) = synthetic_blobs(&BlobsConfig {
        classes: 4,
        train_per_class: 16,
        eval_per_class: 8,
        shape,
        noise: 1.0,
        grid: 2,
        seed: 1,
    })?;
    let graph = build_architecture(Family::ToyResnet, 4, shape)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 0.05,
        generations: 3,
        ..TrainConfig::default()
    };

    let straight = run_knowledge_evolution(&graph, &cfg, &train, &eval)?;

    let mut run = KeRun::new(&graph, &cfg, &train, &eval)?;
    run.next_generation()?;
    run.next_generation()?;
    let state = run.into_state();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("gen-2.kevo");
    Checkpoint {
        params: state.params,
        mask: Some(state.mask),
        meta: CheckpointMeta {
            generation: state.completed,
            ..CheckpointMeta::default()
        },
    }
    .save(&path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let ck = Checkpoint::load(&path)?;
    let state = KeState {
        completed: ck.meta.generation,
        params: ck.params,
        mask: ck.mask.ok_or("checkpoint has no mask")?,
    };
    let mut resumed = KeRun::resume(&graph, &cfg, &train, &eval, state)?;
    let log = resumed.next_generation()?;
    let same = resumed.state().params.fingerprint() == straight.state.params.fingerprint();
    println!(
        "generation {}: dense {:.4} (uninterrupted {:.4}); parameters identical: {same}",
        log.generation,
        log.dense.primary(),
        straight.logs[2].dense.primary()
    );
    Ok(())
}
