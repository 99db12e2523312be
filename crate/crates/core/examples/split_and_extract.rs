//! Builds a KELS split, extracts the slim network, and checks that it computes
//! the same logits as the dense network with its reset-hypothesis zeroed.
//!
//! ```text
//! cargo run --example split_and_extract -- [split_rate]
//! ```

use kevo::graph::{build_architecture, Family};
use kevo::split::{compute_sparsity, extract_slim, kels_split, masked_dense, SplitSpec};
use kevo::tensor::{SeededRng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s_r: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let shape = [3, 16, 16];
    let graph = build_architecture(Family::SmallVggBn, 10, shape)?;
    let params = graph.init_params::<f32>(7);
    let mask = kels_split(&graph, s_r)?;

    println!("{:<8} {:>10} {:>10}", "layer", "keep_out", "keep_in");
    for node in graph.nodes() {
        if let Some(SplitSpec::Conv { keep_out, keep_in } | SplitSpec::Linear { keep_out, keep_in }) =
            mask.spec(&node.name)
        {
            println!("{:<8} {keep_out:>10} {:>10}", node.name, keep_in.len());
        }
    }
    let sparsity = compute_sparsity(&mask, &graph)?;
    println!(
        "fit {} of {} split weights, sparsity {:.4}",
        sparsity.fit(),
        sparsity.total(),
        sparsity.sparsity()
    );

    let slim = extract_slim(&graph, &params, &mask)?;
    let zeroed = masked_dense(&graph, &params, &mask)?;
    let mut rng = SeededRng::new(3, "inputs");
    let x = Tensor::new(
        vec![8, shape[0], shape[1], shape[2]],
        (0..8 * 3 * 16 * 16).map(|_| rng.symmetric(1.0) as f32).collect(),
    )?;
    let a = slim.graph.forward_eval(&slim.params, &x)?;
    let b = graph.forward_eval(&zeroed, &x)?;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    println!(
        "slim holds {} of {} parameters; max |slim - masked dense| = {diff:.2e}",
        slim.params.total_elements(),
        params.total_elements()
    );
    Ok(())
}
