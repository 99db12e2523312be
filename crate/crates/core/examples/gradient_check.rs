//! Compares backpropagated gradients against central finite differences on a
//! small residual network in double precision.
//!
//! ```text
//! cargo run --example gradient_check -- [family]
//! ```

use kevo::graph::{build_architecture, Family, Mode};
use kevo::metrics::cross_entropy;
use kevo::tensor::{SeededRng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let family: Family = std::env::args().nth(1).as_deref().unwrap_or("toy-resnet").parse()?;
    let (classes, shape) = (3, [3, 6, 6]);
    let graph = build_architecture(family, classes, shape)?;
    let mut params = graph.init_params::<f64>(1);

    let mut rng = SeededRng::new(0, "gradient-check");
    let n = 4;
    let x = Tensor::new(
        vec![n, shape[0], shape[1], shape[2]],
        (0..n * shape.iter().product::<usize>())
            .map(|_| rng.symmetric(1.0))
            .collect(),
    )?;
    let labels = [0, 1, 2, 1];

    // eval mode keeps the loss a pure function of the parameters
    let loss = |p: &kevo::graph::ParamStore<f64>| -> f64 {
        let logits = graph.forward_eval(p, &x).unwrap();
        cross_entropy(&logits, &labels, 0.1).unwrap().0
    };
    let trace = graph.forward_trace(&mut params, &x, Mode::Eval)?;
    let (_, grad_logits) = cross_entropy(trace.output(), &labels, 0.1)?;
    let grads = graph.backward(&params, &trace, &grad_logits)?;

    let h = 1e-6;
    let mut worst = 0.0f64;
    println!("{:<28} {:>14} {:>14} {:>10}", "entry", "analytic", "numeric", "rel err");
    for (key, g) in &grads.params {
        for i in (0..g.len()).step_by((g.len() / 3).max(1)) {
            let mut plus = params.clone();
            plus.require_mut(key)?.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.require_mut(key)?.data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = g.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            println!(
                "{:<28} {analytic:>14.6e} {numeric:>14.6e} {rel:>10.2e}",
                format!("{key}[{i}]")
            );
        }
    }
    println!("worst relative error {worst:.3e}");
    Ok(())
}
