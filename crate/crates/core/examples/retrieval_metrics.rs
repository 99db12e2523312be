//! Retrieval metrics on clustered embeddings: Recall@K, NMI of a seeded k-means
//! clustering, and semi-hard negative mining with the triplet loss.
//!
//! ```text
//! cargo run --example retrieval_metrics -- [spread]
//! ```

use kevo::metrics::{l2_normalize, mine_semi_hard, nmi_score, recall_at_k, triplet_loss, KMeansOptions};
use kevo::tensor::{SeededRng, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spread: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1.5);
    let (classes, per_class, dim) = (8, 10, 16);
    let mut rng = SeededRng::new(5, "embeddings");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.symmetric(1.0)).collect())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        data.extend(centers[c].iter().map(|&m| (m + rng.symmetric(spread)) as f32));
        labels.push(c);
    }
    let emb = l2_normalize(&Tensor::new(vec![labels.len(), dim], data)?)?;

    for k in [1, 2, 4, 8] {
        println!("Recall@{k}: {:.4}", recall_at_k(&emb, &labels, k)?);
    }
    println!(
        "NMI: {:.4}",
        nmi_score(&emb, &labels, classes, KMeansOptions::default())?
    );

    let triplets = mine_semi_hard(&emb, &labels, 0.2)?;
    let (loss, _) = triplet_loss(&emb, &triplets)?;
    println!("{} semi-hard triplets at margin 0.2, loss {loss:.4}", triplets.len());
    Ok(())
}
