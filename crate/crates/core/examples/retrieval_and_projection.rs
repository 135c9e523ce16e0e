//! Score a trained head with recall@k, class match and silhouette, then
//! export the joint 2-D PCA projection as CSV.
//!
//! ```bash
//! cargo run --release -p coembed --example retrieval_and_projection -- /tmp/points.csv
//! ```

use coembed::contrastive::l2_normalize;
use coembed::embedstore::split_dataset;
use coembed::evalkit::{evaluate, recall_at_k};
use coembed::synthgen::{generate, SynthConfig};
use coembed::trainer::{fit, init_heads, TrainConfig};

fn main() -> coembed::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("points.csv").display().to_string());
    let (dataset, truth) = generate(&SynthConfig {
        n_pairs: 800,
        ..SynthConfig::default()
    })?;
    let config = TrainConfig {
        epochs: 40,
        batch_size: 128,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let split = split_dataset(&dataset, config.train_fraction, config.seed)?;

    let untrained = init_heads(&dataset, &config)?;
    let (before, _) = evaluate(&dataset, &untrained, &split, &[1, 5, 10])?;
    let (heads, _) = fit(&dataset, &config)?;
    let (after, points) = evaluate(&dataset, &heads, &split, &[1, 5, 10])?;
    for (b, a) in before.recall.iter().zip(&after.recall) {
        println!("recall@{:<2}  untrained {:.3}/{:.3}  trained {:.3}/{:.3}", a.k, b.a_to_b, b.b_to_a, a.a_to_b, a.b_to_a);
    }
    println!("{after:#?}");

    // the generator's own latents retrieve perfectly against themselves
    let z = l2_normalize(&truth.latents.select(ndarray::Axis(0), &split.val));
    let perfect = recall_at_k(&z, &z, &[1])?;
    println!("latent self-retrieval recall@1 {:.3}", perfect[0].a_to_b);

    points.write_csv(std::fs::File::create(&out)?)?;
    println!("wrote {} points to {out}", points.rows.len());
    Ok(())
}
