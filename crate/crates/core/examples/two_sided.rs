//! One-sided versus two-sided training on the same synthetic pairs.
//!
//! ```bash
//! cargo run --release -p coembed --example two_sided
//! ```

use coembed::embedstore::split_dataset;
use coembed::evalkit::evaluate;
use coembed::synthgen::{generate, SynthConfig};
use coembed::trainer::{fit, TrainConfig};

fn main() -> coembed::Result<()> {
    let (dataset, _) = generate(&SynthConfig {
        n_pairs: 1000,
        seed: 8,
        ..SynthConfig::default()
    })?;
    for two_sided in [false, true] {
        let config = TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 1e-3,
            two_sided,
            ..TrainConfig::default()
        };
        let (heads, report) = fit(&dataset, &config)?;
        let split = split_dataset(&dataset, config.train_fraction, config.seed)?;
        let (eval, _) = evaluate(&dataset, &heads, &split, &[1])?;
        let r1 = eval.recall_at(1).expect("k = 1 requested");
        println!(
            "two_sided={two_sided:<5}  val loss {:.4}  recall@1 {:.3}/{:.3}  silhouette {:.3}",
            report.val_loss.last().copied().unwrap_or(f64::NAN),
            r1.a_to_b,
            r1.b_to_a,
            eval.silhouette.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
