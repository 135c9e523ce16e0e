//! Train a single affine head on the default synthetic pairs and score the
//! validation split.
//!
//! ```bash
//! cargo run --release -p coembed --example align_synthetic
//! ```

use coembed::embedstore::split_dataset;
use coembed::evalkit::evaluate;
use coembed::synthgen::{generate, SynthConfig};
use coembed::trainer::{fit_with, TrainConfig};

fn main() -> coembed::Result<()> {
    let (dataset, _) = generate(&SynthConfig {
        seed: 42,
        ..SynthConfig::default()
    })?;
    let config = TrainConfig {
        epochs: 100,
        batch_size: 256,
        ..TrainConfig::default()
    };
    let (heads, report) = fit_with(&dataset, &config, |ev| {
        if ev.epoch % 10 == 0 || ev.epoch == 1 {
            println!("epoch {:>3}  train {:.4}  val {:.4}", ev.epoch, ev.train_loss, ev.val_loss);
        }
        Ok(())
    })?;

    let split = split_dataset(&dataset, config.train_fraction, config.seed)?;
    let (eval, _) = evaluate(&dataset, &heads, &split, &[1, 5, 10])?;
    for r in &eval.recall {
        println!("recall@{:<3} A->B {:.3}  B->A {:.3}", r.k, r.a_to_b, r.b_to_a);
    }
    if let Some(c) = eval.class_match_accuracy {
        println!("class match  A->B {:.3}  B->A {:.3}", c.a_to_b, c.b_to_a);
    }
    if let Some(s) = eval.silhouette {
        println!("silhouette   {s:.3}");
    }
    println!("trained {} epochs, head {}", report.train_loss.len(), &report.head_checksum[..12]);
    Ok(())
}
