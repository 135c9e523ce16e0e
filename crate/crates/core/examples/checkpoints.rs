//! Save a checkpoint every few epochs from the training callback, then reload
//! the last one and confirm it matches the returned head.
//!
//! ```bash
//! cargo run -p coembed --example checkpoints
//! ```

use coembed::projhead::ProjectionHead;
use coembed::synthgen::{generate, SynthConfig};
use coembed::trainer::{fit_with, TrainConfig};

fn main() -> coembed::Result<()> {
    let dir = std::env::temp_dir().join("coembed-checkpoints");
    std::fs::create_dir_all(&dir)?;
    let (dataset, _) = generate(&SynthConfig {
        n_pairs: 300,
        ..SynthConfig::default()
    })?;
    let config = TrainConfig {
        epochs: 12,
        batch_size: 64,
        lr: 1e-3,
        learnable_tau: true,
        checkpoint_every: 4,
        ..TrainConfig::default()
    };
    let mut last = None;
    let (heads, report) = fit_with(&dataset, &config, |ev| {
        if ev.checkpoint_due {
            let path = dir.join(format!("head.prjw.{}", ev.epoch));
            ev.heads.a.save(&path)?;
            println!("epoch {:>2}  val {:.4}  tau {:.4}  -> {}", ev.epoch, ev.val_loss, ev.heads.tau(), path.display());
            last = Some(path);
        }
        Ok(())
    })?;
    let reloaded = ProjectionHead::load(last.expect("at least one checkpoint"))?;
    assert_eq!(reloaded, heads.a);
    println!("final checkpoint matches, checksum {}", report.head_checksum);
    Ok(())
}
