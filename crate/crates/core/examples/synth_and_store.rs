//! Generate synthetic pairs, write them as an EMBD file and read them back.
//!
//! ```bash
//! cargo run -p coembed --example synth_and_store -- /tmp/pairs.embd
//! ```

use std::collections::BTreeMap;

use coembed::embedstore::{split_dataset, PairDataset, EMBD_HEADER_LEN};
use coembed::synthgen::{generate, SynthConfig};

fn main() -> coembed::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| std::env::temp_dir().join("pairs.embd").display().to_string());
    let config = SynthConfig {
        noise_sigma: 0.05,
        seed: 42,
        ..SynthConfig::default()
    };
    let (dataset, truth) = generate(&config)?;
    let bytes = dataset.save(&path)?;
    let record = 8 + 4 + 4 * (dataset.dim_a + dataset.dim_b);
    println!("{path}: {bytes} bytes = {EMBD_HEADER_LEN} header + {} x {record}", dataset.len());

    let back = PairDataset::load(&path)?;
    assert_eq!(back, dataset);
    let mut counts = BTreeMap::new();
    for r in &back.records {
        *counts.entry(r.label).or_insert(0) += 1;
    }
    println!("dims {}/{}, labeled {}, classes {counts:?}", back.dim_a, back.dim_b, back.labeled);
    println!("latent {} -> A {:?}, B {:?}", config.latent_dim, truth.mix_a.dim(), truth.mix_b.dim());

    let split = split_dataset(&back, 0.67, 0)?;
    println!("split: {} train / {} validation", split.train.len(), split.val.len());
    Ok(())
}
