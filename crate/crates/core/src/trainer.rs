//! The training loop.
//!
//! Cached encoder outputs are read-only for the whole run: the dataset is only
//! ever borrowed immutably and gradients stop at the projection heads. Every
//! source of randomness is derived from `TrainConfig::seed`, so a run is a pure
//! function of the dataset and the config.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::symmetric_contrastive_loss;
use crate::embedstore::{split_dataset, PairDataset, SplitIndices};
use crate::error::{Error, Result};
use crate::optim::{AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
use crate::projhead::{init_head, Activation, HeadGradients, ProjectionHead};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Identity,
    Relu,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Identity => Activation::Identity,
            ActivationName::Relu => Activation::Relu,
        }
    }
}

/// Hyperparameters. Serialized keys follow the CLI flag names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(rename = "batch")]
    pub batch_size: usize,
    pub lr: f64,
    #[serde(rename = "split")]
    pub train_fraction: f64,
    pub tau: f64,
    pub learnable_tau: bool,
    /// Head A layer sizes. Empty means `[dim_a, dim_b]`.
    pub layer_dims: Vec<usize>,
    /// Activation of hidden layers; the last layer is always identity.
    pub activation: ActivationName,
    pub seed: u64,
    /// Also train a head on modality B instead of passing it through unchanged.
    pub two_sided: bool,
    /// Emit a checkpoint every N epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4096,
            lr: 1e-4,
            train_fraction: 0.67,
            tau: 0.07,
            learnable_tau: false,
            layer_dims: Vec::new(),
            activation: ActivationName::Identity,
            seed: 0,
            two_sided: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Head A layer sizes for a dataset.
    pub fn resolved_dims(&self, dataset: &PairDataset) -> Vec<usize> {
        if self.layer_dims.is_empty() {
            vec![dataset.dim_a, dataset.dim_b]
        } else {
            self.layer_dims.clone()
        }
    }

    /// Width of the single hidden layer, if the head has exactly one.
    pub fn hidden(&self) -> Option<usize> {
        match self.layer_dims.as_slice() {
            [_, h, _] => Some(*h),
            _ => None,
        }
    }

    pub fn checkpoint_due(&self, epoch: usize) -> bool {
        self.checkpoint_every > 0 && epoch.is_multiple_of(self.checkpoint_every)
    }

    /// Equivalent `train` flags.
    pub fn to_flags(&self) -> String {
        let mut s = format!(
            "--epochs {} --batch {} --lr {} --split {} --tau {} --seed {}",
            self.epochs, self.batch_size, self.lr, self.train_fraction, self.tau, self.seed
        );
        if self.learnable_tau {
            s.push_str(" --learnable-tau");
        }
        if let Some(h) = self.hidden() {
            s.push_str(&format!(" --hidden {h}"));
        }
        if self.two_sided {
            s.push_str(" --two-sided");
        }
        if self.checkpoint_every > 0 {
            s.push_str(&format!(" --checkpoint-every {}", self.checkpoint_every));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.tau.is_finite() && self.tau >= 0.01) {
            return Err(Error::InvalidArgument(format!("tau must be >= 0.01, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Head A always exists; `b == None` means modality B is used as-is.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub a: ProjectionHead,
    pub b: Option<ProjectionHead>,
}

impl HeadPair {
    pub fn one_sided(a: ProjectionHead) -> Self {
        Self { a, b: None }
    }

    /// Temperature used by the loss; it lives on head A.
    pub fn tau(&self) -> f64 {
        self.a.tau()
    }

    pub fn check_dims(&self, dataset: &PairDataset) -> Result<()> {
        let b_in = self.b.as_ref().map_or(dataset.dim_b, |b| b.in_dim());
        let b_out = self.b.as_ref().map_or(dataset.dim_b, |b| b.out_dim());
        if self.a.in_dim() != dataset.dim_a || b_in != dataset.dim_b {
            return Err(Error::Shape(format!(
                "heads take {}/{} inputs but the dataset holds {}/{}",
                self.a.in_dim(),
                b_in,
                dataset.dim_a,
                dataset.dim_b
            )));
        }
        if self.a.out_dim() != b_out {
            return Err(Error::Shape(format!(
                "head outputs differ: modality A maps to {}, modality B to {}",
                self.a.out_dim(),
                b_out
            )));
        }
        Ok(())
    }

    /// Joint-space embeddings of the given records (not normalized).
    pub fn embed(&self, dataset: &PairDataset, indices: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let a = self.a.apply(&dataset.gather_a(indices))?;
        let xb = dataset.gather_b(indices);
        let b = match &self.b {
            Some(head) => head.apply(&xb)?,
            None => xb,
        };
        Ok((a, b))
    }

    /// Loss of one batch of raw inputs.
    pub fn loss(&self, xa: &Array2<f64>, xb: &Array2<f64>) -> Result<f64> {
        let a = self.a.apply(xa)?;
        let b = match &self.b {
            Some(head) => head.apply(xb)?,
            None => xb.clone(),
        };
        Ok(symmetric_contrastive_loss(&a, &b, self.tau())?.loss)
    }

    /// Loss of one batch and its gradient with respect to every head parameter.
    pub fn loss_and_grads(&self, xa: &Array2<f64>, xb: &Array2<f64>) -> Result<BatchGradients> {
        let (emb_a, tape_a) = self.a.forward(xa)?;
        let (emb_b, tape_b) = match &self.b {
            Some(head) => {
                let (e, t) = head.forward(xb)?;
                (e, Some(t))
            }
            None => (xb.clone(), None),
        };
        let out = symmetric_contrastive_loss(&emb_a, &emb_b, self.tau())?;
        let (mut grads_a, _) = self.a.backward(&tape_a, &out.grad_a)?;
        // the head stores ln(1/tau)
        grads_a.logit_scale = -out.grad_log_tau;
        let grads_b = match (&self.b, tape_b) {
            (Some(head), Some(tape)) => Some(head.backward(&tape, &out.grad_b)?.0),
            _ => None,
        };
        Ok(BatchGradients {
            loss: out.loss,
            grads_a,
            grads_b,
        })
    }

    /// Checksum over both heads.
    pub fn checksum(&self) -> Result<String> {
        let a = self.a.checksum()?;
        Ok(match &self.b {
            Some(b) => format!("{a}+{}", b.checksum()?),
            None => a,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads_a: HeadGradients,
    /// Only for two-sided pairs; head B has no temperature so its `logit_scale` is 0.
    pub grads_b: Option<HeadGradients>,
}

/// Optimizer state matching a [`HeadPair`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerPair {
    pub a: AdamState,
    pub b: Option<AdamState>,
}

impl OptimizerPair {
    pub fn new(heads: &HeadPair, lr: f64) -> Result<Self> {
        Ok(Self {
            a: AdamState::new(&heads.a, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)?,
            b: heads
                .b
                .as_ref()
                .map(|h| AdamState::new(h, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// `train` flags reproducing this run.
    pub reproduce: String,
    pub n_train: usize,
    pub n_val: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub head_checksum: String,
}

impl TrainReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }
}

/// Shuffle keyed by `(seed, epoch)`, then consecutive batches. A trailing
/// batch of one is dropped.
pub fn make_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order = indices.to_vec();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Fixed-order batches for validation.
fn eval_batches(indices: &[usize], batch_size: usize) -> Vec<&[usize]> {
    indices.chunks(batch_size.max(2)).filter(|c| c.len() >= 2).collect()
}

fn in_batch(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Training {
        epoch,
        batch,
        source: Box::new(e),
    }
}

/// One pass over the training indices. Returns the batch-size-weighted mean loss.
pub fn train_epoch(
    heads: &mut HeadPair,
    optimizers: &mut OptimizerPair,
    dataset: &PairDataset,
    split: &SplitIndices,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    heads.check_dims(dataset)?;
    let batches = make_batches(&split.train, config.batch_size, config.seed, epoch as u64)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (bi, batch) in batches.iter().enumerate() {
        let loss = train_step(heads, optimizers, dataset, batch, epoch, bi).map_err(in_batch(epoch, bi))?;
        total += loss * batch.len() as f64;
        count += batch.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn train_step(
    heads: &mut HeadPair,
    optimizers: &mut OptimizerPair,
    dataset: &PairDataset,
    batch: &[usize],
    epoch: usize,
    bi: usize,
) -> Result<f64> {
    let xa = dataset.gather_a(batch);
    let xb = dataset.gather_b(batch);
    let step = heads.loss_and_grads(&xa, &xb).map_err(|e| match e {
        Error::NonFinite(detail) => Error::Numeric {
            epoch,
            batch: bi,
            detail,
        },
        other => other,
    })?;
    let (grads_a, grads_b) = (step.grads_a, step.grads_b);

    optimizers.a.step(&mut heads.a, &grads_a)?;
    if let (Some(head), Some(state), Some(g)) = (heads.b.as_mut(), optimizers.b.as_mut(), grads_b) {
        state.step(head, &g)?;
    }
    Ok(step.loss)
}

/// Mean contrastive loss over fixed-order batches, without touching the heads.
pub fn validation_loss(heads: &HeadPair, dataset: &PairDataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in eval_batches(indices, batch_size) {
        let (a, b) = heads.embed(dataset, batch)?;
        let loss = symmetric_contrastive_loss(&a, &b, heads.tau())?.loss;
        total += loss * batch.len() as f64;
        count += batch.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Fresh heads for a dataset under `config`.
pub fn init_heads(dataset: &PairDataset, config: &TrainConfig) -> Result<HeadPair> {
    let dims = config.resolved_dims(dataset);
    let mut a = init_head(&dims, config.activation.clone().into(), config.seed)?;
    a.learnable_temperature = config.learnable_tau;
    a.set_tau(config.tau)?;
    let b = if config.two_sided {
        let out = *dims.last().expect("at least two dims");
        Some(init_head(&[dataset.dim_b, out], Activation::Identity, config.seed.wrapping_add(1))?)
    } else {
        None
    };
    let heads = HeadPair { a, b };
    heads.check_dims(dataset)?;
    Ok(heads)
}

/// Per-epoch progress handed to [`fit_with`] callbacks.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub heads: &'a HeadPair,
    pub checkpoint_due: bool,
}

pub fn fit(dataset: &PairDataset, config: &TrainConfig) -> Result<(HeadPair, TrainReport)> {
    fit_with(dataset, config, |_| Ok(()))
}

/// Split, initialize and run every configured epoch, calling `on_epoch` after each.
pub fn fit_with<F>(dataset: &PairDataset, config: &TrainConfig, mut on_epoch: F) -> Result<(HeadPair, TrainReport)>
where
    F: FnMut(&EpochEvent<'_>) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let split = split_dataset(dataset, config.train_fraction, config.seed)?;
    if split.train.len() < 2 || split.val.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "split leaves {} train / {} validation records; both need at least 2",
            split.train.len(),
            split.val.len()
        )));
    }
    let mut heads = init_heads(dataset, config)?;
    let mut optimizers = OptimizerPair::new(&heads, config.lr)?;

    let mut report = TrainReport {
        config: config.clone(),
        reproduce: config.to_flags(),
        n_train: split.train.len(),
        n_val: split.val.len(),
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        epoch_seconds: Vec::with_capacity(config.epochs),
        head_checksum: String::new(),
    };
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let train_loss = train_epoch(&mut heads, &mut optimizers, dataset, &split, config, epoch)?;
        let val_loss = validation_loss(&heads, dataset, &split.val, config.batch_size).map_err(in_batch(epoch, 0))?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(Error::Numeric {
                epoch,
                batch: 0,
                detail: format!("train loss {train_loss}, validation loss {val_loss}"),
            });
        }
        let seconds = start.elapsed().as_secs_f64();
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.epoch_seconds.push(seconds);
        on_epoch(&EpochEvent {
            epoch,
            train_loss,
            val_loss,
            seconds,
            heads: &heads,
            checkpoint_due: config.checkpoint_due(epoch),
        })?;
    }
    report.head_checksum = heads.checksum()?;
    Ok((heads, report))
}
