//! Joint embedding spaces over frozen, precomputed encoders.
//!
//! Two pretrained encoders are run once, offline, and their outputs cached as
//! aligned pairs ([`embedstore`]). Small projection heads ([`projhead`]) are
//! then trained with a symmetric contrastive loss ([`contrastive`]) and Adam
//! ([`optim`]) so that both modalities land in one comparable space
//! ([`trainer`]). No gradient ever reaches the encoders. The result is
//! scored with cross-modal retrieval and cluster metrics ([`evalkit`]);
//! [`synthgen`] provides synthetic pairs with a known ground-truth alignment.

pub mod cli;
pub mod contrastive;
pub mod embedstore;
pub mod error;
pub mod evalkit;
pub mod optim;
pub mod projhead;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
