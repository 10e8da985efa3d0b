//! Streaming social-item recommendation.
//!
//! Users are modelled by a bi-layer hidden Markov model over item categories (producer
//! creation patterns feed the consumer browsing model), items are ranked against users
//! with a Dirichlet-smoothed probabilistic score over producers and expanded entities,
//! and "which users should see this item" top-k queries are answered by a pruned
//! signature-tree index whose bounds never discard a true top-k user.

pub mod bihmm;
pub mod domain;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod hmm;
pub mod index;
pub mod scoring;

pub use error::{Error, Result};
