//! Neuron-level analysis of sequence models.
//!
//! Activations are read per token ([`store`]), a sparse linear probe is fit
//! to token labels ([`probe`]) and its weights turned into a neuron ordering
//! ([`ranking`]). Without labels, neurons can be ordered by how well they are
//! matched in independently trained models ([`crossmodel`]). Orderings are
//! checked by removing neurons and measuring the damage ([`ablation`]), with a
//! small LSTM language model ([`toylm`]) as a self-contained source of
//! activations.

pub mod ablation;
pub mod crossmodel;
pub mod error;
pub mod probe;
pub mod ranking;
pub mod report;
pub mod store;
pub mod synthetic;
pub mod toylm;

pub use error::{Error, Result};
pub use probe::{ProbeConfig, ProbeModel};
pub use ranking::{NeuronRanking, RankingMethod};
pub use store::{ActivationDataset, LabeledDataset};
pub use toylm::{Corpus, ToyLm, ToyLmConfig};
