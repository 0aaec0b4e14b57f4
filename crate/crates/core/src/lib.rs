//! Emphasis selection as label-distribution sequence labeling.
//!
//! Each token of a short text gets a distribution over the two labels
//! `{I, O}` whose target is the fraction of annotators that emphasized it.
//! A BiLSTM or per-token dense head is trained over frozen, precomputed
//! contextual embeddings with a KL-divergence loss, and evaluated with the
//! top-m set overlap ("match-m") score.
//!
//! The crate is organized bottom-up:
//!
//! * [`corpus`]: the normalized TSV corpus, LDL targets, shuffling, length buckets
//! * [`embedding_io`]: the `EMB1` embedding file format
//! * [`nn`]: linear/LSTM layers with hand-written backward passes, softmax, KL, optimizers
//! * [`model`]: the two heads and the `CKP1` checkpoint format
//! * [`training`]: batching, masking, the epoch loop and best-epoch selection
//! * [`evaluation`]: match-m and the POS / length / random-baseline analyses
//! * [`ensemble`]: averaged and dev-weighted ensembles
//! * [`experiments`]: grid and shuffled-training studies

pub mod corpus;
pub mod embedding_io;
pub mod ensemble;
mod error;
pub mod evaluation;
pub mod experiments;
pub mod kv;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use corpus::{AnnotatedInstance, Corpus, LabelDistribution, LengthBucket, Token};
pub use embedding_io::{EmbeddingFile, InstanceEmbeddings};
pub use error::{Error, Result};
pub use evaluation::{MatchReport, Prediction};
pub use model::{Checkpoint, EmphasisModel, HeadKind, ModelConfig};
