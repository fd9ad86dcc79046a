//! Loss-gated learning for self-supervised speaker embeddings.
//!
//! The pipeline has two stages. Stage I trains an [`encoder`] with a
//! SimCLR-style contrastive objective over pairs of augmented segments
//! ([`contrastive`]). Stage II alternates k-means pseudo labeling
//! ([`cluster`]) with AAM-softmax classification, where a per-sample loss gate
//! keeps only the samples whose loss is below a threshold ([`gated`]).
//! [`metrics`] holds the evaluation side: Hungarian label mapping, NMI, EER and
//! the reliable/unreliable split, all of which need ground truth that the
//! training code never sees.
//!
//! Everything runs on a synthetic multi-speaker [`corpus`] and on the small
//! dense kernels in [`math`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops mirror
// the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cluster;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
mod error;
pub mod gated;
pub mod math;
pub mod metrics;
pub mod seed;

pub use cluster::{elbow_scan, kmeans, KMeansConfig, KMeansResult, PseudoLabelSet};
pub use contrastive::{train_stage1, BatchEmbeddings, Stage1Config, Stage1Epoch};
pub use corpus::{Corpus, CorpusConfig, TrialPair, UnlabeledCorpus, Utterance};
pub use encoder::{Architecture, Embedding, EncoderGrads, EncoderParams};
pub use error::{Error, Result};
pub use gated::{
    run_stage2, ClassifierParams, Gate, GateReport, IterationOutcome, IterationSchedule,
    IterationSpec, Stage2Config, Stage2Outcome,
};
pub use math::{AdamState, Matrix};
pub use metrics::{Assignment, Evaluator, RunReport};
