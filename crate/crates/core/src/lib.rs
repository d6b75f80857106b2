//! Token-level substitution ciphers for separating task learning from task
//! retrieval in in-context learning.
//!
//! An evaluation task is reformulated twice over the same ciphered token set
//! `S`: once with a consistent, invertible token permutation ([`cipher::BijectiveCipher`])
//! and once with per-occurrence random replacement ([`cipher::NonBijectiveSpec`]).
//! Both conditions destroy the surface form equally, but only the first leaves
//! a learnable input-label mapping in the demonstrations. The accuracy gap
//! between them is the quantity of interest.
//!
//! Pipeline, bottom-up:
//!
//! * [`tokenization`]: word-level reference tokenizer plus a stdio bridge to
//!   external tokenizers.
//! * [`lexicon`]: frequency tables, frequency bins and the eligible-token universe.
//! * [`cipher`]: ciphered-set selection, bijective and non-bijective ciphers.
//! * [`corpus`] and [`sampling`]: task instances, the demo-pool inverted index,
//!   priority and random demonstration sampling.
//! * [`prompting`]: instruction-free prompt rendering with position bookkeeping.
//! * [`backends`]: HTTP completion client and simulated learners.
//! * [`runner`] and [`stats`]: paired experiments, accuracy, gap and McNemar's test.
//! * [`probe`]: logit-lens probe selection, prompt building and rank-difference aggregation.
//! * [`simdemo`]: the synthetic task run end to end with both simulated learners.

pub mod backends;
pub mod cipher;
pub mod corpus;
pub mod lexicon;
pub mod probe;
pub mod prompting;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod simdemo;
pub mod stats;
pub mod tokenization;

mod error;

pub use error::{Error, Result};
pub use tokenization::{SpaceClass, TokenEntry, TokenId, TokenizerSpec, Vocabulary};
