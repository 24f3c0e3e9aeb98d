//! Token-level self-supervised pretraining laboratory.
//!
//! The crate covers the full desk-scale pipeline: byte-level BPE
//! ([`tokenizer`]), corpus packing ([`corpus`]), dynamic corruption and label
//! generation for every pretraining objective ([`objectives`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), a BERT-style encoder
//! ([`model`]), the pretraining loop ([`trainer`]) and fine-tuning probes
//! ([`probe`]).

pub mod autodiff;
pub(crate) mod binio;
pub mod cli;
pub mod corpus;
pub mod model;
pub mod objectives;
pub mod probe;
pub mod trainer;
pub mod rng;
pub mod tokenizer;
