//! A desk-scale laboratory for momentum-queue contrastive representation
//! learning.
//!
//! The crate trains small MLP encoders on synthetic multi-domain Gaussian
//! data with four interchangeable objectives — instance discrimination
//! against a momentum queue, in-batch instance discrimination, in-batch
//! supervised contrast, and the combined supervised momentum-queue objective
//! (including its semi-supervised form) — then measures what the learned
//! embeddings are good for: few-shot episodes with a finetuned cosine
//! classifier, and nearest-neighbour retrieval diagnostics that quantify
//! how much class structure survives on classes never seen in training.
//!
//! Everything is exactly reproducible: one seed fans out to named
//! substreams, the tape-based reverse-mode autodiff is a couple hundred
//! lines of inspectable code, and checkpoints capture enough state (params,
//! optimizer, queue, rng) that a resumed run is indistinguishable from an
//! uninterrupted one.
//!
//! Module map:
//! - [`rng`]: seeded xoshiro256++ streams with named substreams
//! - [`tensor`]: dense f64 storage plus the shared forward kernels
//! - [`tape`]: arena-based reverse-mode autodiff
//! - [`gradcheck`]: finite-difference verification, tape-independent
//! - [`encoder`]: MLP backbone + projection head, query/key pair
//! - [`queue`]: FIFO feature memory with label-aware positive lookup
//! - [`losses`]: the four contrastive objectives on the tape
//! - [`data`]: synthetic multi-domain datasets, augmentation, batch building
//! - [`trainer`]: SGD + momentum, warmup/cosine schedule, checkpoints
//! - [`fewshot`]: episode sampling, prototype-initialized cosine classifier
//! - [`analysis`]: k-NN retrieval and class-collapse histograms
//! - [`config`]: flat key = value experiment configuration
//! - [`commands`]: generate/train/eval/analyze/report pipeline stages

pub mod analysis;
pub mod commands;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod losses;
pub mod queue;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
