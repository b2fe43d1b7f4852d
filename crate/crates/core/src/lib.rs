//! Deep-metric-learning engine for k-shot lesion recognition.
//!
//! The crate trains convolutional embedding networks with the triplet loss
//! on a bundled synthetic endoscopy-style dataset and evaluates them on
//! k-shot classification tasks, including generalization to a class the
//! network never saw during training.
//!
//! Layers of the stack, bottom up:
//!
//! - [`tensor`] / [`graph`] / [`gradcheck`]: dense f64 tensors, reverse-mode
//!   autodiff, and a finite-difference gradient checker.
//! - [`net`] / [`checkpoint`]: the three miniature embedding backbones and
//!   their binary checkpoint format.
//! - [`triplet`] / [`optim`] / [`augment`] / [`trainer`]: triplet sampling,
//!   the hinge loss, SGD with momentum, data augmentation, and the training
//!   loops (metric learning and the baseline softmax classifier).
//! - [`fewshot`] / [`evaluation`]: support-set construction, the minimum
//!   distance decision rule, metrics, and the k-sweep protocol.
//! - [`datagen`]: the synthetic five-class image generator and dataset I/O.

pub mod augment;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod fewshot;
pub mod gradcheck;
pub mod graph;
pub mod net;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod triplet;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
