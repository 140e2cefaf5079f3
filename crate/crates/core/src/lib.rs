//! Binary neural networks with a learnable activation binarizer (LAB).
//!
//! The crate provides dense and bit-packed tensors with a small autodiff
//! tape, XNOR-popcount convolution, the sign / LAB / Niblack / Sauvola
//! binarizers, Bi-Real-style network builders, a training loop with MNIST
//! and CIFAR-10 readers, and the analysis suite (uniqueness ratio, SSIM and
//! ENDSIM dissimilarity, binary distributions, operation counts).

pub mod analysis;
pub mod bench;
pub mod binarize;
pub mod bitconv;
pub mod config;
pub mod error;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{pack, unpack, BitTensor, Padding, Real, RealTensor, Shape4};
pub use binarize::{BinarizerChoice, BinarizerKind, LabParams};
pub use nets::{Mode, Model, ModelSpec};
pub use train::{Dataset, DatasetKind, TrainConfig};
