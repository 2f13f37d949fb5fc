//! Kernelizable linear attention with translation-equivariant relative
//! positional encodings, plus the training and evaluation harness used to
//! exercise the construction's invariances on pixel-sequence image
//! classification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation and the
//!   checkpoint format.
//! - [`favor`]: the trigonometric random feature map estimating the
//!   softmax kernel.
//! - [`positional`]: absolute sinusoidal encodings, the rotation-scaling
//!   constrained shift-invariant features (strategy 1), and clipped
//!   relative embeddings indexed by L1 pixel distance (strategy 2).
//! - [`attention`]: exact softmax attention (the oracle), linear attention
//!   with row normalization, and the fast clipped relative-position path.
//! - [`model`]: the pixel-sequence transformer classifier.
//! - [`data`]: IDX / CIFAR-10 loaders, bilinear resize, the shifted
//!   evaluation subsets.
//! - [`experiment`]: Adam, the training loop, evaluation, the shift sweep.
//! - [`check`]: finite-difference oracles and the self-verification suite.

pub mod attention;
pub mod check;
pub mod data;
pub mod experiment;
pub mod favor;
pub mod model;
pub mod positional;
pub mod rng;
pub mod tensor;

pub use tensor::{Dtype, Element, Tape, Tensor, TensorError, Var};
