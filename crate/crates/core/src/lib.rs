//! A toy-scale SesameBERT: a BERT-style encoder whose attention outputs can be
//! smoothed along the sequence by a fixed Gaussian kernel, and whose per-layer
//! hidden states are fused by a squeeze-and-excitation gate before
//! classification.
//!
//! Everything runs on a small eager reverse-mode [`GradientTape`] over dense
//! `f64` [`Tensor`]s, so every gradient in the model can be checked against
//! central differences with [`grad_check`].
//!
//! ```
//! use sesame_core::{gaussian_kernel, Tensor};
//!
//! let g = gaussian_kernel(3, 1.0).unwrap();
//! let e = (-0.5f64).exp();
//! assert_eq!(g.taps().data(), &[e, 1.0, e]);
//!
//! let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap();
//! let y = x.conv1d_same(g.taps()).unwrap();
//! assert_eq!(y.shape(), &[3, 2]);
//! ```

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod grad_scopes;
pub mod gradcheck;
pub mod rng;
pub mod se_fusion;
pub mod tensor;
pub mod train;

pub use attention::{gaussian_kernel, multihead_attention, AttentionConfig, AttentionParams, BlurKernel, BlurMode};
pub use autodiff::{GradientTape, Gradients, ParamSet, Var};
pub use encoder::{encoder_stack_forward, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use se_fusion::{PoolingStrategy, SeParams};
pub use tensor::Tensor;
pub use train::{evaluate, train, Metrics, Model, ModelConfig, TrainConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/blur.md")]
    mod blur {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/probe.md")]
    mod probe {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    mod gradients {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
