//! t-product tensor algebra, FFT-based tensor SVD and tensor-structured
//! low-rank adaptation of transformer encoders.
//!
//! The encoder's weight matrices are stacked into three third-order tensors,
//! each split by the t-SVD into a trainable principal part and a frozen
//! residual. [`adapters`] builds those splits along with matrix LoRA and
//! PISSA baselines, [`tinymodel`] provides a small encoder with exact
//! gradients for training them, and [`segmetrics`] holds the evaluation
//! metrics and loss used for segmentation tasks.

pub mod adapters;
pub mod error;
pub mod segmetrics;
mod linalg;
pub mod tensor3;
pub mod tinymodel;
pub mod tsvd;

pub use error::{Error, Result};
pub use tensor3::{ComplexTensor3, Tensor3};
pub use tsvd::{LowRankFactors, TsvdFactors};
