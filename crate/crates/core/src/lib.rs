//! Learning normal spatiotemporal dynamics of 4-D volumetric sequences and
//! flagging anomalous subjects by elevated prediction or reconstruction
//! error.
//!
//! The crate is organised bottom-up:
//! - [`tensor`] and [`ops`]: dense arrays and differentiable primitives
//! - [`convlstm`]: convolutional LSTM with backpropagation through time
//! - [`models`]: recurrent U-Net predictor, 2-D U-Net, recurrent autoencoder
//! - [`optim`]: Adam/AMSGrad, training loop, evaluation metrics
//! - [`baselines`]: last-frame copy and per-pixel cubic-spline estimators
//! - [`data`]: volume files, preprocessing, windowing, synthetic cohorts
//! - [`scorer`]: the interface shared by models and baselines at scoring time
//! - [`stats`]: subject scoring, ROC AUC, t-tests, FDR, regional analysis

pub mod baselines;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod ops;
pub mod optim;
pub mod scorer;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use scorer::{FrameScorer, ScoreMode};
pub use tensor::Tensor;
