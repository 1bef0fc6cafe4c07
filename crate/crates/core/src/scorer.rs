//! Common interface for anything that produces predicted frames from a
//! window of a slice series: trained models and the non-learning baselines.

use crate::error::Result;
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Forecast (or impute) frame `T` of the window.
    NextFrame,
    /// Reconstruct frames `0..T` of the window.
    Reconstruct,
}

pub trait FrameScorer: Sync {
    fn name(&self) -> String;

    fn mode(&self) -> ScoreMode;

    /// Number of input frames `T`.
    fn input_len(&self) -> usize;

    /// Slice height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize {
        1
    }

    /// Frames needed past the predicted frame (the interpolator peeks one).
    fn lookahead(&self) -> usize {
        0
    }

    /// Total frames the scorer reads from a window starting at frame 0.
    fn window_len(&self) -> usize {
        match self.mode() {
            ScoreMode::NextFrame => self.input_len() + 1 + self.lookahead(),
            ScoreMode::Reconstruct => self.input_len(),
        }
    }

    /// Frame offsets within the window that [`Self::predict`] returns.
    fn scored_offsets(&self) -> Vec<usize> {
        match self.mode() {
            ScoreMode::NextFrame => vec![self.input_len()],
            ScoreMode::Reconstruct => (0..self.input_len()).collect(),
        }
    }

    /// `frames` is `[1, H, W, window_len]`; returns `[1, H, W, k]` for the
    /// `k` scored offsets.
    fn predict(&self, frames: &Tensor) -> Result<Tensor>;
}

impl FrameScorer for Model {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn mode(&self) -> ScoreMode {
        if self.kind().is_predictor() {
            ScoreMode::NextFrame
        } else {
            ScoreMode::Reconstruct
        }
    }

    fn input_len(&self) -> usize {
        self.spec().t
    }

    fn spatial_multiple(&self) -> usize {
        self.spec().spatial_multiple()
    }

    fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        let (input, _) = self.split_clip(frames)?;
        let y = self.forward(&input)?;
        let d = y.dims().to_vec();
        match d.len() {
            3 => y.reshape(&[1, d[1], d[2], 1]),
            _ => Ok(y),
        }
    }
}
