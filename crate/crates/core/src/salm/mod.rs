//! Desk-scale stand-ins for the visual encoder, query cross-attention
//! (Q-Former), projector, feature mixer and language model, plus the
//! two-stage training loop.
//!
//! Every trainable piece has a hand-written backward pass; the test suite
//! checks each one against central finite differences.

pub mod checkpoint;
pub mod encoder;
pub mod lm;
pub mod loss;
pub mod model;
pub mod projector;
pub mod qformer;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{combined_loss, itg_loss};
pub use model::{ModelParams, ParamGroup};
pub use train::{train_stage1, train_stage2, TrainConfig};

#[derive(Debug, Error)]
pub enum SalmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("frame {index} has mismatched dimensions")]
    MismatchedDimensions { index: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("non-finite loss component")]
    NonFinite,
    #[error("loss diverged in stage {stage} at epoch {epoch}")]
    DivergenceDetected { stage: u8, epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hypergraph(#[from] crate::hypergraph::HypergraphError),
    #[error(transparent)]
    TensorFile(#[from] crate::io::TensorFileError),
}

/// Sizes of the toy model. The defaults are small enough for exact
/// finite-difference checks and single-core training in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Frames per video (fixed at 8 by the keyframe selection).
    pub n_frames: usize,
    /// Patch grid side; tokens per frame = `patch_grid²`.
    pub patch_grid: usize,
    /// Visual token channels.
    pub feat_channels: usize,
    pub n_queries: usize,
    pub attn_dim: usize,
    /// Width of the cross-attention output.
    pub query_channels: usize,
    pub projector_hidden: usize,
    /// Projector output width, also the language model width.
    pub model_width: usize,
    pub lm_hidden: usize,
    pub vocab: usize,
    pub max_caption: usize,
    /// Frame-level vertex width produced by the mixer.
    pub frame_channels: usize,
    pub hgnn_channels: usize,
    /// Seed of the frozen encoder projection.
    pub encoder_seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            n_frames: 8,
            patch_grid: 2,
            feat_channels: 16,
            n_queries: 8,
            attn_dim: 16,
            query_channels: 16,
            projector_hidden: 32,
            model_width: 16,
            lm_hidden: 32,
            vocab: 16,
            max_caption: 8,
            frame_channels: 64,
            hgnn_channels: 32,
            encoder_seed: 0x5eed_0001,
        }
    }
}

impl ModelDims {
    pub fn tokens_per_frame(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn visual_tokens(&self) -> usize {
        self.n_frames * self.tokens_per_frame()
    }

    pub fn context(&self) -> usize {
        self.n_queries + self.max_caption
    }

    pub fn validate(&self) -> Result<(), SalmError> {
        let positive = [
            self.n_frames,
            self.patch_grid,
            self.feat_channels,
            self.n_queries,
            self.attn_dim,
            self.query_channels,
            self.projector_hidden,
            self.model_width,
            self.lm_hidden,
            self.max_caption,
            self.frame_channels,
            self.hgnn_channels,
        ];
        if positive.contains(&0) {
            return Err(SalmError::InvalidConfig("all model dimensions must be positive".into()));
        }
        if self.vocab < 2 || self.vocab > 64 {
            return Err(SalmError::InvalidConfig("vocab must be in 2..=64".into()));
        }
        if self.context() > 32 {
            return Err(SalmError::InvalidConfig("n_queries + max_caption must not exceed 32".into()));
        }
        Ok(())
    }
}

/// One training example: the visual tokens of a video's eight frames, its
/// caption and its per-indicator class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoExample {
    pub video_id: String,
    /// `(n_frames · tokens_per_frame) × feat_channels`, frame-major.
    pub features: ndarray::Array2<f64>,
    /// Caption tokens, excluding the BOS token 0.
    pub caption: Vec<usize>,
    /// Class labels for engagement, emotion and EMR.
    pub labels: [usize; 3],
}

pub const BOS: usize = 0;
