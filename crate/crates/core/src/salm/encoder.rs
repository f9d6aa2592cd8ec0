//! Frozen visual encoder stand-in.
//!
//! Each frame is cut into a `g × g` grid of patches. A patch is summarised by
//! five statistics (mean R, G, B and mean absolute horizontal and vertical
//! gradient, all on a 0..1 scale, gradients taken inside the patch only) and
//! mapped to `feat_channels` by a fixed seeded affine projection.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelDims, SalmError};
use crate::fsvr::Frame;
use crate::nn::{self, Linear};

pub const PATCH_STATS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStub {
    pub patch_grid: usize,
    pub projection: Linear,
}

impl EncoderStub {
    pub fn new(dims: &ModelDims) -> EncoderStub {
        let mut rng = ChaCha8Rng::seed_from_u64(dims.encoder_seed);
        let mut projection = Linear::random(PATCH_STATS, dims.feat_channels, &mut rng);
        projection.bias = nn::gaussian((1, dims.feat_channels), 0.1, &mut rng);
        EncoderStub { patch_grid: dims.patch_grid, projection }
    }

    /// Patch statistics of one frame, `g² × 5`, patches in row-major order.
    pub fn patch_stats(&self, frame: &Frame) -> Array2<f64> {
        let g = self.patch_grid;
        let mut out = Array2::zeros((g * g, PATCH_STATS));
        for py in 0..g {
            for px in 0..g {
                let (y0, y1) = (py * frame.height / g, (py + 1) * frame.height / g);
                let (x0, x1) = (px * frame.width / g, (px + 1) * frame.width / g);
                let row = py * g + px;
                let area = ((y1 - y0) * (x1 - x0)).max(1) as f64;
                let (mut dx, mut nx, mut dy, mut ny) = (0.0, 0usize, 0.0, 0usize);
                for c in 0..3 {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = f64::from(frame.at(c, y, x));
                            sum += v;
                            if x + 1 < x1 {
                                dx += (f64::from(frame.at(c, y, x + 1)) - v).abs();
                                nx += 1;
                            }
                            if y + 1 < y1 {
                                dy += (f64::from(frame.at(c, y + 1, x)) - v).abs();
                                ny += 1;
                            }
                        }
                    }
                    out[[row, c]] = sum / area / 255.0;
                }
                out[[row, 3]] = if nx > 0 { dx / nx as f64 / 255.0 } else { 0.0 };
                out[[row, 4]] = if ny > 0 { dy / ny as f64 / 255.0 } else { 0.0 };
            }
        }
        out
    }

    /// Encodes a sequence of frames into `(frames · g²) × feat_channels`
    /// visual tokens.
    pub fn encode(&self, frames: &[Frame]) -> Result<Array2<f64>, SalmError> {
        let first = frames.first().ok_or_else(|| SalmError::ShapeMismatch("no frames".into()))?;
        if let Some(f) = frames.iter().find(|f| f.height != first.height || f.width != first.width) {
            return Err(SalmError::MismatchedDimensions { index: f.index });
        }
        let stats: Vec<Array2<f64>> = frames.iter().map(|f| self.patch_stats(f)).collect();
        let views: Vec<_> = stats.iter().map(|s| s.view()).collect();
        let all = ndarray::concatenate(ndarray::Axis(0), &views).expect("same width");
        Ok(self.projection.forward(all.view()))
    }
}

/// Applies the encoder to eight selected frames.
pub fn visual_encode_stub(encoder: &EncoderStub, frames: &[Frame]) -> Result<Array2<f64>, SalmError> {
    encoder.encode(frames)
}
