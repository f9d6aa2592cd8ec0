//! Parameter container, the per-video forward pass and the batched
//! hypergraph branch.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::{LmCache, TinyLm};
use super::loss::itg_loss_and_grad;
use super::projector::{self, Projector, ProjectorCache};
use super::qformer::{QFormer, QFormerCache};
use super::{ModelDims, SalmError, VideoExample};
use crate::hypergraph::{self, HeadLogits, HgnnCache, SriHeads};
use crate::nn::{self, Linear, LEAKY_SLOPE};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    QFormer,
    Projector,
    Lm,
    Mixer,
    Hgnn,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] =
        [ParamGroup::QFormer, ParamGroup::Projector, ParamGroup::Lm, ParamGroup::Mixer, ParamGroup::Hgnn, ParamGroup::Heads];
}

/// All trainable tensors. The frozen encoder is not stored here; it is
/// rebuilt from `dims.encoder_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub qformer: QFormer,
    pub projector: Projector,
    pub lm: TinyLm,
    /// `(feat_channels + model_width) × frame_channels`
    pub mixer: Linear,
    /// `frame_channels × hgnn_channels`
    pub theta: Array2<f64>,
    pub heads: SriHeads,
}

macro_rules! tensor_list {
    ($self:ident, $($ref:tt)*) => {
        vec![
            (ParamGroup::QFormer, "qformer.queries", $($ref)* $self.qformer.queries),
            (ParamGroup::QFormer, "qformer.w_key", $($ref)* $self.qformer.w_key),
            (ParamGroup::QFormer, "qformer.w_value", $($ref)* $self.qformer.w_value),
            (ParamGroup::QFormer, "qformer.w_out", $($ref)* $self.qformer.w_out),
            (ParamGroup::Projector, "projector.hidden.weight", $($ref)* $self.projector.hidden.weight),
            (ParamGroup::Projector, "projector.hidden.bias", $($ref)* $self.projector.hidden.bias),
            (ParamGroup::Projector, "projector.output.weight", $($ref)* $self.projector.output.weight),
            (ParamGroup::Projector, "projector.output.bias", $($ref)* $self.projector.output.bias),
            (ParamGroup::Lm, "lm.embed", $($ref)* $self.lm.embed),
            (ParamGroup::Lm, "lm.positions", $($ref)* $self.lm.positions),
            (ParamGroup::Lm, "lm.w_query", $($ref)* $self.lm.w_query),
            (ParamGroup::Lm, "lm.w_key", $($ref)* $self.lm.w_key),
            (ParamGroup::Lm, "lm.w_value", $($ref)* $self.lm.w_value),
            (ParamGroup::Lm, "lm.w_out", $($ref)* $self.lm.w_out),
            (ParamGroup::Lm, "lm.mlp_in.weight", $($ref)* $self.lm.mlp_in.weight),
            (ParamGroup::Lm, "lm.mlp_in.bias", $($ref)* $self.lm.mlp_in.bias),
            (ParamGroup::Lm, "lm.mlp_out.weight", $($ref)* $self.lm.mlp_out.weight),
            (ParamGroup::Lm, "lm.mlp_out.bias", $($ref)* $self.lm.mlp_out.bias),
            (ParamGroup::Mixer, "mixer.weight", $($ref)* $self.mixer.weight),
            (ParamGroup::Mixer, "mixer.bias", $($ref)* $self.mixer.bias),
            (ParamGroup::Hgnn, "hgnn.theta", $($ref)* $self.theta),
            (ParamGroup::Heads, "heads.engagement.weight", $($ref)* $self.heads.engagement.weight),
            (ParamGroup::Heads, "heads.engagement.bias", $($ref)* $self.heads.engagement.bias),
            (ParamGroup::Heads, "heads.emotion.weight", $($ref)* $self.heads.emotion.weight),
            (ParamGroup::Heads, "heads.emotion.bias", $($ref)* $self.heads.emotion.bias),
            (ParamGroup::Heads, "heads.emr.weight", $($ref)* $self.heads.emr.weight),
            (ParamGroup::Heads, "heads.emr.bias", $($ref)* $self.heads.emr.bias),
        ]
    };
}

/// Per-video intermediate values of the caption path and the mixer.
#[derive(Debug, Clone)]
pub struct FrontCache {
    pub qformer: QFormerCache,
    pub projector: ProjectorCache,
    pub lm: LmCache,
    pub mixer_input: Array2<f64>,
    /// Frame-level features, `n_frames × frame_channels`.
    pub frames: Array2<f64>,
}

/// Batched hypergraph branch: graph, HGNN layer and head logits.
#[derive(Debug, Clone)]
pub struct GraphCache {
    pub propagation: Array2<f64>,
    pub membership: Vec<usize>,
    pub hgnn: HgnnCache,
    pub heads: HeadLogits,
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub itg: f64,
    /// Mean head cross-entropy; `None` when the hypergraph branch is off.
    pub ce: Option<f64>,
    pub total: f64,
}

/// How a batch loss is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct BatchMode<'a> {
    pub lambda: f64,
    /// Hypergraph branch enabled.
    pub hl_gate: bool,
    pub k_list: &'a [usize],
    /// Propagation matrix to use instead of a freshly built k-NN graph.
    pub fixed_propagation: Option<&'a Array2<f64>>,
    pub exec: Execution,
}

impl ModelParams {
    /// Seeded initialisation. Heads start at small random weights.
    pub fn init(dims: ModelDims, seed: u64) -> Result<ModelParams, SalmError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qformer = QFormer::random(dims.n_queries, dims.feat_channels, dims.attn_dim, dims.query_channels, &mut rng);
        let projector = Projector::random(dims.query_channels, dims.projector_hidden, dims.model_width, &mut rng);
        let lm = TinyLm::random(dims.vocab, dims.context(), dims.model_width, dims.lm_hidden, &mut rng);
        let mixer = Linear::random(dims.feat_channels + dims.model_width, dims.frame_channels, &mut rng);
        let theta = nn::gaussian((dims.frame_channels, dims.hgnn_channels), 1.0 / (dims.frame_channels as f64).sqrt(), &mut rng);
        let mut heads = SriHeads::zeros(dims.hgnn_channels);
        for h in heads.heads_mut() {
            h.weight = nn::gaussian(h.weight.dim(), 0.1 / (dims.hgnn_channels as f64).sqrt(), &mut rng);
        }
        Ok(ModelParams { dims, qformer, projector, lm, mixer, theta, heads })
    }

    pub fn zeros(dims: ModelDims) -> ModelParams {
        ModelParams {
            dims,
            qformer: QFormer::zeros(dims.n_queries, dims.feat_channels, dims.attn_dim, dims.query_channels),
            projector: Projector::zeros(dims.query_channels, dims.projector_hidden, dims.model_width),
            lm: TinyLm::zeros(dims.vocab, dims.context(), dims.model_width, dims.lm_hidden),
            mixer: Linear::zeros(dims.feat_channels + dims.model_width, dims.frame_channels),
            theta: Array2::zeros((dims.frame_channels, dims.hgnn_channels)),
            heads: SriHeads::zeros(dims.hgnn_channels),
        }
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams::zeros(self.dims)
    }

    pub fn tensors(&self) -> Vec<(ParamGroup, &'static str, &Array2<f64>)> {
        tensor_list!(self, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &'static str, &mut Array2<f64>)> {
        tensor_list!(self, &mut)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.tensors().iter().filter(|(g, _, _)| *g == group).map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| nn::all_finite(t))
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    /// Caption path and mixer for one video.
    pub fn front_forward(&self, example: &VideoExample) -> Result<FrontCache, SalmError> {
        let expected = (self.dims.visual_tokens(), self.dims.feat_channels);
        if example.features.dim() != expected {
            return Err(SalmError::ShapeMismatch(format!(
                "video {}: features {:?}, expected {:?}",
                example.video_id,
                example.features.dim(),
                expected
            )));
        }
        if example.caption.len() > self.dims.max_caption {
            return Err(SalmError::ShapeMismatch(format!(
                "video {}: caption of {} tokens exceeds {}",
                example.video_id,
                example.caption.len(),
                self.dims.max_caption
            )));
        }
        let qformer = self.qformer.forward(example.features.view())?;
        let projector = self.projector.forward(qformer.output.view())?;
        let lm = self.lm.forward(projector.output.view(), &example.caption)?;
        let mixer_input = projector::pooled_inputs(projector.output.view(), example.features.view(), self.dims.n_frames)?;
        let frames = self.mixer.forward(mixer_input.view());
        Ok(FrontCache { qformer, projector, lm, mixer_input, frames })
    }

    /// Accumulates front gradients for `dL/dlogits` and optional `dL/dframes`.
    pub fn front_backward(
        &self,
        example: &VideoExample,
        cache: &FrontCache,
        d_logits: &Array2<f64>,
        d_frames: Option<&Array2<f64>>,
        grad: &mut ModelParams,
    ) {
        let mut d_fp = self.lm.backward(&cache.lm, d_logits, &mut grad.lm);
        if let Some(dz) = d_frames {
            d_fp += &projector::mix_and_pool_backward(
                &self.mixer,
                &cache.mixer_input,
                dz,
                cache.projector.output.dim(),
                &mut grad.mixer,
            );
        }
        let d_attended = self.projector.backward(cache.qformer.output.view(), &cache.projector, &d_fp, &mut grad.projector);
        self.qformer.backward(example.features.view(), &cache.qformer, &d_attended, &mut grad.qformer);
    }

    /// Propagation matrix of the k-NN hypergraph over stacked frame features.
    pub fn frame_graph(&self, stacked: ArrayView2<f64>, k_list: &[usize], exec: Execution) -> Result<Array2<f64>, SalmError> {
        let knn = hypergraph::build_knn_hypergraph(stacked, k_list, exec)?;
        Ok(hypergraph::propagation_matrix(&knn.graph)?)
    }

    /// HGNN and heads over the stacked frames of a batch.
    pub fn graph_forward(
        &self,
        frames: &[Array2<f64>],
        k_list: &[usize],
        fixed_propagation: Option<&Array2<f64>>,
        exec: Execution,
    ) -> Result<GraphCache, SalmError> {
        let (x, membership) = hypergraph::stack_videos(frames);
        let propagation = match fixed_propagation {
            Some(a) => a.clone(),
            None => self.frame_graph(x.view(), k_list, exec)?,
        };
        let hgnn = hypergraph::hgnn_forward_with(&propagation, x.view(), &self.theta, LEAKY_SLOPE)?;
        let heads = hypergraph::predict_heads(hgnn.output.view(), &membership, frames.len(), &self.heads)?;
        Ok(GraphCache { propagation, membership, hgnn, heads })
    }

    /// Accumulates HGNN and head gradients and returns `dL/dframes` per video.
    pub fn graph_backward(
        &self,
        cache: &GraphCache,
        d_logits: &[Array2<f64>; 3],
        grad: &mut ModelParams,
    ) -> Result<Vec<Array2<f64>>, SalmError> {
        let dy = hypergraph::predict_heads_backward(&cache.heads, &cache.membership, &self.heads, d_logits, &mut grad.heads);
        let (dx, d_theta) = hypergraph::hgnn_backward_with(&cache.propagation, &cache.hgnn, &self.theta, &dy, LEAKY_SLOPE)?;
        grad.theta += &d_theta;
        let n = self.dims.n_frames;
        Ok((0..cache.heads.pooled.nrows()).map(|v| dx.slice(ndarray::s![v * n..(v + 1) * n, ..]).to_owned()).collect())
    }

    /// Loss of a batch and its gradient with respect to every parameter.
    ///
    /// ITG is the mean of per-video caption losses; CE is the mean of the
    /// three head cross-entropies over the batch's videos.
    pub fn loss_and_grad(&self, batch: &[&VideoExample], mode: &BatchMode) -> Result<(LossParts, ModelParams), SalmError> {
        if batch.is_empty() {
            return Err(SalmError::ShapeMismatch("empty batch".into()));
        }
        let b = batch.len() as f64;
        let fronts = par::try_map_indexed(mode.exec, batch.len(), |i| self.front_forward(batch[i]))?;
        let mut itg_terms = Vec::with_capacity(batch.len());
        let mut d_logits = Vec::with_capacity(batch.len());
        for (front, ex) in fronts.iter().zip(batch) {
            let (l, g) = itg_loss_and_grad(&front.lm.logits, &ex.caption)?;
            itg_terms.push(l);
            d_logits.push(g / b);
        }
        let itg = par::pairwise_reduce(itg_terms, |a, c| a + c).expect("non-empty") / b;

        let mut grad = self.zeros_like();
        let mut d_frames: Option<Vec<Array2<f64>>> = None;
        let mut ce = None;
        if mode.hl_gate {
            let frames: Vec<Array2<f64>> = fronts.iter().map(|f| f.frames.clone()).collect();
            let cache = self.graph_forward(&frames, mode.k_list, mode.fixed_propagation, mode.exec)?;
            let mut ce_sum = 0.0;
            let mut d_heads: Vec<Array2<f64>> = Vec::with_capacity(3);
            for (h, logits) in cache.heads.logits.iter().enumerate() {
                let targets: Vec<usize> = batch.iter().map(|e| e.labels[h]).collect();
                if let Some(&t) = targets.iter().find(|&&t| t >= logits.ncols()) {
                    return Err(SalmError::ShapeMismatch(format!("label {t} outside {} classes", logits.ncols())));
                }
                let (l, g) = nn::cross_entropy(logits, &targets);
                ce_sum += l;
                d_heads.push(g * (mode.lambda / 3.0));
            }
            let d_heads: [Array2<f64>; 3] = d_heads.try_into().expect("three heads");
            d_frames = Some(self.graph_backward(&cache, &d_heads, &mut grad)?);
            ce = Some(ce_sum / 3.0);
        }
        let total = super::combined_loss(itg, ce.unwrap_or(0.0), mode.lambda)?;

        let grads = par::map_indexed(mode.exec, batch.len(), |i| {
            let mut g = self.zeros_like();
            let dz = d_frames.as_ref().map(|d| &d[i]);
            self.front_backward(batch[i], &fronts[i], &d_logits[i], dz, &mut g);
            g
        });
        let front = par::pairwise_reduce(grads, |mut a, c| {
            a.add_assign(&c);
            a
        })
        .expect("non-empty");
        grad.add_assign(&front);
        Ok((LossParts { itg, ce, total }, grad))
    }

    /// Predicted classes per video, with the hypergraph built over `videos`.
    pub fn predict(&self, videos: &[&VideoExample], k_list: &[usize], exec: Execution) -> Result<Vec<[usize; 3]>, SalmError> {
        let fronts = par::try_map_indexed(exec, videos.len(), |i| self.front_forward(videos[i]))?;
        let frames: Vec<Array2<f64>> = fronts.into_iter().map(|f| f.frames).collect();
        let cache = self.graph_forward(&frames, k_list, None, exec)?;
        Ok((0..videos.len())
            .map(|v| {
                let mut out = [0; 3];
                for (h, logits) in cache.heads.logits.iter().enumerate() {
                    out[h] = nn::argmax(logits.row(v).as_slice().expect("contiguous"));
                }
                out
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_dims() -> ModelDims {
        ModelDims {
            n_frames: 8,
            patch_grid: 1,
            feat_channels: 3,
            n_queries: 2,
            attn_dim: 3,
            query_channels: 3,
            projector_hidden: 4,
            model_width: 4,
            lm_hidden: 4,
            vocab: 5,
            max_caption: 3,
            frame_channels: 4,
            hgnn_channels: 3,
            encoder_seed: 1,
        }
    }

    pub(crate) fn toy_batch(dims: &ModelDims, n: usize, seed: u64) -> Vec<VideoExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| VideoExample {
                video_id: format!("v{i}"),
                features: nn::gaussian((dims.visual_tokens(), dims.feat_channels), 1.0, &mut rng),
                caption: vec![1 + i % 4, 2, 4 - i % 3],
                labels: [i % 2, i % 3, (i + 1) % 3],
            })
            .collect()
    }

    #[test]
    fn tensor_listing_is_complete_and_unique() {
        let p = ModelParams::init(ModelDims::default(), 7).unwrap();
        let names: std::collections::BTreeSet<_> = p.tensors().iter().map(|(_, n, _)| *n).collect();
        assert_eq!(names.len(), p.tensors().len());
        assert_eq!(p.group_count(ParamGroup::Hgnn), 64 * 32);
        assert_eq!(p.parameter_count(), ParamGroup::ALL.iter().map(|&g| p.group_count(g)).sum::<usize>());
        assert_eq!(ModelParams::init(ModelDims::default(), 7).unwrap(), p);
        assert_ne!(ModelParams::init(ModelDims::default(), 8).unwrap(), p);
    }

    #[test]
    fn zero_lambda_zeroes_ce_path() {
        let dims = toy_dims();
        let p = ModelParams::init(dims, 3).unwrap();
        let data = toy_batch(&dims, 3, 4);
        let batch: Vec<&VideoExample> = data.iter().collect();
        let mode = BatchMode { lambda: 0.0, hl_gate: true, k_list: &[3, 4, 5], fixed_propagation: None, exec: Execution::Sequential };
        let (parts, grad) = p.loss_and_grad(&batch, &mode).unwrap();
        assert_eq!(parts.total, parts.itg);
        assert!(parts.ce.unwrap() > 0.0);
        for (g, _, t) in grad.tensors() {
            if matches!(g, ParamGroup::Mixer | ParamGroup::Hgnn | ParamGroup::Heads) {
                assert!(t.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let dims = toy_dims();
        let p = ModelParams::init(dims, 5).unwrap();
        let data = toy_batch(&dims, 7, 6);
        let batch: Vec<&VideoExample> = data.iter().collect();
        let mut mode = BatchMode { lambda: 0.3, hl_gate: true, k_list: &[3, 4, 5], fixed_propagation: None, exec: Execution::Sequential };
        let a = p.loss_and_grad(&batch, &mode).unwrap();
        mode.exec = Execution::Parallel;
        let b = p.loss_and_grad(&batch, &mode).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let dims = toy_dims();
        let p = ModelParams::init(dims, 9).unwrap();
        let data = toy_batch(&dims, 3, 10);
        let batch: Vec<&VideoExample> = data.iter().collect();
        let probe = BatchMode { lambda: 0.7, hl_gate: true, k_list: &[3, 4, 5], fixed_propagation: None, exec: Execution::Sequential };
        let fronts: Vec<Array2<f64>> = batch.iter().map(|e| p.front_forward(e).unwrap().frames).collect();
        let (x, _) = hypergraph::stack_videos(&fronts);
        let a = p.frame_graph(x.view(), &[3, 4, 5], Execution::Sequential).unwrap();
        let mode = BatchMode { fixed_propagation: Some(&a), ..probe };
        let (_, grad) = p.loss_and_grad(&batch, &mode).unwrap();
        let eps = 1e-5;
        let names: Vec<&str> = p.tensors().iter().map(|(_, n, _)| *n).collect();
        for (ti, name) in names.iter().enumerate() {
            let analytic = grad.tensors()[ti].2.clone();
            for ((r, c), &g) in analytic.indexed_iter() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].2[[r, c]] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].2[[r, c]] -= eps;
                let fd = (plus.loss_and_grad(&batch, &mode).unwrap().0.total
                    - minus.loss_and_grad(&batch, &mode).unwrap().0.total)
                    / (2.0 * eps);
                assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "{name}[{r},{c}]: fd {fd} vs {g}");
            }
        }
    }
}
