//! k-NN hypergraphs over frame features and the spectral hypergraph
//! convolution `Y = σ(Dv^-1/2 H W De^-1 Hᵀ Dv^-1/2 X Θ)`.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Linear};
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum HypergraphError {
    #[error("need at least {needed} vertices, got {got}")]
    TooFewVertices { needed: usize, got: usize },
    #[error("k must be >= 1")]
    InvalidK,
    #[error("vertex {0} belongs to no hyperedge")]
    ZeroDegreeVertex(usize),
    #[error("hyperedge {0} is empty")]
    EmptyHyperedge(usize),
    #[error("hyperedge {edge} references vertex {vertex} outside 0..{n}")]
    VertexOutOfRange { edge: usize, vertex: usize, n: usize },
    #[error("hyperedge {0} lists a vertex twice")]
    DuplicateMember(usize),
    #[error("hyperedge {0} has a non-positive or non-finite weight")]
    InvalidWeight(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("features contain non-finite values")]
    NonFiniteFeatures,
    #[error("vertex {0} is not assigned to a video")]
    EmptyVideoGroup(usize),
}

/// Sparse hypergraph: each hyperedge is a list of member vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n_vertices: usize,
    edges: Vec<Vec<usize>>,
    weights: Vec<f64>,
    vertex_degree: Vec<f64>,
}

impl Hypergraph {
    /// Builds a hypergraph and its cached degrees. Vertices without any
    /// hyperedge are allowed here but rejected by [`Hypergraph::validate`].
    pub fn new(n_vertices: usize, edges: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Hypergraph, HypergraphError> {
        if edges.len() != weights.len() {
            return Err(HypergraphError::ShapeMismatch(format!(
                "{} hyperedges but {} weights",
                edges.len(),
                weights.len()
            )));
        }
        let mut vertex_degree = vec![0.0; n_vertices];
        for (e, (members, &w)) in edges.iter().zip(&weights).enumerate() {
            if members.is_empty() {
                return Err(HypergraphError::EmptyHyperedge(e));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(HypergraphError::InvalidWeight(e));
            }
            for (i, &v) in members.iter().enumerate() {
                if v >= n_vertices {
                    return Err(HypergraphError::VertexOutOfRange { edge: e, vertex: v, n: n_vertices });
                }
                if members[..i].contains(&v) {
                    return Err(HypergraphError::DuplicateMember(e));
                }
                vertex_degree[v] += w;
            }
        }
        Ok(Hypergraph { n_vertices, edges, weights, vertex_degree })
    }

    pub fn validate(&self) -> Result<(), HypergraphError> {
        match self.vertex_degree.iter().position(|&d| d <= 0.0) {
            Some(v) => Err(HypergraphError::ZeroDegreeVertex(v)),
            None => Ok(()),
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `dv[v] = Σ_e H[v,e]·w[e]`.
    pub fn vertex_degrees(&self) -> &[f64] {
        &self.vertex_degree
    }

    /// `de[e] = Σ_v H[v,e]`.
    pub fn edge_degrees(&self) -> Vec<usize> {
        self.edges.iter().map(Vec::len).collect()
    }

    pub fn mean_vertex_degree(&self) -> f64 {
        self.vertex_degree.iter().sum::<f64>() / self.n_vertices as f64
    }

    /// Dense `N × E` 0/1 incidence matrix.
    pub fn incidence(&self) -> Array2<f64> {
        let mut h = Array2::zeros((self.n_vertices, self.edges.len()));
        for (e, members) in self.edges.iter().enumerate() {
            for &v in members {
                h[[v, e]] = 1.0;
            }
        }
        h
    }

    pub fn to_json(&self) -> HypergraphJson {
        let incidence = self
            .edges
            .iter()
            .enumerate()
            .flat_map(|(e, members)| members.iter().map(move |&v| [v, e]))
            .collect();
        HypergraphJson { n_vertices: self.n_vertices, n_edges: self.edges.len(), incidence, weights: self.weights.clone() }
    }

    pub fn from_json(doc: &HypergraphJson) -> Result<Hypergraph, HypergraphError> {
        let mut edges = vec![Vec::new(); doc.n_edges];
        for &[v, e] in &doc.incidence {
            let members = edges.get_mut(e).ok_or_else(|| {
                HypergraphError::ShapeMismatch(format!("incidence names edge {e} of {}", doc.n_edges))
            })?;
            members.push(v);
        }
        Hypergraph::new(doc.n_vertices, edges, doc.weights.clone())
    }
}

/// Serialised form: incidence as `[vertex, edge]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergraphJson {
    pub n_vertices: usize,
    pub n_edges: usize,
    pub incidence: Vec<[usize; 2]>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildWarning {
    /// Every feature row is identical; neighbours were chosen purely by index.
    DegenerateFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnHypergraph {
    pub graph: Hypergraph,
    pub warning: Option<BuildWarning>,
}

pub const DEFAULT_K: [usize; 3] = [3, 4, 5];

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One hyperedge per vertex per `k`: the vertex plus its `k−1` nearest
/// neighbours by Euclidean distance, ties to the lower index. Hyperedges are
/// ordered vertex-major (`e = v·|k_list| + j`) and all weights are 1.
pub fn build_knn_hypergraph(
    x: ArrayView2<f64>,
    k_list: &[usize],
    exec: Execution,
) -> Result<KnnHypergraph, HypergraphError> {
    let n = x.nrows();
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(HypergraphError::InvalidK);
    }
    let k_max = *k_list.iter().max().expect("non-empty");
    if n < k_max {
        return Err(HypergraphError::TooFewVertices { needed: k_max, got: n });
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(HypergraphError::NonFiniteFeatures);
    }
    let neighbours = par::map_indexed(exec, n, |v| {
        let mut others: Vec<(f64, usize)> =
            (0..n).filter(|&u| u != v).map(|u| (squared_distance(x.row(v), x.row(u)), u)).collect();
        let take = k_max - 1;
        if take > 0 && take < others.len() {
            others.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.truncate(take);
        }
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(take);
        others.into_iter().map(|(_, u)| u).collect::<Vec<_>>()
    });
    let mut edges = Vec::with_capacity(n * k_list.len());
    for (v, nn) in neighbours.iter().enumerate() {
        for &k in k_list {
            let mut members = Vec::with_capacity(k);
            members.push(v);
            members.extend_from_slice(&nn[..k - 1]);
            edges.push(members);
        }
    }
    let weights = vec![1.0; edges.len()];
    let degenerate = n > 1 && (1..n).all(|v| x.row(v) == x.row(0));
    if degenerate {
        log::warn!("all {n} feature rows coincide; k-NN hyperedges fall back to index order");
    }
    Ok(KnnHypergraph {
        graph: Hypergraph::new(n, edges, weights)?,
        warning: degenerate.then_some(BuildWarning::DegenerateFeatures),
    })
}

/// `A = Dv^-1/2 H W De^-1 Hᵀ Dv^-1/2`, accumulated hyperedge by hyperedge.
/// Each entry pair `(u,v)`/`(v,u)` receives the same additions in the same
/// order, so the result is exactly symmetric.
pub fn propagation_matrix(g: &Hypergraph) -> Result<Array2<f64>, HypergraphError> {
    g.validate()?;
    let inv_sqrt: Vec<f64> = g.vertex_degrees().iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut a = Array2::zeros((g.n_vertices(), g.n_vertices()));
    for (members, &w) in g.edges().iter().zip(g.weights()) {
        let c = w / members.len() as f64;
        for &u in members {
            for &v in members {
                a[[u, v]] += c * (inv_sqrt[u] * inv_sqrt[v]);
            }
        }
    }
    Ok(a)
}

/// Intermediate values of one HGNN layer, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HgnnCache {
    /// `A·X`
    pub ax: Array2<f64>,
    /// `A·X·Θ` before the activation
    pub pre: Array2<f64>,
    pub output: Array2<f64>,
}

fn check_shapes(a: &Array2<f64>, x: ArrayView2<f64>, theta: &Array2<f64>) -> Result<(), HypergraphError> {
    if a.nrows() != a.ncols() || a.ncols() != x.nrows() {
        return Err(HypergraphError::ShapeMismatch(format!(
            "propagation {:?} vs features {:?}",
            a.dim(),
            x.dim()
        )));
    }
    if x.ncols() != theta.nrows() {
        return Err(HypergraphError::ShapeMismatch(format!("features {:?} vs theta {:?}", x.dim(), theta.dim())));
    }
    Ok(())
}

/// Forward pass given a precomputed propagation matrix.
pub fn hgnn_forward_with(
    a: &Array2<f64>,
    x: ArrayView2<f64>,
    theta: &Array2<f64>,
    slope: f64,
) -> Result<HgnnCache, HypergraphError> {
    check_shapes(a, x, theta)?;
    let ax = a.dot(&x);
    let pre = ax.dot(theta);
    let output = nn::leaky_relu_mat(&pre, slope);
    Ok(HgnnCache { ax, pre, output })
}

pub fn hgnn_forward(
    g: &Hypergraph,
    x: ArrayView2<f64>,
    theta: &Array2<f64>,
    slope: f64,
) -> Result<Array2<f64>, HypergraphError> {
    Ok(hgnn_forward_with(&propagation_matrix(g)?, x, theta, slope)?.output)
}

/// Returns `(dL/dX, dL/dΘ)` for upstream gradient `dL/dY`.
pub fn hgnn_backward_with(
    a: &Array2<f64>,
    cache: &HgnnCache,
    theta: &Array2<f64>,
    upstream: &Array2<f64>,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>), HypergraphError> {
    if upstream.dim() != cache.pre.dim() {
        return Err(HypergraphError::ShapeMismatch(format!(
            "upstream {:?} vs output {:?}",
            upstream.dim(),
            cache.pre.dim()
        )));
    }
    let delta = nn::leaky_relu_backward(&cache.pre, upstream, slope);
    let grad_theta = cache.ax.t().dot(&delta);
    let grad_x = a.t().dot(&delta.dot(&theta.t()));
    Ok((grad_x, grad_theta))
}

pub fn hgnn_backward(
    g: &Hypergraph,
    x: ArrayView2<f64>,
    theta: &Array2<f64>,
    upstream: &Array2<f64>,
    slope: f64,
) -> Result<(Array2<f64>, Array2<f64>), HypergraphError> {
    let a = propagation_matrix(g)?;
    let cache = hgnn_forward_with(&a, x, theta, slope)?;
    hgnn_backward_with(&a, &cache, theta, upstream, slope)
}

/// The three per-indicator classification heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SriHeads {
    pub engagement: Linear,
    pub emotion: Linear,
    pub emr: Linear,
}

impl SriHeads {
    pub fn zeros(width: usize) -> SriHeads {
        SriHeads { engagement: Linear::zeros(width, 2), emotion: Linear::zeros(width, 3), emr: Linear::zeros(width, 3) }
    }

    pub fn heads(&self) -> [&Linear; 3] {
        [&self.engagement, &self.emotion, &self.emr]
    }

    pub fn heads_mut(&mut self) -> [&mut Linear; 3] {
        [&mut self.engagement, &mut self.emotion, &mut self.emr]
    }
}

/// Per-video logits, one matrix per indicator (`videos × classes`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    pub pooled: Array2<f64>,
    pub logits: [Array2<f64>; 3],
}

/// Mean-pools the vertices of each video, then applies each head.
pub fn predict_heads(
    y: ArrayView2<f64>,
    membership: &[usize],
    n_videos: usize,
    heads: &SriHeads,
) -> Result<HeadLogits, HypergraphError> {
    if membership.len() != y.nrows() {
        return Err(HypergraphError::ShapeMismatch(format!(
            "{} memberships for {} vertices",
            membership.len(),
            y.nrows()
        )));
    }
    if heads.engagement.input_dim() != y.ncols() {
        return Err(HypergraphError::ShapeMismatch(format!(
            "head input {} vs vertex width {}",
            heads.engagement.input_dim(),
            y.ncols()
        )));
    }
    let mut pooled = Array2::zeros((n_videos, y.ncols()));
    let mut counts = vec![0usize; n_videos];
    for (row, &video) in y.rows().into_iter().zip(membership) {
        if video >= n_videos {
            return Err(HypergraphError::ShapeMismatch(format!("video index {video} >= {n_videos}")));
        }
        pooled.row_mut(video).scaled_add(1.0, &row);
        counts[video] += 1;
    }
    if let Some(v) = counts.iter().position(|&c| c == 0) {
        return Err(HypergraphError::EmptyVideoGroup(v));
    }
    for (mut row, &c) in pooled.rows_mut().into_iter().zip(&counts) {
        row.mapv_inplace(|x| x / c as f64);
    }
    let logits = heads.heads().map(|h| h.forward(pooled.view()));
    Ok(HeadLogits { pooled, logits })
}

/// Backward of [`predict_heads`]: accumulates head gradients and returns
/// `dL/dY`.
pub fn predict_heads_backward(
    out: &HeadLogits,
    membership: &[usize],
    heads: &SriHeads,
    dlogits: &[Array2<f64>; 3],
    grad: &mut SriHeads,
) -> Array2<f64> {
    let mut dpooled = Array2::zeros(out.pooled.raw_dim());
    for ((head, g), dl) in heads.heads().into_iter().zip(grad.heads_mut()).zip(dlogits) {
        dpooled += &head.backward(out.pooled.view(), dl, g);
    }
    let mut counts = vec![0usize; out.pooled.nrows()];
    for &v in membership {
        counts[v] += 1;
    }
    let mut dy = Array2::zeros((membership.len(), out.pooled.ncols()));
    for (mut row, &v) in dy.rows_mut().into_iter().zip(membership) {
        row.assign(&dpooled.row(v));
        row.mapv_inplace(|x| x / counts[v] as f64);
    }
    dy
}

/// Row-stacks per-video frame features and returns the vertex → video map.
pub fn stack_videos(videos: &[Array2<f64>]) -> (Array2<f64>, Vec<usize>) {
    let views: Vec<_> = videos.iter().map(|v| v.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let membership = videos.iter().enumerate().flat_map(|(i, v)| std::iter::repeat_n(i, v.nrows())).collect();
    (x, membership)
}
