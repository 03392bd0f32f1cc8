//! Objectness scoring and top-k query selection: the classic learned-vector
//! score and the language-conditioned cosine score, with per-class independent
//! top-k so classes never compete for query budget.

use ndarray::Axis;

use crate::autodiff::Mat;
use crate::encoder::{flatten_grid, FeatureGrid, GridCoord};
use crate::error::{DecolaError, Result};
use crate::vocabulary::ClassEmbedding;

/// Queries selected for one conditioned class.
#[derive(Debug, Clone)]
pub struct PerClassQueries {
    pub class: String,
    /// Flattened grid indices of the selected locations, in score order.
    pub indices: Vec<usize>,
    pub coords: Vec<GridCoord>,
    /// First-stage cosine scores (before temperature), in [-1, 1].
    pub scores: Vec<f64>,
    /// n×d gathered grid features.
    pub features: Mat,
    /// CXCYWH proposal boxes, one per selected location.
    pub proposal_boxes: Vec<[f64; 4]>,
}

/// Per-class query features with their source locations and scores.
#[derive(Debug, Clone)]
pub struct ConditionedQueryBatch {
    pub per_class: Vec<PerClassQueries>,
    /// Queries per class; every entry of `per_class` holds exactly this many.
    pub n: usize,
    pub conditioning: Vec<ClassEmbedding>,
}

impl ConditionedQueryBatch {
    pub fn class(&self, name: &str) -> Option<&PerClassQueries> {
        self.per_class.iter().find(|p| p.class == name)
    }

    pub fn total_queries(&self) -> usize {
        self.per_class.len() * self.n
    }

    /// Contiguous (start, len) block per class, in conditioning order.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        (0..self.per_class.len()).map(|k| (k * self.n, self.n)).collect()
    }

    /// All selected flattened-grid indices, block order.
    pub fn all_indices(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .flat_map(|p| p.indices.iter().copied())
            .collect()
    }
}

/// Classic objectness: unnormalized dot product with a learned vector.
pub fn score_classic(features: &Mat, w: &[f64]) -> Result<Vec<f64>> {
    if features.ncols() != w.len() {
        return Err(DecolaError::DimensionMismatch {
            context: "classic objectness vector".into(),
            expected: features.ncols(),
            got: w.len(),
        });
    }
    Ok(features
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect())
}

/// Conditioned objectness: cosine between each location's feature and the
/// class embedding. Zero-norm features score 0; their count is returned.
pub fn score_conditioned(features: &Mat, t: &ClassEmbedding) -> Result<(Vec<f64>, usize)> {
    if features.ncols() != t.dim() {
        return Err(DecolaError::DimensionMismatch {
            context: format!("conditioned scoring against `{}`", t.name),
            expected: features.ncols(),
            got: t.dim(),
        });
    }
    let tn = t.vector.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut zero_norm = 0;
    let scores = features
        .rows()
        .into_iter()
        .map(|row| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                zero_norm += 1;
                return 0.0;
            }
            let dot: f64 = row.iter().zip(&t.vector).map(|(a, b)| a * b).sum();
            dot / (norm * tn)
        })
        .collect();
    Ok((scores, zero_norm))
}

/// Indices of the k largest scores, ties broken by smallest index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(DecolaError::TopKTooLarge {
            k,
            available: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Per-class independent selection over pre-flattened features. `proposals`
/// supplies the box attached to each location (anchors, or first-stage
/// regressed proposals).
pub fn select_conditioned(
    features: &Mat,
    coords: &[GridCoord],
    proposals: &[[f64; 4]],
    conditioning: &[ClassEmbedding],
    n: usize,
) -> Result<ConditionedQueryBatch> {
    if conditioning.is_empty() {
        return Err(DecolaError::EmptyConditioning);
    }
    if n > features.nrows() {
        return Err(DecolaError::TopKTooLarge {
            k: n,
            available: features.nrows(),
        });
    }
    let mut per_class = Vec::with_capacity(conditioning.len());
    for emb in conditioning {
        let (scores, _) = score_conditioned(features, emb)?;
        let indices = select_topk(&scores, n)?;
        let sel_scores: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
        let sel_coords: Vec<GridCoord> = indices.iter().map(|&i| coords[i]).collect();
        let boxes: Vec<[f64; 4]> = indices.iter().map(|&i| proposals[i]).collect();
        let feats = features.select(Axis(0), &indices);
        per_class.push(PerClassQueries {
            class: emb.name.clone(),
            indices,
            coords: sel_coords,
            scores: sel_scores,
            features: feats,
            proposal_boxes: boxes,
        });
    }
    Ok(ConditionedQueryBatch {
        per_class,
        n,
        conditioning: conditioning.to_vec(),
    })
}

/// Selection over a [`FeatureGrid`] with plain cell anchors as proposals.
pub fn build_conditioned_queries(
    g: &FeatureGrid,
    conditioning: &[ClassEmbedding],
    n: usize,
) -> Result<ConditionedQueryBatch> {
    let flat = flatten_grid(g);
    select_conditioned(&flat.features, &flat.coords, &flat.anchors, conditioning, n)
}
