//! Set-prediction losses: class-agnostic Hungarian matching, per-class
//! matching for conditioned training, the restricted first-stage loss, and
//! federated classification for open-vocabulary finetuning.
//!
//! The matching cost per (prediction, ground truth) pair uses the same
//! weighted terms as the loss: 2·BCE + 2·(1 − GIoU) + 5·L1, with BCE taken on
//! clamped probabilities.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{stable_sigmoid, Mat, Tape, Var};
use crate::decoder::TapedLayer;
use crate::error::{DecolaError, Result};
use crate::geometry::{self, boxes_to_mat, cxcywh_to_xyxy};

/// Loss-term weights (cls, giou, l1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            giou: 2.0,
            l1: 5.0,
        }
    }
}

const PROB_CLAMP: f64 = 1e-6;

/// One ground-truth object (class name + normalized CXCYWH box).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: String,
    pub box_cxcywh: [f64; 4],
}

/// Injective prediction→ground-truth assignment with its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index) pairs.
    pub assignment: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub total_cost: f64,
}

impl MatchResult {
    fn empty(num_preds: usize) -> Self {
        Self {
            assignment: Vec::new(),
            unmatched_predictions: (0..num_preds).collect(),
            total_cost: 0.0,
        }
    }

    /// Ground-truth index matched to each prediction, if any.
    pub fn gt_of_prediction(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for &(p, g) in &self.assignment {
            out[p] = Some(g);
        }
        out
    }
}

/// Globally optimal injective assignment of min(|P|, |G|) pairs minimizing
/// total cost (successive-shortest-path Hungarian with potentials).
pub fn match_hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    for ((r, c), v) in cost.indexed_iter() {
        if v.is_nan() {
            return Err(DecolaError::NanCost { row: r, col: c });
        }
    }
    let (np, ng) = cost.dim();
    if np == 0 || ng == 0 {
        return Ok(MatchResult::empty(np));
    }

    // solve with rows = smaller side, transposing if needed
    let transposed = np > ng;
    let a = if transposed {
        cost.t().to_owned()
    } else {
        cost.clone()
    };
    let (n, m) = a.dim();

    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = row assigned to column j; m is the virtual start column
    let mut p = vec![usize::MAX; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 0..n {
        p[m] = i;
        let mut j0 = m;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let cur = a[(i0, j)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    if p[j] != usize::MAX {
                        u[p[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == usize::MAX {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == m {
                break;
            }
        }
    }

    let mut assignment = Vec::with_capacity(n);
    for j in 0..m {
        if p[j] != usize::MAX {
            let (pred, gt) = if transposed { (j, p[j]) } else { (p[j], j) };
            assignment.push((pred, gt));
        }
    }
    assignment.sort_unstable();
    let total_cost = assignment.iter().map(|&(p, g)| cost[(p, g)]).sum();
    let matched: Vec<usize> = assignment.iter().map(|&(p, _)| p).collect();
    let unmatched_predictions = (0..np).filter(|i| !matched.contains(i)).collect();
    Ok(MatchResult {
        assignment,
        unmatched_predictions,
        total_cost,
    })
}

fn bce_prob(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// The weighted matching cost for one prediction/ground-truth pair.
pub fn pair_cost(prob: f64, pred_cxcywh: [f64; 4], gt_cxcywh: [f64; 4], w: &LossWeights) -> f64 {
    let giou = geometry::giou_pair_xyxy(cxcywh_to_xyxy(pred_cxcywh), cxcywh_to_xyxy(gt_cxcywh));
    let l1 = geometry::l1_pair(pred_cxcywh, gt_cxcywh);
    w.cls * bce_prob(prob, 1.0) + w.giou * (1.0 - giou) + w.l1 * l1
}

/// Pairwise cost matrix for detection matching.
pub fn detection_cost_matrix(
    pred_boxes: &[[f64; 4]],
    pred_probs: &[f64],
    gt_boxes: &[[f64; 4]],
    w: &LossWeights,
) -> Array2<f64> {
    let mut cost = Array2::zeros((pred_boxes.len(), gt_boxes.len()));
    for (i, (pb, &prob)) in pred_boxes.iter().zip(pred_probs).enumerate() {
        for (j, gb) in gt_boxes.iter().enumerate() {
            cost[(i, j)] = pair_cost(prob, *pb, *gb, w);
        }
    }
    cost
}

/// Hungarian matching restricted to one conditioned class: predictions from
/// queries conditioned on y against the ground truth of class y only. Empty
/// ground truth is legal; every prediction becomes a negative.
pub fn match_per_class(
    pred_boxes: &[[f64; 4]],
    pred_probs: &[f64],
    gt_boxes: &[[f64; 4]],
    w: &LossWeights,
) -> Result<MatchResult> {
    if gt_boxes.is_empty() {
        return Ok(MatchResult::empty(pred_boxes.len()));
    }
    match_hungarian(&detection_cost_matrix(pred_boxes, pred_probs, gt_boxes, w))
}

/// Scalar loss components of one image (unweighted term values plus the
/// weighted total): `total = w.cls·cls + w.giou·giou + w.l1·l1 + first_stage`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub first_stage: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// A set loss still on the tape, with reporting values.
pub struct TapedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn zero(tape: &Tape) -> Var {
    tape.constant(Mat::zeros((1, 1)))
}

fn gt_boxes_of_class(gt: &[GtObject], class: &str) -> Vec<[f64; 4]> {
    gt.iter()
        .filter(|g| g.class == class)
        .map(|g| g.box_cxcywh)
        .collect()
}

/// Deep-supervised per-class set loss for conditioned-binary mode.
///
/// Per decoder layer and per conditioned class: Hungarian-match that class's
/// queries to its ground truth, then binary CE over all the class's queries
/// (matched → 1, rest → 0) plus GIoU and L1 on matched boxes. Layer losses
/// are averaged; everything is normalized by the image's ground-truth count
/// (min 1).
pub fn taped_set_loss_binary(
    tape: &Tape,
    layers: &[TapedLayer],
    blocks: &[(usize, usize)],
    block_classes: &[String],
    gt: &[GtObject],
    w: &LossWeights,
) -> TapedLoss {
    assert_eq!(blocks.len(), block_classes.len());
    let norm = gt.len().max(1) as f64;
    let nl = layers.len() as f64;
    let mut cls_sum = zero(tape);
    let mut giou_sum = zero(tape);
    let mut l1_sum = zero(tape);

    for layer in layers {
        let boxes_val = tape.value(layer.boxes);
        let logits_val = tape.value(layer.logits);
        let total_q = boxes_val.nrows();
        let mut targets = Mat::zeros((total_q, 1));
        let mut matched_rows: Vec<usize> = Vec::new();
        let mut matched_gt: Vec<[f64; 4]> = Vec::new();

        for (&(start, len), class) in blocks.iter().zip(block_classes) {
            let g_y = gt_boxes_of_class(gt, class);
            if g_y.is_empty() {
                continue;
            }
            let p_boxes: Vec<[f64; 4]> = (start..start + len)
                .map(|q| {
                    [
                        boxes_val[(q, 0)],
                        boxes_val[(q, 1)],
                        boxes_val[(q, 2)],
                        boxes_val[(q, 3)],
                    ]
                })
                .collect();
            let p_probs: Vec<f64> = (start..start + len)
                .map(|q| stable_sigmoid(logits_val[(q, 0)]))
                .collect();
            let m = match_per_class(&p_boxes, &p_probs, &g_y, w).expect("finite costs");
            for &(p, g) in &m.assignment {
                targets[(start + p, 0)] = 1.0;
                matched_rows.push(start + p);
                matched_gt.push(g_y[g]);
            }
        }

        let bce = tape.bce_with_logits(layer.logits, targets);
        let bce_sum = tape.sum_all(bce);
        cls_sum = tape.add(cls_sum, bce_sum);
        if !matched_rows.is_empty() {
            let pred = tape.gather_rows(layer.boxes, &matched_rows);
            let gt_mat = boxes_to_mat(&matched_gt);
            let gl = tape.giou_loss(pred, gt_mat.clone());
            let gl_sum = tape.sum_all(gl);
            giou_sum = tape.add(giou_sum, gl_sum);
            let l1 = tape.l1_to(pred, gt_mat);
            let l1s = tape.sum_all(l1);
            l1_sum = tape.add(l1_sum, l1s);
        }
    }

    finish_set_loss(tape, cls_sum, giou_sum, l1_sum, nl, norm, w)
}

/// Deterministic federated class subset: all present classes plus
/// `sample_size` uniformly sampled absent ones, in ascending index order.
pub fn federated_class_subset(
    num_classes: usize,
    present: &[usize],
    sample_size: usize,
    seed: u64,
) -> Vec<usize> {
    let mut absent: Vec<usize> = (0..num_classes).filter(|c| !present.contains(c)).collect();
    let take = sample_size.min(absent.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates over the sorted absent list
    for i in 0..take {
        let j = rng.gen_range(i..absent.len());
        absent.swap(i, j);
    }
    let mut subset: Vec<usize> = present.to_vec();
    subset.extend_from_slice(&absent[..take]);
    subset.sort_unstable();
    subset.dedup();
    subset
}

/// Deep-supervised multi-class set loss for open-vocabulary mode: Hungarian
/// matching over all queries with the multi-class CE cost, federated
/// classification over present ∪ sampled-absent classes, box terms on
/// matched pairs. `box_on_matched=false` drops the box terms (pseudo-label
/// regression ablation).
#[allow(clippy::too_many_arguments)]
pub fn taped_set_loss_multiclass(
    tape: &Tape,
    layers: &[TapedLayer],
    classes: &[String],
    gt: &[GtObject],
    w: &LossWeights,
    federated_sample: usize,
    federated_seed: u64,
    box_on_matched: bool,
) -> TapedLoss {
    let norm = gt.len().max(1) as f64;
    let nl = layers.len() as f64;
    let gt_class_ids: Vec<usize> = gt
        .iter()
        .map(|g| {
            classes
                .iter()
                .position(|c| c == &g.class)
                .expect("gt class must be in the training vocabulary")
        })
        .collect();
    let mut present: Vec<usize> = gt_class_ids.clone();
    present.sort_unstable();
    present.dedup();
    let subset = federated_class_subset(classes.len(), &present, federated_sample, federated_seed);

    let mut cls_sum = zero(tape);
    let mut giou_sum = zero(tape);
    let mut l1_sum = zero(tape);

    for layer in layers {
        let boxes_val = tape.value(layer.boxes);
        let logits_val = tape.value(layer.logits);
        let total_q = boxes_val.nrows();

        let m = if gt.is_empty() {
            MatchResult::empty(total_q)
        } else {
            let mut cost = Array2::zeros((total_q, gt.len()));
            for q in 0..total_q {
                let pb = [
                    boxes_val[(q, 0)],
                    boxes_val[(q, 1)],
                    boxes_val[(q, 2)],
                    boxes_val[(q, 3)],
                ];
                for (j, g) in gt.iter().enumerate() {
                    let prob = stable_sigmoid(logits_val[(q, gt_class_ids[j])]);
                    cost[(q, j)] = pair_cost(prob, pb, g.box_cxcywh, w);
                }
            }
            match_hungarian(&cost).expect("finite costs")
        };

        // federated classification over the class subset
        let mut targets = Mat::zeros((total_q, subset.len()));
        for &(p, g) in &m.assignment {
            let cid = gt_class_ids[g];
            let col = subset.iter().position(|&c| c == cid).expect("present in subset");
            targets[(p, col)] = 1.0;
        }
        let sub_logits = tape.gather_cols(layer.logits, &subset);
        let bce = tape.bce_with_logits(sub_logits, targets);
        let bce_sum = tape.sum_all(bce);
        cls_sum = tape.add(cls_sum, bce_sum);

        if box_on_matched && !m.assignment.is_empty() {
            let rows: Vec<usize> = m.assignment.iter().map(|&(p, _)| p).collect();
            let gts: Vec<[f64; 4]> = m.assignment.iter().map(|&(_, g)| gt[g].box_cxcywh).collect();
            let pred = tape.gather_rows(layer.boxes, &rows);
            let gt_mat = boxes_to_mat(&gts);
            let gl = tape.giou_loss(pred, gt_mat.clone());
            let gl_sum = tape.sum_all(gl);
            giou_sum = tape.add(giou_sum, gl_sum);
            let l1 = tape.l1_to(pred, gt_mat);
            let l1s = tape.sum_all(l1);
            l1_sum = tape.add(l1_sum, l1s);
        }
    }

    finish_set_loss(tape, cls_sum, giou_sum, l1_sum, nl, norm, w)
}

fn finish_set_loss(
    tape: &Tape,
    cls_sum: Var,
    giou_sum: Var,
    l1_sum: Var,
    num_layers: f64,
    norm: f64,
    w: &LossWeights,
) -> TapedLoss {
    let scale = 1.0 / (num_layers * norm);
    let cls = tape.scale(cls_sum, scale);
    let giou = tape.scale(giou_sum, scale);
    let l1 = tape.scale(l1_sum, scale);
    let total = {
        let a = tape.scale(cls, w.cls);
        let b = tape.scale(giou, w.giou);
        let c = tape.scale(l1, w.l1);
        let ab = tape.add(a, b);
        tape.add(ab, c)
    };
    let breakdown = LossBreakdown {
        cls: tape.scalar_value(cls),
        giou: tape.scalar_value(giou),
        l1: tape.scalar_value(l1),
        first_stage: 0.0,
        total: tape.scalar_value(total),
        weights: *w,
    };
    TapedLoss { total, breakdown }
}

/// First-stage loss with per-class top-K candidate restriction.
///
/// For each conditioned class, candidate locations are restricted to the
/// top-K by that class's score before Hungarian matching; the restricted set
/// then receives binary CE (matched → 1) plus box terms on matched regressed
/// proposals. K larger than the grid uses all locations. Normalized by the
/// ground-truth count (min 1).
#[allow(clippy::too_many_arguments)]
pub fn taped_first_stage_loss(
    tape: &Tape,
    score_logits: Var,
    proposals: Var,
    class_scores: &[Vec<f64>],
    block_classes: &[String],
    gt: &[GtObject],
    top_k: usize,
    w: &LossWeights,
) -> TapedLoss {
    let norm = gt.len().max(1) as f64;
    let (num_locations, num_classes) = tape.shape(score_logits);
    assert_eq!(num_classes, block_classes.len());
    let proposals_val = tape.value(proposals);
    let k = top_k.min(num_locations);

    let mut cls_sum = zero(tape);
    let mut giou_sum = zero(tape);
    let mut l1_sum = zero(tape);

    for (col, class) in block_classes.iter().enumerate() {
        let scores = &class_scores[col];
        assert_eq!(scores.len(), num_locations);
        let restricted = crate::selection::select_topk(scores, k).expect("k clamped to grid");
        let g_y = gt_boxes_of_class(gt, class);

        let logits_col = tape.slice_cols(score_logits, col, 1);
        let sel_logits = tape.gather_rows(logits_col, &restricted);
        let sel_logits_val = tape.value(sel_logits);

        let mut targets = Mat::zeros((restricted.len(), 1));
        let mut matched_rows = Vec::new();
        let mut matched_gt = Vec::new();
        if !g_y.is_empty() {
            let p_boxes: Vec<[f64; 4]> = restricted
                .iter()
                .map(|&i| {
                    [
                        proposals_val[(i, 0)],
                        proposals_val[(i, 1)],
                        proposals_val[(i, 2)],
                        proposals_val[(i, 3)],
                    ]
                })
                .collect();
            let p_probs: Vec<f64> = (0..restricted.len())
                .map(|r| stable_sigmoid(sel_logits_val[(r, 0)]))
                .collect();
            let m = match_per_class(&p_boxes, &p_probs, &g_y, w).expect("finite costs");
            for &(p, g) in &m.assignment {
                targets[(p, 0)] = 1.0;
                matched_rows.push(restricted[p]);
                matched_gt.push(g_y[g]);
            }
        }

        let bce = tape.bce_with_logits(sel_logits, targets);
        let bce_sum = tape.sum_all(bce);
        cls_sum = tape.add(cls_sum, bce_sum);
        if !matched_rows.is_empty() {
            let pred = tape.gather_rows(proposals, &matched_rows);
            let gt_mat = boxes_to_mat(&matched_gt);
            let gl = tape.giou_loss(pred, gt_mat.clone());
            let gl_sum = tape.sum_all(gl);
            giou_sum = tape.add(giou_sum, gl_sum);
            let l1 = tape.l1_to(pred, gt_mat);
            let l1s = tape.sum_all(l1);
            l1_sum = tape.add(l1_sum, l1s);
        }
    }

    finish_set_loss(tape, cls_sum, giou_sum, l1_sum, 1.0, norm, w)
}

/// Value-level federated classification loss (sum over queries and the class
/// subset), deterministic under the seed.
pub fn federated_class_loss(
    logits: &Mat,
    matched_class: &[Option<usize>],
    present: &[usize],
    sample_size: usize,
    seed: u64,
) -> f64 {
    let subset = federated_class_subset(logits.ncols(), present, sample_size, seed);
    let mut total = 0.0;
    for q in 0..logits.nrows() {
        for &c in &subset {
            let target = if matched_class[q] == Some(c) { 1.0 } else { 0.0 };
            total += bce_prob(stable_sigmoid(logits[(q, c)]), target);
        }
    }
    total
}

/// Derives a per-image loss seed from a run seed, step and image id.
pub fn derive_loss_seed(run_seed: u64, step: usize, image_id: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update((step as u64).to_le_bytes());
    hasher.update(image_id.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
