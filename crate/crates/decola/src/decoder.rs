//! Query decoder: block-isolated self-attention (queries of one class never
//! see another class), dense cross-attention to the grid, iterative box
//! refinement in inverse-sigmoid space with look-forward-twice gradient
//! routing, and the binary / multi-class cosine score heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_sigmoid, stable_sigmoid, Mat, Tape, Var};
use crate::error::{DecolaError, Result};
use crate::nn::{
    self, block_diagonal_mask, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
};

const REF_EPS: f64 = 1e-6;

/// Head regime of the second stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One scalar presence logit per query; the query's class is its
    /// provenance class.
    ConditionedBinary,
    /// One logit per (query, class) over an evaluation vocabulary.
    OpenVocabMulticlass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Cosine-to-logit temperature for the score heads.
    pub temp: f64,
    /// Initial value of the scalar classifier bias.
    pub bias_init: f64,
}

/// Values snapshot of one decoder layer's predictions.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    pub boxes: Vec<[f64; 4]>,
    /// Q×1 (binary) or Q×C (multiclass) logits.
    pub logits: Mat,
}

/// Per-layer refined boxes and head logits.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub per_layer: Vec<LayerPrediction>,
    pub mode: HeadMode,
    /// Block classes (binary mode) or logit-column classes (multiclass mode).
    pub classes: Vec<String>,
    /// Provenance class index per query; present in binary mode only.
    pub query_class: Option<Vec<usize>>,
}

impl DecoderOutput {
    pub fn final_layer(&self) -> &LayerPrediction {
        self.per_layer.last().expect("decoder has at least one layer")
    }

    pub fn num_queries(&self) -> usize {
        self.final_layer().boxes.len()
    }
}

/// Instrumentation counters for one decode pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Self-attention score positions formed (per head): Σ blockᵢ² in block
    /// mode, (ΣblockᵢLen)² in naive masked mode.
    pub self_attn_score_elems: u64,
    pub cross_attn_score_elems: u64,
    /// Times the inverse-sigmoid clamp bound a reference coordinate.
    pub ref_clamps: u64,
}

/// What the score head is conditioned on.
pub enum HeadConditioning {
    /// Binary: one embedding row per query (its provenance class).
    PerQuery(Mat),
    /// Multiclass: one embedding row per vocabulary class.
    AllClasses(Mat),
}

/// Decoder layer outputs still on the tape.
pub struct TapedDecode {
    pub layers: Vec<TapedLayer>,
    /// Final hidden states, for head-equivalence checks.
    pub hidden: Vec<Var>,
    pub stats: DecodeStats,
}

pub struct TapedLayer {
    pub boxes: Var,
    pub logits: Var,
}

fn inv_sig_mat(boxes: &[[f64; 4]], clamps: &mut u64) -> Mat {
    let mut out = Mat::zeros((boxes.len(), 4));
    for (i, b) in boxes.iter().enumerate() {
        for (j, &p) in b.iter().enumerate() {
            if !(REF_EPS..=1.0 - REF_EPS).contains(&p) {
                *clamps += 1;
            }
            out[(i, j)] = inverse_sigmoid(p, REF_EPS);
        }
    }
    out
}

/// Derives contiguous (start, len) blocks from per-query block ids, rejecting
/// layouts where a block id reappears after a different id.
pub fn blocks_from_ids(block_ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut blocks: Vec<(usize, usize)> = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for (index, &id) in block_ids.iter().enumerate() {
        match blocks.last_mut() {
            Some((start, len)) if block_ids[*start] == id => *len += 1,
            _ => {
                if seen.contains(&id) {
                    return Err(DecolaError::NonContiguousBlocks { block: id, index });
                }
                seen.push(id);
                blocks.push((index, 1));
            }
        }
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelfAttentionMode {
    /// Per-block attention; Σ n² score elements.
    Block,
    /// Full attention with a block-diagonal mask; (Σn)² score elements.
    /// Numerically identical outputs, quadratically more score storage.
    NaiveMasked,
}

/// Standalone block-isolated self-attention over plain values. Returns the
/// output and the number of attention-score positions formed.
pub fn self_attention_grouped(
    attn: &MultiHeadAttention,
    store: &ParamStore,
    queries: &Mat,
    block_ids: &[usize],
    mode: SelfAttentionMode,
) -> Result<(Mat, u64)> {
    assert_eq!(queries.nrows(), block_ids.len(), "one block id per query");
    let blocks = blocks_from_ids(block_ids)?;
    let tape = Tape::new();
    let q = tape.constant(queries.clone());
    let mut elems = 0;
    let out = match mode {
        SelfAttentionMode::Block => attn.attend_blocks(&tape, store, q, q, q, &blocks, &mut elems),
        SelfAttentionMode::NaiveMasked => {
            let mask = block_diagonal_mask(queries.nrows(), &blocks);
            attn.attend_full(&tape, store, q, q, q, Some(&mask), &mut elems)
        }
    };
    Ok((tape.value(out), elems))
}

/// Block-isolated multi-head self-attention (block mode).
pub fn block_self_attention(
    attn: &MultiHeadAttention,
    store: &ParamStore,
    queries: &Mat,
    block_ids: &[usize],
) -> Result<Mat> {
    self_attention_grouped(attn, store, queries, block_ids, SelfAttentionMode::Block)
        .map(|(m, _)| m)
}

pub struct Decoder {
    cfg: DecoderConfig,
    query_proj: Linear,
    query_ln: LayerNorm,
    pos_proj: Linear,
    self_attn: Vec<MultiHeadAttention>,
    ln1: Vec<LayerNorm>,
    cross_attn: Vec<MultiHeadAttention>,
    ln2: Vec<LayerNorm>,
    ffn: Vec<Mlp>,
    ln3: Vec<LayerNorm>,
    box_heads: Vec<Mlp>,
    cls_proj: Linear,
    cls_bias: String,
}

impl Decoder {
    pub fn init(store: &mut ParamStore, seed: u64, cfg: DecoderConfig) -> Self {
        assert_eq!(cfg.dim % 8, 0, "decoder dim must divide by 8");
        let query_proj = Linear::init(store, seed, "dec.query_proj", cfg.dim, cfg.dim);
        let query_ln = LayerNorm::init(store, "dec.query_ln", cfg.dim);
        let pos_proj = Linear::init(store, seed, "dec.pos_proj", cfg.dim, cfg.dim);
        let mut self_attn = Vec::new();
        let mut ln1 = Vec::new();
        let mut cross_attn = Vec::new();
        let mut ln2 = Vec::new();
        let mut ffn = Vec::new();
        let mut ln3 = Vec::new();
        let mut box_heads = Vec::new();
        for l in 0..cfg.layers {
            self_attn.push(MultiHeadAttention::init(
                store,
                seed,
                &format!("dec.layer{l}.self"),
                cfg.dim,
                cfg.heads,
            ));
            ln1.push(LayerNorm::init(store, &format!("dec.layer{l}.ln1"), cfg.dim));
            cross_attn.push(MultiHeadAttention::init(
                store,
                seed,
                &format!("dec.layer{l}.cross"),
                cfg.dim,
                cfg.heads,
            ));
            ln2.push(LayerNorm::init(store, &format!("dec.layer{l}.ln2"), cfg.dim));
            ffn.push(Mlp::init(
                store,
                seed,
                &format!("dec.layer{l}.ffn"),
                &[cfg.dim, cfg.ffn_dim, cfg.dim],
            ));
            ln3.push(LayerNorm::init(store, &format!("dec.layer{l}.ln3"), cfg.dim));
            let head = Mlp::init(
                store,
                seed,
                &format!("dec.layer{l}.box"),
                &[cfg.dim, cfg.dim, 4],
            );
            // zero-init the final box layer: refinement starts at identity
            let last = head.layers.last().unwrap();
            store.set(&last.w, Mat::zeros(store.get(&last.w).dim()));
            store.set(&last.b, Mat::zeros(store.get(&last.b).dim()));
            box_heads.push(head);
        }
        let cls_proj = Linear::init(store, seed, "head.cls_proj", cfg.dim, cfg.dim);
        store.insert("head.cls_bias", Mat::from_elem((1, 1), cfg.bias_init));
        Self {
            cfg,
            query_proj,
            query_ln,
            pos_proj,
            self_attn,
            ln1,
            cross_attn,
            ln2,
            ffn,
            ln3,
            box_heads,
            cls_proj,
            cls_bias: "head.cls_bias".to_string(),
        }
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn head_logits(
        &self,
        tape: &Tape,
        store: &ParamStore,
        hidden: Var,
        head: &HeadConditioning,
    ) -> Var {
        let proj = self.cls_proj.apply(tape, store, hidden);
        let normed = tape.l2_normalize_rows(proj, 1e-12);
        let bias = store.var(tape, &self.cls_bias);
        match head {
            HeadConditioning::PerQuery(embs) => {
                let e = tape.constant(embs.clone());
                let prod = tape.mul(normed, e);
                let ones = tape.constant(Mat::from_elem((self.cfg.dim, 1), 1.0));
                let cos = tape.matmul(prod, ones);
                let scaled = tape.scale(cos, self.cfg.temp);
                tape.add_row_broadcast(scaled, bias)
            }
            HeadConditioning::AllClasses(embs) => {
                let et = tape.constant(embs.t().to_owned());
                let cos = tape.matmul(normed, et);
                let scaled = tape.scale(cos, self.cfg.temp);
                let ones = tape.constant(Mat::from_elem((1, embs.nrows()), 1.0));
                let bias_row = tape.matmul(bias, ones);
                tape.add_row_broadcast(scaled, bias_row)
            }
        }
    }

    /// Decodes queries against grid memory, leaving per-layer boxes and
    /// logits on the tape.
    ///
    /// `blocks` must tile the query rows contiguously. Reference boxes are
    /// detached between layers; each layer's reported box backpropagates
    /// through its own delta and the previous layer's delta.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        query_feats: Var,
        blocks: &[(usize, usize)],
        init_boxes: &[[f64; 4]],
        memory_tokens: Var,
        memory_pos: Var,
        head: &HeadConditioning,
        mode: SelfAttentionMode,
    ) -> TapedDecode {
        let (q_rows, _) = tape.shape(query_feats);
        assert_eq!(q_rows, init_boxes.len(), "one init box per query");
        let covered: usize = blocks.iter().map(|&(_, len)| len).sum();
        assert_eq!(covered, q_rows, "blocks must tile the query rows");

        let mut stats = DecodeStats::default();
        let mask = match mode {
            SelfAttentionMode::Block => None,
            SelfAttentionMode::NaiveMasked => Some(block_diagonal_mask(q_rows, blocks)),
        };

        let projected = self.query_proj.apply(tape, store, query_feats);
        let mut q = self.query_ln.apply(tape, store, projected);
        let mem_k = tape.add(memory_tokens, memory_pos);

        let mut ref_det: Vec<[f64; 4]> = init_boxes.to_vec();
        let mut prev_logit = tape.constant(inv_sig_mat(&ref_det, &mut stats.ref_clamps));

        let mut layers = Vec::with_capacity(self.cfg.layers);
        let mut hidden = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let pos_q = {
                let sine = tape.constant(nn::sinusoidal_box(&ref_det, self.cfg.dim));
                self.pos_proj.apply(tape, store, sine)
            };
            let qk = tape.add(q, pos_q);
            let sa = match mode {
                SelfAttentionMode::Block => self.self_attn[l].attend_blocks(
                    tape,
                    store,
                    qk,
                    qk,
                    q,
                    blocks,
                    &mut stats.self_attn_score_elems,
                ),
                SelfAttentionMode::NaiveMasked => self.self_attn[l].attend_full(
                    tape,
                    store,
                    qk,
                    qk,
                    q,
                    mask.as_ref(),
                    &mut stats.self_attn_score_elems,
                ),
            };
            let res = tape.add(q, sa);
            q = self.ln1[l].apply(tape, store, res);

            let qk2 = tape.add(q, pos_q);
            let ca = self.cross_attn[l].attend_full(
                tape,
                store,
                qk2,
                mem_k,
                memory_tokens,
                None,
                &mut stats.cross_attn_score_elems,
            );
            let res = tape.add(q, ca);
            q = self.ln2[l].apply(tape, store, res);

            let f = self.ffn[l].apply(tape, store, q);
            let res = tape.add(q, f);
            q = self.ln3[l].apply(tape, store, res);

            let delta = self.box_heads[l].apply(tape, store, q);
            let pred_logit = tape.add(delta, prev_logit);
            let boxes_var = tape.sigmoid(pred_logit);
            let logits = self.head_logits(tape, store, q, head);
            layers.push(TapedLayer {
                boxes: boxes_var,
                logits,
            });
            hidden.push(q);

            // detached reference for the next layer; the next layer's box
            // prediction still sees this layer's delta through `prev_logit`
            let inv_prev = inv_sig_mat(&ref_det, &mut stats.ref_clamps);
            let delta_val = tape.value(delta);
            let mut next_ref = vec![[0.0; 4]; q_rows];
            for (i, nb) in next_ref.iter_mut().enumerate() {
                for j in 0..4 {
                    nb[j] = stable_sigmoid(delta_val[(i, j)] + inv_prev[(i, j)]);
                }
            }
            prev_logit = tape.add(delta, tape.constant(inv_prev));
            ref_det = next_ref;
        }

        TapedDecode {
            layers,
            hidden,
            stats,
        }
    }

    /// Snapshots a taped decode into plain values.
    pub fn snapshot(
        &self,
        tape: &Tape,
        taped: &TapedDecode,
        mode: HeadMode,
        classes: Vec<String>,
        query_class: Option<Vec<usize>>,
    ) -> DecoderOutput {
        let per_layer = taped
            .layers
            .iter()
            .map(|l| {
                let bv = tape.value(l.boxes);
                let boxes = (0..bv.nrows())
                    .map(|i| [bv[(i, 0)], bv[(i, 1)], bv[(i, 2)], bv[(i, 3)]])
                    .collect();
                LayerPrediction {
                    boxes,
                    logits: tape.value(l.logits),
                }
            })
            .collect();
        DecoderOutput {
            per_layer,
            mode,
            classes,
            query_class,
        }
    }
}

/// One scored, classed, boxed prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: String,
    pub class_id: usize,
    pub query_id: usize,
    pub score: f64,
    /// CXCYWH, normalized.
    pub box_cxcywh: [f64; 4],
}

/// Final detections for one image, sorted by descending score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

/// Converts final-layer outputs into at most `limit_k` detections.
///
/// Scores are sigmoids of the head logits. Ties break deterministically by
/// (score desc, class id asc, query id asc).
pub fn to_detections(out: &DecoderOutput, limit_k: usize) -> Result<DetectionSet> {
    if limit_k == 0 {
        return Err(DecolaError::InvalidDetectionLimit(0));
    }
    let last = out.final_layer();
    let mut detections = Vec::new();
    match out.mode {
        HeadMode::ConditionedBinary => {
            let provenance = out
                .query_class
                .as_ref()
                .expect("binary mode carries query provenance");
            for (q, b) in last.boxes.iter().enumerate() {
                let class_id = provenance[q];
                detections.push(Detection {
                    class: out.classes[class_id].clone(),
                    class_id,
                    query_id: q,
                    score: stable_sigmoid(last.logits[(q, 0)]),
                    box_cxcywh: *b,
                });
            }
        }
        HeadMode::OpenVocabMulticlass => {
            for (q, b) in last.boxes.iter().enumerate() {
                for (c, class) in out.classes.iter().enumerate() {
                    detections.push(Detection {
                        class: class.clone(),
                        class_id: c,
                        query_id: q,
                        score: stable_sigmoid(last.logits[(q, c)]),
                        box_cxcywh: *b,
                    });
                }
            }
        }
    }
    detections.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
            .then(a.query_id.cmp(&b.query_id))
    });
    detections.truncate(limit_k);
    Ok(DetectionSet { detections })
}

/// Reference multi-head attention over one block, written directly against
/// the projection matrices; used as the independence oracle in tests.
pub fn mha_reference(store: &ParamStore, attn: &MultiHeadAttention, x: &Mat) -> Mat {
    let project = |w: &str, b: &str| -> Mat { x.dot(store.get(w)) + store.get(b) };
    let q = project(&attn.wq.w, &attn.wq.b);
    let k = project(&attn.wk.w, &attn.wk.b);
    let v = project(&attn.wv.w, &attn.wv.b);
    let dh = attn.dim / attn.heads;
    let mut merged = Mat::zeros((x.nrows(), attn.dim));
    for h in 0..attn.heads {
        let qs = q.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
        let ks = k.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
        let vs = v.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
        let mut scores = qs.dot(&ks.t()) / (dh as f64).sqrt();
        for mut row in scores.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|s| (s - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|s| s / sum);
        }
        let out = scores.dot(&vs);
        merged
            .slice_mut(ndarray::s![.., h * dh..(h + 1) * dh])
            .assign(&out);
    }
    merged.dot(store.get(&attn.wo.w)) + store.get(&attn.wo.b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    fn mini_mha(seed: u64, dim: usize, heads: usize) -> (MultiHeadAttention, ParamStore) {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, seed, "attn", dim, heads);
        (mha, store)
    }

    #[test]
    fn single_element_blocks_attend_only_to_self() {
        let (mha, store) = mini_mha(1, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 2, 8);
        let out = block_self_attention(&mha, &store, &x, &[0, 1]).unwrap();
        for q in 0..2 {
            let row = x.slice(s![q..q + 1, ..]).to_owned();
            let v = row.dot(store.get("attn.v.w")) + store.get("attn.v.b");
            let expect = v.dot(store.get("attn.o.w")) + store.get("attn.o.b");
            for j in 0..8 {
                assert!((out[(q, j)] - expect[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_attention_matches_per_class_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let (mha, store) = mini_mha(trial, 16, 4);
            let k = rng.gen_range(1..=5usize);
            let n = rng.gen_range(1..=6usize);
            let x = rand_mat(&mut rng, k * n, 16);
            let ids: Vec<usize> = (0..k).flat_map(|b| std::iter::repeat(b).take(n)).collect();
            let got = block_self_attention(&mha, &store, &x, &ids).unwrap();
            for b in 0..k {
                let xb = x.slice(s![b * n..(b + 1) * n, ..]).to_owned();
                let expect = mha_reference(&store, &mha, &xb);
                for i in 0..n {
                    for j in 0..16 {
                        let delta = (got[(b * n + i, j)] - expect[(i, j)]).abs();
                        assert!(delta <= 1e-5, "trial {trial} block {b} delta {delta}");
                    }
                }
            }
        }
    }

    #[test]
    fn zeroing_foreign_block_changes_nothing() {
        let (mha, store) = mini_mha(7, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 6, 8);
        let ids = [0, 0, 1, 1, 2, 2];
        let a = block_self_attention(&mha, &store, &x, &ids).unwrap();
        let mut x2 = x.clone();
        x2.slice_mut(s![4..6, ..]).fill(0.0);
        let b = block_self_attention(&mha, &store, &x2, &ids).unwrap();
        assert_eq!(
            a.slice(s![0..4, ..]).to_owned(),
            b.slice(s![0..4, ..]).to_owned(),
            "foreign blocks must be exactly invisible"
        );
    }

    #[test]
    fn block_permutation_equivariance() {
        let (mha, store) = mini_mha(9, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 4, 8);
        let out = block_self_attention(&mha, &store, &x, &[0, 0, 1, 1]).unwrap();
        let mut swapped = Mat::zeros((4, 8));
        swapped.slice_mut(s![0..2, ..]).assign(&x.slice(s![2..4, ..]));
        swapped.slice_mut(s![2..4, ..]).assign(&x.slice(s![0..2, ..]));
        let out_swapped = block_self_attention(&mha, &store, &swapped, &[0, 0, 1, 1]).unwrap();
        assert_eq!(
            out.slice(s![0..2, ..]).to_owned(),
            out_swapped.slice(s![2..4, ..]).to_owned()
        );
    }

    #[test]
    fn non_contiguous_blocks_are_rejected() {
        let (mha, store) = mini_mha(1, 8, 2);
        let x = Mat::zeros((3, 8));
        match block_self_attention(&mha, &store, &x, &[0, 1, 0]) {
            Err(DecolaError::NonContiguousBlocks { block: 0, index: 2 }) => {}
            other => panic!("expected contiguity rejection, got {other:?}"),
        }
    }

    #[test]
    fn score_element_counts_are_quadratic_in_mode() {
        let (mha, store) = mini_mha(11, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in [2usize, 4, 8] {
            let n = 3usize;
            let x = rand_mat(&mut rng, k * n, 8);
            let ids: Vec<usize> = (0..k).flat_map(|b| std::iter::repeat(b).take(n)).collect();
            let (_, block_elems) =
                self_attention_grouped(&mha, &store, &x, &ids, SelfAttentionMode::Block).unwrap();
            let (_, naive_elems) =
                self_attention_grouped(&mha, &store, &x, &ids, SelfAttentionMode::NaiveMasked)
                    .unwrap();
            assert_eq!(block_elems, (n * n * k) as u64);
            assert_eq!(naive_elems, (n * n * k * k) as u64);
        }
    }

    fn mini_decoder(seed: u64, layers: usize) -> (Decoder, ParamStore) {
        let mut store = ParamStore::new();
        let dec = Decoder::init(
            &mut store,
            seed,
            DecoderConfig {
                dim: 16,
                heads: 2,
                layers,
                ffn_dim: 32,
                temp: 50.0,
                bias_init: -(0.99f64 / 0.01).ln(),
            },
        );
        (dec, store)
    }

    struct DecodeFixture {
        tape: Tape,
        taped: TapedDecode,
        queries: usize,
    }

    fn run_decode(
        dec: &Decoder,
        store: &ParamStore,
        seed: u64,
        k: usize,
        n: usize,
        head: HeadConditioning,
    ) -> DecodeFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let feats = tape.constant(rand_mat(&mut rng, k * n, 16));
        let mem = tape.constant(rand_mat(&mut rng, 10, 16));
        let pos = tape.constant(Mat::zeros((10, 16)));
        let blocks: Vec<(usize, usize)> = (0..k).map(|b| (b * n, n)).collect();
        let init: Vec<[f64; 4]> = (0..k * n)
            .map(|_| {
                [
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                ]
            })
            .collect();
        let taped = dec.forward(
            &tape,
            store,
            feats,
            &blocks,
            &init,
            mem,
            pos,
            &head,
            SelfAttentionMode::Block,
        );
        DecodeFixture {
            tape,
            taped,
            queries: k * n,
        }
    }

    #[test]
    fn zero_box_deltas_leave_proposals_unchanged() {
        // box heads are zero-initialized, so deltas are exactly zero
        let (dec, store) = mini_decoder(21, 3);
        let head = HeadConditioning::PerQuery(Mat::from_elem((6, 16), 1.0 / 4.0));
        let fx = run_decode(&dec, &store, 1, 2, 3, head);
        let init_logit = fx.tape.value(fx.taped.layers[0].boxes);
        for layer in &fx.taped.layers {
            let b = fx.tape.value(layer.boxes);
            for i in 0..fx.queries {
                for j in 0..4 {
                    assert!((b[(i, j)] - init_logit[(i, j)]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(fx.taped.stats.ref_clamps, 0);
    }

    #[test]
    fn binary_logit_shape_is_layers_by_queries_by_one() {
        let (dec, store) = mini_decoder(22, 3);
        let head = HeadConditioning::PerQuery(Mat::from_elem((8, 16), 0.25));
        let fx = run_decode(&dec, &store, 2, 4, 2, head);
        assert_eq!(fx.taped.layers.len(), 3);
        for layer in &fx.taped.layers {
            assert_eq!(fx.tape.shape(layer.logits), (8, 1));
        }
    }

    #[test]
    fn multiclass_logits_match_similarity_oracle() {
        use crate::vocabulary::{similarity_matrix, toy_vocabulary};
        let v = toy_vocabulary(16);
        let embs: Vec<_> = v
            .classes()
            .iter()
            .map(|c| v.embed_class(c).unwrap())
            .collect();
        let mut emat = Mat::zeros((embs.len(), 16));
        for (i, e) in embs.iter().enumerate() {
            for (j, &x) in e.vector.iter().enumerate() {
                emat[(i, j)] = x;
            }
        }
        let (dec, store) = mini_decoder(23, 2);
        let fx = run_decode(&dec, &store, 3, 1, 5, HeadConditioning::AllClasses(emat));
        let logits = fx.tape.value(fx.taped.layers.last().unwrap().logits);
        let hidden = fx.tape.value(*fx.taped.hidden.last().unwrap());
        let projected = hidden.dot(store.get("head.cls_proj.w")) + store.get("head.cls_proj.b");
        let (sim, _) = similarity_matrix(&embs, &projected).unwrap();
        let bias = store.get("head.cls_bias")[(0, 0)];
        for q in 0..5 {
            for c in 0..embs.len() {
                let expect = 50.0 * sim[(c, q)] + bias;
                assert!(
                    (logits[(q, c)] - expect).abs() < 1e-5,
                    "q {q} c {c}: {} vs {expect}",
                    logits[(q, c)]
                );
            }
        }
    }

    fn toy_output() -> DecoderOutput {
        DecoderOutput {
            per_layer: vec![LayerPrediction {
                boxes: vec![[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]],
                logits: Mat::from_shape_vec((3, 1), vec![2.0, -1.0, 0.5]).unwrap(),
            }],
            mode: HeadMode::ConditionedBinary,
            classes: vec!["a".into(), "b".into()],
            query_class: Some(vec![0, 0, 1]),
        }
    }

    #[test]
    fn to_detections_limits_and_sorts() {
        let out = toy_output();
        let top1 = to_detections(&out, 1).unwrap();
        assert_eq!(top1.detections.len(), 1);
        assert_eq!(top1.detections[0].query_id, 0);

        let all = to_detections(&out, 10).unwrap();
        assert_eq!(all.detections.len(), 3);
        for w in all.detections.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        assert!(matches!(
            to_detections(&out, 0),
            Err(DecolaError::InvalidDetectionLimit(0))
        ));
    }

    #[test]
    fn to_detections_breaks_ties_by_class_then_query() {
        let out = DecoderOutput {
            per_layer: vec![LayerPrediction {
                boxes: vec![[0.5; 4], [0.5; 4]],
                logits: Mat::from_shape_vec((2, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap(),
            }],
            mode: HeadMode::OpenVocabMulticlass,
            classes: vec!["a".into(), "b".into()],
            query_class: None,
        };
        let d = to_detections(&out, 3).unwrap();
        assert_eq!(
            d.detections
                .iter()
                .map(|x| (x.class_id, x.query_id))
                .collect::<Vec<_>>(),
            vec![(0, 0), (0, 1), (1, 0)]
        );
    }
}
