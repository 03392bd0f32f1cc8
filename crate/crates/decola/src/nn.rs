//! Neural-network building blocks on top of the autodiff tape: parameter
//! store, seeded initializers, linear / layer-norm / MLP layers, multi-head
//! attention (block-isolated and full), stride-2 convolutions via im2col, and
//! sinusoidal positional encodings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, Tape, Var};

/// Named parameter arrays in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: Mat) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(slot.dim(), value.dim(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// Registers the named parameter on a tape and returns its var.
    pub fn var(&self, tape: &Tape, name: &str) -> Var {
        tape.param(name, self.get(name).clone())
    }
}

fn param_seed(seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"#");
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn uniform_mat(seed: u64, name: &str, rows: usize, cols: usize, limit: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, name));
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Xavier-uniform init for a rows×cols weight (fan_in = rows, fan_out = cols).
pub fn xavier(seed: u64, name: &str, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform_mat(seed, name, rows, cols, limit)
}

/// He-uniform init keyed on fan-in; used for conv weights feeding ReLU.
pub fn he(seed: u64, name: &str, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / rows as f64).sqrt();
    uniform_mat(seed, name, rows, cols, limit)
}

/// x·W + b with W stored in_dim×out_dim.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn init(store: &mut ParamStore, seed: u64, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, xavier(seed, &w, in_dim, out_dim));
        store.insert(&b, Mat::zeros((1, out_dim)));
        Self { w, b }
    }

    pub fn apply(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.var(tape, &self.w);
        let b = store.var(tape, &self.b);
        let y = tape.matmul(x, w);
        tape.add_row_broadcast(y, b)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(&gain, Mat::from_elem((1, dim), 1.0));
        store.insert(&bias, Mat::zeros((1, dim)));
        Self {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn apply(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, self.eps);
        let g = store.var(tape, &self.gain);
        let b = store.var(tape, &self.bias);
        let y = tape.mul_row_broadcast(n, g);
        tape.add_row_broadcast(y, b)
    }
}

/// Stack of linears with ReLU between (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, seed: u64, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::init(store, seed, &format!("{name}.{i}"), dims[i], dims[i + 1]))
            .collect();
        Self { layers }
    }

    pub fn apply(&self, tape: &Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }
}

const MASK_NEG: f64 = -1e30;

/// Multi-head attention with shared projections across blocks.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(store: &mut ParamStore, seed: u64, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide by head count");
        Self {
            wq: Linear::init(store, seed, &format!("{name}.q"), dim, dim),
            wk: Linear::init(store, seed, &format!("{name}.k"), dim, dim),
            wv: Linear::init(store, seed, &format!("{name}.v"), dim, dim),
            wo: Linear::init(store, seed, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    fn head_attend(
        &self,
        tape: &Tape,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mat>,
        score_elems: &mut u64,
    ) -> Var {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q_rows, _) = tape.shape(q);
        let (k_rows, _) = tape.shape(k);
        *score_elems += (q_rows * k_rows) as u64;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                let mv = tape.constant(m.clone());
                scores = tape.add(scores, mv);
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        tape.concat_cols(&heads)
    }

    /// Full attention of `q_in` over `kv_in`, optionally masked with an
    /// additive pre-softmax matrix. The score-element counter advances by
    /// rows(q)·rows(k) per call (positions, not per head).
    pub fn attend_full(
        &self,
        tape: &Tape,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&Mat>,
        score_elems: &mut u64,
    ) -> Var {
        let q = self.wq.apply(tape, store, q_in);
        let k = self.wk.apply(tape, store, k_in);
        let v = self.wv.apply(tape, store, v_in);
        let merged = self.head_attend(tape, q, k, v, mask, score_elems);
        self.wo.apply(tape, store, merged)
    }

    /// Self-attention computed independently per contiguous row block. The
    /// standard-attention math per block is identical to [`attend_full`] with
    /// a block-diagonal mask, but only Σ len² score elements are formed.
    pub fn attend_blocks(
        &self,
        tape: &Tape,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        blocks: &[(usize, usize)],
        score_elems: &mut u64,
    ) -> Var {
        let q = self.wq.apply(tape, store, q_in);
        let k = self.wk.apply(tape, store, k_in);
        let v = self.wv.apply(tape, store, v_in);
        let mut parts = Vec::with_capacity(blocks.len());
        for &(start, len) in blocks {
            let qb = tape.slice_rows(q, start, len);
            let kb = tape.slice_rows(k, start, len);
            let vb = tape.slice_rows(v, start, len);
            parts.push(self.head_attend(tape, qb, kb, vb, None, score_elems));
        }
        let merged = tape.concat_rows(&parts);
        self.wo.apply(tape, store, merged)
    }
}

/// Additive mask that confines attention to the given contiguous blocks.
pub fn block_diagonal_mask(total: usize, blocks: &[(usize, usize)]) -> Mat {
    let mut mask = Mat::from_elem((total, total), MASK_NEG);
    for &(start, len) in blocks {
        for i in start..start + len {
            for j in start..start + len {
                mask[(i, j)] = 0.0;
            }
        }
    }
    mask
}

/// k×k stride-s convolution expressed as im2col gather + matmul.
///
/// Input/output feature maps are (H·W)×C matrices in row-major pixel order.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: String,
    pub b: String,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
}

impl Conv {
    pub fn init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(&w, he(seed, &w, kernel * kernel * in_ch, out_ch));
        store.insert(&b, Mat::zeros((1, out_ch)));
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
            in_ch,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn apply(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        h: usize,
        w: usize,
    ) -> (Var, usize, usize) {
        let (rows, _) = tape.shape(x);
        assert_eq!(rows, h * w, "feature map rows must equal H*W");
        let (oh, ow) = self.out_size(h, w);
        // pad with one zero row; out-of-bounds taps index it
        let zero = tape.constant(Mat::zeros((1, self.in_ch)));
        let padded = tape.concat_rows(&[x, zero]);
        let zero_row = h * w;
        let mut blocks = Vec::with_capacity(self.kernel * self.kernel);
        for di in 0..self.kernel {
            for dj in 0..self.kernel {
                let mut idx = Vec::with_capacity(oh * ow);
                for oi in 0..oh {
                    for oj in 0..ow {
                        let ii = (oi * self.stride + di) as isize - self.pad as isize;
                        let jj = (oj * self.stride + dj) as isize - self.pad as isize;
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            idx.push(zero_row);
                        } else {
                            idx.push(ii as usize * w + jj as usize);
                        }
                    }
                }
                blocks.push(tape.gather_rows(padded, &idx));
            }
        }
        let im2col = tape.concat_cols(&blocks);
        let wv = store.var(tape, &self.w);
        let bv = store.var(tape, &self.b);
        let y = tape.matmul(im2col, wv);
        (tape.add_row_broadcast(y, bv), oh, ow)
    }
}

fn sine_fill(t: f64, out: &mut [f64]) {
    // pairs of (sin, cos) at geometrically spaced frequencies
    let pairs = out.len() / 2;
    for p in 0..pairs {
        let freq = 1.0 / 20f64.powf(2.0 * p as f64 / out.len() as f64);
        let angle = t * std::f64::consts::TAU * freq;
        out[2 * p] = angle.sin();
        out[2 * p + 1] = angle.cos();
    }
}

/// Sinusoidal 2-D positional encoding for an h×w grid, (h·w)×d row-major.
/// First d/2 channels encode the normalized row coordinate, the rest the
/// column coordinate.
pub fn sinusoidal_2d(h: usize, w: usize, d: usize) -> Mat {
    assert_eq!(d % 4, 0, "positional dim must divide by 4");
    let mut out = Mat::zeros((h * w, d));
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            let y = (i as f64 + 0.5) / h as f64;
            let x = (j as f64 + 0.5) / w as f64;
            let (ya, xa) = out.row_mut(row).into_slice().unwrap().split_at_mut(d / 2);
            sine_fill(y, ya);
            sine_fill(x, xa);
        }
    }
    out
}

/// Sinusoidal embedding of CXCYWH boxes, N×d with d/4 channels per coordinate.
pub fn sinusoidal_box(boxes: &[[f64; 4]], d: usize) -> Mat {
    assert_eq!(d % 8, 0, "box positional dim must divide by 8");
    let per = d / 4;
    let mut out = Mat::zeros((boxes.len(), d));
    for (n, b) in boxes.iter().enumerate() {
        let row = out.row_mut(n).into_slice().unwrap();
        for (c, &coord) in b.iter().enumerate() {
            sine_fill(coord, &mut row[c * per..(c + 1) * per]);
        }
    }
    out
}
