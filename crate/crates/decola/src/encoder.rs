//! Image → multi-scale grid features: a small stride-2 conv stem, kernel-2
//! stride-2 level downsamplers (exact floor halving), and dense transformer
//! encoder layers over all grid tokens, with sinusoidal positional encodings
//! plus a learned per-level embedding.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{DecolaError, Result};
use crate::nn::{self, Conv, LayerNorm, Mlp, MultiHeadAttention, ParamStore};

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: usize = 32;

/// An RGB image as an (H·W)×3 row-major matrix with values in [0,1].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub pixels: Mat,
}

impl ImageTensor {
    pub fn from_rgb8(data: &[u8], height: usize, width: usize) -> Self {
        assert_eq!(data.len(), height * width * 3, "rgb8 buffer size");
        let mut pixels = Mat::zeros((height * width, 3));
        for p in 0..height * width {
            for c in 0..3 {
                pixels[(p, c)] = data[p * 3 + c] as f64 / 255.0;
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }
}

/// One resolution level of grid features.
#[derive(Debug, Clone)]
pub struct GridLevel {
    pub height: usize,
    pub width: usize,
    /// (height·width)×d, row-major.
    pub features: Mat,
}

/// Multi-scale grid features with their positional encodings.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub levels: Vec<GridLevel>,
    pub positional: Vec<Mat>,
    /// (H px, W px) of the source image.
    pub image_size: (usize, usize),
}

impl FeatureGrid {
    pub fn dim(&self) -> usize {
        self.levels.first().map(|l| l.features.ncols()).unwrap_or(0)
    }

    pub fn total_locations(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    /// Checks the level-halving and uniform-dimension invariants.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, l) in self.levels.iter().enumerate() {
            if l.features.ncols() != d {
                return Err(DecolaError::DimensionMismatch {
                    context: format!("feature dim at level {i}"),
                    expected: d,
                    got: l.features.ncols(),
                });
            }
            if i > 0 {
                let prev = &self.levels[i - 1];
                if l.height != prev.height / 2 || l.width != prev.width / 2 {
                    return Err(DecolaError::Config(format!(
                        "level {i} is {}x{}, expected floor-half of {}x{}",
                        l.height, l.width, prev.height, prev.width
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A grid location in (level, row, column) coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCoord {
    pub level: usize,
    pub i: usize,
    pub j: usize,
}

/// Level-major, row-major flattening of a [`FeatureGrid`] with per-location
/// anchor boxes (cell-centered, one-cell sized).
#[derive(Debug, Clone)]
pub struct FlatGrid {
    pub features: Mat,
    pub positional: Mat,
    pub coords: Vec<GridCoord>,
    /// CXCYWH anchors, one per location.
    pub anchors: Vec<[f64; 4]>,
}

pub fn anchor_for(level_h: usize, level_w: usize, i: usize, j: usize) -> [f64; 4] {
    [
        (j as f64 + 0.5) / level_w as f64,
        (i as f64 + 0.5) / level_h as f64,
        1.0 / level_w as f64,
        1.0 / level_h as f64,
    ]
}

pub fn flatten_grid(g: &FeatureGrid) -> FlatGrid {
    let d = g.dim();
    let total = g.total_locations();
    let mut features = Mat::zeros((total, d));
    let mut positional = Mat::zeros((total, d));
    let mut coords = Vec::with_capacity(total);
    let mut anchors = Vec::with_capacity(total);
    let mut at = 0;
    for (level, (l, pos)) in g.levels.iter().zip(&g.positional).enumerate() {
        let n = l.height * l.width;
        features.slice_mut(s![at..at + n, ..]).assign(&l.features);
        positional.slice_mut(s![at..at + n, ..]).assign(pos);
        for i in 0..l.height {
            for j in 0..l.width {
                coords.push(GridCoord { level, i, j });
                anchors.push(anchor_for(l.height, l.width, i, j));
            }
        }
        at += n;
    }
    FlatGrid {
        features,
        positional,
        coords,
        anchors,
    }
}

/// Inverse of [`flatten_grid`] given the level shapes.
pub fn unflatten_grid(
    f: &FlatGrid,
    shapes: &[(usize, usize)],
    image_size: (usize, usize),
) -> FeatureGrid {
    let mut levels = Vec::with_capacity(shapes.len());
    let mut positional = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for &(h, w) in shapes {
        let n = h * w;
        levels.push(GridLevel {
            height: h,
            width: w,
            features: f.features.slice(s![at..at + n, ..]).to_owned(),
        });
        positional.push(f.positional.slice(s![at..at + n, ..]).to_owned());
        at += n;
    }
    FeatureGrid {
        levels,
        positional,
        image_size,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub levels: usize,
    pub stem_channels: (usize, usize),
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 1024,
            levels: 3,
            stem_channels: (16, 32),
        }
    }
}

/// Grid tokens still on the tape, plus the bookkeeping needed to use them.
pub struct EncodedGrid {
    pub tokens: Var,
    /// Constant sinusoidal positional encodings, one row per token.
    pub sin_pos: Mat,
    /// Positional term on the tape: sinusoidal + learned level embedding.
    pub pos: Var,
    pub level_shapes: Vec<(usize, usize)>,
    pub token_levels: Vec<usize>,
    pub image_size: (usize, usize),
}

impl EncodedGrid {
    pub fn total_locations(&self) -> usize {
        self.level_shapes.iter().map(|&(h, w)| h * w).sum()
    }

    /// Snapshots tape values into the plain [`FeatureGrid`] form.
    pub fn to_feature_grid(&self, tape: &Tape) -> FeatureGrid {
        let values = tape.value(self.tokens);
        let mut levels = Vec::new();
        let mut positional = Vec::new();
        let mut at = 0;
        for &(h, w) in &self.level_shapes {
            let n = h * w;
            levels.push(GridLevel {
                height: h,
                width: w,
                features: values.slice(s![at..at + n, ..]).to_owned(),
            });
            positional.push(self.sin_pos.slice(s![at..at + n, ..]).to_owned());
            at += n;
        }
        FeatureGrid {
            levels,
            positional,
            image_size: self.image_size,
        }
    }
}

/// Convolutional stem + dense transformer encoder over all grid tokens.
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Vec<Conv>,
    down: Vec<Conv>,
    attn: Vec<MultiHeadAttention>,
    ln_attn: Vec<LayerNorm>,
    ffn: Vec<Mlp>,
    ln_ffn: Vec<LayerNorm>,
    final_ln: LayerNorm,
    level_embed: String,
}

impl Encoder {
    pub fn init(store: &mut ParamStore, seed: u64, cfg: EncoderConfig) -> Self {
        let (c1, c2) = cfg.stem_channels;
        let stem = vec![
            Conv::init(store, seed, "enc.stem.0", 3, c1, 3, 2, 1),
            Conv::init(store, seed, "enc.stem.1", c1, c2, 3, 2, 1),
            Conv::init(store, seed, "enc.stem.2", c2, cfg.dim, 3, 2, 1),
        ];
        let down = (1..cfg.levels)
            .map(|l| Conv::init(store, seed, &format!("enc.down.{l}"), cfg.dim, cfg.dim, 2, 2, 0))
            .collect();
        let mut attn = Vec::new();
        let mut ln_attn = Vec::new();
        let mut ffn = Vec::new();
        let mut ln_ffn = Vec::new();
        for l in 0..cfg.layers {
            attn.push(MultiHeadAttention::init(
                store,
                seed,
                &format!("enc.layer{l}.attn"),
                cfg.dim,
                cfg.heads,
            ));
            ln_attn.push(LayerNorm::init(store, &format!("enc.layer{l}.ln1"), cfg.dim));
            ffn.push(Mlp::init(
                store,
                seed,
                &format!("enc.layer{l}.ffn"),
                &[cfg.dim, cfg.ffn_dim, cfg.dim],
            ));
            ln_ffn.push(LayerNorm::init(store, &format!("enc.layer{l}.ln2"), cfg.dim));
        }
        let final_ln = LayerNorm::init(store, "enc.final_ln", cfg.dim);
        store.insert("enc.level_embed", nn::xavier(seed, "enc.level_embed", cfg.levels, cfg.dim));
        Self {
            cfg,
            stem,
            down,
            attn,
            ln_attn,
            ffn,
            ln_ffn,
            final_ln,
            level_embed: "enc.level_embed".to_string(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Runs the encoder on one image, leaving grid tokens on the tape.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        image: &ImageTensor,
        score_elems: &mut u64,
    ) -> Result<EncodedGrid> {
        if image.height < MIN_IMAGE_SIDE || image.width < MIN_IMAGE_SIDE {
            return Err(DecolaError::ImageTooSmall {
                height: image.height,
                width: image.width,
                min_side: MIN_IMAGE_SIDE,
            });
        }
        let mut x = tape.constant(image.pixels.clone());
        let (mut h, mut w) = (image.height, image.width);
        for conv in &self.stem {
            let (y, nh, nw) = conv.apply(tape, store, x, h, w);
            x = tape.relu(y);
            h = nh;
            w = nw;
        }

        let mut level_vars = vec![x];
        let mut level_shapes = vec![(h, w)];
        for conv in &self.down {
            let (y, nh, nw) = conv.apply(tape, store, *level_vars.last().unwrap(), h, w);
            level_vars.push(y);
            level_shapes.push((nh, nw));
            h = nh;
            w = nw;
        }

        let tokens = tape.concat_rows(&level_vars);
        let mut token_levels = Vec::new();
        let mut sin_pos = Mat::zeros((0, self.cfg.dim));
        for (level, &(lh, lw)) in level_shapes.iter().enumerate() {
            token_levels.extend(std::iter::repeat(level).take(lh * lw));
            let pe = nn::sinusoidal_2d(lh, lw, self.cfg.dim);
            sin_pos.append(ndarray::Axis(0), pe.view()).unwrap();
        }

        let sin_var = tape.constant(sin_pos.clone());
        let lvl = store.var(tape, &self.level_embed);
        let lvl_rows = tape.gather_rows(lvl, &token_levels);
        let pos = tape.add(sin_var, lvl_rows);

        let mut x = tokens;
        for l in 0..self.cfg.layers {
            let qk = tape.add(x, pos);
            let attn_out = self.attn[l].attend_full(tape, store, qk, qk, x, None, score_elems);
            let res = tape.add(x, attn_out);
            x = self.ln_attn[l].apply(tape, store, res);
            let f = self.ffn[l].apply(tape, store, x);
            let res = tape.add(x, f);
            x = self.ln_ffn[l].apply(tape, store, res);
        }
        let x = self.final_ln.apply(tape, store, x);

        Ok(EncodedGrid {
            tokens: x,
            sin_pos,
            pos,
            level_shapes,
            token_levels,
            image_size: (image.height, image.width),
        })
    }

    /// Value-level convenience: encode an image and return the grid snapshot.
    pub fn encode_image(&self, store: &ParamStore, image: &ImageTensor) -> Result<FeatureGrid> {
        let tape = Tape::new();
        let mut n = 0;
        let grid = self.forward(&tape, store, image, &mut n)?;
        Ok(grid.to_feature_grid(&tape))
    }
}
