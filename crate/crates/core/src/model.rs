//! A small vision-language decoder: patch encoder, text embedder, a stack of
//! vanilla layers followed by hierarchical layers, and a prediction head.
//!
//! Every variant runs on the gradient tape, so the same code path serves
//! training, FLOP-counted inference and gradient checks. Decoding is greedy
//! and KV-cached; hierarchical layers re-select their HR tokens at every
//! step from the previous layer's newest map row.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, cross_attention_kv_on, cross_step_on, hierarchical_kv_on, self_attention_kv_on,
    AttentionMap, AttentionWeights, KvCache, LayerCache, QueryGroup, Tags,
};
use crate::error::{FlexError, Result};
use crate::selection::{
    build_lr_mask, gather_tokens, upsample_mask, PatchGrid, SelectionMask, SelectionStrategy,
    StrategyKind,
};
use crate::tensor::{FlopCounter, GradTape, Matrix, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Low-resolution tokens only; every layer is vanilla.
    LrOnly,
    /// The trailing `n_fa` layers attend to selected HR tokens.
    Flex,
    /// All HR tokens are appended to the input sequence.
    HdConcat,
    /// Every layer gets a cross-attention sub-layer over all HR tokens.
    CrossAttn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::LrOnly,
        Variant::Flex,
        Variant::HdConcat,
        Variant::CrossAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LrOnly => "lr_only",
            Variant::Flex => "flex",
            Variant::HdConcat => "hd_concat",
            Variant::CrossAttn => "cross_attn",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    fn from_code(c: u64) -> Result<Self> {
        Self::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| FlexError::Format(format!("unknown variant code {c}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FlexError::Config(format!("unknown variant {s:?}")))
    }
}

fn default_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub n_sa: usize,
    pub n_fa: usize,
    pub ffn_inner: usize,
    pub vocab: usize,
    pub lr_image_side: usize,
    pub hr_image_side: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub selection: SelectionStrategy,
    pub variant: Variant,
    /// Pre-LN residual blocks plus a final norm. Off by default.
    #[serde(default)]
    pub pre_ln: bool,
    /// Generation stops after emitting this id.
    #[serde(default)]
    pub end_token: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            n_sa: 2,
            n_fa: 2,
            ffn_inner: 128,
            vocab: 32,
            lr_image_side: 16,
            hr_image_side: 64,
            patch_size: 4,
            channels: 1,
            selection: SelectionStrategy::default(),
            variant: Variant::Flex,
            pre_ln: false,
            end_token: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlexError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.n_sa == 0 {
            return bad("n_sa must be at least 1; the first hierarchical layer needs a map".into());
        }
        if self.ffn_inner == 0 || self.vocab == 0 || self.channels == 0 {
            return bad("ffn_inner, vocab and channels must be positive".into());
        }
        if self.patch_size == 0
            || self.lr_image_side == 0
            || self.lr_image_side % self.patch_size != 0
        {
            return bad(format!(
                "lr_image_side {} is not a positive multiple of patch_size {}",
                self.lr_image_side, self.patch_size
            ));
        }
        if self.hr_image_side % self.lr_image_side != 0 {
            return bad(format!(
                "hr_image_side {} is not an integer multiple of lr_image_side {}",
                self.hr_image_side, self.lr_image_side
            ));
        }
        if let Some(e) = self.end_token {
            if e >= self.vocab {
                return bad(format!(
                    "end_token {e} outside vocabulary of {}",
                    self.vocab
                ));
            }
        }
        self.selection.validate()
    }

    pub fn n_layers(&self) -> usize {
        self.n_sa + self.n_fa
    }

    /// HR-to-LR side ratio.
    pub fn factor(&self) -> usize {
        self.hr_image_side / self.lr_image_side
    }

    pub fn lr_grid(&self) -> PatchGrid {
        PatchGrid::new(self.lr_image_side / self.patch_size)
    }

    pub fn hr_grid(&self) -> PatchGrid {
        PatchGrid::new(self.hr_image_side / self.patch_size)
    }

    /// LR image token count `N_i`.
    pub fn n_image(&self) -> usize {
        self.lr_grid().patch_count()
    }

    /// HR token count `N_hr`.
    pub fn n_hr(&self) -> usize {
        self.hr_grid().patch_count()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Whether layer `l` attends to selected HR tokens.
    pub fn is_flex_layer(&self, l: usize) -> bool {
        self.variant == Variant::Flex && l >= self.n_sa
    }

    /// HR tokens placed in the sequence itself (hd_concat only; skipped at
    /// factor 1 where they would duplicate the LR tokens).
    pub fn concat_hr_tokens(&self) -> usize {
        if self.variant == Variant::HdConcat && self.factor() > 1 {
            self.n_hr()
        } else {
            0
        }
    }

    /// Whether the HR tokens are encoded at all.
    pub fn uses_hr(&self) -> bool {
        match self.variant {
            Variant::LrOnly => false,
            Variant::HdConcat => self.concat_hr_tokens() > 0,
            Variant::Flex | Variant::CrossAttn => true,
        }
    }

    /// Sequence length at prefill for `n_text` text tokens.
    pub fn seq_len(&self, n_text: usize) -> usize {
        self.n_image() + self.concat_hr_tokens() + n_text
    }
}

/// Square image, pixels row-major with channels interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side * channels {
            return Err(FlexError::Shape(format!(
                "{} pixel values for a {side}x{side}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            side,
            channels,
            pixels,
        })
    }

    /// 64-bit FNV-1a digest of the shape and pixel bits. The random
    /// selection strategy mixes it into its seed so that each image gets its
    /// own draw.
    pub fn content_key(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let words = [self.side as u64, self.channels as u64]
            .into_iter()
            .chain(self.pixels.iter().map(|p| p.to_bits()));
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in words {
            for b in w.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }

    pub fn filled(side: usize, channels: usize, v: f64) -> Self {
        Self {
            side,
            channels,
            pixels: vec![v; side * side * channels],
        }
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.pixels[(r * self.side + c) * self.channels + ch]
    }

    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.pixels[(r * self.side + c) * self.channels + ch] = v;
    }
}

/// Area-average pooling over `factor × factor` pixel blocks.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.side % factor != 0 {
        return Err(FlexError::Config(format!(
            "image side {} is not divisible by factor {factor}",
            img.side
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let side = img.side / factor;
    let area = (factor * factor) as f64;
    let mut out = Image::filled(side, img.channels, 0.0);
    for r in 0..side {
        for c in 0..side {
            for ch in 0..img.channels {
                let mut s = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        s += img.get(r * factor + dr, c * factor + dc, ch);
                    }
                }
                out.set(r, c, ch, s / area);
            }
        }
    }
    Ok(out)
}

/// Non-overlapping patches flattened to rows in row-major grid order; each
/// row lists pixels row-major with channels innermost.
pub fn patchify(img: &Image, patch: usize) -> Result<Matrix> {
    if patch == 0 || img.side % patch != 0 {
        return Err(FlexError::Config(format!(
            "image side {} is not divisible by patch size {patch}",
            img.side
        )));
    }
    let g = img.side / patch;
    let dim = patch * patch * img.channels;
    let mut out = Matrix::zeros(g * g, dim);
    for pr in 0..g {
        for pc in 0..g {
            let row = out.row_mut(pr * g + pc);
            let mut j = 0;
            for dr in 0..patch {
                for dc in 0..patch {
                    for ch in 0..img.channels {
                        row[j] = img.get(pr * patch + dr, pc * patch + dc, ch);
                        j += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2D sinusoidal table over a `side × side` grid.
///
/// Coordinates are patch centres normalised to `(0, 1)`, so an LR patch and
/// the HR patches it covers get nearby codes even though the two tables are
/// computed independently. The first half of the channels encodes the
/// column, the second half the row; frequencies run geometrically from 1 to
/// 8 cycles per image side. Leftover channels (`d % 4`) are zero.
pub fn sinusoidal_2d(side: usize, d: usize) -> Matrix {
    let q = d / 4;
    let freq = |i: usize| {
        if q <= 1 {
            1.0
        } else {
            8f64.powf(i as f64 / (q - 1) as f64)
        }
    };
    Matrix::from_fn(side * side, d, |p, j| {
        if j >= 4 * q {
            return 0.0;
        }
        let (r, c) = (p / side, p % side);
        let (coord, k) = if j < 2 * q { (c, j) } else { (r, j - 2 * q) };
        let u = (coord as f64 + 0.5) / side as f64;
        let a = 2.0 * std::f64::consts::PI * freq(k / 2) * u;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// 1D sinusoidal code for absolute sequence position `pos`.
pub fn sinusoidal_1d(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let a = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

fn text_positions(start: usize, n: usize, d: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (start..start + n).map(|p| sinusoidal_1d(p, d)).collect();
    if rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossParams<T> {
    pub attn: AttentionWeights<T>,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AttentionWeights<T>,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub cross: Option<CrossParams<T>>,
    pub ffn: FfnParams<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

/// Trainable parameters, generic so the same structure holds matrices,
/// tape variables or optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_proj: T,
    pub token_embed: T,
    pub layers: Vec<LayerParams<T>>,
    /// Present only with pre-LN.
    pub final_ln: Option<(T, T)>,
    pub head: T,
}

impl<T> Params<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Params<U> {
        Params {
            patch_proj: f(&self.patch_proj),
            token_embed: f(&self.token_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn: l.attn.map(&mut f),
                    ln1_gain: f(&l.ln1_gain),
                    ln1_bias: f(&l.ln1_bias),
                    cross: l.cross.as_ref().map(|c| CrossParams {
                        attn: c.attn.map(&mut f),
                        ln_gain: f(&c.ln_gain),
                        ln_bias: f(&c.ln_bias),
                    }),
                    ffn: FfnParams {
                        w1: f(&l.ffn.w1),
                        b1: f(&l.ffn.b1),
                        w2: f(&l.ffn.w2),
                        b2: f(&l.ffn.b2),
                    },
                    ln2_gain: f(&l.ln2_gain),
                    ln2_bias: f(&l.ln2_bias),
                })
                .collect(),
            final_ln: self.final_ln.as_ref().map(|(g, b)| (f(g), f(b))),
            head: f(&self.head),
        }
    }

    /// Every tensor with a stable name, in storage order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch_proj".to_string(), &self.patch_proj),
            ("token_embed".to_string(), &self.token_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.attn.tensors() {
                out.push((format!("layer{i}.attn.{n}"), t));
            }
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            if let Some(c) = &l.cross {
                for (n, t) in c.attn.tensors() {
                    out.push((format!("layer{i}.cross.{n}"), t));
                }
                out.push((format!("layer{i}.cross.ln_gain"), &c.ln_gain));
                out.push((format!("layer{i}.cross.ln_bias"), &c.ln_bias));
            }
            out.push((format!("layer{i}.ffn.w1"), &l.ffn.w1));
            out.push((format!("layer{i}.ffn.b1"), &l.ffn.b1));
            out.push((format!("layer{i}.ffn.w2"), &l.ffn.w2));
            out.push((format!("layer{i}.ffn.b2"), &l.ffn.b2));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
        }
        if let Some((g, b)) = &self.final_ln {
            out.push(("final_ln_gain".to_string(), g));
            out.push(("final_ln_bias".to_string(), b));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable view in the same order as [`Params::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.patch_proj, &mut self.token_embed];
        for l in &mut self.layers {
            out.extend(l.attn.tensors_mut());
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            if let Some(c) = &mut l.cross {
                out.extend(c.attn.tensors_mut());
                out.push(&mut c.ln_gain);
                out.push(&mut c.ln_bias);
            }
            out.push(&mut l.ffn.w1);
            out.push(&mut l.ffn.b1);
            out.push(&mut l.ffn.w2);
            out.push(&mut l.ffn.b2);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
        }
        if let Some((g, b)) = &mut self.final_ln {
            out.push(g);
            out.push(b);
        }
        out.push(&mut self.head);
        out
    }
}

/// Configuration, trainable parameters and the fixed positional tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: Params<Matrix>,
    pub pos_lr: Matrix,
    pub pos_hr: Matrix,
}

/// Stream ids keep each tensor's draw independent of which other tensors a
/// variant has, so shared tensors match across variants for one seed.
mod stream {
    pub const PATCH_PROJ: u64 = 0;
    pub const TOKEN_EMBED: u64 = 1;
    pub const HEAD: u64 = 2;

    pub fn layer(l: usize, slot: u64) -> u64 {
        16 + 16 * l as u64 + slot
    }
}

fn uniform(rows: usize, cols: usize, scale: f64, seed: u64, stream: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Seeded initialisation of a model for `cfg.variant`.
///
/// Projections are uniform in `±1/√D`, biases zero, norm gains one.
/// Hierarchical layers start with `W_K' = W_K` and `W_V' = W_V`.
pub fn build_variant(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let d = cfg.d_model;
    let f = cfg.ffn_inner;
    let a = 1.0 / (d as f64).sqrt();
    let u = |r, c, s| uniform(r, c, a, seed, s);
    let attn = |l: usize, base: u64| {
        AttentionWeights::new(
            u(d, d, stream::layer(l, base)),
            u(d, d, stream::layer(l, base + 1)),
            u(d, d, stream::layer(l, base + 2)),
            u(d, d, stream::layer(l, base + 3)),
            cfg.heads,
        )
    };
    let mut layers = Vec::with_capacity(cfg.n_layers());
    for l in 0..cfg.n_layers() {
        let mut w = attn(l, 0)?;
        if cfg.is_flex_layer(l) {
            let (k, v) = (w.w_k.clone(), w.w_v.clone());
            w = w.with_primes(k, v)?;
        }
        let cross = if cfg.variant == Variant::CrossAttn {
            Some(CrossParams {
                attn: attn(l, 6)?,
                ln_gain: Matrix::filled(1, d, 1.0),
                ln_bias: Matrix::zeros(1, d),
            })
        } else {
            None
        };
        layers.push(LayerParams {
            attn: w,
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            cross,
            ffn: FfnParams {
                w1: u(d, f, stream::layer(l, 4)),
                b1: Matrix::zeros(1, f),
                w2: u(f, d, stream::layer(l, 5)),
                b2: Matrix::zeros(1, d),
            },
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        });
    }
    let params = Params {
        patch_proj: u(cfg.patch_dim(), d, stream::PATCH_PROJ),
        token_embed: u(cfg.vocab, d, stream::TOKEN_EMBED),
        layers,
        final_ln: cfg
            .pre_ln
            .then(|| (Matrix::filled(1, d, 1.0), Matrix::zeros(1, d))),
        head: u(d, cfg.vocab, stream::HEAD),
    };
    Ok(ModelWeights {
        config: cfg.clone(),
        params,
        pos_lr: sinusoidal_2d(cfg.lr_grid().side, d),
        pos_hr: sinusoidal_2d(cfg.hr_grid().side, d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Lr,
    Hr,
}

/// Patch tokens of `img` at the given resolution: patchify, project,
/// add the matching positional table. Rows follow the row-major patch grid.
pub fn encode_image(
    img: &Image,
    w: &ModelWeights,
    which: Resolution,
    ctr: &mut FlopCounter,
) -> Result<Matrix> {
    let mut tape = GradTape::with_counter(std::mem::take(ctr));
    let pp = tape.constant(w.params.patch_proj.clone());
    let r = encode_on(&mut tape, pp, img, w, which);
    let out = r.map(|v| tape.value(v).clone());
    *ctr = tape.into_counter();
    out
}

fn encode_on(
    tape: &mut GradTape,
    patch_proj: Var,
    img: &Image,
    w: &ModelWeights,
    which: Resolution,
) -> Result<Var> {
    let cfg = &w.config;
    let (side, pos) = match which {
        Resolution::Lr => (cfg.lr_image_side, &w.pos_lr),
        Resolution::Hr => (cfg.hr_image_side, &w.pos_hr),
    };
    if img.side != side || img.channels != cfg.channels {
        return Err(FlexError::Shape(format!(
            "{which:?} encoder expects a {side}px {}-channel image, got {}px {}-channel",
            cfg.channels, img.side, img.channels
        )));
    }
    let patches = tape.constant(patchify(img, cfg.patch_size)?);
    let proj = tape.matmul(patches, patch_proj)?;
    let pos = tape.constant(pos.clone());
    tape.add(proj, pos)
}

/// How hierarchical layers pick their HR tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SelectionOverride {
    /// Use the configured strategy on the previous layer's map.
    #[default]
    Strategy,
    /// Always use these HR grid indices.
    Fixed(Vec<usize>),
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub selection: SelectionOverride,
    /// Number of prompt text tokens when the text is a prompt followed by
    /// teacher-forced continuation: prompt rows share the selection driven
    /// by the last prompt row, and every later row selects from its own map
    /// row, exactly as stepwise decoding does. `None` means all rows share
    /// the selection of the last row.
    pub prompt_len: Option<usize>,
    /// Prefix for FLOP breakdown tags (e.g. `"prefill"`); untagged if unset.
    pub tag_prefix: Option<String>,
}

/// One selection made by a hierarchical layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    /// Absolute sequence row whose previous-layer map row drove the choice.
    pub query_row: usize,
    /// That row's attention over the LR image tokens.
    pub source: Vec<f64>,
    pub lr_indices: Vec<usize>,
    pub hr_indices: Vec<usize>,
}

/// Tape-level result of a full forward pass.
pub(crate) struct TapeForward {
    pub logits: Var,
    /// Per-layer `N×N` maps (truncated for hierarchical layers).
    pub maps: Vec<AttentionMap>,
    pub trace: Vec<LayerSelection>,
    pub kv: Vec<attention::KvVars>,
    pub cross_kv: Vec<Option<(Var, Var)>>,
    pub f_hr: Option<Var>,
}

fn tag(prefix: &Option<String>, term: &str) -> Option<String> {
    prefix.as_ref().map(|p| format!("{p}.{term}"))
}

fn set_tag(tape: &mut GradTape, t: &Option<String>) {
    if let Some(t) = t {
        tape.counter_mut().set_tag(t.clone());
    }
}

fn selection_rng(seed: u64, layer: usize, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | row as u64);
    rng
}

/// Picks HR indices for hierarchical layer `layer` from the previous
/// layer's map row `row` (absolute position `query_row`). `image_key` is
/// the input image's [`Image::content_key`].
fn select(
    cfg: &ModelConfig,
    over: &SelectionOverride,
    image_key: u64,
    layer: usize,
    query_row: usize,
    row: &[f64],
) -> Result<LayerSelection> {
    let n_i = cfg.n_image();
    let source = crate::selection::image_attention_from_row(row, n_i)?;
    let (lr_indices, hr_indices) = match over {
        SelectionOverride::Fixed(idx) => {
            let m = SelectionMask::from_indices(cfg.hr_grid(), idx)?;
            (Vec::new(), m.indices)
        }
        SelectionOverride::Strategy => {
            let seed = match cfg.selection.kind {
                StrategyKind::Random { seed } => seed ^ image_key,
                _ => 0,
            };
            let mut rng = selection_rng(seed, layer, query_row);
            let lr = build_lr_mask(&source, cfg.lr_grid(), &cfg.selection, &mut rng)?;
            let hr = upsample_mask(&lr, cfg.factor())?;
            (lr.indices, hr.indices)
        }
    };
    Ok(LayerSelection {
        layer,
        query_row,
        source,
        lr_indices,
        hr_indices,
    })
}

/// Residual sub-layer in the configured LN placement. `f` receives the
/// sub-layer input and returns its output.
fn residual_block(
    tape: &mut GradTape,
    pre_ln: bool,
    x: Var,
    ln: (Var, Var),
    tags: (&Option<String>, &Option<String>),
    f: impl FnOnce(&mut GradTape, Var) -> Result<Var>,
) -> Result<Var> {
    let (t_res, t_ln) = tags;
    if pre_ln {
        set_tag(tape, t_ln);
        let n = tape.layer_norm(x, ln.0, ln.1)?;
        let y = f(tape, n)?;
        set_tag(tape, t_res);
        tape.add(x, y)
    } else {
        let y = f(tape, x)?;
        set_tag(tape, t_res);
        let r = tape.add(x, y)?;
        set_tag(tape, t_ln);
        tape.layer_norm(r, ln.0, ln.1)
    }
}

fn ffn_on(tape: &mut GradTape, x: Var, p: &FfnParams<Var>, t: &Option<String>) -> Result<Var> {
    set_tag(tape, t);
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, p.w2)?;
    tape.add_row(o, p.b2)
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab) {
        return Err(FlexError::Config(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Full forward pass recorded on `tape` with parameters already bound.
pub(crate) fn forward_on(
    tape: &mut GradTape,
    w: &ModelWeights,
    p: &Params<Var>,
    img: &Image,
    text_ids: &[usize],
    opts: &ForwardOptions,
) -> Result<TapeForward> {
    let cfg = &w.config;
    if text_ids.is_empty() {
        return Err(FlexError::EmptyInput(
            "text is empty; selection needs a last text token".into(),
        ));
    }
    check_ids(cfg, text_ids)?;
    if img.side != cfg.hr_image_side {
        return Err(FlexError::Shape(format!(
            "expected a {}px image, got {}px",
            cfg.hr_image_side, img.side
        )));
    }
    let n_i = cfg.n_image();
    let n_cat = cfg.concat_hr_tokens();
    let n = cfg.seq_len(text_ids.len());
    let text_start = n_i + n_cat;
    let image_key = img.content_key();
    let prompt_rows = match opts.prompt_len {
        None => n,
        Some(pl) if (1..=text_ids.len()).contains(&pl) => text_start + pl,
        Some(pl) => {
            return Err(FlexError::Config(format!(
                "prompt_len {pl} outside 1..={}",
                text_ids.len()
            )))
        }
    };
    let pre = &opts.tag_prefix;

    set_tag(tape, &tag(pre, "encoder"));
    let lr_img = downsample(img, cfg.factor())?;
    let f_lr = encode_on(tape, p.patch_proj, &lr_img, w, Resolution::Lr)?;
    let f_hr = if cfg.uses_hr() {
        Some(encode_on(tape, p.patch_proj, img, w, Resolution::Hr)?)
    } else {
        None
    };

    set_tag(tape, &tag(pre, "embed"));
    let emb = tape.embedding(p.token_embed, text_ids)?;
    let pos = tape.constant(text_positions(text_start, text_ids.len(), cfg.d_model));
    let text = tape.add(emb, pos)?;
    let mut h = f_lr;
    if n_cat > 0 {
        h = tape.concat_rows(h, f_hr.expect("hd_concat encodes HR"))?;
    }
    h = tape.concat_rows(h, text)?;

    let mut maps: Vec<AttentionMap> = Vec::with_capacity(cfg.n_layers());
    let mut trace = Vec::new();
    let mut kv = Vec::with_capacity(cfg.n_layers());
    let mut cross_kv = Vec::with_capacity(cfg.n_layers());
    for (l, lp) in p.layers.iter().enumerate() {
        let lt = pre.as_ref().map(|x| format!("{x}.L{l:02}."));
        let t = |term: &str| lt.as_ref().map(|x| format!("{x}{term}"));
        let (t_res, t_ln, t_ffn) = (t("residual"), t("layer_norm"), t("ffn"));
        let tags = Tags(lt.as_deref());

        let mut layer_map = None;
        let mut layer_kv = None;
        let flex = cfg.is_flex_layer(l);
        let groups_sel = if flex {
            let prev = &maps[l - 1].values;
            let mut sels = vec![select(
                cfg,
                &opts.selection,
                image_key,
                l,
                prompt_rows - 1,
                prev.row(prompt_rows - 1),
            )?];
            for r in prompt_rows..n {
                sels.push(select(cfg, &opts.selection, image_key, l, r, prev.row(r))?);
            }
            Some(sels)
        } else {
            None
        };
        h = residual_block(
            tape,
            cfg.pre_ln,
            h,
            (lp.ln1_gain, lp.ln1_bias),
            (&t_res, &t_ln),
            |tape, x| match &groups_sel {
                Some(sels) => {
                    let f_hr = f_hr.expect("flex encodes HR");
                    let mut groups = Vec::with_capacity(sels.len());
                    let mut start = 0;
                    for s in sels {
                        let f_shr = tape.gather_rows(f_hr, &s.hr_indices)?;
                        let end = if start == 0 { prompt_rows } else { start + 1 };
                        groups.push(QueryGroup { start, end, f_shr });
                        start = end;
                    }
                    let (out, gmaps, kvv) =
                        hierarchical_kv_on(tape, x, &groups, &lp.attn, true, tags)?;
                    let parts: Vec<Matrix> = gmaps.iter().map(|m| m.truncate(n).values).collect();
                    let mut values = parts[0].clone();
                    for part in &parts[1..] {
                        values = crate::tensor::concat_rows(&values, part)?;
                    }
                    layer_map = Some(AttentionMap {
                        values,
                        heads_averaged: cfg.heads,
                        causal: true,
                    });
                    layer_kv = Some(kvv);
                    Ok(out)
                }
                None => {
                    let (out, map, kvv) = self_attention_kv_on(tape, x, &lp.attn, true, tags)?;
                    layer_map = Some(map);
                    layer_kv = Some(kvv);
                    Ok(out)
                }
            },
        )?;
        if let Some(sels) = groups_sel {
            trace.extend(sels);
        }
        let mut ckv = None;
        if let Some(c) = &lp.cross {
            let f_hr = f_hr.expect("cross_attn encodes HR");
            h = residual_block(
                tape,
                cfg.pre_ln,
                h,
                (c.ln_gain, c.ln_bias),
                (&t_res, &t_ln),
                |tape, x| {
                    let (out, kv) = cross_attention_kv_on(tape, x, f_hr, &c.attn, tags)?;
                    ckv = Some(kv);
                    Ok(out)
                },
            )?;
        }
        h = residual_block(
            tape,
            cfg.pre_ln,
            h,
            (lp.ln2_gain, lp.ln2_bias),
            (&t_res, &t_ln),
            |tape, x| ffn_on(tape, x, &lp.ffn, &t_ffn),
        )?;
        maps.push(layer_map.expect("attention ran"));
        kv.push(layer_kv.expect("attention ran"));
        cross_kv.push(ckv);
    }
    if let Some((g, b)) = p.final_ln {
        set_tag(tape, &tag(pre, "final_norm"));
        h = tape.layer_norm(h, g, b)?;
    }
    set_tag(tape, &tag(pre, "head"));
    let logits = tape.matmul(h, p.head)?;
    tape.counter_mut().clear_tag();
    Ok(TapeForward {
        logits,
        maps,
        trace,
        kv,
        cross_kv,
        f_hr,
    })
}

#[derive(Clone, Debug)]
pub struct PrefillOutput {
    /// `N × vocab`.
    pub logits: Matrix,
    pub maps: Vec<AttentionMap>,
    pub cache: KvCache,
    pub f_hr: Option<Matrix>,
    pub selection_trace: Vec<LayerSelection>,
    pub counter: FlopCounter,
}

pub fn prefill(w: &ModelWeights, img: &Image, text_ids: &[usize]) -> Result<PrefillOutput> {
    prefill_with(w, img, text_ids, &ForwardOptions::default())
}

pub fn prefill_with(
    w: &ModelWeights,
    img: &Image,
    text_ids: &[usize],
    opts: &ForwardOptions,
) -> Result<PrefillOutput> {
    let mut tape = GradTape::new();
    let out = prefill_on(&mut tape, w, img, text_ids, opts)?;
    Ok(PrefillOutput {
        counter: tape.into_counter(),
        ..out
    })
}

fn prefill_on(
    tape: &mut GradTape,
    w: &ModelWeights,
    img: &Image,
    text_ids: &[usize],
    opts: &ForwardOptions,
) -> Result<PrefillOutput> {
    let p = w.params.map(|m| tape.constant(m.clone()));
    let fw = forward_on(tape, w, &p, img, text_ids, opts)?;
    let mut cache = KvCache::new(w.config.n_layers());
    for (l, kvv) in fw.kv.iter().enumerate() {
        let lc = &mut cache.layers[l];
        *lc = LayerCache::from_prefill(tape.value(kvv.k).clone(), tape.value(kvv.v).clone());
        if let Some((hk, hv)) = kvv.hr {
            lc.hr_k = Some(tape.value(hk).clone());
            lc.hr_v = Some(tape.value(hv).clone());
        }
        cache.cross[l] =
            fw.cross_kv[l].map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()));
    }
    Ok(PrefillOutput {
        logits: tape.value(fw.logits).clone(),
        maps: fw.maps,
        cache,
        f_hr: fw.f_hr.map(|v| tape.value(v).clone()),
        selection_trace: fw.trace,
        counter: FlopCounter::new(),
    })
}

/// Cross-entropy of `label` at the last position.
pub fn loss(
    w: &ModelWeights,
    img: &Image,
    text_ids: &[usize],
    label: usize,
    opts: &ForwardOptions,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let p = w.params.map(|m| tape.constant(m.clone()));
    let fw = forward_on(&mut tape, w, &p, img, text_ids, opts)?;
    let last = tape.value(fw.logits).rows() - 1;
    let l = tape.cross_entropy(fw.logits, &[(last, label)])?;
    Ok(tape.value(l).get(0, 0))
}

/// [`loss`] and its gradient with respect to every parameter. Selection
/// decisions are treated as constants.
pub fn loss_and_grads(
    w: &ModelWeights,
    img: &Image,
    text_ids: &[usize],
    label: usize,
    opts: &ForwardOptions,
) -> Result<(f64, Params<Matrix>)> {
    let mut tape = GradTape::new();
    let p = w.params.map(|m| tape.param(m.clone()));
    let fw = forward_on(&mut tape, w, &p, img, text_ids, opts)?;
    let last = tape.value(fw.logits).rows() - 1;
    let l = tape.cross_entropy(fw.logits, &[(last, label)])?;
    let value = tape.value(l).get(0, 0);
    let mut grads = tape.backward(l)?;
    let g = p.map(|&v| {
        let val = tape.value(v);
        grads
            .take(v)
            .unwrap_or_else(|| Matrix::zeros(val.rows(), val.cols()))
    });
    Ok((value, g))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Logits that produced each token; the first row is prefill's last.
    pub step_logits: Vec<Vec<f64>>,
    pub selection_trace: Vec<LayerSelection>,
    pub counter: FlopCounter,
}

/// Greedy decoding of up to `max_new` tokens.
pub fn generate(
    w: &ModelWeights,
    img: &Image,
    prompt: &[usize],
    max_new: usize,
) -> Result<Generation> {
    generate_with(w, img, prompt, max_new, &ForwardOptions::default())
}

/// [`generate`] with selection override and FLOP tagging. Decode steps are
/// tagged `decode.S{step:03}` when `opts.tag_prefix` is set.
pub fn generate_with(
    w: &ModelWeights,
    img: &Image,
    prompt: &[usize],
    max_new: usize,
    opts: &ForwardOptions,
) -> Result<Generation> {
    if max_new == 0 {
        return Err(FlexError::Config("max_new must be at least 1".into()));
    }
    let cfg = &w.config;
    let mut tape = GradTape::new();
    let opts_prefill = ForwardOptions {
        prompt_len: None,
        ..opts.clone()
    };
    let pf = prefill_on(&mut tape, w, img, prompt, &opts_prefill)?;
    let mut cache = pf.cache;
    let mut trace = pf.selection_trace;
    let last = pf.logits.row(pf.logits.rows() - 1).to_vec();
    let mut tokens = vec![argmax(&last)];
    let mut step_logits = vec![last];
    let p = w.params.map(|m| tape.constant(m.clone()));
    let mut pos = cfg.seq_len(prompt.len());
    let image_key = img.content_key();
    for s in 1..max_new {
        let prev = *tokens.last().expect("non-empty");
        if cfg.end_token == Some(prev) {
            break;
        }
        let pre = opts.tag_prefix.as_ref().map(|_| format!("decode.S{s:03}"));
        let (row, sels) = decode_step(
            &mut tape,
            w,
            &p,
            &mut cache,
            pf.f_hr.as_ref(),
            prev,
            pos,
            &opts.selection,
            image_key,
            &pre,
        )?;
        trace.extend(sels);
        tokens.push(argmax(&row));
        step_logits.push(row);
        pos += 1;
    }
    Ok(Generation {
        tokens,
        step_logits,
        selection_trace: trace,
        counter: tape.into_counter(),
    })
}

#[allow(clippy::too_many_arguments)]
fn decode_step(
    tape: &mut GradTape,
    w: &ModelWeights,
    p: &Params<Var>,
    cache: &mut KvCache,
    f_hr: Option<&Matrix>,
    token: usize,
    pos: usize,
    over: &SelectionOverride,
    image_key: u64,
    pre: &Option<String>,
) -> Result<(Vec<f64>, Vec<LayerSelection>)> {
    let cfg = &w.config;
    check_ids(cfg, &[token])?;
    set_tag(tape, &tag(pre, "embed"));
    let emb = tape.embedding(p.token_embed, &[token])?;
    let pe = tape.constant(text_positions(pos, 1, cfg.d_model));
    let mut x = tape.add(emb, pe)?;
    let mut prev_row: Vec<f64> = Vec::new();
    let mut sels = Vec::new();
    for (l, lp) in p.layers.iter().enumerate() {
        let lt = pre.as_ref().map(|x| format!("{x}.L{l:02}."));
        let t = |term: &str| lt.as_ref().map(|x| format!("{x}{term}"));
        let (t_res, t_ln, t_ffn) = (t("residual"), t("layer_norm"), t("ffn"));
        let tags = Tags(lt.as_deref());
        let f_shr = if cfg.is_flex_layer(l) {
            let sel = select(cfg, over, image_key, l, pos, &prev_row)?;
            let f_hr = f_hr.expect("flex encodes HR");
            let grid = cfg.hr_grid();
            let mask = SelectionMask::from_indices(grid, &sel.hr_indices)?;
            let (rows, _) = gather_tokens(f_hr, &mask)?;
            sels.push(sel);
            Some(rows)
        } else {
            None
        };
        let aw = &w.params.layers[l].attn;
        let lc = &mut cache.layers[l];
        let mut row = Vec::new();
        x = residual_block(
            tape,
            cfg.pre_ln,
            x,
            (lp.ln1_gain, lp.ln1_bias),
            (&t_res, &t_ln),
            |tape, xin| {
                let xm = tape.value(xin).clone();
                let (out, r) =
                    attention::attention_step_on(tape, lc, &xm, aw, f_shr.as_ref(), tags)?;
                row = r;
                Ok(tape.constant(out))
            },
        )?;
        prev_row = row;
        if let (Some(c), Some(kv)) = (&w.params.layers[l].cross, &cache.cross[l]) {
            let cp = lp.cross.as_ref().expect("bound alongside weights");
            x = residual_block(
                tape,
                cfg.pre_ln,
                x,
                (cp.ln_gain, cp.ln_bias),
                (&t_res, &t_ln),
                |tape, xin| {
                    let xm = tape.value(xin).clone();
                    let out = cross_step_on(tape, kv, &xm, &c.attn, tags)?;
                    Ok(tape.constant(out))
                },
            )?;
        }
        x = residual_block(
            tape,
            cfg.pre_ln,
            x,
            (lp.ln2_gain, lp.ln2_bias),
            (&t_res, &t_ln),
            |tape, xin| ffn_on(tape, xin, &lp.ffn, &t_ffn),
        )?;
    }
    if let Some((g, b)) = p.final_ln {
        set_tag(tape, &tag(pre, "final_norm"));
        x = tape.layer_norm(x, g, b)?;
    }
    set_tag(tape, &tag(pre, "head"));
    let logits = tape.matmul(x, p.head)?;
    tape.counter_mut().clear_tag();
    Ok((tape.value(logits).row(0).to_vec(), sels))
}

const MAGIC: &[u8; 9] = b"FLEXATTN1";

/// Header fields in file order, each a little-endian `u64`.
///
/// `d_model, heads, n_sa, n_fa, ffn_inner, vocab, lr_image_side,
/// hr_image_side, patch_size, channels, variant, selection kind
/// (0 attention map, 1 random, 2 center), selection seed, selection ratio
/// (f64 bits), end_token (u64::MAX for none), pre_ln`.
///
/// Then the matrix count and each matrix as `rows, cols` (u64) followed by
/// row-major f64 values: the [`Params::named`] order, then `pos_lr`,
/// `pos_hr`.
fn header(cfg: &ModelConfig) -> Vec<u64> {
    let (kind, seed) = match cfg.selection.kind {
        StrategyKind::AttentionMap => (0, 0),
        StrategyKind::Random { seed } => (1, seed),
        StrategyKind::Center => (2, 0),
    };
    vec![
        cfg.d_model as u64,
        cfg.heads as u64,
        cfg.n_sa as u64,
        cfg.n_fa as u64,
        cfg.ffn_inner as u64,
        cfg.vocab as u64,
        cfg.lr_image_side as u64,
        cfg.hr_image_side as u64,
        cfg.patch_size as u64,
        cfg.channels as u64,
        cfg.variant.code(),
        kind,
        seed,
        cfg.selection.ratio.to_bits(),
        cfg.end_token.map_or(u64::MAX, |t| t as u64),
        cfg.pre_ln as u64,
    ]
}

const HEADER_LEN: usize = 16;

fn config_from_header(h: &[u64]) -> Result<ModelConfig> {
    let kind = match h[11] {
        0 => StrategyKind::AttentionMap,
        1 => StrategyKind::Random { seed: h[12] },
        2 => StrategyKind::Center,
        k => return Err(FlexError::Format(format!("unknown selection kind {k}"))),
    };
    Ok(ModelConfig {
        d_model: h[0] as usize,
        heads: h[1] as usize,
        n_sa: h[2] as usize,
        n_fa: h[3] as usize,
        ffn_inner: h[4] as usize,
        vocab: h[5] as usize,
        lr_image_side: h[6] as usize,
        hr_image_side: h[7] as usize,
        patch_size: h[8] as usize,
        channels: h[9] as usize,
        variant: Variant::from_code(h[10])?,
        selection: SelectionStrategy {
            kind,
            ratio: f64::from_bits(h[13]),
        },
        end_token: (h[14] != u64::MAX).then_some(h[14] as usize),
        pre_ln: h[15] != 0,
    })
}

impl ModelWeights {
    fn all_matrices(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.params.named().into_iter().map(|(_, m)| m).collect();
        v.push(&self.pos_lr);
        v.push(&self.pos_hr);
        v
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        for x in header(&self.config) {
            out.write_all(&x.to_le_bytes())?;
        }
        let mats = self.all_matrices();
        out.write_all(&(mats.len() as u64).to_le_bytes())?;
        for m in mats {
            out.write_all(&(m.rows() as u64).to_le_bytes())?;
            out.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(inp: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 9];
        inp.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FlexError::Format("bad magic; not a weights file".into()));
        }
        let mut u = || -> Result<u64> {
            let mut b = [0u8; 8];
            inp.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let h: Vec<u64> = (0..HEADER_LEN).map(|_| u()).collect::<Result<_>>()?;
        let cfg = config_from_header(&h)?;
        let mut w = build_variant(&cfg, 0)?;
        let count = u()? as usize;
        let expected = w.all_matrices().len();
        if count != expected {
            return Err(FlexError::Format(format!(
                "file holds {count} matrices, configuration needs {expected}"
            )));
        }
        let mut slots: Vec<&mut Matrix> = w.params.tensors_mut();
        let mut loaded = Vec::with_capacity(count);
        for _ in 0..count {
            let (r, c) = (u()? as usize, u()? as usize);
            let data = (0..r * c)
                .map(|_| u().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            loaded.push(Matrix::from_vec(r, c, data)?);
        }
        let mut it = loaded.into_iter();
        for slot in slots.iter_mut() {
            assign(slot, it.next().expect("count checked"))?;
        }
        drop(slots);
        assign(&mut w.pos_lr, it.next().expect("count checked"))?;
        assign(&mut w.pos_hr, it.next().expect("count checked"))?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn assign(slot: &mut Matrix, m: Matrix) -> Result<()> {
    if slot.shape() != m.shape() {
        return Err(FlexError::Format(format!(
            "matrix is {:?} in file, configuration expects {:?}",
            m.shape(),
            slot.shape()
        )));
    }
    *slot = m;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            n_sa: 1,
            n_fa: 2,
            ffn_inner: 32,
            vocab: 11,
            lr_image_side: 8,
            hr_image_side: 16,
            patch_size: 4,
            channels: 1,
            selection: SelectionStrategy::attention_map(0.25),
            variant,
            pre_ln: false,
            end_token: None,
        }
    }

    fn image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(side, 1, (0..side * side).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let img = Image::new(2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&img, 2).unwrap().pixels, vec![0.5]);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        let c = Image::filled(8, 3, 0.25);
        assert_eq!(downsample(&c, 4).unwrap(), Image::filled(2, 3, 0.25));
        assert!(matches!(downsample(&img, 3), Err(FlexError::Config(_))));
    }

    #[test]
    fn encode_examples() {
        let cfg = tiny(Variant::Flex);
        let w = build_variant(&cfg, 1).unwrap();
        let mut ctr = FlopCounter::new();
        let hr = encode_image(&image(16, 0), &w, Resolution::Hr, &mut ctr).unwrap();
        assert_eq!(hr.shape(), (16, 16));
        // Identical patches differ only by position.
        let img = Image::filled(16, 1, 0.3);
        let t = encode_image(&img, &w, Resolution::Hr, &mut ctr).unwrap();
        let diff: Vec<f64> = (0..16).map(|j| t.get(0, j) - t.get(5, j)).collect();
        let pdiff: Vec<f64> = (0..16)
            .map(|j| w.pos_hr.get(0, j) - w.pos_hr.get(5, j))
            .collect();
        for (a, b) in diff.iter().zip(&pdiff) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut w0 = w.clone();
        w0.pos_lr = Matrix::zeros(4, 16);
        let z = encode_image(&Image::filled(8, 1, 0.0), &w0, Resolution::Lr, &mut ctr).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(encode_image(&img, &w, Resolution::Lr, &mut ctr).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::Flex);
        c.n_sa = 0;
        assert!(matches!(c.validate(), Err(FlexError::Config(_))));
        let mut c = tiny(Variant::Flex);
        c.hr_image_side = 20;
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::Flex);
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(matches!(
            "nope".parse::<Variant>(),
            Err(FlexError::Config(_))
        ));
        assert_eq!("cross_attn".parse::<Variant>().unwrap(), Variant::CrossAttn);
    }

    #[test]
    fn build_is_seeded_and_shares_initialisation() {
        let a = build_variant(&tiny(Variant::Flex), 3).unwrap();
        assert_eq!(a, build_variant(&tiny(Variant::Flex), 3).unwrap());
        let lr = build_variant(&tiny(Variant::LrOnly), 3).unwrap();
        assert_eq!(a.params.patch_proj, lr.params.patch_proj);
        assert_eq!(a.params.head, lr.params.head);
        for (fl, ll) in a.params.layers.iter().zip(&lr.params.layers) {
            assert_eq!(fl.attn.w_q, ll.attn.w_q);
            assert_eq!(fl.ffn, ll.ffn);
        }
        let l = &a.params.layers[2];
        assert!(l.attn.is_hierarchical());
        assert!(!a.params.layers[0].attn.is_hierarchical());
        assert_eq!(l.attn.w_k_prime.as_ref(), Some(&l.attn.w_k));
        assert_eq!(l.attn.w_v_prime.as_ref(), Some(&l.attn.w_v));
        let c = build_variant(&tiny(Variant::CrossAttn), 3).unwrap();
        assert!(c.params.layers.iter().all(|l| l.cross.is_some()));
        assert_eq!(c.params.layers[1].attn.w_q, lr.params.layers[1].attn.w_q);
    }

    #[test]
    fn empty_selection_matches_lr_only() {
        let img = image(16, 5);
        let flex = build_variant(&tiny(Variant::Flex), 9).unwrap();
        let lr = build_variant(&tiny(Variant::LrOnly), 9).unwrap();
        let opts = ForwardOptions {
            selection: SelectionOverride::Fixed(vec![]),
            ..Default::default()
        };
        let a = prefill_with(&flex, &img, &[1, 2, 3], &opts).unwrap();
        let b = prefill(&lr, &img, &[1, 2, 3]).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
    }

    #[test]
    fn hd_concat_at_factor_one_is_lr_only() {
        let mut c = tiny(Variant::HdConcat);
        c.hr_image_side = 8;
        let mut l = c.clone();
        l.variant = Variant::LrOnly;
        let img = image(8, 2);
        let a = prefill(&build_variant(&c, 4).unwrap(), &img, &[5, 6]).unwrap();
        let b = prefill(&build_variant(&l, 4).unwrap(), &img, &[5, 6]).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert_eq!(a.counter.totals(), b.counter.totals());
    }

    #[test]
    fn random_selection_is_drawn_per_image() {
        let mut c = tiny(Variant::Flex);
        c.selection = SelectionStrategy::random(7, 0.25);
        let w = build_variant(&c, 0).unwrap();
        let picks = |seed| -> Vec<Vec<usize>> {
            let out = prefill(&w, &image(16, seed), &[1, 2]).unwrap();
            out.selection_trace
                .iter()
                .map(|s| s.lr_indices.clone())
                .collect()
        };
        let first = picks(0);
        assert_eq!(first, picks(0));
        assert!((1..8).any(|s| picks(s) != first));
    }

    #[test]
    fn token_counts() {
        let img = image(16, 1);
        for v in Variant::ALL {
            let w = build_variant(&tiny(v), 0).unwrap();
            let out = prefill(&w, &img, &[1, 2, 3]).unwrap();
            let n = if v == Variant::HdConcat {
                4 + 16 + 3
            } else {
                4 + 3
            };
            assert_eq!(out.logits.rows(), n, "{v}");
            assert_eq!(out.maps.len(), 3);
            for m in &out.maps {
                assert_eq!(m.values.shape(), (n, n));
            }
        }
    }

    #[test]
    fn empty_text_is_an_error() {
        let w = build_variant(&tiny(Variant::Flex), 0).unwrap();
        assert!(matches!(
            prefill(&w, &image(16, 0), &[]),
            Err(FlexError::EmptyInput(_))
        ));
    }

    #[test]
    fn selection_follows_previous_layer_map() {
        let w = build_variant(&tiny(Variant::Flex), 7).unwrap();
        let out = prefill(&w, &image(16, 3), &[4, 2]).unwrap();
        assert_eq!(out.selection_trace.len(), 2);
        for s in &out.selection_trace {
            let prev = &out.maps[s.layer - 1];
            let row = prev.values.row(prev.values.rows() - 1);
            assert_eq!(s.source, row[..4].to_vec());
            assert_eq!(s.lr_indices, crate::selection::top_k(&s.source, 1));
            assert_eq!(s.hr_indices.len(), 4);
        }
    }

    #[test]
    fn generation_matches_prefill_and_is_deterministic() {
        for v in Variant::ALL {
            let w = build_variant(&tiny(v), 11).unwrap();
            let img = image(16, 8);
            let g1 = generate(&w, &img, &[3, 1], 1).unwrap();
            let pf = prefill(&w, &img, &[3, 1]).unwrap();
            assert_eq!(g1.tokens, vec![argmax(pf.logits.row(pf.logits.rows() - 1))]);
            let a = generate(&w, &img, &[3, 1], 4).unwrap();
            let b = generate(&w, &img, &[3, 1], 4).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.tokens.len(), 4);
        }
    }

    #[test]
    fn teacher_forced_prefill_matches_decode() {
        for v in Variant::ALL {
            let mut cfg = tiny(v);
            if v == Variant::Flex {
                cfg.selection = SelectionStrategy::random(5, 0.25);
            }
            let w = build_variant(&cfg, 21).unwrap();
            let img = image(16, 4);
            let prompt = [2, 7, 1];
            let g = generate(&w, &img, &prompt, 4).unwrap();
            let mut ids = prompt.to_vec();
            ids.extend(&g.tokens[..3]);
            let opts = ForwardOptions {
                prompt_len: Some(prompt.len()),
                ..Default::default()
            };
            let tf = prefill_with(&w, &img, &ids, &opts).unwrap();
            let base = tf.logits.rows() - 4;
            for (s, row) in g.step_logits.iter().enumerate() {
                let diff = row
                    .iter()
                    .zip(tf.logits.row(base + s))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-9, "{v} step {s}: {diff}");
            }
        }
    }

    #[test]
    fn end_token_stops_generation() {
        let mut cfg = tiny(Variant::LrOnly);
        let w = build_variant(&cfg, 1).unwrap();
        let img = image(16, 1);
        let first = generate(&w, &img, &[1], 1).unwrap().tokens[0];
        cfg.end_token = Some(first);
        let w = ModelWeights { config: cfg, ..w };
        assert_eq!(generate(&w, &img, &[1], 5).unwrap().tokens, vec![first]);
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        for v in Variant::ALL {
            let mut cfg = tiny(v);
            cfg.pre_ln = v == Variant::CrossAttn;
            cfg.end_token = Some(3);
            cfg.selection = SelectionStrategy::random(77, 0.5);
            let w = build_variant(&cfg, 5).unwrap();
            let mut buf = Vec::new();
            w.write_to(&mut buf).unwrap();
            let r = ModelWeights::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(r.config, w.config);
            for (a, b) in r.all_matrices().iter().zip(w.all_matrices()) {
                assert!(a.bit_eq(b));
            }
            let mut again = Vec::new();
            r.write_to(&mut again).unwrap();
            assert_eq!(buf, again);
        }
        assert!(matches!(
            ModelWeights::read_from(&mut &b"NOTWEIGHTS"[..]),
            Err(FlexError::Format(_))
        ));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::{central_difference, max_relative_error, FD_STEP};
        let mut cfg = tiny(Variant::Flex);
        cfg.n_fa = 1;
        let w = build_variant(&cfg, 6).unwrap();
        let img = image(16, 6);
        let opts = ForwardOptions {
            selection: SelectionOverride::Fixed(vec![0, 5, 6, 15]),
            ..Default::default()
        };
        let (_, g) = loss_and_grads(&w, &img, &[1, 2], 3, &opts).unwrap();
        let num = central_difference(
            &w.params.layers[1].attn.w_k_prime.clone().unwrap(),
            FD_STEP,
            |m| {
                let mut w2 = w.clone();
                w2.params.layers[1].attn.w_k_prime = Some(m.clone());
                loss(&w2, &img, &[1, 2], 3, &opts).unwrap()
            },
        );
        let ana = g.layers[1].attn.w_k_prime.as_ref().unwrap();
        assert!(max_relative_error(ana, &num) < 1e-5);
    }

    #[test]
    fn pre_ln_runs() {
        let mut cfg = tiny(Variant::Flex);
        cfg.pre_ln = true;
        let w = build_variant(&cfg, 2).unwrap();
        let g = generate(&w, &image(16, 2), &[1, 2], 3).unwrap();
        assert_eq!(g.tokens.len(), 3);
    }
}
