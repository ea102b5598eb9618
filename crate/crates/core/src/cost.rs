//! Analytical FLOP model for every variant, written to match the tensor
//! counters term for term, plus reconciliation against counted runs and a
//! full-scale estimate.
//!
//! Convention: a multiply-add is 2 FLOPs; exp and div are 1 each; plain adds
//! are 1. Softmax charges the full row length even where masked. Gathers,
//! concatenations, transposes and embedding lookups are free.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::model::{self, ForwardOptions, Image, ModelConfig, SelectionOverride, Variant};
use crate::selection::SelectionStrategy;
use crate::tensor::Flops;

/// Image encoder charged by the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CostEncoder {
    None,
    /// Linear patch projection plus positional add, as in the toy model.
    Linear {
        patch_dim: usize,
    },
    /// ViT-style tower: per layer `24·T·W² + 4·T²·W` FLOPs for `T` tokens.
    Vit {
        layers: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    /// LR image tokens `N_i`.
    pub n_image: usize,
    /// Text tokens `N_t` at prefill.
    pub n_text: usize,
    /// Selected HR tokens per hierarchical layer.
    pub m: usize,
    /// HR tokens `N_hr` (all of them; used by hd_concat and cross_attn).
    pub n_hr: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub n_sa: usize,
    pub n_fa: usize,
    pub vocab: usize,
    pub encoder: CostEncoder,
    /// Generated tokens; `output_len − 1` decode steps follow prefill.
    pub output_len: usize,
    #[serde(default)]
    pub pre_ln: bool,
}

impl CostConfig {
    /// Prefill sequence length `N = N_i + N_t`.
    pub fn n(&self) -> usize {
        self.n_image + self.n_text
    }

    pub fn validate(&self) -> Result<()> {
        if self.m > self.n_hr {
            return Err(FlexError::Config(format!(
                "M = {} exceeds N_hr = {}",
                self.m, self.n_hr
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(FlexError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.output_len == 0 {
            return Err(FlexError::Config("output_len must be at least 1".into()));
        }
        if self.n() == 0 {
            return Err(FlexError::Config("empty sequence".into()));
        }
        Ok(())
    }

    /// Cost configuration mirroring a model run on `n_text` prompt tokens.
    /// `m` defaults to the strategy's budget lifted to the HR grid.
    pub fn for_model(
        cfg: &ModelConfig,
        n_text: usize,
        output_len: usize,
        m: Option<usize>,
    ) -> Self {
        let f = cfg.factor();
        let m = m.unwrap_or_else(|| cfg.selection.budget(cfg.n_image()) * f * f);
        Self {
            n_image: cfg.n_image(),
            n_text,
            m,
            n_hr: cfg.n_hr(),
            d_model: cfg.d_model,
            heads: cfg.heads,
            ffn_inner: cfg.ffn_inner,
            n_sa: cfg.n_sa,
            n_fa: cfg.n_fa,
            vocab: cfg.vocab,
            encoder: CostEncoder::Linear {
                patch_dim: cfg.patch_dim(),
            },
            output_len,
            pre_ln: cfg.pre_ln,
        }
    }

    /// HR tokens placed in the hd_concat sequence (none when the HR grid
    /// equals the LR grid).
    fn concat_tokens(&self) -> usize {
        if self.n_hr == self.n_image {
            0
        } else {
            self.n_hr
        }
    }
}

fn fl(mul_adds: u64, exps: u64, divs: u64, adds: u64) -> Flops {
    Flops {
        mul_adds,
        exps,
        divs,
        adds,
    }
}

fn mm(m: usize, k: usize, n: usize) -> Flops {
    fl(2 * (m * k * n) as u64, 0, 0, 0)
}

fn adds(n: usize) -> Flops {
    fl(0, 0, 0, n as u64)
}

/// Scale plus softmax over `rows × len` scores for each head.
fn softmax(heads: usize, rows: usize, len: usize) -> Flops {
    let n = (heads * rows * len) as u64;
    fl(0, n, 2 * n, 3 * n)
}

fn layer_norm(rows: usize, cols: usize) -> Flops {
    let (r, c) = (rows as u64, cols as u64);
    fl(4 * r * c, 0, r * (c + 2), 2 * r * c)
}

fn gelu(n: usize) -> Flops {
    let n = n as u64;
    fl(8 * n, n, n, 2 * n)
}

/// One term of a layer breakdown.
pub type Term = (&'static str, Flops);

/// Geometry of one layer evaluation.
#[derive(Clone, Copy, Debug)]
struct LayerShape {
    /// Query rows.
    rows: usize,
    /// Hidden-state keys.
    keys: usize,
    /// Selected HR tokens projected and attended in this layer.
    hr: Option<usize>,
    /// Cross-attention over this many HR tokens; the bool says whether
    /// their keys/values are projected here (prefill) or cached (decode).
    cross: Option<(usize, bool)>,
}

fn layer_terms(c: &CostConfig, s: LayerShape) -> Vec<Term> {
    let (d, h, f) = (c.d_model, c.heads, c.ffn_inner);
    let r = s.rows;
    let len = s.keys + s.hr.unwrap_or(0);
    let mut t: Vec<Term> = vec![("qkv_proj", mm(r, d, d).scaled(3))];
    if let Some(m) = s.hr {
        t.push(("hr_kv_proj", mm(m, d, d).scaled(2)));
    }
    t.push(("scores", mm(r, d, len)));
    t.push(("softmax", softmax(h, r, len)));
    t.push(("weighted_sum", mm(r, len, d)));
    t.push(("out_proj", mm(r, d, d)));
    let sublayers = if s.cross.is_some() { 3 } else { 2 };
    t.push(("residual", adds(r * d).scaled(sublayers)));
    t.push(("layer_norm", layer_norm(r, d).scaled(sublayers)));
    if let Some((n_hr, project)) = s.cross {
        t.push(("cross_q_proj", mm(r, d, d)));
        if project {
            t.push(("cross_kv_proj", mm(n_hr, d, d).scaled(2)));
        }
        t.push((
            "cross_core",
            mm(r, d, n_hr) + softmax(h, r, n_hr) + mm(r, n_hr, d),
        ));
        t.push(("cross_out_proj", mm(r, d, d)));
    }
    t.push((
        "ffn",
        mm(r, d, f) + adds(r * f) + gelu(r * f) + mm(r, f, d) + adds(r * d),
    ));
    t
}

/// Vanilla decoder layer at prefill length `N`.
pub fn vanilla_layer_flops(c: &CostConfig) -> Vec<Term> {
    layer_terms(
        c,
        LayerShape {
            rows: c.n(),
            keys: c.n(),
            hr: None,
            cross: None,
        },
    )
}

/// Hierarchical layer at prefill: `N` queries over `N + M` keys plus the
/// `K'`/`V'` projections of the `M` selected tokens.
pub fn flex_layer_flops(c: &CostConfig) -> Vec<Term> {
    let mut t = layer_terms(
        c,
        LayerShape {
            rows: c.n(),
            keys: c.n(),
            hr: Some(c.m),
            cross: None,
        },
    );
    if c.m == 0 {
        t.retain(|(name, _)| *name != "hr_kv_proj");
    }
    t
}

/// Vanilla layer evaluated at sequence length `N + M`.
pub fn concat_layer_flops(c: &CostConfig) -> Vec<Term> {
    let n = c.n() + c.m;
    layer_terms(
        c,
        LayerShape {
            rows: n,
            keys: n,
            hr: None,
            cross: None,
        },
    )
}

/// Vanilla layer plus a cross-attention sub-layer over all `N_hr` tokens
/// (query, key/value and output projections, core, its own residual and
/// norm).
pub fn cross_layer_flops(c: &CostConfig) -> Vec<Term> {
    let cross = (c.n_hr > 0).then_some((c.n_hr, true));
    layer_terms(
        c,
        LayerShape {
            rows: c.n(),
            keys: c.n(),
            hr: None,
            cross,
        },
    )
}

/// Sum of the `scores`, `softmax` and `weighted_sum` terms.
pub fn attention_core(terms: &[Term]) -> Flops {
    terms
        .iter()
        .filter(|(n, _)| matches!(*n, "scores" | "softmax" | "weighted_sum"))
        .map(|(_, f)| *f)
        .sum()
}

pub fn total(terms: &[Term]) -> Flops {
    terms.iter().map(|(_, f)| *f).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCost {
    /// `"prefill"` or `"decode"`.
    pub phase: String,
    /// Decode step, starting at 1.
    pub step: Option<usize>,
    pub layer: Option<usize>,
    pub term: String,
    pub flops: Flops,
}

impl TermCost {
    /// The FLOP-counter tag a model run uses for this term.
    pub fn tag(&self) -> String {
        let mut s = match self.step {
            Some(k) => format!("decode.S{k:03}"),
            None => self.phase.clone(),
        };
        if let Some(l) = self.layer {
            let _ = write!(s, ".L{l:02}");
        }
        let _ = write!(s, ".{}", self.term);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub variant: Variant,
    pub passed: bool,
    /// Largest absolute difference over all terms and FLOP kinds.
    pub max_deviation: u64,
    /// First analytical term (in report order) whose counts differ.
    pub first_divergence: Option<String>,
    pub analytical: Flops,
    pub counted: Flops,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub config: CostConfig,
    pub terms: Vec<TermCost>,
    pub totals: Flops,
    /// Total FLOPs including the encoder.
    pub total_flops: u64,
    pub encoder_flops: u64,
    pub total_without_encoder: u64,
    pub tflops: f64,
    pub assumptions: Vec<String>,
    pub reconciliation: Option<Reconciliation>,
}

impl CostReport {
    /// Flat CSV, one row per term.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,phase,step,layer,term,mul_adds,exps,divs,adds,total\n");
        for t in &self.terms {
            let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.variant,
                t.phase,
                opt(t.step),
                opt(t.layer),
                t.term,
                t.flops.mul_adds,
                t.flops.exps,
                t.flops.divs,
                t.flops.adds,
                t.flops.total()
            );
        }
        s
    }
}

fn encoder_flops(c: &CostConfig, variant: Variant) -> Vec<(String, Flops)> {
    let uses_hr = match variant {
        Variant::LrOnly => false,
        Variant::HdConcat => c.concat_tokens() > 0,
        Variant::Flex | Variant::CrossAttn => true,
    };
    let towers: Vec<usize> = if uses_hr {
        vec![c.n_image, c.n_hr]
    } else {
        vec![c.n_image]
    };
    towers
        .into_iter()
        .map(|t| {
            let f = match c.encoder {
                CostEncoder::None => Flops::ZERO,
                CostEncoder::Linear { patch_dim } => {
                    mm(t, patch_dim, c.d_model) + adds(t * c.d_model)
                }
                CostEncoder::Vit { layers, width } => {
                    let (t, w, l) = (t as u64, width as u64, layers as u64);
                    fl(l * (24 * t * w * w + 4 * t * t * w), 0, 0, 0)
                }
            };
            (format!("encoder_T{t}"), f)
        })
        .collect()
}

fn assumptions(c: &CostConfig, variant: Variant) -> Vec<String> {
    let mut a = vec![
        "multiply-add = 2 FLOPs; exp, div and add = 1 FLOP each".to_string(),
        "softmax charges exp, normalising div, scale div and 3 adds per score, masked or not"
            .to_string(),
        "post-LN residual blocks; layer norm = 4C mul-adds, C+2 divs, 2C adds per row".to_string(),
        format!(
            "FFN is a 2-matrix GELU MLP with inner size {}; GELU = 8 mul-adds, 1 exp, 1 div, 2 adds",
            c.ffn_inner
        ),
        "logits are computed for every prefill row and for each decode step".to_string(),
        format!(
            "{} decode steps after prefill; step s attends over N + s cached keys",
            c.output_len - 1
        ),
    ];
    match variant {
        Variant::Flex => a.push(format!(
            "{} vanilla + {} hierarchical layers; M = {} selected HR tokens, K'/V' recomputed per layer per decode step",
            c.n_sa, c.n_fa, c.m
        )),
        Variant::HdConcat => a.push(format!(
            "{} HR tokens appended to the sequence; all layers vanilla",
            c.concat_tokens()
        )),
        Variant::CrossAttn => a.push(format!(
            "cross-attention over all {} HR tokens at full width D = {} in every layer, with output projection, residual and norm; HR keys/values cached after prefill",
            c.n_hr, c.d_model
        )),
        Variant::LrOnly => a.push("LR tokens only; all layers vanilla".to_string()),
    }
    a.push(match c.encoder {
        CostEncoder::None => "no image encoder cost".to_string(),
        CostEncoder::Linear { patch_dim } => {
            format!("linear patch encoder, patch dimension {patch_dim}, one tower per resolution")
        }
        CostEncoder::Vit { layers, width } => format!(
            "ViT encoder, {layers} layers of width {width}: 24·T·W² + 4·T²·W FLOPs per layer, run once per resolution"
        ),
    });
    if c.pre_ln {
        a.push("pre-LN blocks with a final norm".to_string());
    }
    a
}

/// Analytical cost of a whole generation: encoder, prefill, `output_len−1`
/// decode steps, and head projections.
pub fn full_run_flops(c: &CostConfig, variant: Variant) -> Result<CostReport> {
    c.validate()?;
    let (d, v) = (c.d_model, c.vocab);
    let n_layers = c.n_sa + c.n_fa;
    let n_cat = if variant == Variant::HdConcat {
        c.concat_tokens()
    } else {
        0
    };
    let n = c.n() + n_cat;
    let mut terms = Vec::new();
    let push = |terms: &mut Vec<TermCost>,
                step: Option<usize>,
                layer: Option<usize>,
                term: &str,
                f: Flops| {
        terms.push(TermCost {
            phase: if step.is_some() { "decode" } else { "prefill" }.to_string(),
            step,
            layer,
            term: term.to_string(),
            flops: f,
        });
    };
    let enc = encoder_flops(c, variant);
    let encoder_total: Flops = enc.iter().map(|(_, f)| *f).sum();
    push(&mut terms, None, None, "encoder", encoder_total);
    push(&mut terms, None, None, "embed", adds(c.n_text * d));

    let shape = |l: usize, rows: usize, keys: usize, prefill: bool| LayerShape {
        rows,
        keys,
        hr: (variant == Variant::Flex && l >= c.n_sa).then_some(c.m),
        cross: (variant == Variant::CrossAttn).then_some((c.n_hr, prefill)),
    };
    for l in 0..n_layers {
        for (name, f) in layer_terms(c, shape(l, n, n, true)) {
            push(&mut terms, None, Some(l), name, f);
        }
    }
    if c.pre_ln {
        push(&mut terms, None, None, "final_norm", layer_norm(n, d));
    }
    push(&mut terms, None, None, "head", mm(n, d, v));

    for s in 1..c.output_len {
        let keys = n + s;
        push(&mut terms, Some(s), None, "embed", adds(d));
        for l in 0..n_layers {
            for (name, f) in layer_terms(c, shape(l, 1, keys, false)) {
                push(&mut terms, Some(s), Some(l), name, f);
            }
        }
        if c.pre_ln {
            push(&mut terms, Some(s), None, "final_norm", layer_norm(1, d));
        }
        push(&mut terms, Some(s), None, "head", mm(1, d, v));
    }
    let totals: Flops = terms.iter().map(|t| t.flops).sum();
    let total_flops = totals.total();
    Ok(CostReport {
        variant,
        config: c.clone(),
        terms,
        totals,
        total_flops,
        encoder_flops: encoder_total.total(),
        total_without_encoder: total_flops - encoder_total.total(),
        tflops: total_flops as f64 / 1e12,
        assumptions: assumptions(c, variant),
        reconciliation: None,
    })
}

/// Model configuration that realises `c` on a real forward pass.
///
/// LR and HR grids come from `N_i` and `N_hr` (both perfect squares with
/// `N_hr = N_i·f²`); the patch is square with one channel, so the linear
/// encoder's patch dimension must be a perfect square.
pub fn model_config_for(c: &CostConfig, variant: Variant) -> Result<ModelConfig> {
    let side = |n: usize, what: &str| {
        let s = (n as f64).sqrt().round() as usize;
        if s * s == n && s > 0 {
            Ok(s)
        } else {
            Err(FlexError::Config(format!(
                "{what} = {n} is not a positive square"
            )))
        }
    };
    let g_lr = side(c.n_image, "N_i")?;
    let g_hr = if c.n_hr == 0 {
        g_lr
    } else {
        side(c.n_hr, "N_hr")?
    };
    if g_hr % g_lr != 0 {
        return Err(FlexError::Config(format!(
            "HR grid {g_hr} is not a multiple of LR grid {g_lr}"
        )));
    }
    let patch = match c.encoder {
        CostEncoder::Linear { patch_dim } => side(patch_dim, "patch_dim")?,
        _ => {
            return Err(FlexError::Config(
                "reconciliation needs the linear encoder".into(),
            ))
        }
    };
    Ok(ModelConfig {
        d_model: c.d_model,
        heads: c.heads,
        n_sa: c.n_sa,
        n_fa: c.n_fa,
        ffn_inner: c.ffn_inner,
        vocab: c.vocab,
        lr_image_side: g_lr * patch,
        hr_image_side: g_hr * patch,
        patch_size: patch,
        channels: 1,
        selection: SelectionStrategy::default(),
        variant,
        pre_ln: c.pre_ln,
        end_token: None,
    })
}

/// Runs the real model at `c` with FLOP tagging and compares every term
/// with [`full_run_flops`]. Hierarchical layers use a fixed selection of
/// `M` HR tokens spread over the grid.
pub fn reconcile(c: &CostConfig, variant: Variant, seed: u64) -> Result<CostReport> {
    let mut report = full_run_flops(c, variant)?;
    let cfg = model_config_for(c, variant)?;
    let w = model::build_variant(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.hr_image_side;
    let img = Image::new(side, 1, (0..side * side).map(|_| rng.gen()).collect())?;
    let prompt: Vec<usize> = (0..c.n_text).map(|_| rng.gen_range(0..cfg.vocab)).collect();
    let n_hr = cfg.n_hr();
    let fixed: Vec<usize> = (0..c.m).map(|i| i * n_hr / c.m.max(1)).collect();
    let opts = ForwardOptions {
        selection: SelectionOverride::Fixed(fixed),
        prompt_len: None,
        tag_prefix: Some("prefill".into()),
    };
    let gen = model::generate_with(&w, &img, &prompt, c.output_len, &opts)?;
    if gen.tokens.len() != c.output_len {
        return Err(FlexError::Contract("generation stopped early".into()));
    }
    let mut counted: HashMap<String, Flops> = HashMap::new();
    for (t, f) in gen.counter.breakdown() {
        *counted.entry(t.clone()).or_default() += *f;
    }
    let mut first = None;
    let mut max_dev = 0u64;
    let mut seen = std::collections::HashSet::new();
    let dev = |a: Flops, b: Flops| {
        [
            a.mul_adds.abs_diff(b.mul_adds),
            a.exps.abs_diff(b.exps),
            a.divs.abs_diff(b.divs),
            a.adds.abs_diff(b.adds),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    };
    for t in &report.terms {
        let tag = t.tag();
        let got = counted.get(&tag).copied().unwrap_or_default();
        let dv = dev(t.flops, got);
        if dv > 0 && first.is_none() {
            first = Some(format!("{tag}: analytical {:?}, counted {got:?}", t.flops));
        }
        max_dev = max_dev.max(dv);
        seen.insert(tag);
    }
    for (tag, f) in &counted {
        if !seen.contains(tag) && !f.is_zero() {
            max_dev = max_dev.max(dev(Flops::ZERO, *f));
            if first.is_none() {
                first = Some(format!("{tag}: counted {f:?} with no analytical term"));
            }
        }
    }
    let counted_total = gen.counter.totals();
    if counted_total != report.totals && first.is_none() {
        first = Some(format!(
            "untagged counts: analytical {:?}, counted {counted_total:?}",
            report.totals
        ));
        max_dev = max_dev.max(dev(report.totals, counted_total));
    }
    report.reconciliation = Some(Reconciliation {
        variant,
        passed: first.is_none(),
        max_deviation: max_dev,
        first_divergence: first,
        analytical: report.totals,
        counted: counted_total,
    });
    Ok(report)
}

/// Dimensions of a LLaVA-1.5-7B-style model, used for full-scale estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FullScale {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// FFN inner size of a 2-matrix MLP with the FLOPs of LLaMA's 3-matrix
    /// SwiGLU at 11008 (1.5 × 11008).
    pub ffn_inner: usize,
    pub vocab: usize,
    /// 336² input at patch 14.
    pub lr_grid: usize,
    pub n_text: usize,
    /// 1008² input for flex and cross_attn.
    pub hr_grid: usize,
    /// 448² input for hd_concat.
    pub concat_grid: usize,
    pub ratio: f64,
    pub vit_layers: usize,
    pub vit_width: usize,
}

impl Default for FullScale {
    fn default() -> Self {
        Self {
            d_model: 4096,
            heads: 32,
            layers: 32,
            ffn_inner: 16512,
            vocab: 32000,
            lr_grid: 24,
            n_text: 32,
            hr_grid: 72,
            concat_grid: 32,
            ratio: 0.1,
            vit_layers: 24,
            vit_width: 1024,
        }
    }
}

impl FullScale {
    /// Selected HR tokens: `ceil(ρ·N_i)` LR patches, each covering
    /// `(hr_grid/lr_grid)²` HR patches.
    pub fn m(&self) -> usize {
        let f = self.hr_grid / self.lr_grid;
        SelectionStrategy::attention_map(self.ratio).budget(self.lr_grid * self.lr_grid) * f * f
    }

    pub fn config(
        &self,
        variant: Variant,
        n_sa: usize,
        output_len: usize,
        vit: bool,
    ) -> CostConfig {
        let n_hr = match variant {
            Variant::HdConcat => self.concat_grid * self.concat_grid,
            _ => self.hr_grid * self.hr_grid,
        };
        CostConfig {
            n_image: self.lr_grid * self.lr_grid,
            n_text: self.n_text,
            m: if variant == Variant::Flex {
                self.m()
            } else {
                0
            },
            n_hr,
            d_model: self.d_model,
            heads: self.heads,
            ffn_inner: self.ffn_inner,
            n_sa,
            n_fa: self.layers - n_sa,
            vocab: self.vocab,
            encoder: if vit {
                CostEncoder::Vit {
                    layers: self.vit_layers,
                    width: self.vit_width,
                }
            } else {
                CostEncoder::None
            },
            output_len,
            pre_ln: false,
        }
    }
}

/// One point of the full-scale comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n_sa: usize,
    pub output_len: usize,
    pub with_encoder: bool,
    pub flex_tflops: f64,
    pub concat_tflops: f64,
    pub cross_tflops: f64,
    pub flex_over_cross: f64,
    pub flex_over_concat: f64,
    pub ordered: bool,
}

/// Sweeps the unknown layer split and decode length, with and without the
/// vision encoder.
pub fn full_scale_sweep(
    p: &FullScale,
    n_sa_values: &[usize],
    output_lens: &[usize],
) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::new();
    for &with_encoder in &[true, false] {
        for &out in output_lens {
            for &n_sa in n_sa_values {
                let t =
                    |v| full_run_flops(&p.config(v, n_sa, out, with_encoder), v).map(|r| r.tflops);
                let (flex, concat, cross) = (
                    t(Variant::Flex)?,
                    t(Variant::HdConcat)?,
                    t(Variant::CrossAttn)?,
                );
                rows.push(ScaleRow {
                    n_sa,
                    output_len: out,
                    with_encoder,
                    flex_tflops: flex,
                    concat_tflops: concat,
                    cross_tflops: cross,
                    flex_over_cross: flex / cross,
                    flex_over_concat: flex / concat,
                    ordered: flex < concat && concat < cross,
                });
            }
        }
    }
    Ok(rows)
}

/// Full-scale rows to include in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullScaleSweep {
    #[serde(default)]
    pub scale: FullScale,
    pub n_sa: Vec<usize>,
    pub output_lens: Vec<usize>,
}

/// What the `cost` command evaluates. Empty lists skip their sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostSweep {
    /// Starting point; each sweep overrides `m` and `n_hr`.
    pub base: CostConfig,
    /// Selected-token counts for the per-layer sweep (flex against a
    /// sequence grown by the same number of tokens).
    pub m_values: Vec<usize>,
    /// HR/LR side factors for the full-run resolution sweep.
    pub hr_factors: Vec<usize>,
    /// Selection ratio used by the resolution sweep.
    pub ratio: f64,
    /// Selection ratios for the flex full-run sweep at the base resolution.
    pub ratios: Vec<f64>,
    pub full_scale: Option<FullScaleSweep>,
}

impl Default for CostSweep {
    fn default() -> Self {
        Self {
            base: CostConfig {
                n_image: 16,
                n_text: 8,
                m: 0,
                n_hr: 256,
                d_model: 32,
                heads: 2,
                ffn_inner: 128,
                n_sa: 2,
                n_fa: 2,
                vocab: 16,
                encoder: CostEncoder::Linear { patch_dim: 16 },
                output_len: 1,
                pre_ln: false,
            },
            m_values: (0..=64).step_by(8).collect(),
            hr_factors: vec![1, 2, 3, 4],
            ratio: 0.1,
            ratios: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            full_scale: Some(FullScaleSweep {
                scale: FullScale::default(),
                n_sa: vec![8, 16, 24],
                output_lens: vec![1],
            }),
        }
    }
}

impl CostSweep {
    /// A sweep that evaluates nothing.
    pub fn empty() -> Self {
        Self {
            m_values: Vec::new(),
            hr_factors: Vec::new(),
            ratios: Vec::new(),
            full_scale: None,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `m`, `resolution` or `ratio`.
    pub sweep: String,
    pub x: f64,
    pub variant: Variant,
    pub m: usize,
    pub n_hr: usize,
    pub attention_core: u64,
    pub total_flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub full_scale: Vec<ScaleRow>,
}

impl SweepReport {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.full_scale.is_empty()
    }

    pub fn to_csv(&self) -> String {
        if self.is_empty() {
            return String::new();
        }
        let mut s = String::from("sweep,x,variant,m,n_hr,attention_core,total_flops\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.sweep, p.x, p.variant, p.m, p.n_hr, p.attention_core, p.total_flops
            );
        }
        for r in &self.full_scale {
            for (v, t) in [
                (Variant::Flex, r.flex_tflops),
                (Variant::HdConcat, r.concat_tflops),
                (Variant::CrossAttn, r.cross_tflops),
            ] {
                let tag = if r.with_encoder {
                    "full_scale"
                } else {
                    "full_scale_no_encoder"
                };
                let _ = writeln!(s, "{tag},{},{v},,,,{}", r.n_sa, (t * 1e12).round() as u64);
            }
        }
        s
    }

    /// Points of one sweep for one variant, as `(x, total_flops)`.
    pub fn series(&self, sweep: &str, variant: Variant, core: bool) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.sweep == sweep && p.variant == variant)
            .map(|p| {
                (
                    p.x,
                    if core {
                        p.attention_core
                    } else {
                        p.total_flops
                    } as f64,
                )
            })
            .collect()
    }
}

fn run_core(terms: &[Term]) -> u64 {
    attention_core(terms).total()
}

/// Evaluates every non-empty sweep in `s`.
pub fn run_sweep(s: &CostSweep) -> Result<SweepReport> {
    let mut out = SweepReport::default();
    let base = &s.base;
    for &m in &s.m_values {
        let c = CostConfig {
            m,
            n_hr: base.n_hr.max(m),
            ..base.clone()
        };
        c.validate()?;
        for (v, terms) in [
            (Variant::Flex, flex_layer_flops(&c)),
            (Variant::HdConcat, concat_layer_flops(&c)),
        ] {
            out.points.push(SweepPoint {
                sweep: "m".into(),
                x: m as f64,
                variant: v,
                m,
                n_hr: c.n_hr,
                attention_core: run_core(&terms),
                total_flops: total(&terms).total(),
            });
        }
    }
    let budget = |ratio: f64| -> Result<usize> {
        let st = SelectionStrategy::attention_map(ratio);
        st.validate()?;
        Ok(st.budget(base.n_image))
    };
    let mut full = |sweep: &str, x: f64, c: CostConfig, variants: &[Variant]| -> Result<()> {
        for &v in variants {
            let c = CostConfig {
                m: if v == Variant::Flex { c.m } else { 0 },
                ..c.clone()
            };
            let r = full_run_flops(&c, v)?;
            let core = r
                .terms
                .iter()
                .filter(|t| ["scores", "softmax", "weighted_sum"].contains(&t.term.as_str()))
                .map(|t| t.flops.total())
                .sum();
            out.points.push(SweepPoint {
                sweep: sweep.into(),
                x,
                variant: v,
                m: c.m,
                n_hr: c.n_hr,
                attention_core: core,
                total_flops: r.total_flops,
            });
        }
        Ok(())
    };
    for &f in &s.hr_factors {
        if f == 0 {
            return Err(FlexError::Config(
                "resolution factor must be at least 1".into(),
            ));
        }
        let c = CostConfig {
            n_hr: base.n_image * f * f,
            m: budget(s.ratio)? * f * f,
            ..base.clone()
        };
        full("resolution", f as f64, c, &Variant::ALL)?;
    }
    let f = ((base.n_hr as f64 / base.n_image.max(1) as f64)
        .sqrt()
        .round() as usize)
        .max(1);
    for &r in &s.ratios {
        let c = CostConfig {
            m: budget(r)? * f * f,
            ..base.clone()
        };
        full("ratio", r, c, &[Variant::Flex])?;
    }
    if let Some(p) = &s.full_scale {
        out.full_scale = full_scale_sweep(&p.scale, &p.n_sa, &p.output_lens)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(m: usize) -> CostConfig {
        CostConfig {
            n_image: 4,
            n_text: 4,
            m,
            n_hr: 16,
            d_model: 16,
            heads: 1,
            ffn_inner: 64,
            n_sa: 1,
            n_fa: 1,
            vocab: 10,
            encoder: CostEncoder::Linear { patch_dim: 4 },
            output_len: 1,
            pre_ln: false,
        }
    }

    #[test]
    fn zero_m_is_vanilla() {
        let c = small(0);
        assert_eq!(flex_layer_flops(&c), vanilla_layer_flops(&c));
        assert_eq!(concat_layer_flops(&c), vanilla_layer_flops(&c));
        let mut c0 = c.clone();
        c0.n_hr = 0;
        assert_eq!(cross_layer_flops(&c0), vanilla_layer_flops(&c0));
    }

    #[test]
    fn flex_core_is_affine_in_m() {
        let core = |m| attention_core(&flex_layer_flops(&small(m))).total() as i64;
        assert_eq!(core(8) - core(4), core(12) - core(8));
        let cat = |m| attention_core(&concat_layer_flops(&small(m))).total() as i64;
        let d2 = cat(8) - 2 * cat(4) + cat(0);
        assert!(d2 > 0);
        assert_eq!(cat(12) - 2 * cat(8) + cat(4), d2);
    }

    #[test]
    fn score_ratio_at_full_dims() {
        let mut c = small(518);
        c.n_image = 576;
        c.n_text = 32;
        c.n_hr = 5184;
        c.d_model = 4096;
        let score = |t: &[Term]| t.iter().find(|(n, _)| *n == "scores").unwrap().1.total() as f64;
        let r = score(&flex_layer_flops(&c)) / score(&concat_layer_flops(&c));
        assert!((r - 608.0 / 1126.0).abs() < 1e-12);
        assert!((r - 0.540).abs() < 5e-4);
    }

    #[test]
    fn cross_grows_linearly_in_n_hr() {
        let t = |n_hr| {
            let mut c = small(0);
            c.n_hr = n_hr;
            total(&cross_layer_flops(&c)).total() as i64
        };
        assert_eq!(t(32) - t(16), t(48) - t(32));
    }

    #[test]
    fn degrees_in_d() {
        let mut a = small(4);
        a.d_model = 16;
        let mut b = a.clone();
        b.d_model = 32;
        let get = |c: &CostConfig, name: &str| {
            flex_layer_flops(c)
                .iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .mul_adds
        };
        assert_eq!(get(&b, "qkv_proj"), 4 * get(&a, "qkv_proj"));
        assert_eq!(get(&b, "hr_kv_proj"), 4 * get(&a, "hr_kv_proj"));
        assert_eq!(get(&b, "scores"), 2 * get(&a, "scores"));
    }

    #[test]
    fn report_totals_and_units() {
        let r = full_run_flops(&small(4), Variant::Flex).unwrap();
        let s: Flops = r.terms.iter().map(|t| t.flops).sum();
        assert_eq!(s, r.totals);
        assert_eq!(r.tflops, r.total_flops as f64 / 1e12);
        assert!(r.to_csv().lines().count() == r.terms.len() + 1);
    }

    #[test]
    fn reconciles_small_runs() {
        for v in Variant::ALL {
            let mut c = small(if v == Variant::Flex { 4 } else { 0 });
            c.heads = 2;
            c.output_len = 3;
            let r = reconcile(&c, v, 1).unwrap();
            let rec = r.reconciliation.unwrap();
            assert!(rec.passed, "{v}: {:?}", rec.first_divergence);
        }
    }

    #[test]
    fn reconciles_single_token() {
        for v in Variant::ALL {
            let mut c = small(if v == Variant::Flex { 1 } else { 0 });
            c.n_image = 1;
            c.n_text = 1;
            c.n_hr = 4;
            let rec = reconcile(&c, v, 2).unwrap().reconciliation.unwrap();
            assert!(rec.passed, "{v}: {:?}", rec.first_divergence);
        }
    }

    #[test]
    fn sweep_shapes() {
        let r = run_sweep(&CostSweep::default()).unwrap();
        let flex = r.series("m", Variant::Flex, true);
        let cat = r.series("m", Variant::HdConcat, true);
        let d2 = |v: &[(f64, f64)]| -> Vec<f64> {
            v.windows(3)
                .map(|w| w[2].1 - 2.0 * w[1].1 + w[0].1)
                .collect()
        };
        assert!(d2(&flex).iter().all(|&x| x == 0.0));
        assert!(d2(&cat).iter().all(|&x| x > 0.0 && x == d2(&cat)[0]));
        let ratio = r.series("ratio", Variant::Flex, false);
        assert!(ratio.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(r
            .full_scale
            .iter()
            .filter(|row| row.with_encoder)
            .all(|row| row.ordered));
        let e = run_sweep(&CostSweep::empty()).unwrap();
        assert!(e.is_empty());
        assert_eq!(e.to_csv(), "");
    }

    #[test]
    fn full_scale_selection() {
        let p = FullScale::default();
        assert_eq!(p.m(), 522);
    }
}
