//! Causal self-attention, hierarchical self-attention over hidden states plus
//! selected high-resolution tokens, the cross-attention baseline, and their
//! single-token decode forms.
//!
//! All operators are multi-head with head width `D / heads` and an output
//! projection. The attention map handed to token selection is the mean of the
//! per-head post-softmax maps.

use crate::error::{FlexError, Result};
use crate::tensor::{causal_mask, ops, FlopCounter, GradTape, Matrix, Var};

/// Projection matrices of one attention sub-layer.
///
/// Generic over the storage so the same layout serves both plain weights
/// (`Matrix`) and weights bound to a [`GradTape`] (`Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = Matrix> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    /// Key projection for selected high-resolution tokens. Present only on
    /// hierarchical layers.
    pub w_k_prime: Option<T>,
    pub w_v_prime: Option<T>,
    pub heads: usize,
}

impl<T> AttentionWeights<T> {
    pub fn is_hierarchical(&self) -> bool {
        self.w_k_prime.is_some() && self.w_v_prime.is_some()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            w_k_prime: self.w_k_prime.as_ref().map(&mut f),
            w_v_prime: self.w_v_prime.as_ref().map(&mut f),
            heads: self.heads,
        }
    }

    /// Matrices in storage order: q, k, v, o, then k', v' when present.
    pub fn tensors(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ];
        if let (Some(k), Some(v)) = (&self.w_k_prime, &self.w_v_prime) {
            out.push(("w_k_prime", k));
            out.push(("w_v_prime", v));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        if let Some(k) = self.w_k_prime.as_mut() {
            out.push(k);
        }
        if let Some(v) = self.w_v_prime.as_mut() {
            out.push(v);
        }
        out
    }
}

impl AttentionWeights<Matrix> {
    /// Vanilla-layer weights. Fails unless every matrix is `D×D` with `D`
    /// divisible by `heads`.
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix, heads: usize) -> Result<Self> {
        let w = Self {
            w_q,
            w_k,
            w_v,
            w_o,
            w_k_prime: None,
            w_v_prime: None,
            heads,
        };
        w.validate()?;
        Ok(w)
    }

    /// Adds the high-resolution key/value projections, turning the weights
    /// into hierarchical-layer weights.
    pub fn with_primes(mut self, w_k_prime: Matrix, w_v_prime: Matrix) -> Result<Self> {
        self.w_k_prime = Some(w_k_prime);
        self.w_v_prime = Some(w_v_prime);
        self.validate()?;
        Ok(self)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(FlexError::Config(format!(
                "hidden size {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for (name, m) in self.tensors() {
            if m.shape() != (d, d) {
                return Err(FlexError::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        if self.w_k_prime.is_some() != self.w_v_prime.is_some() {
            return Err(FlexError::Config(
                "w_k_prime and w_v_prime must be present together".into(),
            ));
        }
        Ok(())
    }

    /// Places every matrix on `tape`.
    pub fn bind(&self, tape: &mut GradTape, differentiable: bool) -> AttentionWeights<Var> {
        self.map(|m| tape.leaf(m.clone(), differentiable))
    }
}

/// Row-stochastic attention weights with heads already averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Matrix,
    /// Number of per-head maps averaged into `values`.
    pub heads_averaged: usize,
    pub causal: bool,
}

impl AttentionMap {
    /// The leading `n` columns, not renormalised.
    pub fn truncate(&self, n: usize) -> AttentionMap {
        AttentionMap {
            values: self.values.slice_cols(0, n),
            heads_averaged: self.heads_averaged,
            causal: self.causal,
        }
    }

    pub fn last_row(&self) -> &[f64] {
        self.values.row(self.values.rows() - 1)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.values.rows())
            .map(|i| self.values.row(i).iter().sum())
            .collect()
    }
}

/// Output of [`hierarchical_self_attention`].
#[derive(Clone, Debug)]
pub struct HierarchicalOutput {
    pub out: Matrix,
    /// `N × (N+M)` map over hidden-state keys followed by selected HR keys.
    pub map_full: AttentionMap,
    /// The leading `N × N` block of `map_full`; rows sum to at most one.
    pub map_trunc: AttentionMap,
}

/// Optional FLOP-counter tag prefix; terms are appended to it.
#[derive(Clone, Copy, Default)]
pub struct Tags<'a>(pub Option<&'a str>);

impl Tags<'_> {
    pub(crate) fn set(&self, tape: &mut GradTape, term: &str) {
        if let Some(p) = self.0 {
            tape.counter_mut().set_tag(format!("{p}{term}"));
        }
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`,
/// followed by head concatenation (no output projection).
fn attend(
    tape: &mut GradTape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Matrix>,
    tags: Tags<'_>,
) -> Result<(Var, Matrix)> {
    let d_model = tape.value(q).cols();
    let d = d_model / heads;
    let scale = (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut map: Option<Matrix> = None;
    for h in 0..heads {
        tags.set(tape, "scores");
        let qh = tape.slice_cols(q, h * d, d);
        let kh = tape.slice_cols(k, h * d, d);
        let vh = tape.slice_cols(v, h * d, d);
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt)?;
        tags.set(tape, "softmax");
        let s = tape.div_scalar(s, scale);
        let p = tape.softmax_rows(s, mask)?;
        match &mut map {
            Some(m) => m.accumulate(tape.value(p)),
            None => map = Some(tape.value(p).clone()),
        }
        tags.set(tape, "weighted_sum");
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let mut map = map.expect("at least one head");
    if heads > 1 {
        let hf = heads as f64;
        map.data_mut().iter_mut().for_each(|x| *x /= hf);
    }
    Ok((cat, map))
}

fn check_input(tape: &GradTape, h: Var, d: usize) -> Result<()> {
    let hv = tape.value(h);
    if hv.rows() == 0 {
        return Err(FlexError::EmptyInput("attention over zero tokens".into()));
    }
    if hv.cols() != d {
        return Err(FlexError::Shape(format!(
            "hidden state has {} columns, weights expect {d}",
            hv.cols()
        )));
    }
    Ok(())
}

/// Vanilla multi-head self-attention recorded on `tape`. Returns the
/// projected output and the head-averaged `N×N` map.
pub fn self_attention_on(
    tape: &mut GradTape,
    h: Var,
    w: &AttentionWeights<Var>,
    causal: bool,
    tags: Tags<'_>,
) -> Result<(Var, AttentionMap)> {
    self_attention_kv_on(tape, h, w, causal, tags).map(|(o, m, _)| (o, m))
}

/// Projected keys and values produced while attending; what a KV cache
/// stores after prefill.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KvVars {
    pub k: Var,
    pub v: Var,
    /// Projected selected HR tokens of the last query group.
    pub hr: Option<(Var, Var)>,
}

pub(crate) fn self_attention_kv_on(
    tape: &mut GradTape,
    h: Var,
    w: &AttentionWeights<Var>,
    causal: bool,
    tags: Tags<'_>,
) -> Result<(Var, AttentionMap, KvVars)> {
    let d = tape.value(w.w_q).rows();
    check_input(tape, h, d)?;
    let n = tape.value(h).rows();
    tags.set(tape, "qkv_proj");
    let q = tape.matmul(h, w.w_q)?;
    let k = tape.matmul(h, w.w_k)?;
    let v = tape.matmul(h, w.w_v)?;
    let mask = causal.then(|| causal_mask(n, n, n, 0));
    let (cat, map) = attend(tape, q, k, v, w.heads, mask.as_ref(), tags)?;
    tags.set(tape, "out_proj");
    let out = tape.matmul(cat, w.w_o)?;
    Ok((
        out,
        AttentionMap {
            values: map,
            heads_averaged: w.heads,
            causal,
        },
        KvVars { k, v, hr: None },
    ))
}

/// One group of query rows sharing a set of selected HR tokens.
pub struct QueryGroup {
    /// Query rows `start..end` of the hidden state.
    pub start: usize,
    pub end: usize,
    /// Selected high-resolution tokens (`M×D`, possibly zero rows).
    pub f_shr: Var,
}

/// Hierarchical self-attention with per-group selections.
///
/// Every group's queries see all `N` hidden-state keys (causally masked by
/// absolute position) followed by that group's own `M_g` selected HR keys,
/// which are visible to every query. Returns the output rows in order and
/// one full `rows × (N+M_g)` map per group.
pub fn hierarchical_attention_grouped_on(
    tape: &mut GradTape,
    h: Var,
    groups: &[QueryGroup],
    w: &AttentionWeights<Var>,
    causal: bool,
    tags: Tags<'_>,
) -> Result<(Var, Vec<AttentionMap>)> {
    hierarchical_kv_on(tape, h, groups, w, causal, tags).map(|(o, m, _)| (o, m))
}

pub(crate) fn hierarchical_kv_on(
    tape: &mut GradTape,
    h: Var,
    groups: &[QueryGroup],
    w: &AttentionWeights<Var>,
    causal: bool,
    tags: Tags<'_>,
) -> Result<(Var, Vec<AttentionMap>, KvVars)> {
    let (Some(wk2), Some(wv2)) = (w.w_k_prime, w.w_v_prime) else {
        return Err(FlexError::Config(
            "hierarchical attention needs w_k_prime and w_v_prime".into(),
        ));
    };
    let d = tape.value(w.w_q).rows();
    check_input(tape, h, d)?;
    let n = tape.value(h).rows();
    tags.set(tape, "qkv_proj");
    let q = tape.matmul(h, w.w_q)?;
    let k = tape.matmul(h, w.w_k)?;
    let v = tape.matmul(h, w.w_v)?;
    let mut outs = Vec::with_capacity(groups.len());
    let mut maps = Vec::with_capacity(groups.len());
    let mut next = 0;
    let mut last_hr = None;
    for g in groups {
        if g.start != next || g.end <= g.start || g.end > n {
            return Err(FlexError::Config(format!(
                "query groups must tile 0..{n} in order; got {}..{}",
                g.start, g.end
            )));
        }
        next = g.end;
        if tape.value(g.f_shr).cols() != d {
            return Err(FlexError::Shape(format!(
                "selected HR tokens have {} columns, expected {d}",
                tape.value(g.f_shr).cols()
            )));
        }
        let m = tape.value(g.f_shr).rows();
        tags.set(tape, "hr_kv_proj");
        let k_hr = tape.matmul(g.f_shr, wk2)?;
        let v_hr = tape.matmul(g.f_shr, wv2)?;
        last_hr = Some((k_hr, v_hr));
        let k_all = tape.concat_rows(k, k_hr)?;
        let v_all = tape.concat_rows(v, v_hr)?;
        let qg = if g.start == 0 && g.end == n {
            q
        } else {
            tape.slice_rows(q, g.start, g.end)
        };
        let rows = g.end - g.start;
        let mask = causal.then(|| causal_mask(rows, n + m, n, g.start));
        let (cat, map) = attend(tape, qg, k_all, v_all, w.heads, mask.as_ref(), tags)?;
        outs.push(cat);
        maps.push(AttentionMap {
            values: map,
            heads_averaged: w.heads,
            causal,
        });
    }
    if next != n {
        return Err(FlexError::Config(format!(
            "query groups cover 0..{next}, expected 0..{n}"
        )));
    }
    let mut cat = outs[0];
    for o in &outs[1..] {
        cat = tape.concat_rows(cat, *o)?;
    }
    tags.set(tape, "out_proj");
    let out = tape.matmul(cat, w.w_o)?;
    Ok((out, maps, KvVars { k, v, hr: last_hr }))
}

/// Hierarchical self-attention recorded on `tape` with a single selection
/// shared by all queries. Returns the output and the full `N×(N+M)` map.
pub fn hierarchical_attention_on(
    tape: &mut GradTape,
    h: Var,
    f_shr: Var,
    w: &AttentionWeights<Var>,
    causal: bool,
    tags: Tags<'_>,
) -> Result<(Var, AttentionMap)> {
    if tape.value(h).rows() == 0 {
        return Err(FlexError::EmptyInput("attention over zero tokens".into()));
    }
    let n = tape.value(h).rows();
    let (out, mut maps) = hierarchical_attention_grouped_on(
        tape,
        h,
        &[QueryGroup {
            start: 0,
            end: n,
            f_shr,
        }],
        w,
        causal,
        tags,
    )?;
    Ok((out, maps.pop().expect("one group")))
}

/// Cross-attention from hidden states to the full HR token set, recorded on
/// `tape`. No mask.
pub fn cross_attention_on(
    tape: &mut GradTape,
    h: Var,
    f_hr: Var,
    w: &AttentionWeights<Var>,
    tags: Tags<'_>,
) -> Result<Var> {
    cross_attention_kv_on(tape, h, f_hr, w, tags).map(|(o, _)| o)
}

pub(crate) fn cross_attention_kv_on(
    tape: &mut GradTape,
    h: Var,
    f_hr: Var,
    w: &AttentionWeights<Var>,
    tags: Tags<'_>,
) -> Result<(Var, (Var, Var))> {
    let d = tape.value(w.w_q).rows();
    check_input(tape, h, d)?;
    if tape.value(f_hr).rows() == 0 {
        return Err(FlexError::EmptyInput(
            "cross-attention over zero HR tokens".into(),
        ));
    }
    tags.set(tape, "cross_q_proj");
    let q = tape.matmul(h, w.w_q)?;
    tags.set(tape, "cross_kv_proj");
    let k = tape.matmul(f_hr, w.w_k)?;
    let v = tape.matmul(f_hr, w.w_v)?;
    tags.set(tape, "cross_core");
    let (cat, _) = attend(tape, q, k, v, w.heads, None, Tags(None))?;
    tags.set(tape, "cross_out_proj");
    Ok((tape.matmul(cat, w.w_o)?, (k, v)))
}

fn with_counter<T>(ctr: &mut FlopCounter, f: impl FnOnce(&mut GradTape) -> Result<T>) -> Result<T> {
    let mut tape = GradTape::with_counter(std::mem::take(ctr));
    let r = f(&mut tape);
    *ctr = tape.into_counter();
    r
}

/// Vanilla self-attention on plain matrices.
pub fn self_attention(
    h: &Matrix,
    w: &AttentionWeights,
    causal: bool,
    ctr: &mut FlopCounter,
) -> Result<(Matrix, AttentionMap)> {
    with_counter(ctr, |tape| {
        let hv = tape.constant(h.clone());
        let wv = w.bind(tape, false);
        let (out, map) = self_attention_on(tape, hv, &wv, causal, Tags(None))?;
        Ok((tape.value(out).clone(), map))
    })
}

/// Hierarchical self-attention on plain matrices.
pub fn hierarchical_self_attention(
    h: &Matrix,
    f_shr: &Matrix,
    w: &AttentionWeights,
    causal: bool,
    ctr: &mut FlopCounter,
) -> Result<HierarchicalOutput> {
    with_counter(ctr, |tape| {
        let hv = tape.constant(h.clone());
        let sv = tape.constant(f_shr.clone());
        let wv = w.bind(tape, false);
        let (out, map_full) = hierarchical_attention_on(tape, hv, sv, &wv, causal, Tags(None))?;
        let map_trunc = map_full.truncate(h.rows());
        Ok(HierarchicalOutput {
            out: tape.value(out).clone(),
            map_full,
            map_trunc,
        })
    })
}

/// Cross-attention baseline on plain matrices.
pub fn cross_attention(
    h: &Matrix,
    f_hr: &Matrix,
    w: &AttentionWeights,
    ctr: &mut FlopCounter,
) -> Result<Matrix> {
    with_counter(ctr, |tape| {
        let hv = tape.constant(h.clone());
        let fv = tape.constant(f_hr.clone());
        let wv = w.bind(tape, false);
        let out = cross_attention_on(tape, hv, fv, &wv, Tags(None))?;
        Ok(tape.value(out).clone())
    })
}

/// Cached keys and values of one attention layer.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub k: Option<Matrix>,
    pub v: Option<Matrix>,
    /// Projected keys/values of the currently selected HR tokens.
    pub hr_k: Option<Matrix>,
    pub hr_v: Option<Matrix>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hr_len(&self) -> usize {
        self.hr_k.as_ref().map_or(0, |k| k.rows())
    }

    /// Cache seeded from a prefill: `k`, `v` are the projected hidden states.
    pub fn from_prefill(k: Matrix, v: Matrix) -> Self {
        Self {
            k: Some(k),
            v: Some(v),
            hr_k: None,
            hr_v: None,
        }
    }

    fn append(&mut self, k: &Matrix, v: &Matrix) -> Result<()> {
        self.k = Some(match self.k.take() {
            Some(old) => ops::concat_rows(&old, k)?,
            None => k.clone(),
        });
        self.v = Some(match self.v.take() {
            Some(old) => ops::concat_rows(&old, v)?,
            None => v.clone(),
        });
        Ok(())
    }
}

/// Per-layer caches for one generation stream.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    /// Cross-attention keys/values over the full HR set, per layer.
    pub cross: Vec<Option<(Matrix, Matrix)>>,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); layers],
            cross: vec![None; layers],
        }
    }

    /// Number of tokens processed so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decodes one token through one attention layer.
///
/// Appends the token's key/value to `cache`, and for a hierarchical layer
/// replaces the cached HR keys/values with projections of `f_shr`. Returns
/// the projected output row and the head-averaged map row over
/// `[cached tokens ++ HR keys]`.
pub fn attention_step(
    cache: &mut LayerCache,
    x: &Matrix,
    w: &AttentionWeights,
    f_shr: Option<&Matrix>,
    ctr: &mut FlopCounter,
) -> Result<(Matrix, Vec<f64>)> {
    with_counter(ctr, |tape| {
        attention_step_on(tape, cache, x, w, f_shr, Tags(None))
    })
}

pub(crate) fn attention_step_on(
    tape: &mut GradTape,
    cache: &mut LayerCache,
    x: &Matrix,
    w: &AttentionWeights,
    f_shr: Option<&Matrix>,
    tags: Tags<'_>,
) -> Result<(Matrix, Vec<f64>)> {
    if x.rows() != 1 {
        return Err(FlexError::Shape(format!(
            "attention_step takes one token, got {} rows",
            x.rows()
        )));
    }
    if f_shr.is_some() && !w.is_hierarchical() {
        return Err(FlexError::Config(
            "selected HR tokens passed to a vanilla attention layer".into(),
        ));
    }
    let wv = w.bind(tape, false);
    let xv = tape.constant(x.clone());
    check_input(tape, xv, w.d_model())?;
    tags.set(tape, "qkv_proj");
    let q = tape.matmul(xv, wv.w_q)?;
    let k_new = tape.matmul(xv, wv.w_k)?;
    let v_new = tape.matmul(xv, wv.w_v)?;
    cache.append(tape.value(k_new), tape.value(v_new))?;
    if let (Some(f), Some(wk2), Some(wv2)) = (f_shr, wv.w_k_prime, wv.w_v_prime) {
        tags.set(tape, "hr_kv_proj");
        let fv = tape.constant(f.clone());
        let hk = tape.matmul(fv, wk2)?;
        let hv = tape.matmul(fv, wv2)?;
        cache.hr_k = Some(tape.value(hk).clone());
        cache.hr_v = Some(tape.value(hv).clone());
    } else if w.is_hierarchical() && cache.hr_k.is_none() {
        return Err(FlexError::Config(
            "hierarchical layer stepped without a selection".into(),
        ));
    }
    let mut k_all = cache.k.clone().expect("appended above");
    let mut v_all = cache.v.clone().expect("appended above");
    if let (Some(hk), Some(hv)) = (&cache.hr_k, &cache.hr_v) {
        k_all = ops::concat_rows(&k_all, hk)?;
        v_all = ops::concat_rows(&v_all, hv)?;
    }
    let kv = tape.constant(k_all);
    let vv = tape.constant(v_all);
    let (cat, map) = attend(tape, q, kv, vv, w.heads, None, tags)?;
    tags.set(tape, "out_proj");
    let out = tape.matmul(cat, wv.w_o)?;
    Ok((tape.value(out).clone(), map.row(0).to_vec()))
}

/// Decodes one token through a cross-attention sub-layer whose HR keys and
/// values were cached at prefill.
pub(crate) fn cross_step_on(
    tape: &mut GradTape,
    kv: &(Matrix, Matrix),
    x: &Matrix,
    w: &AttentionWeights,
    tags: Tags<'_>,
) -> Result<Matrix> {
    let wq = tape.constant(w.w_q.clone());
    let wo = tape.constant(w.w_o.clone());
    let xv = tape.constant(x.clone());
    tags.set(tape, "cross_q_proj");
    let q = tape.matmul(xv, wq)?;
    let k = tape.constant(kv.0.clone());
    let v = tape.constant(kv.1.clone());
    tags.set(tape, "cross_core");
    let (cat, _) = attend(tape, q, k, v, w.heads, None, Tags(None))?;
    tags.set(tape, "cross_out_proj");
    tape.matmul(cat, wo).map(|o| tape.value(o).clone())
}
