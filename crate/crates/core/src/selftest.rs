//! Invariant suites shared by the `selftest` command and the acceptance
//! tests. Every suite is seeded, so a summary is a pure function of its
//! inputs.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    hierarchical_attention_on, hierarchical_self_attention, self_attention, self_attention_on,
    AttentionMap, AttentionWeights, Tags,
};
use crate::cost::{self, CostConfig, CostEncoder};
use crate::error::Result;
use crate::model::{
    self, build_variant, ForwardOptions, Image, ModelConfig, SelectionOverride, Variant,
};
use crate::selection::{top_k, SelectionStrategy};
use crate::tensor::gradcheck::{central_difference, max_relative_error, FD_STEP};
use crate::tensor::{FlopCounter, Flops, GradTape, Matrix, Var};

/// Largest relative error accepted by the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Largest absolute logit difference accepted between decode and prefill.
pub const DECODE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    /// Worst observed deviation, where the suite has one.
    pub max_error: Option<f64>,
    /// First failing case.
    pub detail: Option<String>,
}

impl SuiteResult {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            cases: 0,
            failures: 0,
            max_error: None,
            detail: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.detail.is_none() {
                self.detail = Some(detail());
            }
        }
    }

    fn error(&mut self, e: f64) {
        self.max_error = Some(self.max_error.map_or(e, |m| m.max(e)));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suites: Vec<SuiteResult>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>6} {:>6} {:>12}  status",
            "suite", "cases", "fail", "max_error"
        )?;
        for s in &self.suites {
            let err = s.max_error.map_or("-".to_string(), |e| format!("{e:.3e}"));
            let status = if s.passed() { "PASS" } else { "FAIL" };
            write!(
                f,
                "{:<22} {:>6} {:>6} {:>12}  {status}",
                s.suite, s.cases, s.failures, err
            )?;
            if let Some(d) = &s.detail {
                write!(f, "  ({d})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Deliberate faults, used to show that a suite can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Truncate the full map one column short.
    TruncationOffByOne,
}

/// Runs every suite with the default seed.
pub fn run_all(seed: u64) -> Summary {
    run_all_with(seed, Fault::None)
}

pub fn run_all_with(seed: u64, fault: Fault) -> Summary {
    let suites = vec![
        gradient_suite(seed, 100),
        m_zero_suite(seed, 1000),
        selection_oracle_suite(seed, 10_000),
        truncation_suite(seed, 200, fault),
        complexity_suite(),
        reconcile_suite(seed),
        decode_consistency_suite(seed, 100),
    ];
    Summary { suites }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, a: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Random attention weights; `hierarchical` adds independent primed
/// projections.
pub fn random_weights(
    rng: &mut impl Rng,
    d: usize,
    heads: usize,
    hierarchical: bool,
) -> AttentionWeights {
    let a = 1.0 / (d as f64).sqrt();
    let mut m = || uniform(rng, d, d, a);
    let w = AttentionWeights::new(m(), m(), m(), m(), heads).expect("square weights");
    if hierarchical {
        let (k, v) = (m(), m());
        w.with_primes(k, v).expect("square weights")
    } else {
        w
    }
}

type Builder<'a> = dyn Fn(&mut GradTape, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of the scalar built by `f` against central
/// differences, for every input. Returns the worst relative error.
fn check_gradients(inputs: &[Matrix], f: &Builder<'_>) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let mut worst = 0.0_f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .take(vars[i])
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let eval = |probe: &Matrix| -> f64 {
            let mut t = GradTape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, m)| t.constant(if j == i { probe.clone() } else { m.clone() }))
                .collect();
            let l = f(&mut t, &vs).expect("forward succeeded once");
            t.value(l).get(0, 0)
        };
        let numeric = central_difference(x, FD_STEP, eval);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Cross-entropy against fixed random targets turns any output into a
/// scalar with a non-trivial gradient.
fn scalar_loss(tape: &mut GradTape, out: Var, targets: &[(usize, usize)]) -> Result<Var> {
    tape.cross_entropy(out, targets)
}

fn targets(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).map(|r| (r, rng.gen_range(0..cols))).collect()
}

/// Analytic against finite-difference gradients over `instances` random
/// problems, cycling through self-attention, hierarchical attention with a
/// fixed selection, layer norm, the feed-forward block and a full two-layer
/// model of every variant.
pub fn gradient_suite(seed: u64, instances: usize) -> SuiteResult {
    let mut res = SuiteResult::new("gradient");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for i in 0..instances {
        let kind = i % 5;
        let outcome = match kind {
            0 | 1 => {
                let heads = [1, 2][rng.gen_range(0..2)];
                let d = heads * rng.gen_range(1..=4);
                let n = rng.gen_range(1..=5);
                let m = if kind == 1 { rng.gen_range(0..=4) } else { 0 };
                let causal = rng.gen_bool(0.5);
                let w = random_weights(&mut rng, d, heads, kind == 1);
                let mut inputs = vec![uniform(&mut rng, n, d, 1.0)];
                if kind == 1 {
                    inputs.push(uniform(&mut rng, m, d, 1.0));
                }
                let wm: Vec<Matrix> = w.tensors().into_iter().map(|(_, t)| t.clone()).collect();
                inputs.extend(wm);
                let tg = targets(&mut rng, n, d);
                check_gradients(&inputs, &|tape, v| {
                    let base = if kind == 1 { 2 } else { 1 };
                    let mut aw = AttentionWeights {
                        w_q: v[base],
                        w_k: v[base + 1],
                        w_v: v[base + 2],
                        w_o: v[base + 3],
                        w_k_prime: None,
                        w_v_prime: None,
                        heads,
                    };
                    let out = if kind == 1 {
                        aw.w_k_prime = Some(v[base + 4]);
                        aw.w_v_prime = Some(v[base + 5]);
                        hierarchical_attention_on(tape, v[0], v[1], &aw, causal, Tags(None))?.0
                    } else {
                        self_attention_on(tape, v[0], &aw, causal, Tags(None))?.0
                    };
                    scalar_loss(tape, out, &tg)
                })
                .map(|e| {
                    (
                        e,
                        format!(
                            "{} n={n} d={d} m={m}",
                            ["self_attention", "hierarchical"][kind]
                        ),
                    )
                })
            }
            2 => {
                let (n, d) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
                let inputs = vec![
                    uniform(&mut rng, n, d, 2.0),
                    uniform(&mut rng, 1, d, 1.5),
                    uniform(&mut rng, 1, d, 0.5),
                ];
                let tg = targets(&mut rng, n, d);
                check_gradients(&inputs, &|tape, v| {
                    let y = tape.layer_norm(v[0], v[1], v[2])?;
                    scalar_loss(tape, y, &tg)
                })
                .map(|e| (e, format!("layer_norm n={n} d={d}")))
            }
            3 => {
                let (n, d, inner) = (
                    rng.gen_range(1..=4),
                    rng.gen_range(1..=5),
                    rng.gen_range(2..=8),
                );
                let inputs = vec![
                    uniform(&mut rng, n, d, 1.0),
                    uniform(&mut rng, d, inner, 1.0),
                    uniform(&mut rng, 1, inner, 0.5),
                    uniform(&mut rng, inner, d, 1.0),
                    uniform(&mut rng, 1, d, 0.5),
                ];
                let tg = targets(&mut rng, n, d);
                check_gradients(&inputs, &|tape, v| {
                    let h = tape.matmul(v[0], v[1])?;
                    let h = tape.add_row(h, v[2])?;
                    let h = tape.gelu(h);
                    let o = tape.matmul(h, v[3])?;
                    let o = tape.add_row(o, v[4])?;
                    scalar_loss(tape, o, &tg)
                })
                .map(|e| (e, format!("ffn n={n} d={d} inner={inner}")))
            }
            _ => model_gradient_instance(&mut rng, i / 5),
        };
        match outcome {
            Ok((e, what)) => {
                res.error(e);
                res.record(e <= GRAD_TOLERANCE, || format!("{what}: {e:.3e}"));
            }
            Err(e) => res.record(false, || e.to_string()),
        }
    }
    res
}

fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        heads: 2,
        n_sa: 1,
        n_fa: 1,
        ffn_inner: 8,
        vocab: 5,
        lr_image_side: 4,
        hr_image_side: 8,
        patch_size: 2,
        channels: 1,
        selection: SelectionStrategy::attention_map(0.5),
        variant,
        pre_ln: false,
        end_token: None,
    }
}

fn random_image(rng: &mut impl Rng, side: usize) -> Image {
    Image::new(side, 1, (0..side * side).map(|_| rng.gen()).collect()).expect("sized")
}

/// Full two-layer model, every parameter checked.
fn model_gradient_instance(rng: &mut ChaCha8Rng, k: usize) -> Result<(f64, String)> {
    let variant = Variant::ALL[k % 4];
    let mut cfg = tiny_model(variant);
    cfg.pre_ln = (k / 4) % 2 == 1;
    let w = build_variant(&cfg, rng.gen())?;
    let img = random_image(rng, cfg.hr_image_side);
    let text: Vec<usize> = (0..rng.gen_range(1..=3))
        .map(|_| rng.gen_range(0..cfg.vocab))
        .collect();
    let label = rng.gen_range(0..cfg.vocab);
    let n_hr = cfg.n_hr();
    let fixed: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n_hr)).collect();
    let opts = ForwardOptions {
        selection: SelectionOverride::Fixed(fixed),
        ..Default::default()
    };
    let (_, grads) = model::loss_and_grads(&w, &img, &text, label, &opts)?;
    let analytic: Vec<Matrix> = grads.named().into_iter().map(|(_, m)| m.clone()).collect();
    let mut worst = 0.0_f64;
    let mut probe = w.clone();
    for (idx, a) in analytic.iter().enumerate() {
        let x = w.params.named()[idx].1.clone();
        let numeric = central_difference(&x, FD_STEP, |m| {
            *probe.params.tensors_mut()[idx] = m.clone();
            model::loss(&probe, &img, &text, label, &opts).expect("forward succeeded once")
        });
        *probe.params.tensors_mut()[idx] = x;
        worst = worst.max(max_relative_error(a, &numeric));
    }
    Ok((worst, format!("model {variant} pre_ln={}", cfg.pre_ln)))
}

/// Hierarchical attention with no selected tokens against vanilla
/// self-attention: outputs and maps must agree bit for bit.
pub fn m_zero_suite(seed: u64, configs: usize) -> SuiteResult {
    let mut res = SuiteResult::new("m_zero_equivalence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for _ in 0..configs {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=32 / heads);
        let n = rng.gen_range(1..=16);
        let causal = rng.gen_bool(0.5);
        let w = random_weights(&mut rng, d, heads, true);
        let h = uniform(&mut rng, n, d, 1.0);
        let mut c1 = FlopCounter::new();
        let mut c2 = FlopCounter::new();
        let plain = {
            let mut base = w.clone();
            base.w_k_prime = None;
            base.w_v_prime = None;
            self_attention(&h, &base, causal, &mut c1)
        };
        let hier = hierarchical_self_attention(&h, &Matrix::zeros(0, d), &w, causal, &mut c2);
        let ok = match (plain, hier) {
            (Ok((o, map)), Ok(hout)) => {
                o.bit_eq(&hout.out)
                    && map.values.bit_eq(&hout.map_full.values)
                    && map.values.bit_eq(&hout.map_trunc.values)
            }
            _ => false,
        };
        res.record(ok, || format!("n={n} d={d} heads={heads} causal={causal}"));
    }
    res
}

/// Independent oracle for [`top_k`]: full stable sort by descending value,
/// first `k` kept, returned in ascending index order.
pub fn top_k_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite"));
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

pub fn selection_oracle_suite(seed: u64, vectors: usize) -> SuiteResult {
    let mut res = SuiteResult::new("selection_oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    for _ in 0..vectors {
        let n = rng.gen_range(1..=64);
        // Few distinct levels force ties.
        let levels = rng.gen_range(1..=n.min(6) + 1);
        let v: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let k = rng.gen_range(0..=n);
        let got = top_k(&v, k);
        let want = top_k_oracle(&v, k);
        res.record(got == want, || format!("n={n} k={k}: {got:?} != {want:?}"));
    }
    res
}

fn truncate_with(map: &AttentionMap, n: usize, fault: Fault) -> AttentionMap {
    match fault {
        Fault::None => map.truncate(n),
        Fault::TruncationOffByOne => map.truncate(n - 1),
    }
}

/// The leading `N×N` block of the full hierarchical map is copied without
/// renormalisation; full rows sum to one and truncated rows to at most one.
pub fn truncation_suite(seed: u64, configs: usize, fault: Fault) -> SuiteResult {
    let mut res = SuiteResult::new("truncation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    for _ in 0..configs {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=4);
        let n = rng.gen_range(2..=12);
        let m = rng.gen_range(0..=12);
        let causal = rng.gen_bool(0.5);
        let w = random_weights(&mut rng, d, heads, true);
        let h = uniform(&mut rng, n, d, 1.0);
        let s = uniform(&mut rng, m, d, 1.0);
        let out = match hierarchical_self_attention(&h, &s, &w, causal, &mut FlopCounter::new()) {
            Ok(o) => o,
            Err(e) => {
                res.record(false, || e.to_string());
                continue;
            }
        };
        let full = &out.map_full.values;
        let trunc = truncate_with(&out.map_full, n, fault).values;
        let mut worst = 0.0_f64;
        for r in out.map_full.row_sums() {
            worst = worst.max((r - 1.0).abs());
        }
        res.error(worst);
        let shape_ok = trunc.shape() == (n, n) && full.shape() == (n, n + m);
        let copied = shape_ok
            && (0..n)
                .all(|i| (0..n).all(|j| trunc.get(i, j).to_bits() == full.get(i, j).to_bits()));
        let sums_ok = shape_ok && (0..n).all(|i| trunc.row(i).iter().sum::<f64>() <= 1.0 + 1e-12);
        res.record(worst <= 1e-9 && copied && sums_ok, || {
            format!("n={n} m={m}: shape {:?}", trunc.shape())
        });
    }
    res
}

/// Counted attention-core FLOPs (scores, softmax, weighted sum) for one
/// attention call over `n` queries and `m` extra keys.
pub fn counted_core(n: usize, d: usize, m: usize, concat: bool) -> Result<Flops> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let heads = 1;
    let mut tape = GradTape::new();
    let tags = Tags(Some("c."));
    if concat {
        let w = random_weights(&mut rng, d, heads, false).bind(&mut tape, false);
        let h = tape.constant(uniform(&mut rng, n + m, d, 1.0));
        self_attention_on(&mut tape, h, &w, true, tags)?;
    } else {
        let w = random_weights(&mut rng, d, heads, true).bind(&mut tape, false);
        let h = tape.constant(uniform(&mut rng, n, d, 1.0));
        let s = tape.constant(uniform(&mut rng, m, d, 1.0));
        hierarchical_attention_on(&mut tape, h, s, &w, true, tags)?;
    }
    let mut core = Flops::default();
    for (t, f) in tape.counter().breakdown() {
        if ["c.scores", "c.softmax", "c.weighted_sum"].contains(&t.as_str()) {
            core += *f;
        }
    }
    Ok(core)
}

/// Second differences of counted core FLOPs over `m`: identically zero for
/// hierarchical attention, constant and positive for the concat baseline.
pub fn second_differences(n: usize, d: usize, ms: &[usize], concat: bool) -> Result<Vec<i128>> {
    let totals: Vec<i128> = ms
        .iter()
        .map(|&m| counted_core(n, d, m, concat).map(|f| f.total() as i128))
        .collect::<Result<_>>()?;
    Ok(totals.windows(3).map(|w| w[2] - 2 * w[1] + w[0]).collect())
}

pub const COMPLEXITY_MS: [usize; 5] = [0, 8, 16, 24, 32];

pub fn complexity_suite() -> SuiteResult {
    let mut res = SuiteResult::new("complexity");
    match (
        second_differences(32, 32, &COMPLEXITY_MS, false),
        second_differences(32, 32, &COMPLEXITY_MS, true),
    ) {
        (Ok(flex), Ok(cat)) => {
            res.record(flex.iter().all(|&x| x == 0), || format!("flex {flex:?}"));
            res.record(cat[0] > 0 && cat.iter().all(|&x| x == cat[0]), || {
                format!("concat {cat:?}")
            });
        }
        (Err(e), _) | (_, Err(e)) => res.record(false, || e.to_string()),
    }
    res
}

/// `N = 12` (4 image and 8 text tokens), `M = 6`, `N_hr = 16`, `D = 16`.
pub fn reconcile_config(variant: Variant) -> CostConfig {
    CostConfig {
        n_image: 4,
        n_text: 8,
        m: if variant == Variant::Flex { 6 } else { 0 },
        n_hr: 16,
        d_model: 16,
        heads: 2,
        ffn_inner: 64,
        n_sa: 1,
        n_fa: 1,
        vocab: 10,
        encoder: CostEncoder::Linear { patch_dim: 4 },
        output_len: 2,
        pre_ln: false,
    }
}

pub fn reconcile_suite(seed: u64) -> SuiteResult {
    let mut res = SuiteResult::new("reconcile");
    for v in Variant::ALL {
        match cost::reconcile(&reconcile_config(v), v, seed) {
            Ok(r) => {
                let rec = r.reconciliation.expect("reconcile fills this");
                res.error(rec.max_deviation as f64);
                res.record(rec.passed, || format!("{v}: {:?}", rec.first_divergence));
            }
            Err(e) => res.record(false, || format!("{v}: {e}")),
        }
    }
    res
}

/// Greedy decoding against teacher-forced prefill of the generated
/// sequence, for random prompts of length 1 to 16 and three decode steps,
/// cycling through the variants.
pub fn decode_consistency_suite(seed: u64, prompts: usize) -> SuiteResult {
    let mut res = SuiteResult::new("decode_consistency");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let steps = 3;
    for i in 0..prompts {
        let variant = Variant::ALL[i % 4];
        let mut cfg = tiny_model(variant);
        cfg.d_model = 8;
        cfg.vocab = 13;
        cfg.ffn_inner = 16;
        cfg.n_fa = 2;
        let w = match build_variant(&cfg, rng.gen()) {
            Ok(w) => w,
            Err(e) => {
                res.record(false, || e.to_string());
                continue;
            }
        };
        let img = random_image(&mut rng, cfg.hr_image_side);
        let len = rng.gen_range(1..=16);
        let prompt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let outcome = (|| -> Result<f64> {
            let g = model::generate(&w, &img, &prompt, steps)?;
            let mut ids = prompt.clone();
            ids.extend(&g.tokens[..g.tokens.len() - 1]);
            let opts = ForwardOptions {
                prompt_len: Some(prompt.len()),
                ..Default::default()
            };
            let tf = model::prefill_with(&w, &img, &ids, &opts)?;
            let base = tf.logits.rows() - g.step_logits.len();
            let mut worst = 0.0_f64;
            for (s, row) in g.step_logits.iter().enumerate() {
                for (a, b) in row.iter().zip(tf.logits.row(base + s)) {
                    worst = worst.max((a - b).abs());
                }
            }
            Ok(worst)
        })();
        match outcome {
            Ok(e) => {
                res.error(e);
                res.record(e <= DECODE_TOLERANCE, || {
                    format!("{variant} prompt len {len}: {e:.3e}")
                });
            }
            Err(e) => res.record(false, || format!("{variant}: {e}")),
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_breaks_ties_toward_lower_indices() {
        assert_eq!(top_k_oracle(&[0.5, 0.9, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_oracle(&[1.0, 1.0], 0), Vec::<usize>::new());
    }

    #[test]
    fn injected_truncation_fault_is_caught() {
        assert!(truncation_suite(1, 20, Fault::None).passed());
        let bad = truncation_suite(1, 20, Fault::TruncationOffByOne);
        assert!(!bad.passed());
        assert_eq!(bad.failures, 20);
    }

    #[test]
    fn small_suites_pass_and_repeat() {
        let a = gradient_suite(3, 10);
        assert!(a.passed(), "{a:?}");
        assert_eq!(a, gradient_suite(3, 10));
        assert!(m_zero_suite(3, 50).passed());
        assert!(selection_oracle_suite(3, 500).passed());
        assert!(complexity_suite().passed());
        assert!(decode_consistency_suite(3, 8).passed());
    }
}
