//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::time::{Duration, Instant};

use flexattn_core::cost::{full_scale_sweep, FullScale};
use flexattn_core::model::Variant;
use flexattn_core::selection::SelectionStrategy;
use flexattn_core::selftest::{
    complexity_suite, decode_consistency_suite, gradient_suite, m_zero_suite, reconcile_suite,
    second_differences, selection_oracle_suite, SuiteResult, COMPLEXITY_MS, DECODE_TOLERANCE,
    GRAD_TOLERANCE,
};
use flexattn_core::train::{self, Axis, RunConfig};

const SEED: u64 = 20240;

struct Verdict {
    passed: bool,
    detail: String,
}

fn suite_verdict(s: &SuiteResult, limit: Duration, took: Duration) -> Verdict {
    let in_time = took <= limit;
    Verdict {
        passed: s.passed() && in_time,
        detail: format!(
            "{} cases, {} failures, max error {}{}{}",
            s.cases,
            s.failures,
            s.max_error.map_or("-".into(), |e| format!("{e:.3e}")),
            s.detail
                .as_ref()
                .map_or(String::new(), |d| format!(", first failure: {d}")),
            if in_time {
                String::new()
            } else {
                format!(", over the {limit:?} limit")
            }
        ),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> SuiteResult) -> impl FnOnce() -> Verdict {
    move || {
        let t = Instant::now();
        let s = f();
        suite_verdict(&s, limit, t.elapsed())
    }
}

fn complexity() -> Verdict {
    let flex = second_differences(32, 32, &COMPLEXITY_MS, false).expect("counted run");
    let cat = second_differences(32, 32, &COMPLEXITY_MS, true).expect("counted run");
    let suite = complexity_suite();
    Verdict {
        passed: suite.passed()
            && flex.iter().all(|&d| d == 0)
            && cat[0] > 0
            && cat.iter().all(|&d| d == cat[0]),
        detail: format!(
            "second differences over M = {COMPLEXITY_MS:?}: flex {flex:?}, concat {cat:?}"
        ),
    }
}

fn reconcile() -> Verdict {
    let s = reconcile_suite(SEED);
    Verdict {
        passed: s.passed() && s.max_error == Some(0.0),
        detail: format!(
            "{} variants at N=12, M=6, N_hr=16, D=16, max deviation {:?}",
            s.cases, s.max_error
        ),
    }
}

fn selection_ratio() -> Verdict {
    let p = FullScale::default();
    // Independent arithmetic: ceil(0.1 · 24²) LR patches, each 3×3 HR patches.
    let oracle = (0.1_f64 * 576.0).ceil() as usize * 9;
    let m = p.m();
    let n_hr = p.hr_grid * p.hr_grid;
    let r = m as f64 / n_hr as f64;
    Verdict {
        passed: m == oracle && m == 522 && n_hr == 5184 && (0.095..=0.105).contains(&r),
        detail: format!("M/N_hr = {m}/{n_hr} = {r:.5}"),
    }
}

fn scale_ratio_bands() -> Verdict {
    let t = Instant::now();
    let rows = full_scale_sweep(&FullScale::default(), &[8, 16, 24], &[1]).expect("valid scale");
    let rows: Vec<_> = rows.into_iter().filter(|r| r.with_encoder).collect();
    let fc: Vec<f64> = rows.iter().map(|r| r.flex_over_cross).collect();
    let fk: Vec<f64> = rows.iter().map(|r| r.flex_over_concat).collect();
    // The band spanned by the sweep, widened by the tolerance, must contain
    // the target; ordering is checked at every point.
    let within = |v: &[f64], target: f64| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        !v.is_empty() && lo - 0.10 <= target && target <= hi + 0.10
    };
    let ordered = rows.iter().all(|r| r.ordered);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    Verdict {
        passed: within(&fc, 0.63) && within(&fk, 0.69) && ordered && t.elapsed() < Duration::from_secs(60),
        detail: format!(
            "n_sa 8/16/24: flex/cross {} (band ± 0.10 must contain 0.63), flex/concat {} (band ± 0.10 must contain 0.69), ordering {}",
            fmt(&fc),
            fmt(&fk),
            if ordered { "holds" } else { "broken" }
        ),
    }
}

fn efficacy() -> Verdict {
    let t = Instant::now();
    let acc = |rc: RunConfig| {
        train::train(&rc)
            .expect("training run")
            .metrics
            .final_accuracy
    };
    let flex = acc(train::efficacy_run(
        Variant::Flex,
        SelectionStrategy::attention_map(0.1),
    ));
    let lr_only = acc(train::efficacy_run(
        Variant::LrOnly,
        SelectionStrategy::attention_map(0.1),
    ));
    let random = acc(train::efficacy_run(
        Variant::Flex,
        SelectionStrategy::random(0, 0.1),
    ));
    let center = acc(train::efficacy_run(
        Variant::Flex,
        SelectionStrategy::center(0.1),
    ));
    let took = t.elapsed();
    let gap = flex - lr_only;
    let chance = 1.0 / 8.0;
    Verdict {
        passed: gap >= 0.30 && flex >= random && flex >= center && took <= Duration::from_secs(30 * 60),
        detail: format!(
            "flex {flex:.3}, lr_only {lr_only:.3} (chance {chance:.3}, gap {:.1} points), random {random:.3}, center {center:.3}, {:.0}s",
            gap * 100.0,
            took.as_secs_f64()
        ),
    }
}

fn determinism() -> Verdict {
    let mut rc = RunConfig::default();
    rc.model.d_model = 8;
    rc.model.ffn_inner = 16;
    rc.model.n_sa = 1;
    rc.model.n_fa = 1;
    rc.steps = 20;
    rc.batch = 2;
    rc.eval_size = 16;
    rc.eval_every = 10;
    let run = |axis| {
        serde_json::to_vec(&train::ablate(&rc, axis).expect("ablation").metrics_json()).unwrap()
    };
    let mut all = true;
    for axis in [Axis::Strategy, Axis::Ratio] {
        all &= run(axis) == run(axis);
    }
    Verdict {
        passed: all,
        detail: "strategy and ratio ablations run twice, metric sections compared byte for byte"
            .into(),
    }
}

fn main() {
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Verdict>)> = vec![
        (
            "degeneracy_equivalence",
            Box::new(timed(Duration::from_secs(60), || m_zero_suite(SEED, 1000))),
        ),
        (
            "gradient_suite",
            Box::new(timed(Duration::from_secs(300), || {
                let s = gradient_suite(SEED, 100);
                assert!(s.max_error.unwrap_or(0.0) <= GRAD_TOLERANCE || !s.passed());
                s
            })),
        ),
        ("complexity_reproduction", Box::new(complexity)),
        ("counter_reconciliation", Box::new(reconcile)),
        ("selection_ratio_arithmetic", Box::new(selection_ratio)),
        ("scale_ratio_bands", Box::new(scale_ratio_bands)),
        (
            "selection_oracle",
            Box::new(timed(Duration::from_secs(60), || {
                selection_oracle_suite(SEED, 10_000)
            })),
        ),
        (
            "decode_prefill_consistency",
            Box::new(timed(Duration::from_secs(300), || {
                let s = decode_consistency_suite(SEED, 100);
                assert!(s.max_error.unwrap_or(0.0) <= DECODE_TOLERANCE || !s.passed());
                s
            })),
        ),
        ("mechanism_efficacy", Box::new(efficacy)),
        ("ablate_determinism", Box::new(determinism)),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = check();
        println!(
            "{} {name}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
