//! Training and evaluation on the needle task, plus ablation sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::{full_run_flops, CostConfig, CostSweep};
use crate::error::{FlexError, Result};
use crate::model::{
    self, build_variant, forward_on, ForwardOptions, LayerSelection, ModelConfig, ModelWeights,
    Params, Variant,
};
use crate::needle::{self, NeedleTask};
use crate::selection::SelectionStrategy;
use crate::tensor::{GradTape, Matrix};

/// Salt separating the held-out task stream from the training stream.
const EVAL_SALT: u64 = 0x5eed_e7a1_0000_0001;

/// Values swept by `ablate`; empty lists use the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationAxes {
    #[serde(default)]
    pub strategies: Vec<SelectionStrategy>,
    #[serde(default)]
    pub factors: Vec<usize>,
    #[serde(default)]
    pub ratios: Vec<f64>,
}

/// Everything a run depends on. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_size: usize,
    pub eval_every: usize,
    /// Train on this glyph class only (a trivially learnable task).
    pub fixed_class: Option<usize>,
    /// Steps over which the training-time selection ratio falls linearly
    /// from 1 to the configured ratio. Evaluation always uses the
    /// configured ratio.
    pub ratio_warmup: usize,
    pub ablation: AblationAxes,
    /// Where `train` writes the trained weights, relative to the output
    /// directory.
    pub weights_file: Option<String>,
    /// Read by the `cost` command only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_sweep: Option<CostSweep>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: needle_model(Variant::Flex),
            seed: 0,
            steps: 1000,
            batch: 16,
            lr: 3e-3,
            eval_size: 256,
            eval_every: 100,
            fixed_class: None,
            ratio_warmup: 0,
            ablation: AblationAxes::default(),
            weights_file: Some("weights.bin".into()),
            cost_sweep: None,
        }
    }
}

/// Model sized for the needle task at HR/LR factor 4.
pub fn needle_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        heads: 2,
        n_sa: 2,
        n_fa: 4,
        ffn_inner: 128,
        vocab: needle::VOCAB,
        lr_image_side: needle::LR_SIDE,
        hr_image_side: needle::LR_SIDE * 4,
        patch_size: needle::PATCH,
        channels: 1,
        selection: SelectionStrategy::attention_map(0.1),
        variant,
        pre_ln: false,
        end_token: None,
    }
}

/// The pinned needle run used to compare variants and strategies.
pub fn efficacy_run(variant: Variant, selection: SelectionStrategy) -> RunConfig {
    let mut model = needle_model(variant);
    model.selection = selection;
    RunConfig {
        model,
        steps: 2000,
        batch: 16,
        ratio_warmup: 1000,
        eval_size: 256,
        ..RunConfig::default()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = &self.model;
        if m.vocab < needle::VOCAB
            || m.lr_image_side != needle::LR_SIDE
            || m.patch_size != needle::PATCH
            || m.channels != 1
        {
            return Err(FlexError::Config(format!(
                "needle runs need vocab >= {}, a {}px LR image, patch {} and one channel",
                needle::VOCAB,
                needle::LR_SIDE,
                needle::PATCH
            )));
        }
        if self.batch == 0 || self.eval_size == 0 || self.eval_every == 0 {
            return Err(FlexError::Config(
                "batch, eval_size and eval_every must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlexError::Config(format!(
                "learning rate {} is invalid",
                self.lr
            )));
        }
        if let Some(c) = self.fixed_class {
            if c >= needle::N_CLASSES {
                return Err(FlexError::Config(format!("fixed_class {c} out of range")));
            }
        }
        Ok(())
    }

    /// Selection ratio used for the training batch at `step`.
    pub fn train_ratio(&self, step: usize) -> f64 {
        let target = self.model.selection.ratio;
        if step >= self.ratio_warmup {
            return target;
        }
        let t = step as f64 / self.ratio_warmup as f64;
        1.0 + (target - 1.0) * t
    }

    fn factor(&self) -> usize {
        self.model.factor()
    }

    fn train_task(&self, step: usize, i: usize) -> NeedleTask {
        let index = (step * self.batch + i) as u64;
        let t = needle::gen_task(self.seed, index, self.factor());
        match self.fixed_class {
            Some(c) => t.with_class(c),
            None => t,
        }
    }

    pub fn eval_tasks(&self) -> Vec<NeedleTask> {
        (0..self.eval_size)
            .map(|i| {
                let t = needle::gen_task(self.seed ^ EVAL_SALT, i as u64, self.factor());
                match self.fixed_class {
                    Some(c) => t.with_class(c),
                    None => t,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous point.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub chance_accuracy: f64,
    /// Over correctly answered held-out items: mean fraction of the last
    /// hierarchical layer's selected HR patches lying in the 3×3 LR-patch
    /// neighbourhood of the target cell. Flex only.
    pub localization: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Selections recorded for one held-out item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub item: usize,
    pub target_lr_patch: usize,
    pub label: usize,
    pub predicted: usize,
    pub selections: Vec<LayerSelection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub variant: Variant,
    pub total_flops: u64,
    pub tflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RunConfig,
    pub metrics: Metrics,
    pub selection_traces: Vec<EvalTrace>,
    pub cost: CostSummary,
    pub timing: Timing,
    pub version: String,
}

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Held-out items whose selections are copied into the report.
const TRACED_ITEMS: usize = 8;

struct Adam {
    m: Params<Matrix>,
    v: Params<Matrix>,
    t: i32,
}

impl Adam {
    fn new(p: &Params<Matrix>) -> Self {
        let z = p.map(|m| Matrix::zeros(m.rows(), m.cols()));
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    fn step(&mut self, p: &mut Params<Matrix>, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((w, m), v), g) in p
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for (((w, m), v), &g) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean cross-entropy of the answer token over `tasks` and its gradient
/// with respect to every parameter (in [`Params::tensors_mut`] order).
pub fn batch_loss_and_grads(w: &ModelWeights, tasks: &[NeedleTask]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = GradTape::new();
    let p = w.params.map(|m| tape.param(m.clone()));
    let mut total = None;
    for t in tasks {
        let fw = forward_on(
            &mut tape,
            w,
            &p,
            &t.image,
            &t.prompt_ids,
            &ForwardOptions::default(),
        )?;
        let last = tape.value(fw.logits).rows() - 1;
        let l = tape.cross_entropy(fw.logits, &[(last, t.label_id)])?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| FlexError::EmptyInput("empty batch".into()))?;
    let loss = tape.div_scalar(total, tasks.len() as f64);
    let value = tape.value(loss).get(0, 0);
    let mut grads = tape.backward(loss)?;
    let vars: Vec<_> = {
        let mut pv = p;
        pv.tensors_mut().into_iter().map(|v| *v).collect()
    };
    let out = vars
        .into_iter()
        .map(|v| {
            let val = tape.value(v);
            grads
                .take(v)
                .unwrap_or_else(|| Matrix::zeros(val.rows(), val.cols()))
        })
        .collect();
    Ok((value, out))
}

#[derive(Clone, Debug)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub localization: Option<f64>,
    pub traces: Vec<EvalTrace>,
}

/// Fraction of `hr_indices` whose LR parent patch is within one patch
/// (Chebyshev) of `target`.
pub fn localization_fraction(cfg: &ModelConfig, hr_indices: &[usize], target_lr: usize) -> f64 {
    if hr_indices.is_empty() {
        return 0.0;
    }
    let f = cfg.factor();
    let (hs, ls) = (cfg.hr_grid().side, cfg.lr_grid().side);
    let (tr, tc) = ((target_lr / ls) as i64, (target_lr % ls) as i64);
    let inside = hr_indices
        .iter()
        .filter(|&&i| {
            let (r, c) = (((i / hs) / f) as i64, ((i % hs) / f) as i64);
            (r - tr).abs() <= 1 && (c - tc).abs() <= 1
        })
        .count();
    inside as f64 / hr_indices.len() as f64
}

pub fn evaluate(w: &ModelWeights, tasks: &[NeedleTask]) -> Result<EvalStats> {
    let cfg = &w.config;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut loc = Vec::new();
    let mut traces = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        let out = model::prefill(w, &t.image, &t.prompt_ids)?;
        let row = out.logits.row(out.logits.rows() - 1);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[t.label_id];
        let pred = model::argmax(row);
        if pred == t.label_id {
            correct += 1;
            if let Some(last) = out.selection_trace.last() {
                loc.push(localization_fraction(cfg, &last.hr_indices, t.lr_patch()));
            }
        }
        if i < TRACED_ITEMS {
            traces.push(EvalTrace {
                item: i,
                target_lr_patch: t.lr_patch(),
                label: t.label_id,
                predicted: pred,
                selections: out.selection_trace,
            });
        }
    }
    let n = tasks.len() as f64;
    let localization = (cfg.variant == Variant::Flex && cfg.n_fa > 0).then(|| {
        if loc.is_empty() {
            0.0
        } else {
            loc.iter().sum::<f64>() / loc.len() as f64
        }
    });
    Ok(EvalStats {
        loss: loss / n,
        accuracy: correct as f64 / n,
        localization,
        traces,
    })
}

/// Trains a fresh model and returns it with the run report.
pub fn train_model(rc: &RunConfig) -> Result<(ModelWeights, BenchReport)> {
    rc.validate()?;
    let start = Instant::now();
    let mut w = build_variant(&rc.model, rc.seed)?;
    let mut adam = Adam::new(&w.params);
    let eval = rc.eval_tasks();
    let mut curve = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 0..rc.steps {
        let tasks: Vec<NeedleTask> = (0..rc.batch).map(|i| rc.train_task(step, i)).collect();
        w.config.selection.ratio = rc.train_ratio(step);
        let res = batch_loss_and_grads(&w, &tasks);
        w.config.selection.ratio = rc.model.selection.ratio;
        let (loss, grads) = res?;
        if !loss.is_finite() {
            return Err(FlexError::Diverged {
                step,
                detail: format!("training loss is {loss}"),
            });
        }
        window.0 += loss;
        window.1 += 1;
        adam.step(&mut w.params, &grads, rc.lr);
        let done = step + 1;
        if done % rc.eval_every == 0 || done == rc.steps {
            let s = evaluate(&w, &eval)?;
            curve.push(CurvePoint {
                step: done,
                train_loss: window.0 / window.1 as f64,
                eval_loss: s.loss,
                eval_accuracy: s.accuracy,
            });
            window = (0.0, 0);
        }
    }
    let fin = evaluate(&w, &eval)?;
    let cost = full_run_flops(
        &CostConfig::for_model(&rc.model, 1, 1, None),
        rc.model.variant,
    )?;
    let report = BenchReport {
        config: rc.clone(),
        metrics: Metrics {
            final_loss: fin.loss,
            final_accuracy: fin.accuracy,
            chance_accuracy: 1.0 / needle::N_CLASSES as f64,
            localization: fin.localization,
            curve,
        },
        selection_traces: fin.traces,
        cost: CostSummary {
            variant: rc.model.variant,
            total_flops: cost.total_flops,
            tflops: cost.tflops,
        },
        timing: Timing {
            seconds: start.elapsed().as_secs_f64(),
        },
        version: VERSION.to_string(),
    };
    Ok((w, report))
}

pub fn train(rc: &RunConfig) -> Result<BenchReport> {
    train_model(rc).map(|(_, r)| r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Strategy,
    Resolution,
    Ratio,
}

impl std::str::FromStr for Axis {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(Axis::Strategy),
            "resolution" => Ok(Axis::Resolution),
            "ratio" => Ok(Axis::Ratio),
            _ => Err(FlexError::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// The run configurations an ablation executes, in report order.
pub fn ablation_runs(rc: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    rc.validate()?;
    let ratio = rc.model.selection.ratio;
    let mut out = Vec::new();
    match axis {
        Axis::Strategy => {
            let strategies = if rc.ablation.strategies.is_empty() {
                vec![
                    SelectionStrategy::random(rc.seed, ratio),
                    SelectionStrategy::center(ratio),
                    SelectionStrategy::attention_map(ratio),
                ]
            } else {
                rc.ablation.strategies.clone()
            };
            for s in strategies {
                let mut r = rc.clone();
                r.model.selection = s;
                out.push((s.name().to_string(), r));
            }
        }
        Axis::Resolution => {
            let factors = if rc.ablation.factors.is_empty() {
                vec![2, 3, 4]
            } else {
                rc.ablation.factors.clone()
            };
            for f in factors {
                let mut r = rc.clone();
                r.model.hr_image_side = r.model.lr_image_side * f;
                out.push((format!("factor_{f}"), r));
            }
        }
        Axis::Ratio => {
            let ratios = if rc.ablation.ratios.is_empty() {
                vec![0.05, 0.1, 0.2]
            } else {
                rc.ablation.ratios.clone()
            };
            for q in ratios {
                let mut r = rc.clone();
                r.model.selection.ratio = q;
                out.push((format!("ratio_{q}"), r));
            }
        }
    }
    for (_, r) in &out {
        r.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub report: BenchReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub base: RunConfig,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    /// The reproducible part of the report: labels, configs and metrics,
    /// without timing.
    pub fn metrics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "axis": self.axis,
            "entries": self.entries.iter().map(|e| serde_json::json!({
                "label": e.label,
                "config": e.report.config,
                "metrics": e.report.metrics,
                "cost": e.report.cost,
            })).collect::<Vec<_>>(),
        })
    }
}

/// One training run per axis value, in order.
pub fn ablate(rc: &RunConfig, axis: Axis) -> Result<AblationReport> {
    let mut entries = Vec::new();
    for (label, r) in ablation_runs(rc, axis)? {
        entries.push(AblationEntry {
            label,
            report: train(&r)?,
        });
    }
    Ok(AblationReport {
        axis,
        base: rc.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(variant: Variant) -> RunConfig {
        let mut model = needle_model(variant);
        model.d_model = 16;
        model.ffn_inner = 32;
        model.n_sa = 1;
        model.n_fa = 1;
        RunConfig {
            model,
            steps: 4,
            batch: 2,
            eval_size: 4,
            eval_every: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut rc = quick(Variant::Flex);
        rc.lr = 0.0;
        rc.fixed_class = Some(3);
        let r = train(&rc).unwrap();
        let l: Vec<f64> = r.metrics.curve.iter().map(|c| c.eval_loss).collect();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0], l[1]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rc = quick(Variant::Flex);
        let w = build_variant(&rc.model, 2).unwrap();
        let tasks: Vec<NeedleTask> = (0..2).map(|i| rc.train_task(0, i)).collect();
        let (_, grads) = batch_loss_and_grads(&w, &tasks).unwrap();
        let head = grads.last().unwrap();
        let loss = |h: &Matrix| {
            let mut w2 = w.clone();
            w2.params.head = h.clone();
            batch_loss_and_grads(&w2, &tasks).unwrap().0
        };
        let num = crate::tensor::gradcheck::central_difference(
            &w.params.head,
            crate::tensor::gradcheck::FD_STEP,
            loss,
        );
        assert!(crate::tensor::gradcheck::max_relative_error(head, &num) < 1e-5);
    }

    #[test]
    fn training_is_deterministic() {
        let rc = quick(Variant::Flex);
        let a = train(&rc).unwrap();
        let b = train(&rc).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.selection_traces, b.selection_traces);
    }

    #[test]
    fn ablation_runs_differ_only_on_axis() {
        let rc = quick(Variant::Flex);
        let runs = ablation_runs(&rc, Axis::Strategy).unwrap();
        assert_eq!(runs.len(), 3);
        for (_, r) in &runs {
            let mut a = r.clone();
            a.model.selection = rc.model.selection;
            assert_eq!(a, rc);
        }
        let res = ablation_runs(&rc, Axis::Resolution).unwrap();
        let sides: Vec<usize> = res.iter().map(|(_, r)| r.model.hr_image_side).collect();
        assert_eq!(sides, vec![32, 48, 64]);
    }

    #[test]
    fn localization_counts_neighbourhood() {
        let cfg = needle_model(Variant::Flex);
        // LR patch 5 = (1,1); HR patches of LR (0,0) and (3,3).
        assert_eq!(localization_fraction(&cfg, &[0, 1], 5), 1.0);
        assert_eq!(localization_fraction(&cfg, &[0, 255], 5), 0.5);
    }
}
