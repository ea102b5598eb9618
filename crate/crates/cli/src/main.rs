//! `flexattn`: needle-task generation, training, ablations, cost sweeps and
//! self-tests.
//!
//! Exit codes: 0 success, 1 test or run failure, 2 configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flexattn_core::cost::{run_sweep, SweepReport};
use flexattn_core::model::Variant;
use flexattn_core::needle;
use flexattn_core::plot::{line_chart, Series};
use flexattn_core::selftest;
use flexattn_core::train::{self, AblationReport, Axis, BenchReport, RunConfig};
use flexattn_core::FlexError;

#[derive(Parser)]
#[command(name = "flexattn", version, about = "Hierarchical attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run every invariant suite and print a summary matrix.
    Selftest(Common),
    /// Evaluate the analytical cost model over a sweep.
    Cost(Common),
    /// Train on the needle task and evaluate.
    Train(Common),
    /// One training run per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// strategy, resolution or ratio.
        #[arg(long, default_value = "strategy")]
        axis: String,
    },
    /// Write a batch of needle tasks.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<FlexError> for Failure {
    fn from(e: FlexError) -> Self {
        match e {
            FlexError::Config(_) | FlexError::Json(_) | FlexError::Format(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = Result<bool, Failure>;

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut rc = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        rc.seed = s;
    }
    Ok(rc)
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Run(e.to_string()))
}

fn selftest_cmd(c: &Common) -> Outcome {
    let rc = load_config(c)?;
    let summary = selftest::run_all(rc.seed);
    print!("{summary}");
    write(&c.out, "report.json", &to_json(&summary)?)?;
    let mut csv = String::from("suite,cases,failures,max_error,passed\n");
    for s in &summary.suites {
        let err = s.max_error.map_or(String::new(), |e| format!("{e:e}"));
        let _ = writeln!(
            csv,
            "{},{},{},{err},{}",
            s.suite,
            s.cases,
            s.failures,
            s.passed()
        );
    }
    write(&c.out, "report.csv", &csv)?;
    Ok(summary.passed())
}

fn cost_plots(r: &SweepReport) -> Vec<(String, String)> {
    let series = |sweep: &str, variants: &[Variant], core: bool| -> Vec<Series> {
        variants
            .iter()
            .map(|&v| Series {
                name: v.name().to_string(),
                points: r.series(sweep, v, core),
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    let mut out = Vec::new();
    let m = series("m", &[Variant::Flex, Variant::HdConcat], true);
    if !m.is_empty() {
        out.push((
            "plots/flops_vs_m.svg".into(),
            line_chart(
                "Attention-core FLOPs per layer",
                "M (added tokens)",
                "FLOPs",
                &m,
            ),
        ));
    }
    let res = series("resolution", &Variant::ALL, false);
    if !res.is_empty() {
        out.push((
            "plots/flops_vs_resolution.svg".into(),
            line_chart("Full-run FLOPs", "HR/LR factor", "FLOPs", &res),
        ));
    }
    let ratio = series("ratio", &[Variant::Flex], false);
    if !ratio.is_empty() {
        out.push((
            "plots/flops_vs_ratio.svg".into(),
            line_chart("Full-run FLOPs", "selection ratio", "FLOPs", &ratio),
        ));
    }
    out
}

fn cost_cmd(c: &Common) -> Outcome {
    let rc = load_config(c)?;
    let sweep = rc.cost_sweep.clone().unwrap_or_default();
    let r = run_sweep(&sweep)?;
    if r.is_empty() {
        write(&c.out, "report.json", "")?;
        write(&c.out, "report.csv", "")?;
        println!("empty sweep");
        return Ok(true);
    }
    write(&c.out, "report.json", &to_json(&r)?)?;
    write(&c.out, "report.csv", &r.to_csv())?;
    for (name, svg) in cost_plots(&r) {
        write(&c.out, &name, &svg)?;
    }
    println!(
        "{} sweep points, {} full-scale rows",
        r.points.len(),
        r.full_scale.len()
    );
    for row in &r.full_scale {
        println!(
            "n_sa {:>2} out {:>3} encoder {:<5} flex {:.2} concat {:.2} cross {:.2} TFLOPs  flex/cross {:.3} flex/concat {:.3}",
            row.n_sa,
            row.output_len,
            row.with_encoder,
            row.flex_tflops,
            row.concat_tflops,
            row.cross_tflops,
            row.flex_over_cross,
            row.flex_over_concat
        );
    }
    Ok(true)
}

fn curve_csv(label: &str, r: &BenchReport, csv: &mut String) {
    for p in &r.metrics.curve {
        let _ = writeln!(
            csv,
            "{label},{},{},{},{}",
            p.step, p.train_loss, p.eval_loss, p.eval_accuracy
        );
    }
}

fn train_cmd(c: &Common) -> Outcome {
    let rc = load_config(c)?;
    let (w, r) = train::train_model(&rc)?;
    write(&c.out, "report.json", &to_json(&r)?)?;
    let mut csv = String::from("run,step,train_loss,eval_loss,eval_accuracy\n");
    curve_csv(rc.model.variant.name(), &r, &mut csv);
    write(&c.out, "report.csv", &csv)?;
    let pts = |f: fn(&train::CurvePoint) -> f64| -> Vec<(f64, f64)> {
        r.metrics
            .curve
            .iter()
            .map(|p| (p.step as f64, f(p)))
            .collect()
    };
    let loss = [
        Series {
            name: "train".into(),
            points: pts(|p| p.train_loss),
        },
        Series {
            name: "eval".into(),
            points: pts(|p| p.eval_loss),
        },
    ];
    write(
        &c.out,
        "plots/loss.svg",
        &line_chart("Loss", "step", "cross-entropy", &loss),
    )?;
    let acc = [Series {
        name: "eval".into(),
        points: pts(|p| p.eval_accuracy),
    }];
    write(
        &c.out,
        "plots/accuracy.svg",
        &line_chart("Held-out accuracy", "step", "accuracy", &acc),
    )?;
    if let Some(f) = &rc.weights_file {
        let path = c.out.join(f);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        w.save(&path)?;
    }
    println!(
        "{}: accuracy {:.3} (chance {:.3}), loss {:.4}, localization {}",
        rc.model.variant,
        r.metrics.final_accuracy,
        r.metrics.chance_accuracy,
        r.metrics.final_loss,
        r.metrics
            .localization
            .map_or("-".into(), |l| format!("{l:.3}"))
    );
    Ok(true)
}

fn ablate_cmd(c: &Common, axis: &str) -> Outcome {
    let axis: Axis = axis.parse()?;
    let rc = load_config(c)?;
    let r: AblationReport = train::ablate(&rc, axis)?;
    let doc = serde_json::json!({
        "metrics": r.metrics_json(),
        "timing": r.entries.iter().map(|e| serde_json::json!({
            "label": e.label,
            "seconds": e.report.timing.seconds,
        })).collect::<Vec<_>>(),
        "version": train::VERSION,
    });
    write(&c.out, "report.json", &to_json(&doc)?)?;
    let mut csv = String::from("run,step,train_loss,eval_loss,eval_accuracy\n");
    for e in &r.entries {
        curve_csv(&e.label, &e.report, &mut csv);
    }
    write(&c.out, "report.csv", &csv)?;
    let series: Vec<Series> = r
        .entries
        .iter()
        .map(|e| Series {
            name: e.label.clone(),
            points: e
                .report
                .metrics
                .curve
                .iter()
                .map(|p| (p.step as f64, p.eval_accuracy))
                .collect(),
        })
        .collect();
    write(
        &c.out,
        "plots/ablation_accuracy.svg",
        &line_chart("Held-out accuracy by run", "step", "accuracy", &series),
    )?;
    for e in &r.entries {
        println!(
            "{:<16} accuracy {:.3} loss {:.4} flops {}",
            e.label,
            e.report.metrics.final_accuracy,
            e.report.metrics.final_loss,
            e.report.cost.total_flops
        );
    }
    Ok(true)
}

#[derive(Serialize)]
struct GenRow {
    index: usize,
    target_cell: (usize, usize),
    glyph_class: usize,
    prompt_ids: Vec<usize>,
    label_id: usize,
    image_side: usize,
    pixels: Vec<f64>,
}

fn gen_cmd(c: &Common, count: usize) -> Outcome {
    let rc = load_config(c)?;
    let tasks = needle::gen_needle_at(rc.seed, count, rc.model.factor())?;
    let rows: Vec<GenRow> = tasks
        .into_iter()
        .enumerate()
        .map(|(index, t)| GenRow {
            index,
            target_cell: t.target_cell,
            glyph_class: t.glyph_class,
            prompt_ids: t.prompt_ids,
            label_id: t.label_id,
            image_side: t.image.side,
            pixels: t.image.pixels,
        })
        .collect();
    write(&c.out, "report.json", &to_json(&rows)?)?;
    let mut csv = String::from("index,cell_row,cell_col,glyph_class,prompt_id,label_id\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.index, r.target_cell.0, r.target_cell.1, r.glyph_class, r.prompt_ids[0], r.label_id
        );
    }
    write(&c.out, "report.csv", &csv)?;
    println!("{} tasks written to {}", rows.len(), c.out.display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Selftest(c) => selftest_cmd(c),
        Command::Cost(c) => cost_cmd(c),
        Command::Train(c) => train_cmd(c),
        Command::Ablate { common, axis } => ablate_cmd(common, axis),
        Command::Gen { common, count } => gen_cmd(common, *count),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
