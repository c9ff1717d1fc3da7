//! The four subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use advreg::analysis::{delta_table, run_sweep, score_by_type, weighted_score, DeltaRow, SweepPoint, SweepReport, SweepRow, TypeScore};
use advreg::dataset::{default_spec, generate, write_jsonl, AnswerType, ChangingPriorsSpec, PriorKind};
use advreg::schedule::{scaled_grid, static_schedule, ScheduleParams};
use advreg::trainer::{check_compatible, train, RunLog, RunStatus, TrainOutput};
use serde::{Deserialize, Serialize};

use crate::args::{Command, GenerateArgs, GridKind, ReportArgs, SweepArgs, TrainArgs};
use crate::config::{read_spec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::fsio::OutputDir;
use crate::plot::{downsample, render_heatmaps, HeatmapPanel, LineChart, Series};

pub const DATASET_FILES: [&str; 4] = ["train.jsonl", "val.jsonl", "test.jsonl", "spec.json"];
pub const TRAIN_FILES: [&str; 8] = [
    "checkpoint.json",
    "runlog.csv",
    "eval.csv",
    "types.csv",
    "spec.json",
    "losses.svg",
    "grad_norms.svg",
    "scores.svg",
];
pub const SWEEP_FILES: [&str; 3] = ["sweep.csv", "sweep_heatmap.svg", "sweep_lines.svg"];
pub const REPORT_FILES: [&str; 2] = ["report.csv", "delta.csv"];

/// Step-log points kept per plotted series.
const PLOT_POINTS: usize = 500;

pub fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn spec_json(spec: &ChangingPriorsSpec) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(spec).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn fmt_prior(candidates: &[String], prior: &[f64]) -> String {
    candidates.iter().zip(prior).map(|(c, p)| format!("{c}:{p:.2}")).collect::<Vec<_>>().join(" ")
}

/// Per-type candidate priors, one line per question type.
pub fn prior_table(spec: &ChangingPriorsSpec) -> String {
    let width = spec.question_types.iter().map(|q| q.name().len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:>3}  {:<6}  {:<width$}  train prior | test prior", "id", "type", "question");
    for (k, q) in spec.question_types.iter().enumerate() {
        let _ = writeln!(
            out,
            "{k:>3}  {:<6}  {:<width$}  {} | {}",
            q.answer_type.label(),
            q.name(),
            fmt_prior(&q.candidates, spec.prior(k, PriorKind::Train)),
            fmt_prior(&q.candidates, spec.prior(k, PriorKind::Test)),
        );
    }
    out
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let mut spec = match (&a.spec, a.version) {
        (Some(path), _) => read_spec(path)?,
        (None, Some(v)) => default_spec(v)?,
        (None, None) => return Err(CliError::Usage("pass a spec file or --version".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    if a.dry_run {
        OutputDir::check(&a.out, &DATASET_FILES, a.overwrite)?;
        print!("{}", prior_table(&spec));
        return Ok(());
    }
    let out = OutputDir::prepare(&a.out, &DATASET_FILES, a.overwrite)?;
    let bundle = generate(&spec)?;
    for (name, examples) in [("train.jsonl", &bundle.train), ("val.jsonl", &bundle.val), ("test.jsonl", &bundle.test)] {
        let mut buf = Vec::new();
        write_jsonl(examples, &mut buf)?;
        out.write(name, &buf)?;
    }
    out.write("spec.json", &spec_json(&spec)?)?;
    print!("{}", prior_table(&spec));
    println!(
        "wrote {} train, {} val, {} test examples to {}",
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len(),
        a.out.display()
    );
    Ok(())
}

/// One row of `types.csv`.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TypeRecord {
    question_type_id: usize,
    question_type: String,
    answer_type: String,
    n: usize,
    score: f64,
}

fn parse_answer_type(label: &str) -> Option<AnswerType> {
    AnswerType::ALL.into_iter().find(|a| a.label() == label)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(format!("csv: {e}"))
}

fn types_csv(scores: &[TypeScore], spec: &ChangingPriorsSpec) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(TypeRecord {
            question_type_id: s.question_type_id,
            question_type: spec.question_types[s.question_type_id].name(),
            answer_type: s.answer_type.label().to_string(),
            n: s.n_examples,
            score: s.score,
        })
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn read_types(path: &Path) -> CliResult<Vec<TypeScore>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize::<TypeRecord>()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let answer_type = parse_answer_type(&rec.answer_type)
                .ok_or_else(|| CliError::Io(format!("{}: unknown answer type {:?}", path.display(), rec.answer_type)))?;
            Ok(TypeScore { question_type_id: rec.question_type_id, answer_type, n_examples: rec.n, score: rec.score })
        })
        .collect()
}

fn step_series(log: &RunLog, name: &str, f: impl Fn(&advreg::trainer::StepRow) -> f64) -> Series {
    let pts: Vec<(f64, f64)> = log.steps.iter().map(|r| (r.t as f64, f(r))).collect();
    Series::new(name, downsample(&pts, PLOT_POINTS))
}

fn eval_series(log: &RunLog, split: &str, name: &str, f: impl Fn(&advreg::trainer::SplitScores) -> Option<f64>) -> Option<Series> {
    let pts: Vec<(f64, f64)> = log.split_rows(split).filter_map(|r| f(&r.scores).map(|v| (r.t as f64, v))).collect();
    (!pts.is_empty()).then(|| Series::new(name, pts))
}

pub fn losses_chart(log: &RunLog) -> String {
    LineChart::new("training losses", "iteration", "loss")
        .with(step_series(log, "l_vqa", |r| r.l_vqa))
        .with(step_series(log, "l_adv", |r| r.l_adv))
        .with(step_series(log, "l_total", |r| r.l_total))
        .render()
}

pub fn grad_norms_chart(log: &RunLog) -> String {
    LineChart::new("gradient norms", "iteration", "L2 norm")
        .with(step_series(log, "theta_q from vqa", |r| r.gn_q_vqa))
        .with(step_series(log, "theta_q from adv", |r| r.gn_q_adv))
        .with(step_series(log, "theta_adv", |r| r.gn_adv))
        .render()
}

pub fn scores_chart(log: &RunLog) -> String {
    let mut chart = LineChart::new("split scores", "iteration", "score");
    let series = [
        eval_series(log, "val", "val overall", |s| Some(s.overall)),
        eval_series(log, "test", "test overall", |s| Some(s.overall)),
        eval_series(log, "test", "test yes/no", |s| s.yesno),
        eval_series(log, "test", "test number", |s| s.number),
        eval_series(log, "test", "test other", |s| s.other),
    ];
    for s in series.into_iter().flatten() {
        chart = chart.with(s);
    }
    chart.render()
}

fn write_logs(out: &OutputDir, log: &RunLog) -> CliResult<()> {
    let mut runlog = Vec::new();
    log.write_runlog_csv(&mut runlog)?;
    out.write("runlog.csv", &runlog)?;
    let mut eval = Vec::new();
    log.write_eval_csv(&mut eval)?;
    out.write("eval.csv", &eval)?;
    out.write("losses.svg", losses_chart(log).as_bytes())?;
    out.write("grad_norms.svg", grad_norms_chart(log).as_bytes())?;
    out.write("scores.svg", scores_chart(log).as_bytes())
}

fn write_run(out: &OutputDir, result: &TrainOutput, cfg: &RunConfig, test: &[advreg::dataset::Example]) -> CliResult<()> {
    write_logs(out, &result.log)?;
    let mut ckpt = Vec::new();
    result.params.save_checkpoint(&mut ckpt)?;
    out.write("checkpoint.json", &ckpt)?;
    let scores = score_by_type(&result.params, test, &cfg.spec)?;
    out.write("types.csv", &types_csv(&scores, &cfg.spec)?)?;
    out.write("spec.json", &spec_json(&cfg.spec)?)
}

fn output_dir(flag: &Option<std::path::PathBuf>, cfg: &RunConfig) -> CliResult<std::path::PathBuf> {
    flag.clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: set \"out\" in the config or pass --out".into()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config, a.seed)?;
    let dir = output_dir(&a.out, &cfg)?;
    if a.dry_run {
        OutputDir::check(&dir, &TRAIN_FILES, a.overwrite)?;
        println!("config ok: {} iterations, lambda_adv {}, schedule {:?}", cfg.train.max_iterations, cfg.train.lambda_adv, cfg.train.schedule);
        return Ok(());
    }
    let bundle = cfg.dataset.load()?;
    check_compatible(&cfg.model, &bundle)?;
    let out = OutputDir::prepare(&dir, &TRAIN_FILES, a.overwrite)?;
    let result = train(&cfg.train, &cfg.model, &bundle)?;
    if let RunStatus::Diverged { iteration, reason } = &result.log.status {
        write_logs(&out, &result.log)?;
        for stale in ["checkpoint.json", "types.csv", "spec.json"] {
            let p = out.path(stale);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            }
        }
        return Err(CliError::Diverged(format!("training diverged at iteration {iteration}: {reason}; logs in {}", dir.display())));
    }
    write_run(&out, &result, &cfg, &bundle.test)?;
    let (best_iter, best_val) = result.best.map_or((None, None), |(t, v)| (Some(t), Some(v)));
    let test = best_iter.and_then(|t| result.log.eval_at("test", t)).map(|r| r.scores);
    println!(
        "{}: best_iter {} val {} test {} (yesno {} number {} other {})",
        result.log.status.label(),
        best_iter.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
        fmt_opt(best_val),
        fmt_opt(test.map(|s| s.overall)),
        fmt_opt(test.and_then(|s| s.yesno)),
        fmt_opt(test.and_then(|s| s.number)),
        fmt_opt(test.and_then(|s| s.other)),
    );
    Ok(())
}

/// Grid points in lambda_adv-major order.
pub fn sweep_points(a: &SweepArgs, cfg: &RunConfig) -> CliResult<Vec<SweepPoint>> {
    let lambda_advs = if a.lambda_adv.is_empty() { vec![cfg.train.lambda_adv] } else { a.lambda_adv.clone() };
    let cs = if a.lambda_grl.is_empty() { vec![cfg.train.schedule.c] } else { a.lambda_grl.clone() };
    let schedules: Vec<ScheduleParams> = match a.schedule_grid {
        Some(kind) => cs
            .iter()
            .flat_map(|&c| scaled_grid(kind == GridKind::Standard, cfg.train.max_iterations, c))
            .collect(),
        None if a.lambda_grl.is_empty() => vec![cfg.train.schedule],
        None => cs.iter().map(|&c| static_schedule(c)).collect(),
    };
    for &l in &lambda_advs {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(CliError::Usage(format!("lambda_adv must be finite and >= 0, got {l}")));
        }
    }
    for s in &schedules {
        s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(lambda_advs
        .iter()
        .flat_map(|&lambda_adv| schedules.iter().map(move |&schedule| SweepPoint { lambda_adv, schedule }))
        .collect())
}

fn distinct(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Heatmap of test overall: lambda_adv by lambda_grl for static grids,
/// one delay-by-warmup panel per (lambda_adv, c) for schedule grids.
pub fn sweep_heatmap(report: &SweepReport, schedule_grid: bool) -> String {
    let rows = &report.rows;
    let cell = |pred: &dyn Fn(&SweepRow) -> bool| rows.iter().find(|r| pred(r)).and_then(|r| r.test_overall);
    let panels = if schedule_grid {
        let combos = distinct_pairs(rows.iter().map(|r| (r.point.lambda_adv, r.point.schedule.c)));
        combos
            .into_iter()
            .map(|(la, c)| {
                let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.point.lambda_adv == la && r.point.schedule.c == c).collect();
                let mus = distinct(mine.iter().map(|r| r.point.schedule.mu as f64));
                let ws = distinct(mine.iter().map(|r| r.point.schedule.w as f64));
                HeatmapPanel {
                    title: format!("test overall, lambda_adv {la}, c {c}"),
                    x_label: "delay mu".into(),
                    y_label: "warmup w".into(),
                    x_ticks: mus.iter().map(|m| m.to_string()).collect(),
                    y_ticks: ws.iter().map(|w| w.to_string()).collect(),
                    values: ws
                        .iter()
                        .map(|&w| {
                            mus.iter()
                                .map(|&mu| {
                                    cell(&|r: &SweepRow| {
                                        r.point.lambda_adv == la && r.point.schedule.c == c && r.point.schedule.mu as f64 == mu && r.point.schedule.w as f64 == w
                                    })
                                })
                                .collect()
                        })
                        .collect(),
                }
            })
            .collect()
    } else {
        let las = distinct(rows.iter().map(|r| r.point.lambda_adv));
        let cs = distinct(rows.iter().map(|r| r.point.schedule.c));
        vec![HeatmapPanel {
            title: "test overall".into(),
            x_label: "lambda_grl".into(),
            y_label: "lambda_adv".into(),
            x_ticks: cs.iter().map(|c| c.to_string()).collect(),
            y_ticks: las.iter().map(|l| l.to_string()).collect(),
            values: las
                .iter()
                .map(|&la| cs.iter().map(|&c| cell(&|r: &SweepRow| r.point.lambda_adv == la && r.point.schedule.c == c)).collect())
                .collect(),
        }]
    };
    render_heatmaps(&panels)
}

fn distinct_pairs(values: impl IntoIterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Test overall against lambda_grl (or delay, for schedule grids), with the
/// baseline score as a dashed reference.
pub fn sweep_lines(report: &SweepReport, schedule_grid: bool, baseline: Option<f64>) -> String {
    let rows = &report.rows;
    let (x_label, x_of): (&str, fn(&SweepRow) -> f64) =
        if schedule_grid { ("delay mu", |r| r.point.schedule.mu as f64) } else { ("lambda_grl", |r| r.point.schedule.c) };
    let mut chart = LineChart::new("test overall across the sweep", x_label, "test overall");
    let keys = distinct_pairs(rows.iter().map(|r| {
        if schedule_grid {
            (r.point.lambda_adv, r.point.schedule.c * 1e6 + r.point.schedule.w as f64)
        } else {
            (r.point.lambda_adv, 0.0)
        }
    }));
    let mut xs = Vec::new();
    for (la, key) in keys {
        let mine: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.point.lambda_adv == la && (!schedule_grid || r.point.schedule.c * 1e6 + r.point.schedule.w as f64 == key))
            .collect();
        let name = match mine.first() {
            Some(r) if schedule_grid => format!("adv {la} c {} w {}", r.point.schedule.c, r.point.schedule.w),
            _ => format!("lambda_adv {la}"),
        };
        let pts: Vec<(f64, f64)> = mine.iter().filter_map(|r| r.test_overall.map(|v| (x_of(r), v))).collect();
        xs.extend(mine.iter().map(|r| x_of(r)));
        chart = chart.with(Series::new(name, pts));
    }
    if let Some(b) = baseline {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            chart = chart.with(Series::new("baseline", vec![(lo, b), (hi, b)]).dashed());
        }
    }
    chart.render()
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config, a.seed)?;
    let dir = output_dir(&a.out, &cfg)?;
    let points = sweep_points(a, &cfg)?;
    if a.dry_run {
        OutputDir::check(&dir, &SWEEP_FILES, a.overwrite)?;
        println!("config ok: {} grid points", points.len());
        return Ok(());
    }
    let bundle = cfg.dataset.load()?;
    check_compatible(&cfg.model, &bundle)?;
    let out = OutputDir::prepare(&dir, &SWEEP_FILES, a.overwrite)?;
    let jobs = usize::try_from(a.jobs).unwrap_or(usize::MAX);
    let report = run_sweep(&points, &cfg.train, &cfg.model, &bundle, jobs)?;
    // lambda_adv = 0 runs are the baseline; train one if the grid has none.
    let baseline = match report.completed().find(|r| r.point.lambda_adv == 0.0) {
        Some(r) => r.test_overall,
        None => {
            let base = SweepPoint { lambda_adv: 0.0, schedule: static_schedule(0.0) };
            run_sweep(&[base], &cfg.train, &cfg.model, &bundle, 1)?.completed().next().and_then(|r| r.test_overall)
        }
    };
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    out.write("sweep.csv", &csv)?;
    let schedule_grid = a.schedule_grid.is_some();
    out.write("sweep_heatmap.svg", sweep_heatmap(&report, schedule_grid).as_bytes())?;
    out.write("sweep_lines.svg", sweep_lines(&report, schedule_grid, baseline).as_bytes())?;
    let completed = report.completed().count();
    println!("{completed}/{} runs completed; baseline test {}", report.rows.len(), fmt_opt(baseline));
    if let Some(best) = report.completed().filter(|r| r.val_overall.is_some()).max_by(|x, y| {
        x.val_overall.unwrap_or(f64::NEG_INFINITY).total_cmp(&y.val_overall.unwrap_or(f64::NEG_INFINITY))
    }) {
        let s = best.point.schedule;
        println!(
            "best by val: lambda_adv {} mu {} w {} c {}: val {} test {}",
            best.point.lambda_adv,
            s.mu,
            s.w,
            s.c,
            fmt_opt(best.val_overall),
            fmt_opt(best.test_overall)
        );
    }
    if completed == 0 {
        return Err(CliError::Diverged("every run in the sweep diverged".into()));
    }
    Ok(())
}

struct LoadedRun {
    name: String,
    spec: ChangingPriorsSpec,
    types: Vec<TypeScore>,
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    Ok(LoadedRun {
        name: dir.display().to_string(),
        spec: read_spec(&dir.join("spec.json"))?,
        types: read_types(&dir.join("types.csv"))?,
    })
}

/// Two side-by-side halves: largest deltas descending, smallest ascending.
pub fn delta_text(rows: &[DeltaRow], top: usize) -> String {
    let k = top.min(rows.len().div_ceil(2)).max(1).min(rows.len());
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
    let cell = |r: &DeltaRow| format!("{:<width$} {:>6} {:>6.2} {:>6.2} {:>7.2}", r.name, r.n, 100.0 * r.base, 100.0 * r.reg, r.delta);
    let head = format!("{:<width$} {:>6} {:>6} {:>6} {:>7}", "question", "N", "base", "reg", "delta");
    let mut out = format!("{head}  |  {head}\n");
    for i in 0..k {
        let left = cell(&rows[i]);
        let right = cell(&rows[rows.len() - 1 - i]);
        let _ = writeln!(out, "{left}  |  {right}");
    }
    out
}

pub fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    if a.run_dirs.len() < 2 {
        return Err(CliError::Usage("report needs a baseline run and at least one other run".into()));
    }
    let runs = a.run_dirs.iter().map(|d| load_run(d)).collect::<CliResult<Vec<_>>>()?;
    let base = &runs[0];
    for r in &runs[1..] {
        if r.spec != base.spec {
            return Err(CliError::Io(format!("data error: {} and {} were trained on different datasets", base.name, r.name)));
        }
    }
    let mut summary = String::from("run,overall,yesno,number,other\n");
    println!("{:<40} {:>8} {:>8} {:>8} {:>8}", "run (test, best checkpoint)", "overall", "yesno", "number", "other");
    for r in &runs {
        let by = |t| weighted_score(&r.types, t);
        let vals = [by(None), by(Some(AnswerType::YesNo)), by(Some(AnswerType::Number)), by(Some(AnswerType::Other))];
        println!("{:<40} {:>8} {:>8} {:>8} {:>8}", r.name, fmt_opt(vals[0]), fmt_opt(vals[1]), fmt_opt(vals[2]), fmt_opt(vals[3]));
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(summary, "{},{},{},{},{}", r.name, opt(vals[0]), opt(vals[1]), opt(vals[2]), opt(vals[3]));
    }
    let mut delta_csv = String::from("run,question_type_id,question_type,answer_type,n,base,reg,delta\n");
    if a.delta {
        for r in &runs[1..] {
            let rows = delta_table(&base.types, &r.types, &base.spec)?;
            println!("\ndelta of {} against {}", r.name, base.name);
            print!("{}", delta_text(&rows, a.top));
            for d in &rows {
                let _ = writeln!(
                    delta_csv,
                    "{},{},{},{},{},{},{},{}",
                    r.name,
                    d.question_type_id,
                    d.name,
                    d.answer_type.label(),
                    d.n,
                    d.base,
                    d.reg,
                    d.delta
                );
            }
        }
    }
    if let Some(dir) = &a.out {
        let files: &[&str] = if a.delta { &REPORT_FILES } else { &REPORT_FILES[..1] };
        let out = OutputDir::prepare(dir, files, a.overwrite)?;
        out.write("report.csv", summary.as_bytes())?;
        if a.delta {
            out.write("delta.csv", delta_csv.as_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use advreg::dataset::default_spec;

    #[test]
    fn prior_table_lists_every_type() {
        let spec = default_spec(1).unwrap();
        let t = prior_table(&spec);
        assert_eq!(t.lines().count(), spec.question_types.len() + 1);
        assert!(t.contains("no:0.90 yes:0.10 | no:0.10 yes:0.90"));
    }

    #[test]
    fn types_csv_round_trips() {
        let spec = default_spec(1).unwrap();
        let scores: Vec<TypeScore> = spec
            .question_types
            .iter()
            .enumerate()
            .map(|(k, q)| TypeScore { question_type_id: k, answer_type: q.answer_type, n_examples: 3 * k, score: 0.1 * k as f64 / 7.0 })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("types.csv");
        fs::write(&p, types_csv(&scores, &spec).unwrap()).unwrap();
        assert_eq!(read_types(&p).unwrap(), scores);
    }

    #[test]
    fn delta_text_halves() {
        let spec = default_spec(1).unwrap();
        let mk = |score: f64| -> Vec<TypeScore> {
            spec.question_types
                .iter()
                .enumerate()
                .map(|(k, q)| TypeScore { question_type_id: k, answer_type: q.answer_type, n_examples: 100, score: score * k as f64 / 20.0 })
                .collect()
        };
        let rows = delta_table(&mk(0.0), &mk(1.0), &spec).unwrap();
        let text = delta_text(&rows, 3);
        assert_eq!(text.lines().count(), 4);
        let first = text.lines().nth(1).unwrap();
        let (left, right) = first.split_once('|').unwrap();
        assert!(left.contains(&rows[0].name) && right.contains(&rows[rows.len() - 1].name));
    }

    fn row(la: f64, s: ScheduleParams, test: Option<f64>) -> SweepRow {
        SweepRow {
            point: SweepPoint { lambda_adv: la, schedule: s },
            status: if test.is_some() { RunStatus::Completed { stopped_at: 10, early: false } } else { RunStatus::Diverged { iteration: 3, reason: "nan".into() } },
            best_iter: test.map(|_| 10),
            val_overall: test,
            test_overall: test,
            test_yesno: None,
            test_number: None,
            test_other: None,
        }
    }

    #[test]
    fn sweep_plots_cover_grid_and_baseline() {
        let report = SweepReport {
            rows: vec![
                row(0.005, static_schedule(0.1), Some(0.6)),
                row(0.005, static_schedule(1.0), Some(0.62)),
                row(0.01, static_schedule(0.1), None),
                row(0.01, static_schedule(1.0), Some(0.65)),
            ],
        };
        let heat = sweep_heatmap(&report, false);
        assert_eq!(heat.matches("<rect").count(), 1 + 4);
        assert!(heat.contains("fail"));
        let lines = sweep_lines(&report, false, Some(0.61));
        assert!(lines.contains("stroke-dasharray"));
        assert!(lines.contains("baseline"));
        let sched = SweepReport {
            rows: vec![
                row(0.3, ScheduleParams { mu: 0, w: 50, c: 1.0 }, Some(0.7)),
                row(0.3, ScheduleParams { mu: 0, w: 100, c: 1.0 }, Some(0.71)),
                row(0.3, ScheduleParams { mu: 50, w: 50, c: 1.0 }, Some(0.72)),
                row(0.3, ScheduleParams { mu: 50, w: 100, c: 1.0 }, Some(0.73)),
            ],
        };
        assert_eq!(sweep_heatmap(&sched, true).matches("<rect").count(), 1 + 4);
        assert_eq!(sweep_lines(&sched, true, None).matches("<polyline").count(), 2);
    }
}
