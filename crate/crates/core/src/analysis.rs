//! Per-question-type scoring, the count-weighted difference metric, blind
//! oracles, sweeps and cross-run correlation.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AnswerType, ChangingPriorsSpec, DatasetBundle, Example, PriorKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::{vqa_score, ANNOTATORS};
use crate::schedule::ScheduleParams;
use crate::trainer::{predict_split, train, RunStatus, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TypeScore {
    pub question_type_id: usize,
    pub answer_type: AnswerType,
    pub n_examples: usize,
    /// Mean score; 0 when `n_examples` is 0.
    pub score: f64,
}

/// Mean score per question type, for every type in `spec`.
pub fn score_by_type(params: &ModelParams, examples: &[Example], spec: &ChangingPriorsSpec) -> Result<Vec<TypeScore>> {
    let preds = predict_split(params, examples)?;
    score_predictions(&preds, examples, spec)
}

pub fn score_predictions(preds: &[usize], examples: &[Example], spec: &ChangingPriorsSpec) -> Result<Vec<TypeScore>> {
    if preds.len() != examples.len() {
        return Err(Error::Dimension(format!("{} predictions for {} examples", preds.len(), examples.len())));
    }
    let mut sums = vec![(0.0, 0usize); spec.question_types.len()];
    for (e, &p) in examples.iter().zip(preds) {
        let s = sums
            .get_mut(e.question_type_id)
            .ok_or_else(|| Error::Data(format!("question type {} not in spec", e.question_type_id)))?;
        s.0 += vqa_score(p, &e.annotator_answers);
        s.1 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, (s, n))| TypeScore {
            question_type_id: k,
            answer_type: spec.question_types[k].answer_type,
            n_examples: n,
            score: if n > 0 { s / n as f64 } else { 0.0 },
        })
        .collect())
}

/// Example-weighted mean over `scores`, optionally restricted to one
/// answer type. `None` when no examples are covered.
pub fn weighted_score(scores: &[TypeScore], answer_type: Option<AnswerType>) -> Option<f64> {
    let (sum, n) = scores
        .iter()
        .filter(|s| answer_type.map_or(true, |a| s.answer_type == a))
        .fold((0.0, 0usize), |(s, n), t| (s + t.score * t.n_examples as f64, n + t.n_examples));
    (n > 0).then(|| sum / n as f64)
}

/// `(n / 100) * (score_reg - score_base)`; positive when regularization helps.
pub fn delta_metric(n: usize, score_base: f64, score_reg: f64) -> f64 {
    n as f64 / 100.0 * (score_reg - score_base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub question_type_id: usize,
    pub name: String,
    pub answer_type: AnswerType,
    pub n: usize,
    pub base: f64,
    pub reg: f64,
    pub delta: f64,
}

/// Per-type comparison sorted by descending delta (ties by type id).
pub fn delta_table(base: &[TypeScore], reg: &[TypeScore], spec: &ChangingPriorsSpec) -> Result<Vec<DeltaRow>> {
    if base.len() != reg.len() {
        return Err(Error::Data("score tables cover different question types".into()));
    }
    let mut rows = Vec::with_capacity(base.len());
    for (b, r) in base.iter().zip(reg) {
        if b.question_type_id != r.question_type_id || b.n_examples != r.n_examples {
            return Err(Error::Data(format!("type {} differs between runs", b.question_type_id)));
        }
        rows.push(DeltaRow {
            question_type_id: b.question_type_id,
            name: spec.question_types[b.question_type_id].name(),
            answer_type: b.answer_type,
            n: b.n_examples,
            base: b.score,
            reg: r.score,
            delta: delta_metric(b.n_examples, b.score, r.score),
        });
    }
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.question_type_id.cmp(&b.question_type_id)));
    Ok(rows)
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Expected score of a prediction whose per-annotator agreement
/// probability is `p`.
fn expected_score(p: f64) -> f64 {
    (0..=ANNOTATORS).map(|x| (x as f64 / 3.0).min(1.0) * binomial_pmf(ANNOTATORS, x, p)).sum()
}

/// Expected score per question type of the Bayes-optimal question-only
/// predictor fitted to the `fit` prior, evaluated on data drawn from the
/// `eval` prior.
///
/// The predictor sees the question type and, for cue-bearing types, the
/// cue word; content words carry no answer information. For each cue value
/// it picks the candidate with the highest posterior (ties to the lowest
/// answer id). Without a cue this is the prior argmax.
pub fn blind_oracle_by_type(spec: &ChangingPriorsSpec, fit: PriorKind, eval: PriorKind) -> Result<Vec<f64>> {
    spec.validate()?;
    let layout = spec.layout();
    let eta = spec.annotator_noise;
    let r = spec.cue_reliability;
    let mut out = Vec::with_capacity(spec.question_types.len());
    for (k, qt) in spec.question_types.iter().enumerate() {
        let fit_p = spec.prior(k, fit);
        let eval_p = spec.prior(k, eval);
        let ids = &layout.candidate_ids[k];
        let n = ids.len();
        let s_match = expected_score(if n > 1 { 1.0 - eta } else { 1.0 });
        let s_miss = if n > 1 { expected_score(eta / (n - 1) as f64) } else { 0.0 };
        // P(cue = c | ground = g); a single cue value stands in for "no cue".
        let likelihood = |c: usize, g: usize| -> f64 {
            if !qt.cue {
                1.0
            } else if n == 1 {
                1.0
            } else if c == g {
                r
            } else {
                (1.0 - r) / (n - 1) as f64
            }
        };
        let cue_values = if qt.cue { n } else { 1 };
        let mut expected = 0.0;
        for c in 0..cue_values {
            let pred = (0..n)
                .map(|j| (j, fit_p[j] * likelihood(c, j)))
                .fold(None::<(usize, f64)>, |best, (j, w)| match best {
                    Some((b, bw)) if bw > w || (bw == w && ids[b] < ids[j]) => Some((b, bw)),
                    _ => Some((j, w)),
                })
                .map(|(j, _)| j)
                .unwrap_or(0);
            for g in 0..n {
                let s = if pred == g { s_match } else { s_miss };
                expected += eval_p[g] * likelihood(c, g) * s;
            }
        }
        out.push(expected);
    }
    Ok(out)
}

/// Expected overall score (question types are equally likely) of the
/// train-fitted blind predictor on data drawn from `split_prior`.
pub fn blind_oracle_score(spec: &ChangingPriorsSpec, split_prior: PriorKind) -> Result<f64> {
    let per_type = blind_oracle_by_type(spec, PriorKind::Train, split_prior)?;
    Ok(per_type.iter().sum::<f64>() / per_type.len() as f64)
}

/// One grid entry of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda_adv: f64,
    pub schedule: ScheduleParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub status: RunStatus,
    /// Iteration of the best-val checkpoint, if any evaluation happened.
    pub best_iter: Option<usize>,
    pub val_overall: Option<f64>,
    pub test_overall: Option<f64>,
    pub test_yesno: Option<f64>,
    pub test_number: Option<f64>,
    pub test_other: Option<f64>,
}

pub const SWEEP_HEADER: &str =
    "lambda_adv,lambda_grl,mu,w,c,status,best_iter,val_overall,test_overall,test_yesno,test_number,test_other";

/// Rows in grid order, including failed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{SWEEP_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let s = r.point.schedule;
            // lambda_grl is the value the schedule settles at.
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.point.lambda_adv,
                s.c,
                s.mu,
                s.w,
                s.c,
                r.status.label(),
                r.best_iter.map(|t| t.to_string()).unwrap_or_default(),
                opt(r.val_overall),
                opt(r.test_overall),
                opt(r.test_yesno),
                opt(r.test_number),
                opt(r.test_other),
            )?;
        }
        Ok(())
    }

    pub fn completed(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| !r.status.is_diverged())
    }
}

fn sweep_row(point: SweepPoint, base: &TrainConfig, model: &ModelConfig, bundle: &DatasetBundle) -> Result<SweepRow> {
    let config = TrainConfig { lambda_adv: point.lambda_adv, schedule: point.schedule, ..base.clone() };
    let out = train(&config, model, bundle)?;
    let best_iter = out.best.map(|(t, _)| t);
    let test = best_iter.and_then(|t| out.log.eval_at("test", t)).map(|r| r.scores);
    Ok(SweepRow {
        point,
        status: out.log.status.clone(),
        best_iter,
        val_overall: out.best.map(|(_, v)| v),
        test_overall: test.map(|s| s.overall),
        test_yesno: test.and_then(|s| s.yesno),
        test_number: test.and_then(|s| s.number),
        test_other: test.and_then(|s| s.other),
    })
}

/// Trains one run per grid point on up to `jobs` threads. Every run uses
/// `base.seed`; divergence is recorded in the row, other errors abort.
pub fn run_sweep(
    points: &[SweepPoint],
    base: &TrainConfig,
    model: &ModelConfig,
    bundle: &DatasetBundle,
    jobs: usize,
) -> Result<SweepReport> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new(vec![None; points.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&point) = points.get(i) else { break };
                let row = sweep_row(point, base, model, bundle);
                results.lock().expect("sweep results lock")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|r| r.expect("every grid point ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows })
}

/// Shuffles used by [`correlate`]'s permutation test.
pub const PERMUTATIONS: usize = 10_000;
const PERMUTATION_SEED: u64 = 0x0c0_4e1a7e;

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson `r` and a two-sided permutation p-value.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Data(format!("need at least 3 pairs, got {}", xs.len())));
    }
    let r = pearson(xs, ys).ok_or_else(|| Error::Undefined("correlation of a constant series".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
    let mut shuffled = ys.to_vec();
    let threshold = r.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..PERMUTATIONS {
        shuffled.shuffle(&mut rng);
        if pearson(xs, &shuffled).unwrap_or(0.0).abs() >= threshold {
            extreme += 1;
        }
    }
    Ok((r, (extreme + 1) as f64 / (PERMUTATIONS + 1) as f64))
}
