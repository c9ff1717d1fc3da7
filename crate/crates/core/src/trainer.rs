//! Co-training of the answer model and the question-only adversary.
//!
//! Each step runs two backward passes over one forward tape. Pass 1
//! backpropagates `l_vqa` into the answer model. Pass 2 backpropagates
//! `lambda_adv * l_adv` into the adversary and, through the reversal
//! layer, into `theta_q`. The two `theta_q` gradients are summed before the
//! answer-model optimizer steps.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_norm, Tape, Tensor};
use crate::dataset::{AnswerType, DatasetBundle, Example};
use crate::error::{Error, Result};
use crate::model::{init_params, predict_answers, Group, ModelConfig, ModelParams, Reversal};
use crate::objective::{soft_cross_entropy, vqa_score, LossBreakdown, SoftTarget};
use crate::schedule::{lambda_grl_at, ScheduleParams};

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

const EVAL_CHUNK: usize = 1024;
/// Mixed into the training seed for the batch-order stream.
const SHUFFLE_STREAM: u64 = 0x5eed_ba7c;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_adv: f64,
    pub schedule: ScheduleParams,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; `None` never stops.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.0,
            schedule: crate::schedule::static_schedule(0.0),
            batch_size: 512,
            learning_rate: 0.001,
            max_iterations: 2000,
            eval_every: 100,
            patience: Some(10),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0) || !self.lambda_adv.is_finite() {
            return Err(Error::Config(format!("lambda_adv must be finite and >= 0, got {}", self.lambda_adv)));
        }
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_iterations", self.max_iterations),
            ("eval_every", self.eval_every),
            ("patience", self.patience.unwrap_or(1)),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Adamax with a fixed learning rate. One instance per parameter set.
#[derive(Clone, Debug)]
pub struct Adamax {
    lr: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

impl Adamax {
    /// State for tensors of the given lengths.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            steps: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            u: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_groups(lr: f64, params: &ModelParams, groups: &[Group]) -> Self {
        let sizes: Vec<usize> = groups.iter().flat_map(|&g| params.group(g).tensors().map(Tensor::len)).collect();
        Self::new(lr, &sizes)
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Gradients are checked before anything is touched,
    /// so a non-finite gradient leaves both parameters and state unchanged.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f64>],
        iteration: usize,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!("{} gradients for {} tensors", grads.len(), self.m.len())));
        }
        for (g, m) in grads.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(Error::Contract("gradient length does not match optimizer state".into()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { iteration, reason: "non-finite gradient".into() });
            }
        }
        self.steps += 1;
        let step = self.lr / (1.0 - ADAMAX_BETA1.powi(self.steps as i32));
        let mut count = 0;
        for (((p, g), m), u) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.u) {
            for (((pi, &gi), mi), ui) in p.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(u.iter_mut()) {
                *mi = ADAMAX_BETA1 * *mi + (1.0 - ADAMAX_BETA1) * gi;
                *ui = (ADAMAX_BETA2 * *ui).max(gi.abs());
                *pi -= step * *mi / (*ui + ADAMAX_EPS);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::Contract(format!("{count} tensors for {} gradients", grads.len())));
        }
        Ok(())
    }
}

/// A minibatch in tensor form.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<SoftTarget>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut rows = Vec::new();
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for e in examples {
            rows.push(e.image_features.clone());
            tokens.push(e.question_tokens.clone());
            targets.push(e.soft_target.clone());
        }
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(Self { images: Tensor::from_rows(&rows)?, tokens, targets })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-step telemetry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub t: usize,
    pub losses: LossBreakdown,
    pub lambda_grl: f64,
    pub grad_norm_q_from_vqa: f64,
    pub grad_norm_q_from_adv: f64,
    pub grad_norm_adv: f64,
}

/// Gradients for every parameter tensor, indexed like [`Group::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub groups: [Vec<Vec<f64>>; 5],
    pub losses: LossBreakdown,
    pub grad_norm_q_from_vqa: f64,
    pub grad_norm_q_from_adv: f64,
    pub grad_norm_adv: f64,
}

impl Gradients {
    pub fn group(&self, g: Group) -> &[Vec<f64>] {
        &self.groups[g as usize]
    }
}

/// Runs the two-pass gradient computation at fixed parameters. With
/// `adversary` false the adversary branch is never built.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &Batch,
    lambda_adv: f64,
    lambda_grl: f64,
    adversary: bool,
) -> Result<Gradients> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let (q, log_probs) = bound.forward_vqa(&mut tape, &batch.images, &batch.tokens)?;
    let l_vqa = soft_cross_entropy(&mut tape, log_probs, &batch.targets)?;

    tape.backward(l_vqa)?;
    let mut groups: [Vec<Vec<f64>>; 5] = Default::default();
    for g in Group::BASE {
        groups[g as usize] = bound.ids(g).iter().map(|&id| tape.grad_or_zeros(id)).collect();
    }
    let gn_q_vqa = grad_norm(groups[Group::Q as usize].iter().map(Vec::as_slice));
    let l_vqa_value = tape.value(l_vqa).values()[0];

    if !adversary {
        groups[Group::Adv as usize] = params.group(Group::Adv).tensors().map(|t| vec![0.0; t.len()]).collect();
        return Ok(Gradients {
            groups,
            losses: LossBreakdown::new(l_vqa_value, 0.0, lambda_adv),
            grad_norm_q_from_vqa: gn_q_vqa,
            grad_norm_q_from_adv: 0.0,
            grad_norm_adv: 0.0,
        });
    }

    let adv_log_probs = bound.predict_adv(&mut tape, q, Reversal::Grl(lambda_grl))?;
    let l_adv = soft_cross_entropy(&mut tape, adv_log_probs, &batch.targets)?;
    let scaled = tape.scale(l_adv, lambda_adv)?;
    tape.zero_grad();
    tape.backward(scaled)?;

    let q_from_adv: Vec<Vec<f64>> = bound.ids(Group::Q).iter().map(|&id| tape.grad_or_zeros(id)).collect();
    let adv: Vec<Vec<f64>> = bound.ids(Group::Adv).iter().map(|&id| tape.grad_or_zeros(id)).collect();
    let gn_q_adv = grad_norm(q_from_adv.iter().map(Vec::as_slice));
    let gn_adv = grad_norm(adv.iter().map(Vec::as_slice));
    // The reversed path is identically zero when either coefficient is;
    // skipping the sum keeps the trajectory bitwise equal to the baseline.
    if lambda_adv * lambda_grl != 0.0 {
        for (acc, g) in groups[Group::Q as usize].iter_mut().zip(&q_from_adv) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    groups[Group::Adv as usize] = adv;

    Ok(Gradients {
        groups,
        losses: LossBreakdown::new(l_vqa_value, tape.value(l_adv).values()[0], lambda_adv),
        grad_norm_q_from_vqa: gn_q_vqa,
        grad_norm_q_from_adv: gn_q_adv,
        grad_norm_adv: gn_adv,
    })
}

/// Parameters plus the two optimizers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    opt_vqa: Adamax,
    /// `None` for a baseline-only trainer.
    opt_adv: Option<Adamax>,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt_vqa = Adamax::for_groups(config.learning_rate, &params, &Group::BASE);
        let opt_adv = Some(Adamax::for_groups(config.learning_rate, &params, &[Group::Adv]));
        Ok(Self { params, opt_vqa, opt_adv, config })
    }

    /// A trainer without an adversary. `lambda_adv` and the schedule are
    /// ignored.
    pub fn baseline(params: ModelParams, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(params, config)?;
        t.opt_adv = None;
        Ok(t)
    }

    pub fn has_adversary(&self) -> bool {
        self.opt_adv.is_some()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizers(&self) -> (&Adamax, Option<&Adamax>) {
        (&self.opt_vqa, self.opt_adv.as_ref())
    }

    /// One co-training step at iteration `t` (1-based).
    pub fn step(&mut self, batch: &Batch, t: usize) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let lambda_grl = if self.has_adversary() { lambda_grl_at(t, &self.config.schedule) } else { 0.0 };
        let grads = compute_gradients(&self.params, batch, self.config.lambda_adv, lambda_grl, self.has_adversary())
            .map_err(|e| diverged(e, t))?;

        let base_grads: Vec<Vec<f64>> =
            Group::BASE.iter().flat_map(|&g| grads.group(g).iter().cloned()).collect();
        // Check everything first so a failure leaves both sets untouched.
        if grads.groups.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: t, reason: "non-finite gradient".into() });
        }
        let (base, adv) = self.params.base_and_adv_mut();
        self.opt_vqa.step(base, &base_grads, t)?;
        if let Some(opt) = &mut self.opt_adv {
            opt.step(adv, grads.group(Group::Adv), t)?;
        }
        if Group::ALL
            .iter()
            .any(|&g| self.params.group(g).tensors().any(|p| p.values().iter().any(|v| !v.is_finite())))
        {
            return Err(Error::Divergence { iteration: t, reason: "non-finite parameter".into() });
        }

        Ok(StepStats {
            t,
            losses: grads.losses,
            lambda_grl,
            grad_norm_q_from_vqa: grads.grad_norm_q_from_vqa,
            grad_norm_q_from_adv: grads.grad_norm_q_from_adv,
            grad_norm_adv: grads.grad_norm_adv,
        })
    }
}

fn diverged(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence { iteration: t, reason: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Mean score overall and by answer type. A type absent from the split
/// has no score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScores {
    pub overall: f64,
    pub yesno: Option<f64>,
    pub number: Option<f64>,
    pub other: Option<f64>,
}

impl SplitScores {
    pub fn by_type(&self, a: AnswerType) -> Option<f64> {
        match a {
            AnswerType::YesNo => self.yesno,
            AnswerType::Number => self.number,
            AnswerType::Other => self.other,
        }
    }
}

/// Predicted answer ids for every example, in order.
pub fn predict_split(params: &ModelParams, examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch = Batch::from_examples(chunk)?;
        out.extend(predict_answers(params, &batch.images, &batch.tokens)?);
    }
    Ok(out)
}

pub fn evaluate(params: &ModelParams, examples: &[Example]) -> Result<SplitScores> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let preds = predict_split(params, examples)?;
    let mut sums = [(0.0, 0usize); 3];
    for (e, &p) in examples.iter().zip(&preds) {
        let s = &mut sums[e.answer_type as usize];
        s.0 += vqa_score(p, &e.annotator_answers);
        s.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    let total: f64 = sums.iter().map(|s| s.0).sum();
    Ok(SplitScores {
        overall: total / examples.len() as f64,
        yesno: mean(sums[0]),
        number: mean(sums[1]),
        other: mean(sums[2]),
    })
}

/// Best-checkpoint tracking and the stopping rule. Evaluations at
/// `t >= mu` are eligible; the run stops after `patience` consecutive
/// eligible evaluations without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    mu: usize,
    patience: Option<usize>,
    best: Option<(usize, f64)>,
    best_any: Option<(usize, f64)>,
    stale: usize,
}

/// Outcome of one [`EarlyStopper::observe`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// This evaluation is the new best checkpoint.
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(mu: usize, patience: Option<usize>) -> Self {
        Self { mu, patience, best: None, best_any: None, stale: 0 }
    }

    pub fn observe(&mut self, t: usize, score: f64) -> StopDecision {
        let any_improved = self.best_any.map_or(true, |(_, b)| score > b);
        if any_improved {
            self.best_any = Some((t, score));
        }
        if t < self.mu {
            // Before the delay ends, track the fallback only.
            return StopDecision { improved: self.best.is_none() && any_improved, stop: false };
        }
        let improved = self.best.map_or(true, |(_, b)| score > b);
        if improved {
            self.best = Some((t, score));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let stop = self.patience.is_some_and(|p| self.stale >= p);
        StopDecision { improved, stop }
    }

    /// `(iteration, score)` of the selected checkpoint.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.or(self.best_any)
    }
}

/// One row of `runlog.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRow {
    pub t: usize,
    pub l_vqa: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub lambda_grl: f64,
    pub gn_q_vqa: f64,
    pub gn_q_adv: f64,
    pub gn_adv: f64,
}

impl From<StepStats> for StepRow {
    fn from(s: StepStats) -> Self {
        Self {
            t: s.t,
            l_vqa: s.losses.l_vqa,
            l_adv: s.losses.l_adv,
            l_total: s.losses.l_total,
            lambda_grl: s.lambda_grl,
            gn_q_vqa: s.grad_norm_q_from_vqa,
            gn_q_adv: s.grad_norm_q_from_adv,
            gn_adv: s.grad_norm_adv,
        }
    }
}

/// One row of `eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub t: usize,
    pub split: String,
    pub scores: SplitScores,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed { stopped_at: usize, early: bool },
    Diverged { iteration: usize, reason: String },
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }

    /// Short label used in CSV output.
    pub fn label(&self) -> String {
        match self {
            RunStatus::Completed { .. } => "ok".into(),
            RunStatus::Diverged { iteration, .. } => format!("diverged@{iteration}"),
        }
    }
}

pub const RUNLOG_HEADER: &str = "t,l_vqa,l_adv,l_total,lambda_grl,gn_q_vqa,gn_q_adv,gn_adv";
pub const EVAL_HEADER: &str = "t,split,overall,yesno,number,other";

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub status: RunStatus,
}

impl RunLog {
    pub fn write_runlog_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RUNLOG_HEADER}")?;
        for r in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.t, r.l_vqa, r.l_adv, r.l_total, r.lambda_grl, r.gn_q_vqa, r.gn_q_adv, r.gn_adv
            )?;
        }
        Ok(())
    }

    pub fn write_eval_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{EVAL_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.evals {
            let s = &r.scores;
            writeln!(out, "{},{},{},{},{},{}", r.t, r.split, s.overall, opt(s.yesno), opt(s.number), opt(s.other))?;
        }
        Ok(())
    }

    /// Evaluation rows of one split, in iteration order.
    pub fn split_rows<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.evals.iter().filter(move |r| r.split == split)
    }

    /// The `split` row at iteration `t`.
    pub fn eval_at(&self, split: &str, t: usize) -> Option<&EvalRow> {
        self.evals.iter().find(|r| r.split == split && r.t == t)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters at the best-val checkpoint.
    pub params: ModelParams,
    /// Parameters after the last completed step.
    pub final_params: ModelParams,
    pub log: RunLog,
    /// `(iteration, val overall)` of the best checkpoint.
    pub best: Option<(usize, f64)>,
}

/// Checks that the model fits the dataset's vocabularies.
pub fn check_compatible(model: &ModelConfig, bundle: &DatasetBundle) -> Result<()> {
    let layout = bundle.spec.layout();
    if model.question_vocab_size != layout.num_tokens() {
        return Err(Error::Config(format!(
            "question_vocab_size {} does not match the dataset's {} tokens",
            model.question_vocab_size,
            layout.num_tokens()
        )));
    }
    if model.answer_vocab_size != layout.num_answers() {
        return Err(Error::Config(format!(
            "answer_vocab_size {} does not match the dataset's {} answers",
            model.answer_vocab_size,
            layout.num_answers()
        )));
    }
    if model.image_input_dim != bundle.spec.image_feature_dim {
        return Err(Error::Config(format!(
            "image_input_dim {} does not match feature dim {}",
            model.image_input_dim, bundle.spec.image_feature_dim
        )));
    }
    Ok(())
}

/// Shuffled minibatches, reshuffled at every epoch boundary.
struct BatchStream<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    fn new(examples: &'a [Example], batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        Self { examples, order, pos: 0, batch_size, rng }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = Batch::from_examples(self.order[self.pos..end].iter().map(|&i| &self.examples[i]))?;
        self.pos = end;
        Ok(batch)
    }
}

/// Trains with the adversary.
pub fn train(config: &TrainConfig, model: &ModelConfig, bundle: &DatasetBundle) -> Result<TrainOutput> {
    run(config, model, bundle, true)
}

/// Trains the answer model alone, never constructing the adversary branch.
pub fn train_baseline(config: &TrainConfig, model: &ModelConfig, bundle: &DatasetBundle) -> Result<TrainOutput> {
    run(config, model, bundle, false)
}

fn run(config: &TrainConfig, model: &ModelConfig, bundle: &DatasetBundle, adversary: bool) -> Result<TrainOutput> {
    config.validate()?;
    check_compatible(model, bundle)?;
    if bundle.train.is_empty() || bundle.val.is_empty() {
        return Err(Error::Data("train and val splits must be nonempty".into()));
    }
    let params = init_params(model)?;
    let mut trainer =
        if adversary { Trainer::new(params, config.clone())? } else { Trainer::baseline(params, config.clone())? };
    let mut stream = BatchStream::new(&bundle.train, config.batch_size, config.seed);
    let mut stopper = EarlyStopper::new(config.schedule.mu, config.patience);
    let mut best_params = trainer.params.clone();
    let mut log = RunLog { steps: Vec::new(), evals: Vec::new(), status: RunStatus::Completed { stopped_at: 0, early: false } };

    for t in 1..=config.max_iterations {
        let batch = stream.next_batch()?;
        match trainer.step(&batch, t) {
            Ok(stats) => log.steps.push(stats.into()),
            Err(Error::Divergence { iteration, reason }) => {
                log.status = RunStatus::Diverged { iteration, reason };
                return Ok(TrainOutput { params: best_params, final_params: trainer.params, log, best: stopper.best() });
            }
            Err(e) => return Err(e),
        }
        if t % config.eval_every != 0 && t != config.max_iterations {
            continue;
        }
        let val = evaluate(&trainer.params, &bundle.val)?;
        log.evals.push(EvalRow { t, split: "val".into(), scores: val });
        if !bundle.test.is_empty() {
            let test = evaluate(&trainer.params, &bundle.test)?;
            log.evals.push(EvalRow { t, split: "test".into(), scores: test });
        }
        let decision = stopper.observe(t, val.overall);
        if decision.improved {
            best_params = trainer.params.clone();
        }
        if decision.stop {
            log.status = RunStatus::Completed { stopped_at: t, early: true };
            return Ok(TrainOutput { params: best_params, final_params: trainer.params, log, best: stopper.best() });
        }
    }
    log.status = RunStatus::Completed { stopped_at: config.max_iterations, early: false };
    Ok(TrainOutput { params: best_params, final_params: trainer.params, log, best: stopper.best() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{default_spec, generate, SplitSizes};
    use crate::schedule::static_schedule;

    #[test]
    fn adamax_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![0.5, -1.0]);
        let mut opt = Adamax::new(0.001, &[2]);
        opt.step([&mut p], &[vec![0.0, 0.0]], 1).unwrap();
        assert_eq!(p.values(), &[0.5, -1.0]);
    }

    #[test]
    fn adamax_first_step_magnitude() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut opt = Adamax::new(0.001, &[1]);
        opt.step([&mut p], &[vec![1.0]], 1).unwrap();
        // m = 0.1, u = 1, bias correction 1/(1 - 0.9)
        let expected = 0.001 * (0.1 / (1.0 - 0.9)) / (1.0 + 1e-8);
        assert!((p.values()[0] + expected).abs() < 1e-18);
        assert!((p.values()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn adamax_divergence_leaves_state() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = Adamax::new(0.001, &[1]);
        let err = opt.step([&mut p], &[vec![f64::NAN]], 7).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 7, .. }));
        assert_eq!(p.values(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn adamax_instances_are_independent() {
        let mut a = Tensor::vector(vec![0.0]);
        let mut b = Tensor::vector(vec![0.0]);
        let mut oa = Adamax::new(0.01, &[1]);
        let mut ob = Adamax::new(0.01, &[1]);
        for t in 1..=3 {
            oa.step([&mut a], &[vec![1.0]], t).unwrap();
        }
        ob.step([&mut b], &[vec![1.0]], 1).unwrap();
        assert_eq!(oa.steps(), 3);
        assert_eq!(ob.steps(), 1);
        assert!(a.values()[0] < b.values()[0]);
    }

    #[test]
    fn early_stop_worked_example() {
        let mut s = EarlyStopper::new(3000, Some(2));
        let mut stop_at = None;
        for k in 1..=20 {
            let t = k * 500;
            // Strictly improving until the delay ends, flat afterwards.
            let score = if t <= 3000 { t as f64 } else { 3000.0 };
            if s.observe(t, score).stop {
                stop_at = Some(t);
                break;
            }
        }
        assert_eq!(stop_at, Some(4000));
        assert_eq!(s.best(), Some((3000, 3000.0)));
    }

    #[test]
    fn early_stop_never_before_delay() {
        let mut s = EarlyStopper::new(1000, Some(1));
        for t in (100..1000).step_by(100) {
            assert!(!s.observe(t, 1.0 / t as f64).stop);
        }
        assert!(!s.observe(1000, 0.0).stop);
        assert!(s.observe(1100, 0.0).stop);
        assert_eq!(s.best(), Some((1000, 0.0)));
    }

    #[test]
    fn early_stop_ties_keep_earlier() {
        let mut s = EarlyStopper::new(0, None);
        s.observe(10, 0.5);
        assert!(!s.observe(20, 0.5).improved);
        assert_eq!(s.best(), Some((10, 0.5)));
    }

    fn tiny_bundle() -> DatasetBundle {
        let mut spec = default_spec(1).unwrap();
        spec.examples_per_split = SplitSizes { train_pool: 300, test: 100 };
        generate(&spec).unwrap()
    }

    fn tiny_model(bundle: &DatasetBundle) -> ModelConfig {
        let layout = bundle.spec.layout();
        ModelConfig {
            question_vocab_size: layout.num_tokens(),
            embed_dim: 6,
            question_hidden_dim: 8,
            image_input_dim: bundle.spec.image_feature_dim,
            fused_dim: 8,
            answer_vocab_size: layout.num_answers(),
            adversary_hidden_layers: 1,
            adversary_hidden_units: 8,
            seed: 3,
        }
    }

    #[test]
    fn no_reversed_gradient_during_delay() {
        let bundle = tiny_bundle();
        let model = tiny_model(&bundle);
        let config = TrainConfig {
            lambda_adv: 0.5,
            schedule: ScheduleParams { mu: 5, w: 5, c: 1.0 },
            batch_size: 16,
            max_iterations: 12,
            eval_every: 4,
            ..TrainConfig::default()
        };
        let out = train(&config, &model, &bundle).unwrap();
        for r in &out.log.steps {
            assert_eq!(r.lambda_grl, lambda_grl_at(r.t, &config.schedule));
            if r.t <= 5 {
                assert_eq!(r.gn_q_adv, 0.0);
            } else {
                assert!(r.gn_q_adv > 0.0);
            }
            assert!(r.gn_adv > 0.0);
        }
        assert!(out.log.steps.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn adversary_update_descends_its_loss() {
        let bundle = tiny_bundle();
        let model = tiny_model(&bundle);
        let params = init_params(&model).unwrap();
        let batch = Batch::from_examples(&bundle.train[..32]).unwrap();
        let config = TrainConfig { lambda_adv: 0.1, schedule: static_schedule(1.0), ..TrainConfig::default() };
        let mut trainer = Trainer::new(params.clone(), config).unwrap();
        let grads = compute_gradients(&params, &batch, 0.1, 1.0, true).unwrap();
        trainer.step(&batch, 1).unwrap();
        let dot: f64 = params
            .group(Group::Adv)
            .tensors()
            .zip(trainer.params.group(Group::Adv).tensors())
            .zip(grads.group(Group::Adv))
            .flat_map(|((before, after), g)| {
                before.values().iter().zip(after.values()).zip(g).map(|((b, a), gi)| (a - b) * gi)
            })
            .sum();
        assert!(dot <= 0.0);
    }

    #[test]
    fn reversed_norm_is_linear_in_lambda() {
        let bundle = tiny_bundle();
        let params = init_params(&tiny_model(&bundle)).unwrap();
        let batch = Batch::from_examples(&bundle.train[..20]).unwrap();
        let a = compute_gradients(&params, &batch, 0.3, 0.7, true).unwrap();
        let b = compute_gradients(&params, &batch, 0.3, 1.4, true).unwrap();
        assert!(a.grad_norm_q_from_adv > 0.0);
        assert_eq!(b.grad_norm_q_from_adv, 2.0 * a.grad_norm_q_from_adv);
    }

    #[test]
    fn training_is_deterministic_and_csv_headers() {
        let bundle = tiny_bundle();
        let model = tiny_model(&bundle);
        let config = TrainConfig {
            lambda_adv: 0.1,
            schedule: ScheduleParams { mu: 2, w: 3, c: 1.0 },
            batch_size: 32,
            max_iterations: 15,
            eval_every: 5,
            patience: None,
            ..TrainConfig::default()
        };
        let a = train(&config, &model, &bundle).unwrap();
        let b = train(&config, &model, &bundle).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.steps.len(), 15);
        let mut buf = Vec::new();
        a.log.write_runlog_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,l_vqa,l_adv,l_total,lambda_grl,gn_q_vqa,gn_q_adv,gn_adv\n"));
        assert_eq!(text.lines().count(), 16);
        let mut buf = Vec::new();
        a.log.write_eval_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,split,overall,yesno,number,other\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }

    #[test]
    fn zero_lambda_matches_baseline_bitwise() {
        let bundle = tiny_bundle();
        let model = tiny_model(&bundle);
        let config = TrainConfig {
            lambda_adv: 0.0,
            schedule: static_schedule(1.0),
            batch_size: 32,
            max_iterations: 20,
            eval_every: 5,
            patience: None,
            ..TrainConfig::default()
        };
        let with_adv = train(&config, &model, &bundle).unwrap();
        let base = train_baseline(&config, &model, &bundle).unwrap();
        for g in Group::BASE {
            assert_eq!(with_adv.final_params.group(g), base.final_params.group(g));
        }
        assert_eq!(with_adv.log.evals, base.log.evals);
    }

    #[test]
    fn evaluate_weighted_overall() {
        let bundle = tiny_bundle();
        let params = init_params(&tiny_model(&bundle)).unwrap();
        let s = evaluate(&params, &bundle.test).unwrap();
        let counts: Vec<usize> = AnswerType::ALL
            .iter()
            .map(|&a| bundle.test.iter().filter(|e| e.answer_type == a).count())
            .collect();
        let weighted: f64 = AnswerType::ALL
            .iter()
            .zip(&counts)
            .map(|(&a, &n)| s.by_type(a).unwrap_or(0.0) * n as f64)
            .sum::<f64>()
            / bundle.test.len() as f64;
        assert!((weighted - s.overall).abs() < 1e-12);
    }
}
