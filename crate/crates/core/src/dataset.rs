//! Synthetic changing-priors data.
//!
//! Each question type has a train-time answer prior and a test-time prior
//! (rank-reversed by default). An example draws its type uniformly, its
//! ground answer from the split's prior, and then:
//!
//! * image features: with probability `signal_strength` the answer's
//!   signature vector plus unit Gaussian noise, otherwise pure background
//!   noise;
//! * question tokens: the type's prefix words, `content_tokens` random
//!   content words, and for cue-bearing types one answer-correlated cue word
//!   that names the ground answer with probability `cue_reliability`;
//! * ten annotators who each report the ground answer, or with probability
//!   `annotator_noise` a different candidate chosen uniformly.
//!
//! The train pool is drawn from the train priors and split 90/10 into
//! train and val; the test split is drawn from the test priors.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{annotator_soft_targets, SoftTarget, ANNOTATORS};

const PRIOR_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other];

    pub fn label(self) -> &'static str {
        match self {
            AnswerType::YesNo => "yesno",
            AnswerType::Number => "number",
            AnswerType::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionTypeSpec {
    pub prefix: Vec<String>,
    pub answer_type: AnswerType,
    pub candidates: Vec<String>,
    pub train_prior: Vec<f64>,
    pub test_prior: Vec<f64>,
    /// Whether questions of this type carry an answer-correlated cue word.
    #[serde(default)]
    pub cue: bool,
}

impl QuestionTypeSpec {
    pub fn name(&self) -> String {
        self.prefix.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    /// Examples drawn from the train priors before the train/val split.
    pub train_pool: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangingPriorsSpec {
    pub question_types: Vec<QuestionTypeSpec>,
    pub content_vocab_size: usize,
    pub content_tokens: usize,
    pub image_feature_dim: usize,
    /// Euclidean norm of each answer's image signature.
    pub signature_scale: f64,
    pub annotator_noise: f64,
    pub signal_strength: f64,
    pub cue_reliability: f64,
    pub examples_per_split: SplitSizes,
    pub val_fraction: f64,
    pub seed: u64,
}

/// Which prior a split is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Train,
    Test,
}

impl ChangingPriorsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.question_types.is_empty() {
            return Err(Error::Spec("no question types".into()));
        }
        for (name, p) in [
            ("annotator_noise", self.annotator_noise),
            ("signal_strength", self.signal_strength),
            ("cue_reliability", self.cue_reliability),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.image_feature_dim == 0 || self.content_vocab_size == 0 {
            return Err(Error::Spec("image_feature_dim and content_vocab_size must be >= 1".into()));
        }
        if !(self.signature_scale >= 0.0) || !self.signature_scale.is_finite() {
            return Err(Error::Spec("signature_scale must be finite and >= 0".into()));
        }
        for qt in &self.question_types {
            let name = qt.name();
            if qt.prefix.is_empty() {
                return Err(Error::Spec("question type with empty prefix".into()));
            }
            if qt.candidates.is_empty() {
                return Err(Error::Spec(format!("{name}: no candidate answers")));
            }
            for (label, prior) in [("train", &qt.train_prior), ("test", &qt.test_prior)] {
                if prior.len() != qt.candidates.len() {
                    return Err(Error::Spec(format!("{name}: {label} prior length != candidates")));
                }
                if prior.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::Spec(format!("{name}: {label} prior has entries outside [0, 1]")));
                }
                let sum: f64 = prior.iter().sum();
                if (sum - 1.0).abs() > PRIOR_TOLERANCE {
                    return Err(Error::Spec(format!("{name}: {label} prior sums to {sum}")));
                }
            }
        }
        if self.question_types.iter().all(|qt| qt.train_prior == qt.test_prior) {
            return Err(Error::Spec("test priors equal train priors for every type".into()));
        }
        Ok(())
    }

    /// Distinct answers in order of first appearance.
    pub fn answer_vocab(&self) -> Vec<String> {
        let mut vocab: Vec<String> = Vec::new();
        for a in self.question_types.iter().flat_map(|qt| &qt.candidates) {
            if !vocab.contains(a) {
                vocab.push(a.clone());
            }
        }
        vocab
    }

    /// Prefix words, then `c0..cN` content words, then one `cue:<answer>`
    /// word per answer.
    pub fn token_vocab(&self) -> Vec<String> {
        let mut vocab: Vec<String> = Vec::new();
        for w in self.question_types.iter().flat_map(|qt| &qt.prefix) {
            if !vocab.contains(w) {
                vocab.push(w.clone());
            }
        }
        vocab.extend((0..self.content_vocab_size).map(|i| format!("c{i}")));
        vocab.extend(self.answer_vocab().into_iter().map(|a| format!("cue:{a}")));
        vocab
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn prior(&self, type_id: usize, kind: PriorKind) -> &[f64] {
        let qt = &self.question_types[type_id];
        match kind {
            PriorKind::Train => &qt.train_prior,
            PriorKind::Test => &qt.test_prior,
        }
    }
}

/// Integer ids derived from a spec.
#[derive(Clone, Debug)]
pub struct Layout {
    pub answers: Vec<String>,
    pub tokens: Vec<String>,
    /// Global answer id of each candidate, per question type.
    pub candidate_ids: Vec<Vec<usize>>,
    pub prefix_ids: Vec<Vec<usize>>,
    pub content_base: usize,
    pub cue_base: usize,
}

impl Layout {
    fn new(spec: &ChangingPriorsSpec) -> Self {
        let answers = spec.answer_vocab();
        let tokens = spec.token_vocab();
        let answer_index: HashMap<&str, usize> = answers.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
        let token_index: HashMap<&str, usize> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let candidate_ids = spec
            .question_types
            .iter()
            .map(|qt| qt.candidates.iter().map(|a| answer_index[a.as_str()]).collect())
            .collect();
        let prefix_ids = spec
            .question_types
            .iter()
            .map(|qt| qt.prefix.iter().map(|w| token_index[w.as_str()]).collect())
            .collect();
        let content_base = token_index["c0"];
        let cue_base = content_base + spec.content_vocab_size;
        Self { answers, tokens, candidate_ids, prefix_ids, content_base, cue_base }
    }

    pub fn cue_token(&self, answer_id: usize) -> usize {
        self.cue_base + answer_id
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image_features: Vec<f64>,
    pub question_tokens: Vec<usize>,
    pub question_type_id: usize,
    pub answer_type: AnswerType,
    pub annotator_answers: Vec<usize>,
    pub soft_target: SoftTarget,
    pub ground_answer: usize,
}

/// On-disk form of an [`Example`]: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub image_features: Vec<f64>,
    pub question_tokens: Vec<usize>,
    pub question_type_id: usize,
    pub answer_type: AnswerType,
    pub annotator_answers: Vec<usize>,
}

impl Example {
    pub fn record(&self) -> ExampleRecord {
        ExampleRecord {
            image_features: self.image_features.clone(),
            question_tokens: self.question_tokens.clone(),
            question_type_id: self.question_type_id,
            answer_type: self.answer_type,
            annotator_answers: self.annotator_answers.clone(),
        }
    }

    /// Rebuilds an example from its record. The ground answer is not stored
    /// on disk and is recovered as the most frequent annotator answer.
    pub fn from_record(r: ExampleRecord, answer_vocab_size: usize) -> Result<Self> {
        let soft_target = annotator_soft_targets(&r.annotator_answers, answer_vocab_size)?;
        let mut counts = vec![0usize; answer_vocab_size];
        r.annotator_answers.iter().for_each(|&a| counts[a] += 1);
        let ground_answer = (0..answer_vocab_size).rev().max_by_key(|&a| counts[a]).unwrap_or(0);
        Ok(Self {
            image_features: r.image_features,
            question_tokens: r.question_tokens,
            question_type_id: r.question_type_id,
            answer_type: r.answer_type,
            annotator_answers: r.annotator_answers,
            soft_target,
            ground_answer,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub spec: ChangingPriorsSpec,
}

struct Sampler<'a> {
    spec: &'a ChangingPriorsSpec,
    layout: Layout,
    signatures: Vec<Vec<f64>>,
    priors: [Vec<WeightedIndex<f64>>; 2],
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a ChangingPriorsSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layout = spec.layout();
        let signatures = (0..layout.num_answers())
            .map(|_| {
                let dir: Vec<f64> = (0..spec.image_feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.into_iter().map(|v| v * spec.signature_scale / norm).collect()
            })
            .collect();
        let weighted = |kind| {
            (0..spec.question_types.len())
                .map(|t| WeightedIndex::new(spec.prior(t, kind)).map_err(|e| Error::Spec(e.to_string())))
                .collect::<Result<Vec<_>>>()
        };
        let priors = [weighted(PriorKind::Train)?, weighted(PriorKind::Test)?];
        Ok(Self { spec, layout, signatures, priors })
    }

    fn example(&self, rng: &mut ChaCha8Rng, kind: PriorKind) -> Result<Example> {
        let spec = self.spec;
        let type_id = rng.gen_range(0..spec.question_types.len());
        let qt = &spec.question_types[type_id];
        let candidates = &self.layout.candidate_ids[type_id];
        let prior = &self.priors[kind as usize][type_id];
        let slot = prior.sample(rng);
        let ground = candidates[slot];

        let mut tokens = self.layout.prefix_ids[type_id].clone();
        for _ in 0..spec.content_tokens {
            tokens.push(self.layout.content_base + rng.gen_range(0..spec.content_vocab_size));
        }
        if qt.cue {
            let cue_answer = if rng.gen::<f64>() < spec.cue_reliability {
                ground
            } else {
                other_candidate(rng, candidates, slot)
            };
            tokens.push(self.layout.cue_token(cue_answer));
        }

        let signal = rng.gen::<f64>() < spec.signal_strength;
        let mut image_features: Vec<f64> =
            (0..spec.image_feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        if signal {
            image_features.iter_mut().zip(&self.signatures[ground]).for_each(|(x, m)| *x += m);
        }

        let annotator_answers: Vec<usize> = (0..ANNOTATORS)
            .map(|_| {
                if rng.gen::<f64>() < spec.annotator_noise {
                    other_candidate(rng, candidates, slot)
                } else {
                    ground
                }
            })
            .collect();
        let soft_target = annotator_soft_targets(&annotator_answers, self.layout.num_answers())?;

        Ok(Example {
            image_features,
            question_tokens: tokens,
            question_type_id: type_id,
            answer_type: qt.answer_type,
            annotator_answers,
            soft_target,
            ground_answer: ground,
        })
    }
}

/// A uniformly chosen candidate other than `slot`; `slot` itself when it is
/// the only candidate.
fn other_candidate(rng: &mut ChaCha8Rng, candidates: &[usize], slot: usize) -> usize {
    if candidates.len() < 2 {
        return candidates[slot];
    }
    let mut pick = rng.gen_range(0..candidates.len() - 1);
    if pick >= slot {
        pick += 1;
    }
    candidates[pick]
}

/// Draws the train pool, splits off val, and draws the test split.
pub fn generate(spec: &ChangingPriorsSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sampler = Sampler::new(spec, &mut rng)?;

    let pool_size = spec.examples_per_split.train_pool;
    let pool = (0..pool_size)
        .map(|_| sampler.example(&mut rng, PriorKind::Train))
        .collect::<Result<Vec<_>>>()?;
    let n_val = (spec.val_fraction * pool_size as f64).round() as usize;
    let mut val_idx = rand::seq::index::sample(&mut rng, pool_size, n_val).into_vec();
    val_idx.sort_unstable();
    let mut is_val = vec![false; pool_size];
    val_idx.iter().for_each(|&i| is_val[i] = true);
    let (mut train, mut val) = (Vec::with_capacity(pool_size - n_val), Vec::with_capacity(n_val));
    for (ex, v) in pool.into_iter().zip(is_val) {
        if v {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }

    let test = (0..spec.examples_per_split.test)
        .map(|_| sampler.example(&mut rng, PriorKind::Test))
        .collect::<Result<Vec<_>>>()?;

    Ok(DatasetBundle { train, val, test, spec: spec.clone() })
}

/// Rank reversal: the most likely answer receives the least likely mass,
/// the second most likely the second least, and so on.
pub fn invert_priors(p: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut out = vec![0.0; p.len()];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = p[order[p.len() - 1 - rank]];
    }
    out
}

fn qtype(prefix: &str, answer_type: AnswerType, candidates: &[&str], train_prior: &[f64], cue: bool) -> QuestionTypeSpec {
    QuestionTypeSpec {
        prefix: prefix.split(' ').map(String::from).collect(),
        answer_type,
        candidates: candidates.iter().map(|s| s.to_string()).collect(),
        train_prior: train_prior.to_vec(),
        test_prior: invert_priors(train_prior),
        cue,
    }
}

/// Built-in specs. Version 1 has strong priors (0.9/0.1 on yes/no types);
/// version 2 is closer to balanced (0.65/0.35). Any other version is an
/// error.
pub fn default_spec(version: u8) -> Result<ChangingPriorsSpec> {
    use AnswerType::*;
    let (yes_no, number, color, sport, animal): (&[f64], &[f64], &[f64], &[f64], &[f64]) = match version {
        1 => (
            &[0.9, 0.1],
            &[0.42, 0.22, 0.15, 0.1, 0.07, 0.04],
            &[0.4, 0.2, 0.15, 0.12, 0.08, 0.05],
            &[0.5, 0.2, 0.14, 0.1, 0.06],
            &[0.3, 0.2, 0.15, 0.12, 0.1, 0.08, 0.05],
        ),
        2 => (
            &[0.65, 0.35],
            &[0.3, 0.22, 0.17, 0.13, 0.1, 0.08],
            &[0.28, 0.2, 0.16, 0.14, 0.12, 0.1],
            &[0.32, 0.24, 0.18, 0.14, 0.12],
            &[0.22, 0.18, 0.15, 0.13, 0.12, 0.11, 0.09],
        ),
        v => return Err(Error::Spec(format!("unknown default spec version {v}"))),
    };
    let rot = |p: &[f64], k: usize| {
        let mut v = p.to_vec();
        v.rotate_right(k);
        v
    };
    // Types sharing a candidate set get rotated priors so the majority
    // answer differs between them; yes/no majorities alternate.
    let colors = ["white", "black", "red", "blue", "green", "yellow"];
    let sports = ["tennis", "baseball", "skiing", "soccer", "surfing"];
    let animals = ["dog", "cat", "horse", "bird", "cow", "sheep", "elephant"];
    let numbers = ["0", "1", "2", "3", "4", "5"];
    let question_types = vec![
        qtype("is there a", YesNo, &["no", "yes"], yes_no, false),
        qtype("is this a", YesNo, &["yes", "no"], yes_no, false),
        qtype("are the", YesNo, &["no", "yes"], yes_no, false),
        qtype("is the", YesNo, &["yes", "no"], yes_no, false),
        qtype("does the", YesNo, &["no", "yes"], yes_no, false),
        qtype("are there", YesNo, &["yes", "no"], yes_no, false),
        qtype("how many", Number, &numbers, &rot(number, 2), false),
        qtype("how many people are", Number, &numbers, &rot(number, 1), false),
        qtype("what color is the", Other, &colors, color, true),
        qtype("what color are the", Other, &colors, &rot(color, 3), true),
        qtype("what sport is", Other, &sports, sport, true),
        qtype("what game is the", Other, &sports, &rot(sport, 2), true),
        qtype("what animal is", Other, &animals, animal, true),
        qtype("what kind of animal", Other, &animals, &rot(animal, 4), true),
    ];
    Ok(ChangingPriorsSpec {
        question_types,
        content_vocab_size: 40,
        content_tokens: 3,
        image_feature_dim: 16,
        signature_scale: 3.0,
        annotator_noise: 0.1,
        signal_strength: 0.7,
        cue_reliability: 0.8,
        examples_per_split: SplitSizes { train_pool: 10_000, test: 5_000 },
        val_fraction: 0.1,
        seed: 0,
    })
}

pub fn write_jsonl<W: Write>(examples: &[Example], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for ex in examples {
        serde_json::to_writer(&mut out, &ex.record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: std::io::Read>(input: R, answer_vocab_size: usize) -> Result<Vec<Example>> {
    BufReader::new(input)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let record: ExampleRecord = serde_json::from_str(&line?)?;
            Example::from_record(record, answer_vocab_size)
        })
        .collect()
}

pub const SPLIT_FILES: [(&str, &str); 3] = [("train", "train.jsonl"), ("val", "val.jsonl"), ("test", "test.jsonl")];

impl DatasetBundle {
    pub fn split(&self, name: &str) -> Option<&[Example]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `spec.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, file) in SPLIT_FILES {
            let f = fs::File::create(dir.join(file))?;
            write_jsonl(self.split(name).unwrap_or_default(), f)?;
        }
        let mut spec = serde_json::to_string_pretty(&self.spec)?;
        spec.push('\n');
        fs::write(dir.join("spec.json"), spec)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: ChangingPriorsSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        spec.validate()?;
        let n = spec.answer_vocab().len();
        let read = |file: &str| read_jsonl(fs::File::open(dir.join(file))?, n);
        Ok(Self { train: read("train.jsonl")?, val: read("val.jsonl")?, test: read("test.jsonl")?, spec })
    }
}
