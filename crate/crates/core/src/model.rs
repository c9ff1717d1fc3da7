//! The composed two-input classifier and its question-only adversary.
//!
//! Parameters are split into five disjoint groups:
//!
//! * `theta_v`: image projection (`f_v`)
//! * `theta_q`: token embedding plus one linear/ReLU layer (`f_q`)
//! * `theta_z`: the two branch projections of the multiplicative fusion (`f_z`)
//! * `theta_vqa`: the answer classifier (`g_vqa`)
//! * `theta_adv`: the adversary MLP (`g_adv`), which sees only `q`
//!
//! `theta_q` is the only group reachable from both the answer loss and the
//! adversary loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "advreg-ckpt-v1";

/// Adversary depths and widths explored in the architecture grid.
pub const ADVERSARY_LAYER_GRID: [usize; 3] = [1, 2, 3];
pub const ADVERSARY_UNIT_GRID: [usize; 4] = [256, 512, 1024, 2048];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub question_vocab_size: usize,
    pub embed_dim: usize,
    pub question_hidden_dim: usize,
    pub image_input_dim: usize,
    pub fused_dim: usize,
    pub answer_vocab_size: usize,
    pub adversary_hidden_layers: usize,
    pub adversary_hidden_units: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            question_vocab_size: 64,
            embed_dim: 16,
            question_hidden_dim: 32,
            image_input_dim: 16,
            fused_dim: 32,
            answer_vocab_size: 26,
            adversary_hidden_layers: 2,
            adversary_hidden_units: 512,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("question_vocab_size", self.question_vocab_size),
            ("embed_dim", self.embed_dim),
            ("question_hidden_dim", self.question_hidden_dim),
            ("image_input_dim", self.image_input_dim),
            ("fused_dim", self.fused_dim),
            ("answer_vocab_size", self.answer_vocab_size),
            ("adversary_hidden_units", self.adversary_hidden_units),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !ADVERSARY_LAYER_GRID.contains(&self.adversary_hidden_layers) {
            return Err(Error::Config(format!(
                "adversary_hidden_layers must be 1, 2 or 3, got {}",
                self.adversary_hidden_layers
            )));
        }
        Ok(())
    }
}

/// The five parameter groups, in initialization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    V,
    Q,
    Z,
    Vqa,
    Adv,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::V, Group::Q, Group::Z, Group::Vqa, Group::Adv];
    /// Groups updated by the answer-model optimizer.
    pub const BASE: [Group; 4] = [Group::V, Group::Q, Group::Z, Group::Vqa];

    pub fn name(self) -> &'static str {
        match self {
            Group::V => "theta_v",
            Group::Q => "theta_q",
            Group::Z => "theta_z",
            Group::Vqa => "theta_vqa",
            Group::Adv => "theta_adv",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamGroup {
    entries: Vec<(String, Tensor)>,
}

impl ParamGroup {
    fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    groups: [ParamGroup; 5],
}

impl ModelParams {
    pub fn group(&self, g: Group) -> &ParamGroup {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        &mut self.groups[g.index()]
    }

    /// Mutable tensors of the four base groups and of the adversary, as
    /// disjoint borrows.
    pub fn base_and_adv_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let (base, adv) = self.groups.split_at_mut(Group::Adv.index());
        let base = base.iter_mut().flat_map(ParamGroup::tensors_mut).collect();
        (base, adv[0].tensors_mut().collect())
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let mut ids: [Vec<NodeId>; 5] = Default::default();
        for g in Group::ALL {
            for t in self.group(g).tensors() {
                ids[g.index()].push(tape.leaf(t.clone())?);
            }
        }
        Ok(BoundModel { config: self.config.clone(), ids })
    }

    pub fn save_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut groups = BTreeMap::new();
        for g in Group::ALL {
            let entries = self
                .group(g)
                .iter()
                .map(|(n, t)| {
                    let stored = StoredTensor { shape: t.shape().to_vec(), values: t.values().to_vec() };
                    (n.to_string(), stored)
                })
                .collect();
            groups.insert(g.name().to_string(), entries);
        }
        let file = CheckpointFile { format: CHECKPOINT_FORMAT.to_string(), config: self.config.clone(), groups };
        serde_json::to_writer(&mut out, &file)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(input: R) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_reader(input)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {:?}", file.format)));
        }
        let mut params = init_params(&file.config)?;
        for g in Group::ALL {
            let stored = file
                .groups
                .get(g.name())
                .ok_or_else(|| Error::Data(format!("checkpoint is missing group {}", g.name())))?;
            if stored.len() != params.group(g).len() {
                return Err(Error::Data(format!("checkpoint group {} has wrong arity", g.name())));
            }
            for (name, tensor) in params.group_mut(g).entries.iter_mut() {
                let s = stored
                    .get(name)
                    .ok_or_else(|| Error::Data(format!("checkpoint is missing {}/{name}", g.name())))?;
                if s.shape != tensor.shape() {
                    return Err(Error::Data(format!("checkpoint shape mismatch for {}/{name}", g.name())));
                }
                *tensor = Tensor::new(s.shape.clone(), s.values.clone())?;
            }
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    groups: BTreeMap<String, BTreeMap<String, StoredTensor>>,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("glorot shape")
}

/// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
/// Groups are drawn in the order v, q, z, vqa, adv, so the base-model
/// parameters do not depend on the adversary's shape.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut groups: [ParamGroup; 5] = Default::default();

    let v = &mut groups[Group::V.index()];
    v.push("w_image", glorot(&mut rng, c.image_input_dim, c.fused_dim));
    v.push("b_image", Tensor::zeros(vec![c.fused_dim]));

    let q = &mut groups[Group::Q.index()];
    q.push("embedding", glorot(&mut rng, c.question_vocab_size, c.embed_dim));
    q.push("w_question", glorot(&mut rng, c.embed_dim, c.question_hidden_dim));
    q.push("b_question", Tensor::zeros(vec![c.question_hidden_dim]));

    let z = &mut groups[Group::Z.index()];
    z.push("w_proj_v", glorot(&mut rng, c.fused_dim, c.fused_dim));
    z.push("b_proj_v", Tensor::zeros(vec![c.fused_dim]));
    z.push("w_proj_q", glorot(&mut rng, c.question_hidden_dim, c.fused_dim));
    z.push("b_proj_q", Tensor::zeros(vec![c.fused_dim]));

    let vqa = &mut groups[Group::Vqa.index()];
    vqa.push("w_answer", glorot(&mut rng, c.fused_dim, c.answer_vocab_size));
    vqa.push("b_answer", Tensor::zeros(vec![c.answer_vocab_size]));

    let adv = &mut groups[Group::Adv.index()];
    let mut width = c.question_hidden_dim;
    for layer in 0..c.adversary_hidden_layers {
        adv.push(format!("w_hidden{layer}"), glorot(&mut rng, width, c.adversary_hidden_units));
        adv.push(format!("b_hidden{layer}"), Tensor::zeros(vec![c.adversary_hidden_units]));
        width = c.adversary_hidden_units;
    }
    adv.push("w_answer", glorot(&mut rng, width, c.answer_vocab_size));
    adv.push("b_answer", Tensor::zeros(vec![c.answer_vocab_size]));

    Ok(ModelParams { config: config.clone(), groups })
}

/// How the adversary consumes the question features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reversal {
    /// Gradient reversal with the given `lambda_grl`.
    Grl(f64),
    /// Plain pass-through; used as a gradient oracle.
    Identity,
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    ids: [Vec<NodeId>; 5],
}

impl BoundModel {
    pub fn ids(&self, g: Group) -> &[NodeId] {
        &self.ids[g.index()]
    }

    /// Mean-pooled embedding followed by linear + ReLU. Returns
    /// `[batch x question_hidden_dim]`.
    pub fn encode_question(&self, tape: &mut Tape, tokens: &[Vec<usize>]) -> Result<NodeId> {
        let q = self.ids(Group::Q);
        let pooled = tape.embed_mean(q[0], tokens)?;
        let h = tape.linear(pooled, q[1], q[2])?;
        tape.relu(h)
    }

    /// Linear + ReLU projection of `[batch x image_input_dim]` features.
    pub fn encode_image(&self, tape: &mut Tape, images: &Tensor) -> Result<NodeId> {
        let cols = *images.shape().last().unwrap_or(&0);
        if cols != self.config.image_input_dim {
            return Err(Error::Data(format!(
                "image features have length {cols}, expected {}",
                self.config.image_input_dim
            )));
        }
        let x = tape.leaf(images.clone())?;
        let v = self.ids(Group::V);
        let h = tape.linear(x, v[0], v[1])?;
        tape.relu(h)
    }

    /// `relu(proj_v(v)) * relu(proj_q(q))`, elementwise.
    pub fn fuse(&self, tape: &mut Tape, v: NodeId, q: NodeId) -> Result<NodeId> {
        let z = self.ids(Group::Z);
        let pv = tape.linear(v, z[0], z[1]).map_err(as_contract)?;
        let pv = tape.relu(pv)?;
        let pq = tape.linear(q, z[2], z[3]).map_err(as_contract)?;
        let pq = tape.relu(pq)?;
        tape.mul(pv, pq).map_err(as_contract)
    }

    /// Answer log-probabilities from the fused representation.
    pub fn predict_vqa(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let p = self.ids(Group::Vqa);
        let logits = tape.linear(z, p[0], p[1])?;
        tape.log_softmax(logits)
    }

    /// Answer log-probabilities from the question features alone, behind the
    /// gradient reversal layer.
    pub fn predict_adv(&self, tape: &mut Tape, q: NodeId, reversal: Reversal) -> Result<NodeId> {
        let mut h = match reversal {
            Reversal::Grl(lambda) => tape.grl(q, lambda)?,
            Reversal::Identity => q,
        };
        let p = self.ids(Group::Adv);
        let hidden = self.config.adversary_hidden_layers;
        for layer in 0..hidden {
            let lin = tape.linear(h, p[2 * layer], p[2 * layer + 1])?;
            h = tape.relu(lin)?;
        }
        let logits = tape.linear(h, p[2 * hidden], p[2 * hidden + 1])?;
        tape.log_softmax(logits)
    }

    /// Full answer-model forward pass. Returns `(q, log_probs)`.
    pub fn forward_vqa(&self, tape: &mut Tape, images: &Tensor, tokens: &[Vec<usize>]) -> Result<(NodeId, NodeId)> {
        if images.shape()[0] != tokens.len() {
            return Err(Error::Dimension(format!(
                "{} image rows but {} questions",
                images.shape()[0],
                tokens.len()
            )));
        }
        let q = self.encode_question(tape, tokens)?;
        let v = self.encode_image(tape, images)?;
        let z = self.fuse(tape, v, q)?;
        Ok((q, self.predict_vqa(tape, z)?))
    }
}

fn as_contract(e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Contract(m),
        other => other,
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Answer predictions (argmax of the answer head) for a batch.
pub fn predict_answers(params: &ModelParams, images: &Tensor, tokens: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let (_, lp) = bound.forward_vqa(&mut tape, images, tokens)?;
    let lp = tape.value(lp);
    Ok((0..tokens.len()).map(|i| argmax(lp.row(i))).collect())
}
