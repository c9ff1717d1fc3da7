//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! Every forward operation appends a node to a [`Tape`] and returns its
//! [`NodeId`]. [`Tape::backward`] walks the tape in reverse from a scalar
//! root and adds the resulting gradients into per-node accumulators.
//! Accumulators are only cleared by [`Tape::zero_grad`], so two backward
//! passes over the same tape can be inspected separately or summed.
//!
//! The gradient reversal op ([`Tape::grl`]) is the identity on the forward
//! pass and multiplies the upstream gradient by `-lambda` on the way back.

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], values: vec![value] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    /// Builds a `rows x cols` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// `(rows, cols)` for a 2-D tensor; a 1-D tensor is treated as one row.
    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected 1-D or 2-D tensor, got {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.values[i * cols..(i + 1) * cols]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    LogSoftmax { x: NodeId },
    Grl { x: NodeId, lambda: f64 },
    EmbedMean { table: NodeId, tokens: Vec<Vec<usize>> },
    Mul { a: NodeId, b: NodeId },
    MulConst { x: NodeId, c: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, k: f64 },
    Sum { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Relu { .. } => "relu",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Grl { .. } => "grl",
            Op::EmbedMean { .. } => "embed_mean",
            Op::Mul { .. } => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation record for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if value.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Contract(format!("node {} is not on this tape", id.0)))
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`, or `None` if no backward pass reached it
    /// since the last reset.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, with an unreached node reported as zeros.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.value(id).len()],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// On/off pattern of every ReLU node, in tape order. Two forward passes
    /// with the same pattern lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.0].value.values),
                _ => None,
            })
            .flat_map(|vals| vals.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// `x[B x I] * w[I x O] + b[O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, inner) = self.node(x)?.value.as_matrix()?;
        let wv = &self.node(w)?.value;
        let (w_in, out) = match wv.shape.as_slice() {
            [i, o] => (*i, *o),
            s => return Err(Error::Dimension(format!("weight must be 2-D, got {s:?}"))),
        };
        if w_in != inner {
            return Err(Error::Dimension(format!(
                "linear: input has {inner} columns but weight has {w_in} rows"
            )));
        }
        let bv = &self.node(b)?.value;
        if bv.len() != out {
            return Err(Error::Dimension(format!(
                "linear: bias has {} entries, expected {out}",
                bv.len()
            )));
        }
        let xs = &self.nodes[x.0].value.values;
        let ws = &wv.values;
        let mut y = Vec::with_capacity(rows * out);
        for i in 0..rows {
            y.extend_from_slice(&bv.values);
            let yrow = &mut y[i * out..(i + 1) * out];
            for (k, &xik) in xs[i * inner..(i + 1) * inner].iter().enumerate() {
                if xik == 0.0 {
                    continue;
                }
                for (yj, &wkj) in yrow.iter_mut().zip(&ws[k * out..(k + 1) * out]) {
                    *yj += xik * wkj;
                }
            }
        }
        self.push(Op::Linear { x, w, b }, Tensor { shape: vec![rows, out], values: y })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let values = xv.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = xv.shape.clone();
        self.push(Op::Relu { x }, Tensor { shape, values })
    }

    /// Row-wise log softmax with max subtraction.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let (rows, cols) = xv.as_matrix()?;
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &xv.values[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            values.extend(row.iter().map(|&v| v - lse));
        }
        let shape = xv.shape.clone();
        self.push(Op::LogSoftmax { x }, Tensor { shape, values })
    }

    /// Gradient reversal: forward identity, backward `-lambda * upstream`.
    pub fn grl(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda_grl must be finite and >= 0, got {lambda}")));
        }
        let value = self.node(x)?.value.clone();
        self.push(Op::Grl { x, lambda }, value)
    }

    /// Looks up one embedding row per token and averages them per sequence.
    /// Produces `[sequences x embed_dim]`.
    pub fn embed_mean(&mut self, table: NodeId, tokens: &[Vec<usize>]) -> Result<NodeId> {
        let tv = &self.node(table)?.value;
        let (vocab, dim) = match tv.shape.as_slice() {
            [v, d] => (*v, *d),
            s => return Err(Error::Dimension(format!("embedding table must be 2-D, got {s:?}"))),
        };
        if tokens.is_empty() {
            return Err(Error::Data("empty batch of token sequences".into()));
        }
        let mut values = vec![0.0; tokens.len() * dim];
        for (i, seq) in tokens.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("token sequence {i} is empty")));
            }
            let inv = 1.0 / seq.len() as f64;
            let out = &mut values[i * dim..(i + 1) * dim];
            for &tok in seq {
                if tok >= vocab {
                    return Err(Error::Data(format!("token id {tok} out of range for vocab {vocab}")));
                }
                for (o, &e) in out.iter_mut().zip(&tv.values[tok * dim..(tok + 1) * dim]) {
                    *o += e;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let op = Op::EmbedMean { table, tokens: tokens.to_vec() };
        self.push(op, Tensor { shape: vec![tokens.len(), dim], values })
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        let (sa, sb) = (&self.node(a)?.value.shape, &self.node(b)?.value.shape);
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, op.name())?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let values = av.values.iter().zip(&bv.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        self.push(op, Tensor { shape, values })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.shape != c.shape {
            return Err(Error::Dimension(format!(
                "mul_const: shapes {:?} and {:?} differ",
                xv.shape, c.shape
            )));
        }
        let values = xv.values.iter().zip(&c.values).map(|(a, b)| a * b).collect();
        let shape = xv.shape.clone();
        self.push(Op::MulConst { x, c: c.values.clone() }, Tensor { shape, values })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let values = xv.values.iter().map(|v| v * k).collect();
        let shape = xv.shape.clone();
        self.push(Op::Scale { x, k }, Tensor { shape, values })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.node(x)?.value.values.iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total))
    }

    /// Backpropagates from a scalar `root`, adding this pass's gradients to
    /// the accumulators of every node upstream of it.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_len = self.node(root)?.value.len();
        if root_len != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {} values",
                root_len
            )));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pass[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (rows, inner) = xv.as_matrix()?;
                    let out = wv.shape[1];
                    let mut dx = vec![0.0; rows * inner];
                    let mut dw = vec![0.0; inner * out];
                    let mut db = vec![0.0; out];
                    for r in 0..rows {
                        let grow = &g[r * out..(r + 1) * out];
                        for (dbj, &gj) in db.iter_mut().zip(grow) {
                            *dbj += gj;
                        }
                        for k in 0..inner {
                            let wrow = &wv.values[k * out..(k + 1) * out];
                            dx[r * inner + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            let xrk = xv.values[r * inner + k];
                            if xrk != 0.0 {
                                for (d, &gj) in dw[k * out..(k + 1) * out].iter_mut().zip(grow) {
                                    *d += xrk * gj;
                                }
                            }
                        }
                    }
                    let (x, w, b) = (*x, *w, *b);
                    accumulate(&mut pass, x, dx);
                    accumulate(&mut pass, w, dw);
                    accumulate(&mut pass, b, db);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value.values;
                    let dx = g.iter().zip(xv).map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 }).collect();
                    accumulate(&mut pass, *x, dx);
                }
                Op::LogSoftmax { x } => {
                    let (rows, cols) = node.value.as_matrix()?;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let out = &node.value.values[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            dx[r * cols + c] = grow[c] - out[c].exp() * gsum;
                        }
                    }
                    accumulate(&mut pass, *x, dx);
                }
                Op::Grl { x, lambda } => {
                    let dx = g.iter().map(|&gi| -lambda * gi).collect();
                    accumulate(&mut pass, *x, dx);
                }
                Op::EmbedMean { table, tokens } => {
                    let tv = &self.nodes[table.0].value;
                    let dim = tv.shape[1];
                    let mut dt = vec![0.0; tv.len()];
                    for (r, seq) in tokens.iter().enumerate() {
                        let inv = 1.0 / seq.len() as f64;
                        let grow = &g[r * dim..(r + 1) * dim];
                        for &tok in seq {
                            for (d, &gj) in dt[tok * dim..(tok + 1) * dim].iter_mut().zip(grow) {
                                *d += gj * inv;
                            }
                        }
                    }
                    accumulate(&mut pass, *table, dt);
                }
                Op::Mul { a, b } => {
                    let av = &self.nodes[a.0].value.values;
                    let bv = &self.nodes[b.0].value.values;
                    let da = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                    let db = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    let (a, b) = (*a, *b);
                    accumulate(&mut pass, a, da);
                    accumulate(&mut pass, b, db);
                }
                Op::MulConst { x, c } => {
                    let dx = g.iter().zip(c).map(|(gi, ci)| gi * ci).collect();
                    accumulate(&mut pass, *x, dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut pass, a, g.clone());
                    accumulate(&mut pass, b, g.clone());
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut pass, a, g.clone());
                    accumulate(&mut pass, b, neg);
                }
                Op::Scale { x, k } => {
                    let dx = g.iter().map(|gi| gi * k).collect();
                    accumulate(&mut pass, *x, dx);
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut pass, *x, vec![g[0]; n]);
                }
            }
            // Keep this pass's gradient for node i.
            pass[i] = Some(g);
        }

        for (acc, g) in self.grads.iter_mut().zip(pass) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *acc = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(pass: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut pass[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Euclidean norm of the concatenation of all gradient entries.
pub fn grad_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape, values).unwrap()).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_values() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn linear_identity_and_row_selection() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0]);

        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 0.0]);
        let w = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0, 5.0]);
        assert_eq!(tape.value(y).shape(), &[1, 2]);
    }

    #[test]
    fn linear_rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0; 3]);
        let w = leaf(&mut tape, vec![2, 2], vec![1.0; 4]);
        let b = leaf(&mut tape, vec![2], vec![0.0; 2]);
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dimension(_))));
        let w = leaf(&mut tape, vec![3, 2], vec![1.0; 6]);
        let b = leaf(&mut tape, vec![3], vec![0.0; 3]);
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);

        let pos = leaf(&mut tape, vec![3], vec![0.5, 1.0, 7.0]);
        let y = tape.relu(pos).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(pos).values());

        // upstream [5, 5] through relu at [-1, 2]
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![-1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        let y = tape.mul_const(y, &Tensor::vector(vec![5.0, 5.0])).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn log_softmax_cases() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let y = tape.log_softmax(x).unwrap();
        let half = 0.5f64.ln();
        assert_eq!(tape.value(y).values(), &[half, half]);

        let x = leaf(&mut tape, vec![1, 2], vec![1000.0, 0.0]);
        let y = tape.log_softmax(x).unwrap();
        let v = tape.value(y).values();
        assert!(v[0].abs() < 1e-300);
        assert!((v[1] + 1000.0).abs() < 1e-9);

        let x = leaf(&mut tape, vec![2, 5], vec![0.3, -1.2, 2.5, 0.0, 4.1, -3.0, 0.7, 1.1, 9.0, -0.4]);
        let y = tape.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grl_forward_identity_backward_scaled() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.5, -2.0]);
        for lambda in [0.0, 0.1, 1.0, 5.0] {
            let y = tape.grl(x, lambda).unwrap();
            assert_eq!(tape.value(y).values(), &[1.5, -2.0]);
        }

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.5, -2.0]);
        let y = tape.grl(x, 0.1).unwrap();
        let y = tape.mul_const(y, &Tensor::vector(vec![2.0, -4.0])).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[-0.1 * 2.0, -0.1 * -4.0]);
        assert!((g[0] + 0.2).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.5, -2.0]);
        let y = tape.grl(x, 0.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grl_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1.0]);
        assert!(matches!(tape.grl(x, -0.5), Err(Error::Parameter(_))));
        assert!(matches!(tape.grl(x, f64::NAN), Err(Error::Parameter(_))));
    }

    #[test]
    fn backward_square_and_disconnected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let p = leaf(&mut tape, vec![2], vec![1.0, 1.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        assert_eq!(tape.grad(p), None);
        assert_eq!(tape.grad_or_zeros(p), vec![0.0, 0.0]);
        assert_eq!(tape.grad(s).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn bias_gradient_of_summed_linear() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let w = leaf(&mut tape, vec![4, 4], (0..16).map(|i| (i as f64 * 0.11).cos()).collect());
        let b = leaf(&mut tape, vec![4], vec![0.1, -0.2, 0.3, 0.0]);
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn embed_mean_errors() {
        let mut tape = Tape::new();
        let t = leaf(&mut tape, vec![3, 2], vec![1.0; 6]);
        assert!(matches!(tape.embed_mean(t, &[vec![]]), Err(Error::Data(_))));
        assert!(matches!(tape.embed_mean(t, &[vec![3]]), Err(Error::Data(_))));
        let y = tape.embed_mean(t, &[vec![0, 2]]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1e300]);
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
        assert!(matches!(
            tape.leaf(Tensor::vector(vec![f64::NAN])),
            Err(Error::NonFinite { op: "leaf" })
        ));
    }

    #[test]
    fn grad_norm_cases() {
        assert_eq!(grad_norm([&[0.0, 0.0][..]]), 0.0);
        assert_eq!(grad_norm([&[3.0, 4.0][..]]), 5.0);
        assert_eq!(grad_norm([&[1.0, 0.0][..], &[0.0, 2.0, 2.0][..]]), 3.0);
    }
}
