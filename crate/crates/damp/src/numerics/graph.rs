use super::optim::ParameterStore;
use super::tensor::{matmul, Tensor};
use super::{NumericsError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a * x + b`, elementwise.
    Affine {
        x: NodeId,
        a: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    /// axis 0 stacks vertically, axis 1 horizontally.
    Concat {
        axis: usize,
        xs: Vec<NodeId>,
    },
    /// Row slice of a column vector.
    Slice {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over all entries of a column vector.
    Softmax(NodeId),
    Log(NodeId),
    Sum(Vec<NodeId>),
    /// Row `row` of `table`, returned as a column vector.
    Gather {
        table: NodeId,
        row: usize,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    /// `-log(dist[target])` for a column-vector distribution.
    CrossEntropy {
        dist: NodeId,
        target: usize,
    },
    /// Forward identity; backward multiplies the gradient by `-scale`.
    GradReverse {
        x: NodeId,
        scale: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eagerly-evaluated computation tape. Forward values are computed at node
/// creation; `backward` walks the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: HashMap<String, NodeId>,
    rng: ChaCha20Rng,
    train_mode: bool,
}

impl Graph {
    pub fn new(train_mode: bool, dropout_seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            param_ids: HashMap::new(),
            rng: ChaCha20Rng::seed_from_u64(dropout_seed),
            train_mode,
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Input, Tensor::scalar(v))
    }

    /// Leaf backed by a named store parameter; deduplicated per graph.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store
            .value(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?
            .clone();
        let id = self.push(Op::Param, value);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "elementwise_mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let t = &self.nodes[x].value;
        let data = t.data.iter().map(|v| a * v + b).collect();
        let value = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Affine { x, a }, value)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let k1 = if ta { va.rows } else { va.cols };
        let k2 = if tb { vb.cols } else { vb.rows };
        if k1 != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} (t={}) x {:?} (t={})", va.shape(), ta, vb.shape(), tb),
            ));
        }
        let value = matmul(va, ta, vb, tb);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    pub fn concat(&mut self, axis: usize, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "concat of zero nodes");
        let first = self.nodes[xs[0]].value.shape();
        let value = if axis == 0 {
            let cols = first.1;
            let mut data = Vec::new();
            let mut rows = 0;
            for &x in xs {
                let t = &self.nodes[x].value;
                if t.cols != cols {
                    return Err(shape_err("concat", format!("cols {} vs {}", t.cols, cols)));
                }
                rows += t.rows;
                data.extend_from_slice(&t.data);
            }
            Tensor::from_vec(rows, cols, data)
        } else {
            let rows = first.0;
            let mut cols = 0;
            for &x in xs {
                let t = &self.nodes[x].value;
                if t.rows != rows {
                    return Err(shape_err("concat", format!("rows {} vs {}", t.rows, rows)));
                }
                cols += t.cols;
            }
            let mut out = Tensor::zeros(rows, cols);
            let mut off = 0;
            for &x in xs {
                let t = &self.nodes[x].value;
                for r in 0..rows {
                    for c in 0..t.cols {
                        out.set(r, off + c, t.get(r, c));
                    }
                }
                off += t.cols;
            }
            out
        };
        Ok(self.push(
            Op::Concat {
                axis,
                xs: xs.to_vec(),
            },
            value,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.cols != 1 || start + len > t.rows {
            return Err(shape_err(
                "slice",
                format!("[{start}, {start}+{len}) of {:?}", t.shape()),
            ));
        }
        let value = Tensor::col(&t.data[start..start + len]);
        Ok(self.push(Op::Slice { x, start, len }, value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data = t.data.iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data = t.data.iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Tanh(x), value)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.nodes[x].value;
        if t.cols != 1 {
            return Err(shape_err("softmax", format!("expected column vector, got {:?}", t.shape())));
        }
        let max = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::col(&exps.iter().map(|e| e / z).collect::<Vec<_>>());
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x].value;
        let data = t.data.iter().map(|v| v.ln()).collect();
        let value = Tensor::from_vec(t.rows, t.cols, data);
        self.push(Op::Log(x), value)
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty(), "sum of zero nodes");
        let shape = self.nodes[xs[0]].value.shape();
        let mut value = Tensor::zeros(shape.0, shape.1);
        for &x in xs {
            let t = &self.nodes[x].value;
            if t.shape() != shape {
                return Err(shape_err("sum", format!("{:?} vs {:?}", t.shape(), shape)));
            }
            for (o, v) in value.data.iter_mut().zip(&t.data) {
                *o += v;
            }
        }
        Ok(self.push(Op::Sum(xs.to_vec()), value))
    }

    /// Row of an embedding table as a column vector.
    pub fn gather(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        if row >= t.rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "embedding_gather",
                index: row,
                bound: t.rows,
            });
        }
        let value = Tensor::col(t.row(row));
        Ok(self.push(Op::Gather { table, row }, value))
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::BadDropoutRate(rate));
        }
        if !self.train_mode || rate == 0.0 {
            return Ok(x);
        }
        let t = &self.nodes[x].value;
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..t.len())
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = t.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(t.rows, t.cols, data);
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    pub fn cross_entropy(&mut self, dist: NodeId, target: usize) -> Result<NodeId> {
        let t = &self.nodes[dist].value;
        if t.cols != 1 {
            return Err(shape_err(
                "cross_entropy",
                format!("expected column vector, got {:?}", t.shape()),
            ));
        }
        if target >= t.rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                bound: t.rows,
            });
        }
        let value = Tensor::scalar(-t.data[target].ln());
        Ok(self.push(Op::CrossEntropy { dist, target }, value))
    }

    pub fn grad_reverse(&mut self, x: NodeId, scale: f64) -> NodeId {
        let value = self.nodes[x].value.clone();
        self.push(Op::GradReverse { x, scale }, value)
    }

    /// Backprop from a scalar loss. Returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Tensor>> {
        let lt = &self.nodes[loss].value;
        if !lt.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[loss].data[0] = 1.0;
        for id in (0..=loss).rev() {
            if grads[id].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[id].clone();
            match self.nodes[id].op.clone() {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    acc(&mut grads[a], &g.data);
                    acc(&mut grads[b], &g.data);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[b].value.data)
                        .map(|(g, v)| g * v)
                        .collect();
                    let db: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[a].value.data)
                        .map(|(g, v)| g * v)
                        .collect();
                    acc(&mut grads[a], &da);
                    acc(&mut grads[b], &db);
                }
                Op::Affine { x, a } => {
                    let dx: Vec<f64> = g.data.iter().map(|g| g * a).collect();
                    acc(&mut grads[x], &dx);
                }
                Op::MatMul { a, b, ta, tb } => {
                    // dA' = dC · B'ᵀ, dB' = A'ᵀ · dC; un-transpose back.
                    let da_p = matmul(&g, false, &self.nodes[b].value, !tb);
                    let db_p = matmul(&self.nodes[a].value, !ta, &g, false);
                    let da = if ta { da_p.transpose() } else { da_p };
                    let db = if tb { db_p.transpose() } else { db_p };
                    acc(&mut grads[a], &da.data);
                    acc(&mut grads[b], &db.data);
                }
                Op::Concat { axis, xs } => {
                    if axis == 0 {
                        let mut off = 0;
                        for x in xs {
                            let n = self.nodes[x].value.len();
                            let part = g.data[off..off + n].to_vec();
                            acc(&mut grads[x], &part);
                            off += n;
                        }
                    } else {
                        let rows = g.rows;
                        let mut off = 0;
                        for x in xs {
                            let cols = self.nodes[x].value.cols;
                            let mut part = Tensor::zeros(rows, cols);
                            for r in 0..rows {
                                for c in 0..cols {
                                    part.set(r, c, g.get(r, off + c));
                                }
                            }
                            acc(&mut grads[x], &part.data);
                            off += cols;
                        }
                    }
                }
                Op::Slice { x, start, len } => {
                    for i in 0..len {
                        grads[x].data[start + i] += g.data[i];
                    }
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[id].value.data)
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    acc(&mut grads[x], &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[id].value.data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    acc(&mut grads[x], &dx);
                }
                Op::Softmax(x) => {
                    let y = &self.nodes[id].value.data;
                    let dot: f64 = g.data.iter().zip(y).map(|(g, y)| g * y).collect::<Vec<_>>().iter().sum();
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(y)
                        .map(|(g, y)| y * (g - dot))
                        .collect();
                    acc(&mut grads[x], &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.nodes[x].value.data)
                        .map(|(g, v)| g / v)
                        .collect();
                    acc(&mut grads[x], &dx);
                }
                Op::Sum(xs) => {
                    for x in xs {
                        acc(&mut grads[x], &g.data);
                    }
                }
                Op::Gather { table, row } => {
                    let cols = grads[table].cols;
                    for c in 0..cols {
                        grads[table].data[row * cols + c] += g.data[c];
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx: Vec<f64> = g.data.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads[x], &dx);
                }
                Op::CrossEntropy { dist, target } => {
                    let p = self.nodes[dist].value.data[target];
                    grads[dist].data[target] += -g.data[0] / p;
                }
                Op::GradReverse { x, scale } => {
                    let dx: Vec<f64> = g.data.iter().map(|g| -scale * g).collect();
                    acc(&mut grads[x], &dx);
                }
            }
        }
        Ok(grads)
    }

    /// Backward then accumulate parameter gradients into the store.
    pub fn backward_into(&mut self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (name, &id) in &self.param_ids {
            store.accumulate_grad(name, &grads[id]);
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn acc(t: &mut Tensor, d: &[f64]) {
    for (o, v) in t.data.iter_mut().zip(d) {
        *o += v;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new(false, 0);
        let x = g.scalar(0.0);
        let y = g.sigmoid(x);
        assert_eq!(g.scalar_value(y), 0.5);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::col(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5]);

        let x = g.input(Tensor::col(&[1.0, 2.0]));
        let y = g.softmax(x).unwrap();
        let v = &g.value(y).data;
        assert!((v[0] - 0.26894).abs() < 1e-5);
        assert!((v[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_is_simplex() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::col(&[-3.0, 0.2, 11.0, 4.5]));
        let y = g.softmax(x).unwrap();
        let v = g.value(y);
        assert!(v.data.iter().all(|&p| p >= 0.0));
        assert!((v.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_zero_iff_point_mass() {
        let mut g = Graph::new(false, 0);
        let d = g.input(Tensor::col(&[0.0, 1.0]));
        let ce = g.cross_entropy(d, 1).unwrap();
        assert_eq!(g.scalar_value(ce), 0.0);
        let d = g.input(Tensor::col(&[0.5, 0.5]));
        let ce = g.cross_entropy(d, 1).unwrap();
        assert!(g.scalar_value(ce) > 0.0);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut g = Graph::new(false, 7);
        let x = g.input(Tensor::col(&[1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.6).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn grad_reverse_flips_and_scales() {
        let mut g = Graph::new(false, 0);
        let x = g.scalar(2.0);
        let r = g.grad_reverse(x, 1.0);
        let grads = g.backward(r).unwrap();
        assert_eq!(grads[x].data[0], -1.0);

        let mut g = Graph::new(false, 0);
        let x = g.scalar(2.0);
        let r = g.grad_reverse(x, 0.0);
        let grads = g.backward(r).unwrap();
        assert_eq!(grads[x].data[0], 0.0);
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut g = Graph::new(false, 0);
        let a = g.input(Tensor::col(&[1.0, 2.0]));
        let b = g.input(Tensor::col(&[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }
}
