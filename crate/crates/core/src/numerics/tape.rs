//! Reverse-mode automatic differentiation on a per-question tape.
//!
//! Every operation evaluates eagerly, records itself on the tape, and returns
//! a `NodeId`. `backward` walks the tape once in reverse, propagating exact
//! analytic adjoints and accumulating parameter gradients into a `ParamStore`.
//! A tape is built for one forward pass and dropped afterwards; parameters
//! outlive tapes in the store.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use super::NumericsError;

pub type NodeId = usize;
pub type ParamId = usize;

/// Named parameter tensors with matching gradient accumulators.
///
/// Iteration order everywhere (optimizer steps, checkpoints) is sorted by
/// name, so runs with identical seeds are bit-for-bit reproducible.
#[derive(Clone, Debug)]
pub struct ParamStore {
    index: BTreeMap<String, ParamId>,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            index: BTreeMap::new(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumericsError> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(id)
    }

    /// Registers a parameter initialized uniformly in [-scale, scale].
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, NumericsError> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(name, Tensor::from_values(shape, values)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    /// Parameter ids sorted by name; the canonical traversal order.
    pub fn sorted_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let dst = self.grads[id].values_mut();
        for (d, s) in dst.iter_mut().zip(g.values()) {
            *d += s;
        }
    }

    fn accumulate_grad_row(&mut self, id: ParamId, row: usize, g: &Tensor) {
        let cols = self.grads[id].cols();
        let dst = &mut self.grads[id].values_mut()[row * cols..(row + 1) * cols];
        for (d, s) in dst.iter_mut().zip(g.values()) {
            *d += s;
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param { param: ParamId },
    /// One row of a rank-2 parameter; gradient scatters back into that row.
    ParamRow { param: ParamId, row: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    /// Vector times scalar node.
    ScaleBy { v: NodeId, s: NodeId },
    /// Vector divided by scalar node.
    DivBy { v: NodeId, s: NodeId },
    MatVec { m: NodeId, v: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Dot { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Norm { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Transpose { a: NodeId },
    /// Vectors stacked as matrix rows; inputs may repeat.
    StackRows { inputs: Vec<NodeId> },
    /// Rows (rank 2) or elements (rank 1) picked by index, repeats allowed.
    GatherRows { a: NodeId, indices: Vec<usize> },
    /// Copy of `base` with `rows` written at distinct row indices.
    ScatterRows {
        base: NodeId,
        rows: NodeId,
        indices: Vec<usize>,
    },
    ConcatCols { a: NodeId, b: NodeId },
    /// Vector repeated as every row of a matrix.
    BroadcastRows { v: NodeId },
    /// Matrix rows scaled by the matching weight-vector entry.
    ScaleRows { m: NodeId, w: NodeId },
    /// Rows (rank 2) or elements (rank 1) summed into their segment.
    SegmentSum {
        a: NodeId,
        segments: Vec<usize>,
    },
    /// Euclidean norm of every matrix row.
    RowNorms { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, NumericsError> {
        value.check_finite(op_name(&op))?;
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, NumericsError> {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, store: &ParamStore, param: ParamId) -> Result<NodeId, NumericsError> {
        self.push(Op::Param { param }, store.value(param).clone())
    }

    pub fn param_row(
        &mut self,
        store: &ParamStore,
        param: ParamId,
        row: usize,
    ) -> Result<NodeId, NumericsError> {
        let t = store.value(param);
        if t.shape().len() != 2 || row >= t.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "param_row",
                detail: format!("row {} of shape {:?}", row, t.shape()),
            });
        }
        let value = Tensor::vector(t.row(row));
        self.push(Op::ParamRow { param, row }, value)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(NumericsError::ShapeMismatch {
                op: op_name(&op),
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape().to_vec();
        let out = Tensor::from_values(&shape, values)?;
        self.push(op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_elementwise(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_elementwise(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_elementwise(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary_elementwise(a, b, Op::Div { a, b }, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let values = self.nodes[a].value.values().iter().map(|x| x + c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::AddScalar { a }, Tensor::from_values(&shape, values)?)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        let values = self.nodes[a].value.values().iter().map(|x| x * c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(Op::MulScalar { a, c }, Tensor::from_values(&shape, values)?)
    }

    /// Vector (or any tensor) scaled by a scalar node.
    pub fn scale_by(&mut self, v: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        let sv = self.scalar_value(s, "scale_by")?;
        let values = self.nodes[v].value.values().iter().map(|x| x * sv).collect();
        let shape = self.nodes[v].value.shape().to_vec();
        self.push(Op::ScaleBy { v, s }, Tensor::from_values(&shape, values)?)
    }

    /// Vector (or any tensor) divided by a scalar node.
    pub fn div_by(&mut self, v: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        let sv = self.scalar_value(s, "div_by")?;
        let values = self.nodes[v].value.values().iter().map(|x| x / sv).collect();
        let shape = self.nodes[v].value.shape().to_vec();
        self.push(Op::DivBy { v, s }, Tensor::from_values(&shape, values)?)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, NumericsError> {
        let (tm, tv) = (&self.nodes[m].value, &self.nodes[v].value);
        if tm.shape().len() != 2 || tv.shape().len() != 1 || tm.cols() != tv.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                detail: format!("{:?} x {:?}", tm.shape(), tv.shape()),
            });
        }
        let x = tv.values();
        let out: Vec<f64> = (0..tm.rows()).map(|i| dot_unrolled(tm.row(i), x)).collect();
        let rows = tm.rows();
        self.push(Op::MatVec { m, v }, Tensor::from_values(&[rows], out)?)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.values()[i * k + p];
                let brow = tb.row(p);
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        self.push(Op::MatMul { a, b }, Tensor::from_values(&[m, n], out)?)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let v = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot { a, b }, Tensor::scalar(v))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} ++ {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut values = ta.values().to_vec();
        values.extend_from_slice(tb.values());
        let n = values.len();
        self.push(Op::Concat { a, b }, Tensor::from_values(&[n], values)?)
    }

    fn unary(
        &mut self,
        a: NodeId,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<NodeId, NumericsError> {
        let values = self.nodes[a].value.values().iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push(op, Tensor::from_values(&shape, values)?)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Op::Sigmoid { a }, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, NumericsError> {
        self.unary(a, Op::LeakyRelu { a, slope }, |x| {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Op::Relu { a }, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.unary(a, Op::Exp { a }, f64::exp)
    }

    /// Euclidean norm, a scalar node. Gradient at the zero vector is zero.
    pub fn norm(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.nodes[a]
            .value
            .values()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        self.push(Op::Norm { a }, Tensor::scalar(v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.nodes[a].value.values().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(v))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[a].value;
        if t.numel() == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "mean",
                detail: "empty tensor".to_string(),
            });
        }
        let v = t.values().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean { a }, Tensor::scalar(v))
    }

    /// Cosine similarity built from dot, norm, and division primitives.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let d = self.dot(a, b)?;
        let na = self.norm(a)?;
        let nb = self.norm(b)?;
        let nn = self.mul(na, nb)?;
        self.div(d, nn)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[a].value;
        if t.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", t.shape()),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.values()[i * n + j];
            }
        }
        self.push(Op::Transpose { a }, Tensor::from_values(&[n, m], out)?)
    }

    /// Stacks equally sized vector nodes as the rows of a matrix. The same
    /// node may appear more than once; its gradient then sums over rows.
    pub fn stack_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "stack_rows",
                detail: "no rows".to_string(),
            });
        }
        let d = self.nodes[inputs[0]].value.numel();
        let mut out = Vec::with_capacity(inputs.len() * d);
        for &id in inputs {
            let t = &self.nodes[id].value;
            if t.shape().len() != 1 || t.numel() != d {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("row of shape {:?}, want [{d}]", t.shape()),
                });
            }
            out.extend_from_slice(t.values());
        }
        let rows = inputs.len();
        self.push(
            Op::StackRows {
                inputs: inputs.to_vec(),
            },
            Tensor::from_values(&[rows, d], out)?,
        )
    }

    /// Picks rows of a matrix (or elements of a vector) by index. Indices may
    /// repeat; gradients scatter-add back into the source.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[a].value;
        let (n, d) = match t.shape() {
            [n] => (*n, 1),
            [n, d] => (*n, *d),
            other => {
                return Err(NumericsError::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("{other:?}"),
                })
            }
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("index {bad} out of {n} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t.values()[i * d..(i + 1) * d]);
        }
        let shape: Vec<usize> = if t.shape().len() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), d]
        };
        self.push(
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            Tensor::from_values(&shape, out)?,
        )
    }

    /// Copy of `base` with row `indices[i]` replaced by row `i` of `rows`.
    /// Indices must be distinct: each output row has one well defined source.
    pub fn scatter_rows(
        &mut self,
        base: NodeId,
        rows: NodeId,
        indices: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let (tb, tr) = (&self.nodes[base].value, &self.nodes[rows].value);
        if tb.shape().len() != 2 || tr.shape().len() != 2 || tb.cols() != tr.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("{:?} <- {:?}", tb.shape(), tr.shape()),
            });
        }
        if tr.rows() != indices.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_rows",
                detail: format!("{} rows for {} indices", tr.rows(), indices.len()),
            });
        }
        let n = tb.rows();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n || seen[i] {
                return Err(NumericsError::ShapeMismatch {
                    op: "scatter_rows",
                    detail: format!("index {i} out of range or repeated"),
                });
            }
            seen[i] = true;
        }
        let d = tb.cols();
        let mut out = tb.values().to_vec();
        for (r, &i) in indices.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tr.values()[r * d..(r + 1) * d]);
        }
        self.push(
            Op::ScatterRows {
                base,
                rows,
                indices: indices.to_vec(),
            },
            Tensor::from_values(&[n, d], out)?,
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("{:?} ++ {:?}", ta.shape(), tb.shape()),
            });
        }
        let (n, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        self.push(Op::ConcatCols { a, b }, Tensor::from_values(&[n, p + q], out)?)
    }

    /// Repeats a vector as each of `rows` matrix rows; the gradient is the
    /// column sum over rows.
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[v].value;
        if t.shape().len() != 1 || rows == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("{:?} x {rows} rows", t.shape()),
            });
        }
        let d = t.numel();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(t.values());
        }
        self.push(Op::BroadcastRows { v }, Tensor::from_values(&[rows, d], out)?)
    }

    /// Scales row i of `m` by element i of `w`.
    pub fn scale_rows(&mut self, m: NodeId, w: NodeId) -> Result<NodeId, NumericsError> {
        let (tm, tw) = (&self.nodes[m].value, &self.nodes[w].value);
        if tm.shape().len() != 2 || tw.shape().len() != 1 || tm.rows() != tw.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{:?} * {:?}", tm.shape(), tw.shape()),
            });
        }
        let mut out = Vec::with_capacity(tm.numel());
        for (i, &wi) in tw.values().iter().enumerate() {
            out.extend(tm.row(i).iter().map(|x| x * wi));
        }
        let shape = tm.shape().to_vec();
        self.push(Op::ScaleRows { m, w }, Tensor::from_values(&shape, out)?)
    }

    /// Sums rows of a matrix (or elements of a vector) into `out_rows`
    /// segments: output row s is the sum over inputs with `segments[i] == s`.
    /// Empty segments come out zero.
    pub fn segment_sum(
        &mut self,
        a: NodeId,
        segments: &[usize],
        out_rows: usize,
    ) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[a].value;
        let (n, d) = match t.shape() {
            [n] => (*n, 1),
            [n, d] => (*n, *d),
            other => {
                return Err(NumericsError::ShapeMismatch {
                    op: "segment_sum",
                    detail: format!("{other:?}"),
                })
            }
        };
        if segments.len() != n || out_rows == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("{} segment ids for {n} rows into {out_rows}", segments.len()),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= out_rows) {
            return Err(NumericsError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("segment {bad} out of {out_rows}"),
            });
        }
        let mut out = vec![0.0; out_rows * d];
        for (i, &s) in segments.iter().enumerate() {
            let src = &t.values()[i * d..(i + 1) * d];
            let dst = &mut out[s * d..(s + 1) * d];
            for (o, v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
        let shape: Vec<usize> = if t.shape().len() == 1 {
            vec![out_rows]
        } else {
            vec![out_rows, d]
        };
        self.push(
            Op::SegmentSum {
                a,
                segments: segments.to_vec(),
            },
            Tensor::from_values(&shape, out)?,
        )
    }

    /// Euclidean norm of every row. Gradient of an all-zero row is zero.
    pub fn row_norms(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let t = &self.nodes[a].value;
        if t.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "row_norms",
                detail: format!("{:?}", t.shape()),
            });
        }
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rows = t.rows();
        self.push(Op::RowNorms { a }, Tensor::from_values(&[rows], out)?)
    }

    fn scalar_value(&self, s: NodeId, op: &'static str) -> Result<f64, NumericsError> {
        let t = &self.nodes[s].value;
        if !t.is_scalar() {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("expected scalar, got {:?}", t.shape()),
            });
        }
        Ok(t.item())
    }

    /// Reverse pass from a scalar loss node. Parameter gradients accumulate
    /// into `params`; calling twice without `zero_grads` doubles them.
    pub fn backward(&self, loss: NodeId, params: &mut ParamStore) -> Result<(), NumericsError> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.nodes[loss].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            g.check_finite("backward")?;
            let node = &self.nodes[idx];
            match node.op {
                Op::Const => {}
                Op::Param { param } => params.accumulate_grad(param, &g),
                Op::ParamRow { param, row } => params.accumulate_grad_row(param, row, &g),
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, a, g.values());
                    self.accumulate(&mut grads, b, g.values());
                }
                Op::Sub { a, b } => {
                    self.accumulate(&mut grads, a, g.values());
                    let neg: Vec<f64> = g.values().iter().map(|x| -x).collect();
                    self.accumulate(&mut grads, b, &neg);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(tb.values())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(ta.values())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Div { a, b } => {
                    let tb = &self.nodes[b].value;
                    let out = &node.value;
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(tb.values())
                        .map(|(gv, bv)| gv / bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(out.values().iter().zip(tb.values()))
                        .map(|(gv, (ov, bv))| -gv * ov / bv)
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::AddScalar { a } => self.accumulate(&mut grads, a, g.values()),
                Op::MulScalar { a, c } => {
                    let ga: Vec<f64> = g.values().iter().map(|gv| gv * c).collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::ScaleBy { v, s } => {
                    let sv = self.nodes[s].value.item();
                    let gv: Vec<f64> = g.values().iter().map(|x| x * sv).collect();
                    let gs = g
                        .values()
                        .iter()
                        .zip(self.nodes[v].value.values())
                        .map(|(gx, vx)| gx * vx)
                        .sum::<f64>();
                    self.accumulate(&mut grads, v, &gv);
                    self.accumulate(&mut grads, s, &[gs]);
                }
                Op::DivBy { v, s } => {
                    let sv = self.nodes[s].value.item();
                    let gv: Vec<f64> = g.values().iter().map(|x| x / sv).collect();
                    let gs = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(gx, ox)| -gx * ox / sv)
                        .sum::<f64>();
                    self.accumulate(&mut grads, v, &gv);
                    self.accumulate(&mut grads, s, &[gs]);
                }
                Op::MatVec { m, v } => {
                    let tm = &self.nodes[m].value;
                    let tv = &self.nodes[v].value;
                    let (rows, cols) = (tm.rows(), tm.cols());
                    let mut gm = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let gi = g.values()[i];
                        let dst = &mut gm[i * cols..(i + 1) * cols];
                        for (d, xv) in dst.iter_mut().zip(tv.values()) {
                            *d += gi * xv;
                        }
                    }
                    let mut gv = vec![0.0; cols];
                    for i in 0..rows {
                        let gi = g.values()[i];
                        for (d, mv) in gv.iter_mut().zip(tm.row(i)) {
                            *d += gi * mv;
                        }
                    }
                    self.accumulate(&mut grads, m, &gm);
                    self.accumulate(&mut grads, v, &gv);
                }
                Op::MatMul { a, b } => {
                    let ta = &self.nodes[a].value;
                    let tb = &self.nodes[b].value;
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g.values()[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = dot_unrolled(grow, tb.row(p));
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ta.values()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g.values()[i * n + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Dot { a, b } => {
                    let gv = g.item();
                    let ga: Vec<f64> =
                        self.nodes[b].value.values().iter().map(|x| gv * x).collect();
                    let gb: Vec<f64> =
                        self.nodes[a].value.values().iter().map(|x| gv * x).collect();
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a].value.numel();
                    self.accumulate(&mut grads, a, &g.values()[..na]);
                    self.accumulate(&mut grads, b, &g.values()[na..]);
                }
                Op::Tanh { a } => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Sigmoid { a } => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::LeakyRelu { a, slope } => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(self.nodes[a].value.values())
                        .map(|(gv, x)| if *x >= 0.0 { *gv } else { gv * slope })
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Relu { a } => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(self.nodes[a].value.values())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Exp { a } => {
                    let ga: Vec<f64> = g
                        .values()
                        .iter()
                        .zip(node.value.values())
                        .map(|(gv, y)| gv * y)
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Norm { a } => {
                    let n = node.value.item();
                    let gv = g.item();
                    let ga: Vec<f64> = if n == 0.0 {
                        vec![0.0; self.nodes[a].value.numel()]
                    } else {
                        self.nodes[a]
                            .value
                            .values()
                            .iter()
                            .map(|x| gv * x / n)
                            .collect()
                    };
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Sum { a } => {
                    let gv = g.item();
                    let ga = vec![gv; self.nodes[a].value.numel()];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a].value.numel();
                    let gv = g.item() / n as f64;
                    let ga = vec![gv; n];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Transpose { a } => {
                    let (n, m) = (node.value.rows(), node.value.cols());
                    let mut ga = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] = g.values()[i * m + j];
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::StackRows { ref inputs } => {
                    let d = node.value.cols();
                    for (r, &id) in inputs.iter().enumerate() {
                        self.accumulate(&mut grads, id, &g.values()[r * d..(r + 1) * d]);
                    }
                }
                Op::GatherRows { a, ref indices } => {
                    let src = &self.nodes[a].value;
                    let d = src.numel() / src.rows();
                    let mut ga = vec![0.0; src.numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        let gv = &g.values()[r * d..(r + 1) * d];
                        let dst = &mut ga[i * d..(i + 1) * d];
                        for (o, v) in dst.iter_mut().zip(gv) {
                            *o += v;
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::ScatterRows {
                    base,
                    rows,
                    ref indices,
                } => {
                    let d = node.value.cols();
                    let mut gb = g.values().to_vec();
                    let mut gr = Vec::with_capacity(indices.len() * d);
                    for &i in indices {
                        gr.extend_from_slice(&g.values()[i * d..(i + 1) * d]);
                        gb[i * d..(i + 1) * d].fill(0.0);
                    }
                    self.accumulate(&mut grads, base, &gb);
                    self.accumulate(&mut grads, rows, &gr);
                }
                Op::ConcatCols { a, b } => {
                    let (p, q) = (self.nodes[a].value.cols(), self.nodes[b].value.cols());
                    let n = node.value.rows();
                    let mut ga = Vec::with_capacity(n * p);
                    let mut gb = Vec::with_capacity(n * q);
                    for i in 0..n {
                        let row = &g.values()[i * (p + q)..(i + 1) * (p + q)];
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::BroadcastRows { v } => {
                    let d = node.value.cols();
                    let mut gv = vec![0.0; d];
                    for row in g.values().chunks_exact(d) {
                        for (o, x) in gv.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.accumulate(&mut grads, v, &gv);
                }
                Op::ScaleRows { m, w } => {
                    let tm = &self.nodes[m].value;
                    let tw = &self.nodes[w].value;
                    let d = tm.cols();
                    let mut gm = Vec::with_capacity(tm.numel());
                    let mut gw = Vec::with_capacity(tw.numel());
                    for (i, &wi) in tw.values().iter().enumerate() {
                        let grow = &g.values()[i * d..(i + 1) * d];
                        gm.extend(grow.iter().map(|x| x * wi));
                        gw.push(grow.iter().zip(tm.row(i)).map(|(x, y)| x * y).sum());
                    }
                    self.accumulate(&mut grads, m, &gm);
                    self.accumulate(&mut grads, w, &gw);
                }
                Op::SegmentSum { a, ref segments } => {
                    let src = &self.nodes[a].value;
                    let d = src.numel() / src.rows();
                    let mut ga = Vec::with_capacity(src.numel());
                    for &s in segments {
                        ga.extend_from_slice(&g.values()[s * d..(s + 1) * d]);
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::RowNorms { a } => {
                    let src = &self.nodes[a].value;
                    let d = src.cols();
                    let mut ga = Vec::with_capacity(src.numel());
                    for (i, (&ni, &gi)) in
                        node.value.values().iter().zip(g.values()).enumerate()
                    {
                        if ni == 0.0 {
                            ga.extend(std::iter::repeat(0.0).take(d));
                        } else {
                            ga.extend(src.row(i).iter().map(|x| gi * x / ni));
                        }
                    }
                    self.accumulate(&mut grads, a, &ga);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: &[f64]) {
        match &mut grads[id] {
            Some(t) => {
                for (d, s) in t.values_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.nodes[id].value.shape());
                t.values_mut().copy_from_slice(g);
                grads[id] = Some(t);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Dot product with four independent running sums in a fixed order: the
/// loop vectorizes, and results stay identical from run to run.
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let quads = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..quads {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in quads * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Param { .. } => "param",
        Op::ParamRow { .. } => "param_row",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::ScaleBy { .. } => "scale_by",
        Op::DivBy { .. } => "div_by",
        Op::MatVec { .. } => "matvec",
        Op::MatMul { .. } => "matmul",
        Op::Dot { .. } => "dot",
        Op::Concat { .. } => "concat",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Relu { .. } => "relu",
        Op::Exp { .. } => "exp",
        Op::Norm { .. } => "norm",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::Transpose { .. } => "transpose",
        Op::StackRows { .. } => "stack_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::BroadcastRows { .. } => "broadcast_rows",
        Op::ScaleRows { .. } => "scale_rows",
        Op::SegmentSum { .. } => "segment_sum",
        Op::RowNorms { .. } => "row_norms",
    }
}
