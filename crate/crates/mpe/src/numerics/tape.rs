//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Expressions are built through [`Tape`] methods; forward values are
//! computed immediately and recorded, and [`Tape::backward`] replays the
//! tape in reverse to accumulate gradients with respect to every
//! [`Parameter`] leaf. The tape is single-threaded; values are plain
//! [`Tensor`]s in double precision.
//!
//! There is no implicit broadcasting: binary elementwise ops accept equal
//! shapes or a rank-0 scalar on one side, and matrix/vector alignment ops
//! (`add_to_rows`, `add_to_cols`, `lse_cols`, ...) are explicit.

use std::collections::BTreeMap;

use crate::error::NumericError;
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Index of a parameter within a [`ParamSet`].
pub type ParamId = usize;

/// A named tensor with a gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of model parameters. Order is insertion order and
/// fixed for the lifetime of a model, which keeps training deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId, NumericError> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(NumericError::InvalidTensor(format!(
                "duplicate parameter `{name}`"
            )));
        }
        if !value.all_finite() {
            return Err(NumericError::NonFinite { op: "param-init" });
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter, NumericError> {
        self.id_of(name)
            .map(|id| &self.entries[id])
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter, NumericError> {
        match self.id_of(name) {
            Some(id) => Ok(&mut self.entries[id]),
            None => Err(NumericError::UnknownParam(name.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.entries.iter_mut().enumerate()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add tape gradients into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (&pid, g) in &grads.by_param {
            let acc = self.entries[pid].grad.data_mut();
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
}

/// Gradients of a scalar with respect to parameter leaves, keyed by
/// parameter id. Parameters the scalar does not depend on are absent.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, pid: ParamId) -> Option<&Tensor> {
        self.by_param.get(&pid)
    }
}

enum Op {
    Const,
    Param(ParamId),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    Matmul(VarId, VarId),
    Transpose(VarId),
    Exp(VarId),
    Log(VarId),
    Sqrt(VarId),
    Abs(VarId),
    MaxElem(VarId, VarId),
    Relu(VarId),
    Sum(VarId),
    Mean(VarId),
    Dot(VarId, VarId),
    SqNorm(VarId),
    Softmax(VarId),
    SoftmaxRows(VarId),
    LogSumExp(VarId),
    LseCols(VarId),
    AddToRows(VarId, VarId),
    AddToCols(VarId, VarId),
    ConcatVec(Vec<VarId>),
    StackRows(Vec<VarId>),
    SelectRow(VarId, usize),
    GatherRows(VarId, Vec<usize>),
    Pick(VarId, Vec<(usize, usize)>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// The recording tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_events: usize,
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
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

    /// Number of nondifferentiable points (|x| or relu at exactly 0,
    /// elementwise-max ties) hit while building this tape.
    pub fn kink_events(&self) -> usize {
        self.kink_events
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<VarId, NumericError> {
        if !value.all_finite() {
            return Err(NumericError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<VarId, NumericError> {
        self.push(Op::Const, t, "const")
    }

    pub fn scalar(&mut self, v: f64) -> Result<VarId, NumericError> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf for a parameter; the current value is copied onto the tape.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<VarId, NumericError> {
        let pid = params
            .id_of(name)
            .ok_or_else(|| NumericError::UnknownParam(name.to_string()))?;
        let value = params.get(pid).value.clone();
        self.push(Op::Param(pid), value, "param")
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
        NumericError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    /// Elementwise combine allowing a rank-0 scalar on either side.
    fn zip_op(
        &mut self,
        a: VarId,
        b: VarId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId, NumericError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.same_shape(tb) {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|y| f(x, *y)).collect())?
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x, y)).collect())?
        } else {
            return Err(Self::shape_err(name, ta, tb));
        };
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| -x).collect())?;
        self.push(Op::Neg(a), value, "neg")
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push(Op::Scale(a, c), value, "scale")
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect())?;
        self.push(Op::AddConst(a), value, "add_const")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let value = matmul_raw(ta, tb);
        self.push(Op::Matmul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 {
            return Err(NumericError::InvalidTensor(format!(
                "transpose on shape {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.at2(i, j);
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push(Op::Transpose(a), value, "transpose")
    }

    fn map_op(
        &mut self,
        a: VarId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())?;
        self.push(op, value, name)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumericError> {
        self.map_op(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId, NumericError> {
        self.map_op(a, "log", f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, NumericError> {
        self.map_op(a, "sqrt", f64::sqrt, Op::Sqrt(a))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: VarId) -> Result<VarId, NumericError> {
        if self.nodes[a.0].value.data().iter().any(|x| *x == 0.0) {
            self.kink_events += 1;
        }
        self.map_op(a, "abs", f64::abs, Op::Abs(a))
    }

    /// Elementwise maximum; on ties the gradient goes to the first input.
    pub fn max_elem(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(Self::shape_err("max_elem", ta, tb));
        }
        if ta.data().iter().zip(tb.data()).any(|(x, y)| x == y) {
            self.kink_events += 1;
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::MaxElem(a, b), value, "max_elem")
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, NumericError> {
        if self.nodes[a.0].value.data().iter().any(|x| *x == 0.0) {
            self.kink_events += 1;
        }
        self.map_op(a, "relu", |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(NumericError::InvalidTensor("mean of empty tensor".into()));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 1 || tb.rank() != 1 || ta.len() != tb.len() {
            return Err(Self::shape_err("dot", ta, tb));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s), "dot")
    }

    /// Squared Euclidean norm (sum of squared entries).
    pub fn sq_norm(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        self.push(Op::SqNorm(a), Tensor::scalar(s), "sq_norm")
    }

    pub fn softmax(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 || t.is_empty() {
            return Err(NumericError::InvalidTensor(format!(
                "softmax needs a non-empty vector, got {:?}",
                t.shape()
            )));
        }
        let value = Tensor::from_vec(softmax_slice(t.data()));
        self.push(Op::Softmax(a), value, "softmax")
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 || t.cols() == 0 {
            return Err(NumericError::InvalidTensor(format!(
                "softmax_rows needs a 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            data.extend(softmax_slice(t.row(i)));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::SoftmaxRows(a), value, "softmax_rows")
    }

    pub fn log_sum_exp(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 1 || t.is_empty() {
            return Err(NumericError::InvalidTensor(format!(
                "log_sum_exp needs a non-empty vector, got {:?}",
                t.shape()
            )));
        }
        let v = crate::numerics::tensor::log_sum_exp(t.data());
        self.push(Op::LogSumExp(a), Tensor::scalar(v), "log_sum_exp")
    }

    /// Per-column log-sum-exp of a 2-D tensor: out[j] = LSE_i m[i][j].
    pub fn lse_cols(&mut self, a: VarId) -> Result<VarId, NumericError> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 2 || t.rows() == 0 {
            return Err(NumericError::InvalidTensor(format!(
                "lse_cols needs a non-empty 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = t.at2(i, j);
            }
            out[j] = crate::numerics::tensor::log_sum_exp(&col);
        }
        self.push(Op::LseCols(a), Tensor::from_vec(out), "lse_cols")
    }

    /// out[i][j] = m[i][j] + v[j] (adds a vector to every row).
    pub fn add_to_rows(&mut self, m: VarId, v: VarId) -> Result<VarId, NumericError> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.len() {
            return Err(Self::shape_err("add_to_rows", tm, tv));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + tv.data()[k % c])
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        self.push(Op::AddToRows(m, v), value, "add_to_rows")
    }

    /// out[i][j] = m[i][j] + v[i] (adds a vector down every column).
    pub fn add_to_cols(&mut self, m: VarId, v: VarId) -> Result<VarId, NumericError> {
        let (tm, tv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if tm.rank() != 2 || tv.rank() != 1 || tm.rows() != tv.len() {
            return Err(Self::shape_err("add_to_cols", tm, tv));
        }
        let c = tm.cols();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + tv.data()[k / c])
            .collect();
        let value = Tensor::new(tm.shape().to_vec(), data)?;
        self.push(Op::AddToCols(m, v), value, "add_to_cols")
    }

    /// Concatenate vectors (rank-0 scalars count as length 1) into one
    /// vector.
    pub fn concat_vec(&mut self, parts: &[VarId]) -> Result<VarId, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidTensor("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() > 1 {
                return Err(NumericError::InvalidTensor(format!(
                    "concat_vec needs vectors, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatVec(parts.to_vec()),
            Tensor::from_vec(data),
            "concat_vec",
        )
    }

    /// Stack equal-length 1-D vectors as the rows of a 2-D tensor.
    pub fn stack_rows(&mut self, parts: &[VarId]) -> Result<VarId, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidTensor("stack of nothing".into()));
        }
        let c = self.nodes[parts[0].0].value.len();
        let mut data = Vec::with_capacity(parts.len() * c);
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 1 || t.len() != c {
                return Err(NumericError::InvalidTensor(format!(
                    "stack_rows needs equal-length vectors, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![parts.len(), c], data)?;
        self.push(Op::StackRows(parts.to_vec()), value, "stack_rows")
    }

    /// Row `r` of a 2-D tensor as a vector.
    pub fn select_row(&mut self, m: VarId, r: usize) -> Result<VarId, NumericError> {
        let t = &self.nodes[m.0].value;
        if t.rank() != 2 || r >= t.rows() {
            return Err(NumericError::InvalidTensor(format!(
                "select_row {r} on shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::from_vec(t.row(r).to_vec());
        self.push(Op::SelectRow(m, r), value, "select_row")
    }

    /// Gather rows (with repeats allowed) into a new 2-D tensor; the
    /// embedding-lookup primitive. Gradients scatter-add back.
    pub fn gather_rows(&mut self, m: VarId, idxs: &[usize]) -> Result<VarId, NumericError> {
        let t = &self.nodes[m.0].value;
        if t.rank() != 2 {
            return Err(NumericError::InvalidTensor(format!(
                "gather_rows on shape {:?}",
                t.shape()
            )));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idxs.len() * c);
        for &i in idxs {
            if i >= t.rows() {
                return Err(NumericError::InvalidTensor(format!(
                    "gather_rows index {i} out of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idxs.len(), c], data)?;
        self.push(Op::GatherRows(m, idxs.to_vec()), value, "gather_rows")
    }

    /// Pick individual (row, col) entries of a 2-D tensor into a vector.
    pub fn pick(&mut self, m: VarId, coords: &[(usize, usize)]) -> Result<VarId, NumericError> {
        let t = &self.nodes[m.0].value;
        if t.rank() != 2 {
            return Err(NumericError::InvalidTensor(format!(
                "pick on shape {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= t.rows() || c >= t.cols() {
                return Err(NumericError::InvalidTensor(format!(
                    "pick ({r},{c}) out of shape {:?}",
                    t.shape()
                )));
            }
            data.push(t.at2(r, c));
        }
        self.push(
            Op::Pick(m, coords.to_vec()),
            Tensor::from_vec(data),
            "pick",
        )
    }

    /// Reverse pass from a scalar root. Returns gradients keyed by
    /// parameter id; parameters the root does not depend on are absent.
    pub fn backward(&mut self, root: VarId) -> Result<Gradients, NumericError> {
        let root_t = &self.nodes[root.0].value;
        if !root_t.is_scalar() {
            return Err(NumericError::InvalidTensor(format!(
                "backward root must be scalar, got shape {:?}",
                root_t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(root_t.shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            macro_rules! acc {
                ($vid:expr, $tensor:expr) => {{
                    let vid: VarId = $vid;
                    let t: Tensor = $tensor;
                    match &mut grads[vid.0] {
                        Some(existing) => {
                            for (a, b) in existing.data_mut().iter_mut().zip(t.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(t),
                    }
                }};
            }
            // Gradient of `g` w.r.t. a possibly-scalar operand of an
            // elementwise op: reduce to a scalar sum when needed.
            macro_rules! acc_zip {
                ($vid:expr, $iter:expr) => {{
                    let vid: VarId = $vid;
                    let contrib: Vec<f64> = $iter;
                    let shape = self.nodes[vid.0].value.shape().to_vec();
                    if self.nodes[vid.0].value.is_scalar() && contrib.len() > 1 {
                        let s: f64 = contrib.iter().sum();
                        acc!(vid, Tensor::new(shape, vec![s])?);
                    } else {
                        acc!(vid, Tensor::new(shape, contrib)?);
                    }
                }};
            }

            let value = &self.nodes[i].value;
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => {
                    let entry = out
                        .by_param
                        .entry(*pid)
                        .or_insert_with(|| Tensor::zeros(value.shape()));
                    for (a, b) in entry.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc_zip!(a, g.data().to_vec());
                    acc_zip!(b, g.data().to_vec());
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * pick_bc(&tb, k))
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * pick_bc(&ta, k))
                        .collect();
                    acc_zip!(a, da);
                    acc_zip!(b, db);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv / pick_bc(&tb, k))
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| {
                            let bv = pick_bc(&tb, k);
                            -gv * pick_bc(&ta, k) / (bv * bv)
                        })
                        .collect();
                    acc_zip!(a, da);
                    acc_zip!(b, db);
                }
                Op::Neg(a) => {
                    let a = *a;
                    acc_zip!(a, g.data().iter().map(|x| -x).collect());
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    acc_zip!(a, g.data().iter().map(|x| x * c).collect());
                }
                Op::AddConst(a) => {
                    let a = *a;
                    acc_zip!(a, g.data().to_vec());
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    // dA = G B^T ; dB = A^T G
                    let da = matmul_nt(&g, &tb);
                    let db = matmul_tn(&ta, &g);
                    acc!(a, da);
                    acc!(b, db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (g.rows(), g.cols());
                    let mut data = vec![0.0; r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            data[j * r + i2] = g.at2(i2, j);
                        }
                    }
                    acc!(a, Tensor::new(vec![c, r], data)?);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let out_v = value.clone();
                    acc_zip!(
                        a,
                        g.data()
                            .iter()
                            .zip(out_v.data())
                            .map(|(gv, ov)| gv * ov)
                            .collect()
                    );
                }
                Op::Log(a) => {
                    let a = *a;
                    let ta = self.nodes[a.0].value.clone();
                    acc_zip!(
                        a,
                        g.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(gv, xv)| gv / xv)
                            .collect()
                    );
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let out_v = value.clone();
                    acc_zip!(
                        a,
                        g.data()
                            .iter()
                            .zip(out_v.data())
                            .map(|(gv, ov)| gv * 0.5 / ov)
                            .collect()
                    );
                }
                Op::Abs(a) => {
                    let a = *a;
                    let ta = self.nodes[a.0].value.clone();
                    acc_zip!(
                        a,
                        g.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(gv, xv)| {
                                if *xv > 0.0 {
                                    *gv
                                } else if *xv < 0.0 {
                                    -gv
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    );
                }
                Op::MaxElem(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (x, y))| if x >= y { *gv } else { 0.0 })
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (x, y))| if y > x { *gv } else { 0.0 })
                        .collect();
                    acc_zip!(a, da);
                    acc_zip!(b, db);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ta = self.nodes[a.0].value.clone();
                    acc_zip!(
                        a,
                        g.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect()
                    );
                }
                Op::Sum(a) => {
                    let a = *a;
                    let g0 = g.data()[0];
                    let n = self.nodes[a.0].value.len();
                    acc_zip!(a, vec![g0; n]);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.nodes[a.0].value.len();
                    let g0 = g.data()[0] / n as f64;
                    acc_zip!(a, vec![g0; n]);
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let g0 = g.data()[0];
                    let ta = self.nodes[a.0].value.clone();
                    let tb = self.nodes[b.0].value.clone();
                    acc_zip!(a, tb.data().iter().map(|y| g0 * y).collect());
                    acc_zip!(b, ta.data().iter().map(|x| g0 * x).collect());
                }
                Op::SqNorm(a) => {
                    let a = *a;
                    let g0 = g.data()[0];
                    let ta = self.nodes[a.0].value.clone();
                    acc_zip!(a, ta.data().iter().map(|x| g0 * 2.0 * x).collect());
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let s = value.clone();
                    let inner: f64 = g.data().iter().zip(s.data()).map(|(gv, sv)| gv * sv).sum();
                    acc_zip!(
                        a,
                        s.data()
                            .iter()
                            .zip(g.data())
                            .map(|(sv, gv)| sv * (gv - inner))
                            .collect()
                    );
                }
                Op::SoftmaxRows(a) => {
                    let a = *a;
                    let s = value.clone();
                    let (r, c) = (s.rows(), s.cols());
                    let mut da = vec![0.0; r * c];
                    for i2 in 0..r {
                        let srow = s.row(i2);
                        let grow = &g.data()[i2 * c..(i2 + 1) * c];
                        let inner: f64 = grow.iter().zip(srow).map(|(gv, sv)| gv * sv).sum();
                        for j in 0..c {
                            da[i2 * c + j] = srow[j] * (grow[j] - inner);
                        }
                    }
                    acc!(a, Tensor::new(vec![r, c], da)?);
                }
                Op::LogSumExp(a) => {
                    let a = *a;
                    let g0 = g.data()[0];
                    let ta = self.nodes[a.0].value.clone();
                    let sm = softmax_slice(ta.data());
                    acc_zip!(a, sm.iter().map(|s| g0 * s).collect());
                }
                Op::LseCols(a) => {
                    let a = *a;
                    let ta = self.nodes[a.0].value.clone();
                    let out_v = value.clone();
                    let (r, c) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; r * c];
                    for j in 0..c {
                        let gj = g.data()[j];
                        for i2 in 0..r {
                            da[i2 * c + j] = gj * (ta.at2(i2, j) - out_v.data()[j]).exp();
                        }
                    }
                    acc!(a, Tensor::new(vec![r, c], da)?);
                }
                Op::AddToRows(m, v) => {
                    let (m, v) = (*m, *v);
                    let c = self.nodes[m.0].value.cols();
                    let mut dv = vec![0.0; c];
                    for (k, gv) in g.data().iter().enumerate() {
                        dv[k % c] += gv;
                    }
                    acc!(m, g.clone());
                    acc!(v, Tensor::from_vec(dv));
                }
                Op::AddToCols(m, v) => {
                    let (m, v) = (*m, *v);
                    let (r, c) = (self.nodes[m.0].value.rows(), self.nodes[m.0].value.cols());
                    let mut dv = vec![0.0; r];
                    for (k, gv) in g.data().iter().enumerate() {
                        dv[k / c] += gv;
                    }
                    acc!(m, g.clone());
                    acc!(v, Tensor::from_vec(dv));
                }
                Op::ConcatVec(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        let n = self.nodes[p.0].value.len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        acc!(p, Tensor::new(shape, slice)?);
                        offset += n;
                    }
                }
                Op::StackRows(parts) => {
                    let parts = parts.clone();
                    let c = g.cols();
                    for (k, p) in parts.into_iter().enumerate() {
                        acc!(p, Tensor::from_vec(g.data()[k * c..(k + 1) * c].to_vec()));
                    }
                }
                Op::SelectRow(m, r) => {
                    let (m, r) = (*m, *r);
                    let src = &self.nodes[m.0].value;
                    let mut dm = Tensor::zeros(src.shape());
                    let c = src.cols();
                    dm.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                    acc!(m, dm);
                }
                Op::GatherRows(m, idxs) => {
                    let (m, idxs) = (*m, idxs.clone());
                    let src_shape = self.nodes[m.0].value.shape().to_vec();
                    let c = src_shape[1];
                    let mut dm = Tensor::zeros(&src_shape);
                    for (k, &i2) in idxs.iter().enumerate() {
                        for j in 0..c {
                            dm.data_mut()[i2 * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc!(m, dm);
                }
                Op::Pick(m, coords) => {
                    let (m, coords) = (*m, coords.clone());
                    let src_shape = self.nodes[m.0].value.shape().to_vec();
                    let c = src_shape[1];
                    let mut dm = Tensor::zeros(&src_shape);
                    for (k, &(r, cc)) in coords.iter().enumerate() {
                        dm.data_mut()[r * c + cc] += g.data()[k];
                    }
                    acc!(m, dm);
                }
            }
        }

        for g in out.by_param.values() {
            if !g.all_finite() {
                return Err(NumericError::NonFinite { op: "backward" });
            }
        }
        Ok(out)
    }
}

/// Value at flat index `k`, reading a rank-0 scalar as a constant.
fn pick_bc(t: &Tensor, k: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[k]
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("matmul shape")
}

/// G · B^T for backward passes.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (g.rows(), g.cols(), b.rows());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            let grow = &g.data()[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    Tensor::new(vec![m, k], out).expect("matmul shape")
}

/// A^T · G for backward passes.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("matmul shape")
}

/// Build an expression, run one forward/backward pass, and accumulate
/// gradients into the parameter set. Returns the scalar value.
pub fn forward_backward<F>(params: &mut ParamSet, build: F) -> Result<f64, NumericError>
where
    F: FnOnce(&mut Tape, &ParamSet) -> Result<VarId, NumericError>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let value = tape.value(root).item()?;
    let grads = tape.backward(root)?;
    params.accumulate(&grads);
    Ok(value)
}
