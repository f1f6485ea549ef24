use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive tags, used for error messages and adjoint fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Transpose,
    Reshape,
    Concat,
    SelectRows,
    SliceCols,
    Gather,
    Sum,
    Mean,
    SumLast,
    Log,
    Exp,
    Relu,
    Gelu,
    Clamp,
    Embedding,
    MaskedFill,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2Normalize,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulBt => "matmul_bt",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::SelectRows => "select_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Gather => "gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLast => "sum_last",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Clamp => "clamp",
            OpKind::Embedding => "embedding",
            OpKind::MaskedFill => "masked_fill",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        b: Var,
    },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        axis: usize,
    },
    SelectRows {
        a: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulBt { .. } => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumLast(..) => OpKind::SumLast,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward recording.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and a reverse sweep is a valid topological order.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape whose leaves never require gradients (inference).
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Negates the adjoint of every `kind` node during backward.
    ///
    /// Only meant for mutation-style self tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
                node: id,
            });
        }
        let requires_grad = match op {
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Records a trainable leaf (gradients are tracked unless the tape is in
    /// inference mode).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, &[])?;
        self.nodes[v.0].requires_grad = self.grad_enabled;
        Ok(v)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, &[])
    }

    /// Registers every parameter of `set` as a leaf on this tape.
    pub fn bind_params(&mut self, set: &ParamSet) -> Result<()> {
        self.params = Vec::with_capacity(set.len());
        for id in set.ids() {
            let v = self.leaf(set.get(id).clone())?;
            self.params.push(Some(v));
        }
        Ok(())
    }

    /// Uses existing leaves as the parameter table, in `ParamSet` order.
    pub fn set_param_vars(&mut self, vars: Vec<Var>) {
        self.params = vars.into_iter().map(Some).collect();
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .expect("parameter used before bind_params")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul", self.value(a))?;
        let (k2, n) = check_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul_bt", self.value(a))?;
        let (n, k2) = check_rank2("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("inner dimensions disagree: {:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMulBt { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = check_rank2("transpose", self.value(a))?;
        let av = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = av[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        self.push(value, Op::Transpose { a, rows, cols }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let value = Tensor::new(shape.to_vec(), data)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push(value, Op::Reshape(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-D vector to every row of a `…×D` tensor.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(b).rank() != 1 || self.value(b).numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("cannot broadcast {:?} over {:?}", self.shape(b), self.shape(x)),
            ));
        }
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(p, q)| p + q))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddRow { x, b }, &[x, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::ln);
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let value = self.map(a, |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { a, lo, hi }, &[a])
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} entries for shape {:?}", mask.len(), self.shape(a)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::MaskedFill { a, mask: mask.to_vec() }, &[a])
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn zero_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let cols = self.value(a).cols();
        if keep.len() != self.value(a).rows() {
            return Err(Error::shape(
                "zero_rows",
                format!("{} row flags for shape {:?}", keep.len(), self.shape(a)),
            ));
        }
        let mask: Vec<bool> = keep.iter().flat_map(|&k| std::iter::repeat_n(!k, cols)).collect();
        self.masked_fill(a, &mask, 0.0)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape(
                "concat",
                format!("{} parts along axis {axis}", parts.len()),
            ));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(check_rank2("concat", self.value(p))?);
        }
        let (r0, c0) = dims[0];
        let out_shape;
        let mut data;
        if axis == 0 {
            if let Some(bad) = dims.iter().position(|&(_, c)| c != c0) {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "column mismatch: {:?} vs {:?}",
                        self.shape(parts[0]),
                        self.shape(parts[bad])
                    ),
                ));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            out_shape = vec![rows, c0];
        } else {
            if let Some(bad) = dims.iter().position(|&(r, _)| r != r0) {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "row mismatch: {:?} vs {:?}",
                        self.shape(parts[0]),
                        self.shape(parts[bad])
                    ),
                ));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            out_shape = vec![r0, cols];
        }
        let sizes = parts
            .iter()
            .zip(&dims)
            .map(|(&p, &(r, c))| (p, if axis == 0 { r } else { c }))
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Concat { parts: sizes, axis }, parts)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = check_rank2("select_rows", self.value(a))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "select_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        self.push(value, Op::SelectRows { a, idx: idx.to_vec() }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = check_rank2("slice_cols", self.value(a))?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {cols}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push(value, Op::SliceCols { a, start }, &[a])
    }

    /// Picks `a[i][idx[i]]` for every row, producing a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = check_rank2("gather", self.value(a))?;
        if idx.len() != rows {
            return Err(Error::shape("gather", format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::shape("gather", format!("column {bad} out of range for {cols}")));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| self.value(a).at(i, j)).collect();
        let value = Tensor::new(vec![rows], data)?;
        self.push(value, Op::Gather { a, idx: idx.to_vec() }, &[a])
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = check_rank2("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for vocabulary {vocab}"),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(a), &[a])
    }

    /// Sums along the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::shape("sum_last", "scalar has no last axis"));
        }
        let cols = t.cols();
        let data: Vec<f64> = if cols == 0 {
            vec![0.0; t.rows()]
        } else {
            t.data().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SumLast(a), &[a])
    }

    // ---- normalization --------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, None)
    }

    /// Softmax along the last axis. Positions where `key_mask` is false are
    /// treated as −∞ logits and receive exactly zero probability.
    pub fn softmax_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if t.rank() == 0 || n == 0 {
            return Err(Error::shape(
                "softmax",
                format!("empty softmax axis in {:?}", t.shape()),
            ));
        }
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for axis of {n}", mask.len()),
                ));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::Contract("softmax with every key masked".into()));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; t.numel()];
        for (row, orow) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, (o, &x)) in orow.iter_mut().zip(row).enumerate() {
                if keep(j) {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if t.rank() == 0 || n == 0 {
            return Err(Error::shape("log_softmax", format!("empty axis in {:?}", t.shape())));
        }
        let mut out = vec![0.0; t.numel()];
        for (row, orow) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if t.rank() == 0 || d == 0 {
            return Err(Error::shape("layer_norm", format!("bad input shape {:?}", t.shape())));
        }
        for p in [gamma, beta] {
            if self.value(p).rank() != 1 || self.value(p).numel() != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!("affine parameter {:?} for feature size {d}", self.shape(p)),
                ));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for (i, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Scales every last-axis vector to unit Euclidean norm; vectors shorter
    /// than `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = t.cols();
        if t.rank() == 0 || d == 0 {
            return Err(Error::shape("l2_normalize", format!("bad input shape {:?}", t.shape())));
        }
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            out.extend(row.iter().map(|v| v / denom));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::L2Normalize { a, norms, eps }, &[a])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad && i != loss.0 {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(node, &g, &mut grads);
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                // dA = dC · Bᵀ
                self.accum(grads, a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &bv[l * n..(l + 1) * n];
                            da[i * k + l] += grow.iter().zip(brow).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.accum(grads, b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let x = av[i * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, &q) in db[l * n..(l + 1) * n].iter_mut().zip(grow) {
                                *d += x * q;
                            }
                        }
                    }
                });
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                // dA = dC · B
                self.accum(grads, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for (d, &q) in da[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += c * q;
                            }
                        }
                    }
                });
                // dB = dCᵀ · A
                self.accum(grads, b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let c = g[i * n + j];
                            if c == 0.0 {
                                continue;
                            }
                            for (d, &q) in db[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += c * q;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accum(grads, a, |d| add_into(d, g));
                self.accum(grads, b, |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                self.accum(grads, a, |d| add_into(d, g));
                self.accum(grads, b, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accum(grads, a, |d| {
                    for ((p, q), r) in d.iter_mut().zip(g).zip(bv) {
                        *p += q * r;
                    }
                });
                self.accum(grads, b, |d| {
                    for ((p, q), r) in d.iter_mut().zip(g).zip(av) {
                        *p += q * r;
                    }
                });
            }
            &Op::AddRow { x, b } => {
                self.accum(grads, x, |d| add_into(d, g));
                let cols = self.value(b).numel();
                self.accum(grads, b, |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accum(grads, a, |d| d.iter_mut().zip(g).for_each(|(p, q)| *p += c * q));
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                self.accum(grads, a, |d| add_into(d, g));
            }
            &Op::Transpose { a, rows, cols } => {
                self.accum(grads, a, |d| {
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] += g[j * rows + i];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let out_cols = node.value.cols();
                let mut offset = 0;
                for &(p, size) in parts {
                    if *axis == 0 {
                        let span = size * out_cols;
                        self.accum(grads, p, |d| add_into(d, &g[offset..offset + span]));
                        offset += span;
                    } else {
                        let start = offset;
                        self.accum(grads, p, |d| {
                            for (drow, grow) in d.chunks_mut(size).zip(g.chunks(out_cols)) {
                                add_into(drow, &grow[start..start + size]);
                            }
                        });
                        offset += size;
                    }
                }
            }
            Op::SelectRows { a, idx } | Op::Embedding { table: a, ids: idx } => {
                let cols = node.value.cols();
                self.accum(grads, *a, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                let len = node.value.cols();
                let cols = self.value(a).cols();
                self.accum(grads, a, |d| {
                    for (drow, grow) in d.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut drow[start..start + len], grow);
                    }
                });
            }
            Op::Gather { a, idx } => {
                let cols = self.value(*a).cols();
                self.accum(grads, *a, |d| {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * cols + j] += g[i];
                    }
                });
            }
            &Op::Sum(a) => {
                self.accum(grads, a, |d| d.iter_mut().for_each(|p| *p += g[0]));
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel() as f64;
                self.accum(grads, a, |d| d.iter_mut().for_each(|p| *p += g[0] / n));
            }
            &Op::SumLast(a) => {
                let cols = self.value(a).cols();
                self.accum(grads, a, |d| {
                    for (drow, &q) in d.chunks_mut(cols).zip(g) {
                        drow.iter_mut().for_each(|p| *p += q);
                    }
                });
            }
            &Op::Log(a) => {
                let av = self.value(a).data();
                self.accum(grads, a, |d| {
                    for ((p, q), x) in d.iter_mut().zip(g).zip(av) {
                        *p += q / x;
                    }
                });
            }
            &Op::Exp(a) => {
                self.accum(grads, a, |d| {
                    for ((p, q), e) in d.iter_mut().zip(g).zip(y) {
                        *p += q * e;
                    }
                });
            }
            &Op::Relu(a) => {
                let av = self.value(a).data();
                self.accum(grads, a, |d| {
                    for ((p, q), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *p += q;
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                self.accum(grads, a, |d| {
                    for ((p, q), &x) in d.iter_mut().zip(g).zip(av) {
                        *p += q * gelu_grad(x);
                    }
                });
            }
            &Op::Clamp { a, lo, hi } => {
                let av = self.value(a).data();
                self.accum(grads, a, |d| {
                    for ((p, q), &x) in d.iter_mut().zip(g).zip(av) {
                        if x >= lo && x <= hi {
                            *p += q;
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.accum(grads, *a, |d| {
                    for ((p, q), &m) in d.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *p += q;
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let n = node.value.cols();
                self.accum(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((p, q), s) in drow.iter_mut().zip(grow).zip(yrow) {
                            *p += s * (q - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = node.value.cols();
                self.accum(grads, a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((p, q), ls) in drow.iter_mut().zip(grow).zip(yrow) {
                            *p += q - ls.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gamma).data();
                self.accum(grads, *gamma, |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((p, q), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *p += q * h;
                        }
                    }
                });
                self.accum(grads, *beta, |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                self.accum(grads, *x, |dx| {
                    let dn = d as f64;
                    for (((dxrow, grow), hrow), &r) in
                        dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).zip(rstd.iter())
                    {
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(p, q)| p * q).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            dxrow[j] += r / dn * (dn * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::L2Normalize { a, norms, eps } => {
                let d = node.value.cols();
                self.accum(grads, *a, |dx| {
                    for (((dxrow, grow), yrow), &norm) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)).zip(norms)
                    {
                        if norm > *eps {
                            let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                            for ((p, q), s) in dxrow.iter_mut().zip(grow).zip(yrow) {
                                *p += (q - s * dot) / norm;
                            }
                        } else {
                            for (p, q) in dxrow.iter_mut().zip(grow) {
                                *p += q / eps;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw adjoint of a node, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint shaped like the node's value; zeros when unreached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every bound parameter, in `ParamSet` order.
    pub fn params(&self, tape: &Tape, set: &ParamSet) -> Vec<Tensor> {
        set.ids().map(|id| self.wrt(tape, tape.param(id))).collect()
    }
}
