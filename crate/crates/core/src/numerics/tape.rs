//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation eagerly: each call computes its value
//! immediately and appends a node. Because nodes are only ever appended and
//! refer to earlier nodes, creation order is a topological order, so the
//! backward sweep is a single reverse pass that visits each node once.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Softplus(Var),
    Sigmoid(Var),
    Erf(Var),
    Prelu(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct TapeNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Store of named, trainable parameter arrays and their accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.grads.push(vec![0.0; value.len()]);
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.values[slot]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grad(&self, slot: usize) -> &[f64] {
        &self.grads[slot]
    }

    pub fn grads(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn grads_and_values_mut(&mut self) -> (&[Vec<f64>], &mut [Tensor]) {
        (&self.grads, &mut self.values)
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations and computes reverse-mode gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    acc.get_or_insert_with(|| vec![0.0; len])
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `log(1 + exp(x))`, floored at the smallest positive normal
/// `f64` so the result stays strictly positive where it would underflow.
pub fn softplus_scalar(x: f64) -> f64 {
    let y = if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    y.max(f64::MIN_POSITIVE)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFiniteValue { op: op_name });
        }
        self.nodes.push(TapeNode {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let req = self.requires(a);
        self.push(name, value, op, req)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.push(name, value, op, req)
    }

    /// Records a value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(TapeNode {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a free input whose gradient is reported by [`Tape::gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(TapeNode {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `slot` of `store`; [`Tape::backward`] accumulates
    /// into the matching gradient buffer.
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> Var {
        self.nodes.push(TapeNode {
            value: store.value(slot).clone(),
            op: Op::Param(slot),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push("matmul", value, Op::MatMul(a, b), req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::contract("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a row vector (shape `[n]` or `[1, n]`) to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let rv = self.value(row);
        if rv.len() != n {
            return Err(Error::dim("add_row", format!("row of {} values for {n} columns", rv.len())));
        }
        let rd = rv.data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rd) {
                *x += b;
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a) || self.requires(row);
        self.push("add_row", value, Op::AddRow(a, row), req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("log", "argument must be positive"));
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("sqrt", "argument must be positive"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let one = self.constant(Tensor::filled(&shape, 1.0));
        self.div(one, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus_scalar, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, logistic, Op::Sigmoid(a))
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary("erf", a, libm::erf, Op::Erf(a))
    }

    /// Parametric ReLU with a single learnable slope shared by all elements.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let s = self
            .value(slope)
            .item()
            .ok_or_else(|| Error::dim("prelu", "slope must hold exactly one value"))?;
        let value = self.value(a).map(|x| if x >= 0.0 { x } else { s * x });
        let req = self.requires(a) || self.requires(slope);
        self.push("prelu", value, Op::Prelu(a, slope), req)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let req = self.requires(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), req)
    }

    /// Sums each row of an `[m, n]` matrix, giving shape `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (m, n) = v.dims2()?;
        let data = (0..m).map(|i| v.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let value = Tensor::new(vec![m], data)?;
        let req = self.requires(a);
        self.push("sum_rows", value, Op::SumRows(a), req)
    }

    /// Row-wise softmax of an `[m, n]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        let req = self.requires(a);
        self.push("softmax", value, Op::Softmax(a), req)
    }

    /// Row-wise log-softmax via the log-sum-exp path.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (m, n) = v.dims2()?;
        let mut data = v.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(vec![m, n], data)?;
        let req = self.requires(a);
        self.push("log_softmax", value, Op::LogSoftmax(a), req)
    }

    /// Concatenates two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.value(a).dims2()?;
        let (mb, nb) = self.value(b).dims2()?;
        if m != mb {
            return Err(Error::dim("concat_cols", format!("{m} rows vs {mb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let value = Tensor::new(vec![m, na + nb], data)?;
        let req = self.requires(a) || self.requires(b);
        self.push("concat_cols", value, Op::ConcatCols(a, b), req)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("range {start}..{end} of {n} columns")));
        }
        let d = self.value(a).data();
        let data = (0..m).flat_map(|i| d[i * n + start..i * n + end].iter().copied()).collect();
        let value = Tensor::new(vec![m, end - start], data)?;
        let req = self.requires(a);
        self.push("slice_cols", value, Op::SliceCols(a, start, end), req)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let req = self.requires(a);
        self.push("reshape", value, Op::Reshape(a), req)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the backward sweep from `loss` and adds the gradient of every
    /// recorded parameter into `store`. Gradients accumulate across calls
    /// until [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(slot), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                let len = store.len();
                let acc = store.grads.get_mut(*slot).ok_or(Error::Index {
                    what: "parameter slots",
                    index: *slot,
                    len,
                })?;
                if acc.len() != g.len() {
                    return Err(Error::contract("backward", "parameter shape changed since recording"));
                }
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! acc {
            ($v:expr, $body:expr) => {
                if self.requires($v) {
                    let n = len_of($v);
                    let dst = add_into(&mut grads[$v.0], n);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(dst);
                }
            };
        }
        match node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("matmul lhs");
                let n = self.nodes[b.0].value.dims2().expect("matmul rhs").1;
                acc!(a, |d: &mut Vec<f64>| matmul_a_bt_into(g, val(b), d, m, n, k));
                acc!(b, |d: &mut Vec<f64>| matmul_at_b_into(val(a), g, d, m, k, n));
            }
            Op::Add(a, b) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc!(b, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc!(b, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * vb[j];
                });
                acc!(b, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * va[j];
                });
            }
            Op::Div(a, b) => {
                let vb = val(b);
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] / vb[j];
                });
                acc!(b, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] -= g[j] * out[j] / vb[j];
                });
            }
            Op::AddRow(a, row) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = len_of(row);
                acc!(row, |d: &mut Vec<f64>| for (j, &gv) in g.iter().enumerate() {
                    d[j % n] += gv;
                });
            }
            Op::Scale(a, c) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Offset(a) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Exp(a) => {
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * out[j];
                });
            }
            Op::Log(a) => {
                let va = val(a);
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] / va[j];
                });
            }
            Op::Square(a) => {
                let va = val(a);
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += 2.0 * g[j] * va[j];
                });
            }
            Op::Sqrt(a) => {
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += 0.5 * g[j] / out[j];
                });
            }
            Op::Abs(a) => {
                let va = val(a);
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    let s = if va[j] > 0.0 {
                        1.0
                    } else if va[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d[j] += g[j] * s;
                });
            }
            Op::Softplus(a) => {
                let va = val(a);
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * logistic(va[j]);
                });
            }
            Op::Sigmoid(a) => {
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                });
            }
            Op::Erf(a) => {
                let va = val(a);
                let c = 2.0 / std::f64::consts::PI.sqrt();
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += g[j] * c * (-va[j] * va[j]).exp();
                });
            }
            Op::Prelu(a, slope) => {
                let va = val(a);
                let s = val(slope)[0];
                acc!(a, |d: &mut Vec<f64>| for j in 0..d.len() {
                    d[j] += if va[j] >= 0.0 { g[j] } else { s * g[j] };
                });
                acc!(slope, |d: &mut Vec<f64>| {
                    d[0] += va.iter().zip(g).filter(|(x, _)| **x < 0.0).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Sum(a) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = len_of(a) as f64;
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumRows(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().expect("sum_rows input");
                acc!(a, |d: &mut Vec<f64>| for r in 0..m {
                    d[r * n..(r + 1) * n].iter_mut().for_each(|x| *x += g[r]);
                });
            }
            Op::Softmax(a) => {
                let (m, n) = node.value.dims2().expect("softmax output");
                acc!(a, |d: &mut Vec<f64>| for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] += y[j] * (gr[j] - dot);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (m, n) = node.value.dims2().expect("log_softmax output");
                acc!(a, |d: &mut Vec<f64>| for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] += gr[j] - y[j].exp() * total;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = self.nodes[a.0].value.dims2().expect("concat lhs");
                let nb = self.nodes[b.0].value.dims2().expect("concat rhs").1;
                let w = na + nb;
                acc!(a, |d: &mut Vec<f64>| for r in 0..m {
                    for j in 0..na {
                        d[r * na + j] += g[r * w + j];
                    }
                });
                acc!(b, |d: &mut Vec<f64>| for r in 0..m {
                    for j in 0..nb {
                        d[r * nb + j] += g[r * w + na + j];
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = self.nodes[a.0].value.dims2().expect("slice input");
                let w = end - start;
                acc!(a, |d: &mut Vec<f64>| for r in 0..m {
                    for j in 0..w {
                        d[r * n + start + j] += g[r * w + j];
                    }
                });
            }
            Op::Reshape(a) => {
                acc!(a, |d: &mut Vec<f64>| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
        }
    }
}

/// Row-wise softmax on plain values.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let (m, n) = t.dims2()?;
    let mut data = t.data().to_vec();
    for i in 0..m {
        let row = &mut data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    Tensor::new(vec![m, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).unwrap()
    }

    /// Checks analytic gradients of `f` at `inputs` against central
    /// differences with step 1e-5.
    fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, tol: f64) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.gradients(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = f(&mut t, &vs).unwrap();
            t.value(o).data().iter().sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..inputs.len() {
            let analytic = grads.get(vars[k]).unwrap();
            for (j, &g) in analytic.iter().enumerate() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (g - fd).abs() / fd.abs().max(1.0);
                assert!(err < tol, "input {k}[{j}]: analytic {g} vs fd {fd} (err {err})");
            }
        }
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = SeededRng::new(1);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        check(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]), 1e-6);

        // d sum(AB)/dA[i][p] = sum_j B[p][j]
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.constant(b.clone());
        let prod = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.gradients(loss).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let row_sum: f64 = b.row(p).iter().sum();
                assert!((g.get(va).unwrap()[i * 4 + p] - row_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_gradients_match_fd() {
        let mut rng = SeededRng::new(2);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let pos = a.map(|x| x.abs() + 0.5);
        check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-6);
        check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-6);
        check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-6);
        check(&[b.clone(), pos.clone()], |t, v| t.div(v[0], v[1]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 1.5), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.exp(v[0]), 1e-6);
        check(std::slice::from_ref(&pos), |t, v| t.log(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.square(v[0]), 1e-6);
        check(std::slice::from_ref(&pos), |t, v| t.sqrt(v[0]), 1e-6);
        check(std::slice::from_ref(&pos), |t, v| t.recip(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.abs(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.softplus(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.erf(v[0]), 1e-6);
    }

    #[test]
    fn structural_gradients_match_fd() {
        let mut rng = SeededRng::new(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let row = random(&[4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        check(&[a.clone(), row], |t, v| t.add_row(v[0], v[1]), 1e-6);
        check(&[a.clone(), b], |t, v| t.concat_cols(v[0], v[1]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.slice_cols(v[0], 1, 3), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[12]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.sum_rows(v[0]), 1e-6);
        check(std::slice::from_ref(&a), |t, v| t.mean(v[0]), 1e-6);
        // weight the outputs so the softmax gradient is not trivially zero
        check(&[a.clone(), w.clone()], |t, v| {
            let s = t.softmax(v[0])?;
            t.mul(s, v[1])
        }, 1e-6);
        check(&[a, w], |t, v| {
            let s = t.log_softmax(v[0])?;
            t.mul(s, v[1])
        }, 1e-6);
    }

    #[test]
    fn prelu_values_and_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, -2.0]).unwrap());
        let a = tape.constant(Tensor::scalar(0.25));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.5]);

        let mut rng = SeededRng::new(4);
        let batch = random(&[5, 3], &mut rng);
        check(&[batch, Tensor::scalar(0.25)], |t, v| t.prelu(v[0], v[1]), 1e-6);
    }

    #[test]
    fn softplus_edge_values() {
        assert!((softplus_scalar(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_scalar(100.0) - 100.0).abs() < 1e-12);
        for x in [-1e6, -800.0, -40.0, 0.0, 29.9, 30.1, 1e6] {
            let y = softplus_scalar(x);
            assert!(y > 0.0 && y.is_finite(), "softplus({x}) = {y}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let slot = store.push("p", Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let p = tape.param(&store, slot);
        assert!(matches!(tape.backward(p, &mut store), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        let slot = store.push("p", Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&store, slot);
        let s = tape.sum(p).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(slot), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let p = tape.param(&store, slot);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        store.zero_grad();
        tape.backward(half, &mut store).unwrap();
        assert_eq!(store.grad(slot), &[1.0, -2.0, 3.0]);

        // a second call without reset accumulates
        tape.backward(half, &mut store).unwrap();
        assert_eq!(store.grad(slot), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let mut rng = SeededRng::new(5);
        let mut store = ParamStore::new();
        let slot = store.push("w", random(&[3, 2], &mut rng));
        let x = random(&[4, 3], &mut rng);
        let build = |tape: &mut Tape, store: &ParamStore, which: u8| {
            let w = tape.param(store, slot);
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, w).unwrap();
            let l1 = {
                let s = tape.softplus(h).unwrap();
                tape.sum(s).unwrap()
            };
            let l2 = {
                let s = tape.square(h).unwrap();
                tape.mean(s).unwrap()
            };
            match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            }
        };
        let mut separate = store.clone();
        for which in [0, 1] {
            let mut tape = Tape::new();
            let l = build(&mut tape, &separate, which);
            tape.backward(l, &mut separate).unwrap();
        }
        let mut joint = store.clone();
        let mut tape = Tape::new();
        let l = build(&mut tape, &joint, 2);
        tape.backward(l, &mut joint).unwrap();
        for (a, b) in separate.grad(slot).iter().zip(joint.grad(slot)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(tape.log(x).is_err());
    }
}
