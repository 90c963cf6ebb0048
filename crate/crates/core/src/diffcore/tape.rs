//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in exact reverse order of creation, so the adjoint of a node
//! is complete before it is propagated to its operands. Parameter leaves route
//! their adjoints into the owning [`ParamStore`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Exp(Var),
    Relu(Var),
    Gelu(Var),
    Square(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::ScaleBy(..) => "scale_by",
            Op::Affine(..) => "affine",
            Op::Transpose(_) => "transpose",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Square(_) => "square",
            Op::Recip(_) => "recip",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
        }
    }
}

/// Recording of one forward computation.
pub struct Tape {
    id: u32,
    values: Vec<Matrix>,
    ops: Vec<Op>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.index as usize]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<&Matrix> {
        if v.tape != self.id || v.index as usize >= self.values.len() {
            return Err(Error::ForeignVar);
        }
        Ok(&self.values[v.index as usize])
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let var = Var { tape: self.id, index: self.values.len() as u32 };
        self.values.push(value);
        self.ops.push(op);
        Ok(var)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a parameter. Repeated calls with the same id return the
    /// same node, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.add(self.check(b)?)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.sub(self.check(b)?)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.zip_map(self.check(b)?, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.check(a)?, self.check(row)?);
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape(format!("add_row: {}x{} plus {}x{}", av.rows(), av.cols(), rv.rows(), rv.cols())));
        }
        let mut out = av.clone();
        let n = av.cols();
        for chunk in out.as_mut_slice().chunks_mut(n.max(1)) {
            for (o, b) in chunk.iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Scales row `i` of an `m × n` matrix by entry `i` of an `m × 1` column,
    /// i.e. `diag(col) · a`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.check(a)?, self.check(col)?);
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::Shape(format!(
                "scale_rows: {}x{} by {}x{}",
                av.rows(),
                av.cols(),
                cv.rows(),
                cv.cols()
            )));
        }
        let mut out = av.clone();
        let n = av.cols();
        for (r, chunk) in out.as_mut_slice().chunks_mut(n.max(1)).enumerate() {
            let k = cv.as_slice()[r];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        self.push(out, Op::ScaleRows(a, col))
    }

    /// Multiplies every entry of `a` by the `1 × 1` variable `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        let k = self.check(s)?.item()?;
        let out = self.check(a)?.scale(k);
        self.push(out, Op::ScaleBy(s, a))
    }

    /// `scale * a + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| scale * x + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let out = Matrix::hconcat(&mats)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.check(a)?.columns(start, width)?;
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let mut out = av.clone();
        let n = av.cols();
        for row in out.as_mut_slice().chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(logistic);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// `max(0, a)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let out = self.check(a)?.map(|x| 1.0 / x);
        self.push(out, Op::Recip(a))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.check(a)?.map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.check(a)?.sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.check(a)?.len();
        if n == 0 {
            return Err(Error::Shape("mean of empty matrix".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums a non-empty list of equally shaped nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Shape("add_all of empty list".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Frobenius norm `sqrt(sum(a²))`.
    pub fn frobenius(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Propagates `d root / d node` back to every parameter leaf and adds it to
    /// the parameter gradients in `store`. Consumes the tape.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rv = self.check(root)?;
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot { rows: rv.rows(), cols: rv.cols() });
        }
        self.consumed = true;

        let n = root.index as usize + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        adj[n - 1] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let out = &self.values[i];
            match &self.ops[i] {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &g)?,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(&g, false, bv, true, &mut ga, 0.0);
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut gr = Matrix::zeros(1, cols);
                    for chunk in g.as_slice().chunks(cols.max(1)) {
                        for (o, v) in gr.as_mut_slice().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *row, gr);
                    accumulate(&mut adj, *a, g);
                }
                Op::ScaleRows(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let cols = av.cols();
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..av.rows() {
                        let k = cv.as_slice()[r];
                        let grow = &mut ga.as_mut_slice()[r * cols..(r + 1) * cols];
                        let arow = av.row_slice(r);
                        let mut dot = 0.0;
                        for (gv, x) in grow.iter_mut().zip(arow) {
                            dot += *gv * x;
                            *gv *= k;
                        }
                        gc.as_mut_slice()[r] = dot;
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *col, gc);
                }
                Op::ScaleBy(s, a) => {
                    let k = self.value(*s).as_slice()[0];
                    let av = self.value(*a);
                    let gs: f64 = g.as_slice().iter().zip(av.as_slice()).map(|(x, y)| x * y).sum();
                    accumulate(&mut adj, *s, Matrix::scalar(gs));
                    accumulate(&mut adj, *a, g.scale(k));
                }
                Op::Affine(a, k) => accumulate(&mut adj, *a, g.scale(*k)),
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut adj, *p, g.columns(start, w)?);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (rows, cols, w) = (av.rows(), av.cols(), g.cols());
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.as_mut_slice()[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let cols = out.cols();
                    let mut ga = g.clone();
                    for r in 0..out.rows() {
                        let s = out.row_slice(r);
                        let grow = &mut ga.as_mut_slice()[r * cols..(r + 1) * cols];
                        let dot: f64 = grow.iter().zip(s).map(|(x, y)| x * y).sum();
                        for (gv, sv) in grow.iter_mut().zip(s) {
                            *gv = sv * (*gv - dot);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(out, |x, s| x * s * (1.0 - s))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) at x = 0 is taken as 0.
                    let ga = g.zip_map(out, |x, s| if s > 0.0 { 0.5 * x / s } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(out, |x, e| x * e)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Gelu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x * (normal_cdf(v) + v * normal_pdf(v)))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| 2.0 * x * v)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(out, |x, r| -x * r * r)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |x, v| if v >= lo && v <= hi { x } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.as_slice()[0]));
                }
            }
        }
        for p in store.iter_mut() {
            if !p.grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.index as usize] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
