//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! replays the list in reverse and accumulates vector-Jacobian products.
//! Nodes are only ever appended, so parents always precede children.

use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Softplus(Var),
    SumAll(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    PairwiseDiff(Var, Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    CholFactor { raw: Var, diagonal_only: bool },
    Reshape(Var),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a backward pass, keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Dynamic computation graph, rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Option<Var>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

/// Solves `L x = b` in place for lower-triangular `L` (d×d, row-major).
fn forward_sub(l: &[f64], d: usize, x: &mut [f64]) {
    for i in 0..d {
        let mut s = x[i];
        for j in 0..i {
            s -= l[i * d + j] * x[j];
        }
        x[i] = s / l[i * d + i];
    }
}

/// Solves `Lᵀ x = b` in place for lower-triangular `L`.
fn backward_sub_t(l: &[f64], d: usize, x: &mut [f64]) {
    for i in (0..d).rev() {
        let mut s = x[i];
        for j in i + 1..d {
            s -= l[j * d + i] * x[j];
        }
        x[i] = s / l[i * d + i];
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_grad(false), false)
    }

    // ------------------------------------------------------------------
    // Forward operations
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        let t = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), t, rg))
    }

    /// `a[i, j] + bias[j]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if !is_matrix(ta) || tb.shape() != [ta.shape()[1]] {
            return Err(mismatch("add_row", ta, tb));
        }
        let m = ta.shape()[1];
        let mut t = ta.clone().with_grad(false);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % m];
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), t, rg))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, t, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, t, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum of a matrix: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(mismatch("sum_rows", ta, ta));
        }
        let n = ta.shape()[0];
        let data = (0..n).map(|i| ta.row(i).iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumRows(a), Tensor::vector(data), rg))
    }

    /// Per-row `log Σ_j exp(a_ij)` with max subtraction: `[n, m] -> [n]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !is_matrix(ta) || ta.shape()[1] == 0 {
            return Err(mismatch("logsumexp_rows", ta, ta));
        }
        let n = ta.shape()[0];
        let data = (0..n).map(|i| logsumexp(ta.row(i))).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSumExpRows(a), Tensor::vector(data), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !is_matrix(ta) || ta.shape()[1] == 0 {
            return Err(mismatch("log_softmax_rows", ta, ta));
        }
        let mut t = ta.clone().with_grad(false);
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmaxRows(a), t, rg))
    }

    /// All differences `f_i − μ_c`, row `i·C + c`: `[n, d] × [C, d] -> [n·C, d]`.
    pub fn pairwise_diff(&mut self, f: Var, mu: Var) -> Result<Var, DiffError> {
        let (tf, tm) = (self.value(f), self.value(mu));
        if !is_matrix(tf) || !is_matrix(tm) || tf.shape()[1] != tm.shape()[1] {
            return Err(mismatch("pairwise_diff", tf, tm));
        }
        let (n, c, d) = (tf.shape()[0], tm.shape()[0], tf.shape()[1]);
        let mut data = Vec::with_capacity(n * c * d);
        for i in 0..n {
            let fr = tf.row(i);
            for k in 0..c {
                data.extend(fr.iter().zip(tm.row(k)).map(|(x, m)| x - m));
            }
        }
        let t = Tensor::new(vec![n * c, d], data)?;
        let rg = self.rg(&[f, mu]);
        Ok(self.push(Op::PairwiseDiff(f, mu), t, rg))
    }

    fn check_solve(&self, name: &'static str, b: Var, l: Var) -> Result<usize, DiffError> {
        let (tb, tl) = (self.value(b), self.value(l));
        let ok = is_matrix(tb)
            && is_matrix(tl)
            && tl.shape()[0] == tl.shape()[1]
            && tb.shape()[1] == tl.shape()[0];
        if !ok {
            return Err(mismatch(name, tb, tl));
        }
        Ok(tl.shape()[0])
    }

    /// Row-wise `L⁻¹ b` for lower-triangular `L`: `[r, d] × [d, d] -> [r, d]`.
    pub fn solve_lower(&mut self, b: Var, l: Var) -> Result<Var, DiffError> {
        let d = self.check_solve("solve_lower", b, l)?;
        let lt = self.value(l).data();
        let mut t = self.value(b).clone().with_grad(false);
        for i in 0..t.rows() {
            forward_sub(lt, d, t.row_mut(i));
        }
        let rg = self.rg(&[b, l]);
        Ok(self.push(Op::SolveLower(b, l), t, rg))
    }

    /// Row-wise `L⁻ᵀ b` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, b: Var, l: Var) -> Result<Var, DiffError> {
        let d = self.check_solve("solve_lower_t", b, l)?;
        let lt = self.value(l).data();
        let mut t = self.value(b).clone().with_grad(false);
        for i in 0..t.rows() {
            backward_sub_t(lt, d, t.row_mut(i));
        }
        let rg = self.rg(&[b, l]);
        Ok(self.push(Op::SolveLowerT(b, l), t, rg))
    }

    /// Lower-triangular factor from an unconstrained square matrix: strict
    /// lower part copied (zeroed when `diagonal_only`), diagonal passed
    /// through softplus, upper part ignored.
    pub fn chol_factor(&mut self, raw: Var, diagonal_only: bool) -> Result<Var, DiffError> {
        let tr = self.value(raw);
        if !is_matrix(tr) || tr.shape()[0] != tr.shape()[1] {
            return Err(mismatch("chol_factor", tr, tr));
        }
        let d = tr.shape()[0];
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..=i {
                let v = if i == j {
                    softplus(tr.at(i, i))
                } else if diagonal_only {
                    0.0
                } else {
                    tr.at(i, j)
                };
                t.set(i, j, v);
            }
        }
        let rg = self.rg(&[raw]);
        Ok(self.push(Op::CholFactor { raw, diagonal_only }, t, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = self.value(a).clone().with_grad(false).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if !is_matrix(ta) {
            return Err(mismatch("transpose", ta, ta));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    /// `x·W + b` for a batch `x` of shape `[n, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Backpropagates `seed` from `output`. Returns one gradient per leaf
    /// that requires grad; leaves not reached get zeros.
    pub fn backward_from(&self, output: Var, seed: &Tensor) -> Result<Gradients, DiffError> {
        let out = self.value(output);
        if out.shape() != seed.shape() {
            return Err(DiffError::SeedShape {
                expected: out.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut result = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), data)?;
                result.grads.insert(Var(idx), t);
            }
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        let y = node.value.data();

        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    // g [n,m] · bᵀ [m,k]
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            da[i * k + p] = g[i * m..(i + 1) * m]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    acc(a, da);
                }
                if wants(b) {
                    // aᵀ [k,n] · g [n,m]
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(b, db);
                }
            }
            Op::AddRow(a, bias) => {
                let m = val(bias).len();
                if wants(bias) {
                    let mut db = vec![0.0; m];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % m] += gv;
                    }
                    acc(bias, db);
                }
                acc(a, g.to_vec());
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                acc(a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                acc(b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => acc(a, g.iter().map(|v| k * v).collect()),
            Op::Tanh(a) => acc(a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(a) => {
                let x = val(a).data();
                acc(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(a).data();
                acc(
                    a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let x = val(a).data();
                acc(a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Softplus(a) => {
                let x = val(a).data();
                acc(a, g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::SumAll(a) => acc(a, vec![g[0]; val(a).len()]),
            Op::SumRows(a) => {
                let m = val(a).cols();
                acc(a, (0..val(a).len()).map(|i| g[i / m]).collect());
            }
            Op::LogSumExpRows(a) => {
                let ta = val(a);
                let m = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for (i, (&gi, &lse)) in g.iter().zip(y).enumerate() {
                    for j in 0..m {
                        d[i * m + j] = gi * (ta.data()[i * m + j] - lse).exp();
                    }
                }
                acc(a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let m = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for i in 0..node.value.rows() {
                    let gs: f64 = g[i * m..(i + 1) * m].iter().sum();
                    for j in 0..m {
                        d[i * m + j] = g[i * m + j] - y[i * m + j].exp() * gs;
                    }
                }
                acc(a, d);
            }
            Op::PairwiseDiff(f, mu) => {
                let (n, dim) = (val(f).rows(), val(f).cols());
                let c = val(mu).rows();
                let mut df = vec![0.0; n * dim];
                let mut dm = vec![0.0; c * dim];
                for i in 0..n {
                    for k in 0..c {
                        let gr = &g[(i * c + k) * dim..(i * c + k + 1) * dim];
                        for j in 0..dim {
                            df[i * dim + j] += gr[j];
                            dm[k * dim + j] -= gr[j];
                        }
                    }
                }
                acc(f, df);
                acc(mu, dm);
            }
            Op::SolveLower(b, l) => {
                // x = L⁻¹b: db = L⁻ᵀg, dL = −db xᵀ
                let lt = val(l).data();
                let d = val(l).rows();
                let rows = node.value.rows();
                let mut db = g.to_vec();
                for r in 0..rows {
                    backward_sub_t(lt, d, &mut db[r * d..(r + 1) * d]);
                }
                if wants(l) {
                    let mut dl = vec![0.0; d * d];
                    for r in 0..rows {
                        let (u, x) = (&db[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        for i in 0..d {
                            for j in 0..=i {
                                dl[i * d + j] -= u[i] * x[j];
                            }
                        }
                    }
                    acc(l, dl);
                }
                acc(b, db);
            }
            Op::SolveLowerT(b, l) => {
                // x = L⁻ᵀb: db = L⁻¹g, dL = −x dbᵀ
                let lt = val(l).data();
                let d = val(l).rows();
                let rows = node.value.rows();
                let mut db = g.to_vec();
                for r in 0..rows {
                    forward_sub(lt, d, &mut db[r * d..(r + 1) * d]);
                }
                if wants(l) {
                    let mut dl = vec![0.0; d * d];
                    for r in 0..rows {
                        let (u, x) = (&db[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                        for i in 0..d {
                            for j in 0..=i {
                                dl[i * d + j] -= x[i] * u[j];
                            }
                        }
                    }
                    acc(l, dl);
                }
                acc(b, db);
            }
            Op::CholFactor { raw, diagonal_only } => {
                let tr = val(raw);
                let d = tr.rows();
                let mut dr = vec![0.0; d * d];
                for i in 0..d {
                    dr[i * d + i] = g[i * d + i] * sigmoid(tr.at(i, i));
                    if !diagonal_only {
                        for j in 0..i {
                            dr[i * d + j] = g[i * d + j];
                        }
                    }
                }
                acc(raw, dr);
            }
            Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Transpose(a) => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                acc(a, d);
            }
        }
    }
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Runs `graph_fn` over fresh leaves built from `inputs` (leaf `i` is
/// `Var` index `i`) and records its output on the returned tape.
pub fn forward<F>(graph_fn: F, inputs: &[Tensor]) -> Result<(Tensor, Tape), DiffError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph_fn(&mut tape, &vars)?;
    tape.set_output(out);
    Ok((tape.value(out).clone(), tape))
}

/// Backward pass from the output recorded by [`forward`].
pub fn backward(tape: &Tape, seed: &Tensor) -> Result<Gradients, DiffError> {
    let out = tape.output().ok_or(DiffError::NoOutput)?;
    tape.backward_from(out, seed)
}

/// `∂model_fn/∂x` for a scalar-valued `model_fn`. Anything `model_fn` puts
/// on the tape other than `x` should be a constant.
pub fn grad_wrt_input<F>(model_fn: F, x: &Tensor) -> Result<(f64, Tensor), DiffError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let out = model_fn(&mut tape, xv)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(DiffError::NonScalar {
            op: "grad_wrt_input",
            shape: value.shape().to_vec(),
        });
    }
    let seed = Tensor::full(value.shape(), 1.0);
    let e = value.item();
    let mut grads = tape.backward_from(out, &seed)?;
    let g = grads.take(xv).expect("input leaf requires grad");
    Ok((e, g))
}
