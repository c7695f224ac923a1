//! Reverse-mode differentiation over a linear tape of 2-D array operations.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Lower clamp applied by [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    ColSum(Var),
    SliceRows(Var, usize),
    Reverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Convenience for `1 x 1` nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: DenseArray) -> Var {
        let (r, c) = value.dims();
        self.push(DenseArray::from_raw(r, c, value.into_values()), Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        let (r, c) = value.dims();
        self.push(DenseArray::from_raw(r, c, value.into_values()), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims();
        let (k2, m) = self.value(b).dims();
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {n}x{k} by {k2}x{m}"
            )));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(DenseArray::from_raw(n, m, out), Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims();
        if self.value(bias).dims() != (1, m) {
            return Err(Error::Dimension(format!(
                "bias {:?} does not broadcast over {n}x{m}",
                self.value(bias).dims()
            )));
        }
        let b = self.value(bias).values();
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % m])
            .collect();
        let rg = self.grad_flag(&[x, bias]);
        Ok(self.push(DenseArray::from_raw(n, m, out), Op::AddBias(x, bias), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (n, m) = self.value(x).dims();
        let out = self.value(x).values().iter().map(|&v| f(v)).collect();
        let rg = self.grad_flag(&[x]);
        self.push(DenseArray::from_raw(n, m, out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Identity on the forward pass; multiplies incoming gradients by `-scale`.
    pub fn reverse_gradient(&mut self, x: Var, scale: f64) -> Var {
        self.unary(x, Op::Reverse(x, scale), |v| v)
    }

    fn row_map(&mut self, x: Var, op: Op, f: impl Fn(&[f64]) -> Vec<f64>) -> Var {
        let (n, m) = self.value(x).dims();
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).row_iter() {
            out.extend(f(row));
        }
        let rg = self.grad_flag(&[x]);
        self.push(DenseArray::from_raw(n, m, out), op, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Var {
        self.row_map(logits, Op::Softmax(logits), crate::tensor::softmax_row)
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax(&mut self, logits: Var) -> Var {
        self.row_map(logits, Op::LogSoftmax(logits), |row| {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter().map(|&z| z - lse).collect()
        })
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let da = self.value(a).dims();
        let db = self.value(b).dims();
        if da != db {
            return Err(Error::Dimension(format!(
                "elementwise op on {da:?} and {db:?}"
            )));
        }
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(DenseArray::from_raw(da.0, da.1, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.grad_flag(&[x]);
        self.push(DenseArray::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 x cols` node.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let (_, m) = self.value(x).dims();
        let mut out = vec![0.0; m];
        for row in self.value(x).row_iter() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.grad_flag(&[x]);
        self.push(DenseArray::from_raw(1, m, out), Op::ColSum(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims();
        if start + len > n {
            return Err(Error::Dimension(format!(
                "rows {start}..{} out of {n}",
                start + len
            )));
        }
        let out = self.value(x).values()[start * m..(start + len) * m].to_vec();
        let rg = self.grad_flag(&[x]);
        Ok(self.push(DenseArray::from_raw(len, m, out), Op::SliceRows(x, start), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "loss variable was not recorded on this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, m) = node.value.dims();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.value(a).dims();
                let av = self.value(a).values();
                let bv = self.value(b).values();
                if self.nodes[a.0].requires_grad {
                    // dA = G B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, &gij) in drow.iter_mut().zip(grow) {
                                *d += aip * gij;
                            }
                        }
                    }
                    accumulate(grads, b, &db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.nodes[x.0].requires_grad {
                    accumulate(grads, x, g);
                }
                if self.nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, &db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x).values();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
            Op::Softmax(x) => {
                let y = node.value.values();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let yr = &y[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        dx[r * m + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.values();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let gr = &g[r * m..(r + 1) * m];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..m {
                        dx[r * m + c] = gr[c] - y[r * m + c].exp() * gsum;
                    }
                }
                accumulate(grads, x, &dx);
            }
            Op::Log(x) => {
                let xv = self.value(x).values();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > LOG_FLOOR { gi / xi } else { 0.0 })
                    .collect();
                accumulate(grads, x, &dx);
            }
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, a, g);
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, a, g);
                }
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(a).values();
                let bv = self.value(b).values();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, x, &dx);
            }
            Op::AddScalar(x) => accumulate(grads, x, g),
            Op::Square(x) => {
                let xv = self.value(x).values();
                let dx: Vec<f64> = g.iter().zip(xv).map(|(gi, xi)| 2.0 * xi * gi).collect();
                accumulate(grads, x, &dx);
            }
            Op::Sum(x) => {
                let len = self.value(x).len();
                accumulate(grads, x, &vec![g[0]; len]);
            }
            Op::ColSum(x) => {
                let (rows, cols) = self.value(x).dims();
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend_from_slice(g);
                }
                accumulate(grads, x, &dx);
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.value(x).dims();
                let slot = grads[x.0].get_or_insert_with(|| vec![0.0; rows * cols]);
                for (d, &v) in slot[start * cols..].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Reverse(x, scale) => {
                if scale != 0.0 {
                    let dx: Vec<f64> = g.iter().map(|v| -scale * v).collect();
                    accumulate(grads, x, &dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero-filled when `v` did not influence the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> DenseArray {
        let (r, c) = tape.value(v).dims();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => DenseArray::from_raw(r, c, g.clone()),
            None => DenseArray::zeros(r, c),
        }
    }
}

/// Maximum relative error between backprop gradients and central finite
/// differences of `build` with respect to every entry of `inputs`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradcheck<F>(inputs: &[DenseArray], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[DenseArray]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.values()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
