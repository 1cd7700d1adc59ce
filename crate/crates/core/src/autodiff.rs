//! Reverse-mode automatic differentiation on a tape of dense tensors.
//!
//! Every primitive records its inputs and computes its forward value
//! eagerly. [`Tape::backward`] walks the tape once in reverse order and
//! returns the adjoints; the tape itself is never mutated by a backward pass.
//! There is no broadcasting: shapes must match exactly, and the few
//! shape-changing operations (`matmul`, `add_row_bias`, `outer`, ...) say so
//! in their names.

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != values.len() {
            return Err(Error::dims(format!("{shape:?}"), format!("{} values", values.len())));
        }
        Ok(Self { shape, values, requires_grad })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Dot(Var, Var),
    Outer(Var, Var),
    Sum(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    Reshape(Var),
    LowerTriangularAssemble(Var),
    Diag(Var),
    AddRowBias(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single owner; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    pub fn get_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// `c += a·b` for row-major `a (m×k)`, `b (k×n)`, either optionally transposed in place.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // strides of the logical (m×k) and (k×n) views
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address only inside them.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, t.requires_grad)
    }

    pub fn param(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values, true)?))
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values, false)?))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dims(format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dims("matrix", format!("{s:?}"))),
        }
    }

    fn vector_len(&self, v: Var) -> Result<usize> {
        match self.nodes[v.0].shape.as_slice() {
            [n] => Ok(*n),
            s => Err(Error::dims("vector", format!("{s:?}"))),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::ScalarMul(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(Error::dims(format!("[{k}, _]"), format!("[{k2}, {n}]")));
        }
        let mut c = vec![0.0; m * n];
        gemm_acc(m, k, n, &self.nodes[a.0].value, false, &self.nodes[b.0].value, false, &mut c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b), rg))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(m)?;
        let n = self.vector_len(v)?;
        if n != c {
            return Err(Error::dims(c, n));
        }
        let (mv, vv) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        let out = mv.chunks_exact(c).map(|row| row.iter().zip(vv).map(|(a, b)| a * b).sum()).collect();
        let rg = self.rg(&[m, v]);
        Ok(self.push(vec![r], out, Op::MatVec(m, v), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a)?;
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vector_len(a)?;
        self.same_shape(a, b)?;
        let s = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![s], Op::Dot(a, b), rg))
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = (self.vector_len(a)?, self.vector_len(b)?);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = av.iter().flat_map(|x| bv.iter().map(move |y| x * y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Outer(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Flat slice `[start, start + len)` as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if len == 0 || start + len > n {
            return Err(Error::dims(format!("range within {n}"), format!("{start}..{}", start + len)));
        }
        let out = self.nodes[a.0].value[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len], out, Op::Slice(a, start), rg))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dims("at least one part", 0));
        }
        let out: Vec<f64> = parts.iter().flat_map(|p| self.nodes[p.0].value.iter().copied()).collect();
        let rg = self.rg(parts);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() || shape.contains(&0) {
            return Err(Error::dims(self.nodes[a.0].value.len(), format!("{shape:?}")));
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Length-`p²` vector → `p×p` lower-triangular matrix: strict upper part
    /// zeroed, softplus applied on the diagonal.
    pub fn lower_triangular_assemble(&mut self, a: Var) -> Result<Var> {
        let n = self.vector_len(a)?;
        let p = (n as f64).sqrt().round() as usize;
        if p * p != n {
            return Err(Error::dims("a square length", n));
        }
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; n];
        for i in 0..p {
            for j in 0..i {
                out[i * p + j] = src[i * p + j];
            }
            out[i * p + i] = softplus(src[i * p + i]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![p, p], out, Op::LowerTriangularAssemble(a), rg))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a)?;
        if r != c {
            return Err(Error::dims("square matrix", format!("[{r}, {c}]")));
        }
        let out = (0..r).map(|i| self.nodes[a.0].value[i * c + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r], out, Op::Diag(a), rg))
    }

    /// `m[i, :] + b` for every row `i`.
    pub fn add_row_bias(&mut self, m: Var, b: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(m)?;
        let n = self.vector_len(b)?;
        if n != c {
            return Err(Error::dims(c, n));
        }
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[m.0].value.clone();
        for row in out.chunks_exact_mut(c) {
            for (x, y) in row.iter_mut().zip(bv) {
                *x += y;
            }
        }
        debug_assert_eq!(out.len(), r * c);
        let rg = self.rg(&[m, b]);
        Ok(self.push(vec![r, c], out, Op::AddRowBias(m, b), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n_loss = self.nodes[loss.0].value.len();
        if n_loss != 1 {
            return Err(Error::NotScalar(n_loss));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // only nodes that require grad keep adjoints
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        // accumulate `f(i)` into the adjoint of `v`
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl Fn(usize) -> f64) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(grads, a, g.len(), |i| g[i]);
                }
                if wants(b) {
                    acc(grads, b, g.len(), |i| g[i]);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(grads, a, g.len(), |i| g[i]);
                }
                if wants(b) {
                    acc(grads, b, g.len(), |i| -g[i]);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(grads, a, g.len(), |i| g[i] * bv[i]);
                }
                if wants(b) {
                    acc(grads, b, g.len(), |i| g[i] * av[i]);
                }
            }
            &Op::ScalarMul(a, c) => acc(grads, a, g.len(), |i| c * g[i]),
            &Op::AddScalar(a) => acc(grads, a, g.len(), |i| g[i]),
            &Op::Log(a) => {
                let av = val(a);
                acc(grads, a, g.len(), |i| g[i] / av[i]);
            }
            &Op::Exp(a) => {
                let out = &node.value;
                acc(grads, a, g.len(), |i| g[i] * out[i]);
            }
            &Op::Recip(a) => {
                let out = &node.value;
                acc(grads, a, g.len(), |i| -g[i] * out[i] * out[i]);
            }
            &Op::Sigmoid(a) => {
                let out = &node.value;
                acc(grads, a, g.len(), |i| g[i] * out[i] * (1.0 - out[i]));
            }
            &Op::Relu(a) => {
                let av = val(a);
                acc(grads, a, g.len(), |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            &Op::Softplus(a) => {
                let av = val(a);
                acc(grads, a, g.len(), |i| g[i] * sigmoid(av[i]));
            }
            &Op::MatMul(a, b) => {
                let [m, k] = self.nodes[a.0].shape[..] else { unreachable!() };
                let n = node.shape[1];
                if wants(a) {
                    // dA = dC · Bᵀ
                    let s = slot(grads, a, m * k);
                    gemm_acc(m, n, k, g, false, val(b), true, s);
                }
                if wants(b) {
                    // dB = Aᵀ · dC
                    let s = slot(grads, b, k * n);
                    gemm_acc(k, m, n, val(a), true, g, false, s);
                }
            }
            &Op::MatVec(m, v) => {
                let [r, c] = self.nodes[m.0].shape[..] else { unreachable!() };
                let (mv, vv) = (val(m), val(v));
                if wants(m) {
                    acc(grads, m, r * c, |i| g[i / c] * vv[i % c]);
                }
                if wants(v) {
                    let s = slot(grads, v, c);
                    for (row, gi) in mv.chunks_exact(c).zip(g) {
                        for (sj, mj) in s.iter_mut().zip(row) {
                            *sj += gi * mj;
                        }
                    }
                }
            }
            &Op::Transpose(a) => {
                let [r, c] = self.nodes[a.0].shape[..] else { unreachable!() };
                // out[j, i] = a[i, j]
                acc(grads, a, r * c, |idx| g[(idx % c) * r + idx / c]);
            }
            &Op::Dot(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    acc(grads, a, av.len(), |i| g[0] * bv[i]);
                }
                if wants(b) {
                    acc(grads, b, bv.len(), |i| g[0] * av[i]);
                }
            }
            &Op::Outer(a, b) => {
                let (av, bv) = (val(a), val(b));
                let n = bv.len();
                if wants(a) {
                    acc(grads, a, av.len(), |i| (0..n).map(|j| g[i * n + j] * bv[j]).sum());
                }
                if wants(b) {
                    acc(grads, b, n, |j| av.iter().enumerate().map(|(i, x)| g[i * n + j] * x).sum());
                }
            }
            &Op::Sum(a) => {
                let n = val(a).len();
                acc(grads, a, n, |_| g[0]);
            }
            &Op::Slice(a, start) => {
                let n = val(a).len();
                let s = slot(grads, a, n);
                for (sj, gj) in s[start..start + g.len()].iter_mut().zip(g) {
                    *sj += gj;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if wants(p) {
                        acc(grads, p, n, |i| g[off + i]);
                    }
                    off += n;
                }
            }
            &Op::Reshape(a) => acc(grads, a, g.len(), |i| g[i]),
            &Op::LowerTriangularAssemble(a) => {
                let p = node.shape[0];
                let av = val(a);
                acc(grads, a, p * p, |idx| {
                    let (i, j) = (idx / p, idx % p);
                    match j.cmp(&i) {
                        std::cmp::Ordering::Less => g[idx],
                        std::cmp::Ordering::Equal => g[idx] * sigmoid(av[idx]),
                        std::cmp::Ordering::Greater => 0.0,
                    }
                });
            }
            &Op::Diag(a) => {
                let p = node.shape[0];
                let s = slot(grads, a, p * p);
                for i in 0..p {
                    s[i * p + i] += g[i];
                }
            }
            &Op::AddRowBias(m, b) => {
                let c = self.nodes[b.0].value.len();
                if wants(m) {
                    acc(grads, m, g.len(), |i| g[i]);
                }
                if wants(b) {
                    let s = slot(grads, b, c);
                    for row in g.chunks_exact(c) {
                        for (sj, gj) in s.iter_mut().zip(row) {
                            *sj += gj;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::RngStream;
    use crate::linalg::test_util::finite_diff;

    fn assert_grad_close(ad: &[f64], fd: &[f64], rtol: f64, atol: f64) {
        for (i, (a, f)) in ad.iter().zip(fd).enumerate() {
            let tol = atol.max(rtol * f.abs().max(a.abs()));
            assert!((a - f).abs() <= tol, "component {i}: autodiff {a} vs fd {f}");
        }
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.param(vec![1], vec![0.0]).unwrap();
        let y = t.softplus(x);
        assert!((t.scalar(y) - 2f64.ln()).abs() < 1e-15);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x), vec![0.5]);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(vec![1], vec![3.0]).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x), vec![6.0]);
    }

    #[test]
    fn sum_and_dot_gradients() {
        let mut t = Tape::new();
        let xs = vec![1.0, -2.0, 0.5, 4.0, 3.0];
        let x = t.param(vec![5], xs.clone()).unwrap();
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x), vec![1.0; 5]);
        let d = t.dot(x, x).unwrap();
        let g = t.backward(d).unwrap().get(x);
        assert_eq!(g, xs.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(vec![3], vec![1.0; 3]).unwrap();
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(Error::NotScalar(3))));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.param(vec![2, 3], vec![0.0; 6]).unwrap();
        let v = t.param(vec![2], vec![0.0; 2]).unwrap();
        assert!(t.matmul(a, b).is_err());
        assert!(t.add(a, v).is_err());
        assert!(t.matvec(a, v).is_err());
        let len3 = t.constant(vec![3], vec![0.0; 3]).unwrap();
        assert!(t.lower_triangular_assemble(len3).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3], false).is_err());
        assert!(t.slice(v, 1, 2).is_err());
    }

    #[test]
    fn disconnected_nodes_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = t.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let _side = t.exp(unused);
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused), vec![0.0; 3]);
        assert!(g.get_ref(unused).is_none());
    }

    #[test]
    fn lower_triangular_assemble_forward_and_adjoint() {
        let mut t = Tape::new();
        let a = t.param(vec![4], vec![0.0, 5.0, -1.5, 2.0]).unwrap();
        let l = t.lower_triangular_assemble(a).unwrap();
        let v = t.value(l).to_vec();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], -1.5);
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);
        assert!((v[3] - softplus(2.0)).abs() < 1e-15);
        let s = t.sum(l);
        let g = t.backward(s).unwrap().get(a);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 1.0);
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[3] - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().get(x), vec![0.0, 0.0, 1.0]);
    }

    /// Three dense layers with mixed activations and a scalar head that
    /// touches most primitives.
    fn composite(t: &mut Tape, params: &[f64], x: &[f64]) -> (Var, Var) {
        let w = t.param(vec![params.len()], params.to_vec()).unwrap();
        let w1 = t.slice(w, 0, 12).unwrap();
        let w1 = t.reshape(w1, vec![4, 3]).unwrap();
        let b1 = t.slice(w, 12, 3).unwrap();
        let w2 = t.slice(w, 15, 9).unwrap();
        let w2 = t.reshape(w2, vec![3, 3]).unwrap();
        let w3 = t.slice(w, 24, 9).unwrap();
        let w3 = t.reshape(w3, vec![3, 3]).unwrap();

        let xv = t.constant(vec![2, 4], x.to_vec()).unwrap();
        let h = t.matmul(xv, w1).unwrap();
        let h = t.add_row_bias(h, b1).unwrap();
        let h = t.softplus(h);
        let h = t.matmul(h, w2).unwrap();
        let h = t.sigmoid(h);
        let ht = t.transpose(h).unwrap();
        let h = t.matmul(ht, h).unwrap(); // 3×3
        let h = t.mul(h, w3).unwrap();
        let flat = t.reshape(h, vec![9]).unwrap();
        let l = t.lower_triangular_assemble(flat).unwrap();
        let d = t.diag(l).unwrap();
        let ld = t.log(d);
        let r0 = t.slice(flat, 0, 3).unwrap();
        let mv = t.matvec(l, r0).unwrap();
        let o = t.outer(mv, d).unwrap();
        let o = t.reshape(o, vec![9]).unwrap();
        let tail = t.concat(&[ld, mv]).unwrap();
        let e = t.exp(tail);
        let s1 = t.sum(e);
        let s2 = t.dot(o, o).unwrap();
        let s2 = t.add_scalar(s2, 1.0);
        let s2 = t.recip(s2);
        let s3 = t.sub(s1, s2).unwrap();
        let out = t.scalar_mul(s3, 0.3);
        (w, out)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(10);
        let params: Vec<f64> = (0..33).map(|_| 0.5 * rng.standard_normal()).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let mut t = Tape::new();
        let (w, out) = composite(&mut t, &params, &x);
        let ad = t.backward(out).unwrap().get(w);
        let fd = finite_diff(&params, 1e-5, |p| {
            let mut t = Tape::new();
            let (_, o) = composite(&mut t, p, &x);
            t.scalar(o)
        });
        assert_grad_close(&ad, &fd, 1e-6, 1e-8);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut rng = RngStream::new(3);
        let params: Vec<f64> = (0..33).map(|_| 0.5 * rng.standard_normal()).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
        let mut t = Tape::new();
        let (w, out) = composite(&mut t, &params, &x);
        let g1 = t.backward(out).unwrap().get(w);
        let g2 = t.backward(out).unwrap().get(w);
        assert_eq!(g1, g2);
    }
}
