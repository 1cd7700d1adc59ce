//! Dense symmetric-positive-definite kernels.
//!
//! Everything here is small-`p` (latent sizes up to a few dozen), row-major
//! and `f64`. The rank-1 helpers let the training loss avoid any matrix
//! factorization: with `Φ = Ψ + zzᵀ` and a cached `Ψ⁻¹`, both `log|Φ|` and
//! `Φ⁻¹` follow from `u = Ψ⁻¹z` in `O(p²)`.

use crate::error::{Error, Result};

const SYMMETRY_RTOL: f64 = 1e-12;

/// A dense symmetric matrix expected to be positive definite.
///
/// Symmetry is checked on construction. Positive definiteness is checked by
/// [`cholesky`], which every consumer goes through.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

/// Lower-triangular factor with a strictly positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("matrix dimension must be at least 1"));
        }
        if data.len() != dim * dim {
            return Err(Error::dims(dim * dim, data.len()));
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (data[i * dim + j], data[j * dim + i]);
                if (a - b).abs() > SYMMETRY_RTOL * scale || !a.is_finite() {
                    return Err(Error::domain(format!(
                        "matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { dim, data })
    }

    /// Builds from an almost-symmetric buffer by averaging with its transpose.
    pub fn symmetrized(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::dims(dim * dim, data.len()));
        }
        for i in 0..dim {
            for j in 0..i {
                let m = 0.5 * (data[i * dim + j] + data[j * dim + i]);
                data[i * dim + j] = m;
                data[j * dim + i] = m;
            }
        }
        Self::new(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = c;
        }
        Self { dim, data }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            data[i * dim + i] = *d;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c·vvᵀ`.
    pub fn add_outer(&self, v: &[f64], c: f64) -> Result<Self> {
        check_len(self.dim, v)?;
        let mut data = self.data.clone();
        for i in 0..self.dim {
            for j in 0..self.dim {
                data[i * self.dim + j] += c * v[i] * v[j];
            }
        }
        Ok(Self { dim: self.dim, data })
    }

    pub fn add(&self, other: &SpdMatrix) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::dims(self.dim, other.dim));
        }
        Ok(Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, v)?;
        Ok(mat_vec(&self.data, self.dim, self.dim, v))
    }

    /// `vᵀ S v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        let sv = self.mat_vec(v)?;
        Ok(dot(v, &sv))
    }

    /// `Tr(self · other)` for two symmetric matrices.
    pub fn trace_product(&self, other: &SpdMatrix) -> Result<f64> {
        if other.dim != self.dim {
            return Err(Error::dims(self.dim, other.dim));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_distance(&self, other: &SpdMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

impl LowerTriangular {
    /// Validates a row-major buffer: zero strict upper part, positive diagonal.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::dims(dim * dim, data.len()));
        }
        for i in 0..dim {
            let d = data[i * dim + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::domain(format!("diagonal entry {i} is {d}, must be > 0")));
            }
            if data[i * dim + i + 1..(i + 1) * dim].iter().any(|&v| v != 0.0) {
                return Err(Error::domain(format!("row {i} has entries above the diagonal")));
            }
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let SpdMatrix { dim, data } = SpdMatrix::identity(dim);
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn diag(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.dim).map(move |i| self.get(i, i))
    }

    /// `L·v`.
    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, v)?;
        let n = self.dim;
        Ok((0..n)
            .map(|i| (0..=i).map(|j| self.data[i * n + j] * v[j]).sum())
            .collect())
    }

    /// `L·Lᵀ`.
    pub fn gram(&self) -> SpdMatrix {
        let n = self.dim;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.data[i * n + k] * self.data[j * n + k]).sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SpdMatrix { dim: n, data }
    }

    /// `log|L·Lᵀ| = 2·Σ log Lᵢᵢ`.
    pub fn log_det_gram(&self) -> f64 {
        2.0 * self.diag().map(f64::ln).sum::<f64>()
    }

    /// Solves `L·x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, b)?;
        let n = self.dim;
        let mut x = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.data[i * n + k] * x[k]).sum();
            x[i] = (x[i] - s) / self.data[i * n + i];
        }
        Ok(x)
    }

    /// Solves `Lᵀ·x = b`.
    pub fn solve_upper_transposed(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, b)?;
        let n = self.dim;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.data[k * n + i] * x[k]).sum();
            x[i] = (x[i] - s) / self.data[i * n + i];
        }
        Ok(x)
    }

    /// The inverse `L⁻¹`, itself lower triangular.
    pub fn inverse(&self) -> LowerTriangular {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        for col in 0..n {
            inv[col * n + col] = 1.0 / self.data[col * n + col];
            for i in col + 1..n {
                let s: f64 = (col..i).map(|k| self.data[i * n + k] * inv[k * n + col]).sum();
                inv[i * n + col] = -s / self.data[i * n + i];
            }
        }
        LowerTriangular { dim: n, data: inv }
    }

    /// `(L·Lᵀ)⁻¹ = L⁻ᵀ·L⁻¹`.
    pub fn gram_inverse(&self) -> SpdMatrix {
        let n = self.dim;
        let li = self.inverse();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                // column dot of L⁻¹: Σ_k li[k,i]·li[k,j], nonzero only for k ≥ max(i,j) = i
                let s: f64 = (i..n).map(|k| li.data[k * n + i] * li.data[k * n + j]).sum();
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SpdMatrix { dim: n, data }
    }
}

/// Cholesky factor `K` with `K·Kᵀ = S`.
pub fn cholesky(s: &SpdMatrix) -> Result<LowerTriangular> {
    let n = s.dim;
    let a = &s.data;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / djj;
        }
    }
    Ok(LowerTriangular { dim: n, data: l })
}

pub fn log_det_spd(s: &SpdMatrix) -> Result<f64> {
    Ok(cholesky(s)?.log_det_gram())
}

pub fn spd_inverse(s: &SpdMatrix) -> Result<SpdMatrix> {
    Ok(cholesky(s)?.gram_inverse())
}

/// `log|Ψ + zzᵀ|` from `log|Ψ|` and `Ψ⁻¹` by the matrix-determinant lemma.
pub fn rank1_logdet(logdet_psi: f64, psi_inv: &SpdMatrix, z: &[f64]) -> Result<f64> {
    let s = psi_inv.quad_form(z)?;
    Ok(logdet_psi + s.ln_1p())
}

/// `(Ψ + zzᵀ)⁻¹` from `Ψ⁻¹` by Sherman–Morrison.
pub fn rank1_inverse(psi_inv: &SpdMatrix, z: &[f64]) -> Result<SpdMatrix> {
    let u = psi_inv.mat_vec(z)?;
    let denom = 1.0 + dot(z, &u);
    psi_inv.add_outer(&u, -1.0 / denom)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `rows × cols` matrix times a vector.
pub fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, v)).collect()
}

/// Row-major dense product `a (m×k) · b (k×n)`.
pub fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let (crow, brow) = (&mut c[i * n..(i + 1) * n], &b[p * n..(p + 1) * n]);
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn check_len(dim: usize, v: &[f64]) -> Result<()> {
    if v.len() != dim {
        return Err(Error::dims(dim, v.len()));
    }
    Ok(())
}
