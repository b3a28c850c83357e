use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative diagonal loading applied whenever a covariance is inverted.
pub const DEFAULT_LOADING: f64 = 1e-10;

/// Largest relative loading tried before a factorization is declared failed.
pub const MAX_LOADING: f64 = 1e-1;

const STACK_DIM: usize = 16;

/// Hermitian positive-definite matrix, stored row-major.
///
/// Construction symmetrizes the input and, if the Cholesky factorization
/// fails, escalates diagonal loading from [`DEFAULT_LOADING`] up to
/// [`MAX_LOADING`]. A constructed instance therefore always factorizes.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianPD {
    dim: usize,
    data: Vec<Complex64>,
}

/// Lower-triangular factor `L` with `M = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<Complex64>,
}

impl HermitianPD {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(1.0, 0.0);
        }
        Self { dim, data }
    }

    /// Builds a matrix from arbitrary square input: non-finite entries are
    /// rejected, the Hermitian part is taken and loading is escalated until
    /// the factorization succeeds.
    pub fn new(m: Array2<Complex64>) -> Result<Self> {
        let (rows, cols) = m.dim();
        if rows != cols || rows == 0 {
            return Err(Error::invalid_input(format!(
                "expected a non-empty square matrix, got {rows}x{cols}"
            )));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid_input("matrix has non-finite entries"));
        }
        let raw = Self {
            dim: rows,
            data: m.iter().copied().collect(),
        };
        Self::from_hermitian_data(raw.dim, raw.symmetrized_data())
    }

    /// Same as [`HermitianPD::new`] for a row-major buffer that is already
    /// Hermitian up to rounding.
    pub(crate) fn from_hermitian_data(dim: usize, data: Vec<Complex64>) -> Result<Self> {
        let candidate = Self { dim, data };
        let candidate = Self {
            dim,
            data: candidate.symmetrized_data(),
        };
        if candidate.cholesky_raw().is_some() {
            return Ok(candidate);
        }
        let mut eps = DEFAULT_LOADING;
        while eps <= MAX_LOADING * (1.0 + 1e-9) {
            let loaded = load(&candidate, eps);
            if loaded.cholesky_raw().is_some() {
                return Ok(loaded);
            }
            eps *= 10.0;
        }
        Err(Error::numerical(
            "matrix is not positive definite after maximum diagonal loading",
        ))
    }

    fn symmetrized_data(&self) -> Vec<Complex64> {
        let n = self.dim;
        let mut out = vec![Complex64::new(0.0, 0.0); n * n];
        for i in 0..n {
            out[i * n + i] = Complex64::new(self.data[i * n + i].re, 0.0);
            for j in (i + 1)..n {
                let v = (self.data[i * n + j] + self.data[j * n + i].conj()) * 0.5;
                out[i * n + j] = v;
                out[j * n + i] = v.conj();
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn to_array(&self) -> Array2<Complex64> {
        Array2::from_shape_vec((self.dim, self.dim), self.data.clone())
            .expect("buffer length matches dimension")
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i].re).sum()
    }

    /// Positive rescaling; keeps the invariants without re-factorizing.
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0 && factor.is_finite(), "scale must be positive");
        Self {
            dim: self.dim,
            data: self.data.iter().map(|z| z * factor).collect(),
        }
    }

    /// Rescales to the given trace.
    pub fn with_trace(&self, target: f64) -> Self {
        self.scaled(target / self.trace())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn frobenius_distance(&self, other: &HermitianPD) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        self.cholesky_raw()
            .ok_or_else(|| Error::numerical("Cholesky factorization failed"))
    }

    fn cholesky_raw(&self) -> Option<Cholesky> {
        let n = self.dim;
        let mut l = vec![Complex64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = self.data[j * n + j].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let ljj = d.sqrt();
            l[j * n + j] = Complex64::new(ljj, 0.0);
            for i in (j + 1)..n {
                let mut s = self.data[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / ljj;
            }
        }
        Some(Cholesky { dim: n, l })
    }

    /// Principal eigenvector by power iteration, normalized to unit norm.
    pub fn principal_eigenvector(&self) -> Vec<Complex64> {
        let n = self.dim;
        // Start from the column with the largest diagonal entry; it cannot be
        // orthogonal to the principal eigenvector of a PD matrix.
        let start = (0..n)
            .max_by(|&a, &b| {
                self.data[a * n + a]
                    .re
                    .total_cmp(&self.data[b * n + b].re)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let mut v: Vec<Complex64> = (0..n).map(|i| self.data[i * n + start]).collect();
        normalize(&mut v);
        let mut next = vec![Complex64::new(0.0, 0.0); n];
        for _ in 0..2000 {
            for i in 0..n {
                next[i] = (0..n).map(|j| self.data[i * n + j] * v[j]).sum();
            }
            normalize(&mut next);
            // Align phase before measuring convergence.
            let overlap: Complex64 = next.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            let phase = if overlap.norm() > 0.0 {
                overlap / overlap.norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            let mut delta = 0.0;
            for i in 0..n {
                let aligned = next[i] * phase;
                delta += (aligned - v[i]).norm_sqr();
                v[i] = aligned;
            }
            if delta < 1e-26 {
                break;
            }
        }
        v
    }
}

fn normalize(v: &mut [Complex64]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 {
        for z in v.iter_mut() {
            *z /= norm;
        }
    }
}

fn load(m: &HermitianPD, eps_rel: f64) -> HermitianPD {
    let n = m.dim;
    let tr = m.trace();
    let amount = if tr > 0.0 && tr.is_finite() {
        eps_rel * tr / n as f64
    } else {
        eps_rel
    };
    let mut data = m.data.clone();
    for i in 0..n {
        data[i * n + i] += amount;
    }
    HermitianPD { dim: n, data }
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim)
            .map(|i| self.l[i * self.dim + i].re.ln())
            .sum::<f64>()
    }

    /// `v^H M^{-1} v` via forward substitution.
    pub fn quad_form(&self, v: &[Complex64]) -> f64 {
        let n = self.dim;
        debug_assert_eq!(v.len(), n);
        if n <= STACK_DIM {
            let mut z = [Complex64::new(0.0, 0.0); STACK_DIM];
            self.forward_into(v, &mut z[..n])
        } else {
            let mut z = vec![Complex64::new(0.0, 0.0); n];
            self.forward_into(v, &mut z)
        }
    }

    fn forward_into(&self, v: &[Complex64], z: &mut [Complex64]) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let mut s = v[i];
            for (lik, zk) in row.iter().zip(z.iter()) {
                s -= lik * zk;
            }
            let zi = s / self.l[i * n + i].re;
            acc += zi.norm_sqr();
            z[i] = zi;
        }
        acc
    }

    /// `L v`; maps white complex Gaussian vectors to covariance `M`.
    pub fn lower_mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        (0..n)
            .map(|i| {
                self.l[i * n..=i * n + i]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Solves `M x = v`.
    pub fn solve(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.dim;
        let mut z = vec![Complex64::new(0.0, 0.0); n];
        self.forward_into(v, &mut z);
        // Back substitution with L^H.
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i].conj() * z[k];
            }
            z[i] = s / self.l[i * n + i].re;
        }
        z
    }
}

/// Returns `(log det m, Re(v^H m^{-1} v))`.
pub fn cholesky_logdet_solve(m: &HermitianPD, v: &[Complex64]) -> Result<(f64, f64)> {
    if v.len() != m.dim() {
        return Err(Error::invalid_input(format!(
            "vector of length {} does not match matrix dimension {}",
            v.len(),
            m.dim()
        )));
    }
    if v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid_input("vector has non-finite entries"));
    }
    let chol = m.cholesky()?;
    let logdet = chol.logdet();
    let quad = chol.quad_form(v);
    if !logdet.is_finite() || !quad.is_finite() {
        return Err(Error::numerical("non-finite log-determinant or quadratic form"));
    }
    Ok((logdet, quad))
}

/// `m + eps_rel * (trace(m) / C) * I`, falling back to `m + eps_rel * I`
/// when the trace is not positive.
///
/// Accepts any Hermitian positive semi-definite input (including the zero
/// matrix); the result is guaranteed to factorize or an error is returned.
pub fn diagonal_load(m: &Array2<Complex64>, eps_rel: f64) -> Result<HermitianPD> {
    if !(eps_rel > 0.0) {
        return Err(Error::invalid_input("loading must be positive"));
    }
    let (rows, cols) = m.dim();
    if rows != cols || rows == 0 {
        return Err(Error::invalid_input("expected a non-empty square matrix"));
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid_input("matrix has non-finite entries"));
    }
    let raw = HermitianPD {
        dim: rows,
        data: m.iter().copied().collect(),
    };
    let sym = HermitianPD {
        dim: rows,
        data: raw.symmetrized_data(),
    };
    let loaded = load(&sym, eps_rel);
    if loaded.cholesky_raw().is_some() {
        Ok(loaded)
    } else {
        HermitianPD::from_hermitian_data(loaded.dim, loaded.data)
    }
}
