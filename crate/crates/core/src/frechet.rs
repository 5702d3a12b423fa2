//! Fréchet distance between Gaussian fits of two sample sets, used to score
//! generated batches against a reference dataset on raw flattened pixels.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FrechetStats {
    /// Fit mean and (unbiased) covariance to samples laid out as [n, d];
    /// higher-rank inputs are flattened per leading row.
    pub fn from_samples<T: Scalar>(samples: &Tensor<T>) -> Result<Self> {
        let shape = samples.shape();
        if shape.is_empty() {
            return Err(Error::config("stats need at least a [n, d] tensor"));
        }
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        if n < 2 || d == 0 {
            return Err(Error::config(format!(
                "stats need n >= 2 samples of nonzero dimension, got n = {n}, d = {d}"
            )));
        }
        let data = samples.data_ref();
        let mut mean = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mean[j] += data[i * d + j].as_f64();
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        let mut centered = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                centered[j] = data[i * d + j].as_f64() - mean[j];
            }
            cov.syger(1.0, &centered, &centered, 1.0);
        }
        cov /= (n - 1) as f64;
        // syger fills the lower triangle; mirror it
        for r in 0..d {
            for c in (r + 1)..d {
                cov[(r, c)] = cov[(c, r)];
            }
        }
        Ok(FrechetStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigendecompose a symmetric PSD matrix and return (Q, clamped eigenvalues).
/// Eigenvalues below -EIG_TOL are an error; small negatives round up to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals = sym.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -EIG_TOL {
            return Err(Error::config(format!(
                "{what} is not positive semidefinite: eigenvalue {v:.3e}"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((sym.eigenvectors, vals))
}

fn matrix_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (q, vals) = psd_eigen(m, what)?;
    let sqrt_vals = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt()));
    Ok(&q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose())
}

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross term
/// computed through the symmetric product S_a^{1/2} S_b S_a^{1/2}.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let root_a = matrix_sqrt(&a.cov, "first covariance")?;
    let inner = &root_a * &b.cov * &root_a;
    // symmetrize against roundoff before the second decomposition
    let inner = (&inner + inner.transpose()) * 0.5;
    let (_, vals) = psd_eigen(&inner, "cross-covariance product")?;
    let tr_cross: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}
