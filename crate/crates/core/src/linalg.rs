//! Dense helpers over nalgebra for the small systems that show up in the
//! sampler (F x F) and in the M-step regressions (feature-dim squared).

use nalgebra::{DMatrix, DVector};

/// Solves `(a + ridge I) x = b` for symmetric positive (semi)definite `a`.
///
/// Falls back to the minimum-norm least-squares solution when the system is
/// singular.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += ridge;
    }
    match m.clone().cholesky() {
        Some(ch) => Some(ch.solve(b)),
        None => {
            let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
            m.svd(true, true).solve(b, 1e-12 * scale).ok()
        }
    }
}

/// 2-norm condition number of a symmetric matrix (ratio of extreme
/// absolute eigenvalues). Infinite when singular.
pub(crate) fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = a.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Accumulates the natural parameters of a Gaussian full conditional:
/// precision `P = I/prior_var + sum w z z'` and shift
/// `h = prior_mean/prior_var + sum w z r`.
#[derive(Debug, Clone)]
pub(crate) struct GaussianAccumulator {
    dim: usize,
    precision: Vec<f64>,
    shift: Vec<f64>,
}

impl GaussianAccumulator {
    pub(crate) fn new(prior_mean: &[f64], prior_var: f64) -> Self {
        let dim = prior_mean.len();
        let mut precision = vec![0.0; dim * dim];
        for i in 0..dim {
            precision[i * dim + i] = 1.0 / prior_var;
        }
        GaussianAccumulator {
            dim,
            precision,
            shift: prior_mean.iter().map(|m| m / prior_var).collect(),
        }
    }

    #[inline]
    pub(crate) fn add(&mut self, z: &[f64], residual: f64, weight: f64) {
        let d = self.dim;
        for a in 0..d {
            let wza = weight * z[a];
            self.shift[a] += wza * residual;
            let row = &mut self.precision[a * d..(a + 1) * d];
            for b in 0..d {
                row[b] += wza * z[b];
            }
        }
    }

    /// Scalar fast path for one-dimensional targets.
    #[inline]
    pub(crate) fn add_scalar(&mut self, z: f64, residual: f64, weight: f64) {
        self.shift[0] += weight * z * residual;
        self.precision[0] += weight * z * z;
    }

    /// Cholesky factor of the precision and the conditional mean. If the
    /// factorization fails, `jitter` is added to the diagonal and the flag in
    /// the result is set.
    pub(crate) fn factor(&self, jitter: f64) -> Option<FactoredGaussian> {
        let d = self.dim;
        let p = DMatrix::from_row_slice(d, d, &self.precision);
        let (chol, regularized) = match p.clone().cholesky() {
            Some(c) => (c, false),
            None => {
                let mut q = p;
                for i in 0..d {
                    q[(i, i)] += jitter;
                }
                (q.cholesky()?, true)
            }
        };
        let mean = chol.solve(&DVector::from_column_slice(&self.shift));
        Some(FactoredGaussian {
            lower: chol.unpack(),
            mean,
            regularized,
        })
    }
}

pub(crate) struct FactoredGaussian {
    /// L with precision = L L'.
    pub(crate) lower: DMatrix<f64>,
    pub(crate) mean: DVector<f64>,
    pub(crate) regularized: bool,
}

impl FactoredGaussian {
    /// mean + L'^{-1} eps has covariance (L L')^{-1}.
    pub(crate) fn sample_with(&self, eps: Vec<f64>) -> Vec<f64> {
        let mut z = DVector::from_vec(eps);
        self.lower.tr_solve_upper_triangular_mut(&mut z);
        (&self.mean + z).iter().copied().collect()
    }

    pub(crate) fn covariance(&self) -> DMatrix<f64> {
        let d = self.lower.nrows();
        let mut inv_l = DMatrix::identity(d, d);
        self.lower.solve_lower_triangular_mut(&mut inv_l);
        inv_l.transpose() * inv_l
    }
}
