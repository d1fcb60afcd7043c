//! Karhunen-Loeve representation of log-normal random fields on a set of
//! mesh nodes.
//!
//! The underlying Gaussian field is discretized by an eigendecomposition of
//! the weighted node covariance matrix; the physical field is the
//! exponential of the Gaussian one, with its parameters matched so the
//! *physical* marginal has the requested mean and coefficient of variation.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid kernel: {0}")]
    BadKernel(String),
    #[error("truncation {m} exceeds node count {nodes}")]
    TruncationTooLarge { m: usize, nodes: usize },
    #[error("covariance is numerically indefinite beyond repair (min eigenvalue {0})")]
    Indefinite(f64),
    #[error("coefficient vector has length {got}, basis expects {expected}")]
    BadCoefficients { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelKind {
    Exponential,
    SquaredExponential,
}

/// Stationary covariance kernel of the underlying Gaussian field.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CovarianceKernel {
    pub kind: KernelKind,
    /// Marginal standard deviation of the Gaussian field.
    pub sigma: f64,
    /// Correlation length, in mesh coordinate units.
    pub ell: f64,
}

impl CovarianceKernel {
    pub fn validate(&self) -> Result<(), FieldError> {
        if !(self.sigma > 0.0) {
            return Err(FieldError::BadKernel("sigma must be positive".into()));
        }
        if !(self.ell > 0.0) {
            return Err(FieldError::BadKernel("ell must be positive".into()));
        }
        Ok(())
    }

    pub fn eval(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let r = (dx * dx + dy * dy).sqrt();
        let s2 = self.sigma * self.sigma;
        match self.kind {
            KernelKind::Exponential => s2 * (-r / self.ell).exp(),
            KernelKind::SquaredExponential => s2 * (-0.5 * (r / self.ell).powi(2)).exp(),
        }
    }
}

/// Log-normal marginal descriptor in physical moments.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LogNormalMarginal {
    /// Mean of the physical field.
    pub mean: f64,
    /// Coefficient of variation of the physical field.
    pub cv: f64,
}

impl LogNormalMarginal {
    /// Standard deviation of the matched Gaussian field.
    pub fn sigma_g(&self) -> f64 {
        (1.0 + self.cv * self.cv).ln().sqrt()
    }

    /// Mean of the matched Gaussian field.
    pub fn mu_g(&self) -> f64 {
        self.mean.ln() - 0.5 * (1.0 + self.cv * self.cv).ln()
    }
}

/// Truncated discrete KL basis.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KLBasis {
    pub nodes: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub marginal: LogNormalMarginal,
    /// Descending positive eigenvalues, length M.
    pub eigenvalues: Vec<f64>,
    /// Node-value eigenvectors, column i for mode i; orthonormal in the
    /// weighted inner product.
    pub eigenvectors: DMatrix<f64>,
    pub energy_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct FieldRealization {
    /// Physical (positive) field at nodes.
    pub values: Vec<f64>,
    /// Zero-mean Gaussian part at nodes.
    pub gaussian: Vec<f64>,
    pub source_xi: Vec<f64>,
}

impl KLBasis {
    pub fn truncation(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Eigendecomposition of the weighted node covariance, truncated to the M
/// leading modes. Weights default to uniform 1/n when not supplied.
pub fn kl_decompose(
    nodes: &[[f64; 2]],
    weights: Option<&[f64]>,
    kernel: &CovarianceKernel,
    marginal: LogNormalMarginal,
    m: usize,
) -> Result<KLBasis, FieldError> {
    kernel.validate()?;
    let n = nodes.len();
    if m == 0 || m > n {
        return Err(FieldError::TruncationTooLarge { m, nodes: n });
    }
    let w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0 / n as f64; n],
    };
    if w.len() != n || w.iter().any(|&x| !(x > 0.0)) {
        return Err(FieldError::BadKernel("weights must be positive, one per node".into()));
    }
    let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();

    // Weighted covariance W^{1/2} C W^{1/2}.
    let mut cw = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(nodes[i], nodes[j]) * sqrt_w[i] * sqrt_w[j];
            cw[(i, j)] = v;
            cw[(j, i)] = v;
        }
    }
    let trace = cw.trace();

    let eig = cw.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    // Shift-regularize if roundoff produced meaningful negative modes.
    let min_val = *vals.last().unwrap();
    if min_val < -1e-12 * trace {
        let shift = 1e-12 * trace;
        log::warn!(
            "covariance numerically indefinite (min eigenvalue {min_val:.3e}); shifting by {shift:.3e}"
        );
        for v in &mut vals {
            *v += shift;
        }
    }
    for v in &mut vals {
        *v = v.max(0.0);
    }
    if vals[m - 1] <= 0.0 {
        return Err(FieldError::Indefinite(vals[m - 1]));
    }

    let mut phi = DMatrix::zeros(n, m);
    for (col, &src) in order.iter().take(m).enumerate() {
        // phi = W^{-1/2} psi, with the first nonzero entry positive.
        let mut column: Vec<f64> = (0..n).map(|r| eig.eigenvectors[(r, src)] / sqrt_w[r]).collect();
        if let Some(first) = column.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in &mut column {
                    *x = -*x;
                }
            }
        }
        for r in 0..n {
            phi[(r, col)] = column[r];
        }
    }

    let energy: f64 = vals[..m].iter().sum();
    Ok(KLBasis {
        nodes: nodes.to_vec(),
        weights: w,
        marginal,
        eigenvalues: vals[..m].to_vec(),
        eigenvectors: phi,
        energy_fraction: energy / trace,
    })
}

/// Evaluates the physical field exp(mu_g + sum_i sqrt(lambda_i) phi_i xi_i).
pub fn realize(basis: &KLBasis, xi: &[f64]) -> Result<FieldRealization, FieldError> {
    let m = basis.truncation();
    if xi.len() != m {
        return Err(FieldError::BadCoefficients { expected: m, got: xi.len() });
    }
    let n = basis.node_count();
    let mu_g = basis.marginal.mu_g();
    let mut gaussian = vec![0.0; n];
    for i in 0..m {
        let s = basis.eigenvalues[i].sqrt() * xi[i];
        if s == 0.0 {
            continue;
        }
        for r in 0..n {
            gaussian[r] += s * basis.eigenvectors[(r, i)];
        }
    }
    let values = gaussian.iter().map(|&g| (mu_g + g).exp()).collect();
    Ok(FieldRealization { values, gaussian, source_xi: xi.to_vec() })
}

/// Max absolute deviation between the empirical Gaussian-field covariance
/// over `n_samples` realizations and the truncated covariance
/// sum_i lambda_i phi_i phi_i^T, on a probe subset of nodes.
pub fn covariance_check(basis: &KLBasis, n_samples: usize, seed: u64) -> Result<f64, FieldError> {
    use rand_distr::{Distribution, StandardNormal};
    if n_samples < 1000 {
        return Err(FieldError::BadKernel("need at least 1000 samples".into()));
    }
    let n = basis.node_count();
    let m = basis.truncation();
    let stride = (n / 30).max(1);
    let probes: Vec<usize> = (0..n).step_by(stride).collect();
    let np = probes.len();

    let mut rng = crate::seeds::SeedNode::new(seed).child("cov-check").rng();
    let mut acc = DMatrix::zeros(np, np);
    let mut g = vec![0.0; np];
    let mut xi = vec![0.0; m];
    for _ in 0..n_samples {
        for x in &mut xi {
            *x = StandardNormal.sample(&mut rng);
        }
        for (pi, &node) in probes.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..m {
                s += basis.eigenvalues[i].sqrt() * basis.eigenvectors[(node, i)] * xi[i];
            }
            g[pi] = s;
        }
        for a in 0..np {
            for b in 0..np {
                acc[(a, b)] += g[a] * g[b];
            }
        }
    }
    acc /= n_samples as f64;

    let mut max_err: f64 = 0.0;
    for a in 0..np {
        for b in 0..np {
            let mut truncated = 0.0;
            for i in 0..m {
                truncated += basis.eigenvalues[i]
                    * basis.eigenvectors[(probes[a], i)]
                    * basis.eigenvectors[(probes[b], i)];
            }
            max_err = max_err.max((acc[(a, b)] - truncated).abs());
        }
    }
    Ok(max_err)
}
