//! Covariance matrix adaptation evolution strategy.
//!
//! Rank-one plus rank-μ covariance update with log-rank recombination weights
//! and cumulative step-size adaptation. The eigendecomposition of `C` is
//! refreshed lazily, every `λ / ((c1 + cμ) · n · 10)` evaluations.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd::{self_adjoint_evd, self_adjoint_evd_scratch, ComputeEigenvectors};
use faer::diag::Diag;
use faer::{Mat, Par};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_tell, ranking, AskBatch};
use crate::error::{Error, Result};

/// Learning rates and constants derived from `(dim, λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmaParams {
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mueff: f64,
    pub cc: f64,
    pub cs: f64,
    pub c1: f64,
    pub cmu: f64,
    pub damps: f64,
    pub chi_n: f64,
}

impl CmaParams {
    pub fn new(dim: usize, lambda: usize) -> Self {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((mu as f64) + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n);
        let cs = (mueff + 2.0) / (n + mueff + 5.0);
        let c1 = 2.0 / ((n + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        CmaParams {
            mu,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CmaState {
    dim: usize,
    lambda: usize,
    params: CmaParams,
    mean: Vec<f64>,
    sigma: f64,
    /// Row-major `dim × dim`, kept exactly symmetric.
    cov: Vec<f64>,
    path_sigma: Vec<f64>,
    path_c: Vec<f64>,
    /// Eigenvectors of `cov` as columns, row-major storage.
    basis: Vec<f64>,
    /// Square roots of the eigenvalues of `cov`.
    scales: Vec<f64>,
    generation: u64,
    evals: u64,
    eigen_evals: u64,
    best: Option<(Vec<f64>, f64)>,
    rng: ChaCha8Rng,
}

impl CmaState {
    pub fn new(dim: usize, lambda: usize, initial_mean: Vec<f64>, initial_sigma: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("CMA-ES dimension must be positive"));
        }
        if lambda < 2 {
            return Err(Error::invalid(format!("CMA-ES population must be at least 2, got {lambda}")));
        }
        if !(initial_sigma > 0.0 && initial_sigma.is_finite()) {
            return Err(Error::invalid(format!("CMA-ES step size must be positive, got {initial_sigma}")));
        }
        if initial_mean.len() != dim {
            return Err(Error::invalid(format!(
                "initial mean has length {}, expected {dim}",
                initial_mean.len()
            )));
        }
        if initial_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial mean must be finite"));
        }
        let mut cov = vec![0.0; dim * dim];
        let mut basis = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = 1.0;
            basis[i * dim + i] = 1.0;
        }
        Ok(CmaState {
            dim,
            lambda,
            params: CmaParams::new(dim, lambda),
            mean: initial_mean,
            sigma: initial_sigma,
            cov,
            path_sigma: vec![0.0; dim],
            path_c: vec![0.0; dim],
            basis,
            scales: vec![1.0; dim],
            generation: 0,
            evals: 0,
            eigen_evals: 0,
            best: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> usize {
        self.params.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    pub fn params(&self) -> &CmaParams {
        &self.params
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Row-major covariance matrix.
    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn evaluations(&self) -> u64 {
        self.evals
    }

    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    /// Draws λ candidates from `N(mean, σ² C)`.
    pub fn ask(&mut self) -> AskBatch {
        let n = self.dim;
        let mut z = vec![0.0; n];
        let candidates = (0..self.lambda)
            .map(|_| {
                for (zj, dj) in z.iter_mut().zip(&self.scales) {
                    let s: f64 = StandardNormal.sample(&mut self.rng);
                    *zj = s * dj;
                }
                (0..n)
                    .map(|i| {
                        let row = &self.basis[i * n..(i + 1) * n];
                        let y: f64 = row.iter().zip(&z).map(|(b, v)| b * v).sum();
                        self.mean[i] + self.sigma * y
                    })
                    .collect()
            })
            .collect();
        AskBatch {
            candidates,
            generation: self.generation,
        }
    }

    /// Updates mean, paths, step size and covariance from a ranked batch.
    /// Lower fitness is better; ties keep candidate order.
    pub fn tell(&mut self, batch: &AskBatch, fitnesses: &[f64]) -> Result<()> {
        check_tell(batch, fitnesses, self.dim)?;
        if batch.candidates.len() != self.lambda {
            return Err(Error::invalid(format!(
                "CMA-ES expects {} candidates, got {}",
                self.lambda,
                batch.candidates.len()
            )));
        }
        let n = self.dim;
        let order = ranking(fitnesses);
        let best_idx = order[0];
        if self.best.as_ref().is_none_or(|(_, f)| fitnesses[best_idx] < *f) {
            self.best = Some((batch.candidates[best_idx].clone(), fitnesses[best_idx]));
        }

        let p = &self.params;
        let old_mean = std::mem::take(&mut self.mean);
        let mut mean = vec![0.0; n];
        for (w, &idx) in p.weights.iter().zip(&order) {
            for (m, x) in mean.iter_mut().zip(&batch.candidates[idx]) {
                *m += w * x;
            }
        }
        let y_w: Vec<f64> = mean
            .iter()
            .zip(&old_mean)
            .map(|(m, o)| (m - o) / self.sigma)
            .collect();
        self.mean = mean;

        // Step-size path uses C^{-1/2} y_w.
        let whitened = self.inv_sqrt_times(&y_w);
        let cs_factor = (p.cs * (2.0 - p.cs) * p.mueff).sqrt();
        for (ps, v) in self.path_sigma.iter_mut().zip(&whitened) {
            *ps = (1.0 - p.cs) * *ps + cs_factor * v;
        }
        let ps_norm = norm(&self.path_sigma);
        let t = (self.generation + 1) as f64;
        let hsig_lhs = ps_norm / (1.0 - (1.0 - p.cs).powf(2.0 * t)).sqrt() / p.chi_n;
        let hsig = if hsig_lhs < 1.4 + 2.0 / (n as f64 + 1.0) { 1.0 } else { 0.0 };

        let cc_factor = (p.cc * (2.0 - p.cc) * p.mueff).sqrt();
        for (pc, y) in self.path_c.iter_mut().zip(&y_w) {
            *pc = (1.0 - p.cc) * *pc + hsig * cc_factor * y;
        }

        let steps: Vec<Vec<f64>> = order[..p.mu]
            .iter()
            .map(|&idx| {
                batch.candidates[idx]
                    .iter()
                    .zip(&old_mean)
                    .map(|(x, o)| (x - o) / self.sigma)
                    .collect()
            })
            .collect();
        let decay = 1.0 - p.c1 - p.cmu + (1.0 - hsig) * p.c1 * p.cc * (2.0 - p.cc);
        for i in 0..n {
            for j in i..n {
                let mut rank_mu = 0.0;
                for (w, y) in p.weights.iter().zip(&steps) {
                    rank_mu += w * y[i] * y[j];
                }
                let v = decay * self.cov[i * n + j]
                    + p.c1 * self.path_c[i] * self.path_c[j]
                    + p.cmu * rank_mu;
                self.cov[i * n + j] = v;
                self.cov[j * n + i] = v;
            }
        }

        self.sigma *= ((p.cs / p.damps) * (ps_norm / p.chi_n - 1.0)).exp();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "step size left the positive reals ({}) at generation {}",
                self.sigma, self.generation
            )));
        }

        self.generation += 1;
        self.evals += self.lambda as u64;
        let interval = self.lambda as f64 / (p.c1 + p.cmu) / n as f64 / 10.0;
        if (self.evals - self.eigen_evals) as f64 > interval {
            self.refresh_eigen()?;
        }
        Ok(())
    }

    fn refresh_eigen(&mut self) -> Result<()> {
        let (values, basis) = symmetric_eigen(&self.cov, self.dim)?;
        let floor = values.iter().cloned().fold(0.0f64, f64::max) * 1e-14;
        self.scales = values.iter().map(|&v| v.max(floor).max(f64::MIN_POSITIVE).sqrt()).collect();
        self.basis = basis;
        self.eigen_evals = self.evals;
        Ok(())
    }

    fn inv_sqrt_times(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut coeffs = vec![0.0; n];
        for (row, vi) in self.basis.chunks_exact(n).zip(v) {
            for (c, b) in coeffs.iter_mut().zip(row) {
                *c += b * vi;
            }
        }
        for (c, d) in coeffs.iter_mut().zip(&self.scales) {
            *c /= d;
        }
        (0..n)
            .map(|i| {
                let row = &self.basis[i * n..(i + 1) * n];
                row.iter().zip(&coeffs).map(|(b, c)| b * c).sum()
            })
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigenvalues (ascending) and row-major eigenvector matrix of a symmetric
/// row-major matrix. Runs sequentially so results are reproducible.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = Mat::<f64>::from_fn(n, n, |i, j| matrix[i * n + j]);
    let mut s = Diag::<f64>::zeros(n);
    let mut u = Mat::<f64>::zeros(n, n);
    let par = Par::Seq;
    let mut mem = MemBuffer::new(self_adjoint_evd_scratch::<f64>(
        n,
        ComputeEigenvectors::Yes,
        par,
        Default::default(),
    ));
    self_adjoint_evd(
        a.as_ref(),
        s.as_mut(),
        Some(u.as_mut()),
        par,
        MemStack::new(&mut mem),
        Default::default(),
    )
    .map_err(|e| Error::invalid(format!("eigendecomposition failed: {e:?}")))?;
    let values = (0..n).map(|i| s.column_vector()[i]).collect();
    let mut basis = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            basis[i * n + j] = u[(i, j)];
        }
    }
    Ok((values, basis))
}
