//! Random projections from intrinsic-dimension search vectors to low-rank factors.
//!
//! For every adapted projection `t` of a layer there are two frozen Gaussian
//! tensors: `G_A ∈ R^{(r·k)×d}` producing `A_t = reshape(G_A · m_A, r×k)` and
//! `G_B ∈ R^{(D·r)×d}` producing `B_t = reshape(G_B · m_B, D×r)`. Reshapes are
//! row-major. With targets `{Q, K}` a layer is searched through the
//! concatenation `m_AQ ‖ m_BQ ‖ m_AK ‖ m_BK` of length `4d`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{LowRankPair, Target};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::seeds::derive_seed;
use crate::tensors::NamedTensor;

/// Fixed projection std used by [`InitMode::Ri`].
pub const RI_STD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    /// Scale from the layer's observed hidden-state std.
    #[serde(rename = "RIL", alias = "ril")]
    Ril,
    /// Fixed `N(0, 0.5)` regardless of the model.
    #[serde(rename = "RI", alias = "ri")]
    Ri,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RIL" => Ok(InitMode::Ril),
            "RI" => Ok(InitMode::Ri),
            other => Err(Error::invalid(format!("unknown init mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Ril => "RIL",
            InitMode::Ri => "RI",
        })
    }
}

/// `σ_m = α·σ̂ / (√d·σ_z)`.
pub fn projection_std(alpha: f64, sigma_hat: f64, d: usize, sigma_z: f64) -> Result<f64> {
    if !(alpha > 0.0 && sigma_hat > 0.0 && sigma_z > 0.0) || d == 0 {
        return Err(Error::invalid(format!(
            "projection scale needs positive inputs (alpha={alpha}, sigma_hat={sigma_hat}, d={d}, sigma_z={sigma_z})"
        )));
    }
    Ok(alpha * sigma_hat / ((d as f64).sqrt() * sigma_z))
}

/// Frozen `rows × d` Gaussian matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionTensor {
    rows: usize,
    cols: usize,
    std: f64,
    data: Vec<f64>,
}

impl ProjectionTensor {
    /// Entries i.i.d. `N(0, σ_m²)` with `σ_m` from [`projection_std`].
    pub fn from_hidden_std(rows: usize, d: usize, sigma_hat: f64, sigma_z: f64, alpha: f64, seed: u64) -> Result<Self> {
        Self::with_std(rows, d, projection_std(alpha, sigma_hat, d, sigma_z)?, seed)
    }

    pub fn with_std(rows: usize, d: usize, std: f64, seed: u64) -> Result<Self> {
        if rows == 0 || d == 0 {
            return Err(Error::invalid(format!("projection shape {rows}x{d} must be positive")));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("projection std must be positive, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * d).map(|_| dist.sample(&mut rng)).collect();
        Ok(ProjectionTensor {
            rows,
            cols: d,
            std,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Intrinsic dimension `d`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Std the entries were drawn with.
    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    /// `G · m` reshaped row-major to `p × q`.
    pub fn project(&self, m: &[f64], shape: (usize, usize)) -> Result<Matrix> {
        let (p, q) = shape;
        if m.len() != self.cols {
            return Err(Error::invalid(format!(
                "subspace vector has length {}, projection expects {}",
                m.len(),
                self.cols
            )));
        }
        if p * q != self.rows {
            return Err(Error::invalid(format!(
                "target shape {p}x{q} does not hold {} projected values",
                self.rows
            )));
        }
        let values = self.data.chunks_exact(self.cols).map(|row| dot(row, m)).collect();
        Matrix::from_vec(p, q, values)
    }

    pub fn to_tensor(&self, name: impl Into<String>) -> NamedTensor {
        NamedTensor {
            name: name.into(),
            shape: vec![self.rows, self.cols],
            data: self.data.clone(),
        }
    }
}

/// Projections of one layer: an `(A, B)` pair of tensors per target.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSubspace {
    layer: usize,
    d: usize,
    rank: usize,
    hidden: usize,
    attn_dim: usize,
    targets: Vec<Target>,
    projections: Vec<(ProjectionTensor, ProjectionTensor)>,
}

impl LayerSubspace {
    /// Tensors are sampled independently per role with the same `std`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layer: usize,
        targets: &[Target],
        d: usize,
        rank: usize,
        hidden: usize,
        attn_dim: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("at least one target weight is required"));
        }
        let mut sorted = targets.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != targets.len() {
            return Err(Error::invalid("target weights must be distinct"));
        }
        if rank == 0 {
            return Err(Error::invalid("rank must be positive"));
        }
        let projections = targets
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let a_seed = derive_seed(seed, (layer * 16 + 2 * i) as u64);
                let b_seed = derive_seed(seed, (layer * 16 + 2 * i + 1) as u64);
                Ok((
                    ProjectionTensor::with_std(rank * attn_dim, d, std, a_seed)?,
                    ProjectionTensor::with_std(hidden * rank, d, std, b_seed)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSubspace {
            layer,
            d,
            rank,
            hidden,
            attn_dim,
            targets: targets.to_vec(),
            projections,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn projections(&self) -> &[(ProjectionTensor, ProjectionTensor)] {
        &self.projections
    }

    /// Length of the concatenated search vector: two `d`-vectors per target.
    pub fn search_dim(&self) -> usize {
        2 * self.targets.len() * self.d
    }

    /// One low-rank pair per target from the concatenated search vector.
    pub fn materialize(&self, m: &[f64]) -> Result<Vec<LowRankPair>> {
        if m.len() != self.search_dim() {
            return Err(Error::invalid(format!(
                "layer {} expects a search vector of length {}, got {}",
                self.layer,
                self.search_dim(),
                m.len()
            )));
        }
        let d = self.d;
        self.targets
            .iter()
            .zip(&self.projections)
            .enumerate()
            .map(|(i, (&target, (ga, gb)))| {
                let m_a = &m[2 * i * d..(2 * i + 1) * d];
                let m_b = &m[(2 * i + 1) * d..(2 * i + 2) * d];
                let a = ga.project(m_a, (self.rank, self.attn_dim))?;
                let b = gb.project(m_b, (self.hidden, self.rank))?;
                LowRankPair::new(self.layer, target, a, b)
            })
            .collect()
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        self.targets
            .iter()
            .zip(&self.projections)
            .flat_map(|(t, (ga, gb))| {
                [
                    ga.to_tensor(format!("subspace.layer.{}.A_{t}", self.layer)),
                    gb.to_tensor(format!("subspace.layer.{}.B_{t}", self.layer)),
                ]
            })
            .collect()
    }
}
