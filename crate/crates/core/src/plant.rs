//! Synthetic benchmark plants with known ground truth: a stable linear
//! system, a bilinear system with product nonlinearities, and the bilinear
//! system with a mid-run coefficient drift.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Linear,
    Bilinear,
    Drifting,
}

impl std::str::FromStr for PlantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(PlantKind::Linear),
            "bilinear" => Ok(PlantKind::Bilinear),
            "drifting" => Ok(PlantKind::Drifting),
            other => Err(Error::InvalidConfig(format!("unknown plant '{other}'"))),
        }
    }
}

/// Fixed benchmark coefficients. The linear plant uses
/// `x' = A x + B u`; the bilinear plant uses
/// `x'_i = a_i x_i + g_i x_i u_i + c_i x_j u_m` couplings documented in
/// [`SyntheticPlant::bilinear`].
#[derive(Debug, Clone)]
pub struct SyntheticPlant {
    pub kind: PlantKind,
    pub noise_std: DVector<f64>,
    /// Drift: after `drift_at` steps, bilinear gains scale by `drift_scale`.
    pub drift_at: Option<usize>,
    pub drift_scale: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl SyntheticPlant {
    /// Stable 3-state, 2-input linear plant.
    pub fn linear(noise_std: f64) -> Self {
        Self {
            kind: PlantKind::Linear,
            noise_std: DVector::from_element(3, noise_std),
            drift_at: None,
            drift_scale: 1.0,
            a: DMatrix::from_row_slice(
                3,
                3,
                &[0.8, 0.1, 0.0, 0.0, 0.7, 0.1, 0.05, 0.0, 0.75],
            ),
            b: DMatrix::from_row_slice(3, 2, &[0.5, 0.0, 0.0, 0.3, 0.1, 0.2]),
        }
    }

    /// Bilinear 3-state, 3-input plant with state-input products mimicking
    /// steam-moisture coupling:
    ///
    /// ```text
    /// x1' = 0.9 x1 + 0.1 x1 u1
    /// x2' = 0.85 x2 + 0.1 x2 u2 + 0.05 u3
    /// x3' = 0.8 x3 + 0.1 x3 u3 + 0.05 x1 u2
    /// ```
    pub fn bilinear(noise_std: f64) -> Self {
        Self {
            kind: PlantKind::Bilinear,
            noise_std: DVector::from_element(3, noise_std),
            drift_at: None,
            drift_scale: 1.0,
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 0),
        }
    }

    /// Bilinear plant whose input gains grow by 20% after `drift_at` steps.
    pub fn drifting(noise_std: f64, drift_at: usize) -> Self {
        Self {
            kind: PlantKind::Drifting,
            drift_at: Some(drift_at),
            drift_scale: 1.2,
            ..Self::bilinear(noise_std)
        }
    }

    pub fn by_name(name: &str, noise_std: f64, drift_at: usize) -> Result<Self> {
        Ok(match name.parse::<PlantKind>()? {
            PlantKind::Linear => Self::linear(noise_std),
            PlantKind::Bilinear => Self::bilinear(noise_std),
            PlantKind::Drifting => Self::drifting(noise_std, drift_at),
        })
    }

    pub fn state_dim(&self) -> usize {
        3
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            PlantKind::Linear => 2,
            _ => 3,
        }
    }

    /// Ground-truth linear matrices (linear kind only), for recovery oracles.
    pub fn linear_matrices(&self) -> Option<(&DMatrix<f64>, &DMatrix<f64>)> {
        if self.kind == PlantKind::Linear {
            Some((&self.a, &self.b))
        } else {
            None
        }
    }

    /// Noise-free plant map at a given step index (drift applies past the
    /// scheduled step).
    pub fn map(&self, x: &DVector<f64>, u: &DVector<f64>, step: usize) -> DVector<f64> {
        let drifted = self
            .drift_at
            .map(|at| step >= at)
            .unwrap_or(false);
        let g = if drifted { 0.1 * self.drift_scale } else { 0.1 };
        let c = if drifted { 0.05 * self.drift_scale } else { 0.05 };
        match self.kind {
            PlantKind::Linear => &self.a * x + &self.b * u,
            PlantKind::Bilinear | PlantKind::Drifting => {
                let mut out = DVector::zeros(3);
                out[0] = 0.9 * x[0] + g * x[0] * u[0];
                out[1] = 0.85 * x[1] + g * x[1] * u[1] + c * u[2];
                out[2] = 0.8 * x[2] + g * x[2] * u[2] + c * x[0] * u[1];
                out
            }
        }
    }

    /// Advances one step with Gaussian noise from the supplied stream.
    pub fn step<R: Rng>(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        step: usize,
        rng: &mut R,
    ) -> DVector<f64> {
        let mut next = self.map(x, u, step);
        for i in 0..next.len() {
            if self.noise_std[i] > 0.0 {
                let n = Normal::new(0.0, self.noise_std[i]).unwrap();
                next[i] += n.sample(rng);
            }
        }
        next
    }
}
