//! Synthetic "historical" batches: the bilinear plant driven by a
//! deliberately sloppy operator policy (nominal inputs plus heavy dither),
//! producing batch logs with the same shape the ingest pipeline emits.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ingest::BatchLog;
use crate::plant::SyntheticPlant;

/// Sloppy-operator policy parameters.
#[derive(Debug, Clone)]
pub struct SloppyPolicy {
    /// Nominal input held between dithers.
    pub u_nominal: DVector<f64>,
    /// Uniform dither half-width per channel.
    pub dither: DVector<f64>,
    /// Box the operator never leaves.
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

impl SloppyPolicy {
    /// Default policy for the bilinear plant: inputs near 0.5 with a wide
    /// uniform dither inside [-0.9, 0.9].
    pub fn bilinear_default() -> Self {
        Self {
            u_nominal: DVector::from_element(3, 0.5),
            dither: DVector::from_element(3, 0.35),
            u_min: DVector::from_element(3, -0.9),
            u_max: DVector::from_element(3, 0.9),
        }
    }
}

/// Generates one batch: starts near the policy's operating point and
/// applies `u_nominal + dither` at every step. Time is in minutes at a
/// one-minute period.
pub fn sloppy_batch(
    plant: &SyntheticPlant,
    policy: &SloppyPolicy,
    x0: &DVector<f64>,
    steps: usize,
    batch_id: u32,
    seed: u64,
) -> Result<BatchLog> {
    if steps < 2 {
        return Err(Error::InvalidConfig("batch needs at least 2 steps".into()));
    }
    let n_c = plant.input_dim();
    if policy.u_nominal.len() != n_c {
        return Err(Error::DimensionMismatch {
            context: "sloppy policy input dimension",
            expected: n_c,
            got: policy.u_nominal.len(),
        });
    }
    let n_s = plant.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut t = Vec::with_capacity(steps);
    let mut states = DMatrix::zeros(steps, n_s);
    let mut inputs = DMatrix::zeros(steps, n_c);
    for k in 0..steps {
        let u = DVector::from_fn(n_c, |j, _| {
            let v = policy.u_nominal[j] + rng.gen_range(-policy.dither[j]..policy.dither[j]);
            v.clamp(policy.u_min[j], policy.u_max[j])
        });
        t.push(k as f64);
        for j in 0..n_s {
            states[(k, j)] = x[j];
        }
        for j in 0..n_c {
            inputs[(k, j)] = u[j];
        }
        x = plant.step(&x, &u, k, &mut rng);
    }
    Ok(BatchLog {
        batch_id,
        t,
        states,
        inputs,
        valid: vec![true; steps],
    })
}

/// Generates a family of batches with per-batch seeds derived from the
/// base seed.
pub fn sloppy_batches(
    plant: &SyntheticPlant,
    policy: &SloppyPolicy,
    x0: &DVector<f64>,
    steps: usize,
    count: usize,
    base_seed: u64,
) -> Result<Vec<BatchLog>> {
    (0..count)
        .map(|i| {
            sloppy_batch(
                plant,
                policy,
                x0,
                steps,
                (i + 1) as u32,
                base_seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

/// The bilinear plant's steady state under the nominal input of
/// [`SloppyPolicy::bilinear_default`]; a sensible setpoint for the
/// synthetic experiments.
pub fn bilinear_nominal_setpoint() -> DVector<f64> {
    // u = (0.5, 0.5, 0.5): x1 -> 0; x2* = 0.05*0.5 / (1 - 0.85 - 0.05);
    // x3 -> 0 once x1 has decayed.
    DVector::from_row_slice(&[0.0, 0.25, 0.0])
}
