//! Self-describing textual model file: dictionary exponent list, parameter
//! matrix, covariance, forgetting state. JSON with full-precision decimals;
//! save/load round-trips theta bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ident::LiftedModel;
use crate::ingest::Normalization;
use crate::lifting::Dictionary;

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub state_dim: usize,
    pub degree: usize,
    /// Ordered exponent tuples defining the lifted coordinates.
    pub monomials: Vec<Vec<u32>>,
    pub n_inputs: usize,
    /// Row-major N_obs x (N_obs + n_inputs).
    pub theta: Vec<f64>,
    /// Row-major (N_obs + n_inputs) square.
    pub covariance: Vec<f64>,
    pub lambda_f: f64,
    pub lambda_reg: f64,
    pub p0_trace: f64,
    pub step_count: u64,
    /// Per-channel z-score statistics frozen at fit time, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl ModelFile {
    pub fn from_model(
        model: &LiftedModel,
        dict: &Dictionary,
        normalization: Option<Normalization>,
    ) -> Self {
        Self {
            version: MODEL_FILE_VERSION,
            state_dim: dict.state_dim(),
            degree: dict.degree(),
            monomials: dict.monomials().to_vec(),
            n_inputs: model.n_inputs(),
            theta: row_major(model.theta()),
            covariance: row_major(model.covariance()),
            lambda_f: model.lambda_f(),
            lambda_reg: model.lambda_reg(),
            p0_trace: model.p0_trace(),
            step_count: model.step_count(),
            normalization,
        }
    }

    pub fn into_model(self) -> Result<(LiftedModel, Dictionary, Option<Normalization>)> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported model file version {}",
                self.version
            )));
        }
        let dict = Dictionary::from_monomials(self.state_dim, self.degree, self.monomials)?;
        let n_obs = dict.lifted_dim();
        let dim = n_obs + self.n_inputs;
        if self.theta.len() != n_obs * dim {
            return Err(Error::DimensionMismatch {
                context: "model file theta length",
                expected: n_obs * dim,
                got: self.theta.len(),
            });
        }
        if self.covariance.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                context: "model file covariance length",
                expected: dim * dim,
                got: self.covariance.len(),
            });
        }
        let theta = DMatrix::from_row_slice(n_obs, dim, &self.theta);
        let p = DMatrix::from_row_slice(dim, dim, &self.covariance);
        let model = LiftedModel::from_parts(
            theta,
            p,
            self.lambda_f,
            self.lambda_reg,
            self.p0_trace,
            self.step_count,
            self.n_inputs,
        )?;
        Ok((model, dict, self.normalization))
    }
}

pub fn save_model(
    path: &Path,
    model: &LiftedModel,
    dict: &Dictionary,
    normalization: Option<Normalization>,
) -> Result<()> {
    let file = ModelFile::from_model(model, dict, normalization);
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, &file)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(LiftedModel, Dictionary, Option<Normalization>)> {
    let r = BufReader::new(File::open(path)?);
    let file: ModelFile = serde_json::from_reader(r)?;
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::{batch_fit, Snapshot};
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_roundtrip_is_bit_identical_on_theta() {
        let dict = Dictionary::new(3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let snaps: Vec<Snapshot> = (0..100)
            .map(|_| {
                Snapshot::new(
                    DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                    DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let model = batch_fit(&snaps, &dict, 1e-3).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.json");
        save_model(&path, &model, &dict, None).unwrap();
        let (loaded, dict2, norm) = load_model(&path).unwrap();
        assert!(norm.is_none());
        assert_eq!(dict2, dict);
        // Bit-identical: compare raw bits, not within tolerance.
        for (a, b) in model.theta().iter().zip(loaded.theta().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(model.step_count(), loaded.step_count());
        assert_eq!(model.p0_trace(), loaded.p0_trace());
    }

    #[test]
    fn rejects_unknown_version() {
        let dict = Dictionary::new(2, 1).unwrap();
        let model = crate::ident::LiftedModel::zeroed(dict.lifted_dim(), 1, 0.995, 1e-3);
        let mut file = ModelFile::from_model(&model, &dict, None);
        file.version = 99;
        assert!(file.into_model().is_err());
    }
}
