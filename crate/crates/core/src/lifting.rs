//! Polynomial observable dictionary: lifts states into a higher-dimensional
//! space where the dynamics are approximately linear, and recovers the
//! original state as a prefix slice.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered monomial dictionary for a polynomial lifting of degree 1 or 2.
///
/// The lifted coordinates are ordered as: the raw state components, the
/// constant 1, the pure squares, then cross products in lexicographic
/// (i < j) pair order. Keeping the raw states first makes recovery a
/// prefix slice (`C_lift = [I | 0]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    state_dim: usize,
    degree: usize,
    /// One exponent tuple per lifted coordinate.
    monomials: Vec<Vec<u32>>,
}

impl Dictionary {
    /// Builds the dictionary for `state_dim` states. Only degrees 1 and 2
    /// are accepted; higher degrees are outside the validated scope.
    pub fn new(state_dim: usize, degree: usize) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::InvalidConfig("state_dim must be positive".into()));
        }
        if degree != 1 && degree != 2 {
            return Err(Error::UnsupportedDegree(degree));
        }
        let mut monomials = Vec::new();
        // Raw states first.
        for i in 0..state_dim {
            let mut m = vec![0u32; state_dim];
            m[i] = 1;
            monomials.push(m);
        }
        // Constant term.
        monomials.push(vec![0u32; state_dim]);
        if degree == 2 {
            for i in 0..state_dim {
                let mut m = vec![0u32; state_dim];
                m[i] = 2;
                monomials.push(m);
            }
            for i in 0..state_dim {
                for j in (i + 1)..state_dim {
                    let mut m = vec![0u32; state_dim];
                    m[i] = 1;
                    m[j] = 1;
                    monomials.push(m);
                }
            }
        }
        Ok(Self {
            state_dim,
            degree,
            monomials,
        })
    }

    /// Reconstructs a dictionary from a serialized exponent list, checking
    /// that it matches the canonical ordering for its degree.
    pub fn from_monomials(state_dim: usize, degree: usize, monomials: Vec<Vec<u32>>) -> Result<Self> {
        let canonical = Self::new(state_dim, degree)?;
        if canonical.monomials != monomials {
            return Err(Error::InvalidConfig(
                "monomial list does not match the canonical dictionary ordering".into(),
            ));
        }
        Ok(canonical)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Dimension of the lifted space (N_obs).
    pub fn lifted_dim(&self) -> usize {
        self.monomials.len()
    }

    pub fn monomials(&self) -> &[Vec<u32>] {
        &self.monomials
    }

    /// Maps a state into the lifted space by evaluating every monomial.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                context: "lift input state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        for (i, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "lift input state",
                    index: i,
                    value: v,
                });
            }
        }
        let mut psi = DVector::zeros(self.lifted_dim());
        for (k, m) in self.monomials.iter().enumerate() {
            let mut v = 1.0;
            for (i, &e) in m.iter().enumerate() {
                for _ in 0..e {
                    v *= x[i];
                }
            }
            psi[k] = v;
        }
        Ok(psi)
    }

    /// Recovers the original state from a lifted vector (prefix selection).
    pub fn recover(&self, psi: &DVector<f64>) -> Result<DVector<f64>> {
        if psi.len() != self.lifted_dim() {
            return Err(Error::DimensionMismatch {
                context: "recover lifted vector",
                expected: self.lifted_dim(),
                got: psi.len(),
            });
        }
        Ok(psi.rows(0, self.state_dim).into_owned())
    }
}
