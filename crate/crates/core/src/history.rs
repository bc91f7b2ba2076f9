//! Historical process constraints: a database of past state-input pairs,
//! the KNN-weighted reference control, and the confidence-scaled corridor
//! placed around it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifting::Dictionary;

/// Lifted-state/input pairs mined for reference controls. Entries are
/// immutable after load; queries are read-only.
#[derive(Debug, Clone)]
pub struct HistoryDatabase {
    psi: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    lifted_dim: usize,
    input_dim: usize,
}

/// Corridor shaping parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorridorConfig {
    /// Neighbor count K.
    pub k: usize,
    /// Kernel width in squared-distance units.
    pub sigma_d2: f64,
    /// Base relative deviation.
    pub alpha_base: f64,
    /// Adaptive scaling factor multiplying the confidence.
    pub beta_adapt: f64,
    /// Per-channel minimum absolute deviation.
    pub delta_abs: Vec<f64>,
}

impl CorridorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("corridor K must be >= 1".into()));
        }
        if !(self.sigma_d2 > 0.0) {
            return Err(Error::InvalidConfig("sigma_d2 must be > 0".into()));
        }
        if self.alpha_base < 0.0 || self.beta_adapt < 0.0 {
            return Err(Error::InvalidConfig(
                "alpha_base and beta_adapt must be >= 0".into(),
            ));
        }
        if self.delta_abs.iter().any(|&d| d < 0.0) {
            return Err(Error::InvalidConfig(
                "delta_abs must be >= 0 componentwise".into(),
            ));
        }
        Ok(())
    }
}

/// A confidence-scaled box around the historical reference control.
#[derive(Debug, Clone)]
pub struct Corridor {
    pub u_ref: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub conf_used: f64,
}

/// Result of a reference-control query.
#[derive(Debug, Clone)]
pub struct ReferenceControl {
    pub u_ref: DVector<f64>,
    /// Set when all kernel weights underflowed and the single nearest
    /// neighbor's input was used instead.
    pub nearest_fallback: bool,
}

impl HistoryDatabase {
    pub fn new(lifted_dim: usize, input_dim: usize) -> Self {
        Self {
            psi: Vec::new(),
            u: Vec::new(),
            lifted_dim,
            input_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn lifted_dim(&self) -> usize {
        self.lifted_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn push(&mut self, psi: DVector<f64>, u: DVector<f64>) -> Result<()> {
        if psi.len() != self.lifted_dim {
            return Err(Error::DimensionMismatch {
                context: "history entry lifted vector",
                expected: self.lifted_dim,
                got: psi.len(),
            });
        }
        if u.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "history entry input vector",
                expected: self.input_dim,
                got: u.len(),
            });
        }
        self.psi.push(psi);
        self.u.push(u);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&DVector<f64>, &DVector<f64>)> {
        self.psi.iter().zip(self.u.iter())
    }

    /// Builds a database from state/input rows, lifting each state.
    pub fn from_pairs(
        pairs: &[(DVector<f64>, DVector<f64>)],
        dict: &Dictionary,
    ) -> Result<Self> {
        let input_dim = pairs.first().map(|(_, u)| u.len()).unwrap_or(0);
        let mut db = Self::new(dict.lifted_dim(), input_dim);
        for (x, u) in pairs {
            db.push(dict.lift(x)?, u.clone())?;
        }
        Ok(db)
    }

    /// Median K-th neighbor squared distance over a sample of stored
    /// entries. A practical default for the kernel width.
    pub fn suggest_sigma_d2(&self, k: usize) -> Option<f64> {
        if self.len() <= k {
            return None;
        }
        let stride = (self.len() / 256).max(1);
        let mut kth = Vec::new();
        for (qi, q) in self.psi.iter().enumerate().step_by(stride) {
            let mut d: Vec<f64> = self
                .psi
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != qi)
                .map(|(_, p)| (q - p).norm_squared())
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            kth.push(d[k - 1]);
        }
        kth.sort_by(|a, b| a.total_cmp(b));
        let mid = kth.len() / 2;
        let m = if kth.len() % 2 == 1 {
            kth[mid]
        } else {
            0.5 * (kth[mid - 1] + kth[mid])
        };
        Some(if m > 0.0 { m } else { 1.0 })
    }

    /// KNN-weighted historical reference control for a lifted query point.
    ///
    /// Squared Euclidean distances over all entries, the K smallest kept
    /// (ties broken by database index), Gaussian kernel weights, and the
    /// weighted average of the neighbors' inputs.
    pub fn reference_control(
        &self,
        psi_query: &DVector<f64>,
        cfg: &CorridorConfig,
    ) -> Result<ReferenceControl> {
        if self.is_empty() {
            return Err(Error::EmptyInput("history database is empty"));
        }
        if cfg.k > self.len() {
            return Err(Error::NotEnoughNeighbors {
                available: self.len(),
                requested: cfg.k,
            });
        }
        if psi_query.len() != self.lifted_dim {
            return Err(Error::DimensionMismatch {
                context: "reference control query",
                expected: self.lifted_dim,
                got: psi_query.len(),
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .psi
            .iter()
            .enumerate()
            .map(|(i, p)| ((psi_query - p).norm_squared(), i))
            .collect();
        // Stable by index on equal distances.
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let selected = &dist[..cfg.k];

        let mut weight_sum = 0.0;
        let mut acc = DVector::zeros(self.input_dim);
        for &(d, i) in selected {
            let w = (-d / cfg.sigma_d2).exp();
            weight_sum += w;
            acc += &self.u[i] * w;
        }
        if weight_sum > 0.0 && weight_sum.is_finite() {
            Ok(ReferenceControl {
                u_ref: acc / weight_sum,
                nearest_fallback: false,
            })
        } else {
            Ok(ReferenceControl {
                u_ref: self.u[selected[0].1].clone(),
                nearest_fallback: true,
            })
        }
    }

    /// Writes the database as a columnar text table: header row naming the
    /// lifted coordinates and input channels, one row per entry.
    pub fn save(&self, path: &Path, input_names: &[String]) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header: Vec<String> = (0..self.lifted_dim).map(|i| format!("psi_{i}")).collect();
        if input_names.len() == self.input_dim {
            header.extend(input_names.iter().cloned());
        } else {
            header.extend((0..self.input_dim).map(|i| format!("u_{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for (psi, u) in self.entries() {
            let row: Vec<String> = psi
                .iter()
                .chain(u.iter())
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, lifted_dim: usize, input_dim: usize) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut db = Self::new(lifted_dim, input_dim);
        let path_str = path.display().to_string();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path_str.clone(),
                        line: lineno + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != lifted_dim + input_dim {
                return Err(Error::Parse {
                    path: path_str,
                    line: lineno + 1,
                    message: format!(
                        "expected {} columns, got {}",
                        lifted_dim + input_dim,
                        vals.len()
                    ),
                });
            }
            db.push(
                DVector::from_row_slice(&vals[..lifted_dim]),
                DVector::from_row_slice(&vals[lifted_dim..]),
            )?;
        }
        Ok(db)
    }
}

/// Confidence-scaled corridor around a reference control:
/// per channel, `delta = max((alpha + beta * conf) * |u_ref|, delta_abs)`.
pub fn corridor(u_ref: &DVector<f64>, conf: f64, cfg: &CorridorConfig) -> Corridor {
    let conf = conf.clamp(0.0, 1.0);
    let n = u_ref.len();
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for j in 0..n {
        let floor = cfg.delta_abs.get(j).copied().unwrap_or(0.0);
        let delta = ((cfg.alpha_base + cfg.beta_adapt * conf) * u_ref[j].abs()).max(floor);
        lower[j] = u_ref[j] - delta;
        upper[j] = u_ref[j] + delta;
    }
    Corridor {
        u_ref: u_ref.clone(),
        lower,
        upper,
        conf_used: conf,
    }
}

/// Simplified advisor-mode corridor around the actually applied input:
/// `delta = max(0.1 |u_actual|, 0.01 range)` per channel.
pub fn advisor_corridor(u_actual: &DVector<f64>, u_range: &DVector<f64>) -> Corridor {
    let n = u_actual.len();
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for j in 0..n {
        let delta = (0.1 * u_actual[j].abs()).max(0.01 * u_range[j]);
        lower[j] = u_actual[j] - delta;
        upper[j] = u_actual[j] + delta;
    }
    Corridor {
        u_ref: u_actual.clone(),
        lower,
        upper,
        conf_used: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize, sigma_d2: f64) -> CorridorConfig {
        CorridorConfig {
            k,
            sigma_d2,
            alpha_base: 0.05,
            beta_adapt: 0.10,
            delta_abs: vec![0.5],
        }
    }

    fn two_entry_db() -> HistoryDatabase {
        let mut db = HistoryDatabase::new(1, 1);
        db.push(dvector![0.0], dvector![1.0]).unwrap();
        db.push(dvector![10.0], dvector![3.0]).unwrap();
        db
    }

    #[test]
    fn nearest_neighbor_k1() {
        let db = two_entry_db();
        let r = db.reference_control(&dvector![0.0], &cfg(1, 100.0)).unwrap();
        assert_relative_eq!(r.u_ref[0], 1.0, epsilon = 1e-15);
        assert!(!r.nearest_fallback);
    }

    #[test]
    fn weighted_average_k2() {
        // d = {0, 100}, sigma^2 = 100 -> weights {1, e^-1}.
        let db = two_entry_db();
        let r = db.reference_control(&dvector![0.0], &cfg(2, 100.0)).unwrap();
        let w1 = (-1.0f64).exp();
        let expected = (1.0 + w1 * 3.0) / (1.0 + w1);
        assert_relative_eq!(r.u_ref[0], expected, epsilon = 1e-12);
        assert_relative_eq!(r.u_ref[0], 1.5379, epsilon = 1e-4);
    }

    #[test]
    fn kernel_concentration_limit() {
        let db = two_entry_db();
        let r = db
            .reference_control(&dvector![0.0], &cfg(2, 1e-9))
            .unwrap();
        // Query coincides with entry 0; with a vanishing kernel width the
        // reference collapses onto that entry's input.
        assert_relative_eq!(r.u_ref[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn underflowed_weights_fall_back_to_nearest() {
        let mut db = HistoryDatabase::new(1, 1);
        db.push(dvector![1e6], dvector![2.0]).unwrap();
        db.push(dvector![2e6], dvector![5.0]).unwrap();
        let r = db
            .reference_control(&dvector![0.0], &cfg(2, 1e-3))
            .unwrap();
        assert!(r.nearest_fallback);
        assert_relative_eq!(r.u_ref[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn errors_on_small_database() {
        let db = HistoryDatabase::new(1, 1);
        assert!(db.reference_control(&dvector![0.0], &cfg(1, 1.0)).is_err());
        let db = two_entry_db();
        assert!(matches!(
            db.reference_control(&dvector![0.0], &cfg(3, 1.0)),
            Err(Error::NotEnoughNeighbors { available: 2, requested: 3 })
        ));
    }

    #[test]
    fn reference_invariant_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<(DVector<f64>, DVector<f64>)> = (0..30)
            .map(|_| {
                (
                    DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)),
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        let mut db1 = HistoryDatabase::new(4, 2);
        for (p, u) in &entries {
            db1.push(p.clone(), u.clone()).unwrap();
        }
        let mut shuffled = entries.clone();
        shuffled.shuffle(&mut rng);
        let mut db2 = HistoryDatabase::new(4, 2);
        for (p, u) in &shuffled {
            db2.push(p.clone(), u.clone()).unwrap();
        }
        let c = CorridorConfig {
            k: 5,
            sigma_d2: 1.0,
            alpha_base: 0.0,
            beta_adapt: 0.0,
            delta_abs: vec![0.0, 0.0],
        };
        let q = dvector![0.1, -0.2, 0.3, 0.0];
        let r1 = db1.reference_control(&q, &c).unwrap();
        let r2 = db2.reference_control(&q, &c).unwrap();
        assert!((r1.u_ref - r2.u_ref).norm() < 1e-12);
    }

    #[test]
    fn reference_in_convex_hull_of_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut db = HistoryDatabase::new(3, 2);
            for _ in 0..20 {
                db.push(
                    DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
                    DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
                )
                .unwrap();
            }
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let c = CorridorConfig {
                k: 4,
                sigma_d2: 0.5,
                alpha_base: 0.0,
                beta_adapt: 0.0,
                delta_abs: vec![0.0, 0.0],
            };
            let r = db.reference_control(&q, &c).unwrap();
            // Componentwise hull of the 4 selected neighbors.
            let mut dist: Vec<(f64, usize)> = db
                .psi
                .iter()
                .enumerate()
                .map(|(i, p)| ((&q - p).norm_squared(), i))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for j in 0..2 {
                let lo = dist[..4]
                    .iter()
                    .map(|&(_, i)| db.u[i][j])
                    .fold(f64::INFINITY, f64::min);
                let hi = dist[..4]
                    .iter()
                    .map(|&(_, i)| db.u[i][j])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(r.u_ref[j] >= lo - 1e-12 && r.u_ref[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn corridor_worked_example() {
        let c = corridor(&dvector![100.0], 1.0, &cfg(1, 1.0));
        assert_relative_eq!(c.lower[0], 85.0, epsilon = 1e-12);
        assert_relative_eq!(c.upper[0], 115.0, epsilon = 1e-12);
    }

    #[test]
    fn corridor_absolute_floor() {
        let c = corridor(&dvector![0.0], 0.7, &cfg(1, 1.0));
        assert_relative_eq!(c.lower[0], -0.5, epsilon = 1e-15);
        assert_relative_eq!(c.upper[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn corridor_zero_confidence_is_tightest() {
        let c0 = corridor(&dvector![100.0], 0.0, &cfg(1, 1.0));
        assert_relative_eq!(c0.upper[0] - c0.lower[0], 10.0, epsilon = 1e-12);
        for i in 1..=100 {
            let c = corridor(&dvector![100.0], i as f64 / 100.0, &cfg(1, 1.0));
            assert!(c.upper[0] - c.lower[0] >= c0.upper[0] - c0.lower[0]);
        }
    }

    #[test]
    fn corridor_width_monotone_in_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u_ref = DVector::from_fn(3, |_, _| rng.gen_range(-50.0..50.0));
            let c = CorridorConfig {
                k: 1,
                sigma_d2: 1.0,
                alpha_base: 0.05,
                beta_adapt: 0.1,
                delta_abs: vec![0.5, 0.5, 0.5],
            };
            let mut prev = DVector::zeros(3);
            for i in 0..=100 {
                let conf = i as f64 / 100.0;
                let cor = corridor(&u_ref, conf, &c);
                let width = &cor.upper - &cor.lower;
                if i > 0 {
                    for j in 0..3 {
                        assert!(width[j] >= prev[j] - 1e-12);
                    }
                }
                // u_ref strictly interior when delta_abs > 0.
                for j in 0..3 {
                    assert!(cor.lower[j] < u_ref[j] && u_ref[j] < cor.upper[j]);
                }
                prev = width;
            }
        }
    }

    #[test]
    fn advisor_corridor_examples() {
        let c = advisor_corridor(&dvector![50.0], &dvector![200.0]);
        assert_relative_eq!(c.lower[0], 45.0, epsilon = 1e-12);
        assert_relative_eq!(c.upper[0], 55.0, epsilon = 1e-12);

        let c = advisor_corridor(&dvector![0.0], &dvector![200.0]);
        assert_relative_eq!(c.upper[0], 2.0, epsilon = 1e-12);

        let c = advisor_corridor(&dvector![5.0], &dvector![1000.0]);
        assert_relative_eq!(c.upper[0] - c.u_ref[0], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn database_file_roundtrip() {
        let mut db = HistoryDatabase::new(2, 1);
        db.push(dvector![1.0, 0.125], dvector![3.5]).unwrap();
        db.push(dvector![-0.7, 2.0], dvector![0.1]).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("db.csv");
        db.save(&path, &["valve".to_string()]).unwrap();
        let loaded = HistoryDatabase::load(&path, 2, 1).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((p1, u1), (p2, u2)) in db.entries().zip(loaded.entries()) {
            assert_eq!(p1, p2);
            assert_eq!(u1, u2);
        }
    }
}
