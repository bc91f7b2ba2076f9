//! Process capability statistics for cross-batch comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpecLimits {
    pub usl: f64,
    pub lsl: f64,
}

impl SpecLimits {
    pub fn new(lsl: f64, usl: f64) -> Result<Self> {
        if !(usl > lsl) {
            return Err(Error::InvalidConfig(format!(
                "spec limits need usl > lsl, got [{lsl}, {usl}]"
            )));
        }
        Ok(Self { usl, lsl })
    }
}

/// Cpk with a zero-variance flag: degenerate series are reported rather
/// than silently producing a huge index.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CpkValue {
    pub value: f64,
    pub zero_variance: bool,
}

/// `Cpk = min((USL - mu)/3 sigma, (mu - LSL)/3 sigma)` with the sample
/// (n-1) standard deviation.
pub fn cpk(series: &[f64], limits: &SpecLimits) -> Result<CpkValue> {
    if series.len() < 2 {
        return Err(Error::EmptyInput("cpk needs at least two samples"));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(CpkValue {
            value: f64::INFINITY,
            zero_variance: true,
        });
    }
    let upper = (limits.usl - mean) / (3.0 * sd);
    let lower = (mean - limits.lsl) / (3.0 * sd);
    Ok(CpkValue {
        value: upper.min(lower),
        zero_variance: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub batch_id: u32,
    pub channel: String,
    pub cpk_hist: f64,
    pub cpk_mpc: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub channel: String,
    pub hist_median: f64,
    pub hist_q1: f64,
    pub hist_q3: f64,
    pub mpc_median: f64,
    pub mpc_q1: f64,
    pub mpc_q3: f64,
    pub improved_batches: usize,
    pub total_batches: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub summaries: Vec<ChannelSummary>,
    /// Batches excluded because the paired series lengths differed.
    pub excluded_batches: Vec<u32>,
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| -> f64 {
        if sorted.is_empty() {
            return f64::NAN;
        }
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    };
    (q(0.25), q(0.5), q(0.75))
}

/// One batch's paired series for every channel.
pub struct BatchPair<'a> {
    pub batch_id: u32,
    /// (channel name, historical series, predicted series)
    pub channels: Vec<(&'a str, &'a [f64], &'a [f64])>,
}

/// Per-batch and per-channel Cpk comparison with box-plot summaries.
/// Empty input yields an empty table.
pub fn compare_batches(
    pairs: &[BatchPair<'_>],
    limits: &[(String, SpecLimits)],
) -> Result<ComparisonTable> {
    let mut table = ComparisonTable::default();
    let mut per_channel: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
        Default::default();
    for pair in pairs {
        let mismatched = pair
            .channels
            .iter()
            .any(|(_, h, p)| h.len() != p.len());
        if mismatched {
            table.excluded_batches.push(pair.batch_id);
            continue;
        }
        for (name, hist, pred) in &pair.channels {
            let lim = limits
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, l)| l)
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("no spec limits for channel '{name}'"))
                })?;
            let ch = cpk(hist, lim)?;
            let cp = cpk(pred, lim)?;
            table.rows.push(ComparisonRow {
                batch_id: pair.batch_id,
                channel: name.to_string(),
                cpk_hist: ch.value,
                cpk_mpc: cp.value,
                delta: cp.value - ch.value,
            });
            per_channel
                .entry(name.to_string())
                .or_default()
                .push((ch.value, cp.value));
        }
    }
    for (channel, vals) in per_channel {
        let mut hist: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let mut mpc: Vec<f64> = vals.iter().map(|v| v.1).collect();
        hist.sort_by(|a, b| a.total_cmp(b));
        mpc.sort_by(|a, b| a.total_cmp(b));
        let (h1, h2, h3) = quartiles(&hist);
        let (m1, m2, m3) = quartiles(&mpc);
        table.summaries.push(ChannelSummary {
            channel,
            hist_median: h2,
            hist_q1: h1,
            hist_q3: h3,
            mpc_median: m2,
            mpc_q1: m1,
            mpc_q3: m3,
            improved_batches: vals.iter().filter(|(h, m)| m > h).count(),
            total_batches: vals.len(),
        });
    }
    Ok(table)
}

impl ComparisonTable {
    /// Delimited text rendering, one row per batch and channel.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch_id,channel,cpk_hist,cpk_mpc,delta\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?}\n",
                r.batch_id, r.channel, r.cpk_hist, r.cpk_mpc, r.delta
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Series with an exact sample mean and standard deviation.
    fn series_with(mean: f64, sd: f64, n: usize) -> Vec<f64> {
        // Symmetric two-point pattern: mean exact, sd exact for even n.
        assert!(n % 2 == 0);
        let mut v = Vec::with_capacity(n);
        // sample sd of {mean - a, mean + a, ...} is a * sqrt(n/(n-1))
        let a = sd / ((n as f64) / (n as f64 - 1.0)).sqrt();
        for k in 0..n {
            v.push(if k % 2 == 0 { mean - a } else { mean + a });
        }
        v
    }

    #[test]
    fn cpk_worked_example() {
        // mu = 18.2, sigma = 0.2, USL = 18.8, LSL = 17.6 -> 1.0.
        let s = series_with(18.2, 0.2, 100);
        let lim = SpecLimits::new(17.6, 18.8).unwrap();
        let c = cpk(&s, &lim).unwrap();
        assert_relative_eq!(c.value, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cpk_zero_at_usl() {
        let s = series_with(18.8, 0.2, 100);
        let lim = SpecLimits::new(17.6, 18.8).unwrap();
        assert_relative_eq!(cpk(&s, &lim).unwrap().value, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn cpk_capable_process_benchmark() {
        // mu midway, USL - LSL = 8 sigma -> 4/3.
        let s = series_with(10.0, 1.0, 100);
        let lim = SpecLimits::new(6.0, 14.0).unwrap();
        let c = cpk(&s, &lim).unwrap();
        assert_relative_eq!(c.value, 4.0 / 3.0, epsilon = 1e-9);
        assert!(c.value > 1.33);
    }

    #[test]
    fn cpk_zero_variance_flagged() {
        let s = vec![5.0; 10];
        let lim = SpecLimits::new(0.0, 10.0).unwrap();
        let c = cpk(&s, &lim).unwrap();
        assert!(c.zero_variance);
        assert!(c.value.is_infinite());
    }

    #[test]
    fn cpk_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..200).map(|_| rng.gen_range(5.0..15.0)).collect();
        let lim = SpecLimits::new(4.0, 16.0).unwrap();
        let base = cpk(&s, &lim).unwrap().value;
        let (a, b) = (2.5, -7.0);
        let shifted: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let lim2 = SpecLimits::new(a * 4.0 + b, a * 16.0 + b).unwrap();
        let moved = cpk(&shifted, &lim2).unwrap().value;
        assert_relative_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn cpk_decreases_with_spread() {
        let lim = SpecLimits::new(0.0, 20.0).unwrap();
        let mut prev = f64::INFINITY;
        for sd in [0.5, 1.0, 2.0, 4.0] {
            let s = series_with(10.0, sd, 100);
            let c = cpk(&s, &lim).unwrap().value;
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn compare_identical_pair_has_zero_delta() {
        let s = series_with(10.0, 1.0, 50);
        let pairs = vec![BatchPair {
            batch_id: 1,
            channels: vec![("m", &s[..], &s[..])],
        }];
        let lims = vec![("m".to_string(), SpecLimits::new(5.0, 15.0).unwrap())];
        let t = compare_batches(&pairs, &lims).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_relative_eq!(t.rows[0].delta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn half_spread_doubles_cpk() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hist: Vec<f64> = (0..500).map(|_| 10.0 + rng.gen_range(-2.0..2.0)).collect();
        let mean = hist.iter().sum::<f64>() / hist.len() as f64;
        let pred: Vec<f64> = hist.iter().map(|v| mean + 0.5 * (v - mean)).collect();
        let pairs = vec![BatchPair {
            batch_id: 1,
            channels: vec![("m", &hist[..], &pred[..])],
        }];
        // Limits symmetric about the sample mean so both ratios double.
        let lims = vec![(
            "m".to_string(),
            SpecLimits::new(mean - 5.0, mean + 5.0).unwrap(),
        )];
        let t = compare_batches(&pairs, &lims).unwrap();
        assert_relative_eq!(t.rows[0].cpk_mpc, 2.0 * t.rows[0].cpk_hist, epsilon = 1e-9);
    }

    #[test]
    fn empty_input_gives_empty_table() {
        let t = compare_batches(&[], &[]).unwrap();
        assert!(t.rows.is_empty());
        assert!(t.summaries.is_empty());
    }

    #[test]
    fn mismatched_lengths_exclude_batch() {
        let a = series_with(10.0, 1.0, 50);
        let b = series_with(10.0, 1.0, 48);
        let pairs = vec![BatchPair {
            batch_id: 7,
            channels: vec![("m", &a[..], &b[..])],
        }];
        let lims = vec![("m".to_string(), SpecLimits::new(5.0, 15.0).unwrap())];
        let t = compare_batches(&pairs, &lims).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.excluded_batches, vec![7]);
    }

    #[test]
    fn row_count_is_batches_times_channels() {
        let s = series_with(10.0, 1.0, 50);
        let pairs: Vec<BatchPair> = (1..=3)
            .map(|id| BatchPair {
                batch_id: id,
                channels: vec![("a", &s[..], &s[..]), ("b", &s[..], &s[..])],
            })
            .collect();
        let lims = vec![
            ("a".to_string(), SpecLimits::new(5.0, 15.0).unwrap()),
            ("b".to_string(), SpecLimits::new(5.0, 15.0).unwrap()),
        ];
        let t = compare_batches(&pairs, &lims).unwrap();
        assert_eq!(t.rows.len(), 6);
    }
}
