//! Run configuration: one TOML document holding every tunable. Unknown
//! keys are rejected so typos fail loudly; defaults match the reference
//! operating parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use koopman_mpc::ident::{ForgettingConfig, ResetConfig};
use koopman_mpc::ingest::BatchSchema;
use koopman_mpc::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub dictionary: DictionaryConfig,
    pub identification: IdentificationConfig,
    pub corridor: CorridorSection,
    pub mpc: MpcSection,
    pub bounds: BoundsSection,
    pub process: ProcessSection,
    pub schema: SchemaSection,
    pub closedloop: ClosedLoopSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dictionary: DictionaryConfig::default(),
            identification: IdentificationConfig::default(),
            corridor: CorridorSection::default(),
            mpc: MpcSection::default(),
            bounds: BoundsSection::default(),
            process: ProcessSection::default(),
            schema: SchemaSection::default(),
            closedloop: ClosedLoopSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub state_dim: usize,
    pub degree: usize,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            state_dim: 3,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationConfig {
    pub lambda_f: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_reg: f64,
    pub smoothing: f64,
    pub high_watermark: f64,
    pub low_watermark: f64,
    pub trace_max_factor: f64,
    pub eps_floor: f64,
    pub adapt_window: usize,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            lambda_f: 0.995,
            lambda_min: 0.9,
            lambda_max: 0.995,
            lambda_reg: 1e-3,
            smoothing: 0.95,
            high_watermark: 2.0,
            low_watermark: 1.0,
            trace_max_factor: 10.0,
            eps_floor: 1e-12,
            adapt_window: 50,
        }
    }
}

impl IdentificationConfig {
    pub fn forgetting(&self) -> ForgettingConfig {
        ForgettingConfig {
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            smoothing: self.smoothing,
            high_watermark: self.high_watermark,
            low_watermark: self.low_watermark,
        }
    }

    pub fn reset(&self) -> ResetConfig {
        ResetConfig {
            trace_max_factor: self.trace_max_factor,
            eps_floor: self.eps_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSection {
    pub k: usize,
    /// Kernel width; 0 means "derive from the database".
    pub sigma_d2: f64,
    pub alpha_base: f64,
    pub beta_adapt: f64,
    /// Per-channel absolute corridor floor; empty means "1% of range".
    pub delta_abs: Vec<f64>,
}

impl Default for CorridorSection {
    fn default() -> Self {
        Self {
            k: 10,
            sigma_d2: 0.0,
            alpha_base: 0.05,
            beta_adapt: 0.10,
            delta_abs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub hp: usize,
    pub hc: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub s_diag: Vec<f64>,
    /// "hold_last" or "zero".
    pub input_extension: String,
    pub disturbance_channels: Vec<usize>,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            hp: 15,
            hc: 7,
            q_diag: vec![10.0, 100.0, 1.0],
            r_diag: vec![0.01; 7],
            s_diag: vec![0.0; 7],
            input_extension: "hold_last".into(),
            disturbance_channels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub quantile: f64,
    pub margin: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            quantile: 0.99,
            margin: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSection {
    pub setpoints: Vec<f64>,
    /// Specification limits per state channel, for Cpk reporting.
    pub lsl: Vec<f64>,
    pub usl: Vec<f64>,
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            setpoints: vec![66.5, 18.2, 58.5],
            lsl: vec![64.5, 17.6, 56.5],
            usl: vec![68.5, 18.8, 60.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaSection {
    pub state_channels: Vec<String>,
    pub input_channels: Vec<String>,
    pub align_channel: String,
    pub min_rows: usize,
    pub max_gap: usize,
}

impl Default for SchemaSection {
    fn default() -> Self {
        let s = BatchSchema::default();
        Self {
            state_channels: s.state_channels,
            input_channels: s.input_channels,
            align_channel: s.align_channel,
            min_rows: s.min_rows,
            max_gap: s.max_gap,
        }
    }
}

impl SchemaSection {
    pub fn to_schema(&self) -> BatchSchema {
        BatchSchema {
            state_channels: self.state_channels.clone(),
            input_channels: self.input_channels.clone(),
            align_channel: self.align_channel.clone(),
            min_rows: self.min_rows,
            max_gap: self.max_gap,
        }
    }
}

/// Synthetic closed-loop experiment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSection {
    pub steps: usize,
    pub excitation_steps: usize,
    pub plant_noise_std: f64,
    /// Step at which the drifting plant shifts its gains.
    pub drift_at: usize,
    pub adaptation: bool,
    pub setpoints: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub x0: Vec<f64>,
    /// Corridor overrides for the synthetic experiments (the production
    /// corridor settings above are scaled for plant units).
    pub alpha_base: f64,
    pub beta_adapt: f64,
    pub delta_abs: f64,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        Self {
            steps: 300,
            excitation_steps: 600,
            plant_noise_std: 0.01,
            drift_at: 150,
            adaptation: true,
            setpoints: vec![0.0, 0.25, 0.0],
            u_min: vec![-0.9; 3],
            u_max: vec![0.9; 3],
            x0: vec![0.5, 0.3, 0.2],
            alpha_base: 0.5,
            beta_adapt: 0.5,
            delta_abs: 0.4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dump(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dictionary.degree == 0 || self.dictionary.degree > 2 {
            return Err(Error::InvalidConfig(
                "dictionary degree must be 1 or 2".into(),
            ));
        }
        if self.mpc.hc == 0 || self.mpc.hc > self.mpc.hp {
            return Err(Error::InvalidConfig("need 1 <= Hc <= Hp".into()));
        }
        if self.mpc.q_diag.len() != self.dictionary.state_dim {
            return Err(Error::InvalidConfig(
                "q_diag length must match state_dim".into(),
            ));
        }
        match self.mpc.input_extension.as_str() {
            "hold_last" | "zero" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown input_extension '{other}'"
                )))
            }
        }
        if !(self.bounds.quantile > 0.5 && self.bounds.quantile <= 1.0) {
            return Err(Error::InvalidConfig(
                "bounds quantile must be in (0.5, 1]".into(),
            ));
        }
        let n_s = self.dictionary.state_dim;
        if self.process.setpoints.len() != n_s
            || self.process.lsl.len() != n_s
            || self.process.usl.len() != n_s
        {
            return Err(Error::InvalidConfig(
                "process setpoints/limits must match state_dim".into(),
            ));
        }
        for (l, u) in self.process.lsl.iter().zip(self.process.usl.iter()) {
            if !(u > l) {
                return Err(Error::InvalidConfig("need usl > lsl per channel".into()));
            }
        }
        Ok(())
    }
}
