//! Closed-loop simulation on the synthetic plants: excitation runs to
//! bootstrap a model and history database, then receding-horizon control
//! with optional online adaptation.

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::history::{CorridorConfig, HistoryDatabase};
use crate::ident::{adapt_forgetting, ForgettingConfig, LiftedModel, ResetConfig, Snapshot, StepReport};
use crate::lifting::Dictionary;
use crate::mpc::{control_step, CorridorSource, MpcConfig, StepDiagnostics};
use crate::plant::SyntheticPlant;

/// Settings for one closed-loop episode.
#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    pub steps: usize,
    /// Online recursive updates on/off (off freezes the bootstrap model).
    pub adaptation: bool,
    pub adapt_window: usize,
    pub forgetting: ForgettingConfig,
    pub reset: ResetConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            adaptation: true,
            adapt_window: 50,
            forgetting: ForgettingConfig::default(),
            reset: ResetConfig::default(),
        }
    }
}

pub struct ClosedLoopRun {
    /// States x_0 .. x_steps (length steps + 1).
    pub states: Vec<DVector<f64>>,
    /// Applied inputs u_0 .. u_{steps-1}.
    pub inputs: Vec<DVector<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub model: LiftedModel,
}

impl ClosedLoopRun {
    /// Mean squared tracking error over a step range (states indexed after
    /// the corresponding move).
    pub fn tracking_mse(&self, setpoints: &DVector<f64>, from: usize, to: usize) -> f64 {
        let to = to.min(self.states.len());
        let mut acc = 0.0;
        let mut n = 0usize;
        for k in from..to {
            acc += (&self.states[k] - setpoints).norm_squared();
            n += 1;
        }
        if n == 0 {
            f64::NAN
        } else {
            acc / n as f64
        }
    }
}

/// Random-excitation open-loop run: uniform inputs inside the box, used to
/// bootstrap the identification and the history database.
pub fn excitation_snapshots(
    plant: &SyntheticPlant,
    x0: &DVector<f64>,
    u_min: &DVector<f64>,
    u_max: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Vec<Snapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_c = plant.input_dim();
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let u = DVector::from_fn(n_c, |j, _| rng.gen_range(u_min[j]..u_max[j]));
        let x_next = plant.step(&x, &u, k, &mut rng);
        out.push(Snapshot::new(x.clone(), u.clone(), x_next.clone()));
        x = x_next;
    }
    out
}

/// Builds a history database from excitation snapshots.
pub fn history_from_snapshots(
    snapshots: &[Snapshot],
    dict: &Dictionary,
) -> Result<HistoryDatabase> {
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = snapshots
        .iter()
        .map(|s| (s.x_now.clone(), s.u_now.clone()))
        .collect();
    HistoryDatabase::from_pairs(&pairs, dict)
}

/// Runs a closed-loop episode with the HPC corridor. The model is cloned
/// from `model0`; when adaptation is enabled every observed transition
/// feeds the recursive update, the forgetting-factor policy, and the
/// covariance reset check.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    plant: &SyntheticPlant,
    model0: &LiftedModel,
    dict: &Dictionary,
    db: &HistoryDatabase,
    corridor_cfg: &CorridorConfig,
    mpc_cfg: &MpcConfig,
    setpoints: &DVector<f64>,
    x0: &DVector<f64>,
    cfg: &ClosedLoopConfig,
    seed: u64,
) -> Result<ClosedLoopRun> {
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("closed loop needs steps >= 1".into()));
    }
    corridor_cfg.validate()?;
    mpc_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = model0.clone();
    let n_c = mpc_cfg.n_inputs();
    let mut x = x0.clone();
    let mut u_prev = DVector::zeros(n_c);
    let mut warm: Option<DVector<f64>> = None;
    let mut reports: Vec<StepReport> = Vec::new();

    let mut states = vec![x.clone()];
    let mut inputs = Vec::with_capacity(cfg.steps);
    let mut diagnostics = Vec::with_capacity(cfg.steps);

    let source = CorridorSource::Hpc {
        db,
        cfg: corridor_cfg,
    };
    for k in 0..cfg.steps {
        let out = control_step(
            &model,
            &source,
            &x,
            setpoints,
            &u_prev,
            mpc_cfg,
            dict,
            warm.as_ref(),
        )?;
        let u = out.u_apply.clone();
        let x_next = plant.step(&x, &u, k, &mut rng);

        if cfg.adaptation {
            let rep = model.rls_update(&Snapshot::new(x.clone(), u.clone(), x_next.clone()), dict)?;
            reports.push(rep);
            if reports.len() > cfg.adapt_window {
                let drop = reports.len() - cfg.adapt_window;
                reports.drain(..drop);
            }
            model.set_lambda_f(adapt_forgetting(&reports, &cfg.forgetting));
            model.maybe_reset_covariance(&cfg.reset);
        }

        warm = Some(out.diagnostics.u_sequence.clone());
        diagnostics.push(out.diagnostics);
        inputs.push(u.clone());
        u_prev = u;
        states.push(x_next.clone());
        x = x_next;
    }

    Ok(ClosedLoopRun {
        states,
        inputs,
        diagnostics,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DMatrix};
    use crate::ident::batch_fit;
    use crate::mpc::InputExtension;

    fn bilinear_setup(
        seed: u64,
    ) -> (
        SyntheticPlant,
        Dictionary,
        LiftedModel,
        HistoryDatabase,
        CorridorConfig,
        MpcConfig,
    ) {
        let plant = SyntheticPlant::bilinear(0.0);
        let dict = Dictionary::new(3, 2).unwrap();
        let x0 = dvector![0.5, 0.3, 0.2];
        let u_min = DVector::from_element(3, -0.9);
        let u_max = DVector::from_element(3, 0.9);
        let snaps = excitation_snapshots(&plant, &x0, &u_min, &u_max, 600, seed);
        let model = batch_fit(&snaps, &dict, 1e-3).unwrap();
        let db = history_from_snapshots(&snaps, &dict).unwrap();
        let sigma = db.suggest_sigma_d2(10).unwrap();
        let ccfg = CorridorConfig {
            k: 10,
            sigma_d2: sigma,
            alpha_base: 0.5,
            beta_adapt: 0.5,
            delta_abs: vec![0.4; 3],
        };
        let mpc_cfg = MpcConfig {
            hp: 15,
            hc: 7,
            q: DMatrix::from_diagonal(&dvector![10.0, 100.0, 1.0]),
            r: DMatrix::identity(3, 3) * 1e-2,
            s: DMatrix::zeros(3, 3),
            u_min,
            u_max,
            input_extension: InputExtension::HoldLast,
            disturbance_channels: vec![],
        };
        (plant, dict, model, db, ccfg, mpc_cfg)
    }

    #[test]
    fn episode_shapes_and_determinism() {
        let (plant, dict, model, db, ccfg, mpc_cfg) = bilinear_setup(1);
        let cfg = ClosedLoopConfig {
            steps: 40,
            ..Default::default()
        };
        let sp = dvector![0.0, 0.25, 0.0];
        let run = |seed| {
            run_closed_loop(
                &plant,
                &model,
                &dict,
                &db,
                &ccfg,
                &mpc_cfg,
                &sp,
                &dvector![0.5, 0.3, 0.2],
                &cfg,
                seed,
            )
            .unwrap()
        };
        let r1 = run(7);
        assert_eq!(r1.states.len(), 41);
        assert_eq!(r1.inputs.len(), 40);
        assert_eq!(r1.diagnostics.len(), 40);
        let r2 = run(7);
        for (a, b) in r1.states.iter().zip(r2.states.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn inputs_stay_inside_the_box() {
        let (plant, dict, model, db, ccfg, mpc_cfg) = bilinear_setup(2);
        let cfg = ClosedLoopConfig {
            steps: 60,
            ..Default::default()
        };
        let run = run_closed_loop(
            &plant,
            &model,
            &dict,
            &db,
            &ccfg,
            &mpc_cfg,
            &dvector![0.0, 0.25, 0.0],
            &dvector![0.5, 0.3, 0.2],
            &cfg,
            3,
        )
        .unwrap();
        for u in &run.inputs {
            for j in 0..3 {
                assert!(u[j] >= mpc_cfg.u_min[j] - 1e-9 && u[j] <= mpc_cfg.u_max[j] + 1e-9);
            }
        }
    }

    #[test]
    fn states_remain_bounded() {
        let (plant, dict, model, db, ccfg, mpc_cfg) = bilinear_setup(4);
        let cfg = ClosedLoopConfig {
            steps: 200,
            ..Default::default()
        };
        let run = run_closed_loop(
            &plant,
            &model,
            &dict,
            &db,
            &ccfg,
            &mpc_cfg,
            &dvector![0.0, 0.25, 0.0],
            &dvector![0.5, 0.3, 0.2],
            &cfg,
            5,
        )
        .unwrap();
        for x in &run.states {
            assert!(x.amax() < 100.0);
        }
    }

    #[test]
    fn tracking_mse_window() {
        let run = ClosedLoopRun {
            states: vec![dvector![1.0], dvector![2.0], dvector![3.0]],
            inputs: vec![],
            diagnostics: vec![],
            model: LiftedModel::zeroed(1, 1, 1.0, 1.0),
        };
        let sp = dvector![0.0];
        assert!((run.tracking_mse(&sp, 0, 3) - (1.0 + 4.0 + 9.0) / 3.0).abs() < 1e-12);
        assert!((run.tracking_mse(&sp, 1, 3) - (4.0 + 9.0) / 2.0).abs() < 1e-12);
        assert!(run.tracking_mse(&sp, 3, 3).is_nan());
    }
}
