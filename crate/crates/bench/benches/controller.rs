//! Hot-path benchmarks: the recursive identification update, the dense QP
//! solve, and a full receding-horizon control step at the default horizon.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use koopman_mpc::closedloop::{excitation_snapshots, history_from_snapshots};
use koopman_mpc::ident::batch_fit;
use koopman_mpc::mpc::{build_prediction, build_qp, control_step, InputExtension};
use koopman_mpc::{CorridorConfig, CorridorSource, Dictionary, MpcConfig, SyntheticPlant};

fn default_mpc_cfg() -> MpcConfig {
    MpcConfig {
        hp: 15,
        hc: 7,
        q: DMatrix::from_diagonal(&DVector::from_row_slice(&[10.0, 100.0, 1.0])),
        r: DMatrix::identity(3, 3) * 1e-2,
        s: DMatrix::zeros(3, 3),
        u_min: DVector::from_element(3, -0.9),
        u_max: DVector::from_element(3, 0.9),
        input_extension: InputExtension::HoldLast,
        disturbance_channels: vec![],
    }
}

fn bench_all(c: &mut Criterion) {
    let plant = SyntheticPlant::bilinear(0.01);
    let dict = Dictionary::new(3, 2).unwrap();
    let x0 = DVector::from_row_slice(&[0.5, 0.3, 0.2]);
    let u_min = DVector::from_element(3, -0.9);
    let u_max = DVector::from_element(3, 0.9);
    let snaps = excitation_snapshots(&plant, &x0, &u_min, &u_max, 1000, 1);
    let model = batch_fit(&snaps, &dict, 1e-3).unwrap();
    let db = history_from_snapshots(&snaps, &dict).unwrap();
    let corridor_cfg = CorridorConfig {
        k: 10,
        sigma_d2: db.suggest_sigma_d2(10).unwrap(),
        alpha_base: 0.5,
        beta_adapt: 0.5,
        delta_abs: vec![0.4; 3],
    };
    let mpc_cfg = default_mpc_cfg();
    let setpoints = DVector::from_row_slice(&[0.0, 0.25, 0.0]);

    c.bench_function("rls_update", |b| {
        let mut m = model.clone();
        let mut it = snaps.iter().cycle();
        b.iter(|| {
            let s = it.next().unwrap();
            m.rls_update(s, &dict).unwrap()
        })
    });

    c.bench_function("qp_solve_hp15_hc7", |b| {
        let pm = build_prediction(&model, &mpc_cfg, 3).unwrap();
        let psi = dict.lift(&x0).unwrap();
        let mut xref = DVector::zeros(3 * 15);
        for k in 0..15 {
            xref.rows_mut(k * 3, 3).copy_from(&setpoints);
        }
        let corridor = koopman_mpc::corridor(
            &DVector::from_element(3, 0.5),
            model.confidence(),
            &corridor_cfg,
        );
        let prob = build_qp(&pm, &psi, &xref, &DVector::zeros(3), &mpc_cfg, &corridor).unwrap();
        b.iter(|| koopman_mpc::qp::solve(&prob.h, &prob.f, &prob.g, &prob.h_vec, None).unwrap())
    });

    c.bench_function("control_step", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let source = CorridorSource::Hpc {
            db: &db,
            cfg: &corridor_cfg,
        };
        b.iter(|| {
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
            control_step(
                &model,
                &source,
                &x,
                &setpoints,
                &DVector::zeros(3),
                &mpc_cfg,
                &dict,
                None,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
