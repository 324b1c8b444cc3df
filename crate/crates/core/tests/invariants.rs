use nalgebra::DVector;
use proptest::prelude::*;

use wfapc_core::jacobi::{make_subproblems, ControllerModel, JacobiConfig, JacobiSolver, StepProblem};
use wfapc_core::linear::{equilibrium_states, step_subsystems, LinearizationPoint, TuningConstants};
use wfapc_core::plant::{steady_state, PlantParams, WakePlant, BETZ_CT};
use wfapc_core::qp::{cumulative, differences, CostWeights, CumulativeBoxConstraint};
use wfapc_core::sim::reference::{synthetic_signal, ReferenceSignal, ReferenceSource};
use wfapc_core::sim::report::{read_traces, write_traces};
use wfapc_core::sim::{rmse, SampleRecord};
use wfapc_core::topology::{build_layout, compute_delays, interaction_sets, FarmConfig, FarmLayout};

fn row(cols: usize, spacing: f64) -> FarmLayout {
    build_layout(&FarmConfig {
        rows: 1,
        cols,
        downstream_spacing: spacing,
        ..FarmConfig::ten_turbine()
    })
    .unwrap()
}

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(32)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn delays_grow_downwind_and_add_up(cols in 2usize..8, spacing in 20.0f64..900.0) {
        let l = row(cols, spacing);
        let d = compute_delays(&l);
        for j in 0..cols {
            for i in j + 1..cols {
                let dij = d.get(j, i).unwrap();
                prop_assert!(dij >= 1);
                if i + 1 < cols {
                    prop_assert!(d.get(j, i + 1).unwrap() >= dij);
                }
            }
            prop_assert_eq!(d.get(j, j), None);
        }
    }

    #[test]
    fn interaction_sets_are_consistent(rows in 1usize..4, cols in 1usize..7, spacing in 20.0f64..700.0, h in 1usize..120) {
        let l = build_layout(&FarmConfig { rows, cols, downstream_spacing: spacing, ..FarmConfig::ten_turbine() }).unwrap();
        let d = compute_delays(&l);
        let s = interaction_sets(&l, &d, h).unwrap();
        for i in 0..l.turbines() {
            prop_assert!(s.direct_upstream[i].len() <= 1);
            for &j in &s.upstream_within[i] {
                prop_assert!(s.upstream[i].contains(&j));
                prop_assert!(s.downstream_within[j].contains(&i));
                prop_assert_eq!(l.row(i), l.row(j));
            }
            for &j in &s.upstream[i] {
                prop_assert!(l.col(j) < l.col(i));
            }
        }
    }

    #[test]
    fn steady_state_is_physical(cts in prop::collection::vec(0.01f64..BETZ_CT, 1..7), cw in 0.2f64..0.8) {
        let l = row(cts.len(), 630.0);
        let ss = steady_state(&l, &PlantParams::new(cw, 5.0), &cts).unwrap();
        let (vinf, ar, rho) = (l.free_stream(), l.rotor_area(), l.air_density());
        let betz = 0.5 * rho * ar * vinf.powi(3) * 16.0 / 27.0;
        for i in 0..cts.len() {
            prop_assert!(ss.winds[i] > 0.0 && ss.winds[i] <= vinf);
            prop_assert!(ss.deficits[i] >= 0.0);
            prop_assert!(ss.powers[i] >= 0.0 && ss.powers[i] <= betz * (1.0 + 1e-12));
            if i > 0 {
                prop_assert!(ss.winds[i] <= ss.winds[i - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn filtered_thrust_stays_within_inputs(inputs in prop::collection::vec(0.0f64..1.0, 1..60)) {
        let l = row(2, 630.0);
        let mut plant = WakePlant::new(&l, &PlantParams::new(0.5, 5.0)).unwrap();
        plant.warm_start(&[0.5, 0.5]).unwrap();
        let (mut lo, mut hi) = (0.5f64, 0.5f64);
        for &u in &inputs {
            lo = lo.min(u);
            hi = hi.max(u);
            let out = plant.step(&[u, u]).unwrap();
            prop_assert_eq!(out.total_power(), out.powers.iter().sum::<f64>());
            let c = plant.state().unwrap().filtered_cts()[0];
            prop_assert!(c >= lo - 1e-15 && c <= hi + 1e-15);
        }
    }

    #[test]
    fn biases_reproduce_any_point(cts in prop::collection::vec(0.05f64..0.88, 2..6), cw in 0.2f64..0.8) {
        let l = row(cts.len(), 630.0);
        let params = PlantParams::new(cw, 5.0);
        let point = LinearizationPoint::from_steady_state(&l, &params, &cts).unwrap();
        let m = ControllerModel::new(&l, &params, &cts, TuningConstants::default(), 10, 4096).unwrap();
        let x = equilibrium_states(&m.subsystems, &point);
        let (next, y) = step_subsystems(&m.subsystems, &x, &cts);
        for i in 0..cts.len() {
            prop_assert!((y[i] - point.turbines[i].power).abs() <= 1e-9 * point.turbines[i].power);
            prop_assert!((&next[i] - &x[i]).amax() <= 1e-9);
        }
    }

    #[test]
    fn running_sums_round_trip(v in prop::collection::vec(-1.0f64..1.0, 1..40), h in 1usize..8) {
        let n = (v.len() / h).max(1) * h;
        let du = DVector::from_fn(n, |k, _| v[k % v.len()]);
        let back = differences(&cumulative(&du, h), h);
        prop_assert!((back - &du).amax() <= 1e-14);
    }

    #[test]
    fn synthetic_reference_is_normalized(seed in any::<u64>(), n in 2usize..2000, gamma in 0.0f64..1.0) {
        let d = synthetic_signal(n, seed);
        prop_assert_eq!(d.len(), n);
        prop_assert!(d.iter().all(|v| v.abs() <= 1.0));
        let r = ReferenceSignal::from_normalized(d.clone(), gamma, 0.8, 1e6, ReferenceSource::Synthetic { seed }).unwrap();
        for (p, v) in r.samples.iter().zip(&d) {
            prop_assert!((p - (0.8 + gamma * v) * 1e6).abs() < 1e-6);
        }
        if d.iter().any(|&v| v == 1.0) && gamma > 0.2 {
            prop_assert!(r.first_exceedance().is_some());
        }
    }

    #[test]
    fn constant_error_rmse(e in -1e6f64..1e6, n in 1usize..200) {
        let r = vec![3.0e6; n];
        let p: Vec<f64> = r.iter().map(|x| x - e).collect();
        prop_assert!((rmse(&r, &p) - e.abs()).abs() <= 1e-9 * e.abs().max(1.0));
    }

    #[test]
    fn traces_round_trip(values in prop::collection::vec(-1e7f64..1e7, 9), k in 0usize..10_000) {
        let rec = SampleRecord {
            k,
            p_ref: values[0],
            p_total: values[1] + values[2],
            powers: vec![values[1], values[2]],
            cts: vec![values[3], values[4]],
            winds: vec![values[5], values[6]],
        };
        let mut buf = Vec::new();
        write_traces(std::slice::from_ref(&rec), &mut buf).unwrap();
        prop_assert_eq!(read_traces(buf.as_slice()).unwrap(), vec![rec]);
    }
}

fn random_problem(m: &ControllerModel, seed: u64, prev: &[f64]) -> StepProblem {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = m.layout.turbines();
    let h = m.prediction.horizon;
    let free: Vec<DVector<f64>> = (0..g).map(|_| DVector::from_element(h, rng.gen_range(0.5..1.5))).collect();
    let total: f64 = free.iter().map(|f| f[0]).sum();
    StepProblem {
        free_responses: free,
        y_ref: DVector::from_fn(h, |_, _| total * rng.gen_range(0.7..1.3)),
        bounds: CumulativeBoxConstraint::new(0.01, BETZ_CT, prev, h).unwrap(),
        weights: CostWeights { q: 1.0, r: 0.4 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // every combined iterate is feasible and the cost never rises
    #[test]
    fn jacobi_iterates_are_feasible_and_descend(
        cols in 2usize..5,
        spacing in prop::sample::select(vec![30.0, 60.0, 630.0]),
        seed in any::<u64>(),
        prev in prop::collection::vec(0.01f64..BETZ_CT, 4),
    ) {
        let l = row(cols, spacing);
        let params = PlantParams::new(0.68, 5.0);
        let m = ControllerModel::new(&l, &params, &vec![0.6; cols], TuningConstants::default(), 8, 4096).unwrap();
        let p = random_problem(&m, seed, &prev[..cols]);
        let cfg = JacobiConfig { tolerance: 1e-8, ..JacobiConfig::default() };
        let solver = JacobiSolver::new(&m.prediction, make_subproblems(&l, &m.sets), p.weights, cfg).unwrap();
        let out = solver.iterate(&m.prediction, &p, None).unwrap();
        for w in out.costs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert_eq!(p.bounds.violation(&out.du), 0.0);
    }

    // partitions split and reassemble the increments without loss
    #[test]
    fn select_merge_is_lossless(cols in 1usize..6, spacing in prop::sample::select(vec![30.0, 630.0]), h in 1usize..30) {
        let l = row(cols, spacing);
        let d = compute_delays(&l);
        let sets = interaction_sets(&l, &d, h).unwrap();
        let du: Vec<DVector<f64>> = (0..cols).map(|i| DVector::from_fn(h, |t, _| (i * 100 + t) as f64)).collect();
        for spec in make_subproblems(&l, &sets) {
            let x = spec.select(&du);
            prop_assert_eq!(x.len(), spec.free_set.len() * h);
            prop_assert_eq!(spec.merge(&x, &du), du.clone());
        }
    }
}
