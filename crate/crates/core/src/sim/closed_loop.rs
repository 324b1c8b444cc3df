//! Receding-horizon simulation of the controller against the wake plant.

use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::config::{InitialCt, SimConfig};
use super::reference::{load_or_generate_reference, ReferenceSignal};
use crate::error::{Error, Result};
use crate::jacobi::{ControlMode, ControllerModel, DmpcController};
use crate::plant::{greedy_power, steady_state, PlantParams, WakePlant};
use crate::topology::{build_layout, FarmLayout};

/// One row of the persisted trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub k: usize,
    pub p_ref: f64,
    pub p_total: f64,
    pub powers: Vec<f64>,
    /// Thrust coefficients applied at this sample.
    pub cts: Vec<f64>,
    pub winds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub centralized_cost: Option<f64>,
    /// RMS difference to the centralized plan, in units of the CT range.
    pub distance: Option<f64>,
    /// Cost after each Jacobi iteration, starting with the initial guess.
    pub iteration_costs: Vec<f64>,
    pub plan_violation: f64,
}

impl StepStats {
    /// Relative cost excess over the centralized optimum.
    pub fn cost_gap(&self) -> Option<f64> {
        self.centralized_cost.map(|c| (self.cost - c) / c.abs().max(f64::MIN_POSITIVE))
    }

    /// Largest increase of cost between consecutive iterations.
    pub fn worst_ascent(&self) -> f64 {
        self.iteration_costs
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    /// Applied coefficients outside the controller bounds.
    pub applied: usize,
    /// Steps whose planned trajectory leaves the bounds.
    pub planned: usize,
    pub worst_plan_violation: f64,
    /// Inputs the plant had to clamp.
    pub plant_clamps: usize,
}

/// Breakdown of one sample's parallel-time estimate, in seconds. Phase
/// entries are summed over the Jacobi iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub parallel: f64,
    pub serial: f64,
    pub slowest_subproblem: f64,
    pub mean_subproblem: f64,
    pub combine: f64,
    pub slowest_prediction: f64,
}

impl StepTiming {
    fn from_outcome(out: &crate::jacobi::StepOutcome) -> Self {
        let mut t = StepTiming {
            parallel: out.parallel_seconds,
            serial: out.serial_seconds,
            ..Default::default()
        };
        for r in &out.trace {
            let n = r.subproblem_seconds.len().max(1) as f64;
            t.slowest_subproblem += r.subproblem_seconds.iter().copied().fold(0.0, f64::max);
            t.mean_subproblem += r.subproblem_seconds.iter().sum::<f64>() / n;
            t.combine += r.combine_seconds;
            t.slowest_prediction += r.prediction_seconds.iter().copied().fold(0.0, f64::max);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub median_parallel_seconds: f64,
    pub mean_parallel_seconds: f64,
    pub max_parallel_seconds: f64,
    pub wall_seconds: f64,
}

impl TimingSummary {
    pub fn from_samples(parallel: &[f64], wall_seconds: f64) -> Self {
        let mut sorted = parallel.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        TimingSummary {
            median_parallel_seconds: median,
            mean_parallel_seconds: if n == 0 { 0.0 } else { sorted.iter().sum::<f64>() / n as f64 },
            max_parallel_seconds: sorted.last().copied().unwrap_or(0.0),
            wall_seconds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimConfig,
    pub greedy_power: f64,
    pub initial_ct: Vec<f64>,
    pub reference: ReferenceSignal,
    pub records: Vec<SampleRecord>,
    pub steps: Vec<StepStats>,
    pub rmse: f64,
    pub final_quarter_rmse: f64,
    pub audit: ConstraintAudit,
    pub nonconverged_steps: usize,
    /// Estimated parallel seconds per step; excluded from the trace file.
    pub parallel_seconds: Vec<f64>,
    pub step_timing: Vec<StepTiming>,
    pub timing: TimingSummary,
}

impl SimulationReport {
    pub fn turbines(&self) -> usize {
        self.records.first().map_or(0, |r| r.powers.len())
    }
}

/// Square root of the mean squared tracking error.
pub fn rmse(reference: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(reference.len(), actual.len());
    if reference.is_empty() {
        return 0.0;
    }
    let sum: f64 = reference.iter().zip(actual).map(|(r, p)| (r - p) * (r - p)).sum();
    (sum / reference.len() as f64).sqrt()
}

/// RMSE over the last quarter of the samples.
pub fn final_quarter_rmse(reference: &[f64], actual: &[f64]) -> f64 {
    let start = reference.len() - reference.len() / 4;
    rmse(&reference[start..], &actual[start..])
}

/// Uniform thrust coefficient in `[lo, hi]` whose steady farm power is
/// closest to `target`, by bisection. Farm power grows with a uniform
/// coefficient below the Betz limit.
pub fn uniform_ct_for_power(layout: &FarmLayout, params: &PlantParams, target: f64, lo: f64, hi: f64) -> Result<f64> {
    let g = layout.turbines();
    let power = |c: f64| -> Result<f64> { Ok(steady_state(layout, params, &vec![c; g])?.total_power()) };
    if power(lo)? >= target {
        return Ok(lo);
    }
    if power(hi)? <= target {
        return Ok(hi);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if power(m)? < target {
            a = m;
        } else {
            b = m;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

fn at(module: &'static str, sample: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Simulation {
        module,
        sample,
        source: Box::new(e),
    }
}

/// Builds the reference, initializes plant and controller, and runs the
/// configured number of samples.
pub fn run_closed_loop(config: &SimConfig) -> Result<SimulationReport> {
    config.validate()?;
    let started = Instant::now();
    let layout = build_layout(&config.farm)?;
    let g = layout.turbines();
    let plant_params = config.plant_params();
    let model_params = config.control_model.params();
    let ctrl = config.controller_config();
    let n = config.simulation.samples;

    let greedy = greedy_power(&layout, &plant_params).map_err(at("wake_plant", 0))?;
    let reference = load_or_generate_reference(
        config.reference.file.as_deref(),
        config.reference.gamma,
        config.reference.base,
        greedy,
        n,
        config.reference.seed,
    )?;
    let initial = match &config.simulation.initial_ct {
        InitialCt::Uniform(c) => *c,
        InitialCt::Named(_) => {
            uniform_ct_for_power(&layout, &plant_params, reference.samples[0], ctrl.ct_min, ctrl.ct_max)
                .map_err(at("wake_plant", 0))?
        }
    };
    let initial = vec![initial; g];
    info!("greedy power {:.4} MW, initial C_T {:.4}", greedy * 1e-6, initial[0]);

    let point = config.control_model.linearization_ct.resolve(g)?;
    let model = ControllerModel::new(
        &layout,
        &model_params,
        &point,
        config.control_model.constants(),
        ctrl.horizon,
        ctrl.state_budget,
    )
    .map_err(at("linear_model", 0))?;
    let (lo, hi) = (ctrl.ct_min, ctrl.ct_max);
    let distance_scale = hi - lo;
    let mut controller = DmpcController::new(model, ctrl.clone())?;

    let mut plant = WakePlant::new(&layout, &plant_params)?;
    plant.warm_start(&initial).map_err(at("wake_plant", 0))?;
    let mut previous = initial.clone();

    let mut records = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut parallel = Vec::with_capacity(n);
    let mut step_timing = Vec::with_capacity(n);
    let mut audit = ConstraintAudit::default();
    let mut nonconverged = 0;
    for k in 0..n {
        let window = reference.window(k, ctrl.horizon);
        let out = controller
            .step(&plant, &previous, &window)
            .map_err(at(module_of(ctrl.mode), k))?;
        let unclamped_bad = previous
            .iter()
            .zip(&out.plan)
            .any(|(c, d)| !(lo..=hi).contains(&(c + d[0])));
        if unclamped_bad || out.applied.iter().any(|c| !(lo..=hi).contains(c)) {
            audit.applied += 1;
        }
        if out.plan_violation > 0.0 {
            audit.planned += 1;
            audit.worst_plan_violation = audit.worst_plan_violation.max(out.plan_violation);
        }
        if !out.converged {
            nonconverged += 1;
            debug!("sample {k}: Jacobi stopped after {} iterations", out.iterations);
        }
        let distance = out.centralized.as_ref().map(|(plan, _)| {
            let mut sq = 0.0;
            let mut count = 0;
            for (a, b) in out.plan.iter().zip(plan) {
                sq += (a - b).norm_squared();
                count += a.len();
            }
            (sq / count as f64).sqrt() / distance_scale
        });
        step_timing.push(StepTiming::from_outcome(&out));
        steps.push(StepStats {
            iterations: out.iterations,
            converged: out.converged,
            cost: out.cost,
            centralized_cost: out.centralized.as_ref().map(|c| c.1),
            distance,
            iteration_costs: out.costs,
            plan_violation: out.plan_violation,
        });
        parallel.push(out.parallel_seconds);

        let measured = plant.step(&out.applied).map_err(at("wake_plant", k))?;
        records.push(SampleRecord {
            k,
            p_ref: reference.samples[k],
            p_total: measured.total_power(),
            powers: measured.powers,
            cts: out.applied.clone(),
            winds: measured.winds,
        });
        previous = out.applied;
    }
    audit.plant_clamps = plant.clamped_inputs();
    if nonconverged > 0 {
        warn!("Jacobi iteration cap reached at {nonconverged} of {n} samples");
    }
    let p_ref: Vec<f64> = records.iter().map(|r| r.p_ref).collect();
    let p: Vec<f64> = records.iter().map(|r| r.p_total).collect();
    let timing = TimingSummary::from_samples(&parallel, started.elapsed().as_secs_f64());
    Ok(SimulationReport {
        config: config.clone(),
        greedy_power: greedy,
        initial_ct: initial,
        rmse: rmse(&p_ref, &p),
        final_quarter_rmse: final_quarter_rmse(&p_ref, &p),
        reference,
        records,
        steps,
        audit,
        nonconverged_steps: nonconverged,
        parallel_seconds: parallel,
        step_timing,
        timing,
    })
}

fn module_of(mode: ControlMode) -> &'static str {
    match mode {
        ControlMode::Distributed => "jacobi_dmpc",
        ControlMode::Centralized => "qp_core",
    }
}

/// The same loop with one full QP per sample.
pub fn run_centralized_oracle(config: &SimConfig) -> Result<SimulationReport> {
    let mut c = config.clone();
    c.control.mode = ControlMode::Centralized;
    c.control.compare_centralized = false;
    run_closed_loop(&c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::FarmConfig;

    fn small() -> SimConfig {
        let mut c = SimConfig::ten_turbine();
        c.farm = FarmConfig {
            rows: 1,
            cols: 3,
            downstream_spacing: 60.0,
            ..FarmConfig::ten_turbine()
        };
        c.control.horizon = 10;
        c.simulation.samples = 40;
        c
    }

    #[test]
    fn rmse_definition() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(rmse(&[3.0; 5], &[1.0; 5]), 2.0);
        let r = rmse(&[1.0, 2.0, 3.0, 4.0], &[1.5, 1.0, 3.0, 6.0]);
        assert!((r - (5.25f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(final_quarter_rmse(&[0.0, 0.0, 0.0, 1.0], &[5.0, 5.0, 5.0, 0.0]), 1.0);
    }

    #[test]
    fn initial_ct_matches_target_power() {
        let l = build_layout(&FarmConfig::ten_turbine()).unwrap();
        let p = PlantParams::new(0.68, 5.0);
        let full = steady_state(&l, &p, &[0.8; 10]).unwrap().total_power();
        let c = uniform_ct_for_power(&l, &p, full, 0.01, 8.0 / 9.0).unwrap();
        assert!((c - 0.8).abs() < 1e-9);
        assert_eq!(uniform_ct_for_power(&l, &p, 1e12, 0.01, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn bookkeeping_and_audit() {
        let r = run_closed_loop(&small()).unwrap();
        assert_eq!(r.records.len(), 40);
        for rec in &r.records {
            assert_eq!(rec.p_total, rec.powers.iter().sum::<f64>());
            assert!(rec.cts.iter().all(|c| (0.01..=8.0 / 9.0).contains(c)));
        }
        assert_eq!(r.audit, ConstraintAudit::default());
        assert_eq!(r.parallel_seconds.len(), 40);
    }

    #[test]
    fn single_turbine_oracle_matches_distributed() {
        let mut c = small();
        c.farm.cols = 1;
        let a = run_closed_loop(&c).unwrap();
        let b = run_centralized_oracle(&c).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            for (p, q) in x.cts.iter().zip(&y.cts) {
                assert!((p - q).abs() < 1e-8, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn oracle_refuses_large_problems() {
        let mut c = SimConfig::ten_turbine();
        c.simulation.samples = 2;
        c.control.oracle_cap = 100;
        let e = run_centralized_oracle(&c).unwrap_err();
        assert!(matches!(e, Error::OracleCap { size: 600, cap: 100 }));
        assert!(e.to_string().contains("raise `oracle_cap`"));
    }
}
