//! Weighted Jacobi distributed MPC.
//!
//! One subproblem per turbine `i` optimizes the increments of `i` and of the
//! turbines its wake reaches within the horizon, with everything else frozen
//! at the current iterate. Local solutions are combined convexly, the shared
//! predictions are refreshed, and the loop repeats until every turbine's
//! increment plan stops moving.
//!
//! Subproblems run on a rayon pool. Each reads a frozen snapshot and the
//! results are combined in a fixed order, so iterates do not depend on the
//! number of workers.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear::{
    equilibrium_states, measured_states, realize_state_space, to_velocity_form, velocity_state, FusedModel,
    LinearizationPoint, SubsystemModel, TuningConstants, MW_PER_W,
};
use crate::plant::{PlantParams, WakePlant, BETZ_CT};
use crate::prediction::CompiledPrediction;
use crate::qp::{
    build_cost, solve_qp_from, tracking_cost, CostWeights, CumulativeBoxConstraint, SharedIterate,
    QpOptions, QpStructure,
};
use crate::topology::{compute_delays, interaction_sets, DelayTable, FarmLayout, InteractionSets};

/// Rounding slack tolerated (and removed) when combining feasible plans.
const COMBINE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobiConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Initial residual multiplier, must exceed one.
    pub init_scale: f64,
    /// Subproblem weights; uniform when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Start each sample from the shifted previous plan instead of zero.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl Default for JacobiConfig {
    fn default() -> Self {
        JacobiConfig {
            max_iterations: 200,
            tolerance: 1e-2,
            init_scale: 10.0,
            weights: None,
            warm_start: false,
            workers: 1,
        }
    }
}

impl JacobiConfig {
    pub fn validate(&self, subproblems: usize) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::validation("tolerance", "must be positive"));
        }
        if !(self.init_scale > 1.0) {
            return Err(Error::validation("init_scale", "must exceed one"));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers", "must be at least one"));
        }
        if let Some(w) = &self.weights {
            if w.len() != subproblems {
                return Err(Error::validation("weights", format!("need {subproblems} weights, got {}", w.len())));
            }
            if w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::validation("weights", "must be positive"));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::validation("weights", "must sum to one"));
            }
        }
        Ok(())
    }

    pub fn weights_for(&self, subproblems: usize) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / subproblems as f64; subproblems])
    }
}

/// Local problem of one turbine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubproblemSpec {
    pub index: usize,
    /// The turbine and every turbine its wake reaches within the horizon.
    pub free_set: Vec<usize>,
    /// Turbines whose predictions depend on the free set.
    pub evaluation_set: Vec<usize>,
}

impl SubproblemSpec {
    pub fn is_free(&self, turbine: usize) -> bool {
        self.free_set.contains(&turbine)
    }

    /// Increments of the free turbines, stacked.
    pub fn select(&self, du: &[DVector<f64>]) -> DVector<f64> {
        let h = du[0].len();
        let mut x = DVector::zeros(self.free_set.len() * h);
        for (b, &j) in self.free_set.iter().enumerate() {
            x.rows_mut(b * h, h).copy_from(&du[j]);
        }
        x
    }

    /// Replaces the free turbines' increments in `du` by the blocks of `x`.
    pub fn merge(&self, x: &DVector<f64>, du: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let h = du[0].len();
        let mut out = du.to_vec();
        for (b, &j) in self.free_set.iter().enumerate() {
            out[j] = x.rows(b * h, h).clone_owned();
        }
        out
    }
}

pub fn make_subproblems(layout: &FarmLayout, sets: &InteractionSets) -> Vec<SubproblemSpec> {
    (0..layout.turbines())
        .map(|i| {
            let mut free_set = vec![i];
            free_set.extend(&sets.downstream_within[i]);
            let mut evaluation_set: Vec<usize> = free_set
                .iter()
                .flat_map(|&j| std::iter::once(j).chain(sets.downstream_within[j].iter().copied()))
                .collect();
            evaluation_set.sort_unstable();
            evaluation_set.dedup();
            SubproblemSpec {
                index: i,
                free_set,
                evaluation_set,
            }
        })
        .collect()
}

/// Data fixed during one receding-horizon sample.
#[derive(Debug, Clone)]
pub struct StepProblem {
    pub free_responses: Vec<DVector<f64>>,
    /// Reference over the horizon, MW.
    pub y_ref: DVector<f64>,
    pub bounds: CumulativeBoxConstraint,
    pub weights: CostWeights,
}

impl StepProblem {
    pub fn predictions(&self, pred: &CompiledPrediction, du: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..pred.turbines())
            .map(|i| pred.forced(i, &self.free_responses[i], du))
            .collect()
    }

    pub fn cost_of(&self, y: &[DVector<f64>], du: &[DVector<f64>]) -> f64 {
        let sum = y.iter().fold(DVector::zeros(self.y_ref.len()), |acc, yi| acc + yi);
        tracking_cost(&sum, &self.y_ref, du, self.weights)
    }

    pub fn cost_shared(&self, shared: &SharedIterate, du: &[DVector<f64>]) -> f64 {
        tracking_cost(&shared.sum, &self.y_ref, du, self.weights)
    }

    pub fn cost(&self, pred: &CompiledPrediction, du: &[DVector<f64>]) -> f64 {
        self.cost_of(&self.predictions(pred, du), du)
    }
}

#[derive(Debug, Clone)]
pub struct JacobiState {
    pub du: Vec<DVector<f64>>,
    pub shared: SharedIterate,
    pub residuals: Vec<f64>,
    pub iteration: usize,
}

impl JacobiState {
    pub fn new(du: Vec<DVector<f64>>, y: Vec<DVector<f64>>, residuals: Vec<f64>, iteration: usize) -> Self {
        JacobiState {
            shared: SharedIterate::new(y, &du),
            du,
            residuals,
            iteration,
        }
    }
}

/// Solves subproblem `z` against the snapshot `state` and returns the
/// increments of its free turbines, stacked in free-set order.
pub fn solve_local(
    spec: &SubproblemSpec,
    structure: &Arc<QpStructure>,
    pred: &CompiledPrediction,
    problem: &StepProblem,
    state: &JacobiState,
    warm: Option<&DVector<f64>>,
    options: &QpOptions,
) -> Result<DVector<f64>> {
    let qp = build_cost(
        structure,
        pred,
        &problem.free_responses,
        Some(&state.shared),
        &problem.y_ref,
        &state.du,
        &problem.bounds,
    )
    .and_then(|qp| solve_qp_from(&qp, warm, options))
    .map_err(|e| Error::Subproblem {
        subproblem: spec.index,
        source: Box::new(e),
    })?;
    Ok(qp.x)
}

/// Per-iteration record. Durations are wall-clock seconds.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub max_residual: f64,
    pub subproblem_seconds: Vec<f64>,
    pub combine_seconds: f64,
    pub prediction_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct JacobiOutcome {
    pub du: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the initial iterate followed by the cost after each iteration.
    pub costs: Vec<f64>,
    pub residual_history: Vec<Vec<f64>>,
    pub trace: Vec<IterationRecord>,
    /// Last local solution of each subproblem.
    pub local: Vec<Option<DVector<f64>>>,
}

/// Convex combination of the local results. A subproblem that does not own
/// turbine `i` contributes the previous iterate, so only owners are read:
/// `du_i <- kept_i du_i + sum over owners of w_z x_z,i`. Rounding-level
/// bound violations are clipped afterwards.
fn combine(
    local: &[DVector<f64>],
    owners: &[Vec<(usize, usize)>],
    kept: &[f64],
    weights: &[f64],
    previous: &[DVector<f64>],
    bounds: &CumulativeBoxConstraint,
) -> Result<Vec<DVector<f64>>> {
    let h = bounds.horizon;
    (0..previous.len())
        .map(|i| {
            let mut acc = &previous[i] * kept[i];
            for &(z, b) in &owners[i] {
                acc.axpy(weights[z], &local[z].rows(b * h, h), 1.0);
            }
            let excess = bounds.turbine_violation(i, &acc);
            if excess > COMBINE_SLACK {
                return Err(Error::Infeasible(format!(
                    "combined plan of turbine {i} leaves its bounds by {excess:e}"
                )));
            }
            if excess > 0.0 {
                bounds.repair(i, &mut acc);
            }
            Ok(acc)
        })
        .collect()
}

/// Everything the iteration needs besides the per-sample data.
pub struct JacobiSolver {
    pub config: JacobiConfig,
    pub subproblems: Vec<SubproblemSpec>,
    pub structures: Vec<Arc<QpStructure>>,
    pub qp_options: QpOptions,
    weights: Vec<f64>,
    /// `(subproblem, block)` pairs that own each turbine.
    owners: Vec<Vec<(usize, usize)>>,
    /// Weight left on the previous iterate of each turbine.
    kept: Vec<f64>,
    pool: rayon::ThreadPool,
}

impl JacobiSolver {
    pub fn new(
        pred: &CompiledPrediction,
        subproblems: Vec<SubproblemSpec>,
        cost: CostWeights,
        config: JacobiConfig,
    ) -> Result<Self> {
        config.validate(subproblems.len())?;
        let structures = subproblems
            .iter()
            .map(|s| QpStructure::new(pred, &s.free_set, cost).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let weights = config.weights_for(subproblems.len());
        let g = pred.turbines();
        let mut owners = vec![Vec::new(); g];
        let mut kept = vec![0.0; g];
        for (z, spec) in subproblems.iter().enumerate() {
            for i in 0..g {
                match spec.free_set.iter().position(|&j| j == i) {
                    Some(b) => owners[i].push((z, b)),
                    None => kept[i] += weights[z],
                }
            }
        }
        Ok(JacobiSolver {
            weights,
            owners,
            kept,
            config,
            subproblems,
            structures,
            qp_options: QpOptions::default(),
            pool,
        })
    }

    /// Runs the iteration from `initial` (zero plan when absent).
    pub fn iterate(
        &self,
        pred: &CompiledPrediction,
        problem: &StepProblem,
        initial: Option<Vec<DVector<f64>>>,
    ) -> Result<JacobiOutcome> {
        self.iterate_with(pred, problem, initial, vec![None; self.subproblems.len()])
    }

    /// As [`JacobiSolver::iterate`], with starting points for the first QP
    /// solve of each subproblem. Starts only affect the active-set search,
    /// not the solutions.
    pub fn iterate_with(
        &self,
        pred: &CompiledPrediction,
        problem: &StepProblem,
        initial: Option<Vec<DVector<f64>>>,
        qp_starts: Vec<Option<DVector<f64>>>,
    ) -> Result<JacobiOutcome> {
        if qp_starts.len() != self.subproblems.len() {
            return Err(Error::validation("qp_starts", "one entry per subproblem"));
        }
        let g = pred.turbines();
        let h = pred.horizon;
        let du0 = initial.unwrap_or_else(|| vec![DVector::zeros(h); g]);
        let y0 = problem.predictions(pred, &du0);
        let mut state = JacobiState::new(du0, y0, vec![self.config.init_scale * self.config.tolerance; g], 0);
        let mut costs = vec![problem.cost_shared(&state.shared, &state.du)];
        let mut residual_history = Vec::new();
        let mut trace = Vec::new();
        let mut warm = qp_starts;
        while state.residuals.iter().any(|&e| e > self.config.tolerance) && state.iteration < self.config.max_iterations
        {
            let snapshot = &state;
            let results: Vec<Result<(DVector<f64>, f64)>> = self.pool.install(|| {
                self.subproblems
                    .par_iter()
                    .zip(self.structures.par_iter())
                    .zip(warm.par_iter())
                    .map(|((spec, structure), start)| {
                        let t0 = Instant::now();
                        let x = solve_local(spec, structure, pred, problem, snapshot, start.as_ref(), &self.qp_options)?;
                        Ok((x, t0.elapsed().as_secs_f64()))
                    })
                    .collect()
            });
            let mut local = Vec::with_capacity(results.len());
            let mut subproblem_seconds = Vec::with_capacity(results.len());
            for (z, r) in results.into_iter().enumerate() {
                let (x, secs) = r?;
                warm[z] = Some(x.clone());
                local.push(x);
                subproblem_seconds.push(secs);
            }
            let t0 = Instant::now();
            let next = combine(&local, &self.owners, &self.kept, &self.weights, &state.du, &problem.bounds)?;
            let residuals: Vec<f64> = (0..g).map(|i| (&next[i] - &state.du[i]).norm()).collect();
            let mut combine_seconds = t0.elapsed().as_secs_f64();
            let timed: Vec<(DVector<f64>, f64)> = self.pool.install(|| {
                (0..g)
                    .into_par_iter()
                    .map(|i| {
                        let t0 = Instant::now();
                        let y = pred.forced(i, &problem.free_responses[i], &next);
                        (y, t0.elapsed().as_secs_f64())
                    })
                    .collect()
            });
            let (y, prediction_seconds): (Vec<_>, Vec<_>) = timed.into_iter().unzip();
            // the farm sum is reduced once and broadcast; count it with the combine
            let t0 = Instant::now();
            state = JacobiState::new(next, y, residuals, state.iteration + 1);
            combine_seconds += t0.elapsed().as_secs_f64();
            let cost = problem.cost_shared(&state.shared, &state.du);
            costs.push(cost);
            residual_history.push(state.residuals.clone());
            trace.push(IterationRecord {
                iteration: state.iteration,
                cost,
                max_residual: state.residuals.iter().copied().fold(0.0, f64::max),
                subproblem_seconds,
                combine_seconds,
                prediction_seconds,
            });
        }
        let converged = state.residuals.iter().all(|&e| e <= self.config.tolerance);
        Ok(JacobiOutcome {
            du: state.du,
            y: state.shared.y,
            iterations: state.iteration,
            converged,
            costs,
            residual_history,
            trace,
            local: warm,
        })
    }
}

/// Centralized solve of the same problem over all turbines.
pub fn solve_centralized(
    structure: &Arc<QpStructure>,
    pred: &CompiledPrediction,
    problem: &StepProblem,
    options: &QpOptions,
) -> Result<Vec<DVector<f64>>> {
    let g = pred.turbines();
    let h = pred.horizon;
    let zero = vec![DVector::zeros(h); g];
    let qp = build_cost(structure, pred, &problem.free_responses, None, &problem.y_ref, &zero, &problem.bounds)?;
    let sol = solve_qp_from(&qp, None, options)?;
    Ok((0..g)
        .map(|i| {
            let mut d = sol.x.rows(i * h, h).clone_owned();
            problem.bounds.repair(i, &mut d);
            d
        })
        .collect())
}

/// Parallel wall-time estimate of one sample: for each iteration the slowest
/// subproblem, the combine step and the slowest prediction update, plus the
/// serial work outside the iteration.
pub fn estimate_parallel_time(trace: &[IterationRecord], serial_seconds: f64) -> f64 {
    serial_seconds
        + trace
            .iter()
            .map(|r| {
                r.subproblem_seconds.iter().copied().fold(0.0, f64::max)
                    + r.combine_seconds
                    + r.prediction_seconds.iter().copied().fold(0.0, f64::max)
            })
            .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Distributed,
    Centralized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub weights: CostWeights,
    pub ct_min: f64,
    pub ct_max: f64,
    pub jacobi: JacobiConfig,
    pub mode: ControlMode,
    /// Also solve the centralized problem every sample, for comparison.
    #[serde(default)]
    pub compare_centralized: bool,
    pub state_budget: usize,
    /// Cap on `G * H` for centralized solves.
    pub oracle_cap: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            horizon: 60,
            weights: CostWeights { q: 1.0, r: 0.4 },
            ct_min: 0.01,
            ct_max: BETZ_CT,
            jacobi: JacobiConfig::default(),
            mode: ControlMode::Distributed,
            compare_centralized: false,
            state_budget: 4096,
            oracle_cap: 2000,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least one sample"));
        }
        self.weights.validate()?;
        if !(self.ct_min < self.ct_max) || self.ct_min < 0.0 || self.ct_max > 1.0 {
            return Err(Error::validation("ct_min", "need 0 <= ct_min < ct_max <= 1"));
        }
        Ok(())
    }
}

/// Model data shared by the controller.
pub struct ControllerModel {
    pub layout: FarmLayout,
    pub delays: DelayTable,
    pub sets: InteractionSets,
    pub fused: FusedModel,
    pub subsystems: Vec<SubsystemModel>,
    pub prediction: CompiledPrediction,
}

impl ControllerModel {
    pub fn new(
        layout: &FarmLayout,
        params: &PlantParams,
        point_cts: &[f64],
        constants: TuningConstants,
        horizon: usize,
        state_budget: usize,
    ) -> Result<Self> {
        let delays = compute_delays(layout);
        let sets = interaction_sets(layout, &delays, horizon)?;
        let point = LinearizationPoint::from_steady_state(layout, params, point_cts)?;
        let fused = FusedModel::new(layout, params, point, constants)?;
        let subsystems = realize_state_space(layout, &delays, &fused, state_budget)?;
        let velocity: Vec<_> = subsystems.iter().map(|s| to_velocity_form(s, MW_PER_W)).collect();
        let prediction = CompiledPrediction::build(&velocity, &sets, horizon)?;
        Ok(ControllerModel {
            layout: layout.clone(),
            delays,
            sets,
            fused,
            subsystems,
            prediction,
        })
    }
}

/// Result of one receding-horizon sample.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub applied: Vec<f64>,
    pub plan: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    /// Cost sequence over the Jacobi iterations.
    pub costs: Vec<f64>,
    pub trace: Vec<IterationRecord>,
    pub centralized: Option<(Vec<DVector<f64>>, f64)>,
    pub parallel_seconds: f64,
    /// Serial part of `parallel_seconds`: state reconstruction and the
    /// slowest free response.
    pub serial_seconds: f64,
    /// Largest bound violation among the planned thrust trajectories.
    pub plan_violation: f64,
}

pub struct DmpcController {
    pub config: ControllerConfig,
    pub model: ControllerModel,
    solver: Option<JacobiSolver>,
    central: Option<Arc<QpStructure>>,
    previous_plan: Option<Vec<DVector<f64>>>,
    previous_local: Option<Vec<Option<DVector<f64>>>>,
}

impl DmpcController {
    pub fn new(model: ControllerModel, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let g = model.layout.turbines();
        let needs_central = config.mode == ControlMode::Centralized || config.compare_centralized;
        let central = if needs_central {
            let size = g * config.horizon;
            if size > config.oracle_cap {
                return Err(Error::OracleCap {
                    size,
                    cap: config.oracle_cap,
                });
            }
            let all: Vec<usize> = (0..g).collect();
            Some(Arc::new(QpStructure::new(&model.prediction, &all, config.weights)?))
        } else {
            None
        };
        let solver = if config.mode == ControlMode::Distributed {
            let specs = make_subproblems(&model.layout, &model.sets);
            Some(JacobiSolver::new(&model.prediction, specs, config.weights, config.jacobi.clone())?)
        } else {
            None
        };
        Ok(DmpcController {
            config,
            model,
            solver,
            central,
            previous_plan: None,
            previous_local: None,
        })
    }

    /// Velocity-form states read from the plant: measured power in MW and
    /// the change of the reconstructed model state over the last sample.
    pub fn measured_velocity_states(&self, plant: &WakePlant) -> Result<Vec<DVector<f64>>> {
        let now = measured_states(&self.model.subsystems, plant, 0)?;
        let before = measured_states(&self.model.subsystems, plant, 1)?;
        let powers = &plant.measure()?.powers;
        Ok((0..now.len())
            .map(|i| velocity_state(powers[i] * MW_PER_W, &now[i], &before[i]))
            .collect())
    }

    /// Model states at the linearization point, for inspection.
    pub fn equilibrium(&self) -> Vec<DVector<f64>> {
        equilibrium_states(&self.model.subsystems, &self.model.fused.point)
    }

    /// Computes and returns the thrust coefficients to apply now.
    /// `reference` holds the farm power reference in W for the next `H`
    /// samples; `previous` the coefficients applied at the last sample.
    pub fn step(&mut self, plant: &WakePlant, previous: &[f64], reference: &[f64]) -> Result<StepOutcome> {
        let h = self.config.horizon;
        if reference.len() < h {
            return Err(Error::ReferenceTooShort {
                got: reference.len(),
                needed: h,
            });
        }
        let t0 = Instant::now();
        let states = self.measured_velocity_states(plant)?;
        let pred = &self.model.prediction;
        // each subsystem builds its own free response; count the slowest
        let wrapped: Vec<Option<DVector<f64>>> = states.iter().cloned().map(Some).collect();
        let per_turbine = t0.elapsed().as_secs_f64() / states.len() as f64;
        let mut free_responses = Vec::with_capacity(states.len());
        let mut slowest = 0.0f64;
        for i in 0..states.len() {
            let t = Instant::now();
            free_responses.push(pred.free_response(i, &wrapped)?);
            slowest = slowest.max(t.elapsed().as_secs_f64());
        }
        let problem = StepProblem {
            free_responses,
            y_ref: DVector::from_iterator(h, reference[..h].iter().map(|p| p * MW_PER_W)),
            bounds: CumulativeBoxConstraint::new(self.config.ct_min, self.config.ct_max, previous, h)?,
            weights: self.config.weights,
        };
        let serial = per_turbine + slowest;
        let options = QpOptions::default();
        let centralized = match &self.central {
            Some(s) => {
                let du = solve_centralized(s, pred, &problem, &options)?;
                let cost = problem.cost(pred, &du);
                Some((du, cost))
            }
            None => None,
        };
        let (plan, iterations, converged, costs, trace, parallel_seconds) = match &self.solver {
            Some(solver) => {
                let initial = if self.config.jacobi.warm_start {
                    self.previous_plan.as_ref().map(|p| shift_plan(p))
                } else {
                    None
                };
                let initial = initial.filter(|p| problem.bounds.violation(p) == 0.0);
                let starts = match &self.previous_local {
                    Some(l) => l.iter().map(|x| x.as_ref().map(|x| shift_blocks(x, h))).collect(),
                    None => vec![None; solver.subproblems.len()],
                };
                let out = solver.iterate_with(pred, &problem, initial, starts)?;
                self.previous_local = Some(out.local.clone());
                let t = estimate_parallel_time(&out.trace, serial);
                (out.du, out.iterations, out.converged, out.costs, out.trace, t)
            }
            None => {
                let (du, _) = centralized.clone().expect("centralized mode has a structure");
                let secs = t0.elapsed().as_secs_f64();
                (du, 1, true, Vec::new(), Vec::new(), secs)
            }
        };
        let cost = problem.cost(pred, &plan);
        let plan_violation = problem.bounds.violation(&plan);
        let applied = previous
            .iter()
            .zip(&plan)
            .map(|(c, d)| (c + d[0]).clamp(self.config.ct_min, self.config.ct_max))
            .collect();
        self.previous_plan = Some(plan.clone());
        Ok(StepOutcome {
            applied,
            plan,
            iterations,
            converged,
            cost,
            costs,
            trace,
            centralized,
            parallel_seconds,
            serial_seconds: serial,
            plan_violation,
        })
    }
}

/// Shifts each length-`h` block of a stacked local solution by one sample.
fn shift_blocks(x: &DVector<f64>, h: usize) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| if (k + 1) % h != 0 { x[k + 1] } else { 0.0 })
}

/// Drops the applied first increment and holds the plan's end.
fn shift_plan(plan: &[DVector<f64>]) -> Vec<DVector<f64>> {
    plan.iter()
        .map(|d| {
            let h = d.len();
            DVector::from_fn(h, |t, _| if t + 1 < h { d[t + 1] } else { 0.0 })
        })
        .collect()
}
