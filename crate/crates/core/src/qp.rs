//! Tracking cost and box-constrained QP solver.
//!
//! The cost over a set of free turbines `F` is
//!
//! ```text
//! f(dU) = q^2 |sum_i Y_i - Y_ref|^2 + r^2 sum_i |dU_i|^2
//! ```
//!
//! with every other turbine's increments held fixed. Writing
//! `sum_i Y_i = e0 + Y_ref + N_F dU_F` gives a dense QP in `dU_F` whose
//! Hessian `2 (q^2 N_F' N_F + r^2 I)` does not depend on the state and is
//! cached per free set.
//!
//! Constraints are cumulative: `C_T,i[k-1] + sum_{s<=t} dU_i[s]` must stay in
//! `[ct_min, ct_max]`. The solver works in `z = S2 dU` (running sums), where
//! they become simple bounds.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, KktResiduals, Result};
use crate::prediction::{toeplitz, toeplitz_mul_add, CompiledPrediction};

/// Cost weights `q` (tracking, per MW) and `r` (input increments).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostWeights {
    pub q: f64,
    pub r: f64,
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::validation("q", format!("must be positive, got {}", self.q)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::validation("r", format!("must be positive, got {}", self.r)));
        }
        Ok(())
    }
}

/// Bounds on the running sums of each turbine's increments.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeBoxConstraint {
    pub horizon: usize,
    pub ct_min: f64,
    pub ct_max: f64,
    /// Thrust coefficient applied at the previous sample, per turbine.
    pub previous: Vec<f64>,
}

impl CumulativeBoxConstraint {
    pub fn new(ct_min: f64, ct_max: f64, previous: &[f64], horizon: usize) -> Result<Self> {
        if !(ct_min < ct_max) {
            return Err(Error::validation("ct_min", "must be below ct_max"));
        }
        for (i, &c) in previous.iter().enumerate() {
            if !(ct_min..=ct_max).contains(&c) {
                return Err(Error::Infeasible(format!(
                    "previous C_T of turbine {i} is {c}, outside [{ct_min}, {ct_max}]"
                )));
            }
        }
        Ok(CumulativeBoxConstraint {
            horizon,
            ct_min,
            ct_max,
            previous: previous.to_vec(),
        })
    }

    /// `S1`, a column of ones.
    pub fn s1(&self) -> DVector<f64> {
        DVector::from_element(self.horizon, 1.0)
    }

    /// `S2`, lower-triangular ones.
    pub fn s2(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizon, self.horizon, |r, c| if r >= c { 1.0 } else { 0.0 })
    }

    pub fn lower(&self, turbine: usize) -> f64 {
        self.ct_min - self.previous[turbine]
    }

    pub fn upper(&self, turbine: usize) -> f64 {
        self.ct_max - self.previous[turbine]
    }

    /// Thrust trajectory planned by `du` for `turbine`.
    pub fn trajectory(&self, turbine: usize, du: &DVector<f64>) -> Vec<f64> {
        let mut ct = self.previous[turbine];
        du.iter()
            .map(|d| {
                ct += d;
                ct
            })
            .collect()
    }

    /// Adjusts `du` so that its trajectory, accumulated exactly as in
    /// [`Self::trajectory`], lies within the bounds. Meant for rounding-level
    /// corrections; returns the largest change made.
    pub fn repair(&self, turbine: usize, du: &mut DVector<f64>) -> f64 {
        let mut ct = self.previous[turbine];
        let mut worst: f64 = 0.0;
        for d in du.iter_mut() {
            let mut next = ct + *d;
            if next > self.ct_max || next < self.ct_min {
                let old = *d;
                *d = next.clamp(self.ct_min, self.ct_max) - ct;
                next = ct + *d;
                while next > self.ct_max {
                    *d = d.next_down();
                    next = ct + *d;
                }
                while next < self.ct_min {
                    *d = d.next_up();
                    next = ct + *d;
                }
                worst = worst.max((*d - old).abs());
            }
            ct = next;
        }
        worst
    }

    /// Largest bound violation of one turbine's planned trajectory.
    pub fn turbine_violation(&self, turbine: usize, du: &DVector<f64>) -> f64 {
        self.trajectory(turbine, du)
            .into_iter()
            .map(|c| (self.ct_min - c).max(c - self.ct_max).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Largest bound violation of the planned trajectories.
    pub fn violation(&self, du: &[DVector<f64>]) -> f64 {
        du.iter()
            .enumerate()
            .map(|(i, d)| self.turbine_violation(i, d))
            .fold(0.0, f64::max)
    }
}

/// Running sums of `du` within consecutive blocks of length `h`.
pub fn cumulative(du: &DVector<f64>, h: usize) -> DVector<f64> {
    let mut z = du.clone();
    for b in 0..du.len() / h {
        for t in 1..h {
            z[b * h + t] += z[b * h + t - 1];
        }
    }
    z
}

/// Inverse of [`cumulative`].
pub fn differences(z: &DVector<f64>, h: usize) -> DVector<f64> {
    let mut du = z.clone();
    for b in 0..z.len() / h {
        for t in (1..h).rev() {
            du[b * h + t] -= z[b * h + t - 1];
        }
    }
    du
}

/// State-independent part of a QP over a fixed set of free turbines.
#[derive(Debug, Clone)]
pub struct QpStructure {
    pub horizon: usize,
    pub blocks: Vec<usize>,
    pub weights: CostWeights,
    /// `N_F`: effect of the free increments on the summed farm output.
    pub gain: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    hessian_z: DMatrix<f64>,
    /// Turbines whose output depends on a free increment, ascending.
    pub evaluation: Vec<usize>,
}

impl QpStructure {
    pub fn new(pred: &CompiledPrediction, blocks: &[usize], weights: CostWeights) -> Result<Self> {
        weights.validate()?;
        if blocks.is_empty() {
            return Err(Error::validation("free_set", "must not be empty"));
        }
        let h = pred.horizon;
        let n = blocks.len() * h;
        let mut gain = DMatrix::zeros(h, n);
        for (b, &j) in blocks.iter().enumerate() {
            let mut col = DVector::zeros(h);
            for &i in pred.reach(j) {
                col += pred.markov(i, j).expect("reach is consistent with chains");
            }
            gain.view_mut((0, b * h), (h, h)).copy_from(&toeplitz(&col));
        }
        let q2 = weights.q * weights.q;
        let r2 = weights.r * weights.r;
        let mut hessian = gain.tr_mul(&gain) * (2.0 * q2);
        for d in 0..n {
            hessian[(d, d)] += 2.0 * r2;
        }
        // H_z = D' H D with D the blockwise difference operator
        let mut hd = hessian.clone();
        for col in 0..n {
            if col % h != h - 1 {
                let next = hessian.column(col + 1).clone_owned();
                hd.column_mut(col).axpy(-1.0, &next, 1.0);
            }
        }
        let mut hessian_z = hd.clone();
        for row in 0..n {
            if row % h != h - 1 {
                for col in 0..n {
                    hessian_z[(row, col)] -= hd[(row + 1, col)];
                }
            }
        }
        let mut evaluation: Vec<usize> = blocks.iter().flat_map(|&j| pred.reach(j).iter().copied()).collect();
        evaluation.sort_unstable();
        evaluation.dedup();
        Ok(QpStructure {
            horizon: h,
            blocks: blocks.to_vec(),
            weights,
            gain,
            hessian,
            hessian_z,
            evaluation,
        })
    }

    pub fn size(&self) -> usize {
        self.blocks.len() * self.horizon
    }
}

const ACTIVE_TOL: f64 = 1e-10;

/// `0.5 x' H x + g' x + c` subject to running-sum bounds per block.
#[derive(Debug, Clone)]
pub struct DenseQP {
    pub structure: Arc<QpStructure>,
    pub linear: DVector<f64>,
    pub constant: f64,
    /// Bounds on `z = S2 x`.
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl DenseQP {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.structure.hessian * x)) + self.linear.dot(x) + self.constant
    }

    pub fn size(&self) -> usize {
        self.linear.len()
    }

    fn linear_z(&self) -> DVector<f64> {
        // D' g
        let h = self.structure.horizon;
        let mut g = self.linear.clone();
        for d in 0..g.len() {
            if d % h != h - 1 {
                g[d] -= self.linear[d + 1];
            }
        }
        g
    }

    /// Optimality residuals of `x` in the running-sum variables.
    pub fn kkt_residuals(&self, x: &DVector<f64>) -> KktResiduals {
        let h = self.structure.horizon;
        let z = cumulative(x, h);
        let grad = &self.structure.hessian_z * &z + self.linear_z();
        let mut res = KktResiduals {
            stationarity: 0.0,
            primal: 0.0,
            complementarity: 0.0,
        };
        for i in 0..z.len() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            res.primal = res.primal.max(lo - z[i]).max(z[i] - hi);
            // multipliers implied by the gradient
            let lam_lo = grad[i].max(0.0);
            let lam_hi = (-grad[i]).max(0.0);
            let gap_lo = (z[i] - lo).max(0.0);
            let gap_hi = (hi - z[i]).max(0.0);
            res.complementarity = res.complementarity.max(lam_lo * gap_lo).max(lam_hi * gap_hi);
            // bounds within the primal tolerance count as active
            let projected = if gap_lo <= ACTIVE_TOL {
                lam_hi
            } else if gap_hi <= ACTIVE_TOL {
                lam_lo
            } else {
                grad[i].abs()
            };
            res.stationarity = res.stationarity.max(projected);
        }
        res
    }
}

/// Predictions of the current iterate together with their farm sum and the
/// total increment energy, computed once and read by every subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedIterate {
    pub y: Vec<DVector<f64>>,
    pub sum: DVector<f64>,
    pub du_energy: f64,
}

impl SharedIterate {
    pub fn new(y: Vec<DVector<f64>>, du: &[DVector<f64>]) -> Self {
        let h = y.first().map_or(0, |v| v.len());
        let sum = y.iter().fold(DVector::zeros(h), |acc, v| acc + v);
        SharedIterate {
            y,
            sum,
            du_energy: du.iter().map(|d| d.norm_squared()).sum(),
        }
    }
}

/// Output of turbine `i` with the increments of `blocks` removed.
fn fixed_output(
    pred: &CompiledPrediction,
    free_responses: &[DVector<f64>],
    du: &[DVector<f64>],
    blocks: &[usize],
    i: usize,
) -> DVector<f64> {
    let mut y = free_responses[i].clone();
    for &j in pred.chain(i) {
        if !blocks.contains(&j) {
            toeplitz_mul_add(pred.markov(i, j).expect("chain member"), &du[j], &mut y);
        }
    }
    y
}

/// Farm tracking error with the free increments of `structure` set to zero.
/// With `shared`, only the affected turbines are re-evaluated; otherwise
/// every turbine is.
pub fn residual_without(
    structure: &QpStructure,
    pred: &CompiledPrediction,
    free_responses: &[DVector<f64>],
    shared: Option<&SharedIterate>,
    y_ref: &DVector<f64>,
    du: &[DVector<f64>],
) -> DVector<f64> {
    let blocks = &structure.blocks;
    match shared {
        Some(s) => {
            let mut total = &s.sum - y_ref;
            for &i in &structure.evaluation {
                total -= &s.y[i];
                total += fixed_output(pred, free_responses, du, blocks, i);
            }
            total
        }
        None => {
            let mut total = -y_ref.clone();
            for i in 0..pred.turbines() {
                if structure.evaluation.binary_search(&i).is_ok() {
                    total += fixed_output(pred, free_responses, du, blocks, i);
                } else {
                    total += pred.forced(i, &free_responses[i], du);
                }
            }
            total
        }
    }
}

/// Assembles the QP over `structure.blocks` with every other turbine fixed at `du`.
pub fn build_cost(
    structure: &Arc<QpStructure>,
    pred: &CompiledPrediction,
    free_responses: &[DVector<f64>],
    shared: Option<&SharedIterate>,
    y_ref: &DVector<f64>,
    du: &[DVector<f64>],
    bounds: &CumulativeBoxConstraint,
) -> Result<DenseQP> {
    let h = structure.horizon;
    if y_ref.len() != h {
        return Err(Error::ReferenceTooShort {
            got: y_ref.len(),
            needed: h,
        });
    }
    let e0 = residual_without(structure, pred, free_responses, shared, y_ref, du);
    let w = structure.weights;
    let q2 = w.q * w.q;
    let r2 = w.r * w.r;
    let linear = structure.gain.tr_mul(&e0) * (2.0 * q2);
    let free_energy: f64 = structure.blocks.iter().map(|&j| du[j].norm_squared()).sum();
    let fixed = match shared {
        Some(s) => (s.du_energy - free_energy).max(0.0),
        None => (0..du.len())
            .filter(|j| !structure.blocks.contains(j))
            .map(|j| du[j].norm_squared())
            .sum(),
    };
    let n = structure.size();
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for (b, &j) in structure.blocks.iter().enumerate() {
        lower.rows_mut(b * h, h).fill(bounds.lower(j));
        upper.rows_mut(b * h, h).fill(bounds.upper(j));
    }
    Ok(DenseQP {
        structure: structure.clone(),
        linear,
        constant: q2 * e0.norm_squared() + r2 * fixed,
        lower,
        upper,
    })
}

/// Full tracking cost of a complete increment plan.
pub fn tracking_cost(sum_y: &DVector<f64>, y_ref: &DVector<f64>, du: &[DVector<f64>], weights: CostWeights) -> f64 {
    let q2 = weights.q * weights.q;
    let r2 = weights.r * weights.r;
    q2 * (sum_y - y_ref).norm_squared() + r2 * du.iter().map(|d| d.norm_squared()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub primal_tol: f64,
    pub dual_tol: f64,
    /// Iteration cap as a multiple of the problem size.
    pub max_iter_factor: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            primal_tol: 1e-10,
            dual_tol: 1e-8,
            max_iter_factor: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Optimal increments, block per free turbine.
    pub x: DVector<f64>,
    /// Running sums of `x`.
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub active: usize,
    pub residuals: KktResiduals,
}

pub fn solve_qp(qp: &DenseQP) -> Result<QpSolution> {
    solve_qp_from(qp, None, &QpOptions::default())
}

/// Primal active-set method on the running sums. `start` is a guess for the
/// increments; it is clipped into the box.
pub fn solve_qp_from(qp: &DenseQP, start: Option<&DVector<f64>>, opts: &QpOptions) -> Result<QpSolution> {
    let n = qp.size();
    let h = qp.structure.horizon;
    for i in 0..n {
        if !(qp.lower[i] <= qp.upper[i]) {
            return Err(Error::Infeasible(format!("empty bound interval at variable {i}")));
        }
    }
    let hz = &qp.structure.hessian_z;
    let gz = qp.linear_z();
    let mut z = match start {
        Some(x) => cumulative(x, h),
        None => DVector::zeros(n),
    };
    let mut state = vec![Bound::Free; n];
    for i in 0..n {
        if z[i] <= qp.lower[i] {
            z[i] = qp.lower[i];
            state[i] = Bound::Lower;
        } else if z[i] >= qp.upper[i] {
            z[i] = qp.upper[i];
            state[i] = Bound::Upper;
        }
    }
    let cap = opts.max_iter_factor * n.max(1);
    let mut iterations = 0;
    loop {
        if iterations >= cap {
            let x = differences(&z, h);
            return Err(Error::NotConverged {
                iterations,
                residuals: qp.kkt_residuals(&x),
            });
        }
        iterations += 1;
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == Bound::Free).collect();
        let mut step = DVector::zeros(n);
        if !free.is_empty() {
            // Newton step restricted to the free variables
            let grad = hz * &z + &gz;
            let hff = hz.select_rows(&free).select_columns(&free);
            let rhs = -DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
            let chol = Cholesky::new(hff).ok_or_else(|| Error::NotConverged {
                iterations,
                residuals: qp.kkt_residuals(&differences(&z, h)),
            })?;
            let p = chol.solve(&rhs);
            for (k, &i) in free.iter().enumerate() {
                step[i] = p[k];
            }
        }
        let scale = 1.0 + z.amax();
        if step.amax() <= 1e-14 * scale {
            let grad = hz * &z + &gz;
            let mut release: Option<(usize, f64)> = None;
            for i in 0..n {
                let violation = match state[i] {
                    Bound::Lower => -grad[i],
                    Bound::Upper => grad[i],
                    Bound::Free => continue,
                };
                if violation > opts.dual_tol && release.map_or(true, |(_, v)| violation > v) {
                    release = Some((i, violation));
                }
            }
            match release {
                Some((i, _)) => state[i] = Bound::Free,
                None => break,
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking: Option<(usize, Bound)> = None;
        for &i in &free {
            let p = step[i];
            let (limit, side) = if p < 0.0 {
                ((qp.lower[i] - z[i]) / p, Bound::Lower)
            } else if p > 0.0 {
                ((qp.upper[i] - z[i]) / p, Bound::Upper)
            } else {
                continue;
            };
            if limit < alpha {
                alpha = limit.max(0.0);
                blocking = Some((i, side));
            }
        }
        z.axpy(alpha, &step, 1.0);
        for &i in &free {
            z[i] = z[i].clamp(qp.lower[i], qp.upper[i]);
        }
        if let Some((i, side)) = blocking {
            state[i] = side;
            z[i] = if side == Bound::Lower { qp.lower[i] } else { qp.upper[i] };
        }
    }
    let x = differences(&z, h);
    let residuals = qp.kkt_residuals(&x);
    Ok(QpSolution {
        objective: qp.objective(&x),
        active: state.iter().filter(|s| **s != Bound::Free).count(),
        x,
        z,
        iterations,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{realize_state_space, to_velocity_form, FusedModel, LinearizationPoint, TuningConstants, MW_PER_W};
    use crate::plant::PlantParams;
    use crate::topology::{build_layout, compute_delays, interaction_sets, FarmConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: CostWeights = CostWeights { q: 1.0, r: 0.4 };

    fn compiled(cols: usize, h: usize) -> CompiledPrediction {
        let l = build_layout(&FarmConfig {
            rows: 1,
            cols,
            downstream_spacing: 30.0,
            ..FarmConfig::ten_turbine()
        })
        .unwrap();
        let params = PlantParams::new(0.68, 5.0);
        let point = LinearizationPoint::from_steady_state(&l, &params, &vec![0.6; cols]).unwrap();
        let m = FusedModel::new(&l, &params, point, TuningConstants::default()).unwrap();
        let d = compute_delays(&l);
        let vel: Vec<_> = realize_state_space(&l, &d, &m, 1000)
            .unwrap()
            .iter()
            .map(|s| to_velocity_form(s, MW_PER_W))
            .collect();
        CompiledPrediction::build(&vel, &interaction_sets(&l, &d, h).unwrap(), h).unwrap()
    }

    fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| scale * rng.gen_range(-1.0..1.0))
    }

    /// Direct evaluation of the tracking cost by summing predicted outputs.
    fn direct_cost(pred: &CompiledPrediction, free: &[DVector<f64>], y_ref: &DVector<f64>, du: &[DVector<f64>]) -> f64 {
        let mut sum = DVector::zeros(pred.horizon);
        for i in 0..pred.turbines() {
            sum += pred.forced(i, &free[i], du);
        }
        tracking_cost(&sum, y_ref, du, W)
    }

    fn random_free(pred: &CompiledPrediction, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        (0..pred.turbines()).map(|_| uniform(rng, pred.horizon, 2.0)).collect()
    }

    fn assemble(du: &[DVector<f64>], blocks: &[usize], h: usize) -> DVector<f64> {
        let mut x = DVector::zeros(blocks.len() * h);
        for (b, &j) in blocks.iter().enumerate() {
            x.rows_mut(b * h, h).copy_from(&du[j]);
        }
        x
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(CostWeights { q: 0.0, r: 1.0 }.validate().is_err());
        assert!(CostWeights { q: 1.0, r: -1.0 }.validate().is_err());
        let pred = compiled(2, 5);
        assert!(QpStructure::new(&pred, &[0], CostWeights { q: 1.0, r: 0.0 }).is_err());
    }

    #[test]
    fn cumulative_round_trip() {
        let du = DVector::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
        let z = cumulative(&du, 3);
        assert_eq!(z, DVector::from_vec(vec![1.0, 3.0, 6.0, -1.0, -0.5, -0.25]));
        assert_eq!(differences(&z, 3), du);
        let b = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.5], 3).unwrap();
        assert_eq!(&b.s2() * du.rows(0, 3), z.rows(0, 3));
        assert_eq!(b.s1(), DVector::from_element(3, 1.0));
    }

    #[test]
    fn prior_out_of_bounds_is_infeasible() {
        assert!(matches!(
            CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.95], 5),
            Err(Error::Infeasible(_))
        ));
        let b = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.01, 8.0 / 9.0], 5).unwrap();
        assert_eq!(b.violation(&[DVector::zeros(5), DVector::zeros(5)]), 0.0);
    }

    #[test]
    fn qp_reproduces_cost_at_random_points() {
        let pred = compiled(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let free = random_free(&pred, &mut rng);
        let y_ref = uniform(&mut rng, 8, 3.0);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.5; 3], 8).unwrap();
        for blocks in [vec![0, 1, 2], vec![1], vec![0, 2]] {
            let s = Arc::new(QpStructure::new(&pred, &blocks, W).unwrap());
            let fixed: Vec<_> = (0..3).map(|_| uniform(&mut rng, 8, 0.05)).collect();
            let qp = build_cost(&s, &pred, &free, None, &y_ref, &fixed, &bounds).unwrap();
            for _ in 0..20 {
                let mut du = fixed.clone();
                for &j in &blocks {
                    du[j] = uniform(&mut rng, 8, 0.05);
                }
                let x = assemble(&du, &blocks, 8);
                let direct = direct_cost(&pred, &free, &y_ref, &du);
                assert_relative_eq!(qp.objective(&x), direct, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn repair_makes_trajectories_exact() {
        let prev = [0.01, 0.3, 8.0 / 9.0];
        let b = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &prev, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let mut du: Vec<DVector<f64>> = (0..3).map(|_| uniform(&mut rng, 4, 1e-15)).collect();
            du[1][2] = 8.0 / 9.0 - 0.3 + 1e-16;
            for (i, d) in du.iter_mut().enumerate() {
                assert!(b.repair(i, d) < 1e-14);
            }
            assert_eq!(b.violation(&du), 0.0);
        }
    }

    #[test]
    fn shared_outputs_give_the_same_qp() {
        let pred = compiled(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let free = random_free(&pred, &mut rng);
        let du: Vec<_> = (0..4).map(|_| uniform(&mut rng, 6, 0.05)).collect();
        let shared = SharedIterate::new((0..4).map(|i| pred.forced(i, &free[i], &du)).collect(), &du);
        let y_ref = uniform(&mut rng, 6, 3.0);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.5; 4], 6).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[3], W).unwrap());
        let a = build_cost(&s, &pred, &free, None, &y_ref, &du, &bounds).unwrap();
        let b = build_cost(&s, &pred, &free, Some(&shared), &y_ref, &du, &bounds).unwrap();
        assert!((&a.linear - &b.linear).amax() < 1e-10);
        assert_relative_eq!(a.constant, b.constant, max_relative = 1e-12);
    }

    #[test]
    fn interior_optimum_matches_linear_solve() {
        let pred = compiled(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let free = random_free(&pred, &mut rng);
        let y_ref = uniform(&mut rng, 6, 0.01) + free.iter().fold(DVector::zeros(6), |a, f| a + f);
        let wide = CumulativeBoxConstraint::new(-1e6, 1e6, &[0.5; 2], 6).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[0, 1], W).unwrap());
        let qp = build_cost(&s, &pred, &free, None, &y_ref, &vec![DVector::zeros(6); 2], &wide).unwrap();
        let sol = solve_qp(&qp).unwrap();
        let closed = -s.hessian.clone().cholesky().unwrap().solve(&qp.linear);
        assert!((&sol.x - &closed).amax() < 1e-8);
        assert_eq!(sol.active, 0);
    }

    #[test]
    fn upper_bound_pins_when_more_power_is_demanded() {
        let pred = compiled(2, 6);
        let free: Vec<_> = (0..2).map(|_| DVector::from_element(6, 1.0)).collect();
        let y_ref = DVector::from_element(6, 10.0);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[8.0 / 9.0, 0.5], 6).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[0], W).unwrap());
        let qp = build_cost(&s, &pred, &free, None, &y_ref, &vec![DVector::zeros(6); 2], &bounds).unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!(sol.active > 0);
        assert!(sol.z[0] <= 1e-10);
        assert!(sol.z.iter().all(|&z| z <= 1e-10));
        assert!(sol.residuals.stationarity < 1e-8);
    }

    #[test]
    fn large_input_weight_gives_zero_increments() {
        let pred = compiled(2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let free = random_free(&pred, &mut rng);
        let y_ref = free.iter().fold(DVector::zeros(5), |a, f| a + f);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.5; 2], 5).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[0, 1], CostWeights { q: 1.0, r: 1e3 }).unwrap());
        let qp = build_cost(&s, &pred, &free, None, &y_ref, &vec![DVector::zeros(5); 2], &bounds).unwrap();
        let sol = solve_qp(&qp).unwrap();
        assert!(sol.x.amax() < 1e-12);
    }

    #[test]
    fn solver_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let (cols, h) = [(1, 4), (2, 5), (3, 4), (2, 6)][trial % 4];
            let pred = compiled(cols, h);
            let free = random_free(&pred, &mut rng);
            let y_ref = uniform(&mut rng, h, 4.0);
            let prev: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.01..8.0 / 9.0)).collect();
            let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &prev, h).unwrap();
            let blocks: Vec<usize> = (0..cols).collect();
            let s = Arc::new(QpStructure::new(&pred, &blocks, W).unwrap());
            let qp = build_cost(&s, &pred, &free, None, &y_ref, &vec![DVector::zeros(h); cols], &bounds).unwrap();
            let sol = solve_qp(&qp).unwrap();
            assert!(sol.residuals.primal <= 1e-10);
            assert!(sol.residuals.stationarity <= 1e-8, "{:?}", sol.residuals);
            assert!(sol.residuals.complementarity <= 1e-8, "{:?}", sol.residuals);
            let du: Vec<DVector<f64>> = (0..cols).map(|b| sol.x.rows(b * h, h).clone_owned()).collect();
            assert!(bounds.violation(&du) <= 1e-10);
            for _ in 0..1000 {
                // random feasible running sums
                let z = DVector::from_fn(cols * h, |i, _| rng.gen_range(qp.lower[i]..=qp.upper[i]));
                let x = differences(&z, h);
                assert!(sol.objective <= qp.objective(&x) + 1e-12 * sol.objective.abs().max(1.0));
            }
        }
    }

    #[test]
    fn solution_is_deterministic_and_warm_start_agrees() {
        let pred = compiled(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let free = random_free(&pred, &mut rng);
        let y_ref = uniform(&mut rng, 8, 6.0);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.3, 0.8, 0.1], 8).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[0, 1, 2], W).unwrap());
        let qp = build_cost(&s, &pred, &free, None, &y_ref, &vec![DVector::zeros(8); 3], &bounds).unwrap();
        let a = solve_qp(&qp).unwrap();
        let b = solve_qp(&qp).unwrap();
        assert_eq!(a.x, b.x);
        let guess = uniform(&mut rng, 24, 0.3);
        let c = solve_qp_from(&qp, Some(&guess), &QpOptions::default()).unwrap();
        assert!((&a.x - &c.x).amax() < 1e-8);
    }

    #[test]
    fn shifting_reference_moves_only_the_linear_term() {
        let pred = compiled(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let free = random_free(&pred, &mut rng);
        let y_ref = uniform(&mut rng, 6, 3.0);
        let bounds = CumulativeBoxConstraint::new(0.01, 8.0 / 9.0, &[0.5; 2], 6).unwrap();
        let s = Arc::new(QpStructure::new(&pred, &[0, 1], W).unwrap());
        let zero = vec![DVector::zeros(6); 2];
        let a = build_cost(&s, &pred, &free, None, &y_ref, &zero, &bounds).unwrap();
        // same problem with the free response folded into the reference
        let total_free = free.iter().fold(DVector::zeros(6), |acc, f| acc + f);
        let no_free = vec![DVector::zeros(6); 2];
        let b = build_cost(&s, &pred, &no_free, None, &(&y_ref - total_free), &zero, &bounds).unwrap();
        assert!((&a.linear - &b.linear).amax() < 1e-8);
        let sa = solve_qp(&a).unwrap();
        let sb = solve_qp(&b).unwrap();
        assert!((&sa.x - &sb.x).amax() < 1e-8);
    }
}
