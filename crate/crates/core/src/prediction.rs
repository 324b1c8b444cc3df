//! Horizon predictions of subsystem power.
//!
//! Two equivalent routes are provided. [`DensePrediction`] builds the stacked
//! operators `F_x, F, Phi_x, Phi, Xi, L, W` per subsystem and nests them from
//! the most upwind member of the chain towards the target. Its size grows
//! with `(H * nx)^2`, so it is meant for small models and for inspection.
//!
//! [`CompiledPrediction`] is the route used in closed loop. It splits the
//! prediction into a free response, simulated from the current states with
//! sparse matrices, and forced responses given by cached Markov parameters:
//!
//! ```text
//! Y_i = free_i(x) + sum_{j in chain(i)} M_ij dU_j
//! ```
//!
//! where `M_ij` is lower-triangular Toeplitz and `chain(i)` is `i` plus the
//! upwind turbines whose wake reaches it within the horizon.

use nalgebra::{DMatrix, DVector, RowDVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};
use crate::linear::VelocityFormModel;
use crate::topology::InteractionSets;

/// Default memory cap for the dense operators, bytes.
pub const DEFAULT_DENSE_BUDGET: usize = 256 << 20;

/// Turbines needed to predict `i`, most upwind first, ending with `i`.
fn chain_of(sets: &InteractionSets, i: usize) -> Vec<usize> {
    match sets.upstream_within[i].first() {
        Some(&l) => (l..=i).collect(),
        None => vec![i],
    }
}

fn check_models(models: &[VelocityFormModel], sets: &InteractionSets) -> Result<()> {
    if models.len() != sets.upstream.len() {
        return Err(Error::validation("subsystems", "count does not match the interaction sets"));
    }
    for (i, m) in models.iter().enumerate() {
        if m.turbine != i {
            return Err(Error::validation("subsystems", "must be ordered by turbine index"));
        }
        if let Some(a) = &m.a_up {
            if i == 0 || sets.direct_upstream[i] != [i - 1] || a.ncols() != models[i - 1].nx() {
                return Err(Error::validation("subsystems", format!("bad upstream coupling at {i}")));
            }
        }
    }
    Ok(())
}

/// Stacked operators of one subsystem.
#[derive(Debug, Clone)]
pub struct PredictionOperator {
    pub turbine: usize,
    pub horizon: usize,
    pub f_x: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub phi_x: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    /// Coupling to the stacked upstream trajectory `x_{i-1}[k..k+H-1]`.
    pub xi: Option<DMatrix<f64>>,
    pub l: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub c: RowDVector<f64>,
}

fn dense_bytes(models: &[VelocityFormModel], h: usize) -> usize {
    models
        .iter()
        .map(|m| {
            let n = m.nx();
            let up = m.a_up.as_ref().map_or(0, |a| a.ncols());
            let hn = h * n;
            hn * n + h * n + hn * h + h * h + hn * h * up + hn * hn + hn * n
        })
        .sum::<usize>()
        .saturating_mul(std::mem::size_of::<f64>())
}

fn block_c(c: &RowDVector<f64>, x_stack: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let n = c.len();
    let mut out = DMatrix::zeros(h, x_stack.ncols());
    for r in 0..h {
        out.row_mut(r).copy_from(&(c * x_stack.rows(r * n, n)));
    }
    out
}

/// Dense stacked prediction for every subsystem.
#[derive(Debug, Clone)]
pub struct DensePrediction {
    pub horizon: usize,
    pub ops: Vec<PredictionOperator>,
    chains: Vec<Vec<usize>>,
}

impl DensePrediction {
    pub fn build(models: &[VelocityFormModel], sets: &InteractionSets, horizon: usize, budget: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::validation("horizon", "must be at least one sample"));
        }
        check_models(models, sets)?;
        let required = dense_bytes(models, horizon);
        if required > budget {
            return Err(Error::PredictionBudget { required, budget });
        }
        let h = horizon;
        let ops = models
            .iter()
            .map(|m| {
                let n = m.nx();
                // powers[r] = A^r
                let mut powers = vec![DMatrix::identity(n, n)];
                for r in 1..=h {
                    let next = &m.a_self * &powers[r - 1];
                    powers.push(next);
                }
                let mut f_x = DMatrix::zeros(h * n, n);
                let mut phi_x = DMatrix::zeros(h * n, h);
                for r in 0..h {
                    f_x.rows_mut(r * n, n).copy_from(&powers[r + 1]);
                    for c in 0..=r {
                        phi_x.view_mut((r * n, c), (n, 1)).copy_from(&(&powers[r - c] * &m.b));
                    }
                }
                let xi = m.a_up.as_ref().map(|au| {
                    let nu = au.ncols();
                    let mut xi = DMatrix::zeros(h * n, h * nu);
                    for r in 0..h {
                        for c in 0..=r {
                            xi.view_mut((r * n, c * nu), (n, nu)).copy_from(&(&powers[r - c] * au));
                        }
                    }
                    xi
                });
                let mut l = DMatrix::zeros(h * n, h * n);
                for r in 1..h {
                    l.view_mut((r * n, (r - 1) * n), (n, n)).fill_with_identity();
                }
                let mut w = DMatrix::zeros(h * n, n);
                w.view_mut((0, 0), (n, n)).fill_with_identity();
                PredictionOperator {
                    turbine: m.turbine,
                    horizon: h,
                    f: block_c(&m.c, &f_x, h),
                    phi: block_c(&m.c, &phi_x, h),
                    f_x,
                    phi_x,
                    xi,
                    l,
                    w,
                    c: m.c.clone(),
                }
            })
            .collect();
        let chains = (0..models.len()).map(|i| chain_of(sets, i)).collect();
        Ok(DensePrediction { horizon, ops, chains })
    }

    /// Predicted outputs of subsystem `i` over the horizon. `states[j]` is
    /// the velocity-form state of `j` at the current sample, `du[j]` its
    /// input increments over the horizon; entries outside the chain of `i`
    /// may be `None`.
    pub fn predict_y(&self, i: usize, states: &[Option<DVector<f64>>], du: &[DVector<f64>]) -> Result<DVector<f64>> {
        let mut traj: Option<(usize, DVector<f64>)> = None;
        for &m in &self.chains[i] {
            let x = states[m].as_ref().ok_or(Error::MissingUpstream(m))?;
            let op = &self.ops[m];
            let mut xm = &op.f_x * x + &op.phi_x * &du[m];
            if let (Some((up, prev)), Some(xi)) = (&traj, &op.xi) {
                let xu = states[*up].as_ref().ok_or(Error::MissingUpstream(*up))?;
                let shifted = &self.ops[*up].l * prev + &self.ops[*up].w * xu;
                xm += xi * shifted;
            }
            traj = Some((m, xm));
        }
        let (_, xi) = traj.expect("chain contains the target");
        let op = &self.ops[i];
        let n = op.c.len();
        Ok(DVector::from_fn(self.horizon, |r, _| (&op.c * xi.rows(r * n, n))[0]))
    }
}

fn to_csr(m: &DMatrix<f64>) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(m.nrows(), m.ncols());
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let v = m[(r, c)];
            if v != 0.0 {
                coo.push(r, c, v);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// `out += m * x`
fn csr_mul_add(m: &CsrMatrix<f64>, x: &DVector<f64>, out: &mut DVector<f64>) {
    for (r, row) in m.row_iter().enumerate() {
        let mut acc = 0.0;
        for (&c, &v) in row.col_indices().iter().zip(row.values()) {
            acc += v * x[c];
        }
        out[r] += acc;
    }
}

/// Sparse copy of a velocity-form model.
#[derive(Debug, Clone)]
pub struct SparseVelocityModel {
    pub turbine: usize,
    pub a_self: CsrMatrix<f64>,
    pub a_up: Option<CsrMatrix<f64>>,
    pub b: DVector<f64>,
}

impl SparseVelocityModel {
    pub fn from_dense(m: &VelocityFormModel) -> Self {
        SparseVelocityModel {
            turbine: m.turbine,
            a_self: to_csr(&m.a_self),
            a_up: m.a_up.as_ref().map(to_csr),
            b: m.b.clone(),
        }
    }

    pub fn nx(&self) -> usize {
        self.a_self.nrows()
    }

    /// Next state given the own input increment and the upstream state.
    pub fn step(&self, x: &DVector<f64>, du: f64, x_up: Option<&DVector<f64>>) -> DVector<f64> {
        let mut out = &self.b * du;
        csr_mul_add(&self.a_self, x, &mut out);
        if let (Some(a), Some(xu)) = (&self.a_up, x_up) {
            csr_mul_add(a, xu, &mut out);
        }
        out
    }
}

/// Lower-triangular Toeplitz matrix with first column `h`.
pub fn toeplitz(h: &DVector<f64>) -> DMatrix<f64> {
    let n = h.len();
    DMatrix::from_fn(n, n, |r, c| if r >= c { h[r - c] } else { 0.0 })
}

/// `out += T(h) * u` for the lower-triangular Toeplitz `T(h)`.
pub fn toeplitz_mul_add(h: &DVector<f64>, u: &DVector<f64>, out: &mut DVector<f64>) {
    let n = h.len();
    for r in 0..n {
        let mut acc = 0.0;
        for c in 0..=r {
            acc += h[r - c] * u[c];
        }
        out[r] += acc;
    }
}

/// Cached free/forced-response form of the predictions.
#[derive(Debug, Clone)]
pub struct CompiledPrediction {
    pub horizon: usize,
    models: Vec<SparseVelocityModel>,
    chains: Vec<Vec<usize>>,
    /// `markov[i][k]` is the first column of `M_{i, chains[i][k]}`.
    markov: Vec<Vec<DVector<f64>>>,
    /// Turbines whose chain contains `j`, i.e. `j` and its downwind reach.
    reach: Vec<Vec<usize>>,
}

impl CompiledPrediction {
    pub fn build(models: &[VelocityFormModel], sets: &InteractionSets, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::validation("horizon", "must be at least one sample"));
        }
        check_models(models, sets)?;
        let sparse: Vec<_> = models.iter().map(SparseVelocityModel::from_dense).collect();
        let g = models.len();
        let chains: Vec<Vec<usize>> = (0..g).map(|i| chain_of(sets, i)).collect();
        let mut reach = vec![Vec::new(); g];
        for (i, ch) in chains.iter().enumerate() {
            for &j in ch {
                reach[j].push(i);
            }
        }
        // one impulse simulation per source covers every turbine it reaches
        let mut responses: Vec<Vec<(usize, DVector<f64>)>> = vec![Vec::new(); g];
        for j in 0..g {
            let last = *reach[j].last().expect("reach contains j");
            let span: Vec<usize> = (j..=last).collect();
            let mut xs: Vec<DVector<f64>> = span.iter().map(|&m| DVector::zeros(sparse[m].nx())).collect();
            let mut outs: Vec<DVector<f64>> = span.iter().map(|_| DVector::zeros(horizon)).collect();
            for t in 0..horizon {
                let du = if t == 0 { 1.0 } else { 0.0 };
                xs = step_span(&sparse, &span, &xs, |m| if m == j { du } else { 0.0 });
                for (s, x) in xs.iter().enumerate() {
                    outs[s][t] = x[0];
                }
            }
            for (s, &m) in span.iter().enumerate() {
                responses[m].push((j, outs[s].clone()));
            }
        }
        let markov = chains
            .iter()
            .enumerate()
            .map(|(i, ch)| {
                ch.iter()
                    .map(|&j| {
                        responses[i]
                            .iter()
                            .find(|(src, _)| *src == j)
                            .map(|(_, h)| h.clone())
                            .expect("impulse response recorded")
                    })
                    .collect()
            })
            .collect();
        Ok(CompiledPrediction {
            horizon,
            models: sparse,
            chains,
            markov,
            reach,
        })
    }

    pub fn turbines(&self) -> usize {
        self.models.len()
    }

    pub fn chain(&self, i: usize) -> &[usize] {
        &self.chains[i]
    }

    /// Turbines whose prediction depends on the inputs of `j`.
    pub fn reach(&self, j: usize) -> &[usize] {
        &self.reach[j]
    }

    /// First column of `M_ij`, `None` when `j` is outside the chain of `i`.
    pub fn markov(&self, i: usize, j: usize) -> Option<&DVector<f64>> {
        self.chains[i].iter().position(|&m| m == j).map(|k| &self.markov[i][k])
    }

    pub fn models(&self) -> &[SparseVelocityModel] {
        &self.models
    }

    /// Response of `i` to zero input increments, from states at the current sample.
    pub fn free_response(&self, i: usize, states: &[Option<DVector<f64>>]) -> Result<DVector<f64>> {
        let span = &self.chains[i];
        let mut xs = span
            .iter()
            .map(|&m| states[m].clone().ok_or(Error::MissingUpstream(m)))
            .collect::<Result<Vec<_>>>()?;
        let mut y = DVector::zeros(self.horizon);
        for t in 0..self.horizon {
            xs = step_span(&self.models, span, &xs, |_| 0.0);
            y[t] = xs.last().expect("non-empty chain")[0];
        }
        Ok(y)
    }

    pub fn free_responses(&self, states: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let wrapped: Vec<Option<DVector<f64>>> = states.iter().cloned().map(Some).collect();
        (0..self.turbines()).map(|i| self.free_response(i, &wrapped)).collect()
    }

    /// `Y_i = free_i + sum_j M_ij dU_j`.
    pub fn forced(&self, i: usize, free: &DVector<f64>, du: &[DVector<f64>]) -> DVector<f64> {
        let mut y = free.clone();
        for (k, &j) in self.chains[i].iter().enumerate() {
            toeplitz_mul_add(&self.markov[i][k], &du[j], &mut y);
        }
        y
    }

    pub fn predict_y(&self, i: usize, states: &[Option<DVector<f64>>], du: &[DVector<f64>]) -> Result<DVector<f64>> {
        let free = self.free_response(i, states)?;
        Ok(self.forced(i, &free, du))
    }
}

/// Advances the contiguous `span` one sample. The first member ignores its
/// upstream neighbour.
fn step_span(
    models: &[SparseVelocityModel],
    span: &[usize],
    xs: &[DVector<f64>],
    du: impl Fn(usize) -> f64,
) -> Vec<DVector<f64>> {
    span.iter()
        .enumerate()
        .map(|(s, &m)| {
            let up = if s == 0 { None } else { Some(&xs[s - 1]) };
            models[m].step(&xs[s], du(m), up)
        })
        .collect()
}

/// Step-by-step simulation of all velocity-form models over `horizon`
/// samples; returns the outputs of every subsystem.
pub fn simulate_velocity(
    models: &[VelocityFormModel],
    states: &[DVector<f64>],
    du: &[DVector<f64>],
    horizon: usize,
) -> Vec<DVector<f64>> {
    let mut xs: Vec<DVector<f64>> = states.to_vec();
    let mut y: Vec<DVector<f64>> = models.iter().map(|_| DVector::zeros(horizon)).collect();
    for t in 0..horizon {
        let next: Vec<DVector<f64>> = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut x = &m.a_self * &xs[i] + &m.b * du[i][t];
                if let Some(a) = &m.a_up {
                    x += a * &xs[i - 1];
                }
                x
            })
            .collect();
        for (i, m) in models.iter().enumerate() {
            y[i][t] = (&m.c * &next[i])[0];
        }
        xs = next;
    }
    y
}
