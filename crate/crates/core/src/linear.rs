//! Linearized controller model.
//!
//! The fused row model is linearized around a steady operating point and
//! realized as one state-space subsystem per turbine, coupled only to the
//! turbine directly upwind. Each subsystem is then rewritten in velocity
//! form, with the predicted power appended as an integrating state.
//!
//! # State layout
//!
//! The state of subsystem `i` is
//!
//! ```text
//! x_i = [ C~_i | channel 0: deficit slots 1..e_0, thrust slots 1..e_0 | channel 1: ... ]
//! ```
//!
//! A *channel* is a delay line carrying, for a group of upwind sources `j`,
//! the summed deficit `sum dV_j` and the summed filtered thrust `sum C~_j`
//! from the moment they reach turbine `i-1` until they reach turbine `i`.
//! Slot `m` holds the value the channel input had `m` samples ago, so the
//! last slot (the head) carries `sum_j dV_j[k - d_{j,i}]`. Sources share a
//! channel when their extra delay to every remaining downstream turbine is
//! identical; with evenly rounded delays a single channel of length
//! `d_{i-1,i}` suffices. The most upwind turbine of a row has no channels.
//!
//! The upstream coupling `A_{i,i-1}` feeds the first slot of each channel
//! from the heads of the upstream subsystem's channels and from its emitted
//! deficit, which is an affine function of `x_{i-1}`.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{filter_pole, steady_state, PlantParams, WakePlant};
use crate::topology::{DelayTable, FarmLayout};

/// Multipliers applied to the partial derivatives of the fused model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConstants {
    #[serde(default = "one")]
    pub c_vv: f64,
    #[serde(default = "one")]
    pub c_vct: f64,
    #[serde(default = "one")]
    pub c_va: f64,
    #[serde(default = "one")]
    pub c_pv: f64,
    #[serde(default = "one")]
    pub c_pct: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for TuningConstants {
    fn default() -> Self {
        TuningConstants {
            c_vv: 1.0,
            c_vct: 1.0,
            c_va: 1.0,
            c_pv: 1.0,
            c_pct: 1.0,
        }
    }
}

impl TuningConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_vv", self.c_vv),
            ("c_vct", self.c_vct),
            ("c_va", self.c_va),
            ("c_pv", self.c_pv),
            ("c_pct", self.c_pct),
        ] {
            if !v.is_finite() {
                return Err(Error::Parameter {
                    name,
                    reason: format!("must be finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Operating point of one turbine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbinePoint {
    pub wind: f64,
    pub ct: f64,
    pub induction: f64,
    /// Wake area in front of the next turbine.
    pub area: f64,
    pub deficit: f64,
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationPoint {
    pub free_stream: f64,
    pub rotor_area: f64,
    pub turbines: Vec<TurbinePoint>,
}

impl LinearizationPoint {
    /// Steady state of the nonlinear model at thrust coefficients `cts`.
    pub fn from_steady_state(layout: &FarmLayout, params: &PlantParams, cts: &[f64]) -> Result<Self> {
        let ss = steady_state(layout, params, cts)?;
        let turbines = (0..layout.turbines())
            .map(|i| TurbinePoint {
                wind: ss.winds[i],
                ct: ss.cts[i],
                induction: ss.inductions[i],
                area: ss.areas[i],
                deficit: ss.deficits[i],
                power: ss.powers[i],
            })
            .collect();
        Ok(LinearizationPoint {
            free_stream: layout.free_stream(),
            rotor_area: layout.rotor_area(),
            turbines,
        })
    }
}

/// Partial derivatives of the emitted deficit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeficitPartials {
    pub wind: f64,
    pub ct: f64,
    pub area: f64,
}

/// Partial derivatives of turbine power, induction held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerPartials {
    pub wind: f64,
    pub ct: f64,
}

pub fn deficit_partials(
    point: &LinearizationPoint,
    wake_constant: f64,
    rotor_area: f64,
    j: usize,
) -> Result<DeficitPartials> {
    let tp = &point.turbines[j];
    if tp.area == 0.0 || !tp.area.is_finite() {
        return Err(Error::SingularPoint {
            turbine: j,
            reason: format!("wake area is {}", tp.area),
        });
    }
    if !(wake_constant > 0.0 && wake_constant < 1.0) {
        return Err(Error::Parameter {
            name: "wake_constant",
            reason: format!("must lie in (0, 1), got {wake_constant}"),
        });
    }
    let ratio = wake_constant / (1.0 - wake_constant);
    let bracket = tp.wind - ratio * (point.free_stream - tp.wind);
    let half_ratio = 0.5 * rotor_area / tp.area;
    Ok(DeficitPartials {
        wind: half_ratio * tp.ct * (1.0 + ratio),
        ct: half_ratio * bracket,
        area: -half_ratio / tp.area * tp.ct * bracket,
    })
}

pub fn power_partials(point: &LinearizationPoint, air_density: f64, rotor_area: f64, i: usize) -> PowerPartials {
    let tp = &point.turbines[i];
    let v = tp.wind;
    PowerPartials {
        wind: 1.5 * air_density * v * v * rotor_area * tp.ct * (1.0 - tp.induction),
        ct: 0.5 * air_density * v * v * v * rotor_area * (1.0 - tp.induction),
    }
}

/// Constant terms of the fused model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Biases {
    /// Deficit bias per turbine.
    pub deficit: Vec<f64>,
    /// Power bias per turbine.
    pub power: Vec<f64>,
}

pub fn assemble_bias_terms(
    point: &LinearizationPoint,
    constants: &TuningConstants,
    deficit: &[DeficitPartials],
    power: &[PowerPartials],
) -> Biases {
    let ar = point.rotor_area;
    let deficit = point
        .turbines
        .iter()
        .zip(deficit)
        .map(|(tp, d)| {
            tp.deficit - constants.c_vv * d.wind * tp.wind - constants.c_vct * d.ct * tp.ct
                + constants.c_va * (d.area * ar - d.area * tp.area)
        })
        .collect();
    let power = point
        .turbines
        .iter()
        .zip(power)
        .map(|(tp, p)| tp.power - constants.c_pv * p.wind * tp.wind - constants.c_pct * p.ct * tp.ct)
        .collect();
    Biases { deficit, power }
}

/// Gains of the fused model for one turbine, tuning constants applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusedGains {
    /// `dV_j` per unit wind at `j`.
    pub deficit_wind: f64,
    /// `dV_j` per unit filtered thrust of `j`.
    pub deficit_ct: f64,
    /// `dV_j` per unit of the delayed thrust sum entering the wake area.
    pub deficit_area: f64,
    pub deficit_bias: f64,
    pub power_wind: f64,
    pub power_ct: f64,
    pub power_bias: f64,
}

/// The fused linear model of the whole farm: per-turbine gains plus the
/// data needed to realize it.
#[derive(Debug, Clone, Serialize)]
pub struct FusedModel {
    pub point: LinearizationPoint,
    pub constants: TuningConstants,
    pub wake_constant: f64,
    pub filter_pole: f64,
    pub deficit_partials: Vec<DeficitPartials>,
    pub power_partials: Vec<PowerPartials>,
    pub biases: Biases,
    pub gains: Vec<FusedGains>,
}

impl FusedModel {
    pub fn new(
        layout: &FarmLayout,
        params: &PlantParams,
        point: LinearizationPoint,
        constants: TuningConstants,
    ) -> Result<Self> {
        params.validate()?;
        constants.validate()?;
        let g = layout.turbines();
        if point.turbines.len() != g {
            return Err(Error::validation("linearization_point", "turbine count mismatch"));
        }
        let ar = layout.rotor_area();
        let deficit_partials = (0..g)
            .map(|j| deficit_partials(&point, params.wake_constant, ar, j))
            .collect::<Result<Vec<_>>>()?;
        let power_partials: Vec<_> = (0..g)
            .map(|i| power_partials(&point, layout.air_density(), ar, i))
            .collect();
        let biases = assemble_bias_terms(&point, &constants, &deficit_partials, &power_partials);
        let spread = 0.5 * ar * params.expansion_ratio();
        let gains = (0..g)
            .map(|i| FusedGains {
                deficit_wind: constants.c_vv * deficit_partials[i].wind,
                deficit_ct: constants.c_vct * deficit_partials[i].ct,
                deficit_area: constants.c_va * deficit_partials[i].area * spread,
                deficit_bias: biases.deficit[i],
                power_wind: constants.c_pv * power_partials[i].wind,
                power_ct: constants.c_pct * power_partials[i].ct,
                power_bias: biases.power[i],
            })
            .collect();
        Ok(FusedModel {
            point,
            constants,
            wake_constant: params.wake_constant,
            filter_pole: filter_pole(params.filter_time_constant, layout.sample_time()),
            deficit_partials,
            power_partials,
            biases,
            gains,
        })
    }
}

/// One delay line of a subsystem state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Channel {
    /// Upwind turbines whose deficits travel in this line.
    pub sources: Vec<usize>,
    /// Number of slots (samples of extra delay).
    pub len: usize,
    /// Index of the first deficit slot in the subsystem state.
    pub deficit_offset: usize,
    /// Index of the first thrust slot.
    pub ct_offset: usize,
}

impl Channel {
    pub fn deficit_head(&self) -> usize {
        self.deficit_offset + self.len - 1
    }

    pub fn ct_head(&self) -> usize {
        self.ct_offset + self.len - 1
    }
}

/// Per-turbine linear subsystem
/// `x[k+1] = A_ii x[k] + B u[k] + A_i,i-1 x_{i-1}[k] + c_x`, `P[k] = C x[k] + c_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemModel {
    pub turbine: usize,
    pub a_self: DMatrix<f64>,
    pub a_up: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
    pub state_bias: DVector<f64>,
    pub output_bias: f64,
    pub channels: Vec<Channel>,
}

impl SubsystemModel {
    pub fn nx(&self) -> usize {
        self.a_self.nrows()
    }
}

/// Extra delay of source `j` between consecutive receivers `i - 1` and `i`
/// (positions within the row).
fn extra_delay(delays: &DelayTable, j: usize, i: usize) -> usize {
    delays.between_cols(j, i) - delays.between_cols(j, i - 1)
}

/// Channel grouping for every receiver position of a row, sources as
/// positions. `groups[i]` is empty for position 0.
fn channel_groups(delays: &DelayTable) -> Result<Vec<Vec<Vec<usize>>>> {
    let n = delays.cols();
    let mut groups = vec![Vec::new(); n];
    for i in 1..n {
        let mut sigs: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for j in 0..i {
            let sig: Vec<usize> = (i..n).map(|m| extra_delay(delays, j, m)).collect();
            if sig.iter().any(|&e| e == 0) {
                return Err(Error::DelayResolution {
                    upstream: j,
                    downstream: i,
                });
            }
            match sigs.iter_mut().find(|(s, _)| *s == sig) {
                Some((_, members)) => members.push(j),
                None => sigs.push((sig, vec![j])),
            }
        }
        groups[i] = sigs.into_iter().map(|(_, m)| m).collect();
    }
    Ok(groups)
}

/// Builds one subsystem per turbine. `state_budget` caps the state dimension.
pub fn realize_state_space(
    layout: &FarmLayout,
    delays: &DelayTable,
    model: &FusedModel,
    state_budget: usize,
) -> Result<Vec<SubsystemModel>> {
    let groups = channel_groups(delays)?;
    let alpha = model.filter_pole;
    let vinf = model.point.free_stream;
    let mut out: Vec<SubsystemModel> = Vec::with_capacity(layout.turbines());
    for row in 0..layout.rows() {
        let first = layout.most_upwind(row);
        for pos in 0..layout.cols() {
            let i = first + pos;
            let gi = &model.gains[i];
            let mut channels = Vec::new();
            let mut nx = 1;
            for members in &groups[pos] {
                let len = extra_delay(delays, members[0], pos);
                channels.push(Channel {
                    sources: members.iter().map(|&m| first + m).collect(),
                    len,
                    deficit_offset: nx,
                    ct_offset: nx + len,
                });
                nx += 2 * len;
            }
            if nx > state_budget {
                return Err(Error::StateBudget {
                    turbine: i,
                    required: nx,
                    budget: state_budget,
                });
            }
            let mut a_self = DMatrix::zeros(nx, nx);
            a_self[(0, 0)] = alpha;
            for ch in &channels {
                for m in 1..ch.len {
                    a_self[(ch.deficit_offset + m, ch.deficit_offset + m - 1)] = 1.0;
                    a_self[(ch.ct_offset + m, ch.ct_offset + m - 1)] = 1.0;
                }
            }
            let mut b = DVector::zeros(nx);
            b[0] = 1.0 - alpha;
            let mut c = RowDVector::zeros(nx);
            c[0] = gi.power_ct;
            for ch in &channels {
                c[ch.deficit_head()] = -gi.power_wind;
            }
            let output_bias = gi.power_wind * vinf + gi.power_bias;
            let mut state_bias = DVector::zeros(nx);

            let a_up = if pos == 0 {
                None
            } else {
                let up = &out[i - 1];
                let gu = &model.gains[i - 1];
                let mut a_up = DMatrix::zeros(nx, up.nx());
                for ch in &channels {
                    for upch in &up.channels {
                        if upch.sources.iter().all(|s| ch.sources.contains(s)) {
                            a_up[(ch.deficit_offset, upch.deficit_head())] += 1.0;
                            a_up[(ch.ct_offset, upch.ct_head())] += 1.0;
                        }
                    }
                    if ch.sources.contains(&(i - 1)) {
                        // emitted deficit of i-1 as an affine function of x_{i-1}
                        a_up[(ch.deficit_offset, 0)] += gu.deficit_ct + gu.deficit_area;
                        for upch in &up.channels {
                            a_up[(ch.deficit_offset, upch.deficit_head())] -= gu.deficit_wind;
                            a_up[(ch.deficit_offset, upch.ct_head())] += gu.deficit_area;
                        }
                        state_bias[ch.deficit_offset] += gu.deficit_wind * vinf + gu.deficit_bias;
                        a_up[(ch.ct_offset, 0)] += 1.0;
                    }
                }
                Some(a_up)
            };
            out.push(SubsystemModel {
                turbine: i,
                a_self,
                a_up,
                b,
                c,
                state_bias,
                output_bias,
                channels,
            });
        }
    }
    Ok(out)
}

/// Subsystem states that hold the model at its linearization point.
pub fn equilibrium_states(subsystems: &[SubsystemModel], point: &LinearizationPoint) -> Vec<DVector<f64>> {
    subsystems
        .iter()
        .map(|s| {
            let mut x = DVector::zeros(s.nx());
            x[0] = point.turbines[s.turbine].ct;
            for ch in &s.channels {
                let dv: f64 = ch.sources.iter().map(|&j| point.turbines[j].deficit).sum();
                let ct: f64 = ch.sources.iter().map(|&j| point.turbines[j].ct).sum();
                for m in 0..ch.len {
                    x[ch.deficit_offset + m] = dv;
                    x[ch.ct_offset + m] = ct;
                }
            }
            x
        })
        .collect()
}

/// Reads the subsystem states off the plant's histories, `lag` samples
/// before its current sample.
pub fn measured_states(
    subsystems: &[SubsystemModel],
    plant: &WakePlant,
    lag: usize,
) -> Result<Vec<DVector<f64>>> {
    let layout = plant.layout();
    let delays = plant.delays();
    subsystems
        .iter()
        .map(|s| {
            let i = s.turbine;
            let mut x = DVector::zeros(s.nx());
            x[0] = plant.filtered_ct_at(i, lag)?;
            for ch in &s.channels {
                for m in 0..ch.len {
                    let mut dv = 0.0;
                    let mut ct = 0.0;
                    for &j in &ch.sources {
                        // the channel input is the source's value as it reaches i-1
                        let reach = delays.between_cols(layout.col(j), layout.col(i) - 1);
                        let back = lag + m + 1 + reach;
                        dv += plant.deficit_at(j, back)?;
                        ct += plant.filtered_ct_at(j, back)?;
                    }
                    x[ch.deficit_offset + m] = dv;
                    x[ch.ct_offset + m] = ct;
                }
            }
            Ok(x)
        })
        .collect()
}

/// One step of the interconnected subsystems (absolute form).
pub fn step_subsystems(
    subsystems: &[SubsystemModel],
    states: &[DVector<f64>],
    inputs: &[f64],
) -> (Vec<DVector<f64>>, Vec<f64>) {
    let outputs = subsystems
        .iter()
        .zip(states)
        .map(|(s, x)| (&s.c * x)[0] + s.output_bias)
        .collect();
    let next = subsystems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut xn = &s.a_self * &states[i] + &s.b * inputs[i] + &s.state_bias;
            if let Some(a_up) = &s.a_up {
                xn += a_up * &states[i - 1];
            }
            xn
        })
        .collect();
    (next, outputs)
}

/// Velocity-form subsystem with state `[P_i; dx_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFormModel {
    pub turbine: usize,
    pub a_self: DMatrix<f64>,
    pub a_up: Option<DMatrix<f64>>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
}

impl VelocityFormModel {
    pub fn nx(&self) -> usize {
        self.a_self.nrows()
    }
}

/// Controller power unit, MW per W.
pub const MW_PER_W: f64 = 1e-6;

/// Velocity form of `sub`. The appended output state is `output_scale`
/// times the subsystem power, so the controller can work in MW.
pub fn to_velocity_form(sub: &SubsystemModel, output_scale: f64) -> VelocityFormModel {
    let n = sub.nx();
    let c_scaled = &sub.c * output_scale;
    let ca = &c_scaled * &sub.a_self;
    let mut a_self = DMatrix::zeros(n + 1, n + 1);
    a_self[(0, 0)] = 1.0;
    a_self.view_mut((0, 1), (1, n)).copy_from(&ca);
    a_self.view_mut((1, 1), (n, n)).copy_from(&sub.a_self);
    let a_up = sub.a_up.as_ref().map(|au| {
        let m = au.ncols();
        let mut a = DMatrix::zeros(n + 1, m + 1);
        a.view_mut((0, 1), (1, m)).copy_from(&(&c_scaled * au));
        a.view_mut((1, 1), (n, m)).copy_from(au);
        a
    });
    let mut b = DVector::zeros(n + 1);
    b[0] = (&c_scaled * &sub.b)[0];
    b.rows_mut(1, n).copy_from(&sub.b);
    let mut c = RowDVector::zeros(n + 1);
    c[0] = 1.0;
    VelocityFormModel {
        turbine: sub.turbine,
        a_self,
        a_up,
        b,
        c,
    }
}

/// Velocity-form state `[P; x - x_prev]`.
pub fn velocity_state(power: f64, x: &DVector<f64>, x_prev: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() + 1);
    out[0] = power;
    out.rows_mut(1, x.len()).copy_from(&(x - x_prev));
    out
}
