//! Nonlinear wake plant.
//!
//! Each row is a chain of actuator disks coupled through delayed wake
//! deficits. The plant keeps per-turbine histories of the emitted deficit
//! and of the filtered thrust coefficient so that every delayed term of the
//! row equations can be read back. It is the simulated farm in closed loop
//! and the reference the linear model is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{compute_delays, DelayTable, FarmLayout};

/// Thrust coefficient at the Betz limit.
pub const BETZ_CT: f64 = 8.0 / 9.0;

/// Rule mapping a thrust coefficient to the axial induction factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InductionMap {
    /// `a = (1 - sqrt(1 - C_T)) / 2`.
    ActuatorDisk,
    /// Induction held at a fixed value regardless of `C_T`.
    Frozen(f64),
}

impl InductionMap {
    pub fn induction(&self, ct: f64) -> f64 {
        match *self {
            InductionMap::ActuatorDisk => (1.0 - (1.0 - ct.min(1.0)).max(0.0).sqrt()) / 2.0,
            InductionMap::Frozen(a) => a,
        }
    }
}

impl Default for InductionMap {
    fn default() -> Self {
        InductionMap::ActuatorDisk
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Wake expansion constant `c_w`, strictly between 0 and 1.
    pub wake_constant: f64,
    /// Thrust actuator time constant `tau` (s).
    pub filter_time_constant: f64,
    #[serde(default)]
    pub induction: InductionMap,
    /// Physical input range; inputs outside it are clamped and counted.
    #[serde(default)]
    pub ct_min: f64,
    #[serde(default = "default_plant_ct_max")]
    pub ct_max: f64,
}

fn default_plant_ct_max() -> f64 {
    1.0
}

impl PlantParams {
    pub fn new(wake_constant: f64, filter_time_constant: f64) -> Self {
        PlantParams {
            wake_constant,
            filter_time_constant,
            induction: InductionMap::ActuatorDisk,
            ct_min: 0.0,
            ct_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cw = self.wake_constant;
        if !(cw > 0.0 && cw < 1.0) {
            return Err(Error::Parameter {
                name: "wake_constant",
                reason: format!("must lie in (0, 1), got {cw}"),
            });
        }
        if !(self.filter_time_constant > 0.0 && self.filter_time_constant.is_finite()) {
            return Err(Error::Parameter {
                name: "filter_time_constant",
                reason: format!("must be positive, got {}", self.filter_time_constant),
            });
        }
        if !(self.ct_min >= 0.0 && self.ct_min <= self.ct_max && self.ct_max <= 1.0) {
            return Err(Error::Parameter {
                name: "ct_max",
                reason: format!("need 0 <= ct_min <= ct_max <= 1, got [{}, {}]", self.ct_min, self.ct_max),
            });
        }
        if let InductionMap::Frozen(a) = self.induction {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Parameter {
                    name: "induction",
                    reason: format!("frozen induction must lie in [0, 1), got {a}"),
                });
            }
        }
        Ok(())
    }

    /// `c_w / (1 - c_w)`.
    pub fn expansion_ratio(&self) -> f64 {
        self.wake_constant / (1.0 - self.wake_constant)
    }
}

fn check_wake_constant(cw: f64) -> Result<f64> {
    if cw > 0.0 && cw < 1.0 {
        Ok(cw / (1.0 - cw))
    } else {
        Err(Error::Parameter {
            name: "wake_constant",
            reason: format!("must lie in (0, 1), got {cw}"),
        })
    }
}

/// Wake cross-section in front of the next turbine, given the delayed thrust
/// coefficients of every turbine up to and including the emitting one.
pub fn wake_area(rotor_area: f64, wake_constant: f64, delayed_cts: &[f64]) -> Result<f64> {
    let ratio = check_wake_constant(wake_constant)?;
    Ok(area_from_sum(rotor_area, ratio, delayed_cts.iter().sum()))
}

#[inline]
pub(crate) fn area_from_sum(rotor_area: f64, ratio: f64, ct_sum: f64) -> f64 {
    rotor_area + 0.5 * rotor_area * ratio * ct_sum
}

/// Wind-speed deficit emitted by a turbine seeing `wind` with thrust `ct`.
pub fn wake_deficit(
    wind: f64,
    ct: f64,
    area: f64,
    free_stream: f64,
    wake_constant: f64,
    rotor_area: f64,
) -> Result<f64> {
    let ratio = check_wake_constant(wake_constant)?;
    Ok(deficit(wind, ct, area, free_stream, ratio, rotor_area))
}

#[inline]
pub(crate) fn deficit(wind: f64, ct: f64, area: f64, free_stream: f64, ratio: f64, rotor_area: f64) -> f64 {
    0.5 * rotor_area / area * ct * (wind - ratio * (free_stream - wind))
}

/// Actuator-disk power (W).
pub fn turbine_power(wind: f64, ct: f64, induction: f64, air_density: f64, rotor_area: f64) -> f64 {
    0.5 * air_density * wind.powi(3) * rotor_area * ct * (1.0 - induction)
}

/// `exp(-h / tau)`, the pole of the discretized thrust filter.
pub fn filter_pole(time_constant: f64, sample_time: f64) -> f64 {
    (-sample_time / time_constant).exp()
}

/// One zero-order-hold step of the first-order thrust filter.
pub fn ct_filter_step(filtered: f64, input: f64, time_constant: f64, sample_time: f64) -> f64 {
    let pole = filter_pole(time_constant, sample_time);
    pole * filtered + (1.0 - pole) * input
}

/// Steady-state flow quantities for constant thrust coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyState {
    pub cts: Vec<f64>,
    pub winds: Vec<f64>,
    pub deficits: Vec<f64>,
    /// Wake area in front of the next turbine, `A_{i+1}`.
    pub areas: Vec<f64>,
    pub inductions: Vec<f64>,
    pub powers: Vec<f64>,
}

impl SteadyState {
    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }
}

/// Steady state by direct row-by-row evaluation (delays play no role once
/// everything is constant).
pub fn steady_state(layout: &FarmLayout, params: &PlantParams, cts: &[f64]) -> Result<SteadyState> {
    params.validate()?;
    let g = layout.turbines();
    if cts.len() != g {
        return Err(Error::validation("cts", format!("expected {g} values, got {}", cts.len())));
    }
    let ratio = params.expansion_ratio();
    let (ar, vinf) = (layout.rotor_area(), layout.free_stream());
    let mut out = SteadyState {
        cts: cts.to_vec(),
        winds: vec![0.0; g],
        deficits: vec![0.0; g],
        areas: vec![0.0; g],
        inductions: vec![0.0; g],
        powers: vec![0.0; g],
    };
    for row in 0..layout.rows() {
        let mut deficit_sum = 0.0;
        let mut ct_sum = 0.0;
        for i in layout.row_members(row) {
            let v = (vinf - deficit_sum).clamp(0.0, vinf);
            ct_sum += cts[i];
            let area = area_from_sum(ar, ratio, ct_sum);
            let dv = deficit(v, cts[i], area, vinf, ratio, ar);
            let a = params.induction.induction(cts[i]);
            out.winds[i] = v;
            out.areas[i] = area;
            out.deficits[i] = dv;
            out.inductions[i] = a;
            out.powers[i] = turbine_power(v, cts[i], a, layout.air_density(), ar);
            deficit_sum += dv;
        }
    }
    Ok(out)
}

/// Fixed-capacity history; `get(1)` is the most recently pushed value.
#[derive(Debug, Clone, PartialEq)]
struct History {
    buf: Vec<f64>,
    head: usize,
}

impl History {
    fn filled(capacity: usize, value: f64) -> Self {
        History {
            buf: vec![value; capacity.max(1)],
            head: 0,
        }
    }

    fn push(&mut self, value: f64) {
        self.head = (self.head + 1) % self.buf.len();
        self.buf[self.head] = value;
    }

    fn get(&self, lag: usize) -> f64 {
        debug_assert!(lag >= 1 && lag <= self.buf.len());
        let n = self.buf.len();
        self.buf[(self.head + n - (lag - 1) % n) % n]
    }
}

/// Plant quantities at the current sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantOutput {
    pub powers: Vec<f64>,
    pub winds: Vec<f64>,
    pub deficits: Vec<f64>,
    pub filtered_cts: Vec<f64>,
}

impl PlantOutput {
    pub fn total_power(&self) -> f64 {
        self.powers.iter().sum()
    }
}

/// Dynamic state of the plant: filtered thrust coefficients and histories.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    sample: usize,
    filtered_ct: Vec<f64>,
    last_applied: Vec<f64>,
    deficit_history: Vec<History>,
    ct_history: Vec<History>,
}

impl PlantState {
    pub fn sample(&self) -> usize {
        self.sample
    }

    pub fn filtered_cts(&self) -> &[f64] {
        &self.filtered_ct
    }

    pub fn last_applied(&self) -> &[f64] {
        &self.last_applied
    }
}

/// The simulated wind farm.
#[derive(Debug, Clone)]
pub struct WakePlant {
    layout: FarmLayout,
    delays: DelayTable,
    params: PlantParams,
    state: Option<PlantState>,
    current: Option<PlantOutput>,
    clamped_inputs: usize,
    history_len: usize,
}

impl WakePlant {
    pub fn new(layout: &FarmLayout, params: &PlantParams) -> Result<Self> {
        params.validate()?;
        let delays = compute_delays(layout);
        let history_len = delays.max_row_delay() + 2;
        Ok(WakePlant {
            layout: layout.clone(),
            delays,
            params: params.clone(),
            state: None,
            current: None,
            clamped_inputs: 0,
            history_len,
        })
    }

    pub fn layout(&self) -> &FarmLayout {
        &self.layout
    }

    pub fn delays(&self) -> &DelayTable {
        &self.delays
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn state(&self) -> Option<&PlantState> {
        self.state.as_ref()
    }

    /// Number of input entries clamped into the plant's physical range.
    pub fn clamped_inputs(&self) -> usize {
        self.clamped_inputs
    }

    /// Longest lag that [`WakePlant::deficit_at`] and [`WakePlant::filtered_ct_at`] can serve.
    pub fn history_len(&self) -> usize {
        self.history_len
    }

    /// Pre-fills every history with the steady state at `cts`.
    pub fn warm_start(&mut self, cts: &[f64]) -> Result<()> {
        let cts: Vec<f64> = cts
            .iter()
            .map(|c| c.clamp(self.params.ct_min, self.params.ct_max))
            .collect();
        let ss = steady_state(&self.layout, &self.params, &cts)?;
        let cap = self.history_len;
        self.state = Some(PlantState {
            sample: 0,
            filtered_ct: cts.clone(),
            last_applied: cts.clone(),
            deficit_history: ss.deficits.iter().map(|&d| History::filled(cap, d)).collect(),
            ct_history: cts.iter().map(|&c| History::filled(cap, c)).collect(),
        });
        self.current = None;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let out = self.evaluate();
        self.current = Some(out);
    }

    /// Evaluates winds, deficits and powers at the current sample.
    fn evaluate(&self) -> PlantOutput {
        let st = self.state.as_ref().expect("initialized");
        let g = self.layout.turbines();
        let ratio = self.params.expansion_ratio();
        let (ar, vinf, rho) = (
            self.layout.rotor_area(),
            self.layout.free_stream(),
            self.layout.air_density(),
        );
        let mut out = PlantOutput {
            powers: vec![0.0; g],
            winds: vec![0.0; g],
            deficits: vec![0.0; g],
            filtered_cts: st.filtered_ct.clone(),
        };
        for row in 0..self.layout.rows() {
            let members = self.layout.row_members(row);
            let first = members.start;
            for i in members {
                let ci = i - first;
                let mut deficit_sum = 0.0;
                let mut ct_sum = st.filtered_ct[i];
                for j in first..i {
                    let lag = self.delays.between_cols(j - first, ci);
                    deficit_sum += if lag == 0 {
                        out.deficits[j]
                    } else {
                        st.deficit_history[j].get(lag)
                    };
                    ct_sum += if lag == 0 {
                        st.filtered_ct[j]
                    } else {
                        st.ct_history[j].get(lag)
                    };
                }
                let v = (vinf - deficit_sum).clamp(0.0, vinf);
                let ct = st.filtered_ct[i];
                let area = area_from_sum(ar, ratio, ct_sum);
                out.winds[i] = v;
                out.deficits[i] = deficit(v, ct, area, vinf, ratio, ar);
                let a = self.params.induction.induction(ct);
                out.powers[i] = turbine_power(v, ct, a, rho, ar);
            }
        }
        out
    }

    /// Outputs at the current sample.
    pub fn measure(&self) -> Result<&PlantOutput> {
        self.current.as_ref().ok_or(Error::Uninitialized)
    }

    /// Effective wind speed at turbine `i` for the current sample.
    pub fn effective_wind(&self, i: usize) -> Result<f64> {
        Ok(self.measure()?.winds[i])
    }

    /// Applies `inputs` at the current sample, advances one sample time and
    /// returns the outputs of the sample the inputs were applied at.
    pub fn step(&mut self, inputs: &[f64]) -> Result<PlantOutput> {
        let current = self.current.take().ok_or(Error::Uninitialized)?;
        let g = self.layout.turbines();
        if inputs.len() != g {
            self.current = Some(current);
            return Err(Error::validation("inputs", format!("expected {g} values, got {}", inputs.len())));
        }
        let pole = filter_pole(self.params.filter_time_constant, self.layout.sample_time());
        let (lo, hi) = (self.params.ct_min, self.params.ct_max);
        let st = self.state.as_mut().expect("initialized");
        for i in 0..g {
            let mut u = inputs[i];
            if !(lo..=hi).contains(&u) {
                u = u.clamp(lo, hi);
                self.clamped_inputs += 1;
            }
            st.deficit_history[i].push(current.deficits[i]);
            st.ct_history[i].push(st.filtered_ct[i]);
            st.filtered_ct[i] = pole * st.filtered_ct[i] + (1.0 - pole) * u;
            st.last_applied[i] = u;
        }
        st.sample += 1;
        self.refresh();
        Ok(current)
    }

    /// Deficit emitted by turbine `j` at `lag` samples before the current one
    /// (`lag == 0` is the current sample).
    pub fn deficit_at(&self, j: usize, lag: usize) -> Result<f64> {
        let st = self.state.as_ref().ok_or(Error::Uninitialized)?;
        Ok(if lag == 0 {
            self.current.as_ref().expect("initialized").deficits[j]
        } else {
            st.deficit_history[j].get(lag)
        })
    }

    /// Filtered thrust coefficient of turbine `j`, `lag` samples back.
    pub fn filtered_ct_at(&self, j: usize, lag: usize) -> Result<f64> {
        let st = self.state.as_ref().ok_or(Error::Uninitialized)?;
        Ok(if lag == 0 {
            st.filtered_ct[j]
        } else {
            st.ct_history[j].get(lag)
        })
    }
}

/// Samples allowed for the plant to settle: ten times the row delay plus the
/// time the thrust filter needs to decay by 1e-12.
fn settle_cap(layout: &FarmLayout, params: &PlantParams, delays: &DelayTable) -> usize {
    let filter = (params.filter_time_constant / layout.sample_time() * 12.0 * std::f64::consts::LN_10).ceil() as usize;
    10 * (delays.max_row_delay() + filter + 1)
}

/// Runs the plant with constant `cts` from its current state until the total
/// power stops changing; returns the settled total power.
pub fn settle(plant: &mut WakePlant, cts: &[f64]) -> Result<f64> {
    let cap = settle_cap(&plant.layout, &plant.params, &plant.delays);
    let window = plant.delays.max_row_delay() + 1;
    let mut trace: Vec<f64> = Vec::with_capacity(cap);
    for k in 0..cap {
        let p = plant.step(cts)?.total_power();
        trace.push(p);
        if k > window {
            let recent = &trace[k - window..=k];
            let worst = recent.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            if worst < 1e-9 * p.abs().max(f64::MIN_POSITIVE) {
                return Ok(plant.measure()?.total_power());
            }
        }
    }
    Err(Error::SteadyStateNotReached { samples: cap })
}

/// Farm power with every turbine held at the Betz limit, obtained by running
/// the plant from a cold start until it settles.
pub fn greedy_power(layout: &FarmLayout, params: &PlantParams) -> Result<f64> {
    greedy_power_from(layout, params, params.ct_min)
}

/// As [`greedy_power`], starting from a plant warm-started at `initial_ct`.
pub fn greedy_power_from(layout: &FarmLayout, params: &PlantParams, initial_ct: f64) -> Result<f64> {
    let mut plant = WakePlant::new(layout, params)?;
    let g = layout.turbines();
    plant.warm_start(&vec![initial_ct; g])?;
    settle(&mut plant, &vec![BETZ_CT.min(params.ct_max); g])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_layout, FarmConfig};
    use approx::assert_relative_eq;

    const AR90: f64 = 6361.725123519332;

    fn layout(rows: usize, cols: usize) -> FarmLayout {
        build_layout(&FarmConfig {
            rows,
            cols,
            ..FarmConfig::ten_turbine()
        })
        .unwrap()
    }

    fn short_row(cols: usize, spacing: f64) -> FarmLayout {
        build_layout(&FarmConfig {
            rows: 1,
            cols,
            downstream_spacing: spacing,
            ..FarmConfig::ten_turbine()
        })
        .unwrap()
    }

    fn params() -> PlantParams {
        PlantParams::new(0.68, 5.0)
    }

    #[test]
    fn wake_area_examples() {
        assert_relative_eq!(wake_area(AR90, 0.68, &[]).unwrap(), AR90, max_relative = 1e-12);
        assert_relative_eq!(wake_area(AR90, 0.68, &[0.0, 0.0]).unwrap(), AR90);
        let a = wake_area(AR90, 0.68, &[8.0 / 9.0]).unwrap();
        assert_relative_eq!(a / AR90, 1.0 + 0.5 * 2.125 * 8.0 / 9.0, max_relative = 1e-12);
        assert_relative_eq!(a / AR90, 1.9444444444444444, max_relative = 1e-12);
        assert!(wake_area(AR90, 0.68, &[0.5]).unwrap() < wake_area(AR90, 0.68, &[0.6]).unwrap());
        assert!(matches!(wake_area(AR90, 1.0, &[0.5]), Err(Error::Parameter { .. })));
        assert!(wake_area(AR90, 0.0, &[0.5]).is_err());
    }

    #[test]
    fn wake_deficit_examples() {
        assert_eq!(wake_deficit(7.5, 0.0, AR90, 7.5, 0.68, AR90).unwrap(), 0.0);
        let dv = wake_deficit(7.5, 8.0 / 9.0, AR90, 7.5, 0.68, AR90).unwrap();
        assert_relative_eq!(dv, 3.3333333333333335, max_relative = 1e-12);
        // bracket root: V = V_inf * c_w
        for ct in [0.1, 0.5, 0.88] {
            let dv = wake_deficit(7.5 * 0.68, ct, 1.3 * AR90, 7.5, 0.68, AR90).unwrap();
            assert!(dv.abs() < 1e-12);
        }
        // deep wake: negative deficit
        assert!(wake_deficit(2.0, 0.5, AR90, 7.5, 0.68, AR90).unwrap() < 0.0);
    }

    #[test]
    fn power_examples() {
        assert_eq!(turbine_power(7.5, 0.0, 0.0, 1.2, AR90), 0.0);
        let a = InductionMap::ActuatorDisk.induction(8.0 / 9.0);
        assert_relative_eq!(a, 1.0 / 3.0, max_relative = 1e-12);
        let p = turbine_power(7.5, 8.0 / 9.0, a, 1.2, AR90);
        assert_relative_eq!(p, 954_259.4, max_relative = 1e-6);
        let p2 = turbine_power(15.0, 8.0 / 9.0, a, 1.2, AR90);
        assert_relative_eq!(p2 / p, 8.0, max_relative = 1e-12);
    }

    #[test]
    fn filter_examples() {
        assert_eq!(ct_filter_step(0.4, 0.4, 5.0, 1.0), 0.4);
        assert_relative_eq!(filter_pole(5.0, 1.0), 0.818_730_753_077_981_8, max_relative = 1e-15);
        let mut c = 0.0;
        for k in 1..=20 {
            c = ct_filter_step(c, 8.0 / 9.0, 5.0, 1.0);
            let closed = 8.0 / 9.0 * (1.0 - (-(k as f64) / 5.0).exp());
            assert_relative_eq!(c, closed, max_relative = 1e-12);
        }
    }

    #[test]
    fn history_lags() {
        let mut h = History::filled(3, 0.0);
        h.push(1.0);
        h.push(2.0);
        assert_eq!(h.get(1), 2.0);
        assert_eq!(h.get(2), 1.0);
        assert_eq!(h.get(3), 0.0);
        h.push(3.0);
        h.push(4.0);
        assert_eq!((h.get(1), h.get(2), h.get(3)), (4.0, 3.0, 2.0));
    }

    #[test]
    fn uninitialized_plant_errors() {
        let mut p = WakePlant::new(&layout(1, 2), &params()).unwrap();
        assert!(matches!(p.step(&[0.5, 0.5]), Err(Error::Uninitialized)));
        assert!(matches!(p.measure(), Err(Error::Uninitialized)));
    }

    #[test]
    fn zero_thrust_gives_free_stream_and_no_power() {
        let l = layout(2, 5);
        let mut p = WakePlant::new(&l, &params()).unwrap();
        p.warm_start(&vec![0.3; 10]).unwrap();
        let zero = vec![0.0; 10];
        for _ in 0..600 {
            p.step(&zero).unwrap();
        }
        let out = p.measure().unwrap();
        for i in 0..10 {
            assert!(out.powers[i] < 1e-40);
            assert!((out.winds[i] - 7.5).abs() < 1e-15);
        }
        p.warm_start(&zero).unwrap();
        for _ in 0..5 {
            let out = p.step(&zero).unwrap();
            assert!(out.powers.iter().all(|&x| x == 0.0));
            assert!(out.winds.iter().all(|&v| v == 7.5));
        }
    }

    #[test]
    fn most_upwind_sees_free_stream() {
        let l = layout(2, 5);
        let mut p = WakePlant::new(&l, &params()).unwrap();
        p.warm_start(&vec![0.6; 10]).unwrap();
        assert_eq!(p.effective_wind(0).unwrap(), 7.5);
        assert_eq!(p.effective_wind(5).unwrap(), 7.5);
        assert!(p.effective_wind(1).unwrap() < 7.5);
    }

    #[test]
    fn downstream_reacts_exactly_after_delay() {
        let l = short_row(2, 60.0); // 8 samples
        let d = compute_delays(&l).get(0, 1).unwrap();
        assert_eq!(d, 8);
        let mut p = WakePlant::new(&l, &params()).unwrap();
        p.warm_start(&[0.0, 0.5]).unwrap();
        let v0 = p.effective_wind(1).unwrap();
        let mut first_ct_change = None;
        let mut first_wind_change = None;
        for k in 0..40 {
            let before = p.measure().unwrap().clone();
            if first_ct_change.is_none() && before.filtered_cts[0] != 0.0 {
                first_ct_change = Some(k);
            }
            if first_wind_change.is_none() && before.winds[1] != v0 {
                first_wind_change = Some(k);
            }
            p.step(&[8.0 / 9.0, 0.5]).unwrap();
        }
        assert_eq!(first_ct_change, Some(1));
        assert_eq!(first_wind_change, Some(1 + d));
    }

    #[test]
    fn steady_state_matches_dynamics() {
        let l = layout(2, 5);
        let cts: Vec<f64> = (0..10).map(|i| 0.2 + 0.06 * i as f64).collect();
        let ss = steady_state(&l, &params(), &cts).unwrap();
        let mut p = WakePlant::new(&l, &params()).unwrap();
        p.warm_start(&vec![0.5; 10]).unwrap();
        let total = settle(&mut p, &cts).unwrap();
        assert_relative_eq!(total, ss.total_power(), max_relative = 1e-8);
        let out = p.measure().unwrap();
        for i in 0..10 {
            assert_relative_eq!(out.winds[i], ss.winds[i], max_relative = 1e-8);
        }
    }

    #[test]
    fn one_upstream_fixed_point() {
        // iterate the coupled equations directly as an independent check
        let l = short_row(2, 630.0);
        let ss = steady_state(&l, &params(), &[8.0 / 9.0, 8.0 / 9.0]).unwrap();
        let ratio = 0.68 / 0.32;
        let mut v2 = 7.5;
        for _ in 0..200 {
            let area = AR90 * (1.0 + 0.5 * ratio * 8.0 / 9.0);
            let dv1 = 0.5 * AR90 / area * 8.0 / 9.0 * 7.5;
            v2 = 7.5 - dv1;
        }
        assert_relative_eq!(ss.winds[1], v2, max_relative = 1e-12);
        assert_relative_eq!(ss.winds[1], 5.785714285714286, max_relative = 1e-12);
    }

    #[test]
    fn greedy_examples() {
        let single = greedy_power(&layout(1, 1), &params()).unwrap();
        assert_relative_eq!(single, 954_259.4, max_relative = 1e-6);
        let pair = greedy_power(&layout(1, 2), &params()).unwrap();
        assert!(pair < 2.0 * single);
        let l = layout(2, 5);
        let a = greedy_power_from(&l, &params(), 0.01).unwrap();
        let b = greedy_power_from(&l, &params(), 0.7).unwrap();
        let direct = steady_state(&l, &params(), &[BETZ_CT; 10]).unwrap().total_power();
        assert_relative_eq!(a, direct, max_relative = 1e-8);
        assert_relative_eq!(b, direct, max_relative = 1e-8);
    }

    #[test]
    fn inputs_are_clamped_and_counted() {
        let l = layout(1, 2);
        let mut p = WakePlant::new(
            &l,
            &PlantParams {
                ct_min: 0.01,
                ct_max: BETZ_CT,
                ..params()
            },
        )
        .unwrap();
        p.warm_start(&[0.5, 0.5]).unwrap();
        p.step(&[1.5, -0.2]).unwrap();
        assert_eq!(p.clamped_inputs(), 2);
        assert_eq!(p.state().unwrap().last_applied(), &[BETZ_CT, 0.01]);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PlantParams::new(1.2, 5.0).validate().is_err());
        assert!(PlantParams::new(0.5, 0.0).validate().is_err());
        assert!(PlantParams::new(0.5, 5.0).validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn winds_stay_physical(seq in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 6), 1..60)) {
                let l = build_layout(&FarmConfig {
                    rows: 2, cols: 3, downstream_spacing: 40.0, ..FarmConfig::ten_turbine()
                }).unwrap();
                let mut p = WakePlant::new(&l, &PlantParams::new(0.3, 5.0)).unwrap();
                p.warm_start(&[0.5; 6]).unwrap();
                for u in &seq {
                    let out = p.step(u).unwrap();
                    for v in out.winds {
                        prop_assert!((0.0..=7.5).contains(&v));
                    }
                    for c in out.filtered_cts {
                        prop_assert!((0.0..=1.0).contains(&c));
                    }
                }
            }

            #[test]
            fn filter_is_monotone_under_step(start in 0.0f64..1.0, target in 0.0f64..1.0, tau in 0.5f64..20.0) {
                let mut c = start;
                for _ in 0..50 {
                    let next = ct_filter_step(c, target, tau, 1.0);
                    prop_assert!((next - c) * (target - start) >= 0.0);
                    prop_assert!(next >= c.min(target) - 1e-15 && next <= c.max(target) + 1e-15);
                    c = next;
                }
            }

            #[test]
            fn power_monotone_in_wind(v in 0.0f64..20.0, dv in 0.0f64..5.0, ct in 0.0f64..0.9) {
                let a = InductionMap::ActuatorDisk.induction(ct);
                prop_assert!(turbine_power(v + dv, ct, a, 1.2, AR90) >= turbine_power(v, ct, a, 1.2, AR90));
            }

            #[test]
            fn rows_evolve_independently(u in proptest::collection::vec(0.05f64..0.88, 3), w in proptest::collection::vec(0.05f64..0.88, 3)) {
                let l = build_layout(&FarmConfig {
                    rows: 2, cols: 3, downstream_spacing: 40.0, ..FarmConfig::ten_turbine()
                }).unwrap();
                let mut a = WakePlant::new(&l, &params()).unwrap();
                let mut b = WakePlant::new(&l, &params()).unwrap();
                a.warm_start(&[0.5; 6]).unwrap();
                b.warm_start(&[0.5; 6]).unwrap();
                let ua: Vec<f64> = u.iter().chain(w.iter()).copied().collect();
                let ub: Vec<f64> = w.iter().chain(u.iter()).copied().collect();
                for _ in 0..30 {
                    let oa = a.step(&ua).unwrap();
                    let ob = b.step(&ub).unwrap();
                    prop_assert_eq!(&oa.powers[..3], &ob.powers[3..]);
                    prop_assert_eq!(&oa.powers[3..], &ob.powers[..3]);
                }
            }
        }
    }
}
