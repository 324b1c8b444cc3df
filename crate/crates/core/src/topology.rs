//! Rectangular farm geometry, wake-travel delays and interaction sets.
//!
//! Turbines are indexed row-major starting at the top row: turbine `i` sits
//! in row `i / cols` and column `i % cols`, column 0 being the most upwind.
//! Wind blows along the rows, so turbines only interact with turbines in
//! their own row.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw farm description, as read from the `[farm]` section of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmConfig {
    /// Number of rows `M`.
    pub rows: usize,
    /// Number of columns `N`.
    pub cols: usize,
    /// Distance between consecutive turbines in a row (m).
    pub downstream_spacing: f64,
    /// Distance between rows (m). Rows do not interact; kept for bookkeeping.
    pub crosswind_spacing: f64,
    pub rotor_diameter: f64,
    /// Free-stream wind speed `V_inf` (m/s).
    pub free_stream: f64,
    #[serde(default = "default_air_density")]
    pub air_density: f64,
    /// Controller and plant sample time `h` (s).
    pub sample_time: f64,
}

fn default_air_density() -> f64 {
    1.2
}

impl FarmConfig {
    /// 2 rows of 5 turbines, 630 m apart, 7.5 m/s inflow.
    pub fn ten_turbine() -> Self {
        FarmConfig {
            rows: 2,
            cols: 5,
            downstream_spacing: 630.0,
            crosswind_spacing: 378.0,
            rotor_diameter: 90.0,
            free_stream: 7.5,
            air_density: 1.2,
            sample_time: 1.0,
        }
    }

    /// 8 rows of 8 turbines with the same spacing as [`FarmConfig::ten_turbine`].
    pub fn sixty_four_turbine() -> Self {
        FarmConfig {
            rows: 8,
            cols: 8,
            ..Self::ten_turbine()
        }
    }
}

/// Validated farm geometry. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarmLayout {
    rows: usize,
    cols: usize,
    downstream_spacing: f64,
    crosswind_spacing: f64,
    rotor_diameter: f64,
    free_stream: f64,
    air_density: f64,
    sample_time: f64,
}

fn positive(field: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be positive, got {value}")))
    }
}

/// Validates `config` and returns the farm layout.
pub fn build_layout(config: &FarmConfig) -> Result<FarmLayout> {
    if config.rows == 0 {
        return Err(Error::validation("rows", "farm needs at least one row"));
    }
    if config.cols == 0 {
        return Err(Error::validation("cols", "farm needs at least one column"));
    }
    positive("downstream_spacing", config.downstream_spacing)?;
    if !(config.crosswind_spacing.is_finite() && config.crosswind_spacing >= 0.0) {
        return Err(Error::validation(
            "crosswind_spacing",
            format!("must be non-negative, got {}", config.crosswind_spacing),
        ));
    }
    positive("rotor_diameter", config.rotor_diameter)?;
    positive("free_stream", config.free_stream)?;
    positive("air_density", config.air_density)?;
    positive("sample_time", config.sample_time)?;
    Ok(FarmLayout {
        rows: config.rows,
        cols: config.cols,
        downstream_spacing: config.downstream_spacing,
        crosswind_spacing: config.crosswind_spacing,
        rotor_diameter: config.rotor_diameter,
        free_stream: config.free_stream,
        air_density: config.air_density,
        sample_time: config.sample_time,
    })
}

impl FarmLayout {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Total number of turbines `G = M * N`.
    pub fn turbines(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row(&self, turbine: usize) -> usize {
        turbine / self.cols
    }

    pub fn col(&self, turbine: usize) -> usize {
        turbine % self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Turbines of `row`, most upwind first.
    pub fn row_members(&self, row: usize) -> std::ops::Range<usize> {
        row * self.cols..(row + 1) * self.cols
    }

    /// Index of the most upwind turbine of `row`.
    pub fn most_upwind(&self, row: usize) -> usize {
        self.index(row, 0)
    }

    pub fn is_most_upwind(&self, turbine: usize) -> bool {
        self.col(turbine) == 0
    }

    pub fn downstream_spacing(&self) -> f64 {
        self.downstream_spacing
    }

    pub fn crosswind_spacing(&self) -> f64 {
        self.crosswind_spacing
    }

    pub fn rotor_diameter(&self) -> f64 {
        self.rotor_diameter
    }

    /// Rotor swept area `pi/4 * D^2`.
    pub fn rotor_area(&self) -> f64 {
        PI / 4.0 * self.rotor_diameter * self.rotor_diameter
    }

    pub fn free_stream(&self) -> f64 {
        self.free_stream
    }

    pub fn air_density(&self) -> f64 {
        self.air_density
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn config(&self) -> FarmConfig {
        FarmConfig {
            rows: self.rows,
            cols: self.cols,
            downstream_spacing: self.downstream_spacing,
            crosswind_spacing: self.crosswind_spacing,
            rotor_diameter: self.rotor_diameter,
            free_stream: self.free_stream,
            air_density: self.air_density,
            sample_time: self.sample_time,
        }
    }
}

/// Wake-travel delays in samples between same-row turbines.
///
/// Because every row has the same geometry the table is stored per column
/// pair; `get(j, i)` maps turbine indices onto it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayTable {
    cols: usize,
    /// `by_cols[a][b]`, defined for `a <= b`; zero on the diagonal.
    by_cols: Vec<Vec<usize>>,
}

/// Frozen-turbulence delays: `round(x / (V_inf * h))` with `x` the
/// rotor-to-rotor distance. Rounds half away from zero.
pub fn compute_delays(layout: &FarmLayout) -> DelayTable {
    let n = layout.cols();
    let travel = layout.free_stream() * layout.sample_time();
    let by_cols = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if b <= a {
                        0
                    } else {
                        let x = (b - a) as f64 * layout.downstream_spacing();
                        (x / travel).round() as usize
                    }
                })
                .collect()
        })
        .collect();
    DelayTable { cols: n, by_cols }
}

impl DelayTable {
    /// Delay from turbine `upstream` to turbine `downstream`, `None` unless
    /// both share a row and `upstream` lies strictly upwind.
    pub fn get(&self, upstream: usize, downstream: usize) -> Option<usize> {
        let (ru, cu) = (upstream / self.cols, upstream % self.cols);
        let (rd, cd) = (downstream / self.cols, downstream % self.cols);
        (ru == rd && cu < cd).then(|| self.by_cols[cu][cd])
    }

    /// Delay between two columns; zero when `from >= to`.
    pub fn between_cols(&self, from: usize, to: usize) -> usize {
        if from >= to {
            0
        } else {
            self.by_cols[from][to]
        }
    }

    /// Delay from the first to the last column.
    pub fn max_row_delay(&self) -> usize {
        self.between_cols(0, self.cols - 1)
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Upstream/downstream neighbour sets used by the controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionSets {
    pub horizon: usize,
    /// Turbine directly upwind (at most one).
    pub direct_upstream: Vec<Vec<usize>>,
    /// Turbine directly downwind (at most one).
    pub direct_downstream: Vec<Vec<usize>>,
    /// All same-row turbines upwind, nearest last.
    pub upstream: Vec<Vec<usize>>,
    /// All same-row turbines downwind, nearest first.
    pub downstream: Vec<Vec<usize>>,
    /// Upwind turbines whose wake reaches within the horizon.
    pub upstream_within: Vec<Vec<usize>>,
    /// Downwind turbines reached within the horizon.
    pub downstream_within: Vec<Vec<usize>>,
}

pub fn interaction_sets(
    layout: &FarmLayout,
    delays: &DelayTable,
    horizon: usize,
) -> Result<InteractionSets> {
    if horizon == 0 {
        return Err(Error::validation("horizon", "must be at least one sample"));
    }
    let g = layout.turbines();
    let mut sets = InteractionSets {
        horizon,
        direct_upstream: vec![Vec::new(); g],
        direct_downstream: vec![Vec::new(); g],
        upstream: vec![Vec::new(); g],
        downstream: vec![Vec::new(); g],
        upstream_within: vec![Vec::new(); g],
        downstream_within: vec![Vec::new(); g],
    };
    for i in 0..g {
        let row = layout.row(i);
        for j in layout.row_members(row) {
            if j < i {
                sets.upstream[i].push(j);
                if delays.get(j, i).unwrap() <= horizon {
                    sets.upstream_within[i].push(j);
                }
            } else if j > i {
                sets.downstream[i].push(j);
                if delays.get(i, j).unwrap() <= horizon {
                    sets.downstream_within[i].push(j);
                }
            }
        }
        if !layout.is_most_upwind(i) {
            sets.direct_upstream[i].push(i - 1);
        }
        if layout.col(i) + 1 < layout.cols() {
            sets.direct_downstream[i].push(i + 1);
        }
    }
    Ok(sets)
}
