//! Spatial randomisation grid and the uniform time grid.

use crate::error::{Error, Result};

/// Discretisation of the randomisation space: the unit interval split into
/// uniform cells, each carrying an equal share of the reference mass.
///
/// The cell count bounds how many distinct atoms a randomised control can
/// express; it is the randomisation resolution of the whole engine.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityGrid {
    n_cells: usize,
    cell_mass: Vec<f64>,
    cell_repr: Vec<f64>,
}

impl IntensityGrid {
    /// Uniform grid: mass `1/n` per cell, representatives at cell midpoints.
    pub fn uniform(n_cells: usize) -> Result<Self> {
        if n_cells == 0 {
            return Err(Error::InvalidArgument("n_cells must be >= 1".into()));
        }
        let mass = 1.0 / n_cells as f64;
        let cell_mass = vec![mass; n_cells];
        let cell_repr = (0..n_cells)
            .map(|j| (j as f64 + 0.5) / n_cells as f64)
            .collect();
        Ok(IntensityGrid {
            n_cells,
            cell_mass,
            cell_repr,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn mass(&self, cell: usize) -> f64 {
        self.cell_mass[cell]
    }

    pub fn masses(&self) -> &[f64] {
        &self.cell_mass
    }

    pub fn repr(&self, cell: usize) -> f64 {
        self.cell_repr[cell]
    }

    pub fn reprs(&self) -> &[f64] {
        &self.cell_repr
    }

    /// Total mass of a cell subset.
    pub fn mass_of(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&j| self.cell_mass[j]).sum()
    }
}

/// Uniform grid on `[0, T]` with `n_steps` steps of width `dt = T / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if horizon.is_nan() || horizon <= 0.0 || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// The i-th grid point; the last one is exactly the horizon.
    pub fn t(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// Index of the last grid point `<= time` (clamped to the grid).
    pub fn index_at(&self, time: f64) -> usize {
        let i = (time / self.dt()).floor() as isize;
        i.clamp(0, self.n_steps as isize) as usize
    }
}
