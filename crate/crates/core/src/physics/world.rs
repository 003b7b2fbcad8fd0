use nalgebra::Vector3;

use super::{PhysicsError, Result};
use crate::grid::ScalarGrid;
use crate::param::TerrainParam;

/// One realization of all five terrain maps on a shared grid.
///
/// Cell `(row, col)` is centered at
/// `(origin[0] + (col + 0.5) * cell, origin[1] + (row + 0.5) * cell)`, so rows
/// run along world y and columns along world x.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelSample {
    geom: ScalarGrid,
    height: ScalarGrid,
    stiffness: ScalarGrid,
    damping: ScalarGrid,
    friction: ScalarGrid,
    origin: [f64; 2],
}

impl WorldModelSample {
    pub fn new(
        geom: ScalarGrid,
        height: ScalarGrid,
        stiffness: ScalarGrid,
        damping: ScalarGrid,
        friction: ScalarGrid,
        origin: [f64; 2],
    ) -> Result<Self> {
        let (rows, cols) = geom.shape();
        for (name, g) in [("height", &height), ("stiffness", &stiffness), ("damping", &damping), ("friction", &friction)] {
            g.ensure_shape(rows, cols)?;
            if g.cell_size() != geom.cell_size() {
                return Err(PhysicsError::World(format!("{name} cell size differs from geom")));
            }
        }
        for (name, g) in [("stiffness", &stiffness), ("damping", &damping), ("friction", &friction)] {
            if let Some(v) = g.values().iter().find(|v| **v < 0.0) {
                return Err(PhysicsError::World(format!("{name} must be non-negative, found {v}")));
            }
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(PhysicsError::World("origin must be finite".into()));
        }
        Ok(Self {
            geom,
            height,
            stiffness,
            damping,
            friction,
            origin,
        })
    }

    /// Builds a world from maps in [`TerrainParam::ALL`] order.
    pub fn from_maps(maps: [ScalarGrid; 5], origin: [f64; 2]) -> Result<Self> {
        let [geom, height, stiffness, damping, friction] = maps;
        Self::new(geom, height, stiffness, damping, friction, origin)
    }

    /// Level ground at height zero with uniform material properties.
    pub fn flat(rows: usize, cols: usize, cell: f64, origin: [f64; 2], stiffness: f64, damping: f64, friction: f64) -> Result<Self> {
        let z = ScalarGrid::zeros(rows, cols, cell)?;
        Self::new(
            z.clone(),
            z,
            ScalarGrid::filled(rows, cols, cell, stiffness)?,
            ScalarGrid::filled(rows, cols, cell, damping)?,
            ScalarGrid::filled(rows, cols, cell, friction)?,
            origin,
        )
    }

    pub fn grid(&self, param: TerrainParam) -> &ScalarGrid {
        match param {
            TerrainParam::Geom => &self.geom,
            TerrainParam::Height => &self.height,
            TerrainParam::Stiffness => &self.stiffness,
            TerrainParam::Damping => &self.damping,
            TerrainParam::Friction => &self.friction,
        }
    }

    pub fn geom(&self) -> &ScalarGrid {
        &self.geom
    }

    pub fn height(&self) -> &ScalarGrid {
        &self.height
    }

    pub fn stiffness(&self) -> &ScalarGrid {
        &self.stiffness
    }

    pub fn damping(&self) -> &ScalarGrid {
        &self.damping
    }

    pub fn friction(&self) -> &ScalarGrid {
        &self.friction
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub(super) fn weights(&self, x: f64, y: f64) -> Result<Bilinear> {
        Bilinear::new(&self.height, self.origin, x, y)
    }

    pub(super) fn height_and_normal(&self, x: f64, y: f64) -> Result<(f64, Vector3<f64>)> {
        terrain_sample(&self.height, self.origin, x, y)
    }
}

/// Bilinear interpolation weights between the four nearest cell centers.
/// Queries between the outermost centers and the grid edge reuse the edge
/// values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    idx: [usize; 4],
    w: [f64; 4],
}

impl Bilinear {
    pub fn new(grid: &ScalarGrid, origin: [f64; 2], x: f64, y: f64) -> Result<Self> {
        let (rows, cols) = grid.shape();
        let cell = grid.cell_size();
        let fx = (x - origin[0]) / cell;
        let fy = (y - origin[1]) / cell;
        if !(fx >= 0.0 && fx <= cols as f64 && fy >= 0.0 && fy <= rows as f64) {
            return Err(PhysicsError::OutOfExtent { x, y });
        }
        Ok(Self::clamped(rows, cols, fx - 0.5, fy - 0.5))
    }

    /// `u`, `v` are column and row coordinates in cell-center units.
    fn clamped(rows: usize, cols: usize, u: f64, v: f64) -> Self {
        let u = u.clamp(0.0, (cols - 1) as f64);
        let v = v.clamp(0.0, (rows - 1) as f64);
        let c0 = (u.floor() as usize).min(cols.saturating_sub(2));
        let r0 = (v.floor() as usize).min(rows.saturating_sub(2));
        let c1 = (c0 + 1).min(cols - 1);
        let r1 = (r0 + 1).min(rows - 1);
        let tu = u - c0 as f64;
        let tv = v - r0 as f64;
        Self {
            idx: [r0 * cols + c0, r0 * cols + c1, r1 * cols + c0, r1 * cols + c1],
            w: [(1.0 - tu) * (1.0 - tv), tu * (1.0 - tv), (1.0 - tu) * tv, tu * tv],
        }
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.idx.iter().zip(&self.w).map(|(&i, w)| values[i] * w).sum()
    }
}

/// Interpolated value and upward unit normal of the surface `grid` at world
/// `(x, y)`. The normal comes from central differences one cell apart.
pub fn terrain_sample(grid: &ScalarGrid, origin: [f64; 2], x: f64, y: f64) -> Result<(f64, Vector3<f64>)> {
    let value = Bilinear::new(grid, origin, x, y)?.apply(grid.values());
    let (rows, cols) = grid.shape();
    let cell = grid.cell_size();
    let u = (x - origin[0]) / cell - 0.5;
    let v = (y - origin[1]) / cell - 0.5;
    let at = |du: f64, dv: f64| Bilinear::clamped(rows, cols, u + du, v + dv).apply(grid.values());
    let gx = (at(1.0, 0.0) - at(-1.0, 0.0)) / (2.0 * cell);
    let gy = (at(0.0, 1.0) - at(0.0, -1.0)) / (2.0 * cell);
    Ok((value, Vector3::new(-gx, -gy, 1.0).normalize()))
}
