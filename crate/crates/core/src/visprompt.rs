//! Referring inputs and their rasterized forms on the visual-token grid.
//!
//! Coordinates are normalized to `[0, 1]²` with `x` running along columns
//! and `y` along rows. Cell `(row, col)` of a `g × g` grid has its center at
//! `((col + ½)/g, (row + ½)/g)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Default Gaussian width for soft maps, in normalized units.
pub const DEFAULT_SIGMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VisualPrompt {
    Box { coords: [f64; 4] },
    Mask { grid: Vec<Vec<u8>> },
    Scribble { points: Vec<[f64; 2]> },
    Point { point: [f64; 2] },
}

impl VisualPrompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            VisualPrompt::Box { .. } => PromptKind::Box,
            VisualPrompt::Mask { .. } => PromptKind::Mask,
            VisualPrompt::Scribble { .. } => PromptKind::Scribble,
            VisualPrompt::Point { .. } => PromptKind::Point,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPrompt(m));
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        match self {
            VisualPrompt::Box { coords: [x0, y0, x1, y1] } => {
                if ![x0, y0, x1, y1].iter().all(|v| in_unit(**v)) {
                    return bad(format!("box coordinates outside [0,1]: {:?}", [x0, y0, x1, y1]));
                }
                if !(x0 < x1 && y0 < y1) {
                    return bad("box needs x0 < x1 and y0 < y1".into());
                }
            }
            VisualPrompt::Mask { grid } => {
                let n = grid.len();
                if n == 0 || grid.iter().any(|r| r.len() != n) {
                    return bad("mask grid must be square and non-empty".into());
                }
                if grid.iter().flatten().any(|&v| v > 1) {
                    return bad("mask cells must be 0 or 1".into());
                }
                if !grid.iter().flatten().any(|&v| v == 1) {
                    return bad("mask has no set cell".into());
                }
            }
            VisualPrompt::Scribble { points } => {
                if points.is_empty() {
                    return bad("scribble has no points".into());
                }
                if !points.iter().flatten().all(|v| in_unit(*v)) {
                    return bad("scribble point outside [0,1]".into());
                }
            }
            VisualPrompt::Point { point } => {
                if !point.iter().all(|v| in_unit(*v)) {
                    return bad("point outside [0,1]".into());
                }
            }
        }
        Ok(())
    }

    /// The prompt's points, for the kinds that have them.
    pub fn points(&self) -> Option<Vec<[f64; 2]>> {
        match self {
            VisualPrompt::Scribble { points } => Some(points.clone()),
            VisualPrompt::Point { point } => Some(vec![*point]),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Box,
    Mask,
    Scribble,
    Point,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [PromptKind::Box, PromptKind::Mask, PromptKind::Scribble, PromptKind::Point];

    /// Boxes and masks define a region; scribbles and points do not.
    pub fn is_region(self) -> bool {
        matches!(self, PromptKind::Box | PromptKind::Mask)
    }
}

/// Binary `g × g` region, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    grid: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid * grid {
            return Err(Error::Shape {
                op: "RegionMask::new",
                left: vec![grid, grid],
                right: vec![cells.len()],
            });
        }
        if !cells.iter().any(|&c| c) {
            return Err(Error::EmptyRegion);
        }
        Ok(Self { grid, cells })
    }

    pub fn full(grid: usize) -> Self {
        Self {
            grid,
            cells: vec![true; grid * grid],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Indicator weights (1 inside, 0 outside).
    pub fn indicator(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Flat indices of set cells.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i]).collect()
    }

    pub fn to_prompt(&self) -> VisualPrompt {
        VisualPrompt::Mask {
            grid: self
                .cells
                .chunks(self.grid)
                .map(|r| r.iter().map(|&c| c as u8).collect())
                .collect(),
        }
    }
}

pub fn cell_center(grid: usize, row: usize, col: usize) -> [f64; 2] {
    let g = grid as f64;
    [(col as f64 + 0.5) / g, (row as f64 + 0.5) / g]
}

fn cell_of(grid: usize, p: [f64; 2]) -> usize {
    let g = grid as f64;
    let col = ((p[0] * g).floor() as usize).min(grid - 1);
    let row = ((p[1] * g).floor() as usize).min(grid - 1);
    row * grid + col
}

/// Converts a prompt to a hard mask. Boxes keep the cells whose centers lie
/// inside (edges included); masks pass through; scribbles and points mark
/// the cells that contain a prompt point.
pub fn rasterize(prompt: &VisualPrompt, grid: usize) -> Result<RegionMask> {
    prompt.validate()?;
    let mut cells = vec![false; grid * grid];
    match prompt {
        VisualPrompt::Box { coords: [x0, y0, x1, y1] } => {
            for row in 0..grid {
                for col in 0..grid {
                    let [cx, cy] = cell_center(grid, row, col);
                    cells[row * grid + col] = *x0 <= cx && cx <= *x1 && *y0 <= cy && cy <= *y1;
                }
            }
        }
        VisualPrompt::Mask { grid: m } => {
            if m.len() != grid {
                return Err(Error::InvalidPrompt(format!(
                    "mask is {0}x{0}, model grid is {grid}x{grid}",
                    m.len()
                )));
            }
            for (row, r) in m.iter().enumerate() {
                for (col, &v) in r.iter().enumerate() {
                    cells[row * grid + col] = v == 1;
                }
            }
        }
        VisualPrompt::Scribble { .. } | VisualPrompt::Point { .. } => {
            for p in prompt.points().unwrap_or_default() {
                cells[cell_of(grid, p)] = true;
            }
        }
    }
    RegionMask::new(grid, cells)
}

/// Exact Euclidean distance, in normalized units, from every cell center to
/// the nearest prompt point. Output `[g, g]`.
pub fn distance_transform(prompt: &VisualPrompt, grid: usize) -> Result<Tensor> {
    prompt.validate()?;
    let points = prompt
        .points()
        .ok_or_else(|| Error::InvalidPrompt("distance transform needs a scribble or point".into()))?;
    distance_transform_points(&points, grid)
}

pub fn distance_transform_points(points: &[[f64; 2]], grid: usize) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::InvalidPrompt("no prompt points".into()));
    }
    let mut d = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let [cx, cy] = cell_center(grid, row, col);
            let best = points
                .iter()
                .map(|p| {
                    let (dx, dy) = (p[0] - cx, p[1] - cy);
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min);
            d.push(best.sqrt());
        }
    }
    Tensor::new(vec![grid, grid], d)
}

/// Gaussian weights over the grid derived from a distance map.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftWeightMap {
    pub weights: Tensor,
    pub sigma: f64,
    /// Peak-normalized weights lie in `(0, 1]`; raw ones are the Gaussian pdf.
    pub normalized: bool,
}

impl SoftWeightMap {
    pub fn grid(&self) -> usize {
        self.weights.cols()
    }
}

/// `wᵢ = exp(−Dᵢ²/2σ²) / (√(2π)·σ)`, optionally divided by its peak value
/// `1/(√(2π)·σ)`.
pub fn soft_weight_map(distances: &Tensor, sigma: f64, normalized: bool) -> Result<SoftWeightMap> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    if distances.data().iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::InvalidConfig("distances must be non-negative".into()));
    }
    let peak = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let weights = distances.map(|d| {
        let e = (-(d * d) / (2.0 * sigma * sigma)).exp();
        if normalized {
            e
        } else {
            e * peak
        }
    });
    Ok(SoftWeightMap {
        weights,
        sigma,
        normalized,
    })
}
