//! Patch-grid geometry and diagonal adjacency targets.
//!
//! A square image of side `h_in` is cut into `h × h` square patches; node `i`
//! sits at the center of patch `(i mod h, i div h)`. A node belongs to a box's
//! diagonal when its center lies within `δ` (half a patch diagonal) of the
//! diagonal segment. Hard targets connect pairs of members; soft targets use
//! the membership weight `φ = exp(-d / 2σ²)` with `σ = αδ/√2`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::linalg::Matrix;

/// Relative slack on the `d ≤ δ` test. Node centers that sit exactly at
/// distance `δ` (common on regular grids) must not flip on rounding.
pub const MEMBERSHIP_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    h: usize,
    h_in: usize,
}

impl PatchGrid {
    pub fn new(h_in: usize, h: usize) -> Result<Self> {
        if h == 0 || h_in == 0 {
            return Err(config_err("grid sides must be positive"));
        }
        if !h_in.is_multiple_of(h) {
            return Err(config_err(format!(
                "image side {h_in} is not divisible by patch count {h}"
            )));
        }
        Ok(Self { h, h_in })
    }

    /// Patches per side.
    pub fn h(&self) -> usize {
        self.h
    }

    /// Image side in pixels.
    pub fn h_in(&self) -> usize {
        self.h_in
    }

    pub fn patch_size(&self) -> usize {
        self.h_in / self.h
    }

    pub fn nodes(&self) -> usize {
        self.h * self.h
    }

    /// Pixel coordinates `(x, y)` of node `i`'s patch center.
    pub fn node_center(&self, i: usize) -> (f64, f64) {
        let p = self.patch_size() as f64;
        (
            ((i % self.h) as f64 + 0.5) * p,
            ((i / self.h) as f64 + 0.5) * p,
        )
    }
}

/// Axis-aligned box in pixel corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: u32) -> Result<Self> {
        let b = Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
        };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite corners {b:?}")));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidBox(format!("degenerate corners {b:?}")));
        }
        Ok(b)
    }

    /// Rejects boxes with a corner outside `[0, side]`.
    pub fn check_within(&self, side: f64) -> Result<()> {
        let inside = |v: f64| (0.0..=side).contains(&v);
        if inside(self.x1) && inside(self.y1) && inside(self.x2) && inside(self.y2) {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?} outside [0, {side}]")))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Endpoints of the chosen diagonal. `Both` has no single segment and
    /// yields the main diagonal.
    pub fn diagonal_segment(&self, diagonal: Diagonal) -> ((f64, f64), (f64, f64)) {
        match diagonal {
            Diagonal::Anti => ((self.x2, self.y1), (self.x1, self.y2)),
            Diagonal::Main | Diagonal::Both => ((self.x1, self.y1), (self.x2, self.y2)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Diagonal {
    /// Top-left to bottom-right.
    #[default]
    Main,
    /// Top-right to bottom-left.
    Anti,
    /// Union of both diagonals' memberships.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetMode {
    Hard,
    #[default]
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagTargets {
    pub a_diag: Matrix,
    pub a_perp: Matrix,
    pub mode: TargetMode,
    /// Relaxation parameter, present for soft targets.
    pub alpha: Option<f64>,
}

/// Half of a patch's diagonal: `(h_in / 2h)·√2`.
pub fn threshold_delta(grid: &PatchGrid) -> f64 {
    (grid.h_in() as f64 / (2.0 * grid.h() as f64)) * core::f64::consts::SQRT_2
}

pub fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    libm::hypot(p.0 - cx, p.1 - cy)
}

/// Distance from node `node`'s center to the box diagonal segment. With
/// [`Diagonal::Both`] the nearer of the two diagonals is used.
pub fn diag_distance(grid: &PatchGrid, bbox: &BBox, node: usize, diagonal: Diagonal) -> f64 {
    let p = grid.node_center(node);
    match diagonal {
        Diagonal::Main | Diagonal::Anti => {
            let (a, b) = bbox.diagonal_segment(diagonal);
            point_segment_distance(p, a, b)
        }
        Diagonal::Both => {
            let (a, b) = bbox.diagonal_segment(Diagonal::Main);
            let (c, d) = bbox.diagonal_segment(Diagonal::Anti);
            point_segment_distance(p, a, b).min(point_segment_distance(p, c, d))
        }
    }
}

/// Soft membership `exp(-d / 2σ²)` with `σ = αδ/√2`. The distance enters
/// unsquared.
pub fn soft_membership(d: f64, delta: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(config_err(format!("alpha must be positive, got {alpha}")));
    }
    if !(delta > 0.0) {
        return Err(config_err(format!("delta must be positive, got {delta}")));
    }
    let sigma = alpha * delta / core::f64::consts::SQRT_2;
    Ok(libm::exp(-d / (2.0 * sigma * sigma)))
}

pub fn is_member(d: f64, delta: f64) -> bool {
    d <= delta * (1.0 + MEMBERSHIP_REL_TOL)
}

fn hard_membership(grid: &PatchGrid, bbox: &BBox, diagonal: Diagonal) -> Vec<f64> {
    let delta = threshold_delta(grid);
    (0..grid.nodes())
        .map(|i| {
            if is_member(diag_distance(grid, bbox, i, diagonal), delta) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn soft_membership_vec(
    grid: &PatchGrid,
    bbox: &BBox,
    alpha: f64,
    diagonal: Diagonal,
) -> Result<Vec<f64>> {
    let delta = threshold_delta(grid);
    (0..grid.nodes())
        .map(|i| soft_membership(diag_distance(grid, bbox, i, diagonal), delta, alpha))
        .collect()
}

/// Composes per-box memberships: `max_b m_i m_j` and `min_b (1-m_i)(1-m_j)`.
fn compose(n: usize, memberships: &[Vec<f64>]) -> (Matrix, Matrix) {
    let mut a_diag = Matrix::zeros(n, n);
    let mut a_perp = Matrix::filled(n, n, 1.0);
    for m in memberships {
        for i in 0..n {
            let mi = m[i];
            let di = a_diag.row_mut(i);
            for (j, v) in di.iter_mut().enumerate() {
                *v = v.max(mi * m[j]);
            }
            let pi = a_perp.row_mut(i);
            for (j, v) in pi.iter_mut().enumerate() {
                *v = v.min((1.0 - mi) * (1.0 - m[j]));
            }
        }
    }
    (a_diag, a_perp)
}

fn check_boxes(grid: &PatchGrid, boxes: &[BBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::EmptyBoxes);
    }
    for b in boxes {
        b.check_within(grid.h_in() as f64)?;
    }
    Ok(())
}

pub fn build_hard_targets(
    grid: &PatchGrid,
    boxes: &[BBox],
    diagonal: Diagonal,
) -> Result<DiagTargets> {
    check_boxes(grid, boxes)?;
    let memberships: Vec<_> = boxes
        .iter()
        .map(|b| hard_membership(grid, b, diagonal))
        .collect();
    let (a_diag, a_perp) = compose(grid.nodes(), &memberships);
    Ok(DiagTargets {
        a_diag,
        a_perp,
        mode: TargetMode::Hard,
        alpha: None,
    })
}

pub fn build_soft_targets(
    grid: &PatchGrid,
    boxes: &[BBox],
    alpha: f64,
    diagonal: Diagonal,
) -> Result<DiagTargets> {
    check_boxes(grid, boxes)?;
    let memberships = boxes
        .iter()
        .map(|b| soft_membership_vec(grid, b, alpha, diagonal))
        .collect::<Result<Vec<_>>>()?;
    let (a_diag, a_perp) = compose(grid.nodes(), &memberships);
    Ok(DiagTargets {
        a_diag,
        a_perp,
        mode: TargetMode::Soft,
        alpha: Some(alpha),
    })
}

/// Dispatches on `mode`; `alpha` is ignored for hard targets.
pub fn build_targets(
    grid: &PatchGrid,
    boxes: &[BBox],
    mode: TargetMode,
    alpha: f64,
    diagonal: Diagonal,
) -> Result<DiagTargets> {
    match mode {
        TargetMode::Hard => build_hard_targets(grid, boxes, diagonal),
        TargetMode::Soft => build_soft_targets(grid, boxes, alpha, diagonal),
    }
}

/// Divides each row by its sum; zero rows stay zero.
pub fn degree_normalize(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let deg: f64 = row.iter().sum();
        if deg > 0.0 {
            row.iter_mut().for_each(|v| *v /= deg);
        }
    }
    out
}
