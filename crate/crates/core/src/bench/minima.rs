//! Detection of spurious local minima of the composite energy
//! `E(x) = -Σ_j r_j(x)`.

use serde::{Deserialize, Serialize};

use super::landscape::{lattice_point, Bounds, Resolution};
use crate::rewards::RewardSet;
use crate::{Error, Result, Vec2};

/// Finite-difference step for Hessians of the analytic gradient.
const HESSIAN_STEP: f64 = 1e-4;
/// Newton / gradient refinement steps from each candidate cell.
pub const REFINE_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpuriousMinimum {
    pub point: Vec2,
    pub energy: f64,
    pub grad_norm: f64,
    /// Eigenvalues of the finite-difference Hessian, ascending.
    pub hessian_eigenvalues: [f64; 2],
}

/// `∇E` from the analytic reward gradients.
pub fn energy_grad(set: &RewardSet, x: Vec2) -> Vec2 {
    -Vec2::sum(&set.composite_value_grad(x).1)
}

/// Symmetrized central-difference Hessian of `E`, from the analytic
/// gradient.
pub fn energy_hessian(set: &RewardSet, x: Vec2) -> [[f64; 2]; 2] {
    let h = HESSIAN_STEP;
    let dx = (energy_grad(set, x + Vec2::new(h, 0.0)) - energy_grad(set, x - Vec2::new(h, 0.0))) * (0.5 / h);
    let dy = (energy_grad(set, x + Vec2::new(0.0, h)) - energy_grad(set, x - Vec2::new(0.0, h))) * (0.5 / h);
    let off = 0.5 * (dx.y() + dy.x());
    [[dx.x(), off], [off, dy.y()]]
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym_eigenvalues(m: [[f64; 2]; 2]) -> [f64; 2] {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let r = (0.5 * (m[0][0] - m[1][1])).hypot(m[0][1]);
    [mean - r, mean + r]
}

/// Damped Newton descent on `E`, falling back to gradient steps where the
/// Hessian is not positive definite.
fn refine(set: &RewardSet, start: Vec2, max_step: f64) -> Vec2 {
    let mut x = start;
    for _ in 0..REFINE_STEPS {
        let g = energy_grad(set, x);
        if g.norm() == 0.0 {
            break;
        }
        let h = energy_hessian(set, x);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let newton = if h[0][0] > 0.0 && det > 0.0 {
            Vec2::new((h[1][1] * g.x() - h[0][1] * g.y()) / det, (h[0][0] * g.y() - h[1][0] * g.x()) / det)
        } else {
            g * (max_step / g.norm())
        };
        let mut step = -newton.clip_norm(max_step);
        let e0 = set.value(x);
        // backtrack until the energy -Σr does not increase
        let mut accepted = false;
        for _ in 0..30 {
            if -set.value(x + step) <= -e0 {
                accepted = true;
                break;
            }
            step = step * 0.5;
        }
        if !accepted {
            break;
        }
        x += step;
    }
    x
}

/// Stable equilibria of `E` away from every known optimum. Candidates are
/// lattice nodes not exceeded by any of their eight neighbours; each is
/// refined by local descent and kept when its gradient norm is below
/// `grad_tol`, its Hessian is positive definite, and it lies farther than
/// `exclusion_radius` from each known optimum. Refined points closer than
/// one cell diagonal are merged.
pub fn find_spurious_minima(
    set: &RewardSet,
    bounds: Bounds,
    resolution: Resolution,
    grad_tol: f64,
    known_optima: &[Vec2],
    exclusion_radius: f64,
) -> Result<Vec<SpuriousMinimum>> {
    bounds.validate()?;
    if resolution.nx < 3 || resolution.ny < 3 {
        return Err(Error::Config("minimum search needs at least a 3x3 lattice".into()));
    }
    let cell = Vec2::new(
        (bounds.xmax - bounds.xmin) / (resolution.nx - 1) as f64,
        (bounds.ymax - bounds.ymin) / (resolution.ny - 1) as f64,
    );
    let diag = cell.norm();
    if !(diag < exclusion_radius) {
        return Err(Error::Config("lattice cells must be smaller than the exclusion radius".into()));
    }
    let energy: Vec<f64> = (0..resolution.ny)
        .flat_map(|iy| (0..resolution.nx).map(move |ix| (ix, iy)))
        .map(|(ix, iy)| -set.value(lattice_point(&bounds, resolution, ix, iy)))
        .collect();
    let at = |ix: usize, iy: usize| energy[iy * resolution.nx + ix];
    let mut found: Vec<SpuriousMinimum> = Vec::new();
    for iy in 1..resolution.ny - 1 {
        for ix in 1..resolution.nx - 1 {
            let e = at(ix, iy);
            let is_min = (-1i64..=1)
                .flat_map(|dy| (-1i64..=1).map(move |dx| (dx, dy)))
                .filter(|&d| d != (0, 0))
                .all(|(dx, dy)| at((ix as i64 + dx) as usize, (iy as i64 + dy) as usize) >= e);
            if !is_min {
                continue;
            }
            let x = refine(set, lattice_point(&bounds, resolution, ix, iy), diag);
            let grad_norm = energy_grad(set, x).norm();
            if !(grad_norm < grad_tol) {
                continue;
            }
            let eig = sym_eigenvalues(energy_hessian(set, x));
            if !(eig[0] > 0.0) {
                continue;
            }
            if known_optima.iter().any(|o| (x - *o).norm() <= exclusion_radius) {
                continue;
            }
            if found.iter().any(|m| (m.point - x).norm() < diag) {
                continue;
            }
            found.push(SpuriousMinimum {
                point: x,
                energy: -set.value(x),
                grad_norm,
                hessian_eigenvalues: eig,
            });
        }
    }
    Ok(found)
}
