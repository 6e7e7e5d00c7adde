//! SIMP compliance minimization with a sensitivity filter and
//! optimality-criteria updates.

use crate::error::{CoreError, Result};
use crate::fea::{solve_fea, BoundaryCondition, GridDomain, Load, Topology};
use crate::problem::ProblemSpec;

/// Smallest density the OC update may assign; keeps multiplicative updates
/// able to regrow material.
pub const DENSITY_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimpParams {
    pub penal: f64,
    pub filter_radius: f64,
    pub move_limit: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest density change of one update.
    pub tol: f64,
}

impl Default for SimpParams {
    fn default() -> Self {
        Self { penal: 3.0, filter_radius: 1.5, move_limit: 0.2, max_iters: 100, tol: 0.01 }
    }
}

impl SimpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.penal > 1.0)
            || !(self.filter_radius >= 1.0)
            || !(self.move_limit > 0.0 && self.move_limit <= 1.0)
            || !(self.tol > 0.0)
        {
            return Err(CoreError::Invalid(format!("bad SIMP parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimpResult {
    pub topology: Topology,
    /// Compliance of every evaluated design; the last entry belongs to the
    /// returned densities.
    pub history: Vec<f64>,
    /// `false` when the iteration cap was hit before the change tolerance.
    pub converged: bool,
}

impl SimpResult {
    pub fn compliance(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

/// `dC/dx_e = -p x_e^(p-1) (E0 - E_min) u_e^T k0 u_e`.
pub fn sensitivity(
    domain: &GridDomain,
    bc: &BoundaryCondition,
    loads: &[Load],
    densities: &[f64],
    penal: f64,
) -> Result<Vec<f64>> {
    let sol = solve_fea(domain, bc, loads, densities, penal)?;
    Ok(raw_sensitivity(domain, &sol.element_energy, densities, penal))
}

fn raw_sensitivity(domain: &GridDomain, energy: &[f64], x: &[f64], penal: f64) -> Vec<f64> {
    let m = domain.material;
    x.iter().zip(energy).map(|(&xe, &ee)| -penal * xe.powf(penal - 1.0) * (m.e0 - m.e_min) * ee.max(0.0)).collect()
}

/// Linear hat-weight smoothing: each output is a convex combination of the
/// inputs within `radius` (centre distance), weights `radius - dist`.
#[derive(Clone, Debug)]
pub struct SensitivityFilter {
    neighbours: Vec<Vec<(usize, f64)>>,
}

impl SensitivityFilter {
    pub fn new(nx: usize, ny: usize, radius: f64) -> Self {
        let reach = radius.ceil() as isize;
        let mut neighbours = Vec::with_capacity(nx * ny);
        for ey in 0..ny as isize {
            for ex in 0..nx as isize {
                let mut row = Vec::new();
                for fy in (ey - reach).max(0)..(ey + reach + 1).min(ny as isize) {
                    for fx in (ex - reach).max(0)..(ex + reach + 1).min(nx as isize) {
                        let dist = (((ex - fx).pow(2) + (ey - fy).pow(2)) as f64).sqrt();
                        let w = radius - dist;
                        if w > 0.0 {
                            row.push(((fy * nx as isize + fx) as usize, w));
                        }
                    }
                }
                let total: f64 = row.iter().map(|r| r.1).sum();
                for r in &mut row {
                    r.1 /= total;
                }
                neighbours.push(row);
            }
        }
        Self { neighbours }
    }

    pub fn weights(&self, element: usize) -> &[(usize, f64)] {
        &self.neighbours[element]
    }

    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        self.neighbours.iter().map(|row| row.iter().map(|&(f, w)| w * field[f]).sum()).collect()
    }
}

/// Optimality-criteria update; bisects the Lagrange multiplier (in log
/// space) until the mean density matches `volfrac`.
fn oc_update(x: &[f64], dc: &[f64], volfrac: f64, move_limit: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let candidate = |lambda: f64| -> Vec<f64> {
        x.iter()
            .zip(dc)
            .map(|(&xe, &g)| {
                let lo = (xe - move_limit).max(DENSITY_FLOOR);
                let hi = (xe + move_limit).min(1.0);
                (xe * ((-g).max(0.0) / lambda).sqrt()).clamp(lo, hi)
            })
            .collect()
    };
    let (mut lo, mut hi) = (-100.0f64, 100.0f64);
    let mut best = candidate(1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        best = candidate(mid.exp());
        let mean = best.iter().sum::<f64>() / n;
        if (mean - volfrac).abs() < 1e-7 {
            break;
        }
        if mean > volfrac {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

pub fn optimize(problem: &ProblemSpec, params: &SimpParams) -> Result<SimpResult> {
    params.validate()?;
    let domain = problem.domain()?;
    if problem.loads.iter().all(|l| l.fx == 0.0 && l.fy == 0.0) {
        return Err(CoreError::Invalid("SIMP needs a nonzero load".into()));
    }
    let v = problem.volfrac;
    if !(v > 0.0) {
        return Err(CoreError::Invalid(format!("volume fraction {v}")));
    }
    let (nx, ny) = (domain.nx, domain.ny);
    if v >= 1.0 {
        let x = vec![1.0; nx * ny];
        let sol = solve_fea(&domain, &problem.bc, &problem.loads, &x, params.penal)?;
        return Ok(SimpResult { topology: Topology::new(nx, ny, x)?, history: vec![sol.compliance], converged: true });
    }
    let filter = SensitivityFilter::new(nx, ny, params.filter_radius);
    let mut x = vec![v; nx * ny];
    let mut history = Vec::new();
    let mut change = f64::INFINITY;
    let mut iter = 0;
    let converged = loop {
        let sol = solve_fea(&domain, &problem.bc, &problem.loads, &x, params.penal)?;
        history.push(sol.compliance);
        if change < params.tol {
            break true;
        }
        if iter == params.max_iters {
            break false;
        }
        let dc = raw_sensitivity(&domain, &sol.element_energy, &x, params.penal);
        let next = oc_update(&x, &filter.apply(&dc), v, params.move_limit);
        change = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        iter += 1;
    };
    Ok(SimpResult { topology: Topology::new(nx, ny, x)?, history, converged })
}
