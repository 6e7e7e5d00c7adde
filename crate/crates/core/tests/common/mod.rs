//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use topoguide::fea::*;

/// Closed-form unit-square Q4 plane-stress stiffness (classic 99-line layout).
pub fn analytic_ke(e: f64, nu: f64) -> DMatrix<f64> {
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    let idx = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    DMatrix::from_fn(8, 8, |i, j| e / (1.0 - nu * nu) * k[idx[i][j]])
}

pub fn clamp_left(d: &GridDomain) -> BoundaryCondition {
    let mut fixed = Vec::new();
    for iy in 0..=d.ny {
        for axis in [Axis::X, Axis::Y] {
            fixed.push(Dof { node: d.node(0, iy), axis });
        }
    }
    BoundaryCondition::new(0, fixed)
}

/// Dense assembly and reduced solve, independent of the banded path.
pub fn dense_solve(
    d: &GridDomain,
    bc: &BoundaryCondition,
    loads: &[Load],
    dens: &[f64],
    p: f64,
) -> (DVector<f64>, f64) {
    let n = d.n_dofs();
    let ke = analytic_ke(1.0, d.material.nu);
    let mut k = DMatrix::zeros(n, n);
    for ey in 0..d.ny {
        for ex in 0..d.nx {
            let x = dens[ey * d.nx + ex];
            let e = d.material.e_min + x.powf(p) * (d.material.e0 - d.material.e_min);
            let dofs = d.element_dofs(ex, ey);
            for i in 0..8 {
                for j in 0..8 {
                    k[(dofs[i], dofs[j])] += e * ke[(i, j)];
                }
            }
        }
    }
    let mut f = DVector::zeros(n);
    for l in loads {
        f[2 * l.node] += l.fx;
        f[2 * l.node + 1] += l.fy;
    }
    let fixed: Vec<usize> = bc.fixed.iter().map(|d| d.index()).collect();
    let free: Vec<usize> = (0..n).filter(|i| !fixed.contains(i)).collect();
    let kr = DMatrix::from_fn(free.len(), free.len(), |i, j| k[(free[i], free[j])]);
    let fr = DVector::from_fn(free.len(), |i, _| f[free[i]]);
    let ur = kr.clone().lu().solve(&fr).unwrap();
    let mut u = DVector::zeros(n);
    for (i, &g) in free.iter().enumerate() {
        u[g] = ur[i];
    }
    let c = u.dot(&(&k * &u));
    (u, c)
}
