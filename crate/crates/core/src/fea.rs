//! Plane-stress linear elasticity on a regular grid of unit square
//! bilinear quadrilaterals.
//!
//! Grid conventions used across the crate:
//!
//! * elements are indexed row-major, `e = ey * nx + ex`, with row `ey = 0`
//!   at the top of the image;
//! * nodes are indexed row-major, `n = iy * (nx + 1) + ix`;
//! * node `(ix, iy)` sits at coordinates `x = ix`, `y = iy`, so the y axis
//!   points down the image rows;
//! * dof `2n` is the x displacement of node `n` and `2n + 1` its y
//!   displacement.
//!
//! Element-local node order is `(ex, ey)`, `(ex+1, ey)`, `(ex+1, ey+1)`,
//! `(ex, ey+1)`.

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub e0: f64,
    pub nu: f64,
    pub e_min: f64,
}

impl Default for Material {
    fn default() -> Self {
        Self { e0: 1.0, nu: 0.3, e_min: 1e-9 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridDomain {
    pub nx: usize,
    pub ny: usize,
    pub material: Material,
}

impl GridDomain {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        Self::with_material(nx, ny, Material::default())
    }

    pub fn with_material(nx: usize, ny: usize, material: Material) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(CoreError::Invalid(format!("grid {nx}x{ny} has no elements")));
        }
        let m = material;
        if !(m.nu > 0.0 && m.nu < 0.5) || !(m.e_min > 0.0 && m.e_min < m.e0) {
            return Err(CoreError::Invalid(format!("bad material constants {m:?}")));
        }
        Ok(Self { nx, ny, material })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn node(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn node_xy(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let (ix, iy) = self.node_xy(node);
        ix == 0 || iy == 0 || ix == self.nx || iy == self.ny
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.is_boundary_node(n)).collect()
    }

    pub fn element_nodes(&self, ex: usize, ey: usize) -> [usize; 4] {
        [self.node(ex, ey), self.node(ex + 1, ey), self.node(ex + 1, ey + 1), self.node(ex, ey + 1)]
    }

    pub fn element_dofs(&self, ex: usize, ey: usize) -> [usize; 8] {
        let n = self.element_nodes(ex, ey);
        [2 * n[0], 2 * n[0] + 1, 2 * n[1], 2 * n[1] + 1, 2 * n[2], 2 * n[2] + 1, 2 * n[3], 2 * n[3] + 1]
    }

    /// Elements sharing `node` (one to four of them).
    pub fn elements_at_node(&self, node: usize) -> Vec<usize> {
        let (ix, iy) = self.node_xy(node);
        let mut out = Vec::with_capacity(4);
        for ey in [iy.wrapping_sub(1), iy] {
            for ex in [ix.wrapping_sub(1), ix] {
                if ex < self.nx && ey < self.ny {
                    out.push(ey * self.nx + ex);
                }
            }
        }
        out
    }

    /// Element pixel a node is rasterized to in element-grid channels: the
    /// element whose top-left corner is the node, clamped at the right and
    /// bottom edges.
    pub fn node_pixel(&self, node: usize) -> usize {
        let (ix, iy) = self.node_xy(node);
        iy.min(self.ny - 1) * self.nx + ix.min(self.nx - 1)
    }

    /// SIMP-interpolated Young's modulus for density `x`.
    pub fn modulus(&self, x: f64, penal: f64) -> f64 {
        let m = self.material;
        m.e_min + x.powf(penal) * (m.e0 - m.e_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dof {
    pub node: usize,
    pub axis: Axis,
}

impl Dof {
    pub fn index(&self) -> usize {
        2 * self.node
            + match self.axis {
                Axis::X => 0,
                Axis::Y => 1,
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryCondition {
    pub scenario: usize,
    /// Sorted, without duplicates.
    pub fixed: Vec<Dof>,
}

impl BoundaryCondition {
    pub fn new(scenario: usize, mut fixed: Vec<Dof>) -> Self {
        fixed.sort();
        fixed.dedup();
        Self { scenario, fixed }
    }

    pub fn is_fixed(&self, node: usize, axis: Axis) -> bool {
        self.fixed.binary_search(&Dof { node, axis }).is_ok()
    }

    /// Whether the supports remove all three planar rigid-body modes, i.e.
    /// the rows `[1, 0, -y]` (x dofs) and `[0, 1, x]` (y dofs) have rank 3.
    pub fn removes_rigid_motion(&self, domain: &GridDomain) -> bool {
        if self.fixed.len() < 3 {
            return false;
        }
        let mut rows: Vec<[f64; 3]> = self
            .fixed
            .iter()
            .map(|d| {
                let (x, y) = domain.node_xy(d.node);
                match d.axis {
                    Axis::X => [1.0, 0.0, -(y as f64)],
                    Axis::Y => [0.0, 1.0, x as f64],
                }
            })
            .collect();
        // Gaussian elimination with partial pivoting on an m x 3 matrix.
        let mut rank = 0;
        for col in 0..3 {
            let Some(p) = (rank..rows.len()).max_by(|&a, &b| rows[a][col].abs().total_cmp(&rows[b][col].abs())) else {
                break;
            };
            if rows[p][col].abs() < 1e-9 {
                continue;
            }
            rows.swap(rank, p);
            let pivot = rows[rank];
            for r in rows.iter_mut().skip(rank + 1) {
                let f = r[col] / pivot[col];
                for c in 0..3 {
                    r[c] -= f * pivot[c];
                }
            }
            rank += 1;
        }
        rank == 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Load {
    pub node: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Load {
    pub fn loads_axis(&self, axis: Axis) -> bool {
        match axis {
            Axis::X => self.fx != 0.0,
            Axis::Y => self.fy != 0.0,
        }
    }
}

/// Per-element density field in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub nx: usize,
    pub ny: usize,
    pub densities: Vec<f64>,
}

/// Density threshold separating void from solid in binarized views.
pub const BINARY_THRESHOLD: f64 = 0.5;

impl Topology {
    pub fn new(nx: usize, ny: usize, densities: Vec<f64>) -> Result<Self> {
        if densities.len() != nx * ny {
            return Err(CoreError::Invalid(format!("{} densities for a {nx}x{ny} grid", densities.len())));
        }
        if let Some(d) = densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(CoreError::Invalid(format!("density {d} outside [0, 1]")));
        }
        Ok(Self { nx, ny, densities })
    }

    pub fn uniform(nx: usize, ny: usize, value: f64) -> Self {
        Self { nx, ny, densities: vec![value; nx * ny] }
    }

    /// Solid (`true`) where the density reaches [`BINARY_THRESHOLD`].
    pub fn solid_mask(&self) -> Vec<bool> {
        self.densities.iter().map(|&d| d >= BINARY_THRESHOLD).collect()
    }

    pub fn binarized(&self) -> Topology {
        Topology {
            nx: self.nx,
            ny: self.ny,
            densities: self.solid_mask().into_iter().map(|s| if s { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn mean_density(&self) -> f64 {
        self.densities.iter().sum::<f64>() / self.densities.len() as f64
    }
}

/// Physical conditioning fields of the fully solid domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSet {
    pub von_mises: Vec<f64>,
    pub sed: Vec<f64>,
}

pub type ElementMatrix = [[f64; 8]; 8];

/// Plane-stress constitutive matrix.
pub fn constitutive(e: f64, nu: f64) -> [[f64; 3]; 3] {
    let c = e / (1.0 - nu * nu);
    [[c, c * nu, 0.0], [c * nu, c, 0.0], [0.0, 0.0, c * (1.0 - nu) / 2.0]]
}

/// Strain-displacement matrix of the unit square element at local `(s, r)`
/// in `[0, 1]^2`. Rows are `eps_xx`, `eps_yy`, `gamma_xy`.
pub fn strain_displacement(s: f64, r: f64) -> [[f64; 8]; 3] {
    // dN/dx, dN/dy for N0=(1-s)(1-r), N1=s(1-r), N2=s r, N3=(1-s) r.
    let dx = [-(1.0 - r), 1.0 - r, r, -r];
    let dy = [-(1.0 - s), -s, s, 1.0 - s];
    let mut b = [[0.0; 8]; 3];
    for a in 0..4 {
        b[0][2 * a] = dx[a];
        b[1][2 * a + 1] = dy[a];
        b[2][2 * a] = dy[a];
        b[2][2 * a + 1] = dx[a];
    }
    b
}

/// Element stiffness of a unit square with modulus `e`, integrated with
/// 2x2 Gauss points (exact for the bilinear element).
pub fn element_stiffness(e: f64, nu: f64) -> ElementMatrix {
    let d = constitutive(e, nu);
    let g = 0.5 / 3f64.sqrt();
    let mut k = [[0.0; 8]; 8];
    for s in [0.5 - g, 0.5 + g] {
        for r in [0.5 - g, 0.5 + g] {
            let b = strain_displacement(s, r);
            let mut db = [[0.0; 8]; 3];
            for i in 0..3 {
                for j in 0..8 {
                    db[i][j] = (0..3).map(|m| d[i][m] * b[m][j]).sum();
                }
            }
            for i in 0..8 {
                for j in i..8 {
                    k[i][j] += 0.25 * (0..3).map(|m| b[m][i] * db[m][j]).sum::<f64>();
                }
            }
        }
    }
    for i in 0..8 {
        for j in 0..i {
            k[i][j] = k[j][i];
        }
    }
    k
}

/// Symmetric positive-definite matrix in lower band storage.
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * bw] }
    }

    #[inline]
    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(j <= i && i - j < self.bw);
        &mut self.data[i * self.bw + (self.bw - 1 - (i - j))]
    }

    /// In-place Cholesky `A = L L^T`, then solve for `rhs` in place.
    fn solve(mut self, rhs: &mut [f64]) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw - 1);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw - 1));
                let mut s = self.data[i * bw + (bw - 1 - (i - j))];
                let ri = i * bw + bw - 1 - i;
                let rj = j * bw + bw - 1 - j;
                for k in k0..j {
                    s -= self.data[ri + k] * self.data[rj + k];
                }
                if i == j {
                    let diag = self.data[i * bw + bw - 1];
                    if !(s > 1e-12 * diag) || !s.is_finite() {
                        return Err(CoreError::Singular { dof: i });
                    }
                    self.data[i * bw + bw - 1] = s.sqrt();
                } else {
                    self.data[i * bw + (bw - 1 - (i - j))] = s / self.data[j * bw + bw - 1];
                }
            }
        }
        // Forward substitution L y = b.
        for i in 0..n {
            let lo = i.saturating_sub(bw - 1);
            let mut s = rhs[i];
            for k in lo..i {
                s -= self.data[i * bw + bw - 1 - (i - k)] * rhs[k];
            }
            rhs[i] = s / self.data[i * bw + bw - 1];
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            rhs[i] /= self.data[i * bw + bw - 1];
            let xi = rhs[i];
            let lo = i.saturating_sub(bw - 1);
            for k in lo..i {
                rhs[k] -= self.data[i * bw + bw - 1 - (i - k)] * xi;
            }
        }
        Ok(())
    }
}

/// Nodal displacements and per-element unit-modulus strain energies.
#[derive(Clone, Debug)]
pub struct FeaSolution {
    pub u: Vec<f64>,
    pub compliance: f64,
    /// `u_e^T k0 u_e` per element with `k0` the unit-modulus stiffness.
    pub element_energy: Vec<f64>,
}

fn validate(domain: &GridDomain, bc: &BoundaryCondition, loads: &[Load], densities: &[f64]) -> Result<()> {
    if densities.len() != domain.n_elements() {
        return Err(CoreError::Invalid(format!("{} densities for {} elements", densities.len(), domain.n_elements())));
    }
    if densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(CoreError::Invalid("density outside [0, 1]".into()));
    }
    if let Some(d) = bc.fixed.iter().find(|d| d.node >= domain.n_nodes()) {
        return Err(CoreError::Invalid(format!("fixed dof {d:?} outside grid")));
    }
    if let Some(l) = loads.iter().find(|l| l.node >= domain.n_nodes()) {
        return Err(CoreError::Invalid(format!("load node {} outside grid", l.node)));
    }
    if !bc.removes_rigid_motion(domain) {
        return Err(CoreError::Singular { dof: 0 });
    }
    Ok(())
}

fn element_energy(ke: &ElementMatrix, u: &[f64], dofs: &[usize; 8]) -> f64 {
    let mut ue = [0.0; 8];
    for (v, &d) in ue.iter_mut().zip(dofs) {
        *v = u[d];
    }
    let mut s = 0.0;
    for i in 0..8 {
        let row: f64 = (0..8).map(|j| ke[i][j] * ue[j]).sum();
        s += ue[i] * row;
    }
    s
}

/// Solve `K(x) u = F` with SIMP moduli `E_min + x^p (E0 - E_min)`.
/// Fixed dofs are eliminated by zeroing their rows and columns.
pub fn solve_fea(
    domain: &GridDomain,
    bc: &BoundaryCondition,
    loads: &[Load],
    densities: &[f64],
    penal: f64,
) -> Result<FeaSolution> {
    validate(domain, bc, loads, densities)?;
    let n = domain.n_dofs();
    let k0 = element_stiffness(1.0, domain.material.nu);
    let mut fixed = vec![false; n];
    for d in &bc.fixed {
        fixed[d.index()] = true;
    }
    let bw = 2 * domain.nx + 6;
    let mut k = BandMatrix::zeros(n, bw.min(n));
    for ey in 0..domain.ny {
        for ex in 0..domain.nx {
            let e = domain.modulus(densities[ey * domain.nx + ex], penal);
            let dofs = domain.element_dofs(ex, ey);
            for i in 0..8 {
                if fixed[dofs[i]] {
                    continue;
                }
                for j in 0..8 {
                    if dofs[j] <= dofs[i] && !fixed[dofs[j]] {
                        *k.at(dofs[i], dofs[j]) += e * k0[i][j];
                    }
                }
            }
        }
    }
    for (d, &f) in fixed.iter().enumerate() {
        if f {
            *k.at(d, d) = 1.0;
        }
    }
    let mut f = vec![0.0; n];
    for l in loads {
        f[2 * l.node] += l.fx;
        f[2 * l.node + 1] += l.fy;
    }
    for (d, &fx) in fixed.iter().enumerate() {
        if fx {
            f[d] = 0.0;
        }
    }
    let force = f.clone();
    k.solve(&mut f)?;
    let u = f;
    let compliance = force.iter().zip(&u).map(|(a, b)| a * b).sum();
    let mut energy = Vec::with_capacity(domain.n_elements());
    for ey in 0..domain.ny {
        for ex in 0..domain.nx {
            energy.push(element_energy(&k0, &u, &domain.element_dofs(ex, ey)));
        }
    }
    Ok(FeaSolution { u, compliance, element_energy: energy })
}

/// `C = F^T u` under SIMP interpolation with exponent `penal`.
pub fn compliance(
    domain: &GridDomain,
    bc: &BoundaryCondition,
    loads: &[Load],
    densities: &[f64],
    penal: f64,
) -> Result<f64> {
    Ok(solve_fea(domain, bc, loads, densities, penal)?.compliance)
}

pub fn von_mises(sxx: f64, syy: f64, sxy: f64) -> f64 {
    (sxx * sxx - sxx * syy + syy * syy + 3.0 * sxy * sxy).max(0.0).sqrt()
}

/// Stress `[s_xx, s_yy, s_xy]` at local point `(s, r)` of element `(ex, ey)`.
pub fn element_stress(domain: &GridDomain, u: &[f64], ex: usize, ey: usize, s: f64, r: f64, modulus: f64) -> [f64; 3] {
    let b = strain_displacement(s, r);
    let d = constitutive(modulus, domain.material.nu);
    let dofs = domain.element_dofs(ex, ey);
    let mut strain = [0.0; 3];
    for (i, row) in b.iter().enumerate() {
        strain[i] = dofs.iter().enumerate().map(|(j, &dof)| row[j] * u[dof]).sum();
    }
    let mut stress = [0.0; 3];
    for i in 0..3 {
        stress[i] = (0..3).map(|m| d[i][m] * strain[m]).sum();
    }
    stress
}

/// Von Mises stress and strain-energy density of the fully solid domain.
///
/// Von Mises is evaluated at element centroids. The strain-energy density is
/// the element average of `W = (s_xx e_xx + s_yy e_yy + 2 s_xy e_xy) / 2`,
/// i.e. `u_e^T K_e u_e / (2 * area)`, so that summing `W * area` over the
/// grid returns exactly half the compliance.
pub fn physical_fields(domain: &GridDomain, bc: &BoundaryCondition, loads: &[Load]) -> Result<FieldSet> {
    let solid = vec![1.0; domain.n_elements()];
    let sol = solve_fea(domain, bc, loads, &solid, 1.0)?;
    let e0 = domain.material.e0;
    let mut von_mises_field = Vec::with_capacity(domain.n_elements());
    let mut sed = Vec::with_capacity(domain.n_elements());
    for ey in 0..domain.ny {
        for ex in 0..domain.nx {
            let [sxx, syy, sxy] = element_stress(domain, &sol.u, ex, ey, 0.5, 0.5, e0);
            von_mises_field.push(von_mises(sxx, syy, sxy));
            sed.push((0.5 * e0 * sol.element_energy[ey * domain.nx + ex]).max(0.0));
        }
    }
    Ok(FieldSet { von_mises: von_mises_field, sed })
}
