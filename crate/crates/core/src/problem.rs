//! Problem sampling: the boundary-condition catalog, random constraint
//! draws, and the two negative-sample recipes (extra "fake" loads and
//! detached material blobs).

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::fea::{Axis, BoundaryCondition, Dof, GridDomain, Load, Topology};
use crate::metrics::{component_count, Connectivity};

/// Number of catalog scenarios used for training splits (ids `0..42`).
pub const TRAIN_BC_COUNT: usize = 42;
/// Total catalog size; ids `42..47` are held out for the level-2 split.
pub const BC_COUNT: usize = 47;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Portion of an edge. Positions run top to bottom on vertical edges and
/// left to right on horizontal ones; halves share the middle node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Span {
    Full,
    FirstHalf,
    SecondHalf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Edge(Side, Span),
    Corner(Corner),
    /// Node at position `ceil(n / 2)` along the edge.
    EdgeMid(Side),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fix {
    Both,
    X,
    Y,
}

use Corner::*;
use Fix::{Both, X, Y};
use Side::*;
use Span::*;
use Support::{Corner as C, Edge as E, EdgeMid as M};

type Entry = (&'static str, &'static [(Support, Fix)]);

const CATALOG: [Entry; BC_COUNT] = [
    ("left edge clamped", &[(E(Left, Full), Both)]),
    ("bottom-left pinned, bottom-right roller (y)", &[(C(BottomLeft), Both), (C(BottomRight), Y)]),
    ("right edge clamped", &[(E(Right, Full), Both)]),
    ("top edge clamped", &[(E(Top, Full), Both)]),
    ("bottom edge clamped", &[(E(Bottom, Full), Both)]),
    ("left and right edges clamped", &[(E(Left, Full), Both), (E(Right, Full), Both)]),
    ("top and bottom edges clamped", &[(E(Top, Full), Both), (E(Bottom, Full), Both)]),
    ("bottom corners pinned", &[(C(BottomLeft), Both), (C(BottomRight), Both)]),
    ("top corners pinned", &[(C(TopLeft), Both), (C(TopRight), Both)]),
    ("top-left pinned, top-right roller (y)", &[(C(TopLeft), Both), (C(TopRight), Y)]),
    ("left edge roller (x), bottom-right roller (y)", &[(E(Left, Full), X), (C(BottomRight), Y)]),
    ("right edge roller (x), bottom-left roller (y)", &[(E(Right, Full), X), (C(BottomLeft), Y)]),
    ("left edge roller (x), bottom edge roller (y)", &[(E(Left, Full), X), (E(Bottom, Full), Y)]),
    ("upper half of left edge clamped", &[(E(Left, FirstHalf), Both)]),
    ("lower half of left edge clamped", &[(E(Left, SecondHalf), Both)]),
    ("upper half of right edge clamped", &[(E(Right, FirstHalf), Both)]),
    ("lower half of right edge clamped", &[(E(Right, SecondHalf), Both)]),
    ("left half of top edge clamped", &[(E(Top, FirstHalf), Both)]),
    ("right half of top edge clamped", &[(E(Top, SecondHalf), Both)]),
    ("left half of bottom edge clamped", &[(E(Bottom, FirstHalf), Both)]),
    ("right half of bottom edge clamped", &[(E(Bottom, SecondHalf), Both)]),
    ("upper halves of left and right edges clamped", &[(E(Left, FirstHalf), Both), (E(Right, FirstHalf), Both)]),
    ("lower halves of left and right edges clamped", &[(E(Left, SecondHalf), Both), (E(Right, SecondHalf), Both)]),
    ("left edge clamped, bottom-right roller (y)", &[(E(Left, Full), Both), (C(BottomRight), Y)]),
    ("left edge clamped, top-right roller (y)", &[(E(Left, Full), Both), (C(TopRight), Y)]),
    ("left edge clamped, right edge roller (x)", &[(E(Left, Full), Both), (E(Right, Full), X)]),
    ("right edge clamped, left edge roller (x)", &[(E(Right, Full), Both), (E(Left, Full), X)]),
    ("bottom edge clamped, top edge roller (y)", &[(E(Bottom, Full), Both), (E(Top, Full), Y)]),
    ("top edge clamped, bottom edge roller (y)", &[(E(Top, Full), Both), (E(Bottom, Full), Y)]),
    (
        "bottom-left pinned, bottom-right roller (y), top-left roller (x)",
        &[(C(BottomLeft), Both), (C(BottomRight), Y), (C(TopLeft), X)],
    ),
    ("bottom edge roller (y), bottom-left roller (x)", &[(E(Bottom, Full), Y), (C(BottomLeft), X)]),
    ("top edge roller (y), top-left roller (x)", &[(E(Top, Full), Y), (C(TopLeft), X)]),
    ("left edge roller (x), top-left roller (y)", &[(E(Left, Full), X), (C(TopLeft), Y)]),
    ("right edge roller (x), top-right roller (y)", &[(E(Right, Full), X), (C(TopRight), Y)]),
    ("bottom-left pinned, bottom middle roller (y)", &[(C(BottomLeft), Both), (M(Bottom), Y)]),
    ("bottom middle and top middle pinned", &[(M(Bottom), Both), (M(Top), Both)]),
    ("left middle pinned, bottom-right roller (y)", &[(M(Left), Both), (C(BottomRight), Y)]),
    (
        "bottom-left, bottom middle and bottom-right pinned",
        &[(C(BottomLeft), Both), (M(Bottom), Both), (C(BottomRight), Both)],
    ),
    (
        "upper half of left edge and right half of bottom edge clamped",
        &[(E(Left, FirstHalf), Both), (E(Bottom, SecondHalf), Both)],
    ),
    (
        "upper half of right edge and left half of bottom edge clamped",
        &[(E(Right, FirstHalf), Both), (E(Bottom, FirstHalf), Both)],
    ),
    ("left and bottom edges clamped", &[(E(Left, Full), Both), (E(Bottom, Full), Both)]),
    ("right and bottom edges clamped", &[(E(Right, Full), Both), (E(Bottom, Full), Both)]),
    // Held-out scenarios.
    ("top-left and bottom-right pinned", &[(C(TopLeft), Both), (C(BottomRight), Both)]),
    ("bottom-left and top-right pinned", &[(C(BottomLeft), Both), (C(TopRight), Both)]),
    (
        "upper half of left edge and lower half of right edge clamped",
        &[(E(Left, FirstHalf), Both), (E(Right, SecondHalf), Both)],
    ),
    ("top edge roller (y), left middle roller (x)", &[(E(Top, Full), Y), (M(Left), X)]),
    ("left middle and right middle pinned", &[(M(Left), Both), (M(Right), Both)]),
];

pub fn bc_description(id: usize) -> Result<&'static str> {
    CATALOG.get(id).map(|e| e.0).ok_or(CoreError::UnknownScenario(id))
}

fn support_nodes(domain: &GridDomain, s: Support) -> Vec<usize> {
    let (nx, ny) = (domain.nx, domain.ny);
    let edge_len = |side| match side {
        Left | Right => ny,
        Top | Bottom => nx,
    };
    let at = |side, k: usize| match side {
        Left => domain.node(0, k),
        Right => domain.node(nx, k),
        Top => domain.node(k, 0),
        Bottom => domain.node(k, ny),
    };
    match s {
        E(side, span) => {
            let n = edge_len(side);
            let range = match span {
                Full => 0..=n,
                FirstHalf => 0..=n.div_ceil(2),
                SecondHalf => n / 2..=n,
            };
            range.map(|k| at(side, k)).collect()
        }
        M(side) => vec![at(side, edge_len(side).div_ceil(2))],
        C(c) => vec![match c {
            TopLeft => domain.node(0, 0),
            TopRight => domain.node(nx, 0),
            BottomLeft => domain.node(0, ny),
            BottomRight => domain.node(nx, ny),
        }],
    }
}

/// Catalog scenario `id` realized on `domain`.
pub fn bc_catalog(id: usize, domain: &GridDomain) -> Result<BoundaryCondition> {
    let (_, supports) = CATALOG.get(id).ok_or(CoreError::UnknownScenario(id))?;
    let mut fixed = Vec::new();
    for &(support, fix) in supports.iter() {
        for node in support_nodes(domain, support) {
            if matches!(fix, Both | X) {
                fixed.push(Dof { node, axis: Axis::X });
            }
            if matches!(fix, Both | Y) {
                fixed.push(Dof { node, axis: Axis::Y });
            }
        }
    }
    Ok(BoundaryCondition::new(id, fixed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub nx: usize,
    pub ny: usize,
    pub volfrac: f64,
    pub bc: BoundaryCondition,
    pub loads: Vec<Load>,
}

impl ProblemSpec {
    pub fn domain(&self) -> Result<GridDomain> {
        GridDomain::new(self.nx, self.ny)
    }

    /// Elements touching a load or support node.
    pub fn keep_out_elements(&self) -> Result<Vec<usize>> {
        let d = self.domain()?;
        let mut out: Vec<usize> = self
            .loads
            .iter()
            .map(|l| l.node)
            .chain(self.bc.fixed.iter().map(|f| f.node))
            .flat_map(|n| d.elements_at_node(n))
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Identity used to keep problems unique across dataset splits.
    pub fn key(&self) -> String {
        let loads: Vec<String> = self.loads.iter().map(|l| format!("{}:{}:{}", l.node, l.fx, l.fy)).collect();
        format!("{}x{}/{}/{}/{}", self.nx, self.ny, self.volfrac, self.bc.scenario, loads.join(";"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintConfig {
    pub volfracs: Vec<f64>,
    pub directions: Vec<f64>,
    pub train_bc: Vec<usize>,
    pub test_bc: Vec<usize>,
}

/// `0.30, 0.32, ..., 0.50`.
pub fn volume_grid() -> Vec<f64> {
    (0..=10).map(|k| (30 + 2 * k) as f64 / 100.0).collect()
}

/// `0, pi/6, ..., pi`.
pub fn direction_grid() -> Vec<f64> {
    (0..=6).map(|k| k as f64 * PI / 6.0).collect()
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            volfracs: volume_grid(),
            directions: direction_grid(),
            train_bc: (0..TRAIN_BC_COUNT).collect(),
            test_bc: (TRAIN_BC_COUNT..BC_COUNT).collect(),
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Invalid(m.to_string()));
        if self.volfracs.is_empty() || self.volfracs.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return bad("volume fractions must lie in (0, 1]");
        }
        if self.directions.is_empty() {
            return bad("no load directions");
        }
        if let Some(id) = self.train_bc.iter().chain(&self.test_bc).find(|&&id| id >= BC_COUNT) {
            return Err(CoreError::UnknownScenario(*id));
        }
        if self.train_bc.iter().any(|id| self.test_bc.contains(id)) {
            return bad("training and test scenarios overlap");
        }
        Ok(())
    }

    pub fn bc_ids(&self, split: BcSplit) -> &[usize] {
        match split {
            BcSplit::Train => &self.train_bc,
            BcSplit::Test => &self.test_bc,
        }
    }
}

/// Unit load at angle `theta`; components below `1e-12` snap to zero.
pub fn unit_load(node: usize, theta: f64) -> Load {
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    Load { node, fx: snap(theta.cos()), fy: snap(theta.sin()) }
}

/// A load is admissible on a boundary node without a fixed dof on any
/// axis it pushes along.
pub fn load_admissible(domain: &GridDomain, bc: &BoundaryCondition, load: &Load) -> bool {
    domain.is_boundary_node(load.node)
        && (load.fx != 0.0 || load.fy != 0.0)
        && !(load.loads_axis(Axis::X) && bc.is_fixed(load.node, Axis::X))
        && !(load.loads_axis(Axis::Y) && bc.is_fixed(load.node, Axis::Y))
}

const MAX_DRAWS: usize = 100_000;

fn draw_load<R: Rng + ?Sized>(
    rng: &mut R,
    domain: &GridDomain,
    bc: &BoundaryCondition,
    directions: &[f64],
    exclude: &[usize],
) -> Result<Load> {
    let boundary = domain.boundary_nodes();
    for _ in 0..MAX_DRAWS {
        let node = boundary[rng.random_range(0..boundary.len())];
        let theta = directions[rng.random_range(0..directions.len())];
        let load = unit_load(node, theta);
        if !exclude.contains(&node) && load_admissible(domain, bc, &load) {
            return Ok(load);
        }
    }
    Err(CoreError::Invalid(format!("scenario {} leaves no loadable boundary node", bc.scenario)))
}

pub fn sample_problem<R: Rng + ?Sized>(
    rng: &mut R,
    config: &ConstraintConfig,
    split: BcSplit,
    nx: usize,
    ny: usize,
) -> Result<ProblemSpec> {
    config.validate()?;
    let domain = GridDomain::new(nx, ny)?;
    let ids = config.bc_ids(split);
    if ids.is_empty() {
        return Err(CoreError::Invalid("no scenarios in the requested split".into()));
    }
    let volfrac = config.volfracs[rng.random_range(0..config.volfracs.len())];
    let scenario = ids[rng.random_range(0..ids.len())];
    let bc = bc_catalog(scenario, &domain)?;
    let load = draw_load(rng, &domain, &bc, &config.directions, &[])?;
    Ok(ProblemSpec { nx, ny, volfrac, bc, loads: vec![load] })
}

/// Copy of `problem` with one extra admissible unit load at a node not
/// already loaded.
pub fn fake_load_perturb<R: Rng + ?Sized>(problem: &ProblemSpec, rng: &mut R) -> Result<ProblemSpec> {
    let domain = problem.domain()?;
    let taken: Vec<usize> = problem.loads.iter().map(|l| l.node).collect();
    let extra = draw_load(rng, &domain, &problem.bc, &direction_grid(), &taken)?;
    let mut out = problem.clone();
    out.loads.push(extra);
    Ok(out)
}

/// Add a detached 1-3 by 1-3 element block of material to a single-component
/// binary design. The block keeps a one-element void margin (8-neighbour
/// halo) from existing material and avoids `keep_out` elements.
pub fn add_floating_material<R: Rng + ?Sized>(
    topology: &Topology,
    keep_out: &[usize],
    rng: &mut R,
) -> Result<Topology> {
    let (nx, ny) = (topology.nx, topology.ny);
    let count = component_count(topology, Connectivity::Eight);
    if count != 1 {
        return Err(CoreError::NotSingleComponent(count));
    }
    let solid = topology.solid_mask();
    let mut blocked = vec![false; nx * ny];
    for &e in keep_out {
        if e < blocked.len() {
            blocked[e] = true;
        }
    }
    // A cell may host blob material if it is free and no solid is within
    // its 8-neighbourhood.
    let mut hostable = vec![false; nx * ny];
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            if blocked[i] || solid[i] {
                continue;
            }
            let mut clear = true;
            for yy in y.saturating_sub(1)..(y + 2).min(ny) {
                for xx in x.saturating_sub(1)..(x + 2).min(nx) {
                    clear &= !solid[yy * nx + xx];
                }
            }
            hostable[i] = clear;
        }
    }
    let mut shapes = Vec::new();
    for h in 1..=3usize {
        for w in 1..=3usize {
            let mut spots = Vec::new();
            for y0 in 0..ny.saturating_sub(h - 1) {
                for x0 in 0..nx.saturating_sub(w - 1) {
                    let fits = (y0..y0 + h).all(|y| (x0..x0 + w).all(|x| hostable[y * nx + x]));
                    if fits {
                        spots.push((x0, y0));
                    }
                }
            }
            if !spots.is_empty() {
                shapes.push((w, h, spots));
            }
        }
    }
    if shapes.is_empty() {
        return Err(CoreError::NoSpace);
    }
    let (w, h, spots) = &shapes[rng.random_range(0..shapes.len())];
    let (x0, y0) = spots[rng.random_range(0..spots.len())];
    let mut out = topology.binarized();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            out.densities[y * nx + x] = 1.0;
        }
    }
    Ok(out)
}

/// Markdown table of the catalog, kept in sync with `docs/bc_catalog.md`.
pub fn catalog_table() -> String {
    let mut out = String::from("| id | split | supports |\n|---:|---|---|\n");
    for (id, (desc, _)) in CATALOG.iter().enumerate() {
        let split = if id < TRAIN_BC_COUNT { "train" } else { "test" };
        out.push_str(&format!("| {id} | {split} | {desc} |\n"));
    }
    out
}
