//! Evaluation metrics for generated structures, the floating-material
//! oracle, aggregation with confidence intervals and paired t-tests.
//!
//! All metrics work on binarized densities (threshold
//! [`BINARY_THRESHOLD`](crate::fea::BINARY_THRESHOLD)).

use statrs::distribution::{ContinuousCDF, StudentsT};
use tgtensor::kv::KvFile;

use crate::error::{CoreError, Result};
use crate::fea::{compliance, Load, Topology};
use crate::problem::ProblemSpec;

/// SIMP exponent used when evaluating compliance of binarized designs.
pub const EVAL_PENAL: f64 = 3.0;

/// Compliance errors are capped here; a capped record is flagged
/// `degenerate` (typically material disconnected from the supports).
pub const CE_CAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Connected-component labels of `mask` (row-major `nx * ny`). Void cells
/// get `None`; components are numbered from 0 in raster order of their
/// first cell.
pub fn label_components(mask: &[bool], nx: usize, ny: usize, conn: Connectivity) -> (Vec<Option<usize>>, usize) {
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            if !mask[i] {
                continue;
            }
            // Already-visited neighbours: left, and the row above.
            let mut prev = Vec::with_capacity(4);
            if x > 0 {
                prev.push(i - 1);
            }
            if y > 0 {
                prev.push(i - nx);
                if conn == Connectivity::Eight {
                    if x > 0 {
                        prev.push(i - nx - 1);
                    }
                    if x + 1 < nx {
                        prev.push(i - nx + 1);
                    }
                }
            }
            for j in prev {
                if mask[j] {
                    let (ra, rb) = (find(&mut parent, i), find(&mut parent, j));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; mask.len()];
    let mut count = 0;
    let mut labels = vec![None; mask.len()];
    for i in 0..mask.len() {
        if mask[i] {
            let r = find(&mut parent, i);
            if ids[r] == usize::MAX {
                ids[r] = count;
                count += 1;
            }
            labels[i] = Some(ids[r]);
        }
    }
    (labels, count)
}

pub fn component_count(topology: &Topology, conn: Connectivity) -> usize {
    label_components(&topology.solid_mask(), topology.nx, topology.ny, conn).1
}

/// `true` when the binarized material forms two or more components.
pub fn floating_material(topology: &Topology, conn: Connectivity) -> Result<bool> {
    match component_count(topology, conn) {
        0 => Err(CoreError::EmptyTopology),
        n => Ok(n >= 2),
    }
}

/// `|VF(gen) - v| / v` with `VF` the binarized mean density.
pub fn volume_fraction_error(generated: &Topology, volfrac: f64) -> f64 {
    let vf = generated.binarized().mean_density();
    (vf - volfrac).abs() / volfrac
}

/// `true` when every element around some load node is void.
pub fn load_violation(generated: &Topology, loads: &[Load]) -> bool {
    let nx = generated.nx;
    let solid = generated.solid_mask();
    loads.iter().any(|l| {
        let (ix, iy) = (l.node % (nx + 1), l.node / (nx + 1));
        let mut any_solid = false;
        for ey in [iy.wrapping_sub(1), iy] {
            for ex in [ix.wrapping_sub(1), ix] {
                if ex < nx && ey < generated.ny && solid[ey * nx + ex] {
                    any_solid = true;
                }
            }
        }
        !any_solid
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplianceError {
    pub ce: f64,
    pub c_gt: f64,
    pub c_gen: f64,
    pub degenerate: bool,
}

pub fn relative_compliance_error(c_gt: f64, c_gen: f64) -> f64 {
    (c_gen - c_gt) / c_gt
}

/// `CE = (C(gen) - C(gt)) / C(gt)` on binarized designs.
pub fn compliance_error(
    ground_truth: &Topology,
    generated: &Topology,
    problem: &ProblemSpec,
) -> Result<ComplianceError> {
    let domain = problem.domain()?;
    let c = |t: &Topology| compliance(&domain, &problem.bc, &problem.loads, &t.binarized().densities, EVAL_PENAL);
    let c_gt = c(ground_truth)?;
    let c_gen = c(generated)?;
    let raw = relative_compliance_error(c_gt, c_gen);
    let degenerate = !(raw <= CE_CAP);
    Ok(ComplianceError { ce: if degenerate { CE_CAP } else { raw }, c_gt, c_gen, degenerate })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub problem_id: usize,
    pub ce: f64,
    pub vfe: f64,
    pub lv: bool,
    pub fm: bool,
    pub c_gt: f64,
    pub c_gen: f64,
    pub degenerate: bool,
}

/// All four metrics for one generated design. An all-void design counts as
/// free of floating material; its compliance error is capped.
pub fn evaluate(
    problem_id: usize,
    problem: &ProblemSpec,
    ground_truth: &Topology,
    generated: &Topology,
) -> Result<EvalRecord> {
    let ce = compliance_error(ground_truth, generated, problem)?;
    let fm = match floating_material(generated, Connectivity::Eight) {
        Ok(fm) => fm,
        Err(CoreError::EmptyTopology) => false,
        Err(e) => return Err(e),
    };
    Ok(EvalRecord {
        problem_id,
        ce: ce.ce,
        vfe: volume_fraction_error(generated, problem.volfrac),
        lv: load_violation(generated, &problem.loads),
        fm,
        c_gt: ce.c_gt,
        c_gen: ce.c_gen,
        degenerate: ce.degenerate,
    })
}

/// Mean with the half-width of its two-sided 95% t-interval (`None` below
/// two samples).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: Option<f64>,
}

pub fn mean_ci(values: &[f64]) -> MeanCi {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return MeanCi { mean, half_width: None };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("df >= 1").inverse_cdf(0.975);
    MeanCi { mean, half_width: Some(t * (var / n).sqrt()) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub ce: MeanCi,
    pub median_ce: f64,
    /// Percentages.
    pub ce_over_30: MeanCi,
    pub vfe: MeanCi,
    pub lv: MeanCi,
    pub fm: MeanCi,
    pub degenerate: usize,
}

fn percent(records: &[EvalRecord], f: impl Fn(&EvalRecord) -> bool) -> MeanCi {
    let v: Vec<f64> = records.iter().map(|r| if f(r) { 100.0 } else { 0.0 }).collect();
    mean_ci(&v)
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(CoreError::EmptyRecords);
    }
    let mut ces: Vec<f64> = records.iter().map(|r| r.ce).collect();
    let ce = mean_ci(&ces);
    ces.sort_by(f64::total_cmp);
    let m = ces.len();
    let median_ce = if m % 2 == 1 { ces[m / 2] } else { 0.5 * (ces[m / 2 - 1] + ces[m / 2]) };
    let vfes: Vec<f64> = records.iter().map(|r| r.vfe).collect();
    Ok(Summary {
        n: records.len(),
        ce,
        median_ce,
        ce_over_30: percent(records, |r| r.ce > 0.3),
        vfe: mean_ci(&vfes),
        lv: percent(records, |r| r.lv),
        fm: percent(records, |r| r.fm),
        degenerate: records.iter().filter(|r| r.degenerate).count(),
    })
}

fn fmt_ci(c: &MeanCi, scale: f64) -> String {
    match c.half_width {
        Some(h) => format!("{:.2} ± {:.2}", c.mean * scale, h * scale),
        None => format!("{:.2}", c.mean * scale),
    }
}

impl Summary {
    /// Human-readable table, one metric per row, relative errors in percent.
    pub fn table(&self) -> String {
        let rows = [
            ("Average % CE", fmt_ci(&self.ce, 100.0)),
            ("Median % CE", format!("{:.2}", self.median_ce * 100.0)),
            ("% CE > 30%", fmt_ci(&self.ce_over_30, 1.0)),
            ("Average % VFE", fmt_ci(&self.vfe, 100.0)),
            ("% Load disrespect", fmt_ci(&self.lv, 1.0)),
            ("% Floating material", fmt_ci(&self.fm, 1.0)),
        ];
        let mut out = format!("{:<22} {}\n", "metric", format!("value (n = {})", self.n));
        for (k, v) in rows {
            out.push_str(&format!("{k:<22} {v}\n"));
        }
        out
    }

    pub fn write_kv(&self, kv: &mut KvFile, prefix: &str) {
        let put = |kv: &mut KvFile, key: &str, c: &MeanCi| {
            kv.set(format!("{prefix}{key}.mean"), format!("{:e}", c.mean));
            if let Some(h) = c.half_width {
                kv.set(format!("{prefix}{key}.ci95"), format!("{h:e}"));
            }
        };
        kv.set(format!("{prefix}n"), self.n.to_string());
        put(kv, "ce", &self.ce);
        kv.set(format!("{prefix}ce.median"), format!("{:e}", self.median_ce));
        put(kv, "ce_over_30_pct", &self.ce_over_30);
        put(kv, "vfe", &self.vfe);
        put(kv, "lv_pct", &self.lv);
        put(kv, "fm_pct", &self.fm);
        kv.set(format!("{prefix}degenerate"), self.degenerate.to_string());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tail {
    /// Alternative hypothesis: mean of `a - b` below zero.
    Less,
    /// Alternative hypothesis: mean of `a - b` above zero.
    Greater,
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// Paired t-test on `a - b`. With all differences zero the statistic is
/// taken as `t = 0`, so a one-tailed test yields `p = 0.5`.
pub fn paired_t_test(a: &[f64], b: &[f64], tail: Tail) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(CoreError::MismatchedPairing(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CoreError::MismatchedPairing("need at least two pairs".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = if mean == 0.0 { 0.0 } else { mean / (var / n).sqrt() };
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("df >= 1");
    let p = match tail {
        Tail::Less => dist.cdf(t),
        Tail::Greater => 1.0 - dist.cdf(t),
        Tail::TwoSided => 2.0 * (1.0 - dist.cdf(t.abs())),
    };
    Ok(PairedTest { t, df: a.len() - 1, p })
}

/// Per-problem average of `metric`, sorted by problem id.
pub fn per_problem_means(records: &[EvalRecord], metric: impl Fn(&EvalRecord) -> f64) -> Vec<(usize, f64)> {
    let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in records {
        let e = acc.entry(r.problem_id).or_default();
        e.0 += metric(r);
        e.1 += 1;
    }
    acc.into_iter().map(|(id, (s, c))| (id, s / c as f64)).collect()
}

/// Paired test of a metric between two runs over the same problems, using
/// per-problem means across repetitions.
pub fn paired_records_test(
    a: &[EvalRecord],
    b: &[EvalRecord],
    metric: impl Fn(&EvalRecord) -> f64 + Copy,
    tail: Tail,
) -> Result<PairedTest> {
    let ma = per_problem_means(a, metric);
    let mb = per_problem_means(b, metric);
    let ids_a: Vec<usize> = ma.iter().map(|m| m.0).collect();
    let ids_b: Vec<usize> = mb.iter().map(|m| m.0).collect();
    if ids_a != ids_b {
        return Err(CoreError::MismatchedPairing("runs cover different problems".into()));
    }
    let va: Vec<f64> = ma.iter().map(|m| m.1).collect();
    let vb: Vec<f64> = mb.iter().map(|m| m.1).collect();
    paired_t_test(&va, &vb, tail)
}
