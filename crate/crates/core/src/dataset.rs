//! On-disk sample tensors, dataset manifests, dataset generation and
//! topology rendering.
//!
//! Sample file layout (all little endian):
//!
//! | offset | size | field                      |
//! |-------:|-----:|----------------------------|
//! | 0      | 2    | magic `b"TG"`              |
//! | 2      | 2    | format version (u16, = 1)  |
//! | 4      | 4    | channel count (u32)        |
//! | 8      | 4    | height (u32)               |
//! | 12     | 4    | width (u32)                |
//! | 16     | 4·c·h·w | `f32` values, channel-major, rows top to bottom |
//!
//! Channel semantics follow from the count: 1 = topology, 6 = main sample,
//! 8 = regressor sample (see [`Channel`]).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tgtensor::kv::KvFile;

use crate::error::{CoreError, Result};
use crate::fea::{physical_fields, Axis, FieldSet, GridDomain, Load, Topology};
use crate::problem::{bc_catalog, load_admissible, sample_problem, BcSplit, ConstraintConfig, ProblemSpec};
use crate::simp::{optimize, SimpParams, SimpResult};

pub const MAGIC: [u8; 2] = *b"TG";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Topology,
    Volume,
    VonMises,
    Sed,
    LoadX,
    LoadY,
    BcX,
    BcY,
}

pub const MAIN_LAYOUT: [Channel; 6] =
    [Channel::Topology, Channel::Volume, Channel::VonMises, Channel::Sed, Channel::LoadX, Channel::LoadY];

pub const REGRESSOR_LAYOUT: [Channel; 8] = [
    Channel::Topology,
    Channel::Volume,
    Channel::VonMises,
    Channel::Sed,
    Channel::LoadX,
    Channel::LoadY,
    Channel::BcX,
    Channel::BcY,
];

pub fn layout(channels: usize) -> Result<&'static [Channel]> {
    match channels {
        1 => Ok(&[Channel::Topology]),
        6 => Ok(&MAIN_LAYOUT),
        8 => Ok(&REGRESSOR_LAYOUT),
        c => Err(CoreError::Format(format!("unsupported channel count {c}"))),
    }
}

/// Multi-channel element-grid image held in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SampleTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        layout(channels)?;
        if values.len() != channels * height * width {
            return Err(CoreError::Invalid(format!("{} values for {channels}x{height}x{width}", values.len())));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn tags(&self) -> &'static [Channel] {
        layout(self.channels).expect("validated at construction")
    }

    pub fn plane(&self, channel: Channel) -> Option<&[f64]> {
        let i = self.tags().iter().position(|&c| c == channel)?;
        let n = self.height * self.width;
        Some(&self.values[i * n..(i + 1) * n])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CoreError::Format("truncated header".into()));
        }
        if bytes[..2] != MAGIC {
            return Err(CoreError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[2], bytes[3]]);
        if version != FORMAT_VERSION {
            return Err(CoreError::Format(format!("unsupported version {version}")));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (c, h, w) = (word(4), word(8), word(12));
        layout(c)?;
        let n = c * h * w;
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(CoreError::Format(format!(
                "payload of {} bytes, expected {}",
                bytes.len() - HEADER_LEN,
                4 * n
            )));
        }
        let values =
            bytes[HEADER_LEN..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Self::new(c, h, w, values)
    }
}

pub fn write_sample(path: &Path, sample: &SampleTensor) -> Result<()> {
    fs::write(path, sample.to_bytes())?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<SampleTensor> {
    SampleTensor::from_bytes(&fs::read(path)?)
}

/// Binary PGM, material dark: pixel `round(255 (1 - d))`.
pub fn render_topology(topology: &Topology, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", topology.nx, topology.ny).into_bytes();
    out.extend(topology.densities.iter().map(|d| (255.0 * (1.0 - d.clamp(0.0, 1.0))).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Per-dataset scale factors for the conditioning channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub von_mises: f64,
    pub sed: f64,
    pub load: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { von_mises: 1.0, sed: 1.0, load: 1.0 }
    }
}

/// Nearest-rank 99th percentile; `None` for an empty slice.
pub fn percentile_99(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((0.99 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Some(values[rank - 1])
}

fn positive_or_one(v: Option<f64>) -> f64 {
    match v {
        Some(v) if v > 0.0 && v.is_finite() => v,
        _ => 1.0,
    }
}

impl Normalization {
    /// Field scales are the 99th percentile of all element values; the load
    /// scale uses only nonzero load entries because load planes are sparse.
    pub fn fit(samples: &[&SampleTensor]) -> Self {
        let collect = |c: Channel, nonzero: bool| -> Vec<f64> {
            samples
                .iter()
                .filter_map(|s| s.plane(c))
                .flatten()
                .map(|v| v.abs())
                .filter(|&v| !nonzero || v != 0.0)
                .collect()
        };
        let mut loads = collect(Channel::LoadX, true);
        loads.extend(collect(Channel::LoadY, true));
        Self {
            von_mises: positive_or_one(percentile_99(&mut collect(Channel::VonMises, false))),
            sed: positive_or_one(percentile_99(&mut collect(Channel::Sed, false))),
            load: positive_or_one(percentile_99(&mut loads)),
        }
    }

    pub fn write_kv(&self, kv: &mut KvFile) {
        kv.set("norm.von_mises", self.von_mises);
        kv.set("norm.sed", self.sed);
        kv.set("norm.load", self.load);
    }

    pub fn read_kv(kv: &KvFile) -> Result<Self> {
        Ok(Self { von_mises: kv.parse("norm.von_mises")?, sed: kv.parse("norm.sed")?, load: kv.parse("norm.load")? })
    }
}

/// Load components rasterized to element pixels (see
/// [`GridDomain::node_pixel`]), `[x plane, y plane]`.
pub fn load_planes(domain: &GridDomain, loads: &[Load]) -> [Vec<f64>; 2] {
    let n = domain.n_elements();
    let (mut lx, mut ly) = (vec![0.0; n], vec![0.0; n]);
    for l in loads {
        let p = domain.node_pixel(l.node);
        lx[p] += l.fx;
        ly[p] += l.fy;
    }
    [lx, ly]
}

/// Binary masks of fixed dofs per axis on the element grid.
pub fn bc_planes(domain: &GridDomain, problem: &ProblemSpec) -> [Vec<f64>; 2] {
    let n = domain.n_elements();
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for d in &problem.bc.fixed {
        let p = domain.node_pixel(d.node);
        match d.axis {
            Axis::X => bx[p] = 1.0,
            Axis::Y => by[p] = 1.0,
        }
    }
    [bx, by]
}

/// Six-channel sample: topology, volume, von Mises, SED, load x, load y
/// (raw, unnormalized).
pub fn main_sample(problem: &ProblemSpec, fields: &FieldSet, topology: &Topology) -> Result<SampleTensor> {
    let domain = problem.domain()?;
    let n = domain.n_elements();
    let [lx, ly] = load_planes(&domain, &problem.loads);
    let mut values = Vec::with_capacity(6 * n);
    values.extend_from_slice(&topology.densities);
    values.extend(std::iter::repeat_n(problem.volfrac, n));
    values.extend_from_slice(&fields.von_mises);
    values.extend_from_slice(&fields.sed);
    values.extend(lx);
    values.extend(ly);
    SampleTensor::new(6, problem.ny, problem.nx, values)
}

/// Normalized conditioning planes in layout order without the topology:
/// `[volume, von Mises, SED, load x, load y]`, each `ny * nx`.
pub fn conditioning(sample: &SampleTensor, norm: &Normalization) -> Vec<f64> {
    let mut out = Vec::with_capacity(5 * sample.height * sample.width);
    let scaled = |c: Channel, s: f64| sample.plane(c).unwrap().iter().map(move |v| v / s);
    out.extend(sample.plane(Channel::Volume).unwrap());
    out.extend(scaled(Channel::VonMises, norm.von_mises));
    out.extend(scaled(Channel::Sed, norm.sed));
    out.extend(scaled(Channel::LoadX, norm.load));
    out.extend(scaled(Channel::LoadY, norm.load));
    out
}

/// Number of conditioning planes produced by [`conditioning`].
pub const COND_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Level1,
    Level2,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Level1, Split::Level2];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Level1 => "level1",
            Split::Level2 => "level2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| CoreError::Format(format!("unknown split `{s}`")))
    }

    pub fn bc_split(self) -> BcSplit {
        match self {
            Split::Level2 => BcSplit::Test,
            _ => BcSplit::Train,
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub level1: usize,
    pub level2: usize,
}

impl SplitSizes {
    pub const FULL: SplitSizes = SplitSizes { train: 30_000, validation: 200, level1: 1_800, level2: 1_000 };
    pub const TOY: SplitSizes = SplitSizes { train: 500, validation: 50, level1: 100, level2: 100 };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Level1 => self.level1,
            Split::Level2 => self.level2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub nx: usize,
    pub ny: usize,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub constraints: ConstraintConfig,
    pub simp: SimpParams,
    pub threads: usize,
}

impl DatasetConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            nx: 16,
            ny: 16,
            seed,
            sizes: SplitSizes::TOY,
            constraints: ConstraintConfig::default(),
            simp: SimpParams::default(),
            threads: 1,
        }
    }
}

/// SplitMix64 finalizer over `(base, stream, index)`; independent per-item
/// seeds make results independent of scheduling.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub problem: ProblemSpec,
    pub compliance: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub nx: usize,
    pub ny: usize,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub train_bc: Vec<usize>,
    pub test_bc: Vec<usize>,
    pub norm: Normalization,
    pub excluded_nonconverged: usize,
    pub samples: Vec<SampleMeta>,
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn format_loads(loads: &[Load]) -> String {
    loads.iter().map(|l| format!("{}:{}:{}", l.node, l.fx, l.fy)).collect::<Vec<_>>().join(";")
}

pub fn parse_loads(s: &str) -> Result<Vec<Load>> {
    let bad = || CoreError::Format(format!("bad load list `{s}`"));
    s.split(';')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(Load {
                node: parts[0].parse().map_err(|_| bad())?,
                fx: parts[1].parse().map_err(|_| bad())?,
                fy: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|v| v.parse().map_err(|_| CoreError::Format(format!("bad id list `{s}`")))).collect()
}

/// Manifest keys for a problem under `prefix` (`volfrac`, `bc`, `loads`).
pub fn write_problem_kv(kv: &mut KvFile, prefix: &str, p: &ProblemSpec) {
    kv.set(format!("{prefix}.volfrac"), p.volfrac);
    kv.set(format!("{prefix}.bc"), p.bc.scenario);
    kv.set(format!("{prefix}.loads"), format_loads(&p.loads));
}

pub fn read_problem_kv(kv: &KvFile, prefix: &str, nx: usize, ny: usize) -> Result<ProblemSpec> {
    let domain = GridDomain::new(nx, ny)?;
    Ok(ProblemSpec {
        nx,
        ny,
        volfrac: kv.parse(&format!("{prefix}.volfrac"))?,
        bc: bc_catalog(kv.parse(&format!("{prefix}.bc"))?, &domain)?,
        loads: parse_loads(kv.require(&format!("{prefix}.loads"))?)?,
    })
}

impl DatasetManifest {
    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("format", "tgdataset");
        kv.set("version", 1);
        kv.set("grid.nx", self.nx);
        kv.set("grid.ny", self.ny);
        kv.set("seed", self.seed);
        for s in Split::ALL {
            kv.set(format!("size.{}", s.name()), self.sizes.get(s));
        }
        kv.set("bc.train", join(&self.train_bc, ","));
        kv.set("bc.test", join(&self.test_bc, ","));
        self.norm.write_kv(&mut kv);
        kv.set("excluded_nonconverged", self.excluded_nonconverged);
        kv.set("samples", self.samples.len());
        for m in &self.samples {
            let p = format!("sample.{:05}", m.index);
            kv.set(format!("{p}.split"), m.split.name());
            kv.set(format!("{p}.seed"), m.seed);
            write_problem_kv(&mut kv, &p, &m.problem);
            kv.set(format!("{p}.compliance"), m.compliance);
            kv.set(format!("{p}.iterations"), m.iterations);
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        if kv.get("format") != Some("tgdataset") {
            return Err(CoreError::Format("not a dataset manifest".into()));
        }
        let nx = kv.parse("grid.nx")?;
        let ny = kv.parse("grid.ny")?;
        let sizes = SplitSizes {
            train: kv.parse("size.train")?,
            validation: kv.parse("size.validation")?,
            level1: kv.parse("size.level1")?,
            level2: kv.parse("size.level2")?,
        };
        let count: usize = kv.parse("samples")?;
        let mut samples = Vec::with_capacity(count);
        for index in 0..count {
            let p = format!("sample.{index:05}");
            samples.push(SampleMeta {
                index,
                split: Split::parse(kv.require(&format!("{p}.split"))?)?,
                seed: kv.parse(&format!("{p}.seed"))?,
                problem: read_problem_kv(kv, &p, nx, ny)?,
                compliance: kv.parse(&format!("{p}.compliance"))?,
                iterations: kv.parse(&format!("{p}.iterations"))?,
            });
        }
        Ok(Self {
            nx,
            ny,
            seed: kv.parse("seed")?,
            sizes,
            train_bc: parse_ids(kv.require("bc.train")?)?,
            test_bc: parse_ids(kv.require("bc.test")?)?,
            norm: Normalization::read_kv(kv)?,
            excluded_nonconverged: kv.parse("excluded_nonconverged")?,
            samples,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleMeta> {
        self.samples.iter().filter(move |m| m.split == split)
    }
}

pub fn sample_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.tgs"))
}

/// Solve one problem for the dataset: SIMP ground truth plus the fields of
/// the solid domain.
pub fn solve_problem(problem: &ProblemSpec, simp: &SimpParams) -> Result<(SimpResult, FieldSet)> {
    let result = optimize(problem, simp)?;
    let fields = physical_fields(&problem.domain()?, &problem.bc, &problem.loads)?;
    Ok((result, fields))
}

pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CoreError::Invalid(format!("thread pool: {e}")))
}

/// Generate every split, write one sample file per accepted problem and the
/// manifest. Problems are unique across splits; SIMP runs that hit the
/// iteration cap are excluded and replaced by the next candidate.
pub fn build_main_dataset(dir: &Path, config: &DatasetConfig) -> Result<DatasetManifest> {
    config.constraints.validate()?;
    fs::create_dir_all(dir)?;
    let pool = thread_pool(config.threads)?;
    let mut seen = HashSet::new();
    let mut accepted: Vec<(Split, u64, ProblemSpec, SimpResult, FieldSet)> = Vec::new();
    let mut excluded = 0;
    for split in Split::ALL {
        let want = config.sizes.get(split);
        let mut next = 0u64;
        let mut have = 0;
        while have < want {
            // Candidates are drawn sequentially so duplicate rejection does
            // not depend on the thread count.
            let mut batch = Vec::new();
            while batch.len() < want - have {
                let seed = derive_seed(config.seed, split.stream(), next);
                next += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = sample_problem(&mut rng, &config.constraints, split.bc_split(), config.nx, config.ny)?;
                if seen.insert(p.key()) {
                    batch.push((seed, p));
                }
            }
            let solved: Vec<Result<(SimpResult, FieldSet)>> =
                pool.install(|| batch.par_iter().map(|(_, p)| solve_problem(p, &config.simp)).collect());
            for ((seed, p), r) in batch.into_iter().zip(solved) {
                let (res, fields) = r?;
                if res.converged {
                    accepted.push((split, seed, p, res, fields));
                    have += 1;
                } else {
                    excluded += 1;
                }
            }
        }
    }
    let mut tensors = Vec::with_capacity(accepted.len());
    let mut samples = Vec::with_capacity(accepted.len());
    for (index, (split, seed, problem, res, fields)) in accepted.into_iter().enumerate() {
        tensors.push((split, main_sample(&problem, &fields, &res.topology)?));
        samples.push(SampleMeta {
            index,
            split,
            seed,
            compliance: res.compliance(),
            iterations: res.history.len() - 1,
            problem,
        });
    }
    let train: Vec<&SampleTensor> = tensors.iter().filter(|t| t.0 == Split::Train).map(|t| &t.1).collect();
    let manifest = DatasetManifest {
        nx: config.nx,
        ny: config.ny,
        seed: config.seed,
        sizes: config.sizes,
        train_bc: config.constraints.train_bc.clone(),
        test_bc: config.constraints.test_bc.clone(),
        norm: Normalization::fit(&train),
        excluded_nonconverged: excluded,
        samples,
    };
    for (i, (_, t)) in tensors.iter().enumerate() {
        write_sample(&sample_path(dir, i), t)?;
    }
    manifest.to_kv().write(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleTensor>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::from_kv(&KvFile::read(&dir.join(MANIFEST_NAME))?)?;
        let samples =
            (0..manifest.samples.len()).map(|i| read_sample(&sample_path(dir, i))).collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split(split).map(|m| m.index).collect()
    }

    pub fn topology(&self, index: usize) -> Topology {
        let s = &self.samples[index];
        Topology { nx: s.width, ny: s.height, densities: s.plane(Channel::Topology).unwrap().to_vec() }
    }

    pub fn conditioning(&self, index: usize) -> Vec<f64> {
        conditioning(&self.samples[index], &self.manifest.norm)
    }

    pub fn fields(&self, index: usize) -> FieldSet {
        let s = &self.samples[index];
        FieldSet {
            von_mises: s.plane(Channel::VonMises).unwrap().to_vec(),
            sed: s.plane(Channel::Sed).unwrap().to_vec(),
        }
    }
}

/// Offline audit of a dataset directory; returns every violated invariant.
pub fn verify_dataset(dir: &Path) -> Result<Vec<String>> {
    let data = Dataset::load(dir)?;
    let m = &data.manifest;
    let mut issues = Vec::new();
    for s in Split::ALL {
        let n = m.split(s).count();
        if n != m.sizes.get(s) {
            issues.push(format!("split {} holds {n} samples, manifest says {}", s.name(), m.sizes.get(s)));
        }
    }
    if m.test_bc.iter().any(|id| m.train_bc.contains(id)) {
        issues.push("level-2 scenarios overlap training scenarios".into());
    }
    let mut keys = HashSet::new();
    for (meta, t) in m.samples.iter().zip(&data.samples) {
        let i = meta.index;
        let p = &meta.problem;
        let domain = p.domain()?;
        if !keys.insert(p.key()) {
            issues.push(format!("sample {i}: duplicate problem"));
        }
        let allowed = if meta.split == Split::Level2 { &m.test_bc } else { &m.train_bc };
        if !allowed.contains(&p.bc.scenario) {
            issues.push(format!("sample {i}: scenario {} not allowed in {}", p.bc.scenario, meta.split.name()));
        }
        if t.channels != 6 || t.height != m.ny || t.width != m.nx {
            issues.push(format!("sample {i}: shape {}x{}x{}", t.channels, t.height, t.width));
            continue;
        }
        if p.loads.is_empty() || p.loads.iter().any(|l| !load_admissible(&domain, &p.bc, l)) {
            issues.push(format!("sample {i}: inadmissible load"));
        }
        if t.plane(Channel::Topology).unwrap().iter().any(|d| !(0.0..=1.0).contains(d)) {
            issues.push(format!("sample {i}: density outside [0, 1]"));
        }
        let v = p.volfrac as f32 as f64;
        if t.plane(Channel::Volume).unwrap().iter().any(|&x| x != v) {
            issues.push(format!("sample {i}: volume plane differs from {}", p.volfrac));
        }
        for c in [Channel::VonMises, Channel::Sed] {
            if t.plane(c).unwrap().iter().any(|&x| !(x >= 0.0)) {
                issues.push(format!("sample {i}: negative {c:?}"));
            }
        }
        let [lx, ly] = load_planes(&domain, &p.loads);
        let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
        if t.plane(Channel::LoadX).unwrap() != as_f32(&lx) || t.plane(Channel::LoadY).unwrap() != as_f32(&ly) {
            issues.push(format!("sample {i}: load planes disagree with the manifest"));
        }
    }
    Ok(issues)
}
