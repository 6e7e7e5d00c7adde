//! Noise-aware guidance surrogates and their training sets.
//!
//! The regressor sees the noisy design together with seven problem planes
//! (volume, von Mises, SED, load x/y, fixed x/y) and predicts compliance
//! divided by the training-label mean. The classifier sees only the noisy
//! design and returns the log-probability that it is free of floating
//! material. Both are conditioned on the original-scale timestep through a
//! sinusoidal embedding and use smooth activations throughout.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use tgtensor::checkpoint;
use tgtensor::kv::KvFile;
use tgtensor::layers::{Conv2d, GroupNorm, Linear, ResBlock, TimeEmbedding};
use tgtensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

use crate::dataset::{
    bc_planes, conditioning, derive_seed, main_sample, read_problem_kv, read_sample, sample_path, thread_pool,
    write_problem_kv, write_sample, Channel, Normalization, SampleTensor, MANIFEST_NAME,
};
use crate::diffusion::{q_sample, Schedule, ScheduleKind};
use crate::error::{CoreError, Result};
use crate::fea::{compliance, FieldSet, Topology};
use crate::metrics::{component_count, floating_material, Connectivity, EVAL_PENAL};
use crate::problem::{add_floating_material, fake_load_perturb, ProblemSpec};
use crate::simp::{optimize, SimpParams};

/// Problem planes fed to the regressor next to the noisy design.
pub const AUX_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Simp,
    FakeLoad,
    Diffusion,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simp => "simp",
            Self::FakeLoad => "fake_load",
            Self::Diffusion => "diffusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simp" => Ok(Self::Simp),
            "fake_load" => Ok(Self::FakeLoad),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(CoreError::Format(format!("unknown provenance `{other}`"))),
        }
    }
}

/// Upper bounds on raw compliance labels, per source family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutlierCutoffs {
    /// SIMP and fake-load designs.
    pub optimizer: f64,
    pub diffusion: f64,
}

impl Default for OutlierCutoffs {
    fn default() -> Self {
        Self { optimizer: 50.0, diffusion: 25.0 }
    }
}

/// A design together with the problem it is scored under. `group` identifies
/// the originating problem and keeps train/validation splits leak-free.
#[derive(Clone, Debug)]
pub struct LabeledDesign {
    pub group: u64,
    pub problem: ProblemSpec,
    pub fields: FieldSet,
    pub topology: Topology,
}

#[derive(Clone, Debug)]
pub struct RegressorSample {
    pub group: u64,
    pub provenance: Provenance,
    pub problem: ProblemSpec,
    /// Raw eight-channel tensor; the topology plane is binarized.
    pub tensor: SampleTensor,
    /// Compliance of the binarized design, unnormalized.
    pub label: f64,
}

/// Eight-channel raw tensor in the regressor layout.
pub fn regressor_tensor(problem: &ProblemSpec, fields: &FieldSet, topology: &Topology) -> Result<SampleTensor> {
    let main = main_sample(problem, fields, topology)?;
    let [bx, by] = bc_planes(&problem.domain()?, problem);
    let mut values = main.values;
    values.extend(bx);
    values.extend(by);
    SampleTensor::new(8, problem.ny, problem.nx, values)
}

/// Normalized problem planes of a regressor tensor, `AUX_CHANNELS * H * W`.
pub fn regressor_aux(tensor: &SampleTensor, norm: &Normalization) -> Vec<f64> {
    let mut out = conditioning(tensor, norm);
    out.extend(tensor.plane(Channel::BcX).expect("regressor layout"));
    out.extend(tensor.plane(Channel::BcY).expect("regressor layout"));
    out
}

/// Normalized problem planes for sampling-time guidance; independent of
/// the design.
pub fn problem_planes(problem: &ProblemSpec, fields: &FieldSet, norm: &Normalization) -> Result<Vec<f64>> {
    let empty = Topology::uniform(problem.nx, problem.ny, 0.0);
    Ok(regressor_aux(&regressor_tensor(problem, fields, &empty)?, norm))
}

/// Training/validation example: clean design in `[-1, 1]`, problem planes
/// and a raw label.
#[derive(Clone, Debug)]
pub struct RegressorExample {
    pub x0: Vec<f64>,
    pub aux: Vec<f64>,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct RegressorDataset {
    pub nx: usize,
    pub ny: usize,
    pub norm: Normalization,
    pub samples: Vec<RegressorSample>,
    /// Candidates dropped by the outlier cutoffs.
    pub filtered: usize,
}

/// Label every source design by the compliance of its binarized densities
/// and drop labels above the cutoffs. An empty source list is fine as long
/// as one of the three is non-empty.
pub fn build_regressor_dataset(
    simp: &[LabeledDesign],
    fake_load: &[LabeledDesign],
    diffusion: &[LabeledDesign],
    norm: Normalization,
    cutoffs: OutlierCutoffs,
    threads: usize,
) -> Result<RegressorDataset> {
    let tagged: Vec<(Provenance, &LabeledDesign)> = simp
        .iter()
        .map(|d| (Provenance::Simp, d))
        .chain(fake_load.iter().map(|d| (Provenance::FakeLoad, d)))
        .chain(diffusion.iter().map(|d| (Provenance::Diffusion, d)))
        .collect();
    let Some((_, first)) = tagged.first() else {
        return Err(CoreError::EmptySources);
    };
    let (nx, ny) = (first.problem.nx, first.problem.ny);
    if tagged.iter().any(|(_, d)| d.problem.nx != nx || d.problem.ny != ny) {
        return Err(CoreError::Invalid("sources mix grid sizes".into()));
    }
    let labeled: Vec<Result<Option<RegressorSample>>> = thread_pool(threads)?.install(|| {
        tagged
            .par_iter()
            .map(|&(provenance, d)| {
                let topology = d.topology.binarized();
                let p = &d.problem;
                let label = compliance(&p.domain()?, &p.bc, &p.loads, &topology.densities, EVAL_PENAL)?;
                let cutoff = match provenance {
                    Provenance::Diffusion => cutoffs.diffusion,
                    _ => cutoffs.optimizer,
                };
                if !(label.is_finite() && label <= cutoff) {
                    return Ok(None);
                }
                Ok(Some(RegressorSample {
                    group: d.group,
                    provenance,
                    problem: p.clone(),
                    tensor: regressor_tensor(p, &d.fields, &topology)?,
                    label,
                }))
            })
            .collect()
    });
    let mut samples = Vec::with_capacity(labeled.len());
    let mut filtered = 0;
    for r in labeled {
        match r? {
            Some(s) => samples.push(s),
            None => filtered += 1,
        }
    }
    Ok(RegressorDataset { nx, ny, norm, samples, filtered })
}

/// Non-optimal designs: re-optimize each problem with one extra random load
/// and keep the result labeled under the original problem.
pub fn fake_load_designs(
    sources: &[LabeledDesign],
    simp: &SimpParams,
    seed: u64,
    threads: usize,
) -> Result<Vec<LabeledDesign>> {
    thread_pool(threads)?.install(|| {
        sources
            .par_iter()
            .enumerate()
            .map(|(i, d)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xFA4E, i as u64));
                let perturbed = fake_load_perturb(&d.problem, &mut rng)?;
                let result = optimize(&perturbed, simp)?;
                Ok(LabeledDesign { topology: result.topology, ..d.clone() })
            })
            .collect()
    })
}

impl RegressorDataset {
    pub fn examples(&self, indices: &[usize]) -> Vec<RegressorExample> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                RegressorExample {
                    x0: s.tensor.plane(Channel::Topology).unwrap().iter().map(|d| 2.0 * d - 1.0).collect(),
                    aux: regressor_aux(&s.tensor, &self.norm),
                    label: s.label,
                }
            })
            .collect()
    }

    pub fn groups(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.group).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut kv = KvFile::new();
        kv.set("format", "tgregressor");
        kv.set("grid.nx", self.nx);
        kv.set("grid.ny", self.ny);
        self.norm.write_kv(&mut kv);
        kv.set("filtered", self.filtered);
        kv.set("samples", self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let p = format!("sample.{i:05}");
            kv.set(format!("{p}.group"), s.group);
            kv.set(format!("{p}.provenance"), s.provenance.name());
            kv.set(format!("{p}.label"), s.label);
            write_problem_kv(&mut kv, &p, &s.problem);
            write_sample(&sample_path(dir, i), &s.tensor)?;
        }
        kv.write(&dir.join(MANIFEST_NAME))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KvFile::read(&dir.join(MANIFEST_NAME))?;
        if kv.get("format") != Some("tgregressor") {
            return Err(CoreError::Format("not a regressor dataset".into()));
        }
        let (nx, ny) = (kv.parse("grid.nx")?, kv.parse("grid.ny")?);
        let count: usize = kv.parse("samples")?;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let p = format!("sample.{i:05}");
            let tensor = read_sample(&sample_path(dir, i))?;
            if tensor.channels != 8 || tensor.height != ny || tensor.width != nx {
                return Err(CoreError::Format(format!("sample {i} has the wrong shape")));
            }
            samples.push(RegressorSample {
                group: kv.parse(&format!("{p}.group"))?,
                provenance: Provenance::parse(kv.require(&format!("{p}.provenance"))?)?,
                label: kv.parse(&format!("{p}.label"))?,
                problem: read_problem_kv(&kv, &p, nx, ny)?,
                tensor,
            });
        }
        Ok(Self { nx, ny, norm: Normalization::read_kv(&kv)?, samples, filtered: kv.parse("filtered")? })
    }
}

/// Clean single-component design offered to the classifier set builder.
#[derive(Clone, Debug)]
pub struct ClassifierSource {
    pub group: u64,
    pub topology: Topology,
    /// Elements that must stay free of added material (loads, supports).
    pub keep_out: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ClassifierSample {
    pub group: u64,
    /// Binary one-channel design.
    pub tensor: SampleTensor,
    pub augmented: bool,
    /// Oracle label: the design has a single material component.
    pub no_fm: bool,
}

#[derive(Clone, Debug)]
pub struct ClassifierExample {
    pub x0: Vec<f64>,
    pub no_fm: bool,
}

#[derive(Clone, Debug)]
pub struct ClassifierDataset {
    pub nx: usize,
    pub ny: usize,
    pub samples: Vec<ClassifierSample>,
    /// Sources rejected for not being a single component.
    pub skipped: usize,
}

/// Half of the single-component sources (chosen by a seeded shuffle) receive
/// a detached blob of material; labels come from the connectivity oracle.
/// Sources without room for a blob stay clean and the next candidate in the
/// shuffled order is augmented instead.
pub fn build_classifier_dataset(sources: &[ClassifierSource], seed: u64) -> Result<ClassifierDataset> {
    let Some(first) = sources.first() else {
        return Err(CoreError::EmptySources);
    };
    let (nx, ny) = (first.topology.nx, first.topology.ny);
    let mut skipped = 0;
    let mut valid = Vec::new();
    for s in sources {
        if s.topology.nx != nx || s.topology.ny != ny {
            return Err(CoreError::Invalid("sources mix grid sizes".into()));
        }
        let t = s.topology.binarized();
        if component_count(&t, Connectivity::Eight) == 1 {
            valid.push((s, t));
        } else {
            skipped += 1;
        }
    }
    let mut order: Vec<usize> = (0..valid.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = valid.len() / 2;
    let mut designs: Vec<(Topology, bool)> = valid.iter().map(|(_, t)| (t.clone(), false)).collect();
    let mut done = 0;
    for &i in &order {
        if done == target {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB10B, i as u64));
        match add_floating_material(&valid[i].1, &valid[i].0.keep_out, &mut rng) {
            Ok(t) => {
                designs[i] = (t, true);
                done += 1;
            }
            Err(CoreError::NoSpace) => {}
            Err(e) => return Err(e),
        }
    }
    let samples = valid
        .iter()
        .zip(designs)
        .map(|((src, _), (t, augmented))| {
            Ok(ClassifierSample {
                group: src.group,
                no_fm: !floating_material(&t, Connectivity::Eight)?,
                tensor: SampleTensor::new(1, ny, nx, t.densities)?,
                augmented,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassifierDataset { nx, ny, samples, skipped })
}

impl ClassifierDataset {
    pub fn examples(&self, indices: &[usize]) -> Vec<ClassifierExample> {
        indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                ClassifierExample { x0: s.tensor.values.iter().map(|d| 2.0 * d - 1.0).collect(), no_fm: s.no_fm }
            })
            .collect()
    }

    pub fn groups(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.group).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut kv = KvFile::new();
        kv.set("format", "tgclassifier");
        kv.set("grid.nx", self.nx);
        kv.set("grid.ny", self.ny);
        kv.set("skipped", self.skipped);
        kv.set("samples", self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let p = format!("sample.{i:05}");
            kv.set(format!("{p}.group"), s.group);
            kv.set(format!("{p}.augmented"), s.augmented);
            kv.set(format!("{p}.no_fm"), s.no_fm);
            write_sample(&sample_path(dir, i), &s.tensor)?;
        }
        kv.write(&dir.join(MANIFEST_NAME))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KvFile::read(&dir.join(MANIFEST_NAME))?;
        if kv.get("format") != Some("tgclassifier") {
            return Err(CoreError::Format("not a classifier dataset".into()));
        }
        let (nx, ny) = (kv.parse("grid.nx")?, kv.parse("grid.ny")?);
        let count: usize = kv.parse("samples")?;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let p = format!("sample.{i:05}");
            let tensor = read_sample(&sample_path(dir, i))?;
            if tensor.channels != 1 || tensor.height != ny || tensor.width != nx {
                return Err(CoreError::Format(format!("sample {i} has the wrong shape")));
            }
            samples.push(ClassifierSample {
                group: kv.parse(&format!("{p}.group"))?,
                augmented: kv.parse(&format!("{p}.augmented"))?,
                no_fm: kv.parse(&format!("{p}.no_fm"))?,
                tensor,
            });
        }
        Ok(Self { nx, ny, samples, skipped: kv.parse("skipped")? })
    }
}

/// Split sample indices so that every group lands wholly in training or
/// wholly in validation. Membership depends only on `(seed, group)`.
pub fn split_by_group(groups: &[u64], validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, &g) in groups.iter().enumerate() {
        let u = (derive_seed(seed, 0x5B117, g) >> 11) as f64 / (1u64 << 53) as f64;
        if u < validation_fraction {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseBand {
    /// `t < T/4`.
    Low,
    /// `T/4 <= t < 3T/4`.
    Mid,
    /// `t >= 3T/4`.
    High,
}

impl NoiseBand {
    pub const ALL: [NoiseBand; 3] = [NoiseBand::Low, NoiseBand::Mid, NoiseBand::High];

    pub fn of(t: usize, t_max: usize) -> Self {
        if 4 * t < t_max {
            Self::Low
        } else if 4 * t < 3 * t_max {
            Self::Mid
        } else {
            Self::High
        }
    }

    /// Inclusive timestep range of the band; `None` if it is empty.
    pub fn range(self, t_max: usize) -> Option<(usize, usize)> {
        let mut ts = (1..=t_max).filter(|&t| Self::of(t, t_max) == self);
        let lo = ts.next()?;
        Some((lo, ts.last().unwrap_or(lo)))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }
}

/// Validation metric of one noise band: R² for the regressor (`None` when
/// labels have no variance), accuracy for the classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandMetric {
    pub band: NoiseBand,
    pub value: Option<f64>,
    pub count: usize,
}

pub fn format_bands(metrics: &[BandMetric]) -> String {
    metrics
        .iter()
        .map(|m| match m.value {
            Some(v) => format!("{}={v:.4}", m.band.name()),
            None => format!("{}=undefined", m.band.name()),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Coefficient of determination; `None` for constant labels.
pub fn r_squared(labels: &[f64], predictions: &[f64]) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = labels.iter().zip(predictions).map(|(y, p)| (y - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub time_dim: usize,
    /// Length of the diffusion schedule the surrogate is trained against.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub adam: AdamConfig,
}

impl SurrogateConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            base_width: 16,
            time_dim: 32,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            adam: AdamConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(CoreError::Invalid("grid sides must be positive multiples of 4".into()));
        }
        if self.base_width == 0 || self.time_dim < 2 {
            return Err(CoreError::Invalid("surrogate widths must be positive".into()));
        }
        Ok(())
    }

    fn write_kv(&self, kv: &mut KvFile, kind: &str) {
        kv.set("kind", kind);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("base_width", self.base_width);
        kv.set("time_dim", self.time_dim);
        kv.set("timesteps", self.timesteps);
        kv.set("schedule", self.schedule.name());
        kv.set("adam.lr", self.adam.lr);
    }

    fn read_kv(kv: &KvFile, kind: &str) -> Result<Self> {
        if kv.get("kind") != Some(kind) {
            return Err(CoreError::Format(format!("checkpoint is not a {kind}")));
        }
        Ok(Self {
            height: kv.parse("height")?,
            width: kv.parse("width")?,
            base_width: kv.parse("base_width")?,
            time_dim: kv.parse("time_dim")?,
            timesteps: kv.parse("timesteps")?,
            schedule: kv.require("schedule")?.parse()?,
            adam: AdamConfig { lr: kv.parse("adam.lr")?, ..AdamConfig::default() },
        })
    }
}

/// UNet-style encoder (three resolutions) with a pooled dense head.
#[derive(Clone, Debug)]
pub struct RegressorNet {
    time: TimeEmbedding,
    conv_in: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    down2: Conv2d,
    enc3: ResBlock,
    norm: GroupNorm,
    fc1: Linear,
    fc2: Linear,
}

impl RegressorNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        let (w, td) = (width, time_dim);
        let p = |s: &str| format!("{name}.{s}");
        Self {
            time: TimeEmbedding::new(store, &p("time"), td, td, rng),
            conv_in: Conv2d::new(store, &p("conv_in"), 1 + AUX_CHANNELS, w, 3, 1, rng),
            enc1: ResBlock::new(store, &p("enc1"), w, w, td, rng),
            down1: Conv2d::new(store, &p("down1"), w, 2 * w, 3, 2, rng),
            enc2: ResBlock::new(store, &p("enc2"), 2 * w, 2 * w, td, rng),
            down2: Conv2d::new(store, &p("down2"), 2 * w, 2 * w, 3, 2, rng),
            enc3: ResBlock::new(store, &p("enc3"), 2 * w, 2 * w, td, rng),
            norm: GroupNorm::new(store, &p("norm"), 2 * w),
            fc1: Linear::new(store, &p("fc1"), 2 * w, w, rng),
            fc2: Linear::new(store, &p("fc2"), w, 1, rng),
        }
    }

    /// `x [N, 1, H, W]`, `aux [N, 7, H, W]` -> `[N, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        aux: Var,
        steps: &[f64],
    ) -> tgtensor::Result<Var> {
        let temb = self.time.forward(tape, store, steps)?;
        let h = tape.concat(x, aux)?;
        let h = self.conv_in.forward(tape, store, h)?;
        let h = self.enc1.forward(tape, store, h, temb)?;
        let h = self.down1.forward(tape, store, h)?;
        let h = self.enc2.forward(tape, store, h, temb)?;
        let h = self.down2.forward(tape, store, h)?;
        let h = self.enc3.forward(tape, store, h, temb)?;
        let h = self.norm.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = tape.global_avg_pool(h)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Four convolutions with a time projection after the first, pooled into a
/// single logit.
#[derive(Clone, Debug)]
pub struct ClassifierNet {
    time: TimeEmbedding,
    conv1: Conv2d,
    time_proj: Linear,
    conv2: Conv2d,
    conv3: Conv2d,
    conv4: Conv2d,
    head: Linear,
}

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        let (w, td) = (width, time_dim);
        let p = |s: &str| format!("{name}.{s}");
        Self {
            time: TimeEmbedding::new(store, &p("time"), td, td, rng),
            conv1: Conv2d::new(store, &p("conv1"), 1, w, 3, 1, rng),
            time_proj: Linear::new(store, &p("time_proj"), td, w, rng),
            conv2: Conv2d::new(store, &p("conv2"), w, w, 3, 2, rng),
            conv3: Conv2d::new(store, &p("conv3"), w, 2 * w, 3, 2, rng),
            conv4: Conv2d::new(store, &p("conv4"), 2 * w, 2 * w, 3, 1, rng),
            head: Linear::new(store, &p("head"), 2 * w, 1, rng),
        }
    }

    /// Logit of "no floating material", `[N, 1]`.
    pub fn logit(&self, tape: &mut Tape, store: &ParamStore, x: Var, steps: &[f64]) -> tgtensor::Result<Var> {
        let temb = self.time.forward(tape, store, steps)?;
        let t = tape.silu(temb)?;
        let t = self.time_proj.forward(tape, store, t)?;
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.add_channel(h, t)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.conv3.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.conv4.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = tape.global_avg_pool(h)?;
        self.head.forward(tape, store, h)
    }

    /// `log p(no floating material)`, always `<= 0`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, steps: &[f64]) -> tgtensor::Result<Var> {
        let z = self.logit(tape, store, x, steps)?;
        tape.log_sigmoid(z)
    }
}

fn noisy_batch<R: Rng + ?Sized>(x0s: &[&[f64]], schedule: &Schedule, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x_t = Vec::new();
    let mut steps = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let t = rng.random_range(1..=schedule.len());
        let noise: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        x_t.extend(q_sample(x0, t, &noise, schedule)?);
        steps.push(t as f64);
    }
    Ok((x_t, steps))
}

/// Noisy copies of every validation design at `draws` timesteps per band,
/// drawn from a generator seeded with `seed`.
fn band_draws(
    n: usize,
    pixels: usize,
    schedule: &Schedule,
    draws: usize,
    seed: u64,
) -> Vec<(NoiseBand, usize, usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for band in NoiseBand::ALL {
        let Some((lo, hi)) = band.range(schedule.len()) else {
            continue;
        };
        for i in 0..n {
            for _ in 0..draws {
                let t = rng.random_range(lo..=hi);
                let noise = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();
                out.push((band, i, t, noise));
            }
        }
    }
    out
}

const EVAL_CHUNK: usize = 64;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(CoreError::Invalid(format!("{what} has {got} values, expected {want}")));
    }
    Ok(())
}

/// Compliance regressor with its optimizer state and label scale.
pub struct Regressor {
    pub config: SurrogateConfig,
    pub schedule: Schedule,
    pub store: ParamStore,
    /// Raw labels are divided by this before regression.
    pub label_scale: f64,
    net: RegressorNet,
    adam: Adam,
    steps_taken: usize,
}

impl Regressor {
    pub fn new(config: SurrogateConfig, label_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(label_scale > 0.0 && label_scale.is_finite()) {
            return Err(CoreError::Invalid(format!("label scale {label_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = RegressorNet::new(&mut store, "regressor", config.base_width, config.time_dim, &mut rng);
        Ok(Self {
            schedule: Schedule::new(config.timesteps, config.schedule)?,
            config,
            store,
            label_scale,
            net,
            adam: Adam::new(config.adam),
            steps_taken: 0,
        })
    }

    /// Mean of the training labels, the target scale.
    pub fn label_scale_of(examples: &[RegressorExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(CoreError::EmptyRecords);
        }
        Ok(examples.iter().map(|e| e.label).sum::<f64>() / examples.len() as f64)
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn net(&self) -> &RegressorNet {
        &self.net
    }

    fn pixels(&self) -> usize {
        self.config.height * self.config.width
    }

    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[RegressorExample], rng: &mut R) -> Result<f64> {
        let (h, w, px) = (self.config.height, self.config.width, self.pixels());
        let n = batch.len();
        for e in batch {
            check_len("design", e.x0.len(), px)?;
            check_len("problem planes", e.aux.len(), AUX_CHANNELS * px)?;
        }
        let x0s: Vec<&[f64]> = batch.iter().map(|e| e.x0.as_slice()).collect();
        let (x_t, steps) = noisy_batch(&x0s, &self.schedule, rng)?;
        let aux: Vec<f64> = batch.iter().flat_map(|e| e.aux.iter().copied()).collect();
        let target: Vec<f64> = batch.iter().map(|e| e.label / self.label_scale).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![n, 1, h, w], x_t)?)?;
        let av = tape.input(Tensor::new(vec![n, AUX_CHANNELS, h, w], aux)?)?;
        let pred = self.net.forward(&mut tape, &self.store, xv, av, &steps)?;
        let tv = tape.input(Tensor::new(vec![n, 1], target)?)?;
        let loss = tape.mse(pred, tv)?;
        let value = tape.value(loss)?.data()[0];
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss(self.steps_taken));
        }
        let grads = tape.backward(loss, None)?.param_grads(&self.store);
        self.adam.step(&mut self.store, &grads);
        self.steps_taken += 1;
        Ok(value)
    }

    /// Normalized predictions for `x [N, 1, H, W]`, `aux [N, 7, H, W]`.
    pub fn predict(&self, x: &Tensor, aux: &Tensor, steps: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let av = tape.input(aux.clone())?;
        let out = self.net.forward(&mut tape, &self.store, xv, av, steps)?;
        Ok(tape.value(out)?.data().to_vec())
    }

    /// Predictions and their gradient with respect to `x`.
    pub fn value_and_grad(&self, x: &Tensor, aux: &Tensor, steps: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let av = tape.input(aux.clone())?;
        let out = self.net.forward(&mut tape, &self.store, xv, av, steps)?;
        let total = tape.sum(out)?;
        let values = tape.value(out)?.data().to_vec();
        let grads = tape.backward(total, None)?;
        let g = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((values, g))
    }

    /// R² of normalized predictions per noise band.
    pub fn validate(&self, examples: &[RegressorExample], draws: usize, seed: u64) -> Result<Vec<BandMetric>> {
        let (h, w, px) = (self.config.height, self.config.width, self.pixels());
        let jobs = band_draws(examples.len(), px, &self.schedule, draws, seed);
        let mut preds = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(EVAL_CHUNK) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * px);
            let mut aux = Vec::with_capacity(n * AUX_CHANNELS * px);
            let mut steps = Vec::with_capacity(n);
            for (_, i, t, noise) in chunk {
                x.extend(q_sample(&examples[*i].x0, *t, noise, &self.schedule)?);
                aux.extend_from_slice(&examples[*i].aux);
                steps.push(*t as f64);
            }
            preds.extend(self.predict(
                &Tensor::new(vec![n, 1, h, w], x)?,
                &Tensor::new(vec![n, AUX_CHANNELS, h, w], aux)?,
                &steps,
            )?);
        }
        Ok(NoiseBand::ALL
            .iter()
            .map(|&band| {
                let (labels, p): (Vec<f64>, Vec<f64>) = jobs
                    .iter()
                    .zip(&preds)
                    .filter(|(j, _)| j.0 == band)
                    .map(|(j, p)| (examples[j.1].label / self.label_scale, *p))
                    .unzip();
                BandMetric { band, value: r_squared(&labels, &p), count: labels.len() }
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, extra: &KvFile) -> Result<()> {
        let mut meta = extra.clone();
        self.config.write_kv(&mut meta, "regressor");
        meta.set("label_scale", self.label_scale);
        meta.set("steps_taken", self.steps_taken);
        checkpoint::save(dir, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, KvFile)> {
        let (meta, store) = checkpoint::load(dir)?;
        let config = SurrogateConfig::read_kv(&meta, "regressor")?;
        let mut model = Self::new(config, meta.parse("label_scale")?, 0)?;
        checkpoint::copy_into(&mut model.store, &store)?;
        model.steps_taken = meta.parse("steps_taken")?;
        Ok((model, meta))
    }
}

/// Floating-material classifier with its optimizer state.
pub struct Classifier {
    pub config: SurrogateConfig,
    pub schedule: Schedule,
    pub store: ParamStore,
    net: ClassifierNet,
    adam: Adam,
    steps_taken: usize,
}

impl Classifier {
    pub fn new(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ClassifierNet::new(&mut store, "classifier", config.base_width, config.time_dim, &mut rng);
        Ok(Self {
            schedule: Schedule::new(config.timesteps, config.schedule)?,
            config,
            store,
            net,
            adam: Adam::new(config.adam),
            steps_taken: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn net(&self) -> &ClassifierNet {
        &self.net
    }

    fn pixels(&self) -> usize {
        self.config.height * self.config.width
    }

    /// One Adam step on the binary cross-entropy.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[ClassifierExample], rng: &mut R) -> Result<f64> {
        let (h, w, px) = (self.config.height, self.config.width, self.pixels());
        let n = batch.len();
        for e in batch {
            check_len("design", e.x0.len(), px)?;
        }
        let x0s: Vec<&[f64]> = batch.iter().map(|e| e.x0.as_slice()).collect();
        let (x_t, steps) = noisy_batch(&x0s, &self.schedule, rng)?;
        let y: Vec<f64> = batch.iter().map(|e| if e.no_fm { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![n, 1, h, w], x_t)?)?;
        let z = self.net.logit(&mut tape, &self.store, xv, &steps)?;
        let log_p = tape.log_sigmoid(z)?;
        let neg_z = tape.scale(z, -1.0)?;
        let log_q = tape.log_sigmoid(neg_z)?;
        let pos = tape.input(Tensor::new(vec![n, 1], y.clone())?)?;
        let neg = tape.input(Tensor::new(vec![n, 1], y.iter().map(|v| 1.0 - v).collect())?)?;
        let a = tape.mul(pos, log_p)?;
        let b = tape.mul(neg, log_q)?;
        let ll = tape.add(a, b)?;
        let ll = tape.mean(ll)?;
        let loss = tape.scale(ll, -1.0)?;
        let value = tape.value(loss)?.data()[0];
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss(self.steps_taken));
        }
        let grads = tape.backward(loss, None)?.param_grads(&self.store);
        self.adam.step(&mut self.store, &grads);
        self.steps_taken += 1;
        Ok(value)
    }

    /// `log p(no floating material)` per item of `x [N, 1, H, W]`.
    pub fn log_prob(&self, x: &Tensor, steps: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let out = self.net.forward(&mut tape, &self.store, xv, steps)?;
        Ok(tape.value(out)?.data().to_vec())
    }

    /// Log-probabilities and their gradient with respect to `x`.
    pub fn log_prob_and_grad(&self, x: &Tensor, steps: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let out = self.net.forward(&mut tape, &self.store, xv, steps)?;
        let total = tape.sum(out)?;
        let values = tape.value(out)?.data().to_vec();
        let grads = tape.backward(total, None)?;
        let g = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        Ok((values, g))
    }

    /// Accuracy per noise band, predicting "no floating material" when
    /// `p > 1/2`.
    pub fn validate(&self, examples: &[ClassifierExample], draws: usize, seed: u64) -> Result<Vec<BandMetric>> {
        let (h, w, px) = (self.config.height, self.config.width, self.pixels());
        let jobs = band_draws(examples.len(), px, &self.schedule, draws, seed);
        let mut scores = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(EVAL_CHUNK) {
            let n = chunk.len();
            let mut x = Vec::with_capacity(n * px);
            let mut steps = Vec::with_capacity(n);
            for (_, i, t, noise) in chunk {
                x.extend(q_sample(&examples[*i].x0, *t, noise, &self.schedule)?);
                steps.push(*t as f64);
            }
            scores.extend(self.log_prob(&Tensor::new(vec![n, 1, h, w], x)?, &steps)?);
        }
        Ok(NoiseBand::ALL
            .iter()
            .map(|&band| {
                let hits: Vec<bool> = jobs
                    .iter()
                    .zip(&scores)
                    .filter(|(j, _)| j.0 == band)
                    .map(|(j, s)| (*s > 0.5f64.ln()) == examples[j.1].no_fm)
                    .collect();
                let count = hits.len();
                BandMetric {
                    band,
                    value: (count > 0).then(|| hits.iter().filter(|&&h| h).count() as f64 / count as f64),
                    count,
                }
            })
            .collect())
    }

    pub fn save(&self, dir: &Path, extra: &KvFile) -> Result<()> {
        let mut meta = extra.clone();
        self.config.write_kv(&mut meta, "classifier");
        meta.set("steps_taken", self.steps_taken);
        checkpoint::save(dir, &self.store, &meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, KvFile)> {
        let (meta, store) = checkpoint::load(dir)?;
        let config = SurrogateConfig::read_kv(&meta, "classifier")?;
        let mut model = Self::new(config, 0)?;
        checkpoint::copy_into(&mut model.store, &store)?;
        model.steps_taken = meta.parse("steps_taken")?;
        Ok((model, meta))
    }
}
