//! On-disk layout of a sampling run: `run.txt` plus one single-channel
//! tensor (and optional PGM render) per generated design.

use std::path::Path;

use tgtensor::kv::KvFile;
use topoguide::dataset::{read_sample, render_topology, sample_path, write_sample, SampleTensor, Split};
use topoguide::fea::Topology;
use topoguide::guidance::GuidanceConfig;

use crate::error::{CliError, Result};

pub const RUN_NAME: &str = "run.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunItem {
    /// Dataset sample index of the problem.
    pub index: usize,
    pub rep: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub split: Split,
    pub reps: usize,
    pub seed: u64,
    pub steps: usize,
    pub dataset_seed: u64,
    pub guidance: GuidanceConfig,
    pub items: Vec<RunItem>,
    pub designs: Vec<Topology>,
}

impl SampleRun {
    pub fn save(&self, dir: &Path, render: bool) -> Result<()> {
        let mut kv = KvFile::new();
        kv.set("format", "tgrun");
        kv.set("split", self.split.name());
        kv.set("reps", self.reps);
        kv.set("seed", self.seed);
        kv.set("steps", self.steps);
        kv.set("dataset.seed", self.dataset_seed);
        self.guidance.write_kv(&mut kv, "guidance");
        kv.set("items", self.items.len());
        for (k, it) in self.items.iter().enumerate() {
            kv.set(format!("item.{k:05}.index"), it.index);
            kv.set(format!("item.{k:05}.rep"), it.rep);
            kv.set(format!("item.{k:05}.seed"), it.seed);
        }
        for (k, t) in self.designs.iter().enumerate() {
            let tensor = SampleTensor::new(1, t.ny, t.nx, t.densities.clone())?;
            write_sample(&sample_path(dir, k), &tensor)?;
            if render {
                render_topology(t, &dir.join(format!("{k:05}.pgm")))?;
            }
        }
        kv.write(&dir.join(RUN_NAME))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_NAME);
        if !path.is_file() {
            return Err(CliError::Path(format!("{} is not a sampling run", dir.display())));
        }
        let kv = KvFile::read(&path)?;
        if kv.get("format") != Some("tgrun") {
            return Err(CliError::Data(format!("{} has the wrong format", path.display())));
        }
        let n: usize = kv.parse("items")?;
        let mut items = Vec::with_capacity(n);
        let mut designs = Vec::with_capacity(n);
        for k in 0..n {
            items.push(RunItem {
                index: kv.parse(&format!("item.{k:05}.index"))?,
                rep: kv.parse(&format!("item.{k:05}.rep"))?,
                seed: kv.parse(&format!("item.{k:05}.seed"))?,
            });
            let t = read_sample(&sample_path(dir, k))?;
            if t.channels != 1 {
                return Err(CliError::Data(format!("design {k} has {} channels", t.channels)));
            }
            designs.push(Topology { nx: t.width, ny: t.height, densities: t.values });
        }
        Ok(Self {
            split: Split::parse(kv.require("split")?)?,
            reps: kv.parse("reps")?,
            seed: kv.parse("seed")?,
            steps: kv.parse("steps")?,
            dataset_seed: kv.parse("dataset.seed")?,
            guidance: GuidanceConfig::read_kv(&kv, "guidance")?,
            items,
            designs,
        })
    }
}
