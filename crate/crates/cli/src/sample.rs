use std::path::Path;

use rayon::prelude::*;
use tgtensor::kv::KvFile;
use tgtensor::Tensor;
use topoguide::dataset::{derive_seed, Dataset, Split, COND_CHANNELS};
use topoguide::diffusion::{p_sample_loop, Denoiser};
use topoguide::fea::Topology;
use topoguide::guidance::{ClassifierGuide, GuidanceConfig, GuidedHook, RegressorGuide};
use topoguide::surrogates::{problem_planes, Classifier, Regressor, AUX_CHANNELS};

use crate::args::{SampleArgs, SamplingArgs};
use crate::error::{CliError, Result};
use crate::run::{RunItem, SampleRun};
use crate::{pool, prepare_out, require_dir, threads};

/// Everything needed to draw designs for dataset problems.
pub struct Sampler<'a> {
    pub data: &'a Dataset,
    pub denoiser: &'a Denoiser,
    pub regressor: Option<&'a Regressor>,
    pub classifier: Option<&'a Classifier>,
    pub steps: usize,
    pub batch: usize,
    pub threads: usize,
}

/// Jobs for the first `limit` problems of a split, `reps` seeds each.
pub fn jobs(data: &Dataset, split: Split, limit: Option<usize>, reps: usize, seed: u64) -> Vec<RunItem> {
    let mut indices = data.indices(split);
    if let Some(l) = limit {
        indices.truncate(l);
    }
    indices
        .into_iter()
        .flat_map(|index| {
            (0..reps).map(move |rep| RunItem { index, rep, seed: derive_seed(seed, index as u64 + 1, rep as u64) })
        })
        .collect()
}

impl Sampler<'_> {
    fn check(&self, guidance: &GuidanceConfig) -> Result<()> {
        let c = &self.denoiser.config;
        let m = &self.data.manifest;
        if (c.height, c.width, c.cond_channels) != (m.ny, m.nx, COND_CHANNELS) {
            return Err(CliError::Data("denoiser does not match the dataset grid".into()));
        }
        guidance.validate(self.denoiser.schedule.len())?;
        if guidance.lambda_c > 0.0 && self.regressor.is_none() {
            return Err(CliError::Usage("regressor guidance needs --regressor".into()));
        }
        if guidance.lambda_fm > 0.0 && self.classifier.is_none() {
            return Err(CliError::Usage("classifier guidance needs --classifier".into()));
        }
        for (h, w) in self
            .regressor
            .map(|r| (r.config.height, r.config.width))
            .into_iter()
            .chain(self.classifier.map(|c| (c.config.height, c.config.width)))
        {
            if (h, w) != (m.ny, m.nx) {
                return Err(CliError::Data("surrogate does not match the dataset grid".into()));
            }
        }
        Ok(())
    }

    /// Generated densities for every job. Jobs are cut into fixed-size
    /// batches so results do not depend on the thread count.
    pub fn run(&self, guidance: &GuidanceConfig, items: &[RunItem]) -> Result<Vec<Topology>> {
        self.check(guidance)?;
        if self.batch == 0 || self.steps == 0 {
            return Err(CliError::Usage("--batch and --steps must be positive".into()));
        }
        let schedule = self.denoiser.schedule.respace(self.steps)?;
        let (nx, ny) = (self.data.manifest.nx, self.data.manifest.ny);
        let chunks: Vec<&[RunItem]> = items.chunks(self.batch).collect();
        let out: Vec<Result<Vec<Topology>>> = pool(self.threads)?.install(|| {
            chunks
                .par_iter()
                .map(|chunk| {
                    let n = chunk.len();
                    let mut cond = Vec::with_capacity(n * COND_CHANNELS * nx * ny);
                    for it in *chunk {
                        cond.extend(self.data.conditioning(it.index));
                    }
                    let cond = Tensor::new(vec![n, COND_CHANNELS, ny, nx], cond)?;
                    let regressor = match self.regressor.filter(|_| guidance.lambda_c > 0.0) {
                        Some(model) => {
                            let mut aux = Vec::with_capacity(n * AUX_CHANNELS * nx * ny);
                            for it in *chunk {
                                let m = &self.data.manifest.samples[it.index];
                                aux.extend(problem_planes(
                                    &m.problem,
                                    &self.data.fields(it.index),
                                    &self.data.manifest.norm,
                                )?);
                            }
                            Some(RegressorGuide::new(model, Tensor::new(vec![n, AUX_CHANNELS, ny, nx], aux)?)?)
                        }
                        None => None,
                    };
                    let classifier =
                        self.classifier.filter(|_| guidance.lambda_fm > 0.0).map(|model| ClassifierGuide { model });
                    let mut hook = GuidedHook {
                        config: *guidance,
                        regressor: regressor.as_ref().map(|g| g as _),
                        classifier: classifier.as_ref().map(|g| g as _),
                    };
                    let seeds: Vec<u64> = chunk.iter().map(|it| it.seed).collect();
                    let x = p_sample_loop(self.denoiser, &cond, &schedule, &mut hook, &seeds)?;
                    Ok(x.data().chunks(nx * ny).map(|d| Topology { nx, ny, densities: d.to_vec() }).collect())
                })
                .collect()
        });
        let mut designs = Vec::with_capacity(items.len());
        for r in out {
            designs.extend(r?);
        }
        Ok(designs)
    }
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    require_dir(path, "denoiser checkpoint")?;
    Ok(Denoiser::load(path)?.0)
}

pub fn load_regressor(path: &Path) -> Result<Regressor> {
    require_dir(path, "regressor checkpoint")?;
    Ok(Regressor::load(path)?.0)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    require_dir(path, "classifier checkpoint")?;
    Ok(Classifier::load(path)?.0)
}

fn guidance_from(args: &SampleArgs, t_max: usize) -> Result<GuidanceConfig> {
    let mut g = match &args.guidance {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Path(format!("guidance file {} not found", path.display())));
            }
            GuidanceConfig::read_kv(&KvFile::read(path)?, "guidance")?
        }
        None => GuidanceConfig { mln_c: t_max, mln_fm: t_max, ..GuidanceConfig::unguided() },
    };
    if let Some(v) = args.lambda_c {
        g.lambda_c = v;
    }
    if let Some(v) = args.lambda_fm {
        g.lambda_fm = v;
    }
    if let Some(v) = args.mln_c {
        g.mln_c = v;
    }
    if let Some(v) = args.mln_fm {
        g.mln_fm = v;
    }
    if args.regressor_first {
        g.classifier_first = false;
    }
    Ok(g)
}

pub fn check_sampling_paths(s: &SamplingArgs) -> Result<()> {
    require_dir(&s.data, "dataset")?;
    require_dir(&s.diffusion, "denoiser checkpoint")
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let s = &args.sampling;
    let split = Split::parse(&args.split)?;
    check_sampling_paths(s)?;
    for p in args.regressor.iter().chain(&args.classifier) {
        require_dir(p, "surrogate checkpoint")?;
    }
    prepare_out(&args.out)?;
    let data = Dataset::load(&s.data)?;
    let denoiser = load_denoiser(&s.diffusion)?;
    let guidance = guidance_from(args, denoiser.schedule.len())?;
    let regressor = args.regressor.as_deref().map(load_regressor).transpose()?;
    let classifier = args.classifier.as_deref().map(load_classifier).transpose()?;
    let items = jobs(&data, split, s.limit, args.reps, s.seed);
    if items.is_empty() {
        return Err(CliError::Data(format!("no problems to sample in split {}", split.name())));
    }
    let sampler = Sampler {
        data: &data,
        denoiser: &denoiser,
        regressor: regressor.as_ref(),
        classifier: classifier.as_ref(),
        steps: s.steps,
        batch: s.batch,
        threads: threads(s.threads),
    };
    let designs = sampler.run(&guidance, &items)?;
    let run = SampleRun {
        split,
        reps: args.reps,
        seed: s.seed,
        steps: s.steps,
        dataset_seed: data.manifest.seed,
        guidance,
        items,
        designs,
    };
    run.save(&args.out, !args.no_render)?;
    eprintln!("wrote {} designs to {}", run.items.len(), args.out.display());
    Ok(())
}
