use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgtensor::kv::KvFile;
use topoguide::dataset::{derive_seed, Dataset, Split, COND_CHANNELS};
use topoguide::diffusion::{Denoiser, DenoiserConfig, DiffusionExample, ScheduleKind};
use topoguide::surrogates::{
    format_bands, split_by_group, BandMetric, Classifier, ClassifierDataset, NoiseBand, Regressor, RegressorDataset,
    SurrogateConfig,
};

use crate::args::{Model, TrainArgs};
use crate::data::{CLASSIFIER_DIR, REGRESSOR_DIR};
use crate::error::{CliError, Result};
use crate::{prepare_out, require_dir};

pub const LOG_NAME: &str = "train_log.txt";
pub const VALIDATION_NAME: &str = "validation.txt";

const BATCH_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

fn pick<'a, T>(pool: &'a [T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T>
where
    T: Clone + 'a,
{
    (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

struct Log {
    text: String,
    every: usize,
}

impl Log {
    fn new(every: usize) -> Self {
        Self { text: String::new(), every: every.max(1) }
    }

    fn loss(&mut self, step: usize, loss: f64) {
        let _ = writeln!(self.text, "step {step} loss {loss:e}");
    }

    fn due(&self, step: usize, last: usize) -> bool {
        step % self.every == 0 || step == last
    }

    fn validation(&mut self, step: usize, what: &str) {
        eprintln!("step {step}: {what}");
        let _ = writeln!(self.text, "step {step} validation {what}");
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(LOG_NAME), &self.text)?;
        Ok(())
    }
}

fn write_bands(dir: &Path, metric: &str, bands: &[BandMetric]) -> Result<()> {
    let mut kv = KvFile::new();
    kv.set("metric", metric);
    // An empty validation split still reports every band.
    if bands.is_empty() {
        for band in NoiseBand::ALL {
            kv.set(format!("band.{}", band.name()), "undefined");
            kv.set(format!("band.{}.count", band.name()), 0);
        }
    }
    for b in bands {
        match b.value {
            Some(v) => kv.set(format!("band.{}", b.band.name()), format!("{v:e}")),
            None => kv.set(format!("band.{}", b.band.name()), "undefined"),
        }
        kv.set(format!("band.{}.count", b.band.name()), b.count);
    }
    kv.write(&dir.join(VALIDATION_NAME))?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    require_dir(&args.data, "dataset")?;
    if args.batch == 0 || args.steps == 0 {
        return Err(CliError::Usage("--steps and --batch must be positive".into()));
    }
    if !(0.0..1.0).contains(&args.val_fraction) {
        return Err(CliError::Usage("--val-fraction must lie in [0, 1)".into()));
    }
    let schedule: ScheduleKind = args.schedule.parse()?;
    prepare_out(&args.out)?;
    match args.model {
        Model::Diffusion => train_diffusion(args, schedule),
        Model::Regressor => train_regressor(args, schedule),
        Model::Classifier => train_classifier(args, schedule),
    }
}

fn extra(args: &TrainArgs) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("train.seed", args.seed);
    kv.set("train.batch", args.batch);
    kv.set("train.data", args.data.display());
    kv
}

fn diffusion_examples(data: &Dataset, split: Split) -> Vec<DiffusionExample> {
    data.indices(split)
        .into_iter()
        .map(|i| DiffusionExample {
            x0: data.topology(i).densities.iter().map(|d| 2.0 * d - 1.0).collect(),
            cond: data.conditioning(i),
        })
        .collect()
}

fn train_diffusion(args: &TrainArgs, schedule: ScheduleKind) -> Result<()> {
    let data = Dataset::load(&args.data)?;
    let train = diffusion_examples(&data, Split::Train);
    if train.is_empty() {
        return Err(CliError::Data("the train split is empty".into()));
    }
    let val = diffusion_examples(&data, Split::Validation);
    let mut config = DenoiserConfig::new(data.manifest.ny, data.manifest.nx, COND_CHANNELS);
    config.base_width = args.base_width.unwrap_or(config.base_width);
    config.time_dim = args.time_dim;
    config.timesteps = args.timesteps;
    config.schedule = schedule;
    config.adam.lr = args.lr;
    let mut model = Denoiser::new(config, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, BATCH_STREAM, 0));
    let mut log = Log::new(args.log_every);
    let val_loss = |model: &Denoiser| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, VALIDATION_STREAM, 0));
        let mut total = 0.0;
        for chunk in val.chunks(args.batch) {
            total += model.loss(chunk, &mut vrng)? * chunk.len() as f64;
        }
        Ok(Some(total / val.len() as f64))
    };
    let mut last_val = None;
    for step in 1..=args.steps {
        let batch = pick(&train, args.batch, &mut rng);
        let loss = model.train_step(&batch, &mut rng)?;
        log.loss(step, loss);
        if log.due(step, args.steps) {
            last_val = val_loss(&model)?;
            let shown = last_val.map_or("undefined".to_string(), |v| format!("{v:e}"));
            log.validation(step, &format!("loss={shown}"));
        }
    }
    model.save(&args.out, &extra(args))?;
    log.write(&args.out)?;
    let mut kv = KvFile::new();
    kv.set("metric", "noise_mse");
    kv.set("loss", last_val.map_or("undefined".to_string(), |v| format!("{v:e}")));
    kv.write(&args.out.join(VALIDATION_NAME))?;
    Ok(())
}

fn train_regressor(args: &TrainArgs, schedule: ScheduleKind) -> Result<()> {
    let set = RegressorDataset::load(&args.data.join(REGRESSOR_DIR))?;
    let (tr, va) = split_by_group(&set.groups(), args.val_fraction, derive_seed(args.seed, SPLIT_STREAM, 0));
    let train = set.examples(&tr);
    let val = set.examples(&va);
    if train.is_empty() {
        return Err(CliError::Data("no regressor training examples".into()));
    }
    let config = surrogate_config(args, set.ny, set.nx, schedule);
    let mut model = Regressor::new(config, Regressor::label_scale_of(&train)?, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, BATCH_STREAM, 0));
    let mut log = Log::new(args.log_every);
    let mut bands = Vec::new();
    for step in 1..=args.steps {
        let batch = pick(&train, args.batch, &mut rng);
        let loss = model.train_step(&batch, &mut rng)?;
        log.loss(step, loss);
        if log.due(step, args.steps) && !val.is_empty() {
            bands = model.validate(&val, args.val_draws, derive_seed(args.seed, VALIDATION_STREAM, 0))?;
            log.validation(step, &format!("r2 {}", format_bands(&bands)));
        }
    }
    model.save(&args.out, &extra(args))?;
    log.write(&args.out)?;
    write_bands(&args.out, "r2", &bands)
}

fn train_classifier(args: &TrainArgs, schedule: ScheduleKind) -> Result<()> {
    let set = ClassifierDataset::load(&args.data.join(CLASSIFIER_DIR))?;
    let (tr, va) = split_by_group(&set.groups(), args.val_fraction, derive_seed(args.seed, SPLIT_STREAM, 0));
    let train = set.examples(&tr);
    let val = set.examples(&va);
    if train.is_empty() {
        return Err(CliError::Data("no classifier training examples".into()));
    }
    let config = surrogate_config(args, set.ny, set.nx, schedule);
    let mut model = Classifier::new(config, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, BATCH_STREAM, 0));
    let mut log = Log::new(args.log_every);
    let mut bands = Vec::new();
    for step in 1..=args.steps {
        let batch = pick(&train, args.batch, &mut rng);
        let loss = model.train_step(&batch, &mut rng)?;
        log.loss(step, loss);
        if log.due(step, args.steps) && !val.is_empty() {
            bands = model.validate(&val, args.val_draws, derive_seed(args.seed, VALIDATION_STREAM, 0))?;
            log.validation(step, &format!("accuracy {}", format_bands(&bands)));
        }
    }
    model.save(&args.out, &extra(args))?;
    log.write(&args.out)?;
    write_bands(&args.out, "accuracy", &bands)
}

fn surrogate_config(args: &TrainArgs, ny: usize, nx: usize, schedule: ScheduleKind) -> SurrogateConfig {
    let mut config = SurrogateConfig::new(ny, nx);
    config.base_width = args.base_width.unwrap_or(config.base_width);
    config.time_dim = args.time_dim;
    config.timesteps = args.timesteps;
    config.schedule = schedule;
    config.adam.lr = args.lr;
    config
}
