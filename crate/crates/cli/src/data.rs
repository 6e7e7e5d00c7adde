use std::path::Path;

use topoguide::dataset::{build_main_dataset, derive_seed, verify_dataset, Dataset, DatasetConfig, Split, SplitSizes};
use topoguide::metrics::{floating_material, Connectivity};
use topoguide::problem::ConstraintConfig;
use topoguide::simp::SimpParams;
use topoguide::surrogates::{
    build_classifier_dataset, build_regressor_dataset, fake_load_designs, ClassifierDataset, ClassifierSource,
    LabeledDesign, OutlierCutoffs, RegressorDataset,
};

use crate::args::{GenDataArgs, VerifyArgs};
use crate::error::{CliError, Result};
use crate::run::SampleRun;
use crate::{parse_list, prepare_out, require_dir, threads};

pub const REGRESSOR_DIR: &str = "regressor";
pub const CLASSIFIER_DIR: &str = "classifier";

const FAKE_LOAD_STREAM: u64 = 0xFA4E_0001;
const CLASSIFIER_STREAM: u64 = 0xC1A5_0001;

fn parse_sizes(s: &str) -> Result<SplitSizes> {
    match s {
        "toy" => Ok(SplitSizes::TOY),
        "full" => Ok(SplitSizes::FULL),
        _ => match parse_list::<usize>(s, "split size")?[..] {
            [train, validation, level1, level2] => Ok(SplitSizes { train, validation, level1, level2 }),
            _ => Err(CliError::Usage(format!("--sizes needs four counts, got `{s}`"))),
        },
    }
}

/// Train-split designs of the dataset, grouped by problem seed.
fn train_designs(data: &Dataset) -> Vec<LabeledDesign> {
    data.manifest
        .split(Split::Train)
        .map(|m| LabeledDesign {
            group: m.seed,
            problem: m.problem.clone(),
            fields: data.fields(m.index),
            topology: data.topology(m.index),
        })
        .collect()
}

/// Designs of a sampling run over the training split of this dataset.
fn generated_designs(data: &Dataset, run_dir: &Path) -> Result<Vec<LabeledDesign>> {
    require_dir(run_dir, "generated run")?;
    let run = SampleRun::load(run_dir)?;
    if run.split != Split::Train || run.dataset_seed != data.manifest.seed {
        return Err(CliError::Data(format!(
            "{} must be a run over the train split of this dataset",
            run_dir.display()
        )));
    }
    run.items
        .iter()
        .zip(run.designs)
        .map(|(it, topology)| {
            let m = data
                .manifest
                .samples
                .get(it.index)
                .ok_or_else(|| CliError::Data(format!("run refers to missing sample {}", it.index)))?;
            Ok(LabeledDesign { group: m.seed, problem: m.problem.clone(), fields: data.fields(m.index), topology })
        })
        .collect()
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let threads = threads(args.threads);
    let mut constraints = ConstraintConfig::default();
    if let Some(s) = &args.train_bc {
        constraints.train_bc = parse_list(s, "scenario")?;
    }
    if let Some(s) = &args.test_bc {
        constraints.test_bc = parse_list(s, "scenario")?;
    }
    let config = DatasetConfig {
        nx: args.nx,
        ny: args.ny,
        seed: args.seed,
        sizes: parse_sizes(&args.sizes)?,
        constraints,
        simp: SimpParams { max_iters: args.simp_max_iters, ..SimpParams::default() },
        threads,
    };
    config.constraints.validate()?;
    config.simp.validate()?;
    if let Some(g) = &args.generated {
        require_dir(g, "generated run")?;
    }
    prepare_out(&args.out)?;

    let manifest = build_main_dataset(&args.out, &config)?;
    eprintln!(
        "main dataset: {} samples ({} non-converged candidates replaced)",
        manifest.samples.len(),
        manifest.excluded_nonconverged
    );
    let data = Dataset::load(&args.out)?;
    let simp = train_designs(&data);
    if simp.is_empty() {
        eprintln!("train split is empty; surrogate datasets skipped");
        return Ok(());
    }
    let fake = if args.no_fake_load {
        Vec::new()
    } else {
        fake_load_designs(&simp, &config.simp, derive_seed(args.seed, FAKE_LOAD_STREAM, 0), threads)?
    };
    let generated = match &args.generated {
        Some(dir) => generated_designs(&data, dir)?,
        None => Vec::new(),
    };
    let regressor =
        build_regressor_dataset(&simp, &fake, &generated, data.manifest.norm, OutlierCutoffs::default(), threads)?;
    regressor.save(&args.out.join(REGRESSOR_DIR))?;
    eprintln!("regressor dataset: {} samples ({} outliers dropped)", regressor.samples.len(), regressor.filtered);

    let sources = simp
        .iter()
        .chain(&fake)
        .map(|d| {
            Ok(ClassifierSource {
                group: d.group,
                topology: d.topology.clone(),
                keep_out: d.problem.keep_out_elements()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classifier = build_classifier_dataset(&sources, derive_seed(args.seed, CLASSIFIER_STREAM, 0))?;
    classifier.save(&args.out.join(CLASSIFIER_DIR))?;
    eprintln!(
        "classifier dataset: {} samples ({} multi-component sources skipped)",
        classifier.samples.len(),
        classifier.skipped
    );
    Ok(())
}

fn verify_surrogates(dir: &Path, data: &Dataset, issues: &mut Vec<String>) -> Result<()> {
    let (nx, ny) = (data.manifest.nx, data.manifest.ny);
    let rdir = dir.join(REGRESSOR_DIR);
    if rdir.is_dir() {
        let r = RegressorDataset::load(&rdir)?;
        if (r.nx, r.ny) != (nx, ny) {
            issues.push("regressor grid differs from the main dataset".into());
        }
        let cut = OutlierCutoffs::default();
        for (i, s) in r.samples.iter().enumerate() {
            if !(s.label.is_finite() && s.label > 0.0 && s.label <= cut.optimizer.max(cut.diffusion)) {
                issues.push(format!("regressor sample {i}: label {} out of range", s.label));
            }
        }
    }
    let cdir = dir.join(CLASSIFIER_DIR);
    if cdir.is_dir() {
        let c = ClassifierDataset::load(&cdir)?;
        if (c.nx, c.ny) != (nx, ny) {
            issues.push("classifier grid differs from the main dataset".into());
        }
        for (i, s) in c.samples.iter().enumerate() {
            let t = topoguide::fea::Topology { nx: c.nx, ny: c.ny, densities: s.tensor.values.clone() };
            if floating_material(&t, Connectivity::Eight)? == s.no_fm {
                issues.push(format!("classifier sample {i}: label disagrees with connectivity"));
            }
        }
    }
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    require_dir(&args.data, "dataset")?;
    let mut issues = verify_dataset(&args.data)?;
    let data = Dataset::load(&args.data)?;
    verify_surrogates(&args.data, &data, &mut issues)?;
    if issues.is_empty() {
        println!("ok: {} samples", data.manifest.samples.len());
        Ok(())
    } else {
        for i in &issues {
            println!("{i}");
        }
        Err(CliError::Data(format!("{} issues found", issues.len())))
    }
}
