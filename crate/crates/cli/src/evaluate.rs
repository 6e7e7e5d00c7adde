use std::fs;

use rayon::prelude::*;
use tgtensor::kv::KvFile;
use topoguide::dataset::Dataset;
use topoguide::fea::Topology;
use topoguide::metrics::{aggregate, evaluate as evaluate_design, paired_records_test, EvalRecord, Tail};

use crate::args::EvaluateArgs;
use crate::error::{CliError, Result};
use crate::run::{RunItem, SampleRun};
use crate::{pool, prepare_out, require_dir, threads};

pub const SUMMARY_NAME: &str = "summary.txt";
pub const REPORT_NAME: &str = "report.txt";

/// One record per generated design, scored against the stored optimizer
/// result of its problem.
pub fn records(data: &Dataset, items: &[RunItem], designs: &[Topology], threads: usize) -> Result<Vec<EvalRecord>> {
    if items.len() != designs.len() {
        return Err(CliError::Data("run items and designs differ in number".into()));
    }
    let out: Vec<Result<EvalRecord>> = pool(threads)?.install(|| {
        items
            .par_iter()
            .zip(designs)
            .map(|(it, gen)| {
                let meta = data
                    .manifest
                    .samples
                    .get(it.index)
                    .ok_or_else(|| CliError::Data(format!("run refers to missing sample {}", it.index)))?;
                Ok(evaluate_design(it.index, &meta.problem, &data.topology(it.index), gen)?)
            })
            .collect()
    });
    out.into_iter().collect()
}

fn load_run(data: &Dataset, dir: &std::path::Path) -> Result<SampleRun> {
    require_dir(dir, "run")?;
    let run = SampleRun::load(dir)?;
    if run.dataset_seed != data.manifest.seed {
        return Err(CliError::Data(format!("{} was sampled from a different dataset", dir.display())));
    }
    Ok(run)
}

const PAIRED_METRICS: [(&str, fn(&EvalRecord) -> f64); 4] = [
    ("ce", |r| r.ce),
    ("fm", |r| if r.fm { 1.0 } else { 0.0 }),
    ("vfe", |r| r.vfe),
    ("lv", |r| if r.lv { 1.0 } else { 0.0 }),
];

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    require_dir(&args.data, "dataset")?;
    require_dir(&args.run, "run")?;
    if let Some(b) = &args.baseline {
        require_dir(b, "baseline run")?;
    }
    prepare_out(&args.out)?;
    let threads = threads(args.threads);
    let data = Dataset::load(&args.data)?;
    let run = load_run(&data, &args.run)?;
    let recs = records(&data, &run.items, &run.designs, threads)?;
    let summary = aggregate(&recs)?;

    let mut kv = KvFile::new();
    kv.set("format", "tgreport");
    kv.set("split", run.split.name());
    kv.set("reps", run.reps);
    run.guidance.write_kv(&mut kv, "guidance");
    summary.write_kv(&mut kv, "run.");
    for (k, r) in recs.iter().enumerate() {
        kv.set(format!("record.{k:05}.problem"), r.problem_id);
        kv.set(format!("record.{k:05}.ce"), format!("{:e}", r.ce));
        kv.set(format!("record.{k:05}.vfe"), format!("{:e}", r.vfe));
        kv.set(format!("record.{k:05}.lv"), r.lv);
        kv.set(format!("record.{k:05}.fm"), r.fm);
    }
    let mut text = summary.table();

    if let Some(dir) = &args.baseline {
        let base = load_run(&data, dir)?;
        if base.items != run.items {
            return Err(CliError::Data("runs must share problems, repetitions and seeds".into()));
        }
        let base_recs = records(&data, &base.items, &base.designs, threads)?;
        let base_summary = aggregate(&base_recs)?;
        base.guidance.write_kv(&mut kv, "baseline.guidance");
        base_summary.write_kv(&mut kv, "baseline.");
        text.push_str("\nbaseline\n");
        text.push_str(&base_summary.table());
        text.push_str("\none-tailed paired t-test (run < baseline)\n");
        for (name, metric) in PAIRED_METRICS {
            match paired_records_test(&recs, &base_recs, metric, Tail::Less) {
                Ok(t) => {
                    kv.set(format!("paired.{name}.t"), format!("{:e}", t.t));
                    kv.set(format!("paired.{name}.df"), t.df);
                    kv.set(format!("paired.{name}.p"), format!("{:e}", t.p));
                    text.push_str(&format!("{name:<4} t = {:.3}  df = {}  p = {:.4}\n", t.t, t.df, t.p));
                }
                Err(e) => {
                    kv.set(format!("paired.{name}.skipped"), e.to_string().replace('\n', " "));
                    text.push_str(&format!("{name:<4} skipped: {e}\n"));
                }
            }
        }
    }
    kv.write(&args.out.join(REPORT_NAME))?;
    fs::write(args.out.join(SUMMARY_NAME), &text)?;
    print!("{text}");
    Ok(())
}
