use std::fmt::Write as _;
use std::fs;

use tgtensor::kv::KvFile;
use topoguide::dataset::{Dataset, Split};
use topoguide::guidance::GuidanceConfig;
use topoguide::metrics::aggregate;

use crate::args::TuneArgs;
use crate::error::{CliError, Result};
use crate::evaluate::records;
use crate::sample::{check_sampling_paths, jobs, load_classifier, load_denoiser, load_regressor, Sampler};
use crate::{parse_list, prepare_out, require_dir, threads};

pub const TUNE_NAME: &str = "tune.txt";
pub const GUIDANCE_NAME: &str = "guidance.txt";

/// Mean CE and FM percentage of one configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub config: GuidanceConfig,
    pub ce: f64,
    pub fm_pct: f64,
}

/// Lowest mean CE among rows whose FM does not exceed the baseline, ties
/// broken by lower FM. Without a feasible row, lowest FM then CE.
pub fn select(rows: &[GridRow], baseline_fm: f64) -> Option<usize> {
    let key = |r: &GridRow, feasible: bool| if feasible { (r.ce, r.fm_pct) } else { (r.fm_pct, r.ce) };
    let feasible = rows.iter().any(|r| r.fm_pct <= baseline_fm);
    rows.iter()
        .enumerate()
        .filter(|(_, r)| !feasible || r.fm_pct <= baseline_fm)
        .min_by(|(_, a), (_, b)| {
            let (ka, kb) = (key(a, feasible), key(b, feasible));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .map(|(i, _)| i)
}

pub fn tune(args: &TuneArgs) -> Result<()> {
    let s = &args.sampling;
    let split = Split::parse(&args.split)?;
    let lambda_c: Vec<f64> = parse_list(&args.lambda_c, "lambda_c")?;
    let lambda_fm: Vec<f64> = parse_list(&args.lambda_fm, "lambda_fm")?;
    let mln_c: Vec<usize> = parse_list(&args.mln_c, "mln_c")?;
    let mln_fm: Vec<usize> = parse_list(&args.mln_fm, "mln_fm")?;
    check_sampling_paths(s)?;
    require_dir(&args.regressor, "regressor checkpoint")?;
    require_dir(&args.classifier, "classifier checkpoint")?;
    prepare_out(&args.out)?;

    let data = Dataset::load(&s.data)?;
    let denoiser = load_denoiser(&s.diffusion)?;
    let regressor = load_regressor(&args.regressor)?;
    let classifier = load_classifier(&args.classifier)?;
    let t_max = denoiser.schedule.len();
    let mut grid = Vec::new();
    for &lc in &lambda_c {
        for &lf in &lambda_fm {
            for &mc in &mln_c {
                for &mf in &mln_fm {
                    let g =
                        GuidanceConfig { lambda_c: lc, lambda_fm: lf, mln_c: mc, mln_fm: mf, classifier_first: true };
                    g.validate(t_max)?;
                    grid.push(g);
                }
            }
        }
    }
    let items = jobs(&data, split, s.limit, args.reps, s.seed);
    if items.is_empty() {
        return Err(CliError::Data(format!("no problems to sample in split {}", split.name())));
    }
    let threads = threads(s.threads);
    let sampler = Sampler {
        data: &data,
        denoiser: &denoiser,
        regressor: Some(&regressor),
        classifier: Some(&classifier),
        steps: s.steps,
        batch: s.batch,
        threads,
    };
    let score = |g: &GuidanceConfig| -> Result<GridRow> {
        let designs = sampler.run(g, &items)?;
        let summary = aggregate(&records(&data, &items, &designs, threads)?)?;
        Ok(GridRow { config: *g, ce: summary.ce.mean, fm_pct: summary.fm.mean })
    };

    let baseline = score(&GuidanceConfig::unguided())?;
    eprintln!("baseline: ce {:.4} fm {:.2}%", baseline.ce, baseline.fm_pct);
    let mut rows = Vec::with_capacity(grid.len());
    for g in &grid {
        let row = if g.is_unguided() { GridRow { config: *g, ..baseline } } else { score(g)? };
        eprintln!(
            "lambda_c {} lambda_fm {} mln_c {} mln_fm {}: ce {:.4} fm {:.2}%",
            g.lambda_c, g.lambda_fm, g.mln_c, g.mln_fm, row.ce, row.fm_pct
        );
        rows.push(row);
    }
    let best = select(&rows, baseline.fm_pct).expect("grid is non-empty");

    let mut kv = KvFile::new();
    kv.set("format", "tgtune");
    kv.set("split", split.name());
    kv.set("problems", items.len() / args.reps.max(1));
    kv.set("reps", args.reps);
    kv.set("baseline.ce", format!("{:e}", baseline.ce));
    kv.set("baseline.fm_pct", format!("{:e}", baseline.fm_pct));
    kv.set("rows", rows.len());
    let mut text = format!(
        "{:>10} {:>10} {:>6} {:>6} {:>10} {:>8}\n",
        "lambda_c", "lambda_fm", "mln_c", "mln_fm", "mean_ce", "fm_pct"
    );
    for (i, r) in rows.iter().enumerate() {
        let g = &r.config;
        kv.set(format!("row.{i:03}.lambda_c"), g.lambda_c);
        kv.set(format!("row.{i:03}.lambda_fm"), g.lambda_fm);
        kv.set(format!("row.{i:03}.mln_c"), g.mln_c);
        kv.set(format!("row.{i:03}.mln_fm"), g.mln_fm);
        kv.set(format!("row.{i:03}.ce"), format!("{:e}", r.ce));
        kv.set(format!("row.{i:03}.fm_pct"), format!("{:e}", r.fm_pct));
        kv.set(format!("row.{i:03}.feasible"), r.fm_pct <= baseline.fm_pct);
        let _ = writeln!(
            text,
            "{:>10} {:>10} {:>6} {:>6} {:>10.4} {:>8.2}{}",
            g.lambda_c,
            g.lambda_fm,
            g.mln_c,
            g.mln_fm,
            r.ce,
            r.fm_pct,
            if i == best { "  *" } else { "" }
        );
    }
    kv.set("best", best);
    kv.write(&args.out.join(TUNE_NAME))?;
    let mut gkv = KvFile::new();
    rows[best].config.write_kv(&mut gkv, "guidance");
    gkv.write(&args.out.join(GUIDANCE_NAME))?;
    fs::write(args.out.join("tune_table.txt"), &text)?;
    print!("{text}");
    Ok(())
}
