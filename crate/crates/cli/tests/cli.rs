use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tempfile::TempDir;
use tgtensor::kv::KvFile;
use topoguide_cli::run_from;

fn run(args: &[&str]) -> i32 {
    run_from(std::iter::once("topoguide").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn model(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Tiny dataset plus three barely trained models, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        assert_eq!(
            run(&[
                "gen-data",
                "--out",
                p(&data),
                "--seed",
                "3",
                "--sizes",
                "10,4,3,0",
                "--train-bc",
                "0,1",
                "--test-bc",
                "42",
                "--threads",
                "1"
            ]),
            0
        );
        for (model, name) in [("diffusion", "dm"), ("regressor", "rm"), ("classifier", "cm")] {
            let out = root.join(name);
            let code = run(&[
                "train",
                model,
                "--data",
                p(&data),
                "--out",
                p(&out),
                "--seed",
                "1",
                "--steps",
                "3",
                "--batch",
                "4",
                "--base-width",
                "4",
                "--time-dim",
                "8",
                "--log-every",
                "2",
                "--val-fraction",
                "0.5",
            ]);
            assert_eq!(code, 0, "training {model}");
        }
        Fixture { _dir: dir, root }
    })
}

fn sampling_flags(f: &Fixture) -> Vec<String> {
    ["--data", p(&f.data()), "--diffusion", p(&f.model("dm")), "--seed", "9", "--steps", "4", "--threads", "1"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn run_owned(args: Vec<String>) -> i32 {
    run_from(std::iter::once("topoguide".to_string()).chain(args))
}

#[test]
fn help_succeeds_and_bad_usage_exits_one() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["gen-data", "--help"]), 0);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["gen-data", "--out", "/tmp/x"]), 1, "missing seed");
    assert_eq!(run(&["gen-data", "--out", "/tmp/x", "--seed", "1", "--sizes", "1,2"]), 1);
}

#[test]
fn gen_data_is_deterministic_and_verifies() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let code = run(&[
            "gen-data",
            "--out",
            p(out),
            "--seed",
            "5",
            "--sizes",
            "4,1,1,1",
            "--train-bc",
            "0,1",
            "--test-bc",
            "44",
            "--threads",
            "2",
        ]);
        assert_eq!(code, 0);
    }
    for file in ["manifest.txt", "00000.tgs", "regressor/manifest.txt", "classifier/manifest.txt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(run(&["verify", "--data", p(&a)]), 0);
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    assert_eq!(run(&["gen-data", "--out", p(&out), "--seed", "1", "--train-bc", "0,99"]), 1);
}

#[test]
fn unwritable_output_is_a_path_error() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let out = file.join("sub");
    assert_eq!(run(&["gen-data", "--out", p(&out), "--seed", "1", "--sizes", "1,0,0,0"]), 2);
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing");
    let out = dir.path().join("out");
    assert_eq!(run(&["verify", "--data", p(&missing)]), 2);
    assert_eq!(run(&["train", "diffusion", "--data", p(&missing), "--out", p(&out), "--seed", "1"]), 2);
    let f = fixture();
    let mut args = vec!["tune".to_string()];
    args.extend(sampling_flags(f));
    args.extend(["--regressor", p(&missing), "--classifier", p(&f.model("cm")), "--out", p(&out)].map(String::from));
    assert_eq!(run_owned(args), 2);
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let code = run(&[
        "train",
        "regressor",
        "--data",
        p(&f.data()),
        "--out",
        p(dir.path()),
        "--seed",
        "1",
        "--steps",
        "20",
        "--batch",
        "4",
        "--base-width",
        "4",
        "--time-dim",
        "8",
        "--lr",
        "1e300",
    ]);
    assert_eq!(code, 3);
}

#[test]
fn training_rerun_gives_identical_log_and_weights() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("again");
    let code = run(&[
        "train",
        "diffusion",
        "--data",
        p(&f.data()),
        "--out",
        p(&out),
        "--seed",
        "1",
        "--steps",
        "3",
        "--batch",
        "4",
        "--base-width",
        "4",
        "--time-dim",
        "8",
        "--log-every",
        "2",
        "--val-fraction",
        "0.5",
    ]);
    assert_eq!(code, 0);
    for file in ["train_log.txt", "params.bin", "validation.txt"] {
        assert_eq!(fs::read(out.join(file)).unwrap(), fs::read(f.model("dm").join(file)).unwrap(), "{file}");
    }
    let log = fs::read_to_string(out.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains(" loss ")).count(), 3);
    assert!(log.contains("step 2 validation"));
}

#[test]
fn surrogate_training_reports_every_noise_band() {
    let f = fixture();
    for (name, metric) in [("rm", "r2"), ("cm", "accuracy")] {
        let kv = KvFile::read(&f.model(name).join("validation.txt")).unwrap();
        assert_eq!(kv.get("metric"), Some(metric));
        for band in ["low", "mid", "high"] {
            let value: f64 = kv.parse(&format!("band.{band}")).unwrap();
            assert!(value.is_finite(), "{name} {band}");
            let count: usize = kv.parse(&format!("band.{band}.count")).unwrap();
            assert!(count > 0, "{name} {band}");
        }
    }
}

#[test]
fn single_problem_single_rep_gives_one_record() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run_dir = dir.path().join("run");
    let mut args = vec!["sample".to_string()];
    args.extend(sampling_flags(f));
    args.extend(["--split", "level1", "--reps", "1", "--limit", "1", "--out", p(&run_dir)].map(String::from));
    assert_eq!(run_owned(args), 0);
    let ev = dir.path().join("ev");
    assert_eq!(run(&["evaluate", "--data", p(&f.data()), "--run", p(&run_dir), "--out", p(&ev)]), 0);
    let report = KvFile::read(&ev.join("report.txt")).unwrap();
    assert_eq!(report.get("run.n"), Some("1"));
    assert!(report.get("record.00000.ce").is_some());
    assert!(report.get("record.00001.ce").is_none());
    let summary = fs::read_to_string(ev.join("summary.txt")).unwrap();
    for row in
        ["Average % CE", "Median % CE", "% CE > 30%", "Average % VFE", "% Load disrespect", "% Floating material"]
    {
        assert!(summary.contains(row), "{row}");
    }
}

#[test]
fn guided_versus_unguided_report_has_p_values() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (un, gd) = (dir.path().join("un"), dir.path().join("gd"));
    let mut args = vec!["sample".to_string()];
    args.extend(sampling_flags(f));
    args.extend(["--split", "level1", "--reps", "2", "--no-render", "--out", p(&un)].map(String::from));
    assert_eq!(run_owned(args.clone()), 0);
    let mut guided = args[..args.len() - 1].to_vec();
    guided.push(p(&gd).into());
    guided.extend(
        [
            "--regressor",
            p(&f.model("rm")),
            "--classifier",
            p(&f.model("cm")),
            "--lambda-c",
            "0.5",
            "--lambda-fm",
            "0.5",
        ]
        .map(String::from),
    );
    assert_eq!(run_owned(guided), 0);
    let ev = dir.path().join("ev");
    let code = run(&["evaluate", "--data", p(&f.data()), "--run", p(&gd), "--baseline", p(&un), "--out", p(&ev)]);
    assert_eq!(code, 0);
    let report = KvFile::read(&ev.join("report.txt")).unwrap();
    for m in ["ce", "fm", "vfe", "lv"] {
        let pv: f64 = report.parse(&format!("paired.{m}.p")).unwrap();
        assert!((0.0..=1.0).contains(&pv), "{m}: {pv}");
    }
    assert_eq!(report.get("run.n"), Some("6"));
}

#[test]
fn guidance_without_its_surrogate_is_a_usage_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut args = vec!["sample".to_string()];
    args.extend(sampling_flags(f));
    args.extend(["--lambda-c", "1", "--limit", "1", "--reps", "1", "--out", p(dir.path())].map(String::from));
    assert_eq!(run_owned(args), 1);
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let mut args = vec!["sample".to_string()];
        args.extend(sampling_flags(f));
        let last = args.len() - 1;
        args[last] = threads.into();
        args.extend(
            ["--split", "validation", "--reps", "2", "--batch", "3", "--no-render", "--out", p(&out)].map(String::from),
        );
        assert_eq!(run_owned(args), 0);
        outs.push(out);
    }
    for k in 0..8 {
        let name = format!("{k:05}.tgs");
        assert_eq!(fs::read(outs[0].join(&name)).unwrap(), fs::read(outs[1].join(&name)).unwrap());
    }
    assert_eq!(fs::read(outs[0].join("run.txt")).unwrap(), fs::read(outs[1].join("run.txt")).unwrap());
}

fn tune(f: &Fixture, out: &Path, grid: [&str; 4]) -> KvFile {
    let mut args = vec!["tune".to_string()];
    args.extend(sampling_flags(f));
    args.extend(
        [
            "--regressor",
            p(&f.model("rm")),
            "--classifier",
            p(&f.model("cm")),
            "--limit",
            "2",
            "--lambda-c",
            grid[0],
            "--lambda-fm",
            grid[1],
            "--mln-c",
            grid[2],
            "--mln-fm",
            grid[3],
            "--out",
            p(out),
        ]
        .map(String::from),
    );
    assert_eq!(run_owned(args), 0);
    KvFile::read(&out.join("tune.txt")).unwrap()
}

#[test]
fn one_point_grid_returns_that_point() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = tune(f, dir.path(), ["0.3", "0.7", "400", "200"]);
    assert_eq!(report.get("rows"), Some("1"));
    assert_eq!(report.get("best"), Some("0"));
    let g = KvFile::read(&dir.path().join("guidance.txt")).unwrap();
    assert_eq!(g.get("guidance.lambda_c"), Some("0.3"));
    assert_eq!(g.get("guidance.lambda_fm"), Some("0.7"));
    assert_eq!(g.get("guidance.mln_c"), Some("400"));
    assert_eq!(g.get("guidance.mln_fm"), Some("200"));
}

#[test]
fn two_by_two_grid_reports_four_rows_with_baseline() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = tune(f, dir.path(), ["0,1", "0,1", "500", "500"]);
    assert_eq!(report.get("rows"), Some("4"));
    assert!(report.get("row.003.ce").is_some());
    assert!(report.get("row.004.ce").is_none());
    assert_eq!(report.get("row.000.lambda_c"), Some("0"));
    assert_eq!(report.get("row.000.lambda_fm"), Some("0"));
    assert_eq!(report.get("row.000.ce"), report.get("baseline.ce"));
    assert_eq!(report.get("row.000.fm_pct"), report.get("baseline.fm_pct"));
}
