use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
output_dir = "OUT"

[dataset]
kind = "synthetic"
seed = 3
num_domains = 3
samples_per_class_per_domain = 10
image_size = 16
cue_kinds = ["tint", "stripe", "none"]
cue_strength = 0.9

[protocol]
targets = ["none"]
methods = ["lrdg", "baseline"]

[train]
learning_rates = [0.05]
epochs_stage1 = 1
epochs_stage2 = 1
epochs_baseline = 1
batch_size = 4
mapper_depth = 2
mapper_base_channels = 4

[divergence]
enabled = true
reg_grid = [0.1, 1.0]
"#;

fn lrdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrdg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lrdg")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let out = dir.join("out");
    let path = dir.join("config.toml");
    fs::write(&path, body.replace("OUT", &out.display().to_string())).unwrap();
    path
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

/// The single `<digest>/seed-0` run directory below `out`.
fn run_dir(out: &Path) -> PathBuf {
    let digests: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(digests.len(), 1);
    digests[0].join("seed-0")
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn run_writes_checkpoints_results_and_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &CONFIG.replace(r#"["lrdg", "baseline"]"#, r#"["lrdg"]"#).replace("enabled = true", "enabled = false"));
    let stdout = ok(&lrdg(&["run", "-c", config.to_str().unwrap()]));
    assert!(stdout.contains("Avg."), "{stdout}");

    let dir = run_dir(&tmp.path().join("out"));
    // Two sources: N specific classifiers plus mapper and invariant classifier.
    assert_eq!(
        names(&dir.join("checkpoints/none")),
        ["invariant-classifier.ckpt", "mapper.ckpt", "specific-stripe.ckpt", "specific-tint.ckpt"]
    );
    assert_eq!(names(&dir.join("logs/none")), ["invariant.jsonl", "specific-stripe.jsonl", "specific-tint.jsonl"]);
    let csv = fs::read_to_string(dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "target,method,accuracy,seed,config_digest");
    assert_eq!(csv.lines().count(), 2);
    for p in ["config.toml", "run.json", "results_summary.json"] {
        assert!(dir.join(p).is_file(), "missing {p}");
    }
    assert!(!dir.join("pad").exists());
    let log = fs::read_to_string(dir.join("logs/none/invariant.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"config_digest\"") && l.contains("\"seed\":0")));
}

#[test]
fn rerun_is_bitwise_identical_and_other_commands_read_its_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let c = config.to_str().unwrap();
    let first = ok(&lrdg(&["run", "-c", c]));
    let dir = run_dir(&tmp.path().join("out"));
    let results = fs::read(dir.join("results.csv")).unwrap();
    let mapper = fs::read(dir.join("checkpoints/none/mapper.ckpt")).unwrap();

    let second = ok(&lrdg(&["run", "-c", c]));
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.join("results.csv")).unwrap(), results);
    assert_eq!(fs::read(dir.join("checkpoints/none/mapper.ckpt")).unwrap(), mapper);

    let ckpt = dir.join("checkpoints/none");
    let eval = ok(&lrdg(&["eval", "-c", c, "--domain", "none", "--baseline", ckpt.join("baseline.ckpt").to_str().unwrap()]));
    assert!(eval.starts_with("none: accuracy "), "{eval}");
    let eval = ok(&lrdg(&[
        "eval",
        "-c",
        c,
        "--domain",
        "tint",
        "--mapper",
        ckpt.join("mapper.ckpt").to_str().unwrap(),
        "--classifier",
        ckpt.join("invariant-classifier.ckpt").to_str().unwrap(),
    ]));
    assert!(eval.starts_with("tint: accuracy "), "{eval}");

    let pad_out = tmp.path().join("pad");
    let pad = ok(&lrdg(&["pad", "-c", c, "--target", "none", "--run-dir", dir.to_str().unwrap(), "--out", pad_out.to_str().unwrap()]));
    for p in ["pad_report.csv", "pad_scatter.png", "bounds.json"] {
        assert!(dir.join("pad").join(p).is_file(), "missing pad/{p}");
    }
    assert!(pad.contains("tint|stripe") && pad.contains("closest mixture"), "{pad}");
    assert!(pad_out.join("pad_report.csv").is_file() && pad_out.join("pad_scatter.png").is_file());

    let png = tmp.path().join("inspect.png");
    let inspect = ok(&lrdg(&[
        "inspect",
        "--mapper",
        ckpt.join("mapper.ckpt").to_str().unwrap(),
        "--config",
        c,
        "--domain",
        "tint",
        "--count",
        "2",
        "--out",
        png.to_str().unwrap(),
    ]));
    assert!(inspect.contains("per-class border tint variance"), "{inspect}");
    assert!(png.is_file());
}

#[test]
fn synth_gen_exports_folders_that_load_back() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let out = tmp.path().join("export");
    let stdout = ok(&lrdg(&["synth-gen", "-c", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(stdout.starts_with("wrote 150 images"), "{stdout}");
    assert_eq!(names(&out).iter().filter(|n| !n.contains('.')).count(), 3);
    let ds = lrdg::data::load_image_folder(&out, 16, Default::default(), 0).unwrap();
    assert_eq!(ds.num_domains(), 3);
    assert_eq!(ds.domains.iter().map(|d| d.samples.len()).sum::<usize>(), 150);
}

#[test]
fn lambda_selection_with_two_sources_is_a_precondition_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), CONFIG);
    let out = lrdg(&["run", "-c", config.to_str().unwrap(), "--set", "protocol.select_lambdas=true"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lambda selection needs at least 3 source domains"), "{stderr}");
}

#[test]
fn config_errors_name_the_line_and_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &CONFIG.replace("epochs_stage2 = 1", "epochs_stage2 = \"many\""));
    let out = lrdg(&["run", "-c", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = CONFIG.lines().position(|l| l.starts_with("epochs_stage2")).unwrap() + 1;
    assert!(stderr.contains(&format!("config.toml:{line}:")), "{stderr}");

    let config = write_config(tmp.path(), &CONFIG.replace("cue_strength = 0.9", "cue_strength = 1.5"));
    let out = lrdg(&["run", "-c", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let line = CONFIG.lines().position(|l| l.starts_with("cue_strength")).unwrap() + 1;
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("config.toml:{line}:")), "{stderr}");
}
