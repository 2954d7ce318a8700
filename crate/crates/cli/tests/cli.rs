use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
seeds = [0, 1]
loss = { kind = "pseudo_label" }
optimizer = { learning_rate = 0.1 }

[task]
num_classes = 3
input_dim = 2
class_geometry = "gaussian_blobs"
samples_per_domain = 120
seed = 5

[stream]
mode = "continual"
batch_size = 8
shifts = [{ kind = "rotation", severity = 2 }, { kind = "translation", severity = 1 }]

[pretrain]
steps = 100
batch_size = 16
learning_rate = 0.1

[selector]
kind = "gala"

[sweep]
threshold = [0.5, 0.75, 0.99]

[geometry]
t_values = [0.5, 1.0, 2.0]
u_values = [1.0]
beta_values = [2.0, 3.0]

[[model]]
kind = "dense"
input_dim = 2
output_dim = 8
activation = "relu"

[[model]]
kind = "dense"
input_dim = 8
output_dim = 8
activation = "relu"

[[model]]
kind = "dense"
input_dim = 8
output_dim = 3
"#;

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        Self::with_config(CONFIG)
    }

    fn with_config(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("exp.toml"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("exp.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gala-lab"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("GALA_LAB_OUT")
            .output()
            .unwrap()
    }

    fn ok(&self, cmd: &str, out: &str, extra: &[&str]) {
        let config = self.config();
        let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out];
        args.extend_from_slice(extra);
        let o = self.run(&args);
        assert!(
            o.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }

    fn fail(&self, cmd: &str, out: &str) -> String {
        let config = self.config();
        let o = self.run(&[cmd, "--config", config.to_str().unwrap(), "--out", out]);
        assert!(!o.status.success(), "{cmd} unexpectedly succeeded");
        String::from_utf8(o.stderr).unwrap()
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn with_selector(selector: &str) -> String {
    CONFIG.replace("kind = \"gala\"", selector)
}

#[test]
fn erm_adaptation_forgets_nothing() {
    let lab = Lab::with_config(&with_selector("kind = \"erm\""));
    let out = lab.out("runs");
    let out = out.to_str().unwrap();
    lab.ok("pretrain", out, &[]);
    lab.ok("adapt", out, &[]);
    for seed in [0, 1] {
        let s = json(&lab.out(&format!("runs/adapt/erm/seed-{seed}/summary.json")));
        assert_eq!(s["forgetting"].as_f64(), Some(0.0));
        assert_eq!(s["label"], "erm");
    }
}

#[test]
fn threshold_sweep_gives_one_row_per_value() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &[]);
    lab.ok("sweep", "runs", &[]);
    let mut reader = csv::Reader::from_path(lab.out("runs/sweep/aggregate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    let labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(labels, ["threshold=0.5", "threshold=0.75", "threshold=0.99"]);
    assert!(rows.iter().all(|r| &r[1] == "2"));
}

#[test]
fn reruns_are_byte_identical() {
    let lab = Lab::new();
    for out in ["a", "b"] {
        lab.ok("pretrain", out, &["--seed", "3"]);
        lab.ok("adapt", out, &["--seed", "3"]);
    }
    for file in [
        "adapt/gala/seed-3/summary.json",
        "adapt/gala/seed-3/trace.csv",
        "pretrain/seed-3/checkpoint.json",
    ] {
        let a = fs::read(lab.out("a").join(file)).unwrap();
        let b = fs::read(lab.out("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
    }
}

#[test]
fn seed_flag_overrides_config_seeds() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &["--seed", "7"]);
    assert!(lab.out("runs/pretrain/seed-7/checkpoint.json").is_file());
    assert!(!lab.out("runs/pretrain/seed-0").exists());
    assert_eq!(
        json(&lab.out("runs/pretrain/manifest.json"))["seeds"],
        serde_json::json!([7])
    );
}

#[test]
fn missing_checkpoint_names_expected_path() {
    let lab = Lab::new();
    let err = lab.fail("adapt", "runs");
    let expected = Path::new("runs")
        .join("pretrain")
        .join("seed-0")
        .join("checkpoint.json");
    assert!(err.contains(expected.to_str().unwrap()), "{err}");
    assert!(err.contains("gala-lab pretrain"), "{err}");
}

#[test]
fn unknown_field_is_named() {
    let lab = Lab::with_config(&CONFIG.replace(
        "[selector]\nkind = \"gala\"",
        "[selector]\nkind = \"gala\"\nthresold = 0.5",
    ));
    let err = lab.fail("pretrain", "runs");
    assert!(err.contains("thresold"), "{err}");
}

#[test]
fn out_of_range_field_is_named() {
    let lab = Lab::with_config(&CONFIG.replace(
        "[selector]\nkind = \"gala\"",
        "[selector]\nkind = \"gala\"\nthreshold = 1.5",
    ));
    let err = lab.fail("pretrain", "runs");
    assert!(err.contains("selector.threshold"), "{err}");

    let lab = Lab::with_config(&CONFIG.replace("learning_rate = 0.1 }", "learning_rate = -1.0 }"));
    let err = lab.fail("pretrain", "runs");
    assert!(err.contains("optimizer.learning_rate"), "{err}");
}

#[test]
fn stale_checkpoint_is_rejected() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &["--seed", "0"]);
    fs::write(lab.config(), CONFIG.replace("steps = 100", "steps = 101")).unwrap();
    let err = lab.fail("adapt", "runs");
    assert!(err.contains("rerun `gala-lab pretrain`"), "{err}");
}

#[test]
fn no_trace_skips_traces() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &["--seed", "0"]);
    lab.ok("adapt", "runs", &["--seed", "0", "--no-trace"]);
    assert!(lab.out("runs/adapt/gala/seed-0/summary.json").is_file());
    assert!(!lab.out("runs/adapt/gala/seed-0/trace.csv").exists());
    lab.ok("adapt", "runs", &["--seed", "0", "--no-trace", "--trace"]);
    assert!(lab.out("runs/adapt/gala/seed-0/trace.csv").is_file());
}

#[test]
fn environment_sets_default_output_root() {
    let lab = Lab::new();
    let config = lab.config();
    let status = Command::new(env!("CARGO_BIN_EXE_gala-lab"))
        .args(["geometry", "--config", config.to_str().unwrap()])
        .current_dir(lab.dir.path())
        .env("GALA_LAB_OUT", lab.out("from-env"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(lab.out("from-env/geometry/grid.csv").is_file());
}

#[test]
fn report_is_idempotent() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &[]);
    lab.ok("adapt", "runs", &[]);
    lab.ok("sweep", "runs", &[]);
    let report = |lab: &Lab| {
        let o = lab.run(&["report", "--out", "runs"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        ["aggregate.csv", "manifest.json", "sources.txt"].map(|f| fs::read(lab.out("runs/report").join(f)).unwrap())
    };
    let first = report(&lab);
    let second = report(&lab);
    assert!(first == second);
    let table = String::from_utf8(first[0].clone()).unwrap();
    assert_eq!(table.lines().count(), 1 + 4, "{table}");
}

#[test]
fn report_rejects_tampered_summary() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &["--seed", "0"]);
    lab.ok("adapt", "runs", &["--seed", "0"]);
    let path = lab.out("runs/adapt/gala/seed-0/summary.json");
    let mut s = json(&path);
    s["tta_acc"] = serde_json::json!(12.5);
    fs::write(&path, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    let o = lab.run(&["report", "--out", "runs"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("disagrees"));
}

fn files_under(dir: &Path, root: &Path, found: &mut BTreeSet<PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files_under(&path, root, found);
        } else {
            found.insert(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

#[test]
fn every_artifact_is_listed_in_a_manifest() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &[]);
    lab.ok("adapt", "runs", &[]);
    lab.ok("oracle", "runs", &[]);
    lab.ok("sweep", "runs", &[]);
    lab.ok("geometry", "runs", &[]);
    // a rerun with fewer seeds must not leave the old seed behind
    lab.ok("adapt", "runs", &["--seed", "1"]);
    assert!(lab.out("runs/report").read_dir().is_err());
    assert!(lab.run(&["report", "--out", "runs"]).status.success());

    let root = lab.out("runs");
    let mut on_disk = BTreeSet::new();
    files_under(&root, &root, &mut on_disk);
    let mut listed = BTreeSet::new();
    for manifest in on_disk.iter().filter(|p| p.ends_with("manifest.json")) {
        let dir = manifest.parent().unwrap();
        listed.insert(manifest.clone());
        for a in json(&root.join(manifest))["artifacts"].as_array().unwrap() {
            listed.insert(dir.join(a.as_str().unwrap()));
        }
    }
    assert_eq!(on_disk, listed);
    assert!(!lab.out("runs/adapt/gala/seed-0").exists());
}

#[test]
fn refuses_to_clear_foreign_directories() {
    let lab = Lab::new();
    fs::create_dir_all(lab.out("runs/geometry")).unwrap();
    fs::write(lab.out("runs/geometry/notes.txt"), "mine").unwrap();
    let err = lab.fail("geometry", "runs");
    assert!(err.contains("refusing to overwrite"), "{err}");
    assert_eq!(fs::read_to_string(lab.out("runs/geometry/notes.txt")).unwrap(), "mine");
}

#[test]
fn adapted_checkpoint_matches_in_process_run() {
    let lab = Lab::new();
    lab.ok("pretrain", "runs", &["--seed", "1"]);
    lab.ok("adapt", "runs", &["--seed", "1"]);
    let cfg: gala_core::experiment::ExperimentConfig = toml::from_str(CONFIG).unwrap();
    let direct = gala_core::experiment::run_seed(&cfg, 1, "gala").unwrap();
    let text = fs::read_to_string(lab.out("runs/adapt/gala/seed-1/summary.json")).unwrap();
    assert_eq!(
        gala_core::metrics::MetricsSummary::from_json(&text).unwrap(),
        direct.summary
    );
}
