use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svead_core::data::write_csv;
use svead_core::synth::{imbalanced_benchmark, BenchmarkSpec};

fn svead(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svead")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn fixture(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let data = imbalanced_benchmark(&BenchmarkSpec { n_rows: 400, n_positive: 30, n_features: 4, ..Default::default() });
    write_csv(&data, dir.path().join("data.csv"), "Class").unwrap();
    std::fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

const CONFIG: &str = r#"
seed = 3
output_dir = "out"
[dataset]
path = "data.csv"

[[grid]]
name = "raw logreg"
model = "logreg"
explain = ["shap", "pip", "ice:v2"]
explain_options = { rows = 3, grid_size = 5, ice_rows = 20 }

[[grid]]
name = "tsne knn"
model = "knn"
representation = "tsne"
tsne = { max_iter = 250 }
"#;

fn model_file(out: &Path) -> PathBuf {
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.join("model.svead").exists() && p.join("shap.csv").exists())
        .unwrap()
        .join("model.svead")
}

#[test]
fn run_writes_reports_and_report_prints_them() {
    let dir = fixture(CONFIG);
    let o = svead(&["run", "--config", "exp.toml"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("name,precision,recall,f1,roc_auc,pr_auc,mcc,kappa,brier"), "{csv}");
    assert_eq!(csv.lines().count(), 3);
    let run_dir = model_file(&out).parent().unwrap().to_path_buf();
    for f in ["shap.csv", "pip.csv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(&run_dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("ice_")));

    let o = svead(&["report", "--in", "out"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);
}

#[test]
fn jobs_do_not_change_results() {
    let dir = fixture(CONFIG);
    assert_eq!(code(&svead(&["run", "--config", "exp.toml", "--out", "a", "--jobs", "1"], dir.path())), 0);
    assert_eq!(code(&svead(&["run", "--config", "exp.toml", "--out", "b", "--jobs", "4"], dir.path())), 0);
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "metrics.csv"), read("b", "metrics.csv"));
    assert_eq!(read("a", "report.json"), read("b", "report.json"));
}

#[test]
fn explain_subcommand_writes_csvs() {
    let dir = fixture(CONFIG);
    assert_eq!(code(&svead(&["run", "--config", "exp.toml"], dir.path())), 0);
    let model = model_file(&dir.path().join("out"));
    let model = model.to_str().unwrap();
    let o = svead(&["explain", "--model", model, "--data", "data.csv", "--out", "ex", "--method", "shap", "--rows", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let shap = std::fs::read_to_string(dir.path().join("ex/shap.csv")).unwrap();
    assert_eq!(shap.lines().count(), 1 + 2 * 4);
    let o = svead(&["explain", "--model", model, "--data", "data.csv", "--out", "ex", "--method", "ice", "--feature", "v2", "--rows", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = svead(&["explain", "--model", model, "--data", "data.csv", "--out", "ex", "--method", "pip"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("ex/pip.csv").exists());
    let o = svead(&["explain", "--model", model, "--data", "data.csv", "--out", "ex", "--method", "ice"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn exit_codes() {
    let dir = fixture("[dataset]\npath = \"data.csv\"\n[[grid]]\nname = \"a\"\nmodel = \"logreg\"\nbogus = 1\n");
    let o = svead(&["run", "--config", "exp.toml", "--out", "o"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    std::fs::write(dir.path().join("missing.toml"), "[dataset]\npath = \"nope.csv\"\n[[grid]]\nname = \"a\"\nmodel = \"logreg\"\n").unwrap();
    assert_eq!(code(&svead(&["run", "--config", "missing.toml", "--out", "o"], dir.path())), 2);

    std::fs::write(dir.path().join("noout.toml"), "[dataset]\npath = \"data.csv\"\n[[grid]]\nname = \"a\"\nmodel = \"logreg\"\n").unwrap();
    assert_eq!(code(&svead(&["run", "--config", "noout.toml"], dir.path())), 1);

    assert_eq!(code(&svead(&["report", "--in", "nowhere"], dir.path())), 2);
    assert_eq!(code(&svead(&["--help"], dir.path())), 0);
    assert_eq!(code(&svead(&["frobnicate"], dir.path())), 1);
}
