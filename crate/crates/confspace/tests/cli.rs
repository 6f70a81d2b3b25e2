use std::path::Path;
use std::process::{Command, Output};

use confspace::harness::RunRecord;

fn confspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confspace")).args(args).output().expect("binary runs")
}

fn run_laplace(dir: &Path, name: &str, format: &str) -> (Output, String) {
    let out = dir.join(name);
    let o = confspace(&["run", "laplace", "--samples", "2000", "--seed", "9", "--format", format, "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(&out).expect("record written");
    (o, text)
}

#[test]
fn bad_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("record.json");
    let cases = [
        "samples = \"many\"\n",
        "samples = 100\nnot_a_field = 1\n",
        "samples = 0\n",
        "batteries = [\"nope\"]\n",
        "[space]\nkind = \"torus\"\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&cfg, text).unwrap();
        let o = confspace(&["run", "laplace", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
        assert!(!out.exists(), "case {i} wrote a record");
    }
    let o = confspace(&["run", "no-such-experiment"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\n\nsamples = 0\n").unwrap();
    let o = confspace(&["run", "laplace", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn json_record_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (o, text) = run_laplace(dir.path(), "r.json", "json");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec: RunRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(rec.experiment, "laplace");
    assert_eq!(rec.config.seed, 9);
    assert_eq!(rec.config.samples, 2000);
    assert!(rec.pass && !rec.checks.is_empty());
    assert!(rec.wall_clock_s.is_none());
    assert_eq!(serde_json::to_string_pretty(&rec).unwrap().trim(), text.trim());
}

#[test]
fn csv_has_one_row_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let (_, json) = run_laplace(dir.path(), "r.json", "json");
    let (o, text) = run_laplace(dir.path(), "r.csv", "csv");
    assert_eq!(o.status.code(), Some(0));
    let rec: RunRecord = serde_json::from_str(&json).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().len(), 6);
    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), rec.checks.len());
    for (row, c) in rows.iter().zip(&rec.checks) {
        assert_eq!(&row[0], c.check);
        assert_eq!(&row[5], c.pass.to_string());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("r.json", "json"), ("r.csv", "csv")] {
        let (_, a) = run_laplace(dir.path(), name, format);
        let (_, b) = run_laplace(dir.path(), name, format);
        assert_eq!(a, b, "{format}");
    }
}

#[test]
fn defaults_parse_back() {
    let o = confspace(&["defaults"]);
    assert!(o.status.success());
    let cfg = confspace::harness::ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(cfg, confspace::harness::ExperimentConfig::default());
}
