//! End-to-end runs of the `mstcar` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mstcar"));
    // Keep the caller's environment from leaking flag values in.
    for (key, _) in std::env::vars() {
        if key.starts_with("MSTCAR_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn mstcar")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn write_design(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("design.json");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_DESIGN: &str = r#"{
  "graph": { "builtin": "lattice10" },
  "n_groups": 2,
  "n_time": 3,
  "rho_truth": [0.8, 0.9],
  "population_mode": { "equal": { "n": 1.0 } },
  "n_replicates": 2,
  "seed": 5
}"#;

fn simulate(dir: &Path, design: &str) -> PathBuf {
    let design = write_design(dir, design);
    let out = dir.join("study");
    ok(bin()
        .args(["simulate", "--design"])
        .arg(&design)
        .arg("--out")
        .arg(&out));
    out
}

fn fit_args(cmd: &mut Command, data: &Path, out: &Path) {
    cmd.arg("fit")
        .arg("--data")
        .arg(data)
        .args([
            "--graph",
            "lattice10",
            "--iterations",
            "300",
            "--burn-in",
            "100",
            "--thin",
            "2",
        ])
        .arg("--out")
        .arg(out);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn single_replicate_writes_one_dataset_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let study = simulate(
        tmp.path(),
        &SMALL_DESIGN.replace("\"n_replicates\": 2", "\"n_replicates\": 1"),
    );
    let names: Vec<String> = files(&study).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names.iter().filter(|n| n.starts_with("replicate_")).count(),
        1
    );
    assert!(names.contains(&"truth.json".to_string()));
    assert!(names.contains(&"field_001.csv".to_string()));
    assert!(!names.iter().any(|n| n.contains("lock")));
}

#[test]
fn simulation_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = simulate(a.path(), SMALL_DESIGN);
    let sb = simulate(b.path(), SMALL_DESIGN);
    assert_eq!(files(&sa), files(&sb));
}

#[test]
fn zero_population_cells_are_written_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut table = String::from("site_id,group,time,population\n");
    for site in 1..=10 {
        for time in 1..=2 {
            let pop = if site == 4 && time == 2 { 0 } else { 50_000 };
            table.push_str(&format!("{site},1,{time},{pop}\n"));
        }
    }
    fs::write(tmp.path().join("pop.csv"), table).unwrap();
    let design = r#"{
      "graph": { "builtin": "lattice10" },
      "n_groups": 1, "n_time": 2, "rho_truth": [0.7],
      "population_mode": { "table": { "path": "pop.csv" } },
      "n_replicates": 1, "seed": 1
    }"#;
    let study = simulate(tmp.path(), design);
    let text = fs::read_to_string(study.join("replicate_001.csv")).unwrap();
    let missing: Vec<&str> = text.lines().filter(|l| l.contains(",,")).collect();
    assert_eq!(missing, vec!["4,1,2,,0"]);
}

#[test]
fn fitting_all_variants_reports_three_dics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let mut cmd = bin();
    fit_args(&mut cmd, &data_dir().join("smoke10.csv"), &out);
    ok(cmd.args(["--variant", "all"]));
    let dic: Value = serde_json::from_slice(&fs::read(out.join("dic.json")).unwrap()).unwrap();
    let keys: Vec<&String> = dic.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["mstcar", "separable", "stcar"]);
    for v in ["mstcar", "separable", "stcar"] {
        for f in ["samples.json", "summary.csv", "sigma_eta.csv", "trend.csv"] {
            assert!(out.join(v).join(f).exists(), "{v}/{f}");
        }
        let d = &dic[v];
        let (dic, d_bar, p_d) = (
            d["dic"].as_f64().unwrap(),
            d["d_bar"].as_f64().unwrap(),
            d["p_d"].as_f64().unwrap(),
        );
        assert_eq!(dic, d_bar + p_d);
    }
}

#[test]
fn resumed_fit_matches_uninterrupted_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir().join("smoke10.csv");
    let whole = tmp.path().join("whole");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &whole);
    ok(cmd.args(["--variant", "separable", "--seed", "3"]));

    let parts = tmp.path().join("parts");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &parts);
    ok(cmd.args([
        "--variant",
        "separable",
        "--seed",
        "3",
        "--stop-after",
        "137",
    ]));
    assert!(parts.join("separable/checkpoint.json").exists());
    assert!(!parts.join("separable/samples.json").exists());
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &parts);
    ok(cmd.args([
        "--variant",
        "separable",
        "--seed",
        "3",
        "--resume",
        "--checkpoint-every",
        "50",
    ]));
    assert!(!parts.join("separable/checkpoint.json").exists());
    assert_eq!(
        files(&whole.join("separable")),
        files(&parts.join("separable"))
    );
    assert_eq!(
        fs::read(whole.join("dic.json")).unwrap(),
        fs::read(parts.join("dic.json")).unwrap()
    );
}

#[test]
fn resume_rejects_a_checkpoint_from_other_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir().join("smoke10.csv");
    let out = tmp.path().join("fit");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &out);
    ok(cmd.args(["--stop-after", "20"]));
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &out);
    let res = run(cmd.args(["--resume", "--seed", "99"]));
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn smoke_dataset_fits_quickly_at_default_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(bin()
        .arg("fit")
        .arg("--data")
        .arg(data_dir().join("smoke10.csv"))
        .args(["--graph", "lattice10"])
        .arg("--out")
        .arg(tmp.path().join("fit")));
    assert!(start.elapsed() < Duration::from_secs(60));
    let samples: Value =
        serde_json::from_slice(&fs::read(tmp.path().join("fit/mstcar/samples.json")).unwrap())
            .unwrap();
    assert_eq!(samples["z"].as_array().unwrap().len(), 500);
}

#[test]
fn summarize_reproduces_fit_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir().join("smoke10.csv");
    let fit = tmp.path().join("fit");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &fit);
    ok(&mut cmd);
    let again = tmp.path().join("again");
    ok(bin()
        .arg("summarize")
        .arg("--samples")
        .arg(fit.join("mstcar/samples.json"))
        .arg("--data")
        .arg(&data)
        .args(["--graph", "lattice10"])
        .arg("--out")
        .arg(&again));
    for f in ["summary.csv", "sigma_eta.csv", "trend.csv"] {
        assert_eq!(
            fs::read(fit.join("mstcar").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read(fit.join("dic.json")).unwrap(),
        fs::read(again.join("dic.json")).unwrap()
    );
}

fn fit_study(study: &Path, replicates: usize, variants: &str) {
    for l in 1..=replicates {
        let stem = format!("replicate_{l:03}");
        let mut cmd = bin();
        fit_args(
            &mut cmd,
            &study.join(format!("{stem}.csv")),
            &study.join(&stem),
        );
        ok(cmd
            .args(["--variant", variants])
            .arg("--prior")
            .arg(study.join("prior.json"))
            .arg("--init-truth")
            .arg(study.join("truth.json"))
            .arg("--init-field")
            .arg(study.join(format!("field_{l:03}.csv"))));
    }
}

#[test]
fn coverage_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let study = simulate(tmp.path(), SMALL_DESIGN);

    // Only the first replicate is fitted: the report must refuse.
    fit_study(&study, 1, "mstcar,separable");
    let res = run(bin()
        .arg("coverage")
        .arg("--study")
        .arg(&study)
        .arg("--out")
        .arg(tmp.path().join("report")));
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("replicate 2"));

    fit_study(&study, 2, "mstcar,separable");
    let report_dir = tmp.path().join("report");
    ok(bin()
        .arg("coverage")
        .arg("--study")
        .arg(&study)
        .args(["--variant", "mstcar,separable"])
        .arg("--out")
        .arg(&report_dir));
    let report: Value =
        serde_json::from_slice(&fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_replicates"], 2);
    let z = report["coverage"]["mstcar"]["z"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&z));
    let dic = &report["dic"][0];
    assert_eq!(
        dic["primary_wins"].as_u64().unwrap() + dic["other_wins"].as_u64().unwrap(),
        2
    );
    let csv = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);

    let stub_dir = tmp.path().join("stub");
    ok(bin()
        .arg("coverage")
        .arg("--study")
        .arg(&study)
        .arg("--stub-intervals")
        .arg("--out")
        .arg(&stub_dir));
    let stub: Value =
        serde_json::from_slice(&fs::read(stub_dir.join("report.json")).unwrap()).unwrap();
    for family in ["z", "g_diag", "g_offdiag", "tau2", "rho"] {
        assert_eq!(
            stub["coverage"]["mstcar"][family].as_f64(),
            Some(100.0),
            "{family}"
        );
    }
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_design(
        tmp.path(),
        r#"{ "graph": { "builtin": "nowhere" }, "n_groups": 3, "n_time": 2, "population_mode": { "equal": { "n": 1 } }, "n_replicates": 1, "seed": 0 }"#,
    );
    let res = run(bin()
        .args(["simulate", "--design"])
        .arg(&bad)
        .arg("--out")
        .arg(tmp.path().join("o")));
    assert_eq!(res.status.code(), Some(2));

    let mut cmd = bin();
    fit_args(
        &mut cmd,
        &tmp.path().join("absent.csv"),
        &tmp.path().join("f"),
    );
    assert_eq!(run(&mut cmd).status.code(), Some(2));

    let mut cmd = bin();
    fit_args(
        &mut cmd,
        &data_dir().join("smoke10.csv"),
        &tmp.path().join("f"),
    );
    assert_eq!(run(cmd.args(["--variant", "car"])).status.code(), Some(2));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".mstcar.lock"), "1").unwrap();
    let mut cmd = bin();
    fit_args(&mut cmd, &data_dir().join("smoke10.csv"), &out);
    let res = run(&mut cmd);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("in use"));
}

#[test]
fn environment_variables_set_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir().join("smoke10.csv");
    let flag = tmp.path().join("flag");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &flag);
    ok(cmd.args(["--seed", "41"]));
    let env = tmp.path().join("env");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &env);
    ok(cmd.env("MSTCAR_SEED", "41"));
    assert_eq!(
        fs::read(flag.join("dic.json")).unwrap(),
        fs::read(env.join("dic.json")).unwrap()
    );
}

#[test]
fn sampler_failures_exit_with_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data_dir().join("smoke10.csv");
    let out = tmp.path().join("fit");
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &out);
    ok(cmd.args(["--stop-after", "20"]));
    // A field value whose square overflows makes the next τ² draw impossible.
    let path = out.join("mstcar/checkpoint.json");
    let mut cp: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    cp["state"]["z"][0] = Value::from(1e200);
    fs::write(&path, serde_json::to_vec(&cp).unwrap()).unwrap();
    let mut cmd = bin();
    fit_args(&mut cmd, &data, &out);
    let res = run(cmd.arg("--resume"));
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("iteration 21"));
}
