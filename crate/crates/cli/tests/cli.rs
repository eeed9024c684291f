use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn model_path() -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_state_model.json");
    p.canonicalize().unwrap().to_string_lossy().into_owned()
}

fn base_config() -> Value {
    json!({
        "model": model_path(),
        "seed": 11,
        "simulate": {"n_paths": 3, "dt": 0.05, "control": {"constant": "busy"}},
        "filter": {"x0": [0.5, 0.5], "dt": 0.01, "control": {"constant": "calm"},
                   "oracle": {"n_chains": 1000}},
        "hjb": {"L": 1, "dx": 0.1, "mode": "parabolic"},
        "verify": {"x0": [0.5, 0.5], "n_paths": 500, "dt": 0.02, "scheme_budget": 0.05,
                   "challengers": [{"label": "calm", "control": {"constant": "calm"}}]},
        "smp": {"x0": [0.5, 0.5], "n_samples": 600, "dt": 0.05, "tolerance": 0.05,
                "control": "hjb_policy"}
    })
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn wonham(args: &[&str], config: &Path, out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wonham"));
    cmd.args(args).arg("--config").arg(config);
    if let Some(o) = out {
        cmd.arg("--out").arg(o);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# replay: "));
    text.split_once('\n').unwrap().1.to_string()
}

#[test]
fn validate_prints_the_audit() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let out = wonham(&["validate"], &cfg, None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("K0 = 2 (derived)"), "{text}");
    assert!(
        text.contains("K = 4.4 (derived) >= N * sup q = 4"),
        "{text}"
    );
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let out = wonham(&["simulate"], &cfg, Some(o));
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["paths.csv", "jumps.csv", "simulate.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let text = fs::read_to_string(a.join("paths.csv")).unwrap();
    let header: Value = serde_json::from_str(
        text.lines()
            .next()
            .unwrap()
            .strip_prefix("# replay: ")
            .unwrap(),
    )
    .unwrap();
    assert_eq!(header["seed"], 11);
    let replay = write_config(dir.path(), "replay.json", &header["config"]);
    let c = dir.path().join("c");
    let out = wonham(&["simulate"], &replay, Some(&c));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for f in ["paths.csv", "jumps.csv", "simulate.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(c.join(f)).unwrap(),
            "replay {f}"
        );
    }

    let other = dir.path().join("other");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wonham"));
    let out = cmd
        .args(["simulate", "--seed", "12", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(
        data_rows(&a.join("paths.csv")),
        data_rows(&other.join("paths.csv"))
    );
}

#[test]
fn path_csv_has_the_documented_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let out_dir = dir.path().join("out");
    assert_eq!(
        wonham(&["simulate"], &cfg, Some(&out_dir)).status.code(),
        Some(0)
    );
    let rows = data_rows(&out_dir.join("paths.csv"));
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("path_id,t,state,control,W_1"));
    let body: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(body.len(), 3 * 21);
    assert!(body
        .iter()
        .all(|r| r[3] == "busy" && (r[2] == "1" || r[2] == "2")));
    assert_eq!(body[0][4], "0");
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (o, threads) in [(&a, "1"), (&b, "3")] {
        let out = Command::new(env!("CARGO_BIN_EXE_wonham"))
            .env("WONHAM_THREADS", threads)
            .args(["filter", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(o)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["filter.csv", "oracle.csv", "filter.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let bad = Command::new(env!("CARGO_BIN_EXE_wonham"))
        .env("WONHAM_THREADS", "many")
        .args(["validate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn filter_reports_the_oracle_comparison() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let out_dir = dir.path().join("out");
    let out = wonham(&["filter"], &cfg, Some(&out_dir));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("filter.json")).unwrap()).unwrap();
    let oracle = &report["result"]["oracle"];
    assert_eq!(oracle["n_chains"], 1000);
    assert!(oracle["max_z"].as_f64().unwrap() < 6.0, "{oracle}");
    let rows = data_rows(&out_dir.join("filter.csv"));
    assert!(rows.starts_with("path_id,t,rho_1,rho_2,pi_1,pi_2,mass\n"));
}

#[test]
fn step_above_cfl_names_the_admissible_step() {
    let dir = TempDir::new().unwrap();
    let mut config = base_config();
    config["hjb"]["dt"] = json!(0.1);
    let cfg = write_config(dir.path(), "config.json", &config);
    let out_dir = dir.path().join("out");
    let out = wonham(&["solve-hjb"], &cfg, Some(&out_dir));
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("largest admissible step"),
        "{}",
        stderr(&out)
    );
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["error"], "cfl_violation");
    let max_dt = report["max_dt"].as_f64().unwrap();
    assert!(max_dt > 0.0 && max_dt < 0.1);
}

#[test]
fn config_errors_point_at_the_line() {
    let dir = TempDir::new().unwrap();
    let mut config = base_config();
    config["simulate"]["dt"] = json!(-0.05);
    let cfg = write_config(dir.path(), "config.json", &config);
    let out = wonham(&["simulate"], &cfg, Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let text = fs::read_to_string(&cfg).unwrap();
    let sim = text.find("\"simulate\"").unwrap();
    let line = text[..sim + text[sim..].find("\"dt\"").unwrap()]
        .matches('\n')
        .count()
        + 1;
    assert!(
        stderr(&out).contains(&format!("config.json:{line}: simulate.dt")),
        "{}",
        stderr(&out)
    );

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\n  \"model\": \"m.json\",\n  \"seed\": -1\n}").unwrap();
    let out = wonham(&["validate"], &broken, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("broken.json:3:"), "{}", stderr(&out));

    let mut config = base_config();
    config["unexpected"] = json!(1);
    let cfg = write_config(dir.path(), "extra.json", &config);
    assert_eq!(wonham(&["validate"], &cfg, None).status.code(), Some(2));
}

#[test]
fn model_errors_point_at_the_table() {
    let dir = TempDir::new().unwrap();
    let mut model: Value =
        serde_json::from_str(&fs::read_to_string(model_path()).unwrap()).unwrap();
    model["q"][1][0][0][1] = json!(-2.0);
    fs::write(
        dir.path().join("model.json"),
        serde_json::to_string_pretty(&model).unwrap(),
    )
    .unwrap();
    let mut config = base_config();
    config["model"] = json!("model.json");
    let cfg = write_config(dir.path(), "config.json", &config);
    let out = wonham(&["validate"], &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    let text = fs::read_to_string(dir.path().join("model.json")).unwrap();
    let line = text[..text.find("\"q\"").unwrap()].matches('\n').count() + 1;
    assert!(
        stderr(&out).contains(&format!("model.json:{line}: negative rate")),
        "{}",
        stderr(&out)
    );
}

#[test]
fn missing_inputs_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let mut config = base_config();
    config["filter"]["control"] = json!("hjb_policy");
    let cfg = write_config(dir.path(), "config.json", &config);
    let out = wonham(&["filter"], &cfg, Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("filter.oracle"));

    let cfg = write_config(dir.path(), "ok.json", &base_config());
    let out = wonham(&["simulate"], &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no output directory"));

    let mut config = base_config();
    config["simulate"]["control"] = json!({"policy_file": "nowhere.csv"});
    let cfg = write_config(dir.path(), "nofile.json", &config);
    assert_eq!(
        wonham(&["simulate"], &cfg, Some(dir.path())).status.code(),
        Some(2)
    );
}

#[test]
fn policy_file_reproduces_the_solved_policy() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let solved = dir.path().join("solved");
    let out = wonham(&["solve-hjb"], &cfg, Some(&solved));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(solved.join("solver.json")).unwrap()).unwrap();
    let solver = &report["result"]["solver"];
    assert!(solver["dt"].as_f64().unwrap() <= solver["cfl_bound"].as_f64().unwrap());
    let value = data_rows(&solved.join("value.csv"));
    assert!(value.starts_with("t,x_1,x_2,value,control\n"));

    let mut a = base_config();
    a["simulate"]["control"] = json!("hjb_policy");
    let mut b = base_config();
    b["simulate"]["control"] = json!({"policy_file": solved.join("policy.csv")});
    let (oa, ob) = (dir.path().join("a"), dir.path().join("b"));
    for (c, o, name) in [(&a, &oa, "a.json"), (&b, &ob, "b.json")] {
        let cfg = write_config(dir.path(), name, c);
        let out = wonham(&["simulate"], &cfg, Some(o));
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert_eq!(
        data_rows(&oa.join("paths.csv")),
        data_rows(&ob.join("paths.csv"))
    );
}

#[test]
fn verify_and_smp_report_their_checks() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "config.json", &base_config());
    let out_dir = dir.path().join("out");
    let out = wonham(&["verify"], &cfg, Some(&out_dir));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["verification"]["pass"], true);
    assert_eq!(report["seed"], 11);

    let out = wonham(&["smp-check"], &cfg, Some(&out_dir));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = data_rows(&out_dir.join("adjoint.csv"));
    assert!(rows.starts_with("t,p_1,p_2,q_1_1,q_1_2,basis_size,rank,residual_norm\n"));
    let last = rows.lines().last().unwrap();
    assert!(last.starts_with("1,0.5,-1,"), "{last}");
}

#[test]
fn failed_checks_exit_with_status_four() {
    let dir = TempDir::new().unwrap();
    let mut config = base_config();
    config["smp"]["control"] = json!({"constant": "busy"});
    config["smp"]["tolerance"] = json!(0.0);
    config["smp"]["level"] = json!(0.0);
    let cfg = write_config(dir.path(), "config.json", &config);
    let out_dir = dir.path().join("out");
    let out = wonham(&["smp-check"], &cfg, Some(&out_dir));
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("smp.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["pass"], false);
}
