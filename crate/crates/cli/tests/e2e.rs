use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use kamred::driver::{smallness_explicit, SmallnessCase};

const GOLDEN: [f64; 2] = [1.0, 1.618_033_988_749_895];

fn kamred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kamred"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn schrodinger(size: f64) -> Value {
    json!({
        "omega": GOLDEN,
        "kappa": 1.0,
        "G": {"kind": "power", "mu": 2.0},
        "g": {"kind": "power", "mu": 2.0},
        "r0": 0.5,
        "n0": 0,
        "eps0": 1e-8,
        "require_condepsilon": false,
        "system": {"preset": "schrodinger", "E": 0.6737, "V": [{"k": [1, 0], "c": size}]},
        "rotation": {"T": 2000.0, "h": 0.02}
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn golden_schrodinger_reduces() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "golden.json", &schrodinger(4e-12));
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["status"]["kind"], "reduced");
    assert!(cert["residual"].as_f64().unwrap() <= 1e-10);
    assert!(cert["B"].is_object() || cert["B"].is_array());
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with(
        "n,r_n,N_n,eps_bound,F_norm,resonant,m,alpha_re,alpha_im,residual,contraction\n"
    ));
    let meta = read_json(&dir.path().join("run_meta.json"));
    assert_eq!(meta["exit_code"], 0);
    assert_eq!(meta["status"]["kind"], "reduced");
}

#[test]
fn zero_perturbation_has_zero_residual() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(0.0);
    cfg["system"] = json!({"preset": "custom", "A": [[0.0, -0.7], [0.7, 0.0]]});
    let cfg = write_config(dir.path(), "zero.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["status"]["kind"], "reduced");
    assert_eq!(cert["residual"].as_f64(), Some(0.0));
    assert_eq!(cert["steps"], 0);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "golden.json", &schrodinger(4e-12));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        assert_eq!(
            code(&kamred(&["run", "--config", s(&cfg), "--out", s(o)])),
            0
        );
    }
    for f in ["trace.csv", "certificate.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn max_steps_reached_is_stalled() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(4e-12);
    cfg["max_steps"] = json!(1);
    let cfg = write_config(dir.path(), "short.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["status"]["kind"], "stalled");
    assert_eq!(cert["steps"], 1);
}

#[test]
fn oversized_perturbation_is_precondition_failure() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(1e-6);
    cfg["eps0"] = json!(1e-9);
    let cfg = write_config(dir.path(), "big.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let cert = read_json(&dir.path().join("certificate.json"));
    assert_eq!(cert["status"]["kind"], "precondition_failure");
}

#[test]
fn strict_condepsilon_shrinks_eps0_below_the_perturbation() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(4e-12);
    cfg["require_condepsilon"] = json!(true);
    let cfg = write_config(dir.path(), "strict.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let meta = read_json(&dir.path().join("run_meta.json"));
    assert!(meta["schedule"]["condepsilon"]["holds"].as_bool().unwrap());
    assert!(meta["schedule"]["eps0"].as_f64().unwrap() < 1e-12);
}

#[test]
fn auto_dioph_matches_explicit_threshold() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(0.0);
    cfg["eps0"] = json!("auto:dioph");
    cfg["require_condepsilon"] = json!(true);
    cfg["r0"] = json!(2.0);
    cfg["n0"] = json!(1);
    cfg["system"] = json!({"preset": "custom", "A": [[0.0, -0.7], [0.7, 0.0]]});
    let cfg = write_config(dir.path(), "dioph.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let meta = read_json(&dir.path().join("run_meta.json"));
    let want = smallness_explicit(SmallnessCase::Dioph { s: 4.0 }, 1.0, 2.0, 1);
    assert_eq!(meta["schedule"]["ln_eps0"].as_f64(), Some(want));
}

#[test]
fn parse_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(4e-12);
    cfg["kapa"] = json!(1.0);
    let bad = write_config(dir.path(), "unknown.json", &cfg);
    let out = kamred(&["run", "--config", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("kapa"), "{}", stderr(&out));

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\n  \"omega\": [1.0,\n").unwrap();
    let out = kamred(&["run", "--config", s(&broken)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));

    let mut cfg = schrodinger(4e-12);
    cfg["system"] = json!({"preset": "custom", "A": [[1.0, 0.0], [0.0, 1.0]]});
    let not_traceless = write_config(dir.path(), "trace.json", &cfg);
    assert_eq!(code(&kamred(&["run", "--config", s(&not_traceless)])), 1);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&kamred(&["run", "--config", s(&missing)])), 1);
    assert_eq!(code(&kamred(&["run"])), 1);
    assert_eq!(code(&kamred(&["frobnicate"])), 1);
    assert_eq!(code(&kamred(&["--help"])), 0);
}

#[test]
fn batch_fans_out_and_reports_worst_code() {
    let dir = TempDir::new().unwrap();
    let ok = write_config(dir.path(), "ok.json", &schrodinger(4e-12));
    let mut short = schrodinger(4e-12);
    short["max_steps"] = json!(1);
    let short = write_config(dir.path(), "short.json", &short);
    let out_dir = dir.path().join("out");
    let out = kamred(&[
        "run",
        "--config",
        s(&ok),
        "--config",
        s(&short),
        "--out",
        s(&out_dir),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert_eq!(
        read_json(&out_dir.join("ok/certificate.json"))["status"]["kind"],
        "reduced"
    );
    assert_eq!(
        read_json(&out_dir.join("short/certificate.json"))["status"]["kind"],
        "stalled"
    );
}

fn run_golden(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "golden.json", &schrodinger(4e-12));
    assert_eq!(code(&kamred(&["run", "--config", s(&cfg)])), 0);
    cfg
}

#[test]
fn audit_of_nonresonant_run_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = run_golden(dir.path());
    let trace = dir.path().join("trace.csv");
    let out = kamred(&["audit", "--trace", s(&trace), "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("audit_report.json"));
    assert_eq!(report["passes"], true);
    let names: Vec<&str> = report["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap())
        .collect();
    for item in 1..=6 {
        assert!(
            names.iter().any(|n| n.starts_with(&format!("item{item}_"))),
            "{names:?}"
        );
    }
    assert!(names.contains(&"rotation_additivity"));
    assert!(names.contains(&"budget_sum_m"));
}

#[test]
fn audit_detects_tampered_norm() {
    let dir = TempDir::new().unwrap();
    let cfg = run_golden(dir.path());
    let trace = dir.path().join("trace.csv");
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[2].split(',').map(String::from).collect();
    let bound: f64 = cols[3].parse().unwrap();
    cols[4] = format!("{:e}", 10.0 * bound);
    lines[2] = cols.join(",");
    let tampered = dir.path().join("tampered.csv");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let out = kamred(&["audit", "--trace", s(&tampered), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = read_json(&dir.path().join("audit_report.json"));
    assert_eq!(report["passes"], false);
    let item4 = report["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["name"] == "item4_perturbation_bound")
        .unwrap();
    assert_eq!(item4["pass"], false);
}

#[test]
fn audit_rejects_malformed_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = run_golden(dir.path());
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "n,r_n\n0,zero\n").unwrap();
    let out = kamred(&["audit", "--trace", s(&bad), "--config", s(&cfg)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let missing = dir.path().join("none.csv");
    assert_eq!(
        code(&kamred(&[
            "audit",
            "--trace",
            s(&missing),
            "--config",
            s(&cfg)
        ])),
        1
    );
}

#[test]
fn resonant_run_passes_budget_audit() {
    let dir = TempDir::new().unwrap();
    let w = std::f64::consts::PI + 1e-12;
    let c = 1e-12;
    let mut cfg = schrodinger(0.0);
    cfg["eps0"] = json!(1e-10);
    cfg["system"] = json!({
        "preset": "custom",
        "A": [[0.0, -w], [w, 0.0]],
        "F": {
            "dim": 2,
            "reality_flag": true,
            "coeffs": [
                {"half_k": [0, 0], "re": [[1e-11, 0.0], [0.0, -1e-11]], "im": [[0.0, 0.0], [0.0, 0.0]]},
                {"half_k": [0, 2], "re": [[0.0, c], [0.0, 0.0]], "im": [[0.0, 0.0], [0.0, 0.0]]},
                {"half_k": [0, -2], "re": [[0.0, c], [0.0, 0.0]], "im": [[0.0, 0.0], [0.0, 0.0]]}
            ]
        }
    });
    let cfg = write_config(dir.path(), "resonant.json", &cfg);
    let out = kamred(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = dir.path().join("trace.csv");
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.contains(",true,")).count(),
        1,
        "{text}"
    );
    let out = kamred(&["audit", "--trace", s(&trace), "--config", s(&cfg)]);
    let report = read_json(&dir.path().join("audit_report.json"));
    let verdict = |name: &str| {
        report["verdicts"]
            .as_array()
            .unwrap()
            .iter()
            .find(|v| v["name"] == name)
            .unwrap()["pass"]
            .as_bool()
            .unwrap()
    };
    for name in [
        "item1_strip_floor",
        "item2_resonance_proximity",
        "item3_mode_size",
        "item4_perturbation_bound",
        "item5_conjugation_residual",
        "item6_eigenvalue_continuity",
        "schedule_agreement",
        "budget_sum_m",
        "budget_interlacing",
        "budget_no_resonance_after_n0",
        "rotation_additivity",
    ] {
        assert!(verdict(name), "{name}");
    }
    // ρ = π⟨(1,0),ω⟩ by construction, so ρ itself is resonant
    assert!(!verdict("rho_arithmetic"));
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn check_arith_golden_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "golden.json", &schrodinger(4e-12));
    let out = kamred(&["check-arith", "--config", s(&cfg), "--N", "40"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.path().join("arith_report.json"));
    assert_eq!(report["nr_omega"]["passes"], true);
    assert_eq!(report["fitted"]["kappa"], 1.0);
    let table = fs::read_to_string(dir.path().join("g_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("N,G(N),argmin m"));
    // G(1) = 1 at m = ±(1,0) or ±(0,1), G(2) = φ at m = ±(1,-1)
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
    let second: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!((second[1].parse::<f64>().unwrap() - GOLDEN[1]).abs() < 1e-12);
    assert_eq!(table.lines().count(), 41);
}

#[test]
fn check_arith_rationally_dependent_fails() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(4e-12);
    cfg["omega"] = json!([1.0, 2.0]);
    let cfg = write_config(dir.path(), "rational.json", &cfg);
    let out = kamred(&["check-arith", "--config", s(&cfg), "--N", "10"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = read_json(&dir.path().join("arith_report.json"));
    assert_eq!(report["nr_omega"]["passes"], false);
}

#[test]
fn check_arith_reports_divergent_integral() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(4e-12);
    cfg["G"] = json!({"kind": "exp_pow", "alpha": 1.0});
    let cfg = write_config(dir.path(), "divergent.json", &cfg);
    let out = kamred(&["check-arith", "--config", s(&cfg), "--N", "10"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = read_json(&dir.path().join("arith_report.json"));
    assert_eq!(report["brjuno_G"]["finite"], false);
    assert!(report["brjuno_G"]["divergent"].is_string());
}

#[test]
fn rotnum_prints_estimate() {
    let dir = TempDir::new().unwrap();
    let mut cfg = schrodinger(0.0);
    cfg["system"] = json!({"preset": "custom", "A": [[0.0, -0.7], [0.7, 0.0]]});
    let cfg = write_config(dir.path(), "rot.json", &cfg);
    let out = kamred(&["rotnum", "--config", s(&cfg), "--T", "200", "--h", "0.05"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let est: Value = serde_json::from_slice(&out.stdout).unwrap();
    let keys: Vec<&String> = est.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    for k in ["rho", "T", "h", "error_estimate"] {
        assert!(est.get(k).is_some(), "{k}");
    }
    let rho = est["rho"].as_f64().unwrap();
    assert!((rho - 0.7).abs() <= est["error_estimate"].as_f64().unwrap());
    let out = kamred(&["rotnum", "--config", s(&cfg), "--T", "200", "--h=-1"]);
    assert_eq!(code(&out), 2);
}
