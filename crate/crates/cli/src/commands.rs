//! Subcommand bodies. Each returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use kamred::arith::{check_nr_omega, fit_g, ratio_bounded, ApproxFn, NrCheck};
use kamred::driver::{resonance_budget_check, Verdict};
use kamred::rotation::verify_additivity;
use kamred::{rotation_number, Certificate, KamError, KamSchedule, RunTrace, Status};

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn schedule_json(s: &KamSchedule) -> Value {
    json!({
        "eps0": s.eps0(),
        "ln_eps0": s.ln_eps0,
        "a": s.a,
        "a_bar": s.a_bar,
        "c0": s.c0,
        "r_floor": s.r_floor(),
        "N_0": s.n_seq(0),
        "condepsilon": s.condepsilon,
        "condepsilon2": s.condepsilon2,
        "n_guard": s.n_guard,
    })
}

fn nr_json(c: &NrCheck) -> Value {
    json!({ "passes": c.passes, "offender": c.offender, "ratio": c.ratio })
}

/// Loads `path`, printing the diagnostic on failure.
fn load(path: &Path) -> Option<RunConfig> {
    match RunConfig::load(path) {
        Ok(c) => Some(c),
        Err(e) => {
            eprintln!("error: {e}");
            None
        }
    }
}

fn status_code(s: &Status) -> i32 {
    match s {
        Status::Reduced => EXIT_OK,
        Status::Stalled(_) => EXIT_FAILED,
        Status::PreconditionFailure(_) => EXIT_PRECONDITION,
    }
}

/// Runs one configuration and writes `trace.csv`, `certificate.json` and
/// the `run_meta.json` sidecar into `out`.
pub fn cmd_run(config_path: &Path, out: &Path) -> i32 {
    match run_inner(config_path, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}

fn run_inner(config_path: &Path, out: &Path) -> Result<i32> {
    let Some(cfg) = load(config_path) else {
        return Ok(EXIT_PARSE);
    };
    let (a, f) = match cfg.system() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {}: field `system`: {e:#}", config_path.display());
            return Ok(EXIT_PARSE);
        }
    };
    let started = Instant::now();
    let mut meta = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config_path.display().to_string(),
    });
    let finish = |mut meta: Value, code: i32| -> Result<i32> {
        meta["exit_code"] = json!(code);
        meta["elapsed_seconds"] = json!(started.elapsed().as_secs_f64());
        write(out, "run_meta.json", &pretty(&meta))?;
        Ok(code)
    };

    let s = match cfg.schedule() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            meta["error"] = json!(e.to_string());
            let code = match e {
                KamError::NoFeasibleEpsilon(_) => EXIT_PRECONDITION,
                KamError::Invalid(_) => EXIT_PARSE,
                _ => EXIT_FAILED,
            };
            return finish(meta, code);
        }
    };
    meta["schedule"] = schedule_json(&s);

    match kamred::run(&a, &f, &cfg.omega, &s, &cfg.run_options()) {
        Ok(outcome) => {
            let cert = &outcome.certificate;
            write(out, "trace.csv", &outcome.trace.to_csv())?;
            write(out, "certificate.json", &cert.to_json())?;
            eprintln!(
                "{}: {:?} after {} steps, residual {:e}",
                config_path.display(),
                cert.status,
                cert.steps,
                cert.residual
            );
            meta["status"] = serde_json::to_value(&cert.status)?;
            finish(meta, status_code(&cert.status))
        }
        Err(KamError::ScheduleViolation {
            step,
            measured,
            bound,
            trace,
        }) => {
            write(out, "trace.csv", &trace.to_csv())?;
            let msg = format!("step {step}: |F| = {measured:e} exceeds schedule bound {bound:e}");
            eprintln!("{}: schedule violation at {msg}", config_path.display());
            meta["error"] = json!(format!("schedule violation at {msg}"));
            finish(meta, EXIT_FAILED)
        }
        Err(e) => {
            eprintln!("{}: {e}", config_path.display());
            meta["error"] = json!(e.to_string());
            finish(meta, EXIT_FAILED)
        }
    }
}

fn integral_json(f: &ApproxFn, p: f64) -> (Value, bool) {
    match f.tail_integral(1.0, p) {
        Ok(v) => (json!({ "p": p, "value": v, "finite": true }), true),
        Err(KamError::Divergent(d)) => (json!({ "p": p, "divergent": d, "finite": false }), false),
        Err(e) => (
            json!({ "p": p, "error": e.to_string(), "finite": false }),
            false,
        ),
    }
}

/// Arithmetic checks of a configuration up to `|m| ≤ n`: writes
/// `arith_report.json` and `g_table.csv`.
pub fn cmd_check_arith(config_path: &Path, n: u32, out: &Path) -> i32 {
    let Some(cfg) = load(config_path) else {
        return EXIT_PARSE;
    };
    let nr = check_nr_omega(&cfg.omega, cfg.kappa, &cfg.big_g, n);
    let fit = fit_g(&cfg.omega, n);
    let gg = ApproxFn::product(&cfg.big_g, &cfg.g);
    let (brjuno_g, ok_g) = integral_json(&cfg.big_g, 2.0);
    let (half_brjuno_g, ok_small_g) = integral_json(&cfg.g, 1.5);
    let (brjuno_gg, ok_gg) = integral_json(&gg, 2.0);
    let ratio = ratio_bounded(&cfg.g, &cfg.big_g, 1.0, 1e6, 400);
    // boundedness of g(t²)/G(t) only decides whether resonances can recur
    // after n₀, so it is reported without gating the exit code
    let passes = nr.passes && ok_g && ok_small_g && ok_gg;
    let report = json!({
        "N": n,
        "passes": passes,
        "nr_omega": nr_json(&nr),
        "fitted": { "kappa": fit.kappa, "G_N": fit.values.last() },
        "brjuno_G": brjuno_g,
        "half_brjuno_g": half_brjuno_g,
        "brjuno_Gg": brjuno_gg,
        "ratio_bounded": { "bounded": ratio.bounded, "analytic": ratio.analytic, "sup": ratio.sup },
    });
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut table = || -> Result<String> {
        wtr.write_record(["N", "G(N)", "argmin m"])?;
        for (i, (v, m)) in fit.values.iter().zip(&fit.argmin).enumerate() {
            let m: Vec<String> = m.iter().map(|x| x.to_string()).collect();
            wtr.write_record([(i + 1).to_string(), format!("{v:e}"), m.join(";")])?;
        }
        wtr.flush()?;
        Ok(String::from_utf8(wtr.get_ref().clone())?)
    };
    let result = table().and_then(|t| {
        write(out, "g_table.csv", &t)?;
        write(out, "arith_report.json", &pretty(&report))
    });
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        return EXIT_FAILED;
    }
    eprintln!(
        "{}: arithmetic conditions {}",
        config_path.display(),
        if passes { "pass" } else { "fail" }
    );
    if passes {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

/// Re-checks a recorded trace against the schedule of `config_path` and
/// writes `audit_report.json`. With a `rotation` block the rotation number
/// of `A + F` is measured; with a certificate the additivity relation is
/// checked as well.
pub fn cmd_audit(
    trace_path: &Path,
    config_path: &Path,
    cert_path: Option<&Path>,
    out: &Path,
) -> i32 {
    let Some(cfg) = load(config_path) else {
        return EXIT_PARSE;
    };
    let trace = match fs::read_to_string(trace_path)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(RunTrace::from_csv(&t, cfg.n0)?))
    {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e:#}", trace_path.display());
            return EXIT_PARSE;
        }
    };
    let cert_path = cert_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| parent_dir(trace_path).join("certificate.json"));
    let cert = if cert_path.exists() {
        match fs::read_to_string(&cert_path)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(Certificate::from_json(&t)?))
        {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("error: {}: {e:#}", cert_path.display());
                return EXIT_PARSE;
            }
        }
    } else {
        None
    };
    match audit_inner(&cfg, &trace, cert.as_ref(), out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}

fn audit_inner(
    cfg: &RunConfig,
    trace: &RunTrace,
    cert: Option<&Certificate>,
    out: &Path,
) -> Result<bool> {
    let s = cfg.schedule()?;
    let estimate = match &cfg.rotation {
        Some(rc) => {
            let theta0 = rc
                .theta0
                .clone()
                .unwrap_or_else(|| vec![0.0; cfg.omega.len()]);
            let full = cfg.full_system()?;
            Some((
                rotation_number(&full, &cfg.omega, &theta0, rc.phi0, rc.t, rc.h)?,
                rc.tol.unwrap_or(0.0),
            ))
        }
        None => None,
    };
    let mut report = resonance_budget_check(
        trace,
        &s,
        &cfg.omega,
        cfg.residual_tol,
        estimate.map(|e| e.0.rho),
    );
    let mut additivity = None;
    if let (Some((est, tol)), Some(cert)) = (estimate, cert) {
        let r = verify_additivity(
            est.rho,
            &cert.b,
            trace,
            &cfg.omega,
            2.0 * est.error_estimate + tol,
        );
        report.verdicts.push(Verdict::new(
            "rotation_additivity",
            r.passes,
            format!(
                "defect {:e} vs allowed {:e} (sign {})",
                r.defect, r.allowed, r.sign
            ),
        ));
        report.passes &= r.passes;
        additivity = Some(r);
    }
    let doc = json!({
        "passes": report.passes,
        "verdicts": report.verdicts,
        "resonances_after_n0": report.resonances_after_n0,
        "rotation": estimate.map(|e| e.0),
        "additivity": additivity,
    });
    write(out, "audit_report.json", &pretty(&doc))?;
    for v in report.verdicts.iter().filter(|v| !v.pass) {
        eprintln!("audit: {} failed: {}", v.name, v.detail);
    }
    Ok(report.passes)
}

/// Prints `{rho, T, h, error_estimate}` for the configured `A + F`.
pub fn cmd_rotnum(config_path: &Path, t: Option<f64>, h: Option<f64>) -> i32 {
    let Some(cfg) = load(config_path) else {
        return EXIT_PARSE;
    };
    let rc = cfg.rotation.clone();
    let t = t
        .or(rc.as_ref().map(|r| r.t))
        .unwrap_or(kamred::rotation::DEFAULT_T);
    let h = h
        .or(rc.as_ref().map(|r| r.h))
        .unwrap_or(kamred::rotation::DEFAULT_H);
    let theta0 = rc
        .as_ref()
        .and_then(|r| r.theta0.clone())
        .unwrap_or_else(|| vec![0.0; cfg.omega.len()]);
    let phi0 = rc.as_ref().map_or(0.0, |r| r.phi0);
    let result = cfg
        .full_system()
        .and_then(|full| Ok(rotation_number(&full, &cfg.omega, &theta0, phi0, t, h)?));
    match result {
        Ok(est) => {
            println!("{}", serde_json::to_string(&est).expect("serializable"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}
