//! `superproc` command-line front end.
//!
//! Every command prints one JSON document on stdout holding a run manifest
//! and the command's report. Trajectories and ensembles go to `--export`
//! as CSV.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use superproc::config::parse_model;
use superproc::cumulant::{solve_cumulant, solve_truncated, uniform_grid, SolverOptions};
use superproc::model::{FnVec, MeasureVec, SuperprocessModel};
use superproc::qsd::{mass_decay_check, qsd_transform, yaglom_transform, QsdSpec};
use superproc::sampler::{
    empirical_laplace, path_rng, qsd_empirical_laplace, qsd_source, sample_qsd, simulate_ensemble, summarize, PathConfig,
};
use superproc::spectral::{principal_triple, require_subcritical, spectral_report};
use superproc::verify::{run_suite, Suite, VerifyOptions};
use superproc::Error;

#[derive(Parser)]
#[command(name = "superproc", version, about = "Quasi-stationary analysis of finite-state superprocesses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Principal eigentriple, spectral gap and H1 decay table.
    Spectral {
        #[command(flatten)]
        common: Common,
        /// Fail unless lambda < 0.
        #[arg(long)]
        require_subcritical: bool,
    },
    /// Trajectory of V_t f on [0, T]; `--f inf` gives the extinction function.
    Cumulant {
        #[command(flatten)]
        common: Common,
        /// Scalar, comma-separated per-site vector, or `inf`.
        #[arg(long)]
        f: String,
        #[arg(long)]
        t: f64,
        /// Grid intervals.
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// CSV destination for the trajectory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Yaglom transform Y(f) = 1 - exp(-G f).
    Yaglom {
        #[command(flatten)]
        common: Common,
        /// Test functions separated by `;`.
        #[arg(long = "f-list", default_value = "1")]
        f_list: String,
    },
    /// Quasi-stationary law with mass decay rate r; optionally sampled.
    Qsd {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_negative_numbers = true)]
        r: f64,
        #[arg(long = "f-list", default_value = "1")]
        f_list: String,
        /// Number of QSD samples to draw (0 = transform only).
        #[arg(long, default_value_t = 0)]
        n: usize,
        /// Paths in the conditioned source ensemble.
        #[arg(long, default_value_t = 200_000)]
        source_paths: usize,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV destination for the samples.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Invariant suites; exits nonzero if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Monte Carlo paths for the sampler suite.
        #[arg(long, default_value_t = 20_000)]
        n: usize,
    },
    /// Particle ensemble at time T.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Initial masses: scalar, per-site vector.
        #[arg(long, default_value = "1")]
        mu: String,
        /// Laplace functional test function reported in the summary.
        #[arg(long, default_value = "1")]
        f: String,
        /// CSV destination for the ensemble.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Model(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Model(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        Error::Domain(_)
        | Error::Validation(_)
        | Error::Config { .. }
        | Error::Reducible
        | Error::NotSubcritical(_)
        | Error::NoQsd { .. } => 2,
        _ => 3,
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: String,
    options: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    version: &'static str,
    input_digest: String,
}

struct Loaded {
    model: SuperprocessModel,
    path: String,
    digest: String,
}

fn load(common: &Common) -> Result<Loaded, Error> {
    let bytes = std::fs::read(&common.config)
        .map_err(|e| Error::Io(format!("{}: {e}", common.config.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::Config { line: 1, message: "config is not UTF-8".into() })?;
    let model = parse_model(&text)?;
    Ok(Loaded {
        model,
        path: common.config.display().to_string(),
        digest: format!("sha256:{}", hex::encode(Sha256::digest(&bytes))),
    })
}

fn manifest(command: &'static str, l: &Loaded, options: Value, seed: Option<u64>) -> RunManifest {
    RunManifest {
        command,
        config: l.path.clone(),
        options,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        input_digest: l.digest.clone(),
    }
}

fn emit(manifest: RunManifest, report: impl Serialize) -> Result<(), Failure> {
    let doc = json!({ "manifest": manifest, "report": report });
    let text = serde_json::to_string_pretty(&doc).expect("reports serialize");
    match writeln!(std::io::stdout().lock(), "{text}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(Error::Io(format!("stdout: {e}")).into()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// `inf`, a scalar, or a comma-separated per-site vector (entries may be `inf`).
fn parse_fn(spec: &str, n: usize) -> Result<FnVec, Error> {
    let entry = |s: &str| -> Result<f64, Error> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") {
            return Ok(f64::INFINITY);
        }
        s.parse::<f64>()
            .map_err(|_| Error::Domain(format!("cannot parse {s:?} as a function value")))
    };
    let parts: Vec<f64> = spec.split(',').map(entry).collect::<Result<_, _>>()?;
    let values = match parts.len() {
        1 => vec![parts[0]; n],
        k if k == n => parts,
        k => return Err(Error::Domain(format!("function has {k} entries, model has {n} sites"))),
    };
    FnVec::new(values)
}

fn parse_fn_list(spec: &str, n: usize) -> Result<Vec<FnVec>, Error> {
    spec.split(';').filter(|s| !s.trim().is_empty()).map(|s| parse_fn(s, n)).collect()
}

fn cmd_spectral(common: &Common, require: bool) -> Result<(), Failure> {
    let l = load(common)?;
    let triple = principal_triple(&l.model)?;
    if require {
        require_subcritical(&triple)?;
    }
    let report = spectral_report(&l.model, &triple)?;
    emit(manifest("spectral", &l, json!({ "require_subcritical": require }), None), report)
}

fn cmd_cumulant(common: &Common, f: &str, t: f64, grid: usize, export: Option<&Path>) -> Result<(), Failure> {
    let l = load(common)?;
    let triple = principal_triple(&l.model)?;
    let f = parse_fn(f, l.model.n())?;
    let opts = SolverOptions {
        grid_points: grid,
        ..SolverOptions::default()
    };
    opts.validate()?;
    let traj = if f.is_finite() {
        solve_cumulant(&l.model, &triple, &f, t, &opts)?
    } else {
        if !(t > opts.t_min) {
            return Err(Error::Domain(format!("T = {t} must exceed t_min = {}", opts.t_min)).into());
        }
        solve_truncated(&l.model, &triple, &f, &uniform_grid(opts.t_min, t, grid), &opts)?
    };
    if let Some(path) = export {
        write_file(path, &traj.to_csv(&l.model.space.labels))?;
    }
    let report = json!({
        "t": traj.times.last(),
        "final": traj.last(),
        "truncation_level": traj.truncation_level,
        "finite_from": traj.truncation_level.map(|_| traj.times[0]),
        "solver_stats": traj.solver_stats,
        "points": traj.times.len(),
        "export": export.map(|p| p.display().to_string()),
    });
    emit(
        manifest("cumulant", &l, json!({ "f": f_str(&f), "t": t, "grid": grid }), None),
        report,
    )
}

fn fmt_value(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn cmd_yaglom(common: &Common, f_list: &str) -> Result<(), Failure> {
    let l = load(common)?;
    let triple = principal_triple(&l.model)?;
    require_subcritical(&triple)?;
    let fs = parse_fn_list(f_list, l.model.n())?;
    let yt = yaglom_transform(&l.model, &triple)?;
    let mut rows = Vec::new();
    for f in &fs {
        let e = yt.evaluate_detailed(f)?;
        rows.push(json!({
            "f": f_str(f),
            "value": e.value,
            "raw": e.raw,
            "stop_t": e.stop_t,
            "rate": e.rate,
        }));
    }
    let report = json!({ "lambda": triple.lambda, "values": rows });
    emit(manifest("yaglom", &l, json!({ "f_list": f_list }), None), report)
}

#[allow(clippy::too_many_arguments)]
fn cmd_qsd(
    common: &Common,
    r: f64,
    f_list: &str,
    n: usize,
    source_paths: usize,
    dt: f64,
    seed: u64,
    export: Option<&Path>,
) -> Result<(), Failure> {
    let l = load(common)?;
    let triple = principal_triple(&l.model)?;
    let spec = QsdSpec::new(r, triple.lambda)?;
    let fs = parse_fn_list(f_list, l.model.n())?;
    let yt = yaglom_transform(&l.model, &triple)?;
    let mut rows = Vec::new();
    for f in &fs {
        let value = qsd_transform(&yt, &spec, f)?;
        rows.push(json!({
            "f": f_str(f),
            "yaglom": yt.evaluate(f)?,
            "value": value,
            "laplace": 1.0 - value,
        }));
    }
    let decay = [0.5, 1.0, 2.0]
        .iter()
        .map(|&t| mass_decay_check(&yt, &spec, t).map(|d| json!({ "t": t, "measured": d.measured, "expected": d.expected })))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = json!({
        "lambda": triple.lambda,
        "r": spec.r(),
        "gamma": spec.gamma(),
        "values": rows,
        "mass_decay": decay,
    });
    let options = json!({ "r": r, "f_list": f_list, "n": n, "source_paths": source_paths, "dt": dt });
    if n > 0 {
        let opts = SolverOptions::default();
        let source = qsd_source(&l.model, &triple, source_paths, dt, seed, 1e-3, &opts)?;
        let survivors = &source.conditioned.survivors;
        let mut rng = path_rng(seed, u64::MAX);
        let samples = sample_qsd(survivors, &spec, n, &mut rng)?;
        let mut checks = Vec::new();
        for (f, row) in fs.iter().zip(report["values"].as_array().expect("array").clone()) {
            if !f.is_finite() {
                continue;
            }
            let est = qsd_empirical_laplace(survivors, &samples, f)?;
            checks.push(json!({
                "f": row["f"],
                "empirical_laplace": est.mean,
                "se": est.se,
                "predicted": row["laplace"],
            }));
        }
        report["sampling"] = json!({
            "source": {
                "horizon": source.horizon,
                "dt": source.dt,
                "paths": source_paths,
                "survivors": survivors.len(),
                "survival": source.conditioned.survival,
                "expected_survival": source.conditioned.expected_survival,
            },
            "samples": n,
            "laplace": checks,
        });
        if let Some(path) = export {
            let mut csv = String::from("sample_index,count");
            for label in &l.model.space.labels {
                csv.push_str(&format!(",X[{label}]"));
            }
            csv.push('\n');
            for (k, (x, z)) in samples.samples.iter().zip(&samples.counts).enumerate() {
                csv.push_str(&format!("{k},{z}"));
                for v in x {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
            write_file(path, &csv)?;
        }
    }
    emit(manifest("qsd", &l, options, (n > 0).then_some(seed)), report)
}

fn cmd_verify(common: &Common, suite: &str, seed: u64, n: usize) -> Result<(), Failure> {
    let l = load(common)?;
    let suite: Suite = suite.parse()?;
    let opts = VerifyOptions {
        seed,
        mc_paths: n,
        ..VerifyOptions::default()
    };
    let report = run_suite(&l.model, suite, &opts)?;
    let failed = report.failed;
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("FAIL {} [{}] measured {} expected {} tol {}{}", c.name, c.inputs, c.measured, c.expected, c.tolerance,
            c.error.as_ref().map(|e| format!(" ({e})")).unwrap_or_default());
    }
    emit(manifest("verify", &l, json!({ "suite": suite.name(), "n": n }), Some(seed)), report)?;
    if failed > 0 {
        Err(Failure::Checks(failed))
    } else {
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    common: &Common,
    n: usize,
    t: f64,
    seed: u64,
    dt: f64,
    mu: &str,
    f: &str,
    export: Option<&Path>,
) -> Result<(), Failure> {
    let l = load(common)?;
    let mu0 = parse_fn(mu, l.model.n())?;
    let mu0 = MeasureVec::new(mu0.values().to_vec())?;
    let f = parse_fn(f, l.model.n())?;
    let cfg = PathConfig::new(dt, t, seed, n);
    let ensemble = simulate_ensemble(&l.model, &mu0, &cfg)?;
    if let Some(path) = export {
        write_file(path, &ensemble.to_csv(&l.model.space.labels))?;
    }
    let report = json!({
        "summary": summarize(&ensemble, &cfg)?,
        "laplace": if f.is_finite() { Some(empirical_laplace(&ensemble, &f)?) } else { None },
        "export": export.map(|p| p.display().to_string()),
    });
    emit(
        manifest("simulate", &l, json!({ "n": n, "t": t, "dt": dt, "mu": mu, "f": f_str(&f) }), Some(seed)),
        report,
    )
}

fn f_str(f: &FnVec) -> Vec<Value> {
    f.values().iter().map(|v| fmt_value(*v)).collect()
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("SUPERPROC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Domain(format!("SUPERPROC_THREADS = {raw:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Domain(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Spectral { common, require_subcritical } => cmd_spectral(common, *require_subcritical),
        Command::Cumulant { common, f, t, grid, export } => cmd_cumulant(common, f, *t, *grid, export.as_deref()),
        Command::Yaglom { common, f_list } => cmd_yaglom(common, f_list),
        Command::Qsd { common, r, f_list, n, source_paths, dt, seed, export } => {
            cmd_qsd(common, *r, f_list, *n, *source_paths, *dt, *seed, export.as_deref())
        }
        Command::Verify { common, suite, seed, n } => cmd_verify(common, suite, *seed, *n),
        Command::Simulate { common, n, t, seed, dt, mu, f, export } => {
            cmd_simulate(common, *n, *t, *seed, *dt, mu, f, export.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Model(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Checks(k)) => {
            eprintln!("error: {k} check(s) failed");
            ExitCode::from(3)
        }
    }
}
