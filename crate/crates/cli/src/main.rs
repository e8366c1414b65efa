//! `asreach`: reachability certificates, simulation and verification for
//! polynomial SDEs.
//!
//! Exit codes: 0 success or reachable, 1 solver failure, 2 usage or input
//! error, 10 not reachable, 11 no drift certificate, 12 variant stalled,
//! 13 verification failed.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use asreach::io::{self, Certificate, CertificateFile, PolyJson};
use asreach::linclass::{self, LinearSde, Verdict};
use asreach::simulate::{self, SimConfig};
use asreach::sos::{self, DriftParams, LambdaOutcome, SosError, VariantParams};
use asreach::verify::{self, QuantityConfig, SamplingSpec, VerificationReport};

use manifest::{Inputs, RunManifest};

const EXIT_SOLVER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NOT_REACHABLE: u8 = 10;
const EXIT_DRIFT_INFEASIBLE: u8 = 11;
const EXIT_VARIANT_STALLED: u8 = 12;
const EXIT_VERIFY_FAILED: u8 = 13;

#[derive(Parser, Debug)]
#[command(name = "asreach", version, about = "Almost sure reachability certificates for polynomial SDEs")]
struct Cli {
    /// Worker threads for simulation and the lambda sweep.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Classify a linear SDE dx = Ax dt + B dW.
    ClassifyLinear(ClassifyArgs),
    /// Synthesize drift and variant certificates by SOS programming.
    Synthesize(SynthesizeArgs),
    /// Estimate the hitting-time CDF of the target by Euler–Maruyama.
    Simulate(SimulateArgs),
    /// Check a certificate on grid and random samples.
    Verify(VerifyArgs),
    /// Estimate one-step decrease probabilities of a variant on a grid.
    DecreaseSweep(DecreaseArgs),
    /// Show the blow-up of the discretized noiseless double well.
    DemoDivergence(DemoArgs),
    /// Convert an infix polynomial to the JSON term list.
    PolyParse(PolyParseArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ClassifyArgs {
    #[arg(long, required_unless_present = "system")]
    matrix_a: Option<PathBuf>,
    #[arg(long, required_unless_present = "system")]
    matrix_b: Option<PathBuf>,
    /// Linear system file, instead of the two matrices.
    #[arg(long, conflicts_with_all = ["matrix_a", "matrix_b"])]
    system: Option<PathBuf>,
    #[arg(long, default_value_t = linclass::DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SynthesizeArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long, default_value_t = 2)]
    deg_v: u32,
    #[arg(long)]
    deg_zeta: Option<u32>,
    /// Initial template, e.g. "(x1 - 1)^2 - 0.04".
    #[arg(long, allow_hyphen_values = true)]
    zeta0: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    /// Verification box: `lo,hi` for every axis or one pair per axis.
    #[arg(long = "box", value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,3")]
    bounds: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    /// Also estimate H, delta, epsilon and h on `{V <= r}` with this window.
    #[arg(long, requires = "r")]
    tau: Option<f64>,
    #[arg(long, requires = "tau")]
    r: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SimulateArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long)]
    tmax: f64,
    #[arg(long)]
    ntraj: usize,
    #[arg(long)]
    seed: u64,
    /// Defaults to 100 evenly spaced times up to tmax.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct VerifyArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    certificate: PathBuf,
    #[arg(long = "box", value_delimiter = ',', allow_hyphen_values = true)]
    bounds: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct DecreaseArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    certificate: PathBuf,
    #[arg(long = "box", value_delimiter = ',', allow_hyphen_values = true)]
    bounds: Vec<f64>,
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 0.001)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct DemoArgs {
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Starting point; defaults to twice the threshold.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct PolyParseArgs {
    #[arg(long)]
    n: usize,
    #[arg(allow_hyphen_values = true)]
    expr: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match &cmd {
        Command::ClassifyLinear(a) => classify(&cmd, a),
        Command::Synthesize(a) => synthesize(&cmd, a),
        Command::Simulate(a) => simulate_cmd(&cmd, a),
        Command::Verify(a) => verify_cmd(&cmd, a),
        Command::DecreaseSweep(a) => decrease(&cmd, a),
        Command::DemoDivergence(a) => demo(&cmd, a),
        Command::PolyParse(a) => poly_parse(&cmd, a),
        Command::Replay(a) => replay(a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn out_dir(p: &Path) -> Result<&Path> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    Ok(p)
}

fn subcommand_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::ClassifyLinear(_) => "classify-linear",
        Command::Synthesize(_) => "synthesize",
        Command::Simulate(_) => "simulate",
        Command::Verify(_) => "verify",
        Command::DecreaseSweep(_) => "decrease-sweep",
        Command::DemoDivergence(_) => "demo-divergence",
        Command::PolyParse(_) => "poly-parse",
        Command::Replay(_) => "replay",
    }
}

/// Writes `manifest.json` into `out`, or prints it to stderr without one.
fn emit_manifest(cmd: &Command, seed: Option<u64>, inputs: Inputs, out: Option<&Path>) -> Result<()> {
    let m = RunManifest::new(subcommand_name(cmd), cmd, seed, inputs)?;
    let text = io::to_json_pretty(&m);
    match out {
        Some(dir) => write(out_dir(dir)?, "manifest.json", &text),
        None => {
            eprint!("manifest {text}");
            Ok(())
        }
    }
}

/// Expands `lo,hi` to every axis, or reads one pair per axis.
fn parse_box(vals: &[f64], n: usize) -> Result<Vec<(f64, f64)>> {
    let pairs: Vec<(f64, f64)> = vals.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect();
    ensure!(vals.len().is_multiple_of(2) && !pairs.is_empty(), "--box needs lo,hi pairs");
    let out = match pairs.len() {
        1 => vec![pairs[0]; n],
        k if k == n => pairs,
        k => bail!("--box has {k} pairs for a {n}-dimensional system"),
    };
    ensure!(out.iter().all(|(lo, hi)| lo <= hi && lo.is_finite() && hi.is_finite()), "--box needs finite lo <= hi");
    Ok(out)
}

fn classify(cmd: &Command, a: &ClassifyArgs) -> Result<u8> {
    let mut inputs = Inputs::default();
    let (ma, mb) = match &a.system {
        Some(p) => {
            let text = inputs.read(p)?;
            let loaded = io::load_system(&text)?;
            io::linear_parts(&loaded.system).context("system is not linear with constant diffusion")?
        }
        None => {
            let pa = a.matrix_a.as_ref().expect("clap requires it");
            let pb = a.matrix_b.as_ref().expect("clap requires it");
            (io::parse_matrix(&inputs.read(pa)?)?, io::parse_matrix(&inputs.read(pb)?)?)
        }
    };
    let sys = LinearSde::from_rows(&ma, &mb)?;
    let verdict = linclass::classify(&sys, a.tol)?;
    let text = io::to_json_pretty(&verdict);
    print!("{text}");
    if let Some(dir) = &a.out {
        write(out_dir(dir)?, "verdict.json", &text)?;
    }
    emit_manifest(cmd, None, inputs, a.out.as_deref())?;
    Ok(match verdict.verdict {
        Verdict::AlmostSurelyReachable => 0,
        Verdict::NotAlmostSurelyReachable => EXIT_NOT_REACHABLE,
    })
}

#[derive(Serialize)]
struct SynthesisReport<'a> {
    drift: &'a VerificationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<&'a VerificationReport>,
}

#[derive(Serialize)]
struct InfeasibleReport {
    degree: u32,
    ray_valid: Option<bool>,
    b_dot_z: Option<f64>,
    min_slack_eig: Option<f64>,
    free_residual: Option<f64>,
}

fn synthesize(cmd: &Command, a: &SynthesizeArgs) -> Result<u8> {
    let mut inputs = Inputs::default();
    let loaded = io::load_system(&inputs.read(&a.system)?)?;
    let sys = &loaded.system;
    let target = loaded.target.as_ref().context("system file has no target")?;
    ensure!(!sys.is_noiseless(), "diffusion is identically zero");
    let bounds = parse_box(&a.bounds, sys.n())?;
    let zeta0 = a.zeta0.as_deref().map(|s| io::parse_poly(s, sys.n())).transpose()?;
    let dir = out_dir(&a.out)?;

    let drift = match sos::synthesize_drift(sys, a.deg_v, &DriftParams::default()) {
        Ok(d) => d,
        Err(SosError::Infeasible { degree, ray }) => {
            let rep = InfeasibleReport {
                degree,
                ray_valid: ray.as_ref().map(|r| r.valid),
                b_dot_z: ray.as_ref().map(|r| r.b_dot_z),
                min_slack_eig: ray.as_ref().map(|r| r.min_slack_eig),
                free_residual: ray.as_ref().map(|r| r.free_residual),
            };
            write(dir, "drift_infeasible.json", &io::to_json_pretty(&rep))?;
            println!("no drift certificate at degree {degree}");
            match &ray {
                Some(r) => println!(
                    "dual certificate: b.z = {:.3e}, min slack eigenvalue {:.3e}, free residual {:.3e}",
                    r.b_dot_z, r.min_slack_eig, r.free_residual
                ),
                None => println!("equality constraints are inconsistent"),
            }
            emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
            return Ok(EXIT_DRIFT_INFEASIBLE);
        }
        Err(e @ (SosError::Solver(_) | SosError::Verification { .. } | SosError::Sdp(_))) => {
            eprintln!("drift synthesis failed: {e}");
            emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
            return Ok(EXIT_SOLVER);
        }
        Err(e) => return Err(e.into()),
    };
    write(dir, "drift.json", &io::to_json_pretty(&CertificateFile::from_drift(&drift)))?;
    println!("drift certificate: V = {}", drift.v);
    println!("compact radius sqrt(lambda1/gamma1) = {:.6}", drift.compact_radius);

    let params = VariantParams {
        deg_zeta: a.deg_zeta,
        lambda_grid: a.lambda_grid.clone(),
        max_iters: a.max_iters,
        ..VariantParams::default()
    };
    let sweep = sos::synthesize_variant_alternating(sys, target, zeta0.as_ref(), &params)?;
    let mut sweep_csv = String::from("lambda,status,epsilon\n");
    for (lambda, o) in &sweep.outcomes {
        let (status, eps) = match o {
            LambdaOutcome::Certified(c) => ("certified", c.epsilon),
            LambdaOutcome::InitialInfeasible => ("initial_infeasible", f64::NAN),
            LambdaOutcome::Stalled { trace } => ("stalled", trace.last().copied().unwrap_or(f64::NAN)),
            LambdaOutcome::Error(_) => ("error", f64::NAN),
        };
        sweep_csv.push_str(&format!("{lambda:.16e},{status},{eps:.16e}\n"));
    }
    write(dir, "lambda_sweep.csv", &sweep_csv)?;

    let sampling = SamplingSpec::new(&bounds, a.samples, a.seed);
    let drift_rep = verify::verify_drift(sys, &drift, &sampling)?;
    let Some(cert) = &sweep.best else {
        let mut trace_csv = String::from("lambda,iteration,epsilon\n");
        for (lambda, o) in &sweep.outcomes {
            if let LambdaOutcome::Stalled { trace } = o {
                for (k, e) in trace.iter().enumerate() {
                    trace_csv.push_str(&format!("{lambda:.16e},{k},{e:.16e}\n"));
                }
            }
        }
        write(dir, "eps_trace.csv", &trace_csv)?;
        write(dir, "verification.json", &io::to_json_pretty(&SynthesisReport { drift: &drift_rep, variant: None }))?;
        println!("variant alternation stalled for every lambda");
        print!("{trace_csv}");
        emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
        return Ok(EXIT_VARIANT_STALLED);
    };
    write(dir, "variant.json", &io::to_json_pretty(&CertificateFile::from_variant(cert)))?;
    let mut trace_csv = String::from("iteration,epsilon\n");
    for (k, e) in cert.trace.iter().enumerate() {
        trace_csv.push_str(&format!("{k},{e:.16e}\n"));
    }
    write(dir, "eps_trace.csv", &trace_csv)?;
    println!("variant certificate: lambda = {}, epsilon = {:.6e}", cert.lambda, cert.epsilon);
    println!("zeta = {}", cert.zeta);

    let mut var_rep = verify::verify_variant(sys, cert, target, &sampling)?;
    if let (Some(tau), Some(r)) = (a.tau, a.r) {
        let cfg = QuantityConfig { r, tau, resolution: 21, n_samples: 2000, seed: a.seed };
        var_rep.quantities = Some(verify::variant_quantities(sys, &drift, cert, &bounds, &cfg)?);
    }
    write(dir, "verification.json", &io::to_json_pretty(&SynthesisReport { drift: &drift_rep, variant: Some(&var_rep) }))?;
    print!("{}{}", drift_rep.summary(), var_rep.summary());
    emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
    Ok(if drift_rep.passed() && var_rep.passed() { 0 } else { EXIT_VERIFY_FAILED })
}

fn simulate_cmd(cmd: &Command, a: &SimulateArgs) -> Result<u8> {
    let mut inputs = Inputs::default();
    let loaded = io::load_system(&inputs.read(&a.system)?)?;
    let target = loaded.target.as_ref().context("system file has no target")?;
    ensure!(a.x0.len() == loaded.system.n(), "--x0 has {} entries, system dimension is {}", a.x0.len(), loaded.system.n());
    let cfg = SimConfig { dt: a.dt, t_max: a.tmax, n_traj: a.ntraj, seed: a.seed };
    cfg.validate()?;
    let horizons = match &a.horizons {
        Some(h) => h.clone(),
        None => (1..=100).map(|k| a.tmax * k as f64 / 100.0).collect(),
    };
    let cdf = simulate::hitting_cdf(&loaded.system, &a.x0, target, &cfg, &horizons)?;
    let dir = out_dir(&a.out)?;
    write(dir, "cdf.csv", &cdf.to_csv())?;
    println!("terminal hitting probability {:.4} (10-90% band {:.4}..{:.4})", cdf.terminal(), cdf.p10.last().unwrap(), cdf.p90.last().unwrap());
    emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
    Ok(0)
}

fn verify_cmd(cmd: &Command, a: &VerifyArgs) -> Result<u8> {
    let mut inputs = Inputs::default();
    let loaded = io::load_system(&inputs.read(&a.system)?)?;
    let cert = CertificateFile::parse(&inputs.read(&a.certificate)?)?.load()?;
    let sys = &loaded.system;
    let sampling = SamplingSpec::new(&parse_box(&a.bounds, sys.n())?, a.samples, a.seed);
    let report = match &cert {
        Certificate::Drift(d) => {
            ensure!(d.v.dim() == sys.n(), "certificate dimension does not match the system");
            verify::verify_drift(sys, d, &sampling)?
        }
        Certificate::Variant(v) => {
            let target = loaded.target.as_ref().context("variant verification needs a target in the system file")?;
            verify::verify_variant(sys, v, target, &sampling)?
        }
    };
    print!("{}", report.summary());
    if let Some(dir) = &a.out {
        write(out_dir(dir)?, "report.json", &io::to_json_pretty(&report))?;
    }
    emit_manifest(cmd, Some(a.seed), inputs, a.out.as_deref())?;
    if report.passed() {
        println!("all checks passed");
        Ok(0)
    } else {
        for c in report.failures() {
            println!("{} failed at {:?} (margin {:.6e})", c.name, c.witness.as_deref().unwrap_or(&[]), c.margin);
        }
        Ok(EXIT_VERIFY_FAILED)
    }
}

fn decrease(cmd: &Command, a: &DecreaseArgs) -> Result<u8> {
    let mut inputs = Inputs::default();
    let loaded = io::load_system(&inputs.read(&a.system)?)?;
    let Certificate::Variant(cert) = CertificateFile::parse(&inputs.read(&a.certificate)?)?.load()? else {
        bail!("decrease-sweep needs a variant certificate");
    };
    let sys = &loaded.system;
    let bounds = parse_box(&a.bounds, sys.n())?;
    let field = simulate::grid_sweep_decrease(sys, &cert.zeta, cert.lambda, &bounds, a.resolution, a.tau, a.delta, a.samples, a.seed)?;
    let dir = out_dir(&a.out)?;
    write(dir, "decrease_field.csv", &field.to_csv())?;
    let m = field.minimum();
    println!(
        "minimum decrease probability {:.4} (stderr {:.4}) at {:?} over {} points",
        m.estimate.value,
        m.estimate.stderr,
        m.x,
        field.points.len()
    );
    emit_manifest(cmd, Some(a.seed), inputs, Some(dir))?;
    Ok(0)
}

fn demo(cmd: &Command, a: &DemoArgs) -> Result<u8> {
    ensure!(a.dt > 0.0 && a.dt.is_finite(), "--dt must be positive");
    let x0 = a.x0.unwrap_or(2.0 * simulate::divergence_threshold(a.dt));
    let d = simulate::divergence_demo(a.dt, x0, a.steps)?;
    let table = d.to_table();
    print!("{table}");
    println!("diverged {}", d.diverged);
    if let Some(dir) = &a.out {
        write(out_dir(dir)?, "divergence.csv", &table)?;
    }
    emit_manifest(cmd, None, Inputs::default(), a.out.as_deref())?;
    Ok(0)
}

fn poly_parse(cmd: &Command, a: &PolyParseArgs) -> Result<u8> {
    let p = io::parse_poly(&a.expr, a.n)?;
    print!("{}", io::to_json_pretty(&PolyJson::from_poly(&p)));
    emit_manifest(cmd, None, Inputs::default(), None)?;
    Ok(0)
}

fn replay(a: &ReplayArgs) -> Result<u8> {
    let m: RunManifest = serde_json::from_str(&read(&a.manifest)?)?;
    m.check_inputs()?;
    let mut cmd: Command = serde_json::from_value(m.config).context("manifest config does not describe a command")?;
    if let Some(out) = &a.out {
        match &mut cmd {
            Command::ClassifyLinear(x) => x.out = Some(out.clone()),
            Command::Synthesize(x) => x.out = out.clone(),
            Command::Simulate(x) => x.out = out.clone(),
            Command::Verify(x) => x.out = Some(out.clone()),
            Command::DecreaseSweep(x) => x.out = out.clone(),
            Command::DemoDivergence(x) => x.out = Some(out.clone()),
            Command::PolyParse(_) => {}
            Command::Replay(_) => bail!("a manifest cannot record a replay"),
        }
    }
    run(cmd)
}
