//! `ikrr`: command-line front end for the invariant kernel ridge regression
//! library and its experiment harness.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ikrr::actions::GroupActionSpec;
use ikrr::harness::{
    configure_threads, count_sweep, geometric_grid, run_gain, sub_seed, trial_seed, write_basis, write_counts,
    write_records, EtaPolicy, Experiment, ExperimentConfig, GainReport, NGrid, RateReport, RunRecord, TargetConfig,
    TrialDiagnostics, DEFAULT_LAMBDA_BAND,
};
use ikrr::kernels::{KernelMetadata, SpectralProfile};
use ikrr::spectra::{enumerate_eigenbasis, ManifoldSpec};
use ikrr::{Error, Result};

const MANIFOLD_HELP: &str = "Manifold: `torus:d`, `circle` (same as torus:1) or `sphere2`";

const ACTION_HELP: &str = "Group action, parts joined by `+`:
  trivial
  shift:a1,..,ad[;b1,..,bd]      translations (angles `0` or `[-][p]pi[/q]`)
  perm:(i j ..)[;(..)]           coordinate permutations
  reflect:i[@angle],..           θ_i ↦ angle − θ_i (default angle pi), one element
  signflip:i,..                  θ_i ↦ −θ_i, one element
  subtorus:[v1,..,vd][;[..]]     continuous shifts along integer directions
  antipodal                      x ↦ −x on sphere2
  axisrot                        rotations about the z axis on sphere2";

const KERNEL_HELP: &str = "Kernel profile: `sobolev:s=S` (needs s > d/2), `bandlimited:D=N` or `heat:t=T`";

#[derive(Parser, Debug)]
#[command(name = "ikrr", version, about = "Group-invariant kernel ridge regression on tori and the 2-sphere")]
struct Cli {
    /// Worker threads (default: IKRR_THREADS, else all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enumerate Laplace–Beltrami eigenpairs up to a cutoff and write basis.csv
    #[command(after_help = "Output columns: index,lambda,kind,k_or_lm\n\
        kind is const/cos/sin (torus) or ylm (sphere2); k_or_lm is space separated.")]
    Spectra {
        #[arg(long, help = MANIFOLD_HELP)]
        manifold: String,
        /// Eigenvalue cutoff λ_max (inclusive)
        #[arg(long)]
        lambda_max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count invariant eigenfunctions over a geometric λ grid and write counts.csv
    #[command(after_help = "Output columns: lambda,count,prediction,ratio\n\
        prediction and ratio are empty when the quotient volume has no closed form.")]
    Count {
        #[arg(long, help = MANIFOLD_HELP)]
        manifold: String,
        #[arg(long, default_value = "trivial", help = ACTION_HELP)]
        action: String,
        /// Geometric grid `start:stop:factor`; includes stop when hit exactly
        #[arg(long)]
        lambda_grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model on sampled data and write run.json
    Krr(KrrArgs),
    /// Run an n-sweep from a JSON config; writes runs.csv and rate.json
    #[command(after_help = CONFIG_HELP)]
    Rate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run an invariant and a trivial sweep and estimate the sample gain
    #[command(after_help = "Writes runs_invariant.csv, runs_trivial.csv and gain.json.\n\
        Both configs must share the manifold, kernel profile, target and sigma.")]
    Gain {
        #[arg(long)]
        invariant: PathBuf,
        #[arg(long)]
        trivial: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

const CONFIG_HELP: &str = r#"Config schema (JSON, unknown fields rejected):
  manifold, action, kernel      spec strings as for `krr`
  lambda_max                    optional kernel cutoff
  target: {s, norm, lambda_band (default 400), seed, action (optional)}
  sigma                         noise standard deviation
  n_grid: {min, max, factor}    geometric sample sizes
  trials                        trials per n
  eta: {"policy":"auto"} | {"policy":"fixed","value":x} | {"policy":"grid","values":[..]}
  master_seed
  mc_test_points                default 0 (no Monte-Carlo risk)
  record_timing                 default false (wall_ms = 0)
  aggregation                   "median" (default) or "mean""#;

#[derive(Args, Debug)]
struct KrrArgs {
    #[arg(long, help = MANIFOLD_HELP)]
    manifold: String,
    #[arg(long, default_value = "trivial", help = ACTION_HELP)]
    action: String,
    #[arg(long, help = KERNEL_HELP)]
    kernel: String,
    /// Number of samples
    #[arg(long)]
    n: usize,
    /// Regularization: a positive number or `auto` (rate-optimal choice; Sobolev kernels only)
    #[arg(long, default_value = "auto")]
    eta: String,
    /// Noise standard deviation
    #[arg(long)]
    sigma: f64,
    /// Seed of the random target coefficients
    #[arg(long)]
    target_seed: u64,
    /// Seed of the sample points and noise
    #[arg(long)]
    data_seed: u64,
    /// Kernel cutoff (default: automatic, at least the target band)
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Target smoothness (default: the kernel's s, else 2)
    #[arg(long)]
    s_target: Option<f64>,
    /// Target Sobolev norm
    #[arg(long, default_value_t = 1.0)]
    norm: f64,
    /// Target band: eigenvalues up to this value carry coefficients
    #[arg(long, default_value_t = DEFAULT_LAMBDA_BAND)]
    band: f64,
    /// Action the target is invariant under (default: --action)
    #[arg(long)]
    target_action: Option<String>,
    /// Monte-Carlo test points for the sampled risk (0 disables it)
    #[arg(long, default_value_t = 10_000)]
    mc_test_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Seeds {
    target: u64,
    data: u64,
    trial: u64,
    points: u64,
    noise: u64,
    mc: u64,
}

#[derive(Serialize)]
struct KrrReport {
    version: &'static str,
    config_hash: String,
    config: ExperimentConfig,
    kernel: KernelMetadata,
    seeds: Seeds,
    eta: f64,
    risk_exact: f64,
    risk_mc: Option<f64>,
    record: RunRecord,
    diagnostics: TrialDiagnostics,
}

#[derive(Serialize)]
struct GainFile {
    version: &'static str,
    invariant: ExperimentConfig,
    trivial: ExperimentConfig,
    #[serde(flatten)]
    report: GainReport,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("ikrr: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ikrr: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Spectra { manifold, lambda_max, out } => {
            let m: ManifoldSpec = manifold.parse()?;
            let basis = enumerate_eigenbasis(&m, lambda_max)?;
            write_basis(create(&out)?, &basis)
        }
        Command::Count { manifold, action, lambda_grid, out } => {
            let m: ManifoldSpec = manifold.parse()?;
            let a = GroupActionSpec::parse(&m, &action)?;
            let rows = count_sweep(&a, &geometric_grid(&lambda_grid)?)?;
            write_counts(create(&out)?, &rows)
        }
        Command::Krr(args) => krr(args),
        Command::Rate { config, out_dir } => {
            let experiment = Experiment::new(ExperimentConfig::load(&config)?)?;
            let sweep = experiment.run()?;
            let report = RateReport::new(&experiment, &sweep)?;
            fs::create_dir_all(&out_dir)?;
            write_records(create(&out_dir.join("runs.csv"))?, &sweep.records)?;
            write_json(&out_dir.join("rate.json"), &report)
        }
        Command::Gain { invariant, trivial, out_dir } => {
            let inv = ExperimentConfig::load(&invariant)?;
            let triv = ExperimentConfig::load(&trivial)?;
            let (si, st, report) = run_gain(&inv, &triv)?;
            fs::create_dir_all(&out_dir)?;
            write_records(create(&out_dir.join("runs_invariant.csv"))?, &si.records)?;
            write_records(create(&out_dir.join("runs_trivial.csv"))?, &st.records)?;
            let file = GainFile {
                version: ikrr::VERSION,
                invariant: inv,
                trivial: triv,
                report,
            };
            write_json(&out_dir.join("gain.json"), &file)
        }
    }
}

fn krr(args: KrrArgs) -> Result<()> {
    let profile: SpectralProfile = args.kernel.parse()?;
    let eta = match args.eta.trim() {
        "auto" => EtaPolicy::Auto,
        v => EtaPolicy::Fixed {
            value: v
                .parse()
                .map_err(|_| Error::Config(format!("--eta must be a number or `auto` (got `{v}`)")))?,
        },
    };
    let s_target = args
        .s_target
        .unwrap_or(match profile {
            SpectralProfile::Sobolev { s } => s,
            _ => 2.0,
        });
    let config = ExperimentConfig {
        manifold: args.manifold,
        action: args.action,
        kernel: args.kernel,
        lambda_max: args.lambda_max,
        target: TargetConfig {
            s: s_target,
            norm: args.norm,
            lambda_band: args.band,
            seed: args.target_seed,
            action: args.target_action,
        },
        sigma: args.sigma,
        n_grid: NGrid {
            min: args.n,
            max: args.n,
            factor: 2.0,
        },
        trials: 1,
        eta,
        master_seed: args.data_seed,
        mc_test_points: args.mc_test_points,
        record_timing: false,
        aggregation: Default::default(),
    };
    let experiment = Experiment::new(config)?;
    let (record, diagnostics) = experiment.run_trial(args.n, 0);
    if let Some(e) = &diagnostics.error {
        return Err(Error::Numerical(format!("fit failed: {e}")));
    }
    let trial = trial_seed(args.data_seed, args.n, 0);
    let report = KrrReport {
        version: ikrr::VERSION,
        config_hash: experiment.config_hash.clone(),
        kernel: experiment.kernel.metadata(),
        seeds: Seeds {
            target: args.target_seed,
            data: args.data_seed,
            trial,
            points: sub_seed(trial, "points"),
            noise: sub_seed(trial, "noise"),
            mc: sub_seed(trial, "mc"),
        },
        eta: record.eta,
        risk_exact: record.risk_exact,
        risk_mc: record.risk_mc,
        config: experiment.config,
        record,
        diagnostics,
    };
    write_json(&args.out, &report)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
