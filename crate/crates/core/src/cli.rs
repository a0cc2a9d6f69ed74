//! The `vilds` command-line tool: `simulate`, `fit` and `eval`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::io::{self, ModelFile, RunManifest};
use crate::model::{Family, GenerativeParams};
use crate::oracle;
use crate::posterior::{NetShape, PosteriorKind, Recognition, DEFAULT_ALPHA};
use crate::train::{self, FitConfig};

#[derive(Debug, Parser)]
#[command(name = "vilds", version, about = "Variational smoothing for latent state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a latent path and observations from a generative model.
    Simulate(SimulateArgs),
    /// Fit a recognition model (and optionally θ) to observations.
    Fit(FitArgs),
    /// Write posterior moments of a fitted model, optionally against the exact smoother.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long = "T", default_value_t = 1000)]
    len: usize,
    /// Latent dimension (the nonlinear family is fixed at 1).
    #[arg(long)]
    n: Option<usize>,
    /// Observation dimension (the nonlinear family is fixed at 1).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Use these parameters instead of drawing random ones.
    #[arg(long)]
    theta: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Observations CSV (header `x1..xm`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long, value_enum, default_value_t = PosteriorKind::Vildsmult)]
    posterior: PosteriorKind,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    window: usize,
    /// Monte-Carlo samples per gradient estimate.
    #[arg(long = "L", default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep θ at its initial value.
    #[arg(long)]
    fix_theta: bool,
    /// Initial θ (required with --fix-theta except for the nonlinear family).
    #[arg(long)]
    theta: Option<PathBuf>,
    /// Latent dimension when θ is initialized from the data.
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    hidden_width: usize,
    /// Affine layers per network.
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    batches_per_epoch: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleChoice {
    Kalman,
    None,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = OracleChoice::None)]
    oracle: OracleChoice,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status: 0 success, 2 usage, 3 I/O, 4 numeric, 5 incompatible oracle.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(&a, recorded),
        Command::Fit(a) => fit(&a, recorded),
        Command::Eval(a) => eval(&a, recorded),
    };
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn manifest(dir: &Path, command: &str, args: Vec<String>, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
    let m = RunManifest {
        version: io::VERSION.to_string(),
        command: command.to_string(),
        args,
        seed,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    io::write_json(&dir.join("manifest.json"), &m)
}

fn name<V: ValueEnum>(v: V) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

fn read_data(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (_, rows) = io::read_csv(path)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn simulate(a: &SimulateArgs, args: Vec<String>) -> Result<String> {
    let theta = match &a.theta {
        Some(p) => {
            let t = io::read_theta(p)?;
            if t.family != a.family {
                return Err(Error::InvalidParams(format!(
                    "--family {:?} but theta file has family {:?}",
                    a.family, t.family
                )));
            }
            t
        }
        None => match a.family {
            Family::Lds => GenerativeParams::lds_random(a.n.unwrap_or(2), a.m.unwrap_or(20), a.seed),
            Family::Plds => GenerativeParams::plds_random(a.n.unwrap_or(2), a.m.unwrap_or(50), a.seed),
            Family::Nonlin => GenerativeParams::nonlin_default(),
        },
    };
    for (flag, given, actual) in [("n", a.n, theta.latent_dim()), ("m", a.m, theta.obs_dim())] {
        if let Some(v) = given {
            if v != actual {
                return Err(Error::InvalidParams(format!("--{flag} {v} conflicts with the model's {actual}")));
            }
        }
    }
    if a.len == 0 {
        return Err(Error::InvalidParams("--T must be positive".into()));
    }
    let data = theta.simulate(a.len, a.seed.wrapping_add(1))?;
    fs::create_dir_all(&a.out_dir)?;
    let (n, m) = (theta.latent_dim(), theta.obs_dim());
    io::write_csv(&a.out_dir.join("x.csv"), &io::numbered_header("x", m), &data.x)?;
    io::write_csv(&a.out_dir.join("z_true.csv"), &io::numbered_header("z", n), data.z_true.as_deref().unwrap_or(&[]))?;
    io::write_json(&a.out_dir.join("theta.json"), &theta)?;
    manifest(&a.out_dir, "simulate", args, Some(a.seed), &["x.csv", "z_true.csv", "theta.json"])?;
    Ok(format!("simulated family={} T={} n={n} m={m} seed={}", name(a.family), a.len, a.seed))
}

fn fit(a: &FitArgs, args: Vec<String>) -> Result<String> {
    let x = read_data(&a.data)?;
    let theta = match &a.theta {
        Some(p) => io::read_theta(p)?,
        None if a.fix_theta && a.family != Family::Nonlin => {
            return Err(Error::InvalidParams("--fix-theta needs --theta".into()))
        }
        None => GenerativeParams::init_from_data(a.family, &x, a.n)?,
    };
    if theta.family != a.family {
        return Err(Error::InvalidParams(format!(
            "--family {:?} but theta file has family {:?}",
            a.family, theta.family
        )));
    }
    if x.iter().any(|r| r.len() != theta.obs_dim()) {
        return Err(Error::DimensionMismatch { expected: theta.obs_dim(), got: x[0].len() });
    }
    let config = FitConfig {
        kind: a.posterior,
        hidden_width: a.hidden_width,
        layers: a.layers,
        samples: a.samples,
        window: a.window,
        batches_per_epoch: a.batches_per_epoch,
        epochs: a.epochs,
        base_lr: a.lr,
        alpha: a.alpha,
        seed: a.seed,
        learn_theta: !a.fix_theta,
        learn_phi: true,
        ..FitConfig::default()
    };
    let shape = NetShape { hidden: a.hidden_width, layers: a.layers };
    let phi = Recognition::init_on_data(a.posterior, &x, theta.latent_dim(), shape, a.alpha, a.seed)?;
    let result = train::fit(&config, &x, theta, phi)?;
    fs::create_dir_all(&a.out)?;
    ModelFile::new(result.theta.clone(), result.phi.clone(), config).write(&a.out.join("model.json"))?;
    write_trainlog(&a.out.join("trainlog.csv"), &result)?;
    manifest(&a.out, "fit", args, Some(a.seed), &["model.json", "trainlog.csv"])?;
    let last = result.elbo.last().copied().unwrap_or(f64::NAN);
    Ok(format!("fit posterior={} epochs={} final_elbo={last}", name(a.posterior), a.epochs))
}

fn write_trainlog(path: &Path, r: &train::FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "wall_seconds", "elbo", "lr_scale", "cholesky_failures", "spectral_radius_A"])?;
    for e in 0..r.elbo.len() {
        w.write_record([
            (e + 1).to_string(),
            r.wall_seconds[e].to_string(),
            r.elbo[e].to_string(),
            r.lr_scale[e].to_string(),
            r.cholesky_failures[e].to_string(),
            r.spectral_radius[e].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn eval(a: &EvalArgs, args: Vec<String>) -> Result<String> {
    let model = ModelFile::read(&a.model)?;
    let x = read_data(&a.data)?;
    if a.oracle == OracleChoice::Kalman && model.family != Family::Lds {
        return Err(Error::IncompatibleOracle(format!(
            "the Kalman smoother needs an lds model, got {:?}",
            model.family
        )));
    }
    if x.iter().any(|r| r.len() != model.theta.obs_dim()) {
        return Err(Error::DimensionMismatch { expected: model.theta.obs_dim(), got: x[0].len() });
    }
    let (post, _, _) = train::build_with_jitter(&model.phi, &x, false)?;
    let mm = post.marginals()?;
    let n = post.latent_dim();
    let means: Vec<Vec<f64>> = mm.means.iter().map(|v| v.as_slice().to_vec()).collect();
    fs::create_dir_all(&a.out_dir)?;
    io::write_csv(&a.out_dir.join("posterior_means.csv"), &io::numbered_header("z", n), &means)?;
    io::write_blocks(&a.out_dir.join("posterior_var.csv"), "v", &mm.var)?;
    io::write_blocks(&a.out_dir.join("posterior_cross.csv"), "c", &mm.cross)?;
    let mut outputs = vec!["posterior_means.csv", "posterior_var.csv", "posterior_cross.csv"];
    let mut summary = format!("evaluated T={} n={n}", x.len());
    if a.oracle == OracleChoice::Kalman {
        let exact = oracle::kalman_smoother(&model.theta, &x)?;
        let target: Vec<Vec<f64>> = exact.means.iter().map(|v| v.as_slice().to_vec()).collect();
        let al = oracle::align_means(&means, &target)?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i + 1) as f64, al.r2[i], al.rmse[i]]).collect();
        io::write_csv(
            &a.out_dir.join("comparison.csv"),
            &["dim".to_string(), "r2".to_string(), "rmse".to_string()],
            &rows,
        )?;
        outputs.push("comparison.csv");
        let worst = al.r2.iter().copied().fold(f64::INFINITY, f64::min);
        summary.push_str(&format!(" min_r2={worst}"));
    }
    manifest(&a.out_dir, "eval", args, None, &outputs)?;
    Ok(summary)
}
