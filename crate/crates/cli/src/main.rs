use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gcmc::experiment::{cmd_compare, cmd_oracle, cmd_run, ExperimentConfig, OracleQuery};
use gcmc::oracle::{Block, GaussianSetup};

#[derive(Parser)]
#[command(name = "gcmc", version, about = "Global consensus Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of replicates.
    #[arg(long)]
    replicates: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated experiments and write per-replicate artifacts plus a summary.
    Run(RunArgs),
    /// Compare samplers at equal simulated wall-clock budget.
    Compare(RunArgs),
    /// Closed-form quantities of the conjugate Gaussian model, as JSON.
    Oracle {
        #[command(subcommand)]
        query: Query,
    },
}

#[derive(Args, Clone)]
struct Setup {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu0: f64,
    #[arg(long = "sigma0-sq", default_value_t = 1.0)]
    sigma0_sq: f64,
    /// Observations (n-form).
    #[arg(long)]
    n: Option<usize>,
    /// Blocks (n-form).
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    ybar: Option<f64>,
    #[arg(long = "z-star", allow_negative_numbers = true)]
    z_star: Option<f64>,
    /// Per-block likelihood means, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    means: Vec<f64>,
    /// Per-block likelihood variances (default 1).
    #[arg(long, value_delimiter = ',')]
    variances: Vec<f64>,
    /// Per-block kernel scales (default 1).
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
}

impl Setup {
    fn build(&self) -> Result<GaussianSetup> {
        if let Some(n) = self.n {
            if !self.means.is_empty() {
                bail!("give either the n-form (--n, --b, --sigma2, --ybar) or --means, not both");
            }
            let (Some(b), Some(sigma2), Some(ybar)) = (self.b, self.sigma2, self.ybar) else {
                bail!("the n-form needs --n, --b, --sigma2 and --ybar");
            };
            return Ok(GaussianSetup::n_form(n, b, sigma2, ybar, self.mu0, self.sigma0_sq, self.z_star)?);
        }
        if self.means.is_empty() {
            bail!("give --means for a per-block setup, or the n-form flags");
        }
        let b = self.means.len();
        let pick = |v: &[f64], name: &str| -> Result<Vec<f64>> {
            match v.len() {
                0 => Ok(vec![1.0; b]),
                l if l == b => Ok(v.to_vec()),
                l => bail!("--{name} has {l} values, expected {b}"),
            }
        };
        let vars = pick(&self.variances, "variances")?;
        let scales = pick(&self.scales, "scales")?;
        let blocks = (0..b)
            .map(|j| Block {
                mean: self.means[j],
                var: vars[j],
                scale: scales[j],
            })
            .collect();
        Ok(GaussianSetup::per_block(self.mu0, self.sigma0_sq, blocks)?)
    }
}

#[derive(Subcommand)]
enum Query {
    /// Mean and variance of the regularised target.
    PiLambda {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        lambda: f64,
    },
    /// AR(1) parameters of the exact Gibbs z-chain.
    Ar1 {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        lambda: f64,
    },
    /// Bias of the regularised posterior mean (n-form).
    Bias {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        lambda: f64,
    },
    /// Asymptotic variance of the Gibbs estimate of the mean (n-form).
    AsymptoticVariance {
        #[command(flatten)]
        setup: Setup,
        #[arg(long)]
        lambda: f64,
    },
    /// MSE-optimal regularisation for a chain of length N (n-form).
    OptimalLambda {
        #[command(flatten)]
        setup: Setup,
        #[arg(long = "chain-length")]
        chain_length: f64,
    },
    /// Limits of the regularised posterior when λ/b = c n^{-γ} (n-form with --z-star).
    Consistency {
        #[command(flatten)]
        setup: Setup,
        #[arg(long, allow_negative_numbers = true)]
        gamma: f64,
        #[arg(long)]
        c: f64,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    Ok(cfg)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(", ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load(&args)?;
            let summary = cmd_run(&cfg, &args.out).context("run failed")?;
            for (phi, kinds) in &summary.estimates {
                for (kind, s) in kinds {
                    let se = s.standard_error.as_deref().map(fmt_vec).unwrap_or_else(|| "-".into());
                    let truth = s.truth.as_deref().map(fmt_vec).unwrap_or_else(|| "-".into());
                    println!("{phi:>10} {kind:<15} mean [{}]  se [{se}]  truth [{truth}]", fmt_vec(&s.mean));
                }
            }
            println!("summary written to {}", args.out.join("summary.json").display());
        }
        Command::Compare(args) => {
            let cfg = load(&args)?;
            let table = cmd_compare(&cfg, &args.out).context("compare failed")?;
            println!("{:<8} {:>10} {:>9} {:>14} {:>12} {:>12}", "algo", "lambda", "samples", "mean SSE", "se", "min ESS");
            for r in &table.rows {
                println!(
                    "{:<8} {:>10} {:>9} {:>14.6e} {:>12} {:>12.1}",
                    format!("{:?}", r.algorithm).to_lowercase(),
                    r.lambda.map(|l| format!("{l:e}")).unwrap_or_else(|| "-".into()),
                    r.samples,
                    r.mean_sse,
                    r.sse_standard_error.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into()),
                    r.mean_min_ess,
                );
            }
        }
        Command::Oracle { query } => {
            let (setup, q) = match query {
                Query::PiLambda { setup, lambda } => (setup, OracleQuery::PiLambda { lambda }),
                Query::Ar1 { setup, lambda } => (setup, OracleQuery::Ar1 { lambda }),
                Query::Bias { setup, lambda } => (setup, OracleQuery::Bias { lambda }),
                Query::AsymptoticVariance { setup, lambda } => (setup, OracleQuery::AsymptoticVariance { lambda }),
                Query::OptimalLambda { setup, chain_length } => (setup, OracleQuery::OptimalLambda { chain_length }),
                Query::Consistency { setup, gamma, c } => (setup, OracleQuery::Consistency { gamma, c }),
            };
            let value = cmd_oracle(&setup.build()?, q)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
