use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use renyi_core::bench::run_alpha_bench;
use renyi_core::entropy::{self, EntropyOrder};
use renyi_core::gram::{self, GramMatrix};
use renyi_core::losses::{self, LossWeights};
use renyi_core::tensor::load_tensor;
use renyi_core::train::{self, TrainConfig};
use renyi_core::Error;

#[derive(Parser)]
#[command(name = "renyi", version, about = "Matrix-based Renyi entropy and relation distillation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Eig,
    Frob,
}

#[derive(Subcommand)]
enum Command {
    /// Entropy in bits of a feature matrix (or, with --gram, a Gram matrix).
    Entropy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Treat the input as an n x n Gram matrix and trace-normalise it.
        #[arg(long)]
        gram: bool,
    },
    /// Mutual information in bits between two inputs with equal sample counts.
    Mi {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_enum)]
        method: Option<Method>,
        #[arg(long)]
        gram: bool,
    },
    /// Evaluates L_r, L_d and L_info from teacher features and relations.
    Infoloss {
        #[arg(long)]
        zi: PathBuf,
        #[arg(long)]
        zm: PathBuf,
        #[arg(long)]
        rt: PathBuf,
        #[arg(long)]
        rs: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda2: f64,
    },
    /// Times the Frobenius and eigenvalue entropy paths.
    Bench {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs the synthetic teacher/student loop and writes a CSV report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checks every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            _ if e.is_degenerate() => 3,
            Error::Numeric(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn load_gram(path: &Path, as_gram: bool) -> Result<GramMatrix, Failure> {
    let t = load_tensor(path)?;
    if as_gram {
        return Ok(gram::trace_normalize(&GramMatrix::from_tensor(&t)?)?);
    }
    if t.rank() != 2 {
        return Err(usage(format!(
            "{}: expected a [samples, features] matrix, got shape {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(gram::normalize_def1(&gram::linear_gram(&t)?)?)
}

fn check_method(method: Option<Method>, order: EntropyOrder) -> Result<(), Failure> {
    if matches!(method, Some(Method::Frob)) && !order.is_two() {
        return Err(usage("frob requires alpha=2"));
    }
    Ok(())
}

fn entropy_with(g: &GramMatrix, order: EntropyOrder, method: Option<Method>) -> Result<f64, Failure> {
    let v = match method {
        None => entropy::entropy(g, order)?,
        Some(Method::Eig) => entropy::entropy_eig(g, order)?,
        Some(Method::Frob) => entropy::entropy_frob(g)?,
    };
    Ok(v.bits())
}

fn bits_json(bits: f64) -> String {
    serde_json::json!({ "bits": bits }).to_string()
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::Entropy {
            input,
            alpha,
            method,
            gram,
        } => {
            let order = EntropyOrder::new(alpha)?;
            check_method(method, order)?;
            let g = load_gram(&input, gram)?;
            Ok(bits_json(entropy_with(&g, order, method)?))
        }
        Command::Mi {
            a,
            b,
            alpha,
            method,
            gram,
        } => {
            let order = EntropyOrder::new(alpha)?;
            check_method(method, order)?;
            let ga = load_gram(&a, gram)?;
            let gb = load_gram(&b, gram)?;
            if ga.n() != gb.n() {
                return Err(usage(format!("sample counts differ: {} vs {}", ga.n(), gb.n())));
            }
            let joint = gram::hadamard_joint(&[&ga, &gb])?;
            let mi = entropy_with(&ga, order, method)? + entropy_with(&gb, order, method)?
                - entropy_with(&joint, order, method)?;
            Ok(bits_json(mi))
        }
        Command::Infoloss {
            zi,
            zm,
            rt,
            rs,
            lambda1,
            lambda2,
        } => {
            let weights = LossWeights::new(lambda1, lambda2)?;
            let (zi, zm) = (load_tensor(&zi)?, load_tensor(&zm)?);
            let (rt, rs) = (load_tensor(&rt)?, load_tensor(&rs)?);
            let batch = rt.shape().first().copied().unwrap_or(0);
            if batch < 2 {
                return Err(Failure {
                    code: 3,
                    message: format!("batch size {batch}: information losses need B >= 2"),
                });
            }
            let bd = losses::evaluate_info(&zi, &zm, &rt, &rs, &weights)?;
            Ok(serde_json::to_string(&bd).map_err(Error::from)?)
        }
        Command::Bench { n, trials, alpha, seed } => {
            let report = run_alpha_bench(n, trials, alpha, seed)?;
            Ok(report.to_csv().trim_end().to_string())
        }
        Command::Train { config, out } => {
            let config = TrainConfig::load(&config)?;
            let report = train::run_toy_training(&config)?;
            report.write_csv(&out)?;
            let (first, last) = (report.records[0], report.records[report.records.len() - 1]);
            Ok(serde_json::json!({
                "steps": report.records.len(),
                "first_l_total": first.l_total,
                "last_l_total": last.l_total,
                "first_mi_ts": first.mi_ts,
                "last_mi_ts": last.mi_ts,
                "out": out.display().to_string(),
            })
            .to_string())
        }
        Command::Gradcheck {
            seed,
            corrupt_gradient,
        } => {
            let report = train::gradcheck_all(seed, corrupt_gradient)?;
            let csv = report.to_csv().trim_end().to_string();
            if report.all_passed() {
                Ok(csv)
            } else {
                println!("{csv}");
                Err(Failure {
                    code: 1,
                    message: format!("gradient check failed (tolerance {:e})", report.tolerance),
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
