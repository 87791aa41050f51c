use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use macode::checkpoint;
use macode::dataset::{load_csv, save_csv, write_csv};
use macode::generate::{multiple_impute, rubin_evaluate, synthesize, SynthesisConfig};
use macode::masking::{corrupt, CorruptionOptions};
use macode::metrics::{evaluate, EvalOptions};
use macode::model::{FittedModel, ModelConfig};
use macode::rng::substream;
use macode::{Error, Mechanism, Schema};

#[derive(Parser)]
#[command(name = "macode", version, about = "Masked conditional density synthesizer for tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write a checkpoint.
    Fit {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample synthetic rows from a checkpoint.
    Generate {
        checkpoint: PathBuf,
        #[arg(short = 'n', long = "n-samples")]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill missing cells M times.
    Impute {
        checkpoint: PathBuf,
        corrupted: PathBuf,
        #[arg(short = 'M', long = "imputations", default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Ground-truth CSV; enables the rubin.json report.
        #[arg(long)]
        complete: Option<PathBuf>,
    },
    /// Inject missing values into a complete CSV.
    Corrupt {
        input: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        mechanism: Mechanism,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Anchor columns for mar / mnarl (default ceil(p/3)).
        #[arg(long)]
        anchors: Option<usize>,
        /// Tail quantile for mnarq.
        #[arg(long, default_value_t = 0.25)]
        quantile: f64,
        /// Fraction of columns eligible under mnarq.
        #[arg(long, default_value_t = 1.0)]
        subset: f64,
    },
    /// Compare a synthetic CSV against the real one.
    Evaluate {
        real: PathBuf,
        synth: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, requires = "target")]
        test: Option<PathBuf>,
        #[arg(long, requires = "test")]
        target: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    OracleCheck,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    train: PathBuf,
    schema: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    model: ModelConfig,
}

/// A bad flag or config value; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Any oracle check failed; exits with status 4.
#[derive(Debug)]
struct ChecksFailed(usize);

impl std::fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle check(s) failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<ChecksFailed>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Schema(_)
                | Error::InvalidArgument(_)
                | Error::InfeasibleRate { .. }
                | Error::Io { .. }
                | Error::Json(_) => 2,
                Error::LineSearchFailed { .. }
                | Error::TrainingDiverged { .. }
                | Error::Tensor(_)
                | Error::ZeroMassCondition
                | Error::QuadratureFailure { .. } => 4,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    2
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_schema(path: &Path) -> Result<Schema> {
    Schema::load(path).with_context(|| format!("loading schema {}", path.display()))
}

fn load_model(path: &Path) -> Result<FittedModel> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(text.as_bytes())?),
    }
}

fn fit(config: &Path, out: &Path, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading config {}", config.display()))?;
    let cfg: FitConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", config.display()))?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut model_cfg = cfg.model;
    if let Some(e) = epochs {
        model_cfg.epochs = e;
    }
    let seed = seed.unwrap_or(cfg.seed);
    let schema = load_schema(&resolve(base, &cfg.schema))?;
    let train_path = resolve(base, &cfg.train);
    let table = load_csv(&train_path, &schema).with_context(|| format!("reading {}", train_path.display()))?;

    let stderr = std::io::stderr();
    let (model, _) = FittedModel::fit(&table, &model_cfg, seed, |log| {
        if let Ok(line) = serde_json::to_string(log) {
            let _ = writeln!(stderr.lock(), "{line}");
        }
    })?;
    checkpoint::save(&model, out).with_context(|| format!("writing checkpoint {}", out.display()))?;
    Ok(())
}

fn generate(ckpt: &Path, n: usize, temperature: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    let model = load_model(ckpt)?;
    let config = SynthesisConfig {
        n_samples: n,
        temperature,
        seed,
    };
    let table = synthesize(&model, &config)?;
    match out {
        Some(p) => save_csv(&table, p)?,
        None => write_csv(&table, std::io::stdout().lock())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn impute(
    ckpt: &Path,
    corrupted: &Path,
    m: usize,
    temperature: f64,
    seed: u64,
    out_dir: &Path,
    complete: Option<&Path>,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let table = load_csv(corrupted, &model.schema).with_context(|| format!("reading {}", corrupted.display()))?;
    let pool = multiple_impute(&model, &table, m, temperature, seed)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (k, t) in pool.tables.iter().enumerate() {
        save_csv(t, &out_dir.join(format!("imputed_{}.csv", k + 1)))?;
    }
    if let Some(path) = complete {
        let truth = load_csv(path, &model.schema).with_context(|| format!("reading {}", path.display()))?;
        let mut results = Vec::new();
        for j in model.schema.continuous_indices() {
            match rubin_evaluate(&pool, &truth, j) {
                Ok(r) => results.push(r),
                Err(Error::DegenerateColumn { column, reason }) => {
                    eprintln!("skipping column '{column}': {reason}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        write_json(&results, Some(&out_dir.join("rubin.json")))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn corrupt_cmd(
    input: &Path,
    schema: &Path,
    mechanism: Mechanism,
    rate: f64,
    seed: u64,
    out: &Path,
    options: CorruptionOptions,
) -> Result<()> {
    let schema = load_schema(schema)?;
    let table = load_csv(input, &schema).with_context(|| format!("reading {}", input.display()))?;
    let mut rng = substream(seed, "corrupt");
    let corrupted = corrupt(&table, mechanism, rate, &options, &mut rng)?;
    save_csv(&corrupted, out)?;
    Ok(())
}

fn evaluate_cmd(
    real: &Path,
    synth: &Path,
    schema: &Path,
    test: Option<&Path>,
    target: Option<&str>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let schema = load_schema(schema)?;
    let real = load_csv(real, &schema).with_context(|| format!("reading {}", real.display()))?;
    let synth = load_csv(synth, &schema).with_context(|| format!("reading {}", synth.display()))?;
    let test = match test {
        Some(p) => Some(load_csv(p, &schema).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let target = match target {
        Some(name) => Some(
            schema
                .index_of(name)
                .ok_or_else(|| Usage(format!("unknown target column '{name}'")))?,
        ),
        None => None,
    };
    let options = EvalOptions {
        seed,
        test: test.as_ref().zip(target),
        ..EvalOptions::default()
    };
    let report = evaluate(&real, &synth, &options)?;
    write_json(&report, out)
}

fn oracle_check() -> Result<()> {
    let outcomes = macode::oracle::run_battery()?;
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {}", o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(ChecksFailed(failed).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            config,
            out,
            epochs,
            seed,
        } => fit(&config, &out, epochs, seed),
        Command::Generate {
            checkpoint,
            n,
            temperature,
            seed,
            out,
        } => generate(&checkpoint, n, temperature, seed, out.as_deref()),
        Command::Impute {
            checkpoint,
            corrupted,
            m,
            temperature,
            seed,
            out_dir,
            complete,
        } => impute(&checkpoint, &corrupted, m, temperature, seed, &out_dir, complete.as_deref()),
        Command::Corrupt {
            input,
            schema,
            mechanism,
            rate,
            seed,
            out,
            anchors,
            quantile,
            subset,
        } => {
            let options = CorruptionOptions {
                n_anchor: anchors,
                quantile,
                subset_fraction: subset,
            };
            corrupt_cmd(&input, &schema, mechanism, rate, seed, &out, options)
        }
        Command::Evaluate {
            real,
            synth,
            schema,
            test,
            target,
            seed,
            out,
        } => evaluate_cmd(&real, &synth, &schema, test.as_deref(), target.as_deref(), seed, out.as_deref()),
        Command::OracleCheck => oracle_check(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
