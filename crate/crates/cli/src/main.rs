use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pass_core::tta::{LossKind, UpdateScheme};

mod commands;
mod config;
mod error;

use config::{Method, Mode, Preset, RunConfig};
use error::{exit, CliError, CliResult};

/// Synthetic domain-shift benchmark and test-time adaptation runs.
///
/// Outputs default to subdirectories of `$PASS_OUTPUT_ROOT` (or `runs/`).
#[derive(Parser)]
#[command(name = "pass", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target domains.
    Gen(GenArgs),
    /// Train the backbone on the source domain.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint to target domains.
    Adapt(AdaptArgs),
    /// Tabulate Dice and HD95 of a checkpoint or an adaptation run.
    Eval(EvalArgs),
    /// Aggregate runs into cross-method and similarity tables.
    Report(ReportArgs),
    /// Finite-difference check of every op and the full model.
    Gradcheck(CheckArgs),
    /// Invariant checks on small models.
    Selftest(CheckArgs),
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Benchmark description; the built-in benchmark when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target domain; repeatable. Every target when omitted.
    #[arg(long = "domain")]
    domains: Vec<String>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    m0: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    scheme: Option<UpdateScheme>,
    /// `false` switches to independent updates unless `--continual` is given.
    #[arg(long)]
    use_amu: Option<bool>,
    #[arg(long, conflicts_with_all = ["scheme", "independent"])]
    continual: bool,
    #[arg(long, conflicts_with = "scheme")]
    independent: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Prompt bank size `L`.
    #[arg(long)]
    bank_size: Option<usize>,
    #[arg(long)]
    top_k: Option<f64>,
    /// IN, BN, BN*, LN or GN.
    #[arg(long)]
    id_norm: Option<String>,
    #[arg(long)]
    use_id: Option<bool>,
    #[arg(long)]
    use_capm: Option<bool>,
    #[arg(long)]
    update_running_stats: Option<bool>,
    /// Export decorator outputs and bank templates as PNGs.
    #[arg(long)]
    viz: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    /// An adaptation run directory to score instead of a checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long = "domain")]
    domains: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    out: OutArgs,
    /// Adaptation run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_out(cfg: &mut RunConfig, o: &OutArgs) {
    set(&mut cfg.seed, o.seed);
    if o.out.is_some() {
        cfg.out.clone_from(&o.out);
    }
}

fn apply_adapt(cfg: &mut RunConfig, a: AdaptArgs) -> CliResult<()> {
    apply_out(cfg, &a.out);
    cfg.data = a.data.or(cfg.data.take());
    cfg.checkpoint = a.checkpoint.or(cfg.checkpoint.take());
    if !a.domains.is_empty() {
        cfg.domains = a.domains;
    }
    let ad = &mut cfg.adapt;
    set(&mut ad.method, a.method);
    set(&mut ad.mode, a.mode);
    set(&mut ad.loss, a.loss);
    ad.preset = a.preset.or(ad.preset);
    ad.lr = a.lr.or(ad.lr);
    ad.omega = a.omega.or(ad.omega);
    set(&mut ad.m0, a.m0);
    set(&mut ad.c, a.c);
    set(&mut ad.steps_per_sample, a.steps);
    set(&mut ad.epochs, a.epochs);
    set(&mut ad.batch_size, a.batch_size);
    set(&mut ad.update_running_stats, a.update_running_stats);
    set(&mut ad.scheme, a.scheme);
    if a.continual {
        ad.scheme = UpdateScheme::Continual;
    } else if a.independent {
        ad.scheme = UpdateScheme::Independent;
    }
    match a.use_amu {
        Some(true) if a.continual || a.independent => {
            return Err(CliError::Config(
                "--use-amu=true conflicts with --continual/--independent".into(),
            ))
        }
        Some(true) => ad.scheme = UpdateScheme::Amu,
        Some(false) if ad.scheme == UpdateScheme::Amu => ad.scheme = UpdateScheme::Independent,
        _ => {}
    }
    let p = &mut cfg.prompts;
    set(&mut p.bank_size, a.bank_size);
    set(&mut p.top_k, a.top_k);
    set(&mut p.id_norm, a.id_norm);
    set(&mut p.use_id, a.use_id);
    set(&mut p.use_capm, a.use_capm);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => {
            apply_out(&mut cfg, &a.out);
            cfg.spec = a.spec.or(cfg.spec.take());
            commands::gen(&cfg.resolve()?, a.out.force)
        }
        Command::Pretrain(a) => {
            apply_out(&mut cfg, &a.out);
            cfg.data = a.data.or(cfg.data.take());
            let p = &mut cfg.pretrain;
            set(&mut p.epochs, a.epochs);
            set(&mut p.batch_size, a.batch_size);
            set(&mut p.lr, a.lr);
            set(&mut p.augment, a.augment);
            commands::pretrain(&cfg.resolve()?, a.out.force)
        }
        Command::Adapt(a) => {
            let (force, viz) = (a.out.force, a.viz);
            apply_adapt(&mut cfg, a)?;
            commands::adapt(&cfg.resolve()?, force, viz)
        }
        Command::Eval(a) => {
            apply_out(&mut cfg, &a.out);
            if let Some(run) = &a.run {
                // the run's own data root unless overridden
                let echoed = RunConfig::load(&run.join(commands::CONFIG_ECHO))?;
                cfg.data = a.data.clone().or(echoed.data).or(cfg.data.take());
            } else {
                cfg.data = a.data.clone().or(cfg.data.take());
            }
            cfg.checkpoint = a.checkpoint.or(cfg.checkpoint.take());
            if !a.domains.is_empty() {
                cfg.domains = a.domains;
            }
            commands::eval(&cfg.resolve()?, a.run.as_deref(), a.out.force)
        }
        Command::Report(a) => {
            apply_out(&mut cfg, &a.out);
            cfg.data = a.data.or(cfg.data.take());
            cfg.checkpoint = a.checkpoint.or(cfg.checkpoint.take());
            commands::report(&cfg.resolve()?, &a.runs, a.out.force)
        }
        Command::Gradcheck(a) => commands::gradcheck(a.out.as_deref()),
        Command::Selftest(a) => commands::selftest(a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
