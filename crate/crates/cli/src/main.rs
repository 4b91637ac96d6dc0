use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sam_cli::commands::{self, Context, SpuriousCheck};
use sam_cli::plot::{emit_plot, Metric, PlotKind};
use sam_cli::{parse_config, parse_seed_list, CliError, CliResult};

#[derive(Parser)]
#[command(name = "sam", version, about = "Saliency-modulated online continual learning experiments")]
struct Cli {
    /// Output root; artifacts go to <out>/<tag>/.
    #[arg(long, global = true, env = "SAM_OUTPUT_DIR", default_value = "sam-out")]
    out: PathBuf,

    /// Comma-separated seeds, overriding `train.seeds`.
    #[arg(long, global = true)]
    seed_list: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults are used for absent keys.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// `key=value` override, applied after the file (repeatable).
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the saliency predictor and checkpoint it per seed.
    Pretrain(ConfigArgs),
    /// Run the online stream for every seed; write records and models.
    Train(ConfigArgs),
    /// Re-evaluate the models written by `train`.
    Eval(ConfigArgs),
    /// Run the scheme × variant ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "11100,11110,11111")]
        schemes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "sim,sai,sam,lsm")]
        variants: Vec<String>,
    },
    /// Train, then measure accuracy under PGD.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Budgets in 1/255 units (overrides `attack.eps`).
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
    },
    /// Clean vs spurious-trained vs spurious-trained with SAM.
    Spurious {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Brightness offset scale of the spurious feature.
        #[arg(long, default_value_t = 10.0)]
        scale: f32,
        #[arg(long, default_value_t = 0.05)]
        min_gap: f64,
        #[arg(long, default_value_t = 0.25)]
        min_recovery: f64,
        #[arg(long, default_value_t = 0.8)]
        min_fraction: f64,
    },
    /// Render a plot and its CSV sidecar.
    Plot {
        /// Records JSONL (trajectory, ablation-bars) or robustness CSV.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long, value_enum, default_value = "sim")]
        metric: Metric,
        /// Directory for the images (default <out>/plots).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Print the mean ± std grid of final accuracies.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Fail with the check exit code if any cell is missing.
        #[arg(long)]
        require_complete: bool,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let ctx = Context {
        seeds: cli.seed_list.as_deref().map(parse_seed_list).transpose()?,
        out: cli.out,
    };
    let load = |a: &ConfigArgs| parse_config(a.config.as_deref(), &a.overrides);
    match cli.command {
        Command::Pretrain(a) => commands::pretrain(&ctx, load(&a)?),
        Command::Train(a) => commands::train(&ctx, load(&a)?),
        Command::Eval(a) => commands::eval(&ctx, load(&a)?),
        Command::Ablate {
            cfg,
            schemes,
            variants,
        } => commands::ablate(&ctx, load(&cfg)?, &schemes, &variants),
        Command::Attack { cfg, eps } => {
            let mut c = load(&cfg)?;
            if let Some(e) = eps {
                c.attack.eps = e;
                c.validate()?;
            }
            commands::attack(&ctx, c)
        }
        Command::Spurious {
            cfg,
            scale,
            min_gap,
            min_recovery,
            min_fraction,
        } => commands::spurious(
            &ctx,
            load(&cfg)?,
            scale,
            SpuriousCheck {
                min_gap,
                min_recovery,
                min_fraction,
            },
        ),
        Command::Plot {
            records,
            kind,
            metric,
            dir,
        } => {
            let dir = dir.unwrap_or_else(|| ctx.out.join("plots"));
            let out = emit_plot(&records, kind, metric, &dir)?;
            Ok(format!("{}\n{}\n", out.svg.display(), out.csv.display()))
        }
        Command::Report {
            records,
            require_complete,
        } => commands::report(&records, require_complete),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { sam_cli::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
