use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trajnet_core::harness::{render_svg, run_pipeline, write_report, RunConfig, Workspace, ARTIFACT_ROOT_ENV};
use trajnet_core::interpret::Averaging;
use trajnet_core::synth::CohortKind;
use trajnet_core::Result;

#[derive(Parser)]
#[command(name = "trajnet", version, about = "Brain-network trajectory pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Artifact root directory.
    #[arg(long, global = true, env = ARTIFACT_ROOT_ENV, default_value = "artifacts")]
    root: PathBuf,
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set vae.beta=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Baseline,
    Longitudinal,
}

#[derive(Subcommand)]
enum Command {
    /// Register synthetic baseline and longitudinal cohorts.
    Synth {
        /// Also write the voxel data to disk in the ingestion format.
        #[arg(long)]
        materialize: bool,
    },
    /// Register an ingestion directory as a cohort.
    Ingest {
        #[arg(long, value_enum)]
        kind: Kind,
        path: PathBuf,
    },
    /// Train the node autoencoder and the contrastive edge encoder.
    TrainNetgen,
    /// Build networks for every registered cohort.
    BuildGraphs,
    /// Train the graph-attention encoder on baseline AD/CN networks.
    TrainEncoder,
    /// Train the ageing model and graph decoder on longitudinal CN subjects.
    TrainVae,
    /// Train the conversion model on longitudinal MCI subjects.
    TrainRnn,
    /// Write conversion probabilities for the MCI subjects.
    Predict,
    /// Rank tracts by residual between actual and forecast networks.
    Interpret {
        /// One subject instead of the converter average.
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Visits between forecast origin and compared network.
        #[arg(long)]
        gap: Option<u32>,
        /// Average signed differences instead of absolute ones.
        #[arg(long)]
        signed_mean: bool,
    },
    /// Cross-validated metrics and trajectory diagnostics.
    Evaluate,
    /// Collect stage outputs into report files.
    Report {
        /// Only re-render SVGs from existing data files.
        #[arg(long)]
        svg_only: bool,
    },
    /// Run every stage in order.
    Pipeline,
    /// Print the resolved configuration.
    Config,
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| trajnet_core::Error::Config(format!("`--set {s}`: expected KEY=VALUE")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides(&cli.common.overrides)?)?;
    let ws = Workspace::new(&cli.common.root);
    match cli.command {
        Command::Synth { materialize } => {
            ws.synth(&cfg, materialize)?;
            println!("registered synthetic cohorts under {}", ws.path("cohorts").display());
        }
        Command::Ingest { kind, path } => {
            let kind = match kind {
                Kind::Baseline => CohortKind::Baseline,
                Kind::Longitudinal => CohortKind::Longitudinal,
            };
            let n = ws.ingest(&cfg, kind, &path)?;
            println!("registered {n} subjects from {}", path.display());
        }
        Command::TrainNetgen => {
            ws.train_netgen(&cfg)?;
            println!("netgen models saved to {}", ws.path("netgen").display());
        }
        Command::BuildGraphs => {
            ws.build_graphs(&cfg)?;
            println!("networks saved to {}", ws.path("graphs").display());
        }
        Command::TrainEncoder => {
            ws.train_encoder(&cfg)?;
            println!("graph encoder saved to {}", ws.path("encoder").display());
        }
        Command::TrainVae => {
            ws.train_vae(&cfg)?;
            println!("ageing model saved to {}", ws.path("vae").display());
        }
        Command::TrainRnn => {
            ws.train_rnn(&cfg)?;
            println!("conversion model saved to {}", ws.path("rnn").display());
        }
        Command::Predict => {
            let preds = ws.predict(&cfg)?;
            println!("{} predictions written to {}", preds.len(), ws.path("predictions/predictions.tsv").display());
        }
        Command::Interpret {
            subject,
            fraction,
            gap,
            signed_mean,
        } => {
            if let Some(f) = fraction {
                cfg.interpret.fraction = f;
            }
            if gap.is_some() {
                cfg.interpret.gap = gap;
            }
            if signed_mean {
                cfg.interpret.averaging = Averaging::SignedMean;
            }
            cfg.validate()?;
            let s = ws.interpret(&cfg, subject.as_deref())?;
            println!("ranked {} edges for {}", s.ranked_edges, s.subject_id);
            if let Some(p) = s.precision_vs_truth {
                println!("precision against planted abnormal edges: {p:.4}");
            }
        }
        Command::Evaluate => {
            let r = ws.evaluate(&cfg)?;
            let a = &r.conversion.aggregate;
            println!(
                "conversion: accuracy {} sensitivity {} specificity {}",
                a.accuracy, a.sensitivity, a.specificity
            );
            if let Some(s) = &r.shuffled_conversion {
                println!("shuffled-label control: accuracy {}", s.aggregate.accuracy);
            }
            if let Some(e) = &r.encoder {
                println!("AD/CN encoder: accuracy {}", e.aggregate.accuracy);
            }
        }
        Command::Report { svg_only } => {
            if svg_only {
                println!("rendered {} images", render_svg(&ws)?);
            } else {
                println!("report written to {}", write_report(&ws)?.display());
            }
        }
        Command::Pipeline => {
            let r = run_pipeline(&cfg, &ws)?;
            println!("conversion accuracy {}", r.conversion.aggregate.accuracy);
        }
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
