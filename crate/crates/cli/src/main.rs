mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use corpa_core::labelling::Distance;
use corpa_core::load_lexicon;
use corpa_core::metrics::{render_table, OuterTruth};
use corpa_core::perturbation::{DEFAULT_K_INTER, DEFAULT_K_OUTER};
use corpa_core::rng::DEFAULT_SEED;

use pipeline::{Context, EvaluateArgs, PipelineError};

#[derive(Parser, Debug)]
#[command(
    name = "corpa-forge",
    version,
    about = "Concept-based adversarial report pipeline"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Lexicon file, or "builtin" for the embedded default.
    #[arg(long, global = true, env = "CORPA_LEXICON", default_value = "builtin")]
    lexicon: String,
    /// Run directory holding one record stream per stage.
    #[arg(long, visible_alias = "out", global = true, default_value = "run")]
    run: PathBuf,
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, global = true, default_value_t = DEFAULT_K_INTER)]
    k_inter: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_K_OUTER)]
    k_outer: usize,
    /// Worker threads for parallel stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Args, Debug, Clone)]
struct IngestArgs {
    /// Directory of report text files (searched recursively for *.txt).
    #[arg(long)]
    reports: PathBuf,
    /// CSV with header report_id,image_id.
    #[arg(long)]
    pairing: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct UndersampleArgs {
    #[arg(long, default_value = "healthy")]
    majority: String,
    #[arg(long, value_parser = parse_distance, default_value = "hamming")]
    distance: Distance,
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// Train, validation and test fractions.
    #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
    ratios: [f64; 3],
}

#[derive(Subcommand, Debug)]
enum LexiconCommand {
    /// Print the active lexicon as TOML.
    Dump,
    /// Print the lexicon hash recorded in stream headers.
    Hash,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Records,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect the active lexicon.
    #[command(subcommand)]
    Lexicon(LexiconCommand),
    /// Read report files into the corpus manifest.
    Ingest(IngestArgs),
    /// Split and clean analysis sections.
    Clean {
        #[arg(long)]
        reports: PathBuf,
    },
    /// Concept vectors from cleaned sentences.
    Extract {
        /// Also record per-sentence concept sets.
        #[arg(long)]
        sentences: bool,
    },
    /// Canonicalize vectors and assign class labels.
    Label,
    /// One-Sided Selection over the labelled rows.
    Undersample(UndersampleArgs),
    /// Stratified train/val/test split.
    Split(SplitArgs),
    /// Sentence bank from the test split.
    Bank,
    /// Inter- and outer-class perturbations of the test rows.
    Perturb,
    /// Adversarial reports from perturbation records.
    Synthesize,
    /// Prompt manifest from adversarial reports.
    Prompts,
    /// Metrics over external prediction files.
    Evaluate {
        /// Predictions on the original test set.
        #[arg(long)]
        predictions: PathBuf,
        /// Predictions on the adversarial set, keyed by adversarial_id.
        #[arg(long)]
        adversarial: Option<PathBuf>,
        /// Perturbation stream to join against (defaults to the run directory's).
        #[arg(long)]
        perturbations: Option<PathBuf>,
        /// Score outer examples against their original class only.
        #[arg(long)]
        original_only_outer: bool,
        /// ASR curve as NAME=FILE with `param,asr` rows; repeatable.
        #[arg(long = "curve", value_parser = parse_curve)]
        curves: Vec<(String, PathBuf)>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write metrics.jsonl into the run directory.
        #[arg(long)]
        save: bool,
    },
    /// Every stage from ingest to prompts.
    RunAll {
        #[command(flatten)]
        ingest: IngestArgs,
        #[command(flatten)]
        undersample: UndersampleArgs,
        #[command(flatten)]
        split: SplitArgs,
    },
}

fn parse_distance(s: &str) -> Result<Distance, String> {
    s.parse()
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated ratios".to_string())?;
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(format!(
            "ratios {ratios:?} must be non-negative and sum to 1"
        ));
    }
    Ok(ratios)
}

fn parse_curve(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=FILE, got {s:?}")),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let g = cli.global;
    let lexicon = load_lexicon(&g.lexicon)?;
    if let Command::Lexicon(cmd) = &cli.command {
        match cmd {
            LexiconCommand::Dump => print!("{}", lexicon.to_toml()),
            LexiconCommand::Hash => println!("{}", lexicon.hash()),
        }
        return Ok(());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.workers)
        .build()
        .map_err(|e| PipelineError::Data(format!("cannot start worker pool: {e}")))?;
    let ctx = Context::new(g.run.clone(), lexicon, g.seed, g.k_inter, g.k_outer);
    let needs_dir = !matches!(cli.command, Command::Evaluate { save: false, .. });
    if needs_dir {
        pipeline::ensure_dir(&ctx.run)?;
    }

    pool.install(|| match cli.command {
        Command::Lexicon(_) => unreachable!("handled above"),
        Command::Ingest(a) => pipeline::ingest(&ctx, &a.reports, a.pairing.as_deref()),
        Command::Clean { reports } => pipeline::clean(&ctx, &reports),
        Command::Extract { sentences } => pipeline::extract(&ctx, sentences),
        Command::Label => pipeline::label(&ctx),
        Command::Undersample(a) => pipeline::undersample(&ctx, &a.majority, a.distance),
        Command::Split(a) => pipeline::split(&ctx, a.ratios),
        Command::Bank => pipeline::bank(&ctx),
        Command::Perturb => pipeline::perturb(&ctx),
        Command::Synthesize => pipeline::synthesize_stage(&ctx),
        Command::Prompts => pipeline::prompts(&ctx),
        Command::Evaluate {
            predictions,
            adversarial,
            perturbations,
            original_only_outer,
            curves,
            format,
            save,
        } => {
            let args = EvaluateArgs {
                predictions: &predictions,
                adversarial: adversarial.as_deref(),
                perturbations: perturbations.as_deref(),
                outer_truth: if original_only_outer {
                    OuterTruth::OriginalOnly
                } else {
                    OuterTruth::Both
                },
                curves: &curves,
            };
            let record = pipeline::evaluate(&ctx, &args, save)?;
            match format {
                Format::Table => {
                    print!("{}", render_table(&record.report));
                    for (name, auc) in &record.curve_auc {
                        println!("curve {name}: AUC {auc:.4}");
                    }
                    for w in &record.report.warnings {
                        eprintln!("warning: {w}");
                    }
                }
                Format::Records => println!(
                    "{}",
                    serde_json::to_string(&record).expect("metrics serialize")
                ),
            }
            Ok(())
        }
        Command::RunAll {
            ingest,
            undersample,
            split,
        } => run_all(
            &ctx,
            &ingest.reports,
            ingest.pairing.as_deref(),
            &undersample,
            split.ratios,
        ),
    })
}

fn run_all(
    ctx: &Context,
    reports: &Path,
    pairing: Option<&Path>,
    undersample: &UndersampleArgs,
    ratios: [f64; 3],
) -> Result<(), PipelineError> {
    pipeline::ingest(ctx, reports, pairing)?;
    pipeline::clean(ctx, reports)?;
    pipeline::extract(ctx, false)?;
    pipeline::label(ctx)?;
    pipeline::undersample(ctx, &undersample.majority, undersample.distance)?;
    pipeline::split(ctx, ratios)?;
    pipeline::bank(ctx)?;
    pipeline::perturb(ctx)?;
    pipeline::synthesize_stage(ctx)?;
    pipeline::prompts(ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
