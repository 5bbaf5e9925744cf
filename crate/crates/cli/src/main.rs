//! `spotfinder`: survey runs, cost plans, exports, backend evaluation and the
//! review server.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use spotfinder_core::annotations::{parse_via, to_detection_set};
use spotfinder_core::clock::SystemClock;
use spotfinder_core::detectors::{segment_street, DetectionClass, DetectorBackend, DEFAULT_MIN_CONFIDENCE};
use spotfinder_core::imagery::ImageCache;
use spotfinder_core::metrics::{confusion, count_match_score, ConfusionMatrix, CountMatch};
use spotfinder_core::raster::Raster;
use spotfinder_core::store::{dedup, export_geojson, CandidateFilter, CandidateStatus, SpotStore};
use spotfinder_core::survey::config::build_backend;
use spotfinder_core::survey::{dry_run, dry_run_with_count, run_survey, BackendConfig, RunOptions, SurveyConfig, SurveyDeps};
use spotfinder_review::AppState;

#[derive(Parser)]
#[command(name = "spotfinder", version, about = "Survey a region for parkour-friendly architecture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run, plan, export and summarize surveys.
    #[command(subcommand)]
    Survey(SurveyCommand),
    /// Evaluate detector backends.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Human review of candidates.
    #[command(subcommand)]
    Review(ReviewCommand),
}

#[derive(Subcommand)]
enum SurveyCommand {
    /// Run or resume a survey.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this many newly processed coordinates.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Print the coordinate count, request count and cost without fetching.
    DryRun {
        #[arg(long)]
        config: PathBuf,
        /// Plan for this many coordinates instead of the configured lattice.
        #[arg(long)]
        count: Option<u64>,
    },
    /// Export candidates.
    Export {
        #[command(flatten)]
        source: StoreArgs,
        #[arg(long, value_enum, default_value_t = ExportFormat::Geojson)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
        /// Only candidates above the threshold.
        #[arg(long)]
        positive: bool,
        #[arg(long)]
        status: Option<String>,
        /// Drop candidates closer than this many meters to a stronger one.
        #[arg(long)]
        dedup_m: Option<f64>,
    },
    /// Print survey statistics as JSON.
    Stats {
        #[command(flatten)]
        source: StoreArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Geojson,
}

#[derive(Args)]
struct StoreArgs {
    /// Survey config; selects its store and survey.
    #[arg(long, conflicts_with = "store")]
    config: Option<PathBuf>,
    /// Store directory.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Restrict to one survey.
    #[arg(long)]
    survey: Option<String>,
}

impl StoreArgs {
    /// Store directory, survey filter, and (when a config was given) the
    /// image cache directory.
    fn resolve(&self) -> Result<(PathBuf, Option<String>, Option<PathBuf>)> {
        match (&self.config, &self.store) {
            (Some(path), _) => {
                let cfg = SurveyConfig::load(path)?;
                let survey = self.survey.clone().or(Some(cfg.survey_id));
                Ok((cfg.store_dir, survey, Some(cfg.cache_dir)))
            }
            (None, Some(store)) => Ok((store.clone(), self.survey.clone(), None)),
            (None, None) => bail!("either --config or --store is required"),
        }
    }
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Compare a backend's street detections with VIA ground truth.
    Via {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendName,
        /// Directory holding the annotated images. Without it, blank
        /// 640x640 images are used, which only suits the fixture backend.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Fixture backend document.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// VIA project replayed by the fixture backend.
        #[arg(long)]
        fixture_via: Option<PathBuf>,
        /// External backend command line, whitespace separated.
        #[arg(long)]
        command: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MIN_CONFIDENCE)]
        min_confidence: f64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendName {
    Fixture,
    Heuristic,
    External,
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API on the loopback interface.
    Serve {
        #[command(flatten)]
        source: StoreArgs,
        /// Image cache directory; defaults to the config's.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 8642)]
        port: u16,
    },
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn survey_run(config: &Path, stop_after: Option<u64>) -> Result<()> {
    let cfg = SurveyConfig::load(config)?;
    let store = SpotStore::open(&cfg.store_dir).with_context(|| format!("opening store {}", cfg.store_dir.display()))?;
    let deps = SurveyDeps {
        provider: cfg.build_provider(),
        backend: cfg.build_backend()?,
        clock: Arc::new(SystemClock),
    };
    let report = run_survey(
        &cfg,
        &store,
        deps,
        RunOptions {
            stop_after,
            ..Default::default()
        },
    )?;
    print_json(&report)
}

fn survey_dry_run(config: &Path, count: Option<u64>) -> Result<()> {
    let cfg = SurveyConfig::load(config)?;
    match count {
        Some(n) => print_json(&dry_run_with_count(&cfg, n)?),
        None => print_json(&dry_run(&cfg)?),
    }
}

fn survey_export(
    source: &StoreArgs,
    out: &Path,
    positive: bool,
    status: Option<&str>,
    dedup_m: Option<f64>,
) -> Result<()> {
    let (store_dir, survey, _) = source.resolve()?;
    let store = SpotStore::open(&store_dir)?;
    let status = status
        .map(|s| CandidateStatus::parse(s).with_context(|| format!("unknown status {s:?}")))
        .transpose()?;
    let filter = CandidateFilter {
        survey_id: survey,
        status,
        positive: positive.then_some(true),
        ..Default::default()
    };
    let mut candidates = store.list(&filter);
    if let Some(m) = dedup_m {
        candidates = dedup(&candidates, m);
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let doc = export_geojson(&candidates);
    std::fs::write(out, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    eprintln!("wrote {} features to {}", candidates.len(), out.display());
    Ok(())
}

fn survey_stats(source: &StoreArgs) -> Result<()> {
    let (store_dir, survey, _) = source.resolve()?;
    let store = SpotStore::open(&store_dir)?;
    match survey {
        Some(id) => print_json(&store.stats(&id)?),
        None => print_json(&store.stats_all()),
    }
}

#[derive(Serialize)]
struct ClassTotal {
    class: DetectionClass,
    predicted: u64,
    truth: u64,
    abs_error: u64,
}

#[derive(Serialize)]
struct EvalReport {
    backend: String,
    min_confidence: f64,
    images: usize,
    /// Per image: does it contain any object, predicted versus annotated.
    presence: Option<ConfusionMatrix>,
    per_class: Vec<ClassTotal>,
    mean_abs_count_error: f64,
    per_image: Vec<CountMatch>,
}

struct EvalArgs<'a> {
    annotations: &'a Path,
    backend: BackendName,
    images: Option<&'a Path>,
    fixture: Option<&'a Path>,
    fixture_via: Option<&'a Path>,
    command: Option<&'a str>,
    min_confidence: f64,
}

fn eval_backend(args: &EvalArgs, work: &Path) -> Result<Arc<dyn DetectorBackend>> {
    let config = match args.backend {
        BackendName::Heuristic => BackendConfig::Heuristic {},
        BackendName::Fixture => {
            if args.fixture.is_none() && args.fixture_via.is_none() {
                bail!("the fixture backend needs --fixture or --fixture-via");
            }
            BackendConfig::Fixture {
                file: args.fixture.map(Path::to_path_buf),
                via: args.fixture_via.map(Path::to_path_buf),
                via_confidence: 1.0,
            }
        }
        BackendName::External => {
            let command: Vec<String> = args
                .command
                .context("the external backend needs --command")?
                .split_whitespace()
                .map(str::to_string)
                .collect();
            BackendConfig::External {
                id: "external".into(),
                command,
                scratch: None,
            }
        }
    };
    Ok(build_backend(&config, work)?)
}

fn eval_via(args: EvalArgs) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&args.min_confidence) {
        bail!("--min-confidence must lie in [0, 1]");
    }
    let text = std::fs::read_to_string(args.annotations)
        .with_context(|| format!("reading {}", args.annotations.display()))?;
    let project = parse_via(&text)?;
    for w in &project.warnings {
        log::warn!("{w:?}");
    }
    let work = std::env::temp_dir().join(format!("spotfinder-eval-{}", std::process::id()));
    let backend = eval_backend(&args, &work)?;
    let blank = Raster::filled(640, 640, [0, 0, 0])?;

    let mut per_image = Vec::new();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for img in &project.images {
        let raster = match args.images {
            Some(dir) => {
                let path = dir.join(&img.filename);
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                Raster::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?
            }
            None => blank.clone(),
        };
        let truth = to_detection_set(img, 1.0)?;
        let pred = segment_street(&raster, &img.filename, backend.as_ref(), args.min_confidence)?;
        preds.push(!pred.is_empty());
        labels.push(!truth.is_empty());
        per_image.push(count_match_score(&pred, img)?);
    }

    let per_class: Vec<ClassTotal> = DetectionClass::ALL
        .iter()
        .map(|&class| {
            let deltas = per_image.iter().map(|m| m.delta(class));
            let (mut predicted, mut truth, mut abs_error) = (0, 0, 0);
            for d in deltas {
                predicted += d.predicted as u64;
                truth += d.truth as u64;
                abs_error += d.abs;
            }
            ClassTotal {
                class,
                predicted,
                truth,
                abs_error,
            }
        })
        .collect();
    let total_abs: u64 = per_image.iter().map(CountMatch::total_abs).sum();
    Ok(EvalReport {
        backend: backend.id().to_string(),
        min_confidence: args.min_confidence,
        images: per_image.len(),
        presence: confusion(&preds, &labels).ok(),
        per_class,
        mean_abs_count_error: if per_image.is_empty() {
            0.0
        } else {
            total_abs as f64 / per_image.len() as f64
        },
        per_image,
    })
}

fn review_serve(source: &StoreArgs, cache: Option<PathBuf>, port: u16) -> Result<()> {
    let (store_dir, _, config_cache) = source.resolve()?;
    let cache = cache.or(config_cache).context("--cache is required with --store")?;
    let state = AppState {
        store: Arc::new(SpotStore::open(&store_dir)?),
        cache: ImageCache::new(cache),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(spotfinder_review::serve(state, port))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Survey(SurveyCommand::Run { config, stop_after }) => survey_run(&config, stop_after),
        Command::Survey(SurveyCommand::DryRun { config, count }) => survey_dry_run(&config, count),
        Command::Survey(SurveyCommand::Export {
            source,
            format: ExportFormat::Geojson,
            out,
            positive,
            status,
            dedup_m,
        }) => survey_export(&source, &out, positive, status.as_deref(), dedup_m),
        Command::Survey(SurveyCommand::Stats { source }) => survey_stats(&source),
        Command::Eval(EvalCommand::Via {
            annotations,
            backend,
            images,
            fixture,
            fixture_via,
            command,
            min_confidence,
            out,
        }) => {
            let report = eval_via(EvalArgs {
                annotations: &annotations,
                backend,
                images: images.as_deref(),
                fixture: fixture.as_deref(),
                fixture_via: fixture_via.as_deref(),
                command: command.as_deref(),
                min_confidence,
            })?;
            match out {
                Some(path) => std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                    .with_context(|| format!("writing {}", path.display())),
                None => print_json(&report),
            }
        }
        Command::Review(ReviewCommand::Serve { source, cache, port }) => review_serve(&source, cache, port),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
