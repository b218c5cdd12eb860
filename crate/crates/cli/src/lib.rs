//! `voicescreen` command-line front end.
//!
//! Exit codes: 0 on success, 1 on bad flags, configuration or input data,
//! 2 when a run fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use voicescreen::audio::{load_wav, resample, CANONICAL_RATE_HZ};
use voicescreen::cohort::{generate_cohort, CohortConfig};
use voicescreen::eval::{
    extract_dataset, render_csv, render_markdown, report_rows_from_json, run_prepared, run_sweep,
    sample_dataset, with_jobs, PipelineConfig, PreparedDataset, Reproducibility, SweepSpec,
};
use voicescreen::features::{FeatureExtractor, FeatureSetId};
use voicescreen::manifest::{parse_manifest, Scenario};
use voicescreen::models::ModelKind;
use voicescreen::{Error, Result};

pub const SEED_ENV: &str = "VOICESCREEN_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "voicescreen", version, about = "Speech-based depression screening pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise a labelled voice cohort (WAVs + manifest.json).
    Simulate(SimulateArgs),
    /// Draw clips for every participant and write the clip inventory.
    Segment(PipelineArgs),
    /// Extract clip feature vectors for a manifest, or for a single WAV.
    Extract(ExtractArgs),
    /// Participant-partitioned cross-validation of one (T, N) configuration.
    Cv(CvArgs),
    /// Cross-validate every admissible cell of a T x N grid.
    Sweep(SweepArgs),
    /// Render a cv or sweep report as a results table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Participants per class.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    effect: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    #[arg(long, default_value_t = CANONICAL_RATE_HZ)]
    sample_rate: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// PipelineConfig JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    feature: Option<FeatureSetId>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Clip duration in seconds.
    #[arg(long = "t")]
    t: Option<f64>,
    /// Clips per participant.
    #[arg(long = "n")]
    n: Option<usize>,
    /// Number of folds.
    #[arg(long)]
    k: Option<usize>,
    /// Restrict to a scenario; repeatable.
    #[arg(long = "scenario")]
    scenarios: Vec<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Upper bound on worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Extract from this WAV (whole file as one clip) instead of a manifest.
    #[arg(long, conflicts_with = "manifest")]
    wav: Option<PathBuf>,
    #[arg(long, required_unless_present = "wav")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    feature: Option<FeatureSetId>,
    #[arg(long = "t")]
    t: Option<f64>,
    #[arg(long = "n")]
    n: Option<usize>,
    #[arg(long = "scenario")]
    scenarios: Vec<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Also write the fit audit log here.
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Clip durations; replaces the default grid together with --ns.
    #[arg(long, value_delimiter = ',', requires = "ns")]
    ts: Vec<f64>,
    #[arg(long, value_delimiter = ',', requires = "ts")]
    ns: Vec<usize>,
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableFormat {
    Csv,
    Markdown,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
    format: TableFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. `VOICESCREEN_SEED` is read from the process environment.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    run_with_env(argv, env_seed.as_deref())
}

pub fn run_with_env<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, env_seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(cmd: Command, env_seed: Option<&str>) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a, env_seed),
        Command::Segment(a) => segment(a, env_seed),
        Command::Extract(a) => extract(a, env_seed),
        Command::Cv(a) => cv(a, env_seed),
        Command::Sweep(a) => sweep(a, env_seed),
        Command::Report(a) => report(a),
    }
}

/// Flag, then environment, then config file, then 0.
fn resolve_seed(flag: Option<u64>, env_seed: Option<&str>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env_seed {
        return text.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!("{SEED_ENV} must be an unsigned integer, got '{text}'"))
        });
    }
    Ok(config.unwrap_or(0))
}

fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            at: "--config".into(),
            path: path.into(),
        },
        _ => Error::Io {
            path: path.into(),
            source: e,
        },
    })?;
    Ok(serde_json::from_str(&text)?)
}

struct Overrides<'a> {
    config: Option<&'a Path>,
    feature: Option<FeatureSetId>,
    model: Option<ModelKind>,
    t: Option<f64>,
    n: Option<usize>,
    k: Option<usize>,
    scenarios: &'a [Scenario],
    seed: Option<u64>,
    epochs: Option<usize>,
}

fn build_config(o: Overrides<'_>, env_seed: Option<&str>) -> Result<PipelineConfig> {
    let (mut cfg, file_seed) = match o.config {
        Some(p) => {
            let c = read_config(p)?;
            let s = c.seed;
            (c, Some(s))
        }
        None => (
            PipelineConfig::new(FeatureSetId::EgemapsLite, ModelKind::Mlp, 10.0, 5, 0),
            None,
        ),
    };
    if let Some(f) = o.feature {
        cfg.feature_set = f;
    }
    if let Some(m) = o.model {
        cfg.model = m;
    }
    if let Some(t) = o.t {
        cfg.sampling.clip_duration_s = t;
    }
    if let Some(n) = o.n {
        cfg.sampling.clip_count = n;
    }
    if let Some(k) = o.k {
        cfg.k = k;
    }
    if !o.scenarios.is_empty() {
        cfg.scenarios = o.scenarios.to_vec();
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    cfg.seed = resolve_seed(o.seed, env_seed, file_seed)?;
    cfg.validate()?;
    Ok(cfg)
}

impl PipelineArgs {
    fn config(&self, env_seed: Option<&str>) -> Result<PipelineConfig> {
        build_config(
            Overrides {
                config: self.config.as_deref(),
                feature: self.feature,
                model: self.model,
                t: self.t,
                n: self.n,
                k: self.k,
                scenarios: &self.scenarios,
                seed: self.seed,
                epochs: self.epochs,
            },
            env_seed,
        )
    }
}

fn jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match jobs {
        Some(j) => with_jobs(j, f)?,
        None => f(),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.into(),
                    source: e,
                })?;
            }
            fs::write(path, text).map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })
        }
    }
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn simulate(a: SimulateArgs, env_seed: Option<&str>) -> Result<()> {
    let cfg = CohortConfig {
        n_depressed: a.n,
        n_healthy: a.n,
        effect_size: a.effect,
        recording_duration_s: a.duration,
        sample_rate: a.sample_rate,
        seed: resolve_seed(a.seed, env_seed, None)?,
    };
    let manifest = generate_cohort(&cfg, &a.out)?;
    let block = json!({
        "version": 1,
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "cohort": cfg,
        "seed": cfg.seed,
        "participants": manifest.participants.len(),
    });
    emit(Some(&a.out.join("simulation.json")), &to_json(&block)?)?;
    log::info!("wrote {} participants to {}", manifest.participants.len(), a.out.display());
    Ok(())
}

fn segment(a: PipelineArgs, env_seed: Option<&str>) -> Result<()> {
    let mut cfg = a.config(env_seed)?;
    // clip inventories come from audio whatever the feature set
    if cfg.feature_set == FeatureSetId::Embedding {
        cfg.feature_set = FeatureSetId::EgemapsLite;
    }
    let dataset = parse_manifest(&a.manifest)?;
    let (clips, exclusions) = jobs(a.jobs, || {
        let prep = PreparedDataset::new(&dataset, &cfg)?;
        Ok(sample_dataset(&prep, &cfg))
    })?;
    let doc = json!({
        "version": 1,
        "clips": clips,
        "exclusions": exclusions,
        "seed": cfg.seed,
        "reproducibility": Reproducibility::new(&cfg),
    });
    emit(a.out.as_deref(), &to_json(&doc)?)
}

fn extract(a: ExtractArgs, env_seed: Option<&str>) -> Result<()> {
    let cfg = build_config(
        Overrides {
            config: a.config.as_deref(),
            feature: a.feature,
            model: None,
            t: a.t,
            n: a.n,
            k: None,
            scenarios: &a.scenarios,
            seed: a.seed,
            epochs: None,
        },
        env_seed,
    )?;
    let doc = if let Some(wav) = &a.wav {
        let mut buf = load_wav(wav)?;
        if buf.sample_rate_hz() != CANONICAL_RATE_HZ {
            buf = resample(&buf, CANONICAL_RATE_HZ)?;
        }
        let fv = FeatureExtractor::new(cfg.feature_set, CANONICAL_RATE_HZ)?.extract(&buf)?;
        json!({
            "version": 1,
            "source": wav,
            "feature_set": fv.set_id,
            "dims": fv.dims(),
            "quality_flag": fv.quality_flag,
            "values": fv.values,
            "reproducibility": Reproducibility::new(&cfg),
        })
    } else {
        let manifest = a.manifest.as_ref().expect("clap requires --manifest without --wav");
        let dataset = parse_manifest(manifest)?;
        let (participants, exclusions) = jobs(a.jobs, || {
            let prep = PreparedDataset::new(&dataset, &cfg)?;
            Ok(extract_dataset(&prep, &cfg))
        })?;
        json!({
            "version": 1,
            "feature_set": cfg.feature_set,
            "participants": participants,
            "exclusions": exclusions,
            "seed": cfg.seed,
            "reproducibility": Reproducibility::new(&cfg),
        })
    };
    emit(a.out.as_deref(), &to_json(&doc)?)
}

fn cv(a: CvArgs, env_seed: Option<&str>) -> Result<()> {
    let cfg = a.pipeline.config(env_seed)?;
    let dataset = parse_manifest(&a.pipeline.manifest)?;
    let outcome = jobs(a.pipeline.jobs, || {
        let prep = PreparedDataset::new(&dataset, &cfg)?;
        run_prepared(&prep, &cfg)
    })?;
    if let Some(path) = &a.audit {
        emit(Some(path), &to_json(&outcome.audit)?)?;
    }
    let m = &outcome.report.metrics;
    log::info!(
        "accuracy {:.3} over {} participants",
        m.accuracy,
        outcome.report.counts.total()
    );
    emit(a.pipeline.out.as_deref(), &to_json(&outcome.report)?)
}

fn sweep(a: SweepArgs, env_seed: Option<&str>) -> Result<()> {
    let cfg = a.pipeline.config(env_seed)?;
    let spec = if a.ts.is_empty() {
        SweepSpec::default_grid()
    } else {
        SweepSpec {
            durations_s: a.ts.clone(),
            counts: a.ns.clone(),
            constraints: Vec::new(),
        }
    };
    let dataset = parse_manifest(&a.pipeline.manifest)?;
    let outcome = jobs(a.pipeline.jobs, || run_sweep(&dataset, &spec, &cfg))?;
    if let Some(path) = &a.audit {
        emit(Some(path), &to_json(&outcome.audit)?)?;
    }
    emit(a.pipeline.out.as_deref(), &to_json(&outcome.grid)?)
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let rows = report_rows_from_json(&text)?;
    let table = match a.format {
        TableFormat::Csv => render_csv(&rows),
        TableFormat::Markdown => render_markdown(&rows),
    };
    emit(a.out.as_deref(), &table)
}
