//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 for usage
//! errors, 2 for data errors and 3 for compute errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::corpus::synth::{generate_synthetic_corpus, SynthSpec};
use crate::corpus::load_manifest;
use crate::did::{summary_table, SystemKind};
use crate::error::{Error, Result};
use crate::featext::write_archive;
use crate::pipeline::{
    self, extract_corpus, files, score_decisions, write_atomic, DecisionsFile, EvaluationReport, Reproducibility,
    RunConfig,
};

/// Environment variable holding the log filter (e.g. `info`, `debug`).
pub const LOG_ENV: &str = "DIALECT_ID_LOG";

#[derive(Debug, Parser)]
#[command(name = "dialect-id", version, about = "Spoken dialect identification toolkit")]
struct Cli {
    /// Worker threads for utterance-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-dialect corpus.
    Synth(SynthArgs),
    /// Extract features for every utterance of a manifest into one archive.
    Featext(FeatextArgs),
    /// Split the corpus and train the selected systems.
    Train(TrainArgs),
    /// Run one trained system over a manifest and write its decisions.
    Identify(IdentifyArgs),
    /// Score a decisions file against manifest labels.
    Evaluate(EvaluateArgs),
    /// Tabulate several evaluation reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator spec (TOML); built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FeatextArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; receives `features.ark` and `featext.json`.
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying the front-end settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.models_dir`.
    #[arg(long)]
    models_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Systems to train (repeatable); overrides `systems`.
    #[arg(long = "system")]
    systems: Vec<SystemKind>,
    /// Overrides `split.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct IdentifyArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    system: SystemKind,
    /// Utterances to identify; the held-out split of `train` by default.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Decisions file; `<output_dir>/decisions_<system>.json` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    decisions: PathBuf,
    /// Manifest with the true labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Report JSON; a text table is written next to it with extension `txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation reports to tabulate.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Table destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the command line `args` (program name first) and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.workers {
        // The global pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Featext(a) => cmd_featext(a),
        Command::Train(a) => cmd_train(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.models_dir {
        cfg.paths.models_dir = dir.clone();
    }
    Ok(cfg)
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SynthSpec::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SynthSpec::default(),
    };
    let corpus = generate_synthetic_corpus(&spec, a.seed)?;
    for w in &corpus.warnings {
        log::warn!("{w}");
    }
    corpus.write(&a.out)?;
    info!("wrote {} utterances to {}", corpus.records.len(), a.out.display());
    Ok(())
}

fn cmd_featext(a: FeatextArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let records = load_manifest(&a.manifest)?;
    let feats = extract_corpus(&records, base_dir(&a.manifest), &cfg.frontend)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ark = a.out.join("features.ark");
    let tmp = a.out.join(".features.ark.tmp");
    write_archive(&tmp, &feats)?;
    std::fs::rename(&tmp, &ark).map_err(|e| Error::io(&ark, e))?;

    let mut repro = Reproducibility::new("featext");
    repro.config_sha256 = Some(cfg.digest());
    repro.add_input(&a.manifest)?;
    let summary = serde_json::json!({
        "reproducibility": repro,
        "frontend": cfg.frontend,
        "utterances": records.iter().zip(&feats).map(|(r, f)| serde_json::json!({
            "utt_id": r.utt_id,
            "frames": f.rows(),
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        &a.out.join("featext.json"),
        (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes(),
    )
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if !a.systems.is_empty() {
        cfg.systems = a.systems.clone();
    }
    if let Some(seed) = a.seed {
        cfg.split.seed = seed;
    }
    pipeline::train_from_config(&cfg)?;
    Ok(())
}

fn cmd_identify(a: IdentifyArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.paths.models_dir.join(files::TEST_MANIFEST));
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join(format!("decisions_{}.json", a.system)));
    let file = pipeline::identify_manifest(&cfg, a.system, &manifest)?;
    write_atomic(&out, file.to_json().as_bytes())?;
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let decisions = DecisionsFile::load(&a.decisions)?;
    let truth = load_manifest(&a.manifest)?;
    let metrics = score_decisions(&decisions.decisions, &truth)?;
    let mut repro = Reproducibility::new("evaluate");
    repro.add_input(&a.decisions)?;
    repro.add_input(&a.manifest)?;
    let report = EvaluationReport {
        reproducibility: repro,
        system: decisions.system,
        metrics,
    };
    let table = summary_table(&[(report.system.to_string(), &report.metrics)]);
    write_atomic(&a.out, report.to_json().as_bytes())?;
    write_atomic(&a.out.with_extension("txt"), table.as_bytes())?;
    info!("{}", table.trim_end());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| EvaluationReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(String, &crate::did::Metrics)> =
        reports.iter().map(|r| (r.system.to_string(), &r.metrics)).collect();
    let table = summary_table(&rows);
    match &a.out {
        Some(p) => write_atomic(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}
