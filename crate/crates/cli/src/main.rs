use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use errslice_core::documents::{check_schema_version, HypothesesDocument, RunDocument, RunStatus, ScoringMode};
use errslice_core::trend::{trend_series, TrendMethod, TrendMetric};
use errslice_core::{EvaluationReport, Manifest};
use errslice_engine::evaluate::{category_chart, evaluate_manifest_run, flat_table};
use errslice_engine::export::{generation_id, verdict_table};
use errslice_engine::generation::{hypotheses_document, run_generation, select_hypotheses};
use errslice_engine::replay::{read_rows, replay};
use errslice_engine::store::{read_json, write_atomic, write_json_atomic};
use errslice_engine::verify::{new_run, run_verification};
use errslice_engine::PipelineConfig;

#[derive(Parser)]
#[command(name = "errslice", version, about = "Discover and verify systematic error slices of vision models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate search hypotheses from the task context and captioned errors.
    Generate(GenerateArgs),
    /// Score hypotheses over the target-class regions and classify slices.
    Verify(VerifyArgs),
    /// Precision@k against ground-truth slices, optionally with the LLM judge.
    Eval(EvalArgs),
    /// Check a manifest against its invariants.
    Validate(ValidateArgs),
    /// Run the task service HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Common {
    /// Use the replies fixture named in the config instead of live endpoints.
    #[arg(long)]
    mock: bool,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for output; files go under a directory named by id.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Slope,
    ErrorRate,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Hypotheses document written by `generate`.
    #[arg(long)]
    hypotheses: PathBuf,
    /// Comma-separated subset of hypothesis ids; all when omitted.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Ground every question on the whole image instead of the region.
    #[arg(long)]
    image_level: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "replay")]
    manifest: Option<PathBuf>,
    /// Run document written by `verify`.
    #[arg(long, required_unless_present = "replay")]
    run: Option<PathBuf>,
    /// Tab-separated per-slice precision table to replay instead of a run.
    #[arg(long, conflicts_with_all = ["manifest", "run", "judge"])]
    replay: Option<PathBuf>,
    /// Needed for the judge endpoint or its mock replies.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ask the judge LLM which GT pattern each hypothesis matches.
    #[arg(long, requires = "config")]
    judge: bool,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config; `ERRSLICE_LISTEN` and `ERRSLICE_STORE` override it.
    #[arg(long)]
    config: PathBuf,
}

async fn serve(a: ServeArgs) -> Result<(), Failure> {
    let config = errslice_service::ServiceConfig::load(&a.config).map_err(usage)?;
    errslice_service::serve(&config).await.map_err(runtime)
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut config = PipelineConfig::load(path).map_err(usage)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let manifest = Manifest::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let violations = manifest.validate();
    if !violations.is_empty() {
        let shown: Vec<String> = violations.iter().take(20).map(|v| format!("  {v}")).collect();
        return Err(usage(format!(
            "{} has {} violations:\n{}",
            path.display(),
            violations.len(),
            shown.join("\n")
        )));
    }
    Ok(manifest)
}

fn refuse_overwrite(paths: &[&Path], force: bool) -> Result<(), Failure> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(usage(format!("{} exists; pass --force to replace it", p.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_json_atomic(path, value).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

async fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let config = load_config(&a.config, a.common.seed)?;
    let manifest = load_manifest(&a.manifest)?;
    let ctx = config.task.context().map_err(usage)?;
    let gateway = config.gateway(a.common.mock).map_err(usage)?;
    let output = run_generation(&gateway, &ctx, &manifest, &config.generation, config.seed)
        .await
        .map_err(runtime)?;
    let doc = hypotheses_document(&ctx, config.seed, &output);
    let path = a.common.out.join(generation_id(&doc)).join("hypotheses.json");
    refuse_overwrite(&[&path], a.common.force)?;
    write_json(&path, &doc)?;

    println!("hypothesis_id\torigin\tfactor\tquery");
    for h in &doc.hypotheses {
        let origin = serde_json::to_value(h.origin).unwrap();
        println!("{}\t{}\t{}\t{}", h.hypothesis_id, origin.as_str().unwrap(), h.factor, h.query);
    }
    println!(
        "{} hypotheses ({} knowledge-driven, {} data-driven)",
        doc.hypotheses.len(),
        doc.knowledge_count,
        doc.data_count
    );
    for e in &doc.error_ledger {
        eprintln!("warning: {e}");
    }
    println!("{}", path.display());
    Ok(())
}

async fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let mut config = load_config(&a.config, a.common.seed)?;
    if let Some(k) = a.k {
        config.verification.k = k;
    }
    if let Some(m) = a.method {
        config.verification.method = match m {
            Method::Slope => TrendMethod::SlopeTrend,
            Method::ErrorRate => TrendMethod::ErrorRateThreshold,
        };
    }
    if a.image_level {
        config.verification.scoring = ScoringMode::ImageLevel;
    }
    config.validate().map_err(usage)?;
    let manifest = load_manifest(&a.manifest)?;
    let doc: HypothesesDocument = read_json(&a.hypotheses).map_err(usage)?;
    check_schema_version(doc.schema_version).map_err(usage)?;
    let hypotheses = if a.ids.is_empty() {
        doc.hypotheses
    } else {
        select_hypotheses(&doc.hypotheses, &a.ids)
            .map_err(|missing| usage(format!("unknown hypothesis ids: {}", missing.join(", "))))?
    };
    let fresh = new_run(config.run_config(), hypotheses, &manifest).map_err(usage)?;
    let dir = a.common.out.join(&fresh.run_id);
    let run_path = dir.join("run.json");
    let mut run = match read_json::<RunDocument>(&run_path) {
        Ok(existing) if !existing.status.is_terminal() && existing.run_id == fresh.run_id && !a.common.force => {
            eprintln!("resuming {} ({} of {} done)", existing.run_id, existing.results.len(), existing.hypotheses.len());
            existing
        }
        Ok(_) | Err(_) if run_path.exists() && !a.common.force => {
            return Err(usage(format!("{} exists; pass --force to replace it", run_path.display())))
        }
        _ => fresh,
    };

    let gateway = config.gateway(a.common.mock).map_err(usage)?;
    run_verification(&gateway, &mut run, &manifest, config.verification.width, |r| {
        write_json_atomic(&run_path, r)
    })
    .await
    .map_err(runtime)?;

    let table = verdict_table(&run);
    write(&dir.join("verdicts.tsv"), &table)?;
    for result in &run.results {
        for metric in [TrendMetric::ErrorRate, TrendMetric::Accuracy] {
            let series = trend_series(&result.report, metric);
            let name = format!(
                "{}.{}.json",
                result.hypothesis_id,
                serde_json::to_value(metric).unwrap().as_str().unwrap()
            );
            write_json(&dir.join("trend").join(name), &series)?;
        }
    }
    print!("{table}");
    let flagged = run.reports().iter().filter(|r| r.is_systematic_error).count();
    println!("{flagged} of {} hypotheses flagged systematic", run.hypotheses.len());
    println!("{}", run_path.display());
    match run.status {
        RunStatus::Complete => Ok(()),
        status => {
            let ledger: Vec<String> = run
                .failures
                .iter()
                .map(|f| format!("  {}: {}", f.hypothesis_id, f.error))
                .collect();
            Err(runtime(format!("run {} is {status:?}:\n{}", run.run_id, ledger.join("\n"))))
        }
    }
}

fn print_report(report: &EvaluationReport) {
    print!("{}", flat_table(report));
    let n = report.per_slice.len();
    println!(
        "mean precision@{} {:.3}  perfect {}/{n}  valid {}/{n}",
        report.k, report.mean_precision_at_k, report.perfect_matches, report.valid_matches
    );
    for (category, mean) in &report.per_category_means {
        println!("  {category}: {mean:.3}");
    }
    if let Some(s) = &report.semantic {
        println!(
            "semantic recall {:.3} precision {:.3} ({} judged, {} excluded)",
            s.recall, s.precision, s.judged, s.excluded
        );
    }
    if let Some(i) = &report.identification {
        println!("identification recall {:.3} precision {:.3} f1 {:.3}", i.recall, i.precision, i.f1);
    }
}

async fn eval(a: EvalArgs) -> Result<(), Failure> {
    if let Some(table) = &a.replay {
        let rows = read_rows(table).map_err(|e| usage(format!("{}: {e}", table.display())))?;
        let report = replay(&rows).map_err(runtime)?;
        print_report(&report);
        return Ok(());
    }
    let manifest = load_manifest(a.manifest.as_deref().expect("required by clap"))?;
    let run_path = a.run.as_deref().expect("required by clap");
    let run: RunDocument = read_json(run_path).map_err(usage)?;
    check_schema_version(run.schema_version).map_err(usage)?;
    let k = a.k.unwrap_or(run.config.k);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let judge = match (a.judge, &a.config) {
        (true, Some(path)) => Some(load_config(path, a.common.seed)?.judge_gateway(a.common.mock).map_err(usage)?),
        _ => None,
    };
    let doc = evaluate_manifest_run(&manifest, &run, k, judge.as_ref()).await.map_err(runtime)?;
    let dir = a.common.out.join(&run.run_id);
    let path = dir.join("evaluation.json");
    refuse_overwrite(&[&path], a.common.force)?;
    write_json(&path, &doc)?;
    write(&dir.join("evaluation.tsv"), &flat_table(&doc.report))?;
    write_json(&dir.join("category_chart.json"), &category_chart(&doc.report))?;
    print_report(&doc.report);
    for e in &doc.judge_errors {
        eprintln!("warning: judge error {e}");
    }
    for d in doc.judge_decisions.iter().filter_map(|d| d.warning.as_ref()) {
        eprintln!("warning: {d}");
    }
    println!("{}", path.display());
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| usage(format!("cannot read {}: {e}", a.manifest.display())))?;
    let manifest = Manifest::parse(&text).map_err(|e| usage(format!("{}: {e}", a.manifest.display())))?;
    let violations = manifest.validate();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!(
            "ok: {} images, {} regions, {} ground-truth slices",
            manifest.images.len(),
            manifest.regions.len(),
            manifest.gt_slices.len()
        );
        Ok(())
    } else {
        Err(runtime(format!("{} violations", violations.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "error".into()),
        )
        .init();
    let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
    let outcome = rt.block_on(async {
        match cli.command {
            Command::Generate(a) => generate(a).await,
            Command::Verify(a) => verify(a).await,
            Command::Eval(a) => eval(a).await,
            Command::Validate(a) => validate(a),
            Command::Serve(a) => serve(a).await,
        }
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
