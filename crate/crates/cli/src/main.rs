use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vfl_core::auditor::{audit, build_edg, export_dot, AuditPolicy};
use vfl_core::crypto::hash_bytes;
use vfl_core::edr::{read_ndjson, EdrStore};
use vfl_core::orchestrator::scenario::{generate_job, ScenarioOptions};
use vfl_core::orchestrator::{run_job, DeviationScript, JobDescription, RunOptions};
use vfl_core::storage::{pack_dataset, Salt, TrainingRow};
use vfl_core::ModelVector;

const EXIT_AUDIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Exclave-attested federated learning: run jobs, record EDRs, audit claims.
#[derive(Parser, Debug)]
#[command(name = "vfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset image tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Create and run jobs.
    #[command(subcommand)]
    Job(JobCommand),
    /// Verify a job's EDR store against its claims.
    Audit(AuditArgs),
    /// Dataflow graph tools.
    #[command(subcommand)]
    Edg(EdgCommand),
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Pack a CSV file into a dataset image and write its sidecar.
    Pack(PackArgs),
}

#[derive(Args, Debug)]
struct PackArgs {
    /// CSV with a header. "label" is the label column, "text" an optional
    /// free-text column; every other column is a numeric feature.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 16-byte commitment salt as 32 hex characters.
    #[arg(long)]
    salt: String,
    /// Sidecar path. Defaults to `<out>.json`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum JobCommand {
    /// Write a synthetic job (datasets, sidecars, job.json) into a directory.
    Init(InitArgs),
    /// Run a job and record every EDR.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    providers: usize,
    #[arg(long, default_value_t = 3)]
    rounds: u32,
    /// Model dimension including the bias.
    #[arg(long, default_value_t = 17)]
    dim: usize,
    /// Records per provider.
    #[arg(long, default_value_t = 256)]
    records: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Add a sanitization stage before training.
    #[arg(long)]
    sanitize: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    job: PathBuf,
    /// Output EDR store (newline-delimited JSON).
    #[arg(long)]
    store: PathBuf,
    /// Deviation script to inject.
    #[arg(long)]
    inject: Option<PathBuf>,
    /// Where to write the final model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Write every request/response pair as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Run provider branches one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    job: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Where to write the JSON report. Printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Final model file; the audit then also checks it came out of the last round.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum EdgCommand {
    /// Render the verified graph as Graphviz text.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    job: PathBuf,
    /// Output file. Printed to stdout when absent.
    #[arg(long)]
    dot: Option<PathBuf>,
}

fn parse_salt(s: &str) -> Result<Salt> {
    let mut salt = [0u8; 16];
    hex::decode_to_slice(s, &mut salt).context("salt must be 32 hex characters")?;
    Ok(salt)
}

fn read_csv_rows(path: &Path) -> Result<Vec<TrainingRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let label = headers.iter().position(|h| h == "label").context("CSV has no \"label\" column")?;
    let text = headers.iter().position(|h| h == "text");
    let features: Vec<usize> = (0..headers.len()).filter(|&i| i != label && Some(i) != text).collect();
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let num = |i: usize| -> Result<f64> {
            let field = record.get(i).unwrap_or("");
            field.trim().parse().with_context(|| format!("row {}: bad number {field:?} in column {}", n + 1, &headers[i]))
        };
        let mut values = features.iter().map(|&i| num(i)).collect::<Result<Vec<f64>>>()?;
        values.push(num(label)?);
        let text = text.and_then(|i| record.get(i)).unwrap_or("");
        rows.push(TrainingRow::with_text(values, text));
    }
    Ok(rows)
}

fn dataset_pack(args: &PackArgs) -> Result<()> {
    let rows = read_csv_rows(&args.input)?;
    let (image, commitment) = pack_dataset(&rows, parse_salt(&args.salt)?)?;
    std::fs::write(&args.out, image.to_bytes())?;
    let sidecar = args.sidecar.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".json");
        p.into()
    });
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&image.sidecar(&commitment))?)?;
    println!("{} records, commitment {}", rows.len(), commitment.commitment);
    Ok(())
}

fn job_dir(job: &Path) -> &Path {
    job.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn job_run(args: &RunArgs) -> Result<()> {
    let job = JobDescription::load(&args.job).with_context(|| format!("loading {}", args.job.display()))?;
    let script = args.inject.as_deref().map(DeviationScript::load).transpose().context("loading deviation script")?;
    let store = EdrStore::create(&args.store)?;
    let options = RunOptions { concurrent: !args.sequential, trace: args.trace.is_some() };
    let outcome = run_job(&job, job_dir(&args.job), script.as_ref(), &store, options)?;
    if let Some(path) = &args.model_out {
        std::fs::write(path, outcome.final_model.to_bytes())?;
    }
    if let Some(path) = &args.trace {
        let mut out = String::new();
        for entry in &outcome.trace {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
    }
    println!("{} EDRs written to {}", outcome.edr_count, args.store.display());
    Ok(())
}

fn run_audit(args: &AuditArgs) -> Result<bool> {
    let job = JobDescription::load(&args.job)?;
    let loaded = read_ndjson(&args.store).with_context(|| format!("reading {}", args.store.display()))?;
    let mut policy = AuditPolicy::from_job(&job);
    if let Some(path) = &args.model {
        let bytes = std::fs::read(path)?;
        ModelVector::from_bytes(&bytes).context("model file")?;
        policy = policy.with_final_model(hash_bytes(&bytes));
    }
    let report = audit(&loaded.records, loaded.malformed_lines, &policy);
    let json = report.to_json();
    match &args.report {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    for c in &report.claims {
        let status = if c.passed() { "pass" } else { "FAIL" };
        eprintln!("claim {} {:<22} {status} {}", c.id, c.name, c.blamed.join(","));
    }
    if report.rejected_records > 0 || report.malformed_lines > 0 {
        eprintln!("{} rejected records, {} malformed lines", report.rejected_records, report.malformed_lines);
    }
    Ok(report.passed)
}

fn edg_export(args: &ExportArgs) -> Result<()> {
    let job = JobDescription::load(&args.job)?;
    let loaded = read_ndjson(&args.store)?;
    let policy = AuditPolicy::from_job(&job);
    let (edg, _) = build_edg(&loaded.records, &policy.platform_root, &policy.issuers);
    let dot = export_dot(&edg);
    match &args.dot {
        Some(path) => std::fs::write(path, dot)?,
        None => print!("{dot}"),
    }
    Ok(())
}

fn job_init(args: &InitArgs) -> Result<()> {
    if args.providers == 0 || args.rounds == 0 || args.dim < 2 || args.records == 0 {
        bail!("providers, rounds and records must be >= 1 and dim >= 2");
    }
    let opts = ScenarioOptions {
        providers: args.providers,
        rounds: args.rounds,
        dim: args.dim,
        records: args.records,
        seed: args.seed,
        sanitize: args.sanitize,
    };
    println!("{}", generate_job(&args.dir, &opts)?.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Dataset(DatasetCommand::Pack(a)) => dataset_pack(&a)?,
        Command::Job(JobCommand::Init(a)) => job_init(&a)?,
        Command::Job(JobCommand::Run(a)) => job_run(&a)?,
        Command::Audit(a) => return Ok(if run_audit(&a)? { 0 } else { EXIT_AUDIT_FAIL }),
        Command::Edg(EdgCommand::Export(a)) => edg_export(&a)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
