mod bench;
mod config;
mod trace_cmd;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::anyhow;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use coma_core::agents::PromptSet;
use coma_core::llm::{build_backend, LlmBackend, LlmClient, LlmError, RetryPolicy};
use coma_core::pipeline::{self, PipelineError, RunConfig, RunEnv};
use coma_core::trace::persist_trace;

use config::{FileConfig, Provenance, RunArgs};

#[derive(Parser)]
#[command(name = "coma", version, about = "Long-context QA with a chain of memory agents")]
struct Cli {
    /// TOML config file
    #[arg(long, global = true, env = "COMA_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question about one document
    Run(RunCmd),
    /// Score methods over a JSON-lines dataset
    Bench(bench::BenchCmd),
    /// Inspect a persisted run trace
    Trace {
        #[command(subcommand)]
        action: trace_cmd::TraceAction,
    },
}

#[derive(clap::Args)]
struct RunCmd {
    #[arg(long, short)]
    question: String,
    /// Plain-text document
    #[arg(long, short)]
    document: PathBuf,
    /// coma, coa or tc
    #[arg(long, env = "COMA_METHOD")]
    method: Option<String>,
    /// Trace file (default: <out>/<method>.trace.jsonl)
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    args: RunArgs,
}

/// Diagnostic class of a failure; the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Internal = 1,
    Usage = 2,
    Input = 3,
    Backend = 4,
    Replay = 5,
    Integrity = 6,
    Verification = 7,
}

impl Class {
    pub fn name(self) -> &'static str {
        match self {
            Class::Internal => "internal",
            Class::Usage => "usage",
            Class::Input => "input",
            Class::Backend => "backend",
            Class::Replay => "replay",
            Class::Integrity => "integrity",
            Class::Verification => "verification",
        }
    }

    pub fn of_llm(e: &LlmError) -> Class {
        match e {
            LlmError::CassetteMismatch { .. } | LlmError::CassetteExhausted(_) | LlmError::ScriptExhausted(_) => {
                Class::Replay
            }
            LlmError::Config(_) => Class::Usage,
            LlmError::Io(_) => Class::Input,
            _ => Class::Backend,
        }
    }

    pub fn of_pipeline(e: &PipelineError) -> Class {
        match e {
            PipelineError::EmptyDocument | PipelineError::EmptyQuery => Class::Input,
            PipelineError::Config(_)
            | PipelineError::UnknownMethod(_)
            | PipelineError::Budget(_)
            | PipelineError::Chunking(_) => Class::Usage,
            _ => e.llm().map(Class::of_llm).unwrap_or(Class::Usage),
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(class: Class, error: impl Into<anyhow::Error>) -> Self {
        Self {
            class,
            error: error.into(),
        }
    }
}

pub fn fail(class: Class) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { class, error }
}

pub fn load_prompts(run: &RunConfig) -> Result<PromptSet, Failure> {
    match &run.prompt_dir {
        Some(dir) => PromptSet::with_overrides(dir).map_err(|e| Failure::new(Class::Input, e)),
        None => Ok(PromptSet::builtin()),
    }
}

pub fn make_client(backend: Arc<dyn LlmBackend>, max_retries: u32) -> LlmClient {
    LlmClient::new(backend).with_retry(RetryPolicy {
        max_retries,
        ..RetryPolicy::default()
    })
}

fn cmd_run(cmd: &RunCmd, file: &FileConfig, prov: &mut Provenance<'_>) -> Result<(), Failure> {
    let resolved = config::resolve(&cmd.args, Some(&cmd.method), file, prov, "runs").map_err(fail(Class::Usage))?;
    eprint!("{}", prov.render());
    let document = std::fs::read_to_string(&cmd.document)
        .map_err(|e| Failure::new(Class::Input, anyhow!("reading {}: {e}", cmd.document.display())))?;
    let prompts = load_prompts(&resolved.run)?;
    let backend =
        build_backend(&resolved.backend.config(None)).map_err(|e| Failure::new(Class::of_llm(&e), e))?;
    let client = make_client(backend, resolved.max_retries);
    let env = RunEnv {
        client: &client,
        prompts: &prompts,
        config: &resolved.run,
    };
    let trace_path = cmd
        .trace
        .clone()
        .unwrap_or_else(|| resolved.out_dir.join(format!("{}.trace.jsonl", resolved.run.method)));

    let (trace, result) = match pipeline::run(&cmd.question, &document, &env) {
        Ok(out) => (out.trace, Ok(out.answer)),
        Err(f) => (f.trace, Err(f.error)),
    };
    persist_trace(&trace, &trace_path).map_err(|e| Failure::new(Class::Internal, e))?;
    eprintln!("trace written to {}", trace_path.display());
    let stats = trace.stats();
    eprintln!(
        "calls: {} logical, {} requests; tokens: {} prompt, {} completion; warnings: {}",
        stats.total_calls(),
        stats.total_requests(),
        stats.total_prompt_tokens(),
        stats.total_completion_tokens(),
        stats.warnings
    );
    match result {
        Ok(answer) => {
            println!("{answer}");
            Ok(())
        }
        Err(e) => Err(Failure::new(Class::of_pipeline(&e), e)),
    }
}

fn dispatch(cli: &Cli, matches: &clap::ArgMatches) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p).map_err(fail(Class::Usage))?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::Run(cmd) => {
            let mut prov = Provenance::new(matches.subcommand_matches("run").unwrap());
            cmd_run(cmd, &file, &mut prov)
        }
        Command::Bench(cmd) => {
            let mut prov = Provenance::new(matches.subcommand_matches("bench").unwrap());
            bench::cmd_bench(cmd, &file, &mut prov)
        }
        Command::Trace { action } => trace_cmd::cmd_trace(action),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {:#}", f.class.name(), f.error);
            ExitCode::from(f.class as u8)
        }
    }
}
