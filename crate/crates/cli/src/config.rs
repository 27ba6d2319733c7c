//! Effective configuration: command-line flag, then environment variable, then
//! config file, then built-in default.
//!
//! The config file is TOML:
//!
//! ```toml
//! [run]
//! method = "coma"
//! chunk_size = 64000
//! k_fraction = 0.125        # or budget_tokens = 8000
//! tc_limit = 128000
//!
//! [models]
//! default = "gpt-4.1"
//! extract = "qwen3-14b"
//!
//! [backend]
//! kind = "http"             # http | scripted | cassette
//! base_url = "http://localhost:8000/v1"
//!
//! [bench]
//! parallelism = 4
//! seed = 7
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, ValueEnum};
use coma_core::agents::{TASK_INST_MC, TASK_INST_QA};
use coma_core::chunking::TokenizerId;
use coma_core::llm::{BackendConfig, CassetteMode, Role};
use coma_core::memory::MemoryBudget;
use coma_core::pipeline::{RoleModels, RunConfig};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub method: Option<String>,
    pub chunk_size: Option<usize>,
    pub budget_tokens: Option<usize>,
    pub k_fraction: Option<f64>,
    pub tc_limit: Option<usize>,
    pub tokenizer: Option<String>,
    pub retry_max: Option<u32>,
    pub question_cap: Option<usize>,
    pub inferred_cap: Option<usize>,
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<usize>,
    pub summary_cap: Option<usize>,
    pub prompt_dir: Option<PathBuf>,
    pub task_inst: Option<String>,
    pub mc_task_inst: Option<String>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub base_url: Option<String>,
    pub timeout_secs: Option<u64>,
    pub eager_check: Option<bool>,
    pub script: Option<PathBuf>,
    pub cassette: Option<PathBuf>,
    pub cassette_mode: Option<CassetteModeArg>,
    pub record_from: Option<BackendKind>,
    pub max_retries: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Option<Vec<String>>,
    pub metric: Option<String>,
    pub parallelism: Option<usize>,
    pub seed: Option<u64>,
    pub limit: Option<usize>,
    pub min_context_tokens: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Scripted,
    Cassette,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteModeArg {
    Record,
    Replay,
}

/// Run settings shared by `run` and `bench`. Every field is optional so that
/// unset flags fall through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long, env = "COMA_CHUNK_SIZE")]
    pub chunk_size: Option<usize>,
    /// Memory budget in tokens (overrides --k-fraction)
    #[arg(long, env = "COMA_BUDGET_TOKENS")]
    pub budget_tokens: Option<usize>,
    /// Memory budget as a fraction of the chunk size
    #[arg(long, env = "COMA_K_FRACTION")]
    pub k_fraction: Option<f64>,
    #[arg(long, env = "COMA_TC_LIMIT")]
    pub tc_limit: Option<usize>,
    #[arg(long, env = "COMA_TOKENIZER")]
    pub tokenizer: Option<String>,
    #[arg(long, env = "COMA_RETRY_MAX")]
    pub retry_max: Option<u32>,
    #[arg(long, env = "COMA_QUESTION_CAP")]
    pub question_cap: Option<usize>,
    #[arg(long, env = "COMA_INFERRED_CAP")]
    pub inferred_cap: Option<usize>,
    #[arg(long, env = "COMA_TEMPERATURE")]
    pub temperature: Option<f64>,
    #[arg(long, env = "COMA_MAX_OUTPUT_TOKENS")]
    pub max_output_tokens: Option<usize>,
    #[arg(long, env = "COMA_SUMMARY_CAP")]
    pub summary_cap: Option<usize>,
    /// Directory whose <role>.txt files replace the built-in prompts
    #[arg(long, env = "COMA_PROMPT_DIR")]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long, env = "COMA_TASK_INST")]
    pub task_inst: Option<String>,
    #[arg(long, env = "COMA_MC_TASK_INST")]
    pub mc_task_inst: Option<String>,
    /// Model for every role without an explicit assignment
    #[arg(long, env = "COMA_MODEL")]
    pub model: Option<String>,
    /// Per-role model, as ROLE=MODEL (repeatable)
    #[arg(long = "role-model", value_name = "ROLE=MODEL")]
    pub role_models: Vec<String>,
    #[arg(long, value_enum, env = "COMA_BACKEND")]
    pub backend: Option<BackendKind>,
    #[arg(long, env = "LLM_BASE_URL")]
    pub base_url: Option<String>,
    #[arg(long, env = "COMA_TIMEOUT_SECS")]
    pub timeout_secs: Option<u64>,
    /// Probe the endpoint before the first call
    #[arg(long, env = "COMA_EAGER_CHECK")]
    pub eager_check: Option<bool>,
    /// Transport retries per call
    #[arg(long, env = "COMA_MAX_RETRIES")]
    pub max_retries: Option<u32>,
    /// Scripted reply file (JSON lines)
    #[arg(long, env = "COMA_SCRIPT")]
    pub script: Option<PathBuf>,
    /// Cassette file for `run`, cassette directory for `bench`
    #[arg(long, env = "COMA_CASSETTE")]
    pub cassette: Option<PathBuf>,
    #[arg(long, value_enum, env = "COMA_CASSETTE_MODE")]
    pub cassette_mode: Option<CassetteModeArg>,
    /// Backend that fills a cassette being recorded
    #[arg(long, value_enum, env = "COMA_RECORD_FROM")]
    pub record_from: Option<BackendKind>,
    #[arg(long, env = "COMA_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
    Derived,
}

impl Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "file",
            Source::Default => "default",
            Source::Derived => "derived",
        })
    }
}

/// Effective value of every setting and where it came from.
pub struct Provenance<'a> {
    matches: &'a ArgMatches,
    pub entries: Vec<(String, String, Source)>,
}

impl<'a> Provenance<'a> {
    pub fn new(matches: &'a ArgMatches) -> Self {
        Self {
            matches,
            entries: Vec::new(),
        }
    }

    fn arg_source(&self, id: &str) -> Option<Source> {
        if !self.matches.ids().any(|i| i.as_str() == id) {
            return None;
        }
        match self.matches.value_source(id) {
            Some(ValueSource::CommandLine) => Some(Source::Flag),
            Some(ValueSource::EnvVariable) => Some(Source::Env),
            _ => None,
        }
    }

    /// Picks flag/env over file over default and records the choice under `id`.
    pub fn pick<T: Clone + std::fmt::Debug>(&mut self, id: &str, arg: &Option<T>, file: &Option<T>, default: T) -> T {
        let (value, source) = match (arg, file) {
            (Some(v), _) => (v.clone(), self.arg_source(id).unwrap_or(Source::Flag)),
            (None, Some(v)) => (v.clone(), Source::File),
            (None, None) => (default, Source::Default),
        };
        self.entries.push((id.to_string(), format!("{value:?}"), source));
        value
    }

    pub fn note(&mut self, id: &str, value: impl std::fmt::Debug, source: Source) {
        self.entries.push((id.to_string(), format!("{value:?}"), source));
    }

    pub fn render(&self) -> String {
        let width = self.entries.iter().map(|e| e.0.len()).max().unwrap_or(0);
        let mut out = String::from("effective configuration:\n");
        for (k, v, s) in &self.entries {
            out.push_str(&format!("  {k:<width$} = {v}  [{s}]\n"));
        }
        out
    }
}

/// Backend choice before per-run paths are filled in.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendPlan {
    Http { base_url: Option<String>, timeout_secs: u64, eager_check: bool },
    Scripted { path: PathBuf },
    Cassette { path: PathBuf, mode: CassetteMode, inner: Option<Box<BackendPlan>> },
}

impl BackendPlan {
    /// Backend configuration for one run. For cassettes `path` replaces the
    /// planned location when given.
    pub fn config(&self, cassette_path: Option<&Path>) -> BackendConfig {
        match self {
            BackendPlan::Http {
                base_url,
                timeout_secs,
                eager_check,
            } => BackendConfig::Http {
                base_url: base_url.clone(),
                eager_check: *eager_check,
                timeout_secs: *timeout_secs,
            },
            BackendPlan::Scripted { path } => BackendConfig::Scripted { path: path.clone() },
            BackendPlan::Cassette { path, mode, inner } => BackendConfig::Cassette {
                path: cassette_path.map(Path::to_path_buf).unwrap_or_else(|| path.clone()),
                mode: *mode,
                inner: inner.as_ref().map(|i| Box::new(i.config(None))),
            },
        }
    }
}

pub struct Resolved {
    pub run: RunConfig,
    pub mc_task_inst: String,
    pub backend: BackendPlan,
    pub max_retries: u32,
    pub out_dir: PathBuf,
}

/// Resolves run settings. `method` is the `--method` flag of `run`; `bench`
/// passes `None` and sets the method per job.
pub fn resolve(
    args: &RunArgs,
    method: Option<&Option<String>>,
    file: &FileConfig,
    prov: &mut Provenance<'_>,
    default_out: &str,
) -> Result<Resolved> {
    let f = &file.run;
    let d = RunConfig::default();
    let method = match method {
        Some(m) => prov.pick("method", m, &f.method, d.method.clone()),
        None => d.method.clone(),
    };
    let chunk_size = prov.pick("chunk_size", &args.chunk_size, &f.chunk_size, d.chunk_size);
    let budget = if args.budget_tokens.is_some() || (args.k_fraction.is_none() && f.budget_tokens.is_some()) {
        let t = prov.pick("budget_tokens", &args.budget_tokens, &f.budget_tokens, 0);
        MemoryBudget::from_tokens(t, chunk_size)?
    } else {
        let k = prov.pick("k_fraction", &args.k_fraction, &f.k_fraction, d.budget.k_fraction);
        MemoryBudget::from_fraction(k, chunk_size)?
    };
    prov.note("budget.max_tokens", budget.max_tokens, Source::Derived);
    let tc_limit = prov.pick("tc_limit", &args.tc_limit, &f.tc_limit, d.tc_limit);
    let tokenizer = prov.pick("tokenizer", &args.tokenizer, &f.tokenizer, d.tokenizer.as_str().to_string());
    let retry_max = prov.pick("retry_max", &args.retry_max, &f.retry_max, d.retry_max);
    let question_cap = prov.pick("question_cap", &args.question_cap, &f.question_cap, d.question_cap);
    let inferred_cap = prov.pick("inferred_cap", &args.inferred_cap.map(Some), &f.inferred_cap.map(Some), None);
    let temperature = prov.pick("temperature", &args.temperature, &f.temperature, d.temperature);
    let max_output_tokens =
        prov.pick("max_output_tokens", &args.max_output_tokens, &f.max_output_tokens, d.max_output_tokens);
    let summary_cap = prov.pick("summary_cap", &args.summary_cap, &f.summary_cap, d.summary_cap);
    let prompt_dir = prov.pick("prompt_dir", &args.prompt_dir.clone().map(Some), &f.prompt_dir.clone().map(Some), None);
    let task_inst = prov.pick("task_inst", &args.task_inst, &f.task_inst, TASK_INST_QA.to_string());
    let mc_task_inst = prov.pick("mc_task_inst", &args.mc_task_inst, &f.mc_task_inst, TASK_INST_MC.to_string());

    let default_model = prov.pick("model", &args.model, &file.models.get("default").cloned(), d.models.default.clone());
    let mut models = RoleModels::uniform(default_model);
    for (k, v) in &file.models {
        if k == "default" {
            continue;
        }
        let role = Role::parse(k).with_context(|| format!("unknown role `{k}` in [models]"))?;
        models.overrides.insert(role, v.clone());
        prov.note(&format!("models.{k}"), v, Source::File);
    }
    for spec in &args.role_models {
        let (k, v) = spec.split_once('=').with_context(|| format!("--role-model expects ROLE=MODEL, got `{spec}`"))?;
        let role = Role::parse(k.trim()).with_context(|| format!("unknown role `{k}` in --role-model"))?;
        models.overrides.insert(role, v.trim().to_string());
        prov.note(&format!("models.{}", k.trim()), v.trim(), Source::Flag);
    }

    let run = RunConfig {
        method,
        chunk_size,
        budget,
        tc_limit,
        models,
        tokenizer: TokenizerId::new(tokenizer),
        retry_max,
        question_cap,
        inferred_cap,
        task_inst,
        temperature,
        max_output_tokens,
        summary_cap,
        prompt_dir,
    };
    run.validate()?;

    let b = &file.backend;
    let kind = prov.pick("backend", &args.backend, &b.kind, BackendKind::Http);
    let http = |prov: &mut Provenance<'_>| BackendPlan::Http {
        base_url: prov.pick("base_url", &args.base_url.clone().map(Some), &b.base_url.clone().map(Some), None),
        timeout_secs: prov.pick("timeout_secs", &args.timeout_secs, &b.timeout_secs, 300),
        eager_check: prov.pick("eager_check", &args.eager_check, &b.eager_check, false),
    };
    let scripted = |prov: &mut Provenance<'_>| -> Result<BackendPlan> {
        let path = prov.pick("script", &args.script.clone().map(Some), &b.script.clone().map(Some), None);
        Ok(BackendPlan::Scripted {
            path: path.context("the scripted backend needs --script")?,
        })
    };
    let backend = match kind {
        BackendKind::Http => http(prov),
        BackendKind::Scripted => scripted(prov)?,
        BackendKind::Cassette => {
            let path = prov
                .pick("cassette", &args.cassette.clone().map(Some), &b.cassette.clone().map(Some), None)
                .context("the cassette backend needs --cassette")?;
            let mode = prov.pick("cassette_mode", &args.cassette_mode, &b.cassette_mode, CassetteModeArg::Replay);
            let (mode, inner) = match mode {
                CassetteModeArg::Replay => (CassetteMode::Replay, None),
                CassetteModeArg::Record => {
                    let from = prov.pick("record_from", &args.record_from, &b.record_from, BackendKind::Http);
                    let inner = match from {
                        BackendKind::Http => http(prov),
                        BackendKind::Scripted => scripted(prov)?,
                        BackendKind::Cassette => bail!("a cassette cannot be recorded from another cassette"),
                    };
                    (CassetteMode::Record, Some(Box::new(inner)))
                }
            };
            BackendPlan::Cassette { path, mode, inner }
        }
    };
    let max_retries = prov.pick("max_retries", &args.max_retries, &b.max_retries, 3);
    let out_dir = prov.pick("out", &args.out, &f.out_dir, PathBuf::from(default_out));
    Ok(Resolved {
        run,
        mc_task_inst,
        backend,
        max_retries,
        out_dir,
    })
}
