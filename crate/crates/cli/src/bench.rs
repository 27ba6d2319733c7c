//! Benchmark sweeps.
//!
//! Results stream to `<out>/rows.jsonl`: a header record echoing the
//! configuration, one record per (method, example), and a `complete` record
//! once every job has run. `report.json` and `report.txt` are written only
//! after the completion record, so a directory holding a report always holds a
//! finished sweep.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use coma_core::chunking::tokenizer;
use coma_core::eval::{aggregate, filter_min_context, load_dataset, score_answer, Metric, QaExample, ScoreRow};
use coma_core::llm::{build_backend, BackendConfig};
use coma_core::pipeline::{self, MethodRegistry, RunEnv};
use coma_core::trace::{persist_trace, TraceEvent};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, BackendPlan, FileConfig, Provenance, Resolved, RunArgs, Source};
use crate::{fail, load_prompts, make_client, Class, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    RougeL,
    Rouge1,
}

impl MetricArg {
    fn parse(s: &str) -> Option<Self> {
        <Self as ValueEnum>::from_str(s, true).ok()
    }
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::RougeL => Metric::RougeL,
            MetricArg::Rouge1 => Metric::Rouge1,
        }
    }
}

#[derive(Args)]
pub struct BenchCmd {
    /// JSON-lines dataset
    #[arg(long)]
    dataset: PathBuf,
    /// Name shown in the report (default: dataset file stem)
    #[arg(long)]
    name: Option<String>,
    /// Methods to evaluate (repeatable or comma-separated; default: all)
    #[arg(long = "method", value_delimiter = ',', env = "COMA_METHODS")]
    methods: Vec<String>,
    /// Evaluate only the first N examples after ordering
    #[arg(long, env = "COMA_LIMIT")]
    limit: Option<usize>,
    /// Continue a sweep in the output directory
    #[arg(long)]
    resume: bool,
    /// Examples evaluated concurrently
    #[arg(long, env = "COMA_PARALLELISM")]
    parallelism: Option<usize>,
    /// Shuffle examples with this seed before applying --limit
    #[arg(long, env = "COMA_SEED")]
    seed: Option<u64>,
    /// Skip malformed dataset rows instead of failing
    #[arg(long)]
    skip_bad: bool,
    /// Drop examples whose context is shorter than this many tokens
    #[arg(long, env = "COMA_MIN_CONTEXT_TOKENS")]
    min_context_tokens: Option<usize>,
    #[arg(long, value_enum, env = "COMA_METRIC")]
    metric: Option<MetricArg>,
    #[command(flatten)]
    args: RunArgs,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header { config: Value },
    Row(ScoreRow),
    Complete { rows: usize },
}

/// File-name-safe form of an example id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

struct Plan {
    resolved: Resolved,
    methods: Vec<String>,
    metric: Metric,
    parallelism: usize,
    dataset_name: String,
    examples: Vec<QaExample>,
    echo: Value,
}

fn plan(cmd: &BenchCmd, file: &FileConfig, prov: &mut Provenance<'_>) -> Result<Plan, Failure> {
    let resolved = config::resolve(&cmd.args, None, file, prov, "bench-out").map_err(fail(Class::Usage))?;
    let b = &file.bench;
    let known = MethodRegistry::default();
    let arg_methods = (!cmd.methods.is_empty()).then(|| cmd.methods.clone());
    let default_methods: Vec<String> = known.names().iter().map(|s| s.to_string()).collect();
    let mut methods = prov.pick("methods", &arg_methods, &b.methods, default_methods);
    let mut seen_methods = HashSet::new();
    methods.retain(|m| seen_methods.insert(m.clone()));
    for m in &methods {
        known.get(m).map_err(|e| Failure::new(Class::Usage, e))?;
    }
    let file_metric = match &b.metric {
        Some(s) => Some(MetricArg::parse(s).ok_or_else(|| Failure::new(Class::Usage, anyhow!("unknown metric `{s}`")))?),
        None => None,
    };
    let metric: Metric = prov.pick("metric", &cmd.metric, &file_metric, MetricArg::RougeL).into();
    let parallelism = prov.pick("parallelism", &cmd.parallelism, &b.parallelism, 1).max(1);
    let seed = prov.pick("seed", &cmd.seed.map(Some), &b.seed.map(Some), None);
    let limit = prov.pick("limit", &cmd.limit.map(Some), &b.limit.map(Some), None);
    let min_context = prov.pick("min_context_tokens", &cmd.min_context_tokens, &b.min_context_tokens, 0);

    let loaded = load_dataset(&cmd.dataset, cmd.skip_bad).map_err(|e| Failure::new(Class::Input, e))?;
    for (line, msg) in &loaded.skipped {
        log::warn!("{}:{line}: skipped: {msg}", cmd.dataset.display());
    }
    let tok = tokenizer(&resolved.run.tokenizer).map_err(|e| Failure::new(Class::Usage, e))?;
    let mut examples = filter_min_context(loaded.examples, min_context, tok.as_ref());
    let mut seen = HashSet::new();
    for ex in &examples {
        if !seen.insert(file_stem(&ex.id)) {
            return Err(Failure::new(Class::Input, anyhow!("duplicate example id `{}`", ex.id)));
        }
    }
    if let Some(seed) = seed {
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if let Some(n) = limit {
        examples.truncate(n);
    }
    prov.note("examples", examples.len(), Source::Derived);

    let dataset_name = cmd.name.clone().unwrap_or_else(|| {
        cmd.dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let echo = json!({
        "dataset": cmd.dataset.display().to_string(),
        "name": dataset_name,
        "methods": methods,
        "metric": metric,
        "seed": seed,
        "limit": limit,
        "min_context_tokens": min_context,
        "skip_bad": cmd.skip_bad,
        "run": resolved.run,
        "mc_task_inst": resolved.mc_task_inst,
        "backend": resolved.backend.config(None),
        "max_retries": resolved.max_retries,
    });
    Ok(Plan {
        resolved,
        methods,
        metric,
        parallelism,
        dataset_name,
        examples,
        echo,
    })
}

/// Rows already finished without error, after checking that the sweep on disk
/// was produced with the same configuration. The rows file is rewritten without
/// failed rows, a torn last line or an old completion record.
fn resume_rows(path: &Path, echo: &Value) -> Result<Vec<ScoreRow>, Failure> {
    let input = |e: anyhow::Error| Failure::new(Class::Input, e);
    let f = File::open(path).map_err(|e| input(anyhow!("{}: {e}", path.display())))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| input(anyhow!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut header = None;
    let n = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(line) {
            Ok(Record::Header { config }) if i == 0 => header = Some(config),
            Ok(Record::Header { .. }) => return Err(input(anyhow!("{}:{}: unexpected header", path.display(), i + 1))),
            Ok(Record::Row(r)) if r.error.is_none() => rows.push(r),
            Ok(Record::Row(_)) | Ok(Record::Complete { .. }) => {}
            Err(_) if i + 1 == n => log::warn!("{}: ignoring torn last line", path.display()),
            Err(e) => return Err(input(anyhow!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    match header {
        None => return Err(input(anyhow!("{}: no header record", path.display()))),
        Some(h) if &h != echo => {
            return Err(Failure::new(
                Class::Usage,
                anyhow!("{} was produced with a different configuration; use a fresh --out", path.display()),
            ))
        }
        Some(_) => {}
    }
    let mut keep = HashSet::new();
    rows.retain(|r| keep.insert((r.method.clone(), r.id.clone())));
    write_rows(path, echo, &rows).map_err(fail(Class::Internal))?;
    Ok(rows)
}

fn write_rows(path: &Path, echo: &Value, rows: &[ScoreRow]) -> anyhow::Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    let mut out = File::create(&tmp)?;
    writeln!(out, "{}", serde_json::to_string(&Record::Header { config: echo.clone() })?)?;
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(&Record::Row(r.clone()))?)?;
    }
    out.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Job<'a> {
    method: &'a str,
    example: &'a QaExample,
}

fn run_job(job: &Job<'_>, plan: &Plan, prompts: &coma_core::agents::PromptSet, out: &Path) -> (ScoreRow, Option<Class>) {
    let started = Instant::now();
    let ex = job.example;
    let stem = file_stem(&ex.id);
    let mut row = ScoreRow {
        id: ex.id.clone(),
        method: job.method.to_string(),
        score: 0.0,
        rouge_l: 0.0,
        rouge_1: 0.0,
        em: None,
        ambiguous: false,
        calls: 0,
        requests: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        wall_ms: 0,
        answer: String::new(),
        error: None,
    };
    let cassette = match &plan.resolved.backend {
        BackendPlan::Cassette { path, .. } => Some(path.join(job.method).join(format!("{stem}.jsonl"))),
        _ => None,
    };
    let backend_cfg: BackendConfig = plan.resolved.backend.config(cassette.as_deref());
    let backend = match build_backend(&backend_cfg) {
        Ok(b) => b,
        Err(e) => {
            let class = Class::of_llm(&e);
            row.error = Some(format!("{}: {e}", class.name()));
            row.wall_ms = started.elapsed().as_millis() as u64;
            return (row, Some(class));
        }
    };
    let client = make_client(backend, plan.resolved.max_retries);
    let mut config = plan.resolved.run.clone();
    config.method = job.method.to_string();
    if ex.is_multiple_choice() {
        config.task_inst = plan.resolved.mc_task_inst.clone();
    }
    let env = RunEnv {
        client: &client,
        prompts,
        config: &config,
    };
    let (trace, result) = match pipeline::run(&ex.prompt_query(), &ex.context, &env) {
        Ok(o) => (o.trace, Ok(o.answer)),
        Err(f) => (f.trace, Err(f.error)),
    };
    let trace_path = out.join("traces").join(job.method).join(format!("{stem}.trace.jsonl"));
    if let Err(e) = persist_trace(&trace, &trace_path) {
        log::warn!("writing {}: {e}", trace_path.display());
    }
    let stats = trace.stats();
    row.calls = stats.total_calls();
    row.requests = stats.total_requests();
    row.prompt_tokens = stats.total_prompt_tokens();
    row.completion_tokens = stats.total_completion_tokens();
    row.wall_ms = trace
        .events
        .iter()
        .find_map(|e| match e {
            TraceEvent::Final { wall_ms, .. } => Some(*wall_ms),
            _ => None,
        })
        .unwrap_or_else(|| started.elapsed().as_millis() as u64);
    match result {
        Ok(answer) => {
            let s = score_answer(ex, &answer, plan.metric);
            row.score = s.score;
            row.rouge_l = s.rouge_l;
            row.rouge_1 = s.rouge_1;
            row.em = s.em;
            row.ambiguous = s.ambiguous;
            row.answer = answer;
            (row, None)
        }
        Err(e) => {
            let class = Class::of_pipeline(&e);
            row.error = Some(format!("{}: {e}", class.name()));
            (row, Some(class))
        }
    }
}

pub fn cmd_bench(cmd: &BenchCmd, file: &FileConfig, prov: &mut Provenance<'_>) -> Result<(), Failure> {
    let plan = plan(cmd, file, prov)?;
    eprint!("{}", prov.render());
    let prompts = load_prompts(&plan.resolved.run)?;
    let out = plan.resolved.out_dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(fail(Class::Internal))?;
    let rows_path = out.join("rows.jsonl");
    let report_json = out.join("report.json");
    let report_txt = out.join("report.txt");

    let mut rows = if rows_path.exists() {
        if !cmd.resume {
            return Err(Failure::new(
                Class::Usage,
                anyhow!("{} already holds results; pass --resume or choose another --out", out.display()),
            ));
        }
        resume_rows(&rows_path, &plan.echo)?
    } else {
        write_rows(&rows_path, &plan.echo, &[]).map_err(fail(Class::Internal))?;
        Vec::new()
    };
    for stale in [&report_json, &report_txt] {
        if stale.exists() {
            std::fs::remove_file(stale).map_err(|e| Failure::new(Class::Internal, e))?;
        }
    }
    let wanted: BTreeSet<(&str, &str)> = plan
        .methods
        .iter()
        .flat_map(|m| plan.examples.iter().map(move |e| (m.as_str(), e.id.as_str())))
        .collect();
    rows.retain(|r| wanted.contains(&(r.method.as_str(), r.id.as_str())));
    let done: HashSet<(String, String)> = rows.iter().map(|r| (r.method.clone(), r.id.clone())).collect();
    let jobs: Vec<Job<'_>> = plan
        .methods
        .iter()
        .flat_map(|m| plan.examples.iter().map(move |e| Job { method: m, example: e }))
        .filter(|j| !done.contains(&(j.method.to_string(), j.example.id.clone())))
        .collect();
    if !done.is_empty() {
        log::info!("resuming: {} finished, {} to run", done.len(), jobs.len());
    }

    let sink = Mutex::new(
        OpenOptions::new()
            .append(true)
            .open(&rows_path)
            .map_err(|e| Failure::new(Class::Internal, e))?,
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallelism)
        .build()
        .map_err(|e| Failure::new(Class::Internal, e))?;
    let results: Vec<(ScoreRow, Option<Class>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let (row, class) = run_job(job, &plan, &prompts, &out);
                match &row.error {
                    Some(e) => log::warn!("{} {}: {e}", row.method, row.id),
                    None => log::info!("{} {}: score {:.3}", row.method, row.id, row.score),
                }
                let line = serde_json::to_string(&Record::Row(row.clone())).expect("row serializes");
                let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                    log::error!("appending to rows file: {e}");
                }
                (row, class)
            })
            .collect()
    });
    let first_failure = results.iter().find_map(|(_, c)| *c);
    rows.extend(results.into_iter().map(|(r, _)| r));

    {
        let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(f, "{}", serde_json::to_string(&Record::Complete { rows: rows.len() }).expect("serializes"))
            .and_then(|_| f.sync_all())
            .map_err(|e| Failure::new(Class::Internal, e))?;
    }
    let report = aggregate(&plan.dataset_name, plan.metric, rows, plan.echo.clone());
    let table = report.table();
    std::fs::write(&report_json, report.to_json()).map_err(|e| Failure::new(Class::Internal, e))?;
    std::fs::write(&report_txt, &table).map_err(|e| Failure::new(Class::Internal, e))?;
    print!("{table}");
    eprintln!("report written to {}", report_json.display());
    match first_failure {
        None => Ok(()),
        Some(class) => {
            let failed = report.methods.iter().map(|m| m.failures).sum::<usize>();
            Err(Failure::new(class, anyhow!("{failed} run(s) failed; see {}", rows_path.display())))
        }
    }
}
