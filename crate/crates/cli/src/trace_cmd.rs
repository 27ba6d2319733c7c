use std::path::PathBuf;

use anyhow::anyhow;
use clap::Subcommand;
use coma_core::llm::Role;
use coma_core::pipeline::expected_calls;
use coma_core::trace::{load_trace, TraceEvent};

use crate::{Class, Failure};

#[derive(Subcommand)]
pub enum TraceAction {
    /// Print the events of a trace
    Show {
        path: PathBuf,
        /// Include full prompts and replies
        #[arg(long)]
        full: bool,
    },
    /// Per-role call and token counts, checked against the method's call formula
    Stats { path: PathBuf },
}

fn clip(s: &str, n: usize) -> String {
    let one_line = s.replace('\n', "\\n");
    if one_line.chars().count() <= n {
        one_line
    } else {
        let cut: String = one_line.chars().take(n).collect();
        format!("{cut}...")
    }
}

fn at(chunk: Option<usize>) -> String {
    chunk.map(|c| format!(" chunk {c}")).unwrap_or_default()
}

pub fn cmd_trace(action: &TraceAction) -> Result<(), Failure> {
    let path = match action {
        TraceAction::Show { path, .. } | TraceAction::Stats { path } => path,
    };
    let trace = load_trace(path).map_err(|e| Failure::new(Class::Integrity, anyhow!("{}: {e}", path.display())))?;
    match action {
        TraceAction::Show { full, .. } => {
            let width = if *full { usize::MAX } else { 100 };
            for (i, e) in trace.events.iter().enumerate() {
                let line = match e {
                    TraceEvent::Config { config } => format!(
                        "config method={} chunk_size={} budget={} tokenizer={}",
                        config.method,
                        config.chunk_size,
                        config.budget.max_tokens,
                        config.tokenizer.as_str()
                    ),
                    TraceEvent::RunStart {
                        method,
                        query,
                        chunks,
                        document_tokens,
                    } => format!(
                        "start {method}: {chunks} chunk(s), {document_tokens} tokens, query {}",
                        clip(query, width)
                    ),
                    TraceEvent::Exchange {
                        role,
                        chunk,
                        attempt,
                        model,
                        prompt,
                        response,
                        prompt_tokens,
                        completion_tokens,
                        ..
                    } => {
                        let mut s = format!(
                            "call {role}{} attempt {attempt} [{model}] {prompt_tokens}+{completion_tokens} tok: {}",
                            at(*chunk),
                            clip(response, width)
                        );
                        if *full {
                            s.push_str(&format!("\n    prompt: {}", clip(prompt, width)));
                        }
                        s
                    }
                    TraceEvent::Delta {
                        role, chunk, kind, items,
                    } => format!("delta {role}{} {}: {} item(s)", at(*chunk), kind.as_str(), items.len()),
                    TraceEvent::Prune {
                        chunk,
                        evicted,
                        oversized,
                    } => format!(
                        "prune chunk {chunk}: evicted {}{}",
                        evicted.len(),
                        if *oversized { ", newest fact over budget" } else { "" }
                    ),
                    TraceEvent::Snapshot {
                        phase,
                        chunk,
                        gathered_tokens,
                        memory,
                        ..
                    } => {
                        let mut s = format!("snapshot {phase:?}{} gathered={gathered_tokens} tok", at(*chunk));
                        for l in memory.lines() {
                            s.push_str("\n    ");
                            s.push_str(&clip(l, width));
                        }
                        s
                    }
                    TraceEvent::Summary {
                        chunk,
                        tokens,
                        truncated,
                        text,
                    } => format!(
                        "summary chunk {chunk}: {tokens} tok{} {}",
                        if *truncated { " (capped)" } else { "" },
                        clip(text, width)
                    ),
                    TraceEvent::Truncation {
                        original_tokens,
                        kept_tokens,
                    } => format!("truncation {original_tokens} -> {kept_tokens} tokens"),
                    TraceEvent::Warning { role, chunk, message } => format!(
                        "warning{}{}: {message}",
                        role.map(|r| format!(" {r}")).unwrap_or_default(),
                        at(*chunk)
                    ),
                    TraceEvent::Final { answer, wall_ms } => format!("final ({wall_ms} ms): {answer}"),
                    TraceEvent::Error { message } => format!("error: {message}"),
                };
                println!("{i:>4}  {line}");
            }
            Ok(())
        }
        TraceAction::Stats { .. } => {
            let stats = trace.stats();
            let method = stats.method.clone().unwrap_or_else(|| "?".into());
            println!("method: {method}");
            if let Some(l) = stats.chunks {
                println!("chunks: {l}");
            }
            println!("{:<10} {:>6} {:>9} {:>12} {:>12}", "role", "calls", "requests", "prompt tok", "compl tok");
            for role in Role::ALL {
                let calls = stats.calls.get(&role).copied().unwrap_or(0);
                let reqs = stats.requests.get(&role).copied().unwrap_or(0);
                if reqs == 0 {
                    continue;
                }
                println!(
                    "{:<10} {:>6} {:>9} {:>12} {:>12}",
                    role.as_str(),
                    calls,
                    reqs,
                    stats.prompt_tokens.get(&role).copied().unwrap_or(0),
                    stats.completion_tokens.get(&role).copied().unwrap_or(0)
                );
            }
            println!(
                "{:<10} {:>6} {:>9} {:>12} {:>12}",
                "total",
                stats.total_calls(),
                stats.total_requests(),
                stats.total_prompt_tokens(),
                stats.total_completion_tokens()
            );
            println!("warnings: {}", stats.warnings);
            let expected = stats.chunks.and_then(|l| expected_calls(&method, l));
            match expected {
                _ if !stats.completed => {
                    println!("run did not complete; call formula not checked");
                    Ok(())
                }
                None => {
                    println!("no call formula for method `{method}`");
                    Ok(())
                }
                Some(want) if want == stats.total_calls() => {
                    println!("call formula: {want} expected, {} observed, ok", stats.total_calls());
                    Ok(())
                }
                Some(want) => Err(Failure::new(
                    Class::Verification,
                    anyhow!("call formula: {want} expected, {} observed", stats.total_calls()),
                )),
            }
        }
    }
}
