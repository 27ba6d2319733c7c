//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p coma-cli --test acceptance`.
//!
//! Criterion 1 has an optional live part: set `COMA_LIVE_DATASET` to a dataset
//! file and configure `LLM_BASE_URL` / `LLM_API_KEY` to also run
//! `coma bench --limit 3` against a real endpoint.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};

use coma_core::agents::{PromptSet, REASK_LINE};
use coma_core::chunking::{segment, truncate_middle, RuleTokenizer, BOUNDARY_SLACK, TRUNCATION_MARKER};
use coma_core::eval::{exact_match, rouge_l_f1, ScoreReport};
use coma_core::llm::{LlmClient, LlmRequest, RetryPolicy, Role, ScriptedBackend};
use coma_core::memory::{parse_memory_delta, serialize_memory, Memory, MemoryBudget, MemoryKey};
use coma_core::pipeline::{self, RunConfig, RunEnv, RunOutput};
use coma_core::trace::{Phase, RunTrace, TraceEvent};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------- oracles

/// Token count by the documented rule: a maximal alphanumeric run is one token,
/// every other non-space character is one token.
fn recount(text: &str) -> usize {
    let mut n = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                n += 1;
            }
            in_word = true;
        } else {
            in_word = false;
            if !c.is_whitespace() {
                n += 1;
            }
        }
    }
    n
}

/// Lowercase, drop everything but letters, digits and spaces, split.
fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_l_oracle(cand: &str, reference: &str) -> f64 {
    let (c, r) = (words(cand), words(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_table(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

// ---------------------------------------------------------------- helpers

fn between<'a>(hay: &'a str, start: &str, end: &str) -> &'a str {
    let from = hay.find(start).map(|i| i + start.len()).unwrap_or(0);
    let to = hay[from..].find(end).map(|i| from + i).unwrap_or(hay.len());
    &hay[from..to]
}

fn yaml_list(key: &str, items: &[String]) -> String {
    if items.is_empty() {
        return format!("{key}: []");
    }
    let mut s = format!("{key}:");
    for i in items {
        s.push_str(&format!("\n  - {}", serde_json::to_string(i).unwrap()));
    }
    s
}

fn memory_section(prompt: &str) -> &str {
    between(prompt, "CURRENT_MEMORY:\n", "\u{0}")
}

fn chunk_text(prompt: &str) -> &str {
    between(prompt, "CONTEXT_CHUNK: ", "\nCURRENT_MEMORY:")
}

fn sentences(text: &str) -> Vec<String> {
    text.split_inclusive('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn client_from<F>(f: F) -> LlmClient
where
    F: Fn(&LlmRequest) -> Option<String> + Send + Sync + 'static,
{
    LlmClient::new(Arc::new(ScriptedBackend::from_fn(f))).with_retry(RetryPolicy::none())
}

fn config(method: &str, chunk: usize, budget: usize) -> RunConfig {
    RunConfig {
        method: method.into(),
        chunk_size: chunk,
        budget: MemoryBudget::from_tokens(budget, chunk).unwrap(),
        tc_limit: chunk,
        summary_cap: chunk,
        ..RunConfig::default()
    }
}

fn run(method: &str, cfg: &RunConfig, client: &LlmClient, query: &str, doc: &str) -> Result<RunOutput, String> {
    let prompts = PromptSet::builtin();
    let mut cfg = cfg.clone();
    cfg.method = method.into();
    let env = RunEnv {
        client,
        prompts: &prompts,
        config: &cfg,
    };
    pipeline::run(query, doc, &env).map_err(|f| format!("{method} run failed: {}", f.error))
}

/// Memory lists of a snapshot, read back from its text form.
type Lists = BTreeMap<MemoryKey, Vec<String>>;

fn snapshot_lists(trace: &RunTrace) -> Vec<(Phase, Option<usize>, Lists)> {
    trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Snapshot { phase, chunk, memory, .. } => {
                Some((*phase, *chunk, parse_memory_delta(memory, &MemoryKey::ALL).expect("snapshot parses")))
            }
            _ => None,
        })
        .collect()
}

/// A document of random five-token sentences.
fn random_doc(rng: &mut ChaCha8Rng, tokens: usize) -> String {
    let mut parts = Vec::new();
    let mut n = 0;
    while n < tokens {
        parts.push(format!("Word{} goes here now.", rng.gen_range(0..1000)));
        n += 5;
    }
    parts.join(" ")
}

fn random_text(rng: &mut ChaCha8Rng, max_parts: usize) -> String {
    const PIECES: &[&str] = &[
        " ", " ", "  ", "\n", "\t", ".", ". ", ",", "!", "?", "'", "\"", "(", ")", "-", "é", "漢字", "ß", "…",
    ];
    let n = rng.gen_range(0..max_parts);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.55) {
                let len = rng.gen_range(1..9);
                (0..len)
                    .map(|_| *b"abcdefghijklmnopqrstuvwxyzABCXYZ0123456789".choose(rng).unwrap() as char)
                    .collect()
            } else {
                PIECES.choose(rng).unwrap().to_string()
            }
        })
        .collect()
}

// ---------------------------------------------------------------- criteria

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let script = [
        ("planner", "questions:\n  - \"Where did they meet?\""),
        ("extract", "gathered_facts:\n  - \"They met at the house.\""),
        ("infer", "inferred_facts:\n  - \"The house is where they met.\""),
        ("refine", "questions: []"),
        ("manager", "answer: \"at the house\""),
        ("coa_worker", "Summary of the Source Text and Previous Context:\nThey met at the house."),
        ("tc_direct", "answer: \"the house\""),
    ]
    .iter()
    .map(|(r, t)| serde_json::json!({"role": r, "text": t, "repeat": true}).to_string())
    .collect::<Vec<_>>()
    .join("\n");
    fs::write(p("script.jsonl"), script).unwrap();
    let mut rows = Vec::new();
    for i in 0..4 {
        let ctx: Vec<String> = (0..80).map(|j| format!("Line {j} of tale {i} mentions the house.")).collect();
        rows.push(serde_json::json!({"id": format!("t{i}"), "context": ctx.join(" "), "input": "Where did they meet?", "answers": ["at the house"]}).to_string());
    }
    rows.push(serde_json::json!({"id": "mc", "context": "They met in the house. ".repeat(50), "input": "Where?", "answers": ["B"], "options": ["garden", "house"]}).to_string());
    fs::write(p("data.jsonl"), rows.join("\n")).unwrap();

    let check = |out: &Path, methods: &[&str]| -> Result<ScoreReport, String> {
        let report: ScoreReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| format!("report.json: {e}"))?;
        let names: Vec<&str> = report.methods.iter().map(|m| m.method.as_str()).collect();
        let mut want = methods.to_vec();
        want.sort();
        ensure!(names == want, "methods in report: {names:?}");
        for m in &report.methods {
            ensure!(m.examples == 3, "{}: {} examples", m.method, m.examples);
            ensure!((0.0..=1.0).contains(&m.mean_score), "{}: score {}", m.method, m.mean_score);
        }
        let table = fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
        ensure!(table.lines().count() == 2 + methods.len(), "table:\n{table}");
        let rows = fs::read_to_string(out.join("rows.jsonl")).map_err(|e| e.to_string())?;
        ensure!(rows.lines().last().unwrap_or("").contains("\"complete\""), "no completion record");
        Ok(report)
    };

    let o = Command::new(env!("CARGO_BIN_EXE_coma"))
        .env_clear()
        .current_dir(dir.path())
        .args(["bench", "--dataset", "data.jsonl", "--limit", "3", "--chunk-size", "200", "--out", "smoke"])
        .args(["--backend", "scripted", "--script", "script.jsonl", "--seed", "1"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "bench failed: {}", String::from_utf8_lossy(&o.stderr));
    let report = check(&p("smoke"), &["coma", "coa", "tc"])?;
    ensure!(report.methods.iter().all(|m| m.failures == 0), "failures in scripted sweep");

    let live = match (std::env::var("COMA_LIVE_DATASET"), std::env::var("LLM_BASE_URL")) {
        (Ok(dataset), Ok(_)) => {
            let o = Command::new(env!("CARGO_BIN_EXE_coma"))
                .current_dir(dir.path())
                .args(["bench", "--limit", "3", "--out", "live", "--dataset", &dataset])
                .output()
                .map_err(|e| e.to_string())?;
            ensure!(o.status.success(), "live bench failed: {}", String::from_utf8_lossy(&o.stderr));
            check(&p("live"), &["coma", "coa", "tc"])?;
            "live endpoint sweep also passed"
        }
        _ => "live part skipped (COMA_LIVE_DATASET / LLM_BASE_URL not set)",
    };
    Ok(format!("scripted `bench --limit 3` over coma, coa, tc wrote well-formed reports; {live}"))
}

/// A tidy model: extract takes the sentences of the chunk, infer and refine
/// answer from memory, managers answer.
fn tidy(req: &LlmRequest) -> Option<String> {
    Some(match req.role {
        Role::Planner => yaml_list("questions", &["q1".into(), "q2".into()]),
        Role::Extract => yaml_list("gathered_facts", &sentences(chunk_text(&req.user)).into_iter().take(2).collect::<Vec<_>>()),
        Role::Infer => yaml_list("inferred_facts", &["an inference".into()]),
        Role::Refine => yaml_list("questions", &["q2".into()]),
        Role::Manager => "answer: \"done\"".into(),
        Role::CoaWorker => "Summary of the Source Text and Previous Context:\nshort".into(),
        Role::TcDirect => "answer: \"done\"".into(),
    })
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = std::collections::BTreeSet::new();
    let mut case = 0;
    while case < 100 {
        let l = rng.gen_range(1..=20);
        let chunk = rng.gen_range(30..150);
        let tokens = chunk * (l - 1) + rng.gen_range(1..=chunk);
        let doc = random_doc(&mut rng, tokens);
        let cfg = config("coma", chunk, chunk / 4 + 1);
        let actual_l = segment(&doc, chunk, &RuleTokenizer).unwrap().len();
        if actual_l > 20 {
            // boundary snapping pushed the count past the tested range
            continue;
        }
        seen.insert(actual_l);
        for (method, want) in [("coma", 3 * actual_l + 2), ("coa", actual_l + 1), ("tc", 1)] {
            let client = client_from(tidy);
            let out = run(method, &cfg, &client, "q", &doc)?;
            let stats = out.trace.stats();
            ensure!(
                stats.total_calls() == want as u64 && client.usage().total_calls() == want as u64,
                "case {case}: {method} L={actual_l}: {} logical calls, {} backend calls, expected {want}",
                stats.total_calls(),
                client.usage().total_calls()
            );
        }
        case += 1;
    }
    ensure!(seen.len() >= 15, "L coverage too narrow: {seen:?}");
    Ok(format!("100 cases, L covered {:?}..={:?}, coma 3L+2 / coa L+1 / tc 1 exact", seen.first().unwrap(), seen.last().unwrap()))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut prunes, mut evictions, mut oversized) = (0usize, 0usize, 0usize);
    for case in 0..1000 {
        let chunk = rng.gen_range(20..120);
        let budget = rng.gen_range(1..=chunk);
        let tokens = rng.gen_range(1..5 * chunk);
        let doc = random_doc(&mut rng, tokens);
        let seed: u64 = rng.gen();
        let counter = Mutex::new((ChaCha8Rng::seed_from_u64(seed), 0usize));
        let client = client_from(move |req| {
            if req.role != Role::Extract {
                return tidy(req);
            }
            let mut g = counter.lock().unwrap();
            let n = g.0.gen_range(0..5);
            let mut facts = Vec::new();
            for _ in 0..n {
                g.1 += 1;
                let len = g.0.gen_range(1..60);
                let id = g.1;
                facts.push((0..len).map(|k| format!("f{id}w{k}")).collect::<Vec<_>>().join(" "));
            }
            Some(yaml_list("gathered_facts", &facts))
        });
        let out = run("coma", &config("coma", chunk, budget), &client, "q", &doc)?;
        for e in &out.trace.events {
            match e {
                TraceEvent::Snapshot {
                    phase: Phase::Extract,
                    gathered_tokens,
                    memory,
                    chunk,
                    ..
                } => {
                    prunes += 1;
                    let lists = parse_memory_delta(memory, &MemoryKey::ALL).unwrap();
                    let recounted: usize = lists[&MemoryKey::GatheredFacts].iter().map(|f| recount(f)).sum();
                    ensure!(
                        *gathered_tokens <= budget && recounted <= budget,
                        "case {case} chunk {chunk:?}: gathered {gathered_tokens} (recount {recounted}) > budget {budget}"
                    );
                }
                TraceEvent::Prune { evicted, oversized: o, .. } => {
                    evictions += evicted.len();
                    oversized += *o as usize;
                }
                _ => {}
            }
        }
    }
    Ok(format!(
        "1000 runs, {prunes} prunes, 0 violations ({evictions} facts evicted; {oversized} prunes evicted a newest fact larger than the whole budget)"
    ))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut emptied = 0;
    for case in 0..1000 {
        let n = rng.gen_range(0..40);
        let texts: Vec<String> = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..30);
                std::iter::once(format!("fact{i}")).chain((1..len).map(|_| "x".to_string())).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let mut m = Memory::default();
        for t in &texts {
            // one fact at a time keeps insertion order explicit
            m = m.append_gathered(&[t], Some(0), &RuleTokenizer);
        }
        let chunk = 400;
        let budget = rng.gen_range(1..=chunk);
        let (pruned, report) = m.prune(&MemoryBudget::from_tokens(budget, chunk).unwrap());
        // brute force: drop the oldest until the rest fits
        let mut oracle = texts.clone();
        while oracle.iter().map(|t| recount(t)).sum::<usize>() > budget {
            oracle.remove(0);
        }
        emptied += (oracle.is_empty() && !texts.is_empty()) as usize;
        let got: Vec<String> = pruned.gathered_texts().iter().map(|s| s.to_string()).collect();
        ensure!(got == oracle, "case {case}: prune kept {got:?}, oracle {oracle:?}");
        ensure!(
            report.evicted.len() + got.len() == texts.len(),
            "case {case}: evicted count does not add up"
        );
        ensure!(pruned.questions == m.questions && pruned.inferred == m.inferred, "case {case}: other fields touched");
    }
    Ok(format!("1000 memories equal to drop-oldest oracle ({emptied} emptied by an oversized newest fact)"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total_chunks = 0;
    for case in 0..500 {
        let text = random_text(&mut rng, 1500);
        let s = rng.gen_range(1..300);
        let chunks = segment(&text, s, &RuleTokenizer).unwrap();
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        ensure!(joined.as_bytes() == text.as_bytes(), "case {case}: join differs");
        for (i, c) in chunks.iter().enumerate() {
            let t = recount(&c.text);
            ensure!(t == c.tokens, "case {case}: chunk {i} reports {} tokens, has {t}", c.tokens);
            ensure!(t <= s, "case {case}: chunk {i} has {t} > {s}");
            if i + 1 < chunks.len() {
                ensure!(t >= s.saturating_sub(BOUNDARY_SLACK).max(1), "case {case}: chunk {i} has {t} < {s} - 64");
            }
        }
        total_chunks += chunks.len();
    }
    Ok(format!("500 documents, {total_chunks} chunks, byte-exact joins, sizes within [s-64, s]"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cut = 0;
    for case in 0..500 {
        let text = random_text(&mut rng, 1200);
        let limit = rng.gen_range(1..400);
        let out = truncate_middle(&text, limit, &RuleTokenizer).unwrap();
        ensure!(recount(&out) <= limit, "case {case}: {} tokens > {limit}", recount(&out));
        if recount(&text) <= limit {
            ensure!(out == text, "case {case}: text within limit was changed");
        } else {
            cut += 1;
            let at = out.find(TRUNCATION_MARKER).ok_or(format!("case {case}: no marker"))?;
            let (head, tail) = (&out[..at], &out[at + TRUNCATION_MARKER.len()..]);
            ensure!(
                text.starts_with(head) && text.ends_with(tail) && head.len() + tail.len() <= text.len(),
                "case {case}: output is not prefix + marker + suffix"
            );
        }
        let again = truncate_middle(&out, limit, &RuleTokenizer).unwrap();
        ensure!(again == out, "case {case}: not idempotent");
    }
    Ok(format!("500 documents ({cut} truncated), within limit, prefix + marker + suffix, idempotent"))
}

fn criterion_7() -> Outcome {
    let exact = rouge_l_f1("the cat sat", &["the cat".to_string()]);
    ensure!(exact == 0.8, "worked example gives {exact}");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    const VOCAB: &[&str] = &["the", "Cat", "sat", "on", "a", "mat", "dog's", "ran", "42", "x-ray", "Über", "and", "ran.", "MAT,"];
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let phrase = |rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(0..=40);
            (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
        };
        let (c, r) = (phrase(&mut rng), phrase(&mut rng));
        let got = rouge_l_f1(&c, std::slice::from_ref(&r));
        let want = rouge_l_oracle(&c, &r);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() < 1e-9, "case {case}: {got} vs oracle {want} for {c:?} / {r:?}");
    }
    Ok(format!("worked example F1 = 0.8 exactly; 1000 pairs, max deviation {worst:.1e}"))
}

fn criterion_8() -> Outcome {
    let opts = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let abc = opts(&["Miss Kiley's house", "the garden", "the forge"]);
    let ab = opts(&["house", "big house"]);
    let yes_no = opts(&["yes", "no"]);
    // (candidate, gold, options, label)
    let table: Vec<(&str, &str, Option<&[String]>, u8)> = vec![
        ("Paris", "Paris", None, 1),
        ("paris", "Paris", None, 1),
        ("PARIS!", "Paris", None, 1),
        ("  Paris.  ", "Paris", None, 1),
        ("The Eiffel Tower", "Eiffel Tower", None, 1),
        ("an apple", "apple", None, 1),
        ("Paris, France", "Paris", None, 0),
        ("London", "Paris", None, 0),
        ("", "Paris", None, 0),
        ("the", "the", None, 1),
        ("New   York", "new york", None, 1),
        ("new-york", "new york", None, 0),
        ("42", "42", None, 1),
        ("forty two", "42", None, 0),
        ("Miss Kiley's house", "Miss Kiley's house", Some(&abc), 1),
        ("miss kileys house", "Miss Kiley's house", Some(&abc), 1),
        ("A", "Miss Kiley's house", Some(&abc), 1),
        ("(A)", "Miss Kiley's house", Some(&abc), 1),
        ("A)", "Miss Kiley's house", Some(&abc), 1),
        ("Answer: A", "Miss Kiley's house", Some(&abc), 1),
        ("The answer is A.", "Miss Kiley's house", Some(&abc), 1),
        ("Option B", "the garden", Some(&abc), 1),
        ("B", "Miss Kiley's house", Some(&abc), 0),
        ("a", "Miss Kiley's house", Some(&abc), 1),
        ("A or B", "Miss Kiley's house", Some(&abc), 0),
        ("Miss Kiley's house or the garden", "Miss Kiley's house", Some(&abc), 0),
        ("They met at Miss Kiley's house.", "Miss Kiley's house", Some(&abc), 1),
        ("It was in the garden", "the garden", Some(&abc), 1),
        ("C", "C", Some(&abc), 1),
        ("the forge", "C", Some(&abc), 1),
        ("the garden", "C", Some(&abc), 0),
        ("big house", "big house", Some(&ab), 1),
        ("house", "house", Some(&ab), 1),
        ("big house", "house", Some(&ab), 0),
        ("Yes.", "yes", Some(&yes_no), 1),
        ("No", "yes", Some(&yes_no), 0),
        ("D", "Miss Kiley's house", Some(&abc), 0),
    ];
    for (i, (cand, gold, options, label)) in table.iter().enumerate() {
        let got = exact_match(cand, gold, *options).score;
        ensure!(got == *label, "row {i}: {cand:?} vs {gold:?} scored {got}, labelled {label}");
    }
    let amb = exact_match("A or B", "Miss Kiley's house", Some(&abc));
    ensure!(amb.ambiguous, "`A or B` not flagged ambiguous");
    Ok(format!("{} hand-labelled cases match", table.len()))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    const WRAPS: usize = 4;
    for case in 0..500 {
        let item = |rng: &mut ChaCha8Rng| {
            let s = random_text(rng, 12);
            let extra = ["\"", "\\", ": ", "- ", "#", "'", "[x]", "```"];
            format!("{s}{}", extra.choose(rng).unwrap())
        };
        let qs: Vec<String> = (0..rng.gen_range(0..5)).map(|_| item(&mut rng)).collect();
        let gs: Vec<String> = (0..rng.gen_range(0..5)).map(|_| item(&mut rng)).collect();
        let is: Vec<String> = (0..rng.gen_range(0..5)).map(|_| item(&mut rng)).collect();
        let answer = item(&mut rng);
        let m = Memory::new(&qs)
            .append_gathered(&gs, Some(0), &RuleTokenizer)
            .append_inferred(&is, &RuleTokenizer)
            .with_answer(answer.trim());
        let text = serialize_memory(&m);
        let prose = "Here is the updated memory you asked for.";
        let wrapped = [
            text.clone(),
            format!("```yaml\n{text}\n```"),
            format!("```\n{text}\n```"),
            format!("{prose}\n\n{text}"),
        ];
        for (w, t) in wrapped.iter().enumerate() {
            let p = parse_memory_delta(t, &MemoryKey::ALL).map_err(|e| format!("case {case}/{w}: {e}"))?;
            let strs = |v: Vec<&str>| v.into_iter().map(str::to_string).collect::<Vec<_>>();
            ensure!(p[&MemoryKey::Questions] == strs(m.question_texts()), "case {case}/{w}: questions");
            ensure!(p[&MemoryKey::GatheredFacts] == strs(m.gathered_texts()), "case {case}/{w}: gathered");
            ensure!(p[&MemoryKey::InferredFacts] == strs(m.inferred_texts()), "case {case}/{w}: inferred");
            let a = p[&MemoryKey::Answer].first().cloned().unwrap_or_default();
            ensure!(a == m.answer, "case {case}/{w}: answer {a:?} vs {:?}", m.answer);
        }
    }
    Ok(format!("500 memories x {WRAPS} framings (plain, two fence styles, prose prefix) round-trip"))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let script = [
        ("planner", "questions:\n  - \"Who?\""),
        ("extract", "gathered_facts:\n  - \"Someone did it.\""),
        ("infer", "inferred_facts: []"),
        ("refine", "questions: []"),
        ("manager", "answer: \"someone\""),
        ("coa_worker", "Summary of the Source Text and Previous Context:\nSomeone did it."),
        ("tc_direct", "answer: \"someone\""),
    ]
    .iter()
    .map(|(r, t)| serde_json::json!({"role": r, "text": t, "repeat": true}).to_string())
    .collect::<Vec<_>>()
    .join("\n");
    fs::write(p("script.jsonl"), script).unwrap();
    let rows: Vec<String> = (0..3)
        .map(|i| {
            let ctx: Vec<String> = (0..50).map(|j| format!("Part {j} of record {i}.")).collect();
            serde_json::json!({"id": format!("r/{i}"), "context": ctx.join(" "), "input": "Who did it?", "answers": ["someone"]}).to_string()
        })
        .collect();
    fs::write(p("data.jsonl"), rows.join("\n")).unwrap();
    let sweep = |mode: &str, out: &str| -> Result<(), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_coma"))
            .env_clear()
            .current_dir(dir.path())
            .args(["bench", "--dataset", "data.jsonl", "--chunk-size", "80", "--out", out])
            .args(["--backend", "cassette", "--cassette", "tapes", "--cassette-mode", mode])
            .args(["--record-from", "scripted", "--script", "script.jsonl"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(o.status.success(), "{mode} sweep failed: {}", String::from_utf8_lossy(&o.stderr));
        Ok(())
    };
    sweep("record", "rec")?;
    sweep("replay", "a")?;
    sweep("replay", "b")?;
    let report = |out: &str| -> ScoreReport {
        serde_json::from_str(&fs::read_to_string(p(out).join("report.json")).unwrap()).unwrap()
    };
    ensure!(report("a").without_timing() == report("b").without_timing(), "replayed reports differ");
    ensure!(report("rec").without_timing().rows == report("a").without_timing().rows, "replay differs from recording");
    let mut traces = 0;
    for method in ["coma", "coa", "tc"] {
        for entry in fs::read_dir(p("a").join("traces").join(method)).unwrap() {
            let name = entry.unwrap().file_name();
            let read = |out: &str| {
                let text = fs::read_to_string(p(out).join("traces").join(method).join(&name)).unwrap();
                RunTrace::from_jsonl(&text).unwrap().without_timing().to_jsonl()
            };
            ensure!(read("a") == read("b"), "trace {method}/{name:?} differs between replays");
            traces += 1;
        }
    }
    ensure!(traces == 9, "expected 9 traces, found {traces}");
    Ok(format!("{traces} traces byte-identical across two replays (wall time zeroed); reports identical"))
}

const ENCOUNTER: &str = "Kiara met a pale young gentleman at Miss Kiley's house; they fought in the garden.";
const IDENTITY: &str = "Carter is the pale young gentleman Kiara once fought.";
const HISTORY_Q: &str = "What is Kiara's history of encounters before becoming roommates with Carter?";
const WHO_Q: &str = "Who is the pale young gentleman?";
const NIGERIA_Q: &str = "When did Kiara move to Nigeria?";
const MEETING: &str = "Kiara and Carter first met at Miss Kiley's house, where they fought in the garden.";

fn novel() -> String {
    let filler = |i: usize| match i % 4 {
        0 => format!("The marsh wind blew over the forge on evening {i}."),
        1 => format!("Stevie hammered iron while the kettle boiled {i} times."),
        2 => format!("Robyn kept the household accounts for week {i}."),
        _ => format!("Rain fell on the churchyard for day {i}."),
    };
    let mut parts: Vec<String> = Vec::new();
    parts.push("Kiara grew up on the marshes with her sister.".into());
    parts.push(ENCOUNTER.into());
    parts.extend((0..40).map(filler));
    parts.push("Kiara learned she would be raised as a gentleman in Nigeria.".into());
    parts.extend((40..80).map(filler));
    parts.push(IDENTITY.into());
    parts.push("Kiara and Carter became roommates in Nigeria.".into());
    parts.extend((80..90).map(filler));
    parts.join(" ")
}

fn relevant(s: &str) -> bool {
    ["Kiara", "Carter", "gentleman", "Nigeria"].iter().any(|k| s.contains(k))
}

/// A faithful model for the meeting question.
fn faithful(req: &LlmRequest) -> Option<String> {
    let memory = memory_section(&req.user);
    Some(match req.role {
        Role::Planner => yaml_list("questions", &[HISTORY_Q.into(), WHO_Q.into(), NIGERIA_Q.into()]),
        Role::Extract => yaml_list(
            "gathered_facts",
            &sentences(chunk_text(&req.user)).into_iter().filter(|s| relevant(s)).collect::<Vec<_>>(),
        ),
        Role::Infer => {
            let knows = memory.contains("pale young gentleman at Miss Kiley") && memory.contains("Carter is the pale young gentleman");
            yaml_list("inferred_facts", &if knows { vec![MEETING.to_string()] } else { vec![] })
        }
        Role::Refine => {
            let qs: Vec<String> = between(memory, "questions:", "gathered_facts:")
                .lines()
                .filter_map(|l| l.trim().strip_prefix("- "))
                .map(|q| serde_json::from_str::<String>(q).unwrap())
                .filter(|q| !(memory.contains(MEETING) && (q == HISTORY_Q || q == WHO_Q)))
                .collect();
            yaml_list("questions", &qs)
        }
        Role::Manager => {
            if memory.contains(MEETING) {
                "answer: \"At Miss Kiley's house, where they fought in the garden.\"".into()
            } else if req.user.contains("Summary of the Source Text") || req.user.contains("SUMMARY") {
                "answer: \"They had met once before; the text does not say where.\"".into()
            } else {
                "answer: \"unknown\"".into()
            }
        }
        Role::CoaWorker => {
            // Keeps only summary lines whose link to the question is explicit.
            let previous = between(&req.user, "PREVIOUS_SUMMARY:\n", "\n\nSOURCE_TEXT:");
            let source = between(&req.user, "SOURCE_TEXT:\n", "\n\nWrite an updated summary");
            let mut kept: Vec<String> = sentences(previous)
                .into_iter()
                .filter(|s| !s.starts_with("Summary of") && (s.contains("Carter") || s.contains("Nigeria")))
                .collect();
            kept.extend(sentences(source).into_iter().filter(|s| relevant(s)));
            format!("Summary of the Source Text and Previous Context:\n{}", kept.join(" "))
        }
        Role::TcDirect => "answer: \"unknown\"".into(),
    })
}

fn criterion_11() -> Outcome {
    let doc = novel();
    let query = "Where did Kiara and Carter first meet before becoming roommates in Nigeria?";
    let chunk_size = 120;
    let chunks = segment(&doc, chunk_size, &RuleTokenizer).unwrap();
    let first = chunks.iter().position(|c| c.text.contains(ENCOUNTER)).ok_or("encounter split")?;
    let r = chunks.iter().position(|c| c.text.contains(IDENTITY)).ok_or("identity split")?;
    ensure!(first == 0 && r >= 2, "scenario layout: encounter in chunk {first}, identity in {r}");

    let cfg = config("coma", chunk_size, 60);
    let out = run("coma", &cfg, &client_from(faithful), query, &doc)?;
    let snaps = snapshot_lists(&out.trace);
    let at = |phase: Phase, c: usize| {
        snaps
            .iter()
            .find(|(p, ch, _)| *p == phase && *ch == Some(c))
            .map(|s| &s.2)
            .ok_or(format!("no {phase:?} snapshot at chunk {c}"))
    };
    let has = |l: &Lists, k: MemoryKey, s: &str| l[&k].iter().any(|x| x == s);

    // (a) gathered at the first chunk, still present when the identity arrives
    let gathered_at = (0..chunks.len()).find(|&c| at(Phase::Extract, c).map(|l| has(l, MemoryKey::GatheredFacts, ENCOUNTER)).unwrap_or(false));
    ensure!(gathered_at == Some(0), "encounter first gathered at {gathered_at:?}");
    ensure!(has(at(Phase::Extract, r)?, MemoryKey::GatheredFacts, ENCOUNTER), "encounter evicted before chunk {r}");
    // (b) identity inference appears at chunk R and not before
    ensure!(!has(at(Phase::Extract, r)?, MemoryKey::InferredFacts, MEETING), "inference before Infer at {r}");
    ensure!(has(at(Phase::Infer, r)?, MemoryKey::InferredFacts, MEETING), "no inference at chunk {r}");
    for c in 0..r {
        ensure!(!has(at(Phase::Infer, c)?, MemoryKey::InferredFacts, MEETING), "inference already at chunk {c}");
    }
    // (c) resolved sub-question present before Refine at R, gone after
    ensure!(has(at(Phase::Infer, r)?, MemoryKey::Questions, HISTORY_Q), "sub-question gone before refine at {r}");
    ensure!(!has(at(Phase::Refine, r)?, MemoryKey::Questions, HISTORY_Q), "sub-question kept after refine at {r}");
    ensure!(has(at(Phase::Refine, r)?, MemoryKey::Questions, NIGERIA_Q), "unrelated sub-question dropped");
    // (d) answer names the place
    ensure!(out.answer.contains("Miss Kiley's house"), "answer {:?}", out.answer);

    // paired CoA run: captured at the first chunk, lost by the next summary
    let coa = run("coa", &cfg, &client_from(faithful), query, &doc)?;
    let summaries: Vec<(usize, &str)> = coa
        .trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Summary { chunk, text, .. } => Some((*chunk, text.as_str())),
            _ => None,
        })
        .collect();
    ensure!(summaries.len() == chunks.len(), "one summary per chunk expected");
    ensure!(summaries[0].1.contains("Miss Kiley's house"), "CoA never captured the encounter");
    let lost_at = summaries.iter().position(|(_, t)| !t.contains("Miss Kiley")).unwrap();
    let last = summaries.last().unwrap().1;
    ensure!(!last.contains("Miss Kiley") && !last.contains("fought in the garden"), "final CoA summary keeps the encounter");
    ensure!(!coa.answer.contains("Miss Kiley"), "CoA answer {:?}", coa.answer);
    Ok(format!(
        "coma: encounter gathered at chunk 0, identity inferred and sub-question resolved at chunk {r}, answer {:?}; coa dropped the encounter at chunk {lost_at}",
        out.answer
    ))
}

/// Parse-failure fuzzing.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Target {
    Plan,
    Extract(usize),
    Infer(usize),
    Refine(usize),
}

impl Target {
    fn role(self) -> Role {
        match self {
            Target::Plan => Role::Planner,
            Target::Extract(_) => Role::Extract,
            Target::Infer(_) => Role::Infer,
            Target::Refine(_) => Role::Refine,
        }
    }
    fn index(self) -> usize {
        match self {
            Target::Plan => 0,
            Target::Extract(c) | Target::Infer(c) | Target::Refine(c) => c,
        }
    }
    fn key(self) -> &'static str {
        match self {
            Target::Plan | Target::Refine(_) => "questions",
            Target::Extract(_) => "gathered_facts",
            Target::Infer(_) => "inferred_facts",
        }
    }
}

/// A reply in which no line is the expected key followed by a colon.
fn malformed(rng: &mut ChaCha8Rng, key: &str) -> String {
    loop {
        let cap = {
            let mut c = key.chars();
            c.next().map(|f| f.to_uppercase().collect::<String>() + c.as_str()).unwrap()
        };
        let pieces = vec![
            random_text(rng, 30),
            format!("{{\"{key}\": [\"{}\"]}}", random_text(rng, 5)),
            format!("{key} - {}", random_text(rng, 5)),
            format!("{cap}:\n  - \"x\""),
            format!("{key} :\n  - \"x\""),
            format!("{}:\n  - \"y\"", key.replace('_', " ")),
            format!("> {key}: [a]"),
            format!("* {key}: b"),
            format!("{key}"),
            "- dangling item".into(),
            "```yaml".into(),
            "```".into(),
            "answer: \"not this\"".into(),
            "facts:\n  - \"z\"".into(),
            "inferred_facts:\n  - \"wrong list\"".into(),
            "gathered_facts:\n  - \"wrong list\"".into(),
            "questions:\n  - \"wrong list\"".into(),
            String::new(),
            "I am unable to comply with the format.".into(),
        ];
        let n = rng.gen_range(1..5);
        let text = (0..n).map(|_| pieces.choose(rng).unwrap().clone()).collect::<Vec<_>>().join("\n");
        let hit = text.lines().any(|l| l.trim().starts_with(&format!("{key}:")));
        if !hit {
            return text;
        }
    }
}

fn criterion_12() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut by_kind: HashMap<&str, usize> = HashMap::new();
    let query = "What happened to the ship?";
    for case in 0..500 {
        let chunk = 40;
        let l = rng.gen_range(1..=5);
        let tokens = chunk * (l - 1) + rng.gen_range(10..=chunk);
        let doc = random_doc(&mut rng, tokens);
        let l = segment(&doc, chunk, &RuleTokenizer).unwrap().len();
        let pick = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
            0 => Target::Plan,
            1 => Target::Extract(rng.gen_range(0..l)),
            2 => Target::Infer(rng.gen_range(0..l)),
            _ => Target::Refine(rng.gen_range(0..l)),
        };
        let target = pick(&mut rng);
        // a second call that fails once, then recovers on the re-ask
        let flaky = Some(pick(&mut rng)).filter(|t| *t != target && rng.gen_bool(0.5));
        *by_kind
            .entry(match target {
                Target::Plan => "plan",
                Target::Extract(_) => "extract",
                Target::Infer(_) => "infer",
                Target::Refine(_) => "refine",
            })
            .or_default() += 1;

        let state = Mutex::new((ChaCha8Rng::seed_from_u64(rng.gen()), HashMap::<Role, usize>::new()));
        let client = client_from(move |req| {
            let mut g = state.lock().unwrap();
            let reask = req.user.ends_with(REASK_LINE);
            let counter = g.1.entry(req.role).or_insert(0);
            if !reask {
                *counter += 1;
            }
            let idx = *counter - 1;
            let is = |t: Option<Target>| t.is_some_and(|t| t.role() == req.role && t.index() == idx);
            if is(Some(target)) || (is(flaky) && !reask) {
                let key = if is(Some(target)) { target.key() } else { flaky.unwrap().key() };
                return Some(malformed(&mut g.0, key));
            }
            Some(match req.role {
                Role::Planner => yaml_list("questions", &["q1".into(), "q2".into(), "q3".into()]),
                Role::Extract => yaml_list("gathered_facts", &[format!("fact {idx} a"), format!("fact {idx} b")]),
                Role::Infer => yaml_list("inferred_facts", &[format!("inference {idx}")]),
                Role::Refine => yaml_list("questions", &[format!("open {idx}")]),
                Role::Manager => "answer: \"final\"".into(),
                _ => return None,
            })
        });
        let cfg = config("coma", chunk, chunk);
        let out = run("coma", &cfg, &client, query, &doc)?;
        ensure!(out.answer == "final", "case {case}: answer {:?}", out.answer);

        // independent replay of what memory must hold after each phase
        let mut questions: Vec<String> = if target == Target::Plan {
            vec![query.into()]
        } else {
            vec!["q1".into(), "q2".into(), "q3".into()]
        };
        let mut gathered: Vec<String> = Vec::new();
        let mut inferred: Vec<String> = Vec::new();
        let snaps = snapshot_lists(&out.trace);
        let expect = |phase: Phase, c: Option<usize>, q: &[String], g: &[String], i: &[String]| -> Result<(), String> {
            let (_, _, lists) = snaps
                .iter()
                .find(|(p, ch, _)| *p == phase && *ch == c)
                .ok_or(format!("case {case}: no {phase:?} snapshot at {c:?}"))?;
            ensure!(
                lists[&MemoryKey::Questions] == q && lists[&MemoryKey::GatheredFacts] == g && lists[&MemoryKey::InferredFacts] == i,
                "case {case} (target {target:?}, flaky {flaky:?}): {phase:?} at {c:?} holds {lists:?}"
            );
            Ok(())
        };
        expect(Phase::Plan, None, &questions, &gathered, &inferred)?;
        for c in 0..l {
            if target != Target::Extract(c) {
                gathered.extend([format!("fact {c} a"), format!("fact {c} b")]);
                // keep the newest facts that fit the budget
                while gathered.iter().map(|f| recount(f)).sum::<usize>() > chunk {
                    gathered.remove(0);
                }
            }
            expect(Phase::Extract, Some(c), &questions, &gathered, &inferred)?;
            if target != Target::Infer(c) {
                inferred.push(format!("inference {c}"));
            }
            expect(Phase::Infer, Some(c), &questions, &gathered, &inferred)?;
            if target != Target::Refine(c) {
                questions = vec![format!("open {c}")];
            }
            expect(Phase::Refine, Some(c), &questions, &gathered, &inferred)?;
        }

        let warnings: Vec<(Option<Role>, Option<usize>)> = out
            .trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Warning { role, chunk, .. } => Some((*role, *chunk)),
                _ => None,
            })
            .collect();
        let want_chunk = match target {
            Target::Plan => None,
            t => Some(t.index()),
        };
        ensure!(
            warnings == vec![(Some(target.role()), want_chunk)],
            "case {case}: warnings {warnings:?} for target {target:?}"
        );
        let stats = out.trace.stats();
        let reasks = cfg.retry_max as u64 + flaky.is_some() as u64;
        ensure!(
            stats.total_requests() == stats.total_calls() + reasks,
            "case {case}: {} requests for {} calls",
            stats.total_requests(),
            stats.total_calls()
        );
    }
    let mut kinds: Vec<_> = by_kind.into_iter().collect();
    kinds.sort();
    Ok(format!("500 fuzz cases {kinds:?}, fallback state and one warning each, no stray memory entries"))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("bench smoke over all methods", criterion_1),
        ("call-count formulas", criterion_2),
        ("memory budget invariant", criterion_3),
        ("prune oracle equivalence", criterion_4),
        ("segmentation round-trip", criterion_5),
        ("truncation contract", criterion_6),
        ("ROUGE-L oracle", criterion_7),
        ("exact-match table", criterion_8),
        ("memory serialization round-trip", criterion_9),
        ("cassette replay determinism", criterion_10),
        ("meeting-place scenario", criterion_11),
        ("parse-failure resilience", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
