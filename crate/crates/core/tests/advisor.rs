use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use kvtune::advisor::{
    apply_delta, approx_tokens, build_prompts, extract_options, Advisor, AdvisorError, IterationSummary,
    PromptContext, PromptError, PromptStrategy, RecordingAdvisor, RemoteAdvisor, RemoteConfig, ReplayAdvisor,
    ResultSummary, ScriptedAdvisor, WorkloadSummary, OUTPUT_FORMAT,
};
use kvtune::bench::ResourceLimits;
use kvtune::engine::{default_options, validate_options, value_is_valid, Catalog, OptionChange, OptionsDocument};
use kvtune::trace::Op;
use proptest::prelude::*;

fn limits() -> ResourceLimits {
    ResourceLimits {
        cpu_cores: 8,
        mem_bytes: 16 << 30,
    }
}

fn result(throughput: f64) -> ResultSummary {
    ResultSummary {
        throughput_ops_s: throughput,
        p99_us: 250.0,
        duration_s: 60.0,
        total_ops: (throughput * 60.0) as u64,
        cpu_percent: Some(310.0),
        rss_bytes: Some(1 << 30),
        write_stall_micros: 0,
        pending_compaction_bytes: 0,
        l0_files: 2,
        block_cache_hit_ratio: 0.9,
        op_ratios: [(Op::Get, 0.5), (Op::Put, 0.5)].into_iter().collect(),
    }
}

fn iteration(index: usize, throughput: f64) -> IterationSummary {
    IterationSummary {
        index,
        throughput_ops_s: throughput,
        p99_us: 200.0,
        accepted: true,
        changes: vec![OptionChange {
            section: "DBOptions".into(),
            name: "max_background_jobs".into(),
            old: Some(index.to_string()),
            new: Some((index + 1).to_string()),
        }],
        notes: Vec::new(),
    }
}

fn ctx(doc: OptionsDocument, history: Vec<IterationSummary>) -> PromptContext {
    PromptContext {
        current_options: doc,
        history,
        latest_result: Some(result(1000.0)),
        characterization: Some(WorkloadSummary {
            query_ratios: [(Op::Get, 0.5), (Op::Put, 0.5)].into_iter().collect(),
            details: vec!["value size: Fixed(400)".into()],
        }),
        limits: limits(),
        extra_directives: None,
    }
}

/// A document holding the first `n` catalog options at their defaults.
fn doc_with(n: usize) -> OptionsDocument {
    let catalog = Catalog::builtin();
    let mut doc = OptionsDocument::new();
    for meta in catalog.entries().iter().take(n) {
        let section = catalog.section_name_in(&doc, meta);
        doc.set(&section, &meta.name, &meta.default);
    }
    doc
}

fn section<'a>(text: &'a str, heading: &str) -> Option<&'a str> {
    let start = text.find(heading)?;
    let rest = &text[start + heading.len()..];
    Some(&rest[..rest.find("\n## ").unwrap_or(rest.len())])
}

fn options_shown(text: &str) -> Vec<String> {
    let block = section(text, "## Current options").unwrap();
    block
        .lines()
        .filter_map(|l| l.trim().split_once('=').map(|(k, _)| k.to_string()))
        .collect()
}

#[test]
fn subset_split_slices_fifty_five_options_into_three() {
    let doc = doc_with(55);
    let prompts = build_prompts(PromptStrategy::SubsetSplit, &ctx(doc, Vec::new()), Catalog::builtin(), 24_000).unwrap();
    assert_eq!(prompts.len(), 3);
    let shown: Vec<Vec<String>> = prompts.iter().map(|p| options_shown(&p.text)).collect();
    assert_eq!(shown.iter().map(Vec::len).collect::<Vec<_>>(), vec![20, 20, 15]);
    let mut all: Vec<String> = shown.concat();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 55);
    assert_eq!(prompts[1].label, "subset 2/3");
}

#[test]
fn latest_only_has_no_history() {
    let c = ctx(default_options(), vec![iteration(0, 900.0), iteration(1, 1000.0)]);
    let p = build_prompts(PromptStrategy::LatestOnly, &c, Catalog::builtin(), 24_000).unwrap();
    assert_eq!(p.len(), 1);
    assert!(!p[0].text.contains("## History"));
    assert!(p[0].text.contains("## Latest result"));
}

#[test]
fn full_history_lists_iterations_in_order() {
    let c = ctx(
        default_options(),
        vec![iteration(0, 900.0), iteration(1, 1000.0), iteration(2, 1100.0)],
    );
    let p = build_prompts(PromptStrategy::FullHistory, &c, Catalog::builtin(), 24_000).unwrap();
    let h = section(&p[0].text, "## History").unwrap();
    let pos: Vec<usize> = (0..3).map(|i| h.find(&format!("iteration {i}:")).unwrap()).collect();
    assert!(pos[0] < pos[1] && pos[1] < pos[2]);
    assert!(h.contains("max_background_jobs: 1 -> 2"));
}

#[test]
fn resource_grouped_prompts_keep_to_their_group() {
    let catalog = Catalog::builtin();
    let c = ctx(doc_with(catalog.len()), vec![iteration(0, 900.0)]);
    let prompts = build_prompts(PromptStrategy::ResourceGrouped, &c, catalog, 24_000).unwrap();
    assert!(prompts.len() >= 2);
    for p in &prompts {
        let group = p.label.strip_prefix("group ").unwrap();
        for name in options_shown(&p.text) {
            assert_eq!(catalog.get(&name).unwrap().resource_group.as_str(), group, "{name}");
        }
    }
}

#[test]
fn every_prompt_fits_and_ends_with_the_format() {
    let history: Vec<_> = (0..6).map(|i| iteration(i, 1000.0 + i as f64)).collect();
    let c = ctx(doc_with(Catalog::builtin().len()), history);
    for strategy in PromptStrategy::ALL {
        for budget in [3_000, 24_000] {
            let prompts = build_prompts(strategy, &c, Catalog::builtin(), budget).unwrap();
            for p in prompts {
                assert!(p.text.ends_with(OUTPUT_FORMAT), "{strategy}");
                assert!(approx_tokens(&p.text) <= budget, "{strategy} {}", approx_tokens(&p.text));
            }
        }
    }
}

#[test]
fn tight_budget_drops_oldest_history_first() {
    let history: Vec<_> = (0..200).map(|i| iteration(i, 1000.0 + i as f64)).collect();
    let c = ctx(default_options(), history);
    let p = build_prompts(PromptStrategy::FullHistory, &c, Catalog::builtin(), 4_000).unwrap();
    let text = &p[0].text;
    assert!(approx_tokens(text) <= 4_000);
    assert!(text.contains("older iterations omitted"));
    assert!(text.contains("iteration 199:"));
    assert!(!text.contains("iteration 0:"));
}

#[test]
fn impossible_budget_is_an_error() {
    let c = ctx(default_options(), Vec::new());
    let err = build_prompts(PromptStrategy::FullHistory, &c, Catalog::builtin(), 50).unwrap_err();
    assert!(matches!(err, PromptError::OverBudget { budget: 50, .. }));
}

#[test]
fn history_without_latest_result_is_incomplete() {
    let mut c = ctx(default_options(), vec![iteration(0, 1.0)]);
    c.latest_result = None;
    let err = build_prompts(PromptStrategy::FullHistory, &c, Catalog::builtin(), 24_000).unwrap_err();
    assert!(matches!(err, PromptError::ContextIncomplete(_)));
}

#[test]
fn prompts_are_deterministic() {
    let c = ctx(default_options(), vec![iteration(0, 900.0)]);
    for strategy in PromptStrategy::ALL {
        let a = build_prompts(strategy, &c, Catalog::builtin(), 24_000).unwrap();
        let b = build_prompts(strategy, &c, Catalog::builtin(), 24_000).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn scripted_adds_jobs_on_stalls() {
    let mut c = ctx(default_options(), Vec::new());
    let mut r = result(1000.0);
    r.write_stall_micros = 5_000_000;
    c.latest_result = Some(r);
    let p = build_prompts(PromptStrategy::FullHistory, &c, Catalog::builtin(), 24_000).unwrap();
    let raw = ScriptedAdvisor::default().complete(&p[0].text).unwrap();
    let resp = extract_options(&raw, &default_options(), Catalog::builtin());
    let jobs = resp.extracted_delta["DBOptions"]["max_background_jobs"].parse::<u32>().unwrap();
    assert!(jobs > 2 && jobs <= 8, "{jobs}");
}

#[test]
fn replay_answers_recorded_prompts_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = RecordingAdvisor::new(|p: &str| Ok::<_, AdvisorError>(format!("echo {}", p.len())), dir.path()).unwrap();
    assert_eq!(rec.complete("hello").unwrap(), "echo 5");
    let mut replay = ReplayAdvisor::new(dir.path());
    assert_eq!(replay.complete("hello").unwrap(), "echo 5");
    match replay.complete("other") {
        Err(AdvisorError::Unavailable(msg)) => assert!(msg.contains("no recorded response")),
        other => panic!("{other:?}"),
    }
}

struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<(String, String)>>>,
    handle: JoinHandle<()>,
}

/// Serves one scripted `(status, body)` per connection, recording each
/// request's authorization header and body.
fn mock(responses: Vec<(u16, String)>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut auth, mut len) = (String::new(), 0usize);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap_or((line, ""));
                match k.to_ascii_lowercase().as_str() {
                    "authorization" => auth = v.trim().to_string(),
                    "content-length" => len = v.trim().parse().unwrap(),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.lock().unwrap().push((auth, String::from_utf8(buf).unwrap()));
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    Mock { url, requests, handle }
}

fn remote(url: &str) -> RemoteAdvisor {
    let mut cfg = RemoteConfig::new(url, "test-model");
    cfg.initial_backoff = Duration::from_millis(1);
    cfg.max_retries = 2;
    RemoteAdvisor::with_key(cfg, "sekrit".into()).unwrap()
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

#[test]
fn remote_returns_the_first_choice() {
    let m = mock(vec![(200, completion("[DBOptions]\n  max_background_jobs=4"))]);
    let reply = remote(&m.url).complete("tune me").unwrap();
    assert_eq!(reply, "[DBOptions]\n  max_background_jobs=4");
    m.handle.join().unwrap();
    let reqs = m.requests.lock().unwrap();
    assert_eq!(reqs[0].0, "Bearer sekrit");
    let body: serde_json::Value = serde_json::from_str(&reqs[0].1).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][1]["content"], "tune me");
    assert_eq!(body["messages"][1]["role"], "user");
}

#[test]
fn remote_auth_failure_is_not_retried() {
    let m = mock(vec![(401, "{}".into())]);
    assert!(matches!(remote(&m.url).complete("x"), Err(AdvisorError::Auth(_))));
    m.handle.join().unwrap();
    assert_eq!(m.requests.lock().unwrap().len(), 1);
}

#[test]
fn remote_retries_server_errors() {
    let m = mock(vec![(500, "{}".into()), (429, "{}".into()), (200, completion("ok"))]);
    assert_eq!(remote(&m.url).complete("x").unwrap(), "ok");
    m.handle.join().unwrap();
    assert_eq!(m.requests.lock().unwrap().len(), 3);
}

#[test]
fn remote_gives_up_after_max_retries() {
    let m = mock(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    assert!(matches!(remote(&m.url).complete("x"), Err(AdvisorError::Unavailable(_))));
    m.handle.join().unwrap();
    assert_eq!(m.requests.lock().unwrap().len(), 3);
}

#[test]
fn remote_client_error_is_unavailable_without_retry() {
    let m = mock(vec![(400, "{}".into())]);
    assert!(matches!(remote(&m.url).complete("x"), Err(AdvisorError::Unavailable(_))));
    m.handle.join().unwrap();
    assert_eq!(m.requests.lock().unwrap().len(), 1);
}

#[test]
fn remote_unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = remote(&format!("http://127.0.0.1:{port}/v1")).complete("x");
    assert!(matches!(err, Err(AdvisorError::Unavailable(_))));
}

fn line_strategy() -> impl Strategy<Value = String> {
    let names: Vec<String> = Catalog::builtin().entries().iter().map(|m| m.name.clone()).collect();
    let name = prop_oneof![
        proptest::sample::select(names),
        "[a-z_]{1,20}".prop_map(String::from),
    ];
    let value = prop_oneof![
        "-?[0-9]{1,12}".prop_map(String::from),
        "[0-9]{1,4}(KB|MB|GB|k|M)".prop_map(String::from),
        "(true|false|yes|0|1|kLZ4Compression|kZSTD|bloomfilter:10:false|nullptr)".prop_map(String::from),
        "[ -~]{0,12}".prop_map(String::from),
    ];
    prop_oneof![
        (name.clone(), value.clone()).prop_map(|(n, v)| format!("  {n}={v}")),
        (name, value).prop_map(|(n, v)| format!("- `{n}` = {v} # why not")),
        "\\[(DBOptions|CFOptions \"default\"|TableOptions/BlockBasedTable \"default\"|Nonsense)\\]".prop_map(String::from),
        "[ -~]{0,40}".prop_map(String::from),
        Just("```ini".to_string()),
        Just("```".to_string()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn extracted_deltas_always_validate(lines in proptest::collection::vec(line_strategy(), 0..30)) {
        let raw = lines.join("\n");
        let base = default_options();
        let catalog = Catalog::builtin();
        let resp = extract_options(&raw, &base, catalog);
        for opts in resp.extracted_delta.values() {
            for (name, value) in opts {
                let meta = catalog.get(name).expect("known option");
                prop_assert!(value_is_valid(meta, value), "{name}={value}");
            }
        }
        let applied = apply_delta(&base, &resp.extracted_delta);
        // the only violations left are those the user's file already had
        let names = |d: &OptionsDocument| -> Vec<String> {
            validate_options(d, catalog).violations.into_iter().map(|v| v.name).collect()
        };
        let before = names(&base);
        for name in names(&applied) {
            prop_assert!(before.contains(&name), "{name}");
        }
        // nothing outside the delta moves
        let changed: BTreeMap<_, _> = kvtune::engine::diff_options(&base, &applied)
            .into_iter()
            .map(|c| (c.name, c.new))
            .collect();
        prop_assert_eq!(changed.len(), kvtune::advisor::delta_len(&resp.extracted_delta));
    }
}
