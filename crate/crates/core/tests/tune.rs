use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use kvtune::advisor::{
    Advisor, AdvisorError, PromptContext, PromptStrategy, RecordingAdvisor, ReplayAdvisor, ScriptedAdvisor,
};
use kvtune::bench::{run_benchmark, BenchConfig, NoObserver, ResourceLimits};
use kvtune::characterize::DistributionFamily;
use kvtune::engine::{default_options, diff_options, Catalog, Engine, EngineError, OptionChange, OptionsDocument, SimulatedEngine};
use kvtune::trace::Op;
use kvtune::tune::{
    fine_tune, read_journal, realtime_tick, tuning_loop, Budget, DriftBaseline, EngineFactory, Journal,
    RealtimeEvent, RealtimeTuner, RealtimeTunerConfig, ShiftEvent, SimulatedFactory, StopReason, TuneConfig,
    TuneError, TuningIteration,
};
use kvtune::workload::{WorkloadPhase, WorkloadSpec, WorkloadType};

fn phase(start: f64, duration: f64, ratios: &[(Op, f64)], rate: Option<u64>) -> WorkloadPhase {
    let query_ratios: BTreeMap<Op, f64> = ratios.iter().copied().collect();
    WorkloadPhase {
        start_time_s: start,
        duration_s: duration,
        workload_type: WorkloadType::for_ratios(&query_ratios),
        query_ratios,
        key_size: DistributionFamily::Fixed { value: 16.0 },
        value_size: DistributionFamily::Fixed { value: 400.0 },
        value_size_stddev: 0.0,
        access_dist: DistributionFamily::Uniform { min: 1.0, max: 20_000.0 },
        key_space: 20_000,
        client_threads: 8,
        target_ops_per_s: rate,
        scan_length: 10,
    }
}

fn spec(phases: Vec<WorkloadPhase>) -> WorkloadSpec {
    WorkloadSpec {
        spec_version: 1,
        name: "tune-test".into(),
        seed: 5,
        phases,
    }
}

fn write_heavy(duration: f64) -> WorkloadSpec {
    spec(vec![phase(0.0, duration, &[(Op::Put, 0.9), (Op::Get, 0.1)], None)])
}

fn cfg(max_iterations: usize) -> TuneConfig {
    TuneConfig {
        budget: Budget {
            max_iterations,
            ..Budget::default()
        },
        bench: BenchConfig {
            limits: ResourceLimits {
                cpu_cores: 8,
                mem_bytes: 8 << 30,
            },
            ..BenchConfig::default()
        },
        ..TuneConfig::default()
    }
}

fn no_sink() -> impl FnMut(&TuningIteration) -> Result<(), kvtune::tune::JournalError> {
    |_| Ok(())
}

fn measured(spec: &WorkloadSpec, doc: &OptionsDocument) -> f64 {
    let e = SimulatedFactory::default().open(doc).unwrap();
    run_benchmark(spec, e.as_ref(), &BenchConfig::default(), &mut NoObserver)
        .unwrap()
        .overall_throughput_ops_s
}

fn fixed(reply: &'static str) -> impl Advisor {
    move |_: &str| Ok::<_, AdvisorError>(reply.to_string())
}

#[test]
fn single_iteration_returns_initial() {
    let s = write_heavy(3.0);
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(1),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best_options, default_options());
    assert_eq!(out.best_index, Some(0));
    assert_eq!(out.stop, StopReason::IterationBudget);
    assert_eq!(out.history[0].result.overall_throughput_ops_s, measured(&s, &default_options()));
}

#[test]
fn zero_budget_is_an_error() {
    let s = write_heavy(1.0);
    let err = tuning_loop(
        &s,
        &default_options(),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(0),
        Vec::new(),
        &mut no_sink(),
    );
    assert!(matches!(err, Err(TuneError::InvalidBudget)));
}

#[test]
fn scripted_loop_never_ends_below_initial() {
    let s = write_heavy(4.0);
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(4),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    let initial = out.history[0].result.overall_throughput_ops_s;
    let best = out.history[out.best_index.unwrap()].result.overall_throughput_ops_s;
    assert!(best >= initial);
    // the write rules fire on this workload
    assert!(best > initial * 1.2, "{best} vs {initial}");
    assert!(out.history[1].delta_from_prev.iter().any(|c| c.name == "write_buffer_size"));
    for it in &out.history {
        assert!(!it.accepted || it.result.halted.is_none());
    }
}

#[test]
fn invalid_deltas_leave_initial_as_best() {
    let s = write_heavy(2.0);
    let mut advisor = fixed("```ini\n[DBOptions]\n  warp_drive=on\n  max_background_jobs=lots\n```\n");
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut advisor,
        &mut SimulatedFactory::default(),
        &cfg(4),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    assert_eq!(out.history.len(), 4);
    assert!(out.history[1..].iter().all(|it| !it.accepted));
    assert_eq!(out.best_options, default_options());
    assert_eq!(out.best_index, Some(0));
}

#[test]
fn next_prompt_explains_unusable_response() {
    let s = write_heavy(1.0);
    let prompts = Arc::new(Mutex::new(Vec::<String>::new()));
    let seen = prompts.clone();
    let mut advisor = move |p: &str| {
        seen.lock().unwrap().push(p.to_string());
        Ok::<_, AdvisorError>("```ini\n[DBOptions]\n  warp_drive=on\n```\n".to_string())
    };
    tuning_loop(
        &s,
        &default_options(),
        &mut advisor,
        &mut SimulatedFactory::default(),
        &cfg(3),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    let prompts = prompts.lock().unwrap();
    assert!(!prompts[0].contains("## Notice"));
    assert!(prompts[1].contains("## Notice"));
    assert!(prompts[1].contains("warp_drive"));
}

/// Halves the simulated engine's speed from `from_s` onwards, on every run
/// whose options differ from the defaults.
struct SlowChanged {
    from_s: f64,
}

impl EngineFactory for SlowChanged {
    fn open(&mut self, options: &OptionsDocument) -> Result<Box<dyn Engine>, EngineError> {
        let e = SimulatedEngine::open(options, Arc::new(Catalog::builtin().clone()))?;
        if *options != default_options() {
            e.inject_slowdown(self.from_s * 1e6, 2.0);
        }
        Ok(Box::new(e))
    }
}

const NEUTRAL: &str = "```ini\n[DBOptions]\n  stats_dump_period_sec=300\n```\n";

fn flagged_run(advisor: &mut dyn Advisor) -> (Vec<TuningIteration>, Vec<String>) {
    let s = write_heavy(10.0);
    let prompts = Arc::new(Mutex::new(Vec::<String>::new()));
    let seen = prompts.clone();
    let mut spy = move |p: &str| {
        seen.lock().unwrap().push(p.to_string());
        advisor.complete(p)
    };
    let mut c = cfg(3);
    c.max_inner = 0;
    let mut f = SlowChanged { from_s: 6.0 };
    let out = tuning_loop(&s, &default_options(), &mut spy, &mut f, &c, Vec::new(), &mut no_sink()).unwrap();
    let p = prompts.lock().unwrap().clone();
    (out.history, p)
}

#[test]
fn step_drop_rejects_the_iteration() {
    let (history, prompts) = flagged_run(&mut fixed(NEUTRAL));
    let it = &history[1];
    assert!(!it.accepted);
    let note = it.notes.iter().find(|n| n.starts_with("degradation: ")).expect("degradation note");
    assert!(note.contains("t="), "{note}");
    // slowdown from t=6s; the window ending at 7s is the first slowed one
    let halted_at = it.result.duration_s;
    assert!((7.0..=8.0).contains(&halted_at), "{halted_at}");
    assert_eq!(it.result.halted.as_deref().map(|h| h.contains("fell below")), Some(true));
    let notice = &prompts[1];
    assert!(notice.contains("## Notice"));
    assert!(notice.contains("stats_dump_period_sec: 600 -> 300"), "{notice}");
    assert_ne!(history.iter().rev().find(|i| i.accepted).unwrap().index, 1);
}

#[test]
fn flagged_trajectory_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = RecordingAdvisor::new(fixed(NEUTRAL), dir.path()).unwrap();
    let (first, _) = flagged_run(&mut rec);
    let mut replay = ReplayAdvisor::new(dir.path());
    let (second, _) = flagged_run(&mut replay);
    assert_eq!(first, second);
}

#[test]
fn unavailable_advisor_retries_once_then_stops() {
    let s = write_heavy(1.0);
    let calls = Arc::new(Mutex::new(0));
    let n = calls.clone();
    let mut advisor = move |_: &str| {
        *n.lock().unwrap() += 1;
        Err::<String, _>(AdvisorError::Unavailable("down".into()))
    };
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut advisor,
        &mut SimulatedFactory::default(),
        &cfg(5),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    assert_eq!(*calls.lock().unwrap(), 2);
    assert!(matches!(out.stop, StopReason::AdvisorUnavailable(_)));
    assert_eq!(out.best_options, default_options());
}

#[test]
fn auth_failure_stops_without_retry() {
    let s = write_heavy(1.0);
    let calls = Arc::new(Mutex::new(0));
    let n = calls.clone();
    let mut advisor = move |_: &str| {
        *n.lock().unwrap() += 1;
        Err::<String, _>(AdvisorError::Auth("bad key".into()))
    };
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut advisor,
        &mut SimulatedFactory::default(),
        &cfg(5),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    assert_eq!(*calls.lock().unwrap(), 1);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn engine_failure_is_rejected_and_rolled_back() {
    let s = write_heavy(1.0);
    let mut factory = |doc: &OptionsDocument| -> Result<Box<dyn Engine>, EngineError> {
        if *doc != default_options() {
            return Err(EngineError::Open("refused".into()));
        }
        Ok(Box::new(SimulatedEngine::open(doc, Arc::new(Catalog::builtin().clone()))?))
    };
    let mut advisor = fixed(NEUTRAL);
    let out = tuning_loop(&s, &default_options(), &mut advisor, &mut factory, &cfg(3), Vec::new(), &mut no_sink())
        .unwrap();
    assert!(!out.history[1].accepted);
    assert!(out.history[1].notes.iter().any(|n| n.contains("refused")));
    // the next proposal starts again from the defaults
    assert_eq!(out.history[2].delta_from_prev.len(), 1);
    assert_eq!(out.best_options, default_options());
}

#[test]
fn interrupt_stops_after_the_current_iteration() {
    let s = write_heavy(1.0);
    let stop = Arc::new(AtomicBool::new(false));
    let mut c = cfg(5);
    c.bench.stop = Some(stop.clone());
    let flag = stop.clone();
    let mut sink = move |_: &TuningIteration| {
        flag.store(true, Ordering::SeqCst);
        Ok(())
    };
    let out = tuning_loop(
        &s,
        &default_options(),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &c,
        Vec::new(),
        &mut sink,
    )
    .unwrap();
    assert_eq!(out.stop, StopReason::Interrupted);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn journal_resume_matches_an_uninterrupted_run() {
    let s = write_heavy(2.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let run = |max: usize, resume: Vec<TuningIteration>, journal: &mut Journal| {
        let mut sink = |it: &TuningIteration| journal.write(it);
        let mut c = cfg(max);
        c.max_inner = 1;
        tuning_loop(
            &s,
            &default_options(),
            &mut ScriptedAdvisor::default(),
            &mut SimulatedFactory::default(),
            &c,
            resume,
            &mut sink,
        )
        .unwrap()
    };
    let mut j = Journal::create(&path).unwrap();
    run(2, Vec::new(), &mut j);
    let partial = read_journal(&path).unwrap();
    assert_eq!(partial.len(), 2);
    let mut j = Journal::append(&path).unwrap();
    let resumed = run(4, partial, &mut j);

    let other = dir.path().join("fresh.jsonl");
    let mut j = Journal::create(&other).unwrap();
    let fresh = run(4, Vec::new(), &mut j);
    assert_eq!(resumed.history, fresh.history);
    assert_eq!(read_journal(&path).unwrap(), fresh.history);
}

#[test]
fn resume_from_other_initial_options_is_refused() {
    let s = write_heavy(1.0);
    let first = tuning_loop(
        &s,
        &default_options(),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(1),
        Vec::new(),
        &mut no_sink(),
    )
    .unwrap();
    let mut other = default_options();
    other.set("DBOptions", "max_background_jobs", "4");
    let err = tuning_loop(
        &s,
        &other,
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(3),
        first.history,
        &mut no_sink(),
    );
    assert!(matches!(err, Err(TuneError::Resume(_))));
}

fn change(name: &str, old: &str, new: &str) -> OptionChange {
    OptionChange {
        section: "CFOptions \"default\"".into(),
        name: name.into(),
        old: Some(old.into()),
        new: Some(new.into()),
    }
}

fn ctx(doc: &OptionsDocument) -> PromptContext {
    PromptContext {
        current_options: doc.clone(),
        history: Vec::new(),
        latest_result: None,
        characterization: None,
        limits: ResourceLimits {
            cpu_cores: 8,
            mem_bytes: 8 << 30,
        },
        extra_directives: None,
    }
}

#[test]
fn fine_tune_rejects_empty_subset() {
    let s = write_heavy(1.0);
    let doc = default_options();
    let err = fine_tune(
        &s,
        &[],
        &doc,
        &ctx(&doc),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(3),
        3,
    );
    assert!(matches!(err, Err(TuneError::EmptySubset)));
}

#[test]
fn fine_tune_with_no_steps_returns_entry() {
    let s = write_heavy(1.0);
    let doc = default_options();
    let out = fine_tune(
        &s,
        &[change("write_buffer_size", "1", "67108864")],
        &doc,
        &ctx(&doc),
        &mut ScriptedAdvisor::default(),
        &mut SimulatedFactory::default(),
        &cfg(3),
        0,
    )
    .unwrap();
    assert_eq!(out.options, doc);
    assert!(out.steps.is_empty());
}

#[test]
fn fine_tune_never_returns_worse_than_entry() {
    let s = write_heavy(4.0);
    let short = s.scaled_duration(0.25);
    for wbs in ["4194304", "16777216", "67108864", "268435456"] {
        let mut entry = default_options();
        entry.set("CFOptions \"default\"", "write_buffer_size", wbs);
        let out = fine_tune(
            &s,
            &[change("write_buffer_size", "67108864", wbs)],
            &entry,
            &ctx(&entry),
            &mut ScriptedAdvisor::default(),
            &mut SimulatedFactory::default(),
            &cfg(3),
            3,
        )
        .unwrap();
        let before = measured(&short, &entry);
        let after = measured(&short, &out.options);
        assert!(after >= before, "{wbs}: {after} < {before}");
        // only the subset may move
        for c in diff_options(&entry, &out.options) {
            assert_eq!(c.name, "write_buffer_size");
        }
        let mut incumbent = before;
        for step in &out.steps {
            if step.kept {
                let t = step.throughput_ops_s.unwrap();
                assert!(t > incumbent);
                incumbent = t;
            }
        }
    }
}

fn shift(observed: &[(Op, f64)], baseline: &[(Op, f64)]) -> RealtimeEvent {
    RealtimeEvent::Shift(ShiftEvent {
        ts_s: 90.0,
        observed_ratios: observed.iter().copied().collect(),
        baseline_ratios: baseline.iter().copied().collect(),
        observed_mean_value_size: None,
        baseline_mean_value_size: None,
        reasons: vec!["read fraction moved".into()],
    })
}

#[test]
fn realtime_tick_filters_immutable_options() {
    let doc = default_options();
    let e = SimulatedEngine::open(&doc, Arc::new(Catalog::builtin().clone())).unwrap();
    let mut current = doc.clone();
    let mut advisor = fixed(
        "```ini\n[CFOptions \"default\"]\n  num_levels=4\n  write_buffer_size=134217728\n```\n",
    );
    let applied = realtime_tick(
        &shift(&[(Op::Put, 1.0)], &[(Op::Get, 0.5), (Op::Put, 0.5)]),
        &mut advisor,
        &e,
        Catalog::builtin(),
        &mut current,
        None,
        &ResourceLimits::default(),
    )
    .unwrap();
    assert_eq!(applied.changes.len(), 1);
    assert_eq!(applied.changes[0].name, "write_buffer_size");
    assert!(applied.violations.iter().any(|v| v.name == "num_levels"));
    for c in &applied.changes {
        assert!(Catalog::builtin().is_mutable(&c.name));
    }
    assert_eq!(e.options().get("CFOptions \"default\"", "num_levels"), doc.get("CFOptions \"default\"", "num_levels"));
    assert_eq!(e.options().get("CFOptions \"default\"", "write_buffer_size"), Some("134217728"));
}

#[test]
fn read_shift_raises_cache() {
    let doc = default_options();
    let e = SimulatedEngine::open(&doc, Arc::new(Catalog::builtin().clone())).unwrap();
    let mut current = doc.clone();
    let applied = realtime_tick(
        &shift(&[(Op::Get, 0.85), (Op::Put, 0.15)], &[(Op::Get, 0.5), (Op::Put, 0.5)]),
        &mut ScriptedAdvisor::default(),
        &e,
        Catalog::builtin(),
        &mut current,
        None,
        &ResourceLimits {
            cpu_cores: 8,
            mem_bytes: 8 << 30,
        },
    )
    .unwrap();
    let cache = applied.changes.iter().find(|c| c.name == "block_cache_size").expect("cache change");
    let new: u64 = cache.new.as_deref().unwrap().parse().unwrap();
    assert!(new > 8 << 20);
}

#[test]
fn no_drift_means_no_advisor_call() {
    let s = spec(vec![phase(0.0, 20.0, &[(Op::Get, 0.5), (Op::Put, 0.5)], Some(5000))]);
    let calls = Arc::new(Mutex::new(0));
    let n = calls.clone();
    let mut advisor = move |_: &str| {
        *n.lock().unwrap() += 1;
        Ok::<_, AdvisorError>(String::new())
    };
    let e = SimulatedEngine::open(&default_options(), Arc::new(Catalog::builtin().clone())).unwrap();
    let catalog = Catalog::builtin();
    let rc = RealtimeTunerConfig {
        tick_period_s: 5.0,
        ..RealtimeTunerConfig::default()
    };
    let mut tuner = RealtimeTuner::new(
        rc,
        DriftBaseline::from(&s.phases[0]),
        &mut advisor,
        catalog,
        default_options(),
        ResourceLimits::default(),
    );
    run_benchmark(&s, &e, &BenchConfig::default(), &mut tuner).unwrap();
    assert_eq!(tuner.ticks, 4);
    assert!(tuner.events.is_empty());
    drop(tuner);
    assert_eq!(*calls.lock().unwrap(), 0);
}

#[test]
fn strategies_share_the_loop() {
    let s = write_heavy(2.0);
    for strategy in PromptStrategy::ALL {
        let mut c = cfg(2);
        c.strategy = strategy;
        c.max_inner = 0;
        let out = tuning_loop(
            &s,
            &default_options(),
            &mut ScriptedAdvisor::default(),
            &mut SimulatedFactory::default(),
            &c,
            Vec::new(),
            &mut no_sink(),
        )
        .unwrap();
        let expected = match strategy {
            PromptStrategy::SubsetSplit | PromptStrategy::ResourceGrouped => 2..=8,
            _ => 1..=1,
        };
        assert!(expected.contains(&out.history[1].advisor_prompt_digests.len()), "{strategy}");
    }
}
