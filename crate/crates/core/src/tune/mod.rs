//! Iterative tuning: the outer advisor loop, the inner fine-tuning loop, and
//! the observers that run alongside each benchmark.

mod flagger;
mod journal;
mod realtime;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{
    apply_delta, build_prompts, call_advisor, degradation_notice, delta_changes, extract_options, format_mix,
    merge_deltas, prompt_digest, Advisor, AdvisorError, IterationSummary, Prompt, PromptContext, PromptError,
    PromptStrategy, ResultSummary, WorkloadSummary, DEFAULT_TOKEN_BUDGET, OUTPUT_FORMAT, PROMPT_TEMPLATE_VERSION,
};
use crate::bench::{
    options_digest, run_benchmark, BenchConfig, BenchError, BenchObserver, BenchmarkResult, Control,
    TelemetrySnapshot,
};
use crate::engine::{
    diff_options, Catalog, Engine, EngineError, OptionChange, OptionsDocument, SimulatedEngine,
};
use crate::workload::{validate_spec, SpecViolation, WorkloadSpec};

pub use flagger::{
    throughput_flagger, DegradationEvent, FlaggerConfig, FlaggerObserver, FlaggerState,
    DEFAULT_DEGRADATION_THRESHOLD, DEFAULT_ROLLING_WINDOWS, DEFAULT_WARMUP_WINDOWS,
};
pub use journal::{
    iteration_line, parse_journal, read_journal, report_csv, report_text, Journal, JournalError,
    REPORT_CSV_HEADER,
};
pub use realtime::{
    detect_underutilization, drift_detect, mutable_view, observed_mix, realtime_prompt, realtime_tick, DriftBaseline,
    RealtimeApplied, RealtimeEvent, RealtimeTuner, RealtimeTunerConfig, ShiftEvent, DEFAULT_RATIO_SHIFT_THRESHOLD,
    DEFAULT_SIZE_SHIFT_THRESHOLD_FRAC, DEFAULT_TICK_PERIOD_S,
};

pub const DEFAULT_MAX_INNER: usize = 3;
pub const DEFAULT_FINE_TUNE_DURATION_FRAC: f64 = 0.25;
pub const DEFAULT_CONVERGENCE_FRAC: f64 = 0.02;
pub const DEFAULT_CONVERGENCE_ITERATIONS: usize = 3;

/// Note prefix marking an iteration stopped by the flagger.
const DEGRADATION_NOTE: &str = "degradation: ";
/// Note prefix marking an iteration whose engine failed.
const FAILURE_NOTE: &str = "engine failure: ";
/// Note prefix marking an iteration skipped because every proposed change
/// was invalid.
const UNUSABLE_NOTE: &str = "unusable advisor response: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningIteration {
    pub index: usize,
    #[serde(with = "options_text")]
    pub options: OptionsDocument,
    pub result: BenchmarkResult,
    /// Changes from the options the proposal started from, which are those of
    /// the last accepted iteration.
    pub delta_from_prev: Vec<OptionChange>,
    pub advisor_prompt_digests: Vec<String>,
    pub accepted: bool,
    pub notes: Vec<String>,
}

mod options_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::engine::OptionsDocument;

    pub fn serialize<S: Serializer>(doc: &OptionsDocument, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&doc.emit())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<OptionsDocument, D::Error> {
        let text = String::deserialize(d)?;
        OptionsDocument::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl TuningIteration {
    fn summary(&self) -> IterationSummary {
        IterationSummary {
            index: self.index,
            throughput_ops_s: self.result.overall_throughput_ops_s,
            p99_us: self.result.overall_p99_us,
            accepted: self.accepted,
            changes: self.delta_from_prev.clone(),
            notes: self.notes.clone(),
        }
    }
}

/// Highest throughput among accepted iterations; ties go to the lower p99,
/// then to the earlier iteration.
pub fn best_iteration(history: &[TuningIteration]) -> Option<&TuningIteration> {
    let mut best: Option<&TuningIteration> = None;
    for it in history.iter().filter(|it| it.accepted) {
        let better = match best {
            None => true,
            Some(b) => {
                let (t, bt) = (it.result.overall_throughput_ops_s, b.result.overall_throughput_ops_s);
                t > bt || (t == bt && it.result.overall_p99_us < b.result.overall_p99_us)
            }
        };
        if better {
            best = Some(it);
        }
    }
    best
}

pub trait EngineFactory {
    fn open(&mut self, options: &OptionsDocument) -> Result<Box<dyn Engine>, EngineError>;
}

impl<F> EngineFactory for F
where
    F: FnMut(&OptionsDocument) -> Result<Box<dyn Engine>, EngineError>,
{
    fn open(&mut self, options: &OptionsDocument) -> Result<Box<dyn Engine>, EngineError> {
        self(options)
    }
}

/// Opens a fresh simulated engine per run.
#[derive(Debug, Clone)]
pub struct SimulatedFactory {
    catalog: Arc<Catalog>,
}

impl Default for SimulatedFactory {
    fn default() -> Self {
        SimulatedFactory {
            catalog: Arc::new(Catalog::builtin().clone()),
        }
    }
}

impl EngineFactory for SimulatedFactory {
    fn open(&mut self, options: &OptionsDocument) -> Result<Box<dyn Engine>, EngineError> {
        Ok(Box::new(SimulatedEngine::open(options, self.catalog.clone())?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub max_iterations: usize,
    pub max_wall_s: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_iterations: 10,
            max_wall_s: 3600.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneConfig {
    pub strategy: PromptStrategy,
    pub budget: Budget,
    /// Template for every benchmark run; the options digest is filled in per run.
    pub bench: BenchConfig,
    pub catalog: Arc<Catalog>,
    pub token_budget: usize,
    /// `None` disables the flagger.
    pub flagger: Option<FlaggerConfig>,
    pub max_inner: usize,
    pub fine_tune_duration_frac: f64,
    pub convergence_frac: f64,
    pub convergence_iterations: usize,
    /// Workload description for prompts; derived from the workload when absent.
    pub workload: Option<WorkloadSummary>,
    /// Real-time adjustment during each run; `None` disables it.
    pub realtime: Option<RealtimeTunerConfig>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            strategy: PromptStrategy::FullHistory,
            budget: Budget::default(),
            bench: BenchConfig::default(),
            catalog: Arc::new(Catalog::builtin().clone()),
            token_budget: DEFAULT_TOKEN_BUDGET,
            flagger: Some(FlaggerConfig::default()),
            max_inner: DEFAULT_MAX_INNER,
            fine_tune_duration_frac: DEFAULT_FINE_TUNE_DURATION_FRAC,
            convergence_frac: DEFAULT_CONVERGENCE_FRAC,
            convergence_iterations: DEFAULT_CONVERGENCE_ITERATIONS,
            workload: None,
            realtime: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid workload spec: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSpec(Vec<SpecViolation>),
    #[error("budget must allow at least one iteration")]
    InvalidBudget,
    #[error("fine-tuning needs at least one changed option")]
    EmptySubset,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    IterationBudget,
    WallClockBudget,
    Converged,
    Interrupted,
    AdvisorUnavailable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningOutcome {
    pub best_options: OptionsDocument,
    pub best_index: Option<usize>,
    pub history: Vec<TuningIteration>,
    pub stop: StopReason,
}

/// Options for the next iteration and how they were obtained.
struct Proposal {
    options: OptionsDocument,
    delta: Vec<OptionChange>,
    digests: Vec<String>,
    notes: Vec<String>,
    /// Violations, when the advisor proposed changes but none survived validation.
    unusable: Option<Vec<String>>,
}

enum Halt {
    Advisor(AdvisorError),
    Prompt(PromptError),
}

/// Runs the outer loop. `resume` holds iterations from an earlier journal;
/// the loop continues after them, recomputing the pending proposal from the
/// last one. `on_iteration` sees every new iteration as soon as it is final.
pub fn tuning_loop(
    spec: &WorkloadSpec,
    initial_options: &OptionsDocument,
    advisor: &mut dyn Advisor,
    factory: &mut dyn EngineFactory,
    cfg: &TuneConfig,
    resume: Vec<TuningIteration>,
    on_iteration: &mut dyn FnMut(&TuningIteration) -> Result<(), JournalError>,
) -> Result<TuningOutcome, TuneError> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        return Err(TuneError::InvalidSpec(violations));
    }
    if cfg.budget.max_iterations == 0 || cfg.budget.max_wall_s <= 0.0 {
        return Err(TuneError::InvalidBudget);
    }
    if let Some(first) = resume.first() {
        if first.options != *initial_options {
            return Err(TuneError::Resume(
                "the journal starts from different initial options".into(),
            ));
        }
    }
    let started = Instant::now();
    let interrupted = || cfg.bench.stop.as_ref().is_some_and(|s| s.load(Ordering::SeqCst));
    let mut history = resume;
    let workload = cfg
        .workload
        .clone()
        .unwrap_or_else(|| WorkloadSummary::from_spec(spec));

    let finish = |history: Vec<TuningIteration>, stop: StopReason| {
        let best = best_iteration(&history);
        TuningOutcome {
            best_options: best.map_or_else(|| initial_options.clone(), |b| b.options.clone()),
            best_index: best.map(|b| b.index),
            stop,
            history,
        }
    };

    let mut proposal = if history.is_empty() {
        Proposal {
            options: initial_options.clone(),
            delta: Vec::new(),
            digests: Vec::new(),
            notes: vec!["initial options".into()],
            unusable: None,
        }
    } else {
        if let Some(stop) = stop_before_next(&history, cfg, started) {
            return Ok(finish(history, stop));
        }
        match propose(spec, &history, &workload, advisor, factory, cfg) {
            Ok(p) => p,
            Err(Halt::Advisor(e)) => return Ok(finish(history, StopReason::AdvisorUnavailable(e.to_string()))),
            Err(Halt::Prompt(e)) => return Err(e.into()),
        }
    };

    loop {
        if interrupted() {
            return Ok(finish(history, StopReason::Interrupted));
        }
        let index = history.len();
        info!("iteration {index}: {} changes", proposal.delta.len());
        let reference = history.iter().rev().find(|it| it.accepted);
        let run = match &proposal.unusable {
            Some(violations) => RunOutcome {
                result: empty_result(spec, &cfg.bench, "advisor response unusable".into()),
                accepted: false,
                notes: vec![format!("{UNUSABLE_NOTE}{}", violations.join("; "))],
            },
            None => run_iteration(spec, &proposal.options, reference, advisor, factory, cfg),
        };
        if interrupted() {
            return Ok(finish(history, StopReason::Interrupted));
        }
        let mut notes = proposal.notes;
        notes.extend(run.notes);
        let it = TuningIteration {
            index,
            options: proposal.options,
            result: run.result,
            delta_from_prev: proposal.delta,
            advisor_prompt_digests: proposal.digests,
            accepted: run.accepted,
            notes,
        };
        on_iteration(&it)?;
        history.push(it);

        if let Some(stop) = stop_before_next(&history, cfg, started) {
            return Ok(finish(history, stop));
        }
        proposal = match propose(spec, &history, &workload, advisor, factory, cfg) {
            Ok(p) => p,
            Err(Halt::Advisor(e)) => {
                warn!("ending the loop: {e}");
                return Ok(finish(history, StopReason::AdvisorUnavailable(e.to_string())));
            }
            Err(Halt::Prompt(e)) => return Err(e.into()),
        };
    }
}

fn stop_before_next(history: &[TuningIteration], cfg: &TuneConfig, started: Instant) -> Option<StopReason> {
    if converged(history, cfg.convergence_frac, cfg.convergence_iterations) {
        return Some(StopReason::Converged);
    }
    if history.len() >= cfg.budget.max_iterations {
        return Some(StopReason::IterationBudget);
    }
    if started.elapsed().as_secs_f64() >= cfg.budget.max_wall_s {
        return Some(StopReason::WallClockBudget);
    }
    None
}

/// True when each of the last `count` accepted iterations moved throughput by
/// less than `frac` relative to the accepted iteration before it.
pub fn converged(history: &[TuningIteration], frac: f64, count: usize) -> bool {
    if count == 0 {
        return false;
    }
    let tp: Vec<f64> = history
        .iter()
        .filter(|it| it.accepted)
        .map(|it| it.result.overall_throughput_ops_s)
        .collect();
    if tp.len() <= count {
        return false;
    }
    tp[tp.len() - count - 1..]
        .windows(2)
        .all(|w| w[0] > 0.0 && ((w[1] - w[0]) / w[0]).abs() < frac)
}

struct RunOutcome {
    result: BenchmarkResult,
    accepted: bool,
    notes: Vec<String>,
}

/// Halts the run when any member halts.
struct Observers<'a>(Vec<&'a mut dyn BenchObserver>);

impl BenchObserver for Observers<'_> {
    fn on_snapshot(&mut self, snap: &TelemetrySnapshot, engine: &dyn Engine) -> Control {
        let mut verdict = Control::Continue;
        for o in self.0.iter_mut() {
            if let Control::Halt(why) = o.on_snapshot(snap, engine) {
                if matches!(verdict, Control::Continue) {
                    verdict = Control::Halt(why);
                }
            }
        }
        verdict
    }
}

fn empty_result(spec: &WorkloadSpec, bench: &BenchConfig, why: String) -> BenchmarkResult {
    BenchmarkResult {
        spec_name: spec.name.clone(),
        options_digest: bench.options_digest.clone(),
        timeline: Vec::new(),
        overall_throughput_ops_s: 0.0,
        overall_p99_us: 0.0,
        duration_s: 0.0,
        total_ops: 0,
        op_counts: Default::default(),
        limits: bench.limits,
        halted: Some(why),
    }
}

fn run_iteration(
    spec: &WorkloadSpec,
    options: &OptionsDocument,
    reference: Option<&TuningIteration>,
    advisor: &mut dyn Advisor,
    factory: &mut dyn EngineFactory,
    cfg: &TuneConfig,
) -> RunOutcome {
    let bench = BenchConfig {
        options_digest: options_digest(options),
        ..cfg.bench.clone()
    };
    let engine = match factory.open(options) {
        Ok(e) => e,
        Err(e) => {
            return RunOutcome {
                result: empty_result(spec, &bench, format!("engine failure: {e}")),
                accepted: false,
                notes: vec![format!("{FAILURE_NOTE}{e}")],
            }
        }
    };
    let mut flagger = match (cfg.flagger, reference) {
        (Some(fc), Some(r)) => Some(FlaggerObserver::new(
            fc,
            diff_options(&r.options, options),
            &r.result.timeline,
        )),
        _ => None,
    };
    let catalog = cfg.catalog.clone();
    let mut realtime = cfg.realtime.map(|rc| {
        RealtimeTuner::new(
            rc,
            DriftBaseline::from(&spec.phases[0]),
            advisor,
            &catalog,
            options.clone(),
            cfg.bench.limits,
        )
    });
    let mut members: Vec<&mut dyn BenchObserver> = Vec::new();
    if let Some(f) = flagger.as_mut() {
        members.push(f);
    }
    if let Some(r) = realtime.as_mut() {
        members.push(r);
    }
    let mut observers = Observers(members);
    let outcome = run_benchmark(spec, engine.as_ref(), &bench, &mut observers);
    drop(observers);
    let mut notes = Vec::new();
    if let Some(rt) = &realtime {
        for a in &rt.applied {
            for c in &a.changes {
                notes.push(format!("real-time t={}s: {c}", a.ts_s));
            }
        }
    }
    let _ = engine.close();
    match outcome {
        Ok(result) => {
            let event = flagger.and_then(|f| f.event);
            match (event, &result.halted) {
                (Some(_), Some(why)) => {
                    notes.push(format!("{DEGRADATION_NOTE}{why}"));
                    RunOutcome {
                        result,
                        accepted: false,
                        notes,
                    }
                }
                _ => RunOutcome {
                    result,
                    accepted: true,
                    notes,
                },
            }
        }
        Err(BenchError::EngineFailure { message, partial }) => {
            notes.push(format!("{FAILURE_NOTE}{message}"));
            RunOutcome {
                result: *partial,
                accepted: false,
                notes,
            }
        }
        Err(e) => {
            notes.push(format!("{FAILURE_NOTE}{e}"));
            RunOutcome {
                result: empty_result(spec, &bench, e.to_string()),
                accepted: false,
                notes,
            }
        }
    }
}

/// Notice for the prompt that follows a rejected iteration.
fn rejection_notice(last: &TuningIteration, base: &OptionsDocument) -> Option<String> {
    if last.accepted {
        return None;
    }
    let changes = diff_options(base, &last.options);
    if let Some(why) = last.notes.iter().find_map(|n| n.strip_prefix(UNUSABLE_NOTE)) {
        return Some(format!(
            "The previous response contained no valid option changes ({why}). Use only options listed under \
             Current options, with values of the documented type and range.\n"
        ));
    }
    if let Some(why) = last.notes.iter().find_map(|n| n.strip_prefix(DEGRADATION_NOTE)) {
        let mut s = format!("Iteration {} was stopped: {why}.\n", last.index);
        let (dropped, baseline) = degradation_figures(last);
        s.push_str(&degradation_notice(dropped, baseline, &changes));
        return Some(s);
    }
    let why = last
        .notes
        .iter()
        .find_map(|n| n.strip_prefix(FAILURE_NOTE))
        .unwrap_or("unknown error");
    let mut s = format!(
        "Iteration {} failed ({why}) and its options were rolled back. These changes were involved:\n",
        last.index
    );
    for c in &changes {
        let _ = writeln!(s, "  {c}");
    }
    Some(s)
}

/// Throughput of the window that tripped the flagger and the median of the
/// windows before it within the same phase.
fn degradation_figures(it: &TuningIteration) -> (f64, f64) {
    let tl = &it.result.timeline;
    let Some(last) = tl.last() else { return (0.0, 0.0) };
    let mut before: Vec<f64> = tl[..tl.len() - 1]
        .iter()
        .filter(|s| s.phase == last.phase)
        .map(|s| s.throughput_ops_s)
        .collect();
    before.sort_by(f64::total_cmp);
    let median = if before.is_empty() { 0.0 } else { before[before.len() / 2] };
    (last.throughput_ops_s, median)
}

fn propose(
    spec: &WorkloadSpec,
    history: &[TuningIteration],
    workload: &WorkloadSummary,
    advisor: &mut dyn Advisor,
    factory: &mut dyn EngineFactory,
    cfg: &TuneConfig,
) -> Result<Proposal, Halt> {
    let last = history.last().expect("propose needs history");
    let base_it = history.iter().rev().find(|it| it.accepted).unwrap_or(&history[0]);
    let base = base_it.options.clone();
    let ctx = PromptContext {
        current_options: base.clone(),
        history: history.iter().map(TuningIteration::summary).collect(),
        latest_result: Some(ResultSummary::from_result(&base_it.result)),
        characterization: Some(workload.clone()),
        limits: cfg.bench.limits,
        extra_directives: rejection_notice(last, &base),
    };
    let prompts = build_prompts(cfg.strategy, &ctx, &cfg.catalog, cfg.token_budget).map_err(Halt::Prompt)?;
    let replies = ask_with_retry(advisor, &prompts).map_err(Halt::Advisor)?;
    let mut digests: Vec<String> = prompts.iter().map(Prompt::digest).collect();
    let mut notes = Vec::new();
    let responses: Vec<_> = replies
        .iter()
        .map(|raw| extract_options(raw, &base, &cfg.catalog))
        .collect();
    let violations: usize = responses.iter().map(|r| r.violations.len()).sum();
    let (merged, conflicts) = merge_deltas(responses.iter().map(|r| &r.extracted_delta));
    let changes = delta_changes(&base, &merged);
    let unusable = (changes.is_empty() && violations > 0).then(|| {
        responses
            .iter()
            .flat_map(|r| r.violations.iter().map(ToString::to_string))
            .collect::<Vec<_>>()
    });
    notes.push(format!(
        "advisor ({} prompt{}) proposed {} changes, {violations} violations repaired or dropped",
        prompts.len(),
        if prompts.len() == 1 { "" } else { "s" },
        changes.len()
    ));
    for c in &conflicts {
        notes.push(format!(
            "conflict: [{}] {} kept {} from prompt {} over {} from prompt {}",
            c.section,
            c.name,
            c.kept,
            c.kept_from + 1,
            c.dropped,
            c.dropped_from + 1
        ));
    }
    let mut options = apply_delta(&base, &merged);
    if !changes.is_empty() && cfg.max_inner > 0 {
        match fine_tune(spec, &changes, &options, &ctx, advisor, factory, cfg, cfg.max_inner) {
            Ok(ft) => {
                let kept = ft.steps.iter().filter(|s| s.kept).count();
                notes.push(format!("fine-tune: kept {kept} of {} refinements", ft.steps.len()));
                if let Some(why) = &ft.stopped {
                    notes.push(format!("fine-tune stopped early: {why}"));
                }
                digests.extend(ft.steps.iter().map(|s| s.prompt_digest.clone()));
                options = ft.options;
            }
            Err(e) => notes.push(format!("fine-tune skipped: {e}")),
        }
    }
    Ok(Proposal {
        delta: diff_options(&base, &options),
        options,
        digests,
        notes,
        unusable,
    })
}

/// Asks every prompt in order. An unavailable advisor gets one retry of the
/// whole round; an authentication failure ends it at once.
fn ask_with_retry(advisor: &mut dyn Advisor, prompts: &[Prompt]) -> Result<Vec<String>, AdvisorError> {
    let mut attempt = 0;
    loop {
        let round: Result<Vec<String>, AdvisorError> = prompts.iter().map(|p| call_advisor(advisor, p)).collect();
        match round {
            Ok(replies) => return Ok(replies),
            Err(AdvisorError::Unavailable(msg)) if attempt == 0 => {
                warn!("advisor unavailable, retrying once: {msg}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneStep {
    pub step: usize,
    pub prompt_digest: String,
    pub candidate: Vec<OptionChange>,
    pub throughput_ops_s: Option<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub options: OptionsDocument,
    /// Short-run throughput of the returned options, when measured.
    pub throughput_ops_s: Option<f64>,
    pub steps: Vec<FineTuneStep>,
    pub stopped: Option<String>,
}

/// Inner loop: asks for small steps on the options in `changed_subset` only,
/// measures each candidate on a shortened run, and keeps a candidate only
/// when it strictly beats the incumbent.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    spec: &WorkloadSpec,
    changed_subset: &[OptionChange],
    entry: &OptionsDocument,
    ctx: &PromptContext,
    advisor: &mut dyn Advisor,
    factory: &mut dyn EngineFactory,
    cfg: &TuneConfig,
    max_inner: usize,
) -> Result<FineTuneOutcome, TuneError> {
    if changed_subset.is_empty() {
        return Err(TuneError::EmptySubset);
    }
    let mut out = FineTuneOutcome {
        options: entry.clone(),
        throughput_ops_s: None,
        steps: Vec::new(),
        stopped: None,
    };
    if max_inner == 0 {
        return Ok(out);
    }
    let short = spec.scaled_duration(cfg.fine_tune_duration_frac);
    let subset: BTreeSet<&str> = changed_subset.iter().map(|c| c.name.as_str()).collect();
    let Some(mut incumbent) = measure(&short, entry, factory, cfg) else {
        out.stopped = Some("entry options failed to run".into());
        return Ok(out);
    };
    out.throughput_ops_s = Some(incumbent.overall_throughput_ops_s);
    for step in 1..=max_inner {
        let prompt = fine_tune_prompt(step, &out.options, &subset, &incumbent, ctx, &cfg.catalog);
        let raw = match ask_with_retry(advisor, std::slice::from_ref(&prompt)) {
            Ok(mut r) => r.remove(0),
            Err(e) => {
                out.stopped = Some(e.to_string());
                break;
            }
        };
        let response = extract_options(&raw, &out.options, &cfg.catalog);
        let mut delta = response.extracted_delta;
        for opts in delta.values_mut() {
            opts.retain(|name, _| subset.contains(name.as_str()));
        }
        delta.retain(|_, opts| !opts.is_empty());
        let candidate_changes = delta_changes(&out.options, &delta);
        let mut record = FineTuneStep {
            step,
            prompt_digest: prompt.digest(),
            candidate: candidate_changes.clone(),
            throughput_ops_s: None,
            kept: false,
        };
        if !candidate_changes.is_empty() {
            let candidate = apply_delta(&out.options, &delta);
            if let Some(r) = measure(&short, &candidate, factory, cfg) {
                record.throughput_ops_s = Some(r.overall_throughput_ops_s);
                if r.overall_throughput_ops_s > incumbent.overall_throughput_ops_s {
                    record.kept = true;
                    out.options = candidate;
                    out.throughput_ops_s = Some(r.overall_throughput_ops_s);
                    incumbent = r;
                }
            }
        }
        out.steps.push(record);
    }
    Ok(out)
}

fn measure(
    spec: &WorkloadSpec,
    options: &OptionsDocument,
    factory: &mut dyn EngineFactory,
    cfg: &TuneConfig,
) -> Option<BenchmarkResult> {
    let bench = BenchConfig {
        options_digest: options_digest(options),
        ..cfg.bench.clone()
    };
    let engine = factory.open(options).ok()?;
    let r = run_benchmark(spec, engine.as_ref(), &bench, &mut crate::bench::NoObserver);
    let _ = engine.close();
    r.ok().filter(|r| r.halted.is_none())
}

fn fine_tune_prompt(
    step: usize,
    current: &OptionsDocument,
    subset: &BTreeSet<&str>,
    incumbent: &BenchmarkResult,
    ctx: &PromptContext,
    catalog: &Catalog,
) -> Prompt {
    let summary = ResultSummary::from_result(incumbent);
    let mut t = format!(
        "You are an expert in tuning {} (prompt template v{PROMPT_TEMPLATE_VERSION}). \
         Refine a few options that were just changed, using small steps.\n",
        catalog.store
    );
    if let Some(w) = &ctx.characterization {
        let _ = write!(t, "\n## Workload\noperation mix: {}\n", format_mix(&w.query_ratios));
    }
    let _ = write!(
        t,
        "\n## Resources\ncpu_cores = {}\nmem_bytes = {}\n",
        ctx.limits.cpu_cores, ctx.limits.mem_bytes
    );
    let _ = write!(
        t,
        "\n## Latest result\nthroughput_ops_s = {:.1}\np99_us = {:.1}\nwrite_stall_micros = {}\nblock_cache_hit_ratio = {:.4}\nrealized mix: {}\n",
        summary.throughput_ops_s,
        summary.p99_us,
        summary.write_stall_micros,
        summary.block_cache_hit_ratio,
        format_mix(&summary.op_ratios)
    );
    let _ = write!(t, "\n## Fine-tune\nstep = {step}\n");
    t.push_str("\n## Current options\n```ini\n");
    let mut section: Option<&str> = None;
    for (s, name, value) in current.iter() {
        if !subset.contains(name) {
            continue;
        }
        if section != Some(s) {
            let _ = writeln!(t, "[{s}]");
            section = Some(s);
        }
        let _ = writeln!(t, "  {name}={value}");
    }
    t.push_str(
        "```\n\n## Task\nChange only the options listed under Current options, each by a small \
         step (about 25%). A change is kept only if throughput improves.\n\n",
    );
    t.push_str(OUTPUT_FORMAT);
    Prompt {
        label: format!("fine-tune {step}"),
        text: t,
    }
}

/// Digest helper re-exported for journal consumers.
pub fn digest_of(text: &str) -> String {
    prompt_digest(text)
}
