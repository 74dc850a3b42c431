//! Subcommand implementations and the exit-code mapping.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use kvtune::advisor::{
    Advisor, AdvisorError, AdvisorKind, RecordingAdvisor, RemoteAdvisor, RemoteConfig, ReplayAdvisor,
    ScriptedAdvisor,
};
use kvtune::bench::{run_benchmark, BenchConfig, BenchError, NoObserver};
use kvtune::characterize::{characterize_with, characterize_with_advisor, CharacterizeConfig, WorkloadCharacterization};
use kvtune::engine::{default_options, Engine, EngineError, EngineKind, OptionsDocument};
use kvtune::trace::{read_trace_file, TraceError};
use kvtune::tune::{
    read_journal, report_csv, report_text, tuning_loop, EngineFactory, FlaggerConfig, Journal, SimulatedFactory,
    StopReason, TuneConfig, TuneError,
};
use kvtune::workload::{emit_spec, parse_spec, synthesize_spec_with, validate_spec, SynthesisConfig, WorkloadSpec};

use crate::config::RunConfig;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_ADVISOR: u8 = 3;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Debug)]
pub enum CliError {
    /// Missing or malformed inputs.
    Input(String),
    Internal(String),
    Advisor(String),
    Interrupted(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::Advisor(_) => EXIT_ADVISOR,
            CliError::Interrupted(_) => EXIT_INTERRUPTED as u8,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Internal(m) | CliError::Advisor(m) | CliError::Interrupted(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<AdvisorError> for CliError {
    fn from(e: AdvisorError) -> Self {
        CliError::Advisor(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))
}

fn make_advisor(cfg: &RunConfig) -> Result<Box<dyn Advisor>, CliError> {
    let a = &cfg.advisor;
    let inner: Box<dyn Advisor> = match a.kind {
        AdvisorKind::Scripted => Box::new(ScriptedAdvisor::default()),
        AdvisorKind::Replay => {
            let dir = a
                .replay_dir
                .as_ref()
                .ok_or_else(|| CliError::Input("advisor.replay_dir is required for the replay advisor".into()))?;
            if !dir.is_dir() {
                return Err(CliError::Input(format!("{}: not a directory", dir.display())));
            }
            Box::new(ReplayAdvisor::new(dir))
        }
        AdvisorKind::Remote => {
            let mut rc = RemoteConfig::new(&a.endpoint, &a.model);
            rc.temperature = a.temperature;
            rc.max_retries = a.max_retries;
            Box::new(RemoteAdvisor::from_env(rc)?)
        }
    };
    match &a.record_dir {
        Some(dir) => Ok(Box::new(RecordingAdvisor::new(inner, dir)?)),
        None => Ok(inner),
    }
}

fn trace_error(path: &Path, e: TraceError) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

pub fn characterize(cfg: &RunConfig, trace: &Path, out: &Path, window_s: f64, refine: bool) -> Result<(), CliError> {
    if !(window_s > 0.0) {
        return Err(CliError::Input(format!("window length must be positive, got {window_s}")));
    }
    let (stats, windows) =
        read_trace_file(trace, (window_s * 1e6).round() as u64).map_err(|e| trace_error(trace, e))?;
    let ccfg = CharacterizeConfig::default();
    let ch = if refine {
        let mut advisor = make_advisor(cfg)?;
        characterize_with_advisor(&stats, &windows, &ccfg, advisor.as_mut())
    } else {
        characterize_with(&stats, &windows, &ccfg)
    }
    .map_err(|e| CliError::Input(format!("{}: {e}", trace.display())))?;
    log::info!("{}", ch.summary());
    let json = serde_json::to_string_pretty(&ch).map_err(|e| CliError::Internal(e.to_string()))?;
    write(out, &json)
}

pub fn synthesize(
    cfg: &RunConfig,
    characterization: &Path,
    out: &Path,
    name: Option<String>,
    target_records: Option<u64>,
) -> Result<(), CliError> {
    let text = read(characterization)?;
    let ch: WorkloadCharacterization = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", characterization.display())))?;
    let name = name.unwrap_or_else(|| {
        out.file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("synthesized")
            .to_string()
    });
    let scfg = SynthesisConfig {
        name,
        seed: cfg.seed,
        target_records,
        ..SynthesisConfig::default()
    };
    let spec = synthesize_spec_with(&ch, &scfg);
    let violations = validate_spec(&spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Input(format!(
            "{}: synthesized spec is invalid: {}",
            characterization.display(),
            list.join("; ")
        )));
    }
    write(out, &emit_spec(&spec))
}

fn load_spec(cfg: &RunConfig, path: &Path) -> Result<WorkloadSpec, CliError> {
    let mut spec = parse_spec(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let violations = validate_spec(&spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Input(format!("{}: {}", path.display(), list.join("; "))));
    }
    if cfg.seed_set {
        spec.seed = cfg.seed;
    }
    Ok(spec)
}

fn load_options(path: Option<&Path>) -> Result<OptionsDocument, CliError> {
    match path {
        Some(p) => OptionsDocument::parse(&read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => Ok(default_options()),
    }
}

struct CliFactory {
    kind: EngineKind,
    data_dir: std::path::PathBuf,
    sim: SimulatedFactory,
}

impl EngineFactory for CliFactory {
    fn open(&mut self, options: &OptionsDocument) -> Result<Box<dyn Engine>, EngineError> {
        match self.kind {
            EngineKind::Simulated => self.sim.open(options),
            EngineKind::External => {
                let e = kvtune::engine::open(self.kind, options, &self.data_dir)?;
                Ok(Box::new(e))
            }
        }
    }
}

fn factory(cfg: &RunConfig) -> CliFactory {
    CliFactory {
        kind: cfg.engine_kind,
        data_dir: cfg.data_dir.clone(),
        sim: SimulatedFactory::default(),
    }
}

fn bench_config(cfg: &RunConfig, stop: Arc<AtomicBool>) -> BenchConfig {
    BenchConfig {
        sampler_period_s: cfg.sampler_period_s,
        limits: cfg.limits,
        options_digest: String::new(),
        prefill: cfg.prefill,
        stop: Some(stop),
    }
}

pub fn bench(
    cfg: &RunConfig,
    spec_path: &Path,
    options: Option<&Path>,
    out: &Path,
    timeline: Option<&Path>,
    stop: Arc<AtomicBool>,
) -> Result<(), CliError> {
    let spec = load_spec(cfg, spec_path)?;
    let doc = load_options(options)?;
    let engine = factory(cfg)
        .open(&doc)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let bc = BenchConfig {
        options_digest: kvtune::bench::options_digest(&doc),
        ..bench_config(cfg, stop)
    };
    let result = run_benchmark(&spec, engine.as_ref(), &bc, &mut NoObserver);
    let _ = engine.close();
    let result = match result {
        Ok(r) => r,
        Err(BenchError::EngineFailure { message, partial }) => {
            write(out, &partial.to_json())?;
            return Err(CliError::Internal(format!("engine failure: {message}")));
        }
        Err(e @ (BenchError::InvalidSpec(_) | BenchError::Workload(_) | BenchError::InvalidPeriod)) => {
            return Err(CliError::Input(format!("{}: {e}", spec_path.display())))
        }
    };
    write(out, &result.to_json())?;
    if let Some(t) = timeline {
        write(t, &result.timeline_csv())?;
    }
    println!(
        "{}: {:.1} ops/s, p99 {:.1} us over {} ops in {:.1} s",
        spec.name, result.overall_throughput_ops_s, result.overall_p99_us, result.total_ops, result.duration_s
    );
    if let Some(why) = &result.halted {
        return Err(CliError::Interrupted(format!("run stopped early ({why}); partial result written")));
    }
    Ok(())
}

fn tune_error(e: TuneError) -> CliError {
    match e {
        TuneError::Journal(e) => CliError::Internal(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

pub fn tune(
    cfg: &RunConfig,
    spec_path: &Path,
    options: Option<&Path>,
    journal_path: &Path,
    best_path: &Path,
    resume: bool,
    stop: Arc<AtomicBool>,
) -> Result<(), CliError> {
    let spec = load_spec(cfg, spec_path)?;
    let doc = load_options(options)?;
    let mut advisor = make_advisor(cfg)?;
    let previous = if resume && journal_path.exists() {
        read_journal(journal_path).map_err(|e| CliError::Input(e.to_string()))?
    } else {
        Vec::new()
    };
    let mut journal = if resume {
        Journal::append(journal_path)
    } else {
        Journal::create(journal_path)
    }
    .map_err(|e| CliError::Internal(e.to_string()))?;
    let tc = TuneConfig {
        strategy: cfg.strategy,
        budget: cfg.budget,
        bench: bench_config(cfg, stop),
        token_budget: cfg.token_budget,
        flagger: cfg.flagger.then(FlaggerConfig::default),
        max_inner: cfg.max_inner,
        realtime: cfg.realtime_enabled.then_some(cfg.realtime),
        ..TuneConfig::default()
    };
    let mut sink = |it: &kvtune::tune::TuningIteration| {
        log::info!(
            "iteration {}: {:.1} ops/s{}",
            it.index,
            it.result.overall_throughput_ops_s,
            if it.accepted { "" } else { " (rejected)" }
        );
        journal.write(it)
    };
    let outcome = tuning_loop(
        &spec,
        &doc,
        advisor.as_mut(),
        &mut factory(cfg),
        &tc,
        previous,
        &mut sink,
    )
    .map_err(tune_error)?;
    write(best_path, &outcome.best_options.emit())?;
    print!("{}", report_text(&outcome.history));
    match outcome.stop {
        StopReason::AdvisorUnavailable(why) => Err(CliError::Advisor(format!(
            "{why}; best options so far written to {}",
            best_path.display()
        ))),
        StopReason::Interrupted => Err(CliError::Interrupted(format!(
            "interrupted; resume with --resume --journal {}",
            journal_path.display()
        ))),
        _ => Ok(()),
    }
}

pub fn report(journal: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    if !journal.exists() {
        return Err(CliError::Input(format!("{}: no such file", journal.display())));
    }
    let history = read_journal(journal).map_err(|e| CliError::Input(e.to_string()))?;
    print!("{}", report_text(&history));
    if let Some(path) = csv {
        write(path, &report_csv(&history))?;
    }
    Ok(())
}
