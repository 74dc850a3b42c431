//! Run configuration: a flat `section.key = value` file plus command-line
//! overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use kvtune::advisor::{AdvisorKind, PromptStrategy, DEFAULT_MAX_RETRIES, DEFAULT_TEMPERATURE, DEFAULT_TOKEN_BUDGET};
use kvtune::bench::procfs::{available_cores, total_memory};
use kvtune::bench::{ResourceLimits, DEFAULT_SAMPLER_PERIOD_S};
use kvtune::engine::EngineKind;
use kvtune::tune::{Budget, RealtimeTunerConfig, DEFAULT_MAX_INNER};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, PartialEq)]
pub struct AdvisorSettings {
    pub kind: AdvisorKind,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    /// Recorded responses for the replay advisor.
    pub replay_dir: Option<PathBuf>,
    /// When set, every response is also saved here as a replay fixture.
    pub record_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine_kind: EngineKind,
    pub data_dir: PathBuf,
    pub advisor: AdvisorSettings,
    pub strategy: PromptStrategy,
    pub budget: Budget,
    pub max_inner: usize,
    pub token_budget: usize,
    pub flagger: bool,
    pub realtime: RealtimeTunerConfig,
    pub realtime_enabled: bool,
    pub limits: ResourceLimits,
    pub sampler_period_s: f64,
    pub prefill: bool,
    pub seed: u64,
    /// Whether the seed was set explicitly; only then does it replace the
    /// seed stored in a workload spec.
    pub seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            engine_kind: EngineKind::Simulated,
            data_dir: PathBuf::from("kvtune-data"),
            advisor: AdvisorSettings {
                kind: AdvisorKind::Scripted,
                endpoint: DEFAULT_ENDPOINT.into(),
                model: DEFAULT_MODEL.into(),
                temperature: DEFAULT_TEMPERATURE,
                max_retries: DEFAULT_MAX_RETRIES,
                replay_dir: None,
                record_dir: None,
            },
            strategy: PromptStrategy::FullHistory,
            budget: Budget::default(),
            max_inner: DEFAULT_MAX_INNER,
            token_budget: DEFAULT_TOKEN_BUDGET,
            flagger: true,
            realtime: RealtimeTunerConfig::default(),
            realtime_enabled: false,
            limits: ResourceLimits {
                cpu_cores: available_cores(),
                mem_bytes: total_memory().unwrap_or(8 << 30),
            },
            sampler_period_s: DEFAULT_SAMPLER_PERIOD_S,
            prefill: true,
            seed: DEFAULT_SEED,
            seed_set: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("bad value `{value}` for {key}: {e}"))
}

fn positive(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{key} must be positive, got {value}"))
    }
}

impl RunConfig {
    /// Applies `section.key = value` lines. Blank lines and lines starting
    /// with `#` are ignored. Relative paths resolve against `base_dir`.
    pub fn apply_text(&mut self, text: &str, base_dir: &Path) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `section.key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value, base_dir).map_err(err)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<(), String> {
        let path = |v: &str| base_dir.join(v);
        match key {
            "engine.kind" => self.engine_kind = parse(key, value)?,
            "engine.data_dir" => self.data_dir = path(value),
            "advisor.kind" => self.advisor.kind = parse(key, value)?,
            "advisor.endpoint" => self.advisor.endpoint = value.to_string(),
            "advisor.model" => self.advisor.model = value.to_string(),
            "advisor.temperature" => self.advisor.temperature = parse(key, value)?,
            "advisor.max_retries" => self.advisor.max_retries = parse(key, value)?,
            "advisor.replay_dir" => self.advisor.replay_dir = Some(path(value)),
            "advisor.record_dir" => self.advisor.record_dir = Some(path(value)),
            "advisor.api_key" | "advisor.key" => {
                return Err(format!(
                    "{key} is not accepted in the config file; set {} instead",
                    kvtune::advisor::API_KEY_ENV
                ))
            }
            "tune.strategy" => self.strategy = parse(key, value)?,
            "tune.max_iterations" => self.budget.max_iterations = parse(key, value)?,
            "tune.max_wall_s" => self.budget.max_wall_s = positive(key, value)?,
            "tune.max_inner" => self.max_inner = parse(key, value)?,
            "tune.token_budget" => self.token_budget = parse(key, value)?,
            "tune.flagger" => self.flagger = parse(key, value)?,
            "realtime.enabled" => self.realtime_enabled = parse(key, value)?,
            "realtime.tick_period_s" => self.realtime.tick_period_s = positive(key, value)?,
            "realtime.ratio_shift_threshold" => self.realtime.ratio_shift_threshold = positive(key, value)?,
            "realtime.size_shift_threshold_frac" => self.realtime.size_shift_threshold_frac = positive(key, value)?,
            "limits.cpu_cores" => self.limits.cpu_cores = parse(key, value)?,
            "limits.mem_bytes" => {
                self.limits.mem_bytes = kvtune::engine::parse_size(value)
                    .map(|(v, _)| v)
                    .ok_or_else(|| format!("bad size `{value}` for {key}"))?
            }
            "bench.sampler_period_s" => self.sampler_period_s = positive(key, value)?,
            "bench.prefill" => self.prefill = parse(key, value)?,
            "run.seed" => {
                self.seed = parse(key, value)?;
                self.seed_set = true;
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = RunConfig::default();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_text(&text, base)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(cfg)
    }
}
