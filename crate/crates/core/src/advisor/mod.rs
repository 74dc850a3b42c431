//! Tuning advisors: prompt construction, backends, and response extraction.

mod extract;
mod prompt;
mod remote;
mod replay;
mod scripted;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use extract::{
    apply_delta, delta_changes, delta_len, extract_options, merge_deltas, AdvisorResponse, MergeConflict,
    OptionDelta,
};
pub use prompt::{
    approx_tokens, build_prompts, degradation_notice, format_mix, prompt_digest, tunable_view, IterationSummary,
    Prompt, PromptContext, PromptError, PromptStrategy, ResultSummary, WorkloadSummary, CHARS_PER_TOKEN,
    DEFAULT_TOKEN_BUDGET, OUTPUT_FORMAT, PROMPT_TEMPLATE_VERSION, SUBSET_SLICE_OPTIONS,
};
pub use remote::{RemoteAdvisor, RemoteConfig, API_KEY_ENV, DEFAULT_MAX_RETRIES, DEFAULT_TEMPERATURE, DEFAULT_TIMEOUT};
pub use replay::{RecordingAdvisor, ReplayAdvisor};
pub use scripted::ScriptedAdvisor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdvisorError {
    #[error("advisor unavailable: {0}")]
    Unavailable(String),
    #[error("advisor authentication failed: {0}")]
    Auth(String),
}

/// Anything that answers a prompt with text.
pub trait Advisor: Send {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError>;
}

impl<F> Advisor for F
where
    F: FnMut(&str) -> Result<String, AdvisorError> + Send,
{
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        self(prompt)
    }
}

impl Advisor for Box<dyn Advisor> {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvisorKind {
    Remote,
    Scripted,
    Replay,
}

impl FromStr for AdvisorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(AdvisorKind::Remote),
            "scripted" => Ok(AdvisorKind::Scripted),
            "replay" => Ok(AdvisorKind::Replay),
            other => Err(format!("unknown advisor kind `{other}` (remote, scripted, replay)")),
        }
    }
}

impl AdvisorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvisorKind::Remote => "remote",
            AdvisorKind::Scripted => "scripted",
            AdvisorKind::Replay => "replay",
        }
    }
}

/// Sends one prompt and records its digest alongside the reply.
pub fn call_advisor(advisor: &mut dyn Advisor, prompt: &Prompt) -> Result<String, AdvisorError> {
    log::debug!("advisor call {} ({}, ~{} tokens)", prompt.digest(), prompt.label, prompt.approx_tokens());
    advisor.complete(&prompt.text)
}
