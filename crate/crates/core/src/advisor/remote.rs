//! HTTP chat-completions backend.
//!
//! Request: `POST <endpoint>` with a bearer token and
//! `{"model", "messages": [{"role", "content"}...], "temperature"}`.
//! Response: the text of `choices[0].message.content`.

use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{Advisor, AdvisorError};

pub const API_KEY_ENV: &str = "KVTUNE_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_RETRIES: u32 = 3;

const SYSTEM_PROMPT: &str = "You are a storage engine performance engineer. Answer with concrete option values.";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Wait before the first retry; doubled on each further retry.
    pub initial_backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: DEFAULT_TEMPERATURE,
            timeout: DEFAULT_TIMEOUT,
            max_retries: DEFAULT_MAX_RETRIES,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct Request<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct Response {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

pub struct RemoteAdvisor {
    cfg: RemoteConfig,
    api_key: String,
    client: Client,
}

impl RemoteAdvisor {
    /// Reads the API key from `KVTUNE_API_KEY`.
    pub fn from_env(cfg: RemoteConfig) -> Result<Self, AdvisorError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| AdvisorError::Auth(format!("{API_KEY_ENV} is not set")))?;
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: RemoteConfig, api_key: String) -> Result<Self, AdvisorError> {
        let client = Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| AdvisorError::Unavailable(format!("http client: {e}")))?;
        Ok(RemoteAdvisor { cfg, api_key, client })
    }

    fn attempt(&self, prompt: &str) -> Result<String, Attempt> {
        let body = Request {
            model: &self.cfg.model,
            messages: vec![
                Message {
                    role: "system",
                    content: SYSTEM_PROMPT,
                },
                Message {
                    role: "user",
                    content: prompt,
                },
            ],
            temperature: self.cfg.temperature,
        };
        let resp = self
            .client
            .post(&self.cfg.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(Attempt::Fatal(AdvisorError::Auth(format!("endpoint answered {status}"))));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Attempt::Retry(format!("endpoint answered {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(AdvisorError::Unavailable(format!("endpoint answered {status}"))));
        }
        let parsed: Response = resp
            .json()
            .map_err(|e| Attempt::Retry(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Attempt::Retry("response has no choices".into()))
    }
}

enum Attempt {
    Retry(String),
    Fatal(AdvisorError),
}

impl Advisor for RemoteAdvisor {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        let mut backoff = self.cfg.initial_backoff;
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!("advisor attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(AdvisorError::Unavailable(format!(
            "{} attempts failed, last error: {last}",
            self.cfg.max_retries + 1
        )))
    }
}
