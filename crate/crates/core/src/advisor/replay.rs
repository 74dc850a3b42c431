//! Recorded responses keyed by prompt digest, one `<sha256>.txt` per prompt.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{prompt_digest, Advisor, AdvisorError};

#[derive(Debug, Clone)]
pub struct ReplayAdvisor {
    dir: PathBuf,
}

impl ReplayAdvisor {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayAdvisor { dir: dir.into() }
    }

    pub fn fixture_path(dir: &Path, prompt: &str) -> PathBuf {
        dir.join(format!("{}.txt", prompt_digest(prompt)))
    }
}

impl Advisor for ReplayAdvisor {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        let path = Self::fixture_path(&self.dir, prompt);
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => AdvisorError::Unavailable(format!(
                "no recorded response for prompt {}",
                prompt_digest(prompt)
            )),
            _ => AdvisorError::Unavailable(format!("{}: {e}", path.display())),
        })
    }
}

/// Passes calls through to `inner` and stores every response as a replay
/// fixture.
pub struct RecordingAdvisor<A> {
    inner: A,
    dir: PathBuf,
}

impl<A: Advisor> RecordingAdvisor<A> {
    pub fn new(inner: A, dir: impl Into<PathBuf>) -> Result<Self, AdvisorError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| AdvisorError::Unavailable(format!("{}: {e}", dir.display())))?;
        Ok(RecordingAdvisor { inner, dir })
    }

    pub fn into_inner(self) -> A {
        self.inner
    }
}

impl<A: Advisor> Advisor for RecordingAdvisor<A> {
    fn complete(&mut self, prompt: &str) -> Result<String, AdvisorError> {
        let reply = self.inner.complete(prompt)?;
        let path = ReplayAdvisor::fixture_path(&self.dir, prompt);
        fs::write(&path, &reply).map_err(|e| AdvisorError::Unavailable(format!("{}: {e}", path.display())))?;
        Ok(reply)
    }
}
