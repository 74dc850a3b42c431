//! Store configuration model and the engine interface.

pub mod catalog;
pub mod options;
pub mod sim;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Op;

pub use catalog::{
    parse_bool, parse_size, validate_options, value_is_valid, Catalog, OptionMeta, ResourceGroup, ValidationOutcome, ValueType,
    Violation, ViolationAction,
};
pub use options::{diff_options, section_kind, OptionChange, OptionsDocument, OptionsParseError, OptionsSection};
pub use sim::SimulatedEngine;

/// Default options file of the production store (RocksDB 8.8.1).
pub const DEFAULT_OPTIONS_TEXT: &str = include_str!("../../data/rocksdb_default_OPTIONS.ini");

pub fn default_options() -> OptionsDocument {
    OptionsDocument::parse(DEFAULT_OPTIONS_TEXT).expect("shipped options file parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineKind {
    Simulated,
    External,
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simulated" | "sim" => Ok(Self::Simulated),
            "external" | "rocksdb" => Ok(Self::External),
            _ => Err(format!("unknown engine kind `{s}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot open engine: {0}")]
    Open(String),
    #[error("option `{0}` cannot be changed at runtime")]
    ImmutableOption(String),
    #[error("option `{0}` is not in the catalog")]
    UnknownOption(String),
    #[error("invalid value `{value}` for option `{name}`")]
    InvalidValue { name: String, value: String },
    #[error("engine is closed")]
    Closed,
    #[error("engine I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub ops_completed: BTreeMap<Op, u64>,
    pub write_stall_micros: u64,
    pub pending_compaction_bytes: u64,
    pub level_file_counts: Vec<u64>,
    pub block_cache_hit_ratio: f64,
}

impl EngineStats {
    pub fn total_ops(&self) -> u64 {
        self.ops_completed.values().sum()
    }
}

/// Uniform key-value interface over the simulated and real stores. Handles
/// are shared by all client threads of a benchmark.
pub trait Engine: Send + Sync {
    fn kind(&self) -> EngineKind;
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), EngineError>;
    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, EngineError>;
    fn delete(&self, key: &[u8]) -> Result<(), EngineError>;
    /// Up to `n` entries with key ≥ `start`, in key order.
    fn seek(&self, start: &[u8], n: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>, EngineError>;
    /// Applies runtime-mutable options atomically; returns the options whose
    /// value actually changed.
    fn set_mutable_options(
        &self,
        opts: &BTreeMap<String, String>,
    ) -> Result<BTreeMap<String, String>, EngineError>;
    fn stats(&self) -> EngineStats;
    fn close(&self) -> Result<(), EngineError>;

    /// Downcast hook used by the virtual-time benchmark executor.
    fn as_simulated(&self) -> Option<&SimulatedEngine> {
        None
    }
}

impl<E: Engine + ?Sized> Engine for Arc<E> {
    fn kind(&self) -> EngineKind {
        (**self).kind()
    }
    fn put(&self, key: &[u8], value: &[u8]) -> Result<(), EngineError> {
        (**self).put(key, value)
    }
    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, EngineError> {
        (**self).get(key)
    }
    fn delete(&self, key: &[u8]) -> Result<(), EngineError> {
        (**self).delete(key)
    }
    fn seek(&self, start: &[u8], n: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>, EngineError> {
        (**self).seek(start, n)
    }
    fn set_mutable_options(
        &self,
        opts: &BTreeMap<String, String>,
    ) -> Result<BTreeMap<String, String>, EngineError> {
        (**self).set_mutable_options(opts)
    }
    fn stats(&self) -> EngineStats {
        (**self).stats()
    }
    fn close(&self) -> Result<(), EngineError> {
        (**self).close()
    }
    fn as_simulated(&self) -> Option<&SimulatedEngine> {
        (**self).as_simulated()
    }
}

pub fn open(
    kind: EngineKind,
    doc: &OptionsDocument,
    data_dir: &Path,
) -> Result<Arc<dyn Engine>, EngineError> {
    match kind {
        EngineKind::Simulated => Ok(Arc::new(SimulatedEngine::open(
            doc,
            Arc::new(Catalog::builtin().clone()),
        )?)),
        EngineKind::External => open_external(doc, data_dir),
    }
}

fn open_external(_doc: &OptionsDocument, _data_dir: &Path) -> Result<Arc<dyn Engine>, EngineError> {
    Err(EngineError::Open(
        "the external store adapter is not compiled in (enable the `rocksdb` feature)".into(),
    ))
}
