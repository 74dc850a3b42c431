//! Full-cycle configuration tuning for LSM-tree key-value stores.
//!
//! The pipeline runs trace ingestion ([`trace`]), distribution fitting
//! ([`characterize`]), benchmark synthesis ([`workload`]), benchmark execution
//! against an engine ([`engine`], [`bench`]) and advisor-driven tuning
//! ([`advisor`], [`tune`]).

pub mod advisor;
pub mod bench;
pub mod characterize;
pub mod engine;
pub mod workload;
pub mod trace;
pub mod tune;
