//! Config-driven runner for the shiftcalc verification experiments.
//!
//! A config names one experiment from [`experiments::CATALOG`]; the run
//! yields check records, written as JSON lines, and optional CSV tables.

pub mod config;
pub mod experiments;
pub mod report;
