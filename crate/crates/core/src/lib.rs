//! Automatic assessment and feedback pipeline for programming exercises.

pub mod config;
pub mod course;
pub mod error;
pub mod faults;
pub mod fixture_runner;
pub mod fsqueue;
pub mod ingest;
pub mod mail;
pub mod manifest;
pub mod model;
pub mod outbox;
pub mod pipeline;
pub mod render;
pub mod reporting;
pub mod roster;
pub mod runner;
pub mod sandbox;
pub mod scaffold;
pub mod scoring;
pub mod stats;
pub mod store;
pub mod testexec;

pub use error::{Error, Result};
