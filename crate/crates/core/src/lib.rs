//! Next-step forecasting of XR frame traffic.
//!
//! The pipeline turns a packet trace into per-segment frame features
//! ([`ingest`], [`viewframe`]), prepares them as supervised windows
//! ([`prep`]), trains a base forecaster plus a residual learner on top
//! ([`models`], [`reslearn`]) and writes per-segment error reports
//! ([`metrics`], [`report`]). [`harness`] wires the stages together for the
//! `xrcast` binary.

pub mod config;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod prep;
pub mod report;
pub mod reslearn;
pub mod synth;
pub mod viewframe;
