//! Experiment orchestration for `cavlens`: configuration, the tag-fraction
//! validation run, reports and charts.

pub mod charts;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;
