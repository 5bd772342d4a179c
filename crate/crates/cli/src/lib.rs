//! Batch front end: reads JSON run configurations, drives the solver and
//! writes traces, trajectories and reports.

pub mod config;
pub mod output;
pub mod run;
