//! End-to-end runs from a [`RunConfig`].

use crate::config::RunConfig;
use crate::error::Result;
use crate::report::ProtocolReport;
use crate::taskgen::{generate_stream, stream_digest};
use crate::trainer::ProtocolRunner;

pub fn start(cfg: &RunConfig) -> Result<ProtocolRunner> {
    let stream = generate_stream(&cfg.protocol)?;
    ProtocolRunner::new(stream, cfg.train.clone(), cfg.run_options())
}

pub fn report(runner: &ProtocolRunner, cfg: &RunConfig) -> Result<ProtocolReport> {
    ProtocolReport::build(cfg, &stream_digest(&runner.stream), &runner.progress, &runner.state.replay)
}

/// Generate the stream, train every task and assemble the report.
pub fn run_protocol(cfg: &RunConfig) -> Result<ProtocolReport> {
    let mut runner = start(cfg)?;
    runner.run_to_end()?;
    report(&runner, cfg)
}
