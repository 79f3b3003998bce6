//! Trace-event JSON export, viewable in chrome://tracing or Perfetto.

use std::io::Write;

use serde::Serialize;

use super::Timeline;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceArgs {
    pub microbatch: usize,
    pub stage: usize,
}

/// One complete ("X") event. `pid` is the DP lane, `tid` the pipeline device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: &'static str,
    pub ph: &'static str,
    pub pid: usize,
    pub tid: usize,
    /// Microseconds.
    pub ts: f64,
    /// Microseconds.
    pub dur: f64,
    pub args: TraceArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceFile {
    #[serde(rename = "traceEvents")]
    pub trace_events: Vec<TraceEvent>,
    #[serde(rename = "displayTimeUnit")]
    pub display_time_unit: &'static str,
}

pub fn trace_events(timeline: &Timeline, lane: usize) -> Vec<TraceEvent> {
    timeline
        .events
        .iter()
        .map(|e| {
            let tag = match e.phase {
                crate::cost::Phase::Forward => 'F',
                crate::cost::Phase::Backward => 'B',
            };
            TraceEvent {
                name: format!("{tag}{}", e.microbatch),
                cat: e.phase.as_str(),
                ph: "X",
                pid: lane,
                tid: e.device,
                ts: e.start * 1e6,
                dur: (e.end - e.start) * 1e6,
                args: TraceArgs { microbatch: e.microbatch, stage: e.stage },
            }
        })
        .collect()
}

/// Writes the timelines of all lanes as one trace file.
pub fn write_trace<W: Write>(out: W, timelines: &[Timeline]) -> serde_json::Result<()> {
    let trace_events = timelines.iter().enumerate().flat_map(|(lane, tl)| trace_events(tl, lane)).collect();
    let file = TraceFile { trace_events, display_time_unit: "ms" };
    serde_json::to_writer_pretty(out, &file)
}
