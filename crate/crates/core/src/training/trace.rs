//! Per-step training records.

use std::fmt::Write as _;

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub nll_nats: f64,
    pub nll_bpd: f64,
    pub logdet: Vec<f64>,
    pub variance: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

impl TraceRow {
    pub fn total_logdet(&self) -> f64 {
        self.logdet.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub step: usize,
    pub message: String,
}

/// Append-only log of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub layer_names: Vec<String>,
    pub d: usize,
    pub bit_depth: u32,
    pub rows: Vec<TraceRow>,
    pub events: Vec<TraceEvent>,
}

impl TrainTrace {
    pub fn new(layer_names: Vec<String>, d: usize, bit_depth: u32) -> Self {
        Self { layer_names, d, bit_depth, rows: Vec::new(), events: Vec::new() }
    }

    pub fn header(&self) -> String {
        let mut h = String::from("nll_nats,nll_bpd");
        for l in 0..self.layer_names.len() {
            let _ = write!(h, ",logdet_{l},var_{l},gradnorm_{l}");
        }
        h
    }

    /// CSV with a header row and one row per recorded step.
    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:?},{:?}", r.nll_nats, r.nll_bpd);
            for l in 0..r.logdet.len() {
                let _ = write!(s, ",{:?},{:?},{:?}", r.logdet[l], r.variance[l], r.grad_norm[l]);
            }
            s.push('\n');
        }
        s
    }

    pub fn events_log(&self) -> String {
        self.events.iter().map(|e| format!("{} {}\n", e.step, e.message)).collect()
    }

    /// Parses [`TrainTrace::to_csv`] output. Layer names become `layer_<l>`
    /// and steps are numbered by row.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(FlowError::EmptyTrace)?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "nll_nats" || cols[1] != "nll_bpd" || (cols.len() - 2) % 3 != 0 {
            return Err(FlowError::Config { line: 1, msg: "not a training trace header".into() });
        }
        let n_layers = (cols.len() - 2) / 3;
        let mut trace = TrainTrace::new((0..n_layers).map(|l| format!("layer_{l}")).collect(), 0, 0);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| FlowError::Config { line: i + 2, msg: e.to_string() })?;
            if vals.len() != cols.len() {
                return Err(FlowError::Config { line: i + 2, msg: format!("expected {} fields, got {}", cols.len(), vals.len()) });
            }
            let per = |k: usize| (0..n_layers).map(|l| vals[2 + 3 * l + k]).collect::<Vec<f64>>();
            trace.rows.push(TraceRow { step: trace.rows.len(), nll_nats: vals[0], nll_bpd: vals[1], logdet: per(0), variance: per(1), grad_norm: per(2) });
        }
        Ok(trace)
    }
}
