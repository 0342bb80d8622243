//! CSV and JSON-lines writers for every row type the CLI emits.
//!
//! Reals are written with 17 significant digits (`{:.16e}`), which
//! round-trips every finite `f64` bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{BoundReport, LayerMoments};
use crate::error::{Error, Result};
use crate::gradcheck::GradcheckRow;
use crate::model::Placement;
use crate::training::TrialRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Jsonl,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Real(f64),
    Int(u64),
    Text(String),
    Flag(bool),
    Missing,
}

impl Field {
    pub fn render(&self) -> String {
        match self {
            Field::Real(v) => format_real(*v),
            Field::Int(v) => v.to_string(),
            Field::Text(s) => s.clone(),
            Field::Flag(b) => b.to_string(),
            Field::Missing => String::new(),
        }
    }

    fn json(&self) -> String {
        match self {
            Field::Real(v) if v.is_finite() => format_real(*v),
            Field::Real(_) | Field::Missing => "null".into(),
            Field::Int(v) => v.to_string(),
            Field::Text(s) => serde_json::to_string(s).expect("strings serialize"),
            Field::Flag(b) => b.to_string(),
        }
    }
}

pub fn format_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// A flat record with a fixed header.
pub trait Row {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<Field>;
}

/// One bound evaluation, tagged with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub report: BoundReport,
    pub seed: u64,
}

impl Row for BoundRow {
    fn header() -> &'static [&'static str] {
        &["check", "placement", "D", "delta_t", "gamma_max", "beta_max", "lhs", "rhs", "margin", "seed"]
    }

    fn fields(&self) -> Vec<Field> {
        let r = &self.report;
        vec![
            Field::Text(r.name.into()),
            Field::Text(r.placement.to_string()),
            Field::Int(r.depth as u64),
            Field::Real(r.delta_t),
            Field::Real(r.gamma_max),
            Field::Real(r.beta_max),
            Field::Real(r.lhs),
            Field::Real(r.rhs),
            Field::Real(r.margin),
            Field::Int(self.seed),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub moments: LayerMoments,
    pub seed: u64,
    pub placement: Placement,
    pub delta_t: f64,
}

impl Row for MomentRow {
    fn header() -> &'static [&'static str] {
        &["layer", "ma", "var", "frob", "seed", "placement", "delta_t"]
    }

    fn fields(&self) -> Vec<Field> {
        let m = &self.moments;
        vec![
            Field::Int(m.layer as u64),
            Field::Real(m.ma),
            Field::Real(m.var),
            Field::Real(m.frob),
            Field::Int(self.seed),
            Field::Text(self.placement.to_string()),
            Field::Real(self.delta_t),
        ]
    }
}

impl Row for TrialRow {
    fn header() -> &'static [&'static str] {
        &["placement", "weight_decay", "seed", "diverged", "first_divergence_step", "final_loss"]
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Text(self.placement.to_string()),
            Field::Real(self.weight_decay),
            Field::Int(self.seed),
            Field::Flag(self.outcome.diverged),
            self.outcome
                .first_divergence_step
                .map_or(Field::Missing, |s| Field::Int(s as u64)),
            Field::Real(self.outcome.final_loss),
        ]
    }
}

impl Row for GradcheckRow {
    fn header() -> &'static [&'static str] {
        &["check", "instance", "seed", "max_rel_err", "tolerance", "pass"]
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Text(self.check.into()),
            Field::Int(self.instance as u64),
            Field::Int(self.seed),
            Field::Real(self.max_rel_err),
            Field::Real(self.tolerance),
            Field::Flag(self.pass),
        ]
    }
}

/// Loss and moment curves of one run, one row per (step, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub placement: Placement,
    pub weight_decay: f64,
    pub seed: u64,
    pub step: usize,
    pub layer: usize,
    pub ma: f64,
    pub var: f64,
}

impl Row for CurveRow {
    fn header() -> &'static [&'static str] {
        &["placement", "weight_decay", "seed", "step", "layer", "ma", "var"]
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Text(self.placement.to_string()),
            Field::Real(self.weight_decay),
            Field::Int(self.seed),
            Field::Int(self.step as u64),
            Field::Int(self.layer as u64),
            Field::Real(self.ma),
            Field::Real(self.var),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

impl Row for LossRow {
    fn header() -> &'static [&'static str] {
        &["step", "loss"]
    }

    fn fields(&self) -> Vec<Field> {
        vec![Field::Int(self.step as u64), Field::Real(self.loss)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub criterion: String,
    pub status: String,
    pub detail: String,
}

impl Row for SummaryRow {
    fn header() -> &'static [&'static str] {
        &["criterion", "status", "detail"]
    }

    fn fields(&self) -> Vec<Field> {
        vec![
            Field::Text(self.criterion.clone()),
            Field::Text(self.status.clone()),
            Field::Text(self.detail.clone()),
        ]
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Renders rows into the bytes of a report file.
pub fn render_report<R: Row>(rows: &[R], format: Format) -> Vec<u8> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(R::header()).expect("in-memory write");
            for r in rows {
                w.write_record(r.fields().iter().map(Field::render)).expect("in-memory write");
            }
            w.into_inner().expect("in-memory flush")
        }
        Format::Jsonl => {
            let mut out = Vec::new();
            for r in rows {
                let body: Vec<String> = R::header()
                    .iter()
                    .zip(r.fields())
                    .map(|(k, v)| format!("\"{k}\":{}", v.json()))
                    .collect();
                writeln!(out, "{{{}}}", body.join(",")).expect("in-memory write");
            }
            out
        }
    }
}

pub fn write_report<R: Row>(rows: &[R], format: Format, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&render_report(rows, format)).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// A report file read back as `(header, records)`; JSON nulls become empty
/// strings, columns keep file order and numbers parse back bit-exactly.
pub fn read_report(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let file = File::open(path).map_err(io_err(path))?;
    if !is_jsonl {
        let mut r = csv::Reader::from_reader(file);
        let header = r
            .headers()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        return Ok((header, rows));
    }
    let mut header: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if header.is_empty() {
            header = obj.keys().cloned().collect();
        }
        rows.push(
            obj.values()
                .map(|v| match v {
                    serde_json::Value::Null => String::new(),
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect(),
        );
    }
    Ok((header, rows))
}
