//! The `lnlab` command line: config loading, flag overrides, subcommand
//! dispatch and the exit-code contract (0 pass, 1 check failure or runtime
//! error, 2 bad usage or bad config).

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_suite_with, DimsSource, GradcheckRow, GRADCHECK_TOLERANCE};
use crate::model::{ModelConfig, Placement};
use crate::report::{read_report, write_report, BoundRow, CurveRow, Format, LossRow, Row, SummaryRow};
use crate::suites::{bound_suite, moment_rows, ot_suite, BoundOptions, Init, OtOptions};
use crate::training::{stability_trial, train_run, TaskKind, TrainConfig, TrialOutcome, TrialRow, TrialTable};

/// Training settings of a run file; the model comes from the `model`
/// section and the seed from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub task: TaskKind,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub divergence_threshold: f64,
    pub batch_size: usize,
    pub noise: f64,
    pub checkpoint_every: usize,
    /// Placements compared by `sweep`.
    pub placements: Vec<Placement>,
    /// Weight decays compared by `sweep`; the first is the "off" setting.
    pub weight_decays: Vec<f64>,
    /// Number of consecutive seeds per `sweep` cell.
    pub trial_seeds: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            task: t.task,
            steps: t.steps,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            divergence_threshold: t.divergence_threshold,
            batch_size: t.batch_size,
            noise: t.noise,
            checkpoint_every: t.checkpoint_every,
            placements: vec![Placement::Off, Placement::Pre, Placement::Peri],
            weight_decays: vec![0.0, 0.5],
            trial_seeds: 20,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, cfg: &ModelConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            task: self.task,
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            divergence_threshold: self.divergence_threshold,
            batch_size: self.batch_size,
            noise: self.noise,
            checkpoint_every: self.checkpoint_every,
            cfg: cfg.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub gradcheck_instances: usize,
    /// Draw dimensions per instance instead of using the model section.
    pub gradcheck_random_dims: bool,
    pub gradcheck_tolerance: f64,
    pub bound_instances: usize,
    /// Rounding slack granted to every bound margin.
    pub bound_slack: f64,
    /// Depths swept by `bounds`; empty means the model depth.
    pub depths: Vec<usize>,
    /// Steps swept by `bounds`; empty means the model step.
    pub delta_ts: Vec<f64>,
    pub bounds: BoundOptions,
    pub ot_instances: usize,
    pub ot: OtOptions,
    pub init: Init,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            gradcheck_instances: 100,
            gradcheck_random_dims: false,
            gradcheck_tolerance: GRADCHECK_TOLERANCE,
            bound_instances: 100,
            bound_slack: 1e-9,
            depths: Vec::new(),
            delta_ts: Vec::new(),
            bounds: BoundOptions::default(),
            ot_instances: 20,
            ot: OtOptions::default(),
            init: Init::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub format: Format,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output: PathBuf::from("out"),
            format: Format::Csv,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON run file; errors name the line, column and field.
    pub fn from_json(text: &str, origin: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.to_train_config(&self.model, self.seed).validate()
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// off, pre, peri or post.
    #[arg(long, global = true)]
    pub placement: Option<Placement>,
    #[arg(long = "delta-t", global = true)]
    pub delta_t: Option<f64>,
    #[arg(long, global = true)]
    pub depth: Option<u32>,
    /// Instance (or seed) count of the selected suite.
    #[arg(long, global = true)]
    pub instances: Option<u32>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Finite differences against every analytic derivative.
    Gradcheck,
    /// Growth, datawise, pathwise and chain bounds.
    Bounds,
    /// Per-layer moments of one model.
    Diagnose,
    /// One training run.
    Train,
    /// Divergence counts over placements, weight decays and seeds.
    Sweep,
    /// Exact transport distances and their propagation bound.
    OtCheck,
    /// Pass/fail summary of the reports already in the output directory.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Bounds => "bounds",
            Command::Diagnose => "diagnose",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::OtCheck => "ot-check",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lnlab", version, about = "Layer-normalization placement lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// The run file, then the flags on top of it.
pub fn resolve_config(o: &Overrides, command: Command) -> Result<RunConfig> {
    let mut rc = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        rc.seed = s;
    }
    if let Some(p) = o.placement {
        rc.model.placement = p;
    }
    if let Some(dt) = o.delta_t {
        rc.model.delta_t = dt;
        rc.diagnostics.delta_ts.clear();
    }
    if let Some(d) = o.depth {
        rc.model.depth = d as usize;
        rc.diagnostics.depths.clear();
    }
    if let Some(n) = o.instances {
        let n = n as usize;
        match command {
            Command::Gradcheck => rc.diagnostics.gradcheck_instances = n,
            Command::Bounds => rc.diagnostics.bound_instances = n,
            Command::OtCheck => rc.diagnostics.ot_instances = n,
            Command::Sweep => rc.train.trial_seeds = n,
            _ => {}
        }
    }
    if let Some(out) = &o.out {
        rc.output = out.clone();
    }
    if let Some(f) = o.format {
        rc.format = f;
    }
    rc.validate()?;
    Ok(rc)
}

/// What a subcommand found.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    /// First failing row, if any check failed.
    pub failure: Option<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            files: Vec::new(),
            summary: Vec::new(),
            failure: None,
        }
    }

    fn fail_first(&mut self, msg: impl FnOnce() -> String) {
        if self.failure.is_none() {
            self.failure = Some(msg());
        }
    }
}

fn emit<R: Row>(rc: &RunConfig, stem: &str, rows: &[R], out: &mut Outcome) -> Result<()> {
    let path = rc.output.join(format!("{stem}.{}", rc.format.extension()));
    write_report(rows, rc.format, &path)?;
    out.files.push(path);
    Ok(())
}

fn describe<R: Row>(row: &R) -> String {
    R::header()
        .iter()
        .zip(row.fields())
        .map(|(k, v)| format!("{k}={}", v.render()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run_gradcheck(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let tol = rc.diagnostics.gradcheck_tolerance;
    let dims = if rc.diagnostics.gradcheck_random_dims {
        DimsSource::Random
    } else {
        DimsSource::Fixed(rc.model.clone())
    };
    let rows: Vec<GradcheckRow> = gradcheck_suite_with(rc.seed, rc.diagnostics.gradcheck_instances, &dims)?
        .into_iter()
        .map(|r| GradcheckRow {
            tolerance: tol,
            pass: r.max_rel_err <= tol,
            ..r
        })
        .collect();
    emit(rc, "gradcheck", &rows, out)?;
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max);
    out.summary.push(format!(
        "max rel err {worst:.3e} over {} rows (tolerance {tol:.0e})",
        rows.len()
    ));
    if let Some(r) = rows.iter().find(|r| !r.pass) {
        out.fail_first(|| describe(r));
    }
    Ok(())
}

fn sweep_axes(rc: &RunConfig) -> (Vec<usize>, Vec<f64>) {
    let d = &rc.diagnostics;
    let depths = if d.depths.is_empty() { vec![rc.model.depth] } else { d.depths.clone() };
    let dts = if d.delta_ts.is_empty() { vec![rc.model.delta_t] } else { d.delta_ts.clone() };
    (depths, dts)
}

fn bound_failures(rows: &[BoundRow], slack: f64, out: &mut Outcome) {
    for r in rows.iter().filter(|r| r.report.name != "pre_witness") {
        if r.report.margin < -slack {
            out.fail_first(|| describe(r));
        }
    }
}

fn run_bounds(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let (depths, dts) = sweep_axes(rc);
    let opts = &rc.diagnostics.bounds;
    let rows = bound_suite(&rc.model, opts, &depths, &dts, rc.seed, rc.diagnostics.bound_instances)?;
    emit(rc, "bounds", &rows, out)?;
    let min_margin = rows
        .iter()
        .filter(|r| r.report.name != "pre_witness")
        .map(|r| r.report.margin)
        .fold(f64::INFINITY, f64::min);
    out.summary.push(format!("{} bound rows, smallest margin {min_margin:.6e}", rows.len()));
    bound_failures(&rows, rc.diagnostics.bound_slack, out);
    let witness: Vec<&BoundRow> = rows.iter().filter(|r| r.report.name == "pre_witness").collect();
    if !witness.is_empty() {
        let hits = witness.iter().filter(|r| r.report.margin >= 0.0).count();
        out.summary.push(format!(
            "chain growth exceeds {}x the Peri model on {hits}/{} instances",
            opts.witness_ratio,
            witness.len()
        ));
        if 10 * hits < 9 * witness.len() {
            out.fail_first(|| format!("chain growth ratio reached on only {hits}/{} instances", witness.len()));
        }
    }
    Ok(())
}

fn run_diagnose(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let rows = moment_rows(&rc.model, rc.diagnostics.init, rc.seed)?;
    emit(rc, "moments", &rows, out)?;
    let last = rows.last().expect("at least X_0");
    out.summary.push(format!(
        "{} layers, final MA {:.6e}, final Var {:.6e}",
        rows.len() - 1,
        last.moments.ma,
        last.moments.var
    ));
    Ok(())
}

fn curve_rows(row: &TrialRow) -> Vec<CurveRow> {
    row.outcome
        .moment_curves
        .iter()
        .flat_map(|snap| {
            snap.layers.iter().enumerate().map(move |(layer, &(ma, var))| CurveRow {
                placement: row.placement,
                weight_decay: row.weight_decay,
                seed: row.seed,
                step: snap.step,
                layer,
                ma,
                var,
            })
        })
        .collect()
}

fn loss_rows(o: &TrialOutcome) -> Vec<LossRow> {
    o.loss_curve
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect()
}

fn run_train(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let tc = rc.train.to_train_config(&rc.model, rc.seed);
    let outcome = train_run(&tc)?;
    let row = TrialRow {
        placement: rc.model.placement,
        weight_decay: tc.weight_decay,
        seed: rc.seed,
        outcome,
    };
    emit(rc, "trials", std::slice::from_ref(&row), out)?;
    emit(rc, "loss_curve", &loss_rows(&row.outcome), out)?;
    emit(rc, "curves", &curve_rows(&row), out)?;
    out.summary.push(format!(
        "{} placement: final loss {:.6e} after {} evaluations",
        row.placement,
        row.outcome.final_loss,
        row.outcome.loss_curve.len()
    ));
    if row.outcome.diverged {
        out.fail_first(|| describe(&row));
    }
    Ok(())
}

/// The divergence orderings a sweep is expected to show. Returns a
/// description of the first violated one.
pub fn trial_ordering_violation(table: &TrialTable, weight_decays: &[f64]) -> Option<String> {
    let placements: Vec<Placement> = {
        let mut seen = Vec::new();
        for r in &table.rows {
            if !seen.contains(&r.placement) {
                seen.push(r.placement);
            }
        }
        seen
    };
    let order = [Placement::Off, Placement::Pre, Placement::Peri];
    for &wd in weight_decays {
        let counts: Vec<(Placement, usize)> = order
            .iter()
            .filter(|p| placements.contains(p))
            .map(|&p| (p, table.diverged_count(p, wd)))
            .collect();
        for w in counts.windows(2) {
            if w[0].1 < w[1].1 {
                return Some(format!(
                    "weight_decay {wd}: {} diverged {} < {} diverged {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ));
            }
        }
        if let Some(&(_, c)) = counts.iter().find(|(p, _)| *p == Placement::Peri) {
            if c > 0 {
                return Some(format!("weight_decay {wd}: peri diverged {c} times"));
            }
        }
    }
    if let (Some(&off), true) = (weight_decays.first(), placements.contains(&Placement::Pre)) {
        let base = table.diverged_count(Placement::Pre, off);
        for &wd in &weight_decays[1..] {
            let c = table.diverged_count(Placement::Pre, wd);
            if c > base {
                return Some(format!(
                    "pre diverged {c} times with weight_decay {wd} but {base} with {off}"
                ));
            }
        }
    }
    None
}

fn run_sweep(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let base = rc.train.to_train_config(&rc.model, rc.seed);
    let seeds: Vec<u64> = (0..rc.train.trial_seeds as u64).map(|i| rc.seed + i).collect();
    let table = stability_trial(&base, &rc.train.placements, &rc.train.weight_decays, &seeds)?;
    emit(rc, "trials", &table.rows, out)?;
    let curves: Vec<CurveRow> = table.rows.iter().flat_map(curve_rows).collect();
    emit(rc, "curves", &curves, out)?;
    for (p, wd, diverged, runs) in table.counts() {
        out.summary.push(format!("{p} weight_decay {wd}: {diverged}/{runs} diverged"));
    }
    if let Some(v) = trial_ordering_violation(&table, &rc.train.weight_decays) {
        out.fail_first(|| v);
    }
    Ok(())
}

fn run_ot_check(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let rows = ot_suite(&rc.model, &rc.diagnostics.ot, rc.seed, rc.diagnostics.ot_instances)?;
    emit(rc, "ot_check", &rows, out)?;
    let worst_gap = rows
        .iter()
        .filter(|r| r.report.name == "ot_bruteforce")
        .map(|r| r.report.lhs)
        .fold(0.0f64, f64::max);
    out.summary.push(format!(
        "{} rows, matching vs enumeration gap {worst_gap:.3e}",
        rows.len()
    ));
    for r in &rows {
        let ok = match r.report.name {
            "ot_bruteforce" => r.report.lhs <= r.report.rhs,
            _ => r.report.margin >= -rc.diagnostics.bound_slack,
        };
        if !ok {
            out.fail_first(|| describe(r));
        }
    }
    Ok(())
}

/// A report file as records keyed by column name.
struct Table {
    rows: Vec<HashMap<String, String>>,
}

impl Table {
    fn find(dir: &Path, stem: &str) -> Result<Option<Table>> {
        for ext in ["csv", "jsonl"] {
            let path = dir.join(format!("{stem}.{ext}"));
            if path.exists() {
                let (header, recs) = read_report(&path)?;
                let rows = recs
                    .into_iter()
                    .map(|r| header.iter().cloned().zip(r).collect())
                    .collect();
                return Ok(Some(Table { rows }));
            }
        }
        Ok(None)
    }

    fn num(row: &HashMap<String, String>, key: &str) -> Result<f64> {
        let v = row
            .get(key)
            .ok_or_else(|| Error::Config(format!("report column {key} is missing")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("report column {key} holds {v:?}, not a number")))
    }
}

fn status(ok: bool) -> String {
    if ok { "PASS" } else { "FAIL" }.into()
}

fn summarize_bounds(t: &Table, names: &[&str], slack: f64) -> Result<Option<(bool, String)>> {
    let mut n = 0;
    let mut worst = f64::INFINITY;
    for r in t.rows.iter().filter(|r| names.contains(&r["check"].as_str())) {
        n += 1;
        worst = worst.min(Table::num(r, "margin")?);
    }
    Ok((n > 0).then(|| (worst >= -slack, format!("{n} rows, smallest margin {worst:.6e}"))))
}

fn run_report(rc: &RunConfig, out: &mut Outcome) -> Result<()> {
    let dir = &rc.output;
    let slack = rc.diagnostics.bound_slack;
    let mut rows = Vec::new();
    let mut push = |criterion: &str, ok: bool, detail: String| {
        rows.push(SummaryRow {
            criterion: criterion.into(),
            status: status(ok),
            detail,
        })
    };
    if let Some(t) = Table::find(dir, "gradcheck")? {
        let mut worst = 0.0f64;
        let mut ok = true;
        for r in &t.rows {
            let e = Table::num(r, "max_rel_err")?;
            worst = worst.max(e);
            ok &= e <= Table::num(r, "tolerance")?;
        }
        push("gradients", ok && !t.rows.is_empty(), format!("{} rows, max rel err {worst:.3e}", t.rows.len()));
    }
    if let Some(t) = Table::find(dir, "bounds")? {
        if let Some((ok, d)) = summarize_bounds(&t, &["peri_ma", "peri_var", "datawise_var"], slack)? {
            push("growth", ok, d);
        }
        if let Some((ok, d)) = summarize_bounds(&t, &["pathwise"], slack)? {
            push("pathwise", ok, d);
        }
        if let Some((ok, d)) = summarize_bounds(&t, &["pre_chain"], 0.0)? {
            push("chain", ok, d);
        }
        let w: Vec<_> = t.rows.iter().filter(|r| r["check"] == "pre_witness").collect();
        if !w.is_empty() {
            let mut hits = 0;
            for r in &w {
                hits += (Table::num(r, "margin")? >= 0.0) as usize;
            }
            push("chain_growth", 10 * hits >= 9 * w.len(), format!("{hits}/{} instances", w.len()));
        }
    }
    if let Some(t) = Table::find(dir, "ot_check")? {
        let mut ok = true;
        for r in &t.rows {
            ok &= if r["check"] == "ot_bruteforce" {
                Table::num(r, "lhs")? <= Table::num(r, "rhs")?
            } else {
                Table::num(r, "margin")? >= -slack
            };
        }
        push("transport", ok && !t.rows.is_empty(), format!("{} rows", t.rows.len()));
    }
    if let Some(t) = Table::find(dir, "trials")? {
        let mut counts: Vec<(String, String, usize, usize)> = Vec::new();
        for r in &t.rows {
            let key = (r["placement"].clone(), r["weight_decay"].clone());
            let div = (r["diverged"] == "true") as usize;
            match counts.iter_mut().find(|c| (c.0.as_str(), c.1.as_str()) == (key.0.as_str(), key.1.as_str())) {
                Some(c) => {
                    c.2 += div;
                    c.3 += 1;
                }
                None => counts.push((key.0, key.1, div, 1)),
            }
        }
        let table = TrialTable {
            rows: t
                .rows
                .iter()
                .map(|r| -> Result<TrialRow> {
                    Ok(TrialRow {
                        placement: r["placement"].parse()?,
                        weight_decay: Table::num(r, "weight_decay")?,
                        seed: Table::num(r, "seed")? as u64,
                        outcome: TrialOutcome {
                            diverged: r["diverged"] == "true",
                            first_divergence_step: None,
                            final_loss: f64::NAN,
                            loss_curve: Vec::new(),
                            moment_curves: Vec::new(),
                            final_params: Vec::new(),
                        },
                    })
                })
                .collect::<Result<_>>()?,
        };
        let mut wds: Vec<f64> = Vec::new();
        for r in &table.rows {
            if !wds.contains(&r.weight_decay) {
                wds.push(r.weight_decay);
            }
        }
        let detail = counts
            .iter()
            .map(|(p, wd, d, n)| format!("{p}@{}:{d}/{n}", wd.parse::<f64>().unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" ");
        let violation = trial_ordering_violation(&table, &wds);
        push("divergence", violation.is_none(), violation.unwrap_or(detail));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no reports found in {}", dir.display())));
    }
    for r in &rows {
        out.summary.push(format!("{} {}: {}", r.status, r.criterion, r.detail));
        if r.status == "FAIL" {
            out.fail_first(|| describe(r));
        }
    }
    emit(rc, "summary", &rows, out)
}

/// Runs one subcommand against a resolved config.
pub fn run_subcommand(command: Command, rc: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::new();
    match command {
        Command::Gradcheck => run_gradcheck(rc, &mut out)?,
        Command::Bounds => run_bounds(rc, &mut out)?,
        Command::Diagnose => run_diagnose(rc, &mut out)?,
        Command::Train => run_train(rc, &mut out)?,
        Command::Sweep => run_sweep(rc, &mut out)?,
        Command::OtCheck => run_ot_check(rc, &mut out)?,
        Command::Report => run_report(rc, &mut out)?,
    }
    Ok(out)
}

fn thread_cap() -> std::result::Result<Option<usize>, String> {
    match std::env::var("LNLAB_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("LNLAB_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

/// Parses `args`, runs, writes human-readable lines to `stdout` and
/// `stderr`, and returns the exit code.
pub fn run_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                2
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    let rc = match resolve_config(&cli.overrides, cli.command) {
        Ok(rc) => rc,
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(stderr, "{e}");
            return 2;
        }
        Err(e) => {
            let _ = writeln!(stderr, "invalid configuration: {e}");
            return 2;
        }
    };
    let threads = match thread_cap() {
        Ok(t) => t,
        Err(msg) => {
            let _ = writeln!(stderr, "invalid configuration: {msg}");
            return 2;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(|| run_subcommand(cli.command, &rc)),
        Err(e) => {
            let _ = writeln!(stderr, "error: thread pool: {e}");
            return 1;
        }
    };
    match result {
        Ok(out) => {
            for line in &out.summary {
                let _ = writeln!(stdout, "{}: {line}", cli.command.name());
            }
            for f in &out.files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            match out.failure {
                None => 0,
                Some(row) => {
                    let _ = writeln!(stderr, "{} failed: {row}", cli.command.name());
                    1
                }
            }
        }
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(stderr, "{e}");
            2
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
