//! On-disk formats for step telemetry (CSV) and run summaries (key=value).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainloop::{Mode, RunConfig, RunSummary, StepRecord};

pub const STEP_COLUMNS: [&str; 17] = [
    "run_id",
    "seed",
    "mode",
    "epoch",
    "step",
    "kl",
    "ce",
    "dot",
    "cosine",
    "cosine_before_proj",
    "cosine_after_proj",
    "cosine_total",
    "lambda_kl",
    "projection_applied",
    "norm_trait",
    "norm_distill",
    "first_order_term",
];

/// Numeric columns that aggregation averages across seeds.
pub const NUMERIC_COLUMNS: [&str; 12] = [
    "kl",
    "ce",
    "dot",
    "cosine",
    "cosine_before_proj",
    "cosine_after_proj",
    "cosine_total",
    "lambda_kl",
    "projection_applied",
    "norm_trait",
    "norm_distill",
    "first_order_term",
];

/// Shortest round-tripping representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn record_fields(r: &StepRecord) -> [String; 17] {
    [
        r.run_id.clone(),
        r.seed.to_string(),
        r.mode.to_string(),
        r.epoch.to_string(),
        r.step.to_string(),
        fmt_f64(r.kl),
        fmt_f64(r.ce),
        fmt_f64(r.dot),
        fmt_f64(r.cosine),
        fmt_f64(r.cosine_before_proj),
        fmt_f64(r.cosine_after_proj),
        fmt_f64(r.cosine_total),
        fmt_f64(r.lambda_kl),
        (r.projection_applied as u8).to_string(),
        fmt_f64(r.norm_trait),
        fmt_f64(r.norm_distill),
        fmt_f64(r.first_order_term),
    ]
}

pub struct StepWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> StepWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(w);
        inner.write_record(STEP_COLUMNS)?;
        Ok(StepWriter { inner })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.inner.write_record(record_fields(r))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io("<steps.csv>", e))
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, column: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Aggregate(format!("column {column}: cannot parse '{field}'")))
}

pub fn read_steps(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Aggregate(format!("{} lacks column {name}", path.display())))
    };
    let idx: Vec<usize> = STEP_COLUMNS.iter().map(|c| pos(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| &row[idx[i]];
        let num = |i: usize| parse_num::<f64>(f(i), STEP_COLUMNS[i]);
        out.push(StepRecord {
            run_id: f(0).to_string(),
            seed: parse_num(f(1), "seed")?,
            mode: f(2).parse()?,
            epoch: parse_num(f(3), "epoch")?,
            step: parse_num(f(4), "step")?,
            kl: num(5)?,
            ce: num(6)?,
            dot: num(7)?,
            cosine: num(8)?,
            cosine_before_proj: num(9)?,
            cosine_after_proj: num(10)?,
            cosine_total: num(11)?,
            lambda_kl: num(12)?,
            projection_applied: parse_num::<u8>(f(13), "projection_applied")? != 0,
            norm_trait: num(14)?,
            norm_distill: num(15)?,
            first_order_term: num(16)?,
        });
    }
    Ok(out)
}

/// Config entries written into every summary; resume compares them.
pub fn config_entries(c: &RunConfig) -> Vec<(&'static str, String)> {
    vec![
        ("epochs", c.epochs.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("lr", fmt_f64(c.lr)),
        ("distill_temperature", fmt_f64(c.distill_temperature)),
        ("liminal_temperature", fmt_f64(c.liminal_temperature)),
        ("audit_estimator", c.audit_estimator.to_string()),
        ("audit_batch_size", c.audit_batch_size.to_string()),
        ("log_every", c.log_every.to_string()),
        ("noise_lo", fmt_f64(c.noise_range.0)),
        ("noise_hi", fmt_f64(c.noise_range.1)),
        ("lambda_override", c.lambda_override.map_or_else(|| "none".into(), fmt_f64)),
    ]
}

pub fn summary_text(s: &RunSummary, c: &RunConfig) -> String {
    let mut lines: Vec<(String, String)> = vec![
        ("run_id".into(), s.run_id.clone()),
        ("mode".into(), s.mode.to_string()),
        ("seed".into(), s.seed.to_string()),
        ("steps".into(), s.steps.to_string()),
        ("teacher_test_accuracy".into(), fmt_f64(s.teacher_test_accuracy)),
        ("final_test_accuracy".into(), fmt_f64(s.final_test_accuracy)),
        ("epoch_test_accuracy".into(), s.epoch_test_accuracy.iter().map(|&a| fmt_f64(a)).collect::<Vec<_>>().join(",")),
        ("frac_positive_alignment".into(), fmt_f64(s.frac_positive_alignment)),
        ("mean_cosine".into(), fmt_f64(s.mean_cosine)),
        ("epoch1_mean_cosine".into(), fmt_f64(s.epoch1_mean_cosine)),
        ("final_ce".into(), fmt_f64(s.final_ce)),
        ("final_kl".into(), fmt_f64(s.final_kl)),
        ("applied_steps".into(), s.applied_steps.to_string()),
        ("max_abs_cosine_after_proj".into(), fmt_f64(s.max_abs_cosine_after_proj)),
        ("max_first_order_rel_err".into(), fmt_f64(s.max_first_order_rel_err)),
        ("min_first_order_term".into(), fmt_f64(s.min_first_order_term)),
    ];
    lines.extend(config_entries(c).into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parsed summary file: the run summary plus its raw key=value map.
#[derive(Clone, Debug)]
pub struct SummaryFile {
    pub summary: RunSummary,
    pub entries: BTreeMap<String, String>,
}

impl SummaryFile {
    /// True when the recorded config equals `c`.
    pub fn matches_config(&self, c: &RunConfig) -> bool {
        self.summary.mode == c.mode
            && self.summary.seed == c.seed
            && config_entries(c).iter().all(|(k, v)| self.entries.get(&format!("config.{k}")) == Some(v))
    }
}

pub fn parse_summary(text: &str) -> Result<SummaryFile> {
    let mut entries = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Aggregate(format!("malformed summary line '{line}'")))?;
        entries.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get =
        |k: &str| -> Result<&String> { entries.get(k).ok_or_else(|| Error::Aggregate(format!("summary lacks {k}"))) };
    let num = |k: &str| -> Result<f64> { parse_num(get(k)?, k) };
    let epoch_acc = get("epoch_test_accuracy")?;
    let summary = RunSummary {
        run_id: get("run_id")?.clone(),
        mode: get("mode")?.parse::<Mode>()?,
        seed: parse_num(get("seed")?, "seed")?,
        steps: parse_num(get("steps")?, "steps")?,
        teacher_test_accuracy: num("teacher_test_accuracy")?,
        final_test_accuracy: num("final_test_accuracy")?,
        epoch_test_accuracy: if epoch_acc.is_empty() {
            Vec::new()
        } else {
            epoch_acc.split(',').map(|a| parse_num(a, "epoch_test_accuracy")).collect::<Result<_>>()?
        },
        frac_positive_alignment: num("frac_positive_alignment")?,
        mean_cosine: num("mean_cosine")?,
        epoch1_mean_cosine: num("epoch1_mean_cosine")?,
        final_ce: num("final_ce")?,
        final_kl: num("final_kl")?,
        applied_steps: parse_num(get("applied_steps")?, "applied_steps")?,
        max_abs_cosine_after_proj: num("max_abs_cosine_after_proj")?,
        max_first_order_rel_err: num("max_first_order_rel_err")?,
        min_first_order_term: num("min_first_order_term")?,
    };
    Ok(SummaryFile { summary, entries })
}

pub fn read_summary(path: &Path) -> Result<SummaryFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_summary(&text)
}
