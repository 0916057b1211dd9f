//! Cross-seed aggregation: per-step mean and sample SD of the telemetry, and
//! headline statistics from run summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::expcli::records::{self, fmt_f64, NUMERIC_COLUMNS};
use crate::trainloop::{Mode, RunSummary, StepRecord};

/// Mean and sample SD (n - 1 denominator). SD is `None` for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1) as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesColumn {
    pub mean: Vec<f64>,
    pub sd: Vec<Option<f64>>,
}

/// Per-step statistics across runs that share a step grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateSeries {
    pub steps: Vec<usize>,
    pub n: Vec<usize>,
    pub columns: BTreeMap<String, SeriesColumn>,
}

fn column_value(r: &StepRecord, name: &str) -> f64 {
    match name {
        "kl" => r.kl,
        "ce" => r.ce,
        "dot" => r.dot,
        "cosine" => r.cosine,
        "cosine_before_proj" => r.cosine_before_proj,
        "cosine_after_proj" => r.cosine_after_proj,
        "cosine_total" => r.cosine_total,
        "lambda_kl" => r.lambda_kl,
        "projection_applied" => r.projection_applied as u8 as f64,
        "norm_trait" => r.norm_trait,
        "norm_distill" => r.norm_distill,
        "first_order_term" => r.first_order_term,
        other => unreachable!("unknown column {other}"),
    }
}

pub fn aggregate_runs(runs: &[Vec<StepRecord>]) -> Result<AggregateSeries> {
    let first = runs.first().ok_or_else(|| Error::Aggregate("no runs to aggregate".into()))?;
    let steps: Vec<usize> = first.iter().map(|r| r.step).collect();
    for run in runs {
        let grid: Vec<usize> = run.iter().map(|r| r.step).collect();
        if grid != steps {
            let id = run.first().map_or("<empty>", |r| r.run_id.as_str());
            return Err(Error::Aggregate(format!("run {id} has a different step grid")));
        }
    }
    let mut columns = BTreeMap::new();
    for name in NUMERIC_COLUMNS {
        let mut col = SeriesColumn { mean: Vec::with_capacity(steps.len()), sd: Vec::with_capacity(steps.len()) };
        for i in 0..steps.len() {
            let vals: Vec<f64> = runs.iter().map(|run| column_value(&run[i], name)).collect();
            let (m, s) = mean_sd(&vals);
            col.mean.push(m);
            col.sd.push(s);
        }
        columns.insert(name.to_string(), col);
    }
    Ok(AggregateSeries { n: vec![runs.len(); steps.len()], steps, columns })
}

pub fn write_aggregate_csv(series: &AggregateSeries, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(path)?;
    let mut header = vec!["step".to_string(), "n".to_string()];
    for name in series.columns.keys() {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_sd"));
    }
    w.write_record(&header)?;
    for i in 0..series.steps.len() {
        let mut row = vec![series.steps[i].to_string(), series.n[i].to_string()];
        for col in series.columns.values() {
            row.push(fmt_f64(col.mean[i]));
            row.push(col.sd[i].map(fmt_f64).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an aggregate CSV. Every `<name>_mean` column becomes a series.
pub fn read_aggregate_csv(path: &Path) -> Result<AggregateSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col_of = |name: &str| headers.iter().position(|h| h == name);
    let step_i = col_of("step").ok_or_else(|| Error::Aggregate(format!("{} lacks column step", path.display())))?;
    let n_i = col_of("n");
    let names: Vec<String> = headers.iter().filter_map(|h| h.strip_suffix("_mean")).map(str::to_string).collect();
    let mut series = AggregateSeries { steps: Vec::new(), n: Vec::new(), columns: BTreeMap::new() };
    for name in &names {
        series.columns.insert(name.clone(), SeriesColumn { mean: Vec::new(), sd: Vec::new() });
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Aggregate(format!("column {what}: cannot parse '{s}'")))
    };
    for row in rdr.records() {
        let row = row?;
        series.steps.push(parse(&row[step_i], "step")? as usize);
        series.n.push(n_i.map_or(Ok(1.0), |i| parse(&row[i], "n"))? as usize);
        for name in &names {
            let col = series.columns.get_mut(name).expect("inserted above");
            col.mean.push(parse(&row[col_of(&format!("{name}_mean")).unwrap()], name)?);
            let sd = col_of(&format!("{name}_sd")).map(|i| &row[i]).filter(|s| !s.is_empty());
            col.sd.push(sd.map(|s| parse(s, name)).transpose()?);
        }
    }
    Ok(series)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Stat {
    fn of(values: &[f64]) -> Stat {
        let (mean, sd) = mean_sd(values);
        Stat { mean, sd }
    }
}

/// Headline numbers for one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Headline {
    pub mode: Mode,
    pub runs: usize,
    pub final_test_accuracy: Stat,
    pub min_final_test_accuracy: f64,
    pub max_final_test_accuracy: f64,
    pub frac_positive_alignment: Stat,
    pub mean_cosine: Stat,
    pub epoch1_mean_cosine: Stat,
    pub final_kl: Stat,
    pub final_ce: Stat,
    pub teacher_test_accuracy: Stat,
}

pub fn headline(mode: Mode, summaries: &[RunSummary]) -> Result<Headline> {
    if summaries.is_empty() {
        return Err(Error::Aggregate(format!("no {mode} runs")));
    }
    if let Some(s) = summaries.iter().find(|s| s.mode != mode) {
        return Err(Error::Aggregate(format!("run {} is not a {mode} run", s.run_id)));
    }
    let col = |f: fn(&RunSummary) -> f64| -> Vec<f64> { summaries.iter().map(f).collect() };
    let acc = col(|s| s.final_test_accuracy);
    Ok(Headline {
        mode,
        runs: summaries.len(),
        min_final_test_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
        max_final_test_accuracy: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_test_accuracy: Stat::of(&acc),
        frac_positive_alignment: Stat::of(&col(|s| s.frac_positive_alignment)),
        mean_cosine: Stat::of(&col(|s| s.mean_cosine)),
        epoch1_mean_cosine: Stat::of(&col(|s| s.epoch1_mean_cosine)),
        final_kl: Stat::of(&col(|s| s.final_kl)),
        final_ce: Stat::of(&col(|s| s.final_ce)),
        teacher_test_accuracy: Stat::of(&col(|s| s.teacher_test_accuracy)),
    })
}

impl Headline {
    pub fn to_text(&self) -> String {
        let stat = |name: &str, s: &Stat| -> String {
            format!(
                "{name}_mean={}\n{name}_sd={}\n",
                fmt_f64(s.mean),
                s.sd.map(fmt_f64).unwrap_or_else(|| "n/a".into())
            )
        };
        let mut out = format!("mode={}\nruns={}\n", self.mode, self.runs);
        out += &stat("final_test_accuracy", &self.final_test_accuracy);
        out += &format!("final_test_accuracy_min={}\n", fmt_f64(self.min_final_test_accuracy));
        out += &format!("final_test_accuracy_max={}\n", fmt_f64(self.max_final_test_accuracy));
        out += &stat("frac_positive_alignment", &self.frac_positive_alignment);
        out += &stat("mean_cosine", &self.mean_cosine);
        out += &stat("epoch1_mean_cosine", &self.epoch1_mean_cosine);
        out += &stat("final_kl", &self.final_kl);
        out += &stat("final_ce", &self.final_ce);
        out += &stat("teacher_test_accuracy", &self.teacher_test_accuracy);
        out
    }

    /// One-line human summary, e.g. `control: acc 55.28±10.48% [26.31, 76.04] ...`.
    pub fn display_line(&self) -> String {
        let pm = |s: &Stat, scale: f64, prec: usize| match s.sd {
            Some(sd) => format!("{:.prec$}±{:.prec$}", s.mean * scale, sd * scale),
            None => format!("{:.prec$}", s.mean * scale),
        };
        format!(
            "{} (n={}): final acc {}% [{:.2}, {:.2}], frac positive {}, mean cosine {}, epoch-1 cosine {}",
            self.mode,
            self.runs,
            pm(&self.final_test_accuracy, 100.0, 2),
            self.min_final_test_accuracy * 100.0,
            self.max_final_test_accuracy * 100.0,
            pm(&self.frac_positive_alignment, 1.0, 3),
            pm(&self.mean_cosine, 1.0, 5),
            pm(&self.epoch1_mean_cosine, 1.0, 5),
        )
    }
}

/// Run directories under `out` named `<mode>-seed<k>` that hold a summary.
pub fn find_run_dirs(out: &Path, mode: Mode) -> Result<Vec<PathBuf>> {
    let prefix = format!("{mode}-seed");
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    let entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seed) = name.strip_prefix(&prefix).and_then(|s| s.parse::<u64>().ok()) {
            if entry.path().join("summary.txt").is_file() {
                found.push((seed, entry.path()));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub struct ModeAggregate {
    pub series: AggregateSeries,
    pub headline: Headline,
}

/// Aggregates the given run directories (all of one mode).
pub fn aggregate_dirs(mode: Mode, dirs: &[PathBuf]) -> Result<ModeAggregate> {
    let mut runs = Vec::with_capacity(dirs.len());
    let mut summaries = Vec::with_capacity(dirs.len());
    for d in dirs {
        runs.push(records::read_steps(&d.join("steps.csv"))?);
        summaries.push(records::read_summary(&d.join("summary.txt"))?.summary);
    }
    Ok(ModeAggregate { series: aggregate_runs(&runs)?, headline: headline(mode, &summaries)? })
}

/// Writes `aggregate-<mode>.csv` and `headline-<mode>.txt` for every mode
/// with finished runs under `out`.
pub fn cmd_aggregate(out: &Path, modes: &[Mode]) -> Result<Vec<Headline>> {
    let mut headlines = Vec::new();
    for &mode in modes {
        let dirs = find_run_dirs(out, mode)?;
        if dirs.is_empty() {
            continue;
        }
        let agg = aggregate_dirs(mode, &dirs)?;
        write_aggregate_csv(&agg.series, &out.join(format!("aggregate-{mode}.csv")))?;
        let path = out.join(format!("headline-{mode}.txt"));
        fs::write(&path, agg.headline.to_text()).map_err(|e| Error::io(&path, e))?;
        headlines.push(agg.headline);
    }
    if headlines.is_empty() {
        return Err(Error::Aggregate(format!("no finished runs under {}", out.display())));
    }
    Ok(headlines)
}
