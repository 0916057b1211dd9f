//! Experiment orchestration: single runs, seed sweeps, aggregation and plots.

pub mod aggregate;
pub mod plot;
pub mod records;

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::dataio::Mnist;
use crate::error::{Error, Result};
use crate::mlpnet::MlpParams;
use crate::trainloop::{self, AuditEstimator, Mode, RunConfig, RunSummary, StepRecord, TeacherConfig, TeacherOutcome};

pub use aggregate::cmd_aggregate;
pub use plot::cmd_plot;

/// Optional replacements for the per-mode defaults of [`RunConfig::new`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub distill_temperature: Option<f64>,
    pub liminal_temperature: Option<f64>,
    pub audit_estimator: Option<AuditEstimator>,
    pub log_every: Option<usize>,
    pub lambda_override: Option<f64>,
}

impl RunOverrides {
    pub fn config(&self, mode: Mode, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(mode, seed);
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.distill_temperature {
            c.distill_temperature = v;
        }
        if let Some(v) = self.liminal_temperature {
            c.liminal_temperature = v;
        }
        if let Some(v) = self.audit_estimator {
            c.audit_estimator = v;
        }
        if let Some(v) = self.log_every {
            c.log_every = v;
        }
        if self.lambda_override.is_some() {
            c.lambda_override = self.lambda_override;
        }
        c
    }
}

/// Parses `a..b` (exclusive), `a..=b` (inclusive) or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list '{s}' (expected a..b, a..=b or a,b,c)"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub out: PathBuf,
    pub overrides: RunOverrides,
    pub resume: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one mode and one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(Error::Config(format!("duplicate seed {s}")));
            }
        }
        let mut modes = self.modes.clone();
        modes.sort_by_key(|m| m.as_str());
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(Error::Config("duplicate mode".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// Jobs in manifest order: mode-major, then seed.
    pub fn jobs(&self) -> Vec<RunConfig> {
        self.modes
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .map(|(m, s)| self.overrides.config(m, s))
            .collect()
    }
}

fn teacher_meta(seed: u64, cfg: TeacherConfig) -> String {
    format!("seed={seed}\nepochs={}\nbatch_size={}\nlr={}\n", cfg.epochs, cfg.batch_size, records::fmt_f64(cfg.lr))
}

/// On-disk teacher store under `<out>/teachers/seed<k>/`, shared by all modes
/// of a seed. Concurrent requests for one seed train it once.
pub struct TeacherCache {
    dir: PathBuf,
    locks: Mutex<HashMap<u64, Arc<Mutex<()>>>>,
}

impl TeacherCache {
    pub fn new(out: &Path) -> Self {
        TeacherCache { dir: out.join("teachers"), locks: Mutex::new(HashMap::new()) }
    }

    fn load(dir: &Path, meta: &str) -> Option<TeacherOutcome> {
        let text = fs::read_to_string(dir.join("meta.txt")).ok()?;
        let (head, acc) = text.rsplit_once("test_accuracy=")?;
        if head != meta {
            return None;
        }
        Some(TeacherOutcome {
            teacher: MlpParams::load_checkpoint(&dir.join("teacher.ckpt")).ok()?,
            base: MlpParams::load_checkpoint(&dir.join("base.ckpt")).ok()?,
            test_accuracy: acc.trim().parse().ok()?,
        })
    }

    pub fn get_or_train(
        &self,
        seed: u64,
        cfg: TeacherConfig,
        train: &crate::dataio::LabeledDataset,
        test: &crate::dataio::LabeledDataset,
    ) -> Result<TeacherOutcome> {
        let lock = self.locks.lock().expect("lock poisoned").entry(seed).or_default().clone();
        let _guard = lock.lock().expect("lock poisoned");
        let dir = self.dir.join(format!("seed{seed}"));
        let meta = teacher_meta(seed, cfg);
        if let Some(t) = Self::load(&dir, &meta) {
            return Ok(t);
        }
        let t = trainloop::train_teacher(seed, train, test, cfg)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        t.teacher.save_checkpoint(&dir.join("teacher.ckpt"))?;
        t.base.save_checkpoint(&dir.join("base.ckpt"))?;
        let path = dir.join("meta.txt");
        let text = format!("{meta}test_accuracy={}\n", records::fmt_f64(t.test_accuracy));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(t)
    }
}

pub fn run_dir(out: &Path, config: &RunConfig) -> PathBuf {
    out.join(config.run_id())
}

/// True when `dir` holds a finished run made with exactly `config`.
pub fn is_complete(dir: &Path, config: &RunConfig) -> bool {
    dir.join("steps.csv").is_file()
        && records::read_summary(&dir.join("summary.txt")).is_ok_and(|s| s.matches_config(config))
}

/// Teacher, then student, for one (mode, seed). The summary is written
/// last, so its presence marks a complete run.
pub fn run_single(mnist: &Mnist, config: &RunConfig, out: &Path, teachers: &TeacherCache) -> Result<RunSummary> {
    config.validate()?;
    let dir = run_dir(out, config);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let summary_path = dir.join("summary.txt");
    if summary_path.exists() {
        fs::remove_file(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    }
    let data = trainloop::prepare_seed(mnist, config.seed, config.noise_range)?;
    let t = teachers.get_or_train(config.seed, TeacherConfig::from(config), &data.split.train, &mnist.test)?;
    t.teacher.save_checkpoint(&dir.join("teacher.ckpt"))?;
    t.base.save_checkpoint(&dir.join("base.ckpt"))?;

    let steps_path = dir.join("steps.csv");
    let file = fs::File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    let mut writer = records::StepWriter::new(BufWriter::new(file))?;
    let mut sink = |r: &StepRecord| writer.write(r);
    let summary =
        trainloop::distill_student(&t.teacher, &t.base, &data, &mnist.test, t.test_accuracy, config, &mut sink)?;
    writer.finish()?;
    fs::write(&summary_path, records::summary_text(&summary, config)).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobStatus {
    /// Ran now, or found complete on resume.
    Ok {
        resumed: bool,
    },
    Failed {
        exit_code: i32,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub status: JobStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub entries: Vec<ManifestEntry>,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| matches!(e.status, JobStatus::Failed { .. }))
    }

    /// Exit code of the first failure, if any.
    pub fn exit_code(&self) -> i32 {
        self.failures()
            .find_map(|e| match e.status {
                JobStatus::Failed { exit_code, .. } => Some(exit_code),
                _ => None,
            })
            .unwrap_or(0)
    }
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file);
    w.write_record(["run_id", "mode", "seed", "status", "error"])?;
    for e in entries {
        let (status, err) = match &e.status {
            JobStatus::Ok { .. } => ("ok", ""),
            JobStatus::Failed { message, .. } => ("failed", message.as_str()),
        };
        w.write_record([e.run_id.as_str(), e.mode.as_str(), &e.seed.to_string(), status, err])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every job of `spec` on up to `spec.workers` threads. Failed runs are
/// recorded in `manifest.csv` rather than aborting the sweep.
pub fn cmd_sweep(mnist: &Mnist, spec: &SweepSpec, progress: &(dyn Fn(&ManifestEntry) + Sync)) -> Result<SweepReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out).map_err(|e| Error::io(&spec.out, e))?;
    let jobs = spec.jobs();
    for j in &jobs {
        j.validate()?;
    }
    let teachers = TeacherCache::new(&spec.out);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ManifestEntry>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cfg) = jobs.get(i) else { break };
        let status = if spec.resume && is_complete(&run_dir(&spec.out, cfg), cfg) {
            JobStatus::Ok { resumed: true }
        } else {
            match run_single(mnist, cfg, &spec.out, &teachers) {
                Ok(_) => JobStatus::Ok { resumed: false },
                Err(e) => JobStatus::Failed { exit_code: e.exit_code(), message: e.to_string() },
            }
        };
        let entry = ManifestEntry { run_id: cfg.run_id(), mode: cfg.mode, seed: cfg.seed, status };
        progress(&entry);
        *slots[i].lock().expect("lock poisoned") = Some(entry);
    };
    std::thread::scope(|s| {
        for _ in 0..spec.workers.min(jobs.len()) {
            s.spawn(worker);
        }
    });
    let entries: Vec<ManifestEntry> =
        slots.into_iter().map(|m| m.into_inner().expect("lock poisoned").expect("every job visited")).collect();
    write_manifest(&spec.out.join("manifest.csv"), &entries)?;
    Ok(SweepReport { entries })
}
