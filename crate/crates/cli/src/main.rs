use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flate2::read::GzDecoder;
use sgl_core::dataio::{self, MNIST_FILES};
use sgl_core::expcli::{self, aggregate, JobStatus, RunOverrides, SweepSpec, TeacherCache};
use sgl_core::trainloop::{AuditEstimator, Mode};
use sgl_core::Error;

const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

#[derive(Parser)]
#[command(name = "sgl", version, about = "Auxiliary-logit distillation experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify the four MNIST IDX files.
    Fetch {
        #[command(flatten)]
        data: DataArgs,
        /// Base URL holding the *.gz files.
        #[arg(long, default_value = DEFAULT_MIRROR)]
        mirror: String,
    },
    /// Train a teacher and distill one student.
    Run {
        #[arg(long)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every (mode, seed) pair, in parallel.
    Sweep {
        /// Comma-separated modes.
        #[arg(long, alias = "mode", value_delimiter = ',', default_value = "control,projection,liminal")]
        modes: Vec<Mode>,
        /// a..b (exclusive), a..=b or a comma list.
        #[arg(long, default_value = "0..10")]
        seeds: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Skip runs already finished with the same configuration.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Per-step mean ± SD across seeds, plus headline statistics.
    Aggregate {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "control,projection,liminal")]
        modes: Vec<Mode>,
    },
    /// Render fig1.svg, fig2a.svg and fig2b.svg from the aggregates.
    Plot {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Defaults to $SGL_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataArgs {
    fn resolve(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os("SGL_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    distill_temp: Option<f64>,
    #[arg(long)]
    liminal_temp: Option<f64>,
    /// full | mb:K
    #[arg(long)]
    audit_estimator: Option<AuditEstimator>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Constant liminal weight in place of the schedule.
    #[arg(long)]
    lambda: Option<f64>,
}

impl From<&TrainArgs> for RunOverrides {
    fn from(a: &TrainArgs) -> Self {
        RunOverrides {
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            distill_temperature: a.distill_temp,
            liminal_temperature: a.liminal_temp,
            audit_estimator: a.audit_estimator,
            log_every: a.log_every,
            lambda_override: a.lambda,
        }
    }
}

fn download(url: &str) -> Result<Vec<u8>, Error> {
    let setup = |e: &dyn std::fmt::Display| Error::Setup(format!("cannot download {url}: {e}"));
    let resp = ureq::get(url).call().map_err(|e| setup(&e))?;
    let mut body = Vec::new();
    resp.into_body().into_reader().read_to_end(&mut body).map_err(|e| setup(&e))?;
    Ok(body)
}

fn fetch(dir: &Path, mirror: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, _) in MNIST_FILES {
        if dir.join(name).is_file() || dir.join(format!("{name}.gz")).is_file() {
            continue;
        }
        let url = format!("{}/{name}.gz", mirror.trim_end_matches('/'));
        eprintln!("downloading {url}");
        let gz = download(&url)?;
        let mut raw = Vec::new();
        GzDecoder::new(gz.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Error::Integrity { path: dir.join(name), detail: format!("bad gzip stream: {e}") })?;
        let path = dir.join(name);
        let tmp = dir.join(format!("{name}.part"));
        fs::write(&tmp, &raw).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    }
    dataio::verify_mnist_dir(dir)?;
    let mnist = dataio::load_mnist(dir)?;
    println!("{}: {} train / {} test images verified", dir.display(), mnist.train.len(), mnist.test.len());
    Ok(())
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn load_data(data: &DataArgs) -> Result<dataio::Mnist> {
    let dir = data.resolve();
    dataio::verify_mnist_dir(&dir)?;
    Ok(dataio::load_mnist(&dir)?)
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Fetch { data, mirror } => fetch(&data.resolve(), &mirror)?,
        Command::Run { mode, seed, train, data, out } => {
            let config = RunOverrides::from(&train).config(mode, seed);
            config.validate()?;
            let mnist = load_data(&data)?;
            let t0 = Instant::now();
            let s = expcli::run_single(&mnist, &config, &out, &TeacherCache::new(&out))?;
            println!(
                "{}: teacher {:.2}%, student {:.2}%, frac_pos {:.3}, mean_cos {:.5}, final_kl {:.3e} ({:.0}s)",
                s.run_id,
                100.0 * s.teacher_test_accuracy,
                100.0 * s.final_test_accuracy,
                s.frac_positive_alignment,
                s.mean_cosine,
                s.final_kl,
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Sweep { modes, seeds, workers, resume, train, data, out } => {
            let spec = SweepSpec {
                modes,
                seeds: expcli::parse_seeds(&seeds)?,
                workers,
                out,
                overrides: RunOverrides::from(&train),
                resume,
            };
            spec.validate()?;
            let mnist = load_data(&data)?;
            let t0 = Instant::now();
            let progress = |e: &expcli::ManifestEntry| match &e.status {
                JobStatus::Ok { resumed: true } => eprintln!("{} already complete", e.run_id),
                JobStatus::Ok { resumed: false } => {
                    eprintln!("{} done ({:.0}s elapsed)", e.run_id, t0.elapsed().as_secs_f64())
                }
                JobStatus::Failed { message, .. } => eprintln!("{} FAILED: {message}", e.run_id),
            };
            let report = expcli::cmd_sweep(&mnist, &spec, &progress)?;
            let failed = report.failures().count();
            println!(
                "{} runs, {failed} failed; manifest at {}",
                report.entries.len(),
                spec.out.join("manifest.csv").display()
            );
            if failed > 0 {
                return Ok(ExitCode::from(report.exit_code() as u8));
            }
        }
        Command::Aggregate { out, modes } => {
            for h in aggregate::cmd_aggregate(&out, &modes)? {
                println!("{}", h.display_line());
            }
        }
        Command::Plot { out } => {
            for p in expcli::cmd_plot(&out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
