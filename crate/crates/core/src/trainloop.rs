//! Teacher training and student distillation (control, projection and
//! liminal modes) with per-step gradient-alignment telemetry.
//!
//! A run is strictly sequential. Every random choice comes from a stream
//! split off the run seed, so `(config, MNIST bytes)` fixes every output bit.

use std::fmt;
use std::str::FromStr;

use crate::dataio::{self, BatchIter, LabeledDataset, Mnist, NoiseDataset, SplitPair};
use crate::error::{Error, Result};
use crate::gradsurgery::{self, FlatGrad};
use crate::mlpnet::{self, MlpParams, NUM_PARAMS};
use crate::ndmath::{Mat, Rng};
use crate::objectives;
use crate::optimizer::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Control,
    Projection,
    Liminal,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Control, Mode::Projection, Mode::Liminal];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Control => "control",
            Mode::Projection => "projection",
            Mode::Liminal => "liminal",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Mode::Control),
            "projection" => Ok(Mode::Projection),
            "liminal" => Ok(Mode::Liminal),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected control, projection or liminal)"))),
        }
    }
}

/// How the trait gradient is estimated on the audit set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditEstimator {
    /// One pass over all audit images.
    Full,
    /// Mean of the gradients of the next `k` audit mini-batches, cycling.
    MiniBatches(usize),
}

impl fmt::Display for AuditEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditEstimator::Full => f.write_str("full"),
            AuditEstimator::MiniBatches(k) => write!(f, "mb:{k}"),
        }
    }
}

impl FromStr for AuditEstimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(AuditEstimator::Full);
        }
        let k = s
            .strip_prefix("mb:")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Config(format!("invalid audit estimator '{s}' (expected full or mb:K)")))?;
        Ok(AuditEstimator::MiniBatches(k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub distill_temperature: f64,
    pub liminal_temperature: f64,
    pub audit_estimator: AuditEstimator,
    pub audit_batch_size: usize,
    pub log_every: usize,
    pub noise_range: (f64, f64),
    /// Replaces the liminal schedule with a constant weight.
    pub lambda_override: Option<f64>,
}

impl RunConfig {
    /// Defaults: 5 epochs, batch 1024, lr 3e-4, distillation T = 1, liminal
    /// T = 2. Full-audit trait gradient and every-step logging for control;
    /// one audit mini-batch and every-10-step logging for projection; ten
    /// audit mini-batches for liminal.
    pub fn new(mode: Mode, seed: u64) -> Self {
        let (audit_estimator, log_every) = match mode {
            Mode::Control => (AuditEstimator::Full, 1),
            Mode::Projection => (AuditEstimator::MiniBatches(1), 10),
            Mode::Liminal => (AuditEstimator::MiniBatches(10), 1),
        };
        RunConfig {
            mode,
            seed,
            epochs: 5,
            batch_size: 1024,
            lr: 3e-4,
            distill_temperature: 1.0,
            liminal_temperature: 2.0,
            audit_estimator,
            audit_batch_size: 1000,
            log_every,
            noise_range: (0.0, 1.0),
            lambda_override: None,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.mode, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 || self.audit_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.distill_temperature > 0.0 && self.liminal_temperature > 0.0) {
            return bad("temperatures must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda override must be non-negative");
            }
        }
        crate::ndmath::check_range(self.noise_range.0, self.noise_range.1)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Regularizer weight: 1 throughout the first epoch, then linear in the step
/// index down to exactly 0 at the final step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiminalSchedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl LiminalSchedule {
    /// `step` is global and 1-based.
    pub fn lambda(&self, step: usize) -> f64 {
        // single-epoch runs never leave the constant phase
        if step <= self.steps_per_epoch || self.total_steps <= self.steps_per_epoch {
            return 1.0;
        }
        let span = (self.total_steps - self.steps_per_epoch) as f64;
        (self.total_steps.saturating_sub(step)) as f64 / span
    }
}

/// One training step's telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub epoch: usize,
    pub step: usize,
    pub kl: f64,
    pub ce: f64,
    pub dot: f64,
    pub cosine: f64,
    pub cosine_before_proj: f64,
    pub cosine_after_proj: f64,
    pub cosine_total: f64,
    pub lambda_kl: f64,
    pub projection_applied: bool,
    pub norm_trait: f64,
    pub norm_distill: f64,
    pub first_order_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub teacher_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub epoch_test_accuracy: Vec<f64>,
    pub frac_positive_alignment: f64,
    pub mean_cosine: f64,
    pub epoch1_mean_cosine: f64,
    /// Trait cross-entropy of the final student on the whole audit set.
    pub final_ce: f64,
    /// Distillation KL of the final student over the whole noise set.
    pub final_kl: f64,
    pub applied_steps: usize,
    /// Largest |cos(g_trait, g~)| over steps where the projection fired.
    pub max_abs_cosine_after_proj: f64,
    /// Largest relative gap between <g_d, g~> and ||g_d||^2 sin^2(phi) over applied steps.
    pub max_first_order_rel_err: f64,
    /// Smallest <g_d, g~> over applied steps.
    pub min_first_order_term: f64,
}

/// Everything a seed fixes before any training: the train/audit split and
/// the noise set.
pub struct SeedData {
    pub split: SplitPair,
    pub noise: NoiseDataset,
}

fn streams(seed: u64) -> Rng {
    Rng::new(seed)
}

pub fn prepare_seed(mnist: &Mnist, seed: u64, noise_range: (f64, f64)) -> Result<SeedData> {
    let root = streams(seed);
    let split = dataio::split_train_audit(&mnist.train, &mut root.split("split"))?;
    let noise = dataio::gen_noise_in(&mut root.split("noise"), dataio::NOISE_SIZE, noise_range.0, noise_range.1)?;
    Ok(SeedData { split, noise })
}

/// Shared initialization for teacher and student.
pub fn base_params(seed: u64) -> MlpParams {
    MlpParams::init(&mut streams(seed).split("init"))
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    pub teacher: MlpParams,
    pub base: MlpParams,
    pub test_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { epochs: 5, batch_size: 1024, lr: 3e-4 }
    }
}

impl From<&RunConfig> for TeacherConfig {
    fn from(c: &RunConfig) -> Self {
        TeacherConfig { epochs: c.epochs, batch_size: c.batch_size, lr: c.lr }
    }
}

/// Trains on the class cross-entropy only, starting from the seed's shared
/// initialization, which is returned alongside as the frozen base model.
pub fn train_teacher(
    seed: u64,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: TeacherConfig,
) -> Result<TeacherOutcome> {
    if train.is_empty() {
        return Err(Error::Setup("empty teacher training set".into()));
    }
    let base = base_params(seed);
    let mut teacher = base.clone();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, NUM_PARAMS);
    let mut shuffle = streams(seed).split("teacher-shuffle");
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in BatchIter::shuffled(train, cfg.batch_size, &mut shuffle)? {
            step += 1;
            let labels = batch.labels.as_deref().expect("labeled");
            let cache = mlpnet::forward(&teacher, &batch.images)?;
            let loss = objectives::cross_entropy_class(&cache.logits, labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Training { step, detail: "non-finite teacher loss".into() });
            }
            let grad = mlpnet::backward(&teacher, &cache, &loss.dlogits)?;
            adam.step(&mut teacher, &grad).map_err(|e| relabel_step(e, step))?;
        }
    }
    let test_accuracy = mlpnet::class_accuracy(&teacher, test)?;
    Ok(TeacherOutcome { teacher, base, test_accuracy })
}

fn relabel_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { detail, .. } => Error::Training { step, detail },
        other => other,
    }
}

/// Serves trait gradients from the audit set.
pub struct AuditSampler<'a> {
    audit: &'a LabeledDataset,
    estimator: AuditEstimator,
    batch_size: usize,
    cursor: usize,
}

/// Mean trait gradient and the matching mean cross-entropy.
pub struct TraitGradient {
    pub grad: MlpParams,
    pub loss: f64,
}

impl<'a> AuditSampler<'a> {
    pub fn new(audit: &'a LabeledDataset, estimator: AuditEstimator, batch_size: usize) -> Result<Self> {
        if audit.is_empty() || batch_size == 0 {
            return Err(Error::Config("audit sampler needs data and a positive batch size".into()));
        }
        Ok(AuditSampler { audit, estimator, batch_size, cursor: 0 })
    }

    fn batch_count(&self) -> usize {
        self.audit.len().div_ceil(self.batch_size)
    }

    /// Trait gradient at `params`. Mini-batch estimators advance a cursor over
    /// the fixed audit order, wrapping around.
    pub fn trait_gradient(&mut self, params: &MlpParams) -> Result<TraitGradient> {
        match self.estimator {
            AuditEstimator::Full => ce_gradient(params, &self.audit.images, &self.audit.labels),
            AuditEstimator::MiniBatches(k) => {
                let mut acc = MlpParams::zeros();
                let mut loss = 0.0;
                for _ in 0..k {
                    let start = self.cursor * self.batch_size;
                    let end = (start + self.batch_size).min(self.audit.len());
                    let rows: Vec<usize> = (start..end).collect();
                    let part = self.audit.subset(&rows);
                    let g = ce_gradient(params, &part.images, &part.labels)?;
                    acc.add_scaled(&g.grad, 1.0);
                    loss += g.loss;
                    self.cursor = (self.cursor + 1) % self.batch_count();
                }
                let inv_k = 1.0 / k as f64;
                for block in acc.blocks_mut() {
                    for v in block.iter_mut() {
                        *v *= inv_k;
                    }
                }
                Ok(TraitGradient { grad: acc, loss: loss * inv_k })
            }
        }
    }
}

fn ce_gradient(params: &MlpParams, images: &Mat, labels: &[u8]) -> Result<TraitGradient> {
    let cache = mlpnet::forward(params, images)?;
    let loss = objectives::cross_entropy_class(&cache.logits, labels)?;
    let grad = mlpnet::backward(params, &cache, &loss.dlogits)?;
    Ok(TraitGradient { grad, loss: loss.value })
}

/// `audit_trait_gradient` for a single call with a fresh cursor.
pub fn audit_trait_gradient(
    params: &MlpParams,
    audit: &LabeledDataset,
    estimator: AuditEstimator,
    batch_size: usize,
) -> Result<FlatGrad> {
    Ok(AuditSampler::new(audit, estimator, batch_size)?.trait_gradient(params)?.grad.flatten())
}

/// Mean aux-logit KL between two models over a whole dataset.
pub fn dataset_kl(teacher: &MlpParams, student: &MlpParams, images: &Mat, t: f64) -> Result<f64> {
    let mut total = 0.0;
    let chunk = 2000;
    for start in (0..images.rows()).step_by(chunk) {
        let rows: Vec<usize> = (start..(start + chunk).min(images.rows())).collect();
        let x = images.gather_rows(&rows);
        let tl = mlpnet::forward(teacher, &x)?.logits;
        let sl = mlpnet::forward(student, &x)?.logits;
        total += objectives::kl_aux(&tl, &sl, t)?.value * rows.len() as f64;
    }
    Ok(total / images.rows() as f64)
}

/// Mean class cross-entropy over a whole dataset.
pub fn dataset_ce(params: &MlpParams, data: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for batch in BatchIter::sequential(data, 2000)? {
        let logits = mlpnet::forward(params, &batch.images)?.logits;
        let labels = batch.labels.as_deref().expect("labeled");
        total += objectives::cross_entropy_class(&logits, labels)?.value * labels.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Default)]
struct Accumulator {
    steps: usize,
    positive: usize,
    cosine_sum: f64,
    epoch1_cosine_sum: f64,
    epoch1_steps: usize,
    applied: usize,
    max_abs_cos_after: f64,
    max_first_order_rel_err: f64,
    min_first_order_term: f64,
}

impl Accumulator {
    fn new() -> Self {
        Accumulator { min_first_order_term: f64::INFINITY, ..Default::default() }
    }

    fn push(&mut self, rec: &StepRecord, sin2_phi: f64) {
        self.steps += 1;
        if rec.dot > 0.0 {
            self.positive += 1;
        }
        self.cosine_sum += rec.cosine;
        if rec.epoch == 1 {
            self.epoch1_cosine_sum += rec.cosine;
            self.epoch1_steps += 1;
        }
        if rec.projection_applied {
            self.applied += 1;
            self.max_abs_cos_after = self.max_abs_cos_after.max(rec.cosine_after_proj.abs());
            let rhs = rec.norm_distill * rec.norm_distill * sin2_phi;
            let rel = (rec.first_order_term - rhs).abs() / rhs.abs().max(f64::MIN_POSITIVE);
            self.max_first_order_rel_err = self.max_first_order_rel_err.max(rel);
            self.min_first_order_term = self.min_first_order_term.min(rec.first_order_term);
        }
    }
}

/// Student distillation on the auxiliary logits of noise inputs.
///
/// `sink` receives the records selected by `config.log_every`; the summary
/// statistics always cover every step.
pub fn distill_student(
    teacher: &MlpParams,
    base: &MlpParams,
    data: &SeedData,
    test: &LabeledDataset,
    teacher_test_accuracy: f64,
    config: &RunConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<RunSummary> {
    config.validate()?;
    let noise = &data.noise;
    let audit = &data.split.audit;
    let steps_per_epoch = noise.images.rows().div_ceil(config.batch_size);
    let schedule = LiminalSchedule { steps_per_epoch, total_steps: steps_per_epoch * config.epochs };
    let mut student = base.clone();
    let mut adam = Adam::new(config.adam(), NUM_PARAMS);
    let mut sampler = AuditSampler::new(audit, config.audit_estimator, config.audit_batch_size)?;
    let mut shuffle = streams(config.seed).split("noise-shuffle");
    let run_id = config.run_id();
    let mut acc = Accumulator::new();
    let mut epoch_test_accuracy = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        for batch in BatchIter::shuffled(noise, config.batch_size, &mut shuffle)? {
            step += 1;
            let x = &batch.images;
            let teacher_logits = mlpnet::forward(teacher, x)?.logits;
            let cache = mlpnet::forward(&student, x)?;
            let distill = objectives::kl_aux(&teacher_logits, &cache.logits, config.distill_temperature)?;
            if !distill.value.is_finite() {
                return Err(Error::Training { step, detail: "non-finite distillation loss".into() });
            }
            let g_distill_p = mlpnet::backward(&student, &cache, &distill.dlogits)?;
            let trait_grad = sampler.trait_gradient(&student)?;
            if !trait_grad.loss.is_finite() {
                return Err(Error::Training { step, detail: "non-finite trait loss".into() });
            }
            let g_distill = g_distill_p.flatten();
            let g_trait = trait_grad.grad.flatten();
            let stats = gradsurgery::alignment(&g_trait, &g_distill)?;

            let lambda = match config.mode {
                Mode::Liminal => config.lambda_override.unwrap_or_else(|| schedule.lambda(step)),
                _ => 0.0,
            };
            let (update, applied) = match config.mode {
                Mode::Control => (g_distill_p, false),
                Mode::Projection => {
                    let p = gradsurgery::project_out_trait(&g_distill, &g_trait)?;
                    (MlpParams::unflatten(&p.grad)?, p.applied)
                }
                Mode::Liminal => {
                    let mut total = g_distill_p;
                    if lambda > 0.0 {
                        let base_logits = mlpnet::forward(base, x)?.logits;
                        let reg =
                            objectives::liminal_reg(&base_logits, &cache.logits, config.liminal_temperature, lambda)?;
                        if !reg.value.is_finite() {
                            return Err(Error::Training { step, detail: "non-finite regularizer".into() });
                        }
                        let g_reg = mlpnet::backward(&student, &cache, &reg.dlogits)?;
                        total.add_scaled(&g_reg, 1.0);
                    }
                    (total, false)
                }
            };
            let g_update = update.flatten();
            let after = gradsurgery::alignment(&g_trait, &g_update)?;
            let first_order_term = gradsurgery::first_order_distill_term(&g_distill, &g_update)?;

            let rec = StepRecord {
                run_id: run_id.clone(),
                seed: config.seed,
                mode: config.mode,
                epoch,
                step,
                kl: distill.value,
                ce: trait_grad.loss,
                dot: stats.dot,
                cosine: stats.cosine,
                cosine_before_proj: stats.cosine,
                cosine_after_proj: after.cosine,
                cosine_total: after.cosine,
                lambda_kl: lambda,
                projection_applied: applied,
                norm_trait: stats.norm_trait,
                norm_distill: stats.norm_distill,
                first_order_term,
            };
            acc.push(&rec, stats.sin2_phi);
            if (step - 1) % config.log_every == 0 {
                sink(&rec)?;
            }
            adam.step(&mut student, &update).map_err(|e| relabel_step(e, step))?;
        }
        epoch_test_accuracy.push(mlpnet::class_accuracy(&student, test)?);
    }

    let final_kl = dataset_kl(teacher, &student, &noise.images, config.distill_temperature)?;
    let final_ce = dataset_ce(&student, audit)?;
    let n = acc.steps.max(1) as f64;
    Ok(RunSummary {
        run_id,
        mode: config.mode,
        seed: config.seed,
        steps: acc.steps,
        teacher_test_accuracy,
        final_test_accuracy: *epoch_test_accuracy.last().unwrap_or(&0.0),
        epoch_test_accuracy,
        frac_positive_alignment: acc.positive as f64 / n,
        mean_cosine: acc.cosine_sum / n,
        epoch1_mean_cosine: acc.epoch1_cosine_sum / acc.epoch1_steps.max(1) as f64,
        final_ce,
        final_kl,
        applied_steps: acc.applied,
        max_abs_cosine_after_proj: acc.max_abs_cos_after,
        max_first_order_rel_err: acc.max_first_order_rel_err,
        min_first_order_term: if acc.applied > 0 { acc.min_first_order_term } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_and_estimator_parse() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("Control".parse::<Mode>().is_err());
        assert_eq!("full".parse::<AuditEstimator>().unwrap(), AuditEstimator::Full);
        assert_eq!("mb:10".parse::<AuditEstimator>().unwrap(), AuditEstimator::MiniBatches(10));
        assert!("mb:0".parse::<AuditEstimator>().is_err());
        assert!("mb".parse::<AuditEstimator>().is_err());
        assert_eq!(AuditEstimator::MiniBatches(3).to_string(), "mb:3");
    }

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = RunConfig::new(Mode::Control, 0);
        assert_eq!((c.epochs, c.batch_size, c.lr), (5, 1024, 3e-4));
        assert_eq!(c.liminal_temperature, 2.0);
        assert_eq!(c.distill_temperature, 1.0);
        assert_eq!(c.audit_estimator, AuditEstimator::Full);
        let p = RunConfig::new(Mode::Projection, 0);
        assert_eq!((p.audit_estimator, p.log_every), (AuditEstimator::MiniBatches(1), 10));
        let l = RunConfig::new(Mode::Liminal, 0);
        assert_eq!((l.audit_estimator, l.log_every), (AuditEstimator::MiniBatches(10), 1));
        assert_eq!(TeacherConfig::default(), TeacherConfig::from(&c));
    }

    #[test]
    fn schedule_shape() {
        let s = LiminalSchedule { steps_per_epoch: 59, total_steps: 295 };
        for step in 1..=59 {
            assert_eq!(s.lambda(step), 1.0);
        }
        assert_eq!(s.lambda(295), 0.0);
        for step in 59..295 {
            assert!(s.lambda(step + 1) < s.lambda(step), "step {step}");
        }
        assert!((0..=295).all(|k| (0.0..=1.0).contains(&s.lambda(k))));
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::new(Mode::Liminal, 0);
        c.lambda_override = Some(-1.0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Mode::Control, 0);
        c.noise_range = (1.0, 0.0);
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Mode::Control, 0);
        c.log_every = 0;
        assert!(c.validate().is_err());
    }
}
