//! Tempered softmax and the three scalar objectives, each returning its
//! batch-mean value (nats) and exact gradient with respect to all 13 logits.
//!
//! The trait cross-entropy only touches the 10 class columns; the two KL
//! objectives only touch the 3 auxiliary columns.

use crate::error::{Error, Result};
use crate::mlpnet::{AUX_LOGITS, CLASS_LOGITS, OUTPUT};
use crate::ndmath::Mat;

#[derive(Clone, Debug)]
pub struct TemperedDist {
    pub probs: Mat,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct LossOut {
    pub value: f64,
    pub dlogits: Mat,
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Row-wise `log_softmax(row / t)` of `row`, written into `out`.
fn log_softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / t;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

pub fn log_softmax_t(logits: &Mat, t: f64) -> Result<Mat> {
    check_temperature(t)?;
    let mut out = Mat::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        log_softmax_row(logits.row(r), t, out.row_mut(r));
    }
    Ok(out)
}

/// Row-wise softmax of `logits / t` with max subtraction.
pub fn softmax_t(logits: &Mat, t: f64) -> Result<TemperedDist> {
    let mut probs = log_softmax_t(logits, t)?;
    for v in probs.data_mut() {
        *v = v.exp();
    }
    Ok(TemperedDist { probs, temperature: t })
}

/// Mean cross-entropy of the class logits (columns 0..10) against `labels`.
pub fn cross_entropy_class(logits: &Mat, labels: &[u8]) -> Result<LossOut> {
    if logits.cols() != OUTPUT {
        return Err(Error::Input(format!("expected {OUTPUT} logit columns, found {}", logits.cols())));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Input(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASS_LOGITS) {
        return Err(Error::Input(format!("label {l} out of range")));
    }
    let b = logits.rows();
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Mat::zeros(b, OUTPUT);
    let mut logp = [0.0; CLASS_LOGITS];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        log_softmax_row(&logits.row(r)[..CLASS_LOGITS], 1.0, &mut logp);
        total -= logp[label as usize];
        let drow = dlogits.row_mut(r);
        for c in 0..CLASS_LOGITS {
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            drow[c] = (logp[c].exp() - onehot) * inv_b;
        }
    }
    Ok(LossOut { value: total * inv_b, dlogits })
}

/// Shared core of the tempered aux KL: value of `KL(p_ref || p_student)` at
/// temperature `t` and its gradient `(p_student - p_ref) / (t * b)`, both
/// multiplied by `scale`.
fn aux_kl(reference: &Mat, student: &Mat, t: f64, scale: f64) -> Result<LossOut> {
    check_temperature(t)?;
    if reference.shape() != student.shape() || student.cols() != OUTPUT {
        return Err(Error::Input(format!(
            "logit shapes {:?} and {:?} must both be b x {OUTPUT}",
            reference.shape(),
            student.shape()
        )));
    }
    let b = student.rows();
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Mat::zeros(b, OUTPUT);
    let mut log_ref = [0.0; AUX_LOGITS];
    let mut log_stu = [0.0; AUX_LOGITS];
    let mut total = 0.0;
    for r in 0..b {
        log_softmax_row(&reference.row(r)[CLASS_LOGITS..], t, &mut log_ref);
        log_softmax_row(&student.row(r)[CLASS_LOGITS..], t, &mut log_stu);
        let mut kl = 0.0;
        for k in 0..AUX_LOGITS {
            kl += log_ref[k].exp() * (log_ref[k] - log_stu[k]);
        }
        total += kl;
        let drow = &mut dlogits.row_mut(r)[CLASS_LOGITS..];
        for k in 0..AUX_LOGITS {
            drow[k] = scale * (log_stu[k].exp() - log_ref[k].exp()) / t * inv_b;
        }
    }
    Ok(LossOut { value: scale * total * inv_b, dlogits })
}

/// Distillation loss: mean `KL(p_teacher || p_student)` over the auxiliary
/// logits at temperature `t`. The teacher is treated as a constant.
pub fn kl_aux(teacher_logits: &Mat, student_logits: &Mat, t: f64) -> Result<LossOut> {
    aux_kl(teacher_logits, student_logits, t, 1.0)
}

/// Liminal regularizer `lambda * t^2 * KL(p_base || p_student)` on the
/// auxiliary logits.
pub fn liminal_reg(base_logits: &Mat, student_logits: &Mat, t: f64, lambda: f64) -> Result<LossOut> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("regularizer weight must be non-negative, got {lambda}")));
    }
    aux_kl(base_logits, student_logits, t, lambda * t * t)
}
