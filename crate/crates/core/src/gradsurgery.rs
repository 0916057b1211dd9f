//! Flattened-gradient diagnostics and the trait-aligned-component projection.

use crate::error::{Error, Result};
use crate::ndmath;

/// A full-parameter gradient in canonical (W1, b1, W2, b2, W3, b3) order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGrad(Vec<f64>);

impl FlatGrad {
    pub fn new(values: Vec<f64>) -> Self {
        FlatGrad(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        ndmath::dot(&self.0, &self.0).sqrt()
    }
}

impl From<Vec<f64>> for FlatGrad {
    fn from(v: Vec<f64>) -> Self {
        FlatGrad(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentStats {
    pub dot: f64,
    pub cosine: f64,
    pub norm_trait: f64,
    pub norm_distill: f64,
    pub sin2_phi: f64,
}

fn check_len(a: &FlatGrad, b: &FlatGrad) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Internal(format!("gradient lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Cosine of two vectors; zero when either has zero norm.
pub fn cosine(a: &FlatGrad, b: &FlatGrad) -> Result<f64> {
    Ok(alignment(a, b)?.cosine)
}

pub fn alignment(g_trait: &FlatGrad, g_distill: &FlatGrad) -> Result<AlignmentStats> {
    check_len(g_trait, g_distill)?;
    let dot = ndmath::dot(g_trait.as_slice(), g_distill.as_slice());
    let norm_trait = g_trait.norm();
    let norm_distill = g_distill.norm();
    let cosine =
        if norm_trait > 0.0 && norm_distill > 0.0 { (dot / (norm_trait * norm_distill)).clamp(-1.0, 1.0) } else { 0.0 };
    let sin2_phi = (1.0 - cosine * cosine).clamp(0.0, 1.0);
    Ok(AlignmentStats { dot, cosine, norm_trait, norm_distill, sin2_phi })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub grad: FlatGrad,
    pub applied: bool,
}

/// Removes the component of `g_distill` along `g_trait` when their inner
/// product is strictly positive; otherwise returns `g_distill` unchanged.
pub fn project_out_trait(g_distill: &FlatGrad, g_trait: &FlatGrad) -> Result<Projection> {
    check_len(g_distill, g_trait)?;
    let d = g_distill.as_slice();
    let t = g_trait.as_slice();
    let dot = ndmath::dot(d, t);
    if dot.is_nan() || dot <= 0.0 {
        return Ok(Projection { grad: g_distill.clone(), applied: false });
    }
    let norm_sq = ndmath::dot(t, t);
    let out = if norm_sq >= f64::MIN_POSITIVE {
        let coef = dot / norm_sq;
        d.iter().zip(t).map(|(x, y)| x - coef * y).collect()
    } else {
        // ||g_trait||^2 underflowed: redo the division on g_trait / max|g_trait|.
        let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let unit: Vec<f64> = t.iter().map(|v| v / scale).collect();
        let coef = ndmath::dot(d, &unit) / ndmath::dot(&unit, &unit);
        d.iter().zip(&unit).map(|(x, u)| x - coef * u).collect()
    };
    Ok(Projection { grad: FlatGrad(out), applied: true })
}

/// `<g_distill, g_tilde>`: the first-order distillation decrease per unit step.
pub fn first_order_distill_term(g_distill: &FlatGrad, g_tilde: &FlatGrad) -> Result<f64> {
    check_len(g_distill, g_tilde)?;
    Ok(ndmath::dot(g_distill.as_slice(), g_tilde.as_slice()))
}
