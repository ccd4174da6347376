//! Calibration losses and the normalized joint score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, Matrix};
use crate::saliency::SaliencyProfile;

/// Loss components for one quantized candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `‖WX − ŴX‖²_F`
    pub recon: f64,
    /// `‖(Ŵ − W) S‖²_F`
    pub sar: f64,
    /// `‖Ŵ − W‖²_F`
    pub drift: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_normalized: Option<f64>,
}

impl LossBreakdown {
    pub fn compute(w: &Matrix, w_hat: &Matrix, x: &Matrix, s: &SaliencyProfile) -> Result<Self> {
        Ok(Self {
            recon: recon_loss(w, w_hat, x)?,
            sar: sar_loss(w, w_hat, s)?,
            drift: weight_drift(w, w_hat)?,
            joint_normalized: None,
        })
    }
}

fn delta(w: &Matrix, w_hat: &Matrix, op: &'static str) -> Result<Matrix> {
    if w.shape() != w_hat.shape() {
        return Err(Error::dims(op, format!("{:?}", w.shape()), format!("{:?}", w_hat.shape())));
    }
    w_hat.sub(w)
}

pub fn recon_loss(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<f64> {
    let d = delta(w, w_hat, "recon_loss")?;
    if x.rows() != w.cols() {
        return Err(Error::dims("recon_loss", format!("x rows = {}", w.cols()), x.rows()));
    }
    Ok(frobenius_sq(&d.matmul(x)?))
}

pub fn sar_loss(w: &Matrix, w_hat: &Matrix, s: &SaliencyProfile) -> Result<f64> {
    let d = delta(w, w_hat, "sar_loss")?;
    if s.len() != w.cols() {
        return Err(Error::dims("sar_loss", w.cols(), s.len()));
    }
    Ok(frobenius_sq(&d.scale_columns(&s.values)))
}

pub fn weight_drift(w: &Matrix, w_hat: &Matrix) -> Result<f64> {
    Ok(frobenius_sq(&delta(w, w_hat, "weight_drift")?))
}

/// `(v − min) / (max − min)`; all zeros when `max == min`.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("min-max normalization needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("min-max normalization of non-finite values"));
    }
    let mn = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mx = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == mn {
        return Ok(vec![0.0; values.len()]);
    }
    let range = mx - mn;
    Ok(values.iter().map(|v| (v - mn) / range).collect())
}

/// `recon_n + λ · sar_n`, element-wise.
pub fn joint_score(recon_n: &[f64], sar_n: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if recon_n.len() != sar_n.len() {
        return Err(Error::dims("joint_score", recon_n.len(), sar_n.len()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(recon_n.iter().zip(sar_n).map(|(r, s)| r + lambda * s).collect())
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `Tr(ΔW · G · ΔWᵀ)` summed row by row.
pub fn trace_form(delta_w: &Matrix, g: &Matrix) -> f64 {
    let mut rows: Vec<f64> = (0..delta_w.rows())
        .map(|r| crate::linalg::quad_form(g, delta_w.row(r)))
        .collect();
    rows.sort_unstable_by(f64::total_cmp);
    rows.iter().sum()
}

/// Held-out risk `(1/m) Σ‖ΔW x_i‖²` over the columns of `x`.
pub fn mean_risk(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<f64> {
    if x.cols() == 0 {
        return Err(Error::invalid("risk over an empty sample"));
    }
    Ok(recon_loss(w, w_hat, x)? / x.cols() as f64)
}
