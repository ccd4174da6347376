//! Per-channel statistics and the scaling / saliency vectors built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Floor applied to every channel statistic.
pub const STAT_FLOOR: f64 = 1e-8;

/// Mean and max absolute values per input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean_abs_x: Vec<f64>,
    pub mean_abs_w: Vec<f64>,
    pub max_abs_x: Vec<f64>,
    pub max_abs_w: Vec<f64>,
}

impl ChannelStats {
    pub fn len(&self) -> usize {
        self.mean_abs_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_abs_x.is_empty()
    }

    /// Restricts the statistics to the first `k` channels.
    pub fn truncate(&self, k: usize) -> ChannelStats {
        ChannelStats {
            mean_abs_x: self.mean_abs_x[..k].to_vec(),
            mean_abs_w: self.mean_abs_w[..k].to_vec(),
            max_abs_x: self.max_abs_x[..k].to_vec(),
            max_abs_w: self.max_abs_w[..k].to_vec(),
        }
    }
}

/// Statistics over column `j` of `w` (d_out × d_in) and row `j` of `x` (d_in × n).
pub fn channel_stats(w: &Matrix, x: &Matrix) -> Result<ChannelStats> {
    let (d_out, d_in) = w.shape();
    if x.rows() != d_in {
        return Err(Error::dims("channel_stats", format!("x rows = {d_in}"), x.rows()));
    }
    if d_out == 0 || x.cols() == 0 {
        return Err(Error::invalid("channel_stats needs at least one weight row and one sample"));
    }
    let floor = |v: f64| v.max(STAT_FLOOR);
    let mut sum_w = vec![0.0; d_in];
    let mut max_w = vec![0.0f64; d_in];
    for i in 0..d_out {
        for (j, v) in w.row(i).iter().enumerate() {
            sum_w[j] += v.abs();
            max_w[j] = max_w[j].max(v.abs());
        }
    }
    let n = x.cols() as f64;
    let mut stats = ChannelStats {
        mean_abs_x: Vec::with_capacity(d_in),
        mean_abs_w: sum_w.iter().map(|s| floor(s / d_out as f64)).collect(),
        max_abs_x: Vec::with_capacity(d_in),
        max_abs_w: max_w.into_iter().map(floor).collect(),
    };
    for j in 0..d_in {
        let row = x.row(j);
        stats.mean_abs_x.push(floor(row.iter().map(|v| v.abs()).sum::<f64>() / n));
        stats.max_abs_x.push(floor(row.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }
    Ok(stats)
}

fn power_ratio(stats: &ChannelStats, exponent: f64) -> Vec<f64> {
    stats
        .mean_abs_x
        .iter()
        .zip(&stats.mean_abs_w)
        .map(|(x, w)| x.powf(exponent) / w.powf(1.0 - exponent))
        .collect()
}

/// Candidate scaling `s̃(α) = mean|X|^α / mean|W|^(1-α)`, divided by the
/// geometric mean of its extrema so that `max · min = 1`.
pub fn scaling_vector_gs(stats: &ChannelStats, alpha: f64) -> Vec<f64> {
    let s = power_ratio(stats, alpha);
    let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mn = s.iter().copied().fold(f64::INFINITY, f64::min);
    let gm = (mx * mn).sqrt();
    s.into_iter().map(|v| v / gm).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SaliencyKind {
    Identity,
    /// `mean|X| / mean|W|`.
    Gs,
    /// `mean|X|^γ / mean|W|^(1-γ)`, scale-normalized to the Gram diagonal.
    Gbs { gamma: f64 },
}

/// Diagonal of the saliency matrix `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyProfile {
    pub values: Vec<f64>,
    pub kind: SaliencyKind,
    /// Mean Gram diagonal the profile was normalized to.
    pub h_bar: Option<f64>,
}

impl SaliencyProfile {
    pub fn identity(d_in: usize) -> Self {
        Self {
            values: vec![1.0; d_in],
            kind: SaliencyKind::Identity,
            h_bar: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn saliency_vector_gs(stats: &ChannelStats) -> SaliencyProfile {
    SaliencyProfile {
        values: stats.mean_abs_x.iter().zip(&stats.mean_abs_w).map(|(x, w)| x / w).collect(),
        kind: SaliencyKind::Gs,
        h_bar: None,
    }
}

pub fn saliency_vector_gbs(stats: &ChannelStats, gamma: f64) -> Vec<f64> {
    power_ratio(stats, gamma)
}

/// Rescales `s` so that `mean(values²) = h_bar`.
pub fn scale_normalize_gbs(s: &[f64], gamma: f64, h_bar: f64) -> Result<SaliencyProfile> {
    if !(h_bar > 0.0) || !h_bar.is_finite() {
        return Err(Error::invalid(format!("h_bar must be positive, got {h_bar}")));
    }
    if s.is_empty() {
        return Err(Error::invalid("empty saliency vector"));
    }
    let ms = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
    if !(ms > 0.0) || !ms.is_finite() {
        return Err(Error::invalid("saliency vector must be positive and finite"));
    }
    let k = h_bar.sqrt() / ms.sqrt();
    Ok(SaliencyProfile {
        values: s.iter().map(|v| v * k).collect(),
        kind: SaliencyKind::Gbs { gamma },
        h_bar: Some(h_bar),
    })
}

/// `mean(diag(X Xᵀ))`: mean squared row norm of `x`.
pub fn mean_gram_diag(x: &Matrix) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    (0..x.rows())
        .map(|j| x.row(j).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / x.rows() as f64
}
