//! Grid search over channel scaling factors with a normalized
//! reconstruction + saliency-drift selection rule.
//!
//! Each grid point `α` produces a candidate `Q(W·diag(s̃(α)))·diag(s̃(α))⁻¹`.
//! Raw losses are min–max normalized across the whole grid before scoring,
//! so the selection depends only on the candidate set and `λ`. With `λ = 0`
//! this is the plain activation-aware scaling search.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationBatch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::{argmin_first, joint_score, minmax_normalize, recon_loss, LossBreakdown};
use crate::par;
use crate::quantizer::{quantize_matrix, QuantScheme, QuantizedLayer};
use crate::saliency::{channel_stats, saliency_vector_gs, scaling_vector_gs, ChannelStats, SaliencyProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GsSaliency {
    Identity,
    Gs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsConfig {
    pub alpha_grid: Vec<f64>,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub saliency: GsSaliency,
    pub scheme: QuantScheme,
    pub val_fraction: f64,
}

/// `{k/20 : k = 0..=20}`
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|k| f64::from(k) / 20.0).collect()
}

/// `{0.1, 0.2, …, 1.0}`
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|k| f64::from(k) / 10.0).collect()
}

impl Default for GsConfig {
    fn default() -> Self {
        Self {
            alpha_grid: default_alpha_grid(),
            lambda: 0.0,
            lambda_grid: default_lambda_grid(),
            saliency: GsSaliency::Gs,
            scheme: QuantScheme::default(),
            val_fraction: 0.25,
        }
    }
}

impl GsConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.alpha_grid.len() < 2 {
            return Err(Error::invalid("alpha grid needs at least two points"));
        }
        if self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a))
            || self.alpha_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid("alpha grid must be strictly increasing within [0, 1]"));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lambda grid must be non-empty and non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GsResult {
    pub chosen_alpha: f64,
    pub chosen_lambda: f64,
    pub layer: QuantizedLayer,
    /// One entry per grid point, `joint_normalized` filled in.
    pub losses: Vec<LossBreakdown>,
    pub selected_index: usize,
}

/// Quantizes `w` after scaling input channel `j` by `s̃_j(α)`, then folds the
/// scaling back out of the dequantized weights.
pub fn candidate(w: &Matrix, stats: &ChannelStats, alpha: f64, scheme: &QuantScheme) -> Result<QuantizedLayer> {
    if stats.len() != w.cols() {
        return Err(Error::dims("candidate", w.cols(), stats.len()));
    }
    let s = scaling_vector_gs(stats, alpha);
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::NumericalFailure(format!("degenerate scaling vector at alpha = {alpha}")));
    }
    let scaled = w.scale_columns(&s);
    if scaled.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!("scaled weights overflow at alpha = {alpha}")));
    }
    let q = quantize_matrix(&scaled, scheme)?;
    QuantizedLayer::from_codes(*scheme, q.codes, q.params, Some(s)).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::NumericalFailure(m),
        other => other,
    })
}

/// The candidate set of one layer with its raw and normalized losses.
///
/// Nothing here depends on `λ`; [`GsSearch::select`] applies it.
#[derive(Clone, Debug)]
pub struct GsSearch {
    pub alphas: Vec<f64>,
    pub layers: Vec<QuantizedLayer>,
    pub raw: Vec<LossBreakdown>,
    pub recon_n: Vec<f64>,
    pub sar_n: Vec<f64>,
}

impl GsSearch {
    /// Builds and scores every candidate on `x` (the training split).
    pub fn build(w: &Matrix, x: &Matrix, config: &GsConfig) -> Result<Self> {
        config.validate()?;
        let stats = channel_stats(w, x)?;
        let profile = match config.saliency {
            GsSaliency::Identity => SaliencyProfile::identity(w.cols()),
            GsSaliency::Gs => saliency_vector_gs(&stats),
        };
        let evaluated = par::map_indexed(config.alpha_grid.len(), |k| {
            let alpha = config.alpha_grid[k];
            let layer = candidate(w, &stats, alpha, &config.scheme)?;
            let losses = LossBreakdown::compute(w, &layer.dequantized, x, &profile)?;
            Ok::<_, Error>((alpha, layer, losses))
        });
        let mut alphas = Vec::new();
        let mut layers = Vec::new();
        let mut raw = Vec::new();
        for e in evaluated {
            match e {
                Ok((a, l, r)) => {
                    alphas.push(a);
                    layers.push(l);
                    raw.push(r);
                }
                Err(Error::NumericalFailure(_)) => {}
                Err(other) => return Err(other),
            }
        }
        if layers.is_empty() {
            return Err(Error::SolverFailure("every scaling candidate failed numerically".into()));
        }
        let norm = |v: Vec<f64>| -> Result<Vec<f64>> {
            if v.len() == 1 {
                Ok(vec![0.0])
            } else {
                minmax_normalize(&v)
            }
        };
        let recon_n = norm(raw.iter().map(|l| l.recon).collect())?;
        let sar_n = norm(raw.iter().map(|l| l.sar).collect())?;
        Ok(Self { alphas, layers, raw, recon_n, sar_n })
    }

    /// Index minimizing `recon_n + λ·sar_n` (lowest index on ties) and the scores.
    pub fn select(&self, lambda: f64) -> Result<(usize, Vec<f64>)> {
        let joint = joint_score(&self.recon_n, &self.sar_n, lambda)?;
        let idx = argmin_first(&joint).ok_or_else(|| Error::SolverFailure("empty candidate set".into()))?;
        Ok((idx, joint))
    }

    pub fn result(&self, lambda: f64) -> Result<GsResult> {
        let (idx, joint) = self.select(lambda)?;
        let losses = self
            .raw
            .iter()
            .zip(joint)
            .map(|(l, j)| LossBreakdown { joint_normalized: Some(j), ..*l })
            .collect();
        Ok(GsResult {
            chosen_alpha: self.alphas[idx],
            chosen_lambda: lambda,
            layer: self.layers[idx].clone(),
            losses,
            selected_index: idx,
        })
    }
}

/// Selection index from raw loss vectors (normalize, score, argmin).
pub fn select_from_raw(recon: &[f64], sar: &[f64], lambda: f64) -> Result<usize> {
    let joint = joint_score(&minmax_normalize(recon)?, &minmax_normalize(sar)?, lambda)?;
    argmin_first(&joint).ok_or_else(|| Error::SolverFailure("empty candidate set".into()))
}

/// One grid-search pass at `config.lambda` on the calibration inputs `x`.
pub fn run_gs(w: &Matrix, x: &Matrix, config: &GsConfig) -> Result<GsResult> {
    GsSearch::build(w, x, config)?.result(config.lambda)
}

#[derive(Clone, Debug)]
pub struct GsSelection {
    pub result: GsResult,
    /// `(λ, validation reconstruction loss)` in ascending `λ`.
    pub table: Vec<(f64, f64)>,
}

/// Chooses `λ` from `config.lambda_grid` by validation reconstruction error.
///
/// Ties go to the smallest `λ`.
pub fn select_lambda_gs(w: &Matrix, batch: &CalibrationBatch, config: &GsConfig) -> Result<GsSelection> {
    config.validate()?;
    let search = GsSearch::build(w, &batch.train(), config)?;
    let x_val = batch.val();
    let mut grid = config.lambda_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &grid {
        let (idx, _) = search.select(lambda)?;
        let val = recon_loss(w, &search.layers[idx].dequantized, &x_val)?;
        table.push((lambda, val));
        if best.is_none_or(|(_, b)| val < b) {
            best = Some((lambda, val));
        }
    }
    let (lambda, _) = best.expect("non-empty grid");
    Ok(GsSelection { result: search.result(lambda)?, table })
}
