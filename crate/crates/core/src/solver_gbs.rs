//! Gram-based sequential quantization with saliency-regularized curvature.
//!
//! The curvature is `G = XXᵀ + λ·diag(S²)`. Columns are committed left to
//! right; after each commit the quantization error is pushed into the
//! not-yet-committed columns through the rows of `M = chol(G⁻¹)ᵀ`, which is
//! the constrained least-squares compensation for the trailing subproblem.
//! With `λ = 0` this is undamped GPTQ.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationBatch;
use crate::error::{Error, Result};
use crate::linalg::{chol_upper_of_inverse, default_jitter_base, gram, solve_spd, Matrix, TriangularFactor};
use crate::objective::recon_loss;
use crate::par;
use crate::quantizer::{GroupParams, ParamGrid, QuantScheme, QuantizedLayer};
use crate::saliency::{
    channel_stats, mean_gram_diag, saliency_vector_gbs, scale_normalize_gbs, SaliencyKind, SaliencyProfile,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbsSaliency {
    Identity,
    Gbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbsConfig {
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub block_size: usize,
    pub saliency: GbsSaliency,
    pub scheme: QuantScheme,
    pub subset_fraction: f64,
    pub min_subset: usize,
    pub val_fraction: f64,
}

pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

pub fn default_gamma_grid() -> Vec<f64> {
    vec![0.1, 0.15, 0.35, 0.5]
}

impl Default for GbsConfig {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            gamma_grid: default_gamma_grid(),
            block_size: 128,
            saliency: GbsSaliency::Gbs,
            scheme: QuantScheme::default(),
            subset_fraction: 0.25,
            min_subset: 32,
            val_fraction: 0.25,
        }
    }
}

impl GbsConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.block_size == 0 {
            return Err(Error::invalid("block size must be >= 1"));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lambda grid must be non-empty and non-negative"));
        }
        if self.saliency == GbsSaliency::Gbs
            && (self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(0.0..=1.0).contains(g)))
        {
            return Err(Error::invalid("gamma grid must be non-empty within [0, 1]"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::invalid("subset fraction must be in (0, 1]"));
        }
        Ok(())
    }

    /// Number of leading input channels used for hyperparameter search.
    pub fn subset_size(&self, d_in: usize) -> usize {
        let k = (self.subset_fraction * d_in as f64).ceil() as usize;
        k.max(self.min_subset).min(d_in).max(1)
    }
}

/// Regularized curvature and the compensation factor derived from it.
#[derive(Clone, Debug)]
pub struct CurvatureFactor {
    pub gram: Matrix,
    pub factor: TriangularFactor,
    pub lambda: f64,
    pub h_bar: f64,
    pub jitter_used: f64,
}

/// `G = XXᵀ + λ·diag(S²)`, `M = chol(G⁻¹)ᵀ`.
///
/// An identity profile is first rescaled to `√h̄`, so it contributes the
/// isotropic term `λ·h̄·I`.
pub fn build_curvature(x: &Matrix, s: &SaliencyProfile, lambda: f64) -> Result<CurvatureFactor> {
    if s.len() != x.rows() {
        return Err(Error::dims("build_curvature", x.rows(), s.len()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let h_bar = mean_gram_diag(x);
    let mut g = gram(x);
    for j in 0..x.rows() {
        let s2 = match s.kind {
            SaliencyKind::Identity => h_bar,
            _ => s.values[j] * s.values[j],
        };
        g[(j, j)] += lambda * s2;
    }
    let mut curv = curvature_from_gram(g)?;
    curv.lambda = lambda;
    curv.h_bar = h_bar;
    Ok(curv)
}

/// Factorizes an already assembled curvature matrix.
pub fn curvature_from_gram(g: Matrix) -> Result<CurvatureFactor> {
    let factor = chol_upper_of_inverse(&g, default_jitter_base(&g))?;
    let jitter_used = factor.jitter();
    Ok(CurvatureFactor { gram: g, factor, lambda: 0.0, h_bar: 0.0, jitter_used })
}

/// Optimal adjustment of a whole row when coordinate `j` is forced to move by
/// `-e`: `Δw = -(e / G⁻¹_jj) · G⁻¹_{:,j}`, with objective `e² / (2 G⁻¹_jj)`.
pub fn closed_form_update(g: &Matrix, j: usize, e: f64) -> Result<(Vec<f64>, f64)> {
    let n = g.rows();
    if j >= n {
        return Err(Error::invalid(format!("coordinate {j} out of range for dimension {n}")));
    }
    let mut unit = vec![0.0; n];
    unit[j] = 1.0;
    let col = solve_spd(g, &unit)?;
    let mjj = col[j];
    if !(mjj > 0.0) {
        return Err(Error::NumericalFailure(format!("non-positive inverse diagonal {mjj}")));
    }
    let delta = col.iter().map(|c| -e / mjj * c).collect();
    Ok((delta, e * e / (2.0 * mjj)))
}

/// One committed coordinate of a row sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationStep {
    pub column: usize,
    /// `u_j − ŵ_j` at the moment of commitment.
    pub error: f64,
    /// Total change applied to columns `column+1..` because of this commit.
    pub update: Vec<f64>,
}

/// Quantizes one row in column order, compensating through `m`.
fn sweep_row(
    w: &[f64],
    m: &TriangularFactor,
    params: &[GroupParams],
    group_len: usize,
    scheme: &QuantScheme,
    block: usize,
    mut trace: Option<&mut Vec<CompensationStep>>,
) -> Vec<i32> {
    let d = w.len();
    let mut u = w.to_vec();
    let mut codes = vec![0i32; d];
    let mut scaled_err = vec![0.0; block.min(d)];
    let mut start = 0;
    while start < d {
        let end = (start + block).min(d);
        for j in start..end {
            let p = params[j / group_len];
            let c = p.code(u[j], scheme);
            codes[j] = c;
            let err = u[j] - p.dequant(c);
            let e = err / m.get(j, j);
            scaled_err[j - start] = e;
            let mrow = m.row(j);
            for k in j..end {
                u[k] -= e * mrow[k];
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(CompensationStep {
                    column: j,
                    error: err,
                    update: mrow[j + 1..].iter().map(|mk| -e * mk).collect(),
                });
            }
        }
        if end < d {
            for (t, &e) in scaled_err[..end - start].iter().enumerate() {
                let mrow = m.row(start + t);
                for k in end..d {
                    u[k] -= e * mrow[k];
                }
            }
        }
        start = end;
    }
    codes
}

/// Sequential quantization with group parameters fitted on `w` and held fixed.
pub fn run_gbs(w: &Matrix, curv: &CurvatureFactor, scheme: &QuantScheme, block: usize) -> Result<QuantizedLayer> {
    let params = ParamGrid::fit(w, scheme)?;
    run_gbs_with_params(w, curv, scheme, params, block)
}

/// As [`run_gbs`] with caller-supplied group parameters.
pub fn run_gbs_with_params(
    w: &Matrix,
    curv: &CurvatureFactor,
    scheme: &QuantScheme,
    params: ParamGrid,
    block: usize,
) -> Result<QuantizedLayer> {
    let (d_out, d_in) = w.shape();
    if curv.factor.dim() != d_in {
        return Err(Error::dims("run_gbs", d_in, curv.factor.dim()));
    }
    if (params.d_out, params.d_in) != (d_out, d_in) {
        return Err(Error::dims(
            "run_gbs",
            format!("{:?}", (d_out, d_in)),
            format!("{:?}", (params.d_out, params.d_in)),
        ));
    }
    if block == 0 {
        return Err(Error::invalid("block size must be >= 1"));
    }
    let rows = par::map_indexed(d_out, |i| {
        sweep_row(w.row(i), &curv.factor, params.row(i), params.group_len, scheme, block, None)
    });
    let codes = rows.into_iter().flatten().collect();
    QuantizedLayer::from_codes(*scheme, codes, params, None)
}

/// Runs one row with block size 1 and records every compensation step.
pub fn trace_row(
    w_row: &[f64],
    curv: &CurvatureFactor,
    scheme: &QuantScheme,
    params: &[GroupParams],
    group_len: usize,
) -> (Vec<i32>, Vec<CompensationStep>) {
    let mut steps = Vec::with_capacity(w_row.len());
    let codes = sweep_row(w_row, &curv.factor, params, group_len, scheme, 1, Some(&mut steps));
    (codes, steps)
}

/// Saliency profile for one `(λ, γ)` candidate on inputs `x`.
fn profile_for(w: &Matrix, x: &Matrix, saliency: GbsSaliency, gamma: Option<f64>) -> Result<SaliencyProfile> {
    match (saliency, gamma) {
        (GbsSaliency::Identity, _) | (_, None) => Ok(SaliencyProfile::identity(w.cols())),
        (GbsSaliency::Gbs, Some(g)) => {
            let stats = channel_stats(w, x)?;
            scale_normalize_gbs(&saliency_vector_gbs(&stats, g), g, mean_gram_diag(x))
        }
    }
}

/// Builds the curvature for `(λ, γ)` on `x` and quantizes `w`.
pub fn quantize_gbs(
    w: &Matrix,
    x: &Matrix,
    saliency: GbsSaliency,
    lambda: f64,
    gamma: Option<f64>,
    scheme: &QuantScheme,
    block: usize,
) -> Result<(QuantizedLayer, CurvatureFactor)> {
    let profile = profile_for(w, x, saliency, gamma)?;
    let curv = build_curvature(x, &profile, lambda)?;
    let layer = run_gbs(w, &curv, scheme, block)?;
    Ok((layer, curv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbsTableRow {
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GbsSelection {
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub layer: QuantizedLayer,
    pub curvature: CurvatureFactor,
    /// Validation loss of every `(λ, γ)` pair on the channel subset.
    pub table: Vec<GbsTableRow>,
    pub subset_size: usize,
}

fn sorted_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Picks `(λ, γ)` on the leading channel subset by validation reconstruction
/// error, then quantizes the full layer with the winning pair.
///
/// Ties go to the smallest `λ`, then the smallest `γ`.
pub fn select_hparams_gbs(w: &Matrix, batch: &CalibrationBatch, config: &GbsConfig) -> Result<GbsSelection> {
    config.validate()?;
    let d_in = w.cols();
    if batch.d_in() != d_in {
        return Err(Error::dims("select_hparams_gbs", d_in, batch.d_in()));
    }
    let k = config.subset_size(d_in);
    let x_train = batch.train();
    let x_val = batch.val();
    let w_sub = w.submatrix(0..w.rows(), 0..k);
    let xt_sub = x_train.submatrix(0..k, 0..x_train.cols());
    let xv_sub = x_val.submatrix(0..k, 0..x_val.cols());

    let gammas: Vec<Option<f64>> = match config.saliency {
        GbsSaliency::Identity => vec![None],
        GbsSaliency::Gbs => sorted_grid(&config.gamma_grid).into_iter().map(Some).collect(),
    };
    let pairs: Vec<(f64, Option<f64>)> = sorted_grid(&config.lambda_grid)
        .into_iter()
        .flat_map(|l| gammas.iter().map(move |g| (l, *g)))
        .collect();

    let mut table: Vec<GbsTableRow> = Vec::with_capacity(pairs.len());
    let mut best: Option<usize> = None;
    for &(lambda, gamma) in &pairs {
        let (layer, _) = quantize_gbs(
            &w_sub,
            &xt_sub,
            config.saliency,
            lambda,
            gamma,
            &config.scheme,
            config.block_size,
        )?;
        let val_loss = recon_loss(&w_sub, &layer.dequantized, &xv_sub)?;
        if best.is_none_or(|b| val_loss < table[b].val_loss) {
            best = Some(table.len());
        }
        table.push(GbsTableRow { lambda, gamma, val_loss });
    }
    let GbsTableRow { lambda, gamma, .. } = table[best.expect("non-empty grid")];
    let (layer, curvature) = quantize_gbs(
        w,
        &x_train,
        config.saliency,
        lambda,
        gamma,
        &config.scheme,
        config.block_size,
    )?;
    Ok(GbsSelection { lambda, gamma, layer, curvature, table, subset_size: k })
}
