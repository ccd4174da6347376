//! Synthetic layers, activations and the λ-sweep / calibration-size
//! experiments run on them.
//!
//! Activations follow a low-rank factor model with a few high-magnitude
//! input channels, which gives calibration Gram matrices the strongly
//! anisotropic, nearly singular shape seen in transformer layers.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationBatch;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objective::{mean_risk, LossBreakdown};
use crate::par;
use crate::quantizer::{Granularity, QuantScheme, QuantizedLayer};
use crate::rng::{substream, StreamRng};
use crate::saliency::{channel_stats, mean_gram_diag, saliency_vector_gbs, saliency_vector_gs, scale_normalize_gbs, SaliencyProfile};
use crate::solver_gbs::{quantize_gbs, select_hparams_gbs, GbsConfig, GbsSaliency};
use crate::solver_gs::{GsConfig, GsSearch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthLayerSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    pub weight_std: f64,
    pub seed: u64,
}

impl Default for SynthLayerSpec {
    fn default() -> Self {
        Self { d_out: 64, d_in: 128, outlier_channels: 4, outlier_scale: 4.0, weight_std: 1.0, seed: 7 }
    }
}

impl SynthLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        if self.outlier_channels > self.d_in {
            return Err(Error::invalid("more outlier channels than input channels"));
        }
        if !(self.outlier_scale >= 1.0) || !(self.weight_std > 0.0) {
            return Err(Error::invalid("outlier_scale must be >= 1 and weight_std > 0"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn pick_channels(rng: &mut StreamRng, d_in: usize, k: usize) -> Vec<usize> {
    let mut idx = sample(rng, d_in, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Input channels whose weights are scaled up by [`gen_layer`].
pub fn outlier_indices(spec: &SynthLayerSpec) -> Vec<usize> {
    pick_channels(&mut substream(spec.seed, "outlier-channels", 0), spec.d_in, spec.outlier_channels)
}

/// Gaussian weights with the outlier input channels multiplied by `outlier_scale`.
pub fn gen_layer(spec: &SynthLayerSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "layer", 0);
    let data = (0..spec.d_out * spec.d_in).map(|_| spec.weight_std * gaussian(&mut rng)).collect();
    let mut w = Matrix::new(spec.d_out, spec.d_in, data)?;
    let outliers = outlier_indices(spec);
    for r in 0..spec.d_out {
        let row = w.row_mut(r);
        for &c in &outliers {
            row[c] *= spec.outlier_scale;
        }
    }
    Ok(w)
}

/// I.i.d. standard Gaussian inputs, each column rescaled onto `‖x‖ ≤ M_X`.
pub fn gen_calibration(d_in: usize, n: usize, m_x: f64, val_fraction: f64, seed: u64) -> Result<CalibrationBatch> {
    if n < 2 || d_in == 0 || !(m_x > 0.0) {
        return Err(Error::invalid("need n >= 2, d_in >= 1 and M_X > 0"));
    }
    let mut rng = substream(seed, "calibration", 0);
    let mut x = Matrix::zeros(d_in, n);
    for c in 0..n {
        let col: Vec<f64> = (0..d_in).map(|_| gaussian(&mut rng)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = if norm > m_x { m_x / norm } else { 1.0 };
        for (r, v) in col.into_iter().enumerate() {
            x.row_mut(r)[c] = v * f;
        }
    }
    CalibrationBatch::split_tail(x, val_fraction)
}

/// Factor model `x = D (A z + σ ε)` with `z ~ N(0, I_k)`, `ε ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationModel {
    pub mixing: Matrix,
    pub noise: f64,
    pub channel_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationSpec {
    pub factors: usize,
    pub noise: f64,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        Self { factors: 12, noise: 0.15, outlier_channels: 4, outlier_scale: 6.0 }
    }
}

impl ActivationModel {
    pub fn generate(spec: &ActivationSpec, d_in: usize, seed: u64) -> Result<Self> {
        if spec.factors == 0 || spec.outlier_channels > d_in || !(spec.noise >= 0.0) || !(spec.outlier_scale >= 1.0) {
            return Err(Error::invalid("invalid activation spec"));
        }
        let mut rng = substream(seed, "activation-model", 0);
        let f = (spec.factors as f64).sqrt();
        let data = (0..d_in * spec.factors).map(|_| gaussian(&mut rng) / f).collect();
        let mixing = Matrix::new(d_in, spec.factors, data)?;
        let mut channel_scale = vec![1.0; d_in];
        for c in pick_channels(&mut rng, d_in, spec.outlier_channels) {
            channel_scale[c] = spec.outlier_scale;
        }
        Ok(Self { mixing, noise: spec.noise, channel_scale })
    }

    pub fn d_in(&self) -> usize {
        self.mixing.rows()
    }

    /// `n` samples as a `d_in × n` matrix; `shift` multiplies channel `j` by `shift[j]`.
    pub fn sample(&self, rng: &mut StreamRng, n: usize, shift: Option<&[f64]>) -> Matrix {
        let (d, k) = self.mixing.shape();
        let mut x = Matrix::zeros(d, n);
        let mut z = vec![0.0; k];
        for c in 0..n {
            z.iter_mut().for_each(|v| *v = gaussian(rng));
            for r in 0..d {
                let a: f64 = self.mixing.row(r).iter().zip(&z).map(|(m, zv)| m * zv).sum();
                let mut v = self.channel_scale[r] * (a + self.noise * gaussian(rng));
                if let Some(s) = shift {
                    v *= s[r];
                }
                x.row_mut(r)[c] = v;
            }
        }
        x
    }
}

/// Per-channel amplitude factors `sqrt(1 + u)`, `u ~ U[-amount, amount]`.
pub fn covariance_shift(d_in: usize, amount: f64, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, "covariance-shift", 0);
    (0..d_in).map(|_| (1.0 + rng.random_range(-amount..=amount)).sqrt()).collect()
}

/// Metrics of one quantized layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    pub heldout_risk: f64,
}

/// Losses on `x` plus the mean risk `(1/m) Σ ‖ΔW x_i‖²` over its columns.
pub fn evaluate(w: &Matrix, layer: &QuantizedLayer, x: &Matrix, profile: &SaliencyProfile) -> Result<Evaluation> {
    Ok(Evaluation {
        losses: LossBreakdown::compute(w, &layer.dequantized, x, profile)?,
        heldout_risk: mean_risk(w, &layer.dequantized, x)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Gs,
    Gbs,
}

impl SweepMethod {
    pub fn label(self) -> &'static str {
        match self {
            SweepMethod::Gs => "sarqc-gs",
            SweepMethod::Gbs => "sarqc-gbs",
        }
    }
}

/// One synthetic experiment: a layer, its activation distribution and the
/// calibration / held-out sample sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub layer: SynthLayerSpec,
    pub activations: ActivationSpec,
    pub n_calib: usize,
    pub n_heldout: usize,
    /// Covariance perturbation applied to calibration inputs only.
    pub shift: f64,
    /// Saliency exponent used by the sequential solver in sweeps.
    pub gamma: f64,
    pub block_size: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            layer: SynthLayerSpec::default(),
            activations: ActivationSpec::default(),
            n_calib: 128,
            n_heldout: 2048,
            shift: 0.0,
            gamma: 0.35,
            block_size: 128,
        }
    }
}

/// Weights and data of one seeded instance of an experiment.
#[derive(Clone, Debug)]
pub struct Instance {
    pub w: Matrix,
    pub calib: Matrix,
    pub heldout: Matrix,
}

impl ExperimentSpec {
    pub fn scheme_default() -> QuantScheme {
        QuantScheme::asymmetric(4, Granularity::Group(32))
    }

    /// Layer and data for `seed`; the calibration sample has `n` columns.
    pub fn instance(&self, seed: u64, n: usize) -> Result<Instance> {
        let (w, calib, model) = self.layer_and_calibration(seed, n)?;
        let heldout = model.sample(&mut substream(seed, "heldout", 0), self.n_heldout, None);
        Ok(Instance { w, calib, heldout })
    }

    /// Weights, an `n`-sample (possibly shifted) calibration set and the
    /// activation model they were drawn from.
    pub fn layer_and_calibration(&self, seed: u64, n: usize) -> Result<(Matrix, Matrix, ActivationModel)> {
        let layer = SynthLayerSpec { seed, ..self.layer.clone() };
        let w = gen_layer(&layer)?;
        let model = ActivationModel::generate(&self.activations, layer.d_in, seed)?;
        let shift = (self.shift > 0.0).then(|| covariance_shift(layer.d_in, self.shift, seed));
        let calib = model.sample(&mut substream(seed, "calibration", n as u64), n, shift.as_deref());
        Ok((w, calib, model))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub recon: f64,
    pub sar: f64,
    pub drift: f64,
    pub heldout_risk: f64,
    pub method: String,
    pub seed: u64,
}

fn gbs_profile(w: &Matrix, x: &Matrix, gamma: f64) -> Result<SaliencyProfile> {
    let stats = channel_stats(w, x)?;
    scale_normalize_gbs(&saliency_vector_gbs(&stats, gamma), gamma, mean_gram_diag(x))
}

/// Quantizes every `(seed, λ)` pair and records training-side losses on the
/// calibration sample and the risk on the held-out sample.
///
/// Output is sorted by `(seed, λ)`.
pub fn sweep_lambda(
    spec: &ExperimentSpec,
    scheme: &QuantScheme,
    method: SweepMethod,
    lambda_grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRecord>> {
    if lambda_grid.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("lambda grid and seed list must be non-empty"));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("lambda values must be non-negative"));
    }
    let per_seed = par::map_indexed(seeds.len(), |k| sweep_one_seed(spec, scheme, method, lambda_grid, seeds[k]));
    let mut records: Vec<SweepRecord> = per_seed.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    records.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.lambda.total_cmp(&b.lambda)));
    Ok(records)
}

fn sweep_one_seed(
    spec: &ExperimentSpec,
    scheme: &QuantScheme,
    method: SweepMethod,
    lambda_grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRecord>> {
    let inst = spec.instance(seed, spec.n_calib)?;
    sweep_instance(&inst, scheme, method, lambda_grid, spec.gamma, spec.block_size, seed)
}

/// The λ sweep on one fixed layer and data set; `seed` only labels records.
pub fn sweep_instance(
    inst: &Instance,
    scheme: &QuantScheme,
    method: SweepMethod,
    lambda_grid: &[f64],
    gamma: f64,
    block_size: usize,
    seed: u64,
) -> Result<Vec<SweepRecord>> {
    match method {
        SweepMethod::Gbs => {
            let profile = gbs_profile(&inst.w, &inst.calib, gamma)?;
            lambda_grid
                .iter()
                .map(|&lambda| {
                    let (layer, _) =
                        quantize_gbs(&inst.w, &inst.calib, GbsSaliency::Gbs, lambda, Some(gamma), scheme, block_size)?;
                    record(inst, &layer, &profile, lambda, Some(gamma), method, seed)
                })
                .collect()
        }
        SweepMethod::Gs => {
            let cfg = GsConfig { scheme: *scheme, ..GsConfig::default() };
            let search = GsSearch::build(&inst.w, &inst.calib, &cfg)?;
            let profile = saliency_vector_gs(&channel_stats(&inst.w, &inst.calib)?);
            lambda_grid
                .iter()
                .map(|&lambda| {
                    let (idx, _) = search.select(lambda)?;
                    record(inst, &search.layers[idx], &profile, lambda, None, method, seed)
                })
                .collect()
        }
    }
}

fn record(
    inst: &Instance,
    layer: &QuantizedLayer,
    profile: &SaliencyProfile,
    lambda: f64,
    gamma: Option<f64>,
    method: SweepMethod,
    seed: u64,
) -> Result<SweepRecord> {
    let losses = LossBreakdown::compute(&inst.w, &layer.dequantized, &inst.calib, profile)?;
    Ok(SweepRecord {
        lambda,
        gamma,
        recon: losses.recon,
        sar: losses.sar,
        drift: losses.drift,
        heldout_risk: mean_risk(&inst.w, &layer.dequantized, &inst.heldout)?,
        method: method.label().to_string(),
        seed,
    })
}

/// Number of adjacent pairs where `values` moves the wrong way by more than
/// `rel_tol` (relative to the larger magnitude).
pub fn trend_violations(values: &[f64], increasing: bool, rel_tol: f64) -> usize {
    values
        .windows(2)
        .filter(|p| {
            let step = if increasing { p[0] - p[1] } else { p[1] - p[0] };
            step > rel_tol * p[0].abs().max(p[1].abs())
        })
        .count()
}

/// Index of the smallest value; ties keep the first.
pub fn argmin(values: &[f64]) -> Option<usize> {
    crate::objective::argmin_first(values)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibSizeRow {
    pub size: usize,
    pub baseline_median: f64,
    pub selected_median: f64,
    /// `(baseline − selected) / baseline`.
    pub relative_gap: f64,
    pub chosen_lambdas: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Held-out risk of the `λ = 0` sequential baseline (all calibration
/// samples) against the validation-selected configuration, per calibration size.
pub fn calib_size_study(
    spec: &ExperimentSpec,
    scheme: &QuantScheme,
    sizes: &[usize],
    seeds: &[u64],
    gbs: &GbsConfig,
) -> Result<Vec<CalibSizeRow>> {
    if sizes.is_empty() || sizes.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::invalid("sizes must be non-empty and strictly ascending"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seed list must be non-empty"));
    }
    let gbs = GbsConfig { scheme: *scheme, block_size: spec.block_size, ..gbs.clone() };
    let jobs: Vec<(usize, u64)> = sizes.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let results = par::map_indexed(jobs.len(), |k| {
        let (n, seed) = jobs[k];
        let inst = spec.instance(seed, n)?;
        let (base, _) = quantize_gbs(&inst.w, &inst.calib, GbsSaliency::Identity, 0.0, None, scheme, spec.block_size)?;
        let batch = CalibrationBatch::split_tail(inst.calib.clone(), gbs.val_fraction)?;
        let sel = select_hparams_gbs(&inst.w, &batch, &gbs)?;
        // Refit with the chosen pair on every calibration sample, so both
        // arms see the same data in their final solve.
        let (refit, _) = quantize_gbs(&inst.w, &inst.calib, gbs.saliency, sel.lambda, sel.gamma, scheme, spec.block_size)?;
        Ok::<_, Error>((
            mean_risk(&inst.w, &base.dequantized, &inst.heldout)?,
            mean_risk(&inst.w, &refit.dequantized, &inst.heldout)?,
            sel.lambda,
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let chunk = &results[i * seeds.len()..(i + 1) * seeds.len()];
            let b: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let s: Vec<f64> = chunk.iter().map(|r| r.1).collect();
            let (bm, sm) = (median(&b), median(&s));
            CalibSizeRow {
                size,
                baseline_median: bm,
                selected_median: sm,
                relative_gap: if bm > 0.0 { (bm - sm) / bm } else { 0.0 },
                chosen_lambdas: chunk.iter().map(|r| r.2).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::rtn;

    #[test]
    fn plain_layer_without_outliers() {
        let spec = SynthLayerSpec { d_out: 3, d_in: 5, outlier_channels: 2, outlier_scale: 1.0, weight_std: 1.0, seed: 3 };
        let a = gen_layer(&spec).unwrap();
        let b = gen_layer(&SynthLayerSpec { outlier_channels: 0, ..spec.clone() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen_layer(&spec).unwrap(), a);
    }

    #[test]
    fn outlier_columns_dominate() {
        let spec = SynthLayerSpec { d_out: 4, d_in: 8, outlier_channels: 2, outlier_scale: 10.0, weight_std: 1.0, seed: 7 };
        let w = gen_layer(&spec).unwrap();
        let mean_abs: Vec<f64> = (0..8).map(|c| w.column(c).iter().map(|v| v.abs()).sum::<f64>() / 4.0).collect();
        let med = median(&mean_abs);
        for c in outlier_indices(&spec) {
            assert!(mean_abs[c] >= 5.0 * med, "{c}: {} vs {med}", mean_abs[c]);
        }
    }

    #[test]
    fn calibration_is_clipped_and_seeded() {
        let b = gen_calibration(6, 50, 1.5, 0.25, 9).unwrap();
        for c in 0..50 {
            let n: f64 = b.x.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= 1.5 * (1.0 + 1e-15));
        }
        assert_eq!(b, gen_calibration(6, 50, 1.5, 0.25, 9).unwrap());
        assert_eq!(b.val_indices(), 37..50);
        let wide = gen_calibration(3, 10, 1e9, 0.5, 1).unwrap();
        let mut rng = substream(1, "calibration", 0);
        assert_eq!(wide.x[(0, 0)], gaussian(&mut rng));
    }

    #[test]
    fn evaluation_identities() {
        let w = Matrix::from_rows(&[&[1.0]]);
        let layer = QuantizedLayer::from_codes(
            QuantScheme::symmetric(4, Granularity::PerChannel),
            vec![3],
            crate::quantizer::ParamGrid::uniform(1, 1, 1, crate::quantizer::GroupParams { scale: 1.0, zero_point: 0 }),
            None,
        )
        .unwrap();
        let e = evaluate(&w, &layer, &Matrix::from_rows(&[&[3.0]]), &SaliencyProfile::identity(1)).unwrap();
        assert_eq!(e.heldout_risk, 36.0);

        let spec = ExperimentSpec { n_heldout: 256, ..ExperimentSpec::default() };
        let inst = spec.instance(1, 64).unwrap();
        let q = rtn(&inst.w, &ExperimentSpec::scheme_default()).unwrap();
        let e = evaluate(&inst.w, &q, &inst.heldout, &SaliencyProfile::identity(128)).unwrap();
        assert_eq!(e.heldout_risk * 256.0, e.losses.recon);
        let same = QuantizedLayer { dequantized: inst.w.clone(), ..q };
        let z = evaluate(&inst.w, &same, &inst.heldout, &SaliencyProfile::identity(128)).unwrap();
        assert_eq!((z.heldout_risk, z.losses.recon, z.losses.drift, z.losses.sar), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn shift_stays_within_band() {
        let s = covariance_shift(100, 0.3, 4);
        assert!(s.iter().all(|v| (0.7f64.sqrt()..=1.3f64.sqrt()).contains(v)));
    }

    #[test]
    fn single_point_sweep_matches_direct_run() {
        let spec = ExperimentSpec {
            layer: SynthLayerSpec { d_out: 8, d_in: 16, ..SynthLayerSpec::default() },
            n_calib: 32,
            n_heldout: 64,
            ..ExperimentSpec::default()
        };
        let scheme = QuantScheme::asymmetric(4, Granularity::Group(8));
        let recs = sweep_lambda(&spec, &scheme, SweepMethod::Gbs, &[0.0], &[5]).unwrap();
        assert_eq!(recs.len(), 1);
        let inst = spec.instance(5, 32).unwrap();
        let (q, _) = quantize_gbs(&inst.w, &inst.calib, GbsSaliency::Gbs, 0.0, Some(0.35), &scheme, 128).unwrap();
        let (g, _) = quantize_gbs(&inst.w, &inst.calib, GbsSaliency::Identity, 0.0, None, &scheme, 128).unwrap();
        assert_eq!(q.codes, g.codes);
        assert_eq!(recs[0].heldout_risk, mean_risk(&inst.w, &q.dequantized, &inst.heldout).unwrap());
        assert_eq!(recs, sweep_lambda(&spec, &scheme, SweepMethod::Gbs, &[0.0], &[5]).unwrap());
    }

    #[test]
    fn sweep_records_are_sorted() {
        let spec = ExperimentSpec {
            layer: SynthLayerSpec { d_out: 4, d_in: 8, ..SynthLayerSpec::default() },
            n_calib: 16,
            n_heldout: 32,
            ..ExperimentSpec::default()
        };
        let scheme = QuantScheme::asymmetric(4, Granularity::Group(4));
        let recs = sweep_lambda(&spec, &scheme, SweepMethod::Gs, &[1.0, 0.1, 0.5], &[3, 1]).unwrap();
        let keys: Vec<(u64, f64)> = recs.iter().map(|r| (r.seed, r.lambda)).collect();
        assert_eq!(keys, vec![(1, 0.1), (1, 0.5), (1, 1.0), (3, 0.1), (3, 0.5), (3, 1.0)]);
    }

    #[test]
    fn trend_counting() {
        assert_eq!(trend_violations(&[1.0, 2.0, 1.99, 3.0], true, 0.01), 0);
        assert_eq!(trend_violations(&[1.0, 2.0, 1.5, 3.0], true, 0.01), 1);
        assert_eq!(trend_violations(&[3.0, 2.0, 2.5, 1.0], false, 0.01), 1);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
