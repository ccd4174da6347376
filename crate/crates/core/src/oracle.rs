//! Brute-force and independently derived verifiers.
//!
//! Nothing here shares numerical code with the solvers beyond the matrix
//! container and the group-parameter fit: the linear algebra is a separate
//! Gauss-Jordan / Cholesky–Banachiewicz implementation, discrete problems are
//! solved by enumeration, and the generalization bound is checked by Monte
//! Carlo simulation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{gram, Matrix};
use crate::par;
use crate::quantizer::{Granularity, ParamGrid, QuantScheme, QuantizedLayer};
use crate::rng::{substream, StreamRng};
use crate::saliency::SaliencyProfile;
use crate::solver_gbs::{build_curvature, closed_form_update, curvature_from_gram, run_gbs, trace_row};
use crate::solver_gs::{GsConfig, GsSaliency, GsSearch};

/// Tie tolerance for penalized-argmin membership.
pub const TIE_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Reference dense linear algebra

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.push(b[i]);
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                let (top, bottom) = m.split_at_mut(r);
                for (a, b) in bottom[0][c..].iter_mut().zip(&top[c][c..]) {
                    *a -= f * b;
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan_inverse(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = a.row(i).to_vec();
            r.extend((0..n).map(|k| if k == i { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))?;
        if m[p][c].abs() < 1e-300 {
            return None;
        }
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        let pivot_row = m[c].clone();
        for (r, row) in m.iter_mut().enumerate() {
            if r != c && row[c] != 0.0 {
                let f = row[c];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // symmetrize: the input is symmetric, so is its inverse
            inv[(i, j)] = 0.5 * (m[i][n + j] + m[j][n + i]);
        }
    }
    Some(inv)
}

/// Lower Cholesky factor, row by row.
fn reference_cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = a[(i, i)] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

fn half_quad(g: &Matrix, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..v.len() {
        for j in 0..v.len() {
            acc += v[i] * g[(i, j)] * v[j];
        }
    }
    0.5 * acc
}

// ---------------------------------------------------------------------------
// Row compensation

/// Exact minimizer of `½ΔᵀGΔ` subject to `Δ_j = q̂_j − w_j`, found by solving
/// the reduced system over the remaining coordinates.
pub fn oracle_row_update(w_row: &[f64], g: &Matrix, j: usize, qhat_j: f64) -> Result<(Vec<f64>, f64)> {
    let n = w_row.len();
    if g.shape() != (n, n) {
        return Err(Error::dims("oracle_row_update", format!("{n}x{n}"), format!("{:?}", g.shape())));
    }
    if j >= n {
        return Err(Error::invalid(format!("coordinate {j} out of range for dimension {n}")));
    }
    let e = w_row[j] - qhat_j;
    let rest: Vec<usize> = (0..n).filter(|&k| k != j).collect();
    let mut delta = vec![0.0; n];
    delta[j] = -e;
    if !rest.is_empty() {
        let mut reduced = Matrix::zeros(rest.len(), rest.len());
        for (a, &ra) in rest.iter().enumerate() {
            for (b, &rb) in rest.iter().enumerate() {
                reduced[(a, b)] = g[(ra, rb)];
            }
        }
        let rhs: Vec<f64> = rest.iter().map(|&r| e * g[(r, j)]).collect();
        let sol = gauss_solve(&reduced, &rhs)
            .ok_or_else(|| Error::NumericalFailure("singular reduced system".into()))?;
        for (&r, v) in rest.iter().zip(sol) {
            delta[r] = v;
        }
    }
    let obj = half_quad(g, &delta);
    Ok((delta, obj))
}

// ---------------------------------------------------------------------------
// Discrete enumeration

const MAX_ENUMERATION: usize = 1_000_000;

fn grid_product(grids: &[Vec<f64>]) -> Result<usize> {
    let mut total: usize = 1;
    for g in grids {
        if g.is_empty() {
            return Err(Error::invalid("empty candidate grid"));
        }
        total = total
            .checked_mul(g.len())
            .filter(|&t| t <= MAX_ENUMERATION)
            .ok_or_else(|| Error::invalid(format!("grid product exceeds {MAX_ENUMERATION}")))?;
    }
    Ok(total)
}

/// Visits every point of the product grid in lexicographic order.
fn for_each_grid_point(grids: &[Vec<f64>], mut f: impl FnMut(&[f64])) {
    let d = grids.len();
    let mut idx = vec![0usize; d];
    let mut point: Vec<f64> = grids.iter().map(|g| g[0]).collect();
    loop {
        f(&point);
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < grids[k].len() {
                point[k] = grids[k][idx[k]];
                break;
            }
            idx[k] = 0;
            point[k] = grids[k][0];
        }
    }
}

/// Global minimum of `½ΔᵀGΔ`, `Δ = q − w`, over `q` in the product grid.
/// Ties keep the lexicographically first point.
pub fn exhaustive_quant_min(w_row: &[f64], g: &Matrix, grids: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let d = w_row.len();
    if grids.len() != d || g.shape() != (d, d) {
        return Err(Error::dims("exhaustive_quant_min", d, grids.len()));
    }
    grid_product(grids)?;
    let mut best = (vec![0.0; d], f64::INFINITY);
    let mut delta = vec![0.0; d];
    for_each_grid_point(grids, |q| {
        for k in 0..d {
            delta[k] = q[k] - w_row[k];
        }
        let obj = half_quad(g, &delta);
        if obj < best.1 {
            best = (delta.clone(), obj);
        }
    });
    Ok(best)
}

/// Reconstruction and saliency terms of one discrete candidate row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub delta: Vec<f64>,
    pub recon: f64,
    pub sar: f64,
}

/// Enumerates `(‖ΔᵀX‖², Σ (s_j Δ_j)²)` for every point of the product grid.
pub fn enumerate_tradeoff(w_row: &[f64], x: &Matrix, s: &[f64], grids: &[Vec<f64>]) -> Result<Vec<TradeoffPoint>> {
    let d = w_row.len();
    if grids.len() != d || x.rows() != d || s.len() != d {
        return Err(Error::dims("enumerate_tradeoff", d, grids.len()));
    }
    let total = grid_product(grids)?;
    let mut out = Vec::with_capacity(total);
    for_each_grid_point(grids, |q| {
        let delta: Vec<f64> = q.iter().zip(w_row).map(|(a, b)| a - b).collect();
        let recon = (0..x.cols())
            .map(|c| {
                let v: f64 = (0..d).map(|k| delta[k] * x[(k, c)]).sum();
                v * v
            })
            .sum();
        let sar = delta.iter().zip(s).map(|(dv, sv)| (sv * dv) * (sv * dv)).sum();
        out.push(TradeoffPoint { delta, recon, sar });
    });
    Ok(out)
}

/// First minimizer of `recon + λ·sar`.
pub fn scalarized_argmin(points: &[TradeoffPoint], lambda: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let j = p.recon + lambda * p.sar;
        if best.is_none_or(|(_, b)| j < b) {
            best = Some((i, j));
        }
    }
    best.map(|(i, _)| i)
}

// ---------------------------------------------------------------------------
// Supportedness on a finite frontier

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteCandidate {
    pub id: String,
    pub risk: f64,
    pub dist: f64,
}

impl FiniteCandidate {
    pub fn new(id: impl Into<String>, risk: f64, dist: f64) -> Self {
        Self { id: id.into(), risk, dist }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaInterval {
    pub lambda_min: f64,
    /// `f64::INFINITY` when no candidate has smaller drift.
    #[serde(with = "inf_as_null")]
    pub lambda_max: f64,
    pub supported: bool,
}

impl LambdaInterval {
    pub fn contains(&self, lambda: f64) -> bool {
        self.lambda_min <= lambda && lambda <= self.lambda_max
    }
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn find_chosen<'a>(candidates: &'a [FiniteCandidate], chosen: &str) -> Result<&'a FiniteCandidate> {
    candidates
        .iter()
        .find(|c| c.id == chosen)
        .ok_or_else(|| Error::Precondition(format!("candidate {chosen:?} not in set")))
}

/// Range of penalty weights for which the constrained minimizer `chosen`
/// (minimal risk subject to `dist ≤ R²`) is also a penalized minimizer.
pub fn lambda_interval(candidates: &[FiniteCandidate], chosen: &str, r_sq: f64) -> Result<LambdaInterval> {
    if candidates.iter().any(|c| !c.risk.is_finite() || !c.dist.is_finite()) {
        return Err(Error::invalid("candidate risk and dist must be finite"));
    }
    let c = find_chosen(candidates, chosen)?;
    if c.dist > r_sq {
        return Err(Error::Precondition(format!("candidate {chosen:?} violates dist <= {r_sq}")));
    }
    if let Some(b) = candidates.iter().find(|o| o.dist <= r_sq && o.risk < c.risk) {
        return Err(Error::Precondition(format!(
            "candidate {chosen:?} is not a constrained minimizer ({:?} has lower risk)",
            b.id
        )));
    }
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for o in candidates {
        if o.dist > c.dist {
            lo = lo.max((c.risk - o.risk) / (o.dist - c.dist));
        } else if o.dist < c.dist {
            hi = hi.min((o.risk - c.risk) / (c.dist - o.dist));
        }
    }
    let lambda_min = lo.max(0.0);
    Ok(LambdaInterval { lambda_min, lambda_max: hi, supported: lambda_min <= hi })
}

/// Whether `chosen` attains `min_k risk_k + λ·dist_k` up to [`TIE_TOL`].
pub fn penalized_member(candidates: &[FiniteCandidate], chosen: &FiniteCandidate, lambda: f64) -> bool {
    let jc = chosen.risk + lambda * chosen.dist;
    candidates.iter().all(|o| {
        let jo = o.risk + lambda * o.dist;
        jc - jo <= TIE_TOL * jc.abs().max(jo.abs()).max(1.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeOutcome {
    pub lambda: f64,
    pub in_interval: bool,
    pub recovered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupportednessReport {
    pub interval: LambdaInterval,
    pub probes: Vec<ProbeOutcome>,
    pub pass: bool,
    /// First probe where membership and the interval disagree.
    pub counterexample: Option<ProbeOutcome>,
}

/// Checks `chosen ∈ argmin ⇔ λ ∈ [λ_min, λ_max]` at every probe.
pub fn verify_supportedness(
    candidates: &[FiniteCandidate],
    chosen: &str,
    r_sq: f64,
    probes: &[f64],
) -> Result<SupportednessReport> {
    let interval = lambda_interval(candidates, chosen, r_sq)?;
    let c = find_chosen(candidates, chosen)?;
    let probes: Vec<ProbeOutcome> = probes
        .iter()
        .map(|&lambda| ProbeOutcome {
            lambda,
            in_interval: interval.contains(lambda),
            recovered: penalized_member(candidates, c, lambda),
        })
        .collect();
    let counterexample = probes.iter().find(|p| p.in_interval != p.recovered).cloned();
    Ok(SupportednessReport { interval, pass: counterexample.is_none(), probes, counterexample })
}

// ---------------------------------------------------------------------------
// Finite-class generalization bound

/// `R²·M_X²·sqrt(ln(2|Q|/δ) / (2n))`.
pub fn hoeffding_bound(r: f64, m_x: f64, class_size: usize, n: usize, delta: f64) -> f64 {
    r * r * m_x * m_x * ((2.0 * class_size as f64 / delta).ln() / (2.0 * n as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingConfig {
    pub d_in: usize,
    pub r: f64,
    pub m_x: f64,
    pub n: usize,
    pub delta: f64,
    pub class_size: usize,
    pub trials: usize,
    /// Held-out sample size as a multiple of `n`.
    pub heldout_factor: usize,
    pub seed: u64,
}

impl Default for HoeffdingConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            r: 1.0,
            m_x: 1.0,
            n: 200,
            delta: 0.05,
            class_size: 16,
            trials: 2000,
            heldout_factor: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoeffdingReport {
    pub bound: f64,
    pub trials: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// `δ + 3·sqrt(δ(1−δ)/trials)`.
    pub allowed_rate: f64,
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub pass: bool,
}

/// Draws `x ~ N(0, (M_X²/d)·I)` and rescales it onto the ball `‖x‖ ≤ M_X`.
pub fn clipped_gaussian(rng: &mut StreamRng, d: usize, m_x: f64) -> Vec<f64> {
    let sigma = m_x / (d as f64).sqrt();
    let mut x: Vec<f64> = (0..d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > m_x {
        let f = m_x / norm;
        x.iter_mut().for_each(|v| *v *= f);
    }
    x
}

/// Second-moment matrix `(1/m) Σ x xᵀ` of `m` fresh clipped samples.
fn second_moment(rng: &mut StreamRng, d: usize, m: usize, m_x: f64) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for _ in 0..m {
        let x = clipped_gaussian(rng, d, m_x);
        for i in 0..d {
            for j in i..d {
                c[i * d + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = c[i * d + j] / m as f64;
            c[i * d + j] = v;
            c[j * d + i] = v;
        }
    }
    c
}

/// `tr(ΔW C ΔWᵀ) = E‖ΔW x‖²` under second moment `C`.
fn risk_under(dw: &[f64], d: usize, c: &[f64]) -> f64 {
    let mut total = 0.0;
    for row in dw.chunks(d) {
        for i in 0..d {
            let ci = &c[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(ci).map(|(a, b)| a * b).sum();
            total += row[i] * s;
        }
    }
    total
}

/// Monte Carlo coverage of the finite-class bound.
///
/// Each trial draws a class of square `ΔW` with `‖ΔW‖_F ≤ R`, a calibration
/// sample of size `n` and a held-out sample of size `heldout_factor·n`, and
/// records whether the largest calibration/held-out risk gap exceeds the bound.
pub fn hoeffding_check(cfg: &HoeffdingConfig) -> Result<HoeffdingReport> {
    if cfg.d_in == 0 || cfg.n == 0 || cfg.class_size == 0 || cfg.heldout_factor == 0 {
        return Err(Error::invalid("d_in, n, class_size and heldout_factor must be positive"));
    }
    if !(cfg.r >= 0.0) || !(cfg.m_x > 0.0) || !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(Error::invalid("need R >= 0, M_X > 0 and delta in (0, 1)"));
    }
    if cfg.trials < 1000 {
        return Err(Error::invalid(format!("hoeffding check needs >= 1000 trials, got {}", cfg.trials)));
    }
    let bound = hoeffding_bound(cfg.r, cfg.m_x, cfg.class_size, cfg.n, cfg.delta);
    let d = cfg.d_in;
    let devs = par::map_indexed(cfg.trials, |t| {
        let mut rng = substream(cfg.seed, "hoeffding", t as u64);
        let class: Vec<Vec<f64>> = (0..cfg.class_size)
            .map(|_| {
                let mut dw: Vec<f64> = (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = dw.iter().map(|v| v * v).sum::<f64>().sqrt();
                let radius = cfg.r * rng.random::<f64>();
                let f = if norm > 0.0 { radius / norm } else { 0.0 };
                dw.iter_mut().for_each(|v| *v *= f);
                dw
            })
            .collect();
        let cal = second_moment(&mut rng, d, cfg.n, cfg.m_x);
        let held = second_moment(&mut rng, d, cfg.n * cfg.heldout_factor, cfg.m_x);
        class
            .iter()
            .map(|dw| (risk_under(dw, d, &cal) - risk_under(dw, d, &held)).abs())
            .fold(0.0, f64::max)
    });
    let violations = devs.iter().filter(|&&v| v > bound).count();
    let violation_rate = violations as f64 / cfg.trials as f64;
    let allowed_rate = cfg.delta + 3.0 * (cfg.delta * (1.0 - cfg.delta) / cfg.trials as f64).sqrt();
    Ok(HoeffdingReport {
        bound,
        trials: cfg.trials,
        violations,
        violation_rate,
        allowed_rate,
        max_deviation: devs.iter().copied().fold(0.0, f64::max),
        mean_deviation: devs.iter().sum::<f64>() / devs.len() as f64,
        pass: violation_rate <= allowed_rate,
    })
}

// ---------------------------------------------------------------------------
// Reference GPTQ

/// Literal matrix-form sequential quantization with the undamped Gram matrix,
/// computed with the reference linear algebra in this module.
pub fn reference_gptq(w: &Matrix, x: &Matrix, scheme: &QuantScheme, block: usize) -> Result<QuantizedLayer> {
    let (d_out, d_in) = w.shape();
    if x.rows() != d_in {
        return Err(Error::dims("reference_gptq", d_in, x.rows()));
    }
    if block == 0 {
        return Err(Error::invalid("block size must be >= 1"));
    }
    let mut g = Matrix::zeros(d_in, d_in);
    for i in 0..d_in {
        for j in 0..d_in {
            g[(i, j)] = (0..x.cols()).map(|c| x[(i, c)] * x[(j, c)]).sum();
        }
    }
    let ginv = gauss_jordan_inverse(&g).ok_or_else(|| Error::NumericalFailure("singular Gram matrix".into()))?;
    let l = reference_cholesky(&ginv).ok_or_else(|| Error::NumericalFailure("inverse not positive definite".into()))?;
    let m = l.transpose();

    let params = ParamGrid::fit(w, scheme)?;
    let mut u = w.clone();
    let mut codes = vec![0i32; d_out * d_in];
    let mut i = 0;
    while i < d_in {
        let iend = (i + block).min(d_in);
        let mut e = Matrix::zeros(d_out, iend - i);
        for j in i..iend {
            for r in 0..d_out {
                let p = params.get(r, j);
                let c = p.code(u[(r, j)], scheme);
                codes[r * d_in + j] = c;
                e[(r, j - i)] = (u[(r, j)] - p.dequant(c)) / m[(j, j)];
            }
            for r in 0..d_out {
                for k in j..iend {
                    let v = u[(r, k)] - e[(r, j - i)] * m[(j, k)];
                    u.row_mut(r)[k] = v;
                }
            }
        }
        if iend < d_in {
            let mb = m.submatrix(i..iend, iend..d_in);
            let upd = e.matmul(&mb)?;
            for r in 0..d_out {
                for k in iend..d_in {
                    let v = u[(r, k)] - upd[(r, k - iend)];
                    u.row_mut(r)[k] = v;
                }
            }
        }
        i = iend;
    }
    QuantizedLayer::from_codes(*scheme, codes, params, None)
}

// ---------------------------------------------------------------------------
// Suites

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Compensation,
    Supportedness,
    Hoeffding,
    GptqEquiv,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Compensation, Suite::Supportedness, Suite::Hoeffding, Suite::GptqEquiv];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Compensation => "compensation",
            Suite::Supportedness => "supportedness",
            Suite::Hoeffding => "hoeffding",
            Suite::GptqEquiv => "gptq-equiv",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Compensation => 500,
            Suite::Supportedness => 1000,
            Suite::Hoeffding => 2000,
            Suite::GptqEquiv => 100,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?}")))
    }
}

/// Deliberate defects used to confirm that the suites can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FaultInjection {
    pub flip_compensation_sign: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub trials: usize,
    pub failures: usize,
    pub details: Value,
    pub counterexample: Option<Value>,
}

impl SuiteReport {
    fn from_outcomes(suite: Suite, outcomes: Vec<Option<Value>>, details: Value) -> Self {
        let failures = outcomes.iter().filter(|o| o.is_some()).count();
        SuiteReport {
            suite,
            pass: failures == 0,
            trials: outcomes.len(),
            failures,
            details,
            counterexample: outcomes.into_iter().flatten().next(),
        }
    }
}

fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

/// `AAᵀ + ridge·I` for a Gaussian `A` of shape `d × (d + 3)`.
pub fn random_spd(rng: &mut StreamRng, d: usize, ridge: f64) -> Matrix {
    let a = gaussian_matrix(rng, d, d + 3);
    let mut g = gram(&a);
    for i in 0..d {
        g[(i, i)] += ridge;
    }
    g
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn compensation_instance(seed: u64, idx: usize, fault: FaultInjection) -> Result<Option<Value>> {
    let mut rng = substream(seed, "compensation", idx as u64);
    let d = rng.random_range(1..=8usize);
    let g = random_spd(&mut rng, d, 0.05);
    let j = rng.random_range(0..d);
    let e: f64 = rng.random_range(-1.0..1.0);
    let w_row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let sign = if fault.flip_compensation_sign { -1.0 } else { 1.0 };

    let (oracle_delta, oracle_obj) = oracle_row_update(&w_row, &g, j, w_row[j] - e)?;
    let (mut cf_delta, cf_obj) = closed_form_update(&g, j, e)?;
    for (k, v) in cf_delta.iter_mut().enumerate() {
        if k != j {
            *v *= sign;
        }
    }
    let delta_ok = oracle_delta.iter().zip(&cf_delta).all(|(a, b)| close(*a, *b, 1e-9));
    let obj_ok = (oracle_obj - cf_obj).abs() <= 1e-9 * oracle_obj.abs().max(f64::MIN_POSITIVE)
        || (oracle_obj == 0.0 && cf_obj == 0.0);
    if !delta_ok || !obj_ok {
        return Ok(Some(json!({
            "kind": "closed_form",
            "instance": idx,
            "gram": g,
            "j": j,
            "e": e,
            "oracle_delta": oracle_delta,
            "closed_form_delta": cf_delta,
            "oracle_obj": oracle_obj,
            "closed_form_obj": cf_obj,
        })));
    }

    // Every step of the row sweep must match the trailing-subproblem oracle.
    let curv = curvature_from_gram(g.clone())?;
    let scheme = QuantScheme::asymmetric(3, Granularity::PerChannel);
    let wm = Matrix::new(1, d, w_row.clone())?;
    let params = ParamGrid::fit(&wm, &scheme)?;
    let (_, steps) = trace_row(&w_row, &curv, &scheme, params.row(0), params.group_len);
    for step in steps {
        let c = step.column;
        let sub = g.submatrix(c..d, c..d);
        let local = vec![0.0; d - c];
        let (od, oobj) = oracle_row_update(&local, &sub, 0, -step.error)?;
        let sweep_update: Vec<f64> = step.update.iter().map(|v| sign * v).collect();
        let mjj = curv.factor.get(c, c);
        let sweep_obj = step.error * step.error / (2.0 * mjj * mjj);
        let ok = od[1..].iter().zip(&sweep_update).all(|(a, b)| close(*a, *b, 1e-9))
            && (step.error == 0.0 || (oobj - sweep_obj).abs() <= 1e-9 * oobj.abs());
        if !ok {
            return Ok(Some(json!({
                "kind": "sweep_step",
                "instance": idx,
                "gram": g,
                "w_row": w_row,
                "column": c,
                "error": step.error,
                "oracle_update": od[1..].to_vec(),
                "sweep_update": sweep_update,
                "oracle_obj": oobj,
                "sweep_obj": sweep_obj,
            })));
        }
    }
    Ok(None)
}

/// Closed-form and per-step compensation against the reduced-system oracle.
pub fn compensation_suite(trials: usize, seed: u64, fault: FaultInjection) -> Result<SuiteReport> {
    let outcomes = par::map_indexed(trials, |i| compensation_instance(seed, i, fault))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport::from_outcomes(
        Suite::Compensation,
        outcomes,
        json!({ "max_dim": 8, "tolerance": 1e-9 }),
    ))
}

/// The three-candidate frontier with `λ_min = 0.1`, `λ_max = 1/3`.
pub fn worked_frontier() -> Vec<FiniteCandidate> {
    vec![
        FiniteCandidate::new("A", 1.0, 4.0),
        FiniteCandidate::new("B", 0.5, 9.0),
        FiniteCandidate::new("C", 2.0, 1.0),
    ]
}

struct FrontierInstance {
    candidates: Vec<FiniteCandidate>,
    chosen: String,
    r_sq: f64,
    probes: Vec<f64>,
}

fn frontier_instance(seed: u64, idx: usize) -> FrontierInstance {
    let mut rng = substream(seed, "supportedness", idx as u64);
    let integer = idx.is_multiple_of(2);
    let m = rng.random_range(1..=16usize);
    let candidates: Vec<FiniteCandidate> = (0..m)
        .map(|k| {
            let (risk, dist) = if integer {
                (rng.random_range(0..=20u32) as f64, rng.random_range(0..=20u32) as f64)
            } else {
                (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0))
            };
            FiniteCandidate::new(format!("q{k}"), risk, dist)
        })
        .collect();
    let r_sq = candidates[rng.random_range(0..m)].dist;
    let chosen = candidates
        .iter()
        .filter(|c| c.dist <= r_sq)
        .min_by(|a, b| a.risk.total_cmp(&b.risk).then(a.dist.total_cmp(&b.dist)))
        .expect("at least one feasible candidate")
        .id
        .clone();
    let mut probes: Vec<f64> = if integer {
        (0..=96).map(|k| k as f64 / 8.0).collect()
    } else {
        vec![0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0]
    };
    if let Ok(iv) = lambda_interval(&candidates, &chosen, r_sq) {
        probes.push(iv.lambda_min);
        probes.push(iv.lambda_min * (1.0 - 1e-3) - 1e-3);
        probes.push(iv.lambda_min * (1.0 + 1e-3) + 1e-3);
        if iv.lambda_max.is_finite() {
            probes.push(iv.lambda_max);
            probes.push(iv.lambda_max * (1.0 - 1e-3) - 1e-3);
            probes.push(iv.lambda_max * (1.0 + 1e-3) + 1e-3);
            probes.push(0.5 * (iv.lambda_min + iv.lambda_max));
        }
    }
    probes.retain(|p| *p >= 0.0);
    FrontierInstance { candidates, chosen, r_sq, probes }
}

/// Interval membership against direct enumeration on random frontiers.
pub fn supportedness_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let worked = verify_supportedness(&worked_frontier(), "A", 4.0, &[0.05, 0.1, 0.2, 1.0 / 3.0, 0.5])?;
    let pattern: Vec<bool> = worked.probes.iter().map(|p| p.recovered).collect();
    let worked_ok = worked.pass
        && (worked.interval.lambda_min - 0.1).abs() < 1e-15
        && (worked.interval.lambda_max - 1.0 / 3.0).abs() < 1e-15
        && pattern == [false, true, true, true, false];

    let results = par::map_indexed(trials, |i| {
        let inst = frontier_instance(seed, i);
        verify_supportedness(&inst.candidates, &inst.chosen, inst.r_sq, &inst.probes).map(|rep| (inst, rep))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let unsupported = results.iter().filter(|(_, r)| !r.interval.supported).count();
    let mut outcomes: Vec<Option<Value>> = Vec::with_capacity(trials + 1);
    outcomes.push((!worked_ok).then(|| json!({ "kind": "worked_instance", "report": worked })));
    for (i, (inst, rep)) in results.into_iter().enumerate() {
        let unsupported_recovered = !rep.interval.supported && rep.probes.iter().any(|p| p.recovered);
        outcomes.push((!rep.pass || unsupported_recovered).then(|| {
            json!({
                "kind": "random_instance",
                "instance": i,
                "candidates": inst.candidates,
                "chosen": inst.chosen,
                "r_sq": inst.r_sq,
                "interval": rep.interval,
                "probe": rep.counterexample,
            })
        }));
    }
    Ok(SuiteReport::from_outcomes(
        Suite::Supportedness,
        outcomes,
        json!({ "unsupported_instances": unsupported, "tie_tolerance": TIE_TOL }),
    ))
}

/// Coverage of the finite-class bound at the default configuration.
pub fn hoeffding_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let cfg = HoeffdingConfig { trials, seed, ..HoeffdingConfig::default() };
    let rep = hoeffding_check(&cfg)?;
    let counterexample = (!rep.pass).then(|| json!(rep));
    Ok(SuiteReport {
        suite: Suite::Hoeffding,
        pass: rep.pass,
        trials,
        failures: usize::from(!rep.pass),
        details: json!({ "config": cfg, "report": rep }),
        counterexample,
    })
}

fn gptq_instance(seed: u64, idx: usize) -> Result<Option<Value>> {
    let mut rng = substream(seed, "gptq-equiv", idx as u64);
    let d_in = rng.random_range(2..=64usize);
    let d_out = rng.random_range(1..=16usize);
    let n = 256;
    let w = gaussian_matrix(&mut rng, d_out, d_in);
    let x = gaussian_matrix(&mut rng, d_in, n);
    let bits = rng.random_range(2..=8u32);
    let granularity = match rng.random_range(0..3u32) {
        0 => Granularity::PerChannel,
        1 => Granularity::Group(rng.random_range(1..=32usize)),
        _ => Granularity::PerTensor,
    };
    let scheme = if rng.random::<bool>() {
        QuantScheme::asymmetric(bits, granularity)
    } else {
        QuantScheme::symmetric(bits, granularity)
    };
    let block = [1usize, 4, 16, 128][rng.random_range(0..4usize)];

    let curv = build_curvature(&x, &SaliencyProfile::identity(d_in), 0.0)?;
    let ours = run_gbs(&w, &curv, &scheme, block)?;
    let reference = reference_gptq(&w, &x, &scheme, block)?;
    let mismatch = ours.codes.iter().zip(&reference.codes).position(|(a, b)| a != b);
    let scales_equal = ours.scales() == reference.scales() && ours.zero_points() == reference.zero_points();
    if mismatch.is_some() || !scales_equal || curv.jitter_used != 0.0 {
        return Ok(Some(json!({
            "instance": idx,
            "shape": [d_out, d_in],
            "scheme": scheme,
            "block": block,
            "first_code_mismatch": mismatch.map(|p| json!({
                "row": p / d_in,
                "col": p % d_in,
                "solver": ours.codes[p],
                "reference": reference.codes[p],
            })),
            "scales_equal": scales_equal,
            "jitter_used": curv.jitter_used,
        })));
    }
    Ok(None)
}

/// `λ = 0` sequential quantization against the reference implementation.
pub fn gptq_equiv_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let outcomes = par::map_indexed(trials, |i| gptq_instance(seed, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport::from_outcomes(
        Suite::GptqEquiv,
        outcomes,
        json!({ "max_d_in": 64, "n": 256 }),
    ))
}

/// Runs one suite; `trials = None` uses the suite's default.
pub fn run_suite(suite: Suite, trials: Option<usize>, seed: u64, fault: FaultInjection) -> Result<SuiteReport> {
    let trials = trials.unwrap_or(suite.default_trials());
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    match suite {
        Suite::Compensation => compensation_suite(trials, seed, fault),
        Suite::Supportedness => supportedness_suite(trials, seed),
        Suite::Hoeffding => hoeffding_suite(trials, seed),
        Suite::GptqEquiv => gptq_equiv_suite(trials, seed),
    }
}

// ---------------------------------------------------------------------------
// Scalarization monotonicity

fn monotone_selection(recon: &[f64], sar: &[f64], picks: &[usize]) -> bool {
    picks.windows(2).all(|p| sar[p[1]] <= sar[p[0]] && recon[p[1]] >= recon[p[0]])
}

/// Sweeping `λ` upwards must never increase the selected saliency term nor
/// decrease the selected reconstruction term. Even instances use the
/// grid-search selector, odd ones the exhaustive discrete minimizer on
/// integer data (so every objective is exact).
pub fn scalarization_instance(seed: u64, idx: usize) -> Result<Option<Value>> {
    let mut rng = substream(seed, "scalarization", idx as u64);
    if idx.is_multiple_of(2) {
        let d_out = rng.random_range(1..=6usize);
        let d_in = rng.random_range(2..=12usize);
        let w = gaussian_matrix(&mut rng, d_out, d_in);
        let x = gaussian_matrix(&mut rng, d_in, 24);
        let cfg = GsConfig {
            alpha_grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            saliency: if rng.random::<bool>() { GsSaliency::Gs } else { GsSaliency::Identity },
            scheme: QuantScheme::asymmetric(3, Granularity::Group(4)),
            ..GsConfig::default()
        };
        let search = GsSearch::build(&w, &x, &cfg)?;
        let lambdas: Vec<f64> = (0..=40).map(|k| k as f64 / 8.0).collect();
        let picks = lambdas.iter().map(|&l| search.select(l).map(|s| s.0)).collect::<Result<Vec<_>>>()?;
        let recon: Vec<f64> = search.raw.iter().map(|r| r.recon).collect();
        let sar: Vec<f64> = search.raw.iter().map(|r| r.sar).collect();
        if !monotone_selection(&recon, &sar, &picks) {
            return Ok(Some(json!({ "kind": "grid_search", "instance": idx, "picks": picks, "recon": recon, "sar": sar })));
        }
    } else {
        let d = rng.random_range(1..=4usize);
        let w_row: Vec<f64> = (0..d).map(|_| rng.random_range(-8..=8i32) as f64 / 2.0).collect();
        let x = Matrix::new(d, 6, (0..d * 6).map(|_| rng.random_range(-3..=3i32) as f64).collect())?;
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(1..=4i32) as f64).collect();
        let grids: Vec<Vec<f64>> = (0..d).map(|_| (-4..=4).map(f64::from).collect()).collect();
        let pts = enumerate_tradeoff(&w_row, &x, &s, &grids)?;
        let lambdas: Vec<f64> = (0..=64).map(|k| k as f64 / 4.0).collect();
        let picks: Vec<usize> = lambdas.iter().map(|&l| scalarized_argmin(&pts, l).expect("non-empty")).collect();
        let recon: Vec<f64> = pts.iter().map(|p| p.recon).collect();
        let sar: Vec<f64> = pts.iter().map(|p| p.sar).collect();
        if !monotone_selection(&recon, &sar, &picks) {
            return Ok(Some(json!({ "kind": "exhaustive", "instance": idx, "w_row": w_row, "picks": picks })));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reference_inverse_and_cholesky() {
        let g = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let inv = gauss_jordan_inverse(&g).unwrap();
        assert_relative_eq!(inv[(0, 0)], 3.0 / 8.0, epsilon = 1e-15);
        assert_relative_eq!(inv[(0, 1)], -2.0 / 8.0, epsilon = 1e-15);
        let l = reference_cholesky(&g).unwrap();
        assert_eq!(l[(0, 0)], 2.0);
        assert_eq!(l[(1, 0)], 1.0);
        assert_relative_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
        assert!(reference_cholesky(&Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).is_none());
    }

    #[test]
    fn row_update_examples() {
        let (d, obj) = oracle_row_update(&[0.0, 0.3, 0.0], &Matrix::identity(3), 1, 0.0).unwrap();
        assert_eq!(d, vec![0.0, -0.3, 0.0]);
        assert_relative_eq!(obj, 0.045, epsilon = 1e-15);

        let (d, obj) = oracle_row_update(&[0.7, 0.2], &Matrix::identity(2), 0, 0.7).unwrap();
        assert_eq!(d, vec![0.0, 0.0]);
        assert_eq!(obj, 0.0);

        let g = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let (d, obj) = oracle_row_update(&[1.0, 0.0], &g, 0, 0.0).unwrap();
        assert_eq!(d, vec![-1.0, 0.5]);
        let (cd, cobj) = closed_form_update(&g, 0, 1.0).unwrap();
        assert_relative_eq!(obj, 0.75, epsilon = 1e-15);
        assert_relative_eq!(obj, cobj, epsilon = 1e-15);
        assert_relative_eq!(d[1], cd[1], epsilon = 1e-15);
    }

    #[test]
    fn exhaustive_examples() {
        let (d, obj) = exhaustive_quant_min(&[0.4], &Matrix::identity(1), &[vec![0.0, 1.0]]).unwrap();
        assert_eq!(d, vec![-0.4]);
        assert_relative_eq!(obj, 0.08, epsilon = 1e-15);

        let grids = vec![vec![-1.0, 0.0, 1.0], vec![0.0, 2.0]];
        let (d, obj) = exhaustive_quant_min(&[1.0, 2.0], &Matrix::from_diag(&[3.0, 0.5]), &grids).unwrap();
        assert_eq!((d, obj), (vec![0.0, 0.0], 0.0));

        let (d, _) = exhaustive_quant_min(&[0.8, 1.4], &Matrix::from_diag(&[3.0, 0.5]), &grids).unwrap();
        assert_relative_eq!(d[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(d[1], 0.6, epsilon = 1e-15);

        let huge: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0; 100]).collect();
        assert!(exhaustive_quant_min(&[0.0; 4], &Matrix::identity(4), &huge).is_err());
    }

    #[test]
    fn worked_frontier_interval() {
        let iv = lambda_interval(&worked_frontier(), "A", 4.0).unwrap();
        assert_relative_eq!(iv.lambda_min, 0.1, epsilon = 1e-15);
        assert_relative_eq!(iv.lambda_max, 1.0 / 3.0, epsilon = 1e-15);
        assert!(iv.supported);
        let c = worked_frontier();
        let j = |l: f64| c.iter().map(|k| k.risk + l * k.dist).collect::<Vec<_>>();
        let j2 = j(0.2);
        assert_relative_eq!(j2[0], 1.8, epsilon = 1e-15);
        assert_relative_eq!(j2[1], 2.3, epsilon = 1e-15);
        assert_relative_eq!(j2[2], 2.2, epsilon = 1e-15);
        let rep = verify_supportedness(&c, "A", 4.0, &[0.05, 0.1, 0.2, 1.0 / 3.0, 0.5]).unwrap();
        assert!(rep.pass);
        let pattern: Vec<bool> = rep.probes.iter().map(|p| p.recovered).collect();
        assert_eq!(pattern, vec![false, true, true, true, false]);
    }

    #[test]
    fn interval_edge_cases() {
        let single = vec![FiniteCandidate::new("a", 3.0, 2.0)];
        let iv = lambda_interval(&single, "a", 2.0).unwrap();
        assert_eq!((iv.lambda_min, iv.lambda_max), (0.0, f64::INFINITY));
        assert!(verify_supportedness(&single, "a", 2.0, &[0.0, 1.0, 1e9]).unwrap().probes.iter().all(|p| p.recovered));

        let tie = vec![FiniteCandidate::new("a", 1.0, 3.0), FiniteCandidate::new("b", 1.0, 1.0)];
        let iv = lambda_interval(&tie, "a", 3.0).unwrap();
        assert_eq!((iv.lambda_min, iv.lambda_max, iv.supported), (0.0, 0.0, true));

        // B sits above the segment joining A and C, so it is never a penalized minimizer.
        let unsupported = vec![
            FiniteCandidate::new("A", 0.0, 4.0),
            FiniteCandidate::new("B", 3.0, 2.0),
            FiniteCandidate::new("C", 4.0, 0.0),
        ];
        let rep = verify_supportedness(&unsupported, "B", 2.0, &(0..200).map(|k| k as f64 / 20.0).collect::<Vec<_>>()).unwrap();
        assert!(!rep.interval.supported);
        assert!(rep.pass);
        assert!(rep.probes.iter().all(|p| !p.recovered));
    }

    #[test]
    fn interval_preconditions() {
        let c = worked_frontier();
        assert!(matches!(lambda_interval(&c, "B", 4.0), Err(Error::Precondition(_))));
        assert!(matches!(lambda_interval(&c, "C", 4.0), Err(Error::Precondition(_))));
        assert!(matches!(lambda_interval(&c, "Z", 4.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn bound_value_and_scaling() {
        let b = hoeffding_bound(1.0, 1.0, 16, 200, 0.05);
        assert!((b - 0.1271).abs() < 5e-5, "{b}");
        assert_relative_eq!(hoeffding_bound(1.0, 1.0, 16, 800, 0.05), b / 2.0, epsilon = 1e-15);
        assert_eq!(hoeffding_bound(0.0, 1.0, 16, 200, 0.05), 0.0);
    }

    #[test]
    fn zero_radius_has_no_deviation() {
        let rep = hoeffding_check(&HoeffdingConfig { r: 0.0, trials: 1000, n: 20, ..HoeffdingConfig::default() }).unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.max_deviation, 0.0);
        assert!(hoeffding_check(&HoeffdingConfig { trials: 999, ..HoeffdingConfig::default() }).is_err());
    }

    #[test]
    fn clipped_samples_stay_in_ball() {
        let mut rng = substream(1, "t", 0);
        for _ in 0..1000 {
            let x = clipped_gaussian(&mut rng, 8, 0.7);
            assert!(x.iter().map(|v| v * v).sum::<f64>().sqrt() <= 0.7 * (1.0 + 1e-15));
        }
    }

    #[test]
    fn suites_pass_small() {
        let f = FaultInjection::default();
        assert!(run_suite(Suite::Compensation, Some(50), 3, f).unwrap().pass);
        assert!(run_suite(Suite::Supportedness, Some(100), 3, f).unwrap().pass);
        assert!(run_suite(Suite::GptqEquiv, Some(5), 3, f).unwrap().pass);
        assert!(run_suite(Suite::Compensation, Some(0), 3, f).is_err());
    }

    #[test]
    fn flipped_compensation_is_caught() {
        let rep = run_suite(Suite::Compensation, Some(20), 3, FaultInjection { flip_compensation_sign: true }).unwrap();
        assert!(!rep.pass);
        assert!(rep.counterexample.is_some());
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), json!(s.name()));
        }
        assert!("everything".parse::<Suite>().is_err());
    }
}
