//! Uniform (symmetric or affine) weight quantization with per-group scales
//! along the input dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Codes in `[-(2^{N-1}-1), 2^{N-1}-1]`, zero point fixed at 0.
    #[serde(alias = "sym")]
    Symmetric,
    /// Codes in `[0, 2^N - 1]` with an integer zero point.
    #[serde(alias = "asym")]
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Contiguous groups of this many input channels per output row; the last
    /// group may be short.
    Group(usize),
    PerChannel,
    PerTensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    HalfToEven,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub mode: QuantMode,
    pub granularity: Granularity,
    #[serde(default)]
    pub rounding: Rounding,
}

impl Default for QuantScheme {
    /// 4-bit asymmetric, group size 128.
    fn default() -> Self {
        Self {
            bits: 4,
            mode: QuantMode::Asymmetric,
            granularity: Granularity::Group(128),
            rounding: Rounding::HalfToEven,
        }
    }
}

impl QuantScheme {
    pub fn symmetric(bits: u32, granularity: Granularity) -> Self {
        Self {
            bits,
            mode: QuantMode::Symmetric,
            granularity,
            rounding: Rounding::HalfToEven,
        }
    }

    pub fn asymmetric(bits: u32, granularity: Granularity) -> Self {
        Self {
            bits,
            mode: QuantMode::Asymmetric,
            granularity,
            rounding: Rounding::HalfToEven,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::invalid(format!("bits must be in 2..=16, got {}", self.bits)));
        }
        if let Granularity::Group(0) = self.granularity {
            return Err(Error::invalid("group size must be >= 1"));
        }
        Ok(())
    }

    /// Inclusive integer code range.
    pub fn code_range(&self) -> (i32, i32) {
        match self.mode {
            QuantMode::Symmetric => {
                let q = (1i32 << (self.bits - 1)) - 1;
                (-q, q)
            }
            QuantMode::Asymmetric => (0, (1i32 << self.bits) - 1),
        }
    }

    /// Number of input channels per group for a layer with `d_in` inputs.
    pub fn group_len(&self, d_in: usize) -> usize {
        match self.granularity {
            Granularity::Group(g) => g.min(d_in.max(1)),
            Granularity::PerChannel | Granularity::PerTensor => d_in.max(1),
        }
    }

    pub fn n_groups(&self, d_in: usize) -> usize {
        d_in.div_ceil(self.group_len(d_in))
    }

    fn round(&self, v: f64) -> f64 {
        match self.rounding {
            Rounding::HalfToEven => v.round_ties_even(),
        }
    }
}

/// Scale and zero point shared by one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl GroupParams {
    pub fn code(&self, w: f64, scheme: &QuantScheme) -> i32 {
        let (lo, hi) = scheme.code_range();
        let q = scheme.round(w / self.scale) + f64::from(self.zero_point);
        q.clamp(f64::from(lo), f64::from(hi)) as i32
    }

    pub fn dequant(&self, code: i32) -> f64 {
        self.scale * f64::from(code - self.zero_point)
    }

    /// Representable interval `[scale·(qmin - z), scale·(qmax - z)]`.
    pub fn clip_range(&self, scheme: &QuantScheme) -> (f64, f64) {
        let (lo, hi) = scheme.code_range();
        (self.dequant(lo), self.dequant(hi))
    }
}

/// Fits the scale and zero point of one group.
pub fn fit_group_params(w: &[f64], scheme: &QuantScheme) -> Result<GroupParams> {
    if w.is_empty() {
        return Err(Error::invalid("cannot quantize an empty group"));
    }
    let (lo, hi) = scheme.code_range();
    Ok(match scheme.mode {
        QuantMode::Symmetric => {
            let m = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if m == 0.0 {
                GroupParams { scale: 1.0, zero_point: 0 }
            } else {
                GroupParams { scale: m / f64::from(hi), zero_point: 0 }
            }
        }
        QuantMode::Asymmetric => {
            let mn = w.iter().copied().fold(f64::INFINITY, f64::min);
            let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == mn {
                // constant group: reproduce the constant exactly with code − z = ±1
                match mx {
                    0.0 => GroupParams { scale: 1.0, zero_point: 0 },
                    c if c > 0.0 => GroupParams { scale: c, zero_point: 0 },
                    c => GroupParams { scale: -c, zero_point: 1 },
                }
            } else {
                let scale = (mx - mn) / f64::from(hi);
                let z = scheme.round(-mn / scale).clamp(f64::from(lo), f64::from(hi)) as i32;
                GroupParams { scale, zero_point: z }
            }
        }
    })
}

/// Quantizes one group: returns codes and the fitted parameters.
pub fn quantize_group(w: &[f64], scheme: &QuantScheme) -> Result<(Vec<i32>, GroupParams)> {
    let p = fit_group_params(w, scheme)?;
    Ok((w.iter().map(|&v| p.code(v, scheme)).collect(), p))
}

pub fn dequantize_group(codes: &[i32], scale: f64, zero_point: i32) -> Vec<f64> {
    let p = GroupParams { scale, zero_point };
    codes.iter().map(|&c| p.dequant(c)).collect()
}

/// Per-(row, group) parameters for a whole layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrid {
    pub d_out: usize,
    pub d_in: usize,
    pub group_len: usize,
    pub n_groups: usize,
    params: Vec<GroupParams>,
}

impl ParamGrid {
    pub fn new(d_out: usize, d_in: usize, group_len: usize, params: Vec<GroupParams>) -> Result<Self> {
        let n_groups = d_in.div_ceil(group_len.max(1));
        if params.len() != d_out * n_groups {
            return Err(Error::dims("ParamGrid::new", d_out * n_groups, params.len()));
        }
        Ok(Self { d_out, d_in, group_len, n_groups, params })
    }

    /// Same parameters for every group.
    pub fn uniform(d_out: usize, d_in: usize, group_len: usize, p: GroupParams) -> Self {
        let n_groups = d_in.div_ceil(group_len.max(1));
        Self { d_out, d_in, group_len, n_groups, params: vec![p; d_out * n_groups] }
    }

    /// Fits parameters from `w`, one set per (row, group).
    pub fn fit(w: &Matrix, scheme: &QuantScheme) -> Result<Self> {
        scheme.validate()?;
        let (d_out, d_in) = w.shape();
        if d_in == 0 {
            return Err(Error::invalid("cannot quantize a layer with no input channels"));
        }
        let g = scheme.group_len(d_in);
        let n_groups = d_in.div_ceil(g);
        let params = if scheme.granularity == Granularity::PerTensor {
            let p = fit_group_params(w.data(), scheme)?;
            vec![p; d_out * n_groups]
        } else {
            let rows = par::map_indexed(d_out, |i| {
                w.row(i)
                    .chunks(g)
                    .map(|c| fit_group_params(c, scheme))
                    .collect::<Result<Vec<_>>>()
            });
            rows.into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect()
        };
        Ok(Self { d_out, d_in, group_len: g, n_groups, params })
    }

    pub fn get(&self, row: usize, col: usize) -> GroupParams {
        self.params[row * self.n_groups + col / self.group_len]
    }

    pub fn group(&self, row: usize, group: usize) -> GroupParams {
        self.params[row * self.n_groups + group]
    }

    pub fn row(&self, row: usize) -> &[GroupParams] {
        &self.params[row * self.n_groups..(row + 1) * self.n_groups]
    }
}

/// Codes, group parameters and the reconstructed weights of one layer.
///
/// When `channel_scale` is present the codes live in the scaled domain
/// `W·diag(s)`; `dequantized` has already been divided back by `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub scheme: QuantScheme,
    pub codes: Vec<i32>,
    pub params: ParamGrid,
    pub dequantized: Matrix,
    pub channel_scale: Option<Vec<f64>>,
}

impl QuantizedLayer {
    /// Assembles a layer from codes and parameters, reconstructing the weights.
    pub fn from_codes(
        scheme: QuantScheme,
        codes: Vec<i32>,
        params: ParamGrid,
        channel_scale: Option<Vec<f64>>,
    ) -> Result<Self> {
        let (d_out, d_in) = (params.d_out, params.d_in);
        if codes.len() != d_out * d_in {
            return Err(Error::dims("QuantizedLayer::from_codes", d_out * d_in, codes.len()));
        }
        let mut data = vec![0.0; d_out * d_in];
        for i in 0..d_out {
            for j in 0..d_in {
                data[i * d_in + j] = params.get(i, j).dequant(codes[i * d_in + j]);
            }
        }
        if let Some(s) = &channel_scale {
            if s.len() != d_in {
                return Err(Error::dims("QuantizedLayer::from_codes", d_in, s.len()));
            }
            for row in data.chunks_mut(d_in) {
                for (v, sj) in row.iter_mut().zip(s) {
                    *v /= sj;
                }
            }
        }
        let dequantized = Matrix::new(d_out, d_in, data)?;
        Ok(Self { scheme, codes, params, dequantized, channel_scale })
    }

    pub fn d_out(&self) -> usize {
        self.params.d_out
    }

    pub fn d_in(&self) -> usize {
        self.params.d_in
    }

    pub fn code(&self, row: usize, col: usize) -> i32 {
        self.codes[row * self.d_in() + col]
    }

    /// Scales as a `d_out × n_groups` row-major vector.
    pub fn scales(&self) -> Vec<f64> {
        self.params.params.iter().map(|p| p.scale).collect()
    }

    pub fn zero_points(&self) -> Vec<i32> {
        self.params.params.iter().map(|p| p.zero_point).collect()
    }
}

/// Quantizes every (row, group) slice of `w` independently.
pub fn quantize_matrix(w: &Matrix, scheme: &QuantScheme) -> Result<QuantizedLayer> {
    let params = ParamGrid::fit(w, scheme)?;
    let d_in = w.cols();
    let mut codes = vec![0i32; w.rows() * d_in];
    par::for_each_chunk_mut(&mut codes, d_in.max(1), |i, row| {
        for (j, c) in row.iter_mut().enumerate() {
            *c = params.get(i, j).code(w[(i, j)], scheme);
        }
    });
    QuantizedLayer::from_codes(*scheme, codes, params, None)
}

/// Round-to-nearest baseline; identical to [`quantize_matrix`].
pub fn rtn(w: &Matrix, scheme: &QuantScheme) -> Result<QuantizedLayer> {
    quantize_matrix(w, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym4() -> QuantScheme {
        QuantScheme::symmetric(4, Granularity::PerChannel)
    }

    #[test]
    fn code_ranges() {
        assert_eq!(sym4().code_range(), (-7, 7));
        assert_eq!(QuantScheme::asymmetric(4, Granularity::PerChannel).code_range(), (0, 15));
        assert_eq!(QuantScheme::symmetric(2, Granularity::PerChannel).code_range(), (-1, 1));
    }

    #[test]
    fn symmetric_unit_step() {
        let (codes, p) = quantize_group(&[-7.0, 0.0, 3.0, 7.0], &sym4()).unwrap();
        assert_eq!(p, GroupParams { scale: 1.0, zero_point: 0 });
        assert_eq!(codes, vec![-7, 0, 3, 7]);
        assert_eq!(dequantize_group(&codes, p.scale, p.zero_point), vec![-7.0, 0.0, 3.0, 7.0]);
    }

    #[test]
    fn symmetric_all_zero() {
        let (codes, p) = quantize_group(&[0.0; 3], &sym4()).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(codes, vec![0, 0, 0]);
    }

    #[test]
    fn asymmetric_endpoints() {
        let s = QuantScheme::asymmetric(4, Granularity::PerChannel);
        let (codes, p) = quantize_group(&[0.0, 1.5], &s).unwrap();
        assert_eq!(p.scale, 0.1);
        assert_eq!(p.zero_point, 0);
        assert_eq!(codes, vec![0, 15]);
        assert_eq!(dequantize_group(&codes, p.scale, p.zero_point), vec![0.0, 1.5]);
    }

    #[test]
    fn asymmetric_constant_group_is_exact() {
        let s = QuantScheme::asymmetric(3, Granularity::PerChannel);
        for c in [0.37, -2.5, 0.0] {
            let (codes, p) = quantize_group(&[c, c], &s).unwrap();
            assert_eq!(dequantize_group(&codes, p.scale, p.zero_point), vec![c, c]);
        }
    }

    #[test]
    fn empty_group_rejected() {
        assert!(matches!(quantize_group(&[], &sym4()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize_group(&[0, 0], 1.0, 0), vec![0.0, 0.0]);
        assert_eq!(dequantize_group(&[-7, 7], 1.0, 0), vec![-7.0, 7.0]);
        let v = dequantize_group(&[3, 12], 0.1, 3);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn half_to_even_ties() {
        let p = GroupParams { scale: 1.0, zero_point: 0 };
        let s = QuantScheme::symmetric(8, Granularity::PerChannel);
        assert_eq!(p.code(0.5, &s), 0);
        assert_eq!(p.code(1.5, &s), 2);
        assert_eq!(p.code(-2.5, &s), -2);
    }

    #[test]
    fn matrix_grouped_rows() {
        let w = Matrix::from_rows(&[&[-7.0, 0.0, 3.0, 7.0]]);
        let s = QuantScheme::symmetric(4, Granularity::Group(2));
        let q = quantize_matrix(&w, &s).unwrap();
        // group 1 = [-7, 0] → η = 1, group 2 = [3, 7] → η = 1
        assert_eq!(q.scales(), vec![1.0, 1.0]);
        let (c1, _) = quantize_group(&[-7.0, 0.0], &s).unwrap();
        let (c2, _) = quantize_group(&[3.0, 7.0], &s).unwrap();
        assert_eq!(q.codes, [c1, c2].concat());
        assert_eq!(q.dequantized, w);
        assert_eq!(rtn(&w, &s).unwrap(), q);
    }

    #[test]
    fn matrix_zero_and_fixed_point() {
        let s = QuantScheme::asymmetric(4, Granularity::Group(3));
        let z = Matrix::zeros(2, 5);
        assert_eq!(quantize_matrix(&z, &s).unwrap().dequantized, z);
        let w = Matrix::from_rows(&[&[0.25, -0.5, 1.0, 2.0, -1.0], &[3.0, 0.0, -3.0, 1.5, 1.5]]);
        let q = quantize_matrix(&w, &QuantScheme::symmetric(4, Granularity::PerChannel)).unwrap();
        let again = quantize_matrix(&q.dequantized, &QuantScheme::symmetric(4, Granularity::PerChannel)).unwrap();
        assert_eq!(again.dequantized, q.dequantized);
    }

    #[test]
    fn ragged_tail_and_per_tensor() {
        let w = Matrix::from_rows(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.1, 0.2, 0.3, 0.4, 0.5]]);
        let s = QuantScheme::symmetric(4, Granularity::Group(2));
        let q = quantize_matrix(&w, &s).unwrap();
        assert_eq!(q.params.n_groups, 3);
        assert_eq!(q.params.get(0, 4).scale, 5.0 / 7.0);
        let t = quantize_matrix(&w, &QuantScheme::symmetric(4, Granularity::PerTensor)).unwrap();
        assert!(t.scales().iter().all(|&s| s == 5.0 / 7.0));
    }

    #[test]
    fn invalid_schemes() {
        let w = Matrix::identity(2);
        assert!(quantize_matrix(&w, &QuantScheme::symmetric(1, Granularity::PerChannel)).is_err());
        assert!(quantize_matrix(&w, &QuantScheme::symmetric(4, Granularity::Group(0))).is_err());
    }

    #[test]
    fn scheme_serde_accepts_short_mode_names() {
        let s: QuantScheme =
            serde_json::from_str(r#"{"bits":4,"mode":"asym","granularity":{"group":64}}"#).unwrap();
        assert_eq!(s, QuantScheme::asymmetric(4, Granularity::Group(64)));
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..5, 1usize..12).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    fn any_scheme() -> impl Strategy<Value = QuantScheme> {
        (2u32..9, any::<bool>(), 1usize..6).prop_map(|(b, sym, g)| {
            if sym {
                QuantScheme::symmetric(b, Granularity::Group(g))
            } else {
                QuantScheme::asymmetric(b, Granularity::Group(g))
            }
        })
    }

    proptest! {
        #[test]
        fn error_bounded_inside_clip_range(w in small_matrix(), s in any_scheme()) {
            let q = quantize_matrix(&w, &s).unwrap();
            let (lo, hi) = s.code_range();
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    let p = q.params.get(i, j);
                    let c = q.code(i, j);
                    prop_assert!(c >= lo && c <= hi);
                    let (a, b) = p.clip_range(&s);
                    if w[(i, j)] >= a && w[(i, j)] <= b {
                        prop_assert!((q.dequantized[(i, j)] - w[(i, j)]).abs() <= p.scale / 2.0 * (1.0 + 1e-12));
                    }
                    prop_assert_eq!(q.dequantized[(i, j)], p.dequant(c));
                }
            }
        }

        #[test]
        fn codes_monotone_within_group(w in prop::collection::vec(-5.0f64..5.0, 2..16), s in any_scheme()) {
            let (codes, _) = quantize_group(&w, &s).unwrap();
            for a in 0..w.len() {
                for b in 0..w.len() {
                    if w[a] <= w[b] {
                        prop_assert!(codes[a] <= codes[b]);
                    }
                }
            }
        }

        #[test]
        fn symmetric_is_odd(w in small_matrix(), bits in 2u32..9, g in 1usize..6) {
            let s = QuantScheme::symmetric(bits, Granularity::Group(g));
            let neg = Matrix::new(w.rows(), w.cols(), w.data().iter().map(|v| -v).collect()).unwrap();
            let q = quantize_matrix(&w, &s).unwrap();
            let qn = quantize_matrix(&neg, &s).unwrap();
            prop_assert!(q.zero_points().iter().all(|&z| z == 0));
            for (a, b) in q.dequantized.data().iter().zip(qn.dequantized.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }
}
