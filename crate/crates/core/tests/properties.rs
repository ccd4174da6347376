use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use sarqc_core::linalg::gram;
use sarqc_core::oracle::{
    exhaustive_quant_min, oracle_row_update, random_spd, reference_gptq, scalarization_instance, verify_supportedness,
    FiniteCandidate,
};
use sarqc_core::pipeline::{Tensor, TensorData};
use sarqc_core::quantizer::{quantize_matrix, ParamGrid};
use sarqc_core::rng::substream;
use sarqc_core::solver_gbs::{closed_form_update, curvature_from_gram, run_gbs};
use sarqc_core::{Granularity, Matrix, QuantScheme};

fn scheme_strategy() -> impl Strategy<Value = QuantScheme> {
    let gran = prop_oneof![
        Just(Granularity::PerTensor),
        Just(Granularity::PerChannel),
        (1usize..12).prop_map(Granularity::Group),
    ];
    (2u32..=8, gran, any::<bool>()).prop_map(|(bits, g, sym)| {
        if sym {
            QuantScheme::symmetric(bits, g)
        } else {
            QuantScheme::asymmetric(bits, g)
        }
    })
}

fn matrix_strategy(max_r: usize, max_c: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-100.0f64..100.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

fn gaussian(rng: &mut sarqc_core::rng::StreamRng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tensor_round_trip_is_bitwise(bits in prop::collection::vec(any::<u64>(), 0..64), ints in prop::collection::vec(any::<i32>(), 0..64)) {
        let f = Tensor::new(vec![bits.len() as u64], TensorData::F64(bits.iter().map(|b| f64::from_bits(*b)).collect())).unwrap();
        let back = Tensor::decode(&f.encode()).unwrap();
        prop_assert_eq!(back.encode(), f.encode());
        let i = Tensor::new(vec![1, ints.len() as u64], TensorData::I32(ints)).unwrap();
        prop_assert_eq!(Tensor::decode(&i.encode()).unwrap(), i);
    }

    #[test]
    fn rounding_error_within_half_step(w in matrix_strategy(6, 30), scheme in scheme_strategy()) {
        let q = quantize_matrix(&w, &scheme).unwrap();
        let (lo_code, hi_code) = scheme.code_range();
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let p = q.params.get(i, j);
                let c = q.code(i, j);
                prop_assert!(c >= lo_code && c <= hi_code);
                let (lo, hi) = p.clip_range(&scheme);
                if w[(i, j)] >= lo && w[(i, j)] <= hi {
                    prop_assert!((q.dequantized[(i, j)] - w[(i, j)]).abs() <= 0.5 * p.scale * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn requantizing_reconstruction_is_identity(w in matrix_strategy(5, 20), scheme in scheme_strategy()) {
        let q = quantize_matrix(&w, &scheme).unwrap();
        let grid = ParamGrid::fit(&w, &scheme).unwrap();
        let c = w.cols();
        for k in 0..q.codes.len() {
            prop_assert_eq!(grid.get(k / c, k % c).code(q.dequantized.data()[k], &scheme), q.codes[k]);
        }
    }

    #[test]
    fn closed_form_matches_reduced_system(seed in any::<u64>(), d in 1usize..=8) {
        let mut rng = substream(seed, "prop-closed-form", 0);
        let g = random_spd(&mut rng, d, 0.1);
        let j = rng.random_range(0..d);
        let w: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let e: f64 = rng.random_range(-2.0..2.0);
        let (delta, obj) = closed_form_update(&g, j, e).unwrap();
        let (oracle_delta, oracle_obj) = oracle_row_update(&w, &g, j, w[j] - e).unwrap();
        for k in 0..d {
            prop_assert!((delta[k] - oracle_delta[k]).abs() <= 1e-9, "k={} {} vs {}", k, delta[k], oracle_delta[k]);
        }
        prop_assert!((obj - oracle_obj).abs() <= 1e-9 * oracle_obj.abs().max(1.0));
    }

    #[test]
    fn sequential_rounding_never_beats_global_minimum(seed in any::<u64>(), d in 1usize..=4) {
        let mut rng = substream(seed, "prop-greedy", 0);
        let w = gaussian(&mut rng, 1, d);
        let g = random_spd(&mut rng, d, 0.05);
        let scheme = QuantScheme::asymmetric(2, Granularity::PerChannel);
        let params = ParamGrid::fit(&w, &scheme).unwrap();
        let curv = curvature_from_gram(g.clone()).unwrap();
        let q = run_gbs(&w, &curv, &scheme, 1).unwrap();
        let (lo, hi) = scheme.code_range();
        let grids: Vec<Vec<f64>> = (0..d).map(|j| (lo..=hi).map(|c| params.get(0, j).dequant(c)).collect()).collect();
        let (_, global) = exhaustive_quant_min(w.row(0), &g, &grids).unwrap();
        let delta: Vec<f64> = (0..d).map(|j| q.dequantized[(0, j)] - w[(0, j)]).collect();
        let mut greedy = 0.0;
        for a in 0..d {
            for b in 0..d {
                greedy += 0.5 * delta[a] * g[(a, b)] * delta[b];
            }
        }
        prop_assert!(greedy >= global - 1e-12 * global.abs().max(1.0));
    }

    #[test]
    fn zero_lambda_matches_reference_sweep(seed in any::<u64>(), d_in in 2usize..=24, block in prop::sample::select(vec![1usize, 3, 8, 128])) {
        let mut rng = substream(seed, "prop-gptq", 0);
        let w = gaussian(&mut rng, 3, d_in);
        let x = gaussian(&mut rng, d_in, 4 * d_in);
        let scheme = QuantScheme::asymmetric(3, Granularity::Group(5));
        let curv = curvature_from_gram(gram(&x)).unwrap();
        prop_assume!(curv.jitter_used == 0.0);
        let ours = run_gbs(&w, &curv, &scheme, block).unwrap();
        let reference = reference_gptq(&w, &x, &scheme, block).unwrap();
        prop_assert_eq!(&ours.codes, &reference.codes);
        prop_assert_eq!(&ours.scales(), &reference.scales());
    }

    #[test]
    fn supportedness_interval_matches_enumeration(points in prop::collection::vec((0u8..20, 0u8..20), 1..12), radius in 0u8..20) {
        let cands: Vec<FiniteCandidate> = points
            .iter()
            .enumerate()
            .map(|(i, &(r, d))| FiniteCandidate::new(format!("c{i}"), f64::from(r), f64::from(d)))
            .collect();
        let r_sq = f64::from(radius);
        let chosen = cands
            .iter()
            .filter(|c| c.dist <= r_sq)
            .min_by(|a, b| a.risk.total_cmp(&b.risk));
        prop_assume!(chosen.is_some());
        let probes: Vec<f64> = (0..=64).map(|k| f64::from(k) / 8.0).collect();
        let report = verify_supportedness(&cands, &chosen.unwrap().id, r_sq, &probes).unwrap();
        prop_assert!(report.pass, "{:?}", report.counterexample);
    }

    #[test]
    fn scalarization_selection_is_monotone(seed in any::<u64>(), idx in 0usize..64) {
        let cx = scalarization_instance(seed, idx).unwrap();
        prop_assert!(cx.is_none(), "{:?}", cx);
    }
}
