use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use qwha_core::analysis::{numerical_rank, singular_values, DEFAULT_RANK_TOL};
use qwha_core::calibration::{raw_objective, reduced_objective, GramAccumulator};
use qwha_core::quantizer::{dequantize, quant_error, quantize};
use qwha_core::sparse_adapter::scatter;
use qwha_core::synth::{SynthConfig, SynthKind};
use qwha_core::tensor_io::{read_matrix, write_matrix, write_matrix_as, Dtype};
use qwha_core::transforms::kronecker;
use qwha_core::{build_plan, fast_wht_inplace, Matrix, QuantConfig, Side, TransformKind};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn sizes_for(kind: TransformKind) -> &'static [usize] {
    match kind {
        TransformKind::Wht => &[1, 2, 4, 8, 12, 20, 24, 28, 40, 56, 64],
        _ => &[1, 2, 3, 5, 8, 12, 17, 32],
    }
}

#[test]
fn kernels_are_orthonormal() {
    for kind in TransformKind::ALL {
        for &n in sizes_for(kind) {
            let h = build_plan(kind, n).unwrap().kernel_matrix();
            let hth = h.transpose().matmul(&h).unwrap();
            assert!(hth.max_abs_diff(&Matrix::identity(n)) <= 1e-10, "{kind} {n}");
        }
    }
}

#[test]
fn energy_is_conserved_by_every_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in TransformKind::ALL {
        let m = gaussian(7, 12, &mut rng);
        let plan = build_plan(kind, 12).unwrap();
        for side in [Side::RightByH, Side::RightByHInverse] {
            let t = plan.apply(&m, side).unwrap();
            assert!(rel(t.frobenius(), m.frobenius()) < 1e-9, "{kind}");
        }
    }
}

#[test]
fn fast_wht_matches_dense_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [2, 4, 8, 12, 24, 1024, 3072, 4096] {
        let h = build_plan(TransformKind::Wht, n).unwrap().kernel_matrix();
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let dense = h.vecmul(&v).unwrap();
        let mut fast = v.clone();
        fast_wht_inplace(&mut fast).unwrap();
        let err: f64 = fast.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = dense.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * norm, "n = {n}");
    }
}

#[test]
fn power_of_two_wht_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 16, 256, 2048] {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut w = v.clone();
        fast_wht_inplace(&mut w).unwrap();
        fast_wht_inplace(&mut w).unwrap();
        for (a, b) in w.iter().zip(&v) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn kronecker_kernel_for_mixed_sizes() {
    let h12 = build_plan(TransformKind::Wht, 12).unwrap().kernel_matrix();
    let h2 = build_plan(TransformKind::Wht, 2).unwrap().kernel_matrix();
    let h24 = build_plan(TransformKind::Wht, 24).unwrap().kernel_matrix();
    assert!(h24.max_abs_diff(&kronecker(&h2, &h12)) < 1e-14);
}

#[test]
fn reduced_objective_equals_raw_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = build_plan(TransformKind::Wht, 32).unwrap();
    for _ in 0..10 {
        let dw = gaussian(32, 32, &mut rng);
        let x = gaussian(32, 256, &mut rng);
        let picks = sample(&mut rng, 32 * 32, 100).into_vec();
        let idx: Vec<_> = picks.iter().map(|&k| (k / 32, k % 32)).collect();
        let vals: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let f = scatter(vals, idx, (32, 32), TransformKind::Wht).unwrap();
        let mut acc = GramAccumulator::new(32);
        acc.accumulate(&x).unwrap();
        let calib = acc.factorize().unwrap();
        let reduced = reduced_objective(&dw, &f, &calib).unwrap();
        let raw = raw_objective(&dw, &f.materialize_delta(&plan, None).unwrap(), &x).unwrap();
        assert!(rel(reduced, raw) < 1e-6);
    }
}

#[test]
fn adapter_rank_equals_coefficient_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in TransformKind::ALL {
        let plan = build_plan(kind, 16).unwrap();
        // Rows confined to three coefficient rows give rank 3.
        let mut vals = Vec::new();
        let mut idx = Vec::new();
        for i in [1, 4, 9] {
            for j in 0..16 {
                vals.push(rng.sample(StandardNormal));
                idx.push((i, j));
            }
        }
        let a = scatter(vals, idx, (12, 16), kind).unwrap();
        let rf = numerical_rank(&a.coefficient_matrix(), DEFAULT_RANK_TOL);
        let rd = numerical_rank(&a.materialize_delta(&plan, None).unwrap(), DEFAULT_RANK_TOL);
        assert_eq!(rf, rd);
        assert_eq!(rf.rank, 3);
    }
}

#[test]
fn singular_value_energy_matches_frobenius() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = gaussian(9, 14, &mut rng);
    let s2: f64 = singular_values(&m).iter().map(|s| s * s).sum();
    assert!(rel(s2, m.frobenius_sq()) < 1e-9);
}

#[test]
fn spike_channels_carry_heavier_quantization_error() {
    for seed in 0..10 {
        let layer = SynthConfig {
            kind: SynthKind::HeavyTailedSpikes,
            d_out: 128,
            d_in: 128,
            samples: 8,
            seed,
            ..SynthConfig::default()
        }
        .generate()
        .unwrap();
        let q = quantize(&layer.weights, QuantConfig::new(2, 64).unwrap()).unwrap();
        let dw = quant_error(&layer.weights, &q).unwrap();
        let mut norms: Vec<f64> = dw.rows_iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let spiky: Vec<f64> = layer.spike_channels.iter().map(|&i| norms[i]).collect();
        norms.sort_by(f64::total_cmp);
        let median = norms[norms.len() / 2];
        assert!(spiky.iter().all(|&n| n > median), "seed {seed}");
    }
}

#[test]
fn quantize_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = gaussian(16, 48, &mut rng);
    let q = quantize(&w, QuantConfig::new(3, 16).unwrap()).unwrap();
    let path = dir.path().join("dq.sadp");
    write_matrix(&dequantize(&q), &path).unwrap();
    assert_eq!(read_matrix(&path).unwrap(), dequantize(&q));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matrix_files_round_trip_bit_exactly(seed in 0u64..10_000, rows in 1usize..20, cols in 1usize..20) {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(rows, cols, &mut rng).scale(1e3);
        let path = dir.path().join("m.sadp");
        write_matrix(&m, &path).unwrap();
        let back = read_matrix(&path).unwrap();
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let narrow = Matrix::from_fn(rows, cols, |i, j| m[(i, j)] as f32 as f64);
        write_matrix_as(&narrow, &path, Dtype::F32).unwrap();
        prop_assert!(read_matrix(&path).unwrap() == narrow);
    }

    #[test]
    fn transforms_invert(seed in 0u64..10_000, kind_ix in 0usize..3, n_ix in 0usize..5) {
        let kind = TransformKind::ALL[kind_ix];
        let n = [2, 4, 12, 20, 32][n_ix];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian(3, n, &mut rng);
        let plan = build_plan(kind, n).unwrap();
        let back = plan.apply(&plan.apply(&m, Side::RightByH).unwrap(), Side::RightByHInverse).unwrap();
        prop_assert!(back.max_abs_diff(&m) < 1e-10);
        let mt = m.transpose();
        let back = plan.apply(&plan.apply(&mt, Side::LeftByH).unwrap(), Side::LeftByHInverse).unwrap();
        prop_assert!(back.max_abs_diff(&mt) < 1e-10);
    }

    #[test]
    fn gram_stays_symmetric_psd(seed in 0u64..10_000, batches in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = GramAccumulator::new(6);
        for _ in 0..batches {
            acc.accumulate(&gaussian(6, 3, &mut rng)).unwrap();
            let g = acc.gram();
            prop_assert!(g.max_abs_diff(&g.transpose()) <= 1e-10);
            let eig = nalgebra::SymmetricEigen::new(g.to_nalgebra());
            let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(lmin >= -1e-8 * g.trace() / 6.0);
        }
        let calib = acc.factorize().unwrap();
        let min_sv = singular_values(calib.r()).last().copied().unwrap();
        prop_assert!(min_sv > 0.0);
    }
}
