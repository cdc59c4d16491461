use macformer_core::attention::{
    convert_mask, max_abs_diff, rmfa, rmfa_reference, AttentionInputs, MaskKind,
};
use macformer_core::kernels::{KernelId, KernelSpec};
use macformer_core::ppsbn::{post_sbn, pre_sbn, PpsbnParams};
use macformer_core::rmf::FeatureMapDraw;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn kernel() -> impl Strategy<Value = KernelId> {
    prop::sample::select(KernelId::ALL.to_vec())
}

fn qkv() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>)> {
    (1usize..20, 1usize..6).prop_flat_map(|(n, d)| {
        (
            matrix(n, d, -0.4, 0.4),
            matrix(n, d, -0.4, 0.4),
            matrix(n, d, -3.0, 3.0),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_and_quadratic_forms_agree(
        (q, k, v) in qkv(),
        id in kernel(),
        feature_dim in 1usize..48,
        seed in any::<u64>(),
        causal in any::<bool>(),
    ) {
        let draw = FeatureMapDraw::sample(KernelSpec::new(id), q.ncols(), feature_dim, 2.0, seed).unwrap();
        let mask = if causal { MaskKind::Causal } else { MaskKind::None };
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view()).unwrap().with_mask(mask).unwrap();
        let fast = rmfa(&draw, &inputs).unwrap();
        let slow = rmfa_reference(&draw, &inputs, &inputs.binary_mask()).unwrap();
        let scale = 1.0 + slow.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(max_abs_diff(fast.view(), slow.view()) <= 1e-10 * scale);
    }

    #[test]
    fn unmasked_output_ignores_key_order(
        (q, k, v) in qkv(),
        seed in any::<u64>(),
        shift in 0usize..20,
    ) {
        let n = k.nrows();
        let order: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let k2 = Array2::from_shape_fn(k.dim(), |(i, j)| k[[order[i], j]]);
        let v2 = Array2::from_shape_fn(v.dim(), |(i, j)| v[[order[i], j]]);
        let draw = FeatureMapDraw::sample(KernelSpec::new(KernelId::Exp), q.ncols(), 32, 2.0, seed).unwrap();
        let a = rmfa(&draw, &AttentionInputs::new(q.view(), k.view(), v.view()).unwrap()).unwrap();
        let b = rmfa(&draw, &AttentionInputs::new(q.view(), k2.view(), v2.view()).unwrap()).unwrap();
        let scale = 1.0 + a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(max_abs_diff(a.view(), b.view()) <= 1e-10 * scale);
    }

    #[test]
    fn pre_sbn_lands_in_unit_ball(
        (q, k) in (2usize..30, 1usize..10).prop_flat_map(|(n, d)| (matrix(n, d, -50.0, 50.0), matrix(n, d, -1e-3, 1e-3))),
    ) {
        let pre = pre_sbn(q.view(), k.view(), 1e-12).unwrap();
        for m in [&pre.q, &pre.k] {
            let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((frob - 1.0).abs() <= 1e-12);
            for row in m.rows() {
                prop_assert!(row.dot(&row).sqrt() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn mask_conversion_round_trips_through_additive_form(m in matrix(4, 5, -2.0, 2.0)) {
        let once = convert_mask(m.view());
        let additive = once.values().mapv(|x| if x == 1.0 { 0.0 } else { f64::NEG_INFINITY });
        let twice = convert_mask(additive.view());
        prop_assert!(once.values().iter().all(|&x| x == 0.0 || x == 1.0));
        prop_assert_eq!(once.values(), twice.values());
        for ((i, j), &x) in m.indexed_iter() {
            prop_assert_eq!(once.is_visible(i, j), x >= 0.0);
        }
    }

    #[test]
    fn post_sbn_preserves_sign_pattern(
        att in matrix(3, 4, -5.0, 5.0),
        gamma in 0.1f64..3.0,
        beta in 0.2f64..2.5,
    ) {
        let params = PpsbnParams { gamma, beta, ..PpsbnParams::default() };
        let out = post_sbn(att.view(), &params).unwrap();
        for (&a, &o) in att.iter().zip(out.iter()) {
            prop_assert_eq!(a.signum(), o.signum());
            prop_assert!((o.abs() - (gamma * a).abs().powf(beta)).abs() <= 1e-12 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn series_tracks_closed_form(id in kernel(), frac in -0.85f64..0.85) {
        let spec = KernelSpec::new(id);
        let t = frac * spec.domain_radius().min(5.0);
        let exact = spec.value(t).unwrap();
        prop_assert!((spec.series_value(t, 400).unwrap() - exact).abs() <= 1e-6 * (1.0 + exact.abs()));
    }
}
