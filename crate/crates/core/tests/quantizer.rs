use proptest::prelude::*;
use qfd_core::models::BitPair;
use qfd_core::quantizer::*;
use qfd_core::tensor::Tensor;

fn mode() -> impl Strategy<Value = QuantMode> {
    prop_oneof![
        Just(QuantMode::Weight),
        Just(QuantMode::Activation),
        Just(QuantMode::Feature)
    ]
}

fn params() -> impl Strategy<Value = QuantParams> {
    (1u8..=8, mode(), -3.0f64..3.0, 1e-3f64..4.0, 1e-3f64..5.0)
        .prop_map(|(b, m, l, w, a)| QuantParams::new(b, m).with_bounds(l, l + w).with_alpha(a))
}

/// Value of the surrogate with `round` replaced by the identity.
fn surrogate(q: &QuantParams, v: f64) -> f64 {
    q.dequantize_level(q.normalize(v))
}

proptest! {
    #[test]
    fn outputs_lie_on_the_grid(q in params(), vs in prop::collection::vec(-10.0f64..10.0, 64)) {
        let out = fake_quant_forward(&Tensor::new(&[64], vs).unwrap(), &q).unwrap();
        let grid = QuantGrid::new(&q);
        prop_assert_eq!(grid.levels.len(), 1usize << q.bits);
        for &y in out.data() {
            prop_assert!(grid.distance(y) <= 1e-12);
        }
    }

    #[test]
    fn output_range_is_bounded(q in params(), v in -10.0f64..10.0) {
        let y = q.forward_scalar(v);
        match q.mode {
            QuantMode::Weight => prop_assert!((-1.0..=1.0).contains(&y)),
            _ => prop_assert!(y >= 0.0 && y <= q.alpha + 1e-12),
        }
    }

    #[test]
    fn forward_is_monotone(q in params(), a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(q.forward_scalar(lo) <= q.forward_scalar(hi));
    }

    #[test]
    fn levels_are_fixed_points_on_the_canonical_interval(b in 1u8..=8, k in 0u32..256, alpha in 0.1f64..4.0) {
        let n = (1u32 << b) - 1;
        let k = k % (n + 1);
        let w = QuantParams::new(b, QuantMode::Weight);
        let level = w.dequantize_level(f64::from(k) / f64::from(n));
        prop_assert!((w.forward_scalar(level) - level).abs() < 1e-12);
        let a = QuantParams::new(b, QuantMode::Activation).with_bounds(0.0, alpha).with_alpha(alpha);
        let level = a.dequantize_level(f64::from(k) / f64::from(n));
        prop_assert!((a.forward_scalar(level) - level).abs() < 1e-12);
    }

    #[test]
    fn saturated_inputs_get_no_interval_gradient(q in params(), g in -3.0f64..3.0, off in 0.0f64..5.0) {
        for v in [q.lower - off, q.upper + off] {
            let s = q.backward_scalar(g, v);
            prop_assert_eq!((s.v, s.lower, s.upper), (0.0, 0.0, 0.0));
            let expect = if q.mode.has_alpha() { g * round_level(q.normalize(v), q.bits) } else { 0.0 };
            prop_assert_eq!(s.alpha, expect);
        }
    }

    #[test]
    fn in_range_gradients_match_the_surrogate(q in params(), t in 0.02f64..0.98, g in -3.0f64..3.0) {
        let v = q.lower + t * (q.upper - q.lower);
        let h = 1e-6 * (q.upper - q.lower);
        let s = q.backward_scalar(g, v);
        let fd_v = g * (surrogate(&q, v + h) - surrogate(&q, v - h)) / (2.0 * h);
        prop_assert!((s.v - fd_v).abs() <= 1e-5 * (1.0 + fd_v.abs()));
        let shifted = |dl: f64, du: f64| q.with_bounds(q.lower + dl, q.upper + du);
        let fd_l = g * (surrogate(&shifted(h, 0.0), v) - surrogate(&shifted(-h, 0.0), v)) / (2.0 * h);
        let fd_u = g * (surrogate(&shifted(0.0, h), v) - surrogate(&shifted(0.0, -h), v)) / (2.0 * h);
        prop_assert!((s.lower - fd_l).abs() <= 1e-5 * (1.0 + fd_l.abs()));
        prop_assert!((s.upper - fd_u).abs() <= 1e-5 * (1.0 + fd_u.abs()));
    }

    #[test]
    fn projection_always_yields_valid_params(
        b in 1u8..=8,
        m in mode(),
        l in -1e3f64..1e3,
        gap in -1.0f64..1e-4,
        a in -5.0f64..1e-6,
    ) {
        let mut q = QuantParams::new(b, m).with_bounds(l, l + gap).with_alpha(a);
        q.project();
        prop_assert!(q.upper - q.lower >= MIN_INTERVAL);
        if m.has_alpha() {
            prop_assert!(q.alpha >= MIN_ALPHA);
        }
        prop_assert!(q.validate().is_ok());
    }

    #[test]
    fn bit_pairs_round_trip(w in 1u8..=8, a in 1u8..=8, w_fp: bool, a_fp: bool) {
        let text = format!("{}/{}", if w_fp { 32 } else { w }, if a_fp { 32 } else { a });
        let pair: BitPair = text.parse().unwrap();
        prop_assert_eq!(pair.to_string(), text);
        prop_assert_eq!(pair.weight.is_fp(), w_fp);
    }
}
