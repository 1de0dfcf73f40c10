//! Property tests over the numerical kernels: code ranges, monotonicity,
//! error bounds, norm identities, and container round-trips on random
//! inputs.

use proptest::prelude::*;
use qlab::perturb::match_intensity;
use qlab::quant::{
    dequantize, fake_quant, quantize, quantize_with_info, Granularity, QuantScheme, ScalePolicy,
    Transform,
};
use qlab::tensor::{
    l2, read_tensor, scale, stats, sub, write_tensor, RngStream, Tensor,
};

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, len)
}

fn bits_strategy() -> impl Strategy<Value = u8> {
    2u8..=8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codes_stay_in_range(data in finite_vec(8..256), bits in bits_strategy(), policy in 0u8..3) {
        let t = Tensor::from_slice(&data).unwrap();
        let scale_policy = match policy {
            0 => ScalePolicy::AbsmaxSymmetric,
            1 => ScalePolicy::MinMaxAsymmetric,
            _ => ScalePolicy::Fixed { alpha: 1.0 },
        };
        let scheme = QuantScheme { bits, scale_policy, granularity: Granularity::PerTensor, transform: Transform::Identity };
        let q = quantize(&t, &scheme).unwrap();
        let max = scheme.code_max();
        prop_assert!(q.codes().iter().all(|&c| c <= max));
    }

    #[test]
    fn quantization_is_monotone(data in finite_vec(8..128), bits in bits_strategy(), cube in any::<bool>()) {
        let t = Tensor::from_slice(&data).unwrap();
        let transform = if cube { Transform::cube_root() } else { Transform::Identity };
        let scheme = QuantScheme::absmax(bits).with_transform(transform);
        let q = quantize(&t, &scheme).unwrap();
        let mut pairs: Vec<(f32, u8)> = data.iter().copied().zip(q.codes().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            prop_assert!(w[0].1 <= w[1].1, "{:?} -> {:?}", w[0], w[1]);
        }
    }

    #[test]
    fn fake_quant_error_is_bounded(data in finite_vec(8..256), bits in bits_strategy()) {
        let t = Tensor::from_slice(&data).unwrap();
        let scheme = QuantScheme::absmax(bits);
        let (q, _) = quantize_with_info(&t, &scheme).unwrap();
        let s = q.scales()[0] as f64;
        let z = q.zero_points()[0] as i64;
        let code_max = scheme.code_max() as i64;
        let fq = dequantize(&q).unwrap();
        let absmax = stats(&t).unwrap().absmax as f64;
        if absmax == 0.0 {
            return Ok(());
        }
        // Casting the dequantized value to f32 costs up to an ulp of the
        // grid point, which scales with absmax rather than the step.
        let slack = (1e-6 * s).max(absmax * 2f64.powi(-23));
        for (&x, &r) in data.iter().zip(fq.data()) {
            // Half a step for in-range codes; clipped codes (the top of the
            // range, reaching the exact +absmax endpoint) stay within one
            // full step.
            let pre_clip = (x as f64 / s).round_ties_even() as i64 + z;
            let bound = if (0..=code_max).contains(&pre_clip) {
                s / 2.0 + slack
            } else {
                s + slack
            };
            prop_assert!((x as f64 - r as f64).abs() <= bound, "x={x} r={r} s={s}");
        }
    }

    #[test]
    fn per_channel_step_refines_per_tensor(rows in 2usize..12, cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.next_gaussian() as f32).collect();
        let t = Tensor::new(data, vec![rows, cols]).unwrap();
        let per_tensor = quantize(&t, &QuantScheme::absmax(8)).unwrap();
        let per_channel = quantize(
            &t,
            &QuantScheme::absmax(8).with_granularity(Granularity::PerChannel { axis: 0 }),
        )
        .unwrap();
        let s_tensor = per_tensor.scales()[0];
        for &s_channel in per_channel.scales() {
            prop_assert!(s_channel <= s_tensor);
        }
    }

    #[test]
    fn transform_round_trips(mag in 1e-6f64..1e6, negative in any::<bool>(), exponent in 0.05f64..1.0) {
        let x = if negative { -mag } else { mag };
        let tf = Transform::SignedPower { exponent };
        let rt = tf.inverse(tf.forward(x));
        prop_assert!((rt - x).abs() <= 1e-5 * x.abs(), "x={x} rt={rt}");
    }

    #[test]
    fn l2_identities(data in finite_vec(1..128), c in -100.0f32..100.0) {
        let a = Tensor::from_slice(&data).unwrap();
        let zero = l2(&sub(&a, &a).unwrap());
        prop_assert_eq!(zero, 0.0);
        let scaled = l2(&scale(&a, c));
        let expected = c.abs() as f64 * l2(&a);
        prop_assert!((scaled - expected).abs() <= 1e-6 * expected.max(1e-30));
    }

    #[test]
    fn stats_are_permutation_invariant(data in finite_vec(2..256), seed in any::<u64>()) {
        let t = Tensor::from_slice(&data).unwrap();
        let mut shuffled = data.clone();
        let mut rng = RngStream::new(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.next_index(i + 1));
        }
        let t2 = Tensor::from_slice(&shuffled).unwrap();
        let a = stats(&t).unwrap();
        let b = stats(&t2).unwrap();
        prop_assert_eq!(a.min, b.min);
        prop_assert_eq!(a.max, b.max);
        prop_assert_eq!(a.absmax, b.absmax);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1e-30);
        prop_assert!(close(a.mean, b.mean));
        prop_assert!(close(a.std, b.std));
        prop_assert!(close(a.l2norm, b.l2norm));
    }

    #[test]
    fn qtns_round_trip_is_bit_exact(data in finite_vec(1..64), tag in any::<u32>()) {
        let t = Tensor::from_slice(&data).unwrap();
        let dir = std::env::temp_dir().join("qlab-prop-qtns");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("case-{tag}.qtns"));
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        let _ = std::fs::remove_file(&path);
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn match_intensity_hits_target(data in finite_vec(2..128), target in 0.0f64..100.0) {
        let t = Tensor::from_slice(&data).unwrap();
        if l2(&t) == 0.0 {
            return Ok(());
        }
        let scaled = match_intensity(&t, target).unwrap();
        let got = l2(&scaled);
        prop_assert!((got - target).abs() <= 1e-6 * target.max(1e-30), "{got} vs {target}");
    }

    #[test]
    fn fake_quant_of_zeros_is_zero(bits in bits_strategy(), len in 1usize..64) {
        let t = Tensor::new(vec![0.0; len], vec![len]).unwrap();
        for scheme in [
            QuantScheme::absmax(bits),
            QuantScheme::absmax(bits).with_policy(ScalePolicy::MinMaxAsymmetric),
            QuantScheme::absmax(bits).with_transform(Transform::cube_root()),
        ] {
            let fq = fake_quant(&t, &scheme).unwrap();
            prop_assert!(fq.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn rng_streams_with_equal_seeds_agree_for_a_million_draws() {
    let mut a = RngStream::new(0xDEAD_BEEF);
    let mut b = RngStream::new(0xDEAD_BEEF);
    for _ in 0..1_000_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
