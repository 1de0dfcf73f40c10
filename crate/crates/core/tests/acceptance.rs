//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). All seeds, thresholds, and
//! tolerances are frozen here; reruns are deterministic.

use qlab::metrics::{spearman, MetricsError};
use qlab::perturb::{
    clip_fraction, gen_perturbation_seeded, native_intensity, IntensityTarget, PerturbKind,
    PerturbSpec, DEFAULT_EPS_REL,
};
use qlab::quant::{
    dequant_grid, fake_quant, quant_perturbation, quantize_with_info, scale_sweep, Granularity,
    QuantScheme, ScalePolicy, Transform,
};
use qlab::tensor::{l2, mix_seed, sample, stats, DistSpec, RngStream, Tensor};
use qlab::toymodel::{
    evaluate, grad_check, init, inject_outliers, train, InjectionPlan, ModelConfig, ModelParams,
    OptimizerConfig, Preset, TaskKind, TaskSpec,
};
use std::sync::OnceLock;
use std::time::Instant;

fn report(criterion: u32, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:2} {}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "acceptance criterion {criterion} failed: {detail}");
}

// ─── Random (tensor, scheme) pair population for criteria 1 and 2 ───────────

struct Pair {
    tensor: Tensor,
    scheme: QuantScheme,
    zero_shot: bool,
}

fn random_tensor(rng: &mut RngStream) -> Tensor {
    let ndim = 1 + rng.next_index(3);
    let shape: Vec<usize> = (0..ndim).map(|_| 4 + rng.next_index(13)).collect();
    let dist = match rng.next_index(4) {
        0 => DistSpec::Normal { mean: 0.0, std: 1.0 },
        1 => DistSpec::Uniform { lo: -2.0, hi: 2.0 },
        2 => DistSpec::Laplace { loc: 0.0, scale: 1.0 },
        _ => DistSpec::OutlierMixture { p_out: 0.02, scale_out: 50.0 },
    };
    sample(&dist, shape, rng).unwrap()
}

fn random_granularity(rng: &mut RngStream, shape: &[usize]) -> Granularity {
    match rng.next_index(3) {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel { axis: rng.next_index(shape.len()) },
        _ => {
            let axis = rng.next_index(shape.len());
            let extent = shape[axis];
            let divisors: Vec<usize> = (2..=extent).filter(|g| extent.is_multiple_of(*g)).collect();
            if divisors.is_empty() {
                Granularity::PerTensor
            } else {
                Granularity::PerGroup {
                    axis,
                    group_size: divisors[rng.next_index(divisors.len())],
                }
            }
        }
    }
}

/// 1,000 deterministic pairs covering every policy, granularity, transform,
/// and bit-width. Half use the zero-shot deployment setting (absmax
/// symmetric, identity transform).
fn pair_population() -> Vec<Pair> {
    let mut rng = RngStream::new(20240917);
    let mut pairs = Vec::with_capacity(1000);
    while pairs.len() < 1000 {
        let tensor = random_tensor(&mut rng);
        let granularity = random_granularity(&mut rng, tensor.shape());
        let bits = 2 + rng.next_index(7) as u8;
        let zero_shot = pairs.len() % 2 == 0;
        let scheme = if zero_shot {
            QuantScheme {
                bits,
                scale_policy: ScalePolicy::AbsmaxSymmetric,
                granularity,
                transform: Transform::Identity,
            }
        } else {
            let transform = match rng.next_index(3) {
                0 => Transform::Identity,
                1 => Transform::cube_root(),
                _ => Transform::SignedPower { exponent: 0.5 },
            };
            let scale_policy = match rng.next_index(3) {
                0 => ScalePolicy::AbsmaxSymmetric,
                1 => ScalePolicy::MinMaxAsymmetric,
                _ => {
                    let absmax_tf = tensor
                        .data()
                        .iter()
                        .map(|&x| transform.forward(x as f64).abs() as f32)
                        .fold(0.0f32, f32::max);
                    if absmax_tf == 0.0 {
                        continue;
                    }
                    let c = 0.75 + 0.75 * rng.next_f64() as f32;
                    ScalePolicy::Fixed { alpha: c * absmax_tf }
                }
            };
            QuantScheme { bits, scale_policy, granularity, transform }
        };
        pairs.push(Pair { tensor, scheme, zero_shot });
    }
    pairs
}

/// Independent re-derivation of the group index of a flat element.
fn group_of(shape: &[usize], granularity: &Granularity, flat: usize) -> usize {
    match *granularity {
        Granularity::PerTensor => 0,
        Granularity::PerChannel { axis } => {
            let inner: usize = shape[axis + 1..].iter().product();
            (flat / inner) % shape[axis]
        }
        Granularity::PerGroup { axis, group_size } => {
            let inner: usize = shape[axis + 1..].iter().product();
            ((flat / inner) % shape[axis]) / group_size
        }
    }
}

#[test]
fn criterion_01_quantizer_correctness() {
    let start = Instant::now();
    let pairs = pair_population();
    let mut checked_elements = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let (q, _info) = quantize_with_info(&pair.tensor, &pair.scheme).unwrap();
        let code_max = pair.scheme.code_max();
        let shape = pair.tensor.shape();

        // Codes in range.
        assert!(
            q.codes().iter().all(|&c| c <= code_max),
            "pair {i}: code out of range"
        );

        // Monotonicity within each group: the transform is strictly
        // increasing, so larger inputs never get smaller codes.
        let mut per_group: std::collections::BTreeMap<usize, Vec<(f32, u8)>> =
            std::collections::BTreeMap::new();
        for (flat, (&x, &code)) in pair.tensor.data().iter().zip(q.codes()).enumerate() {
            let g = group_of(shape, &pair.scheme.granularity, flat);
            per_group.entry(g).or_default().push((x, code));
        }
        for (g, entries) in &mut per_group {
            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in entries.windows(2) {
                assert!(
                    w[0].1 <= w[1].1,
                    "pair {i} group {g}: monotonicity violated ({:?} -> {:?})",
                    w[0],
                    w[1]
                );
            }
        }

        // A group without usable range (all zeros under absmax, constant
        // under min-max) encodes to the sentinel zero-point; its scale is a
        // placeholder, so the half-step bound does not apply there.
        let degenerate = |g: usize| -> bool {
            let entries = &per_group[&g];
            let min = entries.first().unwrap().0;
            let max = entries.last().unwrap().0;
            match pair.scheme.scale_policy {
                ScalePolicy::AbsmaxSymmetric => min == 0.0 && max == 0.0,
                ScalePolicy::MinMaxAsymmetric => min == max,
                ScalePolicy::Fixed { .. } => false,
            }
        };

        // Bounded error for non-clipped codes under the identity transform.
        if pair.scheme.transform == Transform::Identity {
            let fq = fake_quant(&pair.tensor, &pair.scheme).unwrap();
            for (flat, (&x, &rec)) in pair.tensor.data().iter().zip(fq.data()).enumerate() {
                let g = group_of(shape, &pair.scheme.granularity, flat);
                if degenerate(g) {
                    continue;
                }
                let s = q.scales()[g] as f64;
                let z = q.zero_points()[g] as i64;
                let pre_clip = (x as f64 / s).round_ties_even() as i64 + z;
                if pre_clip >= 0 && pre_clip <= code_max as i64 {
                    let err = (x as f64 - rec as f64).abs();
                    assert!(
                        err <= s / 2.0 + 1e-6 * s,
                        "pair {i} element {flat}: error {err} above step bound {s}"
                    );
                    checked_elements += 1;
                }
            }
        }

        // Per-channel refinement: each channel step is at most the
        // per-tensor step for the same absmax scheme.
        if shape.len() >= 2 && pair.scheme.scale_policy == ScalePolicy::AbsmaxSymmetric {
            let per_tensor = pair.scheme.with_granularity(Granularity::PerTensor);
            let per_channel = pair.scheme.with_granularity(Granularity::PerChannel { axis: 0 });
            let (qt, _) = quantize_with_info(&pair.tensor, &per_tensor).unwrap();
            let (qc, _) = quantize_with_info(&pair.tensor, &per_channel).unwrap();
            let s_tensor = qt.scales()[0];
            for &s_channel in qc.scales() {
                assert!(
                    s_channel <= s_tensor,
                    "pair {i}: channel step {s_channel} exceeds tensor step {s_tensor}"
                );
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        elapsed.as_secs_f64() < 30.0,
        &format!(
            "1000 random (tensor, scheme) pairs: codes in range, group-monotone, \
             {checked_elements} non-clipped errors within s/2, channel steps refine \
             tensor steps, in {:.1}s (< 30s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_eq4_identity() {
    let pairs = pair_population();
    let mut worst_ulps = 0u32;
    for (i, pair) in pairs.iter().enumerate() {
        let fq = fake_quant(&pair.tensor, &pair.scheme).unwrap();
        let delta = quant_perturbation(&pair.tensor, &pair.scheme).unwrap();
        for ((&x, &f), &d) in pair.tensor.data().iter().zip(fq.data()).zip(delta.data()) {
            let recon = f + d;
            if pair.zero_shot {
                assert_eq!(
                    recon.to_bits(),
                    x.to_bits(),
                    "pair {i}: zero-shot reconstruction not bit-exact ({recon} vs {x})"
                );
            } else {
                let ulps = recon.to_bits().abs_diff(x.to_bits());
                worst_ulps = worst_ulps.max(ulps);
            }
        }
    }
    // Expanding transforms and shifted zero-points make a bitwise identity
    // unrepresentable in f32; reconstruction stays within a few ulps there.
    report(
        2,
        worst_ulps <= 4,
        &format!(
            "t == fake_quant(t) + quant_perturbation(t): bit-exact on all zero-shot \
             pairs, within {worst_ulps} ulps (≤ 4) on expanding/asymmetric schemes"
        ),
    );
}

#[test]
fn criterion_03_scale_sweep_shape() {
    let mut rng = RngStream::new(301);
    let t = sample(&DistSpec::Normal { mean: 0.0, std: 1.0 }, vec![100_000], &mut rng).unwrap();
    let absmax = stats(&t).unwrap().absmax;
    let scheme = QuantScheme::absmax(8);
    let rows =
        scale_sweep(&t, &scheme, &[absmax, 2.0 * absmax, 4.0 * absmax]).unwrap();
    let rising = rows.windows(2).all(|w| w[1].l2_delta >= w[0].l2_delta);
    let clipped = scale_sweep(&t, &scheme, &[0.25 * absmax]).unwrap()[0].clip_fraction;
    report(
        3,
        rising && clipped > 0.2,
        &format!(
            "l2(delta) non-decreasing over {{1x,2x,4x}}·absmax \
             ({:.4} -> {:.4} -> {:.4}) and clip_fraction {clipped:.3} > 0.2 at 0.25x",
            rows[0].l2_delta, rows[1].l2_delta, rows[2].l2_delta
        ),
    );
}

#[test]
fn criterion_04_intensity_matching() {
    let inputs: Vec<(&str, Tensor)> = vec![
        (
            "gaussian 128x64",
            sample(
                &DistSpec::Normal { mean: 0.0, std: 1.0 },
                vec![128, 64],
                &mut RngStream::new(401),
            )
            .unwrap(),
        ),
        (
            "outlier 64x64",
            sample(
                &DistSpec::OutlierMixture { p_out: 0.01, scale_out: 30.0 },
                vec![64, 64],
                &mut RngStream::new(402),
            )
            .unwrap(),
        ),
        (
            "laplace 4096",
            sample(
                &DistSpec::Laplace { loc: 0.0, scale: 1.0 },
                vec![4096],
                &mut RngStream::new(403),
            )
            .unwrap(),
        ),
    ];
    let scheme = QuantScheme::absmax(8);
    let kinds = [
        PerturbKind::Gaussian,
        PerturbKind::Uniform,
        PerturbKind::Rademacher,
        PerturbKind::MagPos,
        PerturbKind::mag_neg(),
    ];
    let mut worst = 0.0f64;
    for (name, t) in &inputs {
        let native = native_intensity(t, &scheme).unwrap();
        for kind in kinds {
            let spec = PerturbSpec {
                kind,
                intensity: IntensityTarget::MatchQuantL2 { scheme },
                seed: 404,
            };
            let delta = gen_perturbation_seeded(t, &spec).unwrap();
            let rel = (l2(&delta) - native).abs() / native;
            assert!(rel < 1e-6, "{name}/{}: relative mismatch {rel}", kind.label());
            worst = worst.max(rel);
        }
    }
    report(
        4,
        worst < 1e-6,
        &format!(
            "all non-clip kinds match native quantization L2 per matrix \
             (worst relative error {worst:.2e} < 1e-6)"
        ),
    );
}

#[test]
fn criterion_05_magnitude_laws() {
    let t = sample(
        &DistSpec::Normal { mean: 0.0, std: 1.0 },
        vec![100_000],
        &mut RngStream::new(501),
    )
    .unwrap();
    let fixed = IntensityTarget::FixedL2 { target: 10.0 };

    let pos = gen_perturbation_seeded(&t, &PerturbSpec { kind: PerturbKind::MagPos, intensity: fixed, seed: 502 })
        .unwrap();
    let mut ratio_ref = None;
    for (&x, &d) in t.data().iter().zip(pos.data()) {
        if x != 0.0 {
            let r = d.abs() as f64 / x.abs() as f64;
            let reference = *ratio_ref.get_or_insert(r);
            assert!((r - reference).abs() <= 1e-6 * reference, "mag_pos ratio drift");
        }
    }

    let neg = gen_perturbation_seeded(&t, &PerturbSpec { kind: PerturbKind::mag_neg(), intensity: fixed, seed: 503 })
        .unwrap();
    let eps = DEFAULT_EPS_REL * stats(&t).unwrap().absmax;
    let mut product_ref = None;
    for (&x, &d) in t.data().iter().zip(neg.data()) {
        let p = d.abs() as f64 * (x.abs() + eps) as f64;
        let reference = *product_ref.get_or_insert(p);
        assert!((p - reference).abs() <= 1e-6 * reference, "mag_neg product drift");
    }

    let abs_of = |x: &Tensor| {
        Tensor::new(x.data().iter().map(|v| v.abs()).collect(), x.shape().to_vec()).unwrap()
    };
    let abs_t = abs_of(&t);
    let mut spearman_summaries = Vec::new();
    for (kind, seed) in [
        (PerturbKind::Gaussian, 504u64),
        (PerturbKind::Uniform, 505),
        (PerturbKind::Rademacher, 506),
    ] {
        let delta =
            gen_perturbation_seeded(&t, &PerturbSpec { kind, intensity: fixed, seed }).unwrap();
        let abs_d = abs_of(&delta);
        // Rademacher magnitudes are a single constant, so the rank
        // correlation degenerates; magnitude independence is exact there.
        let rho = match spearman(&abs_d, &abs_t) {
            Ok(r) => r,
            Err(MetricsError::ConstantInput { .. }) => 0.0,
            Err(e) => panic!("{e}"),
        };
        assert!(
            rho.abs() < 0.1,
            "{}: |δ|-|t| rank correlation {rho} outside (-0.1, 0.1)",
            kind.label()
        );
        spearman_summaries.push(format!("{} {:+.4}", kind.label(), rho));
    }
    report(
        5,
        true,
        &format!(
            "mag_pos exactly proportional, mag_neg exactly inverse (1e-6 relative); \
             rank correlations in (-0.1, 0.1): {}",
            spearman_summaries.join(", ")
        ),
    );
}

#[test]
fn criterion_06_clipping_tails() {
    let t = sample(
        &DistSpec::Normal { mean: 0.0, std: 1.0 },
        vec![1_000_000],
        &mut RngStream::new(601),
    )
    .unwrap();
    let f3 = clip_fraction(&t, 3.0);
    let f5 = clip_fraction(&t, 5.0);
    // On Gaussian draws the two-sided k=3 tail is 2Φ(−3) ≈ 0.27%; the
    // paper's "<0.1% of values" figure is measured on real LLM tensors,
    // whose tails are heavier-bounded by kurtosis, not on Gaussians.
    report(
        6,
        (0.0022..=0.0032).contains(&f3) && f5 < 1e-5,
        &format!("clip_fraction(k=3) = {f3:.5} in [0.0022, 0.0032]; clip_fraction(k=5) = {f5:.1e} < 1e-5"),
    );
}

#[test]
fn criterion_07_nonuniform_bin_structure() {
    for bits in [4u8, 8] {
        let grid = dequant_grid(bits, 0.25, 1 << (bits - 1), &Transform::cube_root());
        let mut sorted = grid;
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted.len(), 1 << bits);
        let gaps: Vec<f64> = sorted.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        let mids: Vec<f64> =
            sorted.windows(2).map(|w| (w[0] as f64 + w[1] as f64) / 2.0).collect();
        for i in 1..gaps.len() {
            if mids[i - 1] >= 0.0 && mids[i] >= 0.0 {
                assert!(gaps[i] > gaps[i - 1], "b={bits}: gaps must widen away from zero");
            }
            if mids[i - 1] <= 0.0 && mids[i] <= 0.0 {
                assert!(gaps[i] < gaps[i - 1], "b={bits}: gaps must narrow toward zero");
            }
        }
    }
    report(
        7,
        true,
        "signed-power(1/3) grids at b=4 and b=8 have strictly increasing gaps with \
         magnitude (exhaustive over all codes)",
    );
}

#[test]
fn criterion_08_nonuniform_small_value_advantage() {
    let start = Instant::now();
    let t = sample(
        &DistSpec::Normal { mean: 0.0, std: 1.0 },
        vec![100_000],
        &mut RngStream::new(88),
    )
    .unwrap();
    let absmax = stats(&t).unwrap().absmax;
    let uniform = quant_perturbation(&t, &QuantScheme::absmax(8)).unwrap();
    let nonuniform =
        quant_perturbation(&t, &QuantScheme::absmax(8).with_transform(Transform::cube_root()))
            .unwrap();
    let subset_mean = |delta: &Tensor, lo: f32, hi: f32| {
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for (&x, &d) in t.data().iter().zip(delta.data()) {
            if x.abs() >= lo && x.abs() <= hi {
                sum += d.abs() as f64;
                n += 1;
            }
        }
        sum / n as f64
    };
    let u_small = subset_mean(&uniform, 0.0, 0.1 * absmax);
    let n_small = subset_mean(&nonuniform, 0.0, 0.1 * absmax);
    let u_large = subset_mean(&uniform, 0.9 * absmax, f32::INFINITY);
    let n_large = subset_mean(&nonuniform, 0.9 * absmax, f32::INFINITY);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        8,
        n_small < u_small && n_large > u_large && elapsed < 5.0,
        &format!(
            "small |x| mean error {n_small:.2e} < {u_small:.2e} (uniform); \
             large |x| mean error {n_large:.2e} > {u_large:.2e}; {elapsed:.2}s < 5s"
        ),
    );
}

#[test]
fn criterion_09_gradient_check() {
    let params = init(&ModelConfig::default(), &mut RngStream::new(1)).unwrap();
    let task = TaskSpec { kind: TaskKind::Copy, seq_len: 32, seed: 0 };
    let r = grad_check(&params, &task, 150, 1e-3, 10).unwrap();
    report(
        9,
        r.max_rel_error < 1e-2 && r.checked >= 100,
        &format!(
            "max relative gradient error {:.2e} < 1e-2 over {} coordinates \
             (central differences against the f64 forward)",
            r.max_rel_error, r.checked
        ),
    );
}

#[test]
fn criterion_10_toy_training_copy() {
    let start = Instant::now();
    let steps = 300; // frozen after the first oracle run; well under 2000
    let config = ModelConfig { init_seed: 42, ..ModelConfig::default() };
    let task = TaskSpec { kind: TaskKind::Copy, seq_len: 32, seed: 1 };
    let mut params = init(&config, &mut RngStream::new(42)).unwrap();
    let record = train(
        &mut params,
        &task,
        steps,
        &OptimizerConfig::default(),
        &mut RngStream::new(1234),
    )
    .unwrap();
    let held_out = evaluate(&params, &task, &InjectionPlan::empty(), 8, 32, 777).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    // The loss curve falls monotonically when smoothed over 100-step windows.
    let window_mean = |range: std::ops::Range<usize>| {
        record.loss_curve[range.clone()].iter().sum::<f64>() / range.len() as f64
    };
    let smooth_ok =
        window_mean(0..100) >= window_mean(100..200) && window_mean(100..200) >= window_mean(200..300);
    report(
        10,
        held_out.accuracy >= 0.95 && minutes < 10.0 && steps <= 2000 && smooth_ok,
        &format!(
            "copy task: {steps} steps -> held-out accuracy {:.4} >= 0.95 \
             (final loss {:.4}, smoothed curve non-increasing) in {minutes:.1} min < 10 min",
            held_out.accuracy,
            record.loss_curve.last().unwrap()
        ),
    );
}

// ─── Shared trained fixture for the qualitative reproductions ───────────────

struct TrainedFixture {
    plain: ModelParams,
    outlier: ModelParams,
    task: TaskSpec,
}

static FIXTURE: OnceLock<TrainedFixture> = OnceLock::new();

/// The desk-scale stand-in for a large language model: an in-context
/// induction task (the plain checkpoint), plus a variant whose attention
/// value channels carry injected activation outliers (the LLM-like
/// checkpoint).
fn trained_fixture() -> &'static TrainedFixture {
    FIXTURE.get_or_init(|| {
        let task = TaskSpec { kind: TaskKind::Induction, seq_len: 32, seed: 1 };
        let config = ModelConfig { init_seed: 42, ..ModelConfig::default() };
        let mut plain = init(&config, &mut RngStream::new(42)).unwrap();
        train(
            &mut plain,
            &task,
            2000,
            &OptimizerConfig::default(),
            &mut RngStream::new(1234),
        )
        .unwrap();
        let mut outlier = plain.clone();
        inject_outliers(&mut outlier, 0.01, 20.0, 7);
        TrainedFixture { plain, outlier, task }
    })
}

const EVAL_BATCHES: usize = 8;
const EVAL_BATCH_SIZE: usize = 32;
const EVAL_SEED: u64 = 700;

#[test]
fn criterion_11_figure2_ordering() {
    let fx = trained_fixture();
    let params = &fx.outlier;
    let mut acc = |kind: PerturbKind, seed: u64| -> f64 {
        let plan = InjectionPlan::perturb_preset(params, Preset::W8A8, kind, seed);
        evaluate(params, &fx.task, &plan, EVAL_BATCHES, EVAL_BATCH_SIZE, EVAL_SEED)
            .unwrap()
            .accuracy
    };
    let seeds = [1000u64, 1001, 1002, 1003];
    let collect = |kind: PerturbKind, acc: &mut dyn FnMut(PerturbKind, u64) -> f64| {
        seeds.map(|s| acc(kind, s))
    };
    let m_pos = collect(PerturbKind::MagPos, &mut acc);
    let gauss = collect(PerturbKind::Gaussian, &mut acc);
    let unif = collect(PerturbKind::Uniform, &mut acc);
    let rade = collect(PerturbKind::Rademacher, &mut acc);
    let m_neg = collect(PerturbKind::mag_neg(), &mut acc);
    let mean = |a: &[f64; 4]| a.iter().sum::<f64>() / 4.0;

    let chain_ok = mean(&m_pos) >= mean(&gauss)
        && mean(&m_pos) >= mean(&unif)
        && mean(&m_pos) >= mean(&rade)
        && mean(&gauss) >= mean(&m_neg)
        && mean(&unif) >= mean(&m_neg)
        && mean(&rade) >= mean(&m_neg);
    let strict_worst = (0..4)
        .filter(|&s| {
            m_neg[s] < m_pos[s] && m_neg[s] < gauss[s] && m_neg[s] < unif[s] && m_neg[s] < rade[s]
        })
        .count();
    report(
        11,
        chain_ok && strict_worst >= 3,
        &format!(
            "W8A8-matched ordering on the outlier model: mag_pos {:.3} >= \
             gaussian {:.3} / uniform {:.3} / rademacher {:.3} >= mag_neg {:.3}; \
             mag_neg strict worst in {strict_worst}/4 seeds",
            mean(&m_pos),
            mean(&gauss),
            mean(&unif),
            mean(&rade),
            mean(&m_neg)
        ),
    );
}

#[test]
fn criterion_12_clipping_severity() {
    let fx = trained_fixture();
    let params = &fx.plain;
    let baseline = evaluate(
        params,
        &fx.task,
        &InjectionPlan::empty(),
        EVAL_BATCHES,
        EVAL_BATCH_SIZE,
        EVAL_SEED,
    )
    .unwrap();
    let clip_plan = InjectionPlan::clip_preset(params, 3.0);
    let clipped = evaluate(params, &fx.task, &clip_plan, EVAL_BATCHES, EVAL_BATCH_SIZE, EVAL_SEED)
        .unwrap();
    let clip_deg = clipped.ce_loss - baseline.ce_loss;
    let mut wins = 0;
    let mut gauss_degs = Vec::new();
    for seed in [1000u64, 1001, 1002, 1003] {
        let plan = InjectionPlan::perturb_preset(params, Preset::W8A8, PerturbKind::Gaussian, seed);
        let g = evaluate(params, &fx.task, &plan, EVAL_BATCHES, EVAL_BATCH_SIZE, EVAL_SEED)
            .unwrap();
        let deg = g.ce_loss - baseline.ce_loss;
        gauss_degs.push(deg);
        if clip_deg > deg {
            wins += 1;
        }
    }
    report(
        12,
        wins >= 3,
        &format!(
            "clip(k=3) cross-entropy degradation {clip_deg:+.4} exceeds the \
             intensity-matched gaussian ({:?}) in {wins}/4 seeds",
            gauss_degs.iter().map(|d| format!("{d:+.4}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_13_table1_direction() {
    let fx = trained_fixture();
    let params = &fx.outlier;
    let ppl = |plan: &InjectionPlan, eval_seed: u64| -> f64 {
        evaluate(params, &fx.task, plan, EVAL_BATCHES, EVAL_BATCH_SIZE, eval_seed)
            .unwrap()
            .perplexity
    };
    let w4a8_uni = InjectionPlan::quantize_preset(params, Preset::W4A8, Transform::Identity);
    let w4a8_non = InjectionPlan::quantize_preset(params, Preset::W4A8, Transform::cube_root());
    let w8a8_uni = InjectionPlan::quantize_preset(params, Preset::W8A8, Transform::Identity);
    let w8a8_non = InjectionPlan::quantize_preset(params, Preset::W8A8, Transform::cube_root());
    let mut good_seeds = 0;
    let mut lines = Vec::new();
    for s in 0..4u64 {
        let eval_seed = mix_seed(EVAL_SEED, s);
        let base = ppl(&InjectionPlan::empty(), eval_seed);
        let u48 = ppl(&w4a8_uni, eval_seed);
        let n48 = ppl(&w4a8_non, eval_seed);
        let u88 = ppl(&w8a8_uni, eval_seed);
        let n88 = ppl(&w8a8_non, eval_seed);
        let ok = n48 <= u48 && n88 <= 1.05 * base && u88 > n88;
        good_seeds += ok as u32;
        lines.push(format!(
            "seed {s}: base {base:.2}, w4a8 non {n48:.2} <= uni {u48:.2}, \
             w8a8 non {n88:.2} (within {:.1}%) < uni {u88:.2} [{}]",
            (n88 / base - 1.0) * 100.0,
            if ok { "ok" } else { "violated" }
        ));
    }
    for line in &lines {
        println!("  {line}");
    }
    report(
        13,
        good_seeds >= 3,
        &format!(
            "outlier-injected model: non-uniform beats uniform at W4A8 and stays \
             within 5% of full precision at W8A8 in {good_seeds}/4 eval seeds"
        ),
    );
}

#[test]
fn criterion_14_harness_determinism() {
    use qlab::harness::{
        run, AlphaSpec, EvalSpec, ExperimentConfig, ExperimentKind, FixtureSpec, InputSource,
        TrainFixture, SCHEMA_VERSION,
    };
    let base = std::env::temp_dir().join("qlab-acceptance-determinism");
    let _ = std::fs::remove_dir_all(&base);

    // Scale sweep: grid of alphas, three seeds, parallelism 1 vs 8.
    let sweep = |dir: &str, parallelism: usize| ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment_id: "determinism-sweep".into(),
        kind: ExperimentKind::ScaleSweep {
            input: InputSource::Draw {
                dist: DistSpec::Normal { mean: 0.0, std: 1.0 },
                shape: vec![20_000],
            },
            bits: 8,
            transform: Transform::Identity,
            alphas: vec![
                AlphaSpec::RelativeToAbsmax(0.25),
                AlphaSpec::RelativeToAbsmax(1.0),
                AlphaSpec::RelativeToAbsmax(4.0),
            ],
        },
        base_seed: 1401,
        n_seeds: 3,
        output_dir: base.join(dir),
        parallelism,
    };
    let s1 = run(&sweep("sweep-p1", 1)).unwrap();
    let s8 = run(&sweep("sweep-p8", 8)).unwrap();
    let sweep_identical =
        std::fs::read(&s1.csv_path).unwrap() == std::fs::read(&s8.csv_path).unwrap();

    // Perturb-compare on a tiny trained model, parallelism 1 vs 8.
    let tiny = ModelConfig {
        layers: 1,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        vocab: 16,
        context: 8,
        init_seed: 5,
    };
    let task = TaskSpec { kind: TaskKind::Copy, seq_len: 8, seed: 2 };
    let compare = |dir: &str, parallelism: usize| ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment_id: "determinism-compare".into(),
        kind: ExperimentKind::PerturbCompare {
            fixture: FixtureSpec {
                checkpoint: None,
                train: Some(TrainFixture {
                    model: tiny,
                    task,
                    steps: 20,
                    optimizer: OptimizerConfig { batch_size: 8, ..OptimizerConfig::default() },
                    train_seed: 3,
                }),
                outliers: None,
            },
            task,
            preset: Preset::W8A8,
            kinds: vec![PerturbKind::Gaussian, PerturbKind::mag_neg(), PerturbKind::clip(3.0)],
            eval: EvalSpec { n_batches: 2, batch_size: 8, eval_seed: 9 },
        },
        base_seed: 1402,
        n_seeds: 2,
        output_dir: base.join(dir),
        parallelism,
    };
    let c1 = run(&compare("compare-p1", 1)).unwrap();
    let c8 = run(&compare("compare-p8", 8)).unwrap();
    let compare_identical =
        std::fs::read(&c1.csv_path).unwrap() == std::fs::read(&c8.csv_path).unwrap();

    report(
        14,
        sweep_identical && compare_identical,
        "identical config + base_seed give byte-identical CSV bodies at \
         parallelism 1 and 8 (scale sweep and model perturb-compare)",
    );
}
