mod common;

use common::{direct_scenario, random_pd, random_resp, replicated, scaled_frobenius_error};
use mixsep::cacg::{
    cacg_log_pdf, cacg_m_step, cacgmm_em, normalize_observations, SpatialComponent, StftMeta, StftTensor,
};
use mixsep::integrated::first_monotonicity_violation;
use mixsep::metrics::mask_auc;
use mixsep::synth::{build_meeting, sample_cacg};
use ndarray::Array3;
use num_complex::Complex64;
use proptest::prelude::*;

fn meta() -> StftMeta {
    StftMeta {
        sample_rate: 16000,
        fft_len: 512,
        window_len: 400,
        hop: 128,
    }
}

fn tensor_from_samples(samples: &[Vec<Complex64>]) -> StftTensor {
    let c = samples[0].len();
    let data = Array3::from_shape_fn((1, samples.len(), c), |(_, t, ch)| samples[t][ch]);
    StftTensor::new(data, meta()).unwrap()
}

#[test]
fn tyler_iteration_recovers_the_scatter_matrix() {
    let truth = random_pd(4, 5.0, 1);
    let x = tensor_from_samples(&sample_cacg(&truth, 5000, 2).unwrap());
    let y = normalize_observations(&x).tensor;
    let gamma = Array3::ones((1, 5000, 1));
    let step = |c: &[SpatialComponent]| cacg_m_step(&y, &gamma, c).unwrap().components;

    // Finite-sample fixed point; distance to B* itself bottoms out at the sampling noise floor.
    let mut fixed = vec![SpatialComponent::identity(1, 4)];
    for _ in 0..200 {
        fixed = step(&fixed);
    }
    let fixed = fixed[0].covariances[0].clone();

    let mut comps = vec![SpatialComponent::identity(1, 4)];
    let mut to_fixed = vec![scaled_frobenius_error(&comps[0].covariances[0], &fixed)];
    for _ in 0..10 {
        comps = step(&comps);
        let b = &comps[0].covariances[0];
        assert!((b.trace() - 4.0).abs() < 1e-6);
        to_fixed.push(scaled_frobenius_error(b, &fixed));
    }
    for w in to_fixed[..6].windows(2) {
        assert!(w[1] < w[0], "{to_fixed:?}");
    }
    let err = scaled_frobenius_error(&comps[0].covariances[0], &truth);
    assert!(err <= 0.05, "relative error {err}");
}

#[test]
fn two_source_masks_are_recovered() {
    let sc = direct_scenario(2, 4, 8, 129, &[vec![0, 1]], 7.0, 3);
    let m = build_meeting(&sc).unwrap();
    let nt = m.stft.n_frames();
    assert!(nt >= 1000, "{nt}");
    let fit = cacgmm_em(&m.stft, &replicated(&random_resp(3, nt, 4), 129), 60).unwrap();
    let auc = mask_auc(&fit.posterior.gamma, &m.truth.masks, &m.truth.voiced()).unwrap();
    assert!(auc >= 0.95, "AUC {auc}");
}

#[test]
fn em_is_monotone_over_twenty_seeds() {
    for seed in 0..20 {
        let sc = direct_scenario(2, 3, 4, 9, &[vec![0, 1]], 2.0, 50 + seed);
        let m = build_meeting(&sc).unwrap();
        let init = replicated(&random_resp(3, m.stft.n_frames(), seed), 9);
        let fit = cacgmm_em(&m.stft, &init, 100).unwrap();
        assert_eq!(first_monotonicity_violation(&fit.loglik_trace, None, 1e-6), None, "seed {seed}");
        for g in fit.posterior.gamma.sum_axis(ndarray::Axis(0)).iter() {
            assert!((g - 1.0).abs() < 1e-9);
        }
        for p in fit.posterior.pi.sum_axis(ndarray::Axis(0)).iter() {
            assert!((p - 1.0).abs() < 1e-9);
        }
    }
}

fn unit_vector(v: Vec<(f64, f64)>) -> Vec<Complex64> {
    let z: Vec<Complex64> = v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect();
    let n = z.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    z.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_ignores_global_phase(
        seed in 0u64..10_000,
        raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3),
        phase in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!(raw.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 1e-3);
        let b = random_pd(3, 2.0, seed);
        let y = unit_vector(raw);
        let rot: Vec<Complex64> = y.iter().map(|z| z * Complex64::from_polar(1.0, phase)).collect();
        let a = cacg_log_pdf(&b, &y).unwrap();
        let c = cacg_log_pdf(&b, &rot).unwrap();
        prop_assert!((a - c).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn common_scaling_keeps_the_winning_component(
        seed in 0u64..10_000,
        raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(raw.iter().map(|(a, b)| a * a + b * b).sum::<f64>() > 1e-3);
        let y = unit_vector(raw);
        let bs: Vec<_> = (0..3).map(|k| random_pd(4, 3.0, seed * 3 + k).with_trace(4.0)).collect();
        let argmax = |bs: &[mixsep::numerics::HermitianPD]| {
            (0..bs.len())
                .max_by(|&i, &j| cacg_log_pdf(&bs[i], &y).unwrap().total_cmp(&cacg_log_pdf(&bs[j], &y).unwrap()))
                .unwrap()
        };
        let scaled: Vec<_> = bs.iter().map(|b| b.scaled(scale)).collect();
        prop_assert_eq!(argmax(&bs), argmax(&scaled));
        for (b, s) in bs.iter().zip(&scaled) {
            let d = cacg_log_pdf(b, &y).unwrap() - cacg_log_pdf(s, &y).unwrap();
            prop_assert!(d.abs() < 1e-9 * (1.0 + d.abs()) + 1e-9);
        }
    }
}
