use mixsep::frontend::{
    energy_vad, ingest_embeddings, istft, stft, write_embeddings, AlignmentAction, AudioBuffer, StftConfig, VadConfig,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SR: u32 = 8000;

/// Noise floor at -40 dB with louder bursts of random length.
fn bursty(channels: usize, n: usize, seed: u64) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = 0.01;
    let samples = Array2::from_shape_fn((channels, n), |(_, i)| {
        if i % 800 == 0 {
            level = if rng.random::<f64>() < 0.4 { 0.5 } else { 0.01 };
        }
        level * rng.sample::<f64, _>(StandardNormal)
    });
    AudioBuffer::new(samples, SR).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_counts_agree_across_stft_vad_and_embeddings(n in 0usize..40_000, extra in -2i64..=2, seed in 0u64..1000) {
        let a = bursty(2, n, seed);
        let cfg = StftConfig::default();
        let x = stft(&a, &cfg).unwrap();
        let vad = energy_vad(&a, &cfg, &VadConfig::default()).unwrap();
        prop_assert_eq!(x.n_frames(), vad.len());
        let nt = x.n_frames();
        prop_assume!(nt >= 3);
        let rows = (nt as i64 + extra) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array2::from_shape_fn((rows, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        write_embeddings(&path, emb.view(), None).unwrap();
        let (e, action) = ingest_embeddings(&path, nt, Some(6), x.meta().frame_rate()).unwrap();
        prop_assert_eq!(e.len(), nt);
        let expected = match extra {
            0 => AlignmentAction::Identity,
            d if d > 0 => AlignmentAction::Truncated { dropped: d as usize },
            d => AlignmentAction::Padded { added: (-d) as usize },
        };
        prop_assert_eq!(action, expected);
    }

    #[test]
    fn stft_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let a = bursty(2, 4000, seed);
        let b = bursty(2, 4000, seed + 1);
        let mix = AudioBuffer::new(&a.samples() + &(&b.samples() * alpha), SR).unwrap();
        let cfg = StftConfig::default();
        let (sa, sb, sm) = (stft(&a, &cfg).unwrap(), stft(&b, &cfg).unwrap(), stft(&mix, &cfg).unwrap());
        for ((x, y), z) in sa.data().iter().zip(sb.data().iter()).zip(sm.data().iter()) {
            prop_assert!((x + y * alpha - z).norm() < 1e-9);
        }
    }

    #[test]
    fn vad_ignores_global_gain(seed in 0u64..1000, log_gain in -4.0f64..4.0) {
        let a = bursty(1, 40_000, seed);
        let cfg = StftConfig::default();
        let base = energy_vad(&a, &cfg, &VadConfig::default()).unwrap();
        let scaled = energy_vad(&a.scaled(10f64.powf(log_gain)), &cfg, &VadConfig::default()).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn istft_inverts_stft_on_the_interior(seed in 0u64..1000, n in 2000usize..6000) {
        let a = bursty(1, n, seed);
        let cfg = StftConfig::default();
        let x = stft(&a, &cfg).unwrap();
        let meta = x.meta();
        let spec = x.data().index_axis(ndarray::Axis(2), 0).to_owned();
        let y = istft(spec.view(), &meta, Some(n)).unwrap();
        let covered = (x.n_frames() - 1) * meta.hop + meta.window_len;
        let orig = a.samples();
        let (mut err, mut energy) = (0.0, 0.0);
        for i in meta.hop..covered - meta.hop {
            err += (y[i] - orig[(0, i)]).powi(2);
            energy += orig[(0, i)].powi(2);
        }
        prop_assert!((err / energy).sqrt() < 1e-6);
    }
}
