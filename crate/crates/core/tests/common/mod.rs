#![allow(dead_code)]

use mixsep::metrics::{der, si_sdr, DerBreakdown};
use mixsep::numerics::linear_sum_assignment;
use mixsep::pipeline::{run_meeting, MeetingOutput, PipelineConfig};
use mixsep::synth::{build_meeting, AudioScenario, Meeting, ScenarioConfig, SegmentPlan};
use ndarray::Array2;

/// Three speakers, four segments in which everybody talks, 20% overlap.
pub fn three_speaker_scenario(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(3, 4, 32);
    cfg.overlap = 0.2;
    cfg.segments = (0..4)
        .map(|_| SegmentPlan {
            active: vec![0, 1, 2],
            duration_s: 9.0,
        })
        .collect();
    cfg.audio = Some(AudioScenario::default());
    cfg.seed = seed;
    cfg
}

pub struct EndToEnd {
    pub meeting: Meeting,
    pub output: MeetingOutput,
    pub der: DerBreakdown,
    /// SI-SDR improvement per true speaker under the best assignment.
    pub si_sdr_gain: Vec<f64>,
}

pub fn run_end_to_end(scenario: &ScenarioConfig, cfg: &PipelineConfig) -> EndToEnd {
    let meeting = build_meeting(scenario).expect("scenario");
    let audio = meeting.audio.as_ref().expect("audio mode");
    let output = run_meeting(audio, &meeting.embeddings, cfg, 1).expect("pipeline");
    let d = der(&meeting.truth.annotation, &output.diarization.to_annotation(), 0.25).expect("der");
    let gains = separation_gains(&meeting, &output);
    EndToEnd {
        meeting,
        output,
        der: d,
        si_sdr_gain: gains,
    }
}

/// Scores every estimated track against every reference image over the
/// samples where that speaker is active, relative to the unprocessed
/// reference channel, and keeps the best one-to-one assignment.
pub fn separation_gains(meeting: &Meeting, output: &MeetingOutput) -> Vec<f64> {
    let images = meeting.truth.images.as_ref().expect("images");
    let audio = meeting.audio.as_ref().expect("audio");
    let mix = audio.samples().row(0).to_vec();
    let sr = audio.sample_rate() as f64;
    let k_true = images.nrows();
    let n_est = output.separated.len();
    let mut gain = Array2::from_elem((k_true, n_est.max(1)), f64::NEG_INFINITY);
    for k in 0..k_true {
        let name = mixsep::synth::speaker_name(k);
        let mut idx = Vec::new();
        for turn in meeting.truth.annotation.turns.iter().filter(|t| t.speaker == name) {
            let s = (turn.start_s * sr) as usize;
            let e = ((turn.end_s * sr) as usize).min(mix.len());
            idx.extend(s..e);
        }
        let reference: Vec<f64> = idx.iter().map(|&n| images[(k, n)]).collect();
        let base_in: Vec<f64> = idx.iter().map(|&n| mix[n]).collect();
        let base = si_sdr(&base_in, &reference).expect("baseline");
        for (g, track) in output.separated.iter().enumerate() {
            let est: Vec<f64> = idx.iter().map(|&n| track[n]).collect();
            gain[(k, g)] = si_sdr(&est, &reference).map(|v| v - base).unwrap_or(f64::NEG_INFINITY);
        }
    }
    let mut out = vec![f64::NEG_INFINITY; k_true];
    if n_est == 0 {
        return out;
    }
    let cost = gain.mapv(|v| if v.is_finite() { -v } else { 1e6 });
    for (k, g) in linear_sum_assignment(cost.view()).expect("assignment") {
        out[k] = gain[(k, g)];
    }
    out
}

use mixsep::cacg::PosteriorTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct-mode scenario with one segment per entry of `plan`, each lasting
/// `seconds_per_speaker` per active speaker.
pub fn direct_scenario(
    k_true: usize,
    channels: usize,
    emb_dim: usize,
    n_freqs: usize,
    plan: &[Vec<usize>],
    seconds_per_speaker: f64,
    seed: u64,
) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(k_true, channels, emb_dim);
    cfg.n_freqs = n_freqs;
    cfg.segments = plan
        .iter()
        .map(|a| SegmentPlan {
            active: a.clone(),
            duration_s: seconds_per_speaker * a.len() as f64,
        })
        .collect();
    cfg.seed = seed;
    cfg
}

/// Random column-stochastic `K x T` responsibilities.
pub fn random_resp(k: usize, t: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Array2::from_shape_fn((k, t), |_| rng.random::<f64>() + 0.05);
    for mut col in r.columns_mut() {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    r
}

pub fn replicated(resp: &Array2<f64>, nf: usize) -> PosteriorTensor {
    PosteriorTensor::replicate(resp.view(), nf).expect("valid responsibilities")
}

/// Best-permutation accuracy of hard labels against truth labels.
pub fn permutation_accuracy(truth: &[usize], est: &[usize], k_truth: usize, k_est: usize) -> f64 {
    let mut table = Array2::<f64>::zeros((k_truth, k_est));
    for (&a, &b) in truth.iter().zip(est) {
        table[(a, b)] += 1.0;
    }
    let pairs = linear_sum_assignment(table.mapv(|v| -v).view()).expect("assignment");
    pairs.iter().map(|&(a, b)| table[(a, b)]).sum::<f64>() / truth.len() as f64
}

/// Relative Frobenius error after scaling both matrices to unit trace.
pub fn scaled_frobenius_error(est: &mixsep::numerics::HermitianPD, truth: &mixsep::numerics::HermitianPD) -> f64 {
    let a = est.with_trace(1.0);
    let b = truth.with_trace(1.0);
    a.frobenius_distance(&b) / b.frobenius_norm()
}

/// `A Aᴴ / C + 0.1 I` with standard complex normal `A`, plus a rank-one
/// term of weight `anisotropy`.
pub fn random_pd(c: usize, anisotropy: f64, seed: u64) -> mixsep::numerics::HermitianPD {
    use num_complex::Complex64;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cn = || {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    };
    let a = Array2::from_shape_fn((c, c), |_| cn());
    let h: Vec<Complex64> = (0..c).map(|_| cn()).collect();
    let hn: f64 = h.iter().map(|z| z.norm_sqr()).sum();
    let mut m = a.dot(&a.t().mapv(|z| z.conj())).mapv(|z| z / c as f64);
    for i in 0..c {
        for j in 0..c {
            m[(i, j)] += h[i] * h[j].conj() * (anisotropy / hn);
        }
        m[(i, i)] += Complex64::new(0.1, 0.0);
    }
    mixsep::numerics::HermitianPD::new(m).expect("positive definite")
}

/// Runs the per-segment pipeline on every ground-truth segment of a direct
/// meeting, with the truth activity as VAD. Returns (true, estimated) counts.
pub fn segment_counts(meeting: &Meeting, cfg: &PipelineConfig) -> Vec<(usize, usize)> {
    use mixsep::frontend::{SegmentSpec, VadMask};
    use mixsep::pipeline::process_segment;
    let voiced = meeting.truth.voiced();
    meeting
        .truth
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = SegmentSpec {
                start_frame: s.start_frame,
                end_frame: s.end_frame,
                id: format!("seg{i}"),
            };
            let x = meeting.stft.slice_frames(s.start_frame, s.end_frame);
            let e = meeting.embeddings.slice(s.start_frame, s.end_frame);
            let vad = VadMask {
                frames: voiced[s.start_frame..s.end_frame].to_vec(),
            };
            let r = process_segment(&spec, &x, &e, &vad, cfg, None, cfg.seed + i as u64).expect("segment");
            (s.count, r.count())
        })
        .collect()
}

/// Speaker counting scenario: `n` segments with 1 to 5 of 8 speakers.
pub fn counting_scenario(n: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(8, 2, 32);
    cfg.n_freqs = 9;
    cfg.random_plan = Some(mixsep::synth::RandomPlan {
        n_segments: n,
        min_active: 1,
        max_active: 5,
        seconds_per_speaker: 3.0,
    });
    cfg.pause_s = 0.5;
    cfg.kappa_true = 150.0;
    cfg.seed = seed;
    cfg
}

pub fn counting_config() -> PipelineConfig {
    PipelineConfig {
        k_init: 8,
        beamform: false,
        ..PipelineConfig::default()
    }
}

/// Alignment trial: per segment, one noisy prototype per active speaker
/// (normalized mean of its embeddings), rows shuffled. Returns whether every
/// speaker received a single global id distinct from all others.
pub fn alignment_trial(seed: u64, similarity: f64) -> bool {
    use mixsep::pipeline::align_segments;
    use rand::seq::SliceRandom;
    let mut sc = ScenarioConfig::new(4, 2, 32);
    sc.n_freqs = 3;
    sc.prototype_similarity = similarity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sc.segments = (0..4)
        .map(|_| {
            let mut spk: Vec<usize> = (0..4).collect();
            spk.shuffle(&mut rng);
            let n = rng.random_range(2..=4);
            spk.truncate(n);
            spk.sort();
            SegmentPlan {
                active: spk,
                duration_s: 2.0 * n as f64,
            }
        })
        .collect();
    sc.seed = seed;
    let m = build_meeting(&sc).expect("scenario");
    let mut protos = Vec::new();
    let mut owners = Vec::new();
    for s in &m.truth.segments {
        let mut rows: Vec<(usize, ndarray::Array1<f64>)> = s
            .speakers
            .iter()
            .map(|&k| {
                let mut acc = ndarray::Array1::<f64>::zeros(32);
                for t in s.start_frame..s.end_frame {
                    if m.truth.frame_speaker[t] == Some(k) {
                        acc += &m.embeddings.row(t);
                    }
                }
                let n = acc.dot(&acc).sqrt();
                (k, acc / n)
            })
            .collect();
        rows.shuffle(&mut rng);
        owners.push(rows.iter().map(|(k, _)| *k).collect::<Vec<_>>());
        protos.push(mixsep::pipeline::stack_rows(&rows.into_iter().map(|(_, r)| r).collect::<Vec<_>>()));
    }
    let mut present: Vec<usize> = m.truth.segments.iter().flat_map(|s| s.speakers.clone()).collect();
    present.sort();
    present.dedup();
    let labels = align_segments(&protos, Some(present.len()), 10, seed).expect("alignment");
    let mut map = std::collections::HashMap::new();
    for (own, lab) in owners.iter().zip(&labels) {
        for (&k, &g) in own.iter().zip(lab) {
            if *map.entry(k).or_insert(g) != g {
                return false;
            }
        }
    }
    let mut ids: Vec<_> = map.values().copied().collect();
    ids.sort();
    ids.dedup();
    ids.len() == map.len()
}
