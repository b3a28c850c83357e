//! Generative oracle: exact samplers for the two directional distributions
//! and a synthetic meeting builder with ground truth.
//!
//! Two modes share the activity model. Without an `audio` section the
//! observations are drawn directly from the spatial and spectral models
//! (one cACG draw per bin, one vMF draw per frame). With an `audio` section
//! a multichannel waveform is synthesized from syllabic harmonic sources
//! filtered by short per-channel impulse responses, and the STFT, masks and
//! frame dominance are derived from it.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cacg::{SpatialComponent, StftMeta, StftTensor};
use crate::error::{Error, Result};
use crate::frontend::{
    frame_count, frame_start_s, hann, seconds_to_frame, stft, write_embeddings, AudioBuffer,
    EmbeddingMeta, StftConfig,
};
use crate::metrics::{write_rttm, Annotation, Turn};
use crate::numerics::{Cholesky, HermitianPD};
use crate::pipeline::write_masks;
use crate::vmf::EmbeddingSequence;

/// Wood's rejection sampler for the von-Mises-Fisher distribution.
pub fn sample_vmf_with<R: Rng + ?Sized>(
    mu: ArrayView1<f64>,
    kappa: f64,
    n: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let m = mu.len();
    if m < 2 {
        return Err(Error::invalid_input("vMF sampling needs dimension at least 2"));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::invalid_input(format!("invalid concentration {kappa}")));
    }
    let norm = mu.dot(&mu).sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::invalid_input("mean direction must be a unit vector"));
    }
    let mut out = Array2::zeros((n, m));
    if kappa == 0.0 {
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(&uniform_sphere(m, rng));
        }
        return Ok(out);
    }
    let dm1 = (m - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
    for mut row in out.axis_iter_mut(Axis(0)) {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // Uniform direction orthogonal to mu.
        let v = loop {
            let g: Array1<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let proj = &g - &(mu.to_owned() * g.dot(&mu));
            let pn = proj.dot(&proj).sqrt();
            if pn > 1e-12 {
                break proj / pn;
            }
        };
        let x = &mu * w + &v * (1.0 - w * w).max(0.0).sqrt();
        let xn = x.dot(&x).sqrt();
        row.assign(&(x / xn));
    }
    Ok(out)
}

pub fn sample_vmf(mu: ArrayView1<f64>, kappa: f64, n: usize, seed: u64) -> Result<Array2<f64>> {
    sample_vmf_with(mu, kappa, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn uniform_sphere<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Array1<f64> {
    crate::vmf::random_unit(m, rng)
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
    )
}

fn draw_cacg<R: Rng + ?Sized>(chol: &Cholesky, rng: &mut R) -> Vec<Complex64> {
    loop {
        let w: Vec<Complex64> = (0..chol.dim()).map(|_| complex_normal(rng)).collect();
        let mut z = chol.lower_mul(&w);
        let norm = z.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for v in z.iter_mut() {
                *v /= norm;
            }
            return z;
        }
    }
}

/// Normalized zero-mean complex Gaussian draws with covariance `b`.
pub fn sample_cacg_with<R: Rng + ?Sized>(b: &HermitianPD, n: usize, rng: &mut R) -> Result<Vec<Vec<Complex64>>> {
    let chol = b.cholesky()?;
    Ok((0..n).map(|_| draw_cacg(&chol, rng)).collect())
}

pub fn sample_cacg(b: &HermitianPD, n: usize, seed: u64) -> Result<Vec<Vec<Complex64>>> {
    sample_cacg_with(b, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentPlan {
    pub active: Vec<usize>,
    pub duration_s: f64,
}

/// Draws `n_segments` segments with a uniformly random number of active
/// speakers in `[min_active, max_active]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPlan {
    pub n_segments: usize,
    pub min_active: usize,
    pub max_active: usize,
    #[serde(default = "default_seconds_per_speaker")]
    pub seconds_per_speaker: f64,
}

fn default_seconds_per_speaker() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioScenario {
    pub sample_rate: u32,
    /// Level of the additive white noise (dB re. unit amplitude).
    pub noise_db: f64,
    pub stft: StftConfig,
}

impl Default for AudioScenario {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            noise_db: -40.0,
            stft: StftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub k_true: usize,
    pub channels: usize,
    pub emb_dim: usize,
    /// Frequency count of the direct (non-audio) mode.
    #[serde(default = "default_n_freqs")]
    pub n_freqs: usize,
    /// Frame rate of the direct mode; audio mode derives it from the STFT.
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub segments: Vec<SegmentPlan>,
    #[serde(default)]
    pub random_plan: Option<RandomPlan>,
    /// Fraction of each utterance overlapped by the next one.
    #[serde(default)]
    pub overlap: f64,
    #[serde(default = "default_kappa")]
    pub kappa_true: f64,
    /// Weight of the rank-one part of every spatial covariance.
    #[serde(default = "default_anisotropy")]
    pub anisotropy: f64,
    /// Pairwise cosine similarity between speaker prototypes.
    #[serde(default)]
    pub prototype_similarity: f64,
    /// Speaker pairs whose second member reuses the first's covariances.
    #[serde(default)]
    pub shared_spatial: Vec<[usize; 2]>,
    #[serde(default = "default_pause")]
    pub pause_s: f64,
    #[serde(default)]
    pub audio: Option<AudioScenario>,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_freqs() -> usize {
    65
}
fn default_frame_rate() -> f64 {
    62.5
}
fn default_kappa() -> f64 {
    50.0
}
fn default_anisotropy() -> f64 {
    10.0
}
fn default_pause() -> f64 {
    2.0
}

impl ScenarioConfig {
    pub fn new(k_true: usize, channels: usize, emb_dim: usize) -> Self {
        Self {
            k_true,
            channels,
            emb_dim,
            n_freqs: default_n_freqs(),
            frame_rate: default_frame_rate(),
            segments: Vec::new(),
            random_plan: None,
            overlap: 0.0,
            kappa_true: default_kappa(),
            anisotropy: default_anisotropy(),
            prototype_similarity: 0.0,
            shared_spatial: Vec::new(),
            pause_s: default_pause(),
            audio: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid_config(m));
        if self.k_true < 1 {
            return bad("k_true must be at least 1".into());
        }
        if self.channels < 2 {
            return bad("at least two channels are required".into());
        }
        let needed = self.k_true + (self.prototype_similarity > 0.0) as usize;
        if self.emb_dim < 2 || self.emb_dim < needed {
            return bad(format!("emb_dim {} too small for {} prototypes", self.emb_dim, self.k_true));
        }
        if !(0.0..=0.4).contains(&self.overlap) {
            return bad("overlap must lie in [0, 0.4]".into());
        }
        if !(0.0..1.0).contains(&self.prototype_similarity) {
            return bad("prototype_similarity must lie in [0, 1)".into());
        }
        if !(self.kappa_true >= 0.0) || !(self.anisotropy >= 0.0) || !(self.pause_s >= 0.0) {
            return bad("kappa_true, anisotropy and pause_s must be non-negative".into());
        }
        if self.audio.is_none() {
            if self.n_freqs < 1 {
                return bad("n_freqs must be at least 1".into());
            }
            let hop = 16000.0 / self.frame_rate;
            if !(self.frame_rate > 0.0) || (hop - hop.round()).abs() > 1e-9 {
                return bad("frame_rate must divide 16000 Hz into whole samples".into());
            }
        }
        for seg in &self.segments {
            if seg.active.is_empty() || seg.active.iter().any(|&k| k >= self.k_true) {
                return bad(format!("segment plan {:?} names unknown speakers", seg.active));
            }
            let mut s = seg.active.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != seg.active.len() {
                return bad("segment plan lists a speaker twice".into());
            }
            if !(seg.duration_s > 0.0) {
                return bad("segment duration must be positive".into());
            }
        }
        if let Some(p) = &self.random_plan {
            if p.min_active < 1 || p.min_active > p.max_active || p.max_active > self.k_true {
                return bad("random plan speaker range is infeasible".into());
            }
            if !(p.seconds_per_speaker > 0.0) {
                return bad("seconds_per_speaker must be positive".into());
            }
        }
        for pair in &self.shared_spatial {
            if pair[0] >= self.k_true || pair[1] >= self.k_true || pair[0] == pair[1] {
                return bad(format!("invalid shared_spatial pair {pair:?}"));
            }
        }
        Ok(())
    }
}

/// Ground-truth segment: the speakers that actually speak in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub start_s: f64,
    pub end_s: f64,
    pub start_frame: usize,
    pub end_frame: usize,
    pub speakers: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Dominant source per voiced bin, `K_true x T x F`.
    pub masks: Array3<bool>,
    /// Frame-level activity, `K_true x T`.
    pub activity: Array2<bool>,
    /// Speaker whose embedding was emitted at each voiced frame.
    pub frame_speaker: Vec<Option<usize>>,
    pub annotation: Annotation,
    pub segments: Vec<SegmentTruth>,
    pub prototypes: Array2<f64>,
    /// Model covariances (direct mode only).
    pub covariances: Option<Vec<SpatialComponent>>,
    /// Reference-channel source images, `K_true x N` (audio mode only).
    pub images: Option<Array2<f64>>,
}

impl GroundTruth {
    pub fn voiced(&self) -> Vec<bool> {
        self.activity
            .axis_iter(Axis(1))
            .map(|c| c.iter().any(|&a| a))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Meeting {
    pub stft: StftTensor,
    pub embeddings: EmbeddingSequence,
    pub truth: GroundTruth,
    pub audio: Option<AudioBuffer>,
}

pub fn speaker_name(k: usize) -> String {
    format!("spk{k}")
}

const LEAD_S: f64 = 1.0;

struct Utterance {
    speaker: usize,
    start: f64,
    end: f64,
}

pub fn build_meeting(cfg: &ScenarioConfig) -> Result<Meeting> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = resolve_plan(cfg, &mut rng);
    if plan.is_empty() {
        return Err(Error::invalid_config("scenario has no segments"));
    }
    let (utterances, mut segments, total_s) = layout(cfg, &plan, &mut rng);
    let prototypes = draw_prototypes(cfg, &mut rng);

    let meta = match &cfg.audio {
        Some(a) => a.stft.meta(a.sample_rate)?,
        None => {
            let hop = (16000.0 / cfg.frame_rate).round() as usize;
            StftMeta {
                sample_rate: 16000,
                fft_len: 2 * cfg.n_freqs.saturating_sub(1),
                window_len: hop,
                hop,
            }
        }
    };
    let n_samples = (total_s * meta.sample_rate as f64).ceil() as usize;
    let nt = frame_count(n_samples, &meta);
    let activity = frame_activity(cfg.k_true, &utterances, nt, &meta);
    for seg in segments.iter_mut() {
        seg.start_frame = seconds_to_frame(seg.start_s, &meta).min(nt);
        seg.end_frame = (seconds_to_frame(seg.end_s, &meta) + 1).min(nt);
    }
    let annotation = Annotation {
        turns: utterances
            .iter()
            .map(|u| Turn {
                speaker: speaker_name(u.speaker),
                start_s: u.start,
                end_s: u.end,
            })
            .collect(),
    };

    let (stft_tensor, masks, frame_speaker, covariances, images, audio) = match &cfg.audio {
        None => {
            let (x, masks, fs, covs) = direct_observations(cfg, &activity, &meta, &mut rng)?;
            (x, masks, fs, Some(covs), None, None)
        }
        Some(a) => {
            let (x, masks, fs, images, audio) =
                audio_observations(cfg, a, &utterances, &activity, n_samples, &mut rng)?;
            (x, masks, fs, None, Some(images), Some(audio))
        }
    };

    let mut emb = Array2::zeros((nt, cfg.emb_dim));
    for t in 0..nt {
        let row = match frame_speaker[t] {
            Some(k) => sample_vmf_with(prototypes.row(k), cfg.kappa_true, 1, &mut rng)?
                .row(0)
                .to_owned(),
            None => uniform_sphere(cfg.emb_dim, &mut rng),
        };
        emb.row_mut(t).assign(&row);
    }
    let embeddings = EmbeddingSequence::new(emb, meta.frame_rate())?;
    Ok(Meeting {
        stft: stft_tensor,
        embeddings,
        truth: GroundTruth {
            masks,
            activity,
            frame_speaker,
            annotation,
            segments,
            prototypes,
            covariances,
            images,
        },
        audio,
    })
}

fn resolve_plan(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<SegmentPlan> {
    let mut plan = cfg.segments.clone();
    if let Some(p) = &cfg.random_plan {
        let mut ids: Vec<usize> = (0..cfg.k_true).collect();
        for _ in 0..p.n_segments {
            let n = rng.random_range(p.min_active..=p.max_active);
            ids.shuffle(rng);
            let mut active = ids[..n].to_vec();
            active.sort_unstable();
            plan.push(SegmentPlan {
                active,
                duration_s: p.seconds_per_speaker * n as f64,
            });
        }
    }
    plan
}

const MIN_UTTERANCE_S: f64 = 1.0;

/// Utterance timing: speakers of a segment take turns in random order with
/// utterances of 1-2.5 s (every planned speaker at least once); each turn overlaps the previous one by `overlap`
/// of its length, or follows a 0.1-0.4 s gap when `overlap` is zero.
fn layout(
    cfg: &ScenarioConfig,
    plan: &[SegmentPlan],
    rng: &mut ChaCha8Rng,
) -> (Vec<Utterance>, Vec<SegmentTruth>, f64) {
    let mut utterances = Vec::new();
    let mut segments = Vec::new();
    let mut cursor = LEAD_S;
    for (i, seg) in plan.iter().enumerate() {
        if i > 0 {
            cursor += cfg.pause_s;
        }
        let seg_start = cursor;
        let seg_end = seg_start + seg.duration_s;
        let mut order = seg.active.clone();
        order.shuffle(rng);
        let mut t = seg_start;
        let mut last_end = seg_start;
        let mut speakers = Vec::new();
        let mut j = 0;
        while j < order.len() || t + MIN_UTTERANCE_S <= seg_end {
            let spk = order[j % order.len()];
            j += 1;
            let len: f64 = rng.random_range(MIN_UTTERANCE_S..2.5);
            let end = (t + len).min(seg_end).max(t + MIN_UTTERANCE_S);
            utterances.push(Utterance {
                speaker: spk,
                start: t,
                end,
            });
            if !speakers.contains(&spk) {
                speakers.push(spk);
            }
            last_end = last_end.max(end);
            t = if cfg.overlap > 0.0 && order.len() > 1 {
                end - cfg.overlap * (end - t)
            } else {
                end + rng.random_range(0.1..0.4)
            };
        }
        speakers.sort_unstable();
        segments.push(SegmentTruth {
            start_s: seg_start,
            end_s: last_end,
            start_frame: 0,
            end_frame: 0,
            count: speakers.len(),
            speakers,
        });
        cursor = last_end;
    }
    utterances.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.speaker.cmp(&b.speaker)));
    (utterances, segments, cursor + LEAD_S)
}

/// Unit prototypes with pairwise cosine `prototype_similarity`.
fn draw_prototypes(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let extra = (cfg.prototype_similarity > 0.0) as usize;
    let basis = orthonormal(cfg.k_true + extra, cfg.emb_dim, rng);
    let s = cfg.prototype_similarity;
    let mut out = Array2::zeros((cfg.k_true, cfg.emb_dim));
    for k in 0..cfg.k_true {
        let v = if extra == 1 {
            &basis.row(cfg.k_true) * s.sqrt() + &basis.row(k) * (1.0 - s).sqrt()
        } else {
            basis.row(k).to_owned()
        };
        out.row_mut(k).assign(&v);
    }
    out
}

fn orthonormal(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out: Array2<f64> = Array2::zeros((n, dim));
    let mut k = 0;
    while k < n {
        let mut v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for j in 0..k {
            let p = v.dot(&out.row(j));
            v = v - &(out.row(j).to_owned() * p);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            out.row_mut(k).assign(&(v / norm));
            k += 1;
        }
    }
    out
}

fn frame_activity(k: usize, utterances: &[Utterance], nt: usize, meta: &StftMeta) -> Array2<bool> {
    let half_hop = meta.hop as f64 / meta.sample_rate as f64 / 2.0;
    let mut act = Array2::from_elem((k, nt), false);
    for t in 0..nt {
        let center = frame_start_s(t, meta) + half_hop;
        for u in utterances {
            if center >= u.start && center < u.end {
                act[(u.speaker, t)] = true;
            }
        }
    }
    act
}

/// `anisotropy * h h^H + A A^H / C + 0.1 I` with unit `h`.
fn draw_covariance(c: usize, anisotropy: f64, rng: &mut ChaCha8Rng) -> Result<HermitianPD> {
    let h: Vec<Complex64> = (0..c).map(|_| complex_normal(rng)).collect();
    let hn = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let a = Array2::from_shape_fn((c, c), |_| complex_normal(rng));
    let mut m = a.dot(&a.t().mapv(|z| z.conj())).mapv(|z| z / c as f64);
    for i in 0..c {
        for j in 0..c {
            m[(i, j)] += h[i] * h[j].conj() * (anisotropy / (hn * hn));
        }
        m[(i, i)] += 0.1;
    }
    HermitianPD::new(m)
}

type Observations = (StftTensor, Array3<bool>, Vec<Option<usize>>, Vec<SpatialComponent>);

fn direct_observations(
    cfg: &ScenarioConfig,
    activity: &Array2<bool>,
    meta: &StftMeta,
    rng: &mut ChaCha8Rng,
) -> Result<Observations> {
    let (k, nt) = activity.dim();
    let nf = cfg.n_freqs;
    let c = cfg.channels;
    let mut covs: Vec<SpatialComponent> = Vec::with_capacity(k);
    for _ in 0..k {
        let covariances = (0..nf)
            .map(|_| draw_covariance(c, cfg.anisotropy, rng))
            .collect::<Result<Vec<_>>>()?;
        covs.push(SpatialComponent { covariances });
    }
    for pair in &cfg.shared_spatial {
        covs[pair[1]] = covs[pair[0]].clone();
    }
    let chols: Vec<Vec<Cholesky>> = covs
        .iter()
        .map(|s| s.covariances.iter().map(|b| b.cholesky()).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let iso = HermitianPD::identity(c).cholesky()?;
    let gamma = Gamma::new(2.0, 1.0).expect("valid gamma parameters");
    let mut data = Array3::zeros((nf, nt, c));
    let mut masks = Array3::from_elem((k, nt, nf), false);
    let mut frame_speaker = vec![None; nt];
    for t in 0..nt {
        let active: Vec<usize> = (0..k).filter(|&s| activity[(s, t)]).collect();
        let weights: Vec<f64> = active.iter().map(|_| gamma.sample(rng)).collect();
        if !active.is_empty() {
            let best = (0..active.len())
                .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
                .expect("non-empty");
            frame_speaker[t] = Some(active[best]);
        }
        let total: f64 = weights.iter().sum();
        for f in 0..nf {
            let y = if active.is_empty() {
                draw_cacg(&iso, rng)
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut pick = active.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                let s = active[pick];
                masks[(s, t, f)] = true;
                draw_cacg(&chols[s][f], rng)
            };
            for (ch, v) in y.into_iter().enumerate() {
                data[(f, t, ch)] = v;
            }
        }
    }
    Ok((StftTensor::new(data, *meta)?, masks, frame_speaker, covs))
}

type AudioObservations = (StftTensor, Array3<bool>, Vec<Option<usize>>, Array2<f64>, AudioBuffer);

fn audio_observations(
    cfg: &ScenarioConfig,
    a: &AudioScenario,
    utterances: &[Utterance],
    activity: &Array2<bool>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AudioObservations> {
    let sr = a.sample_rate as f64;
    let k = cfg.k_true;
    let c = cfg.channels;
    let mut sources = Array2::<f64>::zeros((k, n));
    let timbre: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..8).map(|_| rng.random_range(0.3..1.0)).collect())
        .collect();
    for u in utterances {
        let f0 = rng.random_range(90.0..250.0);
        let gain = 0.3 * 10f64.powf(rng.random_range(-3.0..3.0) / 20.0);
        let mut t = u.start;
        while t < u.end {
            let len = rng.random_range(0.12..0.25f64).min(u.end - t);
            let f = f0 * (1.0 + 0.08 * rng.sample::<f64, _>(StandardNormal));
            let s0 = (t * sr).round() as usize;
            let s1 = (((t + len) * sr).round() as usize).min(n);
            let n_harm = ((0.45 * sr) / f).floor() as usize;
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            for i in s0..s1 {
                let tau = (i - s0) as f64 / (s1 - s0).max(1) as f64;
                let env = (PI * tau).sin();
                let time = i as f64 / sr;
                let mut v = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let fh = f * (h + 1) as f64;
                    let band = ((fh / (0.5 * sr)) * 8.0).floor().min(7.0) as usize;
                    v += timbre[u.speaker][band] / (h + 1) as f64 * (2.0 * PI * fh * time + ph).sin();
                }
                sources[(u.speaker, i)] += gain * env * v;
            }
            t += len + rng.random_range(0.04..0.1);
        }
    }
    // Short impulse responses: a delayed direct path plus a decaying tail.
    let taps = 12;
    let mut images = Array3::<f64>::zeros((k, c, n));
    let mut firs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for _ in 0..k {
        let per_channel: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let delay = rng.random_range(0..6usize);
                (0..taps)
                    .map(|j| {
                        let tail = 0.25 * rng.sample::<f64, _>(StandardNormal) * (-(j as f64) / 3.0).exp();
                        if j == delay {
                            1.0 + tail
                        } else if j > delay {
                            tail
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        firs.push(per_channel);
    }
    for s in 0..k {
        for ch in 0..c {
            let h = &firs[s][ch];
            let src = sources.row(s);
            let mut img = images.slice_mut(ndarray::s![s, ch, ..]);
            for i in 0..n {
                let mut acc = 0.0;
                for (j, hj) in h.iter().enumerate() {
                    if j <= i {
                        acc += hj * src[i - j];
                    }
                }
                img[i] = acc;
            }
        }
    }
    let noise_std = 10f64.powf(a.noise_db / 20.0);
    let mut mix = images.sum_axis(Axis(0));
    mix.mapv_inplace(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal));
    let audio = AudioBuffer::new(mix, a.sample_rate)?;
    let x = stft(&audio, &a.stft)?;
    let (nf, nt) = (x.n_freqs(), x.n_frames());

    // Dominance from reference-channel image energy.
    let mut energy = Array3::<f64>::zeros((k, nt, nf));
    for s in 0..k {
        let img = AudioBuffer::new(images.slice(ndarray::s![s, 0..1, ..]).to_owned(), a.sample_rate)?;
        let spec = stft(&img, &a.stft)?;
        for f in 0..nf {
            for t in 0..nt {
                energy[(s, t, f)] = spec.bin(f, t)[0].norm_sqr();
            }
        }
    }
    let mut masks = Array3::from_elem((k, nt, nf), false);
    let mut frame_speaker = vec![None; nt];
    for t in 0..nt {
        let active: Vec<usize> = (0..k).filter(|&s| activity[(s, t)]).collect();
        if active.is_empty() {
            continue;
        }
        let frame_e = |s: usize| -> f64 { (0..nf).map(|f| energy[(s, t, f)]).sum() };
        let best = active
            .iter()
            .copied()
            .max_by(|&p, &q| frame_e(p).total_cmp(&frame_e(q)).then(q.cmp(&p)))
            .expect("non-empty");
        frame_speaker[t] = Some(best);
        for f in 0..nf {
            let dom = active
                .iter()
                .copied()
                .max_by(|&p, &q| energy[(p, t, f)].total_cmp(&energy[(q, t, f)]).then(q.cmp(&p)))
                .expect("non-empty");
            masks[(dom, t, f)] = true;
        }
    }
    let refs = images.index_axis(Axis(1), 0).to_owned();
    Ok((x, masks, frame_speaker, refs, audio))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub k_true: usize,
    pub n_frames: usize,
    pub frame_rate: f64,
    pub segments: Vec<SegmentTruth>,
}

/// File names inside a bundle directory.
pub mod bundle {
    pub const MIXTURE: &str = "mixture.wav";
    pub const EMBEDDINGS: &str = "embeddings.emb";
    pub const REFERENCE: &str = "reference.rttm";
    pub const TRUTH: &str = "truth.json";
    pub const MASKS: &str = "masks.msk";
    pub const SCENARIO: &str = "scenario.json";
    pub const RECORDING_ID: &str = "meeting";

    pub fn image(k: usize) -> String {
        format!("image_{}.wav", super::speaker_name(k))
    }
}

/// Writes a meeting in the frontend/pipeline file formats: embeddings,
/// reference RTTM, truth summary, dominance masks and, in audio mode, the
/// mixture and the reference-channel source images.
pub fn write_bundle(meeting: &Meeting, cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenario = dir.join(bundle::SCENARIO);
    std::fs::write(&scenario, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&scenario, e))?;
    write_embeddings(
        &dir.join(bundle::EMBEDDINGS),
        meeting.embeddings.frames(),
        Some(&EmbeddingMeta {
            frame_rate: meeting.embeddings.frame_rate(),
            extractor: Some("synthetic-vmf".into()),
        }),
    )?;
    write_rttm(&dir.join(bundle::REFERENCE), bundle::RECORDING_ID, &meeting.truth.annotation)?;
    let summary = TruthSummary {
        k_true: cfg.k_true,
        n_frames: meeting.stft.n_frames(),
        frame_rate: meeting.embeddings.frame_rate(),
        segments: meeting.truth.segments.clone(),
    };
    let truth = dir.join(bundle::TRUTH);
    std::fs::write(&truth, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&truth, e))?;
    let masks = meeting.truth.masks.mapv(|b| if b { 1.0 } else { 0.0 });
    write_masks(&dir.join(bundle::MASKS), &masks)?;
    if let Some(audio) = &meeting.audio {
        audio.write_wav(&dir.join(bundle::MIXTURE))?;
        if let Some(images) = &meeting.truth.images {
            for (k, row) in images.axis_iter(Axis(0)).enumerate() {
                let buf = AudioBuffer::new(row.insert_axis(Axis(0)).to_owned(), audio.sample_rate())?;
                buf.write_wav(&dir.join(bundle::image(k)))?;
            }
        }
    }
    Ok(())
}

/// Per-frame weights used for Hann-windowed frame energies in tests.
pub fn frame_energy(signal: &[f64], meta: &StftMeta) -> Vec<f64> {
    let w = hann(meta.window_len);
    (0..frame_count(signal.len(), meta))
        .map(|t| {
            let s = t * meta.hop;
            w.iter().enumerate().map(|(i, wi)| (signal[s + i] * wi).powi(2)).sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_resultant_length;

    #[test]
    fn vmf_samples_are_unit_and_reproducible() {
        let mut mu = Array1::zeros(8);
        mu[0] = 1.0;
        let a = sample_vmf(mu.view(), 5.0, 200, 3).unwrap();
        let b = sample_vmf(mu.view(), 5.0, 200, 3).unwrap();
        assert_eq!(a, b);
        for row in a.axis_iter(Axis(0)) {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert!(sample_vmf(mu.view(), -1.0, 1, 0).is_err());
    }

    #[test]
    fn vmf_uniform_has_small_mean() {
        let mut mu = Array1::zeros(5);
        mu[2] = 1.0;
        let x = sample_vmf(mu.view(), 0.0, 100_000, 1).unwrap();
        let m = x.mean_axis(Axis(0)).unwrap();
        assert!(m.dot(&m).sqrt() < 0.01);
    }

    #[test]
    fn vmf_mean_resultant_matches_bessel_ratio() {
        let mut mu = Array1::zeros(64);
        mu[0] = 1.0;
        let x = sample_vmf(mu.view(), 35.0, 100_000, 2).unwrap();
        let r = x.dot(&mu).mean().unwrap();
        let a = mean_resultant_length(64, 35.0);
        assert!((r / a - 1.0).abs() < 0.01, "{r} vs {a}");
    }

    #[test]
    fn cacg_isotropic_second_moment() {
        let x = sample_cacg(&HermitianPD::identity(3), 100_000, 4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let m: Complex64 = x.iter().map(|y| y[i] * y[j].conj()).sum::<Complex64>() / x.len() as f64;
                let want = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((m - want).norm() < 0.02 / 3.0, "{i}{j}: {m}");
            }
        }
    }

    #[test]
    fn cacg_rank_dominant_concentrates() {
        // With eigenvalues (λ, 1, ..., 1), |v₁ᴴy|² > q iff λa > q/(1-q)·n with
        // a ~ Exp(1) and n ~ Gamma(C-1, 1), so P = (1 + q/((1-q)λ))^-(C-1).
        for (c, lambda) in [(2usize, 100.0), (4, 100.0)] {
            let mut v = vec![Complex64::new(0.0, 0.0); c];
            for (i, z) in v.iter_mut().enumerate() {
                *z = Complex64::from_polar(1.0 / (c as f64).sqrt(), 0.7 * i as f64);
            }
            let m = Array2::from_shape_fn((c, c), |(i, j)| {
                v[i] * v[j].conj() * (lambda - 1.0) + if i == j { Complex64::new(1.0, 0.0) } else { Complex64::new(0.0, 0.0) }
            });
            let b = HermitianPD::new(m).unwrap();
            let x = sample_cacg(&b, 40_000, 5).unwrap();
            let frac = x
                .iter()
                .filter(|y| y.iter().zip(&v).map(|(a, b)| b.conj() * a).sum::<Complex64>().norm_sqr() > 0.9)
                .count() as f64
                / x.len() as f64;
            let expected = (1.0 + 9.0 / lambda).powi(-(c as i32 - 1));
            assert!((frac - expected).abs() < 0.01, "C={c}: {frac} vs {expected}");
            if c == 2 {
                assert!(frac >= 0.9);
            }
            for y in &x {
                let n: f64 = y.iter().map(|z| z.norm_sqr()).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    fn small(overlap: f64, k_true: usize, plan: Vec<Vec<usize>>) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::new(k_true, 3, 8);
        cfg.n_freqs = 5;
        cfg.overlap = overlap;
        cfg.segments = plan
            .into_iter()
            .map(|active| SegmentPlan {
                duration_s: 3.0 * active.len() as f64,
                active,
            })
            .collect();
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn no_overlap_gives_single_speaker_frames() {
        let m = build_meeting(&small(0.0, 3, vec![vec![0, 1, 2], vec![1, 2]])).unwrap();
        for col in m.truth.activity.axis_iter(Axis(1)) {
            assert!(col.iter().filter(|&&a| a).count() <= 1);
        }
        for t in 0..m.stft.n_frames() {
            for f in 0..m.stft.n_freqs() {
                let n = (0..3).filter(|&k| m.truth.masks[(k, t, f)]).count();
                let voiced = m.truth.frame_speaker[t].is_some();
                assert_eq!(n, voiced as usize);
            }
        }
        assert_eq!(m.truth.segments.len(), 2);
        assert_eq!(m.truth.segments[0].count, 3);
        assert_eq!(m.embeddings.len(), m.stft.n_frames());
    }

    #[test]
    fn single_speaker_masks_cover_voiced_bins() {
        let m = build_meeting(&small(0.0, 1, vec![vec![0]])).unwrap();
        for t in 0..m.stft.n_frames() {
            let voiced = m.truth.activity[(0, t)];
            for f in 0..m.stft.n_freqs() {
                assert_eq!(m.truth.masks[(0, t, f)], voiced);
            }
        }
    }

    #[test]
    fn overlap_scenario_records_counts() {
        let mut cfg = small(0.4, 8, vec![]);
        cfg.emb_dim = 16;
        cfg.random_plan = Some(RandomPlan {
            n_segments: 4,
            min_active: 5,
            max_active: 5,
            seconds_per_speaker: 3.0,
        });
        let m = build_meeting(&cfg).unwrap();
        assert_eq!(m.truth.segments.len(), 4);
        for s in &m.truth.segments {
            assert_eq!(s.count, 5);
        }
        let overlapped = m
            .truth
            .activity
            .axis_iter(Axis(1))
            .filter(|c| c.iter().filter(|&&a| a).count() > 1)
            .count();
        assert!(overlapped > 0);
    }

    #[test]
    fn infeasible_plan_is_rejected() {
        let cfg = small(0.0, 2, vec![vec![0, 2]]);
        assert!(matches!(build_meeting(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = small(0.5, 2, vec![vec![0]]);
        assert!(build_meeting(&cfg).is_err());
        cfg.overlap = 0.0;
        assert!(build_meeting(&cfg).is_ok());
    }

    #[test]
    fn prototype_similarity_is_exact() {
        let mut cfg = small(0.0, 3, vec![vec![0]]);
        cfg.prototype_similarity = 0.3;
        let m = build_meeting(&cfg).unwrap();
        let p = &m.truth.prototypes;
        for i in 0..3 {
            assert!((p.row(i).dot(&p.row(i)) - 1.0).abs() < 1e-12);
            for j in (i + 1)..3 {
                assert!((p.row(i).dot(&p.row(j)) - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn audio_mode_produces_consistent_shapes() {
        let mut cfg = small(0.2, 2, vec![vec![0, 1]]);
        cfg.audio = Some(AudioScenario::default());
        let m = build_meeting(&cfg).unwrap();
        let audio = m.audio.as_ref().unwrap();
        assert_eq!(audio.n_channels(), 3);
        assert_eq!(m.stft.n_freqs(), 257);
        assert_eq!(m.truth.masks.dim(), (2, m.stft.n_frames(), 257));
        assert_eq!(m.truth.images.as_ref().unwrap().ncols(), audio.len());
        assert_eq!(m.embeddings.len(), m.stft.n_frames());
    }
}
