//! Orchestration: initialization, per-segment joint EM, smoothing into
//! diarization, mask-based MVDR beamforming, cross-segment alignment and
//! result serialization.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cacg::{PosteriorTensor, StftTensor};
use crate::error::{Error, Result};
use crate::frontend::{
    energy_vad, frame_start_s, istft, runs, split_segments, stft, AudioBuffer, SegmentConfig,
    SegmentSpec, StftConfig, VadConfig, VadMask,
};
use crate::integrated::{count_speakers, joint_em, FusionEvent, JointEmConfig, JointModel};
use crate::metrics::{Annotation, Turn};
use crate::numerics::{linear_sum_assignment, HermitianPD};
use crate::vmf::{
    e_step as vmf_e_step, smoothed_one_hot, spherical_kmeans_pp, vmfmm_em, EmbeddingSequence,
    Priors, PriorMode, VmfEmConfig, VmfMixture,
};

const MSK_MAGIC: &[u8; 4] = b"MSK1";

/// Writes a `K x T x F` tensor in the MSK1 format.
pub fn write_masks(path: &Path, gamma: &Array3<f64>) -> Result<()> {
    let (k, t, f) = gamma.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(16 + 4 * k * t * f);
    bytes.extend_from_slice(MSK_MAGIC);
    for v in [k as u32, t as u32, f as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in gamma.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MSK_MAGIC {
        return Err(Error::format(path, "missing MSK1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (k, t, f) = (dim(0), dim(1), dim(2));
    let n = k
        .checked_mul(t)
        .and_then(|v| v.checked_mul(f))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::format(path, format!("expected {} payload bytes", 4 * n)));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array3::from_shape_vec((k, t, f), values).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizationEntry {
    pub speaker: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub segment_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diarization {
    pub entries: Vec<DiarizationEntry>,
}

pub fn global_speaker_name(g: usize) -> String {
    format!("speaker{g}")
}

impl Diarization {
    pub fn to_annotation(&self) -> Annotation {
        Annotation {
            turns: self
                .entries
                .iter()
                .map(|e| Turn {
                    speaker: global_speaker_name(e.speaker),
                    start_s: e.start_s,
                    end_s: e.end_s,
                })
                .collect(),
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.entries.iter().map(|e| e.speaker + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    PerSegment,
    Global,
}

/// Initial posteriors of one segment.
#[derive(Debug, Clone)]
pub struct SegmentInit {
    pub posterior: PosteriorTensor,
    pub noise_index: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct InitConfig {
    pub k_init: usize,
    pub iterations: usize,
    pub kappa_max: f64,
    pub seed: u64,
}

/// k-means++ on voiced-frame embeddings, a short VMFMM, silence frames on
/// an extra noise component (the last one), replicated over frequency.
/// With `global` set, the meeting-level mixture supplies the posteriors and
/// components with less than half a frame of mass in this segment are
/// dropped.
pub fn initialize_segment(
    x: &StftTensor,
    e: &EmbeddingSequence,
    vad: &VadMask,
    cfg: &InitConfig,
    global: Option<&VmfMixture>,
) -> Result<SegmentInit> {
    if cfg.k_init < 1 {
        return Err(Error::invalid_config("K_init must be at least 1"));
    }
    let nt = x.n_frames();
    if e.len() != nt || vad.len() != nt {
        return Err(Error::invalid_input("STFT, embeddings and VAD differ in frame count"));
    }
    let voiced: Vec<usize> = (0..nt).filter(|&t| vad.frames[t]).collect();
    let mut warnings = Vec::new();
    let resp_voiced: Array2<f64> = if voiced.is_empty() {
        Array2::zeros((0, 0))
    } else {
        let ev = e.select(&voiced);
        match global {
            None => {
                let mut k = cfg.k_init;
                if voiced.len() < k {
                    warnings.push(format!(
                        "K_init lowered from {k} to {} voiced frames",
                        voiced.len()
                    ));
                    k = voiced.len();
                }
                let km = spherical_kmeans_pp(ev.frames(), k, cfg.seed)?;
                let init = smoothed_one_hot(&km.assignment, k, 0.01);
                let fit = vmfmm_em(
                    &ev,
                    init.view(),
                    &VmfEmConfig {
                        iterations: cfg.iterations,
                        kappa_max: cfg.kappa_max,
                        prior_mode: PriorMode::Static,
                        tempering: 1.0,
                        seed: cfg.seed,
                    },
                )?;
                fit.resp
            }
            Some(mix) => {
                let (post, _) = vmf_e_step(&ev, mix, 1.0)?;
                let mass = post.sum_axis(Axis(1));
                let mut keep: Vec<usize> = (0..post.nrows()).filter(|&k| mass[k] >= 0.5).collect();
                if keep.is_empty() {
                    let best = (0..post.nrows())
                        .max_by(|&a, &b| mass[a].total_cmp(&mass[b]))
                        .expect("non-empty mixture");
                    keep.push(best);
                }
                let mut sel = post.select(Axis(0), &keep);
                for mut col in sel.axis_iter_mut(Axis(1)) {
                    let s = col.sum();
                    if s > 0.0 {
                        col.mapv_inplace(|v| v / s);
                    } else {
                        col.fill(1.0 / keep.len() as f64);
                    }
                }
                sel
            }
        }
    };
    let k_speakers = resp_voiced.nrows();
    let k = k_speakers + 1;
    let noise = k_speakers;
    let mut resp = Array2::zeros((k, nt));
    for t in 0..nt {
        if !vad.frames[t] {
            resp[(noise, t)] = 1.0;
        }
    }
    for (j, &t) in voiced.iter().enumerate() {
        for ki in 0..k_speakers {
            resp[(ki, t)] = resp_voiced[(ki, j)];
        }
    }
    Ok(SegmentInit {
        posterior: PosteriorTensor::replicate(resp.view(), x.n_freqs())?,
        noise_index: noise,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothConfig {
    pub median_frames: usize,
    pub on_thresh: f64,
    pub min_dur_s: f64,
    pub merge_gap_s: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            median_frames: 21,
            on_thresh: 0.5,
            min_dur_s: 0.5,
            merge_gap_s: 0.2,
        }
    }
}

/// Median filter with edge replication; `width` must be odd.
pub fn median_filter(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = x.len();
    let mut buf = Vec::with_capacity(width);
    (0..n)
        .map(|t| {
            buf.clear();
            for j in 0..width {
                let idx = (t + j).saturating_sub(half).min(n - 1);
                buf.push(x[idx]);
            }
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect()
}

/// Per component: median-filter the priors, threshold, drop intervals
/// shorter than `min_dur_s`, then merge intervals separated by less than
/// `merge_gap_s`. Intervals are `[start, end)` frame ranges.
pub fn smooth_and_segment(pi: &Array2<f64>, frame_rate: f64, cfg: &SmoothConfig) -> Result<Vec<Vec<(usize, usize)>>> {
    if cfg.median_frames % 2 == 0 {
        return Err(Error::invalid_config("median filter width must be odd"));
    }
    let min_len = cfg.min_dur_s * frame_rate;
    let max_gap = cfg.merge_gap_s * frame_rate;
    Ok(pi
        .axis_iter(Axis(0))
        .map(|row| {
            if row.is_empty() {
                return Vec::new();
            }
            let smoothed = median_filter(&row.to_vec(), cfg.median_frames);
            let mask: Vec<bool> = smoothed.iter().map(|&v| v > cfg.on_thresh).collect();
            let kept: Vec<(usize, usize)> = runs(&mask)
                .into_iter()
                .filter(|(s, e)| (e - s) as f64 >= min_len)
                .collect();
            let mut merged: Vec<(usize, usize)> = Vec::new();
            for (s, e) in kept {
                match merged.last_mut() {
                    Some(last) if ((s - last.1) as f64) < max_gap => last.1 = e,
                    _ => merged.push((s, e)),
                }
            }
            merged
        })
        .collect())
}

/// Mask-based MVDR toward component `target` with the other components as
/// distortion. Returns the single-channel STFT (`F x T`).
pub fn beamform(
    x: &StftTensor,
    gamma: &Array3<f64>,
    target: usize,
    reference_channel: usize,
) -> Result<Array2<Complex64>> {
    let (nf, nt, c) = (x.n_freqs(), x.n_frames(), x.n_channels());
    let (k, gt, gf) = gamma.dim();
    if gt != nt || gf != nf || target >= k {
        return Err(Error::invalid_input("posteriors do not match the STFT or target"));
    }
    if reference_channel >= c {
        return Err(Error::invalid_input("reference channel out of range"));
    }
    let rows: Vec<Result<Vec<Complex64>>> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let mut phi_t = Array2::<Complex64>::zeros((c, c));
            let mut phi_d = Array2::<Complex64>::zeros((c, c));
            let (mut wt, mut wd) = (0.0, 0.0);
            for t in 0..nt {
                let y = x.bin(f, t);
                let gt_ = gamma[(target, t, f)];
                let gd: f64 = (0..k).filter(|&j| j != target).map(|j| gamma[(j, t, f)]).sum();
                wt += gt_;
                wd += gd;
                for i in 0..c {
                    for j in 0..c {
                        let o = y[i] * y[j].conj();
                        phi_t[(i, j)] += o * gt_;
                        phi_d[(i, j)] += o * gd;
                    }
                }
            }
            if wt > 0.0 {
                phi_t.mapv_inplace(|v| v / wt);
            }
            if wd > 0.0 {
                phi_d.mapv_inplace(|v| v / wd);
            }
            let phi_t = HermitianPD::new(phi_t)?;
            let phi_d = HermitianPD::new(phi_d)?;
            let mut v = phi_t.principal_eigenvector();
            let r = v[reference_channel];
            let scale = if r.norm() > 1e-12 { r } else { Complex64::new(1.0, 0.0) };
            for z in v.iter_mut() {
                *z /= scale;
            }
            let chol = phi_d.cholesky()?;
            let num = chol.solve(&v);
            let den: Complex64 = v.iter().zip(&num).map(|(a, b)| a.conj() * b).sum();
            if !(den.norm() > 0.0) || !den.re.is_finite() {
                return Err(Error::numerical("degenerate MVDR denominator"));
            }
            let w: Vec<Complex64> = num.iter().map(|z| z / den).collect();
            Ok((0..nt)
                .map(|t| w.iter().zip(x.bin(f, t)).map(|(a, b)| a.conj() * b).sum())
                .collect())
        })
        .collect();
    let mut out = Array2::zeros((nf, nt));
    for (f, row) in rows.into_iter().enumerate() {
        for (t, v) in row?.into_iter().enumerate() {
            out[(f, t)] = v;
        }
    }
    Ok(out)
}

/// Maps each segment's prototypes (rows) to global speaker ids: spherical
/// k-means over all prototypes (best of `restarts` by inertia), then a
/// one-to-one assignment per segment by cosine similarity to the centroids.
/// Global ids are renumbered by first appearance.
pub fn align_segments(
    prototypes: &[Array2<f64>],
    k_total: Option<usize>,
    restarts: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let counts: Vec<usize> = prototypes.iter().map(|p| p.nrows()).collect();
    let max_count = counts.iter().copied().max().unwrap_or(0);
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(counts.iter().map(|_| Vec::new()).collect());
    }
    let k = k_total.unwrap_or(max_count).min(total);
    if max_count > k {
        return Err(Error::invalid_input(format!(
            "a segment has {max_count} speakers but only {k} global speakers are allowed"
        )));
    }
    let dim = prototypes.iter().find(|p| p.nrows() > 0).map(|p| p.ncols()).unwrap_or(0);
    let mut pooled = Array2::zeros((total, dim));
    let mut row = 0;
    for p in prototypes {
        for r in p.axis_iter(Axis(0)) {
            pooled.row_mut(row).assign(&r);
            row += 1;
        }
    }
    let mut best = None;
    for r in 0..restarts.max(1) {
        let km = spherical_kmeans_pp(pooled.view(), k, seed.wrapping_add(r as u64))?;
        if best.as_ref().map_or(true, |b: &crate::vmf::KMeansResult| km.inertia < b.inertia - 1e-12) {
            best = Some(km);
        }
    }
    let centroids = best.expect("at least one restart").centroids;
    let mut labels = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.nrows() == 0 {
            labels.push(Vec::new());
            continue;
        }
        let cost = p.dot(&centroids.t()).mapv(|s| -s);
        let mut assign = vec![0; p.nrows()];
        for (i, j) in linear_sum_assignment(cost.view())? {
            assign[i] = j;
        }
        labels.push(assign);
    }
    let mut rename = vec![usize::MAX; k];
    let mut next = 0;
    for seg in &labels {
        for &g in seg {
            if rename[g] == usize::MAX {
                rename[g] = next;
                next += 1;
            }
        }
    }
    Ok(labels
        .into_iter()
        .map(|seg| seg.into_iter().map(|g| rename[g]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub vad: VadConfig,
    pub segmentation: SegmentConfig,
    pub k_init: usize,
    pub init_mode: InitMode,
    pub init_iterations: usize,
    pub em: JointEmConfig,
    pub smoothing: SmoothConfig,
    /// Number of global speakers; defaults to the largest per-segment count.
    pub k_total: Option<usize>,
    pub alignment_restarts: usize,
    pub reference_channel: usize,
    pub beamform: bool,
    /// Context added on both sides of a detected utterance in the separated
    /// output, in seconds.
    pub context_s: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            vad: VadConfig::default(),
            segmentation: SegmentConfig::default(),
            k_init: 10,
            init_mode: InitMode::PerSegment,
            init_iterations: 30,
            em: JointEmConfig::default(),
            smoothing: SmoothConfig::default(),
            k_total: None,
            alignment_restarts: 10,
            reference_channel: 0,
            beamform: true,
            context_s: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        if self.k_init < 1 {
            return Err(Error::invalid_config("k_init must be at least 1"));
        }
        if self.init_iterations < 1 {
            return Err(Error::invalid_config("init_iterations must be at least 1"));
        }
        if self.smoothing.median_frames % 2 == 0 {
            return Err(Error::invalid_config("smoothing.median_frames must be odd"));
        }
        if !(self.context_s >= 0.0) {
            return Err(Error::invalid_config("context_s must be non-negative"));
        }
        if self.k_total == Some(0) {
            return Err(Error::invalid_config("k_total must be at least 1"));
        }
        if !(self.vad.window_s > 0.0) || !(self.segmentation.max_len_s > 0.0) {
            return Err(Error::invalid_config("VAD window and maximum segment length must be positive"));
        }
        Ok(())
    }
}

/// Everything produced for one segment.
#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub segment: SegmentSpec,
    pub model: JointModel,
    pub posterior: PosteriorTensor,
    /// Speaker component indices (noise excluded), parallel to `prototypes`.
    pub components: Vec<usize>,
    pub prototypes: Array2<f64>,
    /// Smoothed activity intervals per speaker component, segment frames.
    pub intervals: Vec<Vec<(usize, usize)>>,
    /// Beamformed time signal per speaker component, segment-local samples.
    pub separated: Vec<Vec<f64>>,
    pub events: Vec<FusionEvent>,
    pub loglik_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SegmentResult {
    pub fn count(&self) -> usize {
        count_speakers(&self.model)
    }
}

/// Runs init, joint EM, smoothing and beamforming on one segment. `x` and
/// `e` cover the segment only.
pub fn process_segment(
    segment: &SegmentSpec,
    x: &StftTensor,
    e: &EmbeddingSequence,
    vad: &VadMask,
    cfg: &PipelineConfig,
    global: Option<&VmfMixture>,
    seed: u64,
) -> Result<SegmentResult> {
    x.validate_for_model()?;
    let init = initialize_segment(
        x,
        e,
        vad,
        &InitConfig {
            k_init: cfg.k_init,
            iterations: cfg.init_iterations,
            kappa_max: cfg.em.kappa_max,
            seed,
        },
        global,
    )?;
    let em_cfg = JointEmConfig {
        seed,
        ..cfg.em.clone()
    };
    let fit = joint_em(x, e, &init.posterior, Some(init.noise_index), None, &em_cfg)?;
    let meta = x.meta();
    let all_intervals = smooth_and_segment(&fit.model.pi, meta.frame_rate(), &cfg.smoothing)?;
    let components: Vec<usize> = fit.model.prototypes().into_iter().map(|(k, _)| k).collect();
    let mut prototypes = Array2::zeros((components.len(), e.dim()));
    for (i, &k) in components.iter().enumerate() {
        prototypes.row_mut(i).assign(&fit.model.spectral[k].mu);
    }
    let intervals: Vec<Vec<(usize, usize)>> = components.iter().map(|&k| all_intervals[k].clone()).collect();
    let mut separated = Vec::new();
    if cfg.beamform {
        let n_samples = (x.n_frames().saturating_sub(1)) * meta.hop + meta.window_len;
        for &k in &components {
            let spec = beamform(x, &fit.posterior.gamma, k, cfg.reference_channel)?;
            separated.push(istft(spec.view(), &meta, Some(n_samples))?);
        }
    }
    Ok(SegmentResult {
        segment: segment.clone(),
        model: fit.model,
        posterior: fit.posterior,
        components,
        prototypes,
        intervals,
        separated,
        events: fit.events,
        loglik_trace: fit.loglik_trace,
        warnings: init.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub speaker_count: Option<usize>,
    pub global_speakers: Vec<usize>,
    pub fusion_events: Vec<FusionEvent>,
    pub loglik_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeetingReport {
    pub n_frames: usize,
    pub n_segments: usize,
    pub n_failed: usize,
    pub n_global_speakers: usize,
    pub segments: Vec<SegmentReport>,
    pub notes: Vec<String>,
}

#[derive(Debug)]
pub struct MeetingOutput {
    pub diarization: Diarization,
    /// One meeting-length track per global speaker.
    pub separated: Vec<Vec<f64>>,
    pub report: MeetingReport,
    /// Successful segment results in segment order.
    pub segments: Vec<SegmentResult>,
    pub sample_rate: u32,
}

/// Full pipeline on one recording with frame-aligned embeddings. Segment
/// failures are recorded in the report and do not abort the meeting.
pub fn run_meeting(
    audio: &AudioBuffer,
    embeddings: &EmbeddingSequence,
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<MeetingOutput> {
    cfg.validate()?;
    let x = stft(audio, &cfg.stft)?;
    let meta = x.meta();
    let nt = x.n_frames();
    let mut notes = Vec::new();
    if nt == 0 {
        notes.push("recording shorter than one analysis window; zero segments".to_string());
    } else if embeddings.len() != nt {
        return Err(Error::invalid_input(format!(
            "embeddings have {} frames, STFT has {nt}",
            embeddings.len()
        )));
    }
    let vad = if nt == 0 {
        VadMask { frames: Vec::new() }
    } else {
        energy_vad(audio, &cfg.stft, &cfg.vad)?
    };
    let segments = split_segments(&vad, meta.frame_rate(), &cfg.segmentation);
    if segments.is_empty() && nt > 0 {
        notes.push("no voiced segments; zero segments".to_string());
    }

    let global = match cfg.init_mode {
        InitMode::Global if !segments.is_empty() => Some(global_mixture(&segments, embeddings, &vad, cfg)?),
        _ => None,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid_config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<SegmentResult>> = pool.install(|| {
        segments
            .par_iter()
            .enumerate()
            .map(|(i, seg)| {
                let xs = x.slice_frames(seg.start_frame, seg.end_frame);
                let es = embeddings.slice(seg.start_frame, seg.end_frame);
                let vs = VadMask {
                    frames: vad.frames[seg.start_frame..seg.end_frame].to_vec(),
                };
                process_segment(seg, &xs, &es, &vs, cfg, global.as_ref(), cfg.seed.wrapping_add(i as u64))
            })
            .collect()
    });

    let mut reports = Vec::new();
    let mut ok = Vec::new();
    for (seg, res) in segments.iter().zip(results) {
        let start_s = frame_start_s(seg.start_frame, &meta);
        let end_s = frame_start_s(seg.end_frame, &meta);
        match res {
            Ok(r) => {
                reports.push(SegmentReport {
                    id: seg.id.clone(),
                    start_frame: seg.start_frame,
                    end_frame: seg.end_frame,
                    start_s,
                    end_s,
                    status: "ok".into(),
                    error: None,
                    speaker_count: Some(r.count()),
                    global_speakers: Vec::new(),
                    fusion_events: r.events.clone(),
                    loglik_trace: r.loglik_trace.clone(),
                    warnings: r.warnings.clone(),
                });
                ok.push(r);
            }
            Err(err) => {
                log::warn!("segment {} failed: {err}", seg.id);
                reports.push(SegmentReport {
                    id: seg.id.clone(),
                    start_frame: seg.start_frame,
                    end_frame: seg.end_frame,
                    start_s,
                    end_s,
                    status: "failed".into(),
                    error: Some(err.to_string()),
                    speaker_count: None,
                    global_speakers: Vec::new(),
                    fusion_events: Vec::new(),
                    loglik_trace: Vec::new(),
                    warnings: Vec::new(),
                });
            }
        }
    }

    let protos: Vec<Array2<f64>> = ok.iter().map(|r| r.prototypes.clone()).collect();
    let labels = align_segments(&protos, cfg.k_total, cfg.alignment_restarts, cfg.seed)?;
    let n_global = labels.iter().flatten().map(|&g| g + 1).max().unwrap_or(0);
    let mut entries = Vec::new();
    let mut separated = vec![vec![0.0; audio.len()]; n_global];
    for (r, lab) in ok.iter().zip(&labels) {
        if let Some(rep) = reports.iter_mut().find(|rep| rep.id == r.segment.id) {
            rep.global_speakers = lab.clone();
        }
        let base = r.segment.start_frame;
        for (i, ivs) in r.intervals.iter().enumerate() {
            let g = lab[i];
            for &(s, e) in ivs {
                entries.push(DiarizationEntry {
                    speaker: g,
                    start_s: frame_start_s(base + s, &meta),
                    end_s: frame_start_s(base + e, &meta),
                    segment_id: r.segment.id.clone(),
                });
            }
            if let Some(sig) = r.separated.get(i) {
                let off = base * meta.hop;
                let ctx = (cfg.context_s * meta.sample_rate as f64).round() as usize;
                let lead = (meta.window_len - meta.hop) / 2;
                let mut keep = vec![false; sig.len()];
                for &(s, e) in ivs {
                    let s0 = (s * meta.hop + lead).saturating_sub(ctx);
                    let s1 = (e * meta.hop + lead + ctx).min(sig.len());
                    keep[s0.min(s1)..s1].fill(true);
                }
                for (n, (&v, &on)) in sig.iter().zip(&keep).enumerate() {
                    if on && off + n < audio.len() {
                        separated[g][off + n] += v;
                    }
                }
            }
        }
    }
    entries.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.speaker.cmp(&b.speaker)));
    let n_failed = reports.iter().filter(|r| r.status != "ok").count();
    Ok(MeetingOutput {
        diarization: Diarization { entries },
        separated,
        report: MeetingReport {
            n_frames: nt,
            n_segments: segments.len(),
            n_failed,
            n_global_speakers: n_global,
            segments: reports,
            notes,
        },
        segments: ok,
        sample_rate: audio.sample_rate(),
    })
}

fn global_mixture(
    segments: &[SegmentSpec],
    e: &EmbeddingSequence,
    vad: &VadMask,
    cfg: &PipelineConfig,
) -> Result<VmfMixture> {
    let voiced: Vec<usize> = segments
        .iter()
        .flat_map(|s| s.start_frame..s.end_frame)
        .filter(|&t| vad.frames[t])
        .collect();
    let ev = e.select(&voiced);
    let k = cfg.k_init.min(voiced.len()).max(1);
    let km = spherical_kmeans_pp(ev.frames(), k, cfg.seed)?;
    let init = smoothed_one_hot(&km.assignment, k, 0.01);
    let fit = vmfmm_em(
        &ev,
        init.view(),
        &VmfEmConfig {
            iterations: cfg.init_iterations,
            kappa_max: cfg.em.kappa_max,
            prior_mode: PriorMode::Static,
            tempering: 1.0,
            seed: cfg.seed,
        },
    )?;
    let mut mix = fit.mixture;
    if let Priors::Static(p) = &mix.priors {
        mix.priors = Priors::Static(p.clone());
    }
    Ok(mix)
}

/// Prototype rows for tests and callers holding plain vectors.
pub fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}
