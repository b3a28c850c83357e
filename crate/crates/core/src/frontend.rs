//! Signal ingestion: audio files, STFT/iSTFT, energy VAD, embedding files
//! and segmentation into processing blocks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::cacg::{StftMeta, StftTensor};
use crate::error::{Error, Result};
use crate::vmf::EmbeddingSequence;

/// Multichannel waveform, `C x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid_input("sample rate must be positive"));
        }
        if samples.nrows() == 0 {
            return Err(Error::invalid_input("audio needs at least one channel"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.mapv(|v| v * gain),
            sample_rate: self.sample_rate,
        }
    }

    /// Reads PCM 16/24/32-bit integer or 32-bit float WAV. Integer samples
    /// are scaled to `[-1, 1)`.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        let channels = spec.channels as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => {
                if spec.bits_per_sample != 32 {
                    return Err(Error::format(path, "only 32-bit float WAV is supported"));
                }
                reader
                    .into_samples::<f32>()
                    .map(|s| s.map(f64::from))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| wav_error(path, e))?
            }
            hound::SampleFormat::Int => {
                let bits = spec.bits_per_sample;
                if !matches!(bits, 16 | 24 | 32) {
                    return Err(Error::format(path, format!("unsupported PCM width {bits}")));
                }
                let scale = 1.0 / (1u64 << (bits - 1)) as f64;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 * scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| wav_error(path, e))?
            }
        };
        if channels == 0 {
            return Err(Error::format(path, "WAV declares zero channels"));
        }
        let n = interleaved.len() / channels;
        let samples = Array2::from_shape_fn((channels, n), |(c, i)| interleaved[i * channels + c]);
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: self.n_channels() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for i in 0..self.len() {
            for c in 0..self.n_channels() {
                writer
                    .write_sample(self.samples[(c, i)] as f32)
                    .map_err(|e| wav_error(path, e))?;
            }
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_ms: f64,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_ms: 64.0,
            window_ms: 50.0,
            hop_ms: 16.0,
        }
    }
}

impl StftConfig {
    /// Sizes in samples at `sample_rate`; every duration must map to a whole
    /// number of samples.
    pub fn meta(&self, sample_rate: u32) -> Result<StftMeta> {
        let to_samples = |ms: f64, name: &str| -> Result<usize> {
            let n = ms * sample_rate as f64 / 1000.0;
            if !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
                return Err(Error::invalid_config(format!(
                    "{name} of {ms} ms is not a whole number of samples at {sample_rate} Hz"
                )));
            }
            Ok(n.round() as usize)
        };
        let fft_len = to_samples(self.fft_ms, "FFT size")?;
        let window_len = to_samples(self.window_ms, "window")?;
        let hop = to_samples(self.hop_ms, "shift")?;
        if window_len > fft_len {
            return Err(Error::invalid_config("window must not exceed the FFT size"));
        }
        if hop > window_len {
            return Err(Error::invalid_config("shift must not exceed the window"));
        }
        Ok(StftMeta {
            sample_rate,
            fft_len,
            window_len,
            hop,
        })
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of full frames in `n` samples.
pub fn frame_count(n: usize, meta: &StftMeta) -> usize {
    if n < meta.window_len {
        0
    } else {
        (n - meta.window_len) / meta.hop + 1
    }
}

/// Start time in seconds of the hop-length interval represented by frame
/// `t` (frames are centered on their window).
pub fn frame_start_s(t: usize, meta: &StftMeta) -> f64 {
    (t * meta.hop) as f64 / meta.sample_rate as f64 + frame_offset_s(meta)
}

fn frame_offset_s(meta: &StftMeta) -> f64 {
    (meta.window_len - meta.hop) as f64 / 2.0 / meta.sample_rate as f64
}

/// Frame whose interval contains time `s` (clamped at zero).
pub fn seconds_to_frame(s: f64, meta: &StftMeta) -> usize {
    let x = (s - frame_offset_s(meta)) * meta.frame_rate();
    if x <= 0.0 {
        0
    } else {
        x.floor() as usize
    }
}

struct Transform {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transform {
    fn new(meta: &StftMeta) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(meta.window_len),
            forward: planner.plan_fft_forward(meta.fft_len),
            inverse: planner.plan_fft_inverse(meta.fft_len),
        }
    }
}

/// Hann-windowed, zero-padded STFT of every channel. Audio shorter than one
/// window yields a tensor with zero frames.
pub fn stft(a: &AudioBuffer, cfg: &StftConfig) -> Result<StftTensor> {
    let meta = cfg.meta(a.sample_rate)?;
    let nt = frame_count(a.len(), &meta);
    let nf = meta.fft_len / 2 + 1;
    let nc = a.n_channels();
    let tr = Transform::new(&meta);
    let mut data = Array3::zeros((nf, nt, nc));
    let mut buf = vec![Complex64::new(0.0, 0.0); meta.fft_len];
    for c in 0..nc {
        let x = a.samples.row(c);
        for t in 0..nt {
            buf.fill(Complex64::new(0.0, 0.0));
            let start = t * meta.hop;
            for (n, w) in tr.window.iter().enumerate() {
                buf[n] = Complex64::new(x[start + n] * w, 0.0);
            }
            tr.forward.process(&mut buf);
            for f in 0..nf {
                data[(f, t, c)] = buf[f];
            }
        }
    }
    StftTensor::new(data, meta)
}

/// Inverse of [`stft`] for one channel (`F x T`): windowed overlap-add
/// normalized by the summed squared window, which reconstructs the input
/// exactly wherever at least one window is non-zero.
pub fn istft(spec: ArrayView2<Complex64>, meta: &StftMeta, len: Option<usize>) -> Result<Vec<f64>> {
    let (nf, nt) = spec.dim();
    if nf != meta.fft_len / 2 + 1 {
        return Err(Error::invalid_input("frequency count does not match FFT size"));
    }
    let natural = if nt == 0 { 0 } else { (nt - 1) * meta.hop + meta.window_len };
    let len = len.unwrap_or(natural);
    let tr = Transform::new(meta);
    let mut out = vec![0.0; len.max(natural)];
    let mut norm = vec![0.0; len.max(natural)];
    let mut buf = vec![Complex64::new(0.0, 0.0); meta.fft_len];
    let scale = 1.0 / meta.fft_len as f64;
    for t in 0..nt {
        for f in 0..nf {
            buf[f] = spec[(f, t)];
        }
        for f in nf..meta.fft_len {
            buf[f] = spec[(meta.fft_len - f, t)].conj();
        }
        tr.inverse.process(&mut buf);
        let start = t * meta.hop;
        for (n, w) in tr.window.iter().enumerate() {
            out[start + n] += buf[n].re * scale * w;
            norm[start + n] += w * w;
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        if *d > 1e-10 {
            *o /= d;
        } else {
            *o = 0.0;
        }
    }
    out.truncate(len);
    Ok(out)
}

/// Per-frame voice activity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask {
    pub frames: Vec<bool>,
}

impl VadMask {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.frames.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub window_s: f64,
    pub threshold_db: f64,
    pub closing_s: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            window_s: 1.5,
            threshold_db: 10.0,
            closing_s: 0.2,
        }
    }
}

/// Minimum-statistics energy VAD on channel 0, framed like [`stft`].
///
/// Frame energy is the Hann-weighted energy, smoothed over three frames. The
/// noise floor is the minimum smoothed energy in a centered window of
/// `window_s`; a frame is voiced if it exceeds the floor by `threshold_db`.
/// Frames with exactly zero energy are never voiced; frames with non-finite
/// energy are kept voiced so downstream validation sees them. Gaps shorter
/// than `closing_s` between voiced frames are closed.
pub fn energy_vad(a: &AudioBuffer, stft_cfg: &StftConfig, cfg: &VadConfig) -> Result<VadMask> {
    let meta = stft_cfg.meta(a.sample_rate)?;
    let nt = frame_count(a.len(), &meta);
    let w = hann(meta.window_len);
    let x = a.samples.row(0);
    let energy: Vec<f64> = (0..nt)
        .map(|t| {
            let start = t * meta.hop;
            w.iter()
                .enumerate()
                .map(|(n, wn)| (x[start + n] * wn).powi(2))
                .sum::<f64>()
        })
        .collect();
    let smoothed: Vec<f64> = (0..nt)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(nt.saturating_sub(1));
            energy[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let db: Vec<f64> = smoothed.iter().map(|&e| 10.0 * e.log10()).collect();
    let half = ((cfg.window_s * meta.frame_rate()) / 2.0).round() as usize;
    let mut frames = vec![false; nt];
    for t in 0..nt {
        if smoothed[t] == 0.0 {
            continue;
        }
        if !db[t].is_finite() {
            frames[t] = true;
            continue;
        }
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(nt - 1);
        let floor = db[lo..=hi]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        frames[t] = db[t] > floor + cfg.threshold_db;
    }
    let closing = (cfg.closing_s * meta.frame_rate()).round() as usize;
    close_gaps(&mut frames, closing);
    Ok(VadMask { frames })
}

/// Fills runs of `false` shorter than `len` that have `true` on both sides.
pub fn close_gaps(mask: &mut [bool], len: usize) {
    let mut t = 0;
    let n = mask.len();
    while t < n {
        if mask[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && !mask[t] {
            t += 1;
        }
        if start > 0 && t < n && t - start < len {
            mask[start..t].fill(true);
        }
    }
}

/// Contiguous `[start, end)` runs of `true`.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if mask[t] {
            let s = t;
            while t < mask.len() && mask[t] {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Optional JSON sidecar next to an embedding file (`<file>.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingMeta {
    pub frame_rate: f64,
    #[serde(default)]
    pub extractor: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `frames` (`T x E`) in the EMB1 format.
pub fn write_embeddings(path: &Path, frames: ArrayView2<f64>, meta: Option<&EmbeddingMeta>) -> Result<()> {
    let (t, e) = frames.dim();
    let file = File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(16 + 4 * t * e);
    bytes.extend_from_slice(EMB_MAGIC);
    for v in [t as u32, e as u32, 0u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in frames.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|err| Error::io(path, err))?;
    w.flush().map_err(|err| Error::io(path, err))?;
    if let Some(m) = meta {
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(m)?).map_err(|err| Error::io(&side, err))?;
    }
    Ok(())
}

/// Reads a raw EMB1 matrix without normalization.
pub fn read_embedding_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|err| Error::io(path, err))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|err| Error::io(path, err))?;
    if bytes.len() < 16 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::format(path, "missing EMB1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (t, e, reserved) = (word(0) as usize, word(1) as usize, word(2));
    if reserved != 0 {
        return Err(Error::format(path, "reserved header field must be zero"));
    }
    let expected = t
        .checked_mul(e)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {t}x{e} embeddings, found {}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((t, e), values).map_err(|err| Error::format(path, err.to_string()))
}

/// How the embedding frame count was reconciled with the STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum AlignmentAction {
    Identity,
    Truncated { dropped: usize },
    Padded { added: usize },
    Resampled { from: usize, to: usize },
}

/// Reads an embedding file and aligns it to `expected_frames`: differences
/// of up to two frames are truncated or edge-padded, larger ones are resampled
/// to the nearest frame. The frame rate comes from the sidecar if present,
/// else `default_frame_rate`.
pub fn ingest_embeddings(
    path: &Path,
    expected_frames: usize,
    expected_dim: Option<usize>,
    default_frame_rate: f64,
) -> Result<(EmbeddingSequence, AlignmentAction)> {
    let raw = read_embedding_matrix(path)?;
    let (n, e) = raw.dim();
    if let Some(d) = expected_dim {
        if d != e {
            return Err(Error::invalid_input(format!(
                "{}: embedding dimension {e} does not match configured {d}",
                path.display()
            )));
        }
    }
    if let Some(t) = raw.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid_input(format!(
            "{}: embedding row {t} is not finite",
            path.display()
        )));
    }
    if n == 0 && expected_frames > 0 {
        return Err(Error::invalid_input(format!("{}: no embedding frames", path.display())));
    }
    let side = sidecar_path(path);
    let frame_rate = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|err| Error::io(&side, err))?;
        let meta: EmbeddingMeta =
            serde_json::from_str(&text).map_err(|err| Error::format(&side, err.to_string()))?;
        meta.frame_rate
    } else {
        default_frame_rate
    };
    let (aligned, action) = align_rows(raw, expected_frames);
    if action != AlignmentAction::Identity {
        log::info!("{}: embedding frames {:?}", path.display(), action);
    }
    let seq = EmbeddingSequence::new(aligned, frame_rate)
        .map_err(|err| Error::invalid_input(format!("{}: {err}", path.display())))?;
    Ok((seq, action))
}

fn align_rows(raw: Array2<f64>, target: usize) -> (Array2<f64>, AlignmentAction) {
    let n = raw.nrows();
    if n == target {
        return (raw, AlignmentAction::Identity);
    }
    if n > target && n - target <= 2 {
        let out = raw.slice(ndarray::s![..target, ..]).to_owned();
        return (out, AlignmentAction::Truncated { dropped: n - target });
    }
    if target > n && target - n <= 2 {
        let idx: Vec<usize> = (0..target).map(|t| t.min(n - 1)).collect();
        return (raw.select(ndarray::Axis(0), &idx), AlignmentAction::Padded { added: target - n });
    }
    let idx: Vec<usize> = (0..target)
        .map(|t| ((((t as f64 + 0.5) * n as f64) / target as f64).floor() as usize).min(n - 1))
        .collect();
    (
        raw.select(ndarray::Axis(0), &idx),
        AlignmentAction::Resampled { from: n, to: target },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub start_frame: usize,
    pub end_frame: usize,
    pub id: String,
}

impl SegmentSpec {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame == self.start_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub max_pause_s: f64,
    pub min_len_s: f64,
    pub max_len_s: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            max_pause_s: 1.0,
            min_len_s: 2.0,
            max_len_s: 60.0,
        }
    }
}

/// Splits voiced activity into processing segments. Pauses longer than
/// `max_pause_s` always cut. Voiced runs separated by shorter pauses are
/// merged greedily while the merged span stays within `max_len_s`; single
/// runs longer than that are cut into `max_len_s` pieces. Segments shorter
/// than `min_len_s` are dropped.
pub fn split_segments(vad: &VadMask, frame_rate: f64, cfg: &SegmentConfig) -> Vec<SegmentSpec> {
    let max_pause = cfg.max_pause_s * frame_rate;
    let max_len = ((cfg.max_len_s * frame_rate).floor() as usize).max(1);
    let min_len = cfg.min_len_s * frame_rate;
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs(&vad.frames) {
        if let Some(last) = spans.last_mut() {
            let pause = (s - last.1) as f64;
            if pause <= max_pause && e - last.0 <= max_len {
                last.1 = e;
                continue;
            }
        }
        spans.push((s, e));
    }
    let mut pieces = Vec::new();
    for (s, e) in spans {
        let mut start = s;
        while e - start > max_len {
            pieces.push((start, start + max_len));
            start += max_len;
        }
        pieces.push((start, e));
    }
    pieces
        .into_iter()
        .filter(|(s, e)| (e - s) as f64 >= min_len)
        .enumerate()
        .map(|(i, (s, e))| SegmentSpec {
            start_frame: s,
            end_frame: e,
            id: format!("seg{i:04}"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(c: usize, n: usize, seed: u64, sr: u32) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new(
            Array2::from_shape_fn((c, n), |_| rng.sample::<f64, _>(StandardNormal)),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn paper_configuration_sizes() {
        let meta = StftConfig::default().meta(16000).unwrap();
        assert_eq!(meta.fft_len, 1024);
        assert_eq!(meta.window_len, 800);
        assert_eq!(meta.hop, 256);
        let x = noise(1, 16000, 0, 16000);
        let s = stft(&x, &StftConfig::default()).unwrap();
        assert_eq!(s.n_freqs(), 513);
        assert_eq!(s.n_frames(), (16000 - 800) / 256 + 1);
    }

    #[test]
    fn rejects_fractional_sizes() {
        let cfg = StftConfig {
            hop_ms: 16.3,
            ..Default::default()
        };
        assert!(cfg.meta(16000).is_err());
    }

    #[test]
    fn sinusoid_energy_concentrates_at_its_bin() {
        // Window equal to the FFT size so that bin centers are exact.
        let cfg = StftConfig {
            fft_ms: 64.0,
            window_ms: 64.0,
            hop_ms: 16.0,
        };
        let sr = 16000;
        let bin = 37.0;
        let freq = bin * sr as f64 / 1024.0;
        let n = 8000;
        let samples = Array2::from_shape_fn((1, n), |(_, i)| {
            (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()
        });
        let s = stft(&AudioBuffer::new(samples, sr).unwrap(), &cfg).unwrap();
        for t in 0..s.n_frames() {
            let total: f64 = (0..s.n_freqs()).map(|f| s.bin(f, t)[0].norm_sqr()).sum();
            let near: f64 = (36..=38).map(|f| s.bin(f, t)[0].norm_sqr()).sum();
            assert!(near / total > 0.99);
        }
    }

    #[test]
    fn round_trip_reconstructs_interior() {
        let x = noise(2, 9000, 1, 16000);
        let s = stft(&x, &StftConfig::default()).unwrap();
        for c in 0..2 {
            let spec = s.data().slice(ndarray::s![.., .., c]).to_owned();
            let y = istft(spec.view(), &s.meta(), Some(x.len())).unwrap();
            let covered = (s.n_frames() - 1) * 256 + 800;
            let mut err = 0.0;
            let mut ref_e = 0.0;
            for i in 1..covered - 1 {
                err += (y[i] - x.samples()[(c, i)]).powi(2);
                ref_e += x.samples()[(c, i)].powi(2);
            }
            assert!((err / ref_e).sqrt() < 1e-6);
        }
    }

    #[test]
    fn stft_is_linear() {
        let a = noise(2, 4000, 2, 16000);
        let b = noise(2, 4000, 3, 16000);
        let sum = AudioBuffer::new(&a.samples() + &b.samples(), 16000).unwrap();
        let cfg = StftConfig::default();
        let (sa, sb, ss) = (stft(&a, &cfg).unwrap(), stft(&b, &cfg).unwrap(), stft(&sum, &cfg).unwrap());
        for ((x, y), z) in sa.data().iter().zip(sb.data().iter()).zip(ss.data().iter()) {
            assert!((x + y - z).norm() < 1e-9);
        }
    }

    #[test]
    fn short_audio_gives_empty_tensor() {
        let x = noise(2, 100, 0, 16000);
        let s = stft(&x, &StftConfig::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn silence_is_unvoiced() {
        let x = AudioBuffer::new(Array2::zeros((1, 32000)), 16000).unwrap();
        let vad = energy_vad(&x, &StftConfig::default(), &VadConfig::default()).unwrap();
        assert!(vad.frames.iter().all(|v| !v));
        assert_eq!(vad.len(), frame_count(32000, &StftConfig::default().meta(16000).unwrap()));
    }

    #[test]
    fn stationary_noise_is_unvoiced() {
        let x = noise(1, 16000 * 5, 4, 16000);
        let vad = energy_vad(&x, &StftConfig::default(), &VadConfig::default()).unwrap();
        assert_eq!(vad.voiced_count(), 0);
    }

    fn bursts() -> (AudioBuffer, Vec<(f64, f64)>) {
        let sr = 16000;
        let n = sr as usize * 12;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spans = vec![(1.0, 2.5), (4.0, 6.0), (8.2, 10.5)];
        let floor = 10f64.powf(-40.0 / 20.0);
        let samples = Array2::from_shape_fn((1, n), |(_, i)| {
            let t = i as f64 / sr as f64;
            let mut v = floor * rng.sample::<f64, _>(StandardNormal);
            // Syllables of 0.2 s separated by 0.08 s pauses at the floor.
            if let Some(&(s, _)) = spans.iter().find(|&&(s, e)| t >= s && t < e) {
                let phase = (t - s) % 0.28;
                if phase < 0.2 {
                    let env = (std::f64::consts::PI * phase / 0.2).sin().sqrt();
                    v += env
                        * (0.3 * (2.0 * std::f64::consts::PI * 180.0 * t).sin()
                            + 0.1 * rng.sample::<f64, _>(StandardNormal));
                }
            }
            v
        });
        (AudioBuffer::new(samples, sr).unwrap(), spans)
    }

    #[test]
    fn speech_bursts_are_detected() {
        let (x, spans) = bursts();
        let cfg = StftConfig::default();
        let meta = cfg.meta(16000).unwrap();
        let vad = energy_vad(&x, &cfg, &VadConfig::default()).unwrap();
        let correct = (0..vad.len())
            .filter(|&t| {
                let mid = frame_start_s(t, &meta) + 0.008;
                let truth = spans.iter().any(|&(s, e)| mid >= s && mid < e);
                truth == vad.frames[t]
            })
            .count();
        assert!(correct as f64 / vad.len() as f64 >= 0.95, "{correct} of {}", vad.len());
    }

    #[test]
    fn vad_is_gain_invariant() {
        let (x, _) = bursts();
        let cfg = StftConfig::default();
        let base = energy_vad(&x, &cfg, &VadConfig::default()).unwrap();
        for gain in [0.01, 0.5, 3.7, 100.0] {
            assert_eq!(energy_vad(&x.scaled(gain), &cfg, &VadConfig::default()).unwrap(), base);
        }
    }

    #[test]
    fn closing_fills_short_gaps_only() {
        let mut m = vec![true, false, false, true, false, false, false, false, true, false];
        close_gaps(&mut m, 3);
        assert_eq!(m, vec![true, true, true, true, false, false, false, false, true, false]);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let x = noise(3, 500, 6, 8000).scaled(0.1);
        x.write_wav(&path).unwrap();
        let y = AudioBuffer::read_wav(&path).unwrap();
        assert_eq!(y.n_channels(), 3);
        assert_eq!(y.sample_rate(), 8000);
        for (a, b) in x.samples().iter().zip(y.samples().iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn pcm16_is_scaled_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [16384i16, -32768, 1, 0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let a = AudioBuffer::read_wav(&path).unwrap();
        assert_eq!(a.samples()[(0, 0)], 0.5);
        assert_eq!(a.samples()[(1, 0)], -1.0);
        assert_eq!(a.samples()[(0, 1)], 1.0 / 32768.0);
        assert_eq!(a.samples()[(1, 1)], 0.0);
    }

    fn write_rows(dir: &Path, rows: usize, dim: usize, value: f64) -> PathBuf {
        let path = dir.join("e.emb");
        let m = Array2::from_shape_fn((rows, dim), |(t, j)| if j == t % dim { value } else { 0.0 });
        write_embeddings(&path, m.view(), None).unwrap();
        path
    }

    #[test]
    fn embedding_ingestion_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_rows(dir.path(), 10, 4, 2.0);
        let (seq, act) = ingest_embeddings(&path, 10, Some(4), 62.5).unwrap();
        assert_eq!(act, AlignmentAction::Identity);
        assert_eq!(seq.len(), 10);
        for t in 0..10 {
            assert_relative_eq!(seq.row(t).dot(&seq.row(t)).sqrt(), 1.0, epsilon = 1e-9);
        }
        let (seq, act) = ingest_embeddings(&path, 9, Some(4), 62.5).unwrap();
        assert_eq!(act, AlignmentAction::Truncated { dropped: 1 });
        assert_eq!(seq.row(8)[0], 1.0);
        let (seq, act) = ingest_embeddings(&path, 12, None, 62.5).unwrap();
        assert_eq!(act, AlignmentAction::Padded { added: 2 });
        assert_eq!(seq.row(11), seq.row(9));
        let (seq, act) = ingest_embeddings(&path, 20, None, 62.5).unwrap();
        assert_eq!(act, AlignmentAction::Resampled { from: 10, to: 20 });
        assert_eq!(seq.row(1), seq.row(0));
        assert!(ingest_embeddings(&path, 10, Some(8), 62.5).is_err());
    }

    #[test]
    fn embedding_sidecar_sets_frame_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        let m = Array2::from_elem((3, 2), 1.0);
        let meta = EmbeddingMeta {
            frame_rate: 50.0,
            extractor: Some("oracle".into()),
        };
        write_embeddings(&path, m.view(), Some(&meta)).unwrap();
        let (seq, _) = ingest_embeddings(&path, 3, None, 62.5).unwrap();
        assert_eq!(seq.frame_rate(), 50.0);
    }

    #[test]
    fn embedding_nan_and_corruption_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.emb");
        let mut m = Array2::from_elem((3, 2), 1.0);
        m[(1, 0)] = f64::NAN;
        write_embeddings(&path, m.view(), None).unwrap();
        assert!(matches!(ingest_embeddings(&path, 3, None, 62.5), Err(Error::InvalidInput(_))));
        std::fs::write(&path, b"EMB1\x01\x00").unwrap();
        assert!(matches!(ingest_embeddings(&path, 3, None, 62.5), Err(Error::Format { .. })));
    }

    fn mask_from(spans: &[(usize, usize)], n: usize) -> VadMask {
        let mut frames = vec![false; n];
        for &(s, e) in spans {
            frames[s..e].fill(true);
        }
        VadMask { frames }
    }

    #[test]
    fn segmentation_examples() {
        let cfg = SegmentConfig {
            max_pause_s: 1.0,
            min_len_s: 2.0,
            max_len_s: 60.0,
        };
        let fr = 10.0;
        let one = split_segments(&mask_from(&[(5, 305)], 400), fr, &cfg);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].start_frame, one[0].end_frame), (5, 305));
        let two = split_segments(&mask_from(&[(0, 50), (100, 150)], 200), fr, &cfg);
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn five_bursts_give_three_segments() {
        // Pauses at 10 frames/s: 5 (short), 20 (long), 8 (short), 15 (long).
        let cfg = SegmentConfig {
            max_pause_s: 1.0,
            min_len_s: 2.0,
            max_len_s: 60.0,
        };
        let mask = mask_from(&[(0, 30), (35, 60), (80, 110), (118, 140), (155, 185)], 200);
        let segs = split_segments(&mask, 10.0, &cfg);
        let bounds: Vec<(usize, usize)> = segs.iter().map(|s| (s.start_frame, s.end_frame)).collect();
        assert_eq!(bounds, vec![(0, 60), (80, 140), (155, 185)]);
        assert_eq!(segs[2].id, "seg0002");
    }

    #[test]
    fn long_runs_are_cut_and_short_segments_dropped() {
        let cfg = SegmentConfig {
            max_pause_s: 1.0,
            min_len_s: 2.0,
            max_len_s: 10.0,
        };
        let segs = split_segments(&mask_from(&[(0, 250), (300, 310)], 400), 10.0, &cfg);
        let bounds: Vec<(usize, usize)> = segs.iter().map(|s| (s.start_frame, s.end_frame)).collect();
        assert_eq!(bounds, vec![(0, 100), (100, 200), (200, 250)]);
    }
}
