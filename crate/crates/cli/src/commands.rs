use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mixsep::frontend::{frame_count, ingest_embeddings, AlignmentAction, AudioBuffer};
use mixsep::metrics::{counting_matrix, der, mask_auc, read_rttm, write_rttm, Annotation, DerBreakdown, MAX_COUNT};
use mixsep::pipeline::{
    global_speaker_name, read_masks, run_meeting, write_masks, MeetingReport, PipelineConfig,
};
use mixsep::synth::{build_meeting, bundle, write_bundle, ScenarioConfig, TruthSummary};
use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{InputSpec, RunConfig};

pub const REPORT: &str = "report.json";
pub const RTTM: &str = "diarization.rttm";
pub const MASK_DIR: &str = "masks";
pub const RUN_CONFIG: &str = "run.json";

/// Outcome of a command that did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PartialFailure,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub input: String,
    pub config: RunConfig,
    pub embedding_alignment: AlignmentAction,
    pub sample_rate: u32,
    pub meeting: MeetingReport,
}

pub fn cmd_run(config: &Path, jobs: Option<usize>, seed: Option<u64>) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    cfg.validate()?;
    for input in &cfg.inputs {
        for p in [&input.audio, &input.embeddings] {
            if !p.exists() {
                bail!("input file not found: {}", p.display());
            }
        }
    }
    let mut outcome = Outcome::Success;
    for input in &cfg.inputs {
        let report = run_input(&cfg, input).with_context(|| format!("recording {}", input.id))?;
        if report.meeting.n_failed > 0 {
            for seg in report.meeting.segments.iter().filter(|s| s.status != "ok") {
                log::error!(
                    "{}: segment {} failed: {}",
                    input.id,
                    seg.id,
                    seg.error.as_deref().unwrap_or("unknown error")
                );
            }
            outcome = Outcome::PartialFailure;
        }
    }
    Ok(outcome)
}

fn run_input(cfg: &RunConfig, input: &InputSpec) -> anyhow::Result<RunReport> {
    let audio = AudioBuffer::read_wav(&input.audio)?;
    let meta = cfg.pipeline.stft.meta(audio.sample_rate())?;
    let nt = frame_count(audio.len(), &meta);
    let (embeddings, action) = ingest_embeddings(&input.embeddings, nt, cfg.embedding_dim, meta.frame_rate())?;
    log::info!(
        "{}: {} channels, {:.1} s, {} frames",
        input.id,
        audio.n_channels(),
        audio.duration_s(),
        nt
    );
    let out = run_meeting(&audio, &embeddings, &cfg.pipeline, cfg.jobs)?;

    let dir = cfg.output_dir.join(&input.id);
    let masks = dir.join(MASK_DIR);
    std::fs::create_dir_all(&masks).with_context(|| format!("cannot create {}", masks.display()))?;
    write_rttm(&dir.join(RTTM), &input.id, &out.diarization.to_annotation())?;
    for seg in &out.segments {
        write_masks(&masks.join(format!("{}.msk", seg.segment.id)), &seg.posterior.gamma)?;
    }
    for (g, track) in out.separated.iter().enumerate() {
        let samples = ndarray::Array2::from_shape_vec((1, track.len()), track.clone())?;
        AudioBuffer::new(samples, out.sample_rate)?.write_wav(&dir.join(format!("{}.wav", global_speaker_name(g))))?;
    }
    let report = RunReport {
        input: input.id.clone(),
        config: cfg.clone(),
        embedding_alignment: action,
        sample_rate: out.sample_rate,
        meeting: out.report,
    };
    let path = dir.join(REPORT);
    std::fs::write(&path, serde_json::to_vec_pretty(&report)?).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(report)
}

pub fn cmd_synth(scenario: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(scenario).with_context(|| format!("cannot read scenario {}", scenario.display()))?;
    let cfg: ScenarioConfig =
        serde_json::from_str(&text).with_context(|| format!("invalid scenario {}", scenario.display()))?;
    let meeting = build_meeting(&cfg)?;
    write_bundle(&meeting, &cfg, out)?;
    if let Some(audio) = &cfg.audio {
        let run = RunConfig {
            inputs: vec![InputSpec {
                id: bundle::RECORDING_ID.into(),
                audio: bundle::MIXTURE.into(),
                embeddings: bundle::EMBEDDINGS.into(),
            }],
            output_dir: PathBuf::from("out"),
            jobs: 1,
            embedding_dim: Some(cfg.emb_dim),
            pipeline: PipelineConfig {
                stft: audio.stft,
                seed: cfg.seed,
                ..PipelineConfig::default()
            },
        };
        let path = out.join(RUN_CONFIG);
        std::fs::write(&path, serde_json::to_vec_pretty(&run)?).with_context(|| format!("cannot write {}", path.display()))?;
    } else {
        log::info!("scenario has no audio section; the bundle has no waveform and no run config");
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Serialize)]
pub struct CountingSummary {
    pub matrix: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    /// Segments whose estimated count fell outside 1..=8.
    pub out_of_range: usize,
}

#[derive(Debug, Serialize)]
pub struct ScoreReport {
    pub collar_s: f64,
    pub der: DerBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counting: Option<CountingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_auc: Option<f64>,
    pub notes: Vec<String>,
}

/// Minimum hypothesis speech inside a reference segment for the speaker to
/// count as present there.
const COUNT_MIN_SPEECH_S: f64 = 0.5;

pub fn cmd_score(reference: &Path, hypothesis: &Path, bundle_dir: Option<&Path>, collar_s: f64) -> anyhow::Result<ScoreReport> {
    let r = read_rttm(reference)?;
    let h = read_rttm(hypothesis)?;
    let mut notes = vec![format!(
        "collar {collar_s} s around reference boundaries, overlapping speech scored"
    )];
    let d = der(&r, &h, collar_s)?;
    let (mut counting, mut auc) = (None, None);
    if let Some(dir) = bundle_dir {
        let path = dir.join(bundle::TRUTH);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let truth: TruthSummary = serde_json::from_str(&text).with_context(|| format!("invalid {}", path.display()))?;
        counting = Some(score_counts(&truth, &h)?);
        notes.push(format!(
            "estimated count = hypothesis speakers with at least {COUNT_MIN_SPEECH_S} s of speech inside the reference segment"
        ));
        match score_masks(dir, hypothesis)? {
            Some(v) => auc = Some(v),
            None => notes.push("no hypothesis masks next to the hypothesis RTTM; mask AUC skipped".into()),
        }
    }
    Ok(ScoreReport {
        collar_s,
        der: d,
        counting,
        mask_auc: auc,
        notes,
    })
}

fn score_counts(truth: &TruthSummary, hyp: &Annotation) -> anyhow::Result<CountingSummary> {
    let (mut truths, mut estimates) = (Vec::new(), Vec::new());
    let mut out_of_range = 0;
    for seg in &truth.segments {
        let est = hyp
            .speakers()
            .iter()
            .filter(|spk| {
                let time: f64 = hyp
                    .turns
                    .iter()
                    .filter(|t| &t.speaker == *spk)
                    .map(|t| (t.end_s.min(seg.end_s) - t.start_s.max(seg.start_s)).max(0.0))
                    .sum();
                time >= COUNT_MIN_SPEECH_S
            })
            .count();
        if (1..=MAX_COUNT).contains(&est) && (1..=MAX_COUNT).contains(&seg.count) {
            truths.push(seg.count);
            estimates.push(est);
        } else {
            out_of_range += 1;
        }
    }
    let m = counting_matrix(&truths, &estimates)?;
    Ok(CountingSummary {
        matrix: m.counts.iter().map(|r| r.to_vec()).collect(),
        accuracy: m.accuracy(),
        correct: m.trace(),
        total: m.total(),
        out_of_range,
    })
}

/// Voiced-frame weighted mean of the per-segment mask AUCs, using the masks
/// and report written by `run` next to the hypothesis RTTM.
fn score_masks(bundle_dir: &Path, hypothesis: &Path) -> anyhow::Result<Option<f64>> {
    let run_dir = hypothesis.parent().unwrap_or(Path::new("."));
    let report_path = run_dir.join(REPORT);
    if !report_path.exists() || !run_dir.join(MASK_DIR).is_dir() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&report_path).with_context(|| format!("cannot read {}", report_path.display()))?;
    let report: RunReport = serde_json::from_str(&text).with_context(|| format!("invalid {}", report_path.display()))?;
    let truth = read_masks(&bundle_dir.join(bundle::MASKS))?.mapv(|v| v > 0.5);
    let (mut total, mut weight) = (0.0, 0.0);
    for seg in report.meeting.segments.iter().filter(|s| s.status == "ok") {
        let gamma = read_masks(&run_dir.join(MASK_DIR).join(format!("{}.msk", seg.id)))?;
        if seg.end_frame > truth.dim().1 {
            bail!("segment {} extends past the truth masks", seg.id);
        }
        let t = truth.slice(s![.., seg.start_frame..seg.end_frame, ..]).to_owned();
        let voiced: Vec<bool> = t.axis_iter(Axis(1)).map(|f| f.iter().any(|&b| b)).collect();
        let n = voiced.iter().filter(|&&v| v).count() as f64;
        if let Ok(v) = mask_auc(&gamma, &t, &voiced) {
            total += v * n;
            weight += n;
        }
    }
    Ok((weight > 0.0).then(|| total / weight))
}
