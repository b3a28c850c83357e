use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use mixsep::frontend::AudioBuffer;
use mixsep::metrics::read_rttm;
use serde_json::{json, Value};

fn mixsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixsep"))
        .args(args)
        .env("MIXSEP_LOG", "error")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
}

fn audio_scenario(seed: u64) -> Value {
    json!({
        "k_true": 2,
        "channels": 3,
        "emb_dim": 16,
        "segments": [
            {"active": [0, 1], "duration_s": 6.0},
            {"active": [0, 1], "duration_s": 6.0}
        ],
        "overlap": 0.1,
        "audio": {},
        "seed": seed
    })
}

fn synth(dir: &Path, scenario: &Value) -> PathBuf {
    let sc = dir.join("scenario.json");
    write_json(&sc, scenario);
    let out = dir.join("bundle");
    let o = mixsep(&["synth", "--scenario", path_str(&sc), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_byte_identical_under_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = audio_scenario(5);
    let x = dir_bytes(&synth(a.path(), &s));
    let y = dir_bytes(&synth(b.path(), &s));
    assert!(x.iter().any(|(n, _)| n == "mixture.wav"));
    assert_eq!(x, y);
}

#[test]
fn zero_overlap_scenario_has_disjoint_reference_turns() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = json!({
        "k_true": 3, "channels": 2, "emb_dim": 8, "n_freqs": 9,
        "segments": [{"active": [0, 1, 2], "duration_s": 9.0}, {"active": [1, 2], "duration_s": 6.0}],
        "overlap": 0.0, "seed": 2
    });
    let out = synth(dir.path(), &scenario);
    let mut turns = read_rttm(&out.join("reference.rttm")).unwrap().turns;
    turns.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    assert!(turns.len() >= 5);
    for w in turns.windows(2) {
        assert!(w[0].end_s <= w[1].start_s, "{:?} overlaps {:?}", w[0], w[1]);
    }
    // Direct-mode bundles carry no audio and no run config.
    assert!(!out.join("mixture.wav").exists());
    assert!(!out.join("run.json").exists());
}

#[test]
fn run_then_score_emits_all_metric_families() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &audio_scenario(3));
    let cfg = bundle.join("run.json");
    let o = mixsep(&["run", "--config", path_str(&cfg), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = bundle.join("out").join("meeting");
    let hyp = run_dir.join("diarization.rttm");
    for name in ["diarization.rttm", "report.json", "speaker0.wav", "speaker1.wav"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    assert!(std::fs::read_dir(run_dir.join("masks")).unwrap().count() >= 1);
    let report: Value = serde_json::from_slice(&std::fs::read(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["pipeline"]["em"]["tau_spectral"], json!(0.7));
    assert_eq!(report["meeting"]["n_failed"], json!(0));

    let reference = bundle.join("reference.rttm");
    let o = mixsep(&["score", "--ref", path_str(&reference), "--hyp", path_str(&hyp), "--bundle", path_str(&bundle)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let score: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(score["der"]["der"].as_f64().unwrap() < 0.2, "{score}");
    assert!(score["counting"]["accuracy"].is_number());
    assert!(score["mask_auc"].as_f64().unwrap() > 0.8, "{score}");

    let o = mixsep(&["score", "--ref", path_str(&reference), "--hyp", path_str(&reference)]);
    let score: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(score["der"]["der"], json!(0.0));
}

#[test]
fn missing_embedding_file_is_fatal_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &audio_scenario(4));
    std::fs::remove_file(bundle.join("embeddings.emb")).unwrap();
    let o = mixsep(&["run", "--config", path_str(&bundle.join("run.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("embeddings.emb"));
}

#[test]
fn corrupt_segment_yields_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth(dir.path(), &audio_scenario(6));
    let wav = bundle.join("mixture.wav");
    let audio = AudioBuffer::read_wav(&wav).unwrap();
    let sr = audio.sample_rate() as f64;
    let mut samples = audio.samples().to_owned();
    // Inside the second segment (segments start at 1 s, 6 s long, 2 s pause).
    let start = (11.0 * sr) as usize;
    for n in start..start + 800 {
        samples[(0, n)] = f64::NAN;
    }
    AudioBuffer::new(samples, audio.sample_rate()).unwrap().write_wav(&wav).unwrap();
    let o = mixsep(&["run", "--config", path_str(&bundle.join("run.json"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_slice(&std::fs::read(bundle.join("out/meeting/report.json")).unwrap()).unwrap();
    let segs = report["meeting"]["segments"].as_array().unwrap();
    assert!(segs.len() >= 2);
    assert_eq!(segs.iter().filter(|s| s["status"] == "failed").count(), 1);
    assert!(segs.iter().any(|s| s["status"] == "ok"));
}

#[test]
fn malformed_rttm_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.rttm");
    let bad = dir.path().join("bad.rttm");
    std::fs::write(&good, "SPEAKER m 1 0.000 1.000 <NA> <NA> a <NA> <NA>\n").unwrap();
    std::fs::write(&bad, "SPEAKER m 1 0.000 1.000 <NA> <NA> a <NA> <NA>\nSPEAKER m 1 zero 1.0 <NA> <NA> b <NA> <NA>\n").unwrap();
    let o = mixsep(&["score", "--ref", path_str(&good), "--hyp", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_config_key_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write_json(&cfg, &json!({"inputs": [], "output_dir": "o", "kappa": 1}));
    let o = mixsep(&["run", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn counting_scale_scenario_synthesizes_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = json!({
        "k_true": 8, "channels": 2, "emb_dim": 16, "n_freqs": 9,
        "random_plan": {"n_segments": 725, "min_active": 1, "max_active": 8, "seconds_per_speaker": 1.5},
        "pause_s": 0.5, "seed": 9
    });
    let start = Instant::now();
    let out = synth(dir.path(), &scenario);
    assert!(start.elapsed().as_secs() < 300);
    let truth: Value = serde_json::from_slice(&std::fs::read(out.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["segments"].as_array().unwrap().len(), 725);
}
