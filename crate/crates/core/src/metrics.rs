//! Scoring: diarization error rate, speaker-counting confusion matrix,
//! permutation-invariant mask AUC and SI-SDR. Also the RTTM reader/writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linear_sum_assignment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub turns: Vec<Turn>,
}

impl Annotation {
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.turns.iter().map(|t| t.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn total_speech(&self) -> f64 {
        self.turns.iter().map(|t| t.end_s - t.start_s).sum()
    }
}

/// Formats RTTM `SPEAKER` lines with 3-decimal times.
pub fn format_rttm(file_id: &str, ann: &Annotation) -> String {
    let mut out = String::new();
    for t in &ann.turns {
        let start = round3(t.start_s);
        let dur = round3(t.end_s) - start;
        let _ = writeln!(
            out,
            "SPEAKER {file_id} 1 {start:.3} {dur:.3} <NA> <NA> {} <NA> <NA>",
            t.speaker
        );
    }
    out
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn write_rttm(path: &Path, file_id: &str, ann: &Annotation) -> Result<()> {
    std::fs::write(path, format_rttm(file_id, ann)).map_err(|e| Error::io(path, e))
}

/// Parses RTTM text. Non-`SPEAKER` records, blank lines and `#` comments
/// are skipped; zero-duration turns are dropped.
pub fn parse_rttm(text: &str, source: &Path) -> Result<Annotation> {
    let mut turns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields[0] != "SPEAKER" {
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::format(
                source,
                format!("line {line_no}: expected at least 8 fields, found {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(source, format!("line {line_no}: invalid {what} '{s}'")))
        };
        let start = num(fields[3], "start time")?;
        let dur = num(fields[4], "duration")?;
        if dur < 0.0 || start < 0.0 {
            return Err(Error::format(source, format!("line {line_no}: negative time")));
        }
        if dur == 0.0 {
            continue;
        }
        turns.push(Turn {
            speaker: fields[7].to_string(),
            start_s: start,
            end_s: start + dur,
        });
    }
    Ok(Annotation { turns })
}

pub fn read_rttm(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerBreakdown {
    pub der: f64,
    /// Times in seconds.
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech: f64,
}

/// Diarization error rate with a no-score collar of `collar_s` around every
/// reference boundary; overlapping speech is scored. Speakers are mapped
/// one-to-one by maximum total overlap.
pub fn der(reference: &Annotation, hypothesis: &Annotation, collar_s: f64) -> Result<DerBreakdown> {
    if !(collar_s >= 0.0) {
        return Err(Error::invalid_input("collar must be non-negative"));
    }
    for t in reference.turns.iter().chain(&hypothesis.turns) {
        if !(t.start_s < t.end_s) || !t.start_s.is_finite() || !t.end_s.is_finite() {
            return Err(Error::invalid_input(format!("invalid turn {t:?}")));
        }
    }
    let mut no_score: Vec<(f64, f64)> = Vec::new();
    if collar_s > 0.0 {
        for t in &reference.turns {
            no_score.push((t.start_s - collar_s, t.start_s + collar_s));
            no_score.push((t.end_s - collar_s, t.end_s + collar_s));
        }
    }
    let mut bounds: Vec<f64> = reference
        .turns
        .iter()
        .chain(&hypothesis.turns)
        .flat_map(|t| [t.start_s, t.end_s])
        .chain(no_score.iter().flat_map(|&(a, b)| [a, b]))
        .collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();

    let ref_ids = index_speakers(reference);
    let hyp_ids = index_speakers(hypothesis);
    let mut overlap = Array2::<f64>::zeros((ref_ids.len(), hyp_ids.len()));
    let mut scored = 0.0;
    let mut miss = 0.0;
    let mut fa = 0.0;
    let mut matched_pairs_bound = 0.0;
    let mut pieces: Vec<(f64, Vec<usize>, Vec<usize>)> = Vec::new();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = b - a;
        if d <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        if no_score.iter().any(|&(s, e)| mid > s && mid < e) {
            continue;
        }
        let r = active_at(reference, &ref_ids, mid);
        let h = active_at(hypothesis, &hyp_ids, mid);
        scored += d * r.len() as f64;
        miss += d * r.len().saturating_sub(h.len()) as f64;
        fa += d * h.len().saturating_sub(r.len()) as f64;
        matched_pairs_bound += d * r.len().min(h.len()) as f64;
        for &ri in &r {
            for &hi in &h {
                overlap[(ri, hi)] += d;
            }
        }
        pieces.push((d, r, h));
    }
    if scored <= 0.0 {
        return Err(Error::invalid_input("reference contains no scored speech"));
    }
    let mapping: Vec<(usize, usize)> = if ref_ids.is_empty() || hyp_ids.is_empty() {
        Vec::new()
    } else {
        linear_sum_assignment(overlap.mapv(|v| -v).view())?
    };
    let correct: f64 = mapping.iter().map(|&(r, h)| overlap[(r, h)]).sum();
    let confusion = (matched_pairs_bound - correct).max(0.0);
    Ok(DerBreakdown {
        der: (miss + fa + confusion) / scored,
        miss,
        false_alarm: fa,
        confusion,
        scored_speech: scored,
    })
}

fn index_speakers(a: &Annotation) -> BTreeMap<String, usize> {
    a.speakers().into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

fn active_at(a: &Annotation, ids: &BTreeMap<String, usize>, t: f64) -> Vec<usize> {
    let mut out: Vec<usize> = a
        .turns
        .iter()
        .filter(|x| x.start_s <= t && t < x.end_s)
        .map(|x| ids[&x.speaker])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub const MAX_COUNT: usize = 8;

/// Tally of true (rows) against estimated (columns) speaker counts 1..=8.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountingMatrix {
    pub counts: [[u64; MAX_COUNT]; MAX_COUNT],
}

impl CountingMatrix {
    pub fn from_rows(rows: [[u64; MAX_COUNT]; MAX_COUNT]) -> Self {
        Self { counts: rows }
    }

    pub fn trace(&self) -> u64 {
        (0..MAX_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Rows are the true number of active speakers, columns the estimate.
    pub fn render(&self) -> String {
        let mut out = String::from("true\\est");
        for j in 1..=MAX_COUNT {
            let _ = write!(out, "{j:>6}");
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{:>8}", i + 1);
            for v in row {
                let _ = write!(out, "{v:>6}");
            }
            out.push('\n');
        }
        let _ = write!(
            out,
            "accuracy {}/{} = {:.1}%",
            self.trace(),
            self.total(),
            100.0 * self.accuracy()
        );
        out
    }
}

pub fn counting_matrix(truths: &[usize], estimates: &[usize]) -> Result<CountingMatrix> {
    if truths.len() != estimates.len() {
        return Err(Error::invalid_input("truth and estimate lists differ in length"));
    }
    let mut counts = [[0u64; MAX_COUNT]; MAX_COUNT];
    for (&t, &e) in truths.iter().zip(estimates) {
        if !(1..=MAX_COUNT).contains(&t) || !(1..=MAX_COUNT).contains(&e) {
            return Err(Error::invalid_input(format!(
                "speaker counts must lie in 1..={MAX_COUNT}, got ({t}, {e})"
            )));
        }
        counts[t - 1][e - 1] += 1;
    }
    Ok(CountingMatrix { counts })
}

/// Area under the ROC curve of `scores` for binary `labels`, with midranks
/// for ties. `None` if either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    auc_sorted(scores, labels, &order)
}

fn auc_sorted(scores: &[f64], labels: &[bool], order: &[usize]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean AUC of posteriors `gamma` (`K_hat x T x F`) against dominance masks
/// (`K x T x F`) on voiced frames, under the best one-to-one assignment of
/// hypothesis to truth components. Truth components that stay unmatched
/// (fewer hypothesis components) score 0.5; truth components without both
/// positive and negative bins are skipped.
pub fn mask_auc(gamma: &Array3<f64>, truth: &Array3<bool>, voiced: &[bool]) -> Result<f64> {
    let (kh, t, f) = gamma.dim();
    let (kt, t2, f2) = truth.dim();
    if (t, f) != (t2, f2) || voiced.len() != t {
        return Err(Error::invalid_input("posterior, mask and voicing shapes differ"));
    }
    let frames: Vec<usize> = (0..t).filter(|&i| voiced[i]).collect();
    let labels: Vec<Vec<bool>> = (0..kt)
        .map(|k| {
            frames
                .iter()
                .flat_map(|&ti| (0..f).map(move |fi| (ti, fi)))
                .map(|(ti, fi)| truth[(k, ti, fi)])
                .collect()
        })
        .collect();
    let valid: Vec<usize> = (0..kt)
        .filter(|&k| {
            let pos = labels[k].iter().filter(|&&l| l).count();
            pos > 0 && pos < labels[k].len()
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid_input("no truth component has both classes on voiced bins"));
    }
    let mut table = Array2::<f64>::from_elem((kh, valid.len()), 0.5);
    for h in 0..kh {
        let scores: Vec<f64> = frames
            .iter()
            .flat_map(|&ti| (0..f).map(move |fi| (ti, fi)))
            .map(|(ti, fi)| gamma[(h, ti, fi)])
            .collect();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        for (j, &k) in valid.iter().enumerate() {
            table[(h, j)] = auc_sorted(&scores, &labels[k], &order).unwrap_or(0.5);
        }
    }
    let pairs = linear_sum_assignment(table.mapv(|v| -v).view())?;
    let matched: f64 = pairs.iter().map(|&(h, j)| table[(h, j)]).sum();
    let unmatched = valid.len() - pairs.len();
    Ok((matched + 0.5 * unmatched as f64) / valid.len() as f64)
}

/// Scale-invariant signal-to-distortion ratio in dB (both signals mean
/// removed).
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() || estimate.is_empty() {
        return Err(Error::invalid_input("signals must be non-empty and of equal length"));
    }
    let n = estimate.len() as f64;
    let me = estimate.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= 0.0 {
        return Err(Error::invalid_input("reference has no energy"));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let noise: f64 = e.iter().zip(&r).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    Ok(10.0 * (target / noise).log10())
}

/// Frame-level posteriors summed over frequency, handy for callers holding
/// only a `K x T x F` tensor.
pub fn frame_activity(gamma: &Array3<f64>) -> Array2<f64> {
    gamma.mean_axis(Axis(2)).expect("non-empty frequency axis")
}
