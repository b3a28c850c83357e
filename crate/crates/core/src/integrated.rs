//! Joint spatial/spectral mixture: one latent source per time-frequency bin
//! explains both the multichannel observation (cACG) and the frame's speaker
//! embedding (vMF, replicated over frequency). Includes component fusion,
//! which is what performs speaker counting.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cacg::{
    cacg_m_step, frequency_tied_priors, normalize_observations, spatial_e_step, PosteriorTensor,
    SpatialComponent, StftTensor,
};
use crate::error::{Error, Result};
use crate::numerics::HermitianPD;
use crate::vmf::{log_likelihoods, vmf_m_step, EmbeddingSequence, SpectralComponent};

#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub spatial: Vec<SpatialComponent>,
    pub spectral: Vec<SpectralComponent>,
    pub pi: Array2<f64>,
    pub noise_index: Option<usize>,
}

impl JointModel {
    pub fn n_components(&self) -> usize {
        self.spatial.len()
    }

    fn check(&self) -> Result<()> {
        let k = self.spatial.len();
        if self.spectral.len() != k || self.pi.nrows() != k {
            return Err(Error::invalid_input(
                "spatial, spectral and prior component counts differ",
            ));
        }
        if let Some(n) = self.noise_index {
            if n >= k {
                return Err(Error::invalid_input("noise index out of range"));
            }
        }
        Ok(())
    }

    /// Prototypes of the speaker components, in component order.
    pub fn prototypes(&self) -> Vec<(usize, &SpectralComponent)> {
        self.spectral
            .iter()
            .enumerate()
            .filter(|(k, _)| Some(*k) != self.noise_index)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEvent {
    pub kept: usize,
    pub removed: usize,
    pub similarity: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Spectral,
    Iou,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointEmConfig {
    pub iterations: usize,
    pub kappa_max: f64,
    pub fusion: FusionStrategy,
    pub tau_spectral: f64,
    pub tau_iou: f64,
    pub activity_threshold: f64,
    /// First iteration (1-based) after whose E-step fusion is checked.
    pub fusion_start: usize,
    /// Fusion stops once this many speaker components remain.
    pub k_target: Option<usize>,
    /// Keep the covariances fixed at their initial values.
    pub freeze_spatial: bool,
    /// Keep prototypes and concentrations fixed at their initial values.
    pub freeze_spectral: bool,
    pub seed: u64,
}

impl Default for JointEmConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            kappa_max: 35.0,
            fusion: FusionStrategy::Spectral,
            tau_spectral: 0.7,
            tau_iou: 0.85,
            activity_threshold: 0.5,
            fusion_start: 10,
            k_target: None,
            freeze_spatial: false,
            freeze_spectral: false,
            seed: 0,
        }
    }
}

impl JointEmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::invalid_config("at least one EM iteration is required"));
        }
        if !(self.kappa_max >= 0.0) {
            return Err(Error::invalid_config("kappa_max must be non-negative"));
        }
        for (name, tau) in [("tau_spectral", self.tau_spectral), ("tau_iou", self.tau_iou)] {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::invalid_config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.activity_threshold > 0.0 && self.activity_threshold < 1.0) {
            return Err(Error::invalid_config("activity_threshold must lie in (0, 1)"));
        }
        if self.k_target == Some(0) {
            return Err(Error::invalid_config("k_target must be at least 1"));
        }
        Ok(())
    }

    fn min_speakers(&self) -> usize {
        self.k_target.unwrap_or(1).max(1)
    }
}

/// Joint posteriors for normalized observations `x`. Returns the posteriors
/// (with the model's priors attached) and the log-likelihood.
pub fn joint_e_step(
    x: &StftTensor,
    e: &EmbeddingSequence,
    model: &JointModel,
) -> Result<(PosteriorTensor, f64)> {
    model.check()?;
    if x.n_frames() != e.len() {
        return Err(Error::invalid_input(format!(
            "STFT has {} frames, embeddings have {}",
            x.n_frames(),
            e.len()
        )));
    }
    let spectral = log_likelihoods(&model.spectral, e)?;
    let (gamma, ll) = spatial_e_step(x, &model.spatial, &model.pi, Some(&spectral))?;
    Ok((
        PosteriorTensor {
            gamma,
            pi: model.pi.clone(),
        },
        ll,
    ))
}

/// Decoupled M-step: covariances from `gamma`, prototypes from the
/// frequency-summed posteriors, priors from the frequency mean.
pub fn joint_m_step(
    x: &StftTensor,
    e: &EmbeddingSequence,
    gamma: &Array3<f64>,
    model: &JointModel,
    cfg: &JointEmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointModel> {
    model.check()?;
    let (k, t, _) = gamma.dim();
    if k != model.n_components() || t != e.len() || t != x.n_frames() {
        return Err(Error::invalid_input("posterior shape does not match model and data"));
    }
    let spatial = if cfg.freeze_spatial {
        model.spatial.clone()
    } else {
        cacg_m_step(x, gamma, &model.spatial)?.components
    };
    let mut spectral = if cfg.freeze_spectral {
        model.spectral.clone()
    } else {
        let gamma_bar = gamma.sum_axis(Axis(2));
        vmf_m_step(e, gamma_bar.view(), cfg.kappa_max, rng)?.components
    };
    if let Some(n) = model.noise_index {
        spectral[n].kappa = 0.0;
    }
    Ok(JointModel {
        spatial,
        spectral,
        pi: frequency_tied_priors(gamma),
        noise_index: model.noise_index,
    })
}

/// Fuses the pair of speaker components with the highest prototype cosine
/// similarity if it exceeds `tau`. At most one fusion per call.
pub fn spectral_fusion_check(
    model: &mut JointModel,
    post: &mut PosteriorTensor,
    tau: f64,
    min_speakers: usize,
) -> Result<Option<FusionEvent>> {
    check_tau(tau)?;
    let best = best_pair(model, |i, j| model.spectral[i].mu.dot(&model.spectral[j].mu));
    fuse_if_above(model, post, best, tau, min_speakers)
}

/// Fuses the pair of speaker components whose binarized priors have the
/// highest intersection over union, if it exceeds `tau`.
pub fn iou_fusion_check(
    model: &mut JointModel,
    post: &mut PosteriorTensor,
    tau: f64,
    activity_threshold: f64,
    min_speakers: usize,
) -> Result<Option<FusionEvent>> {
    check_tau(tau)?;
    let active: Vec<Vec<bool>> = model
        .pi
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|&p| p > activity_threshold).collect())
        .collect();
    let best = best_pair(model, |i, j| activity_iou(&active[i], &active[j]));
    fuse_if_above(model, post, best, tau, min_speakers)
}

/// `|a and b| / |a or b|`, zero when both are empty.
pub fn activity_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid_config("fusion threshold must lie in (0, 1)"))
    }
}

fn best_pair(model: &JointModel, score: impl Fn(usize, usize) -> f64) -> Option<(usize, usize, f64)> {
    let k = model.n_components();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..k {
        if Some(i) == model.noise_index {
            continue;
        }
        for j in (i + 1)..k {
            if Some(j) == model.noise_index {
                continue;
            }
            let s = score(i, j);
            if best.map_or(true, |(_, _, b)| s > b) {
                best = Some((i, j, s));
            }
        }
    }
    best
}

fn fuse_if_above(
    model: &mut JointModel,
    post: &mut PosteriorTensor,
    best: Option<(usize, usize, f64)>,
    tau: f64,
    min_speakers: usize,
) -> Result<Option<FusionEvent>> {
    model.check()?;
    let Some((i, j, s)) = best else {
        return Ok(None);
    };
    if !(s > tau) || count_speakers(model) <= min_speakers {
        return Ok(None);
    }
    fuse_components(model, post, i, j)?;
    Ok(Some(FusionEvent {
        kept: i,
        removed: j,
        similarity: s,
        iteration: 0,
    }))
}

/// Merges component `j` into `i`: posteriors and priors add, covariances
/// are averaged with weights proportional to the prior masses, and `j` is
/// removed.
pub fn fuse_components(model: &mut JointModel, post: &mut PosteriorTensor, i: usize, j: usize) -> Result<()> {
    let k = model.n_components();
    if i == j || i >= k || j >= k {
        return Err(Error::invalid_input("invalid fusion pair"));
    }
    if post.n_components() != k {
        return Err(Error::invalid_input("posterior and model component counts differ"));
    }
    let mass_i = model.pi.row(i).sum();
    let mass_j = model.pi.row(j).sum();
    let total = mass_i + mass_j;
    let (wi, wj) = if total > 0.0 {
        (mass_i / total, mass_j / total)
    } else {
        (0.5, 0.5)
    };
    let fused: Vec<HermitianPD> = model.spatial[i]
        .covariances
        .iter()
        .zip(&model.spatial[j].covariances)
        .map(|(bi, bj)| {
            let data = bi
                .as_slice()
                .iter()
                .zip(bj.as_slice())
                .map(|(a, b)| a * wi + b * wj)
                .collect();
            HermitianPD::from_hermitian_data(bi.dim(), data)
        })
        .collect::<Result<_>>()?;
    model.spatial[i].covariances = fused;

    let gj = post.gamma.index_axis(Axis(0), j).to_owned();
    let mut gi = post.gamma.index_axis_mut(Axis(0), i);
    gi += &gj;
    let pj = post.pi.row(j).to_owned();
    let mut pi_i = post.pi.row_mut(i);
    pi_i += &pj;
    let mj = model.pi.row(j).to_owned();
    let mut mi = model.pi.row_mut(i);
    mi += &mj;

    let keep: Vec<usize> = (0..k).filter(|&c| c != j).collect();
    post.gamma = post.gamma.select(Axis(0), &keep);
    post.pi = post.pi.select(Axis(0), &keep);
    model.pi = model.pi.select(Axis(0), &keep);
    model.spatial.remove(j);
    model.spectral.remove(j);
    model.noise_index = model.noise_index.map(|n| if n > j { n - 1 } else { n });
    Ok(())
}

/// Number of speaker components (noise excluded).
pub fn count_speakers(model: &JointModel) -> usize {
    model.n_components() - model.noise_index.is_some() as usize
}

#[derive(Debug, Clone)]
pub struct JointFit {
    pub model: JointModel,
    /// Posteriors of the last E-step, after any fusion at that step.
    pub posterior: PosteriorTensor,
    pub events: Vec<FusionEvent>,
    /// Log-likelihood at every E-step.
    pub loglik_trace: Vec<f64>,
    /// Component count at every E-step.
    pub k_trace: Vec<usize>,
}

/// EM for the joint model. Starts with an M-step on `init`, then runs
/// `iterations` rounds of E-step, fusion check and M-step. `initial` seeds
/// the parameters that the first M-step does not overwrite (frozen parts and
/// the previous covariances of the fixed-point update); identity covariances
/// and uniform prototypes are used when absent.
pub fn joint_em(
    x: &StftTensor,
    e: &EmbeddingSequence,
    init: &PosteriorTensor,
    noise_index: Option<usize>,
    initial: Option<JointModel>,
    cfg: &JointEmConfig,
) -> Result<JointFit> {
    cfg.validate()?;
    x.validate_for_model()?;
    let k = init.n_components();
    if k < 1 {
        return Err(Error::invalid_config("at least one component is required"));
    }
    if init.n_frames() != x.n_frames() || init.n_freqs() != x.n_freqs() {
        return Err(Error::invalid_input("initial posteriors do not match the STFT shape"));
    }
    if x.n_frames() != e.len() {
        return Err(Error::invalid_input(format!(
            "STFT has {} frames, embeddings have {}",
            x.n_frames(),
            e.len()
        )));
    }
    let y = normalize_observations(x).tensor;
    let mut model = match initial {
        Some(m) => {
            if m.n_components() != k {
                return Err(Error::invalid_input("initial model and posteriors differ in K"));
            }
            m
        }
        None => JointModel {
            spatial: vec![SpatialComponent::identity(y.n_freqs(), y.n_channels()); k],
            spectral: vec![SpectralComponent::uniform(e.dim()); k],
            pi: init.pi.clone(),
            noise_index,
        },
    };
    model.noise_index = noise_index;
    model.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut post = init.clone();
    model = joint_m_step(&y, e, &post.gamma, &model, cfg, &mut rng)?;
    let mut events = Vec::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut k_trace = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (p, ll) = joint_e_step(&y, e, &model)?;
        post = p;
        trace.push(ll);
        k_trace.push(model.n_components());
        if it >= cfg.fusion_start {
            let event = match cfg.fusion {
                FusionStrategy::Spectral => {
                    spectral_fusion_check(&mut model, &mut post, cfg.tau_spectral, cfg.min_speakers())?
                }
                FusionStrategy::Iou => iou_fusion_check(
                    &mut model,
                    &mut post,
                    cfg.tau_iou,
                    cfg.activity_threshold,
                    cfg.min_speakers(),
                )?,
                FusionStrategy::None => None,
            };
            if let Some(mut ev) = event {
                ev.iteration = it;
                log::debug!("fused component {} into {} (s = {:.3})", ev.removed, ev.kept, ev.similarity);
                events.push(ev);
            }
        }
        model = joint_m_step(&y, e, &post.gamma, &model, cfg, &mut rng)?;
    }
    Ok(JointFit {
        model,
        posterior: post,
        events,
        loglik_trace: trace,
        k_trace,
    })
}

/// Checks that the log-likelihood never decreases by more than
/// `rel_tol * |value|` between consecutive E-steps with equal component
/// count. Returns the first offending iteration index.
pub fn first_monotonicity_violation(trace: &[f64], k_trace: Option<&[usize]>, rel_tol: f64) -> Option<usize> {
    for i in 1..trace.len() {
        if let Some(ks) = k_trace {
            if ks[i] != ks[i - 1] {
                continue;
            }
        }
        if trace[i] < trace[i - 1] - rel_tol * trace[i - 1].abs() {
            return Some(i);
        }
    }
    None
}
