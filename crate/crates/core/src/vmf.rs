//! von-Mises-Fisher distribution and the spectral (embedding) mixture model.
//!
//! Observations are length-normalized frame-level speaker embeddings. Each
//! component is a prototype direction `mu` with a concentration `kappa`; the
//! M-step uses the resultant-length approximation for `kappa`, capped at a
//! configured maximum.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{log_vmf_normalizer, logsumexp_unchecked};

/// Prior floor applied before renormalization.
pub const PRIOR_FLOOR: f64 = 1e-10;

const UNIT_TOLERANCE: f64 = 1e-3;

/// Unit-normalized frame-level embeddings, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    frames: Array2<f64>,
    frame_rate: f64,
}

impl EmbeddingSequence {
    /// Normalizes every row to unit length. Rows containing NaN/Inf or with
    /// zero norm are rejected.
    pub fn new(mut frames: Array2<f64>, frame_rate: f64) -> Result<Self> {
        if frames.ncols() < 2 {
            return Err(Error::invalid_input("embeddings need at least two dimensions"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid_input("frame rate must be positive"));
        }
        for (t, mut row) in frames.axis_iter_mut(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_input(format!("embedding row {t} is not finite")));
            }
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(Error::invalid_input(format!("embedding row {t} has zero norm")));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames.slice(s![start..end, ..]).to_owned(),
            frame_rate: self.frame_rate,
        }
    }

    pub fn select(&self, frames: &[usize]) -> Self {
        Self {
            frames: self.frames.select(Axis(0), frames),
            frame_rate: self.frame_rate,
        }
    }
}

/// One speaker: prototype direction and concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralComponent {
    pub mu: Array1<f64>,
    pub kappa: f64,
}

impl SpectralComponent {
    pub fn uniform(dim: usize) -> Self {
        let mut mu = Array1::zeros(dim);
        mu[0] = 1.0;
        Self { mu, kappa: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mixture weights: one prior per component, or one per component and frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Priors {
    Static(Array1<f64>),
    TimeVarying(Array2<f64>),
}

impl Priors {
    fn log_prior(&self, k: usize, t: usize) -> f64 {
        match self {
            Priors::Static(p) => p[k].ln(),
            Priors::TimeVarying(p) => p[(k, t)].ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmfMixture {
    pub components: Vec<SpectralComponent>,
    pub priors: Priors,
    pub kappa_max: f64,
}

/// `ln c_E(kappa) + kappa mu^T e`.
pub fn vmf_log_pdf(component: &SpectralComponent, e: ArrayView1<f64>) -> Result<f64> {
    if e.len() != component.dim() {
        return Err(Error::invalid_input(format!(
            "embedding dimension {} does not match component dimension {}",
            e.len(),
            component.dim()
        )));
    }
    let norm = e.dot(&e).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid_input(format!(
            "embedding is not unit norm (norm {norm})"
        )));
    }
    Ok(log_vmf_normalizer(component.dim(), component.kappa)? + component.kappa * component.mu.dot(&e))
}

/// Log-densities of every frame under every component, `K x T`.
pub fn log_likelihoods(
    components: &[SpectralComponent],
    e: &EmbeddingSequence,
) -> Result<Array2<f64>> {
    let k = components.len();
    let dim = e.dim();
    let mut mus = Array2::zeros((k, dim));
    let mut norms = Vec::with_capacity(k);
    for (i, c) in components.iter().enumerate() {
        if c.dim() != dim {
            return Err(Error::invalid_input("component and embedding dimensions differ"));
        }
        mus.row_mut(i).assign(&c.mu);
        norms.push(log_vmf_normalizer(dim, c.kappa)?);
    }
    let mut out = mus.dot(&e.frames().t());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let kappa = components[i].kappa;
        let norm = norms[i];
        row.mapv_inplace(|cos| norm + kappa * cos);
    }
    Ok(out)
}

/// Concentration from the mean resultant length `rbar`:
/// `(rbar E - rbar^3) / (1 - rbar^2)`, clamped to `[0, kappa_max]`.
pub fn estimate_kappa(rbar: f64, dim: usize, kappa_max: f64) -> f64 {
    if rbar >= 1.0 - 1e-12 {
        return kappa_max;
    }
    let rbar = rbar.max(0.0);
    let e = dim as f64;
    let kappa = (rbar * e - rbar.powi(3)) / (1.0 - rbar * rbar);
    kappa.clamp(0.0, kappa_max)
}

#[derive(Debug, Clone)]
pub struct VmfMStep {
    pub components: Vec<SpectralComponent>,
    /// Components whose weighted resultant vanished; their prototypes were
    /// redrawn uniformly and their concentration set to zero.
    pub degenerate: Vec<usize>,
}

/// Weighted M-step. `resp` is `K x T`; column sums may exceed one (the joint
/// model passes frequency-summed posteriors).
pub fn vmf_m_step<R: Rng + ?Sized>(
    e: &EmbeddingSequence,
    resp: ArrayView2<f64>,
    kappa_max: f64,
    rng: &mut R,
) -> Result<VmfMStep> {
    if resp.ncols() != e.len() {
        return Err(Error::invalid_input(format!(
            "responsibilities cover {} frames, embeddings have {}",
            resp.ncols(),
            e.len()
        )));
    }
    if !(kappa_max >= 0.0) {
        return Err(Error::invalid_config("kappa_max must be non-negative"));
    }
    let dim = e.dim();
    let resultants = resp.dot(&e.frames());
    let mut components = Vec::with_capacity(resp.nrows());
    let mut degenerate = Vec::new();
    for (k, r) in resultants.axis_iter(Axis(0)).enumerate() {
        let mass: f64 = resp.row(k).sum();
        let norm = r.dot(&r).sqrt();
        if !(norm > 0.0) || !(mass > 0.0) || !norm.is_finite() {
            degenerate.push(k);
            components.push(SpectralComponent {
                mu: random_unit(dim, rng),
                kappa: 0.0,
            });
            continue;
        }
        let rbar = (norm / mass).min(1.0);
        components.push(SpectralComponent {
            mu: r.mapv(|v| v / norm),
            kappa: estimate_kappa(rbar, dim, kappa_max),
        });
    }
    Ok(VmfMStep {
        components,
        degenerate,
    })
}

pub(crate) fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// One weight per component.
    Static,
    /// One weight per component and frame.
    TimeVarying,
}

#[derive(Debug, Clone)]
pub struct VmfEmConfig {
    pub iterations: usize,
    pub kappa_max: f64,
    pub prior_mode: PriorMode,
    /// Multiplies every frame's log-likelihood (and hence the M-step
    /// weights). The posteriors do not depend on it; it only rescales the
    /// objective, which is how a model replicated over `F` frequency bins
    /// with an uninformative spatial part reduces to this one.
    pub tempering: f64,
    pub seed: u64,
}

impl Default for VmfEmConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            kappa_max: 35.0,
            prior_mode: PriorMode::Static,
            tempering: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VmfFit {
    pub mixture: VmfMixture,
    /// Posteriors from the last E-step, `K x T`.
    pub resp: Array2<f64>,
    /// Log-likelihood evaluated at every E-step.
    pub loglik_trace: Vec<f64>,
}

/// EM for the vMF mixture, started with an M-step on `init_resp`.
pub fn vmfmm_em(e: &EmbeddingSequence, init_resp: ArrayView2<f64>, cfg: &VmfEmConfig) -> Result<VmfFit> {
    let (k, t) = init_resp.dim();
    if cfg.iterations < 1 {
        return Err(Error::invalid_config("at least one EM iteration is required"));
    }
    if k < 1 {
        return Err(Error::invalid_config("at least one component is required"));
    }
    if k > t {
        return Err(Error::invalid_config(format!(
            "{k} components for only {t} frames"
        )));
    }
    if t != e.len() {
        return Err(Error::invalid_input("initial responsibilities and embeddings differ in length"));
    }
    if !(cfg.tempering > 0.0) {
        return Err(Error::invalid_config("tempering must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut resp = init_resp.to_owned();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut mixture = None;
    for _ in 0..cfg.iterations {
        let weighted = resp.mapv(|g| g * cfg.tempering);
        let m = vmf_m_step(e, weighted.view(), cfg.kappa_max, &mut rng)?;
        let priors = update_priors(&resp, cfg.prior_mode);
        let model = VmfMixture {
            components: m.components,
            priors,
            kappa_max: cfg.kappa_max,
        };
        let (post, ll) = e_step(e, &model, cfg.tempering)?;
        resp = post;
        trace.push(ll);
        mixture = Some(model);
    }
    Ok(VmfFit {
        mixture: mixture.expect("at least one iteration"),
        resp,
        loglik_trace: trace,
    })
}

fn update_priors(resp: &Array2<f64>, mode: PriorMode) -> Priors {
    match mode {
        PriorMode::Static => {
            let t = resp.ncols() as f64;
            let mut p = resp.sum_axis(Axis(1)) / t;
            floor_and_normalize(p.view_mut().into_slice().expect("contiguous"));
            Priors::Static(p)
        }
        PriorMode::TimeVarying => {
            let mut p = resp.clone();
            for mut col in p.axis_iter_mut(Axis(1)) {
                let mut v = col.to_vec();
                floor_and_normalize(&mut v);
                col.assign(&Array1::from(v));
            }
            Priors::TimeVarying(p)
        }
    }
}

pub(crate) fn floor_and_normalize(p: &mut [f64]) {
    for v in p.iter_mut() {
        *v = v.max(PRIOR_FLOOR);
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
}

/// Posterior `K x T` and the (tempered) log-likelihood of the mixture.
pub fn e_step(e: &EmbeddingSequence, model: &VmfMixture, tempering: f64) -> Result<(Array2<f64>, f64)> {
    let ll = log_likelihoods(&model.components, e)?;
    let (k, t) = ll.dim();
    let mut post = Array2::zeros((k, t));
    let mut total = 0.0;
    let mut buf = vec![0.0; k];
    for j in 0..t {
        for i in 0..k {
            buf[i] = model.priors.log_prior(i, j) + ll[(i, j)];
        }
        let lse = logsumexp_unchecked(&buf);
        if !lse.is_finite() {
            return Err(Error::numerical(format!("non-finite frame log-likelihood at frame {j}")));
        }
        total += tempering * lse;
        for i in 0..k {
            post[(i, j)] = (buf[i] - lse).exp();
        }
    }
    Ok((post, total))
}

/// Hard assignment from spherical k-means.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Sum of cosine distances `1 - x^T c` to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

const KMEANS_MAX_ITER: usize = 100;

/// Spherical k-means with k-means++ seeding under the distance `1 - a^T b`.
/// Rows of `points` must be unit vectors. Deterministic given `seed`.
pub fn spherical_kmeans_pp(points: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k < 1 {
        return Err(Error::invalid_config("k-means needs at least one cluster"));
    }
    if k > n {
        return Err(Error::invalid_config(format!("{k} clusters for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let sims = points.dot(&centroids.t());
        let mut changed = false;
        for (i, row) in sims.axis_iter(Axis(0)).enumerate() {
            let best = argmax_first(row);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // Update step; an empty or cancelled cluster takes the point farthest
        // from its current centroid.
        let mut sums = Array2::<f64>::zeros((k, points.ncols()));
        for (i, &a) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &points.row(i);
        }
        for c in 0..k {
            let norm = sums.row(c).dot(&sums.row(c)).sqrt();
            if norm > 1e-12 {
                let normalized = sums.row(c).mapv(|v| v / norm);
                centroids.row_mut(c).assign(&normalized);
            } else {
                let far = farthest_point(points, &centroids, &assignment);
                centroids.row_mut(c).assign(&points.row(far));
                assignment[far] = c;
                changed = true;
            }
        }
        if !changed || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    let inertia = assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| 1.0 - points.row(i).dot(&centroids.row(a)))
        .sum();
    Ok(KMeansResult {
        assignment,
        centroids,
        inertia,
        iterations,
    })
}

fn argmax_first(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn farthest_point(points: ArrayView2<f64>, centroids: &Array2<f64>, assignment: &[usize]) -> usize {
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, &a) in assignment.iter().enumerate() {
        let d = 1.0 - points.row(i).dot(&centroids.row(a));
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn seed_centroids<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| (1.0 - points.row(i).dot(&points.row(chosen[0]))).max(0.0))
        .collect();
    while chosen.len() < k {
        let weights: Vec<f64> = dist.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if acc > u && *w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `u` at the very end of the cumulative sum.
            pick.unwrap_or_else(|| weights.iter().rposition(|w| *w > 0.0).expect("positive total"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = (1.0 - points.row(i).dot(&points.row(next))).max(0.0);
            if nd < *d {
                *d = nd;
            }
        }
    }
    points.select(Axis(0), &chosen)
}

/// One-hot `K x T` responsibilities with `eps` of the mass spread evenly
/// over the other components.
pub fn smoothed_one_hot(assignment: &[usize], k: usize, eps: f64) -> Array2<f64> {
    let t = assignment.len();
    if k == 1 {
        return Array2::ones((1, t));
    }
    let off = eps / (k - 1) as f64;
    let mut out = Array2::from_elem((k, t), off);
    for (j, &a) in assignment.iter().enumerate() {
        out[(a, j)] = 1.0 - eps;
    }
    out
}
