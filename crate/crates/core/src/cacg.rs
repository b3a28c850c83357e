//! Complex Angular Central Gaussian distribution and the spatial mixture
//! model with frequency-tied, time-varying priors.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{ln_gamma, logsumexp_unchecked, Cholesky, HermitianPD, DEFAULT_LOADING};
use crate::vmf::floor_and_normalize;

/// Analysis parameters attached to a time-frequency tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftMeta {
    pub sample_rate: u32,
    pub fft_len: usize,
    pub window_len: usize,
    pub hop: usize,
}

impl StftMeta {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

/// Multichannel STFT observations. Stored as `F x T x C` so that the channel
/// vector of one bin is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct StftTensor {
    data: Array3<Complex64>,
    meta: StftMeta,
}

impl StftTensor {
    pub fn new(data: Array3<Complex64>, meta: StftMeta) -> Result<Self> {
        if data.dim().2 == 0 {
            return Err(Error::invalid_input("STFT tensor needs at least one channel"));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data, meta })
    }

    pub fn meta(&self) -> StftMeta {
        self.meta
    }

    pub fn n_freqs(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames() == 0
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    /// Channel vector of bin `(t, f)`.
    pub fn bin(&self, f: usize, t: usize) -> &[Complex64] {
        let c = self.n_channels();
        let start = (f * self.n_frames() + t) * c;
        &self.data.as_slice().expect("standard layout")[start..start + c]
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self {
            data: self
                .data
                .slice(ndarray::s![.., start..end, ..])
                .as_standard_layout()
                .to_owned(),
            meta: self.meta,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Errors unless the tensor is free of NaN/Inf and has at least two
    /// channels, as the mixture models require.
    pub fn validate_for_model(&self) -> Result<()> {
        if self.n_channels() < 2 {
            return Err(Error::invalid_input(format!(
                "spatial model needs at least two channels, got {}",
                self.n_channels()
            )));
        }
        if !self.all_finite() {
            return Err(Error::invalid_input("STFT contains non-finite values"));
        }
        Ok(())
    }
}

/// Unit-norm observations plus the bins that were all-zero and replaced by
/// the first canonical basis vector.
#[derive(Debug, Clone)]
pub struct NormalizedStft {
    pub tensor: StftTensor,
    /// `F x T`, true where the input bin was zero.
    pub degenerate: Array2<bool>,
}

pub fn normalize_observations(x: &StftTensor) -> NormalizedStft {
    let (nf, nt, nc) = x.data.dim();
    let mut data = x.data.clone();
    let mut degenerate = Array2::from_elem((nf, nt), false);
    let flat = data.as_slice_mut().expect("standard layout");
    for (idx, bin) in flat.chunks_exact_mut(nc).enumerate() {
        let norm = bin.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            for z in bin.iter_mut() {
                *z /= norm;
            }
        } else {
            for z in bin.iter_mut() {
                *z = Complex64::new(0.0, 0.0);
            }
            bin[0] = Complex64::new(1.0, 0.0);
            degenerate[(idx / nt, idx % nt)] = true;
        }
    }
    NormalizedStft {
        tensor: StftTensor {
            data,
            meta: x.meta,
        },
        degenerate,
    }
}

/// `ln (C-1)! - ln 2 - C ln pi`, the log-density of the uniform
/// distribution on the complex unit sphere.
pub fn log_uniform_complex_sphere(c: usize) -> f64 {
    ln_gamma(c as f64) - std::f64::consts::LN_2 - c as f64 * std::f64::consts::PI.ln()
}

/// `ln (C-1)! - ln 2 - C ln pi - ln det B - C ln(y^H B^{-1} y)`.
pub fn cacg_log_pdf(b: &HermitianPD, y: &[Complex64]) -> Result<f64> {
    if y.len() != b.dim() {
        return Err(Error::invalid_input(format!(
            "observation has {} channels, covariance is {}x{}",
            y.len(),
            b.dim(),
            b.dim()
        )));
    }
    let chol = b.cholesky()?;
    FactoredCacg::new(&chol).log_pdf(&chol, y)
}

/// Constant part of the log-density for one factorized covariance.
struct FactoredCacg {
    offset: f64,
    c: f64,
}

impl FactoredCacg {
    fn new(chol: &Cholesky) -> Self {
        let c = chol.dim();
        Self {
            offset: log_uniform_complex_sphere(c) - chol.logdet(),
            c: c as f64,
        }
    }

    fn log_pdf(&self, chol: &Cholesky, y: &[Complex64]) -> Result<f64> {
        let q = chol.quad_form(y);
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::numerical(format!("cACG quadratic form is {q}")));
        }
        Ok(self.offset - self.c * q.ln())
    }
}

/// Frequency-dependent covariances of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialComponent {
    pub covariances: Vec<HermitianPD>,
}

impl SpatialComponent {
    pub fn identity(n_freqs: usize, c: usize) -> Self {
        Self {
            covariances: vec![HermitianPD::identity(c); n_freqs],
        }
    }
}

/// Class posteriors `K x T x F` and frequency-tied priors `K x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTensor {
    pub gamma: Array3<f64>,
    pub pi: Array2<f64>,
}

impl PosteriorTensor {
    /// Checks shapes and the normalization invariants (within 1e-6).
    pub fn new(gamma: Array3<f64>, pi: Array2<f64>) -> Result<Self> {
        let (k, t, _) = gamma.dim();
        if pi.dim() != (k, t) {
            return Err(Error::invalid_input("prior shape does not match posteriors"));
        }
        if gamma.iter().chain(pi.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid_input("posteriors must be finite and non-negative"));
        }
        for col in pi.axis_iter(Axis(1)) {
            if (col.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid_input("prior columns must sum to one"));
            }
        }
        let sums = gamma.sum_axis(Axis(0));
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-6) {
            return Err(Error::invalid_input("posteriors must sum to one over components"));
        }
        Ok(Self { gamma, pi })
    }

    /// Replicates frame-level responsibilities `K x T` over `F` frequencies.
    pub fn replicate(resp: ArrayView2<f64>, n_freqs: usize) -> Result<Self> {
        let (k, t) = resp.dim();
        let mut gamma = Array3::zeros((k, t, n_freqs));
        for ((ki, ti), &v) in resp.indexed_iter() {
            gamma.slice_mut(ndarray::s![ki, ti, ..]).fill(v);
        }
        Self::new(gamma, resp.to_owned())
    }

    pub fn n_components(&self) -> usize {
        self.gamma.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.gamma.dim().1
    }

    pub fn n_freqs(&self) -> usize {
        self.gamma.dim().2
    }

    /// `sum_f gamma_{k,t,f}`, `K x T`.
    pub fn gamma_bar(&self) -> Array2<f64> {
        self.gamma.sum_axis(Axis(2))
    }
}

/// Frequency-tied priors: mean of the posteriors over frequency, floored
/// and renormalized per frame.
pub fn frequency_tied_priors(gamma: &Array3<f64>) -> Array2<f64> {
    let nf = gamma.dim().2 as f64;
    let mut pi = gamma.sum_axis(Axis(2)) / nf;
    for mut col in pi.axis_iter_mut(Axis(1)) {
        let mut v = col.to_vec();
        floor_and_normalize(&mut v);
        for (dst, src) in col.iter_mut().zip(v) {
            *dst = src;
        }
    }
    pi
}

/// Posteriors of the spatial mixture with optional per-frame additive
/// log-terms (`K x T`, used by the joint model). Returns the posteriors and
/// `sum_{t,f} ln sum_k exp(...)`.
pub(crate) fn spatial_e_step(
    x: &StftTensor,
    spatial: &[SpatialComponent],
    pi: &Array2<f64>,
    extra: Option<&Array2<f64>>,
) -> Result<(Array3<f64>, f64)> {
    let (nf, nt, _) = x.data.dim();
    let k = spatial.len();
    if pi.dim() != (k, nt) {
        return Err(Error::invalid_input("prior shape does not match model and data"));
    }
    for comp in spatial {
        if comp.covariances.len() != nf {
            return Err(Error::invalid_input("component frequency count does not match data"));
        }
        if comp.covariances.iter().any(|b| b.dim() != x.n_channels()) {
            return Err(Error::invalid_input("covariance dimension does not match channel count"));
        }
    }
    // Per-frame log prior plus extra terms, laid out T x K.
    let mut frame_terms = vec![0.0; nt * k];
    for t in 0..nt {
        for ki in 0..k {
            let mut v = pi[(ki, t)].ln();
            if let Some(e) = extra {
                v += e[(ki, t)];
            }
            frame_terms[t * k + ki] = v;
        }
    }
    let blocks: Vec<Result<(Vec<f64>, f64)>> = (0..nf)
        .into_par_iter()
        .map(|f| {
            let chols = spatial
                .iter()
                .map(|c| c.covariances[f].cholesky())
                .collect::<Result<Vec<_>>>()?;
            let dens: Vec<FactoredCacg> = chols.iter().map(FactoredCacg::new).collect();
            let mut post = vec![0.0; nt * k];
            let mut buf = vec![0.0; k];
            let mut total = 0.0;
            for t in 0..nt {
                let y = x.bin(f, t);
                for ki in 0..k {
                    buf[ki] = frame_terms[t * k + ki] + dens[ki].log_pdf(&chols[ki], y)?;
                }
                let lse = logsumexp_unchecked(&buf);
                if !lse.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite bin log-likelihood at t={t}, f={f}"
                    )));
                }
                total += lse;
                for ki in 0..k {
                    post[t * k + ki] = (buf[ki] - lse).exp();
                }
            }
            Ok((post, total))
        })
        .collect();
    let mut gamma = Array3::zeros((k, nt, nf));
    let mut loglik = 0.0;
    for (f, block) in blocks.into_iter().enumerate() {
        let (post, total) = block?;
        loglik += total;
        for t in 0..nt {
            for ki in 0..k {
                gamma[(ki, t, f)] = post[t * k + ki];
            }
        }
    }
    Ok((gamma, loglik))
}

/// Result of one covariance update.
#[derive(Debug, Clone)]
pub struct CacgMStep {
    pub components: Vec<SpatialComponent>,
    /// `(component, frequency)` pairs with zero responsibility mass whose
    /// covariance was carried over unchanged.
    pub inactive: Vec<(usize, usize)>,
}

/// One Tyler fixed-point step per component and frequency, followed by
/// symmetrization, loading and trace normalization to `C`.
pub fn cacg_m_step(
    x: &StftTensor,
    gamma: &Array3<f64>,
    prev: &[SpatialComponent],
) -> Result<CacgMStep> {
    let (nf, nt, c) = x.data.dim();
    let (k, gt, gf) = gamma.dim();
    if gt != nt || gf != nf || prev.len() != k {
        return Err(Error::invalid_input("posterior shape does not match data and model"));
    }
    if prev.iter().any(|p| p.covariances.len() != nf) {
        return Err(Error::invalid_input("component frequency count does not match data"));
    }
    let per_freq: Vec<Result<Vec<(HermitianPD, bool)>>> = (0..nf)
        .into_par_iter()
        .map(|f| {
            (0..k)
                .map(|ki| tyler_step(x, gamma, ki, f, &prev[ki].covariances[f], c, nt))
                .collect()
        })
        .collect();
    let mut components: Vec<SpatialComponent> = (0..k)
        .map(|_| SpatialComponent {
            covariances: Vec::with_capacity(nf),
        })
        .collect();
    let mut inactive = Vec::new();
    for (f, row) in per_freq.into_iter().enumerate() {
        for (ki, (b, active)) in row?.into_iter().enumerate() {
            if !active {
                inactive.push((ki, f));
            }
            components[ki].covariances.push(b);
        }
    }
    inactive.sort_unstable();
    Ok(CacgMStep {
        components,
        inactive,
    })
}

fn tyler_step(
    x: &StftTensor,
    gamma: &Array3<f64>,
    k: usize,
    f: usize,
    prev: &HermitianPD,
    c: usize,
    nt: usize,
) -> Result<(HermitianPD, bool)> {
    let mass: f64 = (0..nt).map(|t| gamma[(k, t, f)]).sum();
    if !(mass > 0.0) {
        return Ok((prev.clone(), false));
    }
    let chol = prev.cholesky()?;
    let mut acc = vec![Complex64::new(0.0, 0.0); c * c];
    for t in 0..nt {
        let g = gamma[(k, t, f)];
        if g == 0.0 {
            continue;
        }
        let y = x.bin(f, t);
        let q = chol.quad_form(y);
        if !(q > 0.0) {
            return Err(Error::numerical("zero quadratic form in covariance update"));
        }
        let w = g / q;
        for i in 0..c {
            let yi = y[i] * w;
            for j in i..c {
                acc[i * c + j] += yi * y[j].conj();
            }
        }
    }
    let scale = c as f64 / mass;
    let mut tr = 0.0;
    for i in 0..c {
        for j in i..c {
            acc[i * c + j] *= scale;
            if j > i {
                acc[j * c + i] = acc[i * c + j].conj();
            }
        }
        acc[i * c + i].im = 0.0;
        tr += acc[i * c + i].re;
    }
    let load = if tr > 0.0 { DEFAULT_LOADING * tr / c as f64 } else { DEFAULT_LOADING };
    for i in 0..c {
        acc[i * c + i].re += load;
    }
    let b = HermitianPD::from_hermitian_data(c, acc)?;
    Ok((b.with_trace(c as f64), true))
}

#[derive(Debug, Clone)]
pub struct CacgFit {
    pub components: Vec<SpatialComponent>,
    pub posterior: PosteriorTensor,
    pub loglik_trace: Vec<f64>,
}

/// EM for the spatial mixture, started with an M-step on `init`. The input
/// is normalized internally.
pub fn cacgmm_em(x: &StftTensor, init: &PosteriorTensor, iterations: usize) -> Result<CacgFit> {
    if iterations < 1 {
        return Err(Error::invalid_config("at least one EM iteration is required"));
    }
    if init.n_components() < 1 {
        return Err(Error::invalid_config("at least one component is required"));
    }
    x.validate_for_model()?;
    if init.n_frames() != x.n_frames() || init.n_freqs() != x.n_freqs() {
        return Err(Error::invalid_input("initial posteriors do not match the STFT shape"));
    }
    let y = normalize_observations(x).tensor;
    let mut components =
        vec![SpatialComponent::identity(y.n_freqs(), y.n_channels()); init.n_components()];
    let mut gamma = init.gamma.clone();
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        components = cacg_m_step(&y, &gamma, &components)?.components;
        let pi = frequency_tied_priors(&gamma);
        let (g, ll) = spatial_e_step(&y, &components, &pi, None)?;
        gamma = g;
        trace.push(ll);
    }
    // Priors that match the returned posteriors.
    let pi = frequency_tied_priors(&gamma);
    Ok(CacgFit {
        components,
        posterior: PosteriorTensor { gamma, pi },
        loglik_trace: trace,
    })
}
