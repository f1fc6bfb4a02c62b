//! Evaluation metrics: log-mel frontend, sliced-Wasserstein spectral
//! distance, Fréchet distance under Gaussian fits, and an onset-alignment
//! proxy for synchronization.

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::LATENT_RATE_HZ;

/// Number of random projections for SWSD.
pub const SWSD_PROJECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub eps: f64,
    /// Alternative non-negative normalization (shift columns to min 0
    /// before the ℓ¹ step). Default OFF: Algorithm-literal log-mels.
    pub non_negative: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 128,
            eps: 1e-8,
            non_negative: false,
        }
    }
}

impl MelConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_samples() == 0 || self.win_samples() < self.hop_samples() {
            return Err(CoreError::Config(format!(
                "need win >= hop > 0, got win {} ms, hop {} ms",
                self.win_ms, self.hop_ms
            )));
        }
        if self.n_mels == 0 {
            return Err(CoreError::Config("n_mels must be >= 1".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filterbank over `n_bins` FFT bins, 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate / 2.0;
    let mel_max = hz_to_mel(f_max);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    let mut fb = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (k, w) in fb[m].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < hi {
                *w = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
            }
        }
    }
    fb
}

/// Log-mel spectrogram frames: mel power → log(S+ε) → per-column ℓ¹
/// normalization → transpose to (frames, n_mels).
///
/// Columns (per-frame mel vectors) are divided by their signed sum; for the
/// typical all-negative log-mel column this is the ℓ¹ norm with the sign
/// convention that every column sums to exactly +1.
pub fn log_mel_frames(x: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    let win = cfg.win_samples();
    let hop = cfg.hop_samples();
    if x.len() < win {
        return Err(CoreError::Range(format!(
            "signal of {} samples shorter than one {} sample window",
            x.len(),
            win
        )));
    }
    let n_frames = (x.len() - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let fb = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate as f64);
    let hann: Vec<f64> = (0..win)
        .map(|i| {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let mut out = Tensor::zeros(vec![n_frames, cfg.n_mels]);
    let mut col = vec![0.0; cfg.n_mels];
    for t in 0..n_frames {
        let mut buf: Vec<Complex<f64>> = (0..n_fft)
            .map(|i| {
                let v = if i < win { x[t * hop + i] * hann[i] } else { 0.0 };
                Complex::new(v, 0.0)
            })
            .collect();
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (m, filter) in fb.iter().enumerate() {
            let s: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            col[m] = (s + cfg.eps).ln();
        }
        if cfg.non_negative {
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            for v in col.iter_mut() {
                *v -= min;
            }
        }
        let sum: f64 = col.iter().sum();
        if sum != 0.0 {
            for v in col.iter_mut() {
                *v /= sum;
            }
        }
        for (m, &v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::Numeric("non-finite log-mel value".into()));
            }
            out.set2(t, m, v);
        }
    }
    Ok(out)
}

/// Sliced 1D Wasserstein distance over K random unit projections.
pub fn sliced_w1(a: &Tensor, b: &Tensor, k: usize, rng: &mut SeededRng) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(CoreError::Dimension(format!(
            "feature dims {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    if a.rows() != b.rows() {
        return Err(CoreError::Dimension(format!(
            "row counts {} vs {} (caller must subsample)",
            a.rows(),
            b.rows()
        )));
    }
    if k == 0 {
        return Err(CoreError::Config("K must be >= 1".into()));
    }
    let (t, d) = (a.rows(), a.cols());
    let mut total = 0.0;
    for _ in 0..k {
        // unit vector: normalized i.i.d. standard normal
        let mut u = rng.normal_vec(d);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in u.iter_mut() {
            *v /= norm;
        }
        let project = |x: &Tensor| -> Vec<f64> {
            let mut p: Vec<f64> = (0..t)
                .map(|i| x.row(i).iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            p.sort_by(|x, y| x.partial_cmp(y).unwrap());
            p
        };
        let pa = project(a);
        let pb = project(b);
        let dk: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / t as f64;
        total += dk;
    }
    Ok(total / k as f64)
}

/// Random subsample (without replacement) of `n` rows, original order kept.
fn subsample_rows(x: &Tensor, n: usize, rng: &mut SeededRng) -> Tensor {
    let t = x.rows();
    debug_assert!(n <= t);
    let mut idx: Vec<usize> = (0..t).collect();
    // partial Fisher-Yates: first n entries are a uniform subset
    for i in 0..n {
        let j = rng.gen_range_usize(i, t);
        idx.swap(i, j);
    }
    let mut pick: Vec<usize> = idx[..n].to_vec();
    pick.sort_unstable();
    let d = x.cols();
    let mut data = Vec::with_capacity(n * d);
    for &i in &pick {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![n, d], data).expect("subsample shape")
}

/// Sliced-Wasserstein Spectral Distance between two waveforms.
pub fn swsd(
    x_ref: &[f64],
    x_gen: &[f64],
    cfg: &MelConfig,
    k: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let fa = log_mel_frames(x_ref, cfg)?;
    let fb = log_mel_frames(x_gen, cfg)?;
    let t = fa.rows().min(fb.rows());
    let fa = if fa.rows() > t { subsample_rows(&fa, t, rng) } else { fa };
    let fb = if fb.rows() > t { subsample_rows(&fb, t, rng) } else { fb };
    sliced_w1(&fa, &fb, k, rng)
}

fn mean_and_cov(x: &Tensor, reg: f64) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mu[j] += x.get2(i, j);
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = DVector::from_iterator(d, x.row(i).iter().cloned()) - &mu;
        cov += &row * row.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    for j in 0..d {
        cov[(j, j)] += reg;
    }
    (mu, cov)
}

/// PSD square root via eigendecomposition of the symmetrized matrix,
/// negative eigenvalues clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("matrix square root failed".into()));
    }
    let sqrt_vals = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()),
    );
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose())
}

/// Fréchet distance between Gaussian fits of two embedding sets:
/// ‖μa−μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½).
pub fn frechet_distance(emb_a: &Tensor, emb_b: &Tensor) -> Result<f64> {
    if emb_a.cols() != emb_b.cols() {
        return Err(CoreError::Dimension(format!(
            "embedding dims {} vs {}",
            emb_a.cols(),
            emb_b.cols()
        )));
    }
    if emb_a.rows() < 2 || emb_b.rows() < 2 {
        return Err(CoreError::Range("need at least 2 samples per set".into()));
    }
    let reg = 1e-6;
    let (mu_a, cov_a) = mean_and_cov(emb_a, reg);
    let (mu_b, cov_b) = mean_and_cov(emb_b, reg);
    let diff = &mu_a - &mu_b;
    let sqrt_ab = psd_sqrt(&(&cov_a * &cov_b))?;
    let value = diff.norm_squared() + (cov_a + cov_b - sqrt_ab * 2.0).trace();
    if !value.is_finite() {
        return Err(CoreError::Numeric("non-finite Fréchet distance".into()));
    }
    // clamp tiny negative residue from the clamped square root
    Ok(value.max(0.0))
}

/// Result of the onset-alignment proxy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DesyncResult {
    Seconds(f64),
    /// No onsets detected in the clip (distinct from perfect alignment).
    Undetected,
}

impl DesyncResult {
    pub fn seconds(self) -> Option<f64> {
        match self {
            DesyncResult::Seconds(s) => Some(s),
            DesyncResult::Undetected => None,
        }
    }
}

/// Detect onset frames by peak-picking the frame-energy derivative.
pub fn detect_onsets(clip: &Tensor) -> Vec<usize> {
    let t = clip.rows();
    if t < 2 {
        return Vec::new();
    }
    let energy: Vec<f64> = (0..t)
        .map(|i| clip.row(i).iter().map(|v| v * v).sum())
        .collect();
    let deriv: Vec<f64> = (1..t).map(|i| energy[i] - energy[i - 1]).collect();
    let max_d = deriv.iter().cloned().fold(0.0f64, f64::max);
    if max_d <= 1e-9 {
        return Vec::new();
    }
    // Threshold against the local derivative max (a few-second window) rather
    // than the global max: with a global threshold, one loud event in a long
    // clip masks the onsets of quieter events, and the desync proxy then
    // degrades with clip duration instead of with alignment quality.
    let half_window = (3.0 * LATENT_RATE_HZ) as usize;
    let mut onsets = Vec::new();
    for i in 0..deriv.len() {
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window + 1).min(deriv.len());
        let local_max = deriv[lo..hi].iter().cloned().fold(0.0f64, f64::max);
        if local_max <= 1e-9 {
            continue;
        }
        let threshold = (0.25 * local_max).max(0.05 * max_d);
        let left = if i == 0 { f64::NEG_INFINITY } else { deriv[i - 1] };
        let right = if i + 1 == deriv.len() { f64::NEG_INFINITY } else { deriv[i + 1] };
        if deriv[i] > threshold && deriv[i] >= left && deriv[i] >= right {
            onsets.push(i + 1);
        }
    }
    onsets
}

/// Mean absolute time offset between annotated events and the nearest
/// detected latent onsets.
pub fn onset_desync(event_times: &[f64], clip: &Tensor) -> Result<DesyncResult> {
    if event_times.is_empty() {
        return Err(CoreError::Range("need at least one event".into()));
    }
    let onsets = detect_onsets(clip);
    if onsets.is_empty() {
        return Ok(DesyncResult::Undetected);
    }
    let onset_times: Vec<f64> = onsets.iter().map(|&f| f as f64 / LATENT_RATE_HZ).collect();
    let mut total = 0.0;
    for &e in event_times {
        let nearest = onset_times
            .iter()
            .map(|&o| (o - e).abs())
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok(DesyncResult::Seconds(total / event_times.len() as f64))
}
