//! Windows, STFT/ISTFT, the frequency-axis DCT pair and the mel filterbank.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::features::AudioClip;
use crate::{Result, TimbreError};

pub const DEFAULT_N_FFT: usize = 2048;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
pub const N_MELS: usize = 256;
pub const MEL_F_MAX: f64 = 11025.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowShape {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi m / N)`.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: usize,
    pub hop: usize,
    pub shape: WindowShape,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { size: DEFAULT_N_FFT, hop: DEFAULT_HOP, shape: WindowShape::Hann }
    }
}

impl WindowSpec {
    pub fn new(size: usize, hop: usize) -> Result<Self> {
        let spec = Self { size, hop, shape: WindowShape::Hann };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(TimbreError::Domain(format!("window size {} < 4 has no overlap-add normalization", self.size)));
        }
        if self.hop == 0 || self.hop > self.size {
            return Err(TimbreError::Domain(format!("hop {} must lie in 1..={}", self.hop, self.size)));
        }
        Ok(())
    }

    /// `floor((len - size) / hop) + 1`; frames lie fully inside the signal.
    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.size {
            0
        } else {
            (len - self.size) / self.hop + 1
        }
    }

    pub fn n_bins(&self) -> usize {
        self.size / 2 + 1
    }
}

pub fn make_window(spec: &WindowSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.size as f64;
    Ok(match spec.shape {
        WindowShape::Hann => (0..spec.size).map(|m| 0.5 - 0.5 * (2.0 * PI * m as f64 / n).cos()).collect(),
    })
}

pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) || !f.is_finite() {
        return Err(TimbreError::Domain(format!("frequency {f} Hz must be finite and non-negative")));
    }
    Ok(2595.0 * (f / 700.0 + 1.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Magnitude and phase planes, `[n_bins, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub n_fft: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.magnitude.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.magnitude.ncols()
    }
}

pub fn stft(clip: &AudioClip, spec: &WindowSpec) -> Result<ComplexSpectrogram> {
    let window = make_window(spec)?;
    stft_with_window(clip, &window, spec.hop)
}

/// STFT with an arbitrary analysis window of length `n_fft`.
pub fn stft_with_window(clip: &AudioClip, window: &[f64], hop: usize) -> Result<ComplexSpectrogram> {
    let n = window.len();
    let x = &clip.samples;
    if x.len() < n {
        return Err(TimbreError::TooShort { len: x.len(), window: n });
    }
    if hop == 0 {
        return Err(TimbreError::Domain("hop must be positive".into()));
    }
    let frames = (x.len() - n) / hop + 1;
    let bins = n / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut magnitude = Array2::zeros((bins, frames));
    let mut phase = Array2::zeros((bins, frames));
    for t in 0..frames {
        let seg = &x[t * hop..t * hop + n];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(window) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            magnitude[[k, t]] = buf[k].norm();
            phase[[k, t]] = wrap_phase(buf[k].arg());
        }
    }
    Ok(ComplexSpectrogram { magnitude, phase, n_fft: n, hop, sample_rate: clip.sample_rate })
}

/// Maps `atan2` output onto `(-pi, pi]`.
fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Weighted overlap-add with squared-window normalization.
pub fn istft(spec: &ComplexSpectrogram, win: &WindowSpec) -> Result<AudioClip> {
    if spec.n_fft != win.size || spec.hop != win.hop {
        return Err(TimbreError::Shape(format!(
            "spectrogram was taken with {}/{} but window is {}/{}",
            spec.n_fft, spec.hop, win.size, win.hop
        )));
    }
    let window = make_window(win)?;
    istft_with_window(spec, &window)
}

pub fn istft_with_window(spec: &ComplexSpectrogram, window: &[f64]) -> Result<AudioClip> {
    let n = window.len();
    let bins = n / 2 + 1;
    if spec.n_bins() != bins || spec.phase.dim() != spec.magnitude.dim() {
        return Err(TimbreError::Shape(format!(
            "expected {bins} bins with matching phase, got magnitude {:?} and phase {:?}",
            spec.magnitude.dim(),
            spec.phase.dim()
        )));
    }
    let (hop, frames) = (spec.hop, spec.n_frames());
    if frames == 0 {
        return Ok(AudioClip::new(Vec::new(), spec.sample_rate));
    }
    let len = (frames - 1) * hop + n;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let scale = 1.0 / n as f64;
    for t in 0..frames {
        for k in 0..bins {
            buf[k] = Complex::from_polar(spec.magnitude[[k, t]], spec.phase[[k, t]]);
        }
        // Hermitian completion; DC and Nyquist bins must be real.
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for m in 0..n {
            out[start + m] += buf[m].re * scale * window[m];
            norm[start + m] += window[m] * window[m];
        }
    }
    let peak = norm.iter().copied().fold(0.0, f64::max);
    let floor = peak * 1e-10;
    let first = norm.iter().position(|&d| d > floor).unwrap_or(len);
    let last = norm.iter().rposition(|&d| d > floor).unwrap_or(0);
    for (i, (o, &d)) in out.iter_mut().zip(&norm).enumerate() {
        if d > floor {
            *o /= d;
        } else if i > first && i < last {
            return Err(TimbreError::ZeroNormalization(i));
        } else {
            *o = 0.0;
        }
    }
    Ok(AudioClip::new(out, spec.sample_rate))
}

/// `D[q, f] = cos(pi / F * (f + 1/2) * q)`.
pub fn dct_matrix(f: usize) -> Array2<f64> {
    Array2::from_shape_fn((f, f), |(q, k)| (PI / f as f64 * (k as f64 + 0.5) * q as f64).cos())
}

/// Exact inverse of [`dct_matrix`] keeping only cepstral indices `0..=eta`:
/// `(2/F) * w_q * cos(pi / F * (f + 1/2) * q)` with `w_0 = 1/2`.
pub fn idct_truncated_matrix(f: usize, eta: usize) -> Result<Array2<f64>> {
    if eta >= f {
        return Err(TimbreError::Domain(format!("cutoff index {eta} must be below {f}")));
    }
    let scale = 2.0 / f as f64;
    Ok(Array2::from_shape_fn((f, f), |(k, q)| {
        if q > eta {
            0.0
        } else {
            let w = if q == 0 { 0.5 } else { 1.0 };
            scale * w * (PI / f as f64 * (k as f64 + 0.5) * q as f64).cos()
        }
    }))
}

/// Spectral-envelope projector: truncated inverse DCT composed with the DCT.
pub fn envelope_matrix(f: usize, eta: usize) -> Result<Array2<f64>> {
    Ok(idct_truncated_matrix(f, eta)?.dot(&dct_matrix(f)))
}

/// Type-II DCT of every column (frame) along the frequency axis.
pub fn dct_freq(m: &Array2<f64>) -> Array2<f64> {
    dct_matrix(m.nrows()).dot(m)
}

pub fn idct_truncated(c: &Array2<f64>, eta: usize) -> Result<Array2<f64>> {
    Ok(idct_truncated_matrix(c.nrows(), eta)?.dot(c))
}

/// Triangular filters equally spaced on the mel axis, `[n_mels, n_fft/2 + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    pub f_min: f64,
    pub f_max: f64,
    pub n_fft: usize,
    pub sample_rate: u32,
    /// `n_mels + 2` edge frequencies in Hz; filter `i` peaks at `edges_hz[i + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_fft: usize, sample_rate: u32, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if n_mels == 0 || n_fft < 4 {
            return Err(TimbreError::Domain(format!("need n_mels > 0 and n_fft >= 4, got {n_mels}, {n_fft}")));
        }
        if !(f_min < f_max) || f_max > sample_rate as f64 / 2.0 {
            return Err(TimbreError::Domain(format!(
                "band [{f_min}, {f_max}] Hz must be non-empty and below Nyquist {}",
                sample_rate as f64 / 2.0
            )));
        }
        let (mel_lo, mel_hi) = (hz_to_mel(f_min)?, hz_to_mel(f_max)?);
        let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
        let edges_hz: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(mel_lo + step * i as f64)).collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = Array2::zeros((n_mels, bins));
        for i in 0..n_mels {
            let (lo, mid, hi) = (edges_hz[i], edges_hz[i + 1], edges_hz[i + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                if w > 0.0 {
                    weights[[i, k]] = w;
                }
            }
            if weights.row(i).iter().all(|&w| w == 0.0) {
                return Err(TimbreError::EmptyFilter(i));
            }
        }
        Ok(Self { weights, f_min, f_max, n_fft, sample_rate, edges_hz })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    /// Peak frequency of every filter.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    /// Non-zero support of each row as `(first_bin, weights)`.
    pub fn sparse_rows(&self) -> Vec<(usize, Vec<f64>)> {
        self.weights
            .axis_iter(Axis(0))
            .map(|row| {
                let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w != 0.0).unwrap_or(0);
                (first, row.iter().skip(first).take(last + 1 - first).copied().collect())
            })
            .collect()
    }
}

/// Default bank: 256 filters over [0, 11025] Hz.
pub fn make_mel_filterbank(n_fft: usize, sample_rate: u32) -> Result<MelFilterbank> {
    MelFilterbank::new(n_fft, sample_rate, N_MELS, 0.0, MEL_F_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hz_to_mel_examples() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        assert!((hz_to_mel(700.0).unwrap() - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0).unwrap() - 781.17).abs() < 0.01);
        assert!((hz_to_mel(11025.0).unwrap() - 3176.318_435_512_582).abs() < 1e-9);
        assert!((hz_to_mel(11025.0).unwrap() - 3176.0).abs() < 0.5);
        assert!(hz_to_mel(-1.0).is_err());
        assert!(hz_to_mel(f64::NAN).is_err());
    }

    #[test]
    fn hz_to_mel_strictly_increasing_on_grid() {
        let mut prev = -1.0;
        for f in 0..=11025 {
            let m = hz_to_mel(f as f64).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn small_periodic_hann() {
        let w = make_window(&WindowSpec::new(4, 1).unwrap()).unwrap();
        let want = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_windows_rejected() {
        assert!(WindowSpec::new(1, 1).is_err());
        assert!(WindowSpec::new(3, 1).is_err());
        assert!(WindowSpec::new(8, 0).is_err());
        assert!(WindowSpec::new(8, 9).is_err());
    }

    #[test]
    fn hann_is_symmetric_and_bounded() {
        let w = make_window(&WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 2048);
        for m in 1..2048 {
            assert!((w[m] - w[2048 - m]).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&w[m]));
        }
    }

    #[test]
    fn squared_hann_overlap_add_is_constant() {
        let spec = WindowSpec::default();
        let w = make_window(&spec).unwrap();
        let frames = 40;
        let len = (frames - 1) * spec.hop + spec.size;
        let mut acc = vec![0.0; len];
        for t in 0..frames {
            for m in 0..spec.size {
                acc[t * spec.hop + m] += w[m] * w[m];
            }
        }
        let interior = &acc[spec.size..len - spec.size];
        let first = interior[0];
        assert!((first - 3.0).abs() < 1e-10);
        assert!(interior.iter().all(|v| (v - first).abs() < 1e-10));
    }

    #[test]
    fn filterbank_edges_are_arithmetic_in_mel() {
        let fb = make_mel_filterbank(2048, 22050).unwrap();
        assert_eq!(fb.edges_hz.len(), 258);
        let d = hz_to_mel(11025.0).unwrap() / 257.0;
        for (i, &e) in fb.edges_hz.iter().enumerate() {
            assert!((hz_to_mel(e).unwrap() - d * i as f64).abs() < 1e-8);
        }
    }

    #[test]
    fn filterbank_rows_and_columns_are_covered() {
        let fb = make_mel_filterbank(2048, 22050).unwrap();
        assert_eq!(fb.weights.dim(), (256, 1025));
        for row in fb.weights.rows() {
            assert!(row.sum() > 0.0);
        }
        // bin 0 (DC) sits on the first lower edge and the last bin on the upper edge
        for k in 1..1024 {
            assert!(fb.weights.column(k).sum() > 0.0, "bin {k}");
        }
        assert!(fb.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn filterbank_too_fine_for_resolution_is_rejected() {
        assert!(matches!(MelFilterbank::new(64, 22050, 256, 0.0, 11025.0), Err(TimbreError::EmptyFilter(_))));
    }

    #[test]
    fn dct_of_constant_column() {
        let m = Array2::from_elem((256, 2), 1.5);
        let c = dct_freq(&m);
        assert!((c[[0, 0]] - 256.0 * 1.5).abs() < 1e-9);
        assert!(c.slice(ndarray::s![1.., ..]).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn idct_truncation_rules() {
        let c = Array2::zeros((8, 1));
        assert!(idct_truncated(&c, 8).is_err());
        assert!(idct_truncated(&c, 7).is_ok());
    }
}
