//! The four-channel timbre representation.

use ndarray::{Array2, Axis};

use crate::dsp::{self, ComplexSpectrogram, MelFilterbank, WindowSpec};
use crate::{Result, TimbreError};

pub const GAMMA: f64 = 0.6;
pub const ETA: usize = 15;
pub const N_CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = ["mel", "mfcc", "sdiff", "senv"];

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Mel, MFCC, spectral difference and spectral envelope, all `[256, T]`,
/// plus the `[1025, T]` STFT phase retained for resynthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub mel: Array2<f64>,
    pub mfcc: Array2<f64>,
    pub sdiff: Array2<f64>,
    pub senv: Array2<f64>,
    pub phase: Array2<f64>,
    pub gamma: f64,
    pub eta: usize,
    pub sample_rate: u32,
}

impl FeatureStack {
    /// Derives the other three channels from `mel`.
    pub fn from_mel(mel: Array2<f64>, phase: Array2<f64>, gamma: f64, eta: usize, sample_rate: u32) -> Result<Self> {
        if mel.ncols() != phase.ncols() {
            return Err(TimbreError::Shape(format!("mel has {} frames, phase {}", mel.ncols(), phase.ncols())));
        }
        let mfcc = dsp::dct_freq(&mel);
        let sdiff = spectral_difference(&mel);
        let senv = dsp::idct_truncated(&mfcc, eta)?;
        Ok(Self { mel, mfcc, sdiff, senv, phase, gamma, eta, sample_rate })
    }

    pub fn n_bands(&self) -> usize {
        self.mel.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.ncols()
    }

    pub fn channels(&self) -> [&Array2<f64>; N_CHANNELS] {
        [&self.mel, &self.mfcc, &self.sdiff, &self.senv]
    }

    /// Largest deviation of the derived channels from their definitions.
    pub fn coherence_error(&self) -> Result<f64> {
        let mfcc = dsp::dct_freq(&self.mel);
        let sdiff = spectral_difference(&self.mel);
        let senv = dsp::idct_truncated(&mfcc, self.eta)?;
        Ok([max_abs_diff(&mfcc, &self.mfcc), max_abs_diff(&sdiff, &self.sdiff), max_abs_diff(&senv, &self.senv)]
            .into_iter()
            .fold(0.0, f64::max))
    }

    /// Frames `start..start + len` of every channel and the phase.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<FeatureStack> {
        if start + len > self.n_frames() {
            return Err(TimbreError::Shape(format!(
                "frames {start}..{} exceed {} available",
                start + len,
                self.n_frames()
            )));
        }
        let cut = |m: &Array2<f64>| m.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(FeatureStack {
            mel: cut(&self.mel),
            mfcc: cut(&self.mfcc),
            sdiff: cut(&self.sdiff),
            senv: cut(&self.senv),
            phase: cut(&self.phase),
            ..*self
        })
    }
}

pub(crate) fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn power_compress(mag: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TimbreError::Domain(format!("gamma {gamma} must lie in (0, 1]")));
    }
    Ok(mag.mapv(|v| v.max(0.0).powf(gamma)))
}

pub fn mel_spectrogram(power_spec: &Array2<f64>, fb: &MelFilterbank) -> Result<Array2<f64>> {
    if power_spec.nrows() != fb.n_bins() {
        return Err(TimbreError::Shape(format!(
            "spectrogram has {} bins, filterbank expects {}",
            power_spec.nrows(),
            fb.n_bins()
        )));
    }
    Ok(fb.weights.dot(power_spec))
}

/// `ReLU(m[:, n+1] - m[:, n])`, with a zero final column.
pub fn spectral_difference(mel: &Array2<f64>) -> Array2<f64> {
    let (f, t) = mel.dim();
    Array2::from_shape_fn((f, t), |(k, n)| if n + 1 < t { (mel[[k, n + 1]] - mel[[k, n]]).max(0.0) } else { 0.0 })
}

pub fn spectral_envelope(mel: &Array2<f64>, eta: usize) -> Result<Array2<f64>> {
    dsp::idct_truncated(&dsp::dct_freq(mel), eta)
}

/// Reusable extraction context holding the window and filterbank.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub window: WindowSpec,
    pub filterbank: MelFilterbank,
    pub gamma: f64,
    pub eta: usize,
    pub sample_rate: u32,
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(WindowSpec::default(), dsp::DEFAULT_SAMPLE_RATE, GAMMA, ETA).expect("default extractor is valid")
    }
}

impl Extractor {
    pub fn new(window: WindowSpec, sample_rate: u32, gamma: f64, eta: usize) -> Result<Self> {
        window.validate()?;
        let filterbank = dsp::make_mel_filterbank(window.size, sample_rate)?;
        if eta >= filterbank.n_mels() {
            return Err(TimbreError::Domain(format!("eta {eta} must be below {}", filterbank.n_mels())));
        }
        Ok(Self { window, filterbank, gamma, eta, sample_rate })
    }

    pub fn spectrogram(&self, clip: &AudioClip) -> Result<ComplexSpectrogram> {
        if clip.sample_rate != self.sample_rate {
            return Err(TimbreError::SampleRate { found: clip.sample_rate, expected: self.sample_rate });
        }
        if clip.samples.iter().any(|v| !v.is_finite()) {
            return Err(TimbreError::NonFinite("audio samples".into()));
        }
        dsp::stft(clip, &self.window)
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureStack> {
        let spec = self.spectrogram(clip)?;
        let mel = mel_spectrogram(&power_compress(&spec.magnitude, self.gamma)?, &self.filterbank)?;
        FeatureStack::from_mel(mel, spec.phase, self.gamma, self.eta, self.sample_rate)
    }
}

/// Extraction with the default 22050 Hz, 2048/256, gamma 0.6, eta 15 setup.
pub fn extract_stack(clip: &AudioClip) -> Result<FeatureStack> {
    Extractor::default().extract(clip)
}

/// Per-channel affine statistics mapping features to roughly unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; N_CHANNELS],
    pub std: [f32; N_CHANNELS],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.0; N_CHANNELS], std: [1.0; N_CHANNELS] }
    }
}

const MIN_STD: f64 = 1e-6;

impl ChannelStats {
    pub fn fit<'a>(stacks: impl IntoIterator<Item = &'a FeatureStack>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0f64; N_CHANNELS];
        let mut sq = [0.0f64; N_CHANNELS];
        for s in stacks {
            for (c, m) in s.channels().iter().enumerate() {
                sum[c] += m.sum();
                sq[c] += m.iter().map(|v| v * v).sum::<f64>();
            }
            n += s.mel.len();
        }
        if n == 0 {
            return Err(TimbreError::Domain("cannot fit normalization on an empty corpus".into()));
        }
        let mut out = Self::default();
        for c in 0..N_CHANNELS {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = var.sqrt().max(MIN_STD) as f32;
        }
        Ok(out)
    }

    /// Normalized `[4, F, T]` network input, channel order mel, mfcc, sdiff, senv.
    pub fn normalize<T: timbre_nn::Real>(&self, stack: &FeatureStack) -> timbre_nn::Tensor<T> {
        let (f, t) = stack.mel.dim();
        let mut data = Vec::with_capacity(N_CHANNELS * f * t);
        for (c, m) in stack.channels().iter().enumerate() {
            let (mu, sd) = (self.mean[c] as f64, self.std[c] as f64);
            data.extend(m.iter().map(|&v| T::from_f64_lossy((v - mu) / sd)));
        }
        timbre_nn::Tensor::new(&[N_CHANNELS, f, t], data).expect("shape matches data")
    }

    /// Inverse of [`normalize`](Self::normalize) for one channel plane.
    pub fn denormalize_channel<T: timbre_nn::Real>(&self, c: usize, plane: &[T], f: usize, t: usize) -> Result<Array2<f64>> {
        if plane.len() != f * t || c >= N_CHANNELS {
            return Err(TimbreError::Shape(format!("channel {c} plane of {} values is not {f}x{t}", plane.len())));
        }
        let (mu, sd) = (self.mean[c] as f64, self.std[c] as f64);
        Ok(Array2::from_shape_fn((f, t), |(i, j)| plane[i * t + j].to_f64_lossy() * sd + mu))
    }

    /// Denormalized mel channel of a `[4, F, T]` tensor.
    pub fn denormalize_mel<T: timbre_nn::Real>(&self, x: &timbre_nn::Tensor<T>) -> Result<Array2<f64>> {
        let (_, f, t) = x.chw()?;
        self.denormalize_channel(0, &x.data()[..f * t], f, t)
    }
}

/// Column sums as a quick per-frame energy proxy.
pub fn frame_energy(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(0)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_compress_examples() {
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 4.0]).unwrap();
        let p = power_compress(&m, 0.6).unwrap();
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 1.0);
        assert!((p[[0, 2]] - 2.2974).abs() < 1e-4);
        assert!(power_compress(&m, 0.0).is_err());
        assert!(power_compress(&m, 1.5).is_err());
    }

    #[test]
    fn spectral_difference_pads_last_column() {
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 3.0, 1.0]).unwrap();
        assert_eq!(spectral_difference(&m).row(0).to_vec(), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let clip = AudioClip::new(vec![0.0; 4096], 44100);
        assert!(matches!(extract_stack(&clip), Err(TimbreError::SampleRate { found: 44100, .. })));
    }

    #[test]
    fn stats_round_trip() {
        let clip = AudioClip::new((0..8192).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(), 22050);
        let s = extract_stack(&clip).unwrap();
        let stats = ChannelStats::fit([&s]).unwrap();
        let x = stats.normalize::<f32>(&s);
        let mel = stats.denormalize_mel(&x).unwrap();
        let scale = s.mel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(&mel, &s.mel) < 1e-5 * scale.max(1.0));
    }
}
