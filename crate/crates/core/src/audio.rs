//! WAV input/output, resampling, manifests, patch segmentation and the feature cache.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::container::Container;
use crate::features::{AudioClip, Extractor, FeatureStack};
use crate::model::Domain;
use crate::{Result, TimbreError};

pub const TARGET_RATE: u32 = 22050;
pub const SUPPORTED_RATES: [u32; 3] = [22050, 44100, 48000];
pub const PEAK_LEVEL: f64 = 0.9;

fn wav_err(path: &Path, e: hound::Error) -> TimbreError {
    match e {
        hound::Error::Unsupported => TimbreError::UnsupportedWav(format!("{}: fmt chunk describes an unsupported codec", path.display())),
        hound::Error::IoError(io) => TimbreError::Wav { path: path.to_path_buf(), source: hound::Error::IoError(io) },
        other => TimbreError::Wav { path: path.to_path_buf(), source: other },
    }
}

/// Mono clip with samples in `[-1, 1]`; stereo is averaged.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(TimbreError::UnsupportedWav(format!(
            "{}: fmt chunk declares {} channels, expected 1 or 2",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>()
        }
        (fmt, bits) => {
            return Err(TimbreError::UnsupportedWav(format!(
                "{}: fmt chunk declares {bits}-bit {fmt:?} samples; only 16-bit PCM and 32-bit float are read",
                path.display()
            )))
        }
    }
    .map_err(|e| wav_err(path, e))?;
    let ch = spec.channels as usize;
    if !interleaved.len().is_multiple_of(ch) {
        return Err(TimbreError::UnsupportedWav(format!("{}: data chunk ends mid-frame", path.display())));
    }
    let samples: Vec<f64> = interleaved.chunks_exact(ch).map(|f| f.iter().sum::<f64>() / ch as f64).collect();
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(TimbreError::NonFinite(format!("samples of {}", path.display())));
    }
    Ok(AudioClip::new(samples, spec.sample_rate))
}

/// 16-bit mono PCM; samples are clipped to `[-1, 1)`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Scales the clip so its peak is [`PEAK_LEVEL`]; silence is returned unchanged.
pub fn peak_normalize(clip: &AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak == 0.0 {
        return clip.clone();
    }
    let k = PEAK_LEVEL / peak;
    AudioClip::new(clip.samples.iter().map(|v| v * k).collect(), clip.sample_rate)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

const SINC_ZEROS: f64 = 32.0;
const KAISER_BETA: f64 = 10.0;
const CUTOFF: f64 = 0.92;

/// Kaiser-windowed sinc polyphase resampling to 22050 Hz.
pub fn resample(clip: &AudioClip, target: u32) -> Result<AudioClip> {
    if !SUPPORTED_RATES.contains(&clip.sample_rate) || !SUPPORTED_RATES.contains(&target) {
        return Err(TimbreError::SampleRate { found: clip.sample_rate, expected: target });
    }
    if clip.sample_rate == target {
        return Ok(clip.clone());
    }
    let (src, dst) = (clip.sample_rate as u64, target as u64);
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    // Cutoff relative to the input rate.
    let fc = CUTOFF * 0.5 * (dst as f64 / src as f64).min(1.0);
    let half = (SINC_ZEROS / (2.0 * fc)).ceil() as i64;
    let taps_per_phase = (2 * half + 1) as usize;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps_per_phase)
                .map(|j| {
                    let t = (j as i64 - half) as f64 - frac;
                    let x = 2.0 * fc * t;
                    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                    let r = t / (half as f64 + 1.0);
                    let win = if r.abs() >= 1.0 { 0.0 } else { bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA) };
                    2.0 * fc * sinc * win
                })
                .collect()
        })
        .collect();
    let x = &clip.samples;
    let n_out = (x.len() as u64 * dst / src) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let i = base + j as i64 - half;
            if i >= 0 && (i as usize) < x.len() {
                acc += h * x[i as usize];
            }
        }
        out.push(acc);
    }
    Ok(AudioClip::new(out, target))
}

/// Load, resample to 22050 Hz and peak-normalize.
pub fn load_clip(path: &Path) -> Result<AudioClip> {
    let clip = load_wav(path)?;
    Ok(peak_normalize(&resample(&clip, TARGET_RATE)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration_secs: f64,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub domain: Domain,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Reads one WAV path per line, relative paths resolved against the manifest's directory.
    pub fn load(path: &Path, domain: Domain, split: Split) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut paths: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect();
        paths.sort();
        paths.dedup();
        Self::from_paths(paths, domain, split)
    }

    pub fn from_paths(mut paths: Vec<PathBuf>, domain: Domain, split: Split) -> Result<Self> {
        paths.sort();
        let mut entries = Vec::with_capacity(paths.len());
        for p in paths {
            let reader = hound::WavReader::open(&p).map_err(|e| wav_err(&p, e))?;
            let spec = reader.spec();
            let duration_secs = reader.duration() as f64 / spec.sample_rate as f64;
            if duration_secs <= 0.0 {
                return Err(TimbreError::UnsupportedWav(format!("{}: empty data chunk", p.display())));
            }
            entries.push(ManifestEntry { path: p, duration_secs, sample_rate: spec.sample_rate });
        }
        if entries.is_empty() {
            return Err(TimbreError::Config(format!("manifest for domain {} lists no files", domain.tag())));
        }
        Ok(Self { domain, split, entries })
    }

    pub fn total_secs(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_secs).sum()
    }
}

/// Non-overlapping patch starts and the range of valid random-crop offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub patch_starts: Vec<usize>,
    pub max_offset: usize,
}

/// `None` (with a warning) when the stack is shorter than one patch.
pub fn segment_features(stack: &FeatureStack, patch_frames: usize) -> Option<Segmentation> {
    let t = stack.n_frames();
    if patch_frames == 0 || t < patch_frames {
        log::warn!("skipping clip with {t} frames, shorter than a {patch_frames}-frame patch");
        return None;
    }
    Some(Segmentation { patch_starts: (0..t / patch_frames).map(|i| i * patch_frames).collect(), max_offset: t - patch_frames })
}

fn array_entry(c: &mut Container, name: &str, m: &Array2<f64>) -> Result<()> {
    c.push(name, &[m.nrows(), m.ncols()], m.iter().map(|&v| v as f32).collect())
}

fn array_from(c: &Container, name: &str) -> Result<Array2<f64>> {
    let e = c.require(name)?;
    match e.dims[..] {
        [r, k] => Ok(Array2::from_shape_vec((r, k), e.data.iter().map(|&v| v as f64).collect())
            .map_err(|err| TimbreError::Format(format!("{name}: {err}")))?),
        _ => Err(TimbreError::Format(format!("{name} must be rank 2, has dims {:?}", e.dims))),
    }
}

/// Stores mel and phase; the derived channels are rebuilt on load.
pub fn stack_to_container(stack: &FeatureStack) -> Result<Container> {
    let mut c = Container::new();
    c.push_str("meta.kind", "feature_stack")?;
    c.push_str("meta.gamma", &format!("{:e}", stack.gamma))?;
    c.push_u64("meta.eta", stack.eta as u64)?;
    c.push_u64("meta.sample_rate", stack.sample_rate as u64)?;
    array_entry(&mut c, "mel", &stack.mel)?;
    array_entry(&mut c, "phase", &stack.phase)?;
    Ok(c)
}

pub fn stack_from_container(c: &Container) -> Result<FeatureStack> {
    if c.string("meta.kind")? != "feature_stack" {
        return Err(TimbreError::Format("container does not hold a feature stack".into()));
    }
    let gamma: f64 = c.string("meta.gamma")?.parse().map_err(|_| TimbreError::Format("bad gamma".into()))?;
    let eta = c.u64("meta.eta")? as usize;
    let sample_rate = u32::try_from(c.u64("meta.sample_rate")?).map_err(|_| TimbreError::Format("bad sample rate".into()))?;
    FeatureStack::from_mel(array_from(c, "mel")?, array_from(c, "phase")?, gamma, eta, sample_rate)
}

pub fn save_stack(path: &Path, stack: &FeatureStack) -> Result<()> {
    stack_to_container(stack)?.save(path)
}

pub fn load_stack(path: &Path) -> Result<FeatureStack> {
    stack_from_container(&Container::load(path)?)
}

/// Content-addressed cache of extracted stacks.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub dir: PathBuf,
}

impl FeatureCache {
    pub const ENV_VAR: &'static str = "TIMBRE_CACHE_DIR";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var_os(Self::ENV_VAR).filter(|v| !v.is_empty()).map(Self::new)
    }

    fn key(wav: &Path) -> Result<String> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(std::fs::read(wav)?);
        Ok(hex::encode(&digest[..16]))
    }

    /// Extracts `wav`, reusing a cached stack when the file contents match.
    /// Misses return the stored (single-precision) stack so hits and misses agree.
    pub fn extract(&self, wav: &Path, extractor: &Extractor) -> Result<FeatureStack> {
        let path = self.dir.join(format!("{}.feat", Self::key(wav)?));
        if path.exists() {
            match load_stack(&path) {
                Ok(s) => return Ok(s),
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
            }
        }
        let c = stack_to_container(&extractor.extract(&load_clip(wav)?)?)?;
        std::fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("tmp");
        c.save(&tmp)?;
        std::fs::rename(&tmp, &path)?;
        stack_from_container(&c)
    }
}

/// Extracts every manifest entry, through the cache when one is given.
pub fn extract_manifest(manifest: &CorpusManifest, cache: Option<&FeatureCache>, jobs: usize) -> Result<Vec<FeatureStack>> {
    let extractor = Extractor::default();
    let run = |e: &ManifestEntry| match cache {
        Some(c) => c.extract(&e.path, &extractor),
        None => extractor.extract(&load_clip(&e.path)?),
    };
    if jobs <= 1 {
        return manifest.entries.iter().map(run).collect();
    }
    let chunk = manifest.entries.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .entries
            .chunks(chunk.max(1))
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(manifest.entries.len());
        for h in handles {
            out.extend(h.join().map_err(|_| TimbreError::Domain("extraction worker panicked".into()))??);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_matches_reference() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(10.0) - 2_815.716_628_466_254).abs() < 1e-8);
    }

    #[test]
    fn rate_ratios() {
        assert_eq!(gcd(48000, 22050), 150);
        assert_eq!(gcd(44100, 22050), 22050);
    }
}
