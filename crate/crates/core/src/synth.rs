//! Synthetic unpaired two-domain corpus: plucked harmonic tones (X) and
//! sustained vibrato tones (Y).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{peak_normalize, write_wav, TARGET_RATE};
use crate::features::AudioClip;
use crate::model::Domain;
use crate::Result;

const SCALE: [i32; 5] = [0, 2, 4, 7, 9];

fn midi_to_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

fn random_pitch<R: Rng>(rng: &mut R) -> f64 {
    let octave = rng.random_range(0..3);
    midi_to_hz((48 + 12 * octave + SCALE[rng.random_range(0..SCALE.len())]) as f64)
}

fn pluck<R: Rng>(out: &mut [f64], rng: &mut R, sr: f64) {
    let f0 = random_pitch(rng);
    let tau = rng.random_range(0.12..0.3);
    let attack = (0.002 * sr) as usize;
    for k in 1..=10 {
        let f = f0 * k as f64 * (1.0 + 4e-4 * (k * k) as f64);
        if f >= 0.45 * sr {
            break;
        }
        let amp = 1.0 / k as f64;
        let decay = tau / (1.0 + 0.3 * k as f64);
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let env = (i as f64 / attack as f64).min(1.0) * (-t / decay).exp();
            *o += amp * env * (TAU * f * t).sin();
        }
    }
}

fn bowed<R: Rng>(out: &mut [f64], rng: &mut R, sr: f64) {
    let f0 = random_pitch(rng);
    let rate = rng.random_range(4.5..6.5);
    let depth = rng.random_range(0.01..0.02);
    let n = out.len() as f64;
    let ramp = 0.08 * sr;
    for k in 1..=6 {
        let amp = if k % 2 == 1 { 1.0 / (k * k) as f64 } else { 0.3 / (k * k) as f64 };
        let mut phase = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let f = k as f64 * f0 * (1.0 + depth * (TAU * rate * t).sin());
            if f >= 0.45 * sr {
                break;
            }
            phase += TAU * f / sr;
            let env = (i as f64 / ramp).min(1.0).min((n - i as f64) / ramp);
            *o += amp * env * phase.sin();
        }
    }
}

/// One clip of back-to-back notes in the style of `domain`, peak-normalized.
pub fn synth_clip(domain: Domain, secs: f64, seed: u64) -> AudioClip {
    let sr = TARGET_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.index() as u64);
    let total = (secs * sr) as usize;
    let mut samples = vec![0.0; total];
    let mut pos = 0;
    while pos < total {
        let dur = match domain {
            Domain::X => rng.random_range(0.25..0.6),
            Domain::Y => rng.random_range(0.5..1.2),
        };
        let len = ((dur * sr) as usize).min(total - pos);
        let note = &mut samples[pos..pos + len];
        match domain {
            Domain::X => pluck(note, &mut rng, sr),
            Domain::Y => bowed(note, &mut rng, sr),
        }
        pos += len;
    }
    peak_normalize(&AudioClip::new(samples, TARGET_RATE))
}

/// `total_secs` of audio for `domain`, split into `clip_secs` clips.
pub fn synth_corpus(domain: Domain, total_secs: f64, clip_secs: f64, seed: u64) -> Vec<AudioClip> {
    let n = (total_secs / clip_secs).round().max(1.0) as u64;
    (0..n).map(|i| synth_clip(domain, clip_secs, seed.wrapping_mul(1000).wrapping_add(i))).collect()
}

/// Writes both domains as WAV files plus one manifest per domain; returns the manifest paths.
pub fn write_fixture(dir: &Path, total_secs: f64, clip_secs: f64, seed: u64) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(dir)?;
    let mut manifests = Vec::with_capacity(2);
    for d in Domain::BOTH {
        let mut list = String::new();
        for (i, clip) in synth_corpus(d, total_secs, clip_secs, seed).iter().enumerate() {
            let name = format!("{}_{i:03}.wav", d.tag());
            write_wav(&dir.join(&name), clip)?;
            list.push_str(&name);
            list.push('\n');
        }
        let m = dir.join(format!("{}.txt", d.tag()));
        std::fs::write(&m, list)?;
        manifests.push(m);
    }
    Ok([manifests[0].clone(), manifests[1].clone()])
}
