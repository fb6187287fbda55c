//! End-to-end operations shared by the command line and the acceptance suite.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timbre_nn::Tensor;

use crate::audio::{self, CorpusManifest, FeatureCache, Split};
use crate::config::RunConfig;
use crate::dsp::{self, WindowSpec};
use crate::features::{AudioClip, ChannelStats, Extractor, FeatureStack};
use crate::losses::LossReport;
use crate::model::Domain;
use crate::recon;
use crate::train::{self, sample_style, TrainState, TrainingCorpus};
use crate::{Result, TimbreError};

/// Feature stacks of both training domains.
#[derive(Debug, Clone)]
pub struct DomainStacks {
    pub stacks: [Vec<FeatureStack>; 2],
}

impl DomainStacks {
    pub fn from_clips(x: &[AudioClip], y: &[AudioClip]) -> Result<Self> {
        let ex = Extractor::default();
        let run = |clips: &[AudioClip]| clips.iter().map(|c| ex.extract(c)).collect::<Result<Vec<_>>>();
        Ok(Self { stacks: [run(x)?, run(y)?] })
    }

    pub fn from_manifests(x: &Path, y: &Path, cache: Option<&FeatureCache>, jobs: usize) -> Result<Self> {
        let load = |p: &Path, d: Domain| -> Result<Vec<FeatureStack>> {
            audio::extract_manifest(&CorpusManifest::load(p, d, Split::Train)?, cache, jobs)
        };
        Ok(Self { stacks: [load(x, Domain::X)?, load(y, Domain::Y)?] })
    }

    /// Per-domain channel statistics over the training split.
    pub fn stats(&self) -> Result<[ChannelStats; 2]> {
        Ok([ChannelStats::fit(&self.stacks[0])?, ChannelStats::fit(&self.stacks[1])?])
    }

    pub fn corpus(&self, stats: &[ChannelStats; 2], patch_frames: usize) -> Result<TrainingCorpus> {
        TrainingCorpus::new(&self.stacks[0], &self.stacks[1], stats, patch_frames)
    }
}

/// Runs iterations until `state.iteration == until`, calling `on_step` after each.
pub fn train_until(
    state: &mut TrainState,
    corpus: &TrainingCorpus,
    until: u64,
    mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let mut out = Vec::new();
    while state.iteration < until {
        let r = state.step(corpus)?;
        on_step(state, &r)?;
        out.push(r);
    }
    Ok(out)
}

/// Trains from scratch, writing `metrics.log`, `ckpt_<iter>.ckpt` every
/// `checkpoint_every` iterations and `final.ckpt` into `out_dir`.
pub fn train_to_dir(
    config: RunConfig,
    data: &DomainStacks,
    out_dir: &Path,
    checkpoint_every: u64,
) -> Result<(TrainState, Vec<LossReport>)> {
    std::fs::create_dir_all(out_dir)?;
    let stats = data.stats()?;
    let corpus = data.corpus(&stats, config.train.patch_frames)?;
    let mut state = TrainState::new(config, stats)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.log"))?);
    let reports = train_until(&mut state, &corpus, config.train.max_iters, |s, r| {
        writeln!(log, "{}", train::metrics_line(s.iteration, r))?;
        if checkpoint_every > 0 && s.iteration % checkpoint_every == 0 {
            train::save_checkpoint(s, &out_dir.join(format!("ckpt_{:06}.ckpt", s.iteration)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    train::save_checkpoint(&state, &out_dir.join("final.ckpt"))?;
    Ok((state, reports))
}

/// Style vector drawn from a seeded generator.
pub fn seeded_style(seed: u64, dim: usize) -> Vec<f32> {
    sample_style(&mut ChaCha8Rng::seed_from_u64(seed), dim)
}

/// Edge-pads the frame axis up to a multiple of `m`.
fn pad_frames(x: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let (c, f, t) = x.chw()?;
    let padded = t.div_ceil(m).max(1) * m;
    if padded == t {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(c * f * padded);
    for row in x.data().chunks_exact(t) {
        data.extend_from_slice(row);
        let last = row[t - 1];
        data.extend(std::iter::repeat_n(last, padded - t));
    }
    Ok(Tensor::new(&[c, f, padded], data)?)
}

/// Translated mel spectrograms in feature units, one per style vector.
pub fn translate_stack(state: &TrainState, stack: &FeatureStack, source: Domain, styles: &[Vec<f32>]) -> Result<Vec<ndarray::Array2<f64>>> {
    let model = &state.model;
    let t = stack.n_frames();
    let x = pad_frames(&state.stats[source.index()].normalize::<f32>(stack), model.arch.min_extent())?;
    let target_stats = &state.stats[source.other().index()];
    styles
        .iter()
        .map(|z| {
            let out = crate::train::crop_frames(&model.translate(&x, source, z)?, 0, t)?;
            target_stats.denormalize_mel(&out)
        })
        .collect()
}

/// NNLS inversion of `mel`, reusing `phase`, then overlap-add; peak-normalized.
pub fn render(mel: &ndarray::Array2<f64>, stack: &FeatureStack, config: &RunConfig) -> Result<AudioClip> {
    let win = WindowSpec::new(dsp::DEFAULT_N_FFT, dsp::DEFAULT_HOP)?;
    let fb = dsp::make_mel_filterbank(win.size, stack.sample_rate)?;
    let clip = recon::resynthesize(mel, &stack.phase, &fb, &config.nnls, &win, stack.gamma)?;
    if clip.samples.iter().any(|v| !v.is_finite()) {
        return Err(TimbreError::NonFinite("resynthesized audio".into()));
    }
    Ok(audio::peak_normalize(&clip))
}

/// Translates a clip with style `z` and resynthesizes it.
pub fn transfer_clip(state: &TrainState, clip: &AudioClip, source: Domain, z: &[f32]) -> Result<AudioClip> {
    let stack = Extractor::default().extract(clip)?;
    let mel = translate_stack(state, &stack, source, &[z.to_vec()])?.remove(0);
    render(&mel, &stack, &state.config)
}

/// `steps` evenly spaced values from `from` to `to`.
pub fn sweep(from: f64, to: f64, steps: usize) -> Result<Vec<f32>> {
    if steps < 2 || !from.is_finite() || !to.is_finite() {
        return Err(TimbreError::Config(format!("sweep needs at least 2 steps and finite bounds, got {steps} over [{from}, {to}]")));
    }
    Ok((0..steps).map(|i| (from + (to - from) * i as f64 / (steps - 1) as f64) as f32).collect())
}

/// Clip rendered once per sweep value of style dimension `dim`.
pub fn interpolate_clip(
    state: &TrainState,
    clip: &AudioClip,
    source: Domain,
    z: &[f32],
    dim: usize,
    values: &[f32],
) -> Result<Vec<AudioClip>> {
    let stack = Extractor::default().extract(clip)?;
    if dim >= state.model.arch.style_dim {
        return Err(TimbreError::Domain(format!("style dimension {dim} outside 0..{}", state.model.arch.style_dim)));
    }
    let styles: Vec<Vec<f32>> = values
        .iter()
        .map(|&v| {
            let mut zz = z.to_vec();
            zz[dim] = v;
            zz
        })
        .collect();
    translate_stack(state, &stack, source, &styles)?.iter().map(|mel| render(mel, &stack, &state.config)).collect()
}

/// Extract then resynthesize without translation.
pub fn reconstruct_clip(clip: &AudioClip, config: &RunConfig) -> Result<AudioClip> {
    let stack = Extractor::default().extract(clip)?;
    render(&stack.mel, &stack, config)
}
