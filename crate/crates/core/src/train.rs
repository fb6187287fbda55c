//! Optimizer, iteration logic, checkpoints and the metrics log.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use timbre_nn::{Binding, Gradients, Graph, ParamStore, Real, Tensor, Var};

use crate::config::{RunConfig, TrainConfig};
use crate::container::Container;
use crate::features::{ChannelStats, FeatureStack, N_CHANNELS};
use crate::losses::{self, IntrinsicConsistency, LossReport};
use crate::model::{Domain, Translator};
use crate::{Result, TimbreError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter store, with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    /// Applies one update. `grads[i]` belongs to the i-th parameter; `None` is a zero gradient.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TimbreError::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(TimbreError::Shape(format!("gradient of {} has shape {:?}", p.name, g.shape())));
                }
                if !g.is_finite() {
                    return Err(TimbreError::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(BETA1), T::from_f64_lossy(BETA2));
        let (one, eps) = (T::one(), T::from_f64_lossy(ADAM_EPS));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let decay = T::from_f64_lossy(lr * wd);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = grads[i].as_ref().map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                w[j] = w[j] - decay * w[j];
                w[j] = w[j] - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `dim` independent standard-normal draws.
pub fn sample_style<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Normalized full-length feature tensors for both domains.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub clips: [Vec<Tensor<f32>>; 2],
}

impl TrainingCorpus {
    /// Normalizes every stack with its domain's statistics, dropping clips shorter than `patch_frames`.
    pub fn new(x: &[FeatureStack], y: &[FeatureStack], stats: &[ChannelStats; 2], patch_frames: usize) -> Result<Self> {
        let prep = |stacks: &[FeatureStack], st: &ChannelStats, tag: &str| -> Result<Vec<Tensor<f32>>> {
            let kept: Vec<_> = stacks
                .iter()
                .filter(|s| {
                    let ok = s.n_frames() >= patch_frames;
                    if !ok {
                        log::warn!("skipping {tag} clip with {} frames (< {patch_frames})", s.n_frames());
                    }
                    ok
                })
                .map(|s| st.normalize::<f32>(s))
                .collect();
            if kept.is_empty() {
                return Err(TimbreError::Domain(format!("domain {tag} has no clip with at least {patch_frames} frames")));
            }
            Ok(kept)
        };
        Ok(Self { clips: [prep(x, &stats[0], "x")?, prep(y, &stats[1], "y")?] })
    }

    /// Uniform over clips, then uniform over valid offsets.
    pub fn sample_patch<R: Rng + ?Sized>(&self, d: Domain, patch_frames: usize, rng: &mut R) -> Result<Tensor<f32>> {
        let clips = &self.clips[d.index()];
        let clip = &clips[rng.random_range(0..clips.len())];
        let (_, _, t) = clip.chw()?;
        let offset = rng.random_range(0..=t - patch_frames);
        crop_frames(clip, offset, patch_frames)
    }
}

/// Columns `offset..offset + len` of a `[C, F, T]` tensor.
pub fn crop_frames<T: Real>(x: &Tensor<T>, offset: usize, len: usize) -> Result<Tensor<T>> {
    let (c, f, t) = x.chw()?;
    if offset + len > t {
        return Err(TimbreError::Shape(format!("frames {offset}..{} exceed {t}", offset + len)));
    }
    let mut data = Vec::with_capacity(c * f * len);
    for row in 0..c * f {
        data.extend_from_slice(&x.data()[row * t + offset..row * t + offset + len]);
    }
    Ok(Tensor::new(&[c, f, len], data)?)
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub model: Translator<f32>,
    pub adam_gen: Adam<f32>,
    pub adam_disc: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub stats: [ChannelStats; 2],
    pub config: RunConfig,
}

fn collect_grads(grads: &Gradients<f32>, binding: &Binding) -> Vec<Option<Tensor<f32>>> {
    binding.vars().iter().map(|&v| grads.get(v).cloned()).collect()
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    g.scalar(v) as f64
}

impl TrainState {
    pub fn new(config: RunConfig, stats: [ChannelStats; 2]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = Translator::new(config.train.arch, &mut rng)?;
        Ok(Self {
            iteration: 0,
            adam_gen: Adam::new(&model.gen),
            adam_disc: Adam::new(&model.disc),
            model,
            rng,
            stats,
            config,
        })
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.config.train
    }

    fn intrinsic(&self, d: Domain) -> Result<IntrinsicConsistency<f32>> {
        IntrinsicConsistency::new(&self.stats[d.index()], crate::dsp::N_MELS, crate::features::ETA)
    }

    fn sample_z(&mut self) -> Tensor<f32> {
        let dim = self.model.arch.style_dim;
        Tensor::new(&[dim], sample_style(&mut self.rng, dim)).expect("length matches")
    }

    /// One discriminator update on fixed generated patches; returns its loss.
    fn discriminator_step(&mut self, real: [&Tensor<f32>; 2], fake: [&Tensor<f32>; 2]) -> Result<f64> {
        let mut g = Graph::new();
        let db = self.model.disc.bind(&mut g, |_| true);
        let mut total = None;
        for d in Domain::BOTH {
            let r = g.constant(real[d.index()].clone());
            let f = g.constant(fake[d.index()].clone());
            let qr = self.model.score(&mut g, &db, d, r)?;
            let qf = self.model.score(&mut g, &db, d, f)?;
            let (_, disc) = losses::adversarial_losses(&mut g, qr, qf)?;
            total = Some(match total {
                None => disc,
                Some(t) => g.add(t, disc)?,
            });
        }
        let total = total.expect("two domains");
        let loss = scalar(&g, total);
        if !loss.is_finite() {
            return Err(TimbreError::NonFinite("adv_d".into()));
        }
        let grads = g.backward(total)?;
        let cfg = *self.train_cfg();
        self.adam_disc.update(&mut self.model.disc, &collect_grads(&grads, &db), cfg.lr, cfg.weight_decay)?;
        Ok(loss)
    }

    /// Full iteration: discriminator step, then generator/encoder step.
    pub fn train_iteration(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossReport> {
        self.model.check_input(x.shape())?;
        self.model.check_input(y.shape())?;
        let cfg = *self.train_cfg();
        let w = cfg.weights;
        let mut g = Graph::new();
        let gb = self.model.gen.bind(&mut g, |_| true);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());

        let c_x = self.model.content_code(&mut g, &gb, Domain::X, xv)?;
        let s_x = self.model.style_code(&mut g, &gb, Domain::X, xv)?;
        let c_y = self.model.content_code(&mut g, &gb, Domain::Y, yv)?;
        let s_y = self.model.style_code(&mut g, &gb, Domain::Y, yv)?;
        let x_hat = self.model.decode_vars(&mut g, &gb, Domain::X, c_x, s_x)?;
        let y_hat = self.model.decode_vars(&mut g, &gb, Domain::Y, c_y, s_y)?;
        let rx = losses::reconstruction_loss(&mut g, xv, x_hat)?;
        let ry = losses::reconstruction_loss(&mut g, yv, y_hat)?;
        let recon = g.add(rx, ry)?;

        let z_x = self.sample_z();
        let z_y = self.sample_z();
        let zxv = g.constant(z_x);
        let zyv = g.constant(z_y);
        let u = self.model.decode_vars(&mut g, &gb, Domain::X, c_y, zxv)?;
        let v = self.model.decode_vars(&mut g, &gb, Domain::Y, c_x, zyv)?;
        let c_y_rec = self.model.content_code(&mut g, &gb, Domain::X, u)?;
        let z_x_rec = self.model.style_code(&mut g, &gb, Domain::X, u)?;
        let c_x_rec = self.model.content_code(&mut g, &gb, Domain::Y, v)?;
        let z_y_rec = self.model.style_code(&mut g, &gb, Domain::Y, v)?;
        let cy = losses::content_loss(&mut g, c_y, c_y_rec)?;
        let cx = losses::content_loss(&mut g, c_x, c_x_rec)?;
        let content = g.add(cx, cy)?;
        let sx = losses::style_loss(&mut g, zxv, z_x_rec)?;
        let sy = losses::style_loss(&mut g, zyv, z_y_rec)?;
        let style = g.add(sx, sy)?;

        let ic_u = self.intrinsic(Domain::X)?.terms(&mut g, u)?;
        let ic_v = self.intrinsic(Domain::Y)?.terms(&mut g, v)?;
        let ic_mfcc = g.add(ic_u.mfcc, ic_v.mfcc)?;
        let ic_delta = g.add(ic_u.delta, ic_v.delta)?;
        let ic_env = g.add(ic_u.env, ic_v.env)?;

        let (u_val, v_val) = (g.value(u).clone(), g.value(v).clone());
        let adv_d = self.discriminator_step([x, y], [&u_val, &v_val])?;

        let db = self.model.disc.bind(&mut g, |_| false);
        let qx_real = self.model.score(&mut g, &db, Domain::X, xv)?;
        let qx_fake = self.model.score(&mut g, &db, Domain::X, u)?;
        let qy_real = self.model.score(&mut g, &db, Domain::Y, yv)?;
        let qy_fake = self.model.score(&mut g, &db, Domain::Y, v)?;
        let (gx, _) = losses::adversarial_losses(&mut g, qx_real, qx_fake)?;
        let (gy, _) = losses::adversarial_losses(&mut g, qy_real, qy_fake)?;
        let adv_g = g.add(gx, gy)?;

        let weighted = [
            (content, w.lambda_c),
            (style, w.lambda_s),
            (recon, w.lambda_r),
            (ic_mfcc, w.lambda_mfcc),
            (ic_delta, w.lambda_delta),
            (ic_env, w.lambda_env),
        ];
        let mut total = adv_g;
        for (term, lambda) in weighted {
            let t = g.scale(term, lambda as f32);
            total = g.add(total, t)?;
        }

        let report = LossReport {
            adv_g: scalar(&g, adv_g),
            adv_d,
            content: scalar(&g, content),
            style: scalar(&g, style),
            recon: scalar(&g, recon),
            ic_mfcc: scalar(&g, ic_mfcc),
            ic_delta: scalar(&g, ic_delta),
            ic_env: scalar(&g, ic_env),
            total: scalar(&g, total),
        };
        if let Some(term) = report.non_finite_term() {
            return Err(TimbreError::NonFinite(format!("loss term {term} at iteration {}", self.iteration + 1)));
        }
        let grads = g.backward(total)?;
        self.adam_gen.update(&mut self.model.gen, &collect_grads(&grads, &gb), cfg.lr, cfg.weight_decay)?;
        self.iteration += 1;
        self.check_finite()?;
        Ok(report)
    }

    /// Discriminator-only update with the generator frozen.
    pub fn discriminator_only_iteration(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
        let z_x: Vec<f32> = self.sample_z().into_data();
        let z_y: Vec<f32> = self.sample_z().into_data();
        let u = self.model.translate(y, Domain::Y, &z_x)?;
        let v = self.model.translate(x, Domain::X, &z_y)?;
        let loss = self.discriminator_step([x, y], [&u, &v])?;
        self.iteration += 1;
        Ok(loss)
    }

    fn check_finite(&self) -> Result<()> {
        let stores = [("generator", &self.model.gen), ("discriminator", &self.model.disc)];
        for (what, store) in stores {
            if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.is_finite()) {
                return Err(TimbreError::NonFinite(format!("{what} parameter {}", p.name)));
            }
        }
        let moments = self.adam_gen.m.iter().chain(&self.adam_gen.v).chain(&self.adam_disc.m).chain(&self.adam_disc.v);
        if moments.into_iter().any(|t| !t.is_finite()) {
            return Err(TimbreError::NonFinite("optimizer moments".into()));
        }
        Ok(())
    }

    /// Samples one patch per domain and runs [`train_iteration`](Self::train_iteration).
    pub fn step(&mut self, corpus: &TrainingCorpus) -> Result<LossReport> {
        let p = self.train_cfg().patch_frames;
        let x = corpus.sample_patch(Domain::X, p, &mut self.rng)?;
        let y = corpus.sample_patch(Domain::Y, p, &mut self.rng)?;
        self.train_iteration(&x, &y)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push_u64("meta.iteration", self.iteration)?;
        c.push_bytes("meta.rng.seed", &self.rng.get_seed())?;
        c.push_u64("meta.rng.stream", self.rng.get_stream())?;
        c.push_bytes("meta.rng.word_pos", &self.rng.get_word_pos().to_le_bytes())?;
        c.push_str("meta.config", &self.config.to_text())?;
        for d in Domain::BOTH {
            let s = &self.stats[d.index()];
            c.push(format!("stats.{}.mean", d.tag()), &[N_CHANNELS], s.mean.to_vec())?;
            c.push(format!("stats.{}.std", d.tag()), &[N_CHANNELS], s.std.to_vec())?;
        }
        let groups = [("gen", &self.model.gen, &self.adam_gen), ("disc", &self.model.disc, &self.adam_disc)];
        for (tag, store, adam) in groups {
            c.push_u64(format!("adam.{tag}.step"), adam.step)?;
            for (i, (_, p)) in store.iter().enumerate() {
                c.push(format!("{tag}.{}", p.name), p.value.shape(), p.value.data().to_vec())?;
                c.push(format!("adam.{tag}.m.{}", p.name), p.value.shape(), adam.m[i].data().to_vec())?;
                c.push(format!("adam.{tag}.v.{}", p.name), p.value.shape(), adam.v[i].data().to_vec())?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = RunConfig::from_text(&c.string("meta.config")?)?;
        let seed: [u8; 32] = c
            .bytes("meta.rng.seed")?
            .try_into()
            .map_err(|_| TimbreError::Format("rng seed must be 32 bytes".into()))?;
        let word_pos: [u8; 16] = c
            .bytes("meta.rng.word_pos")?
            .try_into()
            .map_err(|_| TimbreError::Format("rng position must be 16 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(c.u64("meta.rng.stream")?);
        rng.set_word_pos(u128::from_le_bytes(word_pos));

        let mut stats = [ChannelStats::default(); 2];
        for d in Domain::BOTH {
            let read = |what: &str| -> Result<[f32; N_CHANNELS]> {
                c.require(&format!("stats.{}.{what}", d.tag()))?
                    .data
                    .clone()
                    .try_into()
                    .map_err(|_| TimbreError::Format(format!("stats.{}.{what} must have {N_CHANNELS} entries", d.tag())))
            };
            stats[d.index()] = ChannelStats { mean: read("mean")?, std: read("std")? };
        }

        let mut state = TrainState::new(config, stats)?;
        state.rng = rng;
        state.iteration = c.u64("meta.iteration")?;
        let TrainState { model, adam_gen, adam_disc, .. } = &mut state;
        for (tag, store, adam) in [("gen", &mut model.gen, adam_gen), ("disc", &mut model.disc, adam_disc)] {
            adam.step = c.u64(&format!("adam.{tag}.step"))?;
            for (i, (_, p)) in store.iter_mut().enumerate() {
                let shape = p.value.shape().to_vec();
                let load = |name: String| -> Result<Tensor<f32>> {
                    let e = c.require(&name)?;
                    if e.dims != shape {
                        return Err(TimbreError::Format(format!("{name} has dims {:?}, model expects {shape:?}", e.dims)));
                    }
                    Ok(Tensor::new(&e.dims, e.data.clone())?)
                };
                p.value = load(format!("{tag}.{}", p.name))?;
                adam.m[i] = load(format!("adam.{tag}.m.{}", p.name))?;
                adam.v[i] = load(format!("adam.{tag}.v.{}", p.name))?;
            }
        }
        Ok(state)
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_container(&Container::load(path)?)
}

/// One metrics-log line: `iter key=value ...`.
pub fn metrics_line(iteration: u64, report: &LossReport) -> String {
    format!("{iteration} {}", report.to_fields())
}

/// Trailing moving average with the given window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut acc: f64 = values[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..values.len() {
        acc += values[i] - values[i - window];
        out.push(acc / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn crop_takes_columns() {
        let x = Tensor::from_fn(&[1, 2, 4], |i| i as f32);
        let c = crop_frames(&x, 1, 2).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0]);
        assert!(crop_frames(&x, 3, 2).is_err());
    }
}
