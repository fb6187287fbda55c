//! Self-contained invariant suite: brute-force oracles for the DSP, the
//! zero-consistency property of extracted stacks, finite-difference gradient
//! checks, solver monotonicity and tone-preserving resynthesis.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use timbre_nn::gradcheck::{check_gradients, GradCheckConfig};
use timbre_nn::{Binding, Graph, Tensor, Var};

use crate::dsp::{self, WindowSpec};
use crate::features::{self, AudioClip, ChannelStats, Extractor};
use crate::losses::{self, IntrinsicConsistency, LossWeights};
use crate::model::{ArchConfig, Domain, Translator};
use crate::recon::{self, is_nonincreasing, NnlsConfig};
use crate::synth::synth_clip;
use crate::Result;

pub const ORACLE_TOL: f64 = 1e-6;
pub const RECON_TOL: f64 = 1e-6;
pub const IC_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
pub const NNLS_RESIDUAL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!("{} {} {} ({:.1}s)", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

fn complex_of(mag: f64, phase: f64) -> Complex<f64> {
    Complex::from_polar(mag, phase)
}

/// STFT, DCT and mel product against direct summation, 100 random instances each.
pub fn dsp_oracles(seed: u64) -> Check {
    timed("dsp_oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = WindowSpec::default();
        let n = spec.size;
        let w = dsp::make_window(&spec)?;
        let twiddle: Vec<Complex<f64>> = (0..n).map(|j| Complex::from_polar(1.0, -2.0 * PI * j as f64 / n as f64)).collect();
        let mut stft_err: f64 = 0.0;
        for _ in 0..100 {
            let len = n + spec.hop * rng.random_range(0..3);
            let clip = AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 22050);
            let s = dsp::stft(&clip, &spec)?;
            for t in 0..s.n_frames() {
                let seg: Vec<f64> = clip.samples[t * spec.hop..t * spec.hop + n].iter().zip(&w).map(|(a, b)| a * b).collect();
                let naive: Vec<Complex<f64>> = (0..=n / 2)
                    .map(|k| seg.iter().enumerate().map(|(m, &v)| twiddle[(k * m) % n] * v).sum())
                    .collect();
                let scale = naive.iter().fold(0.0f64, |a, c| a.max(c.norm()));
                for (k, want) in naive.iter().enumerate() {
                    let got = complex_of(s.magnitude[[k, t]], s.phase[[k, t]]);
                    stft_err = stft_err.max((got - want).norm() / scale);
                }
            }
        }

        let mut dct_err: f64 = 0.0;
        for _ in 0..100 {
            let f = 256;
            let m = Array2::from_shape_fn((f, 3), |_| rng.random_range(-2.0..2.0));
            let c = dsp::dct_freq(&m);
            for t in 0..3 {
                let naive: Vec<f64> = (0..f)
                    .map(|q| (0..f).map(|k| m[[k, t]] * (PI / f as f64 * (k as f64 + 0.5) * q as f64).cos()).sum())
                    .collect();
                let scale = naive.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                for (q, want) in naive.iter().enumerate() {
                    dct_err = dct_err.max((c[[q, t]] - want).abs() / scale);
                }
            }
        }

        let fb = dsp::make_mel_filterbank(n, 22050)?;
        let mut mel_err: f64 = 0.0;
        for _ in 0..100 {
            let p = Array2::from_shape_fn((fb.n_bins(), 2), |_| rng.random_range(0.0..2.0));
            let mel = features::mel_spectrogram(&p, &fb)?;
            for f in 0..fb.n_mels() {
                for t in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..fb.n_bins() {
                        acc += fb.weights[[f, k]] * p[[k, t]];
                    }
                    mel_err = mel_err.max((mel[[f, t]] - acc).abs() / acc.abs().max(1e-12));
                }
            }
        }
        let worst = stft_err.max(dct_err).max(mel_err);
        Ok((worst < ORACLE_TOL, format!("stft={stft_err:.2e} dct={dct_err:.2e} mel={mel_err:.2e}")))
    })
}

/// ISTFT of the STFT reproduces the interior samples.
pub fn perfect_reconstruction(seed: u64) -> Check {
    timed("perfect_reconstruction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = WindowSpec::default();
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let len = rng.random_range(3 * spec.size..6 * spec.size);
            let clip = AudioClip::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 22050);
            let y = dsp::istft(&dsp::stft(&clip, &spec)?, &spec)?;
            let covered = (spec.n_frames(len) - 1) * spec.hop + spec.size;
            for i in spec.size..covered - spec.size {
                worst = worst.max((y.samples[i] - clip.samples[i]).abs());
            }
        }
        Ok((worst < RECON_TOL, format!("max interior error {worst:.2e}")))
    })
}

/// The intrinsic-consistency loss vanishes on extracted stacks.
pub fn intrinsic_zero(seed: u64, n_clips: usize) -> Check {
    timed("intrinsic_zero", || {
        let ex = Extractor::default();
        let stacks = (0..n_clips)
            .map(|i| {
                let d = if i % 2 == 0 { Domain::X } else { Domain::Y };
                ex.extract(&synth_clip(d, 1.5, seed.wrapping_add(i as u64)))
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = ChannelStats::fit(&stacks)?;
        let ic = IntrinsicConsistency::<f64>::new(&stats, dsp::N_MELS, features::ETA)?;
        let w = LossWeights::default();
        let mut worst: f64 = 0.0;
        for s in &stacks {
            let mut g = Graph::new();
            let u = g.constant(stats.normalize::<f64>(s));
            let terms = ic.terms(&mut g, u)?;
            let total = ic.total(&mut g, &terms, &w)?;
            worst = worst.max(g.scalar(total));
        }
        Ok((worst < IC_TOL, format!("max loss over {n_clips} clips {worst:.2e}")))
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

/// Small architecture used by the gradient suite.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        in_channels: 4,
        base_channels: 3,
        n_down: 1,
        n_res: 1,
        style_dim: 8,
        style_down: 2,
        mlp_hidden: 16,
        disc_layers: 2,
    }
}

fn to_nn(e: crate::TimbreError) -> timbre_nn::NnError {
    match e {
        crate::TimbreError::Nn(inner) => inner,
        other => timbre_nn::NnError::Shape(other.to_string()),
    }
}

/// Worst relative error of `f` against central differences.
fn grad_error<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let r = check_gradients(inputs, cfg, |g, v| f(g, v).map_err(to_nn))?;
    let (skipped, checked): (usize, usize) = (r.skipped.iter().sum(), r.checked.iter().sum());
    if skipped * 10 > skipped + checked {
        return Ok(f64::INFINITY);
    }
    Ok(r.max_relative_error())
}

fn gcfg() -> GradCheckConfig {
    GradCheckConfig { step: 1e-5, max_coords: 24, floor: 1e-5, kink_tol: Some(1e-3) }
}

/// Relative errors of every translator block and loss term against central differences.
pub fn gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let arch = tiny_arch();
    let model = Translator::<f64>::new(arch, &mut rng)?;
    let x = rand_tensor(&mut rng, &[4, 8, 8]);
    let z = rand_tensor(&mut rng, &[arch.style_dim]);

    for d in Domain::BOTH {
        let prefix = format!("{}.", d.tag());
        let gen_names: Vec<String> = model.gen.iter().map(|(_, p)| p.name.clone()).collect();
        let disc_names: Vec<String> = model.disc.iter().map(|(_, p)| p.name.clone()).collect();
        let gen_values: Vec<Tensor<f64>> = model.gen.iter().map(|(_, p)| p.value.clone()).collect();
        let disc_values: Vec<Tensor<f64>> = model.disc.iter().map(|(_, p)| p.value.clone()).collect();
        let own = |names: &[String], part: &str| -> Vec<usize> {
            names.iter().enumerate().filter(|(_, n)| n.starts_with(&prefix) && n.contains(part)).map(|(i, _)| i).collect()
        };
        // Leaves: [primary input, selected params...]; other params are constants.
        let bind = |g: &mut Graph<f64>, values: &[Tensor<f64>], selected: &[usize], vars: &[Var]| -> Binding {
            let all = values
                .iter()
                .enumerate()
                .map(|(i, v)| match selected.iter().position(|&s| s == i) {
                    Some(k) => vars[k],
                    None => g.constant(v.clone()),
                })
                .collect();
            Binding::from_vars(all)
        };
        let with_params = |first: Vec<Tensor<f64>>, values: &[Tensor<f64>], selected: &[usize]| -> Vec<Tensor<f64>> {
            first.into_iter().chain(selected.iter().map(|&i| values[i].clone())).collect()
        };

        let sel = own(&gen_names, "content");
        let c_shape = arch.content_shape(8, 8);
        let wc = rand_tensor(&mut rng, &c_shape);
        let r = grad_error(&with_params(vec![x.clone()], &gen_values, &sel), gcfg(), |g, v| {
            let b = bind(g, &gen_values, &sel, &v[1..]);
            let c = model.content_code(g, &b, d, v[0])?;
            project(g, c, &wc)
        })?;
        out.push((format!("{}.content_encoder", d.tag()), r));

        let sel = own(&gen_names, "style");
        let ws = rand_tensor(&mut rng, &[arch.style_dim]);
        let r = grad_error(&with_params(vec![x.clone()], &gen_values, &sel), gcfg(), |g, v| {
            let b = bind(g, &gen_values, &sel, &v[1..]);
            let s = model.style_code(g, &b, d, v[0])?;
            project(g, s, &ws)
        })?;
        out.push((format!("{}.style_encoder", d.tag()), r));

        let sel = own(&gen_names, "dec");
        let content = rand_tensor(&mut rng, &c_shape);
        let wd = rand_tensor(&mut rng, &[4, 8, 8]);
        let r = grad_error(&with_params(vec![content, z.clone()], &gen_values, &sel), gcfg(), |g, v| {
            let b = bind(g, &gen_values, &sel, &v[2..]);
            let y = model.decode_vars(g, &b, d, v[0], v[1])?;
            project(g, y, &wd)
        })?;
        out.push((format!("{}.decoder", d.tag()), r));

        let sel = own(&disc_names, "");
        let mut probe = Graph::new();
        let (_, pb) = model.bind_all(&mut probe, false, false);
        let xv = probe.constant(x.clone());
        let qv = model.score(&mut probe, &pb, d, xv)?;
        let q_shape = probe.shape(qv).to_vec();
        let wq = rand_tensor(&mut rng, &q_shape);
        let r = grad_error(&with_params(vec![x.clone()], &disc_values, &sel), gcfg(), |g, v| {
            let b = bind(g, &disc_values, &sel, &v[1..]);
            let q = model.score(g, &b, d, v[0])?;
            project(g, q, &wq)
        })?;
        out.push((format!("{}.discriminator", d.tag()), r));
    }

    let cfg = GradCheckConfig { step: 1e-5, max_coords: 64, floor: 1e-6, kink_tol: None };
    let q = [rand_tensor(&mut rng, &[1, 3, 4]), rand_tensor(&mut rng, &[1, 3, 4])];
    for (name, pick) in [("adversarial_gen", 0usize), ("adversarial_disc", 1)] {
        let r = grad_error(&q, cfg, |g, v| {
            let (gen, disc) = losses::adversarial_losses(g, v[0], v[1])?;
            Ok(if pick == 0 { gen } else { disc })
        })?;
        out.push((name.to_string(), r));
    }
    let pair = |rng: &mut ChaCha8Rng, shape: &[usize]| [rand_tensor(rng, shape), rand_tensor(rng, shape)];
    let r = grad_error(&pair(&mut rng, &[6, 2, 2]), cfg, |g, v| losses::content_loss(g, v[0], v[1]))?;
    out.push(("content".into(), r));
    let r = grad_error(&pair(&mut rng, &[8]), cfg, |g, v| losses::style_loss(g, v[0], v[1]))?;
    out.push(("style".into(), r));
    let r = grad_error(&pair(&mut rng, &[4, 3, 5]), cfg, |g, v| losses::reconstruction_loss(g, v[0], v[1]))?;
    out.push(("reconstruction".into(), r));

    let stats = ChannelStats { mean: [0.1, -0.2, 0.05, 0.3], std: [0.5, 2.0, 0.25, 1.5] };
    let ic = IntrinsicConsistency::<f64>::new(&stats, 16, 5)?;
    let u = rand_tensor(&mut rng, &[4, 16, 6]);
    for (name, pick) in [("ic_mfcc", 0usize), ("ic_delta", 1), ("ic_env", 2)] {
        let r = grad_error(std::slice::from_ref(&u), cfg, |g, v| {
            let t = ic.terms(g, v[0])?;
            Ok([t.mfcc, t.delta, t.env][pick])
        })?;
        out.push((name.to_string(), r));
    }
    Ok(out)
}

pub fn gradients(seed: u64) -> Check {
    timed("gradients", || {
        let errs = gradient_errors(seed)?;
        let (worst_name, worst) =
            errs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|(n, e)| (n.clone(), *e)).unwrap_or_default();
        Ok((worst < GRAD_TOL, format!("{} checks, worst {worst_name} {worst:.2e}", errs.len())))
    })
}

/// Monotone objective on every solve and a small residual on a consistent system.
pub fn nnls(seed: u64) -> Check {
    timed("nnls", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fb = dsp::make_mel_filterbank(dsp::DEFAULT_N_FFT, dsp::DEFAULT_SAMPLE_RATE)?;
        let cfg = NnlsConfig::default();
        let x_true = Array2::from_shape_fn((fb.n_bins(), 8), |_| rng.random_range(0.0..1.0));
        let consistent = recon::nnls_invert(&fb.weights.dot(&x_true), &fb, &cfg)?;
        let residual = consistent.relative_residual(&fb.weights.dot(&x_true), &fb);
        let mut monotone = consistent.objective_traces.iter().all(|t| is_nonincreasing(t));
        let noisy = Array2::from_shape_fn((fb.n_mels(), 8), |_| rng.random_range(-0.5..2.0));
        monotone &= recon::nnls_invert(&noisy, &fb, &cfg)?.objective_traces.iter().all(|t| is_nonincreasing(t));
        Ok((
            monotone && residual < NNLS_RESIDUAL_TOL && consistent.iterations.iter().all(|&n| n <= cfg.max_iters),
            format!(
                "residual {residual:.2e} in at most {} iterations, monotone={monotone}",
                consistent.iterations.iter().max().unwrap_or(&0)
            ),
        ))
    })
}

fn peak_bin(x: &[f64], n: usize) -> Result<usize> {
    let mid = x.len() / 2 - n / 2;
    let w = dsp::make_window(&WindowSpec::new(n, n / 4)?)?;
    let mut buf: Vec<Complex<f64>> = x[mid..mid + n].iter().zip(&w).map(|(a, b)| Complex::new(a * b, 0.0)).collect();
    rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok((0..=n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap_or(0))
}

/// Pure tones keep their spectral peak through extract, inversion and overlap-add.
pub fn identity_resynthesis() -> Check {
    timed("identity_resynthesis", || {
        let fb = dsp::make_mel_filterbank(dsp::DEFAULT_N_FFT, dsp::DEFAULT_SAMPLE_RATE)?;
        let win = WindowSpec::default();
        let mut ok = true;
        let mut parts = Vec::new();
        for freq in [220.0, 440.0, 880.0] {
            let clip = AudioClip::new(
                (0..22050).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 22050.0).sin()).collect(),
                22050,
            );
            let s = features::extract_stack(&clip)?;
            let y = recon::resynthesize(&s.mel, &s.phase, &fb, &NnlsConfig::default(), &win, s.gamma)?;
            let (got, want) = (peak_bin(&y.samples, 2048)?, peak_bin(&clip.samples, 2048)?);
            ok &= got.abs_diff(want) <= 1;
            parts.push(format!("{freq}Hz:{got}/{want}"));
        }
        Ok((ok, parts.join(" ")))
    })
}

/// Every property, in order.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        dsp_oracles(seed),
        perfect_reconstruction(seed),
        intrinsic_zero(seed, 20),
        gradients(seed),
        nnls(seed),
        identity_resynthesis(),
    ]
}
