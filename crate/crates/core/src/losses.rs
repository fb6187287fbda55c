//! Training objectives, expressed as graph operations so they differentiate.

use std::sync::Arc;

use timbre_nn::{Graph, Real, Tensor, Var};

use crate::dsp;
use crate::features::{ChannelStats, N_CHANNELS};
use crate::{Result, TimbreError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub lambda_mfcc: f64,
    pub lambda_delta: f64,
    pub lambda_env: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 1.0, lambda_s: 1.0, lambda_r: 10.0, lambda_mfcc: 1.0, lambda_delta: 1.0, lambda_env: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_c, self.lambda_s, self.lambda_r, self.lambda_mfcc, self.lambda_delta, self.lambda_env];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(TimbreError::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every objective term for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub content: f64,
    pub style: f64,
    pub recon: f64,
    pub ic_mfcc: f64,
    pub ic_delta: f64,
    pub ic_env: f64,
    pub total: f64,
}

impl LossReport {
    pub const KEYS: [&'static str; 9] =
        ["adv_g", "adv_d", "content", "style", "recon", "ic_mfcc", "ic_delta", "ic_env", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.adv_g,
            self.adv_d,
            self.content,
            self.style,
            self.recon,
            self.ic_mfcc,
            self.ic_delta,
            self.ic_env,
            self.total,
        ]
    }

    pub fn ic_total(&self, w: &LossWeights) -> f64 {
        w.lambda_mfcc * self.ic_mfcc + w.lambda_delta * self.ic_delta + w.lambda_env * self.ic_env
    }

    /// `key=value` pairs in [`KEYS`](Self::KEYS) order.
    pub fn to_fields(&self) -> String {
        Self::KEYS.iter().zip(self.values()).map(|(k, v)| format!("{k}={v:e}")).collect::<Vec<_>>().join(" ")
    }

    /// First term that is not finite, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::KEYS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(k, _)| *k)
    }
}

/// Generator objective: `adv_g + lc*content + ls*style + lr*recon + ic`.
pub fn total_objective(parts: &LossReport, w: &LossWeights) -> f64 {
    parts.adv_g + w.lambda_c * parts.content + w.lambda_s * parts.style + w.lambda_r * parts.recon + parts.ic_total(w)
}

/// `sigmoid(q_this - mean_other)`.
pub fn ragan_d<T: Real>(g: &mut Graph<T>, q_this: Var, mean_other: Var) -> Result<Var> {
    let d = g.sub_scalar(q_this, mean_other)?;
    Ok(g.sigmoid(d))
}

/// Relativistic-average least-squares losses for one domain, `(gen, disc)`.
pub fn adversarial_losses<T: Real>(g: &mut Graph<T>, q_real: Var, q_fake: Var) -> Result<(Var, Var)> {
    if g.value(q_real).is_empty() || g.value(q_fake).is_empty() {
        return Err(TimbreError::Shape("adversarial loss on an empty score map".into()));
    }
    let mean_real = g.mean(q_real);
    let mean_fake = g.mean(q_fake);
    let rel_real = g.sub_scalar(q_real, mean_fake)?;
    let rel_fake = g.sub_scalar(q_fake, mean_real)?;
    let sq_mean_shifted = |g: &mut Graph<T>, x: Var, target: f64| {
        let shifted = g.add_const(x, T::from_f64_lossy(-target));
        let sq = g.square(shifted);
        g.mean(sq)
    };
    let d_real = sq_mean_shifted(g, rel_real, 1.0);
    let d_fake = sq_mean_shifted(g, rel_fake, 0.0);
    let disc = g.add(d_real, d_fake)?;
    let g_fake = sq_mean_shifted(g, rel_fake, 1.0);
    let g_real = sq_mean_shifted(g, rel_real, 0.0);
    let gen = g.add(g_fake, g_real)?;
    Ok((gen, disc))
}

fn checked_mad<T: Real>(g: &mut Graph<T>, a: Var, b: Var, what: &str) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TimbreError::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(g.mean_abs_diff(a, b)?)
}

pub fn content_loss<T: Real>(g: &mut Graph<T>, before: Var, after: Var) -> Result<Var> {
    checked_mad(g, before, after, "content codes differ in shape")
}

pub fn style_loss<T: Real>(g: &mut Graph<T>, sampled: Var, recovered: Var) -> Result<Var> {
    checked_mad(g, sampled, recovered, "style codes differ in length")
}

pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    checked_mad(g, x, x_hat, "reconstruction differs in shape")
}

/// Graph handles of the three intrinsic terms.
#[derive(Debug, Clone, Copy)]
pub struct IntrinsicTerms {
    pub mfcc: Var,
    pub delta: Var,
    pub env: Var,
}

/// Fixed DCT and envelope maps plus the normalization needed to return to
/// feature units.
#[derive(Debug, Clone)]
pub struct IntrinsicConsistency<T> {
    dct: Arc<Tensor<T>>,
    envelope: Arc<Tensor<T>>,
    scale: [T; N_CHANNELS],
    shift: [T; N_CHANNELS],
    n_bands: usize,
}

impl<T: Real> IntrinsicConsistency<T> {
    pub fn new(stats: &ChannelStats, n_bands: usize, eta: usize) -> Result<Self> {
        let to_tensor = |m: ndarray::Array2<f64>| {
            let shape = [m.nrows(), m.ncols()];
            Tensor::new(&shape, m.iter().map(|&v| T::from_f64_lossy(v)).collect()).map(Arc::new)
        };
        let dct = to_tensor(dsp::dct_matrix(n_bands))?;
        let envelope = to_tensor(dsp::envelope_matrix(n_bands, eta)?)?;
        let scale = stats.std.map(|v| T::from_f64_lossy(v as f64));
        let shift = stats.mean.map(|v| T::from_f64_lossy(v as f64));
        Ok(Self { dct, envelope, scale, shift, n_bands })
    }

    /// Takes a normalized `[4, F, T]` patch.
    pub fn terms(&self, g: &mut Graph<T>, u: Var) -> Result<IntrinsicTerms> {
        match *g.shape(u) {
            [N_CHANNELS, f, _] if f == self.n_bands => {}
            ref s => {
                return Err(TimbreError::Shape(format!(
                    "intrinsic loss needs [{N_CHANNELS}, {}, T], got {s:?}",
                    self.n_bands
                )))
            }
        }
        let feat = g.channel_affine_const(u, &self.scale, &self.shift)?;
        let mel = g.slice_channels(feat, 0, 1)?;
        let mfcc = g.slice_channels(feat, 1, 1)?;
        let sdiff = g.slice_channels(feat, 2, 1)?;
        let senv = g.slice_channels(feat, 3, 1)?;
        let mfcc_ref = g.freq_matmul(mel, self.dct.clone())?;
        let sdiff_ref = g.time_diff_relu(mel)?;
        let senv_ref = g.freq_matmul(mel, self.envelope.clone())?;
        Ok(IntrinsicTerms {
            mfcc: g.mean_abs_diff(mfcc, mfcc_ref)?,
            delta: g.mean_abs_diff(sdiff, sdiff_ref)?,
            env: g.mean_abs_diff(senv, senv_ref)?,
        })
    }

    /// Weighted sum of the three terms.
    pub fn total(&self, g: &mut Graph<T>, t: &IntrinsicTerms, w: &LossWeights) -> Result<Var> {
        let a = g.scale(t.mfcc, T::from_f64_lossy(w.lambda_mfcc));
        let b = g.scale(t.delta, T::from_f64_lossy(w.lambda_delta));
        let c = g.scale(t.env, T::from_f64_lossy(w.lambda_env));
        let ab = g.add(a, b)?;
        Ok(g.add(ab, c)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_weights_sum() {
        let parts = LossReport {
            adv_g: 1.0,
            content: 1.0,
            style: 1.0,
            recon: 1.0,
            ic_mfcc: 1.0,
            ic_delta: 0.0,
            ic_env: 0.0,
            ..Default::default()
        };
        assert_eq!(total_objective(&parts, &LossWeights::default()), 14.0);
        assert_eq!(total_objective(&LossReport::default(), &LossWeights::default()), 0.0);
    }

    #[test]
    fn report_fields_parse_back() {
        let r = LossReport { recon: 0.25, total: 3.5, ..Default::default() };
        let line = r.to_fields();
        assert!(line.contains("recon=2.5e-1"));
        assert!(line.starts_with("adv_g="));
        assert_eq!(r.non_finite_term(), None);
        let bad = LossReport { style: f64::NAN, ..r };
        assert_eq!(bad.non_finite_term(), Some("style"));
    }
}
