//! Mel-spectrogram inversion: NNLS, gamma inversion, phase reuse, ISTFT.

use ndarray::Array2;

use crate::dsp::{self, ComplexSpectrogram, MelFilterbank, WindowSpec};
use crate::features::AudioClip;
use crate::{Result, TimbreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    ProjectedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnlsConfig {
    pub max_iters: usize,
    /// Stop once `||b - M x|| / ||b||` drops below this for a column.
    pub tol: f64,
    pub step_rule: StepRule,
}

impl Default for NnlsConfig {
    fn default() -> Self {
        Self { max_iters: 200, tol: 1e-4, step_rule: StepRule::ProjectedGradient }
    }
}

impl NnlsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(TimbreError::Config(format!(
                "nnls needs max_iters >= 1 and tol > 0, got {} and {}",
                self.max_iters, self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: Array2<f64>,
    /// Per column, `0.5 ||b - M x||^2` at the start and after every iteration.
    pub objective_traces: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
}

impl NnlsSolution {
    pub fn relative_residual(&self, mel: &Array2<f64>, fb: &MelFilterbank) -> f64 {
        let target = mel.mapv(|v| v.max(0.0));
        let r = &target - &fb.weights.dot(&self.x);
        let den = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            0.0
        } else {
            r.iter().map(|v| v * v).sum::<f64>().sqrt() / den
        }
    }
}

/// Sparse row view of the filterbank and its transpose.
struct SparseBank {
    rows: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
}

impl SparseBank {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.rows) {
            *o = w.iter().zip(&x[*first..]).map(|(a, b)| a * b).sum();
        }
    }

    fn apply_t(&self, r: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&rv, (first, w)) in r.iter().zip(&self.rows) {
            for (o, wv) in out[*first..].iter_mut().zip(w) {
                *o += wv * rv;
            }
        }
    }

    /// Largest eigenvalue of `M^T M` by power iteration.
    fn lipschitz(&self) -> f64 {
        let mut v = vec![1.0 / (self.n_bins as f64).sqrt(); self.n_bins];
        let mut mv = vec![0.0; self.rows.len()];
        let mut w = vec![0.0; self.n_bins];
        let mut lambda = 0.0;
        for _ in 0..100 {
            self.apply(&v, &mut mv);
            self.apply_t(&mv, &mut w);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            let next = norm;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
            if (next - lambda).abs() <= 1e-9 * next {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda * 1.01
    }
}

/// `argmin_{X >= 0} ||mel - M X||^2`, solved column by column.
pub fn nnls_invert(mel: &Array2<f64>, fb: &MelFilterbank, cfg: &NnlsConfig) -> Result<NnlsSolution> {
    cfg.validate()?;
    if mel.nrows() != fb.n_mels() {
        return Err(TimbreError::Shape(format!("mel has {} bands, filterbank {}", mel.nrows(), fb.n_mels())));
    }
    if mel.iter().any(|v| !v.is_finite()) {
        return Err(TimbreError::NonFinite("nnls target".into()));
    }
    let bank = SparseBank { rows: fb.sparse_rows(), n_bins: fb.n_bins() };
    let lip = bank.lipschitz();
    let (f, t) = mel.dim();
    let k = fb.n_bins();
    let mut x = Array2::zeros((k, t));
    let mut traces = Vec::with_capacity(t);
    let mut iterations = Vec::with_capacity(t);
    let mut xc = vec![0.0; k];
    let mut b = vec![0.0; f];
    let mut r = vec![0.0; f];
    let mut grad = vec![0.0; k];
    for col in 0..t {
        for (bi, &v) in b.iter_mut().zip(mel.column(col)) {
            *bi = v.max(0.0);
        }
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut trace = Vec::new();
        let mut iters = 0;
        if bnorm == 0.0 || lip == 0.0 {
            xc.fill(0.0);
            trace.push(0.0);
        } else {
            let objective = |xc: &[f64], r: &mut [f64]| {
                bank.apply(xc, r);
                for (ri, bi) in r.iter_mut().zip(&b) {
                    *ri = bi - *ri;
                }
                0.5 * r.iter().map(|v| v * v).sum::<f64>()
            };
            let mut obj = objective(&xc, &mut r);
            trace.push(obj);
            while iters < cfg.max_iters && (2.0 * obj).sqrt() / bnorm > cfg.tol {
                bank.apply_t(&r, &mut grad);
                for (xi, gi) in xc.iter_mut().zip(&grad) {
                    *xi = (*xi + gi / lip).max(0.0);
                }
                obj = objective(&xc, &mut r);
                trace.push(obj);
                iters += 1;
            }
        }
        debug_assert!(is_nonincreasing(&trace), "nnls objective increased in column {col}");
        x.column_mut(col).assign(&ndarray::ArrayView1::from(&xc[..]));
        traces.push(trace);
        iterations.push(iters);
    }
    Ok(NnlsSolution { x, objective_traces: traces, iterations })
}

/// Nonincreasing up to floating-point rounding of the objective.
pub fn is_nonincreasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(f64::MIN_POSITIVE))
}

pub fn degamma(power_spec: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TimbreError::Domain(format!("gamma {gamma} must lie in (0, 1]")));
    }
    let p = 1.0 / gamma;
    Ok(power_spec.mapv(|v| v.max(0.0).powf(p)))
}

/// Center-crops `phase` to `frames` columns.
pub fn crop_phase(phase: &Array2<f64>, frames: usize) -> Result<Array2<f64>> {
    let have = phase.ncols();
    if frames > have {
        return Err(TimbreError::Shape(format!("mel has {frames} frames but phase only {have}")));
    }
    let start = (have - frames) / 2;
    Ok(phase.slice(ndarray::s![.., start..start + frames]).to_owned())
}

pub fn resynthesize(
    mel: &Array2<f64>,
    phase: &Array2<f64>,
    fb: &MelFilterbank,
    cfg: &NnlsConfig,
    win: &WindowSpec,
    gamma: f64,
) -> Result<AudioClip> {
    if phase.nrows() != win.n_bins() {
        return Err(TimbreError::Shape(format!("phase has {} bins, window gives {}", phase.nrows(), win.n_bins())));
    }
    let phase = crop_phase(phase, mel.ncols())?;
    let sol = nnls_invert(mel, fb, cfg)?;
    let magnitude = degamma(&sol.x, gamma)?;
    let spec = ComplexSpectrogram { magnitude, phase, n_fft: win.size, hop: win.hop, sample_rate: fb.sample_rate };
    dsp::istft(&spec, win)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degamma_examples() {
        let m = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 2.2974]).unwrap();
        let d = degamma(&m, 0.6).unwrap();
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[0, 1]], 1.0);
        assert!((d[[0, 2]] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn crop_is_centered() {
        let p = Array2::from_shape_fn((2, 7), |(_, j)| j as f64);
        let c = crop_phase(&p, 3).unwrap();
        assert_eq!(c.row(0).to_vec(), vec![2.0, 3.0, 4.0]);
        assert!(crop_phase(&p, 8).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let fb = dsp::make_mel_filterbank(2048, 22050).unwrap();
        let mel = Array2::zeros((256, 1));
        let cfg = NnlsConfig { max_iters: 0, ..Default::default() };
        assert!(nnls_invert(&mel, &fb, &cfg).is_err());
    }
}
