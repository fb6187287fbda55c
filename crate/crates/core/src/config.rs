//! Run configuration and its `key = value` text form.

use std::fmt::Write as _;

use crate::losses::LossWeights;
use crate::model::ArchConfig;
use crate::recon::NnlsConfig;
use crate::{Result, TimbreError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub patch_frames: usize,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 1,
            max_iters: 500,
            seed: 0,
            weights: LossWeights::default(),
            patch_frames: 256,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TimbreError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(TimbreError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size != 1 {
            return Err(TimbreError::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        let m = self.arch.min_extent();
        if self.patch_frames < m || !self.patch_frames.is_multiple_of(m) {
            return Err(TimbreError::Config(format!("patch_frames must be a positive multiple of {m}")));
        }
        self.weights.validate()?;
        self.arch.validate()
    }
}

/// Everything a command can configure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub nnls: NnlsConfig,
}

pub const KEYS: [&str; 20] = [
    "lr",
    "weight_decay",
    "batch_size",
    "max_iters",
    "seed",
    "patch_frames",
    "lambda_c",
    "lambda_s",
    "lambda_r",
    "lambda_mfcc",
    "lambda_delta",
    "lambda_env",
    "base_channels",
    "n_down",
    "n_res",
    "style_dim",
    "style_down",
    "mlp_hidden",
    "disc_layers",
    "nnls_max_iters",
];

const NNLS_TOL: &str = "nnls_tol";

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| TimbreError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut t.weights;
        let a = &mut t.arch;
        match key.trim() {
            "lr" => t.lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_iters" => t.max_iters = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "patch_frames" => t.patch_frames = parse(key, value)?,
            "lambda_c" => w.lambda_c = parse(key, value)?,
            "lambda_s" => w.lambda_s = parse(key, value)?,
            "lambda_r" => w.lambda_r = parse(key, value)?,
            "lambda_mfcc" => w.lambda_mfcc = parse(key, value)?,
            "lambda_delta" => w.lambda_delta = parse(key, value)?,
            "lambda_env" => w.lambda_env = parse(key, value)?,
            "base_channels" => a.base_channels = parse(key, value)?,
            "n_down" => a.n_down = parse(key, value)?,
            "n_res" => a.n_res = parse(key, value)?,
            "style_dim" => a.style_dim = parse(key, value)?,
            "style_down" => a.style_down = parse(key, value)?,
            "mlp_hidden" => a.mlp_hidden = parse(key, value)?,
            "disc_layers" => a.disc_layers = parse(key, value)?,
            "nnls_max_iters" => self.nnls.max_iters = parse(key, value)?,
            NNLS_TOL => self.nnls.tol = parse(key, value)?,
            other => return Err(TimbreError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TimbreError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.nnls.validate()
    }

    /// Canonical text form; parsing it reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let a = &t.arch;
        let values: [String; 20] = [
            format!("{:e}", t.lr),
            format!("{:e}", t.weight_decay),
            t.batch_size.to_string(),
            t.max_iters.to_string(),
            t.seed.to_string(),
            t.patch_frames.to_string(),
            format!("{:e}", w.lambda_c),
            format!("{:e}", w.lambda_s),
            format!("{:e}", w.lambda_r),
            format!("{:e}", w.lambda_mfcc),
            format!("{:e}", w.lambda_delta),
            format!("{:e}", w.lambda_env),
            a.base_channels.to_string(),
            a.n_down.to_string(),
            a.n_res.to_string(),
            a.style_dim.to_string(),
            a.style_down.to_string(),
            a.mlp_hidden.to_string(),
            a.disc_layers.to_string(),
            self.nnls.max_iters.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "{NNLS_TOL} = {:e}", self.nnls.tol);
        out
    }
}
