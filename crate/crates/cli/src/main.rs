//! `timbre` command-line tool.
//!
//! Failures print a single `error kind=<kind> message=<text>` line on stderr
//! and exit with status 1. Bad flags print usage and exit with status 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;
use timbre::audio::{self, FeatureCache};
use timbre::config::RunConfig;
use timbre::features::Extractor;
use timbre::model::Domain;
use timbre::pipeline::{self, DomainStacks};
use timbre::{train, verify, TimbreError};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "timbre", version, about = "Multi-modal timbre style transfer between two audio domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the feature stack of one WAV file.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cache: CacheArgs,
    },
    /// Train a translator on two manifests of WAV files.
    Train {
        #[arg(long)]
        domain_x: PathBuf,
        #[arg(long)]
        domain_y: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write a checkpoint every N iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        checkpoint_every: u64,
        /// Parallel extraction workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        cache: CacheArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Translate one clip with a seeded style code.
    Transfer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one style dimension and write one WAV per step.
    Interpolate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, allow_negative_numbers = true)]
        to: f64,
        #[arg(long)]
        steps: usize,
        /// Output directory for `step_NN.wav` files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract and resynthesize a clip without translation.
    Reconstruct {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the invariant suite and print PASS/FAIL per property.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic two-domain corpus with manifests `x.txt` and `y.txt`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60.0)]
        secs: f64,
        #[arg(long, default_value_t = 10.0)]
        clip_secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct CacheArgs {
    /// Feature cache directory; defaults to $TIMBRE_CACHE_DIR.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl CacheArgs {
    fn cache(&self) -> Option<FeatureCache> {
        match &self.cache_dir {
            Some(dir) => Some(FeatureCache::new(dir)),
            None => FeatureCache::from_env(),
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=2e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, mut config: RunConfig) -> anyhow::Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config.apply_text(&text)?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(TimbreError::Config(format!("--set expects KEY=VALUE, got {kv:?}")).into());
            };
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    X2y,
    Y2x,
}

impl Direction {
    fn source(self) -> Domain {
        match self {
            Direction::X2y => Domain::X,
            Direction::Y2x => Domain::Y,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    /// Seed of the sampled style code.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn extract(input: &Path, out: &Path, cache: Option<FeatureCache>) -> anyhow::Result<()> {
    let stack = match cache {
        Some(c) => c.extract(input, &Extractor::default())?,
        None => Extractor::default().extract(&audio::load_clip(input)?)?,
    };
    audio::save_stack(out, &stack)?;
    println!("{} frames -> {}", stack.n_frames(), out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Extract { input, out, cache } => extract(&input, &out, cache.cache())?,
        Command::Train { domain_x, domain_y, iters, seed, out, checkpoint_every, jobs, cache, config } => {
            let mut base = RunConfig::default();
            if let Some(n) = iters {
                base.train.max_iters = n;
            }
            if let Some(s) = seed {
                base.train.seed = s;
            }
            let config = config.resolve(base)?;
            let data = DomainStacks::from_manifests(&domain_x, &domain_y, cache.cache().as_ref(), jobs.max(1))?;
            let (state, reports) = pipeline::train_to_dir(config, &data, &out, checkpoint_every)?;
            if let Some(last) = reports.last() {
                println!("{}", train::metrics_line(state.iteration, last));
            }
            println!("checkpoint {}", out.join("final.ckpt").display());
        }
        Command::Transfer { model, out } => {
            let state = train::load_checkpoint(&model.ckpt)?;
            let clip = audio::load_clip(&model.input)?;
            let z = pipeline::seeded_style(model.seed, state.model.arch.style_dim);
            let result = pipeline::transfer_clip(&state, &clip, model.direction.source(), &z)?;
            audio::write_wav(&out, &result)?;
            println!("{}", out.display());
        }
        Command::Interpolate { model, dim, from, to, steps, out } => {
            let state = train::load_checkpoint(&model.ckpt)?;
            let clip = audio::load_clip(&model.input)?;
            let z = pipeline::seeded_style(model.seed, state.model.arch.style_dim);
            let values = pipeline::sweep(from, to, steps)?;
            let clips = pipeline::interpolate_clip(&state, &clip, model.direction.source(), &z, dim, &values)?;
            std::fs::create_dir_all(&out)?;
            for (i, (c, v)) in clips.iter().zip(&values).enumerate() {
                let path = out.join(format!("step_{i:02}.wav"));
                audio::write_wav(&path, c)?;
                println!("{v:+.3} {}", path.display());
            }
        }
        Command::Reconstruct { input, out, config } => {
            let config = config.resolve(RunConfig::default())?;
            let clip = audio::load_clip(&input)?;
            audio::write_wav(&out, &pipeline::reconstruct_clip(&clip, &config)?)?;
            println!("{}", out.display());
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed);
            for c in &checks {
                println!("{}", c.line());
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if !failed.is_empty() {
                bail!("failed checks: {}", failed.join(","));
            }
        }
        Command::Synth { out, secs, clip_secs, seed } => {
            for m in timbre::synth::write_fixture(&out, secs, clip_secs, seed)? {
                println!("{}", m.display());
            }
        }
    }
    Ok(())
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e.downcast_ref::<TimbreError>().map_or("cli", TimbreError::kind);
    let message = format!("{e:#}").replace(['\n', '\r'], " ");
    format!("error kind={kind} message={message}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
