//! The command-line verbs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mlsa_core::corpus::{generate_synthetic, CorpusIndex, Schema, TokenSequence};
use mlsa_core::eval::{evaluate, project_latents};
use mlsa_core::samplers::InitMode;

use crate::checkpoint::{
    checkpoint_schema, energy_checkpoint, energy_from, gan_checkpoint, gan_from, vae_checkpoint, vae_from, Checkpoint,
    Kind,
};
use crate::config::RunConfig;
use crate::corpus_io::{format_corpus, format_oracle, format_samples, load_corpus, load_oracle, load_samples};
use crate::error::CliError;
use crate::pipeline::{fit_gan_stage, generate, run_ablation, train_energy_stage, train_vae_stage, SamplerKind, Settings};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "mlsa", version, about = "Multi-aspect controllable generation in a learned latent space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub set: Vec<String>,
    /// Run directory for inputs and outputs.
    #[arg(long, default_value = "run", global = true)]
    pub out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its oracle.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the VAE.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train the latent attribute classifiers on the frozen VAE.
    TrainClf {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the GAN prior on the frozen VAE's latents.
    FitGan {
        #[command(flatten)]
        common: Common,
    },
    /// Draw latents for the target combinations and decode them.
    Sample {
        #[command(flatten)]
        common: Common,
        /// ode, ld or random (`sampler.kind`).
        #[arg(long)]
        sampler: Option<String>,
        /// `all` or combinations like `1,3;0,*` (`sampler.targets`).
        #[arg(long)]
        targets: Option<String>,
        /// Samples per combination (`sampler.n`).
        #[arg(short = 'n', long = "n")]
        n: Option<usize>,
    },
    /// Score a samples file against the oracle.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Samples file (default: `paths.samples` in the run directory).
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Oracle file (default: `paths.oracle` in the run directory).
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Project corpus encodings onto their top two principal components.
    Project {
        #[command(flatten)]
        common: Common,
    },
    /// Train every ablation variant and compare all samplers.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common }
            | Command::TrainClf { common }
            | Command::FitGan { common }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Project { common }
            | Command::Ablate { common } => common,
        }
    }

    pub fn verb(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::TrainClf { .. } => "train-clf",
            Command::FitGan { .. } => "fit-gan",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Project { .. } => "project",
            Command::Ablate { .. } => "ablate",
        }
    }
}

/// Resolved configuration plus the run directory.
pub struct Context {
    pub config: RunConfig,
    pub settings: Settings,
    pub out: PathBuf,
    pub force: bool,
    pub verb: &'static str,
}

impl Context {
    pub fn new(command: &Command) -> Result<Self, CliError> {
        let common = command.common();
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &common.set {
            config.apply_override(kv)?;
        }
        if let Some(seed) = common.seed {
            config.set("seed", &seed.to_string())?;
        }
        if let Command::Sample { sampler, targets, n, .. } = command {
            if let Some(s) = sampler {
                config.set("sampler.kind", s)?;
            }
            if let Some(t) = targets {
                config.set("sampler.targets", t)?;
            }
            if let Some(n) = n {
                config.set("sampler.n", &n.to_string())?;
            }
        }
        let settings = Settings::from_config(&config)?;
        Ok(Self { config, settings, out: common.out.clone(), force: common.force, verb: command.verb() })
    }

    /// A `paths.*` entry resolved against the run directory.
    pub fn path(&self, key: &str) -> PathBuf {
        let p = Path::new(self.config.raw(key));
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn effective_path(&self) -> PathBuf {
        self.output(&format!("{}.{}", self.verb, crate::config::EFFECTIVE_FILE))
    }

    /// Refuse to clobber outputs unless `--force`; create the run directory.
    fn claim(&self, outputs: &[&Path]) -> Result<(), CliError> {
        if !self.force {
            let eff = self.effective_path();
            for p in outputs.iter().copied().chain(std::iter::once(eff.as_path())) {
                if p.exists() {
                    return Err(CliError::Exists(p.to_path_buf()));
                }
            }
        }
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        for p in outputs {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
        }
        write(&self.effective_path(), &self.config.effective())
    }

    fn load_corpus(&self) -> Result<(Vec<TokenSequence>, CorpusIndex), CliError> {
        let path = self.path("paths.corpus");
        let (schema, seqs, index) = load_corpus(&path)?;
        self.check_schema(&schema, &path)?;
        Ok((seqs, index))
    }

    fn check_schema(&self, found: &Schema, origin: &Path) -> Result<(), CliError> {
        if found != self.settings.schema() {
            return Err(CliError::Config(format!(
                "{} has schema {found:?} but the config describes {:?}",
                origin.display(),
                self.settings.schema()
            )));
        }
        Ok(())
    }

    fn load(&self, key: &str, kind: Kind) -> Result<Checkpoint, CliError> {
        let path = self.path(key);
        let ck = Checkpoint::load(&path, kind)?;
        self.check_schema(&checkpoint_schema(&ck)?, &path)?;
        Ok(ck)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::new(&cli.command)?;
    match &cli.command {
        Command::GenData { .. } => gen_data(&ctx),
        Command::Train { .. } => train(&ctx),
        Command::TrainClf { .. } => train_clf(&ctx),
        Command::FitGan { .. } => fit_gan(&ctx),
        Command::Sample { .. } => sample(&ctx),
        Command::Eval { samples, oracle, .. } => eval(&ctx, samples.as_deref(), oracle.as_deref()),
        Command::Project { .. } => project(&ctx),
        Command::Ablate { .. } => ablate(&ctx),
    }
}

pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    let corpus = ctx.path("paths.corpus");
    let oracle = ctx.path("paths.oracle");
    ctx.claim(&[&corpus, &oracle])?;
    let (seqs, _, o) = generate_synthetic(&ctx.settings.corpus)?;
    write(&corpus, &format_corpus(ctx.settings.schema(), &seqs))?;
    write(&oracle, &format_oracle(&o))?;
    eprintln!("wrote {} sequences to {}", seqs.len(), corpus.display());
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let ck_path = ctx.path("paths.vae");
    let trace_path = ctx.output("vae_loss.csv");
    ctx.claim(&[&ck_path, &trace_path])?;
    let (seqs, index) = ctx.load_corpus()?;
    let stage = train_vae_stage(&ctx.settings, &seqs, &index)?;
    vae_checkpoint(&stage.model, &ctx.config.hash()).save(&ck_path)?;
    write(&trace_path, &report::loss_trace_csv(&stage.trace))?;
    if let Some(last) = stage.trace.epochs.last() {
        eprintln!(
            "epoch {}: L_E {:.4} L_C {:.4} L_D {:.4}",
            last.epoch, last.elbo, last.classification, last.discrepancy
        );
    }
    Ok(())
}

pub fn train_clf(ctx: &Context) -> Result<(), CliError> {
    let ck_path = ctx.path("paths.energy");
    let trace_path = ctx.output("energy_loss.csv");
    ctx.claim(&[&ck_path, &trace_path])?;
    let (seqs, index) = ctx.load_corpus()?;
    let vae = vae_from(&ctx.load("paths.vae", Kind::Vae)?)?;
    let (model, rep) = train_energy_stage(&ctx.settings, &vae, &seqs, &index)?;
    energy_checkpoint(&model, ctx.settings.schema(), ctx.settings.energy.hidden, &ctx.config.hash()).save(&ck_path)?;
    write(&trace_path, &report::classifier_trace_csv(&rep.losses))?;
    for (n, a) in rep.val_accuracy.iter().enumerate() {
        eprintln!("aspect {n}: validation accuracy {a:.4}");
    }
    Ok(())
}

pub fn fit_gan(ctx: &Context) -> Result<(), CliError> {
    let ck_path = ctx.path("paths.gan");
    let trace_path = ctx.output("gan_trace.csv");
    ctx.claim(&[&ck_path, &trace_path])?;
    let (seqs, _) = ctx.load_corpus()?;
    let vae = vae_from(&ctx.load("paths.vae", Kind::Vae)?)?;
    let (gan, trace) = fit_gan_stage(&ctx.settings, &vae, &seqs)?;
    gan_checkpoint(&gan, ctx.settings.schema(), &ctx.config.hash()).save(&ck_path)?;
    write(&trace_path, &report::gan_trace_csv(&trace))?;
    eprintln!("held-out discriminator accuracy {:.4}", trace.held_out_accuracy);
    Ok(())
}

pub const TIMING_SUFFIX: &str = ".timing";

fn timing_path(samples: &Path) -> PathBuf {
    let mut s = samples.as_os_str().to_owned();
    s.push(TIMING_SUFFIX);
    PathBuf::from(s)
}

pub fn sample(ctx: &Context) -> Result<(), CliError> {
    let out = ctx.path("paths.samples");
    let timing = timing_path(&out);
    ctx.claim(&[&out, &timing])?;
    let s = &ctx.settings;
    let vae = vae_from(&ctx.load("paths.vae", Kind::Vae)?)?;
    let energy = match s.sampler {
        SamplerKind::Random => None,
        _ => Some(energy_from(&ctx.load("paths.energy", Kind::Energy)?)?),
    };
    let wants_gan = s.ode.init_mode == InitMode::Gan && s.sampler != SamplerKind::Ld;
    let gan = if wants_gan { Some(gan_from(&ctx.load("paths.gan", Kind::Gan)?)?) } else { None };
    let g = generate(s, s.sampler, &s.ode, &vae, energy.as_ref(), gan.as_ref())?;
    write(&out, &format_samples(s.schema(), &g.samples))?;
    write(&timing, &format!("seconds_per_sample={:e}\n", g.seconds_per_sample))?;
    eprintln!("wrote {} sequences to {}", g.samples.len(), out.display());
    Ok(())
}

fn read_timing(samples: &Path) -> f64 {
    std::fs::read_to_string(timing_path(samples))
        .ok()
        .and_then(|t| t.trim().strip_prefix("seconds_per_sample=").and_then(|v| v.parse().ok()))
        .unwrap_or(0.0)
}

pub fn eval(ctx: &Context, samples: Option<&Path>, oracle: Option<&Path>) -> Result<(), CliError> {
    let csv = ctx.output("eval.csv");
    let table = ctx.output("eval.txt");
    ctx.claim(&[&csv, &table])?;
    let samples_path = samples.map_or_else(|| ctx.path("paths.samples"), Path::to_path_buf);
    let oracle_path = oracle.map_or_else(|| ctx.path("paths.oracle"), Path::to_path_buf);
    if !oracle_path.exists() {
        return Err(CliError::Validation(format!("oracle file {} not found", oracle_path.display())));
    }
    let o = load_oracle(&oracle_path)?;
    let (schema, samples) = load_samples(&samples_path)?;
    if schema != o.schema {
        return Err(CliError::Validation(format!(
            "{} and {} describe different schemas",
            samples_path.display(),
            oracle_path.display()
        )));
    }
    let r = evaluate(&samples, &o, read_timing(&samples_path));
    write(&csv, &report::eval_csv(&r))?;
    let text = report::eval_table(&r);
    write(&table, &text)?;
    print!("{text}");
    Ok(())
}

pub fn project(ctx: &Context) -> Result<(), CliError> {
    let out = ctx.output("projection.csv");
    ctx.claim(&[&out])?;
    let (seqs, _) = ctx.load_corpus()?;
    let vae = vae_from(&ctx.load("paths.vae", Kind::Vae)?)?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let latents = vae.encode_mean_batch(&refs)?;
    let p = project_latents(&latents)?;
    if let Some(w) = &p.warning {
        eprintln!("warning: {w}");
    }
    let mut text = String::from("aspect,attribute");
    for k in 0..p.components.len() {
        text.push_str(&format!(",pc{}", k + 1));
    }
    text.push('\n');
    for (s, c) in seqs.iter().zip(&p.coords) {
        text.push_str(&format!("{},{}", s.aspect, s.attribute));
        for v in c {
            text.push_str(&format!(",{v:.6}"));
        }
        text.push('\n');
    }
    write(&out, &text)?;
    let ev: Vec<String> = p.explained.iter().map(|e| format!("{e:.4}")).collect();
    eprintln!("explained variance ratios: {}", ev.join(", "));
    Ok(())
}

pub fn ablate(ctx: &Context) -> Result<(), CliError> {
    let csv = ctx.output("ablation.csv");
    let diag = ctx.output("ablation_diagnostics.csv");
    ctx.claim(&[&csv, &diag])?;
    let (seqs, index) = ctx.load_corpus()?;
    let oracle = load_oracle(&ctx.path("paths.oracle"))?;
    let ab = run_ablation(&ctx.settings, &seqs, &index, &oracle, |m| eprintln!("{m}"));
    write(&csv, &report::ablation_csv(&ab))?;
    write(&diag, &report::diagnostics_csv(&ab.diagnostics))?;
    let failures = report::ablation_failures(&ab);
    if !failures.is_empty() {
        eprint!("failed conditions:\n{failures}");
    }
    print!("{}", report::ablation_csv(&ab));
    Ok(())
}
