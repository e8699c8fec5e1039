//! Typed settings and the stage functions shared by the commands.

use std::time::Instant;

use mlsa_core::corpus::{stratified_split, CorpusIndex, OracleClassifier, Schema, SyntheticSpec, TokenSequence};
use mlsa_core::energy::{
    train_latent_classifiers, AttributeTarget, ClassifierReport, ClassifierTrainConfig, EnergyModel,
};
use mlsa_core::eval::{center_distance_ratio, evaluate, EvalReport, GeneratedSample};
use mlsa_core::optim::AdamWConfig;
use mlsa_core::rng::mix64;
use mlsa_core::samplers::{
    fit_gan_prior, sample_ld, sample_ode, sample_random, DiffusionSchedule, GanPrior,
    GanTrace, GanTrainConfig, InitMode, LdConfig, OdeConfig, OdeMethod, TargetedEnergy,
};
use mlsa_core::vae::{
    tokens_from_logits, train_vae, DecodeMode, LatentVector, TrainTrace, VaeConfig, VaeModel, VaeTrainConfig,
};
use mlsa_core::Rng;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ode,
    Ld,
    Random,
}

impl std::str::FromStr for SamplerKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "ode" => Ok(Self::Ode),
            "ld" => Ok(Self::Ld),
            "random" => Ok(Self::Random),
            _ => Err(CliError::Config(format!("unknown sampler `{s}`; expected ode, ld or random"))),
        }
    }
}

/// Stage identifiers mixed into the global seed.
mod stage {
    pub const SPLIT: u64 = 1;
    pub const VAE: u64 = 2;
    pub const ENERGY: u64 = 3;
    pub const GAN: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const DECODE: u64 = 6;
}

fn stage_rng(seed: u64, id: u64) -> Rng {
    Rng::for_chain(seed, id)
}

/// Seed for the chains of the `position`-th requested combination.
fn combination_seed(seed: u64, stage_id: u64, position: usize) -> u64 {
    mix64(mix64(seed ^ stage_id.rotate_left(32)) ^ position as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub corpus: SyntheticSpec,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub heldout_fraction: f64,
    pub energy: ClassifierTrainConfig,
    pub weights: Vec<f32>,
    pub gan: GanTrainConfig,
    pub sampler: SamplerKind,
    pub samples_per_target: usize,
    pub targets: Vec<Vec<Option<usize>>>,
    pub decode: DecodeMode,
    pub schedule: DiffusionSchedule,
    pub ode: OdeConfig,
    pub ld: LdConfig,
}

fn fraction(cfg: &RunConfig, key: &str) -> Result<f64, CliError> {
    let v: f64 = cfg.get(key)?;
    if !(0.0..1.0).contains(&v) {
        return Err(CliError::Config(format!("`{key}` = {v} must be in [0, 1)")));
    }
    Ok(v)
}

impl Settings {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let seed: u64 = cfg.get("seed")?;
        let schema = Schema {
            attrs_per_aspect: cfg.list("corpus.attrs")?,
            vocab_size: cfg.get("corpus.vocab_size")?,
            max_len: cfg.get("corpus.max_len")?,
        };
        let corpus = SyntheticSpec {
            schema,
            skew: cfg.get("corpus.skew")?,
            sequences_per_attribute: cfg.get("corpus.sequences_per_attribute")?,
            seed,
        };
        corpus.validate()?;
        let aspects = corpus.schema.aspects();

        let vae = VaeConfig {
            latent_dim: cfg.get("vae.latent_dim")?,
            embed_dim: cfg.get("vae.embed_dim")?,
            hidden: cfg.get("vae.hidden")?,
        };
        let vae_opt = AdamWConfig {
            learning_rate: cfg.get("vae.lr")?,
            beta1: cfg.get("vae.beta1")?,
            beta2: cfg.get("vae.beta2")?,
            eps: cfg.get("vae.eps")?,
            weight_decay: cfg.get("vae.weight_decay")?,
        };
        vae_opt.validate()?;
        let vae_train = VaeTrainConfig {
            epochs: cfg.get("vae.epochs")?,
            batch_size: cfg.get("vae.batch_size")?,
            optimizer: vae_opt,
            cycle_epochs: cfg.get("vae.kl_cycle_epochs")?,
            ramp_fraction: cfg.get("vae.kl_ramp_fraction")?,
            free_bits: cfg.get("vae.free_bits")?,
            use_classification: cfg.get("vae.use_classification")?,
            use_discrepancy: cfg.get("vae.use_discrepancy")?,
        };

        let hidden: usize = cfg.get("energy.hidden")?;
        let energy = ClassifierTrainConfig {
            epochs: cfg.get("energy.epochs")?,
            batch_size: cfg.get("energy.batch_size")?,
            optimizer: AdamWConfig { learning_rate: cfg.get("energy.lr")?, ..AdamWConfig::default() },
            hidden: (hidden > 0).then_some(hidden),
            val_fraction: fraction(cfg, "energy.val_fraction")?,
        };
        energy.optimizer.validate()?;
        let weights: Vec<f32> = cfg.list("energy.weights")?;
        if weights.len() != aspects {
            return Err(CliError::Config(format!(
                "`energy.weights` has {} entries but the corpus has {aspects} aspects",
                weights.len()
            )));
        }
        if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
            return Err(CliError::Config("`energy.weights` must be positive".into()));
        }

        let gan_opt = AdamWConfig {
            learning_rate: cfg.get("gan.lr")?,
            beta1: cfg.get("gan.beta1")?,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        gan_opt.validate()?;
        let gan = GanTrainConfig {
            epochs: cfg.get("gan.epochs")?,
            batch_size: cfg.get("gan.batch_size")?,
            hidden: cfg.get("gan.hidden")?,
            generator_optimizer: gan_opt,
            discriminator_optimizer: gan_opt,
            held_out_fraction: fraction(cfg, "gan.held_out_fraction")?,
        };

        let decode = match cfg.raw("sampler.decode") {
            "argmax" => DecodeMode::Argmax,
            "sample" => DecodeMode::Sample { temperature: cfg.get("sampler.temperature")? },
            other => return Err(CliError::Config(format!("unknown decode mode `{other}`; expected sample or argmax"))),
        };
        let schedule = DiffusionSchedule {
            beta_min: cfg.get("sampler.beta_min")?,
            beta_max: cfg.get("sampler.beta_max")?,
            t_end: cfg.get("sampler.t_end")?,
        };
        schedule.validate()?;
        let max_steps: usize = cfg.get("sampler.ode.max_steps")?;
        let ode = OdeConfig {
            method: match cfg.raw("sampler.ode.method") {
                "rk45" => OdeMethod::Rk45Adaptive,
                "rk4" => OdeMethod::Rk4Fixed,
                other => return Err(CliError::Config(format!("unknown ODE method `{other}`; expected rk45 or rk4"))),
            },
            steps: cfg.get("sampler.ode.steps")?,
            rtol: cfg.get("sampler.ode.rtol")?,
            atol: cfg.get("sampler.ode.atol")?,
            max_steps: (max_steps > 0).then_some(max_steps),
            init_mode: match cfg.raw("sampler.ode.init") {
                "gan" => InitMode::Gan,
                "gaussian" => InitMode::Gaussian,
                other => return Err(CliError::Config(format!("unknown init mode `{other}`; expected gan or gaussian"))),
            },
        };
        ode.validate()?;
        let ld = LdConfig {
            step_size: cfg.get("sampler.ld.step_size")?,
            n_steps: cfg.get("sampler.ld.steps")?,
            noise_scale: cfg.get("sampler.ld.noise_scale")?,
        };
        ld.validate()?;

        Ok(Self {
            seed,
            targets: parse_targets(cfg.raw("sampler.targets"), &corpus.schema)?,
            corpus,
            vae,
            vae_train,
            heldout_fraction: fraction(cfg, "eval.heldout_fraction")?,
            energy,
            weights,
            gan,
            sampler: cfg.get("sampler.kind")?,
            samples_per_target: cfg.get("sampler.n")?,
            decode,
            schedule,
            ode,
            ld,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.corpus.schema
    }
}

fn valid_attributes(schema: &Schema) -> String {
    schema
        .attrs_per_aspect
        .iter()
        .enumerate()
        .map(|(n, k)| format!("aspect {n}: 0..={}", k - 1))
        .collect::<Vec<_>>()
        .join(", ")
}

/// `all`, or combinations separated by `;`, each listing one attribute per
/// aspect (`*` leaves the aspect untargeted).
pub fn parse_targets(spec: &str, schema: &Schema) -> Result<Vec<Vec<Option<usize>>>, CliError> {
    let spec = spec.trim();
    if spec == "all" {
        return Ok(schema.combinations().into_iter().map(|c| c.into_iter().map(Some).collect()).collect());
    }
    let mut out = Vec::new();
    for combo in spec.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let parts: Vec<&str> = combo.split(',').map(str::trim).collect();
        if parts.len() != schema.aspects() {
            return Err(CliError::Validation(format!(
                "target `{combo}` names {} aspects; valid aspects are 0..={} ({})",
                parts.len(),
                schema.aspects() - 1,
                valid_attributes(schema)
            )));
        }
        let mut target = Vec::with_capacity(parts.len());
        for (n, p) in parts.iter().enumerate() {
            if *p == "*" {
                target.push(None);
                continue;
            }
            match p.parse::<usize>() {
                Ok(j) if j < schema.attrs_per_aspect[n] => target.push(Some(j)),
                _ => {
                    return Err(CliError::Validation(format!(
                        "unknown attribute `{p}` for aspect {n} in target `{combo}`; valid values: {}",
                        valid_attributes(schema)
                    )))
                }
            }
        }
        if target.iter().all(Option::is_none) {
            return Err(CliError::Validation(format!("target `{combo}` selects no attribute")));
        }
        out.push(target);
    }
    Ok(out)
}

fn attribute_target(target: &[Option<usize>], weights: &[f32]) -> Result<AttributeTarget, CliError> {
    let (pairs, ws) = target
        .iter()
        .enumerate()
        .filter_map(|(n, t)| t.map(|j| ((n, j), weights[n])))
        .unzip();
    Ok(AttributeTarget::new(pairs, ws)?)
}

/// Train/held-out split used for VAE training (held-out ids feed the
/// latent-geometry check).
pub fn vae_split(settings: &Settings, index: &CorpusIndex) -> (Vec<usize>, Vec<usize>) {
    stratified_split(index, settings.heldout_fraction, &mut stage_rng(settings.seed, stage::SPLIT))
}

pub struct VaeStage {
    pub model: VaeModel,
    pub trace: TrainTrace,
    pub heldout: Vec<usize>,
}

pub fn train_vae_stage(settings: &Settings, seqs: &[TokenSequence], index: &CorpusIndex) -> Result<VaeStage, CliError> {
    let (train, heldout) = vae_split(settings, index);
    let mut rng = stage_rng(settings.seed, stage::VAE);
    let mut model = VaeModel::new(settings.schema().clone(), settings.vae, &mut rng)?;
    let trace = train_vae(&mut model, seqs, index, Some(&train), &settings.vae_train, &mut rng)?;
    Ok(VaeStage { model, trace, heldout })
}

pub fn train_energy_stage(
    settings: &Settings,
    vae: &VaeModel,
    seqs: &[TokenSequence],
    index: &CorpusIndex,
) -> Result<(EnergyModel, ClassifierReport), CliError> {
    let mut rng = stage_rng(settings.seed, stage::ENERGY);
    Ok(train_latent_classifiers(vae, seqs, index, &settings.energy, &mut rng)?)
}

pub fn fit_gan_stage(settings: &Settings, vae: &VaeModel, seqs: &[TokenSequence]) -> Result<(GanPrior, GanTrace), CliError> {
    let mut rng = stage_rng(settings.seed, stage::GAN);
    Ok(fit_gan_prior(vae, seqs, &settings.gan, &mut rng)?)
}

/// Latents for each requested target, `n` per target. Chains of the
/// `i`-th target use a seed derived from `(seed, i)` only, so samplers that
/// ignore the target produce the same latents for any target values.
pub fn draw_latents(
    settings: &Settings,
    kind: SamplerKind,
    ode: &OdeConfig,
    energy: Option<&EnergyModel>,
    gan: Option<&GanPrior>,
) -> Result<Vec<Vec<LatentVector>>, CliError> {
    let d = settings.vae.latent_dim;
    let n = settings.samples_per_target;
    let mut out = Vec::with_capacity(settings.targets.len());
    for (pos, target) in settings.targets.iter().enumerate() {
        let seed = combination_seed(settings.seed, stage::SAMPLE, pos);
        let latents = match kind {
            SamplerKind::Random => sample_random(gan, d, n, seed)?,
            SamplerKind::Ode | SamplerKind::Ld => {
                let model = energy.ok_or_else(|| CliError::Config("sampler needs an energy model".into()))?;
                let at = attribute_target(target, &settings.weights)?;
                let field = TargetedEnergy::new(model, &at)?;
                if kind == SamplerKind::Ode {
                    sample_ode(&field, ode, &settings.schedule, gan, n, seed)?
                } else {
                    sample_ld(&field, &settings.ld, n, seed)?
                }
            }
        };
        out.push(latents);
    }
    Ok(out)
}

/// Decode every latent; chain `i` of the `pos`-th target decodes with its
/// own RNG stream.
pub fn decode_latents(
    settings: &Settings,
    vae: &VaeModel,
    latents: &[Vec<LatentVector>],
) -> Result<Vec<GeneratedSample>, CliError> {
    let mut out = Vec::new();
    for (pos, (target, group)) in settings.targets.iter().zip(latents).enumerate() {
        let seed = combination_seed(settings.seed, stage::DECODE, pos);
        let refs: Vec<&[f32]> = group.iter().map(|z| &z[..]).collect();
        let logits = vae.decode_logits_batch(&refs)?;
        for (i, l) in logits.iter().enumerate() {
            let mut rng = Rng::for_chain(seed, i as u64);
            out.push(GeneratedSample { target: target.clone(), tokens: tokens_from_logits(l, settings.decode, &mut rng) });
        }
    }
    Ok(out)
}

pub struct Generated {
    pub samples: Vec<GeneratedSample>,
    pub seconds_per_sample: f64,
}

pub fn generate(
    settings: &Settings,
    kind: SamplerKind,
    ode: &OdeConfig,
    vae: &VaeModel,
    energy: Option<&EnergyModel>,
    gan: Option<&GanPrior>,
) -> Result<Generated, CliError> {
    let start = Instant::now();
    let latents = draw_latents(settings, kind, ode, energy, gan)?;
    let samples = decode_latents(settings, vae, &latents)?;
    let secs = start.elapsed().as_secs_f64();
    let seconds_per_sample = if samples.is_empty() { 0.0 } else { secs / samples.len() as f64 };
    Ok(Generated { samples, seconds_per_sample })
}

/// The ablation grid's training variants.
pub const VARIANTS: [&str; 3] = ["full", "no_LC", "no_LD"];
/// The ablation grid's sampler conditions.
pub const SAMPLERS: [&str; 4] = ["ode", "ld", "random", "ode-no-gan"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub sampler: String,
    pub outcome: Result<EvalReport, String>,
}

/// Diagnostics gathered per training variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantDiagnostics {
    pub variant: String,
    /// Inter-aspect over intra-aspect center distance on held-out encodings.
    pub center_ratio: Result<f64, String>,
    pub classifier_accuracy: Vec<f64>,
    pub gan_held_out_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub diagnostics: Vec<VariantDiagnostics>,
}

impl Ablation {
    pub fn correctness(&self, variant: &str, sampler: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.sampler == sampler)
            .and_then(|r| r.outcome.as_ref().ok())
            .map(|r| r.average.correctness)
    }
}

struct VariantModels {
    vae: VaeModel,
    energy: EnergyModel,
    gan: GanPrior,
    diagnostics: VariantDiagnostics,
}

fn train_variant(
    settings: &Settings,
    variant: &str,
    seqs: &[TokenSequence],
    index: &CorpusIndex,
) -> Result<VariantModels, CliError> {
    let start = Instant::now();
    let mut s = settings.clone();
    s.vae_train.use_classification = variant != "no_LC";
    s.vae_train.use_discrepancy = variant != "no_LD";
    let vae = train_vae_stage(&s, seqs, index)?;
    let (energy, report) = train_energy_stage(&s, &vae.model, seqs, index)?;
    let (gan, trace) = fit_gan_stage(&s, &vae.model, seqs)?;
    let held: Vec<&TokenSequence> = vae.heldout.iter().map(|i| &seqs[*i]).collect();
    let latents = vae.model.encode_mean_batch(&held)?;
    let labels: Vec<(usize, usize)> = held.iter().map(|q| (q.aspect, q.attribute)).collect();
    let center_ratio = center_distance_ratio(&latents, &labels).map_err(|e| e.to_string());
    Ok(VariantModels {
        vae: vae.model,
        energy,
        gan,
        diagnostics: VariantDiagnostics {
            variant: variant.to_string(),
            center_ratio,
            classifier_accuracy: report.val_accuracy,
            gan_held_out_accuracy: trace.held_out_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

fn run_condition(settings: &Settings, m: &VariantModels, sampler: &str, oracle: &OracleClassifier) -> Result<EvalReport, CliError> {
    let gan_ode = OdeConfig { init_mode: InitMode::Gan, ..settings.ode };
    let plain_ode = OdeConfig { init_mode: InitMode::Gaussian, ..settings.ode };
    let g = match sampler {
        "ode" => generate(settings, SamplerKind::Ode, &gan_ode, &m.vae, Some(&m.energy), Some(&m.gan))?,
        "ode-no-gan" => generate(settings, SamplerKind::Ode, &plain_ode, &m.vae, Some(&m.energy), None)?,
        "ld" => generate(settings, SamplerKind::Ld, &settings.ode, &m.vae, Some(&m.energy), None)?,
        "random" => generate(settings, SamplerKind::Random, &settings.ode, &m.vae, None, Some(&m.gan))?,
        other => return Err(CliError::Config(format!("unknown ablation sampler `{other}`"))),
    };
    Ok(evaluate(&g.samples, oracle, g.seconds_per_sample))
}

/// Every training variant crossed with every sampler. Each variant's models
/// are trained once and shared by its sampler conditions; a failing stage
/// marks its rows failed and the grid continues.
pub fn run_ablation(
    settings: &Settings,
    seqs: &[TokenSequence],
    index: &CorpusIndex,
    oracle: &OracleClassifier,
    mut progress: impl FnMut(&str),
) -> Ablation {
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for variant in VARIANTS {
        progress(&format!("training variant {variant}"));
        match train_variant(settings, variant, seqs, index) {
            Ok(models) => {
                for sampler in SAMPLERS {
                    let outcome = run_condition(settings, &models, sampler, oracle).map_err(|e| e.to_string());
                    if let Ok(r) = &outcome {
                        progress(&format!("{variant}/{sampler}: correctness {:.4}", r.average.correctness));
                    }
                    rows.push(AblationRow { variant: variant.into(), sampler: sampler.into(), outcome });
                }
                diagnostics.push(models.diagnostics);
            }
            Err(e) => {
                let msg = e.to_string();
                progress(&format!("variant {variant} failed: {msg}"));
                for sampler in SAMPLERS {
                    rows.push(AblationRow { variant: variant.into(), sampler: sampler.into(), outcome: Err(msg.clone()) });
                }
            }
        }
    }
    Ablation { rows, diagnostics }
}

