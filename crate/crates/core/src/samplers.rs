//! Latent samplers: the probability-flow ODE, Langevin dynamics, random
//! draws, and the single-layer GAN prior that supplies starting points.
//!
//! Under a standard-normal prior the flow
//! `dz = −½β(t)[z − ∇E(a|z) + ∇log p_t(z)] dt` collapses to
//! `dz = ½β(t)∇E(a|z) dt`, integrated from `t = T` down to `0`.
//!
//! Every sampler derives one RNG per chain from `(seed, chain index)`, so
//! a chain's output does not depend on how many other chains run.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::TokenSequence;
use crate::energy::{energy_and_gradient, AttributeTarget, EnergyModel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{take_grads, Linear, Mlp, Parameters};
use crate::ode::{dopri5, rk4, AdaptiveConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::{LatentVector, VaeModel};

/// `‖z‖` beyond which Langevin dynamics is declared divergent.
pub const LD_DIVERGENCE_NORM: f64 = 1e4;

/// A differentiable energy over the latent space.
pub trait EnergyField {
    fn dim(&self) -> usize;
    fn energy(&self, z: &[f64]) -> Result<f64>;
    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>>;
}

/// `E(a | z)` of an [`EnergyModel`] for a fixed target.
#[derive(Clone, Copy, Debug)]
pub struct TargetedEnergy<'a> {
    pub model: &'a EnergyModel,
    pub target: &'a AttributeTarget,
}

impl<'a> TargetedEnergy<'a> {
    pub fn new(model: &'a EnergyModel, target: &'a AttributeTarget) -> Result<Self> {
        model.check_target(target)?;
        Ok(Self { model, target })
    }
}

fn to_f32(z: &[f64]) -> Vec<f32> {
    z.iter().map(|v| *v as f32).collect()
}

impl EnergyField for TargetedEnergy<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim
    }

    fn energy(&self, z: &[f64]) -> Result<f64> {
        Ok(crate::energy::total_energy(self.model, &to_f32(z), self.target)? as f64)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        let (_, g) = energy_and_gradient(self.model, &to_f32(z), self.target)?;
        Ok(g.into_iter().map(f64::from).collect())
    }
}

/// `E(z) = ½ s ‖z − μ‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticEnergy {
    pub center: Vec<f64>,
    pub stiffness: f64,
}

impl EnergyField for QuadraticEnergy {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn energy(&self, z: &[f64]) -> Result<f64> {
        Ok(0.5 * self.stiffness * z.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(z.iter().zip(&self.center).map(|(a, b)| self.stiffness * (a - b)).collect())
    }
}

/// A flat energy; also the energy of an empty target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstantEnergy {
    pub dim: usize,
}

impl EnergyField for ConstantEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, _z: &[f64]) -> Result<f64> {
        Ok(0.0)
    }

    fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; z.len()])
    }
}

/// Linear `β(t)` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, t_end: 1.0 }
    }
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min && self.t_end > 0.0) {
            return Err(Error::Config(format!("invalid diffusion schedule {self:?}")));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }
}

fn check_time(t: f64, schedule: &DiffusionSchedule) -> Result<()> {
    if !(0.0..=schedule.t_end).contains(&t) {
        return Err(Error::Contract(format!("t = {t} outside [0, {}]", schedule.t_end)));
    }
    Ok(())
}

fn finite(v: Vec<f64>, op: &'static str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(v)
}

/// `dz/dt = ½ β(t) ∇E(a|z)`.
pub fn ode_rhs(field: &impl EnergyField, z: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_time(t, schedule)?;
    let half_beta = 0.5 * schedule.beta(t);
    let grad = field.gradient(z)?;
    finite(grad.into_iter().map(|g| half_beta * g).collect(), "ode rhs")
}

/// `dz/dt = −½ β(t) [z − ∇E(a|z) + ∇log N(z; 0, I)]`, before the prior
/// terms cancel.
pub fn ode_rhs_unsimplified(
    field: &impl EnergyField,
    z: &[f64],
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    check_time(t, schedule)?;
    let beta = schedule.beta(t);
    let grad = field.gradient(z)?;
    let out = z.iter().zip(&grad).map(|(zi, gi)| {
        let score = -zi;
        -0.5 * beta * (zi - gi + score)
    });
    finite(out.collect(), "ode rhs")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OdeMethod {
    Rk4Fixed,
    Rk45Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Gaussian,
    Gan,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Adaptive step budget; `None` means `10 * steps`.
    pub max_steps: Option<usize>,
    pub init_mode: InitMode,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Rk45Adaptive,
            steps: 200,
            rtol: 1e-4,
            atol: 1e-4,
            max_steps: None,
            init_mode: InitMode::Gan,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("ODE steps must be at least 1".into()));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("ODE tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn step_budget(&self) -> usize {
        self.max_steps.unwrap_or(10 * self.steps)
    }
}

/// Integrate one chain from `z(T) = z_t` to `z(0)`.
pub fn integrate_chain(
    field: &impl EnergyField,
    z_t: &[f64],
    config: &OdeConfig,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    let t_end = schedule.t_end;
    // s = T − t runs forward from 0 to T, and dz/ds = −dz/dt.
    let f = |s: f64, z: &[f64]| -> Result<Vec<f64>> {
        let t = (t_end - s).clamp(0.0, t_end);
        let mut r = ode_rhs(field, z, t, schedule)?;
        r.iter_mut().for_each(|v| *v = -*v);
        Ok(r)
    };
    match config.method {
        OdeMethod::Rk4Fixed => rk4(f, 0.0, t_end, z_t, config.steps),
        OdeMethod::Rk45Adaptive => {
            let cfg = AdaptiveConfig { rtol: config.rtol, atol: config.atol, max_steps: config.step_budget() };
            Ok(dopri5(f, 0.0, t_end, z_t, &cfg)?.0)
        }
    }
}

/// Starting point of chain `index`: `N(0, I)` or a GAN draw.
fn initial_point(gan: Option<&GanPrior>, d: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    match gan {
        Some(g) => Ok(g.sample(rng)?.iter().map(|v| *v as f64).collect()),
        None => Ok((0..d).map(|_| rng.normal()).collect()),
    }
}

fn check_gan(gan: Option<&GanPrior>, d: usize) -> Result<()> {
    if let Some(g) = gan {
        if g.latent_dim() != d {
            return Err(Error::Validation(format!("GAN prior has dim {}, energy has {d}", g.latent_dim())));
        }
    }
    Ok(())
}

/// ODE samples; chain `i` starts from `Rng::for_chain(seed, i)`.
pub fn sample_ode(
    field: &impl EnergyField,
    config: &OdeConfig,
    schedule: &DiffusionSchedule,
    gan: Option<&GanPrior>,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LatentVector>> {
    config.validate()?;
    schedule.validate()?;
    let gan = match config.init_mode {
        InitMode::Gaussian => None,
        InitMode::Gan => {
            Some(gan.ok_or_else(|| Error::Config("init_mode = gan needs a fitted GAN prior".into()))?)
        }
    };
    let d = field.dim();
    check_gan(gan, d)?;
    (0..n_samples)
        .map(|i| {
            let mut rng = Rng::for_chain(seed, i as u64);
            let z_t = initial_point(gan, d, &mut rng)?;
            Ok(LatentVector::from_f64(&integrate_chain(field, &z_t, config, schedule)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdConfig {
    pub step_size: f64,
    pub n_steps: usize,
    pub noise_scale: f64,
}

impl Default for LdConfig {
    fn default() -> Self {
        Self { step_size: 0.01, n_steps: 200, noise_scale: 1.0 }
    }
}

impl LdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(Error::Config(format!("LD step size {} must be non-negative", self.step_size)));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return Err(Error::Config("LD noise scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// One Langevin chain from `z0`:
/// `z ← z − (η/2)∇[E(a|z) + ½‖z‖²] + √η · noise_scale · ε`.
pub fn langevin_chain(field: &impl EnergyField, z0: Vec<f64>, config: &LdConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let eta = config.step_size;
    let noise = libm::sqrt(eta) * config.noise_scale;
    let mut z = z0;
    for _ in 0..config.n_steps {
        let grad = field.gradient(&z)?;
        for (zi, gi) in z.iter_mut().zip(&grad) {
            let drift = 0.5 * eta * (gi + *zi);
            *zi -= drift;
        }
        if noise > 0.0 {
            for zi in z.iter_mut() {
                *zi += noise * rng.normal();
            }
        }
        let norm = libm::sqrt(z.iter().map(|v| v * v).sum::<f64>());
        if !norm.is_finite() || norm > LD_DIVERGENCE_NORM {
            return Err(Error::Divergence(format!(
                "Langevin chain reached |z| = {norm:.3e}; try a smaller step size than {eta}"
            )));
        }
    }
    Ok(z)
}

/// Langevin samples from `N(0, I)` starts.
pub fn sample_ld(field: &impl EnergyField, config: &LdConfig, n_samples: usize, seed: u64) -> Result<Vec<LatentVector>> {
    config.validate()?;
    let d = field.dim();
    (0..n_samples)
        .map(|i| {
            let mut rng = Rng::for_chain(seed, i as u64);
            let z0 = initial_point(None, d, &mut rng)?;
            Ok(LatentVector::from_f64(&langevin_chain(field, z0, config, &mut rng)?))
        })
        .collect()
}

/// Draws from the GAN prior when given, else `N(0, I)`. No target is
/// involved.
pub fn sample_random(gan: Option<&GanPrior>, d: usize, n_samples: usize, seed: u64) -> Result<Vec<LatentVector>> {
    check_gan(gan, d)?;
    (0..n_samples)
        .map(|i| {
            let mut rng = Rng::for_chain(seed, i as u64);
            Ok(LatentVector::from_f64(&initial_point(gan, d, &mut rng)?))
        })
        .collect()
}

/// Single linear generator `N(0, I_d) → Z` with an MLP discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct GanPrior {
    pub generator: Linear,
    pub discriminator: Mlp,
}

impl Parameters for GanPrior {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.generator.named("generator", &mut out);
        self.discriminator.named("discriminator", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.generator.params_mut(&mut out);
        self.discriminator.params_mut(&mut out);
        out
    }
}

impl GanPrior {
    pub fn new(latent_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            generator: Linear::new(latent_dim, latent_dim, rng),
            discriminator: Mlp::new(&[latent_dim, hidden, 1], rng),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.outputs()
    }

    /// `noise W + b` for one noise vector.
    pub fn generate(&self, noise: &[f32]) -> Result<Vec<f32>> {
        let x = Tensor::matrix(1, noise.len(), noise.to_vec())?;
        let mut y = x.matmul(&self.generator.weight)?.into_data();
        for (v, b) in y.iter_mut().zip(self.generator.bias.data()) {
            *v += b;
        }
        Ok(y)
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Vec<f32>> {
        let noise = rng.normal_vec(self.generator.inputs());
        self.generate(&noise)
    }

    /// Discriminator logits for rows of `z`.
    pub fn discriminate(&self, zs: &[&[f32]]) -> Result<Vec<f32>> {
        let d = self.latent_dim();
        let data: Vec<f32> = zs.iter().flat_map(|z| z.iter().copied()).collect();
        let mut g = Graph::new();
        let vars = self.discriminator.bind(&mut g, false)?;
        let x = g.constant(Tensor::matrix(zs.len(), d, data)?)?;
        let out = vars.forward(&mut g, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub generator_optimizer: AdamWConfig,
    pub discriminator_optimizer: AdamWConfig,
    pub held_out_fraction: f64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig { learning_rate: 2e-3, beta1: 0.5, weight_decay: 0.0, ..AdamWConfig::default() };
        Self {
            epochs: 10,
            batch_size: 64,
            hidden: 32,
            generator_optimizer: opt,
            discriminator_optimizer: opt,
            held_out_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanTrace {
    /// Mean discriminator accuracy on training batches, per epoch.
    pub discriminator_accuracy: Vec<f64>,
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
    /// Accuracy on held-out real latents plus as many fresh generator draws.
    pub held_out_accuracy: f64,
}

fn batch_tensor(rows: &[&[f32]], d: usize) -> Result<Tensor> {
    Tensor::matrix(rows.len(), d, rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// `mean softplus(−sign · logits)`: the non-saturating loss for one label.
fn softplus_mean(g: &mut Graph, logits: Var, real: bool) -> Result<Var> {
    let x = if real { g.neg(logits)? } else { logits };
    let sp = g.softplus(x)?;
    g.mean(sp)
}

fn accuracy(real: &[f32], fake: &[f32]) -> f64 {
    let hits = real.iter().filter(|v| **v > 0.0).count() + fake.iter().filter(|v| **v <= 0.0).count();
    hits as f64 / (real.len() + fake.len()).max(1) as f64
}

/// Fit the prior to the posterior means of `seqs`.
pub fn fit_gan_prior(
    vae: &VaeModel,
    seqs: &[TokenSequence],
    config: &GanTrainConfig,
    rng: &mut Rng,
) -> Result<(GanPrior, GanTrace)> {
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let latents = vae.encode_mean_batch(&refs)?;
    fit_gan_on_latents(&latents, vae.latent_dim(), config, rng)
}

/// Alternating non-saturating updates of discriminator and generator.
pub fn fit_gan_on_latents(
    latents: &[LatentVector],
    d: usize,
    config: &GanTrainConfig,
    rng: &mut Rng,
) -> Result<(GanPrior, GanTrace)> {
    if config.batch_size == 0 || config.hidden == 0 {
        return Err(Error::Config("GAN batch_size and hidden must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.held_out_fraction) {
        return Err(Error::Config("held_out_fraction must be in [0, 1)".into()));
    }
    if let Some(z) = latents.iter().find(|z| z.len() != d) {
        return Err(Error::Shape { op: "gan", detail: format!("latent has {} dims, expected {d}", z.len()) });
    }
    let mut prior = GanPrior::new(d, config.hidden, rng);
    let mut trace = GanTrace::default();
    let mut ids: Vec<usize> = (0..latents.len()).collect();
    rng.shuffle(&mut ids);
    let held = libm::ceil(latents.len() as f64 * config.held_out_fraction) as usize;
    let (held_ids, train_ids) = ids.split_at(held.min(ids.len()));
    let mut train_ids = train_ids.to_vec();

    let mut opt_g = AdamW::new(config.generator_optimizer)?;
    let mut opt_d = AdamW::new(config.discriminator_optimizer)?;
    for _ in 0..config.epochs {
        if train_ids.is_empty() {
            break;
        }
        rng.shuffle(&mut train_ids);
        let (mut acc_sum, mut ld_sum, mut lg_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in train_ids.chunks(config.batch_size) {
            let b = chunk.len();
            let reals: Vec<&[f32]> = chunk.iter().map(|i| &latents[*i][..]).collect();
            let real = batch_tensor(&reals, d)?;

            // discriminator step on detached fakes
            let noise = Tensor::matrix(b, d, rng.normal_vec(b * d))?;
            let mut g = Graph::new();
            let gv = prior.generator.bind(&mut g, false)?;
            let dv = prior.discriminator.bind(&mut g, true)?;
            let nz = g.constant(noise)?;
            let fake = gv.forward(&mut g, nz)?;
            let rv = g.constant(real)?;
            let real_logits = dv.forward(&mut g, rv)?;
            let fake_logits = dv.forward(&mut g, fake)?;
            let lr = softplus_mean(&mut g, real_logits, true)?;
            let lf = softplus_mean(&mut g, fake_logits, false)?;
            let loss_d = g.add(lr, lf)?;
            acc_sum += accuracy(g.value(real_logits).data(), g.value(fake_logits).data());
            ld_sum += g.item(loss_d)? as f64;
            let mut grads = g.backward(loss_d).map_err(|_| Error::NonFinite { op: "GAN discriminator loss" })?;
            let mut vs = Vec::new();
            dv.collect(&mut vs);
            let grads = take_grads(&mut grads, &vs);
            let mut params = Vec::new();
            prior.discriminator.params_mut(&mut params);
            opt_d.step(&mut params, &grads)?;

            // generator step through the updated discriminator
            let noise = Tensor::matrix(b, d, rng.normal_vec(b * d))?;
            let mut g = Graph::new();
            let gv = prior.generator.bind(&mut g, true)?;
            let dv = prior.discriminator.bind(&mut g, false)?;
            let nz = g.constant(noise)?;
            let fake = gv.forward(&mut g, nz)?;
            let logits = dv.forward(&mut g, fake)?;
            let loss_g = softplus_mean(&mut g, logits, true)?;
            lg_sum += g.item(loss_g)? as f64;
            let mut grads = g.backward(loss_g).map_err(|_| Error::NonFinite { op: "GAN generator loss" })?;
            let grads = take_grads(&mut grads, &gv.vars());
            let mut params = Vec::new();
            prior.generator.params_mut(&mut params);
            opt_g.step(&mut params, &grads)?;
            batches += 1;
        }
        let n = batches as f64;
        trace.discriminator_accuracy.push(acc_sum / n);
        trace.discriminator_loss.push(ld_sum / n);
        trace.generator_loss.push(lg_sum / n);
    }

    if !held_ids.is_empty() {
        let reals: Vec<&[f32]> = held_ids.iter().map(|i| &latents[*i][..]).collect();
        let fakes: Vec<Vec<f32>> = (0..held_ids.len()).map(|_| prior.sample(rng)).collect::<Result<_>>()?;
        let fake_refs: Vec<&[f32]> = fakes.iter().map(|f| &f[..]).collect();
        let real_logits = prior.discriminate(&reals)?;
        let fake_logits = prior.discriminate(&fake_refs)?;
        trace.held_out_accuracy = accuracy(&real_logits, &fake_logits);
    }
    Ok((prior, trace))
}
