//! Flat `key = value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "42", "global seed; every stage derives its own stream from it"),
    ("corpus.attrs", "2,4", "attributes per aspect"),
    ("corpus.vocab_size", "64", "token vocabulary size"),
    ("corpus.max_len", "16", "tokens per sequence"),
    ("corpus.skew", "0.8", "probability a token comes from the attribute block"),
    ("corpus.sequences_per_attribute", "2000", "sequences generated per attribute"),
    ("vae.latent_dim", "16", "latent dimension d"),
    ("vae.embed_dim", "32", "token embedding width"),
    ("vae.hidden", "64", "encoder and decoder hidden width"),
    ("vae.epochs", "30", "training epochs"),
    ("vae.batch_size", "32", "sequences per batch, split evenly across aspects"),
    ("vae.lr", "8e-5", "AdamW learning rate"),
    ("vae.beta1", "0.9", "AdamW first-moment decay"),
    ("vae.beta2", "0.999", "AdamW second-moment decay"),
    ("vae.eps", "1e-8", "AdamW epsilon"),
    ("vae.weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("vae.kl_cycle_epochs", "4", "epochs per cyclical KL period"),
    ("vae.kl_ramp_fraction", "0.5", "fraction of each KL period spent ramping from 0 to 1"),
    ("vae.free_bits", "0.05", "per-dimension KL floor"),
    ("vae.use_classification", "true", "include the classification loss L_C"),
    ("vae.use_discrepancy", "true", "include the aspect discrepancy loss L_D"),
    ("energy.epochs", "10", "latent classifier epochs"),
    ("energy.batch_size", "64", "latent classifier batch size"),
    ("energy.lr", "1e-3", "latent classifier learning rate"),
    ("energy.hidden", "32", "classifier hidden width; 0 trains linear classifiers"),
    ("energy.val_fraction", "0.1", "held-out fraction for classifier accuracy"),
    ("energy.weights", "1,1", "per-aspect energy weights lambda_n"),
    ("gan.epochs", "10", "GAN prior epochs"),
    ("gan.batch_size", "64", "GAN batch size"),
    ("gan.hidden", "32", "discriminator hidden width"),
    ("gan.lr", "2e-3", "learning rate for generator and discriminator"),
    ("gan.beta1", "0.5", "Adam first-moment decay for the GAN"),
    ("gan.held_out_fraction", "0.1", "latents held out for the discriminator check"),
    ("sampler.kind", "ode", "ode, ld or random"),
    ("sampler.n", "50", "samples per target combination"),
    ("sampler.targets", "all", "`all`, or `;`-separated combinations such as `1,3;0,*`"),
    ("sampler.decode", "sample", "sample or argmax"),
    ("sampler.temperature", "1.0", "decoding temperature when sampling"),
    ("sampler.beta_min", "0.1", "diffusion beta at t = 0"),
    ("sampler.beta_max", "20", "diffusion beta at t = 1"),
    ("sampler.t_end", "1.0", "integration start time T"),
    ("sampler.ode.method", "rk45", "rk45 (adaptive) or rk4 (fixed step)"),
    ("sampler.ode.steps", "200", "rk4 steps; also sets the default adaptive budget"),
    ("sampler.ode.rtol", "1e-4", "adaptive relative tolerance"),
    ("sampler.ode.atol", "1e-4", "adaptive absolute tolerance"),
    ("sampler.ode.max_steps", "0", "adaptive step budget; 0 means 10 * steps"),
    ("sampler.ode.init", "gan", "gan or gaussian starting points"),
    ("sampler.ld.step_size", "0.01", "Langevin step size"),
    ("sampler.ld.steps", "200", "Langevin iterations"),
    ("sampler.ld.noise_scale", "1", "Langevin noise multiplier (0 gives gradient descent)"),
    ("eval.heldout_fraction", "0.1", "sequences per attribute withheld from VAE training"),
    ("paths.corpus", "corpus.tsv", "corpus file, relative to the run directory"),
    ("paths.oracle", "oracle.tsv", "oracle file"),
    ("paths.vae", "vae.ckpt", "VAE checkpoint"),
    ("paths.energy", "energy.ckpt", "classifier checkpoint"),
    ("paths.gan", "gan.ckpt", "GAN prior checkpoint"),
    ("paths.samples", "samples.tsv", "generated sequences"),
];

pub const EFFECTIVE_FILE: &str = "config.effective";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got `{kv}`")))?;
        self.set(k, v)
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line).map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Config(format!("`{key}`: bad list entry `{s}`"))))
            .collect()
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn effective(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`RunConfig::effective`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.effective().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Documentation block listing every key and its default.
pub fn describe_keys() -> String {
    let mut out = String::new();
    for (k, v, doc) in KEYS {
        let _ = writeln!(out, "# {doc}\n{k} = {v}");
    }
    out
}
