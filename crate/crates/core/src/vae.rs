//! Latent space model: encoder, factorized decoder, per-aspect classifier
//! heads, and the three training losses.
//!
//! The encoder mean-pools token embeddings and maps them through a tanh MLP
//! to `(μ, log σ²)`. The decoder maps `z` to independent per-position
//! logits over the vocabulary. Training minimizes
//!
//! ```text
//! L = L_E + L_C + L_D
//! L_E = Σ_t CE(logits_t, x_t) + w_kl · Σ_i max(KL_i, free_bits)
//! L_C = −Σ_i log softmax(head_{n(i)}(z_i))[j(i)]
//! L_D = Σ_{n1<n2} ‖c_{n1} − c_{n2}‖₂        (c_n: batch mean of z over aspect n)
//! ```
//!
//! with `KL_i = ½(μ_i² + σ_i² − 1 − log σ_i²)` against the standard normal
//! prior, and `w_kl` following a cyclical schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use crate::corpus::{CorpusIndex, Schema, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{take_grads, Linear, LinearVars, Mlp, MlpVars, Parameters};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f32 = -8.0;
pub const LOGVAR_MAX: f32 = 8.0;

/// Sequences per graph when encoding or decoding without gradients.
const INFERENCE_CHUNK: usize = 512;

/// A point in the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f32>);

impl Deref for LatentVector {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl AsRef<[f32]> for LatentVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

impl LatentVector {
    pub fn from_f64(v: &[f64]) -> Self {
        Self(v.iter().map(|x| *x as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|x| *x as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 16, embed_dim: 32, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub schema: Schema,
    pub config: VaeConfig,
    pub embedding: Tensor,
    pub encoder_hidden: Linear,
    pub encoder_mu: Linear,
    pub encoder_logvar: Linear,
    pub decoder: Mlp,
    pub heads: Vec<Linear>,
}

/// A [`VaeModel`] bound into a [`Graph`].
#[derive(Clone, Debug)]
pub struct VaeVars {
    pub embedding: Var,
    pub encoder_hidden: LinearVars,
    pub encoder_mu: LinearVars,
    pub encoder_logvar: LinearVars,
    pub decoder: MlpVars,
    pub heads: Vec<LinearVars>,
}

impl VaeVars {
    /// All parameter vars in [`Parameters::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.encoder_hidden.vars());
        out.extend(self.encoder_mu.vars());
        out.extend(self.encoder_logvar.vars());
        self.decoder.collect(&mut out);
        for h in &self.heads {
            out.extend(h.vars());
        }
        out
    }
}

impl Parameters for VaeModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![(String::from("embedding"), &self.embedding)];
        out.push(("encoder.hidden.weight".into(), &self.encoder_hidden.weight));
        out.push(("encoder.hidden.bias".into(), &self.encoder_hidden.bias));
        out.push(("encoder.mu.weight".into(), &self.encoder_mu.weight));
        out.push(("encoder.mu.bias".into(), &self.encoder_mu.bias));
        out.push(("encoder.logvar.weight".into(), &self.encoder_logvar.weight));
        out.push(("encoder.logvar.bias".into(), &self.encoder_logvar.bias));
        self.decoder.named("decoder", &mut out);
        for (n, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{n}.weight"), &h.weight));
            out.push((format!("heads.{n}.bias"), &h.bias));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding];
        out.push(&mut self.encoder_hidden.weight);
        out.push(&mut self.encoder_hidden.bias);
        out.push(&mut self.encoder_mu.weight);
        out.push(&mut self.encoder_mu.bias);
        out.push(&mut self.encoder_logvar.weight);
        out.push(&mut self.encoder_logvar.bias);
        self.decoder.params_mut(&mut out);
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }
}

/// Output of [`encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: LatentVector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Argmax,
    /// Sample each position from `softmax(logits / temperature)`.
    Sample { temperature: f32 },
}

/// Temperatures at or below this decode as argmax.
pub const MIN_TEMPERATURE: f32 = 1e-6;

impl VaeModel {
    pub fn new(schema: Schema, config: VaeConfig, rng: &mut Rng) -> Result<Self> {
        schema.validate()?;
        if config.latent_dim == 0 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("zero-width layer in {config:?}")));
        }
        let VaeConfig { latent_dim: d, embed_dim: e, hidden: h } = config;
        let v = schema.vocab_size;
        let embedding = Tensor::glorot(&[v, e], v, e, rng);
        let encoder_hidden = Linear::new(e, h, rng);
        let encoder_mu = Linear::new(h, d, rng);
        let encoder_logvar = Linear::new(h, d, rng);
        let decoder = Mlp::new(&[d, h, schema.max_len * v], rng);
        let heads = schema.attrs_per_aspect.iter().map(|k| Linear::new(d, *k, rng)).collect();
        Ok(Self { schema, config, embedding, encoder_hidden, encoder_mu, encoder_logvar, decoder, heads })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<VaeVars> {
        let embedding =
            if trainable { g.param(self.embedding.clone())? } else { g.constant(self.embedding.clone())? };
        Ok(VaeVars {
            embedding,
            encoder_hidden: self.encoder_hidden.bind(g, trainable)?,
            encoder_mu: self.encoder_mu.bind(g, trainable)?,
            encoder_logvar: self.encoder_logvar.bind(g, trainable)?,
            decoder: self.decoder.bind(g, trainable)?,
            heads: self.heads.iter().map(|h| h.bind(g, trainable)).collect::<Result<_>>()?,
        })
    }

    /// Posterior means for many sequences.
    pub fn encode_mean_batch(&self, seqs: &[&TokenSequence]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let (mu, _) = encode_graph(&mut g, &vars, chunk)?;
            let d = self.latent_dim();
            out.extend(g.value(mu).data().chunks(d).map(|r| LatentVector(r.to_vec())));
        }
        Ok(out)
    }

    /// Decoder logits `[max_len, vocab]` for each latent.
    pub fn decode_logits_batch(&self, zs: &[&[f32]]) -> Result<Vec<Tensor>> {
        let d = self.latent_dim();
        let (l, v) = (self.schema.max_len, self.schema.vocab_size);
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFERENCE_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for z in chunk {
                if z.len() != d {
                    return Err(Error::Shape { op: "decode", detail: format!("latent has {} dims, expected {d}", z.len()) });
                }
                data.extend_from_slice(z);
            }
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let zv = g.constant(Tensor::matrix(chunk.len(), d, data)?)?;
            let logits = vars.decoder.forward(&mut g, zv)?;
            for row in g.value(logits).data().chunks(l * v) {
                out.push(Tensor::matrix(l, v, row.to_vec())?);
            }
        }
        Ok(out)
    }
}

/// Encoder forward pass for a batch: `(μ, log σ²)`, each `[B, d]`.
/// `log σ²` is clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
pub fn encode_graph(g: &mut Graph, vars: &VaeVars, seqs: &[&TokenSequence]) -> Result<(Var, Var)> {
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.iter().map(|t| *t as usize)).collect();
    let lens: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
    let emb = g.gather_rows(vars.embedding, &ids)?;
    let pooled = g.segment_mean(emb, &lens)?;
    let h = vars.encoder_hidden.forward(g, pooled)?;
    let h = g.tanh(h)?;
    let mu = vars.encoder_mu.forward(g, h)?;
    let lv = vars.encoder_logvar.forward(g, h)?;
    let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok((mu, lv))
}

/// `z = μ + exp(½ log σ²) ⊙ ε` with the given standard-normal `eps`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps)?;
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

/// Sampled encoding of one sequence.
pub fn encode(model: &VaeModel, seq: &TokenSequence, rng: &mut Rng) -> Result<Encoding> {
    model.schema.check(seq)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let (mu, lv) = encode_graph(&mut g, &vars, &[seq])?;
    let d = model.latent_dim();
    let eps = Tensor::matrix(1, d, rng.normal_vec(d))?;
    let z = reparameterize(&mut g, mu, lv, eps)?;
    Ok(Encoding {
        mu: g.value(mu).data().to_vec(),
        logvar: g.value(lv).data().to_vec(),
        z: LatentVector(g.value(z).data().to_vec()),
    })
}

/// Posterior mean of one sequence; uses no randomness.
pub fn encode_mean(model: &VaeModel, seq: &TokenSequence) -> Result<LatentVector> {
    model.schema.check(seq)?;
    Ok(model.encode_mean_batch(&[seq])?.remove(0))
}

/// Decode one latent into `max_len` tokens.
pub fn decode(model: &VaeModel, z: &[f32], mode: DecodeMode, rng: &mut Rng) -> Result<Vec<u32>> {
    let logits = model.decode_logits_batch(&[z])?.remove(0);
    Ok(tokens_from_logits(&logits, mode, rng))
}

/// Per-position argmax (ties toward the smaller id) or temperature sampling.
pub fn tokens_from_logits(logits: &Tensor, mode: DecodeMode, rng: &mut Rng) -> Vec<u32> {
    let (l, _) = logits.as_rows();
    (0..l)
        .map(|t| {
            let row = logits.row(t);
            match mode {
                DecodeMode::Sample { temperature } if temperature > MIN_TEMPERATURE => {
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
                    let w: Vec<f64> =
                        row.iter().map(|v| libm::exp(((*v - m) / temperature) as f64)).collect();
                    rng.categorical(&w) as u32
                }
                _ => argmax(row) as u32,
            }
        })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `Σ_i max(KL_i, free_bits)` summed over every row of `(μ, log σ²)`.
pub fn kl_term(g: &mut Graph, mu: Var, logvar: Var, free_bits: f32) -> Result<Var> {
    let mu2 = g.square(mu)?;
    let var = g.exp(logvar)?;
    let a = g.add(mu2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0)?;
    let kl = g.scale(c, 0.5)?;
    let kl = g.max_scalar(kl, free_bits)?;
    g.sum(kl)
}

/// Summed token cross-entropy of decoder logits `[B, max_len * vocab]`
/// against `seqs`; positions beyond a sequence's length are ignored.
pub fn reconstruction_nll(g: &mut Graph, logits: Var, seqs: &[&TokenSequence], schema: &Schema) -> Result<Var> {
    let (l, v) = (schema.max_len, schema.vocab_size);
    let b = seqs.len();
    let flat = g.reshape(logits, &[b * l, v])?;
    let full = seqs.iter().all(|s| s.tokens.len() == l);
    let (rows, targets): (Option<Vec<usize>>, Vec<usize>) = if full {
        (None, seqs.iter().flat_map(|s| s.tokens.iter().map(|t| *t as usize)).collect())
    } else {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, s) in seqs.iter().enumerate() {
            for (t, tok) in s.tokens.iter().enumerate() {
                rows.push(i * l + t);
                targets.push(*tok as usize);
            }
        }
        (Some(rows), targets)
    };
    let sel = match rows {
        Some(r) => g.gather_rows(flat, &r)?,
        None => flat,
    };
    let lp = g.log_softmax(sel)?;
    let picked = g.pick(lp, &targets)?;
    let s = g.sum(picked)?;
    g.neg(s)
}

/// ELBO surrogate: reconstruction NLL plus weighted thresholded KL.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    g: &mut Graph,
    logits: Var,
    seqs: &[&TokenSequence],
    schema: &Schema,
    mu: Var,
    logvar: Var,
    kl_weight: f32,
    free_bits: f32,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(Error::Contract(format!("kl_weight {kl_weight} outside [0, 1]")));
    }
    let rec = reconstruction_nll(g, logits, seqs, schema)?;
    let kl = kl_term(g, mu, logvar, free_bits)?;
    let kl = g.scale(kl, kl_weight)?;
    g.add(rec, kl)
}

/// Summed negative log-likelihood of each row's label under its aspect's
/// head. `labels[i] = (aspect, attribute)` for row `i` of `z`.
pub fn classification_loss(g: &mut Graph, z: Var, heads: &[LinearVars], labels: &[(usize, usize)]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (n, head) in heads.iter().enumerate() {
        let rows: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.0 == n).map(|(i, _)| i).collect();
        if rows.is_empty() {
            continue;
        }
        let targets: Vec<usize> = rows.iter().map(|i| labels[*i].1).collect();
        let zn = g.gather_rows(z, &rows)?;
        let logits = head.forward(g, zn)?;
        let lp = g.log_softmax(logits)?;
        let picked = g.pick(lp, &targets)?;
        let s = g.sum(picked)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => g.neg(t),
        None => g.scalar(0.0),
    }
}

/// Result of [`aspect_discrepancy_loss`]. `degenerate` is set when fewer
/// than two aspects were present and the loss is the constant 0.
#[derive(Clone, Copy, Debug)]
pub struct Discrepancy {
    pub loss: Var,
    pub aspects_present: usize,
    pub degenerate: bool,
}

/// Sum of pairwise Euclidean distances between the per-aspect means of the
/// rows of `z`. Aspects with no rows are skipped.
pub fn aspect_discrepancy_loss(g: &mut Graph, z: Var, aspects: &[usize], n_aspects: usize) -> Result<Discrepancy> {
    let mut centers = Vec::new();
    for n in 0..n_aspects {
        let rows: Vec<usize> = aspects.iter().enumerate().filter(|(_, a)| **a == n).map(|(i, _)| i).collect();
        if rows.is_empty() {
            continue;
        }
        let zn = g.gather_rows(z, &rows)?;
        centers.push(g.mean_rows(zn)?);
    }
    if centers.len() < 2 {
        let loss = g.scalar(0.0)?;
        return Ok(Discrepancy { loss, aspects_present: centers.len(), degenerate: true });
    }
    let mut total: Option<Var> = None;
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            let diff = g.sub(centers[a], centers[b])?;
            let dist = g.l2_norm(diff)?;
            total = Some(match total {
                Some(t) => g.add(t, dist)?,
                None => dist,
            });
        }
    }
    Ok(Discrepancy { loss: total.expect("two centers"), aspects_present: centers.len(), degenerate: false })
}

/// `L_E + L_C + L_D`.
pub fn total_loss(g: &mut Graph, elbo: Var, classification: Var, discrepancy: Var) -> Result<Var> {
    let s = g.add(elbo, classification)?;
    g.add(s, discrepancy)
}

/// Cyclical KL weight with a per-dimension KL floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSchedule {
    /// Steps per cycle.
    pub cycle_length: usize,
    /// Fraction of each cycle spent ramping 0 → 1.
    pub ramp_fraction: f64,
    pub free_bits: f32,
}

impl KlSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_length == 0 || !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) || self.free_bits < 0.0 {
            return Err(Error::Config(format!("invalid KL schedule {self:?}")));
        }
        Ok(())
    }

    pub fn weight(&self, step: usize) -> f32 {
        let pos = (step % self.cycle_length) as f64 / self.cycle_length as f64;
        let ramp_end = self.ramp_fraction;
        if pos >= ramp_end {
            1.0
        } else {
            (pos / ramp_end) as f32
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub cycle_epochs: usize,
    pub ramp_fraction: f64,
    pub free_bits: f32,
    pub use_classification: bool,
    pub use_discrepancy: bool,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            cycle_epochs: 4,
            ramp_fraction: 0.5,
            free_bits: 0.05,
            use_classification: true,
            use_discrepancy: true,
        }
    }
}

/// Per-epoch averages of the three losses (per sequence for `L_E` and
/// `L_C`, per batch for `L_D`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub elbo: f64,
    pub classification: f64,
    pub discrepancy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochLosses>,
    /// Batches where fewer than two aspects were present.
    pub degenerate_batches: usize,
}

/// Draws stratified batches: every batch takes the same number of
/// sequences from each aspect, cycling through a reshuffled order per aspect.
struct StratifiedBatcher {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_aspect: usize,
}

impl StratifiedBatcher {
    fn new(index: &CorpusIndex, subset: Option<&[usize]>, batch_size: usize, rng: &mut Rng) -> Result<Self> {
        let mut pools: Vec<Vec<usize>> = match subset {
            None => index.per_aspect.clone(),
            Some(ids) => {
                let mut keep = vec![false; index.all.len()];
                ids.iter().for_each(|i| keep[*i] = true);
                index.per_aspect.iter().map(|p| p.iter().copied().filter(|i| keep[*i]).collect()).collect()
            }
        };
        pools.retain(|p| !p.is_empty());
        if pools.is_empty() {
            return Err(Error::Contract("cannot train on an empty corpus".into()));
        }
        for p in &mut pools {
            rng.shuffle(p);
        }
        let per_aspect = (batch_size / pools.len()).max(1);
        Ok(Self { cursors: vec![0; pools.len()], pools, per_aspect })
    }

    fn next(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.per_aspect * self.pools.len());
        for (pool, cur) in self.pools.iter_mut().zip(self.cursors.iter_mut()) {
            for _ in 0..self.per_aspect {
                if *cur >= pool.len() {
                    rng.shuffle(pool);
                    *cur = 0;
                }
                batch.push(pool[*cur]);
                *cur += 1;
            }
        }
        batch
    }
}

fn tag(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFinite { op: component },
        other => other,
    }
}

/// Train `model` in place with AdamW on `L_E + L_C + L_D`. `L_E` and `L_C`
/// enter as per-sequence batch means so the single-distance `L_D` term is on
/// the same scale. `subset` restricts training to those sequence ids.
pub fn train_vae(
    model: &mut VaeModel,
    seqs: &[TokenSequence],
    index: &CorpusIndex,
    subset: Option<&[usize]>,
    config: &VaeTrainConfig,
    rng: &mut Rng,
) -> Result<TrainTrace> {
    let mut trace = TrainTrace::default();
    if config.epochs == 0 {
        return Ok(trace);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = AdamW::new(config.optimizer)?;
    let mut batcher = StratifiedBatcher::new(index, subset, config.batch_size, rng)?;
    let total = subset.map_or(seqs.len(), |s| s.len());
    let steps_per_epoch = total.div_ceil(config.batch_size).max(1);
    let schedule = KlSchedule {
        cycle_length: (config.cycle_epochs.max(1) * steps_per_epoch).max(1),
        ramp_fraction: config.ramp_fraction,
        free_bits: config.free_bits,
    };
    schedule.validate()?;
    let d = model.latent_dim();
    let n_aspects = model.schema.aspects();

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let (mut le_sum, mut lc_sum, mut ld_sum) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..steps_per_epoch {
            let ids = batcher.next(rng);
            let batch: Vec<&TokenSequence> = ids.iter().map(|i| &seqs[*i]).collect();
            let b = batch.len();
            let inv_b = 1.0 / b as f32;

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let (mu, lv) = encode_graph(&mut g, &vars, &batch).map_err(tag("encoder"))?;
            let eps = Tensor::matrix(b, d, rng.normal_vec(b * d))?;
            let z = reparameterize(&mut g, mu, lv, eps).map_err(tag("reparameterize"))?;
            let logits = vars.decoder.forward(&mut g, z).map_err(tag("decoder"))?;
            let le = elbo_loss(&mut g, logits, &batch, &model.schema, mu, lv, schedule.weight(step), schedule.free_bits)
                .and_then(|v| g.scale(v, inv_b))
                .map_err(tag("L_E"))?;
            let labels: Vec<(usize, usize)> = batch.iter().map(|s| (s.aspect, s.attribute)).collect();
            let lc = classification_loss(&mut g, z, &vars.heads, &labels)
                .and_then(|v| g.scale(v, inv_b))
                .map_err(tag("L_C"))?;
            let aspects: Vec<usize> = batch.iter().map(|s| s.aspect).collect();
            let disc = aspect_discrepancy_loss(&mut g, z, &aspects, n_aspects).map_err(tag("L_D"))?;
            if disc.degenerate {
                trace.degenerate_batches += 1;
            }
            let ld = disc.loss;
            let lc_used = if config.use_classification { lc } else { g.scale(lc, 0.0)? };
            let ld_used = if config.use_discrepancy { ld } else { g.scale(ld, 0.0)? };
            let loss = total_loss(&mut g, le, lc_used, ld_used).map_err(tag("total loss"))?;

            le_sum += g.item(le)? as f64;
            lc_sum += g.item(lc)? as f64;
            ld_sum += g.item(ld)? as f64;

            let mut grads = g.backward(loss)?;
            let grads = take_grads(&mut grads, &vars.all());
            let mut params = model.params_mut();
            opt.step(&mut params, &grads)?;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        trace.epochs.push(EpochLosses {
            epoch,
            elbo: le_sum / n,
            classification: lc_sum / n,
            discrepancy: ld_sum / n,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn tiny_schema() -> Schema {
        Schema { attrs_per_aspect: vec![2, 3], vocab_size: 12, max_len: 4 }
    }

    fn tiny_model(seed: u64) -> VaeModel {
        VaeModel::new(tiny_schema(), VaeConfig { latent_dim: 3, embed_dim: 4, hidden: 5 }, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn standard_normal_posterior_kl_is_free_bits_floor() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let lv = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let kl0 = kl_term(&mut g, mu, lv, 0.0).unwrap();
        assert_eq!(g.item(kl0).unwrap(), 0.0);
        let kl = kl_term(&mut g, mu, lv, 0.05).unwrap();
        assert!((g.item(kl).unwrap() - 0.2).abs() < 1e-6);
    }

    #[test]
    fn unit_mean_kl_is_half() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        let lv = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap()).unwrap();
        let kl = kl_term(&mut g, mu, lv, 0.0).unwrap();
        assert!((g.item(kl).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_give_zero_reconstruction() {
        let schema = Schema { attrs_per_aspect: vec![2], vocab_size: 3, max_len: 2 };
        let seq = TokenSequence { tokens: vec![2, 0], aspect: 0, attribute: 0 };
        let mut g = Graph::new();
        // position 0 puts all mass on token 2, position 1 on token 0
        let logits = g
            .constant(Tensor::matrix(1, 6, vec![-1e4, -1e4, 0.0, 0.0, -1e4, -1e4]).unwrap())
            .unwrap();
        let nll = reconstruction_nll(&mut g, logits, &[&seq], &schema).unwrap();
        assert!(g.item(nll).unwrap().abs() < 1e-6);
    }

    #[test]
    fn short_sequences_ignore_padding_positions() {
        let schema = Schema { attrs_per_aspect: vec![2], vocab_size: 2, max_len: 2 };
        let seq = TokenSequence { tokens: vec![1], aspect: 0, attribute: 0 };
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 4, vec![0.0, 0.0, 5.0, -5.0]).unwrap()).unwrap();
        let nll = reconstruction_nll(&mut g, logits, &[&seq], &schema).unwrap();
        assert!((g.item(nll).unwrap() - core::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn classification_unit_cases() {
        let mut g = Graph::new();
        // identity head over a 2-d latent: logits are z itself
        let head = Linear { weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), bias: Tensor::zeros(&[2]) };
        let hv = head.bind(&mut g, false).unwrap();
        let z = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let l = classification_loss(&mut g, z, &[hv], &[(0, 1)]).unwrap();
        assert!((g.item(l).unwrap() - core::f32::consts::LN_2).abs() < 1e-6);
        let z = g.constant(Tensor::matrix(1, 2, vec![50.0, -50.0]).unwrap()).unwrap();
        let l = classification_loss(&mut g, z, &[hv], &[(0, 0)]).unwrap();
        assert!(g.item(l).unwrap().abs() < 1e-6);
    }

    #[test]
    fn classification_batch_matches_hand_nll() {
        let mut g = Graph::new();
        let head = Linear { weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), bias: Tensor::zeros(&[2]) };
        let hv = head.bind(&mut g, false).unwrap();
        let rows = [[1.0f32, 0.0], [0.0, 2.0], [-1.0, 0.5]];
        let labels = [(0usize, 0usize), (0, 0), (0, 1)];
        let z = g.constant(Tensor::matrix(3, 2, rows.iter().flatten().copied().collect()).unwrap()).unwrap();
        let l = classification_loss(&mut g, z, &[hv], &labels).unwrap();
        let hand: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, (_, j))| {
                let lse = libm::log(libm::exp(r[0] as f64) + libm::exp(r[1] as f64));
                lse - r[j] as f64
            })
            .sum();
        assert!((g.item(l).unwrap() as f64 - hand).abs() < 1e-5);
    }

    #[test]
    fn discrepancy_unit_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
        let d = aspect_discrepancy_loss(&mut g, z, &[0, 1], 2).unwrap();
        assert!((g.item(d.loss).unwrap() - 5.0).abs() < 1e-6);
        let same = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap()).unwrap();
        let d = aspect_discrepancy_loss(&mut g, same, &[0, 1], 2).unwrap();
        assert_eq!(g.item(d.loss).unwrap(), 0.0);
        let one = aspect_discrepancy_loss(&mut g, z, &[1, 1], 2).unwrap();
        assert!(one.degenerate);
        assert_eq!(g.item(one.loss).unwrap(), 0.0);
    }

    #[test]
    fn discrepancy_three_aspects_pairwise_sum() {
        let centers = [[0.0f32, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(3, 2, centers.iter().flatten().copied().collect()).unwrap()).unwrap();
        let d = aspect_discrepancy_loss(&mut g, z, &[0, 1, 2], 3).unwrap();
        let mut brute = 0.0f64;
        for a in 0..3 {
            for b in a + 1..3 {
                let dx = (centers[a][0] - centers[b][0]) as f64;
                let dy = (centers[a][1] - centers[b][1]) as f64;
                brute += libm::sqrt(dx * dx + dy * dy);
            }
        }
        assert!((g.item(d.loss).unwrap() as f64 - brute).abs() < 1e-6);
    }

    #[test]
    fn total_loss_sums() {
        let mut g = Graph::new();
        let (a, b, c) = (g.scalar(1.0).unwrap(), g.scalar(2.0).unwrap(), g.scalar(3.0).unwrap());
        let t = total_loss(&mut g, a, b, c).unwrap();
        assert_eq!(g.item(t).unwrap(), 6.0);
        let zero = g.scalar(0.0).unwrap();
        let t = total_loss(&mut g, a, zero, c).unwrap();
        assert_eq!(g.item(t).unwrap(), 4.0);
    }

    #[test]
    fn kl_schedule_shape() {
        let s = KlSchedule { cycle_length: 100, ramp_fraction: 0.5, free_bits: 0.05 };
        assert_eq!(s.weight(0), 0.0);
        assert_eq!(s.weight(100), 0.0);
        assert!((s.weight(25) - 0.5).abs() < 1e-6);
        assert_eq!(s.weight(50), 1.0);
        assert_eq!(s.weight(99), 1.0);
        for step in 0..1000 {
            let w = s.weight(step);
            assert!((0.0..=1.0).contains(&w));
        }
    }

    #[test]
    fn encode_is_deterministic_given_rng() {
        let model = tiny_model(1);
        let seq = TokenSequence { tokens: vec![1, 5, 7], aspect: 1, attribute: 2 };
        let a = encode(&model, &seq, &mut Rng::new(5)).unwrap();
        let b = encode(&model, &seq, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        let m1 = encode_mean(&model, &seq).unwrap();
        assert_eq!(m1.0, a.mu);
    }

    #[test]
    fn decode_argmax_and_cold_temperature_agree() {
        let model = tiny_model(2);
        let z = [0.3f32, -1.0, 0.7];
        let a = decode(&model, &z, DecodeMode::Argmax, &mut Rng::new(0)).unwrap();
        let b = decode(&model, &z, DecodeMode::Argmax, &mut Rng::new(1)).unwrap();
        let c = decode(&model, &z, DecodeMode::Sample { temperature: 0.0 }, &mut Rng::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let spec = SyntheticSpec {
            schema: tiny_schema(),
            sequences_per_attribute: 4,
            ..SyntheticSpec::default()
        };
        let (seqs, index, _) = generate_synthetic(&spec).unwrap();
        let mut model = tiny_model(3);
        let before = model.clone();
        let cfg = VaeTrainConfig { epochs: 0, ..VaeTrainConfig::default() };
        let trace = train_vae(&mut model, &seqs, &index, None, &cfg, &mut Rng::new(0)).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(model, before);
    }
}
