//! Composable latent-space energy.
//!
//! One classifier `f_n: Z → R^{|A_n|}` per aspect is trained on frozen
//! posterior means. The energy of attribute `j` of aspect `n` is its
//! negative log-softmax probability, and a multi-attribute target composes
//! the per-aspect energies with positive weights:
//!
//! ```text
//! E_n(j | z) = −f_n(z)[j] + log Σ_k exp f_n(z)[k]
//! E(a | z)   = Σ_{n ∈ target} λ_n E_n(a_n | z)
//! ```
//!
//! Aspects absent from a target contribute nothing. The normalizer of
//! `p(z, a) ∝ N(z; 0, I) exp(−E(a|z))` is never needed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{stratified_split, CorpusIndex, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{take_grads, Mlp, MlpVars, Parameters};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vae::{LatentVector, VaeModel};

/// `f_n`: an MLP from the latent space to unnormalized attribute logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClassifier {
    pub net: Mlp,
}

impl LatentClassifier {
    /// `hidden = None` gives a linear classifier.
    pub fn new(latent_dim: usize, attributes: usize, hidden: Option<usize>, rng: &mut Rng) -> Self {
        let widths = match hidden {
            Some(h) => vec![latent_dim, h, attributes],
            None => vec![latent_dim, attributes],
        };
        Self { net: Mlp::new(&widths, rng) }
    }

    pub fn attributes(&self) -> usize {
        self.net.outputs()
    }

    /// Logits for a single latent.
    pub fn logits(&self, z: &[f32]) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, false)?;
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
        let out = vars.forward(&mut g, zv)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub latent_dim: usize,
    pub classifiers: Vec<LatentClassifier>,
}

impl Parameters for EnergyModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, c) in self.classifiers.iter().enumerate() {
            c.net.named(&format!("classifier.{n}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.classifiers {
            c.net.params_mut(&mut out);
        }
        out
    }
}

/// Desired attribute per targeted aspect, with per-aspect weights `λ_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeTarget {
    /// `(aspect, attribute)` pairs; aspects are distinct.
    pub targets: Vec<(usize, usize)>,
    pub weights: Vec<f32>,
}

impl AttributeTarget {
    pub fn new(targets: Vec<(usize, usize)>, weights: Vec<f32>) -> Result<Self> {
        if targets.len() != weights.len() {
            return Err(Error::Config(format!("{} targets but {} weights", targets.len(), weights.len())));
        }
        for (i, (n, _)) in targets.iter().enumerate() {
            if targets[..i].iter().any(|(m, _)| m == n) {
                return Err(Error::Config(format!("aspect {n} targeted twice")));
            }
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w <= 0.0) {
            return Err(Error::Config(format!("weight {w} is not a positive number")));
        }
        Ok(Self { targets, weights })
    }

    /// Unit weights.
    pub fn uniform(targets: Vec<(usize, usize)>) -> Result<Self> {
        let w = vec![1.0; targets.len()];
        Self::new(targets, w)
    }

    /// One attribute per aspect from a combination vector.
    pub fn from_combination(combo: &[usize], weights: &[f32]) -> Result<Self> {
        Self::new(combo.iter().copied().enumerate().collect(), weights.to_vec())
    }

    pub fn empty() -> Self {
        Self { targets: Vec::new(), weights: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.targets.clone(), self.weights.iter().map(|w| w * factor).collect())
    }

    /// Intended attribute per aspect (None where untargeted).
    pub fn per_aspect(&self, aspects: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; aspects];
        for (n, j) in &self.targets {
            if *n < aspects {
                out[*n] = Some(*j);
            }
        }
        out
    }
}

/// A bound [`EnergyModel`].
#[derive(Clone, Debug)]
pub struct EnergyVars {
    pub classifiers: Vec<MlpVars>,
}

impl EnergyModel {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<EnergyVars> {
        let classifiers = self.classifiers.iter().map(|c| c.net.bind(g, trainable)).collect::<Result<_>>()?;
        Ok(EnergyVars { classifiers })
    }

    pub fn aspects(&self) -> usize {
        self.classifiers.len()
    }

    pub fn check_target(&self, target: &AttributeTarget) -> Result<()> {
        for (n, j) in &target.targets {
            let Some(c) = self.classifiers.get(*n) else {
                return Err(Error::Validation(format!("aspect {n} has no classifier")));
            };
            if *j >= c.attributes() {
                return Err(Error::Validation(format!(
                    "attribute {j} out of range for aspect {n} ({} attributes)",
                    c.attributes()
                )));
            }
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f32]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape {
                op: "energy",
                detail: format!("latent has {} dims, expected {}", z.len(), self.latent_dim),
            });
        }
        Ok(())
    }
}

/// Per-row energies `E_n(j | z)` for rows of `z: [B, d]`: `[B]`.
pub fn aspect_energy_graph(g: &mut Graph, classifier: &MlpVars, z: Var, attribute: usize) -> Result<Var> {
    let logits = classifier.forward(g, z)?;
    let lp = g.log_softmax(logits)?;
    let rows = g.value(lp).as_rows().0;
    let picked = g.pick(lp, &vec![attribute; rows])?;
    g.neg(picked)
}

/// `Σ_rows E(a | z_row)` as a scalar var.
pub fn total_energy_graph(g: &mut Graph, vars: &EnergyVars, z: Var, target: &AttributeTarget) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((n, j), w) in target.targets.iter().zip(&target.weights) {
        let e = aspect_energy_graph(g, &vars.classifiers[*n], z, *j)?;
        let e = g.sum(e)?;
        let e = g.scale(e, *w)?;
        total = Some(match total {
            Some(t) => g.add(t, e)?,
            None => e,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => g.scalar(0.0),
    }
}

/// `E_n(a_n^j | z)`; always non-negative.
pub fn aspect_energy(model: &EnergyModel, z: &[f32], aspect: usize, attribute: usize) -> Result<f32> {
    model.check_latent(z)?;
    model.check_target(&AttributeTarget::uniform(vec![(aspect, attribute)])?)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
    let e = aspect_energy_graph(&mut g, &vars.classifiers[aspect], zv, attribute)?;
    Ok(g.value(e).data()[0].max(0.0))
}

/// `E(a | z) = Σ_n λ_n E_n(a_n | z)`; zero for an empty target.
pub fn total_energy(model: &EnergyModel, z: &[f32], target: &AttributeTarget) -> Result<f32> {
    model.check_latent(z)?;
    model.check_target(target)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
    let e = total_energy_graph(&mut g, &vars, zv, target)?;
    g.item(e)
}

/// `(E(a|z), ∇_z E(a|z))` by reverse-mode differentiation.
pub fn energy_and_gradient(model: &EnergyModel, z: &[f32], target: &AttributeTarget) -> Result<(f32, Vec<f32>)> {
    model.check_latent(z)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let zv = g.param(Tensor::matrix(1, z.len(), z.to_vec())?)?;
    let e = total_energy_graph(&mut g, &vars, zv, target)?;
    let grads = g.backward(e)?;
    let grad = grads.get(zv).into_data();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "energy gradient" });
    }
    Ok((g.item(e)?, grad))
}

/// `∇_z E(a | z)`.
pub fn energy_gradient(model: &EnergyModel, z: &[f32], target: &AttributeTarget) -> Result<Vec<f32>> {
    model.check_target(target)?;
    Ok(energy_and_gradient(model, z, target)?.1)
}

/// `log p(z, a) + log Z = −½‖z‖² − (d/2) log 2π − E(a|z)`.
pub fn log_joint_unnormalized(model: &EnergyModel, z: &[f32], target: &AttributeTarget) -> Result<f64> {
    let e = total_energy(model, z, target)? as f64;
    let sq: f64 = z.iter().map(|v| (*v as f64) * (*v as f64)).sum();
    let d = z.len() as f64;
    Ok(-0.5 * sq - 0.5 * d * libm::log(2.0 * core::f64::consts::PI) - e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Hidden width of each `f_n`; `None` trains linear classifiers.
    pub hidden: Option<usize>,
    pub val_fraction: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            optimizer: AdamWConfig { learning_rate: 1e-3, ..AdamWConfig::default() },
            hidden: Some(32),
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassifierReport {
    /// `losses[n][epoch]`: mean training cross-entropy.
    pub losses: Vec<Vec<f64>>,
    /// Held-out accuracy per aspect.
    pub val_accuracy: Vec<f64>,
}

/// Fit one classifier per aspect on `encode_mean` latents of that aspect's
/// sequences. The VAE is only read.
pub fn train_latent_classifiers(
    vae: &VaeModel,
    seqs: &[TokenSequence],
    index: &CorpusIndex,
    config: &ClassifierTrainConfig,
    rng: &mut Rng,
) -> Result<(EnergyModel, ClassifierReport)> {
    let schema = &vae.schema;
    for (n, attrs) in index.per_attribute.iter().enumerate() {
        let present = attrs.iter().filter(|ids| !ids.is_empty()).count();
        if present < 2 {
            return Err(Error::Config(format!(
                "aspect {n} has {present} attributes with data; classifiers need at least 2"
            )));
        }
    }
    let d = vae.latent_dim();
    let mut model = EnergyModel {
        latent_dim: d,
        classifiers: schema
            .attrs_per_aspect
            .iter()
            .map(|k| LatentClassifier::new(d, *k, config.hidden, rng))
            .collect(),
    };
    let (train, val) = stratified_split(index, config.val_fraction, rng);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let latents = vae.encode_mean_batch(&refs)?;

    let mut report = ClassifierReport::default();
    for (n, clf) in model.classifiers.iter_mut().enumerate() {
        let mut ids: Vec<usize> = train.iter().copied().filter(|i| seqs[*i].aspect == n).collect();
        let losses = fit_classifier(clf, &latents, seqs, &mut ids, config, rng)?;
        report.losses.push(losses);
        let val_ids: Vec<usize> = val.iter().copied().filter(|i| seqs[*i].aspect == n).collect();
        report.val_accuracy.push(accuracy(clf, &latents, seqs, &val_ids)?);
    }
    Ok((model, report))
}

fn fit_classifier(
    clf: &mut LatentClassifier,
    latents: &[LatentVector],
    seqs: &[TokenSequence],
    ids: &mut [usize],
    config: &ClassifierTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(config.epochs);
    if config.epochs == 0 || ids.is_empty() {
        return Ok(losses);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let d = latents[0].len();
    let mut opt = AdamW::new(config.optimizer)?;
    for _ in 0..config.epochs {
        rng.shuffle(ids);
        let mut total = 0.0f64;
        for batch in ids.chunks(config.batch_size) {
            let mut g = Graph::new();
            let vars = clf.net.bind(&mut g, true)?;
            let data: Vec<f32> = batch.iter().flat_map(|i| latents[*i].0.iter().copied()).collect();
            let z = g.constant(Tensor::matrix(batch.len(), d, data)?)?;
            let logits = vars.forward(&mut g, z)?;
            let lp = g.log_softmax(logits)?;
            let targets: Vec<usize> = batch.iter().map(|i| seqs[*i].attribute).collect();
            let picked = g.pick(lp, &targets)?;
            let m = g.mean(picked)?;
            let loss = g.neg(m)?;
            total += g.item(loss)? as f64 * batch.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut vs = Vec::new();
            vars.collect(&mut vs);
            let grads = take_grads(&mut grads, &vs);
            let mut params = Vec::new();
            clf.net.params_mut(&mut params);
            opt.step(&mut params, &grads)?;
        }
        losses.push(total / ids.len() as f64);
    }
    Ok(losses)
}

fn accuracy(clf: &LatentClassifier, latents: &[LatentVector], seqs: &[TokenSequence], ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &i in ids {
        let logits = clf.logits(&latents[i])?;
        let mut best = 0;
        for (k, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = k;
            }
        }
        if best == seqs[i].attribute {
            hits += 1;
        }
    }
    Ok(hits as f64 / ids.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    /// A linear classifier whose logits equal `W z` for a hand-set `W`.
    fn fixed(weights: Vec<f32>, d: usize, k: usize) -> EnergyModel {
        let layer = Linear { weight: Tensor::matrix(d, k, weights).unwrap(), bias: Tensor::zeros(&[k]) };
        EnergyModel { latent_dim: d, classifiers: vec![LatentClassifier { net: Mlp { layers: vec![layer] } }] }
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let m = fixed(vec![0.0, 0.0], 1, 2);
        for j in 0..2 {
            let e = aspect_energy(&m, &[0.7], 0, j).unwrap();
            assert!((e - core::f32::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_one_zero_target_zero() {
        // logits [1, 0] at z = 1
        let m = fixed(vec![1.0, 0.0], 1, 2);
        let e = aspect_energy(&m, &[1.0], 0, 0).unwrap();
        let expect = libm::log(1.0 + libm::exp(-1.0)) as f32; // 0.313262
        assert!((e - expect).abs() < 1e-6);
        assert!((e - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn shift_invariance() {
        let mut m = fixed(vec![1.0, -0.5, 0.3, 2.0], 2, 2);
        let z = [0.4f32, -1.2];
        let before = aspect_energy(&m, &z, 0, 1).unwrap();
        m.classifiers[0].net.layers[0].bias = Tensor::vector(vec![3.5, 3.5]);
        let after = aspect_energy(&m, &z, 0, 1).unwrap();
        assert!((before - after).abs() < 1e-5);
    }

    #[test]
    fn weighted_composition() {
        let mut rng = Rng::new(4);
        let model = EnergyModel {
            latent_dim: 3,
            classifiers: vec![
                LatentClassifier::new(3, 2, Some(4), &mut rng),
                LatentClassifier::new(3, 4, Some(4), &mut rng),
            ],
        };
        let z = [0.1f32, 0.2, -0.3];
        let e0 = aspect_energy(&model, &z, 0, 1).unwrap();
        let e1 = aspect_energy(&model, &z, 1, 3).unwrap();
        let target = AttributeTarget::new(vec![(0, 1), (1, 3)], vec![1.0, 2.0]).unwrap();
        let total = total_energy(&model, &z, &target).unwrap();
        assert!((total - (e0 + 2.0 * e1)).abs() < 1e-5);

        let single = AttributeTarget::uniform(vec![(1, 3)]).unwrap();
        assert!((total_energy(&model, &z, &single).unwrap() - e1).abs() < 1e-6);

        let g1 = energy_gradient(&model, &z, &target).unwrap();
        let g2 = energy_gradient(&model, &z, &target.scaled(2.0).unwrap()).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn target_validation() {
        assert!(AttributeTarget::new(vec![(0, 1), (0, 0)], vec![1.0, 1.0]).is_err());
        assert!(AttributeTarget::new(vec![(0, 1)], vec![0.0]).is_err());
        assert!(AttributeTarget::new(vec![(0, 1)], vec![-1.0]).is_err());
        let m = fixed(vec![0.0, 0.0], 1, 2);
        assert!(m.check_target(&AttributeTarget::uniform(vec![(0, 2)]).unwrap()).is_err());
        assert!(m.check_target(&AttributeTarget::uniform(vec![(1, 0)]).unwrap()).is_err());
    }

    #[test]
    fn log_joint_cases() {
        let m = fixed(vec![1.0, 0.0], 1, 2);
        let lj = log_joint_unnormalized(&m, &[0.0], &AttributeTarget::empty()).unwrap();
        assert!((lj + 0.5 * libm::log(2.0 * core::f64::consts::PI)).abs() < 1e-12);
        // 1-d hand computation at z = 1, target 0: E = log(1 + e^-1)
        let t = AttributeTarget::uniform(vec![(0, 0)]).unwrap();
        let lj = log_joint_unnormalized(&m, &[1.0], &t).unwrap();
        let hand = -0.5 - 0.5 * libm::log(2.0 * core::f64::consts::PI) - libm::log(1.0 + libm::exp(-1.0));
        assert!((lj - hand).abs() < 1e-6);
    }
}
