//! Multi-aspect labeled token corpora.
//!
//! Every sequence carries exactly one `(aspect, attribute)` label. The
//! synthetic generator gives each attribute of each aspect its own disjoint
//! block of token ids; a sequence draws each token from its attribute block
//! with probability `skew` and uniformly from the whole vocabulary
//! otherwise. The generator's own token distributions form the
//! [`OracleClassifier`], the exact Bayes classifier used for evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Smoothing floor applied to oracle token probabilities.
pub const ORACLE_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub aspect: usize,
    pub attribute: usize,
}

/// Aspect/attribute layout and vocabulary shared by a corpus and its models.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub attrs_per_aspect: Vec<usize>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Schema {
    pub fn aspects(&self) -> usize {
        self.attrs_per_aspect.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attrs_per_aspect.is_empty() {
            return Err(Error::Config("at least one aspect is required".into()));
        }
        if let Some((n, k)) = self.attrs_per_aspect.iter().enumerate().find(|(_, k)| **k < 2) {
            return Err(Error::Config(format!("aspect {n} has {k} attributes; at least 2 are required")));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// Check one sequence against this schema.
    pub fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.aspect >= self.aspects() {
            return Err(Error::Validation(format!(
                "aspect {} out of range (corpus has {} aspects)",
                seq.aspect,
                self.aspects()
            )));
        }
        let k = self.attrs_per_aspect[seq.aspect];
        if seq.attribute >= k {
            return Err(Error::Validation(format!(
                "attribute {} out of range for aspect {} ({} attributes)",
                seq.attribute, seq.aspect, k
            )));
        }
        if seq.tokens.is_empty() || seq.tokens.len() > self.max_len {
            return Err(Error::Validation(format!(
                "sequence length {} outside 1..={}",
                seq.tokens.len(),
                self.max_len
            )));
        }
        if let Some(t) = seq.tokens.iter().find(|t| **t as usize >= self.vocab_size) {
            return Err(Error::Validation(format!("token {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    /// Every combination of one attribute per aspect, first aspect slowest.
    pub fn combinations(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &k in &self.attrs_per_aspect {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    (0..k).map(move |j| {
                        let mut c = prefix.clone();
                        c.push(j);
                        c
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub schema: Schema,
    pub skew: f64,
    pub sequences_per_attribute: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            schema: Schema { attrs_per_aspect: vec![2, 4], vocab_size: 64, max_len: 16 },
            skew: 0.8,
            sequences_per_attribute: 2000,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let max_k = *self.schema.attrs_per_aspect.iter().max().expect("non-empty");
        let need = self.schema.aspects() * max_k * 2;
        if self.schema.vocab_size < need {
            return Err(Error::Config(format!(
                "vocab_size {} too small: need at least aspects * max(attributes) * 2 = {need} \
                 to give every attribute a disjoint token block",
                self.schema.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::Config(format!("skew {} outside [0, 1]", self.skew)));
        }
        Ok(())
    }

    pub fn block_size(&self) -> usize {
        let max_k = *self.schema.attrs_per_aspect.iter().max().expect("non-empty");
        self.schema.vocab_size / (self.schema.aspects() * max_k)
    }

    /// Token range of attribute `j` of aspect `n`.
    pub fn block(&self, aspect: usize, attribute: usize) -> core::ops::Range<usize> {
        let max_k = *self.schema.attrs_per_aspect.iter().max().expect("non-empty");
        let bs = self.block_size();
        let start = (aspect * max_k + attribute) * bs;
        start..start + bs
    }
}

/// Index sets: sequence ids per attribute, per aspect, and overall.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusIndex {
    pub per_attribute: Vec<Vec<Vec<usize>>>,
    pub per_aspect: Vec<Vec<usize>>,
    pub all: Vec<usize>,
}

impl CorpusIndex {
    pub fn build(schema: &Schema, seqs: &[TokenSequence]) -> Result<Self> {
        let mut per_attribute: Vec<Vec<Vec<usize>>> =
            schema.attrs_per_aspect.iter().map(|k| vec![Vec::new(); *k]).collect();
        let mut per_aspect = vec![Vec::new(); schema.aspects()];
        for (i, s) in seqs.iter().enumerate() {
            schema.check(s)?;
            per_attribute[s.aspect][s.attribute].push(i);
            per_aspect[s.aspect].push(i);
        }
        Ok(Self { per_attribute, per_aspect, all: (0..seqs.len()).collect() })
    }

    /// Partition invariants: attribute sets are disjoint and their unions
    /// give the aspect sets, whose union gives the full set.
    pub fn is_consistent(&self) -> bool {
        let mut seen = vec![false; self.all.len()];
        for (n, attrs) in self.per_attribute.iter().enumerate() {
            let mut union: Vec<usize> = attrs.iter().flatten().copied().collect();
            union.sort_unstable();
            let mut aspect = self.per_aspect[n].clone();
            aspect.sort_unstable();
            if union != aspect {
                return false;
            }
            for &i in &union {
                if i >= seen.len() || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.iter().all(|s| *s)
    }
}

/// Per-attribute token distributions `P(token | a_n^j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleClassifier {
    pub schema: Schema,
    /// `probs[n][j][token]`
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl OracleClassifier {
    pub fn new(schema: Schema, probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if probs.len() != schema.aspects() {
            return Err(Error::Validation(format!(
                "oracle has {} aspects, schema has {}",
                probs.len(),
                schema.aspects()
            )));
        }
        for (n, per) in probs.iter().enumerate() {
            if per.len() != schema.attrs_per_aspect[n] {
                return Err(Error::Validation(format!("oracle aspect {n} has {} attributes", per.len())));
            }
            for (j, p) in per.iter().enumerate() {
                if p.len() != schema.vocab_size {
                    return Err(Error::Validation(format!("oracle ({n},{j}) has {} tokens", p.len())));
                }
                let s: f64 = p.iter().sum();
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation(format!("oracle ({n},{j}) is not a distribution (sum {s})")));
                }
            }
        }
        Ok(Self { schema, probs })
    }

    /// The generator's own distributions for `spec`.
    pub fn for_spec(spec: &SyntheticSpec) -> Self {
        let v = spec.schema.vocab_size;
        let bs = spec.block_size() as f64;
        let probs = spec
            .schema
            .attrs_per_aspect
            .iter()
            .enumerate()
            .map(|(n, &k)| {
                (0..k)
                    .map(|j| {
                        let block = spec.block(n, j);
                        (0..v)
                            .map(|t| {
                                let inside = if block.contains(&t) { spec.skew / bs } else { 0.0 };
                                inside + (1.0 - spec.skew) / v as f64
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { schema: spec.schema.clone(), probs }
    }

    /// Smoothed `log P(token | a_n^j)`.
    pub fn log_prob(&self, aspect: usize, attribute: usize, token: u32) -> f64 {
        libm::log(self.probs[aspect][attribute][token as usize].max(ORACLE_SMOOTHING))
    }

    pub fn log_likelihood(&self, tokens: &[u32], aspect: usize, attribute: usize) -> f64 {
        tokens.iter().map(|t| self.log_prob(aspect, attribute, *t)).sum()
    }

    /// `argmax_j Σ_t log P(token_t | a_n^j)`, ties toward the smaller `j`.
    pub fn classify(&self, tokens: &[u32], aspect: usize) -> usize {
        let mut best = 0;
        let mut best_ll = f64::NEG_INFINITY;
        for j in 0..self.schema.attrs_per_aspect[aspect] {
            let ll = self.log_likelihood(tokens, aspect, j);
            if ll > best_ll {
                best = j;
                best_ll = ll;
            }
        }
        best
    }

    /// Mean per-token negative log-likelihood of `tokens` under the
    /// equal-weight mixture of the targeted attributes' distributions.
    /// `targets[n]` is the intended attribute of aspect `n`, if any.
    pub fn conditional_nll(&self, tokens: &[u32], targets: &[Option<usize>]) -> (f64, usize) {
        let active: Vec<(usize, usize)> =
            targets.iter().enumerate().filter_map(|(n, t)| t.map(|j| (n, j))).collect();
        if active.is_empty() || tokens.is_empty() {
            return (0.0, 0);
        }
        let w = 1.0 / active.len() as f64;
        let total: f64 = tokens
            .iter()
            .map(|&t| {
                let p: f64 = active.iter().map(|&(n, j)| w * self.probs[n][j][t as usize]).sum();
                -libm::log(p.max(ORACLE_SMOOTHING))
            })
            .sum();
        (total, tokens.len())
    }
}

/// Free-function form of [`OracleClassifier::classify`].
pub fn oracle_classify(oracle: &OracleClassifier, seq: &TokenSequence, aspect: usize) -> usize {
    oracle.classify(&seq.tokens, aspect)
}

/// Draw a corpus from `spec`. Sequences are grouped by aspect, then
/// attribute; every sequence has length `max_len`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<TokenSequence>, CorpusIndex, OracleClassifier)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let v = spec.schema.vocab_size;
    let bs = spec.block_size();
    let total = spec.schema.attrs_per_aspect.iter().sum::<usize>() * spec.sequences_per_attribute;
    let mut seqs = Vec::with_capacity(total);
    for (n, &k) in spec.schema.attrs_per_aspect.iter().enumerate() {
        for j in 0..k {
            let block = spec.block(n, j);
            for _ in 0..spec.sequences_per_attribute {
                let tokens = (0..spec.schema.max_len)
                    .map(|_| {
                        let t = if rng.uniform() < spec.skew {
                            block.start + rng.below(bs)
                        } else {
                            rng.below(v)
                        };
                        t as u32
                    })
                    .collect();
                seqs.push(TokenSequence { tokens, aspect: n, attribute: j });
            }
        }
    }
    let index = CorpusIndex::build(&spec.schema, &seqs)?;
    Ok((seqs, index, OracleClassifier::for_spec(spec)))
}

/// Stratified split: within every attribute, `ceil(val_fraction * size)`
/// shuffled ids go to validation. Returns `(train, validation)` ids.
pub fn stratified_split(index: &CorpusIndex, val_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for attrs in &index.per_attribute {
        for ids in attrs {
            let mut ids = ids.clone();
            rng.shuffle(&mut ids);
            let n_val = libm::ceil(val_fraction * ids.len() as f64) as usize;
            let n_val = n_val.min(ids.len());
            val.extend_from_slice(&ids[..n_val]);
            train.extend_from_slice(&ids[n_val..]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(skew: f64) -> SyntheticSpec {
        SyntheticSpec { skew, sequences_per_attribute: 50, ..SyntheticSpec::default() }
    }

    #[test]
    fn skew_one_stays_in_block() {
        let spec = small(1.0);
        let (seqs, index, _) = generate_synthetic(&spec).unwrap();
        assert_eq!(seqs.len(), 6 * 50);
        assert!(index.is_consistent());
        for s in &seqs {
            let block = spec.block(s.aspect, s.attribute);
            assert!(s.tokens.iter().all(|t| block.contains(&(*t as usize))));
        }
    }

    #[test]
    fn blocks_are_disjoint() {
        let spec = SyntheticSpec::default();
        let mut owner = vec![None; 64];
        for (n, &k) in spec.schema.attrs_per_aspect.iter().enumerate() {
            for j in 0..k {
                for t in spec.block(n, j) {
                    assert!(owner[t].is_none());
                    owner[t] = Some((n, j));
                }
            }
        }
    }

    #[test]
    fn skew_zero_is_uniform_chi_square() {
        let spec = SyntheticSpec { skew: 0.0, sequences_per_attribute: 105, ..SyntheticSpec::default() };
        let (seqs, _, _) = generate_synthetic(&spec).unwrap();
        let tokens: Vec<u32> = seqs.iter().flat_map(|s| s.tokens.iter().copied()).take(10_000).collect();
        assert_eq!(tokens.len(), 10_000);
        let mut counts = [0usize; 64];
        for t in &tokens {
            counts[*t as usize] += 1;
        }
        let expected = 10_000.0 / 64.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 63 degrees of freedom, alpha = 0.01
        assert!(chi2 < 92.010, "chi2 = {chi2}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(0.8)).unwrap().0;
        let b = generate_synthetic(&small(0.8)).unwrap().0;
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small(0.8) }).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn vocab_too_small() {
        let mut spec = small(0.8);
        spec.schema.vocab_size = 15;
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("vocab_size")));
    }

    #[test]
    fn oracle_distributions_normalized() {
        let oracle = OracleClassifier::for_spec(&SyntheticSpec::default());
        for per in &oracle.probs {
            for p in per {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_recovers_block_attribute() {
        let spec = small(1.0);
        let (seqs, _, oracle) = generate_synthetic(&spec).unwrap();
        let s = seqs.iter().find(|s| s.aspect == 0 && s.attribute == 1).unwrap();
        assert_eq!(oracle_classify(&oracle, s, 0), 1);
    }

    #[test]
    fn oracle_tie_breaks_to_zero() {
        let spec = small(0.8);
        let oracle = OracleClassifier::for_spec(&spec);
        // token 20 lies in no block of aspect 0, so every attribute scores the same
        assert_eq!(oracle.classify(&[20, 20, 20], 0), 0);
        assert_eq!(oracle.classify(&[20, 20, 20], 1), 0);
    }

    #[test]
    fn oracle_hand_computed_mixture() {
        // 4-token vocabulary, one aspect with two attributes.
        let schema = Schema { attrs_per_aspect: vec![2], vocab_size: 4, max_len: 4 };
        let probs = vec![vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.1, 0.2, 0.3, 0.4]]];
        let oracle = OracleClassifier::new(schema, probs).unwrap();
        let tokens = [0u32, 3, 3, 1];
        // attribute 0: ln .4 + 2 ln .1 + ln .3 = -6.725, attribute 1: ln .1 + 2 ln .4 + ln .2 = -5.745
        let ll0 = libm::log(0.4) + 2.0 * libm::log(0.1) + libm::log(0.3);
        let ll1 = libm::log(0.1) + 2.0 * libm::log(0.4) + libm::log(0.2);
        assert!((oracle.log_likelihood(&tokens, 0, 0) - ll0).abs() < 1e-12);
        assert!((oracle.log_likelihood(&tokens, 0, 1) - ll1).abs() < 1e-12);
        assert_eq!(oracle.classify(&tokens, 0), 1);
    }

    #[test]
    fn oracle_self_consistency_at_skew_08() {
        let spec = SyntheticSpec { sequences_per_attribute: 500, seed: 9, ..SyntheticSpec::default() };
        let (seqs, _, oracle) = generate_synthetic(&spec).unwrap();
        let hits = seqs.iter().filter(|s| oracle_classify(&oracle, s, s.aspect) == s.attribute).count();
        assert!(hits as f64 / seqs.len() as f64 >= 0.99);
    }

    #[test]
    fn index_rejects_out_of_range() {
        let schema = SyntheticSpec::default().schema;
        let bad = TokenSequence { tokens: vec![1], aspect: 0, attribute: 9 };
        assert!(matches!(CorpusIndex::build(&schema, &[bad]), Err(Error::Validation(_))));
    }

    #[test]
    fn combinations_grid() {
        let schema = SyntheticSpec::default().schema;
        let combos = schema.combinations();
        assert_eq!(combos.len(), 8);
        assert_eq!(combos[0], vec![0, 0]);
        assert_eq!(combos[7], vec![1, 3]);
    }

    #[test]
    fn stratified_split_sizes() {
        let (_, index, _) = generate_synthetic(&small(0.8)).unwrap();
        let (train, val) = stratified_split(&index, 0.1, &mut Rng::new(0));
        assert_eq!(val.len(), 6 * 5);
        assert_eq!(train.len() + val.len(), 300);
    }
}
