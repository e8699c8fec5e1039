//! Automatic metrics and latent-space projections.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{OracleClassifier, Schema};
use crate::error::{Error, Result};

/// A generated sequence together with the attributes it was meant to carry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedSample {
    /// `target[n]` is the intended attribute of aspect `n`, if targeted.
    pub target: Vec<Option<usize>>,
    pub tokens: Vec<u32>,
}

/// Joint success: every targeted aspect is classified as intended.
pub fn is_correct(sample: &GeneratedSample, oracle: &OracleClassifier) -> bool {
    sample
        .target
        .iter()
        .enumerate()
        .all(|(n, t)| t.is_none_or(|j| oracle.classify(&sample.tokens, n) == j))
}

/// Human-readable key such as `0-3`; untargeted aspects print as `*`.
pub fn combination_label(target: &[Option<usize>]) -> String {
    let parts: Vec<String> = target.iter().map(|t| t.map_or_else(|| String::from("*"), |j| format!("{j}"))).collect();
    parts.join("-")
}

/// Samples grouped by target. Full combinations of `schema` come first in
/// grid order (even when empty); partial targets follow in sorted order.
pub fn group_by_target<'a>(
    samples: &'a [GeneratedSample],
    schema: &Schema,
) -> Vec<(Vec<Option<usize>>, Vec<&'a GeneratedSample>)> {
    let mut groups: BTreeMap<Vec<Option<usize>>, Vec<&GeneratedSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.target.clone()).or_default().push(s);
    }
    let mut out = Vec::new();
    for combo in schema.combinations() {
        let key: Vec<Option<usize>> = combo.into_iter().map(Some).collect();
        let members = groups.remove(&key).unwrap_or_default();
        out.push((key, members));
    }
    out.extend(groups);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correctness {
    /// `(target, accuracy, count)`; groups without samples are omitted.
    pub per_combination: Vec<(Vec<Option<usize>>, f64, usize)>,
    /// Mean over the listed combinations.
    pub average: f64,
}

pub fn correctness(samples: &[GeneratedSample], oracle: &OracleClassifier) -> Correctness {
    let mut per_combination = Vec::new();
    for (key, members) in group_by_target(samples, &oracle.schema) {
        if members.is_empty() {
            continue;
        }
        let hits = members.iter().filter(|s| is_correct(s, oracle)).count();
        per_combination.push((key, hits as f64 / members.len() as f64, members.len()));
    }
    let average = mean(per_combination.iter().map(|(_, a, _)| *a));
    Correctness { per_combination, average }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Unique n-grams over total n-grams, pooled across all sequences.
pub fn distinct_n<S: AsRef<[u32]>>(sequences: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut seen: BTreeSet<&[u32]> = BTreeSet::new();
    let mut total = 0usize;
    for s in sequences {
        for w in s.as_ref().windows(n) {
            seen.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllProxy {
    /// Mean per-token NLL under the oracle conditioned on the targets.
    pub nll: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

pub fn nll_proxy(samples: &[GeneratedSample], oracle: &OracleClassifier) -> NllProxy {
    let (mut total, mut count) = (0.0, 0usize);
    for s in samples {
        let (t, c) = oracle.conditional_nll(&s.tokens, &s.target);
        total += t;
        count += c;
    }
    let nll = if count == 0 { 0.0 } else { total / count as f64 };
    NllProxy { nll, perplexity: libm::exp(nll), tokens: count }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub combination: String,
    pub count: usize,
    pub correctness: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub nll_proxy: f64,
    pub seconds_per_sample: f64,
}

/// One row per combination with samples plus their plain average.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub average: ReportRow,
}

impl EvalReport {
    pub fn total_samples(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }
}

pub fn evaluate(samples: &[GeneratedSample], oracle: &OracleClassifier, seconds_per_sample: f64) -> EvalReport {
    let mut rows = Vec::new();
    for (key, members) in group_by_target(samples, &oracle.schema) {
        if members.is_empty() {
            continue;
        }
        let owned: Vec<GeneratedSample> = members.iter().map(|s| (*s).clone()).collect();
        let hits = members.iter().filter(|s| is_correct(s, oracle)).count();
        let toks: Vec<&[u32]> = members.iter().map(|s| &s.tokens[..]).collect();
        rows.push(ReportRow {
            combination: combination_label(&key),
            count: members.len(),
            correctness: hits as f64 / members.len() as f64,
            distinct1: distinct_n(&toks, 1),
            distinct2: distinct_n(&toks, 2),
            nll_proxy: nll_proxy(&owned, oracle).nll,
            seconds_per_sample,
        });
    }
    let average = ReportRow {
        combination: String::from("average"),
        count: rows.iter().map(|r| r.count).sum(),
        correctness: mean(rows.iter().map(|r| r.correctness)),
        distinct1: mean(rows.iter().map(|r| r.distinct1)),
        distinct2: mean(rows.iter().map(|r| r.distinct2)),
        nll_proxy: mean(rows.iter().map(|r| r.nll_proxy)),
        seconds_per_sample,
    };
    EvalReport { rows, average }
}

/// Top principal components of a point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Per point, one score per retained component (at most 2).
    pub coords: Vec<Vec<f64>>,
    /// Unit-norm principal directions.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance captured by each retained component.
    pub explained: Vec<f64>,
    pub mean: Vec<f64>,
    pub warning: Option<String>,
}

const POWER_ITERATIONS: usize = 1000;
const POWER_TOL: f64 = 1e-12;
/// Eigenvalues below this fraction of the trace count as zero.
const RANK_TOL: f64 = 1e-10;

/// PCA to two dimensions by power iteration with deflation on the centered
/// covariance.
pub fn project_latents<P: AsRef<[f32]>>(points: &[P]) -> Result<Projection> {
    if points.len() < 2 {
        return Err(Error::Validation(format!("projection needs at least 2 latents, got {}", points.len())));
    }
    let d = points[0].as_ref().len();
    if d == 0 || points.iter().any(|p| p.as_ref().len() != d) {
        return Err(Error::Validation("latents must share a non-zero dimension".into()));
    }
    let n = points.len() as f64;
    let mut mu = vec![0.0; d];
    for p in points {
        for (m, v) in mu.iter_mut().zip(p.as_ref()) {
            *m += *v as f64 / n;
        }
    }
    let centered: Vec<Vec<f64>> =
        points.iter().map(|p| p.as_ref().iter().zip(&mu).map(|(v, m)| *v as f64 - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for c in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut components = Vec::new();
    let mut explained = Vec::new();
    for k in 0..2.min(d) {
        let (value, vector) = power_iteration(&cov, k);
        if trace <= 0.0 || value <= RANK_TOL * trace {
            break;
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= value * vector[i] * vector[j];
            }
        }
        explained.push(value / trace);
        components.push(vector);
    }
    let warning = (components.len() < 2).then(|| {
        format!("latents span {} dimension(s); projection has {} coordinate(s)", components.len(), components.len())
    });
    let coords = centered
        .iter()
        .map(|c| components.iter().map(|v| v.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Projection { coords, components, explained, mean: mu, warning })
}

/// Dominant eigenpair of a symmetric PSD matrix. The start vector is fixed
/// (offset by `k`) so results are deterministic; the sign is normalized so
/// the largest-magnitude entry is positive.
fn power_iteration(m: &[Vec<f64>], k: usize) -> (f64, Vec<f64>) {
    let d = m.len();
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + k) % d) as f64 / d as f64).collect();
    normalize(&mut v);
    let mut value = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let mut w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[i][j] * v[j]).sum()).collect();
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return (0.0, v);
        }
        let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        value = norm;
        if delta < POWER_TOL {
            break;
        }
    }
    let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    // Rayleigh quotient for the final value
    let mv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[i][j] * v[j]).sum()).collect();
    let rq: f64 = mv.iter().zip(&v).map(|(a, b)| a * b).sum();
    (if rq.is_finite() { rq } else { value }, v)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

fn centroid<'a>(rows: impl Iterator<Item = &'a [f32]>, d: usize) -> Option<Vec<f64>> {
    let mut c = vec![0.0; d];
    let mut n = 0usize;
    for r in rows {
        for (ci, v) in c.iter_mut().zip(r) {
            *ci += *v as f64;
        }
        n += 1;
    }
    (n > 0).then(|| c.into_iter().map(|v| v / n as f64).collect())
}

fn mean_pairwise(centers: &[Vec<f64>]) -> Option<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            total += distance(&centers[i], &centers[j]);
            pairs += 1;
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

/// Mean distance between aspect centers divided by the mean distance between
/// attribute centers within an aspect. `labels[i] = (aspect, attribute)`.
pub fn center_distance_ratio<P: AsRef<[f32]>>(latents: &[P], labels: &[(usize, usize)]) -> Result<f64> {
    if latents.len() != labels.len() || latents.is_empty() {
        return Err(Error::Validation("latents and labels must be non-empty and aligned".into()));
    }
    let d = latents[0].as_ref().len();
    let aspects: BTreeSet<usize> = labels.iter().map(|l| l.0).collect();
    let mut aspect_centers = Vec::new();
    let mut intra = Vec::new();
    for &n in &aspects {
        let rows = || latents.iter().zip(labels).filter(move |(_, l)| l.0 == n).map(|(z, _)| z.as_ref());
        aspect_centers.push(centroid(rows(), d).expect("aspect has members"));
        let attrs: BTreeSet<usize> = labels.iter().filter(|l| l.0 == n).map(|l| l.1).collect();
        let centers: Vec<Vec<f64>> = attrs
            .iter()
            .filter_map(|&j| {
                centroid(latents.iter().zip(labels).filter(|(_, l)| **l == (n, j)).map(|(z, _)| z.as_ref()), d)
            })
            .collect();
        if let Some(m) = mean_pairwise(&centers) {
            intra.push(m);
        }
    }
    let inter = mean_pairwise(&aspect_centers)
        .ok_or_else(|| Error::Validation("need at least two aspects".into()))?;
    if intra.is_empty() {
        return Err(Error::Validation("need an aspect with at least two attributes".into()));
    }
    let intra = mean(intra.into_iter());
    if intra <= 0.0 {
        return Err(Error::Domain { op: "center distance ratio" });
    }
    Ok(inter / intra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SyntheticSpec;

    fn oracle_skew1() -> (SyntheticSpec, OracleClassifier) {
        let spec = SyntheticSpec { skew: 1.0, ..SyntheticSpec::default() };
        let o = OracleClassifier::for_spec(&spec);
        (spec, o)
    }

    fn block_tokens(spec: &SyntheticSpec, n: usize, j: usize, len: usize) -> Vec<u32> {
        let r = spec.block(n, j);
        (0..len).map(|i| (r.start + i % r.len()) as u32).collect()
    }

    #[test]
    fn distinct_hand_cases() {
        let s = [vec![0u32, 1, 0, 1]];
        assert_eq!(distinct_n(&s, 1), 0.5);
        assert_eq!(distinct_n(&s, 2), 2.0 / 3.0);
        let same = [vec![7u32], vec![7], vec![7]];
        assert_eq!(distinct_n(&same, 1), 1.0 / 3.0);
        let empty: [Vec<u32>; 0] = [];
        assert_eq!(distinct_n(&empty, 1), 0.0);
    }

    #[test]
    fn correctness_conjunction() {
        let (spec, o) = oracle_skew1();
        // aspect 0 correct, aspect 1 wrong
        let mut tokens = block_tokens(&spec, 0, 1, 8);
        tokens.extend(block_tokens(&spec, 1, 2, 8));
        let s = GeneratedSample { target: vec![Some(1), Some(3)], tokens };
        assert_eq!(correctness(&[s], &o).average, 0.0);
    }

    #[test]
    fn correctness_half_of_four() {
        let (spec, o) = oracle_skew1();
        let joint = |a: usize, b: usize| {
            let mut t = block_tokens(&spec, 0, a, 8);
            t.extend(block_tokens(&spec, 1, b, 8));
            t
        };
        let target = vec![Some(0), Some(1)];
        let samples = vec![
            GeneratedSample { target: target.clone(), tokens: joint(0, 1) },
            GeneratedSample { target: target.clone(), tokens: joint(0, 1) },
            GeneratedSample { target: target.clone(), tokens: joint(1, 1) },
            GeneratedSample { target: target.clone(), tokens: joint(0, 3) },
        ];
        let c = correctness(&samples, &o);
        assert_eq!(c.per_combination.len(), 1);
        assert_eq!(c.average, 0.5);
    }

    #[test]
    fn nll_closed_forms() {
        let (spec, o) = oracle_skew1();
        let tokens = block_tokens(&spec, 1, 2, 16);
        let s = GeneratedSample { target: vec![None, Some(2)], tokens: tokens.clone() };
        let r = nll_proxy(&[s], &o);
        let expect = libm::log(spec.block_size() as f64);
        assert!((r.nll - expect).abs() < 1e-12);

        let mut worse = tokens;
        worse.push(spec.block(0, 0).start as u32);
        let r2 = nll_proxy(&[GeneratedSample { target: vec![None, Some(2)], tokens: worse }], &o);
        assert!(r2.nll > r.nll);

        let uniform = SyntheticSpec { skew: 0.0, ..SyntheticSpec::default() };
        let ou = OracleClassifier::for_spec(&uniform);
        let s = GeneratedSample { target: vec![Some(0), Some(0)], tokens: vec![3, 9, 60] };
        assert!((nll_proxy(&[s], &ou).nll - libm::log(64.0)).abs() < 1e-12);
    }

    #[test]
    fn report_average_is_row_mean() {
        let (spec, o) = oracle_skew1();
        let mut samples = Vec::new();
        for (a, b) in [(0, 0), (1, 3), (0, 2)] {
            let mut t = block_tokens(&spec, 0, a, 8);
            t.extend(block_tokens(&spec, 1, b, 8));
            samples.push(GeneratedSample { target: vec![Some(a), Some(b)], tokens: t });
        }
        samples.push(GeneratedSample { target: vec![Some(1), Some(1)], tokens: vec![0; 16] });
        let r = evaluate(&samples, &o, 0.0);
        assert_eq!(r.rows.len(), 4);
        let m: f64 = r.rows.iter().map(|x| x.correctness).sum::<f64>() / 4.0;
        assert_eq!(r.average.correctness, m);
        assert_eq!(r.average.correctness, 0.75);
    }

    #[test]
    fn plane_is_reconstructed_exactly() {
        let pts: Vec<Vec<f32>> = (0..30)
            .map(|i| {
                let a = (i as f32 * 0.37).sin() * 3.0;
                let b = (i as f32 * 0.11).cos();
                vec![a + b, a - b, 0.5 * a, 2.0 * b, 1.0]
            })
            .collect();
        let p = project_latents(&pts).unwrap();
        assert!(p.warning.is_none());
        assert!((p.explained.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for (pt, c) in pts.iter().zip(&p.coords) {
            for i in 0..5 {
                let rec = p.mean[i] + c[0] * p.components[0][i] + c[1] * p.components[1][i];
                assert!((rec - pt[i] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rank_deficient_warns() {
        let pts = vec![vec![1.0f32, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        let p = project_latents(&pts).unwrap();
        assert!(p.components.is_empty());
        assert!(p.warning.is_some());
        assert!(project_latents(&pts[..1]).is_err());

        let line = vec![vec![0.0f32, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
        let p = project_latents(&line).unwrap();
        assert_eq!(p.components.len(), 1);
        assert!(p.coords.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn center_ratio_hand_case() {
        // aspect 0 attributes at x = ±1, aspect 1 attributes at x = 10 ± 2
        let pts = vec![vec![-1.0f32, 0.0], vec![1.0, 0.0], vec![8.0, 0.0], vec![12.0, 0.0]];
        let labels = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        let r = center_distance_ratio(&pts, &labels).unwrap();
        assert!((r - 10.0 / 3.0).abs() < 1e-12);
    }
}
