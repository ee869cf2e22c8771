//! A synthetic in-context classifier with a known ground-truth posterior.
//!
//! The query text is mapped to a scalar feature `s(x)`; the true log-odds of
//! class `c` are `slope_c * s(x) + intercept_c`. The mock then distorts these
//! with a conditional scale `a_c`, a marginal shift `d_c`, a majority-label
//! term driven by the context's label frequencies, a recency term for the
//! last context label, and seeded Gaussian noise keyed on (query, context).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Backend;
use crate::domain::{probs_from_logits, Exemplar, LogitVector, ProbDist};
use crate::error::{CalibError, Result};

/// Omitted per-class vectors default to intercept 0, scale 1 and shift 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MockSpecFields")]
pub struct MockModelSpec {
    /// Ground-truth slope per non-reference class.
    pub true_slopes: Vec<f64>,
    pub true_intercepts: Vec<f64>,
    /// `a_c`
    pub conditional_scale: Vec<f64>,
    /// `d_c`
    pub marginal_shift: Vec<f64>,
    pub majority_bias: f64,
    pub recency_bias: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MockSpecFields {
    true_slopes: Vec<f64>,
    true_intercepts: Option<Vec<f64>>,
    conditional_scale: Option<Vec<f64>>,
    marginal_shift: Option<Vec<f64>>,
    #[serde(default)]
    majority_bias: f64,
    #[serde(default)]
    recency_bias: f64,
    #[serde(default)]
    noise_sd: f64,
    #[serde(default)]
    seed: u64,
}

impl From<MockSpecFields> for MockModelSpec {
    fn from(f: MockSpecFields) -> Self {
        let n = f.true_slopes.len();
        Self {
            true_intercepts: f.true_intercepts.unwrap_or_else(|| vec![0.0; n]),
            conditional_scale: f.conditional_scale.unwrap_or_else(|| vec![1.0; n]),
            marginal_shift: f.marginal_shift.unwrap_or_else(|| vec![0.0; n]),
            true_slopes: f.true_slopes,
            majority_bias: f.majority_bias,
            recency_bias: f.recency_bias,
            noise_sd: f.noise_sd,
            seed: f.seed,
        }
    }
}

impl Default for MockModelSpec {
    fn default() -> Self {
        Self::binary(1.0, 0.0)
    }
}

impl MockModelSpec {
    /// Unbiased binary task with true logit `slope * s(x) + intercept`.
    pub fn binary(slope: f64, intercept: f64) -> Self {
        Self {
            true_slopes: vec![slope],
            true_intercepts: vec![intercept],
            conditional_scale: vec![1.0],
            marginal_shift: vec![0.0],
            majority_bias: 0.0,
            recency_bias: 0.0,
            noise_sd: 0.0,
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.true_slopes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.true_slopes.len();
        if k == 0 {
            return Err(CalibError::InvalidArgument("mock needs at least 2 classes".into()));
        }
        for (name, v) in [
            ("true_intercepts", &self.true_intercepts),
            ("conditional_scale", &self.conditional_scale),
            ("marginal_shift", &self.marginal_shift),
        ] {
            if v.len() != k {
                return Err(CalibError::InvalidArgument(format!(
                    "{name} has {} entries, expected {k}",
                    v.len()
                )));
            }
        }
        let all = self
            .true_slopes
            .iter()
            .chain(&self.true_intercepts)
            .chain(&self.conditional_scale)
            .chain(&self.marginal_shift)
            .chain([&self.majority_bias, &self.recency_bias, &self.noise_sd]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(CalibError::InvalidArgument("non-finite mock parameter".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(CalibError::InvalidArgument("noise_sd must be ≥ 0".into()));
        }
        Ok(())
    }

    /// `s(x)`: the text parsed as a decimal, or a hash mapped uniformly into `[-3, 3]`.
    pub fn feature(text: &str) -> f64 {
        match text.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                let digest = Sha256::digest(text.as_bytes());
                let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
                (word >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
            }
        }
    }

    pub fn true_logits(&self, text: &str) -> LogitVector {
        let s = Self::feature(text);
        LogitVector::new(
            self.true_slopes
                .iter()
                .zip(&self.true_intercepts)
                .map(|(a, b)| a * s + b)
                .collect(),
        )
        .expect("finite mock parameters")
    }

    /// Noise-free, bias-free posterior `P*(y | x)`.
    pub fn true_posterior(&self, text: &str) -> ProbDist {
        probs_from_logits(&self.true_logits(text))
    }

    /// The biased model's log-odds for `query` under `context`.
    pub fn logits(&self, query: &str, context: &[&Exemplar]) -> LogitVector {
        let n = self.num_classes();
        let truth = self.true_logits(query);
        let mut counts = vec![0usize; n];
        for e in context {
            if e.label < n {
                counts[e.label] += 1;
            }
        }
        let last = context.last().map(|e| e.label);
        let uniform = 1.0 / n as f64;
        let mut noise = self.noise_source(query, context);
        let m = (1..n)
            .map(|c| {
                let freq = if context.is_empty() {
                    uniform
                } else {
                    counts[c] as f64 / context.len() as f64
                };
                let mut v = self.conditional_scale[c - 1] * truth.as_slice()[c - 1]
                    + self.marginal_shift[c - 1]
                    + self.majority_bias * (freq - uniform);
                if last == Some(c) {
                    v += self.recency_bias;
                }
                if let Some((rng, normal)) = noise.as_mut() {
                    v += normal.sample(rng);
                }
                v
            })
            .collect();
        LogitVector::new(m).expect("finite mock logits")
    }

    fn noise_source(&self, query: &str, context: &[&Exemplar]) -> Option<(ChaCha8Rng, Normal<f64>)> {
        if self.noise_sd == 0.0 {
            return None;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((query.len() as u64).to_le_bytes());
        h.update(query.as_bytes());
        for e in context {
            h.update((e.text.len() as u64).to_le_bytes());
            h.update(e.text.as_bytes());
            h.update((e.label as u64).to_le_bytes());
        }
        let seed: [u8; 32] = h.finalize().into();
        Some((
            ChaCha8Rng::from_seed(seed),
            Normal::new(0.0, self.noise_sd).expect("validated sd"),
        ))
    }
}

pub struct MockBackend {
    spec: MockModelSpec,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(spec: MockModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for MockBackend {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(probs_from_logits(&self.spec.logits(query, context)))
    }
}

/// Parameters for drawing a labeled task from a mock's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub num_items: usize,
    #[serde(default)]
    pub feature_mean: f64,
    #[serde(default = "one")]
    pub feature_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self::new(1000, 0)
    }
}

impl SimulationConfig {
    pub fn new(num_items: usize, seed: u64) -> Self {
        Self { num_items, feature_mean: 0.0, feature_sd: 1.0, seed }
    }
}

/// Draws `num_items` queries with `s ~ N(feature_mean, feature_sd)` and labels
/// sampled from the true posterior. Texts are the feature printed exactly, so
/// `MockModelSpec::feature` recovers it bit-for-bit.
pub fn simulate_task(spec: &MockModelSpec, cfg: &SimulationConfig) -> Result<Vec<Exemplar>> {
    spec.validate()?;
    let normal = Normal::new(cfg.feature_mean, cfg.feature_sd)
        .map_err(|e| CalibError::InvalidArgument(format!("feature distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items = Vec::with_capacity(cfg.num_items);
    for j in 0..cfg.num_items {
        let s: f64 = normal.sample(&mut rng);
        let text = format!("{s}");
        let post = spec.true_posterior(&text);
        let u: f64 = rng.random();
        let mut label = post.len() - 1;
        let mut acc = 0.0;
        for (c, p) in post.as_slice().iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        items.push(Exemplar::new(j.to_string(), text, label));
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    fn shots() -> Vec<Exemplar> {
        vec![
            Exemplar::new("0", "0.3", 1),
            Exemplar::new("1", "-1.0", 0),
            Exemplar::new("2", "2.0", 1),
        ]
    }

    #[test]
    fn unbiased_mock_equals_truth() {
        let spec = MockModelSpec::binary(1.0, 0.0);
        let b = MockBackend::new(spec).unwrap();
        let s = shots();
        let ctx: Vec<&Exemplar> = s.iter().collect();
        let p = b.infer("1.2", &ctx).unwrap();
        let want = probs_from_logits(&LogitVector::new(vec![1.2]).unwrap());
        assert!(close(p.as_slice(), want.as_slice()));
    }

    #[test]
    fn pure_marginal_shift() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.marginal_shift = vec![2.0];
        let m = spec.logits("0", &[]);
        assert_eq!(m.as_slice(), &[2.0]);
    }

    #[test]
    fn anti_correlated_scale() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.conditional_scale = vec![-1.0];
        assert_eq!(spec.logits("1.5", &[]).as_slice(), &[-1.5]);
    }

    #[test]
    fn true_posterior_examples() {
        let spec = MockModelSpec::binary(1.0, 0.0);
        assert_eq!(spec.true_posterior("0").as_slice(), &[0.5, 0.5]);
        let spec = MockModelSpec::binary(2.0, -1.0);
        let want = probs_from_logits(&LogitVector::new(vec![1.0]).unwrap());
        assert_eq!(spec.true_posterior("1"), want);
    }

    #[test]
    fn feature_parses_or_hashes() {
        assert_eq!(MockModelSpec::feature(" -2.5 "), -2.5);
        let h = MockModelSpec::feature("a great film");
        assert!((-3.0..=3.0).contains(&h));
        assert_eq!(h, MockModelSpec::feature("a great film"));
        assert_ne!(h, MockModelSpec::feature("a dull film"));
        assert!((-3.0..=3.0).contains(&MockModelSpec::feature("NaN")));
    }

    #[test]
    fn majority_and_recency_terms() {
        let mut spec = MockModelSpec::binary(0.0, 0.0);
        spec.majority_bias = 2.0;
        spec.recency_bias = 0.5;
        let s = shots();
        // labels [1, 0, 1]: freq_1 = 2/3, last label 1
        let m = spec.logits("0", &[&s[0], &s[1], &s[2]]);
        assert!((m.as_slice()[0] - (2.0 * (2.0 / 3.0 - 0.5) + 0.5)).abs() < 1e-12);
        // labels [1, 0]: balanced, last label 0
        let m = spec.logits("0", &[&s[0], &s[1]]);
        assert!(m.as_slice()[0].abs() < 1e-12);
    }

    #[test]
    fn context_sensitivity_follows_bias_terms() {
        let s = shots();
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        let a = spec.logits("0.7", &[&s[0], &s[2]]);
        let b = spec.logits("0.7", &[&s[1]]);
        assert_eq!(a, b);
        spec.majority_bias = 1.0;
        assert_ne!(spec.logits("0.7", &[&s[0], &s[2]]), spec.logits("0.7", &[&s[1]]));
    }

    #[test]
    fn noise_is_deterministic_and_context_keyed() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.noise_sd = 0.5;
        spec.seed = 9;
        let s = shots();
        let a = spec.logits("0.1", &[&s[0], &s[1]]);
        assert_eq!(a, spec.logits("0.1", &[&s[0], &s[1]]));
        assert_ne!(a, spec.logits("0.1", &[&s[1], &s[0]]));
        spec.seed = 10;
        assert_ne!(a, spec.logits("0.1", &[&s[0], &s[1]]));
    }

    #[test]
    fn validation() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.marginal_shift = vec![];
        assert!(MockBackend::new(spec).is_err());
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.noise_sd = -1.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn simulated_labels_follow_posterior() {
        let spec = MockModelSpec::binary(3.0, 0.0);
        let cfg = SimulationConfig {
            num_items: 4000,
            feature_mean: 0.0,
            feature_sd: 1.0,
            seed: 1,
        };
        let items = simulate_task(&spec, &cfg).unwrap();
        assert_eq!(items, simulate_task(&spec, &cfg).unwrap());
        let expected: f64 = items.iter().map(|e| spec.true_posterior(&e.text).get(1)).sum();
        let observed = items.iter().filter(|e| e.label == 1).count() as f64;
        // binomial sd is below sqrt(4000 / 4) ≈ 32
        assert!((expected - observed).abs() < 4.0 * 32.0);
        for e in &items {
            assert_eq!(format!("{}", MockModelSpec::feature(&e.text)), e.text);
        }
    }

    #[test]
    fn bayes_accuracy_matches_quadrature() {
        let spec = MockModelSpec::binary(3.0, 0.0);
        let items = simulate_task(&spec, &SimulationConfig::new(10_000, 5)).unwrap();
        let hits = items
            .iter()
            .filter(|e| crate::predict_label(&spec.true_posterior(&e.text)) == e.label)
            .count();
        let mc = hits as f64 / 1e4;
        // E[sigmoid(3|s|)] for s ~ N(0, 1), midpoint rule on [0, 8].
        let h = 1e-4;
        let exact: f64 = (0..80_000)
            .map(|j| {
                let s = (j as f64 + 0.5) * h;
                let density = 2.0 * (-s * s / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
                density / (1.0 + (-3.0 * s).exp()) * h
            })
            .sum();
        // binomial sd is about 0.003 at 10k draws
        assert!((mc - exact).abs() < 0.015, "monte carlo {mc:.4} vs quadrature {exact:.4}");
    }
}
