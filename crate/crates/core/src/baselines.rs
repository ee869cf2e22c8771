//! Label-marginal baselines: Base, CC, DC and BC.
//!
//! CC, DC and BC all estimate a reference distribution `p̄` and predict
//! `∝ p(y | x, C) / p̄(y)`. In log-odds this subtracts a query-independent
//! vector, so each is a pure shift of the decision threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::domain::{Exemplar, ProbDist, PROB_FLOOR};
use crate::error::{CalibError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub cc_tokens: Vec<String>,
    pub dc_repeats: usize,
    pub bc_batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            cc_tokens: vec!["N/A".into(), "".into(), "[MASK]".into()],
            dc_repeats: 20,
            bc_batch_size: 128,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cc_tokens.is_empty() {
            return Err(CalibError::Config("cc_tokens must be nonempty".into()));
        }
        if self.dc_repeats == 0 || self.bc_batch_size == 0 {
            return Err(CalibError::Config("dc_repeats and bc_batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// The uncalibrated prediction.
pub fn base_predict<B: Backend + ?Sized>(x: &str, context: &[&Exemplar], backend: &B) -> Result<ProbDist> {
    backend.infer(x, context)
}

/// `p / max(p̄, ε)`, renormalized.
pub fn normalize_by_reference(p: &ProbDist, reference: &ProbDist) -> Result<ProbDist> {
    if p.len() != reference.len() {
        return Err(CalibError::Dimension { expected: reference.len(), got: p.len() });
    }
    let w: Vec<f64> = p
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, r)| a / r.max(PROB_FLOOR))
        .collect();
    ProbDist::from_weights(&w)
}

fn mean_inference<B: Backend + ?Sized>(inputs: &[String], context: &[&Exemplar], backend: &B) -> Result<ProbDist> {
    let dists = crate::par::try_map(inputs, backend.max_concurrency(), |x| backend.infer(x, context))?;
    ProbDist::mean(&dists)
}

/// Mean prediction over the content-free tokens.
pub fn cc_reference<B: Backend + ?Sized>(context: &[&Exemplar], backend: &B, cfg: &BaselineConfig) -> Result<ProbDist> {
    cfg.validate()?;
    mean_inference(&cfg.cc_tokens, context, backend)
}

pub fn cc_predict<B: Backend + ?Sized>(
    x: &str,
    context: &[&Exemplar],
    backend: &B,
    cfg: &BaselineConfig,
) -> Result<ProbDist> {
    normalize_by_reference(&backend.infer(x, context)?, &cc_reference(context, backend, cfg)?)
}

/// Random bag-of-words pseudo-inputs of the corpus's mean token length
/// (rounded half to even), drawn with replacement from the pooled tokens.
pub fn dc_pseudo_inputs(corpus: &[String], repeats: usize, seed: u64) -> Result<Vec<String>> {
    if corpus.is_empty() {
        return Err(CalibError::InvalidArgument("DC needs a nonempty corpus".into()));
    }
    let tokenized: Vec<Vec<&str>> = corpus.iter().map(|t| t.split_whitespace().collect()).collect();
    let bag: Vec<&str> = tokenized.iter().flatten().copied().collect();
    let total: usize = tokenized.iter().map(Vec::len).sum();
    let len = (total as f64 / corpus.len() as f64).round_ties_even() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..repeats)
        .map(|_| {
            if bag.is_empty() {
                return String::new();
            }
            (0..len)
                .map(|_| bag[rng.random_range(0..bag.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

pub fn dc_reference<B: Backend + ?Sized>(
    context: &[&Exemplar],
    backend: &B,
    cfg: &BaselineConfig,
    corpus: &[String],
) -> Result<ProbDist> {
    cfg.validate()?;
    mean_inference(&dc_pseudo_inputs(corpus, cfg.dc_repeats, cfg.seed)?, context, backend)
}

pub fn dc_predict<B: Backend + ?Sized>(
    x: &str,
    context: &[&Exemplar],
    backend: &B,
    cfg: &BaselineConfig,
    corpus: &[String],
) -> Result<ProbDist> {
    normalize_by_reference(&backend.infer(x, context)?, &dc_reference(context, backend, cfg, corpus)?)
}

/// Mean prediction over the first `min(bc_batch_size, |batch|)` queries.
pub fn bc_reference<B: Backend + ?Sized>(
    batch: &[String],
    context: &[&Exemplar],
    backend: &B,
    cfg: &BaselineConfig,
) -> Result<ProbDist> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CalibError::InvalidArgument("BC needs a nonempty batch".into()));
    }
    mean_inference(&batch[..batch.len().min(cfg.bc_batch_size)], context, backend)
}

pub fn bc_predict<B: Backend + ?Sized>(
    batch: &[String],
    context: &[&Exemplar],
    backend: &B,
    cfg: &BaselineConfig,
) -> Result<Vec<ProbDist>> {
    let reference = bc_reference(batch, context, backend, cfg)?;
    crate::par::try_map(batch, backend.max_concurrency(), |x| {
        normalize_by_reference(&backend.infer(x, context)?, &reference)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockModelSpec};
    use crate::domain::{predict_label, probs_from_logits, LogitVector};

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn shift_mock(slope: f64, shift: f64) -> MockBackend {
        let mut spec = MockModelSpec::binary(slope, 0.0);
        spec.marginal_shift = vec![shift];
        MockBackend::new(spec).unwrap()
    }

    #[test]
    fn reference_division_example() {
        let out = normalize_by_reference(&pd(&[0.3, 0.7]), &pd(&[0.6, 0.4])).unwrap();
        assert!((out.get(0) - 2.0 / 9.0).abs() < 1e-12);
        assert!((out.get(1) - 7.0 / 9.0).abs() < 1e-12);
        let p = pd(&[0.1, 0.6, 0.3]);
        let same = normalize_by_reference(&p, &pd(&[1.0 / 3.0; 3])).unwrap();
        for c in 0..3 {
            assert!((same.get(c) - p.get(c)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_reference_is_floored() {
        let out = normalize_by_reference(&pd(&[0.5, 0.5]), &pd(&[1.0, 0.0])).unwrap();
        assert!(out.get(1) > 0.999_999);
    }

    #[test]
    fn base_is_backend_output() {
        let b = MockBackend::new(MockModelSpec::binary(1.0, 0.0)).unwrap();
        let want = probs_from_logits(&LogitVector::new(vec![1.0]).unwrap());
        assert_eq!(base_predict("1", &[], &b).unwrap(), want);
        let shifted = base_predict("0", &[], &shift_mock(1.0, 2.0)).unwrap();
        assert_eq!(shifted, probs_from_logits(&LogitVector::new(vec![2.0]).unwrap()));
    }

    #[test]
    fn cc_under_pure_shift_matches_truth_beyond_the_shift() {
        let b = shift_mock(1.0, 2.0);
        let cfg = BaselineConfig::default();
        let r = cc_reference(&[], &b, &cfg).unwrap();
        // corrected log-odds are t + 2 − ln(p̄₁/p̄₀); the residual offset must
        // stay inside (−2, 2) for the claim to hold at |t| > 2
        let offset = 2.0 - (r.get(1) / r.get(0)).ln();
        assert!(offset.abs() < 2.0, "{offset}");
        for j in 0..200 {
            let t = -6.0 + 12.0 * j as f64 / 199.0;
            if t.abs() <= 2.0 {
                continue;
            }
            let x = format!("{t}");
            let got = predict_label(&cc_predict(&x, &[], &b, &cfg).unwrap());
            assert_eq!(got, usize::from(t > 0.0), "t = {t}");
        }
    }

    #[test]
    fn dc_pseudo_inputs_follow_mean_length() {
        let corpus: Vec<String> = ["a b c", "d e", "f g h i"].iter().map(|s| s.to_string()).collect();
        // mean 3 tokens
        let xs = dc_pseudo_inputs(&corpus, 5, 7).unwrap();
        assert_eq!(xs.len(), 5);
        assert!(xs.iter().all(|x| x.split_whitespace().count() == 3));
        assert_eq!(xs, dc_pseudo_inputs(&corpus, 5, 7).unwrap());
        // mean 2.5 rounds to 2
        let even: Vec<String> = ["a b", "c d e"].iter().map(|s| s.to_string()).collect();
        assert!(dc_pseudo_inputs(&even, 3, 0).unwrap().iter().all(|x| x.split_whitespace().count() == 2));
        assert!(dc_pseudo_inputs(&[], 3, 0).is_err());
    }

    #[test]
    fn dc_single_repeat_is_deterministic() {
        let b = shift_mock(1.0, 2.0);
        let cfg = BaselineConfig { dc_repeats: 1, seed: 3, ..Default::default() };
        let corpus = vec!["alpha beta".to_string(), "gamma delta epsilon".to_string()];
        assert_eq!(dc_predict("0.4", &[], &b, &cfg, &corpus).unwrap(), dc_predict("0.4", &[], &b, &cfg, &corpus).unwrap());
    }

    #[test]
    fn dc_beats_base_under_pure_shift() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.marginal_shift = vec![2.0];
        let b = MockBackend::new(spec.clone()).unwrap();
        let items = crate::backend::simulate_task(&spec, &crate::backend::SimulationConfig::new(200, 11)).unwrap();
        let corpus: Vec<String> = (0..50).map(|j| format!("word{j} token{} filler{}", j % 7, j % 3)).collect();
        let cfg = BaselineConfig::default();
        let reference = dc_reference(&[], &b, &cfg, &corpus).unwrap();
        let (mut base, mut dc) = (0, 0);
        for it in &items {
            let p = b.infer(&it.text, &[]).unwrap();
            base += usize::from(predict_label(&p) == it.label);
            dc += usize::from(predict_label(&normalize_by_reference(&p, &reference).unwrap()) == it.label);
        }
        assert!(dc >= base, "dc {dc} base {base}");
    }

    #[test]
    fn bc_identical_batch_is_uniform() {
        let b = shift_mock(1.0, 0.7);
        let batch = vec!["0.9".to_string(); 4];
        for p in bc_predict(&batch, &[], &b, &BaselineConfig::default()).unwrap() {
            assert!((p.get(0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bc_balanced_batch_recovers_shift() {
        let b = shift_mock(0.1, 2.0);
        let batch: Vec<String> = (0..128).map(|j| format!("{}", (j as f64 - 63.5) / 32.0)).collect();
        let r = bc_reference(&batch, &[], &b, &BaselineConfig::default()).unwrap();
        assert!(((r.get(1) / r.get(0)).ln() - 2.0).abs() < 0.1);
    }

    #[test]
    fn bc_uses_first_m_items() {
        let b = shift_mock(1.0, 0.0);
        let cfg = BaselineConfig { bc_batch_size: 2, ..Default::default() };
        let batch: Vec<String> = ["1", "-1", "5", "5"].iter().map(|s| s.to_string()).collect();
        let r = bc_reference(&batch, &[], &b, &cfg).unwrap();
        assert!((r.get(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn base_on_flipped_mock_is_near_thirty_percent() {
        use crate::backend::{simulate_task, SimulationConfig};
        let mut correct = 0;
        for seed in 0..5 {
            let spec = MockModelSpec {
                conditional_scale: vec![-1.0],
                marginal_shift: vec![2.75],
                noise_sd: 0.3,
                majority_bias: 0.5,
                seed,
                ..MockModelSpec::binary(3.3466, 0.0)
            };
            let pool = simulate_task(&spec, &SimulationConfig::new(264, seed)).unwrap();
            let b = MockBackend::new(spec).unwrap();
            let ctx: Vec<&Exemplar> = pool[..8].iter().collect();
            for x in &pool[8..] {
                correct += usize::from(predict_label(&base_predict(&x.text, &ctx, &b).unwrap()) == x.label);
            }
        }
        let acc = correct as f64 / (5.0 * 256.0);
        assert!((acc - 0.30).abs() <= 0.05, "base accuracy {acc}");
    }
}
