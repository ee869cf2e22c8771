//! Training objective for one context size:
//!
//! ```text
//! value(θ) = Σ_records −log f_y(m; θ)  +  λ_inv · Σ_x Σ_{a<b ∈ 𝒞(x,i)} L_sym(f(m_a; θ), f(m_b; θ))
//! ```
//!
//! with `L_sym(P, Q) = −Σ_c (P_c log Q_c + Q_c log P_c)`, plus the
//! directional trust-region value `(1/(n−1)) Σ_c w_c / ‖(b_c, w_c)‖`, which the
//! solver treats as a constraint and is never folded into `value`.
//!
//! Parameters are laid out flat as `[b_1, w_1, b_2, w_2, ...]`.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{softmax_with_reference, CalibrationParams, ProbDist, PROB_FLOOR};
use crate::error::{CalibError, Result};
use crate::surrogate::SurrogateDataset;

/// Queries scored under more contexts than this get their pairs subsampled.
pub const MAX_EXHAUSTIVE_CONTEXTS: usize = 40;
/// Pairs kept per query when subsampling (`C(40, 2)`).
pub const SAMPLED_PAIRS_PER_QUERY: usize = 780;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_inv: f64,
    /// Trust-region threshold. `None` derives it from the base model's
    /// in-sample accuracy on the surrogate set.
    pub tau: Option<f64>,
    pub eps_norm: f64,
    /// Seed for pair subsampling on heavily reused queries.
    pub pair_seed: u64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_inv: 10.0,
            tau: None,
            eps_norm: 1e-10,
            pair_seed: 0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_inv.is_finite() && self.lambda_inv >= 0.0) {
            return Err(CalibError::Config(format!(
                "lambda_inv must be finite and ≥ 0, got {}",
                self.lambda_inv
            )));
        }
        if let Some(t) = self.tau {
            if !(-1.0..=1.0).contains(&t) {
                return Err(CalibError::Config(format!("tau must lie in [-1, 1], got {t}")));
            }
        }
        if !(self.eps_norm > 0.0) {
            return Err(CalibError::Config("eps_norm must be positive".into()));
        }
        Ok(())
    }
}

#[inline]
fn flog(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Symmetric cross-entropy with floored logs.
pub fn sym_xent(p: &ProbDist, q: &ProbDist) -> f64 {
    sym_xent_slices(p.as_slice(), q.as_slice())
}

fn sym_xent_slices(p: &[f64], q: &[f64]) -> f64 {
    -p.iter()
        .zip(q)
        .map(|(pc, qc)| pc * flog(*qc) + qc * flog(*pc))
        .sum::<f64>()
}

/// Average cosine between each `(b_c, w_c)` and `(0, 1)`; norms are floored at `eps_norm`.
pub fn trust_region_value(theta: &CalibrationParams, eps_norm: f64) -> f64 {
    trust_region_flat(&theta.to_flat(), eps_norm, None)
}

/// Trust-region value of a flat parameter vector, optionally writing its gradient.
pub(crate) fn trust_region_flat(theta: &[f64], eps_norm: f64, mut grad: Option<&mut [f64]>) -> f64 {
    let k = theta.len() / 2;
    let inv_k = 1.0 / k as f64;
    let mut total = 0.0;
    for c in 0..k {
        let (b, w) = (theta[2 * c], theta[2 * c + 1]);
        let r = b.hypot(w);
        if r > eps_norm {
            total += w / r;
            if let Some(g) = grad.as_deref_mut() {
                let r3 = r * r * r;
                g[2 * c] = -w * b / r3 * inv_k;
                g[2 * c + 1] = b * b / r3 * inv_k;
            }
        } else {
            total += w / eps_norm;
            if let Some(g) = grad.as_deref_mut() {
                g[2 * c] = 0.0;
                g[2 * c + 1] = inv_k / eps_norm;
            }
        }
    }
    total * inv_k
}

/// Compiled objective over one surrogate dataset, with the invariance pairs
/// fixed up front so repeated evaluations see the same function.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    ds: &'a SurrogateDataset,
    lambda_inv: f64,
    pairs: Vec<(usize, usize)>,
}

impl<'a> Objective<'a> {
    pub fn new(ds: &'a SurrogateDataset, cfg: &ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ds,
            lambda_inv: cfg.lambda_inv,
            pairs: invariance_pairs(ds, cfg.pair_seed),
        })
    }

    pub fn dataset(&self) -> &SurrogateDataset {
        self.ds
    }

    pub fn num_params(&self) -> usize {
        2 * (self.ds.num_classes() - 1)
    }

    /// Record-index pairs entering the invariance penalty.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(CalibError::Dimension {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Calibrated distributions for every record, flattened `len × n`.
    fn calibrated(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.ds.num_classes();
        let mut probs = vec![0.0; self.ds.len() * n];
        let mut z = vec![0.0; n - 1];
        for (r, out) in self.ds.records().iter().zip(probs.chunks_exact_mut(n)) {
            for (c, (zc, m)) in z.iter_mut().zip(r.logits.as_slice()).enumerate() {
                *zc = theta[2 * c + 1] * m + theta[2 * c];
            }
            softmax_with_reference(&z, out);
        }
        probs
    }

    pub fn nll(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        let n = self.ds.num_classes();
        let probs = self.calibrated(theta);
        Ok(self
            .ds
            .records()
            .iter()
            .zip(probs.chunks_exact(n))
            .map(|(r, p)| -flog(p[r.label]))
            .sum())
    }

    pub fn inv_penalty(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        let n = self.ds.num_classes();
        let probs = self.calibrated(theta);
        Ok(self
            .pairs
            .iter()
            .map(|&(a, b)| sym_xent_slices(&probs[a * n..(a + 1) * n], &probs[b * n..(b + 1) * n]))
            .sum())
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; theta.len()];
        self.value_and_grad(theta, &mut g)
    }

    /// `nll + λ_inv · penalty`, writing the exact gradient into `grad`.
    pub fn value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check(theta)?;
        if grad.len() != theta.len() {
            return Err(CalibError::Dimension {
                expected: theta.len(),
                got: grad.len(),
            });
        }
        let n = self.ds.num_classes();
        let records = self.ds.records();
        let probs = self.calibrated(theta);
        // d value / d z for every record, classes 1..n
        let mut dz = vec![0.0; records.len() * (n - 1)];

        let mut nll = 0.0;
        for (j, r) in records.iter().enumerate() {
            let p = &probs[j * n..(j + 1) * n];
            let py = p[r.label];
            nll -= flog(py);
            if py > PROB_FLOOR {
                let d = &mut dz[j * (n - 1)..(j + 1) * (n - 1)];
                for (c, dc) in d.iter_mut().enumerate() {
                    *dc += p[c + 1] - if r.label == c + 1 { 1.0 } else { 0.0 };
                }
            }
        }

        let mut penalty = 0.0;
        if self.lambda_inv != 0.0 {
            for &(a, b) in &self.pairs {
                let pa = &probs[a * n..(a + 1) * n];
                let pb = &probs[b * n..(b + 1) * n];
                penalty += sym_xent_slices(pa, pb);
                accumulate_sym_grad(pa, pb, self.lambda_inv, &mut dz[a * (n - 1)..(a + 1) * (n - 1)]);
                accumulate_sym_grad(pb, pa, self.lambda_inv, &mut dz[b * (n - 1)..(b + 1) * (n - 1)]);
            }
        }

        grad.fill(0.0);
        for (r, d) in records.iter().zip(dz.chunks_exact(n - 1)) {
            for (c, (dc, m)) in d.iter().zip(r.logits.as_slice()).enumerate() {
                grad[2 * c] += dc;
                grad[2 * c + 1] += dc * m;
            }
        }
        Ok(nll + self.lambda_inv * penalty)
    }
}

/// Adds `scale · ∂L_sym(P, Q)/∂z^P` for the non-reference classes of `P`.
fn accumulate_sym_grad(p: &[f64], q: &[f64], scale: f64, dz: &mut [f64]) {
    // ∂L/∂P_c = −log Q_c − Q_c/P_c (the second term vanishes where P_c is floored)
    let mut s = 0.0;
    for (pc, qc) in p.iter().zip(q) {
        s -= pc * flog(*qc);
        if *pc > PROB_FLOOR {
            s -= qc;
        }
    }
    for (j, d) in dz.iter_mut().enumerate() {
        let (pj, qj) = (p[j + 1], q[j + 1]);
        let mut g = -pj * flog(qj) - pj * s;
        if pj > PROB_FLOOR {
            g -= qj;
        }
        *d += scale * g;
    }
}

/// Unordered record pairs `{a, b}` scoring the same query under distinct
/// contexts; exhaustive unless a query has more than
/// [`MAX_EXHAUSTIVE_CONTEXTS`] contexts.
pub fn invariance_pairs(ds: &SurrogateDataset, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (&query, ix) in ds.records_by_query() {
        let l = ix.len();
        if l <= MAX_EXHAUSTIVE_CONTEXTS {
            for a in 0..l {
                for b in a + 1..l {
                    pairs.push((ix[a], ix[b]));
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut chosen = HashSet::with_capacity(SAMPLED_PAIRS_PER_QUERY);
            while chosen.len() < SAMPLED_PAIRS_PER_QUERY {
                let a = rng.random_range(0..l);
                let b = rng.random_range(0..l);
                if a != b {
                    chosen.insert((a.min(b), a.max(b)));
                }
            }
            let mut chosen: Vec<_> = chosen.into_iter().collect();
            chosen.sort_unstable();
            pairs.extend(chosen.into_iter().map(|(a, b)| (ix[a], ix[b])));
        }
    }
    pairs
}

fn check_params(theta: &CalibrationParams, ds: &SurrogateDataset) -> Result<()> {
    if theta.num_classes() != ds.num_classes() {
        return Err(CalibError::Dimension {
            expected: ds.num_classes() - 1,
            got: theta.num_classes() - 1,
        });
    }
    if theta.context_size() != ds.context_size() {
        return Err(CalibError::InvalidArgument(format!(
            "parameters for context size {} applied to dataset of size {}",
            theta.context_size(),
            ds.context_size()
        )));
    }
    Ok(())
}

pub fn nll(theta: &CalibrationParams, ds: &SurrogateDataset) -> Result<f64> {
    check_params(theta, ds)?;
    Objective::new(ds, &ObjectiveConfig::default())?.nll(&theta.to_flat())
}

/// Invariance penalty with pairs drawn under the default pair seed.
pub fn inv_penalty(theta: &CalibrationParams, ds: &SurrogateDataset) -> Result<f64> {
    check_params(theta, ds)?;
    Objective::new(ds, &ObjectiveConfig::default())?.inv_penalty(&theta.to_flat())
}

/// `(nll + λ_inv · penalty, gradient)`, gradient in the flat layout.
pub fn total_objective(
    theta: &CalibrationParams,
    ds: &SurrogateDataset,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<f64>)> {
    check_params(theta, ds)?;
    let obj = Objective::new(ds, cfg)?;
    let flat = theta.to_flat();
    let mut grad = vec![0.0; flat.len()];
    let v = obj.value_and_grad(&flat, &mut grad)?;
    Ok((v, grad))
}
