//! Constrained fit of the affine calibrator for one context size.
//!
//! The trust-region inequality `T(θ) ≥ τ` is handled with a
//! Powell–Hestenes–Rockafellar augmented Lagrangian around an L-BFGS inner
//! solver with Armijo backtracking. With a zero multiplier the penalty is the
//! plain quadratic `μ/2 · max(0, τ − T)²`; the multiplier lets the outer loop
//! reach feasibility without driving `μ` to extremes. Any residual violation is
//! repaired by bisecting toward the identity, which is always feasible, and the
//! identity itself is kept as a fallback so a fit never scores worse than it.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{calibrated_dist, predict_label, probs_from_logits, CalibrationParams};
use crate::error::{CalibError, Result};
use crate::objective::{trust_region_flat, Objective, ObjectiveConfig};
use crate::surrogate::{class_coverage, SurrogateDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    /// Learn `(b_c, w_c)` under the trust-region constraint.
    #[default]
    Full,
    /// Learn `b_c` with every `w_c` pinned at 1; the constraint is ignored.
    BiasOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub constraint_tol: f64,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub max_outer_rounds: usize,
    pub restarts: usize,
    pub seed: u64,
    pub mode: SolverMode,
    /// L-BFGS memory.
    pub history: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            constraint_tol: 1e-6,
            penalty_init: 10.0,
            penalty_growth: 10.0,
            max_outer_rounds: 6,
            restarts: 3,
            seed: 0,
            mode: SolverMode::Full,
            history: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grad_tol", self.grad_tol),
            ("constraint_tol", self.constraint_tol),
            ("penalty_init", self.penalty_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CalibError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(CalibError::Config("penalty_growth must exceed 1".into()));
        }
        if self.max_iters == 0 || self.max_outer_rounds == 0 || self.restarts == 0 || self.history == 0 {
            return Err(CalibError::Config(
                "max_iters, max_outer_rounds, restarts and history must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: CalibrationParams,
    /// `nll + λ_inv · penalty` at `params`.
    pub objective_value: f64,
    pub constraint_value: f64,
    pub tau: f64,
    pub lambda_inv: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// Accuracy of the calibrated model on its own surrogate set.
    pub in_sample_accuracy: f64,
    /// Accuracy of the uncalibrated logits on the surrogate set.
    pub base_accuracy: f64,
}

/// `τ = cos(α°)` with α chosen by accuracy band:
/// `20^{1/(K−1)}` (≥ 0.9), `45^{1/(K−1)}` (≥ 0.7), `90^{1/(K−1)}` (≥ 0.5), else 180.
pub fn tau_from_accuracy(acc: f64, num_labels: usize) -> f64 {
    let root = 1.0 / (num_labels.max(2) - 1) as f64;
    let alpha = if acc >= 0.9 {
        20f64.powf(root)
    } else if acc >= 0.7 {
        45f64.powf(root)
    } else if acc >= 0.5 {
        90f64.powf(root)
    } else {
        180.0
    };
    alpha.to_radians().cos()
}

/// Base-model accuracy on the surrogate records.
pub fn in_sample_accuracy(ds: &SurrogateDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(CalibError::InvalidArgument("empty surrogate dataset".into()));
    }
    let hits = ds
        .records()
        .iter()
        .filter(|r| predict_label(&probs_from_logits(&r.logits)) == r.label)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Accuracy of calibrated predictions on the surrogate records.
pub fn calibrated_accuracy(ds: &SurrogateDataset, theta: &CalibrationParams) -> Result<f64> {
    let mut hits = 0usize;
    for r in ds.records() {
        if predict_label(&calibrated_dist(&r.logits, theta)?) == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len().max(1) as f64)
}

struct Minimum {
    x: Vec<f64>,
    iters: usize,
}

/// L-BFGS with Armijo backtracking. Non-finite values count as +∞.
/// Relative decrease below which an iteration counts as stalled.
const STALL_TOL: f64 = 1e-12;
const STALL_ITERS: usize = 10;

fn lbfgs<F>(mut f: F, x0: &[f64], max_iters: usize, grad_tol: f64, history: usize) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Minimum { x, iters: 0 };
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(history);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iters = 0;
    let mut stalled = 0;
    while iters < max_iters {
        if norm_inf(&g) < grad_tol {
            break;
        }
        iters += 1;

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            axpy(-a, y, &mut d);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let scale = 1.0 / norm2(&g).max(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            axpy(a - b, s, &mut d);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            let scale = 1.0 / norm2(&g).max(1.0);
            d = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for j in 0..n {
                x_new[j] = x[j] + step * d[j];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) && sy > 0.0 {
            if mem.len() == history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let progress = fx - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        if progress <= f64::EPSILON * fx.abs().max(1.0) && norm_inf(&g) < grad_tol.sqrt() {
            break;
        }
        // Near the floored-norm corner of the trust region the gradient stays
        // huge while the value no longer moves; stop instead of burning iterations.
        stalled = if progress <= STALL_TOL * fx.abs().max(1.0) { stalled + 1 } else { 0 };
        if stalled >= STALL_ITERS {
            break;
        }
    }
    Minimum { x, iters }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn identity_flat(k: usize) -> Vec<f64> {
    (0..k).flat_map(|_| [0.0, 1.0]).collect()
}

/// Bisects along the segment toward the identity for a feasible point.
fn repair(theta: &[f64], tau: f64, tol: f64, eps_norm: f64) -> Vec<f64> {
    let id = identity_flat(theta.len() / 2);
    let at = |t: f64| -> Vec<f64> {
        theta
            .iter()
            .zip(&id)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect()
    };
    let ok = |x: &[f64]| trust_region_flat(x, eps_norm, None) >= tau - 0.5 * tol;
    if ok(theta) {
        return theta.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(&at(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    at(hi)
}

/// Shrinks biases toward 0 until the point is feasible.
fn project_start(mut theta: Vec<f64>, tau: f64, eps_norm: f64) -> Vec<f64> {
    for _ in 0..60 {
        if trust_region_flat(&theta, eps_norm, None) >= tau {
            return theta;
        }
        for c in 0..theta.len() / 2 {
            theta[2 * c] *= 0.5;
        }
    }
    for c in 0..theta.len() / 2 {
        theta[2 * c] = 0.0;
        theta[2 * c + 1] = theta[2 * c + 1].abs().max(eps_norm * 10.0);
    }
    theta
}

/// Fits one calibrator. `cfg.tau = None` uses [`tau_from_accuracy`] on the
/// base in-sample accuracy.
pub fn fit(ds: &SurrogateDataset, cfg: &ObjectiveConfig, scfg: &SolverConfig) -> Result<FitResult> {
    scfg.validate()?;
    let n = ds.num_classes();
    let coverage = class_coverage(ds, n);
    if !coverage.is_complete() {
        return Err(CalibError::Coverage {
            context_size: ds.context_size(),
            missing: coverage.missing(),
        });
    }
    let base_accuracy = in_sample_accuracy(ds)?;
    let tau = cfg.tau.unwrap_or_else(|| tau_from_accuracy(base_accuracy, n));
    let obj = Objective::new(ds, cfg)?;
    let k = n - 1;
    let eps = cfg.eps_norm;

    let evaluate = |theta: &[f64]| -> f64 { obj.value(theta).unwrap_or(f64::INFINITY) };

    let identity = identity_flat(k);
    let id_value = evaluate(&identity);
    let mut best: Option<(Vec<f64>, f64)> = id_value.is_finite().then(|| (identity.clone(), id_value));
    let mut total_iters = 0usize;
    let mut any_finite = id_value.is_finite();

    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    let jitter = Normal::new(0.0, 0.1).expect("valid sd");
    let mut starts = vec![identity.clone()];
    // The NLL alone is convex, and its constrained minimizer is a start on
    // the right side of a sign flip that the confidence-seeking penalty would
    // otherwise keep local descent from crossing.
    if cfg.lambda_inv > 0.0 {
        let nll_cfg = ObjectiveConfig { lambda_inv: 0.0, ..*cfg };
        let nll_obj = Objective::new(ds, &nll_cfg)?;
        let (warm, iters) = solve(&nll_obj, &identity, tau, eps, scfg);
        total_iters += iters;
        if warm.iter().all(|v| v.is_finite()) {
            starts.push(warm);
        }
    }
    for _ in 1..scfg.restarts {
        let mut start = identity.clone();
        for v in start.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
        if scfg.mode == SolverMode::Full {
            start = project_start(start, tau, eps);
        }
        starts.push(start);
    }

    for start in &starts {
        let (theta, iters) = solve(&obj, start, tau, eps, scfg);
        total_iters += iters;
        let value = evaluate(&theta);
        if !value.is_finite() {
            continue;
        }
        any_finite = true;
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((theta, value));
        }
    }

    if !any_finite {
        return Err(CalibError::Numeric);
    }
    let (theta, objective_value) = best.ok_or(CalibError::Numeric)?;
    let params = CalibrationParams::from_flat(&theta, ds.context_size())?;
    let constraint_value = trust_region_flat(&theta, eps, None);
    let feasible = match scfg.mode {
        SolverMode::Full => constraint_value >= tau - scfg.constraint_tol,
        SolverMode::BiasOnly => true,
    };
    Ok(FitResult {
        in_sample_accuracy: calibrated_accuracy(ds, &params)?,
        params,
        objective_value,
        constraint_value,
        tau,
        lambda_inv: cfg.lambda_inv,
        feasible,
        iterations: total_iters,
        base_accuracy,
    })
}

fn solve(obj: &Objective<'_>, start: &[f64], tau: f64, eps: f64, scfg: &SolverConfig) -> (Vec<f64>, usize) {
    match scfg.mode {
        SolverMode::Full => solve_constrained(obj, start, tau, eps, scfg),
        SolverMode::BiasOnly => solve_bias_only(obj, start, scfg),
    }
}

fn solve_bias_only(obj: &Objective<'_>, start: &[f64], scfg: &SolverConfig) -> (Vec<f64>, usize) {
    let k = start.len() / 2;
    let x0: Vec<f64> = (0..k).map(|c| start[2 * c]).collect();
    let mut full = identity_flat(k);
    let mut gfull = vec![0.0; 2 * k];
    let m = lbfgs(
        |x, g| {
            for c in 0..k {
                full[2 * c] = x[c];
            }
            let v = obj.value_and_grad(&full, &mut gfull).unwrap_or(f64::INFINITY);
            for c in 0..k {
                g[c] = gfull[2 * c];
            }
            v
        },
        &x0,
        scfg.max_iters,
        scfg.grad_tol,
        scfg.history,
    );
    let mut theta = identity_flat(k);
    for c in 0..k {
        theta[2 * c] = m.x[c];
    }
    (theta, m.iters)
}

fn solve_constrained(
    obj: &Objective<'_>,
    start: &[f64],
    tau: f64,
    eps: f64,
    scfg: &SolverConfig,
) -> (Vec<f64>, usize) {
    let dim = start.len();
    let mut theta = start.to_vec();
    let mut iters = 0;
    // T(θ) ≥ −1 everywhere, so τ ≤ −1 needs no constraint handling
    if tau <= -1.0 {
        let m = lbfgs(
            |x, g| obj.value_and_grad(x, g).unwrap_or(f64::INFINITY),
            &theta,
            scfg.max_iters,
            scfg.grad_tol,
            scfg.history,
        );
        return (m.x, m.iters);
    }
    let mut mu = scfg.penalty_init;
    let mut lambda = 0.0f64;
    let mut tgrad = vec![0.0; dim];
    let mut prev_violation = f64::INFINITY;
    for _ in 0..scfg.max_outer_rounds {
        let m = lbfgs(
            |x, g| {
                let v = obj.value_and_grad(x, g).unwrap_or(f64::INFINITY);
                let t = trust_region_flat(x, eps, Some(&mut tgrad));
                let shifted = lambda + mu * (tau - t);
                if shifted > 0.0 {
                    for (gi, ti) in g.iter_mut().zip(&tgrad) {
                        *gi -= shifted * ti;
                    }
                    v + (shifted * shifted - lambda * lambda) / (2.0 * mu)
                } else {
                    v - lambda * lambda / (2.0 * mu)
                }
            },
            &theta,
            scfg.max_iters,
            scfg.grad_tol,
            scfg.history,
        );
        iters += m.iters;
        theta = m.x;
        let t = trust_region_flat(&theta, eps, None);
        let violation = (tau - t).max(0.0);
        lambda = (lambda + mu * (tau - t)).max(0.0);
        if violation <= scfg.constraint_tol {
            break;
        }
        if violation > 0.25 * prev_violation {
            mu *= scfg.penalty_growth;
        }
        prev_violation = violation;
    }
    (repair(&theta, tau, scfg.constraint_tol, eps), iters)
}

/// Header and rows of a parameter file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub params: CalibrationParams,
    pub tau: f64,
    pub lambda_inv: f64,
    pub objective: f64,
    pub accuracy: f64,
}

impl From<&FitResult> for ParamFile {
    fn from(r: &FitResult) -> Self {
        Self {
            params: r.params.clone(),
            tau: r.tau,
            lambda_inv: r.lambda_inv,
            objective: r.objective_value,
            accuracy: r.in_sample_accuracy,
        }
    }
}

impl ParamFile {
    /// `key=value` header lines for `i`, `tau`, `lambda_inv`, `objective` and
    /// `accuracy`, then one tab-separated `c b_c w_c` row per class.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "i={}", self.params.context_size())?;
        writeln!(w, "tau={:?}", self.tau)?;
        writeln!(w, "lambda_inv={:?}", self.lambda_inv)?;
        writeln!(w, "objective={:?}", self.objective)?;
        writeln!(w, "accuracy={:?}", self.accuracy)?;
        for (c, p) in self.params.classes().iter().enumerate() {
            writeln!(w, "{}\t{:?}\t{:?}", c + 1, p.bias, p.scale)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, source: &str) -> Result<Self> {
        let mut header = std::collections::BTreeMap::new();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| CalibError::parse(source, lineno + 1, m);
            if let Some((k, v)) = line.split_once('=') {
                let v: f64 = v.trim().parse().map_err(|_| err(format!("bad value for {k}")))?;
                if header.insert(k.trim().to_string(), v).is_some() {
                    return Err(err(format!("duplicate key {k}")));
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected `c<TAB>b<TAB>w`".into()));
            }
            let c = f[0].parse().map_err(|_| err(format!("bad class {:?}", f[0])))?;
            let b = f[1].parse().map_err(|_| err(format!("bad bias {:?}", f[1])))?;
            let w = f[2].parse().map_err(|_| err(format!("bad scale {:?}", f[2])))?;
            rows.push((c, b, w));
        }
        let get = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| CalibError::parse(source, 0, format!("missing header {k}")))
        };
        for (j, (c, _, _)) in rows.iter().enumerate() {
            if *c != j + 1 {
                return Err(CalibError::parse(source, 0, "class rows must be 1..n-1 in order"));
            }
        }
        let i = get("i")?;
        if i < 1.0 || i.fract() != 0.0 {
            return Err(CalibError::parse(source, 0, "i must be a positive integer"));
        }
        let classes = rows
            .iter()
            .map(|&(_, b, w)| crate::domain::ClassParams::new(b, w))
            .collect();
        Ok(Self {
            params: CalibrationParams::new(classes, i as usize)?,
            tau: get("tau")?,
            lambda_inv: get("lambda_inv")?,
            objective: get("objective")?,
            accuracy: get("accuracy")?,
        })
    }
}
