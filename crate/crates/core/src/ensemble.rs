//! One calibrator per context size, combined by two-level averaging.
//!
//! At prediction time each size `i` scores the query under `m_i` sampled
//! `i`-subsets of the demonstrations, calibrates each distribution with that
//! size's parameters and averages them; the per-size means are then averaged
//! uniformly across sizes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::derive_seed;
use crate::domain::{calibrated_dist, logits_from_probs, predict_label, Context, Exemplar, LabelSpace, ProbDist};
use crate::error::{CalibError, Result};
use crate::objective::ObjectiveConfig;
use crate::solver::{fit, FitResult, ParamFile, SolverConfig};
use crate::surrogate::{class_coverage, count_ordered_subsets, generate_surrogate, sample_ordered_subsets, ContextBudget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub i_min: usize,
    /// Defaults to `min(5, k − 1)`.
    pub i_max: Option<usize>,
    /// Fixed `m_i` for every size, overriding `min(⌊|𝒯_i|/2⌋, max_samples)`.
    pub samples_per_size: Option<usize>,
    pub max_samples: usize,
    pub budget: ContextBudget,
    pub seed: u64,
    /// Draw fresh prediction contexts per query instead of once per model.
    pub resample_per_query: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            i_min: 1,
            i_max: None,
            samples_per_size: None,
            max_samples: 24,
            budget: ContextBudget::default(),
            seed: 0,
            resample_per_query: false,
        }
    }
}

impl EnsembleConfig {
    /// Inclusive size range for `k` demonstrations.
    pub fn sizes(&self, k: usize) -> Result<(usize, usize)> {
        if k < 2 {
            return Err(CalibError::InvalidArgument(format!("need k ≥ 2 demonstrations, got {k}")));
        }
        let i_max = self.i_max.unwrap_or_else(|| 5.min(k - 1));
        if self.i_min < 1 || self.i_min > i_max || i_max >= k {
            return Err(CalibError::Config(format!(
                "size range [{}, {i_max}] must satisfy 1 ≤ i_min ≤ i_max < k = {k}",
                self.i_min
            )));
        }
        if self.samples_per_size == Some(0) || self.max_samples == 0 {
            return Err(CalibError::Config("m_i must be ≥ 1".into()));
        }
        Ok((self.i_min, i_max))
    }

    fn samples_for(&self, k: usize, i: usize, records: usize) -> usize {
        let m = self
            .samples_per_size
            .unwrap_or_else(|| (records / 2).min(self.max_samples))
            .max(1);
        (m as u128).min(count_ordered_subsets(k, i)) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeModel {
    pub fit: FitResult,
    /// `m_i`.
    pub samples: usize,
    /// Prediction contexts drawn at training time; a prefix-stable sample.
    pub contexts: Vec<Context>,
}

impl SizeModel {
    pub fn context_size(&self) -> usize {
        self.fit.params.context_size()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSize {
    pub context_size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    shots: Vec<Exemplar>,
    label_space: LabelSpace,
    members: Vec<SizeModel>,
    skipped: Vec<SkippedSize>,
    seed: u64,
    resample_per_query: bool,
}

fn context_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 0x5EED_0000 + i as u64)
}

/// Trains every size in the configured range. Sizes whose surrogate labels
/// miss a class are skipped and recorded.
pub fn train_ensemble<B: Backend + ?Sized>(
    shots: &[Exemplar],
    label_space: &LabelSpace,
    backend: &B,
    ecfg: &EnsembleConfig,
    ocfg: &ObjectiveConfig,
    scfg: &SolverConfig,
) -> Result<EnsembleModel> {
    let k = shots.len();
    let (i_min, i_max) = ecfg.sizes(k)?;
    ocfg.validate()?;
    scfg.validate()?;
    let n = label_space.len();
    if let Some(bad) = shots.iter().find(|s| s.label >= n) {
        return Err(CalibError::ClassOutOfRange { label: bad.label, n });
    }
    let mut members = Vec::new();
    let mut skipped = Vec::new();
    for i in i_min..=i_max {
        let ds = generate_surrogate(shots, i, backend, ecfg.budget, derive_seed(ecfg.seed, i as u64))?;
        if ds.num_classes() != n {
            return Err(CalibError::Dimension { expected: n, got: ds.num_classes() });
        }
        let coverage = class_coverage(&ds, n);
        if !coverage.is_complete() {
            skipped.push(SkippedSize {
                context_size: i,
                reason: format!("surrogate labels miss classes {:?}", coverage.missing()),
            });
            continue;
        }
        let scfg_i = SolverConfig { seed: derive_seed(scfg.seed, i as u64), ..*scfg };
        let fit = fit(&ds, ocfg, &scfg_i)?;
        let samples = ecfg.samples_for(k, i, ds.len());
        let contexts = sample_ordered_subsets(k, i, samples, context_seed(ecfg.seed, i));
        members.push(SizeModel { fit, samples, contexts });
    }
    if members.is_empty() {
        let reasons: Vec<String> = skipped.iter().map(|s| format!("i={}: {}", s.context_size, s.reason)).collect();
        return Err(CalibError::UnsupportedTask(format!(
            "every context size was skipped ({})",
            reasons.join("; ")
        )));
    }
    Ok(EnsembleModel {
        shots: shots.to_vec(),
        label_space: label_space.clone(),
        members,
        skipped,
        seed: ecfg.seed,
        resample_per_query: ecfg.resample_per_query,
    })
}

impl EnsembleModel {
    /// Assembles a model from already fitted sizes.
    pub fn from_parts(
        shots: Vec<Exemplar>,
        label_space: LabelSpace,
        members: Vec<SizeModel>,
        skipped: Vec<SkippedSize>,
        seed: u64,
        resample_per_query: bool,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(CalibError::InvalidArgument("ensemble needs at least one size".into()));
        }
        let k = shots.len();
        let mut seen = std::collections::BTreeSet::new();
        for m in &members {
            let i = m.context_size();
            if !seen.insert(i) {
                return Err(CalibError::InvalidArgument(format!("duplicate context size {i}")));
            }
            if i >= k {
                return Err(CalibError::InvalidArgument(format!("context size {i} needs more than {k} shots")));
            }
            if m.fit.params.num_classes() != label_space.len() {
                return Err(CalibError::Dimension { expected: label_space.len(), got: m.fit.params.num_classes() });
            }
            if m.samples == 0 || m.contexts.iter().any(|c| c.size() != i || c.members().iter().any(|&j| j >= k)) {
                return Err(CalibError::InvalidArgument(format!("bad prediction contexts for size {i}")));
            }
        }
        Ok(Self { shots, label_space, members, skipped, seed, resample_per_query })
    }

    pub fn shots(&self) -> &[Exemplar] {
        &self.shots
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn members(&self) -> &[SizeModel] {
        &self.members
    }

    pub fn skipped(&self) -> &[SkippedSize] {
        &self.skipped
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(SizeModel::context_size).collect()
    }

    /// Keeps only the listed sizes.
    pub fn restrict_sizes(&self, sizes: &[usize]) -> Result<Self> {
        let members: Vec<SizeModel> = self.members.iter().filter(|m| sizes.contains(&m.context_size())).cloned().collect();
        Self::from_parts(self.shots.clone(), self.label_space.clone(), members, self.skipped.clone(), self.seed, self.resample_per_query)
    }

    /// Caps every size at `m` prediction contexts. Because the stored sample is
    /// prefix-stable this equals training with `samples_per_size = m`.
    pub fn with_samples(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(CalibError::InvalidArgument("m_i must be ≥ 1".into()));
        }
        let k = self.shots.len();
        let members = self
            .members
            .iter()
            .map(|sm| {
                let i = sm.context_size();
                let samples = (m as u128).min(count_ordered_subsets(k, i)) as usize;
                let contexts = if samples <= sm.contexts.len() {
                    sm.contexts[..samples].to_vec()
                } else {
                    sample_ordered_subsets(k, i, samples, context_seed(self.seed, i))
                };
                SizeModel { fit: sm.fit.clone(), samples, contexts }
            })
            .collect();
        Self::from_parts(self.shots.clone(), self.label_space.clone(), members, self.skipped.clone(), self.seed, self.resample_per_query)
    }

    fn contexts_for(&self, member: &SizeModel, query: &str) -> Vec<Context> {
        if !self.resample_per_query {
            return member.contexts.clone();
        }
        let i = member.context_size();
        let tag = crate::hash_str(query);
        sample_ordered_subsets(self.shots.len(), i, member.samples, derive_seed(context_seed(self.seed, i), tag))
    }

    /// Per-size intra-size means, in size order.
    pub fn predict_per_size<B: Backend + ?Sized>(&self, query: &str, backend: &B) -> Result<Vec<ProbDist>> {
        let n = self.label_space.len();
        self.members
            .iter()
            .map(|m| {
                let mut dists = Vec::with_capacity(m.samples);
                for c in self.contexts_for(m, query) {
                    let p = backend.infer(query, &c.resolve(&self.shots))?;
                    if p.len() != n {
                        return Err(CalibError::Dimension { expected: n, got: p.len() });
                    }
                    dists.push(calibrated_dist(&logits_from_probs(&p), &m.fit.params)?);
                }
                ProbDist::mean(&dists)
            })
            .collect()
    }

    /// Two-level ensemble prediction.
    pub fn predict<B: Backend + ?Sized>(&self, query: &str, backend: &B) -> Result<ProbDist> {
        ProbDist::mean(&self.predict_per_size(query, backend)?)
    }

    pub fn predict_label<B: Backend + ?Sized>(&self, query: &str, backend: &B) -> Result<usize> {
        Ok(predict_label(&self.predict(query, backend)?))
    }

    /// [`predict`](Self::predict) over many queries, parallel up to the
    /// backend's concurrency.
    pub fn predict_batch<B: Backend + ?Sized>(&self, queries: &[String], backend: &B) -> Result<Vec<ProbDist>> {
        crate::par::try_map(queries, backend.max_concurrency(), |q| self.predict(q, backend))
    }

    /// Writes `manifest.json`, `shots.jsonl` and one `params_i{i}.txt` per size.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            k: self.shots.len(),
            labels: self.label_space.verbalizers().to_vec(),
            seed: self.seed,
            resample_per_query: self.resample_per_query,
            sizes: self
                .members
                .iter()
                .map(|m| SizeEntry {
                    i: m.context_size(),
                    samples: m.samples,
                    contexts: m.contexts.iter().map(Context::to_string).collect(),
                    constraint_value: m.fit.constraint_value,
                    feasible: m.fit.feasible,
                    iterations: m.fit.iterations,
                    base_accuracy: m.fit.base_accuracy,
                })
                .collect(),
            skipped: self.skipped.clone(),
        };
        let mut w = BufWriter::new(fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| CalibError::Io(e.into()))?;
        writeln!(w)?;
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("shots.jsonl"))?);
        for s in &self.shots {
            serde_json::to_writer(&mut w, s).map_err(|e| CalibError::Io(e.into()))?;
            writeln!(w)?;
        }
        w.flush()?;
        for m in &self.members {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("params_i{}.txt", m.context_size())))?);
            ParamFile::from(&m.fit).write_to(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_reader(BufReader::new(fs::File::open(&manifest_path)?))
            .map_err(|e| CalibError::parse(manifest_path.display().to_string(), e.line(), e.to_string()))?;
        let shots_path = dir.join("shots.jsonl");
        let mut shots = Vec::new();
        for (j, line) in BufReader::new(fs::File::open(&shots_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            shots.push(
                serde_json::from_str::<Exemplar>(&line)
                    .map_err(|e| CalibError::parse(shots_path.display().to_string(), j + 1, e.to_string()))?,
            );
        }
        if shots.len() != manifest.k {
            return Err(CalibError::parse(shots_path.display().to_string(), 0, format!("expected {} shots", manifest.k)));
        }
        let label_space = LabelSpace::new(manifest.labels.clone())?;
        let mut members = Vec::new();
        for e in &manifest.sizes {
            let path = dir.join(format!("params_i{}.txt", e.i));
            let pf = ParamFile::read_from(BufReader::new(fs::File::open(&path)?), &path.display().to_string())?;
            if pf.params.context_size() != e.i {
                return Err(CalibError::parse(path.display().to_string(), 1, "size disagrees with manifest"));
            }
            let contexts = e.contexts.iter().map(|c| Context::parse_id(c)).collect::<Result<Vec<_>>>()?;
            members.push(SizeModel {
                fit: FitResult {
                    params: pf.params,
                    objective_value: pf.objective,
                    constraint_value: e.constraint_value,
                    tau: pf.tau,
                    lambda_inv: pf.lambda_inv,
                    feasible: e.feasible,
                    iterations: e.iterations,
                    in_sample_accuracy: pf.accuracy,
                    base_accuracy: e.base_accuracy,
                },
                samples: e.samples,
                contexts,
            });
        }
        Self::from_parts(shots, label_space, members, manifest.skipped, manifest.seed, manifest.resample_per_query)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    k: usize,
    labels: Vec<String>,
    seed: u64,
    resample_per_query: bool,
    sizes: Vec<SizeEntry>,
    skipped: Vec<SkippedSize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SizeEntry {
    i: usize,
    samples: usize,
    contexts: Vec<String>,
    constraint_value: f64,
    feasible: bool,
    iterations: usize,
    base_accuracy: f64,
}
