use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{split_for_seed, Dataset};
use super::metrics::{mean_sd, ClassMetrics, ConfusionMatrix};
use crate::backend::{Backend, CachingBackend};
use crate::baselines::{bc_reference, cc_reference, dc_reference, normalize_by_reference, BaselineConfig};
use crate::derive_seed;
use crate::domain::{predict_label, Exemplar, ProbDist};
use crate::ensemble::{train_ensemble, EnsembleConfig, SkippedSize};
use crate::error::{CalibError, Result};
use crate::objective::ObjectiveConfig;
use crate::solver::{SolverConfig, SolverMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Cc,
    Dc,
    Bc,
    Sc,
    ScBiasOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Base, Method::Cc, Method::Dc, Method::Bc, Method::Sc, Method::ScBiasOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Cc => "cc",
            Method::Dc => "dc",
            Method::Bc => "bc",
            Method::Sc => "sc",
            Method::ScBiasOnly => "sc_bias_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CalibError::Config(format!("unknown method {s:?}")))
    }
}

/// `off` writes zero timings so reports are reproducible byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Measured,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub k: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    pub fixed_test_set: bool,
    pub timing: Timing,
    pub ensemble: EnsembleConfig,
    pub objective: ObjectiveConfig,
    pub solver: SolverConfig,
    pub baselines: BaselineConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            k: 8,
            methods: vec![Method::Base, Method::Cc, Method::Dc, Method::Bc, Method::Sc],
            seeds: (0..5).collect(),
            test_size: 256,
            fixed_test_set: false,
            timing: Timing::Measured,
            ensemble: EnsembleConfig::default(),
            objective: ObjectiveConfig::default(),
            solver: SolverConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.test_size == 0 {
            return Err(CalibError::Config("k and test_size must be ≥ 1".into()));
        }
        if self.seeds.is_empty() || self.methods.is_empty() {
            return Err(CalibError::Config("need at least one seed and one method".into()));
        }
        self.objective.validate()?;
        self.solver.validate()?;
        self.baselines.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub train_seconds: f64,
    pub infer_seconds_per_256: f64,
    pub skipped_sizes: Vec<SkippedSize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub k: usize,
    pub labels: Vec<String>,
    pub runs: Vec<MethodRun>,
    pub summary: Vec<MethodSummary>,
}

impl MetricsReport {
    pub fn run(&self, method: Method, seed: u64) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method && r.seed == seed)
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// One row per (seed, method).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| CalibError::Io(std::io::Error::other(e));
        out.write_record(["method", "seed", "accuracy", "macro_f1", "train_seconds", "infer_seconds_per_256"])
            .map_err(io)?;
        for r in &self.runs {
            out.write_record([
                r.method.name().to_string(),
                r.seed.to_string(),
                r.accuracy.to_string(),
                r.macro_f1.to_string(),
                r.train_seconds.to_string(),
                r.infer_seconds_per_256.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean and sd per method, in percent.
    pub fn render_summary(&self) -> String {
        let seeds: std::collections::BTreeSet<u64> = self.runs.iter().map(|r| r.seed).collect();
        format!("{} (k = {}, {} seeds)\n{}", self.dataset, self.k, seeds.len(), render_summary_table(&self.summary))
    }
}

/// One row of a report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub train_seconds: f64,
    pub infer_seconds_per_256: f64,
}

pub fn read_report_csv<R: std::io::Read>(r: R, source: &str) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ReportRow>() {
        rows.push(rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            CalibError::parse(source, line, e.to_string())
        })?);
    }
    Ok(rows)
}

/// Mean and sd per method, in first-appearance order.
pub fn summarize(rows: &[ReportRow]) -> Vec<MethodSummary> {
    let mut order: Vec<Method> = Vec::new();
    for r in rows {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.accuracy).collect();
            let f1: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.macro_f1).collect();
            let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
            let (macro_f1_mean, macro_f1_sd) = mean_sd(&f1);
            MethodSummary { method, accuracy_mean, accuracy_sd, macro_f1_mean, macro_f1_sd }
        })
        .collect()
}

/// Fixed-width table of mean ± sd in percent.
pub fn render_summary_table(summary: &[MethodSummary]) -> String {
    let mut s = format!("{:<14}{:>18}{:>18}\n", "method", "accuracy", "macro_f1");
    for m in summary {
        s.push_str(&format!(
            "{:<14}{:>18}{:>18}\n",
            m.method.name(),
            format!("{:.2} ± {:.2}", 100.0 * m.accuracy_mean, 100.0 * m.accuracy_sd),
            format!("{:.2} ± {:.2}", 100.0 * m.macro_f1_mean, 100.0 * m.macro_f1_sd),
        ));
    }
    s
}

struct Clock(Timing);

impl Clock {
    fn time<T>(&self, f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
        let start = Instant::now();
        let v = f()?;
        let secs = match self.0 {
            Timing::Measured => start.elapsed().as_secs_f64(),
            Timing::Off => 0.0,
        };
        Ok((v, secs))
    }
}

fn seeded(spec: &ExperimentSpec, seed: u64, mode: SolverMode) -> (EnsembleConfig, ObjectiveConfig, SolverConfig, BaselineConfig) {
    let ensemble = EnsembleConfig { seed: derive_seed(seed ^ spec.ensemble.seed, 1), ..spec.ensemble.clone() };
    let objective = ObjectiveConfig { pair_seed: derive_seed(seed ^ spec.objective.pair_seed, 2), ..spec.objective };
    let solver = SolverConfig { seed: derive_seed(seed ^ spec.solver.seed, 3), mode, ..spec.solver };
    let baselines = BaselineConfig { seed: derive_seed(seed ^ spec.baselines.seed, 4), ..spec.baselines.clone() };
    (ensemble, objective, solver, baselines)
}

/// Runs every (seed, method) pair. Inference results are cached across
/// methods within the run; all randomness is derived from the seeds.
pub fn run_experiment<B: Backend + ?Sized>(ds: &Dataset, backend: &B, spec: &ExperimentSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let n = ds.label_space.len();
    let cached = CachingBackend::new(backend);
    let clock = Clock(spec.timing);
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let (shots, test) = split_for_seed(ds, spec.k, spec.test_size, seed, spec.fixed_test_set)?;
        let ctx: Vec<&Exemplar> = shots.iter().collect();
        let queries: Vec<String> = test.iter().map(|e| e.text.clone()).collect();
        let workers = cached.max_concurrency();
        let base = |qs: &[String]| crate::par::try_map(qs, workers, |x| cached.infer(x, &ctx));
        let shift = |reference: &ProbDist| -> Result<Vec<ProbDist>> {
            base(&queries)?.iter().map(|p| normalize_by_reference(p, reference)).collect()
        };
        for &method in &spec.methods {
            let mode = if method == Method::ScBiasOnly { SolverMode::BiasOnly } else { SolverMode::Full };
            let (ecfg, ocfg, scfg, bcfg) = seeded(spec, seed, mode);
            let mut skipped_sizes = Vec::new();
            let (probs, train_seconds, infer_seconds) = match method {
                Method::Base => {
                    let (p, t) = clock.time(|| base(&queries))?;
                    (p, 0.0, t)
                }
                Method::Cc | Method::Dc | Method::Bc => {
                    let (reference, train) = clock.time(|| match method {
                        Method::Cc => cc_reference(&ctx, &cached, &bcfg),
                        Method::Dc => dc_reference(&ctx, &cached, &bcfg, &queries),
                        _ => bc_reference(&queries, &ctx, &cached, &bcfg),
                    })?;
                    let (p, t) = clock.time(|| shift(&reference))?;
                    (p, train, t)
                }
                Method::Sc | Method::ScBiasOnly => {
                    let (model, train) =
                        clock.time(|| train_ensemble(&shots, &ds.label_space, &cached, &ecfg, &ocfg, &scfg))?;
                    skipped_sizes = model.skipped().to_vec();
                    let (p, t) = clock.time(|| model.predict_batch(&queries, &cached))?;
                    (p, train, t)
                }
            };
            let mut confusion = ConfusionMatrix::new(n);
            for (p, e) in probs.iter().zip(&test) {
                confusion.add(e.label, predict_label(p));
            }
            runs.push(MethodRun {
                method,
                seed,
                accuracy: confusion.accuracy(),
                macro_f1: confusion.macro_f1(),
                per_class: confusion.per_class(),
                confusion,
                train_seconds,
                infer_seconds_per_256: infer_seconds * 256.0 / test.len().max(1) as f64,
                skipped_sizes,
            });
        }
    }
    let rows: Vec<ReportRow> = runs
        .iter()
        .map(|r| ReportRow {
            method: r.method,
            seed: r.seed,
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            train_seconds: r.train_seconds,
            infer_seconds_per_256: r.infer_seconds_per_256,
        })
        .collect();
    let summary = summarize(&rows);
    Ok(MetricsReport {
        dataset: ds.name.clone(),
        k: spec.k,
        labels: ds.label_space.verbalizers().to_vec(),
        runs,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{simulate_task, MockBackend, MockModelSpec, PromptTemplate, SimulationConfig};

    fn task(spec: &MockModelSpec, items: usize, seed: u64) -> Dataset {
        let template = PromptTemplate::builtin("sst2").unwrap();
        Dataset::new("mock", simulate_task(spec, &SimulationConfig::new(items, seed)).unwrap(), template).unwrap()
    }

    fn fast(methods: Vec<Method>) -> ExperimentSpec {
        ExperimentSpec {
            k: 4,
            methods,
            seeds: vec![0, 1],
            test_size: 64,
            timing: Timing::Off,
            solver: SolverConfig { restarts: 1, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("platt".parse::<Method>().is_err());
    }

    #[test]
    fn base_on_unbiased_mock_tracks_bayes() {
        let spec = MockModelSpec::binary(2.0, 0.0);
        let ds = task(&spec, 600, 1);
        let backend = MockBackend::new(spec.clone()).unwrap();
        let es = ExperimentSpec { seeds: vec![0], test_size: 256, ..fast(vec![Method::Base]) };
        let report = run_experiment(&ds, &backend, &es).unwrap();
        let (_, test) = split_for_seed(&ds, es.k, es.test_size, 0, false).unwrap();
        let bayes = test.iter().filter(|e| predict_label(&spec.true_posterior(&e.text)) == e.label).count() as f64 / test.len() as f64;
        let run = report.run(Method::Base, 0).unwrap();
        // no context effects: base and Bayes decisions coincide
        assert!((run.accuracy - bayes).abs() <= 0.03, "{} vs {bayes}", run.accuracy);
        assert_eq!(run.confusion.total(), 256);
        assert_eq!(run.accuracy, run.confusion.accuracy());
    }

    #[test]
    fn reports_are_deterministic() {
        let mut spec = MockModelSpec::binary(1.5, 0.0);
        spec.majority_bias = 1.0;
        spec.noise_sd = 0.2;
        let ds = task(&spec, 200, 2);
        let backend = MockBackend::new(spec).unwrap();
        let es = fast(vec![Method::Base, Method::Cc, Method::Dc, Method::Bc, Method::Sc, Method::ScBiasOnly]);
        let render = || {
            let mut buf = Vec::new();
            run_experiment(&ds, &backend, &es).unwrap().write_csv(&mut buf).unwrap();
            buf
        };
        let a = render();
        assert_eq!(a, render());
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("method,seed,accuracy,macro_f1,train_seconds,infer_seconds_per_256\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 6);
        let rows = read_report_csv(text.as_bytes(), "r").unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(summarize(&rows), run_experiment(&ds, &backend, &es).unwrap().summary);
    }

    #[test]
    fn unsupported_combo_surfaces_error() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.true_slopes = vec![1.0, 0.5, -0.5, -1.0];
        spec.true_intercepts = vec![0.0; 4];
        spec.conditional_scale = vec![1.0; 4];
        spec.marginal_shift = vec![0.0; 4];
        let template = PromptTemplate::builtin("sst5").unwrap();
        let ds = Dataset::new("five", simulate_task(&spec, &SimulationConfig::new(100, 0)).unwrap(), template).unwrap();
        let backend = MockBackend::new(spec).unwrap();
        let err = run_experiment(&ds, &backend, &fast(vec![Method::Sc])).unwrap_err();
        assert!(matches!(err, CalibError::UnsupportedTask(_)), "{err}");
    }

    #[test]
    fn summary_table_lists_methods() {
        let spec = MockModelSpec::binary(2.0, 0.0);
        let ds = task(&spec, 100, 3);
        let backend = MockBackend::new(spec).unwrap();
        let report = run_experiment(&ds, &backend, &fast(vec![Method::Base, Method::Bc])).unwrap();
        let table = report.render_summary();
        assert!(table.contains("base") && table.contains("bc"));
        assert_eq!(report.summary.len(), 2);
    }
}
