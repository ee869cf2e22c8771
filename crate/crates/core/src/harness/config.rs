use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{load_dataset, DataFormat, Dataset};
use super::experiment::{ExperimentSpec, Method, Timing};
use crate::backend::{load_template_file, BackendConfig, MockModelSpec, PromptTemplate, SimulationConfig};
use crate::baselines::BaselineConfig;
use crate::domain::LabelSpace;
use crate::ensemble::EnsembleConfig;
use crate::error::{CalibError, Result};
use crate::objective::ObjectiveConfig;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

/// Top-level settings of an experiment; module configs live in their own
/// tables of [`Config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    pub k: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    pub fixed_test_set: bool,
    pub timing: Timing,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let d = ExperimentSpec::default();
        Self {
            k: d.k,
            methods: d.methods,
            seeds: d.seeds,
            test_size: d.test_size,
            fixed_test_set: d.fixed_test_set,
            timing: d.timing,
        }
    }
}

/// Where a dataset lives and how to template it. The template is a builtin
/// name, a named entry of a template file, or an inline pattern with labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<DataFormat>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub template_file: Option<PathBuf>,
    #[serde(default)]
    pub pattern: Option<String>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

impl DatasetConfig {
    pub fn prompt_template(&self) -> Result<PromptTemplate> {
        match (&self.template, &self.template_file, &self.pattern, &self.labels) {
            (Some(name), Some(file), None, None) => load_template_file(file)?
                .remove(name)
                .ok_or_else(|| CalibError::Config(format!("template {name:?} not in {}", file.display()))),
            (Some(name), None, None, None) => PromptTemplate::builtin(name)
                .ok_or_else(|| CalibError::Config(format!("unknown builtin template {name:?}"))),
            (None, None, Some(pattern), Some(labels)) => PromptTemplate::from_pattern(pattern, LabelSpace::new(labels.clone())?),
            _ => Err(CalibError::Config(
                "dataset needs `template` (optionally with `template_file`) or `pattern` with `labels`".into(),
            )),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let format = match self.format {
            Some(f) => f,
            None => DataFormat::from_path(&self.path)
                .ok_or_else(|| CalibError::Config(format!("cannot infer format of {}", self.path.display())))?,
        };
        let name = self.name.clone().or_else(|| self.template.clone()).unwrap_or_else(|| {
            self.path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
        });
        load_dataset(&self.path, format, &name, self.prompt_template()?)
    }
}

/// Everything one run needs, as a TOML document. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub experiment: ExperimentSettings,
    pub backend: BackendKind,
    pub dataset: Option<DatasetConfig>,
    pub mock: MockModelSpec,
    pub simulation: SimulationConfig,
    pub http: Option<BackendConfig>,
    pub ensemble: EnsembleConfig,
    pub objective: ObjectiveConfig,
    pub solver: SolverConfig,
    pub baselines: BaselineConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            experiment: ExperimentSettings::default(),
            backend: BackendKind::Mock,
            dataset: None,
            mock: MockModelSpec::default(),
            simulation: SimulationConfig::default(),
            http: None,
            ensemble: EnsembleConfig::default(),
            objective: ObjectiveConfig::default(),
            solver: SolverConfig::default(),
            baselines: BaselineConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(src: &str, origin: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(src).map_err(|e| {
            let line = e.span().map_or(0, |s| src[..s.start].matches('\n').count() + 1);
            CalibError::parse(origin, line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.mock.validate()?;
        self.experiment_spec().validate()?;
        if self.backend == BackendKind::Http && self.http.is_none() {
            return Err(CalibError::Config("backend = \"http\" needs an [http] table".into()));
        }
        Ok(())
    }

    pub fn experiment_spec(&self) -> ExperimentSpec {
        let e = &self.experiment;
        ExperimentSpec {
            k: e.k,
            methods: e.methods.clone(),
            seeds: e.seeds.clone(),
            test_size: e.test_size,
            fixed_test_set: e.fixed_test_set,
            timing: e.timing,
            ensemble: self.ensemble.clone(),
            objective: self.objective,
            solver: self.solver,
            baselines: self.baselines.clone(),
        }
    }

    /// The full resolved configuration, for report manifests.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    /// Template for simulated tasks: the dataset's if configured, otherwise a
    /// generic one sized to the mock.
    pub fn mock_template(&self) -> Result<PromptTemplate> {
        if let Some(d) = &self.dataset {
            if d.template.is_some() || d.pattern.is_some() {
                return d.prompt_template();
            }
        }
        let n = self.mock.num_classes();
        let labels: Vec<String> = if n == 2 {
            vec!["negative".into(), "positive".into()]
        } else {
            (0..n).map(|c| format!("class{c}")).collect()
        };
        PromptTemplate::from_pattern("input: <x>\\noutput: <y>", LabelSpace::new(labels)?)
    }
}
