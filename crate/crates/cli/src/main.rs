use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use affinecal::backend::{simulate_task, Backend, HttpBackend, MockBackend, PromptTemplate};
use affinecal::ensemble::{train_ensemble, EnsembleModel};
use affinecal::harness::{
    load_dataset, read_report_csv, render_summary_table, run_experiment, sample_shots, summarize, write_dataset,
    BackendKind, Config, DataFormat, Dataset, Method,
};
use affinecal::solver::{fit, ParamFile, SolverMode};
use affinecal::surrogate::{generate_surrogate, SurrogateDataset};
use affinecal::{predict_label, Exemplar};

#[derive(Parser)]
#[command(name = "affinecal", version, about = "Supervised affine calibration for in-context classifiers")]
struct Cli {
    /// TOML config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed (and the experiment seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file (jsonl or csv); defaults to the config's `[dataset]`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Builtin template name used to read labels and render prompts.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a labeled task from the mock model and write it as jsonl.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        items: Option<usize>,
    },
    /// Sample k demonstrations and write the surrogate records for one size.
    GenSurrogate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Context size i.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one size from a surrogate file, or a full ensemble from data.
    Fit {
        #[arg(long, conflicts_with_all = ["data", "model_dir"])]
        surrogate: Option<PathBuf>,
        /// Parameter file written for `--surrogate`.
        #[arg(long, requires = "surrogate")]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Ensemble directory written when fitting from data.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Pin every scale at 1 and learn biases only.
        #[arg(long)]
        bias_only: bool,
        /// Trust-region threshold; derived from accuracy when absent.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
    },
    /// Ensemble predictions for query texts or a dataset file.
    Predict {
        #[arg(long)]
        model_dir: PathBuf,
        /// Dataset whose texts are scored.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Single query text (repeatable).
        #[arg(long, allow_hyphen_values = true)]
        text: Vec<String>,
        /// jsonl output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the seeded evaluation protocol and write a report.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of base,cc,dc,bc,sc,sc_bias_only.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize a report CSV as mean ± sd per method.
    Report {
        csv: PathBuf,
    },
}

/// Prompt layout used when nothing else is configured.
const DEFAULT_PATTERN: &str = "input: <x>\\noutput: <y>";

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(b) = cli.backend {
        cfg.backend = match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Http => BackendKind::Http,
        };
    }
    if let Some(s) = cli.seed {
        cfg.experiment.seeds = vec![s];
        cfg.simulation.seed = s;
        cfg.ensemble.seed = s;
        cfg.solver.seed = s;
        cfg.objective.pair_seed = s;
        cfg.baselines.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn template_for(cfg: &Config, name: Option<&str>) -> Result<PromptTemplate> {
    match name {
        Some(n) => PromptTemplate::builtin(n).with_context(|| format!("unknown builtin template {n:?}")),
        None => Ok(cfg.mock_template()?),
    }
}

fn load_data(cfg: &Config, args: &DataArgs) -> Result<Dataset> {
    match (&args.data, &cfg.dataset) {
        (Some(path), _) => {
            let template = match (&args.template, &cfg.dataset) {
                (None, Some(d)) if d.template.is_some() || d.pattern.is_some() => d.prompt_template()?,
                _ => template_for(cfg, args.template.as_deref())?,
            };
            let format = DataFormat::from_path(path).with_context(|| format!("cannot infer format of {}", path.display()))?;
            let name = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
            Ok(load_dataset(path, format, &name, template)?)
        }
        (None, Some(d)) => Ok(d.load()?),
        (None, None) => bail!("no dataset: pass --data or configure [dataset]"),
    }
}

fn make_backend(cfg: &Config, template: &PromptTemplate) -> Result<Box<dyn Backend>> {
    Ok(match cfg.backend {
        BackendKind::Mock => {
            let mock = MockBackend::new(cfg.mock.clone())?;
            if cfg.mock.num_classes() != template.label_space.len() {
                bail!(
                    "mock has {} classes but the label space has {}",
                    cfg.mock.num_classes(),
                    template.label_space.len()
                );
            }
            Box::new(mock)
        }
        BackendKind::Http => {
            let http = cfg.http.clone().context("backend = http needs an [http] table")?;
            Box::new(HttpBackend::new(http, template.clone())?)
        }
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate { out, items } => {
            let mut sim = cfg.simulation.clone();
            if let Some(n) = items {
                sim.num_items = *n;
            }
            let template = cfg.mock_template()?;
            let task = simulate_task(&cfg.mock, &sim)?;
            let mut w = create(out)?;
            write_dataset(&mut w, &task, &template.label_space)?;
            w.flush()?;
            eprintln!("wrote {} items to {}", task.len(), out.display());
        }
        Command::GenSurrogate { data, k, size, out } => {
            let ds = load_data(&cfg, data)?;
            let backend = make_backend(&cfg, &ds.template)?;
            let seed = cfg.ensemble.seed;
            let (shots, _) = sample_shots(&ds, k.unwrap_or(cfg.experiment.k), seed)?;
            let sur = generate_surrogate(&shots, *size, &backend, cfg.ensemble.budget, seed)?;
            let mut w = create(out)?;
            sur.write_to(&mut w)?;
            w.flush()?;
            eprintln!("wrote {} records ({} contexts) to {}", sur.len(), sur.num_contexts(), out.display());
        }
        Command::Fit { surrogate, out, data, k, model_dir, bias_only, tau } => {
            let mut ocfg = cfg.objective;
            if tau.is_some() {
                ocfg.tau = *tau;
            }
            let mut scfg = cfg.solver;
            if *bias_only {
                scfg.mode = SolverMode::BiasOnly;
            }
            if let Some(path) = surrogate {
                let sur = SurrogateDataset::read_from(BufReader::new(File::open(path)?), &path.display().to_string())?;
                let r = fit(&sur, &ocfg, &scfg)?;
                let pf = ParamFile::from(&r);
                match out {
                    Some(o) => {
                        let mut w = create(o)?;
                        pf.write_to(&mut w)?;
                        w.flush()?;
                    }
                    None => pf.write_to(std::io::stdout().lock())?,
                }
                eprintln!(
                    "i = {}: objective {:.6}, tau {:.6}, constraint {:.6}, accuracy {:.4} -> {:.4}",
                    sur.context_size(),
                    r.objective_value,
                    r.tau,
                    r.constraint_value,
                    r.base_accuracy,
                    r.in_sample_accuracy
                );
            } else {
                let dir = model_dir.as_ref().context("pass --surrogate, or --model-dir to fit an ensemble")?;
                let ds = load_data(&cfg, data)?;
                let backend = make_backend(&cfg, &ds.template)?;
                let (shots, _) = sample_shots(&ds, k.unwrap_or(cfg.experiment.k), cfg.ensemble.seed)?;
                let model = train_ensemble(&shots, &ds.label_space, &backend, &cfg.ensemble, &ocfg, &scfg)?;
                model.save(dir)?;
                for m in model.members() {
                    eprintln!(
                        "i = {}: m_i = {}, tau {:.6}, accuracy {:.4} -> {:.4}",
                        m.context_size(),
                        m.samples,
                        m.fit.tau,
                        m.fit.base_accuracy,
                        m.fit.in_sample_accuracy
                    );
                }
                for s in model.skipped() {
                    eprintln!("i = {}: skipped ({})", s.context_size, s.reason);
                }
            }
        }
        Command::Predict { model_dir, data, text, out } => {
            let model = EnsembleModel::load(model_dir)?;
            let labels = model.label_space().clone();
            let template = match cfg.dataset.as_ref() {
                Some(d) if d.template.is_some() || d.pattern.is_some() => d.prompt_template()?,
                _ => PromptTemplate::from_pattern(DEFAULT_PATTERN, labels.clone())?,
            };
            let mut queries: Vec<String> = text.clone();
            if let Some(path) = data {
                let format = DataFormat::from_path(path).with_context(|| format!("cannot infer format of {}", path.display()))?;
                let ds = load_dataset(path, format, "predict", template.clone())?;
                queries.extend(ds.items.into_iter().map(|e: Exemplar| e.text));
            }
            if queries.is_empty() {
                bail!("nothing to predict: pass --text or --data");
            }
            let backend = make_backend(&cfg, &template)?;
            let probs = model.predict_batch(&queries, &backend)?;
            let mut w: Box<dyn Write> = match out {
                Some(o) => Box::new(create(o)?),
                None => Box::new(std::io::stdout().lock()),
            };
            for (q, p) in queries.iter().zip(&probs) {
                let label = labels.verbalizer(predict_label(p)).expect("label in range");
                writeln!(w, "{}", serde_json::json!({"text": q, "label": label, "probs": p.as_slice()}))?;
            }
            w.flush()?;
        }
        Command::Evaluate { data, methods, k, out_dir } => {
            let ds = load_data(&cfg, data)?;
            let backend = make_backend(&cfg, &ds.template)?;
            let mut spec = cfg.experiment_spec();
            if !methods.is_empty() {
                spec.methods = methods.clone();
            }
            if let Some(k) = k {
                spec.k = *k;
            }
            let report = run_experiment(&ds, &backend, &spec)?;
            fs::create_dir_all(out_dir)?;
            let mut w = create(&out_dir.join("report.csv"))?;
            report.write_csv(&mut w)?;
            w.flush()?;
            let mut resolved = cfg.clone();
            resolved.experiment.methods = spec.methods.clone();
            resolved.experiment.k = spec.k;
            let mut m = create(&out_dir.join("manifest.toml"))?;
            writeln!(m, "# dataset: {} ({} items)", ds.name, ds.items.len())?;
            m.write_all(resolved.to_toml().as_bytes())?;
            m.flush()?;
            let summary = report.render_summary();
            fs::write(out_dir.join("summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Report { csv } => {
            let rows = read_report_csv(BufReader::new(File::open(csv)?), &csv.display().to_string())?;
            if rows.is_empty() {
                bail!("{} has no rows", csv.display());
            }
            print!("{}", render_summary_table(&summarize(&rows)));
        }
    }
    Ok(())
}
