use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::PromptTemplate;
use crate::domain::{Exemplar, LabelSpace};
use crate::error::{CalibError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub label_space: LabelSpace,
    pub items: Vec<Exemplar>,
    pub template: PromptTemplate,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<Exemplar>, template: PromptTemplate) -> Result<Self> {
        let label_space = template.label_space.clone();
        if items.is_empty() {
            return Err(CalibError::InvalidArgument("dataset has no items".into()));
        }
        if let Some(bad) = items.iter().find(|e| e.label >= label_space.len()) {
            return Err(CalibError::ClassOutOfRange { label: bad.label, n: label_space.len() });
        }
        Ok(Self { name: name.into(), label_space, items, template })
    }

    pub fn texts(&self) -> Vec<String> {
        self.items.iter().map(|e| e.text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Some(Self::Jsonl),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

impl FromStr for DataFormat {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(CalibError::Config(format!("unknown data format {other:?}"))),
        }
    }
}

fn label_index(labels: &LabelSpace, raw: &str, path: &str, line: usize) -> Result<usize> {
    labels
        .index_of(raw)
        .ok_or_else(|| CalibError::parse(path, line, format!("unknown label {raw:?}")))
}

/// Reads `(text, label)` pairs; labels are verbalizer strings of the
/// template's label space. Item ids are 0-based positions.
pub fn load_dataset(path: impl AsRef<Path>, format: DataFormat, name: &str, template: PromptTemplate) -> Result<Dataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let labels = &template.label_space;
    let mut items = Vec::new();
    match format {
        DataFormat::Jsonl => {
            for (j, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(&line).map_err(|e| CalibError::parse(&shown, j + 1, e.to_string()))?;
                let text = v
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| CalibError::parse(&shown, j + 1, "missing string field \"text\""))?;
                let raw = v
                    .get("label")
                    .and_then(Value::as_str)
                    .ok_or_else(|| CalibError::parse(&shown, j + 1, "missing string field \"label\""))?;
                let label = label_index(labels, raw, &shown, j + 1)?;
                items.push(Exemplar::new(items.len().to_string(), text, label));
            }
        }
        DataFormat::Csv => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| CalibError::parse(&shown, 1, e.to_string()))?;
            let headers = rdr.headers().map_err(|e| CalibError::parse(&shown, 1, e.to_string()))?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CalibError::parse(&shown, 1, format!("missing column {name:?}")))
            };
            let (ti, li) = (col("text")?, col("label")?);
            for rec in rdr.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    CalibError::parse(&shown, line, e.to_string())
                })?;
                let line = rec.position().map_or(0, |p| p.line() as usize);
                let text = rec.get(ti).ok_or_else(|| CalibError::parse(&shown, line, "short row"))?;
                let raw = rec.get(li).ok_or_else(|| CalibError::parse(&shown, line, "short row"))?;
                let label = label_index(labels, raw, &shown, line)?;
                items.push(Exemplar::new(items.len().to_string(), text, label));
            }
        }
    }
    Dataset::new(name, items, template)
}

/// Writes items as jsonl with verbalizer labels.
pub fn write_dataset<W: Write>(mut w: W, items: &[Exemplar], labels: &LabelSpace) -> Result<()> {
    for e in items {
        let label = labels
            .verbalizer(e.label)
            .ok_or(CalibError::ClassOutOfRange { label: e.label, n: labels.len() })?;
        writeln!(w, "{}", serde_json::json!({"text": e.text, "label": label}))?;
    }
    Ok(())
}

/// First `m` positions of a seeded partial Fisher–Yates shuffle of `0..n`.
fn draw(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = m.min(n);
    for j in 0..m {
        let r = rng.random_range(j..n);
        order.swap(j, r);
    }
    order.truncate(m);
    order
}

fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &j in taken {
        mask[j] = true;
    }
    (0..n).filter(|&j| !mask[j]).collect()
}

/// Draws `k` demonstrations without replacement (in draw order); the rest,
/// in dataset order, form the test pool.
pub fn sample_shots(ds: &Dataset, k: usize, seed: u64) -> Result<(Vec<Exemplar>, Vec<Exemplar>)> {
    let n = ds.items.len();
    if n < k + 1 {
        return Err(CalibError::InvalidArgument(format!("need at least {} items for k = {k}, have {n}", k + 1)));
    }
    let shots = draw(n, k, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&j| ds.items[j].clone()).collect();
    Ok((pick(&shots), pick(&complement(n, &shots))))
}

/// Demonstrations and test set for one seed. The test set holds at most
/// `test_size` items (in dataset order) drawn uniformly from the items left
/// after the demonstrations. With `fixed_test_set` the test set is drawn
/// first with a seed-independent stream and the demonstrations come from
/// what remains.
pub fn split_for_seed(
    ds: &Dataset,
    k: usize,
    test_size: usize,
    seed: u64,
    fixed_test_set: bool,
) -> Result<(Vec<Exemplar>, Vec<Exemplar>)> {
    let n = ds.items.len();
    if n < k + 1 {
        return Err(CalibError::InvalidArgument(format!("need at least {} items for k = {k}, have {n}", k + 1)));
    }
    let pick = |idx: &[usize]| -> Vec<Exemplar> { idx.iter().map(|&j| ds.items[j].clone()).collect() };
    if fixed_test_set {
        let mut test = draw(n, test_size.min(n - k), FIXED_TEST_SEED);
        test.sort_unstable();
        let rest = complement(n, &test);
        let shots: Vec<usize> = draw(rest.len(), k, seed).into_iter().map(|j| rest[j]).collect();
        return Ok((pick(&shots), pick(&test)));
    }
    let shots = draw(n, k, seed);
    let pool = complement(n, &shots);
    let mut test: Vec<usize> = draw(pool.len(), test_size, crate::derive_seed(seed, 0x7E57))
        .into_iter()
        .map(|j| pool[j])
        .collect();
    test.sort_unstable();
    Ok((pick(&shots), pick(&test)))
}

const FIXED_TEST_SEED: u64 = 0x00F1_8ED0;
