//! Leave-subset-out surrogate data.
//!
//! For a demonstration set of `k` exemplars and a context size `i < k`, every
//! ordered sub-context of size `i` is used to score each exemplar it leaves
//! out. The resulting `(logits, label)` records form the training set for one
//! calibrator; the records also remember which context produced them so the
//! invariance penalty can compare the same query across contexts.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::domain::{logits_from_probs, Context, Exemplar, LogitVector};
use crate::error::{CalibError, Result};

/// Above this many ordered subsets the sampler stops materializing 𝒞(i).
const MATERIALIZE_LIMIT: u128 = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextBudget {
    pub max_contexts: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self { max_contexts: 360 }
    }
}

/// `k! / (k - i)!`, saturating.
pub fn count_ordered_subsets(k: usize, i: usize) -> u128 {
    if i > k {
        return 0;
    }
    ((k - i + 1)..=k).fold(1u128, |acc, f| acc.saturating_mul(f as u128))
}

/// All ordered `i`-subsets of `0..k` in lexicographic order.
pub fn all_ordered_subsets(k: usize, i: usize) -> Vec<Context> {
    fn rec(k: usize, i: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Context>) {
        if cur.len() == i {
            out.push(Context::new(cur.clone()).expect("distinct by construction"));
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(k, i, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    if i <= k {
        rec(k, i, &mut vec![false; k], &mut Vec::with_capacity(i), &mut out);
    }
    out
}

/// Draws `m` distinct ordered `i`-subsets of `0..k` uniformly without
/// replacement (clamped to the number available). Draws are sequential, so
/// for a fixed seed the result for `m = a` is a prefix of the result for
/// `m = b > a`.
pub fn sample_ordered_subsets(k: usize, i: usize, m: usize, seed: u64) -> Vec<Context> {
    let total = count_ordered_subsets(k, i);
    let m = (m as u128).min(total) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if total <= MATERIALIZE_LIMIT {
        let mut all = all_ordered_subsets(k, i);
        for j in 0..m {
            let r = rng.random_range(j..all.len());
            all.swap(j, r);
        }
        all.truncate(m);
        return all;
    }
    let mut seen = HashSet::with_capacity(m);
    let mut out = Vec::with_capacity(m);
    let mut pool: Vec<usize> = (0..k).collect();
    while out.len() < m {
        for j in 0..i {
            let r = rng.random_range(j..k);
            pool.swap(j, r);
        }
        let c = Context::new(pool[..i].to_vec()).expect("distinct by construction");
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

/// 𝒞(i) when it fits in the budget (lexicographic), otherwise a uniform
/// sample of `budget.max_contexts` of its members.
pub fn enumerate_contexts(
    num_shots: usize,
    i: usize,
    budget: ContextBudget,
    seed: u64,
) -> Result<Vec<Context>> {
    check_size(num_shots, i)?;
    if count_ordered_subsets(num_shots, i) <= budget.max_contexts as u128 {
        Ok(all_ordered_subsets(num_shots, i))
    } else {
        Ok(sample_ordered_subsets(num_shots, i, budget.max_contexts, seed))
    }
}

fn check_size(k: usize, i: usize) -> Result<()> {
    if i == 0 || i >= k {
        return Err(CalibError::InvalidArgument(format!(
            "context size {i} must satisfy 1 ≤ i < k = {k}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRecord {
    /// Position of the query within the demonstration set.
    pub query: usize,
    pub context: Context,
    pub logits: LogitVector,
    pub label: usize,
}

/// 𝒯_i together with the per-query context index 𝒞(x, i).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateDataset {
    context_size: usize,
    num_classes: usize,
    records: Vec<SurrogateRecord>,
    by_query: BTreeMap<usize, Vec<usize>>,
}

impl SurrogateDataset {
    /// Validates and indexes records; they are sorted by (context, query).
    pub fn from_records(context_size: usize, mut records: Vec<SurrogateRecord>) -> Result<Self> {
        if context_size == 0 {
            return Err(CalibError::InvalidArgument("context size must be ≥ 1".into()));
        }
        let first = records
            .first()
            .ok_or_else(|| CalibError::InvalidArgument("surrogate dataset is empty".into()))?;
        let num_classes = first.logits.num_classes();
        let mut pairs = HashSet::with_capacity(records.len());
        for r in &records {
            if r.logits.num_classes() != num_classes {
                return Err(CalibError::Dimension {
                    expected: num_classes - 1,
                    got: r.logits.len(),
                });
            }
            if r.label >= num_classes {
                return Err(CalibError::ClassOutOfRange {
                    label: r.label,
                    n: num_classes,
                });
            }
            if r.context.size() != context_size {
                return Err(CalibError::InvalidArgument(format!(
                    "record context {} has size {}, expected {context_size}",
                    r.context,
                    r.context.size()
                )));
            }
            if r.context.contains(r.query) {
                return Err(CalibError::InvalidArgument(format!(
                    "query {} appears in its own context {}",
                    r.query, r.context
                )));
            }
            if !pairs.insert((r.query, r.context.clone())) {
                return Err(CalibError::InvalidArgument(format!(
                    "duplicate record for query {} under context {}",
                    r.query, r.context
                )));
            }
        }
        records.sort_by(|a, b| (&a.context, a.query).cmp(&(&b.context, b.query)));
        let mut by_query: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, r) in records.iter().enumerate() {
            by_query.entry(r.query).or_default().push(j);
        }
        Ok(Self {
            context_size,
            num_classes,
            records,
            by_query,
        })
    }

    pub fn context_size(&self) -> usize {
        self.context_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn records(&self) -> &[SurrogateRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices grouped by query, queries ascending, records in dataset order.
    pub fn records_by_query(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.by_query
    }

    /// 𝒞(x, i): the contexts under which query `x` was scored.
    pub fn contexts_for_query(&self, query: usize) -> Vec<&Context> {
        self.by_query
            .get(&query)
            .map(|ix| ix.iter().map(|&j| &self.records[j].context).collect())
            .unwrap_or_default()
    }

    /// Number of distinct contexts in the dataset.
    pub fn num_contexts(&self) -> usize {
        self.records
            .iter()
            .map(|r| &r.context)
            .collect::<HashSet<_>>()
            .len()
    }

    /// Writes the line-delimited record format.
    ///
    /// Each data line holds five tab-separated fields: context size, context
    /// id (member positions joined by `-`), query position, comma-separated
    /// logits, and label. Lines starting with `#` are comments.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# i\tcontext_id\tquery_id\tlogits\tlabel")?;
        for r in &self.records {
            let logits: Vec<String> = r.logits.as_slice().iter().map(|v| format!("{v:?}")).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                self.context_size,
                r.context,
                r.query,
                logits.join(","),
                r.label
            )?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, source: &str) -> Result<Self> {
        let mut size = None;
        let mut records = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| CalibError::parse(source, lineno + 1, m);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, got {}", f.len())));
            }
            let i: usize = f[0].parse().map_err(|_| err(format!("bad context size {:?}", f[0])))?;
            match size {
                None => size = Some(i),
                Some(s) if s != i => return Err(err(format!("mixed context sizes {s} and {i}"))),
                _ => {}
            }
            let context = Context::parse_id(f[1]).map_err(|e| err(e.to_string()))?;
            let query = f[2].parse().map_err(|_| err(format!("bad query id {:?}", f[2])))?;
            let logits = f[3]
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad logit {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let logits = LogitVector::new(logits).map_err(|e| err(e.to_string()))?;
            let label = f[4].parse().map_err(|_| err(format!("bad label {:?}", f[4])))?;
            records.push(SurrogateRecord {
                query,
                context,
                logits,
                label,
            });
        }
        let size = size.ok_or_else(|| CalibError::parse(source, 0, "no records"))?;
        Self::from_records(size, records)
    }
}

/// Generates 𝒯_i: every enumerated context scores every exemplar it leaves
/// out. Calls run on up to `backend.max_concurrency()` threads; the result is
/// independent of completion order.
pub fn generate_surrogate<B: Backend + ?Sized>(
    shots: &[Exemplar],
    i: usize,
    backend: &B,
    budget: ContextBudget,
    seed: u64,
) -> Result<SurrogateDataset> {
    let contexts = enumerate_contexts(shots.len(), i, budget, seed)?;
    let jobs: Vec<(usize, usize)> = contexts
        .iter()
        .enumerate()
        .flat_map(|(a, c)| {
            (0..shots.len())
                .filter(move |q| !c.contains(*q))
                .map(move |q| (a, q))
        })
        .collect();

    let run = |&(a, q): &(usize, usize)| -> Result<SurrogateRecord> {
        let ctx = &contexts[a];
        let members = ctx.resolve(shots);
        let p = backend
            .infer(&shots[q].text, &members)
            .map_err(|e| CalibError::Inference {
                query: shots[q].id.clone(),
                context: ctx.to_string(),
                source: Box::new(e),
            })?;
        if shots[q].label >= p.len() {
            return Err(CalibError::ClassOutOfRange {
                label: shots[q].label,
                n: p.len(),
            });
        }
        Ok(SurrogateRecord {
            query: q,
            context: ctx.clone(),
            logits: logits_from_probs(&p),
            label: shots[q].label,
        })
    };

    let records = crate::par::try_map(&jobs, backend.max_concurrency(), run)?;
    SurrogateDataset::from_records(i, records)
}

/// Which classes occur among the record labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCoverage {
    present: Vec<bool>,
}

impl ClassCoverage {
    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|p| *p)
    }

    pub fn missing(&self) -> Vec<usize> {
        self.present
            .iter()
            .enumerate()
            .filter(|(_, p)| !**p)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }
}

pub fn class_coverage(ds: &SurrogateDataset, n: usize) -> ClassCoverage {
    coverage_of_labels(ds.records.iter().map(|r| r.label), n)
}

pub fn coverage_of_labels(labels: impl IntoIterator<Item = usize>, n: usize) -> ClassCoverage {
    let mut present = vec![false; n];
    for l in labels {
        if l < n {
            present[l] = true;
        }
    }
    ClassCoverage { present }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockModelSpec};
    use crate::domain::ProbDist;
    use proptest::prelude::*;

    fn shots(k: usize) -> Vec<Exemplar> {
        (0..k)
            .map(|j| Exemplar::new(j.to_string(), format!("{}", j as f64 - 1.5), j % 2))
            .collect()
    }

    fn mock() -> MockBackend {
        MockBackend::new(MockModelSpec::binary(1.0, 0.0)).unwrap()
    }

    #[test]
    fn context_counts() {
        let big = ContextBudget { max_contexts: 1_000 };
        assert_eq!(enumerate_contexts(4, 2, big, 0).unwrap().len(), 12);
        assert_eq!(enumerate_contexts(4, 3, big, 0).unwrap().len(), 24);
        assert_eq!(enumerate_contexts(2, 1, big, 0).unwrap().len(), 2);
        assert!(enumerate_contexts(4, 4, big, 0).is_err());
        assert!(enumerate_contexts(4, 0, big, 0).is_err());
    }

    #[test]
    fn full_enumeration_is_lexicographic() {
        let c = all_ordered_subsets(3, 2);
        let ids: Vec<String> = c.iter().map(|c| c.to_string()).collect();
        assert_eq!(ids, ["0-1", "0-2", "1-0", "1-2", "2-0", "2-1"]);
    }

    #[test]
    fn budget_caps_by_sampling() {
        let budget = ContextBudget { max_contexts: 50 };
        let c = enumerate_contexts(8, 3, budget, 7).unwrap();
        assert_eq!(c.len(), 50);
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 50);
        assert_eq!(c, enumerate_contexts(8, 3, budget, 7).unwrap());
        assert_ne!(c, enumerate_contexts(8, 3, budget, 8).unwrap());
    }

    #[test]
    fn large_space_sampling_uses_rejection() {
        // 16!/11! = 524,160 ordered subsets, beyond the materialization limit
        assert_eq!(count_ordered_subsets(16, 5), 524_160);
        let c = sample_ordered_subsets(16, 5, 100, 3);
        assert_eq!(c.len(), 100);
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 100);
        assert_eq!(c[..40], sample_ordered_subsets(16, 5, 40, 3)[..]);
    }

    #[test]
    fn sampling_is_prefix_stable() {
        let a = sample_ordered_subsets(6, 2, 4, 11);
        let b = sample_ordered_subsets(6, 2, 20, 11);
        assert_eq!(a[..], b[..4]);
        assert_eq!(sample_ordered_subsets(4, 2, 100, 0).len(), 12);
    }

    #[test]
    fn surrogate_sizes_for_four_shots() {
        let s = shots(4);
        let big = ContextBudget { max_contexts: 1_000 };
        let ds = generate_surrogate(&s, 2, &mock(), big, 0).unwrap();
        assert_eq!(ds.len(), 24);
        for q in 0..4 {
            assert_eq!(ds.contexts_for_query(q).len(), 6);
        }
        let ds3 = generate_surrogate(&s, 3, &mock(), big, 0).unwrap();
        assert_eq!(ds3.len(), 24);
    }

    #[test]
    fn unbiased_mock_records_match_truth() {
        let s = shots(4);
        let spec = MockModelSpec::binary(1.0, 0.0);
        let ds = generate_surrogate(&s, 2, &mock(), ContextBudget::default(), 0).unwrap();
        for r in ds.records() {
            let want = spec.true_logits(&s[r.query].text);
            assert!((r.logits.as_slice()[0] - want.as_slice()[0]).abs() < 1e-9);
            assert_eq!(r.label, s[r.query].label);
            assert!(!r.context.contains(r.query));
        }
    }

    struct Slow(MockBackend);
    impl Backend for Slow {
        fn infer(&self, q: &str, c: &[&Exemplar]) -> Result<ProbDist> {
            std::thread::sleep(std::time::Duration::from_micros(50));
            self.0.infer(q, c)
        }
        fn max_concurrency(&self) -> usize {
            4
        }
    }

    #[test]
    fn concurrent_generation_matches_sequential() {
        let mut spec = MockModelSpec::binary(1.0, 0.0);
        spec.noise_sd = 0.3;
        spec.majority_bias = 1.0;
        let s = shots(5);
        let seq = generate_surrogate(&s, 2, &MockBackend::new(spec.clone()).unwrap(), ContextBudget::default(), 1).unwrap();
        let par = generate_surrogate(&s, 2, &Slow(MockBackend::new(spec).unwrap()), ContextBudget::default(), 1).unwrap();
        assert_eq!(seq, par);
    }

    struct Failing;
    impl Backend for Failing {
        fn infer(&self, _: &str, _: &[&Exemplar]) -> Result<ProbDist> {
            Err(CalibError::Transport("down".into()))
        }
    }

    #[test]
    fn backend_errors_carry_identity() {
        let err = generate_surrogate(&shots(3), 1, &Failing, ContextBudget::default(), 0).unwrap_err();
        match err {
            CalibError::Inference { query, context, .. } => {
                assert_eq!(query, "1");
                assert_eq!(context, "0");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_examples() {
        assert!(coverage_of_labels([0, 1, 0, 1], 2).is_complete());
        assert_eq!(coverage_of_labels([0, 0, 0], 2).missing(), vec![1]);
        let s: Vec<Exemplar> = (0..4).map(|j| Exemplar::new(j.to_string(), "0", j)).collect();
        let spec = MockModelSpec {
            true_slopes: vec![0.0; 4],
            true_intercepts: vec![0.0; 4],
            conditional_scale: vec![1.0; 4],
            marginal_shift: vec![0.0; 4],
            ..MockModelSpec::binary(0.0, 0.0)
        };
        let b = MockBackend::new(spec).unwrap();
        for i in 1..4 {
            let ds = generate_surrogate(&s, i, &b, ContextBudget::default(), 0).unwrap();
            assert!(!class_coverage(&ds, 5).is_complete());
        }
    }

    #[test]
    fn record_file_round_trip() {
        let mut spec = MockModelSpec::binary(1.3, 0.2);
        spec.noise_sd = 0.7;
        let ds = generate_surrogate(&shots(5), 2, &MockBackend::new(spec).unwrap(), ContextBudget::default(), 0).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = SurrogateDataset::read_from(&buf[..], "mem").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn record_file_errors() {
        let err = SurrogateDataset::read_from(&b"1\t0\t1\t0.5\n"[..], "f").unwrap_err();
        assert!(err.to_string().contains("f:1"), "{err}");
        // query inside its own context
        assert!(SurrogateDataset::read_from(&b"1\t0\t0\t0.5\t1\n"[..], "f").is_err());
        assert!(SurrogateDataset::read_from(&b"# nothing\n"[..], "f").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn generation_is_deterministic(k in 3usize..6, seed in 0u64..1000, budget in 3usize..40) {
            let i = 1 + (seed as usize) % (k - 1);
            let mut spec = MockModelSpec::binary(1.0, 0.0);
            spec.noise_sd = 0.5;
            let b = MockBackend::new(spec).unwrap();
            let budget = ContextBudget { max_contexts: budget };
            let a = generate_surrogate(&shots(k), i, &b, budget, seed).unwrap();
            let c = generate_surrogate(&shots(k), i, &b, budget, seed).unwrap();
            prop_assert_eq!(&a, &c);
            for r in a.records() {
                prop_assert!(!r.context.contains(r.query));
            }
        }
    }
}
