//! Label-distribution inference `Infer(x, C)`.
//!
//! Two implementations are provided: [`MockBackend`], a synthetic biased
//! classifier whose ground-truth posterior is known, and [`HttpBackend`],
//! which scores verbalizers against a logprob-exposing completion endpoint.

mod http;
mod mock;
mod template;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub use http::{BackendConfig, HttpBackend, LabelScoring};
pub use mock::{simulate_task, MockBackend, MockModelSpec, SimulationConfig};
pub use template::{load_template_file, parse_template_file, PromptTemplate};

use crate::domain::{Exemplar, ProbDist};
use crate::error::Result;

/// Anything that returns a label distribution for a query under an ordered
/// context of labeled exemplars.
pub trait Backend: Send + Sync {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist>;

    /// Upper bound on concurrent `infer` calls callers should issue.
    fn max_concurrency(&self) -> usize {
        1
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        (**self).infer(query, context)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        (**self).infer(query, context)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        (**self).infer(query, context)
    }

    fn max_concurrency(&self) -> usize {
        (**self).max_concurrency()
    }
}

type CacheKey = (String, Vec<(String, usize)>);

/// Memoizes `infer` on (query text, context texts and labels) and counts
/// how many calls reached the wrapped backend.
pub struct CachingBackend<B> {
    inner: B,
    cache: Mutex<HashMap<CacheKey, ProbDist>>,
    misses: AtomicUsize,
    hits: AtomicUsize,
}

impl<B: Backend> CachingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Calls forwarded to the wrapped backend.
    pub fn backend_calls(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }
}

impl<B: Backend> Backend for CachingBackend<B> {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        let key: CacheKey = (
            query.to_string(),
            context.iter().map(|e| (e.text.clone(), e.label)).collect(),
        );
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        let out = self.inner.infer(query, context)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}

/// Counts every `infer` call without caching.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn infer(&self, query: &str, context: &[&Exemplar]) -> Result<ProbDist> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.infer(query, context)
    }

    fn max_concurrency(&self) -> usize {
        self.inner.max_concurrency()
    }
}
