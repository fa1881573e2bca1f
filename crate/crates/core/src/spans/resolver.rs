//! Wiki title search behind a small trait, with an on-disk query cache and a
//! request-rate limiter for live clients.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable holding the live resolver rate limit in requests
/// per second.
pub const RATE_LIMIT_ENV: &str = "KBVQA_RESOLVER_RPS";

#[derive(Debug, Error)]
pub enum ResolverError {
    #[error("resolver transport failure: {0}")]
    Transport(String),
    #[error("resolver cache line {line}: {message}")]
    Cache { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait LinkResolver: Send + Sync {
    /// Most likely wiki title for `query`, `Ok(None)` when the search has no
    /// result.
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError>;
}

impl<R: LinkResolver + ?Sized> LinkResolver for &R {
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
        (**self).search(query)
    }
}

impl<R: LinkResolver + ?Sized> LinkResolver for Box<R> {
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
        (**self).search(query)
    }
}

/// One line of the resolver cache (and of stub resolver files).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub query: String,
    pub title: Option<String>,
    #[serde(default)]
    pub timestamp: u64,
}

fn read_records(path: &Path) -> Result<Vec<CacheRecord>, ResolverError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| ResolverError::Cache {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Offline resolver answering from a fixed query → title table.
#[derive(Debug, Clone, Default)]
pub struct StubResolver {
    table: HashMap<String, Option<String>>,
    /// Queries that simulate a transport failure.
    failing: Vec<String>,
}

impl StubResolver {
    pub fn new<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            table: entries
                .into_iter()
                .map(|(q, t)| (q.to_string(), Some(t.to_string())))
                .collect(),
            failing: Vec::new(),
        }
    }

    pub fn with_failure(mut self, query: &str) -> Self {
        self.failing.push(query.to_string());
        self
    }

    /// Loads a JSONL file in the cache record format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ResolverError> {
        let table = read_records(path.as_ref())?
            .into_iter()
            .map(|r| (r.query, r.title))
            .collect();
        Ok(Self {
            table,
            failing: Vec::new(),
        })
    }
}

impl LinkResolver for StubResolver {
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
        if self.failing.iter().any(|q| q == query) {
            return Err(ResolverError::Transport(format!(
                "stub failure for `{query}`"
            )));
        }
        Ok(self.table.get(query).cloned().flatten())
    }
}

/// Caches results keyed by exact query string. Reads share a lock; a miss
/// takes the write lock, stores the answer and appends it to the cache file.
/// Transport failures are not cached.
pub struct CachedResolver<R> {
    inner: R,
    path: Option<PathBuf>,
    entries: RwLock<IndexMap<String, CacheRecord>>,
}

impl<R: LinkResolver> CachedResolver<R> {
    pub fn in_memory(inner: R) -> Self {
        Self {
            inner,
            path: None,
            entries: RwLock::new(IndexMap::new()),
        }
    }

    /// Opens (or starts) a cache file. Later lines override earlier ones.
    pub fn open(inner: R, path: impl Into<PathBuf>) -> Result<Self, ResolverError> {
        let path = path.into();
        let mut entries = IndexMap::new();
        if path.exists() {
            for rec in read_records(&path)? {
                entries.insert(rec.query.clone(), rec);
            }
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        Ok(Self {
            inner,
            path: Some(path),
            entries: RwLock::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<R: LinkResolver> LinkResolver for CachedResolver<R> {
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
        if let Some(hit) = self.entries.read().expect("cache lock").get(query) {
            return Ok(hit.title.clone());
        }
        let title = self.inner.search(query)?;
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(hit) = entries.get(query) {
            return Ok(hit.title.clone());
        }
        let record = CacheRecord {
            query: query.to_string(),
            title: title.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&record).expect("cache record serializes");
            writeln!(file, "{line}")?;
        }
        entries.insert(record.query.clone(), record);
        Ok(title)
    }
}

/// Spaces calls at least `1 / requests_per_second` apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        let interval = if requests_per_second > 0.0 && requests_per_second.is_finite() {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            last: Mutex::new(None),
        }
    }

    /// Reads [`RATE_LIMIT_ENV`], falling back to `default_rps`.
    pub fn from_env(default_rps: f64) -> Self {
        let rps = std::env::var(RATE_LIMIT_ENV)
            .ok()
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or(default_rps);
        Self::new(rps)
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Blocks until the next request slot. Holding the lock while sleeping
    /// serializes concurrent callers.
    pub fn acquire(&self) {
        let mut last = self.last.lock().expect("rate limiter lock");
        if let Some(prev) = *last {
            let ready = prev + self.interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

/// Live Wikipedia title search through the public MediaWiki API.
#[cfg(feature = "wikipedia")]
pub struct WikipediaResolver {
    endpoint: String,
    limiter: RateLimiter,
    agent: ureq::Agent,
}

#[cfg(feature = "wikipedia")]
impl WikipediaResolver {
    pub fn new(endpoint: impl Into<String>, limiter: RateLimiter) -> Self {
        Self {
            endpoint: endpoint.into(),
            limiter,
            agent: ureq::Agent::new_with_defaults(),
        }
    }

    pub fn english() -> Self {
        Self::new(
            "https://en.wikipedia.org/w/api.php",
            RateLimiter::from_env(1.0),
        )
    }
}

#[cfg(feature = "wikipedia")]
impl LinkResolver for WikipediaResolver {
    fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
        self.limiter.acquire();
        let body: serde_json::Value = self
            .agent
            .get(&self.endpoint)
            .query("action", "query")
            .query("list", "search")
            .query("srlimit", "1")
            .query("format", "json")
            .query("srsearch", query)
            .call()
            .map_err(|e| ResolverError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| ResolverError::Transport(e.to_string()))?;
        Ok(body["query"]["search"][0]["title"]
            .as_str()
            .map(str::to_string))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
    }

    impl LinkResolver for Counting {
        fn search(&self, query: &str) -> Result<Option<String>, ResolverError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if query == "boom" {
                return Err(ResolverError::Transport("down".into()));
            }
            Ok(Some(query.to_uppercase()))
        }
    }

    #[test]
    fn stub_resolves_and_fails_on_demand() {
        let stub = StubResolver::new([("Top Gun", "Top Gun")]).with_failure("x");
        assert_eq!(stub.search("Top Gun").unwrap().as_deref(), Some("Top Gun"));
        assert_eq!(stub.search("nothing").unwrap(), None);
        assert!(matches!(stub.search("x"), Err(ResolverError::Transport(_))));
    }

    #[test]
    fn cache_hits_skip_inner_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cached = CachedResolver::open(
            Counting {
                calls: AtomicUsize::new(0),
            },
            &path,
        )
        .unwrap();
        assert_eq!(cached.search("abc").unwrap().as_deref(), Some("ABC"));
        assert_eq!(cached.search("abc").unwrap().as_deref(), Some("ABC"));
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 1);
        assert!(cached.search("boom").is_err());
        assert!(cached.search("boom").is_err());
        assert_eq!(cached.inner.calls.load(Ordering::SeqCst), 3);
        assert_eq!(cached.len(), 1);

        let reopened = CachedResolver::open(
            Counting {
                calls: AtomicUsize::new(0),
            },
            &path,
        )
        .unwrap();
        assert_eq!(reopened.search("abc").unwrap().as_deref(), Some("ABC"));
        assert_eq!(reopened.inner.calls.load(Ordering::SeqCst), 0);

        let stub = StubResolver::load(&path).unwrap();
        assert_eq!(stub.search("abc").unwrap().as_deref(), Some("ABC"));
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let limiter = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        // three full intervals between four calls
        assert!(start.elapsed() >= Duration::from_millis(59));
        assert_eq!(RateLimiter::new(0.0).interval(), Duration::ZERO);
    }
}
