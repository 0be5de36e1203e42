use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendHandle, BackendRequest, BackendResponse};

/// On-disk response cache, one JSON file per request key.
///
/// Files live at `<root>/<key[..2]>/<key>.json`. Writes go through a temp file
/// and a no-clobber rename, so concurrent writers of the same key converge on
/// whichever value landed first.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    request_key: String,
    response: BackendResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(BackendResponse),
    Miss,
    /// The file exists but could not be decoded; treated as a miss.
    Corrupt(String),
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ResponseCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.root.join(shard).join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &str) -> CacheLookup {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return CacheLookup::Miss,
            Err(e) => return CacheLookup::Corrupt(e.to_string()),
        };
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) if entry.request_key == key => CacheLookup::Hit(entry.response),
            Ok(_) => CacheLookup::Corrupt("key mismatch".into()),
            Err(e) => CacheLookup::Corrupt(e.to_string()),
        }
    }

    /// Store `response` unless a valid entry already exists; returns the value
    /// that ends up stored. `replace_corrupt` overwrites an undecodable file.
    pub fn store(&self, key: &str, response: BackendResponse, replace_corrupt: bool) -> io::Result<BackendResponse> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let entry = Entry { request_key: key.to_owned(), response };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer(&mut tmp, &entry)?;
        tmp.write_all(b"\n")?;
        tmp.as_file().sync_all()?;

        if replace_corrupt {
            tmp.persist(&path).map_err(|e| e.error)?;
            return Ok(entry.response);
        }
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(entry.response),
            Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => match self.lookup(key) {
                CacheLookup::Hit(existing) => Ok(existing),
                _ => {
                    e.file.persist(&path).map_err(|e| e.error)?;
                    Ok(entry.response)
                }
            },
            Err(e) => Err(e.error),
        }
    }
}

/// Serve `request` from the cache, or query the backend and store the reply.
/// Returns the response and whether it was a cache hit.
pub fn cached_query(
    cache: &ResponseCache,
    backend: &BackendHandle,
    request: &BackendRequest,
) -> Result<(BackendResponse, bool), BackendError> {
    let corrupt = match cache.lookup(&request.request_key) {
        CacheLookup::Hit(resp) => return Ok((resp, true)),
        CacheLookup::Miss => false,
        CacheLookup::Corrupt(why) => {
            log::warn!("cache entry {} is corrupt ({why}); refetching", request.request_key);
            true
        }
    };
    let fresh = backend.query(request)?;
    let stored = cache
        .store(&request.request_key, fresh, corrupt)
        .map_err(|e| BackendError::Io(format!("cache write: {e}")))?;
    Ok((stored, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backend, CallError, Decoding, RetryPolicy};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;

    struct Counter(Arc<AtomicU64>);

    impl Backend for Counter {
        fn call(&self, req: &BackendRequest) -> Result<String, CallError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            Ok(format!("{}-{n}", req.prompt_text))
        }
    }

    fn handle() -> BackendHandle {
        BackendHandle::new("c", "mock", Box::new(Counter(Arc::new(AtomicU64::new(0)))), RetryPolicy::default())
    }

    fn req(max_tokens: u32) -> BackendRequest {
        BackendRequest::new("c", Some("1".into()), "p".into(), None, Decoding { temperature: 0.0, max_tokens }, None)
    }

    #[test]
    fn hit_skips_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let h = handle();
        let (a, hit_a) = cached_query(&cache, &h, &req(16)).unwrap();
        let (b, hit_b) = cached_query(&cache, &h, &req(16)).unwrap();
        assert!(!hit_a && hit_b);
        assert_eq!(a, b);
        assert_eq!(h.attempts(), 1);
    }

    #[test]
    fn distinct_decoding_distinct_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let h = handle();
        cached_query(&cache, &h, &req(16)).unwrap();
        cached_query(&cache, &h, &req(32)).unwrap();
        assert_eq!(h.attempts(), 2);
        let files = walk(dir.path());
        assert_eq!(files.len(), 2);
    }

    #[test]
    fn corrupt_entry_is_refetched_and_replaced() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let h = handle();
        let r = req(16);
        let path = cache.path_for(&r.request_key);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, b"{garbage").unwrap();
        assert!(matches!(cache.lookup(&r.request_key), CacheLookup::Corrupt(_)));
        let (resp, hit) = cached_query(&cache, &h, &r).unwrap();
        assert!(!hit);
        assert_eq!(cache.lookup(&r.request_key), CacheLookup::Hit(resp));
    }

    #[test]
    fn concurrent_writers_converge() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let stored: Vec<BackendResponse> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let cache = &cache;
                    s.spawn(move || {
                        cache
                            .store("abcdef", BackendResponse { text: format!("v{i}"), latency_ms: 0, attempt_count: 1 }, false)
                            .unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let on_disk = match cache.lookup("abcdef") {
            CacheLookup::Hit(r) => r,
            other => panic!("{other:?}"),
        };
        assert!(stored.iter().all(|r| *r == on_disk));
    }

    fn walk(p: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
        out
    }
}
