use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Content-addressed response store: an in-memory map backed by an optional
/// directory of `<key>.json` files. Work for a given key is serialized so that
/// concurrent callers with identical inputs share one fetch.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Arc<str>>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

pub fn cache_key<T: Serialize>(material: &T) -> String {
    let bytes = serde_json::to_vec(material).expect("cache key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            dir,
            ..Default::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    fn lookup(&self, key: &str) -> Result<Option<Arc<str>>> {
        if let Some(hit) = self.memory.lock().get(key) {
            return Ok(Some(hit.clone()));
        }
        if let Some(path) = self.path_for(key) {
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    let text: Arc<str> = text.into();
                    self.memory.lock().insert(key.to_string(), text.clone());
                    return Ok(Some(text));
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(path, e)),
            }
        }
        Ok(None)
    }

    fn store(&self, key: &str, body: &str) -> Result<()> {
        if let Some(path) = self.path_for(key) {
            let parent = path.parent().expect("cache path has a parent");
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        self.memory.lock().insert(key.to_string(), body.into());
        Ok(())
    }

    /// Returns the cached body for `key`, or runs `fetch`, stores its output and returns it.
    /// The flag reports whether the value came from the cache.
    pub fn get_or_fetch<F>(&self, key: &str, fetch: F) -> Result<(Arc<str>, bool)>
    where
        F: FnOnce() -> Result<String>,
    {
        let lock = self.key_locks.lock().entry(key.to_string()).or_default().clone();
        let _guard = lock.lock();
        if let Some(hit) = self.lookup(key)? {
            return Ok((hit, true));
        }
        let body = fetch()?;
        self.store(key, &body)?;
        Ok((body.into(), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn fetches_once_then_hits() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let calls = AtomicUsize::new(0);
        let key = cache_key(&("m", "prompt"));
        for _ in 0..3 {
            let (body, _) = cache
                .get_or_fetch(&key, || {
                    calls.fetch_add(1, Ordering::SeqCst);
                    Ok("{\"x\":1}".to_string())
                })
                .unwrap();
            assert_eq!(&*body, "{\"x\":1}");
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);

        // a fresh cache over the same directory reads from disk
        let again = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let (body, hit) = again.get_or_fetch(&key, || unreachable!()).unwrap();
        assert!(hit);
        assert_eq!(&*body, "{\"x\":1}");
    }

    #[test]
    fn concurrent_callers_share_one_fetch() {
        let cache = ResponseCache::new(None).unwrap();
        let calls = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    cache
                        .get_or_fetch("k0", || {
                            calls.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(20));
                            Ok("v".into())
                        })
                        .unwrap()
                });
            }
        });
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn failed_fetch_is_not_cached() {
        let cache = ResponseCache::new(None).unwrap();
        assert!(cache.get_or_fetch("k", || Err(Error::Config("boom".into()))).is_err());
        let (v, hit) = cache.get_or_fetch("k", || Ok("ok".into())).unwrap();
        assert_eq!((&*v, hit), ("ok", false));
    }
}
