//! Content-addressed on-disk cache for provider outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 over the parts, each length-prefixed so that part boundaries
/// cannot be shifted to forge a collision.
pub fn content_key<I, P>(parts: I) -> String
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let part = part.as_ref();
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

/// One file per key under `<root>/<namespace>/<key[..2]>/<key>`. Writes go
/// through a temporary file and a rename, so concurrent writers of distinct
/// keys never interfere and a duplicate write of identical bytes is harmless.
#[derive(Debug, Clone)]
pub struct ContentCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ContentCache {
    pub fn new(root: impl AsRef<Path>, namespace: &str) -> Result<Self> {
        let dir = root.as_ref().join(namespace);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ContentCache { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(key)
    }

    pub fn get(&self, key: &str) -> Result<Option<String>> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, value: &str) -> Result<()> {
        let path = self.path(key);
        let parent = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(value.as_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
