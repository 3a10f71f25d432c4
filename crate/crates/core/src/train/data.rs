use std::path::Path;
use std::sync::{Arc, Mutex};

use crate::synth::{generate_clip, read_clip, read_manifest, Clip, ManifestEntry, SceneParams, SceneSpec};
use crate::{Error, Result};

/// Indexable collection of clips.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;

    fn clip(&self, index: usize) -> Result<Arc<Clip>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Cache(Mutex<Vec<Option<Arc<Clip>>>>);

impl Cache {
    fn new(n: usize) -> Self {
        Self(Mutex::new(vec![None; n]))
    }

    fn get_or(&self, index: usize, make: impl FnOnce() -> Result<Clip>) -> Result<Arc<Clip>> {
        if let Some(c) = self.0.lock().expect("cache lock")[index].clone() {
            return Ok(c);
        }
        let clip = Arc::new(make()?);
        self.0.lock().expect("cache lock")[index] = Some(clip.clone());
        Ok(clip)
    }
}

/// Clips listed in a manifest, loaded on first use and kept in memory.
pub struct ManifestCorpus {
    entries: Vec<ManifestEntry>,
    cache: Cache,
}

impl ManifestCorpus {
    pub fn open(manifest: &Path) -> Result<Self> {
        let entries = read_manifest(manifest)?;
        if entries.is_empty() {
            return Err(Error::format(format!("manifest {} lists no clips", manifest.display())));
        }
        let cache = Cache::new(entries.len());
        Ok(Self { entries, cache })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }
}

impl ClipSource for ManifestCorpus {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn clip(&self, index: usize) -> Result<Arc<Clip>> {
        let path = &self.entries[index].path;
        self.cache.get_or(index, || {
            read_clip(path).map_err(|e| match e {
                Error::Io(io) => Error::format(format!("{}: {}", path.display(), io)),
                other => other,
            })
        })
    }
}

/// Clips generated on demand for seeds `first_seed..first_seed + count`.
pub struct SyntheticCorpus {
    params: SceneParams,
    first_seed: u64,
    count: usize,
    cache: Cache,
}

impl SyntheticCorpus {
    pub fn new(params: SceneParams, first_seed: u64, count: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            first_seed,
            count,
            cache: Cache::new(count),
        })
    }
}

impl ClipSource for SyntheticCorpus {
    fn len(&self) -> usize {
        self.count
    }

    fn clip(&self, index: usize) -> Result<Arc<Clip>> {
        self.cache.get_or(index, || {
            generate_clip(&SceneSpec::sample(self.first_seed + index as u64, &self.params)?)
        })
    }
}
