use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use super::image::Image;
use super::ingest::ingest_image;
use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Read access to the pixels behind a manifest. Every training and evaluation
/// loop goes through this trait so image access can be audited.
pub trait ImageSource: Sync {
    fn manifest(&self) -> &DatasetManifest;
    fn load(&self, id: &str) -> Result<Image>;
}

/// Reads images from disk on first use, resized to a fixed size, and caches
/// them.
pub struct DiskSource {
    manifest: DatasetManifest,
    size: (usize, usize),
    channels: usize,
    cache: Mutex<HashMap<String, Image>>,
}

impl DiskSource {
    pub fn new(manifest: DatasetManifest, size: (usize, usize), channels: usize) -> Self {
        Self {
            manifest,
            size,
            channels,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ImageSource for DiskSource {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, id: &str) -> Result<Image> {
        if let Some(img) = self.cache.lock().expect("cache lock").get(id) {
            return Ok(img.clone());
        }
        let entry = self
            .manifest
            .entry(id)
            .ok_or_else(|| Error::Config(format!("unknown image id {id}")))?;
        let img = ingest_image(&self.manifest.resolve(entry), self.size, self.channels)?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(id.to_string(), img.clone());
        Ok(img)
    }
}

/// Images held in memory, keyed by manifest id.
pub struct MemorySource {
    manifest: DatasetManifest,
    images: HashMap<String, Image>,
}

impl MemorySource {
    pub fn new(manifest: DatasetManifest, images: HashMap<String, Image>) -> Result<Self> {
        for e in &manifest.entries {
            if !images.contains_key(&e.id) {
                return Err(Error::Config(format!("no pixels for image id {}", e.id)));
            }
        }
        Ok(Self { manifest, images })
    }
}

impl ImageSource for MemorySource {
    fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, id: &str) -> Result<Image> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown image id {id}")))
    }
}

/// Wraps another source and records every id whose pixels were read.
pub struct TrackingSource<'a> {
    inner: &'a dyn ImageSource,
    accessed: Mutex<BTreeSet<String>>,
}

impl<'a> TrackingSource<'a> {
    pub fn new(inner: &'a dyn ImageSource) -> Self {
        Self {
            inner,
            accessed: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn accessed(&self) -> BTreeSet<String> {
        self.accessed.lock().expect("tracking lock").clone()
    }
}

impl ImageSource for TrackingSource<'_> {
    fn manifest(&self) -> &DatasetManifest {
        self.inner.manifest()
    }

    fn load(&self, id: &str) -> Result<Image> {
        self.accessed
            .lock()
            .expect("tracking lock")
            .insert(id.to_string());
        self.inner.load(id)
    }
}
