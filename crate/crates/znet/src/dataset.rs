//! Phantom directories: a `manifest.json` listing volume ids next to their
//! zvol image/label pairs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use znet_core::data::{normalize_intensity, Volume};
use znet_core::phantom::PhantomSpec;
use znet_core::train::Sample;

use crate::workers::par_map;
use crate::zvol::{read_volume, HEADER_SUFFIX};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    /// Header paths relative to the manifest directory.
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Generator settings; the per-volume seed is `spec.seed + index`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
    pub volumes: Vec<Entry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut ids: Vec<&str> = m.volumes.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("duplicate volume id {:?} in {}", w[0], path.display());
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.volumes.iter().map(|e| e.id.clone()).collect()
    }
}

pub fn image_header(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_image{HEADER_SUFFIX}"))
}

pub fn label_header(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_label{HEADER_SUFFIX}"))
}

/// Reads an image volume, dividing by its maximum when `normalize` is set.
pub fn read_image(path: &Path, normalize: bool) -> Result<Volume> {
    let mut v = read_volume(path)?;
    if normalize {
        v.data = normalize_intensity(&v.data).with_context(|| format!("normalizing {}", path.display()))?;
    }
    Ok(v)
}

/// Loads the listed ids (all of them when `ids` is `None`) in the requested order.
pub fn load_samples(dir: &Path, ids: Option<&[String]>, normalize: bool, threads: usize) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(dir)?;
    let entries: Vec<&Entry> = match ids {
        None => manifest.volumes.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                manifest.volumes.iter().find(|e| &e.id == id).with_context(|| format!("volume {id:?} is not in the manifest"))
            })
            .collect::<Result<_>>()?,
    };
    ensure!(!entries.is_empty(), "no volumes listed in {}", dir.join(MANIFEST).display());
    par_map(threads, &entries, |e| {
        let image = read_image(&dir.join(&e.image), normalize)?;
        let label = read_volume(&dir.join(&e.label))?;
        let mut s = Sample::new(image, label).with_context(|| format!("volume {}", e.id))?;
        s.image.meta.source = e.id.clone();
        s.label.meta.source = e.id.clone();
        Ok(s)
    })
}
