//! In-memory datasets and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.json      {version, videos: [{id, fps, stride, num_features,
//!                           channels, duration_sec, feature_file, split, sha256?}]}
//! <dir>/annotations.json   {id: [{start, end, label}]}
//! <dir>/labels.json        {index: name}
//! <dir>/features/<id>.f32  little-endian f32, row-major T x C, no header
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::timeline::{ActionInstance, FeatureSequence, VideoMeta};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub features: FeatureSequence<f32>,
    pub instances: Vec<ActionInstance>,
    pub split: Split,
}

impl VideoRecord {
    pub fn id(&self) -> &str {
        &self.features.meta.video_id
    }

    pub fn meta(&self) -> &VideoMeta {
        &self.features.meta
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    /// Class names by label index.
    pub labels: Vec<String>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn ground_truth(&self, split: Split) -> GroundTruth {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| (v.id().to_string(), v.instances.clone()))
            .collect()
    }

    /// Checks every record: meta, feature shape, annotation bounds, labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            v.meta().validate()?;
            if !seen.insert(v.id()) {
                return Err(Error::Data(format!("duplicate video id `{}`", v.id())));
            }
            for inst in &v.instances {
                inst.check_within(v.meta())?;
                if inst.label >= self.labels.len() {
                    return Err(Error::Data(format!(
                        "video `{}` uses label {} but only {} classes are defined",
                        v.id(),
                        inst.label,
                        self.labels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the dataset; `checksums` adds a sha256 per feature file.
    pub fn save(&self, dir: &Path, checksums: bool) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut entries = Vec::with_capacity(self.videos.len());
        let mut annotations = BTreeMap::new();
        for v in &self.videos {
            let m = v.meta();
            let file = format!("features/{}.f32", m.video_id);
            let mut bytes = Vec::with_capacity(v.features.values.len() * 4);
            for x in &v.features.values {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestVideo {
                id: m.video_id.clone(),
                fps: m.fps,
                stride: m.stride,
                num_features: m.num_features,
                channels: m.channels,
                duration_sec: m.duration_sec,
                feature_file: file,
                split: v.split,
                sha256: checksums.then(|| hex::encode(Sha256::digest(&bytes))),
            });
            annotations.insert(
                m.video_id.clone(),
                v.instances
                    .iter()
                    .map(AnnotationRecord::from)
                    .collect::<Vec<_>>(),
            );
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            videos: entries,
        };
        let labels: BTreeMap<String, &String> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i.to_string(), l))
            .collect();
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("annotations.json"), &annotations)?;
        // keys sort as strings; readers parse them back to indices
        write_json(&dir.join("labels.json"), &labels)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let mut annotations: BTreeMap<String, Vec<AnnotationRecord>> =
            read_json(&dir.join("annotations.json"))?;
        let raw_labels: BTreeMap<String, String> = read_json(&dir.join("labels.json"))?;
        let mut labels = vec![String::new(); raw_labels.len()];
        for (k, name) in raw_labels {
            let idx: usize = k
                .parse()
                .ok()
                .filter(|i| *i < labels.len())
                .ok_or_else(|| Error::Data(format!("labels.json has bad key `{k}`")))?;
            labels[idx] = name;
        }
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for e in manifest.videos {
            let meta = VideoMeta {
                video_id: e.id.clone(),
                fps: e.fps,
                stride: e.stride,
                num_features: e.num_features,
                channels: e.channels,
                duration_sec: e.duration_sec,
            };
            meta.validate()?;
            let path = dir.join(&e.feature_file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let expected = meta.num_features * meta.channels * 4;
            if bytes.len() != expected {
                return Err(Error::Shape {
                    name: format!("features of `{}`", e.id),
                    expected: format!(
                        "{expected} bytes ({} x {} f32)",
                        meta.num_features, meta.channels
                    ),
                    found: format!("{} bytes", bytes.len()),
                });
            }
            if let Some(sum) = &e.sha256 {
                let actual = hex::encode(Sha256::digest(&bytes));
                if &actual != sum {
                    return Err(Error::Data(format!(
                        "checksum mismatch for `{}` ({})",
                        e.id,
                        path.display()
                    )));
                }
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let features = FeatureSequence::new(meta, values)?;
            let instances = annotations
                .remove(&e.id)
                .unwrap_or_default()
                .into_iter()
                .map(|a| ActionInstance::new(a.start, a.end, a.label))
                .collect::<Result<Vec<_>>>()
                .map_err(|err| Error::Data(format!("annotation of `{}`: {err}", e.id)))?;
            videos.push(VideoRecord {
                features,
                instances,
                split: e.split,
            });
        }
        if let Some(id) = annotations.keys().next() {
            return Err(Error::Data(format!(
                "annotations.json mentions unknown video `{id}`"
            )));
        }
        let ds = Dataset { videos, labels };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    fps: f64,
    stride: usize,
    num_features: usize,
    channels: usize,
    duration_sec: f64,
    feature_file: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    start: f64,
    end: f64,
    label: usize,
}

impl From<&ActionInstance> for AnnotationRecord {
    fn from(a: &ActionInstance) -> Self {
        Self {
            start: a.start,
            end: a.end,
            label: a.label,
        }
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Path of a video's feature file inside a dataset directory.
pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join("features").join(format!("{video_id}.f32"))
}
