use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subfolder names of the Market-1501 / DukeMTMC-reID layout.
pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

/// Person identity parsed from a filename. Ids `-1` and `0000` are junk
/// (distractors or unusable detections) and never count as a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "i64", into = "i64")]
pub enum Identity {
    Person(u32),
    Junk,
}

impl Identity {
    pub fn is_junk(self) -> bool {
        matches!(self, Identity::Junk)
    }

    pub fn person(self) -> Option<u32> {
        match self {
            Identity::Person(id) => Some(id),
            Identity::Junk => None,
        }
    }
}

impl From<i64> for Identity {
    fn from(raw: i64) -> Self {
        if raw <= 0 || raw > u32::MAX as i64 {
            Identity::Junk
        } else {
            Identity::Person(raw as u32)
        }
    }
}

impl From<Identity> for i64 {
    fn from(id: Identity) -> Self {
        match id {
            Identity::Person(id) => id as i64,
            Identity::Junk => -1,
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Identity::Person(id) => write!(f, "{id:04}"),
            Identity::Junk => f.write_str("junk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_DIR,
            Split::Query => QUERY_DIR,
            Split::Gallery => GALLERY_DIR,
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" | "test" => Ok(Split::Gallery),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, query or gallery)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// One pedestrian image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub identity: Identity,
    pub camera: u32,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

/// Dense relabeling of the training identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_identities: usize,
    labels: BTreeMap<u32, usize>,
    pub counts: SplitCounts,
}

impl DatasetMeta {
    /// Builds the identity index from training records; ids are sorted so
    /// the labels are stable across runs.
    pub fn from_records(records: &[ImageRecord]) -> Self {
        let mut labels = BTreeMap::new();
        let mut counts = SplitCounts::default();
        for r in records {
            match r.split {
                Split::Train => {
                    counts.train += 1;
                    if let Identity::Person(id) = r.identity {
                        labels.insert(id, 0);
                    }
                }
                Split::Query => counts.query += 1,
                Split::Gallery => counts.gallery += 1,
            }
        }
        for (label, slot) in labels.values_mut().enumerate() {
            *slot = label;
        }
        DatasetMeta {
            num_identities: labels.len(),
            labels,
            counts,
        }
    }

    /// Training label of an identity, if it appears in the training split.
    pub fn label_of(&self, identity: Identity) -> Option<usize> {
        identity.person().and_then(|id| self.labels.get(&id).copied())
    }
}

/// A loaded dataset: all records plus the training label index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Training records paired with their dense labels.
    pub fn training_set(&self) -> Vec<(ImageRecord, usize)> {
        self.split(Split::Train)
            .filter_map(|r| self.meta.label_of(r.identity).map(|l| (r.clone(), l)))
            .collect()
    }
}

/// Parses `<id>_c<cam>...` into identity and camera.
pub fn parse_filename(path: &Path) -> Result<(Identity, u32)> {
    let bad = |reason: &str| Error::Filename {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| bad("not valid UTF-8"))?;
    let mut parts = stem.split('_');
    let id_token = parts.next().ok_or_else(|| bad("missing identity"))?;
    let raw_id: i64 = id_token
        .parse()
        .map_err(|_| bad("identity is not an integer"))?;
    let cam_token = parts.next().ok_or_else(|| bad("missing camera field"))?;
    let digits: String = cam_token
        .strip_prefix('c')
        .ok_or_else(|| bad("camera field must start with `c`"))?
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let camera: u32 = digits.parse().map_err(|_| bad("camera id is not an integer"))?;
    Ok((Identity::from(raw_id), camera))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_split(root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is missing the `{}` folder",
            root.display(),
            split.dir_name()
        )));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads a Market-style directory (`bounding_box_train`, `query`,
/// `bounding_box_test`).
///
/// Junk files in the training folder are skipped; in query and gallery they
/// are kept and flagged so evaluation can ignore them.
pub fn load_market_layout(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let mut records = Vec::new();
    let mut bad_names = Vec::new();
    let mut skipped_junk = 0usize;
    for split in Split::ALL {
        for path in list_split(root, split)? {
            match parse_filename(&path) {
                Ok((identity, _)) if split == Split::Train && identity.is_junk() => {
                    skipped_junk += 1;
                }
                Ok((identity, camera)) => records.push(ImageRecord {
                    image_path: path,
                    identity,
                    camera,
                    split,
                }),
                Err(_) => bad_names.push(path.display().to_string()),
            }
        }
    }
    if !bad_names.is_empty() {
        return Err(Error::Data(format!(
            "unparsable filenames (expected `<id>_c<cam>...`): {}",
            bad_names.join(", ")
        )));
    }
    if skipped_junk > 0 {
        log::warn!("skipped {skipped_junk} junk images in the training split");
    }
    let meta = DatasetMeta::from_records(&records);
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
        meta,
    })
}
