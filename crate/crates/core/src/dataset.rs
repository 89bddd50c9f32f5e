//! Labeled image records: tag normalisation, manifest I/O, class balancing
//! and stratified splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Index;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};

/// Name of the pseudo-random generator behind every seeded selection in this
/// crate. Recorded in run metadata.
pub const RNG_NAME: &str = "chacha8";

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mapping from raw annotation tags to class labels.
///
/// Lookups normalise the tag first (trim, lowercase, spaces and hyphens become
/// underscores). Tags without an entry map to [`ClassLabel::Others`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagMap {
    entries: BTreeMap<String, ClassLabel>,
}

impl Default for TagMap {
    fn default() -> Self {
        let mut map = TagMap {
            entries: BTreeMap::new(),
        };
        for label in ClassLabel::ALL {
            map.insert(label.name(), label);
        }
        for tag in ["living", "living_room", "dining", "dining_room"] {
            map.insert(tag, ClassLabel::Hall);
        }
        map
    }
}

impl TagMap {
    /// A map with no entries: every tag falls through to `others`.
    pub fn empty() -> Self {
        TagMap {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, raw: &str, label: ClassLabel) {
        self.entries.insert(normalize_tag(raw), label);
    }

    pub fn map(&self, raw: &str) -> ClassLabel {
        self.entries
            .get(&normalize_tag(raw))
            .copied()
            .unwrap_or(ClassLabel::Others)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ClassLabel)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn normalize_tag(raw: &str) -> String {
    raw.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

/// Maps a raw annotation tag with the default rules: living and dining rooms
/// merge into `hall`, the five room names map to themselves, anything else is
/// `others`.
pub fn map_raw_tag(raw: &str) -> ClassLabel {
    thread_local! {
        static DEFAULT: TagMap = TagMap::default();
    }
    DEFAULT.with(|m| m.map(raw))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub raw_tag: String,
    pub label: ClassLabel,
}

impl ImageRecord {
    pub fn new(path: impl Into<PathBuf>, raw_tag: impl Into<String>, tags: &TagMap) -> Self {
        let raw_tag = raw_tag.into();
        let label = tags.map(&raw_tag);
        ImageRecord {
            path: path.into(),
            raw_tag,
            label,
        }
    }
}

/// Per-class record counts, indexed by [`ClassLabel`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts([usize; NUM_CLASSES]);

impl ClassCounts {
    pub fn as_array(&self) -> [usize; NUM_CLASSES] {
        self.0
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn min(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassLabel, usize)> + '_ {
        ClassLabel::ALL.into_iter().zip(self.0.iter().copied())
    }
}

impl Index<ClassLabel> for ClassCounts {
    type Output = usize;

    fn index(&self, label: ClassLabel) -> &usize {
        &self.0[label.index()]
    }
}

impl Serialize for ClassCounts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(NUM_CLASSES))?;
        for (label, n) in self.iter() {
            map.serialize_entry(label.name(), &n)?;
        }
        map.end()
    }
}

impl fmt::Display for ClassCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(l, n)| format!("{l}:{n}")).collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// An ordered, duplicate-free list of image records with per-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    counts: ClassCounts,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut counts = [0usize; NUM_CLASSES];
        for r in &records {
            if !seen.insert(r.path.as_path()) {
                return Err(Error::DuplicatePath(r.path.clone()));
            }
            counts[r.label.index()] += 1;
        }
        Ok(DatasetManifest {
            records,
            counts: ClassCounts(counts),
        })
    }

    /// Builds a manifest from a subset of `self`, given sorted indices.
    fn subset(&self, indices: &[usize]) -> DatasetManifest {
        let records: Vec<ImageRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let mut counts = [0usize; NUM_CLASSES];
        for r in &records {
            counts[r.label.index()] += 1;
        }
        DatasetManifest {
            records,
            counts: ClassCounts(counts),
        }
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn counts(&self) -> ClassCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn indices_by_class(&self) -> [Vec<usize>; NUM_CLASSES] {
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.label.index()].push(i);
        }
        by_class
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    path: String,
    raw_tag: String,
}

/// Loads a `path,raw_tag` CSV manifest with the default tag rules.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_manifest_with(path, &TagMap::default())
}

/// Loads a `path,raw_tag` CSV manifest. Relative image paths are resolved
/// against the manifest's directory.
pub fn load_manifest_with(path: impl AsRef<Path>, tags: &TagMap) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let malformed = |row: usize, reason: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        reason,
    };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| malformed(0, e.to_string()))?
        .clone();
    if !headers.iter().eq(["path", "raw_tag"]) {
        return Err(malformed(
            0,
            format!("expected header `path,raw_tag`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| malformed(row_no, e.to_string()))?;
        if row.path.is_empty() {
            return Err(malformed(row_no, "empty path".into()));
        }
        let image_path = Path::new(&row.path);
        let image_path = if image_path.is_absolute() {
            image_path.to_path_buf()
        } else {
            base.join(image_path)
        };
        records.push(ImageRecord::new(image_path, row.raw_tag, tags));
    }
    DatasetManifest::new(records)
}

/// Writes a manifest in the `path,raw_tag` CSV format. Paths are written
/// relative to the manifest's directory when possible.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    writer
        .write_record(["path", "raw_tag"])
        .map_err(|e| csv_io(path, e))?;
    for r in manifest.records() {
        let p = r.path.strip_prefix(base).unwrap_or(&r.path);
        writer
            .write_record([p.to_string_lossy().as_ref(), r.raw_tag.as_str()])
            .map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Randomly discards records from majority classes so that every class keeps
/// exactly as many records as the smallest one. Retained records keep their
/// input order.
pub fn undersample(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest> {
    if let Some((label, _)) = manifest.counts().iter().find(|&(_, n)| n == 0) {
        return Err(Error::EmptyClass(label));
    }
    let target = manifest.counts().min();
    let mut rng = seeded_rng(seed);
    let mut keep = Vec::with_capacity(target * NUM_CLASSES);
    for indices in manifest.indices_by_class() {
        let chosen = rand::seq::index::sample(&mut rng, indices.len(), target);
        keep.extend(chosen.into_iter().map(|i| indices[i]));
    }
    keep.sort_unstable();
    Ok(manifest.subset(&keep))
}

/// Train/validation split parameters. The train fraction is kept as an exact
/// ratio so per-class counts never suffer from float rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    numerator: u64,
    denominator: u64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            numerator: 9,
            denominator: 10,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Train fraction `numerator / denominator`, which must lie in (0, 1).
    pub fn new(numerator: u64, denominator: u64, seed: u64) -> Result<Self> {
        if numerator == 0 || numerator >= denominator {
            return Err(Error::InvalidConfig(format!(
                "train fraction {numerator}/{denominator} is not in (0, 1)"
            )));
        }
        Ok(SplitSpec {
            numerator,
            denominator,
            seed,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn train_fraction(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Number of records of a class with `count` records that go to train.
    pub fn train_count(&self, count: usize) -> usize {
        ((count as u128 * self.numerator as u128) / self.denominator as u128) as usize
    }
}

/// Stratified split: within each class, a seeded shuffle sends
/// `floor(fraction * count)` records to train and the rest to validation.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded_rng(spec.seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (label, mut indices) in ClassLabel::ALL.into_iter().zip(manifest.indices_by_class()) {
        if indices.is_empty() {
            continue;
        }
        let n_train = spec.train_count(indices.len());
        if n_train == 0 || n_train == indices.len() {
            return Err(Error::ClassTooSmall {
                label,
                count: indices.len(),
            });
        }
        indices.shuffle(&mut rng);
        train.extend_from_slice(&indices[..n_train]);
        validation.extend_from_slice(&indices[n_train..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok((manifest.subset(&train), manifest.subset(&validation)))
}
