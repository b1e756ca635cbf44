//! Identity-indexed image manifests and identity-disjoint splits.
//!
//! Manifest files are UTF-8 CSV with a required header
//! `image_id,identity_id,dataset_id,variant,path`. Leading `#` lines may
//! declare `# dataset: <name>` and `# root: <dir>`; record paths are resolved
//! against the root, which defaults to the manifest's own directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MANIFEST_HEADER: [&str; 5] = ["image_id", "identity_id", "dataset_id", "variant", "path"];
pub const DATA_ROOT_ENV: &str = "MASKMATCH_DATA_ROOT";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: u64, message: String },
    #[error("duplicate image_id {image_id:?} on line {line}")]
    DuplicateImageId { image_id: String, line: u64 },
    #[error("role {role} would receive no identities ({available} available)")]
    InsufficientIdentities { role: Role, available: usize },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("split file line {line}: {message}")]
    SplitParse { line: u64, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RegistryError + '_ {
    move |source| RegistryError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unmasked,
    Masked,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unmasked => "unmasked",
            Variant::Masked => "masked",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unmasked" => Ok(Variant::Unmasked),
            "masked" => Ok(Variant::Masked),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity_id: String,
    pub dataset_id: String,
    pub variant: Variant,
    pub path: PathBuf,
}

/// Record positions of one identity, split by variant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentityEntry {
    pub unmasked: Vec<usize>,
    pub masked: Vec<usize>,
}

impl IdentityEntry {
    pub fn get(&self, variant: Variant) -> &[usize] {
        match variant {
            Variant::Unmasked => &self.unmasked,
            Variant::Masked => &self.masked,
        }
    }

    pub fn has_both(&self) -> bool {
        !self.unmasked.is_empty() && !self.masked.is_empty()
    }
}

/// Immutable manifest of image records keyed by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    dataset_id: String,
    root: PathBuf,
    records: Vec<ImageRecord>,
    identity_map: BTreeMap<String, IdentityEntry>,
    by_image: HashMap<String, usize>,
}

impl DatasetIndex {
    pub fn new(dataset_id: impl Into<String>, root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self, RegistryError> {
        let mut by_image = HashMap::with_capacity(records.len());
        let mut identity_map: BTreeMap<String, IdentityEntry> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.path.as_os_str().is_empty() {
                return Err(RegistryError::ManifestParse { line: i as u64 + 2, message: "empty path".into() });
            }
            if by_image.insert(r.image_id.clone(), i).is_some() {
                return Err(RegistryError::DuplicateImageId { image_id: r.image_id.clone(), line: i as u64 + 2 });
            }
            let entry = identity_map.entry(r.identity_id.clone()).or_default();
            match r.variant {
                Variant::Unmasked => entry.unmasked.push(i),
                Variant::Masked => entry.masked.push(i),
            }
        }
        Ok(Self { dataset_id: dataset_id.into(), root: root.into(), records, identity_map, by_image })
    }

    pub fn empty(dataset_id: impl Into<String>) -> Self {
        Self::new(dataset_id, PathBuf::new(), Vec::new()).expect("empty index is valid")
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identity_map(&self) -> &BTreeMap<String, IdentityEntry> {
        &self.identity_map
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.by_image.get(image_id).map(|&i| &self.records[i])
    }

    /// Absolute (or root-relative) location of a record's file.
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Distinct dataset ids among the records.
    pub fn datasets(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.dataset_id.clone()).collect()
    }

    fn filtered(&self, dataset_id: String, keep: impl Fn(&ImageRecord) -> bool) -> DatasetIndex {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        DatasetIndex::new(dataset_id, self.root.clone(), records).expect("subset of a valid index is valid")
    }

    /// Records of one dataset.
    pub fn subset_dataset(&self, dataset_id: &str) -> DatasetIndex {
        self.filtered(dataset_id.to_string(), |r| r.dataset_id == dataset_id)
    }

    /// Records whose identity is in `identities`.
    pub fn restrict_identities(&self, identities: &BTreeSet<String>) -> DatasetIndex {
        self.filtered(self.dataset_id.clone(), |r| identities.contains(&r.identity_id))
    }

    /// Concatenates two indices. Paths of `other` are re-anchored so they
    /// still resolve under this index's root.
    pub fn merge(&self, other: &DatasetIndex, dataset_id: impl Into<String>) -> Result<DatasetIndex, RegistryError> {
        let mut records = self.records.clone();
        for r in &other.records {
            let mut r = r.clone();
            if other.root != self.root {
                r.path = absolute(&other.root.join(&r.path));
            }
            records.push(r);
        }
        DatasetIndex::new(dataset_id, self.root.clone(), records)
    }

    /// Identities that have at least one image of both variants.
    pub fn paired_identities(&self) -> BTreeSet<String> {
        self.identity_map.iter().filter(|(_, e)| e.has_both()).map(|(k, _)| k.clone()).collect()
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

/// Reads a manifest; `MASKMATCH_DATA_ROOT`, when set, overrides its root.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetIndex, RegistryError> {
    let root_override = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    load_manifest_with_root(path, root_override)
}

pub fn load_manifest_with_root(path: impl AsRef<Path>, root_override: Option<PathBuf>) -> Result<DatasetIndex, RegistryError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut declared_root = None;
    let mut declared_dataset = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if let Some(v) = body.strip_prefix("root:") {
            declared_root = Some(base.join(v.trim()));
        } else if let Some(v) = body.strip_prefix("dataset:") {
            declared_dataset = Some(v.trim().to_string());
        }
    }
    let root = root_override.or(declared_root).unwrap_or(base);

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    let mut header_seen = false;
    for row in reader.records() {
        let row = row.map_err(|e| RegistryError::ManifestParse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if !header_seen {
            let header: Vec<&str> = row.iter().map(str::trim).collect();
            if header != MANIFEST_HEADER {
                return Err(RegistryError::ManifestParse {
                    line,
                    message: format!("expected header {}", MANIFEST_HEADER.join(",")),
                });
            }
            header_seen = true;
            continue;
        }
        if row.len() != MANIFEST_HEADER.len() {
            return Err(RegistryError::ManifestParse {
                line,
                message: format!("expected {} fields, got {}", MANIFEST_HEADER.len(), row.len()),
            });
        }
        let field = |i: usize| row[i].trim().to_string();
        let variant = field(3).parse().map_err(|message| RegistryError::ManifestParse { line, message })?;
        let rec = ImageRecord {
            image_id: field(0),
            identity_id: field(1),
            dataset_id: field(2),
            variant,
            path: PathBuf::from(field(4)),
        };
        if rec.image_id.is_empty() || rec.identity_id.is_empty() || rec.path.as_os_str().is_empty() {
            return Err(RegistryError::ManifestParse { line, message: "empty field".into() });
        }
        if seen.insert(rec.image_id.clone(), line).is_some() {
            return Err(RegistryError::DuplicateImageId { image_id: rec.image_id, line });
        }
        records.push(rec);
    }
    let dataset_id = declared_dataset.unwrap_or_else(|| {
        let ids: BTreeSet<&str> = records.iter().map(|r| r.dataset_id.as_str()).collect();
        if ids.is_empty() {
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            ids.into_iter().collect::<Vec<_>>().join("+")
        }
    });
    DatasetIndex::new(dataset_id, root, records)
}

/// Writes a manifest whose root is declared relative to the file when possible.
pub fn write_manifest(index: &DatasetIndex, path: impl AsRef<Path>) -> Result<(), RegistryError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut out = String::new();
    out.push_str(&format!("# dataset: {}\n", index.dataset_id));
    let base = path.parent().map(absolute).unwrap_or_default();
    let root = absolute(&index.root);
    let root_text = match root.strip_prefix(&base) {
        Ok(rel) if rel.as_os_str().is_empty() => ".".to_string(),
        Ok(rel) => rel.display().to_string(),
        Err(_) => root.display().to_string(),
    };
    out.push_str(&format!("# root: {root_text}\n"));
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER).expect("in-memory write");
    for r in &index.records {
        let v = r.variant.to_string();
        let p = r.path.to_string_lossy();
        w.write_record([r.image_id.as_str(), &r.identity_id, &r.dataset_id, &v, &p]).expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Holdout,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Validation, Role::Holdout];
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Holdout => "holdout",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "holdout" => Ok(Role::Holdout),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub role: Role,
    pub identity_ids: BTreeSet<String>,
}

/// The three role assignments of one split, in train/validation/holdout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub seed: u64,
    pub fractions: (f64, f64),
    pub assignments: [SplitAssignment; 3],
}

impl Splits {
    pub fn role(&self, role: Role) -> &BTreeSet<String> {
        &self.assignments[role as usize].identity_ids
    }

    pub fn role_of(&self, identity_id: &str) -> Option<Role> {
        self.assignments.iter().find(|a| a.identity_ids.contains(identity_id)).map(|a| a.role)
    }

    /// Canonical text form; identical splits serialise to identical bytes.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(&str, Role)> = self
            .assignments
            .iter()
            .flat_map(|a| a.identity_ids.iter().map(move |id| (id.as_str(), a.role)))
            .collect();
        rows.sort();
        let mut out = format!("# seed={} train={} validation={}\nidentity_id,role\n", self.seed, self.fractions.0, self.fractions.1);
        for (id, role) in rows {
            out.push_str(&format!("{id},{role}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RegistryError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Splits, RegistryError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Splits, RegistryError> {
        let bad = |line: u64, message: String| RegistryError::SplitParse { line, message };
        let mut lines = text.lines();
        let preamble = lines.next().ok_or_else(|| bad(1, "missing preamble".into()))?;
        let mut seed = None;
        let mut train = None;
        let mut validation = None;
        for kv in preamble.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(1, format!("malformed {kv:?}")))?;
            match k {
                "seed" => seed = v.parse().ok(),
                "train" => train = v.parse().ok(),
                "validation" => validation = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(seed), Some(train), Some(validation)) = (seed, train, validation) else {
            return Err(bad(1, "preamble must carry seed, train and validation".into()));
        };
        if lines.next().map(str::trim) != Some("identity_id,role") {
            return Err(bad(2, "expected header identity_id,role".into()));
        }
        let mut sets: [BTreeSet<String>; 3] = Default::default();
        for (i, line) in lines.enumerate() {
            let n = i as u64 + 3;
            if line.trim().is_empty() {
                continue;
            }
            let (id, role) = line.split_once(',').ok_or_else(|| bad(n, "expected identity_id,role".into()))?;
            let role: Role = role.trim().parse().map_err(|m| bad(n, m))?;
            if sets.iter().any(|s| s.contains(id)) {
                return Err(bad(n, format!("identity {id:?} assigned twice")));
            }
            sets[role as usize].insert(id.to_string());
        }
        let [t, v, h] = sets;
        Ok(Splits {
            seed,
            fractions: (train, validation),
            assignments: [
                SplitAssignment { role: Role::Train, identity_ids: t },
                SplitAssignment { role: Role::Validation, identity_ids: v },
                SplitAssignment { role: Role::Holdout, identity_ids: h },
            ],
        })
    }
}

/// Default train/validation fractions; the remainder is held out.
pub const DEFAULT_SPLIT_FRACTIONS: (f64, f64) = (0.8, 0.1);

const FRACTION_EPS: f64 = 1e-9;

/// Assigns whole identities to train, validation and holdout.
///
/// Identities are sorted, shuffled with a seeded generator and cut at
/// `round(train * n)` and `round(validation * n)`. A role whose fraction is
/// positive but which would receive nobody is an error.
pub fn split_identities(index: &DatasetIndex, fractions: (f64, f64), seed: u64) -> Result<Splits, RegistryError> {
    let (train, validation) = fractions;
    if !(train.is_finite() && validation.is_finite()) || train <= 0.0 || validation < 0.0 || train + validation > 1.0 + FRACTION_EPS {
        return Err(RegistryError::InvalidFractions(format!(
            "train={train} validation={validation}; need train > 0, validation >= 0, sum <= 1"
        )));
    }
    let holdout = (1.0 - train - validation).max(0.0);
    let mut ids: Vec<String> = index.identity_map().keys().cloned().collect();
    let n = ids.len();
    let mut r = rng::seeded(rng::derive_seed(seed, "split_identities"));
    ids.shuffle(&mut r);

    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((validation * n as f64).round() as usize).min(n - n_train);
    let n_hold = n - n_train - n_val;
    for (role, frac, count) in [
        (Role::Train, train, n_train),
        (Role::Validation, validation, n_val),
        (Role::Holdout, holdout, n_hold),
    ] {
        if frac > FRACTION_EPS && count == 0 {
            return Err(RegistryError::InsufficientIdentities { role, available: n });
        }
    }
    let mut it = ids.into_iter();
    let t: BTreeSet<String> = it.by_ref().take(n_train).collect();
    let v: BTreeSet<String> = it.by_ref().take(n_val).collect();
    let h: BTreeSet<String> = it.collect();
    Ok(Splits {
        seed,
        fractions,
        assignments: [
            SplitAssignment { role: Role::Train, identity_ids: t },
            SplitAssignment { role: Role::Validation, identity_ids: v },
            SplitAssignment { role: Role::Holdout, identity_ids: h },
        ],
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantStats {
    pub identities: usize,
    pub images: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub unmasked: VariantStats,
    pub masked: VariantStats,
}

impl IndexStats {
    pub fn get(&self, variant: Variant) -> VariantStats {
        match variant {
            Variant::Unmasked => self.unmasked,
            Variant::Masked => self.masked,
        }
    }
}

/// Identity and image counts per variant.
pub fn stats(index: &DatasetIndex) -> IndexStats {
    let mut s = IndexStats::default();
    for entry in index.identity_map().values() {
        for (v, slot) in [(Variant::Unmasked, &mut s.unmasked), (Variant::Masked, &mut s.masked)] {
            let n = entry.get(v).len();
            if n > 0 {
                slot.identities += 1;
                slot.images += n;
            }
        }
    }
    s
}

/// Builds a manifest from a `root/<identity>/<image>` directory tree. Every
/// image is recorded with the given variant.
pub fn scan_directory(root: &Path, dataset_id: &str, variant: Variant) -> Result<DatasetIndex, RegistryError> {
    let mut records = Vec::new();
    let mut identities: Vec<_> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .collect();
    identities.sort_by_key(|e| e.file_name());
    for ident in identities {
        let identity_id = ident.file_name().to_string_lossy().into_owned();
        let mut files: Vec<_> = fs::read_dir(ident.path())
            .map_err(io_err(&ident.path()))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for f in files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
            records.push(ImageRecord {
                image_id: format!("{identity_id}/{stem}"),
                identity_id: identity_id.clone(),
                dataset_id: dataset_id.to_string(),
                variant,
                path: rel,
            });
        }
    }
    DatasetIndex::new(dataset_id, root.to_path_buf(), records)
}

/// Writes raw bytes, creating parent directories.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)
}
