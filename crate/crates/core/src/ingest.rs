//! Dataset discovery and the on-disk manifest.
//!
//! A manifest is a flat table of labeled cell images, one row per file, with
//! the patient each image came from. Every downstream step (splitting,
//! balancing, training) works from a manifest rather than from the directory
//! tree, so the table is the single record of what a run saw.
//!
//! Patient identity and class are parsed out of each file's path by a
//! [`NamingRule`]. The default rule matches the public C-NMC 2019 layout,
//! where training files are named `UID_<patient>_<image>_<cell>_<all|hem>.bmp`
//! (healthy patients carry an `H` prefix, e.g. `UID_H10_...`). The preliminary
//! test folder ships renamed files (`1.bmp`, `2.bmp`, ...) plus a label table
//! mapping the new names back to the original `UID_...` names; point
//! [`NamingRule::alias_table`] at that file to ingest it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Class label. The numeric value is the class index used by the model:
/// the healthy class is 0 and the malignant class is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HEM")]
    Hem = 0,
    #[serde(rename = "ALL")]
    All = 1,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Hem, Label::All];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Hem),
            1 => Some(Label::All),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hem => "HEM",
            Label::All => "ALL",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Hem => Label::All,
            Label::All => Label::Hem,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HEM" | "0" => Ok(Label::Hem),
            "ALL" | "1" => Ok(Label::All),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

/// Where a record came from. Replicas point at the same file as their
/// original and are distinguished by a replica index, which also keys the
/// record's augmentation stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Original,
    AugmentedReplica(u32),
}

impl Source {
    pub fn is_original(self) -> bool {
        matches!(self, Source::Original)
    }

    pub fn replica_index(self) -> u32 {
        match self {
            Source::Original => 0,
            Source::AugmentedReplica(k) => k,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Original => f.write_str("original"),
            Source::AugmentedReplica(k) => write!(f, "augmented-replica:{k}"),
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s == "original" {
            return Ok(Source::Original);
        }
        match s.strip_prefix("augmented-replica:") {
            Some(k) => k
                .parse::<u32>()
                .ok()
                .filter(|&k| k > 0)
                .map(Source::AugmentedReplica)
                .ok_or_else(|| format!("bad replica index in '{s}'")),
            None => Err(format!("unknown source '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub patient_id: String,
    pub label: Label,
    pub source: Source,
}

impl ImageRecord {
    /// The same image as a replica with the given index.
    pub fn replica(&self, index: u32) -> ImageRecord {
        ImageRecord {
            source: Source::AugmentedReplica(index),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub label: Label,
    pub image_count: usize,
}

/// A validated collection of records plus per-patient aggregates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    patients: BTreeMap<String, PatientInfo>,
}

impl DatasetManifest {
    /// Validates the record set and derives the patient table. Records are
    /// sorted by path so equal sets always produce equal manifests.
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.path.cmp(&b.path).then_with(|| a.image_id.cmp(&b.image_id)));

        let mut ids = HashSet::with_capacity(records.len());
        let mut paths = HashSet::with_capacity(records.len());
        let mut patients: BTreeMap<String, PatientInfo> = BTreeMap::new();
        for r in &records {
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::Integrity(format!("duplicate image_id '{}'", r.image_id)));
            }
            if !paths.insert(r.path.as_path()) {
                return Err(Error::Integrity(format!("duplicate path '{}'", r.path.display())));
            }
            let entry = patients.entry(r.patient_id.clone()).or_insert(PatientInfo {
                label: r.label,
                image_count: 0,
            });
            if entry.label != r.label {
                return Err(Error::Integrity(format!(
                    "patient '{}' has conflicting labels ({} and {})",
                    r.patient_id, entry.label, r.label
                )));
            }
            entry.image_count += 1;
        }
        Ok(DatasetManifest { records, patients })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn patients(&self) -> &BTreeMap<String, PatientInfo> {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Patient ids of one class, in sorted order.
    pub fn patients_of(&self, label: Label) -> Vec<&str> {
        self.patients
            .iter()
            .filter(|(_, info)| info.label == label)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Rename table for datasets whose files were renamed after labeling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AliasTable {
    pub path: PathBuf,
    /// Column holding the file name as it appears on disk.
    #[serde(default = "default_alias_from")]
    pub from_column: String,
    /// Column holding the name the naming pattern should be applied to.
    #[serde(default = "default_alias_to")]
    pub to_column: String,
}

fn default_alias_from() -> String {
    "new_names".into()
}

fn default_alias_to() -> String {
    "Patient_ID".into()
}

/// How patient id and label are parsed from a file path.
///
/// `pattern` is a regular expression searched in the path relative to the
/// dataset root (with `/` separators). It must define the named groups
/// `patient` and `label`; the label capture is compared case-insensitively
/// against `all_tokens` and `hem_tokens`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamingRule {
    #[serde(default = "default_pattern")]
    pub pattern: String,
    #[serde(default = "default_all_tokens")]
    pub all_tokens: Vec<String>,
    #[serde(default = "default_hem_tokens")]
    pub hem_tokens: Vec<String>,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
    #[serde(default)]
    pub alias_table: Option<AliasTable>,
}

pub const CNMC_PATTERN: &str = r"(?i)UID_(?P<patient>H?\d+)_\d+_\d+_(?P<label>all|hem)\.[a-z]+$";

fn default_pattern() -> String {
    CNMC_PATTERN.into()
}

fn default_all_tokens() -> Vec<String> {
    vec!["all".into()]
}

fn default_hem_tokens() -> Vec<String> {
    vec!["hem".into()]
}

fn default_extensions() -> Vec<String> {
    ["bmp", "png", "jpg", "jpeg", "tif", "tiff"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl Default for NamingRule {
    fn default() -> Self {
        NamingRule {
            pattern: default_pattern(),
            all_tokens: default_all_tokens(),
            hem_tokens: default_hem_tokens(),
            extensions: default_extensions(),
            alias_table: None,
        }
    }
}

struct CompiledRule<'a> {
    regex: Regex,
    rule: &'a NamingRule,
    aliases: HashMap<String, String>,
}

impl<'a> CompiledRule<'a> {
    fn new(rule: &'a NamingRule, root: &Path) -> Result<Self> {
        let regex = Regex::new(&rule.pattern).map_err(|e| Error::Config(format!("naming_rule.pattern: {e}")))?;
        for group in ["patient", "label"] {
            if !regex.capture_names().flatten().any(|n| n == group) {
                return Err(Error::Config(format!(
                    "naming_rule.pattern must define the named group '{group}'"
                )));
            }
        }
        let aliases = match &rule.alias_table {
            Some(table) => load_aliases(table, root)?,
            None => HashMap::new(),
        };
        Ok(CompiledRule { regex, rule, aliases })
    }

    fn has_image_extension(&self, path: &Path) -> bool {
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| self.rule.extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
            .unwrap_or(false)
    }

    fn parse(&self, relative: &str) -> Option<(String, Label)> {
        let file_name = relative.rsplit('/').next().unwrap_or(relative);
        let subject = match self.aliases.get(file_name) {
            Some(canonical) => {
                let dir = &relative[..relative.len() - file_name.len()];
                format!("{dir}{canonical}")
            }
            None => relative.to_string(),
        };
        let caps = self.regex.captures(&subject)?;
        let patient = caps.name("patient")?.as_str().to_string();
        let token = caps.name("label")?.as_str();
        let is = |tokens: &[String]| tokens.iter().any(|t| t.eq_ignore_ascii_case(token));
        let label = if is(&self.rule.all_tokens) {
            Label::All
        } else if is(&self.rule.hem_tokens) {
            Label::Hem
        } else {
            return None;
        };
        if patient.is_empty() {
            return None;
        }
        Some((patient, label))
    }
}

fn load_aliases(table: &AliasTable, root: &Path) -> Result<HashMap<String, String>> {
    let path = if table.path.is_absolute() {
        table.path.clone()
    } else {
        root.join(&table.path)
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(&path)
        .map_err(|e| Error::Config(format!("alias table {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Config(format!("alias table {} has no column '{name}'", path.display())))
    };
    let from = column(&table.from_column)?;
    let to = column(&table.to_column)?;
    let mut map = HashMap::new();
    for row in reader.records() {
        let row = row?;
        map.insert(row[from].trim().to_string(), row[to].trim().to_string());
    }
    Ok(map)
}

fn relative_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Walks `root` and builds a manifest of every image file the rule accepts.
///
/// Image ids are the paths relative to `root`; records come back sorted by
/// path. Files with an image extension that the rule cannot parse are
/// reported all at once rather than skipped.
pub fn scan_dataset(root: &Path, rule: &NamingRule) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let compiled = CompiledRule::new(rule, root)?;

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() || !compiled.has_image_extension(entry.path()) {
            continue;
        }
        let key = relative_key(root, entry.path());
        match compiled.parse(&key) {
            Some((patient_id, label)) => records.push(ImageRecord {
                image_id: key,
                path: entry.path().to_path_buf(),
                patient_id,
                label,
                source: Source::Original,
            }),
            None => rejected.push(entry.path().to_path_buf()),
        }
    }

    if !rejected.is_empty() {
        return Err(Error::NamingRule(rejected));
    }
    if records.is_empty() {
        return Err(Error::NoImages(root.to_path_buf()));
    }
    DatasetManifest::from_records(records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub patients: usize,
    pub images: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub all: ClassCounts,
    pub hem: ClassCounts,
    pub total_patients: usize,
    pub total_images: usize,
}

impl DatasetSummary {
    pub fn class(&self, label: Label) -> ClassCounts {
        match label {
            Label::All => self.all,
            Label::Hem => self.hem,
        }
    }
}

pub fn summarize(manifest: &DatasetManifest) -> DatasetSummary {
    let mut summary = DatasetSummary::default();
    for info in manifest.patients().values() {
        let class = match info.label {
            Label::All => &mut summary.all,
            Label::Hem => &mut summary.hem,
        };
        class.patients += 1;
        class.images += info.image_count;
    }
    summary.total_patients = summary.all.patients + summary.hem.patients;
    summary.total_images = summary.all.images + summary.hem.images;
    debug_assert_eq!(summary.total_images, manifest.len());
    summary
}

pub const MANIFEST_HEADER: [&str; 5] = ["image_id", "path", "patient_id", "label", "source"];

/// Writes the manifest as a tab-separated table with a fixed header.
pub fn write_manifest(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut writer = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(out)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", out.display())))?;
    writer.write_record(MANIFEST_HEADER)?;
    for r in manifest.records() {
        let path = r
            .path
            .to_str()
            .ok_or_else(|| Error::InvalidInput(format!("non UTF-8 path: {}", r.path.display())))?;
        writer.write_record([
            r.image_id.as_str(),
            path,
            r.patient_id.as_str(),
            r.label.as_str(),
            &r.source.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    Ok(())
}

pub fn read_manifest(input: &Path) -> Result<DatasetManifest> {
    let file = input.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        file: file.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .quoting(true)
        .from_path(input)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(input, std::io::Error::other(e.to_string())),
            _ => Error::from(e),
        })?;

    let mut rows = reader.records();
    match rows.next() {
        Some(Ok(header)) if header.iter().eq(MANIFEST_HEADER.iter().copied()) => {}
        Some(Ok(header)) => {
            return Err(parse_err(
                1,
                format!(
                    "expected header {:?}, found {:?}",
                    MANIFEST_HEADER,
                    header.iter().collect::<Vec<_>>()
                ),
            ))
        }
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        None => return Err(parse_err(1, "missing header".into())),
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let image_id = row[0].to_string();
        if image_id.is_empty() {
            return Err(parse_err(line, "empty image_id".into()));
        }
        if !seen.insert(image_id.clone()) {
            return Err(parse_err(line, format!("duplicate image_id '{image_id}'")));
        }
        let label = row[3].parse::<Label>().map_err(|m| parse_err(line, m))?;
        let source = row[4].parse::<Source>().map_err(|m| parse_err(line, m))?;
        if row[2].is_empty() {
            return Err(parse_err(line, "empty patient_id".into()));
        }
        records.push(ImageRecord {
            image_id,
            path: PathBuf::from(&row[1]),
            patient_id: row[2].to_string(),
            label,
            source,
        });
    }
    DatasetManifest::from_records(records)
}
