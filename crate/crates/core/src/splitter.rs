//! Patient-wise Training/Validation/Test partitions.
//!
//! Images are never split individually: a patient and all of its images land
//! in exactly one split. Assignment is stratified by class, so each split gets
//! an exact number of ALL and HEM patients.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClassCounts, DatasetManifest, ImageRecord, Label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Training,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Training, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "training" | "train" => Ok(Split::Training),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Requested number of patients of each class in one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTargets {
    pub all: usize,
    pub hem: usize,
}

impl ClassTargets {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::All => self.all,
            Label::Hem => self.hem,
        }
    }

    pub fn total(&self) -> usize {
        self.all + self.hem
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitTargets {
    pub training: ClassTargets,
    pub validation: ClassTargets,
    pub test: ClassTargets,
}

impl Default for SplitTargets {
    /// The published 101-patient protocol: 48/32 training, 6/4 validation,
    /// 6/5 test (ALL/HEM).
    fn default() -> Self {
        SplitTargets {
            training: ClassTargets { all: 48, hem: 32 },
            validation: ClassTargets { all: 6, hem: 4 },
            test: ClassTargets { all: 6, hem: 5 },
        }
    }
}

impl SplitTargets {
    pub fn get(&self, split: Split) -> ClassTargets {
        match split {
            Split::Training => self.training,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    /// Per-class patient counts from split fractions, rounded by largest
    /// remainder. Every split receives at least one patient of each class.
    pub fn proportional(manifest: &DatasetManifest, fractions: [f64; 3]) -> Result<SplitTargets> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) || sum <= 0.0 {
            return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
        }
        let mut per_class = [[0usize; 3]; 2];
        for label in Label::BOTH {
            let n = manifest.patients_of(label).len();
            if n < 3 {
                return Err(Error::InfeasibleSplit(format!(
                    "class {label} has {n} patients; at least 3 are needed for three splits"
                )));
            }
            let spare = n - 3;
            let exact: Vec<f64> = fractions.iter().map(|f| f / sum * spare as f64).collect();
            let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
            let mut order: Vec<usize> = (0..3).collect();
            order.sort_by(|&a, &b| {
                let ra = exact[a] - exact[a].floor();
                let rb = exact[b] - exact[b].floor();
                rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
            });
            let mut left = spare - counts.iter().sum::<usize>();
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[i] += 1;
                left -= 1;
            }
            for (slot, c) in per_class[label.index()].iter_mut().zip(counts) {
                *slot = c + 1;
            }
        }
        let at = |i: usize| ClassTargets {
            hem: per_class[Label::Hem.index()][i],
            all: per_class[Label::All.index()][i],
        };
        Ok(SplitTargets {
            training: at(0),
            validation: at(1),
            test: at(2),
        })
    }

    fn check(&self, manifest: &DatasetManifest) -> Result<()> {
        for label in Label::BOTH {
            let available = manifest.patients_of(label).len();
            let requested: usize = Split::ALL.iter().map(|s| self.get(*s).get(label)).sum();
            if requested != available {
                let deficit = requested as i64 - available as i64;
                return Err(Error::InfeasibleSplit(format!(
                    "class {label}: targets request {requested} patients but the manifest has \
                     {available} (deficit {deficit:+})"
                )));
            }
            for split in Split::ALL {
                if self.get(split).get(label) == 0 {
                    return Err(Error::InfeasibleSplit(format!(
                        "class {label}: split {split} must receive at least one patient"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub all: ClassCounts,
    pub hem: ClassCounts,
}

impl SplitCounts {
    pub fn class(&self, label: Label) -> ClassCounts {
        match label {
            Label::All => self.all,
            Label::Hem => self.hem,
        }
    }

    pub fn patients(&self) -> usize {
        self.all.patients + self.hem.patients
    }

    pub fn images(&self) -> usize {
        self.all.images + self.hem.images
    }
}

/// patient → split, plus the seed it was drawn with and the resulting counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    assignment: BTreeMap<String, Split>,
    seed: u64,
    counts: BTreeMap<Split, SplitCounts>,
}

impl SplitAssignment {
    /// Wraps an explicit assignment. Every assigned patient must exist in the
    /// manifest; coverage of the manifest is checked by [`materialize`].
    pub fn from_map(
        manifest: &DatasetManifest,
        assignment: BTreeMap<String, Split>,
        seed: u64,
    ) -> Result<SplitAssignment> {
        let mut counts: BTreeMap<Split, SplitCounts> =
            Split::ALL.iter().map(|s| (*s, SplitCounts::default())).collect();
        for (patient, split) in &assignment {
            let info = manifest
                .patients()
                .get(patient)
                .ok_or_else(|| Error::Integrity(format!("split assigns unknown patient '{patient}'")))?;
            let entry = counts.get_mut(split).expect("all splits present");
            let class = match info.label {
                Label::All => &mut entry.all,
                Label::Hem => &mut entry.hem,
            };
            class.patients += 1;
            class.images += info.image_count;
        }
        Ok(SplitAssignment {
            assignment,
            seed,
            counts,
        })
    }

    pub fn get(&self, patient_id: &str) -> Option<Split> {
        self.assignment.get(patient_id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, Split> {
        &self.assignment
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        self.counts.get(&split).copied().unwrap_or_default()
    }

    pub fn patients_in(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Checks the partition invariants against the manifest: full coverage
    /// and at least one patient of each class per split. Overlap between
    /// splits cannot be represented by construction.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        for patient in manifest.patients().keys() {
            if !self.assignment.contains_key(patient) {
                return Err(Error::Unassigned(patient.clone()));
            }
        }
        for split in Split::ALL {
            let c = self.counts(split);
            for label in Label::BOTH {
                if c.class(label).patients == 0 {
                    return Err(Error::Integrity(format!("split {split} has no {label} patients")));
                }
            }
        }
        Ok(())
    }
}

fn stratified_assign(
    manifest: &DatasetManifest,
    targets: &SplitTargets,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<SplitAssignment> {
    targets.check(manifest)?;
    let mut assignment = BTreeMap::new();
    for label in Label::BOTH {
        // patients_of is sorted by id, so the shuffle input is canonical.
        let mut ids = manifest.patients_of(label);
        ids.shuffle(rng);
        let n_train = targets.training.get(label);
        let n_val = targets.validation.get(label);
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Training
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            assignment.insert(id.to_string(), split);
        }
    }
    SplitAssignment::from_map(manifest, assignment, seed)
}

/// The fixed experimental split, reproducible from its seed.
pub fn fixed_split(manifest: &DatasetManifest, targets: &SplitTargets, seed: u64) -> Result<SplitAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stratified_assign(manifest, targets, seed, &mut rng)
}

/// Random stratified resplit for repeated-evaluation runs. Uses a separate
/// ChaCha stream from [`fixed_split`] so a resplit seed never reproduces the
/// fixed split by accident.
pub fn random_resplit(manifest: &DatasetManifest, targets: &SplitTargets, seed: u64) -> Result<SplitAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RESPLIT_STREAM);
    stratified_assign(manifest, targets, seed, &mut rng)
}

const RESPLIT_STREAM: u64 = 0x5e_5971;

/// Records of one split, tagged so consumers can check where they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRecords {
    pub split: Split,
    pub records: Vec<ImageRecord>,
}

impl SplitRecords {
    pub fn new(split: Split, records: Vec<ImageRecord>) -> Self {
        SplitRecords { split, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaterializedSplit {
    pub training: SplitRecords,
    pub validation: SplitRecords,
    pub test: SplitRecords,
}

impl MaterializedSplit {
    pub fn get(&self, split: Split) -> &SplitRecords {
        match split {
            Split::Training => &self.training,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Routes every manifest record to its patient's split.
pub fn materialize(manifest: &DatasetManifest, split: &SplitAssignment) -> Result<MaterializedSplit> {
    let mut out: BTreeMap<Split, Vec<ImageRecord>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for record in manifest.records() {
        let target = split
            .get(&record.patient_id)
            .ok_or_else(|| Error::Unassigned(record.patient_id.clone()))?;
        if target != Split::Training && !record.source.is_original() {
            return Err(Error::Integrity(format!(
                "non-original record '{}' routed to {target}",
                record.image_id
            )));
        }
        out.get_mut(&target).expect("all splits present").push(record.clone());
    }
    let mut take = |s: Split| SplitRecords::new(s, out.remove(&s).unwrap_or_default());
    Ok(MaterializedSplit {
        training: take(Split::Training),
        validation: take(Split::Validation),
        test: take(Split::Test),
    })
}

/// Image counts printed in the published split table, kept only to report how
/// far an actual manifest deviates from them. The published numbers do not
/// add up to the published dataset totals, so they are never used as truth.
pub const PUBLISHED_IMAGE_COUNTS: [(Split, Label, usize); 4] = [
    (Split::Validation, Label::All, 616),
    (Split::Validation, Label::Hem, 983),
    (Split::Test, Label::All, 1102),
    (Split::Test, Label::Hem, 982),
];

/// Human-readable differences between actual and published image counts.
pub fn image_count_discrepancies(split: &SplitAssignment) -> Vec<String> {
    PUBLISHED_IMAGE_COUNTS
        .iter()
        .filter_map(|&(s, label, published)| {
            let actual = split.counts(s).class(label).images;
            (actual != published)
                .then(|| format!("{s}/{label}: manifest has {actual} images, published table lists {published}"))
        })
        .collect()
}

pub fn write_split(split: &SplitAssignment, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::new();
    writeln!(buf, "# seed={}", split.seed).unwrap();
    writeln!(buf, "patient_id\tsplit").unwrap();
    for (patient, s) in &split.assignment {
        writeln!(buf, "{patient}\t{s}").unwrap();
    }
    fs::write(out, buf).map_err(|e| Error::io(out, e))
}

pub fn read_split(input: &Path, manifest: &DatasetManifest) -> Result<SplitAssignment> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let file = input.display().to_string();
    let err = |line: usize, message: String| Error::Parse {
        file: file.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let seed = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("# seed=")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| err(1, "expected '# seed=<integer>'".into()))?,
        None => return Err(err(1, "empty split file".into())),
    };
    match lines.next() {
        Some((_, "patient_id\tsplit")) => {}
        _ => return Err(err(2, "expected header 'patient_id<TAB>split'".into())),
    }
    let mut assignment = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(patient), Some(s), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(i + 1, "expected 2 fields".into()));
        };
        let s = s.parse::<Split>().map_err(|m| err(i + 1, m))?;
        if assignment.insert(patient.to_string(), s).is_some() {
            return Err(err(i + 1, format!("patient '{patient}' assigned twice")));
        }
    }
    SplitAssignment::from_map(manifest, assignment, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ImageRecord, Source};
    use std::collections::HashSet;

    pub(crate) fn synthetic_manifest(all: usize, hem: usize, images_per_patient: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for (label, n, prefix) in [(Label::All, all, "A"), (Label::Hem, hem, "H")] {
            for p in 0..n {
                for i in 0..images_per_patient {
                    let id = format!("{prefix}{p:03}/img{i}.bmp");
                    records.push(ImageRecord {
                        image_id: id.clone(),
                        path: format!("/data/{id}").into(),
                        patient_id: format!("{prefix}{p:03}"),
                        label,
                        source: Source::Original,
                    });
                }
            }
        }
        DatasetManifest::from_records(records).unwrap()
    }

    fn small_targets() -> SplitTargets {
        SplitTargets {
            training: ClassTargets { all: 4, hem: 2 },
            validation: ClassTargets { all: 1, hem: 1 },
            test: ClassTargets { all: 1, hem: 1 },
        }
    }

    #[test]
    fn ten_patient_split_counts() {
        let m = synthetic_manifest(6, 4, 3);
        let s = fixed_split(&m, &small_targets(), 11).unwrap();
        // Enumerate the assignment directly rather than trusting the counts.
        let mut tally = BTreeMap::new();
        for (p, split) in s.assignment() {
            let label = m.patients()[p].label;
            *tally.entry((*split, label)).or_insert(0usize) += 1;
        }
        assert_eq!(tally[&(Split::Training, Label::All)], 4);
        assert_eq!(tally[&(Split::Training, Label::Hem)], 2);
        assert_eq!(tally[&(Split::Validation, Label::All)], 1);
        assert_eq!(tally[&(Split::Validation, Label::Hem)], 1);
        assert_eq!(tally[&(Split::Test, Label::All)], 1);
        assert_eq!(tally[&(Split::Test, Label::Hem)], 1);
        assert_eq!(s.counts(Split::Training).images(), 18);
        s.validate(&m).unwrap();
    }

    #[test]
    fn published_targets_on_101_patients() {
        let m = synthetic_manifest(60, 41, 1);
        let s = fixed_split(&m, &SplitTargets::default(), 0).unwrap();
        assert_eq!(s.counts(Split::Training).patients(), 80);
        assert_eq!(s.counts(Split::Validation).patients(), 10);
        assert_eq!(s.counts(Split::Test).patients(), 11);
    }

    #[test]
    fn infeasible_targets_name_class_and_deficit() {
        let m = synthetic_manifest(5, 4, 1);
        let err = fixed_split(&m, &small_targets(), 0).unwrap_err().to_string();
        assert!(err.contains("class ALL") && err.contains("+1"), "{err}");
    }

    #[test]
    fn resplit_is_seed_deterministic() {
        let m = synthetic_manifest(60, 41, 2);
        let t = SplitTargets::default();
        assert_eq!(random_resplit(&m, &t, 7).unwrap(), random_resplit(&m, &t, 7).unwrap());
        assert_ne!(random_resplit(&m, &t, 7).unwrap(), random_resplit(&m, &t, 8).unwrap());
    }

    #[test]
    fn resplits_never_leak() {
        let m = synthetic_manifest(60, 41, 1);
        let t = SplitTargets::default();
        for seed in 0..100 {
            let s = random_resplit(&m, &t, seed).unwrap();
            let sets: Vec<HashSet<&str>> = Split::ALL
                .iter()
                .map(|sp| s.patients_in(*sp).into_iter().collect())
                .collect();
            for i in 0..3 {
                for j in (i + 1)..3 {
                    assert!(sets[i].is_disjoint(&sets[j]));
                }
            }
            s.validate(&m).unwrap();
        }
    }

    #[test]
    fn materialize_routes_by_patient() {
        let m = synthetic_manifest(1, 1, 2);
        let mut map = BTreeMap::new();
        map.insert("A000".to_string(), Split::Training);
        map.insert("H000".to_string(), Split::Test);
        let s = SplitAssignment::from_map(&m, map, 0).unwrap();
        let out = materialize(&m, &s).unwrap();
        assert_eq!((out.training.len(), out.validation.len(), out.test.len()), (2, 0, 2));
    }

    #[test]
    fn materialize_rejects_unassigned() {
        let m = synthetic_manifest(1, 1, 1);
        let mut map = BTreeMap::new();
        map.insert("A000".to_string(), Split::Training);
        let s = SplitAssignment::from_map(&m, map, 0).unwrap();
        assert!(matches!(materialize(&m, &s), Err(Error::Unassigned(p)) if p == "H000"));
    }

    #[test]
    fn materialize_empty_manifest() {
        let m = DatasetManifest::from_records(vec![]).unwrap();
        let s = SplitAssignment::from_map(&m, BTreeMap::new(), 0).unwrap();
        let out = materialize(&m, &s).unwrap();
        assert!(out.training.is_empty() && out.validation.is_empty() && out.test.is_empty());
    }

    #[test]
    fn proportional_targets_cover_every_patient() {
        let m = synthetic_manifest(60, 41, 1);
        let t = SplitTargets::proportional(&m, [0.79, 0.15, 0.06]).unwrap();
        assert_eq!(t.training.all + t.validation.all + t.test.all, 60);
        assert_eq!(t.training.hem + t.validation.hem + t.test.hem, 41);
        random_resplit(&m, &t, 3).unwrap().validate(&m).unwrap();
    }

    #[test]
    fn split_file_round_trip_and_bytes() {
        let m = synthetic_manifest(6, 4, 1);
        let s = fixed_split(&m, &small_targets(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        write_split(&s, &a).unwrap();
        write_split(&fixed_split(&m, &small_targets(), 5).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_split(&a, &m).unwrap(), s);
    }
}
