//! Scan manifests, subject-level splitting and co-occurrence trees.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disease::{Disease, DiseaseSet};
use crate::error::{Error, Result};
use crate::rba::{self, LabelVector};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub labels: LabelVector,
}

impl ManifestEntry {
    pub fn scan_id(&self) -> &str {
        &self.labels.scan_id
    }
}

/// Per-class positive scan counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ClassCounts {
    pub atelectasis: usize,
    pub nodule: usize,
    pub emphysema: usize,
    pub effusion: usize,
    pub other: usize,
    pub no_apparent_disease: usize,
}

impl ClassCounts {
    pub fn get(&self, d: Disease) -> usize {
        match d {
            Disease::Atelectasis => self.atelectasis,
            Disease::Nodule => self.nodule,
            Disease::Emphysema => self.emphysema,
            Disease::Effusion => self.effusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Builds a manifest from validated entries.
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.scan_id()) {
                return Err(Error::DuplicateScanId(e.scan_id().to_string()));
            }
            if !e.labels.is_consistent() {
                return Err(Error::InvalidLabel(e.scan_id().to_string()));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Unique subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| e.subject_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn class_counts(&self) -> ClassCounts {
        let mut c = ClassCounts::default();
        for e in &self.entries {
            let l = &e.labels;
            c.atelectasis += usize::from(l.atelectasis);
            c.nodule += usize::from(l.nodule);
            c.emphysema += usize::from(l.emphysema);
            c.effusion += usize::from(l.effusion);
            c.other += usize::from(l.other_disease);
            c.no_apparent_disease += usize::from(l.no_apparent_disease);
        }
        c
    }

    /// Entries whose subject is assigned to `split`. Subjects absent from
    /// the assignment are dropped.
    pub fn subset(&self, assignment: &SplitAssignment, split: Split) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| assignment.get(&e.subject_id) == Some(split))
                .cloned()
                .collect(),
        }
    }
}

pub fn build_manifest(labels: &[LabelVector], subjects: &HashMap<String, String>) -> Result<Manifest> {
    let entries = labels
        .iter()
        .map(|l| {
            let subject_id = subjects
                .get(&l.scan_id)
                .ok_or_else(|| Error::MissingSubject(l.scan_id.clone()))?;
            Ok(ManifestEntry {
                subject_id: subject_id.clone(),
                labels: l.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::from_entries(entries)
}

pub const MANIFEST_HEADER: [&str; 8] = [
    "scan_id",
    "subject_id",
    "atelectasis",
    "nodule",
    "emphysema",
    "effusion",
    "other",
    "no_apparent_disease",
];

pub fn write_manifest<W: Write>(writer: W, manifest: &Manifest) -> Result<()> {
    let err = |e: csv::Error| Error::parse("manifest csv", e);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER).map_err(err)?;
    for e in &manifest.entries {
        let f = rba::label_fields(&e.labels);
        w.write_record([e.scan_id(), e.subject_id.as_str()].into_iter().chain(f))
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("manifest csv", e))
}

pub fn read_manifest<R: Read>(reader: R) -> Result<Manifest> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse("manifest csv", e))?.clone();
    if headers.iter().ne(MANIFEST_HEADER) {
        return Err(Error::parse("manifest csv", "unexpected header"));
    }
    let entries = r
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let ctx = format!("manifest csv row {}", i + 1);
            let rec = rec.map_err(|e| Error::parse(&ctx, e))?;
            let fields: Vec<&str> = rec.iter().collect();
            Ok(ManifestEntry {
                subject_id: fields[1].to_string(),
                labels: rba::parse_label_fields(fields[0], &fields[2..], &ctx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::from_entries(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::parse("split", format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = SplitFractions {
            train,
            validation,
            test,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        let ok = parts.iter().all(|p| p.is_finite() && *p >= 0.0) && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidFractions(parts))
        }
    }

    /// Cut points `(⌊train·k⌋, ⌊(train+validation)·k⌋)` for a stratum of
    /// `k` subjects. A 1e-9 slack absorbs binary rounding of the products.
    pub fn cuts(&self, k: usize) -> (usize, usize) {
        let cut = |f: f64| ((f * k as f64 + 1e-9).floor() as usize).min(k);
        let first = cut(self.train);
        (first, cut(self.train + self.validation).max(first))
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    /// `train,validation,test`, e.g. `0.7,0.15,0.15`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| Error::parse("fractions", e)))
            .collect::<Result<Vec<_>>>()?;
        match parts[..] {
            [a, b, c] => SplitFractions::new(a, b, c),
            _ => Err(Error::parse("fractions", "expected three comma-separated values")),
        }
    }
}

/// Subject → split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn from_map(seed: u64, assignment: BTreeMap<String, Split>) -> Self {
        SplitAssignment { seed, assignment }
    }

    pub fn get(&self, subject_id: &str) -> Option<Split> {
        self.assignment.get(subject_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.assignment.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn subjects_in(&self, split: Split) -> Vec<&str> {
        self.iter().filter(|(_, s)| *s == split).map(|(k, _)| k).collect()
    }
}

/// Subjects every one of whose scans is no-apparent-disease.
pub fn normal_subjects(manifest: &Manifest) -> BTreeMap<&str, bool> {
    let mut normal: BTreeMap<&str, bool> = BTreeMap::new();
    for e in manifest.entries() {
        *normal.entry(e.subject_id.as_str()).or_insert(true) &= e.labels.no_apparent_disease;
    }
    normal
}

/// Splits subjects into train/validation/test separately within the normal
/// and diseased strata.
///
/// Each stratum's subject ids are sorted, shuffled with [`rng::shuffle`]
/// on stream 0 (normal) or 1 (diseased) of `sub_seed(seed, "split")`, and
/// cut at [`SplitFractions::cuts`]; the remainder goes to test.
pub fn split_subjects(manifest: &Manifest, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let normal = normal_subjects(manifest);
    let split_seed = rng::sub_seed(seed, "split");
    let mut assignment = BTreeMap::new();
    for (stream, want_normal) in [(0u64, true), (1u64, false)] {
        // BTreeMap iteration is sorted by subject id.
        let mut stratum: Vec<&str> = normal
            .iter()
            .filter(|(_, n)| **n == want_normal)
            .map(|(s, _)| *s)
            .collect();
        rng::shuffle(&mut rng::stream(split_seed, stream), &mut stratum);
        let (a, b) = fractions.cuts(stratum.len());
        for (i, s) in stratum.into_iter().enumerate() {
            let split = if i < a {
                Split::Train
            } else if i < b {
                Split::Validation
            } else {
                Split::Test
            };
            assignment.insert(s.to_string(), split);
        }
    }
    Ok(SplitAssignment { seed, assignment })
}

pub fn write_split<W: Write>(writer: W, split: &SplitAssignment) -> Result<()> {
    let err = |e: csv::Error| Error::parse("split csv", e);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "split"]).map_err(err)?;
    for (s, sp) in split.iter() {
        w.write_record([s, sp.name()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("split csv", e))
}

/// Reads a split CSV. The seed is not part of the file and is set to 0.
pub fn read_split<R: Read>(reader: R) -> Result<SplitAssignment> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse("split csv", e))?.clone();
    if headers.iter().ne(["subject_id", "split"]) {
        return Err(Error::parse("split csv", "unexpected header"));
    }
    let mut assignment = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::parse("split csv", e))?;
        let split: Split = rec[1].parse()?;
        if assignment.insert(rec[0].to_string(), split).is_some() {
            return Err(Error::parse("split csv", format!("subject `{}` listed twice", &rec[0])));
        }
    }
    Ok(SplitAssignment { seed: 0, assignment })
}

/// Key of a co-occurrence node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Combo {
    /// Every scan of the subject is no-apparent-disease.
    NoApparent,
    /// Exact set of target diseases; empty when the subject has only
    /// non-target findings.
    Diseases(DiseaseSet),
}

impl Combo {
    pub fn names(&self) -> Vec<&'static str> {
        match self {
            Combo::NoApparent => vec!["no_apparent"],
            Combo::Diseases(s) => s.names(),
        }
    }
}

impl FromStr for Combo {
    type Err = Error;

    /// `no_apparent` or `+`-joined disease names.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "no_apparent" {
            Ok(Combo::NoApparent)
        } else {
            Ok(Combo::Diseases(s.parse()?))
        }
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub combo: Combo,
    pub n: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTree {
    pub total_subjects: usize,
    /// Sorted by descending `n`, ties by combo names.
    pub nodes: Vec<TreeNode>,
}

impl CooccurrenceTree {
    pub fn count(&self, combo: Combo) -> usize {
        self.nodes.iter().find(|n| n.combo == combo).map_or(0, |n| n.n)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Node<'a> {
            combo: Vec<&'a str>,
            n: usize,
            percent: f64,
        }
        #[derive(Serialize)]
        struct Tree<'a> {
            #[serde(rename = "N")]
            total: usize,
            nodes: Vec<Node<'a>>,
        }
        let tree = Tree {
            total: self.total_subjects,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    combo: n.combo.names(),
                    n: n.n,
                    percent: n.percent,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&tree).expect("tree serializes")
    }
}

/// Combination per unique subject: union of positives over the subject's
/// scans, or no-apparent when every scan is no-apparent-disease.
pub fn subject_combos(manifest: &Manifest) -> BTreeMap<&str, Combo> {
    let mut acc: BTreeMap<&str, (DiseaseSet, bool)> = BTreeMap::new();
    for e in manifest.entries() {
        let slot = acc.entry(e.subject_id.as_str()).or_insert((DiseaseSet::EMPTY, true));
        slot.0 = slot.0.union(e.labels.diseases());
        slot.1 &= e.labels.no_apparent_disease;
    }
    acc.into_iter()
        .map(|(s, (d, normal))| {
            let combo = if d.is_empty() && normal {
                Combo::NoApparent
            } else {
                Combo::Diseases(d)
            };
            (s, combo)
        })
        .collect()
}

pub fn build_cooccurrence_tree(manifest: &Manifest) -> Result<CooccurrenceTree> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let combos = subject_combos(manifest);
    let total = combos.len();
    let mut counts: HashMap<Combo, usize> = HashMap::new();
    for c in combos.into_values() {
        *counts.entry(c).or_default() += 1;
    }
    let mut nodes: Vec<TreeNode> = counts
        .into_iter()
        .map(|(combo, n)| TreeNode {
            combo,
            n,
            percent: n as f64 / total as f64,
        })
        .collect();
    nodes.sort_by(|a, b| b.n.cmp(&a.n).then_with(|| a.combo.names().cmp(&b.combo.names())));
    Ok(CooccurrenceTree {
        total_subjects: total,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(scan: &str, diseases: &[Disease], other: bool) -> LabelVector {
        LabelVector::from_findings(scan, diseases.iter().copied().collect(), other)
    }

    fn manifest(rows: &[(&str, &str, &[Disease])]) -> Manifest {
        Manifest::from_entries(
            rows.iter()
                .map(|(scan, subj, d)| ManifestEntry {
                    subject_id: subj.to_string(),
                    labels: lv(scan, d, false),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn builds_manifest() {
        assert!(build_manifest(&[], &HashMap::new()).unwrap().is_empty());
        let labels = vec![
            lv("c1", &[Disease::Nodule], false),
            lv("c2", &[], false),
            lv("c3", &[Disease::Nodule, Disease::Effusion], false),
        ];
        let subjects: HashMap<String, String> = [("c1", "s1"), ("c2", "s2"), ("c3", "s1")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let m = build_manifest(&labels, &subjects).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.subjects(), vec!["s1", "s2"]);
        let c = m.class_counts();
        assert_eq!((c.nodule, c.effusion, c.no_apparent_disease), (2, 1, 1));

        let mut partial = subjects.clone();
        partial.remove("c3");
        assert!(matches!(build_manifest(&labels, &partial), Err(Error::MissingSubject(s)) if s == "c3"));
    }

    #[test]
    fn rejects_inconsistent_labels() {
        let mut l = lv("c", &[Disease::Nodule], false);
        l.no_apparent_disease = true;
        let e = ManifestEntry {
            subject_id: "s".into(),
            labels: l,
        };
        assert!(matches!(Manifest::from_entries(vec![e]), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn split_ten_and_ten() {
        let mut rows = Vec::new();
        let names: Vec<(String, String)> = (0..20).map(|i| (format!("c{i}"), format!("s{i}"))).collect();
        for (i, (c, s)) in names.iter().enumerate() {
            let d: &[Disease] = if i < 10 { &[Disease::Nodule] } else { &[] };
            rows.push((c.as_str(), s.as_str(), d));
        }
        let m = manifest(&rows);
        let a = split_subjects(&m, SplitFractions::default(), 42).unwrap();
        assert_eq!(a.len(), 20);
        let normal = normal_subjects(&m);
        for want_normal in [true, false] {
            let count = |sp: Split| a.iter().filter(|(s, x)| *x == sp && normal[s] == want_normal).count();
            assert_eq!(
                (count(Split::Train), count(Split::Validation), count(Split::Test)),
                (7, 1, 2)
            );
        }
        assert_eq!(a, split_subjects(&m, SplitFractions::default(), 42).unwrap());
        assert_ne!(a, split_subjects(&m, SplitFractions::default(), 43).unwrap());
    }

    #[test]
    fn split_keeps_subject_scans_together() {
        let m = manifest(&[("c1", "s1", &[Disease::Nodule]), ("c2", "s1", &[]), ("c3", "s2", &[])]);
        let a = split_subjects(&m, SplitFractions::default(), 1).unwrap();
        assert_eq!(a.len(), 2);
        // s1 has a diseased scan so it is not normal.
        assert!(!normal_subjects(&m)["s1"]);
        let total: usize = Split::ALL.iter().map(|s| m.subset(&a, *s).len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_subjects(&Manifest::default(), SplitFractions::default(), 0),
            Err(Error::EmptyManifest)
        ));
        assert!(SplitFractions::new(0.7, 0.2, 0.2).is_err());
        assert!(SplitFractions::new(-0.1, 0.6, 0.5).is_err());
        assert_eq!(
            "0.7, 0.15,0.15".parse::<SplitFractions>().unwrap(),
            SplitFractions::default()
        );
    }

    #[test]
    fn cut_formula() {
        let f = SplitFractions::default();
        assert_eq!(f.cuts(10), (7, 8));
        assert_eq!(f.cuts(20), (14, 17));
        assert_eq!(f.cuts(0), (0, 0));
        assert_eq!(f.cuts(1), (0, 0));
        assert_eq!(f.cuts(3), (2, 2));
    }

    #[test]
    fn tree_examples() {
        let m = manifest(&[("c1", "s1", &[Disease::Nodule, Disease::Emphysema])]);
        let t = build_cooccurrence_tree(&m).unwrap();
        assert_eq!(t.total_subjects, 1);
        assert_eq!(
            t.nodes,
            vec![TreeNode {
                combo: Combo::Diseases("emphysema+nodule".parse().unwrap()),
                n: 1,
                percent: 1.0
            }]
        );

        let m = manifest(&[("c1", "s1", &[Disease::Effusion]), ("c2", "s2", &[])]);
        let t = build_cooccurrence_tree(&m).unwrap();
        assert_eq!(t.total_subjects, 2);
        assert_eq!(t.count(Combo::NoApparent), 1);
        assert_eq!(t.count(Combo::Diseases(DiseaseSet::EMPTY.with(Disease::Effusion))), 1);
        assert!(t.nodes.iter().all(|n| n.percent == 0.5));
        // Tie broken by combo names: "effusion" < "no_apparent".
        assert_eq!(t.nodes[0].combo.names(), vec!["effusion"]);

        assert!(matches!(
            build_cooccurrence_tree(&Manifest::default()),
            Err(Error::EmptyManifest)
        ));
    }

    #[test]
    fn tree_unions_scans_and_keeps_other_only_subjects() {
        let entries = vec![
            ManifestEntry {
                subject_id: "s1".into(),
                labels: lv("a", &[Disease::Nodule], false),
            },
            ManifestEntry {
                subject_id: "s1".into(),
                labels: lv("b", &[Disease::Atelectasis], false),
            },
            ManifestEntry {
                subject_id: "s2".into(),
                labels: lv("c", &[], true),
            },
            ManifestEntry {
                subject_id: "s3".into(),
                labels: lv("d", &[], false),
            },
            ManifestEntry {
                subject_id: "s3".into(),
                labels: lv("e", &[], true),
            },
        ];
        let t = build_cooccurrence_tree(&Manifest::from_entries(entries).unwrap()).unwrap();
        assert_eq!(t.total_subjects, 3);
        assert_eq!(t.count(Combo::Diseases("atelectasis+nodule".parse().unwrap())), 1);
        assert_eq!(t.count(Combo::Diseases(DiseaseSet::EMPTY)), 2);
        assert_eq!(t.count(Combo::NoApparent), 0);
    }

    #[test]
    fn tree_json_shape() {
        let m = manifest(&[("c1", "s1", &[Disease::Nodule, Disease::Emphysema]), ("c2", "s2", &[])]);
        let json: serde_json::Value = serde_json::from_str(&build_cooccurrence_tree(&m).unwrap().to_json()).unwrap();
        assert_eq!(json["N"], 2);
        assert_eq!(json["nodes"][0]["combo"], serde_json::json!(["emphysema", "nodule"]));
        assert_eq!(json["nodes"][1]["combo"], serde_json::json!(["no_apparent"]));
        assert_eq!(json["nodes"][1]["percent"], 0.5);
    }

    #[test]
    fn manifest_and_split_csv_round_trip() {
        let m = manifest(&[("c1", "s1", &[Disease::Nodule]), ("c2", "s2", &[])]);
        let mut buf = Vec::new();
        write_manifest(&mut buf, &m).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with(
            "scan_id,subject_id,atelectasis,nodule,emphysema,effusion,other,no_apparent_disease\nc1,s1,0,1,0,0,0,0\n"
        ));
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), m);

        let a = split_subjects(&m, SplitFractions::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_split(&mut buf, &a).unwrap();
        let back = read_split(buf.as_slice()).unwrap();
        assert_eq!(back.iter().collect::<Vec<_>>(), a.iter().collect::<Vec<_>>());
        assert!(read_split("subject_id,split\ns1,holdout\n".as_bytes()).is_err());
    }
}
