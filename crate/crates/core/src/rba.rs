//! Rule-based report labeler.
//!
//! A sentence is positive for a disease when it mentions an organ descriptor
//! and one of the disease's synonyms and contains no negation cue anywhere.
//! Reports are split into sentences, matched sentence by sentence and the
//! per-disease results OR-ed together. A report is "no apparent disease"
//! only when neither a target disease nor any of the screened other
//! diseases was found.
//!
//! Matching is case-insensitive over whole words. A dictionary term also
//! matches with an `s` or `es` suffix on its final word, so `nodule` finds
//! `nodules` but not `internodule`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disease::{Disease, DiseaseSet};
use crate::error::{Error, Result};

/// Finding name reported for any match from `other_disease_terms`.
pub const OTHER: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub subject_id: String,
    pub scan_id: String,
    pub text: String,
}

impl Report {
    pub fn new(subject_id: impl Into<String>, scan_id: impl Into<String>, text: impl Into<String>) -> Self {
        Report {
            subject_id: subject_id.into(),
            scan_id: scan_id.into(),
            text: text.into(),
        }
    }
}

/// A dictionary term split into lowercase words.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Pattern(Vec<String>);

impl Pattern {
    fn new(term: &str) -> Option<Self> {
        let words = tokenize(term);
        (!words.is_empty()).then_some(Pattern(words))
    }

    fn occurs_in(&self, tokens: &[String]) -> bool {
        let n = self.0.len();
        if tokens.len() < n {
            return false;
        }
        let (head, last) = self.0.split_at(n - 1);
        let last = &last[0];
        tokens.windows(n).any(|w| {
            w[..n - 1] == *head && {
                let t = &w[n - 1];
                t == last
                    || t.strip_prefix(last.as_str())
                        .is_some_and(|rest| rest == "s" || rest == "es")
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DictionaryFile {
    organ_terms: BTreeSet<String>,
    disease_terms: BTreeMap<String, BTreeSet<String>>,
    negation_terms: BTreeSet<String>,
    #[serde(default)]
    other_disease_terms: BTreeMap<String, BTreeSet<String>>,
}

/// Organ descriptors, disease synonyms, negation cues and the extra
/// diseases screened for the no-apparent-disease label.
#[derive(Debug, Clone)]
pub struct RuleDictionary {
    terms: DictionaryFile,
    organs: Vec<Pattern>,
    negations: Vec<Pattern>,
    // (finding name, synonyms); other diseases are folded into OTHER.
    diseases: Vec<(String, Vec<Pattern>)>,
    others: Vec<Pattern>,
}

impl PartialEq for RuleDictionary {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms
    }
}

fn normalize(set: BTreeSet<String>, what: &str) -> Result<BTreeSet<String>> {
    set.into_iter()
        .map(|t| {
            let t = t.trim().to_lowercase();
            if tokenize(&t).is_empty() {
                Err(Error::InvalidDictionary(format!(
                    "{what} contains a term with no words"
                )))
            } else {
                Ok(t)
            }
        })
        .collect()
}

fn compile(set: &BTreeSet<String>) -> Vec<Pattern> {
    set.iter().filter_map(|t| Pattern::new(t)).collect()
}

impl RuleDictionary {
    /// Validates and compiles a dictionary. Terms are trimmed and lowercased.
    pub fn new(
        organ_terms: BTreeSet<String>,
        disease_terms: BTreeMap<String, BTreeSet<String>>,
        negation_terms: BTreeSet<String>,
        other_disease_terms: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self> {
        let organ_terms = normalize(organ_terms, "organ_terms")?;
        if organ_terms.is_empty() {
            return Err(Error::InvalidDictionary("organ_terms is empty".into()));
        }
        let negation_terms = normalize(negation_terms, "negation_terms")?;

        let normalize_map = |map: BTreeMap<String, BTreeSet<String>>, what: &str| {
            map.into_iter()
                .map(|(name, syns)| {
                    let name = name.trim().to_lowercase();
                    let syns = normalize(syns, &format!("{what}[{name}]"))?;
                    if syns.is_empty() {
                        return Err(Error::InvalidDictionary(format!("{what}[{name}] has no synonyms")));
                    }
                    if let Some(t) = syns.intersection(&negation_terms).next() {
                        return Err(Error::InvalidDictionary(format!(
                            "term `{t}` is both a negation cue and a synonym of `{name}`"
                        )));
                    }
                    Ok((name, syns))
                })
                .collect::<Result<BTreeMap<_, _>>>()
        };
        let disease_terms = normalize_map(disease_terms, "disease_terms")?;
        let other_disease_terms = normalize_map(other_disease_terms, "other_disease_terms")?;

        for d in Disease::ALL {
            if !disease_terms.contains_key(d.name()) {
                return Err(Error::InvalidDictionary(format!(
                    "disease_terms lacks target `{}`",
                    d.name()
                )));
            }
        }

        // Target diseases keep their names, anything else reports as OTHER.
        let mut diseases = Vec::new();
        let mut others = Vec::new();
        for (name, syns) in &disease_terms {
            if name.parse::<Disease>().is_ok() {
                diseases.push((name.clone(), compile(syns)));
            } else {
                others.extend(compile(syns));
            }
        }
        for syns in other_disease_terms.values() {
            others.extend(compile(syns));
        }

        Ok(RuleDictionary {
            organs: compile(&organ_terms),
            negations: compile(&negation_terms),
            diseases,
            others,
            terms: DictionaryFile {
                organ_terms,
                disease_terms,
                negation_terms,
                other_disease_terms,
            },
        })
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let f: DictionaryFile = serde_json::from_str(json).map_err(|e| Error::parse("rule dictionary", e))?;
        RuleDictionary::new(f.organ_terms, f.disease_terms, f.negation_terms, f.other_disease_terms)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.terms).expect("dictionary serializes")
    }

    /// The bundled lungs/pleura dictionary.
    pub fn lung_default() -> Self {
        Self::from_json_str(include_str!("../config/lung.json")).expect("bundled dictionary is valid")
    }

    pub fn organ_terms(&self) -> &BTreeSet<String> {
        &self.terms.organ_terms
    }

    pub fn disease_terms(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.terms.disease_terms
    }

    pub fn negation_terms(&self) -> &BTreeSet<String> {
        &self.terms.negation_terms
    }

    pub fn other_disease_terms(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.terms.other_disease_terms
    }
}

/// Lowercase alphanumeric runs.
fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Splits report text at `.`, `!`, `?` and newlines. A `.` directly after a
/// single-letter word (an initial such as `J.`) does not end a sentence.
/// Sentences are trimmed and empty ones dropped.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut flush = |buf: &mut String| {
        let s = buf.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
        buf.clear();
    };

    for (i, &c) in chars.iter().enumerate() {
        let boundary = match c {
            '!' | '?' | '\n' => true,
            '.' => {
                let initial = i >= 1 && chars[i - 1].is_alphabetic() && (i < 2 || !chars[i - 2].is_alphanumeric());
                !initial
            }
            _ => false,
        };
        if boundary {
            flush(&mut current);
        } else {
            current.push(c);
        }
    }
    flush(&mut current);
    out
}

fn sentence_findings(tokens: &[String], dict: &RuleDictionary) -> (DiseaseSet, bool) {
    if !dict.organs.iter().any(|p| p.occurs_in(tokens)) || dict.negations.iter().any(|p| p.occurs_in(tokens)) {
        return (DiseaseSet::EMPTY, false);
    }
    let mut found = DiseaseSet::EMPTY;
    for (name, syns) in &dict.diseases {
        if syns.iter().any(|p| p.occurs_in(tokens)) {
            found.insert(name.parse().expect("target names are compiled from Disease"));
        }
    }
    let other = dict.others.iter().any(|p| p.occurs_in(tokens));
    (found, other)
}

/// Positive findings of one sentence: target disease names plus [`OTHER`].
pub fn match_sentence(sentence: &str, dict: &RuleDictionary) -> BTreeSet<&'static str> {
    let (found, other) = sentence_findings(&tokenize(sentence), dict);
    let mut names: BTreeSet<&'static str> = found.iter().map(Disease::name).collect();
    if other {
        names.insert(OTHER);
    }
    names
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub scan_id: String,
    pub atelectasis: bool,
    pub nodule: bool,
    pub emphysema: bool,
    pub effusion: bool,
    pub other_disease: bool,
    pub no_apparent_disease: bool,
}

impl LabelVector {
    /// Builds a consistent vector; no_apparent_disease is derived.
    pub fn from_findings(scan_id: impl Into<String>, diseases: DiseaseSet, other_disease: bool) -> Self {
        LabelVector {
            scan_id: scan_id.into(),
            atelectasis: diseases.contains(Disease::Atelectasis),
            nodule: diseases.contains(Disease::Nodule),
            emphysema: diseases.contains(Disease::Emphysema),
            effusion: diseases.contains(Disease::Effusion),
            other_disease,
            no_apparent_disease: diseases.is_empty() && !other_disease,
        }
    }

    pub fn no_apparent(scan_id: impl Into<String>) -> Self {
        Self::from_findings(scan_id, DiseaseSet::EMPTY, false)
    }

    pub fn has(&self, d: Disease) -> bool {
        match d {
            Disease::Atelectasis => self.atelectasis,
            Disease::Nodule => self.nodule,
            Disease::Emphysema => self.emphysema,
            Disease::Effusion => self.effusion,
        }
    }

    /// Positive target diseases.
    pub fn diseases(&self) -> DiseaseSet {
        Disease::ALL.into_iter().filter(|d| self.has(*d)).collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.no_apparent_disease == (self.diseases().is_empty() && !self.other_disease)
    }
}

pub fn label_report(report: &Report, dict: &RuleDictionary) -> LabelVector {
    let mut diseases = DiseaseSet::EMPTY;
    let mut other = false;
    for sentence in segment_sentences(&report.text) {
        let (d, o) = sentence_findings(&tokenize(&sentence), dict);
        diseases = diseases.union(d);
        other |= o;
    }
    LabelVector::from_findings(report.scan_id.clone(), diseases, other)
}

/// Labels every report, preserving input order. Reports are labeled in
/// parallel on the current rayon pool.
pub fn label_corpus(reports: &[Report], dict: &RuleDictionary) -> Result<Vec<LabelVector>> {
    let mut seen = HashSet::with_capacity(reports.len());
    for r in reports {
        if !seen.insert(r.scan_id.as_str()) {
            return Err(Error::DuplicateScanId(r.scan_id.clone()));
        }
    }
    Ok(reports.par_iter().map(|r| label_report(r, dict)).collect())
}

/// Reads a JSON-lines corpus. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Report>> {
    let mut reports = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse("corpus", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Report = serde_json::from_str(&line).map_err(|e| Error::parse(format!("corpus line {}", i + 1), e))?;
        reports.push(r);
    }
    Ok(reports)
}

pub fn write_corpus<W: Write>(writer: W, reports: &[Report]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::parse("corpus", e))?;
        w.write_all(b"\n").map_err(|e| Error::parse("corpus", e))?;
    }
    w.flush().map_err(|e| Error::parse("corpus", e))
}

pub const LABEL_HEADER: [&str; 7] = [
    "scan_id",
    "atelectasis",
    "nodule",
    "emphysema",
    "effusion",
    "other",
    "no_apparent_disease",
];

pub(crate) fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub(crate) fn parse_flag(s: &str, context: &str) -> Result<bool> {
    match s.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::parse(context, format!("expected 0 or 1, got `{other}`"))),
    }
}

pub(crate) fn label_fields(v: &LabelVector) -> [&'static str; 6] {
    [
        flag(v.atelectasis),
        flag(v.nodule),
        flag(v.emphysema),
        flag(v.effusion),
        flag(v.other_disease),
        flag(v.no_apparent_disease),
    ]
}

/// Parses the six flag columns that follow the id column(s).
pub(crate) fn parse_label_fields(scan_id: &str, fields: &[&str], context: &str) -> Result<LabelVector> {
    if fields.len() != 6 {
        return Err(Error::parse(
            context,
            format!("expected 6 label columns, got {}", fields.len()),
        ));
    }
    let f = |i: usize| parse_flag(fields[i], context);
    let v = LabelVector {
        scan_id: scan_id.to_string(),
        atelectasis: f(0)?,
        nodule: f(1)?,
        emphysema: f(2)?,
        effusion: f(3)?,
        other_disease: f(4)?,
        no_apparent_disease: f(5)?,
    };
    if !v.is_consistent() {
        return Err(Error::InvalidLabel(v.scan_id));
    }
    Ok(v)
}

pub fn write_labels<W: Write>(writer: W, labels: &[LabelVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::parse("labels csv", e);
    w.write_record(LABEL_HEADER).map_err(err)?;
    for v in labels {
        let f = label_fields(v);
        w.write_record(std::iter::once(v.scan_id.as_str()).chain(f))
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("labels csv", e))
}

pub fn read_labels<R: std::io::Read>(reader: R) -> Result<Vec<LabelVector>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse("labels csv", e))?.clone();
    if headers.iter().ne(LABEL_HEADER) {
        return Err(Error::parse("labels csv", "unexpected header"));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let ctx = format!("labels csv row {}", i + 1);
            let rec = rec.map_err(|e| Error::parse(&ctx, e))?;
            let fields: Vec<&str> = rec.iter().collect();
            parse_label_fields(fields[0], &fields[1..], &ctx)
        })
        .collect()
}
