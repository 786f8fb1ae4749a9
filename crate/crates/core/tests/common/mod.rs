#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cooccur_lab::cohort::{Combo, Manifest, ManifestEntry};
use cooccur_lab::rba::{LabelVector, Report};
use cooccur_lab::{Disease, DiseaseSet};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLERS: &[&str] = &[
    "there",
    "is",
    "a",
    "small",
    "in",
    "the",
    "right",
    "left",
    "mild",
    "stable",
    "seen",
    "with",
    "and",
    "of",
    "upper",
    "lower",
    "new",
    "interval",
    "internodule",
    "chest",
    "liver",
    "hepatic",
    "noted",
    "unchanged",
    "bilateral",
    "lungs",
    "lobes",
    "nodules",
    "effusions",
    "negative",
];
pub const ORGANS: &[&str] = &["lung", "lobe", "pulmonary", "pleural", "lingula", "bibasilar"];
pub const SYNONYMS: &[&str] = &[
    "atelectasis",
    "collapse",
    "nodule",
    "nodular",
    "emphysema",
    "bullae",
    "effusion",
    "pleural fluid",
    "pneumonia",
    "cyst",
    "mass",
    "ground-glass",
    "fibrosis",
];
pub const NEGATIONS: &[&str] = &["no", "without", "negative for", "free of", "absent"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn inflect(rng: &mut ChaCha8Rng, word: &str) -> String {
    let mut w = word.to_string();
    match rng.random_range(0..6) {
        0 => w.push('s'),
        1 => w.push_str("es"),
        2 => w = w.to_uppercase(),
        3 => w = format!("inter{w}"),
        _ => {}
    }
    w
}

/// A sentence of 3-12 words drawn from fillers, organs, synonyms and
/// negation cues, without terminators.
pub fn template_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=12);
    let mut words = Vec::with_capacity(n);
    for _ in 0..n {
        let w = match rng.random_range(0..10) {
            0..=3 => FILLERS.choose(rng).unwrap().to_string(),
            4 | 5 => {
                let w = *ORGANS.choose(rng).unwrap();
                inflect(rng, w)
            }
            6..=8 => {
                let w = *SYNONYMS.choose(rng).unwrap();
                inflect(rng, w)
            }
            _ => NEGATIONS.choose(rng).unwrap().to_string(),
        };
        words.push(w);
    }
    let mut s = words.join(if rng.random_bool(0.1) { ", " } else { " " });
    if rng.random_bool(0.3) {
        let mut c = s.chars();
        s = c
            .next()
            .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
            .unwrap_or_default();
    }
    s
}

pub fn synthetic_report(rng: &mut ChaCha8Rng, i: usize) -> Report {
    let n = rng.random_range(0..6);
    let text = (0..n)
        .map(|_| template_sentence(rng))
        .collect::<Vec<_>>()
        .join(if rng.random_bool(0.5) { ". " } else { ".\n" });
    Report::new(format!("p{}", i / 2), format!("c{i:05}"), text)
}

pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Report> {
    let mut r = rng(seed);
    (0..n).map(|i| synthetic_report(&mut r, i)).collect()
}

/// Random multi-scan manifest: each scan is no-apparent, other-only or a
/// random non-empty disease set.
pub fn random_manifest(seed: u64, n_subjects: usize, max_scans: usize) -> Manifest {
    let mut r = rng(seed);
    let mut entries = Vec::new();
    for s in 0..n_subjects {
        for k in 0..r.random_range(1..=max_scans) {
            let labels = match r.random_range(0..10) {
                0..=2 => LabelVector::no_apparent(format!("c{s}-{k}")),
                3 => LabelVector::from_findings(format!("c{s}-{k}"), DiseaseSet::EMPTY, true),
                _ => LabelVector::from_findings(
                    format!("c{s}-{k}"),
                    DiseaseSet::from_bits(r.random_range(1..16)),
                    r.random_bool(0.2),
                ),
            };
            entries.push(ManifestEntry {
                subject_id: format!("s{s:04}"),
                labels,
            });
        }
    }
    Manifest::from_entries(entries).unwrap()
}

/// Brute-force subset tally: for each subject and each of the 17 possible
/// keys, test membership directly.
pub fn brute_force_tally(m: &Manifest) -> BTreeMap<String, usize> {
    let subjects: BTreeSet<&str> = m.entries().iter().map(|e| e.subject_id.as_str()).collect();
    let mut keys: Vec<Combo> = DiseaseSet::all_subsets().map(Combo::Diseases).collect();
    keys.push(Combo::NoApparent);
    let mut out = BTreeMap::new();
    for s in subjects {
        let scans: Vec<&LabelVector> = m
            .entries()
            .iter()
            .filter(|e| e.subject_id == s)
            .map(|e| &e.labels)
            .collect();
        let mut hits = 0;
        for key in &keys {
            let member = match key {
                Combo::NoApparent => scans.iter().all(|l| l.no_apparent_disease),
                Combo::Diseases(set) => {
                    !scans.iter().all(|l| l.no_apparent_disease)
                        && Disease::ALL
                            .iter()
                            .all(|d| set.contains(*d) == scans.iter().any(|l| l.has(*d)))
                }
            };
            if member {
                hits += 1;
                *out.entry(key.to_string()).or_default() += 1;
            }
        }
        assert_eq!(hits, 1, "subject {s} fell in {hits} nodes");
    }
    out
}

/// O(n²) pair enumeration, half credit for ties.
pub fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut credit = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}
