//! Synthetic populations and a shortcut-prone classifier.
//!
//! The classifier scores a scan as
//! `logistic(bias + Σ weights[d]·1[d positive] + noise_sd·z)` with `z`
//! standard normal. Giving co-occurring diseases larger weights than the
//! target itself reproduces a model that finds a target mostly through
//! the easier findings that travel with it.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Combo, Manifest, ManifestEntry};
use crate::disease::{Disease, DiseaseSet};
use crate::error::{Error, Result};
use crate::metrics::ScoreRecord;
use crate::rba::LabelVector;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n_subjects: usize,
    /// `no_apparent` or `+`-joined disease names → probability.
    pub combo_weights: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub scans_per_subject: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Combination frequencies shaped after the lungs/pleura cohort: marginals
/// close to 34.9% atelectasis, 32.3% nodule, 23.7% emphysema, 29.0%
/// effusion and 27.7% no apparent disease, with atelectasis–effusion and
/// emphysema–nodule as the strongest pairings.
pub const COHORT_COMBO_WEIGHTS: [(&str, f64); 16] = [
    ("no_apparent", 0.277),
    ("atelectasis", 0.075),
    ("nodule", 0.145),
    ("emphysema", 0.090),
    ("effusion", 0.045),
    ("atelectasis+effusion", 0.140),
    ("emphysema+nodule", 0.060),
    ("atelectasis+nodule", 0.035),
    ("atelectasis+emphysema", 0.020),
    ("effusion+nodule", 0.020),
    ("effusion+emphysema", 0.010),
    ("atelectasis+effusion+nodule", 0.030),
    ("atelectasis+effusion+emphysema", 0.020),
    ("atelectasis+emphysema+nodule", 0.010),
    ("effusion+emphysema+nodule", 0.008),
    ("atelectasis+effusion+emphysema+nodule", 0.015),
];

impl PopulationSpec {
    pub fn cohort_shaped(n_subjects: usize, seed: u64) -> Self {
        PopulationSpec {
            n_subjects,
            combo_weights: COHORT_COMBO_WEIGHTS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            scans_per_subject: 1,
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Parsed and validated weights in key order.
    pub fn combos(&self) -> Result<Vec<(Combo, f64)>> {
        if self.scans_per_subject != 1 {
            return Err(Error::InvalidSpec(format!(
                "scans_per_subject must be 1, got {}",
                self.scans_per_subject
            )));
        }
        let mut combos = Vec::with_capacity(self.combo_weights.len());
        for (key, &w) in &self.combo_weights {
            let combo: Combo = key
                .parse()
                .map_err(|e| Error::InvalidSpec(format!("combo `{key}`: {e}")))?;
            if combo == Combo::Diseases(DiseaseSet::EMPTY) {
                return Err(Error::InvalidSpec("empty combination; use `no_apparent`".into()));
            }
            if combos.iter().any(|(c, _)| *c == combo) {
                return Err(Error::InvalidSpec(format!("combination `{key}` listed twice")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidSpec(format!("weight of `{key}` is {w}")));
            }
            combos.push((combo, w));
        }
        let total: f64 = combos.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("combination weights sum to {total}, not 1")));
        }
        Ok(combos)
    }
}

/// Draws `n_subjects` single-scan subjects. Subject `i` (0-based) is
/// `sub-{i+1:06}` with scan `scan-{i+1:06}`; combinations come from one
/// uniform draw each on stream 0 of `sub_seed(seed, "population")`,
/// inverted through the cumulative weights in key order.
pub fn sample_population(spec: &PopulationSpec) -> Result<Manifest> {
    let combos = spec.combos()?;
    let last_live = combos.iter().rposition(|(_, w)| *w > 0.0).expect("weights sum to one");
    let mut rng = rng::stream(rng::sub_seed(spec.seed, "population"), 0);
    let entries = (1..=spec.n_subjects)
        .map(|i| {
            let u = rng::unit_f64(&mut rng);
            let mut acc = 0.0;
            let mut pick = combos[last_live].0;
            for (c, w) in &combos {
                acc += w;
                if u < acc {
                    pick = *c;
                    break;
                }
            }
            let scan_id = format!("scan-{i:06}");
            let labels = match pick {
                Combo::NoApparent => LabelVector::no_apparent(scan_id),
                Combo::Diseases(d) => LabelVector::from_findings(scan_id, d, false),
            };
            ManifestEntry {
                subject_id: format!("sub-{i:06}"),
                labels,
            }
        })
        .collect();
    Manifest::from_entries(entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    /// Missing diseases weigh 0.
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn new(weights: &[(Disease, f64)], bias: f64, noise_sd: f64, seed: u64) -> Self {
        ClassifierSpec {
            weights: weights.iter().map(|(d, w)| (d.name().to_string(), *w)).collect(),
            bias,
            noise_sd,
            seed,
        }
    }

    /// Nodule contributes little signal of its own; the larger co-occurring
    /// findings dominate the score.
    pub fn shortcut(seed: u64) -> Self {
        Self::new(
            &[
                (Disease::Nodule, 0.5),
                (Disease::Emphysema, 2.5),
                (Disease::Atelectasis, 1.5),
                (Disease::Effusion, 1.5),
            ],
            -1.0,
            1.0,
            seed,
        )
    }

    /// Responds to nodule alone, so co-occurring findings carry no signal.
    pub fn unbiased(seed: u64) -> Self {
        Self::new(&[(Disease::Nodule, 1.5)], -1.0, 1.0, seed)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&json).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    /// Weight per disease in [`Disease::ALL`] order.
    pub fn disease_weights(&self) -> Result<[f64; 4]> {
        if !(self.noise_sd.is_finite() && self.noise_sd > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "noise_sd must be positive, got {}",
                self.noise_sd
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidSpec("bias is not finite".into()));
        }
        let mut out = [0.0; 4];
        for (name, &w) in &self.weights {
            let d: Disease = name
                .parse()
                .map_err(|e| Error::InvalidSpec(format!("weight `{name}`: {e}")))?;
            if !w.is_finite() {
                return Err(Error::InvalidSpec(format!("weight of `{name}` is {w}")));
            }
            out[Disease::ALL.iter().position(|x| *x == d).unwrap()] = w;
        }
        Ok(out)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores every scan in manifest order. Scan `i` draws its noise from
/// stream `i` of `sub_seed(seed, "classifier")`.
pub fn simulate_scores(manifest: &Manifest, clf: &ClassifierSpec) -> Result<Vec<ScoreRecord>> {
    let weights = clf.disease_weights()?;
    let seed = rng::sub_seed(clf.seed, "classifier");
    Ok(manifest
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let z: f64 = StandardNormal.sample(&mut rng::stream(seed, i as u64));
            let signal: f64 = Disease::ALL
                .iter()
                .zip(weights)
                .filter(|(d, _)| e.labels.has(**d))
                .map(|(_, w)| w)
                .sum();
            ScoreRecord {
                scan_id: e.scan_id().to_string(),
                score: logistic(clf.bias + signal + clf.noise_sd * z),
            }
        })
        .collect())
}
