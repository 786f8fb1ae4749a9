//! Task ground truth, AUC with bootstrap confidence intervals and
//! co-occurrence-stratified subgroup evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Manifest;
use crate::disease::{Disease, DiseaseSet};
use crate::error::{Error, Result};
use crate::rba::LabelVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Multi-label, evaluated one-vs-rest per class.
    Mlcl,
    /// No apparent disease vs. any target disease.
    Bcl,
    /// Nodule vs. no apparent disease.
    Bncl,
    /// Nodule vs. everything without nodule.
    Bnncl,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Mlcl => "mlcl",
            TaskKind::Bcl => "bcl",
            TaskKind::Bncl => "bncl",
            TaskKind::Bnncl => "bnncl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetClass {
    Disease(Disease),
    NoApparent,
}

impl TargetClass {
    pub fn name(self) -> &'static str {
        match self {
            TargetClass::Disease(d) => d.name(),
            TargetClass::NoApparent => "no_apparent",
        }
    }

    fn is_positive(self, l: &LabelVector) -> bool {
        match self {
            TargetClass::Disease(d) => l.has(d),
            TargetClass::NoApparent => l.no_apparent_disease,
        }
    }
}

impl FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "no_apparent" | "no_apparent_disease" | "none" => Ok(TargetClass::NoApparent),
            other => Ok(TargetClass::Disease(other.parse()?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    pub kind: TaskKind,
    target: Option<TargetClass>,
}

impl TaskSpec {
    pub fn mlcl(target: TargetClass) -> Self {
        TaskSpec {
            kind: TaskKind::Mlcl,
            target: Some(target),
        }
    }

    pub fn bcl() -> Self {
        TaskSpec {
            kind: TaskKind::Bcl,
            target: None,
        }
    }

    pub fn bncl() -> Self {
        TaskSpec {
            kind: TaskKind::Bncl,
            target: Some(TargetClass::Disease(Disease::Nodule)),
        }
    }

    pub fn bnncl() -> Self {
        TaskSpec {
            kind: TaskKind::Bnncl,
            target: Some(TargetClass::Disease(Disease::Nodule)),
        }
    }

    pub fn new(kind: TaskKind, target: Option<TargetClass>) -> Result<Self> {
        let nodule = TargetClass::Disease(Disease::Nodule);
        match (kind, target) {
            (TaskKind::Mlcl, Some(t)) => Ok(Self::mlcl(t)),
            (TaskKind::Mlcl, None) => Err(Error::InvalidTask("mlcl needs a target class".into())),
            (TaskKind::Bcl, None) => Ok(Self::bcl()),
            (TaskKind::Bcl, Some(t)) => Err(Error::InvalidTask(format!("bcl takes no target, got {}", t.name()))),
            (TaskKind::Bncl | TaskKind::Bnncl, None) => Ok(TaskSpec {
                kind,
                target: Some(nodule),
            }),
            (TaskKind::Bncl | TaskKind::Bnncl, Some(t)) if t == nodule => Ok(TaskSpec { kind, target: Some(t) }),
            (TaskKind::Bncl | TaskKind::Bnncl, Some(t)) => Err(Error::InvalidTask(format!(
                "{} is fixed to nodule, got {}",
                kind.name(),
                t.name()
            ))),
        }
    }

    pub fn target(&self) -> Option<TargetClass> {
        self.target
    }

    /// Name of the evaluated class: the target, or `abnormal` for BCL.
    pub fn target_name(&self) -> &'static str {
        self.target.map_or("abnormal", TargetClass::name)
    }

    pub fn label(&self, l: &LabelVector) -> TaskLabel {
        let d = l.diseases();
        let (pos, neg) = match self.kind {
            TaskKind::Mlcl => {
                let p = self.target.expect("mlcl has a target").is_positive(l);
                (p, !p)
            }
            TaskKind::Bcl => (!d.is_empty(), l.no_apparent_disease),
            TaskKind::Bncl => (l.nodule, l.no_apparent_disease),
            TaskKind::Bnncl => (l.nodule, !l.nodule && (l.no_apparent_disease || !d.is_empty())),
        };
        debug_assert!(!(pos && neg));
        if pos {
            TaskLabel::Positive
        } else if neg {
            TaskLabel::Negative
        } else {
            TaskLabel::Excluded
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.target) {
            (TaskKind::Mlcl, Some(t)) => write!(f, "mlcl:{}", t.name()),
            (k, _) => f.write_str(k.name()),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    /// `bcl`, `bncl`, `bnncl` or `mlcl:<class>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (kind, target) = match s.split_once(':') {
            Some((k, t)) => (k, Some(t.parse::<TargetClass>()?)),
            None => (s.as_str(), None),
        };
        let kind = match kind {
            "mlcl" => TaskKind::Mlcl,
            "bcl" => TaskKind::Bcl,
            "bncl" => TaskKind::Bncl,
            "bnncl" => TaskKind::Bnncl,
            other => return Err(Error::InvalidTask(format!("unknown task `{other}`"))),
        };
        TaskSpec::new(kind, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskLabel {
    Positive,
    Negative,
    Excluded,
}

impl TaskLabel {
    pub fn name(self) -> &'static str {
        match self {
            TaskLabel::Positive => "positive",
            TaskLabel::Negative => "negative",
            TaskLabel::Excluded => "excluded",
        }
    }
}

pub type TaskTruth = BTreeMap<String, TaskLabel>;

pub fn derive_task_labels(manifest: &Manifest, task: &TaskSpec) -> TaskTruth {
    manifest
        .entries()
        .iter()
        .map(|e| (e.scan_id().to_string(), task.label(&e.labels)))
        .collect()
}

pub fn write_task_labels<W: Write>(writer: W, truth: &TaskTruth) -> Result<()> {
    let err = |e: csv::Error| Error::parse("task csv", e);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scan_id", "label"]).map_err(err)?;
    for (scan, l) in truth {
        w.write_record([scan.as_str(), l.name()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("task csv", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scan_id: String,
    pub score: f64,
}

pub fn write_scores<W: Write>(writer: W, scores: &[ScoreRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::parse("scores csv", e);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scan_id", "score"]).map_err(err)?;
    for s in scores {
        w.write_record([s.scan_id.as_str(), &s.score.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("scores csv", e))
}

pub fn read_scores<R: Read>(reader: R) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse("scores csv", e))?.clone();
    if headers.iter().ne(["scan_id", "score"]) {
        return Err(Error::parse("scores csv", "unexpected header"));
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::parse("scores csv", e)))
        .collect()
}

/// Scores split by task label, with excluded scans dropped.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledScores {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl LabeledScores {
    /// Validates `scores` against `truth`: each score must be finite, in
    /// [0, 1], unique per scan and belong to a scan in `truth`. Labeled
    /// scans without a score are ignored.
    pub fn collect(scores: &[ScoreRecord], truth: &TaskTruth) -> Result<Self> {
        let mut seen = HashSet::with_capacity(scores.len());
        let mut out = LabeledScores::default();
        for s in scores {
            if !s.score.is_finite() || !(0.0..=1.0).contains(&s.score) {
                return Err(Error::InvalidScore {
                    scan_id: s.scan_id.clone(),
                    score: s.score,
                });
            }
            if !seen.insert(s.scan_id.as_str()) {
                return Err(Error::DuplicateScanId(s.scan_id.clone()));
            }
            match truth.get(&s.scan_id) {
                None => return Err(Error::UnknownScan(s.scan_id.clone())),
                Some(TaskLabel::Positive) => out.positives.push(s.score),
                Some(TaskLabel::Negative) => out.negatives.push(s.score),
                Some(TaskLabel::Excluded) => {}
            }
        }
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        match (self.positives.is_empty(), self.negatives.is_empty()) {
            (true, _) => Err(Error::DegenerateClass("no positive scans with scores".into())),
            (_, true) => Err(Error::DegenerateClass("no negative scans with scores".into())),
            _ => Ok(()),
        }
    }
}

/// Wins and ties over all (positive, negative) pairs. Both slices are
/// sorted ascending; `*_w` give each element's multiplicity.
fn pair_counts(pos: &[f64], pos_w: Option<&[u32]>, neg: &[f64], neg_w: Option<&[u32]>) -> (u64, u64) {
    let w = |ws: Option<&[u32]>, i: usize| ws.map_or(1u64, |w| u64::from(w[i]));
    // neg[..lt] < v, with total weight `below`.
    let (mut below, mut lt) = (0u64, 0usize);
    let (mut wins, mut ties) = (0u64, 0u64);
    let mut i = 0;
    while i < pos.len() {
        let v = pos[i];
        let mut group = 0u64;
        while i < pos.len() && pos[i] == v {
            group += w(pos_w, i);
            i += 1;
        }
        while lt < neg.len() && neg[lt] < v {
            below += w(neg_w, lt);
            lt += 1;
        }
        let equal: u64 = (lt..neg.len()).take_while(|&j| neg[j] == v).map(|j| w(neg_w, j)).sum();
        wins += group * below;
        ties += group * equal;
    }
    (wins, ties)
}

fn ratio(wins: u64, ties: u64, n_pairs: u64) -> f64 {
    (2 * wins + ties) as f64 / (2 * n_pairs) as f64
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mann–Whitney AUC of raw positive and negative scores, ties counting ½.
pub fn auc_of(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    LabeledScores {
        positives: positives.to_vec(),
        negatives: negatives.to_vec(),
    }
    .check()?;
    let (p, n) = (sorted(positives), sorted(negatives));
    let (wins, ties) = pair_counts(&p, None, &n, None);
    Ok(ratio(wins, ties, (p.len() * n.len()) as u64))
}

pub fn auc(scores: &[ScoreRecord], truth: &TaskTruth) -> Result<f64> {
    let ls = LabeledScores::collect(scores, truth)?;
    auc_of(&ls.positives, &ls.negatives)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            level: 0.95,
            resamples: 2000,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapConfig {
            seed,
            ..Default::default()
        }
    }
}

/// Linear interpolation between order statistics (`(m-1)·p` rule).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the AUC of `positives` vs `negatives`.
///
/// Resample `i` draws `|positives|` positives and then `|negatives|`
/// negatives with replacement (indices into the sorted class arrays, via
/// [`rng::uniform_below`] on `rng::stream(seed, i)`), so every resample is
/// a pure function of `(seed, i)`. Degenerate resamples are skipped.
pub fn bootstrap_ci_of(positives: &[f64], negatives: &[f64], cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    LabeledScores {
        positives: positives.to_vec(),
        negatives: negatives.to_vec(),
    }
    .check()?;
    if cfg.resamples < 100 {
        return Err(Error::InsufficientResamples(format!(
            "{} requested, at least 100 needed",
            cfg.resamples
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "confidence level {} outside (0, 1)",
            cfg.level
        )));
    }
    let (p, n) = (sorted(positives), sorted(negatives));

    let mut aucs: Vec<f64> = (0..cfg.resamples as u64)
        .into_par_iter()
        .map_init(
            || (vec![0u32; p.len()], vec![0u32; n.len()]),
            |(pw, nw), i| {
                let mut rng = rng::stream(cfg.seed, i);
                pw.fill(0);
                nw.fill(0);
                for _ in 0..p.len() {
                    pw[rng::uniform_below(&mut rng, p.len() as u64) as usize] += 1;
                }
                for _ in 0..n.len() {
                    nw[rng::uniform_below(&mut rng, n.len() as u64) as usize] += 1;
                }
                let np: u64 = pw.iter().map(|&c| u64::from(c)).sum();
                let nn: u64 = nw.iter().map(|&c| u64::from(c)).sum();
                if np == 0 || nn == 0 {
                    return None;
                }
                let (wins, ties) = pair_counts(&p, Some(pw), &n, Some(nw));
                Some(ratio(wins, ties, np * nn))
            },
        )
        .flatten()
        .collect();

    if aucs.len() * 2 < cfg.resamples {
        return Err(Error::InsufficientResamples(format!(
            "{} of {} resamples were degenerate",
            cfg.resamples - aucs.len(),
            cfg.resamples
        )));
    }
    aucs.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok((quantile(&aucs, tail), quantile(&aucs, 1.0 - tail)))
}

pub fn bootstrap_ci(scores: &[ScoreRecord], truth: &TaskTruth, cfg: &BootstrapConfig) -> Result<(f64, f64)> {
    let ls = LabeledScores::collect(scores, truth)?;
    bootstrap_ci_of(&ls.positives, &ls.negatives, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Co-occurring diseases required alongside the target; `None` for an
    /// unstratified evaluation, the empty set for the exclusive subgroup.
    pub subgroup: Option<DiseaseSet>,
}

pub fn evaluate(scores: &[ScoreRecord], truth: &TaskTruth, cfg: &BootstrapConfig) -> Result<EvalResult> {
    let ls = LabeledScores::collect(scores, truth)?;
    let auc = auc_of(&ls.positives, &ls.negatives)?;
    let (ci_low, ci_high) = bootstrap_ci_of(&ls.positives, &ls.negatives, cfg)?;
    Ok(EvalResult {
        auc,
        ci_low,
        ci_high,
        n_pos: ls.positives.len(),
        n_neg: ls.negatives.len(),
        subgroup: None,
    })
}

/// Ground truth for one co-occurrence subgroup: positives are scans whose
/// exact target-disease set is `{target} ∪ pattern`, negatives are all
/// scans negative for `target`, other target-positive scans are excluded.
pub fn subgroup_truth(manifest: &Manifest, target: Disease, pattern: DiseaseSet) -> Result<TaskTruth> {
    if pattern.contains(target) {
        return Err(Error::InvalidPattern(format!(
            "pattern `{pattern}` contains the target `{target}`"
        )));
    }
    let want = pattern.with(target);
    Ok(manifest
        .entries()
        .iter()
        .map(|e| {
            let d = e.labels.diseases();
            let l = if d == want {
                TaskLabel::Positive
            } else if !d.contains(target) {
                TaskLabel::Negative
            } else {
                TaskLabel::Excluded
            };
            (e.scan_id().to_string(), l)
        })
        .collect())
}

pub fn stratified_eval(
    scores: &[ScoreRecord],
    manifest: &Manifest,
    target: Disease,
    pattern: DiseaseSet,
    cfg: &BootstrapConfig,
) -> Result<EvalResult> {
    let truth = subgroup_truth(manifest, target, pattern)?;
    let mut r = evaluate(scores, &truth, cfg).map_err(|e| match e {
        Error::DegenerateClass(m) => Error::DegenerateClass(format!("subgroup {target}+[{pattern}]: {m}")),
        other => other,
    })?;
    r.subgroup = Some(pattern);
    Ok(r)
}

/// Every pattern over the other three diseases, exclusive first, in
/// ascending size then name order.
pub fn patterns_for(target: Disease) -> Vec<DiseaseSet> {
    let mut v: Vec<DiseaseSet> = DiseaseSet::all_subsets().filter(|s| !s.contains(target)).collect();
    v.sort_by_key(|s| (s.len(), s.names()));
    v
}

/// Stratified evaluation over all patterns; subgroups without positives
/// are skipped.
pub fn stratified_sweep(
    scores: &[ScoreRecord],
    manifest: &Manifest,
    target: Disease,
    cfg: &BootstrapConfig,
) -> Result<Vec<EvalResult>> {
    let mut out = Vec::new();
    for pattern in patterns_for(target) {
        match stratified_eval(scores, manifest, target, pattern, cfg) {
            Ok(r) => out.push(r),
            Err(Error::DegenerateClass(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub target: String,
    pub result: EvalResult,
}

pub const EVAL_HEADER: [&str; 8] = [
    "task", "target", "pattern", "auc", "ci_low", "ci_high", "n_pos", "n_neg",
];

/// `exclusive` for the empty subgroup, `all` for unstratified rows.
pub fn pattern_label(subgroup: Option<DiseaseSet>) -> String {
    match subgroup {
        None => "all".into(),
        Some(s) if s.is_empty() => "exclusive".into(),
        Some(s) => s.to_string(),
    }
}

pub fn write_eval<W: Write>(writer: W, rows: &[EvalRow]) -> Result<()> {
    let err = |e: csv::Error| Error::parse("eval csv", e);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_HEADER).map_err(err)?;
    for row in rows {
        let r = &row.result;
        w.write_record([
            row.task.clone(),
            row.target.clone(),
            pattern_label(r.subgroup),
            r.auc.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("eval csv", e))
}
