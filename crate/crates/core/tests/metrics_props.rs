mod common;

use cooccur_lab::cohort::{Manifest, ManifestEntry};
use cooccur_lab::metrics::{
    auc, auc_of, derive_task_labels, patterns_for, stratified_eval, BootstrapConfig, ScoreRecord, TargetClass,
    TaskLabel, TaskSpec, TaskTruth,
};
use cooccur_lab::rba::LabelVector;
use cooccur_lab::{Disease, DiseaseSet};
use proptest::prelude::*;
use rand::Rng;

fn tied_scores(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..20);
    (0..n)
        .map(|_| r.random_range(0..=levels) as f64 / levels as f64)
        .collect()
}

#[test]
fn auc_equals_brute_force_on_random_instances() {
    let mut r = common::rng(123);
    for _ in 0..200 {
        let np = r.random_range(1..=100);
        let nn = r.random_range(1..=100);
        let (p, n) = if r.random_bool(0.5) {
            (tied_scores(&mut r, np), tied_scores(&mut r, nn))
        } else {
            (
                (0..np).map(|_| r.random::<f64>()).collect(),
                (0..nn).map(|_| r.random::<f64>()).collect(),
            )
        };
        assert_eq!(auc_of(&p, &n).unwrap(), common::brute_auc(&p, &n));
    }
}

/// Table-driven task truth, written directly from the task definitions.
fn oracle(task: &str, diseases: DiseaseSet, other: bool) -> TaskLabel {
    use TaskLabel::*;
    let none = diseases.is_empty() && !other;
    let nod = diseases.contains(Disease::Nodule);
    match task {
        "bcl" if !diseases.is_empty() => Positive,
        "bcl" if none => Negative,
        "bcl" => Excluded,
        "bncl" if nod => Positive,
        "bncl" if none => Negative,
        "bncl" => Excluded,
        "bnncl" if nod => Positive,
        "bnncl" if none || !diseases.is_empty() => Negative,
        "bnncl" => Excluded,
        "mlcl:no_apparent" => {
            if none {
                Positive
            } else {
                Negative
            }
        }
        t => {
            let d: Disease = t.strip_prefix("mlcl:").unwrap().parse().unwrap();
            if diseases.contains(d) {
                Positive
            } else {
                Negative
            }
        }
    }
}

#[test]
fn task_labels_match_truth_table() {
    let mut entries = Vec::new();
    for set in DiseaseSet::all_subsets() {
        for other in [false, true] {
            let scan = format!("{}|{}", set.bits(), other);
            entries.push(ManifestEntry {
                subject_id: scan.clone(),
                labels: LabelVector::from_findings(scan, set, other),
            });
        }
    }
    let m = Manifest::from_entries(entries).unwrap();
    let tasks = [
        "bcl",
        "bncl",
        "bnncl",
        "mlcl:atelectasis",
        "mlcl:nodule",
        "mlcl:emphysema",
        "mlcl:effusion",
        "mlcl:no_apparent",
    ];
    for t in tasks {
        let spec: TaskSpec = t.parse().unwrap();
        let truth = derive_task_labels(&m, &spec);
        assert_eq!(truth.len(), m.len());
        for e in m.entries() {
            let want = oracle(t, e.labels.diseases(), e.labels.other_disease);
            assert_eq!(truth[e.scan_id()], want, "{t} {}", e.scan_id());
        }
    }
}

fn random_manifest_and_scores(seed: u64, n: usize) -> (Manifest, Vec<ScoreRecord>) {
    let mut r = common::rng(seed);
    let mut entries = Vec::new();
    let mut scores = Vec::new();
    for i in 0..n {
        let set = if r.random_bool(0.3) {
            DiseaseSet::EMPTY
        } else {
            DiseaseSet::from_bits(r.random_range(0..16))
        };
        let other = set.is_empty() && r.random_bool(0.2);
        let id = format!("c{i}");
        entries.push(ManifestEntry {
            subject_id: format!("s{i}"),
            labels: LabelVector::from_findings(&id, set, other),
        });
        scores.push(ScoreRecord {
            scan_id: id,
            score: (r.random_range(0..50) as f64) / 49.0,
        });
    }
    (Manifest::from_entries(entries).unwrap(), scores)
}

#[test]
fn stratified_eval_equals_filtered_auc() {
    let (m, scores) = random_manifest_and_scores(8, 800);
    let cfg = BootstrapConfig {
        resamples: 200,
        ..BootstrapConfig::with_seed(4)
    };
    for target in Disease::ALL {
        let target_pos = m.entries().iter().filter(|e| e.labels.has(target)).count();
        let mut covered = 0;
        for pattern in patterns_for(target) {
            // Manual filter: keep exact-combination positives and all target negatives.
            let want = pattern.with(target);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for (e, s) in m.entries().iter().zip(&scores) {
                if e.labels.diseases() == want {
                    pos.push(s.score);
                } else if !e.labels.has(target) {
                    neg.push(s.score);
                }
            }
            match stratified_eval(&scores, &m, target, pattern, &cfg) {
                Ok(r) => {
                    assert_eq!(r.auc, common::brute_auc(&pos, &neg));
                    assert_eq!((r.n_pos, r.n_neg), (pos.len(), neg.len()));
                    assert!(r.ci_low <= r.ci_high);
                    covered += r.n_pos;
                }
                Err(cooccur_lab::Error::DegenerateClass(_)) => assert!(pos.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(covered, target_pos, "{target}");
    }
}

#[test]
fn exclusion_is_sound() {
    let (m, _) = random_manifest_and_scores(9, 500);
    for t in ["bcl", "bncl", "bnncl", "mlcl:nodule"] {
        let truth = derive_task_labels(&m, &t.parse().unwrap());
        assert_eq!(truth.len(), m.len());
    }
    let bncl = derive_task_labels(&m, &TaskSpec::bncl());
    let nodule = derive_task_labels(&m, &TaskSpec::mlcl(TargetClass::Disease(Disease::Nodule)));
    for (scan, l) in &bncl {
        if *l == TaskLabel::Positive {
            assert_eq!(nodule[scan], TaskLabel::Positive);
        }
    }
}

fn labeled(seed: u64, n: usize) -> (Vec<ScoreRecord>, TaskTruth) {
    let mut r = common::rng(seed);
    let mut scores = Vec::new();
    let mut truth = TaskTruth::new();
    for i in 0..n {
        let id = format!("x{i}");
        let label = match i % 3 {
            0 => TaskLabel::Positive,
            1 => TaskLabel::Negative,
            _ => {
                if r.random_bool(0.5) {
                    TaskLabel::Positive
                } else {
                    TaskLabel::Excluded
                }
            }
        };
        truth.insert(id.clone(), label);
        scores.push(ScoreRecord {
            scan_id: id,
            score: (r.random_range(0..30) as f64) / 29.0,
        });
    }
    (scores, truth)
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transforms(seed in any::<u64>(), n in 2usize..150) {
        let (scores, truth) = labeled(seed, n);
        let base = auc(&scores, &truth).unwrap();
        let squashed: Vec<ScoreRecord> = scores
            .iter()
            .map(|s| ScoreRecord { scan_id: s.scan_id.clone(), score: s.score.powi(3) * 0.5 + 0.25 })
            .collect();
        prop_assert_eq!(auc(&squashed, &truth).unwrap(), base);
    }

    #[test]
    fn swapping_labels_complements(seed in any::<u64>(), n in 2usize..150) {
        let (scores, truth) = labeled(seed, n);
        let swapped: TaskTruth = truth
            .iter()
            .map(|(k, v)| (k.clone(), match v {
                TaskLabel::Positive => TaskLabel::Negative,
                TaskLabel::Negative => TaskLabel::Positive,
                TaskLabel::Excluded => TaskLabel::Excluded,
            }))
            .collect();
        let a = auc(&scores, &truth).unwrap();
        let b = auc(&scores, &swapped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_brute_force(p in prop::collection::vec(0u8..10, 1..80), n in prop::collection::vec(0u8..10, 1..80)) {
        let p: Vec<f64> = p.into_iter().map(|x| x as f64 / 9.0).collect();
        let n: Vec<f64> = n.into_iter().map(|x| x as f64 / 9.0).collect();
        prop_assert_eq!(auc_of(&p, &n).unwrap(), common::brute_auc(&p, &n));
    }
}
