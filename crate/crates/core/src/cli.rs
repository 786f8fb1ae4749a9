//! Command-line pipeline.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad arguments, bad
//! file contents, degenerate evaluations), 2 on I/O failures. Diagnostics
//! go to stderr; data goes to the named output files, or to stdout when no
//! output is given. `COOCCUR_LAB_THREADS` caps the worker pool (0 = auto).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cohort::{self, Split, SplitFractions};
use crate::disease::Disease;
use crate::error::{Error, Result};
use crate::metrics::{self, BootstrapConfig, EvalRow, TargetClass, TaskSpec};
use crate::rba::{self, RuleDictionary};
use crate::rng;
use crate::simcls::{self, ClassifierSpec, PopulationSpec};
use crate::volprep;

pub const THREADS_ENV: &str = "COOCCUR_LAB_THREADS";

/// Settings that may come from a JSON config file. Command-line flags take
/// precedence over every field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resamples: Option<usize>,
    pub task: Option<String>,
    pub fractions: Option<[f64; 3]>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cooccur-lab",
    version,
    about = "Report labeling and co-occurrence-stratified evaluation"
)]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label a JSON-lines report corpus with the rule dictionary.
    Label(LabelArgs),
    /// Build the subject-level co-occurrence tree of a manifest.
    Cooccur(CooccurArgs),
    /// Split subjects into train/validation/test.
    Split(SplitArgs),
    /// Derive per-scan task labels.
    Tasks(TasksArgs),
    /// AUC with bootstrap CI, optionally stratified by co-occurrence.
    Eval(EvalArgs),
    /// Sample a synthetic population and score it.
    Simulate(SimulateArgs),
    /// Resample, clip and normalize an RVL1 volume.
    Preprocess(PreprocessArgs),
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Defaults to the bundled lungs/pleura dictionary.
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a manifest CSV using the corpus subject ids.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CooccurArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// train,validation,test
    #[arg(long)]
    fractions: Option<SplitFractions>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TasksArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// bcl, bncl, bnncl or mlcl:<class>
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// bcl, bncl, bnncl or mlcl:<class>; ignored with --stratify.
    #[arg(long)]
    task: Option<String>,
    /// Evaluate one target disease per co-occurrence pattern.
    #[arg(long)]
    stratify: Option<Disease>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Restrict evaluation to one split of this split CSV.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "test", requires = "split")]
    split_name: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Population spec JSON; defaults to the bundled cohort-shaped one.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Classifier spec JSON; defaults to the shortcut classifier.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Overrides the seeds of both specs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Isotropic target spacing in mm.
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    /// Only resample; skip clipping and normalization.
    #[arg(long)]
    no_normalize: bool,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match threads_from_env() {
        Ok(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::parse(THREADS_ENV, format!("expected a non-negative integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ctx = Context { config };
    match cli.command {
        Command::Label(a) => ctx.label(a),
        Command::Cooccur(a) => ctx.cooccur(a),
        Command::Split(a) => ctx.split(a),
        Command::Tasks(a) => ctx.tasks(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Simulate(a) => ctx.simulate(a),
        Command::Preprocess(a) => ctx.preprocess(a),
    }
}

struct Context {
    config: PipelineConfig,
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::parse("arguments", format!("--{name} is required")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn echo(subcommand: &str, effective: serde_json::Value) {
    eprintln!("{subcommand}: effective config {effective}");
}

impl Context {
    /// Explicit path, else `output_dir/default_name`, else stdout (`None`).
    fn output(&self, flag: Option<PathBuf>, default_name: &str) -> Option<PathBuf> {
        flag.or_else(|| self.config.output_dir.as_ref().map(|d| d.join(default_name)))
    }

    fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.config.seed).unwrap_or(0)
    }

    fn label(&self, a: LabelArgs) -> Result<()> {
        let corpus = required(a.corpus, &self.config.corpus, "corpus")?;
        let dict_path = a.dict.or_else(|| self.config.dictionary.clone());
        let out = self.output(a.out, "labels.csv");
        echo(
            "label",
            json!({ "corpus": corpus, "dictionary": dict_path, "out": out, "manifest_out": a.manifest_out }),
        );

        let dict = match &dict_path {
            Some(p) => RuleDictionary::load(p)?,
            None => RuleDictionary::lung_default(),
        };
        let reports = rba::read_corpus(open(&corpus)?)?;
        let labels = rba::label_corpus(&reports, &dict)?;
        emit(out.as_deref(), |w| rba::write_labels(w, &labels))?;

        if let Some(path) = a.manifest_out {
            let subjects: HashMap<String, String> = reports
                .iter()
                .map(|r| (r.scan_id.clone(), r.subject_id.clone()))
                .collect();
            let manifest = cohort::build_manifest(&labels, &subjects)?;
            emit(Some(&path), |w| cohort::write_manifest(w, &manifest))?;
        }
        eprintln!("label: {} reports labeled", labels.len());
        Ok(())
    }

    fn read_manifest(&self, flag: Option<PathBuf>) -> Result<(PathBuf, cohort::Manifest)> {
        let path = required(flag, &self.config.manifest, "manifest")?;
        let m = cohort::read_manifest(open(&path)?)?;
        Ok((path, m))
    }

    fn cooccur(&self, a: CooccurArgs) -> Result<()> {
        let out = self.output(a.out, "cooccurrence.json");
        let (path, manifest) = self.read_manifest(a.manifest)?;
        echo("cooccur", json!({ "manifest": path, "out": out }));
        let tree = cohort::build_cooccurrence_tree(&manifest)?;
        emit(out.as_deref(), |w| {
            writeln!(w, "{}", tree.to_json()).map_err(|e| Error::parse("tree json", e))
        })
    }

    fn split(&self, a: SplitArgs) -> Result<()> {
        let fractions = match (a.fractions, self.config.fractions) {
            (Some(f), _) => f,
            (None, Some([t, v, s])) => SplitFractions::new(t, v, s)?,
            (None, None) => SplitFractions::default(),
        };
        let seed = self.seed(a.seed);
        let out = self.output(a.out, "split.csv");
        let (path, manifest) = self.read_manifest(a.manifest)?;
        echo(
            "split",
            json!({ "manifest": path, "seed": seed, "fractions": fractions, "out": out }),
        );
        let assignment = cohort::split_subjects(&manifest, fractions, seed)?;
        for s in Split::ALL {
            eprintln!("split: {} {} subjects", s, assignment.subjects_in(s).len());
        }
        emit(out.as_deref(), |w| cohort::write_split(w, &assignment))
    }

    fn task(&self, flag: Option<String>) -> Result<TaskSpec> {
        flag.or_else(|| self.config.task.clone())
            .ok_or_else(|| Error::parse("arguments", "--task is required"))?
            .parse()
    }

    fn tasks(&self, a: TasksArgs) -> Result<()> {
        let task = self.task(a.task)?;
        let out = self.output(a.out, "tasks.csv");
        let (path, manifest) = self.read_manifest(a.manifest)?;
        echo(
            "tasks",
            json!({ "manifest": path, "task": task.to_string(), "out": out }),
        );
        let truth = metrics::derive_task_labels(&manifest, &task);
        emit(out.as_deref(), |w| metrics::write_task_labels(w, &truth))
    }

    fn eval(&self, a: EvalArgs) -> Result<()> {
        let seed = self.seed(a.seed);
        let cfg = BootstrapConfig {
            level: a.level,
            resamples: a.resamples.or(self.config.resamples).unwrap_or(2000),
            seed: rng::sub_seed(seed, "bootstrap"),
        };
        let task = match a.stratify {
            Some(d) => TaskSpec::mlcl(TargetClass::Disease(d)),
            None => self.task(a.task)?,
        };
        let scores_path = required(a.scores, &self.config.scores, "scores")?;
        let out = self.output(a.out, "eval.csv");
        let (manifest_path, mut manifest) = self.read_manifest(a.manifest)?;
        echo(
            "eval",
            json!({
                "manifest": manifest_path, "scores": scores_path, "task": task.to_string(),
                "stratify": a.stratify.map(Disease::name), "seed": seed, "resamples": cfg.resamples,
                "level": cfg.level, "split": a.split, "split_name": a.split_name.name(), "out": out,
            }),
        );

        let mut scores = metrics::read_scores(open(&scores_path)?)?;
        if let Some(split_path) = &a.split {
            let assignment = cohort::read_split(open(split_path)?)?;
            manifest = manifest.subset(&assignment, a.split_name);
            let keep: std::collections::HashSet<&str> = manifest.entries().iter().map(|e| e.scan_id()).collect();
            scores.retain(|s| keep.contains(s.scan_id.as_str()));
        }

        let truth = metrics::derive_task_labels(&manifest, &task);
        let mut rows = vec![EvalRow {
            task: task.kind.name().to_string(),
            target: task.target_name().to_string(),
            result: metrics::evaluate(&scores, &truth, &cfg)?,
        }];
        if let Some(target) = a.stratify {
            for result in metrics::stratified_sweep(&scores, &manifest, target, &cfg)? {
                rows.push(EvalRow {
                    task: task.kind.name().to_string(),
                    target: target.name().to_string(),
                    result,
                });
            }
        }
        for r in &rows {
            eprintln!(
                "eval: {} {} [{}] auc={:.4} ci=({:.4}, {:.4}) n_pos={} n_neg={}",
                r.task,
                r.target,
                metrics::pattern_label(r.result.subgroup),
                r.result.auc,
                r.result.ci_low,
                r.result.ci_high,
                r.result.n_pos,
                r.result.n_neg
            );
        }
        emit(out.as_deref(), |w| metrics::write_eval(w, &rows))
    }

    fn simulate(&self, a: SimulateArgs) -> Result<()> {
        let mut population = match &a.population {
            Some(p) => PopulationSpec::load(p)?,
            None => PopulationSpec::cohort_shaped(20_000, 0),
        };
        let mut classifier = match &a.classifier {
            Some(p) => ClassifierSpec::load(p)?,
            None => ClassifierSpec::shortcut(0),
        };
        if let Some(seed) = a.seed.or(self.config.seed) {
            population.seed = seed;
            classifier.seed = seed;
        }
        let manifest_out = self.output(a.manifest_out, "manifest.csv");
        let scores_out = self.output(a.scores_out, "scores.csv");
        echo(
            "simulate",
            json!({
                "population": population, "classifier": classifier,
                "manifest_out": manifest_out, "scores_out": scores_out,
            }),
        );
        let (Some(manifest_out), Some(scores_out)) = (manifest_out, scores_out) else {
            return Err(Error::parse(
                "arguments",
                "simulate needs --manifest-out and --scores-out (or an output_dir)",
            ));
        };

        let manifest = simcls::sample_population(&population)?;
        let scores = simcls::simulate_scores(&manifest, &classifier)?;
        emit(Some(&manifest_out), |w| cohort::write_manifest(w, &manifest))?;
        emit(Some(&scores_out), |w| metrics::write_scores(w, &scores))?;
        eprintln!("simulate: {} subjects", manifest.len());
        Ok(())
    }

    fn preprocess(&self, a: PreprocessArgs) -> Result<()> {
        echo(
            "preprocess",
            json!({ "input": a.input, "output": a.output, "spacing": a.spacing, "normalize": !a.no_normalize }),
        );
        let v = volprep::read_rvol(open(&a.input)?)?;
        let mut out = volprep::resample_to(&v, [a.spacing; 3])?;
        if !a.no_normalize {
            out = volprep::clip_normalize(&out);
        }
        eprintln!("preprocess: {:?} -> {:?}", v.dims(), out.dims());
        emit(Some(&a.output), |w| {
            volprep::write_rvol(w, &out).map_err(|e| Error::parse("rvol", e))
        })
    }
}

/// Renders into memory, then writes to `path` or stdout.
fn emit(path: Option<&Path>, render: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    render(&mut buf)?;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, &buf).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(&buf)
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}
