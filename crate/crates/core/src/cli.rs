//! Experiment harness behind the `fairexit` binary: config-driven training
//! runs, probes, θ sweeps, method comparison and feature dumps.
//!
//! A run directory is `<output_dir>/<config hash>`; a rerun of the same
//! config gets `<hash>.1`, `<hash>.2`, ... so nothing is overwritten. Every
//! file written into it is a pure function of the config and the code.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{generate_synthetic, load_csv, save_csv, CsvSchema, DatasetSpec, LabeledInstance, Split};
use crate::error::{Error, Result};
use crate::fairloss::FairnessMethod;
use crate::inference::{theta_grid, write_frontier_csv, FrontierRow, DEFAULT_THETA};
use crate::metrics::{exit_label, FairnessReport};
use crate::model::{probe_frozen_backbone, BatchTrace, ModelConfig, MultiExitNet, ProbeConfig, ProbeOutcome};
use crate::trainer::{train, train_adversarial, train_distillation, TrainConfig, TrainOutcome};

pub const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];

/// Pre-split CSV data: `train.csv`, `val.csv` and `test.csv` in `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub dir: PathBuf,
    pub n_classes: usize,
    pub n_groups: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub theta: f64,
    /// Pick θ from the grid by validation accuracy − EO instead of using
    /// `theta` as given.
    pub tune_on_validation: bool,
    pub grid_points: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            tune_on_validation: false,
            grid_points: 21,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in comparisons; defaults to the method name.
    pub name: Option<String>,
    /// Synthetic data; each run seed replaces `dataset.seed`.
    pub dataset: Option<DatasetSpec>,
    pub csv: Option<CsvSource>,
    /// `input_dim` and `n_classes` follow the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Stage-one settings for `mmd_distill`; the method is forced to none.
    pub teacher: Option<TrainConfig>,
    pub policy: PolicyConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: None,
            csv: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            teacher: None,
            policy: PolicyConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.train.method.name().to_string())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.dataset.is_some() && self.csv.is_some() {
            return Err(Error::Config("give either [dataset] or [csv], not both".into()));
        }
        if let Some(csv) = &self.csv {
            for f in SPLIT_FILES {
                let p = self.resolve(&csv.dir).join(f);
                if !p.is_file() {
                    return Err(Error::Config(format!("missing data file {}", p.display())));
                }
            }
        }
        if let Some(spec) = &self.dataset {
            spec.validate()?;
        }
        if !(0.0..=1.0).contains(&self.policy.theta) {
            return Err(Error::Config(format!("policy.theta {} outside [0, 1]", self.policy.theta)));
        }
        if self.policy.tune_on_validation && self.policy.grid_points < 2 {
            return Err(Error::Config("policy.grid_points must be >= 2 for tuning".into()));
        }
        self.model.validate()?;
        self.train.validate(self.model.n_exits())?;
        if let Some(t) = &self.teacher {
            t.validate(self.model.n_exits())?;
        }
        Ok(())
    }

    /// sha256 over canonical JSON (sorted keys) of everything except the
    /// output location, so the hash ignores field order in the file.
    pub fn hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Serde(e.to_string()))?;
        if let Value::Object(map) = &mut value {
            map.remove("output_dir");
        }
        let canonical = canonical_json(&value);
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }

    /// Data for one run seed.
    pub fn split_for_seed(&self, seed: u64) -> Result<Split> {
        match &self.csv {
            Some(csv) => load_split_dir(
                self.resolve(&csv.dir),
                CsvSchema {
                    n_classes: csv.n_classes,
                    n_groups: csv.n_groups,
                },
            ),
            None => generate_synthetic(&DatasetSpec {
                seed,
                ..self.dataset.clone().unwrap_or_default()
            }),
        }
    }
}

fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(","))
        }
        other => other.to_string(),
    }
}

pub fn load_split_dir(dir: impl AsRef<Path>, schema: CsvSchema) -> Result<Split> {
    let dir = dir.as_ref();
    let [train, val, test] = SPLIT_FILES.map(|f| load_csv(dir.join(f), schema));
    Ok(Split {
        train: train?,
        val: val?,
        test: test?,
        n_classes: schema.n_classes,
        n_groups: schema.n_groups,
    })
}

/// Writes the three split CSVs into `out_dir`, creating it if needed.
pub fn cmd_generate_data(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Split> {
    let out_dir = out_dir.as_ref();
    let split = generate_synthetic(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (file, data) in SPLIT_FILES.iter().zip([&split.train, &split.val, &split.test]) {
        save_csv(out_dir.join(file), data)?;
    }
    Ok(split)
}

/// Metrics of one exit or operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitMetrics {
    pub exit: String,
    pub accuracy: f64,
    pub eo: f64,
    pub dp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitMetrics {
    pub theta: f64,
    pub accuracy: f64,
    pub eo: f64,
    pub dp: f64,
    /// Fraction of test instances leaving at each exit.
    pub usage: Vec<f64>,
}

/// Test-set outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub lambda: f64,
    pub selection: String,
    pub selected_epoch: usize,
    pub theta_tuned: bool,
    pub per_exit: Vec<ExitMetrics>,
    pub early_exit: EarlyExitMetrics,
    /// Not written to report files, which must not depend on the machine.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Early-exit metrics restricted to the trained exits.
pub fn early_exit_metrics(
    trace: &BatchTrace,
    data: &[LabeledInstance],
    n_classes: usize,
    n_groups: usize,
    theta: f64,
    eligible: &[usize],
) -> Result<EarlyExitMetrics> {
    let last = *eligible
        .last()
        .ok_or_else(|| Error::Usage("no eligible exits".into()))?;
    let mut counts = vec![0usize; trace.n_exits()];
    let preds: Vec<usize> = (0..trace.len())
        .map(|i| {
            let exit = eligible
                .iter()
                .copied()
                .find(|&k| trace.exits[k].confidence[i] >= theta)
                .unwrap_or(last);
            counts[exit] += 1;
            trace.exits[exit].probs.argmax_row(i)
        })
        .collect();
    let r = FairnessReport::for_instances(&preds, data, n_classes, n_groups)?;
    let n = trace.len().max(1) as f64;
    Ok(EarlyExitMetrics {
        theta,
        accuracy: r.accuracy,
        eo: r.eo,
        dp: r.dp_gap,
        usage: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub record: RunRecord,
    pub outcome: TrainOutcome,
    pub teacher: Option<TrainOutcome>,
}

/// Trains and evaluates one seed without touching the filesystem.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, config_hash: &str) -> Result<SeedRun> {
    let start = Instant::now();
    let split = cfg.split_for_seed(seed)?;
    let model = ModelConfig {
        input_dim: split.input_dim(),
        n_classes: split.n_classes,
        seed,
        ..cfg.model.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (outcome, teacher) = match train_cfg.method {
        FairnessMethod::MmdDistill { .. } => {
            let teacher_cfg = TrainConfig {
                seed,
                method: FairnessMethod::None,
                ..cfg.teacher.clone().unwrap_or_else(|| train_cfg.clone())
            };
            let out = train_distillation((&model, &teacher_cfg), (&model, &train_cfg), &split)?;
            (out.student, Some(out.teacher))
        }
        FairnessMethod::Adversarial { .. } => (train_adversarial(MultiExitNet::init(model)?, &split, &train_cfg)?, None),
        FairnessMethod::None | FairnessMethod::Hsic { .. } => {
            (train(MultiExitNet::init(model)?, &split, &train_cfg)?, None)
        }
    };
    let net = &outcome.net;
    let (n_classes, n_groups) = (split.n_classes, split.n_groups);
    let active = train_cfg.weights.active_exits();

    let theta = if cfg.policy.tune_on_validation {
        let trace = net.trace_instances(&split.val)?;
        let mut best: Option<(f64, f64)> = None;
        for t in theta_grid(cfg.policy.grid_points) {
            let m = early_exit_metrics(&trace, &split.val, n_classes, n_groups, t, &active)?;
            let score = m.accuracy - m.eo;
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, t));
            }
        }
        best.map_or(cfg.policy.theta, |(_, t)| t)
    } else {
        cfg.policy.theta
    };

    let trace = net.trace_instances(&split.test)?;
    let n_exits = trace.n_exits();
    let per_exit = (0..n_exits)
        .map(|k| {
            let r = FairnessReport::for_instances(&trace.predictions(k), &split.test, n_classes, n_groups)?;
            Ok(ExitMetrics {
                exit: exit_label(k, n_exits),
                accuracy: r.accuracy,
                eo: r.eo,
                dp: r.dp_gap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let early_exit = early_exit_metrics(&trace, &split.test, n_classes, n_groups, theta, &active)?;
    let selection = match train_cfg.selection {
        crate::trainer::Selection::BestValidation { theta } => {
            format!("best validation accuracy - EO at early exit, theta {theta}")
        }
        crate::trainer::Selection::LastEpoch => "last epoch".to_string(),
    };
    let record = RunRecord {
        config_hash: config_hash.to_string(),
        seed,
        method: train_cfg.method.name().to_string(),
        lambda: train_cfg.weights.lambda,
        selection,
        selected_epoch: outcome.selected_epoch,
        theta_tuned: cfg.policy.tune_on_validation,
        per_exit,
        early_exit,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(SeedRun {
        record,
        outcome,
        teacher,
    })
}

/// Result of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub run_dir: PathBuf,
    pub records: Vec<RunRecord>,
}

/// First free directory among `<hash>`, `<hash>.1`, `<hash>.2`, ...
fn fresh_run_dir(root: &Path, hash: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for i in 0.. {
        let name = if i == 0 { hash.to_string() } else { format!("{hash}.{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("the directory search is unbounded")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains every seed (in parallel) and writes a fresh run directory with
/// `config.toml`, `records.jsonl`, `report.txt` and per-seed
/// `seed-<s>/{checkpoint.json,train_log.csv}`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, &hash))
        .collect::<Result<Vec<_>>>()?;
    let run_dir = fresh_run_dir(&cfg.output_root(), &hash)?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;

    let mut jsonl = String::new();
    for run in &runs {
        let r = &run.record;
        info!("seed {} finished in {:.1}s", r.seed, r.wall_time_secs);
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        jsonl.push('\n');
        let seed_dir = run_dir.join(format!("seed-{}", r.seed));
        fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        run.outcome.net.save_checkpoint(seed_dir.join("checkpoint.json"))?;
        if let Some(t) = &run.teacher {
            t.net.save_checkpoint(seed_dir.join("teacher.json"))?;
        }
        let mut log = Vec::new();
        run.outcome.log.write_csv(&mut log)?;
        write_file(&seed_dir.join("train_log.csv"), &log)?;
    }
    write_file(&run_dir.join("records.jsonl"), jsonl.as_bytes())?;
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    write_file(&run_dir.join("report.txt"), format_run_report(cfg, &hash, &records).as_bytes())?;
    Ok(TrainRun { run_dir, records })
}

pub fn format_run_report(cfg: &ExperimentConfig, hash: &str, records: &[RunRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {} ({}), config {hash}", cfg.label(), cfg.train.method.name());
    if let Some(r) = records.first() {
        let _ = writeln!(s, "model selection: {}", r.selection);
    }
    for r in records {
        let _ = writeln!(s, "\nseed {} (epoch {} kept)", r.seed, r.selected_epoch);
        let _ = writeln!(s, "{:<8} {:>9} {:>9} {:>9}", "exit", "acc", "eo", "dp");
        for m in &r.per_exit {
            let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3} {:>9.3}", m.exit, m.accuracy, m.eo, m.dp);
        }
        let e = &r.early_exit;
        let _ = writeln!(s, "{:<8} {:>9.3} {:>9.3} {:>9.3}  theta {}", "EE", e.accuracy, e.eo, e.dp, e.theta);
        let usage: Vec<String> = e.usage.iter().map(|u| format!("{u:.3}")).collect();
        let _ = writeln!(s, "exit usage: {}", usage.join(" "));
    }
    s
}

/// Reads the records of the first run directory of `cfg`, if any.
pub fn read_records(cfg: &ExperimentConfig) -> Result<Option<Vec<RunRecord>>> {
    let path = cfg.output_root().join(cfg.hash()?).join("records.jsonl");
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(format!("{}: {e}", path.display()))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// One compared configuration, in the order the configs were given.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub method: String,
    pub n_exits: usize,
    /// One entry per configured seed; `None` when that seed has no record.
    pub per_seed: Vec<(u64, Option<RunRecord>)>,
}

impl CompareRow {
    fn mean(&self, f: impl Fn(&RunRecord) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.per_seed.iter().filter_map(|(_, r)| r.as_ref().map(&f)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean early-exit (EO, accuracy) over the recorded seeds.
    pub fn early_exit(&self) -> (Option<f64>, Option<f64>) {
        (self.mean(|r| r.early_exit.eo), self.mean(|r| r.early_exit.accuracy))
    }

    /// Mean final-exit (EO, accuracy) over the recorded seeds.
    pub fn final_exit(&self) -> (Option<f64>, Option<f64>) {
        let last = |r: &RunRecord| r.per_exit.last().cloned();
        (
            self.mean(|r| last(r).map_or(f64::NAN, |m| m.eo)),
            self.mean(|r| last(r).map_or(f64::NAN, |m| m.accuracy)),
        )
    }

    pub fn recorded(&self) -> usize {
        self.per_seed.iter().filter(|(_, r)| r.is_some()).count()
    }
}

pub fn cmd_compare(configs: &[ExperimentConfig]) -> Result<Vec<CompareRow>> {
    if configs.len() < 2 {
        return Err(Error::Usage("compare needs at least two configs".into()));
    }
    configs
        .iter()
        .map(|cfg| {
            let records = read_records(cfg)?.unwrap_or_default();
            let per_seed = cfg
                .seeds
                .iter()
                .map(|&s| (s, records.iter().find(|r| r.seed == s).cloned()))
                .collect();
            Ok(CompareRow {
                label: cfg.label(),
                method: cfg.train.method.name().to_string(),
                n_exits: cfg.model.n_exits(),
                per_seed,
            })
        })
        .collect()
}

/// Aligned text table; absent runs print as `missing`.
pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "missing".to_string(), |x| format!("{x:.2}"));
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:<12} {:>5} {:>7}  {:>8} {:>8}  {:>8} {:>8}",
        "method", "objective", "exits", "seeds", "EO", "Acc", "EO_f", "Acc_f"
    );
    for r in rows {
        let (eo, acc) = r.early_exit();
        let (eo_f, acc_f) = r.final_exit();
        let seeds = format!("{}/{}", r.recorded(), r.per_seed.len());
        let _ = writeln!(
            s,
            "{:<width$}  {:<12} {:>5} {:>7}  {:>8} {:>8}  {:>8} {:>8}",
            r.label,
            r.method,
            r.n_exits,
            seeds,
            cell(eo),
            cell(acc),
            cell(eo_f),
            cell(acc_f)
        );
    }
    s
}

/// Probes every block of a checkpointed backbone; the checkpoint file is
/// only read.
pub fn cmd_probe(checkpoint: impl AsRef<Path>, split: &Split, config: &ProbeConfig) -> Result<ProbeOutcome> {
    let net = MultiExitNet::load_checkpoint(checkpoint)?;
    probe_frozen_backbone(&net, split, config)
}

pub fn format_probe_table(outcome: &ProbeOutcome) -> String {
    let mut s = String::from("layer\taccuracy\teo\tdp\n");
    for l in &outcome.layers {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", l.layer + 1, l.accuracy, l.eo, l.dp);
    }
    s
}

/// Test-set frontier over `grid` plus the index of the θ that scores best
/// on validation.
pub fn cmd_sweep(net: &MultiExitNet, split: &Split, grid: &[f64]) -> Result<(Vec<FrontierRow>, Option<usize>)> {
    let val = crate::inference::sweep_theta(net, &split.val, split.n_groups, grid)?;
    let test = crate::inference::sweep_theta(net, &split.test, split.n_groups, grid)?;
    Ok((test, crate::inference::select_theta(&val)))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, rows: &[FrontierRow], selected: Option<usize>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_frontier_csv(&mut out, rows, selected)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Tab-separated per-exit features: `exit target sensitive f0 .. f{p-1}`,
/// exits numbered from 1.
pub fn cmd_dump_features<W: Write>(net: &MultiExitNet, data: &[LabeledInstance], mut out: W) -> Result<()> {
    let trace = net.trace_instances(data)?;
    let io = |e: std::io::Error| Error::Serde(e.to_string());
    let p = net.config().block_width;
    let mut header = String::from("exit\ttarget\tsensitive");
    for j in 0..p {
        let _ = write!(header, "\tf{j}");
    }
    writeln!(out, "{header}").map_err(io)?;
    for (k, exit) in trace.exits.iter().enumerate() {
        for (i, inst) in data.iter().enumerate() {
            let mut line = format!("{}\t{}\t{}", k + 1, inst.target, inst.sensitive);
            for v in exit.features.row(i) {
                let _ = write!(line, "\t{v}");
            }
            writeln!(out, "{line}").map_err(io)?;
        }
    }
    Ok(())
}
