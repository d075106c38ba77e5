//! `redat` command-line harness: data generation, relabeling, training grids, theory checks and
//! report comparison.
//!
//! Every subcommand writes its human-readable summary to the supplied writer and returns an
//! [`Error`] whose [`Error::exit_code`] is the process exit status.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Dataset, GenConfig};
use crate::par::Execution;
use crate::relabel::{self, KMeansConfig, StandaloneOptions};
use crate::theory::{self, MinimaxConfig};
use crate::trainer::{self, MetricsReport, Nativeness, TrainConfig};
use crate::{seed, Error, Result};

/// Raw-feature domain-probe accuracy the generated data should exceed.
pub const SEPARABILITY_THRESHOLD: f64 = 0.8;
/// Tolerances for `verify-theory`.
pub const INNER_MAX_TOL: f64 = 1e-3;
pub const JSD_TOL: f64 = 1e-3;
pub const VALUE_TOL: f64 = 1e-2;

#[derive(Debug, Parser)]
#[command(
    name = "redat",
    version,
    about = "Domain-adversarial training laboratory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train / test_seen / test_unseen JSON-lines datasets.
    GenData {
        /// GenConfig JSON; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace domain labels by k-means clusters or attach soft domain labels.
    Relabel {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: RelabelMode,
        /// Number of clusters (unsup mode).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relabeled dataset; diagnostics go to the sibling `.meta.json` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment plan (runs × seeds) and write per-run reports plus a merged CSV.
    Train {
        #[arg(long)]
        plan: PathBuf,
        /// Maximum number of grid entries trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check the optimal-classifier and minimax properties on random discrete distributions.
    VerifyTheory {
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        s: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        step_size: f64,
        /// Trace CSV with columns step,value,jsd.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate error cells of two or more report files, averaged over seeds per run name.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelMode {
    Unsup,
    Soft,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData { config, out: dir } => gen_data(config.as_deref(), &dir, out),
        Command::Relabel {
            dataset,
            mode,
            k,
            seed,
            out: path,
        } => relabel_cmd(&dataset, mode, k, seed, &path, out),
        Command::Train { plan, jobs } => train_cmd(&plan, jobs, out),
        Command::VerifyTheory {
            n,
            s,
            seed,
            steps,
            step_size,
            out: path,
        } => verify_theory(n, s, seed, steps, step_size, &path, out),
        Command::Compare { reports } => compare(&reports, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn gen_data(config: Option<&Path>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = match config {
        Some(p) => GenConfig::from_json_file(p)?,
        None => GenConfig::default(),
    };
    let splits = datagen::generate(&cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, ds) in [
        ("train", &splits.train),
        ("test_seen", &splits.test_seen),
        ("test_unseen", &splits.test_unseen),
    ] {
        datagen::write_dataset(ds, dir.join(format!("{name}.jsonl")))?;
    }
    let probe = trainer::linear_probe(
        &splits.train.features(),
        &splits.train.domain_labels(),
        cfg.n_seen,
        seed::sub_seed(cfg.seed, 50),
    )?;
    let verdict = if probe > SEPARABILITY_THRESHOLD {
        "met"
    } else {
        "NOT met"
    };
    let mut s = String::new();
    writeln!(s, "train: {} records", splits.train.len()).ok();
    writeln!(s, "test_seen: {} records", splits.test_seen.len()).ok();
    writeln!(s, "test_unseen: {} records", splits.test_unseen.len()).ok();
    writeln!(
        s,
        "raw-feature domain probe: {probe:.4} (precondition > {SEPARABILITY_THRESHOLD}: {verdict})"
    )
    .ok();
    emit(out, &s)
}

/// Diagnostics written next to a relabeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelMeta {
    pub mode: RelabelMode,
    pub k: Option<usize>,
    pub inertia: Option<f64>,
    pub silhouette: Option<f64>,
    pub label_histogram: Option<Vec<usize>>,
    pub classifier_final_loss: f64,
}

/// `runs/relabeled.jsonl` → `runs/relabeled.meta.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn relabel_cmd(
    dataset_path: &Path,
    mode: RelabelMode,
    k: Option<usize>,
    seed: u64,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    if same_file(dataset_path, out_path) {
        return Err(Error::validation(
            "--out must differ from --dataset (inputs are never modified)",
        ));
    }
    let dataset = datagen::read_dataset(dataset_path)?;
    let k = match mode {
        RelabelMode::Unsup => {
            let k = k.ok_or_else(|| Error::validation("--k is required in unsup mode"))?;
            if k < 2 || k > dataset.len() {
                return Err(Error::validation(format!(
                    "k must be in [2, {}], got {k}",
                    dataset.len()
                )));
            }
            Some(k)
        }
        RelabelMode::Soft => None,
    };
    let spec = relabel::default_classifier_spec(dataset.dim(), dataset.n_domains());
    let opts = StandaloneOptions {
        seed,
        ..StandaloneOptions::default()
    };
    let classifier = relabel::train_standalone_classifier(&dataset, &spec, &opts)?;
    let final_loss = classifier.epoch_losses.last().copied().unwrap_or(f64::NAN);

    let (relabeled, meta) = match k {
        Some(k) => {
            let emb = relabel::extract_embeddings(&classifier.params, &dataset)?;
            let cfg = KMeansConfig::new(k, seed::sub_seed(seed, 1));
            let model = relabel::kmeans_fit_with(&emb.matrix, &cfg, Execution::Sequential)?;
            let relabeled = relabel::relabel_unsup(&dataset, &model, &emb)?;
            let labels = relabeled.domain_labels();
            let sil = relabel::silhouette(&emb.matrix, &labels, k, Execution::Sequential);
            let meta = RelabelMeta {
                mode,
                k: Some(k),
                inertia: Some(model.inertia),
                silhouette: Some(sil),
                label_histogram: Some(relabel::label_histogram(&labels, k)),
                classifier_final_loss: final_loss,
            };
            (relabeled, meta)
        }
        None => {
            let soft = relabel::make_soft_labels(&classifier.params, &dataset)?;
            let meta = RelabelMeta {
                mode,
                k: None,
                inertia: None,
                silhouette: None,
                label_histogram: None,
                classifier_final_loss: final_loss,
            };
            (relabel::apply_soft_labels(&dataset, &soft)?, meta)
        }
    };
    datagen::write_dataset(&relabeled, out_path)?;
    write_file(&sidecar_path(out_path), to_json(&meta).as_bytes())?;

    let mut s = String::new();
    writeln!(s, "relabeled {} records ({:?})", relabeled.len(), mode).ok();
    if let (Some(h), Some(i), Some(sil)) = (&meta.label_histogram, meta.inertia, meta.silhouette) {
        writeln!(s, "label histogram: {h:?}").ok();
        writeln!(s, "inertia: {i:.6}").ok();
        writeln!(s, "silhouette: {sil:.6}").ok();
    }
    emit(out, &s)
}

/// One named training configuration of a plan; `train` optionally replaces the plan's
/// training set (e.g. a relabeled copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRun {
    #[serde(default)]
    pub name: Option<String>,
    pub config: TrainConfig,
    #[serde(default)]
    pub train: Option<PathBuf>,
}

impl PlanRun {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.config.method.name().to_string())
    }
}

/// A training grid. Relative paths resolve against the plan file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub train: PathBuf,
    pub test_seen: PathBuf,
    #[serde(default)]
    pub test_unseen: Option<PathBuf>,
    pub runs: Vec<PlanRun>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Run name whose (seed-matched) domain-0 native error normalizes every cell.
    #[serde(default = "default_reference")]
    pub reference: String,
}

fn default_reference() -> String {
    "pool".to_string()
}

impl ExperimentPlan {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut plan.train);
        resolve(&mut plan.test_seen);
        if let Some(p) = plan.test_unseen.as_mut() {
            resolve(p);
        }
        resolve(&mut plan.out_dir);
        for run in &mut plan.runs {
            if let Some(p) = run.train.as_mut() {
                resolve(p);
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::validation("plan.runs must be nonempty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::validation("plan.seeds must be nonempty"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return Err(Error::validation(format!("plan.seeds repeats seed {s}")));
            }
        }
        let mut names = BTreeSet::new();
        for (i, run) in self.runs.iter().enumerate() {
            let name = run.label();
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::validation(format!(
                    "plan.runs[{i}].name {name:?} must be nonempty [A-Za-z0-9_-]"
                )));
            }
            if !names.insert(name.clone()) {
                return Err(Error::validation(format!(
                    "plan.runs[{i}].name {name:?} is repeated"
                )));
            }
            run.config
                .validate()
                .map_err(|e| Error::validation(format!("plan.runs[{i}].config: {e}")))?;
        }
        Ok(())
    }
}

pub fn report_file_name(report: &MetricsReport) -> String {
    format!("{}_seed{}.json", report.name, report.seed)
}

pub fn train_cmd(plan_path: &Path, jobs: usize, out: &mut dyn Write) -> Result<()> {
    let plan = ExperimentPlan::from_json_file(plan_path)?;
    let dir = &plan.out_dir;
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if nonempty {
            return Err(Error::validation(format!(
                "output directory {} is not empty; refusing to overwrite reports",
                dir.display()
            )));
        }
    }
    let base_train = datagen::read_dataset(&plan.train)?;
    let test_seen = datagen::read_dataset(&plan.test_seen)?;
    let test_unseen = plan
        .test_unseen
        .as_ref()
        .map(datagen::read_dataset)
        .transpose()?;
    let overrides: Vec<Option<Dataset>> = plan
        .runs
        .iter()
        .map(|r| r.train.as_ref().map(datagen::read_dataset).transpose())
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let grid: Vec<(usize, u64)> = (0..plan.runs.len())
        .flat_map(|r| plan.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<Result<MetricsReport>> = Execution::default().with_jobs(jobs, |exec| {
        exec.map(&grid, |&(r, s)| {
            let run = &plan.runs[r];
            let config = TrainConfig {
                seed: s,
                ..run.config.clone()
            };
            let train_set = overrides[r].as_ref().unwrap_or(&base_train);
            trainer::run_experiment(
                &run.label(),
                &config,
                train_set,
                &test_seen,
                test_unseen.as_ref(),
            )
        })
    });

    let mut reports = Vec::new();
    let mut first_err = None;
    let mut log = String::new();
    for ((r, s), res) in grid.iter().zip(results) {
        let name = plan.runs[*r].label();
        match res {
            Ok(rep) => {
                writeln!(
                    log,
                    "{name} seed {s}: seen error {} unseen error {} probe {:.4} emb_jsd {:.4}",
                    fmt_cell(rep.seen_avg_error()),
                    fmt_cell(rep.unseen_error()),
                    rep.probe_acc,
                    rep.emb_jsd
                )
                .ok();
                reports.push(rep);
            }
            Err(e) => {
                writeln!(log, "{name} seed {s}: FAILED: {e}").ok();
                // Divergence outranks other failures so the exit code reports it.
                let replace = match &first_err {
                    None => true,
                    Some(Error::Diverged(_)) => false,
                    Some(_) => matches!(e, Error::Diverged(_)),
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    trainer::normalize_reports(&mut reports, &plan.reference);
    for rep in &reports {
        write_file(&dir.join(report_file_name(rep)), to_json(rep).as_bytes())?;
    }
    trainer::write_merged_csv(&reports, dir.join("merged.csv"))?;
    writeln!(log, "{} of {} runs completed", reports.len(), grid.len()).ok();
    emit(out, &log)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "-".to_string())
}

/// Final numbers of a `verify-theory` run.
#[derive(Debug, Clone, PartialEq)]
pub struct TheorySummary {
    pub inner_max_sup_error: f64,
    pub final_value: f64,
    pub target: f64,
    pub final_jsd: f64,
    pub max_pairwise_tv: f64,
}

impl TheorySummary {
    pub fn passed(&self) -> bool {
        self.inner_max_sup_error < INNER_MAX_TOL
            && self.final_jsd < JSD_TOL
            && (self.final_value - self.target).abs() < VALUE_TOL
    }
}

pub fn verify_theory(
    n: usize,
    s: usize,
    seed: u64,
    steps: usize,
    step_size: f64,
    csv_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    if n < 2 || s < 2 {
        return Err(Error::validation(format!(
            "need n >= 2 and s >= 2, got n = {n}, s = {s}"
        )));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::validation(format!(
            "step size must be > 0, got {step_size}"
        )));
    }
    let dists = theory::random_distributions(n, s, seed);
    let inner = theory::verify_inner_max(&dists, steps, step_size)?;
    let trace = theory::verify_minimax(&MinimaxConfig {
        n,
        s,
        seed,
        steps,
        step_size,
    })?;

    let mut csv = String::from("step,value,jsd\n");
    for row in &trace.rows {
        writeln!(csv, "{},{:.12},{:.12e}", row.step, row.value, row.jsd).ok();
    }
    write_file(csv_path, csv.as_bytes())?;

    let last = trace.last();
    let summary = TheorySummary {
        inner_max_sup_error: inner.sup_error,
        final_value: last.value,
        target: theory::minimax_target(n),
        final_jsd: last.jsd,
        max_pairwise_tv: trace.max_pairwise_tv(),
    };
    let mut text = String::new();
    writeln!(
        text,
        "inner max sup error: {:.3e} (tol {INNER_MAX_TOL:e})",
        summary.inner_max_sup_error
    )
    .ok();
    writeln!(text, "final value: {:.6}", summary.final_value).ok();
    writeln!(
        text,
        "target -n ln n: {:.6} (tol {VALUE_TOL:e})",
        summary.target
    )
    .ok();
    writeln!(
        text,
        "final jsd: {:.3e} (tol {JSD_TOL:e})",
        summary.final_jsd
    )
    .ok();
    writeln!(
        text,
        "max pairwise total variation: {:.3e}",
        summary.max_pairwise_tv
    )
    .ok();
    let passed = summary.passed();
    writeln!(text, "{}", if passed { "PASS" } else { "FAIL" }).ok();
    emit(out, &text)?;
    if passed {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "sup error {:.3e}, jsd {:.3e}, |value - target| {:.3e}",
            summary.inner_max_sup_error,
            summary.final_jsd,
            (summary.final_value - summary.target).abs()
        )))
    }
}

/// Column key of the comparison table: seen domain id (or unseen) and nativeness.
type ColumnKey = (bool, usize, Nativeness);

fn column_key(c: &trainer::ReportCell) -> ColumnKey {
    (c.unseen, if c.unseen { 0 } else { c.domain }, c.nativeness)
}

fn nativeness_rank(n: Nativeness) -> u8 {
    match n {
        Nativeness::Native => 0,
        Nativeness::Nonnative => 1,
        Nativeness::Avg => 2,
    }
}

/// Mean-over-seeds table: one row per run name, one column per report cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ComparisonTable {
    /// Index of the lowest value per column; ties go to the earliest row.
    pub fn best(&self) -> Vec<Option<usize>> {
        (0..self.columns.len())
            .map(|j| {
                let mut best: Option<(usize, f64)> = None;
                for (i, (_, vals)) in self.rows.iter().enumerate() {
                    if let Some(v) = vals[j] {
                        if best.is_none_or(|(_, b)| v < b) {
                            best = Some((i, v));
                        }
                    }
                }
                best.map(|(i, _)| i)
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let best = self.best();
        let name_w = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let col_w = self
            .columns
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(0)
            .max(9);
        let mut s = String::new();
        write!(s, "{:<name_w$}", "method").ok();
        for c in &self.columns {
            write!(s, "  {c:>col_w$}").ok();
        }
        s.push('\n');
        for (i, (name, vals)) in self.rows.iter().enumerate() {
            write!(s, "{name:<name_w$}").ok();
            for (j, v) in vals.iter().enumerate() {
                let mark = if best[j] == Some(i) { "*" } else { "" };
                let cell = v
                    .map(|x| format!("{x:.4}{mark}"))
                    .unwrap_or_else(|| "-".into());
                write!(s, "  {cell:>col_w$}").ok();
            }
            s.push('\n');
        }
        s.push_str("* best (lowest) value per column\n");
        s
    }
}

pub fn comparison_table(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    let layout = |r: &MetricsReport| -> BTreeSet<(bool, usize, u8)> {
        r.cells
            .iter()
            .map(|c| {
                let (u, d, n) = column_key(c);
                (u, d, nativeness_rank(n))
            })
            .collect()
    };
    let first = reports
        .first()
        .ok_or_else(|| Error::validation("no reports to compare"))?;
    let keys = layout(first);
    for r in reports {
        if layout(r) != keys {
            return Err(Error::validation(format!(
                "report {} seed {} has a different cell layout",
                r.name, r.seed
            )));
        }
    }
    let columns: Vec<ColumnKey> = {
        let mut cols: Vec<ColumnKey> = first.cells.iter().map(column_key).collect();
        cols.sort_by_key(|&(u, d, n)| (u, d, nativeness_rank(n)));
        cols.dedup();
        cols
    };
    let labels = columns
        .iter()
        .map(|&(u, d, n)| {
            if u {
                format!("unseen/{}", n.name())
            } else {
                format!("d{d}/{}", n.name())
            }
        })
        .chain(["probe_acc".to_string(), "emb_jsd".to_string()])
        .collect();

    let mut names: Vec<String> = Vec::new();
    for r in reports {
        if !names.contains(&r.name) {
            names.push(r.name.clone());
        }
    }
    let rows = names
        .into_iter()
        .map(|name| {
            let group: Vec<&MetricsReport> = reports.iter().filter(|r| r.name == name).collect();
            let mut vals: Vec<Option<f64>> = columns
                .iter()
                .map(|key| {
                    let xs: Option<Vec<f64>> = group
                        .iter()
                        .map(|r| {
                            r.cells
                                .iter()
                                .find(|c| column_key(c) == *key)
                                .and_then(|c| c.raw_error)
                        })
                        .collect();
                    xs.map(|xs| xs.iter().sum::<f64>() / xs.len() as f64)
                })
                .collect();
            let n = group.len() as f64;
            vals.push(Some(group.iter().map(|r| r.probe_acc).sum::<f64>() / n));
            vals.push(Some(group.iter().map(|r| r.emb_jsd).sum::<f64>() / n));
            (name, vals)
        })
        .collect();
    Ok(ComparisonTable {
        columns: labels,
        rows,
    })
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{} is not a metrics report: {e}", path.display())))
}

pub fn compare(paths: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    if paths.len() < 2 {
        return Err(Error::validation(format!(
            "compare needs at least 2 report files, got {}",
            paths.len()
        )));
    }
    let reports: Vec<MetricsReport> = paths
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<_>>()?;
    let table = comparison_table(&reports)?;
    emit(out, &table.render())
}
