//! DAT training, the baselines it is compared against, and invariance diagnostics.
//!
//! One DAT step builds a single graph: `z = G(x)` feeds the task network directly and the domain
//! classifier through a gradient-reversal node scaled by `λ_t`. Backpropagating `L_R + L_C` then
//! leaves exactly `∂L_R/∂θ_G − λ_t ∂L_C/∂θ_G` on the generator, `∂L_C/∂θ_C` on the classifier and
//! `∂L_R/∂θ_R` on the task network, and every parameter takes a plain SGD step.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, LOG_FLOOR};
use crate::datagen::{shuffled_indices, Dataset, Splits};
use crate::error::{Error, Result};
use crate::nets::{
    self, argmax, ArchConfig, ConditioningKind, DatModel, DomainTargets, OutputKind,
};
use crate::par::Execution;
use crate::relabel::{kmeans_fit_with, KMeansConfig, SoftLabelSet};
use crate::seed;
use crate::theory::{self, DiscreteDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pool,
    OnehotEmbed,
    LinearEmbed,
    Dat,
    RedatUnsup,
    RedatSoft,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pool,
        Method::OnehotEmbed,
        Method::LinearEmbed,
        Method::Dat,
        Method::RedatUnsup,
        Method::RedatSoft,
    ];

    pub fn is_adversarial(self) -> bool {
        matches!(self, Method::Dat | Method::RedatUnsup | Method::RedatSoft)
    }

    pub fn conditioning(self) -> ConditioningKind {
        match self {
            Method::OnehotEmbed => ConditioningKind::OneHot,
            Method::LinearEmbed => ConditioningKind::Linear,
            _ => ConditioningKind::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Pool => "pool",
            Method::OnehotEmbed => "onehot_embed",
            Method::LinearEmbed => "linear_embed",
            Method::Dat => "dat",
            Method::RedatUnsup => "redat_unsup",
            Method::RedatSoft => "redat_soft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub lambda: f64,
    /// Linear ramp of λ from 0; `None` means one epoch.
    pub lambda_warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Number of relabeled domain classes for `redat_unsup`.
    pub k: Option<usize>,
    pub arch: ArchConfig,
    /// Domain id fed to accent-specific baselines for records from an unseen domain.
    pub unseen_domain_id: usize,
    pub codebook_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Dat,
            alpha: 0.03,
            lambda: 1.0,
            lambda_warmup_steps: None,
            batch_size: 32,
            epochs: 120,
            seed: 0,
            k: None,
            arch: ArchConfig::default(),
            unseen_domain_id: 0,
            codebook_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method, seed: u64) -> Self {
        TrainConfig {
            method,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.method.is_adversarial() && self.lambda <= 0.0 {
            return Err(Error::validation(format!(
                "lambda must be > 0 for {}",
                self.method
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.method == Method::RedatUnsup && !matches!(self.k, Some(k) if k >= 2) {
            return Err(Error::validation("redat_unsup needs k >= 2"));
        }
        if self.codebook_size == 0 {
            return Err(Error::validation("codebook_size must be >= 1"));
        }
        Ok(())
    }
}

/// `λ_t = λ · min(t, warmup) / warmup`; non-decreasing and equal to `λ` from `t = warmup` on.
pub fn lambda_at(step: usize, lambda: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        return lambda;
    }
    lambda * (step.min(warmup_steps) as f64 / warmup_steps as f64)
}

/// One mini-batch as the training step consumes it.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub task_labels: Vec<usize>,
    pub domain_targets: DomainTargets,
    /// Domain ids for the conditioned baselines.
    pub cond_domains: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, idx: &[usize], targets: &DomainTargets) -> Self {
        Batch {
            x: ds.features_of(idx),
            task_labels: idx.iter().map(|&i| ds.records[i].y).collect(),
            domain_targets: targets.select(idx),
            cond_domains: idx.iter().map(|&i| ds.records[i].d).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub task: f64,
    /// `None` when the step does not involve the domain classifier.
    pub domain: Option<f64>,
    pub lambda: f64,
}

/// One DAT update with a reversed classifier branch; returns pre-step `(L_R, L_C)`.
pub fn train_step_dat(
    model: &mut DatModel,
    batch: &Batch,
    alpha: f64,
    lambda_t: f64,
) -> Result<(f64, f64)> {
    let losses = train_step(model, batch, alpha, lambda_t, true)?;
    Ok((
        losses.task,
        losses.domain.expect("adversarial step reports L_C"),
    ))
}

fn train_step(
    model: &mut DatModel,
    batch: &Batch,
    alpha: f64,
    lambda_t: f64,
    adversarial: bool,
) -> Result<StepLosses> {
    if batch.task_labels.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.leaf(batch.x.clone());
    let z = nets::forward_generator(&mut g, &bound.generator, x)?;
    let feat = model.domain_feature(&mut g, &bound, &batch.cond_domains)?;
    let task_p = nets::forward_task(&mut g, &bound.task, z, feat)?;
    let l_task = nets::task_loss(&mut g, task_p, &batch.task_labels)?;

    let (root, l_dom, dom_p) = if adversarial {
        let dom_p = nets::forward_classifier(&mut g, &bound.classifier, z, true, lambda_t)?;
        let l_dom = nets::domain_loss(&mut g, dom_p, &batch.domain_targets)?;
        (g.add(l_task, l_dom)?, Some(l_dom), Some(dom_p))
    } else {
        (l_task, None, None)
    };
    let mut task = g.value(l_task).item();
    if target_underflow(
        g.value(task_p),
        &DomainTargets::Hard(batch.task_labels.clone()),
    ) {
        task = f64::INFINITY;
    }
    let mut domain = l_dom.map(|v| g.value(v).item());
    if let (Some(d), Some(dom_p)) = (domain.as_mut(), dom_p) {
        if target_underflow(g.value(dom_p), &batch.domain_targets) {
            *d = f64::INFINITY;
        }
    }
    if !task.is_finite() || domain.is_some_and(|d| !d.is_finite()) {
        return Err(Error::Diverged(format!(
            "non-finite loss (task {task}, domain {domain:?})"
        )));
    }
    g.backward(root)?;
    model.apply_grads(&g, &bound, alpha, adversarial)?;
    Ok(StepLosses {
        task,
        domain,
        lambda: lambda_t,
    })
}

/// True when a target class has probability below the log floor, i.e. the exact
/// cross-entropy is infinite and only the floor keeps the computed loss finite.
fn target_underflow(probs: &Tensor, targets: &DomainTargets) -> bool {
    match targets {
        DomainTargets::Hard(labels) => labels
            .iter()
            .enumerate()
            .any(|(r, &l)| probs.get(r, l) < LOG_FLOOR),
        DomainTargets::Soft(t) => (0..t.rows()).any(|r| {
            t.row(r)
                .iter()
                .zip(probs.row(r))
                .any(|(&w, &q)| w > 0.0 && q < LOG_FLOOR)
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepLosses>,
    pub steps_per_epoch: usize,
}

impl TrainTrace {
    pub fn epoch_mean_task_loss(&self, epoch: usize) -> f64 {
        let s = &self.steps[epoch * self.steps_per_epoch..(epoch + 1) * self.steps_per_epoch];
        s.iter().map(|l| l.task).sum::<f64>() / s.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DatModel,
    pub trace: TrainTrace,
}

fn domain_setup(
    config: &TrainConfig,
    train_set: &Dataset,
    soft_labels: Option<&SoftLabelSet>,
) -> Result<(usize, DomainTargets)> {
    let hard = || DomainTargets::Hard(train_set.domain_labels());
    match config.method {
        Method::RedatSoft => {
            let soft = match soft_labels {
                Some(s) => s.matrix.clone(),
                None => train_set.soft_labels().ok_or_else(|| {
                    Error::validation("redat_soft requires soft domain labels on every record")
                })?,
            };
            if soft.rows() != train_set.len() {
                return Err(Error::validation(format!(
                    "{} soft labels for {} records",
                    soft.rows(),
                    train_set.len()
                )));
            }
            Ok((soft.cols(), DomainTargets::Soft(soft)))
        }
        Method::RedatUnsup => {
            let k = config.k.expect("validated");
            if train_set.n_domains() > k {
                return Err(Error::validation(format!(
                    "redat_unsup with k = {k} requires a dataset relabeled into {k} classes, \
                     found domain label {}",
                    train_set.n_domains() - 1
                )));
            }
            Ok((k, hard()))
        }
        _ => Ok((train_set.n_domains(), hard())),
    }
}

/// Trains one model for `config.method` on `train_set`.
///
/// `soft_labels` overrides the records' own `soft` fields for `redat_soft`.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    soft_labels: Option<&SoftLabelSet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let (n_domain_classes, targets) = domain_setup(config, train_set, soft_labels)?;
    if n_domain_classes < 2 {
        return Err(Error::validation(
            "training set needs at least two domain classes",
        ));
    }
    let mut model = DatModel::init(
        &config.arch,
        train_set.dim(),
        n_domain_classes,
        train_set.n_task_classes().max(2),
        config.method.conditioning(),
        train_set.n_domains(),
        config.lambda,
        config.seed,
    )?;
    let m = train_set.len();
    let steps_per_epoch = m.div_ceil(config.batch_size);
    let warmup = config.lambda_warmup_steps.unwrap_or(steps_per_epoch);
    let adversarial = config.method.is_adversarial();

    let mut rng = seed::rng(seed::sub_seed(config.seed, 20));
    let mut order: Vec<usize> = (0..m).collect();
    let mut trace = TrainTrace {
        steps: Vec::with_capacity(steps_per_epoch * config.epochs),
        steps_per_epoch,
    };
    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch = Batch::from_dataset(train_set, idx, &targets);
            let lambda_t = lambda_at(step, config.lambda, warmup);
            let losses = train_step(&mut model, &batch, config.alpha, lambda_t, adversarial)
                .map_err(|e| match e {
                    Error::Diverged(msg) => Error::Diverged(format!("step {step}: {msg}")),
                    other => other,
                })?;
            trace.steps.push(losses);
            step += 1;
        }
    }
    if !model.is_finite() {
        return Err(Error::Diverged("parameters became non-finite".into()));
    }
    Ok(TrainOutcome { model, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nativeness {
    Native,
    Nonnative,
    Avg,
}

impl Nativeness {
    pub fn name(self) -> &'static str {
        match self {
            Nativeness::Native => "native",
            Nativeness::Nonnative => "nonnative",
            Nativeness::Avg => "avg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub domain: usize,
    pub nativeness: Nativeness,
    pub count: usize,
    pub errors: usize,
    /// `None` for empty cells.
    pub raw_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalPolicy {
    /// Domain id used by conditioned models for records outside their known domains.
    pub forced_domain: usize,
}

const EVAL_CHUNK: usize = 512;

/// Predicted task class per record.
pub fn predict(model: &DatModel, ds: &Dataset, policy: &EvalPolicy) -> Result<Vec<usize>> {
    let n_known = model.conditioning.n_domains();
    if let Some(n) = n_known {
        if policy.forced_domain >= n {
            return Err(Error::validation(format!(
                "forced domain {} is not one of the model's {n} domains",
                policy.forced_domain
            )));
        }
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
    let parts = Execution::default().map(&chunks, |chunk| -> Result<Vec<usize>> {
        let x = ds.features_of(chunk);
        let domains: Option<Vec<usize>> = n_known.map(|n| {
            chunk
                .iter()
                .map(|&i| {
                    let d = ds.records[i].d;
                    if d < n {
                        d
                    } else {
                        policy.forced_domain
                    }
                })
                .collect()
        });
        let p = model.predict_task(&x, domains.as_deref())?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    });
    let mut out = Vec::with_capacity(ds.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Task error rates per (domain, nativeness) cell plus a per-domain average cell.
pub fn evaluate(
    model: &DatModel,
    test_set: &Dataset,
    policy: &EvalPolicy,
) -> Result<Vec<EvalCell>> {
    let pred = predict(model, test_set, policy)?;
    Ok(error_cells(test_set, &pred))
}

pub fn error_cells(test_set: &Dataset, pred: &[usize]) -> Vec<EvalCell> {
    let mut domains: Vec<usize> = test_set.records.iter().map(|r| r.d).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut cells = Vec::new();
    for d in domains {
        for nat in [Nativeness::Native, Nativeness::Nonnative, Nativeness::Avg] {
            let (mut count, mut errors) = (0, 0);
            for (r, &p) in test_set.records.iter().zip(pred) {
                let in_cell = r.d == d
                    && match nat {
                        Nativeness::Native => r.native,
                        Nativeness::Nonnative => !r.native,
                        Nativeness::Avg => true,
                    };
                if in_cell {
                    count += 1;
                    errors += usize::from(p != r.y);
                }
            }
            cells.push(EvalCell {
                domain: d,
                nativeness: nat,
                count,
                errors,
                raw_error: (count > 0).then(|| errors as f64 / count as f64),
            });
        }
    }
    cells
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            alpha: 0.1,
            batch_size: 32,
            holdout_fraction: 0.2,
            standardize: true,
        }
    }
}

/// Held-out accuracy of a freshly trained softmax-regression probe on standardized features.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
) -> Result<f64> {
    linear_probe_with(features, labels, n_classes, seed, &ProbeConfig::default())
}

pub fn linear_probe_with(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    let m = features.rows();
    if labels.len() != m || m < 2 {
        return Err(Error::validation("probe needs at least two labeled rows"));
    }
    if n_classes < 2 || labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::validation("probe labels out of range"));
    }
    let order = shuffled_indices(m, seed::sub_seed(seed, 30));
    let n_test = ((m as f64 * cfg.holdout_fraction).round() as usize).clamp(1, m - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let dim = features.cols();

    let mut mean = vec![0.0; dim];
    for &i in train_idx {
        mean.iter_mut()
            .zip(features.row(i))
            .for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= train_idx.len() as f64);
    let mut std = vec![0.0; dim];
    for &i in train_idx {
        std.iter_mut()
            .zip(features.row(i))
            .zip(&mean)
            .for_each(|((s, v), mu)| *s += (v - mu) * (v - mu));
    }
    std.iter_mut().for_each(|s| {
        *s = (*s / train_idx.len() as f64).sqrt();
        if *s < 1e-12 {
            *s = f64::INFINITY;
        }
    });
    if !cfg.standardize {
        mean.fill(0.0);
        std.fill(1.0);
    }
    let rows_of = |idx: &[usize]| {
        let data = idx
            .iter()
            .flat_map(|&i| {
                features
                    .row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&std)
                    .map(|((v, mu), s)| (v - mu) / s)
            })
            .collect();
        Tensor::matrix(idx.len(), dim, data).expect("probe rows")
    };

    let spec = nets::MlpSpec::new(
        vec![dim, n_classes],
        nets::Activation::Tanh,
        OutputKind::Softmax,
    )?;
    let mut params = nets::init_params(&spec, seed::sub_seed(seed, 31))?;
    let mut rng = seed::rng(seed::sub_seed(seed, 32));
    let mut order: Vec<usize> = train_idx.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.leaf(rows_of(chunk));
            let p = bound.forward(&mut g, x)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy_hard(p, &y)?;
            g.backward(loss)?;
            params.apply_grads(&g, &bound, cfg.alpha)?;
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.leaf(rows_of(test_idx));
    let p = bound.forward(&mut g, x)?;
    let probs = g.value(p);
    let hits = test_idx
        .iter()
        .enumerate()
        .filter(|&(r, &i)| argmax(probs.row(r)) == labels[i])
        .count();
    Ok(hits as f64 / test_idx.len() as f64)
}

/// Linear-probe accuracy for predicting hard domain labels from frozen embeddings `G(x)`.
pub fn domain_probe(model: &DatModel, dataset: &Dataset, seed: u64) -> Result<f64> {
    let z = model.embed(&dataset.features())?;
    linear_probe(
        &z,
        &dataset.domain_labels(),
        dataset.n_domains().max(2),
        seed,
    )
}

/// JSD between per-domain code histograms over a shared k-means codebook.
pub fn codebook_jsd(
    points: &Tensor,
    domains: &[usize],
    codebook_size: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if points.rows() < codebook_size {
        return Err(Error::validation(format!(
            "{} points cannot fill a codebook of {codebook_size} codes",
            points.rows()
        )));
    }
    let cfg = KMeansConfig {
        restarts: 3,
        ..KMeansConfig::new(codebook_size, seed)
    };
    let codebook = kmeans_fit_with(points, &cfg, exec)?;
    let codes = codebook.assign(points)?;
    let mut present: Vec<usize> = domains.to_vec();
    present.sort_unstable();
    present.dedup();
    let hists: Vec<DiscreteDistribution> = present
        .iter()
        .map(|&d| {
            let mut h = vec![0.0; codebook_size];
            let mut n = 0.0;
            for (&c, &dom) in codes.iter().zip(domains) {
                if dom == d {
                    h[c] += 1.0;
                    n += 1.0;
                }
            }
            DiscreteDistribution::new(h.iter().map(|v| v / n).collect())
        })
        .collect::<Result<_>>()?;
    theory::jsd(&hists)
}

pub fn embedding_jsd(
    model: &DatModel,
    dataset: &Dataset,
    codebook_size: usize,
    seed: u64,
) -> Result<f64> {
    let z = model.embed(&dataset.features())?;
    codebook_jsd(
        &z,
        &dataset.domain_labels(),
        codebook_size,
        seed,
        Execution::default(),
    )
}

/// Training-set accuracy of the model's own domain classifier.
pub fn classifier_accuracy(model: &DatModel, dataset: &Dataset) -> Result<f64> {
    let p = model.predict_domain(&dataset.features())?;
    let hits = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(r, rec)| argmax(p.row(*r)) == rec.d)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub domain: usize,
    pub unseen: bool,
    pub nativeness: Nativeness,
    pub count: usize,
    pub raw_error: Option<f64>,
    pub normalized_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Run label; defaults to the method name.
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub cells: Vec<ReportCell>,
    pub probe_acc: f64,
    pub emb_jsd: f64,
    pub final_task_loss: f64,
    pub final_domain_loss: Option<f64>,
    pub config: TrainConfig,
}

impl MetricsReport {
    pub fn cell(&self, domain: usize, nativeness: Nativeness) -> Option<&ReportCell> {
        self.cells
            .iter()
            .find(|c| c.domain == domain && c.nativeness == nativeness)
    }

    /// Raw error of the unseen-domain average cell.
    pub fn unseen_error(&self) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.unseen && c.nativeness == Nativeness::Avg)
            .and_then(|c| c.raw_error)
    }

    pub fn seen_avg_error(&self) -> Option<f64> {
        let (mut errs, mut count) = (0.0, 0usize);
        for c in self
            .cells
            .iter()
            .filter(|c| !c.unseen && c.nativeness == Nativeness::Avg)
        {
            errs += c.raw_error? * c.count as f64;
            count += c.count;
        }
        (count > 0).then(|| errs / count as f64)
    }
}

/// Trains, evaluates on both test splits and measures invariance on the seen test split.
pub fn run_experiment(
    name: &str,
    config: &TrainConfig,
    train_set: &Dataset,
    test_seen: &Dataset,
    test_unseen: Option<&Dataset>,
) -> Result<MetricsReport> {
    let outcome = train(config, train_set, None)?;
    let model = &outcome.model;
    let policy = EvalPolicy {
        forced_domain: config.unseen_domain_id,
    };
    let n_seen = test_seen.n_domains();
    let mut cells = Vec::new();
    for ds in std::iter::once(test_seen).chain(test_unseen) {
        for c in evaluate(model, ds, &policy)? {
            cells.push(ReportCell {
                domain: c.domain,
                unseen: c.domain >= n_seen,
                nativeness: c.nativeness,
                count: c.count,
                raw_error: c.raw_error,
                normalized_error: None,
            });
        }
    }
    let probe_acc = domain_probe(model, test_seen, seed::sub_seed(config.seed, 40))?;
    let emb_jsd = embedding_jsd(
        model,
        test_seen,
        config.codebook_size,
        seed::sub_seed(config.seed, 41),
    )?;
    let last = outcome.trace.steps.last().copied();
    Ok(MetricsReport {
        name: name.to_string(),
        method: config.method,
        seed: config.seed,
        cells,
        probe_acc,
        emb_jsd,
        final_task_loss: last.map_or(f64::NAN, |l| l.task),
        final_domain_loss: last.and_then(|l| l.domain),
        config: config.clone(),
    })
}

pub fn run_on_splits(name: &str, config: &TrainConfig, splits: &Splits) -> Result<MetricsReport> {
    run_experiment(
        name,
        config,
        &splits.train,
        &splits.test_seen,
        Some(&splits.test_unseen),
    )
}

/// Fills `normalized_error = raw / raw(reference run, domain 0, native)`, matching the reference
/// run by seed. Cells stay `None` when no reference run exists for that seed or its reference
/// cell has zero error.
pub fn normalize_reports(reports: &mut [MetricsReport], reference_name: &str) {
    let refs: Vec<(u64, Option<f64>)> = reports
        .iter()
        .filter(|r| r.name == reference_name)
        .map(|r| {
            (
                r.seed,
                r.cell(0, Nativeness::Native).and_then(|c| c.raw_error),
            )
        })
        .collect();
    for report in reports.iter_mut() {
        let base = refs
            .iter()
            .find(|(s, _)| *s == report.seed)
            .and_then(|(_, v)| *v)
            .filter(|v| *v > 0.0);
        for cell in &mut report.cells {
            cell.normalized_error = match (cell.raw_error, base) {
                (Some(raw), Some(b)) => Some(raw / b),
                _ => None,
            };
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "method",
    "domain",
    "nativeness",
    "raw_error",
    "normalized_error",
    "probe_acc",
    "emb_jsd",
    "seed",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Flat CSV with one row per (run, cell).
pub fn write_merged_csv(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_io(path, e))?;
    for r in reports {
        for c in &r.cells {
            let domain = if c.unseen {
                "unseen".to_string()
            } else {
                c.domain.to_string()
            };
            w.write_record([
                r.name.clone(),
                domain,
                c.nativeness.name().to_string(),
                fmt_opt(c.raw_error),
                fmt_opt(c.normalized_error),
                format!("{:.6}", r.probe_acc),
                format!("{:.6}", r.emb_jsd),
                r.seed.to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
