//! Refined domain labels for reDAT.
//!
//! Unsupervised route: train a standalone domain classifier on the original labels, take its
//! penultimate activations as embeddings, cluster them with k-means, and use cluster indices as
//! new domain labels. Soft route: use the standalone classifier's softmax output per record.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nets::{self, init_params, Activation, DomainTargets, MlpSpec, ModelParams, OutputKind};
use crate::par::Execution;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandaloneOptions {
    pub epochs: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StandaloneOptions {
    fn default() -> Self {
        StandaloneOptions {
            epochs: 20,
            alpha: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// `[input, 32, 16, n_domains]`, tanh, softmax output. The 16-wide layer is the embedding.
pub fn default_classifier_spec(input_dim: usize, n_domains: usize) -> MlpSpec {
    MlpSpec::new(
        vec![input_dim, 32, 16, n_domains],
        Activation::Tanh,
        OutputKind::Softmax,
    )
    .expect("positive widths")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandaloneClassifier {
    pub params: ModelParams,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains an independent domain classifier (not the DAT classifier) with plain SGD on
/// hard-label cross-entropy.
pub fn train_standalone_classifier(
    dataset: &Dataset,
    spec: &MlpSpec,
    opts: &StandaloneOptions,
) -> Result<StandaloneClassifier> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation(
            "cannot train a domain classifier on an empty dataset",
        ));
    }
    let labels = dataset.domain_labels();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::validation(
            "dataset needs hard domain labels from at least two domains",
        ));
    }
    if dataset.n_domains() > spec.output_width() {
        return Err(Error::validation(format!(
            "dataset has domain label {} but classifier has {} outputs",
            dataset.n_domains() - 1,
            spec.output_width()
        )));
    }
    if dataset.dim() != spec.input_width() {
        return Err(Error::Dimension {
            op: "standalone classifier input",
            left: vec![spec.input_width()],
            right: vec![dataset.dim()],
        });
    }
    if opts.batch_size == 0 || opts.alpha.is_nan() || opts.alpha <= 0.0 {
        return Err(Error::validation("batch_size and alpha must be positive"));
    }
    let mut params = init_params(spec, seed::sub_seed(opts.seed, 11))?;
    let mut rng = seed::rng(seed::sub_seed(opts.seed, 12));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(opts.batch_size) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.leaf(dataset.features_of(batch));
            let p = bound.forward(&mut g, x)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = nets::domain_loss(&mut g, p, &DomainTargets::Hard(y))?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(
                    "standalone classifier loss is not finite".into(),
                ));
            }
            g.backward(loss)?;
            params.apply_grads(&g, &bound, opts.alpha)?;
            total += lv;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(StandaloneClassifier {
        params,
        epoch_losses,
    })
}

/// Penultimate-layer activations, one row per source record.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Tensor,
    /// Index of each row's record in the source dataset.
    pub indices: Vec<usize>,
}

pub fn extract_embeddings(classifier: &ModelParams, dataset: &Dataset) -> Result<EmbeddingSet> {
    let mut g = Graph::new();
    let bound = classifier.bind(&mut g);
    let x = g.leaf(dataset.features());
    let (pen, _) = bound.forward_with_penultimate(&mut g, x)?;
    Ok(EmbeddingSet {
        matrix: g.value(pen).clone(),
        indices: (0..dataset.len()).collect(),
    })
}

/// Classifier softmax output per record, rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelSet {
    pub matrix: Tensor,
}

pub fn make_soft_labels(classifier: &ModelParams, dataset: &Dataset) -> Result<SoftLabelSet> {
    if classifier.spec().output != OutputKind::Softmax {
        return Err(Error::validation("soft labels need a softmax classifier"));
    }
    let mut g = Graph::new();
    let bound = classifier.bind(&mut g);
    let x = g.leaf(dataset.features());
    let p = bound.forward(&mut g, x)?;
    Ok(SoftLabelSet {
        matrix: g.value(p).clone(),
    })
}

/// Copy of `dataset` with each record's `soft` field set from `labels`.
pub fn apply_soft_labels(dataset: &Dataset, labels: &SoftLabelSet) -> Result<Dataset> {
    if labels.matrix.rows() != dataset.len() {
        return Err(Error::validation(format!(
            "{} soft labels for {} records",
            labels.matrix.rows(),
            dataset.len()
        )));
    }
    let mut out = dataset.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        r.soft = Some(labels.matrix.row(i).to_vec());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ starts; the lowest-inertia fit wins.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `[k × e]`
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment step of the winning start, ending with the final value.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Nearest centroid per row; ties go to the lowest index.
    pub fn assign(&self, points: &Tensor) -> Result<Vec<usize>> {
        if points.cols() != self.centroids.cols() {
            return Err(Error::Dimension {
                op: "cluster assign",
                left: self.centroids.shape().to_vec(),
                right: points.shape().to_vec(),
            });
        }
        Ok(assign(points, &self.centroids, Execution::default())
            .into_iter()
            .map(|(c, _)| c)
            .collect())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(p, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Tensor, centroids: &Tensor, exec: Execution) -> Vec<(usize, f64)> {
    exec.map_range(points.rows(), |i| nearest(points.row(i), centroids))
}

fn plus_plus_init(points: &Tensor, k: usize, rng: &mut seed::Rng) -> Tensor {
    let m = points.rows();
    let e = points.cols();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = (0..m)
        .map(|i| sq_dist(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen centroid
            Err(_) => (0..m).find(|i| !chosen.contains(i)).unwrap_or(0),
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    let data = chosen
        .iter()
        .flat_map(|&i| points.row(i).iter().copied())
        .collect();
    Tensor::matrix(k, e, data).expect("k × e")
}

fn lloyd(
    points: &Tensor,
    mut centroids: Tensor,
    cfg: &KMeansConfig,
    exec: Execution,
) -> ClusterModel {
    let mut trace = Vec::new();
    for _ in 0..MAX_REFINE_ROUNDS {
        centroids = lloyd_iterations(points, centroids, cfg, exec, &mut trace);
        let mut labels: Vec<usize> = assign(points, &centroids, exec)
            .into_iter()
            .map(|a| a.0)
            .collect();
        if !transfer_refine(points, &centroids, &mut labels) {
            break;
        }
        centroids = cluster_means(points, &labels, cfg.k);
    }
    let inertia: f64 = assign(points, &centroids, exec).iter().map(|a| a.1).sum();
    trace.push(inertia);
    ClusterModel {
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

const MAX_REFINE_ROUNDS: usize = 50;

fn lloyd_iterations(
    points: &Tensor,
    mut centroids: Tensor,
    cfg: &KMeansConfig,
    exec: Execution,
    trace: &mut Vec<f64>,
) -> Tensor {
    let (m, e, k) = (points.rows(), points.cols(), cfg.k);
    for _ in 0..cfg.max_iters {
        let assigned = assign(points, &centroids, exec);
        trace.push(assigned.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0; k * e];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assigned.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * e..(c + 1) * e].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut next = Tensor::zeros(&[k, e]);
        // Empty clusters take the farthest remaining points, in decreasing distance order.
        let mut far: Vec<usize> = (0..m).collect();
        far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = far.into_iter();
        for c in 0..k {
            let row = &mut next.data_mut()[c * e..(c + 1) * e];
            if counts[c] == 0 {
                let p = far.next().unwrap_or(0);
                row.copy_from_slice(points.row(p));
            } else {
                for (r, s) in row.iter_mut().zip(&sums[c * e..(c + 1) * e]) {
                    *r = s / counts[c] as f64;
                }
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < cfg.tol {
            break;
        }
    }
    centroids
}

fn cluster_means(points: &Tensor, labels: &[usize], k: usize) -> Tensor {
    let e = points.cols();
    let mut means = Tensor::zeros(&[k, e]);
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in means.data_mut()[c * e..(c + 1) * e]
            .iter_mut()
            .zip(points.row(i))
        {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut means.data_mut()[c * e..(c + 1) * e] {
            *s /= n.max(1) as f64;
        }
    }
    means
}

/// Single-point transfers (Hartigan's rule): moving `x` from cluster `a` to `b` changes the
/// inertia by `n_b/(n_b+1)·|x−μ_b|² − n_a/(n_a−1)·|x−μ_a|²`, so any negative change is taken.
/// This escapes Lloyd fixed points that are not local optima of the partition objective.
/// Returns whether any point moved.
#[allow(clippy::needless_range_loop)]
fn transfer_refine(points: &Tensor, centroids: &Tensor, labels: &mut [usize]) -> bool {
    let (k, e) = (centroids.rows(), centroids.cols());
    let mut means = centroids.clone();
    let mut counts = vec![0usize; k];
    for &c in labels.iter() {
        counts[c] += 1;
    }
    let mut moved_any = false;
    for _ in 0..points.rows().max(1) * 4 {
        let mut moved = false;
        for i in 0..points.rows() {
            let x = points.row(i);
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(x, means.row(a));
            let mut best = (a, remove);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(x, means.row(b));
                if add < best.1 {
                    best = (b, add);
                }
            }
            let b = best.0;
            // Require a strict gain beyond rounding so the loop cannot cycle.
            if b == a || remove - best.1 <= 1e-12 * remove.max(1.0) {
                continue;
            }
            let nb = counts[b] as f64;
            let data = means.data_mut();
            for j in 0..e {
                data[a * e + j] = (na * data[a * e + j] - x[j]) / (na - 1.0);
                data[b * e + j] = (nb * data[b * e + j] + x[j]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
            moved_any = true;
        }
        if !moved {
            break;
        }
    }
    moved_any
}

pub fn kmeans_fit(points: &Tensor, cfg: &KMeansConfig) -> Result<ClusterModel> {
    kmeans_fit_with(points, cfg, Execution::default())
}

/// k-means++ seeding, Lloyd iterations and single-point transfer refinement; best of
/// `cfg.restarts` starts.
pub fn kmeans_fit_with(
    points: &Tensor,
    cfg: &KMeansConfig,
    exec: Execution,
) -> Result<ClusterModel> {
    let m = points.rows();
    if cfg.k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    if cfg.k > m {
        return Err(Error::validation(format!(
            "k = {} exceeds the {m} points",
            cfg.k
        )));
    }
    if !points.is_finite() {
        return Err(Error::validation("points must be finite"));
    }
    let restarts = cfg.restarts.max(1);
    let fits = exec.map_range(restarts, |r| {
        let mut rng = seed::rng(seed::sub_seed(cfg.seed, r as u64));
        let init = plus_plus_init(points, cfg.k, &mut rng);
        lloyd(points, init, cfg, Execution::Sequential)
    });
    let best = fits
        .into_iter()
        .reduce(|best, f| if f.inertia < best.inertia { f } else { best })
        .expect("at least one restart");
    Ok(best)
}

/// Copy of `dataset` whose domain labels are the nearest-centroid indices of `embeddings`.
/// Features and task labels are untouched; soft labels are dropped since the domain space changed.
pub fn relabel_unsup(
    dataset: &Dataset,
    model: &ClusterModel,
    embeddings: &EmbeddingSet,
) -> Result<Dataset> {
    if embeddings.matrix.rows() != dataset.len() || embeddings.indices.len() != dataset.len() {
        return Err(Error::validation(format!(
            "{} embeddings for {} records",
            embeddings.matrix.rows(),
            dataset.len()
        )));
    }
    let labels = model.assign(&embeddings.matrix)?;
    let mut out = dataset.clone();
    for (&rec, &label) in embeddings.indices.iter().zip(&labels) {
        let r = out
            .records
            .get_mut(rec)
            .ok_or_else(|| Error::validation(format!("embedding index {rec} out of range")))?;
        r.d = label;
        r.soft = None;
    }
    Ok(out)
}

pub fn label_histogram(labels: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &l in labels {
        if l < k {
            h[l] += 1;
        }
    }
    h
}

/// Mean silhouette coefficient; points in singleton clusters score 0.
pub fn silhouette(points: &Tensor, labels: &[usize], k: usize, exec: Execution) -> f64 {
    let m = points.rows();
    if m < 2 || k < 2 {
        return 0.0;
    }
    let counts = label_histogram(labels, k);
    let scores = exec.map_range(m, |i| {
        let own = labels[i];
        if counts[own] <= 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for j in 0..m {
            if j != i {
                sums[labels[j]] += sq_dist(points.row(i), points.row(j)).sqrt();
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            return 0.0;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            (b - a) / denom
        } else {
            0.0
        }
    });
    scores.iter().sum::<f64>() / m as f64
}

/// Best agreement between two labelings over one-to-one relabelings of `predicted`.
/// Brute force; both label sets must have at most 8 classes.
pub fn matched_agreement(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::validation(
            "labelings must be nonempty and equal length",
        ));
    }
    let kp = predicted.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let k = kp.max(kt);
    if k > 8 {
        return Err(Error::validation(format!(
            "matched_agreement supports up to 8 classes, got {k}"
        )));
    }
    let mut table = vec![0usize; k * k];
    for (&p, &t) in predicted.iter().zip(truth) {
        table[p * k + t] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |perm| {
        let hits: usize = (0..k).map(|p| table[p * k + perm[p]]).sum();
        best = best.max(hits);
    });
    Ok(best as f64 / predicted.len() as f64)
}

fn permute(v: &mut [usize], start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == v.len() {
        visit(v);
        return;
    }
    for i in start..v.len() {
        v.swap(start, i);
        permute(v, start + 1, visit);
        v.swap(start, i);
    }
}
