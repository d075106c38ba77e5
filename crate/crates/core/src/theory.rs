//! The adversarial objective on finite supports.
//!
//! For `N` domain distributions `P_1..P_N` over `S` support points and a classifier table
//! `C[i][s]` whose columns are probability vectors, the classifier maximizes
//! `V(P, C) = Σ_i Σ_s P_i(s) ln C_i(s)`. The maximizer is `C*_i(s) = P_i(s) / Σ_j P_j(s)` and
//! at that point `V = Σ_i KL(P_i ‖ M) − N ln N` with `M` the uniform mixture, so a generator
//! minimizing `V(P, C*)` drives every `P_i` to the same distribution.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::autodiff::softmax_in_place;
use crate::error::{Error, Result};
use crate::seed;

pub const SUM_TOL: f64 = 1e-9;

/// Keeps classifier entries inside the open interval `(0, 1)`.
pub const TABLE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation(
                "distribution needs at least one support point",
            ));
        }
        if let Some(s) = probs.iter().position(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::validation(format!(
                "probability at support point {s} is {}",
                probs[s]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::validation(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(DiscreteDistribution { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        DiscreteDistribution::new(p)
    }

    pub fn uniform(s: usize) -> Result<Self> {
        DiscreteDistribution::new(vec![1.0 / s as f64; s])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }
}

/// `N × S` table of classifier outputs, `entry(i, s) = C_i` at support point `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTable {
    n: usize,
    s: usize,
    entries: Vec<f64>,
}

impl ClassifierTable {
    pub fn new(n: usize, s: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || s == 0 || entries.len() != n * s {
            return Err(Error::Dimension {
                op: "classifier table",
                left: vec![n, s],
                right: vec![entries.len()],
            });
        }
        let table = ClassifierTable { n, s, entries };
        for col in 0..s {
            let sum: f64 = (0..n).map(|i| table.get(i, col)).sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::validation(format!(
                    "classifier column {col} sums to {sum}"
                )));
            }
            if (0..n).any(|i| !(table.get(i, col) > 0.0 && table.get(i, col) < 1.0)) {
                return Err(Error::validation(format!(
                    "classifier column {col} leaves the open interval (0, 1)"
                )));
            }
        }
        Ok(table)
    }

    /// Column-wise softmax of an `N × S` logit matrix.
    pub fn from_column_logits(n: usize, s: usize, logits: &[f64]) -> Result<Self> {
        let mut entries = vec![0.0; n * s];
        let mut col = vec![0.0; n];
        for c in 0..s {
            for i in 0..n {
                col[i] = logits[i * s + c];
            }
            softmax_in_place(&mut col);
            for i in 0..n {
                entries[i * s + c] = col[i].clamp(TABLE_EPS, 1.0 - TABLE_EPS);
            }
        }
        ClassifierTable::new(n, s, entries)
    }

    pub fn get(&self, i: usize, s: usize) -> f64 {
        self.entries[i * self.s + s]
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn support_size(&self) -> usize {
        self.s
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn sup_distance(&self, other: &ClassifierTable) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Unconstrained `N × S` parameters; row `i` induces `P_i = softmax(row i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLogits {
    n: usize,
    s: usize,
    logits: Vec<f64>,
}

impl GeneratorLogits {
    pub fn new(n: usize, s: usize, logits: Vec<f64>) -> Result<Self> {
        if n == 0 || s == 0 || logits.len() != n * s {
            return Err(Error::Dimension {
                op: "generator logits",
                left: vec![n, s],
                right: vec![logits.len()],
            });
        }
        Ok(GeneratorLogits { n, s, logits })
    }

    /// Standard-normal logits.
    pub fn random(n: usize, s: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let logits = (0..n * s)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        GeneratorLogits::new(n, s, logits)
    }

    pub fn distributions(&self) -> Vec<DiscreteDistribution> {
        self.logits
            .chunks(self.s)
            .map(|row| DiscreteDistribution::from_logits(row).expect("softmax is normalized"))
            .collect()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn check_same_support(dists: &[DiscreteDistribution], min_n: usize) -> Result<usize> {
    if dists.len() < min_n {
        return Err(Error::validation(format!(
            "need at least {min_n} distributions, got {}",
            dists.len()
        )));
    }
    let s = dists[0].support_size();
    if let Some(bad) = dists.iter().find(|d| d.support_size() != s) {
        return Err(Error::Dimension {
            op: "support size",
            left: vec![s],
            right: vec![bad.support_size()],
        });
    }
    Ok(s)
}

/// `KL(p ‖ q) = Σ_s p_s ln(p_s / q_s)` with `0 · ln 0 = 0`.
pub fn kld(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.support_size() != q.support_size() {
        return Err(Error::Dimension {
            op: "kld",
            left: vec![p.support_size()],
            right: vec![q.support_size()],
        });
    }
    let mut total = 0.0;
    for (s, (&ps, &qs)) in p.probs.iter().zip(&q.probs).enumerate() {
        if ps == 0.0 {
            continue;
        }
        if qs == 0.0 {
            return Err(Error::DivergenceUndefined(s));
        }
        total += ps * (ps / qs).ln();
    }
    // rounding can leave a tiny negative value for p ≈ q
    Ok(total.max(0.0))
}

/// Uniform mixture `M = (Σ_i P_i) / N`.
pub fn mixture(dists: &[DiscreteDistribution]) -> Result<DiscreteDistribution> {
    let s = check_same_support(dists, 1)?;
    let n = dists.len() as f64;
    let probs = (0..s)
        .map(|k| dists.iter().map(|d| d.probs[k]).sum::<f64>() / n)
        .collect();
    DiscreteDistribution::new(probs)
}

/// Generalized Jensen-Shannon divergence as the unweighted sum `Σ_i KL(P_i ‖ M)`.
pub fn jsd(dists: &[DiscreteDistribution]) -> Result<f64> {
    check_same_support(dists, 2)?;
    let m = mixture(dists)?;
    dists.iter().map(|p| kld(p, &m)).sum()
}

/// Conventional `1/N`-weighted JSD, bounded by `ln N`.
pub fn jsd_normalized(dists: &[DiscreteDistribution]) -> Result<f64> {
    Ok(jsd(dists)? / dists.len() as f64)
}

pub fn total_variation(p: &DiscreteDistribution, q: &DiscreteDistribution) -> f64 {
    0.5 * p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Closed-form inner maximum `C*_i(s) = P_i(s) / Σ_j P_j(s)`, clamped to `[ε, 1 − ε]`.
pub fn optimal_classifier(dists: &[DiscreteDistribution]) -> Result<ClassifierTable> {
    let s = check_same_support(dists, 1)?;
    let n = dists.len();
    let mut entries = vec![0.0; n * s];
    for k in 0..s {
        let col: f64 = dists.iter().map(|d| d.probs[k]).sum();
        if col <= 0.0 {
            return Err(Error::UndefinedPoint(k));
        }
        for (i, d) in dists.iter().enumerate() {
            entries[i * s + k] = (d.probs[k] / col).clamp(TABLE_EPS, 1.0 - TABLE_EPS);
        }
    }
    ClassifierTable::new(n, s, entries)
}

/// `Σ_i Σ_s P_i(s) ln C_i(s)`.
pub fn value_function(dists: &[DiscreteDistribution], table: &ClassifierTable) -> Result<f64> {
    let s = check_same_support(dists, 1)?;
    if table.n != dists.len() || table.s != s {
        return Err(Error::Dimension {
            op: "value_function",
            left: vec![dists.len(), s],
            right: vec![table.n, table.s],
        });
    }
    let mut total = 0.0;
    for (i, d) in dists.iter().enumerate() {
        for (k, &p) in d.probs.iter().enumerate() {
            if p > 0.0 {
                total += p * table.get(i, k).ln();
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct InnerMaxOutcome {
    pub table: ClassifierTable,
    /// Sup-norm distance to the closed-form optimum.
    pub sup_error: f64,
    pub steps: usize,
}

/// Maximizes [`value_function`] over classifier tables by gradient ascent on per-column logits,
/// starting from the uniform table, and reports the distance to [`optimal_classifier`].
pub fn verify_inner_max(
    dists: &[DiscreteDistribution],
    steps: usize,
    step_size: f64,
) -> Result<InnerMaxOutcome> {
    let s = check_same_support(dists, 1)?;
    let n = dists.len();
    if step_size.is_nan() || step_size <= 0.0 {
        return Err(Error::validation("step size must be positive"));
    }
    let optimum = optimal_classifier(dists)?;
    let col_mass: Vec<f64> = (0..s)
        .map(|k| dists.iter().map(|d| d.probs[k]).sum())
        .collect();
    let mut logits = vec![0.0; n * s];
    let mut col = vec![0.0; n];
    for _ in 0..steps {
        for k in 0..s {
            for i in 0..n {
                col[i] = logits[i * s + k];
            }
            softmax_in_place(&mut col);
            // ∂V/∂a_{i,s} = P_i(s) − C_i(s) Σ_j P_j(s)
            for i in 0..n {
                let grad = dists[i].probs[k] - col[i] * col_mass[k];
                logits[i * s + k] += step_size * grad;
            }
        }
    }
    let table = ClassifierTable::from_column_logits(n, s, &logits)?;
    let sup_error = table.sup_distance(&optimum);
    Ok(InnerMaxOutcome {
        table,
        sup_error,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimaxConfig {
    pub n: usize,
    pub s: usize,
    pub seed: u64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        MinimaxConfig {
            n: 3,
            s: 4,
            seed: 7,
            steps: 20_000,
            step_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub value: f64,
    pub jsd: f64,
    /// `value − (jsd − N ln N)`, computed from independently evaluated sides.
    pub identity_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MinimaxTrace {
    pub rows: Vec<TraceRow>,
    pub final_dists: Vec<DiscreteDistribution>,
}

impl MinimaxTrace {
    pub fn last(&self) -> &TraceRow {
        self.rows.last().expect("trace has the initial row")
    }

    pub fn max_pairwise_tv(&self) -> f64 {
        let d = &self.final_dists;
        let mut worst: f64 = 0.0;
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                worst = worst.max(total_variation(&d[i], &d[j]));
            }
        }
        worst
    }
}

/// `−N ln N`, the value of the game at its global minimum.
pub fn minimax_target(n: usize) -> f64 {
    -(n as f64) * (n as f64).ln()
}

const DIVERGENCE_WINDOW: usize = 100;

/// Alternating optimization of the discrete game: refit the classifier in closed form, then take
/// one gradient-descent step on the generator logits against `V(P, C*)`.
///
/// The trace has `steps + 1` rows; row `t` describes the logits after `t` updates.
pub fn verify_minimax(cfg: &MinimaxConfig) -> Result<MinimaxTrace> {
    let init = GeneratorLogits::random(cfg.n, cfg.s, cfg.seed)?;
    verify_minimax_from(init, cfg.steps, cfg.step_size)
}

pub fn verify_minimax_from(
    init: GeneratorLogits,
    steps: usize,
    step_size: f64,
) -> Result<MinimaxTrace> {
    let (n, s) = (init.n, init.s);
    if n < 2 || s < 2 {
        return Err(Error::validation(format!(
            "minimax needs N >= 2 and S >= 2, got N={n}, S={s}"
        )));
    }
    if step_size.is_nan() || step_size <= 0.0 {
        return Err(Error::validation("step size must be positive"));
    }
    let mut logits = init;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut rising = 0usize;
    for step in 0..=steps {
        let dists = logits.distributions();
        let table = optimal_classifier(&dists)?;
        let value = value_function(&dists, &table)?;
        let div = jsd(&dists)?;
        rows.push(TraceRow {
            step,
            value,
            jsd: div,
            identity_residual: value - (div + minimax_target(n)),
        });
        if !value.is_finite() {
            return Err(Error::OptimizationFailure(format!(
                "non-finite value at step {step}"
            )));
        }
        if step > 0 {
            if value > rows[step - 1].value {
                rising += 1;
                if rising >= DIVERGENCE_WINDOW {
                    return Err(Error::OptimizationFailure(format!(
                        "value increased for {DIVERGENCE_WINDOW} consecutive steps (step {step})"
                    )));
                }
            } else {
                rising = 0;
            }
        }
        if step == steps {
            return Ok(MinimaxTrace {
                rows,
                final_dists: dists,
            });
        }
        // ∂V/∂P_i(s) = ln C*_i(s); chain through the row softmax.
        for (i, d) in dists.iter().enumerate() {
            let log_c: Vec<f64> = (0..s).map(|k| table.get(i, k).ln()).collect();
            let mean: f64 = d.probs.iter().zip(&log_c).map(|(p, l)| p * l).sum();
            for (k, (p, l)) in d.probs.iter().zip(&log_c).enumerate() {
                let grad = p * (l - mean);
                logits.logits[i * s + k] -= step_size * grad;
            }
        }
    }
    unreachable!("loop returns at the final step")
}

/// `Σ_i l_i · P_i` for a soft label `l`.
pub fn soft_label_mixture(
    soft_label: &[f64],
    dists: &[DiscreteDistribution],
) -> Result<DiscreteDistribution> {
    let s = check_same_support(dists, 1)?;
    if soft_label.len() != dists.len() {
        return Err(Error::Dimension {
            op: "soft_label_mixture",
            left: vec![soft_label.len()],
            right: vec![dists.len()],
        });
    }
    let label = DiscreteDistribution::new(soft_label.to_vec())
        .map_err(|e| Error::validation(format!("soft label is not normalized: {e}")))?;
    let probs = (0..s)
        .map(|k| {
            label
                .probs
                .iter()
                .zip(dists)
                .map(|(l, d)| l * d.probs[k])
                .sum()
        })
        .collect();
    DiscreteDistribution::new(probs)
}

/// `n` flat-Dirichlet draws over `s` points.
pub fn random_distributions(n: usize, s: usize, seed: u64) -> Vec<DiscreteDistribution> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..s).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            DiscreteDistribution::new(raw.iter().map(|v| v / total).collect()).unwrap()
        })
        .collect()
}
