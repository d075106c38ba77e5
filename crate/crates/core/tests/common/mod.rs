//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redat::autodiff::{Graph, Tensor, Var};
use redat::nets::{self, DatModel};
use redat::trainer::Batch;
use redat::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so kinks and the log floor are never straddled.
pub fn random_away_from_zero(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    positive: bool,
) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let mag = rng.random_range(0.2..1.5);
            if positive || rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces any node to a scalar with a fixed random projection, `sum(tanh(out · r))`, so that
/// every output entry contributes a distinct, nonconstant weight.
fn scalarize(g: &mut Graph, out: Var, proj_seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    if shape == [1, 1] {
        return Ok(out);
    }
    let mut r = rng(proj_seed);
    let proj = g.leaf(random_tensor(&mut r, shape[1], 1));
    let p = g.matmul(out, proj)?;
    let t = g.tanh(p);
    Ok(g.sum(t))
}

fn eval<F>(inputs: &[Tensor], build: &F, proj_seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let root = scalarize(&mut g, out, proj_seed).unwrap();
    g.value(root).item()
}

/// Largest relative deviation between the analytic input gradients and `expected_factor` times
/// central finite differences of the forward value.
pub fn grad_check_scaled<F>(inputs: &[Tensor], build: F, expected_factor: f64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let proj_seed = 0xfeed;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let root = scalarize(&mut g, out, proj_seed).unwrap();
    g.backward(root).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).clone();
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus, &build, proj_seed) - eval(&minus, &build, proj_seed))
                / (2.0 * FD_STEP)
                * expected_factor;
            let a = analytic.data()[i];
            // Below GRAD_FLOOR the comparison is absolute: finite-difference round-off
            // (~1e-11) swamps relative error on near-zero gradients.
            let denom = a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

pub fn grad_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_scaled(inputs, build, 1.0)
}

/// Exhaustive minimum of the k-means objective over every assignment of points to `k` labels.
pub fn exhaustive_kmeans_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..dim {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(cost);
        // Odometer increment over k^n assignments.
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

/// Reads current parameter tensors of an MLP in (weight, bias) order.
fn mlp_grads(g: &Graph, bound: &nets::BoundMlp) -> Vec<Tensor> {
    bound
        .layers
        .iter()
        .flat_map(|&(w, b)| [g.grad(w).clone(), g.grad(b).clone()])
        .collect()
}

pub struct RecordedGrads {
    pub gen_from_task: Vec<Tensor>,
    pub gen_from_domain: Vec<Tensor>,
    pub task: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
    pub l_r: f64,
    pub l_c: f64,
}

/// Two separate passes: ∂L_R on (G, R) and the un-reversed ∂L_C on (G, C).
pub fn record_grads(model: &DatModel, batch: &Batch) -> RecordedGrads {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.leaf(batch.x.clone());
    let z = nets::forward_generator(&mut g, &bound.generator, x).unwrap();
    let feat = model
        .domain_feature(&mut g, &bound, &batch.cond_domains)
        .unwrap();
    let p = nets::forward_task(&mut g, &bound.task, z, feat).unwrap();
    let l_r = nets::task_loss(&mut g, p, &batch.task_labels).unwrap();
    g.backward(l_r).unwrap();
    let gen_from_task = mlp_grads(&g, &bound.generator);
    let task = mlp_grads(&g, &bound.task);
    let l_r = g.value(l_r).item();

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.leaf(batch.x.clone());
    let z = nets::forward_generator(&mut g, &bound.generator, x).unwrap();
    let q = nets::forward_classifier(&mut g, &bound.classifier, z, false, 0.0).unwrap();
    let l_c = nets::domain_loss(&mut g, q, &batch.domain_targets).unwrap();
    g.backward(l_c).unwrap();
    RecordedGrads {
        gen_from_task,
        gen_from_domain: mlp_grads(&g, &bound.generator),
        task,
        classifier: mlp_grads(&g, &bound.classifier),
        l_r,
        l_c: g.value(l_c).item(),
    }
}

/// The three displayed update rules applied by hand to a copy of `model`.
pub fn hand_update(model: &DatModel, grads: &RecordedGrads, alpha: f64, lambda: f64) -> DatModel {
    let mut m = model.clone();
    for ((p, gr), gc) in m
        .generator
        .tensors_mut()
        .zip(&grads.gen_from_task)
        .zip(&grads.gen_from_domain)
    {
        for ((v, a), b) in p.data_mut().iter_mut().zip(gr.data()).zip(gc.data()) {
            *v -= alpha * (a - lambda * b);
        }
    }
    for (p, gc) in m.classifier.tensors_mut().zip(&grads.classifier) {
        for (v, b) in p.data_mut().iter_mut().zip(gc.data()) {
            *v -= alpha * b;
        }
    }
    for (p, gr) in m.task.tensors_mut().zip(&grads.task) {
        for (v, a) in p.data_mut().iter_mut().zip(gr.data()) {
            *v -= alpha * a;
        }
    }
    m
}

pub fn max_param_diff(a: &DatModel, b: &DatModel) -> f64 {
    let pa = a
        .generator
        .tensors()
        .chain(a.classifier.tensors())
        .chain(a.task.tensors());
    let pb = b
        .generator
        .tensors()
        .chain(b.classifier.tensors())
        .chain(b.task.tensors());
    pa.zip(pb)
        .flat_map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One gradient-check case: inputs, a builder over their leaves, and the factor relating the
/// analytic gradient to finite differences of the forward value (`-λ` for gradient reversal).
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
    pub factor: f64,
}

pub const OPS: [&str; 19] = [
    "matmul",
    "add",
    "bias_add",
    "tanh",
    "relu",
    "log",
    "scale",
    "concat_cols",
    "mean",
    "sum",
    "softmax_rows",
    "cross_entropy_soft",
    "cross_entropy_hard",
    "grad_reverse",
    "grad_reverse_twice",
    "shared_subexpression_dag",
    "mlp_forward",
    "classifier_reversed",
    "task_with_domain_feature",
];

fn mlp_inputs(rng: &mut ChaCha8Rng, widths: &[usize]) -> Vec<Tensor> {
    widths
        .windows(2)
        .flat_map(|w| [random_tensor(rng, w[0], w[1]), random_tensor(rng, 1, w[1])])
        .collect()
}

fn bound_from(vars: &[Var], act: nets::Activation, out: nets::OutputKind) -> nets::BoundMlp {
    nets::BoundMlp {
        layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        hidden: act,
        output: out,
    }
}

/// Random instance of the named case; shapes are drawn from `rng`.
pub fn grad_case(op: &str, rng: &mut ChaCha8Rng) -> GradCase {
    let m = rng.random_range(1..=5);
    let n = rng.random_range(1..=5);
    let k = rng.random_range(1..=5);
    let one = |f: fn(&mut Graph, Var) -> Result<Var>| -> Build { Box::new(move |g, v| f(g, v[0])) };
    let (inputs, build, factor): (Vec<Tensor>, Build, f64) = match op {
        "matmul" => (
            vec![random_tensor(rng, m, k), random_tensor(rng, k, n)],
            Box::new(|g, v| g.matmul(v[0], v[1])),
            1.0,
        ),
        "add" => (
            vec![random_tensor(rng, m, n), random_tensor(rng, m, n)],
            Box::new(|g, v| g.add(v[0], v[1])),
            1.0,
        ),
        "bias_add" => (
            vec![random_tensor(rng, m, n), random_tensor(rng, 1, n)],
            Box::new(|g, v| g.bias_add(v[0], v[1])),
            1.0,
        ),
        "tanh" => (
            vec![random_tensor(rng, m, n)],
            one(|g, x| Ok(g.tanh(x))),
            1.0,
        ),
        "relu" => (
            vec![random_away_from_zero(rng, m, n, false)],
            one(|g, x| Ok(g.relu(x))),
            1.0,
        ),
        "log" => (
            vec![random_away_from_zero(rng, m, n, true)],
            one(|g, x| Ok(g.log(x))),
            1.0,
        ),
        "scale" => {
            let c = rng.random_range(-2.0..2.0);
            (
                vec![random_tensor(rng, m, n)],
                Box::new(move |g, v| Ok(g.scale(v[0], c))),
                1.0,
            )
        }
        "concat_cols" => (
            vec![random_tensor(rng, m, n), random_tensor(rng, m, k)],
            Box::new(|g, v| g.concat_cols(v[0], v[1])),
            1.0,
        ),
        "mean" => (
            vec![random_tensor(rng, m, n)],
            one(|g, x| Ok(g.mean(x))),
            1.0,
        ),
        "sum" => (
            vec![random_tensor(rng, m, n)],
            one(|g, x| Ok(g.sum(x))),
            1.0,
        ),
        "softmax_rows" => (
            vec![random_tensor(rng, m, n + 1)],
            one(|g, x| g.softmax_rows(x)),
            1.0,
        ),
        "cross_entropy_soft" => {
            let targets = random_prob_rows(rng, m, n + 1);
            (
                vec![random_tensor(rng, m, n + 1)],
                Box::new(move |g, v| {
                    let p = g.softmax_rows(v[0])?;
                    g.cross_entropy_soft(p, &targets)
                }),
                1.0,
            )
        }
        "cross_entropy_hard" => {
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=n)).collect();
            (
                vec![random_tensor(rng, m, n + 1)],
                Box::new(move |g, v| {
                    let p = g.softmax_rows(v[0])?;
                    g.cross_entropy_hard(p, &labels)
                }),
                1.0,
            )
        }
        "grad_reverse" => {
            let lambda = rng.random_range(0.1..2.0);
            (
                vec![random_tensor(rng, m, n)],
                Box::new(move |g, v| {
                    let r = g.grad_reverse(v[0], lambda)?;
                    Ok(g.tanh(r))
                }),
                -lambda,
            )
        }
        "grad_reverse_twice" => {
            let (l1, l2) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            (
                vec![random_tensor(rng, m, n)],
                Box::new(move |g, v| {
                    let r = g.grad_reverse(v[0], l1)?;
                    g.grad_reverse(r, l2)
                }),
                l1 * l2,
            )
        }
        "shared_subexpression_dag" => (
            vec![
                random_tensor(rng, m, k),
                random_tensor(rng, k, n),
                random_tensor(rng, 1, n),
            ],
            Box::new(|g, v| {
                // h feeds three consumers; x feeds two.
                let xw = g.matmul(v[0], v[1])?;
                let h = g.bias_add(xw, v[2])?;
                let h = g.tanh(h);
                let p = g.softmax_rows(h)?;
                let lp = g.log(p);
                let hh = g.add(h, lp)?;
                let c = g.concat_cols(hh, v[0])?;
                let s = g.scale(h, 0.5);
                let c2 = g.concat_cols(c, s)?;
                Ok(g.tanh(c2))
            }),
            1.0,
        ),
        "mlp_forward" => {
            let act = if rng.random::<bool>() {
                nets::Activation::Tanh
            } else {
                nets::Activation::Relu
            };
            let widths = [k, rng.random_range(1..=5), n];
            let mut inputs = vec![random_tensor(rng, m, k)];
            inputs.extend(mlp_inputs(rng, &widths));
            (
                inputs,
                Box::new(move |g, v| {
                    let b = bound_from(&v[1..], act, nets::OutputKind::Linear);
                    nets::forward_generator(g, &b, v[0])
                }),
                1.0,
            )
        }
        "classifier_reversed" => {
            // Only the classifier parameters are checked: they sit after the reversal node.
            let z = random_tensor(rng, m, k);
            let widths = [k, rng.random_range(1..=5), n + 1];
            let lambda = rng.random_range(0.1..2.0);
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=n)).collect();
            (
                mlp_inputs(rng, &widths),
                Box::new(move |g, v| {
                    let zv = g.leaf(z.clone());
                    let b = bound_from(v, nets::Activation::Tanh, nets::OutputKind::Softmax);
                    let p = nets::forward_classifier(g, &b, zv, true, lambda)?;
                    nets::domain_loss(g, p, &nets::DomainTargets::Hard(labels.clone()))
                }),
                1.0,
            )
        }
        "task_with_domain_feature" => {
            let q = rng.random_range(1..=3);
            let widths = [k + q, rng.random_range(1..=5), n + 1];
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=n)).collect();
            let mut inputs = vec![random_tensor(rng, m, k), random_tensor(rng, m, q)];
            inputs.extend(mlp_inputs(rng, &widths));
            (
                inputs,
                Box::new(move |g, v| {
                    let b = bound_from(&v[2..], nets::Activation::Tanh, nets::OutputKind::Softmax);
                    let p = nets::forward_task(g, &b, v[0], Some(v[1]))?;
                    nets::task_loss(g, p, &labels)
                }),
                1.0,
            )
        }
        other => panic!("unknown op {other}"),
    };
    GradCase {
        inputs,
        build,
        factor,
    }
}

/// Worst relative error of each op over `trials` random shapes.
pub fn grad_check_all(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    OPS.iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut r = rng(seed ^ (i as u64) << 32);
            let worst = (0..trials)
                .map(|_| {
                    let case = grad_case(op, &mut r);
                    grad_check_scaled(&case.inputs, case.build, case.factor)
                })
                .fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}

/// Hand evaluation of both sides of the value/divergence identity on raw probability rows:
/// `(Σ_i Σ_s P_i ln(P_i / ΣP), Σ_i KL(P_i ‖ M) − N ln N)`.
pub fn identity_sides(rows: &[Vec<f64>]) -> (f64, f64) {
    let n = rows.len() as f64;
    let s = rows[0].len();
    let col: Vec<f64> = (0..s).map(|k| rows.iter().map(|r| r[k]).sum()).collect();
    let mut value = 0.0;
    let mut kl = 0.0;
    for r in rows {
        for k in 0..s {
            if r[k] > 0.0 {
                value += r[k] * (r[k] / col[k]).ln();
                kl += r[k] * (r[k] / (col[k] / n)).ln();
            }
        }
    }
    (value, kl - n * n.ln())
}

/// Random probability rows with a Dirichlet-like spread, strictly positive.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..s)
                .map(|_| -rng.random_range(1e-6f64..1.0).ln())
                .collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        })
        .collect()
}

/// Small k-means instances: `(points, k)` with n ≤ 8, k ≤ 3. Half of them sit on an integer grid
/// so duplicates and equidistant ties occur.
pub fn small_kmeans_instances(count: usize, seed: u64) -> Vec<(Vec<Vec<f64>>, usize)> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let n = r.random_range(1..=8);
            let k = r.random_range(1..=n.min(3));
            let dim = r.random_range(1..=3);
            let grid = i % 2 == 0;
            let pts = (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|_| {
                            if grid {
                                r.random_range(0..4) as f64
                            } else {
                                r.random_range(-5.0..5.0)
                            }
                        })
                        .collect()
                })
                .collect();
            (pts, k)
        })
        .collect()
}

/// Worst `fitted − optimal` inertia gap over the instances (10 restarts each).
pub fn kmeans_oracle_gap(instances: &[(Vec<Vec<f64>>, usize)]) -> f64 {
    use redat::relabel::{kmeans_fit, KMeansConfig};
    instances
        .iter()
        .enumerate()
        .map(|(i, (pts, k))| {
            let t = Tensor::from_rows(pts).unwrap();
            let fit = kmeans_fit(&t, &KMeansConfig::new(*k, i as u64)).unwrap();
            fit.inertia - exhaustive_kmeans_optimum(pts, *k)
        })
        .fold(f64::MIN, f64::max)
}
