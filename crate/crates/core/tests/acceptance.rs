//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    grad_check_all, hand_update, identity_sides, kmeans_oracle_gap, max_param_diff, random_rows,
    record_grads, rng, small_kmeans_instances, FD_TOL,
};
use rand::Rng;
use redat::datagen::{self, Dataset, GenConfig};
use redat::nets::{ArchConfig, ConditioningKind, DatModel, DomainTargets};
use redat::theory::{self, DiscreteDistribution, MinimaxConfig};
use redat::trainer::{self, train_step_dat, Batch, Method, MetricsReport, TrainConfig};
use serde_json::json;

struct Verdict {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn gradient_integrity() -> Verdict {
    let t = Instant::now();
    let worst = grad_check_all(20, 1);
    let elapsed = t.elapsed();
    let (op, err) = worst
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = worst
        .iter()
        .filter(|(_, e)| *e >= FD_TOL)
        .map(|(o, _)| *o)
        .collect();
    check(
        failing.is_empty() && within(elapsed, 30),
        format!(
            "{} ops x 20 shapes, worst rel err {err:.2e} ({op}), failing {failing:?}, {:.1}s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn inner_max_oracle() -> Verdict {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=4);
        let s = r.random_range(2..=6);
        let d = theory::random_distributions(n, s, r.random());
        worst = worst.max(theory::verify_inner_max(&d, 20_000, 1.0).unwrap().sup_error);
    }
    let elapsed = t.elapsed();
    check(
        worst < 1e-3 && within(elapsed, 60),
        format!(
            "50 sets, worst sup error {worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn jsd_identity() -> Verdict {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..=5);
        let s = r.random_range(1..=8);
        let rows = random_rows(&mut r, n, s);
        let d: Vec<DiscreteDistribution> = rows
            .iter()
            .map(|p| DiscreteDistribution::new(p.clone()).unwrap())
            .collect();
        let value = theory::value_function(&d, &theory::optimal_classifier(&d).unwrap()).unwrap();
        let (hand_value, hand_divergence) = identity_sides(&rows);
        let nf = n as f64;
        let lib_divergence: f64 = {
            let m = theory::mixture(&d).unwrap();
            d.iter().map(|p| theory::kld(p, &m).unwrap()).sum::<f64>() - nf * nf.ln()
        };
        worst = worst
            .max((value - hand_divergence).abs())
            .max((value - lib_divergence).abs())
            .max((hand_value - hand_divergence).abs());
    }
    check(
        worst < 1e-9,
        format!("1000 inputs, worst residual {worst:.2e}"),
    )
}

fn minimax_convergence() -> Verdict {
    let t = Instant::now();
    let cfg = MinimaxConfig::default();
    let trace = theory::verify_minimax(&cfg).unwrap();
    let elapsed = t.elapsed();
    let last = trace.last();
    let target = theory::minimax_target(3);
    let tv = trace.max_pairwise_tv();
    check(
        last.jsd < 1e-3 && (last.value - target).abs() < 1e-2 && tv < 0.02 && within(elapsed, 60),
        format!(
            "N=3 S=4, {} steps: jsd {:.2e}, value {:.6} (target {target:.6}), max TV {tv:.2e}, {:.1}s",
            trace.rows.len() - 1,
            last.jsd,
            last.value,
            elapsed.as_secs_f64()
        ),
    )
}

fn small_splits() -> datagen::Splits {
    datagen::generate(&GenConfig {
        samples_per_domain: 200,
        ..GenConfig::default()
    })
    .unwrap()
}

fn update_rule_fidelity() -> Verdict {
    let splits = small_splits();
    let ds = &splits.train;
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for case in 0..10u64 {
        let arch = ArchConfig::default();
        let model = DatModel::init(
            &arch,
            ds.dim(),
            3,
            4,
            ConditioningKind::None,
            3,
            1.0,
            500 + case,
        )
        .unwrap();
        let size = r.random_range(2..64);
        let idx: Vec<usize> = (0..size).map(|_| r.random_range(0..ds.len())).collect();
        let batch = Batch::from_dataset(ds, &idx, &DomainTargets::Hard(ds.domain_labels()));
        let alpha = r.random_range(0.001..0.2);
        let lambda = r.random_range(0.0..2.0);
        let expected = hand_update(&model, &record_grads(&model, &batch), alpha, lambda);
        let mut stepped = model.clone();
        train_step_dat(&mut stepped, &batch, alpha, lambda).unwrap();
        worst = worst.max(max_param_diff(&stepped, &expected));
    }
    check(
        worst < 1e-10,
        format!("10 cases, worst parameter diff {worst:.2e}"),
    )
}

fn one_hot_soft(ds: &Dataset) -> Dataset {
    let n = ds.n_domains();
    let records = ds
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.soft = Some((0..n).map(|j| if j == r.d { 1.0 } else { 0.0 }).collect());
            r
        })
        .collect();
    Dataset::new(records).unwrap()
}

fn reduction_property() -> Verdict {
    let splits = small_splits();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::for_method(Method::Dat, 6)
    };
    let dat = trainer::train(&cfg, &splits.train, None).unwrap();
    let soft_cfg = TrainConfig {
        method: Method::RedatSoft,
        ..cfg
    };
    let soft = trainer::train(&soft_cfg, &one_hot_soft(&splits.train), None).unwrap();
    let same_len = dat.trace.steps.len() == soft.trace.steps.len();
    let worst = dat
        .trace
        .steps
        .iter()
        .zip(&soft.trace.steps)
        .map(|(a, b)| {
            (a.task - b.task)
                .abs()
                .max((a.domain.unwrap() - b.domain.unwrap()).abs())
        })
        .fold(0.0, f64::max);
    check(
        same_len && worst < 1e-9,
        format!(
            "{} steps, worst loss diff {worst:.2e}",
            dat.trace.steps.len()
        ),
    )
}

fn kmeans_oracle() -> Verdict {
    let instances = small_kmeans_instances(1000, 7);
    let gap = kmeans_oracle_gap(&instances);
    check(
        gap <= 1e-9,
        format!("1000 instances (n<=8, k<=3), worst gap {gap:.2e}"),
    )
}

#[derive(Default)]
struct MethodMeans {
    unseen: f64,
    probe: f64,
    jsd: f64,
}

fn table_analog() -> Verdict {
    let t = Instant::now();
    let splits = datagen::generate(&GenConfig::default()).unwrap();
    let seeds = 0..5u64;
    let methods = [
        Method::Pool,
        Method::OnehotEmbed,
        Method::LinearEmbed,
        Method::Dat,
    ];
    let mut means: Vec<MethodMeans> = Vec::new();
    for m in methods {
        let mut acc = MethodMeans::default();
        for seed in seeds.clone() {
            let r = trainer::run_on_splits(m.name(), &TrainConfig::for_method(m, seed), &splits)
                .unwrap();
            acc.unseen += r.unseen_error().unwrap() / 5.0;
            acc.probe += r.probe_acc / 5.0;
            acc.jsd += r.emb_jsd / 5.0;
        }
        means.push(acc);
    }
    let elapsed = t.elapsed();
    let [pool, onehot, linear, dat] = [&means[0], &means[1], &means[2], &means[3]];
    let chance = 1.0 / 3.0;
    let a = dat.unseen <= pool.unseen;
    let b = onehot.unseen > dat.unseen && linear.unseen > dat.unseen;
    let c = dat.probe <= chance + 0.10 && pool.probe >= 0.60;
    let d = dat.jsd < pool.jsd;
    check(
        a && b && c && d && within(elapsed, 600),
        format!(
            "(a) unseen dat {:.4} <= pool {:.4}: {a}; (b) onehot {:.4}, linear {:.4} > dat: {b}; \
             (c) probe dat {:.3} <= {:.3}, pool {:.3} >= 0.60: {c}; (d) jsd dat {:.4} < pool {:.4}: {d}; {:.0}s",
            dat.unseen,
            pool.unseen,
            onehot.unseen,
            linear.unseen,
            dat.probe,
            chance + 0.10,
            pool.probe,
            dat.jsd,
            pool.jsd,
            elapsed.as_secs_f64()
        ),
    )
}

fn redat(args: &[&str]) -> i32 {
    let o = Command::new(env!("CARGO_BIN_EXE_redat"))
        .args(args)
        .output()
        .unwrap();
    if !o.status.success() {
        eprintln!("redat {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    o.status.code().unwrap_or(-1)
}

type Snapshot = Vec<(PathBuf, Vec<u8>)>;

fn pipeline(root: &Path) -> Result<(Snapshot, String), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    let relabeled = root.join("relabeled.jsonl");
    let plan = root.join("plan.json");
    let results = root.join("results");
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--out".into(), s(&data)],
        vec![
            "relabel".into(),
            "--dataset".into(),
            s(&data.join("train.jsonl")),
            "--mode".into(),
            "unsup".into(),
            "--k".into(),
            "8".into(),
            "--out".into(),
            s(&relabeled),
        ],
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if redat(&args) != 0 {
            return Err(format!("{} failed", args[0]));
        }
    }
    let plan_json = json!({
        "train": "data/train.jsonl",
        "test_seen": "data/test_seen.jsonl",
        "test_unseen": "data/test_unseen.jsonl",
        "runs": [
            {"config": {"method": "pool", "epochs": 5}},
            {"config": {"method": "redat_unsup", "k": 8, "epochs": 5}, "train": "relabeled.jsonl"},
        ],
        "seeds": [1, 2],
        "out_dir": "results",
    });
    std::fs::write(&plan, plan_json.to_string()).unwrap();
    if redat(&["train", "--plan", &s(&plan)]) != 0 {
        return Err("train failed".into());
    }
    let out = Command::new(env!("CARGO_BIN_EXE_redat"))
        .arg("compare")
        .args([1, 2].map(|seed| s(&results.join(format!("redat_unsup_seed{seed}.json")))))
        .arg(s(&results.join("pool_seed1.json")))
        .output()
        .unwrap();
    if !out.status.success() {
        return Err("compare failed".into());
    }
    let csv_path = results.join("merged.csv");
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| e.to_string())?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    if header.iter().collect::<Vec<_>>() != trainer::CSV_HEADER {
        return Err(format!("bad CSV header {header:?}"));
    }
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if rec.len() != header.len() || rec[3].parse::<f64>().is_err() {
            return Err(format!("malformed CSV row {rec:?}"));
        }
        rows += 1;
    }
    for seed in [1, 2] {
        let p = results.join(format!("redat_unsup_seed{seed}.json"));
        let r: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        if r.config.k != Some(8) {
            return Err("report lost k".into());
        }
    }
    let mut files = Vec::new();
    collect_files(root, root, &mut files);
    files.sort();
    Ok((
        files,
        format!(
            "{rows} CSV rows, {}",
            String::from_utf8_lossy(&out.stdout).lines().count()
        ),
    ))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Snapshot) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect_files(root, &p, out);
        } else {
            out.push((
                p.strip_prefix(root).unwrap().to_path_buf(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
}

fn pipeline_integrity() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok((fa, info)), Ok((fb, _))) => {
            let identical = fa == fb;
            check(
                identical,
                format!(
                    "{} files, {info} table lines, byte-identical rerun: {identical}",
                    fa.len()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => check(false, e),
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient integrity", gradient_integrity),
        ("inner-max oracle", inner_max_oracle),
        ("JSD identity", jsd_identity),
        ("minimax convergence", minimax_convergence),
        ("update-rule fidelity", update_rule_fidelity),
        ("reduction property", reduction_property),
        ("k-means oracle", kmeans_oracle),
        ("desk-scale table analog", table_analog),
        ("pipeline integrity", pipeline_integrity),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        failed += usize::from(!v.pass);
        println!(
            "{} criterion {} ({name}): {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
