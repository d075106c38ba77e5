//! Synthetic multi-domain classification data.
//!
//! Task class `t` has a base mean on a circle of radius 3 in the first two coordinates. A record
//! from domain `j` is `R(angle_j)·(μ_t + ε) + offset_j`, where `R` rotates the first two
//! coordinates and `ε` is isotropic Gaussian noise. A fraction of records per domain is marked
//! non-native and receives extra noise.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{validate_prob_rows, Tensor};
use crate::error::{Error, Result};
use crate::seed;

pub const CLASS_RADIUS: f64 = 3.0;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Radians, applied in the plane of the first two coordinates.
    pub rotation_angle: f64,
    pub offset: Vec<f64>,
    pub noise_scale: f64,
    pub nonnative_fraction: f64,
    pub nonnative_extra_noise: f64,
}

impl DomainSpec {
    fn validate(&self, name: &str, d: usize) -> Result<()> {
        if !self.rotation_angle.is_finite() {
            return Err(Error::validation(format!(
                "{name}.rotation_angle must be finite"
            )));
        }
        if self.offset.len() != d {
            return Err(Error::validation(format!(
                "{name}.offset has length {}, expected d = {d}",
                self.offset.len()
            )));
        }
        if self.offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("{name}.offset must be finite")));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::validation(format!(
                "{name}.noise_scale must be > 0, got {}",
                self.noise_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.nonnative_fraction) {
            return Err(Error::validation(format!(
                "{name}.nonnative_fraction must be in [0, 1], got {}",
                self.nonnative_fraction
            )));
        }
        if !(self.nonnative_extra_noise > 0.0 && self.nonnative_extra_noise.is_finite()) {
            return Err(Error::validation(format!(
                "{name}.nonnative_extra_noise must be > 0, got {}",
                self.nonnative_extra_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Feature dimension.
    pub d: usize,
    /// Number of task classes.
    pub t: usize,
    pub n_seen: usize,
    pub samples_per_domain: usize,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub unseen: DomainSpec,
}

impl Default for GenConfig {
    /// Three seen domains rotated by 0, 0.5 and 1.0 rad, each shifted along its own axis; the
    /// unseen domain sits at the interpolated angle 0.75 with a shift along a fresh axis.
    fn default() -> Self {
        let d = 16;
        let axis = |k: usize, scale: f64| {
            let mut v = vec![0.0; d];
            v[k] = scale;
            v
        };
        let domain = |angle: f64, k: usize| DomainSpec {
            rotation_angle: angle,
            offset: axis(k, 2.25),
            noise_scale: 0.9,
            nonnative_fraction: 0.25,
            nonnative_extra_noise: 1.0,
        };
        GenConfig {
            d,
            t: 4,
            n_seen: 3,
            samples_per_domain: 2000,
            seed: 1,
            domains: vec![domain(0.0, 2), domain(0.5, 3), domain(1.0, 4)],
            unseen: domain(0.75, 5),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::validation(format!("d must be >= 2, got {}", self.d)));
        }
        if self.t < 2 {
            return Err(Error::validation(format!("t must be >= 2, got {}", self.t)));
        }
        if self.n_seen < 2 {
            return Err(Error::validation(format!(
                "n_seen must be >= 2, got {}",
                self.n_seen
            )));
        }
        if self.samples_per_domain < 10 {
            return Err(Error::validation(format!(
                "samples_per_domain must be >= 10, got {}",
                self.samples_per_domain
            )));
        }
        if self.domains.len() != self.n_seen {
            return Err(Error::validation(format!(
                "domains has {} entries, expected n_seen = {}",
                self.domains.len(),
                self.n_seen
            )));
        }
        for (j, dom) in self.domains.iter().enumerate() {
            dom.validate(&format!("domains[{j}]"), self.d)?;
        }
        self.unseen.validate("unseen", self.d)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GenConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let theta = 2.0 * std::f64::consts::PI * class as f64 / self.t as f64;
        let mut mu = vec![0.0; self.d];
        mu[0] = CLASS_RADIUS * theta.cos();
        mu[1] = CLASS_RADIUS * theta.sin();
        mu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
    pub native: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let ds = Dataset { records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let dim = first.x.len();
        for (i, r) in self.records.iter().enumerate() {
            check_record(r, dim).map_err(|msg| Error::validation(format!("record {i}: {msg}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    /// `max(domain label) + 1`.
    pub fn n_domains(&self) -> usize {
        self.records.iter().map(|r| r.d + 1).max().unwrap_or(0)
    }

    pub fn n_task_classes(&self) -> usize {
        self.records.iter().map(|r| r.y + 1).max().unwrap_or(0)
    }

    pub fn features(&self) -> Tensor {
        self.features_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn features_of(&self, idx: &[usize]) -> Tensor {
        let data = idx
            .iter()
            .flat_map(|&i| self.records[i].x.iter().copied())
            .collect();
        Tensor::matrix(idx.len(), self.dim(), data).expect("records share one dimension")
    }

    pub fn task_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.y).collect()
    }

    pub fn domain_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.d).collect()
    }

    pub fn has_soft_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.soft.is_some())
    }

    /// Soft domain labels as an `[m × N]` matrix, if every record carries one.
    pub fn soft_labels(&self) -> Option<Tensor> {
        if !self.has_soft_labels() {
            return None;
        }
        let rows: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| r.soft.clone().unwrap())
            .collect();
        Tensor::from_rows(&rows).ok()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&Record) -> bool) -> Dataset {
        Dataset {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn check_record(r: &Record, dim: usize) -> std::result::Result<(), String> {
    if r.x.len() != dim {
        return Err(format!("feature length {} differs from {dim}", r.x.len()));
    }
    if r.x.is_empty() {
        return Err("empty feature vector".into());
    }
    if r.x.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature".into());
    }
    if let Some(soft) = &r.soft {
        let t = Tensor::matrix(1, soft.len().max(1), soft.clone()).map_err(|e| e.to_string())?;
        validate_prob_rows(&t, "soft").map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Train split, seen-domain test split, unseen-domain test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test_seen: Dataset,
    pub test_unseen: Dataset,
}

pub fn generate(config: &GenConfig) -> Result<Splits> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let means: Vec<Vec<f64>> = (0..config.t).map(|c| config.class_mean(c)).collect();
    let n_train = (config.samples_per_domain as f64 * TRAIN_FRACTION).round() as usize;

    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    for (j, dom) in config.domains.iter().enumerate() {
        let records = sample_domain(config, dom, j, &means, &mut rng);
        let (tr, te) = records.split_at(n_train);
        train.extend_from_slice(tr);
        test_seen.extend_from_slice(te);
    }
    let test_unseen = sample_domain(config, &config.unseen, config.n_seen, &means, &mut rng);
    Ok(Splits {
        train: Dataset { records: train },
        test_seen: Dataset { records: test_seen },
        test_unseen: Dataset {
            records: test_unseen,
        },
    })
}

fn sample_domain(
    config: &GenConfig,
    dom: &DomainSpec,
    domain_id: usize,
    means: &[Vec<f64>],
    rng: &mut seed::Rng,
) -> Vec<Record> {
    let noise = Normal::new(0.0, dom.noise_scale).expect("validated noise scale");
    let extra = Normal::new(0.0, dom.nonnative_extra_noise).expect("validated noise scale");
    let (sin, cos) = dom.rotation_angle.sin_cos();
    (0..config.samples_per_domain)
        .map(|_| {
            let y = rng.random_range(0..config.t);
            let native = rng.random::<f64>() >= dom.nonnative_fraction;
            let mut v: Vec<f64> = means[y].iter().map(|m| m + noise.sample(rng)).collect();
            if !native {
                v.iter_mut().for_each(|e| *e += extra.sample(rng));
            }
            let (a, b) = (v[0], v[1]);
            v[0] = cos * a - sin * b;
            v[1] = sin * a + cos * b;
            for (e, o) in v.iter_mut().zip(&dom.offset) {
                *e += o;
            }
            Record {
                x: v,
                y,
                d: domain_id,
                native,
                soft: None,
            }
        })
        .collect()
}

/// Deterministic shuffled index order, used for probe and batch splits.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    idx
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &dataset.records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Strict JSON-lines reader: every line must be one record, and the file must hold at least one.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "blank line".into(),
            });
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let d = *dim.get_or_insert(r.x.len());
        check_record(&r, d).map_err(|msg| Error::Parse { line: line_no, msg })?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "dataset file contains no records".into(),
        });
    }
    Ok(Dataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            samples_per_domain: 50,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_validates() {
        GenConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fraction_with_field_name() {
        let mut cfg = small();
        cfg.domains[1].nonnative_fraction = 1.5;
        let msg = generate(&cfg).unwrap_err().to_string();
        assert!(msg.contains("domains[1].nonnative_fraction"), "{msg}");
        let mut cfg = small();
        cfg.n_seen = 1;
        cfg.domains.truncate(1);
        assert!(generate(&cfg).is_err());
        let mut cfg = small();
        cfg.samples_per_domain = 9;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn split_sizes_and_labels() {
        let s = generate(&small()).unwrap();
        assert_eq!(s.train.len(), 3 * 40);
        assert_eq!(s.test_seen.len(), 3 * 10);
        assert_eq!(s.test_unseen.len(), 50);
        assert!(s.train.records.iter().all(|r| r.d < 3 && r.y < 4));
        assert!(s.test_unseen.records.iter().all(|r| r.d == 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn identity_domains_share_class_means() {
        let mut cfg = GenConfig {
            samples_per_domain: 4000,
            n_seen: 2,
            ..GenConfig::default()
        };
        cfg.domains.truncate(2);
        for d in &mut cfg.domains {
            d.rotation_angle = 0.0;
            d.offset = vec![0.0; cfg.d];
        }
        let s = generate(&cfg).unwrap();
        for class in 0..cfg.t {
            let mean = |dom: usize| {
                let rows: Vec<&Record> = s
                    .train
                    .records
                    .iter()
                    .filter(|r| r.d == dom && r.y == class)
                    .collect();
                let mut m = vec![0.0; cfg.d];
                for r in &rows {
                    m.iter_mut()
                        .zip(&r.x)
                        .for_each(|(a, b)| *a += b / rows.len() as f64);
                }
                m
            };
            let (m0, m1) = (mean(0), mean(1));
            let expect = cfg.class_mean(class);
            for k in 0..cfg.d {
                assert!((m0[k] - m1[k]).abs() < 0.25, "class {class} coord {k}");
                assert!((m0[k] - expect[k]).abs() < 0.25);
            }
        }
    }
}
