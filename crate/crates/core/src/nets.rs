//! The three networks of the DAT architecture and their losses.
//!
//! `G` (generator) maps features to an embedding `z`, `C` (domain classifier) predicts the domain
//! of `z`, `R` (task network) predicts the task label from `z`, optionally conditioned on an
//! explicit domain feature for the accent-specific baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{validate_prob_rows, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        hidden_activation: Activation,
        output: OutputKind,
    ) -> Result<Self> {
        let spec = MlpSpec {
            layer_widths,
            hidden_activation,
            output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::validation(
                "an MLP needs at least an input and an output width",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::validation(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[1 × out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_widths.len() - 1 {
            return Err(Error::validation(format!(
                "spec has {} layers, got {}",
                spec.layer_widths.len() - 1,
                layers.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (fan_in, fan_out) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
            if layer.weight.shape() != [fan_in, fan_out] {
                return Err(Error::Dimension {
                    op: "layer weight",
                    left: vec![fan_in, fan_out],
                    right: layer.weight.shape().to_vec(),
                });
            }
            if layer.bias.shape() != [1, fan_out] {
                return Err(Error::Dimension {
                    op: "layer bias",
                    left: vec![1, fan_out],
                    right: layer.bias.shape().to_vec(),
                });
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::validation(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(ModelParams { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect();
        BoundMlp {
            layers,
            hidden: self.spec.hidden_activation,
            output: self.spec.output,
        }
    }

    /// SGD update from the gradients accumulated on the bound leaves.
    pub fn apply_grads(&mut self, g: &Graph, bound: &BoundMlp, alpha: f64) -> Result<()> {
        let grads: Vec<&Tensor> = bound
            .layers
            .iter()
            .flat_map(|&(w, b)| [g.grad(w), g.grad(b)])
            .collect();
        let mut params: Vec<&mut Tensor> = self.tensors_mut().collect();
        crate::autodiff::sgd_step(&mut params, &grads, alpha)
    }
}

/// Xavier-uniform weights in `±sqrt(6 / (in + out))`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Layer {
                weight: Tensor::matrix(fan_in, fan_out, data).unwrap(),
                bias: Tensor::zeros(&[1, fan_out]),
            }
        })
        .collect();
    ModelParams::from_layers(spec.clone(), layers)
}

/// Parameters of one MLP registered as leaves of a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub hidden: Activation,
    pub output: OutputKind,
}

impl BoundMlp {
    pub fn input_width(&self, g: &Graph) -> usize {
        g.value(self.layers[0].0).rows()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with_penultimate(g, x).map(|(_, out)| out)
    }

    /// Returns `(input to the last layer, network output)`.
    pub fn forward_with_penultimate(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let last = self.layers.len() - 1;
        let mut penultimate = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i == last {
                penultimate = h;
            }
            let pre = g.matmul(h, w)?;
            let pre = g.bias_add(pre, b)?;
            h = if i == last {
                match self.output {
                    OutputKind::Linear => pre,
                    OutputKind::Softmax => g.softmax_rows(pre)?,
                }
            } else {
                match self.hidden {
                    Activation::Tanh => g.tanh(pre),
                    Activation::Relu => g.relu(pre),
                }
            };
        }
        Ok((penultimate, h))
    }
}

fn check_width(g: &Graph, bound: &BoundMlp, x: Var, what: &'static str) -> Result<()> {
    let expected = bound.input_width(g);
    let got = g.value(x).cols();
    if expected != got {
        return Err(Error::Dimension {
            op: what,
            left: vec![expected],
            right: g.value(x).shape().to_vec(),
        });
    }
    Ok(())
}

pub fn forward_generator(g: &mut Graph, gen: &BoundMlp, x: Var) -> Result<Var> {
    check_width(g, gen, x, "generator input")?;
    gen.forward(g, x)
}

/// Domain probabilities for `z`. With `reverse`, `z` first passes through a gradient-reversal
/// node scaled by `lambda`.
pub fn forward_classifier(
    g: &mut Graph,
    cls: &BoundMlp,
    z: Var,
    reverse: bool,
    lambda: f64,
) -> Result<Var> {
    check_width(g, cls, z, "classifier input")?;
    let input = if reverse {
        g.grad_reverse(z, lambda)?
    } else {
        z
    };
    cls.forward(g, input)
}

pub fn forward_task(
    g: &mut Graph,
    task: &BoundMlp,
    z: Var,
    domain_feature: Option<Var>,
) -> Result<Var> {
    let input = match domain_feature {
        Some(f) => g.concat_cols(z, f)?,
        None => z,
    };
    check_width(g, task, input, "task input")?;
    task.forward(g, input)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainTargets {
    Hard(Vec<usize>),
    /// One probability row per record.
    Soft(Tensor),
}

impl DomainTargets {
    pub fn len(&self) -> usize {
        match self {
            DomainTargets::Hard(l) => l.len(),
            DomainTargets::Soft(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> DomainTargets {
        match self {
            DomainTargets::Hard(l) => DomainTargets::Hard(idx.iter().map(|&i| l[i]).collect()),
            DomainTargets::Soft(t) => {
                let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
                DomainTargets::Soft(Tensor::matrix(idx.len(), t.cols(), data).unwrap())
            }
        }
    }
}

/// `L_C`: mean cross-entropy of the domain classifier against hard or soft labels.
pub fn domain_loss(g: &mut Graph, probs: Var, labels: &DomainTargets) -> Result<Var> {
    match labels {
        DomainTargets::Hard(l) => g.cross_entropy_hard(probs, l),
        DomainTargets::Soft(t) => {
            validate_prob_rows(t, "soft domain label")?;
            g.cross_entropy_soft(probs, t)
        }
    }
}

/// `L_R`: mean cross-entropy of the task network.
pub fn task_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy_hard(probs, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub task_hidden: Vec<usize>,
    pub activation: Activation,
    /// Width `q` of the learned domain embedding used by the linear-embedding baseline.
    pub linear_embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 16,
            generator_hidden: vec![32],
            classifier_hidden: vec![32],
            task_hidden: vec![32],
            activation: Activation::Tanh,
            linear_embed_dim: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    None,
    OneHot,
    Linear,
}

/// How the task network sees domain identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Conditioning {
    None,
    OneHot {
        n_domains: usize,
    },
    /// Learned `[n_domains × q]` map from one-hot ids to embeddings.
    Linear {
        embedding: Tensor,
    },
}

impl Conditioning {
    pub fn width(&self) -> usize {
        match self {
            Conditioning::None => 0,
            Conditioning::OneHot { n_domains } => *n_domains,
            Conditioning::Linear { embedding } => embedding.cols(),
        }
    }

    pub fn n_domains(&self) -> Option<usize> {
        match self {
            Conditioning::None => None,
            Conditioning::OneHot { n_domains } => Some(*n_domains),
            Conditioning::Linear { embedding } => Some(embedding.rows()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatModel {
    pub generator: ModelParams,
    pub classifier: ModelParams,
    pub task: ModelParams,
    pub conditioning: Conditioning,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct BoundDat {
    pub generator: BoundMlp,
    pub classifier: BoundMlp,
    pub task: BoundMlp,
    pub embedding: Option<Var>,
}

impl DatModel {
    pub fn new(
        generator: ModelParams,
        classifier: ModelParams,
        task: ModelParams,
        conditioning: Conditioning,
        lambda: f64,
    ) -> Result<Self> {
        let embed = generator.spec().output_width();
        if classifier.spec().input_width() != embed {
            return Err(Error::Dimension {
                op: "classifier input vs embedding",
                left: vec![classifier.spec().input_width()],
                right: vec![embed],
            });
        }
        if task.spec().input_width() != embed + conditioning.width() {
            return Err(Error::Dimension {
                op: "task input vs embedding + domain feature",
                left: vec![task.spec().input_width()],
                right: vec![embed, conditioning.width()],
            });
        }
        if classifier.spec().output_width() < 2 {
            return Err(Error::validation(
                "domain classifier needs at least 2 classes",
            ));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::validation(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(DatModel {
            generator,
            classifier,
            task,
            conditioning,
            lambda,
        })
    }

    /// Fresh model with Xavier-initialized networks. Each network draws from its own seed stream.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        arch: &ArchConfig,
        input_dim: usize,
        n_domain_classes: usize,
        n_task_classes: usize,
        conditioning: ConditioningKind,
        n_cond_domains: usize,
        lambda: f64,
        seed: u64,
    ) -> Result<Self> {
        let act = arch.activation;
        let widths = |input: usize, hidden: &[usize], out: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(out);
            w
        };
        let gen_spec = MlpSpec::new(
            widths(input_dim, &arch.generator_hidden, arch.embed_dim),
            act,
            OutputKind::Linear,
        )?;
        let cls_spec = MlpSpec::new(
            widths(arch.embed_dim, &arch.classifier_hidden, n_domain_classes),
            act,
            OutputKind::Softmax,
        )?;
        let cond = match conditioning {
            ConditioningKind::None => Conditioning::None,
            ConditioningKind::OneHot => Conditioning::OneHot {
                n_domains: n_cond_domains,
            },
            ConditioningKind::Linear => {
                let q = arch.linear_embed_dim;
                let spec = MlpSpec::new(vec![n_cond_domains, q], act, OutputKind::Linear)?;
                let p = init_params(&spec, seed::sub_seed(seed, 4))?;
                Conditioning::Linear {
                    embedding: p.layers[0].weight.clone(),
                }
            }
        };
        let task_spec = MlpSpec::new(
            widths(
                arch.embed_dim + cond.width(),
                &arch.task_hidden,
                n_task_classes,
            ),
            act,
            OutputKind::Softmax,
        )?;
        DatModel::new(
            init_params(&gen_spec, seed::sub_seed(seed, 1))?,
            init_params(&cls_spec, seed::sub_seed(seed, 2))?,
            init_params(&task_spec, seed::sub_seed(seed, 3))?,
            cond,
            lambda,
        )
    }

    pub fn n_domain_classes(&self) -> usize {
        self.classifier.spec().output_width()
    }

    pub fn n_task_classes(&self) -> usize {
        self.task.spec().output_width()
    }

    pub fn input_dim(&self) -> usize {
        self.generator.spec().input_width()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundDat {
        BoundDat {
            generator: self.generator.bind(g),
            classifier: self.classifier.bind(g),
            task: self.task.bind(g),
            embedding: match &self.conditioning {
                Conditioning::Linear { embedding } => Some(g.leaf(embedding.clone())),
                _ => None,
            },
        }
    }

    /// Domain feature node for a batch, or `None` for unconditioned models.
    pub fn domain_feature(
        &self,
        g: &mut Graph,
        bound: &BoundDat,
        domains: &[usize],
    ) -> Result<Option<Var>> {
        let Some(n) = self.conditioning.n_domains() else {
            return Ok(None);
        };
        if let Some(&bad) = domains.iter().find(|&&d| d >= n) {
            return Err(Error::validation(format!(
                "domain id {bad} out of range for a model conditioned on {n} domains"
            )));
        }
        let one_hot = g.leaf(one_hot(domains, n));
        match bound.embedding {
            Some(e) => Ok(Some(g.matmul(one_hot, e)?)),
            None => Ok(Some(one_hot)),
        }
    }

    pub fn apply_grads(
        &mut self,
        g: &Graph,
        bound: &BoundDat,
        alpha: f64,
        update_classifier: bool,
    ) -> Result<()> {
        self.generator.apply_grads(g, &bound.generator, alpha)?;
        if update_classifier {
            self.classifier.apply_grads(g, &bound.classifier, alpha)?;
        }
        self.task.apply_grads(g, &bound.task, alpha)?;
        if let (Conditioning::Linear { embedding }, Some(e)) =
            (&mut self.conditioning, bound.embedding)
        {
            crate::autodiff::sgd_step(&mut [embedding], &[g.grad(e)], alpha)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let emb_ok = match &self.conditioning {
            Conditioning::Linear { embedding } => embedding.is_finite(),
            _ => true,
        };
        emb_ok && self.generator.is_finite() && self.classifier.is_finite() && self.task.is_finite()
    }

    /// Embeddings `z = G(x)` for a feature matrix, no gradients kept.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.generator.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = forward_generator(&mut g, &bound, xv)?;
        Ok(g.value(z).clone())
    }

    /// Task-class probabilities; `domains` is required for conditioned models.
    pub fn predict_task(&self, x: &Tensor, domains: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = forward_generator(&mut g, &bound.generator, xv)?;
        let feat = match (&self.conditioning, domains) {
            (Conditioning::None, _) => None,
            (_, Some(d)) => self.domain_feature(&mut g, &bound, d)?,
            (_, None) => {
                return Err(Error::validation(
                    "domain-conditioned model needs domain ids at prediction time",
                ))
            }
        };
        let p = forward_task(&mut g, &bound.task, z, feat)?;
        Ok(g.value(p).clone())
    }

    pub fn predict_domain(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = forward_generator(&mut g, &bound.generator, xv)?;
        let p = forward_classifier(&mut g, &bound.classifier, z, false, 0.0)?;
        Ok(g.value(p).clone())
    }
}

pub fn one_hot(labels: &[usize], n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), n]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * n + l] = 1.0;
    }
    t
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
