//! A small trainable conditional flow fitted with the flow-matching objective.
//!
//! The model is a tanh MLP mapping `[z, t, e(c)]` to a velocity, where `e(c)`
//! is a learned embedding row: row 0 is the null condition, row `k + 1` is
//! label `k`. `Condition::Embedding` bypasses the table and feeds the vector
//! directly. Training draws `Z_0` from a labelled Gaussian mixture and `Z_1`
//! from a standard normal, regresses onto `Z_1 - Z_0` at `Z_t = t Z_1 +
//! (1 - t) Z_0` and drops the label to null with a fixed probability so the
//! null row learns the unconditional field.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::state::{Condition, LatentState, Layout};

/// One mixture component of the data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub label: u32,
    pub mean: Vec<f64>,
    /// Row-major D×D covariance; must be symmetric positive definite.
    pub covariance: Vec<f64>,
}

/// Declarative data distribution: a labelled Gaussian mixture with equal
/// weights, paired with standard normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub components: Vec<MixtureComponent>,
    /// Size of the fixed training pool of data points.
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    /// Number of held-out (data, noise, time) triples.
    #[serde(default = "default_heldout_samples")]
    pub heldout_samples: usize,
}

fn default_train_samples() -> usize {
    4096
}
fn default_heldout_samples() -> usize {
    1024
}

impl DatasetSpec {
    /// Isotropic mixture with the given means and standard deviation.
    pub fn isotropic(means: &[Vec<f64>], std: f64) -> Self {
        let components = means
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let d = m.len();
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    cov[i * d + i] = std * std;
                }
                MixtureComponent {
                    label: k as u32,
                    mean: m.clone(),
                    covariance: cov,
                }
            })
            .collect();
        Self {
            components,
            train_samples: default_train_samples(),
            heldout_samples: default_heldout_samples(),
        }
    }

    /// Two components sharing an offset along the first axis and differing
    /// along the second.
    pub fn two_mixture() -> Self {
        Self::isotropic(&[vec![2.5, -1.0], vec![2.5, 1.0]], 0.4)
    }

    /// Three components on a circle of radius 1.2 around `(2.5, 0)`.
    pub fn three_mixture() -> Self {
        let means: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let th = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                vec![2.5 + 1.2 * th.cos(), 1.2 * th.sin()]
            })
            .collect();
        Self::isotropic(&means, 0.4)
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn n_labels(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn mean_of(&self, label: u32) -> Option<&[f64]> {
        self.components
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.mean.as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.components.is_empty() || d == 0 {
            return Err(Error::InvalidConfig(
                "dataset needs at least one component".into(),
            ));
        }
        for c in &self.components {
            if c.mean.len() != d || c.covariance.len() != d * d {
                return Err(Error::InvalidConfig(format!(
                    "component {} has inconsistent dimensions",
                    c.label
                )));
            }
            cholesky(&c.covariance, d)?;
        }
        if self.train_samples == 0 || self.heldout_samples == 0 {
            return Err(Error::InvalidConfig(
                "sample counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lower-triangular factor of a small SPD matrix.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::InvalidConfig(
                        "covariance is not positive definite".into(),
                    ));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// A labelled data point.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: u32,
    pub point: Vec<f64>,
}

/// Draw `n` points from the mixture (components chosen uniformly).
pub fn sample_mixture(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let d = spec.dim();
    let factors: Vec<Vec<f64>> = spec
        .components
        .iter()
        .map(|c| cholesky(&c.covariance, d))
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|_| {
            let k = rng.random_range(0..spec.components.len());
            let comp = &spec.components[k];
            let eps = gaussian(rng, d);
            let point = (0..d)
                .map(|i| {
                    comp.mean[i] + (0..=i).map(|j| factors[k][i * d + j] * eps[j]).sum::<f64>()
                })
                .collect();
            Sample {
                label: comp.label,
                point,
            }
        })
        .collect())
}

/// One regression item of the flow-matching objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmItem {
    pub z0: LatentState,
    pub z1: LatentState,
    pub t: f64,
    pub condition: Condition,
}

impl CfmItem {
    pub fn interpolant(&self) -> LatentState {
        self.z1.scale(self.t).add(&self.z0.scale(1.0 - self.t))
    }

    pub fn target(&self) -> LatentState {
        self.z1.sub(&self.z0)
    }
}

fn check_batch(batch: &[CfmItem]) -> Result<Layout> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let layout = first.z0.layout();
    for (k, item) in batch.iter().enumerate() {
        if item.z0.layout() != layout || item.z1.layout() != layout {
            return Err(Error::LayoutMismatch(format!(
                "batch item {k} has a different layout"
            )));
        }
        if !(0.0..=1.0).contains(&item.t) {
            return Err(Error::InvalidConfig(format!(
                "batch item {k} has t = {} outside [0, 1]",
                item.t
            )));
        }
    }
    Ok(layout)
}

/// Mean of `|v(Z_t, t, c) - (Z_1 - Z_0)|^2` over the batch.
pub fn cfm_loss(field: &dyn VelocityField, batch: &[CfmItem]) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for item in batch {
        let v = field.eval(&item.interpolant(), item.t, &item.condition)?;
        let r = v.sub(&item.target());
        total += r.values().iter().map(|x| x * x).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of replacing a label with the null condition.
    pub cond_dropout: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            learning_rate: 0.02,
            seed: 0,
            cond_dropout: 0.15,
            hidden: vec![64, 64],
            embed_dim: 4,
        }
    }
}

/// MLP velocity model with a condition embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmModel {
    dim: usize,
    embed_dim: usize,
    hidden: Vec<usize>,
    n_labels: usize,
    /// Embedding table `(n_labels + 1) × embed_dim`, then per layer the
    /// row-major weight matrix `out × in` followed by the bias.
    params: Vec<f64>,
    config: TrainConfig,
}

struct Activations {
    /// Input followed by each hidden layer's post-activation output.
    layers: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl CfmModel {
    /// Randomly initialised model; deterministic in `config.seed`.
    pub fn init(dim: usize, n_labels: usize, config: &TrainConfig) -> Result<Self> {
        if dim == 0 || config.embed_dim == 0 || config.hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        let mut model = Self {
            dim,
            embed_dim: config.embed_dim,
            hidden: config.hidden.clone(),
            n_labels,
            params: Vec::new(),
            config: config.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = gaussian(&mut rng, (n_labels + 1) * config.embed_dim);
        for (fan_in, fan_out) in model.layer_shapes() {
            let scale = (1.0 / fan_in as f64).sqrt();
            params.extend(
                gaussian(&mut rng, fan_in * fan_out)
                    .into_iter()
                    .map(|w| w * scale),
            );
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        model.params = params;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn input_dim(&self) -> usize {
        self.dim + 1 + self.embed_dim
    }

    /// `(fan_in, fan_out)` of each dense layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn embedding_len(&self) -> usize {
        (self.n_labels + 1) * self.embed_dim
    }

    fn embedding_row<'a>(&self, c: &'a Condition) -> Result<EmbedSource<'a>> {
        let row = match c {
            Condition::Null => 0,
            Condition::Label(k) if (*k as usize) < self.n_labels => *k as usize + 1,
            Condition::Label(k) => {
                return Err(Error::InvalidConfig(format!(
                    "label {k} outside the model's {} labels",
                    self.n_labels
                )))
            }
            Condition::Embedding(e) => {
                if e.len() != self.embed_dim {
                    return Err(Error::LayoutMismatch(format!(
                        "embedding has {} values, model expects {}",
                        e.len(),
                        self.embed_dim
                    )));
                }
                return Ok(EmbedSource::Direct(e));
            }
        };
        Ok(EmbedSource::Row(row))
    }

    fn forward(&self, z: &[f64], t: f64, emb: &EmbedSource<'_>) -> Activations {
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(z);
        x.push(t);
        match emb {
            EmbedSource::Row(r) => {
                x.extend_from_slice(&self.params[r * self.embed_dim..(r + 1) * self.embed_dim])
            }
            EmbedSource::Direct(e) => x.extend_from_slice(e),
        }
        let shapes = self.layer_shapes();
        let last = shapes.len() - 1;
        let mut offset = self.embedding_len();
        let mut layers = vec![x];
        let mut output = Vec::new();
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let input = layers.last().expect("input layer");
            let y: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            if l == last {
                output = y;
            } else {
                layers.push(y.into_iter().map(f64::tanh).collect());
            }
        }
        Activations { layers, output }
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    fn backward(&self, acts: &Activations, emb: &EmbedSource<'_>, d_out: &[f64], grad: &mut [f64]) {
        let shapes = self.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = self.embedding_len();
        for &(fan_in, fan_out) in &shapes {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        let mut delta = d_out.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let input = &acts.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, x) in g_row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                for (di, wv) in d_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *di += d * wv;
                }
            }
            if l > 0 {
                // input of layer l is tanh output of layer l-1
                for (di, a) in d_in.iter_mut().zip(input) {
                    *di *= 1.0 - a * a;
                }
            } else if let EmbedSource::Row(r) = emb {
                let start = self.dim + 1;
                for (j, di) in d_in[start..].iter().enumerate() {
                    grad[r * self.embed_dim + j] += di;
                }
            }
            delta = d_in;
        }
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[CfmItem]) -> Result<(f64, Vec<f64>)> {
        check_batch(batch)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for item in batch {
            self.check_state(&item.z0)?;
            let emb = self.embedding_row(&item.condition)?;
            let zt = item.interpolant();
            let acts = self.forward(zt.values(), item.t, &emb);
            let target = item.target();
            let resid: Vec<f64> = acts
                .output
                .iter()
                .zip(target.values())
                .map(|(y, tg)| y - tg)
                .collect();
            total += resid.iter().map(|r| r * r).sum::<f64>();
            let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
            self.backward(&acts, &emb, &d_out, &mut grad);
        }
        Ok((total * scale, grad))
    }

    fn check_state(&self, z: &LatentState) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::LayoutMismatch(format!(
                "model expects {} values, state has {}",
                self.dim,
                z.len()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let emb_len = self.embedding_len();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dim: self.dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            n_labels: self.n_labels,
            embeddings: self.params[..emb_len]
                .chunks(self.embed_dim)
                .map(<[f64]>::to_vec)
                .collect(),
            params: self.params[emb_len..].to_vec(),
            seed: self.config.seed,
            train_config: self.config.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unknown checkpoint format {:?}",
                ck.format
            )));
        }
        let mut model = Self {
            dim: ck.dim,
            embed_dim: ck.embed_dim,
            hidden: ck.hidden,
            n_labels: ck.n_labels,
            params: Vec::new(),
            config: ck.train_config,
        };
        if ck.embeddings.len() != ck.n_labels + 1
            || ck.embeddings.iter().any(|r| r.len() != ck.embed_dim)
        {
            return Err(Error::Format("embedding table has the wrong shape".into()));
        }
        let expected: usize = model.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        if ck.params.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} layer parameters, found {}",
                ck.params.len()
            )));
        }
        model.params = ck
            .embeddings
            .into_iter()
            .flatten()
            .chain(ck.params)
            .collect();
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format(
                "checkpoint contains non-finite parameters".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(ck)
    }
}

enum EmbedSource<'a> {
    Row(usize),
    Direct(&'a [f64]),
}

impl VelocityField for CfmModel {
    fn eval(&self, z: &LatentState, t: f64, c: &Condition) -> Result<LatentState> {
        self.check_state(z)?;
        let emb = self.embedding_row(c)?;
        let acts = self.forward(z.values(), t, &emb);
        Ok(LatentState::from_parts(z.layout(), acts.output))
    }

    fn descriptor(&self) -> String {
        format!(
            "trained(dim={}, hidden={:?}, labels={}, seed={})",
            self.dim, self.hidden, self.n_labels, self.config.seed
        )
    }
}

pub const CHECKPOINT_FORMAT: &str = "rfedit-cfm-v1";

/// Serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub n_labels: usize,
    /// Row 0 is the null condition.
    pub embeddings: Vec<Vec<f64>>,
    /// Dense layers in order, each weight matrix row-major then bias.
    pub params: Vec<f64>,
    pub seed: u64,
    pub train_config: TrainConfig,
}

/// Draw flow-matching items: data from `pool`, noise and times fresh.
fn draw_items(pool: &[Sample], n: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Vec<CfmItem> {
    let d = pool[0].point.len();
    (0..n)
        .map(|_| {
            let s = &pool[rng.random_range(0..pool.len())];
            let z1 = gaussian(rng, d);
            let t: f64 = rng.random();
            let drop: f64 = rng.random();
            let condition = if drop < dropout {
                Condition::Null
            } else {
                Condition::Label(s.label)
            };
            CfmItem {
                z0: LatentState::flat(s.point.clone()),
                z1: LatentState::flat(z1),
                t,
                condition,
            }
        })
        .collect()
}

/// Held-out items for a dataset; independent of the training seed stream.
pub fn heldout_batch(spec: &DatasetSpec, seed: u64) -> Result<Vec<CfmItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let pool = sample_mixture(spec, spec.heldout_samples, &mut rng)?;
    Ok(pool
        .iter()
        .map(|s| {
            let z1 = gaussian(&mut rng, s.point.len());
            let t: f64 = rng.random();
            CfmItem {
                z0: LatentState::flat(s.point.clone()),
                z1: LatentState::flat(z1),
                t,
                condition: Condition::Label(s.label),
            }
        })
        .collect())
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CfmModel,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Minibatch loss every 100 steps.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Fit a model with plain minibatch SGD. Deterministic in `config.seed`.
pub fn cfm_train(spec: &DatasetSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    spec.validate()?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "batch size and learning rate must be positive".into(),
        ));
    }
    let mut model = CfmModel::init(spec.dim(), spec.n_labels(), config)?;
    let heldout = heldout_batch(spec, config.seed)?;
    let initial_heldout_loss = cfm_loss(&model, &heldout)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let pool = sample_mixture(spec, spec.train_samples, &mut rng)?;
    let mut loss_curve = Vec::new();
    for step in 0..config.steps {
        let batch = draw_items(&pool, config.batch_size, config.cond_dropout, &mut rng);
        let (loss, grad) = model.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        if step % 100 == 0 {
            loss_curve.push((step, loss));
        }
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
    }
    let final_heldout_loss = cfm_loss(&model, &heldout)?;
    if !final_heldout_loss.is_finite() {
        return Err(Error::TrainingDiverged {
            step: config.steps,
            loss: final_heldout_loss,
        });
    }
    Ok(TrainOutcome {
        model,
        initial_heldout_loss,
        final_heldout_loss,
        loss_curve,
    })
}

/// Conditional sampling quality of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScore {
    pub samples: usize,
    /// Fraction of samples nearer their conditioning component's mean than
    /// any other component's mean.
    pub accuracy: f64,
}

/// Draw `n` samples by backward Euler from standard-normal noise under
/// guidance `w`, cycling through the labels, and score them against the
/// component means.
pub fn conditional_accuracy(
    field: &dyn VelocityField,
    spec: &DatasetSpec,
    n: usize,
    w: f64,
    n_steps: usize,
    seed: u64,
) -> Result<SamplingScore> {
    spec.validate()?;
    let labels: Vec<u32> = spec.components.iter().map(|c| c.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut hits = 0usize;
    for j in 0..n {
        let label = labels[j % labels.len()];
        let z1 = LatentState::flat(gaussian(&mut rng, spec.dim()));
        let path = crate::solvers::generate(field, &z1, &Condition::Label(label), w, n_steps)?;
        let x = path.state(0).values();
        let dist = |l: u32| -> f64 {
            let m = spec.mean_of(l).expect("label from spec");
            x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let own = dist(label);
        if labels
            .iter()
            .filter(|&&l| l != label)
            .all(|&l| own < dist(l))
        {
            hits += 1;
        }
    }
    Ok(SamplingScore {
        samples: n,
        accuracy: hits as f64 / n.max(1) as f64,
    })
}

/// Finite-difference step for [`cfm_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare the analytic loss gradient against central differences on a random
/// subset of at least 50 parameters (all of them when fewer exist).
///
/// Relative error per entry is `|a - f| / max(|a|, |f|, 1e-8)`; returns the
/// largest one.
pub fn cfm_grad_check(
    model: &CfmModel,
    batch: &[CfmItem],
    n_params: usize,
    seed: u64,
) -> Result<f64> {
    check_batch(batch)?;
    if batch.len() > 8 {
        return Err(Error::InvalidConfig(
            "gradient check batches hold at most 8 items".into(),
        ));
    }
    let (_, grad) = model.loss_and_grad(batch)?;
    let total = model.params.len();
    let count = n_params.max(50).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, total, count).into_vec();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for k in picks {
        let orig = probe.params[k];
        probe.params[k] = orig + GRAD_CHECK_STEP;
        let up = cfm_loss(&probe, batch)?;
        probe.params[k] = orig - GRAD_CHECK_STEP;
        let down = cfm_loss(&probe, batch)?;
        probe.params[k] = orig;
        let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let denom = grad[k].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((grad[k] - fd).abs() / denom);
    }
    Ok(worst)
}
