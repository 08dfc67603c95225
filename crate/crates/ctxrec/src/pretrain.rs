//! The three generative models that learn implicit-context representations:
//! a multi-head denoising autoencoder, a multi-head variational autoencoder,
//! and the attention-constrained denoising autoencoder (`Macdae`).
//!
//! All three encode an input vector into K head segments of width
//! `hidden_dim / K` and decode back through a shared sigmoid decoder. They
//! differ in how heads are formed and combined:
//!
//! - **DAE**: heads from the masked input, plain concatenation, squared
//!   reconstruction loss.
//! - **VAE**: per-head Gaussian posteriors with reparameterized samples,
//!   reconstruction plus closed-form KL against a standard normal prior.
//! - **MACDAE**: DAE heads reweighted by dot-product attention whose query
//!   comes from the *unmasked* input, plus a pairwise-cosine penalty pushing
//!   heads apart.
//!
//! Training ([`fit`]) is plain mini-batch Adam with manually derived
//! gradients; every analytic gradient is checked against
//! [`crate::numerics::finite_diff_grad`] in the tests.

use crate::error::{Error, Result};
use crate::numerics::{softmax, AdamState, Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Independent deterministic stream derived from one seed. Initialization,
/// shuffling, and noise each get their own stream so adding draws to one (a
/// model variant with extra parameters, say) never shifts the others.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Which generative model to pre-train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dae,
    Vae,
    Macdae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dae => "dae",
            ModelKind::Vae => "vae",
            ModelKind::Macdae => "macdae",
        })
    }
}

/// How the pairwise-cosine constraint is applied.
///
/// `Raw` charges `lambda * (cos - epsilon)` per head pair, which goes
/// negative below the threshold and so actively rewards decorrelated heads.
/// `Hinge` clips at zero: pairs already below the threshold are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Raw,
    Hinge,
}

/// Pre-training hyperparameters. `hidden_dim` must divide evenly into
/// `heads` segments; `keep_probability` is the chance a coordinate survives
/// masking (0.95 keeps 95% of the input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: ModelKind,
    pub heads: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub keep_probability: f64,
    pub penalty_cost: f64,
    pub similarity_threshold: f64,
    pub penalty_mode: PenaltyMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl PretrainConfig {
    /// Baseline configuration: 4 heads of width 16, keep probability 0.95,
    /// penalty cost 0.05 against threshold 0.75, 5 epochs of Adam at 0.001.
    pub fn default_for(kind: ModelKind, input_dim: usize) -> Self {
        PretrainConfig {
            kind,
            heads: 4,
            hidden_dim: 64,
            input_dim,
            keep_probability: 0.95,
            penalty_cost: 0.05,
            similarity_threshold: 0.75,
            penalty_mode: PenaltyMode::Raw,
            epochs: 5,
            batch_size: 64,
            learning_rate: 0.001,
            seed: 42,
        }
    }

    /// Per-head width `hidden_dim / heads`.
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.keep_probability) {
            return Err(Error::Config(format!(
                "keep_probability {} outside [0, 1]",
                self.keep_probability
            )));
        }
        if !self.penalty_cost.is_finite() || self.penalty_cost < 0.0 {
            return Err(Error::Config(format!(
                "penalty_cost {} must be finite and >= 0",
                self.penalty_cost
            )));
        }
        if !self.similarity_threshold.is_finite() || self.similarity_threshold >= 1.0 {
            return Err(Error::Config(format!(
                "similarity_threshold {} must be < 1",
                self.similarity_threshold
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub(crate) fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Affine {
            weight: Matrix::uniform(out_dim, in_dim, 0.05, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub(crate) fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(x)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.len()
    }

    fn push_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.values());
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        let w = self.weight.values_mut();
        w.copy_from_slice(&src[*pos..*pos + w.len()]);
        *pos += self.weight.values().len();
        let n = self.bias.len();
        self.bias.copy_from_slice(&src[*pos..*pos + n]);
        *pos += n;
    }
}

fn sigmoid_vec(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&t| crate::numerics::sigmoid(t)).collect()
}

/// Parameters of one pre-training model; the variant matches
/// [`PretrainConfig::kind`].
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Dae {
        heads: Vec<Affine>,
        decoder: Affine,
    },
    Vae {
        mean_heads: Vec<Affine>,
        logvar_heads: Vec<Affine>,
        decoder: Affine,
    },
    Macdae {
        heads: Vec<Affine>,
        decoder: Affine,
        attention: Matrix,
    },
}

impl ModelParams {
    /// A same-shaped parameter set of all zeros, used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        fn z(a: &Affine) -> Affine {
            Affine::zeros(a.weight.rows(), a.weight.cols())
        }
        match self {
            ModelParams::Dae { heads, decoder } => ModelParams::Dae {
                heads: heads.iter().map(z).collect(),
                decoder: z(decoder),
            },
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            } => ModelParams::Vae {
                mean_heads: mean_heads.iter().map(z).collect(),
                logvar_heads: logvar_heads.iter().map(z).collect(),
                decoder: z(decoder),
            },
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            } => ModelParams::Macdae {
                heads: heads.iter().map(z).collect(),
                decoder: z(decoder),
                attention: Matrix::zeros(attention.rows(), attention.cols()),
            },
        }
    }
}

/// A pre-training model: its config plus parameters.
///
/// Parameter flattening order (used by the optimizer, checkpoints, and the
/// gradient checks) is: per-head encoder weights and biases in head order,
/// then decoder weight and bias, then the attention matrix if present. The
/// VAE interleaves each head's mean and log-variance nets.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainModel {
    pub config: PretrainConfig,
    pub params: ModelParams,
}

impl PretrainModel {
    /// Seeded parameter initialization: weights uniform in `[-0.05, 0.05]`,
    /// biases zero. Drawing order follows the flattening order, so two model
    /// kinds sharing a parameter prefix (DAE and MACDAE) initialize that
    /// prefix identically from the same seed.
    pub fn init(config: &PretrainConfig) -> Result<PretrainModel> {
        config.validate()?;
        let mut rng = rng_stream(config.seed, STREAM_INIT);
        let d_k = config.head_dim();
        let d_m = config.input_dim;
        let d_h = config.hidden_dim;
        let params = match config.kind {
            ModelKind::Dae => ModelParams::Dae {
                heads: (0..config.heads)
                    .map(|_| Affine::init(d_k, d_m, &mut rng))
                    .collect(),
                decoder: Affine::init(d_m, d_h, &mut rng),
            },
            ModelKind::Vae => {
                let mut mean_heads = Vec::with_capacity(config.heads);
                let mut logvar_heads = Vec::with_capacity(config.heads);
                for _ in 0..config.heads {
                    mean_heads.push(Affine::init(d_k, d_m, &mut rng));
                    logvar_heads.push(Affine::init(d_k, d_m, &mut rng));
                }
                ModelParams::Vae {
                    mean_heads,
                    logvar_heads,
                    decoder: Affine::init(d_m, d_h, &mut rng),
                }
            }
            ModelKind::Macdae => ModelParams::Macdae {
                heads: (0..config.heads)
                    .map(|_| Affine::init(d_k, d_m, &mut rng))
                    .collect(),
                decoder: Affine::init(d_m, d_h, &mut rng),
                attention: Matrix::uniform(d_k, d_m, 0.05, &mut rng),
            },
        };
        Ok(PretrainModel {
            config: config.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            ModelParams::Dae { heads, decoder } => {
                heads.iter().map(Affine::param_count).sum::<usize>() + decoder.param_count()
            }
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            } => {
                mean_heads.iter().map(Affine::param_count).sum::<usize>()
                    + logvar_heads.iter().map(Affine::param_count).sum::<usize>()
                    + decoder.param_count()
            }
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            } => {
                heads.iter().map(Affine::param_count).sum::<usize>()
                    + decoder.param_count()
                    + attention.values().len()
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.params {
            ModelParams::Dae { heads, decoder } => {
                for h in heads {
                    h.push_flat(&mut out);
                }
                decoder.push_flat(&mut out);
            }
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            } => {
                for (m, l) in mean_heads.iter().zip(logvar_heads) {
                    m.push_flat(&mut out);
                    l.push_flat(&mut out);
                }
                decoder.push_flat(&mut out);
            }
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            } => {
                for h in heads {
                    h.push_flat(&mut out);
                }
                decoder.push_flat(&mut out);
                out.extend_from_slice(attention.values());
            }
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, model has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        match &mut self.params {
            ModelParams::Dae { heads, decoder } => {
                for h in heads.iter_mut() {
                    h.read_flat(flat, &mut pos);
                }
                decoder.read_flat(flat, &mut pos);
            }
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            } => {
                for (m, l) in mean_heads.iter_mut().zip(logvar_heads.iter_mut()) {
                    m.read_flat(flat, &mut pos);
                    l.read_flat(flat, &mut pos);
                }
                decoder.read_flat(flat, &mut pos);
            }
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            } => {
                for h in heads.iter_mut() {
                    h.read_flat(flat, &mut pos);
                }
                decoder.read_flat(flat, &mut pos);
                let w = attention.values_mut();
                w.copy_from_slice(&flat[pos..pos + w.len()]);
            }
        }
        Ok(())
    }

    /// Named tensors in flattening order, for checkpoint serialization.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let push_affine = |out: &mut Vec<(String, Vec<usize>, Vec<f64>)>, name: &str, a: &Affine| {
            out.push((
                format!("{name}.weight"),
                vec![a.weight.rows(), a.weight.cols()],
                a.weight.values().to_vec(),
            ));
            out.push((format!("{name}.bias"), vec![a.bias.len()], a.bias.clone()));
        };
        match &self.params {
            ModelParams::Dae { heads, decoder } => {
                for (k, h) in heads.iter().enumerate() {
                    push_affine(&mut out, &format!("head.{k}"), h);
                }
                push_affine(&mut out, "decoder", decoder);
            }
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            } => {
                for (k, (m, l)) in mean_heads.iter().zip(logvar_heads).enumerate() {
                    push_affine(&mut out, &format!("head.{k}.mean"), m);
                    push_affine(&mut out, &format!("head.{k}.logvar"), l);
                }
                push_affine(&mut out, "decoder", decoder);
            }
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            } => {
                for (k, h) in heads.iter().enumerate() {
                    push_affine(&mut out, &format!("head.{k}"), h);
                }
                push_affine(&mut out, "decoder", decoder);
                out.push((
                    "attention.weight".into(),
                    vec![attention.rows(), attention.cols()],
                    attention.values().to_vec(),
                ));
            }
        }
        out
    }

    /// Rebuild a model from named tensors (checkpoint load). Every tensor the
    /// config implies must be present with the right shape.
    pub fn from_tensors(
        config: PretrainConfig,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<PretrainModel> {
        config.validate()?;
        let mut model = PretrainModel::init(&config)?;
        let expected = model.tensors();
        let mut flat = Vec::with_capacity(model.param_count());
        for (name, dims, _) in &expected {
            let (got_dims, values) = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
            if got_dims != dims {
                return Err(Error::Dimension(format!(
                    "tensor {name}: expected shape {dims:?}, found {got_dims:?}"
                )));
            }
            flat.extend_from_slice(values);
        }
        model.unflatten(&flat)?;
        Ok(model)
    }

    /// The trained representation for a clean input; see
    /// [`extract_representation`].
    pub fn extract(&self, x: &[f64]) -> Result<Representation> {
        extract_representation(self, x)
    }

    /// The K per-head vectors for a clean input, before any mixing:
    /// sigmoid head activations for the autoencoder kinds, posterior means
    /// for the variational kind. Used by head-similarity analysis.
    pub fn head_activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_input(self, x, "input")?;
        match &self.params {
            ModelParams::Dae { heads, .. } | ModelParams::Macdae { heads, .. } => heads
                .iter()
                .map(|h| Ok(sigmoid_vec(&h.apply(x)?)))
                .collect(),
            ModelParams::Vae { mean_heads, .. } => {
                mean_heads.iter().map(|h| h.apply(x)).collect()
            }
        }
    }
}

/// A learned context representation: `hidden_dim` values, plus the attention
/// weights over heads when the model is `Macdae`.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub values: Vec<f64>,
    pub head_weights: Option<Vec<f64>>,
    pub kind: ModelKind,
}

/// Loss components of one forward pass: reconstruction always, KL for the
/// VAE, penalty for MACDAE, absent terms zero. `total` is their exact sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub reconstruction: f64,
    pub kl: f64,
    pub penalty: f64,
    pub total: f64,
}

impl PretrainLossReport {
    fn new(reconstruction: f64, kl: f64, penalty: f64) -> Self {
        PretrainLossReport {
            reconstruction,
            kl,
            penalty,
            total: reconstruction + kl + penalty,
        }
    }
}

/// Mean loss components over one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Mask each coordinate to zero independently with probability
/// `1 - keep_probability`. Kept coordinates pass through unscaled.
pub fn corrupt_mask<R: Rng>(x: &[f64], keep_probability: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&keep_probability) {
        return Err(Error::Config(format!(
            "keep_probability {keep_probability} outside [0, 1]"
        )));
    }
    Ok(x.iter()
        .map(|&v| {
            if rng.gen::<f64>() < keep_probability {
                v
            } else {
                0.0
            }
        })
        .collect())
}

fn expect_kind(model: &PretrainModel, kind: ModelKind, op: &str) -> Result<()> {
    if model.config.kind != kind {
        return Err(Error::Config(format!(
            "{op} requires a {kind} model, got {}",
            model.config.kind
        )));
    }
    Ok(())
}

fn check_input(model: &PretrainModel, x: &[f64], what: &str) -> Result<()> {
    if x.len() != model.config.input_dim {
        return Err(Error::Dimension(format!(
            "{what} has {} entries, model expects {}",
            x.len(),
            model.config.input_dim
        )));
    }
    Ok(())
}

struct DaeTrace {
    head_outputs: Vec<Vec<f64>>,
    hidden: Vec<f64>,
    reconstruction: Vec<f64>,
}

fn dae_run(heads: &[Affine], decoder: &Affine, x_tilde: &[f64]) -> Result<DaeTrace> {
    let head_outputs: Vec<Vec<f64>> = heads
        .iter()
        .map(|h| Ok(sigmoid_vec(&h.apply(x_tilde)?)))
        .collect::<Result<_>>()?;
    let hidden: Vec<f64> = head_outputs.iter().flatten().copied().collect();
    let reconstruction = sigmoid_vec(&decoder.apply(&hidden)?);
    Ok(DaeTrace {
        head_outputs,
        hidden,
        reconstruction,
    })
}

fn squared_error(x: &[f64], x_prime: &[f64]) -> f64 {
    x.iter()
        .zip(x_prime)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Multi-head DAE forward pass on one example. Heads read the corrupted
/// input; the loss compares the reconstruction against the clean input.
pub fn dae_forward(
    model: &PretrainModel,
    x: &[f64],
    x_tilde: &[f64],
) -> Result<(Representation, Vec<f64>, PretrainLossReport)> {
    expect_kind(model, ModelKind::Dae, "dae_forward")?;
    check_input(model, x, "input")?;
    check_input(model, x_tilde, "corrupted input")?;
    let (heads, decoder) = match &model.params {
        ModelParams::Dae { heads, decoder } => (heads, decoder),
        _ => unreachable!(),
    };
    let trace = dae_run(heads, decoder, x_tilde)?;
    let loss = PretrainLossReport::new(squared_error(x, &trace.reconstruction), 0.0, 0.0);
    Ok((
        Representation {
            values: trace.hidden,
            head_weights: None,
            kind: ModelKind::Dae,
        },
        trace.reconstruction,
        loss,
    ))
}

/// Multi-head VAE forward pass, drawing the reparameterization noise from
/// `rng`. Returns the sampled latent, the reconstruction, and the loss.
pub fn vae_forward<R: Rng>(
    model: &PretrainModel,
    x: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, PretrainLossReport)> {
    let eta: Vec<f64> = (0..model.config.hidden_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    vae_forward_with_noise(model, x, &eta)
}

/// VAE forward pass with caller-supplied standard-normal noise, one draw per
/// hidden coordinate. Fixing `eta` makes the whole pass deterministic, which
/// is what the gradient checks need.
pub fn vae_forward_with_noise(
    model: &PretrainModel,
    x: &[f64],
    eta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, PretrainLossReport)> {
    expect_kind(model, ModelKind::Vae, "vae_forward")?;
    check_input(model, x, "input")?;
    if eta.len() != model.config.hidden_dim {
        return Err(Error::Dimension(format!(
            "noise vector has {} entries, hidden_dim is {}",
            eta.len(),
            model.config.hidden_dim
        )));
    }
    let (mean_heads, logvar_heads, decoder) = match &model.params {
        ModelParams::Vae {
            mean_heads,
            logvar_heads,
            decoder,
        } => (mean_heads, logvar_heads, decoder),
        _ => unreachable!(),
    };
    let d_k = model.config.head_dim();
    let mut z = Vec::with_capacity(model.config.hidden_dim);
    let mut kl = 0.0;
    for (k, (m, l)) in mean_heads.iter().zip(logvar_heads).enumerate() {
        let mu = m.apply(x)?;
        let lv = l.apply(x)?;
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "head {k} produced a non-finite log-variance"
            )));
        }
        for j in 0..d_k {
            let sigma = (0.5 * lv[j]).exp();
            z.push(mu[j] + sigma * eta[k * d_k + j]);
            kl += 0.5 * (mu[j] * mu[j] + lv[j].exp() - 1.0 - lv[j]);
        }
    }
    let x_prime = sigmoid_vec(&decoder.apply(&z)?);
    let loss = PretrainLossReport::new(squared_error(x, &x_prime), kl, 0.0);
    Ok((z, x_prime, loss))
}

/// Attention weights over heads: query `q = W_a x` from the clean input,
/// logits `q . h_k`, softmax. Always a probability vector.
pub fn attention_weights(
    model: &PretrainModel,
    x: &[f64],
    heads: &[Vec<f64>],
) -> Result<Vec<f64>> {
    expect_kind(model, ModelKind::Macdae, "attention_weights")?;
    check_input(model, x, "query input")?;
    let attention = match &model.params {
        ModelParams::Macdae { attention, .. } => attention,
        _ => unreachable!(),
    };
    let d_k = model.config.head_dim();
    if heads.len() != model.config.heads {
        return Err(Error::Dimension(format!(
            "{} head vectors supplied, model has {}",
            heads.len(),
            model.config.heads
        )));
    }
    if let Some(h) = heads.iter().find(|h| h.len() != d_k) {
        return Err(Error::Dimension(format!(
            "head vector has {} entries, head width is {d_k}",
            h.len()
        )));
    }
    let q = attention.matvec(x)?;
    let logits: Vec<f64> = heads.iter().map(|h| crate::numerics::dot(&q, h)).collect();
    softmax(&logits)
}

/// Pairwise head-similarity penalty over unordered pairs `i < j`.
///
/// Raw mode sums `lambda * (cos(h_i, h_j) - epsilon)` and may be negative;
/// hinge mode clips each pair at zero. One head means no pairs, so 0.
pub fn similarity_penalty(
    heads: &[Vec<f64>],
    penalty_cost: f64,
    similarity_threshold: f64,
    mode: PenaltyMode,
) -> Result<f64> {
    if heads.is_empty() {
        return Err(Error::Dimension("penalty needs at least one head".into()));
    }
    let mut total = 0.0;
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            let c = crate::numerics::cosine_similarity(&heads[i], &heads[j])?;
            let term = c - similarity_threshold;
            total += match mode {
                PenaltyMode::Raw => penalty_cost * term,
                PenaltyMode::Hinge => penalty_cost * term.max(0.0),
            };
        }
    }
    Ok(total)
}

struct MacdaeTrace {
    dae: DaeTrace,
    query: Vec<f64>,
    weights: Vec<f64>,
    weighted_hidden: Vec<f64>,
    reconstruction: Vec<f64>,
}

fn macdae_run(
    heads: &[Affine],
    decoder: &Affine,
    attention: &Matrix,
    x: &[f64],
    x_tilde: &[f64],
) -> Result<MacdaeTrace> {
    let mut dae = dae_run(heads, decoder, x_tilde)?;
    let query = attention.matvec(x)?;
    let logits: Vec<f64> = dae
        .head_outputs
        .iter()
        .map(|h| crate::numerics::dot(&query, h))
        .collect();
    let weights = softmax(&logits)?;
    let weighted_hidden: Vec<f64> = dae
        .head_outputs
        .iter()
        .zip(&weights)
        .flat_map(|(h, &w)| h.iter().map(move |&v| w * v))
        .collect();
    let reconstruction = sigmoid_vec(&decoder.apply(&weighted_hidden)?);
    dae.hidden = Vec::new();
    Ok(MacdaeTrace {
        dae,
        query,
        weights,
        weighted_hidden,
        reconstruction,
    })
}

/// MACDAE forward pass: DAE heads from the corrupted input, attention
/// weights from the clean input, weighted concatenation decoded, and the
/// similarity penalty (computed on the unweighted heads) added to the loss.
pub fn macdae_forward(
    model: &PretrainModel,
    x: &[f64],
    x_tilde: &[f64],
) -> Result<(Representation, Vec<f64>, PretrainLossReport)> {
    expect_kind(model, ModelKind::Macdae, "macdae_forward")?;
    check_input(model, x, "input")?;
    check_input(model, x_tilde, "corrupted input")?;
    let (heads, decoder, attention) = match &model.params {
        ModelParams::Macdae {
            heads,
            decoder,
            attention,
        } => (heads, decoder, attention),
        _ => unreachable!(),
    };
    let trace = macdae_run(heads, decoder, attention, x, x_tilde)?;
    let penalty = if model.config.heads > 1 {
        similarity_penalty(
            &trace.dae.head_outputs,
            model.config.penalty_cost,
            model.config.similarity_threshold,
            model.config.penalty_mode,
        )?
    } else {
        0.0
    };
    let loss = PretrainLossReport::new(squared_error(x, &trace.reconstruction), 0.0, penalty);
    Ok((
        Representation {
            values: trace.weighted_hidden,
            head_weights: Some(trace.weights),
            kind: ModelKind::Macdae,
        },
        trace.reconstruction,
        loss,
    ))
}

/// The representation handed to the downstream ranker, always from the clean
/// input: DAE concatenates heads, MACDAE weights them by attention, the VAE
/// concatenates head means (no sampling). Length is always `hidden_dim`.
pub fn extract_representation(model: &PretrainModel, x: &[f64]) -> Result<Representation> {
    check_input(model, x, "input")?;
    match &model.params {
        ModelParams::Dae { .. } => {
            let (rep, _, _) = dae_forward(model, x, x)?;
            Ok(rep)
        }
        ModelParams::Macdae { .. } => {
            let (rep, _, _) = macdae_forward(model, x, x)?;
            Ok(rep)
        }
        ModelParams::Vae { mean_heads, .. } => {
            let mut values = Vec::with_capacity(model.config.hidden_dim);
            for m in mean_heads {
                values.extend(m.apply(x)?);
            }
            Ok(Representation {
                values,
                head_weights: None,
                kind: ModelKind::Vae,
            })
        }
    }
}

/// Backward pass of [`extract_representation`]: given the loss gradient on
/// the extracted representation, accumulate gradients on every pre-training
/// parameter the extraction path touches. Parameters outside that path (the
/// decoder, the VAE log-variance nets) receive nothing, which is why a
/// fine-tuned ranker leaves them unchanged.
pub fn extract_backward(
    model: &PretrainModel,
    x: &[f64],
    d_rep: &[f64],
    grads: &mut ModelParams,
) -> Result<()> {
    check_input(model, x, "input")?;
    if d_rep.len() != model.config.hidden_dim {
        return Err(Error::Dimension(format!(
            "representation gradient has {} entries, hidden_dim is {}",
            d_rep.len(),
            model.config.hidden_dim
        )));
    }
    let d_k = model.config.head_dim();
    match (&model.params, grads) {
        (ModelParams::Dae { heads, .. }, ModelParams::Dae { heads: g_heads, .. }) => {
            for (k, h) in heads.iter().enumerate() {
                let h_out = sigmoid_vec(&h.apply(x)?);
                let d_pre = sigmoid_backward_into(&h_out, &d_rep[k * d_k..(k + 1) * d_k]);
                g_heads[k].weight.add_outer(&d_pre, x);
                for (b, g) in g_heads[k].bias.iter_mut().zip(&d_pre) {
                    *b += g;
                }
            }
        }
        (ModelParams::Vae { .. }, ModelParams::Vae { mean_heads: g_mean, .. }) => {
            for (k, g_m) in g_mean.iter_mut().enumerate() {
                let d_mu = &d_rep[k * d_k..(k + 1) * d_k];
                g_m.weight.add_outer(d_mu, x);
                for (b, g) in g_m.bias.iter_mut().zip(d_mu) {
                    *b += g;
                }
            }
        }
        (
            ModelParams::Macdae {
                heads,
                decoder: _,
                attention,
            },
            ModelParams::Macdae {
                heads: g_heads,
                attention: g_attention,
                ..
            },
        ) => {
            let head_outputs: Vec<Vec<f64>> = heads
                .iter()
                .map(|h| Ok(sigmoid_vec(&h.apply(x)?)))
                .collect::<Result<_>>()?;
            let query = attention.matvec(x)?;
            let logits: Vec<f64> = head_outputs
                .iter()
                .map(|h| crate::numerics::dot(&query, h))
                .collect();
            let weights = softmax(&logits)?;

            let k_heads = heads.len();
            let mut d_head_acts: Vec<Vec<f64>> = vec![vec![0.0; d_k]; k_heads];
            let mut s = vec![0.0; k_heads];
            for k in 0..k_heads {
                let g_k = &d_rep[k * d_k..(k + 1) * d_k];
                s[k] = crate::numerics::dot(g_k, &head_outputs[k]);
                for t in 0..d_k {
                    d_head_acts[k][t] += weights[k] * g_k[t];
                }
            }
            let weighted_s: f64 = weights.iter().zip(&s).map(|(w, v)| w * v).sum();
            let mut d_query = vec![0.0; query.len()];
            for k in 0..k_heads {
                let d_logit = weights[k] * (s[k] - weighted_s);
                for t in 0..d_k {
                    d_query[t] += d_logit * head_outputs[k][t];
                    d_head_acts[k][t] += d_logit * query[t];
                }
            }
            g_attention.add_outer(&d_query, x);
            for k in 0..k_heads {
                let d_pre = sigmoid_backward_into(&head_outputs[k], &d_head_acts[k]);
                g_heads[k].weight.add_outer(&d_pre, x);
                for (b, g) in g_heads[k].bias.iter_mut().zip(&d_pre) {
                    *b += g;
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "gradient accumulator does not match the model kind".into(),
            ))
        }
    }
    Ok(())
}

fn sigmoid_backward_into(output: &[f64], grad_out: &[f64]) -> Vec<f64> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect()
}

/// d reconstruction-loss / d x' for the squared loss, then through the
/// decoder sigmoid.
fn recon_grad_pre(x: &[f64], x_prime: &[f64]) -> Vec<f64> {
    let d_xp: Vec<f64> = x_prime.iter().zip(x).map(|(&p, &t)| 2.0 * (p - t)).collect();
    sigmoid_backward_into(x_prime, &d_xp)
}

fn dae_backward(
    heads: &[Affine],
    decoder: &Affine,
    x: &[f64],
    x_tilde: &[f64],
    trace: &DaeTrace,
    g_heads: &mut [Affine],
    g_decoder: &mut Affine,
) {
    let d_pre_out = recon_grad_pre(x, &trace.reconstruction);
    g_decoder.weight.add_outer(&d_pre_out, &trace.hidden);
    for (b, g) in g_decoder.bias.iter_mut().zip(&d_pre_out) {
        *b += g;
    }
    let mut d_hidden = vec![0.0; trace.hidden.len()];
    decoder.weight.matvec_transpose_into(&d_pre_out, &mut d_hidden);
    let d_k = heads[0].bias.len();
    for (k, h_out) in trace.head_outputs.iter().enumerate() {
        let d_h = &d_hidden[k * d_k..(k + 1) * d_k];
        let d_pre = sigmoid_backward_into(h_out, d_h);
        g_heads[k].weight.add_outer(&d_pre, x_tilde);
        for (b, g) in g_heads[k].bias.iter_mut().zip(&d_pre) {
            *b += g;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn vae_backward(
    mean_heads: &[Affine],
    logvar_heads: &[Affine],
    decoder: &Affine,
    x: &[f64],
    eta: &[f64],
    z: &[f64],
    x_prime: &[f64],
    g_mean: &mut [Affine],
    g_logvar: &mut [Affine],
    g_decoder: &mut Affine,
) -> Result<()> {
    let d_pre_out = recon_grad_pre(x, x_prime);
    g_decoder.weight.add_outer(&d_pre_out, z);
    for (b, g) in g_decoder.bias.iter_mut().zip(&d_pre_out) {
        *b += g;
    }
    let mut d_z = vec![0.0; z.len()];
    decoder.weight.matvec_transpose_into(&d_pre_out, &mut d_z);
    let d_k = mean_heads[0].bias.len();
    for (k, (m, l)) in mean_heads.iter().zip(logvar_heads).enumerate() {
        let mu = m.apply(x)?;
        let lv = l.apply(x)?;
        let mut d_mu = vec![0.0; d_k];
        let mut d_lv = vec![0.0; d_k];
        for j in 0..d_k {
            let g_z = d_z[k * d_k + j];
            // z = mu + exp(lv/2) eta, KL adds mu and (exp(lv) - 1)/2
            d_mu[j] = g_z + mu[j];
            d_lv[j] = g_z * 0.5 * (0.5 * lv[j]).exp() * eta[k * d_k + j] + 0.5 * (lv[j].exp() - 1.0);
        }
        g_mean[k].weight.add_outer(&d_mu, x);
        for (b, g) in g_mean[k].bias.iter_mut().zip(&d_mu) {
            *b += g;
        }
        g_logvar[k].weight.add_outer(&d_lv, x);
        for (b, g) in g_logvar[k].bias.iter_mut().zip(&d_lv) {
            *b += g;
        }
    }
    Ok(())
}

/// Gradient of the pairwise-cosine penalty, accumulated into per-head
/// gradients on the unweighted head activations.
fn penalty_backward(
    heads: &[Vec<f64>],
    penalty_cost: f64,
    similarity_threshold: f64,
    mode: PenaltyMode,
    d_heads: &mut [Vec<f64>],
) -> Result<()> {
    let norms: Vec<f64> = heads.iter().map(|h| crate::numerics::norm(h)).collect();
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            let c = crate::numerics::cosine_similarity(&heads[i], &heads[j])?;
            let coef = match mode {
                PenaltyMode::Raw => penalty_cost,
                PenaltyMode::Hinge => {
                    if c > similarity_threshold {
                        penalty_cost
                    } else {
                        0.0
                    }
                }
            };
            if coef == 0.0 {
                continue;
            }
            let denom = norms[i] * norms[j];
            for t in 0..heads[i].len() {
                d_heads[i][t] += coef * (heads[j][t] / denom - c * heads[i][t] / (norms[i] * norms[i]));
                d_heads[j][t] += coef * (heads[i][t] / denom - c * heads[j][t] / (norms[j] * norms[j]));
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn macdae_backward(
    decoder: &Affine,
    config: &PretrainConfig,
    x: &[f64],
    x_tilde: &[f64],
    trace: &MacdaeTrace,
    g_heads: &mut [Affine],
    g_decoder: &mut Affine,
    g_attention: &mut Matrix,
) -> Result<()> {
    let d_pre_out = recon_grad_pre(x, &trace.reconstruction);
    g_decoder.weight.add_outer(&d_pre_out, &trace.weighted_hidden);
    for (b, g) in g_decoder.bias.iter_mut().zip(&d_pre_out) {
        *b += g;
    }
    let mut d_weighted = vec![0.0; trace.weighted_hidden.len()];
    decoder.weight.matvec_transpose_into(&d_pre_out, &mut d_weighted);

    let d_k = config.head_dim();
    let k_heads = config.heads;
    // Split the weighted-concat gradient into per-head pieces: for segment k,
    // d(mu_k) = g_k . h_k and d(h_k) gains mu_k * g_k.
    let mut d_head_acts: Vec<Vec<f64>> = vec![vec![0.0; d_k]; k_heads];
    let mut s = vec![0.0; k_heads];
    for k in 0..k_heads {
        let g_k = &d_weighted[k * d_k..(k + 1) * d_k];
        s[k] = crate::numerics::dot(g_k, &trace.dae.head_outputs[k]);
        for t in 0..d_k {
            d_head_acts[k][t] += trace.weights[k] * g_k[t];
        }
    }
    // Softmax backward: d logit_k = mu_k (s_k - sum_j mu_j s_j).
    let weighted_s: f64 = trace.weights.iter().zip(&s).map(|(w, v)| w * v).sum();
    let mut d_query = vec![0.0; trace.query.len()];
    for k in 0..k_heads {
        let d_logit = trace.weights[k] * (s[k] - weighted_s);
        for t in 0..d_k {
            d_query[t] += d_logit * trace.dae.head_outputs[k][t];
            d_head_acts[k][t] += d_logit * trace.query[t];
        }
    }
    g_attention.add_outer(&d_query, x);

    if k_heads > 1 {
        penalty_backward(
            &trace.dae.head_outputs,
            config.penalty_cost,
            config.similarity_threshold,
            config.penalty_mode,
            &mut d_head_acts,
        )?;
    }

    for k in 0..k_heads {
        let d_pre = sigmoid_backward_into(&trace.dae.head_outputs[k], &d_head_acts[k]);
        g_heads[k].weight.add_outer(&d_pre, x_tilde);
        for (b, g) in g_heads[k].bias.iter_mut().zip(&d_pre) {
            *b += g;
        }
    }
    Ok(())
}

/// Forward + backward on one example, accumulating parameter gradients into
/// `grads` (a zeroed clone of the model's params). Returns the loss report.
/// Noise (mask or reparameterization draws) comes from `noise_rng`.
pub(crate) fn example_grad<R: Rng>(
    model: &PretrainModel,
    x: &[f64],
    noise_rng: &mut R,
    grads: &mut ModelParams,
) -> Result<PretrainLossReport> {
    match (&model.params, grads) {
        (
            ModelParams::Dae { heads, decoder },
            ModelParams::Dae {
                heads: g_heads,
                decoder: g_decoder,
            },
        ) => {
            let x_tilde = corrupt_mask(x, model.config.keep_probability, noise_rng)?;
            let trace = dae_run(heads, decoder, &x_tilde)?;
            let loss = PretrainLossReport::new(squared_error(x, &trace.reconstruction), 0.0, 0.0);
            dae_backward(heads, decoder, x, &x_tilde, &trace, g_heads, g_decoder);
            Ok(loss)
        }
        (
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            },
            ModelParams::Vae {
                mean_heads: g_mean,
                logvar_heads: g_logvar,
                decoder: g_decoder,
            },
        ) => {
            let eta: Vec<f64> = (0..model.config.hidden_dim)
                .map(|_| noise_rng.sample(StandardNormal))
                .collect();
            let (z, x_prime, loss) = vae_forward_with_noise(model, x, &eta)?;
            vae_backward(
                mean_heads,
                logvar_heads,
                decoder,
                x,
                &eta,
                &z,
                &x_prime,
                g_mean,
                g_logvar,
                g_decoder,
            )?;
            Ok(loss)
        }
        (
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            },
            ModelParams::Macdae {
                heads: g_heads,
                decoder: g_decoder,
                attention: g_attention,
            },
        ) => {
            let x_tilde = corrupt_mask(x, model.config.keep_probability, noise_rng)?;
            let trace = macdae_run(heads, decoder, attention, x, &x_tilde)?;
            let penalty = if model.config.heads > 1 {
                similarity_penalty(
                    &trace.dae.head_outputs,
                    model.config.penalty_cost,
                    model.config.similarity_threshold,
                    model.config.penalty_mode,
                )?
            } else {
                0.0
            };
            let loss =
                PretrainLossReport::new(squared_error(x, &trace.reconstruction), 0.0, penalty);
            macdae_backward(
                decoder,
                &model.config,
                x,
                &x_tilde,
                &trace,
                g_heads,
                g_decoder,
                g_attention,
            )?;
            Ok(loss)
        }
        _ => unreachable!("grads allocated from the model's own params"),
    }
}

fn flatten_params(params: &ModelParams, config: &PretrainConfig) -> Vec<f64> {
    PretrainModel {
        config: config.clone(),
        params: params.clone(),
    }
    .flatten()
}

/// Gradients of the total loss with respect to every parameter, on one
/// example with explicit noise, flattened in parameter order. This is the
/// hook the gradient-check tests drive.
pub fn analytic_grad(
    model: &PretrainModel,
    x: &[f64],
    x_tilde: &[f64],
    eta: &[f64],
) -> Result<Vec<f64>> {
    let mut grads = model.params.zeros_like();
    match (&model.params, &mut grads) {
        (
            ModelParams::Dae { heads, decoder },
            ModelParams::Dae {
                heads: g_heads,
                decoder: g_decoder,
            },
        ) => {
            let trace = dae_run(heads, decoder, x_tilde)?;
            dae_backward(heads, decoder, x, x_tilde, &trace, g_heads, g_decoder);
        }
        (
            ModelParams::Vae {
                mean_heads,
                logvar_heads,
                decoder,
            },
            ModelParams::Vae {
                mean_heads: g_mean,
                logvar_heads: g_logvar,
                decoder: g_decoder,
            },
        ) => {
            let (z, x_prime, _) = vae_forward_with_noise(model, x, eta)?;
            vae_backward(
                mean_heads,
                logvar_heads,
                decoder,
                x,
                eta,
                &z,
                &x_prime,
                g_mean,
                g_logvar,
                g_decoder,
            )?;
        }
        (
            ModelParams::Macdae {
                heads,
                decoder,
                attention,
            },
            ModelParams::Macdae {
                heads: g_heads,
                decoder: g_decoder,
                attention: g_attention,
            },
        ) => {
            let trace = macdae_run(heads, decoder, attention, x, x_tilde)?;
            macdae_backward(
                decoder,
                &model.config,
                x,
                x_tilde,
                &trace,
                g_heads,
                g_decoder,
                g_attention,
            )?;
        }
        _ => unreachable!(),
    }
    Ok(flatten_params(&grads, &model.config))
}

/// Total loss of one example under explicit noise; the closure the
/// finite-difference oracle probes.
pub fn example_loss(
    model: &PretrainModel,
    x: &[f64],
    x_tilde: &[f64],
    eta: &[f64],
) -> Result<f64> {
    Ok(match model.config.kind {
        ModelKind::Dae => dae_forward(model, x, x_tilde)?.2.total,
        ModelKind::Vae => vae_forward_with_noise(model, x, eta)?.2.total,
        ModelKind::Macdae => macdae_forward(model, x, x_tilde)?.2.total,
    })
}

/// Mini-batch Adam pre-training.
///
/// Shuffling, masking, and VAE noise all come from streams of the config
/// seed, so two runs with the same config and data produce bit-identical
/// parameters. The returned trace holds one mean-loss entry per epoch.
pub fn fit(config: &PretrainConfig, data: &[Vec<f64>]) -> Result<(PretrainModel, Vec<EpochLoss>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("pre-training dataset is empty".into()));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != config.input_dim {
            return Err(Error::Dimension(format!(
                "example {i} has {} entries, input_dim is {}",
                row.len(),
                config.input_dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("example {i} contains a non-finite value")));
        }
    }

    let mut model = PretrainModel::init(config)?;
    let mut data_rng = rng_stream(config.seed, STREAM_DATA);
    let mut noise_rng = rng_stream(config.seed, STREAM_NOISE);
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut data_rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let loss = example_grad(&model, &data[i], &mut noise_rng, &mut grads)?;
                sums.0 += loss.reconstruction;
                sums.1 += loss.kl;
                sums.2 += loss.penalty;
                sums.3 += loss.total;
            }
            let mut g_flat = flatten_params(&grads, config);
            let scale = 1.0 / batch.len() as f64;
            for g in &mut g_flat {
                *g *= scale;
            }
            adam.step(&mut flat, &g_flat)?;
            model.unflatten(&flat)?;
        }
        let n = data.len() as f64;
        trace.push(EpochLoss {
            epoch,
            reconstruction: sums.0 / n,
            kl: sums.1 / n,
            penalty: sums.2 / n,
            total: sums.3 / n,
        });
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, gradient_relative_error};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(kind: ModelKind) -> PretrainConfig {
        PretrainConfig {
            heads: 2,
            hidden_dim: 6,
            epochs: 2,
            batch_size: 8,
            ..PretrainConfig::default_for(kind, 5)
        }
    }

    fn toy_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_stream(seed, 9);
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(ModelKind::Dae);
        c.hidden_dim = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_config(ModelKind::Dae);
        c.keep_probability = 1.5;
        assert!(c.validate().is_err());
        let mut c = small_config(ModelKind::Dae);
        c.similarity_threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config(ModelKind::Dae);
        c.penalty_cost = -0.1;
        assert!(c.validate().is_err());
        assert!(small_config(ModelKind::Macdae).validate().is_ok());
    }

    #[test]
    fn corrupt_mask_extremes() {
        let x = vec![1.0, -2.0, 3.0];
        let mut rng = rng_stream(0, 0);
        assert_eq!(corrupt_mask(&x, 1.0, &mut rng).unwrap(), x);
        assert_eq!(corrupt_mask(&x, 0.0, &mut rng).unwrap(), vec![0.0; 3]);
        assert!(matches!(
            corrupt_mask(&x, 1.1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corrupt_mask_zeroed_fraction() {
        let x = vec![1.0; 100_000];
        let mut rng = rng_stream(7, 2);
        let masked = corrupt_mask(&x, 0.95, &mut rng).unwrap();
        let zeroed = masked.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!(
            (0.045..=0.055).contains(&zeroed),
            "zeroed fraction {zeroed} outside [0.045, 0.055]"
        );
    }

    #[test]
    fn corrupt_mask_deterministic() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = corrupt_mask(&x, 0.8, &mut rng_stream(3, 2)).unwrap();
        let b = corrupt_mask(&x, 0.8, &mut rng_stream(3, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dae_zero_params_hand_value() {
        let config = small_config(ModelKind::Dae);
        let mut model = PretrainModel::init(&config).unwrap();
        let flat = vec![0.0; model.param_count()];
        model.unflatten(&flat).unwrap();
        let x = vec![0.2, 0.4, 0.6, 0.8, 1.0];
        let (rep, x_prime, loss) = dae_forward(&model, &x, &x).unwrap();
        assert!(rep.values.iter().all(|&v| v == 0.5));
        assert!(x_prime.iter().all(|&v| v == 0.5));
        let expected: f64 = x.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        assert!((loss.reconstruction - expected).abs() < 1e-12);
        assert_eq!(loss.total, loss.reconstruction);
    }

    #[test]
    fn dae_head_segment_shapes() {
        let config = PretrainConfig {
            heads: 4,
            hidden_dim: 256,
            ..PretrainConfig::default_for(ModelKind::Dae, 8)
        };
        let model = PretrainModel::init(&config).unwrap();
        let x = vec![0.5; 8];
        let (rep, _, _) = dae_forward(&model, &x, &x).unwrap();
        assert_eq!(rep.values.len(), 256);
        assert_eq!(config.head_dim(), 64);
    }

    #[test]
    fn vae_kl_hand_values() {
        // mu = 0, logvar = 0 everywhere -> KL = 0
        let config = small_config(ModelKind::Vae);
        let mut model = PretrainModel::init(&config).unwrap();
        let flat = vec![0.0; model.param_count()];
        model.unflatten(&flat).unwrap();
        let x = vec![0.3; 5];
        let eta = vec![0.0; 6];
        let (_, _, loss) = vae_forward_with_noise(&model, &x, &eta).unwrap();
        assert_eq!(loss.kl, 0.0);

        // one coordinate with mu = 1, sigma^2 = 1: KL contribution 0.5
        let config = PretrainConfig {
            heads: 1,
            hidden_dim: 1,
            ..PretrainConfig::default_for(ModelKind::Vae, 1)
        };
        let mut model = PretrainModel::init(&config).unwrap();
        let mut flat = vec![0.0; model.param_count()];
        // layout: mean.weight (1), mean.bias (1), logvar.weight (1),
        // logvar.bias (1), decoder.weight (1), decoder.bias (1)
        flat[1] = 1.0;
        model.unflatten(&flat).unwrap();
        let (_, _, loss) = vae_forward_with_noise(&model, &[0.0], &[0.0]).unwrap();
        assert!((loss.kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vae_noise_determinism() {
        let config = small_config(ModelKind::Vae);
        let model = PretrainModel::init(&config).unwrap();
        let x = vec![0.4; 5];
        let (z1, _, _) = vae_forward(&model, &x, &mut rng_stream(5, 2)).unwrap();
        let (z2, _, _) = vae_forward(&model, &x, &mut rng_stream(5, 2)).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn vae_kl_nonnegative_property() {
        let config = small_config(ModelKind::Vae);
        for seed in 0..20 {
            let model = PretrainModel::init(&PretrainConfig { seed, ..config.clone() }).unwrap();
            let x = toy_data(1, 5, seed + 100).remove(0);
            let (_, _, loss) = vae_forward(&model, &x, &mut rng_stream(seed, 2)).unwrap();
            assert!(loss.kl >= 0.0);
        }
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let config = PretrainConfig {
            heads: 1,
            hidden_dim: 3,
            ..PretrainConfig::default_for(ModelKind::Macdae, 4)
        };
        let model = PretrainModel::init(&config).unwrap();
        let w = attention_weights(&model, &[0.1; 4], &[vec![0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(w, vec![1.0]);

        let config = PretrainConfig {
            heads: 3,
            hidden_dim: 6,
            ..PretrainConfig::default_for(ModelKind::Macdae, 4)
        };
        let model = PretrainModel::init(&config).unwrap();
        let same = vec![vec![0.2, 0.9]; 3];
        let w = attention_weights(&model, &[0.3; 4], &same).unwrap();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_value() {
        // W_a = I2 (padded), x = e_1 so q = [1, 0]; h_1 = [ln 2, 0],
        // h_2 = [0, 5] give logits (ln 2, 0) and weights (2/3, 1/3).
        let config = PretrainConfig {
            heads: 2,
            hidden_dim: 4,
            ..PretrainConfig::default_for(ModelKind::Macdae, 2)
        };
        let mut model = PretrainModel::init(&config).unwrap();
        if let ModelParams::Macdae { attention, .. } = &mut model.params {
            *attention = Matrix::from_values(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        let heads = vec![vec![2.0_f64.ln(), 0.0], vec![0.0, 5.0]];
        let w = attention_weights(&model, &[1.0, 0.0], &heads).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_hand_values() {
        let same = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        let p = similarity_penalty(&same, 0.05, 0.75, PenaltyMode::Raw).unwrap();
        assert!((p - 0.0125).abs() < 1e-12);

        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let raw = similarity_penalty(&ortho, 0.05, 0.75, PenaltyMode::Raw).unwrap();
        assert!((raw + 0.0375).abs() < 1e-12);
        let hinge = similarity_penalty(&ortho, 0.05, 0.75, PenaltyMode::Hinge).unwrap();
        assert_eq!(hinge, 0.0);

        let single = vec![vec![3.0, 4.0]];
        assert_eq!(
            similarity_penalty(&single, 0.05, 0.75, PenaltyMode::Raw).unwrap(),
            0.0
        );
    }

    #[test]
    fn penalty_zero_norm_head_errors() {
        let heads = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(
            similarity_penalty(&heads, 0.05, 0.75, PenaltyMode::Raw),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn macdae_penalty_matches_standalone() {
        let config = small_config(ModelKind::Macdae);
        let model = PretrainModel::init(&config).unwrap();
        let x = vec![0.1, 0.9, 0.4, 0.2, 0.7];
        let x_tilde = vec![0.1, 0.0, 0.4, 0.2, 0.7];
        let (_, _, loss) = macdae_forward(&model, &x, &x_tilde).unwrap();

        // recompute the unweighted heads independently
        let (heads_p, _) = match &model.params {
            ModelParams::Macdae { heads, decoder, .. } => (heads, decoder),
            _ => unreachable!(),
        };
        let heads: Vec<Vec<f64>> = heads_p
            .iter()
            .map(|h| sigmoid_vec(&h.apply(&x_tilde).unwrap()))
            .collect();
        let standalone = similarity_penalty(
            &heads,
            config.penalty_cost,
            config.similarity_threshold,
            config.penalty_mode,
        )
        .unwrap();
        assert!((loss.penalty - standalone).abs() < 1e-15);
        assert!((loss.total - loss.reconstruction - loss.penalty).abs() < 1e-15);
    }

    #[test]
    fn macdae_weights_are_probability_vector() {
        let config = PretrainConfig {
            heads: 4,
            hidden_dim: 8,
            ..PretrainConfig::default_for(ModelKind::Macdae, 6)
        };
        for seed in 0..10 {
            let model = PretrainModel::init(&PretrainConfig { seed, ..config.clone() }).unwrap();
            let x = toy_data(1, 6, seed).remove(0);
            let (rep, _, _) = macdae_forward(&model, &x, &x).unwrap();
            let w = rep.head_weights.unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn extraction_length_law_and_determinism() {
        for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
            let config = small_config(kind);
            let model = PretrainModel::init(&config).unwrap();
            let x = vec![0.25, 0.5, 0.75, 0.1, 0.9];
            let a = model.extract(&x).unwrap();
            let b = model.extract(&x).unwrap();
            assert_eq!(a.values.len(), config.hidden_dim);
            assert_eq!(a.values, b.values, "{kind} extraction must be deterministic");
        }
    }

    #[test]
    fn vae_extraction_matches_sample_mean() {
        let config = small_config(ModelKind::Vae);
        let model = PretrainModel::init(&config).unwrap();
        let x = vec![0.6, 0.2, 0.8, 0.4, 0.05];
        let mean = model.extract(&x).unwrap().values;
        let mut acc = vec![0.0; mean.len()];
        let mut rng = rng_stream(1234, 2);
        let n = 10_000;
        for _ in 0..n {
            let (z, _, _) = vae_forward(&model, &x, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(&z) {
                *a += v;
            }
        }
        for (a, m) in acc.iter().zip(&mean) {
            assert!(
                (a / n as f64 - m).abs() < 0.02,
                "sampled mean {} vs analytic {}",
                a / n as f64,
                m
            );
        }
    }

    fn check_gradients(kind: ModelKind, seed: u64) {
        let config = PretrainConfig {
            heads: 3,
            hidden_dim: 6,
            seed,
            penalty_mode: PenaltyMode::Raw,
            ..PretrainConfig::default_for(kind, 7)
        };
        let model = PretrainModel::init(&config).unwrap();
        let mut rng = rng_stream(seed + 1, 5);
        let x: Vec<f64> = (0..7).map(|_| rng.gen_range(0.05..0.95)).collect();
        let x_tilde = corrupt_mask(&x, 0.8, &mut rng).unwrap();
        let eta: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let analytic = analytic_grad(&model, &x, &x_tilde, &eta).unwrap();
        let base = model.flatten();
        let oracle = finite_diff_grad(
            |flat| {
                let mut probe = model.clone();
                probe.unflatten(flat).unwrap();
                example_loss(&probe, &x, &x_tilde, &eta).unwrap()
            },
            &base,
            1e-5,
        )
        .unwrap();
        let err = gradient_relative_error(&analytic, &oracle);
        assert!(err < 1e-4, "{kind} gradient relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [0, 1, 2] {
            check_gradients(ModelKind::Dae, seed);
            check_gradients(ModelKind::Vae, seed);
            check_gradients(ModelKind::Macdae, seed);
        }
    }

    #[test]
    fn gradients_match_hinge_mode() {
        let config = PretrainConfig {
            heads: 2,
            hidden_dim: 4,
            penalty_mode: PenaltyMode::Hinge,
            similarity_threshold: -0.5,
            penalty_cost: 0.3,
            seed: 8,
            ..PretrainConfig::default_for(ModelKind::Macdae, 5)
        };
        let model = PretrainModel::init(&config).unwrap();
        let x = vec![0.2, 0.8, 0.5, 0.3, 0.6];
        let x_tilde = vec![0.2, 0.0, 0.5, 0.3, 0.6];
        let analytic = analytic_grad(&model, &x, &x_tilde, &[]).unwrap();
        let oracle = finite_diff_grad(
            |flat| {
                let mut probe = model.clone();
                probe.unflatten(flat).unwrap();
                example_loss(&probe, &x, &x_tilde, &[]).unwrap()
            },
            &model.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(gradient_relative_error(&analytic, &oracle) < 1e-4);
    }

    #[test]
    fn extract_backward_matches_finite_differences() {
        // probe loss: fixed linear functional of the extracted representation
        for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
            let config = PretrainConfig {
                heads: 2,
                hidden_dim: 6,
                seed: 40,
                ..PretrainConfig::default_for(kind, 5)
            };
            let model = PretrainModel::init(&config).unwrap();
            let mut rng = rng_stream(99, 4);
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.95)).collect();
            let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut grads = model.params.zeros_like();
            extract_backward(&model, &x, &c, &mut grads).unwrap();
            let analytic = flatten_params(&grads, &config);

            let oracle = finite_diff_grad(
                |flat| {
                    let mut probe = model.clone();
                    probe.unflatten(flat).unwrap();
                    crate::numerics::dot(&c, &probe.extract(&x).unwrap().values)
                },
                &model.flatten(),
                1e-5,
            )
            .unwrap();
            let err = gradient_relative_error(&analytic, &oracle);
            assert!(err < 1e-4, "{kind} extract gradient relative error {err}");
        }
    }

    #[test]
    fn fit_rejects_bad_data() {
        let config = small_config(ModelKind::Dae);
        assert!(matches!(fit(&config, &[]), Err(Error::Data(_))));
        assert!(matches!(
            fit(&config, &[vec![0.0; 3]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let config = small_config(ModelKind::Macdae);
        let data = toy_data(60, 5, 77);
        let (m1, t1) = fit(&config, &data).unwrap();
        let (m2, t2) = fit(&config, &data).unwrap();
        assert_eq!(m1.flatten(), m2.flatten());
        assert_eq!(t1.len(), config.epochs);
        assert_eq!(
            t1.iter().map(|e| e.total).collect::<Vec<_>>(),
            t2.iter().map(|e| e.total).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fit_reduces_loss_on_toy_data() {
        for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
            let config = PretrainConfig {
                heads: 2,
                hidden_dim: 8,
                epochs: 5,
                batch_size: 16,
                learning_rate: 0.01,
                ..PretrainConfig::default_for(kind, 16)
            };
            let data = toy_data(100, 16, 5);
            let (_, trace) = fit(&config, &data).unwrap();
            assert!(
                trace.last().unwrap().total < trace.first().unwrap().total,
                "{kind}: loss did not decrease ({} -> {})",
                trace.first().unwrap().total,
                trace.last().unwrap().total
            );
        }
    }

    #[test]
    fn macdae_k1_matches_dae_bitwise() {
        let dae_config = PretrainConfig {
            heads: 1,
            hidden_dim: 4,
            epochs: 3,
            batch_size: 8,
            ..PretrainConfig::default_for(ModelKind::Dae, 6)
        };
        let mac_config = PretrainConfig {
            kind: ModelKind::Macdae,
            ..dae_config.clone()
        };
        let data = toy_data(40, 6, 21);
        let (dae, dae_trace) = fit(&dae_config, &data).unwrap();
        let (mac, mac_trace) = fit(&mac_config, &data).unwrap();

        let dae_flat = dae.flatten();
        let mac_flat = mac.flatten();
        // the MACDAE flat vector ends with the attention matrix
        assert_eq!(&mac_flat[..dae_flat.len()], &dae_flat[..]);
        for (a, b) in dae_trace.iter().zip(&mac_trace) {
            assert!((a.total - b.total).abs() <= 1e-12);
        }
        let x = vec![0.3, 0.6, 0.1, 0.8, 0.2, 0.5];
        assert_eq!(dae.extract(&x).unwrap().values, mac.extract(&x).unwrap().values);
    }

    #[test]
    fn checkpoint_tensor_roundtrip() {
        for kind in [ModelKind::Dae, ModelKind::Vae, ModelKind::Macdae] {
            let config = small_config(kind);
            let model = PretrainModel::init(&config).unwrap();
            let tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = model
                .tensors()
                .into_iter()
                .map(|(n, d, v)| (n, (d, v)))
                .collect();
            let rebuilt = PretrainModel::from_tensors(config, &tensors).unwrap();
            assert_eq!(model.flatten(), rebuilt.flatten());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn corrupt_mask_only_zeroes(seed in 0u64..500, p in 0.0f64..=1.0) {
            let x: Vec<f64> = (1..=30).map(|i| i as f64 / 10.0).collect();
            let masked = corrupt_mask(&x, p, &mut rng_stream(seed, 2)).unwrap();
            for (orig, m) in x.iter().zip(&masked) {
                prop_assert!(*m == *orig || *m == 0.0);
            }
        }

        #[test]
        fn hinge_penalty_nonnegative(seed in 0u64..200, k in 2usize..5) {
            let mut rng = rng_stream(seed, 3);
            let heads: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..4).map(|_| rng.gen_range(0.1..1.0)).collect())
                .collect();
            let p = similarity_penalty(&heads, 0.05, 0.75, PenaltyMode::Hinge).unwrap();
            prop_assert!(p >= 0.0);
        }

        #[test]
        fn attention_weights_sum_to_one(seed in 0u64..200) {
            let config = PretrainConfig {
                heads: 4,
                hidden_dim: 8,
                seed,
                ..PretrainConfig::default_for(ModelKind::Macdae, 5)
            };
            let model = PretrainModel::init(&config).unwrap();
            let mut rng = rng_stream(seed, 4);
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let heads: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..2).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let w = attention_weights(&model, &x, &heads).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
    }
}
