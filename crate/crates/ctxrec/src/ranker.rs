//! Wide-and-deep supervised ranker.
//!
//! The wide part is a linear model over the raw assembled features; the deep
//! part is a ReLU MLP over those features concatenated with the pre-trained
//! representation. Their outputs are summed and squashed:
//! `score = sigmoid(wide(x) + deep(concat(x, g(x))))`.
//!
//! The pre-trained model can be attached two ways. `feature_based` freezes
//! it and uses it purely as a feature extractor; `fine_tune` lets ranking
//! gradients flow back into the extraction path (encoder heads, VAE mean
//! nets, the attention matrix). With `none` the ranker is a plain
//! wide-and-deep model over the raw features.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, AdamState, Matrix};
use crate::pretrain::{
    extract_backward, extract_representation, Affine, ModelParams, PretrainModel, Representation,
};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the pre-trained representation joins the ranker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    /// No representation; raw features only.
    None,
    /// Representation as frozen extra features.
    FeatureBased,
    /// Representation with gradients flowing into the extraction path.
    FineTune,
}

impl std::fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntegrationMode::None => "none",
            IntegrationMode::FeatureBased => "feature_based",
            IntegrationMode::FineTune => "fine_tune",
        })
    }
}

/// Ranker hyperparameters. `deep_layers` lists hidden widths; empty means a
/// wide-only linear model (which cannot consume a representation, so
/// integration must then be `none`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub deep_layers: Vec<usize>,
    pub integration: IntegrationMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            deep_layers: vec![64],
            integration: IntegrationMode::None,
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.001,
            seed: 42,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deep_layers.contains(&0) {
            return Err(Error::Config("deep layer widths must all be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.integration != IntegrationMode::None && self.deep_layers.is_empty() {
            return Err(Error::Config(
                "integration needs at least one deep layer to consume the representation".into(),
            ));
        }
        Ok(())
    }
}

/// One supervised example: assembled features and a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Trained (or initialized) wide-and-deep model. When a pre-trained model is
/// attached, `deep` reads `input_dim + hidden_dim` inputs; otherwise
/// `input_dim`. The final element of `deep` is the single-unit output layer.
#[derive(Debug, Clone)]
pub struct RankerModel {
    pub config: RankerConfig,
    pub input_dim: usize,
    pub wide_weights: Vec<f64>,
    pub wide_bias: f64,
    pub deep: Vec<Affine>,
    pub pretrain: Option<PretrainModel>,
}

struct RankerGrads {
    wide_weights: Vec<f64>,
    wide_bias: f64,
    deep: Vec<Affine>,
    pretrain: Option<ModelParams>,
}

impl RankerModel {
    /// Seeded initialization. Weights uniform in `[-0.05, 0.05]`, biases
    /// zero, drawn in flattening order (wide, then deep layers).
    pub fn init(
        config: &RankerConfig,
        input_dim: usize,
        pretrain: Option<PretrainModel>,
    ) -> Result<RankerModel> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("ranker input_dim must be >= 1".into()));
        }
        match (config.integration, &pretrain) {
            (IntegrationMode::None, Some(_)) => {
                return Err(Error::Config(
                    "integration mode none cannot attach a pre-trained model".into(),
                ))
            }
            (IntegrationMode::FeatureBased | IntegrationMode::FineTune, None) => {
                return Err(Error::Config(format!(
                    "integration mode {} requires a pre-trained model",
                    config.integration
                )))
            }
            _ => {}
        }
        let mut rng = crate::pretrain::rng_stream(config.seed, 0);
        let wide_weights: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-0.05..=0.05)).collect();
        let deep_in = match &pretrain {
            Some(p) => input_dim + p.config.hidden_dim,
            None => input_dim,
        };
        let mut deep = Vec::new();
        if !config.deep_layers.is_empty() {
            let mut prev = deep_in;
            for &width in &config.deep_layers {
                deep.push(Affine::init(width, prev, &mut rng));
                prev = width;
            }
            deep.push(Affine::init(1, prev, &mut rng));
        }
        Ok(RankerModel {
            config: config.clone(),
            input_dim,
            wide_weights,
            wide_bias: 0.0,
            deep,
            pretrain,
        })
    }

    fn deep_input_dim(&self) -> usize {
        match &self.pretrain {
            Some(p) => self.input_dim + p.config.hidden_dim,
            None => self.input_dim,
        }
    }

    fn fine_tunes(&self) -> bool {
        self.config.integration == IntegrationMode::FineTune
    }

    /// Number of optimizer-visible parameters: wide and deep always, plus
    /// the attached pre-trained parameters under `fine_tune`.
    pub fn param_count(&self) -> usize {
        let own = self.wide_weights.len()
            + 1
            + self
                .deep
                .iter()
                .map(|a| a.weight.values().len() + a.bias.len())
                .sum::<usize>();
        match (&self.pretrain, self.fine_tunes()) {
            (Some(p), true) => own + p.param_count(),
            _ => own,
        }
    }

    /// Optimizer-order flattening: wide weights, wide bias, deep layers, and
    /// (under `fine_tune`) the pre-trained parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.wide_weights);
        out.push(self.wide_bias);
        for a in &self.deep {
            out.extend_from_slice(a.weight.values());
            out.extend_from_slice(&a.bias);
        }
        if self.fine_tunes() {
            if let Some(p) = &self.pretrain {
                out.extend(p.flatten());
            }
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} entries, ranker has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = self.wide_weights.len();
        self.wide_weights.copy_from_slice(&flat[..pos]);
        self.wide_bias = flat[pos];
        pos += 1;
        for a in &mut self.deep {
            let w = a.weight.values_mut();
            w.copy_from_slice(&flat[pos..pos + w.len()]);
            pos += a.weight.values().len();
            let n = a.bias.len();
            a.bias.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        if self.fine_tunes() {
            if let Some(p) = &mut self.pretrain {
                p.unflatten(&flat[pos..])?;
            }
        }
        Ok(())
    }

    /// Named tensors for checkpointing. Pre-trained tensors (whenever a
    /// model is attached, regardless of mode) come prefixed `pretrain.`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![
            (
                "wide.weight".to_string(),
                vec![self.wide_weights.len()],
                self.wide_weights.clone(),
            ),
            ("wide.bias".to_string(), vec![1], vec![self.wide_bias]),
        ];
        for (i, a) in self.deep.iter().enumerate() {
            out.push((
                format!("deep.{i}.weight"),
                vec![a.weight.rows(), a.weight.cols()],
                a.weight.values().to_vec(),
            ));
            out.push((format!("deep.{i}.bias"), vec![a.bias.len()], a.bias.clone()));
        }
        if let Some(p) = &self.pretrain {
            for (name, dims, values) in p.tensors() {
                out.push((format!("pretrain.{name}"), dims, values));
            }
        }
        out
    }

    /// Rebuild from named tensors (checkpoint load).
    pub fn from_tensors(
        config: RankerConfig,
        input_dim: usize,
        pretrain_config: Option<crate::pretrain::PretrainConfig>,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<RankerModel> {
        let pretrain = match pretrain_config {
            Some(pc) => {
                let inner: BTreeMap<String, (Vec<usize>, Vec<f64>)> = tensors
                    .iter()
                    .filter_map(|(k, v)| {
                        k.strip_prefix("pretrain.").map(|n| (n.to_string(), v.clone()))
                    })
                    .collect();
                Some(PretrainModel::from_tensors(pc, &inner)?)
            }
            None => None,
        };
        let mut model = RankerModel::init(&config, input_dim, pretrain)?;
        let lookup = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
            let (got_dims, values) = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
            if got_dims != dims {
                return Err(Error::Dimension(format!(
                    "tensor {name}: expected shape {dims:?}, found {got_dims:?}"
                )));
            }
            Ok(values.clone())
        };
        model.wide_weights = lookup("wide.weight", &[input_dim])?;
        model.wide_bias = lookup("wide.bias", &[1])?[0];
        for i in 0..model.deep.len() {
            let dims = vec![model.deep[i].weight.rows(), model.deep[i].weight.cols()];
            let w = lookup(&format!("deep.{i}.weight"), &dims)?;
            model.deep[i].weight =
                Matrix::from_values(dims[0], dims[1], w)?;
            model.deep[i].bias = lookup(&format!("deep.{i}.bias"), &[dims[0]])?;
        }
        Ok(model)
    }

    /// Score a raw feature vector, extracting the representation from the
    /// attached pre-trained model when one is configured.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        match &self.pretrain {
            None => wide_deep_score(self, x, None),
            Some(p) => {
                let rep = extract_representation(p, x)?;
                wide_deep_score(self, x, Some(&rep))
            }
        }
    }
}

struct ForwardTrace {
    activations: Vec<Vec<f64>>,
    logit: f64,
}

fn forward(model: &RankerModel, x: &[f64], rep: Option<&[f64]>) -> Result<ForwardTrace> {
    if x.len() != model.input_dim {
        return Err(Error::Dimension(format!(
            "feature vector has {} entries, ranker expects {}",
            x.len(),
            model.input_dim
        )));
    }
    let mut logit = crate::numerics::dot(&model.wide_weights, x) + model.wide_bias;
    let mut activations = Vec::new();
    if !model.deep.is_empty() {
        let mut input = x.to_vec();
        if let Some(r) = rep {
            input.extend_from_slice(r);
        }
        if input.len() != model.deep_input_dim() {
            return Err(Error::Dimension(format!(
                "deep input has {} entries, expected {}",
                input.len(),
                model.deep_input_dim()
            )));
        }
        activations.push(input);
        let last = model.deep.len() - 1;
        for (i, layer) in model.deep.iter().enumerate() {
            let mut out = layer.apply(activations.last().unwrap())?;
            if i < last {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            activations.push(out);
        }
        logit += activations.last().unwrap()[0];
    }
    Ok(ForwardTrace { activations, logit })
}

/// Wide-and-deep score for an assembled feature vector and (when the
/// integration mode uses one) an already-extracted representation.
///
/// The result is clamped a hair inside `(0, 1)` so saturated logits cannot
/// produce an exact 0 or 1.
pub fn wide_deep_score(
    model: &RankerModel,
    x: &[f64],
    representation: Option<&Representation>,
) -> Result<f64> {
    match (model.config.integration, representation) {
        (IntegrationMode::None, Some(_)) => {
            return Err(Error::Config(
                "integration mode none does not take a representation".into(),
            ))
        }
        (IntegrationMode::FeatureBased | IntegrationMode::FineTune, None) => {
            return Err(Error::Config(format!(
                "integration mode {} requires a representation",
                model.config.integration
            )))
        }
        _ => {}
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature vector contains a non-finite value".into()));
    }
    let trace = forward(model, x, representation.map(|r| r.values.as_slice()))?;
    Ok(sigmoid(trace.logit).clamp(1e-12, 1.0 - 1e-12))
}

/// Numerically stable binary cross-entropy from the logit:
/// `max(l, 0) - l y + ln(1 + exp(-|l|))`.
fn bce_from_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

fn validate_examples(examples: &[LabeledExample], input_dim: usize) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.label != 0.0 && ex.label != 1.0 {
            return Err(Error::Data(format!(
                "example {i} has label {}, labels must be 0 or 1",
                ex.label
            )));
        }
        if ex.features.len() != input_dim {
            return Err(Error::Dimension(format!(
                "example {i} has {} features, expected {input_dim}",
                ex.features.len()
            )));
        }
        if ex.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "example {i} contains a non-finite feature"
            )));
        }
    }
    Ok(())
}

fn zero_grads(model: &RankerModel) -> RankerGrads {
    RankerGrads {
        wide_weights: vec![0.0; model.wide_weights.len()],
        wide_bias: 0.0,
        deep: model
            .deep
            .iter()
            .map(|a| Affine::zeros(a.weight.rows(), a.weight.cols()))
            .collect(),
        pretrain: match (&model.pretrain, model.fine_tunes()) {
            (Some(p), true) => Some(p.params.zeros_like()),
            _ => None,
        },
    }
}

fn flatten_grads(model: &RankerModel, grads: &RankerGrads) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    out.extend_from_slice(&grads.wide_weights);
    out.push(grads.wide_bias);
    for a in &grads.deep {
        out.extend_from_slice(a.weight.values());
        out.extend_from_slice(&a.bias);
    }
    if let (Some(gp), Some(p)) = (&grads.pretrain, &model.pretrain) {
        out.extend(
            PretrainModel {
                config: p.config.clone(),
                params: gp.clone(),
            }
            .flatten(),
        );
    }
    out
}

/// Forward + backward on one example; accumulates into `grads`, returns the
/// example's BCE loss.
fn example_grad(model: &RankerModel, ex: &LabeledExample, grads: &mut RankerGrads) -> Result<f64> {
    let rep = match &model.pretrain {
        Some(p) => Some(extract_representation(p, &ex.features)?),
        None => None,
    };
    let trace = forward(
        model,
        &ex.features,
        rep.as_ref().map(|r| r.values.as_slice()),
    )?;
    let loss = bce_from_logit(trace.logit, ex.label);
    let d_logit = sigmoid(trace.logit) - ex.label;

    for (g, xv) in grads.wide_weights.iter_mut().zip(&ex.features) {
        *g += d_logit * xv;
    }
    grads.wide_bias += d_logit;

    if !model.deep.is_empty() {
        let mut d_out = vec![d_logit];
        let last = model.deep.len() - 1;
        for i in (0..model.deep.len()).rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            // hidden layers are ReLU; the output layer is linear
            let d_pre: Vec<f64> = if i == last {
                d_out.clone()
            } else {
                d_out
                    .iter()
                    .zip(output)
                    .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                    .collect()
            };
            grads.deep[i].weight.add_outer(&d_pre, input);
            for (b, g) in grads.deep[i].bias.iter_mut().zip(&d_pre) {
                *b += g;
            }
            let mut d_in = vec![0.0; input.len()];
            model.deep[i].weight.matvec_transpose_into(&d_pre, &mut d_in);
            d_out = d_in;
        }
        if let (Some(gp), Some(p)) = (&mut grads.pretrain, &model.pretrain) {
            let d_rep = &d_out[model.input_dim..];
            extract_backward(p, &ex.features, d_rep, gp)?;
        }
    }
    Ok(loss)
}

/// Mean BCE loss of a model over examples, without touching parameters.
pub fn mean_loss(model: &RankerModel, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    validate_examples(examples, model.input_dim)?;
    let mut total = 0.0;
    for ex in examples {
        let rep = match &model.pretrain {
            Some(p) => Some(extract_representation(p, &ex.features)?),
            None => None,
        };
        let trace = forward(model, &ex.features, rep.as_ref().map(|r| r.values.as_slice()))?;
        total += bce_from_logit(trace.logit, ex.label);
    }
    Ok(total / examples.len() as f64)
}

/// Mean-BCE gradient over examples, flattened in optimizer order. The hook
/// the gradient-check tests drive.
pub fn analytic_grad(model: &RankerModel, examples: &[LabeledExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to differentiate".into()));
    }
    validate_examples(examples, model.input_dim)?;
    let mut grads = zero_grads(model);
    for ex in examples {
        example_grad(model, ex, &mut grads)?;
    }
    let mut flat = flatten_grads(model, &grads);
    let scale = 1.0 / examples.len() as f64;
    for g in &mut flat {
        *g *= scale;
    }
    Ok(flat)
}

/// Mini-batch Adam training of the ranker on binary labels.
///
/// `feature_based` leaves the attached pre-trained parameters bit-identical;
/// `fine_tune` updates the parameters on the extraction path. Deterministic
/// under a fixed config seed. Returns the model and the per-epoch mean BCE
/// trace.
pub fn fit(
    config: &RankerConfig,
    train: &[LabeledExample],
    pretrained: Option<&PretrainModel>,
) -> Result<(RankerModel, Vec<f64>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let input_dim = train[0].features.len();
    validate_examples(train, input_dim)?;
    let mut model = RankerModel::init(config, input_dim, pretrained.cloned())?;

    let mut data_rng = crate::pretrain::rng_stream(config.seed, 1);
    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut data_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = zero_grads(&model);
            for &i in batch {
                epoch_loss += example_grad(&model, &train[i], &mut grads)?;
            }
            let mut g_flat = flatten_grads(&model, &grads);
            let scale = 1.0 / batch.len() as f64;
            for g in &mut g_flat {
                *g *= scale;
            }
            adam.step(&mut flat, &g_flat)?;
            model.unflatten(&flat)?;
        }
        trace.push(epoch_loss / train.len() as f64);
    }
    Ok((model, trace))
}
