//! Prompt state, optimizers, and episodic per-sample tuning.
//!
//! A prompt holds learnable prefix tokens shared across all classes plus
//! frozen attribute and class tokens. Tuning a sample never leaks state into
//! the next sample: each episode starts from the initial prompt.

use serde::{Deserialize, Serialize};

use crate::embed::{augment, AugmentationConfig, EmbeddingVector, Encoder, TokenEmbedding};
use crate::error::{Error, Result};
use crate::objective::{
    class_probabilities, encode_prompt, evaluate_prompt, mean_retained_probs, ClassifierConfig,
    LossBreakdown, LossWeights, ProbVector,
};

/// Prompt template used when no ensemble is requested.
pub const DEFAULT_TEMPLATE: &str = "a photo of a";

/// Hard-prompt templates averaged by the ensemble path.
pub const ENSEMBLE_TEMPLATES: [&str; 4] = [
    "a photo of a",
    "a photo of the",
    "a picture of a",
    "a picture of the",
];

/// Frozen token material for one class: its name tokens and one token
/// sequence per selected attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompt {
    pub class_name: String,
    pub class_tokens: Vec<TokenEmbedding>,
    pub attribute_segments: Vec<AttributeSegment>,
}

/// One attribute's token sequence. Empty for attribute-free prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSegment {
    pub text: String,
    pub tokens: Vec<TokenEmbedding>,
}

/// Learnable prefix tokens plus frozen per-class token material.
///
/// Sequence (i, j) is prefix ++ attribute_segments[j] ++ class_tokens of
/// class i. Frozen slots order as: per class, its attribute segment tokens
/// then its class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    prefix: Vec<TokenEmbedding>,
    classes: Vec<ClassPrompt>,
    d_tok: usize,
}

impl PromptState {
    pub fn prefix(&self) -> &[TokenEmbedding] {
        &self.prefix
    }

    pub fn classes(&self) -> &[ClassPrompt] {
        &self.classes
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Attribute segments for class `i`.
    pub fn n_segments(&self, i: usize) -> usize {
        self.classes[i].attribute_segments.len()
    }

    /// Token vectors of sequence (i, j) in prompt order.
    pub fn sequence_vectors(&self, i: usize, j: usize) -> impl Iterator<Item = &EmbeddingVector> {
        let class = &self.classes[i];
        self.prefix
            .iter()
            .chain(class.attribute_segments[j].tokens.iter())
            .chain(class.class_tokens.iter())
            .map(|t| &t.vector)
    }

    /// Number of frozen token slots across all classes.
    pub fn frozen_slot_count(&self) -> usize {
        self.classes
            .iter()
            .map(|c| {
                c.class_tokens.len()
                    + c.attribute_segments
                        .iter()
                        .map(|s| s.tokens.len())
                        .sum::<usize>()
            })
            .sum()
    }

    /// Bit pattern of every frozen token vector, for stability checks.
    pub fn frozen_bits(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        for c in &self.classes {
            for s in &c.attribute_segments {
                for t in &s.tokens {
                    bits.extend(t.vector.values().iter().map(|v| v.to_bits()));
                }
            }
            for t in &c.class_tokens {
                bits.extend(t.vector.values().iter().map(|v| v.to_bits()));
            }
        }
        bits
    }

    /// Adds `delta` to one prefix token coordinate.
    pub fn nudge_prefix(&mut self, token: usize, coord: usize, delta: f64) {
        self.prefix[token].vector.values_mut()[coord] += delta;
    }

    pub(crate) fn prefix_mut(&mut self) -> &mut [TokenEmbedding] {
        &mut self.prefix
    }
}

fn build_classes(
    classes: &[String],
    attributes_per_class: Option<&[Vec<String>]>,
    encoder: &Encoder,
) -> Result<Vec<ClassPrompt>> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no classes for the prompt".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(classes.len());
    for (i, name) in classes.iter().enumerate() {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate class name {name:?}"
            )));
        }
        let class_tokens = encoder.tokenize_phrase(name, true)?;
        let attribute_segments = match attributes_per_class {
            Some(all) => {
                let attrs = &all[i];
                if attrs.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "class {name:?} has no selected attributes"
                    )));
                }
                attrs
                    .iter()
                    .map(|a| {
                        Ok(AttributeSegment {
                            text: a.clone(),
                            tokens: encoder.tokenize_phrase(a, true)?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            None => vec![AttributeSegment {
                text: String::new(),
                tokens: Vec::new(),
            }],
        };
        out.push(ClassPrompt {
            class_name: name.clone(),
            class_tokens,
            attribute_segments,
        });
    }
    Ok(out)
}

/// Builds a prompt with one segment per selected attribute (M >= 1 each).
///
/// The template words become the learnable prefix; attribute and class
/// tokens are frozen.
pub fn init_prompt(
    template: &str,
    classes: &[String],
    attributes_per_class: &[Vec<String>],
    encoder: &Encoder,
) -> Result<PromptState> {
    if classes.len() != attributes_per_class.len() {
        return Err(Error::InvalidArgument(format!(
            "{} classes but {} attribute lists",
            classes.len(),
            attributes_per_class.len()
        )));
    }
    Ok(PromptState {
        prefix: encoder.tokenize_phrase(template, false)?,
        classes: build_classes(classes, Some(attributes_per_class), encoder)?,
        d_tok: encoder.config().d_tok,
    })
}

/// Builds an attribute-free prompt: one empty segment per class, so each
/// class contributes the single sequence prefix ++ class tokens.
pub fn init_prompt_plain(
    template: &str,
    classes: &[String],
    encoder: &Encoder,
) -> Result<PromptState> {
    Ok(PromptState {
        prefix: encoder.tokenize_phrase(template, false)?,
        classes: build_classes(classes, None, encoder)?,
        d_tok: encoder.config().d_tok,
    })
}

/// Update rule for the prefix tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam moments with bias correction and decoupled weight decay.
    AdaptiveMomentsDecoupledDecay,
    /// theta -= lr * grad. Ignores the moment and decay settings.
    PlainGradientDescent,
}

/// Hyperparameters for episodic tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    pub learning_rate: f64,
    pub n_steps: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Fraction of views the confidence filter retains.
    pub rho: f64,
    pub n_views: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            n_steps: 1,
            optimizer: OptimizerKind::AdaptiveMomentsDecoupledDecay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            rho: 0.1,
            n_views: 64,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !self.rho.is_finite() || self.rho <= 0.0 || self.rho > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.n_views == 0 {
            return Err(Error::InvalidArgument("n_views must be >= 1".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl OptimizerState {
    pub fn new(tokens: usize, dim: usize) -> Self {
        Self {
            m: vec![vec![0.0; dim]; tokens],
            v: vec![vec![0.0; dim]; tokens],
            t: 0,
        }
    }

    /// Applies one update to the given tokens in place.
    pub fn step(
        &mut self,
        params: &mut [TokenEmbedding],
        grads: &[Vec<f64>],
        cfg: &TunerConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer shapes disagree: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        match cfg.optimizer {
            OptimizerKind::AdaptiveMomentsDecoupledDecay => {
                self.t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
                for (l, p) in params.iter_mut().enumerate() {
                    let theta = p.vector.values_mut();
                    for c in 0..theta.len() {
                        let g = grads[l][c];
                        self.m[l][c] = cfg.beta1 * self.m[l][c] + (1.0 - cfg.beta1) * g;
                        self.v[l][c] = cfg.beta2 * self.v[l][c] + (1.0 - cfg.beta2) * g * g;
                        let m_hat = self.m[l][c] / bc1;
                        let v_hat = self.v[l][c] / bc2;
                        theta[c] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
                            + cfg.learning_rate * cfg.weight_decay * theta[c];
                    }
                }
            }
            OptimizerKind::PlainGradientDescent => {
                for (l, p) in params.iter_mut().enumerate() {
                    let theta = p.vector.values_mut();
                    for c in 0..theta.len() {
                        theta[c] -= cfg.learning_rate * grads[l][c];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared read-only pieces of one tuning episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeContext<'a> {
    pub encoder: &'a Encoder,
    pub classifier: &'a ClassifierConfig,
}

/// Result of tuning one sample.
#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub prompt: PromptState,
    /// Loss at each step, evaluated before that step's update.
    pub history: Vec<LossBreakdown>,
    /// Mean retained-view prediction of the tuned prompt.
    pub final_probs: ProbVector,
    /// Loss terms of the tuned prompt; its gradient is unused.
    pub final_breakdown: LossBreakdown,
}

/// Tunes the prefix tokens on one raw feature and returns the tuned prompt.
///
/// Starts from a fresh optimizer state; the caller passes the same initial
/// prompt for every sample to keep episodes independent.
pub fn tune_on_sample(
    raw_feature: &EmbeddingVector,
    initial: &PromptState,
    cfg: &TunerConfig,
    aug: &AugmentationConfig,
    weights: &LossWeights,
    ctx: &EpisodeContext,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if aug.n_views != cfg.n_views {
        return Err(Error::InvalidArgument(format!(
            "augmentation produces {} views but the tuner expects {}",
            aug.n_views, cfg.n_views
        )));
    }
    let views = ctx.encoder.encode_images(&augment(raw_feature, aug)?)?;
    let mut state = initial.clone();
    let mut opt = OptimizerState::new(state.prefix_len(), state.d_tok);
    let mut history = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let eval = evaluate_prompt(
            &state,
            ctx.encoder,
            &views,
            ctx.classifier,
            cfg.rho,
            weights,
        )?;
        if let Err(reason) = eval.breakdown.check_finite() {
            return Err(Error::Numeric { step, reason });
        }
        opt.step(state.prefix_mut(), &eval.breakdown.grad.prefix, cfg)?;
        history.push(eval.breakdown);
    }
    let eval = evaluate_prompt(
        &state,
        ctx.encoder,
        &views,
        ctx.classifier,
        cfg.rho,
        weights,
    )?;
    if let Err(reason) = eval.breakdown.check_finite() {
        return Err(Error::Numeric {
            step: cfg.n_steps,
            reason,
        });
    }
    let final_probs = mean_retained_probs(&eval.view_probs, &eval.breakdown.retained)?;
    Ok(TuneOutcome {
        prompt: state,
        history,
        final_probs,
        final_breakdown: eval.breakdown,
    })
}

/// Zero-shot prediction for one raw feature.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
    pub probs: ProbVector,
}

/// Classifies the unaugmented feature with the given prompt.
pub fn predict(
    raw_feature: &EmbeddingVector,
    prompt: &PromptState,
    ctx: &EpisodeContext,
) -> Result<Prediction> {
    let x = ctx.encoder.encode_image(raw_feature)?;
    let encoding = encode_prompt(prompt, ctx.encoder)?;
    let probs = class_probabilities(&x, &encoding.class_embeds, ctx.classifier)?;
    let label = probs.argmax();
    Ok(Prediction {
        label,
        confidence: probs.values()[label],
        probs,
    })
}

/// The hard-prompt templates an ensemble averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub templates: Vec<String>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            templates: ENSEMBLE_TEMPLATES.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// Averages pre-softmax logits across per-template prompts, then applies
/// one softmax. Prompts must align one-to-one with `spec.templates`.
pub fn ensemble_predict(
    raw_feature: &EmbeddingVector,
    spec: &EnsembleSpec,
    prompts: &[PromptState],
    ctx: &EpisodeContext,
) -> Result<Prediction> {
    if spec.templates.is_empty() {
        return Err(Error::InvalidArgument("ensemble has no templates".into()));
    }
    if spec.templates.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} templates but {} tuned prompts",
            spec.templates.len(),
            prompts.len()
        )));
    }
    let k = ctx.classifier.n_classes;
    let x = ctx.encoder.encode_image(raw_feature)?;
    let mut logits = vec![0.0; k];
    for prompt in prompts {
        if prompt.n_classes() != k {
            return Err(Error::InvalidArgument(format!(
                "prompt encodes {} classes, classifier expects {k}",
                prompt.n_classes()
            )));
        }
        let encoding = encode_prompt(prompt, ctx.encoder)?;
        for (acc, u) in logits.iter_mut().zip(&encoding.class_embeds) {
            *acc += x.dot(u)? / ctx.classifier.temperature;
        }
    }
    let t = prompts.len() as f64;
    for l in logits.iter_mut() {
        *l /= t;
    }
    let probs = ProbVector::new(crate::objective::softmax(&logits))?;
    let label = probs.argmax();
    Ok(Prediction {
        label,
        confidence: probs.values()[label],
        probs,
    })
}
