//! Loss terms for test-time prompt tuning: retained-view entropy, intra-class
//! text contraction, inter-class text dispersion, and their weighted total
//! with an analytic gradient through the text encoder.

use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingVector, Encoder, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::tuner::PromptState;

/// Softmax temperature and class count for the zero-shot classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub temperature: f64,
    pub n_classes: usize,
}

impl ClassifierConfig {
    pub fn new(temperature: f64, n_classes: usize) -> Result<Self> {
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and > 0, got {temperature}"
            )));
        }
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be >= 1".into()));
        }
        Ok(Self {
            temperature,
            n_classes,
        })
    }
}

/// Probability vector over classes: entries in [0, 1] summing to 1 (±1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    values: Vec<f64>,
}

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for v in &values {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "probability entry {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate().skip(1) {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax (max subtraction, exact unit sum).
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over cosine similarities divided by temperature.
///
/// All inputs must be unit-norm, so cosine reduces to the dot product.
pub fn class_probabilities(
    image_embed: &EmbeddingVector,
    text_embeds: &[EmbeddingVector],
    cfg: &ClassifierConfig,
) -> Result<ProbVector> {
    if text_embeds.len() != cfg.n_classes {
        return Err(Error::InvalidArgument(format!(
            "expected {} class embeddings, got {}",
            cfg.n_classes,
            text_embeds.len()
        )));
    }
    if (image_embed.norm() - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidArgument(format!(
            "image embedding norm {} is not 1",
            image_embed.norm()
        )));
    }
    let logits: Vec<f64> = text_embeds
        .iter()
        .map(|t| {
            if (t.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "text embedding norm {} is not 1",
                    t.norm()
                )));
            }
            Ok(image_embed.dot(t)? / cfg.temperature)
        })
        .collect::<Result<_>>()?;
    ProbVector::new(softmax(&logits))
}

/// Shannon entropy in nats, with 0 ln 0 = 0. Range [0, ln K].
pub fn entropy(p: &ProbVector) -> f64 {
    p.values()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

/// Indices (ascending) of the ceil(rho * N) lowest-entropy views.
///
/// Entropy ties keep the lower view index. At least one view is retained.
pub fn confidence_filter(view_probs: &[ProbVector], rho: f64) -> Result<Vec<usize>> {
    if view_probs.is_empty() {
        return Err(Error::InvalidArgument("no views to filter".into()));
    }
    if !rho.is_finite() || rho <= 0.0 || rho > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    let n = view_probs.len();
    let keep = ((rho * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<(f64, usize)> = view_probs
        .iter()
        .enumerate()
        .map(|(i, p)| (entropy(p), i))
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).expect("entropies are finite"));
    let mut retained: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    retained.sort_unstable();
    Ok(retained)
}

/// Mean probability vector over the retained views.
pub fn mean_retained_probs(view_probs: &[ProbVector], retained: &[usize]) -> Result<ProbVector> {
    if retained.is_empty() {
        return Err(Error::InvalidArgument("retained set is empty".into()));
    }
    let dim = view_probs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no views".into()))?
        .dim();
    let mut mean = vec![0.0; dim];
    for &v in retained {
        let p = view_probs
            .get(v)
            .ok_or_else(|| Error::InvalidArgument(format!("view index {v} out of range")))?;
        for (m, x) in mean.iter_mut().zip(p.values()) {
            *m += x;
        }
    }
    let k = retained.len() as f64;
    for m in mean.iter_mut() {
        *m /= k;
    }
    // Clamp float drift so the mean re-validates as a distribution.
    let sum: f64 = mean.iter().sum();
    ProbVector::new(
        mean.into_iter()
            .map(|m| (m / sum).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Entropy of the average prediction over the retained views.
pub fn tpt_loss(view_probs: &[ProbVector], retained: &[usize]) -> Result<f64> {
    Ok(entropy(&mean_retained_probs(view_probs, retained)?))
}

/// Per-class text embeddings with their class means and the grand mean.
#[derive(Debug, Clone)]
pub struct ClassTextSet {
    per_class: Vec<Vec<EmbeddingVector>>,
    class_means: Vec<EmbeddingVector>,
    grand_mean: EmbeddingVector,
}

impl ClassTextSet {
    /// Builds means from per-class embedding lists. Every class needs at
    /// least one embedding and all embeddings must share one dimension.
    pub fn new(per_class: Vec<Vec<EmbeddingVector>>) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::InvalidArgument("no classes".into()));
        }
        let dim = per_class
            .first()
            .and_then(|c| c.first())
            .map(EmbeddingVector::dim)
            .ok_or_else(|| Error::InvalidArgument("class 0 has no embeddings".into()))?;
        let mut class_means = Vec::with_capacity(per_class.len());
        for (i, embeds) in per_class.iter().enumerate() {
            if embeds.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "class {i} has no embeddings"
                )));
            }
            let mut mean = vec![0.0; dim];
            for e in embeds {
                if e.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: e.dim(),
                    });
                }
                for (m, v) in mean.iter_mut().zip(e.values()) {
                    *m += v;
                }
            }
            let k = embeds.len() as f64;
            class_means.push(EmbeddingVector::new(
                mean.into_iter().map(|m| m / k).collect(),
            )?);
        }
        let mut grand = vec![0.0; dim];
        for m in &class_means {
            for (g, v) in grand.iter_mut().zip(m.values()) {
                *g += v;
            }
        }
        let kk = class_means.len() as f64;
        let grand_mean = EmbeddingVector::new(grand.into_iter().map(|g| g / kk).collect())?;
        Ok(Self {
            per_class,
            class_means,
            grand_mean,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn per_class(&self) -> &[Vec<EmbeddingVector>] {
        &self.per_class
    }

    pub fn class_means(&self) -> &[EmbeddingVector] {
        &self.class_means
    }

    pub fn grand_mean(&self) -> &EmbeddingVector {
        &self.grand_mean
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean L2 distance of one class's embeddings from their class mean.
pub fn mtas(set: &ClassTextSet, class_index: usize) -> Result<f64> {
    let embeds = set
        .per_class
        .get(class_index)
        .ok_or_else(|| Error::InvalidArgument(format!("class index {class_index} out of range")))?;
    let mean = set.class_means[class_index].values();
    let total: f64 = embeds.iter().map(|e| l2_distance(e.values(), mean)).sum();
    Ok(total / embeds.len() as f64)
}

/// Mean of MTAS over all classes; the intra-class contraction loss.
pub fn intra_class_loss(set: &ClassTextSet) -> Result<f64> {
    let k = set.n_classes();
    let mut total = 0.0;
    for i in 0..k {
        total += mtas(set, i)?;
    }
    Ok(total / k as f64)
}

/// Mean L2 distance of class means from the grand mean. One class gives 0.
pub fn atfd(set: &ClassTextSet) -> Result<f64> {
    let grand = set.grand_mean.values();
    let total: f64 = set
        .class_means
        .iter()
        .map(|m| l2_distance(m.values(), grand))
        .sum();
    Ok(total / set.n_classes() as f64)
}

/// Weights for the dispersion (alpha) and contraction (beta) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

/// l_total = l_tpt + alpha * l_inter + beta * l_intra, with l_inter = -ATFD.
pub fn combine_losses(l_tpt: f64, atfd_value: f64, l_intra: f64, w: &LossWeights) -> (f64, f64) {
    let l_inter = -atfd_value;
    (l_inter, l_tpt + w.alpha * l_inter + w.beta * l_intra)
}

/// Gradient of the total loss with respect to the prompt token table.
///
/// `prefix` rows follow the learnable prefix tokens; `frozen` rows follow the
/// frozen attribute and class token slots in prompt order and are exactly zero.
#[derive(Debug, Clone)]
pub struct PromptGradient {
    pub prefix: Vec<Vec<f64>>,
    pub frozen: Vec<Vec<f64>>,
}

/// Forward pass of the prompt through the text encoder, with the caches the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    /// Unit text embedding g(t_ij) per (class, attribute segment).
    pub text_embeds: Vec<Vec<EmbeddingVector>>,
    /// The same embeddings grouped with their means.
    pub class_set: ClassTextSet,
    /// Unit-normalized class means; the classifier's per-class embeddings.
    pub class_embeds: Vec<EmbeddingVector>,
    z_norms: Vec<Vec<f64>>,
    mean_norms: Vec<f64>,
    seq_lens: Vec<Vec<usize>>,
}

/// Encodes every (class, attribute segment) sequence of the prompt.
pub fn encode_prompt(prompt: &PromptState, encoder: &Encoder) -> Result<PromptEncoding> {
    if prompt.n_classes() == 0 {
        return Err(Error::InvalidArgument("prompt has no classes".into()));
    }
    let mut text_embeds = Vec::with_capacity(prompt.n_classes());
    let mut z_norms = Vec::with_capacity(prompt.n_classes());
    let mut seq_lens = Vec::with_capacity(prompt.n_classes());
    for i in 0..prompt.n_classes() {
        let m = prompt.n_segments(i);
        let mut class_embeds = Vec::with_capacity(m);
        let mut class_norms = Vec::with_capacity(m);
        let mut class_lens = Vec::with_capacity(m);
        for j in 0..m {
            let vectors: Vec<&EmbeddingVector> = prompt.sequence_vectors(i, j).collect();
            let (g, nz) = encoder.encode_vectors(vectors.iter().copied())?;
            class_lens.push(vectors.len());
            class_embeds.push(g);
            class_norms.push(nz);
        }
        text_embeds.push(class_embeds);
        z_norms.push(class_norms);
        seq_lens.push(class_lens);
    }
    let class_set = ClassTextSet::new(text_embeds.clone())?;
    let mut class_embeds = Vec::with_capacity(class_set.n_classes());
    let mut mean_norms = Vec::with_capacity(class_set.n_classes());
    for mean in class_set.class_means() {
        mean_norms.push(mean.norm());
        class_embeds.push(mean.normalized().map_err(|_| {
            Error::DegenerateInput("class mean text embedding has zero norm".into())
        })?);
    }
    Ok(PromptEncoding {
        text_embeds,
        class_set,
        class_embeds,
        z_norms,
        mean_norms,
        seq_lens,
    })
}

/// Class probabilities for each view against the encoded prompt.
pub fn view_probabilities(
    encoding: &PromptEncoding,
    views: &[EmbeddingVector],
    cfg: &ClassifierConfig,
) -> Result<Vec<ProbVector>> {
    views
        .iter()
        .map(|v| class_probabilities(v, &encoding.class_embeds, cfg))
        .collect()
}

/// All loss terms at the current prompt plus the analytic prompt gradient.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_tpt: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_total: f64,
    pub grad: PromptGradient,
    /// View indices the entropy term averaged over.
    pub retained: Vec<usize>,
}

impl LossBreakdown {
    pub fn atfd(&self) -> f64 {
        -self.l_inter
    }

    pub fn mean_mtas(&self) -> f64 {
        self.l_intra
    }

    /// Returns the first non-finite quantity as an error reason.
    pub fn check_finite(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("l_tpt", self.l_tpt),
            ("l_inter", self.l_inter),
            ("l_intra", self.l_intra),
            ("l_total", self.l_total),
        ] {
            if !v.is_finite() {
                return Err(format!("{name} is {v}"));
            }
        }
        for row in &self.grad.prefix {
            if let Some(bad) = row.iter().find(|g| !g.is_finite()) {
                return Err(format!("prefix gradient entry is {bad}"));
            }
        }
        Ok(())
    }
}

/// Evaluation of one prompt against one set of views: forward, filter, loss.
#[derive(Debug, Clone)]
pub struct PromptEvaluation {
    pub encoding: PromptEncoding,
    pub view_probs: Vec<ProbVector>,
    pub breakdown: LossBreakdown,
}

/// Encodes the prompt, scores the views, applies the confidence filter, and
/// computes the total loss with its gradient.
pub fn evaluate_prompt(
    prompt: &PromptState,
    encoder: &Encoder,
    views: &[EmbeddingVector],
    classifier: &ClassifierConfig,
    rho: f64,
    weights: &LossWeights,
) -> Result<PromptEvaluation> {
    let encoding = encode_prompt(prompt, encoder)?;
    let view_probs = view_probabilities(&encoding, views, classifier)?;
    let retained = confidence_filter(&view_probs, rho)?;
    let breakdown = loss_with(
        prompt,
        encoder,
        &encoding,
        views,
        &view_probs,
        &retained,
        classifier,
        weights,
    )?;
    Ok(PromptEvaluation {
        encoding,
        view_probs,
        breakdown,
    })
}

/// Total loss and gradient for a fixed retained-view set.
///
/// The retained set is an input, not re-derived, so finite-difference checks
/// against this function are well defined.
pub fn total_loss(
    prompt: &PromptState,
    encoder: &Encoder,
    views: &[EmbeddingVector],
    retained: &[usize],
    classifier: &ClassifierConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let encoding = encode_prompt(prompt, encoder)?;
    let view_probs = view_probabilities(&encoding, views, classifier)?;
    loss_with(
        prompt,
        encoder,
        &encoding,
        views,
        &view_probs,
        retained,
        classifier,
        weights,
    )
}

#[allow(clippy::too_many_arguments)]
fn loss_with(
    prompt: &PromptState,
    encoder: &Encoder,
    encoding: &PromptEncoding,
    views: &[EmbeddingVector],
    view_probs: &[ProbVector],
    retained: &[usize],
    classifier: &ClassifierConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if views.len() != view_probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} views but {} probability vectors",
            views.len(),
            view_probs.len()
        )));
    }
    let k = encoding.class_set.n_classes();
    if k != classifier.n_classes {
        return Err(Error::InvalidArgument(format!(
            "prompt encodes {k} classes, classifier expects {}",
            classifier.n_classes
        )));
    }
    let d = encoder.config().d_embed;

    let p_bar = mean_retained_probs(view_probs, retained)?;
    let l_tpt = entropy(&p_bar);
    let atfd_value = atfd(&encoding.class_set)?;
    let l_intra = intra_class_loss(&encoding.class_set)?;
    let (l_inter, l_total) = combine_losses(l_tpt, atfd_value, l_intra, weights);

    // Reverse pass. Accumulators per graph node, propagated in topological
    // order: u_i and grand mean feed class means, class means feed per-segment
    // embeddings, embeddings feed the shared prefix tokens.
    let mut g_u = vec![vec![0.0; d]; k];
    let mut g_mean = vec![vec![0.0; d]; k];
    let mut g_grand = vec![0.0; d];
    let mut g_embed: Vec<Vec<Vec<f64>>> = encoding
        .text_embeds
        .iter()
        .map(|c| vec![vec![0.0; d]; c.len()])
        .collect();

    // Entropy of the retained mean: dL/dp_bar -> softmax -> similarities.
    let r = retained.len() as f64;
    let d_p_bar: Vec<f64> = p_bar
        .values()
        .iter()
        .map(|&p| -(p.max(f64::MIN_POSITIVE).ln() + 1.0))
        .collect();
    for &v in retained {
        let p_v = view_probs[v].values();
        let d_p: Vec<f64> = d_p_bar.iter().map(|g| g / r).collect();
        let inner: f64 = d_p.iter().zip(p_v).map(|(a, b)| a * b).sum();
        let x_v = views[v].values();
        for c in 0..k {
            let d_logit = p_v[c] * (d_p[c] - inner);
            let d_sim = d_logit / classifier.temperature;
            for (gu, x) in g_u[c].iter_mut().zip(x_v) {
                *gu += d_sim * x;
            }
        }
    }

    // Dispersion term: atfd = mean_i |grand - mean_i|, weighted by -alpha.
    let grand = encoding.class_set.grand_mean().values();
    for (gm_i, mean_i) in g_mean.iter_mut().zip(encoding.class_set.class_means()) {
        let diff: Vec<f64> = grand
            .iter()
            .zip(mean_i.values())
            .map(|(g, m)| g - m)
            .collect();
        let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            let scale = weights.alpha / (k as f64 * n);
            for ((gm, gg), x) in gm_i.iter_mut().zip(g_grand.iter_mut()).zip(&diff) {
                *gm += scale * x;
                *gg -= scale * x;
            }
        }
    }

    // Contraction term: mean_i mean_j |g_ij - mean_i|, weighted by +beta.
    for i in 0..k {
        let m_i = encoding.text_embeds[i].len() as f64;
        let mean_i = encoding.class_set.class_means()[i].values();
        for (j, e) in encoding.text_embeds[i].iter().enumerate() {
            let diff: Vec<f64> = e.values().iter().zip(mean_i).map(|(g, m)| g - m).collect();
            let n = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                let scale = weights.beta / (k as f64 * m_i * n);
                for ((ge, gm), x) in g_embed[i][j]
                    .iter_mut()
                    .zip(g_mean[i].iter_mut())
                    .zip(&diff)
                {
                    *ge += scale * x;
                    *gm -= scale * x;
                }
            }
        }
    }

    // u_i = mean_i / |mean_i|.
    for i in 0..k {
        let u = encoding.class_embeds[i].values();
        let nt = encoding.mean_norms[i];
        let dot: f64 = g_u[i].iter().zip(u).map(|(a, b)| a * b).sum();
        for ((gm, gu), ui) in g_mean[i].iter_mut().zip(&g_u[i]).zip(u) {
            *gm += (gu - dot * ui) / nt;
        }
    }

    // Grand mean is the mean of class means.
    for gm in g_mean.iter_mut() {
        for (m, g) in gm.iter_mut().zip(&g_grand) {
            *m += g / k as f64;
        }
    }

    // Class mean is the mean of its segment embeddings.
    for ((rows_i, gm_i), segs) in g_embed.iter_mut().zip(&g_mean).zip(&encoding.text_embeds) {
        let m_i = segs.len() as f64;
        for row in rows_i.iter_mut() {
            for (ge, gm) in row.iter_mut().zip(gm_i) {
                *ge += gm / m_i;
            }
        }
    }

    // Through normalization and projection back to the shared prefix tokens.
    // Every token in a sequence receives the same mean-pool gradient share.
    let prefix_len = prompt.prefix_len();
    let d_tok = encoder.config().d_tok;
    let mut g_prefix_shared = vec![0.0; d_tok];
    for (i, rows_i) in g_embed.iter().enumerate() {
        for (j, ge) in rows_i.iter().enumerate() {
            let g_ij = encoding.text_embeds[i][j].values();
            let nz = encoding.z_norms[i][j];
            let dot: f64 = ge.iter().zip(g_ij).map(|(a, b)| a * b).sum();
            let gz: Vec<f64> = ge
                .iter()
                .zip(g_ij)
                .map(|(g, u)| (g - dot * u) / nz)
                .collect();
            let gm_tok = encoder.text_projection().apply_transpose(&gz);
            let n_ij = encoding.seq_lens[i][j] as f64;
            for (acc, g) in g_prefix_shared.iter_mut().zip(&gm_tok) {
                *acc += g / n_ij;
            }
        }
    }
    let grad = PromptGradient {
        prefix: vec![g_prefix_shared; prefix_len],
        frozen: vec![vec![0.0; d_tok]; prompt.frozen_slot_count()],
    };

    Ok(LossBreakdown {
        l_tpt,
        l_inter,
        l_intra,
        l_total,
        grad,
        retained: retained.to_vec(),
    })
}
