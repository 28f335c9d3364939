//! Deterministic toy embedding stack: hash-seeded token vectors, frozen
//! linear text/image encoders, and feature-space augmentation.
//!
//! Every vector here derives from seeds alone, so embeddings are bit-stable
//! across runs and platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Tolerance for the unit-norm invariant on encoder outputs.
pub const UNIT_NORM_TOL: f64 = 1e-9;

const TEXT_PROJECTION_TAG: u64 = 0x7465_7874;
const IMAGE_PROJECTION_TAG: u64 = 0x696d_6167;

/// Dense real vector with a fixed dimension. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Builds a vector, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding dimension is zero".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "embedding contains non-finite entry {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Returns the vector scaled to unit norm.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n < NORM_FLOOR {
            return Err(Error::DegenerateInput(
                "cannot normalize a zero-norm vector".into(),
            ));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Cosine similarity, clamped to [-1, 1]. Zero-norm input is an error.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0))
}

/// FNV-1a hash of a string. Stable across platforms and versions.
pub fn stable_hash64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes two seeds into one stream key (splitmix64 finalizer). Callers use
/// this to derive independent per-sample or per-view RNG streams.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

/// Unit-norm Gaussian vector seeded by the token text and a global seed.
///
/// The same (text, d_tok, seed) triple always yields the same vector.
pub fn embed_token(token_text: &str, d_tok: usize, global_seed: u64) -> Result<EmbeddingVector> {
    if token_text.is_empty() {
        return Err(Error::InvalidArgument("empty token text".into()));
    }
    if d_tok == 0 {
        return Err(Error::InvalidArgument("d_tok is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(token_text) ^ global_seed);
    EmbeddingVector::new(gaussian_vec(&mut rng, d_tok, 1.0))?.normalized()
}

/// A token vector with its source text and a frozen flag.
///
/// Frozen tokens never receive gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub token_text: String,
    pub vector: EmbeddingVector,
    pub frozen: bool,
}

/// Dimensions and projection seeding for the frozen encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_tok: usize,
    pub d_embed: usize,
    pub projection_seed: u64,
    /// Replace the seeded dense projection with coordinate truncation.
    pub use_identity_projection: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_tok: 64,
            d_embed: 32,
            projection_seed: 0,
            use_identity_projection: false,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Gaussian matrix with entries N(0, 1/cols), fixed by the seed.
    pub fn seeded(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            data: gaussian_vec(&mut rng, rows * cols, sigma),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, w) in self.data.chunks_exact(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        out
    }
}

/// Linear map used by the encoders: seeded dense weights or truncation.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Identity { d_in: usize, d_out: usize },
    Dense(Matrix),
}

impl Projection {
    pub fn d_in(&self) -> usize {
        match self {
            Self::Identity { d_in, .. } => *d_in,
            Self::Dense(m) => m.cols(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Self::Identity { d_out, .. } => *d_out,
            Self::Dense(m) => m.rows(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity { d_out, .. } => x[..*d_out].to_vec(),
            Self::Dense(m) => m.matvec(x),
        }
    }

    /// Transpose action; the adjoint used by gradients and back-projection.
    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Self::Identity { d_in, d_out } => {
                debug_assert_eq!(y.len(), *d_out);
                let mut out = vec![0.0; *d_in];
                out[..*d_out].copy_from_slice(y);
                out
            }
            Self::Dense(m) => m.t_matvec(y),
        }
    }
}

/// Frozen text/image encoder pair over the toy embedding space.
///
/// Text: unit-normalized projection of the mean token vector.
/// Image: unit-normalized projection of the raw feature.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    global_seed: u64,
    text_proj: Projection,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, global_seed: u64) -> Result<Self> {
        if cfg.d_tok == 0 || cfg.d_embed == 0 {
            return Err(Error::InvalidArgument(
                "encoder dimensions must be positive".into(),
            ));
        }
        let text_proj = if cfg.use_identity_projection {
            if cfg.d_embed > cfg.d_tok {
                return Err(Error::InvalidArgument(format!(
                    "identity projection needs d_embed <= d_tok, got {} > {}",
                    cfg.d_embed, cfg.d_tok
                )));
            }
            Projection::Identity {
                d_in: cfg.d_tok,
                d_out: cfg.d_embed,
            }
        } else {
            Projection::Dense(Matrix::seeded(
                cfg.d_embed,
                cfg.d_tok,
                mix64(cfg.projection_seed ^ TEXT_PROJECTION_TAG, cfg.d_tok as u64),
            ))
        };
        Ok(Self {
            cfg,
            global_seed,
            text_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn text_projection(&self) -> &Projection {
        &self.text_proj
    }

    /// Projection applied to raw image features of dimension `d_raw`.
    pub fn image_projection(&self, d_raw: usize) -> Result<Projection> {
        if self.cfg.use_identity_projection {
            if self.cfg.d_embed > d_raw {
                return Err(Error::InvalidArgument(format!(
                    "identity projection needs d_embed <= d_raw, got {} > {}",
                    self.cfg.d_embed, d_raw
                )));
            }
            Ok(Projection::Identity {
                d_in: d_raw,
                d_out: self.cfg.d_embed,
            })
        } else {
            Ok(Projection::Dense(Matrix::seeded(
                self.cfg.d_embed,
                d_raw,
                mix64(
                    self.cfg.projection_seed ^ IMAGE_PROJECTION_TAG,
                    d_raw as u64,
                ),
            )))
        }
    }

    /// Embeds one token. The frozen flag is carried, not interpreted, here.
    pub fn token(&self, text: &str, frozen: bool) -> Result<TokenEmbedding> {
        Ok(TokenEmbedding {
            token_text: text.to_string(),
            vector: embed_token(text, self.cfg.d_tok, self.global_seed)?,
            frozen,
        })
    }

    /// Whitespace-splits a phrase into one token embedding per word.
    pub fn tokenize_phrase(&self, phrase: &str, frozen: bool) -> Result<Vec<TokenEmbedding>> {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "phrase {phrase:?} has no tokens"
            )));
        }
        words.iter().map(|w| self.token(w, frozen)).collect()
    }

    /// Mean-pools token vectors, projects, and normalizes to unit norm.
    ///
    /// A zero-norm token mean is an error: the encoding would be direction-free.
    pub fn encode_text(&self, tokens: &[TokenEmbedding]) -> Result<EmbeddingVector> {
        self.encode_vectors(tokens.iter().map(|t| &t.vector))
            .map(|(g, _)| g)
    }

    /// encode_text plus the pre-normalization norm, which gradients need.
    pub(crate) fn encode_vectors<'a, I>(&self, vectors: I) -> Result<(EmbeddingVector, f64)>
    where
        I: IntoIterator<Item = &'a EmbeddingVector>,
    {
        let d = self.cfg.d_tok;
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for v in vectors {
            if v.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: v.dim(),
                });
            }
            for (m, x) in mean.iter_mut().zip(v.values()) {
                *m += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let n = count as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if mean_norm < NORM_FLOOR {
            return Err(Error::DegenerateInput("token mean has zero norm".into()));
        }
        let projected = EmbeddingVector::new(self.text_proj.apply(&mean))?;
        let norm = projected.norm();
        Ok((projected.normalized()?, norm))
    }

    /// Tokenizes a phrase (frozen) and encodes it.
    pub fn encode_phrase(&self, phrase: &str) -> Result<EmbeddingVector> {
        self.encode_text(&self.tokenize_phrase(phrase, true)?)
    }

    /// Projects a raw image feature and normalizes to unit norm.
    pub fn encode_image(&self, raw: &EmbeddingVector) -> Result<EmbeddingVector> {
        let proj = self.image_projection(raw.dim())?;
        EmbeddingVector::new(proj.apply(raw.values()))?.normalized()
    }

    /// Encodes a batch of raw features sharing one dimension.
    pub fn encode_images(&self, raws: &[EmbeddingVector]) -> Result<Vec<EmbeddingVector>> {
        if raws.is_empty() {
            return Ok(Vec::new());
        }
        let proj = self.image_projection(raws[0].dim())?;
        raws.iter()
            .map(|r| {
                if r.dim() != proj.d_in() {
                    return Err(Error::DimensionMismatch {
                        expected: proj.d_in(),
                        got: r.dim(),
                    });
                }
                EmbeddingVector::new(proj.apply(r.values()))?.normalized()
            })
            .collect()
    }

    /// Pulls an embedding-space direction back into raw feature space via
    /// the image projection transpose. The result is not normalized.
    pub fn back_project_image(
        &self,
        target: &EmbeddingVector,
        d_raw: usize,
    ) -> Result<EmbeddingVector> {
        if target.dim() != self.cfg.d_embed {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.d_embed,
                got: target.dim(),
            });
        }
        let proj = self.image_projection(d_raw)?;
        EmbeddingVector::new(proj.apply_transpose(target.values()))
    }
}

/// Feature-space augmentation: Gaussian noise then coordinate dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub n_views: usize,
    pub noise_sigma: f64,
    pub dropout_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            n_views: 64,
            noise_sigma: 0.1,
            dropout_fraction: 0.05,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::InvalidArgument("n_views must be >= 1".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_fraction) {
            return Err(Error::InvalidArgument(format!(
                "dropout_fraction must lie in [0, 1), got {}",
                self.dropout_fraction
            )));
        }
        Ok(())
    }
}

/// Produces `n_views` views of a raw feature. View 0 is the input unchanged;
/// each later view adds seeded noise, zeroes seeded coordinates, and is
/// renormalized. A view that degenerates to zero norm falls back to the input.
pub fn augment(raw: &EmbeddingVector, cfg: &AugmentationConfig) -> Result<Vec<EmbeddingVector>> {
    cfg.validate()?;
    let d = raw.dim();
    let mut views = Vec::with_capacity(cfg.n_views);
    views.push(raw.clone());
    for j in 1..cfg.n_views {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, j as u64));
        let mut v: Vec<f64> = raw
            .values()
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + cfg.noise_sigma * z
            })
            .collect();
        for x in v.iter_mut().take(d) {
            let u: f64 = rand::Rng::random(&mut rng);
            if u < cfg.dropout_fraction {
                *x = 0.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            views.push(raw.clone());
        } else {
            views.push(EmbeddingVector::new(
                v.into_iter().map(|x| x / norm).collect(),
            )?);
        }
    }
    Ok(views)
}
