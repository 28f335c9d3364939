//! Synthetic benchmarks and precomputed feature ingestion.
//!
//! The generator plants one unit prototype per class in raw feature space,
//! partially aligned with the back-projected mean of that class's attribute
//! text embeddings, then draws unit samples around it. Optional shifts
//! perturb the finished samples to model deployment drift.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeCatalog;
use crate::embed::{mix64, EmbeddingVector, Encoder, NORM_FLOOR};
use crate::error::{Error, Result};

/// Seed-stream tags keep the prototype, sample, and shift draws independent.
const PROTOTYPE_STREAM: u64 = 0x70_72_6f_74;
const SAMPLE_STREAM: u64 = 0x73_61_6d_70;
const SHIFT_STREAM: u64 = 0x73_68_66_74;

fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed, tag), index))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

/// Post-hoc perturbation applied to every generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    None,
    /// Additive Gaussian noise, then renormalization.
    Noise {
        sigma: f64,
    },
    /// A fixed chain of random Givens rotations, one per feature dimension.
    Rotation {
        max_angle: f64,
    },
    /// Sign flips on a fixed random coordinate subset.
    Sketch {
        flip_fraction: f64,
    },
}

impl Shift {
    /// Serde default helper for configs that omit the shift table.
    pub fn none() -> Self {
        Shift::None
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Shift::None => Ok(()),
            Shift::Noise { sigma } => {
                if !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "shift noise sigma {sigma} must be finite and >= 0"
                    )));
                }
                Ok(())
            }
            Shift::Rotation { max_angle } => {
                if !max_angle.is_finite() || *max_angle < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "shift max_angle {max_angle} must be finite and >= 0"
                    )));
                }
                Ok(())
            }
            Shift::Sketch { flip_fraction } => {
                if !flip_fraction.is_finite() || !(0.0..=1.0).contains(flip_fraction) {
                    return Err(Error::InvalidArgument(format!(
                        "shift flip_fraction {flip_fraction} must lie in [0, 1]"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Synthetic dataset recipe. Class names and attribute coupling come from
/// the first `n_classes` entries of the attribute catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_raw: usize,
    pub cluster_sigma: f64,
    /// Convex weight of the attribute direction in each class prototype.
    pub attribute_alignment: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_classes {} must be >= 2",
                self.n_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "samples_per_class must be >= 1".into(),
            ));
        }
        if self.d_raw == 0 {
            return Err(Error::InvalidArgument("d_raw must be >= 1".into()));
        }
        if !self.cluster_sigma.is_finite() || self.cluster_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cluster_sigma {} must be finite and >= 0",
                self.cluster_sigma
            )));
        }
        if !self.attribute_alignment.is_finite() || !(0.0..=1.0).contains(&self.attribute_alignment)
        {
            return Err(Error::InvalidArgument(format!(
                "attribute_alignment {} must lie in [0, 1]",
                self.attribute_alignment
            )));
        }
        self.shift.validate()
    }
}

/// Labeled raw feature vectors plus the class roster they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub features: Vec<EmbeddingVector>,
    pub labels: Vec<usize>,
    pub d_raw: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn normalize_or_err(values: Vec<f64>, what: &str) -> Result<EmbeddingVector> {
    let v = EmbeddingVector::new(values)?;
    if v.norm() < NORM_FLOOR {
        return Err(Error::DegenerateInput(format!("{what} has zero norm")));
    }
    v.normalized()
}

/// Raw-space unit direction aligned with the mean attribute text embedding
/// of one class.
fn attribute_direction(
    class: &str,
    catalog: &AttributeCatalog,
    encoder: &Encoder,
    d_raw: usize,
) -> Result<EmbeddingVector> {
    let attrs = catalog.attributes_for(class)?;
    let d_embed = encoder.config().d_embed;
    let mut mean = vec![0.0; d_embed];
    for attr in attrs {
        let e = encoder.encode_phrase(attr)?;
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v / attrs.len() as f64;
        }
    }
    let mean = normalize_or_err(mean, &format!("attribute mean for class '{class}'"))?;
    let back = encoder.back_project_image(&mean, d_raw)?;
    normalize_or_err(
        back.values().to_vec(),
        &format!("back-projected attribute direction for class '{class}'"),
    )
}

fn apply_shift(
    features: &mut [EmbeddingVector],
    shift: &Shift,
    d_raw: usize,
    seed: u64,
) -> Result<()> {
    match shift {
        Shift::None => Ok(()),
        Shift::Noise { sigma } => {
            for (idx, x) in features.iter_mut().enumerate() {
                let mut rng = stream_rng(seed, SHIFT_STREAM, idx as u64);
                let noise = gaussian_vec(&mut rng, d_raw);
                let shifted: Vec<f64> = x
                    .values()
                    .iter()
                    .zip(&noise)
                    .map(|(v, n)| v + sigma * n)
                    .collect();
                let candidate = EmbeddingVector::new(shifted)?;
                // A sample the noise happens to cancel keeps its old value.
                if candidate.norm() >= NORM_FLOOR {
                    *x = candidate.normalized()?;
                }
            }
            Ok(())
        }
        Shift::Rotation { max_angle } => {
            if d_raw < 2 {
                return Ok(());
            }
            let mut rng = stream_rng(seed, SHIFT_STREAM, 0);
            let plan: Vec<(usize, usize, f64)> = (0..d_raw)
                .map(|_| {
                    let p = rng.random_range(0..d_raw);
                    let mut q = rng.random_range(0..d_raw - 1);
                    if q >= p {
                        q += 1;
                    }
                    let angle = rng.random_range(-max_angle..=*max_angle);
                    (p, q, angle)
                })
                .collect();
            for x in features.iter_mut() {
                let vals = x.values_mut();
                for &(p, q, angle) in &plan {
                    let (s, c) = angle.sin_cos();
                    let (vp, vq) = (vals[p], vals[q]);
                    vals[p] = c * vp - s * vq;
                    vals[q] = s * vp + c * vq;
                }
                *x = x.normalized()?;
            }
            Ok(())
        }
        Shift::Sketch { flip_fraction } => {
            let mut rng = stream_rng(seed, SHIFT_STREAM, 1);
            let mask: Vec<bool> = (0..d_raw)
                .map(|_| rng.random_bool(*flip_fraction))
                .collect();
            for x in features.iter_mut() {
                let vals = x.values_mut();
                for (v, flip) in vals.iter_mut().zip(&mask) {
                    if *flip {
                        *v = -*v;
                    }
                }
            }
            Ok(())
        }
    }
}

/// Generates a labeled synthetic dataset whose class structure is coupled to
/// the catalog's attribute text, so attribute-aware prompts carry real signal.
pub fn generate(
    spec: &SyntheticSpec,
    catalog: &AttributeCatalog,
    encoder: &Encoder,
) -> Result<Dataset> {
    spec.validate()?;
    let class_names: Vec<String> = catalog
        .classes()
        .take(spec.n_classes)
        .map(String::from)
        .collect();
    if class_names.len() < spec.n_classes {
        return Err(Error::InvalidArgument(format!(
            "catalog provides {} classes, spec needs {}",
            class_names.len(),
            spec.n_classes
        )));
    }

    let mut prototypes = Vec::with_capacity(spec.n_classes);
    for (i, class) in class_names.iter().enumerate() {
        let attr_dir = attribute_direction(class, catalog, encoder, spec.d_raw)?;
        let mut rng = stream_rng(spec.seed, PROTOTYPE_STREAM, i as u64);
        let random_dir = normalize_or_err(
            gaussian_vec(&mut rng, spec.d_raw),
            &format!("random prototype direction for class '{class}'"),
        )?;
        let a = spec.attribute_alignment;
        let blended: Vec<f64> = random_dir
            .values()
            .iter()
            .zip(attr_dir.values())
            .map(|(r, t)| (1.0 - a) * r + a * t)
            .collect();
        prototypes.push(normalize_or_err(
            blended,
            &format!("prototype for class '{class}'"),
        )?);
    }

    let n = spec.n_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, proto) in prototypes.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let idx = (i * spec.samples_per_class + s) as u64;
            let mut rng = stream_rng(spec.seed, SAMPLE_STREAM, idx);
            let noise = gaussian_vec(&mut rng, spec.d_raw);
            let raw: Vec<f64> = proto
                .values()
                .iter()
                .zip(&noise)
                .map(|(p, z)| p + spec.cluster_sigma * z)
                .collect();
            features.push(normalize_or_err(
                raw,
                &format!("sample {s} of class '{}'", class_names[i]),
            )?);
            labels.push(i);
        }
    }
    apply_shift(&mut features, &spec.shift, spec.d_raw, spec.seed)?;
    Ok(Dataset {
        class_names,
        features,
        labels,
        d_raw: spec.d_raw,
    })
}

pub const BUNDLE_MAGIC: [u8; 4] = *b"PCFB";
pub const BUNDLE_VERSION: u32 = 1;

/// Precomputed feature bundle: the on-disk interchange format for running
/// experiments against features produced elsewhere. Features are stored as
/// f32 so writes round-trip byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub d_embed: u32,
    pub class_names: Vec<String>,
    /// Row-major, one row of `d_embed` values per sample.
    pub image_features: Vec<f32>,
    pub true_labels: Vec<u32>,
    /// Optional precomputed class text features, one row per class.
    pub class_text_features: Option<Vec<f32>>,
}

impl FeatureBundle {
    pub fn n_samples(&self) -> usize {
        self.true_labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_embed as usize;
        if d == 0 {
            return Err(Error::InvalidArgument("bundle d_embed must be >= 1".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("bundle has no classes".into()));
        }
        if self.image_features.len() != self.n_samples() * d {
            return Err(Error::InvalidArgument(format!(
                "bundle has {} feature values for {} samples of width {}",
                self.image_features.len(),
                self.n_samples(),
                d
            )));
        }
        if let Some(text) = &self.class_text_features {
            if text.len() != self.n_classes() * d {
                return Err(Error::InvalidArgument(format!(
                    "bundle has {} text feature values for {} classes of width {}",
                    text.len(),
                    self.n_classes(),
                    d
                )));
            }
        }
        if let Some(bad) = self
            .true_labels
            .iter()
            .find(|&&l| l as usize >= self.n_classes())
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok(())
    }

    /// Converts a synthetic dataset for writing. Raw features narrow to f32.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let mut image_features = Vec::with_capacity(dataset.len() * dataset.d_raw);
        for f in &dataset.features {
            if f.dim() != dataset.d_raw {
                return Err(Error::DimensionMismatch {
                    expected: dataset.d_raw,
                    got: f.dim(),
                });
            }
            image_features.extend(f.values().iter().map(|&v| v as f32));
        }
        let bundle = Self {
            d_embed: dataset.d_raw as u32,
            class_names: dataset.class_names.clone(),
            image_features,
            true_labels: dataset.labels.iter().map(|&l| l as u32).collect(),
            class_text_features: None,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        self.validate()?;
        let d = self.d_embed as usize;
        let features = self
            .image_features
            .chunks_exact(d)
            .map(|row| EmbeddingVector::new(row.iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            class_names: self.class_names.clone(),
            features,
            labels: self.true_labels.iter().map(|&l| l as usize).collect(),
            d_raw: d,
        })
    }
}

/// Serializes a bundle: magic, version, dimensions, length-prefixed class
/// names, f32 features, u32 labels, then a flag plus optional text features.
/// All integers and floats are little-endian.
pub fn write_bundle(bundle: &FeatureBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&bundle.d_embed.to_le_bytes());
    out.extend_from_slice(&(bundle.n_samples() as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.n_classes() as u32).to_le_bytes());
    for name in &bundle.class_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for v in &bundle.image_features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &bundle.true_labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    match &bundle.class_text_features {
        None => out.push(0),
        Some(text) => {
            out.push(1);
            for v in text {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Byte reader that reports the offset where the data ran out.
struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Corruption {
                offset: self.offset as u64,
                reason: format!(
                    "needed {n} bytes for {what}, {} left",
                    self.bytes.len() - self.offset
                ),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    let magic = cur.take(4, "magic")?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?}, expected {BUNDLE_MAGIC:02x?}"
        )));
    }
    let version = cur.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: version,
            supported: BUNDLE_VERSION,
        });
    }
    let d_embed = cur.u32("d_embed")?;
    let n_samples = cur.u32("n_samples")? as usize;
    let n_classes = cur.u32("n_classes")? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for i in 0..n_classes {
        let len = cur.u32(&format!("class {i} name length"))? as usize;
        let name_offset = cur.offset as u64;
        let raw = cur.take(len, &format!("class {i} name"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| Error::Corruption {
                offset: name_offset,
                reason: format!("class {i} name is not UTF-8: {e}"),
            })?
            .to_string();
        class_names.push(name);
    }
    let d = d_embed as usize;
    let mut image_features = Vec::with_capacity(n_samples * d);
    for _ in 0..n_samples * d {
        image_features.push(cur.f32("image features")?);
    }
    let mut true_labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        true_labels.push(cur.u32("labels")?);
    }
    let flag = cur.u8("text feature flag")?;
    let class_text_features = match flag {
        0 => None,
        1 => {
            let mut text = Vec::with_capacity(n_classes * d);
            for _ in 0..n_classes * d {
                text.push(cur.f32("class text features")?);
            }
            Some(text)
        }
        other => {
            return Err(Error::Format(format!(
                "text feature flag must be 0 or 1, got {other}"
            )))
        }
    };
    if cur.offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after bundle payload",
            bytes.len() - cur.offset
        )));
    }
    let bundle = FeatureBundle {
        d_embed,
        class_names,
        image_features,
        true_labels,
        class_text_features,
    };
    bundle.validate().map_err(|e| match e {
        Error::InvalidArgument(reason) => Error::Format(reason),
        other => other,
    })?;
    Ok(bundle)
}
