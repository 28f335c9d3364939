//! Calibration metrics and diagnostics: expected calibration error over
//! equal-width confidence bins, accuracy, dispersion summaries, and a
//! deterministic PCA projection for plot data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::objective::{atfd, intra_class_loss, ClassTextSet};

/// One scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub predicted_label: usize,
    pub true_label: usize,
    pub confidence: f64,
}

/// Per-bin reliability statistics. Empty bins report zero accuracy and
/// confidence and contribute nothing to ECE.
#[derive(Debug, Clone, Serialize)]
pub struct BinStats {
    /// 1-based bin index over (lower, upper].
    pub bin_index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Bin index for a confidence: ceil(c * n_bins), with 0 mapped to bin 1.
fn bin_of(confidence: f64, n_bins: usize) -> usize {
    let b = (confidence * n_bins as f64).ceil() as usize;
    b.clamp(1, n_bins)
}

fn validate_records(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no prediction records".into()));
    }
    for r in records {
        if !r.confidence.is_finite() || !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} outside [0, 1]",
                r.confidence
            )));
        }
    }
    Ok(())
}

/// Expected calibration error: sum over bins of |B|/m * |acc(B) - conf(B)|,
/// with equal-width bins over (0, 1].
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> Result<(f64, Vec<BinStats>)> {
    validate_records(records)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for r in records {
        let b = bin_of(r.confidence, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += r.confidence;
        if r.predicted_label == r.true_label {
            hits[b] += 1;
        }
    }
    let m = records.len() as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (accuracy, mean_confidence) = if count[b] > 0 {
            (
                hits[b] as f64 / count[b] as f64,
                conf_sum[b] / count[b] as f64,
            )
        } else {
            (0.0, 0.0)
        };
        total += count[b] as f64 / m * (accuracy - mean_confidence).abs();
        bins.push(BinStats {
            bin_index: b + 1,
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            accuracy,
            mean_confidence,
        });
    }
    Ok((total, bins))
}

/// Fraction of records whose prediction matches the true label.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    validate_records(records)?;
    let hits = records
        .iter()
        .filter(|r| r.predicted_label == r.true_label)
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// (ATFD, mean MTAS) of a class text set.
pub fn dispersion_summary(set: &ClassTextSet) -> Result<(f64, f64)> {
    Ok((atfd(set)?, intra_class_loss(set)?))
}

/// Aggregate calibration results for one experiment cell.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub bins: Vec<BinStats>,
    pub atfd_final: f64,
    pub mean_mtas_final: f64,
}

impl CalibrationReport {
    pub fn from_records(
        records: &[PredictionRecord],
        n_bins: usize,
        atfd_final: f64,
        mean_mtas_final: f64,
    ) -> Result<Self> {
        let (e, bins) = ece(records, n_bins)?;
        Ok(Self {
            ece: e,
            accuracy: accuracy(records)?,
            n_samples: records.len(),
            bins,
            atfd_final,
            mean_mtas_final,
        })
    }
}

/// Projects embeddings onto their top principal directions via power
/// iteration with deflation. Deterministic given the seed; directions with
/// no remaining variance yield zero coordinates.
pub fn pca_projection(
    embeddings: &[EmbeddingVector],
    out_dim: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("no embeddings to project".into()));
    }
    let d = embeddings[0].dim();
    if out_dim == 0 || out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "out_dim must lie in [1, {d}], got {out_dim}"
        )));
    }
    let n = embeddings.len();
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut mean = vec![0.0; d];
    for e in embeddings {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.dim(),
            });
        }
        for (m, v) in mean.iter_mut().zip(e.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for e in embeddings {
        centered.push(e.values().iter().zip(&mean).map(|(v, m)| v - m).collect());
    }

    let mut coords = vec![vec![0.0; out_dim]; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // k is the output column; each deflation sweep writes the k-th
    // coordinate of every row.
    #[allow(clippy::needless_range_loop)]
    for k in 0..out_dim {
        let residual: f64 = centered
            .iter()
            .flat_map(|row| row.iter().map(|v| v * v))
            .sum();
        if residual < 1e-18 {
            break;
        }
        let mut v: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= vn;
        }
        for _ in 0..500 {
            // One application of X^T X.
            let mut next = vec![0.0; d];
            for row in &centered {
                let w: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (nx, r) in next.iter_mut().zip(row) {
                    *nx += w * r;
                }
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-18 {
                next = v.clone();
            } else {
                for x in next.iter_mut() {
                    *x /= norm;
                }
            }
            let align: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
            v = next;
            if (1.0 - align.abs()) < 1e-14 {
                break;
            }
        }
        // Fix the sign so projections are reproducible regardless of the
        // iteration's convergence side.
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        for (i, row) in centered.iter_mut().enumerate() {
            let w: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            coords[i][k] = w;
            for (r, dir) in row.iter_mut().zip(&v) {
                *r -= w * dir;
            }
        }
    }
    Ok(coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(predicted: usize, truth: usize, confidence: f64) -> PredictionRecord {
        PredictionRecord {
            predicted_label: predicted,
            true_label: truth,
            confidence,
        }
    }

    #[test]
    fn ece_matches_hand_computed_example() {
        let records = vec![rec(0, 0, 0.9), rec(1, 0, 0.85), rec(2, 2, 0.3)];
        let (e, bins) = ece(&records, 2).unwrap();
        // Bin 1 (0, 0.5]: one correct at 0.3 -> gap 0.7, weight 1/3.
        // Bin 2 (0.5, 1]: acc 0.5, conf 0.875 -> gap 0.375, weight 2/3.
        let expected = 0.7 / 3.0 + 0.375 * 2.0 / 3.0;
        assert!((e - expected).abs() < 1e-15);
        assert_eq!(bins.len(), 2);
        assert_eq!(bins[0].count, 1);
        assert_eq!(bins[1].count, 2);
        assert!((bins[1].mean_confidence - 0.875).abs() < 1e-15);
    }

    #[test]
    fn perfectly_confident_and_correct_has_zero_ece() {
        let records = vec![rec(0, 0, 1.0), rec(3, 3, 1.0)];
        let (e, _) = ece(&records, 15).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn boundary_confidences_land_in_the_stated_bins() {
        // c = 0.5 with two bins sits in bin 1 since intervals are (lo, hi].
        let records = vec![rec(0, 1, 0.5), rec(0, 1, 0.0), rec(0, 1, 1.0)];
        let (_, bins) = ece(&records, 2).unwrap();
        assert_eq!(bins[0].count, 2);
        assert_eq!(bins[1].count, 1);
    }

    #[test]
    fn ece_rejects_bad_inputs() {
        assert!(ece(&[], 10).is_err());
        assert!(ece(&[rec(0, 0, 1.5)], 10).is_err());
        assert!(ece(&[rec(0, 0, 0.5)], 0).is_err());
    }

    #[test]
    fn ece_matches_brute_force_oracle_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let records: Vec<PredictionRecord> = (0..500)
            .map(|_| {
                let confidence: f64 = rng.random();
                let correct: bool = rng.random_bool(0.6);
                rec(0, if correct { 0 } else { 1 }, confidence)
            })
            .collect();
        for n_bins in [10, 15, 20] {
            let (fast, _) = ece(&records, n_bins).unwrap();
            // Oracle: scan the whole record list once per bin.
            let mut slow = 0.0;
            for b in 1..=n_bins {
                let members: Vec<&PredictionRecord> = records
                    .iter()
                    .filter(|r| bin_of(r.confidence, n_bins) == b)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let acc = members
                    .iter()
                    .filter(|r| r.predicted_label == r.true_label)
                    .count() as f64
                    / members.len() as f64;
                let conf = members.iter().map(|r| r.confidence).sum::<f64>() / members.len() as f64;
                slow += members.len() as f64 / records.len() as f64 * (acc - conf).abs();
            }
            assert!((fast - slow).abs() <= 1e-12);
        }
    }

    #[test]
    fn accuracy_counts_matches() {
        let records = vec![
            rec(0, 0, 0.9),
            rec(1, 0, 0.8),
            rec(2, 2, 0.7),
            rec(3, 3, 0.6),
        ];
        assert!((accuracy(&records).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn pca_is_deterministic_and_centers_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud: Vec<EmbeddingVector> = (0..40)
            .map(|_| {
                EmbeddingVector::new((0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                    .unwrap()
            })
            .collect();
        let a = pca_projection(&cloud, 2, 7).unwrap();
        let b = pca_projection(&cloud, 2, 7).unwrap();
        assert_eq!(a, b);
        for k in 0..2 {
            let mean: f64 = a.iter().map(|row| row[k]).sum::<f64>() / a.len() as f64;
            assert!(mean.abs() < 1e-9, "component {k} mean {mean}");
        }
    }

    #[test]
    fn pca_recovers_a_planted_direction() {
        // Points lie on a line with small noise; the first component must
        // carry almost all variance.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = [0.6, 0.0, 0.8, 0.0];
        let cloud: Vec<EmbeddingVector> = (0..60)
            .map(|_| {
                let t: f64 = rng.random::<f64>() * 10.0 - 5.0;
                EmbeddingVector::new(
                    dir.iter()
                        .map(|d| d * t + (rng.random::<f64>() - 0.5) * 0.01)
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let coords = pca_projection(&cloud, 2, 3).unwrap();
        let var1: f64 = coords.iter().map(|c| c[0] * c[0]).sum();
        let var2: f64 = coords.iter().map(|c| c[1] * c[1]).sum();
        assert!(var1 > 100.0 * var2, "var1 {var1} var2 {var2}");
    }

    #[test]
    fn pca_beats_random_projections_at_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cloud: Vec<EmbeddingVector> = (0..50)
            .map(|_| {
                EmbeddingVector::new(
                    (0..8)
                        .map(|k| rng.random::<f64>() * (k as f64 + 0.5))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let mean: Vec<f64> = (0..8)
            .map(|k| cloud.iter().map(|e| e.values()[k]).sum::<f64>() / 50.0)
            .collect();
        let total_var: f64 = cloud
            .iter()
            .map(|e| {
                e.values()
                    .iter()
                    .zip(&mean)
                    .map(|(v, m)| (v - m) * (v - m))
                    .sum::<f64>()
            })
            .sum();
        let coords = pca_projection(&cloud, 2, 1).unwrap();
        let captured: f64 = coords.iter().map(|c| c[0] * c[0] + c[1] * c[1]).sum();
        let pca_residual = total_var - captured;

        for trial in 0..20 {
            let mut t = ChaCha8Rng::seed_from_u64(1000 + trial);
            // Random orthonormal pair via Gram-Schmidt.
            let mut u: Vec<f64> = (0..8).map(|_| t.random::<f64>() - 0.5).collect();
            let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= un);
            let mut w: Vec<f64> = (0..8).map(|_| t.random::<f64>() - 0.5).collect();
            let uw: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(&u).for_each(|(x, a)| *x -= uw * a);
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= wn);

            let captured_rand: f64 = cloud
                .iter()
                .map(|e| {
                    let c: Vec<f64> = e.values().iter().zip(&mean).map(|(v, m)| v - m).collect();
                    let cu: f64 = c.iter().zip(&u).map(|(a, b)| a * b).sum();
                    let cw: f64 = c.iter().zip(&w).map(|(a, b)| a * b).sum();
                    cu * cu + cw * cw
                })
                .sum();
            let rand_residual = total_var - captured_rand;
            assert!(
                pca_residual <= rand_residual + 1e-9,
                "trial {trial}: pca {pca_residual} vs random {rand_residual}"
            );
        }
    }

    #[test]
    fn pca_handles_rank_deficient_input_with_zero_directions() {
        // All points on one line in 3-D: the second component is null.
        let cloud: Vec<EmbeddingVector> = (0..10)
            .map(|i| EmbeddingVector::new(vec![i as f64, 2.0 * i as f64, 0.0]).unwrap())
            .collect();
        let coords = pca_projection(&cloud, 2, 9).unwrap();
        for c in &coords {
            assert!(c[1].abs() < 1e-9, "null direction leaked {c:?}");
        }
    }
}
