//! Acceptance gate for the workspace. Runs nine checks and prints one
//! pass/fail line per criterion; the test fails if any criterion fails.
//!
//! Every tolerance, seed, and suite knob is pinned in this file. Run with
//! `cargo test -p promptcal-cli --test acceptance -- --nocapture` to see the
//! per-criterion lines on success.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptcal::bench::{self, FeatureBundle, Shift, SyntheticSpec};
use promptcal::calibration::{ece, PredictionRecord};
use promptcal::embed::{AugmentationConfig, EmbeddingVector, Encoder, EncoderConfig};
use promptcal::objective::{
    atfd, class_probabilities, confidence_filter, evaluate_prompt, intra_class_loss, mtas,
    total_loss, tpt_loss, ClassTextSet, ClassifierConfig, LossWeights, ProbVector,
};
use promptcal::tuner::{init_prompt, tune_on_sample, EpisodeContext, TunerConfig};

use promptcal_cli::config::{self, SEED_ENV_VAR};
use promptcal_cli::experiment::{compute, prepare, Computed};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("crate dir has a workspace root two levels up")
        .to_path_buf()
}

/// The frozen directional suite. Criteria 5, 6, and 8 all read from one run
/// of this configuration.
const SUITE_TOML: &str = r#"
name = "acceptance-suite"
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
n_bins = 15
output_dir = "acceptance-unused"
catalog = "configs/catalog.json"

[dataset]
source = "synthetic"
n_classes = 10
samples_per_class = 50
d_raw = 96
cluster_sigma = 0.35
attribute_alignment = 0.6

[classifier]
temperature = 0.01

[augmentation]
n_views = 64
noise_sigma = 0.03
dropout_fraction = 0.01

[tuner]
learning_rate = 0.02
n_steps = 2

[[methods]]
name = "hard_prompt"

[[methods]]
name = "tpt"

[[methods]]
name = "tpt_inter"

[[methods]]
name = "tpt_tca"
"#;

const SUITE_BUDGET_SECONDS: f64 = 300.0;
const GRADIENT_BUDGET_SECONDS: f64 = 30.0;

struct Outcome {
    name: &'static str,
    result: Result<String, String>,
}

#[test]
fn acceptance_criteria() {
    // A stray seed override would silently rewrite the suite's seed list.
    std::env::remove_var(SEED_ENV_VAR);

    let mut outcomes = vec![
        Outcome {
            name: "scale statement",
            result: criterion_scale_statement(),
        },
        Outcome {
            name: "gradient finite-difference oracle",
            result: criterion_gradient_oracle(),
        },
        Outcome {
            name: "calibration-error oracle",
            result: criterion_ece_oracle(),
        },
        Outcome {
            name: "dispersion oracle",
            result: criterion_dispersion_oracle(),
        },
    ];

    let suite = run_suite();
    match &suite {
        Ok((computed, elapsed)) => {
            outcomes.push(Outcome {
                name: "directional calibration",
                result: criterion_directional(computed, *elapsed),
            });
            outcomes.push(Outcome {
                name: "ablation ordering",
                result: criterion_ablation(computed),
            });
        }
        Err(e) => {
            outcomes.push(Outcome {
                name: "directional calibration",
                result: Err(format!("suite failed to run: {e}")),
            });
            outcomes.push(Outcome {
                name: "ablation ordering",
                result: Err(format!("suite failed to run: {e}")),
            });
        }
    }

    outcomes.push(Outcome {
        name: "invariance suite",
        result: criterion_invariances(),
    });

    outcomes.push(Outcome {
        name: "dispersion-calibration correlation",
        result: match &suite {
            Ok((computed, _)) => criterion_correlation(computed),
            Err(e) => Err(format!("suite failed to run: {e}")),
        },
    });

    outcomes.push(Outcome {
        name: "format round trips",
        result: criterion_round_trips(),
    });

    let mut failures = Vec::new();
    for (i, o) in outcomes.iter().enumerate() {
        match &o.result {
            Ok(detail) => println!("criterion {}/9 ({}): pass — {detail}", i + 1, o.name),
            Err(detail) => {
                println!("criterion {}/9 ({}): FAIL — {detail}", i + 1, o.name);
                failures.push(format!("{} ({})", i + 1, o.name));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance criteria failed: {}",
        failures.join(", ")
    );
}

/// Criterion 1: this workspace cannot reproduce published-scale calibration
/// numbers. Doing so needs real image-text encoders and the corresponding
/// benchmark image sets; here both are replaced by deterministic toy models
/// and synthetic clusters. The remaining criteria are therefore property
/// checks (oracles, invariances, round trips) and direction checks on the
/// synthetic suite, not number matches.
fn criterion_scale_statement() -> Result<String, String> {
    Ok(
        "full-scale benchmark reproduction is out of scope on toy encoders; \
        criteria 2-9 check properties and directions instead"
            .to_string(),
    )
}

/// Criterion 2: analytic prompt gradients match central finite differences
/// of the total loss, component by component, over 24 scenarios covering
/// K in {3,5}, M in {1,2,3}, and d_embed in {8,16}. Step 1e-6, max relative
/// error at most 1e-4, wall time under 30 s.
fn criterion_gradient_oracle() -> Result<String, String> {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst = 0.0f64;
    let mut scenarios = 0usize;

    for &k in &[3usize, 5] {
        for &m in &[1usize, 2, 3] {
            for &d_embed in &[8usize, 16] {
                for rep in 0..2u64 {
                    let seed = 9_000 + 100 * k as u64 + 10 * m as u64 + d_embed as u64 + rep;
                    let rel = gradient_scenario(k, m, d_embed, seed)
                        .map_err(|e| format!("scenario seed {seed}: {e}"))?;
                    worst = worst.max(rel);
                    scenarios += 1;
                }
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    if worst > tol {
        return Err(format!(
            "max relative error {worst:.3e} exceeds {tol:.0e} over {scenarios} scenarios"
        ));
    }
    if elapsed > GRADIENT_BUDGET_SECONDS {
        return Err(format!(
            "took {elapsed:.1}s, budget {GRADIENT_BUDGET_SECONDS:.0}s"
        ));
    }
    Ok(format!(
        "{scenarios} scenarios, max relative error {worst:.3e}, {elapsed:.1}s"
    ))
}

fn gradient_scenario(k: usize, m: usize, d_embed: usize, seed: u64) -> Result<f64, String> {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(
        EncoderConfig {
            d_tok: 12,
            d_embed,
            projection_seed: seed,
            use_identity_projection: false,
        },
        seed,
    )
    .map_err(|e| e.to_string())?;

    let classes: Vec<String> = (0..k).map(|i| format!("probe class {i}")).collect();
    let attrs: Vec<Vec<String>> = (0..k)
        .map(|i| {
            (0..m)
                .map(|j| format!("probe class {i} trait {j}"))
                .collect()
        })
        .collect();
    let mut prompt =
        init_prompt("a photo of a", &classes, &attrs, &encoder).map_err(|e| e.to_string())?;

    let raws: Vec<EmbeddingVector> = (0..6)
        .map(|_| {
            let v: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            EmbeddingVector::new(v).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let views = encoder.encode_images(&raws).map_err(|e| e.to_string())?;

    let classifier = ClassifierConfig::new(0.1, k).map_err(|e| e.to_string())?;
    let weights = LossWeights {
        alpha: 0.5 + rng.random::<f64>() * 14.5,
        beta: 0.5 + rng.random::<f64>() * 14.5,
    };

    let eval = evaluate_prompt(&prompt, &encoder, &views, &classifier, 0.34, &weights)
        .map_err(|e| e.to_string())?;
    let analytic = eval.breakdown.grad.prefix.clone();
    let retained = eval.breakdown.retained.clone();

    for row in &eval.breakdown.grad.frozen {
        if row.iter().any(|&g| g != 0.0) {
            return Err("frozen token received a nonzero gradient".to_string());
        }
    }

    if analytic.len() != prompt.prefix_len()
        || analytic
            .iter()
            .any(|row| row.len() != encoder.config().d_tok)
    {
        return Err("prefix gradient shape does not match the prompt".to_string());
    }

    let mut worst = 0.0f64;
    for (t, row) in analytic.iter().enumerate() {
        for (c, &g) in row.iter().enumerate() {
            prompt.nudge_prefix(t, c, h);
            let up = total_loss(&prompt, &encoder, &views, &retained, &classifier, &weights)
                .map_err(|e| e.to_string())?
                .l_total;
            prompt.nudge_prefix(t, c, -2.0 * h);
            let down = total_loss(&prompt, &encoder, &views, &retained, &classifier, &weights)
                .map_err(|e| e.to_string())?
                .l_total;
            prompt.nudge_prefix(t, c, h);
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Criterion 3: module ECE equals a per-record brute-force oracle to 1e-12
/// on 1,000 uniformly random records for n_bins in {10, 15, 20}.
fn criterion_ece_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let records: Vec<PredictionRecord> = (0..1000)
        .map(|_| PredictionRecord {
            predicted_label: rng.random_range(0..7),
            true_label: rng.random_range(0..7),
            confidence: 1.0 - rng.random::<f64>(),
        })
        .collect();

    let mut worst = 0.0f64;
    for &n_bins in &[10usize, 15, 20] {
        let (module, _) = ece(&records, n_bins).map_err(|e| e.to_string())?;

        let mut count = vec![0usize; n_bins + 1];
        let mut hits = vec![0usize; n_bins + 1];
        let mut conf_sum = vec![0.0f64; n_bins + 1];
        for r in &records {
            let b = ((r.confidence * n_bins as f64).ceil() as usize).clamp(1, n_bins);
            count[b] += 1;
            conf_sum[b] += r.confidence;
            if r.predicted_label == r.true_label {
                hits[b] += 1;
            }
        }
        let n = records.len() as f64;
        let mut oracle = 0.0;
        for b in 1..=n_bins {
            if count[b] == 0 {
                continue;
            }
            let acc = hits[b] as f64 / count[b] as f64;
            let conf = conf_sum[b] / count[b] as f64;
            oracle += count[b] as f64 / n * (acc - conf).abs();
        }

        worst = worst.max((module - oracle).abs());
    }
    if worst > 1e-12 {
        return Err(format!("max |module - oracle| = {worst:.3e} exceeds 1e-12"));
    }
    Ok(format!(
        "1000 records, bins {{10,15,20}}, max deviation {worst:.3e}"
    ))
}

/// Criterion 4: per-class spread and between-class dispersion match
/// brute-force recomputation to 1e-12 on 50 random embedding sets, and
/// dispersion scales linearly under lambda in {0.5, 2, 10} to 1e-9.
fn criterion_dispersion_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst_match = 0.0f64;
    let mut worst_scale = 0.0f64;

    for set_idx in 0..50usize {
        let k = 2 + set_idx % 5;
        let m = 1 + set_idx % 4;
        let dim = 8;
        let scale = 0.1 + rng.random::<f64>() * 2.9;
        let raw: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        (0..dim)
                            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let set = build_set(&raw, 1.0).map_err(|e| e.to_string())?;

        // Brute force, written against the definitions rather than the
        // module's loops.
        let class_means: Vec<Vec<f64>> = raw
            .iter()
            .map(|c| {
                (0..dim)
                    .map(|d| c.iter().map(|v| v[d]).sum::<f64>() / m as f64)
                    .collect()
            })
            .collect();
        let grand: Vec<f64> = (0..dim)
            .map(|d| class_means.iter().map(|v| v[d]).sum::<f64>() / k as f64)
            .collect();

        let mut intra_oracle = 0.0;
        for (i, c) in raw.iter().enumerate() {
            let spread = c.iter().map(|v| l2_dist(v, &class_means[i])).sum::<f64>() / m as f64;
            let module = mtas(&set, i).map_err(|e| e.to_string())?;
            worst_match = worst_match.max((module - spread).abs());
            intra_oracle += spread;
        }
        intra_oracle /= k as f64;
        let disp_oracle = class_means.iter().map(|v| l2_dist(v, &grand)).sum::<f64>() / k as f64;

        let intra_module = intra_class_loss(&set).map_err(|e| e.to_string())?;
        let disp_module = atfd(&set).map_err(|e| e.to_string())?;
        worst_match = worst_match.max((intra_module - intra_oracle).abs());
        worst_match = worst_match.max((disp_module - disp_oracle).abs());

        for &lambda in &[0.5f64, 2.0, 10.0] {
            let scaled = build_set(&raw, lambda).map_err(|e| e.to_string())?;
            let disp_scaled = atfd(&scaled).map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max((disp_scaled - lambda * disp_module).abs());
        }
    }

    if worst_match > 1e-12 {
        return Err(format!(
            "max |module - oracle| = {worst_match:.3e} exceeds 1e-12"
        ));
    }
    if worst_scale > 1e-9 {
        return Err(format!(
            "max scaling deviation {worst_scale:.3e} exceeds 1e-9"
        ));
    }
    Ok(format!(
        "50 sets, max deviation {worst_match:.3e}, max scaling deviation {worst_scale:.3e}"
    ))
}

fn build_set(raw: &[Vec<Vec<f64>>], lambda: f64) -> promptcal::Result<ClassTextSet> {
    let per_class = raw
        .iter()
        .map(|c| {
            c.iter()
                .map(|v| EmbeddingVector::new(v.iter().map(|x| x * lambda).collect()))
                .collect::<promptcal::Result<Vec<_>>>()
        })
        .collect::<promptcal::Result<Vec<_>>>()?;
    ClassTextSet::new(per_class)
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn run_suite() -> Result<(Computed, f64), String> {
    let raw = config::parse_config(SUITE_TOML).map_err(|e| e.to_string())?;
    let cfg = config::resolve(raw, &repo_root()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    let computed = compute(&cfg, &prepared).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    if computed.total_failed > 0 {
        return Err(format!(
            "{} samples hit numeric failures; the suite expects none",
            computed.total_failed
        ));
    }
    Ok((computed, elapsed))
}

fn rows_by_key(computed: &Computed) -> HashMap<(&str, u64), (f64, f64)> {
    computed
        .rows
        .iter()
        .map(|r| {
            (
                (r.method.as_str(), r.seed),
                (
                    r.ece.expect("suite rows all score"),
                    r.mean_atfd.expect("suite rows all score"),
                ),
            )
        })
        .collect()
}

/// Criterion 5: on the frozen suite, (a) entropy-only tuning raises the
/// predicted confidence over the hard prompt on at least 90% of samples in
/// every seed, and (b) the full objective's per-seed ECE is at most
/// entropy-only tuning's on at least 8 of 10 seeds. Wall time under 5 min.
fn criterion_directional(computed: &Computed, elapsed: f64) -> Result<String, String> {
    if elapsed > SUITE_BUDGET_SECONDS {
        return Err(format!(
            "suite took {elapsed:.1}s, budget {SUITE_BUDGET_SECONDS:.0}s"
        ));
    }

    let mut blocks: HashMap<(&str, u64), &Vec<promptcal_cli::experiment::SampleLine>> =
        HashMap::new();
    for (method, seed, lines) in &computed.sample_blocks {
        blocks.insert((method.as_str(), *seed), lines);
    }

    let mut min_fraction = 1.0f64;
    for seed in 0..10u64 {
        let hard = blocks
            .get(&("hard_prompt", seed))
            .ok_or_else(|| format!("missing hard_prompt block for seed {seed}"))?;
        let tuned = blocks
            .get(&("tpt", seed))
            .ok_or_else(|| format!("missing tpt block for seed {seed}"))?;
        if hard.len() != tuned.len() || hard.is_empty() {
            return Err(format!(
                "seed {seed}: mismatched sample counts {} vs {}",
                hard.len(),
                tuned.len()
            ));
        }
        let mut up = 0usize;
        for (h, t) in hard.iter().zip(tuned.iter()) {
            let hc = h
                .confidence
                .ok_or_else(|| format!("seed {seed}: unscored hard_prompt sample"))?;
            let tc = t
                .confidence
                .ok_or_else(|| format!("seed {seed}: unscored tpt sample"))?;
            if tc > hc {
                up += 1;
            }
        }
        // Integer form of up/len >= 0.9 avoids float threshold edges.
        if up * 10 < hard.len() * 9 {
            return Err(format!(
                "seed {seed}: confidence rose on only {up}/{} samples (< 90%)",
                hard.len()
            ));
        }
        min_fraction = min_fraction.min(up as f64 / hard.len() as f64);
    }

    let rows = rows_by_key(computed);
    let mut better = 0usize;
    for seed in 0..10u64 {
        let tpt = rows.get(&("tpt", seed)).expect("tpt row").0;
        let tca = rows.get(&("tpt_tca", seed)).expect("tpt_tca row").0;
        if tca <= tpt {
            better += 1;
        }
    }
    if better < 8 {
        return Err(format!(
            "full objective beat entropy-only ECE on {better}/10 seeds (< 8)"
        ));
    }
    Ok(format!(
        "confidence up on >=90% of samples in all seeds (min {min_fraction:.3}), \
         ECE better on {better}/10 seeds, suite {elapsed:.1}s"
    ))
}

/// Criterion 6: per-seed ordering ECE(entropy-only) >= ECE(inter-only)
/// >= ECE(full) holds on at least 7 of 10 seeds.
fn criterion_ablation(computed: &Computed) -> Result<String, String> {
    let rows = rows_by_key(computed);
    let mut ordered = 0usize;
    for seed in 0..10u64 {
        let tpt = rows.get(&("tpt", seed)).expect("tpt row").0;
        let inter = rows.get(&("tpt_inter", seed)).expect("tpt_inter row").0;
        let tca = rows.get(&("tpt_tca", seed)).expect("tpt_tca row").0;
        if tpt >= inter && inter >= tca {
            ordered += 1;
        }
    }
    if ordered < 7 {
        return Err(format!("ordering held on {ordered}/10 seeds (< 7)"));
    }
    Ok(format!("three-way ECE ordering held on {ordered}/10 seeds"))
}

/// Criterion 7: invariance suite. Softmax normalization to 1e-12,
/// temperature argmax invariance over {0.01, 0.1, 1}, orthogonal-rotation
/// invariance of all loss terms to 1e-9, bitwise stability of frozen
/// tokens through tuning, and order independence of episodic tuning.
fn criterion_invariances() -> Result<String, String> {
    softmax_and_temperature().map_err(|e| format!("softmax/temperature: {e}"))?;
    rotation_invariance().map_err(|e| format!("rotation: {e}"))?;
    frozen_and_episodic().map_err(|e| format!("frozen/episodic: {e}"))?;
    Ok(
        "softmax sums, temperature argmax, rotation invariance, frozen bits, \
        episodic order all hold"
            .to_string(),
    )
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Result<EmbeddingVector, String> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    EmbeddingVector::new(v)
        .and_then(|e| e.normalized())
        .map_err(|e| e.to_string())
}

fn softmax_and_temperature() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let k = 5;
    let temperatures = [0.01f64, 0.1, 1.0];
    for _ in 0..50 {
        let embeds: Vec<EmbeddingVector> = (0..k)
            .map(|_| unit_vec(&mut rng, 8))
            .collect::<Result<_, _>>()?;
        let x = unit_vec(&mut rng, 8)?;

        let mut argmaxes = Vec::new();
        for &tau in &temperatures {
            let clf = ClassifierConfig::new(tau, k).map_err(|e| e.to_string())?;
            let p = class_probabilities(&x, &embeds, &clf).map_err(|e| e.to_string())?;
            let sum: f64 = p.values().iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("probabilities sum to {sum} at tau {tau}"));
            }
            argmaxes.push(p.argmax());
        }
        if argmaxes.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("argmax changed across temperatures: {argmaxes:?}"));
        }
    }
    Ok(())
}

/// Rotates every vector by the same orthogonal map, built as a chain of
/// Givens rotations so orthogonality is exact up to rounding.
fn rotation_invariance() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1008);
    let dim = 8;
    let plan: Vec<(usize, usize, f64)> = (0..40)
        .map(|_| {
            let p = rng.random_range(0..dim);
            let mut q = rng.random_range(0..dim - 1);
            if q >= p {
                q += 1;
            }
            let theta = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
            (p, q, theta)
        })
        .collect();
    let rotate = |e: &EmbeddingVector| -> Result<EmbeddingVector, String> {
        let mut v = e.values().to_vec();
        for &(p, q, theta) in &plan {
            let (s, c) = theta.sin_cos();
            let (a, b) = (v[p], v[q]);
            v[p] = c * a - s * b;
            v[q] = s * a + c * b;
        }
        EmbeddingVector::new(v).map_err(|e| e.to_string())
    };

    // Dispersion terms on a random embedding set.
    let raw: Vec<Vec<EmbeddingVector>> = (0..4)
        .map(|_| {
            (0..3)
                .map(|_| unit_vec(&mut rng, dim))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let set = ClassTextSet::new(raw.clone()).map_err(|e| e.to_string())?;
    let rotated_raw: Vec<Vec<EmbeddingVector>> = raw
        .iter()
        .map(|c| c.iter().map(&rotate).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let rotated_set = ClassTextSet::new(rotated_raw).map_err(|e| e.to_string())?;

    let d_disp = (atfd(&set).map_err(|e| e.to_string())?
        - atfd(&rotated_set).map_err(|e| e.to_string())?)
    .abs();
    let d_intra = (intra_class_loss(&set).map_err(|e| e.to_string())?
        - intra_class_loss(&rotated_set).map_err(|e| e.to_string())?)
    .abs();
    if d_disp > 1e-9 || d_intra > 1e-9 {
        return Err(format!(
            "dispersion shifted under rotation: {d_disp:.3e}, {d_intra:.3e}"
        ));
    }

    // Entropy term on random views against random class embeddings.
    let k = 4;
    let clf = ClassifierConfig::new(0.05, k).map_err(|e| e.to_string())?;
    let embeds: Vec<EmbeddingVector> = (0..k)
        .map(|_| unit_vec(&mut rng, dim))
        .collect::<Result<_, _>>()?;
    let views: Vec<EmbeddingVector> = (0..12)
        .map(|_| unit_vec(&mut rng, dim))
        .collect::<Result<_, _>>()?;

    let probs_of = |embeds: &[EmbeddingVector],
                    views: &[EmbeddingVector]|
     -> Result<Vec<ProbVector>, String> {
        views
            .iter()
            .map(|v| class_probabilities(v, embeds, &clf).map_err(|e| e.to_string()))
            .collect()
    };
    let probs = probs_of(&embeds, &views)?;
    let retained = confidence_filter(&probs, 0.25).map_err(|e| e.to_string())?;
    let base = tpt_loss(&probs, &retained).map_err(|e| e.to_string())?;

    let embeds_r: Vec<EmbeddingVector> = embeds.iter().map(&rotate).collect::<Result<_, _>>()?;
    let views_r: Vec<EmbeddingVector> = views.iter().map(&rotate).collect::<Result<_, _>>()?;
    let probs_r = probs_of(&embeds_r, &views_r)?;
    let rotated = tpt_loss(&probs_r, &retained).map_err(|e| e.to_string())?;

    if (base - rotated).abs() > 1e-9 {
        return Err(format!(
            "entropy loss shifted under rotation by {:.3e}",
            (base - rotated).abs()
        ));
    }
    Ok(())
}

fn frozen_and_episodic() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let encoder = Encoder::new(
        EncoderConfig {
            d_tok: 16,
            d_embed: 8,
            projection_seed: 7,
            use_identity_projection: false,
        },
        7,
    )
    .map_err(|e| e.to_string())?;
    let classes: Vec<String> = (0..3).map(|i| format!("mini class {i}")).collect();
    let attrs: Vec<Vec<String>> = (0..3)
        .map(|i| (0..2).map(|j| format!("mini class {i} cue {j}")).collect())
        .collect();
    let initial =
        init_prompt("a photo of a", &classes, &attrs, &encoder).map_err(|e| e.to_string())?;

    let cfg = TunerConfig {
        learning_rate: 0.1,
        n_steps: 5,
        rho: 0.3,
        n_views: 8,
        ..TunerConfig::default()
    };
    let aug = AugmentationConfig {
        n_views: 8,
        noise_sigma: 0.1,
        dropout_fraction: 0.05,
        seed: 3,
    };
    let weights = LossWeights {
        alpha: 10.0,
        beta: 35.0,
    };
    let classifier = ClassifierConfig::new(0.1, 3).map_err(|e| e.to_string())?;
    let ctx = EpisodeContext {
        encoder: &encoder,
        classifier: &classifier,
    };

    let raws: Vec<EmbeddingVector> = (0..6)
        .map(|_| {
            let v: Vec<f64> = (0..10).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            EmbeddingVector::new(v).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;

    // Frozen tokens must not move, the learnable prefix must.
    let before = initial.frozen_bits();
    let outcome = tune_on_sample(&raws[0], &initial, &cfg, &aug, &weights, &ctx)
        .map_err(|e| e.to_string())?;
    if outcome.prompt.frozen_bits() != before {
        return Err("frozen token bits changed during tuning".to_string());
    }
    let prefix_moved = initial
        .prefix()
        .iter()
        .zip(outcome.prompt.prefix())
        .any(|(a, b)| {
            a.vector
                .values()
                .iter()
                .zip(b.vector.values())
                .any(|(x, y)| x.to_bits() != y.to_bits())
        });
    if !prefix_moved {
        return Err("prefix tokens did not move during tuning".to_string());
    }

    // Episodes reset per sample, so processing order cannot matter.
    let episode = |idx: usize| -> Result<(usize, u64), String> {
        let out = tune_on_sample(&raws[idx], &initial, &cfg, &aug, &weights, &ctx)
            .map_err(|e| e.to_string())?;
        let label = out.final_probs.argmax();
        Ok((label, out.final_probs.values()[label].to_bits()))
    };
    let forward: Vec<(usize, u64)> = (0..raws.len()).map(episode).collect::<Result<_, _>>()?;
    let reversed: Vec<(usize, u64)> = (0..raws.len())
        .rev()
        .map(episode)
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .rev()
        .collect();
    if forward != reversed {
        return Err("per-sample results depend on processing order".to_string());
    }
    Ok(())
}

fn mean_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (mean_ranks(a), mean_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let (da, db) = (ra[i] - ma, rb[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Criterion 8: across the four methods, mean final dispersion and mean ECE
/// anti-correlate (Spearman at most -0.5) over the seed ensemble.
fn criterion_correlation(computed: &Computed) -> Result<String, String> {
    let mut disp = Vec::new();
    let mut ece_means = Vec::new();
    for m in &computed.method_means {
        disp.push(
            m.mean_atfd
                .ok_or_else(|| format!("method {} has no dispersion mean", m.method))?,
        );
        ece_means.push(
            m.mean_ece
                .ok_or_else(|| format!("method {} has no ECE mean", m.method))?,
        );
    }
    if disp.len() != 4 {
        return Err(format!("expected 4 methods, found {}", disp.len()));
    }
    let rho = spearman(&disp, &ece_means);
    if rho.is_nan() || rho > -0.5 {
        return Err(format!("Spearman rho = {rho:.3} exceeds -0.5"));
    }
    Ok(format!("Spearman rho = {rho:.3} over 4 methods"))
}

/// Criterion 9: feature bundles survive write -> read -> write byte-exactly,
/// and rerunning the experiment with an identical config reproduces the
/// aggregate outputs byte for byte.
fn criterion_round_trips() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    // Bundle round trip on a small synthetic dataset.
    let catalog =
        promptcal::attributes::AttributeCatalog::load(&repo_root().join("configs/catalog.json"))
            .map_err(|e| e.to_string())?;
    let encoder = Encoder::new(EncoderConfig::default(), 11).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec {
        n_classes: 3,
        samples_per_class: 5,
        d_raw: 16,
        cluster_sigma: 0.3,
        attribute_alignment: 0.5,
        shift: Shift::None,
        seed: 11,
    };
    let dataset = bench::generate(&spec, &catalog, &encoder).map_err(|e| e.to_string())?;
    let bundle = FeatureBundle::from_dataset(&dataset).map_err(|e| e.to_string())?;

    let path_a = dir.path().join("a.pcfb");
    let path_b = dir.path().join("b.pcfb");
    bench::write_bundle(&bundle, &path_a).map_err(|e| e.to_string())?;
    let read_back = bench::read_bundle(&path_a).map_err(|e| e.to_string())?;
    bench::write_bundle(&read_back, &path_b).map_err(|e| e.to_string())?;
    let bytes_a = std::fs::read(&path_a).map_err(|e| e.to_string())?;
    let bytes_b = std::fs::read(&path_b).map_err(|e| e.to_string())?;
    if bytes_a != bytes_b {
        return Err("bundle write -> read -> write changed bytes".to_string());
    }

    // Rerun determinism through the installed binary.
    let cfg_path = dir.path().join("rerun.toml");
    let catalog_path = repo_root().join("configs/catalog.json");
    let cfg_text = format!(
        r#"
name = "rerun-check"
seeds = [0, 1]
output_dir = "unused"
catalog = "{}"

[dataset]
source = "synthetic"
n_classes = 4
samples_per_class = 12
d_raw = 32
cluster_sigma = 0.35
attribute_alignment = 0.6

[augmentation]
n_views = 16

[tuner]
n_steps = 1

[[methods]]
name = "hard_prompt"

[[methods]]
name = "tpt_tca"
"#,
        catalog_path.display()
    );
    std::fs::write(&cfg_path, cfg_text).map_err(|e| e.to_string())?;

    let out_a = dir.path().join("run-a");
    let out_b = dir.path().join("run-b");
    for out in [&out_a, &out_b] {
        let output = Command::new(env!("CARGO_BIN_EXE_promptcal"))
            .arg("run")
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .env_remove(SEED_ENV_VAR)
            .output()
            .map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!(
                "run exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ));
        }
    }

    // timings.tsv is the one file allowed to differ between reruns.
    for file in [
        "manifest.toml",
        "aggregate.tsv",
        "aggregate.json",
        "samples.tsv",
    ] {
        let a = std::fs::read(out_a.join(file)).map_err(|e| format!("{file}: {e}"))?;
        let b = std::fs::read(out_b.join(file)).map_err(|e| format!("{file}: {e}"))?;
        if a != b {
            return Err(format!("{file} differs between identical reruns"));
        }
    }

    Ok("bundle bytes stable, rerun aggregates byte-identical".to_string())
}
