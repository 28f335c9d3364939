//! Experiment execution: per-sample episodic tuning over every
//! (method, seed) cell, aggregation, and deterministic result files.
//!
//! Wall-clock times go to their own file so every other output is
//! byte-identical across reruns of the same config.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use promptcal::attributes::{rank_attributes, AttributeCatalog};
use promptcal::bench::{generate, read_bundle, Dataset};
use promptcal::calibration::{accuracy, dispersion_summary, ece, PredictionRecord};
use promptcal::embed::{mix64, EmbeddingVector, Encoder};
use promptcal::error::{Error, Result};
use promptcal::objective::{encode_prompt, ClassifierConfig};
use promptcal::tuner::{
    ensemble_predict, init_prompt, init_prompt_plain, predict, tune_on_sample, EnsembleSpec,
    EpisodeContext, PromptState, DEFAULT_TEMPLATE, ENSEMBLE_TEMPLATES,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ResolvedConfig, ResolvedMethod};

/// One aggregate line per (method, seed). Metric fields are absent when the
/// cell scored no samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSeedRow {
    pub method: String,
    pub seed: u64,
    pub n_scored: usize,
    pub n_failed: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub mean_atfd: Option<f64>,
    pub mean_mtas: Option<f64>,
}

/// Per-method means over seeds, used by the dispersion scatter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodMeans {
    pub method: String,
    pub mean_accuracy: Option<f64>,
    pub mean_ece: Option<f64>,
    pub mean_atfd: Option<f64>,
    pub mean_mtas: Option<f64>,
}

/// The structured aggregate document mirrored by aggregate.tsv.
#[derive(Debug, Serialize, Deserialize)]
pub struct AggregateDoc {
    pub rows: Vec<MethodSeedRow>,
    pub method_means: Vec<MethodMeans>,
}

/// One samples.tsv line.
#[derive(Debug, Clone)]
pub struct SampleLine {
    pub sample: usize,
    pub scored: bool,
    pub predicted: Option<usize>,
    pub true_label: usize,
    pub confidence: Option<f64>,
    pub note: String,
}

/// Tuned text embedding of one (class, attribute segment) pair.
#[derive(Debug, Clone)]
pub struct SnapshotRow {
    pub class_name: String,
    pub segment: usize,
    pub coords: Vec<f64>,
}

struct CellResult {
    row: MethodSeedRow,
    lines: Vec<SampleLine>,
    snapshot: Option<Vec<SnapshotRow>>,
    wall_seconds: f64,
}

/// Everything loaded before compute starts, so configuration problems
/// surface before any tuning work.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub catalog: AttributeCatalog,
    pub per_seed: Vec<SeedData>,
}

#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub encoder: Encoder,
    pub dataset: Dataset,
}

pub fn prepare(cfg: &ResolvedConfig) -> Result<Prepared> {
    let catalog = AttributeCatalog::load(&cfg.catalog)?;
    let bundle_dataset = match &cfg.dataset {
        DatasetConfig::Bundle { path } => {
            let dataset = read_bundle(path)?.to_dataset()?;
            for name in &dataset.class_names {
                if name.is_empty() || name.chars().any(|c| c.is_control()) {
                    return Err(Error::InvalidArgument(format!(
                        "bundle class name {name:?} is empty or contains control characters"
                    )));
                }
            }
            if dataset.is_empty() {
                return Err(Error::InvalidArgument(
                    "feature bundle has no samples".into(),
                ));
            }
            Some(dataset)
        }
        DatasetConfig::Synthetic { .. } => None,
    };
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let encoder = Encoder::new(cfg.encoder.to_library(), seed)?;
        let dataset = match &bundle_dataset {
            Some(d) => d.clone(),
            None => generate(
                &crate::config::synthetic_spec(&cfg.dataset, seed)?,
                &catalog,
                &encoder,
            )?,
        };
        per_seed.push(SeedData {
            seed,
            encoder,
            dataset,
        });
    }
    if cfg.methods.iter().any(|m| m.use_attributes) {
        for sd in &per_seed {
            for class in &sd.dataset.class_names {
                catalog.attributes_for(class)?;
            }
        }
    }
    Ok(Prepared { catalog, per_seed })
}

fn build_initials(
    method: &ResolvedMethod,
    dataset: &Dataset,
    catalog: &AttributeCatalog,
    encoder: &Encoder,
) -> Result<(Vec<String>, Vec<PromptState>)> {
    let templates: Vec<String> = if method.ensemble {
        ENSEMBLE_TEMPLATES.iter().map(|t| t.to_string()).collect()
    } else {
        vec![DEFAULT_TEMPLATE.to_string()]
    };
    let selected: Option<Vec<Vec<String>>> = if method.use_attributes {
        let mut per_class = Vec::with_capacity(dataset.class_names.len());
        for class in &dataset.class_names {
            let ranked =
                rank_attributes(class, catalog.attributes_for(class)?, encoder, method.top_m)?;
            per_class.push(ranked.selected);
        }
        Some(per_class)
    } else {
        None
    };
    let mut initials = Vec::with_capacity(templates.len());
    for t in &templates {
        let prompt = match &selected {
            Some(attrs) => init_prompt(t, &dataset.class_names, attrs, encoder)?,
            None => init_prompt_plain(t, &dataset.class_names, encoder)?,
        };
        initials.push(prompt);
    }
    Ok((templates, initials))
}

struct SampleOutcome {
    line: SampleLine,
    atfd: Option<f64>,
    mtas: Option<f64>,
    snapshot: Option<Vec<SnapshotRow>>,
}

#[allow(clippy::too_many_arguments)]
fn process_sample(
    idx: usize,
    raw: &EmbeddingVector,
    true_label: usize,
    cfg: &ResolvedConfig,
    method: &ResolvedMethod,
    seed: u64,
    templates: &[String],
    initials: &[PromptState],
    ctx: &EpisodeContext,
    want_snapshot: bool,
) -> Result<SampleOutcome> {
    let aug = cfg.augmentation.for_seed(mix64(seed, idx as u64));
    let weights = method.weights();
    let mut prompts = Vec::with_capacity(initials.len());
    if method.n_steps == 0 {
        prompts.extend(initials.iter().cloned());
    } else {
        let tuner_cfg = cfg
            .tuner
            .to_library(method.n_steps, cfg.augmentation.n_views);
        for init in initials {
            match tune_on_sample(raw, init, &tuner_cfg, &aug, &weights, ctx) {
                Ok(outcome) => prompts.push(outcome.prompt),
                Err(Error::Numeric { step, reason }) => {
                    return Ok(SampleOutcome {
                        line: SampleLine {
                            sample: idx,
                            scored: false,
                            predicted: None,
                            true_label,
                            confidence: None,
                            note: format!("numeric failure at step {step}: {reason}"),
                        },
                        atfd: None,
                        mtas: None,
                        snapshot: None,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
    let prediction = if prompts.len() == 1 {
        predict(raw, &prompts[0], ctx)?
    } else {
        let spec = EnsembleSpec {
            templates: templates.to_vec(),
        };
        ensemble_predict(raw, &spec, &prompts, ctx)?
    };
    let mut atfd_sum = 0.0;
    let mut mtas_sum = 0.0;
    let mut snapshot = None;
    for (pi, prompt) in prompts.iter().enumerate() {
        let encoding = encode_prompt(prompt, ctx.encoder)?;
        let (a, m) = dispersion_summary(&encoding.class_set)?;
        atfd_sum += a;
        mtas_sum += m;
        if pi == 0 && want_snapshot {
            let mut rows = Vec::new();
            for (ci, class_embeds) in encoding.text_embeds.iter().enumerate() {
                for (si, embed) in class_embeds.iter().enumerate() {
                    rows.push(SnapshotRow {
                        class_name: prompt.classes()[ci].class_name.clone(),
                        segment: si,
                        coords: embed.values().to_vec(),
                    });
                }
            }
            snapshot = Some(rows);
        }
    }
    let k = prompts.len() as f64;
    Ok(SampleOutcome {
        line: SampleLine {
            sample: idx,
            scored: true,
            predicted: Some(prediction.label),
            true_label,
            confidence: Some(prediction.confidence),
            note: String::new(),
        },
        atfd: Some(atfd_sum / k),
        mtas: Some(mtas_sum / k),
        snapshot,
    })
}

fn run_cell(
    cfg: &ResolvedConfig,
    method: &ResolvedMethod,
    sd: &SeedData,
    catalog: &AttributeCatalog,
    want_snapshot: bool,
) -> Result<CellResult> {
    let start = Instant::now();
    let classifier =
        ClassifierConfig::new(cfg.classifier.temperature, sd.dataset.class_names.len())?;
    let ctx = EpisodeContext {
        encoder: &sd.encoder,
        classifier: &classifier,
    };
    let (templates, initials) = build_initials(method, &sd.dataset, catalog, &sd.encoder)?;

    let outcomes: Vec<SampleOutcome> = (0..sd.dataset.len())
        .into_par_iter()
        .map(|idx| {
            process_sample(
                idx,
                &sd.dataset.features[idx],
                sd.dataset.labels[idx],
                cfg,
                method,
                sd.seed,
                &templates,
                &initials,
                &ctx,
                want_snapshot,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let records: Vec<PredictionRecord> = outcomes
        .iter()
        .filter(|o| o.line.scored)
        .map(|o| PredictionRecord {
            predicted_label: o.line.predicted.unwrap(),
            true_label: o.line.true_label,
            confidence: o.line.confidence.unwrap(),
        })
        .collect();
    let n_scored = records.len();
    let n_failed = outcomes.len() - n_scored;
    let (acc, e) = if records.is_empty() {
        (None, None)
    } else {
        (
            Some(accuracy(&records)?),
            Some(ece(&records, cfg.n_bins)?.0),
        )
    };
    let mean_of = |get: fn(&SampleOutcome) -> Option<f64>| {
        if n_scored == 0 {
            None
        } else {
            Some(outcomes.iter().filter_map(get).sum::<f64>() / n_scored as f64)
        }
    };
    let row = MethodSeedRow {
        method: method.name.clone(),
        seed: sd.seed,
        n_scored,
        n_failed,
        accuracy: acc,
        ece: e,
        mean_atfd: mean_of(|o| o.atfd),
        mean_mtas: mean_of(|o| o.mtas),
    };
    let snapshot = outcomes.iter().find_map(|o| o.snapshot.clone());
    let lines = outcomes.into_iter().map(|o| o.line).collect();
    Ok(CellResult {
        row,
        lines,
        snapshot,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything a run produces, in final output order (method-major).
pub struct Computed {
    pub rows: Vec<MethodSeedRow>,
    pub method_means: Vec<MethodMeans>,
    pub sample_blocks: Vec<(String, u64, Vec<SampleLine>)>,
    pub snapshots: Vec<(String, Vec<SnapshotRow>)>,
    pub timings: Vec<(String, u64, f64)>,
    pub total_failed: usize,
}

pub fn compute(cfg: &ResolvedConfig, prepared: &Prepared) -> Result<Computed> {
    let n_methods = cfg.methods.len();
    let n_seeds = prepared.per_seed.len();
    let mut cells: Vec<Vec<Option<CellResult>>> = (0..n_methods)
        .map(|_| (0..n_seeds).map(|_| None).collect())
        .collect();
    for (si, sd) in prepared.per_seed.iter().enumerate() {
        for (mi, method) in cfg.methods.iter().enumerate() {
            let cell = run_cell(cfg, method, sd, &prepared.catalog, si == 0)?;
            cells[mi][si] = Some(cell);
        }
    }

    let mut rows = Vec::with_capacity(n_methods * n_seeds);
    let mut sample_blocks = Vec::with_capacity(n_methods * n_seeds);
    let mut snapshots = Vec::with_capacity(n_methods);
    let mut timings = Vec::with_capacity(n_methods * n_seeds);
    let mut method_means = Vec::with_capacity(n_methods);
    let mut total_failed = 0;
    for (mi, method) in cfg.methods.iter().enumerate() {
        let mut first_snapshot = None;
        for (si, cell) in cells[mi].iter_mut().enumerate() {
            let cell = cell.take().unwrap();
            total_failed += cell.row.n_failed;
            timings.push((method.name.clone(), cell.row.seed, cell.wall_seconds));
            sample_blocks.push((method.name.clone(), cell.row.seed, cell.lines));
            if si == 0 {
                first_snapshot = cell.snapshot;
            }
            rows.push(cell.row);
        }
        if let Some(snap) = first_snapshot {
            snapshots.push((method.name.clone(), snap));
        }
        let method_rows = &rows[mi * n_seeds..(mi + 1) * n_seeds];
        let mean_of = |get: fn(&MethodSeedRow) -> Option<f64>| {
            let values: Vec<f64> = method_rows.iter().filter_map(get).collect();
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        };
        method_means.push(MethodMeans {
            method: method.name.clone(),
            mean_accuracy: mean_of(|r| r.accuracy),
            mean_ece: mean_of(|r| r.ece),
            mean_atfd: mean_of(|r| r.mean_atfd),
            mean_mtas: mean_of(|r| r.mean_mtas),
        });
    }
    Ok(Computed {
        rows,
        method_means,
        sample_blocks,
        snapshots,
        timings,
        total_failed,
    })
}

fn fmt_opt_f(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NaN".to_string(),
    }
}

fn fmt_opt_u(v: Option<usize>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

pub fn write_outputs(cfg: &ResolvedConfig, computed: &Computed) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join("snapshots"))?;

    write_file(&out.join("manifest.toml"), &cfg.manifest_toml()?)?;

    let mut samples = String::from(
        "method\tseed\tsample\tstatus\tpredicted_label\ttrue_label\tconfidence\tnote\n",
    );
    for (method, seed, lines) in &computed.sample_blocks {
        for l in lines {
            let status = if l.scored { "scored" } else { "failed" };
            samples.push_str(&format!(
                "{method}\t{seed}\t{}\t{status}\t{}\t{}\t{}\t{}\n",
                l.sample,
                fmt_opt_u(l.predicted),
                l.true_label,
                l.confidence.map_or(String::new(), |c| format!("{c}")),
                l.note
            ));
        }
    }
    write_file(&out.join("samples.tsv"), &samples)?;

    let mut aggregate =
        String::from("method\tseed\tn_scored\tn_failed\taccuracy\tece\tmean_atfd\tmean_mtas\n");
    for r in &computed.rows {
        aggregate.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.method,
            r.seed,
            r.n_scored,
            r.n_failed,
            fmt_opt_f(r.accuracy),
            fmt_opt_f(r.ece),
            fmt_opt_f(r.mean_atfd),
            fmt_opt_f(r.mean_mtas)
        ));
    }
    write_file(&out.join("aggregate.tsv"), &aggregate)?;

    let doc = AggregateDoc {
        rows: computed.rows.clone(),
        method_means: computed.method_means.clone(),
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Format(format!("aggregate serialization failed: {e}")))?;
    write_file(&out.join("aggregate.json"), &format!("{json}\n"))?;

    let mut timings = String::from("method\tseed\twall_seconds\n");
    for (method, seed, secs) in &computed.timings {
        timings.push_str(&format!("{method}\t{seed}\t{secs:.3}\n"));
    }
    write_file(&out.join("timings.tsv"), &timings)?;

    for (method, snap) in &computed.snapshots {
        let stem = cfg
            .methods
            .iter()
            .find(|m| &m.name == method)
            .map(|m| m.file_stem())
            .unwrap_or_else(|| method.clone());
        let dim = snap.first().map_or(0, |r| r.coords.len());
        let mut text = String::from("class_name\tsegment");
        for d in 0..dim {
            text.push_str(&format!("\te{d}"));
        }
        text.push('\n');
        for r in snap {
            text.push_str(&format!("{}\t{}", r.class_name, r.segment));
            for c in &r.coords {
                text.push_str(&format!("\t{c}"));
            }
            text.push('\n');
        }
        write_file(
            &out.join("snapshots").join(format!("embeddings_{stem}.tsv")),
            &text,
        )?;
    }
    Ok(())
}

pub struct RunOutput {
    pub out_dir: PathBuf,
    pub rows: Vec<MethodSeedRow>,
    pub method_means: Vec<MethodMeans>,
    pub total_failed: usize,
}

/// Prepares inputs, runs every (method, seed) cell, and writes all result
/// files into the config's output directory.
pub fn run_experiment(cfg: &ResolvedConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    let computed = compute(cfg, &prepared)?;
    write_outputs(cfg, &computed)?;
    Ok(RunOutput {
        out_dir: cfg.output_dir.clone(),
        rows: computed.rows,
        method_means: computed.method_means,
        total_failed: computed.total_failed,
    })
}
