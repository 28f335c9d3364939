//! Plot data emission from a finished results directory: reliability
//! diagram tables, 2-D PCA of tuned text embeddings, and the
//! ECE-versus-dispersion scatter.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use promptcal::calibration::{ece, pca_projection, PredictionRecord};
use promptcal::embed::EmbeddingVector;
use promptcal::error::{Error, Result};

use crate::config::file_stem_of;
use crate::experiment::AggregateDoc;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(String::from).collect())
}

fn parse_field<T: std::str::FromStr>(field: &str, what: &str, line_no: usize) -> Result<T> {
    field.parse().map_err(|_| {
        Error::Format(format!(
            "line {line_no}: cannot parse {what} from {field:?}"
        ))
    })
}

/// n_bins as echoed by the manifest.
fn manifest_n_bins(results_dir: &Path) -> Result<usize> {
    let path = results_dir.join("manifest.toml");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let value: toml::Value = text
        .parse()
        .map_err(|e| Error::Format(format!("manifest parse error: {e}")))?;
    value
        .get("n_bins")
        .and_then(|v| v.as_integer())
        .filter(|&n| n >= 1)
        .map(|n| n as usize)
        .ok_or_else(|| Error::Format("manifest lacks a positive n_bins".into()))
}

fn load_aggregate(results_dir: &Path) -> Result<AggregateDoc> {
    let path = results_dir.join("aggregate.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    let doc: AggregateDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("aggregate parse error: {e}")))?;
    if doc.rows.is_empty() {
        return Err(Error::InvalidArgument(
            "results contain no aggregate rows".into(),
        ));
    }
    Ok(doc)
}

/// Scored records pooled across seeds, per method, in samples.tsv order.
fn load_records(results_dir: &Path) -> Result<Vec<(String, Vec<PredictionRecord>)>> {
    let lines = read_lines(&results_dir.join("samples.tsv"))?;
    let mut per_method: Vec<(String, Vec<PredictionRecord>)> = Vec::new();
    for (no, line) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!(
                "samples.tsv line {}: expected 8 fields, got {}",
                no + 1,
                fields.len()
            )));
        }
        if fields[3] != "scored" {
            continue;
        }
        let record = PredictionRecord {
            predicted_label: parse_field(fields[4], "predicted label", no + 1)?,
            true_label: parse_field(fields[5], "true label", no + 1)?,
            confidence: parse_field(fields[6], "confidence", no + 1)?,
        };
        match per_method.iter_mut().find(|(m, _)| m == fields[0]) {
            Some((_, records)) => records.push(record),
            None => per_method.push((fields[0].to_string(), vec![record])),
        }
    }
    Ok(per_method)
}

/// Per-row (class name, segment index) labels plus the embedding vectors.
type SnapshotRows = (Vec<(String, usize)>, Vec<EmbeddingVector>);

fn load_snapshot(path: &Path) -> Result<SnapshotRows> {
    let lines = read_lines(path)?;
    let mut labels = Vec::new();
    let mut embeds = Vec::new();
    for (no, line) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "{} line {}: expected class, segment, and coordinates",
                path.display(),
                no + 1
            )));
        }
        let segment: usize = parse_field(fields[1], "segment", no + 1)?;
        let coords = fields[2..]
            .iter()
            .map(|f| parse_field::<f64>(f, "coordinate", no + 1))
            .collect::<Result<Vec<f64>>>()?;
        labels.push((fields[0].to_string(), segment));
        embeds.push(EmbeddingVector::new(coords)?);
    }
    Ok((labels, embeds))
}

fn write_file(path: &Path, content: &str) -> Result<PathBuf> {
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(path.to_path_buf())
}

/// Emits all plot tables for a results directory and returns the files
/// written. Methods whose inputs are absent (no scored samples, no
/// snapshot) simply contribute no file.
pub fn emit_plot_data(results_dir: &Path) -> Result<Vec<PathBuf>> {
    let doc = load_aggregate(results_dir)?;
    let n_bins = manifest_n_bins(results_dir)?;
    let plots_dir = results_dir.join("plots");
    fs::create_dir_all(&plots_dir)?;
    let mut written = Vec::new();

    for (method, records) in load_records(results_dir)? {
        let (_, bins) = ece(&records, n_bins)?;
        let mut text =
            String::from("bin_index\tlower\tupper\tcenter\tcount\taccuracy\tmean_confidence\n");
        for b in &bins {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                b.bin_index,
                b.lower,
                b.upper,
                (b.lower + b.upper) / 2.0,
                b.count,
                b.accuracy,
                b.mean_confidence
            ));
        }
        let stem = file_stem_of(&method);
        written.push(write_file(
            &plots_dir.join(format!("reliability_{stem}.tsv")),
            &text,
        )?);
    }

    for means in &doc.method_means {
        let stem = file_stem_of(&means.method);
        let snap_path = results_dir
            .join("snapshots")
            .join(format!("embeddings_{stem}.tsv"));
        if !snap_path.is_file() {
            continue;
        }
        let (labels, embeds) = load_snapshot(&snap_path)?;
        if embeds.is_empty() {
            continue;
        }
        let out_dim = embeds[0].dim().min(2);
        let coords = pca_projection(&embeds, out_dim, 0)?;
        let mut text = String::from("class_name\tsegment\tx\ty\n");
        for ((class, segment), c) in labels.iter().zip(&coords) {
            let y = if out_dim > 1 { c[1] } else { 0.0 };
            text.push_str(&format!("{class}\t{segment}\t{}\t{y}\n", c[0]));
        }
        written.push(write_file(
            &plots_dir.join(format!("pca_{stem}.tsv")),
            &text,
        )?);
    }

    let mut scatter = String::from("method\tmean_atfd\tmean_ece\n");
    for means in &doc.method_means {
        let fmt = |v: Option<f64>| v.map_or("NaN".to_string(), |x| format!("{x}"));
        scatter.push_str(&format!(
            "{}\t{}\t{}\n",
            means.method,
            fmt(means.mean_atfd),
            fmt(means.mean_ece)
        ));
    }
    written.push(write_file(&plots_dir.join("scatter.tsv"), &scatter)?);
    Ok(written)
}
