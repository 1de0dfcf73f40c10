//! Result files: deterministic CSV bodies, atomic writes, aggregation.
//!
//! Floats are printed with nine significant digits, enough to round-trip f32
//! exactly. Writers go through a temp file plus rename so an interrupted run
//! never leaves a partial file. Timestamps and wall times live only in the
//! JSON run manifest; CSV bodies are byte-identical across reruns.

use super::{HarnessError, HarnessResult, TrialRow};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub(crate) const CSV_HEADER: [&str; 12] = [
    "experiment_id",
    "preset",
    "site_scope",
    "kind",
    "bits_w",
    "bits_a",
    "transform",
    "seed",
    "metric",
    "baseline",
    "value",
    "delta",
];

/// Nine significant digits, round-trip-safe for f32-precision values.
pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn atomic_write(path: &Path, bytes: &[u8]) -> HarnessResult<()> {
    let tmp = path.with_extension(format!(
        "tmp.{}",
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the trials table. Byte-identical for identical row sequences.
pub fn write_csv_atomic(path: &Path, rows: &[&TrialRow]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.experiment_id.as_str(),
            r.preset.as_str(),
            r.site_scope.as_str(),
            r.kind.as_str(),
            r.bits_w.as_str(),
            r.bits_a.as_str(),
            r.transform.as_str(),
            &r.seed.to_string(),
            r.metric.as_str(),
            &fmt_float(r.baseline),
            &fmt_float(r.value),
            &fmt_float(r.delta),
        ])
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Reads a trials table written by [`write_csv_atomic`].
pub fn read_rows(path: &Path) -> HarnessResult<Vec<TrialRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Io(e.to_string()))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| HarnessError::Io(e.to_string()))?;
        if r.len() != CSV_HEADER.len() {
            return Err(HarnessError::Config(format!(
                "bad results row: expected {} fields, got {}",
                CSV_HEADER.len(),
                r.len()
            )));
        }
        let parse = |i: usize| -> HarnessResult<f64> {
            r[i].parse::<f64>()
                .map_err(|e| HarnessError::Config(format!("bad float '{}': {e}", &r[i])))
        };
        rows.push(TrialRow {
            experiment_id: r[0].to_string(),
            preset: r[1].to_string(),
            site_scope: r[2].to_string(),
            kind: r[3].to_string(),
            bits_w: r[4].to_string(),
            bits_a: r[5].to_string(),
            transform: r[6].to_string(),
            seed: r[7]
                .parse()
                .map_err(|e| HarnessError::Config(format!("bad seed '{}': {e}", &r[7])))?,
            metric: r[8].to_string(),
            baseline: parse(9)?,
            value: parse(10)?,
            delta: parse(11)?,
        });
    }
    Ok(rows)
}

/// Serializes `value` as pretty JSON through the temp-rename path.
pub fn write_json_atomic(path: &Path, value: &serde_json::Value) -> HarnessResult<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    atomic_write(path, body.as_bytes())
}

/// Writes a two-column (step, loss) training curve.
pub fn write_loss_curve(path: &Path, curve: &[f64]) -> HarnessResult<()> {
    let mut body = String::from("step,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        body.push_str(&format!("{},{}\n", i + 1, fmt_float(*loss)));
    }
    atomic_write(path, body.as_bytes())
}

/// Per-setting mean ± std summary over seeds, plus plot-ready `.dat` files.
///
/// The summary groups rows by everything except the seed; the `.dat` file
/// for each metric holds one `x mean std` line per group, where x is the
/// group's numeric label when it parses (e.g. a sweep alpha) and the group
/// index otherwise.
pub fn aggregate_report(rows: &[TrialRow], out_dir: &Path) -> HarnessResult<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    type Key = (String, String, String, String, String, String, String);
    let mut groups: BTreeMap<Key, Vec<&TrialRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.experiment_id.clone(),
            r.preset.clone(),
            r.kind.clone(),
            r.bits_w.clone(),
            r.bits_a.clone(),
            r.transform.clone(),
            r.metric.clone(),
        );
        groups.entry(key).or_default().push(r);
    }

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary
        .write_record([
            "experiment_id",
            "preset",
            "kind",
            "bits_w",
            "bits_a",
            "transform",
            "metric",
            "n",
            "baseline_mean",
            "value_mean",
            "value_std",
            "delta_mean",
        ])
        .map_err(|e| HarnessError::Io(e.to_string()))?;

    let mut dat_lines: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut group_index: BTreeMap<String, usize> = BTreeMap::new();
    for ((eid, preset, kind, bw, ba, tf, metric), rs) in &groups {
        let n = rs.len() as f64;
        let mean = rs.iter().map(|r| r.value).sum::<f64>() / n;
        let var = rs.iter().map(|r| (r.value - mean) * (r.value - mean)).sum::<f64>() / n;
        let baseline_mean = rs.iter().map(|r| r.baseline).sum::<f64>() / n;
        let delta_mean = rs.iter().map(|r| r.delta).sum::<f64>() / n;
        summary
            .write_record([
                eid.as_str(),
                preset.as_str(),
                kind.as_str(),
                bw.as_str(),
                ba.as_str(),
                tf.as_str(),
                metric.as_str(),
                &rs.len().to_string(),
                &fmt_float(baseline_mean),
                &fmt_float(mean),
                &fmt_float(var.sqrt()),
                &fmt_float(delta_mean),
            ])
            .map_err(|e| HarnessError::Io(e.to_string()))?;

        let label = format!("{preset}/{kind}/{tf}");
        let idx = *group_index
            .entry(metric.clone())
            .and_modify(|i| *i += 1)
            .or_insert(0);
        let x = label
            .split('/')
            .find_map(|part| part.trim_end_matches('x').parse::<f64>().ok())
            .unwrap_or(idx as f64);
        dat_lines.entry(metric.clone()).or_default().push(format!(
            "{} {} {}  # {label}",
            x,
            fmt_float(mean),
            fmt_float(var.sqrt())
        ));
    }

    let mut written = Vec::new();
    let summary_path = out_dir.join("summary.csv");
    let bytes = summary.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    atomic_write(&summary_path, &bytes)?;
    written.push(summary_path);

    for (metric, lines) in dat_lines {
        let path = out_dir.join(format!("{metric}.dat"));
        let mut body = format!("# {metric}: x mean std\n");
        for line in lines {
            body.push_str(&line);
            body.push('\n');
        }
        atomic_write(&path, body.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
