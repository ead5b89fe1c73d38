//! Heatmap images and the multi-model comparison report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{load_dataset, DatasetConfig, ExperimentConfig, ModelKind};
use super::run::{run_experiment, RunPaths, RunSummary};
use crate::cost::{attention_comparisons, COUNTING_NOTES};
use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::rollout::HeatMap;

/// Reference FLOP ratio of the full selector pipeline to the simple ViT (0.04 / 0.19 GFLOPs).
pub const REFERENCE_FLOP_RATIO: f64 = 0.04 / 0.19;

/// Min-max scale to 0..=255, rounding halves down; a constant map is all zeros.
pub fn heatmap_bytes(heat: &HeatMap) -> Vec<u8> {
    let lo = heat.heat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heat.heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let header = format!("P5\n{} {}\n255\n", heat.grid, heat.grid);
    let mut out = header.into_bytes();
    out.extend(heat.heat.iter().map(|&h| {
        if !(span > 0.0) {
            return 0;
        }
        let x = (h - lo) / span * 255.0;
        (x - 0.5).ceil().clamp(0.0, 255.0) as u8
    }));
    out
}

pub fn emit_heatmap_pgm(heat: &HeatMap, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_bytes(heat)).map_err(|e| Error::io(path, e))
}

/// A `g×g` PGM with 255 on the selected patches.
pub fn emit_selection_pgm(grid: usize, indices: &[usize], path: &Path) -> Result<()> {
    let mut out = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    let mut body = vec![0u8; grid * grid];
    for &i in indices {
        let cell = body
            .get_mut(i)
            .ok_or_else(|| Error::InvalidArgument(format!("patch {i} outside a {grid}x{grid} grid")))?;
        *cell = 255;
    }
    out.extend(body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub model: ModelKind,
    pub params: u64,
    pub flops: u64,
    pub transformer_flops: u64,
    pub seq_len: u64,
    pub attention_comparisons: u64,
    pub test_accuracy: Option<f64>,
    pub overlap_at_k: Option<f64>,
    /// Relative to the baseline row; absent when there is no baseline.
    pub flop_ratio: Option<f64>,
    pub transformer_flop_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: Option<String>,
    pub rows: Vec<CompareRow>,
    pub runs: Vec<RunSummary>,
    pub reference_flop_ratio: f64,
    /// `196² / 32²`, the comparison count reduction at the reference grid.
    pub reference_comparison_ratio: f64,
    pub notes: String,
}

/// Join run summaries into one table. The baseline is the first simple ViT,
/// else the first teacher.
pub fn build_report(runs: Vec<RunSummary>) -> CompareReport {
    let baseline = runs
        .iter()
        .find(|r| r.model == ModelKind::SimpleVit)
        .or_else(|| runs.iter().find(|r| r.model == ModelKind::TeacherVit))
        .map(|r| (r.name.clone(), r.cost.flops_total, r.cost.transformer_flops()));
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let rows = runs
        .iter()
        .map(|r| CompareRow {
            name: r.name.clone(),
            model: r.model,
            params: r.cost.params_total,
            flops: r.cost.flops_total,
            transformer_flops: r.cost.transformer_flops(),
            seq_len: r.cost.seq_len,
            attention_comparisons: r.cost.attention_comparisons,
            test_accuracy: r.test.accuracy,
            overlap_at_k: r.test.selector.map(|s| s.overlap_at_k),
            flop_ratio: baseline.as_ref().and_then(|b| ratio(r.cost.flops_total, b.1)),
            transformer_flop_ratio: baseline
                .as_ref()
                .filter(|_| r.model != ModelKind::Selector)
                .and_then(|b| ratio(r.cost.transformer_flops(), b.2)),
        })
        .collect();
    CompareReport {
        baseline: baseline.map(|b| b.0),
        rows,
        runs,
        reference_flop_ratio: REFERENCE_FLOP_RATIO,
        reference_comparison_ratio: attention_comparisons(196) as f64 / attention_comparisons(32) as f64,
        notes: COUNTING_NOTES.to_string(),
    }
}

fn opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.*}", digits, x * scale))
}

/// Aligned plain-text rendering of the report.
pub fn render_table(report: &CompareReport) -> String {
    let header = [
        "model", "kind", "params", "FLOPs", "xfmr FLOPs", "seq", "acc %", "overlap", "FLOP ratio", "xfmr ratio",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in &report.rows {
        rows.push(vec![
            r.name.clone(),
            serde_json::to_value(r.model).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            r.params.to_string(),
            r.flops.to_string(),
            r.transformer_flops.to_string(),
            r.seq_len.to_string(),
            opt(r.test_accuracy, 100.0, 2),
            opt(r.overlap_at_k, 1.0, 3),
            opt(r.flop_ratio, 1.0, 3),
            opt(r.transformer_flop_ratio, 1.0, 3),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out.push_str(&format!(
        "reference: pipeline/simple FLOPs {:.3} (0.04/0.19 GFLOPs), comparisons 196^2/32^2 = {:.2}\n",
        report.reference_flop_ratio, report.reference_comparison_ratio
    ));
    out
}

/// Train and evaluate every config in order under `out_dir/<name>/`, then
/// write `report.json` and `report.txt`. Relative paths in the configs
/// resolve against `out_dir`, so later runs can point at earlier artifacts.
pub fn compare(configs: &[ExperimentConfig], data_dir: Option<&Path>, out_dir: &Path) -> Result<CompareReport> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for c in configs {
        if !names.insert(c.name.as_str()) {
            return Err(Error::Config(format!("duplicate run name '{}'", c.name)));
        }
    }
    let mut datasets: BTreeMap<String, DatasetSplits> = BTreeMap::new();
    let mut runs = Vec::new();
    for cfg in configs {
        let wrap = |e: Error| Error::Run {
            run: cfg.name.clone(),
            source: Box::new(e),
        };
        let key = dataset_key(&cfg.dataset);
        if !datasets.contains_key(&key) {
            let d = load_dataset(&cfg.dataset, data_dir).map_err(wrap)?;
            datasets.insert(key.clone(), d);
        }
        let paths = RunPaths {
            base_dir: out_dir.to_path_buf(),
            out_dir: out_dir.join(&cfg.name),
        };
        let result = run_experiment(cfg, &datasets[&key], &paths).map_err(wrap)?;
        runs.push(result.summary);
    }
    let report = build_report(runs);
    write_report(&report, out_dir)?;
    Ok(report)
}

fn dataset_key(d: &DatasetConfig) -> String {
    serde_json::to_string(d).expect("dataset config serializes")
}

pub fn write_report(report: &CompareReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json: PathBuf = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    let txt = out_dir.join("report.txt");
    std::fs::write(&txt, render_table(report)).map_err(|e| Error::io(&txt, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_example() {
        let h = HeatMap::new(vec![0.0, 1.0, 0.5, 1.0]).unwrap();
        let b = heatmap_bytes(&h);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 255, 127, 255]);
    }

    #[test]
    fn constant_heat_is_black() {
        let h = HeatMap::new(vec![0.3; 9]).unwrap();
        let b = heatmap_bytes(&h);
        let header_len = b"P5\n3 3\n255\n".len();
        assert_eq!(b.len(), header_len + 9);
        assert!(b[header_len..].iter().all(|&v| v == 0));
    }

    #[test]
    fn write_failure_names_the_path() {
        let h = HeatMap::new(vec![0.0; 4]).unwrap();
        let err = emit_heatmap_pgm(&h, Path::new("/nonexistent/dir/x.pgm")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.pgm"));
    }
}
