//! Post-hoc summaries of training runs from their metrics logs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::ema;
use crate::trainer::{zero_variance_ratio, StepMetrics, EMA_ALPHA};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}: no step records")]
    Empty(PathBuf),
}

/// Reads a `metrics.jsonl` file (blank lines ignored).
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, AnalysisError> {
    let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(line).map_err(|source| AnalysisError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub run_id: String,
    pub steps: usize,
    /// Zero-variance ratio over the first, middle and last third of steps.
    pub stage_zero_variance: [f64; 3],
    pub overall_zero_variance: f64,
    pub initial_reward: f64,
    pub final_smoothed_reward: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub mean_grad_norm: f64,
    pub final_entropy: f64,
    /// Fraction of steps containing a zero-variance group whose
    /// zero-variance groups still produced a nonzero advantage gradient.
    pub zero_variance_gradient_coverage: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Splits `n` steps into three contiguous stages of near-equal size.
pub fn stage_bounds(n: usize) -> [std::ops::Range<usize>; 3] {
    let a = n / 3;
    let b = 2 * n / 3;
    [0..a, a..b, b..n]
}

pub fn analyze_metrics(run_id: &str, metrics: &[StepMetrics]) -> RunAnalysis {
    let stages = stage_bounds(metrics.len()).map(|r| zero_variance_ratio(&metrics[r]));
    let rewards: Vec<f64> = metrics.iter().map(|m| m.mean_reward).collect();
    let zv: Vec<&StepMetrics> = metrics
        .iter()
        .filter(|m| m.has_zero_variance_group())
        .collect();
    RunAnalysis {
        run_id: run_id.to_string(),
        steps: metrics.len(),
        stage_zero_variance: stages,
        overall_zero_variance: zero_variance_ratio(metrics),
        initial_reward: rewards.first().copied().unwrap_or(0.0),
        final_smoothed_reward: ema(&rewards, EMA_ALPHA).last().copied().unwrap_or(0.0),
        mean_kl: mean(metrics.iter().map(|m| m.mean_kl)),
        max_kl: metrics.iter().map(|m| m.mean_kl).fold(0.0, f64::max),
        mean_grad_norm: mean(metrics.iter().map(|m| m.grad_norm)),
        final_entropy: metrics.last().map_or(0.0, |m| m.mean_entropy),
        zero_variance_gradient_coverage: (!zv.is_empty()).then(|| {
            zv.iter()
                .filter(|m| m.zero_variance_reward_grad_norm > 0.0)
                .count() as f64
                / zv.len() as f64
        }),
    }
}

/// Analyzes a run directory (or a `metrics.jsonl` file directly). The run ID
/// is the directory name.
pub fn analyze_run(path: &Path) -> Result<RunAnalysis, AnalysisError> {
    let (file, id_source) = if path.is_dir() {
        (path.join("metrics.jsonl"), path)
    } else {
        (path.to_path_buf(), path.parent().unwrap_or(path))
    };
    let metrics = read_metrics(&file)?;
    if metrics.is_empty() {
        return Err(AnalysisError::Empty(file));
    }
    let id = id_source
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    Ok(analyze_metrics(&id, &metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunAnalysis>,
    /// Run with the highest final smoothed reward.
    pub best_run: String,
}

pub fn compare(runs: Vec<RunAnalysis>) -> Option<Comparison> {
    let best = runs
        .iter()
        .max_by(|a, b| a.final_smoothed_reward.total_cmp(&b.final_smoothed_reward))?
        .run_id
        .clone();
    Some(Comparison {
        runs,
        best_run: best,
    })
}

/// Renders the smoothed reward curve of each run as a small SVG line plot.
pub fn reward_plot_svg(curves: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 240.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    for (k, (name, raw)) in curves.iter().enumerate() {
        let ys = ema(raw, EMA_ALPHA);
        let n = ys.len().max(2) - 1;
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                format!(
                    "{:.1},{:.1}",
                    10.0 + (W - 20.0) * i as f64 / n as f64,
                    H - 10.0 - (H - 20.0) * y.clamp(0.0, 1.0)
                )
            })
            .collect();
        let color = COLORS[k % COLORS.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n<text x=\"14\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            points.join(" "),
            18 + 14 * k,
            xml_escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
