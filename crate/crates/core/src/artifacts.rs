//! Run manifests, metric CSVs and small SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::IterationMetrics;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run. Deliberately free of wall-clock
/// data so identical runs write identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub scenario: Option<String>,
    pub config: RunConfig,
    pub package: String,
    pub version: String,
    pub checkpoint_format: String,
    /// Subcommand-specific arguments.
    pub arguments: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, scenario: Option<&Path>, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed,
            scenario: scenario.map(|p| p.display().to_string()),
            config: config.clone(),
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: String::from_utf8_lossy(crate::autodiff::checkpoint::MAGIC).into_owned(),
            arguments: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl std::fmt::Display) {
        self.arguments.insert(key.to_string(), value.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A single-series line chart.
pub fn line_chart_svg(title: &str, x_label: &str, ys: &[f64]) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if finite.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = ys.len().max(2) as f64 - 1.0;
    let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    s.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = write!(
        s,
        r##"<path d="M{pad} {pad} V{} H{}" stroke="#444" fill="none"/>"##,
        h - pad,
        w - pad
    );
    for (v, y) in [(hi, pad), (lo, h - pad)] {
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            pad - 4.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let mut d = String::new();
    for (i, &v) in ys.iter().enumerate().filter(|(_, v)| v.is_finite()) {
        let _ = write!(d, "{}{:.2} {:.2} ", if d.is_empty() { "M" } else { "L" }, px(i), py(v));
    }
    if !d.is_empty() {
        let _ = write!(s, r##"<path d="{}" stroke="#1f77b4" stroke-width="1.5" fill="none"/>"##, d.trim_end());
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
