use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::adjoint::WatermarkMode;
use crate::attacks::{AttackCategory, AttackSpec};
use crate::codec::{detection_threshold, tpr_at_fpr, Message};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub message: Option<Message>,
    /// Set when the image could not be embedded; `matched` is then empty.
    pub error: Option<String>,
    /// Matched bits per attack row, in report order.
    pub matched: Vec<usize>,
    pub iterations: usize,
    pub final_loss: Option<LossBreakdown>,
    /// Total loss at every recorded iteration.
    pub loss_history: Vec<f64>,
}

impl ImageResult {
    pub fn failed(index: usize, error: String) -> Self {
        ImageResult {
            index,
            message: None,
            error: Some(error),
            matched: Vec::new(),
            iterations: 0,
            final_loss: None,
            loss_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub label: String,
    pub category: AttackCategory,
    pub images: usize,
    pub mean_bit_accuracy: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub k: usize,
    pub fpr: f64,
    pub threshold: usize,
    pub mode: WatermarkMode,
    pub config_digest: String,
    pub attacks: Vec<AttackSpec>,
    pub images: Vec<ImageResult>,
    /// One row per attack; the clean row is first.
    pub summary: Vec<AttackSummary>,
}

pub const CSV_HEADER: &str = "attack,category,images,mean_bit_accuracy,tpr";

impl RobustnessReport {
    pub fn assemble(cfg: &ExperimentConfig, attacks: Vec<AttackSpec>, images: Vec<ImageResult>) -> Result<Self> {
        let k = cfg.codec.bits;
        let fpr = cfg.codec.fpr;
        let ok: Vec<&ImageResult> = images.iter().filter(|r| r.error.is_none()).collect();
        if ok.is_empty() {
            return Err(Error::Report("no successful images to summarize".into()));
        }
        let mut summary = Vec::with_capacity(attacks.len());
        for (j, spec) in attacks.iter().enumerate() {
            let counts: Vec<usize> = ok
                .iter()
                .map(|r| {
                    r.matched
                        .get(j)
                        .copied()
                        .ok_or_else(|| Error::Report(format!("image {} lacks attack row {j}", r.index)))
                })
                .collect::<Result<_>>()?;
            let mean = counts.iter().sum::<usize>() as f64 / (counts.len() * k) as f64;
            summary.push(AttackSummary {
                label: spec.label(),
                category: spec.category(),
                images: counts.len(),
                mean_bit_accuracy: mean,
                tpr: tpr_at_fpr(&counts, k, fpr)?,
            });
        }
        Ok(RobustnessReport {
            k,
            fpr,
            threshold: detection_threshold(k, fpr)?,
            mode: cfg.watermark.mode,
            config_digest: cfg.digest(),
            attacks,
            images,
            summary,
        })
    }

    pub fn clean(&self) -> &AttackSummary {
        &self.summary[0]
    }

    pub fn row(&self, label: &str) -> Option<&AttackSummary> {
        self.summary.iter().find(|s| s.label == label)
    }

    /// Mean bit accuracy over all rows of a category, `None` if it has none.
    pub fn category_accuracy(&self, category: AttackCategory) -> Option<f64> {
        let rows: Vec<f64> = self
            .summary
            .iter()
            .filter(|s| s.category == category)
            .map(|s| s.mean_bit_accuracy)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Mean bit accuracy over every row, clean included.
    pub fn overall_accuracy(&self) -> f64 {
        self.summary.iter().map(|s| s.mean_bit_accuracy).sum::<f64>() / self.summary.len() as f64
    }

    pub fn failures(&self) -> usize {
        self.images.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.summary {
            let category = serde_json::to_value(s.category).unwrap();
            writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                s.label,
                category.as_str().unwrap_or("unknown"),
                s.images,
                s.mean_bit_accuracy,
                s.tpr
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))
    }

    /// Median over images of the total loss at each iteration.
    pub fn median_loss_curve(&self) -> Vec<f64> {
        let len = self.images.iter().map(|r| r.loss_history.len()).max().unwrap_or(0);
        (0..len)
            .filter_map(|i| {
                let mut v: Vec<f64> = self.images.iter().filter_map(|r| r.loss_history.get(i).copied()).collect();
                if v.is_empty() {
                    return None;
                }
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
            })
            .collect()
    }

    pub fn accuracy_svg(&self) -> String {
        bar_chart(
            "bit accuracy per attack",
            &self
                .summary
                .iter()
                .map(|s| (s.label.as_str(), s.mean_bit_accuracy))
                .collect::<Vec<_>>(),
        )
    }

    pub fn loss_svg(&self) -> String {
        line_chart("median total loss", &self.median_loss_curve())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub accuracy_plot: PathBuf,
    pub loss_plot: PathBuf,
}

impl ReportFiles {
    pub fn all(&self) -> [&Path; 4] {
        [&self.csv, &self.json, &self.accuracy_plot, &self.loss_plot]
    }
}

/// Writes `report.csv`, `report.json` and two SVG plots into `dir`.
pub fn write_report(report: &RobustnessReport, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        csv: dir.join("report.csv"),
        json: dir.join("report.json"),
        accuracy_plot: dir.join("accuracy.svg"),
        loss_plot: dir.join("loss.svg"),
    };
    for (path, body) in [
        (&files.csv, report.to_csv()),
        (&files.json, report.to_json()),
        (&files.accuracy_plot, report.accuracy_svg()),
        (&files.loss_plot, report.loss_svg()),
    ] {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    )
}

fn bar_chart(title: &str, bars: &[(&str, f64)]) -> String {
    let mut s = svg_open(title);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let span = H - 2.0 * PAD;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * span;
        let x = PAD + i as f64 * slot + 0.15 * slot;
        writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"steelblue\"><title>{} {v:.3}</title></rect>",
            H - PAD - h,
            0.7 * slot,
            escape(label)
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\" transform=\"rotate(-45 {:.1} {:.1})\">{}</text>",
            x + 0.35 * slot,
            H - PAD + 12.0,
            x + 0.35 * slot,
            H - PAD + 12.0,
            escape(label)
        )
        .unwrap();
    }
    for tick in [0.0, 0.5, 1.0] {
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{tick:.1}</text>",
            PAD - 4.0,
            H - PAD - tick * span + 3.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn line_chart(title: &str, ys: &[f64]) -> String {
    let mut s = svg_open(title);
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 2 {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let step = (W - 2.0 * PAD) / (ys.len() - 1) as f64;
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", PAD + i as f64 * step, H - PAD - (v - lo) / range * (H - 2.0 * PAD)))
            .collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"firebrick\" points=\"{}\"/>", points.join(" ")).unwrap();
        for (v, y) in [(hi, PAD), (lo, H - PAD)] {
            writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.3e}</text>",
                PAD - 4.0,
                y + 3.0
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}
