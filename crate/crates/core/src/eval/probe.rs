//! Scoring a real-trained classifier on synthetic sets, one per adjective.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, LabeledImages};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub adjective: String,
    pub images: usize,
    pub accuracy: f64,
}

/// Accuracy of `classifier` on each `(adjective, images)` set, in order.
pub fn probe_synthetic(classifier: &Classifier, sets: &[(String, LabeledImages)]) -> Result<Vec<ProbeRow>> {
    sets.iter()
        .map(|(adjective, data)| {
            if data.is_empty() {
                return Err(Error::Dataset(format!("synthetic set for {adjective:?} is empty")));
            }
            let cm = classifier.evaluate(data)?;
            Ok(ProbeRow { adjective: adjective.clone(), images: data.len(), accuracy: cm.trace() as f64 / cm.total() as f64 })
        })
        .collect()
}

fn display_adjective(a: &str) -> &str {
    if a.is_empty() {
        "none"
    } else {
        a
    }
}

pub fn write_probe_csv(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let mut body = String::from("adjective,images,accuracy\n");
    for r in rows {
        let _ = writeln!(body, "{},{},{:.6}", display_adjective(&r.adjective), r.images, r.accuracy);
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Scatter of accuracy per adjective as a standalone SVG document.
pub fn probe_svg(rows: &[ProbeRow], reference: Option<f64>) -> String {
    let (w, h, left, bottom, top) = (640.0, 360.0, 56.0, 96.0, 24.0);
    let plot_w = w - left - 24.0;
    let plot_h = h - bottom - top;
    let y_of = |acc: f64| top + plot_h * (1.0 - acc.clamp(0.0, 1.0));
    let step = plot_w / rows.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for tick in 0..=5 {
        let acc = f64::from(tick) / 5.0;
        let y = y_of(acc);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, left + plot_w);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{acc:.1}</text>"#, left - 6.0, y + 4.0);
    }
    if let Some(r) = reference {
        let y = y_of(r);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#c33" stroke-dasharray="4 3"/>"##, left + plot_w);
    }
    for (i, r) in rows.iter().enumerate() {
        let x = left + step * (i as f64 + 0.5);
        let y = y_of(r.accuracy);
        let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="5" fill="#2a6fb0"><title>{} {:.3}</title></circle>"##, display_adjective(&r.adjective), r.accuracy);
        let _ = writeln!(s, r#"<text transform="translate({x:.1},{:.1}) rotate(-45)" text-anchor="end">{}</text>"#, top + plot_h + 14.0, display_adjective(&r.adjective));
    }
    let _ = writeln!(s, r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">accuracy</text>"#, top + plot_h / 2.0);
    s.push_str("</svg>\n");
    s
}
