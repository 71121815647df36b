//! Procedural ultrasound-like phantoms with class-specific lesion shapes.
//!
//! Every image has a speckled background whose brightness falls off with
//! depth. Geometry, in units of the image side `S`:
//!
//! | class     | lesion                                                        |
//! |-----------|---------------------------------------------------------------|
//! | normal    | none                                                          |
//! | benign    | ellipse, half-width U(0.16, 0.24)·S, height/width U(0.45, 0.65), tilt U(−0.25, 0.25) rad, soft 1 px edge, level 40 |
//! | malignant | star, radius U(0.11, 0.16)·S, 6–9 spikes of relative amplitude U(0.30, 0.45), stretched vertically by U(1.3, 1.6), hard edge, level 30 |
//!
//! Lesion centres are U(0.35, 0.65)·S on both axes. The background level
//! is `150 − 50·y/S` before speckle, so its mean lies in [110, 140].

use std::f64::consts::PI;
use std::path::Path;

use super::imageio::write_gray_png;
use super::manifest::{write_patients, Manifest, ManifestRow, Source, Split};
use crate::error::{Error, Result};
use crate::prompt::ClassLabel;
use crate::rng::RngStream;

pub const BACKGROUND_MEAN_BAND: (f64, f64) = (110.0, 140.0);

/// Rayleigh speckle with unit mean, compressed to `0.8 + 0.2·r`.
fn speckle(rng: &mut RngStream) -> f64 {
    let u = rng.uniform().max(1e-12);
    let r = (-2.0 * u.ln()).sqrt() / (PI / 2.0).sqrt();
    0.8 + 0.2 * r
}

enum Lesion {
    None,
    Ellipse { cx: f64, cy: f64, ax: f64, ay: f64, cos: f64, sin: f64 },
    Star { cx: f64, cy: f64, radius: f64, spikes: f64, amp: f64, phase: f64, stretch: f64 },
}

impl Lesion {
    fn draw(label: ClassLabel, side: f64, rng: &mut RngStream) -> Lesion {
        let centre = |rng: &mut RngStream| rng.uniform_range(0.35, 0.65) * side;
        match label {
            ClassLabel::Normal => Lesion::None,
            ClassLabel::Benign => {
                let (cx, cy) = (centre(rng), centre(rng));
                let ax = rng.uniform_range(0.16, 0.24) * side;
                let ay = ax * rng.uniform_range(0.45, 0.65);
                let tilt = rng.uniform_range(-0.25, 0.25);
                Lesion::Ellipse { cx, cy, ax, ay, cos: tilt.cos(), sin: tilt.sin() }
            }
            ClassLabel::Malignant => {
                let (cx, cy) = (centre(rng), centre(rng));
                Lesion::Star {
                    cx,
                    cy,
                    radius: rng.uniform_range(0.11, 0.16) * side,
                    spikes: (6 + rng.below(4)) as f64,
                    amp: rng.uniform_range(0.30, 0.45),
                    phase: rng.uniform_range(0.0, 2.0 * PI),
                    stretch: rng.uniform_range(1.3, 1.6),
                }
            }
        }
    }

    /// Lesion coverage in [0, 1] and its intensity level at pixel centre `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Lesion::None => (0.0, 0.0),
            Lesion::Ellipse { cx, cy, ax, ay, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                let rho = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
                // signed distance to the boundary, approximately in pixels
                let dist = (1.0 - rho) * ay;
                (1.0 / (1.0 + (-dist / 0.5).exp()), 40.0)
            }
            Lesion::Star { cx, cy, radius, spikes, amp, phase, stretch } => {
                let (dx, dy) = (x - cx, (y - cy) / stretch);
                let r = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let edge = radius * (1.0 + amp * (spikes * theta + phase).cos());
                (if r <= edge { 1.0 } else { 0.0 }, 30.0)
            }
        }
    }
}

/// One `side x side` phantom of class `label`.
pub fn phantom_pixels(label: ClassLabel, side: usize, rng: &mut RngStream) -> Vec<u8> {
    let s = side as f64;
    let lesion = Lesion::draw(label, s, rng);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let bg = 150.0 - 50.0 * (y as f64 + 0.5) / s;
        for x in 0..side {
            let (cov, level) = lesion.coverage(x as f64 + 0.5, y as f64 + 0.5);
            let base = bg * (1.0 - cov) + level * cov;
            out.push((base * speckle(rng)).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhantomSpec {
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    pub classes: Vec<ClassLabel>,
}

impl PhantomSpec {
    pub fn new(per_class: usize, side: usize, seed: u64) -> Self {
        Self { per_class, side, seed, classes: ClassLabel::ALL.to_vec() }
    }
}

/// Writes `out/<class>/phantom_<class>_<i>.png` plus `out/patients.csv`
/// and returns the manifest (all rows in the train split).
///
/// Consecutive images of a class are grouped into patients of 1–3 images.
pub fn phantom_generate(spec: &PhantomSpec, out: &Path) -> Result<Manifest> {
    if spec.per_class == 0 || spec.side < 8 || spec.classes.is_empty() {
        return Err(Error::invalid("phantoms need n ≥ 1, side ≥ 8 and at least one class"));
    }
    let root = RngStream::new(spec.seed, "phantom");
    let mut rows = Vec::new();
    let mut patient = 0usize;
    for &label in &spec.classes {
        let dir = out.join(label.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut group_rng = root.substream(&format!("{label}/patients"));
        let mut left_in_group = 0;
        for i in 0..spec.per_class {
            if left_in_group == 0 {
                patient += 1;
                left_in_group = 1 + group_rng.below(3);
            }
            left_in_group -= 1;
            let mut rng = root.substream(&format!("{label}/{i}"));
            let px = phantom_pixels(label, spec.side, &mut rng);
            let path = dir.join(format!("phantom_{label}_{i:05}.png"));
            write_gray_png(&path, spec.side, &px)?;
            rows.push(ManifestRow {
                image_path: path.display().to_string(),
                label,
                patient_id: format!("ph{patient:05}"),
                split: Split::Train,
                provenance: Source::Real,
                adjective: String::new(),
            });
        }
    }
    let m = Manifest::new(rows);
    write_patients(&out.join("patients.csv"), &m)?;
    Ok(m)
}
