//! Risk-bound report, PAD report table and the baseline-vs-LRDG scatter plot.

use std::fmt;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{MixtureSpec, PadResult};
use crate::error::{Error, Result};

/// Measurable part of the target-risk bound for one model and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Largest pairwise source PAD.
    pub epsilon_hat: f64,
    /// PAD between the closest source mixture and the target.
    pub gamma_hat: f64,
    pub mixture: MixtureSpec,
    /// Sum over sources of `pi_i * (1 - source validation accuracy)`.
    pub weighted_source_risk: f64,
    /// `weighted_source_risk + (gamma_hat + epsilon_hat) / 2`.
    pub partial_bound: f64,
    pub note: String,
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "R_t <= {:.4} + ({:.4} + {:.4})/2 + lambda_pi = {:.4} + lambda_pi  [pi = {}; {}]",
            self.weighted_source_risk, self.gamma_hat, self.epsilon_hat, self.partial_bound, self.mixture, self.note
        )
    }
}

pub fn bound_report(pairwise: &[PadResult], closest: &PadResult, mixture: &MixtureSpec, source_risks: &[f64]) -> Result<BoundReport> {
    if source_risks.len() != mixture.len() {
        return Err(Error::Precondition(format!(
            "bound report: {} source risks for a {}-source mixture",
            source_risks.len(),
            mixture.len()
        )));
    }
    if let Some(p) = pairwise.iter().find(|p| p.seed != closest.seed) {
        return Err(Error::Precondition(format!(
            "bound report mixes configurations: pad `{}` used seed {}, closest mixture seed {}",
            p.label, p.seed, closest.seed
        )));
    }
    if source_risks.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Precondition("source risks must lie in [0, 1]".into()));
    }
    let epsilon_hat = pairwise.iter().map(|p| p.pad).fold(0.0, f64::max);
    let weighted_source_risk: f64 = mixture.pi().iter().zip(source_risks).map(|(p, r)| p * r).sum();
    Ok(BoundReport {
        epsilon_hat,
        gamma_hat: closest.pad,
        mixture: mixture.clone(),
        weighted_source_risk,
        partial_bound: weighted_source_risk + (closest.pad + epsilon_hat) / 2.0,
        note: "lambda_pi unknown: it needs the optimal joint hypothesis and is not estimated".into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadKind {
    Pairwise,
    SourceTarget,
}

impl PadKind {
    fn name(self) -> &'static str {
        match self {
            PadKind::Pairwise => "pairwise",
            PadKind::SourceTarget => "source-target",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadRecord {
    pub model: String,
    pub target: String,
    pub kind: PadKind,
    pub result: PadResult,
}

pub fn write_pad_report(records: &[PadRecord], config_digest: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["model", "target", "kind", "label", "epsilon", "pad", "reg", "seed", "config_digest"])
        .map_err(io)?;
    for r in records {
        w.write_record([
            r.model.clone(),
            r.target.clone(),
            r.kind.name().to_string(),
            r.result.label.clone(),
            r.result.epsilon.to_string(),
            r.result.pad.to_string(),
            r.result.reg.to_string(),
            r.result.seed.to_string(),
            config_digest.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const PLOT_SIZE: u32 = 400;
const MARGIN: u32 = 30;

/// Pixel position of a PAD pair `(baseline, lrdg)`; both axes span `[0, 2]`.
pub fn plot_position(baseline: f64, lrdg: f64) -> (u32, u32) {
    let span = f64::from(PLOT_SIZE - 2 * MARGIN);
    let x = MARGIN + (baseline.clamp(0.0, 2.0) / 2.0 * span).round() as u32;
    let y = PLOT_SIZE - MARGIN - (lrdg.clamp(0.0, 2.0) / 2.0 * span).round() as u32;
    (x, y)
}

pub const PAIRWISE_COLOUR: Rgb<u8> = Rgb([30, 90, 200]);
pub const SOURCE_TARGET_COLOUR: Rgb<u8> = Rgb([200, 40, 40]);

/// Scatter of baseline PAD (x) against LRDG PAD (y) with the diagonal drawn.
/// Points below the diagonal mean LRDG features are less separable.
pub fn write_pad_scatter(points: &[(PadKind, f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let grey = Rgb([170, 170, 170]);
    let black = Rgb([0, 0, 0]);
    let lo = MARGIN;
    let hi = PLOT_SIZE - MARGIN;
    for t in lo..=hi {
        img.put_pixel(t, hi, black);
        img.put_pixel(lo, t, black);
        img.put_pixel(t, PLOT_SIZE - t, grey);
    }
    for tick in [0.5, 1.0, 1.5, 2.0] {
        let (x, y) = plot_position(tick, tick);
        for d in 1..5 {
            img.put_pixel(x, hi + d, black);
            img.put_pixel(lo - d, y, black);
        }
    }
    for &(kind, baseline, lrdg) in points {
        let colour = match kind {
            PadKind::Pairwise => PAIRWISE_COLOUR,
            PadKind::SourceTarget => SOURCE_TARGET_COLOUR,
        };
        let (cx, cy) = plot_position(baseline, lrdg);
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx * dx + dy * dy <= 9 {
                    let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                    if (0..PLOT_SIZE as i64).contains(&x) && (0..PLOT_SIZE as i64).contains(&y) {
                        img.put_pixel(x as u32, y as u32, colour);
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
