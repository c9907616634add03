//! Synthetic multi-domain benchmark with injected, class-keyed domain cues.
//!
//! Every image shows one glyph (circle, triangle, square, cross, star) whose
//! identity is the class label; the glyph is the domain-invariant feature.
//! Each domain additionally carries one cue family whose value is a function
//! of the class inside that domain and which never appears in any other
//! domain.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{assign_splits, CueDescriptor, Domain, ImageShape, MultiDomainDataset, Sample, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::rng;

pub const GLYPHS: [&str; 5] = ["circle", "triangle", "square", "cross", "star"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueKind {
    /// Background tinted towards one of five colours.
    Tint,
    /// Horizontal sinusoidal stripes at one of five spatial frequencies.
    Stripe,
    /// A 3×3 bit glyph stamped in the top-left corner.
    Watermark,
    /// No cue.
    #[serde(rename = "none")]
    Plain,
}

impl CueKind {
    pub const ALL: [CueKind; 4] = [CueKind::Tint, CueKind::Stripe, CueKind::Watermark, CueKind::Plain];

    pub fn name(self) -> &'static str {
        match self {
            CueKind::Tint => "tint",
            CueKind::Stripe => "stripe",
            CueKind::Watermark => "watermark",
            CueKind::Plain => "none",
        }
    }
}

/// How the cue value of a sample is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CueMode {
    /// Cue value equals the class label.
    #[default]
    Keyed,
    /// Cue value drawn uniformly, independent of the class.
    Random,
}

const CUE_VALUES: usize = 5;
const GRAY: f64 = 0.45;
const FOREGROUND: f64 = 0.92;
const PALETTE: [[f64; 3]; CUE_VALUES] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.80, 0.20, 0.80],
];
const STRIPE_CYCLES: [f64; CUE_VALUES] = [2.0, 3.0, 4.0, 6.0, 8.0];
const WATERMARKS: [[u8; 9]; CUE_VALUES] = [
    [1, 0, 1, 0, 1, 0, 1, 0, 1],
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 1, 1, 0, 0, 0, 1, 1, 1],
    [1, 0, 0, 1, 0, 0, 1, 1, 1],
    [0, 0, 1, 0, 1, 0, 1, 0, 0],
];

fn default_classes() -> usize {
    5
}

fn default_size() -> usize {
    32
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    /// One cue family per domain; must be pairwise distinct.
    pub cue_kinds: Vec<CueKind>,
    pub cue_strength: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl SyntheticDomainSpec {
    /// Desk-scale benchmark: 5 classes, 32×32 images, domains carrying tint,
    /// stripe, watermark and no cue, in that order.
    pub fn benchmark(num_domains: usize, samples_per_class_per_domain: usize, cue_strength: f64) -> Self {
        SyntheticDomainSpec {
            num_classes: 5,
            num_domains,
            samples_per_class_per_domain,
            image_size: 32,
            cue_kinds: CueKind::ALL.iter().copied().take(num_domains).collect(),
            cue_strength,
            noise_level: default_noise(),
            splits: SplitFractions::default(),
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::new(3, self.image_size, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(2..=GLYPHS.len()).contains(&self.num_classes) {
            return cfg(format!("num_classes must be in 2..={}, got {}", GLYPHS.len(), self.num_classes));
        }
        if self.num_domains == 0 {
            return cfg("num_domains must be positive".into());
        }
        if self.cue_kinds.len() != self.num_domains {
            return cfg(format!(
                "{} cue kinds given for {} domains",
                self.cue_kinds.len(),
                self.num_domains
            ));
        }
        let distinct: HashSet<_> = self.cue_kinds.iter().collect();
        if distinct.len() != self.cue_kinds.len() {
            return cfg("cue kinds must be pairwise distinct across domains".into());
        }
        if self.samples_per_class_per_domain == 0 {
            return cfg("samples_per_class_per_domain must be positive".into());
        }
        if self.image_size < 16 {
            return cfg(format!("image_size must be at least 16, got {}", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return cfg(format!("cue_strength must be in [0, 1], got {}", self.cue_strength));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return cfg(format!("noise_level must be non-negative, got {}", self.noise_level));
        }
        self.splits.validate()
    }
}

#[derive(Clone, Copy, Debug)]
enum Glyph {
    Circle,
    Triangle,
    Square,
    Cross,
    Star,
}

impl Glyph {
    fn from_label(label: usize) -> Self {
        [Glyph::Circle, Glyph::Triangle, Glyph::Square, Glyph::Cross, Glyph::Star][label]
    }

    /// Membership test in glyph-local coordinates (unit radius).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Glyph::Circle => u * u + v * v <= 0.85 * 0.85,
            Glyph::Square => u.abs() <= 0.72 && v.abs() <= 0.72,
            Glyph::Cross => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
            Glyph::Triangle => {
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = -PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
                        (a.cos(), a.sin())
                    })
                    .collect();
                point_in_polygon(u, v, &verts)
            }
            Glyph::Star => {
                let verts: Vec<(f64, f64)> = (0..10)
                    .map(|k| {
                        let a = -PI / 2.0 + PI * k as f64 / 5.0;
                        let r = if k % 2 == 0 { 1.0 } else { 0.42 };
                        (r * a.cos(), r * a.sin())
                    })
                    .collect();
                point_in_polygon(u, v, &verts)
            }
        }
    }
}

fn point_in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Renders one image. Channel-major, values clamped to `[0, 1]`.
fn render<R: Rng>(spec: &SyntheticDomainSpec, label: usize, cue: Option<CueDescriptor>, rng: &mut R) -> Vec<f64> {
    let size = spec.image_size;
    let s = size as f64;
    let glyph = Glyph::from_label(label);
    let cx = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let radius = rng.gen_range(0.22..0.28) * s;
    let (sin, cos) = rng.gen_range(-0.35f64..0.35).sin_cos();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let strength = spec.cue_strength;

    let mut background = [GRAY; 3];
    if let Some(CueDescriptor { kind: CueKind::Tint, param }) = cue {
        for (c, b) in background.iter_mut().enumerate() {
            *b = GRAY + 0.7 * strength * (PALETTE[param][c] - GRAY);
        }
    }

    const SUB: usize = 3;
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        let stripe = match cue {
            Some(CueDescriptor {
                kind: CueKind::Stripe,
                param,
            }) => 0.22 * strength * (2.0 * PI * STRIPE_CYCLES[param] * (y as f64 + 0.5) / s + phase).sin(),
            _ => 0.0,
        };
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if glyph.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            let alpha = hits as f64 / (SUB * SUB) as f64;
            for c in 0..3 {
                let bg = background[c] + stripe;
                img[(c * size + y) * size + x] = bg * (1.0 - alpha) + FOREGROUND * alpha;
            }
        }
    }

    if let Some(CueDescriptor {
        kind: CueKind::Watermark,
        param,
    }) = cue
    {
        let cell = (size / 16).max(1);
        for (bit_index, &bit) in WATERMARKS[param].iter().enumerate() {
            let (row, col) = (bit_index / 3, bit_index % 3);
            let ink = if bit == 1 { 0.05 } else { 0.95 };
            for y in 1 + row * cell..1 + (row + 1) * cell {
                for x in 1 + col * cell..1 + (col + 1) * cell {
                    for c in 0..3 {
                        let p = &mut img[(c * size + y) * size + x];
                        *p += strength * (ink - *p);
                    }
                }
            }
        }
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0, spec.noise_level).expect("finite noise");
        for p in img.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    img
}

fn cue_for<R: Rng>(kind: CueKind, mode: CueMode, label: usize, rng: &mut R) -> Option<CueDescriptor> {
    if kind == CueKind::Plain {
        return None;
    }
    let param = match mode {
        CueMode::Keyed => label,
        CueMode::Random => rng.gen_range(0..CUE_VALUES),
    };
    Some(CueDescriptor { kind, param })
}

pub fn generate_synthetic(spec: &SyntheticDomainSpec, seed: u64) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let mut domains = Vec::with_capacity(spec.num_domains);
    for (d, &kind) in spec.cue_kinds.iter().enumerate() {
        let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class_per_domain);
        for label in 0..spec.num_classes {
            for k in 0..spec.samples_per_class_per_domain {
                let index = label * spec.samples_per_class_per_domain + k;
                let mut rng = rng::stream(seed, "synthetic", &[d as u64, index as u64]);
                let cue = cue_for(kind, CueMode::Keyed, label, &mut rng);
                samples.push(Sample {
                    image: render(spec, label, cue, &mut rng),
                    label,
                    domain_id: d,
                    uid: ((d as u64) << 32) | index as u64,
                    cue,
                });
            }
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        domains.push(Domain {
            name: kind.name().to_string(),
            splits: assign_splits(&labels, spec.num_classes, spec.splits, seed, d),
            samples,
        });
    }
    let dataset = MultiDomainDataset {
        domains,
        num_classes: spec.num_classes,
        class_names: GLYPHS[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        image_shape: spec.image_shape(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Images carrying cue `kind` with values drawn independently of the glyph,
/// for probing whether a representation still encodes the cue.
pub fn generate_cue_probe(spec: &SyntheticDomainSpec, kind: CueKind, count: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if kind == CueKind::Plain {
        return Err(Error::Config("cannot probe the absence of a cue".into()));
    }
    Ok((0..count)
        .map(|i| {
            let mut rng = rng::stream(seed, "cue-probe", &[i as u64]);
            let label = rng.gen_range(0..spec.num_classes);
            let cue = cue_for(kind, CueMode::Random, label, &mut rng);
            Sample {
                image: render(spec, label, cue, &mut rng),
                label,
                domain_id: 0,
                uid: i as u64,
                cue,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub file: String,
    pub label: usize,
    pub split: Split,
    pub cue: Option<CueDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub spec: SyntheticDomainSpec,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `root/<domain>/<class>/<index>.png` plus `root/manifest.json`.
pub fn export_dataset(dataset: &MultiDomainDataset, spec: &SyntheticDomainSpec, seed: u64, root: &Path) -> Result<ExportManifest> {
    let shape = dataset.image_shape;
    let mut entries = Vec::with_capacity(dataset.total_samples());
    for domain in &dataset.domains {
        for (i, (sample, split)) in domain.samples.iter().zip(&domain.splits).enumerate() {
            let class = &dataset.class_names[sample.label];
            let rel = format!("{}/{}/{:05}.png", domain.name, class, i);
            let path = root.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut img = image::RgbImage::new(shape.width as u32, shape.height as u32);
            for (x, y, px) in img.enumerate_pixels_mut() {
                let at = |c: usize| sample.image[(c * shape.height + y as usize) * shape.width + x as usize];
                *px = image::Rgb([0, 1, 2].map(|c| (at(c) * 255.0).round() as u8));
            }
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                domain: domain.name.clone(),
                file: rel,
                label: sample.label,
                split: *split,
                cue: sample.cue,
            });
        }
    }
    let manifest = ExportManifest {
        spec: spec.clone(),
        seed,
        class_names: dataset.class_names.clone(),
        samples: entries,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_structure() {
        let spec = SyntheticDomainSpec::benchmark(4, 100, 0.9);
        let ds = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(ds.num_domains(), 4);
        assert_eq!(ds.total_samples(), 2000);
        let kinds: HashSet<_> = ds
            .domains
            .iter()
            .flat_map(|d| d.samples.iter().map(|s| s.cue.map(|c| c.kind)))
            .collect();
        assert_eq!(kinds.len(), 4);
        for domain in &ds.domains {
            for s in &domain.samples {
                if let Some(cue) = s.cue {
                    assert_eq!(cue.param, s.label);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticDomainSpec::benchmark(3, 4, 0.9);
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 10).unwrap();
        assert_ne!(a.domains[0].samples[0].image, c.domains[0].samples[0].image);
    }

    #[test]
    fn repeated_cue_kinds_are_rejected() {
        let mut spec = SyntheticDomainSpec::benchmark(3, 4, 0.9);
        spec.cue_kinds = vec![CueKind::Tint, CueKind::Stripe, CueKind::Tint];
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_strength_removes_cues_from_pixels() {
        let mut spec = SyntheticDomainSpec::benchmark(4, 2, 0.0);
        spec.noise_level = 0.0;
        let ds = generate_synthetic(&spec, 5).unwrap();
        // Same per-sample stream position for glyph geometry in every domain
        // is not guaranteed, so compare background statistics instead.
        let corner_mean = |s: &Sample| {
            let n = spec.image_size;
            (0..3).map(|c| s.image[c * n * n + n + 1]).sum::<f64>() / 3.0
        };
        for d in &ds.domains {
            for s in &d.samples {
                assert!((corner_mean(s) - GRAY).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pixels_in_unit_interval_and_glyph_visible() {
        let spec = SyntheticDomainSpec::benchmark(4, 3, 1.0);
        let ds = generate_synthetic(&spec, 2).unwrap();
        for d in &ds.domains {
            for s in &d.samples {
                assert!(s.image.iter().all(|p| (0.0..=1.0).contains(p)));
                let bright = s.image.iter().filter(|&&p| p > 0.8).count();
                assert!(bright > 30, "glyph should cover a visible area");
            }
        }
    }

    #[test]
    fn probe_cues_are_class_independent() {
        let spec = SyntheticDomainSpec::benchmark(4, 1, 0.9);
        let probe = generate_cue_probe(&spec, CueKind::Stripe, 400, 3).unwrap();
        let agree = probe.iter().filter(|s| s.cue.unwrap().param == s.label).count();
        assert!(agree < 130, "cue value should not track the glyph ({agree}/400)");
        assert!(generate_cue_probe(&spec, CueKind::Plain, 4, 3).is_err());
    }

    #[test]
    fn export_writes_layout_and_manifest() {
        let spec = SyntheticDomainSpec::benchmark(2, 2, 0.9);
        let ds = generate_synthetic(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = export_dataset(&ds, &spec, 4, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), ds.total_samples());
        assert!(dir.path().join("tint/circle/00000.png").exists());
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: ExportManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest);
    }
}
