//! Procedural multi-domain synthetic segmentation corpus.
//!
//! Scenes are shared geometry (background plus circles, rectangles, stripe
//! bands, and blobs, one class each); domains differ only in appearance
//! (palette, texture, gamma, blur, noise). Rendering never touches the label
//! map. Splits follow a train-on-source, evaluate-on-unseen-targets
//! protocol: proxy styles (unlabeled, diverse), one source style (labeled),
//! and target styles (labeled, evaluation only).
//!
//! Corpus bytes are a pure function of the manifest: per-sample seeds derive
//! from the corpus seed and the sample id.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::tensor::Tensor;

pub const CLASSES: usize = 5;
pub const IGNORE_INDEX: u8 = 255;

/// Base id per split; ids stay globally unique across splits and the
/// teacher pool, which makes data-loader traces auditable.
pub const PROXY_ID_BASE: u64 = 0;
pub const SOURCE_ID_BASE: u64 = 100_000;
pub const TARGET_ID_BASE: u64 = 200_000;
pub const TARGET_ID_STRIDE: u64 = 10_000;
pub const HELDOUT_SOURCE_ID_BASE: u64 = 800_000;
pub const TEACHER_POOL_ID_BASE: u64 = 900_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Proxy,
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub domain_id: String,
    pub role: SplitRole,
    /// One RGB base color per class.
    pub palette: Vec<[f64; 3]>,
    pub noise_std: f64,
    pub gamma: f64,
    /// Sinusoidal texture frequency; 0 disables the texture exactly.
    pub texture_freq: f64,
    /// Box-blur radius in pixels (rounded to an integer).
    pub blur_radius: f64,
}

impl DomainStyle {
    fn new(
        domain_id: &str,
        role: SplitRole,
        palette: [[f64; 3]; CLASSES],
        noise_std: f64,
        gamma: f64,
        texture_freq: f64,
        blur_radius: f64,
    ) -> Self {
        DomainStyle {
            domain_id: domain_id.to_string(),
            role,
            palette: palette.to_vec(),
            noise_std,
            gamma,
            texture_freq,
            blur_radius,
        }
    }

    /// Number of style parameters (palette counted as one) in which two
    /// styles differ.
    pub fn differing_params(&self, other: &DomainStyle) -> usize {
        let mut n = 0;
        if self.palette != other.palette {
            n += 1;
        }
        if self.noise_std != other.noise_std {
            n += 1;
        }
        if self.gamma != other.gamma {
            n += 1;
        }
        if self.texture_freq != other.texture_freq {
            n += 1;
        }
        if self.blur_radius != other.blur_radius {
            n += 1;
        }
        n
    }
}

/// The default domain roster: six proxy styles, one source, three targets.
pub fn default_styles() -> Vec<DomainStyle> {
    vec![
        DomainStyle::new(
            "P1",
            SplitRole::Proxy,
            [
                [0.75, 0.72, 0.70],
                [0.90, 0.55, 0.50],
                [0.55, 0.65, 0.90],
                [0.92, 0.88, 0.55],
                [0.55, 0.85, 0.60],
            ],
            0.0,
            0.9,
            0.0,
            0.0,
        ),
        DomainStyle::new(
            "P2",
            SplitRole::Proxy,
            [
                [0.18, 0.20, 0.24],
                [0.55, 0.20, 0.18],
                [0.15, 0.28, 0.55],
                [0.60, 0.55, 0.20],
                [0.20, 0.45, 0.25],
            ],
            0.03,
            1.2,
            3.0,
            1.0,
        ),
        DomainStyle::new(
            "P3",
            SplitRole::Proxy,
            [
                [0.60, 0.50, 0.35],
                [0.95, 0.35, 0.10],
                [0.35, 0.30, 0.80],
                [0.95, 0.80, 0.15],
                [0.25, 0.75, 0.30],
            ],
            0.01,
            0.8,
            5.0,
            0.0,
        ),
        DomainStyle::new(
            "P4",
            SplitRole::Proxy,
            [
                [0.50, 0.55, 0.62],
                [0.70, 0.40, 0.45],
                [0.30, 0.50, 0.68],
                [0.72, 0.70, 0.45],
                [0.40, 0.60, 0.50],
            ],
            0.05,
            1.1,
            1.0,
            0.0,
        ),
        DomainStyle::new(
            "P5",
            SplitRole::Proxy,
            [
                [0.85, 0.85, 0.85],
                [0.60, 0.10, 0.10],
                [0.10, 0.20, 0.60],
                [0.70, 0.65, 0.10],
                [0.10, 0.50, 0.15],
            ],
            0.02,
            1.4,
            4.0,
            2.0,
        ),
        DomainStyle::new(
            "P6",
            SplitRole::Proxy,
            [
                [0.40, 0.48, 0.38],
                [0.65, 0.42, 0.30],
                [0.32, 0.42, 0.60],
                [0.70, 0.68, 0.42],
                [0.35, 0.58, 0.40],
            ],
            0.04,
            0.7,
            6.0,
            1.0,
        ),
        DomainStyle::new(
            "S1",
            SplitRole::Source,
            [
                [0.45, 0.45, 0.42],
                [0.75, 0.30, 0.25],
                [0.25, 0.45, 0.75],
                [0.80, 0.75, 0.30],
                [0.30, 0.65, 0.35],
            ],
            0.02,
            1.0,
            2.0,
            0.0,
        ),
        DomainStyle::new(
            "T1",
            SplitRole::Target,
            [
                [0.22, 0.26, 0.38],
                [0.52, 0.25, 0.30],
                [0.20, 0.32, 0.58],
                [0.55, 0.52, 0.30],
                [0.22, 0.42, 0.33],
            ],
            0.04,
            1.3,
            4.0,
            1.0,
        ),
        DomainStyle::new(
            "T2",
            SplitRole::Target,
            [
                [0.68, 0.60, 0.48],
                [0.88, 0.45, 0.30],
                [0.45, 0.48, 0.78],
                [0.88, 0.80, 0.45],
                [0.45, 0.72, 0.42],
            ],
            0.05,
            0.85,
            1.5,
            0.0,
        ),
        DomainStyle::new(
            "T3",
            SplitRole::Target,
            [
                [0.35, 0.52, 0.42],
                [0.78, 0.30, 0.62],
                [0.28, 0.38, 0.66],
                [0.75, 0.70, 0.35],
                [0.30, 0.68, 0.45],
            ],
            0.03,
            1.05,
            5.5,
            2.0,
        ),
    ]
}

// ---------------------------------------------------------------------------
// Scene geometry

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    /// Class 2.
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    /// Class 3; vertical stripes across a horizontal band.
    StripeBand { y0: usize, h: usize, stripe: usize, gap: usize },
    /// Class 1.
    Circle { cx: f64, cy: f64, r: f64 },
    /// Class 4; union of circles along a random walk.
    Blob { nodes: Vec<(f64, f64, f64)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub shapes: Vec<Shape>,
}

fn rasterize(shapes: &[Shape], size: usize) -> Vec<u8> {
    let mut labels = vec![0u8; size * size];
    for shape in shapes {
        match shape {
            Shape::Rect { x0, y0, w, h } => {
                for y in *y0..(y0 + h).min(size) {
                    for x in *x0..(x0 + w).min(size) {
                        labels[y * size + x] = 2;
                    }
                }
            }
            Shape::StripeBand { y0, h, stripe, gap } => {
                let period = stripe + gap;
                for y in *y0..(y0 + h).min(size) {
                    for x in 0..size {
                        if x % period < *stripe {
                            labels[y * size + x] = 3;
                        }
                    }
                }
            }
            Shape::Circle { cx, cy, r } => {
                paint_disc(&mut labels, size, *cx, *cy, *r, 1);
            }
            Shape::Blob { nodes } => {
                for &(cx, cy, r) in nodes {
                    paint_disc(&mut labels, size, cx, cy, r, 4);
                }
            }
        }
    }
    labels
}

fn paint_disc(labels: &mut [u8], size: usize, cx: f64, cy: f64, r: f64, class: u8) {
    let y_lo = (cy - r).floor().max(0.0) as usize;
    let y_hi = ((cy + r).ceil() as usize).min(size.saturating_sub(1));
    let x_lo = (cx - r).floor().max(0.0) as usize;
    let x_hi = ((cx + r).ceil() as usize).min(size.saturating_sub(1));
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                labels[y * size + x] = class;
            }
        }
    }
}

fn background_fraction(labels: &[u8]) -> f64 {
    labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64
}

/// Deterministic scene with labels covering every pixel; background stays
/// between roughly a third and four fifths of the area.
pub fn generate_scene(seed: u64, size: usize) -> (SceneSpec, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    for _attempt in 0..64 {
        let mut shapes = Vec::new();
        for _ in 0..rng.gen_range(1..=2usize) {
            let w = (rng.gen_range(0.19..0.40) * s).round().max(2.0) as usize;
            let h = (rng.gen_range(0.19..0.40) * s).round().max(2.0) as usize;
            let x0 = rng.gen_range(0..=size.saturating_sub(w));
            let y0 = rng.gen_range(0..=size.saturating_sub(h));
            shapes.push(Shape::Rect { x0, y0, w, h });
        }
        {
            let h = (rng.gen_range(0.15..0.28) * s).round().max(2.0) as usize;
            let y0 = rng.gen_range(0..=size.saturating_sub(h));
            let stripe = (rng.gen_range(0.05..0.08) * s).round().max(1.0) as usize;
            let gap = (rng.gen_range(0.05..0.09) * s).round().max(1.0) as usize;
            shapes.push(Shape::StripeBand { y0, h, stripe, gap });
        }
        for _ in 0..rng.gen_range(1..=2usize) {
            let r = rng.gen_range(0.09..0.20) * s;
            let cx = rng.gen_range(r..s - r);
            let cy = rng.gen_range(r..s - r);
            shapes.push(Shape::Circle { cx, cy, r });
        }
        for _ in 0..rng.gen_range(1..=2usize) {
            let mut nodes = Vec::new();
            let mut cx = rng.gen_range(0.2 * s..0.8 * s);
            let mut cy = rng.gen_range(0.2 * s..0.8 * s);
            for _ in 0..4 {
                let r = rng.gen_range(0.05..0.11) * s;
                nodes.push((cx, cy, r));
                cx = (cx + rng.gen_range(-0.12..0.12) * s).clamp(0.0, s);
                cy = (cy + rng.gen_range(-0.12..0.12) * s).clamp(0.0, s);
            }
            shapes.push(Shape::Blob { nodes });
        }
        let labels = rasterize(&shapes, size);
        let bg = background_fraction(&labels);
        if (0.32..=0.78).contains(&bg) {
            return (SceneSpec { seed, shapes }, labels);
        }
    }
    // Statistically unreachable; a fixed fallback keeps the function total.
    let shapes = vec![Shape::Rect {
        x0: size / 4,
        y0: size / 4,
        w: size / 2,
        h: size / 2,
    }];
    let labels = rasterize(&shapes, size);
    (SceneSpec { seed, shapes }, labels)
}

// ---------------------------------------------------------------------------
// Rendering

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.is_finite() {
            return z;
        }
    }
}

fn box_blur(plane: &mut [f64], size: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, size as isize - 1) as usize;
                acc += plane[y * size + xx];
            }
            tmp[y * size + x] = acc * norm;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, size as isize - 1) as usize;
                acc += tmp[yy * size + x];
            }
            plane[y * size + x] = acc * norm;
        }
    }
}

/// One rendered sample: an image plus optional labels and split metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain_id: String,
    pub split: SplitRole,
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// Per-pixel class indices, absent for proxy samples.
    pub labels: Option<Vec<u8>>,
}

/// Applies a domain style to a label grid: palette lookup, multiplicative
/// sinusoidal texture, gamma, box blur, additive Gaussian noise, clamp to
/// [0, 1]. Labels pass through untouched.
pub fn render(labels: &[u8], size: usize, style: &DomainStyle, seed: u64) -> Result<Tensor> {
    if labels.len() != size * size {
        return Err(Error::dim(format!(
            "label grid has {} entries for size {size}",
            labels.len()
        )));
    }
    if style.palette.len() != CLASSES {
        return Err(Error::validation(format!(
            "style {} palette has {} entries, expected {CLASSES}",
            style.domain_id,
            style.palette.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = if style.texture_freq > 0.0 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let (sin_t, cos_t) = theta.sin_cos();
        let freq = style.texture_freq;
        Some(move |x: usize, y: usize| {
            let u = (x as f64 * cos_t + y as f64 * sin_t) / size as f64;
            1.0 + 0.15 * (2.0 * std::f64::consts::PI * freq * u + phase).sin()
        })
    } else {
        None
    };
    let mut planes: Vec<Vec<f64>> = (0..3).map(|_| vec![0.0; size * size]).collect();
    for y in 0..size {
        for x in 0..size {
            let class = labels[y * size + x] as usize;
            let factor = texture.as_ref().map_or(1.0, |t| t(x, y));
            for (c, plane) in planes.iter_mut().enumerate() {
                let mut v = style.palette[class][c] * factor;
                if style.gamma != 1.0 {
                    v = v.max(0.0).powf(style.gamma);
                }
                plane[y * size + x] = v;
            }
        }
    }
    let radius = style.blur_radius.round() as usize;
    for plane in planes.iter_mut() {
        box_blur(plane, size, radius);
    }
    if style.noise_std > 0.0 {
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v += style.noise_std * standard_normal(&mut rng);
            }
        }
    }
    let mut data = Vec::with_capacity(3 * size * size);
    for plane in planes {
        data.extend(plane.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::from_vec(vec![3, size, size], data)
}

// ---------------------------------------------------------------------------
// Manifest and corpus assembly

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub corpus_seed: u64,
    pub image_size: usize,
    pub classes: usize,
    pub proxy_count: usize,
    pub source_count: usize,
    /// Samples per target style.
    pub target_count: usize,
    /// Fraction of source samples written with labels (sample-level).
    pub label_fraction: f64,
    pub styles: Vec<DomainStyle>,
}

impl Default for SplitManifest {
    fn default() -> Self {
        SplitManifest {
            corpus_seed: 7,
            image_size: 64,
            classes: CLASSES,
            proxy_count: 2048,
            source_count: 512,
            target_count: 128,
            label_fraction: 1.0,
            styles: default_styles(),
        }
    }
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        if self.classes != CLASSES {
            return Err(Error::validation(format!(
                "manifest declares {} classes, generator supports {CLASSES}",
                self.classes
            )));
        }
        if self.image_size < 8 {
            return Err(Error::validation("image_size must be at least 8"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        let sources = self.source_styles();
        if sources.len() != 1 {
            return Err(Error::validation(format!(
                "expected exactly one source style, found {}",
                sources.len()
            )));
        }
        if self.proxy_styles().is_empty() || self.target_styles().is_empty() {
            return Err(Error::validation(
                "manifest needs at least one proxy and one target style",
            ));
        }
        for style in &self.styles {
            if style.palette.len() != CLASSES {
                return Err(Error::validation(format!(
                    "style {} palette has {} entries, expected {CLASSES}",
                    style.domain_id,
                    style.palette.len()
                )));
            }
        }
        for (i, a) in self.styles.iter().enumerate() {
            for b in self.styles.iter().skip(i + 1) {
                if a.domain_id == b.domain_id {
                    return Err(Error::validation(format!(
                        "duplicate domain id {}",
                        a.domain_id
                    )));
                }
                if a.differing_params(b) < 2 {
                    return Err(Error::validation(format!(
                        "styles {} and {} differ in fewer than two parameters",
                        a.domain_id, b.domain_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn proxy_styles(&self) -> Vec<&DomainStyle> {
        self.styles.iter().filter(|s| s.role == SplitRole::Proxy).collect()
    }

    pub fn source_styles(&self) -> Vec<&DomainStyle> {
        self.styles.iter().filter(|s| s.role == SplitRole::Source).collect()
    }

    pub fn target_styles(&self) -> Vec<&DomainStyle> {
        self.styles.iter().filter(|s| s.role == SplitRole::Target).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: SplitManifest =
            toml::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Deterministic labeled subset: shuffle positions with a corpus-derived
/// seed and keep the first ceil(count * fraction), so subsets nest across
/// fractions.
pub fn labeled_prefix(count: usize, fraction: f64, corpus_seed: u64) -> Vec<usize> {
    let keep = (((count as f64) * fraction).ceil() as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, "label-subsample", 0));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: SplitManifest,
    pub proxy: Vec<Sample>,
    pub source: Vec<Sample>,
    pub targets: Vec<Sample>,
}

impl Corpus {
    /// Positions (into `source`) of labeled samples available to a run at
    /// the given run-level fraction, nested within the corpus-level subset.
    pub fn labeled_source_positions(&self, run_fraction: f64) -> Result<Vec<usize>> {
        if !(run_fraction > 0.0 && run_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "label fraction must lie in (0, 1], got {run_fraction}"
            )));
        }
        let labeled: Vec<usize> = (0..self.source.len())
            .filter(|&i| self.source[i].labels.is_some())
            .collect();
        if labeled.is_empty() {
            return Err(Error::validation("corpus has no labeled source samples"));
        }
        let nested = labeled_prefix(labeled.len(), run_fraction, self.manifest.corpus_seed);
        Ok(nested.into_iter().map(|pos| labeled[pos]).collect())
    }

    pub fn target_domains(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.targets {
            if !seen.contains(&s.domain_id) {
                seen.push(s.domain_id.clone());
            }
        }
        seen
    }

    pub fn targets_of(&self, domain: &str) -> Vec<&Sample> {
        self.targets.iter().filter(|s| s.domain_id == domain).collect()
    }
}

fn generate_sample(
    manifest: &SplitManifest,
    style: &DomainStyle,
    id: u64,
    split: SplitRole,
    keep_labels: bool,
) -> Result<Sample> {
    let scene_seed = derive_seed(manifest.corpus_seed, "scene", id);
    let render_seed = derive_seed(manifest.corpus_seed, "render", id);
    let (_, labels) = generate_scene(scene_seed, manifest.image_size);
    let image = render(&labels, manifest.image_size, style, render_seed)?;
    Ok(Sample {
        id,
        domain_id: style.domain_id.clone(),
        split,
        image,
        labels: keep_labels.then_some(labels),
    })
}

/// Generates the full corpus in memory.
pub fn generate_corpus(manifest: &SplitManifest) -> Result<Corpus> {
    manifest.validate()?;
    let proxies = manifest.proxy_styles();
    let source_style = manifest.source_styles()[0];
    let labeled: std::collections::BTreeSet<usize> = labeled_prefix(
        manifest.source_count,
        manifest.label_fraction,
        manifest.corpus_seed,
    )
    .into_iter()
    .collect();

    let mut proxy = Vec::with_capacity(manifest.proxy_count);
    for i in 0..manifest.proxy_count {
        let style = proxies[i % proxies.len()];
        proxy.push(generate_sample(
            manifest,
            style,
            PROXY_ID_BASE + i as u64,
            SplitRole::Proxy,
            false,
        )?);
    }
    let mut source = Vec::with_capacity(manifest.source_count);
    for i in 0..manifest.source_count {
        source.push(generate_sample(
            manifest,
            source_style,
            SOURCE_ID_BASE + i as u64,
            SplitRole::Source,
            labeled.contains(&i),
        )?);
    }
    let mut targets = Vec::new();
    for (k, style) in manifest.target_styles().into_iter().enumerate() {
        for i in 0..manifest.target_count {
            targets.push(generate_sample(
                manifest,
                style,
                TARGET_ID_BASE + k as u64 * TARGET_ID_STRIDE + i as u64,
                SplitRole::Target,
                true,
            )?);
        }
    }
    Ok(Corpus {
        manifest: manifest.clone(),
        proxy,
        source,
        targets,
    })
}

/// Fresh source-style samples that never appear in any split; used as a
/// held-out set for diagnostics. Deterministic in the corpus seed.
pub fn generate_heldout_source(manifest: &SplitManifest, count: usize) -> Result<Vec<Sample>> {
    manifest.validate()?;
    let style = manifest.source_styles()[0];
    (0..count)
        .map(|i| {
            generate_sample(
                manifest,
                style,
                HELDOUT_SOURCE_ID_BASE + i as u64,
                SplitRole::Source,
                true,
            )
        })
        .collect()
}

/// Labeled pool for teacher pretraining: fresh scenes rendered under every
/// proxy style plus the source style. Not part of the student-facing corpus;
/// ids live in their own range.
pub fn generate_teacher_pool(manifest: &SplitManifest, per_style: usize) -> Result<Vec<Sample>> {
    manifest.validate()?;
    let mut styles = manifest.proxy_styles();
    styles.extend(manifest.source_styles());
    let mut pool = Vec::with_capacity(styles.len() * per_style);
    let mut id = TEACHER_POOL_ID_BASE;
    for _round in 0..per_style {
        for style in &styles {
            pool.push(generate_sample(manifest, style, id, SplitRole::Source, true)?);
            id += 1;
        }
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// On-disk format

pub const RECORD_MAGIC: &[u8; 4] = b"GKDD";
pub const RECORD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

fn write_split<W: Write>(mut w: W, samples: &[Sample], classes: usize) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    w.write_all(&RECORD_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.id.to_le_bytes())?;
        let dom = s.domain_id.as_bytes();
        w.write_all(&(dom.len() as u32).to_le_bytes())?;
        w.write_all(dom)?;
        let (h, ww) = (s.image.shape()[1], s.image.shape()[2]);
        w.write_all(&(h as u32).to_le_bytes())?;
        w.write_all(&(ww as u32).to_le_bytes())?;
        w.write_all(&(classes as u32).to_le_bytes())?;
        for &v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        match &s.labels {
            Some(labels) => {
                w.write_all(&[1u8])?;
                w.write_all(labels)?;
            }
            None => w.write_all(&[0u8])?,
        }
    }
    Ok(())
}

fn read_split<R: Read>(mut r: R, split: SplitRole) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::format(format!("bad corpus record magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != RECORD_VERSION {
        return Err(Error::format("unsupported corpus record version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        let id = u64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let dom_len = u32::from_le_bytes(b4) as usize;
        let mut dom = vec![0u8; dom_len];
        r.read_exact(&mut dom)?;
        let domain_id = String::from_utf8(dom)
            .map_err(|e| Error::format(format!("domain id not UTF-8: {e}")))?;
        r.read_exact(&mut b4)?;
        let h = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let w = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let _classes = u32::from_le_bytes(b4) as usize;
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 * h * w {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        let image = Tensor::from_vec(vec![3, h, w], data)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let labels = if flag[0] == 1 {
            let mut labels = vec![0u8; h * w];
            r.read_exact(&mut labels)?;
            Some(labels)
        } else {
            None
        };
        out.push(Sample {
            id,
            domain_id,
            split,
            image,
            labels,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusSummary {
    pub proxy: usize,
    pub source: usize,
    pub source_labeled: usize,
    pub targets: usize,
    pub hash: String,
}

/// Writes the manifest plus one record file per split; returns counts and
/// the corpus hash. Output bytes are a pure function of the manifest.
pub fn build_corpus(manifest: &SplitManifest, dir: &Path) -> Result<CorpusSummary> {
    let corpus = generate_corpus(manifest)?;
    std::fs::create_dir_all(dir)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let splits: [(&str, &[Sample]); 3] = [
        ("proxy.gkdd", &corpus.proxy),
        ("source.gkdd", &corpus.source),
        ("targets.gkdd", &corpus.targets),
    ];
    for (name, samples) in splits {
        let file = std::fs::File::create(dir.join(name))?;
        write_split(std::io::BufWriter::new(file), samples, manifest.classes)?;
    }
    Ok(CorpusSummary {
        proxy: corpus.proxy.len(),
        source: corpus.source.len(),
        source_labeled: corpus.source.iter().filter(|s| s.labels.is_some()).count(),
        targets: corpus.targets.len(),
        hash: corpus_hash(dir)?,
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = SplitManifest::load(&dir.join(MANIFEST_FILE))?;
    let open = |name: &str| -> Result<std::io::BufReader<std::fs::File>> {
        Ok(std::io::BufReader::new(std::fs::File::open(dir.join(name))?))
    };
    Ok(Corpus {
        proxy: read_split(open("proxy.gkdd")?, SplitRole::Proxy)?,
        source: read_split(open("source.gkdd")?, SplitRole::Source)?,
        targets: read_split(open("targets.gkdd")?, SplitRole::Target)?,
        manifest,
    })
}

/// SHA-256 over the three record files, in split order.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in ["proxy.gkdd", "source.gkdd", "targets.gkdd"] {
        hasher.update(std::fs::read(dir.join(name))?);
    }
    Ok(crate::checkpoint::hex_string(&hasher.finalize()))
}

/// Per-channel pixel means over a set of samples.
pub fn channel_means(samples: &[&Sample]) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for s in samples {
        let n = s.image.numel() / 3;
        for c in 0..3 {
            sums[c] += s.image.data()[c * n..(c + 1) * n].iter().sum::<f64>();
        }
        count += n;
    }
    [
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ]
}

/// Histogram of class labels.
pub fn class_histogram(labels: &[u8]) -> BTreeMap<u8, usize> {
    let mut hist = BTreeMap::new();
    for &l in labels {
        *hist.entry(l).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let (spec_a, labels_a) = generate_scene(42, 64);
        let (spec_b, labels_b) = generate_scene(42, 64);
        assert_eq!(spec_a, spec_b);
        assert_eq!(labels_a, labels_b);
        let (_, labels_c) = generate_scene(43, 64);
        assert_ne!(labels_a, labels_c);
    }

    #[test]
    fn thousand_scenes_cover_every_class() {
        let mut present = [false; CLASSES];
        for seed in 0..1000u64 {
            let (_, labels) = generate_scene(seed, 64);
            for &l in &labels {
                present[l as usize] = true;
            }
        }
        assert!(present.iter().all(|&p| p), "{present:?}");
    }

    #[test]
    fn background_fraction_within_bounds() {
        for seed in 0..200u64 {
            let (_, labels) = generate_scene(seed, 64);
            let bg = background_fraction(&labels);
            assert!((0.30..=0.80).contains(&bg), "seed {seed}: bg {bg}");
        }
    }

    #[test]
    fn every_class_appears_in_enough_scenes() {
        let mut scene_hits = [0usize; CLASSES];
        let total = 300;
        for seed in 0..total as u64 {
            let (_, labels) = generate_scene(seed, 64);
            let hist = class_histogram(&labels);
            for c in 0..CLASSES {
                if hist.contains_key(&(c as u8)) {
                    scene_hits[c] += 1;
                }
            }
        }
        for (c, &hits) in scene_hits.iter().enumerate() {
            assert!(
                hits as f64 / total as f64 >= 0.01,
                "class {c} appears in {hits}/{total} scenes"
            );
        }
    }

    #[test]
    fn identity_style_is_exact_palette_lookup() {
        let style = DomainStyle::new(
            "ID",
            SplitRole::Source,
            [
                [0.1, 0.2, 0.3],
                [0.4, 0.5, 0.6],
                [0.7, 0.8, 0.9],
                [0.15, 0.25, 0.35],
                [0.45, 0.55, 0.65],
            ],
            0.0,
            1.0,
            0.0,
            0.0,
        );
        let (_, labels) = generate_scene(5, 32);
        let img = render(&labels, 32, &style, 9).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let class = labels[y * 32 + x] as usize;
                for c in 0..3 {
                    assert_eq!(img.data()[c * 32 * 32 + y * 32 + x], style.palette[class][c]);
                }
            }
        }
    }

    #[test]
    fn two_styles_same_scene_same_labels_different_images() {
        let styles = default_styles();
        let (_, labels) = generate_scene(11, 32);
        let a = render(&labels, 32, &styles[0], 3).unwrap();
        let b = render(&labels, 32, &styles[1], 3).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn source_and_first_target_shift_channel_means() {
        let styles = default_styles();
        let s1 = styles.iter().find(|s| s.domain_id == "S1").unwrap();
        let t1 = styles.iter().find(|s| s.domain_id == "T1").unwrap();
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for seed in 0..32u64 {
            let (_, labels) = generate_scene(seed, 64);
            src.push(Sample {
                id: seed,
                domain_id: "S1".into(),
                split: SplitRole::Source,
                image: render(&labels, 64, s1, seed).unwrap(),
                labels: None,
            });
            tgt.push(Sample {
                id: seed,
                domain_id: "T1".into(),
                split: SplitRole::Target,
                image: render(&labels, 64, t1, seed).unwrap(),
                labels: None,
            });
        }
        let ms = channel_means(&src.iter().collect::<Vec<_>>());
        let mt = channel_means(&tgt.iter().collect::<Vec<_>>());
        let diff = ((ms[0] - mt[0]).abs() + (ms[1] - mt[1]).abs() + (ms[2] - mt[2]).abs()) / 3.0;
        assert!(diff > 0.05, "mean channel difference {diff}");
    }

    fn small_manifest() -> SplitManifest {
        SplitManifest {
            corpus_seed: 3,
            image_size: 32,
            classes: CLASSES,
            proxy_count: 12,
            source_count: 8,
            target_count: 4,
            label_fraction: 1.0,
            styles: default_styles(),
        }
    }

    #[test]
    fn corpus_counts_and_label_fractions() {
        let mut manifest = small_manifest();
        let corpus = generate_corpus(&manifest).unwrap();
        assert_eq!(corpus.proxy.len(), 12);
        assert_eq!(corpus.source.len(), 8);
        assert_eq!(corpus.targets.len(), 12);
        assert!(corpus.proxy.iter().all(|s| s.labels.is_none()));
        assert!(corpus.source.iter().all(|s| s.labels.is_some()));
        assert!(corpus.targets.iter().all(|s| s.labels.is_some()));

        manifest.label_fraction = 0.25;
        let corpus = generate_corpus(&manifest).unwrap();
        assert_eq!(corpus.source.iter().filter(|s| s.labels.is_some()).count(), 2);
    }

    #[test]
    fn sixteenth_of_512_is_exactly_32_and_nested() {
        let sixteenth = labeled_prefix(512, 1.0 / 16.0, 7);
        assert_eq!(sixteenth.len(), 32);
        let eighth = labeled_prefix(512, 1.0 / 8.0, 7);
        assert_eq!(eighth.len(), 64);
        assert!(sixteenth.iter().all(|p| eighth.contains(p)));
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let manifest = small_manifest();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let sum_a = build_corpus(&manifest, dir_a.path()).unwrap();
        let sum_b = build_corpus(&manifest, dir_b.path()).unwrap();
        assert_eq!(sum_a.hash, sum_b.hash);
        let loaded = load_corpus(dir_a.path()).unwrap();
        assert_eq!(loaded.proxy.len(), 12);
        let regenerated = generate_corpus(&manifest).unwrap();
        assert_eq!(loaded.proxy, regenerated.proxy);
        assert_eq!(loaded.source, regenerated.source);
        assert_eq!(loaded.targets, regenerated.targets);
    }

    #[test]
    fn rendering_never_changes_labels() {
        let manifest = small_manifest();
        let corpus = generate_corpus(&manifest).unwrap();
        for s in corpus.source.iter().chain(corpus.targets.iter()) {
            let scene_seed = derive_seed(manifest.corpus_seed, "scene", s.id);
            let (_, labels) = generate_scene(scene_seed, manifest.image_size);
            assert_eq!(s.labels.as_ref().unwrap(), &labels);
        }
    }

    #[test]
    fn teacher_pool_is_labeled_and_id_disjoint() {
        let manifest = small_manifest();
        let pool = generate_teacher_pool(&manifest, 2).unwrap();
        assert_eq!(pool.len(), 2 * 7);
        assert!(pool.iter().all(|s| s.labels.is_some()));
        assert!(pool.iter().all(|s| s.id >= TEACHER_POOL_ID_BASE));
    }

    #[test]
    fn manifest_validation_rejects_bad_rosters() {
        let mut manifest = small_manifest();
        manifest.styles.retain(|s| s.role != SplitRole::Source);
        assert!(manifest.validate().is_err());

        let mut manifest = small_manifest();
        manifest.label_fraction = 0.0;
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn manifest_toml_roundtrip() {
        let manifest = small_manifest();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.toml");
        manifest.save(&path).unwrap();
        let loaded = SplitManifest::load(&path).unwrap();
        assert_eq!(loaded, manifest);
    }
}
