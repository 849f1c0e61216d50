//! Synthetic multi-domain detection data, the on-disk dataset format, and the
//! class-balanced batch sampler.
//!
//! Every domain renders the same shape classes; domains differ only in
//! background hue, sinusoidal texture, additive noise and illumination gain.
//! Target domains draw their style from a pool disjoint from the sources.
//!
//! On disk a dataset is a directory holding `images/<id>.png` (8-bit RGB) and
//! `annotations.json`:
//!
//! ```json
//! { "domains": ["source0", "source1"],
//!   "classes": ["disc", "square"],
//!   "samples": [ { "id": "source0_0000", "file": "images/source0_0000.png",
//!                  "domain": "source0",
//!                  "boxes": [ { "x": 3, "y": 7, "w": 12, "h": 12, "class": 1 } ] } ] }
//! ```
//!
//! `class` is 1-based into `classes`; `domain` names an entry of `domains`,
//! whose order defines the domain labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_sample, Annotation, BoundingBox, ClassLabel, DomainLabel, DomainSample, Image, Schema};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";
/// Smallest object extent the generator emits, in pixels.
pub const MIN_OBJECT_EXTENT: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
        }
    }

    /// Whether the pixel centred at `(px, py)` (relative to the object's
    /// `s x s` cell) belongs to the shape.
    fn covers(self, px: f64, py: f64, s: f64) -> bool {
        let (cx, cy) = (s / 2.0, s / 2.0);
        let r2 = (px - cx).powi(2) + (py - cy).powi(2);
        match self {
            ShapeKind::Disc => r2 <= (s / 2.0).powi(2),
            ShapeKind::Ring => r2 <= (s / 2.0).powi(2) && r2 >= (s / 4.0).powi(2),
            ShapeKind::Square => true,
            ShapeKind::Cross => {
                let t = s / 6.0;
                (px - cx).abs() <= t || (py - cy).abs() <= t
            }
            ShapeKind::Triangle => {
                // apex at top centre, base along the bottom edge
                let half = (py / s) * (s / 2.0);
                (px - cx).abs() <= half
            }
        }
    }
}

/// Appearance parameters of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub background: [f64; 3],
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    #[serde(default = "default_sources")]
    pub n_source_domains: usize,
    #[serde(default = "default_targets")]
    pub n_target_domains: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<ShapeKind>,
    #[serde(default = "default_images")]
    pub images_per_domain: usize,
    #[serde(default = "default_size")]
    pub image_size: (usize, usize),
    #[serde(default = "default_objects")]
    pub objects_per_image: (usize, usize),
    #[serde(default = "default_extent")]
    pub object_size: (usize, usize),
    /// Explicit styles, sources first then targets. Generated when absent.
    #[serde(default)]
    pub domain_styles: Option<Vec<DomainStyle>>,
    pub seed: u64,
}

fn default_sources() -> usize {
    3
}
fn default_targets() -> usize {
    1
}
fn default_classes() -> Vec<ShapeKind> {
    vec![ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle]
}
fn default_images() -> usize {
    60
}
fn default_size() -> (usize, usize) {
    (64, 64)
}
fn default_objects() -> (usize, usize) {
    (1, 3)
}
fn default_extent() -> (usize, usize) {
    (10, 20)
}

impl ToySpec {
    pub fn new(seed: u64) -> Self {
        Self {
            n_source_domains: default_sources(),
            n_target_domains: default_targets(),
            classes: default_classes(),
            images_per_domain: default_images(),
            image_size: default_size(),
            objects_per_image: default_objects(),
            object_size: default_extent(),
            domain_styles: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_source_domains < 2 {
            return bad(format!("n_source_domains = {} (need >= 2)", self.n_source_domains));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.images_per_domain == 0 {
            return bad("images_per_domain must be >= 1".into());
        }
        let (lo, hi) = self.object_size;
        if (lo as f64) < MIN_OBJECT_EXTENT + 1.0 || lo > hi {
            return bad(format!("object_size ({lo}, {hi}) must satisfy 9 <= min <= max"));
        }
        let (h, w) = self.image_size;
        if hi + 2 > h || hi + 2 > w {
            return bad(format!("objects up to {hi}px do not fit a {h}x{w} image"));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return bad("objects_per_image min exceeds max".into());
        }
        if let Some(styles) = &self.domain_styles {
            let total = self.n_source_domains + self.n_target_domains;
            if styles.len() != total {
                return bad(format!("{} styles given for {total} domains", styles.len()));
            }
            let (src, tgt) = styles.split_at(self.n_source_domains);
            if tgt.iter().any(|t| src.contains(t)) {
                return bad("a target style repeats a source style".into());
            }
        }
        Ok(())
    }

    pub fn styles(&self) -> Vec<DomainStyle> {
        self.domain_styles
            .clone()
            .unwrap_or_else(|| default_styles(self.n_source_domains, self.n_target_domains))
    }
}

/// Source styles spread over hues with moderate gain and noise; target styles
/// sit between source hues, darker, noisier and with finer texture.
pub fn default_styles(n_source: usize, n_target: usize) -> Vec<DomainStyle> {
    let mut out = Vec::with_capacity(n_source + n_target);
    for d in 0..n_source {
        let hue = 360.0 * d as f64 / n_source as f64 + 20.0;
        let t = if n_source > 1 { d as f64 / (n_source - 1) as f64 } else { 0.5 };
        out.push(DomainStyle {
            background: hsv_to_rgb(hue, 0.55, 0.55),
            texture_freq: 2.0 + d as f64,
            texture_angle: 0.4 * d as f64,
            texture_amp: 0.15,
            noise_sigma: 0.02 + 0.02 * (d % 3) as f64,
            gain: 0.85 + 0.3 * t,
        });
    }
    for t in 0..n_target {
        let hue = 360.0 * (t as f64 + 0.5) / n_source.max(1) as f64 + 20.0;
        out.push(DomainStyle {
            background: hsv_to_rgb(hue, 0.7, 0.45),
            texture_freq: 6.5 + t as f64,
            texture_angle: 1.1 + 0.3 * t as f64,
            texture_amp: 0.2,
            noise_sigma: 0.08,
            gain: 0.7,
        });
    }
    out
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// N per-domain sample collections sharing one class list and image size.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_names: Vec<String>,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub domains: Vec<Vec<DomainSample>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub domain: usize,
    pub index: usize,
}

impl DomainDataset {
    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-domain sizes `M_D`.
    pub fn sizes(&self) -> Vec<usize> {
        self.domains.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Schema {
        Schema {
            num_classes: self.num_classes(),
            num_domains: self.num_domains(),
            height: self.height,
            width: self.width,
        }
    }

    pub fn get(&self, r: SampleRef) -> &DomainSample {
        &self.domains[r.domain][r.index]
    }

    pub fn samples(&self) -> impl Iterator<Item = &DomainSample> {
        self.domains.iter().flatten()
    }

    /// Splits every domain into a training and a held-out part. Each domain
    /// with at least two samples keeps at least one on each side.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (DomainDataset, DomainDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        let mut train = self.with_domains(vec![Vec::new(); self.num_domains()]);
        let mut held = train.clone();
        for (d, samples) in self.domains.iter().enumerate() {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            idx.shuffle(&mut rng);
            let mut n_held = (samples.len() as f64 * held_out_fraction).round() as usize;
            if samples.len() >= 2 {
                n_held = n_held.clamp(1, samples.len() - 1);
            } else {
                n_held = 0;
            }
            let (h, t) = idx.split_at(n_held);
            let mut h = h.to_vec();
            let mut t = t.to_vec();
            h.sort_unstable();
            t.sort_unstable();
            held.domains[d] = h.into_iter().map(|i| samples[i].clone()).collect();
            train.domains[d] = t.into_iter().map(|i| samples[i].clone()).collect();
        }
        (train, held)
    }

    fn with_domains(&self, domains: Vec<Vec<DomainSample>>) -> DomainDataset {
        DomainDataset {
            domain_names: self.domain_names.clone(),
            class_names: self.class_names.clone(),
            height: self.height,
            width: self.width,
            domains,
        }
    }
}

const SPLIT_SALT: u64 = 0x5eed_0051_1700;

/// Generated source and target datasets plus the styles used.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDatasets {
    pub source: DomainDataset,
    pub target: Option<DomainDataset>,
    pub styles: Vec<DomainStyle>,
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders the toy datasets in memory. Deterministic in `spec`.
pub fn render_toy_dataset(spec: &ToySpec) -> Result<ToyDatasets> {
    spec.validate()?;
    let styles = spec.styles();
    let class_names: Vec<String> = spec.classes.iter().map(|c| c.name().to_string()).collect();
    let (h, w) = spec.image_size;
    let build = |range: std::ops::Range<usize>, prefix: &str| -> DomainDataset {
        let names: Vec<String> = (0..range.len()).map(|i| format!("{prefix}{i}")).collect();
        let domains = range
            .clone()
            .enumerate()
            .map(|(local, global)| {
                (0..spec.images_per_domain)
                    .map(|i| {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, global as u64, i as u64));
                        let (image, annotations) = render_image(spec, &styles[global], &mut rng);
                        DomainSample {
                            id: format!("{}_{:04}", names[local], i),
                            image,
                            annotations,
                            domain: DomainLabel(local),
                        }
                    })
                    .collect()
            })
            .collect();
        DomainDataset {
            domain_names: names,
            class_names: class_names.clone(),
            height: h,
            width: w,
            domains,
        }
    };
    let source = build(0..spec.n_source_domains, "source");
    let target = (spec.n_target_domains > 0).then(|| {
        build(
            spec.n_source_domains..spec.n_source_domains + spec.n_target_domains,
            "target",
        )
    });
    Ok(ToyDatasets { source, target, styles })
}

/// Renders and writes `out/source` (and `out/target` when target domains are
/// requested).
pub fn generate_toy_dataset(spec: &ToySpec, out: &Path) -> Result<ToyDatasets> {
    let data = render_toy_dataset(spec)?;
    write_dataset(&data.source, &out.join("source"))?;
    if let Some(t) = &data.target {
        write_dataset(t, &out.join("target"))?;
    }
    let styles = serde_json::to_string_pretty(&data.styles).expect("styles serialise");
    let p = out.join("styles.json");
    fs::write(&p, styles).map_err(|e| Error::io(p, e))?;
    Ok(data)
}

fn render_image(spec: &ToySpec, style: &DomainStyle, rng: &mut ChaCha8Rng) -> (Image, Vec<Annotation>) {
    let (h, w) = spec.image_size;
    let mut px = vec![0.0; h * w * 3];
    let (ca, sa) = (style.texture_angle.cos(), style.texture_angle.sin());
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 * ca + y as f64 * sa) / w as f64;
            let t = 1.0 + style.texture_amp * (std::f64::consts::TAU * style.texture_freq * u + phase).sin();
            for c in 0..3 {
                px[(y * w + x) * 3 + c] = style.background[c] * t;
            }
        }
    }

    let n_obj = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    let mut annotations = Vec::new();
    let bg_luma = luma(style.background);
    for _ in 0..n_obj {
        let class = rng.gen_range(0..spec.classes.len());
        let kind = spec.classes[class];
        let s = rng.gen_range(spec.object_size.0..=spec.object_size.1);
        let mut color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        if (luma(color) - bg_luma).abs() < 0.3 {
            let shift = if bg_luma < 0.5 { 0.45 } else { -0.45 };
            for ch in color.iter_mut() {
                *ch = (*ch + shift).clamp(0.0, 1.0);
            }
        }
        let mut placed = None;
        for _ in 0..50 {
            let ox = rng.gen_range(0..=w - s);
            let oy = rng.gen_range(0..=h - s);
            let clear = cells.iter().all(|&(cx, cy, cs)| {
                ox + s + 2 <= cx || cx + cs + 2 <= ox || oy + s + 2 <= cy || cy + cs + 2 <= oy
            });
            if clear {
                placed = Some((ox, oy));
                break;
            }
        }
        let Some((ox, oy)) = placed else { continue };
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..s {
            for dx in 0..s {
                if kind.covers(dx as f64 + 0.5, dy as f64 + 0.5, s as f64) {
                    let (x, y) = (ox + dx, oy + dy);
                    px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x);
                    y2 = y2.max(y);
                }
            }
        }
        let bbox = BoundingBox::new(x1 as f64, y1 as f64, (x2 - x1 + 1) as f64, (y2 - y1 + 1) as f64);
        debug_assert!(bbox.w >= MIN_OBJECT_EXTENT && bbox.h >= MIN_OBJECT_EXTENT);
        cells.push((ox, oy, s));
        annotations.push(Annotation {
            bbox,
            class: ClassLabel(class + 1),
        });
    }

    let noise = Normal::new(0.0, style.noise_sigma.max(1e-12)).expect("valid sigma");
    for v in px.iter_mut() {
        let n = if style.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = (style.gain * *v + n).clamp(0.0, 1.0);
    }
    // quantise so that the in-memory sample equals its PNG round trip
    let bytes: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
    let image = Image::from_rgb8(h, w, &bytes).expect("buffer sized to image");
    (image, annotations)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    domains: Vec<String>,
    classes: Vec<String>,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    file: String,
    domain: String,
    boxes: Vec<ManifestBox>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    class: usize,
}

pub fn write_dataset(ds: &DomainDataset, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut samples = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let file = format!("{IMAGES_DIR}/{}.png", s.id);
        let path = dir.join(&file);
        let buf = image::RgbImage::from_raw(s.image.width() as u32, s.image.height() as u32, s.image.to_rgb8())
            .expect("buffer sized to image");
        buf.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        samples.push(ManifestSample {
            id: s.id.clone(),
            file,
            domain: ds.domain_names[s.domain.0].clone(),
            boxes: s
                .annotations
                .iter()
                .map(|a| ManifestBox {
                    x: a.bbox.x,
                    y: a.bbox.y,
                    w: a.bbox.w,
                    h: a.bbox.h,
                    class: a.class.0,
                })
                .collect(),
        });
    }
    let manifest = ManifestFile {
        domains: ds.domain_names.clone(),
        classes: ds.class_names.clone(),
        samples,
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let mpath = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    let schema_err = |record: Option<usize>, message: String| Error::Schema {
        file: mpath.clone(),
        record,
        message,
    };
    if manifest.domains.is_empty() {
        return Err(schema_err(None, "no domains listed".into()));
    }
    if manifest.classes.is_empty() {
        return Err(schema_err(None, "no classes listed".into()));
    }
    let domain_index: BTreeMap<&str, usize> = manifest
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    if domain_index.len() != manifest.domains.len() {
        return Err(schema_err(None, "duplicate domain names".into()));
    }
    let mut domains: Vec<Vec<DomainSample>> = vec![Vec::new(); manifest.domains.len()];
    let mut size: Option<(usize, usize)> = None;
    for (record, ms) in manifest.samples.iter().enumerate() {
        let &d = domain_index
            .get(ms.domain.as_str())
            .ok_or_else(|| schema_err(Some(record), format!("unknown domain `{}`", ms.domain)))?;
        let ipath: PathBuf = dir.join(&ms.file);
        if !ipath.starts_with(dir) || ms.file.contains("..") {
            return Err(schema_err(Some(record), format!("file `{}` escapes the dataset", ms.file)));
        }
        if !ipath.is_file() {
            return Err(schema_err(Some(record), format!("image file `{}` not found", ms.file)));
        }
        let img = image::open(&ipath)
            .map_err(|source| Error::Image { path: ipath.clone(), source })?
            .to_rgb8();
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        let (h, w) = *size.get_or_insert((ih, iw));
        if (ih, iw) != (h, w) {
            return Err(schema_err(
                Some(record),
                format!("image is {ih}x{iw}, earlier images are {h}x{w}"),
            ));
        }
        let sample = DomainSample {
            id: ms.id.clone(),
            image: Image::from_rgb8(ih, iw, img.as_raw())?,
            annotations: ms
                .boxes
                .iter()
                .map(|b| Annotation {
                    bbox: BoundingBox::new(b.x, b.y, b.w, b.h),
                    class: ClassLabel(b.class),
                })
                .collect(),
            domain: DomainLabel(d),
        };
        let schema = Schema {
            num_classes: manifest.classes.len(),
            num_domains: manifest.domains.len(),
            height: h,
            width: w,
        };
        let sample = validate_sample(sample, &schema).map_err(|e| schema_err(Some(record), e.to_string()))?;
        domains[d].push(sample);
    }
    let (height, width) = size.ok_or_else(|| schema_err(None, "dataset has no samples".into()))?;
    Ok(DomainDataset {
        domain_names: manifest.domains,
        class_names: manifest.classes,
        height,
        width,
        domains,
    })
}

/// One epoch of batches from [`balanced_batches`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<SampleRef>>,
    /// Samples drawn from each domain in every batch, before round-robin
    /// remainder slots.
    pub domain_quota: Vec<usize>,
    /// Realised class histogram per batch (index 0 unused).
    pub class_counts: Vec<Vec<usize>>,
    pub seed: u64,
}

impl IntoIterator for BatchPlan {
    type Item = Vec<SampleRef>;
    type IntoIter = std::vec::IntoIter<Vec<SampleRef>>;

    fn into_iter(self) -> Self::IntoIter {
        self.batches.into_iter()
    }
}

/// Plans one epoch of batches.
///
/// Every batch takes `floor(batch_size / N)` samples from each non-empty
/// domain, with remainder slots assigned round-robin. Within a domain each
/// slot targets the class that is currently rarest in the batch, and picks
/// among images containing it with probability proportional to the summed
/// inverse class frequencies of the image's objects.
pub fn balanced_batches(ds: &DomainDataset, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot sample batches from an empty dataset"));
    }
    let active: Vec<usize> = (0..ds.num_domains()).filter(|&d| !ds.domains[d].is_empty()).collect();
    if batch_size < active.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} is smaller than the {} non-empty domains",
            active.len()
        )));
    }
    let k = ds.num_classes();
    let pools: Vec<DomainPool> = ds.domains.iter().map(|s| DomainPool::new(s, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xba7c, 0));
    let n_batches = ds.len().div_ceil(batch_size);
    let base = batch_size / active.len();
    let rem = batch_size % active.len();
    let mut domain_quota = vec![0; ds.num_domains()];
    for &d in &active {
        domain_quota[d] = base;
    }

    let mut batches = Vec::with_capacity(n_batches);
    let mut class_counts = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut hist = vec![0usize; k + 1];
        let mut batch = Vec::with_capacity(batch_size);
        for (pos, &d) in active.iter().enumerate() {
            let extra = usize::from((pos + active.len() - b % active.len()) % active.len() < rem);
            for _ in 0..base + extra {
                let index = pools[d].draw(&hist, &mut rng);
                for a in &ds.domains[d][index].annotations {
                    hist[a.class.0] += 1;
                }
                batch.push(SampleRef { domain: d, index });
            }
        }
        batches.push(batch);
        class_counts.push(hist);
    }
    Ok(BatchPlan {
        batches,
        domain_quota,
        class_counts,
        seed,
    })
}

struct DomainPool {
    /// Sample indices containing each class (index 0 unused).
    by_class: Vec<Vec<usize>>,
    weights: Vec<f64>,
    len: usize,
}

impl DomainPool {
    fn new(samples: &[DomainSample], k: usize) -> Self {
        let mut freq = vec![0usize; k + 1];
        let mut by_class = vec![Vec::new(); k + 1];
        for (i, s) in samples.iter().enumerate() {
            for a in &s.annotations {
                freq[a.class.0] += 1;
                if by_class[a.class.0].last() != Some(&i) {
                    by_class[a.class.0].push(i);
                }
            }
        }
        let mut weights: Vec<f64> = samples
            .iter()
            .map(|s| s.annotations.iter().map(|a| 1.0 / freq[a.class.0] as f64).sum())
            .collect();
        let floor = weights.iter().cloned().filter(|w| *w > 0.0).fold(f64::INFINITY, f64::min);
        let floor = if floor.is_finite() { floor } else { 1.0 };
        for w in weights.iter_mut() {
            if *w == 0.0 {
                *w = floor;
            }
        }
        Self {
            by_class,
            weights,
            len: samples.len(),
        }
    }

    fn draw(&self, hist: &[usize], rng: &mut ChaCha8Rng) -> usize {
        let present: Vec<usize> = (1..self.by_class.len()).filter(|&c| !self.by_class[c].is_empty()).collect();
        let candidates: Vec<usize> = if present.is_empty() {
            (0..self.len).collect()
        } else {
            let least = present.iter().map(|&c| hist[c]).min().unwrap_or(0);
            let rare: Vec<usize> = present.iter().copied().filter(|&c| hist[c] == least).collect();
            let c = *rare.choose(rng).expect("non-empty");
            self.by_class[c].clone()
        };
        let w: Vec<f64> = candidates.iter().map(|&i| self.weights[i]).collect();
        let dist = WeightedIndex::new(&w).expect("positive weights");
        candidates[dist.sample(rng)]
    }
}
