//! Procedural mammogram-like phantoms with known lesion annotations.
//!
//! Each image is a smoothed-noise tissue texture inside a half-ellipse
//! "breast" region on a zero background, with masses (radially decaying
//! blobs) or calcification clusters (small bright specks) added on top.
//! Everything is a pure function of the [`PhantomSpec`]; each image draws
//! from its own seed, derived from `(master_seed, class, index)`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusWriter, ManifestRecord};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::types::{LabelClass, LesionBox, LesionKind, Provenance, Split};

/// Raw intensity of the area outside the breast.
pub const BACKGROUND_FLOOR: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: Copy + PartialOrd + Into<f64>> Range<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    fn check(&self, field: &str) -> Result<()> {
        if self.min.into() < 0.0 || !(self.min <= self.max) {
            return Err(Error::validation(
                field,
                format!("range [{}, {}] must be nonempty and nonnegative", self.min.into(), self.max.into()),
            ));
        }
        Ok(())
    }
}

impl Range<f32> {
    fn sample(&self, rng: &mut Rng) -> f32 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

impl Range<u32> {
    fn sample(&self, rng: &mut Rng) -> u32 {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundTexture {
    /// Box-blur radius (px) of the tissue noise; three passes approximate a Gaussian.
    pub smoothing_scale: f32,
    /// Tissue intensity range as a fraction of full scale.
    pub intensity: Range<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassParams {
    pub radius: Range<f32>,
    pub peak: Range<f32>,
    /// Benign masses use `peak * benign_peak_scale` and a smooth outline.
    #[serde(default = "default_benign_scale")]
    pub benign_peak_scale: f32,
}

fn default_benign_scale() -> f32 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalcParams {
    pub clusters: Range<u32>,
    pub speck_radius: Range<f32>,
    pub speck_count: Range<u32>,
    pub cluster_radius: Range<f32>,
    pub peak: Range<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub background_texture: BackgroundTexture,
    pub mass_params: MassParams,
    pub calc_params: CalcParams,
    pub counts_per_class: BTreeMap<LabelClass, usize>,
    pub master_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_width: 512,
            image_height: 512,
            background_texture: BackgroundTexture {
                smoothing_scale: 6.0,
                intensity: Range::new(0.25, 0.65),
            },
            mass_params: MassParams {
                radius: Range::new(16.0, 28.0),
                peak: Range::new(0.15, 0.3),
                benign_peak_scale: default_benign_scale(),
            },
            calc_params: CalcParams {
                clusters: Range::new(1, 2),
                speck_radius: Range::new(1.5, 2.5),
                speck_count: Range::new(4, 8),
                cluster_radius: Range::new(14.0, 22.0),
                peak: Range::new(0.25, 0.4),
            },
            counts_per_class: LabelClass::ALL.iter().map(|&c| (c, 4)).collect(),
            master_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 16 || self.image_height < 16 {
            return Err(Error::validation("image_width/height", "must be at least 16 px"));
        }
        let bg = &self.background_texture;
        if !(bg.smoothing_scale >= 0.0) {
            return Err(Error::validation("background_texture.smoothing_scale", "must be nonnegative"));
        }
        bg.intensity.check("background_texture.intensity")?;
        if bg.intensity.min <= 0.0 || bg.intensity.max > 1.0 {
            return Err(Error::validation(
                "background_texture.intensity",
                "tissue intensity must lie in (0, 1] so it separates from the background floor",
            ));
        }
        let m = &self.mass_params;
        m.radius.check("mass_params.radius")?;
        m.peak.check("mass_params.peak")?;
        if !(0.0..=1.0).contains(&m.benign_peak_scale) {
            return Err(Error::validation("mass_params.benign_peak_scale", "must lie in [0, 1]"));
        }
        let c = &self.calc_params;
        c.clusters.check("calc_params.clusters")?;
        c.speck_radius.check("calc_params.speck_radius")?;
        c.speck_count.check("calc_params.speck_count")?;
        c.cluster_radius.check("calc_params.cluster_radius")?;
        c.peak.check("calc_params.peak")?;
        if c.clusters.min == 0 {
            return Err(Error::validation("calc_params.clusters", "calcification images need at least one cluster"));
        }
        let largest = (mass_half_extent(m.radius.max))
            .max(c.cluster_radius.max.ceil() as usize + c.speck_radius.max.ceil() as usize);
        if 2 * largest + 1 > self.image_width.min(self.image_height) / 2 {
            return Err(Error::validation(
                "mass_params.radius/calc_params.cluster_radius",
                "lesion extent too large for the image",
            ));
        }
        Ok(())
    }
}

/// A generated (or ingested) full-field image.
#[derive(Debug, Clone, PartialEq)]
pub struct FullImage {
    pub id: String,
    pub pixels: Array2<u16>,
    pub annotations: Vec<LesionBox>,
    pub label_class: LabelClass,
    pub split: Split,
    pub seed: u64,
    pub tissue_floor: Option<u16>,
}

impl FullImage {
    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn tissue_threshold(&self) -> TissueThreshold {
        match self.tissue_floor {
            Some(f) => TissueThreshold::Floor(f),
            None => TissueThreshold::Otsu,
        }
    }

    pub fn load(corpus: &Corpus, record: &ManifestRecord) -> Result<Self> {
        Ok(Self {
            id: record.id.clone(),
            pixels: corpus.load_raw(record)?,
            annotations: record.boxes.clone(),
            label_class: record.class,
            split: record.split,
            seed: record.seed,
            tissue_floor: record.tissue_floor,
        })
    }
}

/// Per-image seed: a mix of the master seed, the class and the index.
pub fn image_seed(master_seed: u64, class: LabelClass, index: usize) -> u64 {
    seed::mix(master_seed, &[class.ordinal(), index as u64])
}

/// 60/20/20 train/val/test by hash of `(class, index)`.
///
/// The master seed is deliberately not mixed in so the split of an image
/// depends only on its identity.
pub fn assign_split(class: LabelClass, index: usize) -> Split {
    let h = seed::mix(0x5eed_5b17, &[class.ordinal(), index as u64]);
    match h % 10 {
        0..=5 => Split::Train,
        6 | 7 => Split::Val,
        _ => Split::Test,
    }
}

pub fn image_id(class: LabelClass, index: usize) -> String {
    format!("{}-{:06}", class.as_str(), index)
}

pub fn generate_phantom_corpus(spec: &PhantomSpec, out: impl AsRef<Path>) -> Result<Corpus> {
    spec.validate()?;
    let mut writer = CorpusWriter::create(out)?;
    for (&class, &count) in &spec.counts_per_class {
        for index in 0..count {
            let img = generate_image(spec, class, index)?;
            let record = ManifestRecord {
                id: img.id.clone(),
                class,
                split: img.split,
                boxes: img.annotations.clone(),
                seed: img.seed,
                provenance: Provenance::Real,
                tissue_floor: img.tissue_floor,
                source: None,
                origin: None,
                generator: None,
            };
            writer.add(record, &img.pixels)?;
        }
    }
    writer.finish()
}

/// Renders one image of the corpus from its derived seed.
pub fn generate_image(spec: &PhantomSpec, class: LabelClass, index: usize) -> Result<FullImage> {
    let seed = image_seed(spec.master_seed, class, index);
    let mut rng = seed::rng(seed);
    let (w, h) = (spec.image_width, spec.image_height);

    let breast = BreastRegion::sample(w, h, &mut rng);
    let texture = tissue_texture(w, h, &spec.background_texture, &mut rng);
    let mut canvas = Array2::from_shape_fn((h, w), |(y, x)| {
        if breast.contains(x, y) {
            texture[[y, x]]
        } else {
            0.0
        }
    });

    let mut annotations = Vec::new();
    let lesions: Vec<(LesionKind, LesionStyle, usize)> = match class {
        LabelClass::Normal => vec![],
        LabelClass::Benign | LabelClass::MalignantMass => {
            let m = &spec.mass_params;
            let radius = m.radius.sample(&mut rng);
            let mut peak = m.peak.sample(&mut rng);
            let benign = class == LabelClass::Benign;
            if benign {
                peak *= m.benign_peak_scale;
            }
            let style = LesionStyle {
                peak,
                spiculation: if benign { 0.0 } else { 0.18 },
                ..LesionStyle::default()
            };
            let half = mass_half_extent(radius).max(((radius.ceil()) as usize).max(1));
            vec![(LesionKind::Mass, style, half)]
        }
        LabelClass::MalignantCalc => {
            let c = &spec.calc_params;
            (0..c.clusters.sample(&mut rng))
                .map(|_| {
                    let speck_radius = c.speck_radius.sample(&mut rng);
                    let style = LesionStyle {
                        peak: c.peak.sample(&mut rng),
                        speck_count: c.speck_count.sample(&mut rng) as usize,
                        speck_radius,
                        spiculation: 0.0,
                    };
                    let half = c.cluster_radius.sample(&mut rng).ceil() as usize
                        + speck_radius.ceil() as usize;
                    (LesionKind::Calcification, style, half)
                })
                .collect()
        }
    };
    for (kind, style, half) in lesions {
        let side = 2 * half + 1;
        let lbox = place_box(&breast, w, h, side, kind, &annotations, &mut rng);
        let lesion_seed = rng.gen::<u64>();
        canvas = render_lesion(&canvas, &lbox, &style, lesion_seed)?;
        annotations.push(lbox);
    }

    let pixels = canvas.mapv(quantize16);
    Ok(FullImage {
        id: image_id(class, index),
        pixels,
        annotations,
        label_class: class,
        split: assign_split(class, index),
        seed,
        tissue_floor: Some(BACKGROUND_FLOOR),
    })
}

pub fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Amplitude and shape of a rendered lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionStyle {
    /// Peak additive intensity (fraction of full scale).
    pub peak: f32,
    /// Calcification clusters: number of specks.
    pub speck_count: usize,
    /// Calcification clusters: speck radius in px.
    pub speck_radius: f32,
    /// Masses: relative angular modulation of the outline (0 = round).
    pub spiculation: f32,
}

impl Default for LesionStyle {
    fn default() -> Self {
        Self {
            peak: 0.2,
            speck_count: 5,
            speck_radius: 1.5,
            spiculation: 0.0,
        }
    }
}

fn mass_half_extent(radius: f32) -> usize {
    // room for up to +25% outline modulation
    (radius * 1.25).ceil() as usize
}

/// Adds one lesion to `canvas` (intensities in [0, 1]); pixels outside the
/// box are untouched and the sum is clipped to 1.
pub fn render_lesion(
    canvas: &Array2<f32>,
    lbox: &LesionBox,
    style: &LesionStyle,
    seed: u64,
) -> Result<Array2<f32>> {
    let (h, w) = canvas.dim();
    if !lbox.fits_within(w, h) {
        return Err(Error::BoxOutOfBounds {
            box_desc: lbox.to_string(),
            width: w,
            height: h,
        });
    }
    let mut out = canvas.clone();
    if style.peak == 0.0 {
        return Ok(out);
    }
    let mut rng = seed::rng(seed);
    let mut add = |x: usize, y: usize, v: f32| {
        if v > 0.0 && lbox.contains(x, y) {
            let px = &mut out[[y, x]];
            *px = (*px + v).min(1.0);
        }
    };
    let cx = lbox.x + (lbox.width - 1) / 2;
    let cy = lbox.y + (lbox.height - 1) / 2;
    match lbox.lesion_kind {
        LesionKind::Mass => {
            let half = (lbox.width.min(lbox.height) - 1) / 2;
            let radius = half as f32 / 1.25;
            let lobes = rng.gen_range(5..=9) as f32;
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let spic = style.spiculation.clamp(0.0, 0.25);
            for y in lbox.y..lbox.y + lbox.height {
                for x in lbox.x..lbox.x + lbox.width {
                    let dx = x as f32 - cx as f32;
                    let dy = y as f32 - cy as f32;
                    let d = (dx * dx + dy * dy).sqrt();
                    let theta = dy.atan2(dx);
                    let r = radius * (1.0 + spic * (lobes * theta + phase).sin());
                    if d < r {
                        let t = 1.0 - (d / r).powi(2);
                        add(x, y, style.peak * t * t);
                    }
                }
            }
        }
        LesionKind::Calcification => {
            let rho = style.speck_radius.max(0.5);
            let margin = rho.ceil() as usize;
            let min_sep = 2.0 * rho + 2.0;
            let mut centers: Vec<(usize, usize)> = Vec::with_capacity(style.speck_count);
            let lo_x = lbox.x + margin;
            let hi_x = lbox.x + lbox.width - 1 - margin;
            let lo_y = lbox.y + margin;
            let hi_y = lbox.y + lbox.height - 1 - margin;
            if lo_x > hi_x || lo_y > hi_y {
                return Err(Error::validation("speck_radius", "speck does not fit inside its box"));
            }
            let mut attempts = 0;
            while centers.len() < style.speck_count {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::validation(
                        "speck_count",
                        format!("cannot place {} separated specks in {lbox}", style.speck_count),
                    ));
                }
                let c = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
                let far = centers.iter().all(|&(px, py)| {
                    let dx = px as f32 - c.0 as f32;
                    let dy = py as f32 - c.1 as f32;
                    (dx * dx + dy * dy).sqrt() >= min_sep
                });
                if far {
                    centers.push(c);
                }
            }
            for (sx, sy) in centers {
                let reach = rho.ceil() as isize;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let d = ((dx * dx + dy * dy) as f32).sqrt();
                        let v = style.peak * (1.0 - (d / (rho + 0.5)).powi(2));
                        add((sx as isize + dx) as usize, (sy as isize + dy) as usize, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TissueThreshold {
    /// Tissue is anything strictly brighter than this raw value.
    Floor(u16),
    Otsu,
}

pub fn tissue_mask(image: &Array2<u16>, threshold: TissueThreshold) -> Array2<bool> {
    let t = match threshold {
        TissueThreshold::Floor(f) => f,
        TissueThreshold::Otsu => otsu_threshold(image),
    };
    image.mapv(|v| v > t)
}

pub fn tissue_fraction(mask: &Array2<bool>) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Otsu's threshold over the 16-bit histogram. Pixels `> t` are foreground.
pub fn otsu_threshold(image: &Array2<u16>) -> u16 {
    let mut hist = vec![0u64; 65536];
    for &v in image.iter() {
        hist[v as usize] += 1;
    }
    let total = image.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best_t, mut best_var) = (0u16, -1.0f64);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 {
            continue;
        }
        if w1 == 0.0 {
            break;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t as u16;
        }
    }
    if best_var < 0.0 {
        // single-valued image: everything at that value is background
        image.iter().copied().max().unwrap_or(0)
    } else {
        best_t
    }
}

/// Half-ellipse anchored on the left or right edge.
#[derive(Debug, Clone, Copy)]
struct BreastRegion {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
}

impl BreastRegion {
    fn sample(w: usize, h: usize, rng: &mut Rng) -> Self {
        let right = rng.gen_bool(0.5);
        Self {
            cx: if right { w as f32 - 0.5 } else { -0.5 },
            cy: h as f32 / 2.0 + rng.gen_range(-0.05..0.05) * h as f32,
            a: rng.gen_range(0.8..0.98) * w as f32,
            b: rng.gen_range(0.5..0.62) * h as f32,
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f32 - self.cx) / self.a;
        let dy = (y as f32 - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

fn place_box(
    breast: &BreastRegion,
    w: usize,
    h: usize,
    side: usize,
    kind: LesionKind,
    existing: &[LesionBox],
    rng: &mut Rng,
) -> LesionBox {
    let candidate = |rng: &mut Rng| {
        LesionBox::new(rng.gen_range(0..=w - side), rng.gen_range(0..=h - side), side, side, kind)
    };
    for _ in 0..2000 {
        let b = candidate(rng);
        let corners = [
            (b.x, b.y),
            (b.x + side - 1, b.y),
            (b.x, b.y + side - 1),
            (b.x + side - 1, b.y + side - 1),
        ];
        let inside = corners.iter().all(|&(x, y)| breast.contains(x, y));
        let disjoint = existing.iter().all(|e| {
            b.x + b.width <= e.x || e.x + e.width <= b.x || b.y + b.height <= e.y || e.y + e.height <= b.y
        });
        if inside && disjoint {
            return b;
        }
    }
    candidate(rng)
}

/// Uniform noise, three box-blur passes, standardized into the configured
/// tissue intensity range.
fn tissue_texture(w: usize, h: usize, bg: &BackgroundTexture, rng: &mut Rng) -> Array2<f32> {
    let mut field = Array2::from_shape_fn((h, w), |_| rng.gen::<f32>());
    let radius = bg.smoothing_scale.round() as usize;
    if radius > 0 {
        for _ in 0..3 {
            field = box_blur(&field, radius);
        }
    }
    let n = field.len() as f32;
    let mean = field.sum() / n;
    let std = (field.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt().max(1e-12);
    let mid = 0.5 * (bg.intensity.min + bg.intensity.max);
    let half = 0.5 * (bg.intensity.max - bg.intensity.min);
    field.mapv(|v| (mid + half * ((v - mean) / std) / 2.5).clamp(bg.intensity.min, bg.intensity.max))
}

/// Separable box blur with edge clamping.
pub fn box_blur(src: &Array2<f32>, radius: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                let xx = (x as isize + k).clamp(0, w as isize - 1) as usize;
                s += src[[y, xx]];
            }
            tmp[[y, x]] = s * norm;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in -r..=r {
                let yy = (y as isize + k).clamp(0, h as isize - 1) as usize;
                s += tmp[[yy, x]];
            }
            out[[y, x]] = s * norm;
        }
    }
    out
}
