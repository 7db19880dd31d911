//! Patch extraction and augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusWriter, ManifestRecord};
use crate::error::{Error, Result};
use crate::phantom::{tissue_mask, FullImage};
use crate::seed::{self, Rng};
use crate::types::{LabelClass, Provenance, Split};

pub const DEFAULT_PATCH_SIZE: usize = 256;

/// A square intensity window in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub pixels: Array2<f32>,
    pub label_class: LabelClass,
    pub provenance: Provenance,
    pub source_id: String,
    pub origin: (usize, usize),
}

impl ImagePatch {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.pixels.dim() != (size, size) {
            return Err(Error::Shape {
                expected: format!("{size}x{size}"),
                actual: format!("{:?}", self.pixels.dim()),
            });
        }
        if let Some(v) = self.pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::validation("pixels", format!("value {v} outside [-1, 1]")));
        }
        Ok(())
    }

    /// Raw 16-bit encoding used on disk.
    pub fn to_raw(&self) -> Array2<u16> {
        denormalize_intensity(&self.pixels)
    }

    pub fn load(corpus: &Corpus, record: &ManifestRecord) -> Result<Self> {
        let raw = corpus.load_raw(record)?;
        let n = raw.nrows();
        Ok(Self {
            pixels: normalize_intensity(&raw, n)?,
            label_class: record.class,
            provenance: record.provenance,
            source_id: record.id.clone(),
            origin: record.origin.map(|[x, y]| (x, y)).unwrap_or((0, 0)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub tissue_fraction_min: f64,
    pub max_offset: usize,
    pub scale_range: [f32; 2],
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            tissue_fraction_min: 0.9,
            max_offset: 128,
            scale_range: [0.8, 1.2],
            max_retries: 200,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::validation("patch_size", "must be at least 2"));
        }
        if !(self.tissue_fraction_min > 0.0 && self.tissue_fraction_min <= 1.0) {
            return Err(Error::validation("tissue_fraction_min", "must lie in (0, 1]"));
        }
        if self.max_offset > 128 || self.max_offset > self.patch_size / 2 {
            return Err(Error::validation(
                "max_offset",
                "must be at most 128 and at most half the patch size",
            ));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::validation("scale_range", "must be a nonempty positive interval"));
        }
        if self.max_retries == 0 {
            return Err(Error::validation("max_retries", "must be positive"));
        }
        Ok(())
    }
}

/// Summed-area table for O(1) tissue counts over any window.
struct TissueIntegral {
    sums: Array2<u32>,
}

impl TissueIntegral {
    fn new(mask: &Array2<bool>) -> Self {
        let (h, w) = mask.dim();
        let mut sums = Array2::<u32>::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask[[y, x]] as u32;
                sums[[y + 1, x + 1]] = sums[[y, x + 1]] + row;
            }
        }
        Self { sums }
    }

    fn fraction(&self, x: usize, y: usize, size: usize) -> f64 {
        let s = &self.sums;
        let total = s[[y + size, x + size]] + s[[y, x]] - s[[y, x + size]] - s[[y + size, x]];
        total as f64 / (size * size) as f64
    }
}

fn check_fits(image: &FullImage, size: usize) -> Result<()> {
    if image.width() < size || image.height() < size {
        return Err(Error::NoValidPatch {
            image_id: image.id.clone(),
            attempts: 0,
        });
    }
    Ok(())
}

fn cut(image: &FullImage, x: usize, y: usize, size: usize) -> Result<Array2<f32>> {
    let raw = image.pixels.slice(s![y..y + size, x..x + size]).to_owned();
    normalize_intensity(&raw, size)
}

/// Rejection-samples a window whose tissue fraction meets the threshold.
///
/// If `max_retries` draws are all rejected, the accepted set is enumerated
/// exhaustively and one window is drawn uniformly from it; the error is
/// returned only when that set is empty.
pub fn sample_normal_patch(image: &FullImage, cfg: &SamplerConfig, rng: &mut Rng) -> Result<ImagePatch> {
    let size = cfg.patch_size;
    check_fits(image, size)?;
    let integral = TissueIntegral::new(&tissue_mask(&image.pixels, image.tissue_threshold()));
    let (max_x, max_y) = (image.width() - size, image.height() - size);
    let accept = |x, y| integral.fraction(x, y, size) >= cfg.tissue_fraction_min;

    let mut origin = None;
    for _ in 0..cfg.max_retries {
        let (x, y) = (rng.gen_range(0..=max_x), rng.gen_range(0..=max_y));
        if accept(x, y) {
            origin = Some((x, y));
            break;
        }
    }
    let (x, y) = match origin {
        Some(o) => o,
        None => {
            let valid: Vec<(usize, usize)> = (0..=max_y)
                .flat_map(|y| (0..=max_x).map(move |x| (x, y)))
                .filter(|&(x, y)| accept(x, y))
                .collect();
            *valid.choose(rng).ok_or_else(|| Error::NoValidPatch {
                image_id: image.id.clone(),
                attempts: cfg.max_retries,
            })?
        }
    };
    Ok(ImagePatch {
        pixels: cut(image, x, y, size)?,
        label_class: image.label_class,
        provenance: Provenance::Real,
        source_id: image.id.clone(),
        origin: (x, y),
    })
}

/// Window origin along one axis for lesion pixel `p` and signed offset `d`:
/// the window is centred on `p + d`, shifted so `p` stays inside, then
/// clamped to the image.
pub fn lesion_window_origin(p: usize, d: i64, size: usize, extent: usize) -> usize {
    let centre = p as i64 + d;
    let mut o = centre - (size / 2) as i64;
    o = o.clamp(p as i64 - (size as i64 - 1), p as i64);
    o.clamp(0, (extent - size) as i64) as usize
}

/// Draws a lesion pixel and a random offset, returning the lesion pixel too.
pub fn sample_lesion_patch_with_pixel(
    image: &FullImage,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(ImagePatch, (usize, usize))> {
    let size = cfg.patch_size;
    if image.annotations.is_empty() {
        return Err(Error::NoAnnotations(image.id.clone()));
    }
    check_fits(image, size)?;
    let integral = TissueIntegral::new(&tissue_mask(&image.pixels, image.tissue_threshold()));
    let off = cfg.max_offset as i64;
    let mut last = None;
    for _ in 0..cfg.max_retries {
        let b = image.annotations[rng.gen_range(0..image.annotations.len())];
        let px = rng.gen_range(b.x..b.x + b.width);
        let py = rng.gen_range(b.y..b.y + b.height);
        let dx = rng.gen_range(-off..=off);
        let dy = rng.gen_range(-off..=off);
        let x = lesion_window_origin(px, dx, size, image.width());
        let y = lesion_window_origin(py, dy, size, image.height());
        last = Some(((x, y), (px, py)));
        if integral.fraction(x, y, size) >= cfg.tissue_fraction_min {
            break;
        }
    }
    // lesion containment wins over the tissue rule once retries run out
    let ((x, y), pixel) = last.expect("max_retries > 0");
    let patch = ImagePatch {
        pixels: cut(image, x, y, size)?,
        label_class: image.label_class,
        provenance: Provenance::Real,
        source_id: image.id.clone(),
        origin: (x, y),
    };
    Ok((patch, pixel))
}

pub fn sample_lesion_patch(image: &FullImage, cfg: &SamplerConfig, rng: &mut Rng) -> Result<ImagePatch> {
    sample_lesion_patch_with_pixel(image, cfg, rng).map(|(p, _)| p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: u8,
    pub scale: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip: false,
        quarter_turns: 0,
        scale: 1.0,
    };

    pub fn draw(cfg: &SamplerConfig, rng: &mut Rng) -> Self {
        let [lo, hi] = cfg.scale_range;
        Self {
            flip: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
            scale: if lo == hi { lo } else { rng.gen_range(lo..=hi) },
        }
    }
}

pub fn augment_patch(patch: &ImagePatch, cfg: &SamplerConfig, rng: &mut Rng) -> ImagePatch {
    apply_augmentation(patch, Augmentation::draw(cfg, rng))
}

/// Horizontal flip, then counter-clockwise quarter turns, then scaling about
/// the centre with bilinear resampling (edge pixels replicate when shrinking).
pub fn apply_augmentation(patch: &ImagePatch, aug: Augmentation) -> ImagePatch {
    let mut px = patch.pixels.clone();
    if aug.flip {
        px = flip_horizontal(&px);
    }
    for _ in 0..aug.quarter_turns % 4 {
        px = rotate90(&px);
    }
    if aug.scale != 1.0 {
        px = rescale_centered(&px, aug.scale);
    }
    ImagePatch {
        pixels: px,
        ..patch.clone()
    }
}

pub fn flip_horizontal(a: &Array2<f32>) -> Array2<f32> {
    a.slice(s![.., ..;-1]).to_owned()
}

/// Counter-clockwise rotation by 90 degrees.
pub fn rotate90(a: &Array2<f32>) -> Array2<f32> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((w, h), |(y, x)| a[[x, w - 1 - y]])
}

pub fn rescale_centered(a: &Array2<f32>, scale: f32) -> Array2<f32> {
    let (h, w) = a.dim();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = ((y as f32 - cy) / scale + cy).clamp(0.0, h as f32 - 1.0);
        let sx = ((x as f32 - cx) / scale + cx).clamp(0.0, w as f32 - 1.0);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
        let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
        let bottom = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0)
    })
}

/// Affine map of [0, 65535] onto [-1, 1], clipped.
pub fn normalize_intensity(raw: &Array2<u16>, size: usize) -> Result<Array2<f32>> {
    if raw.dim() != (size, size) {
        return Err(Error::Shape {
            expected: format!("{size}x{size}"),
            actual: format!("{}x{}", raw.ncols(), raw.nrows()),
        });
    }
    Ok(raw.mapv(|v| (v as f32 / 65535.0 * 2.0 - 1.0).clamp(-1.0, 1.0)))
}

pub fn denormalize_intensity(px: &Array2<f32>) -> Array2<u16> {
    px.mapv(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16)
}

/// Patch counts for one extraction run, by split and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub counts: BTreeMap<Split, BTreeMap<LabelClass, usize>>,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl PatchPlan {
    /// Counts mirroring the full-scale dataset (train/val/test).
    pub fn full_scale() -> Self {
        use LabelClass::*;
        let train = BTreeMap::from([(Normal, 400_000), (MalignantMass, 42_280), (Benign, 10_080), (MalignantCalc, 24_100)]);
        let eval = BTreeMap::from([(Normal, 1_000), (MalignantMass, 1_000), (MalignantCalc, 1_000)]);
        Self {
            sampler: SamplerConfig::default(),
            counts: BTreeMap::from([(Split::Train, train), (Split::Val, eval.clone()), (Split::Test, eval)]),
            augment: true,
            seed: 0,
        }
    }
}

/// Extracts patches from a full-image corpus into a new corpus.
pub fn build_patch_corpus(source: &Corpus, plan: &PatchPlan, out: impl AsRef<Path>) -> Result<Corpus> {
    plan.sampler.validate()?;
    let mut writer = CorpusWriter::create(out)?;
    for (&split, per_class) in &plan.counts {
        for (&class, &count) in per_class {
            if count == 0 {
                continue;
            }
            let pool: Vec<&ManifestRecord> = source
                .filter(Some(split), Some(class))
                .filter(|r| class == LabelClass::Normal || !r.boxes.is_empty())
                .collect();
            if pool.is_empty() {
                return Err(Error::validation(
                    "counts",
                    format!("no source images of class {class} in split {split}"),
                ));
            }
            let mut cache: BTreeMap<usize, FullImage> = BTreeMap::new();
            for index in 0..count {
                let pseed = seed::mix(plan.seed, &[split as u64, class.ordinal(), index as u64]);
                let mut rng = seed::rng(pseed);
                let pick = rng.gen_range(0..pool.len());
                if !cache.contains_key(&pick) {
                    if cache.len() > 64 {
                        cache.clear();
                    }
                    cache.insert(pick, FullImage::load(source, pool[pick])?);
                }
                let image = &cache[&pick];
                let mut patch = if class == LabelClass::Normal {
                    sample_normal_patch(image, &plan.sampler, &mut rng)?
                } else {
                    sample_lesion_patch(image, &plan.sampler, &mut rng)?
                };
                if plan.augment {
                    patch = augment_patch(&patch, &plan.sampler, &mut rng);
                }
                let record = ManifestRecord {
                    id: format!("{split}-{class}-{index:06}"),
                    class,
                    split,
                    boxes: vec![],
                    seed: pseed,
                    provenance: Provenance::Real,
                    tissue_floor: image.tissue_floor,
                    source: Some(image.id.clone()),
                    origin: Some([patch.origin.0, patch.origin.1]),
                    generator: None,
                };
                writer.add(record, &patch.to_raw())?;
            }
        }
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LesionBox, LesionKind};

    fn image(pixels: Array2<u16>, boxes: Vec<LesionBox>) -> FullImage {
        FullImage {
            id: "img".into(),
            pixels,
            annotations: boxes,
            label_class: LabelClass::MalignantMass,
            split: Split::Train,
            seed: 0,
            tissue_floor: Some(0),
        }
    }

    fn cfg(size: usize) -> SamplerConfig {
        SamplerConfig {
            patch_size: size,
            max_offset: size / 2,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn all_tissue_accepts_first_draw_and_all_background_fails() {
        let mut rng = seed::rng(1);
        let tissue = image(Array2::from_elem((64, 64), 30_000), vec![]);
        let p = sample_normal_patch(&tissue, &cfg(32), &mut rng).unwrap();
        assert_eq!(p.pixels.dim(), (32, 32));
        let bg = image(Array2::zeros((64, 64)), vec![]);
        assert!(matches!(
            sample_normal_patch(&bg, &cfg(32), &mut rng),
            Err(Error::NoValidPatch { .. })
        ));
    }

    #[test]
    fn single_tissue_window_is_found() {
        // oracle: exhaustive scan finds exactly one fully-tissue window
        let mut px = Array2::<u16>::zeros((80, 90));
        px.slice_mut(s![37..69, 21..53]).fill(20_000);
        let img = image(px, vec![]);
        let c = SamplerConfig {
            tissue_fraction_min: 1.0,
            max_retries: 5,
            ..cfg(32)
        };
        let integral = TissueIntegral::new(&tissue_mask(&img.pixels, img.tissue_threshold()));
        let valid: Vec<_> = (0..=80 - 32)
            .flat_map(|y| (0..=90 - 32).map(move |x| (x, y)))
            .filter(|&(x, y)| integral.fraction(x, y, 32) >= 1.0)
            .collect();
        assert_eq!(valid, vec![(21, 37)]);
        for s in 0..10 {
            let p = sample_normal_patch(&img, &c, &mut seed::rng(s)).unwrap();
            assert_eq!(p.origin, (21, 37));
        }
    }

    #[test]
    fn lesion_window_geometry() {
        // zero offset: centred on the pixel
        assert_eq!(lesion_window_origin(300, 0, 256, 1000), 300 - 128);
        // +128 puts the pixel on the left/top border
        assert_eq!(lesion_window_origin(300, 128, 256, 1000), 300);
        // -128 puts it on the right/bottom border
        assert_eq!(lesion_window_origin(300, -128, 256, 1000), 300 - 255);
    }

    #[test]
    fn lesion_pixel_is_always_contained() {
        let px = Array2::from_elem((300, 300), 30_000u16);
        let img = image(px, vec![LesionBox::new(140, 10, 20, 30, LesionKind::Mass)]);
        let c = cfg(128);
        let mut rng = seed::rng(3);
        for _ in 0..10_000 {
            let (p, (lx, ly)) = sample_lesion_patch_with_pixel(&img, &c, &mut rng).unwrap();
            let (ox, oy) = p.origin;
            assert!(lx >= ox && lx < ox + 128 && ly >= oy && ly < oy + 128);
        }
        let none = image(Array2::from_elem((300, 300), 1u16), vec![]);
        assert!(matches!(
            sample_lesion_patch(&none, &c, &mut rng),
            Err(Error::NoAnnotations(_))
        ));
    }

    fn patch_of(px: Array2<f32>) -> ImagePatch {
        ImagePatch {
            pixels: px,
            label_class: LabelClass::Normal,
            provenance: Provenance::Real,
            source_id: "p".into(),
            origin: (0, 0),
        }
    }

    fn ramp(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, n), |(y, x)| ((y * n + x) as f32 / (n * n) as f32) * 2.0 - 1.0)
    }

    #[test]
    fn identity_and_involution() {
        let p = patch_of(ramp(16));
        assert_eq!(apply_augmentation(&p, Augmentation::IDENTITY), p);
        let half_turn = Augmentation {
            quarter_turns: 2,
            ..Augmentation::IDENTITY
        };
        let twice = apply_augmentation(&apply_augmentation(&p, half_turn), half_turn);
        assert_eq!(twice, p);
    }

    #[test]
    fn shrinking_keeps_centre_marker_near_centre() {
        let mut px = Array2::from_elem((256, 256), -1.0f32);
        px[[128, 128]] = 1.0;
        let out = apply_augmentation(
            &patch_of(px),
            Augmentation {
                scale: 0.8,
                ..Augmentation::IDENTITY
            },
        );
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for ((y, x), &v) in out.pixels.indexed_iter() {
            if v > best {
                best = v;
                at = (y, x);
            }
        }
        assert!((at.0 as f32 - 127.5).abs() <= 1.0 && (at.1 as f32 - 127.5).abs() <= 1.0);
        assert!(out.validate(256).is_ok());
    }

    #[test]
    fn normalize_examples() {
        let raw = Array2::from_shape_vec((2, 2), vec![0u16, 65535, 32767, 32768]).unwrap();
        let n = normalize_intensity(&raw, 2).unwrap();
        assert_eq!(n[[0, 0]], -1.0);
        assert_eq!(n[[0, 1]], 1.0);
        // 32767.5 is the exact midpoint of the affine map
        assert!(n[[1, 0]].abs() <= 1.0 / 65535.0 + 1e-7);
        assert!(n[[1, 1]].abs() <= 1.0 / 65535.0 + 1e-7);
        assert!(matches!(normalize_intensity(&raw, 3), Err(Error::Shape { .. })));
    }

    #[test]
    fn config_rejects_large_offsets() {
        let c = SamplerConfig {
            max_offset: 129,
            ..SamplerConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
