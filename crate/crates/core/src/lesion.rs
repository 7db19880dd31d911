//! Lesion-channel post-processing and synthetic corpus construction.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusWriter, ManifestRecord};
use crate::error::{Error, Result};
use crate::gan::{generate_triplet, Generator, GanTask, NoiseDraw, TripletPatch};
use crate::patch::{sample_normal_patch, ImagePatch, SamplerConfig};
use crate::phantom::FullImage;
use crate::seed::{self, Rng};
use crate::types::{LabelClass, LesionBox, LesionKind, Provenance, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    /// Positive: keep `lesion > threshold`. Negative: keep `lesion < threshold`.
    pub threshold: f32,
    pub min_area_fraction: f64,
    pub dilation_radius: usize,
    /// Gaussian kernel radius; sigma is a third of it.
    pub feather_radius: usize,
    pub connectivity: Connectivity,
    pub max_regen_attempts: usize,
    /// Frame (px) on which the soft mask is forced to zero.
    pub border: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            min_area_fraction: 0.10,
            dilation_radius: 5,
            feather_radius: 10,
            connectivity: Connectivity::Eight,
            max_regen_attempts: 50,
            border: 10,
        }
    }
}

impl PostprocessConfig {
    pub fn removal() -> Self {
        Self {
            threshold: -0.1,
            ..Self::default()
        }
    }

    pub fn for_task(task: GanTask) -> Self {
        match task {
            GanTask::Removal => Self::removal(),
            _ => Self::default(),
        }
    }

    /// Radii and border rescaled from 256px patches to `size`.
    pub fn scaled_to(mut self, size: usize) -> Self {
        let s = |v: usize| ((v * size) as f64 / 256.0).round().max(1.0) as usize;
        self.dilation_radius = s(self.dilation_radius);
        self.feather_radius = s(self.feather_radius);
        self.border = self.border * size / 256;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction < 1.0) {
            return Err(Error::validation("min_area_fraction", "must lie in (0, 1)"));
        }
        if self.dilation_radius == 0 || self.feather_radius == 0 {
            return Err(Error::validation("dilation_radius", "radii must be positive"));
        }
        if self.threshold == 0.0 || !self.threshold.is_finite() {
            return Err(Error::validation("threshold", "must be a nonzero finite value"));
        }
        if self.max_regen_attempts == 0 {
            return Err(Error::validation("max_regen_attempts", "must be positive"));
        }
        Ok(())
    }
}

/// Component labels (0 = background, components numbered from 1 in scan
/// order) and the pixel count of each component (index 0 unused).
pub fn label_components(mask: &Array2<bool>, connectivity: Connectivity) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut areas = vec![0];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            let id = areas.len() as u32;
            let mut area = 0;
            labels[[y, x]] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                area += 1;
                for &(dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                        labels[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
            areas.push(area);
        }
    }
    (labels, areas)
}

/// The largest component (earliest in scan order on ties), or `None` when empty.
pub fn largest_component(mask: &Array2<bool>, connectivity: Connectivity) -> Option<Array2<bool>> {
    let (labels, areas) = label_components(mask, connectivity);
    let mut best = 0;
    for (id, &a) in areas.iter().enumerate().skip(1) {
        if a > areas[best] {
            best = id;
        }
    }
    (best > 0).then(|| labels.mapv(|l| l == best as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    Empty,
    TooSmall { area: usize },
}

/// Thresholds the lesion channel, keeps the largest component and applies
/// the area gate.
pub fn extract_lesion_mask(lesion: &Array2<f32>, cfg: &PostprocessConfig) -> std::result::Result<Array2<bool>, Rejection> {
    let t = cfg.threshold;
    let binary = if t > 0.0 {
        lesion.mapv(|v| v > t)
    } else {
        lesion.mapv(|v| v < t)
    };
    let mask = largest_component(&binary, cfg.connectivity).ok_or(Rejection::Empty)?;
    let area = mask.iter().filter(|&&b| b).count();
    if (area as f64) < cfg.min_area_fraction * mask.len() as f64 {
        return Err(Rejection::TooSmall { area });
    }
    Ok(mask)
}

/// Offsets of the pixels within a Euclidean disk of `radius`.
pub fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dy, dx));
            }
        }
    }
    v
}

pub fn dilate_disk(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let disk = disk_offsets(radius);
    let mut out = Array2::from_elem((h, w), false);
    for ((y, x), &on) in mask.indexed_iter() {
        if !on {
            continue;
        }
        for &(dy, dx) in &disk {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                out[[ny as usize, nx as usize]] = true;
            }
        }
    }
    out
}

/// Sampled Gaussian with `sigma = radius / 3`, truncated at `radius` and normalized.
pub fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let sigma = radius as f64 / 3.0;
    let k: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; pixels outside the grid count as 0.
pub fn gaussian_blur(a: &Array2<f32>, radius: usize) -> Array2<f32> {
    let k = gaussian_kernel(radius);
    let r = radius as i64;
    let (h, w) = a.dim();
    let pass = |src: &Array2<f64>, horizontal: bool| {
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as i64 - r;
                    let (sy, sx) = if horizontal { (y as i64, x as i64 + o) } else { (y as i64 + o, x as i64) };
                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                        acc += kv * src[[sy as usize, sx as usize]];
                    }
                }
                out[[y, x]] = acc;
            }
        }
        out
    };
    let tmp = pass(&a.mapv(f64::from), true);
    pass(&tmp, false).mapv(|v| v.clamp(0.0, 1.0) as f32)
}

/// Dilation followed by Gaussian feathering; zero on the `border` frame.
pub fn refine_mask(mask: &Array2<bool>, cfg: &PostprocessConfig) -> Array2<f32> {
    let dilated = dilate_disk(mask, cfg.dilation_radius);
    let mut soft = gaussian_blur(&dilated.mapv(|b| if b { 1.0 } else { 0.0 }), cfg.feather_radius);
    let (h, w) = soft.dim();
    let b = cfg.border;
    for ((y, x), v) in soft.indexed_iter_mut() {
        if y < b || x < b || y + b >= h || x + b >= w {
            *v = 0.0;
        }
    }
    soft
}

/// Replaces the lesion by `soft * lesion` and recomputes the combined channel.
pub fn compose(triplet: &TripletPatch, soft: &Array2<f32>) -> TripletPatch {
    let lesion = &triplet.lesion * soft;
    let mut combined = triplet.base.clone();
    Zip::from(&mut combined)
        .and(&lesion)
        .for_each(|c, &l| *c = (*c + l).clamp(-1.0, 1.0));
    TripletPatch {
        lesion,
        base: triplet.base.clone(),
        combined,
    }
}

/// Result of a successful synthesis or removal.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub patch: ImagePatch,
    pub mask: Array2<bool>,
    pub soft_mask: Array2<f32>,
    /// The raw generator triplet before masking.
    pub triplet: TripletPatch,
    pub attempts: usize,
}

impl Synthesized {
    /// Bounding box of the hard mask.
    pub fn mask_box(&self, kind: LesionKind) -> Option<LesionBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), &on) in self.mask.indexed_iter() {
            if on {
                let b = bounds.get_or_insert((x, y, x, y));
                *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
        bounds.map(|(x0, y0, x1, y1)| LesionBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1, kind))
    }
}

/// (raw triplet, hard mask, soft mask, composed triplet)
type Accepted = (TripletPatch, Array2<bool>, Array2<f32>, TripletPatch);

fn attempt(
    g: &Generator,
    base: &ImagePatch,
    cfg: &PostprocessConfig,
    rng: &mut Rng,
) -> Result<std::result::Result<Accepted, Rejection>> {
    let noise = NoiseDraw::draw(g.blocks(), rng);
    let triplet = generate_triplet(g, base, &noise)?;
    Ok(match extract_lesion_mask(&triplet.lesion, cfg) {
        Ok(mask) => {
            let soft = refine_mask(&mask, cfg);
            let composed = compose(&triplet, &soft);
            Ok((triplet, mask, soft, composed))
        }
        Err(r) => Err(r),
    })
}

/// Samples a normal image and a tissue window, runs the generator, and
/// pastes the post-processed lesion. Each rejection redraws image, window
/// and noise.
pub fn synthesize_patch(
    g: &Generator,
    normals: &[FullImage],
    sampler: &SamplerConfig,
    cfg: &PostprocessConfig,
    label: LabelClass,
    rng: &mut Rng,
) -> Result<Synthesized> {
    cfg.validate()?;
    if normals.is_empty() {
        return Err(Error::validation("normal_source", "no normal images"));
    }
    let sampler = SamplerConfig {
        patch_size: g.active_resolution,
        ..sampler.clone()
    };
    let mut rejected = 0;
    for n in 1..=cfg.max_regen_attempts {
        let image = &normals[rng.gen_range(0..normals.len())];
        let base = sample_normal_patch(image, &sampler, rng)?;
        match attempt(g, &base, cfg, rng)? {
            Ok((triplet, mask, soft_mask, composed)) => {
                let patch = ImagePatch {
                    pixels: composed.combined,
                    label_class: label,
                    provenance: Provenance::Synthetic,
                    source_id: base.source_id,
                    origin: base.origin,
                };
                return Ok(Synthesized { patch, mask, soft_mask, triplet, attempts: n });
            }
            Err(_) => rejected += 1,
        }
    }
    Err(Error::SynthesisFailure {
        attempts: cfg.max_regen_attempts,
        rejected,
    })
}

/// Adds a masked negative lesion to a positive patch. Rejections redraw the noise.
pub fn remove_lesion_patch(
    g: &Generator,
    input: &ImagePatch,
    cfg: &PostprocessConfig,
    rng: &mut Rng,
) -> Result<Synthesized> {
    cfg.validate()?;
    if cfg.threshold >= 0.0 {
        return Err(Error::validation("threshold", "removal needs a negative threshold"));
    }
    let mut rejected = 0;
    for n in 1..=cfg.max_regen_attempts {
        match attempt(g, input, cfg, rng)? {
            Ok((triplet, mask, soft_mask, composed)) => {
                let patch = ImagePatch {
                    pixels: composed.combined,
                    label_class: LabelClass::Normal,
                    provenance: Provenance::Synthetic,
                    source_id: input.source_id.clone(),
                    origin: input.origin,
                };
                return Ok(Synthesized { patch, mask, soft_mask, triplet, attempts: n });
            }
            Err(_) => rejected += 1,
        }
    }
    Err(Error::SynthesisFailure {
        attempts: cfg.max_regen_attempts,
        rejected,
    })
}

/// Counts of synthetic examples per generated class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynthesisCounts {
    pub mass: usize,
    pub calc: usize,
    pub normal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisPlan {
    pub counts: SynthesisCounts,
    pub sampler: SamplerConfig,
    pub mass: PostprocessConfig,
    pub calc: PostprocessConfig,
    pub removal: PostprocessConfig,
    /// Full resample rounds per example before giving up.
    pub max_failures_per_example: usize,
    pub seed: u64,
}

impl Default for SynthesisPlan {
    fn default() -> Self {
        Self {
            counts: SynthesisCounts { mass: 5000, calc: 5000, normal: 5000 },
            sampler: SamplerConfig::default(),
            mass: PostprocessConfig::default(),
            calc: PostprocessConfig::default(),
            removal: PostprocessConfig::removal(),
            max_failures_per_example: 20,
            seed: 0,
        }
    }
}

/// A loaded generator with the hash of its checkpoint file.
pub struct SynthesisModel {
    pub generator: Generator,
    pub checkpoint_hash: String,
}

impl SynthesisModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            generator: crate::gan::load_generator(path)?,
            checkpoint_hash: crate::corpus::sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub produced: usize,
    pub generator_calls: usize,
    pub failures: usize,
}

impl SynthesisStats {
    /// Fraction of generator calls whose mask was rejected.
    pub fn failure_rate(&self) -> f64 {
        if self.generator_calls == 0 {
            0.0
        } else {
            (self.generator_calls - self.produced) as f64 / self.generator_calls as f64
        }
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub stats: BTreeMap<String, SynthesisStats>,
}

/// Writes a synthetic training corpus. Classes with a nonzero count need
/// the matching model and inputs.
pub fn build_synthetic_corpus(
    plan: &SynthesisPlan,
    mass: Option<&SynthesisModel>,
    calc: Option<&SynthesisModel>,
    removal: Option<&SynthesisModel>,
    normals: &[FullImage],
    positives: &[ImagePatch],
    out: impl AsRef<Path>,
) -> Result<SyntheticCorpus> {
    let mut writer = CorpusWriter::create(out)?;
    let mut stats = BTreeMap::new();
    let jobs = [
        ("mass", LabelClass::MalignantMass, plan.counts.mass, mass, &plan.mass),
        ("calc", LabelClass::MalignantCalc, plan.counts.calc, calc, &plan.calc),
        ("normal", LabelClass::Normal, plan.counts.normal, removal, &plan.removal),
    ];
    for (name, class, count, model, cfg) in jobs {
        let mut st = SynthesisStats { produced: 0, generator_calls: 0, failures: 0 };
        if count > 0 {
            let model = model.ok_or_else(|| Error::validation(name, "a generator checkpoint is required"))?;
            if class == LabelClass::Normal && positives.is_empty() {
                return Err(Error::validation("positives", "removal needs malignant input patches"));
            }
            let kind = match class {
                LabelClass::MalignantCalc => LesionKind::Calcification,
                _ => LesionKind::Mass,
            };
            for index in 0..count {
                let (out, eseed) = synthesize_one(plan, model, class, cfg, normals, positives, index, &mut st)?;
                let record = ManifestRecord {
                    id: format!("syn-{class}-{index:06}"),
                    class,
                    split: Split::Train,
                    boxes: out.mask_box(kind).filter(|_| class != LabelClass::Normal).into_iter().collect(),
                    seed: eseed,
                    provenance: Provenance::Synthetic,
                    tissue_floor: None,
                    source: Some(out.patch.source_id.clone()),
                    origin: Some([out.patch.origin.0, out.patch.origin.1]),
                    generator: Some(model.checkpoint_hash.clone()),
                };
                writer.add(record, &out.patch.to_raw())?;
                st.produced += 1;
            }
            log::info!("synthesized {count} {name} patches, mask failure rate {:.3}", st.failure_rate());
        }
        stats.insert(name.to_string(), st);
    }
    Ok(SyntheticCorpus {
        corpus: writer.finish()?,
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn synthesize_one(
    plan: &SynthesisPlan,
    model: &SynthesisModel,
    class: LabelClass,
    cfg: &PostprocessConfig,
    normals: &[FullImage],
    positives: &[ImagePatch],
    index: usize,
    st: &mut SynthesisStats,
) -> Result<(Synthesized, u64)> {
    for round in 0..plan.max_failures_per_example.max(1) {
        let eseed = seed::mix(plan.seed, &[seed::tag("synthetic"), class.ordinal(), index as u64, round as u64]);
        let mut rng = seed::rng(eseed);
        let res = if class == LabelClass::Normal {
            let input = &positives[rng.gen_range(0..positives.len())];
            remove_lesion_patch(&model.generator, input, cfg, &mut rng)
        } else {
            synthesize_patch(&model.generator, normals, &plan.sampler, cfg, class, &mut rng)
        };
        match res {
            Ok(s) => {
                st.generator_calls += s.attempts;
                return Ok((s, eseed));
            }
            Err(Error::SynthesisFailure { attempts, .. }) => {
                st.generator_calls += attempts;
                st.failures += 1;
                log::warn!("{class} example {index}: synthesis failed in round {round}, resampling");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::SynthesisFailure {
        attempts: plan.max_failures_per_example * cfg.max_regen_attempts,
        rejected: plan.max_failures_per_example * cfg.max_regen_attempts,
    })
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Writes a grayscale strip: one row per example with base, lesion channel
/// (mid-grey is zero) and combined patch side by side.
pub fn render_strip(rows: &[TripletPatch], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::validation("rows", "nothing to render"));
    }
    let n = rows[0].base.nrows();
    let gap = 2;
    let width = 3 * n + 2 * gap;
    let height = rows.len() * n + (rows.len() - 1) * gap;
    let mut img = image::GrayImage::from_pixel(width as u32, height as u32, image::Luma([255]));
    for (r, t) in rows.iter().enumerate() {
        for (c, a) in [&t.base, &t.lesion, &t.combined].into_iter().enumerate() {
            for ((y, x), &v) in a.indexed_iter() {
                let px = (c * (n + gap) + x) as u32;
                let py = (r * (n + gap) + y) as u32;
                img.put_pixel(px, py, image::Luma([to_u8(v)]));
            }
        }
    }
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}
