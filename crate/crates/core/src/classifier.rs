//! Binary malignancy patch classifier trained on a real/synthetic mix.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::corpus::{Corpus, ManifestRecord};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::nn::{Adam, AdamConfig, Checkpoint, Conv2d, GroupNorm, Init, LayerBuilder, Linear, ParamStore};
use crate::patch::ImagePatch;
use crate::seed::{self, Rng};
use crate::types::{LabelClass, Provenance, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "reference-residual-50")]
    ResNet50,
    #[serde(rename = "small-desk-cnn")]
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    /// Checkpoint whose tensors initialize any parameter with a matching name and shape.
    pub pretrained_init: Option<PathBuf>,
    /// Base width of the small network (penultimate width is 4x).
    pub width: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub total_samples: usize,
    pub initial_synthetic_proportion: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ResNet50,
            pretrained_init: None,
            width: 16,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 1,
            total_samples: 500_000,
            initial_synthetic_proportion: 0.0,
            decay_factor: 0.9,
            decay_interval: 5000,
            eval_interval: 5000,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    /// Small network, shorter schedule with proportionally shorter intervals.
    pub fn desk() -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            learning_rate: 1e-3,
            batch_size: 8,
            total_samples: 6000,
            decay_interval: 1000,
            eval_interval: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.initial_synthetic_proportion) {
            return Err(Error::validation("initial_synthetic_proportion", "must lie in [0, 1]"));
        }
        if self.decay_interval == 0 || self.eval_interval == 0 {
            return Err(Error::validation("eval_interval", "intervals must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) {
            return Err(Error::validation("decay_factor", "must lie in [0, 1]"));
        }
        if self.width == 0 {
            return Err(Error::validation("width", "must be positive"));
        }
        Ok(())
    }

    pub fn mix_probability(&self, step: usize) -> f64 {
        mix_probability(step, self.initial_synthetic_proportion, self.decay_factor, self.decay_interval)
    }
}

/// `p0 * factor^(step / interval)`, with integer division.
pub fn mix_probability(step: usize, p0: f64, factor: f64, interval: usize) -> f64 {
    let k = (step / interval.max(1)) as i32;
    p0 * factor.powi(k)
}

/// Labelled patches of one provenance, loaded on first use.
pub struct PatchPool {
    name: String,
    source: PoolSource,
    /// Positive indices grouped by malignant class.
    positives: BTreeMap<LabelClass, Vec<usize>>,
    negatives: Vec<usize>,
    cache: BTreeMap<usize, ImagePatch>,
    reads: Cell<usize>,
}

enum PoolSource {
    Corpus(Corpus, Vec<ManifestRecord>),
    Memory(Vec<ImagePatch>),
}

impl PatchPool {
    fn build(name: String, classes: Vec<LabelClass>, source: PoolSource) -> Self {
        let mut positives: BTreeMap<LabelClass, Vec<usize>> = BTreeMap::new();
        let mut negatives = Vec::new();
        for (i, c) in classes.into_iter().enumerate() {
            if c.is_malignant() {
                positives.entry(c).or_default().push(i);
            } else if c == LabelClass::Normal {
                negatives.push(i);
            }
        }
        Self {
            name,
            source,
            positives,
            negatives,
            cache: BTreeMap::new(),
            reads: Cell::new(0),
        }
    }

    /// Malignant and normal records of `split` (all splits when `None`).
    pub fn from_corpus(name: impl Into<String>, corpus: &Corpus, split: Option<Split>) -> Self {
        let records: Vec<ManifestRecord> = corpus.filter(split, None).cloned().collect();
        let classes = records.iter().map(|r| r.class).collect();
        Self::build(name.into(), classes, PoolSource::Corpus(corpus.clone(), records))
    }

    pub fn from_patches(name: impl Into<String>, patches: Vec<ImagePatch>) -> Self {
        let classes = patches.iter().map(|p| p.label_class).collect();
        Self::build(name.into(), classes, PoolSource::Memory(patches))
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self::from_patches(name, Vec::new())
    }

    /// Number of examples drawn so far.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.positives.values().map(Vec::len).sum(), self.negatives.len())
    }

    fn fetch(&mut self, idx: usize) -> Result<ImagePatch> {
        self.reads.set(self.reads.get() + 1);
        match &self.source {
            PoolSource::Memory(v) => Ok(v[idx].clone()),
            PoolSource::Corpus(corpus, records) => {
                if let Some(p) = self.cache.get(&idx) {
                    return Ok(p.clone());
                }
                let p = ImagePatch::load(corpus, &records[idx])?;
                self.cache.insert(idx, p.clone());
                Ok(p)
            }
        }
    }

    /// A positive (malignant class chosen uniformly first) or a negative example.
    pub fn draw(&mut self, positive: bool, provenance: Provenance, rng: &mut Rng) -> Result<ImagePatch> {
        let empty = || Error::EmptyCell {
            provenance: provenance.to_string(),
            polarity: if positive { "positive" } else { "negative" }.to_string(),
        };
        let idx = if positive {
            let classes: Vec<&Vec<usize>> = self.positives.values().filter(|v| !v.is_empty()).collect();
            if classes.is_empty() {
                return Err(empty());
            }
            let c = classes[rng.gen_range(0..classes.len())];
            c[rng.gen_range(0..c.len())]
        } else {
            if self.negatives.is_empty() {
                return Err(empty());
            }
            self.negatives[rng.gen_range(0..self.negatives.len())]
        };
        self.fetch(idx)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Draws polarity (1/2 each), then provenance (synthetic with probability `p`).
pub fn draw_training_example(
    real: &mut PatchPool,
    synthetic: &mut PatchPool,
    p: f64,
    rng: &mut Rng,
) -> Result<(ImagePatch, u8)> {
    let positive = rng.gen_bool(0.5);
    let u: f64 = rng.gen();
    let patch = if u < p {
        synthetic.draw(positive, Provenance::Synthetic, rng)?
    } else {
        real.draw(positive, Provenance::Real, rng)?
    };
    Ok((patch, positive as u8))
}

struct Block {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    conv3: Option<(Conv2d, GroupNorm)>,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.norm1.forward(&self.conv1.forward(x, true)).relu();
        h = self.norm2.forward(&self.conv2.forward(&h, true));
        if let Some((c, n)) = &self.conv3 {
            h = n.forward(&c.forward(&h.relu(), true));
        }
        let skip = match &self.shortcut {
            Some((c, n)) => n.forward(&c.forward(x, true)),
            None => x.shallow_clone(),
        };
        (h + skip).relu()
    }
}

pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    stem: (Conv2d, GroupNorm),
    stem_pool: bool,
    blocks: Vec<Block>,
    head: Linear,
    feature_width: usize,
}

const GROUPS: i64 = 8;

impl Classifier {
    pub fn new(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let init = Init::new(seed::mix(config.seed, &[seed::tag("classifier")]));
        let mut b = LayerBuilder::new(&mut params, init, false);
        b.gain = std::f64::consts::SQRT_2;
        let (stem, stem_pool, blocks, width) = match config.backbone {
            Backbone::SmallCnn => {
                let w = config.width as i64;
                let stem = (b.conv2d("stem", 3, w, 3, 1, 1), b.group_norm("stem.gn", GROUPS, w));
                let mut blocks = Vec::new();
                let mut c = w;
                for (i, (out, stride)) in [(w, 1), (2 * w, 2), (4 * w, 2), (4 * w, 2)].into_iter().enumerate() {
                    blocks.push(basic_block(&mut b, &format!("block{i}"), c, out, stride));
                    c = out;
                }
                (stem, false, blocks, c as usize)
            }
            Backbone::ResNet50 => {
                let stem = (b.conv2d("stem", 3, 64, 7, 2, 3), b.group_norm("stem.gn", 32, 64));
                let mut blocks = Vec::new();
                let mut c = 64;
                for (stage, (mid, n, stride)) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)].into_iter().enumerate() {
                    for i in 0..n {
                        let s = if i == 0 { stride } else { 1 };
                        blocks.push(bottleneck(&mut b, &format!("layer{}.{i}", stage + 1), c, mid, s));
                        c = mid * 4;
                    }
                }
                (stem, true, blocks, c as usize)
            }
        };
        b.gain = 1.0;
        let head = b.linear("head", width as i64, 1);
        let model = Self {
            config: config.clone(),
            params,
            stem,
            stem_pool,
            blocks,
            head,
            feature_width: width,
        };
        if let Some(path) = &config.pretrained_init {
            let ck = Checkpoint::load(path)?;
            let matching: BTreeMap<String, Tensor> = ck
                .tensors
                .into_iter()
                .filter(|(k, t)| model.params.get(k).is_some_and(|p| p.size() == t.size()))
                .collect();
            log::info!("initialized {} tensors from {}", matching.len(), path.display());
            model.params.copy_from(&matching);
        }
        Ok(model)
    }

    /// Penultimate-layer width.
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Pooled features `(N, F)` of a grayscale batch `(N, 1, H, W)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let size = x.size();
        if size.len() != 4 || size[1] != 1 {
            return Err(Error::Shape {
                expected: "(N, 1, H, W)".into(),
                actual: format!("{size:?}"),
            });
        }
        let x = x.expand([size[0], 3, size[2], size[3]], false);
        let mut h = self.stem.1.forward(&self.stem.0.forward(&x, true)).relu();
        if self.stem_pool {
            h = h.max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false);
        }
        for b in &self.blocks {
            h = b.forward(&h);
        }
        Ok(h.mean_dim([2i64, 3].as_slice(), false, Kind::Float))
    }

    /// Malignancy logits `(N,)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.features(x)?, true).view([-1]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "classifier", "config": self.config}));
        ck.extend("", self.params.iter());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|v| v.as_str()) != Some("classifier") {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let mut config: ClassifierConfig = serde_json::from_value(ck.meta["config"].clone())?;
        config.pretrained_init = None;
        let model = Self::new(&config)?;
        for name in model.params.names() {
            match ck.tensors.get(name) {
                Some(t) if t.size() == model.params.get(name).unwrap().size() => {}
                _ => return Err(Error::Checkpoint(format!("tensor `{name}` missing or misshapen"))),
            }
        }
        model.params.copy_from(&ck.tensors);
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn basic_block(b: &mut LayerBuilder<'_>, name: &str, cin: i64, cout: i64, stride: i64) -> Block {
    let shortcut = (stride != 1 || cin != cout).then(|| {
        (
            b.conv2d(&format!("{name}.down"), cin, cout, 1, stride, 0),
            b.group_norm(&format!("{name}.down.gn"), GROUPS, cout),
        )
    });
    Block {
        conv1: b.conv2d(&format!("{name}.conv1"), cin, cout, 3, stride, 1),
        norm1: b.group_norm(&format!("{name}.gn1"), GROUPS, cout),
        conv2: b.conv2d(&format!("{name}.conv2"), cout, cout, 3, 1, 1),
        norm2: b.group_norm(&format!("{name}.gn2"), GROUPS, cout),
        conv3: None,
        shortcut,
    }
}

fn bottleneck(b: &mut LayerBuilder<'_>, name: &str, cin: i64, mid: i64, stride: i64) -> Block {
    let cout = mid * 4;
    let shortcut = (stride != 1 || cin != cout).then(|| {
        (
            b.conv2d(&format!("{name}.down"), cin, cout, 1, stride, 0),
            b.group_norm(&format!("{name}.down.gn"), 32, cout),
        )
    });
    Block {
        conv1: b.conv2d(&format!("{name}.conv1"), cin, mid, 1, 1, 0),
        norm1: b.group_norm(&format!("{name}.gn1"), 32, mid),
        conv2: b.conv2d(&format!("{name}.conv2"), mid, mid, 3, stride, 1),
        norm2: b.group_norm(&format!("{name}.gn2"), 32, mid),
        conv3: Some((
            b.conv2d(&format!("{name}.conv3"), mid, cout, 1, 1, 0),
            b.group_norm(&format!("{name}.gn3"), 32, cout),
        )),
        shortcut,
    }
}

fn batch(patches: &[&ImagePatch]) -> Result<Tensor> {
    let n = patches[0].size();
    let mut data = Vec::with_capacity(patches.len() * n * n);
    for p in patches {
        if p.size() != n || p.pixels.ncols() != n {
            return Err(Error::Shape {
                expected: format!("{n}x{n}"),
                actual: format!("{:?}", p.pixels.dim()),
            });
        }
        data.extend(p.pixels.iter().copied());
    }
    Ok(Tensor::from_slice(&data).view([patches.len() as i64, 1, n as i64, n as i64]))
}

/// Malignancy probabilities in [0, 1].
pub fn predict_scores(model: &Classifier, patches: &[ImagePatch]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let refs: Vec<&ImagePatch> = chunk.iter().collect();
        let x = batch(&refs)?;
        let s = tch::no_grad(|| model.logits(&x))?.sigmoid().to_kind(Kind::Double);
        out.extend(Vec::<f64>::try_from(s)?);
    }
    Ok(out)
}

pub fn predict_score(model: &Classifier, patch: &ImagePatch) -> Result<f64> {
    Ok(predict_scores(model, std::slice::from_ref(patch))?[0])
}

/// Penultimate-layer feature vectors.
pub fn extract_features(model: &Classifier, patches: &[ImagePatch]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(64) {
        let refs: Vec<&ImagePatch> = chunk.iter().collect();
        let f = tch::no_grad(|| model.features(&batch(&refs)?))?;
        let w = model.feature_width();
        let flat: Vec<f32> = Vec::try_from(f.contiguous().view([-1]))?;
        out.extend(flat.chunks(w).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// 1 for malignant, 0 otherwise.
pub fn binary_label(class: LabelClass) -> u8 {
    class.is_malignant() as u8
}

pub fn validation_auc(model: &Classifier, val: &[ImagePatch]) -> Result<f64> {
    let scores = predict_scores(model, val)?;
    let labels: Vec<u8> = val.iter().map(|p| binary_label(p.label_class)).collect();
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub samples_seen: usize,
    pub p: f64,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Index of the best validation AUC; the earliest wins ties.
pub fn select_best(history: &[HistoryRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if best.map_or(true, |b| r.val_auc > history[b].val_auc) {
            best = Some(i);
        }
    }
    best
}

pub struct TrainedClassifier {
    /// Carries the selected (best validation) weights.
    pub model: Classifier,
    pub history: Vec<HistoryRecord>,
    pub best_index: usize,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Single-sample (or `batch_size`) training with periodic validation.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    real: &mut PatchPool,
    synthetic: &mut PatchPool,
    val: &[ImagePatch],
    out: Option<&Path>,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if let Some(p) = val.iter().find(|p| p.provenance != Provenance::Real) {
        return Err(Error::validation("val", format!("validation patch {} is not real", p.source_id)));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let model = Classifier::new(cfg)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        epsilon: 1e-8,
    });
    let mut rng = seed::derived_rng(cfg.seed, &[seed::tag("classifier-draws")]);
    let mut history = Vec::new();
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;
    let mut seen = 0;
    let mut loss_sum = 0.0;
    let mut loss_n = 0;
    let mut next_eval = cfg.eval_interval.min(cfg.total_samples);
    while seen < cfg.total_samples {
        let p = cfg.mix_probability(seen);
        let n = cfg.batch_size.min(cfg.total_samples - seen);
        let mut patches = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (patch, label) = draw_training_example(real, synthetic, p, &mut rng)?;
            patches.push(patch);
            labels.push(label as f32);
        }
        let refs: Vec<&ImagePatch> = patches.iter().collect();
        let x = batch(&refs)?;
        let y = Tensor::from_slice(&labels);
        model.params.zero_grad();
        let loss = model
            .logits(&x)?
            .binary_cross_entropy_with_logits::<Tensor>(&y, None, None, tch::Reduction::Mean);
        let value = loss.double_value(&[]);
        if !value.is_finite() {
            let diagnostic = match out {
                Some(dir) => {
                    let path = dir.join("diagnostic.ckpt");
                    model.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            return Err(Error::NonFinite {
                what: "classifier loss".into(),
                step: seen,
                diagnostic,
            });
        }
        loss.backward();
        adam.step(&model.params);
        seen += n;
        loss_sum += value * n as f64;
        loss_n += n;
        if seen >= next_eval {
            let val_auc = validation_auc(&model, val)?;
            history.push(HistoryRecord {
                samples_seen: seen,
                p,
                train_loss: loss_sum / loss_n.max(1) as f64,
                val_auc,
            });
            log::debug!("samples {seen}: p {p:.4} loss {:.4} val auc {val_auc:.4}", loss_sum / loss_n.max(1) as f64);
            if best.as_ref().map_or(true, |(b, _)| val_auc > *b) {
                best = Some((val_auc, model.params.snapshot()));
            }
            loss_sum = 0.0;
            loss_n = 0;
            next_eval = (next_eval + cfg.eval_interval).min(cfg.total_samples);
        }
    }
    let best_index = select_best(&history).ok_or_else(|| Error::validation("total_samples", "no evaluation ran"))?;
    let (_, weights) = best.expect("at least one evaluation");
    model.params.copy_from(&weights);
    if let Some(dir) = out {
        write_history(dir.join(HISTORY_FILE), &history)?;
        model.save(dir.join(BEST_CHECKPOINT))?;
    }
    Ok(TrainedClassifier {
        model,
        history,
        best_index,
    })
}
