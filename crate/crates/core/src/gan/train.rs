//! Semi-supervised adversarial training with progressive growing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::networks::{downsample, Discriminator, Generator};
use super::spec::{NetworkSpec, NoiseDraw};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, ParamStore};
use crate::patch::ImagePatch;
use crate::seed::{self, Rng};
use crate::types::{LabelClass, Split};

/// Discriminator output slots.
pub const CLASS_REAL: i64 = 0;
pub const CLASS_FAKE: i64 = 1;
pub const CLASS_BENIGN: i64 = 2;
pub const CLASS_NORMAL: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanTask {
    Mass,
    Calc,
    Removal,
}

impl GanTask {
    pub const ALL: [GanTask; 3] = [GanTask::Mass, GanTask::Calc, GanTask::Removal];

    pub fn as_str(self) -> &'static str {
        match self {
            GanTask::Mass => "mass",
            GanTask::Calc => "calc",
            GanTask::Removal => "removal",
        }
    }

    pub fn default_g_steps(self) -> usize {
        match self {
            GanTask::Mass => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for GanTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GanTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GanTask::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("task", format!("unknown task `{s}` (mass, calc, removal)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub task: GanTask,
    pub network: NetworkSpec,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub gp_lambda: f64,
    pub gp_k: f64,
    /// Scale of the uniform input perturbation, in per-example standard deviations.
    pub perturbation_scale: f64,
    pub aux_loss_scale: f64,
    pub g_steps_per_d: usize,
    pub fade_iterations: usize,
    pub stage_resolutions: Vec<usize>,
    pub batch_size: usize,
    /// Discriminator updates over the whole run, split evenly across stages.
    pub total_iterations: usize,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            task: GanTask::Mass,
            network: NetworkSpec::default(),
            learning_rate: 1e-5,
            adam_beta1: 0.0,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
            gp_lambda: 10.0,
            gp_k: 1.0,
            perturbation_scale: 0.5,
            aux_loss_scale: 0.2,
            g_steps_per_d: 2,
            fade_iterations: 3000,
            stage_resolutions: vec![128, 256],
            batch_size: 8,
            total_iterations: 200_000,
            checkpoint_every: 10_000,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn for_task(task: GanTask) -> Self {
        Self {
            task,
            g_steps_per_d: task.default_g_steps(),
            ..Self::default()
        }
    }

    /// 64px networks, two stages and a larger step size.
    pub fn desk(task: GanTask) -> Self {
        Self {
            network: NetworkSpec::desk(),
            learning_rate: 2e-4,
            fade_iterations: 100,
            stage_resolutions: vec![32, 64],
            batch_size: 8,
            total_iterations: 600,
            checkpoint_every: 0,
            ..Self::for_task(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        for (field, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("gp_lambda", self.gp_lambda),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::validation("adam_beta", "betas must lie in [0, 1)"));
        }
        if !(self.aux_loss_scale > 0.0 && self.aux_loss_scale <= 1.0) {
            return Err(Error::validation("aux_loss_scale", "must lie in (0, 1]"));
        }
        if self.gp_k < 0.0 || self.perturbation_scale < 0.0 {
            return Err(Error::validation("gp_k", "gp_k and perturbation_scale must be non-negative"));
        }
        if self.fade_iterations == 0 {
            return Err(Error::validation("fade_iterations", "must be at least 1"));
        }
        if self.g_steps_per_d == 0 || self.batch_size == 0 {
            return Err(Error::validation("g_steps_per_d", "step counts and batch size must be positive"));
        }
        let stages = &self.stage_resolutions;
        if stages.is_empty() || *stages.last().unwrap() != self.network.input_resolution {
            return Err(Error::validation(
                "stage_resolutions",
                "must be non-empty and end at the network input resolution",
            ));
        }
        if stages.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::validation("stage_resolutions", "each stage must double the previous one"));
        }
        if self.total_iterations < stages.len() {
            return Err(Error::validation("total_iterations", "need at least one iteration per stage"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn iterations_per_stage(&self) -> usize {
        self.total_iterations / self.stage_resolutions.len()
    }

    /// Stage index and fade state at a global iteration.
    pub fn growth_at(&self, iteration: usize) -> GrowthState {
        let per = self.iterations_per_stage();
        let stage = (iteration / per).min(self.stage_resolutions.len() - 1);
        let fade_iteration = iteration - stage * per;
        let alpha = if stage == 0 {
            1.0
        } else {
            fade_weight(fade_iteration, self.fade_iterations)
        };
        GrowthState {
            current_stage: stage,
            fade_iteration,
            alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthState {
    pub current_stage: usize,
    pub fade_iteration: usize,
    pub alpha: f64,
}

/// Linear fade-in weight of the newest resolution.
pub fn fade_weight(iteration: usize, fade_iterations: usize) -> f64 {
    (iteration as f64 / fade_iterations.max(1) as f64).clamp(0.0, 1.0)
}

fn check_logits(what: &str, t: &Tensor) -> Result<()> {
    let size = t.size();
    if size.len() != 2 || size[1] != 4 {
        return Err(Error::Shape {
            expected: format!("{what}: (N, 4) logits"),
            actual: format!("{size:?}"),
        });
    }
    Ok(())
}

/// Mean cross-entropy of a logit batch toward one class.
pub fn cross_entropy_toward(logits: &Tensor, class: i64) -> Tensor {
    -logits.log_softmax(1, logits.kind()).select(1, class).mean(logits.kind())
}

/// Four-way discriminator loss plus an already-weighted penalty term.
pub fn discriminator_loss(
    real: &Tensor,
    fake: &Tensor,
    benign: &Tensor,
    normal: &Tensor,
    penalty: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    for (what, t) in [("real", real), ("fake", fake), ("benign", benign), ("normal", normal)] {
        check_logits(what, t)?;
    }
    let aux = cross_entropy_toward(benign, CLASS_BENIGN) + cross_entropy_toward(normal, CLASS_NORMAL);
    Ok(cross_entropy_toward(real, CLASS_REAL) + cross_entropy_toward(fake, CLASS_FAKE) + aux * scale + penalty)
}

/// Non-saturating generator loss: fakes should be called real-malignant.
pub fn generator_loss(fake: &Tensor) -> Result<Tensor> {
    check_logits("fake", fake)?;
    Ok(cross_entropy_toward(fake, CLASS_REAL))
}

/// Anything producing `(N, 4)` logits from an image batch.
pub trait Critic {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Critic for Discriminator {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub k: f64,
    pub perturbation_scale: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            k: 1.0,
            perturbation_scale: 0.5,
        }
    }
}

/// Per-pixel U(0,1) noise times `scale` times each example's standard deviation.
pub fn perturbation(x: &Tensor, scale: f64, rng: &mut Rng) -> Tensor {
    let shape = x.size();
    let n = x.numel();
    let u: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
    let u = Tensor::from_slice(&u).view(shape.as_slice()).to_kind(x.kind());
    let dims: Vec<i64> = (1..shape.len() as i64).collect();
    let spread = x.detach().std_dim(dims.as_slice(), false, true);
    u * spread * scale
}

/// `lambda * mean((|grad_x D_real(x + delta)| - k)^2)`, differentiable in the
/// critic's parameters.
pub fn gradient_penalty<C: Critic + ?Sized>(
    critic: &C,
    x_real: &Tensor,
    rng: &mut Rng,
    cfg: PenaltyConfig,
) -> Result<Tensor> {
    let x = x_real.detach();
    let xp = (&x + perturbation(&x, cfg.perturbation_scale, rng)).set_requires_grad(true);
    let logits = critic.logits(&xp)?;
    check_logits("penalty", &logits)?;
    let out = logits.select(1, CLASS_REAL).sum(logits.kind());
    let grads = Tensor::run_backward(&[out], &[&xp], true, true);
    let g = grads[0].flatten(1, -1);
    let norm = (g.square().sum_dim_intlist(1, false, g.kind()) + 1e-12).sqrt();
    Ok((norm - cfg.k).square().mean(g.kind()) * cfg.lambda)
}

/// A source of image batches `(N, 1, res, res)`.
pub trait PatchStream {
    fn name(&self) -> &str;
    fn next_batch(&mut self, n: usize, res: usize, rng: &mut Rng) -> Result<Tensor>;
}

fn stack_patches(items: &[&Array2<f32>], res: usize) -> Tensor {
    let (h, w) = items[0].dim();
    let mut data = Vec::with_capacity(items.len() * h * w);
    for a in items {
        data.extend(a.iter().copied());
    }
    let full = Tensor::from_slice(&data).view([items.len() as i64, 1, h as i64, w as i64]);
    downsample(&full, res)
}

/// Samples patches uniformly with replacement, using the caller's rng.
#[derive(Debug, Clone)]
pub struct InMemoryStream {
    name: String,
    patches: Vec<Array2<f32>>,
}

impl InMemoryStream {
    pub fn new(name: impl Into<String>, patches: Vec<Array2<f32>>) -> Result<Self> {
        let name = name.into();
        if patches.is_empty() {
            return Err(Error::StreamExhausted(name));
        }
        Ok(Self { name, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

impl PatchStream for InMemoryStream {
    fn name(&self) -> &str {
        &self.name
    }

    fn next_batch(&mut self, n: usize, res: usize, rng: &mut Rng) -> Result<Tensor> {
        let picks: Vec<&Array2<f32>> = (0..n)
            .map(|_| &self.patches[rng.gen_range(0..self.patches.len())])
            .collect();
        Ok(stack_patches(&picks, res))
    }
}

/// Yields each patch once, in order, then fails.
#[derive(Debug, Clone)]
pub struct FiniteStream {
    name: String,
    patches: Vec<Array2<f32>>,
    cursor: usize,
}

impl FiniteStream {
    pub fn new(name: impl Into<String>, patches: Vec<Array2<f32>>) -> Self {
        Self {
            name: name.into(),
            patches,
            cursor: 0,
        }
    }
}

impl PatchStream for FiniteStream {
    fn name(&self) -> &str {
        &self.name
    }

    fn next_batch(&mut self, n: usize, res: usize, _rng: &mut Rng) -> Result<Tensor> {
        if n == 0 || self.cursor + n > self.patches.len() {
            return Err(Error::StreamExhausted(self.name.clone()));
        }
        let picks: Vec<&Array2<f32>> = self.patches[self.cursor..self.cursor + n].iter().collect();
        self.cursor += n;
        Ok(stack_patches(&picks, res))
    }
}

/// The four data streams of one model.
pub struct GanStreams {
    /// Targets labelled real (class 0).
    pub real: Box<dyn PatchStream>,
    /// Generator inputs.
    pub source: Box<dyn PatchStream>,
    /// Auxiliary class 2.
    pub benign: Box<dyn PatchStream>,
    /// Auxiliary class 3.
    pub normal: Box<dyn PatchStream>,
}

/// Classes feeding (real, source, class 2, class 3) for a task.
pub fn task_classes(task: GanTask) -> [LabelClass; 4] {
    use LabelClass::*;
    match task {
        GanTask::Mass => [MalignantMass, Normal, Benign, Normal],
        GanTask::Calc => [MalignantCalc, Normal, Benign, Normal],
        GanTask::Removal => [Normal, MalignantMass, Benign, MalignantMass],
    }
}

fn load_class(corpus: &Corpus, split: Split, class: LabelClass, task: GanTask) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::new();
    for r in corpus.filter(Some(split), Some(class)) {
        out.push(ImagePatch::load(corpus, r)?.pixels);
    }
    // removal learns from both malignant kinds
    if task == GanTask::Removal && class == LabelClass::MalignantMass {
        for r in corpus.filter(Some(split), Some(LabelClass::MalignantCalc)) {
            out.push(ImagePatch::load(corpus, r)?.pixels);
        }
    }
    Ok(out)
}

impl GanStreams {
    pub fn from_corpus(corpus: &Corpus, split: Split, task: GanTask) -> Result<Self> {
        let [real, source, benign, normal] = task_classes(task);
        let mk = |role: &str, class: LabelClass| -> Result<Box<dyn PatchStream>> {
            let patches = load_class(corpus, split, class, task)?;
            Ok(Box::new(InMemoryStream::new(format!("{role}:{class}"), patches)?))
        };
        Ok(Self {
            real: mk("real", real)?,
            source: mk("source", source)?,
            benign: mk("benign", benign)?,
            normal: mk("normal", normal)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Update {
    G,
    D,
}

impl fmt::Display for Update {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Update::G => "G",
            Update::D => "D",
        })
    }
}

/// The update order of one cycle.
pub fn update_pattern(g_steps_per_d: usize) -> Vec<Update> {
    let mut v = vec![Update::G; g_steps_per_d];
    v.push(Update::D);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub alpha: f64,
    pub stage: usize,
}

/// Networks, optimizers and position of a training run.
pub struct GanState {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed iterations.
    pub iteration: usize,
    pub log: Vec<LossRecord>,
    pub updates: Vec<Update>,
}

pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

impl GanState {
    pub fn new(config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        let res = config.stage_resolutions[0];
        Ok(Self {
            generator: Generator::new(&config.network, res)?,
            discriminator: Discriminator::new(&config.network, res)?,
            adam_g: Adam::new(config.adam()),
            adam_d: Adam::new(config.adam()),
            iteration: 0,
            log: Vec::new(),
            updates: Vec::new(),
            config,
        })
    }

    fn sync_growth(&mut self) -> Result<GrowthState> {
        let growth = self.config.growth_at(self.iteration);
        let target = self.config.stage_resolutions[growth.current_stage];
        while self.generator.active_resolution < target {
            let next = self.generator.active_resolution * 2;
            log::info!("growing to {next}px at iteration {}", self.iteration);
            self.generator.grow(next)?;
            self.discriminator.grow(next)?;
        }
        self.generator.alpha = growth.alpha;
        self.discriminator.alpha = growth.alpha;
        Ok(growth)
    }

    fn noise(&self, n: usize, rng: &mut Rng) -> Vec<NoiseDraw> {
        (0..n).map(|_| NoiseDraw::draw(self.generator.blocks(), rng)).collect()
    }

    fn generator_step(&mut self, streams: &mut GanStreams, rng: &mut Rng) -> Result<f64> {
        let res = self.generator.active_resolution;
        let n = self.config.batch_size;
        let src = streams.source.next_batch(n, res, rng)?;
        let noise = self.noise(n, rng);
        self.generator.params.zero_grad();
        let fake = self.generator.forward(&src, &noise, true)?.combined;
        let loss = generator_loss(&self.discriminator.forward(&fake, false)?)?;
        let value = loss.double_value(&[]);
        if value.is_finite() {
            loss.backward();
            self.adam_g.step(&self.generator.params);
        }
        Ok(value)
    }

    fn discriminator_step(&mut self, streams: &mut GanStreams, rng: &mut Rng) -> Result<(f64, f64)> {
        let res = self.discriminator.active_resolution;
        let n = self.config.batch_size;
        let real = streams.real.next_batch(n, res, rng)?;
        let src = streams.source.next_batch(n, res, rng)?;
        let benign = streams.benign.next_batch(n, res, rng)?;
        let normal = streams.normal.next_batch(n, res, rng)?;
        let noise = self.noise(n, rng);
        let fake = tch::no_grad(|| self.generator.forward(&src, &noise, false))?.combined;
        self.discriminator.params.zero_grad();
        let d = &self.discriminator;
        let penalty = gradient_penalty(
            d,
            &real,
            rng,
            PenaltyConfig {
                lambda: self.config.gp_lambda,
                k: self.config.gp_k,
                perturbation_scale: self.config.perturbation_scale,
            },
        )?;
        let loss = discriminator_loss(
            &d.forward(&real, true)?,
            &d.forward(&fake, false)?,
            &d.forward(&benign, false)?,
            &d.forward(&normal, false)?,
            &penalty,
            self.config.aux_loss_scale,
        )?;
        let value = loss.double_value(&[]);
        let gp = penalty.double_value(&[]);
        if value.is_finite() {
            loss.backward();
            self.adam_d.step(&self.discriminator.params);
        }
        Ok((value, gp))
    }

    /// Runs one cycle (`g_steps_per_d` generator updates, one discriminator update).
    pub fn step(&mut self, streams: &mut GanStreams) -> Result<LossRecord> {
        let growth = self.sync_growth()?;
        let mut rng = seed::derived_rng(self.config.seed, &[seed::tag("gan-iteration"), self.iteration as u64]);
        let mut g_total = 0.0;
        let mut record = LossRecord {
            iteration: self.iteration,
            d_loss: 0.0,
            g_loss: 0.0,
            gp: 0.0,
            alpha: growth.alpha,
            stage: growth.current_stage,
        };
        for u in update_pattern(self.config.g_steps_per_d) {
            match u {
                Update::G => g_total += self.generator_step(streams, &mut rng)?,
                Update::D => {
                    let (d, gp) = self.discriminator_step(streams, &mut rng)?;
                    record.d_loss = d;
                    record.gp = gp;
                }
            }
            self.updates.push(u);
        }
        record.g_loss = g_total / self.config.g_steps_per_d as f64;
        self.iteration += 1;
        self.log.push(record);
        Ok(record)
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.config.total_iterations
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": "gan",
            "config": self.config,
            "iteration": self.iteration,
            "resolution": self.generator.active_resolution,
            "alpha": self.generator.alpha,
            "adam_g_step": self.adam_g.step,
            "adam_d_step": self.adam_d.step,
        });
        let mut ck = Checkpoint::new(meta);
        ck.extend("gen/", self.generator.params.iter());
        ck.extend("disc/", self.discriminator.params.iter());
        ck.extend("adam_g.m/", self.adam_g.first.iter());
        ck.extend("adam_g.v/", self.adam_g.second.iter());
        ck.extend("adam_d.m/", self.adam_d.first.iter());
        ck.extend("adam_d.v/", self.adam_d.second.iter());
        ck
    }

    /// Restores networks and optimizer state; the loss log starts empty.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = &ck.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("gan") {
            return Err(Error::Checkpoint("not a GAN training checkpoint".into()));
        }
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing meta field `{k}`")))
        };
        let config: GanTrainConfig = serde_json::from_value(field("config")?)?;
        let iteration: usize = serde_json::from_value(field("iteration")?)?;
        let resolution: usize = serde_json::from_value(field("resolution")?)?;
        let alpha: f64 = serde_json::from_value(field("alpha")?)?;
        let mut state = Self::new(config)?;
        while state.generator.active_resolution < resolution {
            let next = state.generator.active_resolution * 2;
            state.generator.grow(next)?;
            state.discriminator.grow(next)?;
        }
        state.generator.alpha = alpha;
        state.discriminator.alpha = alpha;
        restore(&state.generator.params, &ck.with_prefix("gen/"))?;
        restore(&state.discriminator.params, &ck.with_prefix("disc/"))?;
        state.adam_g.step = serde_json::from_value(field("adam_g_step")?)?;
        state.adam_d.step = serde_json::from_value(field("adam_d_step")?)?;
        state.adam_g.first = deep(ck.with_prefix("adam_g.m/"));
        state.adam_g.second = deep(ck.with_prefix("adam_g.v/"));
        state.adam_d.first = deep(ck.with_prefix("adam_d.m/"));
        state.adam_d.second = deep(ck.with_prefix("adam_d.v/"));
        state.iteration = iteration;
        Ok(state)
    }
}

fn deep(map: BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    map.into_iter().map(|(k, t)| (k, t.copy())).collect()
}

fn restore(params: &ParamStore, values: &BTreeMap<String, Tensor>) -> Result<()> {
    for name in params.names() {
        let Some(v) = values.get(name) else {
            return Err(Error::Checkpoint(format!("tensor `{name}` missing")));
        };
        if v.size() != params.get(name).unwrap().size() {
            return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong shape")));
        }
    }
    params.copy_from(values);
    Ok(())
}

/// Loads the generator stored in a training checkpoint, in eval-ready form.
pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    let ck = Checkpoint::load(path)?;
    Ok(GanState::from_checkpoint(&ck)?.generator)
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains until `total_iterations`, writing periodic checkpoints, the loss
/// log and a final checkpoint into `out` when given.
pub fn train_gan(state: &mut GanState, streams: &mut GanStreams, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while !state.finished() {
        let rec = state.step(streams)?;
        let bad = [("d_loss", rec.d_loss), ("g_loss", rec.g_loss), ("gp", rec.gp)]
            .into_iter()
            .find(|(_, v)| !v.is_finite());
        if let Some((what, _)) = bad {
            let diagnostic = match out {
                Some(dir) => {
                    let p = dir.join(DIAGNOSTIC_CHECKPOINT);
                    state.to_checkpoint().save(&p)?;
                    write_loss_log(dir.join(LOSS_LOG_FILE), &state.log)?;
                    Some(p)
                }
                None => None,
            };
            return Err(Error::NonFinite {
                what: what.to_string(),
                step: rec.iteration,
                diagnostic,
            });
        }
        if rec.iteration % 50 == 0 {
            log::debug!(
                "iter {} stage {} alpha {:.3} d {:.4} g {:.4} gp {:.4}",
                rec.iteration,
                rec.stage,
                rec.alpha,
                rec.d_loss,
                rec.g_loss,
                rec.gp
            );
        }
        if let Some(dir) = out {
            let every = state.config.checkpoint_every;
            if every > 0 && state.iteration % every == 0 && !state.finished() {
                state.to_checkpoint().save(checkpoint_path(dir, state.iteration))?;
            }
        }
    }
    if let Some(dir) = out {
        state.to_checkpoint().save(dir.join(FINAL_CHECKPOINT))?;
        write_loss_log(dir.join(LOSS_LOG_FILE), &state.log)?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt-{iteration:07}.ckpt"))
}
