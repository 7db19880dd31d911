//! End-to-end experiment: phantom corpus, patches, three GANs, synthetic
//! corpus, the mix-ratio classifier sweep and the evaluation tables.
//!
//! Every stage writes into its own directory under the output root together
//! with a `.stage.json` stamp holding the hash of its inputs and of its
//! outputs. A stage is skipped when both still match.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{extract_features, predict_scores, train_classifier, Classifier, ClassifierConfig, PatchPool};
use crate::corpus::{corpus_hash, Corpus};
use crate::error::{Error, Result};
use crate::gan::{generate_triplet, load_generator, train_gan, GanState, GanStreams, GanTask, GanTrainConfig, NoiseDraw};
use crate::lesion::{
    build_synthetic_corpus, compose, extract_lesion_mask, refine_mask, PostprocessConfig, SynthesisCounts,
    SynthesisModel, SynthesisPlan,
};
use crate::metrics::{auc, delong_p_value, embedding_report, tsne_embed, EmbeddingPoint, ReportSummary, TsneConfig};
use crate::patch::{denormalize_intensity, normalize_intensity, ImagePatch, PatchPlan, SamplerConfig};
use crate::phantom::{generate_phantom_corpus, tissue_fraction, tissue_mask, CalcParams, FullImage, MassParams, PhantomSpec, Range};
use crate::seed;
use crate::types::{LabelClass, Provenance, Split};

pub const PLAN_FILE: &str = "plan.json";
pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const TABLE_FILE: &str = "table1.csv";
pub const SCORES_FILE: &str = "scores.csv";
const STAMP: &str = ".stage.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfigs {
    pub mass: GanTrainConfig,
    pub calc: GanTrainConfig,
    pub removal: GanTrainConfig,
}

impl GanConfigs {
    pub fn get(&self, task: GanTask) -> &GanTrainConfig {
        match task {
            GanTask::Mass => &self.mass,
            GanTask::Calc => &self.calc,
            GanTask::Removal => &self.removal,
        }
    }

    fn get_mut(&mut self, task: GanTask) -> &mut GanTrainConfig {
        match task {
            GanTask::Mass => &mut self.mass,
            GanTask::Calc => &mut self.calc,
            GanTask::Removal => &mut self.removal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Write the t-SNE embedding report.
    pub embed: bool,
    pub tsne: TsneConfig,
    /// Points per class tag (`real-normal`, `real-malignant-mass`, `synthetic-malignant-calc`, ...).
    pub embed_counts: BTreeMap<String, usize>,
    /// Sweep arm compared against the baseline in the report.
    pub augmented_p0: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            embed: false,
            tsne: TsneConfig::default(),
            embed_counts: BTreeMap::from([
                ("real-normal".to_string(), 2000),
                ("real-malignant-mass".to_string(), 1000),
                ("real-malignant-calc".to_string(), 1000),
                ("synthetic-malignant-mass".to_string(), 1000),
                ("synthetic-malignant-calc".to_string(), 1000),
            ]),
            augmented_p0: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub phantom: PhantomSpec,
    pub patches: PatchPlan,
    pub gan: GanConfigs,
    pub synthesis: SynthesisPlan,
    pub classifier: ClassifierConfig,
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
    /// Number of classifier seeds per sweep arm.
    #[serde(default = "one")]
    pub classifier_seeds: usize,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_root: Option<PathBuf>,
}

fn default_sweep() -> Vec<f64> {
    vec![0.0, 0.10, 0.25, 0.50, 0.75, 1.0]
}

fn one() -> usize {
    1
}

/// Keys of a plan file that may name a separate JSON file instead of
/// holding the config inline.
const EXTERNAL_KEYS: [&[&str]; 7] = [
    &["phantom"],
    &["patches"],
    &["gan", "mass"],
    &["gan", "calc"],
    &["gan", "removal"],
    &["synthesis"],
    &["classifier"],
];

impl ExperimentPlan {
    /// Parses a plan file; string values under the stage keys are read as
    /// paths (relative to the plan file) to per-stage JSON configs.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for keys in EXTERNAL_KEYS {
            let pointer = format!("/{}", keys.join("/"));
            let Some(slot) = value.pointer_mut(&pointer) else { continue };
            if let Some(rel) = slot.as_str().map(str::to_owned) {
                let p = base.join(rel);
                if !p.exists() {
                    return Err(Error::validation(keys.join("."), format!("referenced file {} does not exist", p.display())));
                }
                let t = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                *slot = serde_json::from_str(&t)?;
            }
        }
        let plan: Self = serde_json::from_value(value)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.is_empty() {
            return Err(Error::validation("sweep", "needs at least one p0"));
        }
        if let Some(p) = self.sweep.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation("sweep", format!("p0 {p} outside [0, 1]")));
        }
        let mut seen = BTreeSet::new();
        for p in &self.sweep {
            if !seen.insert(p.to_bits()) {
                return Err(Error::validation("sweep", format!("duplicate p0 {p}")));
            }
        }
        if self.classifier_seeds == 0 {
            return Err(Error::validation("classifier_seeds", "must be at least 1"));
        }
        self.phantom.validate()?;
        self.patches.sampler.validate()?;
        for task in GanTask::ALL {
            self.gan.get(task).validate()?;
        }
        self.classifier.validate()?;
        for c in [&self.synthesis.mass, &self.synthesis.calc, &self.synthesis.removal] {
            c.validate()?;
        }
        Ok(())
    }

    /// Copy with every stage seed derived from the master seed.
    pub fn resolved(&self) -> Self {
        let m = self.master_seed;
        let mut p = self.clone();
        p.phantom.master_seed = seed::mix(m, &[seed::tag("phantom")]);
        p.patches.seed = seed::mix(m, &[seed::tag("patches")]);
        for task in GanTask::ALL {
            p.gan.get_mut(task).seed = seed::mix(m, &[seed::tag("gan"), seed::tag(task.as_str())]);
        }
        p.synthesis.seed = seed::mix(m, &[seed::tag("synthesis")]);
        p.classifier.seed = seed::mix(m, &[seed::tag("classifier")]);
        p.eval.tsne.seed = seed::mix(m, &[seed::tag("tsne")]);
        p
    }

    /// Classifier config of one sweep arm. Arms with the same seed index
    /// share initialization and draw order.
    pub fn arm_config(&self, p0: f64, seed_index: usize) -> ClassifierConfig {
        ClassifierConfig {
            initial_synthetic_proportion: p0,
            seed: seed::mix(self.classifier.seed, &[seed_index as u64]),
            ..self.classifier.clone()
        }
    }

    /// 64px patches on 192px phantoms with subtle lesions, two-stage GANs
    /// and the small classifier.
    pub fn desk() -> Self {
        use LabelClass::*;
        let size = 64;
        let phantom = PhantomSpec {
            image_width: 192,
            image_height: 192,
            background_texture: crate::phantom::BackgroundTexture {
                smoothing_scale: 2.0,
                intensity: Range::new(0.3, 0.6),
            },
            mass_params: MassParams {
                radius: Range::new(5.0, 8.0),
                peak: Range::new(0.1, 0.18),
                benign_peak_scale: 0.6,
            },
            calc_params: CalcParams {
                clusters: Range::new(1, 1),
                speck_radius: Range::new(0.8, 1.2),
                speck_count: Range::new(3, 6),
                cluster_radius: Range::new(6.0, 8.0),
                peak: Range::new(0.12, 0.2),
            },
            counts_per_class: BTreeMap::from([(Normal, 120), (Benign, 60), (MalignantMass, 120), (MalignantCalc, 120)]),
            master_seed: 0,
        };
        let sampler = SamplerConfig {
            patch_size: size,
            max_offset: 16,
            ..SamplerConfig::default()
        };
        let train = BTreeMap::from([(Normal, 1000), (Benign, 200), (MalignantMass, 500), (MalignantCalc, 500)]);
        let eval = BTreeMap::from([(Normal, 250), (MalignantMass, 125), (MalignantCalc, 125)]);
        let patches = PatchPlan {
            sampler: sampler.clone(),
            counts: BTreeMap::from([(Split::Train, train), (Split::Val, eval.clone()), (Split::Test, eval)]),
            augment: true,
            seed: 0,
        };
        let gan = GanConfigs {
            mass: GanTrainConfig::desk(GanTask::Mass),
            calc: GanTrainConfig::desk(GanTask::Calc),
            removal: GanTrainConfig::desk(GanTask::Removal),
        };
        let mut synthesis = SynthesisPlan {
            counts: SynthesisCounts { mass: 500, calc: 500, normal: 1000 },
            sampler,
            mass: PostprocessConfig::default().scaled_to(size),
            calc: PostprocessConfig::default().scaled_to(size),
            removal: PostprocessConfig::removal().scaled_to(size),
            ..SynthesisPlan::default()
        };
        for c in [&mut synthesis.mass, &mut synthesis.calc, &mut synthesis.removal] {
            c.min_area_fraction = 0.01;
        }
        Self {
            phantom,
            patches,
            gan,
            synthesis,
            classifier: ClassifierConfig::desk(),
            sweep: default_sweep(),
            classifier_seeds: 1,
            eval: EvalSettings::default(),
            master_seed: 0,
            output_root: None,
        }
    }

    /// The desk plan shrunk to a few seconds per stage.
    pub fn smoke() -> Self {
        use LabelClass::*;
        let mut p = Self::desk();
        p.phantom.counts_per_class = BTreeMap::from([(Normal, 16), (Benign, 8), (MalignantMass, 16), (MalignantCalc, 16)]);
        let train = BTreeMap::from([(Normal, 24), (Benign, 8), (MalignantMass, 12), (MalignantCalc, 12)]);
        let eval = BTreeMap::from([(Normal, 10), (MalignantMass, 5), (MalignantCalc, 5)]);
        p.patches.counts = BTreeMap::from([(Split::Train, train), (Split::Val, eval.clone()), (Split::Test, eval)]);
        for task in GanTask::ALL {
            let g = p.gan.get_mut(task);
            g.total_iterations = 4;
            g.fade_iterations = 2;
            g.batch_size = 2;
        }
        p.synthesis.counts = SynthesisCounts { mass: 4, calc: 4, normal: 8 };
        for (c, t) in [(&mut p.synthesis.mass, 1e-3), (&mut p.synthesis.calc, 1e-3), (&mut p.synthesis.removal, -1e-3)] {
            c.threshold = t;
            c.min_area_fraction = 0.01;
        }
        p.classifier = ClassifierConfig {
            width: 8,
            total_samples: 40,
            eval_interval: 20,
            decay_interval: 20,
            batch_size: 4,
            ..ClassifierConfig::desk()
        };
        p.sweep = vec![0.0, 0.5];
        p
    }
}

/// Row label for a sweep arm.
pub fn regime_name(p0: f64) -> String {
    if p0 == 0.0 {
        "baseline".to_string()
    } else {
        format!("{}% w/ decay", (p0 * 100.0).round() as i64)
    }
}

fn arm_dir_name(p0: f64, seed_index: usize) -> String {
    format!("p{:03}-s{seed_index}", (p0 * 100.0).round() as i64)
}

/// SHA-256 over relative paths and contents of every file under `dir`,
/// in path order, excluding stage stamps.
pub fn dir_hash(dir: impl AsRef<Path>) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != STAMP) {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let dir = dir.as_ref();
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        let p = dir.join(&f);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn hash_inputs(stage: &str, config: &impl Serialize, upstream: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(serde_json::to_vec(config)?);
    for u in upstream {
        h.update(u.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub dir: PathBuf,
    pub input_hash: String,
    pub output_hash: String,
    /// The stage's outputs were already present and matched.
    pub skipped: bool,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub master_seed: u64,
    pub plan: ExperimentPlan,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stamp {
    input_hash: String,
    output_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub regime: String,
    pub p0: f64,
    pub seed: usize,
    pub test_auc: f64,
    /// Empty for the baseline.
    pub p_value: Option<f64>,
}

pub fn read_table(path: impl AsRef<Path>) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub struct Experiment {
    pub plan: ExperimentPlan,
    pub root: PathBuf,
    /// Run only this stage (its inputs must already exist).
    pub only: Option<String>,
    /// Re-execute stages even when their stamps match.
    pub force: bool,
    records: Vec<StageRecord>,
    hashes: BTreeMap<String, String>,
}

impl Experiment {
    pub fn new(plan: &ExperimentPlan, root: impl Into<PathBuf>) -> Result<Self> {
        plan.validate()?;
        Ok(Self {
            plan: plan.resolved(),
            root: root.into(),
            only: None,
            force: false,
            records: Vec::new(),
            hashes: BTreeMap::new(),
        })
    }

    pub fn dir(&self, stage: &str) -> PathBuf {
        match stage {
            "phantom" | "patches" | "synthetic" => self.root.join(stage),
            "evaluate" => self.root.join("results"),
            "embed" => self.root.join("embed"),
            s if s.starts_with("gan-") => self.root.join("gan").join(&s[4..]),
            s if s.starts_with("classifier-") => self.root.join("classifiers").join(&s[11..]),
            s => self.root.join(s),
        }
    }

    fn command(&self, stage: &str) -> String {
        format!(
            "lesion-forge run --config {} --out {} --stage {stage}",
            self.root.join(PLAN_FILE).display(),
            self.root.display()
        )
    }

    fn upstream(&self, names: &[&str]) -> Result<Vec<String>> {
        names
            .iter()
            .map(|n| match self.hashes.get(*n) {
                Some(h) => Ok(h.clone()),
                None => {
                    let stamp = read_stamp(&self.dir(n)).ok_or_else(|| {
                        Error::validation("stage", format!("stage `{n}` has not been run"))
                    })?;
                    Ok(stamp.output_hash)
                }
            })
            .collect()
    }

    /// Runs `body` unless the stage's stamp matches its inputs and outputs.
    fn stage<F>(&mut self, name: &str, config: &impl Serialize, upstream: &[&str], body: F) -> Result<()>
    where
        F: FnOnce(&Self, &Path) -> Result<()>,
    {
        if self.only.as_deref().is_some_and(|o| o != name) {
            if let Some(st) = read_stamp(&self.dir(name)) {
                self.hashes.insert(name.to_string(), st.output_hash);
            }
            return Ok(());
        }
        let wrap = |e: Error, cmd: String| Error::Stage {
            stage: name.to_string(),
            command: cmd,
            source: Box::new(e),
        };
        let ups = self.upstream(upstream).map_err(|e| wrap(e, self.command(name)))?;
        let refs: Vec<&str> = ups.iter().map(String::as_str).collect();
        let input_hash = hash_inputs(name, config, &refs)?;
        let dir = self.dir(name);
        let current = read_stamp(&dir).filter(|st| st.input_hash == input_hash);
        let fresh = match &current {
            Some(st) if !self.force => dir_hash(&dir).ok().as_ref() == Some(&st.output_hash),
            _ => false,
        };
        let skipped = fresh;
        if !fresh {
            log::info!("stage {name}: running");
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            body(self, &dir).map_err(|e| wrap(e, self.command(name)))?;
            let output_hash = dir_hash(&dir)?;
            let stamp = Stamp { input_hash: input_hash.clone(), output_hash };
            fs::write(dir.join(STAMP), serde_json::to_vec_pretty(&stamp)?).map_err(|e| Error::io(&dir, e))?;
        } else {
            log::info!("stage {name}: up to date");
        }
        let output_hash = read_stamp(&dir).expect("stamp just written").output_hash;
        self.hashes.insert(name.to_string(), output_hash.clone());
        self.records.retain(|r| r.name != name);
        self.records.push(StageRecord {
            name: name.to_string(),
            dir: dir.strip_prefix(&self.root).unwrap_or(&dir).to_path_buf(),
            input_hash,
            output_hash,
            skipped,
            command: self.command(name),
        });
        Ok(())
    }

    pub fn stage_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["phantom", "patches"].map(String::from).to_vec();
        v.extend(self.gan_tasks().iter().map(|t| format!("gan-{t}")));
        v.push("synthetic".into());
        for (p0, s) in self.arms() {
            v.push(format!("classifier-{}", arm_dir_name(p0, s)));
        }
        v.push("evaluate".into());
        if self.plan.eval.embed {
            v.push("embed".into());
        }
        v
    }

    fn gan_tasks(&self) -> Vec<GanTask> {
        let c = &self.plan.synthesis.counts;
        GanTask::ALL
            .into_iter()
            .filter(|t| match t {
                GanTask::Mass => c.mass > 0,
                GanTask::Calc => c.calc > 0,
                GanTask::Removal => c.normal > 0,
            })
            .collect()
    }

    fn arms(&self) -> Vec<(f64, usize)> {
        let mut v = Vec::new();
        for &p0 in &self.plan.sweep {
            for s in 0..self.plan.classifier_seeds {
                v.push((p0, s));
            }
        }
        v
    }

    /// Executes every stage in dependency order and writes the run manifest.
    pub fn run(&mut self) -> Result<RunManifest> {
        if let Some(o) = &self.only {
            if !self.stage_names().contains(o) {
                return Err(Error::validation("stage", format!("unknown stage `{o}`")));
            }
        }
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        self.plan.save(self.root.join(PLAN_FILE))?;
        let plan = self.plan.clone();

        self.stage("phantom", &plan.phantom, &[], |_, dir| {
            generate_phantom_corpus(&plan.phantom, dir).map(|_| ())
        })?;
        self.stage("patches", &plan.patches, &["phantom"], |x, dir| {
            let src = Corpus::open(x.dir("phantom"))?;
            crate::patch::build_patch_corpus(&src, &plan.patches, dir).map(|_| ())
        })?;
        for task in self.gan_tasks() {
            let cfg = plan.gan.get(task).clone();
            self.stage(&format!("gan-{task}"), &cfg, &["patches"], |x, dir| {
                let corpus = Corpus::open(x.dir("patches"))?;
                let mut streams = GanStreams::from_corpus(&corpus, Split::Train, task)?;
                let mut state = GanState::new(cfg.clone())?;
                train_gan(&mut state, &mut streams, Some(dir))?;
                prune_gan_dir(dir)
            })?;
        }
        let gan_names: Vec<String> = self.gan_tasks().iter().map(|t| format!("gan-{t}")).collect();
        let mut ups: Vec<&str> = vec!["phantom", "patches"];
        ups.extend(gan_names.iter().map(String::as_str));
        self.stage("synthetic", &plan.synthesis, &ups, |x, dir| {
            let load = |task: GanTask| -> Result<Option<SynthesisModel>> {
                let p = x.dir(&format!("gan-{task}")).join(crate::gan::train::FINAL_CHECKPOINT);
                if x.gan_tasks().contains(&task) {
                    SynthesisModel::load(p).map(Some)
                } else {
                    Ok(None)
                }
            };
            let (mass, calc, removal) = (load(GanTask::Mass)?, load(GanTask::Calc)?, load(GanTask::Removal)?);
            let phantom = Corpus::open(x.dir("phantom"))?;
            let normals = phantom
                .filter(Some(Split::Train), Some(LabelClass::Normal))
                .map(|r| FullImage::load(&phantom, r))
                .collect::<Result<Vec<_>>>()?;
            let patches = Corpus::open(x.dir("patches"))?;
            let positives = patches
                .filter(Some(Split::Train), None)
                .filter(|r| r.class.is_malignant())
                .map(|r| ImagePatch::load(&patches, r))
                .collect::<Result<Vec<_>>>()?;
            let out = build_synthetic_corpus(
                &plan.synthesis,
                mass.as_ref(),
                calc.as_ref(),
                removal.as_ref(),
                &normals,
                &positives,
                dir.join("corpus"),
            )?;
            let stats = serde_json::to_vec_pretty(&out.stats)?;
            fs::write(dir.join("stats.json"), stats).map_err(|e| Error::io(dir, e))
        })?;
        for (p0, s) in self.arms() {
            let cfg = plan.arm_config(p0, s);
            let name = format!("classifier-{}", arm_dir_name(p0, s));
            self.stage(&name, &cfg, &["patches", "synthetic"], |x, dir| {
                let patches = Corpus::open(x.dir("patches"))?;
                let synthetic = Corpus::open(x.dir("synthetic").join("corpus"))?;
                let mut real = PatchPool::from_corpus("real", &patches, Some(Split::Train));
                let mut syn = PatchPool::from_corpus("synthetic", &synthetic, None);
                let val = load_eval_patches(&patches, Split::Val)?;
                train_classifier(&cfg, &mut real, &mut syn, &val, Some(dir))?;
                if p0 == 0.0 && syn.reads() != 0 {
                    return Err(Error::validation("sweep", "baseline arm read synthetic examples"));
                }
                Ok(())
            })?;
        }
        let arm_names: Vec<String> = self
            .arms()
            .iter()
            .map(|&(p0, s)| format!("classifier-{}", arm_dir_name(p0, s)))
            .collect();
        let mut ups: Vec<&str> = vec!["patches"];
        ups.extend(arm_names.iter().map(String::as_str));
        self.stage("evaluate", &(&plan.sweep, plan.classifier_seeds), &ups, |x, dir| x.evaluate(dir))?;
        if plan.eval.embed {
            let mut ups = ups.clone();
            ups.push("synthetic");
            self.stage("embed", &plan.eval, &ups, |x, dir| x.embed(dir))?;
        }

        let mut manifest = match RunManifest::load(self.root.join(RUN_MANIFEST)) {
            Ok(m) if self.only.is_some() && m.plan == self.plan => m,
            _ => RunManifest {
                master_seed: self.plan.master_seed,
                plan: self.plan.clone(),
                stages: Vec::new(),
            },
        };
        for r in &self.records {
            match manifest.stages.iter_mut().find(|s| s.name == r.name) {
                Some(s) => *s = r.clone(),
                None => manifest.stages.push(r.clone()),
            }
        }
        let path = self.root.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    fn load_arm(&self, p0: f64, s: usize) -> Result<Classifier> {
        let dir = self.dir(&format!("classifier-{}", arm_dir_name(p0, s)));
        Classifier::load(dir.join(crate::classifier::BEST_CHECKPOINT))
    }

    fn evaluate(&self, dir: &Path) -> Result<()> {
        let patches = Corpus::open(self.dir("patches"))?;
        let test = load_eval_patches(&patches, Split::Test)?;
        let labels: Vec<u8> = test.iter().map(|p| p.label_class.is_malignant() as u8).collect();
        let mut scores: BTreeMap<(u64, usize), Vec<f64>> = BTreeMap::new();
        for (p0, s) in self.arms() {
            scores.insert((p0.to_bits(), s), predict_scores(&self.load_arm(p0, s)?, &test)?);
        }
        let mut w = csv::Writer::from_path(dir.join(SCORES_FILE))?;
        w.write_record(["id", "label", "regime", "seed", "score"])?;
        for (p0, s) in self.arms() {
            for (i, p) in test.iter().enumerate() {
                let sc = scores[&(p0.to_bits(), s)][i];
                w.write_record([&p.source_id, &labels[i].to_string(), &regime_name(p0), &s.to_string(), &format!("{sc}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let has_baseline = self.plan.sweep.contains(&0.0);
        let mut rows = Vec::new();
        for (p0, s) in self.arms() {
            let a = &scores[&(p0.to_bits(), s)];
            let test_auc = auc(a, &labels)?;
            let p_value = if p0 == 0.0 || !has_baseline {
                None
            } else {
                let b = &scores[&(0f64.to_bits(), s)];
                Some(paired_p_value(a, b, &labels)?)
            };
            rows.push(TableRow { regime: regime_name(p0), p0, seed: s, test_auc, p_value });
        }
        let mut w = csv::Writer::from_path(dir.join(TABLE_FILE))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    fn embed(&self, dir: &Path) -> Result<()> {
        let eval = &self.plan.eval;
        let baseline = self.load_arm(0.0, 0).map_err(|_| Error::validation("sweep", "embedding needs a baseline arm"))?;
        let augmented = self
            .load_arm(eval.augmented_p0, 0)
            .map_err(|_| Error::validation("eval.augmented_p0", "not one of the sweep arms"))?;
        let patches = Corpus::open(self.dir("patches"))?;
        let synthetic = Corpus::open(self.dir("synthetic").join("corpus"))?;
        embed_report(&baseline, &augmented, &patches, &synthetic, eval, dir).map(|_| ())
    }
}

/// Samples points per class tag, embeds baseline features with t-SNE and
/// writes the report. Flagged points are real positives the baseline
/// scores below 0.5 and the augmented model at or above it.
pub fn embed_report(
    baseline: &Classifier,
    augmented: &Classifier,
    real: &Corpus,
    synthetic: &Corpus,
    eval: &EvalSettings,
    dir: &Path,
) -> Result<ReportSummary> {
    let mut rng = seed::derived_rng(eval.tsne.seed, &[seed::tag("embed-sample")]);
    let mut sample: Vec<(String, ImagePatch)> = Vec::new();
    for (tag, &count) in &eval.embed_counts {
        let (corpus, split, class) = parse_class_tag(tag, real, synthetic)?;
        let mut recs: Vec<_> = corpus.filter(split, Some(class)).collect();
        recs.shuffle(&mut rng);
        for r in recs.into_iter().take(count) {
            let mut p = ImagePatch::load(corpus, r)?;
            p.source_id = format!("{}:{}", tag, r.id);
            sample.push((tag.clone(), p));
        }
    }
    let pats: Vec<ImagePatch> = sample.iter().map(|(_, p)| p.clone()).collect();
    let feats = extract_features(baseline, &pats)?;
    let x: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
    let tsne = tsne_embed(&x, &eval.tsne)?;
    let base_scores = predict_scores(baseline, &pats)?;
    let aug_scores = predict_scores(augmented, &pats)?;
    let mut points = Vec::new();
    let mut bmap = BTreeMap::new();
    let mut amap = BTreeMap::new();
    let mut flagged = BTreeSet::new();
    for (i, (tag, p)) in sample.iter().enumerate() {
        points.push(EmbeddingPoint {
            id: p.source_id.clone(),
            class_tag: tag.clone(),
            feature: feats[i].clone(),
            coords: Some(tsne.coords[i]),
        });
        bmap.insert(p.source_id.clone(), base_scores[i]);
        amap.insert(p.source_id.clone(), aug_scores[i]);
        if p.provenance == Provenance::Real && p.label_class.is_malignant() && base_scores[i] < 0.5 && aug_scores[i] >= 0.5 {
            flagged.insert(p.source_id.clone());
        }
    }
    let summary = embedding_report(&points, &bmap, &amap, &flagged, dir)?;
    log::info!("embedding: {} flagged, mean delta {:.4}", summary.flagged, summary.mean_flagged_delta);
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(dir, e))?;
    Ok(summary)
}

fn parse_class_tag<'a>(tag: &str, real: &'a Corpus, synthetic: &'a Corpus) -> Result<(&'a Corpus, Option<Split>, LabelClass)> {
    let (prov, class) = tag
        .split_once('-')
        .ok_or_else(|| Error::validation("eval.embed_counts", format!("bad class tag `{tag}`")))?;
    let class = LabelClass::ALL
        .into_iter()
        .find(|c| c.as_str() == class)
        .ok_or_else(|| Error::validation("eval.embed_counts", format!("unknown class in `{tag}`")))?;
    match prov {
        "real" => Ok((real, Some(Split::Test), class)),
        "synthetic" => Ok((synthetic, None, class)),
        _ => Err(Error::validation("eval.embed_counts", format!("unknown provenance in `{tag}`"))),
    }
}

/// DeLong p of `a` against `b`. Zero variance with unequal AUCs gives 0.
pub fn paired_p_value(a: &[f64], b: &[f64], labels: &[u8]) -> Result<f64> {
    match delong_p_value(a, b, labels) {
        Ok(d) => Ok(d.p_value),
        Err(Error::DegenerateVariance { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    let text = fs::read(dir.join(STAMP)).ok()?;
    serde_json::from_slice(&text).ok()
}

/// Keeps the final checkpoint and loss log.
fn prune_gan_dir(dir: &Path) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if name.starts_with("ckpt-") {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Malignant and normal patches of one split.
pub fn load_eval_patches(corpus: &Corpus, split: Split) -> Result<Vec<ImagePatch>> {
    corpus
        .filter(Some(split), None)
        .filter(|r| r.class != LabelClass::Benign)
        .map(|r| ImagePatch::load(corpus, r))
        .collect()
}

pub fn run_experiment(plan: &ExperimentPlan, root: impl Into<PathBuf>) -> Result<RunManifest> {
    Experiment::new(plan, root)?.run()
}

/// Output hashes of every stage of a finished run.
pub fn stage_hashes(root: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let m = RunManifest::load(root.as_ref().join(RUN_MANIFEST))?;
    Ok(m.stages.into_iter().map(|s| (s.name, s.output_hash)).collect())
}

/// Hash of a phantom, patch or synthetic corpus directory of a run.
pub fn run_corpus_hash(root: impl AsRef<Path>, stage: &str) -> Result<String> {
    let dir = root.as_ref().join(stage);
    let dir = if stage == "synthetic" { dir.join("corpus") } else { dir };
    corpus_hash(dir)
}

pub const STRIP_PATCHES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct StripDemo {
    /// Top-left corners of the five windows.
    pub windows: Vec<(usize, usize)>,
    pub before: Array2<u16>,
    pub after: Array2<u16>,
    /// Windows whose generator output passed the mask gate.
    pub edited: Vec<bool>,
}

/// Runs the generator over five adjacent patches along one row of `image`
/// and pastes the post-processed results back at their coordinates.
///
/// The row passes through the first annotated lesion, or the image centre.
pub fn strip_demo(
    image: &FullImage,
    generator_ckpt: impl AsRef<Path>,
    cfg: &PostprocessConfig,
    tissue_fraction_min: f64,
    seed_value: u64,
) -> Result<StripDemo> {
    let g = load_generator(generator_ckpt)?;
    let n = g.active_resolution;
    let (w, h) = (image.width(), image.height());
    let span = STRIP_PATCHES * n;
    if w < span || h < n {
        return Err(Error::validation("image", format!("{w}x{h} image cannot hold {STRIP_PATCHES} patches of {n}px")));
    }
    let (cx, cy) = match image.annotations.first() {
        Some(b) => (b.x + b.width / 2, b.y + b.height / 2),
        None => (w / 2, h / 2),
    };
    let y = cy.saturating_sub(n / 2).min(h - n);
    let x0 = cx.saturating_sub(span / 2).min(w - span);
    let windows: Vec<(usize, usize)> = (0..STRIP_PATCHES).map(|i| (x0 + i * n, y)).collect();
    let tissue = tissue_mask(&image.pixels, image.tissue_threshold());
    for &(x, y) in &windows {
        let f = tissue_fraction(&tissue.slice(s![y..y + n, x..x + n]).to_owned());
        if f < tissue_fraction_min {
            return Err(Error::NoValidPatch { image_id: image.id.clone(), attempts: STRIP_PATCHES });
        }
    }
    let mut after = image.pixels.clone();
    let mut edited = Vec::new();
    let mut rng = seed::derived_rng(seed_value, &[seed::tag("strip-demo")]);
    for &(x, y) in &windows {
        let raw = image.pixels.slice(s![y..y + n, x..x + n]).to_owned();
        let base = ImagePatch {
            pixels: normalize_intensity(&raw, n)?,
            label_class: image.label_class,
            provenance: Provenance::Real,
            source_id: image.id.clone(),
            origin: (x, y),
        };
        let mut done = false;
        for _ in 0..cfg.max_regen_attempts {
            let noise = NoiseDraw::draw(g.blocks(), &mut rng);
            let t = generate_triplet(&g, &base, &noise)?;
            if let Ok(mask) = extract_lesion_mask(&t.lesion, cfg) {
                let composed = compose(&t, &refine_mask(&mask, cfg));
                after.slice_mut(s![y..y + n, x..x + n]).assign(&denormalize_intensity(&composed.combined));
                done = true;
                break;
            }
        }
        edited.push(done);
    }
    let before = image.pixels.slice(s![y..y + n, x0..x0 + span]).to_owned();
    let after = after.slice(s![y..y + n, x0..x0 + span]).to_owned();
    Ok(StripDemo { windows, before, after, edited })
}

/// Before strip above the after strip, 2px apart, 8-bit grey.
pub fn render_strip_demo(demo: &StripDemo, path: impl AsRef<Path>) -> Result<(u32, u32)> {
    let (n, span) = demo.before.dim();
    let gap = 2;
    let (w, h) = (span as u32, (2 * n + gap) as u32);
    let mut img = image::GrayImage::from_pixel(w, h, image::Luma([255]));
    for (row, a) in [&demo.before, &demo.after].into_iter().enumerate() {
        for ((y, x), &v) in a.indexed_iter() {
            img.put_pixel(x as u32, (row * (n + gap) + y) as u32, image::Luma([(v >> 8) as u8]));
        }
    }
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok((w, h))
}
