use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use lesion_forge::classifier::{predict_scores, train_classifier, Classifier, ClassifierConfig, PatchPool};
use lesion_forge::corpus::Corpus;
use lesion_forge::experiment::{
    embed_report, load_eval_patches, paired_p_value, render_strip_demo, strip_demo, EvalSettings, Experiment,
    ExperimentPlan,
};
use lesion_forge::gan::{train_gan, GanState, GanStreams, GanTask, GanTrainConfig};
use lesion_forge::lesion::{build_synthetic_corpus, PostprocessConfig, SynthesisModel, SynthesisPlan};
use lesion_forge::metrics::auc;
use lesion_forge::nn::Checkpoint;
use lesion_forge::patch::{build_patch_corpus, ImagePatch, PatchPlan};
use lesion_forge::phantom::{generate_phantom_corpus, FullImage, PhantomSpec};
use lesion_forge::types::{LabelClass, Split};
use lesion_forge::{Error, Result};

/// Contextual-GAN lesion synthesis and augmentation experiments.
#[derive(Parser)]
#[command(name = "lesion-forge", version)]
struct Cli {
    /// Master seed; overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `evaluate` and `strip-demo`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom full-image corpus.
    Phantom {
        /// Use the 192px desk preset instead of the 512px default.
        #[arg(long)]
        desk: bool,
    },
    /// Extract patches from a full-image corpus.
    Patches {
        #[arg(long)]
        source: PathBuf,
    },
    /// Train one of the three GANs.
    TrainGan {
        #[arg(long)]
        task: GanTask,
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
    },
    /// Build a synthetic corpus from trained generators.
    Synthesize {
        #[arg(long)]
        mass: Option<PathBuf>,
        #[arg(long)]
        calc: Option<PathBuf>,
        #[arg(long)]
        removal: Option<PathBuf>,
        /// Full-image corpus supplying normal backgrounds.
        #[arg(long)]
        normals: PathBuf,
        /// Patch corpus supplying malignant inputs for removal.
        #[arg(long)]
        positives: PathBuf,
    },
    /// Train the malignancy classifier on a real/synthetic mix.
    TrainClassifier {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        p0: Option<f64>,
    },
    /// Score a test corpus; writes metric,value rows.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Compare against this model with the DeLong test.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// t-SNE embedding report of baseline features.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        augmented: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// JSON with `embed_counts`, `tsne` settings.
        #[arg(long)]
        sample_spec: Option<PathBuf>,
    },
    /// Before/after strip of five adjacent patches of one image.
    StripDemo {
        /// Full-image corpus.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value = "mass")]
        task: GanTask,
    },
    /// Run a full experiment plan (the desk plan when no config is given).
    Run {
        /// Run only this stage.
        #[arg(long)]
        stage: Option<String>,
        /// Re-execute stages whose outputs are up to date.
        #[arg(long)]
        force: bool,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn config_or<T: DeserializeOwned>(config: &Option<PathBuf>, default: impl FnOnce() -> T) -> Result<T> {
    match config {
        Some(p) => read_json(p),
        None => Ok(default()),
    }
}

fn require(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::validation("--out", "required"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Cli { seed, out, config, command, .. } = cli;
    match command {
        Command::Phantom { desk } => {
            let mut spec: PhantomSpec = config_or(&config, || {
                if desk {
                    ExperimentPlan::desk().phantom
                } else {
                    PhantomSpec::default()
                }
            })?;
            if let Some(s) = seed {
                spec.master_seed = s;
            }
            let c = generate_phantom_corpus(&spec, require(&out)?)?;
            println!("{} images, histogram {:?}", c.len(), c.class_histogram());
        }
        Command::Patches { source } => {
            let mut plan: PatchPlan = config_or(&config, || ExperimentPlan::desk().patches)?;
            if let Some(s) = seed {
                plan.seed = s;
            }
            let c = build_patch_corpus(&Corpus::open(source)?, &plan, require(&out)?)?;
            println!("{} patches, histogram {:?}", c.len(), c.class_histogram());
        }
        Command::TrainGan { task, corpus, resume, desk } => {
            let out = require(&out)?;
            let mut state = match resume {
                Some(ck) => GanState::from_checkpoint(&Checkpoint::load(ck)?)?,
                None => {
                    let mut cfg: GanTrainConfig = config_or(&config, || {
                        if desk {
                            GanTrainConfig::desk(task)
                        } else {
                            GanTrainConfig::for_task(task)
                        }
                    })?;
                    cfg.task = task;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    GanState::new(cfg)?
                }
            };
            let mut streams = GanStreams::from_corpus(&Corpus::open(corpus)?, Split::Train, task)?;
            train_gan(&mut state, &mut streams, Some(out))?;
            println!("trained {} iterations into {}", state.iteration, out.display());
        }
        Command::Synthesize { mass, calc, removal, normals, positives } => {
            let mut plan: SynthesisPlan = config_or(&config, || ExperimentPlan::desk().synthesis)?;
            if let Some(s) = seed {
                plan.seed = s;
            }
            let load = |p: Option<PathBuf>| p.map(SynthesisModel::load).transpose();
            let (mass, calc, removal) = (load(mass)?, load(calc)?, load(removal)?);
            let phantom = Corpus::open(normals)?;
            let normals = phantom
                .filter(Some(Split::Train), Some(LabelClass::Normal))
                .map(|r| FullImage::load(&phantom, r))
                .collect::<Result<Vec<_>>>()?;
            let pc = Corpus::open(positives)?;
            let positives = pc
                .filter(Some(Split::Train), None)
                .filter(|r| r.class.is_malignant())
                .map(|r| ImagePatch::load(&pc, r))
                .collect::<Result<Vec<_>>>()?;
            let s = build_synthetic_corpus(
                &plan,
                mass.as_ref(),
                calc.as_ref(),
                removal.as_ref(),
                &normals,
                &positives,
                require(&out)?,
            )?;
            for (name, st) in &s.stats {
                println!("{name}: {} produced, failure rate {:.3}", st.produced, st.failure_rate());
            }
        }
        Command::TrainClassifier { real, synthetic, val, p0 } => {
            let mut cfg: ClassifierConfig = config_or(&config, ClassifierConfig::desk)?;
            if let Some(p) = p0 {
                cfg.initial_synthetic_proportion = p;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let real_c = Corpus::open(real)?;
            let mut real = PatchPool::from_corpus("real", &real_c, Some(Split::Train));
            let mut syn = match synthetic {
                Some(p) => PatchPool::from_corpus("synthetic", &Corpus::open(p)?, None),
                None => PatchPool::empty("synthetic"),
            };
            let val = load_eval_patches(&Corpus::open(val)?, Split::Val)?;
            let t = train_classifier(&cfg, &mut real, &mut syn, &val, Some(require(&out)?))?;
            let best = &t.history[t.best_index];
            println!("best validation AUC {:.4} at {} samples", best.val_auc, best.samples_seen);
        }
        Command::Evaluate { model, test, baseline } => {
            let out = require(&out)?;
            let test = load_eval_patches(&Corpus::open(test)?, Split::Test)?;
            let labels: Vec<u8> = test.iter().map(|p| p.label_class.is_malignant() as u8).collect();
            let scores = predict_scores(&Classifier::load(model)?, &test)?;
            let mut rows = vec![
                ("auc".to_string(), auc(&scores, &labels)?),
                ("positives".into(), labels.iter().filter(|&&l| l == 1).count() as f64),
                ("negatives".into(), labels.iter().filter(|&&l| l == 0).count() as f64),
            ];
            if let Some(b) = baseline {
                let bs = predict_scores(&Classifier::load(b)?, &test)?;
                rows.push(("baseline_auc".into(), auc(&bs, &labels)?));
                rows.push(("p_value".into(), paired_p_value(&scores, &bs, &labels)?));
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["metric", "value"])?;
            for (k, v) in &rows {
                w.write_record([k.as_str(), &v.to_string()])?;
                println!("{k}: {v}");
            }
            w.flush().map_err(|e| Error::io(out, e))?;
        }
        Command::Embed { model, augmented, test, synthetic, sample_spec } => {
            let mut eval: EvalSettings = match sample_spec.or(config) {
                Some(p) => read_json(&p)?,
                None => EvalSettings::default(),
            };
            if let Some(s) = seed {
                eval.tsne.seed = s;
            }
            let s = embed_report(
                &Classifier::load(model)?,
                &Classifier::load(augmented)?,
                &Corpus::open(test)?,
                &Corpus::open(synthetic)?,
                &eval,
                require(&out)?,
            )?;
            println!("{} points, {} flagged, mean delta {:.4}", s.points, s.flagged, s.mean_flagged_delta);
        }
        Command::StripDemo { image, id, generator, task } => {
            let corpus = Corpus::open(image)?;
            let record = corpus
                .records
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Error::validation("--id", format!("no image `{id}`")))?;
            let img = FullImage::load(&corpus, record)?;
            let cfg: PostprocessConfig = config_or(&config, || PostprocessConfig::for_task(task).scaled_to(64))?;
            let demo = strip_demo(&img, generator, &cfg, 0.5, seed.unwrap_or(0))?;
            let (w, h) = render_strip_demo(&demo, require(&out)?)?;
            println!("{w}x{h} strip, edited windows {:?}", demo.edited);
        }
        Command::Run { stage, force } => {
            let mut plan = match &config {
                Some(p) => ExperimentPlan::load(p)?,
                None => ExperimentPlan::desk(),
            };
            if let Some(s) = seed {
                plan.master_seed = s;
            }
            let root = out
                .or_else(|| plan.output_root.clone())
                .ok_or_else(|| Error::validation("--out", "required (or output_root in the plan)"))?;
            let mut exp = Experiment::new(&plan, root)?;
            exp.only = stage;
            exp.force = force;
            let m = exp.run()?;
            for s in &m.stages {
                println!("{:<24} {} {}", s.name, if s.skipped { "up-to-date" } else { "ran       " }, &s.output_hash[..12]);
            }
        }
    }
    Ok(())
}
