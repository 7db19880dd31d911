//! Acceptance suite. Prints one line per criterion and exits nonzero on any failure.
//!
//! `cargo test --test acceptance -- 3 7` runs a subset. The desk sweep (criterion 2)
//! resumes from `LESION_FORGE_ACCEPTANCE_DIR`, or from a directory under cargo's
//! target tmpdir when unset.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use lesion_forge::classifier::mix_probability;
use lesion_forge::experiment::{read_table, run_corpus_hash, ExperimentPlan, RunManifest, RUN_MANIFEST, TABLE_FILE};
use lesion_forge::gan::networks::{array_to_batch, downsample, tensor_to_array, upsample};
use lesion_forge::gan::train::{fade_weight, InMemoryStream, Update};
use lesion_forge::gan::{
    discriminator_loss, generate_triplet, generator_loss, gradient_penalty, train_gan, Critic, GanState, GanStreams,
    GanTask, GanTrainConfig, Generator, NetworkSpec, NoiseDraw, PenaltyConfig,
};
use lesion_forge::lesion::{dilate_disk, extract_lesion_mask, largest_component, Connectivity, PostprocessConfig};
use lesion_forge::metrics::{auc, compute_auc, delong_p_value, silhouette_score, tsne_embed, ScoredExample, TsneConfig};
use lesion_forge::nn::{spectral_normalize, Init, LayerBuilder, ParamStore, PowerState, SelfAttention};
use lesion_forge::patch::ImagePatch;
use lesion_forge::seed;
use lesion_forge::types::{LabelClass, Provenance};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use tch::{Device, Kind, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lesion-forge"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("`lesion-forge {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn run_plan(plan: &ExperimentPlan, root: &Path) -> Result<(), String> {
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    let cfg = root.join("plan-in.json");
    plan.save(&cfg).map_err(|e| e.to_string())?;
    let out = root.join("run");
    bin(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn work_dir() -> PathBuf {
    std::env::var_os("LESION_FORGE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

// ---------------------------------------------------------------------------

fn desk_sweep() -> Outcome {
    const SEEDS: usize = 5;
    const BUDGET_SECS: f64 = 2.0 * 3600.0;
    let mut plan = ExperimentPlan::desk();
    plan.classifier_seeds = SEEDS;
    let train: usize = plan.patches.counts[&lesion_forge::types::Split::Train].values().sum();
    let test: usize = plan.patches.counts[&lesion_forge::types::Split::Test].values().sum();
    ensure(train >= 2000 && test >= 500, || format!("corpus too small: {train} train, {test} test"))?;

    let root = work_dir().join("desk");
    let start = Instant::now();
    run_plan(&plan, &root)?;
    let elapsed = start.elapsed().as_secs_f64();
    let run = root.join("run");
    let manifest = RunManifest::load(run.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
    let timing = root.join("full-run-seconds.txt");
    if manifest.stages.iter().all(|s| !s.skipped) {
        fs::write(&timing, format!("{elapsed:.0}\n")).map_err(|e| e.to_string())?;
    }
    let full: Option<f64> = fs::read_to_string(&timing).ok().and_then(|s| s.trim().parse().ok());

    let rows = read_table(run.join("results").join(TABLE_FILE)).map_err(|e| e.to_string())?;
    let at = |p0: f64, s: usize| rows.iter().find(|r| r.p0 == p0 && r.seed == s).map(|r| r.test_auc);
    let mut wins = 0;
    let mut deltas = Vec::new();
    for s in 0..SEEDS {
        let (b, a) = (at(0.0, s).ok_or("missing baseline row")?, at(0.5, s).ok_or("missing p0=0.5 row")?);
        wins += usize::from(a >= b);
        deltas.push(a - b);
    }
    let mean = deltas.iter().sum::<f64>() / SEEDS as f64;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let time = match full {
        Some(t) => format!("full sweep {:.0} min on {cores} core(s)", t / 60.0),
        None => "runtime not measured (resumed run)".into(),
    };
    ensure(wins >= 3 && mean > 0.0, || format!("{wins}/{SEEDS} seeds improve, mean delta {mean:+.4}; {time}"))?;
    ensure(full.is_none_or(|t| t <= BUDGET_SECS), || format!("{time} exceeds 2 h"))?;
    Ok(format!("{wins}/{SEEDS} seeds improve, mean delta {mean:+.4}; {time}"))
}

const LN4: f64 = 1.386_294_361_119_890_6;

fn loss_arithmetic() -> Outcome {
    let u = || Tensor::zeros([7, 4], (Kind::Double, Device::Cpu));
    let zero = Tensor::from(0.0f64);
    let d = discriminator_loss(&u(), &u(), &u(), &u(), &zero, 0.2).map_err(|e| e.to_string())?.double_value(&[]);
    let g = generator_loss(&u()).map_err(|e| e.to_string())?.double_value(&[]);
    ensure((d - 2.4 * LN4).abs() < 1e-6, || format!("discriminator {d}"))?;
    ensure((g - LN4).abs() < 1e-6, || format!("generator {g}"))?;
    Ok(format!("d {d:.9}, g {g:.9}"))
}

struct LinearCritic(Tensor);

impl Critic for LinearCritic {
    fn logits(&self, x: &Tensor) -> lesion_forge::Result<Tensor> {
        let n = x.size()[0];
        let s = x.flatten(1, -1).matmul(&self.0.view([-1, 1]));
        Ok(Tensor::cat(&[s, Tensor::zeros([n, 3], (x.kind(), Device::Cpu))], 1))
    }
}

struct TinyNet(Tensor, Tensor);

impl Critic for TinyNet {
    fn logits(&self, x: &Tensor) -> lesion_forge::Result<Tensor> {
        Ok(x.flatten(1, -1).matmul(&self.0).tanh().matmul(&self.1))
    }
}

fn gradient_penalty_checks() -> Outcome {
    let cfg = PenaltyConfig::default();
    let mut worst_abs: f64 = 0.0;
    for (s, scale) in [(1u64, 0.2), (2, 0.9), (3, 1.7), (4, 3.0)] {
        let w = Init::new(s).normal("w", &[16], 1.0).to_kind(Kind::Double);
        let w = &w / w.norm() * scale;
        let x = Init::new(s + 10).normal("x", &[5, 1, 4, 4], 1.0).to_kind(Kind::Double);
        let p = gradient_penalty(&LinearCritic(w.shallow_clone()), &x, &mut seed::rng(s), cfg)
            .map_err(|e| e.to_string())?
            .double_value(&[]);
        let oracle = 10.0 * (w.norm().double_value(&[]) - 1.0).powi(2);
        worst_abs = worst_abs.max((p - oracle).abs());
    }
    ensure(worst_abs < 1e-6, || format!("linear case off by {worst_abs:e}"))?;

    let w1 = Init::new(31).normal("w1", &[16, 5], 0.6).to_kind(Kind::Double);
    let w2 = Init::new(32).normal("w2", &[5, 4], 0.6).to_kind(Kind::Double);
    let x = Init::new(33).normal("x", &[4, 1, 4, 4], 1.0).to_kind(Kind::Double);
    let penalty = |a: &Tensor, b: &Tensor| {
        gradient_penalty(&TinyNet(a.shallow_clone(), b.shallow_clone()), &x, &mut seed::rng(5), cfg).unwrap()
    };
    let a = w1.copy().set_requires_grad(true);
    let b = w2.copy().set_requires_grad(true);
    penalty(&a, &b).backward();
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for (which, grad) in [(0, a.grad()), (1, b.grad())] {
        for i in 0..grad.numel() as i64 {
            let bump = |d: f64| {
                let (p1, p2) = (w1.copy(), w2.copy());
                let t = if which == 0 { &p1 } else { &p2 };
                let _ = t.view([-1]).get(i).g_add_scalar_(d);
                penalty(&p1, &p2).double_value(&[])
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = grad.view([-1]).double_value(&[i]);
            worst_rel = worst_rel.max((fd - an).abs() / an.abs().max(1e-4));
        }
    }
    ensure(worst_rel < 1e-3, || format!("finite differences off by {worst_rel:e} relative"))?;
    Ok(format!("linear max error {worst_abs:.1e}, finite-difference max relative error {worst_rel:.1e}"))
}

fn random_patch(size: usize, s: u64) -> ImagePatch {
    let t = Init::new(s).normal("patch", &[size as i64, size as i64], 0.5).clamp(-1.0, 1.0);
    ImagePatch {
        pixels: tensor_to_array(&t).unwrap(),
        label_class: LabelClass::Normal,
        provenance: Provenance::Real,
        source_id: format!("rand-{s}"),
        origin: (0, 0),
    }
}

fn progressive_growing() -> Outcome {
    ensure(fade_weight(0, 3000) == 0.0, || "fade_weight(0) != 0".into())?;
    ensure(fade_weight(3000, 3000) == 1.0, || "fade_weight(3000) != 1".into())?;
    let spec = NetworkSpec::desk();
    let mut g = Generator::new(&spec, 32).map_err(|e| e.to_string())?;
    let x64 = array_to_batch(&random_patch(64, 41).pixels);
    let small = NoiseDraw::draw(g.blocks(), &mut seed::rng(42));
    let pre = g.forward(&downsample(&x64, 32), std::slice::from_ref(&small), false).map_err(|e| e.to_string())?;
    g.grow(64).map_err(|e| e.to_string())?;
    ensure(g.alpha == 0.0, || format!("alpha after growth {}", g.alpha))?;
    let mut noise = small.clone();
    noise.encoder.push(0.4);
    noise.decoder.push(-0.6);
    let post = g.forward(&x64, &[noise], false).map_err(|e| e.to_string())?;
    let diff = (upsample(&pre.lesion, 2) - &post.lesion).abs().max().double_value(&[]);
    ensure(diff < 1e-6, || format!("blend at alpha 0 differs by {diff:e}"))?;
    Ok(format!("fade endpoints exact, alpha-0 blend max difference {diff:.1e}"))
}

fn architecture_invariants() -> Outcome {
    let spec = NetworkSpec::default();
    let res = spec.input_resolution;
    let g = Generator::new(&spec, res).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(60);
    for s in 0..100 {
        let noise = NoiseDraw::draw(g.blocks(), &mut rng);
        let t = generate_triplet(&g, &random_patch(res, 600 + s), &noise).map_err(|e| e.to_string())?;
        t.check(spec.border_crop).map_err(|e| format!("input {s}: {e}"))?;
    }

    let out_layer = format!("g.to{res}");
    tch::no_grad(|| {
        for suffix in ["weight", "bias"] {
            let _ = g.params.get(&format!("{out_layer}.{suffix}")).unwrap().shallow_clone().fill_(0.0);
        }
    });
    let base = random_patch(res, 61);
    let t = generate_triplet(&g, &base, &NoiseDraw::draw(g.blocks(), &mut rng)).map_err(|e| e.to_string())?;
    ensure(t.lesion.iter().all(|&v| v == 0.0) && t.combined == base.pixels, || "zero lesion is not the identity".into())?;

    let mut store = ParamStore::new();
    let attn = {
        let mut b = LayerBuilder::new(&mut store, Init::new(62), false);
        SelfAttention::new(&mut b, "attn", 32)
    };
    let mut row_err: f64 = 0.0;
    for s in 0..5 {
        let x = Init::new(70 + s).normal("x", &[2, 32, 8, 8], 2.0);
        let a = attn.attention_weights(&x, false);
        row_err = row_err.max((a.sum_dim_intlist(-1, false, Kind::Float) - 1.0).abs().max().double_value(&[]));
    }
    ensure(row_err < 1e-5, || format!("attention rows off by {row_err:e}"))?;

    // 20 iterations resolve a separated top singular value; near-degenerate pairs need more
    let top_after = |w: &Tensor, u: Tensor, iterations: usize| {
        let mut out = spectral_normalize(w, &PowerState::new(u));
        for _ in 1..iterations {
            out = spectral_normalize(w, &out.state);
        }
        let (_, sv, _) = out.weight.detach().reshape([16, -1]).svd(true, true);
        sv.double_value(&[0])
    };
    let (mut separated, mut worst, mut worst_long) = (0, 0.0f64, 0.0f64);
    for s in 0..50 {
        let w = Init::new(80 + s).normal("w", &[16, 8, 3, 3], 1.0);
        let u = Init::new(200 + s).normal("u", &[16], 1.0);
        let (_, sv, _) = w.reshape([16, -1]).svd(true, true);
        if sv.double_value(&[1]) / sv.double_value(&[0]) <= 0.9 {
            separated += 1;
            worst = worst.max(top_after(&w, u.copy(), 20));
        }
        worst_long = worst_long.max(top_after(&w, u, 1000));
    }
    ensure(separated > 0 && worst <= 1.01, || format!("sigma after 20 iterations {worst}"))?;
    ensure(worst_long <= 1.01, || format!("sigma after 1000 iterations {worst_long}"))?;
    Ok(format!(
        "100 borders zero, identity bitwise, attention row error {row_err:.1e}, \
         sigma {worst:.4} after 20 iterations on {separated}/50 weights with gap ratio <= 0.9, \
         {worst_long:.4} after 1000 on all"
    ))
}

fn flood_fill(mask: &Array2<bool>, diag: bool) -> Array2<i32> {
    let (h, w) = mask.dim();
    let mut comp = Array2::from_elem((h, w), -1);
    let mut next = 0;
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || comp[[sy, sx]] >= 0 {
                continue;
            }
            let mut stack = vec![(sy as i64, sx as i64)];
            while let Some((y, x)) = stack.pop() {
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let (uy, ux) = (y as usize, x as usize);
                if !mask[[uy, ux]] || comp[[uy, ux]] >= 0 {
                    continue;
                }
                comp[[uy, ux]] = next;
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if (dy != 0 || dx != 0) && (diag || dy == 0 || dx == 0) {
                            stack.push((y + dy, x + dx));
                        }
                    }
                }
            }
            next += 1;
        }
    }
    comp
}

fn blob(a: &mut Array2<f32>, x0: usize, y0: usize, w: usize, h: usize) {
    a.slice_mut(ndarray::s![y0..y0 + h, x0..x0 + w]).fill(0.5);
}

fn postprocessing_oracles() -> Outcome {
    let mut rng = seed::rng(700);
    for i in 0..1000 {
        let density = 0.3 + 0.15 * (i % 3) as f64;
        let mask = Array2::from_shape_fn((32, 32), |_| rng.gen_bool(density));
        for (conn, diag) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let oracle = flood_fill(&mask, diag);
            let mut sizes = BTreeMap::<i32, usize>::new();
            for &c in oracle.iter().filter(|&&c| c >= 0) {
                *sizes.entry(c).or_default() += 1;
            }
            let got = largest_component(&mask, conn);
            let ok = match (&got, sizes.values().max()) {
                (None, None) => true,
                (Some(m), Some(&best)) => {
                    let id = oracle[m.indexed_iter().find(|(_, &b)| b).unwrap().0];
                    sizes[&id] == best && m.indexed_iter().all(|(p, &b)| b == (oracle[p] == id))
                }
                _ => false,
            };
            ensure(ok, || format!("mask {i} ({conn:?}) disagrees with flood fill"))?;
        }
    }

    let cfg = PostprocessConfig::default();
    let mut small = Array2::zeros((256, 256));
    blob(&mut small, 10, 10, 100, 60);
    let mut large = Array2::zeros((256, 256));
    blob(&mut large, 10, 10, 100, 70);
    ensure(extract_lesion_mask(&small, &cfg).is_err(), || "6000 px blob accepted".into())?;
    ensure(extract_lesion_mask(&large, &cfg).is_ok(), || "7000 px blob rejected".into())?;

    let mut point = Array2::from_elem((41, 41), false);
    point[[20, 20]] = true;
    let disk = dilate_disk(&point, 5);
    let exact = disk.indexed_iter().all(|((y, x), &v)| {
        let (dy, dx) = (y as f64 - 20.0, x as f64 - 20.0);
        v == (dy * dy + dx * dx <= 25.0)
    });
    ensure(exact, || "dilated point is not the radius-5 disk".into())?;
    Ok("1000 masks match flood fill, area gate 6000/7000, disk exact".into())
}

fn schedules() -> Outcome {
    let got = [0, 5000, 10000].map(|s| mix_probability(s, 0.5, 0.9, 5000));
    ensure(got[0] == 0.5 && got[1] == 0.45 && got[2] == 0.405, || format!("mix probabilities {got:?}"))?;

    let patches = |s: u64, offset: f64| -> Vec<Array2<f32>> {
        (0..4)
            .map(|i| tensor_to_array(&(Init::new(s).normal(&format!("p{i}"), &[64, 64], 0.3) + offset).clamp(-1.0, 1.0)).unwrap())
            .collect()
    };
    let mut streams = GanStreams {
        real: Box::new(InMemoryStream::new("real", patches(1, 0.3)).unwrap()),
        source: Box::new(InMemoryStream::new("source", patches(2, -0.2)).unwrap()),
        benign: Box::new(InMemoryStream::new("benign", patches(3, 0.1)).unwrap()),
        normal: Box::new(InMemoryStream::new("normal", patches(4, -0.2)).unwrap()),
    };
    let cfg = GanTrainConfig { total_iterations: 4, fade_iterations: 2, batch_size: 2, ..GanTrainConfig::desk(GanTask::Mass) };
    let mut state = GanState::new(cfg).map_err(|e| e.to_string())?;
    train_gan(&mut state, &mut streams, None).map_err(|e| e.to_string())?;
    let u = &state.updates;
    ensure(u.len() == 12 && u[..3] == [Update::G, Update::G, Update::D], || format!("updates {u:?}"))?;
    for w in u.windows(3) {
        let gs = w.iter().filter(|&&x| x == Update::G).count();
        ensure(gs == 2, || format!("window {w:?}"))?;
    }
    Ok(format!("p = {got:?}; {} mass updates follow G,G,D", u.len()))
}

fn permutation_p(a: &[f64], b: &[f64], labels: &[u8], resamples: usize) -> f64 {
    let observed = (auc(a, labels).unwrap() - auc(b, labels).unwrap()).abs();
    let mut rng = seed::rng(2024);
    let mut hits = 0;
    for _ in 0..resamples {
        let (mut x, mut y) = (a.to_vec(), b.to_vec());
        for i in 0..a.len() {
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut x[i], &mut y[i]);
            }
        }
        if (auc(&x, labels).unwrap() - auc(&y, labels).unwrap()).abs() >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}

fn metrics_oracles() -> Outcome {
    let scores = [0.1, 0.4, 0.4, 0.35, 0.8, 0.62];
    for mask in 0u32..64 {
        let labels: Vec<u8> = (0..6).map(|i| ((mask >> i) & 1) as u8).collect();
        let (mut num, mut den) = (0u64, 0u64);
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 2;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let ex: Vec<ScoredExample> =
            (0..6).map(|i| ScoredExample::new(i.to_string(), labels[i], scores[i])).collect();
        let ok = match compute_auc(&ex) {
            Ok(v) => den > 0 && v == num as f64 / den as f64,
            Err(_) => den == 0,
        };
        ensure(ok, || format!("labeling {labels:?}"))?;
    }

    let a = [0.56, 0.95, 0.93, 1.0, 0.88, 0.8, 0.99, 0.64, 0.39, 0.3, 0.04, 0.94];
    let b = [0.37, 0.74, 0.73, 0.86, 1.0, 0.2, 1.0, 0.95, 0.57, 0.22, 0.48, 0.67];
    let labels = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let d = delong_p_value(&a, &b, &labels).map_err(|e| e.to_string())?.p_value;
    let oracle = permutation_p(&a, &b, &labels, 100_000);
    ensure((d - oracle).abs() <= 0.02, || format!("DeLong {d:.4} vs permutation {oracle:.4}"))?;
    let same = delong_p_value(&a, &a, &labels).map_err(|e| e.to_string())?.p_value;
    ensure(same == 1.0, || format!("p(a, a) = {same}"))?;
    Ok(format!("64 labelings exact, DeLong {d:.4} vs permutation {oracle:.4}, p(a, a) = 1"))
}

fn tsne_checks() -> Outcome {
    let mut rng = seed::rng(10);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..30 {
            x.push((0..10).map(|k| noise.sample(&mut rng) + if k == 0 { 12.0 * c as f64 } else { 0.0 }).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let perplexity = 10.0f64;
    let cfg = TsneConfig { perplexity, iterations: 500, seed: 11, ..TsneConfig::default() };
    let r = tsne_embed(&x, &cfg).map_err(|e| e.to_string())?;
    let worst = r.entropies.iter().map(|h| (h - perplexity.ln()).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-4, || format!("log-perplexity off by {worst:e}"))?;
    ensure(r.kl_final < r.kl_initial, || format!("KL {} -> {}", r.kl_initial, r.kl_final))?;
    let s = silhouette_score(&r.coords, &labels);
    ensure(s > 0.5, || format!("silhouette {s}"))?;
    Ok(format!("log-perplexity error {worst:.1e}, KL {:.3} -> {:.3}, silhouette {s:.3}", r.kl_initial, r.kl_final))
}

fn determinism() -> Outcome {
    let plan = ExperimentPlan::smoke();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        run_plan(&plan, d.path())?;
    }
    let run = |i: usize| dirs[i].path().join("run");
    let table = |i: usize| fs::read(run(i).join("results").join(TABLE_FILE)).map_err(|e| e.to_string());
    ensure(table(0)? == table(1)?, || "table1.csv differs".into())?;
    let stages: BTreeSet<String> = RunManifest::load(run(0).join(RUN_MANIFEST))
        .map_err(|e| e.to_string())?
        .stages
        .into_iter()
        .map(|s| s.name)
        .collect();
    for stage in ["phantom", "patches", "synthetic"] {
        let h = |i: usize| run_corpus_hash(run(i), stage).map_err(|e| e.to_string());
        ensure(h(0)? == h(1)?, || format!("{stage} corpus hash differs"))?;
    }
    Ok(format!("table1.csv and corpus hashes identical over {} stages", stages.len()))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (2, "desk-scale augmentation effect", desk_sweep),
        (3, "loss arithmetic", loss_arithmetic),
        (4, "gradient penalty", gradient_penalty_checks),
        (5, "progressive growing", progressive_growing),
        (6, "architecture invariants", architecture_invariants),
        (7, "post-processing oracles", postprocessing_oracles),
        (8, "schedules", schedules),
        (9, "metrics oracles", metrics_oracles),
        (10, "t-SNE", tsne_checks),
        (11, "end-to-end determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
