use lesion_forge::corpus::corpus_hash;
use lesion_forge::gan::{Generator, NetworkSpec, TripletPatch};
use lesion_forge::lesion::{
    build_synthetic_corpus, compose, dilate_disk, extract_lesion_mask, gaussian_blur, label_components,
    largest_component, refine_mask, remove_lesion_patch, render_strip, synthesize_patch, Connectivity,
    PostprocessConfig, Rejection, SynthesisCounts, SynthesisModel, SynthesisPlan,
};
use lesion_forge::patch::{ImagePatch, SamplerConfig};
use lesion_forge::phantom::FullImage;
use lesion_forge::seed;
use lesion_forge::types::{LabelClass, Provenance, Split};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Recursive-style flood fill with an explicit stack; returns the component id per pixel.
fn flood_fill_oracle(mask: &Array2<bool>, diag: bool) -> Array2<i32> {
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

fn random_mask(rng: &mut seed::Rng, n: usize, density: f64) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |_| rng.gen_bool(density))
}

#[test]
fn labeling_matches_flood_fill_on_random_masks() {
    let mut rng = seed::rng(77);
    for i in 0..1000 {
        let mask = random_mask(&mut rng, 32, 0.3 + 0.3 * (i % 3) as f64 / 2.0);
        for (conn, diag) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let (labels, areas) = label_components(&mask, conn);
            let oracle = flood_fill_oracle(&mask, diag);
            for ((y, x), &l) in labels.indexed_iter() {
                assert_eq!(l == 0, oracle[[y, x]] < 0);
            }
            // same partition: a bijection between label ids and oracle ids
            let mut map = std::collections::BTreeMap::new();
            for ((y, x), &l) in labels.indexed_iter() {
                if l > 0 {
                    assert_eq!(*map.entry(l).or_insert(oracle[[y, x]]), oracle[[y, x]]);
                }
            }
            let distinct: std::collections::BTreeSet<_> = map.values().collect();
            assert_eq!(distinct.len(), map.len());
            assert_eq!(areas.len() - 1, map.len());
            // largest component equals the oracle's largest
            let mut counts = std::collections::BTreeMap::<i32, usize>::new();
            for &c in oracle.iter().filter(|&&c| c >= 0) {
                *counts.entry(c).or_default() += 1;
            }
            if let Some(best) = largest_component(&mask, conn) {
                let size = best.iter().filter(|&&b| b).count();
                assert_eq!(size, *counts.values().max().unwrap());
                let id = oracle[best.indexed_iter().find(|(_, &b)| b).unwrap().0];
                assert!(best.indexed_iter().all(|(p, &b)| b == (oracle[p] == id)));
            } else {
                assert!(counts.is_empty());
            }
        }
    }
}

fn blob(mask: &mut Array2<f32>, x0: usize, y0: usize, w: usize, h: usize, v: f32) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            mask[[y, x]] = v;
        }
    }
}

#[test]
fn largest_blob_is_kept_and_area_gate_is_strict() {
    let cfg = PostprocessConfig::default();
    let mut l = Array2::zeros((256, 256));
    blob(&mut l, 10, 10, 100, 80, 0.5); // 8000
    blob(&mut l, 120, 100, 100, 70, 0.5); // 7000
    let m = extract_lesion_mask(&l, &cfg).unwrap();
    assert_eq!(m.iter().filter(|&&b| b).count(), 8000);
    assert!(m[[10, 10]] && !m[[100, 120]]);

    let mut small = Array2::zeros((256, 256));
    blob(&mut small, 10, 10, 100, 60, 0.5);
    assert_eq!(extract_lesion_mask(&small, &cfg), Err(Rejection::TooSmall { area: 6000 }));
    let mut ok = Array2::zeros((256, 256));
    blob(&mut ok, 10, 10, 100, 70, 0.5);
    assert!(extract_lesion_mask(&ok, &cfg).is_ok());

    // 6553 < 6553.6 <= 6554
    let mut edge = Array2::zeros((256, 256));
    blob(&mut edge, 0, 20, 256, 25, 0.5);
    blob(&mut edge, 0, 45, 153, 1, 0.5);
    assert_eq!(extract_lesion_mask(&edge, &cfg), Err(Rejection::TooSmall { area: 6553 }));
    edge[[46, 0]] = 0.5;
    assert!(extract_lesion_mask(&edge, &cfg).is_ok());

    assert_eq!(extract_lesion_mask(&Array2::zeros((256, 256)), &cfg), Err(Rejection::Empty));
    // exactly at the threshold does not count
    assert_eq!(extract_lesion_mask(&Array2::from_elem((256, 256), 0.1), &cfg), Err(Rejection::Empty));
}

#[test]
fn negative_threshold_selects_dark_regions() {
    let cfg = PostprocessConfig::removal();
    let mut l = Array2::zeros((256, 256));
    blob(&mut l, 20, 20, 100, 100, -0.3);
    blob(&mut l, 150, 150, 90, 90, 0.9);
    let m = extract_lesion_mask(&l, &cfg).unwrap();
    assert_eq!(m.iter().filter(|&&b| b).count(), 10_000);
    assert!(m[[50, 50]]);
}

#[test]
fn dilated_point_is_the_rasterized_disk() {
    let mut m = Array2::from_elem((41, 41), false);
    m[[20, 20]] = true;
    let d = dilate_disk(&m, 5);
    // brute-force rasterization: pixel centres within distance 5
    for ((y, x), &v) in d.indexed_iter() {
        let (dy, dx) = (y as f64 - 20.0, x as f64 - 20.0);
        assert_eq!(v, (dy * dy + dx * dx).sqrt() <= 5.0, "({x}, {y})");
    }
    assert_eq!(d.iter().filter(|&&b| b).count(), 81);
}

#[test]
fn empty_mask_refines_to_zero() {
    let soft = refine_mask(&Array2::from_elem((64, 64), false), &PostprocessConfig::default());
    assert!(soft.iter().all(|&v| v == 0.0));
}

#[test]
fn half_plane_feather_matches_1d_gaussian_cumulative() {
    let cfg = PostprocessConfig { border: 0, ..PostprocessConfig::default() };
    let mask = Array2::from_shape_fn((64, 128), |(_, x)| x >= 64);
    let soft = refine_mask(&mask, &cfg);
    // the dilated edge sits at column 59; the profile is the cumulative
    // sum of the sampled, truncated, normalized kernel
    let sigma = 10.0 / 3.0;
    let w: Vec<f64> = (-10..=10).map(|o: i32| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in 40..80 {
        let oracle: f64 = (-10..=10i32)
            .filter(|o| x + o >= 59)
            .map(|o| w[(o + 10) as usize] / total)
            .sum();
        assert!((soft[[32, x as usize]] as f64 - oracle).abs() < 1e-3, "x={x}");
    }
    assert!(soft.column(90).iter().skip(10).take(44).all(|&v| (v - 1.0).abs() < 1e-3));
}

#[test]
fn blur_of_constant_interior_is_identity() {
    let a = Array2::from_elem((40, 40), 1.0f32);
    let b = gaussian_blur(&a, 10);
    assert!((b[[20, 20]] - 1.0).abs() < 1e-6);
    assert!(b[[0, 0]] < 0.5);
}

fn triplet(base: f32, lesion: Array2<f32>) -> TripletPatch {
    let b = Array2::from_elem(lesion.dim(), base);
    let combined = (&b + &lesion).mapv(|v| v.clamp(-1.0, 1.0));
    TripletPatch { lesion, base: b, combined }
}

#[test]
fn compose_respects_the_soft_mask() {
    let mut l = Array2::from_elem((256, 256), 0.0f32);
    blob(&mut l, 60, 60, 120, 120, 0.7);
    let t = triplet(0.6, l);
    let cfg = PostprocessConfig::default();
    let mask = extract_lesion_mask(&t.lesion, &cfg).unwrap();
    let soft = refine_mask(&mask, &cfg);
    let out = compose(&t, &soft);
    for ((y, x), &s) in soft.indexed_iter() {
        if s == 0.0 {
            assert_eq!(out.combined[[y, x]].to_bits(), t.base[[y, x]].to_bits());
        }
        if s == 1.0 {
            assert_eq!(out.combined[[y, x]], (t.base[[y, x]] + t.lesion[[y, x]]).clamp(-1.0, 1.0));
        }
    }
    assert_eq!(out.combined[[120, 120]], 1.0);
}

#[test]
fn negative_lesion_arithmetic() {
    let mut l = Array2::from_elem((256, 256), 0.0f32);
    blob(&mut l, 60, 60, 120, 120, -0.3);
    let t = triplet(0.5, l);
    let cfg = PostprocessConfig::removal();
    let mask = extract_lesion_mask(&t.lesion, &cfg).unwrap();
    let out = compose(&t, &refine_mask(&mask, &cfg));
    assert!((out.combined[[120, 120]] - 0.2).abs() < 1e-6);
    let zero = compose(&triplet(0.5, Array2::zeros((256, 256))), &refine_mask(&mask, &cfg));
    assert!(zero.combined.iter().all(|&v| v == 0.5));
}

fn generator_with_bias(bias: f64) -> Generator {
    let g = Generator::new(&NetworkSpec::desk(), 64).unwrap();
    tch::no_grad(|| {
        let _ = g.params.get("g.to64.weight").unwrap().shallow_clone().fill_(0.0);
        let _ = g.params.get("g.to64.bias").unwrap().shallow_clone().fill_(bias);
    });
    g
}

fn normals() -> Vec<FullImage> {
    (0..3)
        .map(|i| FullImage {
            id: format!("normal-{i}"),
            pixels: Array2::from_shape_fn((160, 160), |(y, x)| 20_000 + ((x * 37 + y * 11 + i * 5) % 400) as u16),
            annotations: vec![],
            label_class: LabelClass::Normal,
            split: Split::Train,
            seed: i as u64,
            tissue_floor: Some(0),
        })
        .collect()
}

fn desk_cfg(removal: bool) -> PostprocessConfig {
    let base = if removal { PostprocessConfig::removal() } else { PostprocessConfig::default() };
    base.scaled_to(64)
}

#[test]
fn synthesis_is_deterministic_and_masked() {
    let g = generator_with_bias(0.4);
    let cfg = desk_cfg(false);
    assert_eq!((cfg.dilation_radius, cfg.feather_radius, cfg.border), (1, 3, 2));
    let s = SamplerConfig { patch_size: 64, max_offset: 32, ..SamplerConfig::default() };
    let a = synthesize_patch(&g, &normals(), &s, &cfg, LabelClass::MalignantMass, &mut seed::rng(5)).unwrap();
    let b = synthesize_patch(&g, &normals(), &s, &cfg, LabelClass::MalignantMass, &mut seed::rng(5)).unwrap();
    assert_eq!(a.patch, b.patch);
    assert_eq!(a.patch.provenance, Provenance::Synthetic);
    assert_eq!(a.patch.label_class, LabelClass::MalignantMass);
    for ((y, x), &m) in a.soft_mask.indexed_iter() {
        assert!((0.0..=1.0).contains(&m));
        if m == 0.0 {
            assert_eq!(a.patch.pixels[[y, x]].to_bits(), a.triplet.base[[y, x]].to_bits());
        }
    }
}

#[test]
fn synthesis_failure_reports_counts() {
    let g = generator_with_bias(-0.4);
    let cfg = PostprocessConfig { max_regen_attempts: 3, ..desk_cfg(false) };
    let s = SamplerConfig { patch_size: 64, max_offset: 32, ..SamplerConfig::default() };
    let err = synthesize_patch(&g, &normals(), &s, &cfg, LabelClass::MalignantMass, &mut seed::rng(1)).unwrap_err();
    assert!(matches!(err, lesion_forge::Error::SynthesisFailure { attempts: 3, rejected: 3 }), "{err}");
}

#[test]
fn removal_darkens_inside_the_mask() {
    let g = generator_with_bias(-0.4);
    let input = ImagePatch {
        pixels: Array2::from_shape_fn((64, 64), |(y, x)| ((x + y) as f32 / 128.0) - 0.2),
        label_class: LabelClass::MalignantMass,
        provenance: Provenance::Real,
        source_id: "p".into(),
        origin: (0, 0),
    };
    let cfg = desk_cfg(true);
    let a = remove_lesion_patch(&g, &input, &cfg, &mut seed::rng(3)).unwrap();
    let b = remove_lesion_patch(&g, &input, &cfg, &mut seed::rng(3)).unwrap();
    assert_eq!(a.patch, b.patch);
    assert_eq!(a.patch.label_class, LabelClass::Normal);
    let (mut sum_in, mut sum_out, mut n) = (0.0, 0.0, 0);
    for ((y, x), &m) in a.mask.indexed_iter() {
        if m {
            sum_in += input.pixels[[y, x]];
            sum_out += a.patch.pixels[[y, x]];
            n += 1;
        }
    }
    assert!(n > 0 && sum_out <= sum_in);
}

#[test]
fn synthetic_corpus_histogram_and_determinism() {
    let model = |bias| SynthesisModel { generator: generator_with_bias(bias), checkpoint_hash: format!("hash{bias}") };
    let (mass, calc, removal) = (model(0.4), model(0.3), model(-0.4));
    let positives = vec![ImagePatch {
        pixels: Array2::from_elem((64, 64), 0.3),
        label_class: LabelClass::MalignantMass,
        provenance: Provenance::Real,
        source_id: "pos".into(),
        origin: (0, 0),
    }];
    let plan = SynthesisPlan {
        counts: SynthesisCounts { mass: 3, calc: 2, normal: 2 },
        sampler: SamplerConfig { patch_size: 64, max_offset: 32, ..SamplerConfig::default() },
        mass: desk_cfg(false),
        calc: desk_cfg(false),
        removal: desk_cfg(true),
        seed: 9,
        ..SynthesisPlan::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut hashes = vec![];
    for d in &dirs {
        let out = build_synthetic_corpus(&plan, Some(&mass), Some(&calc), Some(&removal), &normals(), &positives, d.path())
            .unwrap();
        assert_eq!(out.corpus.class_histogram(), [2, 0, 3, 2]);
        assert!(out.corpus.records.iter().all(|r| r.provenance == Provenance::Synthetic && r.generator.is_some()));
        assert_eq!(out.stats["mass"].failure_rate(), 0.0);
        hashes.push(corpus_hash(d.path()).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);

    let empty = tempfile::tempdir().unwrap();
    let plan0 = SynthesisPlan { counts: SynthesisCounts::default(), ..plan };
    let out = build_synthetic_corpus(&plan0, None, None, None, &[], &[], empty.path()).unwrap();
    assert!(out.corpus.is_empty());
    assert!(lesion_forge::corpus::Corpus::open(empty.path()).unwrap().is_empty());
}

#[test]
fn strip_has_three_columns_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let t = triplet(0.0, Array2::from_elem((16, 16), 0.5));
    let path = dir.path().join("strip.png");
    render_strip(&[t.clone(), t], &path).unwrap();
    let img = image::open(&path).unwrap();
    assert_eq!((img.width(), img.height()), (3 * 16 + 4, 2 * 16 + 2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accepted_masks_meet_the_area_rule_and_soft_masks_vanish_on_the_border(
        s in any::<u64>(), density in 0.3f64..0.9
    ) {
        let mut rng = seed::rng(s);
        let mut lesion = Array2::from_shape_fn((64, 64), |_| if rng.gen_bool(density) { 0.5f32 } else { 0.0 });
        for ((y, x), v) in lesion.indexed_iter_mut() {
            if y < 4 || x < 4 || y >= 60 || x >= 60 {
                *v = 0.0;
            }
        }
        let cfg = PostprocessConfig { border: 4, ..PostprocessConfig::default().scaled_to(64) };
        if let Ok(mask) = extract_lesion_mask(&lesion, &cfg) {
            let area = mask.iter().filter(|&&b| b).count();
            prop_assert!(area >= 410); // ceil(0.1 * 4096)
            let soft = refine_mask(&mask, &cfg);
            for ((y, x), &v) in soft.indexed_iter() {
                prop_assert!((0.0..=1.0).contains(&v));
                if y < 4 || x < 4 || y >= 60 || x >= 60 {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
}
