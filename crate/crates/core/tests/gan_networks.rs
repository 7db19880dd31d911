use lesion_forge::gan::networks::{array_to_batch, downsample, tensor_to_array, upsample};
use lesion_forge::gan::{discriminate, generate_triplet, instantiate_networks, Discriminator, Generator, NetworkSpec, NoiseDraw};
use lesion_forge::nn::Init;
use lesion_forge::patch::ImagePatch;
use lesion_forge::seed;
use lesion_forge::types::{LabelClass, Provenance};
use ndarray::Array2;
use tch::{Kind, Tensor};

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

fn set_param(g: &Generator, name: &str, value: f64) {
    tch::no_grad(|| {
        let _ = g.params.get(name).unwrap().shallow_clone().fill_(value);
    });
}

#[test]
fn full_size_encoder_resolutions() {
    let spec = NetworkSpec::default();
    let g = Generator::new(&spec, 256).unwrap();
    assert_eq!(g.encoder_resolutions(), vec![128, 64, 32, 16, 8, 4]);
    let g128 = Generator::new(&spec, 128).unwrap();
    assert_eq!(g128.encoder_resolutions(), vec![64, 32, 16, 8, 4]);
    // same bottleneck at both stages
    for name in ["g.bneck.squeeze.weight", "g.bneck.expand.weight", "g.bneck.grow1.weight"] {
        assert_eq!(g.params.get(name).unwrap().size(), g128.params.get(name).unwrap().size());
    }
    assert_eq!(g.params.get("g.bneck.squeeze.weight").unwrap().size(), vec![4, 2048, 4, 4]);
}

#[test]
fn parameter_count_is_a_function_of_spec() {
    let spec = NetworkSpec::desk();
    let (g1, d1) = instantiate_networks(&spec).unwrap();
    let (g2, d2) = instantiate_networks(&spec).unwrap();
    assert_eq!(g1.params.num_trainable(), g2.params.num_trainable());
    assert_eq!(d1.params.num_trainable(), d2.params.num_trainable());
    for (name, t) in g1.params.iter() {
        assert!(t.equal(g2.params.get(name).unwrap()), "{name}");
    }
}

#[test]
fn zero_network_output_is_residual_identity() {
    let spec = NetworkSpec::desk();
    let g = Generator::new(&spec, 64).unwrap();
    set_param(&g, "g.to64.weight", 0.0);
    set_param(&g, "g.to64.bias", 0.0);
    let base = random_patch(64, 1);
    let noise = NoiseDraw::draw(g.blocks(), &mut seed::rng(2));
    let t = generate_triplet(&g, &base, &noise).unwrap();
    assert!(t.lesion.iter().all(|&v| v == 0.0));
    assert_eq!(t.combined, base.pixels);
}

#[test]
fn combined_channel_clips_the_residual_sum() {
    let spec = NetworkSpec::desk();
    let g = Generator::new(&spec, 64).unwrap();
    set_param(&g, "g.to64.weight", 0.0);
    set_param(&g, "g.to64.bias", 0.5);
    let mut base = random_patch(64, 3);
    base.pixels.fill(0.9);
    let t = generate_triplet(&g, &base, &NoiseDraw::zeros(g.blocks())).unwrap();
    assert_eq!(t.lesion[[32, 32]], 0.5);
    assert_eq!(t.combined[[32, 32]], 1.0);
    t.check(spec.border_crop).unwrap();
}

#[test]
fn lesion_border_is_zero_and_triplet_is_consistent() {
    let spec = NetworkSpec::desk();
    let g = Generator::new(&spec, 64).unwrap();
    let mut rng = seed::rng(4);
    for s in 0..10 {
        let noise = NoiseDraw::draw(g.blocks(), &mut rng);
        let t = generate_triplet(&g, &random_patch(64, 100 + s), &noise).unwrap();
        t.check(spec.border_crop).unwrap();
        assert!(t.lesion.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn triplet_is_deterministic() {
    let g = Generator::new(&NetworkSpec::desk(), 64).unwrap();
    let base = random_patch(64, 5);
    let noise = NoiseDraw::draw(g.blocks(), &mut seed::rng(6));
    assert_eq!(
        generate_triplet(&g, &base, &noise).unwrap(),
        generate_triplet(&g, &base, &noise).unwrap()
    );
    let other = NoiseDraw::draw(g.blocks(), &mut seed::rng(7));
    assert_ne!(
        generate_triplet(&g, &base, &noise).unwrap().lesion,
        generate_triplet(&g, &base, &other).unwrap().lesion
    );
}

#[test]
fn noise_outside_unit_interval_is_rejected() {
    let g = Generator::new(&NetworkSpec::desk(), 64).unwrap();
    let mut noise = NoiseDraw::zeros(g.blocks());
    noise.decoder[0] = 1.5;
    assert!(generate_triplet(&g, &random_patch(64, 1), &noise).is_err());
}

#[test]
fn discriminator_contract() {
    let spec = NetworkSpec::desk();
    let d = Discriminator::new(&spec, 64).unwrap();
    let p = random_patch(64, 8).pixels;
    let a = discriminate(&d, &p).unwrap();
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, discriminate(&d, &p).unwrap());
    let shifted = p.mapv(|v| v + 1e-7);
    let b = discriminate(&d, &shifted).unwrap();
    for i in 0..4 {
        assert!((a[i] - b[i]).abs() < 1e-3);
    }
}

#[test]
fn gradients_reach_every_generator_block() {
    let spec = NetworkSpec::desk();
    let g = Generator::new(&spec, 64).unwrap();
    let x = array_to_batch(&random_patch(64, 9).pixels);
    let noise = vec![NoiseDraw::draw(g.blocks(), &mut seed::rng(10))];
    let out = g.forward(&x, &noise, true).unwrap();
    out.combined.mean(Kind::Float).backward();
    let mut nonzero_by_block = std::collections::BTreeMap::<String, bool>::new();
    for (name, t) in g.params.trainable() {
        let grad = t.grad();
        assert!(grad.defined(), "{name} has no gradient");
        assert!(bool::try_from(grad.isfinite().all()).unwrap(), "{name}");
        let block = name.rsplit_once('.').unwrap().0.split('.').take(2).collect::<Vec<_>>().join(".");
        let nz = grad.abs().sum(Kind::Float).double_value(&[]) > 0.0;
        *nonzero_by_block.entry(block).or_default() |= nz;
    }
    for (block, nz) in nonzero_by_block {
        assert!(nz, "no gradient signal in {block}");
    }
}

#[test]
fn growing_preserves_weights_and_starts_as_upsampled_output() {
    let spec = NetworkSpec::desk();
    let mut g = Generator::new(&spec, 32).unwrap();
    let before = g.params.snapshot();
    let x64 = array_to_batch(&random_patch(64, 11).pixels);
    let x32 = downsample(&x64, 32);
    let noise_small = NoiseDraw::draw(g.blocks(), &mut seed::rng(12));
    let pre = g.forward(&x32, std::slice::from_ref(&noise_small), false).unwrap();

    g.grow(64).unwrap();
    assert_eq!(g.alpha, 0.0);
    for (name, t) in &before {
        assert!(t.equal(g.params.get(name).unwrap()), "{name} changed");
    }
    let mut noise = noise_small.clone();
    noise.encoder.push(0.3);
    noise.decoder.push(-0.7);
    let post = g.forward(&x64, &[noise], false).unwrap();
    let diff = (upsample(&pre.lesion, 2) - &post.lesion).abs().max().double_value(&[]);
    assert!(diff < 1e-6, "{diff}");

    assert!(g.grow(256).is_err());
    let mut g2 = Generator::new(&spec, 32).unwrap();
    assert!(g2.grow(128).is_err());
}

#[test]
fn blend_is_continuous_in_alpha() {
    let spec = NetworkSpec::desk();
    let mut g = Generator::new(&spec, 32).unwrap();
    g.grow(64).unwrap();
    let x = array_to_batch(&random_patch(64, 13).pixels);
    let noise = vec![NoiseDraw::draw(g.blocks(), &mut seed::rng(14))];
    for a in [0.0, 0.25, 0.5, 0.999] {
        g.alpha = a;
        let lo = g.forward(&x, &noise, false).unwrap().combined;
        g.alpha = a + 1e-3;
        let hi = g.forward(&x, &noise, false).unwrap().combined;
        let jump = (hi - lo).abs().max().double_value(&[]);
        assert!(jump < 1e-2, "alpha {a}: {jump}");
    }
}

#[test]
fn discriminator_grows_too() {
    let spec = NetworkSpec::desk();
    let mut d = Discriminator::new(&spec, 32).unwrap();
    let before = d.params.snapshot();
    d.grow(64).unwrap();
    for (name, t) in &before {
        assert!(t.equal(d.params.get(name).unwrap()), "{name} changed");
    }
    let p: Array2<f32> = random_patch(64, 15).pixels;
    let logits = discriminate(&d, &p).unwrap();
    assert!(logits.iter().all(|v| v.is_finite()));
    let x = Tensor::zeros([2, 1, 32, 32], (Kind::Float, tch::Device::Cpu));
    assert!(d.forward(&x, false).is_err());
}
