//! U-net generator and pooling discriminator with progressive growing.
//!
//! Layers are named by the resolution they operate at (`g.enc128`,
//! `d.from64`, ...), so a network built at a low resolution and grown
//! later has the same parameter names, and the same initial values, as one
//! built at full size.

use std::collections::BTreeMap;

use ndarray::Array2;
use tch::{Kind, Tensor};

use super::spec::{NetworkSpec, NoiseDraw, TripletPatch};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Init, LayerBuilder, Linear, ParamStore, SelfAttention};
use crate::patch::ImagePatch;
use crate::seed;

/// Output of one generator pass, all `(N, 1, R, R)`.
#[derive(Debug)]
pub struct GeneratorOutput {
    /// Network output before border zeroing and clipping.
    pub raw: Tensor,
    pub lesion: Tensor,
    pub combined: Tensor,
}

#[derive(Debug)]
pub struct Generator {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub active_resolution: usize,
    /// Blend weight of the newest top block (1 when not fading).
    pub alpha: f64,
    encoder: BTreeMap<usize, Conv2d>,
    from_image: BTreeMap<usize, Conv2d>,
    attention: Option<SelfAttention>,
    decoder_attention: Option<SelfAttention>,
    bottleneck_grow: Vec<Conv2d>,
    squeeze: Conv2d,
    expand: ConvTranspose2d,
    decoder: BTreeMap<usize, (Conv2d, Conv2d)>,
    to_image: BTreeMap<usize, Conv2d>,
}

fn init_for(spec: &NetworkSpec, net: &str) -> Init {
    Init::new(seed::mix(spec.init_seed, &[seed::tag(net)]))
}

fn check_start(spec: &NetworkSpec, resolution: usize) -> Result<()> {
    spec.validate()?;
    if !resolution.is_power_of_two() || resolution < 8 || resolution > spec.input_resolution {
        return Err(Error::Growth(format!(
            "start resolution {resolution} must be a power of two in [8, {}]",
            spec.input_resolution
        )));
    }
    Ok(())
}

fn noise_channel(noise: &[NoiseDraw], pick: impl Fn(&NoiseDraw) -> f32, like: &Tensor) -> Tensor {
    let (_, _, h, w) = like.size4().expect("NCHW");
    let values: Vec<f32> = noise.iter().map(pick).collect();
    Tensor::from_slice(&values)
        .view([values.len() as i64, 1, 1, 1])
        .expand([values.len() as i64, 1, h, w], false)
}

/// 1 inside, 0 on the outer `border` pixels.
fn border_mask(res: usize, border: usize) -> Tensor {
    let r = res as i64;
    let b = border as i64;
    let mask = Tensor::zeros([1, 1, r, r], (Kind::Float, tch::Device::Cpu));
    if 2 * b < r {
        let _ = mask.narrow(2, b, r - 2 * b).narrow(3, b, r - 2 * b).fill_(1.0);
    }
    mask
}

pub fn downsample(x: &Tensor, res: usize) -> Tensor {
    let (_, _, h, _) = x.size4().expect("NCHW");
    if h as usize == res {
        return x.shallow_clone();
    }
    let k = h / res as i64;
    x.avg_pool2d([k, k], [k, k], [0, 0], false, true, None::<i64>)
}

pub fn upsample(x: &Tensor, factor: i64) -> Tensor {
    let (_, _, h, w) = x.size4().expect("NCHW");
    x.upsample_nearest2d([h * factor, w * factor], None::<f64>, None::<f64>)
}

impl Generator {
    /// Builds the generator active at `resolution` (the full size, or an
    /// earlier progressive-growing stage).
    pub fn new(spec: &NetworkSpec, resolution: usize) -> Result<Self> {
        check_start(spec, resolution)?;
        let mut params = ParamStore::new();
        let init = init_for(spec, "generator");
        let r_full = spec.input_resolution;
        let (attention, bottleneck_grow, squeeze, expand) = {
            let mut b = LayerBuilder::new(&mut params, init, spec.generator_spectral_norm);
            let attn_res = spec.attention_resolution;
            let attention = (attn_res * 2 <= resolution)
                .then(|| SelfAttention::new(&mut b, "g.attn", spec.filters_at(attn_res) as i64));
            let mut grow = Vec::new();
            let mut c = spec.filters_at(4) as i64;
            let mut i = 0;
            while (c as usize) < spec.bottleneck_pre_channels {
                grow.push(b.conv2d(&format!("g.bneck.grow{i}"), c, 2 * c, 3, 1, 1));
                c *= 2;
                i += 1;
            }
            let squeeze = b.conv2d("g.bneck.squeeze", c, spec.bottleneck_channels as i64, 4, 1, 0);
            let expand = b.conv_transpose2d(
                "g.bneck.expand",
                spec.bottleneck_channels as i64,
                spec.filters_at(4) as i64,
                4,
                1,
            );
            (attention, grow, squeeze, expand)
        };
        let mut g = Self {
            spec: spec.clone(),
            params,
            active_resolution: resolution,
            alpha: 1.0,
            encoder: BTreeMap::new(),
            from_image: BTreeMap::new(),
            attention,
            decoder_attention: None,
            bottleneck_grow,
            squeeze,
            expand,
            decoder: BTreeMap::new(),
            to_image: BTreeMap::new(),
        };
        let mut r = 8;
        while r <= resolution {
            g.add_encoder_block(r);
            g.add_decoder_block(r / 2);
            r *= 2;
        }
        if resolution < r_full {
            g.add_from_image(resolution);
        }
        g.add_to_image(resolution);
        g.maybe_add_decoder_attention();
        Ok(g)
    }

    fn builder(&mut self) -> LayerBuilder<'_> {
        let init = init_for(&self.spec, "generator");
        LayerBuilder::new(&mut self.params, init, self.spec.generator_spectral_norm)
    }

    fn add_encoder_block(&mut self, r_in: usize) {
        let c_in = if r_in == self.spec.input_resolution { 1 } else { self.spec.filters_at(r_in) };
        let c_out = self.spec.filters_at(r_in / 2) as i64;
        let conv = self.builder().conv2d(&format!("g.enc{r_in}"), c_in as i64 + 1, c_out, 3, 2, 1);
        self.encoder.insert(r_in, conv);
    }

    fn add_decoder_block(&mut self, r_in: usize) {
        let c_in = 2 * self.spec.filters_at(r_in) as i64 + 1;
        let c_out = self.spec.decoder_filters_at(r_in * 2) as i64;
        let mut b = self.builder();
        let c1 = b.conv2d(&format!("g.dec{r_in}.conv1"), c_in, c_out, 3, 1, 1);
        let c2 = b.conv2d(&format!("g.dec{r_in}.conv2"), c_out, c_out, 3, 1, 1);
        self.decoder.insert(r_in, (c1, c2));
    }

    fn add_from_image(&mut self, res: usize) {
        let c = self.spec.filters_at(res) as i64;
        let conv = self.builder().conv2d(&format!("g.from{res}"), 1, c, 1, 1, 0);
        self.from_image.insert(res, conv);
    }

    fn add_to_image(&mut self, res: usize) {
        let c = self.spec.decoder_filters_at(res) as i64;
        let conv = self.builder().conv2d(&format!("g.to{res}"), c, 1, 1, 1, 0);
        self.to_image.insert(res, conv);
    }

    fn maybe_add_decoder_attention(&mut self) {
        let ra = self.spec.attention_resolution;
        if self.spec.decoder_attention && self.decoder_attention.is_none() && ra <= self.active_resolution / 2 {
            let c = self.spec.decoder_filters_at(ra) as i64;
            let mut b = self.builder();
            self.decoder_attention = Some(SelfAttention::new(&mut b, "g.dec_attn", c));
        }
    }

    fn maybe_add_attention(&mut self) {
        let ra = self.spec.attention_resolution;
        if self.attention.is_none() && ra * 2 <= self.active_resolution {
            let c = self.spec.filters_at(ra) as i64;
            let mut b = self.builder();
            self.attention = Some(SelfAttention::new(&mut b, "g.attn", c));
        }
    }

    /// Spatial sizes of the encoder feature maps, top to bottom.
    pub fn encoder_resolutions(&self) -> Vec<usize> {
        self.encoder
            .keys()
            .rev()
            .filter(|&&r| r <= self.active_resolution)
            .map(|r| r / 2)
            .collect()
    }

    /// Number of encoder (and decoder) blocks at the active resolution.
    pub fn blocks(&self) -> usize {
        NetworkSpec::blocks_for(self.active_resolution)
    }

    pub fn fading(&self) -> bool {
        self.alpha < 1.0
    }

    /// Appends the next-resolution blocks; the new path starts with weight 0.
    pub fn grow(&mut self, next_resolution: usize) -> Result<()> {
        let cur = self.active_resolution;
        if next_resolution != cur * 2 || next_resolution > self.spec.input_resolution {
            return Err(Error::Growth(format!(
                "cannot grow from {cur} to {next_resolution} (max {})",
                self.spec.input_resolution
            )));
        }
        self.add_encoder_block(next_resolution);
        self.add_decoder_block(cur);
        if !self.from_image.contains_key(&cur) {
            self.add_from_image(cur);
        }
        if next_resolution < self.spec.input_resolution {
            self.add_from_image(next_resolution);
        }
        self.add_to_image(next_resolution);
        self.active_resolution = next_resolution;
        self.alpha = 0.0;
        self.maybe_add_attention();
        self.maybe_add_decoder_attention();
        Ok(())
    }

    fn lrelu(&self, x: &Tensor) -> Tensor {
        leaky(x, self.spec.leaky_slope)
    }

    fn encoder_block(&self, r_in: usize, h: &Tensor, noise: &[NoiseDraw], train: bool) -> Tensor {
        let idx = NetworkSpec::blocks_for(r_in) - 1;
        let z = noise_channel(noise, |n| n.encoder[idx], h);
        let out = self.encoder[&r_in].forward(&Tensor::cat(&[h, &z], 1), train);
        self.lrelu(&out)
    }

    fn decoder_block(&self, r_in: usize, cur: &Tensor, skip: &Tensor, noise: &[NoiseDraw], train: bool) -> Tensor {
        let idx = NetworkSpec::blocks_for(r_in * 2) - 1;
        let z = noise_channel(noise, |n| n.decoder[idx], cur);
        let x = upsample(&Tensor::cat(&[cur, skip, &z], 1), 2);
        let (c1, c2) = &self.decoder[&r_in];
        c2.forward(&c1.forward(&x, train).relu(), train).relu()
    }

    /// Full pass on a batch `(N, 1, R, R)` at the active resolution.
    pub fn forward(&self, x: &Tensor, noise: &[NoiseDraw], train: bool) -> Result<GeneratorOutput> {
        let a = self.active_resolution;
        let (n, c, h, w) = x.size4()?;
        if c != 1 || h as usize != a || w as usize != a || noise.len() != n as usize {
            return Err(Error::Shape {
                expected: format!("(N, 1, {a}, {a}) with N noise draws"),
                actual: format!("({n}, {c}, {h}, {w}) with {} draws", noise.len()),
            });
        }
        for d in noise {
            d.validate(self.blocks())?;
        }
        let full = self.spec.input_resolution;
        let ra = self.spec.attention_resolution;

        let top_in = if a == full {
            x.shallow_clone()
        } else {
            self.lrelu(&self.from_image[&a].forward(x, train))
        };
        let mut h = self.encoder_block(a, &top_in, noise, train);
        if self.fading() {
            let old = self.lrelu(&self.from_image[&(a / 2)].forward(&downsample(x, a / 2), train));
            h = &h * self.alpha + old * (1.0 - self.alpha);
        }
        let mut skips: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut res = a / 2;
        loop {
            if res == ra {
                if let Some(attn) = &self.attention {
                    h = attn.forward(&h, train);
                }
            }
            skips.insert(res, h.shallow_clone());
            if res == 4 {
                break;
            }
            h = self.encoder_block(res, &h, noise, train);
            res /= 2;
        }

        let mut b = h;
        for conv in &self.bottleneck_grow {
            b = self.lrelu(&conv.forward(&b, train));
        }
        let embedding = self.lrelu(&self.squeeze.forward(&b, train));
        let mut cur = self.expand.forward(&embedding, train).relu();

        let mut prev = None;
        let mut r = 4;
        while r < a {
            if r == a / 2 {
                prev = Some(cur.shallow_clone());
            }
            cur = self.decoder_block(r, &cur, &skips[&r], noise, train);
            r *= 2;
            if r == ra {
                if let Some(attn) = &self.decoder_attention {
                    cur = attn.forward(&cur, train);
                }
            }
        }
        let mut raw = self.to_image[&a].forward(&cur, train);
        if self.fading() {
            let prev = prev.expect("a >= 8");
            let old = upsample(&self.to_image[&(a / 2)].forward(&prev, train), 2);
            raw = &raw * self.alpha + old * (1.0 - self.alpha);
        }
        let lesion = (&raw * border_mask(a, self.spec.crop_at(a))).clamp(-1.0, 1.0);
        let combined = (x + &lesion).clamp(-1.0, 1.0);
        Ok(GeneratorOutput { raw, lesion, combined })
    }
}

/// LeakyReLU as `max(x, slope * x)`, valid for slopes in [0, 1).
pub fn leaky(x: &Tensor, slope: f64) -> Tensor {
    x.maximum(&(x * slope))
}

#[derive(Debug)]
pub struct Discriminator {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub active_resolution: usize,
    pub alpha: f64,
    blocks: BTreeMap<usize, Conv2d>,
    from_image: BTreeMap<usize, Conv2d>,
    attention: Option<SelfAttention>,
    head: Linear,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, resolution: usize) -> Result<Self> {
        check_start(spec, resolution)?;
        let mut params = ParamStore::new();
        let init = init_for(spec, "discriminator");
        let (attention, head) = {
            let mut b = LayerBuilder::new(&mut params, init, true);
            let ra = spec.attention_resolution;
            let attention = (ra * 2 <= resolution)
                .then(|| SelfAttention::new(&mut b, "d.attn", spec.discriminator_filters_at(ra) as i64));
            let head = b.linear("d.head", spec.discriminator_filters_at(4) as i64 * 16, 4);
            (attention, head)
        };
        let mut d = Self {
            spec: spec.clone(),
            params,
            active_resolution: resolution,
            alpha: 1.0,
            blocks: BTreeMap::new(),
            from_image: BTreeMap::new(),
            attention,
            head,
        };
        let mut r = 8;
        while r <= resolution {
            d.add_block(r);
            r *= 2;
        }
        if resolution < spec.input_resolution {
            d.add_from_image(resolution);
        }
        Ok(d)
    }

    fn builder(&mut self) -> LayerBuilder<'_> {
        let init = init_for(&self.spec, "discriminator");
        LayerBuilder::new(&mut self.params, init, true)
    }

    fn add_block(&mut self, r_in: usize) {
        let c_in = if r_in == self.spec.input_resolution {
            1
        } else {
            self.spec.discriminator_filters_at(r_in)
        };
        let c_out = self.spec.discriminator_filters_at(r_in / 2) as i64;
        let conv = self.builder().conv2d(&format!("d.enc{r_in}"), c_in as i64, c_out, 3, 1, 1);
        self.blocks.insert(r_in, conv);
    }

    fn add_from_image(&mut self, res: usize) {
        let c = self.spec.discriminator_filters_at(res) as i64;
        let conv = self.builder().conv2d(&format!("d.from{res}"), 1, c, 1, 1, 0);
        self.from_image.insert(res, conv);
    }

    pub fn fading(&self) -> bool {
        self.alpha < 1.0
    }

    pub fn grow(&mut self, next_resolution: usize) -> Result<()> {
        let cur = self.active_resolution;
        if next_resolution != cur * 2 || next_resolution > self.spec.input_resolution {
            return Err(Error::Growth(format!(
                "cannot grow from {cur} to {next_resolution} (max {})",
                self.spec.input_resolution
            )));
        }
        self.add_block(next_resolution);
        if !self.from_image.contains_key(&cur) {
            self.add_from_image(cur);
        }
        if next_resolution < self.spec.input_resolution {
            self.add_from_image(next_resolution);
        }
        self.active_resolution = next_resolution;
        self.alpha = 0.0;
        let ra = self.spec.attention_resolution;
        if self.attention.is_none() && ra * 2 <= next_resolution {
            let c = self.spec.discriminator_filters_at(ra) as i64;
            let mut b = self.builder();
            self.attention = Some(SelfAttention::new(&mut b, "d.attn", c));
        }
        Ok(())
    }

    fn block(&self, r_in: usize, h: &Tensor, train: bool) -> Tensor {
        leaky(&self.blocks[&r_in].forward(h, train), self.spec.leaky_slope)
            .max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false)
    }

    /// Logits `(N, 4)` ordered [real-malignant, fake, benign, normal].
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let a = self.active_resolution;
        let (n, c, h, w) = x.size4()?;
        if c != 1 || h as usize != a || w as usize != a {
            return Err(Error::Shape {
                expected: format!("(N, 1, {a}, {a})"),
                actual: format!("({n}, {c}, {h}, {w})"),
            });
        }
        let slope = self.spec.leaky_slope;
        let lrelu = |t: Tensor| leaky(&t, slope);
        let top_in = if a == self.spec.input_resolution {
            x.shallow_clone()
        } else {
            lrelu(self.from_image[&a].forward(x, train))
        };
        let mut h = self.block(a, &top_in, train);
        if self.fading() {
            let old = lrelu(self.from_image[&(a / 2)].forward(&downsample(x, a / 2), train));
            h = &h * self.alpha + old * (1.0 - self.alpha);
        }
        let mut res = a / 2;
        loop {
            if res == self.spec.attention_resolution {
                if let Some(attn) = &self.attention {
                    h = attn.forward(&h, train);
                }
            }
            if res == 4 {
                break;
            }
            h = self.block(res, &h, train);
            res /= 2;
        }
        Ok(self.head.forward(&h.flatten(1, -1), train))
    }
}

/// Generator and discriminator for a spec, both at full resolution.
pub fn instantiate_networks(spec: &NetworkSpec) -> Result<(Generator, Discriminator)> {
    Ok((
        Generator::new(spec, spec.input_resolution)?,
        Discriminator::new(spec, spec.input_resolution)?,
    ))
}

pub fn array_to_batch(pixels: &Array2<f32>) -> Tensor {
    let (h, w) = pixels.dim();
    let data: Vec<f32> = pixels.iter().copied().collect();
    Tensor::from_slice(&data).view([1, 1, h as i64, w as i64])
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let size = t.size();
    let (h, w) = (size[size.len() - 2] as usize, size[size.len() - 1] as usize);
    let v: Vec<f32> = Vec::try_from(t.detach().contiguous().view([-1]))?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::Shape {
        expected: format!("{h}x{w}"),
        actual: e.to_string(),
    })
}

/// Runs the generator on one patch in eval mode.
pub fn generate_triplet(g: &Generator, base: &ImagePatch, noise: &NoiseDraw) -> Result<TripletPatch> {
    base.validate(g.active_resolution)?;
    let x = array_to_batch(&base.pixels);
    let out = tch::no_grad(|| g.forward(&x, std::slice::from_ref(noise), false))?;
    Ok(TripletPatch {
        lesion: tensor_to_array(&out.lesion)?,
        base: base.pixels.clone(),
        combined: tensor_to_array(&out.combined)?,
    })
}

/// Discriminator logits for one patch in eval mode.
pub fn discriminate(d: &Discriminator, patch: &Array2<f32>) -> Result<[f32; 4]> {
    let logits = tch::no_grad(|| d.forward(&array_to_batch(patch), false))?;
    let v: Vec<f32> = Vec::try_from(logits.view([-1]))?;
    Ok([v[0], v[1], v[2], v[3]])
}
