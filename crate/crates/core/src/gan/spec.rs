use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Architecture hyperparameters shared by the generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    /// Final (fully grown) patch size.
    pub input_resolution: usize,
    /// Filters of the top encoder block; doubled per block going down.
    pub base_filters: usize,
    pub attention_resolution: usize,
    pub bottleneck_channels: usize,
    /// Channels of the 4x4 tensor that is squeezed into the embedding.
    pub bottleneck_pre_channels: usize,
    pub discriminator_filter_multiple: usize,
    pub leaky_slope: f64,
    pub border_crop: usize,
    pub generator_spectral_norm: bool,
    pub decoder_attention: bool,
    pub init_seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_resolution: 256,
            base_filters: 16,
            attention_resolution: 32,
            bottleneck_channels: 4,
            bottleneck_pre_channels: 2048,
            discriminator_filter_multiple: 8,
            leaky_slope: 0.2,
            border_crop: 10,
            generator_spectral_norm: false,
            decoder_attention: false,
            init_seed: 0,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if r < 64 || !r.is_power_of_two() {
            return Err(Error::validation("input_resolution", "must be a power of two >= 64"));
        }
        if self.attention_resolution == 0 || r % self.attention_resolution != 0 {
            return Err(Error::validation("attention_resolution", "must divide input_resolution"));
        }
        if self.border_crop * 2 >= r {
            return Err(Error::validation("border_crop", "must be less than half the input resolution"));
        }
        if self.base_filters == 0 || self.bottleneck_channels == 0 || self.discriminator_filter_multiple == 0 {
            return Err(Error::validation("filters", "filter counts must be positive"));
        }
        let deepest = self.filters_at(4);
        if self.bottleneck_pre_channels < deepest
            || self.bottleneck_pre_channels % deepest != 0
            || !(self.bottleneck_pre_channels / deepest).is_power_of_two()
        {
            return Err(Error::validation(
                "bottleneck_pre_channels",
                format!("must be the 4x4 filter count ({deepest}) times a power of two"),
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::validation("leaky_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Generator filters of the encoder feature map at `res`.
    pub fn filters_at(&self, res: usize) -> usize {
        self.base_filters * (self.input_resolution / 2) / res
    }

    /// Channels produced by the decoder block that outputs `res`.
    pub fn decoder_filters_at(&self, res: usize) -> usize {
        if res >= self.input_resolution {
            self.base_filters
        } else {
            self.filters_at(res)
        }
    }

    pub fn discriminator_filters_at(&self, res: usize) -> usize {
        self.filters_at(res) * self.discriminator_filter_multiple
    }

    /// Border (px) zeroed on a lesion channel at resolution `res`.
    pub fn crop_at(&self, res: usize) -> usize {
        self.border_crop * res / self.input_resolution
    }

    /// Number of stride-2 (or pooling) blocks for an input of size `res`.
    pub fn blocks_for(res: usize) -> usize {
        (res / 4).trailing_zeros() as usize
    }

    /// Spatial sizes emitted by the encoder for an input of size `res`.
    pub fn encoder_resolutions(res: usize) -> Vec<usize> {
        (1..=Self::blocks_for(res)).map(|i| res >> i).collect()
    }

    /// A spec small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            input_resolution: 64,
            base_filters: 8,
            attention_resolution: 16,
            bottleneck_channels: 4,
            bottleneck_pre_channels: 128,
            discriminator_filter_multiple: 2,
            border_crop: 4,
            ..Self::default()
        }
    }
}

/// One scalar per generator block, each in [-1, 1]. Both lists are ordered
/// from the deepest block outwards, so growing appends to the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub encoder: Vec<f32>,
    pub decoder: Vec<f32>,
}

impl NoiseDraw {
    pub fn draw(blocks: usize, rng: &mut Rng) -> Self {
        let mut d = || (0..blocks).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        Self {
            encoder: d(),
            decoder: d(),
        }
    }

    pub fn zeros(blocks: usize) -> Self {
        Self {
            encoder: vec![0.0; blocks],
            decoder: vec![0.0; blocks],
        }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.encoder.len() < blocks || self.decoder.len() < blocks {
            return Err(Error::Shape {
                expected: format!("{blocks} noise scalars per path"),
                actual: format!("{}/{}", self.encoder.len(), self.decoder.len()),
            });
        }
        if self.encoder.iter().chain(&self.decoder).any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::validation("noise", "noise scalars must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Aligned lesion, base and combined channels of one generated patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletPatch {
    pub lesion: Array2<f32>,
    pub base: Array2<f32>,
    pub combined: Array2<f32>,
}

impl TripletPatch {
    /// Checks `combined == clip(base + lesion)`, the zero frame, and ranges.
    pub fn check(&self, border: usize) -> Result<()> {
        let (h, w) = self.lesion.dim();
        for ((y, x), &l) in self.lesion.indexed_iter() {
            let on_border = y < border || x < border || y >= h - border || x >= w - border;
            if on_border && l != 0.0 {
                return Err(Error::validation("lesion", format!("nonzero border pixel at ({x}, {y})")));
            }
            let b = self.base[[y, x]];
            if self.combined[[y, x]] != (b + l).clamp(-1.0, 1.0) {
                return Err(Error::validation("combined", format!("residual mismatch at ({x}, {y})")));
            }
            if !(-1.0..=1.0).contains(&l) || !(-1.0..=1.0).contains(&b) {
                return Err(Error::validation("triplet", "value outside [-1, 1]"));
            }
        }
        Ok(())
    }

    /// Stacks lesion, base and combined into a 3-channel array (C, H, W).
    pub fn to_channels(&self) -> ndarray::Array3<f32> {
        ndarray::stack(
            ndarray::Axis(0),
            &[self.lesion.view(), self.base.view(), self.combined.view()],
        )
        .expect("equal shapes")
    }
}
