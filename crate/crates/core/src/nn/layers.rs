use tch::{Kind, Tensor};

use super::params::{Init, ParamStore};
use super::spectral::{spectral_normalize, PowerState};

/// Optional spectral normalization of a weight. The power-iteration vector
/// lives in the owning [`ParamStore`] as a buffer named `<layer>.sn_u`.
#[derive(Debug)]
struct Spectral {
    u: Tensor,
}

impl Spectral {
    fn apply(&self, weight: &Tensor, train: bool) -> Tensor {
        let out = spectral_normalize(weight, &PowerState::new(self.u.shallow_clone()));
        if train && !out.degenerate {
            tch::no_grad(|| {
                let _ = self.u.shallow_clone().copy_(&out.state.u);
            });
        }
        out.weight
    }
}

fn register_spectral(store: &mut ParamStore, init: &Init, name: &str, rows: i64) -> Spectral {
    let key = format!("{name}.sn_u");
    let u = init.normal(&key, &[rows], 1.0);
    let u = &u / u.norm();
    Spectral {
        u: store.insert(&key, u, false),
    }
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: i64,
    padding: i64,
    spectral: Option<Spectral>,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let w = match &self.spectral {
            Some(sn) => sn.apply(&self.weight, train),
            None => self.weight.shallow_clone(),
        };
        x.conv2d(&w, Some(&self.bias), [self.stride], [self.padding], [1], 1)
    }

    pub fn out_channels(&self) -> i64 {
        self.weight.size()[0]
    }
}

#[derive(Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: i64,
    spectral: Option<Spectral>,
}

impl ConvTranspose2d {
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let w = match &self.spectral {
            Some(sn) => sn.apply(&self.weight, train),
            None => self.weight.shallow_clone(),
        };
        x.conv_transpose2d(&w, Some(&self.bias), [self.stride], [0], [0], 1, [1])
    }
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    spectral: Option<Spectral>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let w = match &self.spectral {
            Some(sn) => sn.apply(&self.weight, train),
            None => self.weight.shallow_clone(),
        };
        x.linear(&w, Some(&self.bias))
    }
}

/// Creates layers inside a [`ParamStore`] with orthogonal weights and zero
/// biases.
/// Group normalization with a learned per-channel affine map.
#[derive(Debug)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    groups: i64,
}

impl GroupNorm {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(self.groups, Some(&self.weight), Some(&self.bias), 1e-5, false)
    }
}

pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub init: Init,
    pub spectral: bool,
    pub gain: f64,
}

impl<'a> LayerBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, init: Init, spectral: bool) -> Self {
        Self {
            store,
            init,
            spectral,
            gain: 1.0,
        }
    }

    pub fn conv2d(&mut self, name: &str, c_in: i64, c_out: i64, kernel: i64, stride: i64, padding: i64) -> Conv2d {
        let wname = format!("{name}.weight");
        let w = self.init.orthogonal(&wname, &[c_out, c_in, kernel, kernel], self.gain);
        let weight = self.store.insert(&wname, w, true);
        let bias = self.store.insert(&format!("{name}.bias"), Init::zeros(&[c_out]), true);
        let spectral = self
            .spectral
            .then(|| register_spectral(self.store, &self.init, name, c_out));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
            spectral,
        }
    }

    pub fn conv_transpose2d(&mut self, name: &str, c_in: i64, c_out: i64, kernel: i64, stride: i64) -> ConvTranspose2d {
        let wname = format!("{name}.weight");
        let w = self.init.orthogonal(&wname, &[c_in, c_out, kernel, kernel], self.gain);
        let weight = self.store.insert(&wname, w, true);
        let bias = self.store.insert(&format!("{name}.bias"), Init::zeros(&[c_out]), true);
        let spectral = self
            .spectral
            .then(|| register_spectral(self.store, &self.init, name, c_in));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            spectral,
        }
    }

    pub fn linear(&mut self, name: &str, c_in: i64, c_out: i64) -> Linear {
        let wname = format!("{name}.weight");
        let w = self.init.orthogonal(&wname, &[c_out, c_in], self.gain);
        let weight = self.store.insert(&wname, w, true);
        let bias = self.store.insert(&format!("{name}.bias"), Init::zeros(&[c_out]), true);
        let spectral = self
            .spectral
            .then(|| register_spectral(self.store, &self.init, name, c_out));
        Linear {
            weight,
            bias,
            spectral,
        }
    }

    pub fn group_norm(&mut self, name: &str, groups: i64, channels: i64) -> GroupNorm {
        let ones = Tensor::ones([channels], (Kind::Float, tch::Device::Cpu));
        GroupNorm {
            weight: self.store.insert(&format!("{name}.weight"), ones, true),
            bias: self.store.insert(&format!("{name}.bias"), Init::zeros(&[channels]), true),
            groups: groups.min(channels),
        }
    }

    pub fn scalar(&mut self, name: &str, value: f32) -> Tensor {
        self.store
            .insert(name, Tensor::from_slice(&[value]).to_kind(Kind::Float), true)
    }
}
