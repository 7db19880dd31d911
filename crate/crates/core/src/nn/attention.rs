//! Self-attention over spatial positions with a learned residual gate.

use tch::{Kind, Tensor};

use super::layers::{Conv2d, LayerBuilder};

#[derive(Debug)]
pub struct SelfAttention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    /// Residual gate, initialized to zero.
    pub gamma: Tensor,
}

impl SelfAttention {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, channels: i64) -> Self {
        let inner = (channels / 8).max(1);
        Self {
            query: b.conv2d(&format!("{name}.query"), channels, inner, 1, 1, 0),
            key: b.conv2d(&format!("{name}.key"), channels, inner, 1, 1, 0),
            value: b.conv2d(&format!("{name}.value"), channels, channels, 1, 1, 0),
            gamma: b.scalar(&format!("{name}.gamma"), 0.0),
        }
    }

    /// `(batch, positions, positions)`; row `q` holds the weights query
    /// position `q` assigns to every key position.
    pub fn attention_weights(&self, x: &Tensor, train: bool) -> Tensor {
        let (n, _, h, w) = x.size4().expect("NCHW input");
        let q = self.query.forward(x, train).view([n, -1, h * w]);
        let k = self.key.forward(x, train).view([n, -1, h * w]);
        q.transpose(1, 2).bmm(&k).softmax(-1, Kind::Float)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.size4().expect("NCHW input");
        let attn = self.attention_weights(x, train);
        let v = self.value.forward(x, train).view([n, c, h * w]);
        let attended = v.bmm(&attn.transpose(1, 2)).view([n, c, h, w]);
        x + &self.gamma * attended
    }
}
