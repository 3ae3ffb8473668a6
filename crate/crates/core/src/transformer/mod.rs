//! Deformable encoder over the BEV pyramid and a query decoder that samples the pyramid at
//! refined reference points.

pub mod decoder;
pub mod encoder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::numcore::Tensor;
use crate::scenegen::{wrap_angle, Box3D, PointCloudRange};

pub use decoder::{decoder_layer, reference_cross_attention, CrossOutput, Decoder, DecoderLayer, LayerPrediction, SelfAttention};
pub use encoder::{level_layout, ms_deformable_attention, DeformAttention, DeformOutput, Encoder, PositionalEncoder};

/// Width of the regression vector: centre (3), log size (3), sin/cos yaw (2), velocity (2).
pub const BOX_DIM: usize = 10;

/// Log-size clamp applied when decoding.
const MAX_LOG_SIZE: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            points: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    pub query_init_std: f64,
    /// Stop gradients through the refined references between layers.
    pub detach_refs: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            num_queries: 900,
            ffn_dim: 128,
            query_init_std: 0.1,
            detach_refs: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {} encoder heads", self.heads)));
        }
        if self.points == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder points and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

impl DecoderConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {} decoder heads", self.heads)));
        }
        if self.layers == 0 || self.num_queries == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("decoder layers, num_queries and ffn_dim must be positive".into()));
        }
        if !(self.query_init_std > 0.0) {
            return Err(Error::Config("query_init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Regression target of a box.
pub fn encode_box(b: &Box3D, range: &PointCloudRange) -> [f64; BOX_DIM] {
    let c = range.normalize(b.center);
    [
        c[0],
        c[1],
        c[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Absolute box from a regression vector.
pub fn decode_box(v: &[f64], class_id: usize, range: &PointCloudRange) -> Result<Box3D> {
    let center = range.denormalize([v[0], v[1], v[2]]);
    let size = [v[3], v[4], v[5]].map(|s| s.clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp());
    let yaw = wrap_angle(v[6].atan2(v[7]));
    Box3D::new(center, size, yaw, [v[8], v[9]], class_id)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The `k` highest-scoring decoded boxes, score = max class sigmoid, ties by query index.
/// `boxes: [nq, 10]`, `logits: [nq, K]`.
pub fn select_top_k(boxes: &Tensor, logits: &Tensor, k: usize, range: &PointCloudRange) -> Result<Vec<Detection>> {
    if k == 0 {
        return Err(Error::Config("top-k count must be at least 1".into()));
    }
    let (nq, nc) = (logits.shape()[0], logits.shape()[1]);
    if boxes.shape() != [nq, BOX_DIM] {
        return Err(Error::dim("select_top_k", boxes.shape(), logits.shape()));
    }
    let mut scored: Vec<(usize, usize, f64)> = (0..nq)
        .map(|q| {
            let row = &logits.data()[q * nc..(q + 1) * nc];
            let (c, best) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            (q, c, sigmoid(best))
        })
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    scored
        .into_iter()
        .take(k.min(nq))
        .map(|(q, c, score)| {
            Ok(Detection {
                bbox: decode_box(&boxes.data()[q * BOX_DIM..(q + 1) * BOX_DIM], c, range)?,
                score,
            })
        })
        .collect()
}
