use std::f64::consts::PI;

use rand::Rng;

use super::EncoderConfig;
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp, Norm};
use crate::numcore::{normal, Bound, LevelShape, ParamId, ParamStore, Tape, Tensor, Var};

/// Sinusoidal code of a normalised 3D point: `d / 6` frequencies per coordinate, sine and
/// cosine, zero-padded to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoder {
    pub dim: usize,
    pub freqs: Vec<f64>,
}

impl PositionalEncoder {
    /// Frequencies are geometric from π to `π · max_cells`.
    pub fn new(dim: usize, max_cells: usize) -> Self {
        let nf = dim / 6;
        let top = (max_cells.max(2) as f64).ln();
        let freqs = (0..nf)
            .map(|k| {
                let t = if nf > 1 { k as f64 / (nf - 1) as f64 } else { 0.0 };
                PI * (t * top).exp()
            })
            .collect();
        Self { dim, freqs }
    }

    /// `[3, 3·nf]` block-diagonal frequency matrix.
    fn freq_matrix(&self) -> Tensor {
        let nf = self.freqs.len();
        let mut m = vec![0.0; 3 * 3 * nf];
        for a in 0..3 {
            for (k, f) in self.freqs.iter().enumerate() {
                m[a * 3 * nf + a * nf + k] = *f;
            }
        }
        Tensor::from_parts(vec![3, 3 * nf], m)
    }

    /// Differentiable encoding of `points: [n, 3]` into `[n, d]`.
    pub fn encode(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let n = tape.shape(points)[0];
        let fm = tape.constant(self.freq_matrix());
        let phase = tape.matmul(points, fm)?;
        let s = tape.sin(phase);
        let c = tape.cos(phase);
        let used = 6 * self.freqs.len();
        if used == self.dim {
            tape.concat(&[s, c], 1)
        } else {
            let pad = tape.constant(Tensor::zeros(&[n, self.dim - used]));
            tape.concat(&[s, c, pad], 1)
        }
    }

    /// Plain-value encoding.
    pub fn encode_values(&self, points: &[[f64; 3]]) -> Tensor {
        let mut tape = Tape::new();
        let flat = points.iter().flatten().copied().collect();
        let pv = tape.constant(Tensor::from_parts(vec![points.len(), 3], flat));
        let out = self.encode(&mut tape, pv).expect("shapes are consistent");
        tape.value(out).clone()
    }
}

/// Weights of one multi-scale deformable attention block.
#[derive(Clone, Debug)]
pub struct DeformAttention {
    pub value: Linear,
    pub offsets: Linear,
    pub attn: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformAttention {
    /// Offsets start at zero weight with a per-head direction pattern in the bias, so
    /// initial sampling points fan out around the reference.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize, levels: usize, points: usize) -> Result<Self> {
        let n_off = heads * levels * points * 2;
        let mut bias = Vec::with_capacity(n_off);
        for h in 0..heads {
            let theta = 2.0 * PI * h as f64 / heads as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let m = c.abs().max(s.abs());
            for _ in 0..levels {
                for k in 0..points {
                    bias.push(c / m * (k + 1) as f64);
                    bias.push(s / m * (k + 1) as f64);
                }
            }
        }
        Ok(Self {
            value: Linear::new(store, rng, &format!("{name}.value"), d, d)?,
            offsets: Linear::with_init(store, &format!("{name}.offsets"), Tensor::zeros(&[d, n_off]), Tensor::from_vec(bias))?,
            attn: Linear::with_init(
                store,
                &format!("{name}.attn"),
                Tensor::zeros(&[d, heads * levels * points]),
                Tensor::zeros(&[heads * levels * points]),
            )?,
            out: Linear::new(store, rng, &format!("{name}.out"), d, d)?,
            heads,
            levels,
            points,
        })
    }
}

/// Output of [`ms_deformable_attention`].
#[derive(Clone, Copy, Debug)]
pub struct DeformOutput {
    pub out: Var,
    /// `[n, heads, levels, points]`, a distribution per `(query, head)`.
    pub weights: Var,
}

/// Level layout of a token-flattened pyramid.
pub fn level_layout(shapes: &[[usize; 3]]) -> Vec<LevelShape> {
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let l = LevelShape { height: s[0], width: s[1], start };
            start += s[0] * s[1];
            l
        })
        .collect()
}

/// Multi-scale deformable attention. `query: [n, d]`, `refs`: normalised `(x, y)` per query,
/// `value_in: [S, d]` token-flattened levels described by `levels`. Offsets are in pixels of
/// each level; the reference maps to pixel `(x·W − ½, y·H − ½)`.
pub fn ms_deformable_attention(
    tape: &mut Tape,
    p: &Bound,
    w: &DeformAttention,
    query: Var,
    refs: &[[f64; 2]],
    value_in: Var,
    levels: &[LevelShape],
) -> Result<DeformOutput> {
    let n = tape.shape(query)[0];
    if refs.len() != n {
        return Err(Error::dim("ms_deformable_attention", &[refs.len()], tape.shape(query)));
    }
    if levels.len() != w.levels {
        return Err(Error::dim("ms_deformable_attention", &[levels.len()], &[w.levels]));
    }
    if let Some(r) = refs.iter().find(|r| r.iter().any(|c| !(0.0..=1.0).contains(c))) {
        return Err(Error::Contract(format!("reference point {r:?} outside [0, 1]^2")));
    }
    let (h, l, k) = (w.heads, w.levels, w.points);
    let value = w.value.forward(tape, p, value_in)?;
    let off = w.offsets.forward(tape, p, query)?;
    let off = tape.reshape(off, &[n, h, l, k, 2])?;
    let logits = w.attn.forward(tape, p, query)?;
    let logits = tape.reshape(logits, &[n, h, l * k])?;
    let weights = tape.softmax(logits, 2)?;
    let weights = tape.reshape(weights, &[n, h, l, k])?;
    let mut base = Vec::with_capacity(n * h * l * k * 2);
    for r in refs {
        for _ in 0..h {
            for lev in levels {
                let u = r[0] * lev.width as f64 - 0.5;
                let v = r[1] * lev.height as f64 - 0.5;
                for _ in 0..k {
                    base.extend([u, v]);
                }
            }
        }
    }
    let base = tape.constant(Tensor::from_parts(vec![n, h, l, k, 2], base));
    let loc = tape.add(base, off)?;
    let sampled = tape.deform_sample(value, loc, weights, levels)?;
    let out = w.out.forward(tape, p, sampled)?;
    Ok(DeformOutput { out, weights })
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: DeformAttention,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

/// Deformable self-attention encoder over all pyramid pixels.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub level_embed: Option<ParamId>,
    pub pe: PositionalEncoder,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig, d: usize, levels: usize, max_cells: usize) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("encoder.layer{i}");
                Ok(EncoderLayer {
                    attn: DeformAttention::new(store, rng, &format!("{name}.attn"), d, cfg.heads, levels, cfg.points)?,
                    norm1: Norm::new(store, &format!("{name}.norm1"), d)?,
                    ffn: Mlp::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim, d)?,
                    norm2: Norm::new(store, &format!("{name}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let level_embed = if cfg.layers > 0 {
            Some(store.add("encoder.level_embed", normal(rng, &[levels, d], 0.1))?)
        } else {
            None
        };
        Ok(Self {
            layers,
            level_embed,
            pe: PositionalEncoder::new(d, max_cells),
        })
    }

    /// Pixel-centre references of every level, token order.
    pub fn pixel_refs(shapes: &[[usize; 3]]) -> Vec<[f64; 2]> {
        shapes
            .iter()
            .flat_map(|s| {
                let (h, w) = (s[0], s[1]);
                (0..h).flat_map(move |r| (0..w).map(move |c| [(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64]))
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let Some(level_embed) = self.level_embed else {
            return Ok(pyramid.clone());
        };
        let shapes = pyramid.shapes(tape);
        let d = shapes[0][2];
        let levels = level_layout(&shapes);
        let total: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
        let flat = pyramid
            .levels
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| tape.reshape(v, &[s[0] * s[1], d]))
            .collect::<Result<Vec<_>>>()?;
        let mut src = tape.concat(&flat, 0)?;

        let refs = Self::pixel_refs(&shapes);
        let pts: Vec<[f64; 3]> = refs.iter().map(|r| [r[0], r[1], 0.5]).collect();
        let pe = tape.constant(self.pe.encode_values(&pts));
        let lvl_idx: Vec<isize> = shapes
            .iter()
            .enumerate()
            .flat_map(|(j, s)| std::iter::repeat_n(j as isize, s[0] * s[1]))
            .collect();
        let le = tape.gather_rows(p[level_embed], &lvl_idx)?;
        let pos = tape.add(pe, le)?;

        for layer in &self.layers {
            let q = tape.add(src, pos)?;
            let a = ms_deformable_attention(tape, p, &layer.attn, q, &refs, src, &levels)?;
            let x = tape.add(src, a.out)?;
            let x = layer.norm1.forward(tape, p, x)?;
            let f = layer.ffn.forward(tape, p, x)?;
            let x = tape.add(x, f)?;
            src = layer.norm2.forward(tape, p, x)?;
        }
        debug_assert_eq!(tape.shape(src), &[total, d]);

        let out = levels
            .iter()
            .zip(&shapes)
            .map(|(lev, s)| {
                let part = tape.slice(src, 0, lev.start, lev.start + s[0] * s[1])?;
                tape.reshape(part, &[s[0], s[1], d])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid { levels: out })
    }
}
