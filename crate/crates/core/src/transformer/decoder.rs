use rand::Rng;

use super::encoder::PositionalEncoder;
use super::{DecoderConfig, BOX_DIM};
use crate::backbone::{FeaturePyramid, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp, Norm};
use crate::numcore::{normal, xavier, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Focal-loss prior: initial class probability of 0.01.
pub const CLS_PRIOR_BIAS: f64 = -4.595_119_850_134_59;

/// Target standard deviation of the pre-sigmoid reference logits for x and y.
const REF_LOGIT_STD: f64 = 1.6;

/// Standard multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, dh) = (self.heads, d / self.heads);
        let split = |tape: &mut Tape, lin: &Linear, perm: &[usize]| -> Result<Var> {
            let y = lin.forward(tape, p, x)?;
            let y = tape.reshape(y, &[n, h, dh])?;
            tape.permute(y, perm)
        };
        let q = split(tape, &self.q, &[1, 0, 2])?;
        let kt = split(tape, &self.k, &[1, 2, 0])?;
        let v = split(tape, &self.v, &[1, 0, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[1, 0, 2])?;
        let ctx = tape.reshape(ctx, &[n, d])?;
        self.o.forward(tape, p, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: Norm,
    /// Per-level sampling weight logits.
    pub sampling: Linear,
    pub norm2: Norm,
    pub ffn: Mlp,
    pub norm3: Norm,
    pub reg: Mlp,
    pub cls: Linear,
}

/// One decoder layer's outputs for every query.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[nq, 3]` reference points the layer started from.
    pub refs: Var,
    /// `[nq, 10]`: normalised centre `r + Δp`, log size, `sin θ`, `cos θ`, `vx`, `vy`.
    pub boxes: Var,
    /// `[nq, K]` class logits.
    pub logits: Var,
}

/// Outputs of [`reference_cross_attention`].
#[derive(Clone, Copy, Debug)]
pub struct CrossOutput {
    pub query: Var,
    /// `[nq, levels]` sigmoid weights.
    pub weights: Var,
    /// `[nq, d]` weighted sum of samples.
    pub features: Var,
}

/// Samples each pyramid level bilinearly at the query's reference `(x, y)`, weights the
/// samples with `sigmoid(φ(q))` per level, sums them, adds the query and the reference's
/// positional code, then normalises.
#[allow(clippy::too_many_arguments)]
pub fn reference_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    sampling: &Linear,
    norm: &Norm,
    pe: &PositionalEncoder,
    query: Var,
    refs: Var,
    pyramid: &FeaturePyramid,
) -> Result<CrossOutput> {
    if pyramid.levels.len() != NUM_LEVELS {
        return Err(Error::Config(format!(
            "cross-attention expects {NUM_LEVELS} pyramid levels, got {}",
            pyramid.levels.len()
        )));
    }
    let logits = sampling.forward(tape, p, query)?;
    let weights = tape.sigmoid(logits);
    let xy = tape.slice(refs, 1, 0, 2)?;
    let mut features = None;
    for (j, (&level, shape)) in pyramid.levels.iter().zip(pyramid.shapes(tape)).enumerate() {
        let scale = tape.constant(Tensor::from_vec(vec![shape[1] as f64, shape[0] as f64]));
        let loc = tape.mul(xy, scale)?;
        let loc = tape.add_scalar(loc, -0.5);
        let sample = tape.bilinear_sample(level, loc)?;
        let wj = tape.slice(weights, 1, j, j + 1)?;
        let term = tape.mul(sample, wj)?;
        features = Some(match features {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let features = features.expect("four levels");
    let code = pe.encode(tape, refs)?;
    let x = tape.add(query, features)?;
    let x = tape.add(x, code)?;
    let query = norm.forward(tape, p, x)?;
    Ok(CrossOutput { query, weights, features })
}

/// Self-attention, reference cross-attention, MLP and the per-layer heads. Returns the
/// updated queries, the next references `clamp(r + Δp, 0, 1)`, and the layer's predictions.
/// With `detach` the next references carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    tape: &mut Tape,
    p: &Bound,
    layer: &DecoderLayer,
    pe: &PositionalEncoder,
    query: Var,
    refs: Var,
    pyramid: &FeaturePyramid,
    detach: bool,
) -> Result<(Var, Var, LayerPrediction)> {
    let sa = layer.self_attn.forward(tape, p, query)?;
    let x = tape.add(query, sa)?;
    let x = layer.norm1.forward(tape, p, x)?;
    let x = reference_cross_attention(tape, p, &layer.sampling, &layer.norm2, pe, x, refs, pyramid)?.query;
    let f = layer.ffn.forward(tape, p, x)?;
    let x = tape.add(x, f)?;
    let x = layer.norm3.forward(tape, p, x)?;

    let reg = layer.reg.forward(tape, p, x)?;
    let logits = layer.cls.forward(tape, p, x)?;
    let delta = tape.slice(reg, 1, 0, 3)?;
    let rest = tape.slice(reg, 1, 3, BOX_DIM)?;
    let centre = tape.add(refs, delta)?;
    let boxes = tape.concat(&[centre, rest], 1)?;
    let next = if detach { tape.detach(centre) } else { centre };
    let next = clamp_unit(tape, next);
    Ok((x, next, LayerPrediction { refs, boxes, logits }))
}

/// `min(max(x, 0), 1)`.
fn clamp_unit(tape: &mut Tape, x: Var) -> Var {
    let lo = tape.clamp_min(x, 0.0);
    let n = tape.neg(lo);
    let n = tape.clamp_min(n, -1.0);
    tape.neg(n)
}

/// Learned queries, reference initialisation and the decoder stack.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: ParamId,
    pub ref_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub pe: PositionalEncoder,
    pub detach_refs: bool,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig, d: usize, num_classes: usize, max_cells: usize) -> Result<Self> {
        let queries = store.add("decoder.queries", normal(rng, &[cfg.num_queries, d], cfg.query_init_std))?;
        // Wide x/y weights spread the initial references over the map; z stays near the middle.
        let col_std = REF_LOGIT_STD / (cfg.query_init_std * (d as f64).sqrt());
        let mut w = normal(rng, &[d, 3], 1.0);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v *= if i % 3 == 2 { 0.1 * col_std } else { col_std };
        }
        let ref_proj = Linear::with_init(store, "decoder.ref_proj", w, Tensor::zeros(&[3]))?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                // Small final regression weights keep the first offsets near zero.
                let reg = Mlp::new(store, rng, &format!("{name}.reg"), d, d, BOX_DIM)?;
                store.get_mut(reg.fc2.w).scale(0.1);
                Ok(DecoderLayer {
                    self_attn: SelfAttention::new(store, rng, &format!("{name}.self_attn"), d, cfg.heads)?,
                    norm1: Norm::new(store, &format!("{name}.norm1"), d)?,
                    sampling: Linear::new(store, rng, &format!("{name}.sampling"), d, NUM_LEVELS)?,
                    norm2: Norm::new(store, &format!("{name}.norm2"), d)?,
                    ffn: Mlp::new(store, rng, &format!("{name}.ffn"), d, cfg.ffn_dim, d)?,
                    norm3: Norm::new(store, &format!("{name}.norm3"), d)?,
                    reg,
                    cls: Linear::with_init(
                        store,
                        &format!("{name}.cls"),
                        xavier(rng, d, num_classes, &[d, num_classes]),
                        Tensor::full(&[num_classes], CLS_PRIOR_BIAS),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            ref_proj,
            layers,
            pe: PositionalEncoder::new(d, max_cells),
            detach_refs: cfg.detach_refs,
        })
    }

    /// `r = sigmoid(φ_ref(q))` for `q: [nq, d]`.
    pub fn init_reference_points(&self, tape: &mut Tape, p: &Bound, queries: Var) -> Result<Var> {
        let r = self.ref_proj.forward(tape, p, queries)?;
        Ok(tape.sigmoid(r))
    }

    /// Runs every layer; one prediction set per layer.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pyramid: &FeaturePyramid) -> Result<Vec<LayerPrediction>> {
        let mut q = p[self.queries];
        let mut refs = self.init_reference_points(tape, p, q)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nq, next, pred) = decoder_layer(tape, p, layer, &self.pe, q, refs, pyramid, self.detach_refs)?;
            out.push(pred);
            q = nq;
            refs = next;
        }
        Ok(out)
    }
}
