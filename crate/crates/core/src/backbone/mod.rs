//! Point cloud to four-level BEV feature pyramid.
//!
//! Two front ends produce a dense `[Y, X, C]` BEV map: a pillar feature net, or voxelization
//! followed by submanifold 3D convolutions and a z-collapse. A strided 2D conv stack and a
//! top-down FPN then yield four maps of equal channel width whose side halves per level.
//! BEV rows index `y`, columns index `x`.

pub mod pillar;
pub mod voxel;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{xavier, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegen::{PointCloud, PointCloudRange};

pub use pillar::{pillar_feature_net, pillarize, PillarGrid, DECORATION_DIM};
pub use voxel::{collapse_to_bev, neighbor_table, pool_z, submanifold_conv, voxelize, SparseStack, VoxelGrid};

pub const NUM_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub range: PointCloudRange,
    /// Voxel edge lengths `(dx, dy, dz)` in metres.
    pub voxel_size: [f64; 3],
    /// Pillar footprint `(dx, dy)` in metres.
    pub pillar_size: [f64; 2],
    pub max_points_per_pillar: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            range: PointCloudRange::default(),
            voxel_size: [0.8, 0.8, 0.5],
            pillar_size: [0.8, 0.8],
            max_points_per_pillar: 32,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size.iter().chain(&self.pillar_size).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "voxel and pillar sizes must be positive, got {:?} / {:?}",
                self.voxel_size, self.pillar_size
            )));
        }
        if (0..3).any(|a| !(self.range.max[a] > self.range.min[a])) {
            return Err(Error::Config(format!("empty point-cloud range {:?}", self.range)));
        }
        if self.max_points_per_pillar == 0 {
            return Err(Error::Config("max_points_per_pillar must be at least 1".into()));
        }
        Ok(())
    }

    fn cells(extent: f64, size: f64) -> usize {
        ((extent / size) - 1e-9).ceil().max(1.0) as usize
    }

    /// `(X, Y, Z)` voxel counts.
    pub fn voxel_dims(&self) -> [usize; 3] {
        let e = self.range.extent();
        [0, 1, 2].map(|a| Self::cells(e[a], self.voxel_size[a]))
    }

    /// `(X, Y)` pillar counts.
    pub fn bev_dims(&self) -> [usize; 2] {
        let e = self.range.extent();
        [0, 1].map(|a| Self::cells(e[a], self.pillar_size[a]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Pillar,
    Voxel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub grid: GridConfig,
    pub pillar_channels: usize,
    /// Channels of each submanifold block; every block ends with a z-pool.
    pub sparse_channels: Vec<usize>,
    pub sparse_convs_per_block: usize,
    /// Channels of the four 2D conv stages.
    pub bev_channels: [usize; NUM_LEVELS],
    pub convs_per_level: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Pillar,
            grid: GridConfig::default(),
            pillar_channels: 32,
            sparse_channels: vec![16, 16],
            sparse_convs_per_block: 1,
            bev_channels: [32, 64, 64, 64],
            convs_per_level: 2,
        }
    }
}

impl BackboneConfig {
    /// `(H, W)` of pyramid level 1.
    pub fn bev_hw(&self) -> [usize; 2] {
        match self.kind {
            BackboneKind::Pillar => {
                let [x, y] = self.grid.bev_dims();
                [y, x]
            }
            BackboneKind::Voxel => {
                let [x, y, _] = self.grid.voxel_dims();
                [y, x]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let [h, w] = self.bev_hw();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!("BEV grid {h}x{w} must be divisible by 8")));
        }
        if self.convs_per_level == 0 || self.bev_channels.contains(&0) || self.pillar_channels == 0 {
            return Err(Error::Config("backbone channel counts and conv counts must be positive".into()));
        }
        if self.kind == BackboneKind::Voxel && (self.sparse_channels.contains(&0) || self.sparse_convs_per_block == 0) {
            return Err(Error::Config("sparse channel counts must be positive".into()));
        }
        Ok(())
    }

    fn bev_input_channels(&self) -> usize {
        match self.kind {
            BackboneKind::Pillar => self.pillar_channels,
            BackboneKind::Voxel => {
                let mut z = self.grid.voxel_dims()[2];
                for _ in &self.sparse_channels {
                    z = z.div_ceil(2);
                }
                z * self.sparse_channels.last().copied().unwrap_or(4)
            }
        }
    }
}

/// Four BEV maps `[H/2^j, W/2^j, C]` living on one tape.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

impl FeaturePyramid {
    /// `(height, width, channels)` per level.
    pub fn shapes(&self, tape: &Tape) -> Vec<[usize; 3]> {
        self.levels
            .iter()
            .map(|&v| {
                let s = tape.shape(v);
                [s[0], s[1], s[2]]
            })
            .collect()
    }
}

/// Nearest-neighbour ×2 upsampling of `[h, w, c]`.
pub fn upsample2(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let flat = tape.reshape(x, &[h * w, c])?;
    let idx: Vec<isize> = (0..2 * h)
        .flat_map(|r| (0..2 * w).map(move |col| ((r / 2) * w + col / 2) as isize))
        .collect();
    let up = tape.gather_rows(flat, &idx)?;
    tape.reshape(up, &[2 * h, 2 * w, c])
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), xavier(rng, k * k * cin, cout, &[k, k, cin, cout]))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, stride, pad: k / 2 })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], self.stride, self.pad)?;
        tape.add(y, p[self.b])
    }
}

/// Strided 2D conv stages followed by lateral 1×1 convs and a top-down nearest-upsample sum.
#[derive(Clone, Debug)]
pub struct BevNet {
    stages: Vec<Vec<Conv>>,
    laterals: Vec<Conv>,
    pub out_channels: usize,
}

impl BevNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, channels: [usize; NUM_LEVELS], convs_per_level: usize, out_channels: usize) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_prev = cin;
        for (j, &c) in channels.iter().enumerate() {
            let mut convs = Vec::new();
            for k in 0..convs_per_level {
                let stride = if j > 0 && k == 0 { 2 } else { 1 };
                convs.push(Conv::new(store, rng, &format!("{prefix}.stage{j}.conv{k}"), 3, c_prev, c, stride)?);
                c_prev = c;
            }
            stages.push(convs);
        }
        let laterals = channels
            .iter()
            .enumerate()
            .map(|(j, &c)| Conv::new(store, rng, &format!("{prefix}.lateral{j}"), 1, c, out_channels, 1))
            .collect::<Result<_>>()?;
        Ok(Self { stages, laterals, out_channels })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, bev: Var) -> Result<FeaturePyramid> {
        let s = tape.shape(bev).to_vec();
        if s.len() != 3 || s[0] % 8 != 0 || s[1] % 8 != 0 {
            return Err(Error::Config(format!("BEV input {s:?} must be [H, W, C] with H and W divisible by 8")));
        }
        let mut x = bev;
        let mut feats = Vec::with_capacity(NUM_LEVELS);
        for stage in &self.stages {
            for conv in stage {
                let y = conv.forward(tape, p, x)?;
                x = tape.relu(y);
            }
            feats.push(x);
        }
        let mut levels = vec![feats[NUM_LEVELS - 1]; NUM_LEVELS];
        let mut top = self.laterals[NUM_LEVELS - 1].forward(tape, p, feats[NUM_LEVELS - 1])?;
        levels[NUM_LEVELS - 1] = top;
        for j in (0..NUM_LEVELS - 1).rev() {
            let lat = self.laterals[j].forward(tape, p, feats[j])?;
            let up = upsample2(tape, top)?;
            top = tape.add(lat, up)?;
            levels[j] = top;
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Preprocessed per-scene input to the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneInput {
    Pillars(PillarGrid),
    Voxels(VoxelGrid),
}

#[derive(Clone, Debug)]
enum FrontEnd {
    Pillar { w: ParamId, b: ParamId },
    Voxel { stack: SparseStack },
}

/// Complete backbone: front end, BEV conv stages and FPN.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    front: FrontEnd,
    net: BevNet,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &BackboneConfig, out_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let front = match cfg.kind {
            BackboneKind::Pillar => {
                let c = cfg.pillar_channels;
                FrontEnd::Pillar {
                    w: store.add("backbone.pfn.weight", xavier(rng, DECORATION_DIM, c, &[DECORATION_DIM, c]))?,
                    b: store.add("backbone.pfn.bias", Tensor::zeros(&[c]))?,
                }
            }
            BackboneKind::Voxel => FrontEnd::Voxel {
                stack: SparseStack::new(store, rng, "backbone.sparse", 4, &cfg.sparse_channels, cfg.sparse_convs_per_block)?,
            },
        };
        let net = BevNet::new(store, rng, "backbone.bev", cfg.bev_input_channels(), cfg.bev_channels, cfg.convs_per_level, out_channels)?;
        Ok(Self { cfg: cfg.clone(), front, net })
    }

    /// Grid assignment for one cloud; `seed` drives pillar subsampling.
    pub fn prepare(&self, pc: &PointCloud, seed: u64) -> Result<BackboneInput> {
        Ok(match self.cfg.kind {
            BackboneKind::Pillar => BackboneInput::Pillars(pillarize(pc, &self.cfg.grid, seed)?),
            BackboneKind::Voxel => BackboneInput::Voxels(voxelize(pc, &self.cfg.grid)?),
        })
    }

    /// Dense level-1 BEV map from a prepared input.
    pub fn bev(&self, tape: &mut Tape, p: &Bound, input: &BackboneInput) -> Result<Var> {
        match (&self.front, input) {
            (FrontEnd::Pillar { w, b }, BackboneInput::Pillars(pg)) => pillar_feature_net(tape, pg, p[*w], p[*b]),
            (FrontEnd::Voxel { stack }, BackboneInput::Voxels(vg)) => {
                let x = tape.constant(normalized_voxel_features(vg, &self.cfg.grid.range));
                let (coords, dims, y) = stack.forward(tape, p, &vg.coords, vg.dims, x)?;
                collapse_to_bev(tape, &coords, dims, y)
            }
            _ => Err(Error::Contract("backbone input kind does not match the configured backbone".into())),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &BackboneInput) -> Result<FeaturePyramid> {
        let bev = self.bev(tape, p, input)?;
        self.net.forward(tape, p, bev)
    }
}

/// Mean voxel coordinates mapped into `[0, 1]`; intensity untouched.
fn normalized_voxel_features(vg: &VoxelGrid, range: &PointCloudRange) -> Tensor {
    let e = range.extent();
    let data = vg
        .features
        .data()
        .chunks(4)
        .flat_map(|f| [(f[0] - range.min[0]) / e[0], (f[1] - range.min[1]) / e[1], (f[2] - range.min[2]) / e[2], f[3]])
        .collect();
    Tensor::from_parts(vec![vg.len(), 4], data)
}
