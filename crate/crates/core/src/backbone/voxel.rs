use std::collections::BTreeMap;

use rand::Rng;

use super::GridConfig;
use crate::error::{Error, Result};
use crate::numcore::{xavier, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegen::PointCloud;

/// Occupied voxels in lexicographic `(ix, iy, iz)` order with their mean point features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub range_min: [f64; 3],
    pub coords: Vec<[usize; 3]>,
    /// `[n, 4]`: mean `(x, y, z, intensity)`.
    pub features: Tensor,
    pub counts: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index_of(&self, c: [usize; 3]) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }
}

fn point_key(p: &[f32; 4]) -> [u32; 4] {
    p.map(f32::to_bits)
}

/// Buckets points into voxels. Points outside the half-open range are dropped.
pub fn voxelize(pc: &PointCloud, cfg: &GridConfig) -> Result<VoxelGrid> {
    cfg.validate()?;
    let dims = cfg.voxel_dims();
    let mut buckets: BTreeMap<[usize; 3], Vec<[f32; 4]>> = BTreeMap::new();
    for p in &pc.points {
        let xyz = [p[0] as f64, p[1] as f64, p[2] as f64];
        if !cfg.range.contains(xyz) {
            continue;
        }
        let idx = [0, 1, 2].map(|a| cell_index(xyz[a], cfg.range.min[a], cfg.voxel_size[a], dims[a]));
        buckets.entry(idx).or_default().push(*p);
    }
    let mut coords = Vec::with_capacity(buckets.len());
    let mut feats = Vec::with_capacity(buckets.len() * 4);
    let mut counts = Vec::with_capacity(buckets.len());
    for (c, mut pts) in buckets {
        // Fixed summation order makes the mean independent of input order.
        pts.sort_by_key(point_key);
        let n = pts.len() as f64;
        let mut acc = [0.0f64; 4];
        for p in &pts {
            for a in 0..4 {
                acc[a] += p[a] as f64;
            }
        }
        coords.push(c);
        feats.extend(acc.map(|v| v / n));
        counts.push(pts.len());
    }
    let n = coords.len();
    Ok(VoxelGrid {
        dims,
        voxel_size: cfg.voxel_size,
        range_min: cfg.range.min,
        coords,
        features: Tensor::new(&[n, 4], feats)?,
        counts,
    })
}

pub(crate) fn cell_index(x: f64, min: f64, size: f64, dim: usize) -> usize {
    (((x - min) / size).floor().max(0.0) as usize).min(dim - 1)
}

/// Row indices of the 27 neighbours of every site (`-1` where unoccupied), site-major and
/// kernel offsets ordered `(dx, dy, dz)` lexicographically from `(-1, -1, -1)`.
pub fn neighbor_table(coords: &[[usize; 3]], dims: [usize; 3]) -> Vec<isize> {
    let mut out = Vec::with_capacity(coords.len() * 27);
    for c in coords {
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let n = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                    let inside = (0..3).all(|a| n[a] >= 0 && n[a] < dims[a] as isize);
                    let idx = if inside {
                        let key = n.map(|v| v as usize);
                        coords.binary_search(&key).map(|i| i as isize).unwrap_or(-1)
                    } else {
                        -1
                    };
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// 3×3×3 submanifold convolution: outputs live on the input sites only.
/// `x: [n, cin]`, `w: [27, cin, cout]`, `coords` sorted as in [`VoxelGrid`].
pub fn submanifold_conv(tape: &mut Tape, coords: &[[usize; 3]], dims: [usize; 3], x: Var, w: Var) -> Result<Var> {
    let (sx, sw) = (tape.shape(x).to_vec(), tape.shape(w).to_vec());
    if sx.len() != 2 || sx[0] != coords.len() || sw.len() != 3 || sw[0] != 27 || sw[1] != sx[1] {
        return Err(Error::dim("submanifold_conv", &sx, &sw));
    }
    let (n, cin, cout) = (sx[0], sx[1], sw[2]);
    let table = neighbor_table(coords, dims);
    let cols = tape.gather_rows(x, &table)?;
    let cols = tape.reshape(cols, &[n, 27 * cin])?;
    let wm = tape.reshape(w, &[27 * cin, cout])?;
    tape.matmul(cols, wm)
}

/// Mean-pools pairs of z-bins: `(ix, iy, iz) -> (ix, iy, iz / 2)`.
pub fn pool_z(tape: &mut Tape, coords: &[[usize; 3]], dims: [usize; 3], x: Var) -> Result<(Vec<[usize; 3]>, [usize; 3], Var)> {
    let parents: Vec<[usize; 3]> = coords.iter().map(|c| [c[0], c[1], c[2] / 2]).collect();
    let mut uniq = parents.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let idx: Vec<usize> = parents.iter().map(|p| uniq.binary_search(p).expect("parent present")).collect();
    let mut count = vec![0.0; uniq.len()];
    for &i in &idx {
        count[i] += 1.0;
    }
    let summed = tape.scatter_add_rows(x, &idx, uniq.len())?;
    let inv = tape.constant(Tensor::new(&[uniq.len(), 1], count.iter().map(|c| 1.0 / c).collect())?);
    let pooled = tape.mul(summed, inv)?;
    let new_dims = [dims[0], dims[1], dims[2].div_ceil(2)];
    Ok((uniq, new_dims, pooled))
}

/// Dense `[Y, X, Z·C]` BEV map: each cell concatenates the features of its z-bins, zeros
/// where unoccupied.
pub fn collapse_to_bev(tape: &mut Tape, coords: &[[usize; 3]], dims: [usize; 3], x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let [nx, ny, nz] = dims;
    let rows: Vec<usize> = coords.iter().map(|k| (k[1] * nx + k[0]) * nz + k[2]).collect();
    let flat = tape.scatter_add_rows(x, &rows, nx * ny * nz)?;
    tape.reshape(flat, &[ny, nx, nz * c])
}

#[derive(Clone, Debug)]
pub struct SparseBlock {
    pub convs: Vec<(ParamId, ParamId)>,
}

/// Stack of submanifold conv blocks; each block ends with a z-pool.
#[derive(Clone, Debug)]
pub struct SparseStack {
    pub blocks: Vec<SparseBlock>,
    pub out_channels: usize,
}

impl SparseStack {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, channels: &[usize], convs_per_block: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_prev = cin;
        for (b, &c) in channels.iter().enumerate() {
            let mut convs = Vec::new();
            for k in 0..convs_per_block {
                let w = store.add(format!("{prefix}.block{b}.conv{k}.weight"), xavier(rng, 27 * c_prev, c, &[27, c_prev, c]))?;
                let bias = store.add(format!("{prefix}.block{b}.conv{k}.bias"), Tensor::zeros(&[c]))?;
                convs.push((w, bias));
                c_prev = c;
            }
            blocks.push(SparseBlock { convs });
        }
        Ok(Self { blocks, out_channels: c_prev })
    }

    /// Returns the output sites, grid dims and features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        coords: &[[usize; 3]],
        dims: [usize; 3],
        x: Var,
    ) -> Result<(Vec<[usize; 3]>, [usize; 3], Var)> {
        let (mut coords, mut dims, mut x) = (coords.to_vec(), dims, x);
        for block in &self.blocks {
            for &(w, b) in &block.convs {
                let y = submanifold_conv(tape, &coords, dims, x, p[w])?;
                let y = tape.add(y, p[b])?;
                x = tape.relu(y);
            }
            (coords, dims, x) = pool_z(tape, &coords, dims, x)?;
        }
        Ok((coords, dims, x))
    }
}
