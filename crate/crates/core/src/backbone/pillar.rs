use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::voxel::cell_index;
use super::GridConfig;
use crate::error::Result;
use crate::numcore::{Tape, Tensor, Var};
use crate::scenegen::PointCloud;

/// Per-point decoration width.
pub const DECORATION_DIM: usize = 9;

/// Non-empty pillars in `(iy, ix)` row-major order, each with up to `P_max` decorated points
/// `(x, y, z, i, x-xc, y-yc, z-zc, x-xp, y-yp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    /// `(X, Y)` cell counts.
    pub dims: [usize; 2],
    pub pillar_size: [f64; 2],
    pub range_min: [f64; 3],
    pub range_extent: [f64; 3],
    pub cells: Vec<[usize; 2]>,
    pub points: Vec<Vec<[f64; DECORATION_DIM]>>,
}

impl PillarGrid {
    pub fn num_points(&self) -> usize {
        self.points.iter().map(Vec::len).sum()
    }
}

/// Groups points into vertical pillars. Pillars above the cap are subsampled with a generator
/// seeded from `seed` and the cell index, after sorting, so the result ignores input order.
pub fn pillarize(pc: &PointCloud, cfg: &GridConfig, seed: u64) -> Result<PillarGrid> {
    cfg.validate()?;
    let [nx, ny] = cfg.bev_dims();
    let mut buckets: BTreeMap<[usize; 2], Vec<[f32; 4]>> = BTreeMap::new();
    for p in &pc.points {
        let xyz = [p[0] as f64, p[1] as f64, p[2] as f64];
        if !cfg.range.contains(xyz) {
            continue;
        }
        let ix = cell_index(xyz[0], cfg.range.min[0], cfg.pillar_size[0], nx);
        let iy = cell_index(xyz[1], cfg.range.min[1], cfg.pillar_size[1], ny);
        buckets.entry([iy, ix]).or_default().push(*p);
    }
    let mut cells = Vec::with_capacity(buckets.len());
    let mut points = Vec::with_capacity(buckets.len());
    for ([iy, ix], mut pts) in buckets {
        pts.sort_by_key(|p| p.map(f32::to_bits));
        if pts.len() > cfg.max_points_per_pillar {
            let cell_seed = seed ^ ((iy * nx + ix) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
            let mut keep = sample(&mut rng, pts.len(), cfg.max_points_per_pillar).into_vec();
            keep.sort_unstable();
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
        let n = pts.len() as f64;
        let mut mean = [0.0; 3];
        for p in &pts {
            for a in 0..3 {
                mean[a] += p[a] as f64;
            }
        }
        mean = mean.map(|m| m / n);
        let xp = cfg.range.min[0] + (ix as f64 + 0.5) * cfg.pillar_size[0];
        let yp = cfg.range.min[1] + (iy as f64 + 0.5) * cfg.pillar_size[1];
        let dec = pts
            .iter()
            .map(|p| {
                let [x, y, z, i] = p.map(|v| v as f64);
                [x, y, z, i, x - mean[0], y - mean[1], z - mean[2], x - xp, y - yp]
            })
            .collect();
        cells.push([iy, ix]);
        points.push(dec);
    }
    Ok(PillarGrid {
        dims: [nx, ny],
        pillar_size: cfg.pillar_size,
        range_min: cfg.range.min,
        range_extent: cfg.range.extent(),
        cells,
        points,
    })
}

/// Decorations rescaled to unit-ish magnitude: absolute coordinates into `[0, 1]`, offsets
/// divided by the pillar footprint (z offset by the vertical extent).
fn scaled_inputs(pg: &PillarGrid) -> (Tensor, Vec<usize>) {
    let [dx, dy] = pg.pillar_size;
    let [ex, ey, ez] = pg.range_extent;
    let mut data = Vec::with_capacity(pg.num_points() * DECORATION_DIM);
    let mut seg = Vec::with_capacity(pg.num_points());
    for (s, pts) in pg.points.iter().enumerate() {
        for p in pts {
            data.extend([
                (p[0] - pg.range_min[0]) / ex,
                (p[1] - pg.range_min[1]) / ey,
                (p[2] - pg.range_min[2]) / ez,
                p[3],
                p[4] / dx,
                p[5] / dy,
                p[6] / ez,
                p[7] / dx,
                p[8] / dy,
            ]);
            seg.push(s);
        }
    }
    let n = seg.len();
    (Tensor::from_parts(vec![n, DECORATION_DIM], data), seg)
}

/// Shared `linear + relu` over points, max-pool per pillar, scatter to a dense `[Y, X, C]` map.
pub fn pillar_feature_net(tape: &mut Tape, pg: &PillarGrid, w: Var, b: Var) -> Result<Var> {
    let c = tape.shape(w)[1];
    let [nx, ny] = pg.dims;
    let (inputs, seg) = scaled_inputs(pg);
    let x = tape.constant(inputs);
    let h = tape.linear(x, w, Some(b))?;
    let h = tape.relu(h);
    let pooled = tape.segment_max(h, &seg, pg.cells.len())?;
    let rows: Vec<usize> = pg.cells.iter().map(|&[iy, ix]| iy * nx + ix).collect();
    let dense = tape.scatter_add_rows(pooled, &rows, nx * ny)?;
    tape.reshape(dense, &[ny, nx, c])
}
