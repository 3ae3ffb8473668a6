//! Synthetic LiDAR-like scenes and their on-disk formats.

mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::iou::bev_intersection_area;

pub use io::{
    read_cloud, read_detections, read_labels, write_cloud, write_detections, write_labels, DatasetManifest,
    ManifestEntry,
};

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Axis-aligned point-cloud extent; bins are half-open `[min, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloudRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl PointCloudRange {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] < self.max[i])
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x < self.max[0] && y >= self.min[1] && y < self.max[1]
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.max[i] - self.min[i])
    }

    /// Maps an absolute position into `[0, 1]³`.
    pub fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (p[i] - self.min[i]) / (self.max[i] - self.min[i]))
    }

    pub fn denormalize(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| self.min[i] + p[i] * (self.max[i] - self.min[i]))
    }
}

impl Default for PointCloudRange {
    fn default() -> Self {
        Self {
            min: [-25.6, -25.6, -2.0],
            max: [25.6, 25.6, 4.0],
        }
    }
}

/// N×4 `(x, y, z, intensity)` points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A ground-truth or predicted 3D box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// (length, width, height), all strictly positive.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    /// Set by the generator when the object received fewer points than the configured minimum.
    #[serde(default)]
    pub sparse: bool,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2], class_id: usize) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract(format!("box size must be positive, got {size:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            velocity,
            class_id,
            sparse: false,
        })
    }

    pub fn bev_distance(&self, other: &Box3D) -> f64 {
        (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1])
    }

    pub fn range_from_origin(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    pub fn longer_edge(&self) -> f64 {
        self.size[0].max(self.size[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub size_mean: [f64; 3],
    pub size_std: [f64; 3],
    pub velocity_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub range: PointCloudRange,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassSpec>,
    /// Ground clutter points per square metre.
    pub clutter_density: f64,
    pub min_points_per_object: usize,
    pub max_points_per_object: usize,
    /// Objects nearer than this receive `max_points_per_object`; beyond it counts decay as 1/d².
    pub full_density_distance: f64,
    /// Objects beyond this distance may fall below `min_points_per_object` (flagged sparse).
    pub density_cutoff: f64,
    pub surface_jitter: f64,
    pub ground_z: f64,
    /// Keep object centres this far inside the BEV range.
    pub border_margin: f64,
    pub max_placement_retries: usize,
}

impl SceneConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("scene config needs at least one class".into()));
        }
        if self.min_objects > self.max_objects || self.min_points_per_object > self.max_points_per_object {
            return Err(Error::Config("scene config has min > max".into()));
        }
        if (0..3).any(|i| self.range.max[i] <= self.range.min[i]) {
            return Err(Error::Config("point-cloud range is empty".into()));
        }
        Ok(())
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: PointCloudRange::default(),
            min_objects: 2,
            max_objects: 5,
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    size_mean: [4.6, 1.9, 1.7],
                    size_std: [0.25, 0.1, 0.1],
                    velocity_std: 3.0,
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    size_mean: [0.8, 0.7, 1.75],
                    size_std: [0.1, 0.08, 0.1],
                    velocity_std: 1.0,
                },
                ClassSpec {
                    name: "truck".into(),
                    size_mean: [7.5, 2.6, 3.0],
                    size_std: [0.8, 0.15, 0.2],
                    velocity_std: 2.0,
                },
            ],
            clutter_density: 0.3,
            min_points_per_object: 40,
            max_points_per_object: 200,
            full_density_distance: 10.0,
            density_cutoff: 30.0,
            surface_jitter: 0.03,
            ground_z: 0.0,
            border_margin: 3.0,
            max_placement_retries: 200,
        }
    }
}

fn sample_size(rng: &mut ChaCha8Rng, spec: &ClassSpec) -> [f64; 3] {
    [0, 1, 2].map(|i| {
        let z: f64 = StandardNormal.sample(rng);
        (spec.size_mean[i] + spec.size_std[i] * z).max(0.3 * spec.size_mean[i])
    })
}

/// Point on one of the five exposed faces (no bottom) of a box, in box-local coordinates.
fn sample_surface(rng: &mut ChaCha8Rng, size: [f64; 3]) -> [f64; 3] {
    let [l, w, h] = size;
    let areas = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 0;
    while face < 4 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let (a, b): (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    match face {
        0 => [l / 2.0, a * w, (b + 0.5) * h],
        1 => [-l / 2.0, a * w, (b + 0.5) * h],
        2 => [a * l, w / 2.0, (b + 0.5) * h],
        3 => [a * l, -w / 2.0, (b + 0.5) * h],
        _ => [a * l, b * w, h],
    }
}

/// Stores the point at 32-bit precision if the rounded value is inside the range.
fn push_in_range(points: &mut Vec<[f32; 4]>, r: &PointCloudRange, p: [f64; 3], intensity: f64) {
    let q = [p[0] as f32, p[1] as f32, p[2] as f32];
    if r.contains(q.map(f64::from)) {
        points.push([q[0], q[1], q[2], intensity as f32]);
    }
}

/// Deterministic synthetic scene for `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &cfg.range;
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class_id = rng.random_range(0..cfg.classes.len());
        let spec = &cfg.classes[class_id];
        let mut placed = None;
        for _ in 0..cfg.max_placement_retries {
            let size = sample_size(&mut rng, spec);
            let x = rng.random_range(r.min[0] + cfg.border_margin..r.max[0] - cfg.border_margin);
            let y = rng.random_range(r.min[1] + cfg.border_margin..r.max[1] - cfg.border_margin);
            let yaw = rng.random_range(-PI..PI);
            let vn = Normal::new(0.0, spec.velocity_std).map_err(|e| Error::Config(e.to_string()))?;
            let velocity = [vn.sample(&mut rng), vn.sample(&mut rng)];
            let cand = Box3D::new([x, y, cfg.ground_z + size[2] / 2.0], size, yaw, velocity, class_id)?;
            let mut clear = true;
            for b in &boxes {
                if bev_intersection_area(b, &cand)? > 0.0 {
                    clear = false;
                    break;
                }
            }
            if clear {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Generation {
                    seed,
                    msg: format!("could not place object {} without BEV overlap", boxes.len()),
                })
            }
        }
    }

    let mut points: Vec<[f32; 4]> = Vec::new();
    let jitter = Normal::new(0.0, cfg.surface_jitter.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    for b in &mut boxes {
        let dist = b.range_from_origin().max(1e-6);
        let decay = (cfg.full_density_distance / dist).powi(2).min(1.0);
        let decayed = (cfg.max_points_per_object as f64 * decay).round() as usize;
        let n = if decayed >= cfg.min_points_per_object {
            decayed
        } else if dist > cfg.density_cutoff {
            b.sparse = true;
            decayed
        } else {
            cfg.min_points_per_object
        };
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..n {
            let [lx, ly, lz] = sample_surface(&mut rng, b.size);
            let p = [
                b.center[0] + c * lx - s * ly + jitter.sample(&mut rng),
                b.center[1] + s * lx + c * ly + jitter.sample(&mut rng),
                b.center[2] - b.size[2] / 2.0 + lz + jitter.sample(&mut rng),
            ];
            let intensity: f64 = rng.random_range(0.4..1.0);
            push_in_range(&mut points, r, p, intensity);
        }
    }

    let area = (r.max[0] - r.min[0]) * (r.max[1] - r.min[1]);
    let n_clutter = (cfg.clutter_density * area).round() as usize;
    let ground = Normal::new(cfg.ground_z, 0.05).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..n_clutter {
        let p = [
            rng.random_range(r.min[0]..r.max[0]),
            rng.random_range(r.min[1]..r.max[1]),
            ground.sample(&mut rng),
        ];
        let intensity: f64 = rng.random_range(0.0..0.3);
        push_in_range(&mut points, r, p, intensity);
    }

    Ok(Scene {
        scene_id: format!("scene_{seed:08}"),
        cloud: PointCloud::new(points)?,
        boxes,
    })
}
