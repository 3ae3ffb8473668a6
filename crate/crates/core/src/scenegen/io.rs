use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{wrap_angle, Box3D, PointCloud, PointCloudRange};
use crate::error::{Error, Result};

const BYTES_PER_POINT: usize = 16;
const LABEL_COLUMNS: [&str; 10] = ["class", "cx", "cy", "cz", "l", "w", "h", "yaw", "vx", "vy"];

/// Writes `pc` as raw little-endian `f32` quadruples.
pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(pc.len() * BYTES_PER_POINT);
    for p in &pc.points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % BYTES_PER_POINT != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("length {} is not a multiple of {BYTES_PER_POINT} bytes", bytes.len()),
        });
    }
    let points = bytes
        .chunks_exact(BYTES_PER_POINT)
        .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
        .collect();
    PointCloud::new(points).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn format_record(out: &mut String, b: &Box3D, class_names: &[String], score: Option<f64>) -> Result<()> {
    let name = class_names
        .get(b.class_id)
        .ok_or_else(|| Error::Contract(format!("class id {} has no name", b.class_id)))?;
    write!(out, "{name}").unwrap();
    let vals = [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0],
        b.size[1],
        b.size[2],
        b.yaw,
        b.velocity[0],
        b.velocity[1],
    ];
    for v in vals {
        write!(out, " {v:.8e}").unwrap();
    }
    write!(out, " {}", b.sparse as u8).unwrap();
    if let Some(s) = score {
        write!(out, " {s:.8e}").unwrap();
    }
    out.push('\n');
    Ok(())
}

fn write_records(path: &Path, boxes: &[Box3D], scores: Option<&[f64]>, class_names: &[String]) -> Result<()> {
    let mut out = String::from("# ");
    out.push_str(&LABEL_COLUMNS.join(" "));
    out.push_str(" sparse");
    if scores.is_some() {
        out.push_str(" score");
    }
    out.push('\n');
    for (i, b) in boxes.iter().enumerate() {
        format_record(&mut out, b, class_names, scores.map(|s| s[i]))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One box per line, numbers at 9 significant digits, preceded by a `#` header naming the columns.
pub fn write_labels(path: &Path, boxes: &[Box3D], class_names: &[String]) -> Result<()> {
    write_records(path, boxes, None, class_names)
}

/// Label records with a trailing `score` column.
pub fn write_detections(path: &Path, boxes: &[Box3D], scores: &[f64], class_names: &[String]) -> Result<()> {
    if boxes.len() != scores.len() {
        return Err(Error::Contract("one score per detection required".into()));
    }
    write_records(path, boxes, Some(scores), class_names)
}

fn read_records(path: &Path, class_names: &[String]) -> Result<Vec<(Box3D, Option<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let columns: Vec<&str> = header
        .strip_prefix('#')
        .ok_or_else(|| perr(hline + 1, "header must start with '#'".into()))?
        .split_whitespace()
        .collect();
    let col = |name: &str| columns.iter().position(|c| *c == name);
    let mut required = [0usize; 10];
    for (slot, name) in required.iter_mut().zip(LABEL_COLUMNS) {
        *slot = col(name).ok_or_else(|| perr(hline + 1, format!("header lacks column `{name}`")))?;
    }
    let (sparse_col, score_col) = (col("sparse"), col("score"));

    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let get = |c: usize, name: &str| {
            fields
                .get(c)
                .copied()
                .ok_or_else(|| perr(lineno, format!("missing field `{name}`")))
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = get(c, name)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(lineno, format!("field `{name}`: bad number `{s}`")))
        };
        let class = get(required[0], "class")?;
        let class_id = class_names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| perr(lineno, format!("unknown class `{class}`")))?;
        let v: Vec<f64> = (1..10).map(|k| num(required[k], LABEL_COLUMNS[k])).collect::<Result<_>>()?;
        let mut b = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], wrap_angle(v[6]), [v[7], v[8]], class_id)
            .map_err(|e| perr(lineno, e.to_string()))?;
        if let Some(c) = sparse_col {
            b.sparse = num(c, "sparse")? != 0.0;
        }
        let score = score_col.map(|c| num(c, "score")).transpose()?;
        out.push((b, score));
    }
    Ok(out)
}

pub fn read_labels(path: &Path, class_names: &[String]) -> Result<Vec<Box3D>> {
    Ok(read_records(path, class_names)?.into_iter().map(|(b, _)| b).collect())
}

pub fn read_detections(path: &Path, class_names: &[String]) -> Result<Vec<(Box3D, f64)>> {
    read_records(path, class_names)?
        .into_iter()
        .map(|(b, s)| {
            s.map(|s| (b, s)).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "detections need a `score` column".into(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cloud: PathBuf,
    pub labels: PathBuf,
}

/// One split of a generated dataset. Entry paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
    pub classes: Vec<String>,
    pub range: PointCloudRange,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn path_for(root: &Path, split: &str) -> PathBuf {
        root.join(format!("{split}.manifest.json"))
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::path_for(&self.root, &self.split);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads and validates a split manifest: every referenced file must exist.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let path = Self::path_for(root, split);
        if !path.exists() {
            return Err(Error::Data(format!(
                "no manifest for split `{split}` at {} (run `lidet gen` first)",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        m.root = root.to_path_buf();
        for e in &m.entries {
            for p in [&e.cloud, &e.labels] {
                if !root.join(p).exists() {
                    return Err(Error::Data(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn cloud_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].cloud)
    }

    pub fn labels_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].labels)
    }
}
