use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::scenegen::{
    generate_scene, read_cloud, read_labels, write_cloud, write_labels, Box3D, DatasetManifest, ManifestEntry, PointCloud,
};

/// Seed of scene `index` in `split` under run seed `seed`.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Writes every configured split under `cfg.root`. Refuses to touch an existing manifest
/// unless `force`.
pub fn generate_dataset(cfg: &RunConfig, force: bool) -> Result<Vec<DatasetManifest>> {
    let root = &cfg.root;
    if !force {
        if let Some(split) = cfg.splits.keys().find(|s| DatasetManifest::path_for(root, s).exists()) {
            return Err(Error::Data(format!(
                "dataset split `{split}` already exists under {} (use --force to overwrite)",
                root.display()
            )));
        }
    }
    let names = cfg.class_names();
    let mut out = Vec::new();
    for (split, &count) in &cfg.splits {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let scene = generate_scene(scene_seed(cfg.seed, split, i), &cfg.scene)?;
            let cloud = PathBuf::from(split).join(format!("{i:06}.bin"));
            let labels = PathBuf::from(split).join(format!("{i:06}.txt"));
            write_cloud(&root.join(&cloud), &scene.cloud)?;
            write_labels(&root.join(&labels), &scene.boxes, &names)?;
            entries.push(ManifestEntry { cloud, labels });
        }
        let manifest = DatasetManifest {
            root: root.clone(),
            split: split.clone(),
            entries,
            classes: names.clone(),
            range: cfg.scene.range,
            seed: cfg.seed,
        };
        manifest.save()?;
        out.push(manifest);
    }
    Ok(out)
}

/// One loaded scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud_path: PathBuf,
    pub cloud: PointCloud,
    pub gts: Vec<Box3D>,
}

/// Loads every scene of a split, checking that its classes match the config.
pub fn load_split(root: &Path, split: &str, class_names: &[String]) -> Result<Vec<Sample>> {
    let m = DatasetManifest::load(root, split)?;
    if m.classes != class_names {
        return Err(Error::Data(format!(
            "split `{split}` has classes {:?}, config expects {:?}",
            m.classes, class_names
        )));
    }
    (0..m.entries.len())
        .map(|i| {
            let cloud_path = m.cloud_path(i);
            Ok(Sample {
                cloud: read_cloud(&cloud_path)?,
                gts: read_labels(&m.labels_path(i), class_names)?,
                cloud_path,
            })
        })
        .collect()
}
