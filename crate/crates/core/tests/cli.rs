use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidet::evalkit::iou::bev_corners;
use lidet::evalkit::EvalReport;
use lidet::harness::plot::parse_svg_boxes;
use lidet::harness::train::StepRecord;
use lidet::harness::{Checkpoint, Model, RunConfig, ROOT_ENV};
use lidet::scenegen::{read_detections, read_labels, DatasetManifest};
use lidet::transformer::EncoderConfig;

fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.root = "data".into();
    cfg.checkpoint_dir = "run".into();
    cfg.splits = BTreeMap::from([("train".to_string(), 3), ("val".to_string(), 2), ("test".to_string(), 0)]);
    let m = &mut cfg.model;
    m.d_model = 8;
    m.backbone.grid.pillar_size = [6.4, 6.4];
    m.backbone.pillar_channels = 6;
    m.backbone.bev_channels = [8, 8, 8, 8];
    m.backbone.convs_per_level = 1;
    m.encoder = EncoderConfig { layers: 1, heads: 2, points: 2, ffn_dim: 16 };
    m.decoder.layers = 2;
    m.decoder.heads = 2;
    m.decoder.num_queries = 6;
    m.decoder.ffn_dim = 16;
    cfg.optim.warmup_steps = 2;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &RunConfig) -> Self {
        let ws = Self { dir: tempfile::tempdir().unwrap() };
        ws.write_config("lidet.toml", cfg);
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write_config(&self, name: &str, cfg: &RunConfig) {
        fs::write(self.path(name), cfg.to_toml()).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lidet"))
            .current_dir(self.dir.path())
            .args(args)
            .env_remove(ROOT_ENV)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_log(path: &Path) -> Vec<StepRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_is_reproducible_and_refuses_to_overwrite() {
    let cfg = micro_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    let first = files_under(&ws.path("data"));
    assert!(!first.is_empty());

    let refused = ws.run(&["gen"]);
    assert_eq!(refused.status.code(), Some(3));
    assert!(stderr(&refused).contains("--force"), "{}", stderr(&refused));

    ws.ok(&["gen", "--force"]);
    assert_eq!(files_under(&ws.path("data")), first);

    let names = cfg.class_names();
    for split in ["train", "val"] {
        let m = DatasetManifest::load(&ws.path("data"), split).unwrap();
        assert_eq!(m.entries.len(), cfg.splits[split]);
        for i in 0..m.entries.len() {
            read_labels(&m.labels_path(i), &names).unwrap();
        }
    }
    assert!(DatasetManifest::load(&ws.path("data"), "test").unwrap().entries.is_empty());
}

#[test]
fn root_override_from_environment() {
    let ws = Workspace::new(&micro_config());
    let other = ws.path("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_lidet"))
        .current_dir(ws.dir.path())
        .arg("gen")
        .env(ROOT_ENV, &other)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(DatasetManifest::path_for(&other, "train").exists());
    assert!(!ws.path("data").exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let ws = Workspace::new(&micro_config());
    assert_eq!(ws.run(&["--config", "missing.toml", "gen"]).status.code(), Some(2));
    fs::write(ws.path("bad.toml"), "[optim]\nlr = -1.0\n").unwrap();
    assert_eq!(ws.run(&["--config", "bad.toml", "gen"]).status.code(), Some(2));
    fs::write(ws.path("typo.toml"), "[optim]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(ws.run(&["--config", "typo.toml", "gen"]).status.code(), Some(2));
}

#[test]
fn training_without_dataset_is_a_data_error() {
    let ws = Workspace::new(&micro_config());
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("manifest") || stderr(&out).contains("gen"), "{}", stderr(&out));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let mut cfg = micro_config();
    cfg.train.epochs = 0;
    cfg.train.checkpoint_every = 1;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["train"]);
    let files: Vec<String> = fs::read_dir(ws.path("run")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(files.iter().all(|f| !f.starts_with("step_")), "{files:?}");
    assert!(read_log(&ws.path("run/train_log.jsonl")).is_empty());

    let ck = Checkpoint::load(&ws.path("run/final.ckpt")).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.optimizer.as_ref().map(|o| o.step), Some(0));
    let fresh = Model::new(&cfg.model, 3, cfg.seed).unwrap();
    assert_eq!(ck.tensors, fresh.store.tensors());
}

#[test]
fn same_seed_gives_identical_training_and_checkpoints() {
    let mut cfg = micro_config();
    cfg.train.checkpoint_every = 1;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["--run-dir", "a", "train"]);
    ws.ok(&["--run-dir", "b", "train"]);
    ws.ok(&["--run-dir", "c", "--seed", "9", "train"]);
    let (a, b, c) = (read_log(&ws.path("a/train_log.jsonl")), read_log(&ws.path("b/train_log.jsonl")), read_log(&ws.path("c/train_log.jsonl")));
    assert_eq!(a.len(), 2);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|r| r.layers.len() == 2 && r.kd.is_none()));
    assert_eq!(fs::read(ws.path("a/final.ckpt")).unwrap(), fs::read(ws.path("b/final.ckpt")).unwrap());
    assert!(ws.path("a/step_000001.ckpt").exists());
    assert!(!ws.path("a/step_000002.ckpt").exists());
}

#[test]
fn non_finite_training_stops_with_last_good_checkpoint() {
    let mut cfg = micro_config();
    cfg.optim.lr = 1e300;
    cfg.optim.warmup_steps = 0;
    cfg.train.epochs = 3;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("last_good.ckpt"), "{}", stderr(&out));
    Checkpoint::load(&ws.path("run/last_good.ckpt")).unwrap();
}

#[test]
fn eval_is_deterministic_and_untrained_model_scores_low() {
    let mut cfg = micro_config();
    cfg.train.epochs = 0;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["train"]);
    ws.ok(&["eval", "--out", "r1.json"]);
    ws.ok(&["eval", "--out", "r2.json", "--split", "val", "--topk", "300"]);
    let (r1, r2) = (fs::read(ws.path("r1.json")).unwrap(), fs::read(ws.path("r2.json")).unwrap());
    assert_eq!(r1, r2);
    let report = EvalReport::load(&ws.path("r1.json")).unwrap();
    assert_eq!(report.num_frames, 2);
    assert!(report.map < 0.05, "{}", report.map);
    assert_eq!(ws.run(&["eval", "--topk", "0"]).status.code(), Some(2));
}

#[test]
fn predict_is_deterministic_and_plot_matches_detections() {
    let mut cfg = micro_config();
    cfg.inference.report_floor = 0.0;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["train"]);
    let cloud = DatasetManifest::load(&ws.path("data"), "val").unwrap().cloud_path(0);
    let cloud = cloud.to_str().unwrap();
    ws.ok(&["predict", cloud, "--out", "p1.txt", "--plot", "p1.svg", "--topk", "4"]);
    ws.ok(&["predict", cloud, "--out", "p2.txt"]);
    ws.ok(&["predict", cloud, "--out", "p3.txt", "--topk", "4"]);
    assert_eq!(fs::read(ws.path("p1.txt")).unwrap(), fs::read(ws.path("p3.txt")).unwrap());

    let names = cfg.class_names();
    let dets = read_detections(&ws.path("p1.txt"), &names).unwrap();
    assert_eq!(dets.len(), 4);
    assert_eq!(read_detections(&ws.path("p2.txt"), &names).unwrap().len(), 6);
    let svg = fs::read_to_string(ws.path("p1.svg")).unwrap();
    let plotted = parse_svg_boxes(&svg);
    assert_eq!(plotted.len(), dets.len());
    for (poly, (b, _)) in plotted.iter().zip(&dets) {
        for (p, q) in poly.iter().zip(bev_corners(b)) {
            assert!((p[0] - q[0]).abs() < 1e-5 && (p[1] - q[1]).abs() < 1e-5, "{p:?} vs {q:?}");
        }
    }
}

#[test]
fn predict_handles_empty_and_malformed_clouds() {
    let mut cfg = micro_config();
    cfg.train.epochs = 0;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["train"]);
    fs::write(ws.path("empty.bin"), b"").unwrap();
    ws.ok(&["predict", "empty.bin"]);
    assert!(read_detections(&ws.path("empty.det.txt"), &cfg.class_names()).unwrap().is_empty());

    fs::write(ws.path("broken.bin"), [0u8; 7]).unwrap();
    let out = ws.run(&["predict", "broken.bin"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn distill_without_weight_matches_plain_training() {
    let cfg = micro_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["--run-dir", "teacher", "--seed", "4", "train"]);
    ws.ok(&["--run-dir", "plain", "train"]);
    let mut zero = cfg.clone();
    zero.kd.lambda_kd = 0.0;
    ws.write_config("zero.toml", &zero);
    ws.ok(&["--config", "zero.toml", "--run-dir", "zero", "distill", "--checkpoint", "teacher/final.ckpt"]);
    ws.ok(&["--run-dir", "kd", "distill", "--checkpoint", "teacher/final.ckpt"]);

    let plain = read_log(&ws.path("plain/train_log.jsonl"));
    let zero_log = read_log(&ws.path("zero/train_log.jsonl"));
    assert_eq!(plain.len(), zero_log.len());
    for (p, z) in plain.iter().zip(&zero_log) {
        assert_eq!((p.loss, &p.layers, p.grad_norm), (z.loss, &z.layers, z.grad_norm));
    }
    assert_eq!(fs::read(ws.path("plain/final.ckpt")).unwrap(), fs::read(ws.path("zero/final.ckpt")).unwrap());
    assert!(read_log(&ws.path("kd/train_log.jsonl")).iter().all(|r| r.kd.is_some()));
}

#[test]
fn distill_rejects_a_different_architecture() {
    let cfg = micro_config();
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["--run-dir", "teacher", "train"]);
    let mut wider = cfg.clone();
    wider.model.decoder.num_queries = 7;
    ws.write_config("wider.toml", &wider);
    let out = ws.run(&["--config", "wider.toml", "--run-dir", "student", "distill", "--checkpoint", "teacher/final.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("decoder.queries"), "{}", stderr(&out));
}

#[test]
fn loading_under_a_changed_config_warns() {
    let mut cfg = micro_config();
    cfg.train.epochs = 0;
    let ws = Workspace::new(&cfg);
    ws.ok(&["gen"]);
    ws.ok(&["train"]);
    let quiet = ws.ok(&["eval"]);
    assert!(!stderr(&quiet).contains("different model configuration"));
    let mut changed = cfg.clone();
    changed.model.decoder.query_init_std = 0.2;
    ws.write_config("changed.toml", &changed);
    let out = ws.ok(&["--config", "changed.toml", "eval"]);
    assert!(stderr(&out).contains("different model configuration"), "{}", stderr(&out));
}
