//! Acceptance suite. Runs as a plain binary (no libtest harness) and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lidet::backbone::{submanifold_conv, FeaturePyramid};
use lidet::evalkit::rotated_bev_iou;
use lidet::harness::{evaluate_layers, evaluate_model, generate_dataset, load_model, load_split, prepare_all, train, Model, RunConfig, Sample, TrainOutcome};
use lidet::harness::train::thread_pool;
use lidet::numcore::{grad_check_multi, uniform, Bound, Coords, LevelShape, ParamStore, Tape, Tensor, Var, DEFAULT_STEP};
use lidet::scenegen::{generate_scene, Box3D, PointCloudRange};
use lidet::setloss::{hungarian_match, set_loss, LossConfig};
use lidet::transformer::{level_layout, ms_deformable_attention, select_top_k, DeformAttention, Encoder, EncoderConfig, LayerPrediction, BOX_DIM};

/// Centre-heavy L1 weights used by the training runs below.
const CODE_WEIGHTS: [f64; BOX_DIM] = [20.0, 20.0, 5.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.0, 0.0];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    uniform(rng, shape, lo, hi)
}

// ---- A1 -------------------------------------------------------------------------------

const GRAD_TRIALS: u64 = 100;

fn op_error<F>(name: &str, shapes: &[&[usize]], range: (f64, f64), f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> lidet::Result<Var>,
{
    let mut worst = 0.0f64;
    for trial in 0..GRAD_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 104_729 + name.len() as u64);
        let xs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, range.0, range.1)).collect();
        let w = rand_tensor(&mut rng, &[256], -1.0, 1.0);
        let err = grad_check_multi(
            |t, v| {
                let y = f(t, v)?;
                let n = t.value(y).numel();
                let flat = t.reshape(y, &[n])?;
                let wv = t.constant(Tensor::from_vec(w.data()[..n].to_vec()));
                let p = t.mul(flat, wv)?;
                Ok(t.sum(p))
            },
            &xs,
            DEFAULT_STEP,
            Coords::All,
        )
        .unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    worst
}

fn op_suite() -> Vec<(&'static str, f64)> {
    let levels = [
        LevelShape { height: 4, width: 4, start: 0 },
        LevelShape { height: 2, width: 2, start: 16 },
    ];
    vec![
        ("add", op_error("add", &[&[3, 4], &[4]], (-2.0, 2.0), |t, v| t.add(v[0], v[1]))),
        ("sub", op_error("sub", &[&[3, 1], &[1, 4]], (-2.0, 2.0), |t, v| t.sub(v[0], v[1]))),
        ("mul", op_error("mul", &[&[2, 3, 4], &[3, 1]], (-2.0, 2.0), |t, v| t.mul(v[0], v[1]))),
        ("div", op_error("div", &[&[3, 4], &[3, 4]], (0.5, 2.0), |t, v| t.div(v[0], v[1]))),
        ("relu", op_error("relu", &[&[12]], (-2.0, 2.0), |t, v| Ok(t.relu(v[0])))),
        ("sigmoid", op_error("sigmoid", &[&[12]], (-4.0, 4.0), |t, v| Ok(t.sigmoid(v[0])))),
        ("exp", op_error("exp", &[&[12]], (-2.0, 2.0), |t, v| Ok(t.exp(v[0])))),
        ("log", op_error("log", &[&[12]], (0.2, 3.0), |t, v| Ok(t.log(v[0])))),
        ("sin", op_error("sin", &[&[12]], (-3.0, 3.0), |t, v| Ok(t.sin(v[0])))),
        ("cos", op_error("cos", &[&[12]], (-3.0, 3.0), |t, v| Ok(t.cos(v[0])))),
        ("abs", op_error("abs", &[&[12]], (-2.0, 2.0), |t, v| Ok(t.abs(v[0])))),
        ("neg", op_error("neg", &[&[12]], (-2.0, 2.0), |t, v| Ok(t.neg(v[0])))),
        ("sqrt", op_error("sqrt", &[&[12]], (0.2, 3.0), |t, v| Ok(t.sqrt(v[0])))),
        ("powf", op_error("powf", &[&[12]], (0.1, 2.0), |t, v| Ok(t.powf(v[0], 2.5)))),
        ("clamp_min", op_error("clamp_min", &[&[12]], (-1.0, 1.0), |t, v| Ok(t.clamp_min(v[0], 0.1)))),
        ("scale", op_error("scale", &[&[12]], (-1.0, 1.0), |t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", op_error("add_scalar", &[&[12]], (-1.0, 1.0), |t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("sum", op_error("sum", &[&[3, 4]], (-1.0, 1.0), |t, v| Ok(t.sum(v[0])))),
        ("mean", op_error("mean", &[&[3, 4]], (-1.0, 1.0), |t, v| Ok(t.mean(v[0])))),
        ("sum_axis", op_error("sum_axis", &[&[3, 4, 2]], (-1.0, 1.0), |t, v| t.sum_axis(v[0], 1))),
        ("matmul", op_error("matmul", &[&[2, 3, 4], &[4, 5]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]))),
        ("batched matmul", op_error("bmm", &[&[2, 3, 4], &[2, 4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]))),
        ("linear", op_error("linear", &[&[3, 4], &[4, 2], &[2]], (-1.0, 1.0), |t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("conv2d", op_error("conv2d", &[&[5, 4, 2], &[3, 3, 2, 3]], (-1.0, 1.0), |t, v| t.conv2d(v[0], v[1], 2, 1))),
        ("softmax", op_error("softmax", &[&[3, 5]], (-2.0, 2.0), |t, v| t.softmax(v[0], 0))),
        ("layer_norm", op_error("layer_norm", &[&[3, 6]], (-2.0, 2.0), |t, v| t.layer_norm(v[0], 1, 1e-5))),
        ("reshape", op_error("reshape", &[&[3, 4]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[2, 6]))),
        ("permute", op_error("permute", &[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose", op_error("transpose", &[&[3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0]))),
        ("concat", op_error("concat", &[&[2, 3], &[2, 2]], (-1.0, 1.0), |t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", op_error("slice", &[&[4, 5]], (-1.0, 1.0), |t, v| t.slice(v[0], 1, 1, 4))),
        ("gather_rows", op_error("gather", &[&[4, 3]], (-1.0, 1.0), |t, v| t.gather_rows(v[0], &[2, -1, 0, 2, 3]))),
        ("scatter_add_rows", op_error("scatter", &[&[5, 3]], (-1.0, 1.0), |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4))),
        ("segment_max", op_error("segmax", &[&[6, 3]], (-1.0, 1.0), |t, v| t.segment_max(v[0], &[0, 0, 2, 2, 2, 0], 3))),
        ("bilinear_sample", op_error("bilinear", &[&[4, 5, 3], &[6, 2]], (0.05, 2.95), |t, v| t.bilinear_sample(v[0], v[1]))),
        (
            "deform_sample",
            op_error("deform", &[&[20, 4], &[3, 2, 2, 2, 2], &[3, 2, 2, 2]], (0.05, 0.95), move |t, v| {
                let loc = t.scale(v[1], 3.0);
                t.deform_sample(v[0], loc, v[2], &levels)
            }),
        ),
    ]
}

fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
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
    cfg
}

/// Full micro-model loss: backbone, encoder, decoder and set loss against one scene.
fn end_to_end_error() -> lidet::Result<f64> {
    let cfg = micro_config();
    let mut model = Model::new(&cfg.model, cfg.class_names().len(), 3)?;
    // The initial encoder offsets land exactly on integer pixel coordinates, where
    // bilinear sampling has kinks; a small jitter moves the check to a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in model.store.tensors_mut() {
        t.add_assign(&uniform(&mut rng, t.shape(), -0.05, 0.05));
    }
    let scene = generate_scene(17, &cfg.scene)?;
    let input = model.prepare(&scene.cloud, 5)?;
    let range = cfg.model.range().clone();
    grad_check_multi(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let layers = model.forward(tape, &p, &input)?;
            Ok(set_loss(tape, &layers, &scene.boxes, &range, &cfg.loss)?.total)
        },
        model.store.tensors(),
        DEFAULT_STEP,
        Coords::Sample { n: 12, seed: 11 },
    )
}

fn a1() -> Outcome {
    let suite = op_suite();
    let (worst_op, worst) = suite.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let e2e = end_to_end_error().map_err(|e| format!("end-to-end check failed: {e}"))?;
    check(
        worst <= 1e-4 && e2e <= 1e-3,
        format!("{} ops, worst {worst_op} {worst:.2e} (≤ 1e-4); end-to-end {e2e:.2e} (≤ 1e-3)", suite.len()),
    )
}

// ---- A2 -------------------------------------------------------------------------------

fn brute_force(cost: &[f64], m: usize, n: usize) -> f64 {
    fn go(row: usize, used: &mut [bool], acc: f64, cost: &[f64], m: usize, n: usize, best: &mut f64) {
        if row == m {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(row + 1, used, acc + cost[row * n + j], cost, m, n, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, &mut vec![false; n], 0.0, cost, m, n, &mut best);
    best
}

fn random_box(rng: &mut ChaCha8Rng, class_id: usize) -> Box3D {
    Box3D::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(0.0..2.0)],
        [rng.random_range(0.5..6.0), rng.random_range(0.5..3.0), rng.random_range(1.0..3.0)],
        rng.random_range(-3.1..3.1),
        [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        class_id,
    )
    .unwrap()
}

fn loss_of(boxes: &[Tensor], logits: &[Tensor], gts: &[Box3D]) -> f64 {
    let mut tape = Tape::new();
    let layers: Vec<LayerPrediction> = boxes
        .iter()
        .zip(logits)
        .map(|(b, l)| LayerPrediction {
            refs: tape.constant(Tensor::zeros(&[b.shape()[0], 3])),
            boxes: tape.constant(b.clone()),
            logits: tape.constant(l.clone()),
        })
        .collect();
    let out = set_loss(&mut tape, &layers, gts, &PointCloudRange::default(), &LossConfig::default()).unwrap();
    out.breakdown.total
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(0..=7);
        let n = rng.random_range(m.max(1)..=8);
        let cost: Vec<f64> = (0..m * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = hungarian_match(&cost, m, n).map_err(|e| e.to_string())?;
        let total = got.total_cost(&cost, n);
        worst_gap = worst_gap.max((total - brute_force(&cost, m, n)).abs());
    }

    let mut worst_perm = 0.0f64;
    for trial in 0..50 {
        let n = 12;
        let m = 1 + trial % 6;
        let boxes: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[n, BOX_DIM], -1.0, 1.0)).collect();
        let logits: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[n, 3], -3.0, 3.0)).collect();
        let gts: Vec<Box3D> = (0..m).map(|i| random_box(&mut rng, i % 3)).collect();
        let base = loss_of(&boxes, &logits, &gts);

        let mut pp: Vec<usize> = (0..n).collect();
        pp.sort_by_key(|_| rng.random::<u32>());
        let pb: Vec<Tensor> = boxes.iter().map(|t| permute_rows(t, &pp)).collect();
        let pl: Vec<Tensor> = logits.iter().map(|t| permute_rows(t, &pp)).collect();
        let mut pg = gts.clone();
        pg.reverse();
        worst_perm = worst_perm.max((loss_of(&pb, &pl, &pg) - base).abs());
    }
    check(
        worst_gap <= 1e-9 && worst_perm <= 1e-9,
        format!("1000 matrices, worst optimum gap {worst_gap:.1e}; permutation change {worst_perm:.1e} (≤ 1e-9)"),
    )
}

// ---- training fixtures ----------------------------------------------------------------

fn base_config(root: &Path, run: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.root = root.to_path_buf();
    cfg.checkpoint_dir = root.join("runs").join(run);
    cfg.model.d_model = 64;
    cfg.model.backbone.grid.pillar_size = [1.6, 1.6];
    cfg.model.encoder.layers = 1;
    cfg.model.decoder.layers = 3;
    cfg.model.decoder.num_queries = 50;
    cfg.loss.code_weights = CODE_WEIGHTS;
    cfg.optim.lr = 1e-3;
    cfg.optim.warmup_steps = 50;
    cfg.train.log_every = 0;
    cfg
}

fn overfit_config(root: &Path) -> RunConfig {
    let mut cfg = base_config(root, "overfit");
    cfg.splits = BTreeMap::from([("train".to_string(), 8)]);
    cfg.train.batch_size = 8;
    cfg.train.steps = Some(500);
    cfg
}

fn generalization_config(root: &Path, seed: u64, run: &str) -> RunConfig {
    let mut cfg = base_config(root, run);
    cfg.seed = seed;
    cfg.splits = BTreeMap::from([("train".to_string(), 200), ("val".to_string(), 50)]);
    cfg.train.epochs = 5;
    cfg.train.batch_size = 1;
    cfg
}

struct Trained {
    cfg: RunConfig,
    outcome: TrainOutcome,
    samples: Vec<Sample>,
    report_map: f64,
    report_map2: f64,
}

fn train_and_eval(cfg: RunConfig, split: &str, teacher: Option<&Model>) -> lidet::Result<Trained> {
    let outcome = train(&cfg, 1, teacher)?;
    let samples = load_split(&cfg.root, split, &cfg.class_names())?;
    let inputs = prepare_all(&outcome.model, &samples, cfg.seed)?;
    let report = evaluate_model(&outcome.model, &samples, &inputs, &cfg, &thread_pool(1)?)?;
    Ok(Trained {
        report_map: report.map,
        report_map2: report.map_at(2.0).unwrap_or(0.0),
        cfg,
        outcome,
        samples,
    })
}

// ---- A3 / A5 --------------------------------------------------------------------------

fn a3(root: &Path, slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let cfg = overfit_config(root);
    generate_dataset(&cfg, false).map_err(|e| e.to_string())?;
    let run = train_and_eval(cfg, "train", None).map_err(|e| e.to_string())?;
    let (first, last) = (run.outcome.initial_loss().unwrap_or(0.0), run.outcome.final_loss().unwrap_or(f64::INFINITY));
    let ratio = last / first;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "loss {first:.4} -> {last:.4} ({:.2}% of initial, < 10%); train mAP@2m {:.3} (≥ 0.90); {secs:.0} s (≤ 600 s)",
        100.0 * ratio,
        run.report_map2
    );
    let ok = ratio < 0.10 && run.report_map2 >= 0.90 && secs <= 600.0;
    *slot = Some(run);
    check(ok, detail)
}

fn a5(overfit: Option<&Trained>) -> Outcome {
    let run = overfit.ok_or("overfit run unavailable")?;
    let inputs = prepare_all(&run.outcome.model, &run.samples, run.cfg.seed).map_err(|e| e.to_string())?;
    let pool = thread_pool(1).map_err(|e| e.to_string())?;
    let reports = evaluate_layers(&run.outcome.model, &run.samples, &inputs, &run.cfg, &pool).map_err(|e| e.to_string())?;
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let shown: Vec<String> = maps.iter().map(|m| format!("{m:.3}")).collect();
    check(
        maps[maps.len() - 1] >= maps[0],
        format!("train mAP by layer [{}]; last ≥ first", shown.join(", ")),
    )
}

// ---- A4 / A6 --------------------------------------------------------------------------

fn a4(root: &Path, slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let cfg = generalization_config(root, 0, "plain_0");
    generate_dataset(&cfg, false).map_err(|e| e.to_string())?;
    let run = train_and_eval(cfg, "val", None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("held-out mAP@2m {:.3} (≥ 0.50); {secs:.0} s (≤ 1800 s)", run.report_map2);
    let ok = run.report_map2 >= 0.50 && secs <= 1800.0;
    *slot = Some(run);
    check(ok, detail)
}

fn a6(root: &Path, teacher: Option<&Trained>) -> Outcome {
    let teacher = teacher.ok_or("teacher run unavailable")?;
    let mut plain = Vec::new();
    let mut distilled = Vec::new();
    for seed in 0..3u64 {
        let p = if seed == teacher.cfg.seed {
            teacher.report_map
        } else {
            let cfg = generalization_config(root, seed, &format!("plain_{seed}"));
            train_and_eval(cfg, "val", None).map_err(|e| e.to_string())?.report_map
        };
        let cfg = generalization_config(root, seed, &format!("distilled_{seed}"));
        let d = train_and_eval(cfg, "val", Some(&teacher.outcome.model)).map_err(|e| e.to_string())?.report_map;
        plain.push(p);
        distilled.push(d);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mp, md) = (mean(&plain), mean(&distilled));
    let pairs: Vec<String> = plain.iter().zip(&distilled).map(|(p, d)| format!("{p:.3}/{d:.3}")).collect();
    check(
        md >= mp - 0.02,
        format!("held-out mAP plain/distilled per seed [{}]; means {mp:.3} / {md:.3} (distilled ≥ plain − 0.02)", pairs.join(", ")),
    )
}

// ---- A7 -------------------------------------------------------------------------------

fn inside(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    u.abs() <= b.size[0] / 2.0 && v.abs() <= b.size[1] / 2.0
}

fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let ra = a.size[0].hypot(a.size[1]) / 2.0;
    let rb = b.size[0].hypot(b.size[1]) / 2.0;
    let lo = [(a.center[0] - ra).min(b.center[0] - rb), (a.center[1] - ra).min(b.center[1] - rb)];
    let hi = [(a.center[0] + ra).max(b.center[0] + rb), (a.center[1] + ra).max(b.center[1] + rb)];
    let (mut ina, mut inb, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let x = rng.random_range(lo[0]..hi[0]);
        let y = rng.random_range(lo[1]..hi[1]);
        let (pa, pb) = (inside(a, x, y), inside(b, x, y));
        ina += pa as usize;
        inb += pb as usize;
        both += (pa && pb) as usize;
    }
    both as f64 / (ina + inb - both) as f64
}

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let a = random_box(&mut rng, 0);
        let mut b = random_box(&mut rng, 0);
        b.center[0] = a.center[0] + rng.random_range(-3.0..3.0);
        b.center[1] = a.center[1] + rng.random_range(-3.0..3.0);
        let exact = rotated_bev_iou(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((exact - monte_carlo_iou(&a, &b, 100_000, &mut rng)).abs());
    }
    let unit = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0], 0).unwrap();
    let shifted = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, [0.0, 0.0], 0).unwrap();
    let half = rotated_bev_iou(&unit, &shifted).map_err(|e| e.to_string())?;
    check(
        worst <= 0.01 && (half - 1.0 / 3.0).abs() <= 1e-12,
        format!("500 pairs, worst Monte-Carlo gap {worst:.4} (≤ 0.01); half-offset squares {half:.15}"),
    )
}

// ---- A8 -------------------------------------------------------------------------------

fn encoder_shapes(rng: &mut ChaCha8Rng) -> lidet::Result<bool> {
    let d = 8;
    let mut store = ParamStore::new();
    let cfg = EncoderConfig { layers: 2, heads: 2, points: 2, ffn_dim: 16 };
    let enc = Encoder::new(&mut store, rng, &cfg, d, 4, 32)?;
    for _ in 0..20 {
        let h = 8 * rng.random_range(1..5);
        let w = 8 * rng.random_range(1..5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let levels = (0..4).map(|j| tape.constant(uniform(rng, &[h >> j, w >> j, d], -1.0, 1.0))).collect();
        let fp = FeaturePyramid { levels };
        let out = enc.forward(&mut tape, &p, &fp)?;
        if out.shapes(&tape) != fp.shapes(&tape) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn attention_weight_error(rng: &mut ChaCha8Rng) -> lidet::Result<f64> {
    let d = 16;
    let mut store = ParamStore::new();
    let w = DeformAttention::new(&mut store, rng, "a", d, 4, 4, 3)?;
    let shape = store.get(w.attn.w).shape().to_vec();
    *store.get_mut(w.attn.w) = uniform(rng, &shape, -2.0, 2.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let shapes: Vec<[usize; 3]> = (0..4).map(|j| [8 >> j, 8 >> j, d]).collect();
    let flat: Vec<Var> = shapes.iter().map(|s| tape.constant(uniform(rng, &[s[0] * s[1], d], -1.0, 1.0))).collect();
    let value = tape.concat(&flat, 0)?;
    let q = tape.constant(uniform(rng, &[30, d], -3.0, 3.0));
    let refs: Vec<[f64; 2]> = (0..30).map(|_| [rng.random(), rng.random()]).collect();
    let out = ms_deformable_attention(&mut tape, &p, &w, q, &refs, value, &level_layout(&shapes))?;
    Ok(tape
        .value(out.weights)
        .data()
        .chunks(12)
        .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

fn references_and_top_k(rng: &mut ChaCha8Rng) -> lidet::Result<(bool, bool)> {
    let mut cfg = micro_config();
    cfg.model.decoder.layers = 3;
    cfg.model.decoder.num_queries = 20;
    let mut model = Model::new(&cfg.model, 3, 1)?;
    // Large random decoder weights push refinements towards the unit-cube boundary.
    for (name, t) in model.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
        if name.starts_with("decoder.") {
            model.store.assign(&name, uniform(rng, &t, -3.0, 3.0))?;
        }
    }
    let scene = generate_scene(9, &cfg.scene)?;
    let input = model.prepare(&scene.cloud, 1)?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let preds = model.forward(&mut tape, &p, &input)?;
    let bounded = preds.iter().all(|pr| tape.value(pr.refs).data().iter().all(|v| (0.0..=1.0).contains(v)));
    let last = preds.last().expect("layers");
    let nq = cfg.model.decoder.num_queries;
    let mut counts = true;
    for k in [1, 7, nq, nq + 1, 300] {
        let dets = select_top_k(tape.value(last.boxes), tape.value(last.logits), k, cfg.model.range())?;
        counts &= dets.len() == k.min(nq);
    }
    Ok((bounded, counts))
}

fn dense_conv3d(dense: &[f64], dims: [usize; 3], cin: usize, w: &Tensor, cout: usize) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut out = vec![0.0; nx * ny * nz * cout];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut k = 0;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            let (sx, sy, sz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            let valid = (0..nx as i64).contains(&sx) && (0..ny as i64).contains(&sy) && (0..nz as i64).contains(&sz);
                            if valid {
                                let src = at(sx as usize, sy as usize, sz as usize);
                                for o in 0..cout {
                                    for i in 0..cin {
                                        out[at(x, y, z) * cout + o] += w.data()[(k * cin + i) * cout + o] * dense[src * cin + i];
                                    }
                                }
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn sparse_conv_error(rng: &mut ChaCha8Rng) -> lidet::Result<f64> {
    let dims = [5, 4, 3];
    let (cin, cout) = (3, 2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut coords: Vec<[usize; 3]> = Vec::new();
        while coords.len() < 12 {
            let c = [rng.random_range(0..dims[0]), rng.random_range(0..dims[1]), rng.random_range(0..dims[2])];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        coords.sort_unstable();
        let x = uniform(rng, &[coords.len(), cin], -1.0, 1.0);
        let w = uniform(rng, &[27, cin, cout], -1.0, 1.0);
        let mut dense = vec![0.0; dims.iter().product::<usize>() * cin];
        for (r, c) in coords.iter().enumerate() {
            let site = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
            dense[site * cin..(site + 1) * cin].copy_from_slice(&x.data()[r * cin..(r + 1) * cin]);
        }
        let oracle = dense_conv3d(&dense, dims, cin, &w, cout);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let y = submanifold_conv(&mut tape, &coords, dims, xv, wv)?;
        for (r, c) in coords.iter().enumerate() {
            let site = (c[0] * dims[1] + c[1]) * dims[2] + c[2];
            for o in 0..cout {
                worst = worst.max((tape.value(y).data()[r * cout + o] - oracle[site * cout + o]).abs());
            }
        }
    }
    Ok(worst)
}

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let e = |err: lidet::Error| err.to_string();
    let shapes = encoder_shapes(&mut rng).map_err(e)?;
    let weights = attention_weight_error(&mut rng).map_err(e)?;
    let (refs, topk) = references_and_top_k(&mut rng).map_err(e)?;
    let sparse = sparse_conv_error(&mut rng).map_err(e)?;
    check(
        shapes && weights <= 1e-6 && refs && topk && sparse <= 1e-10,
        format!(
            "encoder shapes {}; attention weight sum error {weights:.1e}; refs in unit cube {refs}; top-k counts {topk}; sparse conv gap {sparse:.1e}",
            if shapes { "preserved" } else { "changed" }
        ),
    )
}

// ---- A9 -------------------------------------------------------------------------------

fn forward_bits(model: &Model, sample: &Sample, seed: u64) -> lidet::Result<Vec<u64>> {
    let input = model.prepare(&sample.cloud, seed)?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let preds = model.forward(&mut tape, &p, &input)?;
    Ok(preds
        .iter()
        .flat_map(|pr| [pr.refs, pr.boxes, pr.logits])
        .flat_map(|v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect())
}

fn a9(root: &Path) -> Outcome {
    let e = |err: lidet::Error| err.to_string();
    let run = |name: &str| -> lidet::Result<(Vec<u8>, String, TrainOutcome, RunConfig)> {
        let mut cfg = base_config(root, name);
        cfg.seed = 5;
        cfg.splits = BTreeMap::from([("train".to_string(), 4), ("val".to_string(), 2)]);
        cfg.train.batch_size = 2;
        cfg.train.steps = Some(6);
        let out = train(&cfg, 1, None)?;
        let samples = load_split(&cfg.root, "val", &cfg.class_names())?;
        let inputs = prepare_all(&out.model, &samples, cfg.seed)?;
        let report = evaluate_model(&out.model, &samples, &inputs, &cfg, &thread_pool(1)?)?;
        let bytes = fs::read(&out.checkpoint).expect("checkpoint readable");
        Ok((bytes, report.to_text(), out, cfg))
    };
    let mut cfg = base_config(root, "repro_a");
    cfg.seed = 5;
    cfg.splits = BTreeMap::from([("train".to_string(), 4), ("val".to_string(), 2)]);
    generate_dataset(&cfg, false).map_err(e)?;
    let (ca, ra, out, cfg) = run("repro_a").map_err(e)?;
    let (cb, rb, _, _) = run("repro_b").map_err(e)?;

    let reloaded = load_model(&cfg, &out.checkpoint).map_err(e)?;
    let samples = load_split(&cfg.root, "val", &cfg.class_names()).map_err(e)?;
    let same_forward = forward_bits(&out.model, &samples[0], 1).map_err(e)? == forward_bits(&reloaded, &samples[0], 1).map_err(e)?;
    check(
        ca == cb && ra == rb && same_forward,
        format!(
            "checkpoints identical {}; reports identical {}; reloaded forward bit-exact {same_forward}",
            ca == cb,
            ra == rb
        ),
    )
}

// ---- runner ---------------------------------------------------------------------------

fn guarded<F: FnOnce() -> Outcome>(f: F) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

/// Optional comma-separated subset of criteria to run, e.g. `A1,A7`.
const FILTER_ENV: &str = "LIDET_ACCEPTANCE";

struct Runner {
    failed: usize,
    only: Option<Vec<String>>,
}

impl Runner {
    fn run<F: FnOnce() -> Outcome>(&mut self, id: &str, title: &str, f: F) {
        if self.only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            return;
        }
        let start = Instant::now();
        let r = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        match &r {
            Ok(d) => println!("{id} PASS {title}: {d} [{secs:.1} s]"),
            Err(d) => {
                self.failed += 1;
                println!("{id} FAIL {title}: {d} [{secs:.1} s]");
            }
        }
        std::io::stdout().flush().ok();
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let overfit_root = dir.path().join("overfit");
    let general_root = dir.path().join("general");
    let mut overfit = None;
    let mut general = None;

    let only = std::env::var(FILTER_ENV).ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut r = Runner { failed: 0, only };
    r.run("A1", "gradient suite", a1);
    r.run("A2", "matching oracle", a2);
    r.run("A3", "overfit run", || a3(&overfit_root, &mut overfit));
    r.run("A4", "generalization", || a4(&general_root, &mut general));
    r.run("A5", "decoder-depth trend", || a5(overfit.as_ref()));
    r.run("A6", "distillation non-degradation", || a6(&general_root, general.as_ref()));
    r.run("A7", "IoU oracle", a7);
    r.run("A8", "shape and invariant suite", a8);
    r.run("A9", "reproducibility", || a9(&dir.path().join("repro")));
    if r.failed > 0 {
        println!("{} acceptance criteria failed", r.failed);
        std::process::exit(1);
    }
}
