use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::{load_split, scene_seed, Sample};
use super::model::Model;
use super::optim::AdamW;
use crate::backbone::BackboneInput;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Detection, EvalFrame, EvalReport};
use crate::numcore::{Tape, Tensor};
use crate::setloss::{kd_loss, LossBreakdown};

/// Name of the checkpoint written at the end of training.
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Name of the checkpoint written when a step produces a non-finite value.
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Grid assignment seed of scene `index`.
pub fn prepare_seed(seed: u64, index: usize) -> u64 {
    scene_seed(seed, "points", index)
}

/// Backbone inputs for every sample, computed once.
pub fn prepare_all(model: &Model, samples: &[Sample], seed: u64) -> Result<Vec<BackboneInput>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| model.prepare(&s.cloud, prepare_seed(seed, i)))
        .collect()
}

/// Loss summary of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch mean of the full objective.
    pub loss: f64,
    /// Batch mean of the ground-truth loss per decoder layer, unweighted `(cls, reg)`.
    pub layers: Vec<(f64, f64)>,
    /// Batch mean of the pseudo-label set loss when distilling.
    pub kd: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    pub history: Vec<StepRecord>,
    pub checkpoint: PathBuf,
    /// `(step, report)` of each validation run.
    pub validation: Vec<(usize, EvalReport)>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.history.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

struct SceneResult {
    loss: f64,
    gt: LossBreakdown,
    kd: Option<f64>,
    grads: Vec<Tensor>,
}

fn scene_gradients(model: &Model, input: &BackboneInput, sample: &Sample, teacher: Option<&[Detection]>, cfg: &RunConfig) -> Result<SceneResult> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, true);
    let layers = model.forward(&mut tape, &p, input)?;
    let out = kd_loss(
        &mut tape,
        &layers,
        &sample.gts,
        teacher.unwrap_or(&[]),
        cfg.model.range(),
        &cfg.loss,
        &cfg.kd,
    )?;
    let loss = tape.value(out.total).item();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let mut g = tape.backward(out.total)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.store.tensors())
        .map(|(&v, t)| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(SceneResult {
        loss,
        gt: out.gt,
        kd: out.kd.map(|b| b.total),
        grads,
    })
}

/// Detections for each prepared scene.
pub fn detect_all(model: &Model, inputs: &[BackboneInput], k: usize, pool: &rayon::ThreadPool) -> Result<Vec<Vec<Vec<Detection>>>> {
    pool.install(|| inputs.par_iter().map(|x| model.detect_layers(x, k)).collect())
}

/// Evaluation report of every decoder layer over the given samples.
pub fn evaluate_layers(model: &Model, samples: &[Sample], inputs: &[BackboneInput], cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<Vec<EvalReport>> {
    let dets = detect_all(model, inputs, cfg.inference.topk, pool)?;
    let names = cfg.class_names();
    (0..model.decoder.layers.len())
        .map(|l| {
            let frames: Vec<EvalFrame> = dets
                .iter()
                .zip(samples)
                .map(|(d, s)| EvalFrame {
                    detections: d[l].clone(),
                    gts: s.gts.clone(),
                })
                .collect();
            evaluate(&frames, &names, &cfg.eval)
        })
        .collect()
}

/// Last-layer evaluation report.
pub fn evaluate_model(model: &Model, samples: &[Sample], inputs: &[BackboneInput], cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<EvalReport> {
    Ok(evaluate_layers(model, samples, inputs, cfg, pool)?.pop().expect("at least one layer"))
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

fn write_record(log: &mut BufWriter<File>, path: &Path, rec: &StepRecord) -> Result<()> {
    let line = serde_json::to_string(rec).expect("record serialises");
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains a freshly initialised model on `cfg.train.split`. With a teacher, each scene is
/// also supervised by the teacher's detections.
pub fn train(cfg: &RunConfig, threads: usize, teacher: Option<&Model>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = thread_pool(threads)?;
    let names = cfg.class_names();
    let samples = load_split(&cfg.root, &cfg.train.split, &names)?;
    let mut model = Model::new(&cfg.model, names.len(), cfg.seed)?;
    if let Some(t) = teacher {
        t.store.check_compatible(&model.store)?;
    }
    let hash = cfg.model_hash();
    let inputs = prepare_all(&model, &samples, cfg.seed)?;
    let teacher_dets: Option<Vec<Vec<Detection>>> = match teacher {
        Some(t) => Some(pool.install(|| inputs.par_iter().map(|x| t.detect(x, cfg.inference.topk)).collect::<Result<_>>())?),
        None => None,
    };
    let val = if cfg.train.eval_every > 0 {
        let s = load_split(&cfg.root, &cfg.train.val_split, &names)?;
        let x = prepare_all(&model, &s, cfg.seed)?;
        Some((s, x))
    } else {
        None
    };

    let n = samples.len();
    let bs = cfg.train.batch_size;
    let total = match cfg.train.steps {
        Some(s) => s,
        None if n == 0 => 0,
        None => cfg.train.epochs * n.div_ceil(bs),
    };
    if total > 0 && n == 0 {
        return Err(Error::Data(format!("split `{}` has no scenes", cfg.train.split)));
    }

    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut opt = AdamW::new(&model.store);
    let mut history = Vec::with_capacity(total);
    let mut validation = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 0..total {
        if cursor >= order.len() {
            if !order.is_empty() {
                epoch += 1;
            }
            order = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, "epoch", epoch)));
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + bs).min(n)];
        cursor += batch.len();

        let results: Result<Vec<SceneResult>> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| scene_gradients(&model, &inputs[i], &samples[i], teacher_dets.as_ref().map(|d| d[i].as_slice()), cfg))
                .collect()
        });
        let lr = cfg.optim.lr_at(step, total);
        let stepped = results.and_then(|results| {
            let inv = 1.0 / results.len() as f64;
            let mut grads: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in &results {
                for (g, s) in grads.iter_mut().zip(&r.grads) {
                    g.add_assign(s);
                }
            }
            grads.iter_mut().for_each(|g| g.scale(inv));
            let mean = |f: &dyn Fn(&SceneResult) -> f64| results.iter().map(f).sum::<f64>() * inv;
            let layers = (0..results[0].gt.layers.len())
                .map(|l| (mean(&|r| r.gt.layers[l].0), mean(&|r| r.gt.layers[l].1)))
                .collect();
            let kd = teacher.map(|_| mean(&|r| r.kd.unwrap_or(0.0)));
            let loss = mean(&|r| r.loss);
            let grad_norm = opt.update(&mut model.store, &grads, lr, &cfg.optim)?;
            Ok(StepRecord { step, epoch, lr, loss, layers, kd, grad_norm })
        });
        let rec = match stepped {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                let path = dir.join(LAST_GOOD_CHECKPOINT);
                Checkpoint::capture(&model.store, hash, step as u64, Some(&opt)).save(&path)?;
                return Err(Error::Numeric(format!("{msg} at step {step}; last good checkpoint: {}", path.display())));
            }
            Err(e) => return Err(e),
        };
        if cfg.train.log_every > 0 && (step % cfg.train.log_every == 0 || step + 1 == total) {
            log::info!("step {step}/{total} epoch {epoch} lr {:.3e} loss {:.5} |g| {:.3}", rec.lr, rec.loss, rec.grad_norm);
        }
        write_record(&mut log, &log_path, &rec)?;
        history.push(rec);

        let done = step + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < total {
            Checkpoint::capture(&model.store, hash, done as u64, Some(&opt)).save(&dir.join(format!("step_{done:06}.ckpt")))?;
        }
        if let Some((vs, vx)) = &val {
            if done % cfg.train.eval_every == 0 || done == total {
                let report = evaluate_model(&model, vs, vx, cfg, &pool)?;
                log::info!("step {done} validation mAP {:.4} NDS {:.4}", report.map, report.nds);
                validation.push((done, report));
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = dir.join(FINAL_CHECKPOINT);
    Checkpoint::capture(&model.store, hash, total as u64, Some(&opt)).save(&checkpoint)?;
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
        checkpoint,
        validation,
    })
}

/// Model described by `cfg` with weights from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let mut model = Model::new(&cfg.model, cfg.class_names().len(), cfg.seed)?;
    ck.restore(&mut model.store, &cfg.model_hash())?;
    Ok(model)
}
