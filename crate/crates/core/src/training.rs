//! Training: iteration-weighted sequence loss, elementwise gradient
//! clipping, AdamW, the one-cycle learning-rate schedule, bit-exact
//! checkpointing and the train/eval loops.

use crate::config::RunConfig;
use crate::data::{self, SceneMode, StereoSample};
use crate::metrics::{self, MetricReport, RegionMetrics};
use crate::model::Model;
use crate::tensor::{ParamStore, Tape, TensorError, TensorId, TensorValue};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    pub gamma: f64,
    /// Ground-truth entries above this (or non-finite) are masked out.
    pub max_disp_valid: f64,
}

/// `L = sum_i gamma^(N-i) * mean_valid |d_i - gt|`, iterations weighted
/// increasingly toward the final prediction.
pub fn sequence_loss(
    tape: &mut Tape,
    preds: &[TensorId],
    gt: &TensorValue,
    valid: Option<&[bool]>,
    cfg: &LossConfig,
) -> crate::tensor::Result<TensorId> {
    if preds.is_empty() {
        return Err(TensorError::Invalid {
            op: "sequence_loss",
            detail: "empty prediction list".into(),
        });
    }
    if !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(TensorError::Invalid {
            op: "sequence_loss",
            detail: format!("gamma {} must be in (0, 1]", cfg.gamma),
        });
    }
    let n_px = gt.numel();
    let mut mask = vec![0.0f64; n_px];
    let mut gt_clean = gt.data.clone();
    let mut count = 0usize;
    for i in 0..n_px {
        let ok = gt.data[i].is_finite()
            && gt.data[i] <= cfg.max_disp_valid
            && valid.is_none_or(|m| m[i]);
        if ok {
            mask[i] = 1.0;
            count += 1;
        } else {
            gt_clean[i] = 0.0; // masked anyway; keeps the tape finite
        }
    }
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "sequence_loss",
            detail: "no valid pixels".into(),
        });
    }
    let psh = tape.shape(preds[0]).to_vec();
    if psh.iter().product::<usize>() != n_px {
        return Err(TensorError::ShapeMismatch {
            op: "sequence_loss",
            detail: format!(
                "prediction shape {:?} does not cover {} ground-truth pixels",
                psh, n_px
            ),
        });
    }
    let gt_t = tape.constant_from(psh.clone(), gt_clean);
    let mask_t = tape.constant_from(psh.clone(), mask);
    let n = preds.len();
    let mut total: Option<TensorId> = None;
    for (i, &pred) in preds.iter().enumerate() {
        if tape.shape(pred) != psh.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "sequence_loss",
                detail: format!(
                    "prediction {} shape {:?} differs from {:?}",
                    i,
                    tape.shape(pred),
                    psh
                ),
            });
        }
        let diff = tape.sub(pred, gt_t)?;
        let l1 = tape.abs(diff)?;
        let masked = tape.mul(l1, mask_t)?;
        let sum = tape.sum_all(masked)?;
        let weight = cfg.gamma.powi((n - 1 - i) as i32) / count as f64;
        let term = tape.scale(sum, weight)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Clamps every gradient element into [-bound, bound].
pub fn clip_gradients(store: &mut ParamStore, bound: f64) {
    for (_, e) in store.iter_mut() {
        for g in &mut e.grad {
            *g = g.clamp(-bound, bound);
        }
    }
}

/// AdamW state: bias-corrected moments with decoupled weight decay.
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
}

impl OptimState {
    pub fn new(store: &ParamStore, weight_decay: f64, clip: f64) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        OptimState {
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip,
        }
    }

    /// One AdamW update from the gradients currently in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, e)) in store.iter_mut().enumerate() {
            for j in 0..e.data.len() {
                let g = e.grad[j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                e.data[j] -=
                    lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * e.data[j]);
            }
        }
    }
}

/// One-cycle schedule: linear warmup from peak/25 to peak over the first
/// 30% of steps, then linear decay to peak/1000 at the final step.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    assert!(total > 0);
    let step = step.min(total - 1);
    let start = peak / 25.0;
    let end = peak / 1000.0;
    let warm = ((0.3 * total as f64).round() as usize).clamp(1, total - 1);
    if step <= warm {
        start + (peak - start) * step as f64 / warm as f64
    } else {
        peak + (end - peak) * (step - warm) as f64 / (total - 1 - warm) as f64
    }
}

#[derive(thiserror::Error, Debug)]
pub enum CkptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkptRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serializable training snapshot: parameters, optimizer moments and the
/// numeric configuration, all as named f64 records.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub records: Vec<CkptRecord>,
}

const CKPT_MAGIC: &[u8; 4] = b"SSCK";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CkptError> {
    let io = |e: std::io::Error| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(f);
    out.write_all(CKPT_MAGIC).map_err(io)?;
    out.write_all(&ckpt.version.to_le_bytes()).map_err(io)?;
    out.write_all(&ckpt.seed.to_le_bytes()).map_err(io)?;
    out.write_all(&ckpt.step.to_le_bytes()).map_err(io)?;
    out.write_all(&(ckpt.records.len() as u32).to_le_bytes())
        .map_err(io)?;
    for r in &ckpt.records {
        let name = r.name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        out.write_all(name).map_err(io)?;
        out.write_all(&[1u8]).map_err(io)?; // dtype: f64
        out.write_all(&[r.shape.len() as u8]).map_err(io)?;
        for &ext in &r.shape {
            out.write_all(&(ext as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in &r.data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let io = |e: std::io::Error| CkptError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let bad = |detail: String| CkptError::Format {
        path: path.display().to_string(),
        detail,
    };
    let f = File::open(path).map_err(io)?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}, expected \"SSCK\"")));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u32b).map_err(|_| bad("truncated version".into()))?;
    let version = u32::from_le_bytes(u32b);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u64b).map_err(|_| bad("truncated seed".into()))?;
    let seed = u64::from_le_bytes(u64b);
    r.read_exact(&mut u64b).map_err(|_| bad("truncated step".into()))?;
    let step = u64::from_le_bytes(u64b);
    r.read_exact(&mut u32b)
        .map_err(|_| bad("truncated record count".into()))?;
    let count = u32::from_le_bytes(u32b);
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)
            .map_err(|_| bad("truncated record name length".into()))?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| bad("truncated record name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| bad("record name is not UTF-8".into()))?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)
            .map_err(|_| bad(format!("truncated dtype in record {name:?}")))?;
        if b1[0] != 1 {
            return Err(bad(format!("record {name:?}: unsupported dtype {}", b1[0])));
        }
        r.read_exact(&mut b1)
            .map_err(|_| bad(format!("truncated rank in record {name:?}")))?;
        let rank = b1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32b)
                .map_err(|_| bad(format!("truncated extents in record {name:?}")))?;
            shape.push(u32::from_le_bytes(u32b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64b)
                .map_err(|_| bad(format!("truncated data in record {name:?}")))?;
            data.push(f64::from_le_bytes(u64b));
        }
        records.push(CkptRecord { name, shape, data });
    }
    Ok(Checkpoint {
        version,
        seed,
        step,
        records,
    })
}

/// Numeric configuration fields snapshotted into checkpoint records.
fn config_records(cfg: &RunConfig) -> Vec<CkptRecord> {
    let variant_idx = match cfg.variant {
        crate::model::Variant::GruBaseline => 0.0,
        crate::model::Variant::SruSum => 1.0,
        crate::model::Variant::SruCsaContrary => 2.0,
        crate::model::Variant::SruCsaFull => 3.0,
    };
    let scalars: [(&str, f64); 17] = [
        ("config.channels", cfg.channels as f64),
        ("config.radius", cfg.radius as f64),
        ("config.kernel_small", cfg.kernels.0 as f64),
        ("config.kernel_large", cfg.kernels.1 as f64),
        ("config.iters_train", cfg.iters_train as f64),
        ("config.iters_eval", cfg.iters_eval as f64),
        ("config.gamma", cfg.gamma),
        ("config.lr_peak", cfg.lr_peak),
        ("config.steps", cfg.steps as f64),
        ("config.clip", cfg.clip),
        ("config.weight_decay", cfg.weight_decay),
        ("config.width", cfg.width as f64),
        ("config.height", cfg.height as f64),
        ("config.max_disp", cfg.max_disp),
        ("config.variant", variant_idx),
        ("config.csa_ratio", cfg.csa_ratio as f64),
        ("config.sae_kernel", cfg.sae_kernel as f64),
    ];
    scalars
        .iter()
        .map(|&(name, v)| CkptRecord {
            name: name.to_string(),
            shape: vec![1],
            data: vec![v],
        })
        .collect()
}

fn config_from_records(ckpt: &Checkpoint) -> Result<RunConfig, CkptError> {
    let mut cfg = RunConfig::default();
    let get = |name: &str| -> Option<f64> {
        ckpt.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.data[0])
    };
    let missing = |name: &str| CkptError::Format {
        path: String::new(),
        detail: format!("checkpoint lacks record {name:?}"),
    };
    cfg.channels = get("config.channels").ok_or_else(|| missing("config.channels"))? as usize;
    cfg.radius = get("config.radius").ok_or_else(|| missing("config.radius"))? as i64;
    cfg.kernels = (
        get("config.kernel_small").ok_or_else(|| missing("config.kernel_small"))? as usize,
        get("config.kernel_large").ok_or_else(|| missing("config.kernel_large"))? as usize,
    );
    cfg.iters_train = get("config.iters_train").unwrap_or(cfg.iters_train as f64) as usize;
    cfg.iters_eval = get("config.iters_eval").unwrap_or(cfg.iters_eval as f64) as usize;
    cfg.gamma = get("config.gamma").unwrap_or(cfg.gamma);
    cfg.lr_peak = get("config.lr_peak").unwrap_or(cfg.lr_peak);
    cfg.steps = get("config.steps").unwrap_or(cfg.steps as f64) as usize;
    cfg.clip = get("config.clip").unwrap_or(cfg.clip);
    cfg.weight_decay = get("config.weight_decay").unwrap_or(cfg.weight_decay);
    cfg.width = get("config.width").ok_or_else(|| missing("config.width"))? as usize;
    cfg.height = get("config.height").ok_or_else(|| missing("config.height"))? as usize;
    cfg.max_disp = get("config.max_disp").ok_or_else(|| missing("config.max_disp"))?;
    cfg.variant = match get("config.variant").ok_or_else(|| missing("config.variant"))? as usize {
        0 => crate::model::Variant::GruBaseline,
        1 => crate::model::Variant::SruSum,
        2 => crate::model::Variant::SruCsaContrary,
        _ => crate::model::Variant::SruCsaFull,
    };
    cfg.csa_ratio = get("config.csa_ratio").unwrap_or(cfg.csa_ratio as f64) as usize;
    cfg.sae_kernel = get("config.sae_kernel").unwrap_or(cfg.sae_kernel as f64) as usize;
    cfg.seed = ckpt.seed;
    Ok(cfg)
}

/// Snapshot of a training run ready to be written.
pub fn build_checkpoint(
    cfg: &RunConfig,
    model: &Model,
    optim: &OptimState,
    step: u64,
) -> Checkpoint {
    let mut records = config_records(cfg);
    for (_, e) in model.store.iter() {
        records.push(CkptRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.clone(),
        });
    }
    for (i, (_, e)) in model.store.iter().enumerate() {
        records.push(CkptRecord {
            name: format!("optim.m.{}", e.name),
            shape: e.shape.clone(),
            data: optim.m[i].clone(),
        });
        records.push(CkptRecord {
            name: format!("optim.v.{}", e.name),
            shape: e.shape.clone(),
            data: optim.v[i].clone(),
        });
    }
    Checkpoint {
        version: CKPT_VERSION,
        seed: cfg.seed,
        step,
        records,
    }
}

/// Rebuilds (config, model, optimizer, step) from a checkpoint file.
pub fn restore_checkpoint(
    path: &Path,
) -> Result<(RunConfig, Model, OptimState, u64), TrainError> {
    let ckpt = load_checkpoint(path)?;
    let cfg = config_from_records(&ckpt)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut optim = OptimState::new(&model.store, cfg.weight_decay, cfg.clip);
    optim.step = ckpt.step;
    let names: Vec<String> = model.store.iter().map(|(_, e)| e.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let fill = |target: &mut Vec<f64>, rec_name: &str| -> Result<(), CkptError> {
            let rec = ckpt
                .records
                .iter()
                .find(|r| r.name == rec_name)
                .ok_or_else(|| CkptError::Format {
                    path: path.display().to_string(),
                    detail: format!("checkpoint lacks record {rec_name:?}"),
                })?;
            if rec.data.len() != target.len() {
                return Err(CkptError::Format {
                    path: path.display().to_string(),
                    detail: format!(
                        "record {rec_name:?} has {} elements, expected {}",
                        rec.data.len(),
                        target.len()
                    ),
                });
            }
            target.copy_from_slice(&rec.data);
            Ok(())
        };
        let id = model.store.by_name(name).unwrap();
        fill(&mut model.store.entry_mut(id).data, name)?;
        fill(&mut optim.m[i], &format!("optim.m.{name}"))?;
        fill(&mut optim.v[i], &format!("optim.v.{name}"))?;
    }
    Ok((cfg, model, optim, ckpt.step))
}

#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
}

/// Per-step training record handed to the progress callback.
#[derive(Clone, Copy, Debug)]
pub struct TrainStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Deterministic training sample for a given run seed and step.
pub fn train_sample(cfg: &RunConfig, step: u64) -> crate::tensor::Result<StereoSample> {
    data::gen_stereogram(
        cfg.width,
        cfg.height,
        cfg.max_disp,
        data::mode_for_step(step),
        data::step_seed(cfg.seed, step),
    )
}

/// Held-out evaluation sample `index`, disjoint from the training stream.
pub fn eval_sample(cfg: &RunConfig, index: u64) -> crate::tensor::Result<StereoSample> {
    data::gen_stereogram(
        cfg.width,
        cfg.height,
        cfg.max_disp,
        data::mode_for_step(index.wrapping_add(1)),
        data::step_seed(cfg.seed ^ 0x4556_414c_5345_5421, index),
    )
}

/// One optimizer step on one sample; returns the loss value.
pub fn train_step(
    cfg: &RunConfig,
    model: &mut Model,
    optim: &mut OptimState,
    step: u64,
) -> Result<f64, TrainError> {
    let sample = train_sample(cfg, step)?;
    let mut tape = Tape::new();
    let out = model.run(&mut tape, &sample.left, &sample.right, cfg.iters_train)?;
    let loss_cfg = LossConfig {
        gamma: cfg.gamma,
        max_disp_valid: cfg.max_disp_valid(),
    };
    let loss = sequence_loss(
        &mut tape,
        &out.predictions,
        &sample.gt_disparity,
        Some(&sample.valid_mask),
        &loss_cfg,
    )?;
    let loss_val = tape.data(loss)[0];
    if !loss_val.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    model.store.zero_grads();
    tape.backward(loss)?;
    tape.export_param_grads(&mut model.store);
    clip_gradients(&mut model.store, cfg.clip);
    let lr = one_cycle_lr(step as usize, cfg.steps, cfg.lr_peak);
    optim.step(&mut model.store, lr);
    Ok(loss_val)
}

/// Runs training from `start_step` to `cfg.steps`, checkpointing into
/// `out_dir` every `checkpoint_every` steps and at the end.
pub fn train_loop(
    cfg: &RunConfig,
    model: &mut Model,
    optim: &mut OptimState,
    start_step: u64,
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(&TrainStats),
) -> Result<(), TrainError> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CkptError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    for step in start_step..cfg.steps as u64 {
        let loss = train_step(cfg, model, optim, step)?;
        let lr = one_cycle_lr(step as usize, cfg.steps, cfg.lr_peak);
        progress(&TrainStats {
            step,
            loss,
            lr,
        });
        let done = step + 1 == cfg.steps as u64;
        if let Some(dir) = out_dir {
            if done || (step + 1) % cfg.checkpoint_every as u64 == 0 {
                let ckpt = build_checkpoint(cfg, model, optim, step + 1);
                let name = if done {
                    "final.ckpt".to_string()
                } else {
                    format!("step{:06}.ckpt", step + 1)
                };
                save_checkpoint(&dir.join(name), &ckpt)?;
            }
        }
    }
    Ok(())
}

/// Forward-only disparity prediction (final iteration, full resolution).
pub fn predict(
    model: &Model,
    left: &TensorValue,
    right: &TensorValue,
    iters: usize,
) -> crate::tensor::Result<TensorValue> {
    let mut tape = Tape::new();
    let out = model.run(&mut tape, left, right, iters)?;
    Ok(tape.value(*out.predictions.last().unwrap()))
}

/// Aggregated evaluation over held-out samples. Returns the mean EPE and
/// a pixel-weighted metric report across all samples.
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    n_samples: usize,
    iters: usize,
) -> Result<(f64, MetricReport), TrainError> {
    let mut preds = Vec::with_capacity(n_samples);
    let mut gts = Vec::with_capacity(n_samples);
    let mut masks = Vec::with_capacity(n_samples);
    let mut edges = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample = eval_sample(cfg, i as u64)?;
        let pred = predict(model, &sample.left, &sample.right, iters)?;
        edges.push(metrics::canny_edges(
            &sample.left,
            cfg.canny_low,
            cfg.canny_high,
        )?);
        preds.push(pred);
        gts.push(sample.gt_disparity);
        masks.push(sample.valid_mask);
    }
    // Concatenate everything into one big field; per-pixel metrics are
    // permutation-invariant so this matches pixel-weighted averaging.
    let all_pred: Vec<f64> = preds.iter().flat_map(|p| p.data.iter().copied()).collect();
    let all_gt: Vec<f64> = gts.iter().flat_map(|g| g.data.iter().copied()).collect();
    let all_mask: Vec<bool> = masks.iter().flatten().copied().collect();
    let all_edges: Vec<bool> = edges.iter().flatten().copied().collect();
    let n = all_pred.len();
    let pred_t = TensorValue::new(vec![n], all_pred);
    let gt_t = TensorValue::new(vec![n], all_gt);
    let report = metrics::region_metrics(&pred_t, &gt_t, &all_mask, &all_edges)?;
    Ok((report.epe, report))
}

/// Renders an evaluation report as an aligned text table.
pub fn format_report(report: &MetricReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10}\n",
        "region", "pixels", "epe", "bad>1px"
    ));
    let mut row = |name: &str, r: &RegionMetrics| {
        s.push_str(&format!(
            "{:<12} {:>10} {:>10.4} {:>9.2}%\n",
            name, r.pixels, r.epe, r.bad_1px
        ));
    };
    if let Some(e) = &report.edge {
        row("edges", e);
    }
    if let Some(f) = &report.non_edge {
        row("non-edges", f);
    }
    s.push_str(&format!("{:<12} {:>10} {:>10.4}", "all", "", report.epe));
    for (t, pct) in &report.bad_over {
        s.push_str(&format!("  bad>{t}px {pct:.2}%"));
    }
    s.push('\n');
    s
}

/// Scene mode helper re-exported for binaries.
pub fn default_scene_mode() -> SceneMode {
    SceneMode::Planes
}
