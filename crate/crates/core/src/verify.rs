//! Finite-difference verification of every differentiable operation,
//! shared by the `gradcheck` command and the test suite.

use crate::csa::{cae, sae, CaeParams, SaeParams};
use crate::data;
use crate::model::{Model, ModelConfig, Variant};
use crate::sru::{gru_cell, sru_cell, GruBranchParams, SruLevelParams};
use crate::tensor::{
    grad_check, ParamStore, PoolMode, Result, Tape, TensorId, TensorValue,
};
use crate::training::{sequence_loss, LossConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel.is_finite() && self.max_rel < self.tolerance
    }
}

const ELEM_TOL: f64 = 1e-6;
const ELEM_EPS: f64 = 1e-5;

/// Random values bounded away from zero (for kinked functions) and from
/// integer sampling positions.
fn offcenter(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn check<F>(name: &str, store: &mut ParamStore, probes: Option<usize>, build: F) -> Result<GradCheckResult>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<TensorId>,
{
    let max_rel = grad_check(store, ELEM_EPS, probes, build)?;
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel,
        tolerance: ELEM_TOL,
    })
}

fn sq_sum(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let y = tape.mul(x, x)?;
    tape.sum_all(y)
}

/// Finite-difference checks for each elementary operation.
pub fn elementary_checks() -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(7);

    // conv2d, stride 1 then stride 2, squared so weight grads depend on data.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![1, 2, 5, 6], offcenter(rng, 60));
        let w = store.add("w", vec![3, 2, 3, 3], offcenter(rng, 54));
        let b = store.add("b", vec![3], offcenter(rng, 3));
        let w2 = store.add("w2", vec![2, 3, 3, 3], offcenter(rng, 54));
        let b2 = store.add("b2", vec![2], offcenter(rng, 2));
        out.push(check("conv2d", &mut store, None, |s, t| {
            let (x, w, b) = (t.param_cached(s, x), t.param_cached(s, w), t.param_cached(s, b));
            let y = t.conv2d(x, w, b, 1, 1)?;
            let (w2, b2) = (t.param_cached(s, w2), t.param_cached(s, b2));
            let y2 = t.conv2d(y, w2, b2, 2, 1)?;
            sq_sum(t, y2)
        })?);
    }

    // average pooling along the last axis.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![3, 4, 8], offcenter(rng, 96));
        out.push(check("avg_pool_last_dim", &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.avg_pool_last_dim(x, 2, 2)?;
            sq_sum(t, y)
        })?);
    }

    for (name, mode) in [("spatial_pool_avg", PoolMode::Avg), ("spatial_pool_max", PoolMode::Max)] {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![1, 3, 4, 5], offcenter(rng, 60));
        out.push(check(name, &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.spatial_pool(x, mode)?;
            sq_sum(t, y)
        })?);
    }
    for (name, mode) in [("channel_pool_avg", PoolMode::Avg), ("channel_pool_max", PoolMode::Max)] {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![1, 3, 4, 5], offcenter(rng, 60));
        out.push(check(name, &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.channel_pool(x, mode)?;
            sq_sum(t, y)
        })?);
    }

    for name in ["sigmoid", "tanh", "relu", "abs"] {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![2, 3, 4], offcenter(rng, 24));
        out.push(check(name, &mut store, None, move |s, t| {
            let x = t.param_cached(s, x);
            let y = match name {
                "sigmoid" => t.sigmoid(x)?,
                "tanh" => t.tanh(x)?,
                "relu" => t.relu(x)?,
                _ => t.abs(x)?,
            };
            sq_sum(t, y)
        })?);
    }

    // broadcasting elementwise arithmetic.
    {
        let mut store = ParamStore::new();
        let a = store.add("a", vec![2, 3, 4], offcenter(rng, 24));
        let b = store.add("b", vec![1, 3, 1], offcenter(rng, 3));
        out.push(check("elementwise_broadcast", &mut store, None, |s, t| {
            let (a, b) = (t.param_cached(s, a), t.param_cached(s, b));
            let y = t.mul(a, b)?;
            let y = t.add(y, a)?;
            let y = t.sub(y, b)?;
            sq_sum(t, y)
        })?);
    }

    // per-pixel channel L2 normalization.
    {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![2, 5, 3, 4], offcenter(rng, 120));
        out.push(check("channel_l2_normalize", &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.channel_l2_normalize(x, 1e-12)?;
            sq_sum(t, y)
        })?);
    }

    // concat / reshape / scale / clamp_min plumbing.
    {
        let mut store = ParamStore::new();
        let pos: Vec<f64> = offcenter(rng, 6).iter().map(|v| v.abs() + 0.2).collect();
        let a = store.add("a", vec![2, 3], pos);
        let b = store.add("b", vec![1, 3], offcenter(rng, 3).iter().map(|v| v.abs() + 0.2).collect());
        out.push(check("concat_reshape_scale_clamp", &mut store, None, |s, t| {
            let (a, b) = (t.param_cached(s, a), t.param_cached(s, b));
            let y = t.concat(&[a, b], 0)?;
            let y = t.reshape(y, vec![9])?;
            let y = t.scale(y, 0.5)?;
            let y = t.clamp_min(y, 0.05)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![1, 2, 3, 4], offcenter(rng, 24));
        out.push(check("bilinear_upsample2x", &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.bilinear_upsample2x(x)?;
            sq_sum(t, y)
        })?);
    }

    // width sampling, differentiable in both volume and positions.
    {
        let mut store = ParamStore::new();
        let vol = store.add("vol", vec![3, 4, 6], offcenter(rng, 72));
        let pos: Vec<f64> = (0..24)
            .map(|_| rng.gen_range(0..4) as f64 + rng.gen_range(0.3..0.7))
            .collect();
        let p = store.add("pos", vec![2, 3, 4], pos);
        out.push(check("linear_sample_width", &mut store, None, |s, t| {
            let (vol, p) = (t.param_cached(s, vol), t.param_cached(s, p));
            let y = t.linear_sample_width(vol, p)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let x = store.add("x", vec![3, 2, 4], offcenter(rng, 24));
        out.push(check("softmax", &mut store, None, |s, t| {
            let x = t.param_cached(s, x);
            let y = t.softmax(x, 0)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let f = store.add("f", vec![1, 3, 2, 5], offcenter(rng, 30));
        let g = store.add("g", vec![1, 3, 2, 5], offcenter(rng, 30));
        out.push(check("all_pairs", &mut store, None, |s, t| {
            let (f, g) = (t.param_cached(s, f), t.param_cached(s, g));
            let y = t.all_pairs(f, g)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let v = store.add("v", vec![1, 1, 2, 3], offcenter(rng, 6));
        let logits = store.add("logits", vec![9, 16, 2, 3], offcenter(rng, 864));
        out.push(check("convex_upsample", &mut store, None, |s, t| {
            let (v, l) = (t.param_cached(s, v), t.param_cached(s, logits));
            let w = t.softmax(l, 0)?;
            let y = t.convex_combine(v, w)?;
            sq_sum(t, y)
        })?);
    }

    Ok(out)
}

/// Finite-difference checks for the composite network blocks.
pub fn composite_checks() -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(11);

    {
        let mut store = ParamStore::new();
        let p = GruBranchParams::init(&mut store, rng, "gru", 4, 3, 3);
        let h = store.add("h", vec![1, 4, 3, 4], offcenter(rng, 48));
        let x = store.add("x", vec![1, 3, 3, 4], offcenter(rng, 36));
        out.push(check("gru_cell", &mut store, Some(200), move |s, t| {
            let (h, x) = (t.param_cached(s, h), t.param_cached(s, x));
            let y = gru_cell(t, s, &p, h, x)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let p = SruLevelParams::init(&mut store, rng, "sru", 4, 3, (1, 3))?;
        let h = store.add("h", vec![1, 4, 3, 4], offcenter(rng, 48));
        let x = store.add("x", vec![1, 3, 3, 4], offcenter(rng, 36));
        let a = store.add("a_logit", vec![1, 1, 3, 4], offcenter(rng, 12));
        out.push(check("sru_cell", &mut store, Some(200), move |s, t| {
            let (h, x, a) = (t.param_cached(s, h), t.param_cached(s, x), t.param_cached(s, a));
            let att = t.sigmoid(a)?;
            let y = sru_cell(t, s, &p, h, x, att)?;
            sq_sum(t, y)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let cp = CaeParams::init(&mut store, rng, "cae", 4, 2)?;
        let sp = SaeParams::init(&mut store, rng, "sae", 3);
        let ctx = store.add("ctx", vec![1, 4, 4, 5], offcenter(rng, 80));
        out.push(check("csa_stack", &mut store, Some(200), move |s, t| {
            let ctx = t.param_cached(s, ctx);
            let e = cae(t, s, &cp, ctx)?;
            let a = sae(t, s, &sp, e)?;
            sq_sum(t, a)
        })?);
    }

    // sequence loss w.r.t. the predictions themselves.
    {
        let mut store = ParamStore::new();
        let p1 = store.add("p1", vec![1, 1, 4, 4], offcenter(rng, 16));
        let p2 = store.add("p2", vec![1, 1, 4, 4], offcenter(rng, 16));
        let gt = TensorValue::new(vec![1, 1, 4, 4], offcenter(rng, 16));
        let cfg = LossConfig {
            gamma: 0.9,
            max_disp_valid: 10.0,
        };
        out.push(check("sequence_loss", &mut store, None, move |s, t| {
            let preds = [t.param_cached(s, p1), t.param_cached(s, p2)];
            sequence_loss(t, &preds, &gt, None, &cfg)
        })?);
    }

    Ok(out)
}

/// End-to-end check: gradient of the 2-iteration sequence loss on a
/// 32x48 stereo instance, probed on a deterministic parameter subset.
pub fn end_to_end_check(probes: usize) -> Result<GradCheckResult> {
    let cfg = ModelConfig {
        channels: 8,
        radius: 2,
        kernels: (1, 3),
        variant: Variant::SruCsaFull,
        csa_ratio: 4,
        sae_kernel: 3,
    };
    let mut model = Model::new(cfg, 3)?;
    let mut store = std::mem::take(&mut model.store);
    // The residual head ships zero-initialized, which puts every disparity
    // exactly on the clamp boundary where central differences read half the
    // subgradient. Give it small random weights so the finite-difference
    // comparison probes generic, off-boundary points.
    {
        let rng = &mut ChaCha8Rng::seed_from_u64(17);
        let id = store.by_name("head.c2.weight").expect("head weights");
        for v in &mut store.entry_mut(id).data {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    // A small scene with fractional disparity; built directly (not via
    // the generator) because the instance is below the generator minimum.
    let rng = &mut ChaCha8Rng::seed_from_u64(21);
    let (h, w) = (32usize, 48usize);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let right = TensorValue::new(vec![1, h, w], noise);
    let mut left_data = vec![0.0; h * w];
    let d = 2.5f64;
    for i in 0..h {
        for j in 0..w {
            let p = (j as f64 - d).clamp(0.0, (w - 1) as f64);
            let j0 = p.floor() as usize;
            let j1 = (j0 + 1).min(w - 1);
            let f = p - j0 as f64;
            left_data[i * w + j] =
                right.data[i * w + j0] * (1.0 - f) + right.data[i * w + j1] * f;
        }
    }
    let left = TensorValue::new(vec![1, h, w], left_data);
    let gt = TensorValue::new(vec![1, 1, h, w], vec![d; h * w]);
    let loss_cfg = LossConfig {
        gamma: 0.9,
        max_disp_valid: 18.0,
    };
    let max_rel = grad_check(&mut store, 1e-5, Some(probes), |s, t| {
        let out = model.run_with(t, s, &left, &right, 2)?;
        sequence_loss(t, &out.predictions, &gt, None, &loss_cfg)
    })?;
    model.store = store;
    Ok(GradCheckResult {
        name: "end_to_end_loss".to_string(),
        max_rel,
        tolerance: 1e-4,
    })
}

/// The full verification suite in report order.
pub fn full_suite(end_to_end_probes: usize) -> Result<Vec<GradCheckResult>> {
    let mut results = elementary_checks()?;
    results.extend(composite_checks()?);
    results.push(end_to_end_check(end_to_end_probes)?);
    Ok(results)
}

/// Convenience used by binaries to keep data generation out of main.
pub fn quick_sample(seed: u64) -> Result<data::StereoSample> {
    data::gen_stereogram(96, 64, 12.0, data::SceneMode::Planes, seed)
}
