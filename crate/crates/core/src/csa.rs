//! Contextual Spatial Attention: channel attention enhancement followed
//! by a spatial attention extractor, producing one per-pixel weight map
//! in (0,1) per pyramid level. The maps steer the fusion of the dual
//! recurrent branches: high weight selects the small-kernel branch.

use crate::features::ContextPyramid;
use crate::layers::ConvLayer;
use crate::tensor::{ParamStore, PoolMode, Result, Tape, TensorError, TensorId};
use rand_chacha::ChaCha8Rng;

/// Channel attention: shared two-layer 1x1 bottleneck applied to the
/// spatially avg- and max-pooled vectors.
pub struct CaeParams {
    fc1: ConvLayer, // 1x1, C -> C/ratio
    fc2: ConvLayer, // 1x1, C/ratio -> C
    channels: usize,
    ratio: usize,
}

/// Spatial attention: channel-pooled pair -> single conv -> sigmoid.
pub struct SaeParams {
    conv: ConvLayer, // k x k, 2 -> 1
}

pub struct CsaLevelParams {
    pub cae: CaeParams,
    pub sae: SaeParams,
}

/// Independent parameters per pyramid level.
pub struct CsaParams {
    pub levels: [CsaLevelParams; 3],
}

impl CaeParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        ratio: usize,
    ) -> Result<Self> {
        if !channels.is_multiple_of(ratio) {
            return Err(TensorError::Invalid {
                op: "cae",
                detail: format!("channels {channels} not divisible by reduction ratio {ratio}"),
            });
        }
        let mid = channels / ratio;
        Ok(CaeParams {
            fc1: ConvLayer::init(store, rng, &format!("{name}.fc1"), channels, mid, 1, 1),
            fc2: ConvLayer::init(store, rng, &format!("{name}.fc2"), mid, channels, 1, 1),
            channels,
            ratio,
        })
    }
}

impl SaeParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
    ) -> Self {
        SaeParams {
            conv: ConvLayer::init(store, rng, &format!("{name}.conv"), 2, 1, kernel, 1),
        }
    }
}

/// Channel Attention Enhancement: reweights channels by
/// `sigmoid(t(f_avg) + t(f_max))` where `t` is the shared bottleneck.
pub fn cae(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CaeParams,
    context: TensorId,
) -> Result<TensorId> {
    let sh = tape.shape(context);
    if sh.len() != 4 || sh[1] != p.channels {
        return Err(TensorError::ShapeMismatch {
            op: "cae",
            detail: format!(
                "expected (N,{},H,W), got {:?} (ratio {})",
                p.channels, sh, p.ratio
            ),
        });
    }
    let f_avg = tape.spatial_pool(context, PoolMode::Avg)?;
    let f_max = tape.spatial_pool(context, PoolMode::Max)?;
    let transform = |tape: &mut Tape, x: TensorId| -> Result<TensorId> {
        let y = p.fc1.forward(tape, store, x)?;
        let y = tape.relu(y)?;
        p.fc2.forward(tape, store, y)
    };
    let ta = transform(tape, f_avg)?;
    let tm = transform(tape, f_max)?;
    let s = tape.add(ta, tm)?;
    let weights = tape.sigmoid(s)?; // (N, C, 1, 1) in (0,1)
    tape.mul(context, weights)
}

/// Spatial Attention Extractor: one map in (0,1) per pixel.
pub fn sae(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SaeParams,
    enhanced: TensorId,
) -> Result<TensorId> {
    let avg = tape.channel_pool(enhanced, PoolMode::Avg)?;
    let max = tape.channel_pool(enhanced, PoolMode::Max)?;
    let stacked = tape.concat(&[avg, max], 1)?;
    let conv = p.conv.forward(tape, store, stacked)?;
    tape.sigmoid(conv)
}

impl CsaParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        channels: usize,
        ratio: usize,
        sae_kernel: usize,
    ) -> Result<Self> {
        let level = |store: &mut ParamStore, rng: &mut ChaCha8Rng, i: usize| -> Result<CsaLevelParams> {
            Ok(CsaLevelParams {
                cae: CaeParams::init(store, rng, &format!("csa.l{i}.cae"), channels, ratio)?,
                sae: SaeParams::init(store, rng, &format!("csa.l{i}.sae"), sae_kernel),
            })
        };
        Ok(CsaParams {
            levels: [
                level(store, rng, 0)?,
                level(store, rng, 1)?,
                level(store, rng, 2)?,
            ],
        })
    }
}

/// Attention map per pyramid level: `A_l = sae(cae(context_l))`.
pub fn csa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CsaParams,
    ctx: &ContextPyramid,
) -> Result<[TensorId; 3]> {
    let mut maps = Vec::with_capacity(3);
    for (lp, &level) in p.levels.iter().zip(&ctx.levels) {
        let enhanced = cae(tape, store, &lp.cae, level)?;
        maps.push(sae(tape, store, &lp.sae, enhanced)?);
    }
    Ok([maps[0], maps[1], maps[2]])
}
