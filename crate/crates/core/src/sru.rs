//! Recurrent update units: the conv GRU cell, the attention-fused
//! dual-kernel selective cell, and the receptive-field calculator for
//! the multi-level stack.

use crate::layers::ConvLayer;
use crate::tensor::{ParamStore, Result, Tape, TensorError, TensorId, TensorValue};
use rand_chacha::ChaCha8Rng;

/// Gate convolutions of one GRU branch. All three share the kernel size
/// and shape-preserving padding.
pub struct GruBranchParams {
    pub wz: ConvLayer,
    pub wr: ConvLayer,
    pub wh: ConvLayer,
    pub kernel: usize,
}

impl GruBranchParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
        x_channels: usize,
        kernel: usize,
    ) -> Self {
        let cin = hidden + x_channels;
        GruBranchParams {
            wz: ConvLayer::init(store, rng, &format!("{name}.wz"), cin, hidden, kernel, 1),
            wr: ConvLayer::init(store, rng, &format!("{name}.wr"), cin, hidden, kernel, 1),
            wh: ConvLayer::init(store, rng, &format!("{name}.wh"), cin, hidden, kernel, 1),
            kernel,
        }
    }
}

/// One gated update:
/// `z = sigmoid(conv([h,x]; Wz))`, `r = sigmoid(conv([h,x]; Wr))`,
/// `h~ = tanh(conv([r*h, x]; Wh))`, `h' = (1-z)*h + z*h~`.
pub fn gru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    p: &GruBranchParams,
    h_prev: TensorId,
    x: TensorId,
) -> Result<TensorId> {
    let hsh = tape.shape(h_prev).to_vec();
    let xsh = tape.shape(x).to_vec();
    if hsh.len() != 4 || xsh.len() != 4 || hsh[2..] != xsh[2..] {
        return Err(TensorError::ShapeMismatch {
            op: "gru_cell",
            detail: format!("hidden {hsh:?} and input {xsh:?} are not spatially aligned"),
        });
    }
    let hx = tape.concat(&[h_prev, x], 1)?;
    let z = p.wz.forward(tape, store, hx)?;
    let z = tape.sigmoid(z)?;
    let r = p.wr.forward(tape, store, hx)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let rhx = tape.concat(&[rh, x], 1)?;
    let cand = p.wh.forward(tape, store, rhx)?;
    let cand = tape.tanh(cand)?;
    let ones = tape.constant(&TensorValue::full(hsh, 1.0));
    let keep = tape.sub(ones, z)?;
    let a = tape.mul(keep, h_prev)?;
    let b = tape.mul(z, cand)?;
    tape.add(a, b)
}

/// Dual-kernel branch pair of one selective unit; `small.kernel < large.kernel`.
pub struct SruLevelParams {
    pub small: GruBranchParams,
    pub large: GruBranchParams,
}

impl SruLevelParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        hidden: usize,
        x_channels: usize,
        kernels: (usize, usize),
    ) -> Result<Self> {
        let (s, l) = kernels;
        if s >= l {
            return Err(TensorError::Invalid {
                op: "sru",
                detail: format!("small kernel {s} must be < large kernel {l}"),
            });
        }
        Ok(SruLevelParams {
            small: GruBranchParams::init(store, rng, &format!("{name}.small"), hidden, x_channels, s),
            large: GruBranchParams::init(store, rng, &format!("{name}.large"), hidden, x_channels, l),
        })
    }
}

/// Attention-weighted fusion of the two branches:
/// `h' = A * h_small + (1 - A) * h_large`.
pub fn sru_cell(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SruLevelParams,
    h_prev: TensorId,
    x: TensorId,
    attention: TensorId,
) -> Result<TensorId> {
    let hs = gru_cell(tape, store, &p.small, h_prev, x)?;
    let hl = gru_cell(tape, store, &p.large, h_prev, x)?;
    let ash = tape.shape(attention).to_vec();
    let ones = tape.constant(&TensorValue::full(ash, 1.0));
    let inv = tape.sub(ones, attention)?;
    let ws = tape.mul(attention, hs)?;
    let wl = tape.mul(inv, hl)?;
    tape.add(ws, wl)
}

/// Layer stack descriptor for receptive-field analysis: (kernel, stride)
/// from the finest resolution inward.
#[derive(Clone, Debug)]
pub struct ReceptiveFieldSpec {
    pub layers: Vec<(usize, usize)>,
}

/// Receptive-field extent of a stack, measured in 1/4-resolution pixels.
///
/// Downsampling layers (stride > 1) contribute `(k-1)*stride`; stride-1
/// layers contribute `(k-1)*(1 + d)` where `d` is the number of
/// downsampling layers in front of them. For the three-level structure
/// with downsampling modeled as a 3x3 stride-2 conv and a GRU kernel k,
/// this yields fields k, 2k+3 and 3k+6.
pub fn receptive_field(spec: &ReceptiveFieldSpec) -> usize {
    let mut r = 1usize;
    let mut downs = 0usize;
    for &(k, s) in &spec.layers {
        if s > 1 {
            r += (k - 1) * s;
            downs += 1;
        } else {
            r += (k - 1) * (1 + downs);
        }
    }
    r
}

/// Receptive field of the GRU kernel `k` operating at pyramid `level`
/// (0 = 1/4, 1 = 1/8, 2 = 1/16), with each downsampling step modeled as
/// a 3x3 stride-2 conv.
pub fn level_receptive_field(level: usize, kernel: usize) -> usize {
    let mut layers = vec![(3usize, 2usize); level];
    layers.push((kernel, 1));
    receptive_field(&ReceptiveFieldSpec { layers })
}

/// The six (level, kernel, field) entries of a dual-kernel three-level
/// stack, level-major with the small branch first.
pub fn dual_kernel_fields(small: usize, large: usize) -> [(usize, usize, usize); 6] {
    let mut out = [(0, 0, 0); 6];
    for level in 0..3 {
        for (bi, &k) in [small, large].iter().enumerate() {
            out[level * 2 + bi] = (level, k, level_receptive_field(level, k));
        }
    }
    out
}
