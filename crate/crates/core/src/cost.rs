//! All-pairs correlation volume, its 4-level pyramid, and the local cost
//! lookup consumed by the 1/4-resolution update unit.

use crate::tensor::{Result, Tape, TensorError, TensorId};

/// Matching cost at four width scales. Level 0 is the raw volume
/// (H, W, W); each next level halves the candidate axis by window-2
/// means.
pub struct CorrelationPyramid {
    pub levels: [TensorId; 4],
}

/// `out[i,j,k] = sum_c f[c,i,j] * g[c,i,k]`, shape (H/4, W/4, W/4).
pub fn build_all_pairs(tape: &mut Tape, f: TensorId, g: TensorId) -> Result<TensorId> {
    tape.all_pairs(f, g)
}

pub fn build_pyramid(tape: &mut Tape, volume: TensorId) -> Result<CorrelationPyramid> {
    let last = *tape.shape(volume).last().unwrap_or(&0);
    if last < 8 {
        return Err(TensorError::Invalid {
            op: "build_pyramid",
            detail: format!("candidate axis extent {last} too small for a 4-level pyramid (need >= 8)"),
        });
    }
    let l1 = volume;
    let l2 = tape.avg_pool_last_dim(l1, 2, 2)?;
    let l3 = tape.avg_pool_last_dim(l2, 2, 2)?;
    let l4 = tape.avg_pool_last_dim(l3, 2, 2)?;
    Ok(CorrelationPyramid {
        levels: [l1, l2, l3, l4],
    })
}

/// Samples `2r+1` correlation values per pyramid level around the current
/// disparity estimate. Positions at level `l` are `(j - d) / 2^l + delta`
/// for `delta in [-r, r]`, linearly interpolated with border clamping.
/// Output channels are level-major, offset-ascending: (1, 4*(2r+1), H, W).
/// Differentiable w.r.t. both the volume and the disparity.
pub fn lookup(
    tape: &mut Tape,
    pyr: &CorrelationPyramid,
    disparity: TensorId,
    radius: i64,
) -> Result<TensorId> {
    if radius < 1 {
        return Err(TensorError::Invalid {
            op: "lookup",
            detail: format!("radius must be >= 1, got {radius}"),
        });
    }
    let r = radius as usize;
    let dsh = tape.shape(disparity).to_vec();
    if dsh.len() != 4 || dsh[0] != 1 || dsh[1] != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "lookup",
            detail: format!("disparity must be (1,1,H,W), got {dsh:?}"),
        });
    }
    let (h, w) = (dsh[2], dsh[3]);
    let k = 2 * r + 1;

    // Column index grid, j at pixel (i, j).
    let mut grid = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            grid[i * w + j] = j as f64;
        }
    }
    let grid = tape.constant_from(vec![1, 1, h, w], grid);
    let base = tape.sub(grid, disparity)?; // match column j - d

    let offsets: Vec<f64> = (-(r as i64)..=r as i64).map(|d| d as f64).collect();
    let offsets = tape.constant_from(vec![k, 1, 1], offsets);

    let mut per_level = Vec::with_capacity(4);
    for (lvl, &vol) in pyr.levels.iter().enumerate() {
        let scaled = tape.scale(base, 1.0 / (1 << lvl) as f64)?;
        let scaled = tape.reshape(scaled, vec![1, h, w])?;
        let pos = tape.add(offsets, scaled)?; // (k, H, W)
        let sampled = tape.linear_sample_width(vol, pos)?;
        per_level.push(tape.reshape(sampled, vec![1, k, h, w])?);
    }
    tape.concat(&per_level, 1)
}
