//! Synthetic stereogram generation with exact ground truth.
//!
//! The right image carries the texture; the left image is defined as the
//! right image resampled at `x - d` with linear interpolation, so the
//! warp identity holds exactly by construction. Occluded pixels (where
//! the warp is non-injective or leaves the image) are marked invalid via
//! a per-row z-buffer in which the largest disparity wins.

use crate::tensor::{Result, TensorError, TensorValue};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SceneMode {
    /// Fronto-parallel rectangles over a constant background.
    Planes,
    /// Slanted-plane rectangles (disparity linear in x and y).
    Slanted,
    /// Smooth Gaussian bumps over a constant background.
    Dots,
}

impl SceneMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "planes" => Some(SceneMode::Planes),
            "slanted" => Some(SceneMode::Slanted),
            "dots" => Some(SceneMode::Dots),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SceneMode::Planes => "planes",
            SceneMode::Slanted => "slanted",
            SceneMode::Dots => "dots",
        }
    }
}

/// One training/evaluation pair with dense ground truth.
pub struct StereoSample {
    /// Grayscale left image, (1, H, W), values in [0, 1].
    pub left: TensorValue,
    /// Grayscale right image, (1, H, W), values in [0, 1].
    pub right: TensorValue,
    /// Ground-truth disparity in pixels, (1, H, W), >= 0.
    pub gt_disparity: TensorValue,
    /// Per-pixel validity (false at occlusions and out-of-image warps).
    pub valid_mask: Vec<bool>,
}

/// Bilinear upsampling of a coarse noise grid by integer factor `s`,
/// sampling at cell centers with border clamping.
fn upsample_noise(src: &[f64], ch: usize, cw: usize, s: usize) -> Vec<f64> {
    let (h, w) = (ch * s, cw * s);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let y = ((i as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = ((j as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let fx = x - x0 as f64;
            out[i * w + j] = src[y0 * cw + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * cw + x1] * (1.0 - fy) * fx
                + src[y1 * cw + x0] * fy * (1.0 - fx)
                + src[y1 * cw + x1] * fy * fx;
        }
    }
    out
}

/// Multi-octave matchable texture in [0, 1]: blurred per-pixel noise plus
/// bilinearly upsampled noise at 4x and 16x cell sizes, so local structure
/// survives downsampling to the 1/4-resolution matching grid.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let fine: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let fine = box_blur3(&fine, h, w);
    let mid_src: Vec<f64> = (0..(h / 4) * (w / 4))
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let mid = upsample_noise(&mid_src, h / 4, w / 4, 4);
    let coarse_src: Vec<f64> = (0..(h / 16) * (w / 16))
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let coarse = upsample_noise(&coarse_src, h / 16, w / 16, 16);
    (0..h * w)
        .map(|p| 0.3 * fine[p] + 0.45 * mid[p] + 0.25 * coarse[p])
        .collect()
}

fn box_blur3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let at = |i: isize, j: isize| -> f64 {
        let ci = i.clamp(0, h as isize - 1) as usize;
        let cj = j.clamp(0, w as isize - 1) as usize;
        src[ci * w + cj]
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    s += at(i + di, j + dj);
                }
            }
            out[i as usize * w + j as usize] = s / 9.0;
        }
    }
    out
}

fn disparity_field(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    max_disp: f64,
    mode: SceneMode,
) -> Vec<f64> {
    let background = rng.gen_range(0.0..max_disp * 0.25);
    let mut d = vec![background; h * w];
    match mode {
        SceneMode::Planes | SceneMode::Slanted => {
            let n_rects = rng.gen_range(2..=4);
            for _ in 0..n_rects {
                let rw = rng.gen_range(w / 6..w / 2);
                let rh = rng.gen_range(h / 6..h / 2);
                let x0 = rng.gen_range(0..w - rw);
                let y0 = rng.gen_range(0..h - rh);
                let base = rng.gen_range(max_disp * 0.3..max_disp);
                let (gx, gy) = if mode == SceneMode::Slanted {
                    let lim = max_disp * 0.2;
                    (
                        rng.gen_range(-lim..lim) / rw as f64,
                        rng.gen_range(-lim..lim) / rh as f64,
                    )
                } else {
                    (0.0, 0.0)
                };
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        let v = base + gx * (x - x0) as f64 + gy * (y - y0) as f64;
                        let v = v.clamp(0.0, max_disp);
                        // Nearer surfaces (larger disparity) overwrite.
                        if v > d[y * w + x] {
                            d[y * w + x] = v;
                        }
                    }
                }
            }
        }
        SceneMode::Dots => {
            let n_bumps = rng.gen_range(3..=6);
            for _ in 0..n_bumps {
                let cx = rng.gen_range(0.0..w as f64);
                let cy = rng.gen_range(0.0..h as f64);
                let amp = rng.gen_range(max_disp * 0.3..max_disp * 0.75);
                let sigma = rng.gen_range(w as f64 / 12.0..w as f64 / 5.0);
                for y in 0..h {
                    for x in 0..w {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let g = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        d[y * w + x] = (d[y * w + x] + g).min(max_disp);
                    }
                }
            }
        }
    }
    d
}

/// Linear sample of one image row at fractional column `p`, border-clamped.
fn sample_row(row: &[f64], p: f64) -> f64 {
    let w = row.len();
    let p = p.clamp(0.0, (w - 1) as f64);
    let j0 = p.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let frac = p - j0 as f64;
    row[j0] * (1.0 - frac) + row[j1] * frac
}

/// Generates one deterministic stereo sample.
pub fn gen_stereogram(
    width: usize,
    height: usize,
    max_disp: f64,
    mode: SceneMode,
    seed: u64,
) -> Result<StereoSample> {
    if !width.is_multiple_of(32) || !height.is_multiple_of(32) {
        return Err(TensorError::Invalid {
            op: "gen_stereogram",
            detail: format!("dimensions {height}x{width} must be divisible by 32"),
        });
    }
    if !(max_disp > 0.0) || max_disp >= width as f64 / 4.0 {
        return Err(TensorError::Invalid {
            op: "gen_stereogram",
            detail: format!(
                "max_disp {max_disp} must be in (0, width/4) for width {width}"
            ),
        });
    }
    let (h, w) = (height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let d = disparity_field(&mut rng, h, w, max_disp, mode);

    let right = texture(&mut rng, h, w);

    let mut left = vec![0.0; h * w];
    for i in 0..h {
        let row = &right[i * w..(i + 1) * w];
        for j in 0..w {
            left[i * w + j] = sample_row(row, j as f64 - d[i * w + j]);
        }
    }

    // Visibility: per-row z-buffer over rounded match columns, largest
    // disparity wins; pixels warping off the left border are invalid.
    let mut valid = vec![false; h * w];
    for i in 0..h {
        let mut zbuf = vec![f64::NEG_INFINITY; w];
        for j in 0..w {
            let x = j as f64 - d[i * w + j];
            if x < 0.0 {
                continue;
            }
            let r = x.round() as usize;
            if d[i * w + j] > zbuf[r] {
                zbuf[r] = d[i * w + j];
            }
        }
        for j in 0..w {
            let x = j as f64 - d[i * w + j];
            if x < 0.0 {
                continue;
            }
            let r = x.round() as usize;
            valid[i * w + j] = d[i * w + j] >= zbuf[r];
        }
    }

    Ok(StereoSample {
        left: TensorValue::new(vec![1, h, w], left),
        right: TensorValue::new(vec![1, h, w], right),
        gt_disparity: TensorValue::new(vec![1, h, w], d),
        valid_mask: valid,
    })
}

/// Stateless per-step seed so interrupted runs resume on the same data.
pub fn step_seed(run_seed: u64, step: u64) -> u64 {
    // SplitMix64 over the pair; avoids correlation between nearby steps.
    let mut z = run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(step);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Round-robin scene mode for a given step.
pub fn mode_for_step(step: u64) -> SceneMode {
    match step % 3 {
        0 => SceneMode::Planes,
        1 => SceneMode::Slanted,
        _ => SceneMode::Dots,
    }
}
