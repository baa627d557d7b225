//! Disparity evaluation: end-point error, bad-pixel rates, Canny edge
//! detection on the reference image, and the edge/non-edge region split.

use crate::tensor::{Result, TensorError, TensorValue};

/// Metrics over one pixel region.
#[derive(Clone, Copy, Debug, Default)]
pub struct RegionMetrics {
    pub pixels: usize,
    pub epe: f64,
    pub bad_1px: f64,
}

/// Evaluation summary with the edge/non-edge split.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub epe: f64,
    /// (threshold, percentage) pairs.
    pub bad_over: Vec<(f64, f64)>,
    pub edge: Option<RegionMetrics>,
    pub non_edge: Option<RegionMetrics>,
}

fn check_aligned(pred: &TensorValue, gt: &TensorValue, mask: &[bool]) -> Result<usize> {
    let n = gt.numel();
    if pred.numel() != n || mask.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "metrics",
            detail: format!(
                "prediction ({}), ground truth ({}) and mask ({}) sizes differ",
                pred.numel(),
                n,
                mask.len()
            ),
        });
    }
    Ok(n)
}

/// Mean absolute disparity error over the mask.
pub fn epe(pred: &TensorValue, gt: &TensorValue, mask: &[bool]) -> Result<f64> {
    let n = check_aligned(pred, gt, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask[i] {
            sum += (pred.data[i] - gt.data[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "epe",
            detail: "no valid pixels".into(),
        });
    }
    Ok(sum / count as f64)
}

/// Percentage of masked pixels with |error| > t.
pub fn bad_over(pred: &TensorValue, gt: &TensorValue, mask: &[bool], t: f64) -> Result<f64> {
    let n = check_aligned(pred, gt, mask)?;
    let mut bad = 0usize;
    let mut count = 0usize;
    for i in 0..n {
        if mask[i] {
            count += 1;
            if (pred.data[i] - gt.data[i]).abs() > t {
                bad += 1;
            }
        }
    }
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "bad_over",
            detail: "no valid pixels".into(),
        });
    }
    Ok(100.0 * bad as f64 / count as f64)
}

fn to_gray(image: &TensorValue) -> Result<(Vec<f64>, usize, usize)> {
    let sh = &image.shape;
    let (c, h, w) = match sh.len() {
        2 => (1, sh[0], sh[1]),
        3 => (sh[0], sh[1], sh[2]),
        4 if sh[0] == 1 => (sh[1], sh[2], sh[3]),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "canny_edges",
                detail: format!("expected (H,W), (C,H,W) or (1,C,H,W), got {sh:?}"),
            })
        }
    };
    let plane = h * w;
    let mut gray = vec![0.0; plane];
    match c {
        1 => gray.copy_from_slice(&image.data[..plane]),
        3 => {
            for i in 0..plane {
                gray[i] = 0.299 * image.data[i]
                    + 0.587 * image.data[plane + i]
                    + 0.114 * image.data[2 * plane + i];
            }
        }
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "canny_edges",
                detail: format!("expected 1 or 3 channels, got {c}"),
            })
        }
    }
    Ok((gray, h, w))
}

fn gaussian5(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    // 5x5 kernel for sigma = 1.4, normalized.
    let mut kernel = [[0.0f64; 5]; 5];
    let sigma = 1.4f64;
    let mut total = 0.0;
    for (ky, row) in kernel.iter_mut().enumerate() {
        for (kx, v) in row.iter_mut().enumerate() {
            let dy = ky as f64 - 2.0;
            let dx = kx as f64 - 2.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    let at = |i: isize, j: isize| -> f64 {
        let ci = i.clamp(0, h as isize - 1) as usize;
        let cj = j.clamp(0, w as isize - 1) as usize;
        src[ci * w + cj]
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, &v) in row.iter().enumerate() {
                    s += v * at(i + ky as isize - 2, j + kx as isize - 2);
                }
            }
            out[i as usize * w + j as usize] = s;
        }
    }
    out
}

/// Canny edge detector: grayscale -> 5x5 Gaussian blur (sigma 1.4) ->
/// Sobel gradients -> non-maximum suppression -> hysteresis thresholding.
/// Thresholds apply to gradient magnitude of images scaled in [0, 1].
pub fn canny_edges(image: &TensorValue, low: f64, high: f64) -> Result<Vec<bool>> {
    if low >= high {
        return Err(TensorError::Invalid {
            op: "canny_edges",
            detail: format!("low threshold {low} must be < high threshold {high}"),
        });
    }
    let (gray, h, w) = to_gray(image)?;
    let blurred = gaussian5(&gray, h, w);

    let at = |i: isize, j: isize| -> f64 {
        let ci = i.clamp(0, h as isize - 1) as usize;
        let cj = j.clamp(0, w as isize - 1) as usize;
        blurred[ci * w + cj]
    };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w]; // quantized gradient direction, 4 bins
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let gy = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
            let idx = i as usize * w + j as usize;
            mag[idx] = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).to_degrees();
            let a = if angle < 0.0 { angle + 180.0 } else { angle };
            dir[idx] = if !(22.5..157.5).contains(&a) {
                0 // horizontal gradient -> compare left/right
            } else if a < 67.5 {
                1 // diagonal /
            } else if a < 112.5 {
                2 // vertical gradient -> compare up/down
            } else {
                3 // diagonal \
            };
        }
    }

    let mat = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            mag[i as usize * w + j as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            let (n1, n2) = match dir[idx] {
                0 => (mat(i, j - 1), mat(i, j + 1)),
                1 => (mat(i - 1, j + 1), mat(i + 1, j - 1)),
                2 => (mat(i - 1, j), mat(i + 1, j)),
                _ => (mat(i - 1, j - 1), mat(i + 1, j + 1)),
            };
            if mag[idx] >= n1 && mag[idx] >= n2 {
                thin[idx] = mag[idx];
            }
        }
    }

    // Hysteresis: strong pixels seed a flood fill through weak pixels.
    let mut edges = vec![false; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (idx, &m) in thin.iter().enumerate() {
        if m >= high {
            edges[idx] = true;
            stack.push(idx);
        }
    }
    while let Some(idx) = stack.pop() {
        let (i, j) = ((idx / w) as isize, (idx % w) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let n = ni as usize * w + nj as usize;
                if !edges[n] && thin[n] >= low {
                    edges[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    Ok(edges)
}

fn region(pred: &TensorValue, gt: &TensorValue, sel: &[bool]) -> Result<Option<RegionMetrics>> {
    if !sel.iter().any(|&b| b) {
        return Ok(None);
    }
    Ok(Some(RegionMetrics {
        pixels: sel.iter().filter(|&&b| b).count(),
        epe: epe(pred, gt, sel)?,
        bad_1px: bad_over(pred, gt, sel, 1.0)?,
    }))
}

/// Full report with metrics split into edge and non-edge pixels. The
/// regions partition the valid mask; absent regions are reported as None.
pub fn region_metrics(
    pred: &TensorValue,
    gt: &TensorValue,
    mask: &[bool],
    edges: &[bool],
) -> Result<MetricReport> {
    let n = check_aligned(pred, gt, mask)?;
    if edges.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "region_metrics",
            detail: format!("edge mask size {} does not match {}", edges.len(), n),
        });
    }
    let edge_sel: Vec<bool> = (0..n).map(|i| mask[i] && edges[i]).collect();
    let flat_sel: Vec<bool> = (0..n).map(|i| mask[i] && !edges[i]).collect();
    let mut bads = Vec::new();
    for t in [1.0, 2.0, 3.0] {
        bads.push((t, bad_over(pred, gt, mask, t)?));
    }
    Ok(MetricReport {
        epe: epe(pred, gt, mask)?,
        bad_over: bads,
        edge: region(pred, gt, &edge_sel)?,
        non_edge: region(pred, gt, &flat_sel)?,
    })
}
