//! Forward constructors and the backward dispatch for every tape op.

use super::conv;
use super::{Activation, BinOp, Op, PoolMode, Result, Tape, TensorError, TensorId};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides for reading `shape` while iterating over `out`: 0 on broadcast
/// (singleton) axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let real = strides_of(shape);
    shape
        .iter()
        .zip(out)
        .zip(real)
        .map(|((&e, &o), st)| if e == 1 && o != 1 { 0 } else { st })
        .collect()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("rank {} vs rank {}", a.len(), b.len()),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (axis, (&ea, &eb)) in a.iter().zip(b).enumerate() {
        if ea == eb || ea == 1 || eb == 1 {
            out.push(ea.max(eb));
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("axis {axis}: extent {ea} vs {eb}"),
            });
        }
    }
    Ok(out)
}

/// Iterates multi-indices of `shape`, yielding flat offsets into two
/// broadcast operands.
fn for_each_bcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..numel {
        f(flat, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Tape {
    // ── convolution ─────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let ish = self.shape(input);
        let wsh = self.shape(weight);
        let bsh = self.shape(bias);
        if ish.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be rank 4, got rank {}", ish.len()),
            });
        }
        if wsh.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be rank 4, got rank {}", wsh.len()),
            });
        }
        let (n, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
        let (cout, wcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if cin != wcin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {cin} != weight in-channels {wcin}"),
            });
        }
        if bsh != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {bsh:?} != [{cout}]"),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let oh = conv::conv_out_extent(h, kh, stride, pad).ok_or(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel height {kh} exceeds padded input height {}", h + 2 * pad),
        })?;
        let ow = conv::conv_out_extent(w, kw, stride, pad).ok_or(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel width {kw} exceeds padded input width {}", w + 2 * pad),
        })?;
        let mut out = vec![0.0; n * cout * oh * ow];
        conv::forward(
            self.data(input),
            (n, cin, h, w),
            self.data(weight),
            (cout, kh, kw),
            self.data(bias),
            stride,
            pad,
            &mut out,
            (oh, ow),
        );
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(
            "conv2d",
            vec![n, cout, oh, ow],
            out,
            needs,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        )
    }

    // ── pooling ─────────────────────────────────────────────────────

    pub fn avg_pool_last_dim(&mut self, input: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let sh = self.shape(input).to_vec();
        let last = *sh.last().ok_or(TensorError::Invalid {
            op: "avg_pool_last_dim",
            detail: "rank-0 input".into(),
        })?;
        if kernel == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool_last_dim",
                detail: "kernel and stride must be >= 1".into(),
            });
        }
        if kernel > last {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool_last_dim",
                detail: format!("kernel {kernel} exceeds last-dim extent {last}"),
            });
        }
        let out_last = (last - kernel) / stride + 1;
        let rows = self.numel(input) / last;
        let data = self.data(input);
        let mut out = vec![0.0; rows * out_last];
        let inv = 1.0 / kernel as f64;
        for r in 0..rows {
            let src = &data[r * last..(r + 1) * last];
            let dst = &mut out[r * out_last..(r + 1) * out_last];
            for (o, d) in dst.iter_mut().enumerate() {
                let start = o * stride;
                *d = src[start..start + kernel].iter().sum::<f64>() * inv;
            }
        }
        let mut osh = sh;
        *osh.last_mut().unwrap() = out_last;
        let needs = self.needs(input);
        self.push(
            "avg_pool_last_dim",
            osh,
            out,
            needs,
            Op::AvgPoolLast { input, kernel, stride },
        )
    }

    fn rank4(&self, op: &'static str, t: TensorId) -> Result<(usize, usize, usize, usize)> {
        let sh = self.shape(t);
        if sh.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected rank 4, got rank {}", sh.len()),
            });
        }
        Ok((sh[0], sh[1], sh[2], sh[3]))
    }

    /// Per-channel reduction over H x W -> (N, C, 1, 1).
    pub fn spatial_pool(&mut self, input: TensorId, mode: PoolMode) -> Result<TensorId> {
        let (n, c, h, w) = self.rank4("spatial_pool", input)?;
        let data = self.data(input);
        let sp = h * w;
        let mut out = vec![0.0; n * c];
        let mut argmax = Vec::new();
        for i in 0..n * c {
            let src = &data[i * sp..(i + 1) * sp];
            match mode {
                PoolMode::Avg => out[i] = src.iter().sum::<f64>() / sp as f64,
                PoolMode::Max => {
                    let mut best = 0;
                    for (j, v) in src.iter().enumerate() {
                        if *v > src[best] {
                            best = j;
                        }
                    }
                    out[i] = src[best];
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "spatial_pool",
            vec![n, c, 1, 1],
            out,
            needs,
            Op::SpatialPool { input, mode, argmax },
        )
    }

    /// Cross-channel reduction -> (N, 1, H, W).
    pub fn channel_pool(&mut self, input: TensorId, mode: PoolMode) -> Result<TensorId> {
        let (n, c, h, w) = self.rank4("channel_pool", input)?;
        let data = self.data(input);
        let sp = h * w;
        let mut out = vec![0.0; n * sp];
        let mut argmax = Vec::new();
        for b in 0..n {
            for p in 0..sp {
                let at = |ch: usize| data[(b * c + ch) * sp + p];
                match mode {
                    PoolMode::Avg => {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += at(ch);
                        }
                        out[b * sp + p] = acc / c as f64;
                    }
                    PoolMode::Max => {
                        let mut best = 0;
                        for ch in 1..c {
                            if at(ch) > at(best) {
                                best = ch;
                            }
                        }
                        out[b * sp + p] = at(best);
                        argmax.push(best);
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "channel_pool",
            vec![n, 1, h, w],
            out,
            needs,
            Op::ChannelPool { input, mode, argmax },
        )
    }

    // ── pointwise ───────────────────────────────────────────────────

    pub fn pointwise(&mut self, input: TensorId, f: Activation) -> Result<TensorId> {
        let data = self.data(input);
        let out: Vec<f64> = match f {
            Activation::Sigmoid => data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
            Activation::Tanh => data.iter().map(|&x| x.tanh()).collect(),
            Activation::Relu => data.iter().map(|&x| x.max(0.0)).collect(),
            Activation::Abs => data.iter().map(|&x| x.abs()).collect(),
        };
        let sh = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push("pointwise", sh, out, needs, Op::Pointwise { input, f })
    }

    pub fn sigmoid(&mut self, t: TensorId) -> Result<TensorId> {
        self.pointwise(t, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, t: TensorId) -> Result<TensorId> {
        self.pointwise(t, Activation::Tanh)
    }

    pub fn relu(&mut self, t: TensorId) -> Result<TensorId> {
        self.pointwise(t, Activation::Relu)
    }

    pub fn abs(&mut self, t: TensorId) -> Result<TensorId> {
        self.pointwise(t, Activation::Abs)
    }

    /// Per-pixel L2 normalization along the channel axis of an
    /// `(N, C, H, W)` tensor: `y[c] = x[c] / sqrt(sum_c x[c]^2 + eps)`.
    /// Keeps correlation volumes of normalized features bounded in
    /// [-1, 1] regardless of feature magnitude.
    pub fn channel_l2_normalize(&mut self, input: TensorId, eps: f64) -> Result<TensorId> {
        let (n, c, h, w) = self.rank4("channel_l2_normalize", input)?;
        let x = self.data(input);
        let plane = h * w;
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let base = b * c * plane + p;
                let mut sq = eps;
                for ch in 0..c {
                    sq += x[base + ch * plane] * x[base + ch * plane];
                }
                let inv = 1.0 / sq.sqrt();
                for ch in 0..c {
                    out[base + ch * plane] = x[base + ch * plane] * inv;
                }
            }
        }
        let needs = self.needs(input);
        let sh = self.shape(input).to_vec();
        self.push(
            "channel_l2_normalize",
            sh,
            out,
            needs,
            Op::ChannelL2Norm { input, eps },
        )
    }

    // ── elementwise with singleton broadcasting ─────────────────────

    pub fn elementwise(&mut self, a: TensorId, b: TensorId, op: BinOp) -> Result<TensorId> {
        let osh = broadcast_shape("elementwise", self.shape(a), self.shape(b))?;
        let da = self.data(a);
        let db = self.data(b);
        let numel: usize = osh.iter().product();
        let mut out = vec![0.0; numel];
        let apply = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        };
        if self.shape(a) == self.shape(b) {
            for i in 0..numel {
                out[i] = apply(da[i], db[i]);
            }
        } else {
            let sa = bcast_strides(self.shape(a), &osh);
            let sb = bcast_strides(self.shape(b), &osh);
            for_each_bcast(&osh, &sa, &sb, |o, ia, ib| out[o] = apply(da[ia], db[ib]));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("elementwise", osh, out, needs, Op::Binary { a, b, op })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, BinOp::Mul)
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                detail: "empty input list".into(),
            });
        }
        let rank = self.shape(inputs[0]).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut osh = self.shape(inputs[0]).to_vec();
        let mut total_axis = 0;
        for &t in inputs {
            let sh = self.shape(t);
            if sh.len() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("rank {} vs rank {rank}", sh.len()),
                });
            }
            for (ax, (&e, &o)) in sh.iter().zip(&osh).enumerate() {
                if ax != axis && e != o {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        detail: format!("axis {ax}: extent {e} vs {o}"),
                    });
                }
            }
            total_axis += sh[axis];
        }
        osh[axis] = total_axis;
        let outer: usize = osh[..axis].iter().product();
        let inner: usize = osh[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &t in inputs {
            let e = self.shape(t)[axis];
            let src = self.data(t);
            let block = e * inner;
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                out[dst_base..dst_base + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += e;
        }
        let needs = inputs.iter().any(|&t| self.needs(t));
        self.push(
            "concat",
            osh,
            out,
            needs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(input) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as {shape:?}",
                    self.numel(input)
                ),
            });
        }
        let data = self.data(input).to_vec();
        let needs = self.needs(input);
        self.push("reshape", shape, data, needs, Op::Reshape { input })
    }

    // ── resampling ──────────────────────────────────────────────────

    /// Factor-2 bilinear upsampling of a rank-4 tensor (half-pixel
    /// centers, border clamped).
    pub fn bilinear_upsample2x(&mut self, input: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.rank4("bilinear_upsample2x", input)?;
        let (oh, ow) = (h * 2, w * 2);
        let data = self.data(input);
        let mut out = vec![0.0; n * c * oh * ow];
        let coords = |o: usize, limit: usize| -> (usize, usize, f64) {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (limit - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(limit - 1);
            (i0, i1, src - i0 as f64)
        };
        for img in 0..n * c {
            let src = &data[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, fy) = coords(oy, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = coords(ox, w);
                    let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                        + src[y0 * w + x1] * (1.0 - fy) * fx
                        + src[y1 * w + x0] * fy * (1.0 - fx)
                        + src[y1 * w + x1] * fy * fx;
                    dst[oy * ow + ox] = v;
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            "bilinear_upsample2x",
            vec![n, c, oh, ow],
            out,
            needs,
            Op::BilinearUp2 { input },
        )
    }

    /// Linear interpolation along the last axis of `input` at fractional
    /// `positions`, border clamped. Input shape `[.., S]`, positions
    /// `[K, ..]`, output `[K, ..]` (leading dims of input preserved).
    pub fn linear_sample_width(&mut self, input: TensorId, positions: TensorId) -> Result<TensorId> {
        let ish = self.shape(input).to_vec();
        let psh = self.shape(positions).to_vec();
        if ish.is_empty() || psh.is_empty() {
            return Err(TensorError::Invalid {
                op: "linear_sample_width",
                detail: "rank-0 operand".into(),
            });
        }
        let s = *ish.last().unwrap();
        let lead = &ish[..ish.len() - 1];
        if &psh[1..] != lead {
            return Err(TensorError::ShapeMismatch {
                op: "linear_sample_width",
                detail: format!(
                    "positions trailing dims {:?} must match input leading dims {lead:?}",
                    &psh[1..]
                ),
            });
        }
        let k = psh[0];
        let rows: usize = lead.iter().product();
        let data = self.data(input);
        let pos = self.data(positions);
        let mut out = vec![0.0; k * rows];
        for kk in 0..k {
            for r in 0..rows {
                let p = pos[kk * rows + r].clamp(0.0, (s - 1) as f64);
                let i0 = (p.floor() as usize).min(s - 1);
                let i1 = (i0 + 1).min(s - 1);
                let f = p - i0 as f64;
                let row = &data[r * s..(r + 1) * s];
                out[kk * rows + r] = row[i0] + f * (row[i1] - row[i0]);
            }
        }
        let mut osh = vec![k];
        osh.extend_from_slice(lead);
        let needs = self.needs(input) || self.needs(positions);
        self.push(
            "linear_sample_width",
            osh,
            out,
            needs,
            Op::SampleWidth { input, positions },
        )
    }

    // ── reductions & misc ───────────────────────────────────────────

    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId> {
        let sh = self.shape(input).to_vec();
        if axis >= sh.len() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: sh.len(),
            });
        }
        let ax = sh[axis];
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let data = self.data(input);
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * ax * inner + j * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..ax {
                    m = m.max(data[at(j)]);
                }
                let mut z = 0.0;
                for j in 0..ax {
                    let e = (data[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..ax {
                    out[at(j)] /= z;
                }
            }
        }
        let needs = self.needs(input);
        self.push("softmax", sh, out, needs, Op::Softmax { input, axis })
    }

    pub fn scale(&mut self, input: TensorId, factor: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(input).iter().map(|&v| v * factor).collect();
        let sh = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push("scale", sh, out, needs, Op::Scale { input, factor })
    }

    pub fn clamp_min(&mut self, input: TensorId, min: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(input).iter().map(|&v| v.max(min)).collect();
        let sh = self.shape(input).to_vec();
        let needs = self.needs(input);
        self.push("clamp_min", sh, out, needs, Op::ClampMin { input, min })
    }

    pub fn sum_all(&mut self, input: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(input).iter().sum();
        let needs = self.needs(input);
        self.push("sum_all", vec![1], vec![s], needs, Op::SumAll { input })
    }

    /// All-pairs feature correlation: `out[i,j,k] = sum_c f[c,i,j] * g[c,i,k]`.
    pub fn all_pairs(&mut self, left: TensorId, right: TensorId) -> Result<TensorId> {
        let (nf, c, h, w) = self.rank4("all_pairs", left)?;
        let (ng, cg, hg, wg) = self.rank4("all_pairs", right)?;
        if nf != 1 || ng != 1 {
            return Err(TensorError::Invalid {
                op: "all_pairs",
                detail: "batch extent must be 1".into(),
            });
        }
        if c != cg {
            return Err(TensorError::ShapeMismatch {
                op: "all_pairs",
                detail: format!("channel extent {c} vs {cg}"),
            });
        }
        if (h, w) != (hg, wg) {
            return Err(TensorError::ShapeMismatch {
                op: "all_pairs",
                detail: format!("spatial extents {h}x{w} vs {hg}x{wg}"),
            });
        }
        let f = self.data(left);
        let g = self.data(right);
        let mut out = vec![0.0; h * w * w];
        for i in 0..h {
            let dst = &mut out[i * w * w..(i + 1) * w * w];
            for ch in 0..c {
                let frow = &f[(ch * h + i) * w..(ch * h + i + 1) * w];
                let grow = &g[(ch * h + i) * w..(ch * h + i + 1) * w];
                for j in 0..w {
                    let fv = frow[j];
                    let drow = &mut dst[j * w..(j + 1) * w];
                    for k in 0..w {
                        drow[k] += fv * grow[k];
                    }
                }
            }
        }
        let needs = self.needs(left) || self.needs(right);
        self.push(
            "all_pairs",
            vec![h, w, w],
            out,
            needs,
            Op::AllPairs { left, right },
        )
    }

    /// Convex combination of the 3x3 coarse neighborhood per output
    /// sub-pixel: values (1,1,H,W), weights (9,16,H,W) -> (1,1,4H,4W).
    /// Border neighborhoods are replicate-clamped.
    pub fn convex_combine(&mut self, values: TensorId, weights: TensorId) -> Result<TensorId> {
        let (n, c, h, w) = self.rank4("convex_combine", values)?;
        let (wn, wg, wh, ww) = self.rank4("convex_combine", weights)?;
        if n != 1 || c != 1 {
            return Err(TensorError::Invalid {
                op: "convex_combine",
                detail: "values must be (1,1,H,W)".into(),
            });
        }
        if (wn, wg) != (9, 16) || (wh, ww) != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "convex_combine",
                detail: format!("weights shape ({wn},{wg},{wh},{ww}) != (9,16,{h},{w})"),
            });
        }
        let v = self.data(values);
        let wt = self.data(weights);
        let (oh, ow) = (4 * h, 4 * w);
        let mut out = vec![0.0; oh * ow];
        for y in 0..h {
            for x in 0..w {
                let mut nb = [0.0; 9];
                for (idx, val) in nb.iter_mut().enumerate() {
                    let ny = (y as isize + idx as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                    let nx = (x as isize + idx as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                    *val = v[ny * w + nx];
                }
                for g in 0..16 {
                    let mut acc = 0.0;
                    for (idx, val) in nb.iter().enumerate() {
                        acc += wt[((idx * 16 + g) * h + y) * w + x] * val;
                    }
                    let (oy, ox) = (4 * y + g / 4, 4 * x + g % 4);
                    out[oy * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(values) || self.needs(weights);
        self.push(
            "convex_combine",
            vec![1, 1, oh, ow],
            out,
            needs,
            Op::ConvexCombine { values, weights },
        )
    }

    // ── backward dispatch ───────────────────────────────────────────

    pub(crate) fn backprop_node(&mut self, i: usize) -> Result<()> {
        let gout = self.nodes[i].grad.clone().expect("grad present");
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let ish = self.shape(input).to_vec();
                let wsh = self.shape(weight).to_vec();
                let osh = self.shape(TensorId(i)).to_vec();
                let dims = (ish[0], ish[1], ish[2], ish[3]);
                let kdims = (wsh[0], wsh[2], wsh[3]);
                let odims = (osh[2], osh[3]);
                if self.needs(input) {
                    let mut gin = vec![0.0; self.numel(input)];
                    conv::backward_input(
                        &gout,
                        dims,
                        self.data(weight),
                        kdims,
                        stride,
                        pad,
                        &mut gin,
                        odims,
                    );
                    self.accum_into(input, &gin);
                }
                if self.needs(weight) {
                    let mut gw = vec![0.0; self.numel(weight)];
                    conv::backward_weight(
                        &gout,
                        self.data(input),
                        dims,
                        kdims,
                        stride,
                        pad,
                        &mut gw,
                        odims,
                    );
                    self.accum_into(weight, &gw);
                }
                if self.needs(bias) {
                    let mut gb = vec![0.0; self.numel(bias)];
                    conv::backward_bias(&gout, dims.0, kdims.0, odims.0 * odims.1, &mut gb);
                    self.accum_into(bias, &gb);
                }
            }
            Op::AvgPoolLast { input, kernel, stride } => {
                if self.needs(input) {
                    let last = *self.shape(input).last().unwrap();
                    let out_last = *self.shape(TensorId(i)).last().unwrap();
                    let rows = self.numel(input) / last;
                    let inv = 1.0 / kernel as f64;
                    let mut gin = vec![0.0; self.numel(input)];
                    for r in 0..rows {
                        for o in 0..out_last {
                            let g = gout[r * out_last + o] * inv;
                            let start = r * last + o * stride;
                            for v in &mut gin[start..start + kernel] {
                                *v += g;
                            }
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::SpatialPool { input, mode, argmax } => {
                if self.needs(input) {
                    let sh = self.shape(input).to_vec();
                    let sp = sh[2] * sh[3];
                    let mut gin = vec![0.0; self.numel(input)];
                    for img in 0..sh[0] * sh[1] {
                        match mode {
                            PoolMode::Avg => {
                                let g = gout[img] / sp as f64;
                                for v in &mut gin[img * sp..(img + 1) * sp] {
                                    *v += g;
                                }
                            }
                            PoolMode::Max => gin[img * sp + argmax[img]] += gout[img],
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::ChannelPool { input, mode, argmax } => {
                if self.needs(input) {
                    let sh = self.shape(input).to_vec();
                    let (n, c, sp) = (sh[0], sh[1], sh[2] * sh[3]);
                    let mut gin = vec![0.0; self.numel(input)];
                    for b in 0..n {
                        for p in 0..sp {
                            match mode {
                                PoolMode::Avg => {
                                    let g = gout[b * sp + p] / c as f64;
                                    for ch in 0..c {
                                        gin[(b * c + ch) * sp + p] += g;
                                    }
                                }
                                PoolMode::Max => {
                                    let ch = argmax[b * sp + p];
                                    gin[(b * c + ch) * sp + p] += gout[b * sp + p];
                                }
                            }
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::Pointwise { input, f } => {
                if self.needs(input) {
                    let x = self.data(input);
                    let y = self.data(TensorId(i));
                    let gin: Vec<f64> = match f {
                        Activation::Sigmoid => (0..x.len())
                            .map(|j| gout[j] * y[j] * (1.0 - y[j]))
                            .collect(),
                        Activation::Tanh => (0..x.len()).map(|j| gout[j] * (1.0 - y[j] * y[j])).collect(),
                        Activation::Relu => (0..x.len())
                            .map(|j| if x[j] > 0.0 { gout[j] } else { 0.0 })
                            .collect(),
                        Activation::Abs => (0..x.len())
                            .map(|j| {
                                if x[j] > 0.0 {
                                    gout[j]
                                } else if x[j] < 0.0 {
                                    -gout[j]
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    };
                    self.accum_into(input, &gin);
                }
            }
            Op::Binary { a, b, op } => {
                let osh = self.shape(TensorId(i)).to_vec();
                let same = self.shape(a) == self.shape(b);
                let na = self.needs(a);
                let nb = self.needs(b);
                let mut ga = vec![0.0; self.numel(a)];
                let mut gb = vec![0.0; self.numel(b)];
                let da = self.data(a);
                let db = self.data(b);
                let mut handle = |o: usize, ia: usize, ib: usize| {
                    let g = gout[o];
                    match op {
                        BinOp::Add => {
                            if na {
                                ga[ia] += g;
                            }
                            if nb {
                                gb[ib] += g;
                            }
                        }
                        BinOp::Sub => {
                            if na {
                                ga[ia] += g;
                            }
                            if nb {
                                gb[ib] -= g;
                            }
                        }
                        BinOp::Mul => {
                            if na {
                                ga[ia] += g * db[ib];
                            }
                            if nb {
                                gb[ib] += g * da[ia];
                            }
                        }
                    }
                };
                if same {
                    for o in 0..gout.len() {
                        handle(o, o, o);
                    }
                } else {
                    let sa = bcast_strides(self.shape(a), &osh);
                    let sb = bcast_strides(self.shape(b), &osh);
                    for_each_bcast(&osh, &sa, &sb, handle);
                }
                if na {
                    self.accum_into(a, &ga);
                }
                if nb {
                    self.accum_into(b, &gb);
                }
            }
            Op::Concat { inputs, axis } => {
                let osh = self.shape(TensorId(i)).to_vec();
                let outer: usize = osh[..axis].iter().product();
                let inner: usize = osh[axis + 1..].iter().product();
                let total_axis = osh[axis];
                let mut offset = 0;
                for t in inputs {
                    let e = self.shape(t)[axis];
                    if self.needs(t) {
                        let block = e * inner;
                        let mut gin = vec![0.0; self.numel(t)];
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            gin[o * block..(o + 1) * block]
                                .copy_from_slice(&gout[src_base..src_base + block]);
                        }
                        self.accum_into(t, &gin);
                    }
                    offset += e;
                }
            }
            Op::Reshape { input } => {
                if self.needs(input) {
                    self.accum_into(input, &gout);
                }
            }
            Op::BilinearUp2 { input } => {
                if self.needs(input) {
                    let sh = self.shape(input).to_vec();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let coords = |o: usize, limit: usize| -> (usize, usize, f64) {
                        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (limit - 1) as f64);
                        let i0 = src.floor() as usize;
                        let i1 = (i0 + 1).min(limit - 1);
                        (i0, i1, src - i0 as f64)
                    };
                    let mut gin = vec![0.0; self.numel(input)];
                    for img in 0..n * c {
                        let gsrc = &gout[img * oh * ow..(img + 1) * oh * ow];
                        let gdst = &mut gin[img * h * w..(img + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, fy) = coords(oy, h);
                            for ox in 0..ow {
                                let (x0, x1, fx) = coords(ox, w);
                                let g = gsrc[oy * ow + ox];
                                gdst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                                gdst[y0 * w + x1] += g * (1.0 - fy) * fx;
                                gdst[y1 * w + x0] += g * fy * (1.0 - fx);
                                gdst[y1 * w + x1] += g * fy * fx;
                            }
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::SampleWidth { input, positions } => {
                let ish = self.shape(input).to_vec();
                let s = *ish.last().unwrap();
                let rows: usize = ish[..ish.len() - 1].iter().product();
                let k = self.shape(positions)[0];
                let data = self.data(input);
                let pos = self.data(positions);
                let ni = self.needs(input);
                let np = self.needs(positions);
                let mut gin = vec![0.0; self.numel(input)];
                let mut gpos = vec![0.0; self.numel(positions)];
                for kk in 0..k {
                    for r in 0..rows {
                        let g = gout[kk * rows + r];
                        let praw = pos[kk * rows + r];
                        let p = praw.clamp(0.0, (s - 1) as f64);
                        let i0 = (p.floor() as usize).min(s - 1);
                        let i1 = (i0 + 1).min(s - 1);
                        let f = p - i0 as f64;
                        if ni {
                            gin[r * s + i0] += g * (1.0 - f);
                            gin[r * s + i1] += g * f;
                        }
                        if np && praw >= 0.0 && praw <= (s - 1) as f64 {
                            gpos[kk * rows + r] += g * (data[r * s + i1] - data[r * s + i0]);
                        }
                    }
                }
                if ni {
                    self.accum_into(input, &gin);
                }
                if np {
                    self.accum_into(positions, &gpos);
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(input) {
                    let sh = self.shape(TensorId(i)).to_vec();
                    let ax = sh[axis];
                    let outer: usize = sh[..axis].iter().product();
                    let inner: usize = sh[axis + 1..].iter().product();
                    let y = self.data(TensorId(i));
                    let mut gin = vec![0.0; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * ax * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..ax {
                                dot += gout[at(j)] * y[at(j)];
                            }
                            for j in 0..ax {
                                gin[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(input) {
                    let gin: Vec<f64> = gout.iter().map(|&g| g * factor).collect();
                    self.accum_into(input, &gin);
                }
            }
            Op::ChannelL2Norm { input, eps } => {
                if self.needs(input) {
                    let sh = self.shape(input).to_vec();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let x = self.data(input);
                    let plane = h * w;
                    let mut gin = vec![0.0; x.len()];
                    for b in 0..n {
                        for p in 0..plane {
                            let base = b * c * plane + p;
                            let mut sq = eps;
                            for ch in 0..c {
                                sq += x[base + ch * plane] * x[base + ch * plane];
                            }
                            let inv = 1.0 / sq.sqrt();
                            // g_in = inv * (g - y * <g, y>) with y = x * inv.
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += gout[base + ch * plane] * x[base + ch * plane] * inv;
                            }
                            for ch in 0..c {
                                let y = x[base + ch * plane] * inv;
                                gin[base + ch * plane] =
                                    inv * (gout[base + ch * plane] - y * dot);
                            }
                        }
                    }
                    self.accum_into(input, &gin);
                }
            }
            Op::ClampMin { input, min } => {
                if self.needs(input) {
                    let x = self.data(input);
                    let gin: Vec<f64> = (0..x.len())
                        .map(|j| if x[j] >= min { gout[j] } else { 0.0 })
                        .collect();
                    self.accum_into(input, &gin);
                }
            }
            Op::SumAll { input } => {
                if self.needs(input) {
                    let gin = vec![gout[0]; self.numel(input)];
                    self.accum_into(input, &gin);
                }
            }
            Op::AllPairs { left, right } => {
                let lsh = self.shape(left).to_vec();
                let (c, h, w) = (lsh[1], lsh[2], lsh[3]);
                let f = self.data(left);
                let g = self.data(right);
                let nl = self.needs(left);
                let nr = self.needs(right);
                let mut gf = vec![0.0; f.len()];
                let mut gg = vec![0.0; g.len()];
                for i2 in 0..h {
                    let grow_out = &gout[i2 * w * w..(i2 + 1) * w * w];
                    for ch in 0..c {
                        let base = (ch * h + i2) * w;
                        for j in 0..w {
                            let go = &grow_out[j * w..(j + 1) * w];
                            if nl {
                                let mut acc = 0.0;
                                for k in 0..w {
                                    acc += go[k] * g[base + k];
                                }
                                gf[base + j] += acc;
                            }
                            if nr {
                                let fv = f[base + j];
                                for k in 0..w {
                                    gg[base + k] += go[k] * fv;
                                }
                            }
                        }
                    }
                }
                if nl {
                    self.accum_into(left, &gf);
                }
                if nr {
                    self.accum_into(right, &gg);
                }
            }
            Op::ConvexCombine { values, weights } => {
                let vsh = self.shape(values).to_vec();
                let (h, w) = (vsh[2], vsh[3]);
                let ow = 4 * w;
                let v = self.data(values);
                let wt = self.data(weights);
                let nv = self.needs(values);
                let nw = self.needs(weights);
                let mut gv = vec![0.0; v.len()];
                let mut gw = vec![0.0; wt.len()];
                for y in 0..h {
                    for x in 0..w {
                        for g in 0..16 {
                            let (oy, ox) = (4 * y + g / 4, 4 * x + g % 4);
                            let go = gout[oy * ow + ox];
                            for idx in 0..9 {
                                let ny = (y as isize + idx as isize / 3 - 1).clamp(0, h as isize - 1)
                                    as usize;
                                let nx = (x as isize + idx as isize % 3 - 1).clamp(0, w as isize - 1)
                                    as usize;
                                let widx = ((idx * 16 + g) * h + y) * w + x;
                                if nw {
                                    gw[widx] += go * v[ny * w + nx];
                                }
                                if nv {
                                    gv[ny * w + nx] += go * wt[widx];
                                }
                            }
                        }
                    }
                }
                if nv {
                    self.accum_into(values, &gv);
                }
                if nw {
                    self.accum_into(weights, &gw);
                }
            }
        }
        Ok(())
    }
}
