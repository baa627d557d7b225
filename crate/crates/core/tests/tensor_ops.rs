#![allow(clippy::field_reassign_with_default, clippy::needless_range_loop)]

//! Oracle tests for the tensor engine: every structured op is compared
//! against an independent brute-force implementation.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selective_stereo::tensor::{PoolMode, Tape, TensorError, TensorValue};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Nested-loop convolution oracle (no blocking, no fast paths).
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    input: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    weight: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * weight[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let (n, cin, cout) = (1, 1 + case % 3, 1 + (case / 3) % 3);
        let (h, w) = (3 + case % 4, 4 + case % 5);
        let k = [1, 3, 5][case % 3];
        let stride = 1 + case % 2;
        let pad = (k - 1) / 2;
        let input = rand_vec(&mut rng, n * cin * h * w);
        let weight = rand_vec(&mut rng, cout * cin * k * k);
        let bias = rand_vec(&mut rng, cout);
        let (want, oh, ow) =
            conv_oracle(&input, (n, cin, h, w), &weight, (cout, k, k), &bias, stride, pad);
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![n, cin, h, w], input);
        let wt = tape.constant_from(vec![cout, cin, k, k], weight);
        let b = tape.constant_from(vec![cout], bias);
        let y = tape.conv2d(x, wt, b, stride, pad).unwrap();
        assert_eq!(tape.shape(y), &[n, cout, oh, ow]);
        for (a, e) in tape.data(y).iter().zip(&want) {
            assert!((a - e).abs() < 1e-12, "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(&TensorValue::zeros(vec![1, 2, 4, 4]));
    let w = tape.constant(&TensorValue::zeros(vec![3, 3, 3, 3]));
    let b = tape.constant(&TensorValue::zeros(vec![3]));
    assert!(matches!(
        tape.conv2d(x, w, b, 1, 1),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn avg_pool_last_dim_known_vector() {
    // [0,2,4,6,8,10,12,14] pooled by window-2 means repeatedly.
    let mut tape = Tape::new();
    let v = tape.constant_from(vec![8], (0..8).map(|i| (2 * i) as f64).collect());
    let l2 = tape.avg_pool_last_dim(v, 2, 2).unwrap();
    assert_eq!(tape.data(l2), &[1.0, 5.0, 9.0, 13.0]);
    let l3 = tape.avg_pool_last_dim(l2, 2, 2).unwrap();
    assert_eq!(tape.data(l3), &[3.0, 11.0]);
    let l4 = tape.avg_pool_last_dim(l3, 2, 2).unwrap();
    assert_eq!(tape.data(l4), &[7.0]);
}

#[test]
fn spatial_and_channel_pools_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (3, 4, 5);
    let data = rand_vec(&mut rng, c * h * w);
    let mut tape = Tape::new();
    let x = tape.constant_from(vec![1, c, h, w], data.clone());

    let savg = tape.spatial_pool(x, PoolMode::Avg).unwrap();
    let smax = tape.spatial_pool(x, PoolMode::Max).unwrap();
    assert_eq!(tape.shape(savg), &[1, c, 1, 1]);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let avg: f64 = plane.iter().sum::<f64>() / (h * w) as f64;
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((tape.data(savg)[ch] - avg).abs() < 1e-12);
        assert_eq!(tape.data(smax)[ch], max);
    }

    let cavg = tape.channel_pool(x, PoolMode::Avg).unwrap();
    let cmax = tape.channel_pool(x, PoolMode::Max).unwrap();
    assert_eq!(tape.shape(cavg), &[1, 1, h, w]);
    for i in 0..h * w {
        let col: Vec<f64> = (0..c).map(|ch| data[ch * h * w + i]).collect();
        let avg: f64 = col.iter().sum::<f64>() / c as f64;
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((tape.data(cavg)[i] - avg).abs() < 1e-12);
        assert_eq!(tape.data(cmax)[i], max);
    }
}

#[test]
fn broadcast_arithmetic_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_vec(&mut rng, 2 * 3 * 4);
    let b = rand_vec(&mut rng, 3);
    let mut tape = Tape::new();
    let ta = tape.constant_from(vec![2, 3, 4], a.clone());
    let tb = tape.constant_from(vec![1, 3, 1], b.clone());
    let y = tape.mul(ta, tb).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 4]);
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                let got = tape.data(y)[(i * 3 + j) * 4 + k];
                assert!((got - a[(i * 3 + j) * 4 + k] * b[j]).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn elementwise_rejects_incompatible_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&TensorValue::zeros(vec![2, 3]));
    let b = tape.constant(&TensorValue::zeros(vec![2, 4]));
    assert!(matches!(
        tape.add(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn concat_and_reshape_layouts() {
    let mut tape = Tape::new();
    let a = tape.constant_from(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = tape.constant_from(vec![1, 1, 2], vec![5.0, 6.0]);
    let y = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 2]);
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let r = tape.reshape(y, vec![3, 2]).unwrap();
    assert_eq!(tape.shape(r), &[3, 2]);
    assert!(matches!(
        tape.reshape(r, vec![4, 2]),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn bilinear_upsample_constant_and_ramp() {
    let mut tape = Tape::new();
    let c = tape.constant(&TensorValue::full(vec![1, 1, 2, 2], 3.5));
    let up = tape.bilinear_upsample2x(c).unwrap();
    assert_eq!(tape.shape(up), &[1, 1, 4, 4]);
    assert!(tape.data(up).iter().all(|&v| (v - 3.5).abs() < 1e-12));

    // A linear ramp stays linear in the interior under half-pixel-center
    // bilinear interpolation.
    let ramp = tape.constant_from(vec![1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]);
    let up2 = tape.bilinear_upsample2x(ramp).unwrap();
    let row = tape.data(up2);
    for i in 1..7 {
        let x = (i as f64 + 0.5) / 2.0 - 0.5;
        assert!((row[i] - x).abs() < 1e-12, "{i}: {} vs {x}", row[i]);
    }
    // Border clamp.
    assert_eq!(row[0], 0.0);
    assert_eq!(row[7], 3.0);
}

#[test]
fn linear_sample_width_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rows, s, k) = (6, 7, 3);
    let vol = rand_vec(&mut rng, rows * s);
    let pos: Vec<f64> = (0..k * rows).map(|_| rng.gen_range(-2.0..9.0)).collect();
    let mut tape = Tape::new();
    let tv = tape.constant_from(vec![rows, s], vol.clone());
    let tp = tape.constant_from(vec![k, rows], pos.clone());
    let y = tape.linear_sample_width(tv, tp).unwrap();
    assert_eq!(tape.shape(y), &[k, rows]);
    for kk in 0..k {
        for r in 0..rows {
            let p = pos[kk * rows + r].clamp(0.0, (s - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(s - 1);
            let f = p - i0 as f64;
            let want = vol[r * s + i0] * (1.0 - f) + vol[r * s + i1] * f;
            assert!((tape.data(y)[kk * rows + r] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_normalizes_and_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = rand_vec(&mut rng, 4 * 6);
    let mut tape = Tape::new();
    let x = tape.constant_from(vec![4, 6], data.clone());
    let y = tape.softmax(x, 0).unwrap();
    for col in 0..6 {
        let mut z = 0.0;
        for row in 0..4 {
            z += data[row * 6 + col].exp();
        }
        let mut total = 0.0;
        for row in 0..4 {
            let want = data[row * 6 + col].exp() / z;
            let got = tape.data(y)[row * 6 + col];
            assert!((got - want).abs() < 1e-12);
            total += got;
        }
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert!(matches!(
        tape.softmax(x, 2),
        Err(TensorError::InvalidAxis { .. })
    ));
}

#[test]
fn convex_combine_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (3, 4);
    let vals = rand_vec(&mut rng, h * w);
    let logits = rand_vec(&mut rng, 9 * 16 * h * w);
    let mut tape = Tape::new();
    let v = tape.constant_from(vec![1, 1, h, w], vals.clone());
    let l = tape.constant_from(vec![9, 16, h, w], logits);
    let wt = tape.softmax(l, 0).unwrap();
    let weights = tape.data(wt).to_vec();
    let up = tape.convex_combine(v, wt).unwrap();
    assert_eq!(tape.shape(up), &[1, 1, 4 * h, 4 * w]);
    for y in 0..h {
        for x in 0..w {
            for g in 0..16 {
                let mut want = 0.0;
                for idx in 0..9 {
                    let ny = (y as isize + idx as isize / 3 - 1).clamp(0, h as isize - 1) as usize;
                    let nx = (x as isize + idx as isize % 3 - 1).clamp(0, w as isize - 1) as usize;
                    want += weights[((idx * 16 + g) * h + y) * w + x] * vals[ny * w + nx];
                }
                let (oy, ox) = (4 * y + g / 4, 4 * x + g % 4);
                let got = tape.data(up)[oy * 4 * w + ox];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let store = {
        let mut s = selective_stereo::ParamStore::new();
        s.add("x", vec![2], vec![1.0, 2.0]);
        s
    };
    let id = store.by_name("x").unwrap();
    let x = tape.param(&store, id);
    assert!(matches!(
        tape.backward(x),
        Err(TensorError::NonScalarRoot { .. })
    ));
}

#[test]
fn non_finite_forward_is_rejected() {
    let mut tape = Tape::new();
    let big = tape.constant(&TensorValue::full(vec![2], 1e308));
    assert!(matches!(
        tape.add(big, big),
        Err(TensorError::NonFinite { .. })
    ));
}

#[test]
fn param_cached_deduplicates_leaves() {
    let mut store = selective_stereo::ParamStore::new();
    let id = store.add("p", vec![2], vec![1.0, 2.0]);
    let mut tape = Tape::new();
    let a = tape.param_cached(&store, id);
    let b = tape.param_cached(&store, id);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn avg_pool_matches_oracle_prop(data in prop::collection::vec(-10.0f64..10.0, 12), k in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![2, 6], data.clone());
        let y = tape.avg_pool_last_dim(x, k, k).unwrap();
        let out = 6 / k;
        for r in 0..2 {
            for o in 0..out {
                let window = &data[r * 6 + o * k..r * 6 + o * k + k];
                let want = window.iter().sum::<f64>() / k as f64;
                prop_assert!((tape.data(y)[r * out + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scale_then_sum_is_linear(data in prop::collection::vec(-5.0f64..5.0, 10), f in -3.0f64..3.0) {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![10], data.clone());
        let y = tape.scale(x, f).unwrap();
        let s = tape.sum_all(y).unwrap();
        let want: f64 = data.iter().sum::<f64>() * f;
        prop_assert!((tape.data(s)[0] - want).abs() < 1e-9);
    }
}

#[test]
fn channel_l2_normalize_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    for _ in 0..20 {
        let (n, c, h, w) = (
            rng.gen_range(1..3usize),
            rng.gen_range(1..6usize),
            rng.gen_range(1..4usize),
            rng.gen_range(1..4usize),
        );
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![n, c, h, w], data.clone());
        let y = tape.channel_l2_normalize(x, 1e-12).unwrap();
        let out = tape.data(y);
        let plane = h * w;
        for b in 0..n {
            for p in 0..plane {
                let mut sq = 1e-12;
                for ch in 0..c {
                    sq += data[(b * c + ch) * plane + p].powi(2);
                }
                let inv = 1.0 / sq.sqrt();
                let mut norm = 0.0;
                for ch in 0..c {
                    let want = data[(b * c + ch) * plane + p] * inv;
                    let got = out[(b * c + ch) * plane + p];
                    assert!((got - want).abs() < 1e-12);
                    norm += got * got;
                }
                // unit norm up to the epsilon regularizer
                assert!(norm <= 1.0 + 1e-9);
            }
        }
    }
}
