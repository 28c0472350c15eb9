//! Separable resampling on planar float buffers.

/// Per-output-sample contributions: first source index and normalized weights.
fn triangle_weights(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = in_len as f64 / out_len as f64;
    // Widen the filter when shrinking so every source sample contributes.
    let filter_scale = scale.max(1.0);
    let support = filter_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| {
                    let t = ((j as f64 - center + 0.5) / filter_scale).abs();
                    (1.0 - t).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            }
            (lo, w)
        })
        .collect()
}

/// Bilinear (triangle-filter) resize with antialiasing when downscaling.
///
/// `data` is `channels` planes of `in_h * in_w` values. Same-size resizes
/// return the input unchanged.
pub fn resize_bilinear(data: &[f64], channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(data.len(), channels * in_h * in_w);
    if in_h == out_h && in_w == out_w {
        return data.to_vec();
    }
    let wx = triangle_weights(in_w, out_w);
    let wy = triangle_weights(in_h, out_h);
    let mut out = vec![0.0; channels * out_h * out_w];
    let mut tmp = vec![0.0; in_h * out_w];
    for c in 0..channels {
        let plane = &data[c * in_h * in_w..(c + 1) * in_h * in_w];
        for y in 0..in_h {
            let row = &plane[y * in_w..(y + 1) * in_w];
            for (x, (lo, w)) in wx.iter().enumerate() {
                tmp[y * out_w + x] = w.iter().enumerate().map(|(k, wk)| wk * row[lo + k]).sum();
            }
        }
        let dst = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (y, (lo, w)) in wy.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = w.iter().enumerate().map(|(k, wk)| wk * tmp[(lo + k) * out_w + x]).sum();
            }
        }
    }
    out
}

/// Nearest-neighbour resize for label planes.
pub fn resize_nearest<T: Copy>(data: &[T], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    assert_eq!(data.len(), in_h * in_w);
    let src = |i: usize, n_in: usize, n_out: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, in_h, out_h);
        for x in 0..out_w {
            out.push(data[sy * in_w + src(x, in_w, out_w)]);
        }
    }
    out
}
