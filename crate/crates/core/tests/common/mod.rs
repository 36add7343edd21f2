//! Scalar reference implementations used as test oracles.

#![allow(dead_code)]

/// Attention scores by direct summation: zero-padded 3×3 patches around
/// every location, cosine similarity between hole and context patches,
/// softmax over context. Returns `(hole locations, context locations, rows)`.
pub fn affinity_oracle(
    feature: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    mask: &[f64],
) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>) {
    let patch = |loc: usize| -> Vec<f64> {
        let (y, x) = ((loc / w) as isize, (loc % w) as isize);
        let mut v = Vec::with_capacity(channels * 9);
        for c in 0..channels {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (yy, xx) = (y + dy, x + dx);
                    v.push(if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        0.0
                    } else {
                        feature[c * h * w + yy as usize * w + xx as usize]
                    });
                }
            }
        }
        v
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    let holes: Vec<usize> = (0..h * w).filter(|&i| mask[i] == 1.0).collect();
    let contexts: Vec<usize> = (0..h * w).filter(|&i| mask[i] == 0.0).collect();
    let rows = holes
        .iter()
        .map(|&j| {
            let pj = patch(j);
            let nj = norm(&pj);
            let scores: Vec<f64> = contexts
                .iter()
                .map(|&i| {
                    let pi = patch(i);
                    let dot: f64 = pj.iter().zip(&pi).map(|(a, b)| a * b).sum();
                    dot / (nj * norm(&pi))
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect();
    (holes, contexts, rows)
}

/// Attention transfer by direct summation. Coarse location `(y, x)` owns the
/// 4×4 footprint starting at `(2y − 1, 2x − 1)` on the `2h × 2w` map (zero
/// outside). Hole footprints are rebuilt from context footprints, pasted,
/// and averaged by overlap count; only pixels with `low_mask` 1 change.
#[allow(clippy::too_many_arguments)]
pub fn transfer_oracle(
    low: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    low_mask: &[f64],
    holes: &[usize],
    contexts: &[usize],
    rows: &[Vec<f64>],
) -> Vec<f64> {
    let (hh, ww) = (2 * h, 2 * w);
    let at = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= hh as isize || x >= ww as isize {
            0.0
        } else {
            low[c * hh * ww + y as usize * ww + x as usize]
        }
    };
    let origin = |loc: usize| (2 * (loc / w) as isize - 1, 2 * (loc % w) as isize - 1);
    let mut sum = vec![0.0; channels * hh * ww];
    let mut count = vec![0usize; hh * ww];
    for (j, &hole) in holes.iter().enumerate() {
        let (oy, ox) = origin(hole);
        for dy in 0..4isize {
            for dx in 0..4isize {
                let (y, x) = (oy + dy, ox + dx);
                if y < 0 || x < 0 || y >= hh as isize || x >= ww as isize {
                    continue;
                }
                let p = y as usize * ww + x as usize;
                count[p] += 1;
                for c in 0..channels {
                    let mut v = 0.0;
                    for (i, &ctx) in contexts.iter().enumerate() {
                        let (cy, cx) = origin(ctx);
                        v += rows[j][i] * at(c, cy + dy, cx + dx);
                    }
                    sum[c * hh * ww + p] += v;
                }
            }
        }
    }
    let mut out = low.to_vec();
    for p in 0..hh * ww {
        if low_mask[p] == 1.0 && count[p] > 0 {
            for c in 0..channels {
                out[c * hh * ww + p] = sum[c * hh * ww + p] / count[p] as f64;
            }
        }
    }
    out
}

/// `[0, 1]` entries with at least one zero, from a seeded xorshift stream.
pub fn random_mask(len: usize, hole_rate: f64, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut v: Vec<f64> = (0..len)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            if ((s >> 11) as f64 / (1u64 << 53) as f64) < hole_rate {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if v.iter().all(|&m| m == 1.0) {
        v[(seed as usize) % len] = 0.0;
    }
    v
}
