//! Dense/conv/pooling/softmax primitives with explicit backward passes.
//! Everything is f64 and iterates in a fixed order, so results are
//! bit-reproducible run to run.

/// y = W x + b, with `w` row-major `out_dim x in_dim`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut y = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        y.push(acc);
    }
    y
}

/// Accumulate dW, db and return dx.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    out_dim: usize,
    in_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = dy[o];
        db[o] += g;
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            drow[i] += g * x[i];
            dx[i] += row[i] * g;
        }
    }
    dx
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// dx from dy using the pre-activation values.
pub fn relu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(dy.iter())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

/// 3x3 convolution, stride 2, padding 1, CHW layout.
/// Output spatial size is ceil(h/2) x ceil(w/2).
pub struct ConvShape {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / 2 + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - 1) / 2 + 1
    }
}

/// Weights are `co x (ci*9)` row-major; kernel index is `ci * 9 + ky * 3 + kx`.
pub fn conv_forward(input: &[f64], weights: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    debug_assert_eq!(input.len(), s.ci * s.h * s.w);
    debug_assert_eq!(weights.len(), s.co * s.ci * 9);
    let mut out = vec![0.0; s.co * oh * ow];
    for co in 0..s.co {
        let wbase = co * s.ci * 9;
        let obase = co * oh * ow;
        for oy in 0..oh {
            let iy0 = 2 * oy as i64 - 1;
            for ox in 0..ow {
                let ix0 = 2 * ox as i64 - 1;
                let mut acc = bias[co];
                for ci in 0..s.ci {
                    let ibase = ci * s.h * s.w;
                    let kbase = wbase + ci * 9;
                    for ky in 0..3 {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= s.h as i64 {
                            continue;
                        }
                        let irow = ibase + iy as usize * s.w;
                        let krow = kbase + ky * 3;
                        for kx in 0..3 {
                            let ix = ix0 + kx as i64;
                            if ix < 0 || ix >= s.w as i64 {
                                continue;
                            }
                            acc += weights[krow + kx] * input[irow + ix as usize];
                        }
                    }
                }
                out[obase + oy * ow + ox] = acc;
            }
        }
    }
    out
}

/// Accumulate weight/bias gradients and return the input gradient.
pub fn conv_backward(
    input: &[f64],
    weights: &[f64],
    s: &ConvShape,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let (oh, ow) = (s.out_h(), s.out_w());
    let mut dinput = vec![0.0; input.len()];
    for co in 0..s.co {
        let wbase = co * s.ci * 9;
        let obase = co * oh * ow;
        for oy in 0..oh {
            let iy0 = 2 * oy as i64 - 1;
            for ox in 0..ow {
                let g = dout[obase + oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                let ix0 = 2 * ox as i64 - 1;
                dbias[co] += g;
                for ci in 0..s.ci {
                    let ibase = ci * s.h * s.w;
                    let kbase = wbase + ci * 9;
                    for ky in 0..3 {
                        let iy = iy0 + ky as i64;
                        if iy < 0 || iy >= s.h as i64 {
                            continue;
                        }
                        let irow = ibase + iy as usize * s.w;
                        let krow = kbase + ky * 3;
                        for kx in 0..3 {
                            let ix = ix0 + kx as i64;
                            if ix < 0 || ix >= s.w as i64 {
                                continue;
                            }
                            dweights[krow + kx] += g * input[irow + ix as usize];
                            dinput[irow + ix as usize] += weights[krow + kx] * g;
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Per-channel mean over the spatial grid.
pub fn global_avg_pool(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let area = (h * w) as f64;
    (0..c)
        .map(|ch| {
            let base = ch * h * w;
            input[base..base + h * w].iter().sum::<f64>() / area
        })
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let area = (h * w) as f64;
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = dy[ch] / area;
        for v in dx[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v = g;
        }
    }
    dx
}

/// Softmax over the active entries; masked entries come out exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(mask.iter()) {
        if m && *l > max {
            max = *l;
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, (&l, &m)) in logits.iter().zip(mask.iter()).enumerate() {
        if m {
            let e = (l - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// dlogits from dprobs: `p_k * (g_k - sum_j p_j g_j)`. Masked entries have
/// p = 0 and therefore zero gradient.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs.iter()).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(dprobs.iter())
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out_dim, in_dim) = (4, 6);
        let w = rand_vec(&mut rng, out_dim * in_dim);
        let b = rand_vec(&mut rng, out_dim);
        let x = rand_vec(&mut rng, in_dim);
        let probe = rand_vec(&mut rng, out_dim);
        let loss = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            dense_forward(w, b, x, out_dim, in_dim)
                .iter()
                .zip(probe.iter())
                .map(|(y, p)| y * p)
                .sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = dense_backward(&w, &x, &probe, out_dim, in_dim, &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let up = loss(&wp, &b, &x);
            wp[i] -= 2.0 * h;
            let down = loss(&wp, &b, &x);
            assert!(((up - down) / (2.0 * h) - dw[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&w, &b, &xp);
            xp[i] -= 2.0 * h;
            let down = loss(&w, &b, &xp);
            assert!(((up - down) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_shapes() {
        let s = ConvShape {
            ci: 3,
            co: 8,
            h: 112,
            w: 224,
        };
        assert_eq!((s.out_h(), s.out_w()), (56, 112));
        let s = ConvShape {
            ci: 8,
            co: 4,
            h: 7,
            w: 13,
        };
        assert_eq!((s.out_h(), s.out_w()), (4, 7));
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape {
            ci: 2,
            co: 3,
            h: 9,
            w: 7,
        };
        let input = rand_vec(&mut rng, s.ci * s.h * s.w);
        let weights = rand_vec(&mut rng, s.co * s.ci * 9);
        let bias = rand_vec(&mut rng, s.co);
        let probe = rand_vec(&mut rng, s.co * s.out_h() * s.out_w());
        let loss = |input: &[f64], weights: &[f64], bias: &[f64]| -> f64 {
            conv_forward(input, weights, bias, &s)
                .iter()
                .zip(probe.iter())
                .map(|(y, p)| y * p)
                .sum()
        };
        let mut dw = vec![0.0; weights.len()];
        let mut db = vec![0.0; bias.len()];
        let dx = conv_backward(&input, &weights, &s, &probe, &mut dw, &mut db);
        let h = 1e-6;
        for i in (0..weights.len()).step_by(7) {
            let mut wp = weights.clone();
            wp[i] += h;
            let up = loss(&input, &wp, &bias);
            wp[i] -= 2.0 * h;
            let down = loss(&input, &wp, &bias);
            assert!(((up - down) / (2.0 * h) - dw[i]).abs() < 1e-6, "w[{i}]");
        }
        for i in (0..input.len()).step_by(11) {
            let mut ip = input.clone();
            ip[i] += h;
            let up = loss(&ip, &weights, &bias);
            ip[i] -= 2.0 * h;
            let down = loss(&ip, &weights, &bias);
            assert!(((up - down) / (2.0 * h) - dx[i]).abs() < 1e-6, "x[{i}]");
        }
        for i in 0..bias.len() {
            let mut bp = bias.clone();
            bp[i] += h;
            let up = loss(&input, &weights, &bp);
            bp[i] -= 2.0 * h;
            let down = loss(&input, &weights, &bp);
            assert!(((up - down) / (2.0 * h) - db[i]).abs() < 1e-6, "b[{i}]");
        }
    }

    #[test]
    fn masked_softmax_zeroes_padded_modes() {
        let logits = vec![0.3, -1.0, 2.0, 5.0];
        let mask = vec![true, true, false, false];
        let p = masked_softmax(&logits, &mask);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[3], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_vec(&mut rng, 6);
        let mask = vec![true, true, true, false, true, true];
        let probe = rand_vec(&mut rng, 6);
        let loss = |l: &[f64]| -> f64 {
            masked_softmax(l, &mask)
                .iter()
                .zip(probe.iter())
                .map(|(p, g)| p * g)
                .sum()
        };
        let p = masked_softmax(&logits, &mask);
        let dl = softmax_backward(&p, &probe);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let up = loss(&lp);
            lp[i] -= 2.0 * h;
            let down = loss(&lp);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dl[i]).abs() < 1e-6, "logit {i}: {fd} vs {}", dl[i]);
        }
    }

    #[test]
    fn gap_backward_spreads_uniformly() {
        let dy = vec![6.0, -3.0];
        let dx = global_avg_pool_backward(&dy, 2, 2, 3);
        assert!(dx[..6].iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(dx[6..].iter().all(|&v| (v + 0.5).abs() < 1e-15));
    }
}
