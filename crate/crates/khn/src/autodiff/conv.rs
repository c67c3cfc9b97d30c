//! Image ops for the conv backbone: 3x3 same-padding convolution,
//! 2x2 max-pooling, and per-channel batch normalization over the
//! current batch.

use super::tape::{BackwardFn, Tape};
use super::Tensor;
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;

fn image_dims(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("{op} needs [B,C,H,W] input, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl Tape {
    /// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
    ///
    /// `weight` is `[C_out, C_in, 3, 3]`, `bias` is `[C_out]`.
    pub fn conv3x3(&self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = image_dims(x, "conv3x3")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::Shape(format!("conv3x3 weight must be [C_out,C_in,3,3], got {ws:?}")));
        }
        if ws[1] != cin {
            return Err(Error::Shape(format!(
                "conv3x3 weight expects {} input channels, input has {cin}",
                ws[1]
            )));
        }
        let cout = ws[0];
        if bias.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3x3 bias must be [{cout}], got {:?}",
                bias.shape()
            )));
        }

        let xd = x.to_vec();
        let wd = weight.to_vec();
        let bd = bias.to_vec();
        let mut out = vec![0.0; b * cout * h * w];
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bd[co];
                        for ci in 0..cin {
                            for ky in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3usize {
                                    let ix = ox as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[((n * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * wd[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[((n * cout + co) * h + oy) * w + ox] = acc;
                    }
                }
            }
        }

        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; b * cin * h * w];
            let mut dw = vec![0.0; cout * cin * 9];
            let mut db = vec![0.0; cout];
            for n in 0..b {
                for co in 0..cout {
                    for oy in 0..h {
                        for ox in 0..w {
                            let g = go[((n * cout + co) * h + oy) * w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            db[co] += g;
                            for ci in 0..cin {
                                for ky in 0..3usize {
                                    let iy = oy as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = ox as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ((n * cin + ci) * h + iy as usize) * w + ix as usize;
                                        let wi = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                        dx[xi] += g * wd[wi];
                                        dw[wi] += g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        });
        self.push("conv3x3", &[x, weight, bias], vec![b, cout, h, w], out, backward)
    }

    /// 2x2 max-pooling with stride 2. Spatial extents must be even.
    /// Ties route the gradient to the first maximal element in scan order.
    pub fn maxpool2(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image_dims(x, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2 needs even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.to_vec();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for n in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((n * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((n * c + ch) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        let in_len = xd.len();
        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; in_len];
            for (o, &i) in argmax.iter().enumerate() {
                dx[i] += go[o];
            }
            vec![Some(dx)]
        });
        self.push("maxpool2", &[x], vec![b, c, oh, ow], out, backward)
    }

    /// Per-channel batch normalization using the statistics of the current
    /// batch (biased variance over batch and spatial positions), followed by
    /// the learned affine `gamma * xhat + beta`. No running averages.
    pub fn batchnorm2d(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image_dims(x, "batchnorm2d")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d affine params must be [{c}], got {:?} / {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let n_per_channel = (b * h * w) as f64;
        let xd = x.to_vec();
        let gd = gamma.to_vec();
        let bd = beta.to_vec();

        let hw = h * w;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let mut mean = 0.0;
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in 0..hw {
                    mean += xd[base + i];
                }
            }
            mean /= n_per_channel;
            let mut var = 0.0;
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in 0..hw {
                    let d = xd[base + i] - mean;
                    var += d * d;
                }
            }
            var /= n_per_channel;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = istd;
            for n in 0..b {
                let base = (n * c + ch) * hw;
                for i in 0..hw {
                    let xh = (xd[base + i] - mean) * istd;
                    xhat[base + i] = xh;
                    out[base + i] = gd[ch] * xh + bd[ch];
                }
            }
        }

        let backward: BackwardFn = Box::new(move |go| {
            let mut dx = vec![0.0; xhat.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for n in 0..b {
                    let base = (n * c + ch) * hw;
                    for i in 0..hw {
                        let g = go[base + i];
                        sum_g += g;
                        sum_gx += g * xhat[base + i];
                    }
                }
                dgamma[ch] = sum_gx;
                dbeta[ch] = sum_g;
                let k = gd[ch] * inv_std[ch] / n_per_channel;
                for n in 0..b {
                    let base = (n * c + ch) * hw;
                    for i in 0..hw {
                        dx[base + i] = k
                            * (n_per_channel * go[base + i] - sum_g - xhat[base + i] * sum_gx);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        });
        self.push("batchnorm2d", &[x, gamma, beta], vec![b, c, h, w], out, backward)
    }
}
