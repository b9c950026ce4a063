//! Minimal convolutional building blocks with hand-written forward and
//! backward passes. Heavy lifting happens in im2col + GEMM so both f32 and
//! f64 pipelines run at matrix-multiply speed.
//!
//! Every backward pass here is covered by finite-difference checks in the
//! test module; the classifier input gradients the attack relies on are only
//! as good as these kernels.

use crate::optim::{Adam, AdamState};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

/// 2-D convolution with square kernel, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `(c_out, c_in, k, k)`
    pub w: Array4<T>,
    pub b: Array1<T>,
    sw: AdamState<T>,
    sb: AdamState<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Cached im2col matrix needed by the backward pass.
pub struct ConvCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

/// Gradients returned by [`Conv2d::backward`]; entries are present only when
/// requested, so evaluation-time input gradients skip the weight GEMMs.
pub struct ConvGrads<T> {
    pub gw: Option<Array4<T>>,
    pub gb: Option<Array1<T>>,
    pub dx: Option<Array4<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // He initialization for ReLU stacks.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let std_t = T::from_f64_c(std);
        let w = Array4::from_shape_fn((c_out, c_in, k, k), |_| T::standard_normal(rng) * std_t);
        Conv2d {
            w,
            b: Array1::zeros(c_out),
            sw: AdamState::new(c_out * c_in * k * k),
            sb: AdamState::new(c_out),
            stride,
            pad,
        }
    }

    /// Rebuilds a layer around loaded weights (fresh optimizer state).
    pub fn from_parts(w: Array4<T>, b: Array1<T>, stride: usize, pad: usize) -> Self {
        let sw = AdamState::new(w.len());
        let sb = AdamState::new(b.len());
        Conv2d {
            w,
            b,
            sw,
            sb,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    /// Builds the `(B*OH*OW, C_in*k*k)` patch matrix.
    fn im2col(&self, x: &Array4<T>) -> (Array2<T>, (usize, usize)) {
        let (bsz, c_in, h, w) = x.dim();
        let k = self.w.dim().2;
        let (oh, ow) = self.out_hw(h, w);
        let x_std = x.as_standard_layout();
        let xs = x_std.as_slice().expect("standard layout");
        let mut cols = Array2::zeros((bsz * oh * ow, c_in * k * k));
        let cs = cols.as_slice_mut().expect("standard layout");
        let row_len = c_in * k * k;
        for b in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * row_len;
                    for ci in 0..c_in {
                        let base_in = (b * c_in + ci) * h * w;
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            let col_base = row + (ci * k + ky) * k;
                            if y < 0 || y >= h as isize {
                                continue; // padded rows stay zero
                            }
                            let line = base_in + y as usize * w;
                            for kx in 0..k {
                                let xpos = (ox * self.stride + kx) as isize - self.pad as isize;
                                if xpos < 0 || xpos >= w as isize {
                                    continue;
                                }
                                cs[col_base + kx] = xs[line + xpos as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCache<T>) {
        let (bsz, _, _, _) = x.dim();
        let (c_out, c_in, k, _) = self.w.dim();
        let (cols, (oh, ow)) = self.im2col(x);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * k * k))
            .expect("contiguous weights");
        // (B*OH*OW, C_out)
        let mut out2 = cols.dot(&w2.t());
        for mut row in out2.rows_mut() {
            row += &self.b;
        }
        let mut out = Array4::zeros((bsz, c_out, oh, ow));
        {
            let os = out.as_slice_mut().unwrap();
            let o2 = out2.as_slice().unwrap();
            for b in 0..bsz {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((b * oh + oy) * ow + ox) * c_out;
                        for co in 0..c_out {
                            os[((b * c_out + co) * oh + oy) * ow + ox] = o2[row + co];
                        }
                    }
                }
            }
        }
        (
            out,
            ConvCache {
                cols,
                in_dim: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Computes requested gradients without touching the layer itself, so a
    /// shared immutable model can serve input gradients concurrently.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dout: &Array4<T>,
        need_dx: bool,
        need_dw: bool,
    ) -> ConvGrads<T> {
        let (bsz, c_in, h, w) = cache.in_dim;
        let (c_out, _, k, _) = self.w.dim();
        let (oh, ow) = cache.out_hw;
        // Reshuffle dout to (B*OH*OW, C_out).
        let mut dout2 = Array2::zeros((bsz * oh * ow, c_out));
        {
            let ds = dout.as_slice().unwrap();
            let d2 = dout2.as_slice_mut().unwrap();
            for b in 0..bsz {
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            d2[((b * oh + oy) * ow + ox) * c_out + co] =
                                ds[((b * c_out + co) * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        let (gw, gb) = if need_dw {
            let gw2 = dout2.t().dot(&cache.cols); // (C_out, C_in*k*k)
            let gw = gw2
                .into_shape_with_order((c_out, c_in, k, k))
                .expect("shape");
            (Some(gw), Some(dout2.sum_axis(Axis(0))))
        } else {
            (None, None)
        };
        let dx = need_dx.then(|| {
            let w2 = self
                .w
                .view()
                .into_shape_with_order((c_out, c_in * k * k))
                .expect("contiguous weights");
            let dcols = dout2.dot(&w2); // (B*OH*OW, C_in*k*k)
            let mut dx = Array4::zeros((bsz, c_in, h, w));
            let dxs = dx.as_slice_mut().unwrap();
            let dcs = dcols.as_slice().unwrap();
            let row_len = c_in * k * k;
            for b in 0..bsz {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((b * oh + oy) * ow + ox) * row_len;
                        for ci in 0..c_in {
                            let base_in = (b * c_in + ci) * h * w;
                            for ky in 0..k {
                                let y = (oy * self.stride + ky) as isize - self.pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let line = base_in + y as usize * w;
                                let col_base = row + (ci * k + ky) * k;
                                for kx in 0..k {
                                    let xpos =
                                        (ox * self.stride + kx) as isize - self.pad as isize;
                                    if xpos < 0 || xpos >= w as isize {
                                        continue;
                                    }
                                    dxs[line + xpos as usize] += dcs[col_base + kx];
                                }
                            }
                        }
                    }
                }
            }
            dx
        });
        ConvGrads { gw, gb, dx }
    }

    /// One Adam step from gradients produced by [`Conv2d::backward`].
    pub fn step(&mut self, opt: &Adam, gw: &Array4<T>, gb: &Array1<T>) {
        self.sw.update(opt, &mut self.w, gw, T::zero());
        self.sb.update(opt, &mut self.b, gb, T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Fully connected layer, weights `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
    sw: AdamState<T>,
    sb: AdamState<T>,
}

/// Gradients returned by [`Linear::backward`].
pub struct LinearGrads<T> {
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    pub dx: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / d_in as f64).sqrt();
        let std_t = T::from_f64_c(std);
        Linear {
            w: Array2::from_shape_fn((d_out, d_in), |_| T::standard_normal(rng) * std_t),
            b: Array1::zeros(d_out),
            sw: AdamState::new(d_out * d_in),
            sb: AdamState::new(d_out),
        }
    }

    /// Rebuilds a layer around loaded weights (fresh optimizer state).
    pub fn from_parts(w: Array2<T>, b: Array1<T>) -> Self {
        let sw = AdamState::new(w.len());
        let sb = AdamState::new(b.len());
        Linear { w, b, sw, sb }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = x.dot(&self.w.t());
        for mut row in out.rows_mut() {
            row += &self.b;
        }
        out
    }

    pub fn backward(&self, x: &Array2<T>, dout: &Array2<T>, need_dx: bool) -> LinearGrads<T> {
        LinearGrads {
            gw: dout.t().dot(x),
            gb: dout.sum_axis(Axis(0)),
            dx: need_dx.then(|| dout.dot(&self.w)),
        }
    }

    pub fn step(&mut self, opt: &Adam, gw: &Array2<T>, gb: &Array1<T>) {
        self.sw.update(opt, &mut self.w, gw, T::zero());
        self.sb.update(opt, &mut self.b, gb, T::zero());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v.max(T::zero()))
}

/// `dout` masked by the activation's output (stored, not recomputed).
pub fn relu_backward<T: Scalar>(out: &Array4<T>, dout: &Array4<T>) -> Array4<T> {
    let mut dx = dout.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// 2x2 mean pooling with stride 2 (even spatial dims required).
pub fn avg_pool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let q = T::from_f64_c(0.25);
    Array4::from_shape_fn((b, c, h / 2, w / 2), |(bi, ci, y, xx)| {
        (x[[bi, ci, 2 * y, 2 * xx]]
            + x[[bi, ci, 2 * y, 2 * xx + 1]]
            + x[[bi, ci, 2 * y + 1, 2 * xx]]
            + x[[bi, ci, 2 * y + 1, 2 * xx + 1]])
            * q
    })
}

pub fn avg_pool2_backward<T: Scalar>(dout: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = dout.dim();
    let q = T::from_f64_c(0.25);
    Array4::from_shape_fn((b, c, h * 2, w * 2), |(bi, ci, y, xx)| {
        dout[[bi, ci, y / 2, xx / 2]] * q
    })
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, h * 2, w * 2), |(bi, ci, y, xx)| {
        x[[bi, ci, y / 2, xx / 2]]
    })
}

pub fn upsample2_backward<T: Scalar>(dout: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = dout.dim();
    let mut dx = Array4::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    dx[[bi, ci, y / 2, xx / 2]] += dout[[bi, ci, y, xx]];
                }
            }
        }
    }
    dx
}

/// `(B, C, H, W) -> (B, C)` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let scale = T::one() / T::from_usize(h * w).unwrap();
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = T::zero();
            for y in 0..h {
                for xx in 0..w {
                    acc += x[[bi, ci, y, xx]];
                }
            }
            out[[bi, ci]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(
    dout: &Array2<T>,
    h: usize,
    w: usize,
) -> Array4<T> {
    let (b, c) = dout.dim();
    let scale = T::one() / T::from_usize(h * w).unwrap();
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dout[[bi, ci]] * scale)
}

/// Concatenate along channels.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

/// Split a channel-gradient back into the two concatenated parts.
pub fn split_channels<T: Scalar>(d: &Array4<T>, c_first: usize) -> (Array4<T>, Array4<T>) {
    let first = d.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let second = d.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (first, second)
}

/// Mean cross-entropy of `logits` `(B, K)` against integer labels, plus the
/// gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Array2<T>,
    labels: &[usize],
) -> crate::error::Result<(T, Array2<T>)> {
    use crate::error::Error;
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::shape(&[b], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut dlogits = Array2::zeros((b, k));
    let mut total = T::zero();
    let inv_b = T::one() / T::from_usize(b).unwrap();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in row.iter() {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let target = labels[i];
        total += log_denom - (row[target] - max);
        for j in 0..k {
            let p = (row[j] - max).exp() / denom;
            let y = if j == target { T::one() } else { T::zero() };
            dlogits[[i, j]] = (p - y) * inv_b;
        }
    }
    Ok((total * inv_b, dlogits))
}

/// Fraction of rows whose argmax equals the label, in percent.
pub fn accuracy_pct<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> f64 {
    let b = logits.dim().0;
    let mut hit = 0usize;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == labels[i] {
            hit += 1;
        }
    }
    100.0 * hit as f64 / b as f64
}
