//! Convolution, pooling, normalization and dense layers.

use super::{Scalar, Tensor, Var};
use crate::error::{shape_err, Result};

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding }
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    /// Elements reduced per channel.
    pub count: usize,
}

impl<F: Scalar> BatchNormStats<F> {
    /// Exponential moving update of running statistics; the variance is
    /// stored unbiased.
    pub fn update_running(&self, running_mean: &mut [F], running_var: &mut [F], momentum: F) {
        let keep = F::one() - momentum;
        let corr = if self.count > 1 {
            F::of(self.count as f64 / (self.count - 1) as f64)
        } else {
            F::one()
        };
        for c in 0..self.mean.len() {
            running_mean[c] = keep * running_mean[c] + momentum * self.mean[c];
            running_var[c] = keep * running_var[c] + momentum * self.var[c] * corr;
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Fills `cols` (K rows x nb*P columns) for samples `b0..b0+nb`.
    fn im2col<F: Scalar>(&self, x: &[F], b0: usize, nb: usize, cols: &mut [F]) {
        let ncols = nb * self.p();
        let plane = self.h * self.w;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst_row = &mut cols[row * ncols..][..ncols];
                    for bb in 0..nb {
                        let src = &x[((b0 + bb) * self.cin + c) * plane..][..plane];
                        let dst = &mut dst_row[bb * self.p()..][..self.p()];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + i) as isize - self.pad as isize;
                            let drow = &mut dst[oy * self.wo..][..self.wo];
                            if iy < 0 || iy >= self.h as isize {
                                drow.fill(F::zero());
                                continue;
                            }
                            let srow = &src[iy as usize * self.w..][..self.w];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + j) as isize - self.pad as isize;
                                *d = if ix < 0 || ix >= self.w as isize {
                                    F::zero()
                                } else {
                                    srow[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `cols` into `gx`.
    fn col2im<F: Scalar>(&self, cols: &[F], b0: usize, nb: usize, gx: &mut [F]) {
        let ncols = nb * self.p();
        let plane = self.h * self.w;
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src_row = &cols[row * ncols..][..ncols];
                    for bb in 0..nb {
                        let dst = &mut gx[((b0 + bb) * self.cin + c) * plane..][..plane];
                        let src = &src_row[bb * self.p()..][..self.p()];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + i) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * self.w..][..self.w];
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + j) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    drow[ix as usize] += src[oy * self.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// Bounds the im2col scratch buffer at roughly 16 MiB of f32.
const IM2COL_BUDGET: usize = 1 << 22;

fn pool_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

impl<'t, F: Scalar> Var<'t, F> {
    /// 2-D cross-correlation of `(B, Cin, H, W)` with `(Cout, Cin, kh, kw)`.
    pub fn conv2d(
        self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        spec: ConvSpec,
    ) -> Result<Var<'t, F>> {
        let xv = self.value();
        let wv = weight.value();
        let (&[b, cin, h, w], &[cout, cin2, kh, kw]) = (xv.shape(), wv.shape()) else {
            return Err(shape_err!(
                "conv2d expects (B,C,H,W) input and (O,C,kh,kw) kernel, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            ));
        };
        if cin != cin2 {
            return Err(shape_err!("conv2d channels: input {} kernel {}", cin, cin2));
        }
        if let Some(bias) = &bias {
            if bias.shape() != [cout] {
                return Err(shape_err!("conv2d bias {:?} for {} outputs", bias.shape(), cout));
            }
        }
        let (Some(ho), Some(wo)) = (
            pool_out(h, kh, spec.stride, spec.padding),
            pool_out(w, kw, spec.stride, spec.padding),
        ) else {
            return Err(shape_err!(
                "conv2d kernel {}x{} does not fit {}x{} with padding {}",
                kh,
                kw,
                h,
                w,
                spec.padding
            ));
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (k, p) = (geom.k(), geom.p());
        let chunk = (IM2COL_BUDGET / (k * p).max(1)).clamp(1, b.max(1));
        let bias_v = bias.map(|v| v.value());
        let mut out = vec![F::zero(); b * cout * p];
        let mut cols = vec![F::zero(); k * chunk * p];
        let mut tmp = vec![F::zero(); cout * chunk * p];
        let mut b0 = 0;
        while b0 < b {
            let nb = chunk.min(b - b0);
            let ncols = nb * p;
            geom.im2col(xv.data(), b0, nb, &mut cols);
            F::gemm_raw(cout, k, ncols, F::one(), wv.data(), k, 1, &cols, ncols, 1, F::zero(), &mut tmp, ncols, 1);
            for bb in 0..nb {
                for co in 0..cout {
                    let add = bias_v.as_ref().map_or(F::zero(), |bv| bv.data()[co]);
                    let dst = &mut out[((b0 + bb) * cout + co) * p..][..p];
                    let src = &tmp[co * ncols + bb * p..][..p];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + add);
                }
            }
            b0 += nb;
        }
        let out = Tensor::new(vec![b, cout, ho, wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![F::zero(); xv.len()]);
                let mut gw = needs[1].then(|| vec![F::zero(); wv.len()]);
                let gb = needs.get(2).copied().unwrap_or(false).then(|| {
                    let mut gb = vec![F::zero(); cout];
                    for bb in 0..b {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(bb * cout + co) * p..][..p].iter().copied().sum();
                        }
                    }
                    gb
                });
                if gx.is_some() || gw.is_some() {
                    let mut cols = vec![F::zero(); k * chunk * p];
                    let mut gtmp = vec![F::zero(); cout * chunk * p];
                    let mut b0 = 0;
                    while b0 < b {
                        let nb = chunk.min(b - b0);
                        let ncols = nb * p;
                        for bb in 0..nb {
                            for co in 0..cout {
                                gtmp[co * ncols + bb * p..][..p]
                                    .copy_from_slice(&g[((b0 + bb) * cout + co) * p..][..p]);
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            geom.im2col(xv.data(), b0, nb, &mut cols);
                            F::gemm_raw(cout, ncols, k, F::one(), &gtmp, ncols, 1, &cols, 1, ncols, F::one(), gw, k, 1);
                        }
                        if let Some(gx) = gx.as_mut() {
                            F::gemm_raw(k, cout, ncols, F::one(), wv.data(), 1, k, &gtmp, ncols, 1, F::zero(), &mut cols, ncols, 1);
                            geom.col2im(&cols, b0, nb, gx);
                        }
                        b0 += nb;
                    }
                }
                let mut grads = vec![gx, gw];
                if needs.len() > 2 {
                    grads.push(gb);
                }
                grads
            }),
        ))
    }

    /// Max pooling over `k x k` windows without padding.
    pub fn max_pool2d(self, k: usize, stride: usize) -> Result<Var<'t, F>> {
        let xv = self.value();
        let &[b, c, h, w] = xv.shape() else {
            return Err(shape_err!("max_pool2d expects rank 4, got {:?}", xv.shape()));
        };
        let (Some(ho), Some(wo)) = (pool_out(h, k, stride, 0), pool_out(w, k, stride, 0)) else {
            return Err(shape_err!("max_pool2d window {} does not fit {}x{}", k, h, w));
        };
        let mut out = vec![F::zero(); b * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = F::neg_infinity();
                    let mut at = 0;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = (oy * stride + i) * w + ox * stride + j;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + at;
                }
            }
        }
        let n_in = xv.len();
        let out = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); n_in];
                for (gi, &a) in g.iter().zip(&arg) {
                    gx[a] += *gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Average pooling over `k x k` windows without padding.
    pub fn avg_pool2d(self, k: usize, stride: usize) -> Result<Var<'t, F>> {
        let xv = self.value();
        let &[b, c, h, w] = xv.shape() else {
            return Err(shape_err!("avg_pool2d expects rank 4, got {:?}", xv.shape()));
        };
        let (Some(ho), Some(wo)) = (pool_out(h, k, stride, 0), pool_out(w, k, stride, 0)) else {
            return Err(shape_err!("avg_pool2d window {} does not fit {}x{}", k, h, w));
        };
        let inv = F::one() / F::of((k * k) as f64);
        let mut out = vec![F::zero(); b * c * ho * wo];
        for plane in 0..b * c {
            let src = &xv.data()[plane * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = F::zero();
                    for i in 0..k {
                        for j in 0..k {
                            s += src[(oy * stride + i) * w + ox * stride + j];
                        }
                    }
                    out[(plane * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let out = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.tape().op(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let dst = &mut gx[plane * h * w..][..h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = g[(plane * ho + oy) * wo + ox] * inv;
                            for i in 0..k {
                                for j in 0..k {
                                    dst[(oy * stride + i) * w + ox * stride + j] += gi;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(shape_err!("global_avg_pool expects rank 4, got {:?}", shape));
        };
        self.reshape(vec![b, c, h * w])?.mean_axis(2)
    }

    /// Collapses every axis after the first.
    pub fn flatten(self) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let Some(&b) = shape.first() else {
            return Err(shape_err!("flatten of a rank-0 tensor"));
        };
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(vec![b, rest])
    }

    /// `x W^T + b` for `x: (M, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>) -> Result<Var<'t, F>> {
        let xv = self.value();
        let wv = weight.value();
        let (&[m, fin], &[fout, fin2]) = (xv.shape(), wv.shape()) else {
            return Err(shape_err!(
                "linear expects (M,in) input and (out,in) weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            ));
        };
        if fin != fin2 {
            return Err(shape_err!("linear in-features: input {} weight {}", fin, fin2));
        }
        if let Some(bias) = &bias {
            if bias.shape() != [fout] {
                return Err(shape_err!("linear bias {:?} for {} outputs", bias.shape(), fout));
            }
        }
        let mut out = vec![F::zero(); m * fout];
        if let Some(bias) = &bias {
            let bv = bias.value();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
        }
        F::gemm_raw(m, fin, fout, F::one(), xv.data(), fin, 1, wv.data(), 1, fin, F::one(), &mut out, fout, 1);
        let out = Tensor::new(vec![m, fout], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().op(
            out,
            &parents,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![F::zero(); m * fin];
                    F::gemm_raw(m, fout, fin, F::one(), g, fout, 1, wv.data(), fin, 1, F::zero(), &mut gx, fin, 1);
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![F::zero(); fout * fin];
                    F::gemm_raw(fout, m, fin, F::one(), g, 1, fout, xv.data(), fin, 1, F::zero(), &mut gw, fin, 1);
                    gw
                });
                let mut grads = vec![gx, gw];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![F::zero(); fout];
                        for row in g.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }

    /// Per-channel normalization of `(B, C, ...)`.
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can fold them into its running averages. With
    /// `running = Some((mean, var))` the stored statistics are applied.
    pub fn batch_norm(
        self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> Result<(Var<'t, F>, Option<BatchNormStats<F>>)> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm expects (B, C, ...), got {:?}", shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err!(
                "batch_norm affine {:?}/{:?} for {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ));
        }
        let count = b * inner;
        let x = xv.data();
        let each = move |ch: usize| {
            (0..b).flat_map(move |bb| {
                let start = (bb * c + ch) * inner;
                start..start + inner
            })
        };
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!("batch_norm running stats for {} channels", c));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let inv = F::one() / F::of(count.max(1) as f64);
                let mean: Vec<F> = (0..c).map(|ch| each(ch).map(|i| x[i]).sum::<F>() * inv).collect();
                let var: Vec<F> = (0..c)
                    .map(|ch| {
                        each(ch)
                            .map(|i| {
                                let d = x[i] - mean[ch];
                                d * d
                            })
                            .sum::<F>()
                            * inv
                    })
                    .collect();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        for ch in 0..c {
            let (g, bb) = (gv.data()[ch], bv.data()[ch]);
            for i in each(ch) {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                out[i] = g * xhat[i] + bb;
            }
        }
        let out = Tensor::new(shape, out)?;
        let training = stats.is_some();
        let var_out = self.tape().op(
            out,
            &[self, gamma, beta],
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| vec![F::zero(); g.len()]);
                let mut gg = vec![F::zero(); c];
                let mut gb = vec![F::zero(); c];
                let inv_m = F::one() / F::of(count.max(1) as f64);
                for ch in 0..c {
                    let (mut sg, mut sgx) = (F::zero(), F::zero());
                    for i in each(ch) {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                    gg[ch] = sgx;
                    gb[ch] = sg;
                    if let Some(gx) = gx.as_mut() {
                        let scale = gv.data()[ch] * inv_std[ch];
                        for i in each(ch) {
                            gx[i] = if training {
                                scale * (g[i] - sg * inv_m - xhat[i] * sgx * inv_m)
                            } else {
                                scale * g[i]
                            };
                        }
                    }
                }
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        );
        Ok((var_out, stats))
    }
}
