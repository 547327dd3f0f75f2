//! Pure forward and vector-Jacobian-product kernels.
//!
//! Shape validation happens in the graph layer; kernels assume consistent
//! inputs. Every loop nest runs in a fixed row-major order so repeated calls
//! are bit-identical.

use super::Tensor;

/// NumPy-style broadcast of two shapes, right-aligned. `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides of `shape` right-aligned into `out`, 0 on broadcast dims.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let off = out_rank - shape.len();
    let mut strides = vec![0usize; out_rank];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[off + i] = s;
        }
        s *= shape[i];
    }
    strides
}

/// Element-wise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        return Tensor::new(a.shape(), data).expect("same shape");
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).expect("validated");
    let rank = out_shape.len();
    let sa = bcast_strides(a.shape(), rank);
    let sb = bcast_strides(b.shape(), rank);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut counters = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..n {
        data.push(f(ad[oa], bd[ob]));
        for d in (0..rank).rev() {
            counters[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if counters[d] < out_shape[d] {
                break;
            }
            counters[d] = 0;
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
        }
    }
    Tensor::new(&out_shape, data).expect("sized")
}

/// Reduces `g` by summation so its shape right-aligns down to `target`.
pub fn sum_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let rank = g.rank();
    let st = bcast_strides(target, rank);
    let mut out = Tensor::zeros(target);
    let shape = g.shape().to_vec();
    let mut counters = vec![0usize; rank];
    let mut ot = 0usize;
    let od = out.data_mut();
    for &v in g.data() {
        od[ot] += v;
        for d in (0..rank).rev() {
            counters[d] += 1;
            ot += st[d];
            if counters[d] < shape[d] {
                break;
            }
            counters[d] = 0;
            ot -= st[d] * shape[d];
        }
    }
    out
}

/// Zero-pads the last two dims of an NCHW tensor by `p` on each side.
pub fn pad4(x: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let (n, c, h, w) = dims4(x);
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    let od = out.data_mut();
    let xd = x.data();
    for img in 0..n * c {
        for y in 0..h {
            let src = (img * h + y) * w;
            let dst = (img * ph + y + p) * pw + p;
            od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    out
}

/// Drops `p` rows/cols from each side of the last two dims.
fn crop4(x: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let (n, c, ph, pw) = dims4(x);
    let (h, w) = (ph - 2 * p, pw - 2 * p);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.data_mut();
    let xd = x.data();
    for img in 0..n * c {
        for y in 0..h {
            let src = (img * ph + y + p) * pw + p;
            let dst = (img * h + y) * w;
            od[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    out
}

#[inline]
pub fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// 2-D cross-correlation. `x` is NCHW, `k` is [F, C, kh, kw].
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xp = pad4(x, pad);
    let (n, c, ph, pw) = dims4(&xp);
    let ks = k.shape();
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let oh = (ph - kh) / stride + 1;
    let ow = (pw - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let od = out.data_mut();
    let xd = xp.data();
    let kd = k.data();
    for bn in 0..n {
        for fo in 0..f {
            let out_img = &mut od[(bn * f + fo) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let xin = &xd[(bn * c + ci) * ph * pw..][..ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let w = kd[((fo * c + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let in_off = (oy * stride + ky) * pw + kx;
                            let orow = &mut out_img[oy * ow..][..ow];
                            if stride == 1 {
                                let irow = &xin[in_off..][..ow];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += w * *i;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += w * xin[in_off + ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] w.r.t. the input.
pub fn conv2d_grad_input(
    g: &Tensor,
    k: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let ks = k.shape();
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let (_, _, oh, ow) = dims4(g);
    let mut dxp = Tensor::zeros(&[n, c, ph, pw]);
    let dd = dxp.data_mut();
    let gd = g.data();
    let kd = k.data();
    for bn in 0..n {
        for fo in 0..f {
            let gimg = &gd[(bn * f + fo) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let dimg = &mut dd[(bn * c + ci) * ph * pw..][..ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((fo * c + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let in_off = (oy * stride + ky) * pw + kx;
                            let grow = &gimg[oy * ow..][..ow];
                            if stride == 1 {
                                let drow = &mut dimg[in_off..][..ow];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * *gv;
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    dimg[in_off + ox * stride] += wv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    crop4(&dxp, pad)
}

/// Gradient of [`conv2d`] w.r.t. the kernel.
pub fn conv2d_grad_kernel(
    g: &Tensor,
    x: &Tensor,
    k_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let xp = pad4(x, pad);
    let (n, c, ph, pw) = dims4(&xp);
    let (f, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
    let (_, _, oh, ow) = dims4(g);
    let mut dk = Tensor::zeros(k_shape);
    let dd = dk.data_mut();
    let gd = g.data();
    let xd = xp.data();
    for bn in 0..n {
        for fo in 0..f {
            let gimg = &gd[(bn * f + fo) * oh * ow..][..oh * ow];
            for ci in 0..c {
                let xin = &xd[(bn * c + ci) * ph * pw..][..ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let in_off = (oy * stride + ky) * pw + kx;
                            let grow = &gimg[oy * ow..][..ow];
                            if stride == 1 {
                                let irow = &xin[in_off..][..ow];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    acc += gv * xin[in_off + ox * stride];
                                }
                            }
                        }
                        dd[((fo * c + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dk
}

/// Transposed 2-D convolution. `x` is NCHW, `k` is [Cin, Cout, kh, kw].
pub fn conv_transpose2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, w) = dims4(x);
    let ks = k.shape();
    let (co, kh, kw) = (ks[1], ks[2], ks[3]);
    let fh = (h - 1) * stride + kh;
    let fw = (w - 1) * stride + kw;
    let mut full = Tensor::zeros(&[n, co, fh, fw]);
    let od = full.data_mut();
    let xd = x.data();
    let kd = k.data();
    for bn in 0..n {
        for c_in in 0..ci {
            let xin = &xd[(bn * ci + c_in) * h * w..][..h * w];
            for c_out in 0..co {
                let oimg = &mut od[(bn * co + c_out) * fh * fw..][..fh * fw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((c_in * co + c_out) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let out_off = (iy * stride + ky) * fw + kx;
                            let xrow = &xin[iy * w..][..w];
                            if stride == 1 {
                                let orow = &mut oimg[out_off..][..w];
                                for (o, xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * *xv;
                                }
                            } else {
                                for (ix, xv) in xrow.iter().enumerate() {
                                    oimg[out_off + ix * stride] += wv * *xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    crop4(&full, pad)
}

/// Gradient of [`conv_transpose2d`] w.r.t. the input.
pub fn tconv_grad_input(
    g: &Tensor,
    k: &Tensor,
    x_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let gf = pad4(g, pad);
    let (n, co, fh, fw) = dims4(&gf);
    let (ci, h, w) = (x_shape[1], x_shape[2], x_shape[3]);
    let ks = k.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    let gd = gf.data();
    let kd = k.data();
    for bn in 0..n {
        for c_in in 0..ci {
            let dimg = &mut dd[(bn * ci + c_in) * h * w..][..h * w];
            for c_out in 0..co {
                let gimg = &gd[(bn * co + c_out) * fh * fw..][..fh * fw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kd[((c_in * co + c_out) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let g_off = (iy * stride + ky) * fw + kx;
                            let drow = &mut dimg[iy * w..][..w];
                            if stride == 1 {
                                let grow = &gimg[g_off..][..w];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * *gv;
                                }
                            } else {
                                for (ix, d) in drow.iter_mut().enumerate() {
                                    *d += wv * gimg[g_off + ix * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv_transpose2d`] w.r.t. the kernel.
pub fn tconv_grad_kernel(
    g: &Tensor,
    x: &Tensor,
    k_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let gf = pad4(g, pad);
    let (n, co, fh, fw) = dims4(&gf);
    let (_, ci, h, w) = dims4(x);
    let (kh, kw) = (k_shape[2], k_shape[3]);
    let mut dk = Tensor::zeros(k_shape);
    let dd = dk.data_mut();
    let gd = gf.data();
    let xd = x.data();
    for bn in 0..n {
        for c_in in 0..ci {
            let xin = &xd[(bn * ci + c_in) * h * w..][..h * w];
            for c_out in 0..co {
                let gimg = &gd[(bn * co + c_out) * fh * fw..][..fh * fw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for iy in 0..h {
                            let g_off = (iy * stride + ky) * fw + kx;
                            let xrow = &xin[iy * w..][..w];
                            if stride == 1 {
                                let grow = &gimg[g_off..][..w];
                                for (xv, gv) in xrow.iter().zip(grow) {
                                    acc += xv * gv;
                                }
                            } else {
                                for (ix, xv) in xrow.iter().enumerate() {
                                    acc += xv * gimg[g_off + ix * stride];
                                }
                            }
                        }
                        dd[((c_in * co + c_out) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dk
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
pub fn max_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    for img in 0..n * c {
        let xin = &xd[img * h * w..][..h * w];
        let oimg = &mut od[img * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = xin[(oy * 2 + dy) * w + ox * 2 + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                oimg[oy * ow + ox] = best;
            }
        }
    }
    out
}

/// Gradient of [`max_pool2`]; ties route to the first maximum in scan order.
pub fn max_pool2_grad(g: &Tensor, x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x.shape());
    let dd = dx.data_mut();
    let xd = x.data();
    let gd = g.data();
    for img in 0..n * c {
        let xin = &xd[img * h * w..][..h * w];
        let gimg = &gd[img * oh * ow..][..oh * ow];
        let dimg = &mut dd[img * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..2 {
                    for dx2 in 0..2 {
                        let idx = (oy * 2 + dy) * w + ox * 2 + dx2;
                        if xin[idx] > best {
                            best = xin[idx];
                            arg = idx;
                        }
                    }
                }
                dimg[arg] += gimg[oy * ow + ox];
            }
        }
    }
    dx
}

/// Dense matrix product of `[m, k] x [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut od[i * n..][..n];
        for l in 0..k {
            let av = ad[i * k + l];
            let brow = &bd[l * n..][..n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

/// Gradient of [`matmul`] w.r.t. `a`: `g . b^T`.
pub fn matmul_grad_a(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut da = Tensor::zeros(&[m, k]);
    let dd = da.data_mut();
    let gd = g.data();
    let bd = b.data();
    for i in 0..m {
        let grow = &gd[i * n..][..n];
        let drow = &mut dd[i * k..][..k];
        for (l, d) in drow.iter_mut().enumerate() {
            let brow = &bd[l * n..][..n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            *d = acc;
        }
    }
    da
}

/// Gradient of [`matmul`] w.r.t. `b`: `a^T . g`.
pub fn matmul_grad_b(g: &Tensor, a: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = a.shape()[1];
    let mut db = Tensor::zeros(&[k, n]);
    let dd = db.data_mut();
    let gd = g.data();
    let ad = a.data();
    for i in 0..m {
        let grow = &gd[i * n..][..n];
        for l in 0..k {
            let av = ad[i * k + l];
            let drow = &mut dd[l * n..][..n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * *gv;
            }
        }
    }
    db
}

/// Row-wise softmax of a `[n, c]` tensor, max-shifted for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[n, c]);
    let od = out.data_mut();
    let xd = x.data();
    for i in 0..n {
        let row = &xd[i * c..][..c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut od[i * c..][..c];
        let mut s = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_grad(g: &Tensor, y: &Tensor) -> Tensor {
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let mut dx = Tensor::zeros(&[n, c]);
    let dd = dx.data_mut();
    let gd = g.data();
    let yd = y.data();
    for i in 0..n {
        let grow = &gd[i * c..][..c];
        let yrow = &yd[i * c..][..c];
        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
        let drow = &mut dd[i * c..][..c];
        for j in 0..c {
            drow[j] = yrow[j] * (grow[j] - dot);
        }
    }
    dx
}

/// Mean cross-entropy of row-softmaxed logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let probs = softmax_rows(logits);
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        total -= probs.data()[i * c + label].ln();
    }
    total / labels.len() as f64
}

/// Gradient of [`cross_entropy`] w.r.t. the logits.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize], gbar: f64) -> Tensor {
    let mut probs = softmax_rows(logits);
    let c = logits.shape()[1];
    let scale = gbar / labels.len() as f64;
    let pd = probs.data_mut();
    for (i, &label) in labels.iter().enumerate() {
        pd[i * c + label] -= 1.0;
        for v in &mut pd[i * c..i * c + c] {
            *v *= scale;
        }
    }
    probs
}

/// Per-sample per-channel spatial mean: NCHW -> [n, c].
pub fn channel_mean(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    let od = out.data_mut();
    for img in 0..n * c {
        od[img] = x.data()[img * h * w..][..h * w].iter().sum::<f64>() / m;
    }
    out
}

pub fn channel_mean_grad(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let inv = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for (img, gv) in g.data().iter().enumerate() {
        for d in &mut dd[img * h * w..(img + 1) * h * w] {
            *d = gv * inv;
        }
    }
    dx
}

/// Per-sample per-channel population variance: NCHW -> [n, c].
pub fn channel_var(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    let od = out.data_mut();
    for img in 0..n * c {
        let win = &x.data()[img * h * w..][..h * w];
        let mu = win.iter().sum::<f64>() / m;
        od[img] = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    }
    out
}

pub fn channel_var_grad(g: &Tensor, x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let dd = dx.data_mut();
    for img in 0..n * c {
        let win = &x.data()[img * h * w..][..h * w];
        let mu = win.iter().sum::<f64>() / m;
        let gv = g.data()[img];
        let dwin = &mut dd[img * h * w..(img + 1) * h * w];
        for (d, v) in dwin.iter_mut().zip(win) {
            *d = gv * 2.0 * (v - mu) / m;
        }
    }
    dx
}

/// Adaptive instance normalization: per (sample, channel) window is
/// normalized to zero mean / unit variance then rescaled by `scale[c]` and
/// shifted by `bias[c]`.
pub fn adain(x: &Tensor, scale: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for bn in 0..n {
        for ch in 0..c {
            let img = bn * c + ch;
            let win = &x.data()[img * h * w..][..h * w];
            let mu = win.iter().sum::<f64>() / m;
            let var = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            let (ga, be) = (scale.data()[ch], bias.data()[ch]);
            let owin = &mut od[img * h * w..(img + 1) * h * w];
            for (o, v) in owin.iter_mut().zip(win) {
                *o = ga * (v - mu) * inv + be;
            }
        }
    }
    out
}

/// Gradients of [`adain`] w.r.t. (x, scale, bias).
pub fn adain_grad(
    g: &Tensor,
    x: &Tensor,
    scale: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dscale = Tensor::zeros(scale.shape());
    let mut dbias = Tensor::zeros(scale.shape());
    for bn in 0..n {
        for ch in 0..c {
            let img = bn * c + ch;
            let win = &x.data()[img * h * w..][..h * w];
            let gwin = &g.data()[img * h * w..][..h * w];
            let mu = win.iter().sum::<f64>() / m;
            let var = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            let ga = scale.data()[ch];
            // dxhat = g * gamma; accumulate the three reduction terms.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xc = 0.0;
            let mut sum_g = 0.0;
            let mut sum_g_xhat = 0.0;
            for (gv, v) in gwin.iter().zip(win) {
                let xc = v - mu;
                let dxh = gv * ga;
                sum_dxhat += dxh;
                sum_dxhat_xc += dxh * xc;
                sum_g += gv;
                sum_g_xhat += gv * xc * inv;
            }
            let dvar = sum_dxhat_xc * (-0.5) * inv * inv * inv;
            let dmu = -sum_dxhat * inv;
            let dwin = &mut dx.data_mut()[img * h * w..(img + 1) * h * w];
            for ((d, gv), v) in dwin.iter_mut().zip(gwin).zip(win) {
                let xc = v - mu;
                *d = gv * ga * inv + dvar * 2.0 * xc / m + dmu / m;
            }
            dscale.data_mut()[ch] += sum_g_xhat;
            dbias.data_mut()[ch] += sum_g;
        }
    }
    (dx, dscale, dbias)
}

/// Mean over all k x k windows (valid padding): NCHW -> [n, c, h-k+1, w-k+1].
pub fn window_mean(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let inv = 1.0 / (k * k) as f64;
    // Separable: row sums into a scratch buffer, then column sums.
    let mut rows = vec![0.0; h * ow];
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        for y in 0..h {
            let xrow = &xin[y * w..][..w];
            let rrow = &mut rows[y * ow..][..ow];
            let mut acc: f64 = xrow[..k].iter().sum();
            rrow[0] = acc;
            for ox in 1..ow {
                acc += xrow[ox + k - 1] - xrow[ox - 1];
                rrow[ox] = acc;
            }
        }
        let oimg = &mut od[img * oh * ow..][..oh * ow];
        for ox in 0..ow {
            let mut acc: f64 = (0..k).map(|y| rows[y * ow + ox]).sum();
            oimg[ox] = acc * inv;
            for oy in 1..oh {
                acc += rows[(oy + k - 1) * ow + ox] - rows[(oy - 1) * ow + ox];
                oimg[oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn window_mean_grad(g: &Tensor, x_shape: &[usize], k: usize) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let imgs = x_shape[0] * x_shape[1];
    let inv = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for img in 0..imgs {
        let gimg = &g.data()[img * oh * ow..][..oh * ow];
        let dimg = &mut dd[img * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gimg[oy * ow + ox] * inv;
                for dy in 0..k {
                    let drow = &mut dimg[(oy + dy) * w + ox..][..k];
                    for d in drow {
                        *d += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Source coordinate for half-pixel-aligned resize.
#[inline]
fn resize_src(o: usize, src: usize, dst: usize) -> f64 {
    (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        let oimg = &mut od[img * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let sy = (resize_src(oy, h, oh).round() as isize).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let sx =
                    (resize_src(ox, w, ow).round() as isize).clamp(0, w as isize - 1) as usize;
                oimg[oy * ow + ox] = xin[sy * w + sx];
            }
        }
    }
    out
}

pub fn resize_nearest_grad(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = dims4(g);
    let imgs = x_shape[0] * x_shape[1];
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for img in 0..imgs {
        let gimg = &g.data()[img * oh * ow..][..oh * ow];
        let dimg = &mut dd[img * h * w..][..h * w];
        for oy in 0..oh {
            let sy = (resize_src(oy, h, oh).round() as isize).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let sx =
                    (resize_src(ox, w, ow).round() as isize).clamp(0, w as isize - 1) as usize;
                dimg[sy * w + sx] += gimg[oy * ow + ox];
            }
        }
    }
    dx
}

/// The four taps of a bilinear sample at (sy, sx) with edge clamping.
#[inline]
pub(crate) fn bilinear_taps(sy: f64, sx: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let cl = |v: f64, hi: usize| (v as isize).clamp(0, hi as isize - 1) as usize;
    let (iy0, iy1) = (cl(y0, h), cl(y0 + 1.0, h));
    let (ix0, ix1) = (cl(x0, w), cl(x0 + 1.0, w));
    [
        (iy0 * w + ix0, (1.0 - fy) * (1.0 - fx)),
        (iy0 * w + ix1, (1.0 - fy) * fx),
        (iy1 * w + ix0, fy * (1.0 - fx)),
        (iy1 * w + ix1, fy * fx),
    ]
}

pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        let oimg = &mut od[img * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let sy = resize_src(oy, h, oh);
            for ox in 0..ow {
                let sx = resize_src(ox, w, ow);
                let mut acc = 0.0;
                for (idx, wgt) in bilinear_taps(sy, sx, h, w) {
                    acc += wgt * xin[idx];
                }
                oimg[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn resize_bilinear_grad(g: &Tensor, x_shape: &[usize]) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = dims4(g);
    let imgs = x_shape[0] * x_shape[1];
    let mut dx = Tensor::zeros(x_shape);
    let dd = dx.data_mut();
    for img in 0..imgs {
        let gimg = &g.data()[img * oh * ow..][..oh * ow];
        let dimg = &mut dd[img * h * w..][..h * w];
        for oy in 0..oh {
            let sy = resize_src(oy, h, oh);
            for ox in 0..ow {
                let sx = resize_src(ox, w, ow);
                let gv = gimg[oy * ow + ox];
                for (idx, wgt) in bilinear_taps(sy, sx, h, w) {
                    dimg[idx] += wgt * gv;
                }
            }
        }
    }
    dx
}

/// Mean of squared forward differences along both spatial axes of NCHW.
pub fn tv_loss(x: &Tensor) -> f64 {
    let (n, c, h, w) = dims4(x);
    let count = n * c * ((h - 1) * w + h * (w - 1));
    if count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        for y in 0..h {
            for xpos in 0..w {
                let v = xin[y * w + xpos];
                if y + 1 < h {
                    let d = xin[(y + 1) * w + xpos] - v;
                    total += d * d;
                }
                if xpos + 1 < w {
                    let d = xin[y * w + xpos + 1] - v;
                    total += d * d;
                }
            }
        }
    }
    total / count as f64
}

pub fn tv_loss_grad(x: &Tensor, gbar: f64) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let count = n * c * ((h - 1) * w + h * (w - 1));
    let mut dx = Tensor::zeros(x.shape());
    if count == 0 {
        return dx;
    }
    let scale = 2.0 * gbar / count as f64;
    let dd = dx.data_mut();
    for img in 0..n * c {
        let xin = &x.data()[img * h * w..][..h * w];
        let dimg = &mut dd[img * h * w..][..h * w];
        for y in 0..h {
            for xpos in 0..w {
                let v = xin[y * w + xpos];
                if y + 1 < h {
                    let d = scale * (xin[(y + 1) * w + xpos] - v);
                    dimg[(y + 1) * w + xpos] += d;
                    dimg[y * w + xpos] -= d;
                }
                if xpos + 1 < w {
                    let d = scale * (xin[y * w + xpos + 1] - v);
                    dimg[y * w + xpos + 1] += d;
                    dimg[y * w + xpos] -= d;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_add_and_sum_to_are_adjoint_shapes() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(&[3], vec![10., 20., 30.]).unwrap();
        let c = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let g = Tensor::full(&[2, 3], 1.0);
        let gb = sum_to(&g, &[3]);
        assert_eq!(gb.data(), &[2., 2., 2.]);
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::new(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &k, 1, 0);
        // Each output is x[i][j] + x[i+1][j+1].
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv2d_stride_two_and_padding() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], vec![0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let y = conv2d(&x, &k, 2, 1);
        // Identity kernel center picks the strided grid points.
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0., 2., 8., 10.]);
    }

    #[test]
    fn tconv_inverts_spatial_shape_of_strided_conv() {
        let x = Tensor::full(&[1, 2, 5, 5], 1.0);
        let k = Tensor::full(&[2, 3, 4, 4], 0.5);
        let y = conv_transpose2d(&x, &k, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 10, 10]);
        let back = conv2d(&y, &Tensor::full(&[1, 3, 4, 4], 1.0), 2, 1);
        assert_eq!(back.shape(), &[1, 1, 5, 5]);
    }

    #[test]
    fn maxpool_ties_take_first_in_scan_order() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![7., 7., 7., 7.]).unwrap();
        let g = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let dx = max_pool2_grad(&g, &x);
        assert_eq!(dx.data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn matmul_small_case() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap();
        let y = softmax_rows(&x);
        let s: f64 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let x2 = Tensor::new(&[1, 3], vec![101., 102., 103.]).unwrap();
        let y2 = softmax_rows(&x2);
        assert!(y.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let logits = Tensor::zeros(&[4, 10]);
        let loss = cross_entropy(&logits, &[0, 3, 5, 9]);
        assert!((loss - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_match_direct_computation() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert!((channel_mean(&x).item() - 2.5).abs() < 1e-12);
        assert!((channel_var(&x).item() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn adain_normalizes_then_rescales() {
        let x = Tensor::new(&[1, 1, 1, 4], vec![0., 2., 4., 6.]).unwrap();
        let scale = Tensor::new(&[1], vec![2.0]).unwrap();
        let bias = Tensor::new(&[1], vec![1.0]).unwrap();
        let y = adain(&x, &scale, &bias, 0.0);
        // mean 3, std sqrt(5): normalized {-3,-1,1,3}/sqrt(5) * 2 + 1.
        let s = 5f64.sqrt();
        let want = [-6.0 / s + 1.0, -2.0 / s + 1.0, 2.0 / s + 1.0, 6.0 / s + 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_mean_uniform_input_is_identity() {
        let x = Tensor::full(&[1, 1, 6, 6], 0.25);
        let y = window_mean(&x, 3);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn window_mean_matches_naive_sum() {
        let x = Tensor::from_fn(&[1, 2, 7, 9], |i| ((i * 37 + 11) % 17) as f64 / 17.0);
        let k = 4;
        let y = window_mean(&x, k);
        let (h, w) = (7, 9);
        for c in 0..2 {
            for oy in 0..h - k + 1 {
                for ox in 0..w - k + 1 {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at4(0, c, oy + dy, ox + dx);
                        }
                    }
                    let want = acc / (k * k) as f64;
                    assert!((y.at4(0, c, oy, ox) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn resize_nearest_doubles_pixels() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = resize_nearest(&x, 4, 4);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn resize_bilinear_preserves_constant_images() {
        let x = Tensor::full(&[1, 3, 5, 7], 0.6);
        let y = resize_bilinear(&x, 11, 3);
        for v in y.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_loss_zero_on_constant_and_positive_otherwise() {
        assert_eq!(tv_loss(&Tensor::full(&[1, 3, 8, 8], 0.3)), 0.0);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
        assert!(tv_loss(&x) > 0.0);
    }
}
