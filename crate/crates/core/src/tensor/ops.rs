//! Differentiable operations recorded on the tape.
//!
//! Shape conventions: feature maps are `[n, h, w, c]` row-major; rank-3
//! `[h, w, c]` inputs are treated as a batch of one and the batch axis is
//! squeezed from the result. Convolution kernels are `[kh, kw, c_in, c_out]`.

use super::tape::{GradSink, Tape};
use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Default batch-norm variance guard.
pub const BN_EPSILON: Scalar = 1e-5;
/// Default exponential moving-average decay for batch-norm running stats.
pub const BN_EMA_DECAY: Scalar = 0.9;

/// Per-channel running mean/variance for batch normalization. Variances are
/// biased (divide by the element count), matching the normalization itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if k > padded {
        return Err(Error::invalid(format!(
            "kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, h, w, cin) = input.dims4()?;
    let (kh, kw, kcin, cout) = kernel.dims4()?;
    if kcin != cin {
        return Err(Error::invalid(format!(
            "kernel expects {kcin} input channels, feature map has {cin}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    let oh = conv_out_extent(h, kh, stride, padding)?;
    let ow = conv_out_extent(w, kw, stride, padding)?;

    let x = input.data();
    let k = kernel.data();
    let mut out = Tensor::zeros(&[n, oh, ow, cout]);
    // One chunk per (n, oy) output row; rows are independent.
    par::for_each_chunk_mut(out.data_mut(), ow * cout, |row, chunk| {
        let bi = row / oh;
        let oy = row % oh;
        if let Some(b) = bias {
            for ox in 0..ow {
                chunk[ox * cout..(ox + 1) * cout].copy_from_slice(b.data());
            }
        }
        for ky in 0..kh {
            let iy = (oy * stride + ky) as isize - padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for kx in 0..kw {
                for ox in 0..ow {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let in_base = ((bi * h + iy) * w + ix) * cin;
                    let out_base = ox * cout;
                    for ci in 0..cin {
                        let a = x[in_base + ci];
                        if a == 0.0 {
                            continue;
                        }
                        let k_base = ((ky * kw + kx) * cin + ci) * cout;
                        let krow = &k[k_base..k_base + cout];
                        let orow = &mut chunk[out_base..out_base + cout];
                        for co in 0..cout {
                            orow[co] += a * krow[co];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, h, w, cin) = input.dims4().expect("validated in forward");
    let (kh, kw, _, cout) = kernel.dims4().expect("validated in forward");
    let (_, oh, ow, _) = grad.dims4().expect("grad shape follows output");
    let x = input.data();
    let k = kernel.data();
    let g = grad.data();

    let d_input = want_input.then(|| {
        let mut di = Tensor::zeros(input.shape());
        // Per-sample slices are disjoint.
        par::for_each_chunk_mut(di.data_mut(), h * w * cin, |bi, dslice| {
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let g_base = ((bi * oh + oy) * ow + ox) * cout;
                        let grow = &g[g_base..g_base + cout];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ix = ix as usize;
                            let d_base = (iy * w + ix) * cin;
                            for ci in 0..cin {
                                let k_base = ((ky * kw + kx) * cin + ci) * cout;
                                let krow = &k[k_base..k_base + cout];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += grow[co] * krow[co];
                                }
                                dslice[d_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        });
        di
    });

    let d_kernel = want_kernel.then(|| {
        // Per-sample partials, summed in batch order for determinism.
        let partials = par::map_indexed(n, |bi| {
            let mut dk = vec![0.0; k.len()];
            for oy in 0..oh {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let g_base = ((bi * oh + oy) * ow + ox) * cout;
                        let grow = &g[g_base..g_base + cout];
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ix = ix as usize;
                            let in_base = ((bi * h + iy) * w + ix) * cin;
                            for ci in 0..cin {
                                let a = x[in_base + ci];
                                if a == 0.0 {
                                    continue;
                                }
                                let k_base = ((ky * kw + kx) * cin + ci) * cout;
                                let drow = &mut dk[k_base..k_base + cout];
                                for co in 0..cout {
                                    drow[co] += a * grow[co];
                                }
                            }
                        }
                    }
                }
            }
            dk
        });
        let mut dk = Tensor::zeros(kernel.shape());
        for p in partials {
            for (a, b) in dk.data_mut().iter_mut().zip(p.iter()) {
                *a += b;
            }
        }
        dk
    });

    let d_bias = want_bias.then(|| {
        let mut db = vec![0.0; cout];
        for chunk in g.chunks_exact(cout) {
            for (a, b) in db.iter_mut().zip(chunk.iter()) {
                *a += b;
            }
        }
        Tensor::from_vec(&[cout], db).expect("bias grad shape")
    });

    (d_input, d_kernel, d_bias)
}

/// Axis decomposition for slice-wise operations along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    /// 2-D cross-correlation ("convolution" in CNN usage) with optional bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batched, squeeze) = self.value(input).as_batched()?;
        let out = conv2d_forward(
            &batched,
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = if squeeze {
            out.reshaped(&out.shape()[1..])?
        } else {
            out
        };
        let mut parents = vec![input, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        let want_input = self.needs_grad(input);
        let want_kernel = self.needs_grad(kernel);
        let want_bias = bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        let kernel_val = self.value(kernel).clone();
        let out_shape_full: Vec<usize> = if squeeze {
            let mut s = vec![1];
            s.extend_from_slice(out.shape());
            s
        } else {
            out.shape().to_vec()
        };
        Ok(self.push_op(out, &parents, move || {
            Box::new(move |g, sink: &mut GradSink| {
                let g_full = g
                    .reshaped(&out_shape_full)
                    .expect("conv grad reshape");
                let (di, dk, db) = conv2d_backward(
                    &batched,
                    &kernel_val,
                    &g_full,
                    stride,
                    padding,
                    want_input,
                    want_kernel,
                    want_bias,
                );
                if let Some(di) = di {
                    let di = if squeeze {
                        di.reshaped(&di.shape()[1..]).expect("squeeze grad")
                    } else {
                        di
                    };
                    sink.add(input, di);
                }
                if let Some(dk) = dk {
                    sink.add(kernel, dk);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    sink.add(b, db);
                }
            })
        }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let out = x.map(|v| v.max(0.0));
        self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data().iter()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                sink.add(input, dx);
            })
        })
    }

    /// Batch normalization over the batch and spatial axes, per channel.
    ///
    /// Train mode normalizes with the batch statistics (biased variance) and
    /// folds them into `stats` with decay [`BN_EMA_DECAY`]; eval mode
    /// normalizes with `stats` as-is.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BatchNormMode,
        epsilon: Scalar,
        decay: Scalar,
    ) -> Result<Var> {
        let (x4, squeeze) = self.value(input).as_batched()?;
        let (n, h, w, c) = x4.dims4()?;
        let m = n * h * w;
        if m == 0 {
            return Err(Error::invalid("batchnorm over an empty batch"));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::invalid(format!(
                "gamma/beta shapes {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::invalid(format!(
                "running stats track {} channels, input has {c}",
                stats.mean.len()
            )));
        }

        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for chunk in x4.data().chunks_exact(c) {
                    for (mc, &v) in mean.iter_mut().zip(chunk.iter()) {
                        *mc += v;
                    }
                }
                for mc in mean.iter_mut() {
                    *mc /= m as Scalar;
                }
                for chunk in x4.data().chunks_exact(c) {
                    for ((vc, &v), &mu) in var.iter_mut().zip(chunk.iter()).zip(mean.iter()) {
                        let d = v - mu;
                        *vc += d * d;
                    }
                }
                for vc in var.iter_mut() {
                    *vc /= m as Scalar;
                }
                for ci in 0..c {
                    stats.mean[ci] = decay * stats.mean[ci] + (1.0 - decay) * mean[ci];
                    stats.var[ci] = decay * stats.var[ci] + (1.0 - decay) * var[ci];
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };

        let inv_std: Vec<Scalar> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
        let g_val = self.value(gamma).data().to_vec();
        let b_val = self.value(beta).data().to_vec();

        let mut xhat = vec![0.0; x4.len()];
        let mut out = Tensor::zeros(x4.shape());
        for ((ochunk, hchunk), xchunk) in out
            .data_mut()
            .chunks_exact_mut(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(x4.data().chunks_exact(c))
        {
            for ci in 0..c {
                let xh = (xchunk[ci] - mean[ci]) * inv_std[ci];
                hchunk[ci] = xh;
                ochunk[ci] = g_val[ci] * xh + b_val[ci];
            }
        }
        let out = if squeeze {
            out.reshaped(&out.shape()[1..])?
        } else {
            out
        };
        let in_shape = self.value(input).shape().to_vec();
        let train = mode == BatchNormMode::Train;
        Ok(self.push_op(out, &[input, gamma, beta], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gchunk, hchunk) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ci in 0..c {
                        dgamma[ci] += gchunk[ci] * hchunk[ci];
                        dbeta[ci] += gchunk[ci];
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                if train {
                    // d_x = gamma/std * (g - mean(g) - xhat * mean(g*xhat)), per channel
                    let mf = m as Scalar;
                    for ((dchunk, gchunk), hchunk) in dx
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ci in 0..c {
                            dchunk[ci] = g_val[ci]
                                * inv_std[ci]
                                * (gchunk[ci] - dbeta[ci] / mf - hchunk[ci] * dgamma[ci] / mf);
                        }
                    }
                } else {
                    for (dchunk, gchunk) in dx.chunks_exact_mut(c).zip(gd.chunks_exact(c)) {
                        for ci in 0..c {
                            dchunk[ci] = gchunk[ci] * g_val[ci] * inv_std[ci];
                        }
                    }
                }
                sink.add(input, Tensor::from_vec(&in_shape, dx).expect("bn grad shape"));
                sink.add(gamma, Tensor::from_vec(&[c], dgamma).expect("gamma grad"));
                sink.add(beta, Tensor::from_vec(&[c], dbeta).expect("beta grad"));
            })
        }))
    }

    /// Normalize every slice along `axis` to unit L2 norm; slices with norm
    /// below `epsilon` become all zeros.
    pub fn l2_normalize(&mut self, input: Var, axis: usize, epsilon: Scalar) -> Result<Var> {
        let x = self.value(input).clone();
        if axis >= x.rank() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for rank {}",
                x.rank()
            )));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = Tensor::zeros(x.shape());
        let mut norms = vec![0.0; outer * inner];
        {
            let xd = x.data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut sq = 0.0;
                    for kk in 0..len {
                        let v = xd[base + kk * inner];
                        sq += v * v;
                    }
                    let nrm = sq.sqrt();
                    norms[o * inner + i] = nrm;
                    if nrm >= epsilon {
                        for kk in 0..len {
                            od[base + kk * inner] = xd[base + kk * inner] / nrm;
                        }
                    }
                }
            }
        }
        let y = out.clone();
        Ok(self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let gd = g.data();
                let yd = y.data();
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        if nrm < epsilon {
                            continue; // constant-zero output
                        }
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for kk in 0..len {
                            dot += yd[base + kk * inner] * gd[base + kk * inner];
                        }
                        for kk in 0..len {
                            let idx = base + kk * inner;
                            dx[idx] = (gd[idx] - yd[idx] * dot) / nrm;
                        }
                    }
                }
                sink.add(input, Tensor::from_vec(x.shape(), dx).expect("l2 grad shape"));
            })
        }))
    }

    /// Fully connected layer: `[n, f] x [f, p] + [p] -> [n, p]`.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let wt = self.value(weights).clone();
        let b = self.value(bias).clone();
        if x.rank() != 2 || wt.rank() != 2 {
            return Err(Error::invalid("linear expects rank-2 input and weights"));
        }
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let (fw, p) = (wt.shape()[0], wt.shape()[1]);
        if f != fw || b.shape() != [p] {
            return Err(Error::invalid(format!(
                "linear shapes incompatible: input [{n},{f}], weights [{fw},{p}], bias {:?}",
                b.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, p]);
        {
            let xd = x.data();
            let wd = wt.data();
            let od = out.data_mut();
            for r in 0..n {
                let orow = &mut od[r * p..(r + 1) * p];
                orow.copy_from_slice(b.data());
                for k in 0..f {
                    let a = xd[r * f + k];
                    if a == 0.0 {
                        continue;
                    }
                    let wrow = &wd[k * p..(k + 1) * p];
                    for j in 0..p {
                        orow[j] += a * wrow[j];
                    }
                }
            }
        }
        Ok(self.push_op(out, &[input, weights, bias], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let gd = g.data();
                let xd = x.data();
                let wd = wt.data();
                let mut dx = vec![0.0; n * f];
                let mut dw = vec![0.0; f * p];
                let mut db = vec![0.0; p];
                for r in 0..n {
                    let grow = &gd[r * p..(r + 1) * p];
                    for k in 0..f {
                        let wrow = &wd[k * p..(k + 1) * p];
                        let mut acc = 0.0;
                        for j in 0..p {
                            acc += grow[j] * wrow[j];
                        }
                        dx[r * f + k] = acc;
                        let a = xd[r * f + k];
                        if a != 0.0 {
                            let dwrow = &mut dw[k * p..(k + 1) * p];
                            for j in 0..p {
                                dwrow[j] += a * grow[j];
                            }
                        }
                    }
                    for j in 0..p {
                        db[j] += grow[j];
                    }
                }
                sink.add(input, Tensor::from_vec(&[n, f], dx).expect("dx shape"));
                sink.add(weights, Tensor::from_vec(&[f, p], dw).expect("dw shape"));
                sink.add(bias, Tensor::from_vec(&[p], db).expect("db shape"));
            })
        }))
    }

    /// Collapse `[n, h, w, c]` (or `[h, w, c]`) into rows of a rank-2 matrix.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, rest) = match x.rank() {
            4 => (x.shape()[0], x.len() / x.shape()[0]),
            3 => (1, x.len()),
            r => {
                return Err(Error::invalid(format!(
                    "flatten expects rank 3 or 4, got rank {r}"
                )))
            }
        };
        let in_shape = x.shape().to_vec();
        let out = x.reshaped(&[n, rest])?;
        Ok(self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                sink.add(input, g.reshaped(&in_shape).expect("flatten grad"));
            })
        }))
    }

    /// Elementwise difference `a - b` of identically shaped tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::invalid(format!(
                "sub shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.push_op(out, &[a, b], move || {
            Box::new(move |g, sink: &mut GradSink| {
                sink.add(a, g.clone());
                sink.add(b, g.map(|v| -v));
            })
        }))
    }

    /// Concatenate two tensors along their last axis. Leading axes must agree.
    pub fn concat_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.rank() != bv.rank()
            || av.shape()[..av.rank() - 1] != bv.shape()[..bv.rank() - 1]
        {
            return Err(Error::invalid(format!(
                "concat shapes incompatible: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let ca = *av.shape().last().unwrap();
        let cb = *bv.shape().last().unwrap();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rows = av.len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let (ashape, bshape) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push_op(out, &[a, b], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let gd = g.data();
                let mut da = vec![0.0; rows * ca];
                let mut db = vec![0.0; rows * cb];
                for r in 0..rows {
                    let base = r * (ca + cb);
                    da[r * ca..(r + 1) * ca].copy_from_slice(&gd[base..base + ca]);
                    db[r * cb..(r + 1) * cb].copy_from_slice(&gd[base + ca..base + ca + cb]);
                }
                sink.add(a, Tensor::from_vec(&ashape, da).expect("concat grad a"));
                sink.add(b, Tensor::from_vec(&bshape, db).expect("concat grad b"));
            })
        }))
    }

    pub fn mul_scalar(&mut self, input: Var, factor: Scalar) -> Var {
        let out = self.value(input).map(|v| v * factor);
        self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                sink.add(input, g.map(|v| v * factor));
            })
        })
    }

    pub fn square(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let out = x.map(|v| v * v);
        self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let dx: Vec<Scalar> = g
                    .data()
                    .iter()
                    .zip(x.data().iter())
                    .map(|(gv, xv)| 2.0 * xv * gv)
                    .collect();
                sink.add(input, Tensor::from_vec(x.shape(), dx).expect("square grad"));
            })
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let x_shape = self.value(input).shape().to_vec();
        let total: Scalar = self.value(input).data().iter().sum();
        let out = Tensor::scalar(total);
        self.push_op(out, &[input], move || {
            Box::new(move |g, sink: &mut GradSink| {
                let gv = g.data()[0];
                sink.add(input, Tensor::full(&x_shape, gv));
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape_with(t: Tensor, trainable: bool) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(t, trainable);
        (tape, v)
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[5, 4, 1], -1.0, 1.0, &mut rng);
        let (mut tape, xv) = tape_with(x.clone(), false);
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(xv, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_constant_case() {
        // 3x3 ones, 2x2 ones kernel -> 2x2 of fours.
        let (mut tape, x) = tape_with(Tensor::ones(&[3, 3, 1]), false);
        let k = tape.constant(Tensor::ones(&[2, 2, 1, 1]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(&[6, 6, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::rand_uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng);
        let (mut tape, xv) = tape_with(x.clone(), false);
        let kv = tape.constant(k.clone());
        let y = tape.conv2d(xv, kv, None, 1, 0).unwrap();

        // Naive six-loop oracle.
        let (h, w, cin) = (6, 6, 2);
        let (kh, kw, cout) = (3, 3, 4);
        let (oh, ow) = (4, 4);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                acc += x.data()[((oy + ky) * w + (ox + kx)) * cin + ci]
                                    * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = tape.value(y).data()[(oy * ow + ox) * cout + co];
                    assert!((acc - got).abs() < 1e-12, "mismatch at {oy},{ox},{co}");
                }
            }
        }
        let _ = h;
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let (mut tape, x) = tape_with(Tensor::ones(&[4, 4, 3]), false);
        let k = tape.constant(Tensor::ones(&[2, 2, 2, 1]));
        assert!(tape.conv2d(x, k, None, 1, 0).is_err());
    }

    #[test]
    fn conv_output_extent_formula() {
        let (mut tape, x) = tape_with(Tensor::ones(&[1, 64, 64, 3]), false);
        let k = tape.constant(Tensor::ones(&[3, 3, 3, 8]));
        let y = tape.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 32, 32, 8]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let (mut tape, x) = tape_with(Tensor::from_vec(&[2], vec![-2.0, 3.0]).unwrap(), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn batchnorm_zero_mean_unit_var_passthrough() {
        // Batch that is already zero-mean unit-variance per channel.
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let (mut tape, xv) = tape_with(x.clone(), false);
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = tape
            .batchnorm(xv, g, b, &mut stats, BatchNormMode::Train, BN_EPSILON, BN_EMA_DECAY)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-5 * 2.0);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = Tensor::full(&[4, 2, 2, 1], 3.7);
        let (mut tape, xv) = tape_with(x, false);
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::full(&[1], 0.25));
        let mut stats = RunningStats::new(1);
        let y = tape
            .batchnorm(xv, g, b, &mut stats, BatchNormMode::Train, BN_EPSILON, BN_EMA_DECAY)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[8, 3, 3, 2], -2.0, 5.0, &mut rng);
        let (mut tape, xv) = tape_with(x, false);
        let gamma = Tensor::from_vec(&[2], vec![1.5, 0.5]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![-0.3, 0.8]).unwrap();
        let gv = tape.constant(gamma.clone());
        let bv = tape.constant(beta.clone());
        let mut stats = RunningStats::new(2);
        let y = tape
            .batchnorm(xv, gv, bv, &mut stats, BatchNormMode::Train, BN_EPSILON, BN_EMA_DECAY)
            .unwrap();
        // Recompute output statistics independently per channel.
        let yd = tape.value(y).data();
        let m = 8 * 3 * 3;
        for c in 0..2 {
            let vals: Vec<f64> = (0..m).map(|i| yd[i * 2 + c]).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            assert!((mean - beta.data()[c]).abs() < 1e-6);
            // Biased variance shrinks slightly through the epsilon guard.
            assert!((var - gamma.data()[c] * gamma.data()[c]).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_mismatched_gamma() {
        let (mut tape, x) = tape_with(Tensor::ones(&[2, 2, 2, 3]), false);
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        assert!(tape
            .batchnorm(x, g, b, &mut stats, BatchNormMode::Train, BN_EPSILON, BN_EMA_DECAY)
            .is_err());
    }

    #[test]
    fn zero_batch_is_unconstructible() {
        // The invalid-argument contract for empty batches is enforced at
        // tensor construction: zero extents never reach batchnorm.
        assert!(Tensor::from_vec(&[0, 2, 2, 1], vec![]).is_err());
    }

    #[test]
    fn l2_normalize_basic_and_zero_guard() {
        let x = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (mut tape, xv) = tape_with(x, false);
        let y = tape.l2_normalize(xv, 1, 1e-8).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_unit_norm_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[15], -1.0, 1.0, &mut rng);
        let (mut tape, xv) = tape_with(x, false);
        let y = tape.l2_normalize(xv, 0, 1e-8).unwrap();
        let n1 = tape.value(y).norm();
        assert!((n1 - 1.0).abs() < 1e-9);
        let z = tape.l2_normalize(y, 0, 1e-8).unwrap();
        assert!(tape.value(z).max_abs_diff(tape.value(y)) < 1e-12);
    }

    #[test]
    fn linear_shapes_and_values() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap();
        let (mut tape, xv) = tape_with(x, false);
        let wv = tape.constant(w);
        let bv = tape.constant(b);
        let y = tape.linear(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 0.5]);
    }

    #[test]
    fn concat_stacks_channels() {
        let a = Tensor::zeros(&[4, 4, 8]);
        let b = Tensor::ones(&[4, 4, 8]);
        let (mut tape, av) = tape_with(a, false);
        let bv = tape.constant(b);
        let y = tape.concat_last_axis(av, bv).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 4, 16]);
        assert_eq!(tape.value(y).data()[8], 1.0);
        assert_eq!(tape.value(y).data()[0], 0.0);
    }
}
