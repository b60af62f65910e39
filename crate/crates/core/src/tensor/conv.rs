//! Direct-loop convolutions over `[batch, channels, height, width]` maps.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a (possibly dilated) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding that preserves spatial size for odd `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    /// Output extent for an input extent and kernel size, if positive.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Range of iteration indices `o` in `[0, out_len)` whose target
/// `o * stride + off` lies inside `[0, in_len)`.
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = in_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

fn dims4<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Per-tap iteration plan: for kernel offset (ky, kx) the valid output rows
/// and columns and the input offsets they read from.
struct Tap {
    ky: usize,
    kx: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    off_y: isize,
    off_x: isize,
}

fn plan_taps(
    kh: usize,
    kw: usize,
    spec: Conv2dSpec,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<Tap> {
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        let off_y = (ky * spec.dilation) as isize - spec.padding as isize;
        let rows = valid_range(off_y, spec.stride, h, oh);
        for kx in 0..kw {
            let off_x = (kx * spec.dilation) as isize - spec.padding as isize;
            let cols = valid_range(off_x, spec.stride, w, ow);
            if rows.0 < rows.1 && cols.0 < cols.1 {
                taps.push(Tap {
                    ky,
                    kx,
                    rows,
                    cols,
                    off_y,
                    off_x,
                });
            }
        }
    }
    taps
}

/// Dilated cross-correlation. `weight` is `[cout, cin, kh, kw]`, `bias` is
/// `[cout]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let [b, cin, h, w] = dims4("conv2d", x)?;
    let [cout, wcin, kh, kw] = dims4("conv2d", weight)?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs kernel {:?}", x.shape(), weight.shape()),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", bias.shape())));
        }
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::Config(format!("conv2d: stride and dilation must be >= 1 ({spec:?})")));
    }
    let (Some(oh), Some(ow)) = (spec.output_extent(h, kh), spec.output_extent(w, kw)) else {
        return Err(Error::Config(format!(
            "conv2d: non-positive output extent for input {h}x{w}, kernel {kh}x{kw}, {spec:?}"
        )));
    };
    let s = spec.stride;
    let taps = plan_taps(kh, kw, spec, (h, w), (oh, ow));
    let (in_plane, out_plane, ksize) = (h * w, oh * ow, kh * kw);

    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * out_plane];
    for bi in 0..b {
        for co in 0..cout {
            let op = &mut out[(bi * cout + co) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                op.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let ip = &xd[(bi * cin + ci) * in_plane..][..in_plane];
                let kbase = (co * cin + ci) * ksize;
                for tap in &taps {
                    let wv = wd[kbase + tap.ky * kw + tap.kx];
                    let (c0, c1) = tap.cols;
                    let ix0 = ((c0 * s) as isize + tap.off_x) as usize;
                    for oy in tap.rows.0..tap.rows.1 {
                        let iy = ((oy * s) as isize + tap.off_y) as usize;
                        let orow = &mut op[oy * ow + c0..oy * ow + c1];
                        let irow = &ip[iy * w + ix0..];
                        if s == 1 {
                            for (o, &v) in orow.iter_mut().zip(irow) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (o, &v) in orow.iter_mut().zip(irow.iter().step_by(s)) {
                                *o = *o + wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc, has_bias) = (x.clone(), weight.clone(), bias.is_some());
    Ok(Tensor::from_op(
        "conv2d",
        vec![b, cout, oh, ow],
        out,
        inputs,
        Box::new(move |g, _| {
            let xd = xc.data();
            let wd = wc.data();
            let mut gx = xc.requires_grad().then(|| vec![T::zero(); xd.len()]);
            let mut gw = wc.requires_grad().then(|| vec![T::zero(); wd.len()]);
            for bi in 0..b {
                for co in 0..cout {
                    let gp = &g[(bi * cout + co) * out_plane..][..out_plane];
                    for ci in 0..cin {
                        let pbase = (bi * cin + ci) * in_plane;
                        let kbase = (co * cin + ci) * ksize;
                        for tap in &taps {
                            let ki = kbase + tap.ky * kw + tap.kx;
                            let wv = wd[ki];
                            let (c0, c1) = tap.cols;
                            let ix0 = ((c0 * s) as isize + tap.off_x) as usize;
                            let mut acc = T::zero();
                            for oy in tap.rows.0..tap.rows.1 {
                                let iy = ((oy * s) as isize + tap.off_y) as usize;
                                let grow = &gp[oy * ow + c0..oy * ow + c1];
                                let start = pbase + iy * w + ix0;
                                if let Some(gx) = gx.as_mut() {
                                    let dst = gx[start..].iter_mut().step_by(s);
                                    for (d, &gv) in dst.zip(grow) {
                                        *d = *d + wv * gv;
                                    }
                                }
                                if gw.is_some() {
                                    let src = xd[start..].iter().step_by(s);
                                    for (&xv, &gv) in src.zip(grow) {
                                        acc = acc + xv * gv;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[ki] = gw[ki] + acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for bi in 0..b {
                    for (co, gb) in gb.iter_mut().enumerate() {
                        let gp = &g[(bi * cout + co) * out_plane..][..out_plane];
                        *gb = *gb + gp.iter().copied().sum();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Transposed convolution that scales spatial size exactly by `stride`.
///
/// `weight` is `[cin, cout, k, k]` with odd `k`; padding is `(k - 1) / 2`
/// and the output is padded by `stride - 1` on the far edge, so an `h×w`
/// input maps to `stride·h × stride·w`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::Config(format!("conv_transpose2d: unsupported stride {stride}")));
    }
    let [b, cin, h, w] = dims4("conv_transpose2d", x)?;
    let [wcin, cout, kh, kw] = dims4("conv_transpose2d", weight)?;
    if wcin != cin || kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input {:?} vs kernel {:?} (square odd kernel required)", x.shape(), weight.shape()),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("bias {:?} for {cout} outputs", bias.shape()),
            ));
        }
    }
    let k = kh;
    let pad = (k - 1) / 2;
    let s = stride;
    let (oh, ow) = (h * s, w * s);
    // Iterate over input positions; the target is the output position.
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        let off_y = ky as isize - pad as isize;
        let rows = valid_range(off_y, s, oh, h);
        for kx in 0..k {
            let off_x = kx as isize - pad as isize;
            let cols = valid_range(off_x, s, ow, w);
            if rows.0 < rows.1 && cols.0 < cols.1 {
                taps.push(Tap {
                    ky,
                    kx,
                    rows,
                    cols,
                    off_y,
                    off_x,
                });
            }
        }
    }
    let (in_plane, out_plane, ksize) = (h * w, oh * ow, k * k);

    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * out_plane];
    for bi in 0..b {
        for co in 0..cout {
            let op = &mut out[(bi * cout + co) * out_plane..][..out_plane];
            if let Some(bias) = bias {
                op.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let ip = &xd[(bi * cin + ci) * in_plane..][..in_plane];
                let kbase = (ci * cout + co) * ksize;
                for tap in &taps {
                    let wv = wd[kbase + tap.ky * k + tap.kx];
                    let (c0, c1) = tap.cols;
                    let ox0 = ((c0 * s) as isize + tap.off_x) as usize;
                    for iy in tap.rows.0..tap.rows.1 {
                        let oy = ((iy * s) as isize + tap.off_y) as usize;
                        let irow = &ip[iy * w + c0..iy * w + c1];
                        let orow = op[oy * ow + ox0..].iter_mut().step_by(s);
                        for (o, &v) in orow.zip(irow) {
                            *o = *o + wv * v;
                        }
                    }
                }
            }
        }
    }

    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let (xc, wc, has_bias) = (x.clone(), weight.clone(), bias.is_some());
    Ok(Tensor::from_op(
        "conv_transpose2d",
        vec![b, cout, oh, ow],
        out,
        inputs,
        Box::new(move |g, _| {
            let xd = xc.data();
            let wd = wc.data();
            let mut gx = xc.requires_grad().then(|| vec![T::zero(); xd.len()]);
            let mut gw = wc.requires_grad().then(|| vec![T::zero(); wd.len()]);
            for bi in 0..b {
                for co in 0..cout {
                    let gp = &g[(bi * cout + co) * out_plane..][..out_plane];
                    for ci in 0..cin {
                        let pbase = (bi * cin + ci) * in_plane;
                        let kbase = (ci * cout + co) * ksize;
                        for tap in &taps {
                            let ki = kbase + tap.ky * k + tap.kx;
                            let wv = wd[ki];
                            let (c0, c1) = tap.cols;
                            let ox0 = ((c0 * s) as isize + tap.off_x) as usize;
                            let mut acc = T::zero();
                            for iy in tap.rows.0..tap.rows.1 {
                                let oy = ((iy * s) as isize + tap.off_y) as usize;
                                let grow = gp[oy * ow + ox0..].iter().step_by(s);
                                let start = pbase + iy * w + c0;
                                let len = c1 - c0;
                                if let Some(gx) = gx.as_mut() {
                                    for (d, &gv) in gx[start..start + len].iter_mut().zip(grow.clone()) {
                                        *d = *d + wv * gv;
                                    }
                                }
                                if gw.is_some() {
                                    for (&xv, &gv) in xd[start..start + len].iter().zip(grow) {
                                        acc = acc + xv * gv;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[ki] = gw[ki] + acc;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![T::zero(); cout];
                for bi in 0..b {
                    for (co, gb) in gb.iter_mut().enumerate() {
                        let gp = &g[(bi * cout + co) * out_plane..][..out_plane];
                        *gb = *gb + gp.iter().copied().sum();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4("max_pool2d", x)?;
    let spec = Conv2dSpec::new(stride, padding, 1);
    if stride == 0 || padding >= kernel {
        return Err(Error::Config(format!(
            "max_pool2d: kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    let (Some(oh), Some(ow)) = (spec.output_extent(h, kernel), spec.output_extent(w, kernel)) else {
        return Err(Error::Config(format!("max_pool2d: input {h}x{w} smaller than kernel {kernel}")));
    };
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if xd[at] > best || best_at == usize::MAX {
                            best = xd[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
    }
    let n = xd.len();
    Ok(Tensor::from_op(
        "max_pool2d",
        vec![b, c, oh, ow],
        out,
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&at, &gv) in argmax.iter().zip(g) {
                gx[at] = gx[at] + gv;
            }
            vec![Some(gx)]
        }),
    ))
}
