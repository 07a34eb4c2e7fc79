//! Forward and adjoint kernels behind the autodiff graph.
//!
//! Everything here is single-threaded and accumulates in a fixed order, so
//! results are bit-reproducible for identical inputs.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Row-major `C = op(A)·op(B) + beta·C` where `op(A)` is `m × k` and `op(B)` is `k × n`.
///
/// With `ta` set, `a` holds the `k × m` matrix whose transpose is used (same for `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least the addressed elements (asserted above)
    // and `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            pad,
            groups,
        }
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn pointwise(&self, g: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.pad == 0
    }
}

impl ConvDims {
    fn depthwise(&self, g: &ConvGeom) -> bool {
        self.cin_g == 1 && self.cout_g == 1 && g.stride == 1
    }
}

/// Direct depthwise correlation of one plane, stride 1, accumulating into `out`.
fn depthwise_plane(src: &[f64], k: &[f64], d: &ConvDims, pad: usize, out: &mut [f64]) {
    for ky in 0..d.kh {
        for kx in 0..d.kw {
            let wv = k[ky * d.kw + kx];
            let (dy, dx) = (ky as isize - pad as isize, kx as isize - pad as isize);
            let ox0 = (-dx).max(0) as usize;
            let ox1 = (d.w as isize - dx).min(d.wo as isize).max(0) as usize;
            for oy in 0..d.ho {
                let iy = oy as isize + dy;
                if iy < 0 || iy >= d.h as isize || ox0 >= ox1 {
                    continue;
                }
                let irow = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                let orow = &mut out[oy * d.wo..(oy + 1) * d.wo];
                let ishift = (ox0 as isize + dx) as usize;
                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ishift..]) {
                    *o += wv * i;
                }
            }
        }
    }
}

/// Adjoints of [`depthwise_plane`] for one plane.
fn depthwise_plane_backward(
    src: &[f64],
    k: &[f64],
    d: &ConvDims,
    pad: usize,
    dout: &[f64],
    mut dsrc: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    for ky in 0..d.kh {
        for kx in 0..d.kw {
            let wv = k[ky * d.kw + kx];
            let (dy, dx) = (ky as isize - pad as isize, kx as isize - pad as isize);
            let ox0 = (-dx).max(0) as usize;
            let ox1 = (d.w as isize - dx).min(d.wo as isize).max(0) as usize;
            let mut acc = 0.0;
            for oy in 0..d.ho {
                let iy = oy as isize + dy;
                if iy < 0 || iy >= d.h as isize || ox0 >= ox1 {
                    continue;
                }
                let base = iy as usize * d.w + (ox0 as isize + dx) as usize;
                let len = ox1 - ox0;
                let grow = &dout[oy * d.wo + ox0..oy * d.wo + ox1];
                if dk.is_some() {
                    acc += grow
                        .iter()
                        .zip(&src[base..base + len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                if let Some(ds) = dsrc.as_deref_mut() {
                    for (o, gv) in ds[base..base + len].iter_mut().zip(grow) {
                        *o += wv * gv;
                    }
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                dk[ky * d.kw + kx] += acc;
            }
        }
    }
}

fn conv_dims(x: &Tensor, weight: &Tensor, g: &ConvGeom) -> Result<ConvDims> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, cin_g, kh, kw) = weight.dims4()?;
    if g.groups == 0 || g.stride == 0 {
        return Err(shape_err!("conv: groups and stride must be positive"));
    }
    if cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        return Err(shape_err!(
            "conv: input channels {cin}, weight {:?}, groups {}",
            weight.shape(),
            g.groups
        ));
    }
    if h + 2 * g.pad < kh || w + 2 * g.pad < kw {
        return Err(shape_err!(
            "conv: kernel {kh}x{kw} larger than padded input {h}x{w}"
        ));
    }
    let ho = (h + 2 * g.pad - kh) / g.stride + 1;
    let wo = (w + 2 * g.pad - kw) / g.stride + 1;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / g.groups,
        kh,
        kw,
        ho,
        wo,
    })
}

fn im2col(src: &[f64], d: &ConvDims, g: &ConvGeom, cols: &mut [f64]) {
    let hw_o = d.ho * d.wo;
    for ci in 0..d.cin_g {
        let plane = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let in_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            in_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, g: &ConvGeom, dst: &mut [f64]) {
    let hw_o = d.ho * d.wo;
    for ci in 0..d.cin_g {
        let plane = &mut dst[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let in_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            in_row[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation, `x: N×Cin×H×W`, `weight: Cout×(Cin/groups)×kh×kw`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let d = conv_dims(x, weight, &g)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(shape_err!(
                "conv: bias {:?} for {} outputs",
                b.shape(),
                d.cout
            ));
        }
    }
    let hw_o = d.ho * d.wo;
    let krows = d.cin_g * d.kh * d.kw;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.ho, d.wo]);
    let pointwise = d.pointwise(&g);
    let depthwise = d.depthwise(&g);
    let mut cols = if pointwise || depthwise {
        Vec::new()
    } else {
        vec![0.0; krows * hw_o]
    };
    let xs = x.data();
    let ws = weight.data();
    let os = out.data_mut();
    for n in 0..d.n {
        for grp in 0..g.groups {
            let src_off = (n * d.cin + grp * d.cin_g) * d.h * d.w;
            let src = &xs[src_off..src_off + d.cin_g * d.h * d.w];
            let wg = &ws[grp * d.cout_g * krows..(grp + 1) * d.cout_g * krows];
            let dst_off = (n * d.cout + grp * d.cout_g) * hw_o;
            let dst = &mut os[dst_off..dst_off + d.cout_g * hw_o];
            if pointwise {
                gemm(d.cout_g, krows, hw_o, wg, false, src, false, 0.0, dst);
            } else if depthwise {
                depthwise_plane(src, wg, &d, g.pad, dst);
            } else {
                im2col(src, &d, &g, &mut cols);
                gemm(d.cout_g, krows, hw_o, wg, false, &cols, false, 0.0, dst);
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let off = (n * d.cout + co) * hw_o;
                for v in &mut os[off..off + hw_o] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

/// Adjoint of [`conv2d`]; only the requested gradients are computed.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    g: ConvGeom,
    dout: &Tensor,
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let d = conv_dims(x, weight, &g)?;
    if dout.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(shape_err!("conv backward: upstream {:?}", dout.shape()));
    }
    let (want_dx, want_dw, want_db) = want;
    let hw_o = d.ho * d.wo;
    let krows = d.cin_g * d.kh * d.kw;
    let pointwise = d.pointwise(&g);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape()));
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; krows * hw_o]
    };
    let mut dcols = if pointwise || !want_dx {
        Vec::new()
    } else {
        vec![0.0; krows * hw_o]
    };
    let xs = x.data();
    let ws = weight.data();
    let ds = dout.data();
    if d.depthwise(&g) {
        for n in 0..d.n {
            for c in 0..d.cin {
                let plane = (n * d.cin + c) * d.h * d.w;
                let src = &xs[plane..plane + d.h * d.w];
                let k = &ws[c * krows..(c + 1) * krows];
                let dg = &ds[(n * d.cout + c) * hw_o..(n * d.cout + c + 1) * hw_o];
                let dsrc = dx
                    .as_mut()
                    .map(|t| &mut t.data_mut()[plane..plane + d.h * d.w]);
                let dk = dw
                    .as_mut()
                    .map(|t| &mut t.data_mut()[c * krows..(c + 1) * krows]);
                depthwise_plane_backward(src, k, &d, g.pad, dg, dsrc, dk);
            }
        }
    } else {
        for n in 0..d.n {
            for grp in 0..g.groups {
                let src_off = (n * d.cin + grp * d.cin_g) * d.h * d.w;
                let src_len = d.cin_g * d.h * d.w;
                let wg = &ws[grp * d.cout_g * krows..(grp + 1) * d.cout_g * krows];
                let dst_off = (n * d.cout + grp * d.cout_g) * hw_o;
                let dg = &ds[dst_off..dst_off + d.cout_g * hw_o];
                if let Some(dw) = dw.as_mut() {
                    let dwg =
                        &mut dw.data_mut()[grp * d.cout_g * krows..(grp + 1) * d.cout_g * krows];
                    if pointwise {
                        gemm(
                            d.cout_g,
                            hw_o,
                            krows,
                            dg,
                            false,
                            &xs[src_off..src_off + src_len],
                            true,
                            1.0,
                            dwg,
                        );
                    } else {
                        im2col(&xs[src_off..src_off + src_len], &d, &g, &mut cols);
                        gemm(d.cout_g, hw_o, krows, dg, false, &cols, true, 1.0, dwg);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxg = &mut dx.data_mut()[src_off..src_off + src_len];
                    if pointwise {
                        gemm(krows, d.cout_g, hw_o, wg, true, dg, false, 1.0, dxg);
                    } else {
                        gemm(krows, d.cout_g, hw_o, wg, true, dg, false, 0.0, &mut dcols);
                        col2im(&dcols, &d, &g, dxg);
                    }
                }
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = Tensor::zeros(&[d.cout]);
        for n in 0..d.n {
            for co in 0..d.cout {
                let off = (n * d.cout + co) * hw_o;
                db.data_mut()[co] += ds[off..off + hw_o].iter().sum::<f64>();
            }
        }
        db
    });
    Ok(ConvGrads { dx, dw, db })
}

pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xs = x.data();
    let os = out.data_mut();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut os[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward(dout: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = dout.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let ds = dout.data();
    let xs = dx.data_mut();
    for plane in 0..n * c {
        let src = &ds[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut xs[plane * h * w..(plane + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Ok(dx)
}

/// Cached per-image, per-head quantities of the channel attention core.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub heads: usize,
    pub head_dim: usize,
    /// Row-softmaxed maps `A`, `N × heads × d × d`.
    pub maps: Vec<f64>,
    /// Scaled logits `K·Qᵀ/α`, same layout as `maps`.
    pub logits: Vec<f64>,
}

impl AttentionCache {
    /// Number of attention-map elements held per image.
    pub fn map_elements_per_image(&self) -> usize {
        self.heads * self.head_dim * self.head_dim
    }
}

/// Channel-wise attention core on a stacked `N × 3C × H × W` query/key/value tensor.
///
/// Per head with `d = C / heads`: `A = softmax_rows(K·Qᵀ / α)` (`d × d`) and
/// output channels `O = Aᵀ·V`, which is `(Vᵀ·A)` reshaped back to `d × H × W`.
pub fn channel_attention_core(
    qkv: &Tensor,
    alpha: &Tensor,
    heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let (n, c3, h, w) = qkv.dims4()?;
    if c3 % 3 != 0 {
        return Err(shape_err!(
            "attention: stacked qkv needs 3C channels, got {c3}"
        ));
    }
    let c = c3 / 3;
    if heads == 0 || c % heads != 0 {
        return Err(shape_err!(
            "attention: {heads} heads do not divide {c} channels"
        ));
    }
    if alpha.shape() != [heads] {
        return Err(shape_err!(
            "attention: alpha {:?} for {heads} heads",
            alpha.shape()
        ));
    }
    let d = c / heads;
    let p = h * w;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut maps = vec![0.0; n * heads * d * d];
    let mut logits = vec![0.0; n * heads * d * d];
    let src = qkv.data();
    for b in 0..n {
        for hd in 0..heads {
            let base = b * c3 * p;
            let q = &src[base + hd * d * p..base + (hd + 1) * d * p];
            let k = &src[base + (c + hd * d) * p..base + (c + (hd + 1) * d) * p];
            let v = &src[base + (2 * c + hd * d) * p..base + (2 * c + (hd + 1) * d) * p];
            let moff = (b * heads + hd) * d * d;
            let s = &mut logits[moff..moff + d * d];
            gemm(d, p, d, k, false, q, true, 0.0, s);
            let a_inv = 1.0 / alpha.data()[hd];
            for v in s.iter_mut() {
                *v *= a_inv;
            }
            let a = &mut maps[moff..moff + d * d];
            for row in 0..d {
                let srow = &s[row * d..(row + 1) * d];
                let mx = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (dst, &sv) in a[row * d..(row + 1) * d].iter_mut().zip(srow) {
                    *dst = (sv - mx).exp();
                    z += *dst;
                }
                for dst in &mut a[row * d..(row + 1) * d] {
                    *dst /= z;
                }
            }
            let ooff = (b * c + hd * d) * p;
            gemm(
                d,
                d,
                p,
                a,
                true,
                v,
                false,
                0.0,
                &mut out.data_mut()[ooff..ooff + d * p],
            );
        }
    }
    Ok((
        out,
        AttentionCache {
            heads,
            head_dim: d,
            maps,
            logits,
        },
    ))
}

/// Adjoint of [`channel_attention_core`]: returns `(d_qkv, d_alpha)`.
pub fn channel_attention_core_backward(
    qkv: &Tensor,
    alpha: &Tensor,
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c3, h, w) = qkv.dims4()?;
    let c = c3 / 3;
    let heads = cache.heads;
    let d = cache.head_dim;
    let p = h * w;
    if dout.shape() != [n, c, h, w] {
        return Err(shape_err!(
            "attention backward: upstream {:?}",
            dout.shape()
        ));
    }
    let mut dqkv = Tensor::zeros(qkv.shape());
    let mut dalpha = Tensor::zeros(&[heads]);
    let src = qkv.data();
    let mut da = vec![0.0; d * d];
    let mut ds = vec![0.0; d * d];
    for b in 0..n {
        for hd in 0..heads {
            let base = b * c3 * p;
            let q = &src[base + hd * d * p..base + (hd + 1) * d * p];
            let k = &src[base + (c + hd * d) * p..base + (c + (hd + 1) * d) * p];
            let v = &src[base + (2 * c + hd * d) * p..base + (2 * c + (hd + 1) * d) * p];
            let moff = (b * heads + hd) * d * d;
            let a = &cache.maps[moff..moff + d * d];
            let s = &cache.logits[moff..moff + d * d];
            let ooff = (b * c + hd * d) * p;
            let dout_h = &dout.data()[ooff..ooff + d * p];
            let alpha_h = alpha.data()[hd];

            // dA[j,c] = Σ_p V[j,p]·dO[c,p]
            gemm(d, p, d, v, false, dout_h, true, 0.0, &mut da);
            for row in 0..d {
                let arow = &a[row * d..(row + 1) * d];
                let darow = &da[row * d..(row + 1) * d];
                let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
                for col in 0..d {
                    ds[row * d + col] = arow[col] * (darow[col] - dot);
                }
            }
            dalpha.data_mut()[hd] -= ds.iter().zip(s).map(|(g, sv)| g * sv).sum::<f64>() / alpha_h;

            let dsrc = dqkv.data_mut();
            // dV = A·dO
            let dv_off = base + (2 * c + hd * d) * p;
            gemm(
                d,
                d,
                p,
                a,
                false,
                dout_h,
                false,
                0.0,
                &mut dsrc[dv_off..dv_off + d * p],
            );
            for v in ds.iter_mut() {
                *v /= alpha_h;
            }
            // dK = dS·Q / α
            let dk_off = base + (c + hd * d) * p;
            gemm(
                d,
                d,
                p,
                &ds,
                false,
                q,
                false,
                0.0,
                &mut dsrc[dk_off..dk_off + d * p],
            );
            // dQ = dSᵀ·K / α
            let dq_off = base + hd * d * p;
            gemm(
                d,
                d,
                p,
                &ds,
                true,
                k,
                false,
                0.0,
                &mut dsrc[dq_off..dq_off + d * p],
            );
        }
    }
    Ok((dqkv, dalpha))
}
