//! Forward and backward kernels on NCHW tensors.
//!
//! Everything here is single-threaded with a fixed reduction order, so
//! results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn same(stride: usize, kernel: usize) -> Self {
        Self {
            stride,
            pad: kernel / 2,
            groups: 1,
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn dims4<E: Element>(t: &Tensor<E>) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            actual: other.to_vec(),
        }),
    }
}

/// Unfolds channels `[c0, c0+cin)` of one image into a `[cin*kh*kw, ho*wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    img: &[E],
    h: usize,
    w: usize,
    c0: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    cols: &mut [E],
) {
    let p = ho * wo;
    for c in 0..cin {
        let plane = &img[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulates a column matrix back into image channels.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Element>(
    cols: &[E],
    h: usize,
    w: usize,
    c0: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    img: &mut [E],
) {
    let p = ho * wo;
    for c in 0..cin {
        let plane = &mut img[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geo: ConvGeometry) -> bool {
    kh == 1 && kw == 1 && geo.stride == 1 && geo.pad == 0
}

/// 2-D cross-correlation. `w` is `[cout, cin/groups, kh, kw]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    geo: ConvGeometry,
) -> Result<Tensor<E>> {
    let [b, cin, h, wd] = dims4(x)?;
    let [cout, cin_g, kh, kw] = dims4(w)?;
    let g = geo.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(Error::ShapeMismatch {
            expected: vec![cout, cin / g.max(1), kh, kw],
            actual: w.shape().to_vec(),
        });
    }
    if h + 2 * geo.pad < kh || wd + 2 * geo.pad < kw {
        return Err(Error::config(format!(
            "{h}x{wd} input too small for a {kh}x{kw} kernel"
        )));
    }
    if let Some(bias) = bias {
        bias.ensure_shape(&[cout])?;
    }
    let ho = geo.out_size(h, kh);
    let wo = geo.out_size(wd, kw);
    let p = ho * wo;
    let cout_g = cout / g;
    let kdim = cin_g * kh * kw;
    let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
    let depthwise = cin_g == 1 && cout_g == 1;
    let pointwise = is_pointwise(kh, kw, geo);
    let mut cols = if depthwise || pointwise {
        Vec::new()
    } else {
        vec![E::zero(); kdim * p]
    };
    let xs = x.data();
    let ws = w.data();
    let os = out.data_mut();
    for n in 0..b {
        let img = &xs[n * cin * h * wd..(n + 1) * cin * h * wd];
        let dst = &mut os[n * cout * p..(n + 1) * cout * p];
        if depthwise {
            depthwise_forward(img, ws, h, wd, cin, kh, kw, geo, ho, wo, dst);
            continue;
        }
        for gi in 0..g {
            let src: &[E] = if pointwise {
                &img[gi * cin_g * p..(gi + 1) * cin_g * p]
            } else {
                im2col(img, h, wd, gi * cin_g, cin_g, kh, kw, geo, ho, wo, &mut cols);
                &cols
            };
            let wg = &ws[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let og = &mut dst[gi * cout_g * p..(gi + 1) * cout_g * p];
            unsafe {
                E::gemm(
                    cout_g,
                    kdim,
                    p,
                    E::one(),
                    wg.as_ptr(),
                    kdim as isize,
                    1,
                    src.as_ptr(),
                    p as isize,
                    1,
                    E::zero(),
                    og.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
    }
    if let Some(bias) = bias {
        let bs = bias.data();
        for n in 0..b {
            for c in 0..cout {
                let off = (n * cout + c) * p;
                for v in &mut os[off..off + p] {
                    *v += bs[c];
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_forward<E: Element>(
    img: &[E],
    ws: &[E],
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    dst: &mut [E],
) {
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let k = &ws[ch * kh * kw..(ch + 1) * kh * kw];
        let o = &mut dst[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = E::zero();
                for ky in 0..kh {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += k[ky * kw + kx] * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                o[oy * wo + ox] = acc;
            }
        }
    }
}

pub struct ConvGrads<E> {
    pub dx: Option<Tensor<E>>,
    pub dw: Tensor<E>,
    pub db: Tensor<E>,
}

/// Gradients of [`conv2d`] (ungrouped) given the upstream gradient `dy`.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    geo: ConvGeometry,
    need_dx: bool,
) -> Result<ConvGrads<E>> {
    if geo.groups != 1 {
        return Err(Error::Unsupported("grouped convolution backward".into()));
    }
    let [b, cin, h, wd] = dims4(x)?;
    let [cout, _, kh, kw] = dims4(w)?;
    let [_, _, ho, wo] = dims4(dy)?;
    let p = ho * wo;
    let kdim = cin * kh * kw;
    let pointwise = is_pointwise(kh, kw, geo);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    let mut cols = vec![E::zero(); kdim * p];
    let mut dcols = vec![E::zero(); kdim * p];
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    for n in 0..b {
        let img = &xs[n * cin * h * wd..(n + 1) * cin * h * wd];
        let g = &dys[n * cout * p..(n + 1) * cout * p];
        let src: &[E] = if pointwise {
            img
        } else {
            im2col(img, h, wd, 0, cin, kh, kw, geo, ho, wo, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        unsafe {
            E::gemm(
                cout,
                p,
                kdim,
                E::one(),
                g.as_ptr(),
                p as isize,
                1,
                src.as_ptr(),
                1,
                p as isize,
                E::one(),
                dw.data_mut().as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        let dbs = db.data_mut();
        for c in 0..cout {
            dbs[c] += g[c * p..(c + 1) * p].iter().copied().sum::<E>();
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY
            unsafe {
                E::gemm(
                    kdim,
                    cout,
                    p,
                    E::one(),
                    ws.as_ptr(),
                    1,
                    kdim as isize,
                    g.as_ptr(),
                    p as isize,
                    1,
                    E::zero(),
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            let dimg = &mut dx.data_mut()[n * cin * h * wd..(n + 1) * cin * h * wd];
            if pointwise {
                for (d, &v) in dimg.iter_mut().zip(&dcols) {
                    *d += v;
                }
            } else {
                col2im(&dcols, h, wd, 0, cin, kh, kw, geo, ho, wo, dimg);
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

/// Group normalization statistics saved for the backward pass.
pub struct GroupNormCache<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

pub fn group_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<E>, GroupNormCache<E>)> {
    let [b, c, h, w] = dims4(x)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::config(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    gamma.ensure_shape(&[c])?;
    beta.ensure_shape(&[c])?;
    let cg = c / groups;
    let m = cg * h * w;
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    let xs = x.data();
    let (gs, bs) = (gamma.data(), beta.data());
    let os = out.data_mut();
    for n in 0..b {
        for g in 0..groups {
            let off = (n * c + g * cg) * h * w;
            let seg = &xs[off..off + m];
            let mu = seg.iter().copied().sum::<E>() / E::of(m as f64);
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<E>() / E::of(m as f64);
            let r = E::one() / (var + E::of(eps)).sqrt();
            mean.push(mu);
            rstd.push(r);
            for ci in 0..cg {
                let ch = g * cg + ci;
                let base = ci * h * w;
                for i in 0..h * w {
                    os[off + base + i] = (seg[base + i] - mu) * r * gs[ch] + bs[ch];
                }
            }
        }
    }
    Ok((out, GroupNormCache { mean, rstd }))
}

pub fn group_norm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    groups: usize,
    cache: &GroupNormCache<E>,
    dy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let [b, c, h, w] = dims4(x)?;
    let cg = c / groups;
    let hw = h * w;
    let m = E::of((cg * hw) as f64);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    let (xs, dys, gs) = (x.data(), dy.data(), gamma.data());
    for n in 0..b {
        for g in 0..groups {
            let mu = cache.mean[n * groups + g];
            let r = cache.rstd[n * groups + g];
            let off = (n * c + g * cg) * hw;
            let mut sum_dyh = E::zero();
            let mut sum_dyh_xh = E::zero();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let mut dgam = E::zero();
                let mut dbet = E::zero();
                for i in 0..hw {
                    let idx = off + ci * hw + i;
                    let xh = (xs[idx] - mu) * r;
                    let d = dys[idx];
                    dgam += d * xh;
                    dbet += d;
                    let dyh = d * gs[ch];
                    sum_dyh += dyh;
                    sum_dyh_xh += dyh * xh;
                }
                dgamma.data_mut()[ch] += dgam;
                dbeta.data_mut()[ch] += dbet;
            }
            let dxs = dx.data_mut();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for i in 0..hw {
                    let idx = off + ci * hw + i;
                    let xh = (xs[idx] - mu) * r;
                    let dyh = dys[idx] * gs[ch];
                    dxs[idx] = r / m * (m * dyh - sum_dyh - xh * sum_dyh_xh);
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Single-head spatial self-attention over `[B, C, N]` query/key/value maps.
///
/// Returns the attended values and the softmax probabilities `[B, N, N]`.
pub fn attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (b, c, n) = match q.shape() {
        &[b, c, n] => (b, c, n),
        other => {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0],
                actual: other.to_vec(),
            })
        }
    };
    k.ensure_same_shape(q)?;
    v.ensure_same_shape(q)?;
    let scale = E::one() / E::of(c as f64).sqrt();
    let mut probs = Tensor::zeros(vec![b, n, n]);
    let mut out = Tensor::zeros(vec![b, c, n]);
    for bi in 0..b {
        let qb = &q.data()[bi * c * n..(bi + 1) * c * n];
        let kb = &k.data()[bi * c * n..(bi + 1) * c * n];
        let vb = &v.data()[bi * c * n..(bi + 1) * c * n];
        let pb = &mut probs.data_mut()[bi * n * n..(bi + 1) * n * n];
        // S = scale · qᵀ k
        unsafe {
            E::gemm(
                n,
                c,
                n,
                scale,
                qb.as_ptr(),
                1,
                n as isize,
                kb.as_ptr(),
                n as isize,
                1,
                E::zero(),
                pb.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for row in pb.chunks_mut(n) {
            let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut s = E::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        // out = v · Pᵀ
        let ob = &mut out.data_mut()[bi * c * n..(bi + 1) * c * n];
        unsafe {
            E::gemm(
                c,
                n,
                n,
                E::one(),
                vb.as_ptr(),
                n as isize,
                1,
                pb.as_ptr(),
                1,
                n as isize,
                E::zero(),
                ob.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok((out, probs))
}

pub fn attention_backward<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    probs: &Tensor<E>,
    dout: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (b, c, n) = (q.dim(0), q.dim(1), q.dim(2));
    let scale = E::one() / E::of(c as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape().to_vec());
    let mut dk = Tensor::zeros(q.shape().to_vec());
    let mut dv = Tensor::zeros(q.shape().to_vec());
    let mut dp = vec![E::zero(); n * n];
    for bi in 0..b {
        let r = bi * c * n..(bi + 1) * c * n;
        let (qb, kb, vb, gb) = (&q.data()[r.clone()], &k.data()[r.clone()], &v.data()[r.clone()], &dout.data()[r.clone()]);
        let pb = &probs.data()[bi * n * n..(bi + 1) * n * n];
        unsafe {
            // dV = dOut · P
            E::gemm(
                c,
                n,
                n,
                E::one(),
                gb.as_ptr(),
                n as isize,
                1,
                pb.as_ptr(),
                n as isize,
                1,
                E::zero(),
                dv.data_mut()[r.clone()].as_mut_ptr(),
                n as isize,
                1,
            );
            // dP = dOutᵀ · v
            E::gemm(
                n,
                c,
                n,
                E::one(),
                gb.as_ptr(),
                1,
                n as isize,
                vb.as_ptr(),
                n as isize,
                1,
                E::zero(),
                dp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for i in 0..n {
            let prow = &pb[i * n..(i + 1) * n];
            let drow = &mut dp[i * n..(i + 1) * n];
            let dot: E = prow.iter().zip(drow.iter()).map(|(&p, &d)| p * d).sum();
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot);
            }
        }
        unsafe {
            // dq = scale · k · dSᵀ
            E::gemm(
                c,
                n,
                n,
                scale,
                kb.as_ptr(),
                n as isize,
                1,
                dp.as_ptr(),
                1,
                n as isize,
                E::zero(),
                dq.data_mut()[r.clone()].as_mut_ptr(),
                n as isize,
                1,
            );
            // dk = scale · q · dS
            E::gemm(
                c,
                n,
                n,
                scale,
                qb.as_ptr(),
                n as isize,
                1,
                dp.as_ptr(),
                n as isize,
                1,
                E::zero(),
                dk.data_mut()[r].as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}

/// `y = x · Wᵀ + b` for `x: [B, in]`, `w: [out, in]`.
pub fn linear<E: Element>(x: &Tensor<E>, w: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
    let (b, fin) = (x.dim(0), x.numel() / x.dim(0));
    let fout = w.dim(0);
    if w.numel() != fout * fin {
        return Err(Error::ShapeMismatch {
            expected: vec![fout, fin],
            actual: w.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![b, fout]);
    unsafe {
        E::gemm(
            b,
            fin,
            fout,
            E::one(),
            x.data().as_ptr(),
            fin as isize,
            1,
            w.data().as_ptr(),
            1,
            fin as isize,
            E::zero(),
            out.data_mut().as_mut_ptr(),
            fout as isize,
            1,
        );
    }
    if let Some(bias) = bias {
        bias.ensure_shape(&[fout])?;
        for row in out.data_mut().chunks_mut(fout) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (b, fin) = (x.dim(0), x.numel() / x.dim(0));
    let fout = w.dim(0);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![fout]);
    unsafe {
        E::gemm(
            b,
            fout,
            fin,
            E::one(),
            dy.data().as_ptr(),
            fout as isize,
            1,
            w.data().as_ptr(),
            fin as isize,
            1,
            E::zero(),
            dx.data_mut().as_mut_ptr(),
            fin as isize,
            1,
        );
        E::gemm(
            fout,
            b,
            fin,
            E::one(),
            dy.data().as_ptr(),
            1,
            fout as isize,
            x.data().as_ptr(),
            fin as isize,
            1,
            E::zero(),
            dw.data_mut().as_mut_ptr(),
            fin as isize,
            1,
        );
    }
    for row in dy.data().chunks(fout) {
        for (d, &v) in db.data_mut().iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

pub fn upsample_nearest2x<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let [b, c, h, w] = dims4(x)?;
    let mut out = Tensor::zeros(vec![b, c, 2 * h, 2 * w]);
    let xs = x.data();
    let os = out.data_mut();
    for plane in 0..b * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                os[plane * 4 * h * w + y * 2 * w + xx] = xs[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward<E: Element>(dy: &Tensor<E>) -> Tensor<E> {
    let (b, c, h2, w2) = (dy.dim(0), dy.dim(1), dy.dim(2), dy.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(vec![b, c, h, w]);
    let ds = dy.data();
    let xs = dx.data_mut();
    for plane in 0..b * c {
        for y in 0..h2 {
            for x in 0..w2 {
                xs[plane * h * w + (y / 2) * w + x / 2] += ds[plane * h2 * w2 + y * w2 + x];
            }
        }
    }
    dx
}

/// Inference-mode batch normalization with stored statistics.
pub fn batch_norm_inference<E: Element>(
    x: &mut Tensor<E>,
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    var: &[E],
    eps: f64,
) {
    let (b, c) = (x.dim(0), x.dim(1));
    let hw = x.numel() / (b * c);
    let xs = x.data_mut();
    for ch in 0..c {
        let scale = gamma[ch] / (var[ch] + E::of(eps)).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for n in 0..b {
            let off = (n * c + ch) * hw;
            for v in &mut xs[off..off + hw] {
                *v = *v * scale + shift;
            }
        }
    }
}

/// Per-channel mean and (biased) variance over batch and spatial axes.
pub fn channel_moments<E: Element>(x: &Tensor<E>) -> (Vec<E>, Vec<E>) {
    let (b, c) = (x.dim(0), x.dim(1));
    let hw = x.numel() / (b * c);
    let cnt = E::of((b * hw) as f64);
    let xs = x.data();
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut s = E::zero();
        for n in 0..b {
            let off = (n * c + ch) * hw;
            s += xs[off..off + hw].iter().copied().sum::<E>();
        }
        let mu = s / cnt;
        let mut sq = E::zero();
        for n in 0..b {
            let off = (n * c + ch) * hw;
            sq += xs[off..off + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<E>();
        }
        mean[ch] = mu;
        var[ch] = sq / cnt;
    }
    (mean, var)
}

/// Max pooling with zero padding (matching an explicit zero-pad layer followed by a valid pool).
pub fn max_pool2d<E: Element>(x: &Tensor<E>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<E>> {
    let [b, c, h, w] = dims4(x)?;
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let xs = x.data();
    let os = out.data_mut();
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = E::neg_infinity();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            E::zero()
                        } else {
                            xs[plane * h * w + iy as usize * w + ix as usize]
                        };
                        m = m.max(v);
                    }
                }
                os[plane * ho * wo + oy * wo + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Zero padding with independent `[top, bottom, left, right]` widths.
pub fn pad2d<E: Element>(x: &Tensor<E>, pad: [usize; 4]) -> Result<Tensor<E>> {
    let [b, c, h, w] = dims4(x)?;
    let [t, bo, l, r] = pad;
    let (ho, wo) = (h + t + bo, w + l + r);
    let mut out = Tensor::zeros(vec![b, c, ho, wo]);
    let xs = x.data();
    let os = out.data_mut();
    for plane in 0..b * c {
        for y in 0..h {
            let src = plane * h * w + y * w;
            let dst = plane * ho * wo + (y + t) * wo + l;
            os[dst..dst + w].copy_from_slice(&xs[src..src + w]);
        }
    }
    Ok(out)
}

/// Strided subsampling (a 1×1 max pool).
pub fn subsample<E: Element>(x: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
    max_pool2d(x, 1, stride, 0)
}

/// `[B, C, H, W]` → `[B, C]` spatial mean.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let [b, c, h, w] = dims4(x)?;
    let hw = h * w;
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<E>() / E::of(hw as f64))
        .collect();
    Tensor::from_vec(vec![b, c], data)
}

pub fn sigmoid<E: Element>(v: E) -> E {
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

pub fn silu<E: Element>(v: E) -> E {
    v * sigmoid(v)
}

pub fn silu_grad<E: Element>(v: E) -> E {
    let s = sigmoid(v);
    s * (E::one() + v * (E::one() - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, geo: ConvGeometry) -> Tensor<f64> {
        let [b, cin, h, wd] = dims4(x).unwrap();
        let [cout, cin_g, kh, kw] = dims4(w).unwrap();
        let cout_g = cout / geo.groups;
        let ho = geo.out_size(h, kh);
        let wo = geo.out_size(wd, kw);
        let mut out = Tensor::zeros(vec![b, cout, ho, wo]);
        for n in 0..b {
            for co in 0..cout {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * cin + g * cin_g + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((co * cin_g + ci) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Vec<usize>, step: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * step).collect()).unwrap()
    }

    #[test]
    fn pad2d_places_input() {
        let x = Tensor::<f32>::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = pad2d(&x, [0, 1, 1, 0]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 3]);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = ramp(vec![2, 4, 7, 6], 0.01);
        for (geo, cin_g, cout) in [
            (ConvGeometry::same(1, 3), 4, 5),
            (ConvGeometry::same(2, 3), 4, 3),
            (ConvGeometry { stride: 1, pad: 0, groups: 1 }, 4, 6),
            (ConvGeometry { stride: 2, pad: 1, groups: 4 }, 1, 4),
            (ConvGeometry { stride: 1, pad: 1, groups: 2 }, 2, 4),
        ] {
            let k = if geo.pad == 0 { 1 } else { 3 };
            let w = ramp(vec![cout, cin_g, k, k], 0.03);
            let fast = conv2d(&x, &w, None, geo).unwrap();
            let slow = naive_conv(&x, &w, geo);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{geo:?}");
        }
    }

    #[test]
    fn single_conv_layer_output_with_bias() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![2, 1, 3, 3], 1.0);
        let b = Tensor::from_vec(vec![2], vec![0.5, -1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), ConvGeometry::same(1, 3)).unwrap();
        // centre sees all 9 ones, corners see 4
        assert_eq!(y.data()[4], 9.5);
        assert_eq!(y.data()[0], 4.5);
        assert_eq!(y.data()[9 + 4], 8.0);
    }

    #[test]
    fn max_pool_pads_with_zero() {
        let x = Tensor::<f32>::full(vec![1, 1, 4, 4], -1.0);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // windows touching the border see the zero padding; the last one does not
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, -1.0]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let q = ramp(vec![1, 3, 5], 0.1);
        let k = ramp(vec![1, 3, 5], 0.07);
        let v = ramp(vec![1, 3, 5], 0.2);
        let (_, p) = attention(&q, &k, &v).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
