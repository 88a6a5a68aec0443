//! Raw slice kernels behind the differentiable ops. Shapes are validated by
//! the caller.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn same(dilation: usize, kernel: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Output columns `[lo, hi)` whose input column `ox*stride + offset` is in range.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl ConvDims {
    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Pointwise, unpadded, unit stride: the column matrix is the input.
    fn is_identity_layout(&self, g: ConvGeom) -> bool {
        self.k == 1 && g.stride == 1 && g.padding == 0 && self.ho == self.h && self.wo == self.w
    }
}

/// Column matrix `[cin*k*k, ho*wo]`; row `(ci*k + ky)*k + kx` holds the
/// input sample under that tap for every output pixel (zero in padding).
pub(crate) fn im2col<R: Real>(x: &[R], d: ConvDims, g: ConvGeom) -> Vec<R> {
    let po = d.plane_out();
    let mut col = vec![R::zero(); d.taps() * po];
    let p = g.padding as isize;
    for ci in 0..d.cin {
        let in_plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            let off_y = (ky * g.dilation) as isize - p;
            for kx in 0..d.k {
                let off_x = (kx * g.dilation) as isize - p;
                let r = (ci * d.k + ky) * d.k + kx;
                let row = &mut col[r * po..(r + 1) * po];
                let (x0, x1) = valid_range(off_x, g.stride, d.w, d.wo);
                for oy in 0..d.ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    if iy < 0 || iy >= d.h as isize || x0 >= x1 {
                        continue;
                    }
                    let src = &in_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let dst = &mut row[oy * d.wo + x0..oy * d.wo + x1];
                    if g.stride == 1 {
                        let s0 = (x0 as isize + off_x) as usize;
                        dst.copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            *o = src[(((x0 + j) * g.stride) as isize + off_x) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add<R: Real>(gcol: &[R], d: ConvDims, g: ConvGeom, gx: &mut [R]) {
    let po = d.plane_out();
    let p = g.padding as isize;
    for ci in 0..d.cin {
        let gx_plane = &mut gx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            let off_y = (ky * g.dilation) as isize - p;
            for kx in 0..d.k {
                let off_x = (kx * g.dilation) as isize - p;
                let r = (ci * d.k + ky) * d.k + kx;
                let row = &gcol[r * po..(r + 1) * po];
                let (x0, x1) = valid_range(off_x, g.stride, d.w, d.wo);
                for oy in 0..d.ho {
                    let iy = (oy * g.stride) as isize + off_y;
                    if iy < 0 || iy >= d.h as isize || x0 >= x1 {
                        continue;
                    }
                    let dst = &mut gx_plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.wo + x0..oy * d.wo + x1];
                    if g.stride == 1 {
                        let s0 = (x0 as isize + off_x) as usize;
                        for (o, &v) in dst[s0..s0 + (x1 - x0)].iter_mut().zip(src) {
                            *o += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[(((x0 + j) * g.stride) as isize + off_x) as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, :] += sum_r w[co, r] * col[r, :]`, accumulating taps in
/// ascending `r` for every output element.
pub(crate) fn gemm_rows<R: Real>(w: &[R], col: &[R], out: &mut [R], cout: usize, taps: usize, po: usize) {
    const BLOCK: usize = 4;
    let mut co = 0;
    while co + BLOCK <= cout {
        let (o0, rest) = out[co * po..(co + BLOCK) * po].split_at_mut(po);
        let (o1, rest) = rest.split_at_mut(po);
        let (o2, o3) = rest.split_at_mut(po);
        for r in 0..taps {
            let c = &col[r * po..(r + 1) * po];
            let (w0, w1, w2, w3) = (
                w[co * taps + r],
                w[(co + 1) * taps + r],
                w[(co + 2) * taps + r],
                w[(co + 3) * taps + r],
            );
            for i in 0..po {
                let v = c[i];
                o0[i] += w0 * v;
                o1[i] += w1 * v;
                o2[i] += w2 * v;
                o3[i] += w3 * v;
            }
        }
        co += BLOCK;
    }
    for co in co..cout {
        let o = &mut out[co * po..(co + 1) * po];
        for r in 0..taps {
            let wv = w[co * taps + r];
            for (a, &v) in o.iter_mut().zip(&col[r * po..(r + 1) * po]) {
                *a += wv * v;
            }
        }
    }
}

/// Dot product with eight independent lanes so the reduction vectorises.
#[inline]
pub(crate) fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut lanes = [R::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = R::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + tail
}

pub(crate) fn conv2d_forward<R: Real>(x: &[R], k: &[R], d: ConvDims, g: ConvGeom) -> Vec<R> {
    let po = d.plane_out();
    let mut out = vec![R::zero(); d.cout * po];
    if d.is_identity_layout(g) {
        gemm_rows(k, x, &mut out, d.cout, d.taps(), po);
    } else {
        let col = im2col(x, d, g);
        gemm_rows(k, &col, &mut out, d.cout, d.taps(), po);
    }
    out
}

pub(crate) fn conv2d_backward_input<R: Real>(gout: &[R], k: &[R], d: ConvDims, g: ConvGeom) -> Vec<R> {
    let po = d.plane_out();
    let taps = d.taps();
    // gcol[r, :] = sum_co k[co, r] * gout[co, :]
    let mut gcol = vec![R::zero(); taps * po];
    for r in 0..taps {
        let row = &mut gcol[r * po..(r + 1) * po];
        for co in 0..d.cout {
            let wv = k[co * taps + r];
            for (a, &gv) in row.iter_mut().zip(&gout[co * po..(co + 1) * po]) {
                *a += wv * gv;
            }
        }
    }
    if d.is_identity_layout(g) {
        return gcol;
    }
    let mut gx = vec![R::zero(); d.cin * d.h * d.w];
    col2im_add(&gcol, d, g, &mut gx);
    gx
}

pub(crate) fn conv2d_backward_kernel<R: Real>(gout: &[R], x: &[R], d: ConvDims, g: ConvGeom) -> Vec<R> {
    let po = d.plane_out();
    let taps = d.taps();
    let owned;
    let col: &[R] = if d.is_identity_layout(g) {
        x
    } else {
        owned = im2col(x, d, g);
        &owned
    };
    let mut gk = vec![R::zero(); d.cout * taps];
    for co in 0..d.cout {
        let grow = &gout[co * po..(co + 1) * po];
        for r in 0..taps {
            gk[co * taps + r] = dot(grow, &col[r * po..(r + 1) * po]);
        }
    }
    gk
}

/// Source taps for half-pixel-centre bilinear sampling along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

#[inline]
pub(crate) fn lerp<R: Real>(a: R, b: R, t: R) -> R {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

pub(crate) fn resize_forward<R: Real>(x: &[R], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<R> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            let wy = R::lit(wy);
            for &(x0, x1, wx) in &tx {
                let wx = R::lit(wx);
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                let bot = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                out.push(lerp(top, bot, wy));
            }
        }
    }
    out
}

pub(crate) fn resize_backward<R: Real>(g: &[R], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<R> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut gx = vec![R::zero(); c * h * w];
    let one = R::one();
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = R::lit(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = R::lit(wx);
                let gv = gp[oy * wo + ox];
                let gt = (one - wy) * gv;
                let gb = wy * gv;
                plane[y0 * w + x0] += (one - wx) * gt;
                plane[y0 * w + x1] += wx * gt;
                plane[y1 * w + x0] += (one - wx) * gb;
                plane[y1 * w + x1] += wx * gb;
            }
        }
    }
    gx
}

/// Edge-replicated index into `[0, len)`.
#[inline]
pub(crate) fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// Sliding-window mean with edge replication, evaluated as a shift from the
/// centre value so constant neighbourhoods reproduce the centre exactly.
pub(crate) fn local_mean<R: Real>(x: &[R], c: usize, h: usize, w: usize, window: usize) -> Vec<R> {
    let r = (window / 2) as isize;
    let n = R::lit((window * window) as f64);
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let centre = plane[y as usize * w + xx as usize];
                let mut acc = R::zero();
                for dy in -r..=r {
                    let row = clamp_index(y + dy, h) * w;
                    for dx in -r..=r {
                        acc += plane[row + clamp_index(xx + dx, w)] - centre;
                    }
                }
                out.push(centre + acc / n);
            }
        }
    }
    out
}

/// Population variance over the same windows, given the window means.
pub(crate) fn local_var<R: Real>(x: &[R], mean: &[R], c: usize, h: usize, w: usize, window: usize) -> Vec<R> {
    let r = (window / 2) as isize;
    let n = R::lit((window * window) as f64);
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let mplane = &mean[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mu = mplane[y as usize * w + xx as usize];
                let mut acc = R::zero();
                for dy in -r..=r {
                    let row = clamp_index(y + dy, h) * w;
                    for dx in -r..=r {
                        let d = plane[row + clamp_index(xx + dx, w)] - mu;
                        acc += d * d;
                    }
                }
                out.push(acc / n);
            }
        }
    }
    out
}

/// Scatters `weight(p, q) * g[p]` from every window centre `p` onto its
/// (edge-replicated) sources `q`.
pub(crate) fn window_scatter<R: Real>(
    g: &[R],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    mut weight: impl FnMut(usize, usize) -> R,
) -> Vec<R> {
    let r = (window / 2) as isize;
    let mut gx = vec![R::zero(); g.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let p = base + y as usize * w + xx as usize;
                let gp = g[p];
                for dy in -r..=r {
                    let row = clamp_index(y + dy, h) * w;
                    for dx in -r..=r {
                        let q = base + row + clamp_index(xx + dx, w);
                        gx[q] += weight(p, q) * gp;
                    }
                }
            }
        }
    }
    gx
}
