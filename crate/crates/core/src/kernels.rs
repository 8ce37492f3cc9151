//! Raw numeric kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens in [`crate::autograd`].

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kj − pad` lies inside the row.
fn valid_cols(g: &ConvGeom, wo: usize, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let lim = g.w + g.pad;
    let hi = if kj >= lim { 0 } else { ((lim - kj - 1) / g.stride + 1).min(wo) };
    (lo.min(hi), hi)
}

/// Unfolds one sample (`cin×h×w`) into rows of a column matrix with leading
/// dimension `ld`, starting at column `off`. Each row holds `ho·wo` entries.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T], ld: usize, off: usize) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, wo, kj);
                let dst = &mut cols[row * ld + off..row * ld + off + plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, &x) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = x;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back, accumulating into `dx`.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, wo, kj);
                let src = &cols[row * ld + off..row * ld + off + plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Builds the batched column matrix `(cin·kh·kw) × (n·ho·wo)`; sample `s`
/// occupies columns `s·plane..(s+1)·plane`.
fn batched_cols<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch_len();
    let in_len = g.cin * g.h * g.w;
    let total = g.n * plane;
    let mut cols = vec![T::zero(); k * total];
    if g.is_pointwise() {
        for s in 0..g.n {
            for ci in 0..g.cin {
                let src = &x[s * in_len + ci * plane..s * in_len + (ci + 1) * plane];
                cols[ci * total + s * plane..ci * total + (s + 1) * plane].copy_from_slice(src);
            }
        }
        return cols;
    }
    for s in 0..g.n {
        im2col(g, &x[s * in_len..(s + 1) * in_len], &mut cols, total, s * plane);
    }
    cols
}

/// Cross-correlation with zero padding. `out` has shape `n×cout×ho×wo`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch_len();
    let total = g.n * plane;
    if g.n == 1 && g.is_pointwise() {
        T::gemm_raw(g.cout, k, plane, w, (k as isize, 1), x, (plane as isize, 1), T::zero(), out, (plane as isize, 1));
    } else {
        let cols = batched_cols(g, x);
        // out viewed as cout × (n·plane) with a sample stride of cout·plane
        let mut tmp = vec![T::zero(); g.cout * total];
        T::gemm_raw(g.cout, k, total, w, (k as isize, 1), &cols, (total as isize, 1), T::zero(), &mut tmp, (total as isize, 1));
        for c in 0..g.cout {
            for s in 0..g.n {
                out[(s * g.cout + c) * plane..(s * g.cout + c + 1) * plane]
                    .copy_from_slice(&tmp[c * total + s * plane..c * total + (s + 1) * plane]);
            }
        }
    }
    if let Some(bias) = bias {
        for (i, row) in out.chunks_mut(plane).enumerate() {
            let b = bias[i % g.cout];
            row.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Accumulates input, weight and bias gradients for [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch_len();
    let total = g.n * plane;
    let in_len = g.cin * g.h * g.w;
    // dout regrouped as cout × (n·plane)
    let mut dg = vec![T::zero(); g.cout * total];
    for c in 0..g.cout {
        for s in 0..g.n {
            dg[c * total + s * plane..c * total + (s + 1) * plane]
                .copy_from_slice(&dout[(s * g.cout + c) * plane..(s * g.cout + c + 1) * plane]);
        }
    }
    if let Some(db) = db {
        for (c, row) in dg.chunks(total).enumerate() {
            db[c] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let cols = batched_cols(g, x);
        // dW (cout×k) += dOut (cout×total) · colsᵀ (total×k)
        T::gemm_raw(g.cout, total, k, &dg, (total as isize, 1), &cols, (1, total as isize), T::one(), dw, (k as isize, 1));
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); k * total];
        T::gemm_raw(k, g.cout, total, w, (1, k as isize), &dg, (total as isize, 1), T::zero(), &mut dcols, (total as isize, 1));
        for s in 0..g.n {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                for ci in 0..g.cin {
                    let src = &dcols[ci * total + s * plane..ci * total + (s + 1) * plane];
                    dxs[ci * plane..(ci + 1) * plane].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            } else {
                col2im(g, &dcols, total, s * plane, dxs);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// Windowed maximum; padding never wins. Returns the flat input index of every
/// selected element (first occurrence on ties).
pub fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T], out: &mut [T]) -> Vec<usize> {
    let (ho, wo) = g.out_hw();
    let mut arg = vec![0usize; g.planes * ho * wo];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..g.k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    arg
}

/// Per-channel statistics over the N, H, W axes.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * plane;
            s += x[off..off + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * plane;
            v += x[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
