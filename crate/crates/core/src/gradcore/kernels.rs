//! Forward kernels shared by the tape ops. Convolutions go through im2col and
//! GEMM, one image per work item.

use super::array::{gemm, gemm_uninit, Array, MatRef, Scalar};
use crate::par;

/// Geometry of a stride-1 zero-padded square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Images per weight-gradient partial sum. Fixed so results do not depend on
/// the thread count.
const IMG_CHUNK: usize = 16;

/// Patch matrix `[C*K*K, nb*Ho*Wo]` for images `first..first+nb`; column
/// block `j` holds image `first + j`.
fn chunk_cols<T: Scalar>(x: &[T], g: &ConvGeom, first: usize, nb: usize) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let img_len = g.c * g.h * g.w;
    let mut cols = Vec::with_capacity(g.ckk() * nb * ho * wo);
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                // valid output columns: pad <= ox + kj < pad + w
                let lo = g.pad.saturating_sub(kj).min(wo);
                let hi = (g.pad + g.w).saturating_sub(kj).min(wo).max(lo);
                for j in first..first + nb {
                    let plane = &x[j * img_len + ci * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let iy = oy + ki;
                        if iy < g.pad || iy - g.pad >= g.h {
                            cols.resize(cols.len() + wo, T::zero());
                            continue;
                        }
                        let src = &plane[(iy - g.pad) * g.w..][..g.w];
                        cols.resize(cols.len() + lo, T::zero());
                        cols.extend_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                        cols.resize(cols.len() + wo - hi, T::zero());
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`chunk_cols`] for one image: accumulates the patch rows of
/// column block `j` (row stride `ld`) into `img`.
fn col2im_from<T: Scalar>(cols: &[T], ld: usize, g: &ConvGeom, img: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let lo = g.pad.saturating_sub(kj).min(wo);
                let hi = (g.pad + g.w).saturating_sub(kj).min(wo).max(lo);
                for oy in 0..ho {
                    let iy = oy + ki;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..][..g.w][lo + kj - g.pad..hi + kj - g.pad];
                    let src = &cols[r * ld + oy * wo..][lo..hi];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// `x[N,C,H,W] * w[O,C,K,K] -> [N,O,Ho,Wo]`.
pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.out_hw();
    let len = g.n * g.o * hw;
    let mut out = Vec::with_capacity(len);
    par::for_each_chunk_mut(&mut out.spare_capacity_mut()[..len], g.o * hw, |i, chunk| {
        let cols = chunk_cols(x, g, i, 1);
        gemm_uninit(MatRef::new(w, g.o, g.ckk()), MatRef::new(&cols, g.ckk(), hw), chunk);
    });
    // SAFETY: every one of the first `len` slots was written above.
    unsafe { out.set_len(len) };
    out
}

/// Gradient of [`conv2d`] with respect to its input, given the output gradient.
pub(crate) fn conv2d_input_grad<T: Scalar>(grad_out: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.out_hw();
    let img_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * img_len];
    par::for_each_chunk_mut(&mut out, img_len, |i, img| {
        let gm = &grad_out[i * g.o * hw..][..g.o * hw];
        let cols = gemm(MatRef::new(w, g.o, g.ckk()).t(), MatRef::new(gm, g.o, hw));
        col2im_from(&cols, hw, g, img);
    });
    out
}

/// Output gradients of images `first..first+nb` as `[O, nb*Ho*Wo]`.
fn chunk_grad_out<T: Scalar>(grad_out: &[T], g: &ConvGeom, first: usize, nb: usize) -> Vec<T> {
    let hw = g.out_hw();
    let mut gm = Vec::with_capacity(g.o * nb * hw);
    for oc in 0..g.o {
        for j in first..first + nb {
            gm.extend_from_slice(&grad_out[(j * g.o + oc) * hw..][..hw]);
        }
    }
    gm
}

/// Gradient of [`conv2d`] with respect to its kernel. Each fixed group of
/// images is one GEMM; group partials are summed in group order, so the
/// result does not depend on the thread count.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &[T], grad_out: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.out_hw();
    let wlen = g.o * g.ckk();
    let partials = par::map_indexed(g.n.div_ceil(IMG_CHUNK), |ci| {
        let first = ci * IMG_CHUNK;
        let nb = IMG_CHUNK.min(g.n - first);
        let ld = nb * hw;
        let cols = chunk_cols(x, g, first, nb);
        let gm = chunk_grad_out(grad_out, g, first, nb);
        gemm(MatRef::new(&gm, g.o, ld), MatRef::new(&cols, g.ckk(), ld).t())
    });
    let mut parts = partials.into_iter();
    let mut out = parts.next().unwrap_or_else(|| vec![T::zero(); wlen]);
    for part in parts {
        for (o, p) in out.iter_mut().zip(&part) {
            *o = *o + *p;
        }
    }
    out
}

/// Flat source indices of the maximum in each 2x2 stride-2 window of
/// `[N,C,H,W]`; ties resolve to the first element in row-major window order.
pub(crate) fn maxpool2x2_indices<T: Scalar>(x: &Array<T>) -> (Vec<usize>, Vec<usize>) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let r0 = base + 2 * oy * w;
            let top = &d[r0..r0 + w];
            let bot = &d[r0 + w..r0 + 2 * w];
            for ox in 0..wo {
                let j = 2 * ox;
                let (mut best, mut bv) = (r0 + j, top[j]);
                if top[j + 1] > bv {
                    (best, bv) = (r0 + j + 1, top[j + 1]);
                }
                if bot[j] > bv {
                    (best, bv) = (r0 + w + j, bot[j]);
                }
                if bot[j + 1] > bv {
                    best = r0 + w + j + 1;
                }
                idx.push(best);
            }
        }
    }
    (idx, vec![n, c, ho, wo])
}

/// Smallest gap between the winner and the runner-up over all pooling windows.
pub(crate) fn maxpool2x2_margin<T: Scalar>(x: &Array<T>) -> f64 {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let d = x.data();
    let mut margin = f64::INFINITY;
    for plane in 0..s[0] * s[1] {
        let base = plane * h * w;
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut v = [0.0f64; 4];
                for (q, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    v[q] = d[base + (2 * oy + dy) * w + 2 * ox + dx].as_f64();
                }
                v.sort_by(|a, b| b.total_cmp(a));
                // a tie among relu zeros is flat, not a kink; the relu margin covers it
                if v[0] != 0.0 || v[1] != 0.0 {
                    margin = margin.min(v[0] - v[1]);
                }
            }
        }
    }
    margin
}

pub(crate) fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Vec<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n))
}

pub(crate) fn transpose2<T: Scalar>(a: &Array<T>) -> Vec<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}
