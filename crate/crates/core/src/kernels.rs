//! Raw forward/backward loops used by the tape.
//!
//! All reductions run sequentially over the reduced index, so results are
//! bit-reproducible for a given build.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

const LANES: usize = 8;

/// Dot product over `LANES` interleaved partial sums, combined in a fixed
/// order so the result stays reproducible.
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let split = x.len() / LANES * LANES;
    for (xc, yc) in x[..split].chunks_exact(LANES).zip(y[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = acc[l] + xc[l] * yc[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&a, &b) in x[split..].iter().zip(&y[split..]) {
        total = total + a * b;
    }
    total
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Spatial geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: (1, 1), padding: (0, 0), dilation: (1, 1) }
    }
}

impl ConvGeometry {
    pub fn same(kh: usize, kw: usize) -> Self {
        ConvGeometry { padding: (kh / 2, kw / 2), ..Default::default() }
    }

    pub fn output_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let eff_h = self.dilation.0 * (kh - 1) + 1;
        let eff_w = self.dilation.1 * (kw - 1) + 1;
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < eff_h || pw < eff_w || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((ph - eff_h) / self.stride.0 + 1, (pw - eff_w) / self.stride.1 + 1))
    }
}

pub(crate) struct ConvShape {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate sampled by kernel tap `ki` at output row `oy`, if in bounds.
    fn src(&self, o: usize, k: usize, axis: usize) -> Option<usize> {
        let (stride, pad, dil, extent) = if axis == 0 {
            (self.geom.stride.0, self.geom.padding.0, self.geom.dilation.0, self.h)
        } else {
            (self.geom.stride.1, self.geom.padding.1, self.geom.dilation.1, self.w)
        };
        let pos = (o * stride + k * dil) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], s: &ConvShape, cols: &mut [T]) {
    let ncol = s.cols();
    for c in 0..s.c_in {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..s.ho {
                    let iy = s.src(oy, ky, 0);
                    for ox in 0..s.wo {
                        dst[oy * s.wo + ox] = match (iy, s.src(ox, kx, 1)) {
                            (Some(iy), Some(ix)) => x[(c * s.h + iy) * s.w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, dx: &mut [T]) {
    let ncol = s.cols();
    for c in 0..s.c_in {
        for ky in 0..s.kh {
            for kx in 0..s.kw {
                let row = (c * s.kh + ky) * s.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..s.ho {
                    let Some(iy) = s.src(oy, ky, 0) else { continue };
                    for ox in 0..s.wo {
                        if let Some(ix) = s.src(ox, kx, 1) {
                            let d = &mut dx[(c * s.h + iy) * s.w + ix];
                            *d = *d + src[oy * s.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `weight` is `[c_out, c_in, kh, kw]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    c_out: usize,
    s: &ConvShape,
) -> Vec<T> {
    let in_sz = s.c_in * s.h * s.w;
    let out_sz = c_out * s.cols();
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = vec![T::zero(); s.rows() * s.cols()];
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], s, &mut cols);
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * s.cols()..(co + 1) * s.cols()].fill(bv);
            }
        }
        mm_nn(weight, &cols, ob, c_out, s.rows(), s.cols());
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    batch: usize,
    c_out: usize,
    s: &ConvShape,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let in_sz = s.c_in * s.h * s.w;
    let out_sz = c_out * s.cols();
    let mut dx = want.0.then(|| vec![T::zero(); batch * in_sz]);
    let mut dw = want.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = want.2.then(|| vec![T::zero(); c_out]);
    let mut cols = vec![T::zero(); s.rows() * s.cols()];
    let mut dcols = vec![T::zero(); s.rows() * s.cols()];
    for b in 0..batch {
        let g = &dout[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], s, &mut cols);
            mm_nt(g, &cols, dw, c_out, s.cols(), s.rows());
        }
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            mm_tn(weight, g, &mut dcols, s.rows(), c_out, s.cols());
            col2im(&dcols, s, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d = *d + g[co * s.cols()..(co + 1) * s.cols()].iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Half-open input range pooled into adaptive output cell `i` of `bins`.
pub(crate) fn adaptive_range(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    let start = i * extent / bins;
    let end = ((i + 1) * extent).div_ceil(bins);
    (start, end)
}

/// Source taps and weights for half-pixel bilinear resampling along one axis.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn nearest_index(o: usize, src: usize, dst: usize) -> usize {
    (o * src / dst).min(src - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5).collect(); // 3x4
        let mut nn = vec![0.0; 8];
        mm_nn(&a, &b, &mut nn, 2, 3, 4);
        // bᵀ stored as 4x3
        let bt: Vec<f64> = (0..12).map(|idx| b[(idx % 3) * 4 + idx / 3]).collect();
        let mut nt = vec![0.0; 8];
        mm_nt(&a, &bt, &mut nt, 2, 3, 4);
        let at: Vec<f64> = (0..6).map(|idx| a[(idx % 2) * 3 + idx / 2]).collect();
        let mut tn = vec![0.0; 8];
        mm_tn(&at, &b, &mut tn, 2, 3, 4);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
    }

    #[test]
    fn adaptive_ranges_cover_extent() {
        assert_eq!(adaptive_range(0, 2, 4), (0, 2));
        assert_eq!(adaptive_range(1, 2, 4), (2, 4));
        assert_eq!(adaptive_range(1, 3, 5), (1, 4));
    }

    #[test]
    fn bilinear_identity_taps() {
        for (i, &(i0, _, frac)) in bilinear_taps(5, 5).iter().enumerate() {
            assert_eq!(i0, i);
            assert_eq!(frac, 0.0);
        }
    }
}
