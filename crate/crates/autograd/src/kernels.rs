//! Raw numeric kernels operating on row-major slices.

use crate::par;

/// Strided matrix view description: `(row_stride, col_stride)`.
pub(crate) type Layout = (isize, isize);

pub(crate) const ROW_MAJOR: fn(usize) -> Layout = |cols| (cols as isize, 1);
pub(crate) const TRANSPOSED: fn(usize) -> Layout = |cols| (1, cols as isize);

fn max_offset(rows: usize, cols: usize, l: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * l.0 + (cols - 1) as isize * l.1) as usize
}

/// `c = a·b (+ c if accumulate)` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > max_offset(m, k, la), "gemm lhs too small");
    assert!(b.len() > max_offset(k, n, lb), "gemm rhs too small");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every offset matrixmultiply will touch,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.0,
            la.1,
            b.as_ptr(),
            lb.0,
            lb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D NHWC convolution. 1-D convolutions use `w = kw = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn in_item(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_item(&self) -> usize {
        self.out_h() * self.out_w() * self.cout
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo, patch) = (self.out_h(), self.out_w(), self.patch());
        let mut cols = vec![0.0; ho * wo * patch];
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &mut cols[(oh * wo + ow) * patch..(oh * wo + ow + 1) * patch];
                for kh in 0..self.kh {
                    let ih = (oh * self.sh + kh) as isize - self.ph as isize;
                    if ih < 0 || ih as usize >= self.h {
                        continue;
                    }
                    for kw in 0..self.kw {
                        let iw = (ow * self.sw + kw) as isize - self.pw as isize;
                        if iw < 0 || iw as usize >= self.w {
                            continue;
                        }
                        let src = (ih as usize * self.w + iw as usize) * self.cin;
                        let dst = (kh * self.kw + kw) * self.cin;
                        row[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo, patch) = (self.out_h(), self.out_w(), self.patch());
        for oh in 0..ho {
            for ow in 0..wo {
                let row = &cols[(oh * wo + ow) * patch..(oh * wo + ow + 1) * patch];
                for kh in 0..self.kh {
                    let ih = (oh * self.sh + kh) as isize - self.ph as isize;
                    if ih < 0 || ih as usize >= self.h {
                        continue;
                    }
                    for kw in 0..self.kw {
                        let iw = (ow * self.sw + kw) as isize - self.pw as isize;
                        if iw < 0 || iw as usize >= self.w {
                            continue;
                        }
                        let dst = (ih as usize * self.w + iw as usize) * self.cin;
                        let src = (kh * self.kw + kw) * self.cin;
                        for c in 0..self.cin {
                            dx[dst + c] += row[src + c];
                        }
                    }
                }
            }
        }
    }

    /// Forward pass, parallel over batch items.
    pub fn forward(&self, x: &[f64], weight: &[f64]) -> Vec<f64> {
        let rows = self.out_h() * self.out_w();
        let mut y = vec![0.0; self.batch * self.out_item()];
        par::for_each_chunk_mut(&mut y, self.out_item(), |b, yb| {
            let cols = self.im2col(&x[b * self.in_item()..(b + 1) * self.in_item()]);
            gemm(
                rows,
                self.patch(),
                self.cout,
                &cols,
                ROW_MAJOR(self.patch()),
                weight,
                ROW_MAJOR(self.cout),
                yb,
                false,
            );
        });
        y
    }

    /// Gradients w.r.t. input and weight. Per-item weight gradients are summed
    /// in batch order.
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        dy: &[f64],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let rows = self.out_h() * self.out_w();
        let patch = self.patch();
        let per_item = par::map_collect(self.batch, |b| {
            let dyb = &dy[b * self.out_item()..(b + 1) * self.out_item()];
            let dx = want_dx.then(|| {
                let mut dcols = vec![0.0; rows * patch];
                gemm(
                    rows,
                    self.cout,
                    patch,
                    dyb,
                    ROW_MAJOR(self.cout),
                    weight,
                    TRANSPOSED(self.cout),
                    &mut dcols,
                    false,
                );
                let mut dx = vec![0.0; self.in_item()];
                self.col2im(&dcols, &mut dx);
                dx
            });
            let dw = want_dw.then(|| {
                let cols = self.im2col(&x[b * self.in_item()..(b + 1) * self.in_item()]);
                let mut dw = vec![0.0; patch * self.cout];
                gemm(
                    patch,
                    rows,
                    self.cout,
                    &cols,
                    TRANSPOSED(patch),
                    dyb,
                    ROW_MAJOR(self.cout),
                    &mut dw,
                    false,
                );
                dw
            });
            (dx, dw)
        });
        let mut dx_all = want_dx.then(|| Vec::with_capacity(self.batch * self.in_item()));
        let mut dw_all = want_dw.then(|| vec![0.0; patch * self.cout]);
        for (dx, dw) in per_item {
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
            if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                for (a, v) in all.iter_mut().zip(dw) {
                    *a += v;
                }
            }
        }
        (dx_all, dw_all)
    }
}

/// Depthwise 1-D convolution over `(B, T, C)` with weight `(K, C)`, stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthwiseGeom {
    pub batch: usize,
    pub t: usize,
    pub c: usize,
    pub k: usize,
    pub pad: usize,
}

impl DepthwiseGeom {
    pub fn out_t(&self) -> usize {
        self.t + 2 * self.pad - self.k + 1
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (t_out, c) = (self.out_t(), self.c);
        let mut y = vec![0.0; self.batch * t_out * c];
        par::for_each_chunk_mut(&mut y, t_out * c, |b, yb| {
            let xb = &x[b * self.t * c..(b + 1) * self.t * c];
            for to in 0..t_out {
                for k in 0..self.k {
                    let ti = (to + k) as isize - self.pad as isize;
                    if ti < 0 || ti as usize >= self.t {
                        continue;
                    }
                    let xr = &xb[ti as usize * c..(ti as usize + 1) * c];
                    let wr = &w[k * c..(k + 1) * c];
                    let yr = &mut yb[to * c..(to + 1) * c];
                    for ch in 0..c {
                        yr[ch] += wr[ch] * xr[ch];
                    }
                }
            }
        });
        y
    }

    pub fn backward(&self, x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (t_out, c) = (self.out_t(), self.c);
        let per_item = par::map_collect(self.batch, |b| {
            let xb = &x[b * self.t * c..(b + 1) * self.t * c];
            let dyb = &dy[b * t_out * c..(b + 1) * t_out * c];
            let mut dx = vec![0.0; self.t * c];
            let mut dw = vec![0.0; self.k * c];
            for to in 0..t_out {
                for k in 0..self.k {
                    let ti = (to + k) as isize - self.pad as isize;
                    if ti < 0 || ti as usize >= self.t {
                        continue;
                    }
                    let ti = ti as usize;
                    for ch in 0..c {
                        let g = dyb[to * c + ch];
                        dx[ti * c + ch] += g * w[k * c + ch];
                        dw[k * c + ch] += g * xb[ti * c + ch];
                    }
                }
            }
            (dx, dw)
        });
        let mut dx_all = Vec::with_capacity(self.batch * self.t * c);
        let mut dw_all = vec![0.0; self.k * c];
        for (dx, dw) in per_item {
            dx_all.extend_from_slice(&dx);
            for (a, v) in dw_all.iter_mut().zip(dw) {
                *a += v;
            }
        }
        (dx_all, dw_all)
    }
}
