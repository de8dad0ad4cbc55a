//! Raw loops behind the heavier tape primitives. All loops run in a fixed
//! order so results are bit-reproducible.

use super::Element;

/// Geometry of an NHWC convolution with an `[kh, kw, cin, cout]` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the patch matrix.
    pub fn patches(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Columns of the patch matrix: one per (tap, input channel).
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Visit every (output pixel, kernel tap, input pixel) triple that lands
    /// inside the input.
    #[cfg(test)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let out_px = (b * oh + oy) * ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let in_px = (b * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(out_px, ky * self.kw + kx, in_px);
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(out_px, b, oy, ox)` for every output pixel in raster order.
fn for_each_pixel(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                f((b * oh + oy) * ow + ox, b, oy, ox);
            }
        }
    }
}

/// Input window of one output pixel, `[kh, kw, cin]`, zero in the padding.
fn load_patch<T: Element>(
    g: &ConvGeom,
    input: &[T],
    b: usize,
    oy: usize,
    ox: usize,
    buf: &mut [T],
) {
    let cin = g.cin;
    for ky in 0..g.kh {
        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
        for kx in 0..g.kw {
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            let dst = &mut buf[(ky * g.kw + kx) * cin..(ky * g.kw + kx + 1) * cin];
            if iy < 0 || iy >= g.in_h as isize || ix < 0 || ix >= g.in_w as isize {
                dst.fill(T::zero());
            } else {
                let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * cin;
                dst.copy_from_slice(&input[src..src + cin]);
            }
        }
    }
}

/// Adds a window gradient back onto the input pixels it came from.
fn store_patch_add<T: Element>(
    g: &ConvGeom,
    buf: &[T],
    b: usize,
    oy: usize,
    ox: usize,
    grad_input: &mut [T],
) {
    let cin = g.cin;
    for ky in 0..g.kh {
        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
        if iy < 0 || iy >= g.in_h as isize {
            continue;
        }
        for kx in 0..g.kw {
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            if ix < 0 || ix >= g.in_w as isize {
                continue;
            }
            let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * cin;
            let src = &buf[(ky * g.kw + kx) * cin..(ky * g.kw + kx + 1) * cin];
            for (acc, &v) in grad_input[dst..dst + cin].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
}

fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    for (acc, &v) in y.iter_mut().zip(x) {
        *acc += a * v;
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T]) -> Vec<T> {
    let (kp, cout) = (g.patch_len(), g.cout);
    let mut out = vec![T::zero(); g.patches() * cout];
    let mut buf = vec![T::zero(); kp];
    for_each_pixel(g, |px, b, oy, ox| {
        load_patch(g, input, b, oy, ox, &mut buf);
        let o = &mut out[px * cout..(px + 1) * cout];
        // register blocks of eight output channels
        let mut c0 = 0;
        while c0 + 8 <= cout {
            let mut acc = [T::zero(); 8];
            for (p, &v) in buf.iter().enumerate() {
                let w = &weight[p * cout + c0..p * cout + c0 + 8];
                for j in 0..8 {
                    acc[j] += v * w[j];
                }
            }
            o[c0..c0 + 8].copy_from_slice(&acc);
            c0 += 8;
        }
        if c0 < cout {
            for (&v, w) in buf.iter().zip(weight.chunks_exact(cout)) {
                axpy(&mut o[c0..], v, &w[c0..]);
            }
        }
    });
    out
}

/// Accumulates input and weight gradients for one convolution.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
) {
    let (kp, cout) = (g.patch_len(), g.cout);
    let wt = transpose(weight, kp, cout);
    let want_w = grad_weight.is_some();
    let mut gwt = vec![T::zero(); if want_w { kp * cout } else { 0 }];
    let mut buf = vec![T::zero(); kp];
    let mut gbuf = vec![T::zero(); kp];
    for_each_pixel(g, |px, b, oy, ox| {
        let go = &grad_out[px * cout..(px + 1) * cout];
        if want_w {
            load_patch(g, input, b, oy, ox, &mut buf);
            for (gw, &gv) in gwt.chunks_exact_mut(kp).zip(go) {
                axpy(gw, gv, &buf);
            }
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gbuf.fill(T::zero());
            for (&gv, w) in go.iter().zip(wt.chunks_exact(kp)) {
                axpy(&mut gbuf, gv, w);
            }
            store_patch_add(g, &gbuf, b, oy, ox, gi);
        }
    });
    if let Some(gw) = grad_weight {
        for (acc, v) in gw.iter_mut().zip(transpose(&gwt, cout, kp)) {
            *acc += v;
        }
    }
}

/// Nearest-neighbor 2x upsample of an NHWC buffer.
pub fn upsample2x<T: Element>(input: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * oh * ow * c];
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let src = ((bi * h + y / 2) * w + x / 2) * c;
                let dst = ((bi * oh + y) * ow + x) * c;
                out[dst..dst + c].copy_from_slice(&input[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(
    grad_out: &[T],
    grad_in: &mut [T],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    let (oh, ow) = (2 * h, 2 * w);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let dst = ((bi * h + y / 2) * w + x / 2) * c;
                let src = ((bi * oh + y) * ow + x) * c;
                for k in 0..c {
                    grad_in[dst + k] += grad_out[src + k];
                }
            }
        }
    }
}

/// `[m, k] x [k, n]` into a fresh `[m, n]` buffer.
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (acc, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *acc += av * bv;
            }
        }
    }
    out
}

/// `grad_a += grad_c · bᵀ`
pub fn matmul_grad_a<T: Element>(
    grad_c: &[T],
    b: &[T],
    grad_a: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let gc = &grad_c[i * n..(i + 1) * n];
        for p in 0..k {
            let mut s = T::zero();
            for (&g, &bv) in gc.iter().zip(&b[p * n..(p + 1) * n]) {
                s += g * bv;
            }
            grad_a[i * k + p] += s;
        }
    }
}

/// `grad_b += aᵀ · grad_c`
pub fn matmul_grad_b<T: Element>(
    a: &[T],
    grad_c: &[T],
    grad_b: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let gc = &grad_c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (acc, &g) in grad_b[p * n..(p + 1) * n].iter_mut().zip(gc) {
                *acc += av * g;
            }
        }
    }
}
