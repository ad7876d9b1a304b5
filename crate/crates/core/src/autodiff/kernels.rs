//! Raw slice kernels used by the forward and backward rules.

use crate::tensor::Scalar;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `ta` set, `a` is stored as `k×m`; with `tb` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable through the strides.
    unsafe {
        T::gemm_strided(
            m,
            k,
            n,
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

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes, `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid over `out`, zero along broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let base = row_major_strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                base[i - offset]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, passing the source
/// offset computed from `strides`. The innermost axis is handed over as a run.
fn for_each_run(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut src = 0usize;
    for o in 0..outer {
        f(o * inner, src, inner, inner_stride);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            src -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_to<T: Scalar>(data: &[T], src: &[usize], out: &[usize]) -> Vec<T> {
    let numel: usize = out.iter().product();
    let strides = broadcast_strides(src, out);
    let mut result = vec![T::zero(); numel];
    for_each_run(out, &strides, |dst, s, len, stride| {
        let run = &mut result[dst..dst + len];
        if stride == 0 {
            run.iter_mut().for_each(|v| *v = data[s]);
        } else {
            run.copy_from_slice(&data[s..s + len]);
        }
    });
    result
}

/// Adjoint of [`broadcast_to`]: sums `grad` (shaped `out`) back onto `src`.
pub fn reduce_to<T: Scalar>(grad: &[T], src: &[usize], out: &[usize]) -> Vec<T> {
    let numel: usize = src.iter().product();
    let strides = broadcast_strides(src, out);
    let mut result = vec![T::zero(); numel];
    for_each_run(out, &strides, |g, s, len, stride| {
        let run = &grad[g..g + len];
        if stride == 0 {
            let mut acc = T::zero();
            for &v in run {
                acc += v;
            }
            result[s] += acc;
        } else {
            for (r, &v) in result[s..s + len].iter_mut().zip(run) {
                *r += v;
            }
        }
    });
    result
}

pub fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let base = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| base[a]).collect();
    let mut result = vec![T::zero(); data.len()];
    for_each_run(&out_shape, &strides, |dst, s, len, stride| {
        for (i, r) in result[dst..dst + len].iter_mut().enumerate() {
            *r = data[s + i * stride];
        }
    });
    (result, out_shape)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Geometry of a stride-1, same-padding 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, H·W]` patch columns.
pub fn im2col<T: Scalar>(img: &[T], g: ConvGeom, cols: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let (h, w) = (g.height, g.width);
    for c in 0..g.channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kj as isize - pw as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back onto the image.
pub fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, img: &mut [T]) {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let (h, w) = (g.height, g.width);
    for c in 0..g.channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let col = &cols[row * h * w..(row + 1) * h * w];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kj as isize - pw as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += col[y * w + x];
                        }
                    }
                }
            }
        }
    }
}
