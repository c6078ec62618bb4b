//! Raw numeric kernels: GEMM, im2col/col2im, 2-D FFT and nearest upsampling.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c`, with `c` row-major (`n` columns).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, alpha, a, b, beta, c, (n, 1));
}

/// [`gemm`] with explicit `(row, column)` strides for `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    (crs, ccs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * crs + (n - 1) * ccs, "gemm output too small");
    if k > 0 {
        assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs, "gemm lhs too small");
        assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs, "gemm rhs too small");
    }
    // SAFETY: the asserts above bound every index touched by the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

/// Geometry of a 2-D convolution over one batch item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `ox` in `[lo, hi)` whose input column `ox·stride + dx`
/// falls inside `[0, w)`.
fn valid_range(dx: isize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if dx >= 0 { 0 } else { ((-dx + s - 1) / s) as usize };
    let last = w as isize - 1 - dx;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Unfolds one `[C, H, W]` item into a `(C·kh·kw) × (oh·ow)` row-major patch
/// matrix appended to `out`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, out: &mut Vec<f64>) {
    out.reserve(g.rows() * g.cols());
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dy = (ki * g.dil) as isize - g.pad as isize;
                let dx = (kj * g.dil) as isize - g.pad as isize;
                let (lo, hi) = valid_range(dx, g.stride, g.w, g.ow);
                let x0 = (lo * g.stride) as isize + dx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        out.resize(out.len() + g.ow, 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out.resize(out.len() + lo, 0.0);
                    if g.stride == 1 {
                        out.extend_from_slice(&src[x0 as usize..x0 as usize + (hi - lo)]);
                    } else {
                        out.extend((x0 as usize..).step_by(g.stride).take(hi - lo).map(|ix| src[ix]));
                    }
                    out.resize(out.len() + (g.ow - hi), 0.0);
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static PATCHES: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on the patch matrix of one item, built in a reusable thread-local
/// buffer.
pub(crate) fn with_patches<R>(x: &[f64], g: &ConvGeom, f: impl FnOnce(&[f64]) -> R) -> R {
    PATCHES.with(|s| {
        let mut buf = s.borrow_mut();
        buf.clear();
        im2col(x, g, &mut buf);
        f(&buf)
    })
}

/// Runs `f` on a reusable thread-local buffer of at least `len` values.
/// Contents on entry are unspecified.
pub(crate) fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix (rows `ld` apart)
/// back into `[C, H, W]`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64], ld: usize) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ld..row * ld + p];
                let dy = (ki * g.dil) as isize - g.pad as isize;
                let dx = (kj * g.dil) as isize - g.pad as isize;
                let (lo, hi) = valid_range(dx, g.stride, g.w, g.ow);
                let x0 = (lo * g.stride) as isize + dx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (d, v) in dst[x0 as usize..x0 as usize + (hi - lo)].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (v, ix) in line.iter().zip((x0 as usize..).step_by(g.stride)) {
                            dst[ix] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place orthonormal 2-D DFT of an `h × w` row-major plane.
/// `inverse` selects the `e^{+i…}` kernel.
pub(crate) fn fft2_inplace(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        }
    });
    row_fft.process(buf);
    let mut t = vec![Complex::new(0.0, 0.0); h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = buf[y * w + x];
        }
    }
    col_fft.process(&mut t);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = t[x * h + y] * norm;
        }
    }
}

/// Nearest-neighbour upsampling of one plane by an integer factor.
pub(crate) fn upsample_plane(src: &[f64], h: usize, w: usize, f: usize, dst: &mut [f64]) {
    let ow = w * f;
    for y in 0..h * f {
        let sy = y / f;
        for x in 0..ow {
            dst[y * ow + x] = src[sy * w + x / f];
        }
    }
}

/// Adjoint of [`upsample_plane`]: block sums.
pub(crate) fn upsample_plane_adjoint(g: &[f64], h: usize, w: usize, f: usize, dst: &mut [f64]) {
    let ow = w * f;
    for y in 0..h * f {
        let sy = y / f;
        for x in 0..ow {
            dst[sy * w + x / f] += g[y * ow + x];
        }
    }
}
