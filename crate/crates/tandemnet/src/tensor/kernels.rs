//! Raw f64/f32 kernels behind the tape ops. All GEMMs accumulate (`c +=`),
//! callers zero the output when they want a plain product. Loop orders are
//! fixed so results are bitwise identical at any worker-thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::Elem;

static WORKER_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the threads used inside large kernels (the tape itself stays
/// single-threaded). 0 means "use the host's available parallelism".
pub fn set_worker_threads(n: usize) {
    let n = if n == 0 {
        std::thread::available_parallelism().map_or(1, |p| p.get())
    } else {
        n
    };
    WORKER_THREADS.store(n, Ordering::Relaxed);
}

pub fn worker_threads() -> usize {
    WORKER_THREADS.load(Ordering::Relaxed).max(1)
}

const PAR_THRESHOLD: usize = 1 << 20;

/// Splits rows of `c` across scoped threads when the kernel is big enough.
/// Each row is produced by exactly one thread with the serial loop order, so
/// the result does not depend on the split.
fn for_row_chunks<F>(c: &mut [Elem], rows: usize, row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Elem]) + Sync,
{
    let threads = worker_threads().min(rows.max(1));
    if threads <= 1 || work < PAR_THRESHOLD {
        f(0, c);
        return;
    }
    let chunk_rows = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (idx, chunk) in c.chunks_mut(chunk_rows * row_len).enumerate() {
            let f = &f;
            s.spawn(move || f(idx * chunk_rows, chunk));
        }
    });
}

/// c += a · b, shapes a: m×k, b: k×n, c: m×n.
pub fn gemm_nn(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_row_chunks(c, m, n, m * k * n, |row0, chunk| {
        for (ci, crow) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + ci;
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    });
}

/// c += a · bᵀ, shapes a: m×k, b: n×k, c: m×n.
pub fn gemm_nt(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_row_chunks(c, m, n, m * k * n, |row0, chunk| {
        for (ci, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + ci) * k..(row0 + ci + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                *cv += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    });
}

/// c += aᵀ · b, shapes a: m×k, b: m×n, c: k×n.
pub fn gemm_tn(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_row_chunks(c, k, n, m * k * n, |row0, chunk| {
        for (cp, crow) in chunk.chunks_mut(n).enumerate() {
            let p = row0 + cp;
            for i in 0..m {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    });
}

/// Four-lane dot product: explicit partial sums so the reduction vectorizes
/// while staying order-deterministic.
pub fn dot(a: &[Elem], b: &[Elem]) -> Elem {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (pa, pb) = (&a[i * 4..i * 4 + 4], &b[i * 4..i * 4 + 4]);
        for l in 0..4 {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image [cin, h, w] into the patch matrix [cin·kh·kw, oh·ow].
/// Out-of-bounds taps read as zero (zero padding).
pub fn im2col(x: &[Elem], g: &ConvGeom, col: &mut [Elem]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let out_row = &mut col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out_row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates patch-matrix gradients
/// back into the image gradient.
pub fn col2im(col: &[Elem], g: &ConvGeom, dx: &mut [Elem]) {
    debug_assert_eq!(dx.len(), g.cin * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src_row = &col[row * cols..(row + 1) * cols];
                row += 1;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src_row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
