//! Batched 2-D real transforms on raw row-major buffers.
//!
//! Planes are laid out `[planes, n, m]` in the spatial domain and
//! `[planes, n, m/2 + 1]` in the frequency domain. The forward transform
//! carries the `1/(nm)` factor; the inverse carries none.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub fn half_width(m: usize) -> usize {
    m / 2 + 1
}

/// Multiplicity of column `v` in the full plane: 1 for the self-conjugate
/// columns (`v = 0`, and `v = m/2` for even `m`), 2 otherwise.
pub fn column_multiplicity(v: usize, m: usize) -> f64 {
    if v == 0 || (m.is_multiple_of(2) && v == m / 2) {
        1.0
    } else {
        2.0
    }
}

/// Forward transform of each `n x m` plane. Returns `(re, im)` half-planes.
pub(crate) fn rfft2(data: &[f64], planes: usize, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let h = half_width(m);
    let row_fft = plan(m, false);
    let col_fft = plan(n, false);
    let scale = 1.0 / (n * m) as f64;
    let mut re = vec![0.0; planes * n * h];
    let mut im = vec![0.0; planes * n * h];

    let mut half = vec![Complex64::default(); n * h];
    let mut row = vec![Complex64::default(); m];
    let mut col = vec![Complex64::default(); n];
    for p in 0..planes {
        let plane = &data[p * n * m..(p + 1) * n * m];
        for x in 0..n {
            for (y, c) in row.iter_mut().enumerate() {
                *c = Complex64::new(plane[x * m + y], 0.0);
            }
            row_fft.process(&mut row);
            half[x * h..(x + 1) * h].copy_from_slice(&row[..h]);
        }
        for v in 0..h {
            for (u, c) in col.iter_mut().enumerate() {
                *c = half[u * h + v];
            }
            col_fft.process(&mut col);
            for (u, c) in col.iter().enumerate() {
                let idx = p * n * h + u * h + v;
                re[idx] = c.re * scale;
                im[idx] = c.im * scale;
            }
        }
    }
    (re, im)
}

/// Inverse transform of each half-plane.
///
/// The self-conjugate columns contribute only their real projection after
/// the inverse along the first axis, so any half-plane input maps to a real
/// image: `x(p,q) = sum_{u, v<h} c_v Re(F(u,v) e^{2 pi i (pu/n + qv/m)})`.
pub(crate) fn irfft2(re: &[f64], im: &[f64], planes: usize, n: usize, m: usize) -> Vec<f64> {
    let h = half_width(m);
    let row_fft = plan(m, true);
    let col_fft = plan(n, true);
    let mut out = vec![0.0; planes * n * m];

    let mut half = vec![Complex64::default(); n * h];
    let mut col = vec![Complex64::default(); n];
    let mut row = vec![Complex64::default(); m];
    for p in 0..planes {
        let base = p * n * h;
        for v in 0..h {
            for (u, c) in col.iter_mut().enumerate() {
                *c = Complex64::new(re[base + u * h + v], im[base + u * h + v]);
            }
            col_fft.process(&mut col);
            for (u, c) in col.iter().enumerate() {
                half[u * h + v] = *c;
            }
        }
        for x in 0..n {
            let g = &half[x * h..(x + 1) * h];
            for (v, slot) in row.iter_mut().enumerate() {
                *slot = if v < h { g[v] } else { g[m - v].conj() };
            }
            row[0] = Complex64::new(row[0].re, 0.0);
            if m.is_multiple_of(2) {
                row[m / 2] = Complex64::new(row[m / 2].re, 0.0);
            }
            row_fft.process(&mut row);
            let dst = &mut out[p * n * m + x * m..p * n * m + (x + 1) * m];
            for (d, c) in dst.iter_mut().zip(&row) {
                *d = c.re;
            }
        }
    }
    out
}
