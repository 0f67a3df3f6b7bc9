//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use gafl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Direct `O(n^2 m^2)` evaluation of `(1/nm) sum I(x,y) e^{-2 pi i (xu/n + yv/m)}`
/// on columns `0..=m/2` of every channel. Returns `(re, im)` in `[C, n, m/2+1]` order.
pub fn dft_half(image: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = image.shape();
    let (c, n, m) = (s[0], s[1], s[2]);
    let h = m / 2 + 1;
    let mut re = vec![0.0; c * n * h];
    let mut im = vec![0.0; c * n * h];
    let tau = 2.0 * std::f64::consts::PI;
    for ch in 0..c {
        for u in 0..n {
            for v in 0..h {
                let (mut a, mut b) = (0.0, 0.0);
                for x in 0..n {
                    for y in 0..m {
                        let p = image.data()[(ch * n + x) * m + y];
                        // reduce the phase index mod n*m before scaling to keep it small
                        let k = ((x * u * m + y * v * n) % (n * m)) as f64;
                        let ang = -tau * k / (n * m) as f64;
                        a += p * ang.cos();
                        b += p * ang.sin();
                    }
                }
                let i = (ch * n + u) * h + v;
                re[i] = a / (n * m) as f64;
                im[i] = b / (n * m) as f64;
            }
        }
    }
    (re, im)
}

/// Full-plane complex inverse `sum F(u,v) e^{+2 pi i (xu/n + yv/m)}` of a
/// single `n x m` plane. Returns `(re, im)`.
pub fn idft_full(re: &[f64], im: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let tau = 2.0 * std::f64::consts::PI;
    let mut out_re = vec![0.0; n * m];
    let mut out_im = vec![0.0; n * m];
    for x in 0..n {
        for y in 0..m {
            let (mut a, mut b) = (0.0, 0.0);
            for u in 0..n {
                for v in 0..m {
                    let k = ((x * u * m + y * v * n) % (n * m)) as f64;
                    let ang = tau * k / (n * m) as f64;
                    let (fr, fi) = (re[u * m + v], im[u * m + v]);
                    a += fr * ang.cos() - fi * ang.sin();
                    b += fr * ang.sin() + fi * ang.cos();
                }
            }
            out_re[x * m + y] = a;
            out_im[x * m + y] = b;
        }
    }
    (out_re, out_im)
}

/// Gaussian weights of an 11-tap window with sigma 1.5, summing to one.
fn window() -> Vec<f64> {
    let raw: Vec<f64> = (0..11)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-d * d / (2.0 * 1.5 * 1.5)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Single-scale SSIM of two `h x w` planes computed window by window.
pub fn ssim_window_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    ssim_parts(a, b, h, w).0
}

/// Mean over windows of `(luminance * contrast-structure, contrast-structure)`.
pub fn ssim_parts(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let g = window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut total_cs = 0.0;
    let mut count = 0usize;
    for top in 0..=h - 11 {
        for left in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j];
                    let x = a[(top + i) * w + left + j];
                    let y = b[(top + i) * w + left + j];
                    mx += k * x;
                    my += k * y;
                    sxx += k * x * x;
                    syy += k * y * y;
                    sxy += k * x * y;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            total += cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            total_cs += cs;
            count += 1;
        }
    }
    (total / count as f64, total_cs / count as f64)
}

/// 2x2 mean pooling of an `h x w` plane (even extents).
pub fn pool2(a: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w / 4);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (a[i] + a[i + 1] + a[i + w] + a[i + w + 1]));
        }
    }
    out
}

/// Multi-scale SSIM built from [`ssim_parts`]: contrast-structure terms at
/// the finer scales, full SSIM at the coarsest, weights renormalized.
pub fn ms_ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, scales: usize) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let total: f64 = weights[..scales].iter().sum();
    let (mut x, mut y, mut hh, mut ww) = (a.to_vec(), b.to_vec(), h, w);
    let mut out = 1.0;
    for (j, weight) in weights.iter().take(scales).enumerate() {
        if j > 0 {
            x = pool2(&x, hh, ww);
            y = pool2(&y, hh, ww);
            hh /= 2;
            ww /= 2;
        }
        let (full, cs) = ssim_parts(&x, &y, hh, ww);
        let term = if j + 1 == scales { full } else { cs };
        out *= if scales == 1 {
            term
        } else {
            term.powf(weight / total)
        };
    }
    out
}
