//! 2-D Fourier transforms of real multi-channel images.
//!
//! The forward transform is
//! `F(u,v) = sum_{x,y} I(x,y)/(nm) * exp(-2 pi i (xu/n + yv/m))`, applied to
//! each channel separately. Because `F(n-u, m-v) = conj(F(u,v))` for real
//! input, only columns `0..=m/2` are stored ([`HalfSpectrum`]).
//!
//! Inside a computation graph the same transforms are available as
//! [`Var::rfft2`](crate::autograd::Var::rfft2) and
//! [`Var::irfft2`](crate::autograd::Var::irfft2).

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::{column_multiplicity, half_width};

/// Half-plane complex spectrum of a `[C, n, m]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpectrum {
    re: Tensor,
    im: Tensor,
    full_width: usize,
}

/// `|F|` on the half plane; all entries are non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMagnitude(pub Tensor);

impl HalfSpectrum {
    /// Wraps real/imaginary half-planes of shape `[C, n, full_width/2 + 1]`.
    pub fn new(re: Tensor, im: Tensor, full_width: usize) -> Result<Self> {
        if re.shape() != im.shape() || re.shape().len() != 3 {
            return Err(Error::Shape(format!(
                "half spectrum needs matching [C, n, h] parts, got {:?} and {:?}",
                re.shape(),
                im.shape()
            )));
        }
        if full_width < 2 || re.shape()[1] < 2 || half_width(full_width) != re.shape()[2] {
            return Err(Error::Extent(format!(
                "half width {} incompatible with full width {full_width}",
                re.shape()[2]
            )));
        }
        Ok(HalfSpectrum { re, im, full_width })
    }

    pub fn zeros(channels: usize, n: usize, m: usize) -> Self {
        let shape = [channels, n, half_width(m)];
        HalfSpectrum {
            re: Tensor::zeros(&shape),
            im: Tensor::zeros(&shape),
            full_width: m,
        }
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn half_width(&self) -> usize {
        self.re.shape()[2]
    }

    pub fn full_width(&self) -> usize {
        self.full_width
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut Tensor {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut Tensor {
        &mut self.im
    }

    /// Value at `(c, u, v)` on the full plane, mirroring when `v` lies
    /// outside the stored half.
    pub fn full_at(&self, c: usize, u: usize, v: usize) -> (f64, f64) {
        let (n, m, h) = (self.height(), self.full_width, self.half_width());
        let (uu, vv, conj) = if v < h {
            (u, v, false)
        } else {
            ((n - u) % n, m - v, true)
        };
        let i = (c * n + uu) * h + vv;
        let (r, im) = (self.re.data()[i], self.im.data()[i]);
        if conj {
            (r, -im)
        } else {
            (r, im)
        }
    }

    /// Checks the self-conjugacy of columns `0` and (for even `m`) `m/2`,
    /// relative to the largest modulus.
    pub fn validate(&self) -> Result<()> {
        let (c, n, m, h) = (
            self.channels(),
            self.height(),
            self.full_width,
            self.half_width(),
        );
        let scale = self
            .re
            .data()
            .iter()
            .zip(self.im.data())
            .fold(0.0f64, |acc, (a, b)| acc.max(a.hypot(*b)));
        let tol = 1e-9 * scale + 1e-300;
        let mut cols = vec![0];
        if m % 2 == 0 {
            cols.push(m / 2);
        }
        for ch in 0..c {
            for &v in &cols {
                for u in 0..n {
                    let mirror = (n - u) % n;
                    let a = (ch * n + u) * h + v;
                    let b = (ch * n + mirror) * h + v;
                    let dre = (self.re.data()[a] - self.re.data()[b]).abs();
                    let dim = (self.im.data()[a] + self.im.data()[b]).abs();
                    if dre > tol || dim > tol {
                        return Err(Error::Validation(format!(
                            "column {v} is not self-conjugate at channel {ch}, row {u}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, n, m] image, got {s:?}")));
    }
    if s[1] < 2 || s[2] < 2 {
        return Err(Error::Extent(format!(
            "image extents must be >= 2, got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Forward transform of a `[C, n, m]` image, normalized by `1/(nm)`.
pub fn fft2_real(image: &Tensor) -> Result<HalfSpectrum> {
    let (c, n, m) = image_dims(image)?;
    let (re, im) = kernels::rfft2(image.data(), c, n, m);
    let shape = vec![c, n, half_width(m)];
    Ok(HalfSpectrum {
        re: Tensor::from_parts(shape.clone(), re),
        im: Tensor::from_parts(shape, im),
        full_width: m,
    })
}

/// Inverse transform (no normalization factor). Rejects spectra whose
/// self-conjugate columns are inconsistent.
pub fn ifft2_real(spectrum: &HalfSpectrum) -> Result<Tensor> {
    spectrum.validate()?;
    Ok(inverse_unchecked(spectrum))
}

fn inverse_unchecked(spectrum: &HalfSpectrum) -> Tensor {
    let (c, n, m) = (spectrum.channels(), spectrum.height(), spectrum.full_width);
    let data = kernels::irfft2(spectrum.re.data(), spectrum.im.data(), c, n, m);
    Tensor::from_parts(vec![c, n, m], data)
}

/// Adjoint of [`fft2_real`] under the half-plane inner product that counts
/// non-self-conjugate columns twice (see [`half_inner`]).
pub fn fft2_real_adjoint(spectrum: &HalfSpectrum) -> Tensor {
    let (n, m) = (spectrum.height(), spectrum.full_width);
    inverse_unchecked(spectrum).map(|v| v / (n * m) as f64)
}

/// `sum c_v (Re a Re b + Im a Im b)` where `c_v` is the column multiplicity;
/// equals the real inner product over the full mirrored plane.
pub fn half_inner(a: &HalfSpectrum, b: &HalfSpectrum) -> f64 {
    let (h, m) = (a.half_width(), a.full_width);
    (0..a.re.len())
        .map(|i| {
            column_multiplicity(i % h, m)
                * (a.re.data()[i] * b.re.data()[i] + a.im.data()[i] * b.im.data()[i])
        })
        .sum()
}

pub fn magnitude(spectrum: &HalfSpectrum) -> SpectrumMagnitude {
    let data = spectrum
        .re
        .data()
        .iter()
        .zip(spectrum.im.data())
        .map(|(a, b)| a.hypot(*b))
        .collect();
    SpectrumMagnitude(Tensor::from_parts(spectrum.re.shape().to_vec(), data))
}

/// `|sum |F|^2 - (1/(nm)) sum I^2|` per channel over the full plane, summed
/// over channels.
pub fn parseval_residual(image: &Tensor) -> Result<f64> {
    let (c, n, m) = image_dims(image)?;
    let spec = fft2_real(image)?;
    let h = spec.half_width();
    let mut total = 0.0;
    for ch in 0..c {
        let mut spectral = 0.0;
        for u in 0..n {
            for v in 0..h {
                let i = (ch * n + u) * h + v;
                let e = spec.re.data()[i].powi(2) + spec.im.data()[i].powi(2);
                spectral += column_multiplicity(v, m) * e;
            }
        }
        let spatial: f64 = image.data()[ch * n * m..(ch + 1) * n * m]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / (n * m) as f64;
        total += (spectral - spatial).abs();
    }
    Ok(total)
}

/// Signed frequency index of row `u` for height `n`.
pub fn signed_frequency(u: usize, n: usize) -> f64 {
    if u <= n / 2 {
        u as f64
    } else {
        u as f64 - n as f64
    }
}

/// Radius (in cycles) of half-plane entry `(u, v)`.
pub fn radius(u: usize, v: usize, n: usize) -> f64 {
    signed_frequency(u, n).hypot(v as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_only_dc() {
        let img = Tensor::full(&[1, 2, 2], 0.7);
        let s = fft2_real(&img).unwrap();
        assert!((s.re().data()[0] - 0.7).abs() < 1e-15);
        for i in 1..s.re().len() {
            assert!(s.re().data()[i].abs() < 1e-15 && s.im().data()[i].abs() < 1e-15);
        }
    }

    #[test]
    fn impulse_spreads_evenly() {
        let img = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = fft2_real(&img).unwrap();
        for i in 0..s.re().len() {
            assert!((s.re().data()[i] - 0.25).abs() < 1e-15);
            assert!(s.im().data()[i].abs() < 1e-15);
        }
    }

    #[test]
    fn zero_and_dc_inverse() {
        let z = HalfSpectrum::zeros(1, 4, 5);
        assert!(ifft2_real(&z).unwrap().data().iter().all(|&v| v == 0.0));
        let mut dc = HalfSpectrum::zeros(2, 4, 6);
        dc.re_mut().data_mut()[0] = 1.5;
        let img = ifft2_real(&dc).unwrap();
        assert!(img.data()[..24].iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(img.data()[24..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_rejects_broken_self_conjugacy() {
        let mut s = HalfSpectrum::zeros(1, 4, 4);
        s.im_mut().data_mut()[0] = 1.0;
        assert!(matches!(ifft2_real(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn magnitude_examples() {
        let re = Tensor::new(&[1, 2, 2], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let im = Tensor::new(&[1, 2, 2], vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let s = HalfSpectrum::new(re, im, 2).unwrap();
        let m = magnitude(&s);
        assert_eq!(m.0.data()[0], 5.0);
        assert_eq!(m.0.data()[1], 0.0);
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(matches!(
            fft2_real(&Tensor::ones(&[1, 1, 4])),
            Err(Error::Extent(_))
        ));
    }

    #[test]
    fn parseval_closed_forms() {
        assert_eq!(parseval_residual(&Tensor::zeros(&[1, 3, 3])).unwrap(), 0.0);
        assert!(parseval_residual(&Tensor::full(&[1, 2, 2], 2.5)).unwrap() < 1e-15);
    }
}
