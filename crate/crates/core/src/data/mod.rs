//! Synthetic datasets, corruption operators and image IO.
//!
//! The band datasets separate signal and corruption in frequency: targets
//! depend only on a low-pass disk of radius `signal_radius`, while the
//! corruption lives in the annulus `noise_band`. A global filter that passes
//! the disk and blocks the annulus is therefore optimal by construction.
//!
//! Randomness comes from xoshiro256++ seeded through SplitMix64
//! (`0x9E3779B97F4A7C15`, `0xBF58476D1CE4E5B9`, `0x94D049BB133111EB`).
//! Sample `i` uses the seed [`derive_seed`]`(seed, i)`.

mod pgm;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{fft2_real, ifft2_real, radius};
use crate::tensor::Tensor;

pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm};

pub type Rng64 = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-item seed from a base seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> Rng64 {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTask {
    Segmentation,
    Classification,
    Denoising,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Binary `[1, n, m]` mask.
    Mask(Tensor),
    Class(usize),
    /// Clean `[C, n, m]` target image.
    Clean(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, n, m]` in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDatasetSpec {
    pub count: usize,
    pub extents: (usize, usize),
    /// Cutoff radius of the signal disk, in cycles per image.
    pub signal_radius: f64,
    /// Inner and outer radius of the noise annulus.
    pub noise_band: (f64, f64),
    /// Standard deviation of the band-limited noise.
    pub noise_sigma: f64,
    pub task: DataTask,
    pub seed: u64,
}

impl BandDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.extents;
        if n < 2 || m < 2 {
            return Err(Error::Validation(format!("extents {n}x{m} too small")));
        }
        let nyquist = (n.min(m) / 2) as f64;
        let (r1, r2) = self.noise_band;
        if !(0.0 < self.signal_radius && self.signal_radius < r1 && r1 < r2 && r2 <= nyquist) {
            return Err(Error::Validation(format!(
                "need 0 < signal radius {} < {r1} < {r2} <= Nyquist radius {nyquist}",
                self.signal_radius
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Validation("noise sigma must be non-negative".into()));
        }
        if self.count == 0 {
            return Err(Error::Validation("dataset count must be positive".into()));
        }
        Ok(())
    }
}

fn white_noise(n: usize, m: usize, rng: &mut Rng64) -> Tensor {
    let data = (0..n * m)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(vec![1, n, m], data)
}

/// Keeps only frequencies whose radius satisfies `keep`.
fn band_pass(field: &Tensor, keep: impl Fn(f64) -> bool) -> Result<Tensor> {
    let n = field.shape()[1];
    let mut spec = fft2_real(field)?;
    let h = spec.half_width();
    for u in 0..n {
        for v in 0..h {
            if !keep(radius(u, v, n)) {
                let i = u * h + v;
                spec.re_mut().data_mut()[i] = 0.0;
                spec.im_mut().data_mut()[i] = 0.0;
            }
        }
    }
    ifft2_real(&spec)
}

/// Low-pass signal in `[0, 1]`: white noise limited to the disk `r <= radius`,
/// min-max rescaled.
pub fn low_pass_signal(n: usize, m: usize, radius: f64, rng: &mut Rng64) -> Result<Tensor> {
    let smooth = band_pass(&white_noise(n, m, rng), |r| r <= radius)?;
    let lo = smooth.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(smooth.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }))
}

/// Zero-mean noise supported on `r1 <= r <= r2`, rescaled to standard
/// deviation `sigma`.
pub fn band_limited_noise(
    n: usize,
    m: usize,
    band: (f64, f64),
    sigma: f64,
    rng: &mut Rng64,
) -> Result<Tensor> {
    let field = band_pass(&white_noise(n, m, rng), |r| r >= band.0 && r <= band.1)?;
    let mean = field.mean();
    let std =
        (field.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64).sqrt();
    Ok(field.map(|v| if std > 0.0 { v * sigma / std } else { 0.0 }))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Generates one band sample with its own RNG stream.
pub fn gen_band_sample(spec: &BandDatasetSpec, index: usize) -> Result<Sample> {
    let (n, m) = spec.extents;
    let mut rng = rng_from_seed(derive_seed(spec.seed, index as u64));
    let signal = low_pass_signal(n, m, spec.signal_radius, &mut rng)?;
    let image = if spec.noise_sigma > 0.0 {
        let noise = band_limited_noise(n, m, spec.noise_band, spec.noise_sigma, &mut rng)?;
        let data = signal
            .data()
            .iter()
            .zip(noise.data())
            .map(|(s, e)| (s + e).clamp(0.0, 1.0))
            .collect();
        Tensor::from_parts(signal.shape().to_vec(), data)
    } else {
        signal.clone()
    };
    let label = match spec.task {
        DataTask::Segmentation => {
            let med = median(signal.data());
            Label::Mask(signal.map(|v| if v > med { 1.0 } else { 0.0 }))
        }
        DataTask::Classification => {
            let top: f64 = signal.data()[..(n / 2) * m].iter().sum::<f64>() / ((n / 2) * m) as f64;
            let bottom: f64 =
                signal.data()[(n / 2) * m..].iter().sum::<f64>() / ((n - n / 2) * m) as f64;
            Label::Class(usize::from(top > bottom))
        }
        DataTask::Denoising => Label::Clean(signal),
    };
    Ok(Sample { image, label })
}

pub fn gen_band_dataset(spec: &BandDatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| gen_band_sample(spec, i)).collect()
}

/// Adds `N(0, sigma^2)` per pixel and clips to `[0, 1]`.
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::Validation(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = rng_from_seed(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + sigma * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Sets the rectangle `[top, top+h) x [left, left+w)` (clipped to the image)
/// of every plane to `fill`.
pub fn erase_rectangle(
    image: &Tensor,
    top: i64,
    left: i64,
    h: i64,
    w: i64,
    fill: f64,
) -> Result<Tensor> {
    if h < 1 || w < 1 {
        return Err(Error::Validation(format!(
            "rectangle {h}x{w} must be at least 1x1"
        )));
    }
    let s = image.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!(
            "erase_rectangle needs an image, got {s:?}"
        )));
    }
    let (n, m) = (s[s.len() - 2] as i64, s[s.len() - 1] as i64);
    let (y0, y1) = (top.clamp(0, n), (top + h).clamp(0, n));
    let (x0, x1) = (left.clamp(0, m), (left + w).clamp(0, m));
    let mut out = image.clone();
    let plane = (n * m) as usize;
    for p in out.data_mut().chunks_mut(plane) {
        for y in y0..y1 {
            for x in x0..x1 {
                p[(y * m + x) as usize] = fill;
            }
        }
    }
    Ok(out)
}

/// Loads `images/NNNN.pgm` with either `labels/NNNN.pgm` masks
/// (segmentation), a `labels.csv` of `name,class` rows (classification), or
/// nothing (denoising: the image is its own clean target).
pub fn load_directory(dir: impl AsRef<Path>, task: DataTask) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let img_dir = dir.join("images");
    let mut names: Vec<String> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".pgm").map(str::to_owned)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!(
            "no .pgm images under {}",
            img_dir.display()
        )));
    }

    let classes = if task == DataTask::Classification {
        let path = dir.join("labels.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut map = std::collections::HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("name")) {
                continue;
            }
            let (name, class) = line.split_once(',').ok_or_else(|| {
                Error::Format(format!(
                    "labels.csv line {}: expected name,class",
                    lineno + 1
                ))
            })?;
            let class: usize = class
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("labels.csv line {}: bad class", lineno + 1)))?;
            map.insert(name.trim().trim_end_matches(".pgm").to_owned(), class);
        }
        Some(map)
    } else {
        None
    };

    let mut out = Vec::with_capacity(names.len());
    let mut extents = None;
    for name in names {
        let image = read_pgm(img_dir.join(format!("{name}.pgm")))?;
        if *extents.get_or_insert(image.shape().to_vec()) != image.shape() {
            return Err(Error::Shape(format!("{name}.pgm has different extents")));
        }
        let label = match task {
            DataTask::Segmentation => {
                let mask = read_pgm(dir.join("labels").join(format!("{name}.pgm")))?;
                if mask.shape() != image.shape() {
                    return Err(Error::Shape(format!(
                        "mask {name}.pgm does not match its image"
                    )));
                }
                Label::Mask(mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
            }
            DataTask::Classification => Label::Class(
                *classes
                    .as_ref()
                    .unwrap()
                    .get(&name)
                    .ok_or_else(|| Error::Format(format!("no label for {name}")))?,
            ),
            DataTask::Denoising => Label::Clean(image.clone()),
        };
        out.push(Sample { image, label });
    }
    Ok(out)
}
