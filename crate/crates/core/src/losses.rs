//! Loss recipes and evaluation metrics.
//!
//! Losses take graph variables and return scalar variables; metrics work on
//! plain tensors.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SEG_DICE_WEIGHT: f64 = 0.6;
const SEG_BCE_WEIGHT: f64 = 0.4;
const RESTORE_SSIM_WEIGHT: f64 = 0.8;
const RESTORE_L1_WEIGHT: f64 = 0.2;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Smoothed overlap `(2 sum(p t) + s) / (sum p + sum t + s)`.
pub fn dice(pred: &Tensor, target: &Tensor, smooth: f64) -> Result<f64> {
    same_shape(pred.shape(), target.shape(), "dice")?;
    if smooth <= 0.0 {
        return Err(Error::Validation("dice smoothing must be positive".into()));
    }
    let inter: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| p * t)
        .sum();
    Ok((2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth))
}

fn dice_var<'g>(pred: Var<'g>, target: Var<'g>, smooth: f64) -> Result<Var<'g>> {
    let inter = pred.mul(target)?.sum()?;
    let num = inter.mul_scalar(2.0)?.add_scalar(smooth)?;
    let den = pred.sum()?.add(target.sum()?)?.add_scalar(smooth)?;
    num.div(den)
}

/// `0.6 (1 - dice(sigmoid(z), t, 1)) + 0.4 mean(BCE(z, t))`.
pub fn combined_seg_loss<'g>(logits: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    same_shape(&logits.shape(), target.shape(), "combined_seg_loss")?;
    let g = logits.graph();
    let t = g.constant(target.clone());
    let probs = logits.sigmoid()?;
    let dice_term = dice_var(probs, t, 1.0)?.rsub_scalar(1.0)?;
    // BCE with logits: softplus(z) - t z
    let bce = logits.softplus()?.sub(logits.mul(t)?)?.mean()?;
    dice_term
        .mul_scalar(SEG_DICE_WEIGHT)?
        .add(bce.mul_scalar(SEG_BCE_WEIGHT)?)
}

/// Per-class loss weights, normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation(format!(
                "class weights must be positive, got {raw:?}"
            )));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Ok(ClassWeights(raw.into_iter().map(|w| w / mean).collect()))
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    /// Inverse class frequency over `labels`; absent classes count as one
    /// occurrence.
    pub fn inverse_frequency(labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Validation(format!("label {l} out of range")))? += 1;
        }
        Self::new(counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `-sum_b w_{t_b} log softmax(z_b)_{t_b} / sum_b w_{t_b}`.
pub fn weighted_cross_entropy<'g>(
    logits: Var<'g>,
    target: &[usize],
    weights: &ClassWeights,
) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != target.len() {
        return Err(Error::Shape(format!(
            "weighted_cross_entropy logits {s:?} for {} targets",
            target.len()
        )));
    }
    let k = s[1];
    if weights.0.len() != k {
        return Err(Error::Shape(format!(
            "{} class weights for {k} classes",
            weights.0.len()
        )));
    }
    let mut pick = vec![0.0; s[0] * k];
    let mut total = 0.0;
    for (b, &t) in target.iter().enumerate() {
        if t >= k {
            return Err(Error::Validation(format!(
                "class index {t} out of range 0..{k}"
            )));
        }
        pick[b * k + t] = weights.0[t];
        total += weights.0[t];
    }
    let mask = logits.graph().constant(Tensor::from_parts(s, pick));
    logits
        .log_softmax()?
        .mul(mask)?
        .sum()?
        .mul_scalar(-1.0 / total)
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is positive.
pub fn f1_score(pred: &[usize], target: &[usize], positive: usize) -> f64 {
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    let den = 2 * tp + fp + fne;
    if den == 0 {
        0.0
    } else {
        2.0 * tp as f64 / den as f64
    }
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a.shape(), b.shape(), "psnr")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Normalized 1-D Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Checks the extent requirement `min(H, W) >= 11 * 2^(scales-1)`.
pub fn check_ssim_extents(h: usize, w: usize, scales: usize) -> Result<()> {
    if !(1..=5).contains(&scales) {
        return Err(Error::Config(format!(
            "ms-ssim scales must be in 1..=5, got {scales}"
        )));
    }
    let need = SSIM_WINDOW << (scales - 1);
    if h < need || w < need {
        return Err(Error::Extent(format!(
            "{scales}-scale ssim needs extents >= {need}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Largest scale count (at most 5) valid for `h x w` images.
pub fn max_ssim_scales(h: usize, w: usize) -> usize {
    (1..=5)
        .rev()
        .find(|&s| check_ssim_extents(h, w, s).is_ok())
        .unwrap_or(1)
}

fn as_batch(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [h, w] => Ok([1, 1, h, w]),
        [c, h, w] => Ok([1, c, h, w]),
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::Shape(format!(
            "expected an image, got shape {shape:?}"
        ))),
    }
}

/// Multi-scale structural similarity of two images (`[H,W]`, `[C,H,W]` or
/// `[B,C,H,W]`), averaged over every channel and batch item.
pub fn ssim_ms_var<'g>(a: Var<'g>, b: Var<'g>, scales: usize) -> Result<Var<'g>> {
    same_shape(&a.shape(), &b.shape(), "ssim")?;
    let [bn, c, h, w] = as_batch(&a.shape())?;
    check_ssim_extents(h, w, scales)?;
    let g = a.graph();
    let win = gaussian_window();
    let kernel: Vec<f64> = win
        .iter()
        .flat_map(|wy| win.iter().map(move |wx| wy * wx))
        .collect();
    let kernel = g.constant(Tensor::from_parts(
        vec![1, 1, SSIM_WINDOW, SSIM_WINDOW],
        kernel,
    ));
    let bias = g.constant(Tensor::zeros(&[1]));
    let filt = |x: Var<'g>| x.conv2d(kernel, bias, 1, 0);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);

    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();

    let mut x = a.reshape(&[bn * c, 1, h, w])?;
    let mut y = b.reshape(&[bn * c, 1, h, w])?;
    let mut result: Option<Var<'g>> = None;
    for (j, wj) in weights.iter().enumerate() {
        if j > 0 {
            x = x.avgpool2()?;
            y = y.avgpool2()?;
        }
        let mu_x = filt(x)?;
        let mu_y = filt(y)?;
        let mu_xx = mu_x.square()?;
        let mu_yy = mu_y.square()?;
        let mu_xy = mu_x.mul(mu_y)?;
        let sxx = filt(x.square()?)?.sub(mu_xx)?;
        let syy = filt(y.square()?)?.sub(mu_yy)?;
        let sxy = filt(x.mul(y)?)?.sub(mu_xy)?;
        let cs = sxy
            .mul_scalar(2.0)?
            .add_scalar(c2)?
            .div(sxx.add(syy)?.add_scalar(c2)?)?;
        let term = if j + 1 == scales {
            let lum = mu_xy
                .mul_scalar(2.0)?
                .add_scalar(c1)?
                .div(mu_xx.add(mu_yy)?.add_scalar(c1)?)?;
            lum.mul(cs)?.mean()?
        } else {
            cs.mean()?
        };
        let term = if scales == 1 {
            term
        } else {
            term.unary(crate::autograd::UnaryKind::Powf(wj / wsum))?
        };
        result = Some(match result {
            None => term,
            Some(acc) => acc.mul(term)?,
        });
    }
    Ok(result.expect("at least one scale"))
}

/// Value form of [`ssim_ms_var`].
pub fn ssim_ms(a: &Tensor, b: &Tensor, scales: usize) -> Result<f64> {
    let g = Graph::new();
    let v = ssim_ms_var(g.constant(a.clone()), g.constant(b.clone()), scales)?;
    Ok(v.item())
}

/// `0.8 (1 - ms_ssim(pred, target)) + 0.2 mean|pred - target|`.
pub fn combined_restoration_loss<'g>(
    pred: Var<'g>,
    target: &Tensor,
    scales: usize,
) -> Result<Var<'g>> {
    same_shape(&pred.shape(), target.shape(), "combined_restoration_loss")?;
    let t = pred.graph().constant(target.clone());
    let ssim = ssim_ms_var(pred, t, scales)?.rsub_scalar(1.0)?;
    let l1 = pred.sub(t)?.abs()?.mean()?;
    ssim.mul_scalar(RESTORE_SSIM_WEIGHT)?
        .add(l1.mul_scalar(RESTORE_L1_WEIGHT)?)
}

pub fn mse_loss<'g>(pred: Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    same_shape(&pred.shape(), target.shape(), "mse_loss")?;
    let t = pred.graph().constant(target.clone());
    pred.sub(t)?.square()?.mean()
}

/// Mean per-sample hard Dice of `logits > 0` against `[B, 1, H, W]` masks.
pub fn mean_dice_from_logits(logits: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(logits.shape(), target.shape(), "mean_dice_from_logits")?;
    let b = logits.shape()[0];
    let mut total = 0.0;
    for i in 0..b {
        let pred = logits
            .slice_outer(i)
            .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        total += dice(&pred, &target.slice_outer(i), 1.0)?;
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let ones = t(&[4], &[1.0; 4]);
        assert_eq!(dice(&ones, &ones, 1.0).unwrap(), 1.0);
        let a = t(&[8], &[1., 1., 1., 1., 0., 0., 0., 0.]);
        let b = t(&[8], &[0., 0., 0., 0., 1., 1., 1., 1.]);
        assert!((dice(&a, &b, 1.0).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        let c = t(&[6], &[1., 1., 1., 1., 0., 0.]);
        let d = t(&[6], &[0., 0., 1., 1., 1., 1.]);
        assert!((dice(&c, &d, 1.0).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert!(dice(&a, &c, 1.0).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1], 1), 1.0);
        // TP=1, FP=1, FN=1
        assert_eq!(f1_score(&[1, 1, 0], &[1, 0, 1], 1), 0.5);
        assert_eq!(f1_score(&[0, 0], &[0, 0], 1), 0.0);
    }

    #[test]
    fn psnr_examples() {
        let a = t(&[4], &[0.2; 4]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = t(&[4], &[0.3; 4]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = t(&[4], &[0.0; 4]);
        let o = t(&[4], &[1.0; 4]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &t(&[2], &[0.0; 2])).is_err());
    }

    #[test]
    fn class_weights_normalize_to_mean_one() {
        let w = ClassWeights::new(vec![2.0, 2.0 / 3.0]).unwrap();
        assert!((w.values()[0] - 1.5).abs() < 1e-15);
        assert!((w.values()[1] - 0.5).abs() < 1e-15);
        let inv = ClassWeights::inverse_frequency(&[0, 0, 0, 1], 2).unwrap();
        assert!((inv.values().iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-15);
        assert!(inv.values()[1] > inv.values()[0]);
    }

    #[test]
    fn weighted_ce_examples() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let l = weighted_cross_entropy(z, &[0], &ClassWeights::uniform(2)).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);

        let conf = g.constant(t(&[1, 2], &[20.0, -20.0]));
        let l = weighted_cross_entropy(conf, &[0], &ClassWeights::uniform(2)).unwrap();
        assert!(l.item() < 1e-8);

        let w = ClassWeights::new(vec![2.0, 2.0 / 3.0]).unwrap();
        let l = weighted_cross_entropy(z, &[0], &w).unwrap();
        // 1.5 ln2 / 1.5
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);

        assert!(weighted_cross_entropy(z, &[2], &ClassWeights::uniform(2)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img = Tensor::new(
            &[1, 24, 24],
            (0..576).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        )
        .unwrap();
        assert_eq!(ssim_ms(&img, &img, 1).unwrap(), 1.0);
        assert_eq!(ssim_ms(&img, &img, 2).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor::zeros(&[1, 16, 16]);
        let b = Tensor::ones(&[1, 16, 16]);
        let c1 = SSIM_K1 * SSIM_K1;
        let v = ssim_ms(&a, &b, 1).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn ssim_extent_checks() {
        let a = Tensor::zeros(&[1, 10, 16]);
        assert!(matches!(ssim_ms(&a, &a, 1), Err(Error::Extent(_))));
        let a = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(ssim_ms(&a, &a, 2), Err(Error::Extent(_))));
        assert!(matches!(ssim_ms(&a, &a, 0), Err(Error::Config(_))));
        assert_eq!(max_ssim_scales(32, 32), 2);
        assert_eq!(max_ssim_scales(256, 256), 5);
    }

    #[test]
    fn restoration_loss_is_zero_on_perfect_prediction() {
        let g = Graph::new();
        let img = Tensor::new(
            &[1, 1, 16, 16],
            (0..256).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let l = combined_restoration_loss(g.constant(img.clone()), &img, 1).unwrap();
        assert_eq!(l.item(), 0.0);
    }
}
