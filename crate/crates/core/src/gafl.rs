//! Global adaptive filtering layer.
//!
//! The layer transforms each channel of the input to the frequency domain,
//! replaces the magnitude `M = |F|` with a learned elementwise function of
//! it while keeping the phase, and transforms back:
//!
//! ```text
//! F  = fft2(I);  M = |F|
//! S  = filter(relu(W), M)          (family x domain, see FilterConfig)
//! F' = S * F / M                   (0 where M < 1e-12)
//! I' = ifft2(F')
//! ```
//!
//! Weights are stored on the half plane `[C, n, m/2+1]`; mirrored
//! frequencies share a weight. The `Phase` family rotates each frequency by
//! a learned angle instead of touching the magnitude.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::spectral::half_width;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GAFL";
const FORMAT_VERSION: u32 = 1;
const PHASE_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `S = W * D(M)`
    Linear,
    /// `S = exp(W * log(1 + D(M))) - 1`
    General,
    /// `S = W2 * act(W1 * D(M) + B1) + B2`
    Mlp,
    /// Per-frequency rotation by a learned angle.
    Phase,
}

/// Whether the family operates on `M` directly or on `log(1 + M)`, with the
/// result mapped back through `exp(.) - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    Plain,
    Log,
}

/// Activations accepted by the `Mlp` family, in serialization-code order.
pub const MLP_ACTIVATIONS: [UnaryKind; 7] = [
    UnaryKind::Relu,
    UnaryKind::Relu6,
    UnaryKind::Sigmoid,
    UnaryKind::Tanh,
    UnaryKind::Softplus,
    UnaryKind::Swish,
    UnaryKind::Mish,
];

fn default_activation() -> UnaryKind {
    UnaryKind::Relu
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub family: Family,
    #[serde(default)]
    pub domain: Domain,
    #[serde(default = "default_activation")]
    pub activation: UnaryKind,
}

impl FilterConfig {
    pub fn new(family: Family, domain: Domain) -> Result<Self> {
        Self::with_activation(family, domain, UnaryKind::Relu)
    }

    pub fn with_activation(family: Family, domain: Domain, activation: UnaryKind) -> Result<Self> {
        let c = FilterConfig {
            family,
            domain,
            activation,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Phase && self.domain == Domain::Log {
            return Err(Error::Config("the phase family has no log domain".into()));
        }
        if !MLP_ACTIVATIONS.contains(&self.activation) {
            return Err(Error::Config(format!(
                "{:?} is not an activation",
                self.activation
            )));
        }
        Ok(())
    }

    /// Every valid family x domain combination, with relu activation.
    pub fn all() -> Vec<FilterConfig> {
        let mut out = Vec::new();
        for family in [Family::Linear, Family::General, Family::Mlp, Family::Phase] {
            for domain in [Domain::Plain, Domain::Log] {
                if let Ok(c) = FilterConfig::new(family, domain) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn matrix_count(&self) -> usize {
        match self.family {
            Family::Mlp => 4,
            _ => 1,
        }
    }
}

/// Number of trainable scalars the layer adds for `C` channels of `n x m` images.
pub fn param_count(config: &FilterConfig, channels: usize, n: usize, m: usize) -> usize {
    config.matrix_count() * channels * n * half_width(m)
}

/// Trainable state of the layer. For `Mlp` the matrices are
/// `[W1, W2, B1, B2]`; every other family has a single matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterParams {
    config: FilterConfig,
    channels: usize,
    height: usize,
    width: usize,
    matrices: Vec<Tensor>,
}

impl FilterParams {
    /// Parameters that make the layer an exact pass-through (for `Mlp`,
    /// exact with relu-like activations that are the identity on `[0, inf)`).
    pub fn identity(config: FilterConfig, channels: usize, n: usize, m: usize) -> Result<Self> {
        config.validate()?;
        if n < 2 || m < 2 || channels == 0 {
            return Err(Error::Extent(format!(
                "filter needs C >= 1 and n, m >= 2, got C={channels} n={n} m={m}"
            )));
        }
        let shape = [channels, n, half_width(m)];
        let matrices = match config.family {
            Family::Linear | Family::General => vec![Tensor::ones(&shape)],
            Family::Phase => vec![Tensor::zeros(&shape)],
            Family::Mlp => vec![
                Tensor::ones(&shape),
                Tensor::ones(&shape),
                Tensor::zeros(&shape),
                Tensor::zeros(&shape),
            ],
        };
        Ok(FilterParams {
            config,
            channels,
            height: n,
            width: m,
            matrices,
        })
    }

    pub fn from_matrices(
        config: FilterConfig,
        channels: usize,
        n: usize,
        m: usize,
        matrices: Vec<Tensor>,
    ) -> Result<Self> {
        let mut p = Self::identity(config, channels, n, m)?;
        if matrices.len() != p.matrices.len() {
            return Err(Error::Shape(format!(
                "{:?} needs {} matrices, got {}",
                config.family,
                p.matrices.len(),
                matrices.len()
            )));
        }
        for (slot, t) in p.matrices.iter_mut().zip(matrices) {
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "filter matrix shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(p)
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn matrices_mut(&mut self) -> &mut [Tensor] {
        &mut self.matrices
    }

    pub fn param_count(&self) -> usize {
        self.matrices.iter().map(Tensor::len).sum()
    }

    /// Values actually used by the forward pass: `relu(raw)` for magnitude
    /// families, raw angles for `Phase`.
    pub fn effective(&self, index: usize) -> Tensor {
        let raw = &self.matrices[index];
        match self.config.family {
            Family::Phase => raw.clone(),
            _ => raw.map(|v| v.max(0.0)),
        }
    }

    /// Registers every matrix as a trainable leaf.
    pub fn register<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.matrices.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Value-only forward pass over a `[B, C, n, m]` batch.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let weights: Vec<Var> = self
            .matrices
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let x = g.constant(image.clone());
        Ok(forward(&g, &self.config, &weights, x)?.tensor())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let act = MLP_ACTIVATIONS
            .iter()
            .position(|a| *a == self.config.activation)
            .expect("validated activation") as u32;
        let family = match self.config.family {
            Family::Linear => 0u32,
            Family::General => 1,
            Family::Mlp => 2,
            Family::Phase => 3,
        } | (act << 8);
        let domain = match self.config.domain {
            Domain::Plain => 0u32,
            Domain::Log => 1,
        };
        let mut out = Vec::with_capacity(28 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        for field in [
            FORMAT_VERSION,
            family,
            domain,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for t in &self.matrices {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    /// Reads one serialized filter, leaving the reader just past it.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("missing GAFL magic".into()));
        }
        let mut fields = [0u32; 6];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            *f = u32::from_le_bytes(b);
        }
        let [version, family, domain, c, n, m] = fields;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported filter version {version}"
            )));
        }
        let activation = *MLP_ACTIVATIONS
            .get((family >> 8) as usize)
            .ok_or_else(|| Error::Format(format!("bad activation code {}", family >> 8)))?;
        let family = match family & 0xff {
            0 => Family::Linear,
            1 => Family::General,
            2 => Family::Mlp,
            3 => Family::Phase,
            other => return Err(Error::Format(format!("bad family code {other}"))),
        };
        let domain = match domain {
            0 => Domain::Plain,
            1 => Domain::Log,
            other => return Err(Error::Format(format!("bad domain code {other}"))),
        };
        let config = FilterConfig::with_activation(family, domain, activation)?;
        let mut p = Self::identity(config, c as usize, n as usize, m as usize)?;
        for t in p.matrices.iter_mut() {
            for v in t.data_mut() {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated filter payload".into()))
}

/// Graph forward pass of the layer over a `[B, C, n, m]` batch. `weights`
/// are the raw matrices as registered by [`FilterParams::register`].
///
/// Gradients reach the weights through `S` only; the phase factor `F/M` is
/// treated as a constant.
pub fn forward<'g>(
    g: &'g Graph,
    config: &FilterConfig,
    weights: &[Var<'g>],
    image: Var<'g>,
) -> Result<Var<'g>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "filter input must be [B, C, n, m], got {s:?}"
        )));
    }
    if weights.len() != config.matrix_count() {
        return Err(Error::Shape(format!(
            "{:?} needs {} weight matrices, got {}",
            config.family,
            config.matrix_count(),
            weights.len()
        )));
    }
    let (batch, c, n, m) = (s[0], s[1], s[2], s[3]);
    let expected = [c, n, half_width(m)];
    for w in weights {
        if w.shape() != expected {
            return Err(Error::Shape(format!(
                "filter weights {:?} do not match image {s:?}",
                w.shape()
            )));
        }
    }

    let (re, im) = image.rfft2()?;
    if config.family == Family::Phase {
        let angle = weights[0].tile(batch)?;
        let (cos, sin) = (angle.unary(UnaryKind::Cos)?, angle.unary(UnaryKind::Sin)?);
        let new_re = re.mul(cos)?.sub(im.mul(sin)?)?;
        let new_im = re.mul(sin)?.add(im.mul(cos)?)?;
        return new_re.irfft2(new_im, m);
    }

    let mag = re.magnitude(im)?;
    let (phase_re, phase_im) = {
        let (r, i, mv) = (re.tensor(), im.tensor(), mag.tensor());
        let ratio = |num: &Tensor| {
            let data = num
                .data()
                .iter()
                .zip(mv.data())
                .map(|(a, m)| if *m < PHASE_GUARD { 0.0 } else { a / m })
                .collect();
            Tensor::from_parts(num.shape().to_vec(), data)
        };
        (ratio(&r), ratio(&i))
    };
    let (phase_re, phase_im) = (g.constant(phase_re), g.constant(phase_im));

    let eff = |w: Var<'g>| -> Result<Var<'g>> { w.relu()?.tile(batch) };
    let input = match config.domain {
        Domain::Plain => mag,
        Domain::Log => mag.log1p()?,
    };
    let shaped = match config.family {
        Family::Linear => eff(weights[0])?.mul(input)?,
        Family::General => eff(weights[0])?.mul(input.log1p()?)?.expm1()?,
        Family::Mlp => {
            let hidden = eff(weights[0])?
                .mul(input)?
                .add(eff(weights[2])?)?
                .unary(config.activation)?;
            eff(weights[1])?.mul(hidden)?.add(eff(weights[3])?)?
        }
        Family::Phase => unreachable!(),
    };
    let magnitude = match config.domain {
        Domain::Plain => shaped,
        Domain::Log => shaped.expm1()?,
    };
    let new_re = magnitude.mul(phase_re)?;
    let new_im = magnitude.mul(phase_im)?;
    new_re.irfft2(new_im, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_shape() {
        let cfg = FilterConfig::new(Family::Linear, Domain::Plain).unwrap();
        let p = FilterParams::identity(cfg, 1, 4, 4).unwrap();
        assert_eq!(p.matrices()[0].shape(), &[1, 4, 3]);
        assert!(p.matrices()[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn general_identity_algebra() {
        for x in [0.0f64, 1e-9, 0.3, 1.0, 17.0] {
            let y: f64 = (1.0 * x.ln_1p()).exp_m1();
            assert!((y - x).abs() <= 1e-15 * x.max(1.0));
        }
    }

    #[test]
    fn phase_rejects_log() {
        assert!(matches!(
            FilterConfig::new(Family::Phase, Domain::Log),
            Err(Error::Config(_))
        ));
        assert_eq!(FilterConfig::all().len(), 7);
    }

    #[test]
    fn param_counts() {
        let lin = FilterConfig::new(Family::Linear, Domain::Plain).unwrap();
        assert_eq!(param_count(&lin, 3, 32, 32), 276_026 - 274_394);
        assert_eq!(param_count(&lin, 3, 64, 64), 293_080 - 286_744);
        let mlp = FilterConfig::new(Family::Mlp, Domain::Plain).unwrap();
        assert_eq!(param_count(&mlp, 1, 8, 8), 4 * 8 * 5);
        assert_eq!(
            FilterParams::identity(mlp, 1, 8, 8).unwrap().param_count(),
            160
        );
    }

    #[test]
    fn zero_weights_kill_everything() {
        let cfg = FilterConfig::new(Family::Linear, Domain::Plain).unwrap();
        let p = FilterParams::from_matrices(cfg, 1, 4, 4, vec![Tensor::zeros(&[1, 4, 3])]).unwrap();
        let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        assert!(p.apply(&img).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = FilterConfig::new(Family::Linear, Domain::Plain).unwrap();
        let p = FilterParams::identity(cfg, 1, 4, 4).unwrap();
        assert!(matches!(
            p.apply(&Tensor::ones(&[1, 1, 4, 6])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            p.apply(&Tensor::ones(&[1, 2, 4, 4])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bytes_round_trip() {
        let cfg = FilterConfig::with_activation(Family::Mlp, Domain::Log, UnaryKind::Mish).unwrap();
        let mut p = FilterParams::identity(cfg, 2, 5, 7).unwrap();
        for (i, v) in p.matrices_mut()[3].data_mut().iter_mut().enumerate() {
            *v = (i as f64).sin() * 1e-3;
        }
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"GAFL");
        let back = FilterParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            FilterParams::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }
}
