//! Small segmentation, classification and denoising networks with an
//! optional filter layer in front.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::rng_from_seed;
use crate::error::{Error, Result};
use crate::gafl::{self, FilterConfig, FilterParams};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

const CKPT_MAGIC: &[u8; 4] = b"GMDL";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MiniUnet,
    MiniCnn,
    MiniDncnn,
    /// No layers at all; with a filter configured only the filter trains.
    Identity,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_features: Option<usize>,
    /// Downsteps for `mini_unet`, blocks for `mini_cnn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
    #[serde(default = "two")]
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gafl: Option<FilterConfig>,
}

impl ModelSpec {
    fn bare(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            init_features: None,
            depth: None,
            num_layers: None,
            in_channels: 1,
            out_channels: 1,
            num_classes: 2,
            gafl: None,
        }
    }

    pub fn mini_unet(init_features: usize, depth: usize) -> Self {
        ModelSpec {
            init_features: Some(init_features),
            depth: Some(depth),
            ..Self::bare(ModelKind::MiniUnet)
        }
    }

    pub fn mini_cnn(init_features: usize, depth: usize, num_classes: usize) -> Self {
        ModelSpec {
            init_features: Some(init_features),
            depth: Some(depth),
            num_classes,
            ..Self::bare(ModelKind::MiniCnn)
        }
    }

    pub fn mini_dncnn(init_features: usize, num_layers: usize) -> Self {
        ModelSpec {
            init_features: Some(init_features),
            num_layers: Some(num_layers),
            ..Self::bare(ModelKind::MiniDncnn)
        }
    }

    pub fn identity() -> Self {
        Self::bare(ModelKind::Identity)
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn with_gafl(mut self, config: Option<FilterConfig>) -> Self {
        self.gafl = config;
        self
    }

    pub fn features(&self) -> usize {
        self.init_features.unwrap_or(match self.kind {
            ModelKind::MiniDncnn => 16,
            _ => 8,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(match self.kind {
            ModelKind::MiniCnn => 3,
            _ => 2,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers.unwrap_or(7)
    }

    pub fn validate(&self, extents: (usize, usize)) -> Result<()> {
        let (n, m) = extents;
        if n == 0 || m == 0 {
            return Err(Error::Extent(format!("empty image extents {n}x{m}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.features() == 0 {
            return Err(Error::Config("init_features must be at least 1".into()));
        }
        match self.kind {
            ModelKind::MiniUnet | ModelKind::MiniCnn => {
                let d = self.depth();
                if d == 0 || d >= usize::BITS as usize {
                    return Err(Error::Config(format!("invalid depth {d}")));
                }
                let step = 1usize << d;
                if n % step != 0 || m % step != 0 {
                    return Err(Error::Extent(format!(
                        "{n}x{m} is not divisible by 2^{d} = {step}"
                    )));
                }
                if self.kind == ModelKind::MiniCnn && self.num_classes < 2 {
                    return Err(Error::Config("num_classes must be at least 2".into()));
                }
            }
            ModelKind::MiniDncnn => {
                if self.num_layers() == 0 {
                    return Err(Error::Config("num_layers must be at least 1".into()));
                }
            }
            ModelKind::Identity => {}
        }
        if let Some(cfg) = &self.gafl {
            cfg.validate()?;
            if n < 2 || m < 2 {
                return Err(Error::Extent(format!(
                    "filter needs n, m >= 2, got {n}x{m}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Conv { inp: usize, out: usize, k: usize },
    Bn { ch: usize },
    Dense { inp: usize, out: usize },
}

impl Layer {
    fn shapes(self) -> [Vec<usize>; 2] {
        match self {
            Layer::Conv { inp, out, k } => [vec![out, inp, k, k], vec![out]],
            Layer::Bn { ch } => [vec![ch], vec![ch]],
            Layer::Dense { inp, out } => [vec![out, inp], vec![out]],
        }
    }
}

fn double_conv(layers: &mut Vec<Layer>, inp: usize, out: usize) {
    layers.push(Layer::Conv { inp, out, k: 3 });
    layers.push(Layer::Bn { ch: out });
    layers.push(Layer::Conv {
        inp: out,
        out,
        k: 3,
    });
    layers.push(Layer::Bn { ch: out });
}

fn layout(spec: &ModelSpec, extents: (usize, usize)) -> Vec<Layer> {
    let f = spec.features();
    let mut l = Vec::new();
    match spec.kind {
        ModelKind::MiniUnet => {
            let d = spec.depth();
            let mut ch = spec.in_channels;
            for i in 0..d {
                double_conv(&mut l, ch, f << i);
                ch = f << i;
            }
            double_conv(&mut l, ch, f << d);
            for i in (0..d).rev() {
                double_conv(&mut l, (f << (i + 1)) + (f << i), f << i);
            }
            l.push(Layer::Conv {
                inp: f,
                out: spec.out_channels,
                k: 1,
            });
        }
        ModelKind::MiniCnn => {
            let d = spec.depth();
            let mut ch = spec.in_channels;
            for i in 0..d {
                l.push(Layer::Conv {
                    inp: ch,
                    out: f << i,
                    k: 3,
                });
                l.push(Layer::Bn { ch: f << i });
                ch = f << i;
            }
            let flat = ch * (extents.0 >> d) * (extents.1 >> d);
            l.push(Layer::Dense {
                inp: flat,
                out: 4 * f,
            });
            l.push(Layer::Dense {
                inp: 4 * f,
                out: spec.num_classes,
            });
        }
        ModelKind::MiniDncnn => {
            let c = spec.in_channels;
            let layers = spec.num_layers();
            if layers == 1 {
                l.push(Layer::Conv {
                    inp: c,
                    out: c,
                    k: 3,
                });
            } else {
                l.push(Layer::Conv {
                    inp: c,
                    out: f,
                    k: 3,
                });
                for _ in 0..layers - 2 {
                    l.push(Layer::Conv {
                        inp: f,
                        out: f,
                        k: 3,
                    });
                    l.push(Layer::Bn { ch: f });
                }
                l.push(Layer::Conv {
                    inp: f,
                    out: c,
                    k: 3,
                });
            }
        }
        ModelKind::Identity => {}
    }
    l
}

/// Running batchnorm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    extents: (usize, usize),
    filter_leaves: usize,
    params: Vec<Tensor>,
    running: Vec<BnStats>,
}

/// Result of [`Model::forward`].
pub struct Forward<'g> {
    pub output: Var<'g>,
    /// Trainable leaves in build order, aligned with [`Model::params`].
    pub leaves: Vec<Var<'g>>,
}

/// Output plus the batch statistics seen by every batchnorm layer.
pub struct Traced<'g> {
    pub output: Var<'g>,
    pub batch_stats: Vec<BnStats>,
}

struct Cursor<'a, 'g> {
    leaves: &'a [Var<'g>],
    next: usize,
    running: &'a [BnStats],
    bn_next: usize,
    training: bool,
    seen: Vec<BnStats>,
}

impl<'g> Cursor<'_, 'g> {
    fn pair(&mut self) -> (Var<'g>, Var<'g>) {
        let p = (self.leaves[self.next], self.leaves[self.next + 1]);
        self.next += 2;
        p
    }

    fn conv(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        let (w, b) = self.pair();
        let pad = w.shape()[2] / 2;
        x.conv2d(w, b, 1, pad)
    }

    fn bn(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        let (gamma, beta) = self.pair();
        let r = &self.running[self.bn_next];
        self.bn_next += 1;
        let stats = (!self.training).then_some((r.mean.as_slice(), r.var.as_slice()));
        let (y, mean, var) = x.batchnorm2d(gamma, beta, BN_EPS, stats)?;
        self.seen.push(BnStats { mean, var });
        Ok(y)
    }

    fn conv_bn_relu(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv(x)?;
        self.bn(h)?.relu()
    }

    fn double_conv(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv_bn_relu(x)?;
        self.conv_bn_relu(h)
    }

    fn dense(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        let (w, b) = self.pair();
        x.dense(w, b)
    }
}

impl Model {
    pub fn build(spec: ModelSpec, extents: (usize, usize), seed: u64) -> Result<Self> {
        spec.validate(extents)?;
        let mut params = Vec::new();
        let mut filter_leaves = 0;
        if let Some(cfg) = spec.gafl {
            let fp = FilterParams::identity(cfg, spec.in_channels, extents.0, extents.1)?;
            filter_leaves = fp.matrices().len();
            params.extend(fp.matrices().iter().cloned());
        }
        let mut rng = rng_from_seed(seed);
        let mut running = Vec::new();
        for layer in layout(&spec, extents) {
            let [ws, bs] = layer.shapes();
            match layer {
                Layer::Bn { ch } => {
                    params.push(Tensor::ones(&ws));
                    params.push(Tensor::zeros(&bs));
                    running.push(BnStats {
                        mean: vec![0.0; ch],
                        var: vec![1.0; ch],
                    });
                }
                Layer::Conv { inp, out, k } => {
                    params.push(glorot(&ws, inp * k * k, out * k * k, &mut rng));
                    params.push(Tensor::zeros(&bs));
                }
                Layer::Dense { inp, out } => {
                    params.push(glorot(&ws, inp, out, &mut rng));
                    params.push(Tensor::zeros(&bs));
                }
            }
        }
        Ok(Model {
            spec,
            extents,
            filter_leaves,
            params,
            running,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn extents(&self) -> (usize, usize) {
        self.extents
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BnStats] {
        &self.running
    }

    /// Number of leading leaves that belong to the filter layer.
    pub fn filter_leaf_count(&self) -> usize {
        self.filter_leaves
    }

    pub fn filter(&self) -> Option<FilterParams> {
        let cfg = self.spec.gafl?;
        FilterParams::from_matrices(
            cfg,
            self.spec.in_channels,
            self.extents.0,
            self.extents.1,
            self.params[..self.filter_leaves].to_vec(),
        )
        .ok()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (n, m) = self.extents;
        match *shape {
            [b, c, h, w] if b > 0 && c == self.spec.in_channels && h == n && w == m => Ok(()),
            _ => Err(Error::Shape(format!(
                "model expects [B, {}, {n}, {m}], got {shape:?}",
                self.spec.in_channels
            ))),
        }
    }

    /// Forward pass over caller-supplied leaves, which must line up with
    /// [`Model::params`]. Running statistics are read but never written.
    pub fn forward_with<'g>(
        &self,
        leaves: &[Var<'g>],
        batch: Var<'g>,
        training: bool,
    ) -> Result<Traced<'g>> {
        self.check_input(&batch.shape())?;
        if leaves.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "model has {} leaves, got {}",
                self.params.len(),
                leaves.len()
            )));
        }
        let g = batch.graph();
        let mut x = batch;
        if let Some(cfg) = &self.spec.gafl {
            x = gafl::forward(g, cfg, &leaves[..self.filter_leaves], x)?;
        }
        let mut cur = Cursor {
            leaves,
            next: self.filter_leaves,
            running: &self.running,
            bn_next: 0,
            training,
            seen: Vec::new(),
        };
        let output = match self.spec.kind {
            ModelKind::MiniUnet => {
                let d = self.spec.depth();
                let mut skips = Vec::with_capacity(d);
                let mut h = x;
                for _ in 0..d {
                    h = cur.double_conv(h)?;
                    skips.push(h);
                    h = h.maxpool2()?;
                }
                h = cur.double_conv(h)?;
                for skip in skips.into_iter().rev() {
                    h = h.upsample_nearest2()?.concat_channels(skip)?;
                    h = cur.double_conv(h)?;
                }
                cur.conv(h)?
            }
            ModelKind::MiniCnn => {
                let mut h = x;
                for _ in 0..self.spec.depth() {
                    h = cur.conv_bn_relu(h)?.avgpool2()?;
                }
                let s = h.shape();
                h = h.reshape(&[s[0], s[1] * s[2] * s[3]])?;
                let hidden = cur.dense(h)?.relu()?;
                cur.dense(hidden)?
            }
            ModelKind::MiniDncnn => {
                let layers = self.spec.num_layers();
                let noise = if layers == 1 {
                    cur.conv(x)?
                } else {
                    let mut h = cur.conv(x)?.relu()?;
                    for _ in 0..layers - 2 {
                        h = cur.conv_bn_relu(h)?;
                    }
                    cur.conv(h)?
                };
                x.sub(noise)?
            }
            ModelKind::Identity => x,
        };
        debug_assert_eq!(cur.next, leaves.len());
        Ok(Traced {
            output,
            batch_stats: cur.seen,
        })
    }

    /// Registers the parameters on `g` and runs the network. In training
    /// mode batchnorm uses batch statistics and the running averages are
    /// updated.
    pub fn forward<'g>(
        &mut self,
        g: &'g Graph,
        batch: &Tensor,
        training: bool,
    ) -> Result<Forward<'g>> {
        let leaves: Vec<Var<'g>> = self.params.iter().map(|t| g.leaf(t.clone())).collect();
        let traced = self.forward_with(&leaves, g.constant(batch.clone()), training)?;
        if training {
            let s = batch.shape();
            let count = s[0] * s[2] * s[3];
            for (r, seen) in self.running.iter_mut().zip(&traced.batch_stats) {
                update_running(r, seen, count);
            }
        }
        Ok(Forward {
            output: traced.output,
            leaves,
        })
    }

    /// Evaluation-mode output values.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let leaves: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward_with(&leaves, g.constant(batch.clone()), false)?;
        Ok(out.output.tensor())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CkptHeader {
            spec: self.spec.clone(),
            extents: [self.extents.0, self.extents.1],
            leaves: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = CKPT_MAGIC.to_vec();
        out.extend(CKPT_VERSION.to_le_bytes());
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        let values = self.params.iter().flat_map(|p| p.data().iter()).chain(
            self.running
                .iter()
                .flat_map(|r| r.mean.iter().chain(&r.var)),
        );
        for v in values {
            out.extend(v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(format!("model checkpoint: {msg}"));
        if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
            return Err(fail("bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if word(4) != CKPT_VERSION as usize {
            return Err(fail("unsupported version"));
        }
        let len = word(8);
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| fail("truncated header"))?;
        let header: CkptHeader = serde_json::from_slice(body).map_err(|e| fail(&e.to_string()))?;
        let mut model = Model::build(header.spec, (header.extents[0], header.extents[1]), 0)?;
        let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
        if shapes != header.leaves {
            return Err(fail("leaf shapes do not match the architecture"));
        }
        let mut values = bytes[12 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut fill = |dst: &mut [f64]| -> Result<()> {
            for d in dst {
                *d = values.next().ok_or_else(|| fail("truncated payload"))?;
            }
            Ok(())
        };
        for p in &mut model.params {
            fill(p.data_mut())?;
        }
        for r in &mut model.running {
            fill(&mut r.mean)?;
            fill(&mut r.var)?;
        }
        if bytes[12 + len..].len() != 8 * (model.param_count() + model.running_len()) {
            return Err(fail("trailing bytes"));
        }
        Ok(model)
    }

    fn running_len(&self) -> usize {
        self.running.iter().map(|r| 2 * r.mean.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    spec: ModelSpec,
    extents: [usize; 2],
    leaves: Vec<Vec<usize>>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-a..=a)).collect(),
    )
}

/// Exponential moving average with the unbiased batch variance.
fn update_running(r: &mut BnStats, seen: &BnStats, count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for c in 0..r.mean.len() {
        r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * seen.mean[c];
        r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * seen.var[c] * unbias;
    }
}

pub fn build_model(spec: ModelSpec, extents: (usize, usize), seed: u64) -> Result<Model> {
    Model::build(spec, extents, seed)
}

pub fn model_param_count(model: &Model) -> usize {
    model.param_count()
}
