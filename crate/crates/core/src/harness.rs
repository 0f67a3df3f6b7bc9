//! Experiment runner: paired base / filtered training runs, metric CSVs and
//! spectrum dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autograd::{Graph, Var};
use crate::data::{
    add_gaussian_noise, derive_seed, erase_rectangle, gen_band_dataset, load_directory,
    rng_from_seed, write_pgm, BandDatasetSpec, DataTask, Label,
};
use crate::error::{Error, Result};
use crate::gafl::{Family, FilterConfig, FilterParams};
use crate::losses::{
    accuracy, combined_restoration_loss, combined_seg_loss, f1_score, max_ssim_scales,
    mean_dice_from_logits, mse_loss, psnr, ssim_ms, weighted_cross_entropy, ClassWeights,
};
use crate::nets::{Model, ModelKind, ModelSpec};
use crate::optim::{OptimState, OptimizerConfig};
use crate::spectral::half_width;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,loss,metric_name,metric_value,seconds";

const SPLIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const CORRUPTION_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
    Denoising,
    Erasing,
}

impl Task {
    fn data_task(self) -> DataTask {
        match self {
            Task::Segmentation => DataTask::Segmentation,
            Task::Classification => DataTask::Classification,
            Task::Denoising | Task::Erasing => DataTask::Denoising,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Band(BandDatasetSpec),
    Directory(PathBuf),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestorationLoss {
    /// MS-SSIM and L1 mix.
    #[default]
    Combined,
    Mse,
}

fn default_erase_size() -> usize {
    8
}

/// Extra corruption applied on top of the dataset for restoration tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    #[serde(default)]
    pub gaussian_sigma: f64,
    #[serde(default = "default_erase_size")]
    pub erase_size: usize,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption {
            gaussian_sigma: 0.0,
            erase_size: default_erase_size(),
        }
    }
}

fn default_batch_size() -> usize {
    4
}

mod gafl_choice {
    use super::*;
    use serde::de::Error as _;

    pub fn serialize<S: Serializer>(
        v: &Option<FilterConfig>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_str("none"),
            Some(c) => c.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<FilterConfig>, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "none" => Ok(None),
            serde_json::Value::String(s) => Err(D::Error::custom(format!(
                "gafl must be \"none\" or a filter object, got {s:?}"
            ))),
            v => FilterConfig::deserialize(v)
                .map(Some)
                .map_err(D::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelSpec,
    #[serde(default, with = "gafl_choice")]
    pub gafl: Option<FilterConfig>,
    pub dataset: DatasetSource,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Learning rate for the filter leaves; the optimizer's rate when absent.
    #[serde(default)]
    pub gafl_lr: Option<f64>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Backbone of the filtered arm in `ablate`; `model` when absent.
    #[serde(default)]
    pub gafl_model: Option<ModelSpec>,
    /// In `ablate`, require the base model to have at least as many
    /// parameters as the filtered one.
    #[serde(default)]
    pub budget: bool,
    #[serde(default)]
    pub corruption: Corruption,
    #[serde(default)]
    pub restoration_loss: RestorationLoss,
    /// MS-SSIM scales; the largest valid count when absent.
    #[serde(default)]
    pub ssim_scales: Option<usize>,
    /// Write measured seconds instead of zeros, at the cost of
    /// byte-identical reruns.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        if let Some(cfg) = &self.gafl {
            cfg.validate()?;
        }
        for spec in std::iter::once(&self.model).chain(&self.gafl_model) {
            if spec.gafl.is_some() {
                return Err(Error::Config(
                    "set the filter with the top-level gafl key, not inside the model".into(),
                ));
            }
        }
        if let Some(lr) = self.gafl_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("gafl_lr must be >= 0, got {lr}")));
            }
        }
        let classify = self.task == Task::Classification;
        let is_cnn = self.model.kind == ModelKind::MiniCnn;
        if classify != is_cnn {
            return Err(Error::Config(format!(
                "task {:?} cannot use model {:?}",
                self.task, self.model.kind
            )));
        }
        if self.corruption.gaussian_sigma.is_nan()
            || self.corruption.gaussian_sigma < 0.0
            || self.corruption.erase_size == 0
        {
            return Err(Error::Config("invalid corruption settings".into()));
        }
        if let DatasetSource::Band(spec) = &self.dataset {
            if spec.task != self.task.data_task() {
                return Err(Error::Config(format!(
                    "task {:?} needs a {:?} dataset, got {:?}",
                    self.task,
                    self.task.data_task(),
                    spec.task
                )));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        epochs: Option<usize>,
        out_dir: Option<PathBuf>,
    ) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(e) = epochs {
            self.epochs = e;
        }
        if let Some(d) = out_dir {
            self.output_dir = d;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric_value: f64,
    pub seconds: f64,
}

impl MetricRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.6},{:.6}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.metric_name,
            self.metric_value,
            self.seconds
        )
    }
}

enum Target {
    Mask(Tensor),
    Class(usize),
    Clean(Tensor),
}

enum BatchTarget {
    Mask(Tensor),
    Class(Vec<usize>),
    Clean(Tensor),
}

/// Inputs and targets after corruption, shared by every arm of a run.
struct Prepared {
    inputs: Vec<Tensor>,
    targets: Vec<Target>,
    channels: usize,
    extents: (usize, usize),
    train: Vec<usize>,
    val: Vec<usize>,
    classes: usize,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let samples = match &config.dataset {
        DatasetSource::Band(spec) => gen_band_dataset(spec)?,
        DatasetSource::Directory(dir) => load_directory(dir, config.task.data_task())?,
    };
    if samples.len() < 2 {
        return Err(Error::Config(
            "need at least 2 samples for a train/val split".into(),
        ));
    }
    let shape = samples[0].image.shape().to_vec();
    let [c, n, m] = shape[..] else {
        return Err(Error::Shape(format!(
            "samples must be [C, n, m], got {shape:?}"
        )));
    };
    if c != config.model.in_channels {
        return Err(Error::Shape(format!(
            "dataset has {c} channels, model expects {}",
            config.model.in_channels
        )));
    }
    let corr_seed = derive_seed(config.seed, CORRUPTION_STREAM);
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for (i, s) in samples.into_iter().enumerate() {
        let seed_i = derive_seed(corr_seed, i as u64);
        let (input, target) = match (config.task, s.label) {
            (Task::Segmentation, Label::Mask(mask)) => (s.image, Target::Mask(mask)),
            (Task::Classification, Label::Class(k)) => (s.image, Target::Class(k)),
            (Task::Denoising, Label::Clean(clean)) => (
                add_gaussian_noise(&s.image, config.corruption.gaussian_sigma, seed_i)?,
                Target::Clean(clean),
            ),
            (Task::Erasing, Label::Clean(clean)) => {
                let h = config.corruption.erase_size.min(n);
                let w = config.corruption.erase_size.min(m);
                let mut rng = rng_from_seed(seed_i);
                let top = rng.random_range(0..=n - h) as i64;
                let left = rng.random_range(0..=m - w) as i64;
                (
                    erase_rectangle(&clean, top, left, h as i64, w as i64, 0.0)?,
                    Target::Clean(clean),
                )
            }
            _ => return Err(Error::Config("dataset labels do not fit the task".into())),
        };
        if input.shape() != shape.as_slice() {
            return Err(Error::Shape("samples differ in extents".into()));
        }
        inputs.push(input);
        targets.push(target);
    }

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(config.seed, SPLIT_STREAM)));
    let n_train = (inputs.len() * 4 / 5).clamp(1, inputs.len() - 1);
    let val = order.split_off(n_train);
    let classes = match config.model.kind {
        ModelKind::MiniCnn => config.model.num_classes,
        _ => 0,
    };
    for t in &targets {
        if let Target::Class(k) = t {
            if *k >= classes {
                return Err(Error::Config(format!(
                    "class {k} but the model has {classes} classes"
                )));
            }
        }
    }
    Ok(Prepared {
        inputs,
        targets,
        channels: c,
        extents: (n, m),
        train: order,
        val,
        classes,
    })
}

impl Prepared {
    fn batch(&self, idx: &[usize]) -> Result<(Tensor, BatchTarget)> {
        let x = Tensor::stack(
            &idx.iter()
                .map(|&i| self.inputs[i].clone())
                .collect::<Vec<_>>(),
        )?;
        let pick = |i: usize| &self.targets[i];
        let t = match pick(idx[0]) {
            Target::Class(_) => BatchTarget::Class(
                idx.iter()
                    .map(|&i| match pick(i) {
                        Target::Class(k) => *k,
                        _ => unreachable!(),
                    })
                    .collect(),
            ),
            Target::Mask(_) | Target::Clean(_) => {
                let planes: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| match pick(i) {
                        Target::Mask(t) | Target::Clean(t) => t.clone(),
                        Target::Class(_) => unreachable!(),
                    })
                    .collect();
                let stacked = Tensor::stack(&planes)?;
                match pick(idx[0]) {
                    Target::Mask(_) => BatchTarget::Mask(stacked),
                    _ => BatchTarget::Clean(stacked),
                }
            }
        };
        Ok((x, t))
    }

    fn train_labels(&self) -> Vec<usize> {
        self.train
            .iter()
            .filter_map(|&i| match self.targets[i] {
                Target::Class(k) => Some(k),
                _ => None,
            })
            .collect()
    }
}

/// Loss and metric recipe for one task.
struct Recipe {
    task: Task,
    weights: ClassWeights,
    restoration: RestorationLoss,
    scales: usize,
}

impl Recipe {
    fn new(config: &ExperimentConfig, data: &Prepared) -> Result<Self> {
        let weights = if config.task == Task::Classification {
            ClassWeights::inverse_frequency(&data.train_labels(), data.classes)?
        } else {
            ClassWeights::uniform(1)
        };
        let (n, m) = data.extents;
        let scales = config.ssim_scales.unwrap_or_else(|| max_ssim_scales(n, m));
        if matches!(config.task, Task::Denoising | Task::Erasing) {
            crate::losses::check_ssim_extents(n, m, scales)?;
            if n % (1 << (scales - 1)) != 0 || m % (1 << (scales - 1)) != 0 {
                return Err(Error::Extent(format!(
                    "{n}x{m} cannot be halved {} times for ms-ssim",
                    scales - 1
                )));
            }
        }
        Ok(Recipe {
            task: config.task,
            weights,
            restoration: config.restoration_loss,
            scales,
        })
    }

    fn metric_names(&self) -> &'static [&'static str] {
        match self.task {
            Task::Segmentation => &["dice"],
            Task::Classification => &["f1", "accuracy"],
            Task::Denoising | Task::Erasing => &["psnr", "ssim"],
        }
    }

    fn loss<'g>(&self, out: Var<'g>, target: &BatchTarget) -> Result<Var<'g>> {
        match target {
            BatchTarget::Mask(t) => combined_seg_loss(out, t),
            BatchTarget::Class(k) => weighted_cross_entropy(out, k, &self.weights),
            BatchTarget::Clean(t) => match self.restoration {
                RestorationLoss::Combined => combined_restoration_loss(out, t, self.scales),
                RestorationLoss::Mse => mse_loss(out, t),
            },
        }
    }
}

/// Per-split accumulator of loss and task metrics.
#[derive(Default)]
struct Tally {
    count: usize,
    loss: f64,
    sums: [f64; 2],
    pred: Vec<usize>,
    truth: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn evaluate(
    model: &Model,
    data: &Prepared,
    recipe: &Recipe,
    idx: &[usize],
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut tally = Tally::default();
    for chunk in idx.chunks(batch_size) {
        let (x, t) = data.batch(chunk)?;
        let g = Graph::new();
        let leaves: Vec<Var> = model
            .params()
            .iter()
            .map(|p| g.constant(p.clone()))
            .collect();
        let out = model.forward_with(&leaves, g.constant(x), false)?.output;
        let b = chunk.len();
        tally.count += b;
        tally.loss += recipe.loss(out, &t)?.item() * b as f64;
        let y = out.tensor();
        match &t {
            BatchTarget::Mask(mask) => tally.sums[0] += mean_dice_from_logits(&y, mask)? * b as f64,
            BatchTarget::Class(k) => {
                let width = y.shape()[1];
                tally.pred.extend(y.data().chunks(width).map(argmax));
                tally.truth.extend(k);
            }
            BatchTarget::Clean(clean) => {
                let clipped = y.map(|v| v.clamp(0.0, 1.0));
                for i in 0..b {
                    let (p, c) = (clipped.slice_outer(i), clean.slice_outer(i));
                    tally.sums[0] += psnr(&p, &c)?;
                    tally.sums[1] += ssim_ms(&p, &c, recipe.scales)?;
                }
            }
        }
    }
    let n = tally.count as f64;
    let metrics = match recipe.task {
        Task::Segmentation => vec![tally.sums[0] / n],
        Task::Classification => vec![
            f1_score(&tally.pred, &tally.truth, 1),
            accuracy(&tally.pred, &tally.truth),
        ],
        Task::Denoising | Task::Erasing => vec![tally.sums[0] / n, tally.sums[1] / n],
    };
    Ok((tally.loss / n, metrics))
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub model: Model,
}

impl RunReport {
    /// Value of `metric` on `split` at the last epoch.
    pub fn final_metric(&self, split: Split, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric_name == metric)
            .map(|r| r.metric_value)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(
    config: &ExperimentConfig,
    data: &Prepared,
    recipe: &Recipe,
    mut model: Model,
    out_dir: &Path,
) -> Result<RunReport> {
    ensure_dir(out_dir)?;
    let mut opt = OptimState::new(config.optimizer, model.params());
    if let Some(lr) = config.gafl_lr {
        for i in 0..model.filter_leaf_count() {
            opt.set_lr(i, lr);
        }
    }
    let shuffle_seed = derive_seed(config.seed, SHUFFLE_STREAM);
    let mut records = Vec::new();
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order = data.train.clone();
        order.shuffle(&mut rng_from_seed(derive_seed(shuffle_seed, epoch as u64)));
        for chunk in order.chunks(config.batch_size) {
            let (x, t) = data.batch(chunk)?;
            let g = Graph::new();
            let fwd = model.forward(&g, &x, true)?;
            let loss = recipe.loss(fwd.output, &t)?;
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = fwd
                .leaves
                .iter()
                .map(|v| grads.get(*v).cloned().expect("every leaf has a gradient"))
                .collect();
            opt.step(model.params_mut(), &grads)?;
        }
        let seconds = if config.record_wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        for split in [Split::Train, Split::Val] {
            let idx = match split {
                Split::Train => &data.train,
                Split::Val => &data.val,
            };
            let (loss, values) = evaluate(&model, data, recipe, idx, config.batch_size)?;
            for (name, value) in recipe.metric_names().iter().zip(values) {
                let r = MetricRecord {
                    epoch,
                    split,
                    loss,
                    metric_name: name,
                    metric_value: value,
                    seconds,
                };
                writeln!(csv, "{}", r.csv_line()).unwrap();
                records.push(r);
            }
        }
        if let Some(filter) = model.filter() {
            dump_spectrum(&filter, out_dir.join(format!("filter_epoch_{epoch}.pgm")))?;
        }
    }
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, csv).map_err(|e| Error::io(&metrics_path, e))?;
    model.save(out_dir.join("model.ckpt"))?;
    Ok(RunReport {
        output_dir: out_dir.to_path_buf(),
        records,
        model,
    })
}

fn build_arm(
    config: &ExperimentConfig,
    spec: &ModelSpec,
    gafl: Option<FilterConfig>,
    data: &Prepared,
) -> Result<Model> {
    let spec = spec.clone().with_gafl(gafl).with_in_channels(data.channels);
    Model::build(spec, data.extents, derive_seed(config.seed, INIT_STREAM))
}

/// Trains one model as configured and writes `metrics.csv`, `model.ckpt`
/// and, with a filter, `filter_epoch_<k>.pgm` into the output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let data = prepare(config)?;
    let recipe = Recipe::new(config, &data)?;
    let model = build_arm(config, &config.model, config.gafl, &data)?;
    train(config, &data, &recipe, model, &config.output_dir)
}

/// Outcome of a paired run.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub base: RunReport,
    pub gafl: RunReport,
    pub base_params: usize,
    pub gafl_params: usize,
    /// Validation `(loss, metrics)` of each arm before any training step.
    pub base_initial: (f64, Vec<f64>),
    pub gafl_initial: (f64, Vec<f64>),
    pub metric_names: Vec<&'static str>,
}

impl AblationReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "params base={} gafl={}",
            self.base_params, self.gafl_params
        )
        .unwrap();
        let rows = [
            ("base", &self.base, &self.base_initial),
            ("gafl", &self.gafl, &self.gafl_initial),
        ];
        for (name, run, init) in rows {
            write!(s, "{name}: epoch0 val loss={:.6}", init.0).unwrap();
            for (m, v) in self.metric_names.iter().zip(&init.1) {
                write!(s, " {m}={v:.6}").unwrap();
            }
            write!(s, "; final val").unwrap();
            for m in &self.metric_names {
                let v = run.final_metric(Split::Val, m).unwrap_or(f64::NAN);
                write!(s, " {m}={v:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Trains the configured model without and with the filter under the same
/// seed, in `<output_dir>/base` and `<output_dir>/gafl`, and writes
/// `ablation.txt`.
pub fn ablate(config: &ExperimentConfig) -> Result<AblationReport> {
    config.validate()?;
    let Some(filter) = config.gafl else {
        return Err(Error::Config("ablate needs a gafl configuration".into()));
    };
    let data = prepare(config)?;
    let recipe = Recipe::new(config, &data)?;
    let base = build_arm(config, &config.model, None, &data)?;
    let gafl_spec = config.gafl_model.as_ref().unwrap_or(&config.model);
    let filtered = build_arm(config, gafl_spec, Some(filter), &data)?;
    let (base_params, gafl_params) = (base.param_count(), filtered.param_count());
    if config.budget && base_params < gafl_params {
        return Err(Error::Config(format!(
            "parameter budget violated: base has {base_params}, filtered model has {gafl_params}"
        )));
    }
    let base_initial = evaluate(&base, &data, &recipe, &data.val, config.batch_size)?;
    let gafl_initial = evaluate(&filtered, &data, &recipe, &data.val, config.batch_size)?;
    let base_run = train(
        config,
        &data,
        &recipe,
        base,
        &config.output_dir.join("base"),
    )?;
    let gafl_run = train(
        config,
        &data,
        &recipe,
        filtered,
        &config.output_dir.join("gafl"),
    )?;
    let report = AblationReport {
        base: base_run,
        gafl: gafl_run,
        base_params,
        gafl_params,
        base_initial,
        gafl_initial,
        metric_names: recipe.metric_names().to_vec(),
    };
    let path = config.output_dir.join("ablation.txt");
    std::fs::write(&path, report.summary()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Channel-0 weights as a DC-centred `[n, m]` image in `[0, 1]`. Magnitude
/// families show `relu(W)` (the first matrix for `Mlp`) min-max normalized,
/// with a constant plane mapped to zeros; `Phase` shows `(w + pi) / (2 pi)`.
pub fn spectrum_image(params: &FilterParams) -> Tensor {
    let (n, m) = params.extents();
    let h = half_width(m);
    let w = params.effective(0);
    let half = &w.data()[..n * h];
    let mut full = vec![0.0; n * m];
    for u in 0..n {
        for v in 0..m {
            let value = if v < h {
                half[u * h + v]
            } else {
                half[((n - u) % n) * h + (m - v)]
            };
            full[((u + n / 2) % n) * m + (v + m / 2) % m] = value;
        }
    }
    if params.config().family == Family::Phase {
        use std::f64::consts::PI;
        for v in &mut full {
            *v = ((*v + PI) / (2.0 * PI)).clamp(0.0, 1.0);
        }
    } else {
        let lo = full.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = full.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in &mut full {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    Tensor::from_parts(vec![n, m], full)
}

pub fn dump_spectrum(params: &FilterParams, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(&spectrum_image(params), path)
}

/// Reads filter parameters from a model checkpoint or a bare filter file.
pub fn load_filter(path: impl AsRef<Path>) -> Result<FilterParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match Model::from_bytes(&bytes) {
        Ok(model) => model.filter().ok_or_else(|| {
            Error::Config(format!("{} holds a model without a filter", path.display()))
        }),
        Err(_) => FilterParams::from_bytes(&bytes),
    }
}
