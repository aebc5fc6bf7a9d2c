//! Optimisation: dataset training, single-pair zero-shot refinement and loss
//! ablations.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::RGBDSample;
use crate::error::{Error, Result};
use crate::losses::{total_loss_grad, LossBreakdown, LossTargets, LossTerm, LossWeights};
use crate::maps::{DepthMap, GuidanceImage};
use crate::metrics::{aggregate, evaluate, MetricReport};
use crate::model::{build_graph, init_params, Guidance, ModelParams, NetworkOutput, DEFAULT_K, DEFAULT_STAGES};
use crate::nn::{LayerGrad, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ZeroShot,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub n_stages: usize,
    pub k: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square high-resolution training tiles.
    pub crop_size: usize,
    pub zero_shot_iters: usize,
    /// Zero-shot iterations that count as one epoch for the schedule.
    pub zero_shot_iters_per_epoch: usize,
    /// Percentile for the binary image edges.
    pub edge_percentile: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ZeroShot,
            seed: 0,
            n_stages: DEFAULT_STAGES,
            k: DEFAULT_K,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            lr_decay: 0.5,
            lr_decay_every: 10,
            epochs: 60,
            batch_size: 4,
            crop_size: 256,
            zero_shot_iters: 500,
            zero_shot_iters_per_epoch: 100,
            edge_percentile: 50.0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam coefficients must satisfy 0 <= beta < 1 and epsilon > 0");
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 || self.zero_shot_iters_per_epoch == 0 {
            return bad("batch_size, lr_decay_every and zero_shot_iters_per_epoch must be positive");
        }
        if !(0.0..=100.0).contains(&self.edge_percentile) {
            return bad("edge_percentile must lie in [0, 100]");
        }
        self.loss.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; dotted keys reach nested tables and
    /// values are parsed as TOML literals, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = raw
                .trim()
                .parse::<toml::Value>()
                .or_else(|_| format!("v = {}", raw.trim()).parse::<toml::Table>().map(|mut t| t.remove("v").expect("key v")))
                .unwrap_or_else(|_| toml::Value::String(raw.trim().to_string()));
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .get_mut(*p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config section {p:?}")))?;
            }
            if !table.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(last.to_string(), value);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    /// Short stable digest of the serialized configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: params.zero_grads(),
            second: params.zero_grads(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[LayerGrad], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((layer, g), m), v) in params.layers_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let pairs = [(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight), (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias)];
            for (p, g, m, v) in pairs {
                for i in 0..p.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                }
            }
        }
    }
}

/// One optimisation step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl IterationLog {
    /// Line-delimited JSON with one entry per (term, stage).
    pub fn to_json_line(&self) -> String {
        let mut terms = Vec::new();
        let stages = self.loss.stages.iter().enumerate().map(|(s, v)| (s.to_string(), v));
        for (stage, values) in stages.chain(std::iter::once(("final".to_string(), &self.loss.final_output))) {
            for term in LossTerm::ALL {
                terms.push(serde_json::json!({"term": term.name(), "stage": stage, "value": values.get(term)}));
            }
        }
        serde_json::json!({
            "iteration": self.iteration,
            "epoch": self.epoch,
            "lr": self.lr,
            "total": self.loss.total,
            "terms": terms,
        })
        .to_string()
    }
}

/// Loss, parameter gradients and outputs of one forward/backward pass.
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub grads: Vec<LayerGrad>,
    pub output: NetworkOutput,
}

/// Forward and backward pass of the full network on one pair.
pub fn evaluate_gradients(
    params: &ModelParams,
    guidance: &Guidance,
    targets: &LossTargets,
    depth_lr: &DepthMap,
    weights: &LossWeights,
) -> Result<Evaluation> {
    let graph = build_graph(params, guidance, depth_lr, false)?;
    let output = graph.output();
    let (loss, og) = total_loss_grad(&output, targets, weights)?;
    let mut grads = params.zero_grads();
    if loss.total.is_finite() {
        let plane = |t: &Tensor, g: Vec<f64>| Tensor::from_vec(1, t.height, t.width, g);
        let mut seeds = Vec::with_capacity(2 * graph.stages.len() + 1);
        for (&(d, c), (gd, gc)) in graph.stages.iter().zip(og.stages) {
            seeds.push((d, plane(graph.tape.value(d), gd)));
            seeds.push((c, plane(graph.tape.value(c), gc)));
        }
        seeds.push((graph.depth_out, plane(graph.tape.value(graph.depth_out), og.final_output)));
        graph.tape.backward(params, seeds, &mut grads);
    }
    Ok(Evaluation { loss, grads, output })
}

fn check_pair(image: &GuidanceImage, depth_lr: &DepthMap, n_stages: usize) -> Result<()> {
    let f = 1 << n_stages;
    if image.dims() != (depth_lr.height() * f, depth_lr.width() * f) {
        return Err(Error::dims(format!(
            "image {}x{} is not {f}x the depth {}x{}",
            image.height(),
            image.width(),
            depth_lr.height(),
            depth_lr.width()
        )));
    }
    if depth_lr.valid_count() == 0 {
        return Err(Error::AllInvalid("low-resolution input".into()));
    }
    Ok(())
}

fn params_finite(params: &ModelParams) -> bool {
    params.layers().iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
}

#[derive(Debug)]
pub struct RefineOutcome {
    pub depth: DepthMap,
    pub params: ModelParams,
    pub log: Vec<IterationLog>,
    /// Set when optimisation stopped on a non-finite loss; `depth` and
    /// `params` then come from the last finite iterate.
    pub diverged: Option<Error>,
}

/// Optimises a freshly initialised network on a single pair and returns its
/// final prediction. `observer` sees every iteration as it completes.
pub fn zero_shot_refine(
    image: &GuidanceImage,
    depth_lr: &DepthMap,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&IterationLog),
) -> Result<RefineOutcome> {
    config.validate()?;
    check_pair(image, depth_lr, config.n_stages)?;
    let guidance = Guidance::new(image, config.n_stages, config.edge_percentile)?;
    let targets = LossTargets::new(&guidance, depth_lr)?;
    let mut params = init_params(config.seed, config.n_stages, config.k)?;
    let mut adam = Adam::new(&params, config.beta1, config.beta2, config.epsilon);
    let mut log = Vec::with_capacity(config.zero_shot_iters);
    let mut diverged = None;
    for iteration in 0..config.zero_shot_iters {
        let epoch = iteration / config.zero_shot_iters_per_epoch;
        let lr = config.lr_at(epoch);
        let eval = evaluate_gradients(&params, &guidance, &targets, depth_lr, &config.loss)?;
        if !eval.loss.total.is_finite() {
            diverged = Some(Error::Diverged {
                iteration,
                detail: format!("total loss {}", eval.loss.total),
            });
            break;
        }
        let entry = IterationLog {
            iteration,
            epoch,
            lr,
            loss: eval.loss,
        };
        observer(&entry);
        log.push(entry);
        let before = params.clone();
        adam.step(&mut params, &eval.grads, lr);
        if !params_finite(&params) {
            params = before;
            diverged = Some(Error::Diverged {
                iteration,
                detail: "non-finite parameters after update".into(),
            });
            break;
        }
    }
    let depth = crate::model::network_forward(&params, &guidance, depth_lr)?.depth;
    if diverged.is_none() && depth.values().iter().any(|v| !v.is_finite()) {
        diverged = Some(Error::Diverged {
            iteration: config.zero_shot_iters,
            detail: "non-finite prediction".into(),
        });
    }
    Ok(RefineOutcome {
        depth,
        params,
        log,
        diverged,
    })
}

/// A training pair with no ground truth attached.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: GuidanceImage,
    pub depth_lr: DepthMap,
}

impl TryFrom<&RGBDSample> for TrainSample {
    type Error = Error;

    fn try_from(s: &RGBDSample) -> Result<Self> {
        let depth_lr = s
            .depth_lr
            .clone()
            .ok_or_else(|| Error::Contract(format!("sample {} has no low-resolution depth", s.id)))?;
        Ok(Self {
            id: s.id.clone(),
            image: s.image.clone(),
            depth_lr,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<IterationLog>,
    pub checkpoints: Vec<PathBuf>,
}

fn random_tile(sample: &TrainSample, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(GuidanceImage, DepthMap)> {
    let f = 1 << config.n_stages;
    let (lh, lw) = sample.depth_lr.dims();
    let side = (config.crop_size / f).max(1);
    let (th, tw) = (side.min(lh), side.min(lw));
    let top = rng.random_range(0..=lh - th);
    let left = rng.random_range(0..=lw - tw);
    let depth = sample.depth_lr.crop(top, left, th, tw)?;
    let image = sample.image.crop(top * f, left * f, th * f, tw * f)?;
    Ok((image, depth))
}

/// Self-supervised training over `samples`, one Adam step per batch of
/// random tiles. A checkpoint is written to `checkpoint_dir` after every
/// epoch.
pub fn train(
    config: &TrainConfig,
    samples: &[TrainSample],
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    for s in samples {
        check_pair(&s.image, &s.depth_lr, config.n_stages)?;
    }
    let mut params = init_params(config.seed, config.n_stages, config.k)?;
    let mut adam = Adam::new(&params, config.beta1, config.beta2, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_da7a);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zero_grads();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (image, depth) = random_tile(&samples[i], config, &mut rng)?;
                let guidance = Guidance::new(&image, config.n_stages, config.edge_percentile)?;
                let targets = LossTargets::new(&guidance, &depth)?;
                let eval = evaluate_gradients(&params, &guidance, &targets, &depth, &config.loss)?;
                if !eval.loss.total.is_finite() {
                    return Err(Error::Diverged {
                        iteration,
                        detail: format!("total loss {} on sample {}", eval.loss.total, samples[i].id),
                    });
                }
                for (acc, g) in grads.iter_mut().zip(&eval.grads) {
                    acc.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += b / batch.len() as f64);
                    acc.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b / batch.len() as f64);
                }
                losses.push(eval.loss);
            }
            let entry = IterationLog {
                iteration,
                epoch,
                lr,
                loss: mean_breakdown(&losses),
            };
            observer(&entry);
            log.push(entry);
            adam.step(&mut params, &grads, lr);
            if !params_finite(&params) {
                return Err(Error::Diverged {
                    iteration,
                    detail: "non-finite parameters after update".into(),
                });
            }
            iteration += 1;
        }
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.safetensors"));
            checkpoint::save(&params, config, &path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        checkpoints,
    })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut out = items[0].clone();
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    out.total = avg(&|b| b.total);
    for s in 0..out.stages.len() {
        out.stages[s].sleeve = avg(&|b| b.stages[s].sleeve);
        out.stages[s].cycle = avg(&|b| b.stages[s].cycle);
        out.stages[s].false_edge = avg(&|b| b.stages[s].false_edge);
        out.stages[s].tv = avg(&|b| b.stages[s].tv);
    }
    out.final_output.sleeve = avg(&|b| b.final_output.sleeve);
    out.final_output.false_edge = avg(&|b| b.final_output.false_edge);
    out.final_output.tv = avg(&|b| b.final_output.tv);
    out
}

/// Configuration with one loss term removed: the sleeve becomes plain L1
/// (zero width), every other term gets weight 0.
pub fn ablated_config(config: &TrainConfig, leave_out: LossTerm) -> TrainConfig {
    let mut cfg = config.clone();
    match leave_out {
        LossTerm::Sleeve => cfg.loss.sleeve_width = 0.0,
        LossTerm::Cycle => {
            cfg.loss.cycle = 0.0;
            cfg.loss.use_cycle = false;
        }
        LossTerm::FalseEdge => {
            cfg.loss.false_edge = 0.0;
            cfg.loss.use_false_edge = false;
        }
        LossTerm::Tv => {
            cfg.loss.tv = 0.0;
            cfg.loss.use_tv = false;
        }
    }
    cfg
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub effective: TrainConfig,
    pub reports: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

/// Refines (zero-shot mode) or trains then predicts (train mode) with
/// `leave_out` removed, and evaluates each test sample against its ground
/// truth. `leave_out = None` runs the full configuration.
pub fn run_ablation(
    config: &TrainConfig,
    train_set: &[RGBDSample],
    test_set: &[RGBDSample],
    leave_out: Option<LossTerm>,
) -> Result<AblationResult> {
    let effective = match leave_out {
        Some(term) => ablated_config(config, term),
        None => config.clone(),
    };
    let trained = match effective.mode {
        Mode::Train => {
            let samples = train_set.iter().map(TrainSample::try_from).collect::<Result<Vec<_>>>()?;
            Some(train(&effective, &samples, None, &mut |_| {})?.params)
        }
        Mode::ZeroShot => None,
    };
    let mut reports = Vec::with_capacity(test_set.len());
    for s in test_set {
        let lr = s
            .depth_lr
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no low-resolution depth", s.id)))?;
        let gt = s
            .depth_hr
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("sample {} has no ground truth", s.id)))?;
        let pred = match &trained {
            Some(params) => {
                let g = Guidance::new(&s.image, effective.n_stages, effective.edge_percentile)?;
                crate::model::network_forward(params, &g, lr)?.depth
            }
            None => {
                let out = zero_shot_refine(&s.image, lr, &effective, &mut |_| {})?;
                if let Some(e) = out.diverged {
                    return Err(e);
                }
                out.depth
            }
        };
        reports.push((s.id.clone(), evaluate(&pred, gt)?));
    }
    let mean = aggregate(&reports.iter().map(|(_, r)| *r).collect::<Vec<_>>())?;
    Ok(AblationResult {
        effective,
        reports,
        mean,
    })
}
