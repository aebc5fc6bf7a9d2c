//! The cascaded x2 super-resolution network and its per-stage cycle
//! transformers.
//!
//! Every block is a straight stack of convolutions with 8 channels, except
//! for its last two layers (`8 -> k` then a `1x1` projection to one channel).
//! A DSR stage is
//!
//! ```text
//! depth (H x W) -> conv3 -> conv3 -> deconv x2 -> conv3 x3 ─┐
//!                                          guidance (2H x 2W) ┴ concat -> refine ─┐
//! depth ── bilinear x2 ───────────────────────────────────────────────────────── + -> depth (2H x 2W)
//! ```
//!
//! and the refinement block is a dilated inception stage (dilations 1, 2, 4
//! and 8, fused by a `1x1`) followed by ten convolutions. After the last
//! stage, a standalone refinement block sees `[depth, gray, edges]` and adds
//! its output to the depth.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::edges::guidance_stack;
use crate::error::{Error, Result};
use crate::maps::{build_pyramid, DepthMap, GuidanceImage};
use crate::nn::{ConvShape, LayerGrad, Layers, NodeId, Tape, Tensor};

pub const BASE_WIDTH: usize = 8;
pub const DILATIONS: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_K: usize = 16;
pub const DEFAULT_STAGES: usize = 3;

const UP_PATH_LAYERS: usize = 6;
const DECONV_LAYER: usize = 2;
const REFINE_CONVS: usize = 10;
const CYCLE_CONV3: usize = 15;
const GUIDANCE_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Dsr(usize),
    FinalRefine,
    Cycle(usize),
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Dsr(s) => write!(f, "dsr_{s}"),
            Block::FinalRefine => f.write_str("final_refine"),
            Block::Cycle(s) => write!(f, "cycle_{s}"),
        }
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("unknown block name {s:?}"));
        if s == "final_refine" {
            return Ok(Block::FinalRefine);
        }
        let (kind, idx) = s.rsplit_once('_').ok_or_else(bad)?;
        let idx: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "dsr" => Ok(Block::Dsr(idx)),
            "cycle" => Ok(Block::Cycle(idx)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerKey {
    pub block: Block,
    pub index: usize,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.block, self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub key: LayerKey,
    pub shape: ConvShape,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn conv3(cin: usize, cout: usize, dilation: usize) -> ConvShape {
    ConvShape { cin, cout, kernel: 3, dilation }
}

fn conv1(cin: usize, cout: usize) -> ConvShape {
    ConvShape { cin, cout, kernel: 1, dilation: 1 }
}

fn refine_plan(cin: usize, k: usize) -> Vec<ConvShape> {
    let mut plan: Vec<ConvShape> = DILATIONS.iter().map(|&d| conv3(cin, BASE_WIDTH, d)).collect();
    plan.push(conv1(DILATIONS.len() * BASE_WIDTH, BASE_WIDTH));
    plan.extend((0..REFINE_CONVS - 2).map(|_| conv3(BASE_WIDTH, BASE_WIDTH, 1)));
    plan.push(conv3(BASE_WIDTH, k, 1));
    plan.push(conv1(k, 1));
    plan
}

/// Layer shapes of one block, in evaluation order.
pub fn block_plan(block: Block, k: usize) -> Vec<ConvShape> {
    match block {
        Block::Dsr(_) => {
            let mut plan = vec![conv3(1, BASE_WIDTH, 1)];
            plan.extend((1..UP_PATH_LAYERS).map(|_| conv3(BASE_WIDTH, BASE_WIDTH, 1)));
            plan.extend(refine_plan(BASE_WIDTH + GUIDANCE_CHANNELS, k));
            plan
        }
        Block::FinalRefine => refine_plan(1 + GUIDANCE_CHANNELS, k),
        Block::Cycle(_) => {
            let mut plan = vec![conv3(2, BASE_WIDTH, 1)];
            plan.extend((1..CYCLE_CONV3 - 1).map(|_| conv3(BASE_WIDTH, BASE_WIDTH, 1)));
            plan.push(conv3(BASE_WIDTH, k, 1));
            plan.push(conv1(k, 1));
            plan
        }
    }
}

/// All blocks of an `n_stages` network in storage order.
pub fn blocks(n_stages: usize) -> Vec<Block> {
    let mut out: Vec<Block> = (0..n_stages).map(Block::Dsr).collect();
    out.push(Block::FinalRefine);
    out.extend((0..n_stages).map(Block::Cycle));
    out
}

/// Closed-form number of learnable scalars.
pub fn param_count(n_stages: usize, k: usize) -> usize {
    n_stages * (18594 + 148 * k) + 5833 + 74 * k
}

/// Every learnable tensor of the network, keyed by block and layer index.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    n_stages: usize,
    k: usize,
    layers: Vec<Layer>,
    starts: HashMap<Block, usize>,
}

/// He-initialized parameters; each block's output projection and every bias
/// start at zero, so the untrained network reproduces the cascaded bilinear
/// upsampling of its input.
pub fn init_params(seed: u64, n_stages: usize, k: usize) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(n_stages, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        if layer.shape.kernel == 1 && layer.shape.cout == 1 {
            continue;
        }
        let fan_in = (layer.shape.cin * layer.shape.kernel * layer.shape.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut layer.weight {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}

impl ModelParams {
    /// All-zero parameters with the given architecture.
    pub fn zeros(n_stages: usize, k: usize) -> Result<Self> {
        if k < BASE_WIDTH {
            return Err(Error::Contract(format!("penultimate width k = {k} must be at least {BASE_WIDTH}")));
        }
        if n_stages == 0 {
            return Err(Error::Contract("at least one stage is required".into()));
        }
        let mut layers = Vec::with_capacity(blocks(n_stages).len() * 21);
        let mut starts = HashMap::new();
        for block in blocks(n_stages) {
            starts.insert(block, layers.len());
            for (index, shape) in block_plan(block, k).into_iter().enumerate() {
                layers.push(Layer {
                    key: LayerKey { block, index },
                    shape,
                    weight: vec![0.0; shape.weight_len()],
                    bias: vec![0.0; shape.cout],
                });
            }
        }
        Ok(Self {
            n_stages,
            k,
            layers,
            starts,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat layer index of `(block, index)`.
    pub fn index_of(&self, block: Block, index: usize) -> usize {
        self.starts[&block] + index
    }

    pub fn layer(&self, key: LayerKey) -> Option<&Layer> {
        let start = *self.starts.get(&key.block)?;
        self.layers.get(start + key.index).filter(|l| l.key == key)
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers.iter().map(|l| LayerGrad::zeros(l.shape)).collect()
    }
}

impl Layers for ModelParams {
    fn shape(&self, layer: usize) -> ConvShape {
        self.layers[layer].shape
    }

    fn weight(&self, layer: usize) -> &[f64] {
        &self.layers[layer].weight
    }

    fn bias(&self, layer: usize) -> &[f64] {
        &self.layers[layer].bias
    }
}

/// Per-level guidance for a network: grayscale plus binary edges, finest
/// level first.
#[derive(Clone, Debug, PartialEq)]
pub struct Guidance {
    levels: Vec<GuidanceImage>,
}

impl Guidance {
    pub fn new(image_hr: &GuidanceImage, n_stages: usize, percentile: f64) -> Result<Self> {
        let pyramid = build_pyramid(image_hr, n_stages)?;
        let levels = pyramid
            .levels
            .iter()
            .map(|level| guidance_stack(level, percentile))
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    /// Guidance used by stage `stage` (0 = coarsest) of an `n_stages` network.
    pub fn for_stage(&self, stage: usize) -> &GuidanceImage {
        &self.levels[self.levels.len() - 1 - stage]
    }

    pub fn finest(&self) -> &GuidanceImage {
        &self.levels[0]
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Restricts every level to the window `(top, left, height, width)` of
    /// the finest level; offsets and sizes must be divisible by the coarsest
    /// scale factor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(l, g)| {
                let f = 1 << l;
                g.crop(top / f, left / f, height / f, width / f)
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

/// Node handles of one recorded forward pass.
#[derive(Debug)]
pub struct Graph {
    pub tape: Tape,
    pub depth_in: NodeId,
    /// `(depth, cycled edges)` per stage, coarse to fine.
    pub stages: Vec<(NodeId, NodeId)>,
    pub depth_out: NodeId,
}

fn refine_nodes(tape: &mut Tape, params: &ModelParams, first: usize, features: NodeId) -> NodeId {
    let branches: Vec<NodeId> = (0..DILATIONS.len())
        .map(|b| tape.conv(params, features, first + b, true))
        .collect();
    let inception = tape.concat(&branches);
    let mut x = tape.conv(params, inception, first + DILATIONS.len(), true);
    let last = first + DILATIONS.len() + 1 + REFINE_CONVS;
    for layer in first + DILATIONS.len() + 1..last {
        x = tape.conv(params, x, layer, layer + 1 < last);
    }
    x
}

fn dsr_nodes(tape: &mut Tape, params: &ModelParams, stage: usize, guidance: NodeId, depth: NodeId) -> NodeId {
    let first = params.index_of(Block::Dsr(stage), 0);
    let mut x = depth;
    for layer in first..first + UP_PATH_LAYERS {
        if layer == first + DECONV_LAYER {
            x = tape.zero_stuff(x);
        }
        x = tape.conv(params, x, layer, true);
    }
    let features = tape.concat(&[x, guidance]);
    let residual = refine_nodes(tape, params, first + UP_PATH_LAYERS, features);
    let base = tape.upsample2(depth);
    tape.add(base, residual)
}

fn cycle_nodes(tape: &mut Tape, params: &ModelParams, stage: usize, depth: NodeId) -> NodeId {
    let first = params.index_of(Block::Cycle(stage), 0);
    let edges = tape.sobel_magnitude(depth);
    let mut x = tape.concat(&[depth, edges]);
    let last = first + CYCLE_CONV3 + 1;
    for layer in first..last {
        x = tape.conv(params, x, layer, layer + 1 < last);
    }
    x
}

fn check_stage_dims(guidance: &GuidanceImage, depth: (usize, usize)) -> Result<()> {
    if guidance.dims() != (2 * depth.0, 2 * depth.1) {
        return Err(Error::dims(format!(
            "guidance {}x{} is not twice the depth {}x{}",
            guidance.height(),
            guidance.width(),
            depth.0,
            depth.1
        )));
    }
    Ok(())
}

/// Records the full network on a fresh tape. When `track_input` is set the
/// backward pass also reports the gradient with respect to `depth_lr`.
pub fn build_graph(
    params: &ModelParams,
    guidance: &Guidance,
    depth_lr: &DepthMap,
    track_input: bool,
) -> Result<Graph> {
    let n = params.n_stages();
    if guidance.n_levels() != n {
        return Err(Error::dims(format!("{} guidance levels for {n} stages", guidance.n_levels())));
    }
    let mut tape = Tape::new();
    let depth_in = tape.leaf(depth_lr.to_tensor(), track_input);
    let mut depth = depth_in;
    let mut dims = depth_lr.dims();
    let mut stages = Vec::with_capacity(n);
    for stage in 0..n {
        let g = guidance.for_stage(stage);
        check_stage_dims(g, dims)?;
        let gnode = tape.leaf(g.to_tensor(), false);
        depth = dsr_nodes(&mut tape, params, stage, gnode, depth);
        let cycled = cycle_nodes(&mut tape, params, stage, depth);
        stages.push((depth, cycled));
        dims = (2 * dims.0, 2 * dims.1);
    }
    let gnode = tape.leaf(guidance.finest().to_tensor(), false);
    let features = tape.concat(&[depth, gnode]);
    let residual = refine_nodes(&mut tape, params, params.index_of(Block::FinalRefine, 0), features);
    let depth_out = tape.add(depth, residual);
    Ok(Graph {
        tape,
        depth_in,
        stages,
        depth_out,
    })
}

/// Prediction of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub depth: DepthMap,
    /// Predicted image-edge field on the same grid as `depth`.
    pub cycled_edges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput {
    /// Coarse to fine.
    pub stages: Vec<StageOutput>,
    pub depth: DepthMap,
}

fn to_depth(t: &Tensor) -> DepthMap {
    DepthMap::from_prediction(t.height, t.width, t.data.clone())
}

impl Graph {
    pub fn output(&self) -> NetworkOutput {
        let stages = self
            .stages
            .iter()
            .map(|&(d, c)| StageOutput {
                depth: to_depth(self.tape.value(d)),
                cycled_edges: self.tape.value(c).data.clone(),
            })
            .collect();
        NetworkOutput {
            stages,
            depth: to_depth(self.tape.value(self.depth_out)),
        }
    }
}

pub fn network_forward(params: &ModelParams, guidance: &Guidance, depth_lr: &DepthMap) -> Result<NetworkOutput> {
    Ok(build_graph(params, guidance, depth_lr, false)?.output())
}

/// One DSR stage in isolation; `guidance` is the two-channel stack at twice
/// the depth resolution.
pub fn dsr_forward(params: &ModelParams, stage: usize, guidance: &GuidanceImage, depth_lr: &DepthMap) -> Result<DepthMap> {
    check_stage(params, stage)?;
    check_guidance_channels(guidance)?;
    check_stage_dims(guidance, depth_lr.dims())?;
    let mut tape = Tape::new();
    let d = tape.leaf(depth_lr.to_tensor(), false);
    let g = tape.leaf(guidance.to_tensor(), false);
    let out = dsr_nodes(&mut tape, params, stage, g, d);
    Ok(to_depth(tape.value(out)))
}

/// Refinement block of `block` (a DSR stage or the final block) applied to a
/// feature stack with the channel count that block expects.
pub fn refine_forward(params: &ModelParams, block: Block, features: &Tensor) -> Result<DepthMap> {
    let first = match block {
        Block::Dsr(s) => {
            check_stage(params, s)?;
            params.index_of(block, UP_PATH_LAYERS)
        }
        Block::FinalRefine => params.index_of(block, 0),
        Block::Cycle(_) => return Err(Error::Contract("cycle blocks have no refinement stage".into())),
    };
    let cin = params.shape(first).cin;
    if features.channels != cin {
        return Err(Error::dims(format!("{block} refinement expects {cin} channels, got {}", features.channels)));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone(), false);
    let out = refine_nodes(&mut tape, params, first, x);
    Ok(to_depth(tape.value(out)))
}

/// Geometry-to-image transformer of one stage.
pub fn cycle_forward(params: &ModelParams, stage: usize, depth: &DepthMap) -> Result<Vec<f64>> {
    check_stage(params, stage)?;
    let mut tape = Tape::new();
    let d = tape.leaf(depth.to_tensor(), false);
    let out = cycle_nodes(&mut tape, params, stage, d);
    Ok(tape.value(out).data.clone())
}

fn check_stage(params: &ModelParams, stage: usize) -> Result<()> {
    if stage >= params.n_stages() {
        return Err(Error::Contract(format!("stage {stage} of a {}-stage network", params.n_stages())));
    }
    Ok(())
}

fn check_guidance_channels(g: &GuidanceImage) -> Result<()> {
    if g.channels() != GUIDANCE_CHANNELS {
        return Err(Error::Contract(format!("guidance must have 2 channels, got {}", g.channels())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::upsample_bilinear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(params: &mut ModelParams, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in params.layers_mut() {
            let s = scale / ((l.shape.cin * l.shape.kernel * l.shape.kernel) as f64).sqrt();
            for w in &mut l.weight {
                *w = rng.random_range(-s..s) * 1.7;
            }
            for b in &mut l.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> GuidanceImage {
        GuidanceImage::new(n, n, c, (0..c * n * n).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_depth(rng: &mut ChaCha8Rng, n: usize) -> DepthMap {
        DepthMap::new(n, n, (0..n * n).map(|_| rng.random_range(0.5..10.0)).collect()).unwrap()
    }

    #[test]
    fn counts_match_closed_form() {
        for n in 1..=3 {
            for k in [8, 16] {
                let p = ModelParams::zeros(n, k).unwrap();
                assert_eq!(p.count(), param_count(n, k), "n={n} k={k}");
            }
        }
        assert_eq!(param_count(3, 16), 69903);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(7, 2, 16).unwrap();
        let b = init_params(7, 2, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(8, 2, 16).unwrap());
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn narrow_penultimate_width_is_rejected() {
        assert!(matches!(init_params(0, 3, 7), Err(Error::Contract(_))));
        assert!(matches!(init_params(0, 0, 16), Err(Error::Contract(_))));
    }

    #[test]
    fn plans_follow_channel_contract() {
        for block in blocks(2) {
            let plan = block_plan(block, 12);
            let n = plan.len();
            assert_eq!((plan[n - 2].cout, plan[n - 1].cout), (12, 1));
            assert_eq!(plan[n - 1].kernel, 1);
            assert!(plan[..n - 2].iter().all(|s| s.cout == BASE_WIDTH));
            assert!(plan[..n - 1].iter().all(|s| s.kernel == 3 || s.cin == 32));
        }
        assert_eq!(block_plan(Block::Cycle(0), 16).len(), 16);
        assert_eq!(block_plan(Block::Cycle(0), 16).iter().filter(|s| s.kernel == 3).count(), 15);
        let refine = block_plan(Block::FinalRefine, 16);
        let dil: Vec<usize> = refine[..4].iter().map(|s| s.dilation).collect();
        assert_eq!(dil, [1, 2, 4, 8]);
        assert_eq!(refine.len() - DILATIONS.len() - 1, 10);
    }

    #[test]
    fn block_names_round_trip() {
        for b in blocks(3) {
            assert_eq!(b.to_string().parse::<Block>().unwrap(), b);
        }
        assert!("dsr_x".parse::<Block>().is_err());
    }

    #[test]
    fn untrained_network_is_cascaded_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = init_params(1, 2, 8).unwrap();
        let img = random_image(&mut rng, 3, 32);
        let d = random_depth(&mut rng, 8);
        let g = Guidance::new(&img, 2, 50.0).unwrap();
        let out = network_forward(&params, &g, &d).unwrap();
        let want = upsample_bilinear(&upsample_bilinear(&d, 2).unwrap(), 2).unwrap();
        assert_eq!(out.depth.dims(), (32, 32));
        for (a, b) in out.depth.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.stages.iter().all(|s| s.cycled_edges.iter().all(|e| *e == 0.0)));
    }

    #[test]
    fn stage_shapes_grow_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut params = init_params(2, 3, 16).unwrap();
        randomize(&mut params, 3, 1.0);
        let img = random_image(&mut rng, 3, 64);
        let d = random_depth(&mut rng, 8);
        let out = network_forward(&params, &Guidance::new(&img, 3, 50.0).unwrap(), &d).unwrap();
        let sizes: Vec<usize> = out.stages.iter().map(|s| s.depth.height()).collect();
        assert_eq!(sizes, [16, 32, 64]);
        assert_eq!(out.depth.dims(), (64, 64));
        assert!(out.stages.iter().all(|s| s.cycled_edges.len() == s.depth.values().len()));
        assert!(out.depth.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_stage_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = init_params(0, 1, 8).unwrap();
        let out = network_forward(
            &params,
            &Guidance::new(&random_image(&mut rng, 1, 16), 1, 50.0).unwrap(),
            &random_depth(&mut rng, 8),
        )
        .unwrap();
        assert_eq!(out.stages.len(), 1);
        assert_eq!(out.depth.dims(), (16, 16));
    }

    #[test]
    fn mismatched_guidance_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = init_params(0, 2, 8).unwrap();
        let g = Guidance::new(&random_image(&mut rng, 1, 32), 2, 50.0).unwrap();
        assert!(matches!(
            network_forward(&params, &g, &random_depth(&mut rng, 16)),
            Err(Error::Dimension(_))
        ));
        let stack = guidance_stack(&random_image(&mut rng, 1, 30), 50.0).unwrap();
        assert!(dsr_forward(&params, 0, &stack, &random_depth(&mut rng, 16)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let params = ModelParams::zeros(1, 8).unwrap();
        let stack = guidance_stack(&random_image(&mut rng, 1, 16), 50.0).unwrap();
        let d = random_depth(&mut rng, 8);
        let out = dsr_forward(&params, 0, &stack, &d).unwrap();
        let base = upsample_bilinear(&d, 2).unwrap();
        for (a, b) in out.values().iter().zip(base.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let feat = Tensor::zeros(10, 8, 8);
        let r = refine_forward(&params, Block::Dsr(0), &feat).unwrap();
        assert!(r.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn guidance_edges_affect_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut params = init_params(3, 1, 16).unwrap();
        randomize(&mut params, 4, 1.0);
        let stack = guidance_stack(&random_image(&mut rng, 1, 16), 50.0).unwrap();
        let d = random_depth(&mut rng, 8);
        let a = dsr_forward(&params, 0, &stack, &d).unwrap();
        let mut data = stack.data().to_vec();
        let off = 256 + 5 * 16 + 7;
        data[off] = 1.0 - data[off];
        let flipped = GuidanceImage::new(16, 16, 2, data).unwrap();
        let b = dsr_forward(&params, 0, &flipped, &d).unwrap();
        assert!(a.values().iter().zip(b.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn inception_reach_is_bounded_by_dilation() {
        // Probe the concatenated inception output at the centre of a 48x48
        // grid; perturb the input at growing Chebyshev distances.
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut params = init_params(5, 1, 8).unwrap();
        randomize(&mut params, 6, 1.0);
        let first = params.index_of(Block::FinalRefine, 0);
        let n = 48;
        let c = n / 2;
        let base = Tensor::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random()).collect());
        let inception = |params: &ModelParams, x: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone(), false);
            let branches: Vec<NodeId> = (0..4).map(|b| tape.conv(params, leaf, first + b, true)).collect();
            let cat = tape.concat(&branches);
            let v = tape.value(cat);
            (0..v.channels).map(|ch| v.at(ch, c, c)).collect()
        };
        let probe = |params: &ModelParams, dist: usize| -> bool {
            let mut x = base.clone();
            for ch in 0..3 {
                x.plane_mut(ch)[c * n + c + dist] += 1.0;
            }
            inception(params, &x) != inception(params, &base)
        };
        assert!(probe(&params, 8));
        assert!(!probe(&params, 9));
        assert!(!probe(&params, 17));
        let d8 = first + 3;
        params.layers_mut()[d8].weight.fill(0.0);
        assert!(probe(&params, 4));
        assert!(!probe(&params, 8));
        assert!(!probe(&params, 17));
    }

    #[test]
    fn cycle_output_shape_and_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut params = init_params(8, 1, 8).unwrap();
        randomize(&mut params, 9, 1.0);
        let d = random_depth(&mut rng, 12);
        let e = cycle_forward(&params, 0, &d).unwrap();
        assert_eq!(e.len(), 144);

        let mut tape = Tape::new();
        let leaf = tape.leaf(d.to_tensor(), true);
        let out = cycle_nodes(&mut tape, &params, 0, leaf);
        let seed = Tensor::from_vec(1, 12, 12, vec![1.0; 144]);
        let mut grads = params.zero_grads();
        let g = tape.backward(&params, vec![(out, seed)], &mut grads);
        let gi = &g[0].1;
        assert!(gi.data.iter().any(|v| *v != 0.0));

        let i = 5 * 12 + 6;
        let h = 1e-6;
        let sum = |d: &DepthMap| cycle_forward(&params, 0, d).unwrap().iter().sum::<f64>();
        let mut vp = d.values().to_vec();
        vp[i] += h;
        let mut vm = d.values().to_vec();
        vm[i] -= h;
        let fd = (sum(&DepthMap::new(12, 12, vp).unwrap()) - sum(&DepthMap::new(12, 12, vm).unwrap())) / (2.0 * h);
        assert!((fd - gi.data[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "{fd} vs {}", gi.data[i]);
    }
}
