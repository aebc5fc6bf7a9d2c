//! Training objectives. Every term is a mean over pixels and comes with its
//! analytic gradient with respect to the prediction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::edges::{binary_edges, sobel_xy, sobel_xy_adjoint, EdgeMap};
use crate::error::{Error, Result};
use crate::maps::{DepthMap, GuidanceImage};
use crate::model::{Guidance, NetworkOutput};
use crate::resample::upsample_bilinear;

/// Smoothing constant of the total-variation term.
pub const TV_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Sleeve,
    Cycle,
    FalseEdge,
    Tv,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Sleeve, LossTerm::Cycle, LossTerm::FalseEdge, LossTerm::Tv];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Sleeve => "sleeve",
            LossTerm::Cycle => "cycle",
            LossTerm::FalseEdge => "false_edge",
            LossTerm::Tv => "tv",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

/// How the depth-side edge strength enters the false-edge term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeResponse {
    /// The Sobel magnitude itself.
    Magnitude,
    /// `m^2 / (m^2 + scale^2)`: quadratic for gentle slopes, saturating at
    /// steps, so spreading a step over many pixels lowers the penalty.
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sleeve: f64,
    pub cycle: f64,
    pub false_edge: f64,
    pub tv: f64,
    /// Half-width of the sleeve dead zone, meters.
    pub sleeve_width: f64,
    pub edge_response: EdgeResponse,
    /// Magnitude scale of the saturating response, meters.
    pub edge_scale: f64,
    pub use_sleeve: bool,
    pub use_cycle: bool,
    pub use_false_edge: bool,
    pub use_tv: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sleeve: 1.0,
            cycle: 1.0,
            false_edge: 0.1,
            tv: 0.1,
            sleeve_width: 0.05,
            edge_response: EdgeResponse::Saturating,
            edge_scale: 0.3,
            use_sleeve: true,
            use_cycle: true,
            use_false_edge: true,
            use_tv: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.sleeve, self.cycle, self.false_edge, self.tv, self.sleeve_width, self.edge_scale];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights and widths must be finite and nonnegative".into()));
        }
        if self.edge_response == EdgeResponse::Saturating && self.edge_scale == 0.0 {
            return Err(Error::Config("saturating edge response needs a positive edge_scale".into()));
        }
        Ok(())
    }

    /// Weight actually applied to `term` (0 when disabled).
    pub fn effective(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Sleeve if self.use_sleeve => self.sleeve,
            LossTerm::Cycle if self.use_cycle => self.cycle,
            LossTerm::FalseEdge if self.use_false_edge => self.false_edge,
            LossTerm::Tv if self.use_tv => self.tv,
            _ => 0.0,
        }
    }
}

/// A scalar loss together with its gradient on the prediction grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dims(format!("{what}: {a} vs {b} pixels")));
    }
    Ok(())
}

fn sleeve_plane(pred: &[f64], reference: &[f64], s: f64, mask: &[bool]) -> Result<Evaluated> {
    check_len(pred.len(), reference.len(), "sleeve loss")?;
    check_len(pred.len(), mask.len(), "sleeve mask")?;
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let diff = pred[i] - reference[i];
        let excess = diff.abs() - s;
        if excess > 0.0 {
            value += excess;
            grad[i] = diff.signum() * inv;
        }
    }
    Ok(Evaluated { value: value * inv, grad })
}

/// Mean over `mask` of `max(|reference - pred| - s, 0)`.
pub fn sleeve_loss(pred: &DepthMap, reference: &DepthMap, s: f64, mask: &[bool]) -> Result<f64> {
    Ok(sleeve_loss_grad(pred, reference, s, mask)?.value)
}

pub fn sleeve_loss_grad(pred: &DepthMap, reference: &DepthMap, s: f64, mask: &[bool]) -> Result<Evaluated> {
    if pred.dims() != reference.dims() {
        return Err(Error::dims("sleeve loss: prediction and reference grids differ"));
    }
    sleeve_plane(pred.values(), reference.values(), s, mask)
}

fn cycle_plane(cycled: &[f64], target: &[f64]) -> Result<Evaluated> {
    check_len(cycled.len(), target.len(), "cycle loss")?;
    let inv = 1.0 / cycled.len() as f64;
    let mut value = 0.0;
    let grad = cycled
        .iter()
        .zip(target)
        .map(|(c, t)| {
            let d = c - t;
            value += d.abs();
            if d == 0.0 {
                0.0
            } else {
                d.signum() * inv
            }
        })
        .collect();
    Ok(Evaluated { value: value * inv, grad })
}

/// Mean absolute difference between the cycled edge field and the binary
/// image edges.
pub fn cycle_loss(cycled: &[f64], edges: &EdgeMap) -> Result<f64> {
    Ok(cycle_loss_grad(cycled, edges)?.value)
}

pub fn cycle_loss_grad(cycled: &[f64], edges: &EdgeMap) -> Result<Evaluated> {
    cycle_plane(cycled, &edges.as_f64())
}

/// `gate[i]` is 1 where the image has no edge.
fn false_edge_plane(pred: &[f64], h: usize, w: usize, gate: &[f64], response: EdgeResponse, scale: f64) -> Result<Evaluated> {
    check_len(pred.len(), h * w, "false-edge loss")?;
    check_len(pred.len(), gate.len(), "false-edge gate")?;
    let inv = 1.0 / pred.len() as f64;
    let (mut gx, mut gy) = sobel_xy(pred, h, w);
    let mut value = 0.0;
    let s2 = scale * scale;
    for i in 0..pred.len() {
        let g = gate[i];
        let m2 = gx[i] * gx[i] + gy[i] * gy[i];
        // `factor` is d(response)/d(gx) divided by gx
        let factor = match response {
            EdgeResponse::Magnitude => {
                let m = m2.sqrt();
                value += g * m;
                if m > 0.0 {
                    1.0 / m
                } else {
                    0.0
                }
            }
            EdgeResponse::Saturating => {
                let den = m2 + s2;
                value += g * m2 / den;
                2.0 * s2 / (den * den)
            }
        };
        let f = g * factor * inv;
        gx[i] *= f;
        gy[i] *= f;
    }
    let mut grad = vec![0.0; pred.len()];
    sobel_xy_adjoint(&gx, &gy, h, w, &mut grad);
    Ok(Evaluated { value: value * inv, grad })
}

fn gate_from(edges: &EdgeMap) -> Vec<f64> {
    edges.edges.iter().map(|&e| if e { 0.0 } else { 1.0 }).collect()
}

/// Depth-edge response where the grayscale image `gray` has no edge at
/// percentile `p`, averaged over all pixels.
pub fn false_edge_loss(pred: &DepthMap, gray: &GuidanceImage, p: f64, response: EdgeResponse, scale: f64) -> Result<f64> {
    Ok(false_edge_loss_grad(pred, gray, p, response, scale)?.value)
}

pub fn false_edge_loss_grad(
    pred: &DepthMap,
    gray: &GuidanceImage,
    p: f64,
    response: EdgeResponse,
    scale: f64,
) -> Result<Evaluated> {
    if pred.dims() != gray.dims() {
        return Err(Error::dims("false-edge loss: depth and image grids differ"));
    }
    let edges = binary_edges(gray, p)?;
    false_edge_with_edges(pred, &edges, response, scale)
}

/// As [`false_edge_loss_grad`] with a precomputed image edge map.
pub fn false_edge_with_edges(pred: &DepthMap, edges: &EdgeMap, response: EdgeResponse, scale: f64) -> Result<Evaluated> {
    let (h, w) = pred.dims();
    false_edge_plane(pred.values(), h, w, &gate_from(edges), response, scale)
}

fn tv_plane(pred: &[f64], h: usize, w: usize) -> Result<Evaluated> {
    check_len(pred.len(), h * w, "total variation")?;
    let inv = 1.0 / pred.len() as f64;
    let eps2 = TV_EPSILON * TV_EPSILON;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dv = if y + 1 < h { pred[i + w] - pred[i] } else { 0.0 };
            let dh = if x + 1 < w { pred[i + 1] - pred[i] } else { 0.0 };
            let t = (dv * dv + dh * dh + eps2).sqrt();
            value += t - TV_EPSILON;
            let (a, b) = (dv / t * inv, dh / t * inv);
            if y + 1 < h {
                grad[i + w] += a;
                grad[i] -= a;
            }
            if x + 1 < w {
                grad[i + 1] += b;
                grad[i] -= b;
            }
        }
    }
    Ok(Evaluated { value: value * inv, grad })
}

/// Smoothed isotropic total variation with forward differences.
pub fn tv_reg(pred: &DepthMap) -> f64 {
    tv_reg_grad(pred).value
}

pub fn tv_reg_grad(pred: &DepthMap) -> Evaluated {
    let (h, w) = pred.dims();
    tv_plane(pred.values(), h, w).expect("grid length is consistent")
}

/// Loss values of one output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub sleeve: f64,
    pub cycle: f64,
    pub false_edge: f64,
    pub tv: f64,
}

impl TermValues {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Sleeve => self.sleeve,
            LossTerm::Cycle => self.cycle,
            LossTerm::FalseEdge => self.false_edge,
            LossTerm::Tv => self.tv,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Sleeve => self.sleeve = v,
            LossTerm::Cycle => self.cycle = v,
            LossTerm::FalseEdge => self.false_edge = v,
            LossTerm::Tv => self.tv = v,
        }
    }

    pub fn weighted(&self, weights: &LossWeights) -> f64 {
        LossTerm::ALL.iter().map(|&t| weights.effective(t) * self.get(t)).sum()
    }
}

/// Raw (unweighted) term values per stage and for the final output, plus the
/// weighted total. Disabled terms are reported as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Coarse to fine.
    pub stages: Vec<TermValues>,
    pub final_output: TermValues,
    pub total: f64,
}

/// Fixed per-stage supervision derived from the inputs alone.
#[derive(Clone, Debug)]
pub struct LossTargets {
    /// Bilinear upsample of the sensor depth at each stage resolution.
    references: Vec<DepthMap>,
    /// Binary image edges at each stage resolution.
    edges: Vec<EdgeMap>,
}

impl LossTargets {
    pub fn new(guidance: &Guidance, depth_lr: &DepthMap) -> Result<Self> {
        let n = guidance.n_levels();
        let mut references = Vec::with_capacity(n);
        let mut edges = Vec::with_capacity(n);
        for stage in 0..n {
            let r = upsample_bilinear(depth_lr, 1 << (stage + 1))?;
            let g = guidance.for_stage(stage);
            if r.dims() != g.dims() {
                return Err(Error::dims(format!(
                    "stage {stage}: reference {}x{} vs guidance {}x{}",
                    r.height(),
                    r.width(),
                    g.height(),
                    g.width()
                )));
            }
            edges.push(EdgeMap {
                height: g.height(),
                width: g.width(),
                edges: g.plane(1).iter().map(|&e| e > 0.5).collect(),
                threshold: f64::NAN,
            });
            references.push(r);
        }
        Ok(Self { references, edges })
    }

    pub fn reference(&self, stage: usize) -> &DepthMap {
        &self.references[stage]
    }

    pub fn edges(&self, stage: usize) -> &EdgeMap {
        &self.edges[stage]
    }
}

/// Gradients of the weighted total with respect to every supervised output.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    /// `(depth, cycled edges)` per stage.
    pub stages: Vec<(Vec<f64>, Vec<f64>)>,
    pub final_output: Vec<f64>,
}

fn depth_terms(
    pred: &DepthMap,
    reference: &DepthMap,
    edges: &EdgeMap,
    weights: &LossWeights,
    values: &mut TermValues,
    grad: &mut [f64],
) -> Result<()> {
    let (h, w) = pred.dims();
    let mut add = |term: LossTerm, e: Evaluated| {
        let wt = weights.effective(term);
        values.set(term, e.value);
        for (g, d) in grad.iter_mut().zip(&e.grad) {
            *g += wt * d;
        }
    };
    if weights.use_sleeve {
        add(LossTerm::Sleeve, sleeve_plane(pred.values(), reference.values(), weights.sleeve_width, reference.valid())?);
    }
    if weights.use_false_edge {
        let gate = gate_from(edges);
        add(
            LossTerm::FalseEdge,
            false_edge_plane(pred.values(), h, w, &gate, weights.edge_response, weights.edge_scale)?,
        );
    }
    if weights.use_tv {
        add(LossTerm::Tv, tv_plane(pred.values(), h, w)?);
    }
    Ok(())
}

/// Evaluates every enabled term on every stage and on the final output.
pub fn total_loss_grad(
    output: &NetworkOutput,
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    let n = targets.references.len();
    if output.stages.len() != n {
        return Err(Error::dims(format!("{} stage outputs for {n} targets", output.stages.len())));
    }
    let mut stages = Vec::with_capacity(n);
    let mut stage_grads = Vec::with_capacity(n);
    for (s, out) in output.stages.iter().enumerate() {
        let reference = &targets.references[s];
        if out.depth.dims() != reference.dims() {
            return Err(Error::dims(format!("stage {s} output does not match its pyramid level")));
        }
        let mut values = TermValues::default();
        let mut gd = vec![0.0; out.depth.values().len()];
        depth_terms(&out.depth, reference, &targets.edges[s], weights, &mut values, &mut gd)?;
        let mut gc = vec![0.0; out.cycled_edges.len()];
        if weights.use_cycle {
            let e = cycle_plane(&out.cycled_edges, &targets.edges[s].as_f64())?;
            values.cycle = e.value;
            let wt = weights.effective(LossTerm::Cycle);
            for (g, d) in gc.iter_mut().zip(&e.grad) {
                *g = wt * d;
            }
        }
        stages.push(values);
        stage_grads.push((gd, gc));
    }
    let mut final_values = TermValues::default();
    let mut gf = vec![0.0; output.depth.values().len()];
    let last = n - 1;
    if output.depth.dims() != targets.references[last].dims() {
        return Err(Error::dims("final output does not match the finest level"));
    }
    depth_terms(&output.depth, &targets.references[last], &targets.edges[last], weights, &mut final_values, &mut gf)?;
    let total = stages.iter().map(|v| v.weighted(weights)).sum::<f64>() + final_values.weighted(weights);
    Ok((
        LossBreakdown {
            stages,
            final_output: final_values,
            total,
        },
        OutputGrads {
            stages: stage_grads,
            final_output: gf,
        },
    ))
}

pub fn total_loss(output: &NetworkOutput, guidance: &Guidance, depth_lr: &DepthMap, weights: &LossWeights) -> Result<LossBreakdown> {
    let targets = LossTargets::new(guidance, depth_lr)?;
    Ok(total_loss_grad(output, &targets, weights)?.0)
}
