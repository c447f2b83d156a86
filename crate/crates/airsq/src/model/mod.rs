//! The differentiable prediction model.
//!
//! Marginal path: raster image -> small conv stack + global average pooling
//! -> shared trunk -> per-object-type expert head (past-state FFN added to
//! the trunk projection) -> per-anchor control-point residuals + confidence
//! logits. Control points decode through the cubic B-spline, anchor
//! centroids are added on, and the result is transformed to world
//! coordinates. Joint path: both agents' trunk activations feed a shared FFN
//! (ReLU at the end) and type-gated joint heads emitting K^2 logits from
//! each agent's perspective; the two softmaxed grids are averaged after
//! transposing the second.
//!
//! All gradients are exact reverse-mode, written by hand; see [`backward`].

mod grid;
mod io;
mod layers;
mod train;

pub use grid::{ensemble_models, JointConfidenceGrid, JointPrediction, MarginalPrediction};
pub use io::{load_predictions, save_predictions};
pub use train::{
    train, write_loss_curve, Adam, CurvePoint, OptimizerConfig, TrainOptions, TrainReport,
};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorAssignment, AnchorSet};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::raster::{rasterize, rerasterize, RasterConfig, RasterImage};
use crate::scenario::{ObjectType, PastStates, Pose, Scenario, Trajectory, Vec2, PAST_LEN};
use crate::spline::{standard_basis, SplineBasis, NUM_CTRL};
use layers::*;

/// Per-past-state feature width: x, y, vx, vy, relative heading, valid.
const PAST_FEATS: usize = 6;
/// Control-point coordinates plus one confidence logit per mode.
const PER_MODE: usize = NUM_CTRL * 2 + 1;

/// Which image representation feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Plain rasters with the pair highlighted.
    Plain,
    /// Partner's top-1 predicted future drawn into each agent's image.
    Rerasterized,
}

/// Architecture sizes. The raster is average-pooled down to
/// `input_height x input_width` before the conv stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Common padded mode count; the joint grid is k_max x k_max.
    pub k_max: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv_channels: [usize; 4],
    pub trunk_dim: usize,
    pub past_hidden: usize,
    pub joint_hidden: usize,
    pub representation: Representation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_max: 32,
            input_height: 112,
            input_width: 224,
            conv_channels: [8, 16, 32, 32],
            trunk_dim: 64,
            past_hidden: 64,
            joint_hidden: 64,
            representation: Representation::Rerasterized,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        self.conv_channels[3]
    }

    /// Expert-head output width: control points plus logits for every mode.
    fn head_out(&self) -> usize {
        self.k_max * PER_MODE
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TensorDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Named views into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub defs: Vec<TensorDef>,
    index: BTreeMap<String, usize>,
    pub total: usize,
}

const TYPE_HEADS: [&str; 3] = ["vehicle", "pedestrian", "cyclist"];
const JOINT_HEADS: [&str; 4] = ["vehicle", "pedestrian", "cyclist", "sdc"];

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut defs: Vec<TensorDef> = Vec::new();
        let mut total = 0usize;
        let push = |defs: &mut Vec<TensorDef>, total: &mut usize, name: String, rows: usize, cols: usize| {
            defs.push(TensorDef {
                name,
                rows,
                cols,
                offset: *total,
            });
            *total += rows * cols;
        };

        let mut ci = 3;
        for (i, &co) in cfg.conv_channels.iter().enumerate() {
            push(&mut defs, &mut total, format!("extractor.conv{i}.w"), co, ci * 9);
            push(&mut defs, &mut total, format!("extractor.conv{i}.b"), 1, co);
            ci = co;
        }
        push(&mut defs, &mut total, "trunk.w".to_string(), cfg.trunk_dim, cfg.embed_dim());
        push(&mut defs, &mut total, "trunk.b".to_string(), 1, cfg.trunk_dim);
        for name in TYPE_HEADS {
            push(
                &mut defs,
                &mut total,
                format!("head.{name}.past1.w"),
                cfg.past_hidden,
                PAST_LEN * PAST_FEATS,
            );
            push(&mut defs, &mut total, format!("head.{name}.past1.b"), 1, cfg.past_hidden);
            push(
                &mut defs,
                &mut total,
                format!("head.{name}.past2.w"),
                cfg.head_out(),
                cfg.past_hidden,
            );
            push(&mut defs, &mut total, format!("head.{name}.past2.b"), 1, cfg.head_out());
            push(
                &mut defs,
                &mut total,
                format!("head.{name}.fc.w"),
                cfg.head_out(),
                cfg.trunk_dim,
            );
            push(&mut defs, &mut total, format!("head.{name}.fc.b"), 1, cfg.head_out());
        }
        push(
            &mut defs,
            &mut total,
            "joint.trunk.w".to_string(),
            cfg.joint_hidden,
            2 * cfg.trunk_dim,
        );
        push(&mut defs, &mut total, "joint.trunk.b".to_string(), 1, cfg.joint_hidden);
        for name in JOINT_HEADS {
            push(
                &mut defs,
                &mut total,
                format!("joint.head.{name}.w"),
                cfg.k_max * cfg.k_max,
                cfg.joint_hidden,
            );
            push(&mut defs, &mut total, format!("joint.head.{name}.b"), 1, cfg.k_max * cfg.k_max);
        }

        let index = defs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect();
        Self { defs, index, total }
    }

    pub fn def(&self, name: &str) -> &TensorDef {
        &self.defs[self.index[name]]
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let d = self.def(name);
        d.offset..d.offset + d.rows * d.cols
    }

    /// Marginal-model tensors (everything outside the joint FFNs).
    pub fn is_marginal(name: &str) -> bool {
        !name.starts_with("joint.")
    }
}

/// All learnable weights, stored flat with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::for_config(&self.config)
    }

    fn t<'a>(&'a self, layout: &ParamLayout, name: &str) -> &'a [f64] {
        &self.data[layout.range(name)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic fan-in-scaled uniform init; biases start at zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let layout = ParamLayout::for_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; layout.total];
    for def in &layout.defs {
        if def.name.ends_with(".b") {
            continue;
        }
        let lim = (1.0 / def.cols as f64).sqrt();
        for v in data[def.offset..def.offset + def.rows * def.cols].iter_mut() {
            *v = rng.gen_range(-lim..lim);
        }
    }
    ModelParams {
        config: config.clone(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Average-pool the raster down to the model input size and normalize to
/// [0, 1], CHW layout.
pub fn input_from_image(image: &RasterImage, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let (ih, iw) = (cfg.input_height, cfg.input_width);
    if ih == 0
        || iw == 0
        || image.height % ih != 0
        || image.width % iw != 0
        || image.height / ih != image.width / iw
    {
        return Err(Error::ShapeMismatch(format!(
            "raster {}x{} does not downscale to {}x{} by an integer factor",
            image.height, image.width, ih, iw
        )));
    }
    let f = image.height / ih;
    let denom = (f * f) as f64 * 255.0;
    let mut out = vec![0.0; 3 * ih * iw];
    for ch in 0..3 {
        for oy in 0..ih {
            for ox in 0..iw {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        let idx = ((oy * f + dy) * image.width + ox * f + dx) * 3 + ch;
                        acc += image.pixels[idx] as f64;
                    }
                }
                out[ch * ih * iw + oy * iw + ox] = acc / denom;
            }
        }
    }
    Ok(out)
}

/// Flatten past states into the ego frame of the current pose:
/// per step [x, y, vx, vy, heading delta, valid], invalid steps zeroed.
pub fn past_features(past: &PastStates, ego_pose: &Pose) -> Vec<f64> {
    let mut out = Vec::with_capacity(PAST_LEN * PAST_FEATS);
    for s in &past.states {
        if s.valid {
            let p = ego_pose.to_ego(s.pos);
            let v = ego_pose.dir_to_ego(s.vel);
            out.extend_from_slice(&[
                p.x,
                p.y,
                v.x,
                v.y,
                crate::scenario::wrap_angle(s.heading - ego_pose.heading),
                1.0,
            ]);
        } else {
            out.extend_from_slice(&[0.0; PAST_FEATS]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Forward passes (with traces for backward)
// ---------------------------------------------------------------------------

/// Everything the extractor backward pass needs.
struct ExtractorTrace {
    input: Vec<f64>,
    shapes: Vec<ConvShape>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    embed: Vec<f64>,
}

fn extractor_forward(params: &ModelParams, layout: &ParamLayout, input: Vec<f64>) -> ExtractorTrace {
    let cfg = &params.config;
    let mut shapes = Vec::new();
    let mut pre = Vec::new();
    let mut act = Vec::new();
    let (mut h, mut w, mut ci) = (cfg.input_height, cfg.input_width, 3usize);
    let mut x = input.clone();
    for (i, &co) in cfg.conv_channels.iter().enumerate() {
        let shape = ConvShape { ci, co, h, w };
        let z = conv_forward(
            &x,
            params.t(layout, &format!("extractor.conv{i}.w")),
            params.t(layout, &format!("extractor.conv{i}.b")),
            &shape,
        );
        let a = relu(&z);
        h = shape.out_h();
        w = shape.out_w();
        ci = co;
        x = a.clone();
        shapes.push(shape);
        pre.push(z);
        act.push(a);
    }
    let embed = global_avg_pool(&x, ci, h, w);
    ExtractorTrace {
        input,
        shapes,
        pre,
        act,
        embed,
    }
}

fn accumulate(grads: &mut [f64], range: std::ops::Range<usize>, delta: &[f64]) {
    for (g, d) in grads[range].iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

fn extractor_backward(
    params: &ModelParams,
    layout: &ParamLayout,
    trace: &ExtractorTrace,
    d_embed: &[f64],
    grads: &mut [f64],
) {
    let cfg = &params.config;
    let last = trace.shapes.len() - 1;
    let (h, w) = (trace.shapes[last].out_h(), trace.shapes[last].out_w());
    let mut dx = global_avg_pool_backward(d_embed, cfg.conv_channels[3], h, w);
    for i in (0..trace.shapes.len()).rev() {
        let dz = relu_backward(&trace.pre[i], &dx);
        let input = if i == 0 { &trace.input } else { &trace.act[i - 1] };
        let wr = layout.range(&format!("extractor.conv{i}.w"));
        let br = layout.range(&format!("extractor.conv{i}.b"));
        let mut dw = vec![0.0; wr.len()];
        let mut db = vec![0.0; br.len()];
        dx = conv_backward(
            input,
            params.t(layout, &format!("extractor.conv{i}.w")),
            &trace.shapes[i],
            &dz,
            &mut dw,
            &mut db,
        );
        accumulate(grads, wr, &dw);
        accumulate(grads, br, &db);
    }
}

/// Embed an image: downscale, conv stack, global average pooling.
pub fn feature_extract(params: &ModelParams, image: &RasterImage) -> Result<Vec<f64>> {
    let layout = params.layout();
    let input = input_from_image(image, &params.config)?;
    Ok(extractor_forward(params, &layout, input).embed)
}

/// Trace of one agent's marginal pass.
struct MarginalTrace {
    extractor: ExtractorTrace,
    trunk_pre: Vec<f64>,
    trunk_act: Vec<f64>,
    past_feats: Vec<f64>,
    past1_pre: Vec<f64>,
    past1_act: Vec<f64>,
    confidences: Vec<f64>,
    kind: ObjectType,
    is_sdc: bool,
    ego_pose: Pose,
    k_real: usize,
}

fn head_name(kind: ObjectType, part: &str) -> String {
    format!("head.{}.{part}", kind.name())
}

#[allow(clippy::too_many_arguments)]
fn marginal_from_embedding(
    params: &ModelParams,
    layout: &ParamLayout,
    basis: &SplineBasis,
    extractor: ExtractorTrace,
    past: &PastStates,
    kind: ObjectType,
    is_sdc: bool,
    ego_pose: Pose,
    anchors: &AnchorSet,
) -> Result<(MarginalTrace, MarginalPrediction)> {
    let cfg = &params.config;
    if anchors.kind != kind {
        return Err(Error::ShapeMismatch(format!(
            "anchor set is for {}, agent is {}",
            anchors.kind, kind
        )));
    }
    let k_real = anchors.k();
    if k_real > cfg.k_max {
        return Err(Error::ShapeMismatch(format!(
            "anchor set K {} exceeds k_max {}",
            k_real, cfg.k_max
        )));
    }

    let trunk_pre = dense_forward(
        params.t(layout, "trunk.w"),
        params.t(layout, "trunk.b"),
        &extractor.embed,
        cfg.trunk_dim,
        cfg.embed_dim(),
    );
    let trunk_act = relu(&trunk_pre);

    let past_feats = past_features(past, &ego_pose);
    let past1_pre = dense_forward(
        params.t(layout, &head_name(kind, "past1.w")),
        params.t(layout, &head_name(kind, "past1.b")),
        &past_feats,
        cfg.past_hidden,
        PAST_LEN * PAST_FEATS,
    );
    let past1_act = relu(&past1_pre);
    let past_emb = dense_forward(
        params.t(layout, &head_name(kind, "past2.w")),
        params.t(layout, &head_name(kind, "past2.b")),
        &past1_act,
        cfg.head_out(),
        cfg.past_hidden,
    );
    let fc_out = dense_forward(
        params.t(layout, &head_name(kind, "fc.w")),
        params.t(layout, &head_name(kind, "fc.b")),
        &trunk_act,
        cfg.head_out(),
        cfg.trunk_dim,
    );
    let head_out: Vec<f64> = fc_out
        .iter()
        .zip(past_emb.iter())
        .map(|(a, b)| a + b)
        .collect();

    // Split: k_max * 16 control-point coordinates, then k_max logits.
    let cp_len = cfg.k_max * NUM_CTRL * 2;
    let logits = &head_out[cp_len..];
    let mode_mask: Vec<bool> = (0..cfg.k_max).map(|k| k < k_real).collect();
    let confidences = masked_softmax(logits, &mode_mask);

    let centroids = anchors.padded_centroids(cfg.k_max);
    let mut world_trajectories = Vec::with_capacity(cfg.k_max);
    for k in 0..cfg.k_max {
        let cp: [Vec2; NUM_CTRL] = std::array::from_fn(|c| {
            Vec2::new(
                head_out[k * NUM_CTRL * 2 + c * 2],
                head_out[k * NUM_CTRL * 2 + c * 2 + 1],
            )
        });
        let mut ego = crate::spline::interpolate(&cp, basis);
        for (p, c) in ego.points.iter_mut().zip(centroids[k].points.iter()) {
            *p = *p + *c;
        }
        world_trajectories.push(ego.to_world_frame(&ego_pose));
    }

    let prediction = MarginalPrediction {
        trajectories: world_trajectories,
        confidences: confidences.clone(),
    };
    let trace = MarginalTrace {
        extractor,
        trunk_pre,
        trunk_act,
        past_feats,
        past1_pre,
        past1_act,
        confidences,
        kind,
        is_sdc,
        ego_pose,
        k_real,
    };
    Ok((trace, prediction))
}

/// Run the marginal model from a precomputed embedding. Returns the
/// prediction plus the trunk activation (the intermediate embedding consumed
/// by the joint head).
#[allow(clippy::too_many_arguments)]
pub fn marginal_forward(
    params: &ModelParams,
    embedding: &[f64],
    past: &PastStates,
    kind: ObjectType,
    is_sdc: bool,
    anchors: &AnchorSet,
    ego_pose: Pose,
) -> Result<(MarginalPrediction, Vec<f64>)> {
    let layout = params.layout();
    let basis = standard_basis();
    if embedding.len() != params.config.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding length {} != {}",
            embedding.len(),
            params.config.embed_dim()
        )));
    }
    let extractor = ExtractorTrace {
        input: Vec::new(),
        shapes: Vec::new(),
        pre: Vec::new(),
        act: Vec::new(),
        embed: embedding.to_vec(),
    };
    let (trace, prediction) = marginal_from_embedding(
        params, &layout, &basis, extractor, past, kind, is_sdc, ego_pose, anchors,
    )?;
    Ok((prediction, trace.trunk_act))
}

/// Per-agent joint trace.
struct JointTrace {
    input: Vec<f64>,
    trunk_pre: Vec<f64>,
    trunk_act: Vec<f64>,
    probs: Vec<f64>,
    head: String,
}

fn joint_head_name(kind: ObjectType, is_sdc: bool) -> String {
    if is_sdc {
        "joint.head.sdc".to_string()
    } else {
        format!("joint.head.{}", kind.name())
    }
}

/// One agent's perspective grid: rows = own anchors, cols = partner anchors.
#[allow(clippy::too_many_arguments)]
fn joint_perspective(
    params: &ModelParams,
    layout: &ParamLayout,
    own_emb: &[f64],
    partner_emb: &[f64],
    kind: ObjectType,
    is_sdc: bool,
    k_own: usize,
    k_partner: usize,
) -> JointTrace {
    let cfg = &params.config;
    let mut input = Vec::with_capacity(2 * cfg.trunk_dim);
    input.extend_from_slice(own_emb);
    input.extend_from_slice(partner_emb);
    let trunk_pre = dense_forward(
        params.t(layout, "joint.trunk.w"),
        params.t(layout, "joint.trunk.b"),
        &input,
        cfg.joint_hidden,
        2 * cfg.trunk_dim,
    );
    let trunk_act = relu(&trunk_pre);
    let head = joint_head_name(kind, is_sdc);
    let logits = dense_forward(
        params.t(layout, &format!("{head}.w")),
        params.t(layout, &format!("{head}.b")),
        &trunk_act,
        cfg.k_max * cfg.k_max,
        cfg.joint_hidden,
    );
    let mask: Vec<bool> = (0..cfg.k_max * cfg.k_max)
        .map(|idx| idx / cfg.k_max < k_own && idx % cfg.k_max < k_partner)
        .collect();
    let probs = masked_softmax(&logits, &mask);
    JointTrace {
        input,
        trunk_pre,
        trunk_act,
        probs,
        head,
    }
}

/// Combine both perspectives: `(P0 + transpose(P1)) / 2`.
fn average_perspectives(k: usize, p0: &[f64], p1: &[f64]) -> JointConfidenceGrid {
    let mut p = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            p[i * k + j] = (p0[i * k + j] + p1[j * k + i]) / 2.0;
        }
    }
    JointConfidenceGrid { k, p }
}

/// The joint confidence grid from both agents' intermediate embeddings.
/// `k_real` carries the unpadded anchor counts for (slot 0, slot 1).
pub fn joint_forward(
    params: &ModelParams,
    emb0: &[f64],
    emb1: &[f64],
    kinds: (ObjectType, ObjectType),
    is_sdc: (bool, bool),
    k_real: (usize, usize),
) -> Result<JointConfidenceGrid> {
    let layout = params.layout();
    if emb0.len() != params.config.trunk_dim || emb1.len() != params.config.trunk_dim {
        return Err(Error::ShapeMismatch(
            "intermediate embeddings must have trunk_dim entries".to_string(),
        ));
    }
    let t0 = joint_perspective(
        params, &layout, emb0, emb1, kinds.0, is_sdc.0, k_real.0, k_real.1,
    );
    let t1 = joint_perspective(
        params, &layout, emb1, emb0, kinds.1, is_sdc.1, k_real.1, k_real.0,
    );
    Ok(average_perspectives(params.config.k_max, &t0.probs, &t1.probs))
}

// ---------------------------------------------------------------------------
// Scenario-level forward
// ---------------------------------------------------------------------------

fn anchors_for<'a>(
    anchors: &'a BTreeMap<ObjectType, AnchorSet>,
    kind: ObjectType,
) -> Result<&'a AnchorSet> {
    anchors
        .get(&kind)
        .ok_or_else(|| Error::Config(format!("no anchor set for object type {}", kind.name())))
}

/// Full two-agent forward with traces kept for backprop.
struct ScenarioTrace {
    marginal: [MarginalTrace; 2],
    joint: [JointTrace; 2],
    grid: JointConfidenceGrid,
    predictions: [MarginalPrediction; 2],
}

fn scenario_images(
    params: &ModelParams,
    scenario: &Scenario,
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
) -> Result<[RasterImage; 2]> {
    match params.config.representation {
        Representation::Plain => Ok([
            rasterize(scenario, 0, raster_cfg)?,
            rasterize(scenario, 1, raster_cfg)?,
        ]),
        Representation::Rerasterized => {
            // First pass on plain rasters picks each agent's top mode, which
            // is then drawn into the partner's image.
            let layout = params.layout();
            let basis = standard_basis();
            let mut tops: Vec<Trajectory> = Vec::with_capacity(2);
            for slot in 0..2 {
                let agent = scenario.pair_agent(slot);
                let pose = agent.current_pose().ok_or_else(|| {
                    Error::invariant("past", format!("agent {} has no valid pose", agent.id))
                })?;
                let image = rasterize(scenario, slot, raster_cfg)?;
                let extractor =
                    extractor_forward(params, &layout, input_from_image(&image, &params.config)?);
                let (_, pred) = marginal_from_embedding(
                    params,
                    &layout,
                    &basis,
                    extractor,
                    &agent.past,
                    agent.kind,
                    agent.is_sdc,
                    pose,
                    anchors_for(anchors, agent.kind)?,
                )?;
                tops.push(pred.trajectories[pred.top_mode()].clone());
            }
            Ok([
                rerasterize(scenario, 0, &tops[1], raster_cfg)?,
                rerasterize(scenario, 1, &tops[0], raster_cfg)?,
            ])
        }
    }
}

fn scenario_forward(
    params: &ModelParams,
    scenario: &Scenario,
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
) -> Result<ScenarioTrace> {
    let layout = params.layout();
    let basis = standard_basis();
    let images = scenario_images(params, scenario, anchors, raster_cfg)?;

    let mut marginal: Vec<MarginalTrace> = Vec::with_capacity(2);
    let mut predictions: Vec<MarginalPrediction> = Vec::with_capacity(2);
    for (slot, image) in images.iter().enumerate() {
        let agent = scenario.pair_agent(slot);
        let pose = agent.current_pose().ok_or_else(|| {
            Error::invariant("past", format!("agent {} has no valid pose", agent.id))
        })?;
        let extractor =
            extractor_forward(params, &layout, input_from_image(image, &params.config)?);
        let (trace, pred) = marginal_from_embedding(
            params,
            &layout,
            &basis,
            extractor,
            &agent.past,
            agent.kind,
            agent.is_sdc,
            pose,
            anchors_for(anchors, agent.kind)?,
        )?;
        marginal.push(trace);
        predictions.push(pred);
    }

    let joint0 = joint_perspective(
        params,
        &layout,
        &marginal[0].trunk_act,
        &marginal[1].trunk_act,
        marginal[0].kind,
        marginal[0].is_sdc,
        marginal[0].k_real,
        marginal[1].k_real,
    );
    let joint1 = joint_perspective(
        params,
        &layout,
        &marginal[1].trunk_act,
        &marginal[0].trunk_act,
        marginal[1].kind,
        marginal[1].is_sdc,
        marginal[1].k_real,
        marginal[0].k_real,
    );
    let grid = average_perspectives(params.config.k_max, &joint0.probs, &joint1.probs);

    let mut m = marginal.into_iter();
    let mut p = predictions.into_iter();
    Ok(ScenarioTrace {
        marginal: [m.next().unwrap(), m.next().unwrap()],
        joint: [joint0, joint1],
        grid,
        predictions: [p.next().unwrap(), p.next().unwrap()],
    })
}

/// End-to-end joint prediction for one scenario.
pub fn predict_joint(
    params: &ModelParams,
    scenario: &Scenario,
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
) -> Result<JointPrediction> {
    let trace = scenario_forward(params, scenario, anchors, raster_cfg)?;
    let [m0, m1] = trace.predictions;
    Ok(JointPrediction {
        grid: trace.grid,
        marginal0: m0,
        marginal1: m1,
    })
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Which loss drives the gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Per-agent anchored regression plus marginal mode classification.
    Marginal,
    /// The joint interaction loss over the confidence grid.
    Joint,
}

/// One training example: a scenario with its precomputed anchor assignment.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub scenario: Scenario,
    pub assignment: AnchorAssignment,
}

/// Anchor assignment for a scenario's pair agents (nearest anchors to the
/// ego-frame ground-truth futures).
pub fn assignment_for(
    scenario: &Scenario,
    anchors: &BTreeMap<ObjectType, AnchorSet>,
) -> Result<AnchorAssignment> {
    let a0 = scenario.pair_agent(0);
    let a1 = scenario.pair_agent(1);
    Ok(AnchorAssignment {
        i_star: crate::anchors::assign_anchor(&a0.ego_future()?, anchors_for(anchors, a0.kind)?)?,
        j_star: crate::anchors::assign_anchor(&a1.ego_future()?, anchors_for(anchors, a1.kind)?)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn marginal_backward_from_heads(
    params: &ModelParams,
    layout: &ParamLayout,
    basis: &SplineBasis,
    trace: &MarginalTrace,
    d_world: &[Vec<Vec2>],
    d_conf: &[f64],
    d_trunk_act_extra: &[f64],
    grads: &mut [f64],
) {
    let cfg = &params.config;
    let cp_len = cfg.k_max * NUM_CTRL * 2;
    let mut d_head_out = vec![0.0; cfg.head_out()];

    // Trajectory gradients: world -> ego -> control points.
    for k in 0..cfg.k_max {
        if d_world[k].iter().all(|g| g.x == 0.0 && g.y == 0.0) {
            continue;
        }
        let d_ego: Vec<Vec2> = d_world[k]
            .iter()
            .map(|g| trace.ego_pose.dir_to_ego(*g))
            .collect();
        let d_cp = crate::spline::backprop_to_control_points(basis, &d_ego);
        for (c, g) in d_cp.iter().enumerate() {
            d_head_out[k * NUM_CTRL * 2 + c * 2] += g.x;
            d_head_out[k * NUM_CTRL * 2 + c * 2 + 1] += g.y;
        }
    }

    // Confidence gradients through the masked softmax.
    if d_conf.iter().any(|&g| g != 0.0) {
        let d_logits = softmax_backward(&trace.confidences, d_conf);
        for (i, g) in d_logits.iter().enumerate() {
            d_head_out[cp_len + i] += g;
        }
    }

    // head_out = fc(trunk_act) + past2(relu(past1(past_feats)))
    let kind = trace.kind;
    let mut d_trunk_act = {
        let wr = layout.range(&head_name(kind, "fc.w"));
        let br = layout.range(&head_name(kind, "fc.b"));
        let mut dw = vec![0.0; wr.len()];
        let mut db = vec![0.0; br.len()];
        let dx = dense_backward(
            params.t(layout, &head_name(kind, "fc.w")),
            &trace.trunk_act,
            &d_head_out,
            cfg.head_out(),
            cfg.trunk_dim,
            &mut dw,
            &mut db,
        );
        accumulate(grads, wr, &dw);
        accumulate(grads, br, &db);
        dx
    };
    for (a, b) in d_trunk_act.iter_mut().zip(d_trunk_act_extra.iter()) {
        *a += b;
    }

    {
        let wr = layout.range(&head_name(kind, "past2.w"));
        let br = layout.range(&head_name(kind, "past2.b"));
        let mut dw = vec![0.0; wr.len()];
        let mut db = vec![0.0; br.len()];
        let d_past1_act = dense_backward(
            params.t(layout, &head_name(kind, "past2.w")),
            &trace.past1_act,
            &d_head_out,
            cfg.head_out(),
            cfg.past_hidden,
            &mut dw,
            &mut db,
        );
        accumulate(grads, wr, &dw);
        accumulate(grads, br, &db);
        let d_past1_pre = relu_backward(&trace.past1_pre, &d_past1_act);
        let wr = layout.range(&head_name(kind, "past1.w"));
        let br = layout.range(&head_name(kind, "past1.b"));
        let mut dw = vec![0.0; wr.len()];
        let mut db = vec![0.0; br.len()];
        let _ = dense_backward(
            params.t(layout, &head_name(kind, "past1.w")),
            &trace.past_feats,
            &d_past1_pre,
            cfg.past_hidden,
            PAST_LEN * PAST_FEATS,
            &mut dw,
            &mut db,
        );
        accumulate(grads, wr, &dw);
        accumulate(grads, br, &db);
    }

    // Shared trunk and extractor.
    let d_trunk_pre = relu_backward(&trace.trunk_pre, &d_trunk_act);
    let wr = layout.range("trunk.w");
    let br = layout.range("trunk.b");
    let mut dw = vec![0.0; wr.len()];
    let mut db = vec![0.0; br.len()];
    let d_embed = dense_backward(
        params.t(layout, "trunk.w"),
        &trace.extractor.embed,
        &d_trunk_pre,
        cfg.trunk_dim,
        cfg.embed_dim(),
        &mut dw,
        &mut db,
    );
    accumulate(grads, wr, &dw);
    accumulate(grads, br, &db);
    if !trace.extractor.shapes.is_empty() {
        extractor_backward(params, layout, &trace.extractor, &d_embed, grads);
    }
}

fn joint_backward(
    params: &ModelParams,
    layout: &ParamLayout,
    trace: &JointTrace,
    d_probs: &[f64],
    grads: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let d_logits = softmax_backward(&trace.probs, d_probs);
    let wr = layout.range(&format!("{}.w", trace.head));
    let br = layout.range(&format!("{}.b", trace.head));
    let mut dw = vec![0.0; wr.len()];
    let mut db = vec![0.0; br.len()];
    let d_act = dense_backward(
        params.t(layout, &format!("{}.w", trace.head)),
        &trace.trunk_act,
        &d_logits,
        cfg.k_max * cfg.k_max,
        cfg.joint_hidden,
        &mut dw,
        &mut db,
    );
    accumulate(grads, wr, &dw);
    accumulate(grads, br, &db);
    let d_pre = relu_backward(&trace.trunk_pre, &d_act);
    let wr = layout.range("joint.trunk.w");
    let br = layout.range("joint.trunk.b");
    let mut dw = vec![0.0; wr.len()];
    let mut db = vec![0.0; br.len()];
    let d_input = dense_backward(
        params.t(layout, "joint.trunk.w"),
        &trace.input,
        &d_pre,
        cfg.joint_hidden,
        2 * cfg.trunk_dim,
        &mut dw,
        &mut db,
    );
    accumulate(grads, wr, &dw);
    accumulate(grads, br, &db);
    let t = cfg.trunk_dim;
    (d_input[..t].to_vec(), d_input[t..].to_vec())
}

fn clamped_neg_log_grad(p: f64) -> f64 {
    if p > loss::PROB_CLAMP {
        -1.0 / p
    } else {
        0.0
    }
}

/// Forward + backward for one example; accumulates into `grads` (pass an
/// empty slice to compute the loss only) and returns the loss breakdown.
#[allow(clippy::too_many_arguments)]
fn example_backward(
    params: &ModelParams,
    layout: &ParamLayout,
    basis: &SplineBasis,
    example: &TrainExample,
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
    weights: &LossWeights,
    mode: LossMode,
    scale: f64,
    grads: &mut [f64],
    into_marginal: bool,
) -> Result<LossBreakdown> {
    let trace = scenario_forward(params, &example.scenario, anchors, raster_cfg)?;
    let gt0 = &example.scenario.pair_agent(0).future;
    let gt1 = &example.scenario.pair_agent(1).future;
    let assignment = &example.assignment;
    let cfg = &params.config;

    let breakdown = match mode {
        LossMode::Joint => {
            let cls = loss::classification_loss(&trace.grid, assignment);
            let reg = loss::regression_loss(
                &trace.predictions[0].trajectories,
                &trace.predictions[1].trajectories,
                gt0,
                gt1,
                assignment,
            );
            loss::total_loss(cls, reg, weights)?
        }
        LossMode::Marginal => {
            let reg = loss::regression_loss(
                &trace.predictions[0].trajectories,
                &trace.predictions[1].trajectories,
                gt0,
                gt1,
                assignment,
            );
            let c0 = trace.predictions[0].confidences[assignment.i_star];
            let c1 = trace.predictions[1].confidences[assignment.j_star];
            let cls = -c0.max(loss::PROB_CLAMP).ln() - c1.max(loss::PROB_CLAMP).ln();
            let total = weights.w_reg * (reg.0 + reg.1) + weights.w_cls * cls;
            if !total.is_finite() {
                return Err(Error::NonFinite("marginal loss".to_string()));
            }
            LossBreakdown {
                total,
                cls,
                marginal: 0.0,
                reg0: reg.0,
                reg1: reg.1,
            }
        }
    };

    if grads.is_empty() {
        return Ok(breakdown);
    }

    let lg = loss::loss_gradients(
        &trace.grid,
        &trace.predictions[0].trajectories,
        &trace.predictions[1].trajectories,
        gt0,
        gt1,
        assignment,
        weights,
    );

    let mut d_trunk_extra = [vec![0.0; cfg.trunk_dim], vec![0.0; cfg.trunk_dim]];
    if mode == LossMode::Joint {
        // Grid average: dP0 = dG/2, dP1 = transpose(dG)/2.
        let k = cfg.k_max;
        let mut d_p0 = vec![0.0; k * k];
        let mut d_p1 = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let g = lg.d_grid[i * k + j] * scale;
                d_p0[i * k + j] = g / 2.0;
                d_p1[j * k + i] = g / 2.0;
            }
        }
        let (d_own0, d_partner0) = joint_backward(params, layout, &trace.joint[0], &d_p0, grads);
        let (d_own1, d_partner1) = joint_backward(params, layout, &trace.joint[1], &d_p1, grads);
        for t in 0..cfg.trunk_dim {
            d_trunk_extra[0][t] = d_own0[t] + d_partner1[t];
            d_trunk_extra[1][t] = d_own1[t] + d_partner0[t];
        }
    }

    if into_marginal {
        for slot in 0..2 {
            let d_world: Vec<Vec<Vec2>> = if slot == 0 { &lg.d_pred0 } else { &lg.d_pred1 }
                .iter()
                .map(|per_anchor| per_anchor.iter().map(|g| *g * scale).collect())
                .collect();
            let mut d_conf = vec![0.0; cfg.k_max];
            if mode == LossMode::Marginal {
                let (idx, conf) = if slot == 0 {
                    (
                        assignment.i_star,
                        trace.predictions[0].confidences[assignment.i_star],
                    )
                } else {
                    (
                        assignment.j_star,
                        trace.predictions[1].confidences[assignment.j_star],
                    )
                };
                d_conf[idx] = weights.w_cls * clamped_neg_log_grad(conf) * scale;
            }
            marginal_backward_from_heads(
                params,
                layout,
                basis,
                &trace.marginal[slot],
                &d_world,
                &d_conf,
                &d_trunk_extra[slot],
                grads,
            );
        }
    }

    Ok(breakdown)
}

/// Exact reverse-mode gradients of the mean interaction loss over a batch.
/// Returns the gradient vector (same layout as `params.data`) and the mean
/// loss breakdown.
pub fn backward(
    params: &ModelParams,
    examples: &[TrainExample],
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
    weights: &LossWeights,
) -> Result<(Vec<f64>, LossBreakdown)> {
    batch_backward(
        params,
        examples,
        anchors,
        raster_cfg,
        weights,
        LossMode::Joint,
        true,
    )
}

pub(crate) fn batch_backward(
    params: &ModelParams,
    examples: &[TrainExample],
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
    weights: &LossWeights,
    mode: LossMode,
    into_marginal: bool,
) -> Result<(Vec<f64>, LossBreakdown)> {
    if examples.is_empty() {
        return Err(Error::Config("batch must be non-empty".to_string()));
    }
    let layout = params.layout();
    let basis = standard_basis();
    let mut grads = vec![0.0; layout.total];
    let scale = 1.0 / examples.len() as f64;
    let mut sum = LossBreakdown {
        total: 0.0,
        cls: 0.0,
        marginal: 0.0,
        reg0: 0.0,
        reg1: 0.0,
    };
    for ex in examples {
        let b = example_backward(
            params,
            &layout,
            &basis,
            ex,
            anchors,
            raster_cfg,
            weights,
            mode,
            scale,
            &mut grads,
            into_marginal,
        )?;
        sum.total += b.total * scale;
        sum.cls += b.cls * scale;
        sum.marginal += b.marginal * scale;
        sum.reg0 += b.reg0 * scale;
        sum.reg1 += b.reg1 * scale;
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".to_string()));
    }
    Ok((grads, sum))
}

/// Mean loss over examples without touching gradients.
pub fn batch_loss(
    params: &ModelParams,
    examples: &[TrainExample],
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
    weights: &LossWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let layout = params.layout();
    let basis = standard_basis();
    let scale = 1.0 / examples.len().max(1) as f64;
    let mut sum = LossBreakdown {
        total: 0.0,
        cls: 0.0,
        marginal: 0.0,
        reg0: 0.0,
        reg1: 0.0,
    };
    let mut empty: Vec<f64> = Vec::new();
    for ex in examples {
        let b = example_backward(
            params, &layout, &basis, ex, anchors, raster_cfg, weights, mode, scale, &mut empty,
            false,
        )?;
        sum.total += b.total * scale;
        sum.cls += b.cls * scale;
        sum.marginal += b.marginal * scale;
        sum.reg0 += b.reg0 * scale;
        sum.reg1 += b.reg1 * scale;
    }
    Ok(sum)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"AIRSQCP1";

/// Binary checkpoint: magic, config JSON, then the flat f64 tensor data.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    let cfg =
        serde_json::to_vec(&params.config).map_err(|e| Error::Parse { line: 0, source: e })?;
    f.write_u32::<LittleEndian>(cfg.len() as u32)?;
    f.write_all(&cfg)?;
    f.write_u64::<LittleEndian>(params.data.len() as u64)?;
    for &v in &params.data {
        f.write_f64::<LittleEndian>(v)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config("not an airsq checkpoint".to_string()));
    }
    let cfg_len = f.read_u32::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Parse { line: 0, source: e })?;
    let n = f.read_u64::<LittleEndian>()? as usize;
    let expected = ParamLayout::for_config(&config).total;
    if n != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has {n} parameters, config implies {expected}"
        )));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f.read_f64::<LittleEndian>()?);
    }
    Ok(ModelParams { config, data })
}
