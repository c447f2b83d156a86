//! Adam training with the two-phase schedule: marginal pretraining
//! (regression + marginal classification on each agent), then joint
//! fine-tuning under the interaction loss. The marginal weights can be
//! frozen during the joint phase.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::raster::RasterConfig;
use crate::scenario::ObjectType;

use super::{batch_backward, LossMode, ModelParams, ParamLayout, TrainExample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

/// Adam with bias correction. Updates only the supplied trainable ranges so
/// frozen tensors stay bit-identical.
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        trainable: &[std::ops::Range<usize>],
    ) {
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for range in trainable {
            for i in range.clone() {
                let g = grads[i];
                self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g;
                self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = self.m[i] / b1t;
                let v_hat = self.v[i] / b2t;
                params[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs_marginal: usize,
    pub epochs_joint: usize,
    /// Optional cap on the total optimizer steps across both phases.
    pub max_steps: Option<usize>,
    /// Keep the marginal model bit-identical during the joint phase.
    pub freeze_marginal: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs_marginal: 4,
            epochs_joint: 4,
            max_steps: None,
            freeze_marginal: false,
            seed: 0,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One optimizer step's loss record.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub phase: &'static str,
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub marginal: f64,
    pub reg0: f64,
    pub reg1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub steps_run: usize,
}

/// Write the loss curve as CSV.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "phase,step,total,cls,marginal,reg0,reg1")?;
    for p in curve {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            p.phase, p.step, p.total, p.cls, p.marginal, p.reg0, p.reg1
        )?;
    }
    f.flush()?;
    Ok(())
}

fn trainable_ranges(layout: &ParamLayout, joint_only: bool) -> Vec<std::ops::Range<usize>> {
    layout
        .defs
        .iter()
        .filter(|d| !joint_only || !ParamLayout::is_marginal(&d.name))
        .map(|d| d.offset..d.offset + d.rows * d.cols)
        .collect()
}

/// Two-phase training loop. Deterministic given (data, options, initial
/// params): batches are shuffled by a seeded generator and every reduction
/// runs in a fixed order.
pub fn train(
    mut params: ModelParams,
    examples: &[TrainExample],
    anchors: &BTreeMap<ObjectType, AnchorSet>,
    raster_cfg: &RasterConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Config("training set must be non-empty".to_string()));
    }
    let layout = params.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut curve = Vec::new();
    let mut steps_run = 0usize;
    let all = trainable_ranges(&layout, false);
    let joint_only = trainable_ranges(&layout, true);

    let phases: [(&'static str, usize, LossMode); 2] = [
        ("marginal", options.epochs_marginal, LossMode::Marginal),
        ("joint", options.epochs_joint, LossMode::Joint),
    ];

    'outer: for (phase_name, epochs, mode) in phases {
        // Fresh optimizer state per phase.
        let mut adam = Adam::new(layout.total, options.optimizer.clone());
        let frozen = mode == LossMode::Joint && options.freeze_marginal;
        let trainable = if frozen { &joint_only } else { &all };
        for _epoch in 0..epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(options.optimizer.batch_size.max(1)) {
                if let Some(cap) = options.max_steps {
                    if steps_run >= cap {
                        break 'outer;
                    }
                }
                let batch: Vec<TrainExample> =
                    chunk.iter().map(|&i| examples[i].clone()).collect();
                let (grads, breakdown) = batch_backward(
                    &params,
                    &batch,
                    anchors,
                    raster_cfg,
                    &options.weights,
                    mode,
                    !frozen,
                )
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!(
                        "{what} at {phase_name} step {steps_run}: training diverged"
                    )),
                    other => other,
                })?;
                adam.step(&mut params.data, &grads, trainable);
                steps_run += 1;
                curve.push(CurvePoint {
                    phase: phase_name,
                    step: steps_run,
                    total: breakdown.total,
                    cls: breakdown.cls,
                    marginal: breakdown.marginal,
                    reg0: breakdown.reg0,
                    reg1: breakdown.reg1,
                });
            }
        }
    }

    Ok(TrainReport {
        params,
        curve,
        steps_run,
    })
}
