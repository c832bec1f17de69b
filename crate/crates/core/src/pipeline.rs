//! Inference and evaluation with a trained checkpoint.

use alloc::format;
use alloc::vec::Vec;

use crate::diagnet::forward;
use crate::error::{config_err, Result};
use crate::evalmap::{map_metrics, EvalResult};
use crate::graph::Graph;
use crate::head::{decode, head_forward, nms, pool_diag_map, Detection, Predictions};
use crate::synth::Scene;
use crate::trainer::{prepare_dataset, Checkpoint, Executor, PreparedScene};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.2;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_iou: DEFAULT_NMS_IOU,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

pub fn predict(graph: &Graph, ck: &Checkpoint) -> Result<Predictions> {
    let cfg = &ck.config;
    let trace = forward(graph, &ck.diag)?;
    let pooled = pool_diag_map(&trace.y_hat, cfg.h, cfg.head_s, cfg.pooling)?;
    Ok(head_forward(&pooled, &ck.head)?.preds)
}

pub fn detect(graph: &Graph, ck: &Checkpoint, opts: &EvalOptions) -> Result<Vec<Detection>> {
    let preds = predict(graph, ck)?;
    Ok(nms(&decode(&preds, opts.score_threshold), opts.nms_iou))
}

pub fn evaluate_prepared<E: Executor>(
    data: &[PreparedScene],
    ck: &Checkpoint,
    opts: &EvalOptions,
    exec: &E,
) -> Result<EvalResult> {
    opts.validate()?;
    let dets = exec
        .map(data.len(), |i| detect(&data[i].graph, ck, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = data.iter().map(|s| s.boxes.clone()).collect();
    map_metrics(&dets, &gts, ck.config.classes)
}

pub fn evaluate<E: Executor>(
    scenes: &[Scene],
    ck: &Checkpoint,
    opts: &EvalOptions,
    exec: &E,
) -> Result<EvalResult> {
    opts.validate()?;
    let data = prepare_dataset(scenes, &ck.config)?;
    evaluate_prepared(&data, ck, opts, exec)
}
