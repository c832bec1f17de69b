//! Alternating optimization of the neck and the head.
//!
//! Every epoch runs two passes over a shuffled scene order. Phase A fits the
//! neck to the diagonal targets. Phase B trains the head on the pooled map and,
//! unless frozen, fine-tunes the neck through the pooling gradient.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::diagnet::{
    backward_from_output, forward, loss_and_output_grad, DiagNetParams, Gradients, LossKind,
    PredInit, ProjectedTargets, DEFAULT_SENTINEL_LOSS,
};
use crate::error::{config_err, Error, Result};
use crate::geom::BBox;
use crate::geom::{build_targets, Diagonal, PatchGrid, TargetMode};
use crate::graph::{to_graph, Graph};
use crate::head::{
    detection_loss_grad, head_backward, head_forward, pool_diag_map, unpool_grad, HeadGrads,
    HeadLayout, HeadParams, LossWeights, Pooling,
};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;
use crate::synth::{Featurizer, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr_diag: f64,
    pub lr_head: f64,
    pub loss_kind: LossKind,
    pub mode: TargetMode,
    pub alpha: f64,
    pub diagonal: Diagonal,
    pub h_in: usize,
    pub h: usize,
    pub head_s: usize,
    pub seed: u64,
    pub sentinel_loss: f64,
    /// Feature channels `L` produced by the featurizer.
    pub channels: usize,
    /// Embedding width `L'`.
    pub reduced: usize,
    pub hidden: usize,
    pub classes: u32,
    pub coord_weight: f64,
    pub noobj_weight: f64,
    pub featurizer_seed: u64,
    /// Output scale of the featurizer.
    pub feature_gain: f64,
    /// Phase B also updates the neck.
    pub finetune: bool,
    /// Phase-B neck step as a fraction of `lr_diag`.
    pub finetune_scale: f64,
    pub pred_init: PredInit,
    pub pooling: Pooling,
    pub head_layout: HeadLayout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            optimizer: Optimizer::Adam,
            lr_diag: 1e-3,
            lr_head: 0.01,
            loss_kind: LossKind::Comp,
            mode: TargetMode::Soft,
            alpha: 1.0,
            diagonal: Diagonal::Main,
            h_in: 64,
            h: 8,
            head_s: 4,
            seed: 0,
            sentinel_loss: DEFAULT_SENTINEL_LOSS,
            channels: 32,
            reduced: 8,
            hidden: 16,
            classes: 3,
            coord_weight: 5.0,
            noobj_weight: 0.5,
            featurizer_seed: 0,
            feature_gain: 0.02,
            finetune: true,
            finetune_scale: 0.1,
            pred_init: PredInit::Identity,
            pooling: Pooling::Average,
            head_layout: HeadLayout::Local,
        }
    }
}

fn parse_num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| config_err(format!("invalid value for {key}: {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(config_err(format!("invalid value for {key}: {v:?}"))),
    }
}

pub fn loss_kind_name(k: LossKind) -> &'static str {
    match k {
        LossKind::Min => "min",
        LossKind::Comp => "comp",
    }
}

pub fn mode_name(m: TargetMode) -> &'static str {
    match m {
        TargetMode::Hard => "hard",
        TargetMode::Soft => "soft",
    }
}

pub fn diagonal_name(d: Diagonal) -> &'static str {
    match d {
        Diagonal::Main => "main",
        Diagonal::Anti => "anti",
        Diagonal::Both => "both",
    }
}

pub fn pooling_name(p: Pooling) -> &'static str {
    match p {
        Pooling::Average => "avg",
        Pooling::Max => "max",
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "epochs",
        "batch_size",
        "optimizer",
        "lr_diag",
        "lr_head",
        "loss_kind",
        "mode",
        "alpha",
        "diagonal",
        "h_in",
        "h",
        "head_s",
        "seed",
        "sentinel_loss",
        "channels",
        "reduced",
        "hidden",
        "classes",
        "coord_weight",
        "noobj_weight",
        "featurizer_seed",
        "feature_gain",
        "finetune",
        "finetune_scale",
        "pred_init",
        "pooling",
        "head_layout",
    ];

    /// Sets one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => {
                        return Err(config_err(format!(
                            "optimizer must be sgd or adam, got {v:?}"
                        )))
                    }
                }
            }
            "lr_diag" => self.lr_diag = parse_num(key, v)?,
            "lr_head" => self.lr_head = parse_num(key, v)?,
            "loss_kind" => {
                self.loss_kind = match v {
                    "min" => LossKind::Min,
                    "comp" => LossKind::Comp,
                    _ => {
                        return Err(config_err(format!(
                            "loss_kind must be min or comp, got {v:?}"
                        )))
                    }
                }
            }
            "mode" => {
                self.mode = match v {
                    "hard" => TargetMode::Hard,
                    "soft" => TargetMode::Soft,
                    _ => return Err(config_err(format!("mode must be hard or soft, got {v:?}"))),
                }
            }
            "alpha" => self.alpha = parse_num(key, v)?,
            "diagonal" => {
                self.diagonal = match v {
                    "main" => Diagonal::Main,
                    "anti" => Diagonal::Anti,
                    "both" => Diagonal::Both,
                    _ => {
                        return Err(config_err(format!(
                            "diagonal must be main, anti or both, got {v:?}"
                        )))
                    }
                }
            }
            "h_in" => self.h_in = parse_num(key, v)?,
            "h" => self.h = parse_num(key, v)?,
            "head_s" => self.head_s = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "sentinel_loss" => self.sentinel_loss = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "reduced" => self.reduced = parse_num(key, v)?,
            "hidden" => self.hidden = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "coord_weight" => self.coord_weight = parse_num(key, v)?,
            "noobj_weight" => self.noobj_weight = parse_num(key, v)?,
            "featurizer_seed" => self.featurizer_seed = parse_num(key, v)?,
            "feature_gain" => self.feature_gain = parse_num(key, v)?,
            "finetune" => self.finetune = parse_bool(key, v)?,
            "finetune_scale" => self.finetune_scale = parse_num(key, v)?,
            "pred_init" => {
                self.pred_init = match v {
                    "uniform" => PredInit::Uniform,
                    "identity" => PredInit::Identity,
                    _ => {
                        return Err(config_err(format!(
                            "pred_init must be uniform or identity, got {v:?}"
                        )))
                    }
                }
            }
            "pooling" => {
                self.pooling = match v {
                    "avg" => Pooling::Average,
                    "max" => Pooling::Max,
                    _ => return Err(config_err(format!("pooling must be avg or max, got {v:?}"))),
                }
            }
            "head_layout" => {
                self.head_layout = match v {
                    "global" => HeadLayout::Global,
                    "local" => HeadLayout::Local,
                    _ => {
                        return Err(config_err(format!(
                            "head_layout must be global or local, got {v:?}"
                        )))
                    }
                }
            }
            other => return Err(config_err(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Value of `key` in the textual form accepted by [`TrainConfig::set`].
    /// Floats use the shortest representation that parses back exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "optimizer" => match self.optimizer {
                Optimizer::Sgd => "sgd".into(),
                Optimizer::Adam => "adam".into(),
            },
            "lr_diag" => format!("{:?}", self.lr_diag),
            "lr_head" => format!("{:?}", self.lr_head),
            "loss_kind" => loss_kind_name(self.loss_kind).into(),
            "mode" => mode_name(self.mode).into(),
            "alpha" => format!("{:?}", self.alpha),
            "diagonal" => diagonal_name(self.diagonal).into(),
            "h_in" => self.h_in.to_string(),
            "h" => self.h.to_string(),
            "head_s" => self.head_s.to_string(),
            "seed" => self.seed.to_string(),
            "sentinel_loss" => format!("{:?}", self.sentinel_loss),
            "channels" => self.channels.to_string(),
            "reduced" => self.reduced.to_string(),
            "hidden" => self.hidden.to_string(),
            "classes" => self.classes.to_string(),
            "coord_weight" => format!("{:?}", self.coord_weight),
            "noobj_weight" => format!("{:?}", self.noobj_weight),
            "featurizer_seed" => self.featurizer_seed.to_string(),
            "feature_gain" => format!("{:?}", self.feature_gain),
            "finetune" => self.finetune.to_string(),
            "finetune_scale" => format!("{:?}", self.finetune_scale),
            "pred_init" => match self.pred_init {
                PredInit::Uniform => "uniform".into(),
                PredInit::Identity => "identity".into(),
            },
            "pooling" => pooling_name(self.pooling).into(),
            "head_layout" => match self.head_layout {
                HeadLayout::Global => "global".into(),
                HeadLayout::Local => "local".into(),
            },
            _ => return None,
        })
    }

    /// One `key=value` line per field, in [`TrainConfig::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            out.push_str(k);
            out.push('=');
            out.push_str(&self.get(k).unwrap_or_default());
            out.push('\n');
        }
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                config_err(format!("line {}: expected key=value, got {raw:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.h_in, self.h)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for (name, lr) in [
            ("lr_diag", self.lr_diag),
            ("lr_head", self.lr_head),
            ("finetune_scale", self.finetune_scale),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(config_err(format!(
                    "{name} must be finite and non-negative, got {lr}"
                )));
            }
        }
        if self.mode == TargetMode::Soft && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(config_err(format!(
                "alpha must be positive in soft mode, got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        if self.head_s == 0 || !self.h.is_multiple_of(self.head_s) {
            return Err(config_err(format!(
                "h={} is not divisible by head_s={}",
                self.h, self.head_s
            )));
        }
        if self.reduced == 0 || self.hidden == 0 {
            return Err(config_err("reduced and hidden must be at least 1"));
        }
        if !(1..=3).contains(&self.classes) {
            return Err(config_err(format!(
                "classes must be 1..=3, got {}",
                self.classes
            )));
        }
        if !(self.coord_weight >= 0.0 && self.noobj_weight >= 0.0) {
            return Err(config_err("loss weights must be non-negative"));
        }
        self.featurizer().map(|_| ())
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        Featurizer::with_gain(self.channels, self.featurizer_seed, self.feature_gain)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            coord: self.coord_weight,
            noobj: self.noobj_weight,
        }
    }
}

/// Adam moments, one slot per parameter matrix in [`Checkpoint::PARAM_NAMES`]
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub steps: Vec<u64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn zeros_like(params: &[&Matrix]) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            steps: alloc::vec![0; params.len()],
        }
    }
}

/// Everything needed to continue or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub diag: DiagNetParams,
    pub head: HeadParams,
    /// Present when the config selects Adam.
    pub adam: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng_state: u64,
}

impl Checkpoint {
    pub const PARAM_NAMES: [&'static str; 6] = [
        "w_emb", "w_pred", "head_w1", "head_b1", "head_w2", "head_b2",
    ];

    /// Fresh parameters drawn from the config seed.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(config.seed);
        let nodes = config.h * config.h;
        let diag = DiagNetParams::init_with(
            nodes,
            config.channels,
            config.reduced,
            config.pred_init,
            &mut rng.fork(),
        );
        let head = HeadParams::init(
            config.head_s,
            config.channels,
            config.classes as usize,
            config.hidden,
            config.h_in,
            config.head_layout,
            &mut rng.fork(),
        );
        let mut ck = Self {
            config: *config,
            diag,
            head,
            adam: None,
            epoch: 0,
            rng_state: rng.state(),
        };
        if config.optimizer == Optimizer::Adam {
            ck.adam = Some(AdamState::zeros_like(&ck.params()));
        }
        Ok(ck)
    }

    pub fn params(&self) -> [&Matrix; 6] {
        [
            &self.diag.w_emb,
            &self.diag.w_pred,
            &self.head.w1,
            &self.head.b1,
            &self.head.w2,
            &self.head.b2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.diag.w_emb,
            &mut self.diag.w_pred,
            &mut self.head.w1,
            &mut self.head.b1,
            &mut self.head.w2,
            &mut self.head.b2,
        ]
    }

    /// Parameters and optimizer state as named matrices, in a fixed order.
    /// Adam step counts are stored as a `1 × 6` matrix of exact integers.
    pub fn named_matrices(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = Self::PARAM_NAMES
            .iter()
            .zip(self.params())
            .map(|(n, m)| (String::from(*n), m.clone()))
            .collect();
        if let Some(adam) = &self.adam {
            for (i, n) in Self::PARAM_NAMES.iter().enumerate() {
                out.push((format!("adam_m.{n}"), adam.m[i].clone()));
                out.push((format!("adam_v.{n}"), adam.v[i].clone()));
            }
            let steps = Matrix::from_fn(1, adam.steps.len(), |_, j| adam.steps[j] as f64);
            out.push((String::from("adam_steps"), steps));
        }
        out
    }

    /// Reassembles a checkpoint from named matrices; shapes must match the
    /// config.
    pub fn from_parts(
        config: TrainConfig,
        mut named: Vec<(String, Matrix)>,
        epoch: usize,
        rng_state: u64,
    ) -> Result<Self> {
        let mut ck = Self::init(&config)?;
        let mut take = |name: &str, want: (usize, usize)| -> Result<Matrix> {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| config_err(format!("checkpoint is missing matrix {name}")))?;
            let (_, m) = named.swap_remove(pos);
            if m.shape() != want {
                return Err(Error::Shape {
                    op: "checkpoint matrix vs config",
                    left: m.shape(),
                    right: want,
                });
            }
            Ok(m)
        };
        let shapes: Vec<(usize, usize)> = ck.params().iter().map(|m| m.shape()).collect();
        for ((slot, name), &shape) in ck
            .params_mut()
            .into_iter()
            .zip(Self::PARAM_NAMES)
            .zip(&shapes)
        {
            *slot = take(name, shape)?;
        }
        if let Some(adam) = ck.adam.as_mut() {
            for (i, name) in Self::PARAM_NAMES.iter().enumerate() {
                adam.m[i] = take(&format!("adam_m.{name}"), shapes[i])?;
                adam.v[i] = take(&format!("adam_v.{name}"), shapes[i])?;
            }
            let steps = take("adam_steps", (1, shapes.len()))?;
            adam.steps = steps.data().iter().map(|&s| s as u64).collect();
        }
        if let Some((name, _)) = named.first() {
            return Err(config_err(format!(
                "checkpoint has unexpected matrix {name}"
            )));
        }
        ck.epoch = epoch;
        ck.rng_state = rng_state;
        Ok(ck)
    }

    /// Applies one update to the parameter at `idx`.
    pub fn update(&mut self, idx: usize, g: &Matrix, lr: f64) -> Result<()> {
        let p = match idx {
            0 => &mut self.diag.w_emb,
            1 => &mut self.diag.w_pred,
            2 => &mut self.head.w1,
            3 => &mut self.head.b1,
            4 => &mut self.head.w2,
            _ => &mut self.head.b2,
        };
        match self.adam.as_mut() {
            None => sgd_in_place(p, g, lr),
            Some(state) => {
                p.check_same(g, "adam step")?;
                if lr == 0.0 {
                    return Ok(());
                }
                state.steps[idx] += 1;
                let t = state.steps[idx] as f64;
                let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
                let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
                let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
                for (((w, &gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    *w -= lr * (*mi / c1) / (libm::sqrt(*vi / c2) + ADAM_EPS);
                }
                Ok(())
            }
        }
    }
}

/// A scene with its graph and fixed target projections.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub graph: Graph,
    /// `None` when the scene has no boxes.
    pub targets: Option<ProjectedTargets>,
    pub boxes: Vec<BBox>,
}

pub fn prepare_scene(
    scene: &Scene,
    config: &TrainConfig,
    featurizer: &Featurizer,
) -> Result<PreparedScene> {
    let grid = config.grid()?;
    if scene.image.side() != config.h_in {
        return Err(config_err(format!(
            "scene is {}×{} but the model expects h_in={}",
            scene.image.side(),
            scene.image.side(),
            config.h_in
        )));
    }
    let graph = to_graph(&featurizer.apply(&scene.image, &grid)?)?;
    let targets = if scene.boxes.is_empty() {
        None
    } else {
        let t = build_targets(
            &grid,
            &scene.boxes,
            config.mode,
            config.alpha,
            config.diagonal,
        )?;
        Some(ProjectedTargets::new(&graph, &t)?)
    };
    Ok(PreparedScene {
        graph,
        targets,
        boxes: scene.boxes.clone(),
    })
}

pub fn prepare_dataset(scenes: &[Scene], config: &TrainConfig) -> Result<Vec<PreparedScene>> {
    let featurizer = config.featurizer()?;
    scenes
        .iter()
        .map(|s| prepare_scene(s, config, &featurizer))
        .collect()
}

/// Maps a function over batch members. Results must come back in index
/// order so that reduction stays deterministic.
pub trait Executor {
    fn map<T: Send, F: Fn(usize) -> T + Sync>(&self, n: usize, f: F) -> Vec<T>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T: Send, F: Fn(usize) -> T + Sync>(&self, n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// 1-based epoch number.
    pub epoch: usize,
    pub diag_loss: f64,
    pub det_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<EpochLoss>,
}

impl LossLog {
    pub fn diag(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.diag_loss).collect()
    }

    pub fn extend(&mut self, other: LossLog) {
        self.rows.extend(other.rows);
    }
}

/// `p − lr·g`.
pub fn sgd_step(p: &Matrix, g: &Matrix, lr: f64) -> Result<Matrix> {
    let mut out = p.clone();
    sgd_in_place(&mut out, g, lr)?;
    Ok(out)
}

fn sgd_in_place(p: &mut Matrix, g: &Matrix, lr: f64) -> Result<()> {
    if lr == 0.0 {
        return p.check_same(g, "sgd_step");
    }
    p.axpy(-lr, g)
}

fn diag_member(scene: &PreparedScene, ck: &Checkpoint) -> Result<Option<(f64, Gradients)>> {
    let Some(proj) = scene.targets.as_ref() else {
        return Ok(None);
    };
    let trace = forward(&scene.graph, &ck.diag)?;
    let (loss, d_y) =
        loss_and_output_grad(&trace, proj, ck.config.loss_kind, ck.config.sentinel_loss)?;
    let g = backward_from_output(&trace, &scene.graph, &ck.diag, &d_y)?;
    Ok(Some((loss.value, g)))
}

fn head_member(
    scene: &PreparedScene,
    ck: &Checkpoint,
) -> Result<(f64, HeadGrads, Option<Gradients>)> {
    let cfg = &ck.config;
    let trace = forward(&scene.graph, &ck.diag)?;
    let pooled = pool_diag_map(&trace.y_hat, cfg.h, cfg.head_s, cfg.pooling)?;
    let ht = head_forward(&pooled, &ck.head)?;
    let (loss, d_preds) = detection_loss_grad(&ht.preds, &scene.boxes, cfg.loss_weights());
    let (hg, d_pooled) = head_backward(&ht, &ck.head, &d_preds)?;
    let dg = if cfg.finetune {
        let d_y = unpool_grad(&pooled, &d_pooled)?;
        Some(backward_from_output(&trace, &scene.graph, &ck.diag, &d_y)?)
    } else {
        None
    };
    Ok((loss, hg, dg))
}

fn guard(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, batch })
    }
}

/// Runs `epochs` more epochs on `ck`, returning one log row per epoch.
pub fn run_epochs<E: Executor>(
    ck: &mut Checkpoint,
    data: &[PreparedScene],
    epochs: usize,
    exec: &E,
) -> Result<LossLog> {
    if data.is_empty() {
        return Err(config_err("training set is empty"));
    }
    ck.config.validate()?;
    let cfg = ck.config;
    let mut rng = SplitMix64::from_state(ck.rng_state);
    let mut log = LossLog::default();
    for _ in 0..epochs {
        let epoch = ck.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();

        let (mut diag_sum, mut diag_count) = (0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let snapshot = &*ck;
            let results = exec.map(batch.len(), |i| diag_member(&data[batch[i]], snapshot));
            let mut acc = Gradients::zeros_like(&ck.diag);
            let mut n = 0usize;
            for r in results {
                if let Some((loss, g)) = r? {
                    guard(loss, epoch, b)?;
                    diag_sum += loss;
                    acc.accumulate(1.0, &g)?;
                    n += 1;
                }
            }
            if n > 0 {
                diag_count += n;
                let k = 1.0 / n as f64;
                ck.update(0, &acc.w_emb.scale(k), cfg.lr_diag)?;
                ck.update(1, &acc.w_pred.scale(k), cfg.lr_diag)?;
            }
        }

        let mut det_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let snapshot = &*ck;
            let results = exec.map(batch.len(), |i| head_member(&data[batch[i]], snapshot));
            let mut head_acc = HeadGrads::zeros_like(&ck.head);
            let mut diag_acc = Gradients::zeros_like(&ck.diag);
            for r in results {
                let (loss, hg, dg) = r?;
                guard(loss, epoch, b)?;
                det_sum += loss;
                head_acc.accumulate(1.0, &hg)?;
                if let Some(dg) = dg {
                    diag_acc.accumulate(1.0, &dg)?;
                }
            }
            let k = 1.0 / batch.len() as f64;
            for (idx, g) in [
                (2, &head_acc.w1),
                (3, &head_acc.b1),
                (4, &head_acc.w2),
                (5, &head_acc.b2),
            ] {
                ck.update(idx, &g.scale(k), cfg.lr_head)?;
            }
            if cfg.finetune {
                let lr = cfg.lr_diag * cfg.finetune_scale;
                ck.update(0, &diag_acc.w_emb.scale(k), lr)?;
                ck.update(1, &diag_acc.w_pred.scale(k), lr)?;
            }
        }
        if !(ck.diag.w_emb.is_finite() && ck.diag.w_pred.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                batch: batches.len() - 1,
            });
        }

        ck.epoch = epoch;
        log.rows.push(EpochLoss {
            epoch,
            diag_loss: if diag_count > 0 {
                diag_sum / diag_count as f64
            } else {
                0.0
            },
            det_loss: det_sum / data.len() as f64,
        });
    }
    ck.rng_state = rng.state();
    Ok(log)
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train<E: Executor>(
    scenes: &[Scene],
    config: &TrainConfig,
    exec: &E,
) -> Result<(Checkpoint, LossLog)> {
    if scenes.is_empty() {
        return Err(config_err("training set is empty"));
    }
    let mut ck = Checkpoint::init(config)?;
    let data = prepare_dataset(scenes, config)?;
    let log = run_epochs(&mut ck, &data, config.epochs, exec)?;
    Ok((ck, log))
}

/// Moving average over every full window of `w` consecutive values.
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len().saturating_sub(w - 1))
        .map(|i| xs[i..i + w].iter().sum::<f64>() / w as f64)
        .collect()
}
