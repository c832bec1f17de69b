//! Grid detection head on the pooled diagonal map.
//!
//! `Ŷ` (L × N) is reshaped to an `h × h` grid of `L`-vectors, pooled to
//! `S × S`, flattened and passed through two fully connected layers to one
//! box per cell: `(x, y, w, h, conf, p_0..p_C)`. Offsets, sizes and confidence
//! are sigmoids; class scores are a softmax. Sizes are fractions of the image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::evalmap::iou;
use crate::geom::BBox;
use crate::linalg::{matmul, matmul_nt, matmul_tn, rand_matrix_with, Matrix};
use crate::rng::SplitMix64;

pub const LEAKY_SLOPE: f64 = 0.1;
/// Per-cell outputs before the class block.
pub const BOX_FIELDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Average,
    Max,
}

/// Pooled diagonal map, one row per head cell (row-major), `L` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMap {
    pub s: usize,
    pub values: Matrix,
    /// For max pooling, the source node of every `(cell, channel)` entry.
    argmax: Option<Vec<usize>>,
    window: usize,
    pooling: Pooling,
}

pub fn pool_diag_map(y_hat: &Matrix, h: usize, s: usize, pooling: Pooling) -> Result<PooledMap> {
    let (l, n) = y_hat.shape();
    if n != h * h {
        return Err(Error::Shape {
            op: "pool_diag_map: columns vs h²",
            left: y_hat.shape(),
            right: (h, h),
        });
    }
    if s == 0 || !h.is_multiple_of(s) {
        return Err(config_err(format!(
            "grid side {h} is not divisible by head side {s}"
        )));
    }
    let k = h / s;
    let mut values = Matrix::zeros(s * s, l);
    let mut argmax = (pooling == Pooling::Max).then(|| vec![0usize; s * s * l]);
    for cy in 0..s {
        for cx in 0..s {
            let cell = cy * s + cx;
            for ch in 0..l {
                let src = y_hat.row(ch);
                let nodes =
                    (0..k).flat_map(|dy| (0..k).map(move |dx| (cy * k + dy) * h + cx * k + dx));
                let v = match pooling {
                    Pooling::Average => nodes.map(|i| src[i]).sum::<f64>() / (k * k) as f64,
                    Pooling::Max => {
                        let (best, v) = nodes.fold((usize::MAX, f64::NEG_INFINITY), |acc, i| {
                            if src[i] > acc.1 {
                                (i, src[i])
                            } else {
                                acc
                            }
                        });
                        if let Some(a) = argmax.as_mut() {
                            a[cell * l + ch] = best;
                        }
                        v
                    }
                };
                values[(cell, ch)] = v;
            }
        }
    }
    Ok(PooledMap {
        s,
        values,
        argmax,
        window: k,
        pooling,
    })
}

/// Routes a gradient on the pooled map back to `Ŷ`'s `L × N` layout.
pub fn unpool_grad(pooled: &PooledMap, d_pooled: &Matrix) -> Result<Matrix> {
    pooled.values.check_same(d_pooled, "unpool_grad")?;
    let (s, k) = (pooled.s, pooled.window);
    let h = s * k;
    let l = pooled.values.cols();
    let mut out = Matrix::zeros(l, h * h);
    for cy in 0..s {
        for cx in 0..s {
            let cell = cy * s + cx;
            for ch in 0..l {
                let g = d_pooled[(cell, ch)];
                match pooled.pooling {
                    Pooling::Average => {
                        let share = g / (k * k) as f64;
                        for dy in 0..k {
                            for dx in 0..k {
                                out[(ch, (cy * k + dy) * h + cx * k + dx)] += share;
                            }
                        }
                    }
                    Pooling::Max => {
                        let idx = pooled
                            .argmax
                            .as_ref()
                            .map(|a| a[cell * l + ch])
                            .unwrap_or(0);
                        out[(ch, idx)] += g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// How the two fully connected layers see the pooled map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadLayout {
    /// One dense map from the whole flattened `S·S·L` map to all cells.
    Global,
    /// The same dense layers applied to every cell's `3 × 3` neighbourhood
    /// (zero padded), weights shared across cells.
    #[default]
    Local,
}

pub const LOCAL_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `hidden × in`, `in = S²·L` (global) or `9·L` (local).
    pub w1: Matrix,
    /// `1 × hidden`
    pub b1: Matrix,
    /// `out × hidden`, `out = S²·(5+C)` (global) or `5+C` (local).
    pub w2: Matrix,
    /// `1 × out`
    pub b2: Matrix,
    pub s: usize,
    pub classes: usize,
    pub image_size: usize,
    pub layout: HeadLayout,
}

impl HeadParams {
    fn dims(s: usize, features: usize, classes: usize, layout: HeadLayout) -> (usize, usize) {
        match layout {
            HeadLayout::Global => (s * s * features, s * s * (BOX_FIELDS + classes)),
            HeadLayout::Local => (LOCAL_WINDOW * LOCAL_WINDOW * features, BOX_FIELDS + classes),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases.
    pub fn init(
        s: usize,
        features: usize,
        classes: usize,
        hidden: usize,
        image_size: usize,
        layout: HeadLayout,
        rng: &mut SplitMix64,
    ) -> Self {
        let (input, output) = Self::dims(s, features, classes, layout);
        Self {
            w1: rand_matrix_with(hidden, input, rng, 1.0 / libm::sqrt(input as f64)),
            b1: Matrix::zeros(1, hidden),
            w2: rand_matrix_with(output, hidden, rng, 1.0 / libm::sqrt(hidden as f64)),
            b2: Matrix::zeros(1, output),
            s,
            classes,
            image_size,
            layout,
        }
    }

    pub fn zeros(
        s: usize,
        features: usize,
        classes: usize,
        hidden: usize,
        image_size: usize,
        layout: HeadLayout,
    ) -> Self {
        let (input, output) = Self::dims(s, features, classes, layout);
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(output, hidden),
            b2: Matrix::zeros(1, output),
            s,
            classes,
            image_size,
            layout,
        }
    }

    pub fn fields(&self) -> usize {
        BOX_FIELDS + self.classes
    }

    pub fn cell_px(&self) -> f64 {
        self.image_size as f64 / self.s as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        Self {
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: Matrix::zeros(1, p.b1.cols()),
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: Matrix::zeros(1, p.b2.cols()),
        }
    }

    pub fn accumulate(&mut self, k: f64, o: &HeadGrads) -> Result<()> {
        self.w1.axpy(k, &o.w1)?;
        self.b1.axpy(k, &o.b1)?;
        self.w2.axpy(k, &o.w2)?;
        self.b2.axpy(k, &o.b2)
    }
}

/// Activated per-cell predictions, `S² × (5 + C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub s: usize,
    pub classes: usize,
    pub image_size: usize,
    pub values: Matrix,
}

impl Predictions {
    pub fn cell(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn cell_px(&self) -> f64 {
        self.image_size as f64 / self.s as f64
    }

    /// Decoded box of cell `i`, clamped to the image.
    pub fn cell_box(&self, i: usize) -> BBox {
        let v = self.cell(i);
        let (row, col) = ((i / self.s) as f64, (i % self.s) as f64);
        let side = self.image_size as f64;
        let cx = (col + v[0]) * self.cell_px();
        let cy = (row + v[1]) * self.cell_px();
        let (hw, hh) = (0.5 * v[2] * side, 0.5 * v[3] * side);
        BBox {
            x1: (cx - hw).clamp(0.0, side),
            y1: (cy - hh).clamp(0.0, side),
            x2: (cx + hw).clamp(0.0, side),
            y2: (cy + hh).clamp(0.0, side),
            class_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    /// One row per dense evaluation: a single row (global) or one per cell.
    input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
    features: usize,
    pub preds: Predictions,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

/// `x Wᵀ + b` with `b` broadcast over rows.
fn dense(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut z = matmul_nt(x, w)?;
    for r in 0..z.rows() {
        for (v, bias) in z.row_mut(r).iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(z)
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Neighbour cell of `cell` at window offset `k`, if inside the grid.
fn neighbour(s: usize, cell: usize, k: usize) -> Option<usize> {
    let half = (LOCAL_WINDOW / 2) as isize;
    let r = (cell / s) as isize + (k / LOCAL_WINDOW) as isize - half;
    let c = (cell % s) as isize + (k % LOCAL_WINDOW) as isize - half;
    let s = s as isize;
    (r >= 0 && r < s && c >= 0 && c < s).then(|| (r * s + c) as usize)
}

fn gather_input(pooled: &PooledMap, layout: HeadLayout) -> Matrix {
    let (cells, l) = pooled.values.shape();
    match layout {
        HeadLayout::Global => Matrix::from_fn(1, cells * l, |_, j| pooled.values.data()[j]),
        HeadLayout::Local => {
            let mut m = Matrix::zeros(cells, LOCAL_WINDOW * LOCAL_WINDOW * l);
            for cell in 0..cells {
                for k in 0..LOCAL_WINDOW * LOCAL_WINDOW {
                    if let Some(n) = neighbour(pooled.s, cell, k) {
                        m.row_mut(cell)[k * l..(k + 1) * l].copy_from_slice(pooled.values.row(n));
                    }
                }
            }
            m
        }
    }
}

pub fn head_forward(pooled: &PooledMap, p: &HeadParams) -> Result<HeadTrace> {
    let features = pooled.values.cols();
    let (want_in, _) = HeadParams::dims(p.s, features, p.classes, p.layout);
    if pooled.s != p.s || want_in != p.w1.cols() {
        return Err(Error::Shape {
            op: "head_forward: pooled map vs W1",
            left: pooled.values.shape(),
            right: p.w1.shape(),
        });
    }
    let input = gather_input(pooled, p.layout);
    let hidden_pre = dense(&input, &p.w1, &p.b1)?;
    let hidden = hidden_pre.map(leaky);
    let logits = dense(&hidden, &p.w2, &p.b2)?;
    let fields = p.fields();
    let mut values = Matrix::zeros(p.s * p.s, fields);
    for cell in 0..p.s * p.s {
        let z = &logits.data()[cell * fields..(cell + 1) * fields];
        let out = values.row_mut(cell);
        for k in 0..BOX_FIELDS {
            out[k] = sigmoid(z[k]);
        }
        let cls = &z[BOX_FIELDS..];
        let max = cls.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = cls.iter().map(|&v| libm::exp(v - max)).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out[BOX_FIELDS..].iter_mut().zip(&exps) {
            *o = e / total;
        }
    }
    Ok(HeadTrace {
        input,
        hidden_pre,
        hidden,
        features,
        preds: Predictions {
            s: p.s,
            classes: p.classes,
            image_size: p.image_size,
            values,
        },
    })
}

/// Backpropagates `∂L/∂preds` (activated outputs) to the head weights and to
/// the pooled map.
pub fn head_backward(
    trace: &HeadTrace,
    p: &HeadParams,
    d_preds: &Matrix,
) -> Result<(HeadGrads, Matrix)> {
    trace.preds.values.check_same(d_preds, "head_backward")?;
    let fields = p.fields();
    let cells = p.s * p.s;
    let mut d_act = Matrix::zeros(cells, fields);
    for cell in 0..cells {
        let y = trace.preds.cell(cell);
        let dy = d_preds.row(cell);
        let dz = d_act.row_mut(cell);
        for k in 0..BOX_FIELDS {
            dz[k] = dy[k] * y[k] * (1.0 - y[k]);
        }
        let dot: f64 = (BOX_FIELDS..fields).map(|k| y[k] * dy[k]).sum();
        for k in BOX_FIELDS..fields {
            dz[k] = y[k] * (dy[k] - dot);
        }
    }
    // Same data, laid out like the logits of the dense layer.
    let d_logits = Matrix::from_vec(trace.hidden.rows(), p.w2.rows(), d_act.into_vec())?;
    let w2 = matmul_tn(&d_logits, &trace.hidden)?;
    let b2 = col_sums(&d_logits);
    let d_hidden = matmul(&d_logits, &p.w2)?;
    let d_pre = d_hidden.zip_map(&trace.hidden_pre, "head_backward", |d, z| {
        if z > 0.0 {
            d
        } else {
            LEAKY_SLOPE * d
        }
    })?;
    let w1 = matmul_tn(&d_pre, &trace.input)?;
    let b1 = col_sums(&d_pre);
    let d_input = matmul(&d_pre, &p.w1)?;
    let l = trace.features;
    let d_pooled = match p.layout {
        HeadLayout::Global => Matrix::from_vec(cells, l, d_input.into_vec())?,
        HeadLayout::Local => {
            let mut out = Matrix::zeros(cells, l);
            for cell in 0..cells {
                for k in 0..LOCAL_WINDOW * LOCAL_WINDOW {
                    if let Some(n) = neighbour(p.s, cell, k) {
                        let src = &d_input.row(cell)[k * l..(k + 1) * l];
                        for (o, v) in out.row_mut(n).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            out
        }
    };
    Ok((HeadGrads { w1, b1, w2, b2 }, d_pooled))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coord: 5.0,
            noobj: 0.5,
        }
    }
}

/// Target cell and `(x, y, w, h)` encoding of a box.
pub fn encode_box(b: &BBox, s: usize, image_size: usize) -> (usize, [f64; 4]) {
    let cell_px = image_size as f64 / s as f64;
    let (cx, cy) = b.center();
    let col = ((cx / cell_px) as usize).min(s - 1);
    let row = ((cy / cell_px) as usize).min(s - 1);
    let side = image_size as f64;
    (
        row * s + col,
        [
            cx / cell_px - col as f64,
            cy / cell_px - row as f64,
            b.width() / side,
            b.height() / side,
        ],
    )
}

/// Responsible ground truth per cell; a later box in an occupied cell is
/// ignored.
pub fn assign_cells(gts: &[BBox], s: usize, image_size: usize) -> Vec<Option<(usize, [f64; 4])>> {
    let mut owner = vec![None; s * s];
    for (i, g) in gts.iter().enumerate() {
        let (cell, enc) = encode_box(g, s, image_size);
        if owner[cell].is_none() {
            owner[cell] = Some((i, enc));
        }
    }
    owner
}

/// Sum-squared detection loss and its gradient with respect to `preds`.
pub fn detection_loss_grad(preds: &Predictions, gts: &[BBox], w: LossWeights) -> (f64, Matrix) {
    let fields = BOX_FIELDS + preds.classes;
    let owner = assign_cells(gts, preds.s, preds.image_size);
    let mut grad = Matrix::zeros(preds.s * preds.s, fields);
    let mut loss = 0.0;
    for (cell, slot) in owner.iter().enumerate() {
        let v = preds.cell(cell);
        let d = grad.row_mut(cell);
        match slot {
            None => {
                loss += w.noobj * v[4] * v[4];
                d[4] = 2.0 * w.noobj * v[4];
            }
            Some((gi, t)) => {
                let gt = &gts[*gi];
                for k in 0..2 {
                    let r = v[k] - t[k];
                    loss += w.coord * r * r;
                    d[k] = 2.0 * w.coord * r;
                }
                for k in 2..4 {
                    let sv = libm::sqrt(v[k]);
                    let r = sv - libm::sqrt(t[k]);
                    loss += w.coord * r * r;
                    d[k] = w.coord * r / sv;
                }
                let target_conf = iou(&preds.cell_box(cell), gt);
                let r = v[4] - target_conf;
                loss += r * r;
                d[4] = 2.0 * r;
                for c in 0..preds.classes {
                    let onehot = if c as u32 == gt.class_id { 1.0 } else { 0.0 };
                    let r = v[BOX_FIELDS + c] - onehot;
                    loss += r * r;
                    d[BOX_FIELDS + c] = 2.0 * r;
                }
            }
        }
    }
    (loss, grad)
}

pub fn detection_loss(preds: &Predictions, gts: &[BBox], w: LossWeights) -> f64 {
    detection_loss_grad(preds, gts, w).0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Confidence times the top class probability.
    pub score: f64,
    pub class_id: u32,
    /// Source cell, used as a deterministic tie-break.
    pub cell: usize,
}

pub fn decode(preds: &Predictions, score_threshold: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    for cell in 0..preds.s * preds.s {
        let v = preds.cell(cell);
        let (class, prob) = v[BOX_FIELDS..].iter().enumerate().fold(
            (0usize, f64::NEG_INFINITY),
            |best, (c, &p)| if p > best.1 { (c, p) } else { best },
        );
        let score = (v[4] * prob).clamp(0.0, 1.0);
        if score >= score_threshold {
            let mut bbox = preds.cell_box(cell);
            bbox.class_id = class as u32;
            if bbox.x1 < bbox.x2 && bbox.y1 < bbox.y2 {
                out.push(Detection {
                    bbox,
                    score,
                    class_id: class as u32,
                    cell,
                });
            }
        }
    }
    out
}

/// Greedy per-class non-maximum suppression. Output is ordered by score
/// descending, ties by cell index.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) < iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}
