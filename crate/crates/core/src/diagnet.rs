//! The GCN neck: node embedding, edge prediction, the diagonal losses and
//! their hand-derived gradients.
//!
//! ```text
//! H  = tanh(Ã X W_emb)        N × L'
//! Â  = H Hᵀ                   N × N
//! Ŷ  = tanh(Xᵀ Â W_pred)      L × N
//! L_min  = ‖Ŷ − Xᵀ A_diag‖
//! L_comp = ‖Ŷ − Xᵀ A_diag‖ / ‖Ŷ − Xᵀ A_perp‖
//! ```
//!
//! Norms are Frobenius. For differentiation each norm is smoothed to
//! `sqrt(‖R‖² + ε²)` with `ε = NORM_EPS`, which makes the gradient total and
//! zero at zero residual.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geom::{DiagTargets, TargetMode};
use crate::graph::Graph;
use crate::linalg::{
    frobenius_norm, matmul, matmul_nt, matmul_tn, rand_matrix_with, tanh_map, Matrix,
};
use crate::rng::SplitMix64;

/// Smoothing constant for the norm in both losses.
pub const NORM_EPS: f64 = 1e-12;
/// Below this complementary residual norm `L_comp` reports the sentinel.
pub const COMP_DENOM_EPS: f64 = 1e-12;
pub const DEFAULT_SENTINEL_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    Min,
    #[default]
    Comp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagNetParams {
    /// `L × L'`
    pub w_emb: Matrix,
    /// `N × N`
    pub w_pred: Matrix,
}

/// Starting point for `W_pred`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredInit {
    /// Uniform in `±1/√N`, like `W_emb`.
    Uniform,
    /// `W_pred = I`: column `j` of `Ŷ` starts out reading only node `j`.
    #[default]
    Identity,
}

impl DiagNetParams {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization of both matrices.
    pub fn init(nodes: usize, features: usize, reduced: usize, rng: &mut SplitMix64) -> Self {
        Self::init_with(nodes, features, reduced, PredInit::Uniform, rng)
    }

    pub fn init_with(
        nodes: usize,
        features: usize,
        reduced: usize,
        pred: PredInit,
        rng: &mut SplitMix64,
    ) -> Self {
        let w_emb = rand_matrix_with(features, reduced, rng, 1.0 / libm::sqrt(features as f64));
        let w_pred = match pred {
            PredInit::Uniform => {
                rand_matrix_with(nodes, nodes, rng, 1.0 / libm::sqrt(nodes as f64))
            }
            PredInit::Identity => Matrix::identity(nodes),
        };
        Self { w_emb, w_pred }
    }

    pub fn zeros(nodes: usize, features: usize, reduced: usize) -> Self {
        Self {
            w_emb: Matrix::zeros(features, reduced),
            w_pred: Matrix::zeros(nodes, nodes),
        }
    }

    pub fn nodes(&self) -> usize {
        self.w_pred.rows()
    }

    pub fn features(&self) -> usize {
        self.w_emb.rows()
    }

    pub fn reduced(&self) -> usize {
        self.w_emb.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `Ã X W_emb`, pre-activation of `H`.
    pub z_emb: Matrix,
    pub h_emb: Matrix,
    pub a_hat: Matrix,
    /// `Xᵀ H`, `L × L'`.
    pub xt_h: Matrix,
    /// `Xᵀ Â`, `L × N`.
    pub xt_a_hat: Matrix,
    /// `Xᵀ Â W_pred`, pre-activation of `Ŷ`.
    pub z_pred: Matrix,
    pub y_hat: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_emb: Matrix,
    pub w_pred: Matrix,
}

impl Gradients {
    pub fn zeros_like(p: &DiagNetParams) -> Self {
        Self {
            w_emb: Matrix::zeros(p.w_emb.rows(), p.w_emb.cols()),
            w_pred: Matrix::zeros(p.w_pred.rows(), p.w_pred.cols()),
        }
    }

    pub fn accumulate(&mut self, k: f64, other: &Gradients) -> Result<()> {
        self.w_emb.axpy(k, &other.w_emb)?;
        self.w_pred.axpy(k, &other.w_pred)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            w_emb: self.w_emb.scale(k),
            w_pred: self.w_pred.scale(k),
        }
    }
}

/// `Xᵀ A_diag` and `Xᵀ A_perp`, fixed for a given (graph, targets) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTargets {
    pub diag: Matrix,
    pub perp: Matrix,
}

impl ProjectedTargets {
    pub fn new(g: &Graph, t: &DiagTargets) -> Result<Self> {
        Ok(Self {
            diag: matmul_tn(&g.x, &t.a_diag)?,
            perp: matmul_tn(&g.x, &t.a_perp)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `L_comp` hit the denominator guard and `value` is the sentinel.
    pub degenerate: bool,
}

fn check_params(g: &Graph, p: &DiagNetParams) -> Result<()> {
    if p.w_emb.rows() != g.features() {
        return Err(Error::Shape {
            op: "forward: W_emb rows vs feature size L",
            left: p.w_emb.shape(),
            right: g.x.shape(),
        });
    }
    if p.w_pred.rows() != g.nodes() || p.w_pred.cols() != g.nodes() {
        return Err(Error::Shape {
            op: "forward: W_pred vs node count N",
            left: p.w_pred.shape(),
            right: g.x.shape(),
        });
    }
    Ok(())
}

fn check_trace(trace: &ForwardTrace, g: &Graph) -> Result<()> {
    if trace.y_hat.shape() != (g.features(), g.nodes()) {
        return Err(Error::Shape {
            op: "stale trace: Y_hat vs graph",
            left: trace.y_hat.shape(),
            right: g.x.shape(),
        });
    }
    Ok(())
}

pub fn forward(g: &Graph, p: &DiagNetParams) -> Result<ForwardTrace> {
    check_params(g, p)?;
    let z_emb = matmul(&g.ax, &p.w_emb)?;
    let h_emb = tanh_map(&z_emb);
    let a_hat = matmul_nt(&h_emb, &h_emb)?;
    let xt_h = matmul_tn(&g.x, &h_emb)?;
    // Xᵀ Â = (Xᵀ H) Hᵀ, cheaper than forming Xᵀ (H Hᵀ).
    let xt_a_hat = matmul_nt(&xt_h, &h_emb)?;
    let z_pred = matmul(&xt_a_hat, &p.w_pred)?;
    let y_hat = tanh_map(&z_pred);
    Ok(ForwardTrace {
        z_emb,
        h_emb,
        a_hat,
        xt_h,
        xt_a_hat,
        z_pred,
        y_hat,
    })
}

pub fn loss_min(trace: &ForwardTrace, g: &Graph, t: &DiagTargets) -> Result<f64> {
    check_trace(trace, g)?;
    let proj = ProjectedTargets::new(g, t)?;
    Ok(frobenius_norm(&trace.y_hat.sub(&proj.diag)?))
}

pub fn loss_comp(
    trace: &ForwardTrace,
    g: &Graph,
    t: &DiagTargets,
    sentinel: f64,
) -> Result<LossValue> {
    check_trace(trace, g)?;
    let proj = ProjectedTargets::new(g, t)?;
    loss_projected(trace, &proj, LossKind::Comp, sentinel)
}

/// Loss value against precomputed target projections.
pub fn loss_projected(
    trace: &ForwardTrace,
    proj: &ProjectedTargets,
    kind: LossKind,
    sentinel: f64,
) -> Result<LossValue> {
    let num = frobenius_norm(&trace.y_hat.sub(&proj.diag)?);
    match kind {
        LossKind::Min => Ok(LossValue {
            value: num,
            degenerate: false,
        }),
        LossKind::Comp => {
            let den = frobenius_norm(&trace.y_hat.sub(&proj.perp)?);
            if den < COMP_DENOM_EPS {
                Ok(LossValue {
                    value: sentinel,
                    degenerate: true,
                })
            } else {
                Ok(LossValue {
                    value: num / den,
                    degenerate: false,
                })
            }
        }
    }
}

/// Loss value and `∂L/∂Ŷ` against precomputed projections. A degenerate
/// `L_comp` yields the sentinel with a zero gradient.
pub fn loss_and_output_grad(
    trace: &ForwardTrace,
    proj: &ProjectedTargets,
    kind: LossKind,
    sentinel: f64,
) -> Result<(LossValue, Matrix)> {
    let r1 = trace.y_hat.sub(&proj.diag)?;
    let n1 = libm::sqrt(r1.data().iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS);
    match kind {
        LossKind::Min => {
            let loss = LossValue {
                value: frobenius_norm(&r1),
                degenerate: false,
            };
            Ok((loss, r1.scale(1.0 / n1)))
        }
        LossKind::Comp => {
            let r2 = trace.y_hat.sub(&proj.perp)?;
            let den = frobenius_norm(&r2);
            if den < COMP_DENOM_EPS {
                let (r, c) = r1.shape();
                let loss = LossValue {
                    value: sentinel,
                    degenerate: true,
                };
                return Ok((loss, Matrix::zeros(r, c)));
            }
            let n2 = libm::sqrt(den * den + NORM_EPS * NORM_EPS);
            // d(n1/n2) = R1/(n1 n2) − n1 R2 / n2³
            let mut grad = r1.scale(1.0 / (n1 * n2));
            grad.axpy(-n1 / (n2 * n2 * n2), &r2)?;
            let loss = LossValue {
                value: frobenius_norm(&r1) / den,
                degenerate: false,
            };
            Ok((loss, grad))
        }
    }
}

/// Chain rule from `∂L/∂Ŷ` back to both weight matrices. The gradient
/// reaches `W_emb` through `Â = H Hᵀ`.
pub fn backward_from_output(
    trace: &ForwardTrace,
    g: &Graph,
    p: &DiagNetParams,
    d_y: &Matrix,
) -> Result<Gradients> {
    check_trace(trace, g)?;
    check_params(g, p)?;
    trace.y_hat.check_same(d_y, "backward: dY vs Y_hat")?;

    let d_z_pred = d_y.zip_map(&trace.y_hat, "backward", |d, y| d * (1.0 - y * y))?;
    let w_pred = matmul_tn(&trace.xt_a_hat, &d_z_pred)?;
    let d_m = matmul_nt(&d_z_pred, &p.w_pred)?;
    // dÂ = X dM and dH = (dÂ + dÂᵀ) H, expanded to avoid N × N temporaries.
    let d_m_h = matmul(&d_m, &trace.h_emb)?;
    let mut d_h = matmul(&g.x, &d_m_h)?;
    d_h.axpy(1.0, &matmul_tn(&d_m, &trace.xt_h)?)?;
    let d_z_emb = d_h.zip_map(&trace.h_emb, "backward", |d, h| d * (1.0 - h * h))?;
    let w_emb = matmul_tn(&g.ax, &d_z_emb)?;
    Ok(Gradients { w_emb, w_pred })
}

pub fn backward(
    trace: &ForwardTrace,
    g: &Graph,
    p: &DiagNetParams,
    t: &DiagTargets,
    kind: LossKind,
) -> Result<Gradients> {
    check_trace(trace, g)?;
    let proj = ProjectedTargets::new(g, t)?;
    let (_, d_y) = loss_and_output_grad(trace, &proj, kind, DEFAULT_SENTINEL_LOSS)?;
    backward_from_output(trace, g, p, &d_y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckDims {
    /// Grid side; `N = side²`.
    pub side: usize,
    pub features: usize,
    pub reduced: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            side: 4,
            features: 8,
            reduced: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub dims: GradCheckDims,
    pub step: f64,
    pub tolerance: f64,
    /// Doubles the largest analytic `W_pred` entry before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 5,
            dims: GradCheckDims::default(),
            step: 1e-6,
            tolerance: 1e-4,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComboReport {
    pub kind: LossKind,
    pub mode: TargetMode,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub combos: Vec<ComboReport>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Entries with both magnitudes below this are compared absolutely.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRAD_ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

fn param_slot(p: &mut DiagNetParams, which: usize, k: usize) -> &mut f64 {
    if which == 0 {
        &mut p.w_emb.data_mut()[k]
    } else {
        &mut p.w_pred.data_mut()[k]
    }
}

/// Worst per-entry error between `backward` and central finite differences
/// of the reported loss on one instance.
pub fn check_instance(
    g: &Graph,
    p: &DiagNetParams,
    t: &DiagTargets,
    kind: LossKind,
    step: f64,
    corrupt: bool,
) -> Result<f64> {
    let proj = ProjectedTargets::new(g, t)?;
    let trace = forward(g, p)?;
    let mut grads = backward(&trace, g, p, t, kind)?;
    if corrupt {
        let data = grads.w_pred.data_mut();
        let (idx, _) = data.iter().enumerate().fold((0, 0.0f64), |best, (i, v)| {
            if v.abs() > best.1 {
                (i, v.abs())
            } else {
                best
            }
        });
        data[idx] *= 2.0;
    }
    let loss_at = |q: &DiagNetParams| -> Result<f64> {
        let tr = forward(g, q)?;
        Ok(loss_projected(&tr, &proj, kind, DEFAULT_SENTINEL_LOSS)?.value)
    };

    let mut worst = 0.0f64;
    let mut probe = p.clone();
    for which in 0..2 {
        let len = if which == 0 {
            p.w_emb.data().len()
        } else {
            p.w_pred.data().len()
        };
        for k in 0..len {
            let orig = *param_slot(&mut probe, which, k);
            *param_slot(&mut probe, which, k) = orig + step;
            let up = loss_at(&probe)?;
            *param_slot(&mut probe, which, k) = orig - step;
            let down = loss_at(&probe)?;
            *param_slot(&mut probe, which, k) = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = if which == 0 {
                grads.w_emb.data()[k]
            } else {
                grads.w_pred.data()[k]
            };
            worst = worst.max(entry_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Random graph, box targets and parameters sized by `dims`.
pub fn random_instance(
    dims: GradCheckDims,
    mode: TargetMode,
    rng: &mut SplitMix64,
) -> Result<(Graph, DiagNetParams, DiagTargets)> {
    use crate::geom::{build_targets, BBox, Diagonal, PatchGrid};

    let n = dims.side * dims.side;
    let x = rand_matrix_with(n, dims.features, rng, 1.0);
    let g = Graph::from_nodes(x)?;
    let params = DiagNetParams::init(n, dims.features, dims.reduced, rng);
    let grid = PatchGrid::new(8 * dims.side, dims.side)?;
    let side = grid.h_in() as f64;
    let x1 = rng.uniform(0.0, 0.5 * side);
    let y1 = rng.uniform(0.0, 0.5 * side);
    let x2 = rng.uniform(x1 + 0.25 * side, side);
    let y2 = rng.uniform(y1 + 0.25 * side, side);
    let bbox = BBox::new(x1, y1, x2, y2, 0)?;
    let t = build_targets(&grid, &[bbox], mode, 1.0, Diagonal::Main)?;
    Ok((g, params, t))
}

/// Finite-difference verification of `backward` over both losses and both
/// target modes.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut combos = Vec::new();
    for kind in [LossKind::Min, LossKind::Comp] {
        for mode in [TargetMode::Hard, TargetMode::Soft] {
            let mut worst = 0.0f64;
            for trial in 0..cfg.trials {
                let seed = cfg
                    .seed
                    .wrapping_mul(0x9E37_79B9)
                    .wrapping_add(trial as u64)
                    .wrapping_add(((kind as u64) << 32) | ((mode as u64) << 40));
                let mut rng = SplitMix64::new(seed);
                let (g, p, t) = random_instance(cfg.dims, mode, &mut rng)?;
                worst = worst.max(check_instance(&g, &p, &t, kind, cfg.step, cfg.corrupt)?);
            }
            combos.push(ComboReport {
                kind,
                mode,
                max_rel_error: worst,
                pass: worst <= cfg.tolerance,
            });
        }
    }
    let max_rel_error = combos.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    let pass = combos.iter().all(|c| c.pass);
    Ok(GradCheckReport {
        combos,
        max_rel_error,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_hard_targets, BBox, Diagonal, PatchGrid};
    use crate::linalg::rand_matrix;

    fn instance(seed: u64, mode: TargetMode) -> (Graph, DiagNetParams, DiagTargets) {
        let dims = GradCheckDims {
            side: 3,
            features: 4,
            reduced: 3,
        };
        random_instance(dims, mode, &mut SplitMix64::new(seed)).unwrap()
    }

    #[test]
    fn zero_embedding_propagates_zero() {
        let (g, mut p, _) = instance(1, TargetMode::Hard);
        p.w_emb = Matrix::zeros(4, 3);
        let tr = forward(&g, &p).unwrap();
        assert_eq!(tr.h_emb.max_abs(), 0.0);
        assert_eq!(tr.a_hat.max_abs(), 0.0);
        assert_eq!(tr.y_hat.max_abs(), 0.0);
    }

    #[test]
    fn scalar_chain_by_hand() {
        // N = 1, L = 1, L' = 1, x = v, all weights 1.
        let v = 0.7f64;
        let g = Graph::from_nodes(Matrix::filled(1, 1, v)).unwrap();
        let p = DiagNetParams {
            w_emb: Matrix::filled(1, 1, 1.0),
            w_pred: Matrix::filled(1, 1, 1.0),
        };
        let tr = forward(&g, &p).unwrap();
        // Ã = 1 for a single nonzero node.
        let h = v.tanh();
        let y = (v * h * h).tanh();
        assert!((tr.h_emb[(0, 0)] - h).abs() < 1e-15);
        assert!((tr.a_hat[(0, 0)] - h * h).abs() < 1e-15);
        assert!((tr.y_hat[(0, 0)] - y).abs() < 1e-15);
    }

    #[test]
    fn a_hat_is_gram_matrix() {
        let (g, p, _) = instance(3, TargetMode::Soft);
        let tr = forward(&g, &p).unwrap();
        assert_eq!(tr.a_hat, matmul_nt(&tr.h_emb, &tr.h_emb).unwrap());
        assert!(tr.a_hat.is_symmetric(1e-12));
        let mut rng = SplitMix64::new(5);
        for _ in 0..100 {
            let z = rand_matrix_with(9, 1, &mut rng, 1.0);
            let q = matmul_tn(&z, &matmul(&tr.a_hat, &z).unwrap()).unwrap();
            assert!(q[(0, 0)] >= -1e-9);
        }
        assert_eq!(forward(&g, &p).unwrap(), tr);
    }

    #[test]
    fn pred_init_variants() {
        let a = DiagNetParams::init_with(9, 4, 3, PredInit::Identity, &mut SplitMix64::new(2));
        let b = DiagNetParams::init_with(9, 4, 3, PredInit::Uniform, &mut SplitMix64::new(2));
        assert_eq!(a.w_pred, Matrix::identity(9));
        assert_eq!(a.w_emb, b.w_emb);
        let bound = 1.0 / 3.0;
        assert!(b.w_pred.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(b, DiagNetParams::init(9, 4, 3, &mut SplitMix64::new(2)));
    }

    #[test]
    fn forward_rejects_mismatched_params() {
        let (g, _, _) = instance(3, TargetMode::Soft);
        let bad = DiagNetParams::zeros(9, 5, 3);
        assert!(matches!(forward(&g, &bad), Err(Error::Shape { .. })));
        let bad = DiagNetParams::zeros(16, 4, 3);
        assert!(matches!(forward(&g, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_min_cases() {
        let (g, p, t) = instance(4, TargetMode::Hard);
        let tr = forward(&g, &p).unwrap();
        let proj = ProjectedTargets::new(&g, &t).unwrap();
        let mut fitted = tr.clone();
        fitted.y_hat = proj.diag.clone();
        assert_eq!(loss_min(&fitted, &g, &t).unwrap(), 0.0);

        let mut zero_t = t.clone();
        zero_t.a_diag = Matrix::zeros(9, 9);
        assert_eq!(
            loss_min(&tr, &g, &zero_t).unwrap(),
            frobenius_norm(&tr.y_hat)
        );

        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..9 {
                let target: f64 = (0..9).map(|k| g.x[(k, i)] * t.a_diag[(k, j)]).sum();
                acc += (tr.y_hat[(i, j)] - target).powi(2);
            }
        }
        assert!((loss_min(&tr, &g, &t).unwrap() - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn loss_comp_cases() {
        let (g, p, t) = instance(6, TargetMode::Soft);
        let tr = forward(&g, &p).unwrap();
        let proj = ProjectedTargets::new(&g, &t).unwrap();

        let mut fitted = tr.clone();
        fitted.y_hat = proj.diag.clone();
        assert_eq!(loss_comp(&fitted, &g, &t, 1e6).unwrap().value, 0.0);

        let mut same = t.clone();
        same.a_perp = same.a_diag.clone();
        let v = loss_comp(&tr, &g, &same, 1e6).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);

        let num = frobenius_norm(&tr.y_hat.sub(&proj.diag).unwrap());
        let den = frobenius_norm(&tr.y_hat.sub(&proj.perp).unwrap());
        assert!((loss_comp(&tr, &g, &t, 1e6).unwrap().value - num / den).abs() < 1e-12);
    }

    #[test]
    fn loss_comp_guard_returns_sentinel() {
        let (g, p, t) = instance(7, TargetMode::Soft);
        let mut tr = forward(&g, &p).unwrap();
        tr.y_hat = ProjectedTargets::new(&g, &t).unwrap().perp;
        let v = loss_comp(&tr, &g, &t, 123.0).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.value, 123.0);
        let proj = ProjectedTargets::new(&g, &t).unwrap();
        let (_, grad) = loss_and_output_grad(&tr, &proj, LossKind::Comp, 123.0).unwrap();
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn gradient_vanishes_at_zero_residual() {
        // Zero W_emb gives Ŷ = 0, which matches an all-zero diagonal target.
        let (g, mut p, mut t) = instance(8, TargetMode::Hard);
        p.w_emb = Matrix::zeros(4, 3);
        t.a_diag = Matrix::zeros(9, 9);
        let tr = forward(&g, &p).unwrap();
        assert_eq!(loss_min(&tr, &g, &t).unwrap(), 0.0);
        let grads = backward(&tr, &g, &p, &t, LossKind::Min).unwrap();
        assert!(grads.w_emb.max_abs() <= 1e-10);
        assert!(grads.w_pred.max_abs() <= 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = GradCheckDims {
            side: 3,
            features: 4,
            reduced: 3,
        };
        for kind in [LossKind::Min, LossKind::Comp] {
            for mode in [TargetMode::Hard, TargetMode::Soft] {
                let (g, p, t) = random_instance(dims, mode, &mut SplitMix64::new(11)).unwrap();
                let err = check_instance(&g, &p, &t, kind, 1e-6, false).unwrap();
                assert!(err <= 1e-4, "{kind:?}/{mode:?}: {err}");
            }
        }
    }

    #[test]
    fn output_gradient_is_linear_in_upstream() {
        let (g, p, _) = instance(12, TargetMode::Soft);
        let tr = forward(&g, &p).unwrap();
        let d_y = rand_matrix(4, 9, 1, 1.0);
        let a = backward_from_output(&tr, &g, &p, &d_y).unwrap();
        let b = backward_from_output(&tr, &g, &p, &d_y.scale(3.0)).unwrap();
        for (x, y) in a.w_emb.data().iter().zip(b.w_emb.data()) {
            assert!((3.0 * x - y).abs() <= 1e-10);
        }
        for (x, y) in a.w_pred.data().iter().zip(b.w_pred.data()) {
            assert!((3.0 * x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let (g, p, t) = instance(13, TargetMode::Hard);
        let tr = forward(&g, &p).unwrap();
        let (g2, _, _) = random_instance(
            GradCheckDims::default(),
            TargetMode::Hard,
            &mut SplitMix64::new(1),
        )
        .unwrap();
        assert!(matches!(
            backward(&tr, &g2, &p, &t, LossKind::Min),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn small_step_descends() {
        for seed in 0..20 {
            for kind in [LossKind::Min, LossKind::Comp] {
                let (g, p, t) = instance(100 + seed, TargetMode::Soft);
                let proj = ProjectedTargets::new(&g, &t).unwrap();
                let tr = forward(&g, &p).unwrap();
                let before = loss_projected(&tr, &proj, kind, 1e6).unwrap().value;
                let grads = backward(&tr, &g, &p, &t, kind).unwrap();
                let mut q = p.clone();
                q.w_emb.axpy(-1e-4, &grads.w_emb).unwrap();
                q.w_pred.axpy(-1e-4, &grads.w_pred).unwrap();
                let after = loss_projected(&forward(&g, &q).unwrap(), &proj, kind, 1e6)
                    .unwrap()
                    .value;
                assert!(after <= before, "seed {seed} {kind:?}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn fitting_separates_numerator_from_denominator() {
        let grid = PatchGrid::new(24, 3).unwrap();
        let b = BBox::new(0.0, 0.0, 24.0, 24.0, 0).unwrap();
        let t = build_hard_targets(&grid, &[b], Diagonal::Main).unwrap();
        let (g, mut p, _) = instance(21, TargetMode::Hard);
        let proj = ProjectedTargets::new(&g, &t).unwrap();
        for _ in 0..300 {
            let tr = forward(&g, &p).unwrap();
            let grads = backward(&tr, &g, &p, &t, LossKind::Min).unwrap();
            p.w_emb.axpy(-0.05, &grads.w_emb).unwrap();
            p.w_pred.axpy(-0.05, &grads.w_pred).unwrap();
        }
        let tr = forward(&g, &p).unwrap();
        let num = frobenius_norm(&tr.y_hat.sub(&proj.diag).unwrap());
        let den = frobenius_norm(&tr.y_hat.sub(&proj.perp).unwrap());
        assert!(num < den, "{num} vs {den}");
    }

    #[test]
    fn grad_check_default_passes_and_detects_corruption() {
        let report = grad_check(&GradCheckConfig::default()).unwrap();
        assert_eq!(report.combos.len(), 4);
        assert!(report.pass, "{report:?}");
        let bad = grad_check(&GradCheckConfig {
            corrupt: true,
            trials: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn zero_weights_zero_targets_are_consistent() {
        let (g, mut p, mut t) = instance(30, TargetMode::Hard);
        p.w_emb = Matrix::zeros(4, 3);
        p.w_pred = Matrix::zeros(9, 9);
        t.a_diag = Matrix::zeros(9, 9);
        let err = check_instance(&g, &p, &t, LossKind::Min, 1e-6, false).unwrap();
        assert!(err <= 1e-4);
    }
}
