//! Training and correction objectives: soft-IoU, bootstrapped cross-entropy,
//! their weighted combination, the two-ended cycle loss, and the Sobel
//! smoothness penalty.
//!
//! Each objective exists in two forms: a graph builder (`*_g`) used wherever
//! gradients are needed, and a plain evaluation wrapper over it.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::Mask;

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Cross-entropy weight in the combined loss.
    pub gamma: f64,
    /// Fraction of highest-loss pixels kept by the bootstrapped CE.
    pub bootstrap_frac: f64,
    /// Smoothness weight used by gradient correction.
    pub lambda: f64,
    /// Numeric floor for logs and denominators.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            bootstrap_frac: 0.4,
            lambda: 0.75,
            eps: 1e-7,
        }
    }
}

fn to_dyn(a: &Array2<f64>) -> ArrayD<f64> {
    a.clone().into_dyn()
}

fn check_shapes(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// Soft-IoU loss: `1 - (sum(min(p,g)) + eps) / (sum(max(p,g)) + eps)`.
///
/// The shared eps keeps the ratio continuous and makes two empty masks score
/// a loss of exactly zero (absent object correctly predicted absent).
pub fn iou_loss_g(g: &mut Graph, pred: Var, gt: &Array2<f64>, eps: f64) -> Var {
    let gt_c = g.constant(to_dyn(gt));
    let mn = g.min(pred, gt_c);
    let mx = g.max(pred, gt_c);
    let num0 = g.sum(mn);
    let num = g.add_scalar(num0, eps);
    let den0 = g.sum(mx);
    let den = g.add_scalar(den0, eps);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Bootstrapped cross-entropy: mean negative log-likelihood over the
/// `ceil(frac * |pixels|)` pixels with the largest loss. The selection is
/// treated as constant under differentiation.
pub fn ce_loss_bootstrapped_g(
    g: &mut Graph,
    pred: Var,
    gt: &Array2<f64>,
    frac: f64,
    eps: f64,
) -> Result<Var> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bootstrap fraction {frac} outside (0,1]"
        )));
    }
    let clamped = g.clamp(pred, eps, 1.0 - eps);
    let gt_c = g.constant(to_dyn(gt));
    let one_minus_gt = g.constant(to_dyn(&gt.mapv(|v| 1.0 - v)));
    let ln_p = g.ln(clamped);
    let neg = g.scale(clamped, -1.0);
    let one_minus_p = g.add_scalar(neg, 1.0);
    let ln_q = g.ln(one_minus_p);
    let t1 = g.mul(gt_c, ln_p);
    let t2 = g.mul(one_minus_gt, ln_q);
    let ll = g.add(t1, t2);
    let nll = g.scale(ll, -1.0);

    // top-k selection on the current values
    let values = g.value(nll).clone();
    let n = values.len();
    let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let flat = values.as_slice().expect("contiguous nll");
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b)));
    let mut sel = vec![0.0; n];
    for &i in order.iter().take(k) {
        sel[i] = 1.0;
    }
    let sel = g.constant(ArrayD::from_shape_vec(IxDyn(values.shape()), sel).unwrap());
    let picked = g.mul(nll, sel);
    let total = g.sum(picked);
    Ok(g.scale(total, 1.0 / k as f64))
}

/// Combined loss: `iou + gamma * bootstrapped_ce`.
pub fn combined_loss_g(g: &mut Graph, pred: Var, gt: &Array2<f64>, cfg: &LossConfig) -> Result<Var> {
    let iou = iou_loss_g(g, pred, gt, cfg.eps);
    if cfg.gamma == 0.0 {
        return Ok(iou);
    }
    let ce = ce_loss_bootstrapped_g(g, pred, gt, cfg.bootstrap_frac, cfg.eps)?;
    let ce_w = g.scale(ce, cfg.gamma);
    Ok(g.add(iou, ce_w))
}

/// Cycle loss: combined loss applied at both ends of the loop.
pub fn cycle_loss_g(
    g: &mut Graph,
    pred_t: Var,
    gt_t: &Array2<f64>,
    pred_first: Var,
    gt_first: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<Var> {
    let a = combined_loss_g(g, pred_t, gt_t, cfg)?;
    let b = combined_loss_g(g, pred_first, gt_first, cfg)?;
    Ok(g.add(a, b))
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Mean squared Sobel gradient magnitude with replicate border padding.
/// `pred` must be at least 3x3.
pub fn smooth_loss_g(g: &mut Graph, pred: Var) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!(
            "smooth_loss requires at least 3x3, got {h}x{w}"
        )));
    }
    let as3d = g.reshape(pred, &[1, h, w]);
    let padded = g.replicate_pad(as3d, 1);
    let mut wdata = Vec::with_capacity(18);
    wdata.extend_from_slice(&SOBEL_X);
    wdata.extend_from_slice(&SOBEL_Y);
    let sobel = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 1, 3, 3]), wdata).unwrap());
    let grads = g.conv2d(padded, sobel, None, 1, 0);
    let sq = g.square(grads);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / (h * w) as f64))
}

// ---------------------------------------------------------------------------
// value / gradient wrappers over `Mask`
// ---------------------------------------------------------------------------

fn eval_with_grad<F>(pred: &Array2<f64>, build: F) -> Result<(f64, Array2<f64>)>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.leaf(to_dyn(pred));
    let loss = build(&mut g, p)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss);
    let grad = grads
        .take(p)
        .expect("pred is a grad leaf")
        .into_dimensionality::<ndarray::Ix2>()
        .expect("pred gradient is 2-d");
    Ok((value, grad))
}

pub fn iou_loss(pred: &Mask, gt: &Mask) -> Result<f64> {
    iou_loss_with_grad(pred, gt).map(|(v, _)| v)
}

pub fn iou_loss_with_grad(pred: &Mask, gt: &Mask) -> Result<(f64, Array2<f64>)> {
    check_shapes(&pred.values, &gt.values)?;
    let eps = LossConfig::default().eps;
    eval_with_grad(&pred.values, |g, p| Ok(iou_loss_g(g, p, &gt.values, eps)))
}

pub fn ce_loss_bootstrapped(pred: &Mask, gt: &Mask, frac: f64) -> Result<f64> {
    ce_loss_bootstrapped_with_grad(pred, gt, frac).map(|(v, _)| v)
}

pub fn ce_loss_bootstrapped_with_grad(
    pred: &Mask,
    gt: &Mask,
    frac: f64,
) -> Result<(f64, Array2<f64>)> {
    check_shapes(&pred.values, &gt.values)?;
    let eps = LossConfig::default().eps;
    eval_with_grad(&pred.values, |g, p| {
        ce_loss_bootstrapped_g(g, p, &gt.values, frac, eps)
    })
}

pub fn combined_loss(pred: &Mask, gt: &Mask, cfg: &LossConfig) -> Result<f64> {
    combined_loss_with_grad(pred, gt, cfg).map(|(v, _)| v)
}

pub fn combined_loss_with_grad(
    pred: &Mask,
    gt: &Mask,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    check_shapes(&pred.values, &gt.values)?;
    eval_with_grad(&pred.values, |g, p| combined_loss_g(g, p, &gt.values, cfg))
}

pub fn cycle_loss(
    pred_t: &Mask,
    gt_t: &Mask,
    pred_first: &Mask,
    gt_first: &Mask,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(combined_loss(pred_t, gt_t, cfg)? + combined_loss(pred_first, gt_first, cfg)?)
}

pub fn smooth_loss(pred: &Mask) -> Result<f64> {
    smooth_loss_with_grad(pred).map(|(v, _)| v)
}

pub fn smooth_loss_with_grad(pred: &Mask) -> Result<(f64, Array2<f64>)> {
    eval_with_grad(&pred.values, |g, p| smooth_loss_g(g, p))
}
