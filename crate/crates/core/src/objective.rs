//! Tracking loss (focal + GIoU + L1), attribute loss, total objective and
//! the AdamW optimizer with its step schedule.

use std::collections::HashMap;

use crate::autograd::sigmoid;
use crate::backbone::{argmax_first, HEAD_CHANNELS};
use crate::bbox::{giou_loss, l1_loss, BoundingBox};
use crate::config::{LossWeights, OptimConfig};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Matrix;

const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

/// Per-component values of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub nce: f64,
    pub attr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("cls", self.cls),
            ("iou", self.iou),
            ("l1", self.l1),
            ("nce", self.nce),
            ("attr", self.attr),
            ("total", self.total),
        ]
    }
}

/// Combines loss parts into the weighted total; fails on a non-finite part
/// and names it.
pub fn total_loss(cls: f64, iou: f64, l1: f64, nce: f64, attr: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("cls", cls), ("iou", iou), ("l1", l1), ("nce", nce), ("attr", attr)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.to_string() });
        }
    }
    let total = cls + w.lambda_iou * iou + w.lambda_l1 * l1 + w.alpha * nce + w.beta * attr;
    Ok(LossBreakdown { cls, iou, l1, nce, attr, total })
}

/// Gaussian target on the `side × side` grid: exactly 1 at the cell holding
/// the box centre, `σ` a quarter of the box's mean side in cells.
pub fn gaussian_target(gt: &BoundingBox, side: usize) -> Matrix {
    let s = side as f64;
    let cc = ((gt.cx * s).floor() as usize).min(side - 1);
    let cr = ((gt.cy * s).floor() as usize).min(side - 1);
    let sigma = (0.25 * 0.5 * (gt.w + gt.h) * s).max(0.25);
    Matrix::from_fn(side, side, |r, c| {
        let d2 = (r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

fn log_sigmoid(z: f64) -> f64 {
    -(if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() })
}

/// Centre-net focal loss on score logits against `target`, normalized by the
/// number of peak cells. Returns the loss and its gradient per logit.
pub fn focal_loss(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let a = FOCAL_ALPHA;
    let npos = target.iter().filter(|&&y| y == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &y)) in logits.iter().zip(target).enumerate() {
        let p = sigmoid(z);
        let (lp, lq) = (log_sigmoid(z), log_sigmoid(-z));
        if y == 1.0 {
            let q = (1.0 - p).powi(a);
            loss -= q * lp;
            grad[i] = q * (a as f64 * p * lp - (1.0 - p));
        } else {
            let w = (1.0 - y).powi(FOCAL_BETA);
            let pa = p.powi(a);
            loss -= w * pa * lq;
            grad[i] = w * pa * (p - a as f64 * (1.0 - p) * lq);
        }
    }
    (loss / npos, grad.into_iter().map(|g| g / npos).collect())
}

/// Tracking-loss values and gradients with respect to the `(S², 5)` head
/// logits.
#[derive(Clone, Debug)]
pub struct TrackingTerms {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub d_cls: Matrix,
    pub d_iou: Matrix,
    pub d_l1: Matrix,
}

/// Focal loss on the score map; GIoU and L1 on the box decoded at the score
/// argmax.
pub fn tracking_loss(logits: &Matrix, gt: &BoundingBox, side: usize) -> Result<TrackingTerms> {
    if gt.w <= 0.0 || gt.h <= 0.0 {
        return Err(Error::Data(format!("degenerate ground-truth box {gt:?}")));
    }
    let n = side * side;
    if logits.shape() != (n, HEAD_CHANNELS) {
        return Err(Error::Shape(format!("head logits must be ({n}, {HEAD_CHANNELS}), got {:?}", logits.shape())));
    }
    let score: Vec<f64> = (0..n).map(|i| logits.get(i, 0)).collect();
    let target = gaussian_target(gt, side);
    let (cls, g_score) = focal_loss(&score, target.data());
    let mut d_cls = Matrix::zeros(n, HEAD_CHANNELS);
    for (i, g) in g_score.into_iter().enumerate() {
        d_cls.set(i, 0, g);
    }

    let k = argmax_first(&score);
    let (r, c) = (k / side, k % side);
    let s = side as f64;
    let sg: Vec<f64> = (1..HEAD_CHANNELS).map(|ch| sigmoid(logits.get(k, ch))).collect();
    let pred = [(c as f64 + sg[0]) / s, (r as f64 + sg[1]) / s, sg[2], sg[3]];
    // d pred / d logit for channels 1..5
    let dp = [sg[0] * (1.0 - sg[0]) / s, sg[1] * (1.0 - sg[1]) / s, sg[2] * (1.0 - sg[2]), sg[3] * (1.0 - sg[3])];
    let g = gt.as_array();
    let (iou, gi) = giou_loss(pred, g);
    let (l1, gl) = l1_loss(pred, g);
    let mut d_iou = Matrix::zeros(n, HEAD_CHANNELS);
    let mut d_l1 = Matrix::zeros(n, HEAD_CHANNELS);
    for j in 0..4 {
        d_iou.set(k, j + 1, gi[j] * dp[j]);
        d_l1.set(k, j + 1, gl[j] * dp[j]);
    }
    Ok(TrackingTerms { cls, iou, l1, d_cls, d_iou, d_l1 })
}

/// `Σ_l Σ_t |w[l][t] − g[t]|` and its (sub)gradient with respect to each score.
pub fn attribute_loss(scores: &[Vec<f64>], g: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for w in scores {
        if w.len() != g.len() {
            return Err(Error::Shape(format!("{} attribute scores for a {}-bit label", w.len(), g.len())));
        }
        let mut gr = Vec::with_capacity(w.len());
        for (a, b) in w.iter().zip(g) {
            loss += (a - b).abs();
            gr.push(if a > b { 1.0 } else if a < b { -1.0 } else { 0.0 });
        }
        grads.push(gr);
    }
    Ok((loss, grads))
}

/// Learning rate for 1-based `epoch` of `epochs`: the base rate, dropped
/// by 10× once `epoch` exceeds `round(decay_epoch_frac · epochs)`.
pub fn lr_at_epoch(cfg: &OptimConfig, epoch: usize, epochs: usize) -> f64 {
    let boundary = (cfg.decay_epoch_frac * epochs as f64).round() as usize;
    if epoch > boundary {
        cfg.lr * 0.1
    } else {
        cfg.lr
    }
}

/// AdamW with decoupled weight decay over a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    params: Vec<ParamId>,
    m: HashMap<ParamId, Matrix>,
    v: HashMap<ParamId, Matrix>,
    t: u64,
}

/// Optimizer over every weight whose group passes `trainable`.
pub fn make_optimizer(store: &ParamStore, trainable: &dyn Fn(&str) -> bool, cfg: &OptimConfig) -> Result<AdamW> {
    let params: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight && trainable(p.group()))
        .map(|(id, _)| id)
        .collect();
    if params.is_empty() {
        return Err(Error::Config("no trainable parameters".into()));
    }
    let zeros = |id: &ParamId| Matrix::zeros(store.value(*id).rows(), store.value(*id).cols());
    let m = params.iter().map(|id| (*id, zeros(id))).collect();
    let v = params.iter().map(|id| (*id, zeros(id))).collect();
    Ok(AdamW { cfg: cfg.clone(), params, m, v, t: 0 })
}

impl AdamW {
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Number of scalar values under optimization.
    pub fn num_values(&self, store: &ParamStore) -> usize {
        self.params.iter().map(|id| store.value(*id).len()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// entry still decay and follow their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Matrix>, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in &self.params {
            let m = self.m.get_mut(id).expect("moment");
            let v = self.v.get_mut(id).expect("moment");
            let g = grads.get(id);
            let p = store.value_mut(*id);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let x = &mut p.data_mut()[k];
                *x -= lr * wd * *x;
                *x -= lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            }
        }
    }
}
