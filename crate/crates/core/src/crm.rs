//! Contrastive relation modeling: modality fusion, template-to-search
//! cosine similarities, box-based positive/negative partition, InfoNCE.

use crate::autograd::Var;
use crate::backbone::{Pass, SegmentLayout};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Matrix;

pub const NORM_EPS: f64 = 1e-8;

/// Fused template `(N_z, D)` and search `(N_x, D)` tokens.
#[derive(Clone, Copy, Debug)]
pub struct FusedTokens {
    pub z: Var,
    pub x: Var,
}

/// Search-token indices split by whether the patch centre lies in the box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPartition {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// Registers the `2D → D` fusion projection, initialized to averaging.
pub fn register_crm(store: &mut ParamStore, dim: usize) {
    let w = Matrix::from_fn(2 * dim, dim, |r, c| if r % dim == c { 0.5 } else { 0.0 });
    store.insert("crm.fuse.w", ParamKind::Weight, w);
    store.insert("crm.fuse.b", ParamKind::Weight, Matrix::zeros(1, dim));
}

/// Projects `[rgb ‖ event]` per token for both regions.
pub fn crm_fuse(pass: &mut Pass, layout: &SegmentLayout, tokens: Var) -> FusedTokens {
    let mut fuse = |a: std::ops::Range<usize>, b: std::ops::Range<usize>| {
        let ra = pass.g.slice_rows(tokens, a.start, a.len());
        let rb = pass.g.slice_rows(tokens, b.start, b.len());
        let cat = pass.g.concat_cols(&[ra, rb]);
        pass.linear(cat, "crm.fuse")
    };
    let z = fuse(layout.rgb_template(), layout.event_template());
    let x = fuse(layout.rgb_search(), layout.event_search());
    FusedTokens { z, x }
}

/// `s_i = cos(mean(z), x_i) / tau` as an `(N_x, 1)` column.
pub fn crm_similarity(pass: &mut Pass, f: FusedTokens, tau: f64) -> Var {
    let zbar = pass.g.mean_rows(f.z);
    let zn = pass.g.row_normalize(zbar, NORM_EPS);
    let xn = pass.g.row_normalize(f.x, NORM_EPS);
    let s = pass.g.matmul_nt(xn, zn);
    pass.g.scale(s, 1.0 / tau)
}

/// Value-level similarity for a template set `z` and search set `x`.
pub fn similarity_values(z: &Matrix, x: &Matrix, tau: f64) -> Vec<f64> {
    let zbar = z.col_sums().scale(1.0 / z.rows() as f64);
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_EPS);
    let zn = norm(zbar.row(0));
    (0..x.rows())
        .map(|i| {
            let xi = x.row(i);
            let dot: f64 = xi.iter().zip(zbar.row(0)).map(|(a, b)| a * b).sum();
            dot / (zn * norm(xi)) / tau
        })
        .collect()
}

/// Token `r·S + c` is positive iff its patch centre `((c+½)/S, (r+½)/S)`
/// lies inside `gt` (edges inclusive).
pub fn partition_pairs(gt: &BoundingBox, side: usize) -> Result<PairPartition> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Data(format!("degenerate ground-truth box {gt:?}")));
    }
    let s = side as f64;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..side * side {
        let (r, c) = (i / side, i % side);
        if gt.contains((c as f64 + 0.5) / s, (r as f64 + 0.5) / s) {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    assert_eq!(pos.len() + neg.len(), side * side);
    Ok(PairPartition { pos, neg })
}

fn log_sum_exp(s: &[f64], idx: &[usize]) -> f64 {
    let m = idx.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    m + idx.iter().map(|&i| (s[i] - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `−log(Σ_pos e^s / Σ_all e^s)` and its gradient with respect to `s`.
///
/// Computed as `softplus(LSE(neg) − LSE(pos))`, which is non-negative by
/// construction and exactly zero without negatives.
pub fn info_nce(s: &[f64], p: &PairPartition) -> Result<(f64, Vec<f64>)> {
    if p.pos.is_empty() {
        return Err(Error::Data("InfoNCE needs at least one positive token".into()));
    }
    let mut grad = vec![0.0; s.len()];
    if p.neg.is_empty() {
        return Ok((0.0, grad));
    }
    let lp = log_sum_exp(s, &p.pos);
    let ln = log_sum_exp(s, &p.neg);
    let d = ln - lp;
    let loss = softplus(d);
    let sig = crate::autograd::sigmoid(d);
    for &i in &p.pos {
        grad[i] = -sig * (s[i] - lp).exp();
    }
    for &i in &p.neg {
        grad[i] = sig * (s[i] - ln).exp();
    }
    Ok((loss, grad))
}

/// InfoNCE as a graph node on an `(N_x, 1)` similarity column.
pub fn info_nce_node(pass: &mut Pass, s: Var, p: &PairPartition) -> Result<Var> {
    let sv = pass.g.value(s).data().to_vec();
    let (loss, grad) = info_nce(&sv, p)?;
    let n = grad.len();
    Ok(pass.g.scalar_fn(loss, vec![(s, Matrix::from_vec(n, 1, grad))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Binder;

    #[test]
    fn similarity_closed_forms() {
        let z = Matrix::from_vec(2, 2, vec![1.0, 0.0, 3.0, 0.0]);
        let x = Matrix::from_vec(3, 2, vec![2.0, 0.0, -5.0, 0.0, 0.0, 4.0]);
        let s = similarity_values(&z, &x, 0.07);
        assert!((s[0] - 1.0 / 0.07).abs() < 1e-12);
        assert!((s[1] + 1.0 / 0.07).abs() < 1e-12);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn partition_examples() {
        let all = partition_pairs(&BoundingBox { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 }, 8).unwrap();
        assert_eq!(all.pos.len(), 64);
        let one = partition_pairs(&BoundingBox { cx: 3.5 / 8.0, cy: 2.5 / 8.0, w: 1.0 / 8.0, h: 1.0 / 8.0 }, 8).unwrap();
        assert_eq!(one.pos, vec![2 * 8 + 3]);
        let block = partition_pairs(&BoundingBox { cx: 0.5, cy: 0.5, w: 0.25, h: 0.25 }, 8).unwrap();
        assert_eq!(block.pos, vec![27, 28, 35, 36]);
        assert!(partition_pairs(&BoundingBox { cx: 0.5, cy: 0.5, w: 0.0, h: 0.2 }, 8).is_err());
    }

    #[test]
    fn info_nce_closed_forms() {
        let p = PairPartition { pos: vec![0, 1], neg: vec![2, 3] };
        let (l, _) = info_nce(&[0.3; 4], &p).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let all = PairPartition { pos: vec![0, 1], neg: vec![] };
        assert_eq!(info_nce(&[1.0, -2.0], &all).unwrap().0, 0.0);
        let one = PairPartition { pos: vec![0], neg: vec![1] };
        let (l, _) = info_nce(&[10.0, -10.0], &one).unwrap();
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-20);
        assert!(info_nce(&[1.0], &PairPartition { pos: vec![], neg: vec![0] }).is_err());
    }

    #[test]
    fn fusion_at_init_averages_identical_modalities() {
        let mut s = ParamStore::new();
        register_crm(&mut s, 3);
        let layout = SegmentLayout { n_z: 1, n_x: 2 };
        let seg_z = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let seg_x = Matrix::from_vec(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let t = Matrix::concat_rows(&[&seg_z, &seg_x, &seg_z, &seg_x]);
        let f = |_: &str| true;
        let mut pass = Pass::new(Binder::new(&s, f, false), true);
        let tv = pass.g.constant(t);
        let fused = crm_fuse(&mut pass, &layout, tv);
        assert_eq!(pass.g.value(fused.z), &seg_z);
        assert_eq!(pass.g.value(fused.x), &seg_x);
    }
}
