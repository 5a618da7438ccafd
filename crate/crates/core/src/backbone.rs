//! Patch embedding, the frozen pre-norm transformer encoder over the
//! four-segment token sequence, and the convolutional prediction head.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_normal, Binder, ParamKind, ParamStore};
use crate::tensor::Matrix;

/// Channels of the head output: score logit, two offsets, two sizes.
pub const HEAD_CHANNELS: usize = 5;
/// Initial score bias, a prior of about 0.1 on every cell.
const SCORE_PRIOR_BIAS: f64 = -2.19;

/// Row ranges of the four token segments, in order
/// `[rgb_template, rgb_search, event_template, event_search]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub n_z: usize,
    pub n_x: usize,
}

impl SegmentLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { n_z: cfg.n_z(), n_x: cfg.n_x() }
    }

    pub fn len(&self) -> usize {
        2 * (self.n_z + self.n_x)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rgb_template(&self) -> Range<usize> {
        0..self.n_z
    }

    pub fn rgb_search(&self) -> Range<usize> {
        self.n_z..self.n_z + self.n_x
    }

    pub fn event_template(&self) -> Range<usize> {
        self.n_z + self.n_x..2 * self.n_z + self.n_x
    }

    pub fn event_search(&self) -> Range<usize> {
        2 * self.n_z + self.n_x..self.len()
    }
}

/// Patch-flattened crops for one template/search pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInputs {
    pub rgb_template: Matrix,
    pub event_template: Matrix,
    pub rgb_search: Matrix,
    pub event_search: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Template,
    Search,
}

/// One forward pass: the tape, the parameter bindings, and what the pass
/// records for later inspection.
pub struct Pass<'a> {
    pub g: Graph,
    pub params: Binder<'a>,
    /// Batch normalization uses the pass's own token statistics when set,
    /// running statistics otherwise.
    pub batch_stats: bool,
    pub record_attention: bool,
    /// Softmax attention matrices per layer, one per head.
    pub attention: Vec<(usize, Vec<Var>)>,
    /// Batch-norm nodes keyed by their parameter prefix.
    pub bn_nodes: Vec<(String, Var)>,
}

impl<'a> Pass<'a> {
    pub fn new(params: Binder<'a>, batch_stats: bool) -> Self {
        Self { g: Graph::new(), params, batch_stats, record_attention: false, attention: Vec::new(), bn_nodes: Vec::new() }
    }

    pub fn param(&mut self, name: &str) -> Var {
        self.params.bind(&mut self.g, name)
    }

    /// `x · W + b` with parameters `<prefix>.w` and `<prefix>.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.g"));
        let beta = self.param(&format!("{prefix}.b"));
        self.g.layer_norm(x, gamma, beta)
    }

    /// Batch normalization over token rows with running-statistics buffers
    /// `<prefix>.running_mean` / `<prefix>.running_var`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.g"));
        let beta = self.param(&format!("{prefix}.b"));
        if self.batch_stats {
            let y = self.g.batch_norm(x, gamma, beta, BN_EPS);
            self.bn_nodes.push((prefix.to_string(), y));
            return y;
        }
        let store = self.params.store();
        let rm = store.by_name(&format!("{prefix}.running_mean")).expect("running mean registered");
        let rv = store.by_name(&format!("{prefix}.running_var")).expect("running var registered");
        let neg_mean = self.g.constant(rm.scale(-1.0));
        let inv_std = self.g.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
        let y = self.g.add_row(x, neg_mean);
        let y = self.g.mul_row(y, inv_std);
        let y = self.g.mul_row(y, gamma);
        self.g.add_row(y, beta)
    }
}

pub const BN_EPS: f64 = 1e-5;

pub(crate) fn add_linear(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize, std: f64) {
    store.insert(format!("{name}.w"), ParamKind::Weight, init_normal(seed, &format!("{name}.w"), fan_in, fan_out, std));
    store.insert(format!("{name}.b"), ParamKind::Weight, Matrix::zeros(1, fan_out));
}

pub(crate) fn add_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), ParamKind::Weight, Matrix::filled(1, dim, 1.0));
    store.insert(format!("{name}.b"), ParamKind::Weight, Matrix::zeros(1, dim));
}

/// Registers patch embeddings, encoder layers, the final norm and the head.
pub fn register_backbone(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let (d, p, std) = (cfg.dim, cfg.patch, cfg.init_std);
    add_linear(store, seed, "patch_embed.rgb", 3 * p * p, d, std);
    add_linear(store, seed, "patch_embed.event", 2 * p * p, d, std);
    for (name, n) in [("patch_embed.pos_template", cfg.n_z()), ("patch_embed.pos_search", cfg.n_x())] {
        store.insert(name, ParamKind::Weight, init_normal(seed, name, n, d, std));
    }
    for l in 1..=cfg.depth {
        let pre = format!("encoder.l{l}");
        add_norm(store, &format!("{pre}.ln1"), d);
        add_linear(store, seed, &format!("{pre}.attn.qkv"), d, 3 * d, std);
        add_linear(store, seed, &format!("{pre}.attn.proj"), d, d, std);
        add_norm(store, &format!("{pre}.ln2"), d);
        add_linear(store, seed, &format!("{pre}.mlp.fc1"), d, cfg.mlp_ratio * d, std);
        add_linear(store, seed, &format!("{pre}.mlp.fc2"), cfg.mlp_ratio * d, d, std);
    }
    add_norm(store, "encoder.norm", d);
    let c = cfg.head_hidden;
    add_linear(store, seed, "head.conv", 9 * d, c, (2.0 / (9 * d) as f64).sqrt());
    add_linear(store, seed, "head.out", c, HEAD_CHANNELS, (1.0 / c as f64).sqrt());
    let id = store.id("head.out.b").expect("just inserted");
    store.value_mut(id).set(0, 0, SCORE_PRIOR_BIAS);
}

/// Projects one region's RGB and event patches to tokens and adds the
/// region's positional embedding. Returns `(rgb_tokens, event_tokens)`.
pub fn patch_embed(pass: &mut Pass, cfg: &ModelConfig, rgb: &Matrix, ev: &Matrix, region: Region) -> Result<(Var, Var)> {
    let (n, pos) = match region {
        Region::Template => (cfg.n_z(), "patch_embed.pos_template"),
        Region::Search => (cfg.n_x(), "patch_embed.pos_search"),
    };
    let p2 = cfg.patch * cfg.patch;
    if rgb.shape() != (n, 3 * p2) || ev.shape() != (n, 2 * p2) {
        return Err(Error::Shape(format!(
            "{region:?} patches must be ({n}, {}) and ({n}, {}), got {:?} and {:?}",
            3 * p2,
            2 * p2,
            rgb.shape(),
            ev.shape()
        )));
    }
    let pos = pass.param(pos);
    let r = pass.g.constant(rgb.clone());
    let r = pass.linear(r, "patch_embed.rgb");
    let r = pass.g.add(r, pos);
    let e = pass.g.constant(ev.clone());
    let e = pass.linear(e, "patch_embed.event");
    let e = pass.g.add(e, pos);
    Ok((r, e))
}

/// Initial token sequence `[rgb_z, rgb_x, ev_z, ev_x]`.
pub fn embed_pair(pass: &mut Pass, cfg: &ModelConfig, x: &PairInputs) -> Result<Var> {
    let (rz, ez) = patch_embed(pass, cfg, &x.rgb_template, &x.event_template, Region::Template)?;
    let (rx, ex) = patch_embed(pass, cfg, &x.rgb_search, &x.event_search, Region::Search)?;
    Ok(pass.g.concat_rows(&[rz, rx, ez, ex]))
}

/// Pre-norm transformer block `l` (1-based): `x + MSA(LN(x))`, then
/// `+ FFN(LN(·))`.
pub fn encoder_layer(pass: &mut Pass, cfg: &ModelConfig, x: Var, l: usize) -> Var {
    let pre = format!("encoder.l{l}");
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let h = pass.layer_norm(x, &format!("{pre}.ln1"));
    let qkv = pass.linear(h, &format!("{pre}.attn.qkv"));
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::new();
    for i in 0..cfg.heads {
        let q = pass.g.slice_cols(qkv, i * dh, dh);
        let k = pass.g.slice_cols(qkv, d + i * dh, dh);
        let v = pass.g.slice_cols(qkv, 2 * d + i * dh, dh);
        let logits = pass.g.matmul_nt(q, k);
        let logits = pass.g.scale(logits, 1.0 / (dh as f64).sqrt());
        let a = pass.g.softmax_rows(logits);
        if pass.record_attention {
            maps.push(a);
        }
        heads.push(pass.g.matmul(a, v));
    }
    if pass.record_attention {
        pass.attention.push((l, maps));
    }
    let o = if heads.len() == 1 { heads[0] } else { pass.g.concat_cols(&heads) };
    let o = pass.linear(o, &format!("{pre}.attn.proj"));
    let x = pass.g.add(x, o);
    let h = pass.layer_norm(x, &format!("{pre}.ln2"));
    let h = pass.linear(h, &format!("{pre}.mlp.fc1"));
    let h = pass.g.gelu(h);
    let h = pass.linear(h, &format!("{pre}.mlp.fc2"));
    pass.g.add(x, h)
}

/// Runs all `cfg.depth` layers. Before layer `l`, `inject(pass, l, T^{l-1})`
/// may return a token delta that is added to that layer's output; only
/// layers listed in `injected` may do so.
pub fn forward_encoder(
    pass: &mut Pass,
    cfg: &ModelConfig,
    x0: Var,
    injected: &[usize],
    mut inject: impl FnMut(&mut Pass, usize, Var) -> Result<Option<Var>>,
) -> Result<Var> {
    let mut x = x0;
    for l in 1..=cfg.depth {
        let delta = inject(pass, l, x)?;
        let y = encoder_layer(pass, cfg, x, l);
        x = match delta {
            Some(p) if injected.contains(&l) => pass.g.add(y, p),
            Some(_) => return Err(Error::State(format!("injection at non-configured layer {l}"))),
            None => y,
        };
    }
    Ok(x)
}

/// Element-wise mean of the RGB-search and event-search segments.
pub fn fused_search(pass: &mut Pass, layout: &SegmentLayout, tokens: Var) -> Var {
    let rs = layout.rgb_search();
    let es = layout.event_search();
    let r = pass.g.slice_rows(tokens, rs.start, rs.len());
    let e = pass.g.slice_rows(tokens, es.start, es.len());
    pass.g.lincomb(&[(r, 0.5), (e, 0.5)])
}

/// Head logits `(S², 5)` from grid-ordered search tokens `(S², D)`.
pub fn head_logits(pass: &mut Pass, search_tokens: Var, side: usize) -> Var {
    let cols = pass.g.im2col3x3(search_tokens, side);
    let h = pass.linear(cols, "head.conv");
    let h = pass.g.relu(h);
    pass.linear(h, "head.out")
}

/// Score, offset and size maps with the box decoded at the score argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `(S, S)` in `[0, 1]`.
    pub score_map: Matrix,
    /// x and y offsets in cells, each `(S, S)` in `(-0.5, 0.5)`.
    pub offset_map: [Matrix; 2],
    /// Width and height as fractions of the search crop, each `(S, S)`.
    pub size_map: [Matrix; 2],
    /// Argmax cell `(row, col)`.
    pub peak: (usize, usize),
    pub peak_score: f64,
    /// In normalized search-crop coordinates.
    pub bbox: crate::bbox::BoundingBox,
}

/// Decodes raw head logits `(S², 5)` into maps and a box.
pub fn decode_head(logits: &Matrix, side: usize) -> HeadOutput {
    use crate::autograd::sigmoid;
    assert_eq!(logits.shape(), (side * side, HEAD_CHANNELS), "head logits shape");
    let map = |c: usize, f: &dyn Fn(f64) -> f64| Matrix::from_fn(side, side, |r, k| f(logits.get(r * side + k, c)));
    let score_map = map(0, &sigmoid);
    let offset_map = [map(1, &|v| sigmoid(v) - 0.5), map(2, &|v| sigmoid(v) - 0.5)];
    let size_map = [map(3, &sigmoid), map(4, &sigmoid)];
    decode_maps(score_map, offset_map, size_map)
}

/// Decodes hand-built maps. Ties at the maximum go to the smallest
/// row-major index.
pub fn decode_maps(score_map: Matrix, offset_map: [Matrix; 2], size_map: [Matrix; 2]) -> HeadOutput {
    let side = score_map.rows();
    let idx = argmax_first(score_map.data());
    let (r, c) = (idx / side, idx % side);
    let s = side as f64;
    let bbox = crate::bbox::BoundingBox {
        cx: (c as f64 + 0.5 + offset_map[0].get(r, c)) / s,
        cy: (r as f64 + 0.5 + offset_map[1].get(r, c)) / s,
        w: size_map[0].get(r, c),
        h: size_map[1].get(r, c),
    };
    HeadOutput { peak_score: score_map.get(r, c), score_map, offset_map, size_map, peak: (r, c), bbox }
}

/// Index of the first maximum.
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn small_cfg() -> ModelConfig {
        ModelConfig { dim: 8, depth: 2, heads: 2, patch: 4, template_size: 8, search_size: 12, head_hidden: 6, ..Default::default() }
    }

    fn store(cfg: &ModelConfig) -> ParamStore {
        let mut s = ParamStore::new();
        register_backbone(&mut s, cfg, 5);
        s
    }

    fn frozen(_: &str) -> bool {
        false
    }

    #[test]
    fn zero_patches_give_bias_plus_position() {
        let cfg = small_cfg();
        let s = store(&cfg);
        let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
        let (r, e) = patch_embed(&mut pass, &cfg, &Matrix::zeros(4, 48), &Matrix::zeros(4, 32), Region::Template).unwrap();
        let pos = s.by_name("patch_embed.pos_template").unwrap();
        assert_eq!(pass.g.value(r), pos);
        assert_eq!(pass.g.value(e), pos);
    }

    #[test]
    fn patch_embedding_is_linear_in_the_input() {
        let cfg = small_cfg();
        let s = store(&cfg);
        let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
        let x = Matrix::from_fn(4, 48, |r, c| ((r * 7 + c) % 11) as f64 / 11.0);
        let ev = Matrix::zeros(4, 32);
        let (a, _) = patch_embed(&mut pass, &cfg, &x, &ev, Region::Template).unwrap();
        let (b, _) = patch_embed(&mut pass, &cfg, &x.scale(2.0), &ev, Region::Template).unwrap();
        let (z, _) = patch_embed(&mut pass, &cfg, &Matrix::zeros(4, 48), &ev, Region::Template).unwrap();
        let da = pass.g.value(a).zip_map(pass.g.value(z), |p, q| p - q);
        let db = pass.g.value(b).zip_map(pass.g.value(z), |p, q| p - q);
        assert!(db.zip_map(&da, |p, q| p - 2.0 * q).max_abs() < 1e-12);
        assert!(patch_embed(&mut pass, &cfg, &Matrix::zeros(3, 48), &ev, Region::Template).is_err());
    }

    #[test]
    fn zeroed_blocks_are_the_identity_and_attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let mut s = store(&cfg);
        let names: Vec<String> = s
            .iter()
            .filter(|(_, p)| p.name.contains(".attn.proj.") || p.name.contains(".mlp.fc2."))
            .map(|(_, p)| p.name.clone())
            .collect();
        let x = Matrix::from_fn(10, 8, |r, c| (r as f64 - c as f64 * 0.3).sin());
        {
            let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
            pass.record_attention = true;
            let xv = pass.g.constant(x.clone());
            let y = encoder_layer(&mut pass, &cfg, xv, 1);
            assert_eq!(pass.g.value(y).shape(), (10, 8));
            for a in &pass.attention[0].1 {
                for r in 0..10 {
                    let sum: f64 = pass.g.value(*a).row(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
        for n in names {
            let id = s.id(&n).unwrap();
            let m = s.value(id).scale(0.0);
            *s.value_mut(id) = m;
        }
        let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
        let xv = pass.g.constant(x.clone());
        let y = encoder_layer(&mut pass, &cfg, xv, 1);
        assert_eq!(pass.g.value(y), &x);
    }

    #[test]
    fn injection_only_affects_later_layers() {
        let cfg = small_cfg();
        let s = store(&cfg);
        let x = Matrix::from_fn(10, 8, |r, c| ((r + 3 * c) as f64).cos());
        let run = |inject_at: Option<usize>| {
            let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
            let x0 = pass.g.constant(x.clone());
            let mut outs = Vec::new();
            let out = forward_encoder(&mut pass, &cfg, x0, &[1, 2], |p, l, t| {
                outs.push(p.g.value(t).clone());
                Ok((inject_at == Some(l)).then(|| p.g.constant(Matrix::filled(10, 8, 0.1))))
            })
            .unwrap();
            outs.push(pass.g.value(out).clone());
            outs
        };
        let base = run(None);
        let inj = run(Some(2));
        assert_eq!(base[0], inj[0]);
        assert_eq!(base[1], inj[1]);
        assert_ne!(base[2], inj[2]);

        let mut pass = Pass::new(Binder::new(&s, frozen, false), false);
        let x0 = pass.g.constant(x.clone());
        let r = forward_encoder(&mut pass, &cfg, x0, &[2], |p, _, _| Ok(Some(p.g.constant(Matrix::zeros(10, 8)))));
        assert!(r.is_err());
    }

    #[test]
    fn decoding_follows_the_cell_formula() {
        let side = 8;
        let mut score = Matrix::zeros(side, side);
        score.set(2, 3, 0.9);
        let zero = Matrix::zeros(side, side);
        let quarter = Matrix::filled(side, side, 0.25);
        let out = decode_maps(score, [zero.clone(), zero], [quarter.clone(), quarter]);
        assert_eq!(out.peak, (2, 3));
        assert_eq!(out.bbox.as_array(), [3.5 / 8.0, 2.5 / 8.0, 0.25, 0.25]);

        let flat = decode_maps(
            Matrix::filled(side, side, 0.3),
            [Matrix::zeros(side, side), Matrix::zeros(side, side)],
            [Matrix::filled(side, side, 0.1), Matrix::filled(side, side, 0.1)],
        );
        assert_eq!(flat.peak, (0, 0));

        let logits = Matrix::from_fn(side * side, HEAD_CHANNELS, |r, c| ((r * 5 + c) as f64 * 0.37).sin() * 3.0);
        let out = decode_head(&logits, side);
        assert!(out.score_map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.bbox.check().is_ok());
    }
}
