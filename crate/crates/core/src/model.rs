//! The full tracker: frozen backbone, eMoE injections, CRM branch, head,
//! and the per-sample loss with gradients.

use std::collections::HashMap;

use crate::autograd::Var;
use crate::backbone::{
    decode_head, embed_pair, forward_encoder, fused_search, head_logits, register_backbone, HeadOutput, PairInputs, Pass,
    SegmentLayout,
};
use crate::bbox::BoundingBox;
use crate::config::RunConfig;
use crate::crm::{crm_fuse, crm_similarity, info_nce_node, partition_pairs, register_crm, FusedTokens};
use crate::emoe::{assemble, expert_forward, register_emoe, AttributeScores};
use crate::error::{Error, Result};
use crate::eventrep::Sample;
use crate::objective::{attribute_loss, total_loss, tracking_loss, LossBreakdown};
use crate::params::{Binder, ParamId, ParamKind, ParamStore, ParameterGroup};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Skip the eMoE blocks entirely, as if every injection were zero.
    pub zero_injection: bool,
    pub record_attention: bool,
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput<'a> {
    pub pass: Pass<'a>,
    /// Raw head logits `(S², 5)`.
    pub logits: Var,
    /// Per injected layer: `(layer, (1, K) scores, expert features)`.
    pub emoe: Vec<(usize, Var, Vec<Var>)>,
    pub fused: Option<FusedTokens>,
    /// Final normalized tokens `(N, D)`.
    pub tokens: Var,
}

impl ForwardOutput<'_> {
    pub fn head(&self, side: usize) -> HeadOutput {
        decode_head(self.pass.g.value(self.logits), side)
    }

    pub fn scores(&self) -> Vec<AttributeScores> {
        self.emoe
            .iter()
            .map(|(l, w, _)| AttributeScores { layer: *l, w: self.pass.g.value(*w).data().to_vec() })
            .collect()
    }
}

/// Loss, gradients for trainable weights, and batch-norm statistics of one
/// training sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: LossBreakdown,
    pub grads: HashMap<ParamId, Matrix>,
    pub bn_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub layout: SegmentLayout,
}

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

impl Tracker {
    /// Builds a freshly initialized model. Every parameter's initial value
    /// depends only on `cfg.seed` and its name.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let m = &cfg.model;
        register_backbone(&mut store, m, cfg.seed);
        if m.use_emoe {
            register_emoe(&mut store, &cfg.emoe, m.dim, m.depth, cfg.seed, m.init_std);
        }
        if m.use_crm {
            register_crm(&mut store, m.dim);
        }
        let layout = SegmentLayout::new(m);
        Ok(Self { cfg, store, layout })
    }

    pub fn side(&self) -> usize {
        self.cfg.model.search_grid()
    }

    pub fn injected_layers(&self) -> Vec<usize> {
        if self.cfg.model.use_emoe {
            self.cfg.emoe.injected_layers(self.cfg.model.depth)
        } else {
            Vec::new()
        }
    }

    /// eMoE and CRM train by default; the head only when unfrozen.
    pub fn is_trainable(&self, group: &str) -> bool {
        match group {
            "emoe" => self.cfg.model.use_emoe,
            "crm" => self.cfg.model.use_crm,
            "head" => self.cfg.model.header_unfrozen,
            _ => false,
        }
    }

    pub fn freeze_report(&self) -> Vec<ParameterGroup> {
        self.store
            .group_names()
            .into_iter()
            .map(|g| ParameterGroup {
                trainable: self.is_trainable(&g),
                checksum: self.store.group_checksum(&g),
                num_values: self.store.group_size(&g),
                name: g,
            })
            .collect()
    }

    /// Patch-flattens a sample's four crops.
    pub fn pair_inputs(&self, s: &Sample) -> Result<PairInputs> {
        let p = self.cfg.model.patch;
        Ok(PairInputs {
            rgb_template: s.rgb_template.to_patches(p)?,
            event_template: s.event_template.image().to_patches(p)?,
            rgb_search: s.rgb_search.to_patches(p)?,
            event_search: s.event_search.image().to_patches(p)?,
        })
    }

    /// Builds the graph for one pair. `train` enables gradients on trainable
    /// weights and batch statistics in batch norm.
    pub fn forward(&self, x: &PairInputs, train: bool, opts: ForwardOptions) -> Result<ForwardOutput<'_>> {
        let binder = Binder::new(&self.store, move |g: &str| self.is_trainable(g), train);
        let mut pass = Pass::new(binder, train);
        pass.record_attention = opts.record_attention;
        let m = &self.cfg.model;
        let injected = if opts.zero_injection { Vec::new() } else { self.injected_layers() };
        let t0 = embed_pair(&mut pass, m, x)?;
        let mut emoe = Vec::new();
        let t = forward_encoder(&mut pass, m, t0, &injected, |pass, l, t| {
            if !injected.contains(&l) {
                return Ok(None);
            }
            let feats = (1..=self.cfg.emoe.num_experts)
                .map(|i| expert_forward(pass, &self.cfg.emoe, t, i, l))
                .collect::<Result<Vec<_>>>()?;
            let (p, w) = assemble(pass, &self.cfg.emoe, t, &feats, l)?;
            emoe.push((l, w, feats));
            Ok(Some(p))
        })?;
        let tokens = pass.layer_norm(t, "encoder.norm");
        let fused = m.use_crm.then(|| crm_fuse(&mut pass, &self.layout, tokens));
        let search = match fused {
            Some(f) if self.cfg.crm.feeds_head => f.x,
            _ => fused_search(&mut pass, &self.layout, tokens),
        };
        let logits = head_logits(&mut pass, search, self.side());
        Ok(ForwardOutput { pass, logits, emoe, fused, tokens })
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, x: &PairInputs, opts: ForwardOptions) -> Result<(HeadOutput, Vec<AttributeScores>)> {
        let out = self.forward(x, false, opts)?;
        Ok((out.head(self.side()), out.scores()))
    }

    /// Total loss for one sample and the gradients of every trainable weight.
    pub fn sample_loss(&self, x: &PairInputs, gt: &BoundingBox, attrs: &[f64]) -> Result<SampleGrad> {
        let mut out = self.forward(x, true, ForwardOptions::default())?;
        let side = self.side();
        let w = self.cfg.loss.clone();
        let logits = out.pass.g.value(out.logits).clone();
        let tr = tracking_loss(&logits, gt, side)?;
        let g = &mut out.pass.g;
        let cls = g.scalar_fn(tr.cls, vec![(out.logits, tr.d_cls)]);
        let iou = g.scalar_fn(tr.iou, vec![(out.logits, tr.d_iou)]);
        let l1 = g.scalar_fn(tr.l1, vec![(out.logits, tr.d_l1)]);
        let mut terms = vec![(cls, 1.0), (iou, w.lambda_iou), (l1, w.lambda_l1)];

        let mut nce_v = 0.0;
        if let Some(f) = out.fused {
            let s = crm_similarity(&mut out.pass, f, self.cfg.crm.tau);
            let parts = partition_pairs(gt, side)?;
            let nce = info_nce_node(&mut out.pass, s, &parts)?;
            nce_v = out.pass.g.value(nce).get(0, 0);
            terms.push((nce, w.alpha));
        }
        let mut attr_v = 0.0;
        if !out.emoe.is_empty() {
            let scores: Vec<Vec<f64>> = out.emoe.iter().map(|(_, s, _)| out.pass.g.value(*s).data().to_vec()).collect();
            let (a, grads) = attribute_loss(&scores, attrs)?;
            let local = out
                .emoe
                .iter()
                .zip(grads)
                .map(|((_, s, _), gr)| (*s, Matrix::from_vec(1, gr.len(), gr)))
                .collect();
            let attr = out.pass.g.scalar_fn(a, local);
            attr_v = a;
            terms.push((attr, w.beta));
        }
        let loss = total_loss(tr.cls, tr.iou, tr.l1, nce_v, attr_v, &w)?;
        let total = out.pass.g.lincomb(&terms);
        out.pass.g.backward(total);

        let mut grads = HashMap::new();
        for (id, v) in out.pass.params.bound() {
            let p = self.store.get(id);
            if p.kind != ParamKind::Weight || !self.is_trainable(p.group()) {
                continue;
            }
            if let Some(gr) = out.pass.g.grad(v) {
                if !gr.all_finite() {
                    return Err(Error::NonFinite { component: format!("gradient of {}", p.name) });
                }
                grads.insert(id, gr.clone());
            }
        }
        let bn_stats = out
            .pass
            .bn_nodes
            .iter()
            .filter_map(|(name, v)| out.pass.g.batch_stats(*v).map(|(m, s)| (name.clone(), m.to_vec(), s.to_vec())))
            .collect();
        Ok(SampleGrad { loss, grads, bn_stats })
    }

    /// Moves running batch-norm statistics toward the mean of `stats`
    /// (one entry per sample and layer).
    pub fn update_bn(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        let mut acc: HashMap<&str, (Vec<f64>, Vec<f64>, usize)> = HashMap::new();
        for (name, m, v) in stats {
            let e = acc.entry(name).or_insert_with(|| (vec![0.0; m.len()], vec![0.0; v.len()], 0));
            e.0.iter_mut().zip(m).for_each(|(a, b)| *a += b);
            e.1.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            e.2 += 1;
        }
        let mut names: Vec<&&str> = acc.keys().collect();
        names.sort();
        for name in names {
            let (m, v, n) = &acc[*name];
            for (suffix, src) in [("running_mean", m), ("running_var", v)] {
                let id = self.store.id(&format!("{name}.{suffix}")).expect("running statistics registered");
                let buf = self.store.value_mut(id);
                for (b, s) in buf.data_mut().iter_mut().zip(src) {
                    *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * s / *n as f64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EmoeConfig, ModelConfig};

    pub(crate) fn toy_config() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                dim: 8,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
                patch: 4,
                template_size: 8,
                search_size: 8,
                head_hidden: 6,
                ..Default::default()
            },
            emoe: EmoeConfig { num_experts: 2, insert_interval: 1, hidden_ratio: 2 },
            ..Default::default()
        }
    }

    fn toy_inputs(seed: u64) -> PairInputs {
        let f = |r: usize, c: usize, k: u64| ((r * 31 + c * 7) as f64 * 0.13 + (seed + k) as f64).sin().abs();
        PairInputs {
            rgb_template: Matrix::from_fn(4, 48, |r, c| f(r, c, 1)),
            event_template: Matrix::from_fn(4, 32, |r, c| f(r, c, 2)),
            rgb_search: Matrix::from_fn(4, 48, |r, c| f(r, c, 3)),
            event_search: Matrix::from_fn(4, 32, |r, c| f(r, c, 4)),
        }
    }

    #[test]
    fn default_groups_and_freeze_flags() {
        let t = Tracker::new(RunConfig::default()).unwrap();
        let trainable: Vec<String> = t.freeze_report().into_iter().filter(|g| g.trainable).map(|g| g.name).collect();
        assert_eq!(trainable, vec!["emoe", "crm"]);
        let mut cfg = RunConfig::default();
        cfg.model.header_unfrozen = true;
        let t = Tracker::new(cfg).unwrap();
        assert!(t.freeze_report().iter().any(|g| g.name == "head" && g.trainable));
    }

    #[test]
    fn init_does_not_depend_on_other_submodules() {
        let full = Tracker::new(toy_config()).unwrap();
        let mut cfg = toy_config();
        cfg.model.use_emoe = false;
        cfg.model.use_crm = false;
        let bare = Tracker::new(cfg).unwrap();
        for g in ["patch_embed", "encoder", "head"] {
            assert_eq!(full.store.group_checksum(g), bare.store.group_checksum(g));
        }
    }

    #[test]
    fn zero_injection_matches_backbone_only() {
        let full = Tracker::new(toy_config()).unwrap();
        let mut cfg = toy_config();
        cfg.model.use_emoe = false;
        cfg.model.use_crm = false;
        let bare = Tracker::new(cfg).unwrap();
        let x = toy_inputs(1);
        let opts = ForwardOptions { zero_injection: true, ..Default::default() };
        let (a, _) = full.predict(&x, opts).unwrap();
        let (b, _) = bare.predict(&x, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
        let (c, _) = full.predict(&x, ForwardOptions::default()).unwrap();
        assert_ne!(a.score_map, c.score_map);
    }

    #[test]
    fn loss_gradients_cover_only_trainable_weights() {
        let t = Tracker::new(toy_config()).unwrap();
        let gt = BoundingBox { cx: 0.4, cy: 0.55, w: 0.5, h: 0.4 };
        let sg = t.sample_loss(&toy_inputs(2), &gt, &[1.0, 0.0, 1.0, 0.0][..2]).unwrap();
        assert!(sg.loss.total > 0.0);
        assert!(!sg.grads.is_empty());
        for id in sg.grads.keys() {
            let g = t.store.get(*id).group().to_string();
            assert!(g == "emoe" || g == "crm", "{g}");
        }
        assert_eq!(sg.bn_stats.len(), 4);
    }
}
