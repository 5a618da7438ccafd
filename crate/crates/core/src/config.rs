//! Run configuration: one TOML document holding every module's settings.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! the `EMOE_SEED` environment variable (seed only), command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute order used by labels, experts and reports.
pub const ATTRIBUTE_NAMES: [&str; 4] = ["illumination_variation", "motion_blur", "scale_variance", "occlusion"];

/// Allowed eMoE insertion intervals.
pub const INSERT_INTERVALS: [usize; 5] = [1, 2, 4, 6, 12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub head_hidden: usize,
    pub init_std: f64,
    pub use_emoe: bool,
    pub use_crm: bool,
    pub header_unfrozen: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 16,
            template_size: 64,
            search_size: 128,
            head_hidden: 64,
            init_std: 0.02,
            use_emoe: true,
            use_crm: true,
            header_unfrozen: false,
        }
    }
}

impl ModelConfig {
    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search_size / self.patch
    }

    /// Tokens per template segment, `N_z`.
    pub fn n_z(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    /// Tokens per search segment, `N_x`.
    pub fn n_x(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn num_tokens(&self) -> usize {
        2 * self.n_z() + 2 * self.n_x()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmoeConfig {
    pub num_experts: usize,
    pub insert_interval: usize,
    pub hidden_ratio: usize,
}

impl Default for EmoeConfig {
    fn default() -> Self {
        Self { num_experts: 4, insert_interval: 1, hidden_ratio: 2 }
    }
}

impl EmoeConfig {
    /// Layers (1-based) that receive an eMoE injection for a depth-`depth`
    /// encoder.
    pub fn injected_layers(&self, depth: usize) -> Vec<usize> {
        if self.insert_interval >= depth {
            return vec![depth];
        }
        (1..=depth).filter(|l| l % self.insert_interval == 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrmConfig {
    pub tau: f64,
    pub feeds_head: bool,
}

impl Default for CrmConfig {
    fn default() -> Self {
        Self { tau: 0.07, feeds_head: false }
    }
}

/// Weights of the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_iou: 2.0, lambda_l1: 5.0, alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of the configured epochs after which the learning rate
    /// drops by 10×.
    pub decay_epoch_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-3, weight_decay: 1e-4, decay_epoch_frac: 32.0 / 60.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimConfig {
    /// The large-scale recipe: AdamW at 2e-4, decay by 10× after epoch 32 of 60.
    pub fn reference() -> Self {
        Self { lr: 2e-4, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Validate (and possibly checkpoint) every this many epochs; 0 only at
    /// the end.
    pub val_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, epochs: 30, steps_per_epoch: 10, val_every_epochs: 0 }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Template crop side as a multiple of the box side `sqrt(w·h)`.
    pub template_factor: f64,
    /// Search crop side as a multiple of the box side.
    pub search_factor: f64,
    /// Maximum centre shift of the search crop, in box sides.
    pub center_jitter: f64,
    /// Log-uniform search-scale jitter half-width.
    pub scale_jitter: f64,
    /// Probability that a training pair uses frame 0 as its template.
    pub first_frame_template_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            first_frame_template_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub emoe: EmoeConfig,
    pub crm: CrmConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    /// Applies `EMOE_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("EMOE_SEED") {
            self.seed = s.trim().parse().map_err(|_| Error::Config(format!("EMOE_SEED is not an integer: {s:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 || m.depth == 0 || m.heads == 0 || m.patch == 0 || m.mlp_ratio == 0 || m.head_hidden == 0 {
            return bad("model sizes must be positive".into());
        }
        if !m.dim.is_multiple_of(m.heads) {
            return bad(format!("model.dim {} is not divisible by model.heads {}", m.dim, m.heads));
        }
        if !m.template_size.is_multiple_of(m.patch) || !m.search_size.is_multiple_of(m.patch) || m.template_size == 0 {
            return bad("crop sizes must be positive multiples of model.patch".into());
        }
        if !(m.init_std > 0.0 && m.init_std.is_finite()) {
            return bad("model.init_std must be positive".into());
        }
        let e = &self.emoe;
        if e.num_experts == 0 || e.hidden_ratio == 0 {
            return bad("emoe.num_experts and emoe.hidden_ratio must be positive".into());
        }
        if !INSERT_INTERVALS.contains(&e.insert_interval) {
            return bad(format!("emoe.insert_interval must be one of {INSERT_INTERVALS:?}, got {}", e.insert_interval));
        }
        if m.use_emoe && e.insert_interval > m.depth {
            return bad(format!("emoe.insert_interval {} exceeds model.depth {}", e.insert_interval, m.depth));
        }
        if !(self.crm.tau > 0.0 && self.crm.tau.is_finite()) {
            return bad("crm.tau must be positive".into());
        }
        if self.crm.feeds_head && !m.use_crm {
            return bad("crm.feeds_head requires model.use_crm".into());
        }
        let l = &self.loss;
        for (k, v) in [("lambda_iou", l.lambda_iou), ("lambda_l1", l.lambda_l1), ("alpha", l.alpha), ("beta", l.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("loss.{k} must be non-negative"));
            }
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.weight_decay >= 0.0) || !(0.0..=1.0).contains(&o.decay_epoch_frac) {
            return bad("optim.lr must be positive, weight_decay non-negative, decay_epoch_frac in [0,1]".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim betas must lie in [0,1) and eps must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.steps_per_epoch == 0 {
            return bad("train.batch_size, epochs and steps_per_epoch must be positive".into());
        }
        let d = &self.data;
        if !(d.template_factor > 0.0) || !(d.search_factor > 0.0) || d.center_jitter < 0.0 || d.scale_jitter < 0.0 {
            return bad("data crop factors must be positive and jitters non-negative".into());
        }
        if !(0.0..=1.0).contains(&d.first_frame_template_prob) {
            return bad("data.first_frame_template_prob must lie in [0,1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[loss]\nlambda_iou = 2.0\ngamma = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(RunConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[emoe]\nnum_experts = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.emoe.num_experts, 2);
        assert_eq!(cfg.emoe.insert_interval, 1);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn injected_layer_sets() {
        let counts: Vec<usize> = INSERT_INTERVALS
            .iter()
            .map(|&i| EmoeConfig { insert_interval: i, ..Default::default() }.injected_layers(12).len())
            .collect();
        assert_eq!(counts, vec![12, 6, 3, 2, 1]);
        let e = EmoeConfig { insert_interval: 2, ..Default::default() };
        assert_eq!(e.injected_layers(4), vec![2, 4]);
        let e = EmoeConfig { insert_interval: 4, ..Default::default() };
        assert_eq!(e.injected_layers(4), vec![4]);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.emoe.insert_interval = 3;
        assert!(cfg.validate().is_err());
        cfg.emoe.insert_interval = 6;
        assert!(cfg.validate().is_err(), "interval larger than depth 4");
        let mut cfg = RunConfig::default();
        cfg.loss.alpha = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
