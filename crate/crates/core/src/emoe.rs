//! Environmental mixture of experts: per injected layer, K attribute
//! experts (conv, MLP, conv over the token sequence) and an assembling
//! network whose K sigmoid scores weight the experts' outputs.

use crate::autograd::Var;
use crate::backbone::{add_linear, add_norm, Pass};
use crate::config::EmoeConfig;
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Matrix;

/// Gating scores of one injected layer, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeScores {
    pub layer: usize,
    pub w: Vec<f64>,
}

/// Registers experts and assembling networks for every injected layer.
pub fn register_emoe(store: &mut ParamStore, cfg: &EmoeConfig, dim: usize, depth: usize, seed: u64, std: f64) {
    let d = dim;
    let fan = |n: usize| (1.0 / n as f64).sqrt();
    let hidden = cfg.hidden_ratio * d;
    for l in cfg.injected_layers(depth) {
        for i in 1..=cfg.num_experts {
            let pre = format!("emoe.l{l}.e{i}");
            add_linear(store, seed, &format!("{pre}.conv_in"), d, d, fan(d));
            add_linear(store, seed, &format!("{pre}.fc1"), d, hidden, fan(d));
            add_linear(store, seed, &format!("{pre}.fc2"), hidden, d, fan(hidden));
            add_linear(store, seed, &format!("{pre}.conv_out"), d, d, std);
        }
        let pre = format!("emoe.l{l}.gate");
        for k in 1..=2 {
            add_linear(store, seed, &format!("{pre}.conv{k}"), d, d, fan(d));
            let bn = format!("{pre}.bn{k}");
            add_norm(store, &bn, d);
            store.insert(format!("{bn}.running_mean"), ParamKind::Buffer, Matrix::zeros(1, d));
            store.insert(format!("{bn}.running_var"), ParamKind::Buffer, Matrix::filled(1, d, 1.0));
        }
        add_linear(store, seed, &format!("{pre}.out"), d, cfg.num_experts, fan(d));
    }
}

/// Expert `i` (1-based) of layer `l`: pointwise conv, MLP with GELU,
/// pointwise conv. Output has the input's shape.
pub fn expert_forward(pass: &mut Pass, cfg: &EmoeConfig, x: Var, i: usize, l: usize) -> Result<Var> {
    if i == 0 || i > cfg.num_experts {
        return Err(Error::State(format!("expert index {i} outside 1..={}", cfg.num_experts)));
    }
    let pre = format!("emoe.l{l}.e{i}");
    let h = pass.linear(x, &format!("{pre}.conv_in"));
    let h = pass.linear(h, &format!("{pre}.fc1"));
    let h = pass.g.gelu(h);
    let h = pass.linear(h, &format!("{pre}.fc2"));
    Ok(pass.linear(h, &format!("{pre}.conv_out")))
}

/// Assembling network of layer `l`: two (conv, batch norm, ReLU) stages,
/// a conv to K channels, sigmoid, then the mean over tokens. Returns `(1, K)`.
pub fn gate_scores(pass: &mut Pass, x: Var, l: usize) -> Var {
    let pre = format!("emoe.l{l}.gate");
    let mut h = x;
    for k in 1..=2 {
        h = pass.linear(h, &format!("{pre}.conv{k}"));
        h = pass.batch_norm(h, &format!("{pre}.bn{k}"));
        h = pass.g.relu(h);
    }
    let h = pass.linear(h, &format!("{pre}.out"));
    let h = pass.g.sigmoid(h);
    pass.g.mean_rows(h)
}

/// `Σ_t w[t] · H_t` for a `(1, K)` score row.
pub fn weighted_sum(pass: &mut Pass, w: Var, features: &[Var]) -> Var {
    let terms: Vec<(Var, f64)> = features
        .iter()
        .enumerate()
        .map(|(t, &h)| {
            let wt = pass.g.element(w, 0, t);
            (pass.g.scale_by(h, wt), 1.0)
        })
        .collect();
    pass.g.lincomb(&terms)
}

/// Gates `features` with the layer-`l` assembling network run on `x`.
/// Returns `(assembled, scores)`.
pub fn assemble(pass: &mut Pass, cfg: &EmoeConfig, x: Var, features: &[Var], l: usize) -> Result<(Var, Var)> {
    if features.len() != cfg.num_experts {
        return Err(Error::Shape(format!("expected {} expert features, got {}", cfg.num_experts, features.len())));
    }
    let w = gate_scores(pass, x, l);
    Ok((weighted_sum(pass, w, features), w))
}

/// Value-level `Σ_t w[t] · H_t`.
pub fn assemble_values(w: &[f64], features: &[Matrix]) -> Result<Matrix> {
    if w.len() != features.len() || features.is_empty() {
        return Err(Error::Shape(format!("{} scores for {} features", w.len(), features.len())));
    }
    let mut out = Matrix::zeros(features[0].rows(), features[0].cols());
    for (wt, h) in w.iter().zip(features) {
        if h.shape() != out.shape() {
            return Err(Error::Shape("expert features differ in shape".into()));
        }
        out.axpy(*wt, h);
    }
    Ok(out)
}

/// Full block for injected layer `l`: all experts then assembly.
/// Returns the injection `P` and the `(1, K)` scores.
pub fn emoe_block(pass: &mut Pass, cfg: &EmoeConfig, depth: usize, x: Var, l: usize) -> Result<(Var, Var)> {
    if !cfg.injected_layers(depth).contains(&l) {
        return Err(Error::State(format!("layer {l} has no eMoE block")));
    }
    let features = (1..=cfg.num_experts).map(|i| expert_forward(pass, cfg, x, i, l)).collect::<Result<Vec<_>>>()?;
    assemble(pass, cfg, x, &features, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Binder;

    fn setup(k: usize) -> (EmoeConfig, ParamStore) {
        let cfg = EmoeConfig { num_experts: k, insert_interval: 1, hidden_ratio: 2 };
        let mut s = ParamStore::new();
        register_emoe(&mut s, &cfg, 8, 2, 11, 0.02);
        (cfg, s)
    }

    fn all(_: &str) -> bool {
        true
    }

    fn input() -> Matrix {
        Matrix::from_fn(8, 8, |r, c| ((r * 3 + c * 5) as f64 * 0.41).sin())
    }

    #[test]
    fn experts_keep_shape_and_differ() {
        let (cfg, s) = setup(2);
        let mut pass = Pass::new(Binder::new(&s, all, false), true);
        let x = pass.g.constant(input());
        let a = expert_forward(&mut pass, &cfg, x, 1, 1).unwrap();
        let b = expert_forward(&mut pass, &cfg, x, 2, 1).unwrap();
        assert_eq!(pass.g.value(a).shape(), (8, 8));
        assert_ne!(pass.g.value(a), pass.g.value(b));
        assert!(expert_forward(&mut pass, &cfg, x, 3, 1).is_err());
        assert!(expert_forward(&mut pass, &cfg, x, 0, 1).is_err());
    }

    #[test]
    fn zero_weights_leave_only_the_output_bias() {
        let (cfg, mut s) = setup(1);
        let ids: Vec<_> = s.iter().filter(|(_, p)| p.name.starts_with("emoe.l1.e1.")).map(|(id, _)| id).collect();
        for id in ids {
            *s.value_mut(id) = Matrix::zeros(s.value(id).rows(), s.value(id).cols());
        }
        let b = Matrix::from_fn(1, 8, |_, c| c as f64);
        *s.value_mut(s.id("emoe.l1.e1.conv_out.b").unwrap()) = b.clone();
        let mut pass = Pass::new(Binder::new(&s, all, false), true);
        let x = pass.g.constant(input());
        let h = expert_forward(&mut pass, &cfg, x, 1, 1).unwrap();
        for r in 0..8 {
            assert_eq!(pass.g.value(h).row(r), b.row(0));
        }
    }

    #[test]
    fn assembly_degenerate_cases() {
        let h1 = Matrix::from_fn(3, 2, |r, c| (r + c) as f64);
        let h2 = Matrix::from_fn(3, 2, |r, c| (r * c) as f64 - 1.0);
        assert_eq!(assemble_values(&[1.0, 0.0], &[h1.clone(), h2.clone()]).unwrap(), h1);
        let half = assemble_values(&[0.5, 0.5], &[h1.clone(), h2.clone()]).unwrap();
        let mut sum = h1.clone();
        sum.add_assign(&h2);
        assert!(half.zip_map(&sum, |a, b| a - 0.5 * b).max_abs() < 1e-15);
        assert!(assemble_values(&[1.0], &[h1, h2]).is_err());
    }

    #[test]
    fn block_scores_are_in_the_open_unit_interval() {
        let (cfg, s) = setup(1);
        let mut pass = Pass::new(Binder::new(&s, all, false), true);
        let x = pass.g.constant(input());
        let (p, w) = emoe_block(&mut pass, &cfg, 2, x, 1).unwrap();
        let wv = pass.g.value(w).get(0, 0);
        assert!(wv > 0.0 && wv < 1.0);
        let h = expert_forward(&mut pass, &cfg, x, 1, 1).unwrap();
        assert_eq!(pass.g.value(p), &pass.g.value(h).scale(wv));
        let cfg4 = EmoeConfig { insert_interval: 2, ..cfg };
        assert!(emoe_block(&mut pass, &cfg4, 2, x, 1).is_err());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let (cfg, s) = setup(2);
        let x = input();
        fn run<'a>(s: &'a ParamStore, cfg: &EmoeConfig, x: &Matrix, grads: bool) -> (Pass<'a>, Var) {
            let mut pass = Pass::new(Binder::new(s, all, grads), true);
            let xv = pass.g.constant(x.clone());
            let (p, _) = emoe_block(&mut pass, cfg, 2, xv, 1).unwrap();
            let m = pass.g.mean_all(p);
            (pass, m)
        }
        let loss = |s, grads| run(s, &cfg, &x, grads);
        let value = |s: &ParamStore| {
            let (p, m) = run(s, &cfg, &x, false);
            p.g.value(m).get(0, 0)
        };
        let (mut pass, m) = loss(&s, true);
        pass.g.backward(m);
        let bound = pass.params.bound();
        for (id, v) in bound {
            let name = s.get(id).name.clone();
            if !name.contains(".e") && !name.contains("gate") {
                continue;
            }
            let Some(grad) = pass.g.grad(v).cloned() else { continue };
            let mut s2 = s.clone();
            for k in [0, grad.len() / 2, grad.len() - 1] {
                let h = 1e-6;
                let orig = s2.value(id).data()[k];
                s2.value_mut(id).data_mut()[k] = orig + h;
                let fa = value(&s2);
                s2.value_mut(id).data_mut()[k] = orig - h;
                let fb = value(&s2);
                s2.value_mut(id).data_mut()[k] = orig;
                let num = (fa - fb) / (2.0 * h);
                let ana = grad.data()[k];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{k}]: {num} vs {ana}");
            }
        }
    }
}
