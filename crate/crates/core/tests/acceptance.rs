//! Acceptance suite. Every criterion prints one `criterion N: PASS|FAIL`
//! line (written straight to stdout so it shows even when the harness
//! captures output) and then asserts.
//!
//! The heavy criteria share one fixture and run one at a time so their
//! wall-clock limits are measured without contention.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use emoe_core::backbone::{PairInputs, Pass};
use emoe_core::bbox::BoundingBox;
use emoe_core::config::{EmoeConfig, ModelConfig, RunConfig};
use emoe_core::crm::{info_nce, partition_pairs, PairPartition};
use emoe_core::emoe::weighted_sum;
use emoe_core::eventrep::{generate_fixture, AttributeLabel, Dataset, FixtureOptions};
use emoe_core::model::ForwardOptions;
use emoe_core::objective::attribute_loss;
use emoe_core::params::{Binder, ParamStore};
use emoe_core::trackloop::{evaluate, evaluate_dataset, train, Metrics, TrackResult};
use emoe_core::{Matrix, Tracker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, ok: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().write_all(line.as_bytes());
    let _ = std::io::stdout().flush();
}

fn fixture() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_fixture");
        let opts = FixtureOptions { seed: 0, num_sequences: 8, frames_per_seq: 32, image_size: 160, force: true };
        generate_fixture(&dir, &opts).expect("fixture generation");
        dir
    })
}

fn random_inputs(t: &Tracker, rng: &mut ChaCha8Rng) -> PairInputs {
    let width = |name: &str| t.store.by_name(name).expect("patch embedding").rows();
    let (rw, ew) = (width("patch_embed.rgb.w"), width("patch_embed.event.w"));
    let (nz, nx) = (t.cfg.model.n_z(), t.cfg.model.n_x());
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random::<f64>());
    PairInputs { rgb_template: m(nz, rw), event_template: m(nz, ew), rgb_search: m(nx, rw), event_search: m(nx, ew) }
}

/// Trains `cfg` on the fixture and returns training-split metrics and the
/// wall-clock time of training plus evaluation.
fn train_and_eval(cfg: RunConfig) -> (Metrics, Duration) {
    let data = Dataset::open(fixture(), cfg.emoe.num_experts).unwrap();
    let start = Instant::now();
    let mut t = Tracker::new(cfg).unwrap();
    train(&mut t, &data, |_, _| {}).unwrap();
    let (_, r) = evaluate_dataset(&t, &data).unwrap();
    (r.overall, start.elapsed())
}

fn full_model_run() -> &'static (Metrics, Duration) {
    static RUN: OnceLock<(Metrics, Duration)> = OnceLock::new();
    RUN.get_or_init(|| train_and_eval(RunConfig::default()))
}

#[test]
fn criterion_01_freeze_contract() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 5;
    cfg.train.steps_per_epoch = 10;
    let data = Dataset::open(fixture(), cfg.emoe.num_experts).unwrap();
    let start = Instant::now();
    let mut t = Tracker::new(cfg).unwrap();
    let before = t.store.checksums();
    let mut steps = 0;
    train(&mut t, &data, |_, _| steps += 1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let after = t.store.checksums();
    let frozen = ["patch_embed", "encoder", "head"].iter().all(|g| before[*g] == after[*g]);
    let moved = ["emoe", "crm"].iter().all(|g| before[*g] != after[*g]);
    let ok = steps == 50 && frozen && moved && secs < 60.0;
    report(1, ok, &format!("{steps} steps, frozen groups identical: {frozen}, eMoE and CRM changed: {moved}, {secs:.1} s"));
    assert!(ok);
}

#[test]
fn criterion_02_zero_injection_identity() {
    let _g = serial();
    let full = Tracker::new(RunConfig::default()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.use_emoe = false;
    cfg.model.use_crm = false;
    let bare = Tracker::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut identical = 0;
    for _ in 0..100 {
        let x = random_inputs(&full, &mut rng);
        let a = full.forward(&x, false, ForwardOptions { zero_injection: true, ..Default::default() }).unwrap();
        let b = bare.forward(&x, false, ForwardOptions::default()).unwrap();
        let (la, lb) = (a.pass.g.value(a.logits), b.pass.g.value(b.logits));
        if la.data().iter().zip(lb.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    let ok = identical == 100;
    report(2, ok, &format!("{identical}/100 inputs bit-identical"));
    assert!(ok);
}

#[test]
fn criterion_03_assembly_oracle() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let (r, c) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let hs: Vec<Matrix> = (0..k).map(|_| Matrix::from_fn(r, c, |_, _| rng.random_range(-5.0..5.0))).collect();
        let mut pass = Pass::new(Binder::new(&store, |_: &str| false, false), false);
        let wv = pass.g.constant(Matrix::from_vec(1, k, w.clone()));
        let hv: Vec<_> = hs.iter().map(|h| pass.g.constant(h.clone())).collect();
        let out = weighted_sum(&mut pass, wv, &hv);
        let got = pass.g.value(out);
        for i in 0..r {
            for j in 0..c {
                let mut want = 0.0;
                for t in 0..k {
                    want += w[t] * hs[t].get(i, j);
                }
                worst = worst.max((got.get(i, j) - want).abs());
            }
        }
    }
    let ok = worst <= 1e-6;
    report(3, ok, &format!("max element error {worst:.2e} over 1000 draws"));
    assert!(ok);
}

#[test]
fn criterion_04_info_nce() {
    let p = PairPartition { pos: vec![0, 1, 2], neg: vec![3, 4, 5] };
    let (sym, _) = info_nce(&[0.37; 6], &p).unwrap();
    let sym_ok = (sym - std::f64::consts::LN_2).abs() <= 1e-9;

    let (empty, _) = info_nce(&[0.2, -1.0, 3.0], &PairPartition { pos: vec![0, 1, 2], neg: vec![] }).unwrap();
    let empty_ok = empty == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=20);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let split = rng.random_range(1..n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let p = PairPartition { pos: idx[..split].to_vec(), neg: idx[split..].to_vec() };
        let (base, _) = info_nce(&s, &p).unwrap();
        let j = rng.random_range(0..n);
        let mut s2 = s.clone();
        s2[j] += rng.random_range(0.01..3.0);
        let (moved, _) = info_nce(&s2, &p).unwrap();
        let bad = if p.pos.contains(&j) { moved > base + 1e-12 } else { moved < base - 1e-12 };
        violations += bad as usize;
    }
    let mono_ok = violations == 0;

    let gt = BoundingBox::new(0.45, 0.55, 0.5, 0.4).unwrap();
    let parts = partition_pairs(&gt, 4).unwrap();
    let s: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, grad) = info_nce(&s, &parts).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..16 {
        let mut a = s.clone();
        a[i] += h;
        let mut b = s.clone();
        b[i] -= h;
        let num = (info_nce(&a, &parts).unwrap().0 - info_nce(&b, &parts).unwrap().0) / (2.0 * h);
        worst = worst.max((num - grad[i]).abs());
    }
    let grad_ok = worst <= 1e-5;

    let ok = sym_ok && empty_ok && mono_ok && grad_ok;
    report(
        4,
        ok,
        &format!(
            "symmetric {sym:.12}, no negatives {empty}, {violations} monotonicity violations in 1000, gradient error {worst:.2e} at N_x = 16"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_attribute_loss() {
    let g = vec![1.0, 0.0, 1.0, 0.0];
    let layers = EmoeConfig { insert_interval: 4, ..Default::default() }.injected_layers(12).len();
    let exact: Vec<Vec<f64>> = vec![g.clone(); layers];
    let (zero, _) = attribute_loss(&exact, &g).unwrap();
    let off: Vec<Vec<f64>> = vec![vec![0.9, 0.1, 0.9, 0.1]; layers];
    let (offset, _) = attribute_loss(&off, &g).unwrap();
    let want = 0.1 * g.len() as f64 * layers as f64;
    let arith_ok = zero == 0.0 && (offset - want).abs() <= 1e-7;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let l = rng.random_range(1..=12);
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(0..2) as f64).collect();
        let w: Vec<Vec<f64>> = (0..l).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
        let (got, _) = attribute_loss(&w, &g).unwrap();
        let mut want = 0.0;
        for t in (0..k).rev() {
            for layer in w.iter().rev() {
                want += (layer[t] - g[t]).abs();
            }
        }
        worst = worst.max((got - want).abs());
    }
    let ok = arith_ok && worst <= 1e-7;
    report(5, ok, &format!("W = G gives {zero}, offset case {offset:.9} vs {want:.9} over {layers} layers, re-summation error {worst:.2e}"));
    assert!(ok);
}

#[test]
fn criterion_06_insertion_cardinality() {
    let _g = serial();
    let mut counts = Vec::new();
    for interval in [1, 2, 4, 6, 12] {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig { dim: 8, depth: 12, heads: 2, patch: 4, template_size: 8, search_size: 8, head_hidden: 4, ..Default::default() };
        cfg.emoe.insert_interval = interval;
        let t = Tracker::new(cfg).unwrap();
        let blocks = t.store.iter().filter(|(_, p)| p.name.starts_with("emoe.") && p.name.ends_with(".gate.out.w")).count();
        counts.push(blocks);
    }
    let ok = counts == [12, 6, 3, 2, 1];
    report(6, ok, &format!("intervals [1, 2, 4, 6, 12] give {counts:?} blocks"));
    assert!(ok);
}

/// Worst relative error between analytic and central-difference gradients
/// over every entry of every trainable weight, and the number of entries.
fn gradient_check(cfg: RunConfig, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let t = Tracker::new(cfg).unwrap();
    let x = random_inputs(&t, rng);
    let gt = BoundingBox::new(0.45, 0.55, 0.5, 0.6).unwrap();
    let attrs = [1.0, 0.0];
    let analytic = t.sample_loss(&x, &gt, &attrs).unwrap();
    let mut probe = t.clone();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut n = 0;
    for (id, grad) in &analytic.grads {
        for k in 0..grad.len() {
            let orig = probe.store.value(*id).data()[k];
            probe.store.value_mut(*id).data_mut()[k] = orig + h;
            let fa = probe.sample_loss(&x, &gt, &attrs).unwrap().loss.total;
            probe.store.value_mut(*id).data_mut()[k] = orig - h;
            let fb = probe.sample_loss(&x, &gt, &attrs).unwrap().loss.total;
            probe.store.value_mut(*id).data_mut()[k] = orig;
            let num = (fa - fb) / (2.0 * h);
            let ana = grad.data()[k];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            n += 1;
        }
    }
    (worst, n)
}

#[test]
fn criterion_07_full_model_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig { dim: 8, depth: 2, heads: 2, patch: 4, template_size: 8, search_size: 8, head_hidden: 4, ..Default::default() };
    cfg.emoe.num_experts = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (default_err, n1) = gradient_check(cfg.clone(), &mut rng);
    cfg.model.header_unfrozen = true;
    cfg.crm.feeds_head = true;
    let (unfrozen_err, n2) = gradient_check(cfg, &mut rng);
    let secs = start.elapsed().as_secs_f64();
    let worst = default_err.max(unfrozen_err);
    let ok = worst <= 1e-3 && n1 > 0 && n2 > n1 && secs < 300.0;
    report(7, ok, &format!("max relative error {worst:.2e} over {n1} + {n2} entries, {secs:.1} s"));
    assert!(ok);
}

#[test]
fn criterion_08_toy_overfit() {
    let _g = serial();
    let (m, took) = *full_model_run();
    let secs = took.as_secs_f64();
    let ok = m.sr >= 0.90 && m.pr >= 0.90 && secs < 600.0;
    report(8, ok, &format!("300 steps: SR {:.4}, PR {:.4}, NPR {:.4} (need SR and PR >= 0.90), {secs:.1} s", m.sr, m.pr, m.npr));
    assert!(ok);
}

#[test]
fn criterion_09_ablation_direction() {
    let _g = serial();
    let full = full_model_run().0.sr;
    let mut cfg = RunConfig::default();
    cfg.model.use_crm = false;
    let emoe_only = train_and_eval(cfg.clone()).0.sr;
    cfg.model.use_emoe = false;
    cfg.model.header_unfrozen = true;
    let head_only = train_and_eval(cfg).0.sr;
    let ok = full >= emoe_only - 0.02 && emoe_only >= head_only - 0.02;
    report(9, ok, &format!("SR eMoE+CRM {full:.4}, eMoE {emoe_only:.4}, head only {head_only:.4} (tolerance 0.02)"));
    assert!(ok);
}

/// Independent success-rate oracle: enumerates the thresholds 0.05, 0.10,
/// ..., 1.0 and integrates the success curve as a right Riemann sum.
fn sr_oracle(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> f64 {
    let overlap = |a: [f64; 4], b: [f64; 4]| {
        let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
        let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
        let inter = ix * iy;
        inter / (a[2] * a[3] + b[2] * b[3] - inter)
    };
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| overlap(*p, *g)).collect();
    let mut area = 0.0;
    let mut th: f64 = 0.0;
    for _ in 0..20 {
        th += 0.05;
        let hit = ious.iter().filter(|&&v| v >= th - 1e-9).count();
        area += 0.05 * hit as f64 / ious.len() as f64;
    }
    area
}

#[test]
fn criterion_10_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let label = |k| AttributeLabel::new(vec![0; k], k).unwrap();
    let mut worst = 0.0f64;
    for set in 0..50 {
        let nseq = rng.random_range(1..=5);
        let (mut results, mut gts, mut want) = (Vec::new(), Vec::new(), 0.0);
        for s in 0..nseq {
            let (w, h) = (rng.random_range(50..400), rng.random_range(50..400));
            let frames = rng.random_range(1..=40);
            let mut boxes = Vec::new();
            let mut gt = Vec::new();
            for _ in 0..frames {
                let g = BoundingBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)).unwrap();
                let jitter = rng.random_range(0.0..0.3);
                let p = BoundingBox::new(
                    (g.cx + rng.random_range(-jitter..=jitter)).clamp(0.01, 0.99),
                    (g.cy + rng.random_range(-jitter..=jitter)).clamp(0.01, 0.99),
                    g.w * rng.random_range(0.5..1.5),
                    g.h * rng.random_range(0.5..1.5),
                )
                .unwrap();
                boxes.push(p);
                gt.push(g);
            }
            let px = |b: &BoundingBox| [b.cx * w as f64, b.cy * h as f64, b.w * w as f64, b.h * h as f64];
            let p: Vec<_> = boxes.iter().map(px).collect();
            let g: Vec<_> = gt.iter().map(px).collect();
            want += sr_oracle(&p, &g) / nseq as f64;
            results.push(TrackResult { name: format!("set{set}_seq{s}"), width: w, height: h, scores: vec![1.0; frames], boxes });
            gts.push(gt);
        }
        let attrs: Vec<_> = (0..nseq).map(|_| label(4)).collect();
        let got = evaluate(&results, &gts, &attrs).unwrap().overall.sr;
        worst = worst.max((got - want).abs());
    }

    let gt = vec![BoundingBox::new(0.5, 0.5, 0.2, 0.3).unwrap(), BoundingBox::new(0.4, 0.6, 0.25, 0.2).unwrap()];
    let perfect = TrackResult { name: "p".into(), width: 200, height: 100, boxes: gt.clone(), scores: vec![1.0; 2] };
    let far: Vec<_> = gt.iter().map(|b| BoundingBox::new(b.cx + 0.45, b.cy, 0.05, 0.05).unwrap()).collect();
    let failed = TrackResult { name: "f".into(), width: 200, height: 100, boxes: far, scores: vec![1.0; 2] };
    let one = |r: TrackResult| evaluate(&[r], std::slice::from_ref(&gt), &[label(4)]).unwrap().overall;
    let (p, f) = (one(perfect), one(failed));
    let degenerate_ok = p == Metrics { sr: 1.0, pr: 1.0, npr: 1.0 } && f == Metrics { sr: 0.0, pr: 0.0, npr: 0.0 };

    let ok = worst <= 1e-9 && degenerate_ok;
    report(10, ok, &format!("max SR deviation from the sweep oracle {worst:.2e} over 50 sets, perfect {p:?}, failure {f:?}"));
    assert!(ok);
}
