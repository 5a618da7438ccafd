//! Training loop, online tracking over a sequence, and SR/PR/NPR metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::PairInputs;
use crate::bbox::{iou, BoundingBox};
use crate::config::ATTRIBUTE_NAMES;
use crate::error::{io_ctx, Error, Result};
use crate::eventrep::{load_sample, AttributeLabel, CropSettings, Dataset, Sequence};
use crate::model::{ForwardOptions, Tracker};
use crate::objective::{lr_at_epoch, make_optimizer, LossBreakdown};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Centre-error threshold of the precision rate, in pixels.
pub const PR_THRESHOLD_PX: f64 = 20.0;
/// Threshold of the normalized precision rate.
pub const NPR_THRESHOLD: f64 = 0.2;
/// Number of IoU thresholds `k/20, k = 1..=20` in the success curve.
pub const SUCCESS_STEPS: usize = 20;
const SAMPLER_STREAM: u64 = 0x5EED_5A3D_1E00_0001;

/// Per-frame boxes (normalized to the image) and peak scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f64>,
}

impl TrackResult {
    /// Lines `frame_idx,cx,cy,w,h,score`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (b, sc)) in self.boxes.iter().zip(&self.scores).enumerate() {
            let _ = writeln!(s, "{i},{:.6},{:.6},{:.6},{:.6},{:.6}", b.cx, b.cy, b.w, b.h, sc);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub sr: f64,
    pub pr: f64,
    pub npr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMetrics {
    pub name: String,
    pub num_sequences: usize,
    /// `None` when no sequence carries the attribute.
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub num_sequences: usize,
    pub per_attribute: Vec<AttributeMetrics>,
}

impl MetricsReport {
    /// `key = value` lines; attribute entries only when `per_attribute`.
    pub fn to_text(&self, per_attribute: bool) -> String {
        let mut s = String::new();
        let m = &self.overall;
        let _ = writeln!(s, "SR = {:.6}\nPR = {:.6}\nNPR = {:.6}\nsequences = {}", m.sr, m.pr, m.npr, self.num_sequences);
        if per_attribute {
            for a in &self.per_attribute {
                let _ = writeln!(s, "attr/{}/sequences = {}", a.name, a.num_sequences);
                let m = a.metrics.unwrap_or(Metrics { sr: f64::NAN, pr: f64::NAN, npr: f64::NAN });
                let _ = writeln!(s, "attr/{0}/SR = {1:.6}\nattr/{0}/PR = {2:.6}\nattr/{0}/NPR = {3:.6}", a.name, m.sr, m.pr, m.npr);
            }
        }
        s
    }
}

/// Area under the success curve: the mean over thresholds `k/20`,
/// `k = 1..=20`, of the fraction of frames with IoU at least the threshold.
/// A perfect track scores 1 and a track that never overlaps scores 0.
pub fn success_rate(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let n = ious.len() as f64;
    let sum: f64 = (1..=SUCCESS_STEPS)
        .map(|k| {
            let th = k as f64 / SUCCESS_STEPS as f64 - 1e-9;
            ious.iter().filter(|&&v| v >= th).count() as f64 / n
        })
        .sum();
    sum / SUCCESS_STEPS as f64
}

/// Metrics of one sequence; boxes are pixel-space `[cx, cy, w, h]`.
pub fn sequence_metrics(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Data(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(*p, *g)).collect();
    let mut pr = 0.0;
    let mut npr = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
        if (dx * dx + dy * dy).sqrt() <= PR_THRESHOLD_PX {
            pr += 1.0;
        }
        let (nx, ny) = (dx / g[2], dy / g[3]);
        if (nx * nx + ny * ny).sqrt() <= NPR_THRESHOLD {
            npr += 1.0;
        }
    }
    Ok(Metrics { sr: success_rate(&ious), pr: pr / n, npr: npr / n })
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len() as f64;
    Metrics {
        sr: ms.iter().map(|m| m.sr).sum::<f64>() / n,
        pr: ms.iter().map(|m| m.pr).sum::<f64>() / n,
        npr: ms.iter().map(|m| m.npr).sum::<f64>() / n,
    }
}

fn to_pixels(b: &BoundingBox, w: usize, h: usize) -> [f64; 4] {
    [b.cx * w as f64, b.cy * h as f64, b.w * w as f64, b.h * h as f64]
}

/// Metrics averaged per sequence and then over sequences, with per-attribute
/// averages over the sequences whose label bit is set.
pub fn evaluate(results: &[TrackResult], gt: &[Vec<BoundingBox>], attrs: &[AttributeLabel]) -> Result<MetricsReport> {
    if results.len() != gt.len() || results.len() != attrs.len() || results.is_empty() {
        return Err(Error::Data(format!(
            "{} results, {} ground-truth sequences, {} labels",
            results.len(),
            gt.len(),
            attrs.len()
        )));
    }
    let per_seq = results
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            let p: Vec<[f64; 4]> = r.boxes.iter().map(|b| to_pixels(b, r.width, r.height)).collect();
            let g: Vec<[f64; 4]> = g.iter().map(|b| to_pixels(b, r.width, r.height)).collect();
            sequence_metrics(&p, &g).map_err(|e| Error::Data(format!("{}: {e}", r.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = attrs[0].len();
    if attrs.iter().any(|a| a.len() != k) {
        return Err(Error::Data("attribute labels differ in length".into()));
    }
    let per_attribute = (0..k)
        .map(|i| {
            let sel: Vec<Metrics> = per_seq.iter().zip(attrs).filter(|(_, a)| a.bits()[i] == 1).map(|(m, _)| *m).collect();
            AttributeMetrics {
                name: ATTRIBUTE_NAMES[i].to_string(),
                num_sequences: sel.len(),
                metrics: (!sel.is_empty()).then(|| mean_metrics(&sel)),
            }
        })
        .collect();
    Ok(MetricsReport { overall: mean_metrics(&per_seq), num_sequences: per_seq.len(), per_attribute })
}

/// Clips a pixel box to the image and keeps it at least one pixel wide.
fn clip_box(b: [f64; 4], w: usize, h: usize) -> [f64; 4] {
    let (wf, hf) = (w as f64, h as f64);
    let bw = b[2].clamp(1.0, wf);
    let bh = b[3].clamp(1.0, hf);
    let cx = b[0].clamp(bw / 2.0, wf - bw / 2.0);
    let cy = b[1].clamp(bh / 2.0, hf - bh / 2.0);
    [cx, cy, bw, bh]
}

/// Tracks `seq` from its frame-0 ground truth, centring each search window
/// on the previous prediction.
pub fn track_sequence(tracker: &Tracker, seq: &Sequence) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(Error::Data(format!("sequence {} has fewer than 2 frames", seq.name)));
    }
    let crop = CropSettings::from_config(&tracker.cfg);
    let p = tracker.cfg.model.patch;
    let (w, h) = (seq.width(), seq.height());
    let b0 = seq.gt_pixels(0);
    let zr = crop.template_region(b0);
    let rgb_template = seq.frames[0].crop_resize(&zr, crop.template_size).to_patches(p)?;
    let event_template = seq.events[0].image().crop_resize(&zr, crop.template_size).to_patches(p)?;
    let mut boxes = vec![seq.groundtruth[0]];
    let mut scores = vec![1.0];
    let mut prev = b0;
    for t in 1..seq.len() {
        let region = crop.search_region(prev);
        let x = PairInputs {
            rgb_template: rgb_template.clone(),
            event_template: event_template.clone(),
            rgb_search: seq.frames[t].crop_resize(&region, crop.search_size).to_patches(p)?,
            event_search: seq.events[t].image().crop_resize(&region, crop.search_size).to_patches(p)?,
        };
        let (head, _) = tracker.predict(&x, ForwardOptions::default())?;
        if !head.score_map.all_finite() {
            return Err(Error::NonFinite { component: "score map".into() });
        }
        let b = clip_box(region.from_crop(head.bbox.as_array()), w, h);
        boxes.push(BoundingBox { cx: b[0] / w as f64, cy: b[1] / h as f64, w: b[2] / w as f64, h: b[3] / h as f64 });
        scores.push(head.peak_score);
        prev = b;
    }
    Ok(TrackResult { name: seq.name.clone(), width: w, height: h, boxes, scores })
}

/// Tracks and scores every sequence of `data`.
pub fn evaluate_dataset(tracker: &Tracker, data: &Dataset) -> Result<(Vec<TrackResult>, MetricsReport)> {
    let results = data.sequences.iter().map(|s| track_sequence(tracker, s)).collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<BoundingBox>> = data.sequences.iter().map(|s| s.groundtruth.clone()).collect();
    let attrs: Vec<AttributeLabel> = data.sequences.iter().map(|s| s.attributes.clone()).collect();
    let report = evaluate(&results, &gt, &attrs)?;
    Ok((results, report))
}

/// Writes one `<name>.txt` results file per sequence.
pub fn write_results(dir: &Path, results: &[TrackResult]) -> Result<()> {
    io_ctx(std::fs::create_dir_all(dir), || format!("creating {}", dir.display()))?;
    for r in results {
        let path = dir.join(format!("{}.txt", r.name));
        io_ctx(std::fs::write(&path, r.to_text()), || format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Batch-mean loss per step.
    pub losses: Vec<LossBreakdown>,
    /// Validation SR per validation round, as `(epoch, sr)`.
    pub validation: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
}

/// Trains the tracker's trainable groups on random pairs from `data`.
/// Validation tracks the training sequences; the parameters of the best
/// validation round are kept. `on_step` sees every step's loss.
pub fn train(
    tracker: &mut Tracker,
    data: &Dataset,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    let cfg = tracker.cfg.clone();
    let tc = &cfg.train;
    if tc.batch_size == 0 || tc.epochs == 0 || tc.steps_per_epoch == 0 {
        return Err(Error::Config("batch size, epochs and steps per epoch must be positive".into()));
    }
    if data.sequences.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let k = cfg.emoe.num_experts;
    if data.sequences.iter().any(|s| s.attributes.len() != k) {
        return Err(Error::Data(format!("attribute labels must have {k} bits")));
    }
    let crop = CropSettings::from_config(&cfg);
    let trainable = |g: &str| tracker.is_trainable(g);
    let mut opt = make_optimizer(&tracker.store, &trainable, &cfg.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_STREAM);
    let mut losses = Vec::with_capacity(tc.total_steps());
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let lr = lr_at_epoch(&cfg.optim, epoch, tc.epochs);
        for _ in 0..tc.steps_per_epoch {
            let mut grads: HashMap<_, Matrix> = HashMap::new();
            let mut bn = Vec::new();
            let mut sum = LossBreakdown::default();
            for _ in 0..tc.batch_size {
                let seq = &data.sequences[rng.random_range(0..data.sequences.len())];
                let frame = rng.random_range(0..seq.len());
                let template =
                    if rng.random_bool(cfg.data.first_frame_template_prob) { 0 } else { rng.random_range(0..seq.len()) };
                let s = load_sample(seq, template, frame, &crop, Some(&mut rng))?;
                let x = tracker.pair_inputs(&s)?;
                let sg = tracker.sample_loss(&x, &s.gt_box, &s.attributes.as_f64())?;
                for (id, g) in sg.grads {
                    match grads.get_mut(&id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            grads.insert(id, g);
                        }
                    }
                }
                bn.extend(sg.bn_stats);
                let l = sg.loss;
                sum = LossBreakdown {
                    cls: sum.cls + l.cls,
                    iou: sum.iou + l.iou,
                    l1: sum.l1 + l.l1,
                    nce: sum.nce + l.nce,
                    attr: sum.attr + l.attr,
                    total: sum.total + l.total,
                };
            }
            let b = tc.batch_size as f64;
            for g in grads.values_mut() {
                *g = g.scale(1.0 / b);
            }
            let mean = LossBreakdown {
                cls: sum.cls / b,
                iou: sum.iou / b,
                l1: sum.l1 / b,
                nce: sum.nce / b,
                attr: sum.attr / b,
                total: sum.total / b,
            };
            opt.step(&mut tracker.store, &grads, lr);
            tracker.update_bn(&bn);
            step += 1;
            on_step(step, &mean);
            losses.push(mean);
        }
        let validate = epoch == tc.epochs || (tc.val_every_epochs > 0 && epoch % tc.val_every_epochs == 0);
        if validate {
            let (_, report) = evaluate_dataset(tracker, data)?;
            let sr = report.overall.sr;
            validation.push((epoch, sr));
            if best.as_ref().is_none_or(|(b, _, _)| sr > *b) {
                best = Some((sr, epoch, tracker.store.clone()));
            }
        }
    }
    let best_epoch = best.map(|(_, e, store)| {
        tracker.store = store;
        e
    });
    Ok(TrainReport { losses, validation, best_epoch })
}
