//! Deterministic synthetic RGB + event sequences in a VisEvent-like layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/<seq>/rgb/%06d.png
//! <out>/<seq>/events/%06d.csv      x,y,t,p
//! <out>/<seq>/groundtruth.txt      cx,cy,w,h per frame, normalized
//! <out>/<seq>/attributes.txt       K comma-separated 0/1 digits
//! ```
//!
//! Each attribute bit switches on a matching degradation, so labels are
//! causally tied to what the frames show.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stack::RawEvent;
use crate::error::{io_ctx, Error, Result};
use crate::raster::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "emoe-fixture-v1";
const FRAME_PERIOD_US: u64 = 33_333;
/// Log-intensity change that fires one event.
const CONTRAST_THRESHOLD: f64 = 0.1;
const MAX_EVENTS_PER_PIXEL: usize = 20;
const BLUR_LENGTH: usize = 9;
const SCALE_RAMP: f64 = 1.6;
const OCCLUDED_FRACTION: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct FixtureOptions {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames_per_seq: usize,
    pub image_size: usize,
    pub force: bool,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self { seed: 0, num_sequences: 8, frames_per_seq: 32, image_size: 160, force: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub num_sequences: usize,
    pub frames_per_seq: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub frame_period_us: u64,
    pub contrast_threshold: f64,
    pub sequences: Vec<SequenceRecord>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let s = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&s).map_err(|e| Error::Data(format!("malformed {}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Error::Data(format!("unsupported fixture format {:?}", m.format)));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub name: String,
    pub attributes: Vec<u8>,
    pub degradations: DegradationRecord,
    pub num_events: usize,
}

/// What the generator actually applied to a sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    /// Global gain at the first and last frame.
    pub illumination_gain: Option<[f64; 2]>,
    /// Box-filter length in pixels.
    pub motion_blur_length: Option<usize>,
    pub motion_blur_axis: Option<String>,
    /// Target size multiplier at the first and last frame.
    pub scale_ramp: Option<[f64; 2]>,
    pub occluded_frames: Vec<usize>,
    /// Smallest fraction of the target covered on an occluded frame.
    pub min_occlusion_coverage: Option<f64>,
}

/// Writes the fixture and returns its manifest. Refuses to touch an
/// existing fixture unless `opts.force` is set.
pub fn generate_fixture(out_dir: &Path, opts: &FixtureOptions) -> Result<Manifest> {
    if opts.num_sequences == 0 || opts.frames_per_seq < 2 {
        return Err(Error::Config("fixture needs at least one sequence of at least two frames".into()));
    }
    if opts.image_size < 96 {
        return Err(Error::Config("fixture image size must be at least 96 pixels".into()));
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        if !opts.force {
            return Err(Error::AlreadyExists(manifest_path));
        }
        if let Ok(old) = Manifest::load(out_dir) {
            for s in old.sequences {
                let p = out_dir.join(&s.name);
                if p.is_dir() {
                    io_ctx(fs::remove_dir_all(&p), || format!("removing {}", p.display()))?;
                }
            }
        }
    }
    io_ctx(fs::create_dir_all(out_dir), || format!("creating {}", out_dir.display()))?;

    let mut sequences = Vec::with_capacity(opts.num_sequences);
    for i in 0..opts.num_sequences {
        let name = format!("seq_{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1));
        let plan = SequencePlan::sample(&mut rng, opts);
        let record = write_sequence(&out_dir.join(&name), &name, &plan, opts)?;
        sequences.push(record);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        seed: opts.seed,
        num_sequences: opts.num_sequences,
        frames_per_seq: opts.frames_per_seq,
        image_width: opts.image_size,
        image_height: opts.image_size,
        frame_period_us: FRAME_PERIOD_US,
        contrast_threshold: CONTRAST_THRESHOLD,
        sequences,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io_ctx(fs::write(&manifest_path, json + "\n"), || format!("writing {}", manifest_path.display()))?;
    Ok(manifest)
}

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

struct SequencePlan {
    attrs: [u8; 4],
    frames: usize,
    size: usize,
    bg: [f64; 3],
    grad: [f64; 2],
    blobs: Vec<Blob>,
    target_color: [f64; 3],
    ellipse: bool,
    stripe_period: f64,
    base_w: f64,
    base_h: f64,
    center: [f64; 2],
    amp: [f64; 2],
    omega: [f64; 2],
    phase: [f64; 2],
    gain: [f64; 2],
    scale: [f64; 2],
    blur_axis: Option<usize>,
    occluded: Vec<usize>,
    occluder_left: bool,
}

impl SequencePlan {
    fn sample(rng: &mut ChaCha8Rng, opts: &FixtureOptions) -> Self {
        let size = opts.image_size;
        let frames = opts.frames_per_seq;
        let attrs: [u8; 4] = std::array::from_fn(|_| rng.random_bool(0.5) as u8);
        let u = |rng: &mut ChaCha8Rng, a: f64, b: f64| a + (b - a) * rng.random::<f64>();

        let bg = [u(rng, 0.12, 0.32), u(rng, 0.12, 0.32), u(rng, 0.12, 0.32)];
        let grad = [u(rng, -0.12, 0.12), u(rng, -0.12, 0.12)];
        let blobs = (0..4)
            .map(|_| Blob {
                cx: u(rng, 0.0, size as f64),
                cy: u(rng, 0.0, size as f64),
                r: u(rng, 12.0, 36.0),
                color: [u(rng, -0.1, 0.15), u(rng, -0.1, 0.15), u(rng, -0.1, 0.15)],
            })
            .collect();

        let mut target_color = [0.95, u(rng, 0.35, 0.6), u(rng, 0.05, 0.25)];
        let rot = rng.random_range(0..3);
        target_color.rotate_left(rot);
        let ellipse = rng.random_bool(0.5);
        let stripe_period = u(rng, 5.0, 8.0);
        let base_w = u(rng, 22.0, 28.0);
        let base_h = base_w * u(rng, 0.8, 1.25);

        let scale = if attrs[2] == 1 {
            if rng.random_bool(0.5) { [1.0, SCALE_RAMP] } else { [SCALE_RAMP, 1.0] }
        } else {
            [1.0, 1.0]
        };
        let gain = if attrs[0] == 1 {
            if rng.random_bool(0.5) { [1.0, u(rng, 0.35, 0.5)] } else { [u(rng, 0.4, 0.5), 1.0] }
        } else {
            [1.0, 1.0]
        };

        let half_max = 0.5 * base_w.max(base_h) * scale[0].max(scale[1]);
        let mut amp = [u(rng, 8.0, 26.0), u(rng, 8.0, 26.0)];
        let blur_axis = if attrs[1] == 1 {
            let axis = if amp[0] >= amp[1] { 0 } else { 1 };
            amp[axis] = amp[axis].max(20.0);
            Some(axis)
        } else {
            None
        };
        let margin = 4.0;
        let center = std::array::from_fn(|k| {
            let lo = amp[k] + half_max + margin;
            let hi = size as f64 - amp[k] - half_max - margin;
            if hi > lo { u(rng, lo, hi) } else { size as f64 / 2.0 }
        });
        let omega = [
            std::f64::consts::TAU / u(rng, 24.0, 48.0),
            std::f64::consts::TAU / u(rng, 24.0, 48.0),
        ];
        let phase = [u(rng, 0.0, std::f64::consts::TAU), u(rng, 0.0, std::f64::consts::TAU)];

        let occluded = if attrs[3] == 1 {
            let len = ((OCCLUDED_FRACTION * frames as f64).ceil() as usize).clamp(1, frames - 1);
            let start = rng.random_range(1..=frames - len);
            (start..start + len).collect()
        } else {
            Vec::new()
        };
        let occluder_left = rng.random_bool(0.5);

        Self {
            attrs,
            frames,
            size,
            bg,
            grad,
            blobs,
            target_color,
            ellipse,
            stripe_period,
            base_w,
            base_h,
            center,
            amp,
            omega,
            phase,
            gain,
            scale,
            blur_axis,
            occluded,
            occluder_left,
        }
    }

    fn progress(&self, t: usize) -> f64 {
        t as f64 / (self.frames - 1) as f64
    }

    /// Target box `[cx, cy, w, h]` in pixels at frame `t`.
    fn target_box(&self, t: usize) -> [f64; 4] {
        let p = self.progress(t);
        let s = self.scale[0] + (self.scale[1] - self.scale[0]) * p;
        let c: [f64; 2] =
            std::array::from_fn(|k| self.center[k] + self.amp[k] * (self.omega[k] * t as f64 + self.phase[k]).sin());
        [c[0], c[1], self.base_w * s, self.base_h * s]
    }

    fn gain(&self, t: usize) -> f64 {
        self.gain[0] + (self.gain[1] - self.gain[0]) * self.progress(t)
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let n = self.size as f64;
        let g = self.grad[0] * (x / n - 0.5) + self.grad[1] * (y / n - 0.5);
        let mut c = [self.bg[0] + g, self.bg[1] + g, self.bg[2] + g];
        for b in &self.blobs {
            let d2 = ((x - b.cx).powi(2) + (y - b.cy).powi(2)) / (b.r * b.r);
            let w = (-d2).exp();
            for k in 0..3 {
                c[k] += w * b.color[k];
            }
        }
        c
    }

    /// Whether the point is on the target shape of box `b`.
    fn on_target(&self, b: &[f64; 4], x: f64, y: f64) -> bool {
        let dx = (x - b[0]) / (b[2] / 2.0);
        let dy = (y - b[1]) / (b[3] / 2.0);
        if self.ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }

    /// Occluder rectangle `[x1, y1, x2, y2]` covering one half of the target.
    fn occluder(&self, b: &[f64; 4]) -> [f64; 4] {
        let (x1, x2) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
        let (y1, y2) = (b[1] - b[3] / 2.0 - 2.0, b[1] + b[3] / 2.0 + 2.0);
        if self.occluder_left {
            [x1 - 3.0, y1, b[0], y2]
        } else {
            [b[0], y1, x2 + 3.0, y2]
        }
    }

    /// Renders frame `t`; returns the image and the fraction of target
    /// samples hidden by the occluder.
    fn render(&self, t: usize) -> (Image, f64) {
        let n = self.size;
        let b = self.target_box(t);
        let occ = self.occluded.contains(&t).then(|| self.occluder(&b));
        let mut img = Image::new(n, n, 3);
        let (mut on, mut hidden) = (0usize, 0usize);
        const SUB: [f64; 2] = [0.25, 0.75];
        for y in 0..n {
            for x in 0..n {
                let mut acc = [0.0; 3];
                for sy in SUB {
                    for sx in SUB {
                        let (px, py) = (x as f64 + sx, y as f64 + sy);
                        let inside = self.on_target(&b, px, py);
                        let covered = occ.is_some_and(|o| px >= o[0] && px <= o[2] && py >= o[1] && py <= o[3]);
                        if inside {
                            on += 1;
                            hidden += covered as usize;
                        }
                        let c = if covered {
                            let checker = ((px / 6.0).floor() as i64 + (py / 6.0).floor() as i64).rem_euclid(2);
                            let v = 0.5 + 0.08 * checker as f64;
                            [v, v, v]
                        } else if inside {
                            let rel = px - (b[0] - b[2] / 2.0);
                            let band = ((rel / self.stripe_period).floor() as i64).rem_euclid(2) as f64;
                            let m = 1.0 - 0.3 * band;
                            [self.target_color[0] * m, self.target_color[1] * m, self.target_color[2] * m]
                        } else {
                            self.background(px, py)
                        };
                        for k in 0..3 {
                            acc[k] += c[k] / 4.0;
                        }
                    }
                }
                img.pixel_mut(y, x).copy_from_slice(&acc);
            }
        }
        let g = self.gain(t);
        img.data_mut().iter_mut().for_each(|v| *v *= g);
        if let Some(axis) = self.blur_axis {
            img = box_blur(&img, axis, BLUR_LENGTH);
        }
        img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let coverage = if on == 0 { 0.0 } else { hidden as f64 / on as f64 };
        (img.quantized(), coverage)
    }
}

/// Directional box filter along `axis` (0 = horizontal), edge-clamped.
fn box_blur(img: &Image, axis: usize, len: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (len / 2) as isize;
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut s = 0.0;
                for d in -r..=r {
                    let (yy, xx) = if axis == 0 {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    s += img.get(yy as usize, xx as usize, k);
                }
                out.set(y, x, k, s / (2 * r + 1) as f64);
            }
        }
    }
    out
}

fn log_intensity(img: &Image) -> Vec<f64> {
    (0..img.height() * img.width())
        .map(|i| {
            let p = &img.data()[i * 3..i * 3 + 3];
            (0.01 + 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).ln()
        })
        .collect()
}

/// Emits threshold-crossing events for the change from the per-pixel
/// reference to `current`, updating the reference. Timestamps fall in
/// `[t0, t0 + period)`.
fn emit_events(reference: &mut [f64], current: &[f64], width: usize, t0: u64) -> Vec<RawEvent> {
    let mut events = Vec::new();
    for (i, (r, &l)) in reference.iter_mut().zip(current).enumerate() {
        let delta = l - *r;
        let n = (((delta.abs() + 1e-12) / CONTRAST_THRESHOLD).floor() as usize).min(MAX_EVENTS_PER_PIXEL);
        if n == 0 {
            continue;
        }
        let p: i8 = if delta > 0.0 { 1 } else { -1 };
        *r += p as f64 * n as f64 * CONTRAST_THRESHOLD;
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        for j in 0..n {
            let t = t0 + (j as u64 + 1) * FRAME_PERIOD_US / (n as u64 + 1);
            events.push(RawEvent { x, y, t, p });
        }
    }
    events.sort_by_key(|e| e.t);
    events
}

fn write_sequence(dir: &Path, name: &str, plan: &SequencePlan, opts: &FixtureOptions) -> Result<SequenceRecord> {
    let rgb_dir = dir.join("rgb");
    let ev_dir = dir.join("events");
    io_ctx(fs::create_dir_all(&rgb_dir), || format!("creating {}", rgb_dir.display()))?;
    io_ctx(fs::create_dir_all(&ev_dir), || format!("creating {}", ev_dir.display()))?;

    let n = opts.image_size as f64;
    let mut gt = String::new();
    let mut reference: Vec<f64> = Vec::new();
    let mut num_events = 0;
    let mut min_cov: Option<f64> = None;
    for t in 0..plan.frames {
        let (img, coverage) = plan.render(t);
        if plan.occluded.contains(&t) {
            min_cov = Some(min_cov.map_or(coverage, |m: f64| m.min(coverage)));
        }
        img.save_png(&rgb_dir.join(format!("{t:06}.png")))?;

        let logi = log_intensity(&img);
        let events = if t == 0 {
            reference = logi;
            Vec::new()
        } else {
            emit_events(&mut reference, &logi, opts.image_size, t as u64 * FRAME_PERIOD_US)
        };
        num_events += events.len();
        let path = ev_dir.join(format!("{t:06}.csv"));
        let f = io_ctx(fs::File::create(&path), || format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "x,y,t,p")?;
            for e in &events {
                writeln!(w, "{},{},{},{}", e.x, e.y, e.t, e.p)?;
            }
            w.flush()
        };
        io_ctx(write(), || format!("writing {}", path.display()))?;

        let b = plan.target_box(t);
        let (x1, x2) = ((b[0] - b[2] / 2.0).max(0.0), (b[0] + b[2] / 2.0).min(n));
        let (y1, y2) = ((b[1] - b[3] / 2.0).max(0.0), (b[1] + b[3] / 2.0).min(n));
        gt.push_str(&format!(
            "{:.6},{:.6},{:.6},{:.6}\n",
            (x1 + x2) / 2.0 / n,
            (y1 + y2) / 2.0 / n,
            (x2 - x1) / n,
            (y2 - y1) / n
        ));
    }
    let gt_path = dir.join("groundtruth.txt");
    io_ctx(fs::write(&gt_path, gt), || format!("writing {}", gt_path.display()))?;
    let attr_line = plan.attrs.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
    let attr_path = dir.join("attributes.txt");
    io_ctx(fs::write(&attr_path, attr_line + "\n"), || format!("writing {}", attr_path.display()))?;

    let degradations = DegradationRecord {
        illumination_gain: (plan.attrs[0] == 1).then_some(plan.gain),
        motion_blur_length: plan.blur_axis.map(|_| BLUR_LENGTH),
        motion_blur_axis: plan.blur_axis.map(|a| if a == 0 { "horizontal" } else { "vertical" }.to_string()),
        scale_ramp: (plan.attrs[2] == 1).then_some(plan.scale),
        occluded_frames: plan.occluded.clone(),
        min_occlusion_coverage: min_cov,
    };
    Ok(SequenceRecord { name: name.to_string(), attributes: plan.attrs.to_vec(), degradations, num_events })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_follow_log_intensity_threshold() {
        let mut reference = vec![0.0, 0.0, 0.0];
        let current = vec![0.05, 0.25, -0.31];
        let ev = emit_events(&mut reference, &current, 3, 1000);
        // pixel 1: two positive events, pixel 2: three negative events
        assert_eq!(ev.iter().filter(|e| e.x == 1 && e.p == 1).count(), 2);
        assert_eq!(ev.iter().filter(|e| e.x == 2 && e.p == -1).count(), 3);
        assert_eq!(ev.iter().filter(|e| e.x == 0).count(), 0);
        assert!(ev.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(ev.iter().all(|e| e.t >= 1000 && e.t < 1000 + FRAME_PERIOD_US));
        assert!((reference[1] - 0.2).abs() < 1e-12);
        assert!((reference[2] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::from_vec(5, 5, 1, vec![0.4; 25]);
        let b = box_blur(&img, 0, 5);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
