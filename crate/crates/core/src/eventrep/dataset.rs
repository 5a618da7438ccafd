//! Loads fixture sequences and cuts aligned template/search crops.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};

use super::fixture::Manifest;
use super::stack::{stack_events, EventFrame, RawEvent, TimeWindow};
use super::AttributeLabel;
use crate::bbox::BoundingBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::raster::{CropRegion, Image};

/// One video with every frame decoded and its events stacked per frame.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub events: Vec<EventFrame>,
    /// Normalized to the full image, clamped to the unit square.
    pub groundtruth: Vec<BoundingBox>,
    pub attributes: AttributeLabel,
}

impl Sequence {
    /// Frame `k` receives the events in `[k·period, (k+1)·period)`.
    pub fn load(dir: &Path, k: usize, frame_period_us: u64) -> Result<Sequence> {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let rgb_dir = dir.join("rgb");
        let ev_dir = dir.join("events");
        for d in [&rgb_dir, &ev_dir] {
            if !d.is_dir() {
                return Err(Error::Data(format!("sequence {name}: missing modality directory {}", d.display())));
            }
        }
        let gt_text = read(&dir.join("groundtruth.txt"))?;
        let groundtruth = gt_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| parse_box(l).map_err(|e| Error::Data(format!("{name}/groundtruth.txt line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let attr_text = read(&dir.join("attributes.txt"))?;
        let attributes = AttributeLabel::parse_truncated(attr_text.lines().next().unwrap_or(""), k)
            .map_err(|e| Error::Data(format!("{name}/attributes.txt: {e}")))?;

        let mut frames = Vec::with_capacity(groundtruth.len());
        let mut events = Vec::with_capacity(groundtruth.len());
        for t in 0..groundtruth.len() {
            let png = rgb_dir.join(format!("{t:06}.png"));
            if !png.is_file() {
                return Err(Error::Data(format!("sequence {name}: missing RGB frame {}", png.display())));
            }
            let img = Image::load_png(&png)?;
            let csv = ev_dir.join(format!("{t:06}.csv"));
            if !csv.is_file() {
                return Err(Error::Data(format!("sequence {name}: missing event file {}", csv.display())));
            }
            let raw = parse_events(&csv)?;
            let start = t as u64 * frame_period_us;
            let window = TimeWindow::new(start, start + frame_period_us);
            events.push(stack_events(&raw, window, (img.height(), img.width()))?);
            frames.push(img);
        }
        if let Some(f) = frames.first() {
            if frames.iter().any(|g| g.height() != f.height() || g.width() != f.width()) {
                return Err(Error::Data(format!("sequence {name}: frames differ in size")));
            }
        } else {
            return Err(Error::Data(format!("sequence {name} has no frames")));
        }
        Ok(Sequence { name, frames, events, groundtruth, attributes })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    /// Ground truth of frame `t` as a pixel-space `[cx, cy, w, h]`.
    pub fn gt_pixels(&self, t: usize) -> [f64; 4] {
        let b = self.groundtruth[t];
        let (w, h) = (self.width() as f64, self.height() as f64);
        [b.cx * w, b.cy * h, b.w * w, b.h * h]
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn parse_box(line: &str) -> std::result::Result<BoundingBox, String> {
    let v: Vec<f64> = line
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("expected 4 values, got {}", v.len()));
    }
    let b = BoundingBox { cx: v[0], cy: v[1], w: v[2], h: v[3] };
    b.clamped().map_err(|e| e.to_string())
}

fn parse_events(path: &Path) -> Result<Vec<RawEvent>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,t,p") {
        return Err(Error::Data(format!("{}: missing x,y,t,p header", path.display())));
    }
    let bad = |i: usize| Error::Data(format!("{}: malformed event on line {}", path.display(), i + 2));
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut it = l.split(',').map(str::trim);
            let mut next = || it.next().ok_or_else(|| bad(i));
            let x = next()?.parse().map_err(|_| bad(i))?;
            let y = next()?.parse().map_err(|_| bad(i))?;
            let t = next()?.parse().map_err(|_| bad(i))?;
            let p = next()?.parse().map_err(|_| bad(i))?;
            Ok(RawEvent { x, y, t, p })
        })
        .collect()
}

/// Every sequence listed in a fixture manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Loads the fixture at `root`, keeping the first `k` attribute bits.
    pub fn open(root: &Path, k: usize) -> Result<Dataset> {
        let manifest = Manifest::load(root)?;
        let sequences = manifest
            .sequences
            .iter()
            .map(|s| Sequence::load(&root.join(&s.name), k, manifest.frame_period_us))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root: root.to_path_buf(), manifest, sequences })
    }

    /// Total frames over all sequences.
    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }
}

/// Crop geometry taken from the run configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSettings {
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub center_jitter: f64,
    pub scale_jitter: f64,
}

impl CropSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            template_size: cfg.model.template_size,
            search_size: cfg.model.search_size,
            template_factor: cfg.data.template_factor,
            search_factor: cfg.data.search_factor,
            center_jitter: cfg.data.center_jitter,
            scale_jitter: cfg.data.scale_jitter,
        }
    }

    /// Template window centred on a pixel-space box.
    pub fn template_region(&self, b: [f64; 4]) -> CropRegion {
        CropRegion { cx: b[0], cy: b[1], side: self.template_factor * box_side(b) }
    }

    /// Search window centred on a pixel-space box, without jitter.
    pub fn search_region(&self, b: [f64; 4]) -> CropRegion {
        CropRegion { cx: b[0], cy: b[1], side: self.search_factor * box_side(b) }
    }
}

/// Geometric-mean side of a pixel-space box, floored at one pixel.
pub fn box_side(b: [f64; 4]) -> f64 {
    (b[2] * b[3]).sqrt().max(1.0)
}

/// One aligned training or evaluation pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub rgb_template: Image,
    pub rgb_search: Image,
    pub event_template: EventFrame,
    pub event_search: EventFrame,
    /// Ground truth in normalized search-crop coordinates.
    pub gt_box: BoundingBox,
    pub attributes: AttributeLabel,
    pub template_region: CropRegion,
    pub search_region: CropRegion,
}

/// Cuts the template from `template_frame` around its ground truth and the
/// search region from `search_frame`. With `jitter`, the search window is
/// rescaled and shifted at random while keeping the target fully inside.
pub fn load_sample(
    seq: &Sequence,
    template_frame: usize,
    search_frame: usize,
    crop: &CropSettings,
    jitter: Option<&mut dyn RngCore>,
) -> Result<Sample> {
    if template_frame >= seq.len() || search_frame >= seq.len() {
        return Err(Error::Data(format!(
            "frame index out of range for {} ({} frames): {template_frame}, {search_frame}",
            seq.name,
            seq.len()
        )));
    }
    let zb = seq.gt_pixels(template_frame);
    let xb = seq.gt_pixels(search_frame);
    let template_region = crop.template_region(zb);
    let mut search_region = crop.search_region(xb);
    if let Some(rng) = jitter {
        let s = box_side(xb);
        let u = rng.random_range(-crop.scale_jitter..=crop.scale_jitter);
        search_region.side *= u.exp();
        search_region.side = search_region.side.max(xb[2].max(xb[3]));
        let dx = rng.random_range(-1.0..=1.0) * crop.center_jitter * s;
        let dy = rng.random_range(-1.0..=1.0) * crop.center_jitter * s;
        let mx = ((search_region.side - xb[2]) / 2.0).max(0.0);
        let my = ((search_region.side - xb[3]) / 2.0).max(0.0);
        search_region.cx = xb[0] + dx.clamp(-mx, mx);
        search_region.cy = xb[1] + dy.clamp(-my, my);
    }
    let g = search_region.to_crop(xb);
    let gt_box = BoundingBox::new(g[0], g[1], g[2], g[3])?;
    Ok(Sample {
        rgb_template: seq.frames[template_frame].crop_resize(&template_region, crop.template_size),
        rgb_search: seq.frames[search_frame].crop_resize(&search_region, crop.search_size),
        event_template: EventFrame(seq.events[template_frame].image().crop_resize(&template_region, crop.template_size)),
        event_search: EventFrame(seq.events[search_frame].image().crop_resize(&search_region, crop.search_size)),
        gt_box,
        attributes: seq.attributes.clone(),
        template_region,
        search_region,
    })
}
