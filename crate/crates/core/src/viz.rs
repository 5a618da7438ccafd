//! Image exports of attention, score and expert-magnitude maps, plus the
//! gating weights as text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_ctx, Result};
use crate::eventrep::Sample;
use crate::model::{ForwardOptions, Tracker};
use crate::raster::Image;
use crate::tensor::Matrix;
use crate::emoe::AttributeScores;

pub const GATING_FILE: &str = "gating.txt";

#[derive(Clone, Debug)]
pub struct VizOutput {
    /// Image files in write order: attention maps, score map, expert maps.
    pub images: Vec<PathBuf>,
    pub gating_file: PathBuf,
    pub scores: Vec<AttributeScores>,
}

/// Blends an `(S, S)` map, scaled to its maximum, as red over the
/// grey-level search crop.
fn overlay(crop: &Image, map: &Matrix) -> Image {
    let (h, w) = (crop.height(), crop.width());
    let side = map.rows();
    let m = map.max_abs();
    let mut out = Image::new(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let v = if m > 0.0 { map.get(y * side / h, x * side / w) / m } else { 0.0 };
            let grey = 0.299 * crop.get(y, x, 0) + 0.587 * crop.get(y, x, 1) + 0.114 * crop.get(y, x, 2);
            let base = 0.5 * grey;
            out.pixel_mut(y, x).copy_from_slice(&[base + 0.5 * v, base, base]);
        }
    }
    out
}

/// Mean over search tokens of both modalities of a per-token value, on the
/// `(S, S)` grid.
fn search_grid(t: &Tracker, per_token: impl Fn(usize) -> f64) -> Matrix {
    let side = t.side();
    let (rs, es) = (t.layout.rgb_search(), t.layout.event_search());
    Matrix::from_fn(side, side, |r, c| {
        let i = r * side + c;
        0.5 * (per_token(rs.start + i) + per_token(es.start + i))
    })
}

/// Writes `attention_l<l>.png` per injected layer, `score.png`,
/// `expert_<i>.png` for the last injected layer and the gating sidecar.
pub fn visualize(t: &Tracker, sample: &Sample, out_dir: &Path) -> Result<VizOutput> {
    let x = t.pair_inputs(sample)?;
    let out = t.forward(&x, false, ForwardOptions { record_attention: true, ..Default::default() })?;
    io_ctx(fs::create_dir_all(out_dir), || format!("creating {}", out_dir.display()))?;
    let g = &out.pass.g;
    let crop = &sample.rgb_search;
    let mut images = Vec::new();
    let mut write = |name: String, img: Image| -> Result<()> {
        let p = out_dir.join(name);
        img.save_png(&p)?;
        images.push(p);
        Ok(())
    };

    // attention received by search tokens, averaged over heads and over
    // template queries of both modalities
    let injected = t.injected_layers();
    let (rz, ez) = (t.layout.rgb_template(), t.layout.event_template());
    for (l, maps) in out.pass.attention.iter().filter(|(l, _)| injected.contains(l)) {
        let queries: Vec<usize> = rz.clone().chain(ez.clone()).collect();
        let received = |k: usize| {
            let mut s = 0.0;
            for a in maps {
                let a = g.value(*a);
                s += queries.iter().map(|&q| a.get(q, k)).sum::<f64>();
            }
            s / (maps.len() * queries.len()) as f64
        };
        write(format!("attention_l{l}.png"), overlay(crop, &search_grid(t, received)))?;
    }

    let head = out.head(t.side());
    write("score.png".into(), overlay(crop, &head.score_map))?;

    if let Some((_, _, feats)) = out.emoe.last() {
        for (i, h) in feats.iter().enumerate() {
            let h = g.value(*h);
            let norm = |k: usize| h.row(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            write(format!("expert_{}.png", i + 1), overlay(crop, &search_grid(t, norm)))?;
        }
    }

    let scores = out.scores();
    let mut text = String::new();
    for s in &scores {
        let ws: Vec<String> = s.w.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(text, "layer {}: {}", s.layer, ws.join(" "));
    }
    let gating_file = out_dir.join(GATING_FILE);
    io_ctx(fs::write(&gating_file, text), || format!("writing {}", gating_file.display()))?;
    Ok(VizOutput { images, gating_file, scores })
}

/// Parses a gating sidecar back into per-layer scores.
pub fn parse_gating(text: &str) -> Option<Vec<AttributeScores>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (head, rest) = line.split_once(':')?;
            let layer = head.trim().strip_prefix("layer ")?.parse().ok()?;
            let w = rest.split_whitespace().map(|v| v.parse().ok()).collect::<Option<Vec<f64>>>()?;
            Some(AttributeScores { layer, w })
        })
        .collect()
}
