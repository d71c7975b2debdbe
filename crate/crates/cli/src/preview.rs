//! Sample grid rendering.
//!
//! Each tile is a search patch inside a border whose colour encodes the
//! crop kind. The target box is outlined in yellow, clipped to the patch.
//! γ and the other per-tile details go to a text legend.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use trackaug::geometry::CropKind;
use trackaug::pipeline::TrainingSample;

pub const BORDER: u32 = 4;
pub const BOX_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

pub fn kind_color(kind: CropKind) -> Rgb<u8> {
    match kind {
        CropKind::Normal => Rgb([0, 200, 0]),
        CropKind::Boundary => Rgb([230, 0, 0]),
        CropKind::Legacy => Rgb([0, 80, 255]),
        CropKind::Template => Rgb([200, 200, 200]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreviewLayout {
    pub rows: u32,
    pub cols: u32,
    pub tile: u32,
    pub patch: u32,
}

impl PreviewLayout {
    /// Top-left corner of the patch area of tile `i`.
    pub fn patch_origin(&self, i: usize) -> (u32, u32) {
        let (r, c) = (i as u32 / self.cols, i as u32 % self.cols);
        (c * self.tile + BORDER, r * self.tile + BORDER)
    }
}

pub fn legend_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".legend.txt");
    PathBuf::from(s)
}

/// Outlines `[x0, x1) x [y0, y1)` in patch pixels, clipped to the patch.
fn outline(img: &mut RgbImage, origin: (u32, u32), n: u32, b: [f64; 4]) {
    let clamp = |v: f64| v.floor().clamp(0.0, n as f64 - 1.0) as u32;
    let (x0, y0) = (clamp(b[0]), clamp(b[1]));
    let (x1, y1) = (clamp(b[0] + b[2] - 1e-9), clamp(b[1] + b[3] - 1e-9));
    let mut put = |x: u32, y: u32| img.put_pixel(origin.0 + x, origin.1 + y, BOX_COLOR);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

pub fn compose(samples: &[TrainingSample]) -> (RgbImage, PreviewLayout) {
    let n = samples.len().max(1);
    let cols = (n as f64).sqrt().ceil() as u32;
    let rows = (n as u32).div_ceil(cols);
    let patch = samples.first().map_or(16, |s| s.search.size());
    let tile = patch + 2 * BORDER;
    let layout = PreviewLayout { rows, cols, tile, patch };
    let mut img = RgbImage::from_pixel(cols * tile, rows * tile, Rgb([32, 32, 32]));
    for (i, s) in samples.iter().enumerate() {
        let (ox, oy) = layout.patch_origin(i);
        let color = kind_color(s.record.kind);
        for y in oy - BORDER..oy + patch + BORDER {
            for x in ox - BORDER..ox + patch + BORDER {
                img.put_pixel(x, y, color);
            }
        }
        image::imageops::replace(&mut img, &s.search.pixels, ox as i64, oy as i64);
        outline(&mut img, (ox, oy), patch, s.search_box.to_array());
    }
    (img, layout)
}

pub fn legend(samples: &[TrainingSample], layout: &PreviewLayout) -> String {
    let mut s = String::from("# tile row col epoch index kind gamma sequence mixed\n");
    for (i, t) in samples.iter().enumerate() {
        let r = &t.record;
        let _ = writeln!(
            s,
            "{i} {} {} {} {} {} {:.4} {} {}",
            i as u32 / layout.cols,
            i as u32 % layout.cols,
            r.epoch,
            r.index,
            r.kind.as_str(),
            r.gamma,
            r.sequence_id,
            r.mix.as_ref().is_some_and(|m| m.applied)
        );
    }
    s
}
