//! Procedurally rendered sequences for smoke runs, benchmarks and tests.
//!
//! Frames are never stored: a frame path is a virtual name and the pixels
//! are recomputed from `(seed, dataset, sequence, frame)` on demand.

use std::path::PathBuf;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::config::SyntheticSpec;
use crate::datasets::{Dataset, DatasetKind, Sequence, SequenceDataset};
use crate::geometry::BBox;
use crate::rng::{rng_for, uniform, Stage};

fn category_color(k: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [220, 60, 40],
        [40, 170, 70],
        [50, 90, 220],
        [230, 200, 40],
        [170, 60, 200],
        [40, 200, 200],
        [240, 140, 30],
        [120, 120, 120],
    ];
    PALETTE[k % PALETTE.len()]
}

fn trajectory(spec: &SyntheticSpec, seed: u64, dataset_id: u64, seq: usize) -> Vec<BBox> {
    let mut rng = rng_for(seed, dataset_id, 0, seq as u64, Stage::Synthetic);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let short = fw.min(fh);
    let side = uniform(&mut rng, 0.08, 0.35) * short;
    let aspect = uniform(&mut rng, 0.5, 2.0);
    let (w, h) = ((side * aspect.sqrt()).min(fw - 2.0), (side / aspect.sqrt()).min(fh - 2.0));
    let mut x = uniform(&mut rng, 0.0, fw - w);
    let mut y = uniform(&mut rng, 0.0, fh - h);
    let mut vx = uniform(&mut rng, -0.02, 0.02) * fw;
    let mut vy = uniform(&mut rng, -0.02, 0.02) * fh;
    let mut out = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        out.push(BBox { x, y, w, h });
        if x + vx < 0.0 || x + vx + w > fw {
            vx = -vx;
        }
        if y + vy < 0.0 || y + vy + h > fh {
            vy = -vy;
        }
        x = (x + vx).clamp(0.0, fw - w);
        y = (y + vy).clamp(0.0, fh - h);
    }
    out
}

/// Builds the annotation side of a synthetic dataset.
pub fn synthetic_dataset(name: &str, spec: &SyntheticSpec, seed: u64, dataset_id: u64) -> Dataset {
    let sequences = (0..spec.sequences)
        .map(|s| {
            let boxes = trajectory(spec, seed, dataset_id, s);
            Sequence {
                name: format!("seq-{s:04}"),
                frames: (0..spec.frames)
                    .map(|f| PathBuf::from(format!("synthetic/{name}/seq-{s:04}/{f:05}.png")))
                    .collect(),
                boxes: boxes.into_iter().map(Some).collect(),
                category: Some(format!("class-{}", s % spec.categories)),
            }
        })
        .collect();
    Dataset {
        name: name.to_string(),
        kind: DatasetKind::Sequence(SequenceDataset { sequences }),
    }
}

/// Renders one frame: a textured background with the sequence's object
/// drawn as a striped ellipse inside its box.
pub fn render_frame(
    spec: &SyntheticSpec,
    seed: u64,
    dataset_id: u64,
    seq: usize,
    frame: usize,
    target: &BBox,
) -> RgbImage {
    let mut rng = rng_for(seed, dataset_id, 1, seq as u64, Stage::Synthetic);
    let base: [f64; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let fx = rng.random_range(0.01..0.05);
    let fy = rng.random_range(0.01..0.05);
    let color = category_color(seq % spec.categories);
    let (cx, cy) = (target.x + target.w / 2.0, target.y + target.h / 2.0);
    let (rx, ry) = (target.w / 2.0, target.h / 2.0);
    let phase = frame as f64 * 0.2;
    let col: Vec<f64> = (0..spec.width).map(|x| ((x as f64 + 0.5) * fx + phase).sin()).collect();
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut img = RgbImage::new(spec.width, spec.height);
    let buf: &mut [u8] = img.as_mut();
    for y in 0..h {
        let amp = 40.0 * ((y as f64 + 0.5) * fy).cos();
        let line = &mut buf[y * w * 3..(y + 1) * w * 3];
        for (px, t) in line.chunks_exact_mut(3).zip(&col) {
            for c in 0..3 {
                // Non-negative after the clamp, so +0.5 and truncation rounds.
                px[c] = ((base[c] + amp * t).clamp(0.0, 255.0) + 0.5) as u8;
            }
        }
    }
    let y0 = target.y.floor().max(0.0) as u32;
    let y1 = (target.bottom().ceil().max(0.0) as u32).min(spec.height);
    let x0 = target.x.floor().max(0.0) as u32;
    let x1 = (target.right().ceil().max(0.0) as u32).min(spec.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = ((px - cx) / rx, (py - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                let stripe = if ((px - target.x) / 6.0).floor() as i64 % 2 == 0 { 1.0 } else { 0.7 };
                img.put_pixel(x, y, Rgb(color.map(|c| (c as f64 * stripe).round() as u8)));
            }
        }
    }
    img
}
