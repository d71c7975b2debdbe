//! On-disk dataset fixtures.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

/// Gradient frame with a solid rectangle at `b`.
pub fn frame(w: u32, h: u32, b: [u32; 4], color: [u8; 3]) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        if x >= b[0] && x < b[0] + b[2] && y >= b[1] && y < b[1] + b[3] {
            Rgb(color)
        } else {
            Rgb([(x * 255 / w) as u8, (y * 255 / h) as u8, 90])
        }
    })
}

/// Two sequences of eight 96x72 frames, one per category, the second
/// with the target absent in frame 3.
pub fn sequence_fixture(root: &Path) -> PathBuf {
    let dir = root.join("seqs");
    for (s, (cat, color)) in [("car", [220, 30, 30]), ("dog", [30, 30, 220])].iter().enumerate() {
        let seq = dir.join(format!("seq{s}"));
        fs::create_dir_all(seq.join("img")).unwrap();
        fs::write(seq.join("category.txt"), cat).unwrap();
        let mut gt = String::new();
        for f in 0..8u32 {
            let b = [10 + 4 * f, 12 + 2 * f, 20 + s as u32 * 4, 16];
            frame(96, 72, b, *color).save(seq.join(format!("img/{f:04}.png"))).unwrap();
            if s == 1 && f == 3 {
                gt.push_str("0,0,0,0\n");
            } else {
                gt.push_str(&format!("{},{},{},{}\n", b[0], b[1], b[2], b[3]));
            }
        }
        fs::write(seq.join("groundtruth.txt"), gt).unwrap();
    }
    dir
}

/// Three 80x64 images with five annotated objects in two categories.
pub fn coco_fixture(root: &Path) -> PathBuf {
    let dir = root.join("coco");
    fs::create_dir_all(dir.join("images")).unwrap();
    let boxes: [(u64, [u32; 4], u64); 5] = [
        (1, [8, 8, 20, 16], 1),
        (1, [40, 30, 18, 20], 2),
        (2, [20, 10, 24, 24], 1),
        (3, [5, 30, 16, 16], 2),
        (3, [50, 6, 14, 22], 1),
    ];
    for id in 1..=3u64 {
        let mut img = frame(80, 64, [0, 0, 0, 0], [0, 0, 0]);
        for (_, b, c) in boxes.iter().filter(|(i, _, _)| *i == id) {
            let color = if *c == 1 { Rgb([240, 200, 0]) } else { Rgb([0, 200, 120]) };
            for y in b[1]..b[1] + b[3] {
                for x in b[0]..b[0] + b[2] {
                    img.put_pixel(x, y, color);
                }
            }
        }
        img.save(dir.join(format!("images/{id}.png"))).unwrap();
    }
    let images: Vec<String> = (1..=3)
        .map(|id| format!(r#"{{"id":{id},"file_name":"{id}.png","width":80,"height":64}}"#))
        .collect();
    let anns: Vec<String> = boxes
        .iter()
        .enumerate()
        .map(|(k, (i, b, c))| {
            format!(
                r#"{{"id":{},"image_id":{i},"bbox":[{},{},{},{}],"category_id":{c}}}"#,
                k + 1,
                b[0],
                b[1],
                b[2],
                b[3]
            )
        })
        .collect();
    let json = format!(
        r#"{{"images":[{}],"annotations":[{}],"categories":[{{"id":1,"name":"cup"}},{{"id":2,"name":"plant"}}]}}"#,
        images.join(","),
        anns.join(",")
    );
    let path = dir.join("annotations.json");
    fs::write(&path, json).unwrap();
    path
}

/// Config text over both fixtures, written next to them.
pub fn write_config(root: &Path, samples: u64, epochs: u64, extra: &str) -> PathBuf {
    sequence_fixture(root);
    coco_fixture(root);
    let text = format!(
        "seed = 17\nsamples_per_epoch = {samples}\nepochs = {epochs}\n{extra}\n\
         [[datasets]]\nname = \"seqs\"\ntype = \"sequence\"\npath = \"seqs\"\n\n\
         [[datasets]]\nname = \"coco\"\ntype = \"image\"\npath = \"coco/annotations.json\"\nimage_root = \"coco/images\"\n"
    );
    let path = root.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Config over one small procedurally rendered dataset.
pub fn synthetic_config(root: &Path, samples: u64, epochs: u64, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 11\nsamples_per_epoch = {samples}\nepochs = {epochs}\n{extra}\n\
         [[datasets]]\nname = \"toy\"\ntype = \"synthetic\"\n\
         [datasets.synthetic]\nsequences = 6\nframes = 12\nwidth = 200\nheight = 150\ncategories = 3\n"
    );
    let path = root.join("synthetic.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Every file under `dir`, as sorted relative paths with contents.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
