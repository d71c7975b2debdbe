//! Batch buffers against the files written by `augment`.

mod common;

use std::fs;
use std::path::Path;

use trackaug::batch::{next_batch, BATCH_LAYOUT_VERSION};
use trackaug::manifest::parse_manifest;
use trackaug_cli::{cmd_augment, open_pipeline, AugmentOptions};

/// Compares `epochs x samples` pairs. Returns how many were checked.
fn check(config: &Path, out: &Path, epochs: u64, samples: u64) -> usize {
    cmd_augment(&AugmentOptions {
        config: config.to_path_buf(),
        out: Some(out.to_path_buf()),
        ..Default::default()
    })
    .unwrap();
    let records = parse_manifest(&fs::read_to_string(out.join("manifest.jsonl")).unwrap()).unwrap();
    let pipeline = open_pipeline(config, None).unwrap();
    let mut checked = 0;
    for epoch in 0..epochs {
        // Two uneven chunks so batch boundaries do not line up with the epoch.
        let split = samples / 3;
        for (start, count) in [(0, split), (split, samples - split)] {
            let b = next_batch(&pipeline, epoch, start, count as usize).unwrap();
            assert_eq!(b.layout_version, BATCH_LAYOUT_VERSION);
            for i in 0..count as usize {
                let r = &records[(epoch * samples + start) as usize + i];
                assert_eq!((r.epoch, r.index), (epoch, start + i as u64));
                let search = image::open(out.join(&r.search_path)).unwrap().to_rgb8();
                let template = image::open(out.join(&r.template_path)).unwrap().to_rgb8();
                assert_eq!(b.search_sample(i), search.as_raw().as_slice(), "{}", r.search_path);
                assert_eq!(b.template_sample(i), template.as_raw().as_slice());
                let sb: Vec<f32> = r.search_box.iter().map(|&v| v as f32).collect();
                assert_eq!(&b.search_boxes[i * 4..i * 4 + 4], sb.as_slice());
                assert_eq!(b.kinds[i], r.kind.code());
                assert_eq!(b.gammas[i], r.gamma as f32);
                checked += 1;
            }
        }
    }
    checked
}

#[test]
fn batches_match_augment_output_on_both_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[policy.tfmix]\nphase_offset = 1\n";
    let disk = common::write_config(dir.path(), 64, 2, extra);
    let synth = common::synthetic_config(dir.path(), 64, 2, extra);
    let n = check(&disk, &dir.path().join("out_disk"), 2, 64) + check(&synth, &dir.path().join("out_synth"), 2, 64);
    assert_eq!(n, 256);
}
