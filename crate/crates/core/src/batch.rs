//! Fixed-layout batch buffers for training loops.
//!
//! Layout version 1, all arrays row-major and indexed by sample first:
//!
//! | field            | type | shape                 |
//! |------------------|------|-----------------------|
//! | `search`         | u8   | count × S × S × 3     |
//! | `template`       | u8   | count × T × T × 3     |
//! | `search_boxes`   | f32  | count × 4 (x, y, w, h)|
//! | `template_boxes` | f32  | count × 4             |
//! | `kinds`          | u8   | count                 |
//! | `gammas`         | f32  | count                 |
//! | `mixed`          | u8   | count (0 or 1)        |
//! | `occluded`       | f32  | count                 |
//!
//! `S` and `T` are the configured search and template sizes. Kind codes:
//! 0 normal, 1 boundary, 2 legacy, 3 template. Boxes are in patch pixels.
//! Pixel content is identical to the PNGs written by the augment command
//! for the same `(seed, epoch, index)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pipeline::{Pipeline, SampleRecord};

pub const BATCH_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub layout_version: u32,
    pub count: usize,
    pub search_size: u32,
    pub template_size: u32,
    pub search: Vec<u8>,
    pub template: Vec<u8>,
    pub search_boxes: Vec<f32>,
    pub template_boxes: Vec<f32>,
    pub kinds: Vec<u8>,
    pub gammas: Vec<f32>,
    pub mixed: Vec<u8>,
    pub occluded: Vec<f32>,
    pub records: Vec<SampleRecord>,
}

impl Batch {
    pub fn search_shape(&self) -> [usize; 4] {
        let s = self.search_size as usize;
        [self.count, s, s, 3]
    }

    pub fn template_shape(&self) -> [usize; 4] {
        let t = self.template_size as usize;
        [self.count, t, t, 3]
    }

    /// Pixels of sample `i` of the search buffer.
    pub fn search_sample(&self, i: usize) -> &[u8] {
        let n = (self.search_size * self.search_size * 3) as usize;
        &self.search[i * n..(i + 1) * n]
    }

    pub fn template_sample(&self, i: usize) -> &[u8] {
        let n = (self.template_size * self.template_size * 3) as usize;
        &self.template[i * n..(i + 1) * n]
    }
}

/// Builds samples `start..start + count` of `epoch` into one batch.
pub fn next_batch(pipeline: &Pipeline, epoch: u64, start: u64, count: usize) -> Result<Batch> {
    let cfg = pipeline.config();
    let end = start
        .checked_add(count as u64)
        .ok_or_else(|| Error::Range("index overflow".into()))?;
    pipeline.check_range(epoch, start)?;
    if count > 0 {
        pipeline.check_range(epoch, end - 1)?;
    }
    let samples = (start..end)
        .into_par_iter()
        .map(|i| pipeline.build(epoch, i))
        .collect::<Result<Vec<_>>>()?;

    let policy = &cfg.policy;
    let mut b = Batch {
        layout_version: BATCH_LAYOUT_VERSION,
        count,
        search_size: policy.search_out_size,
        template_size: policy.template_out_size,
        search: Vec::with_capacity(count * (policy.search_out_size.pow(2) * 3) as usize),
        template: Vec::with_capacity(count * (policy.template_out_size.pow(2) * 3) as usize),
        search_boxes: Vec::with_capacity(count * 4),
        template_boxes: Vec::with_capacity(count * 4),
        kinds: Vec::with_capacity(count),
        gammas: Vec::with_capacity(count),
        mixed: Vec::with_capacity(count),
        occluded: Vec::with_capacity(count),
        records: Vec::with_capacity(count),
    };
    for s in samples {
        b.search.extend_from_slice(s.search.pixels.as_raw());
        b.template.extend_from_slice(s.template.pixels.as_raw());
        b.search_boxes.extend(s.search_box.to_array().map(|v| v as f32));
        b.template_boxes.extend(s.template_box.to_array().map(|v| v as f32));
        b.kinds.push(s.record.kind.code());
        b.gammas.push(s.record.gamma as f32);
        let mix = s.record.mix.as_ref().filter(|m| m.applied);
        b.mixed.push(mix.is_some() as u8);
        b.occluded.push(mix.map_or(0.0, |m| m.occluded_fraction as f32));
        b.records.push(s.record);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;

    fn pipeline() -> Pipeline {
        Pipeline::new(
            PipelineConfig::from_toml(
                "samples_per_epoch = 10\nepochs = 2\n[[datasets]]\nname = \"t\"\ntype = \"synthetic\"\n",
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_layout() {
        let p = pipeline();
        let b = next_batch(&p, 0, 2, 4).unwrap();
        assert_eq!(b.search_shape(), [4, 256, 256, 3]);
        assert_eq!(b.template_shape(), [4, 128, 128, 3]);
        assert_eq!(b.search.len(), 4 * 256 * 256 * 3);
        assert_eq!(b.search_boxes.len(), 16);
        assert_eq!(b.kinds.len(), 4);
        for i in 0..4 {
            let s = p.training_pair(0, 2 + i as u64).unwrap();
            assert_eq!(b.search_sample(i), s.search.pixels.as_raw().as_slice());
            assert_eq!(b.template_sample(i), s.template.pixels.as_raw().as_slice());
        }
    }

    #[test]
    fn overlapping_ranges_agree() {
        let p = pipeline();
        let a = next_batch(&p, 1, 0, 6).unwrap();
        let b = next_batch(&p, 1, 3, 7).unwrap();
        for k in 0..3 {
            assert_eq!(a.search_sample(3 + k), b.search_sample(k));
            assert_eq!(a.records[3 + k], b.records[k]);
        }
    }

    #[test]
    fn range_errors() {
        let p = pipeline();
        assert!(matches!(next_batch(&p, 0, 8, 3), Err(Error::Range(_))));
        assert!(matches!(next_batch(&p, 2, 0, 1), Err(Error::Range(_))));
        assert!(matches!(next_batch(&p, 0, 10, 0), Err(Error::Range(_))));
        assert_eq!(next_batch(&p, 0, 3, 0).unwrap().count, 0);
    }
}
