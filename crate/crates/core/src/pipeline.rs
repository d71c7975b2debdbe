//! End-to-end sample construction.
//!
//! A training sample is a pure function of `(seed, epoch, index)`: every
//! stage draws from its own stream, so samples can be built in any order
//! and on any number of workers with identical results.
//!
//! Stages, in order: dataset selection, pair drawing, template crop,
//! search crop, optional distractor mixing (on scheduled epochs), then
//! general augmentations on both patches.

use std::path::Path;

use image::RgbImage;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetType, PipelineConfig, SyntheticSpec};
use crate::cropping::{template_crop, CropOutcome};
use crate::datasets::{
    epoch_schedule, load_frame, load_image_dataset, load_sequence_dataset, subset_fraction,
    Catalog, Dataset, SamplePair,
};
use crate::error::{Error, Result};
use crate::gda::{apply_independent, apply_joint, GdaRecord};
use crate::geometry::{center_crop, extract_patch, BBox, CropKind, Direction, Patch, PatchTransform};
use crate::mixing::{
    cutmix_bbox, object_token_mask, select_distractor, tfmix, token_image_mix, tokenize,
    untokenize, ImageMixParams, MixMethod, TokenStats,
};
use crate::rng::{rng_for, Stage};
use crate::synthetic::{render_frame, synthetic_dataset};

/// What the mixing stage did for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub method: MixMethod,
    pub applied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    /// `dataset:object/sequence#frame` of the distractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractor: Option<String>,
    pub occluded_fraction: f64,
    pub fallback: bool,
    pub attempts: u32,
    /// Tokens, pixels or cells written, depending on the method.
    pub replaced: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_source: Option<TokenStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats_target: Option<TokenStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl MixRecord {
    fn skipped(method: MixMethod, reason: impl Into<String>) -> Self {
        Self {
            method,
            applied: false,
            skip_reason: Some(reason.into()),
            distractor: None,
            occluded_fraction: 0.0,
            fallback: false,
            attempts: 0,
            replaced: 0,
            stats_source: None,
            stats_target: None,
            ratio: None,
        }
    }
}

/// Per-sample metadata; one manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub epoch: u64,
    pub index: u64,
    pub dataset_id: u64,
    pub dataset: String,
    pub sequence_id: String,
    pub frame_indices: (usize, usize),
    pub category: Option<String>,
    #[serde(default)]
    pub template_path: String,
    #[serde(default)]
    pub search_path: String,
    /// Patch coordinates, `[x, y, w, h]`.
    pub template_box: [f64; 4],
    pub search_box: [f64; 4],
    /// Source-frame annotations, `[x, y, w, h]`.
    pub template_frame_box: [f64; 4],
    pub search_frame_box: [f64; 4],
    pub template_to_image: PatchTransform,
    pub search_to_image: PatchTransform,
    pub gamma: f64,
    pub kind: CropKind,
    pub retries_used: u32,
    pub direction: Option<Direction>,
    pub gda_template: GdaRecord,
    pub gda_search: GdaRecord,
    pub mix: Option<MixRecord>,
    /// `seed/dataset/epoch/index`.
    pub rng_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub record: SampleRecord,
    pub template: Patch,
    pub search: Patch,
    pub template_box: BBox,
    pub search_box: BBox,
    pub crop: CropOutcome,
}

/// A loaded, validated configuration with its datasets. Immutable and
/// shareable across threads.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    catalog: Catalog,
    synthetic: Vec<Option<SyntheticSpec>>,
    /// Cumulative selection weights; empty datasets weigh nothing.
    cumulative: Vec<f64>,
}

impl Pipeline {
    pub fn open(config_path: &Path) -> Result<Self> {
        Self::new(PipelineConfig::load(config_path)?)
    }

    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let config = config.normalized();
        let mut datasets = Vec::with_capacity(config.datasets.len());
        let mut synthetic = Vec::with_capacity(config.datasets.len());
        for (i, spec) in config.datasets.iter().enumerate() {
            let id = i as u64;
            let mut d = match spec.kind {
                DatasetType::Image => load_image_dataset(&spec.path, spec.image_root.as_deref())?,
                DatasetType::Sequence => load_sequence_dataset(&spec.path)?,
                DatasetType::Synthetic => {
                    let s = spec.synthetic.unwrap_or_default();
                    synthetic_dataset(&spec.name, &s, config.seed, id)
                }
            };
            d.name = spec.name.clone();
            if spec.fraction < 1.0 {
                let subset_seed = rng_for(config.seed, id, 0, 0, Stage::Subset).next_u64();
                d = subset_fraction(&d, spec.fraction, subset_seed)?;
            }
            synthetic.push(spec.synthetic.filter(|_| spec.kind == DatasetType::Synthetic));
            datasets.push(d);
        }
        let catalog = Catalog::new(datasets);
        let mut drawable = vec![false; config.datasets.len()];
        for k in catalog.objects() {
            drawable[k.dataset] = true;
        }
        let mut acc = 0.0;
        let cumulative = config
            .datasets
            .iter()
            .zip(&drawable)
            .map(|(d, &ok)| {
                acc += if ok { d.weight } else { 0.0 };
                acc
            })
            .collect::<Vec<_>>();
        if acc <= 0.0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            config,
            catalog,
            synthetic,
            cumulative,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.catalog.datasets
    }

    pub fn check_range(&self, epoch: u64, index: u64) -> Result<()> {
        if epoch >= self.config.epochs {
            return Err(Error::Range(format!(
                "epoch {epoch} not below configured epochs {}",
                self.config.epochs
            )));
        }
        if index >= self.config.samples_per_epoch {
            return Err(Error::Range(format!(
                "index {index} not below samples_per_epoch {}",
                self.config.samples_per_epoch
            )));
        }
        Ok(())
    }

    fn select_dataset(&self, epoch: u64, index: u64) -> u64 {
        let mut rng = rng_for(self.config.seed, 0, epoch, index, Stage::Select);
        let total = *self.cumulative.last().expect("at least one dataset");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1) as u64
    }

    /// Loads the pixels of a pair frame.
    pub fn frame(&self, pair: &SamplePair, which: FrameRole) -> Result<RgbImage> {
        let (path, frame, target) = match which {
            FrameRole::Template => (&pair.template_frame, pair.frame_indices.0, pair.template_box),
            FrameRole::Search => (&pair.search_frame, pair.frame_indices.1, pair.search_box),
        };
        match self.synthetic.get(pair.dataset_id as usize).copied().flatten() {
            Some(spec) => Ok(render_frame(
                &spec,
                self.config.seed,
                pair.dataset_id,
                pair.object.object,
                frame,
                &target,
            )),
            None => load_frame(path),
        }
    }

    /// Builds sample `index` of `epoch`, validating the range first.
    pub fn training_pair(&self, epoch: u64, index: u64) -> Result<TrainingSample> {
        self.check_range(epoch, index)?;
        self.build(epoch, index)
    }

    /// Builds a sample without the range check.
    pub fn build(&self, epoch: u64, index: u64) -> Result<TrainingSample> {
        let cfg = &self.config;
        let policy = &cfg.policy;
        let seed = cfg.seed;
        let d = self.select_dataset(epoch, index);
        let stream = |stage| rng_for(seed, d, epoch, index, stage);

        let dataset = &self.catalog.datasets[d as usize];
        let pair = crate::datasets::draw_pair(
            dataset,
            d,
            &mut stream(Stage::Pair),
            cfg.sampling.max_frame_gap,
        )?;

        let template_img = self.frame(&pair, FrameRole::Template)?;
        let t_crop = template_crop(&pair.template_box, policy)?;
        let mut template = extract_patch(&template_img, &t_crop.window, policy.template_out_size)?;
        let mut template_box = template.to_image.box_to_patch(&pair.template_box);

        let search_img = if pair.template_frame == pair.search_frame && pair.frame_indices.0 == pair.frame_indices.1 {
            template_img
        } else {
            self.frame(&pair, FrameRole::Search)?
        };
        let crop = cfg.cropper.sample(&pair.search_box, policy, &mut stream(Stage::Crop))?;
        let mut search = extract_patch(&search_img, &crop.window, policy.search_out_size)?;
        let mut search_box = search.to_image.box_to_patch(&pair.search_box);

        let mix = if epoch_schedule(epoch, &policy.tfmix).tfmix_active {
            Some(self.mix(&pair, &crop, &mut search, &search_box, epoch, index)?)
        } else {
            None
        };

        let joint = stream(Stage::GdaJoint);
        let mut gda_template = GdaRecord::default();
        let mut gda_search = GdaRecord::default();
        template_box = apply_joint(&mut template, &template_box, &policy.gda, &mut joint.clone(), &mut gda_template);
        search_box = apply_joint(&mut search, &search_box, &policy.gda, &mut joint.clone(), &mut gda_search);
        template_box = apply_independent(
            &mut template,
            &template_box,
            &policy.gda,
            &mut stream(Stage::GdaTemplate),
            &mut gda_template,
        );
        search_box = apply_independent(
            &mut search,
            &search_box,
            &policy.gda,
            &mut stream(Stage::GdaSearch),
            &mut gda_search,
        );

        let record = SampleRecord {
            epoch,
            index,
            dataset_id: d,
            dataset: dataset.name.clone(),
            sequence_id: pair.sequence_id.clone(),
            frame_indices: pair.frame_indices,
            category: pair.category.clone(),
            template_path: String::new(),
            search_path: String::new(),
            template_box: template_box.to_array(),
            search_box: search_box.to_array(),
            template_frame_box: pair.template_box.to_array(),
            search_frame_box: pair.search_box.to_array(),
            template_to_image: template.to_image,
            search_to_image: search.to_image,
            gamma: crop.gamma,
            kind: crop.kind,
            retries_used: crop.retries_used,
            direction: crop.direction,
            gda_template,
            gda_search,
            mix,
            rng_path: format!("{seed}/{d}/{epoch}/{index}"),
        };
        Ok(TrainingSample {
            record,
            template,
            search,
            template_box,
            search_box,
            crop,
        })
    }

    fn mix(
        &self,
        pair: &SamplePair,
        crop: &CropOutcome,
        search: &mut Patch,
        search_box: &BBox,
        epoch: u64,
        index: u64,
    ) -> Result<MixRecord> {
        let cfg = &self.config;
        let tf = &cfg.policy.tfmix;
        let method = tf.method;
        let d = pair.dataset_id;
        let category = if tf.same_category_first {
            pair.category.as_deref()
        } else {
            None
        };
        let mut rng_d = rng_for(cfg.seed, d, epoch, index, Stage::Distractor);
        let other = match select_distractor(
            &self.catalog,
            category,
            pair.object,
            &mut rng_d,
            cfg.sampling.max_frame_gap,
        ) {
            Ok(p) => p,
            Err(Error::NoDistractor(m)) => return Ok(MixRecord::skipped(method, m)),
            Err(e) => return Err(e),
        };
        let distractor_id = format!(
            "{}/{}#{}",
            other.object, other.sequence_id, other.frame_indices.1
        );

        // Same context ratio as the search crop, so both objects appear at
        // a comparable scale.
        let ratio = crop.window.side() / pair.search_box.scale();
        let d_img = self.frame(&other, FrameRole::Search)?;
        let d_window = center_crop(&other.search_box, ratio)?;
        let distractor = extract_patch(&d_img, &d_window, cfg.policy.search_out_size)?;
        let distractor_box = distractor.to_image.box_to_patch(&other.search_box);

        let mut rng = rng_for(cfg.seed, d, epoch, index, Stage::Mix);
        let mut record = MixRecord {
            skip_reason: None,
            distractor: Some(distractor_id),
            ..MixRecord::skipped(method, "")
        };
        match method {
            MixMethod::TokenFeature => {
                let grid_s = tokenize(search, tf.patch_size)?;
                let grid_d = tokenize(&distractor, tf.patch_size)?;
                let mask_s = object_token_mask(search_box, &grid_s, tf.token_overlap_threshold);
                let mask_d = object_token_mask(&distractor_box, &grid_d, tf.token_overlap_threshold);
                if mask_s.count() == 0 || mask_d.count() == 0 {
                    return Ok(MixRecord {
                        distractor: record.distractor,
                        ..MixRecord::skipped(method, "empty object token mask")
                    });
                }
                let out = match tfmix(&grid_s, &mask_s, &grid_d, &mask_d, tf, &mut rng) {
                    Ok(o) => o,
                    Err(e @ Error::FootprintTooLarge { .. }) => {
                        return Ok(MixRecord {
                            distractor: record.distractor,
                            ..MixRecord::skipped(method, e.to_string())
                        })
                    }
                    Err(e) => return Err(e),
                };
                search.pixels = untokenize(&out.grid)?;
                record.applied = true;
                record.occluded_fraction = out.occluded_fraction;
                record.fallback = out.fallback;
                record.attempts = out.attempts;
                record.replaced = out.replaced.count();
                record.stats_source = Some(out.stats_source);
                record.stats_target = Some(out.stats_target);
            }
            MixMethod::CutmixBbox => {
                let params = ImageMixParams::from(tf);
                match cutmix_bbox(search, search_box, &distractor, &distractor_box, &params, &mut rng) {
                    Ok(out) => {
                        *search = out.patch;
                        record.applied = true;
                        record.occluded_fraction = out.occluded_fraction;
                        record.fallback = out.fallback;
                        record.replaced = out.region.map_or(0, |r| (r.w * r.h) as usize);
                    }
                    Err(e @ (Error::EmptyObject | Error::FootprintTooLarge { .. })) => {
                        return Ok(MixRecord {
                            distractor: record.distractor,
                            ..MixRecord::skipped(method, e.to_string())
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            MixMethod::TokenImage => {
                let out = token_image_mix(search, &distractor, tf.patch_size, &mut rng)?;
                *search = out.patch;
                record.applied = true;
                record.replaced = out.cells.len();
                record.ratio = Some(out.ratio);
            }
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    Template,
    Search,
}
