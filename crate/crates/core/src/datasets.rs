//! Dataset ingestion, category indexing, subsetting and pair drawing.
//!
//! Two layouts are supported:
//!
//! * image datasets: a COCO-style JSON file with `images`, `annotations`
//!   (`bbox` as `[x, y, w, h]`) and `categories`;
//! * sequence datasets: a directory of sequences, each holding ordered
//!   frame images (directly or under `img/`) and a `groundtruth.txt` with
//!   one `x,y,w,h` line per frame. An optional `category.txt` names the
//!   category; when sequences are grouped in per-category folders the
//!   folder name is used instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mixing::TfmixConfig;
use crate::rng::{rng_for, Stage};

const FRAME_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Identifies one trackable object: a sequence, or one image annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectKey {
    pub dataset: usize,
    pub object: usize,
}

impl std::fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.dataset, self.object)
    }
}

/// A template/search frame pair with annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub template_frame: PathBuf,
    pub template_box: BBox,
    pub search_frame: PathBuf,
    pub search_box: BBox,
    pub category: Option<String>,
    pub dataset_id: u64,
    pub sequence_id: String,
    pub object: ObjectKey,
    pub frame_indices: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: u64,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    pub id: u64,
    /// Index into [`ImageDataset::images`].
    pub image: usize,
    pub bbox: BBox,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageDataset {
    pub images: Vec<ImageEntry>,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// `None` for frames where the target is absent (non-positive size).
    pub boxes: Vec<Option<BBox>>,
    pub category: Option<String>,
}

impl Sequence {
    pub fn visible_frames(&self) -> Vec<usize> {
        self.boxes
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|_| i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Image(ImageDataset),
    Sequence(SequenceDataset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
}

impl Dataset {
    /// Number of sampling units: sequences, or annotated objects.
    pub fn object_count(&self) -> usize {
        match &self.kind {
            DatasetKind::Image(d) => d.objects.len(),
            DatasetKind::Sequence(d) => d.sequences.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.object_count() == 0
    }

    pub fn category(&self, object: usize) -> Option<&str> {
        match &self.kind {
            DatasetKind::Image(d) => d.objects[object].category.as_deref(),
            DatasetKind::Sequence(d) => d.sequences[object].category.as_deref(),
        }
    }

    /// Whether the object has at least one annotated frame.
    fn is_drawable(&self, object: usize) -> bool {
        match &self.kind {
            DatasetKind::Image(_) => true,
            DatasetKind::Sequence(d) => d.sequences[object].boxes.iter().any(Option::is_some),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    #[serde(default)]
    width: u32,
    #[serde(default)]
    height: u32,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    category_id: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Loads a COCO-style annotation file. Image paths are resolved against
/// `image_root`, defaulting to the annotation file's directory; images
/// are not opened until accessed. Annotations with a non-positive box
/// size are skipped.
pub fn load_image_dataset(annotation_path: &Path, image_root: Option<&Path>) -> Result<Dataset> {
    let text = fs::read_to_string(annotation_path).map_err(|e| Error::io(annotation_path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let coco: CocoFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Parse {
            path: annotation_path.to_path_buf(),
            line: inner.line(),
            field: e.path().to_string(),
            message: inner.to_string(),
        }
    })?;

    let root = image_root
        .map(Path::to_path_buf)
        .or_else(|| annotation_path.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let categories: BTreeMap<u64, String> = coco.categories.into_iter().map(|c| (c.id, c.name)).collect();

    let mut by_id = BTreeMap::new();
    let images: Vec<ImageEntry> = coco
        .images
        .into_iter()
        .enumerate()
        .map(|(i, im)| {
            by_id.insert(im.id, i);
            ImageEntry {
                id: im.id,
                path: root.join(im.file_name),
                width: im.width,
                height: im.height,
            }
        })
        .collect();

    let mut objects = Vec::with_capacity(coco.annotations.len());
    for (i, a) in coco.annotations.into_iter().enumerate() {
        let image = *by_id.get(&a.image_id).ok_or_else(|| Error::Parse {
            path: annotation_path.to_path_buf(),
            line: 0,
            field: format!("annotations[{i}].image_id"),
            message: format!("unknown image id {}", a.image_id),
        })?;
        let [x, y, w, h] = a.bbox;
        let Ok(bbox) = BBox::new(x, y, w, h) else {
            continue;
        };
        let category = a
            .category_id
            .map(|cid| categories.get(&cid).cloned().unwrap_or_else(|| cid.to_string()));
        objects.push(ObjectEntry {
            id: a.id,
            image,
            bbox,
            category,
        });
    }

    Ok(Dataset {
        name: annotation_path.display().to_string(),
        kind: DatasetKind::Image(ImageDataset { images, objects }),
    })
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_frame = p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_frame {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Parses one `x,y,w,h` groundtruth line. Returns `None` for boxes with a
/// non-positive size (target absent).
pub fn parse_groundtruth_line(line: &str, path: &Path, line_no: usize) -> Result<Option<BBox>> {
    let parts: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    let names = ["x", "y", "w", "h"];
    if parts.len() != 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            field: "x,y,w,h".into(),
            message: format!("expected 4 values, found {}", parts.len()),
        });
    }
    let mut v = [0.0; 4];
    for (k, (raw, name)) in parts.iter().zip(names).enumerate() {
        v[k] = raw.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            field: name.into(),
            message: format!("`{raw}` is not a finite number"),
        })?;
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]).ok())
}

fn load_sequence(dir: &Path, default_category: Option<&str>) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let gt_path = dir.join("groundtruth.txt");
    let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let boxes = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_groundtruth_line(l, &gt_path, i + 1))
        .collect::<Result<Vec<_>>>()?;
    let img_dir = dir.join("img");
    let frames = frame_files(if img_dir.is_dir() { &img_dir } else { dir })?;
    if frames.len() != boxes.len() {
        return Err(Error::Structural {
            sequence: name,
            message: format!(
                "{} groundtruth lines but {} frames",
                boxes.len(),
                frames.len()
            ),
        });
    }
    let cat_path = dir.join("category.txt");
    let category = if cat_path.is_file() {
        let c = fs::read_to_string(&cat_path).map_err(|e| Error::io(&cat_path, e))?;
        Some(c.trim().to_string()).filter(|c| !c.is_empty())
    } else {
        default_category.map(str::to_string)
    };
    Ok(Sequence {
        name,
        frames,
        boxes,
        category,
    })
}

/// Loads every sequence below `root`.
pub fn load_sequence_dataset(root: &Path) -> Result<Dataset> {
    let mut sequences = Vec::new();
    for dir in sorted_subdirs(root)? {
        if dir.join("groundtruth.txt").is_file() {
            sequences.push(load_sequence(&dir, None)?);
            continue;
        }
        // Category folder holding sequences.
        let group = dir.file_name().map(|s| s.to_string_lossy().into_owned());
        for sub in sorted_subdirs(&dir)? {
            if sub.join("groundtruth.txt").is_file() {
                sequences.push(load_sequence(&sub, group.as_deref())?);
            }
        }
    }
    Ok(Dataset {
        name: root.display().to_string(),
        kind: DatasetKind::Sequence(SequenceDataset { sequences }),
    })
}

/// Keeps a seeded uniform sample of `ceil(fraction * S)` sequences (or
/// images), preserving their original order.
pub fn subset_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let pick = |total: usize| -> Vec<usize> {
        let keep = ((fraction * total as f64).ceil() as usize).min(total);
        let mut rng = rng_for(seed, 0, 0, 0, Stage::Subset);
        let mut idx = sample(&mut rng, total, keep).into_vec();
        idx.sort_unstable();
        idx
    };
    let kind = match &dataset.kind {
        DatasetKind::Sequence(d) => DatasetKind::Sequence(SequenceDataset {
            sequences: pick(d.sequences.len())
                .into_iter()
                .map(|i| d.sequences[i].clone())
                .collect(),
        }),
        DatasetKind::Image(d) => {
            let kept = pick(d.images.len());
            let mut remap = vec![usize::MAX; d.images.len()];
            for (new, &old) in kept.iter().enumerate() {
                remap[old] = new;
            }
            DatasetKind::Image(ImageDataset {
                images: kept.iter().map(|&i| d.images[i].clone()).collect(),
                objects: d
                    .objects
                    .iter()
                    .filter(|o| remap[o.image] != usize::MAX)
                    .map(|o| ObjectEntry {
                        image: remap[o.image],
                        ..o.clone()
                    })
                    .collect(),
            })
        }
    };
    Ok(Dataset {
        name: dataset.name.clone(),
        kind,
    })
}

/// Builds a pair for one object. Sequence datasets draw the template
/// frame uniformly over annotated frames and the search frame uniformly
/// over annotated frames within `max_frame_gap` of it.
pub fn object_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    dataset_id: u64,
    object: usize,
    rng: &mut R,
    max_frame_gap: usize,
) -> Result<SamplePair> {
    let key = ObjectKey {
        dataset: dataset_id as usize,
        object,
    };
    match &dataset.kind {
        DatasetKind::Image(d) => {
            let o = d
                .objects
                .get(object)
                .ok_or_else(|| Error::Range(format!("object {object} out of range")))?;
            let img = &d.images[o.image];
            Ok(SamplePair {
                template_frame: img.path.clone(),
                template_box: o.bbox,
                search_frame: img.path.clone(),
                search_box: o.bbox,
                category: o.category.clone(),
                dataset_id,
                sequence_id: format!("image-{}/ann-{}", img.id, o.id),
                object: key,
                frame_indices: (0, 0),
            })
        }
        DatasetKind::Sequence(d) => {
            let seq = d
                .sequences
                .get(object)
                .ok_or_else(|| Error::Range(format!("sequence {object} out of range")))?;
            let visible = seq.visible_frames();
            if visible.is_empty() {
                return Err(Error::Structural {
                    sequence: seq.name.clone(),
                    message: "no annotated frames".into(),
                });
            }
            let t = visible[rng.random_range(0..visible.len())];
            let near: Vec<usize> = visible
                .iter()
                .copied()
                .filter(|&i| i.abs_diff(t) <= max_frame_gap)
                .collect();
            let s = near[rng.random_range(0..near.len())];
            Ok(SamplePair {
                template_frame: seq.frames[t].clone(),
                template_box: seq.boxes[t].expect("visible frame"),
                search_frame: seq.frames[s].clone(),
                search_box: seq.boxes[s].expect("visible frame"),
                category: seq.category.clone(),
                dataset_id,
                sequence_id: seq.name.clone(),
                object: key,
                frame_indices: (t, s),
            })
        }
    }
}

/// Draws a uniformly chosen object, then a frame pair for it.
pub fn draw_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    dataset_id: u64,
    rng: &mut R,
    max_frame_gap: usize,
) -> Result<SamplePair> {
    let drawable: Vec<usize> = (0..dataset.object_count())
        .filter(|&i| dataset.is_drawable(i))
        .collect();
    if drawable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let object = drawable[rng.random_range(0..drawable.len())];
    object_pair(dataset, dataset_id, object, rng, max_frame_gap)
}

/// All loaded datasets with a category index over their objects.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub datasets: Vec<Dataset>,
    by_category: BTreeMap<String, Vec<ObjectKey>>,
    all: Vec<ObjectKey>,
}

impl Catalog {
    pub fn new(datasets: Vec<Dataset>) -> Self {
        let mut by_category: BTreeMap<String, Vec<ObjectKey>> = BTreeMap::new();
        let mut all = Vec::new();
        for (di, d) in datasets.iter().enumerate() {
            for oi in 0..d.object_count() {
                if !d.is_drawable(oi) {
                    continue;
                }
                let key = ObjectKey {
                    dataset: di,
                    object: oi,
                };
                all.push(key);
                if let Some(c) = d.category(oi) {
                    by_category.entry(c.to_string()).or_default().push(key);
                }
            }
        }
        Self {
            datasets,
            by_category,
            all,
        }
    }

    pub fn objects(&self) -> &[ObjectKey] {
        &self.all
    }

    pub fn category_members(&self, category: &str) -> &[ObjectKey] {
        self.by_category.get(category).map_or(&[], Vec::as_slice)
    }

    pub fn category_of(&self, key: ObjectKey) -> Option<&str> {
        self.datasets.get(key.dataset)?.category(key.object)
    }

    pub fn pair_for<R: Rng + ?Sized>(
        &self,
        key: ObjectKey,
        rng: &mut R,
        max_frame_gap: usize,
    ) -> Result<SamplePair> {
        let d = self
            .datasets
            .get(key.dataset)
            .ok_or_else(|| Error::Range(format!("dataset {} out of range", key.dataset)))?;
        object_pair(d, key.dataset as u64, key.object, rng, max_frame_gap)
    }
}

/// Per-epoch switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochFlags {
    pub tfmix_active: bool,
}

/// Mixing fires once per `epoch_period` epochs: at epochs where
/// `epoch % period == (period - 1 + phase_offset) % period`. The default
/// offset fires on the last epoch of each period, offset 1 on the first.
pub fn epoch_schedule(epoch: u64, cfg: &TfmixConfig) -> EpochFlags {
    let period = cfg.epoch_period.max(1) as u64;
    let phase = (period - 1 + cfg.phase_offset as u64) % period;
    EpochFlags {
        tfmix_active: cfg.enabled && epoch % period == phase,
    }
}

/// Loads an image file as RGB.
pub fn load_frame(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}
