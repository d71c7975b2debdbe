//! Pipeline configuration file.
//!
//! A TOML document with strict key checking. Every omitted field takes
//! its default, and [`PipelineConfig::to_toml`] writes all of them back
//! out, so a loaded config re-serializes to a complete, equivalent file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cropping::{AugPolicy, Cropper};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetType {
    /// COCO-style annotation file.
    Image,
    /// Directory of sequences with `groundtruth.txt` files.
    Sequence,
    /// Procedurally rendered sequences; needs no files.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: DatasetType,
    /// Annotation file or sequence root. Relative paths resolve against
    /// the config file's directory.
    #[serde(default)]
    pub path: PathBuf,
    /// Image directory for COCO-style datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

fn one() -> f64 {
    1.0
}

/// Shape of a procedurally rendered dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub sequences: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub categories: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            sequences: 16,
            frames: 32,
            width: 640,
            height: 360,
            categories: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub max_frame_gap: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { max_frame_gap: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub manifest_name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            manifest_name: "manifest.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples_per_epoch: u64,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default)]
    pub cropper: Cropper,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub policy: AugPolicy,
    pub datasets: Vec<DatasetSpec>,
}

fn default_samples() -> u64 {
    1000
}

fn default_epochs() -> u64 {
    1
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file. Relative dataset and output
    /// paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.path);
            if let Some(r) = &mut d.image_root {
                fix(r);
            }
        }
        fix(&mut self.output.dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples_per_epoch == 0 {
            return bad("samples_per_epoch must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset is required".into());
        }
        if let Cropper::Legacy { gamma_fix } = self.cropper {
            if !(gamma_fix.is_finite() && gamma_fix > 0.0) {
                return bad(format!("cropper.gamma_fix {gamma_fix} must be > 0"));
            }
        }
        for (i, d) in self.datasets.iter().enumerate() {
            let at = format!("datasets[{i}] ({})", d.name);
            if !(d.weight.is_finite() && d.weight >= 0.0) {
                return bad(format!("{at}: weight {} must be >= 0", d.weight));
            }
            if !(d.fraction > 0.0 && d.fraction <= 1.0) {
                return bad(format!("{at}: fraction {} not in (0, 1]", d.fraction));
            }
            match d.kind {
                DatasetType::Synthetic => {
                    let s = d.synthetic.unwrap_or_default();
                    if s.sequences == 0 || s.frames == 0 || s.categories == 0 {
                        return bad(format!("{at}: synthetic counts must be >= 1"));
                    }
                    if s.width < 32 || s.height < 32 {
                        return bad(format!("{at}: synthetic frames must be at least 32x32"));
                    }
                }
                _ if d.path.as_os_str().is_empty() => return bad(format!("{at}: path is required")),
                _ if d.synthetic.is_some() => {
                    return bad(format!("{at}: `synthetic` only applies to synthetic datasets"))
                }
                _ => {}
            }
        }
        if self.datasets.iter().all(|d| d.weight == 0.0) {
            return bad("all dataset weights are zero".into());
        }
        self.policy.validate()?;
        let tf = &self.policy.tfmix;
        if tf.enabled && !self.policy.search_out_size.is_multiple_of(tf.patch_size) {
            return bad(format!(
                "policy.search_out_size {} is not a multiple of tfmix.patch_size {}",
                self.policy.search_out_size, tf.patch_size
            ));
        }
        Ok(())
    }

    /// Materializes defaults that are optional in the file.
    pub fn normalized(mut self) -> Self {
        for d in &mut self.datasets {
            if d.kind == DatasetType::Synthetic && d.synthetic.is_none() {
                d.synthetic = Some(SyntheticSpec::default());
            }
        }
        self
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
