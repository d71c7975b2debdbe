//! Commands behind the `trackaug` binary. Each command is a plain
//! function so it can be driven from tests without spawning a process.

use std::fs;
use std::io::BufWriter;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use trackaug::analysis::{
    mix_case, run_crop_stats, run_jitter_sweep, run_mix_stats, synthetic_target, SWEEP_SCALES,
    SWEEP_SHIFTS,
};
use trackaug::config::PipelineConfig;
use trackaug::manifest::write_manifest;
use trackaug::pipeline::{Pipeline, SampleRecord};
use trackaug::rng::{rng_for, Stage};

pub mod preview;

/// Misuse of a command, reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Loads the config and applies a seed override.
pub fn open_pipeline(config: &Path, seed: Option<u64>) -> Result<Pipeline> {
    let mut cfg = PipelineConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(Pipeline::new(cfg)?)
}

/// Runs `f` on a pool of `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(0) => Err(usage("--workers must be >= 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Parses `N` (epochs `0..N`) or `A..B`.
pub fn parse_epochs(s: &str) -> Result<Range<u64>> {
    let r = match s.split_once("..") {
        Some((a, b)) => a.trim().parse()?..b.trim().parse()?,
        None => 0..s.trim().parse()?,
    };
    if r.is_empty() {
        return Err(usage(format!("empty epoch range `{s}`")));
    }
    Ok(r)
}

#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<Range<u64>>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentSummary {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub samples: usize,
    pub files: usize,
}

pub fn epoch_dir(epoch: u64) -> String {
    format!("epoch_{epoch:03}")
}

/// Writes template/search PNGs for every sample in the epoch range and a
/// manifest ordered by `(epoch, index)`.
pub fn cmd_augment(opts: &AugmentOptions) -> Result<AugmentSummary> {
    let pipeline = open_pipeline(&opts.config, opts.seed)?;
    let cfg = pipeline.config();
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let epochs = opts.epochs.clone().unwrap_or(0..cfg.epochs);
    if epochs.end > cfg.epochs {
        return Err(usage(format!(
            "epoch range {}..{} exceeds configured epochs {}",
            epochs.start, epochs.end, cfg.epochs
        )));
    }
    let n = cfg.samples_per_epoch;
    let mut records: Vec<SampleRecord> = Vec::with_capacity(((epochs.end - epochs.start) * n) as usize);
    for epoch in epochs {
        let dir = out_dir.join(epoch_dir(epoch));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let batch = with_workers(opts.workers, || {
            (0..n)
                .into_par_iter()
                .map(|i| write_sample(&pipeline, &out_dir, epoch, i))
                .collect::<Result<Vec<_>>>()
        })??;
        records.extend(batch);
    }
    let manifest = out_dir.join(&cfg.output.manifest_name);
    let file = fs::File::create(&manifest).with_context(|| format!("creating {}", manifest.display()))?;
    write_manifest(&mut BufWriter::new(file), &records)?;
    Ok(AugmentSummary {
        out_dir,
        manifest,
        samples: records.len(),
        files: records.len() * 2,
    })
}

fn write_sample(pipeline: &Pipeline, out_dir: &Path, epoch: u64, index: u64) -> Result<SampleRecord> {
    let s = pipeline
        .training_pair(epoch, index)
        .with_context(|| format!("sample epoch {epoch} index {index}"))?;
    let mut record = s.record;
    let rel_t = format!("{}/{index:06}_template.png", epoch_dir(epoch));
    let rel_s = format!("{}/{index:06}_search.png", epoch_dir(epoch));
    for (rel, img) in [(&rel_t, &s.template.pixels), (&rel_s, &s.search.pixels)] {
        let path = out_dir.join(rel);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    record.template_path = rel_t;
    record.search_path = rel_s;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Crop,
    Sweep,
    Mix,
}

impl std::str::FromStr for StatsMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "crop" => Ok(Self::Crop),
            "sweep" => Ok(Self::Sweep),
            "mix" => Ok(Self::Mix),
            other => Err(format!("unknown mode `{other}` (expected crop, sweep or mix)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StatsOptions {
    pub config: PathBuf,
    pub mode: StatsMode,
    pub n: u64,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Runs an analysis and writes its text report and CSV table into `out`.
/// Returns the text report.
pub fn cmd_stats(opts: &StatsOptions) -> Result<String> {
    if opts.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let mut cfg = PipelineConfig::load(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&opts.out)?;
    let (text, csv, stem) = with_workers(opts.workers, || -> Result<_> {
        Ok(match opts.mode {
            StatsMode::Crop => {
                let r = run_crop_stats(&cfg.cropper, &cfg.policy, opts.n, cfg.seed)?;
                (r.to_text(), r.histograms_csv(), "crop")
            }
            StatsMode::Sweep => {
                let r = run_jitter_sweep(&SWEEP_SHIFTS, &SWEEP_SCALES, &cfg.cropper, &cfg.policy, opts.n, cfg.seed)?;
                let mut text = String::from("report jitter-sweep\n");
                for c in &r.cells {
                    text.push_str(&format!(
                        "cell shift {} scale {} uninformative_rate {} gamma_variance {}\n",
                        c.shift, c.scale, c.report.uninformative_rate, c.report.gamma_variance
                    ));
                }
                (text, r.to_csv(), "sweep")
            }
            StatsMode::Mix => {
                let r = run_mix_stats(&cfg.policy.tfmix, opts.n, cfg.seed)?;
                (r.to_text(), r.histograms_csv(), "mix")
            }
        })
    })??;
    fs::write(opts.out.join(format!("{stem}_report.txt")), &text)?;
    fs::write(opts.out.join(format!("{stem}.csv")), &csv)?;
    Ok(text)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub config: PathBuf,
    /// Time budget per measurement; ignored when `n` is set.
    pub duration: Duration,
    /// Fixed number of operations per measurement.
    pub n: Option<u64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub workers: usize,
    pub crops: u64,
    pub pairs: u64,
    pub tfmix: u64,
    pub crops_per_s: f64,
    pub pairs_per_s: f64,
    pub tfmix_per_s: f64,
    /// SHA-256 over the outputs of the first round of each operation.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub single: BenchRun,
    pub multi: BenchRun,
    pub digest_match: bool,
}

const BENCH_ROUND: u64 = 32;

/// Runs `op` over consecutive index rounds until the budget is spent (or
/// exactly `n` items), returning item count, elapsed seconds and the
/// digest of the first round.
fn measure<F>(budget: Duration, n: Option<u64>, op: F) -> Result<(u64, f64, Vec<u8>)>
where
    F: Fn(u64) -> Result<Vec<u8>> + Sync,
{
    let start = Instant::now();
    let mut done = 0u64;
    let mut first = None;
    loop {
        let size = match n {
            Some(n) if done >= n => break,
            Some(n) => BENCH_ROUND.min(n - done),
            None if done > 0 && start.elapsed() >= budget => break,
            None => BENCH_ROUND,
        };
        let outs = (done..done + size)
            .into_par_iter()
            .map(&op)
            .collect::<Result<Vec<_>>>()?;
        if first.is_none() {
            let mut h = Sha256::new();
            outs.iter().for_each(|o| h.update(o));
            first = Some(h.finalize().to_vec());
        }
        done += size;
    }
    Ok((done, start.elapsed().as_secs_f64(), first.unwrap_or_default()))
}

fn bench_run(pipeline: &Pipeline, opts: &BenchOptions) -> Result<BenchRun> {
    let cfg = pipeline.config();
    let seed = cfg.seed;
    let (crops, t_crop, d_crop) = measure(opts.duration, opts.n, |i| {
        let target = synthetic_target(&mut rng_for(seed, 0, 0, i, Stage::Synthetic));
        let o = cfg.cropper.sample(&target, &cfg.policy, &mut rng_for(seed, 0, 0, i, Stage::Crop))?;
        Ok(o.window.bbox.to_array().iter().flat_map(|v| v.to_le_bytes()).collect())
    })?;
    let (pairs, t_pair, d_pair) = measure(opts.duration, opts.n, |i| {
        let s = pipeline.build(0, i)?;
        let mut out = s.search.pixels.into_raw();
        out.extend(s.template.pixels.into_raw());
        Ok(out)
    })?;
    let (mixes, t_mix, d_mix) = measure(opts.duration, opts.n, |i| {
        let c = mix_case(&cfg.policy.tfmix, seed, i)?;
        Ok(c.outcome.grid.values.iter().flat_map(|v| v.to_le_bytes()).collect())
    })?;
    let mut h = Sha256::new();
    for d in [d_crop, d_pair, d_mix] {
        h.update(d);
    }
    let digest = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(BenchRun {
        workers: rayon::current_num_threads(),
        crops,
        pairs,
        tfmix: mixes,
        crops_per_s: crops as f64 / t_crop.max(1e-9),
        pairs_per_s: pairs as f64 / t_pair.max(1e-9),
        tfmix_per_s: mixes as f64 / t_mix.max(1e-9),
        digest,
    })
}

/// Measures crop, full-pair and token-mixing throughput on one worker
/// and on `workers` (default: all cores).
pub fn cmd_bench(opts: &BenchOptions) -> Result<BenchReport> {
    if opts.n == Some(0) {
        return Err(usage("--n must be >= 1"));
    }
    let pipeline = open_pipeline(&opts.config, opts.seed)?;
    let single = with_workers(Some(1), || bench_run(&pipeline, opts))??;
    let multi_workers = opts.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let multi = with_workers(Some(multi_workers), || bench_run(&pipeline, opts))??;
    Ok(BenchReport {
        digest_match: single.digest == multi.digest,
        single,
        multi,
    })
}

#[derive(Debug, Clone)]
pub struct PreviewOptions {
    pub config: PathBuf,
    pub n: usize,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub epoch: u64,
}

/// Renders the first `n` samples of an epoch into one grid image plus a
/// `<out>.legend.txt` sidecar.
pub fn cmd_preview(opts: &PreviewOptions) -> Result<preview::PreviewLayout> {
    if opts.n == 0 {
        return Err(usage("--n must be >= 1"));
    }
    let pipeline = open_pipeline(&opts.config, opts.seed)?;
    if opts.epoch >= pipeline.config().epochs {
        bail!("epoch {} not below configured epochs {}", opts.epoch, pipeline.config().epochs);
    }
    let samples = (0..opts.n as u64)
        .into_par_iter()
        .map(|i| pipeline.build(opts.epoch, i).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let (img, layout) = preview::compose(&samples);
    if let Some(dir) = opts.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.save(&opts.out).with_context(|| format!("writing {}", opts.out.display()))?;
    fs::write(preview::legend_path(&opts.out), preview::legend(&samples, &layout))?;
    Ok(layout)
}
