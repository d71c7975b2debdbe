//! Monte-Carlo crop and mixing statistics.
//!
//! Targets are synthetic boxes on a virtual 1920x1080 frame with aspect
//! ratio in [1/3, 3] and area between 0.1 % and 10 % of the frame, so no
//! dataset is needed. Samples are computed in parallel and reduced in
//! index order, so reports do not depend on the worker count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cropping::{AugPolicy, Cropper};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CropKind, JitterParams, Point};
use crate::mixing::{tfmix, TfmixConfig, TokenGrid, TokenMask, TokenStats};
use crate::rng::{rng_for, uniform, Stage};
use rand::Rng;

pub const VIRTUAL_FRAME: (f64, f64) = (1920.0, 1080.0);
pub const SWEEP_SHIFTS: [f64; 4] = [2.0, 3.0, 4.0, 5.0];
pub const SWEEP_SCALES: [f64; 4] = [0.15, 0.25, 0.35, 0.45];

/// Fixed-range histogram with under- and overflow bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    pub total: u64,
    /// Smallest and largest observed values.
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
            total: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    pub fn add(&mut self, v: f64) {
        self.total += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let k = ((v - self.lo) / (self.hi - self.lo) * bins as f64) as usize;
            self.counts[k.min(bins - 1)] += 1;
        }
    }

    pub fn from_values(lo: f64, hi: f64, bins: usize, values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::new(lo, hi, bins);
        values.into_iter().for_each(|v| h.add(v));
        h
    }

    /// Bin masses in order: underflow, bins, overflow.
    pub fn masses(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len() + 2];
        }
        let t = self.total as f64;
        std::iter::once(self.underflow)
            .chain(self.counts.iter().copied())
            .chain(std::iter::once(self.overflow))
            .map(|c| c as f64 / t)
            .collect()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
            + (self.underflow > 0) as usize
            + (self.overflow > 0) as usize
    }

    /// Width of the observed value range.
    pub fn support_width(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.max - self.min
        }
    }

    fn bin_edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * k as f64, self.lo + w * (k + 1) as f64)
    }

    /// Rows of `name,lo,hi,count,mass`.
    pub fn write_csv(&self, name: &str, out: &mut String) {
        let m = self.masses();
        let _ = writeln!(out, "{name},-inf,{},{},{}", self.lo, self.underflow, m[0]);
        for (k, c) in self.counts.iter().enumerate() {
            let (a, b) = self.bin_edges(k);
            let _ = writeln!(out, "{name},{a},{b},{c},{}", m[k + 1]);
        }
        let _ = writeln!(out, "{name},{},inf,{},{}", self.hi, self.overflow, m[m.len() - 1]);
    }
}

/// Samples a target box on the virtual frame.
pub fn synthetic_target<R: Rng + ?Sized>(rng: &mut R) -> BBox {
    let (fw, fh) = VIRTUAL_FRAME;
    let aspect = uniform(rng, (1.0f64 / 3.0).ln(), 3.0f64.ln()).exp();
    let area = uniform(rng, 0.001, 0.1) * fw * fh;
    let w = (area * aspect).sqrt();
    let h = (area / aspect).sqrt();
    let cx = uniform(rng, w / 2.0, fw - w / 2.0);
    let cy = uniform(rng, h / 2.0, fh - h / 2.0);
    BBox::from_center(Point::new(cx, cy), w, h)
}

#[derive(Debug, Clone, Copy)]
struct CropSample {
    kind: CropKind,
    gamma: f64,
    center_inside: bool,
    scale_in_patch: f64,
    center_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub cropper: String,
    pub n_samples: u64,
    /// Non-boundary samples whose target center lies outside the crop.
    pub uninformative: u64,
    pub uninformative_rate: f64,
    pub boundary: u64,
    pub boundary_rate: f64,
    pub gamma_mean: f64,
    /// Population variance of the realized γ.
    pub gamma_variance: f64,
    pub gamma_histogram: Histogram,
    /// Target size `sqrt(w h)` in output-patch pixels.
    pub target_scale_histogram: Histogram,
    /// Chebyshev distance between target and crop centers over the crop
    /// half-side.
    pub center_offset_histogram: Histogram,
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report crop-stats");
        let _ = writeln!(s, "cropper {}", self.cropper);
        let _ = writeln!(s, "n_samples {}", self.n_samples);
        let _ = writeln!(s, "uninformative {}", self.uninformative);
        let _ = writeln!(s, "uninformative_rate {}", self.uninformative_rate);
        let _ = writeln!(s, "boundary {}", self.boundary);
        let _ = writeln!(s, "boundary_rate {}", self.boundary_rate);
        let _ = writeln!(s, "gamma_mean {}", self.gamma_mean);
        let _ = writeln!(s, "gamma_variance {}", self.gamma_variance);
        for (name, h) in self.histograms() {
            let _ = writeln!(
                s,
                "histogram {name} min {} max {} occupied_bins {}",
                h.min,
                h.max,
                h.occupied_bins()
            );
        }
        s
    }

    pub fn histograms(&self) -> [(&'static str, &Histogram); 3] {
        [
            ("gamma", &self.gamma_histogram),
            ("target_scale", &self.target_scale_histogram),
            ("center_offset", &self.center_offset_histogram),
        ]
    }

    pub fn histograms_csv(&self) -> String {
        let mut s = String::from("histogram,lo,hi,count,mass\n");
        for (name, h) in self.histograms() {
            h.write_csv(name, &mut s);
        }
        s
    }
}

fn describe(cropper: &Cropper) -> String {
    match cropper {
        Cropper::Orc => "orc".into(),
        Cropper::Legacy { gamma_fix } => format!("legacy(gamma_fix={gamma_fix})"),
    }
}

/// Crops `n` synthetic targets and summarizes the outcomes.
pub fn run_crop_stats(cropper: &Cropper, policy: &AugPolicy, n: u64, seed: u64) -> Result<StatsReport> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let out = policy.search_out_size as f64;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let target = synthetic_target(&mut rng_for(seed, 0, 0, i, Stage::Synthetic));
            let o = cropper.sample(&target, policy, &mut rng_for(seed, 0, 0, i, Stage::Crop))?;
            let w = &o.window.bbox;
            let side = o.window.side();
            Ok(CropSample {
                kind: o.kind,
                gamma: o.gamma,
                center_inside: w.contains(target.center()),
                scale_in_patch: target.scale() / side * out,
                center_offset: target.center().chebyshev(w.center()) / (side / 2.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let nf = n as f64;
    let uninformative = samples
        .iter()
        .filter(|s| s.kind != CropKind::Boundary && !s.center_inside)
        .count() as u64;
    let boundary = samples.iter().filter(|s| s.kind == CropKind::Boundary).count() as u64;
    let gamma_mean = samples.iter().map(|s| s.gamma).sum::<f64>() / nf;
    let gamma_variance = samples
        .iter()
        .map(|s| (s.gamma - gamma_mean).powi(2))
        .sum::<f64>()
        / nf;
    Ok(StatsReport {
        cropper: describe(cropper),
        n_samples: n,
        uninformative,
        uninformative_rate: uninformative as f64 / nf,
        boundary,
        boundary_rate: boundary as f64 / nf,
        gamma_mean,
        gamma_variance,
        gamma_histogram: Histogram::from_values(0.0, 10.0, 100, samples.iter().map(|s| s.gamma)),
        target_scale_histogram: Histogram::from_values(0.0, out, 256, samples.iter().map(|s| s.scale_in_patch)),
        center_offset_histogram: Histogram::from_values(0.0, 2.0, 100, samples.iter().map(|s| s.center_offset)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub shift: f64,
    pub scale: f64,
    pub report: StatsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "cropper,shift,scale,n,uninformative_rate,boundary_rate,gamma_mean,gamma_variance,\
             scale_min,scale_max,scale_occupied_bins\n",
        );
        for c in &self.cells {
            let r = &c.report;
            let h = &r.target_scale_histogram;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.cropper,
                c.shift,
                c.scale,
                r.n_samples,
                r.uninformative_rate,
                r.boundary_rate,
                r.gamma_mean,
                r.gamma_variance,
                h.min,
                h.max,
                h.occupied_bins()
            );
        }
        s
    }

    pub fn cell(&self, shift: f64, scale: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.shift == shift && c.scale == scale)
    }
}

/// Crop statistics over the grid `shifts x scales`. Each cell uses the
/// same seed, so cells differ only in the jitter parameters.
pub fn run_jitter_sweep(
    shifts: &[f64],
    scales: &[f64],
    cropper: &Cropper,
    policy: &AugPolicy,
    n: u64,
    seed: u64,
) -> Result<SweepReport> {
    let mut cells = Vec::with_capacity(shifts.len() * scales.len());
    for &shift in shifts {
        for &scale in scales {
            let p = AugPolicy {
                jitter: JitterParams::new(shift, scale)?,
                ..policy.clone()
            };
            cells.push(SweepCell {
                shift,
                scale,
                report: run_crop_stats(cropper, &p, n, seed)?,
            });
        }
    }
    Ok(SweepReport { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub n_mixes: u64,
    pub max_mean_residual: f64,
    pub max_std_residual: f64,
    /// Cases with a constant distractor, all mapped exactly to the search mean.
    pub degenerate_cases: u64,
    pub degenerate_exact: u64,
    pub fallbacks: u64,
    /// Largest occluded fraction among placements that met the threshold.
    pub max_accepted_occlusion: f64,
    pub occlusion_histogram: Histogram,
}

impl MixReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report mix-stats");
        let _ = writeln!(s, "n_mixes {}", self.n_mixes);
        let _ = writeln!(s, "max_mean_residual {:e}", self.max_mean_residual);
        let _ = writeln!(s, "max_std_residual {:e}", self.max_std_residual);
        let _ = writeln!(s, "degenerate_cases {}", self.degenerate_cases);
        let _ = writeln!(s, "degenerate_exact {}", self.degenerate_exact);
        let _ = writeln!(s, "fallbacks {}", self.fallbacks);
        let _ = writeln!(s, "max_accepted_occlusion {}", self.max_accepted_occlusion);
        let h = &self.occlusion_histogram;
        let _ = writeln!(s, "histogram occlusion min {} max {} occupied_bins {}", h.min, h.max, h.occupied_bins());
        s
    }

    pub fn histograms_csv(&self) -> String {
        let mut s = String::from("histogram,lo,hi,count,mass\n");
        self.occlusion_histogram.write_csv("occlusion", &mut s);
        s
    }
}

/// Moments of every element of the tokens selected by `mask`.
pub fn masked_moments(grid: &TokenGrid, mask: &TokenMask) -> TokenStats {
    let vals: Vec<f64> = mask.cells().flat_map(|(r, c)| grid.token(r, c).iter().copied()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    TokenStats { mean, std: var.sqrt() }
}

fn random_rect_mask<R: Rng + ?Sized>(rows: usize, cols: usize, max_h: usize, max_w: usize, rng: &mut R) -> TokenMask {
    let h = rng.random_range(1..=max_h.min(rows));
    let w = rng.random_range(1..=max_w.min(cols));
    let r0 = rng.random_range(0..=rows - h);
    let c0 = rng.random_range(0..=cols - w);
    let mut m = TokenMask::empty(rows, cols);
    for r in r0..r0 + h {
        for c in c0..c0 + w {
            m.set(r, c, true);
        }
    }
    m
}

fn random_grid<R: Rng + ?Sized>(rows: usize, cols: usize, dim: usize, constant: bool, rng: &mut R) -> Result<TokenGrid> {
    let mean = uniform(rng, -50.0, 200.0);
    let spread = uniform(rng, 0.1, 80.0);
    let values = (0..rows * cols * dim)
        .map(|_| if constant { mean } else { mean + spread * uniform(rng, -1.0, 1.0) })
        .collect();
    TokenGrid::new(rows, cols, dim, 16, values)
}

/// One synthetic mixing case: 16x16 grids with rectangular object masks.
/// Every tenth case uses a constant distractor.
pub fn mix_case(cfg: &TfmixConfig, seed: u64, i: u64) -> Result<MixCase> {
    let mut rng = rng_for(seed, 0, 0, i, Stage::Synthetic);
    let (rows, cols, dim) = (16, 16, 8);
    let search = random_grid(rows, cols, dim, false, &mut rng)?;
    let distractor = random_grid(rows, cols, dim, i % 10 == 9, &mut rng)?;
    let search_obj = random_rect_mask(rows, cols, 10, 10, &mut rng);
    let distractor_obj = random_rect_mask(rows, cols, 8, 8, &mut rng);
    let out = tfmix(&search, &search_obj, &distractor, &distractor_obj, cfg, &mut rng_for(seed, 0, 0, i, Stage::Mix))?;
    Ok(MixCase {
        search,
        search_obj,
        distractor,
        distractor_obj,
        outcome: out,
    })
}

#[derive(Debug, Clone)]
pub struct MixCase {
    pub search: TokenGrid,
    pub search_obj: TokenMask,
    pub distractor: TokenGrid,
    pub distractor_obj: TokenMask,
    pub outcome: crate::mixing::MixOutcome,
}

struct MixSample {
    mean_residual: f64,
    std_residual: f64,
    degenerate: bool,
    degenerate_exact: bool,
    fallback: bool,
    occluded: f64,
}

/// Residuals of the moment transfer over `n` synthetic mixes.
pub fn run_mix_stats(cfg: &TfmixConfig, n: u64, seed: u64) -> Result<MixReport> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let case = mix_case(cfg, seed, i)?;
            let out = &case.outcome;
            let got = masked_moments(&out.grid, &out.replaced);
            let want = out.stats_target;
            let degenerate = out.stats_source.std < crate::mixing::DEGENERATE_STD;
            let degenerate_exact = degenerate
                && out
                    .replaced
                    .cells()
                    .all(|(r, c)| out.grid.token(r, c).iter().all(|&v| v == want.mean));
            let (mean_residual, std_residual) = if degenerate {
                (0.0, 0.0)
            } else {
                (
                    (got.mean - want.mean).abs() / want.mean.abs().max(want.std),
                    (got.std - want.std).abs() / want.std,
                )
            };
            Ok(MixSample {
                mean_residual,
                std_residual,
                degenerate,
                degenerate_exact,
                fallback: out.fallback,
                occluded: out.occluded_fraction,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MixReport {
        n_mixes: n,
        max_mean_residual: samples.iter().map(|s| s.mean_residual).fold(0.0, f64::max),
        max_std_residual: samples.iter().map(|s| s.std_residual).fold(0.0, f64::max),
        degenerate_cases: samples.iter().filter(|s| s.degenerate).count() as u64,
        degenerate_exact: samples.iter().filter(|s| s.degenerate_exact).count() as u64,
        fallbacks: samples.iter().filter(|s| s.fallback).count() as u64,
        max_accepted_occlusion: samples
            .iter()
            .filter(|s| !s.fallback)
            .map(|s| s.occluded)
            .fold(0.0, f64::max),
        occlusion_histogram: Histogram::from_values(0.0, 1.0 + 1e-9, 20, samples.iter().map(|s| s.occluded)),
    })
}
