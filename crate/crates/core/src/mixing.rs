//! Token-level feature mixing and the image-level mixing baselines.
//!
//! Token mixing transplants a distractor object's tokens into a search
//! grid after matching their global mean and standard deviation to the
//! search object's tokens:
//!
//! ```text
//! t' = (t - mean_d) / std_d * std_s + mean_s
//! ```
//!
//! The functions accept arbitrary grids, so the same transfer can be
//! applied to features taken from any depth of a model.

use image::RgbImage;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::datasets::{Catalog, ObjectKey, SamplePair};
use crate::geometry::{BBox, Patch};
use crate::rng::uniform;

/// Below this distractor std the transfer maps every element to the
/// search mean.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Range of the token-image mixing ratio.
pub const TOKEN_IMAGE_RATIO: (f64, f64) = (0.3, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMethod {
    /// Token-level feature mixing.
    TokenFeature,
    CutmixBbox,
    TokenImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Uniform grid offset with occlusion control.
    Random,
    /// Keep the distractor tokens at their own grid coordinates.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfmixConfig {
    pub enabled: bool,
    pub method: MixMethod,
    /// Maximum covered fraction of the search object.
    pub occl_threshold: f64,
    pub patch_size: u32,
    /// Minimum cell overlap for a token to belong to an object.
    pub token_overlap_threshold: f64,
    pub same_category_first: bool,
    pub epoch_period: u32,
    /// Shifts the active phase of the epoch schedule.
    pub phase_offset: u32,
    pub max_placement_attempts: u32,
    pub placement: Placement,
}

impl Default for TfmixConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            method: MixMethod::TokenFeature,
            occl_threshold: 0.5,
            patch_size: 16,
            token_overlap_threshold: 0.5,
            same_category_first: true,
            epoch_period: 11,
            phase_offset: 0,
            max_placement_attempts: 10,
            placement: Placement::Random,
        }
    }
}

impl TfmixConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.occl_threshold > 0.0 && self.occl_threshold <= 1.0) {
            return bad(format!("tfmix.occl_threshold {} not in (0, 1]", self.occl_threshold));
        }
        if !(self.token_overlap_threshold > 0.0 && self.token_overlap_threshold <= 1.0) {
            return bad(format!(
                "tfmix.token_overlap_threshold {} not in (0, 1]",
                self.token_overlap_threshold
            ));
        }
        if self.epoch_period < 1 {
            return bad("tfmix.epoch_period must be >= 1".into());
        }
        if self.patch_size < 1 {
            return bad("tfmix.patch_size must be >= 1".into());
        }
        if self.max_placement_attempts < 1 {
            return bad("tfmix.max_placement_attempts must be >= 1".into());
        }
        Ok(())
    }
}

/// Row-major grid of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patch_size: u32,
    pub values: Vec<f64>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, patch_size: u32, values: Vec<f64>) -> Result<Self> {
        if rows * cols == 0 || dim == 0 {
            return Err(Error::invalid("token grid must have at least one token"));
        }
        if values.len() != rows * cols * dim {
            return Err(Error::invalid(format!(
                "token grid {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token grid contains non-finite values"));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            patch_size,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn token_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.cols + c) * self.dim;
        &mut self.values[i..i + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl TokenMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| (i / self.cols, i % self.cols))
    }

    /// `(row, col, height, width)` of the set bits, `None` when empty.
    pub fn bounding_rect(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for (r, c) in self.cells() {
            any = true;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        any.then(|| (r0, c0, r1 - r0 + 1, c1 - c0 + 1))
    }

    fn check_against(&self, grid: &TokenGrid) -> Result<()> {
        if self.rows != grid.rows || self.cols != grid.cols || self.bits.len() != grid.len() {
            return Err(Error::invalid(format!(
                "mask {}x{} does not match grid {}x{}",
                self.rows, self.cols, grid.rows, grid.cols
            )));
        }
        Ok(())
    }
}

/// Global scalar moments over every element of a token set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub mean: f64,
    pub std: f64,
}

/// Identity-flatten tokenizer: token `(r, c)` is the raster scan of the
/// RGB pixels in cell `(r, c)`, channels interleaved.
pub fn tokenize(patch: &Patch, patch_size: u32) -> Result<TokenGrid> {
    tokenize_image(&patch.pixels, patch_size)
}

pub fn tokenize_image(img: &RgbImage, patch_size: u32) -> Result<TokenGrid> {
    let (w, h) = img.dimensions();
    if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(Error::invalid(format!(
            "image {w}x{h} is not divisible into {patch_size} px cells"
        )));
    }
    let ps = patch_size as usize;
    let (rows, cols) = (h as usize / ps, w as usize / ps);
    let dim = 3 * ps * ps;
    let raw = img.as_raw();
    let mut values = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for y in r * ps..(r + 1) * ps {
                let start = (y * w as usize + c * ps) * 3;
                values.extend(raw[start..start + ps * 3].iter().map(|&v| v as f64));
            }
        }
    }
    TokenGrid::new(rows, cols, dim, patch_size, values)
}

/// Inverse of [`tokenize`] for identity-projected grids. Values are
/// rounded and clamped to `[0, 255]`.
pub fn untokenize(grid: &TokenGrid) -> Result<RgbImage> {
    let ps = grid.patch_size as usize;
    if grid.dim != 3 * ps * ps {
        return Err(Error::invalid(format!(
            "grid dim {} is not an identity projection of {ps} px cells",
            grid.dim
        )));
    }
    let (w, h) = (grid.cols * ps, grid.rows * ps);
    let mut img = RgbImage::new(w as u32, h as u32);
    let raw: &mut [u8] = img.as_mut();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let tok = grid.token(r, c);
            for dy in 0..ps {
                let dst = ((r * ps + dy) * w + c * ps) * 3;
                for (o, v) in raw[dst..dst + ps * 3].iter_mut().zip(&tok[dy * ps * 3..(dy + 1) * ps * 3]) {
                    *o = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(img)
}

/// Seeded dense linear token projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjection {
    pub in_dim: usize,
    pub out_dim: usize,
    weights: Vec<f64>,
}

impl LinearProjection {
    pub fn seeded<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| uniform(rng, -scale, scale))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
        }
    }

    pub fn apply(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        if grid.dim != self.in_dim {
            return Err(Error::invalid(format!(
                "projection expects dim {}, grid has {}",
                self.in_dim, grid.dim
            )));
        }
        let mut values = Vec::with_capacity(grid.len() * self.out_dim);
        for tok in grid.values.chunks(self.in_dim) {
            for row in self.weights.chunks(self.in_dim) {
                values.push(row.iter().zip(tok).map(|(w, x)| w * x).sum());
            }
        }
        TokenGrid::new(grid.rows, grid.cols, self.out_dim, grid.patch_size, values)
    }
}

/// Cells whose overlap with `box_in_patch` covers at least
/// `overlap_threshold` of the cell area.
pub fn object_token_mask(box_in_patch: &BBox, grid: &TokenGrid, overlap_threshold: f64) -> TokenMask {
    let ps = grid.patch_size as f64;
    let mut mask = TokenMask::empty(grid.rows, grid.cols);
    let cell_area = ps * ps;
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let cell = BBox {
                x: c as f64 * ps,
                y: r as f64 * ps,
                w: ps,
                h: ps,
            };
            if cell.intersection_area(box_in_patch) / cell_area >= overlap_threshold {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Mean and population std over all scalar elements of the masked tokens.
pub fn token_stats(grid: &TokenGrid, mask: &TokenMask) -> Result<TokenStats> {
    mask.check_against(grid)?;
    let n = mask.count() * grid.dim;
    if n == 0 {
        return Err(Error::EmptyObject);
    }
    let mean = mask
        .cells()
        .flat_map(|(r, c)| grid.token(r, c).iter())
        .sum::<f64>()
        / n as f64;
    let var = mask
        .cells()
        .flat_map(|(r, c)| grid.token(r, c).iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    Ok(TokenStats {
        mean,
        std: var.sqrt(),
    })
}

pub fn normalize_transfer(tokens: &[f64], stats_d: TokenStats, stats_s: TokenStats) -> Vec<f64> {
    if stats_d.std < DEGENERATE_STD {
        return vec![stats_s.mean; tokens.len()];
    }
    let gain = stats_s.std / stats_d.std;
    tokens
        .iter()
        .map(|x| (x - stats_d.mean) * gain + stats_s.mean)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub grid: TokenGrid,
    pub replaced: TokenMask,
    pub occluded_fraction: f64,
    /// Top-left grid position of the distractor footprint.
    pub offset: (usize, usize),
    /// Set when no attempted placement met the occlusion threshold and the
    /// least-occluding one was used instead.
    pub fallback: bool,
    pub attempts: u32,
    /// Moments of the distractor object tokens.
    pub stats_source: TokenStats,
    /// Moments of the search object tokens.
    pub stats_target: TokenStats,
    pub distractor_id: Option<String>,
}

fn placed_overlap(
    distractor_obj: &TokenMask,
    origin: (usize, usize),
    at: (usize, usize),
    search_obj: &TokenMask,
) -> usize {
    distractor_obj
        .cells()
        .filter(|&(r, c)| search_obj.get(r - origin.0 + at.0, c - origin.1 + at.1))
        .count()
}

/// Token-level feature mixing of a distractor object into a search grid.
pub fn tfmix<R: Rng + ?Sized>(
    search: &TokenGrid,
    search_obj: &TokenMask,
    distractor: &TokenGrid,
    distractor_obj: &TokenMask,
    cfg: &TfmixConfig,
    rng: &mut R,
) -> Result<MixOutcome> {
    if search.dim != distractor.dim || search.patch_size != distractor.patch_size {
        return Err(Error::invalid(format!(
            "grids disagree: dim {} vs {}, patch size {} vs {}",
            search.dim, distractor.dim, search.patch_size, distractor.patch_size
        )));
    }
    search_obj.check_against(search)?;
    distractor_obj.check_against(distractor)?;
    let stats_target = token_stats(search, search_obj)?;
    let stats_source = token_stats(distractor, distractor_obj)?;
    let (r0, c0, fh, fw) = distractor_obj.bounding_rect().ok_or(Error::EmptyObject)?;
    if fh > search.rows || fw > search.cols {
        return Err(Error::FootprintTooLarge {
            footprint_rows: fh,
            footprint_cols: fw,
            rows: search.rows,
            cols: search.cols,
        });
    }

    let obj_count = search_obj.count() as f64;
    let fraction = |at| placed_overlap(distractor_obj, (r0, c0), at, search_obj) as f64 / obj_count;

    let (at, occluded_fraction, fallback, attempts) = match cfg.placement {
        Placement::Fixed => {
            if r0 + fh > search.rows || c0 + fw > search.cols {
                return Err(Error::FootprintTooLarge {
                    footprint_rows: r0 + fh,
                    footprint_cols: c0 + fw,
                    rows: search.rows,
                    cols: search.cols,
                });
            }
            let f = fraction((r0, c0));
            ((r0, c0), f, f > cfg.occl_threshold, 1)
        }
        Placement::Random => {
            let mut best: Option<((usize, usize), f64)> = None;
            let mut chosen = None;
            let mut attempts = 0;
            for _ in 0..cfg.max_placement_attempts {
                attempts += 1;
                let at = (
                    rng.random_range(0..=search.rows - fh),
                    rng.random_range(0..=search.cols - fw),
                );
                let f = fraction(at);
                if f <= cfg.occl_threshold {
                    chosen = Some((at, f));
                    break;
                }
                if best.is_none_or(|(_, bf)| f < bf) {
                    best = Some((at, f));
                }
            }
            match chosen {
                Some((at, f)) => (at, f, false, attempts),
                None => {
                    let (at, f) = best.expect("at least one placement attempt");
                    (at, f, true, attempts)
                }
            }
        }
    };

    let mut grid = search.clone();
    let mut replaced = TokenMask::empty(search.rows, search.cols);
    for (r, c) in distractor_obj.cells() {
        let (tr, tc) = (r - r0 + at.0, c - c0 + at.1);
        let moved = normalize_transfer(distractor.token(r, c), stats_source, stats_target);
        grid.token_mut(tr, tc).copy_from_slice(&moved);
        replaced.set(tr, tc, true);
    }

    Ok(MixOutcome {
        grid,
        replaced,
        occluded_fraction,
        offset: at,
        fallback,
        attempts,
        stats_source,
        stats_target,
        distractor_id: None,
    })
}

/// Occlusion control shared by the image-level mixes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMixParams {
    pub occl_threshold: f64,
    pub max_attempts: u32,
}

impl From<&TfmixConfig> for ImageMixParams {
    fn from(cfg: &TfmixConfig) -> Self {
        Self {
            occl_threshold: cfg.occl_threshold,
            max_attempts: cfg.max_placement_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMixOutcome {
    pub patch: Patch,
    /// Pixel rectangle written in the search patch, `None` when nothing was
    /// pasted.
    pub region: Option<BBox>,
    pub occluded_fraction: f64,
    pub fallback: bool,
}

/// Integer pixel rectangle `(x, y, w, h)` covering `b`, clipped to an
/// `n x n` patch.
fn pixel_rect(b: &BBox, n: u32) -> Option<(u32, u32, u32, u32)> {
    let x0 = b.x.floor().max(0.0);
    let y0 = b.y.floor().max(0.0);
    let x1 = b.right().ceil().min(n as f64);
    let y1 = b.bottom().ceil().min(n as f64);
    (x1 > x0 && y1 > y0).then_some((x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
}

fn visible_target(b: &BBox, n: u32) -> Option<BBox> {
    b.intersect(&BBox {
        x: 0.0,
        y: 0.0,
        w: n as f64,
        h: n as f64,
    })
}

/// Draws placements until the occlusion measure is within threshold,
/// otherwise returns the least occluding attempt flagged as fallback.
fn place_with_occlusion<R: Rng + ?Sized>(
    n: u32,
    rw: u32,
    rh: u32,
    params: &ImageMixParams,
    rng: &mut R,
    mut occlusion: impl FnMut(u32, u32) -> f64,
) -> ((u32, u32), f64, bool) {
    let mut best: Option<((u32, u32), f64)> = None;
    for _ in 0..params.max_attempts.max(1) {
        let at = (rng.random_range(0..=n - rw), rng.random_range(0..=n - rh));
        let f = occlusion(at.0, at.1);
        if f <= params.occl_threshold {
            return (at, f, false);
        }
        if best.is_none_or(|(_, bf)| f < bf) {
            best = Some((at, f));
        }
    }
    let (at, f) = best.expect("at least one attempt");
    (at, f, true)
}

fn check_same_size(search: &Patch, distractor: &Patch) -> Result<()> {
    if search.size() != distractor.size() {
        return Err(Error::invalid(format!(
            "search patch {} px and distractor patch {} px differ",
            search.size(),
            distractor.size()
        )));
    }
    Ok(())
}

/// Pastes the distractor's box rectangle, copied 1:1, at a random
/// position in the search patch.
pub fn cutmix_bbox<R: Rng + ?Sized>(
    search: &Patch,
    search_box: &BBox,
    distractor: &Patch,
    distractor_box: &BBox,
    params: &ImageMixParams,
    rng: &mut R,
) -> Result<ImageMixOutcome> {
    let n = search.size();
    let dn = distractor.size();
    let (sx, sy, rw, rh) = pixel_rect(distractor_box, dn).ok_or(Error::EmptyObject)?;
    if rw > n || rh > n {
        return Err(Error::FootprintTooLarge {
            footprint_rows: rh as usize,
            footprint_cols: rw as usize,
            rows: n as usize,
            cols: n as usize,
        });
    }
    let target = visible_target(search_box, n);
    let ((px, py), occluded_fraction, fallback) = place_with_occlusion(n, rw, rh, params, rng, |x, y| {
        let placed = BBox {
            x: x as f64,
            y: y as f64,
            w: rw as f64,
            h: rh as f64,
        };
        target.map_or(0.0, |t| t.intersection_area(&placed) / t.area())
    });

    let mut out = search.clone();
    for dy in 0..rh {
        for dx in 0..rw {
            let src = *distractor.pixels.get_pixel(sx + dx, sy + dy);
            out.pixels.put_pixel(px + dx, py + dy, src);
            out.validity[((py + dy) * n + px + dx) as usize] =
                distractor.validity[((sy + dy) * dn + sx + dx) as usize];
        }
    }
    Ok(ImageMixOutcome {
        patch: out,
        region: Some(BBox {
            x: px as f64,
            y: py as f64,
            w: rw as f64,
            h: rh as f64,
        }),
        occluded_fraction,
        fallback,
    })
}

/// Pastes only the mask-true distractor pixels at a random position.
/// `mask` is row-major over the distractor patch.
pub fn paste_mask<R: Rng + ?Sized>(
    search: &Patch,
    search_box: &BBox,
    distractor: &Patch,
    mask: &[bool],
    params: &ImageMixParams,
    rng: &mut R,
) -> Result<ImageMixOutcome> {
    let n = search.size();
    let dn = distractor.size();
    if mask.len() != (dn * dn) as usize {
        return Err(Error::invalid(format!(
            "mask has {} entries, distractor patch needs {}",
            mask.len(),
            dn * dn
        )));
    }
    let as_grid = TokenMask {
        rows: dn as usize,
        cols: dn as usize,
        bits: mask.to_vec(),
    };
    let Some((my, mx, mh, mw)) = as_grid.bounding_rect() else {
        return Ok(ImageMixOutcome {
            patch: search.clone(),
            region: None,
            occluded_fraction: 0.0,
            fallback: false,
        });
    };
    let (mx, my, mw, mh) = (mx as u32, my as u32, mw as u32, mh as u32);
    if mw > n || mh > n {
        return Err(Error::FootprintTooLarge {
            footprint_rows: mh as usize,
            footprint_cols: mw as usize,
            rows: n as usize,
            cols: n as usize,
        });
    }
    let target = visible_target(search_box, n);
    let ((px, py), occluded_fraction, fallback) = place_with_occlusion(n, mw, mh, params, rng, |x, y| {
        let Some(t) = target else { return 0.0 };
        let mut covered = 0usize;
        for dy in 0..mh {
            for dx in 0..mw {
                if mask[((my + dy) * dn + mx + dx) as usize] {
                    let (cx, cy) = ((x + dx) as f64 + 0.5, (y + dy) as f64 + 0.5);
                    if cx >= t.x && cx < t.right() && cy >= t.y && cy < t.bottom() {
                        covered += 1;
                    }
                }
            }
        }
        covered as f64 / t.area()
    });

    let mut out = search.clone();
    for dy in 0..mh {
        for dx in 0..mw {
            let si = ((my + dy) * dn + mx + dx) as usize;
            if mask[si] {
                out.pixels
                    .put_pixel(px + dx, py + dy, *distractor.pixels.get_pixel(mx + dx, my + dy));
                out.validity[((py + dy) * n + px + dx) as usize] = distractor.validity[si];
            }
        }
    }
    Ok(ImageMixOutcome {
        patch: out,
        region: Some(BBox {
            x: px as f64,
            y: py as f64,
            w: mw as f64,
            h: mh as f64,
        }),
        occluded_fraction,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenImageMixOutcome {
    pub patch: Patch,
    pub ratio: f64,
    /// Row-major indices of the replaced cells, ascending.
    pub cells: Vec<usize>,
}

/// Replaces a random 30-50 % of the search patch's cells with the
/// co-located distractor cells.
pub fn token_image_mix<R: Rng + ?Sized>(
    search: &Patch,
    distractor: &Patch,
    patch_size: u32,
    rng: &mut R,
) -> Result<TokenImageMixOutcome> {
    let ratio = uniform(rng, TOKEN_IMAGE_RATIO.0, TOKEN_IMAGE_RATIO.1);
    token_image_mix_with_ratio(search, distractor, patch_size, ratio, rng)
}

/// [`token_image_mix`] with a fixed ratio: `round(ratio * N)` cells.
pub fn token_image_mix_with_ratio<R: Rng + ?Sized>(
    search: &Patch,
    distractor: &Patch,
    patch_size: u32,
    ratio: f64,
    rng: &mut R,
) -> Result<TokenImageMixOutcome> {
    check_same_size(search, distractor)?;
    let n = search.size();
    if patch_size == 0 || !n.is_multiple_of(patch_size) {
        return Err(Error::invalid(format!(
            "patch {n} px is not divisible into {patch_size} px cells"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("ratio {ratio} not in [0, 1]")));
    }
    let per_row = (n / patch_size) as usize;
    let total = per_row * per_row;
    let k = ((ratio * total as f64).round() as usize).min(total);
    let mut cells = sample(rng, total, k).into_vec();
    cells.sort_unstable();
    let mut out = search.clone();
    for &cell in &cells {
        replace_cell(&mut out, distractor, cell, per_row, patch_size);
    }
    Ok(TokenImageMixOutcome {
        patch: out,
        ratio,
        cells,
    })
}

/// Picks a distractor object: uniformly among other members of
/// `category` when there are any, otherwise uniformly among all other
/// objects. Returns a pair drawn for it.
pub fn select_distractor<R: Rng + ?Sized>(
    catalog: &Catalog,
    category: Option<&str>,
    exclude: ObjectKey,
    rng: &mut R,
    max_frame_gap: usize,
) -> Result<SamplePair> {
    let same: Vec<ObjectKey> = category
        .map(|c| catalog.category_members(c))
        .unwrap_or_default()
        .iter()
        .copied()
        .filter(|k| *k != exclude)
        .collect();
    let pool = if same.is_empty() {
        catalog
            .objects()
            .iter()
            .copied()
            .filter(|k| *k != exclude)
            .collect()
    } else {
        same
    };
    if pool.is_empty() {
        return Err(Error::NoDistractor(format!("no object other than {exclude}")));
    }
    let key = pool[rng.random_range(0..pool.len())];
    catalog.pair_for(key, rng, max_frame_gap)
}

fn replace_cell(out: &mut Patch, src: &Patch, cell: usize, per_row: usize, ps: u32) {
    let n = out.size();
    let (r, c) = ((cell / per_row) as u32, (cell % per_row) as u32);
    for y in r * ps..(r + 1) * ps {
        for x in c * ps..(c + 1) * ps {
            out.pixels.put_pixel(x, y, *src.pixels.get_pixel(x, y));
            let i = (y * n + x) as usize;
            out.validity[i] = src.validity[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{center_crop, PatchTransform};
    use crate::rng::{rng_for, Stage};

    fn grid_from_fn(rows: usize, cols: usize, dim: usize, f: impl Fn(usize, usize, usize) -> f64) -> TokenGrid {
        let mut v = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                for d in 0..dim {
                    v.push(f(r, c, d));
                }
            }
        }
        TokenGrid::new(rows, cols, dim, 16, v).unwrap()
    }

    fn rect_mask(rows: usize, cols: usize, r0: usize, c0: usize, h: usize, w: usize) -> TokenMask {
        let mut m = TokenMask::empty(rows, cols);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                m.set(r, c, true);
            }
        }
        m
    }

    fn noise_patch(n: u32, seed: u64) -> Patch {
        let mut rng = rng_for(seed, 0, 0, 0, Stage::Synthetic);
        let mut img = RgbImage::new(n, n);
        for v in img.iter_mut() {
            *v = rng.random();
        }
        let crop = center_crop(&BBox::new(0.0, 0.0, n as f64, n as f64).unwrap(), 1.0).unwrap();
        Patch {
            pixels: img,
            validity: vec![true; (n * n) as usize],
            to_image: PatchTransform::for_crop(&crop, n),
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs() + 1e-12
    }

    #[test]
    fn tokenize_shapes_and_readback() {
        let p = noise_patch(256, 1);
        let g = tokenize(&p, 16).unwrap();
        assert_eq!((g.rows, g.cols, g.dim), (16, 16, 768));
        let mut expected = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                expected.extend(p.pixels.get_pixel(x, y).0.iter().map(|&v| v as f64));
            }
        }
        assert_eq!(g.token(0, 0), &expected[..]);
        let g1 = tokenize(&noise_patch(16, 2), 16).unwrap();
        assert_eq!((g1.rows, g1.cols), (1, 1));
        assert!(tokenize(&noise_patch(40, 3), 16).is_err());
    }

    #[test]
    fn tokenize_round_trip() {
        let p = noise_patch(64, 4);
        let g = tokenize(&p, 8).unwrap();
        assert_eq!(untokenize(&g).unwrap(), p.pixels);
    }

    #[test]
    fn projection_changes_dim() {
        let mut rng = rng_for(1, 0, 0, 0, Stage::Projection);
        let g = tokenize(&noise_patch(32, 5), 16).unwrap();
        let proj = LinearProjection::seeded(768, 64, &mut rng);
        let out = proj.apply(&g).unwrap();
        assert_eq!((out.rows, out.cols, out.dim), (2, 2, 64));
        assert!(untokenize(&out).is_err());
    }

    #[test]
    fn object_mask_examples() {
        let g = grid_from_fn(16, 16, 1, |_, _, _| 0.0);
        let all = object_token_mask(&BBox::new(0.0, 0.0, 256.0, 256.0).unwrap(), &g, 0.5);
        assert_eq!(all.count(), 256);
        let one = object_token_mask(&BBox::new(0.0, 0.0, 16.0, 16.0).unwrap(), &g, 0.5);
        assert_eq!(one.cells().collect::<Vec<_>>(), vec![(0, 0)]);
        let two = object_token_mask(&BBox::new(0.0, 0.0, 24.0, 16.0).unwrap(), &g, 0.5);
        assert_eq!(two.cells().collect::<Vec<_>>(), vec![(0, 0), (0, 1)]);
        let none = object_token_mask(&BBox::new(2.0, 2.0, 4.0, 4.0).unwrap(), &g, 0.5);
        assert_eq!(none.count(), 0);
    }

    #[test]
    fn token_stats_examples() {
        let g = grid_from_fn(2, 2, 3, |_, _, _| 7.5);
        let m = rect_mask(2, 2, 0, 0, 2, 2);
        assert_eq!(token_stats(&g, &m).unwrap(), TokenStats { mean: 7.5, std: 0.0 });
        let g = grid_from_fn(1, 3, 4, |_, c, _| [1.0, 3.0, 100.0][c]);
        let m = rect_mask(1, 3, 0, 0, 1, 2);
        assert_eq!(token_stats(&g, &m).unwrap(), TokenStats { mean: 2.0, std: 1.0 });
        assert!(matches!(token_stats(&g, &TokenMask::empty(1, 3)), Err(Error::EmptyObject)));
    }

    #[test]
    fn normalize_transfer_examples() {
        let d = TokenStats { mean: 3.0, std: 2.0 };
        let s = TokenStats { mean: 1.0, std: 4.0 };
        assert_eq!(normalize_transfer(&[5.0], d, s), vec![5.0]);
        let xs = [0.5, -3.0, 17.25];
        assert_eq!(normalize_transfer(&xs, d, d), xs.to_vec());
        let flat = TokenStats { mean: 9.0, std: 0.0 };
        assert_eq!(normalize_transfer(&[9.0, 9.0], flat, s), vec![1.0, 1.0]);
    }

    #[test]
    fn transfer_is_invariant_to_affine_maps_of_the_source() {
        let mut rng = rng_for(6, 0, 0, 0, Stage::Mix);
        for _ in 0..200 {
            let xs: Vec<f64> = (0..50).map(|_| uniform(&mut rng, -10.0, 10.0)).collect();
            let a = uniform(&mut rng, 0.1, 5.0);
            let b = uniform(&mut rng, -20.0, 20.0);
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let stats = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
                TokenStats { mean: m, std: s }
            };
            let target = TokenStats { mean: 3.0, std: 2.0 };
            let tx = normalize_transfer(&xs, stats(&xs), target);
            let ty = normalize_transfer(&ys, stats(&ys), target);
            for (u, v) in tx.iter().zip(&ty) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn occlusion_rejects_over_threshold_placement() {
        // Search object: 10 tokens in row 0, cols 0..10. A 1x6 distractor
        // footprint at column 0 covers 6 of them: 0.6 > 0.5, rejected.
        let search = grid_from_fn(4, 16, 2, |r, c, d| (r * 31 + c * 7 + d) as f64);
        let search_obj = rect_mask(4, 16, 0, 0, 1, 10);
        let distractor = grid_from_fn(4, 16, 2, |r, c, d| (r + c * d) as f64 + 0.5 * d as f64);
        let distractor_obj = rect_mask(4, 16, 2, 3, 1, 6);
        let cfg = TfmixConfig::default();
        let mut rng = rng_for(7, 0, 0, 0, Stage::Mix);
        for _ in 0..500 {
            let out = tfmix(&search, &search_obj, &distractor, &distractor_obj, &cfg, &mut rng).unwrap();
            assert!(!out.fallback);
            assert!(out.occluded_fraction <= 0.5);
            if out.offset == (0, 0) {
                panic!("placement overlapping 6 of 10 tokens was accepted");
            }
        }
        assert_eq!(placed_overlap(&distractor_obj, (2, 3), (0, 0), &search_obj), 6);
    }

    #[test]
    fn moment_matching_on_replaced_set() {
        let mut rng = rng_for(8, 0, 0, 0, Stage::Mix);
        let cfg = TfmixConfig::default();
        for _ in 0..300 {
            let search = grid_from_fn(8, 8, 12, |_, _, _| 0.0);
            let search = TokenGrid {
                values: search.values.iter().map(|_| uniform(&mut rng, 0.0, 255.0)).collect(),
                ..search
            };
            let distractor = TokenGrid {
                values: search.values.iter().map(|_| uniform(&mut rng, -50.0, 50.0)).collect(),
                ..search.clone()
            };
            let sh = rng.random_range(1..=8);
            let sw = rng.random_range(1..=8);
            let so = rect_mask(8, 8, rng.random_range(0..=8 - sh), rng.random_range(0..=8 - sw), sh, sw);
            let dh = rng.random_range(1..=8);
            let dw = rng.random_range(1..=8);
            let dobj = rect_mask(8, 8, rng.random_range(0..=8 - dh), rng.random_range(0..=8 - dw), dh, dw);
            let out = tfmix(&search, &so, &distractor, &dobj, &cfg, &mut rng).unwrap();
            let got = token_stats(&out.grid, &out.replaced).unwrap();
            assert!(rel_close(got.mean, out.stats_target.mean, 1e-5));
            assert!(rel_close(got.std, out.stats_target.std, 1e-5));
            assert_eq!(out.replaced.count(), dobj.count());
            // Untouched tokens are bit-identical.
            for r in 0..8 {
                for c in 0..8 {
                    if !out.replaced.get(r, c) {
                        assert_eq!(out.grid.token(r, c), search.token(r, c));
                    }
                }
            }
            if !out.fallback {
                assert!(out.occluded_fraction <= cfg.occl_threshold);
            }
        }
    }

    #[test]
    fn full_grid_boundary_configuration() {
        let search = grid_from_fn(4, 4, 3, |r, c, d| (r + c + d) as f64);
        let distractor = grid_from_fn(4, 4, 3, |r, c, d| (r * c + d) as f64);
        let all = rect_mask(4, 4, 0, 0, 4, 4);
        let cfg = TfmixConfig {
            occl_threshold: 1.0,
            ..TfmixConfig::default()
        };
        let mut rng = rng_for(9, 0, 0, 0, Stage::Mix);
        let out = tfmix(&search, &all, &distractor, &all, &cfg, &mut rng).unwrap();
        assert_eq!(out.occluded_fraction, 1.0);
        assert_eq!(out.replaced.count(), 16);
        assert!(!out.fallback);
    }

    #[test]
    fn fallback_picks_minimum_overlap() {
        let search = grid_from_fn(2, 2, 1, |r, c, _| (r * 2 + c) as f64);
        let all = rect_mask(2, 2, 0, 0, 2, 2);
        let one = rect_mask(2, 2, 1, 1, 1, 1);
        let cfg = TfmixConfig {
            occl_threshold: 0.1,
            ..TfmixConfig::default()
        };
        let mut rng = rng_for(10, 0, 0, 0, Stage::Mix);
        let out = tfmix(&search, &all, &search, &one, &cfg, &mut rng).unwrap();
        assert!(out.fallback);
        assert_eq!(out.occluded_fraction, 0.25);
        assert_eq!(out.attempts, cfg.max_placement_attempts);
    }

    #[test]
    fn footprint_too_large() {
        let search = grid_from_fn(2, 2, 1, |_, _, _| 1.0);
        let big = grid_from_fn(3, 3, 1, |r, _, _| r as f64);
        let so = rect_mask(2, 2, 0, 0, 1, 1);
        let dobj = rect_mask(3, 3, 0, 0, 3, 3);
        let mut rng = rng_for(11, 0, 0, 0, Stage::Mix);
        assert!(matches!(
            tfmix(&search, &so, &big, &dobj, &TfmixConfig::default(), &mut rng),
            Err(Error::FootprintTooLarge { .. })
        ));
    }

    #[test]
    fn fixed_placement_keeps_coordinates() {
        let search = grid_from_fn(4, 4, 2, |r, c, d| (r * 4 + c + d) as f64);
        let distractor = grid_from_fn(4, 4, 2, |r, c, d| (r * c * d) as f64 + d as f64);
        let so = rect_mask(4, 4, 0, 0, 1, 1);
        let dobj = rect_mask(4, 4, 2, 1, 2, 2);
        let cfg = TfmixConfig {
            placement: Placement::Fixed,
            ..TfmixConfig::default()
        };
        let mut rng = rng_for(12, 0, 0, 0, Stage::Mix);
        let out = tfmix(&search, &so, &distractor, &dobj, &cfg, &mut rng).unwrap();
        assert_eq!(out.offset, (2, 1));
        assert_eq!(out.replaced, dobj);
    }

    fn untouched_outside(out: &Patch, orig: &Patch, region: &BBox) {
        for (x, y, px) in out.pixels.enumerate_pixels() {
            let inside = (x as f64) >= region.x
                && (x as f64) < region.right()
                && (y as f64) >= region.y
                && (y as f64) < region.bottom();
            if !inside {
                assert_eq!(px, orig.pixels.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn cutmix_bbox_pastes_rectangle() {
        let search = noise_patch(64, 13);
        let distractor = noise_patch(64, 14);
        let sbox = BBox::new(20.0, 20.0, 16.0, 16.0).unwrap();
        let dbox = BBox::new(5.5, 7.0, 10.0, 12.0).unwrap();
        let params = ImageMixParams { occl_threshold: 0.5, max_attempts: 10 };
        let mut rng = rng_for(15, 0, 0, 0, Stage::Mix);
        for _ in 0..200 {
            let out = cutmix_bbox(&search, &sbox, &distractor, &dbox, &params, &mut rng).unwrap();
            let region = out.region.unwrap();
            assert_eq!((region.w, region.h), (11.0, 12.0));
            untouched_outside(&out.patch, &search, &region);
            for dy in 0..12 {
                for dx in 0..11 {
                    assert_eq!(
                        out.patch.pixels.get_pixel(region.x as u32 + dx, region.y as u32 + dy),
                        distractor.pixels.get_pixel(5 + dx, 7 + dy)
                    );
                }
            }
            let placed = region;
            let f = sbox.intersection_area(&placed) / sbox.area();
            assert!((f - out.occluded_fraction).abs() < 1e-12);
            if !out.fallback {
                assert!(f <= 0.5);
            }
        }
    }

    #[test]
    fn cutmix_redraws_heavy_occlusion() {
        // Target fills most of the patch: most placements occlude > 0.5.
        let search = noise_patch(32, 16);
        let distractor = noise_patch(32, 17);
        let sbox = BBox::new(0.0, 0.0, 20.0, 32.0).unwrap();
        let dbox = BBox::new(0.0, 0.0, 12.0, 32.0).unwrap();
        let params = ImageMixParams { occl_threshold: 0.5, max_attempts: 50 };
        let mut rng = rng_for(18, 0, 0, 0, Stage::Mix);
        for _ in 0..100 {
            let out = cutmix_bbox(&search, &sbox, &distractor, &dbox, &params, &mut rng).unwrap();
            assert!(out.occluded_fraction <= 0.5 || out.fallback);
        }
    }

    #[test]
    fn paste_mask_writes_only_mask_pixels() {
        let search = noise_patch(48, 19);
        let distractor = noise_patch(48, 20);
        let sbox = BBox::new(10.0, 10.0, 12.0, 12.0).unwrap();
        let mut mask = vec![false; 48 * 48];
        for (i, m) in mask.iter_mut().enumerate() {
            let (x, y) = (i % 48, i / 48);
            *m = (x as i32 - 30).pow(2) + (y as i32 - 30).pow(2) <= 25;
        }
        let pop = mask.iter().filter(|m| **m).count();
        let params = ImageMixParams { occl_threshold: 0.5, max_attempts: 10 };
        let mut rng = rng_for(21, 0, 0, 0, Stage::Mix);
        let out = paste_mask(&search, &sbox, &distractor, &mask, &params, &mut rng).unwrap();
        let region = out.region.unwrap();
        untouched_outside(&out.patch, &search, &region);
        // Oracle: replay the written set from the mask and placement.
        let (px, py) = (region.x as u32, region.y as u32);
        let mut written = 0;
        for y in 0..48u32 {
            for x in 0..48u32 {
                let i = (y * 48 + x) as usize;
                if mask[i] {
                    let (tx, ty) = (px + x - 25, py + y - 25);
                    assert_eq!(out.patch.pixels.get_pixel(tx, ty), distractor.pixels.get_pixel(x, y));
                    written += 1;
                }
            }
        }
        assert_eq!(written, pop);
        let empty = vec![false; 48 * 48];
        let out = paste_mask(&search, &sbox, &distractor, &empty, &params, &mut rng).unwrap();
        assert_eq!(out.patch, search);
        assert!(out.region.is_none());
    }

    #[test]
    fn token_image_mix_counts_and_content() {
        let search = noise_patch(256, 22);
        let distractor = noise_patch(256, 23);
        let mut rng = rng_for(24, 0, 0, 0, Stage::Mix);
        for _ in 0..50 {
            let out = token_image_mix(&search, &distractor, 16, &mut rng).unwrap();
            assert!(out.ratio >= 0.3 && out.ratio <= 0.5);
            assert_eq!(out.cells.len(), (out.ratio * 256.0).round() as usize);
            let replaced: std::collections::HashSet<_> = out.cells.iter().copied().collect();
            for (x, y, px) in out.patch.pixels.enumerate_pixels() {
                let cell = (y / 16 * 16 + x / 16) as usize;
                let src = if replaced.contains(&cell) { &distractor } else { &search };
                assert_eq!(px, src.pixels.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn token_image_mix_half_ratio_replaces_128() {
        let search = noise_patch(256, 25);
        let distractor = noise_patch(256, 27);
        let mut rng = rng_for(26, 0, 0, 0, Stage::Mix);
        let out = token_image_mix_with_ratio(&search, &distractor, 16, 0.5, &mut rng).unwrap();
        assert_eq!(out.cells.len(), 128);
        let out = token_image_mix(&search, &distractor, 16, &mut rng).unwrap();
        assert!(out.cells.len() >= 77 && out.cells.len() <= 128);
    }

    fn catalog(cats: &[&str]) -> Catalog {
        use crate::datasets::{Dataset, DatasetKind, ImageDataset, ImageEntry, ObjectEntry};
        let objects = cats
            .iter()
            .enumerate()
            .map(|(i, c)| ObjectEntry {
                id: i as u64,
                image: 0,
                bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
                category: Some(c.to_string()),
            })
            .collect();
        Catalog::new(vec![Dataset {
            name: "d".into(),
            kind: DatasetKind::Image(ImageDataset {
                images: vec![ImageEntry { id: 0, path: "a.png".into(), width: 8, height: 8 }],
                objects,
            }),
        }])
    }

    #[test]
    fn distractor_selection_contract() {
        let c = catalog(&["cat", "cat", "dog"]);
        let mut rng = rng_for(1, 0, 0, 0, Stage::Distractor);
        let me = ObjectKey { dataset: 0, object: 0 };
        for _ in 0..200 {
            let p = select_distractor(&c, Some("cat"), me, &mut rng, 10).unwrap();
            assert_eq!(p.object, ObjectKey { dataset: 0, object: 1 });
            assert_eq!(p.category.as_deref(), Some("cat"));
        }
        let dog = ObjectKey { dataset: 0, object: 2 };
        for _ in 0..200 {
            let p = select_distractor(&c, Some("dog"), dog, &mut rng, 10).unwrap();
            assert_ne!(p.object, dog);
            assert_eq!(p.category.as_deref(), Some("cat"));
        }
        let alone = catalog(&["cat"]);
        assert!(matches!(
            select_distractor(&alone, Some("cat"), me, &mut rng, 10),
            Err(Error::NoDistractor(_))
        ));
    }

    #[test]
    fn config_validation() {
        TfmixConfig::default().validate().unwrap();
        for bad in [
            TfmixConfig { occl_threshold: 0.0, ..Default::default() },
            TfmixConfig { token_overlap_threshold: 1.5, ..Default::default() },
            TfmixConfig { epoch_period: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
