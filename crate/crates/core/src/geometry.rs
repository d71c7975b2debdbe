//! Box and crop arithmetic shared by every cropping strategy.
//!
//! All coordinates are image pixels with the origin at the top-left corner
//! and pixel `k` covering `[k, k + 1)`. Boxes are `(x, y, w, h)` with `x, y`
//! the top-left corner.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::uniform;

/// Minimum patch side accepted by [`extract_patch`].
pub const MIN_PATCH_SIZE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub cx: f64,
    pub cy: f64,
}

impl Point {
    pub fn new(cx: f64, cy: f64) -> Self {
        Self { cx, cy }
    }

    /// Per-axis maximum absolute difference.
    pub fn chebyshev(self, other: Point) -> f64 {
        (self.cx - other.cx).abs().max((self.cy - other.cy).abs())
    }
}

/// Axis-aligned box. Coordinates may be negative; sizes are strictly
/// positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("box with non-positive size {self:?}")));
        }
        Ok(())
    }

    pub fn from_center(center: Point, w: f64, h: f64) -> Self {
        Self {
            x: center.cx - w / 2.0,
            y: center.cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Geometric-mean side, `sqrt(w * h)`.
    pub fn scale(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    /// Closed containment of a point.
    pub fn contains(&self, p: Point) -> bool {
        p.cx >= self.x && p.cx <= self.right() && p.cy >= self.y && p.cy <= self.bottom()
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection as a box, `None` when the overlap has no area.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then_some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Jitter magnitudes: `shift_factor` is D_jit, `scale_factor` is S_jit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterParams {
    pub shift_factor: f64,
    pub scale_factor: f64,
}

impl JitterParams {
    pub const NONE: JitterParams = JitterParams {
        shift_factor: 0.0,
        scale_factor: 0.0,
    };

    pub fn new(shift_factor: f64, scale_factor: f64) -> Result<Self> {
        let p = Self {
            shift_factor,
            scale_factor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("shift_factor", self.shift_factor), ("scale_factor", self.scale_factor)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("jitter {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            shift_factor: 3.0,
            scale_factor: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Normal,
    Boundary,
    Legacy,
    Template,
}

impl CropKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CropKind::Normal => "normal",
            CropKind::Boundary => "boundary",
            CropKind::Legacy => "legacy",
            CropKind::Template => "template",
        }
    }

    /// Stable numeric code used in batch buffers.
    pub fn code(self) -> u8 {
        match self {
            CropKind::Normal => 0,
            CropKind::Boundary => 1,
            CropKind::Legacy => 2,
            CropKind::Template => 3,
        }
    }
}

/// A square crop region together with the search radius factor that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub bbox: BBox,
    pub gamma: f64,
    pub kind: CropKind,
}

impl CropWindow {
    pub fn side(&self) -> f64 {
        self.bbox.w
    }

    pub fn is_square(&self) -> bool {
        (self.bbox.w - self.bbox.h).abs() <= 1e-6 * self.bbox.w
    }
}

/// Crop edge that a boundary target straddles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Top,
    Bottom,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Top,
        Direction::Bottom,
        Direction::Left,
        Direction::Right,
    ];

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }
}

/// Edges of `window` that `target` straddles (partially inside, partially
/// outside), in `[top, bottom, left, right]` order.
pub fn crossed_edges(target: &BBox, window: &BBox) -> [bool; 4] {
    let straddles = |edge: f64, lo: f64, hi: f64| lo < edge && edge < hi;
    let overlaps_y = target.y < window.bottom() && target.bottom() > window.y;
    let overlaps_x = target.x < window.right() && target.right() > window.x;
    [
        overlaps_x && straddles(window.y, target.y, target.bottom()),
        overlaps_x && straddles(window.bottom(), target.y, target.bottom()),
        overlaps_y && straddles(window.x, target.x, target.right()),
        overlaps_y && straddles(window.right(), target.x, target.right()),
    ]
}

/// Fraction of the target's area inside `window`.
pub fn visible_fraction(target: &BBox, window: &BBox) -> f64 {
    target.intersection_area(window) / target.area()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::invalid(format!("gamma must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

/// Square window of side `gamma * sqrt(w * h)` centered on `b`.
pub fn center_crop(b: &BBox, gamma: f64) -> Result<CropWindow> {
    b.validate()?;
    check_gamma(gamma)?;
    let side = gamma * b.scale();
    Ok(CropWindow {
        bbox: BBox::from_center(b.center(), side, side),
        gamma,
        kind: CropKind::Normal,
    })
}

/// Random log-uniform rescale followed by a center shift proportional to
/// the rescaled box's geometric-mean side.
///
/// Draw order: scale x, scale y, shift x, shift y. Each axis shift is
/// `shift_factor * Uniform(-0.5, 0.5) * sqrt(w' * h')`, so a shift factor
/// no larger than a fixed gamma keeps the original center inside the crop.
pub fn jitter<R: Rng + ?Sized>(b: &BBox, params: &JitterParams, rng: &mut R) -> Result<BBox> {
    b.validate()?;
    params.validate()?;
    let s = params.scale_factor;
    let w = b.w * uniform(rng, -s, s).exp();
    let h = b.h * uniform(rng, -s, s).exp();
    let side = (w * h).sqrt();
    let dx = params.shift_factor * uniform(rng, -0.5, 0.5) * side;
    let dy = params.shift_factor * uniform(rng, -0.5, 0.5) * side;
    let c = b.center();
    let out = BBox::from_center(Point::new(c.cx + dx, c.cy + dy), w, h);
    out.validate()?;
    Ok(out)
}

/// Smallest gamma for which a crop centered on `b_jit` still contains the
/// center of `b_gt`, floored at `gamma_min`.
pub fn practical_min_gamma(b_gt: &BBox, b_jit: &BBox, gamma_min: f64) -> Result<f64> {
    b_gt.validate()?;
    b_jit.validate()?;
    check_gamma(gamma_min)?;
    let displacement = b_gt.center().chebyshev(b_jit.center());
    Ok((2.0 * displacement / b_jit.scale()).max(gamma_min))
}

/// Feasible placements of the moved crop coordinate for a boundary shift.
///
/// For `Left`/`Top` the coordinate is the crop's left/top edge and the
/// interval is `(lo, hi]`; for `Right`/`Bottom` it is the crop's right/bottom
/// edge and the interval is `[lo, hi)`.
pub fn boundary_interval(
    crop: &CropWindow,
    target: &BBox,
    direction: Direction,
    v_min: f64,
) -> Result<(f64, f64)> {
    crop.bbox.validate()?;
    target.validate()?;
    if !(v_min > 0.0 && v_min < 1.0) {
        return Err(Error::invalid(format!("v_min must lie in (0, 1), got {v_min}")));
    }
    if !crop.bbox.contains(target.center()) {
        return Err(Error::invalid("target center is not inside the crop"));
    }
    let side = crop.side();
    let win = &crop.bbox;
    let (t_lo, t_len, cross_ok) = match direction {
        Direction::Left | Direction::Right => (
            target.x,
            target.w,
            target.y >= win.y && target.bottom() <= win.bottom(),
        ),
        Direction::Top | Direction::Bottom => (
            target.y,
            target.h,
            target.x >= win.x && target.right() <= win.right(),
        ),
    };
    if !cross_ok {
        return Err(Error::InfeasibleBoundary(format!(
            "target {target:?} is not contained in {win:?} across the {direction:?} axis"
        )));
    }
    let t_hi = t_lo + t_len;
    let (lo, hi) = match direction {
        Direction::Left | Direction::Top => (t_lo.max(t_hi - side), t_hi - v_min * t_len),
        Direction::Right | Direction::Bottom => (t_lo + v_min * t_len, t_hi.min(t_lo + side)),
    };
    if !(lo < hi) {
        return Err(Error::InfeasibleBoundary(format!(
            "no {direction:?} placement keeps {v_min} of {target:?} visible in a {side} px crop"
        )));
    }
    Ok((lo, hi))
}

/// Moves `crop` so that `target` straddles the crop edge `direction` with
/// a visible area fraction in `[v_min, 1)`. The moved coordinate is drawn
/// uniformly over the feasible interval.
pub fn shift_to_boundary<R: Rng + ?Sized>(
    crop: &CropWindow,
    target: &BBox,
    direction: Direction,
    v_min: f64,
    rng: &mut R,
) -> Result<CropWindow> {
    let (lo, hi) = boundary_interval(crop, target, direction, v_min)?;
    let u: f64 = rng.random();
    let coord = match direction {
        Direction::Left | Direction::Top => hi - (hi - lo) * u,
        Direction::Right | Direction::Bottom => lo + (hi - lo) * u,
    };
    Ok(place_boundary(crop, direction, coord))
}

/// Places `crop` with its moved coordinate at `coord` (see
/// [`boundary_interval`] for the coordinate meaning).
pub fn place_boundary(crop: &CropWindow, direction: Direction, coord: f64) -> CropWindow {
    let side = crop.side();
    let mut bbox = crop.bbox;
    match direction {
        Direction::Left => bbox.x = coord,
        Direction::Top => bbox.y = coord,
        Direction::Right => bbox.x = coord - side,
        Direction::Bottom => bbox.y = coord - side,
    }
    CropWindow {
        bbox,
        gamma: crop.gamma,
        kind: CropKind::Boundary,
    }
}

/// Maps patch coordinates back to source-image coordinates.
///
/// A patch is produced by scaling the crop to `size` pixels, then optionally
/// mirroring horizontally, then rotating about the patch center by
/// `rotation_deg` (counter-clockwise in image display orientation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTransform {
    pub scale: f64,
    pub offset: Point,
    pub size: u32,
    #[serde(default)]
    pub mirrored: bool,
    #[serde(default)]
    pub rotation_deg: f64,
}

impl PatchTransform {
    pub fn for_crop(crop: &CropWindow, out_size: u32) -> Self {
        Self {
            scale: crop.side() / out_size as f64,
            offset: Point::new(crop.bbox.x, crop.bbox.y),
            size: out_size,
            mirrored: false,
            rotation_deg: 0.0,
        }
    }

    fn half(&self) -> f64 {
        self.size as f64 / 2.0
    }

    pub fn patch_to_image(&self, p: Point) -> Point {
        let p = if self.rotation_deg != 0.0 {
            rotate_point(p, Point::new(self.half(), self.half()), -self.rotation_deg)
        } else {
            p
        };
        let px = if self.mirrored { self.size as f64 - p.cx } else { p.cx };
        Point::new(self.offset.cx + px * self.scale, self.offset.cy + p.cy * self.scale)
    }

    pub fn image_to_patch(&self, p: Point) -> Point {
        let mut q = Point::new(
            (p.cx - self.offset.cx) / self.scale,
            (p.cy - self.offset.cy) / self.scale,
        );
        if self.mirrored {
            q.cx = self.size as f64 - q.cx;
        }
        if self.rotation_deg != 0.0 {
            q = rotate_point(q, Point::new(self.half(), self.half()), self.rotation_deg);
        }
        q
    }

    /// Image-space box of a patch-space box (enclosing box when rotated).
    pub fn box_to_image(&self, b: &BBox) -> BBox {
        enclosing_box(&corners(b).map(|c| self.patch_to_image(c)))
    }

    pub fn box_to_patch(&self, b: &BBox) -> BBox {
        enclosing_box(&corners(b).map(|c| self.image_to_patch(c)))
    }
}

pub(crate) fn corners(b: &BBox) -> [Point; 4] {
    [
        Point::new(b.x, b.y),
        Point::new(b.right(), b.y),
        Point::new(b.x, b.bottom()),
        Point::new(b.right(), b.bottom()),
    ]
}

pub(crate) fn enclosing_box(points: &[Point]) -> BBox {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.cx);
        y0 = y0.min(p.cy);
        x1 = x1.max(p.cx);
        y1 = y1.max(p.cy);
    }
    BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Rotates `p` about `center` by `deg` degrees, counter-clockwise as seen
/// on screen (y axis pointing down).
pub fn rotate_point(p: Point, center: Point, deg: f64) -> Point {
    let (s, c) = deg.to_radians().sin_cos();
    let dx = p.cx - center.cx;
    let dy = p.cy - center.cy;
    Point::new(center.cx + c * dx + s * dy, center.cy - s * dx + c * dy)
}

/// A resampled square crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    /// Row-major, `true` where the source sample fell inside the image.
    pub validity: Vec<bool>,
    pub to_image: PatchTransform,
}

impl Patch {
    pub fn size(&self) -> u32 {
        self.pixels.width()
    }

    /// Per-channel mean over valid pixels, or over all pixels when none
    /// are valid.
    pub fn valid_mean(&self) -> [u8; 3] {
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for (px, &ok) in self.pixels.pixels().zip(&self.validity) {
            if ok {
                for c in 0..3 {
                    sum[c] += px.0[c] as u64;
                }
                n += 1;
            }
        }
        if n == 0 {
            for px in self.pixels.pixels() {
                for c in 0..3 {
                    sum[c] += px.0[c] as u64;
                }
            }
            n = self.pixels.pixels().len() as u64;
        }
        sum.map(|s| ((s as f64) / n as f64).round() as u8)
    }
}

/// Image-space location of the center of output pixel `j` along one axis.
fn sample_coord(origin: f64, scale: f64, j: u32) -> f64 {
    origin + (j as f64 + 0.5) * scale
}

/// Bilinear resample of `crop` into an `out_size`² patch. Samples falling
/// outside the image take the per-channel mean of the in-image part of the
/// crop and are marked invalid.
pub fn extract_patch(image: &RgbImage, crop: &CropWindow, out_size: u32) -> Result<Patch> {
    let (iw, ih) = image.dimensions();
    if iw == 0 || ih == 0 {
        return Err(Error::invalid("empty image"));
    }
    if out_size < MIN_PATCH_SIZE {
        return Err(Error::invalid(format!(
            "patch size {out_size} below minimum {MIN_PATCH_SIZE}"
        )));
    }
    crop.bbox.validate()?;
    let region = crop
        .bbox
        .intersect(&BBox {
            x: 0.0,
            y: 0.0,
            w: iw as f64,
            h: ih as f64,
        })
        .ok_or(Error::EmptyCrop)?;
    let fill = region_mean(image, &region);

    let transform = PatchTransform::for_crop(crop, out_size);
    let scale = transform.scale;
    let n = out_size as usize;

    let clamp_x = |k: f64| (k.max(0.0) as usize).min(iw as usize - 1);
    let clamp_y = |k: f64| (k.max(0.0) as usize).min(ih as usize - 1);
    // Per column: left and right source offsets, weight, inside flag.
    let xs: Vec<(usize, usize, f64, bool)> = (0..out_size)
        .map(|j| {
            let u = sample_coord(crop.bbox.x, scale, j);
            let fx = u - 0.5;
            let x0f = fx.floor();
            (clamp_x(x0f) * 3, clamp_x(x0f + 1.0) * 3, fx - x0f, u >= 0.0 && u < iw as f64)
        })
        .collect();
    let ys: Vec<(f64, bool)> = (0..out_size)
        .map(|i| {
            let v = sample_coord(crop.bbox.y, scale, i);
            (v, v >= 0.0 && v < ih as f64)
        })
        .collect();

    let mut pixels = RgbImage::new(out_size, out_size);
    let mut validity = vec![false; n * n];
    let raw = image.as_raw();
    let stride = iw as usize * 3;

    for (i, &(v, vy_ok)) in ys.iter().enumerate() {
        let fy = v - 0.5;
        let y0f = fy.floor();
        let ty = fy - y0f;
        let (ya, yb) = (clamp_y(y0f), clamp_y(y0f + 1.0));
        let out_row = &mut pixels.as_mut()[i * n * 3..(i + 1) * n * 3];
        let (row_a, row_b) = (&raw[ya * stride..(ya + 1) * stride], &raw[yb * stride..(yb + 1) * stride]);
        for (j, &(xa, xb, tx, ux_ok)) in xs.iter().enumerate() {
            let dst = &mut out_row[j * 3..j * 3 + 3];
            if !(vy_ok && ux_ok) {
                dst.copy_from_slice(&fill);
                continue;
            }
            validity[i * n + j] = true;
            for c in 0..3 {
                let p00 = row_a[xa + c] as f64;
                let p01 = row_a[xb + c] as f64;
                let p10 = row_b[xa + c] as f64;
                let p11 = row_b[xb + c] as f64;
                let top = p00 + (p01 - p00) * tx;
                let bot = p10 + (p11 - p10) * tx;
                dst[c] = (top + (bot - top) * ty).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok(Patch {
        pixels,
        validity,
        to_image: transform,
    })
}

/// Per-channel mean over the integer pixels touched by `region`.
fn region_mean(image: &RgbImage, region: &BBox) -> [u8; 3] {
    let (iw, ih) = image.dimensions();
    let x0 = region.x.floor().max(0.0) as u32;
    let y0 = region.y.floor().max(0.0) as u32;
    let x1 = (region.right().ceil() as u32).min(iw).max(x0 + 1);
    let y1 = (region.bottom().ceil() as u32).min(ih).max(y0 + 1);
    let mut sum = [0u64; 3];
    let stride = iw as usize * 3;
    let raw = image.as_raw();
    for y in y0 as usize..y1 as usize {
        let row = &raw[y * stride + x0 as usize * 3..y * stride + x1 as usize * 3];
        for p in row.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += p[c] as u64;
            }
        }
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    sum.map(|s| (s as f64 / n).round() as u8)
}

/// `b` expressed in the coordinates of the `out_size` patch cut from
/// `crop`. Not clipped.
pub fn map_box_to_patch(b: &BBox, crop: &CropWindow, out_size: u32) -> BBox {
    let scale = out_size as f64 / crop.side();
    BBox {
        x: (b.x - crop.bbox.x) * scale,
        y: (b.y - crop.bbox.y) * scale,
        w: b.w * scale,
        h: b.h * scale,
    }
}

/// Inverse of [`map_box_to_patch`].
pub fn map_box_to_image(b: &BBox, crop: &CropWindow, out_size: u32) -> BBox {
    let scale = crop.side() / out_size as f64;
    BBox {
        x: crop.bbox.x + b.x * scale,
        y: crop.bbox.y + b.y * scale,
        w: b.w * scale,
        h: b.h * scale,
    }
}
