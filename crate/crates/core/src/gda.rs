//! General data augmentations: grayscale, horizontal flip, brightness
//! jitter, Gaussian blur and rotation. Each is gated by its own
//! probability and keeps the patch label consistent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{corners, enclosing_box, rotate_point, BBox, Patch, Point};
use crate::rng::uniform;

/// Blur sigmas below this are treated as no-ops.
pub const MIN_BLUR_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdaConfig {
    pub p_gray: f64,
    pub p_flip: f64,
    pub p_brightness: f64,
    pub p_blur: f64,
    pub p_rotate: f64,
    pub brightness_magnitude: f64,
    pub blur_sigma_range: (f64, f64),
    pub rotate_max_deg: f64,
}

impl Default for GdaConfig {
    fn default() -> Self {
        Self {
            p_gray: 0.5,
            p_flip: 0.5,
            p_brightness: 0.5,
            p_blur: 0.05,
            p_rotate: 0.05,
            brightness_magnitude: 0.2,
            blur_sigma_range: (0.5, 2.0),
            rotate_max_deg: 10.0,
        }
    }
}

impl GdaConfig {
    /// All transforms disabled.
    pub fn disabled() -> Self {
        Self {
            p_gray: 0.0,
            p_flip: 0.0,
            p_brightness: 0.0,
            p_blur: 0.0,
            p_rotate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_gray", self.p_gray),
            ("p_flip", self.p_flip),
            ("p_brightness", self.p_brightness),
            ("p_blur", self.p_blur),
            ("p_rotate", self.p_rotate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("gda.{name} {p} not in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.brightness_magnitude) {
            return Err(Error::Config(format!(
                "gda.brightness_magnitude {} not in [0, 1)",
                self.brightness_magnitude
            )));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "gda.blur_sigma_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        if !(0.0..=45.0).contains(&self.rotate_max_deg) {
            return Err(Error::Config(format!(
                "gda.rotate_max_deg {} not in [0, 45]",
                self.rotate_max_deg
            )));
        }
        Ok(())
    }
}

/// What [`apply`] did to a patch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GdaRecord {
    pub gray: bool,
    pub flipped: bool,
    pub brightness: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub rotation_deg: Option<f64>,
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    let u: f64 = rng.random();
    u < p
}

pub fn luma(rgb: [u8; 3]) -> u8 {
    let y = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_gray(patch: &mut Patch) {
    for px in patch.pixels.pixels_mut() {
        let y = luma(px.0);
        px.0 = [y, y, y];
    }
}

/// Replaces every pixel by its luma with probability `p`.
pub fn grayscale<R: Rng + ?Sized>(patch: &mut Patch, p: f64, rng: &mut R) -> bool {
    let hit = coin(rng, p);
    if hit {
        to_gray(patch);
    }
    hit
}

/// Mirrors pixels, validity and box unconditionally.
pub fn mirror(patch: &mut Patch, b: &BBox) -> BBox {
    image::imageops::flip_horizontal_in_place(&mut patch.pixels);
    let n = patch.size() as usize;
    for row in patch.validity.chunks_mut(n) {
        row.reverse();
    }
    patch.to_image.mirrored = !patch.to_image.mirrored;
    BBox {
        x: n as f64 - b.x - b.w,
        ..*b
    }
}

pub fn horizontal_flip<R: Rng + ?Sized>(
    patch: &mut Patch,
    b: &BBox,
    p: f64,
    rng: &mut R,
) -> (BBox, bool) {
    if coin(rng, p) {
        (mirror(patch, b), true)
    } else {
        (*b, false)
    }
}

/// Multiplies every channel by `factor`, rounding and clamping to `[0, 255]`.
pub fn scale_brightness(patch: &mut Patch, factor: f64) {
    for v in patch.pixels.iter_mut() {
        *v = (*v as f64 * factor).round().clamp(0.0, 255.0) as u8;
    }
}

pub fn brightness_jitter<R: Rng + ?Sized>(
    patch: &mut Patch,
    p: f64,
    magnitude: f64,
    rng: &mut R,
) -> Option<f64> {
    if !coin(rng, p) {
        return None;
    }
    let f = uniform(rng, 1.0 - magnitude, 1.0 + magnitude);
    if f != 1.0 {
        scale_brightness(patch, f);
    }
    Some(f)
}

/// Normalized Gaussian taps of radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur of a single `width x height` plane with
/// replicated borders.
pub fn blur_plane(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma < MIN_BLUR_SIGMA {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * row[at(x as isize + t as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[at(y as isize + t as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(patch: &mut Patch, sigma: f64) {
    if sigma < MIN_BLUR_SIGMA {
        return;
    }
    let n = patch.size() as usize;
    for c in 0..3 {
        let plane: Vec<f64> = patch.pixels.pixels().map(|p| p.0[c] as f64).collect();
        let blurred = blur_plane(&plane, n, n, sigma);
        for (px, v) in patch.pixels.pixels_mut().zip(blurred) {
            px.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

pub fn blur<R: Rng + ?Sized>(
    patch: &mut Patch,
    p: f64,
    sigma_range: (f64, f64),
    rng: &mut R,
) -> Option<f64> {
    if !coin(rng, p) {
        return None;
    }
    let sigma = uniform(rng, sigma_range.0, sigma_range.1);
    gaussian_blur(patch, sigma);
    Some(sigma)
}

/// Axis-aligned box enclosing `b` rotated by `deg` about `center`.
pub fn rotate_box(b: &BBox, center: Point, deg: f64) -> BBox {
    enclosing_box(&corners(b).map(|c| rotate_point(c, center, deg)))
}

/// Rotates the patch by `deg` about its center. Exposed corners take the
/// mean of the valid pixels and are marked invalid. The returned box
/// encloses the rotated input box, clipped to the patch; if clipping
/// leaves nothing the patch is left untouched and `None` is returned.
pub fn rotate_by(patch: &mut Patch, b: &BBox, deg: f64) -> Option<BBox> {
    let n = patch.size() as usize;
    let size = n as f64;
    let center = Point::new(size / 2.0, size / 2.0);
    let frame = BBox {
        x: 0.0,
        y: 0.0,
        w: size,
        h: size,
    };
    let new_box = rotate_box(b, center, deg).intersect(&frame)?;
    if deg == 0.0 {
        return Some(new_box);
    }

    let fill = patch.valid_mean();
    let src = patch.pixels.as_raw().clone();
    let src_valid = patch.validity.clone();
    let dst = patch.pixels.as_mut();
    for i in 0..n {
        for j in 0..n {
            let q = Point::new(j as f64 + 0.5, i as f64 + 0.5);
            let s = rotate_point(q, center, -deg);
            let o = (i * n + j) * 3;
            if !(s.cx >= 0.0 && s.cx < size && s.cy >= 0.0 && s.cy < size) {
                dst[o..o + 3].copy_from_slice(&fill);
                patch.validity[i * n + j] = false;
                continue;
            }
            let fx = s.cx - 0.5;
            let fy = s.cy - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let (tx, ty) = (fx - x0, fy - y0);
            let cl = |v: f64| (v.max(0.0) as usize).min(n - 1);
            let (xa, xb, ya, yb) = (cl(x0), cl(x0 + 1.0), cl(y0), cl(y0 + 1.0));
            for c in 0..3 {
                let p = |y: usize, x: usize| src[(y * n + x) * 3 + c] as f64;
                let top = p(ya, xa) + (p(ya, xb) - p(ya, xa)) * tx;
                let bot = p(yb, xa) + (p(yb, xb) - p(yb, xa)) * tx;
                dst[o + c] = (top + (bot - top) * ty).round().clamp(0.0, 255.0) as u8;
            }
            let (nx, ny) = (cl(s.cx.floor()), cl(s.cy.floor()));
            patch.validity[i * n + j] = src_valid[ny * n + nx];
        }
    }
    patch.to_image.rotation_deg += deg;
    Some(new_box)
}

pub fn rotate<R: Rng + ?Sized>(
    patch: &mut Patch,
    b: &BBox,
    p: f64,
    max_deg: f64,
    rng: &mut R,
) -> (BBox, Option<f64>) {
    if !coin(rng, p) {
        return (*b, None);
    }
    let deg = uniform(rng, -max_deg, max_deg);
    match rotate_by(patch, b, deg) {
        Some(nb) => (nb, Some(deg)),
        None => (*b, None),
    }
}

/// Transforms whose decision must be shared between template and search:
/// grayscale then flip. Call with identical rng states for both patches.
pub fn apply_joint<R: Rng + ?Sized>(
    patch: &mut Patch,
    b: &BBox,
    cfg: &GdaConfig,
    rng: &mut R,
    record: &mut GdaRecord,
) -> BBox {
    record.gray = grayscale(patch, cfg.p_gray, rng);
    let (b, flipped) = horizontal_flip(patch, b, cfg.p_flip, rng);
    record.flipped = flipped;
    b
}

/// Per-patch transforms: brightness, blur, rotation.
pub fn apply_independent<R: Rng + ?Sized>(
    patch: &mut Patch,
    b: &BBox,
    cfg: &GdaConfig,
    rng: &mut R,
    record: &mut GdaRecord,
) -> BBox {
    record.brightness = brightness_jitter(patch, cfg.p_brightness, cfg.brightness_magnitude, rng);
    record.blur_sigma = blur(patch, cfg.p_blur, cfg.blur_sigma_range, rng);
    let (b, deg) = rotate(patch, b, cfg.p_rotate, cfg.rotate_max_deg, rng);
    record.rotation_deg = deg;
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{center_crop, extract_patch, PatchTransform};
    use crate::rng::{rng_for, Stage};
    use image::RgbImage;

    fn patch_from(img: RgbImage) -> Patch {
        let n = img.width();
        let crop = center_crop(&BBox::new(0.0, 0.0, n as f64, n as f64).unwrap(), 1.0).unwrap();
        Patch {
            validity: vec![true; (n * n) as usize],
            to_image: PatchTransform::for_crop(&crop, n),
            pixels: img,
        }
    }

    fn noise_patch(n: u32, seed: u64) -> Patch {
        let mut rng = rng_for(seed, 0, 0, 0, Stage::Synthetic);
        let mut img = RgbImage::new(n, n);
        for v in img.iter_mut() {
            *v = rng.random();
        }
        patch_from(img)
    }

    #[test]
    fn luma_examples() {
        assert_eq!(luma([255, 0, 0]), 76);
        for v in [0u8, 1, 77, 128, 254, 255] {
            assert_eq!(luma([v, v, v]), v);
        }
    }

    #[test]
    fn grayscale_idempotent_and_gated() {
        let mut p = noise_patch(32, 1);
        let orig = p.clone();
        let mut rng = rng_for(1, 0, 0, 0, Stage::GdaSearch);
        assert!(!grayscale(&mut p, 0.0, &mut rng));
        assert_eq!(p, orig);
        assert!(grayscale(&mut p, 1.0, &mut rng));
        let once = p.clone();
        to_gray(&mut p);
        assert_eq!(p, once);
    }

    #[test]
    fn flip_box_examples() {
        let mut p = noise_patch(256, 2);
        let b = BBox::new(10.0, 20.0, 30.0, 40.0).unwrap();
        let f = mirror(&mut p, &b);
        assert_eq!(f, BBox::new(216.0, 20.0, 30.0, 40.0).unwrap());
        let centered = BBox::new(100.0, 5.0, 56.0, 9.0).unwrap();
        assert_eq!(mirror(&mut p.clone(), &centered).x, 100.0);
    }

    #[test]
    fn flip_is_involution() {
        let mut p = noise_patch(64, 3);
        p.validity[5] = false;
        let orig = p.clone();
        let b = BBox::new(3.0, 4.0, 10.0, 12.0).unwrap();
        let once = mirror(&mut p, &b);
        assert_ne!(p, orig);
        let twice = mirror(&mut p, &once);
        assert_eq!(p, orig);
        assert_eq!(twice, b);
    }

    #[test]
    fn flip_keeps_transform_consistent() {
        let img = RgbImage::from_fn(100, 100, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let target = BBox::new(30.0, 40.0, 20.0, 10.0).unwrap();
        let crop = center_crop(&target, 3.0).unwrap();
        let mut p = extract_patch(&img, &crop, 64).unwrap();
        let b = crate::geometry::map_box_to_patch(&target, &crop, 64);
        let fb = mirror(&mut p, &b);
        let back = p.to_image.box_to_image(&fb);
        assert!((back.x - target.x).abs() < 1e-9 && (back.w - target.w).abs() < 1e-9);
    }

    #[test]
    fn brightness_examples() {
        let mut p = patch_from(RgbImage::from_pixel(16, 16, image::Rgb([100, 250, 0])));
        scale_brightness(&mut p, 1.2);
        assert_eq!(p.pixels.get_pixel(0, 0).0, [120, 255, 0]);

        let mut p = noise_patch(16, 4);
        let orig = p.clone();
        let mut rng = rng_for(4, 0, 0, 0, Stage::GdaSearch);
        assert_eq!(brightness_jitter(&mut p, 1.0, 0.0, &mut rng), Some(1.0));
        assert_eq!(p, orig);
    }

    #[test]
    fn kernel_normalized() {
        for sigma in [0.3, 0.5, 1.0, 1.7, 2.0, 5.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_sums_to_one() {
        let n = 41;
        let mut plane = vec![0.0; n * n];
        plane[20 * n + 20] = 1.0;
        for sigma in [0.5, 1.0, 2.0] {
            let out = blur_plane(&plane, n, n, sigma);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_constant_and_tiny_sigma() {
        let mut p = patch_from(RgbImage::from_pixel(32, 32, image::Rgb([9, 99, 199])));
        let orig = p.clone();
        gaussian_blur(&mut p, 2.0);
        assert_eq!(p, orig);
        let mut p = noise_patch(32, 5);
        let orig = p.clone();
        gaussian_blur(&mut p, 0.29);
        assert_eq!(p, orig);
    }

    #[test]
    fn rotate_box_examples() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let r = rotate_box(&b, b.center(), 90.0);
        for (u, v) in r.to_array().iter().zip(b.to_array()) {
            assert!((u - v).abs() < 1e-9);
        }
        let b = BBox::new(123.0, 123.0, 10.0, 10.0).unwrap();
        let mut p = noise_patch(256, 6);
        let r = rotate_by(&mut p, &b, 45.0).unwrap();
        assert!((r.w - 10.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((r.h - 10.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((r.center().cx - 128.0).abs() < 1e-9);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let mut p = noise_patch(64, 7);
        let orig = p.clone();
        let b = BBox::new(5.0, 6.0, 20.0, 30.0).unwrap();
        assert_eq!(rotate_by(&mut p, &b, 0.0), Some(b));
        assert_eq!(p, orig);
    }

    #[test]
    fn rotate_marks_exposed_corners_invalid() {
        let mut p = noise_patch(64, 8);
        let b = BBox::new(20.0, 20.0, 20.0, 20.0).unwrap();
        rotate_by(&mut p, &b, 30.0).unwrap();
        assert!(!p.validity[0]);
        assert!(p.validity[32 * 64 + 32]);
        assert_eq!(p.size(), 64);
        assert_eq!(p.validity.len(), 64 * 64);
    }

    #[test]
    fn rotate_box_area_and_validity() {
        let mut rng = rng_for(9, 0, 0, 0, Stage::GdaSearch);
        for _ in 0..500 {
            let mut p = noise_patch(32, 10);
            let w = uniform(&mut rng, 1.0, 20.0);
            let h = uniform(&mut rng, 1.0, 20.0);
            let b = BBox::new(uniform(&mut rng, 0.0, 32.0 - w), uniform(&mut rng, 0.0, 32.0 - h), w, h)
                .unwrap();
            let (nb, deg) = rotate(&mut p, &b, 1.0, 45.0, &mut rng);
            assert!(nb.w > 0.0 && nb.h > 0.0);
            let unclipped = rotate_box(&b, Point::new(16.0, 16.0), deg.unwrap_or(0.0));
            if (BBox { x: 0.0, y: 0.0, w: 32.0, h: 32.0 }).contains_box(&unclipped) {
                assert!(nb.area() >= b.area() - 1e-9);
            }
        }
    }

    #[test]
    fn zero_probabilities_are_bit_exact_identity() {
        let cfg = GdaConfig::disabled();
        let mut p = noise_patch(48, 11);
        let orig = p.clone();
        let b = BBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        let mut rng = rng_for(11, 0, 0, 0, Stage::GdaSearch);
        let mut rec = GdaRecord::default();
        let b1 = apply_joint(&mut p, &b, &cfg, &mut rng, &mut rec);
        let b2 = apply_independent(&mut p, &b1, &cfg, &mut rng, &mut rec);
        assert_eq!(p, orig);
        assert_eq!(b2, b);
        assert_eq!(rec, GdaRecord::default());
    }

    #[test]
    fn config_validation() {
        GdaConfig::default().validate().unwrap();
        let mut c = GdaConfig::default();
        c.rotate_max_deg = 50.0;
        assert!(c.validate().is_err());
        let mut c = GdaConfig::default();
        c.brightness_magnitude = 1.0;
        assert!(c.validate().is_err());
        let mut c = GdaConfig::default();
        c.blur_sigma_range = (0.0, 1.0);
        assert!(c.validate().is_err());
    }
}
