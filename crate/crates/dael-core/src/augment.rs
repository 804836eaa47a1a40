//! Weak and strong augmentation over 8-bit RGB images.
//!
//! Weak augmentation is flip-and-shift. Strong augmentation samples two
//! transforms from a fixed 15-entry table (each executed with probability
//! 0.6, magnitude uniform over its range) and finishes with a cutout patch.
//! All randomness comes from explicit [`Stream`]s; batch helpers derive one
//! stream per sample so results do not depend on the worker count.

use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};

/// Mid-gray fill for vacated pixels (shift, geometric warps and cutout).
pub const FILL: u8 = 127;

/// 8-bit RGB raster, channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `(y * width + x) * 3 + c`
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }
}

/// The strong-augmentation transform vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    AutoContrast,
    Brightness,
    Colour,
    Contrast,
    Equalize,
    Identity,
    Invert,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

impl TransformKind {
    pub const ALL: [TransformKind; 15] = [
        TransformKind::AutoContrast,
        TransformKind::Brightness,
        TransformKind::Colour,
        TransformKind::Contrast,
        TransformKind::Equalize,
        TransformKind::Identity,
        TransformKind::Invert,
        TransformKind::Posterize,
        TransformKind::Rotate,
        TransformKind::Sharpness,
        TransformKind::ShearX,
        TransformKind::ShearY,
        TransformKind::Solarize,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
    ];

    /// Closed magnitude range; `None` for parameterless transforms.
    pub fn range(self) -> Option<(f64, f64)> {
        use TransformKind::*;
        match self {
            Brightness | Colour | Contrast | Sharpness => Some((0.1, 1.9)),
            Posterize => Some((4.0, 8.0)),
            Rotate => Some((-30.0, 30.0)),
            ShearX | ShearY => Some((-0.3, 0.3)),
            Solarize => Some((0.0, 256.0)),
            TranslateX | TranslateY => Some((-0.3, 0.3)),
            AutoContrast | Equalize | Identity | Invert => None,
        }
    }
}

/// Applies a single transform at the given magnitude.
///
/// Geometric transforms use bilinear sampling with out-of-bounds pixels
/// filled with mid-gray; outputs are clamped to `[0, 255]`; the input is
/// left unmodified.
pub fn apply_transform(kind: TransformKind, magnitude: f64, img: &Image) -> Result<Image> {
    if let Some((lo, hi)) = kind.range() {
        if !(lo..=hi).contains(&magnitude) {
            return Err(Error::contract(format!(
                "magnitude {magnitude} outside [{lo}, {hi}] for {kind:?}"
            )));
        }
    }
    use TransformKind::*;
    Ok(match kind {
        AutoContrast => autocontrast(img),
        Brightness => blend_with(img, |_, _, _| 0.0, magnitude),
        Colour => {
            let gray = luminance(img);
            blend_with(img, |x, y, _| gray[y * img.width + x], magnitude)
        }
        Contrast => {
            let gray = luminance(img);
            let n = (img.width * img.height) as f64;
            let mean = (gray.iter().sum::<f64>() / n).round();
            blend_with(img, |_, _, _| mean, magnitude)
        }
        Equalize => equalize(img),
        Identity => img.clone(),
        Invert => invert(img),
        Posterize => {
            let bits = (magnitude.round() as u32).clamp(1, 8);
            let mask = 0xffu8 << (8 - bits);
            map_pixels(img, |v| v & mask)
        }
        Rotate => {
            let rad = magnitude.to_radians();
            let (cos, sin) = (rad.cos(), rad.sin());
            affine(img, [cos, sin, 0.0], [-sin, cos, 0.0])
        }
        Sharpness => {
            let smooth = smooth3x3(img);
            blend_with(img, |x, y, c| smooth[(y * img.width + x) * 3 + c], magnitude)
        }
        ShearX => affine(img, [1.0, magnitude, 0.0], [0.0, 1.0, 0.0]),
        ShearY => affine(img, [1.0, 0.0, 0.0], [magnitude, 1.0, 0.0]),
        Solarize => map_pixels(img, |v| {
            if (v as f64) >= magnitude {
                255 - v
            } else {
                v
            }
        }),
        TranslateX => affine(
            img,
            [1.0, 0.0, -magnitude * img.width as f64],
            [0.0, 1.0, 0.0],
        ),
        TranslateY => affine(
            img,
            [1.0, 0.0, 0.0],
            [0.0, 1.0, -magnitude * img.height as f64],
        ),
    })
}

fn map_pixels(img: &Image, f: impl Fn(u8) -> u8) -> Image {
    Image {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|&v| f(v)).collect(),
    }
}

fn invert(img: &Image) -> Image {
    map_pixels(img, |v| 255 - v)
}

/// Per-pixel rounded ITU-R 601-2 luminance.
fn luminance(img: &Image) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| {
            ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) as f64 / 1000.0).round()
        })
        .collect()
}

/// `out = base + (pixel - base) * factor`, the shared enhancement blend;
/// factor 1 returns the original image.
fn blend_with(img: &Image, base: impl Fn(usize, usize, usize) -> f64, factor: f64) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let b = base(x, y, c);
                let v = b + (img.get(x, y, c) as f64 - b) * factor;
                out.set(x, y, c, clamp_round(v));
            }
        }
    }
    out
}

fn clamp_round(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn autocontrast(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for c in 0..3 {
        let (mut lo, mut hi) = (255u8, 0u8);
        for p in img.pixels.chunks_exact(3) {
            lo = lo.min(p[c]);
            hi = hi.max(p[c]);
        }
        if hi <= lo {
            for (op, ip) in out
                .pixels
                .chunks_exact_mut(3)
                .zip(img.pixels.chunks_exact(3))
            {
                op[c] = ip[c];
            }
            continue;
        }
        let scale = 255.0 / (hi - lo) as f64;
        for (op, ip) in out
            .pixels
            .chunks_exact_mut(3)
            .zip(img.pixels.chunks_exact(3))
        {
            op[c] = clamp_round((ip[c] - lo) as f64 * scale);
        }
    }
    out
}

/// Histogram equalization: cumulative-distribution remap with the lowest
/// occupied bin fixed to 0; constant channels pass through unchanged.
fn equalize(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    let total = (img.width * img.height) as u64;
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for p in img.pixels.chunks_exact(3) {
            hist[p[c] as usize] += 1;
        }
        let cdf_min = *hist.iter().find(|&&h| h > 0).unwrap_or(&0);
        let denom = total - cdf_min;
        let mut lut = [0u8; 256];
        if denom == 0 {
            for (v, l) in lut.iter_mut().enumerate() {
                *l = v as u8;
            }
        } else {
            let mut cdf = 0u64;
            for v in 0..256 {
                cdf += hist[v];
                if hist[v] > 0 {
                    lut[v] = clamp_round((cdf - cdf_min) as f64 * 255.0 / denom as f64);
                }
            }
        }
        for (op, ip) in out
            .pixels
            .chunks_exact_mut(3)
            .zip(img.pixels.chunks_exact(3))
        {
            op[c] = lut[ip[c] as usize];
        }
    }
    out
}

/// Edge-clamped 3x3 smoothing (center weight 5, total 13), as f64 samples.
fn smooth3x3(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let weight = if dx == 0 && dy == 0 { 5.0 } else { 1.0 };
                        acc += weight * img.get(sx, sy, c) as f64;
                    }
                }
                out[(y * w + x) * 3 + c] = acc / 13.0;
            }
        }
    }
    out
}

/// Inverse-mapped affine warp about the image center with bilinear sampling;
/// samples outside the source are mid-gray.
///
/// `row_x` and `row_y` hold `[a, b, t]` with
/// `src = (a*(x-cx) + b*(y-cy) + t + cx, ...)`.
fn affine(img: &Image, row_x: [f64; 3], row_y: [f64; 3]) -> Image {
    let (h, w) = (img.height, img.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = Image::new(h, w);
    let sample = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            FILL as f64
        } else {
            img.get(x as usize, y as usize, c) as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = row_x[0] * dx + row_x[1] * dy + row_x[2] + cx;
            let sy = row_y[0] * dx + row_y[1] * dy + row_y[2] + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let v = sample(x0, y0, c) * (1.0 - fx) * (1.0 - fy)
                    + sample(x0 + 1, y0, c) * fx * (1.0 - fy)
                    + sample(x0, y0 + 1, c) * (1.0 - fx) * fy
                    + sample(x0 + 1, y0 + 1, c) * fx * fy;
                out.set(x, y, c, clamp_round(v));
            }
        }
    }
    out
}

/// The random decisions of one weak augmentation, sampled separately from
/// their application so edge cases can be pinned in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakPlan {
    pub flip: bool,
    pub shift_x: i64,
    pub shift_y: i64,
}

impl WeakPlan {
    pub fn sample(rng: &mut Stream) -> Self {
        WeakPlan {
            flip: rng.bool_with(0.5),
            shift_x: rng.range_i64(-4, 4),
            shift_y: rng.range_i64(-4, 4),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let flipped = if self.flip {
            flip_horizontal(img)
        } else {
            img.clone()
        };
        shift(&flipped, self.shift_x, self.shift_y)
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.set(x, y, c, img.get(img.width - 1 - x, y, c));
            }
        }
    }
    out
}

/// Integer shift; `out(x, y) = in(x - dx, y - dy)`, vacated pixels mid-gray.
pub fn shift(img: &Image, dx: i64, dy: i64) -> Image {
    let mut out = Image::filled(img.height, img.width, FILL);
    for y in 0..img.height {
        let sy = y as i64 - dy;
        if sy < 0 || sy >= img.height as i64 {
            continue;
        }
        for x in 0..img.width {
            let sx = x as i64 - dx;
            if sx < 0 || sx >= img.width as i64 {
                continue;
            }
            for c in 0..3 {
                out.set(x, y, c, img.get(sx as usize, sy as usize, c));
            }
        }
    }
    out
}

/// Flip-and-shift: horizontal flip with probability one half, then an
/// integer shift uniform in `[-4, 4]` per axis.
pub fn weak_augment(img: &Image, rng: &mut Stream) -> Image {
    WeakPlan::sample(rng).apply(img)
}

/// One sampled slot of a strong augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrongOp {
    pub kind: TransformKind,
    pub execute: bool,
    pub magnitude: f64,
}

/// The random decisions of one strong augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct StrongPlan {
    pub ops: [StrongOp; 2],
    pub cutout_cx: usize,
    pub cutout_cy: usize,
}

impl StrongPlan {
    /// Draw order per sample: two (kind, execute, magnitude-if-executed)
    /// slots with replacement, then the cutout center.
    pub fn sample(img_h: usize, img_w: usize, rng: &mut Stream) -> Self {
        let mut slot = || {
            let kind = TransformKind::ALL[rng.below(15) as usize];
            let execute = rng.bool_with(0.6);
            let magnitude = match (execute, kind.range()) {
                (true, Some((lo, hi))) => {
                    let m = rng.uniform(lo, hi);
                    if kind == TransformKind::Posterize {
                        m.round()
                    } else {
                        m
                    }
                }
                _ => 0.0,
            };
            StrongOp {
                kind,
                execute,
                magnitude,
            }
        };
        let ops = [slot(), slot()];
        StrongPlan {
            ops,
            cutout_cx: rng.below(img_w as u32) as usize,
            cutout_cy: rng.below(img_h as u32) as usize,
        }
    }

    pub fn apply(&self, img: &Image, cutout_side: usize) -> Result<Image> {
        let mut cur = img.clone();
        for op in &self.ops {
            if op.execute {
                cur = apply_transform(op.kind, op.magnitude, &cur)?;
            }
        }
        Ok(cutout_at(&cur, cutout_side, self.cutout_cx, self.cutout_cy))
    }
}

/// Default cutout side: half the shorter image side.
pub fn default_cutout_side(img: &Image) -> usize {
    (img.height.min(img.width) / 2).max(1)
}

/// Two table draws (with replacement, each executed with probability 0.6,
/// magnitude uniform over its range) followed by cutout.
pub fn strong_augment(img: &Image, rng: &mut Stream) -> Image {
    let plan = StrongPlan::sample(img.height, img.width, rng);
    // Plans sampled from the table carry in-range magnitudes.
    plan.apply(img, default_cutout_side(img))
        .expect("sampled plan is valid")
}

/// Masks the side x side square centered at a uniformly chosen pixel
/// (clipped at the borders) with mid-gray.
pub fn cutout(img: &Image, side: usize, rng: &mut Stream) -> Image {
    assert!(side >= 1, "cutout side must be >= 1");
    let cx = rng.below(img.width as u32) as usize;
    let cy = rng.below(img.height as u32) as usize;
    cutout_at(img, side, cx, cy)
}

pub fn cutout_at(img: &Image, side: usize, cx: usize, cy: usize) -> Image {
    let mut out = img.clone();
    let half = (side / 2) as i64;
    let x0 = (cx as i64 - half).max(0) as usize;
    let y0 = (cy as i64 - half).max(0) as usize;
    let x1 = ((cx as i64 - half) + side as i64).min(img.width as i64).max(0) as usize;
    let y1 = ((cy as i64 - half) + side as i64).min(img.height as i64).max(0) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            for c in 0..3 {
                out.set(x, y, c, FILL);
            }
        }
    }
    out
}

/// Which augmentation a batch helper applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

/// Augments a batch with one derived stream per sample:
/// `derive(seed, [view tag, epoch, sample_index])`. Output is identical for
/// any worker count.
pub fn augment_batch(
    images: &[&Image],
    view: View,
    seed: u64,
    epoch: u64,
    sample_indices: &[u64],
    workers: usize,
) -> Vec<Image> {
    assert_eq!(images.len(), sample_indices.len());
    let workers = workers.max(1);
    let tag = match view {
        View::Weak => purpose::AUGMENT_WEAK,
        View::Strong => purpose::AUGMENT_STRONG,
    };
    let one = |(&img, &idx): (&&Image, &u64)| -> Image {
        let mut stream = Stream::derive(seed, &[tag, epoch, idx]);
        match view {
            View::Weak => weak_augment(img, &mut stream),
            View::Strong => strong_augment(img, &mut stream),
        }
    };
    if workers == 1 || images.len() < 2 {
        return images.iter().zip(sample_indices).map(one).collect();
    }
    let chunk = images.len().div_ceil(workers);
    let mut out: Vec<Option<Image>> = vec![None; images.len()];
    std::thread::scope(|scope| {
        for (slot_chunk, (img_chunk, idx_chunk)) in out
            .chunks_mut(chunk)
            .zip(images.chunks(chunk).zip(sample_indices.chunks(chunk)))
        {
            scope.spawn(move || {
                for (slot, pair) in slot_chunk.iter_mut().zip(img_chunk.iter().zip(idx_chunk)) {
                    *slot = Some(one(pair));
                }
            });
        }
    });
    out.into_iter().map(|o| o.unwrap()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        let mut s = Stream::seed(seed);
        let mut img = Image::new(32, 32);
        for p in img.pixels.iter_mut() {
            *p = s.below(256) as u8;
        }
        img
    }

    #[test]
    fn invert_is_255_minus_v_and_an_involution() {
        let img = test_image(1);
        let inv = apply_transform(TransformKind::Invert, 0.0, &img).unwrap();
        assert_eq!(inv.get(0, 0, 0), 255 - img.get(0, 0, 0));
        let back = apply_transform(TransformKind::Invert, 0.0, &inv).unwrap();
        assert_eq!(back, img);
        // spot values from the contract
        let mut one = Image::filled(1, 1, 200);
        one.pixels[1] = 0;
        let inv = apply_transform(TransformKind::Invert, 0.0, &one).unwrap();
        assert_eq!(inv.pixels[0], 55);
        assert_eq!(inv.pixels[1], 255);
    }

    #[test]
    fn identity_magnitudes_are_bitwise_identity() {
        let img = test_image(2);
        use TransformKind::*;
        for (kind, mag) in [
            (Brightness, 1.0),
            (Colour, 1.0),
            (Contrast, 1.0),
            (Sharpness, 1.0),
            (Posterize, 8.0),
            (Rotate, 0.0),
            (ShearX, 0.0),
            (ShearY, 0.0),
            (TranslateX, 0.0),
            (TranslateY, 0.0),
            (Solarize, 256.0),
            (Identity, 0.0),
        ] {
            let out = apply_transform(kind, mag, &img).unwrap();
            assert_eq!(out, img, "{kind:?} at {mag} must be the identity");
        }
    }

    #[test]
    fn magnitude_out_of_range_is_a_contract_error() {
        let img = test_image(3);
        assert!(apply_transform(TransformKind::Rotate, 31.0, &img).is_err());
        assert!(apply_transform(TransformKind::Brightness, 2.0, &img).is_err());
    }

    #[test]
    fn autocontrast_full_range_is_identity() {
        let mut img = test_image(4);
        // force each channel to span [0, 255]
        for c in 0..3 {
            img.pixels[c] = 0;
            img.pixels[3 + c] = 255;
        }
        let out = apply_transform(TransformKind::AutoContrast, 0.0, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn colour_on_gray_image_is_identity() {
        let mut img = Image::new(8, 8);
        let mut s = Stream::seed(5);
        for p in img.pixels.chunks_exact_mut(3) {
            let v = s.below(256) as u8;
            p.fill(v);
        }
        let out = apply_transform(TransformKind::Colour, 0.3, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn equalize_constant_channel_unchanged() {
        let img = Image::filled(8, 8, 93);
        let out = apply_transform(TransformKind::Equalize, 0.0, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn equalize_pins_lowest_bin_to_zero() {
        let mut img = Image::filled(2, 2, 100);
        img.pixels[0] = 50; // channel 0 of one pixel
        let out = apply_transform(TransformKind::Equalize, 0.0, &img).unwrap();
        assert_eq!(out.pixels[0], 0);
    }

    #[test]
    fn weak_plan_identity_and_involution() {
        let img = test_image(6);
        let id = WeakPlan {
            flip: false,
            shift_x: 0,
            shift_y: 0,
        };
        assert_eq!(id.apply(&img), img);
        let flip = WeakPlan {
            flip: true,
            shift_x: 0,
            shift_y: 0,
        };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
    }

    #[test]
    fn shift_moves_bright_pixel_and_fills_gray() {
        let mut img = Image::filled(8, 8, 0);
        img.set(3, 4, 0, 250);
        let plan = WeakPlan {
            flip: false,
            shift_x: 2,
            shift_y: 0,
        };
        let out = plan.apply(&img);
        assert_eq!(out.get(5, 4, 0), 250);
        // vacated columns are mid-gray in all channels
        for y in 0..8 {
            for x in 0..2 {
                for c in 0..3 {
                    assert_eq!(out.get(x, y, c), FILL);
                }
            }
        }
    }

    #[test]
    fn cutout_areas() {
        let img = test_image(7);
        let count_masked = |out: &Image| {
            let mut n = 0;
            for y in 0..32 {
                for x in 0..32 {
                    if (0..3).all(|c| out.get(x, y, c) == FILL)
                        && !(0..3).all(|c| img.get(x, y, c) == FILL)
                    {
                        n += 1;
                    }
                }
            }
            n
        };
        let full = cutout_at(&img, 32, 16, 16);
        assert!(full.pixels.iter().all(|&p| p == FILL));
        let interior = cutout_at(&img, 16, 16, 16);
        assert_eq!(count_masked(&interior), 256);
        let corner = cutout_at(&img, 16, 0, 0);
        assert_eq!(count_masked(&corner), 64);
    }

    #[test]
    fn strong_plan_degenerate_draw_leaves_only_cutout() {
        let img = test_image(8);
        let plan = StrongPlan {
            ops: [
                StrongOp {
                    kind: TransformKind::Identity,
                    execute: false,
                    magnitude: 0.0,
                },
                StrongOp {
                    kind: TransformKind::Identity,
                    execute: false,
                    magnitude: 0.0,
                },
            ],
            cutout_cx: 0,
            cutout_cy: 0,
        };
        let out = plan.apply(&img, 16).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let in_patch = x < 8 && y < 8;
                for c in 0..3 {
                    if in_patch {
                        assert_eq!(out.get(x, y, c), FILL);
                    } else {
                        assert_eq!(out.get(x, y, c), img.get(x, y, c));
                    }
                }
            }
        }
    }

    #[test]
    fn strong_augment_same_seed_is_bitwise_identical() {
        let img = test_image(9);
        let a = strong_augment(&img, &mut Stream::derive(77, &[1]));
        let b = strong_augment(&img, &mut Stream::derive(77, &[1]));
        assert_eq!(a, b);
    }

    #[test]
    fn execution_probability_is_point_six() {
        let mut rng = Stream::seed(10);
        let mut executed = 0u64;
        let n = 10_000;
        for _ in 0..n {
            let plan = StrongPlan::sample(32, 32, &mut rng);
            executed += plan.ops.iter().filter(|o| o.execute).count() as u64;
        }
        let frac = executed as f64 / (2 * n) as f64;
        assert!((frac - 0.6).abs() < 0.02, "executed fraction {frac}");
    }

    #[test]
    fn batch_augment_worker_count_invariance() {
        let images: Vec<Image> = (0..37).map(|i| test_image(100 + i)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let indices: Vec<u64> = (0..37).collect();
        for view in [View::Weak, View::Strong] {
            let one = augment_batch(&refs, view, 42, 3, &indices, 1);
            let eight = augment_batch(&refs, view, 42, 3, &indices, 8);
            assert_eq!(one, eight);
        }
    }
}
