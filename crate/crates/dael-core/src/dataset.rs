//! Synthetic multi-domain datasets, binary persistence and batch sampling.
//!
//! Classes are geometric glyphs rendered with per-sample jitter; domains are
//! fixed pixel-level styles of the same glyph vocabulary, so every domain
//! shares classes while differing in appearance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::{purpose, Stream};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DAELDS1\0";
pub const HEADER_LEN: u64 = 20;

/// A labeled image collection for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDataset {
    pub domain_id: u8,
    pub num_classes: u16,
    pub images: Vec<Image>,
    pub labels: Vec<u16>,
}

impl DomainDataset {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::contract(format!(
                "dataset domain {}: {} images vs {} labels",
                self.domain_id,
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::contract(format!(
                "dataset domain {}: label {bad} >= C={}",
                self.domain_id, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Pixel-level appearance of one synthetic domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainStyle {
    /// Dark glyph on a light background.
    Plain,
    /// Color inversion of the plain rendering.
    Inverted,
    /// Plain rendering plus additive Gaussian pixel noise (sigma 25).
    Noisy,
    /// Diagonal-stripe background behind the glyph, then a 3x3 box blur.
    Textured,
}

impl DomainStyle {
    pub const DEFAULT: [DomainStyle; 4] = [
        DomainStyle::Plain,
        DomainStyle::Inverted,
        DomainStyle::Noisy,
        DomainStyle::Textured,
    ];
}

/// Generation parameters for the synthetic benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: u16,
    pub image_side: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub styles: Vec<DomainStyle>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 5,
            image_side: 32,
            train_per_domain: 2000,
            test_per_domain: 500,
            styles: DomainStyle::DEFAULT.to_vec(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.num_classes) {
            return Err(Error::contract(format!(
                "num_classes must be in [2, 5] (five glyph kinds), got {}",
                self.num_classes
            )));
        }
        if self.styles.len() < 3 {
            return Err(Error::contract(format!(
                "need at least 3 domains for leave-one-out, got {}",
                self.styles.len()
            )));
        }
        if self.image_side < 8 {
            return Err(Error::contract("image_side must be >= 8".to_string()));
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(Error::contract(
                "per-domain sample counts must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-sample rendering latent: class plus jitter in position, scale and
/// glyph intensity.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Latent {
    pub class: u16,
    pub dx: i64,
    pub dy: i64,
    pub scale: f64,
    pub glyph_intensity: f64,
    /// Textured draws its glyph bright for most samples.
    pub textured_bright: bool,
}

const SPLIT_TRAIN: u64 = 0;
const SPLIT_TEST: u64 = 1;

fn sample_latent(spec: &SynthSpec, domain: u64, split: u64, index: u64) -> Latent {
    let mut s = Stream::derive(spec.seed, &[purpose::DATASET, domain, split, index]);
    Latent {
        class: (index % spec.num_classes as u64) as u16,
        dx: s.range_i64(-3, 3),
        dy: s.range_i64(-3, 3),
        scale: s.uniform(0.8, 1.2),
        glyph_intensity: s.uniform(20.0, 60.0),
        textured_bright: s.bool_with(0.75),
    }
}

const BG_PLAIN: f64 = 170.0;

/// Fraction of a pixel covered by the glyph, from a 2x2 subsample grid.
fn coverage(class: u16, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let mut hits = 0;
    for sy in 0..2 {
        for sx in 0..2 {
            let x = px + 0.25 + 0.5 * sx as f64 - cx;
            let y = py + 0.25 + 0.5 * sy as f64 - cy;
            let inside = match class % 5 {
                // disk
                0 => x * x + y * y <= r * r,
                // square
                1 => x.abs() <= 0.85 * r && y.abs() <= 0.85 * r,
                // upward triangle
                2 => {
                    let top = -r;
                    let bottom = 0.8 * r;
                    y >= top && y <= bottom && x.abs() <= 0.95 * r * (y - top) / (bottom - top)
                }
                // cross
                3 => (x.abs() <= 0.32 * r && y.abs() <= r) || (y.abs() <= 0.32 * r && x.abs() <= r),
                // ring
                _ => {
                    let d2 = x * x + y * y;
                    d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
                }
            };
            if inside {
                hits += 1;
            }
        }
    }
    hits as f64 / 4.0
}

/// Renders one sample in the given style. Inversion is literally the
/// inverted plain rendering of the same latent.
pub(crate) fn render_sample(
    spec: &SynthSpec,
    latent: Latent,
    style: DomainStyle,
    noise: &mut Stream,
) -> Image {
    let side = spec.image_side;
    let cx = side as f64 / 2.0 + latent.dx as f64;
    let cy = side as f64 / 2.0 + latent.dy as f64;
    let r = side as f64 * 0.28 * latent.scale;

    // Stripes are narrower than a glyph, so every glyph crosses both the
    // bright and the dark band and stays recognizable after the blur while
    // the domain contributes dark-background statistics.
    let base_bg = |x: usize, y: usize| -> f64 {
        match style {
            DomainStyle::Textured => {
                if ((x + y) / 4) % 2 == 0 {
                    180.0
                } else {
                    120.0
                }
            }
            _ => BG_PLAIN,
        }
    };

    // Textured flips glyph polarity on most samples, so sources carry
    // some bright-glyph statistics (the way real multi-domain suites mix
    // polarity) without turning any single domain upside down.
    let glyph = match style {
        DomainStyle::Textured if latent.textured_bright => 255.0 - latent.glyph_intensity,
        _ => latent.glyph_intensity,
    };
    let mut img = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let cov = coverage(latent.class, x as f64, y as f64, cx, cy, r);
            let bg = base_bg(x, y);
            let v = bg + cov * (glyph - bg);
            let v = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            for c in 0..3 {
                img.set(x, y, c, v);
            }
        }
    }

    match style {
        DomainStyle::Plain => img,
        DomainStyle::Inverted => {
            for p in img.pixels.iter_mut() {
                *p = 255 - *p;
            }
            img
        }
        DomainStyle::Noisy => {
            // One noise draw per pixel, shared across channels.
            let mut out = img;
            for y in 0..side {
                for x in 0..side {
                    let n = noise.normal() * 25.0;
                    for c in 0..3 {
                        let v = (out.get(x, y, c) as f64 + n).round().clamp(0.0, 255.0) as u8;
                        out.set(x, y, c, v);
                    }
                }
            }
            out
        }
        DomainStyle::Textured => box_blur3(&img),
    }
}

fn box_blur3(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += img.get(sx, sy, c) as f64;
                    }
                }
                out.set(x, y, c, (acc / 9.0 + 0.5).floor() as u8);
            }
        }
    }
    out
}

fn generate_split(spec: &SynthSpec, domain: u64, split: u64, count: usize) -> DomainDataset {
    let style = spec.styles[domain as usize];
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for index in 0..count as u64 {
        let latent = sample_latent(spec, domain, split, index);
        // Separate stream for pixel noise so latent draws stay aligned
        // across styles.
        let mut noise = Stream::derive(spec.seed, &[purpose::DATASET, domain, split, index, 1]);
        images.push(render_sample(spec, latent, style, &mut noise));
        labels.push(latent.class);
    }
    DomainDataset {
        domain_id: domain as u8,
        num_classes: spec.num_classes,
        images,
        labels,
    }
}

/// Generates `(train, test)` splits for every domain in the spec.
/// Class-balanced, deterministic given the seed, and split-disjoint by
/// construction (train and test use separate latent streams).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<(DomainDataset, DomainDataset)>> {
    spec.validate()?;
    Ok((0..spec.styles.len() as u64)
        .map(|d| {
            (
                generate_split(spec, d, SPLIT_TRAIN, spec.train_per_domain),
                generate_split(spec, d, SPLIT_TEST, spec.test_per_domain),
            )
        })
        .collect())
}

/// Writes a dataset in the DAELDS1 layout (little-endian): 8-byte magic,
/// u32 count, u16 C, u16 H, u16 W, u8 channels, u8 domain id, then per
/// record a u16 label followed by raw H*W*3 pixels.
pub fn save_dataset(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let (h, w) = match ds.images.first() {
        Some(img) => (img.height, img.width),
        None => (0, 0),
    };
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(ds.images.len() as u32).to_le_bytes())?;
    f.write_all(&ds.num_classes.to_le_bytes())?;
    f.write_all(&(h as u16).to_le_bytes())?;
    f.write_all(&(w as u16).to_le_bytes())?;
    f.write_all(&[3u8, ds.domain_id])?;
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        f.write_all(&label.to_le_bytes())?;
        f.write_all(&img.pixels)?;
    }
    f.flush()?;
    Ok(())
}

fn read_exact_at(f: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    f.read_exact(buf)
        .map_err(|_| Error::format(offset, format!("truncated while reading {what}")))
}

/// Reads a DAELDS1 file back; the round trip is bit-exact.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_at(&mut f, &mut magic, 0, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact_at(&mut f, &mut u32buf, 8, "count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut u16buf = [0u8; 2];
    read_exact_at(&mut f, &mut u16buf, 12, "num_classes")?;
    let num_classes = u16::from_le_bytes(u16buf);
    read_exact_at(&mut f, &mut u16buf, 14, "height")?;
    let h = u16::from_le_bytes(u16buf) as usize;
    read_exact_at(&mut f, &mut u16buf, 16, "width")?;
    let w = u16::from_le_bytes(u16buf) as usize;
    let mut u8buf = [0u8; 2];
    read_exact_at(&mut f, &mut u8buf, 18, "channels/domain")?;
    if u8buf[0] != 3 {
        return Err(Error::format(
            18,
            format!("expected 3 channels, got {}", u8buf[0]),
        ));
    }
    let domain_id = u8buf[1];

    let record = 2 + h * w * 3;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let offset = HEADER_LEN + (i * record) as u64;
        read_exact_at(&mut f, &mut u16buf, offset, "label")?;
        let label = u16::from_le_bytes(u16buf);
        if label >= num_classes {
            return Err(Error::format(
                offset,
                format!("label {label} >= C={num_classes}"),
            ));
        }
        let mut pixels = vec![0u8; h * w * 3];
        read_exact_at(&mut f, &mut pixels, offset + 2, "pixels")?;
        images.push(Image {
            height: h,
            width: w,
            pixels,
        });
        labels.push(label);
    }
    let mut tail = [0u8; 1];
    if f.read(&mut tail)? != 0 {
        return Err(Error::format(
            HEADER_LEN + (count * record) as u64,
            "trailing bytes after last record".to_string(),
        ));
    }
    Ok(DomainDataset {
        domain_id,
        num_classes,
        images,
        labels,
    })
}

/// A labeled mini-batch with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub x: Tensor<f32>,
    pub labels: Vec<u16>,
    pub domains: Vec<u8>,
}

/// Packs images into a `[B, 3, H, W]` tensor with values `pixel / 255`.
pub fn images_to_tensor<S: Scalar>(images: &[&Image]) -> Tensor<S> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = (images[0].height, images[0].width);
    let mut vals = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "mixed image sizes");
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    vals.push(S::from_f64(img.get(x, y, c) as f64 / 255.0));
                }
            }
        }
    }
    Tensor::from_vec(vec![images.len(), 3, h, w], vals)
}

/// Shuffled index order for one domain and epoch; the same arguments always
/// produce the same permutation.
pub fn epoch_order(len: usize, seed: u64, domain: u64, epoch: u64, tag: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..len as u32).collect();
    let mut s = Stream::derive(seed, &[tag, domain, epoch]);
    s.shuffle(&mut order);
    order
}

/// One batch per domain: without-replacement draws from each domain's
/// epoch-level shuffled order.
pub fn sample_domain_batches(
    datasets: &[&DomainDataset],
    per_domain: usize,
    seed: u64,
    epoch: u64,
    iter: usize,
) -> Result<Vec<Batch>> {
    let mut out = Vec::with_capacity(datasets.len());
    for (d, ds) in datasets.iter().enumerate() {
        if ds.len() < per_domain {
            return Err(Error::contract(format!(
                "domain {}: batch {per_domain} exceeds dataset size {}",
                ds.domain_id,
                ds.len()
            )));
        }
        let order = epoch_order(ds.len(), seed, d as u64, epoch, purpose::SHUFFLE);
        let start = iter * per_domain;
        if start + per_domain > order.len() {
            return Err(Error::contract(format!(
                "iteration {iter} overruns the epoch order for domain {}",
                ds.domain_id
            )));
        }
        let idx = &order[start..start + per_domain];
        let images: Vec<&Image> = idx.iter().map(|&i| &ds.images[i as usize]).collect();
        let labels: Vec<u16> = idx.iter().map(|&i| ds.labels[i as usize]).collect();
        out.push(Batch {
            x: images_to_tensor(&images),
            labels,
            domains: vec![ds.domain_id; per_domain],
        });
    }
    Ok(out)
}

/// Access counters for protocol-hygiene checks.
#[derive(Debug, Default)]
pub struct AccessCounters {
    pub image_reads: AtomicU64,
    pub label_reads: AtomicU64,
}

impl AccessCounters {
    pub fn images(&self) -> u64 {
        self.image_reads.load(Ordering::Relaxed)
    }

    pub fn labels(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }
}

/// A dataset handle whose every image and label access is counted, so
/// experiment drivers can prove what training did and did not read.
#[derive(Clone, Copy)]
pub struct DatasetView<'a> {
    ds: &'a DomainDataset,
    counters: Option<&'a AccessCounters>,
}

impl<'a> DatasetView<'a> {
    pub fn plain(ds: &'a DomainDataset) -> Self {
        DatasetView { ds, counters: None }
    }

    pub fn counted(ds: &'a DomainDataset, counters: &'a AccessCounters) -> Self {
        DatasetView {
            ds,
            counters: Some(counters),
        }
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn num_classes(&self) -> u16 {
        self.ds.num_classes
    }

    pub fn domain_id(&self) -> u8 {
        self.ds.domain_id
    }

    pub fn image(&self, i: usize) -> &'a Image {
        if let Some(c) = self.counters {
            c.image_reads.fetch_add(1, Ordering::Relaxed);
        }
        &self.ds.images[i]
    }

    pub fn label(&self, i: usize) -> u16 {
        if let Some(c) = self.counters {
            c.label_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.ds.labels[i]
    }
}
