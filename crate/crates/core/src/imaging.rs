//! CT slices, HU windowing, foreground masks, synthetic phantoms and slice files.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Magic bytes opening every slice file.
pub const SLICE_MAGIC: &[u8; 4] = b"ASC1";
/// Spatial dimensions must be multiples of this (four exact halvings).
pub const SPATIAL_MULTIPLE: usize = 16;

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 2000.0);
pub const DEFAULT_FOREGROUND_HU: f64 = -500.0;

/// A 2-D CT slice in Hounsfield units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

fn check_spatial(height: usize, width: usize) -> Result<()> {
    if height < SPATIAL_MULTIPLE
        || width < SPATIAL_MULTIPLE
        || !height.is_multiple_of(SPATIAL_MULTIPLE)
        || !width.is_multiple_of(SPATIAL_MULTIPLE)
    {
        return Err(shape_err!(
            "{height}x{width} is not a positive multiple of {SPATIAL_MULTIPLE} in both dimensions"
        ));
    }
    Ok(())
}

impl Slice {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_spatial(height, width)?;
        if values.len() != height * width {
            return Err(shape_err!(
                "slice {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / width,
                col: i % width,
                value: values[i] as f64,
            });
        }
        Ok(Slice {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }
}

/// Windowed image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl NormalizedImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!(
                "normalized value {} at ({}, {}) outside [0, 1]",
                values[i],
                i / width,
                i % width
            ));
        }
        Ok(NormalizedImage {
            height,
            width,
            values,
        })
    }

    /// Clamps arbitrary finite values into `[0, 1]`.
    pub fn from_unclamped(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / width.max(1),
                col: i % width.max(1),
                value: values[i],
            });
        }
        Self::new(
            height,
            width,
            values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `1 × 1 × H × W` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.values.clone())
            .expect("shape matches by construction")
    }
}

/// Per-pixel foreground flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err!(
                "mask {height}x{width} with {} values",
                values.len()
            ));
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Pools onto a `block × block` grid; a cell is foreground when at least
    /// half of its pixels are.
    pub fn pool(&self, block: usize) -> Result<Mask> {
        if block == 0 || !self.height.is_multiple_of(block) || !self.width.is_multiple_of(block) {
            return Err(shape_err!(
                "cannot pool {}x{} mask by {block}",
                self.height,
                self.width
            ));
        }
        let (gh, gw) = (self.height / block, self.width / block);
        let mut values = Vec::with_capacity(gh * gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut on = 0;
                for y in gy * block..(gy + 1) * block {
                    for x in gx * block..(gx + 1) * block {
                        on += self.get(y, x) as usize;
                    }
                }
                values.push(2 * on >= block * block);
            }
        }
        Mask::new(gh, gw, values)
    }
}

/// `clamp((v − lo)/(hi − lo), 0, 1)` per pixel.
pub fn hu_window_normalize(s: &Slice, lo: f64, hi: f64) -> Result<NormalizedImage> {
    if !(lo < hi) {
        return Err(invalid!(
            "window lower bound {lo} must be below upper bound {hi}"
        ));
    }
    let span = hi - lo;
    let mut values = Vec::with_capacity(s.values.len());
    for (i, &v) in s.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: i / s.width,
                col: i % s.width,
                value: v as f64,
            });
        }
        values.push(((v as f64 - lo) / span).clamp(0.0, 1.0));
    }
    NormalizedImage::new(s.height, s.width, values)
}

/// Inverse of [`hu_window_normalize`] on the unclamped interior.
pub fn hu_window_denormalize(img: &NormalizedImage, lo: f64, hi: f64) -> Result<Slice> {
    if !(lo < hi) {
        return Err(invalid!(
            "window lower bound {lo} must be below upper bound {hi}"
        ));
    }
    let values = img
        .values
        .iter()
        .map(|&v| (lo + v * (hi - lo)) as f32)
        .collect();
    Slice::new(img.height, img.width, values)
}

/// Foreground where HU exceeds `threshold`.
pub fn foreground_mask(s: &Slice, threshold: f64) -> Mask {
    Mask {
        height: s.height,
        width: s.width,
        values: s.values.iter().map(|&v| v as f64 > threshold).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionShape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
    },
    Rect {
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
}

impl RegionShape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        match *self {
            RegionShape::Ellipse { cy, cx, ry, rx } => {
                let dy = (row as f64 + 0.5 - cy) / ry;
                let dx = (col as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            RegionShape::Rect { y0, x0, h, w } => {
                row >= y0 && row < y0 + h && col >= x0 && col < x0 + w
            }
        }
    }

    fn inside(&self, size: usize) -> bool {
        let s = size as f64;
        match *self {
            RegionShape::Ellipse { cy, cx, ry, rx } => {
                ry > 0.0
                    && rx > 0.0
                    && cy - ry >= 0.0
                    && cx - rx >= 0.0
                    && cy + ry <= s
                    && cx + rx <= s
            }
            RegionShape::Rect { y0, x0, h, w } => y0 + h <= size && x0 + w <= size,
        }
    }
}

/// Tissue palette for synthetic phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Air,
    MuscleLike,
    LiverLike,
    BoneLike,
}

impl Tissue {
    pub fn mean_hu(self) -> f64 {
        match self {
            Tissue::Air => -1000.0,
            Tissue::MuscleLike => 40.0,
            Tissue::LiverLike => 60.0,
            Tissue::BoneLike => 400.0,
        }
    }

    /// Noise standard deviation in HU; liver and muscle values follow measured
    /// ROI statistics of a low-dose abdominal slice.
    pub fn noise_std(self) -> f64 {
        match self {
            Tissue::Air => 0.0,
            Tissue::MuscleLike => 44.73,
            Tissue::LiverLike => 63.23,
            Tissue::BoneLike => 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueRegion {
    pub shape: RegionShape,
    pub mean_hu: f64,
    pub noise_std: f64,
}

impl TissueRegion {
    pub fn of(tissue: Tissue, shape: RegionShape) -> Self {
        TissueRegion {
            shape,
            mean_hu: tissue.mean_hu(),
            noise_std: tissue.noise_std(),
        }
    }
}

/// Layout of a piecewise-constant phantom; later regions paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    pub background_hu: f64,
    pub background_std: f64,
    pub regions: Vec<TissueRegion>,
}

impl PhantomSpec {
    pub fn empty(seed: u64, size: usize) -> Self {
        PhantomSpec {
            seed,
            size,
            background_hu: Tissue::Air.mean_hu(),
            background_std: Tissue::Air.noise_std(),
            regions: Vec::new(),
        }
    }

    /// A randomized abdomen-like layout: a muscle-like body, liver-like organs,
    /// bone-like spine and ribs, and small liver-like vessels.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            Uniform::new(lo, hi).expect("lo < hi").sample(rng)
        };
        let mut spec = PhantomSpec::empty(seed, size);

        let body_ry = s * u(&mut rng, 0.36, 0.44);
        let body_rx = s * u(&mut rng, 0.40, 0.47);
        let cy = s / 2.0 + u(&mut rng, -0.03, 0.03) * s;
        let cx = s / 2.0 + u(&mut rng, -0.02, 0.02) * s;
        let body_ry = body_ry.min(cy - 0.5).min(s - cy - 0.5);
        let body_rx = body_rx.min(cx - 0.5).min(s - cx - 0.5);
        spec.push(
            Tissue::MuscleLike,
            RegionShape::Ellipse {
                cy,
                cx,
                ry: body_ry,
                rx: body_rx,
            },
        );

        // Liver-like organ on one side, a smaller organ on the other.
        let side = if u(&mut rng, 0.0, 1.0) < 0.5 {
            -1.0
        } else {
            1.0
        };
        let organs = [
            (side, u(&mut rng, 0.45, 0.6), u(&mut rng, 0.35, 0.5)),
            (-side, u(&mut rng, 0.22, 0.32), u(&mut rng, 0.2, 0.3)),
        ];
        for (dir, fry, frx) in organs {
            let ry = body_ry * fry;
            let rx = body_rx * frx;
            let ocy = cy - body_ry * u(&mut rng, 0.05, 0.25);
            let ocx = cx + dir * body_rx * u(&mut rng, 0.3, 0.45);
            spec.push(
                Tissue::LiverLike,
                RegionShape::Ellipse {
                    cy: ocy,
                    cx: ocx,
                    ry,
                    rx,
                },
            );
        }

        // Spine.
        let sr = body_ry * u(&mut rng, 0.12, 0.17);
        spec.push(
            Tissue::BoneLike,
            RegionShape::Ellipse {
                cy: cy + body_ry * 0.62,
                cx,
                ry: sr,
                rx: sr * 1.1,
            },
        );
        // Ribs along the body outline.
        let ribs = 2 + (u(&mut rng, 0.0, 3.0) as usize);
        for _ in 0..ribs {
            let theta = u(&mut rng, 0.0, std::f64::consts::TAU);
            let r = (s * u(&mut rng, 0.025, 0.04)).max(1.0);
            let rcy = cy + 0.85 * body_ry * theta.sin();
            let rcx = cx + 0.85 * body_rx * theta.cos();
            spec.push(
                Tissue::BoneLike,
                RegionShape::Ellipse {
                    cy: rcy,
                    cx: rcx,
                    ry: r,
                    rx: r * 1.4,
                },
            );
        }
        // Vessels: small bright dots inside the body.
        let vessels = 2 + (u(&mut rng, 0.0, 4.0) as usize);
        for _ in 0..vessels {
            let r = (s * u(&mut rng, 0.015, 0.03)).max(1.0);
            let vcy = cy + body_ry * u(&mut rng, -0.5, 0.4);
            let vcx = cx + body_rx * u(&mut rng, -0.6, 0.6);
            spec.regions.push(TissueRegion {
                shape: RegionShape::Ellipse {
                    cy: vcy,
                    cx: vcx,
                    ry: r,
                    rx: r,
                },
                mean_hu: 180.0,
                noise_std: Tissue::LiverLike.noise_std(),
            });
        }
        spec
    }

    fn push(&mut self, tissue: Tissue, shape: RegionShape) {
        self.regions.push(TissueRegion::of(tissue, shape));
    }

    fn validate(&self) -> Result<()> {
        check_spatial(self.size, self.size)?;
        if !(self.background_std >= 0.0) {
            return Err(invalid!("background noise std must be non-negative"));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if !(r.noise_std >= 0.0) || !r.mean_hu.is_finite() {
                return Err(invalid!(
                    "region {i}: noise std must be non-negative, mean finite"
                ));
            }
            if !r.shape.inside(self.size) {
                return Err(invalid!(
                    "region {i} extends outside the {0}x{0} image",
                    self.size
                ));
            }
            let area = (0..self.size)
                .flat_map(|y| (0..self.size).map(move |x| (y, x)))
                .filter(|&(y, x)| r.shape.contains(y, x))
                .count();
            if area == 0 {
                return Err(invalid!("region {i} covers no pixels"));
            }
        }
        Ok(())
    }
}

/// Renders `(clean, noisy)`; noise is zero-mean Gaussian with the covering
/// region's standard deviation. A pure function of `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Slice, Slice)> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e_ed0f_1ab5);
    let mut clean = Vec::with_capacity(n * n);
    let mut noisy = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (mean, std) = spec
                .regions
                .iter()
                .rev()
                .find(|r| r.shape.contains(y, x))
                .map(|r| (r.mean_hu, r.noise_std))
                .unwrap_or((spec.background_hu, spec.background_std));
            let z: f64 = StandardNormal.sample(&mut rng);
            clean.push(mean as f32);
            noisy.push((mean + std * z) as f32);
        }
    }
    Ok((Slice::new(n, n, clean)?, Slice::new(n, n, noisy)?))
}

pub fn save_slice(s: &Slice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(12 + 4 * s.values.len());
    bytes.extend_from_slice(SLICE_MAGIC);
    bytes.extend_from_slice(&(s.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(s.width as u32).to_le_bytes());
    for v in &s.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_slice(path: impl AsRef<Path>) -> Result<Slice> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_slice(&bytes, path)
}

fn decode_slice(bytes: &[u8], path: &Path) -> Result<Slice> {
    if bytes.len() < 4 || &bytes[..4] != SLICE_MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * height * width;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Dimensions {
            path: path.into(),
            detail: format!(
                "header says {height}x{width} but payload holds {} trailing bytes",
                bytes.len() - expected
            ),
        });
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Slice::new(height, width, values).map_err(|e| match e {
        Error::Shape(detail) => Error::Dimensions {
            path: path.into(),
            detail,
        },
        other => other,
    })
}

/// Lossless 16-bit grayscale PNG of a windowed image.
pub fn export_png16(img: &NormalizedImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    let data: Vec<u8> = img
        .values
        .iter()
        .flat_map(|&v| ((v * 65535.0).round() as u16).to_be_bytes())
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))
}
