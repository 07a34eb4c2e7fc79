//! Image quality metrics on the `[0, 1]` windowed domain.

use serde::{Deserialize, Serialize};

use crate::dataset::SlicePair;
use crate::error::{invalid, shape_err, Result};
use crate::esau::EsauNet;
use crate::imaging::{hu_window_normalize, NormalizedImage};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &NormalizedImage, b: &NormalizedImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(shape_err!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        ));
    }
    Ok(())
}

pub fn mse_values(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn mse(a: &NormalizedImage, b: &NormalizedImage) -> Result<f64> {
    same_shape(a, b)?;
    Ok(mse_values(a.values(), b.values()))
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &NormalizedImage, b: &NormalizedImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn rmse(a: &NormalizedImage, b: &NormalizedImage) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    for v in &mut g {
        *v /= total;
    }
    g
}

/// Separable valid-mode Gaussian filter, `h×w → (h−10)×(w−10)`.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..wo {
            tmp[y * wo + x] = g
                .iter()
                .zip(&row[x..x + SSIM_WINDOW])
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for (k, gk) in g.iter().enumerate() {
            let src = &tmp[(y + k) * wo..(y + k + 1) * wo];
            for (o, s) in out[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                *o += gk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..ho {
        for (k, gk) in g.iter().enumerate() {
            let dst = &mut tmp[(y + k) * wo..(y + k + 1) * wo];
            for (d, s) in dst.iter_mut().zip(&map[y * wo..(y + 1) * wo]) {
                *d += gk * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..wo {
            let t = tmp[y * wo + x];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * t;
            }
        }
    }
    out
}

struct SsimMoments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> SsimMoments {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimMoments {
        mx: filter_valid(x, h, w, g),
        my: filter_valid(y, h, w, g),
        exx: filter_valid(&xx, h, w, g),
        eyy: filter_valid(&yy, h, w, g),
        exy: filter_valid(&xy, h, w, g),
    }
}

fn check_ssim_input(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<()> {
    if x.len() != h * w || y.len() != h * w {
        return Err(shape_err!("ssim: planes do not match {h}x{w}"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!(
            "ssim: {h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        ));
    }
    Ok(())
}

/// Mean local SSIM of two `h × w` planes.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    check_ssim_input(x, y, h, w)?;
    let g = gaussian_window();
    let m = moments(x, y, h, w, &g);
    let mut total = 0.0;
    for i in 0..m.mx.len() {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + SSIM_C2;
        total += (a1 * a2) / (b1 * b2);
    }
    Ok(total / m.mx.len() as f64)
}

/// Mean local SSIM and its gradient with respect to `x`.
pub fn ssim_plane_grad(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    check_ssim_input(x, y, h, w)?;
    let g = gaussian_window();
    let m = moments(x, y, h, w, &g);
    let count = m.mx.len();
    let inv = 1.0 / count as f64;
    let mut d_mx = vec![0.0; count];
    let mut d_exx = vec![0.0; count];
    let mut d_exy = vec![0.0; count];
    let mut total = 0.0;
    for i in 0..count {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + SSIM_C2;
        let den = b1 * b2;
        let s = (a1 * a2) / den;
        total += s;
        d_mx[i] =
            inv * ((2.0 * my * a2 - 2.0 * my * a1) / den - s * (2.0 * mx / b1 - 2.0 * mx / b2));
        d_exx[i] = -inv * s / b2;
        d_exy[i] = inv * 2.0 * a1 / den;
    }
    let gm = filter_valid_adjoint(&d_mx, h, w, &g);
    let gxx = filter_valid_adjoint(&d_exx, h, w, &g);
    let gxy = filter_valid_adjoint(&d_exy, h, w, &g);
    let grad = (0..h * w)
        .map(|q| gm[q] + 2.0 * x[q] * gxx[q] + y[q] * gxy[q])
        .collect();
    Ok((total * inv, grad))
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), dynamic range 1.
pub fn ssim(a: &NormalizedImage, b: &NormalizedImage) -> Result<f64> {
    same_shape(a, b)?;
    ssim_plane(a.values(), b.values(), a.height(), a.width())
}

/// Axis-aligned rectangular region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Roi {
    fn overlaps(&self, other: &Roi) -> bool {
        self.y0 < other.y0 + other.h
            && other.y0 < self.y0 + self.h
            && self.x0 < other.x0 + other.w
            && other.x0 < self.x0 + self.w
    }

    fn pixels<'a>(&self, img: &'a [f64], width: usize) -> impl Iterator<Item = f64> + 'a {
        let r = *self;
        (r.y0..r.y0 + r.h).flat_map(move |y| (r.x0..r.x0 + r.w).map(move |x| img[y * width + x]))
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

/// Contrast-to-noise ratio `|mean(lesion) − mean(background)| / std(background)`,
/// with population standard deviation.
pub fn cnr(img: &NormalizedImage, lesion: Roi, background: Roi) -> Result<f64> {
    cnr_values(img.values(), img.height(), img.width(), lesion, background)
}

pub fn cnr_values(
    img: &[f64],
    height: usize,
    width: usize,
    lesion: Roi,
    background: Roi,
) -> Result<f64> {
    for roi in [lesion, background] {
        if roi.h == 0 || roi.w == 0 {
            return Err(invalid!("cnr: empty ROI {roi:?}"));
        }
        if roi.y0 + roi.h > height || roi.x0 + roi.w > width {
            return Err(invalid!("cnr: ROI {roi:?} outside {height}x{width}"));
        }
    }
    if lesion.overlaps(&background) {
        return Err(invalid!("cnr: lesion and background ROIs overlap"));
    }
    let (lm, _, _) = mean_std(lesion.pixels(img, width));
    let (bm, bs, _) = mean_std(background.pixels(img, width));
    if bs == 0.0 {
        return Err(invalid!("cnr: background ROI has zero standard deviation"));
    }
    Ok((lm - bm).abs() / bs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub rmse: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cnr: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(pred: &NormalizedImage, truth: &NormalizedImage) -> Result<Self> {
        let m = mse(pred, truth)?;
        Ok(ImageMetrics {
            psnr: psnr_from_mse(m),
            rmse: m.sqrt(),
            ssim: ssim(pred, truth)?,
            cnr: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation, summed in list order.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
        }
    }

    fn pm(&self, scale: f64) -> String {
        format!("{:.2}±{:.2}", self.mean * scale, self.std * scale)
    }
}

/// Per-image metrics plus dataset mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub images: Vec<ImageMetrics>,
    pub psnr: Summary,
    pub rmse: Summary,
    pub ssim: Summary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cnr: Option<Summary>,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(invalid!("metric report over an empty dataset"));
        }
        let col = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).collect::<Vec<_>>();
        let cnr = if images.iter().all(|m| m.cnr.is_some()) {
            Some(Summary::of(&col(|m| m.cnr.unwrap())))
        } else {
            None
        };
        Ok(MetricReport {
            count: images.len(),
            psnr: Summary::of(&col(|m| m.psnr)),
            rmse: Summary::of(&col(|m| m.rmse)),
            ssim: Summary::of(&col(|m| m.ssim)),
            cnr,
            images,
        })
    }

    /// CSV header and row: PSNR [dB], RMSE [×10⁻²], SSIM [%] as `mean±std`.
    pub fn to_csv(&self, method: &str) -> String {
        format!(
            "method,psnr_db,rmse_x1e-2,ssim_pct\n{method},{},{},{}\n",
            self.psnr.pm(1.0),
            self.rmse.pm(100.0),
            self.ssim.pm(100.0)
        )
    }
}

/// Denoises every pair's low-dose slice and scores it against the normal-dose slice.
pub fn evaluate(
    net: &EsauNet,
    dataset: &[SlicePair],
    window: (f64, f64),
    cnr_rois: Option<(Roi, Roi)>,
) -> Result<MetricReport> {
    let mut images = Vec::with_capacity(dataset.len());
    for pair in dataset {
        let x = hu_window_normalize(&pair.noisy, window.0, window.1)?;
        let y = hu_window_normalize(&pair.clean, window.0, window.1)?;
        let pred = net.denoise(&x)?;
        let mut m = ImageMetrics::compute(&pred, &y)?;
        if let Some((lesion, background)) = cnr_rois {
            m.cnr = Some(cnr(&pred, lesion, background)?);
        }
        images.push(m);
    }
    MetricReport::from_images(images)
}

/// Scores the low-dose inputs themselves, the reference every denoiser must beat.
pub fn evaluate_inputs(dataset: &[SlicePair], window: (f64, f64)) -> Result<MetricReport> {
    let images = dataset
        .iter()
        .map(|pair| {
            let x = hu_window_normalize(&pair.noisy, window.0, window.1)?;
            let y = hu_window_normalize(&pair.clean, window.0, window.1)?;
            ImageMetrics::compute(&x, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(images)
}
