//! K-means clustering of denoiser features into label maps.

use std::io::BufWriter;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::losses::FeatureMap;

pub const DEFAULT_CLUSTERS: usize = 5;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// RGB colours of labels `0..16`.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [0, 0, 0],
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        k: usize,
        seed: u64,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!(
                "{} labels for a {height}x{width} map",
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {bad} not below k = {k}"));
        }
        Ok(LabelMap {
            height,
            width,
            k,
            seed,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: LabelMap,
    pub iterations: usize,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

impl Clustering {
    pub fn within_cluster_sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one assignment")
    }

    pub fn sidecar(&self) -> ClusterSidecar {
        ClusterSidecar {
            k: self.labels.k,
            seed: self.labels.seed,
            iterations: self.iterations,
            within_cluster_sse: self.within_cluster_sse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSidecar {
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub within_cluster_sse: f64,
}

/// Per-pixel vectors with every channel shifted to zero mean and scaled to
/// unit variance (constant channels are only shifted).
pub fn standardized_points(f: &FeatureMap) -> Vec<Vec<f64>> {
    let (c, n) = (f.channels(), f.pixels());
    let mut points = vec![vec![0.0; c]; n];
    for ch in 0..c {
        let plane = &f.data()[ch * n..(ch + 1) * n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for (p, v) in points.iter_mut().zip(plane) {
            p[ch] = (v - mean) * scale;
        }
    }
    points
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Labels, centroids, within-cluster SSE per iteration, iterations run.
pub type KmeansFit = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>, usize);

/// Lloyd's algorithm with k-means++ seeding. Ties go to the lower label;
/// an emptied cluster keeps its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KmeansFit> {
    if k == 0 {
        return Err(invalid!("k must be at least 1"));
    }
    if k > points.len() {
        return Err(invalid!("k = {k} exceeds the {} points", points.len()));
    }
    if max_iters == 0 {
        return Err(invalid!("max_iters must be at least 1"));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        let mut sse = 0.0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            changed |= *l != j;
            *l = j;
            sse += d;
        }
        history.push(sse);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, p) in labels.iter().zip(points) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok((labels, centroids, history, iterations))
}

/// Clusters the standardised per-pixel features of `f`.
pub fn kmeans_cluster(f: &FeatureMap, k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    let points = standardized_points(f);
    let (labels, centroids, sse_history, iterations) = kmeans(&points, k, seed, max_iters)?;
    Ok(Clustering {
        labels: LabelMap::new(f.height(), f.width(), k, seed, labels)?,
        iterations,
        sse_history,
        centroids,
    })
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

/// Writes an 8-bit indexed PNG whose palette is [`PALETTE`].
pub fn render_label_map(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if lm.k > PALETTE.len() {
        return Err(invalid!(
            "k = {} exceeds the {}-colour palette",
            lm.k,
            PALETTE.len()
        ));
    }
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), lm.width as u32, lm.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.concat());
    let mut writer = enc.write_header().map_err(png_err)?;
    let data: Vec<u8> = lm.labels.iter().map(|&l| l as u8).collect();
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a label map written by [`render_label_map`], returning
/// `(height, width, labels)`.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<usize>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(png_err)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("not an 8-bit indexed image".into()));
    }
    if info.palette.as_deref() != Some(&PALETTE.concat()[..]) {
        return Err(Error::Png("palette differs from the label palette".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let out = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (out.width as usize, out.height as usize);
    let labels = buf[..w * h].iter().map(|&b| b as usize).collect();
    Ok((h, w, labels))
}

/// Assignment of rows to columns maximising the summed `score`
/// (Hungarian algorithm on a square matrix). Returns `col[row]`.
pub fn hungarian_max(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    let big = score.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    // Minimise big − score with 1-based potentials.
    let cost = |i: usize, j: usize| big - score[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Fraction of pixels on which `a` and `b` agree under the best relabeling
/// of `b`'s labels.
pub fn matched_agreement(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.labels.len() != b.labels.len() {
        return Err(shape_err!("label maps differ in size"));
    }
    let k = a.k.max(b.k);
    let mut confusion = vec![vec![0.0; k]; k];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        confusion[x][y] += 1.0;
    }
    let assign = hungarian_max(&confusion);
    let matched: f64 = (0..k).map(|i| confusion[i][assign[i]]).sum();
    Ok(matched / a.labels.len() as f64)
}
