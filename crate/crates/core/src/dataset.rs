//! Paired low-dose / normal-dose slices on disk.
//!
//! A dataset directory holds `NNNN_ldct.slice` and `NNNN_ndct.slice` files;
//! pairs are ordered by their numeric stem.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::imaging::{generate_phantom, load_slice, save_slice, PhantomSpec, Slice};

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub name: String,
    pub noisy: Slice,
    pub clean: Slice,
}

impl SlicePair {
    pub fn new(name: impl Into<String>, noisy: Slice, clean: Slice) -> Result<Self> {
        if noisy.height() != clean.height() || noisy.width() != clean.width() {
            return Err(shape_err!(
                "pair: noisy {}x{} vs clean {}x{}",
                noisy.height(),
                noisy.width(),
                clean.height(),
                clean.width()
            ));
        }
        Ok(SlicePair {
            name: name.into(),
            noisy,
            clean,
        })
    }
}

pub fn noisy_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_ldct.slice"))
}

pub fn clean_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}_ndct.slice"))
}

/// Phantom seeds for a synthetic set, derived from one seed.
pub fn phantom_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// `count` synthetic phantom pairs of `size × size` pixels.
pub fn synthesize(count: usize, size: usize, seed: u64) -> Result<Vec<SlicePair>> {
    phantom_seeds(seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let (clean, noisy) = generate_phantom(&PhantomSpec::random(s, size))?;
            SlicePair::new(format!("{i:04}"), noisy, clean)
        })
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, pairs: &[SlicePair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in pairs {
        save_slice(&p.noisy, noisy_path(dir, &p.name))?;
        save_slice(&p.clean, clean_path(dir, &p.name))?;
    }
    Ok(())
}

/// Loads every pair in `dir`; all slices must share one shape.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SlicePair>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let file = entry.file_name();
        if let Some(stem) = file.to_str().and_then(|f| f.strip_suffix("_ldct.slice")) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(invalid!("no *_ldct.slice files in {}", dir.display()));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let noisy = load_slice(noisy_path(dir, &name))?;
        let clean = load_slice(clean_path(dir, &name))?;
        pairs.push(SlicePair::new(name, noisy, clean)?);
    }
    check_uniform(&pairs)?;
    Ok(pairs)
}

/// Rejects an empty dataset or one with mixed slice shapes.
pub fn check_uniform(pairs: &[SlicePair]) -> Result<(usize, usize)> {
    let first = pairs.first().ok_or_else(|| invalid!("dataset is empty"))?;
    let shape = (first.noisy.height(), first.noisy.width());
    for p in pairs {
        if (p.noisy.height(), p.noisy.width()) != shape
            || (p.clean.height(), p.clean.width()) != shape
        {
            return Err(shape_err!(
                "slice {} is {}x{}, dataset is {}x{}",
                p.name,
                p.noisy.height(),
                p.noisy.width(),
                shape.0,
                shape.1
            ));
        }
    }
    Ok(shape)
}
