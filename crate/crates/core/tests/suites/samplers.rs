//! Positive matching and hard-negative sampling against exhaustive ranking.

use ldct_core::losses::{hard_negative_sample, neighbor_positive_match, FeatureMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{cosine, rng};

pub const GRIDS: u64 = 1000;
const SIDE: usize = 8;
const CHANNELS: usize = 4;

/// Every other grid draws from a tiny integer alphabet so that equal
/// similarities show up often.
fn random_grid(r: &mut ChaCha8Rng, quantized: bool) -> (FeatureMap, Vec<Vec<f64>>) {
    let vectors: Vec<Vec<f64>> = (0..SIDE * SIDE)
        .map(|_| loop {
            let v: Vec<f64> = (0..CHANNELS)
                .map(|_| {
                    if quantized {
                        r.random_range(-1i32..=1) as f64
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
                .collect();
            if v.iter().any(|&x| x != 0.0) {
                break v;
            }
        })
        .collect();
    let mut data = vec![0.0; CHANNELS * SIDE * SIDE];
    for (p, v) in vectors.iter().enumerate() {
        for (c, &x) in v.iter().enumerate() {
            data[c * SIDE * SIDE + p] = x;
        }
    }
    (
        FeatureMap::new(CHANNELS, SIDE, SIDE, data).unwrap(),
        vectors,
    )
}

fn chebyshev(a: usize, b: usize) -> usize {
    let (ar, ac) = (a / SIDE, a % SIDE);
    let (br, bc) = (b / SIDE, b % SIDE);
    ar.abs_diff(br).max(ac.abs_diff(bc))
}

/// All candidates satisfying `keep`, ranked by similarity to `anchor` with
/// row-major index as the tie-break.
fn brute_rank(vectors: &[Vec<f64>], anchor: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..vectors.len())
        .filter(|&j| keep(j))
        .map(|j| (cosine(&vectors[anchor], &vectors[j]), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Returns the number of queries checked.
pub fn positive_matching_oracle() -> usize {
    let mut checked = 0;
    for seed in 0..GRIDS {
        let mut r = rng(seed);
        let (map, vectors) = random_grid(&mut r, seed % 2 == 0);
        for q in 0..SIDE * SIDE {
            let got = neighbor_positive_match(&map, q).unwrap();
            let mut want = brute_rank(&vectors, q, |j| chebyshev(q, j) == 1);
            let in_bounds = want.len();
            want.truncate(4);
            assert_eq!(got.query, q);
            assert_eq!(got.positives, want, "grid {seed}, query {q}");
            assert_eq!(got.positives.len(), in_bounds.min(4));
            assert!(!got.positives.contains(&q));
            checked += 1;
        }
    }
    checked
}

/// Returns the number of queries checked.
pub fn hard_negative_oracle() -> usize {
    let mut checked = 0;
    let corners = [0, SIDE - 1, SIDE * (SIDE - 1), SIDE * SIDE - 1];
    for seed in 0..GRIDS {
        let mut r = rng(10_000 + seed);
        let (map, vectors) = random_grid(&mut r, seed % 2 == 0);
        let mut queries = corners.to_vec();
        queries.extend((0..4).map(|_| r.random_range(0..SIDE * SIDE)));
        for q in queries {
            let radius = r.random_range(1..=7);
            let count = r.random_range(1..=30);
            let window = brute_rank(&vectors, q, |j| {
                let d = chebyshev(q, j);
                (1..=radius).contains(&d)
            });

            // Pool covering the whole window: exact ranking.
            let mut sampler = rng(seed);
            let got =
                hard_negative_sample(&map, q, radius, count, usize::MAX, &mut sampler).unwrap();
            let mut want = window.clone();
            want.truncate(count);
            assert_eq!(got.negatives, want, "grid {seed}, query {q}, m {radius}");

            // Smaller random pool: a ranked subset of the window.
            let pool = r.random_range(1..=window.len());
            let got = hard_negative_sample(&map, q, radius, count, pool, &mut sampler).unwrap();
            assert_eq!(got.negatives.len(), count.min(pool));
            for w in got.negatives.windows(2) {
                let pos = |j| window.iter().position(|&x| x == j).unwrap();
                assert!(
                    pos(w[0]) < pos(w[1]),
                    "grid {seed}: pooled result out of rank order"
                );
            }
            for &j in &got.negatives {
                assert!((1..=radius).contains(&chebyshev(q, j)));
            }
            checked += 1;
        }
    }
    checked
}

/// Hand-built boundary and tie cases.
pub fn sampler_edge_cases() {
    // Identical neighbours: the first four in scan order.
    let map = FeatureMap::new(2, 3, 3, vec![1.0; 18]).unwrap();
    assert_eq!(
        neighbor_positive_match(&map, 4).unwrap().positives,
        vec![0, 1, 2, 3]
    );
    // Corner of a 3×3 grid has three neighbours.
    assert_eq!(neighbor_positive_match(&map, 0).unwrap().positives.len(), 3);
    assert!(neighbor_positive_match(&map, 9).is_err());

    // 3×3 grid, m = 7, 24 requested: all eight others.
    let mut r = rng(0);
    let got = hard_negative_sample(&map, 4, 7, 24, 64, &mut r).unwrap();
    let mut all = got.negatives.clone();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3, 5, 6, 7, 8]);
    assert!(hard_negative_sample(&map, 4, 0, 24, 64, &mut r).is_err());

    // A 1×1 map has nothing eligible.
    let single = FeatureMap::new(1, 1, 1, vec![1.0]).unwrap();
    assert!(hard_negative_sample(&single, 0, 7, 24, 64, &mut r).is_err());
}
