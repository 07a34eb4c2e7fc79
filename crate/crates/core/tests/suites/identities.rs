//! Closed-form values of the losses, the metrics, the EMA rule and the
//! attention-map footprint.

use ldct_core::imaging::NormalizedImage;
use ldct_core::losses::{
    cosine_similarity, global_loss, global_term_grad, local_infonce, total_loss, LossComponents,
};
use ldct_core::mac::ema_update;
use ldct_core::metrics::{cnr, cnr_values, psnr, psnr_from_mse, rmse, ssim, Roi, SSIM_C1};
use ldct_core::params::ParamSet;
use ldct_core::{EsauConfig, EsauNet, Tensor};
use rand::Rng;

use super::oracle::{rng, uniform, vector};

const EXACT: f64 = 1e-9;

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= EXACT, "{what}: {a} vs {b}");
}

pub fn global_loss_identities() {
    close(
        global_loss(&[vec![1.0, 2.0]], &[vec![2.0, 4.0]]).unwrap(),
        0.0,
        "parallel",
    );
    close(
        global_loss(&[vec![1.0, 0.0]], &[vec![0.0, 3.0]]).unwrap(),
        2.0,
        "orthogonal",
    );
    close(
        global_loss(&[vec![1.0, -1.0]], &[vec![-2.0, 2.0]]).unwrap(),
        4.0,
        "anti-parallel",
    );
    close(
        global_loss(
            &[vec![1.0, 0.0], vec![1.0, 0.0]],
            &[vec![1.0, 0.0], vec![-1.0, 0.0]],
        )
        .unwrap(),
        4.0,
        "sum over queries",
    );
    assert!(global_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]]).is_err());
    let mut r = rng(3);
    for _ in 0..1000 {
        let dim = r.random_range(1..16);
        let (l, _, _) = global_term_grad(&vector(&mut r, dim), &vector(&mut r, dim)).unwrap();
        assert!((0.0..=4.0).contains(&l), "per-query value {l}");
    }
    close(
        cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(),
        0.8,
        "cosine",
    );
}

pub fn infonce_identities() {
    let v = [0.6, 0.8];
    let negs: Vec<&[f64]> = vec![&v; 24];
    close(
        local_infonce(&v, &v, &negs, 0.07).unwrap(),
        25f64.ln(),
        "all-equal logits",
    );
    close(
        local_infonce(&v, &v, &[], 0.07).unwrap(),
        0.0,
        "no negatives",
    );
    // q·p/τ = 2 and q·n/τ = 0 for both negatives.
    let q = [1.0, 0.0];
    let p = [1.0, 0.0];
    let n = [0.0, 1.0];
    let want = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    close(
        local_infonce(&q, &p, &[&n, &n], 0.5).unwrap(),
        want,
        "scalar evaluation",
    );
    assert!(local_infonce(&q, &p, &[], 0.0).is_err());
}

pub fn total_loss_identities() {
    let unit = LossComponents {
        global: 1.0,
        local: 1.0,
        pixel: 1.0,
    };
    close(total_loss(&unit, 10.0), 12.0, "(1,1,1), λ = 10");
    close(
        total_loss(
            &LossComponents {
                global: 0.0,
                local: 0.0,
                pixel: 0.0,
            },
            10.0,
        ),
        0.0,
        "zero",
    );
    let c = LossComponents {
        global: 0.3,
        local: 2.5,
        pixel: 0.125,
    };
    close(
        total_loss(&c, 20.0) - total_loss(&c, 10.0),
        10.0 * c.pixel,
        "linearity in λ",
    );
}

fn image(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> NormalizedImage {
    NormalizedImage::new(h, w, (0..h * w).map(f).collect()).unwrap()
}

/// Returns the number of random pairs checked for PSNR/RMSE consistency.
pub fn metric_identities() -> usize {
    let a = image(64, 64, |_| 0.5);
    close(psnr(&a, &a).unwrap(), 100.0, "psnr cap");
    close(rmse(&a, &a).unwrap(), 0.0, "rmse identical");
    close(ssim(&a, &a).unwrap(), 1.0, "ssim identical");
    close(psnr_from_mse(0.01), 20.0, "psnr mse 0.01");
    close(psnr_from_mse(1e-4), 40.0, "psnr mse 1e-4");
    let shifted = image(64, 64, |_| 0.55);
    close(rmse(&a, &shifted).unwrap(), 0.05, "constant difference");
    let b = image(64, 64, |_| 0.7);
    let want = (2.0 * 0.5 * 0.7 + SSIM_C1) / (0.25 + 0.49 + SSIM_C1);
    close(ssim(&a, &b).unwrap(), want, "constant-image ssim");

    // Lesion of ones over a background alternating ±0.5 (mean 0, std 0.5).
    let lesion = Roi {
        y0: 0,
        x0: 0,
        h: 2,
        w: 8,
    };
    let background = Roi {
        y0: 2,
        x0: 0,
        h: 6,
        w: 8,
    };
    let raw: Vec<f64> = (0..64)
        .map(|i| {
            if i < 16 {
                1.0
            } else if i % 2 == 0 {
                0.5
            } else {
                -0.5
            }
        })
        .collect();
    close(
        cnr_values(&raw, 8, 8, lesion, background).unwrap(),
        2.0,
        "cnr",
    );
    let scaled: Vec<f64> = raw.iter().map(|v| 3.0 * v).collect();
    close(
        cnr_values(&scaled, 8, 8, lesion, background).unwrap(),
        2.0,
        "cnr scale invariance",
    );
    let same: Vec<f64> = (0..64)
        .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 })
        .collect();
    close(
        cnr_values(&same, 8, 8, lesion, background).unwrap(),
        0.0,
        "cnr equal statistics",
    );
    let flat = image(8, 8, |_| 0.5);
    assert!(cnr(&flat, lesion, background).is_err());

    let mut r = rng(11);
    let pairs = 100;
    for _ in 0..pairs {
        let x = image(16, 16, |_| r.random_range(0.0..1.0));
        let y = image(16, 16, |_| r.random_range(0.0..1.0));
        let e = rmse(&x, &y).unwrap();
        let brute = (x
            .values()
            .iter()
            .zip(y.values())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / 256.0)
            .sqrt();
        assert!((e - brute).abs() <= 1e-10);
        close(
            psnr(&x, &y).unwrap(),
            -20.0 * e.log10(),
            "psnr = -20 log10 rmse",
        );
        close(
            psnr(&x, &y).unwrap(),
            psnr(&y, &x).unwrap(),
            "psnr symmetry",
        );
        close(
            ssim(&x, &y).unwrap(),
            ssim(&y, &x).unwrap(),
            "ssim symmetry",
        );
        assert!(ssim(&x, &y).unwrap() <= 1.0);
    }
    pairs
}

/// `t ← m·t + (1 − m)·o` element by element for m in {0, 0.9, 1}.
pub fn ema_hand_arithmetic() {
    for m in [0.0, 0.9, 1.0] {
        let mut target = ParamSet::new();
        target.push("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut online = ParamSet::new();
        online.push("w", Tensor::from_vec(&[3], vec![3.0, 2.0, -0.5]).unwrap());
        online.push("head", Tensor::from_vec(&[1], vec![9.0]).unwrap());
        ema_update(&mut target, &online, m).unwrap();
        let want: Vec<f64> = match m {
            0.0 => vec![3.0, 2.0, -0.5],
            1.0 => vec![1.0, -2.0, 0.5],
            _ => vec![0.9 + 0.3, -1.8 + 0.2, 0.45 - 0.05],
        };
        for (got, want) in target.tensors()[0].data().iter().zip(&want) {
            close(*got, *want, &format!("ema m = {m}"));
        }
    }
    let mut target = ParamSet::new();
    target.push("w", Tensor::zeros(&[2]));
    let online = target.clone();
    assert!(ema_update(&mut target, &online, 1.5).is_err());
}

/// Attention maps hold `heads · (C/heads)²` values per image at every level,
/// whatever the resolution. Returns `(side, map elements, spatial equivalent)`
/// for the finest level at each resolution.
pub fn attention_footprint() -> Vec<(usize, usize, u128)> {
    let config = EsauConfig {
        base_width: 8,
        heads: 4,
    };
    let net = EsauNet::new(config, 0).unwrap();
    let levels: Vec<_> = net
        .encoder_levels()
        .iter()
        .chain(std::iter::once(net.bottleneck_level()))
        .chain(net.decoder_levels().iter())
        .collect();
    let expected: Vec<usize> = levels
        .iter()
        .map(|l| {
            let d = l.in_channels / config.heads;
            config.heads * d * d
        })
        .collect();
    let mut rows = Vec::new();
    let mut r = rng(5);
    for side in [64, 128, 256] {
        let x = uniform(&mut r, &[1, 1, side, side], 0.0, 1.0);
        let caches = net.attention_caches(&x).unwrap();
        assert_eq!(caches.len(), expected.len());
        for (cache, &want) in caches.iter().zip(&expected) {
            assert_eq!(cache.heads, config.heads);
            assert_eq!(cache.maps.len(), want, "side {side}");
            assert_eq!(
                cache.maps.len(),
                cache.heads * cache.head_dim * cache.head_dim
            );
        }
        let hw = (side * side) as u128;
        rows.push((side, caches[0].maps.len(), hw * hw));
        assert!((caches[0].maps.len() as u128) < hw * hw);
    }
    assert!(rows.windows(2).all(|w| w[0].1 == w[1].1));
    rows
}
