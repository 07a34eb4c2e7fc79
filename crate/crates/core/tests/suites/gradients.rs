//! Finite-difference checks of every differentiable component. Each check
//! panics on the first instance over tolerance and otherwise returns the worst
//! relative error it saw.

use ldct_core::autograd::Graph;
use ldct_core::esau::{channel_attention, esau_level, EsauLevel, Resample};
use ldct_core::losses::{global_term_grad, local_infonce, local_infonce_grad};
use ldct_core::params::ParamSet;
use ldct_core::{EsauConfig, EsauNet, Tensor};
use rand_chacha::ChaCha8Rng;

use super::oracle::*;

pub const INSTANCES: u64 = 20;

fn randomize_alpha(level: &mut EsauLevel, r: &mut ChaCha8Rng) {
    let id = level.ids.attention.alpha;
    let heads = level.params.get(id).len();
    *level.params.get_mut(id) = uniform(r, &[heads], 0.5, 1.5);
}

fn record(worst: &mut f64, err: f64, what: &str) {
    assert!(err <= FD_TOL, "{what}: relative error {err:e}");
    *worst = worst.max(err);
}

pub fn channel_attention_fd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let mut level = EsauLevel::new(4, 4, 2, Resample::None, seed).unwrap();
        randomize_alpha(&mut level, &mut r);
        let mut params = level.params.clone();
        let input = params.push("input", uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0));
        let probe = uniform(&mut r, &[1, 4, 4, 4], -1.0, 1.0);
        let ids = &level.ids.attention;
        let entries: Vec<_> = [
            ids.qkv.0,
            ids.qkv.1,
            ids.depthwise.0,
            ids.depthwise.1,
            ids.alpha,
            ids.proj.0,
            ids.proj.1,
            input,
        ]
        .into_iter()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
        .collect();
        let err = graph_fd_error(&params, &entries, |g, vars| {
            let y = channel_attention(g, vars, ids, vars[input.0]).unwrap();
            g.dot(y, probe.clone()).unwrap()
        });
        record(&mut worst, err, &format!("attention instance {seed}"));
    }
    worst
}

pub fn esau_level_fd() -> f64 {
    let kinds = [Resample::Down, Resample::Up, Resample::None];
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let kind = kinds[seed as usize % 3];
        let mut level = EsauLevel::new(2, 2, 1, kind, seed).unwrap();
        randomize_alpha(&mut level, &mut r);
        let mut params = level.params.clone();
        let input = params.push("input", uniform(&mut r, &[1, 2, 8, 8], -1.0, 1.0));
        let ids = &level.ids;
        let out_shape = level.forward(params.get(input)).unwrap().shape().to_vec();
        let probe = uniform(&mut r, &out_shape, -1.0, 1.0);
        let err = graph_fd_error(&params, &all_entries(&params), |g, vars| {
            let y = esau_level(g, vars, ids, vars[input.0]).unwrap();
            g.dot(y.resampled, probe.clone()).unwrap()
        });
        record(
            &mut worst,
            err,
            &format!("level instance {seed} ({kind:?})"),
        );
    }
    worst
}

pub fn esau_forward_fd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let net = EsauNet::new(
            EsauConfig {
                base_width: 8,
                heads: 4,
            },
            seed,
        )
        .unwrap();
        let x = uniform(&mut r, &[1, 1, 32, 32], 0.0, 1.0);
        let y = uniform(&mut r, &[1, 1, 32, 32], 0.0, 1.0);
        let entries = random_entries(net.params(), 16, &mut r);
        let err = graph_fd_error(net.params(), &entries, |g, vars| {
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let out = net.forward(g, vars, xv).unwrap();
            g.mse(out.output, yv).unwrap()
        });
        record(&mut worst, err, &format!("forward instance {seed}"));
    }
    worst
}

pub fn global_loss_fd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let p = vector(&mut r, 8);
        let t = vector(&mut r, 8);
        let (_, gp, gt) = global_term_grad(&p, &t).unwrap();
        let fp = numeric_grad(&p, |v| global_term_grad(v, &t).unwrap().0);
        let ft = numeric_grad(&t, |v| global_term_grad(&p, v).unwrap().0);
        record(
            &mut worst,
            relative_error(&gp, &fp),
            &format!("global instance {seed}"),
        );
        record(
            &mut worst,
            relative_error(&gt, &ft),
            &format!("global instance {seed}"),
        );
    }
    // The same term through the tape, where the target side is a constant.
    for seed in 0..INSTANCES {
        let mut r = rng(350 + seed);
        let mut params = ParamSet::new();
        let p = params.push("pred", uniform(&mut r, &[3, 8], -1.0, 1.0));
        let t = uniform(&mut r, &[3, 8], -1.0, 1.0);
        let err = graph_fd_error(&params, &all_entries(&params), |g, vars| {
            let tv = g.constant(t.clone());
            g.global_loss(vars[p.0], tv).unwrap()
        });
        record(&mut worst, err, &format!("tape global instance {seed}"));
    }
    worst
}

pub fn local_infonce_fd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let q = vector(&mut r, 8);
        let p = vector(&mut r, 8);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| vector(&mut r, 8)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        let tau = 0.5;
        let grad = local_infonce_grad(&q, &p, &refs, tau).unwrap();
        let fq = numeric_grad(&q, |v| local_infonce(v, &p, &refs, tau).unwrap());
        let fp = numeric_grad(&p, |v| local_infonce(&q, v, &refs, tau).unwrap());
        let what = format!("infonce instance {seed}");
        record(&mut worst, relative_error(&grad.query, &fq), &what);
        record(&mut worst, relative_error(&grad.positive, &fp), &what);
        for (j, gn) in grad.negatives.iter().enumerate() {
            let fnj = numeric_grad(&negs[j], |v| {
                let mut all = refs.clone();
                all[j] = v;
                local_infonce(&q, &p, &all, tau).unwrap()
            });
            record(&mut worst, relative_error(gn, &fnj), &what);
        }
    }
    // Tape version: queries and keys trainable, keys shared between rows, the
    // normalisation layer in front as in the network.
    for seed in 0..INSTANCES {
        let mut r = rng(450 + seed);
        let mut params = ParamSet::new();
        let q = params.push("query", uniform(&mut r, &[3, 6], -1.0, 1.0));
        let k = params.push("keys", uniform(&mut r, &[7, 6], -1.0, 1.0));
        let positives = vec![0, 3, 6];
        let negatives = vec![vec![1, 2, 5], vec![0, 4], vec![]];
        let err = graph_fd_error(&params, &all_entries(&params), |g, vars| {
            let qn = g.l2_normalize_rows(vars[q.0]).unwrap();
            let kn = g.l2_normalize_rows(vars[k.0]).unwrap();
            g.infonce(qn, kn, positives.clone(), negatives.clone(), 0.5)
                .unwrap()
        });
        record(&mut worst, err, &format!("tape infonce instance {seed}"));
    }
    worst
}

pub fn pixel_loss_fd() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(500 + seed);
        let mut params = ParamSet::new();
        let p = params.push("pred", uniform(&mut r, &[2, 1, 16, 16], 0.0, 1.0));
        let target = uniform(&mut r, &[2, 1, 16, 16], 0.0, 1.0);
        let err = graph_fd_error(&params, &all_entries(&params), |g, vars| {
            let t = g.constant(target.clone());
            g.pixel_loss(vars[p.0], t).unwrap()
        });
        record(&mut worst, err, &format!("pixel instance {seed}"));
    }
    worst
}

pub fn constant_input_has_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 1, 16, 16], 0.5));
    let net = EsauNet::new(
        EsauConfig {
            base_width: 4,
            heads: 2,
        },
        0,
    )
    .unwrap();
    let vars = net.params().bind(&mut g, true);
    let out = net.forward(&mut g, &vars, c).unwrap();
    let loss = g.mse(out.output, c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
}
