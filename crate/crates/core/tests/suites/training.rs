//! Properties of the alternate training loop on a small synthetic set.

use ldct_core::autograd::Graph;
use ldct_core::checkpoint::Checkpoint;
use ldct_core::dataset::synthesize;
use ldct_core::trainer::{train, Batch, Phase, TrainOutputs};
use ldct_core::{MacConfig, SlicePair, Tensor, TrainConfig, TrainState};

pub fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 2,
        pixel_queries: 6,
        patch_queries: 4,
        negatives: 8,
        lr_max: 1e-3,
        lr_min: 1e-5,
        seed: 13,
        esau: ldct_core::EsauConfig {
            base_width: 4,
            heads: 2,
        },
        mac: MacConfig {
            base_width: 4,
            global_channels: 16,
            projector_hidden: 16,
            projection_dim: 8,
            predictor_hidden: 8,
            local_hidden: 8,
            embedding_dim: 8,
        },
        ..TrainConfig::default()
    }
}

pub fn small_dataset() -> Vec<SlicePair> {
    synthesize(6, 32, 77).unwrap()
}

fn batch(state: &TrainState, data: &[SlicePair]) -> Batch {
    let idx = state.batch_indices(state.step, data.len());
    let pairs: Vec<&SlicePair> = idx.iter().map(|&i| &data[i]).collect();
    Batch::from_pairs(&pairs, &state.config).unwrap()
}

fn bits(tensors: &[Tensor]) -> Vec<u64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn mac_bits(s: &TrainState) -> Vec<u64> {
    let mut b = bits(s.mac.online.tensors());
    b.extend(bits(s.mac.target.tensors()));
    b
}

/// Over `steps` consecutive steps the denoiser is untouched by the contrastive
/// phase and the contrastive network is untouched by the denoiser phase, while
/// each phase does move its own network. Returns the summed target-gradient
/// census, which must be zero.
pub fn alternation_isolation(steps: usize) -> usize {
    let data = small_dataset();
    let mut state = TrainState::new(
        TrainConfig {
            max_steps: Some(steps as u64),
            ..small_config()
        },
        data.len(),
    )
    .unwrap();
    let mut census = 0;
    for _ in 0..steps {
        let b = batch(&state, &data);
        let mut esau_start = Vec::new();
        let mut mac_start = Vec::new();
        let mut mac_mid = Vec::new();
        let mut checked = 0;
        let report = state
            .train_step_with(&b, &mut |phase, s| match phase {
                Phase::Start => {
                    esau_start = bits(s.esau.params().tensors());
                    mac_start = mac_bits(s);
                }
                Phase::AfterContrastive => {
                    assert_eq!(
                        bits(s.esau.params().tensors()),
                        esau_start,
                        "denoiser moved in phase 1"
                    );
                    assert_ne!(mac_bits(s), mac_start, "contrastive network did not move");
                    mac_mid = mac_bits(s);
                    checked += 1;
                }
                Phase::AfterDenoiser => {
                    assert_eq!(mac_bits(s), mac_mid, "contrastive network moved in phase 2");
                    assert_ne!(
                        bits(s.esau.params().tensors()),
                        esau_start,
                        "denoiser did not move"
                    );
                    checked += 1;
                }
            })
            .unwrap();
        assert_eq!(checked, 2);
        census += report.target_grad_nonzero;
    }
    assert_eq!(census, 0, "target parameters received gradient");
    census
}

/// Perturbs the weights used only by the global branch and checks that the
/// local features do not move by a single bit while the global ones do.
pub fn disentanglement() {
    let config = small_config();
    let state = TrainState::new(config.clone(), 4).unwrap();
    let data = small_dataset();
    let b = batch(&state, &data);
    let net = &state.mac.net;
    let (fg0, fl0) = net.encode(&state.mac.online, &b.clean).unwrap();
    let mut perturbed = state.mac.online.clone();
    let exclusive = net.global_exclusive();
    assert!(!exclusive.is_empty());
    for (k, id) in exclusive.into_iter().enumerate() {
        for (i, v) in perturbed.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * (((i + k) % 7) as f64 - 3.0);
        }
    }
    let (fg1, fl1) = net.encode(&perturbed, &b.clean).unwrap();
    assert_ne!(
        bits(&[fg0]),
        bits(&[fg1]),
        "global features ignored the perturbation"
    );
    assert_eq!(
        bits(&[fl0]),
        bits(&[fl1]),
        "local features depend on the global branch"
    );
}

/// With the pixel term switched off, the phase-2 loss still produces nonzero
/// gradient on the denoiser. Returns how many denoiser tensors received it.
pub fn contrastive_signal_reaches_denoiser() -> usize {
    let data = small_dataset();
    let state = TrainState::new(small_config(), data.len()).unwrap();
    let b = batch(&state, &data);
    let (tg, tl) = state.mac.net.encode(&state.mac.target, &b.clean).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let samples = state.draw_samples(&b, &tg, &tl, &mut rng).unwrap();
    let mut g = Graph::new();
    let esau_vars = state.esau.params().bind(&mut g, true);
    let x = g.constant(b.noisy.clone());
    let out = state.esau.forward(&mut g, &esau_vars, x).unwrap();
    let online = state.mac.online.bind(&mut g, false);
    let target = state.mac.target.bind(&mut g, false);
    let (gl, ll) = state
        .mac
        .net
        .contrastive_terms(
            &mut g,
            &online,
            &target,
            out.output,
            &tg,
            &tl,
            &samples,
            state.config.tau,
        )
        .unwrap();
    let loss = g.weighted_sum(vec![(gl, 1.0), (ll, 1.0)]).unwrap();
    let grads = g.backward(loss).unwrap();
    let reached = esau_vars
        .iter()
        .filter(|&&v| grads.get(v).is_some_and(|t| t.max_abs() > 0.0))
        .count();
    assert!(reached > 0, "no contrastive gradient on the denoiser");
    for v in online.iter().chain(&target) {
        assert!(grads.get(*v).is_none());
    }
    reached
}

fn run_to_end(state: &mut TrainState, data: &[SlicePair]) -> Vec<u8> {
    let mut log = Vec::new();
    train(
        state,
        data,
        TrainOutputs {
            dir: None,
            log: &mut log,
        },
    )
    .unwrap();
    let mut bytes = state.to_checkpoint().to_bytes().unwrap();
    bytes.extend(log);
    bytes
}

/// Stopping after `split` steps, serialising, reloading and finishing gives
/// the same bytes as an uninterrupted run.
pub fn resume_is_bit_identical(split: u64, total: u64) {
    let data = small_dataset();
    let config = TrainConfig {
        max_steps: Some(total),
        ..small_config()
    };
    let mut straight = TrainState::new(config.clone(), data.len()).unwrap();
    let mut log_straight = Vec::new();
    train(
        &mut straight,
        &data,
        TrainOutputs {
            dir: None,
            log: &mut log_straight,
        },
    )
    .unwrap();

    let mut first = TrainState::new(config, data.len()).unwrap();
    for _ in 0..split {
        let b = batch(&first, &data);
        first.train_step(&b).unwrap();
    }
    let bytes = first.to_checkpoint().to_bytes().unwrap();
    let mut resumed =
        TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, split);
    let mut log_rest = Vec::new();
    train(
        &mut resumed,
        &data,
        TrainOutputs {
            dir: None,
            log: &mut log_rest,
        },
    )
    .unwrap();
    assert_eq!(
        resumed.to_checkpoint().to_bytes().unwrap(),
        straight.to_checkpoint().to_bytes().unwrap()
    );
    // The resumed log is the tail of the uninterrupted one.
    let straight_text = String::from_utf8(log_straight).unwrap();
    let rest_text = String::from_utf8(log_rest).unwrap();
    assert!(straight_text.ends_with(&rest_text));
    assert_eq!(rest_text.lines().count() as u64, total - split);
}

/// Two runs from one seed produce identical checkpoint and log bytes.
pub fn training_is_deterministic(steps: u64) {
    let data = small_dataset();
    let config = TrainConfig {
        max_steps: Some(steps),
        ..small_config()
    };
    let a = run_to_end(
        &mut TrainState::new(config.clone(), data.len()).unwrap(),
        &data,
    );
    let b = run_to_end(
        &mut TrainState::new(config.clone(), data.len()).unwrap(),
        &data,
    );
    assert_eq!(a, b);
    let other = TrainConfig {
        seed: config.seed + 1,
        ..config
    };
    let c = run_to_end(&mut TrainState::new(other, data.len()).unwrap(), &data);
    assert_ne!(a, c);
}
