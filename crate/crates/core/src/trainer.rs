//! Alternate optimisation of the denoiser and the contrastive network.
//!
//! Each step first updates the contrastive network on the detached denoiser
//! output, then updates the denoiser with the contrastive network frozen.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{check_uniform, SlicePair};
use crate::error::{invalid, Error, Result};
use crate::esau::{EsauConfig, EsauNet};
use crate::imaging::{
    foreground_mask, hu_window_normalize, Mask, DEFAULT_FOREGROUND_HU, DEFAULT_WINDOW,
    SPATIAL_MULTIPLE,
};
use crate::losses::{
    hard_negative_sample, neighbor_positive_match, sample_foreground, FeatureMap, LossWeights,
    SampleSets, DEFAULT_LAMBDA, DEFAULT_NEGATIVE_POOL, DEFAULT_NEGATIVE_RADIUS, DEFAULT_TAU,
};
use crate::mac::{MacConfig, MacNetState, DEFAULT_EMA_MOMENTUM};
use crate::optim::{lr_schedule, AdamHyper, AdamW};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Every training hyperparameter. Serialised as JSON with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Caps the total step count when set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub tau: f64,
    pub global_weight: f64,
    pub local_weight: f64,
    pub ema_momentum: f64,
    pub pixel_queries: usize,
    pub patch_queries: usize,
    pub negatives: usize,
    pub negative_radius: usize,
    pub negative_pool: usize,
    pub window_lo: f64,
    pub window_hi: f64,
    pub foreground_hu: f64,
    /// Max global gradient norm per optimiser; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub esau: EsauConfig,
    pub mac: MacConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hyper = AdamHyper::default();
        TrainConfig {
            epochs: 10,
            max_steps: None,
            batch_size: 4,
            lr_max: 1e-4,
            lr_min: 1e-6,
            weight_decay: hyper.weight_decay,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            global_weight: 1.0,
            local_weight: 1.0,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            pixel_queries: 16,
            patch_queries: 64,
            negatives: 24,
            negative_radius: DEFAULT_NEGATIVE_RADIUS,
            negative_pool: DEFAULT_NEGATIVE_POOL,
            window_lo: DEFAULT_WINDOW.0,
            window_hi: DEFAULT_WINDOW.1,
            foreground_hu: DEFAULT_FOREGROUND_HU,
            grad_clip: None,
            checkpoint_every: 0,
            seed: 0,
            esau: EsauConfig {
                base_width: 8,
                heads: 4,
            },
            mac: MacConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return bad("epochs, batch_size and max_steps must be at least 1");
        }
        if self.pixel_queries == 0
            || self.patch_queries == 0
            || self.negatives == 0
            || self.negative_pool == 0
        {
            return bad("sampling counts must be at least 1");
        }
        if self.negative_radius == 0 {
            return bad("negative_radius must be at least 1");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_min <= lr_max");
        }
        if !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("weight_decay must be >= 0 and betas in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must lie in [0, 1]");
        }
        if !(self.window_lo < self.window_hi) {
            return bad("window_lo must be below window_hi");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.weights()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.global_weight >= 0.0 && self.local_weight >= 0.0) {
            return bad("contrastive weights must be non-negative");
        }
        self.esau
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.mac
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            tau: self.tau,
            global: self.global_weight,
            local: self.local_weight,
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
        }
    }

    pub fn window(&self) -> (f64, f64) {
        (self.window_lo, self.window_hi)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn batches_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        let full = (self.epochs * self.batches_per_epoch(dataset_len)) as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Windowed tensors and foreground masks for one batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    pub masks: Vec<Mask>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SlicePair], config: &TrainConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let (lo, hi) = config.window();
        let mut noisy = Vec::new();
        let mut clean = Vec::new();
        let mut masks = Vec::new();
        for p in pairs {
            noisy.push(hu_window_normalize(&p.noisy, lo, hi)?.to_tensor());
            clean.push(hu_window_normalize(&p.clean, lo, hi)?.to_tensor());
            masks.push(foreground_mask(&p.clean, config.foreground_hu));
        }
        Ok(Batch {
            noisy: Tensor::stack(&noisy)?,
            clean: Tensor::stack(&clean)?,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Points in a step at which an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Before anything is updated.
    Start,
    /// After the contrastive network update and EMA.
    AfterContrastive,
    /// After the denoiser update.
    AfterDenoiser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub l_pixel: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub l_pixel: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_total: f64,
    /// Weighted contrastive loss the contrastive network was updated on.
    pub contrastive_update_loss: f64,
    /// Target-network parameters that received any nonzero gradient.
    pub target_grad_nonzero: usize,
    pub samples: SampleSets,
}

impl StepReport {
    pub fn record(&self) -> LogRecord {
        LogRecord {
            step: self.step,
            lr: self.lr,
            l_pixel: self.l_pixel,
            l_global: self.l_global,
            l_local: self.l_local,
            l_total: self.l_total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub esau: EsauNet,
    pub mac: MacNetState,
    pub opt_esau: AdamW,
    pub opt_mac: AdamW,
    /// Steps completed.
    pub step: u64,
    pub total_steps: u64,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn count_nonzero(grads: &Grads, vars: &[Var]) -> usize {
    vars.iter()
        .filter(|&&v| grads.get(v).is_some_and(|g| g.max_abs() > 0.0))
        .count()
}

fn clip(grads: &mut [Option<Tensor>], max_norm: Option<f64>) {
    let Some(max_norm) = max_norm else { return };
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

fn first_nonfinite_image(t: &Tensor) -> Option<usize> {
    let per = t.len() / t.shape()[0].max(1);
    t.data()
        .chunks(per.max(1))
        .position(|c| c.iter().any(|v| !v.is_finite()))
}

impl TrainState {
    pub fn new(config: TrainConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(invalid!("dataset is empty"));
        }
        let esau = EsauNet::new(config.esau, config.seed)?;
        let mac = MacNetState::new(config.mac, config.ema_momentum, config.seed.wrapping_add(1))?;
        let opt_esau = AdamW::new(esau.params());
        let opt_mac = AdamW::new(&mac.online);
        let total_steps = config.total_steps(dataset_len);
        Ok(TrainState {
            config,
            esau,
            mac,
            opt_esau,
            opt_mac,
            step: 0,
            total_steps,
        })
    }

    /// Draws the query, positive and negative index sets for one step from
    /// the target features of the clean batch.
    pub fn draw_samples(
        &self,
        batch: &Batch,
        target_global: &Tensor,
        target_local: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampleSets> {
        let c = &self.config;
        let (_, _, gh, gw) = target_global.dims4()?;
        let (_, _, _, lw) = target_local.dims4()?;
        let patch_masks = batch
            .masks
            .iter()
            .map(|m| m.pool(SPATIAL_MULTIPLE))
            .collect::<Result<Vec<_>>>()?;
        let patch_q = sample_foreground(&patch_masks, c.patch_queries, rng)?;
        let globals = (0..batch.len())
            .map(|n| FeatureMap::from_tensor(target_global, n))
            .collect::<Result<Vec<_>>>()?;
        let mut patches = Vec::with_capacity(patch_q.len());
        for (n, idx) in patch_q {
            debug_assert!(idx < gh * gw);
            patches.push((n, neighbor_positive_match(&globals[n], idx)?));
        }
        let pixel_q = sample_foreground(&batch.masks, c.pixel_queries, rng)?;
        let locals = (0..batch.len())
            .map(|n| FeatureMap::from_tensor(target_local, n))
            .collect::<Result<Vec<_>>>()?;
        let mut pixels = Vec::with_capacity(pixel_q.len());
        for (n, idx) in pixel_q {
            let set = hard_negative_sample(
                &locals[n],
                idx,
                c.negative_radius,
                c.negatives,
                c.negative_pool,
                rng,
            )?;
            pixels.push((n, set));
        }
        Ok(SampleSets {
            patches,
            pixels,
            patch_width: gw,
            pixel_width: lw,
        })
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        self.train_step_with(batch, &mut |_, _| {})
    }

    /// One alternate step; `observer` sees the state at each [`Phase`].
    pub fn train_step_with(
        &mut self,
        batch: &Batch,
        observer: &mut dyn FnMut(Phase, &TrainState),
    ) -> Result<StepReport> {
        if self.step >= self.total_steps {
            return Err(invalid!(
                "training already finished ({} steps)",
                self.total_steps
            ));
        }
        observer(Phase::Start, self);
        let c = self.config.clone();
        let weights = c.weights();
        let step = self.step;
        let lr = lr_schedule(step, self.total_steps, c.lr_max, c.lr_min)?;
        let mut rng = step_rng(c.seed, step);
        let nonfinite = |component: &'static str, t: Option<&Tensor>| Error::NonFiniteLoss {
            component,
            step,
            batch_index: t.and_then(first_nonfinite_image),
        };

        let (denoised, _) = self.esau.run(&batch.noisy)?;
        let contrastive = weights.contrastive();
        let mut target_grad_nonzero = 0;
        let mut contrastive_update_loss = 0.0;
        let mut samples = SampleSets::default();

        if contrastive {
            let (tg, tl) = self.mac.net.encode(&self.mac.target, &batch.clean)?;
            samples = self.draw_samples(batch, &tg, &tl, &mut rng)?;
            let mut g = Graph::new();
            let online = self.mac.online.bind(&mut g, true);
            let target = self.mac.target.bind(&mut g, false);
            let y_prime = g.constant(denoised.clone());
            let (gl, ll) = self
                .mac
                .net
                .contrastive_terms(&mut g, &online, &target, y_prime, &tg, &tl, &samples, c.tau)?;
            let loss = g.weighted_sum(vec![(gl, weights.global), (ll, weights.local)])?;
            contrastive_update_loss = g.value(loss).data()[0];
            if !contrastive_update_loss.is_finite() {
                return Err(nonfinite("contrastive", Some(&denoised)));
            }
            let grads = g.backward(loss)?;
            target_grad_nonzero += count_nonzero(&grads, &target);
            let mut gs: Vec<Option<Tensor>> =
                online.iter().map(|&v| grads.get(v).cloned()).collect();
            clip(&mut gs, c.grad_clip);
            let refs: Vec<Option<&Tensor>> = gs.iter().map(Option::as_ref).collect();
            self.opt_mac
                .step(&mut self.mac.online, &refs, lr, c.hyper(), true)?;
            self.mac.ema_update()?;
            self.mac.target.round_to_f32();
        }
        observer(Phase::AfterContrastive, self);

        let mut g = Graph::new();
        let esau_vars = self.esau.params().bind(&mut g, true);
        let x = g.constant(batch.noisy.clone());
        let y = g.constant(batch.clean.clone());
        let out = self.esau.forward(&mut g, &esau_vars, x)?;
        let pixel = g.pixel_loss(out.output, y)?;
        let mut terms = vec![(pixel, weights.lambda)];
        let (mut l_global, mut l_local) = (0.0, 0.0);
        let mut target_vars = Vec::new();
        if contrastive {
            let (tg, tl) = self.mac.net.encode(&self.mac.target, &batch.clean)?;
            let online = self.mac.online.bind(&mut g, false);
            target_vars = self.mac.target.bind(&mut g, false);
            let (gl, ll) = self.mac.net.contrastive_terms(
                &mut g,
                &online,
                &target_vars,
                out.output,
                &tg,
                &tl,
                &samples,
                c.tau,
            )?;
            l_global = g.value(gl).data()[0];
            l_local = g.value(ll).data()[0];
            terms.push((gl, weights.global));
            terms.push((ll, weights.local));
        }
        let total = g.weighted_sum(terms)?;
        let l_pixel = g.value(pixel).data()[0];
        let l_total = g.value(total).data()[0];
        let out_value = g.value(out.output).clone();
        for (name, v) in [
            ("pixel", l_pixel),
            ("global", l_global),
            ("local", l_local),
            ("total", l_total),
        ] {
            if !v.is_finite() {
                return Err(nonfinite(name, Some(&out_value)));
            }
        }
        let grads = g.backward(total)?;
        target_grad_nonzero += count_nonzero(&grads, &target_vars);
        let mut gs: Vec<Option<Tensor>> =
            esau_vars.iter().map(|&v| grads.get(v).cloned()).collect();
        clip(&mut gs, c.grad_clip);
        let refs: Vec<Option<&Tensor>> = gs.iter().map(Option::as_ref).collect();
        self.opt_esau
            .step(self.esau.params_mut(), &refs, lr, c.hyper(), true)?;
        self.step += 1;
        observer(Phase::AfterDenoiser, self);

        Ok(StepReport {
            step,
            lr,
            l_pixel,
            l_global,
            l_local,
            l_total,
            contrastive_update_loss,
            target_grad_nonzero,
            samples,
        })
    }

    /// Dataset indices of the batch used at `step`.
    pub fn batch_indices(&self, step: u64, dataset_len: usize) -> Vec<usize> {
        let per_epoch = self.config.batches_per_epoch(dataset_len) as u64;
        let epoch = step / per_epoch;
        let within = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..dataset_len).collect();
        let mut rng = step_rng(self.config.seed ^ 0xba7c_0dde_5eed, epoch);
        order.shuffle(&mut rng);
        let start = within * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(dataset_len)].to_vec()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("format", "ldct-train-1");
        ck.set_meta("step", self.step);
        ck.set_meta("total_steps", self.total_steps);
        ck.set_meta("opt_esau.t", self.opt_esau.t);
        ck.set_meta("opt_mac.t", self.opt_mac.t);
        ck.set_meta("window_lo", self.config.window_lo);
        ck.set_meta("window_hi", self.config.window_hi);
        ck.set_meta(
            "esau",
            serde_json::to_string(&self.config.esau).expect("serialisable"),
        );
        ck.set_meta(
            "config",
            serde_json::to_string(&self.config).expect("serialisable"),
        );
        push_set(&mut ck, "esau.", self.esau.params());
        push_set(&mut ck, "mac.online.", &self.mac.online);
        push_set(&mut ck, "mac.target.", &self.mac.target);
        push_moments(&mut ck, "opt_esau.", self.esau.params(), &self.opt_esau);
        push_moments(&mut ck, "opt_mac.", &self.mac.online, &self.opt_mac);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(ck.require_meta("config")?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        config.validate()?;
        let mut esau = EsauNet::new(config.esau, 0)?;
        let mut mac = MacNetState::new(config.mac, config.ema_momentum, 0)?;
        load_set(ck, "esau.", esau.params_mut())?;
        load_set(ck, "mac.online.", &mut mac.online)?;
        load_set(ck, "mac.target.", &mut mac.target)?;
        let mut opt_esau = AdamW::new(esau.params());
        let mut opt_mac = AdamW::new(&mac.online);
        load_moments(ck, "opt_esau.", esau.params(), &mut opt_esau)?;
        load_moments(ck, "opt_mac.", &mac.online, &mut opt_mac)?;
        opt_esau.t = ck.meta_parse("opt_esau.t")?;
        opt_mac.t = ck.meta_parse("opt_mac.t")?;
        let step = ck.meta_parse("step")?;
        let total_steps = ck.meta_parse("total_steps")?;
        Ok(TrainState {
            config,
            esau,
            mac,
            opt_esau,
            opt_mac,
            step,
            total_steps,
        })
    }
}

fn push_set(ck: &mut Checkpoint, prefix: &str, set: &ParamSet) {
    for (name, t) in set.names().iter().zip(set.tensors()) {
        ck.push(format!("{prefix}{name}"), t.clone());
    }
}

fn push_moments(ck: &mut Checkpoint, prefix: &str, set: &ParamSet, opt: &AdamW) {
    for (i, name) in set.names().iter().enumerate() {
        ck.push(format!("{prefix}m.{name}"), opt.m[i].clone());
        ck.push(format!("{prefix}v.{name}"), opt.v[i].clone());
    }
}

fn load_set(ck: &Checkpoint, prefix: &str, set: &mut ParamSet) -> Result<()> {
    for i in 0..set.len() {
        let name = set.names()[i].clone();
        let t = ck.require(&format!("{prefix}{name}"))?.clone();
        set.set(&name, t)?;
    }
    Ok(())
}

fn load_moments(ck: &Checkpoint, prefix: &str, set: &ParamSet, opt: &mut AdamW) -> Result<()> {
    for (i, name) in set.names().iter().enumerate() {
        for (slot, kind) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
            let t = ck.require(&format!("{prefix}{kind}.{name}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}{kind}.{name}: shape mismatch"
                )));
            }
            *slot = t.clone();
        }
    }
    Ok(())
}

/// Denoiser and HU window stored in a training checkpoint.
pub fn load_denoiser(ck: &Checkpoint) -> Result<(EsauNet, (f64, f64))> {
    let config: EsauConfig = serde_json::from_str(ck.require_meta("esau")?)
        .map_err(|e| Error::Checkpoint(format!("denoiser config: {e}")))?;
    let mut net = EsauNet::new(config, 0)?;
    load_set(ck, "esau.", net.params_mut())?;
    Ok((
        net,
        (ck.meta_parse("window_lo")?, ck.meta_parse("window_hi")?),
    ))
}

/// Where [`train`] writes its artifacts.
pub struct TrainOutputs<'a> {
    /// Checkpoints go here (`step_NNNNNN.ckpt`, `final.ckpt`) when set.
    pub dir: Option<&'a Path>,
    /// Receives one NDJSON [`LogRecord`] per step.
    pub log: &'a mut dyn Write,
}

/// Runs `state` to its final step over `dataset`, returning the step reports.
pub fn train(
    state: &mut TrainState,
    dataset: &[SlicePair],
    out: TrainOutputs<'_>,
) -> Result<Vec<StepReport>> {
    check_uniform(dataset)?;
    let expected = state.config.total_steps(dataset.len());
    if expected != state.total_steps {
        return Err(invalid!(
            "dataset of {} pairs gives {expected} steps, state expects {}",
            dataset.len(),
            state.total_steps
        ));
    }
    if let Some(dir) = out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut reports = Vec::new();
    while state.step < state.total_steps {
        let idx = state.batch_indices(state.step, dataset.len());
        let pairs: Vec<&SlicePair> = idx.iter().map(|&i| &dataset[i]).collect();
        let batch = Batch::from_pairs(&pairs, &state.config)?;
        let report = state.train_step(&batch)?;
        let line = serde_json::to_string(&report.record()).expect("record serialises");
        writeln!(out.log, "{line}").map_err(|e| Error::io("<metrics log>", e))?;
        reports.push(report);
        if let Some(dir) = out.dir {
            let every = state.config.checkpoint_every;
            if every > 0 && state.step.is_multiple_of(every) && state.step < state.total_steps {
                state
                    .to_checkpoint()
                    .save(dir.join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(dir) = out.dir {
        state.to_checkpoint().save(dir.join("final.ckpt"))?;
    }
    Ok(reports)
}
