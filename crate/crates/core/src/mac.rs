//! The contrastive network: a U-shaped encoder with separate global and local
//! heads, projection/prediction MLPs, and the online/target pair coupled by an
//! exponential moving average.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::imaging::SPATIAL_MULTIPLE;
use crate::kernels::ConvGeom;
use crate::losses::SampleSets;
use crate::params::{push_conv, push_linear, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.99;
const SLOPE: f64 = 0.2;
const POINTWISE: ConvGeom = ConvGeom::new(1, 0, 1);
const SAME3: ConvGeom = ConvGeom::new(1, 1, 1);
const HALVE2: ConvGeom = ConvGeom::new(2, 0, 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacConfig {
    /// Channels at full resolution; also the local feature width.
    pub base_width: usize,
    pub global_channels: usize,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,
    pub local_hidden: usize,
    /// Local embedding width `K`.
    pub embedding_dim: usize,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            base_width: 64,
            global_channels: 512,
            projector_hidden: 512,
            projection_dim: 256,
            predictor_hidden: 256,
            local_hidden: 256,
            embedding_dim: 256,
        }
    }
}

impl MacConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.base_width,
            self.global_channels,
            self.projector_hidden,
            self.projection_dim,
            self.predictor_hidden,
            self.local_hidden,
            self.embedding_dim,
        ];
        if dims.contains(&0) {
            return Err(invalid!("contrastive network widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    reduce: (ParamId, ParamId),
    merge: (ParamId, ParamId),
    depthwise: (ParamId, ParamId),
    channels: usize,
}

#[derive(Debug, Clone)]
struct Mlp {
    first: (ParamId, ParamId),
    second: (ParamId, ParamId),
}

/// Parameter layout of the contrastive network.
///
/// Encoder and projector come first, so the target tree is a prefix of the
/// online tree (which additionally carries the predictor and the local MLP).
#[derive(Debug, Clone)]
pub struct MacNet {
    config: MacConfig,
    stem: (ParamId, ParamId),
    downs: Vec<(ParamId, ParamId)>,
    global_down: (ParamId, ParamId),
    global_head: (ParamId, ParamId),
    decoder: Vec<DecoderStage>,
    projector: Mlp,
    target_len: usize,
    predictor: Mlp,
    local_mlp: Mlp,
}

fn mlp(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    hidden: usize,
    dout: usize,
) -> Mlp {
    Mlp {
        first: push_linear(set, rng, &format!("{name}.fc1"), din, hidden),
        second: push_linear(set, rng, &format!("{name}.fc2"), hidden, dout),
    }
}

impl MacNet {
    /// Layout plus freshly initialised online parameters.
    pub fn new(config: MacConfig, seed: u64) -> Result<(MacNet, ParamSet)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let b = config.base_width;
        let stem = push_conv(&mut p, &mut rng, "enc.stem", 1, b, 3, 1);
        let downs = (1..4)
            .map(|i| {
                push_conv(
                    &mut p,
                    &mut rng,
                    &format!("enc.down{i}"),
                    b << (i - 1),
                    b << i,
                    2,
                    1,
                )
            })
            .collect();
        let global_down = push_conv(
            &mut p,
            &mut rng,
            "enc.global_down",
            8 * b,
            config.global_channels,
            2,
            1,
        );
        let global_head = push_conv(
            &mut p,
            &mut rng,
            "enc.global_head",
            config.global_channels,
            config.global_channels,
            1,
            1,
        );
        let decoder = (0..3)
            .rev()
            .map(|i| {
                let c = b << i;
                DecoderStage {
                    reduce: push_conv(
                        &mut p,
                        &mut rng,
                        &format!("enc.dec{i}.reduce"),
                        2 * c,
                        c,
                        1,
                        1,
                    ),
                    merge: push_conv(
                        &mut p,
                        &mut rng,
                        &format!("enc.dec{i}.merge"),
                        2 * c,
                        c,
                        1,
                        1,
                    ),
                    depthwise: push_conv(
                        &mut p,
                        &mut rng,
                        &format!("enc.dec{i}.depthwise"),
                        c,
                        c,
                        3,
                        c,
                    ),
                    channels: c,
                }
            })
            .collect();
        let projector = mlp(
            &mut p,
            &mut rng,
            "projector",
            config.global_channels,
            config.projector_hidden,
            config.projection_dim,
        );
        let target_len = p.len();
        let predictor = mlp(
            &mut p,
            &mut rng,
            "predictor",
            config.projection_dim,
            config.predictor_hidden,
            config.projection_dim,
        );
        let local_mlp = mlp(
            &mut p,
            &mut rng,
            "local_mlp",
            b,
            config.local_hidden,
            config.embedding_dim,
        );
        let net = MacNet {
            config,
            stem,
            downs,
            global_down,
            global_head,
            decoder,
            projector,
            target_len,
            predictor,
            local_mlp,
        };
        Ok((net, p))
    }

    pub fn config(&self) -> MacConfig {
        self.config
    }

    /// Number of leading online parameters mirrored by the target tree.
    pub fn target_len(&self) -> usize {
        self.target_len
    }

    /// Parameters that feed the global features only.
    pub fn global_exclusive(&self) -> Vec<ParamId> {
        vec![
            self.global_down.0,
            self.global_down.1,
            self.global_head.0,
            self.global_head.1,
        ]
    }

    /// Encoder parameters (everything before the projector).
    pub fn encoder_len(&self) -> usize {
        self.projector.first.0 .0
    }

    /// Global `[N, G, H/16, W/16]` and local `[N, B, H, W]` features.
    pub fn disentangled_forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 1 {
            return Err(shape_err!("contrastive encoder takes 1 channel, got {c}"));
        }
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(shape_err!(
                "spatial size {h}×{w} is not a multiple of {SPATIAL_MULTIPLE}"
            ));
        }
        if vars.len() < self.encoder_len() {
            return Err(invalid!(
                "expected at least {} bound parameters",
                self.encoder_len()
            ));
        }
        let v = |id: ParamId| vars[id.0];
        let conv = |g: &mut Graph, x: Var, p: (ParamId, ParamId), geom: ConvGeom| {
            g.conv2d(x, v(p.0), Some(v(p.1)), geom)
        };
        let e0 = conv(g, x, self.stem, SAME3)?;
        let mut feats = vec![g.leaky_relu(e0, SLOPE)];
        for &down in &self.downs {
            let prev = *feats.last().expect("stem present");
            let e = conv(g, prev, down, HALVE2)?;
            feats.push(g.leaky_relu(e, SLOPE));
        }
        let coarse = feats[3];
        let gd = conv(g, coarse, self.global_down, HALVE2)?;
        let gd = g.leaky_relu(gd, SLOPE);
        let global = conv(g, gd, self.global_head, POINTWISE)?;

        let mut f = coarse;
        for (stage, skip) in self.decoder.iter().zip(feats[..3].iter().rev()) {
            let reduced = conv(g, f, stage.reduce, POINTWISE)?;
            let up = g.upsample2x(reduced)?;
            let joined = g.concat(up, *skip)?;
            let merged = conv(g, joined, stage.merge, POINTWISE)?;
            let merged = g.leaky_relu(merged, SLOPE);
            f = conv(
                g,
                merged,
                stage.depthwise,
                ConvGeom::new(1, 1, stage.channels),
            )?;
        }
        Ok((global, f))
    }

    /// Tensor-level forward of the encoder.
    pub fn encode(&self, params: &ParamSet, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (fg, fl) = self.disentangled_forward(&mut g, &vars, xv)?;
        Ok((g.value(fg).clone(), g.value(fl).clone()))
    }

    fn apply_mlp(&self, g: &mut Graph, vars: &[Var], m: &Mlp, x: Var) -> Result<Var> {
        let h = g.linear(x, vars[m.first.0 .0], vars[m.first.1 .0])?;
        let h = g.leaky_relu(h, SLOPE);
        g.linear(h, vars[m.second.0 .0], vars[m.second.1 .0])
    }

    pub fn project(&self, g: &mut Graph, vars: &[Var], rows: Var) -> Result<Var> {
        self.apply_mlp(g, vars, &self.projector, rows)
    }

    /// Needs online parameters.
    pub fn predict(&self, g: &mut Graph, vars: &[Var], rows: Var) -> Result<Var> {
        if vars.len() <= self.predictor.second.1 .0 {
            return Err(invalid!("the predictor exists only in the online tree"));
        }
        self.apply_mlp(g, vars, &self.predictor, rows)
    }

    /// Local MLP followed by row-wise L2 normalisation. Needs online parameters.
    pub fn embed_local(&self, g: &mut Graph, vars: &[Var], rows: Var) -> Result<Var> {
        if vars.len() <= self.local_mlp.second.1 .0 {
            return Err(invalid!("the local MLP exists only in the online tree"));
        }
        let z = self.apply_mlp(g, vars, &self.local_mlp, rows)?;
        g.l2_normalize_rows(z)
    }

    /// Builds both contrastive terms on `g`.
    ///
    /// `denoised` is the online network's input; `target_global` and
    /// `target_local` are the target network's features on the clean batch,
    /// entered as constants. The target projector is bound from `target_vars`.
    #[allow(clippy::too_many_arguments)]
    pub fn contrastive_terms(
        &self,
        g: &mut Graph,
        online: &[Var],
        target_vars: &[Var],
        denoised: Var,
        target_global: &Tensor,
        target_local: &Tensor,
        samples: &SampleSets,
        tau: f64,
    ) -> Result<(Var, Var)> {
        let (fg, fl) = self.disentangled_forward(g, online, denoised)?;
        if g.value(fg).shape() != target_global.shape()
            || g.value(fl).shape() != target_local.shape()
        {
            return Err(shape_err!("online and target features disagree in shape"));
        }
        if samples.patches.is_empty() || samples.pixels.is_empty() {
            return Err(invalid!(
                "contrastive terms need at least one query of each kind"
            ));
        }
        let groups: Vec<Vec<(usize, usize)>> = samples
            .patches
            .iter()
            .map(|(n, set)| {
                std::iter::once(set.query)
                    .chain(set.positives.iter().copied())
                    .map(|i| (*n, i))
                    .collect()
            })
            .collect();
        let tg = g.constant(target_global.clone());
        let target_rows = g.gather_mean(tg, groups.clone())?;
        let z_target = self.project(g, target_vars, target_rows)?;
        let online_rows = g.gather_mean(fg, groups)?;
        let z_online = self.project(g, online, online_rows)?;
        let prediction = self.predict(g, online, z_online)?;
        let global = g.global_loss(prediction, z_target)?;

        let queries: Vec<Vec<(usize, usize)>> = samples
            .pixels
            .iter()
            .map(|(n, s)| vec![(*n, s.query)])
            .collect();
        let mut key_groups = Vec::new();
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (n, set) in &samples.pixels {
            positives.push(key_groups.len());
            key_groups.push(vec![(*n, set.query)]);
            let mut negs = Vec::new();
            for &j in &set.negatives {
                negs.push(key_groups.len());
                key_groups.push(vec![(*n, j)]);
            }
            negatives.push(negs);
        }
        let q_rows = g.gather_mean(fl, queries)?;
        let q = self.embed_local(g, online, q_rows)?;
        let tl = g.constant(target_local.clone());
        let k_rows = g.gather_mean(tl, key_groups)?;
        let k = self.embed_local(g, online, k_rows)?;
        let local = g.infonce(q, k, positives, negatives, tau)?;
        Ok((global, local))
    }
}

/// `target ← m·target + (1 − m)·online` over the shared prefix.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(invalid!("EMA momentum {momentum} outside [0, 1]"));
    }
    if online.len() < target.len() || !target.same_layout(&online.prefix(target.len())) {
        return Err(shape_err!("target tree does not mirror the online tree"));
    }
    if momentum == 1.0 {
        return Ok(());
    }
    // Written as a contraction towards `online` so that rounding can never
    // carry the target further away than it was.
    for (t, o) in target.tensors_mut().iter_mut().zip(online.tensors()) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = ov + momentum * (*tv - ov);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct MacNetState {
    pub net: MacNet,
    pub online: ParamSet,
    pub target: ParamSet,
    pub momentum: f64,
}

impl MacNetState {
    /// Target starts as a copy of the online encoder and projector.
    pub fn new(config: MacConfig, momentum: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid!("EMA momentum {momentum} outside [0, 1]"));
        }
        let (net, online) = MacNet::new(config, seed)?;
        let target = online.prefix(net.target_len());
        Ok(MacNetState {
            net,
            online,
            target,
            momentum,
        })
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.target, &self.online, self.momentum)
    }
}
