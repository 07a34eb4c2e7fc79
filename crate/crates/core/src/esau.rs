//! The denoising U-Net with channel-wise multi-head attention at every level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::imaging::{NormalizedImage, SPATIAL_MULTIPLE};
use crate::kernels::{AttentionCache, ConvGeom};
use crate::losses::FeatureMap;
use crate::params::{push_conv, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const ESAU_DEPTH: usize = 4;
/// Scale applied to the output projection's initial weights.
pub const OUT_PROJ_INIT_SCALE: f64 = 0.01;
pub const LEAKY_SLOPE: f64 = 0.2;

const POINTWISE: ConvGeom = ConvGeom::new(1, 0, 1);
const SAME3: ConvGeom = ConvGeom::new(1, 1, 1);
const DOWN3: ConvGeom = ConvGeom::new(2, 1, 1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsauConfig {
    pub base_width: usize,
    pub heads: usize,
}

impl Default for EsauConfig {
    fn default() -> Self {
        EsauConfig {
            base_width: 64,
            heads: 4,
        }
    }
}

impl EsauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.heads == 0 {
            return Err(invalid!("base width and head count must be positive"));
        }
        if !self.base_width.is_multiple_of(self.heads) {
            return Err(invalid!(
                "head count {} does not divide base width {}",
                self.heads,
                self.base_width
            ));
        }
        Ok(())
    }

    /// Channel count of encoder level `i` (and of the bottleneck at `i = 4`).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Resampling applied after a level's blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Stride-2 3×3 conv doubling the channels.
    Down,
    /// Nearest ×2 then a 1×1 conv halving the channels.
    Up,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub qkv: (ParamId, ParamId),
    pub depthwise: (ParamId, ParamId),
    pub alpha: ParamId,
    pub proj: (ParamId, ParamId),
    pub heads: usize,
}

impl AttentionIds {
    pub(crate) fn register(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
    ) -> Self {
        let qkv = push_conv(set, rng, &format!("{name}.qkv"), c, 3 * c, 1, 1);
        let depthwise = push_conv(
            set,
            rng,
            &format!("{name}.depthwise"),
            3 * c,
            3 * c,
            3,
            3 * c,
        );
        let alpha = set.push(format!("{name}.alpha"), Tensor::full(&[heads], 1.0));
        let proj = push_conv(set, rng, &format!("{name}.proj"), c, c, 1, 1);
        AttentionIds {
            qkv,
            depthwise,
            alpha,
            proj,
            heads,
        }
    }
}

/// `x + proj(attention(depthwise(qkv(x))))` over the channels of `x`.
pub fn channel_attention(g: &mut Graph, vars: &[Var], ids: &AttentionIds, x: Var) -> Result<Var> {
    let c = g.value(x).dims4()?.1;
    if c % ids.heads != 0 {
        return Err(shape_err!("{} heads do not divide {c} channels", ids.heads));
    }
    let v = |id: ParamId| vars[id.0];
    let qkv = g.conv2d(x, v(ids.qkv.0), Some(v(ids.qkv.1)), POINTWISE)?;
    let qkv = g.conv2d(
        qkv,
        v(ids.depthwise.0),
        Some(v(ids.depthwise.1)),
        ConvGeom::new(1, 1, 3 * c),
    )?;
    let attended = g.channel_attention(qkv, v(ids.alpha), ids.heads)?;
    let projected = g.conv2d(attended, v(ids.proj.0), Some(v(ids.proj.1)), POINTWISE)?;
    g.add(projected, x)
}

#[derive(Debug, Clone, Copy)]
pub struct LevelIds {
    pub attention: AttentionIds,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub identity: (ParamId, ParamId),
    pub resample: Option<(ParamId, ParamId)>,
    pub kind: Resample,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LevelIds {
    pub(crate) fn register(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        heads: usize,
        kind: Resample,
    ) -> Self {
        let attention = AttentionIds::register(set, rng, &format!("{name}.attn"), cin, heads);
        let conv1 = push_conv(set, rng, &format!("{name}.conv1"), cin, cout, 3, 1);
        let conv2 = push_conv(set, rng, &format!("{name}.conv2"), cout, cout, 3, 1);
        let identity = push_conv(set, rng, &format!("{name}.iden"), cin, cout, 1, 1);
        let resample = match kind {
            Resample::Down => Some(push_conv(
                set,
                rng,
                &format!("{name}.down"),
                cout,
                2 * cout,
                3,
                1,
            )),
            Resample::Up => Some(push_conv(
                set,
                rng,
                &format!("{name}.up"),
                cout,
                cout / 2,
                1,
                1,
            )),
            Resample::None => None,
        };
        LevelIds {
            attention,
            conv1,
            conv2,
            identity,
            resample,
            kind,
            in_channels: cin,
            out_channels: cout,
        }
    }
}

/// Output of one level before and after its resampling.
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub features: Var,
    pub resampled: Var,
}

/// Attention, then `conv2(lrelu(conv1(F'))) + iden(F)`, then resampling.
pub fn esau_level(g: &mut Graph, vars: &[Var], ids: &LevelIds, x: Var) -> Result<LevelOutput> {
    let c = g.value(x).dims4()?.1;
    if c != ids.in_channels {
        return Err(shape_err!(
            "level expects {} channels, got {c}",
            ids.in_channels
        ));
    }
    let v = |id: ParamId| vars[id.0];
    let attended = channel_attention(g, vars, &ids.attention, x)?;
    let h = g.conv2d(attended, v(ids.conv1.0), Some(v(ids.conv1.1)), SAME3)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let h = g.conv2d(h, v(ids.conv2.0), Some(v(ids.conv2.1)), SAME3)?;
    let skip = g.conv2d(x, v(ids.identity.0), Some(v(ids.identity.1)), POINTWISE)?;
    let features = g.add(h, skip)?;
    let resampled = match (ids.kind, ids.resample) {
        (Resample::Down, Some((w, b))) => g.conv2d(features, v(w), Some(v(b)), DOWN3)?,
        (Resample::Up, Some((w, b))) => {
            let up = g.upsample2x(features)?;
            g.conv2d(up, v(w), Some(v(b)), POINTWISE)?
        }
        _ => features,
    };
    Ok(LevelOutput {
        features,
        resampled,
    })
}

/// A single level with its own parameters, for isolated use.
#[derive(Debug, Clone)]
pub struct EsauLevel {
    pub params: ParamSet,
    pub ids: LevelIds,
}

impl EsauLevel {
    pub fn new(cin: usize, cout: usize, heads: usize, kind: Resample, seed: u64) -> Result<Self> {
        if heads == 0 || !cin.is_multiple_of(heads) {
            return Err(invalid!("{heads} heads do not divide {cin} channels"));
        }
        if kind == Resample::Up && !cout.is_multiple_of(2) {
            return Err(invalid!("up-sampling needs an even channel count"));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = LevelIds::register(&mut params, &mut rng, "level", cin, cout, heads, kind);
        Ok(EsauLevel { params, ids })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(x.clone());
        let out = esau_level(&mut g, &vars, &self.ids, x)?;
        Ok(g.value(out.resampled).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EsauOutputs {
    /// Denoised image, `X + out_proj(features)`, not clamped.
    pub output: Var,
    /// Activation entering the output projection.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct EsauNet {
    config: EsauConfig,
    params: ParamSet,
    in_proj: (ParamId, ParamId),
    encoder: Vec<LevelIds>,
    bottleneck: LevelIds,
    decoder: Vec<LevelIds>,
    out_proj: (ParamId, ParamId),
}

impl EsauNet {
    pub fn new(config: EsauConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let heads = config.heads;
        let w = config.base_width;
        let in_proj = push_conv(&mut params, &mut rng, "in_proj", 1, w, 1, 1);
        let encoder = (0..ESAU_DEPTH)
            .map(|i| {
                let c = config.width(i);
                LevelIds::register(
                    &mut params,
                    &mut rng,
                    &format!("enc{i}"),
                    c,
                    c,
                    heads,
                    Resample::Down,
                )
            })
            .collect();
        let cb = config.width(ESAU_DEPTH);
        let bottleneck = LevelIds::register(
            &mut params,
            &mut rng,
            "bottleneck",
            cb,
            cb,
            heads,
            Resample::Up,
        );
        let decoder = (0..ESAU_DEPTH)
            .rev()
            .map(|i| {
                let c = config.width(i);
                let kind = if i == 0 { Resample::None } else { Resample::Up };
                LevelIds::register(
                    &mut params,
                    &mut rng,
                    &format!("dec{i}"),
                    2 * c,
                    c,
                    heads,
                    kind,
                )
            })
            .collect();
        let out_proj = push_conv(&mut params, &mut rng, "out_proj", w, 1, 1, 1);
        // Start close to the identity map: the residual branch begins small.
        for id in [out_proj.0, out_proj.1] {
            for v in params.get_mut(id).data_mut() {
                *v = f64::from((*v * OUT_PROJ_INIT_SCALE) as f32);
            }
        }
        Ok(EsauNet {
            config,
            params,
            in_proj,
            encoder,
            bottleneck,
            decoder,
            out_proj,
        })
    }

    pub fn config(&self) -> EsauConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder_levels(&self) -> &[LevelIds] {
        &self.encoder
    }

    /// Decoder levels, coarsest first.
    pub fn decoder_levels(&self) -> &[LevelIds] {
        &self.decoder
    }

    pub fn bottleneck_level(&self) -> &LevelIds {
        &self.bottleneck
    }

    /// Builds the forward pass on `g` for an `N × 1 × H × W` input, using
    /// `vars` bound from [`EsauNet::params`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<EsauOutputs> {
        let (_, c, h, w) = g.value(x).dims4()?;
        check_input(c, h, w)?;
        if vars.len() != self.params.len() {
            return Err(invalid!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                vars.len()
            ));
        }
        let v = |id: ParamId| vars[id.0];
        let mut f = g.conv2d(x, v(self.in_proj.0), Some(v(self.in_proj.1)), POINTWISE)?;
        let mut skips = Vec::with_capacity(ESAU_DEPTH);
        for level in &self.encoder {
            let out = esau_level(g, vars, level, f)?;
            skips.push(out.features);
            f = out.resampled;
        }
        f = esau_level(g, vars, &self.bottleneck, f)?.resampled;
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = g.concat(f, skip)?;
            f = esau_level(g, vars, level, joined)?.resampled;
        }
        let residual = g.conv2d(f, v(self.out_proj.0), Some(v(self.out_proj.1)), POINTWISE)?;
        let output = g.add(x, residual)?;
        Ok(EsauOutputs {
            output,
            features: f,
        })
    }

    /// Forward pass on a raw `N × 1 × H × W` tensor, returning output and
    /// features.
    pub fn run(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv)?;
        Ok((g.value(out.output).clone(), g.value(out.features).clone()))
    }

    /// Attention caches of one forward pass, in level order.
    pub fn attention_caches(&self, x: &Tensor) -> Result<Vec<AttentionCache>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        self.forward(&mut g, &vars, xv)?;
        Ok(g.attention_caches().into_iter().cloned().collect())
    }

    /// Denoised image, clamped into `[0, 1]`.
    pub fn denoise(&self, x: &NormalizedImage) -> Result<NormalizedImage> {
        let (out, _) = self.run(&x.to_tensor())?;
        NormalizedImage::from_unclamped(x.height(), x.width(), out.data())
    }

    /// Activation entering the final output projection.
    pub fn extract_features(&self, x: &NormalizedImage) -> Result<FeatureMap> {
        let (_, features) = self.run(&x.to_tensor())?;
        FeatureMap::from_tensor(&features, 0)
    }
}

fn check_input(c: usize, h: usize, w: usize) -> Result<()> {
    if c != 1 {
        return Err(shape_err!("denoiser takes 1 channel, got {c}"));
    }
    if h == 0
        || w == 0
        || !h.is_multiple_of(SPATIAL_MULTIPLE)
        || !w.is_multiple_of(SPATIAL_MULTIPLE)
    {
        return Err(shape_err!(
            "spatial size {h}×{w} is not a multiple of {SPATIAL_MULTIPLE}"
        ));
    }
    Ok(())
}
