//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (gradients are accumulated for them) or constant; constants are
//! how detached inputs and frozen networks enter a pass, so no gradient ever
//! reaches them.

use crate::error::{shape_err, Result};
use crate::kernels::{self, AttentionCache, ConvGeom};
use crate::losses;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Upsample2x(Var),
    ChannelAttention {
        qkv: Var,
        alpha: Var,
        cache: AttentionCache,
    },
    GatherMean {
        x: Var,
        groups: Vec<Vec<(usize, usize)>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GlobalLoss {
        pred: Var,
        target: Var,
    },
    InfoNce {
        query: Var,
        keys: Var,
        positives: Vec<usize>,
        negatives: Vec<Vec<usize>>,
        tau: f64,
    },
    PixelLoss {
        pred: Var,
        target: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Dot {
        x: Var,
        weights: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// `None` when no gradient reached `v` (constants never receive one).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn trainable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Attention cache of a node produced by [`Graph::channel_attention`].
    pub fn attention_cache(&self, v: Var) -> Option<&AttentionCache> {
        match &self.nodes[v.0].op {
            Op::ChannelAttention { cache, .. } => Some(cache),
            _ => None,
        }
    }

    /// Every attention cache recorded in this graph, in creation order.
    pub fn attention_caches(&self) -> Vec<&AttentionCache> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::ChannelAttention { cache, .. } => Some(cache),
                _ => None,
            })
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let ng = self.needs_grad(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Concatenation along the channel axis of two rank-4 tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat: [{na},{ca},{ha},{wa}] vs [{nb},{cb},{hb},{wb}]"
            ));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[na, ca + cb, ha, wa], data)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample_nearest2x(self.value(x))?;
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::Upsample2x(x), ng))
    }

    /// Channel attention core over stacked `[Q; K; V]` channels.
    pub fn channel_attention(&mut self, qkv: Var, alpha: Var, heads: usize) -> Result<Var> {
        let (out, cache) =
            kernels::channel_attention_core(self.value(qkv), self.value(alpha), heads)?;
        let ng = self.needs_grad(qkv) || self.needs_grad(alpha);
        Ok(self.push(out, Op::ChannelAttention { qkv, alpha, cache }, ng))
    }

    /// Row `r` of the `M × C` output is the mean, over `groups[r]`, of the
    /// channel vectors at `(image, flat spatial index)` of a rank-4 input.
    pub fn gather_mean(&mut self, x: Var, groups: Vec<Vec<(usize, usize)>>) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[groups.len(), c]);
        {
            let src = self.value(x).data();
            let dst = out.data_mut();
            for (r, group) in groups.iter().enumerate() {
                if group.is_empty() {
                    return Err(shape_err!("gather: empty group {r}"));
                }
                let inv = 1.0 / group.len() as f64;
                for &(img, idx) in group {
                    if img >= n || idx >= hw {
                        return Err(shape_err!(
                            "gather: ({img}, {idx}) outside [{n}, {c}, {h}, {w}]"
                        ));
                    }
                    for ch in 0..c {
                        dst[r * c + ch] += src[(img * c + ch) * hw + idx] * inv;
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::GatherMean { x, groups }, ng))
    }

    /// `x·wᵀ + b` with `x: M × in`, `w: out × in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if din != win || self.value(b).shape() != [dout] {
            return Err(shape_err!(
                "linear: x {:?}, w {:?}, b {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = Tensor::zeros(&[m, dout]);
        kernels::gemm(
            m,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            out.data_mut(),
        );
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(dout) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(crate::error::invalid!("cannot normalize a zero embedding"));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Σ over rows of `2 − 2·cos(pred_r, target_r)`.
    pub fn global_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(shape_err!(
                "global loss: {:?} vs {:?}",
                p.shape(),
                t.shape()
            ));
        }
        let (_, d) = p.dims2()?;
        let mut total = 0.0;
        for (pr, tr) in p.data().chunks(d).zip(t.data().chunks(d)) {
            total += losses::global_term_grad(pr, tr)?.0;
        }
        let ng = self.needs_grad(pred) || self.needs_grad(target);
        Ok(self.push(Tensor::scalar(total), Op::GlobalLoss { pred, target }, ng))
    }

    /// Σ over queries `r` of InfoNCE with positive row `positives[r]` and
    /// negative rows `negatives[r]` of `keys`.
    pub fn infonce(
        &mut self,
        query: Var,
        keys: Var,
        positives: Vec<usize>,
        negatives: Vec<Vec<usize>>,
        tau: f64,
    ) -> Result<Var> {
        let (m, d) = self.value(query).dims2()?;
        let (rows, dk) = self.value(keys).dims2()?;
        if d != dk || positives.len() != m || negatives.len() != m {
            return Err(shape_err!(
                "infonce: {m} queries of dim {d}, keys [{rows}, {dk}]"
            ));
        }
        if positives
            .iter()
            .chain(negatives.iter().flatten())
            .any(|&r| r >= rows)
        {
            return Err(shape_err!("infonce: key row out of range"));
        }
        let q = self.value(query).data();
        let k = self.value(keys).data();
        let mut total = 0.0;
        for r in 0..m {
            let negs: Vec<&[f64]> = negatives[r]
                .iter()
                .map(|&j| &k[j * d..(j + 1) * d])
                .collect();
            let pos = positives[r];
            total += losses::local_infonce(
                &q[r * d..(r + 1) * d],
                &k[pos * d..(pos + 1) * d],
                &negs,
                tau,
            )?;
        }
        let ng = self.needs_grad(query) || self.needs_grad(keys);
        Ok(self.push(
            Tensor::scalar(total),
            Op::InfoNce {
                query,
                keys,
                positives,
                negatives,
                tau,
            },
            ng,
        ))
    }

    /// Batch-mean of `MSE + (1 − SSIM)` over `N × 1 × H × W` images.
    pub fn pixel_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(shape_err!("pixel loss: {:?} vs {:?}", p.shape(), t.shape()));
        }
        let (n, c, h, w) = p.dims4()?;
        let mut total = 0.0;
        for i in 0..n * c {
            total += losses::pixel_loss_plane(
                &p.data()[i * h * w..(i + 1) * h * w],
                &t.data()[i * h * w..(i + 1) * h * w],
                h,
                w,
            )?;
        }
        let ng = self.needs_grad(pred) || self.needs_grad(target);
        Ok(self.push(
            Tensor::scalar(total / (n * c) as f64),
            Op::PixelLoss { pred, target },
            ng,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() || p.is_empty() {
            return Err(shape_err!("mse: {:?} vs {:?}", p.shape(), t.shape()));
        }
        let v = crate::metrics::mse_values(p.data(), t.data());
        let ng = self.needs_grad(pred) || self.needs_grad(target);
        Ok(self.push(Tensor::scalar(v), Op::Mse { pred, target }, ng))
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(shape_err!(
                "dot: {:?} vs {:?}",
                self.value(x).shape(),
                weights.shape()
            ));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights }, ng))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let mut total = 0.0;
        for &(v, wt) in &terms {
            if self.value(v).len() != 1 {
                return Err(shape_err!("weighted sum takes scalars"));
            }
            total += wt * self.value(v).data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.needs_grad(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms), ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want = (ng(*x), ng(*w), b.is_some_and(ng));
                let cg = kernels::conv2d_backward(self.value(*x), self.value(*w), *geom, g, want)?;
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = cg.dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let mut dx = g.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v < 0.0 {
                        *d *= slope;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).dims4()?.1;
                let hw = h * w;
                let mut da = Tensor::zeros(&[n, ca, h, w]);
                let mut db = Tensor::zeros(&[n, cb, h, w]);
                for i in 0..n {
                    let src = &g.data()[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
                    da.data_mut()[i * ca * hw..(i + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                    db.data_mut()[i * cb * hw..(i + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                }
                if ng(*a) {
                    accumulate(&mut grads[a.0], da);
                }
                if ng(*b) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Upsample2x(x) => {
                accumulate(&mut grads[x.0], kernels::upsample_nearest2x_backward(g)?);
            }
            Op::ChannelAttention { qkv, alpha, cache } => {
                let (dqkv, dalpha) = kernels::channel_attention_core_backward(
                    self.value(*qkv),
                    self.value(*alpha),
                    cache,
                    g,
                )?;
                if ng(*qkv) {
                    accumulate(&mut grads[qkv.0], dqkv);
                }
                if ng(*alpha) {
                    accumulate(&mut grads[alpha.0], dalpha);
                }
            }
            Op::GatherMean { x, groups } => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let dst = dx.data_mut();
                for (r, group) in groups.iter().enumerate() {
                    let inv = 1.0 / group.len() as f64;
                    for &(img, idx) in group {
                        for ch in 0..c {
                            dst[(img * c + ch) * hw + idx] += g.data()[r * c + ch] * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Linear { x, w, b } => {
                let (m, din) = self.value(*x).dims2()?;
                let (dout, _) = self.value(*w).dims2()?;
                if ng(*x) {
                    let mut dx = Tensor::zeros(&[m, din]);
                    kernels::gemm(
                        m,
                        dout,
                        din,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        dx.data_mut(),
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                if ng(*w) {
                    let mut dw = Tensor::zeros(&[dout, din]);
                    kernels::gemm(
                        dout,
                        m,
                        din,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        dw.data_mut(),
                    );
                    accumulate(&mut grads[w.0], dw);
                }
                if ng(*b) {
                    let mut db = Tensor::zeros(&[dout]);
                    for row in g.data().chunks(dout) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, d) = node.value.dims2()?;
                let mut dx = g.clone();
                for ((drow, yrow), n) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(node.value.data().chunks(d))
                    .zip(norms)
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = (*dv - yv * dot) / n;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::GlobalLoss { pred, target } => {
                let scale = g.data()[0];
                let p = self.value(*pred);
                let t = self.value(*target);
                let (_, d) = p.dims2()?;
                let mut dp = Tensor::zeros(p.shape());
                let mut dt = Tensor::zeros(t.shape());
                for (r, (pr, tr)) in p.data().chunks(d).zip(t.data().chunks(d)).enumerate() {
                    let (_, gp, gt) = losses::global_term_grad(pr, tr)?;
                    for k in 0..d {
                        dp.data_mut()[r * d + k] = scale * gp[k];
                        dt.data_mut()[r * d + k] = scale * gt[k];
                    }
                }
                if ng(*pred) {
                    accumulate(&mut grads[pred.0], dp);
                }
                if ng(*target) {
                    accumulate(&mut grads[target.0], dt);
                }
            }
            Op::InfoNce {
                query,
                keys,
                positives,
                negatives,
                tau,
            } => {
                let scale = g.data()[0];
                let q = self.value(*query);
                let k = self.value(*keys);
                let (m, d) = q.dims2()?;
                let mut dq = Tensor::zeros(q.shape());
                let mut dk = Tensor::zeros(k.shape());
                for r in 0..m {
                    let negs: Vec<&[f64]> = negatives[r]
                        .iter()
                        .map(|&j| &k.data()[j * d..(j + 1) * d])
                        .collect();
                    let pos = positives[r];
                    let gr = losses::local_infonce_grad(
                        &q.data()[r * d..(r + 1) * d],
                        &k.data()[pos * d..(pos + 1) * d],
                        &negs,
                        *tau,
                    )?;
                    for i in 0..d {
                        dq.data_mut()[r * d + i] += scale * gr.query[i];
                        dk.data_mut()[pos * d + i] += scale * gr.positive[i];
                    }
                    for (&j, gn) in negatives[r].iter().zip(&gr.negatives) {
                        for (i, g) in gn.iter().enumerate() {
                            dk.data_mut()[j * d + i] += scale * g;
                        }
                    }
                }
                if ng(*query) {
                    accumulate(&mut grads[query.0], dq);
                }
                if ng(*keys) {
                    accumulate(&mut grads[keys.0], dk);
                }
            }
            Op::PixelLoss { pred, target } => {
                let scale = g.data()[0];
                let p = self.value(*pred);
                let t = self.value(*target);
                let (n, c, h, w) = p.dims4()?;
                let planes = (n * c) as f64;
                let mut dp = Tensor::zeros(p.shape());
                for i in 0..n * c {
                    let span = i * h * w..(i + 1) * h * w;
                    let (_, gp) = losses::pixel_loss_plane_grad(
                        &p.data()[span.clone()],
                        &t.data()[span.clone()],
                        h,
                        w,
                    )?;
                    for (d, v) in dp.data_mut()[span].iter_mut().zip(gp) {
                        *d = scale * v / planes;
                    }
                }
                if ng(*pred) {
                    accumulate(&mut grads[pred.0], dp);
                }
                // Targets are supervision only.
                let _ = target;
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let k = 2.0 * g.data()[0] / p.len() as f64;
                let diff: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| k * (a - b))
                    .collect();
                if ng(*pred) {
                    accumulate(
                        &mut grads[pred.0],
                        Tensor::from_vec(p.shape(), diff.clone())?,
                    );
                }
                if ng(*target) {
                    let neg = diff.into_iter().map(|v| -v).collect();
                    accumulate(&mut grads[target.0], Tensor::from_vec(t.shape(), neg)?);
                }
            }
            Op::Dot { x, weights } => {
                let s = g.data()[0];
                let dx = weights.data().iter().map(|w| w * s).collect();
                accumulate(&mut grads[x.0], Tensor::from_vec(weights.shape(), dx)?);
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    if ng(v) {
                        accumulate(&mut grads[v.0], Tensor::scalar(g.data()[0] * wt));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len)
                .map(|_| (rng.random::<f64>() - 0.5) * scale)
                .collect(),
        )
        .unwrap()
    }

    /// Central-difference check of `d loss / d input` for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let mut g = Graph::new();
        let x = g.trainable(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let l = build(&mut g, x);
            g.value(l).data()[0]
        };
        let eps = 1e-4;
        for i in 0..input.len() {
            let mut p = input.clone();
            p.data_mut()[i] += eps;
            let mut m = input.clone();
            m.data_mut()[i] -= eps;
            let fd = (eval(p) - eval(m)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(
                err < 1e-3 || (fd - a).abs() < 1e-8,
                "element {i}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn conv_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, &[3, 2, 3, 3], 1.0);
        let target = random(&mut rng, &[1, 3, 3, 3], 1.0);
        check(
            |g, x| {
                let w = g.constant(w.clone());
                let y = g.conv2d(x, w, None, ConvGeom::new(2, 1, 1)).unwrap();
                let y = g.leaky_relu(y, 0.2);
                let t = g.constant(target.clone());
                let rows = g
                    .gather_mean(y, vec![(0..9).map(|i| (0, i)).collect(), vec![(0, 4)]])
                    .unwrap();
                let trows = g.gather_mean(t, vec![vec![(0, 0)], vec![(0, 8)]]).unwrap();
                g.global_loss(rows, trows).unwrap()
            },
            random(&mut rng, &[1, 2, 6, 6], 2.0),
        );
    }

    #[test]
    fn attention_gradient_through_qkv_and_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random(&mut rng, &[1, 4, 4, 4], 1.0);
        let probe = random(&mut rng, &[1, 4, 4, 4], 1.0);
        let loss = |g: &mut Graph, y: Var| {
            let t = g.constant(target.clone());
            let p = g.constant(probe.clone());
            let a = g.add(y, p).unwrap();
            let rows = g
                .gather_mean(a, (0..16).map(|i| vec![(0, i)]).collect())
                .unwrap();
            let trows = g
                .gather_mean(t, (0..16).map(|i| vec![(0, i)]).collect())
                .unwrap();
            g.global_loss(rows, trows).unwrap()
        };
        let alpha = Tensor::from_vec(&[2], vec![0.8, 1.3]).unwrap();
        check(
            |g, x| {
                let a = g.constant(alpha.clone());
                let y = g.channel_attention(x, a, 2).unwrap();
                loss(g, y)
            },
            random(&mut rng, &[1, 12, 4, 4], 1.0),
        );
        let qkv = random(&mut rng, &[1, 12, 4, 4], 1.0);
        let mut g = Graph::new();
        let x = g.constant(qkv.clone());
        let a = g.trainable(alpha.clone());
        let y = g.channel_attention(x, a, 2).unwrap();
        let l = loss(&mut g, y);
        let grads = g.backward(l).unwrap();
        let da = grads.get(a).unwrap().clone();
        assert!(grads.get(x).is_none());
        for h in 0..2 {
            let eval = |delta: f64| {
                let mut al = alpha.clone();
                al.data_mut()[h] += delta;
                let mut g = Graph::new();
                let x = g.constant(qkv.clone());
                let a = g.constant(al);
                let y = g.channel_attention(x, a, 2).unwrap();
                let l = loss(&mut g, y);
                g.value(l).data()[0]
            };
            let fd = (eval(1e-4) - eval(-1e-4)) / 2e-4;
            assert!(
                (fd - da.data()[h]).abs() / fd.abs().max(1e-6) < 1e-3,
                "alpha {h}: {fd} vs {}",
                da.data()[h]
            );
        }
    }

    #[test]
    fn upsample_concat_linear_normalize_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random(&mut rng, &[1, 2, 4, 4], 1.0);
        let w = random(&mut rng, &[5, 4], 1.0);
        let b = random(&mut rng, &[5], 1.0);
        check(
            |g, x| {
                let up = g.upsample2x(x).unwrap();
                let o = g.constant(other.clone());
                let cat = g.concat(up, o).unwrap();
                let rows = g
                    .gather_mean(cat, (0..16).map(|i| vec![(0, i)]).collect())
                    .unwrap();
                let w = g.constant(w.clone());
                let b = g.constant(b.clone());
                let z = g.linear(rows, w, b).unwrap();
                let z = g.leaky_relu(z, 0.2);
                let z = g.l2_normalize_rows(z).unwrap();
                let q = g
                    .gather_mean(cat, vec![vec![(0, 0), (0, 5)], vec![(0, 9)]])
                    .unwrap();
                let q = g.linear(q, w, b).unwrap();
                let q = g.l2_normalize_rows(q).unwrap();
                g.infonce(q, z, vec![0, 3], vec![vec![1, 2, 7], vec![4, 5]], 0.3)
                    .unwrap()
            },
            random(&mut rng, &[1, 2, 2, 2], 1.0),
        );
    }

    #[test]
    fn pixel_loss_and_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Tensor::from_vec(
            &[2, 1, 12, 12],
            (0..288).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        check(
            |g, x| {
                let t = g.constant(target.clone());
                let p = g.pixel_loss(x, t).unwrap();
                g.weighted_sum(vec![(p, 10.0)]).unwrap()
            },
            Tensor::from_vec(
                &[2, 1, 12, 12],
                (0..288).map(|_| rng.random::<f64>()).collect(),
            )
            .unwrap(),
        );
    }

    #[test]
    fn mse_and_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = random(&mut rng, &[1, 2, 3, 3], 1.0);
        let w = random(&mut rng, &[1, 2, 3, 3], 1.0);
        check(
            |g, x| {
                let t = g.constant(target.clone());
                let m = g.mse(x, t).unwrap();
                let d = g.dot(x, w.clone()).unwrap();
                g.weighted_sum(vec![(m, 1.0), (d, 0.5)]).unwrap()
            },
            random(&mut rng, &[1, 2, 3, 3], 1.0),
        );
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        let t = g.trainable(Tensor::full(&[1, 1, 4, 4], 0.25));
        let s = g.add(c, t).unwrap();
        let rows = g.gather_mean(s, vec![vec![(0, 1)], vec![(0, 2)]]).unwrap();
        let other = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap());
        let l = g.global_loss(rows, other).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(other).is_none());
        assert!(grads.get(t).is_some());
    }
}
