//! The velocity-prediction transformer.
//!
//! A stack of pre-norm blocks with per-token adaptive modulation: every
//! token is conditioned on its own timestep embedding (plus a class
//! embedding), so heterogeneously noised inputs carry their noise level in
//! the conditioning pathway. One modulation MLP is shared across blocks.
//! Position is a learned absolute embedding; the output projection and all
//! modulation weights start at zero so an untrained model predicts zero
//! velocity exactly.
//!
//! The same file defines the timestep-free classifier used as the frozen
//! feature encoder for the external-alignment baseline and for probing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::Philox;
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub tokens: usize,
    pub num_classes: usize,
    pub head_hidden: usize,
}

impl TransformerConfig {
    /// The desk-scale default: trains in minutes on a CPU while keeping the
    /// 0.3·D / 0.7·D tap geometry meaningful.
    pub fn toy_default() -> TransformerConfig {
        TransformerConfig {
            depth: 6,
            hidden: 128,
            heads: 4,
            token_dim: 16,
            tokens: 16,
            num_classes: 8,
            head_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "depth must be >= 2 so the taps can satisfy l < k, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(
                "hidden width must be even for the sinusoidal features".into(),
            ));
        }
        if self.tokens == 0 || self.token_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("tokens, token_dim, num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Student tap: round(0.3·D), clamped so a valid teacher tap exists.
    pub fn student_tap(&self) -> usize {
        ((0.3 * self.depth as f64).round() as usize).min(self.depth - 2)
    }

    /// Teacher tap: round(0.7·D), kept strictly above the student tap.
    pub fn teacher_tap(&self) -> usize {
        ((0.7 * self.depth as f64).round() as usize)
            .max(self.student_tap() + 1)
            .min(self.depth - 1)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub mlp1_w: Tensor,
    pub mlp1_b: Tensor,
    pub mlp2_w: Tensor,
    pub mlp2_b: Tensor,
}

/// All trainable tensors. `flat()` fixes the canonical parameter order used
/// by the optimizer, EMA updates, and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: TransformerConfig,
    pub token_in_w: Tensor,
    pub token_in_b: Tensor,
    pub pos_emb: Tensor,
    pub class_emb: Tensor,
    pub t_mlp1_w: Tensor,
    pub t_mlp1_b: Tensor,
    pub t_mlp2_w: Tensor,
    pub t_mlp2_b: Tensor,
    pub mod_w: Tensor,
    pub mod_b: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_mod_w: Tensor,
    pub final_mod_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub head1_w: Tensor,
    pub head1_b: Tensor,
    pub head2_w: Tensor,
    pub head2_b: Tensor,
    pub head3_w: Tensor,
    pub head3_b: Tensor,
}

const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated at ±2 std.
fn trunc_normal(rng: &mut Philox, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn init_params(config: &TransformerConfig, rng: &mut Philox) -> Result<ModelParams> {
    config.validate()?;
    let (h, c, n, k) = (
        config.hidden,
        config.token_dim,
        config.tokens,
        config.num_classes,
    );
    let hh = config.head_hidden;
    let mh = config.mlp_hidden();
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            qkv_w: trunc_normal(rng, &[h, 3 * h], INIT_STD),
            qkv_b: Tensor::zeros(&[3 * h]),
            proj_w: trunc_normal(rng, &[h, h], INIT_STD),
            proj_b: Tensor::zeros(&[h]),
            mlp1_w: trunc_normal(rng, &[h, mh], INIT_STD),
            mlp1_b: Tensor::zeros(&[mh]),
            mlp2_w: trunc_normal(rng, &[mh, h], INIT_STD),
            mlp2_b: Tensor::zeros(&[h]),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        token_in_w: trunc_normal(rng, &[c, h], INIT_STD),
        token_in_b: Tensor::zeros(&[h]),
        pos_emb: trunc_normal(rng, &[n, h], INIT_STD),
        class_emb: trunc_normal(rng, &[k + 1, h], INIT_STD),
        t_mlp1_w: trunc_normal(rng, &[h, h], INIT_STD),
        t_mlp1_b: Tensor::zeros(&[h]),
        t_mlp2_w: trunc_normal(rng, &[h, h], INIT_STD),
        t_mlp2_b: Tensor::zeros(&[h]),
        // zero-initialized modulation: blocks start as identities
        mod_w: Tensor::zeros(&[h, 6 * h]),
        mod_b: Tensor::zeros(&[6 * h]),
        blocks,
        final_mod_w: Tensor::zeros(&[h, 2 * h]),
        final_mod_b: Tensor::zeros(&[2 * h]),
        // zero-initialized readout: initial velocity prediction is 0
        out_w: Tensor::zeros(&[h, c]),
        out_b: Tensor::zeros(&[c]),
        head1_w: trunc_normal(rng, &[h, hh], INIT_STD),
        head1_b: Tensor::zeros(&[hh]),
        head2_w: trunc_normal(rng, &[hh, hh], INIT_STD),
        head2_b: Tensor::zeros(&[hh]),
        head3_w: trunc_normal(rng, &[hh, h], INIT_STD),
        head3_b: Tensor::zeros(&[h]),
    })
}

impl ModelParams {
    /// Canonical flat order. Checkpoints serialize exactly this sequence.
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.token_in_w,
            &self.token_in_b,
            &self.pos_emb,
            &self.class_emb,
            &self.t_mlp1_w,
            &self.t_mlp1_b,
            &self.t_mlp2_w,
            &self.t_mlp2_b,
            &self.mod_w,
            &self.mod_b,
        ];
        for b in &self.blocks {
            v.extend([
                &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.mlp1_w, &b.mlp1_b, &b.mlp2_w,
                &b.mlp2_b,
            ]);
        }
        v.extend([
            &self.final_mod_w,
            &self.final_mod_b,
            &self.out_w,
            &self.out_b,
            &self.head1_w,
            &self.head1_b,
            &self.head2_w,
            &self.head2_b,
            &self.head3_w,
            &self.head3_b,
        ]);
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![
            &mut self.token_in_w,
            &mut self.token_in_b,
            &mut self.pos_emb,
            &mut self.class_emb,
            &mut self.t_mlp1_w,
            &mut self.t_mlp1_b,
            &mut self.t_mlp2_w,
            &mut self.t_mlp2_b,
            &mut self.mod_w,
            &mut self.mod_b,
        ];
        for b in &mut self.blocks {
            v.push(&mut b.qkv_w);
            v.push(&mut b.qkv_b);
            v.push(&mut b.proj_w);
            v.push(&mut b.proj_b);
            v.push(&mut b.mlp1_w);
            v.push(&mut b.mlp1_b);
            v.push(&mut b.mlp2_w);
            v.push(&mut b.mlp2_b);
        }
        v.push(&mut self.final_mod_w);
        v.push(&mut self.final_mod_b);
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v.push(&mut self.head1_w);
        v.push(&mut self.head1_b);
        v.push(&mut self.head2_w);
        v.push(&mut self.head2_b);
        v.push(&mut self.head3_w);
        v.push(&mut self.head3_b);
        v
    }

    /// Names matching `flat()`, for the checkpoint header.
    pub fn flat_names(&self) -> Vec<String> {
        let mut v: Vec<String> = [
            "token_in_w",
            "token_in_b",
            "pos_emb",
            "class_emb",
            "t_mlp1_w",
            "t_mlp1_b",
            "t_mlp2_w",
            "t_mlp2_b",
            "mod_w",
            "mod_b",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..self.blocks.len() {
            for name in [
                "qkv_w", "qkv_b", "proj_w", "proj_b", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b",
            ] {
                v.push(format!("blocks.{i}.{name}"));
            }
        }
        v.extend(
            [
                "final_mod_w",
                "final_mod_b",
                "out_w",
                "out_b",
                "head1_w",
                "head1_b",
                "head2_w",
                "head2_b",
                "head3_w",
                "head3_b",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        v
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|t| t.numel()).sum()
    }
}

/// Graph handles for registered parameters, mirroring `ModelParams::flat()`.
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn flat(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Register every parameter on the graph: as leaves when `trainable`, as
/// constants otherwise (teacher / frozen-encoder passes).
pub fn register_params(
    g: &mut Graph,
    params: &ModelParams,
    trainable: bool,
) -> Result<ParamNodes> {
    let ids = params
        .flat()
        .into_iter()
        .map(|t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamNodes { ids })
}

// Indices into the flat order; blocks start after the 10 leading tensors.
const FLAT_BLOCK_START: usize = 10;
const FLAT_PER_BLOCK: usize = 8;

struct ModelIds<'a> {
    ids: &'a [NodeId],
    depth: usize,
}

impl<'a> ModelIds<'a> {
    fn new(nodes: &'a ParamNodes, cfg: &TransformerConfig) -> ModelIds<'a> {
        ModelIds {
            ids: &nodes.ids,
            depth: cfg.depth,
        }
    }
    fn token_in_w(&self) -> NodeId {
        self.ids[0]
    }
    fn token_in_b(&self) -> NodeId {
        self.ids[1]
    }
    fn pos_emb(&self) -> NodeId {
        self.ids[2]
    }
    fn class_emb(&self) -> NodeId {
        self.ids[3]
    }
    fn t_mlp1_w(&self) -> NodeId {
        self.ids[4]
    }
    fn t_mlp1_b(&self) -> NodeId {
        self.ids[5]
    }
    fn t_mlp2_w(&self) -> NodeId {
        self.ids[6]
    }
    fn t_mlp2_b(&self) -> NodeId {
        self.ids[7]
    }
    fn mod_w(&self) -> NodeId {
        self.ids[8]
    }
    fn mod_b(&self) -> NodeId {
        self.ids[9]
    }
    fn block(&self, d: usize) -> &[NodeId] {
        let s = FLAT_BLOCK_START + d * FLAT_PER_BLOCK;
        &self.ids[s..s + FLAT_PER_BLOCK]
    }
    fn tail(&self) -> &[NodeId] {
        &self.ids[FLAT_BLOCK_START + self.depth * FLAT_PER_BLOCK..]
    }
}

/// Sinusoidal features of per-token timesteps: H/2 frequencies log-spaced
/// over [1, 10^4], sin then cos halves. Pure data, not differentiated.
pub fn timestep_features(tau: &Tensor, hidden: usize) -> Result<Tensor> {
    if tau.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::InvalidArg("tau must lie in [0,1]".into()));
    }
    let half = hidden / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| 10f64.powf(4.0 * j as f64 / (half.max(2) - 1) as f64))
        .collect();
    let mut shape = tau.shape().to_vec();
    shape.push(hidden);
    let mut data = Vec::with_capacity(tau.numel() * hidden);
    for &t in tau.data() {
        for &f in &freqs {
            data.push((f * t).sin());
        }
        for &f in &freqs {
            data.push((f * t).cos());
        }
    }
    Tensor::new(shape, data)
}

/// The timestep-embedding MLP applied to sinusoidal features of `tau`
/// (shape `[B, N]` → `[B, N, H]`).
pub fn timestep_embed(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &TransformerConfig,
    tau: &Tensor,
) -> Result<NodeId> {
    let ids = ModelIds::new(nodes, cfg);
    let feats = g.input(timestep_features(tau, cfg.hidden)?)?;
    let h1 = g.matmul(feats, ids.t_mlp1_w())?;
    let h1 = g.add(h1, ids.t_mlp1_b())?;
    let h1 = g.silu(h1);
    let h2 = g.matmul(h1, ids.t_mlp2_w())?;
    g.add(h2, ids.t_mlp2_b())
}

fn one_hot_labels(
    batch: usize,
    tokens: usize,
    num_classes: usize,
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    if let Some(ls) = labels {
        if ls.len() != batch {
            return Err(Error::InvalidArg(format!(
                "{} labels for batch of {batch}",
                ls.len()
            )));
        }
        for &l in ls {
            if l >= num_classes {
                return Err(Error::InvalidArg(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
        }
    }
    // row per (element, token); the last class slot is the unconditional row
    let width = num_classes + 1;
    let mut data = vec![0.0; batch * tokens * width];
    for b in 0..batch {
        let cls = labels.map(|ls| ls[b]).unwrap_or(num_classes);
        for t in 0..tokens {
            data[(b * tokens + t) * width + cls] = 1.0;
        }
    }
    Tensor::new(vec![batch * tokens, width], data)
}

/// `x ⊙ (1 + scale) + shift`, the adaptive-norm modulation.
fn modulate(g: &mut Graph, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
    let scaled = g.mul(x, scale)?;
    let y = g.add(x, scaled)?;
    g.add(y, shift)
}

fn attention(
    g: &mut Graph,
    cfg: &TransformerConfig,
    block: &[NodeId],
    x: NodeId,
) -> Result<NodeId> {
    let h = cfg.hidden;
    let dh = cfg.head_dim();
    let qkv = g.matmul(x, block[0])?;
    let qkv = g.add(qkv, block[1])?;
    let q = g.slice(qkv, 2, 0, h)?;
    let k = g.slice(qkv, 2, h, h)?;
    let v = g.slice(qkv, 2, 2 * h, h)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = g.slice(q, 2, i * dh, dh)?;
        let kh = g.slice(k, 2, i * dh, dh)?;
        let vh = g.slice(v, 2, i * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_last(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&heads, 2)?;
    let out = g.matmul(merged, block[2])?;
    g.add(out, block[3])
}

fn mlp(g: &mut Graph, block: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h1 = g.matmul(x, block[4])?;
    let h1 = g.add(h1, block[5])?;
    let h1 = g.gelu_tanh(h1);
    let h2 = g.matmul(h1, block[6])?;
    g.add(h2, block[7])
}

pub struct ForwardOut {
    pub velocity: NodeId,
    /// Post-block states, one per layer.
    pub hiddens: Vec<NodeId>,
}

/// Full forward pass from a precomputed conditioning embedding `[B, N, H]`.
pub fn forward_with_cond(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &TransformerConfig,
    x: &Tensor,
    t_emb: NodeId,
    labels: Option<&[usize]>,
) -> Result<ForwardOut> {
    cfg.validate()?;
    let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n != cfg.tokens || c != cfg.token_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: fmt_shape(x.shape()),
            rhs: fmt_shape(&[b, cfg.tokens, cfg.token_dim]),
        });
    }
    let ids = ModelIds::new(nodes, cfg);
    let h = cfg.hidden;

    // token projection + learned absolute positions
    let x_in = g.input(x.clone())?;
    let tok = g.matmul(x_in, ids.token_in_w())?;
    let tok = g.add(tok, ids.token_in_b())?;
    let tok = g.add(tok, ids.pos_emb())?;

    // conditioning: timestep embedding + class embedding, per token
    let onehot = g.input(one_hot_labels(b, n, cfg.num_classes, labels)?)?;
    let cls_flat = g.matmul(onehot, ids.class_emb())?;
    let cls = g.reshape(cls_flat, vec![b, n, h])?;
    let cond = g.add(t_emb, cls)?;

    // shared modulation MLP: one projection serving every block
    let cond_act = g.silu(cond);
    let mods = g.matmul(cond_act, ids.mod_w())?;
    let mods = g.add(mods, ids.mod_b())?;
    let chunk = |g: &mut Graph, i: usize| g.slice(mods, 2, i * h, h);
    let shift1 = chunk(g, 0)?;
    let scale1 = chunk(g, 1)?;
    let gate1 = chunk(g, 2)?;
    let shift2 = chunk(g, 3)?;
    let scale2 = chunk(g, 4)?;
    let gate2 = chunk(g, 5)?;

    let mut state = tok;
    let mut hiddens = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let block = ids.block(d);
        let normed = g.layernorm_last(state);
        let moded = modulate(g, normed, scale1, shift1)?;
        let attn_out = attention(g, cfg, block, moded)?;
        let gated = g.mul(gate1, attn_out)?;
        state = g.add(state, gated)?;

        let normed = g.layernorm_last(state);
        let moded = modulate(g, normed, scale2, shift2)?;
        let mlp_out = mlp(g, block, moded)?;
        let gated = g.mul(gate2, mlp_out)?;
        state = g.add(state, gated)?;
        hiddens.push(state);
    }

    // final adaptive norm + linear readout
    let tail = ids.tail();
    let (final_mod_w, final_mod_b, out_w, out_b) = (tail[0], tail[1], tail[2], tail[3]);
    let fmods = g.matmul(cond_act, final_mod_w)?;
    let fmods = g.add(fmods, final_mod_b)?;
    let fshift = g.slice(fmods, 2, 0, h)?;
    let fscale = g.slice(fmods, 2, h, h)?;
    let normed = g.layernorm_last(state);
    let moded = modulate(g, normed, fscale, fshift)?;
    let vel = g.matmul(moded, out_w)?;
    let velocity = g.add(vel, out_b)?;

    Ok(ForwardOut { velocity, hiddens })
}

/// Forward pass with per-token timesteps `tau` of shape `[B, N]`.
pub fn forward(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &TransformerConfig,
    x: &Tensor,
    tau: &Tensor,
    labels: Option<&[usize]>,
) -> Result<ForwardOut> {
    if tau.shape() != &x.shape()[..2] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: fmt_shape(x.shape()),
            rhs: fmt_shape(tau.shape()),
        });
    }
    let t_emb = timestep_embed(g, nodes, cfg, tau)?;
    forward_with_cond(g, nodes, cfg, x, t_emb, labels)
}

/// Scalar-conditioned reference: embed one timestep per batch element and
/// tile the embedding across tokens. With homogeneous tau this must agree
/// with the per-token path exactly.
pub fn forward_scalar_reference(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &TransformerConfig,
    x: &Tensor,
    t_scalar: &[f64],
    labels: Option<&[usize]>,
) -> Result<ForwardOut> {
    let b = x.shape()[0];
    if t_scalar.len() != b {
        return Err(Error::InvalidArg(format!(
            "{} scalar timesteps for batch of {b}",
            t_scalar.len()
        )));
    }
    let tau1 = Tensor::new(vec![b, 1], t_scalar.to_vec())?;
    let emb1 = timestep_embed(g, nodes, cfg, &tau1)?; // [B, 1, H]
    let copies = vec![emb1; cfg.tokens];
    let t_emb = g.concat(&copies, 1)?; // [B, N, H]
    forward_with_cond(g, nodes, cfg, x, t_emb, labels)
}

/// One eval-mode forward returning plain tensors (velocity, hiddens).
pub fn forward_eval(
    params: &ModelParams,
    x: &Tensor,
    tau: &Tensor,
    labels: Option<&[usize]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::eval();
    let nodes = register_params(&mut g, params, false)?;
    let out = forward(&mut g, &nodes, &params.config, x, tau, labels)?;
    Ok((
        g.value(out.velocity).clone(),
        out.hiddens.iter().map(|&h| g.value(h).clone()).collect(),
    ))
}

/// The projection head: 3-layer MLP H → head_hidden → head_hidden → H with
/// SiLU activations after the first two layers.
pub fn project_head(g: &mut Graph, nodes: &ParamNodes, hidden: NodeId) -> Result<NodeId> {
    let tail = &nodes.ids[nodes.ids.len() - 6..];
    let h1 = g.matmul(hidden, tail[0])?;
    let h1 = g.add(h1, tail[1])?;
    let h1 = g.silu(h1);
    let h2 = g.matmul(h1, tail[2])?;
    let h2 = g.add(h2, tail[3])?;
    let h2 = g.silu(h2);
    let h3 = g.matmul(h2, tail[4])?;
    g.add(h3, tail[5])
}

// ── timestep-free classifier (frozen-encoder stand-in and probe trunk) ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub token_dim: usize,
    pub tokens: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    /// Feature width matches the flow model so encoder features can serve
    /// as alignment targets directly.
    pub fn for_model(cfg: &TransformerConfig) -> EncoderConfig {
        EncoderConfig {
            depth: 4,
            hidden: cfg.hidden,
            heads: cfg.heads,
            token_dim: cfg.token_dim,
            tokens: cfg.tokens,
            num_classes: cfg.num_classes,
        }
    }

    pub fn feature_tap(&self) -> usize {
        ((0.7 * self.depth as f64).round() as usize).min(self.depth - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_in_w: Tensor,
    pub token_in_b: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl EncoderParams {
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.token_in_w, &self.token_in_b, &self.pos_emb];
        for b in &self.blocks {
            v.extend([
                &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.mlp1_w, &b.mlp1_b, &b.mlp2_w,
                &b.mlp2_b,
            ]);
        }
        v.extend([&self.cls_w, &self.cls_b]);
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> =
            vec![&mut self.token_in_w, &mut self.token_in_b, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.push(&mut b.qkv_w);
            v.push(&mut b.qkv_b);
            v.push(&mut b.proj_w);
            v.push(&mut b.proj_b);
            v.push(&mut b.mlp1_w);
            v.push(&mut b.mlp1_b);
            v.push(&mut b.mlp2_w);
            v.push(&mut b.mlp2_b);
        }
        v.push(&mut self.cls_w);
        v.push(&mut self.cls_b);
        v
    }

    /// FNV-1a over the exact parameter bits; detects any mutation.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in self.flat() {
            for &x in t.data() {
                for byte in x.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub fn encoder_init(config: &EncoderConfig, rng: &mut Philox) -> Result<EncoderParams> {
    let (h, c, n, k) = (
        config.hidden,
        config.token_dim,
        config.tokens,
        config.num_classes,
    );
    let mh = 2 * h;
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            qkv_w: trunc_normal(rng, &[h, 3 * h], INIT_STD),
            qkv_b: Tensor::zeros(&[3 * h]),
            proj_w: trunc_normal(rng, &[h, h], INIT_STD),
            proj_b: Tensor::zeros(&[h]),
            mlp1_w: trunc_normal(rng, &[h, mh], INIT_STD),
            mlp1_b: Tensor::zeros(&[mh]),
            mlp2_w: trunc_normal(rng, &[mh, h], INIT_STD),
            mlp2_b: Tensor::zeros(&[h]),
        })
        .collect();
    Ok(EncoderParams {
        config: config.clone(),
        token_in_w: trunc_normal(rng, &[c, h], INIT_STD),
        token_in_b: Tensor::zeros(&[h]),
        pos_emb: trunc_normal(rng, &[n, h], INIT_STD),
        blocks,
        cls_w: trunc_normal(rng, &[h, k], INIT_STD),
        cls_b: Tensor::zeros(&[k]),
    })
}

pub struct EncoderOut {
    pub logits: NodeId,
    pub hiddens: Vec<NodeId>,
}

pub fn encoder_forward(
    g: &mut Graph,
    ids: &ParamNodes,
    cfg: &EncoderConfig,
    x: &Tensor,
) -> Result<EncoderOut> {
    let tcfg = TransformerConfig {
        depth: cfg.depth,
        hidden: cfg.hidden,
        heads: cfg.heads,
        token_dim: cfg.token_dim,
        tokens: cfg.tokens,
        num_classes: cfg.num_classes,
        head_hidden: cfg.hidden,
    };
    let x_in = g.input(x.clone())?;
    let tok = g.matmul(x_in, ids.ids[0])?;
    let tok = g.add(tok, ids.ids[1])?;
    let mut state = g.add(tok, ids.ids[2])?;
    let mut hiddens = Vec::with_capacity(cfg.depth);
    for d in 0..cfg.depth {
        let block = &ids.ids[3 + d * FLAT_PER_BLOCK..3 + (d + 1) * FLAT_PER_BLOCK];
        let normed = g.layernorm_last(state);
        let attn_out = attention(g, &tcfg, block, normed)?;
        state = g.add(state, attn_out)?;
        let normed = g.layernorm_last(state);
        let mlp_out = mlp(g, block, normed)?;
        state = g.add(state, mlp_out)?;
        hiddens.push(state);
    }
    let pooled_pre = g.layernorm_last(state);
    let pooled = g.mean_axis(pooled_pre, 1)?;
    let tail = &ids.ids[3 + cfg.depth * FLAT_PER_BLOCK..];
    let logits = g.matmul(pooled, tail[0])?;
    let logits = g.add(logits, tail[1])?;
    Ok(EncoderOut { logits, hiddens })
}

pub fn register_encoder_params(
    g: &mut Graph,
    params: &EncoderParams,
    trainable: bool,
) -> Result<ParamNodes> {
    let ids = params
        .flat()
        .into_iter()
        .map(|t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamNodes { ids })
}
