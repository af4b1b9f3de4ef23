//! Networks and parameter management: the spatiotemporal velocity predictor
//! (used as generator, teacher, fake model and discriminator backbone),
//! low-rank adapters, EMA shadows, and the discriminator heads.

use crate::flow::{Conditioning, Velocity};
use crate::rng::{randn, PoseRng};
use crate::tensor::{Gradients, Tensor};
use crate::{PoseError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---- parameter maps ----

/// Named f64 parameter tensors. BTreeMap keeps iteration order stable, which
/// keeps checksums and training runs deterministic.
#[derive(Clone, Default)]
pub struct ParamMap(BTreeMap<String, ArrayD<f64>>);

impl ParamMap {
    pub fn new() -> Self {
        ParamMap(BTreeMap::new())
    }

    pub fn from_raw(map: BTreeMap<String, ArrayD<f64>>) -> Self {
        ParamMap(map)
    }

    pub fn raw(&self) -> &BTreeMap<String, ArrayD<f64>> {
        &self.0
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.0.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|a| a.len()).sum()
    }

    /// Wrap every parameter as a graph tensor. Trainable bindings become
    /// leaves that collect gradients; frozen bindings are constants.
    pub fn bind(&self, trainable: bool) -> Binding {
        let map = self
            .0
            .iter()
            .map(|(k, v)| {
                let t = if trainable {
                    Tensor::leaf(v.clone())
                } else {
                    Tensor::new(v.clone())
                };
                (k.clone(), t)
            })
            .collect();
        Binding { map }
    }
}

/// Parameters bound into the autodiff graph for one training step.
#[derive(Clone)]
pub struct Binding {
    pub map: BTreeMap<String, Tensor>,
}

impl Binding {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Pull gradients for every trainable leaf out of a backward sweep.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.map {
            if t.requires_grad() {
                if let Some(g) = grads.get(t) {
                    out.insert(name.clone(), g.data().clone());
                }
            }
        }
        out
    }
}

// ---- architecture config ----

/// Velocity network hyperparameters. The backbone has no frame-count
/// dependent parameters (positions are sinusoidal), so one parameter set
/// runs on clips of any length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 1,
            height: 16,
            width: 16,
            patch: 2,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
        }
    }
}

impl NetConfig {
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    fn in_channels(&self) -> usize {
        // x_t, replicated condition frame, binary mask channel
        2 * self.channels + 1
    }

    fn token_dim(&self) -> usize {
        self.in_channels() * self.patch * self.patch
    }

    fn out_token_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn mlp_dim(&self) -> usize {
        2 * self.d_model
    }
}

fn init_mat(rng: &mut PoseRng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut a = randn(rng, shape);
    a.mapv_inplace(|v| v * std);
    a
}

/// Fresh velocity-net parameters.
pub fn init_velocity_net(cfg: &NetConfig, rng: &mut PoseRng) -> ParamMap {
    let d = cfg.d_model;
    let mut p = ParamMap::new();
    p.insert("embed.w", init_mat(rng, &[cfg.token_dim(), d], 0.02));
    p.insert("embed.b", ArrayD::zeros(IxDyn(&[d])));
    for l in 0..cfg.n_blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("blocks.{l}.attn.{w}"), init_mat(rng, &[d, d], 0.02));
            p.insert(&format!("blocks.{l}.attn.{w}_b"), ArrayD::zeros(IxDyn(&[d])));
        }
        p.insert(&format!("blocks.{l}.ln1.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        p.insert(&format!("blocks.{l}.ln1.b"), ArrayD::zeros(IxDyn(&[d])));
        p.insert(&format!("blocks.{l}.ln2.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        p.insert(&format!("blocks.{l}.ln2.b"), ArrayD::zeros(IxDyn(&[d])));
        p.insert(&format!("blocks.{l}.mlp.w1"), init_mat(rng, &[d, cfg.mlp_dim()], 0.02));
        p.insert(&format!("blocks.{l}.mlp.b1"), ArrayD::zeros(IxDyn(&[cfg.mlp_dim()])));
        p.insert(&format!("blocks.{l}.mlp.w2"), init_mat(rng, &[cfg.mlp_dim(), d], 0.02));
        p.insert(&format!("blocks.{l}.mlp.b2"), ArrayD::zeros(IxDyn(&[d])));
    }
    p.insert("out.ln.g", ArrayD::from_elem(IxDyn(&[d]), 1.0));
    p.insert("out.ln.b", ArrayD::zeros(IxDyn(&[d])));
    p.insert("out.w", init_mat(rng, &[d, cfg.out_token_dim()], 0.02));
    p.insert("out.b", ArrayD::zeros(IxDyn(&[cfg.out_token_dim()])));
    p
}

/// Weight names that receive low-rank adapters: all attention and MLP
/// projection matrices.
pub fn lora_target_weights(cfg: &NetConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.n_blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            names.push(format!("blocks.{l}.attn.{w}"));
        }
        names.push(format!("blocks.{l}.mlp.w1"));
        names.push(format!("blocks.{l}.mlp.w2"));
    }
    names
}

// ---- building blocks ----

/// Sinusoidal embedding of per-sample scalars; shape (n, dim). Constant
/// (not differentiated).
pub fn sin_embed(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[values.len(), dim]));
    for (i, &v) in values.iter().enumerate() {
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half as f64);
            out[[i, 2 * k]] = (v * freq * 100.0).sin();
            out[[i, 2 * k + 1]] = (v * freq * 100.0).cos();
        }
    }
    Tensor::new(out)
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let axis = x.shape().len() - 1;
    let mean = x.mean_axis_keep(axis);
    let centered = x.sub(&mean);
    let var = centered.sqr().mean_axis_keep(axis);
    centered
        .div(&var.add_scalar(1e-6).sqrt())
        .mul(g)
        .add(b)
}

struct Attention<'a> {
    wq: &'a Tensor,
    wq_b: &'a Tensor,
    wk: &'a Tensor,
    wk_b: &'a Tensor,
    wv: &'a Tensor,
    wv_b: &'a Tensor,
    wo: &'a Tensor,
    wo_b: &'a Tensor,
    n_heads: usize,
}

impl Attention<'_> {
    /// Multi-head attention; queries (B, Sq, d), keys/values (B, Sk, d).
    fn run(&self, queries: &Tensor, keys: &Tensor) -> Tensor {
        let (b, sq, d) = (queries.shape()[0], queries.shape()[1], queries.shape()[2]);
        let sk = keys.shape()[1];
        let h = self.n_heads;
        let dh = d / h;
        let split = |t: &Tensor, s: usize| {
            t.reshape(&[b, s, h, dh]).permute(&[0, 2, 1, 3]) // (B, H, S, dh)
        };
        let q = split(&queries.matmul(self.wq).add(self.wq_b), sq);
        let k = split(&keys.matmul(self.wk).add(self.wk_b), sk);
        let v = split(&keys.matmul(self.wv).add(self.wv_b), sk);
        let scores = q
            .matmul(&k.transpose_last2())
            .mul_scalar(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(3);
        let out = attn.matmul(&v); // (B, H, Sq, dh)
        let merged = out.permute(&[0, 2, 1, 3]).reshape(&[b, sq, d]);
        merged.matmul(self.wo).add(self.wo_b)
    }
}

fn block_attention<'a>(ws: &'a Binding, prefix: &str, n_heads: usize) -> Attention<'a> {
    Attention {
        wq: ws.get(&format!("{prefix}.wq")),
        wq_b: ws.get(&format!("{prefix}.wq_b")),
        wk: ws.get(&format!("{prefix}.wk")),
        wk_b: ws.get(&format!("{prefix}.wk_b")),
        wv: ws.get(&format!("{prefix}.wv")),
        wv_b: ws.get(&format!("{prefix}.wv_b")),
        wo: ws.get(&format!("{prefix}.wo")),
        wo_b: ws.get(&format!("{prefix}.wo_b")),
        n_heads,
    }
}

fn patchify(x: &Tensor, p: usize) -> Tensor {
    // (B, F, C, H, W) -> (B, F*h*w, C*p*p)
    let s = x.shape().to_vec();
    let (b, f, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (hp, wp) = (h / p, w / p);
    x.reshape(&[b, f, c, hp, p, wp, p])
        .permute(&[0, 1, 3, 5, 2, 4, 6])
        .reshape(&[b, f * hp * wp, c * p * p])
}

fn unpatchify(tokens: &Tensor, f: usize, c: usize, h: usize, w: usize, p: usize) -> Tensor {
    let b = tokens.shape()[0];
    let (hp, wp) = (h / p, w / p);
    tokens
        .reshape(&[b, f, hp, wp, c, p, p])
        .permute(&[0, 1, 4, 2, 5, 3, 6])
        .reshape(&[b, f, c, h, w])
}

/// Fixed 3D sinusoidal position code for (frame, row, col) patch positions.
fn position_code(f: usize, hp: usize, wp: usize, d: usize) -> Tensor {
    let frames: Vec<f64> = (0..f).map(|i| i as f64 * 0.07).collect();
    let rows: Vec<f64> = (0..hp).map(|i| i as f64 * 0.11).collect();
    let cols: Vec<f64> = (0..wp).map(|i| i as f64 * 0.13).collect();
    let fe = sin_embed(&frames, d);
    let re = sin_embed(&rows, d);
    let ce = sin_embed(&cols, d);
    let mut out = ArrayD::zeros(IxDyn(&[f * hp * wp, d]));
    for fi in 0..f {
        for ri in 0..hp {
            for ci in 0..wp {
                let tok = (fi * hp + ri) * wp + ci;
                for k in 0..d {
                    out[[tok, k]] =
                        fe.data()[[fi, k]] + re.data()[[ri, k]] + ce.data()[[ci, k]];
                }
            }
        }
    }
    Tensor::new(out)
}

/// Assemble backbone input: x_t, condition frame replicated along time, and
/// the binary mask channel.
fn assemble_input(cfg: &NetConfig, x_t: &Tensor, cond: Option<&Conditioning>) -> Tensor {
    let s = x_t.shape().to_vec();
    let (b, f, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (cond_frames, mask_channel) = match cond {
        Some(cd) => {
            let cf = cd
                .frame
                .reshape(&[b, 1, c, h, w])
                .broadcast_to(&[b, f, c, h, w]);
            let mut m = ArrayD::zeros(IxDyn(&[b, f, 1, h, w]));
            for (fi, &mv) in cd.mask.iter().enumerate() {
                m.index_axis_mut(ndarray::Axis(1), fi).fill(mv);
            }
            (cf, Tensor::new(m))
        }
        None => (
            Tensor::zeros(&[b, f, c, h, w]),
            Tensor::zeros(&[b, f, 1, h, w]),
        ),
    };
    debug_assert_eq!(cfg.channels, c);
    Tensor::concat(&[x_t.clone(), cond_frames, mask_channel], 2)
}

/// Forward pass of the velocity net. Returns the velocity prediction and,
/// when requested, the per-block token features (B, S, d).
pub fn velocity_forward(
    ws: &Binding,
    cfg: &NetConfig,
    x_t: &Tensor,
    ts: &[f64],
    cond: Option<&Conditioning>,
    want_features: bool,
) -> (Tensor, Vec<Tensor>) {
    let s = x_t.shape().to_vec();
    assert_eq!(s.len(), 5, "expected (b, f, c, h, w), got {s:?}");
    let (b, f, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let d = cfg.d_model;
    let input = assemble_input(cfg, x_t, cond);
    let tokens = patchify(&input, cfg.patch);
    let seq = tokens.shape()[1];
    let mut hdn = tokens.matmul(ws.get("embed.w")).add(ws.get("embed.b"));
    let pos = position_code(f, h / cfg.patch, w / cfg.patch, d).reshape(&[1, seq, d]);
    hdn = hdn.add(&pos);
    let ts_full: Vec<f64> = if ts.len() == 1 { vec![ts[0]; b] } else { ts.to_vec() };
    let temb = sin_embed(&ts_full, d).reshape(&[b, 1, d]);
    hdn = hdn.add(&temb);
    let mut features = Vec::new();
    for l in 0..cfg.n_blocks {
        let pre = layer_norm(
            &hdn,
            ws.get(&format!("blocks.{l}.ln1.g")),
            ws.get(&format!("blocks.{l}.ln1.b")),
        );
        let attn = block_attention(ws, &format!("blocks.{l}.attn"), cfg.n_heads);
        hdn = hdn.add(&attn.run(&pre, &pre));
        let pre2 = layer_norm(
            &hdn,
            ws.get(&format!("blocks.{l}.ln2.g")),
            ws.get(&format!("blocks.{l}.ln2.b")),
        );
        let mlp = pre2
            .matmul(ws.get(&format!("blocks.{l}.mlp.w1")))
            .add(ws.get(&format!("blocks.{l}.mlp.b1")))
            .gelu()
            .matmul(ws.get(&format!("blocks.{l}.mlp.w2")))
            .add(ws.get(&format!("blocks.{l}.mlp.b2")));
        hdn = hdn.add(&mlp);
        if want_features {
            features.push(hdn.clone());
        }
    }
    let out_tokens = layer_norm(&hdn, ws.get("out.ln.g"), ws.get("out.ln.b"))
        .matmul(ws.get("out.w"))
        .add(ws.get("out.b"));
    let out = unpatchify(&out_tokens, f, c, h, w, cfg.patch);
    (out, features)
}

/// A velocity net with parameters bound into the graph.
pub struct BoundNet {
    pub cfg: NetConfig,
    pub ws: Binding,
}

impl BoundNet {
    pub fn new(cfg: NetConfig, ws: Binding) -> Self {
        BoundNet { cfg, ws }
    }

    pub fn forward_with_features(
        &self,
        x_t: &Tensor,
        ts: &[f64],
        cond: Option<&Conditioning>,
    ) -> (Tensor, Vec<Tensor>) {
        velocity_forward(&self.ws, &self.cfg, x_t, ts, cond, true)
    }
}

impl Velocity for BoundNet {
    fn velocity(&self, x_t: &Tensor, ts: &[f64], cond: Option<&Conditioning>) -> Tensor {
        velocity_forward(&self.ws, &self.cfg, x_t, ts, cond, false).0
    }
}

// ---- LoRA ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
        }
    }
}

/// Fresh adapter parameters for the designated weights. `lora_a` gets a
/// small random init, `lora_b` is all zeros, so the adapted forward equals
/// the base forward at initialization.
pub fn lora_init(
    cfg: &NetConfig,
    base: &ParamMap,
    lora: &LoraConfig,
    rng: &mut PoseRng,
) -> Result<ParamMap> {
    if lora.rank < 1 {
        return Err(PoseError::InvalidArgument("lora rank must be >= 1".into()));
    }
    let mut p = ParamMap::new();
    for name in lora_target_weights(cfg) {
        let w = base
            .get(&name)
            .ok_or_else(|| PoseError::Missing(format!("base weight {name}")))?;
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        if lora.rank > d_in.min(d_out) {
            return Err(PoseError::InvalidArgument(format!(
                "lora rank {} exceeds min dim of {name} ({d_in}x{d_out})",
                lora.rank
            )));
        }
        p.insert(&format!("{name}.lora_a"), init_mat(rng, &[d_in, lora.rank], 0.02));
        p.insert(&format!("{name}.lora_b"), ArrayD::zeros(IxDyn(&[lora.rank, d_out])));
    }
    Ok(p)
}

/// Merge adapters into a bound weight map: `W + (alpha / rank) * A B`.
/// Base tensors stay frozen; gradients flow into the adapter leaves.
pub fn merge_lora(base: &Binding, adapters: &Binding, lora: &LoraConfig) -> Binding {
    let scale = lora.alpha / lora.rank as f64;
    let mut map = base.map.clone();
    for (name, w) in &base.map {
        let a_name = format!("{name}.lora_a");
        let b_name = format!("{name}.lora_b");
        if let (Some(a), Some(bm)) = (adapters.map.get(&a_name), adapters.map.get(&b_name)) {
            let delta = a.matmul(bm).mul_scalar(scale);
            map.insert(name.clone(), w.add(&delta));
        }
    }
    Binding { map }
}

// ---- EMA ----

/// A slowly trailing copy of a parameter set: `shadow <- d*shadow + (1-d)*live`.
#[derive(Clone)]
pub struct EmaShadow {
    pub decay: f64,
    pub params: ParamMap,
}

impl EmaShadow {
    pub fn new(decay: f64, init: ParamMap) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(PoseError::InvalidArgument(format!(
                "ema decay must lie in [0, 1], got {decay}"
            )));
        }
        Ok(EmaShadow {
            decay,
            params: init,
        })
    }

    pub fn update(&mut self, live: &ParamMap) -> Result<()> {
        let d = self.decay;
        for (name, shadow) in self.params.0.iter_mut() {
            let lv = live
                .get(name)
                .ok_or_else(|| PoseError::Missing(format!("live parameter {name}")))?;
            if lv.shape() != shadow.shape() {
                return Err(PoseError::ShapeMismatch(format!(
                    "ema parameter {name}: {:?} vs {:?}",
                    shadow.shape(),
                    lv.shape()
                )));
            }
            shadow.zip_mut_with(lv, |s, &l| *s = d * *s + (1.0 - d) * l);
        }
        Ok(())
    }
}

/// Refresh the discriminator backbone from the generator; the backbone is
/// never optimized directly.
pub fn backbone_refresh(generator: &ParamMap, shadow: &mut EmaShadow) -> Result<()> {
    shadow.update(generator)
}

// ---- semantic consistency discriminator head ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_queries: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_backbone_layers: usize,
    pub attr_dim: usize,
    /// condition token count = patches per frame
    pub cond_tokens: usize,
    pub cond_token_dim: usize,
}

impl HeadConfig {
    pub fn for_net(cfg: &NetConfig) -> Self {
        HeadConfig {
            n_queries: 16,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_backbone_layers: cfg.n_blocks,
            attr_dim: crate::data::SceneAttributes::DIM,
            cond_tokens: cfg.patches_per_frame(),
            cond_token_dim: cfg.channels * cfg.patch * cfg.patch,
        }
    }
}

/// Fresh parameters for the query-logit head.
pub fn init_semantic_head(cfg: &HeadConfig, rng: &mut PoseRng) -> ParamMap {
    let d = cfg.d_model;
    let mut p = ParamMap::new();
    p.insert("q", init_mat(rng, &[cfg.n_queries, d], 0.02));
    p.insert("cond.w", init_mat(rng, &[cfg.cond_token_dim, d], 0.02));
    p.insert("cond.b", ArrayD::zeros(IxDyn(&[d])));
    p.insert("attr.w", init_mat(rng, &[cfg.attr_dim, d], 0.02));
    p.insert("attr.b", ArrayD::zeros(IxDyn(&[d])));
    p.insert("modality.image", init_mat(rng, &[d], 0.02));
    p.insert("modality.text", init_mat(rng, &[d], 0.02));
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert(&format!("full.attn.{w}"), init_mat(rng, &[d, d], 0.02));
        p.insert(&format!("full.attn.{w}_b"), ArrayD::zeros(IxDyn(&[d])));
    }
    p.insert("full.ln.g", ArrayD::from_elem(IxDyn(&[d]), 1.0));
    p.insert("full.ln.b", ArrayD::zeros(IxDyn(&[d])));
    for l in 0..cfg.n_backbone_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("cross.{l}.attn.{w}"), init_mat(rng, &[d, d], 0.02));
            p.insert(&format!("cross.{l}.attn.{w}_b"), ArrayD::zeros(IxDyn(&[d])));
        }
        p.insert(&format!("cross.{l}.ln.g"), ArrayD::from_elem(IxDyn(&[d]), 1.0));
        p.insert(&format!("cross.{l}.ln.b"), ArrayD::zeros(IxDyn(&[d])));
    }
    p.insert(
        "final.w",
        init_mat(rng, &[cfg.n_queries * cfg.n_backbone_layers * d, 1], 0.02),
    );
    p.insert("final.b", ArrayD::zeros(IxDyn(&[1])));
    p
}

/// Run the semantic head over backbone features. Output shape (B,): one
/// scalar logit per batch element.
pub fn semantic_head_forward(
    ws: &Binding,
    cfg: &HeadConfig,
    features: &[Tensor],
    ts: &[f64],
    cond: &Conditioning,
) -> Result<Tensor> {
    if features.len() != cfg.n_backbone_layers {
        return Err(PoseError::Missing(format!(
            "expected {} backbone feature maps, got {}",
            cfg.n_backbone_layers,
            features.len()
        )));
    }
    let b = features[0].shape()[0];
    let d = cfg.d_model;
    let n = cfg.n_queries;
    // condition-frame embedding e_i: patchify the frame and project
    let cf = cond.frame.reshape(&[
        b,
        1,
        cond.frame.shape()[1],
        cond.frame.shape()[2],
        cond.frame.shape()[3],
    ]);
    let patch = (((cond.frame.shape()[2] * cond.frame.shape()[3]) / cfg.cond_tokens) as f64)
        .sqrt()
        .round() as usize;
    let cond_tokens = patchify(&cf, patch);
    let e_i = cond_tokens
        .matmul(ws.get("cond.w"))
        .add(ws.get("cond.b"))
        .add(&ws.get("modality.image").reshape(&[1, 1, d]));
    // attribute embedding e_t, tiled to the condition token count
    let mut attr = ArrayD::zeros(IxDyn(&[b, cfg.attr_dim]));
    for (i, a) in cond.attributes.iter().enumerate() {
        for (j, &v) in a.iter().enumerate() {
            attr[[i, j]] = v;
        }
    }
    let e_t = Tensor::new(attr)
        .matmul(ws.get("attr.w"))
        .add(ws.get("attr.b"))
        .reshape(&[b, 1, d])
        .broadcast_to(&[b, cfg.cond_tokens, d])
        .add(&ws.get("modality.text").reshape(&[1, 1, d]));
    // full attention over [q; e_i; e_t]
    let q = ws.get("q").reshape(&[1, n, d]).broadcast_to(&[b, n, d]);
    let joint = Tensor::concat(&[q, e_i, e_t], 1);
    let joint_norm = layer_norm(&joint, ws.get("full.ln.g"), ws.get("full.ln.b"));
    let full_attn = block_attention(ws, "full.attn", cfg.n_heads);
    let fused = joint.add(&full_attn.run(&joint_norm, &joint_norm));
    let mut q_proc = fused.narrow(1, 0, n);
    // per-backbone-layer cross attention with noise-level injection
    let ts_full: Vec<f64> = if ts.len() == 1 { vec![ts[0]; b] } else { ts.to_vec() };
    let temb = sin_embed(&ts_full, d).reshape(&[b, 1, d]);
    let mut processed = Vec::with_capacity(features.len());
    for (l, feat) in features.iter().enumerate() {
        let queries = layer_norm(
            &q_proc.add(&temb),
            ws.get(&format!("cross.{l}.ln.g")),
            ws.get(&format!("cross.{l}.ln.b")),
        );
        let attn = block_attention(ws, &format!("cross.{l}.attn"), cfg.n_heads);
        q_proc = q_proc.add(&attn.run(&queries, feat));
        processed.push(q_proc.clone());
    }
    // channel-wise concat of all processed queries, then project to a scalar
    let cat = Tensor::concat(&processed, 2); // (B, n, L*d)
    let flat = cat.reshape(&[b, n * features.len() * d]);
    let logit = flat.matmul(ws.get("final.w")).add(ws.get("final.b"));
    Ok(logit.reshape(&[b]))
}

/// Full discriminator: EMA backbone features + semantic head. Gradients
/// reach the head binding and the input; the backbone binding should be
/// frozen (non-trainable) by the caller.
pub fn discriminator_forward(
    backbone: &BoundNet,
    head_ws: &Binding,
    head_cfg: &HeadConfig,
    x_t: &Tensor,
    ts: &[f64],
    cond: &Conditioning,
) -> Result<Tensor> {
    let (_, features) = backbone.forward_with_features(x_t, ts, Some(cond));
    semantic_head_forward(head_ws, head_cfg, &features, ts, cond)
}

// ---- convolutional (pointwise) head for the ADD/DMD2 baselines ----

pub fn init_conv_head(d_model: usize, rng: &mut PoseRng) -> ParamMap {
    let mut p = ParamMap::new();
    p.insert("conv.w1", init_mat(rng, &[d_model, d_model], 0.02));
    p.insert("conv.b1", ArrayD::zeros(IxDyn(&[d_model])));
    p.insert("conv.w2", init_mat(rng, &[d_model, 1], 0.02));
    p.insert("conv.b2", ArrayD::zeros(IxDyn(&[1])));
    p
}

/// 1x1-conv style head: pointwise MLP over the last feature map, mean-pooled
/// over tokens. Output (B,).
pub fn conv_head_forward(ws: &Binding, features: &[Tensor]) -> Result<Tensor> {
    let feat = features
        .last()
        .ok_or_else(|| PoseError::Missing("backbone features".into()))?;
    let b = feat.shape()[0];
    let hidden = feat.matmul(ws.get("conv.w1")).add(ws.get("conv.b1")).relu();
    let logits = hidden.matmul(ws.get("conv.w2")).add(ws.get("conv.b2"));
    Ok(logits.mean_axis_keep(1).reshape(&[b]))
}
