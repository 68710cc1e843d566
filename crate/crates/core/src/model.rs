//! Minimal pre-norm transformer with adapter attachment and explicit backward.
//!
//! Activations are `d_model × N` matrices whose columns are token positions;
//! sequences in a batch are laid out back to back. Each block computes
//!
//! ```text
//! a  = LN1(x)
//! q, k, v = W_q a, W_k a, W_v a          (or one fused W_qkv a)
//! x' = x + W_o · MultiHead(q, k, v)
//! x''= x' + W_f · GELU(W_m · LN2(x'))
//! ```
//!
//! `W_o` is the attention output projection, `W_m` the feed-forward
//! up-projection and `W_f` the feed-forward down-projection. The classifier
//! head reads the final-norm representation of each sequence's first token;
//! the language-model head scores every position under a causal mask.
//!
//! Tensor names are public API, e.g. `block0.W_q`, `block0.W_q.adapter.A`,
//! `block1.W_qkv.merged.B2`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::{self, init_adapter, AdapterCache, AdapterConfig, AdapterParams};
use crate::error::{config_err, Error, Result};
use crate::linalg::{self, gaussian, matmul, matmul_nt, matmul_tn, Matrix, Rng};
use crate::merged_qkv::{self, init_merged, Channel, MergedAdapterParams, MergedCache};

const LN_EPS: f64 = 1e-5;

/// Gradients keyed by tensor name.
pub type Grads = BTreeMap<String, Matrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadKind {
    Classifier { n_classes: usize },
    Lm,
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub fused_qkv: bool,
    pub head: HeadKind,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelSpec {
    pub fn classifier(vocab_size: usize, d_model: usize, n_heads: usize, n_blocks: usize, n_classes: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            n_heads,
            n_blocks,
            d_ff: 2 * d_model,
            max_seq_len: 64,
            fused_qkv: false,
            head: HeadKind::Classifier { n_classes },
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let HeadKind::Classifier { n_classes } = self.head {
            if n_classes < 2 {
                return Err(config_err("classifier needs at least 2 classes"));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(config_err("model init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_outputs(&self) -> usize {
        match self.head {
            HeadKind::Classifier { n_classes } => n_classes,
            HeadKind::Lm => self.vocab_size,
        }
    }

    pub fn causal(&self) -> bool {
        self.head == HeadKind::Lm
    }
}

/// Dense weights that can host an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Weight {
    #[serde(rename = "W_q")]
    Q,
    #[serde(rename = "W_k")]
    K,
    #[serde(rename = "W_v")]
    V,
    #[serde(rename = "W_qkv")]
    Qkv,
    #[serde(rename = "W_o")]
    O,
    #[serde(rename = "W_m")]
    M,
    #[serde(rename = "W_f")]
    F,
}

impl Weight {
    pub fn name(self) -> &'static str {
        match self {
            Weight::Q => "W_q",
            Weight::K => "W_k",
            Weight::V => "W_v",
            Weight::Qkv => "W_qkv",
            Weight::O => "W_o",
            Weight::M => "W_m",
            Weight::F => "W_f",
        }
    }
}

/// One adaptable weight in one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub block: usize,
    pub weight: Weight,
}

impl Site {
    pub fn new(block: usize, weight: Weight) -> Self {
        Self { block, weight }
    }

    /// `block{i}.W_x`, also the base tensor name.
    pub fn layer_id(&self) -> String {
        format!("block{}.{}", self.block, self.weight.name())
    }

    pub fn parse(layer_id: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad layer id {layer_id:?}"));
        let rest = layer_id.strip_prefix("block").ok_or_else(bad)?;
        let (idx, w) = rest.split_once('.').ok_or_else(bad)?;
        let block = idx.parse().map_err(|_| bad())?;
        let weight = [Weight::Q, Weight::K, Weight::V, Weight::Qkv, Weight::O, Weight::M, Weight::F]
            .into_iter()
            .find(|x| x.name() == w)
            .ok_or_else(bad)?;
        Ok(Self { block, weight })
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.layer_id())
    }
}

/// Which weights receive adapters in every block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `W_q`, `W_v`, `W_m`, `W_o`. On a fused model, q and v share one
    /// stepwise adapter on `W_qkv`.
    Nlu,
    /// `W_q`, `W_k`, `W_v` through one stepwise adapter on the fused `W_qkv`,
    /// plus `W_f`. Requires `fused_qkv`.
    Nlg,
    Custom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub profile: Profile,
    /// Weights for [`Profile::Custom`]; ignored otherwise.
    pub sites: Vec<Weight>,
    /// Channels enabled on a custom `W_qkv` site (default all three).
    pub channels: Vec<Channel>,
}

impl Placement {
    pub fn nlu() -> Self {
        Self {
            profile: Profile::Nlu,
            sites: vec![],
            channels: vec![],
        }
    }

    pub fn nlg() -> Self {
        Self {
            profile: Profile::Nlg,
            sites: vec![],
            channels: vec![],
        }
    }

    pub fn custom(sites: Vec<Weight>) -> Self {
        Self {
            profile: Profile::Custom,
            sites,
            channels: vec![],
        }
    }

    /// Per-block `(weight, merged channels)` pairs for a given architecture.
    pub fn resolve(&self, spec: &ModelSpec) -> Result<Vec<(Weight, Vec<Channel>)>> {
        let out = match (&self.profile, spec.fused_qkv) {
            (Profile::Nlu, false) => vec![
                (Weight::Q, vec![]),
                (Weight::V, vec![]),
                (Weight::M, vec![]),
                (Weight::O, vec![]),
            ],
            (Profile::Nlu, true) => vec![
                (Weight::Qkv, vec![Channel::Q, Channel::V]),
                (Weight::M, vec![]),
                (Weight::O, vec![]),
            ],
            (Profile::Nlg, true) => vec![(Weight::Qkv, Channel::ALL.to_vec()), (Weight::F, vec![])],
            (Profile::Nlg, false) => return Err(config_err("the nlg profile requires fused_qkv = true")),
            (Profile::Custom, fused) => {
                if self.sites.is_empty() {
                    return Err(config_err("custom placement needs at least one site"));
                }
                let mut out = Vec::new();
                for &w in &self.sites {
                    let ok = match w {
                        Weight::Q | Weight::K | Weight::V => !fused,
                        Weight::Qkv => fused,
                        _ => true,
                    };
                    if !ok {
                        return Err(config_err(format!(
                            "site {} does not exist in a model with fused_qkv = {fused}",
                            w.name()
                        )));
                    }
                    let channels = if w == Weight::Qkv {
                        if self.channels.is_empty() {
                            Channel::ALL.to_vec()
                        } else {
                            self.channels.clone()
                        }
                    } else {
                        vec![]
                    };
                    out.push((w, channels));
                }
                out
            }
        };
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttachedAdapter {
    Plain(AdapterParams),
    Merged(MergedAdapterParams),
}

impl AttachedAdapter {
    fn delta(&self) -> Result<Matrix> {
        match self {
            AttachedAdapter::Plain(p) => adapter::delta_weight(p),
            AttachedAdapter::Merged(p) => merged_qkv::delta_weight_merged(p),
        }
    }

    /// Name infix: `adapter` for plain, `merged` for stepwise adapters.
    pub fn infix(&self) -> &'static str {
        match self {
            AttachedAdapter::Plain(_) => "adapter",
            AttachedAdapter::Merged(_) => "merged",
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        match self {
            AttachedAdapter::Plain(p) => &p.config,
            AttachedAdapter::Merged(p) => &p.config,
        }
    }

    pub fn channels(&self) -> &[Channel] {
        match self {
            AttachedAdapter::Plain(_) => &[],
            AttachedAdapter::Merged(p) => &p.enabled,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            AttachedAdapter::Plain(p) => p.tensors().into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
            AttachedAdapter::Merged(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            AttachedAdapter::Plain(p) => p.tensors_mut().into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
            AttachedAdapter::Merged(p) => p.tensors_mut(),
        }
    }

    pub fn stored_entries(&self) -> usize {
        match self {
            AttachedAdapter::Plain(p) => p.stored_entries(),
            AttachedAdapter::Merged(p) => p.stored_entries(),
        }
    }
}

/// Which tensors the optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trainability {
    /// Base weights, embeddings and (unless `norms`) layer norms are frozen.
    pub frozen_base: bool,
    /// Head trains even when the base is frozen.
    pub head: bool,
    /// Layer norms train even when the base is frozen.
    pub norms: bool,
}

impl Default for Trainability {
    fn default() -> Self {
        Self {
            frozen_base: false,
            head: true,
            norms: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Norm,
    Weight,
    HeadWeight,
    HeadBias,
    Adapter,
}

impl TensorKind {
    pub fn of(name: &str) -> TensorKind {
        if name.contains(".adapter.") || name.contains(".merged.") {
            TensorKind::Adapter
        } else if name.starts_with("embed.") {
            TensorKind::Embedding
        } else if name == "head.W" {
            TensorKind::HeadWeight
        } else if name == "head.b" {
            TensorKind::HeadBias
        } else if name.contains("ln") {
            TensorKind::Norm
        } else {
            TensorKind::Weight
        }
    }

    /// Decoupled weight decay applies to matrices, not to norms or biases.
    pub fn decays(self) -> bool {
        !matches!(self, TensorKind::Norm | TensorKind::HeadBias)
    }
}

/// Training-mode forwards draw adapter dropout from the given stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    base: BTreeMap<String, Matrix>,
    adapters: BTreeMap<Site, AttachedAdapter>,
    merged: bool,
    pub trainability: Trainability,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
enum SiteCache {
    Plain(AdapterCache),
    Merged(MergedCache),
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LnCache,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row-major `T × T` attention probabilities per (sequence, head).
    probs: Vec<Vec<f64>>,
    ctx: Matrix,
    ln2: LnCache,
    b: Matrix,
    u: Matrix,
    z: Matrix,
    sites: BTreeMap<Weight, SiteCache>,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    seqs: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    head_cols: Vec<usize>,
    head_in: Matrix,
    n_outputs: usize,
    merged: bool,
}

impl ForwardCache {
    /// `(offset, length)` of each sequence in the column layout.
    pub fn sequences(&self) -> &[(usize, usize)] {
        &self.seqs
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `n_classes × batch` for classifiers, `vocab × N` for the LM head.
    pub logits: Matrix,
    pub cache: ForwardCache,
    /// Attention probabilities per (block, sequence, head), row-major `T × T`.
    pub attention: Vec<Vec<Vec<f64>>>,
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Per-column layer norm with gain `g` and bias `b` (`d × 1`).
fn layer_norm(x: &Matrix, g: &Matrix, b: &Matrix) -> Result<(Matrix, LnCache)> {
    let (d, n) = x.shape();
    let mut mean = vec![0.0; n];
    for i in 0..d {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f64);
    let mut var = vec![0.0; n];
    for i in 0..d {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / d as f64 + LN_EPS).sqrt()).collect();
    let mut xhat = Matrix::zeros(d, n);
    let mut y = Matrix::zeros(d, n);
    for i in 0..d {
        let (gi, bi) = (g.get(i, 0), b.get(i, 0));
        for j in 0..n {
            let h = (x.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, h);
            y.set(i, j, gi * h + bi);
        }
    }
    y.check_finite("layer_norm")?;
    Ok((y, LnCache { xhat, inv_std }))
}

/// Returns `(dx, dg, db)`.
fn layer_norm_backward(cache: &LnCache, g: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let (d, n) = dy.shape();
    let mut dg = Matrix::zeros(d, 1);
    let mut db = Matrix::zeros(d, 1);
    let mut dxhat = Matrix::zeros(d, n);
    for i in 0..d {
        let gi = g.get(i, 0);
        let (mut sg, mut sb) = (0.0, 0.0);
        for j in 0..n {
            let dyij = dy.get(i, j);
            sg += dyij * cache.xhat.get(i, j);
            sb += dyij;
            dxhat.set(i, j, dyij * gi);
        }
        dg.set(i, 0, sg);
        db.set(i, 0, sb);
    }
    let mut mean_dxhat = vec![0.0; n];
    let mut mean_dxhat_xhat = vec![0.0; n];
    for i in 0..d {
        for j in 0..n {
            mean_dxhat[j] += dxhat.get(i, j);
            mean_dxhat_xhat[j] += dxhat.get(i, j) * cache.xhat.get(i, j);
        }
    }
    let mut dx = Matrix::zeros(d, n);
    for i in 0..d {
        for j in 0..n {
            let v = cache.inv_std[j]
                * (dxhat.get(i, j) - mean_dxhat[j] / d as f64 - cache.xhat.get(i, j) * mean_dxhat_xhat[j] / d as f64);
            dx.set(i, j, v);
        }
    }
    dx.check_finite("layer_norm_backward")?;
    Ok((dx, dg, db))
}

fn accumulate(grads: &mut Grads, name: String, g: Matrix) -> Result<()> {
    match grads.get_mut(&name) {
        Some(existing) => existing.add_assign(&g),
        None => {
            grads.insert(name, g);
            Ok(())
        }
    }
}

impl Model {
    /// Builds a randomly initialized model. Draw order: `embed.tok`,
    /// `embed.pos`, then per block `W_q`, `W_k`, `W_v` (or `W_qkv`), `W_o`,
    /// `W_m`, `W_f`, then `head.W`. Norm gains start at one, biases at zero.
    pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut model = Self::skeleton(spec)?;
        let std = spec.init_std;
        let d = spec.d_model;
        let mut draw = |name: String, rows: usize, cols: usize, model: &mut Model| -> Result<()> {
            model.base.insert(name, gaussian(rng, rows, cols, std)?);
            Ok(())
        };
        draw("embed.tok".into(), d, spec.vocab_size, &mut model)?;
        draw("embed.pos".into(), d, spec.max_seq_len, &mut model)?;
        for blk in 0..spec.n_blocks {
            if spec.fused_qkv {
                draw(format!("block{blk}.W_qkv"), 3 * d, d, &mut model)?;
            } else {
                for w in ["W_q", "W_k", "W_v"] {
                    draw(format!("block{blk}.{w}"), d, d, &mut model)?;
                }
            }
            draw(format!("block{blk}.W_o"), d, d, &mut model)?;
            draw(format!("block{blk}.W_m"), spec.d_ff, d, &mut model)?;
            draw(format!("block{blk}.W_f"), d, spec.d_ff, &mut model)?;
        }
        draw("head.W".into(), spec.n_outputs(), d, &mut model)?;
        Ok(model)
    }

    /// All base tensors at their shapes, weights zero, norm gains one.
    pub fn skeleton(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let mut base = BTreeMap::new();
        let ones = Matrix::from_vec(d, 1, vec![1.0; d])?;
        base.insert("embed.tok".to_string(), Matrix::zeros(d, spec.vocab_size));
        base.insert("embed.pos".to_string(), Matrix::zeros(d, spec.max_seq_len));
        for blk in 0..spec.n_blocks {
            for ln in ["ln1", "ln2"] {
                base.insert(format!("block{blk}.{ln}.g"), ones.clone());
                base.insert(format!("block{blk}.{ln}.b"), Matrix::zeros(d, 1));
            }
            if spec.fused_qkv {
                base.insert(format!("block{blk}.W_qkv"), Matrix::zeros(3 * d, d));
            } else {
                for w in ["W_q", "W_k", "W_v"] {
                    base.insert(format!("block{blk}.{w}"), Matrix::zeros(d, d));
                }
            }
            base.insert(format!("block{blk}.W_o"), Matrix::zeros(d, d));
            base.insert(format!("block{blk}.W_m"), Matrix::zeros(spec.d_ff, d));
            base.insert(format!("block{blk}.W_f"), Matrix::zeros(d, spec.d_ff));
        }
        base.insert("final.ln.g".to_string(), ones);
        base.insert("final.ln.b".to_string(), Matrix::zeros(d, 1));
        base.insert("head.W".to_string(), Matrix::zeros(spec.n_outputs(), d));
        base.insert("head.b".to_string(), Matrix::zeros(spec.n_outputs(), 1));
        Ok(Self {
            spec: spec.clone(),
            base,
            adapters: BTreeMap::new(),
            merged: false,
            trainability: Trainability::default(),
        })
    }

    fn w(&self, name: &str) -> Result<&Matrix> {
        self.base
            .get(name)
            .ok_or_else(|| Error::State(format!("missing tensor {name}")))
    }

    pub fn adapters(&self) -> &BTreeMap<Site, AttachedAdapter> {
        &self.adapters
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Base tensors in name order.
    pub fn base_tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.base
    }

    /// Every tensor in canonical order: base tensors by name, then adapter
    /// tensors by site.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self.base.iter().map(|(n, m)| (n.clone(), m)).collect();
        for (site, ad) in &self.adapters {
            let prefix = format!("{}.{}", site.layer_id(), ad.infix());
            for (n, m) in ad.tensors() {
                out.push((format!("{prefix}.{n}"), m));
            }
        }
        out
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix) -> Result<()>) -> Result<()> {
        for (n, m) in &mut self.base {
            f(n, m)?;
        }
        for (site, ad) in &mut self.adapters {
            let prefix = format!("{}.{}", site.layer_id(), ad.infix());
            for (n, m) in ad.tensors_mut() {
                f(&format!("{prefix}.{n}"), m)?;
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        if let Some(m) = self.base.get(name) {
            return Some(m);
        }
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let mut slot = Some(value);
        self.for_each_tensor_mut(|n, m| {
            if n == name {
                let v = slot.take().expect("tensor names are unique");
                if v.shape() != m.shape() {
                    return Err(Error::Shape {
                        op: "set_tensor",
                        lhs: m.shape(),
                        rhs: v.shape(),
                    });
                }
                *m = v;
            }
            Ok(())
        })?;
        if slot.is_some() {
            return Err(Error::Input(format!("unknown tensor {name}")));
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        let t = &self.trainability;
        match TensorKind::of(name) {
            TensorKind::Adapter => true,
            TensorKind::HeadWeight | TensorKind::HeadBias => !t.frozen_base || t.head,
            TensorKind::Norm => !t.frozen_base || t.norms,
            TensorKind::Embedding | TensorKind::Weight => !t.frozen_base,
        }
    }

    pub fn total_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Attaches one adapter. A non-empty `channels` list (or a `W_qkv`
    /// site) selects the stepwise merged adapter. Freezes the base.
    pub fn attach_site(&mut self, site: Site, config: &AdapterConfig, channels: &[Channel], rng: &mut Rng) -> Result<()> {
        if self.merged {
            return Err(Error::State("cannot attach adapters to a merged model".into()));
        }
        if site.block >= self.spec.n_blocks {
            return Err(config_err(format!("unknown site {site}: model has {} blocks", self.spec.n_blocks)));
        }
        let layer = site.layer_id();
        let (d, k) = self
            .base
            .get(&layer)
            .map(|m| m.shape())
            .ok_or_else(|| config_err(format!("unknown site {layer}")))?;
        if self.adapters.contains_key(&site) {
            return Err(config_err(format!("site {layer} already has an adapter")));
        }
        let attached = if site.weight == Weight::Qkv {
            let channels = if channels.is_empty() { &Channel::ALL[..] } else { channels };
            AttachedAdapter::Merged(init_merged(config, d / 3, k, channels, rng)?)
        } else {
            if !channels.is_empty() {
                return Err(config_err(format!("channels only apply to W_qkv, not {layer}")));
            }
            AttachedAdapter::Plain(init_adapter(config, d, k, rng)?)
        };
        self.adapters.insert(site, attached);
        self.trainability.frozen_base = true;
        Ok(())
    }

    /// Attaches adapters at every block for the placement. Returns the number
    /// attached.
    pub fn attach_adapters(&mut self, placement: &Placement, config: &AdapterConfig, rng: &mut Rng) -> Result<usize> {
        let sites = placement.resolve(&self.spec)?;
        for blk in 0..self.spec.n_blocks {
            for (w, ch) in &sites {
                self.attach_site(Site::new(blk, *w), config, ch, rng)?;
            }
        }
        Ok(self.spec.n_blocks * sites.len())
    }

    /// Folds every `ΔW` into its host weight; adapters become inactive.
    pub fn merge_all(&mut self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::State("no adapters to merge".into()));
        }
        if self.merged {
            return Err(Error::State("adapters are already merged".into()));
        }
        for (site, ad) in &self.adapters {
            let delta = ad.delta()?;
            let w = self.base.get_mut(&site.layer_id()).expect("site validated at attach");
            w.add_assign(&delta)?;
        }
        self.merged = true;
        Ok(())
    }

    /// Subtracts every `ΔW` again and reactivates the adapters.
    pub fn unmerge_all(&mut self) -> Result<()> {
        if !self.merged {
            return Err(Error::State("adapters are not merged".into()));
        }
        for (site, ad) in &self.adapters {
            let delta = ad.delta()?;
            let w = self.base.get_mut(&site.layer_id()).expect("site validated at attach");
            w.axpy(-1.0, &delta)?;
        }
        self.merged = false;
        Ok(())
    }

    /// Merges (if needed) and drops the adapters, leaving a plain model.
    pub fn fold_adapters(&mut self) -> Result<()> {
        if !self.merged {
            self.merge_all()?;
        }
        self.adapters.clear();
        self.merged = false;
        Ok(())
    }

    pub(crate) fn set_merged_flag(&mut self, merged: bool) {
        self.merged = merged;
    }

    fn site_forward(
        &self,
        block: usize,
        weight: Weight,
        input: &Matrix,
        rng: &mut Option<&mut Rng>,
        caches: &mut BTreeMap<Weight, SiteCache>,
    ) -> Result<Matrix> {
        let site = Site::new(block, weight);
        let mut y = matmul(self.w(&site.layer_id())?, input)?;
        if self.merged {
            return Ok(y);
        }
        if let Some(ad) = self.adapters.get(&site) {
            let (delta, cache) = match ad {
                AttachedAdapter::Plain(p) => {
                    let (o, c) = adapter::forward_with_cache(p, input, rng.as_deref_mut())?;
                    (o, SiteCache::Plain(c))
                }
                AttachedAdapter::Merged(p) => {
                    let (o, c) = merged_qkv::forward_merged_with_cache(p, input, rng.as_deref_mut())?;
                    (o, SiteCache::Merged(c))
                }
            };
            y.add_assign(&delta)?;
            caches.insert(weight, cache);
        }
        Ok(y)
    }

    /// Gradient flowing into the site input; weight and adapter gradients are
    /// added to `grads` for trainable tensors.
    fn site_backward(
        &self,
        block: usize,
        weight: Weight,
        input: &Matrix,
        dy: &Matrix,
        caches: &BTreeMap<Weight, SiteCache>,
        grads: &mut Grads,
    ) -> Result<Matrix> {
        let site = Site::new(block, weight);
        let name = site.layer_id();
        let w = self.w(&name)?;
        if self.is_trainable(&name) {
            accumulate(grads, name.clone(), matmul_nt(dy, input)?)?;
        }
        let mut dx = matmul_tn(w, dy)?;
        if let (Some(ad), Some(cache)) = (self.adapters.get(&site), caches.get(&weight)) {
            let prefix = format!("{name}.{}", ad.infix());
            match (ad, cache) {
                (AttachedAdapter::Plain(p), SiteCache::Plain(c)) => {
                    let (g, gx) = adapter::backward_with_cache(p, c, dy)?;
                    accumulate(grads, format!("{prefix}.A"), g.a)?;
                    accumulate(grads, format!("{prefix}.B"), g.b)?;
                    if let Some(c) = g.c {
                        accumulate(grads, format!("{prefix}.C"), c)?;
                    }
                    if let Some(d) = g.d {
                        accumulate(grads, format!("{prefix}.D"), d)?;
                    }
                    dx.add_assign(&gx)?;
                }
                (AttachedAdapter::Merged(p), SiteCache::Merged(c)) => {
                    let (g, gx) = merged_qkv::backward_merged_with_cache(p, c, dy)?;
                    accumulate(grads, format!("{prefix}.A"), g.a)?;
                    for (ch, b) in p.enabled.iter().zip(g.b_blocks) {
                        accumulate(grads, format!("{prefix}.B{}", ch.index()), b)?;
                    }
                    if let Some(c) = g.c {
                        accumulate(grads, format!("{prefix}.C"), c)?;
                    }
                    if let Some(d) = g.d {
                        accumulate(grads, format!("{prefix}.D"), d)?;
                    }
                    dx.add_assign(&gx)?;
                }
                _ => return Err(Error::State(format!("adapter cache mismatch at {name}"))),
            }
        }
        Ok(dx)
    }

    fn layout(&self, batch: &[Vec<u32>]) -> Result<(Vec<(usize, usize)>, Vec<u32>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut seqs = Vec::with_capacity(batch.len());
        let mut tokens = Vec::new();
        for s in batch {
            if s.is_empty() || s.len() > self.spec.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence length {} outside [1, {}]",
                    s.len(),
                    self.spec.max_seq_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} out of range for vocab size {}",
                    self.spec.vocab_size
                )));
            }
            seqs.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Ok((seqs, tokens))
    }

    /// Runs the model on a batch of token sequences.
    pub fn forward(&self, batch: &[Vec<u32>], mode: Mode<'_>) -> Result<Forward> {
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let (seqs, tokens) = self.layout(batch)?;
        let spec = &self.spec;
        let d = spec.d_model;
        let n = tokens.len();

        let tok_emb = self.w("embed.tok")?;
        let pos_emb = self.w("embed.pos")?;
        let mut x = Matrix::zeros(d, n);
        for &(off, len) in &seqs {
            for t in 0..len {
                let tok = tokens[off + t] as usize;
                for i in 0..d {
                    x.set(i, off + t, tok_emb.get(i, tok) + pos_emb.get(i, t));
                }
            }
        }

        let mut blocks = Vec::with_capacity(spec.n_blocks);
        let mut attention = Vec::with_capacity(spec.n_blocks);
        for blk in 0..spec.n_blocks {
            let mut sites = BTreeMap::new();
            let (a, ln1) = layer_norm(&x, self.w(&format!("block{blk}.ln1.g"))?, self.w(&format!("block{blk}.ln1.b"))?)?;
            let (q, k, v) = if spec.fused_qkv {
                let qkv = self.site_forward(blk, Weight::Qkv, &a, &mut rng, &mut sites)?;
                (qkv.slice_rows(0, d)?, qkv.slice_rows(d, 2 * d)?, qkv.slice_rows(2 * d, 3 * d)?)
            } else {
                (
                    self.site_forward(blk, Weight::Q, &a, &mut rng, &mut sites)?,
                    self.site_forward(blk, Weight::K, &a, &mut rng, &mut sites)?,
                    self.site_forward(blk, Weight::V, &a, &mut rng, &mut sites)?,
                )
            };
            let (ctx, probs) = self.attention(&q, &k, &v, &seqs)?;
            let o = self.site_forward(blk, Weight::O, &ctx, &mut rng, &mut sites)?;
            let mut x2 = x.clone();
            x2.add_assign(&o)?;
            let (b, ln2) = layer_norm(&x2, self.w(&format!("block{blk}.ln2.g"))?, self.w(&format!("block{blk}.ln2.b"))?)?;
            let u = self.site_forward(blk, Weight::M, &b, &mut rng, &mut sites)?;
            let z = u.map(gelu)?;
            let f = self.site_forward(blk, Weight::F, &z, &mut rng, &mut sites)?;
            let mut x3 = x2;
            x3.add_assign(&f)?;
            attention.push(probs.clone());
            blocks.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                b,
                u,
                z,
                sites,
            });
            x = x3;
        }

        let (y, final_ln) = layer_norm(&x, self.w("final.ln.g")?, self.w("final.ln.b")?)?;
        let head_cols: Vec<usize> = match spec.head {
            HeadKind::Classifier { .. } => seqs.iter().map(|&(off, _)| off).collect(),
            HeadKind::Lm => (0..n).collect(),
        };
        let head_in = if spec.causal() { y } else { y.select_cols(&head_cols)? };
        let mut logits = matmul(self.w("head.W")?, &head_in)?;
        let hb = self.w("head.b")?;
        for i in 0..logits.rows() {
            let bi = hb.get(i, 0);
            logits.row_mut(i).iter_mut().for_each(|v| *v += bi);
        }
        logits.check_finite("head")?;
        Ok(Forward {
            logits,
            cache: ForwardCache {
                seqs,
                tokens,
                blocks,
                final_ln,
                head_cols,
                head_in,
                n_outputs: spec.n_outputs(),
                merged: self.merged,
            },
            attention,
        })
    }

    fn attention(&self, q: &Matrix, k: &Matrix, v: &Matrix, seqs: &[(usize, usize)]) -> Result<(Matrix, Vec<Vec<f64>>)> {
        let spec = &self.spec;
        let dk = spec.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut ctx = Matrix::zeros(spec.d_model, q.cols());
        let mut probs = Vec::with_capacity(seqs.len() * spec.n_heads);
        for &(off, len) in seqs {
            for h in 0..spec.n_heads {
                let rows = h * dk..(h + 1) * dk;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let visible = if spec.causal() { i + 1 } else { len };
                    let row = &mut p[i * len..(i + 1) * len];
                    for (j, s) in row.iter_mut().enumerate().take(visible) {
                        *s = rows.clone().map(|c| q.get(c, off + i) * k.get(c, off + j)).sum::<f64>() * scale;
                    }
                    let max = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in &mut row[..visible] {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    for s in &mut row[..visible] {
                        *s /= total;
                    }
                    for c in rows.clone() {
                        let acc: f64 = (0..visible).map(|j| row[j] * v.get(c, off + j)).sum();
                        ctx.set(c, off + i, acc);
                    }
                }
                probs.push(p);
            }
        }
        ctx.check_finite("attention")?;
        Ok((ctx, probs))
    }

    /// Returns `(dq, dk, dv)`.
    fn attention_backward(&self, cache: &BlockCache, dctx: &Matrix, seqs: &[(usize, usize)]) -> Result<(Matrix, Matrix, Matrix)> {
        let spec = &self.spec;
        let dk_dim = spec.head_dim();
        let scale = 1.0 / (dk_dim as f64).sqrt();
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let mut dq = Matrix::zeros(q.rows(), q.cols());
        let mut dk = Matrix::zeros(k.rows(), k.cols());
        let mut dv = Matrix::zeros(v.rows(), v.cols());
        let mut idx = 0;
        for &(off, len) in seqs {
            for h in 0..spec.n_heads {
                let rows = h * dk_dim..(h + 1) * dk_dim;
                let p = &cache.probs[idx];
                idx += 1;
                let mut ds = vec![0.0; len * len];
                for i in 0..len {
                    let prow = &p[i * len..(i + 1) * len];
                    let dp: Vec<f64> = (0..len)
                        .map(|j| rows.clone().map(|c| dctx.get(c, off + i) * v.get(c, off + j)).sum())
                        .collect();
                    let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        ds[i * len + j] = prow[j] * (dp[j] - dot);
                    }
                    for c in rows.clone() {
                        let g = dctx.get(c, off + i);
                        for (j, &pij) in prow.iter().enumerate() {
                            let cur = dv.get(c, off + j);
                            dv.set(c, off + j, cur + pij * g);
                        }
                    }
                }
                for c in rows.clone() {
                    for i in 0..len {
                        let acc: f64 = (0..len).map(|j| ds[i * len + j] * k.get(c, off + j)).sum();
                        dq.set(c, off + i, dq.get(c, off + i) + acc * scale);
                    }
                    for j in 0..len {
                        let acc: f64 = (0..len).map(|i| ds[i * len + j] * q.get(c, off + i)).sum();
                        dk.set(c, off + j, dk.get(c, off + j) + acc * scale);
                    }
                }
            }
        }
        Ok((dq, dk, dv))
    }

    /// Gradients of every trainable tensor given `dlogits`, the gradient of
    /// the loss with respect to the logits of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Grads> {
        if cache.merged != self.merged || cache.blocks.len() != self.spec.n_blocks {
            return Err(Error::State("forward cache does not belong to this model state".into()));
        }
        if dlogits.shape() != (cache.n_outputs, cache.head_in.cols()) {
            return Err(Error::Shape {
                op: "backward",
                lhs: (cache.n_outputs, cache.head_in.cols()),
                rhs: dlogits.shape(),
            });
        }
        let spec = &self.spec;
        let d = spec.d_model;
        let n = cache.tokens.len();
        let mut grads = Grads::new();

        if self.is_trainable("head.W") {
            accumulate(&mut grads, "head.W".into(), matmul_nt(dlogits, &cache.head_in)?)?;
            accumulate(&mut grads, "head.b".into(), dlogits.row_sums())?;
        }
        let dhead_in = matmul_tn(self.w("head.W")?, dlogits)?;
        let mut dy = Matrix::zeros(d, n);
        for (src, &col) in cache.head_cols.iter().enumerate() {
            for i in 0..d {
                dy.set(i, col, dy.get(i, col) + dhead_in.get(i, src));
            }
        }
        let (mut dx, dg, db) = layer_norm_backward(&cache.final_ln, self.w("final.ln.g")?, &dy)?;
        if self.is_trainable("final.ln.g") {
            accumulate(&mut grads, "final.ln.g".into(), dg)?;
            accumulate(&mut grads, "final.ln.b".into(), db)?;
        }

        for blk in (0..spec.n_blocks).rev() {
            let bc = &cache.blocks[blk];
            // feed-forward branch
            let dz = self.site_backward(blk, Weight::F, &bc.z, &dx, &bc.sites, &mut grads)?;
            let du = Matrix::from_fn(dz.rows(), dz.cols(), |i, j| dz.get(i, j) * gelu_grad(bc.u.get(i, j)))?;
            let db_in = self.site_backward(blk, Weight::M, &bc.b, &du, &bc.sites, &mut grads)?;
            let g2 = format!("block{blk}.ln2.g");
            let (dln2, dg2, db2) = layer_norm_backward(&bc.ln2, self.w(&g2)?, &db_in)?;
            if self.is_trainable(&g2) {
                accumulate(&mut grads, g2, dg2)?;
                accumulate(&mut grads, format!("block{blk}.ln2.b"), db2)?;
            }
            let mut dx2 = dx;
            dx2.add_assign(&dln2)?;

            // attention branch
            let dctx = self.site_backward(blk, Weight::O, &bc.ctx, &dx2, &bc.sites, &mut grads)?;
            let (dq, dk, dv) = self.attention_backward(bc, &dctx, &cache.seqs)?;
            let da = if spec.fused_qkv {
                let dqkv = Matrix::vstack(&[&dq, &dk, &dv])?;
                self.site_backward(blk, Weight::Qkv, &bc.a, &dqkv, &bc.sites, &mut grads)?
            } else {
                let mut da = self.site_backward(blk, Weight::Q, &bc.a, &dq, &bc.sites, &mut grads)?;
                da.add_assign(&self.site_backward(blk, Weight::K, &bc.a, &dk, &bc.sites, &mut grads)?)?;
                da.add_assign(&self.site_backward(blk, Weight::V, &bc.a, &dv, &bc.sites, &mut grads)?)?;
                da
            };
            let g1 = format!("block{blk}.ln1.g");
            let (dln1, dg1, db1) = layer_norm_backward(&bc.ln1, self.w(&g1)?, &da)?;
            if self.is_trainable(&g1) {
                accumulate(&mut grads, g1, dg1)?;
                accumulate(&mut grads, format!("block{blk}.ln1.b"), db1)?;
            }
            dx2.add_assign(&dln1)?;
            dx = dx2;
        }

        if self.is_trainable("embed.tok") {
            let mut dtok = Matrix::zeros(d, spec.vocab_size);
            let mut dpos = Matrix::zeros(d, spec.max_seq_len);
            for &(off, len) in &cache.seqs {
                for t in 0..len {
                    let tok = cache.tokens[off + t] as usize;
                    for i in 0..d {
                        let g = dx.get(i, off + t);
                        dtok.set(i, tok, dtok.get(i, tok) + g);
                        dpos.set(i, t, dpos.get(i, t) + g);
                    }
                }
            }
            accumulate(&mut grads, "embed.tok".into(), dtok)?;
            accumulate(&mut grads, "embed.pos".into(), dpos)?;
        }
        Ok(grads)
    }

    /// Eval-mode logits.
    pub fn logits(&self, batch: &[Vec<u32>]) -> Result<Matrix> {
        Ok(self.forward(batch, Mode::Eval)?.logits)
    }
}

/// Column-wise argmax.
pub fn argmax_cols(logits: &Matrix) -> Vec<usize> {
    (0..logits.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..logits.rows() {
                if logits.get(i, j) > logits.get(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Largest absolute difference between the base tensors of two models.
pub fn weight_diff(a: &Model, b: &Model) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for ((na, ma), (nb, mb)) in a.base.iter().zip(&b.base) {
        if na != nb {
            return Err(Error::State(format!("tensor sets differ at {na} / {nb}")));
        }
        worst = worst.max(linalg::sub(ma, mb)?.max_abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterVariant;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            vocab_size: 32,
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 64,
            max_seq_len: 16,
            fused_qkv: false,
            head: HeadKind::Classifier { n_classes: 2 },
            init_std: 0.02,
        }
    }

    fn batch(rng: &mut Rng, b: usize, t: usize, vocab: usize) -> Vec<Vec<u32>> {
        (0..b).map(|_| (0..t).map(|_| rng.below(vocab) as u32).collect()).collect()
    }

    #[test]
    fn logits_shape_and_determinism() {
        let spec = small_spec();
        let m = Model::build(&spec, &mut Rng::new(1)).unwrap();
        let m2 = Model::build(&spec, &mut Rng::new(1)).unwrap();
        assert_eq!(m.named_tensors(), m2.named_tensors());
        let toks = batch(&mut Rng::new(2), 3, 8, 32);
        let f = m.forward(&toks, Mode::Eval).unwrap();
        assert_eq!(f.logits.shape(), (2, 3));
        for blk in &f.attention {
            for p in blk {
                for row in p.chunks(8) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_and_tokens() {
        let mut spec = small_spec();
        spec.n_heads = 5;
        assert!(Model::build(&spec, &mut Rng::new(0)).is_err());
        let m = Model::build(&small_spec(), &mut Rng::new(0)).unwrap();
        assert!(matches!(m.forward(&[vec![1, 32]], Mode::Eval), Err(Error::Input(_))));
        assert!(m.forward(&[vec![0; 17]], Mode::Eval).is_err());
        assert!(m.forward(&[], Mode::Eval).is_err());
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let spec = ModelSpec {
            vocab_size: 3,
            d_model: 2,
            n_heads: 1,
            n_blocks: 1,
            d_ff: 2,
            max_seq_len: 1,
            fused_qkv: false,
            head: HeadKind::Classifier { n_classes: 2 },
            init_std: 0.5,
        };
        let m = Model::build(&spec, &mut Rng::new(3)).unwrap();
        let f = m.forward(&[vec![1]], Mode::Eval).unwrap();
        let bc = &f.cache.blocks[0];
        assert_eq!(bc.probs[0], vec![1.0]);
        assert_eq!(bc.ctx, bc.v);
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let mut spec = small_spec();
        spec.head = HeadKind::Lm;
        spec.init_std = 0.3;
        let m = Model::build(&spec, &mut Rng::new(4)).unwrap();
        let a = vec![1, 2, 3, 4, 5, 6];
        let mut b = a.clone();
        b[4] = 9;
        let la = m.logits(&[a]).unwrap();
        let lb = m.logits(&[b]).unwrap();
        for t in 0..4 {
            for i in 0..la.rows() {
                assert!((la.get(i, t) - lb.get(i, t)).abs() <= 1e-10);
            }
        }
        assert!((0..la.rows()).any(|i| la.get(i, 4) != lb.get(i, 4)));
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let mut spec = small_spec();
        spec.init_std = 40.0;
        let m = Model::build(&spec, &mut Rng::new(5)).unwrap();
        let toks = batch(&mut Rng::new(6), 2, 8, 32);
        assert!(m.forward(&toks, Mode::Eval).is_ok());
    }

    #[test]
    fn fresh_adapters_preserve_logits_exactly() {
        let spec = small_spec();
        let base = Model::build(&spec, &mut Rng::new(1)).unwrap();
        let mut adapted = base.clone();
        let n = adapted
            .attach_adapters(&Placement::nlu(), &AdapterConfig::new(AdapterVariant::Shim, 8, 16.0), &mut Rng::new(9))
            .unwrap();
        assert_eq!(n, 8);
        let toks = batch(&mut Rng::new(2), 4, 8, 32);
        assert_eq!(base.logits(&toks).unwrap().data(), adapted.logits(&toks).unwrap().data());
    }

    #[test]
    fn attach_rules() {
        let mut m = Model::build(&small_spec(), &mut Rng::new(1)).unwrap();
        let cfg = AdapterConfig::new(AdapterVariant::Lora, 4, 8.0);
        assert!(m.attach_adapters(&Placement::nlg(), &cfg, &mut Rng::new(0)).is_err());
        m.attach_site(Site::new(0, Weight::Q), &cfg, &[], &mut Rng::new(0)).unwrap();
        assert!(m.attach_site(Site::new(0, Weight::Q), &cfg, &[], &mut Rng::new(0)).is_err());
        assert!(m.attach_site(Site::new(5, Weight::Q), &cfg, &[], &mut Rng::new(0)).is_err());
        assert!(m.attach_site(Site::new(0, Weight::Qkv), &cfg, &[], &mut Rng::new(0)).is_err());
        let big = AdapterConfig::new(AdapterVariant::Lora, 32, 8.0);
        assert!(m.attach_site(Site::new(1, Weight::V), &big, &[], &mut Rng::new(0)).is_err());
        assert!(m.trainability.frozen_base);
        assert!(!m.is_trainable("block0.W_q"));
        assert!(m.is_trainable("block0.W_q.adapter.A"));
        assert!(m.is_trainable("head.W"));
        assert!(!m.is_trainable("block0.ln1.g"));
    }

    #[test]
    fn fused_profiles() {
        let mut spec = small_spec();
        spec.fused_qkv = true;
        let cfg = AdapterConfig::new(AdapterVariant::Shim, 4, 8.0);
        let mut nlg = Model::build(&spec, &mut Rng::new(1)).unwrap();
        assert_eq!(nlg.attach_adapters(&Placement::nlg(), &cfg, &mut Rng::new(2)).unwrap(), 4);
        let mut nlu = Model::build(&spec, &mut Rng::new(1)).unwrap();
        nlu.attach_adapters(&Placement::nlu(), &cfg, &mut Rng::new(2)).unwrap();
        let ad = &nlu.adapters()[&Site::new(0, Weight::Qkv)];
        assert_eq!(ad.channels(), &[Channel::Q, Channel::V]);
    }

    #[test]
    fn merge_unmerge_cycle() {
        let spec = small_spec();
        let mut m = Model::build(&spec, &mut Rng::new(1)).unwrap();
        let original = m.clone();
        m.attach_adapters(&Placement::nlu(), &AdapterConfig::new(AdapterVariant::Dtsm, 4, 8.0), &mut Rng::new(3))
            .unwrap();
        // fresh adapters: merge leaves weights untouched
        m.merge_all().unwrap();
        assert_eq!(weight_diff(&m, &original).unwrap(), 0.0);
        assert!(m.merge_all().is_err());
        m.unmerge_all().unwrap();
        assert!(m.unmerge_all().is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let m = Model::build(&small_spec(), &mut Rng::new(1)).unwrap();
        let toks = batch(&mut Rng::new(2), 2, 6, 32);
        let f = m.forward(&toks, Mode::Eval).unwrap();
        let g = m.backward(&f.cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.values().all(|g| g.max_abs() == 0.0));
        assert!(m.backward(&f.cache, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn frozen_model_grads_only_for_trainable() {
        let mut m = Model::build(&small_spec(), &mut Rng::new(1)).unwrap();
        m.attach_adapters(&Placement::nlu(), &AdapterConfig::new(AdapterVariant::Icfm, 4, 8.0), &mut Rng::new(3))
            .unwrap();
        let toks = batch(&mut Rng::new(2), 2, 6, 32);
        let f = m.forward(&toks, Mode::Eval).unwrap();
        let g = m.backward(&f.cache, &Matrix::from_rows(&[&[1.0, -1.0], &[0.5, 0.2]]).unwrap()).unwrap();
        let expected: Vec<String> = m
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| m.is_trainable(n))
            .collect();
        let mut got: Vec<String> = g.keys().cloned().collect();
        let mut exp = expected.clone();
        got.sort();
        exp.sort();
        assert_eq!(got, exp);
    }

    #[test]
    fn site_names_round_trip() {
        let s = Site::new(3, Weight::Qkv);
        assert_eq!(s.layer_id(), "block3.W_qkv");
        assert_eq!(Site::parse("block3.W_qkv").unwrap(), s);
        assert!(Site::parse("blk3.W_q").is_err());
    }
}
