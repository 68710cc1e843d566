//! Stepwise adapter for a fused query/key/value weight.
//!
//! The fused host weight is `W₀ ∈ ℝ^{3d × k}` with rows `[0, d)` = q,
//! `[d, 2d)` = k and `[2d, 3d)` = v. For the enabled channel set `E`:
//!
//! 1. joint step: `A' = M_T · A`, where `A` stacks one `r × k` block per
//!    enabled channel and `M_T` is a dense `(r|E|) × (r|E|)` transform built
//!    from `C`/`D` by the configured variant. This mixes the channel blocks.
//! 2. independent step: channel `i` contributes `s · B_i · A'_i · x` to its own
//!    output rows, with one `d × r` block `B_i` per channel.
//!
//! Disabled channels receive exactly zero. With `|E| = 1` and the LORA
//! variant this reduces to a plain adapter on that channel's slice.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, Transform};
use crate::error::{config_err, Error, Result};
use crate::linalg::{self, gaussian, matmul, matmul_nt, matmul_tn, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Q,
    K,
    V,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Q, Channel::K, Channel::V];

    /// Position of the channel's row block in the fused weight.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Q => "q",
            Channel::K => "k",
            Channel::V => "v",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err(format!("unknown qkv channel {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedAdapterParams {
    /// Enabled channels in q, k, v order, without duplicates.
    pub enabled: Vec<Channel>,
    /// `(r·|E|) × k`, channel blocks stacked in `enabled` order.
    pub a: Matrix,
    pub transform: Transform,
    /// One `d × r` block per enabled channel.
    pub b_blocks: Vec<Matrix>,
    pub config: AdapterConfig,
    /// Rows per channel in the fused weight.
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedGrads {
    pub a: Matrix,
    pub b_blocks: Vec<Matrix>,
    pub c: Option<Matrix>,
    pub d: Option<Matrix>,
}

impl MergedGrads {
    pub fn max_abs(&self) -> f64 {
        std::iter::once(&self.a)
            .chain(&self.b_blocks)
            .chain(self.c.as_ref())
            .chain(self.d.as_ref())
            .fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

#[derive(Clone, Debug)]
pub struct MergedCache {
    input: Matrix,
    mask: Option<Matrix>,
    ax: Matrix,
    /// `A' · x = M_T · A · x`
    mixed: Matrix,
    m: Matrix,
}

fn normalize_enabled(enabled: &[Channel]) -> Result<Vec<Channel>> {
    if enabled.is_empty() {
        return Err(config_err("merged adapter needs at least one enabled channel"));
    }
    let mut out = enabled.to_vec();
    out.sort();
    out.dedup();
    if out.len() != enabled.len() {
        return Err(config_err("duplicate channel in merged adapter"));
    }
    Ok(out)
}

/// Fresh merged adapter for a fused `3d × k` weight: zero `B` blocks,
/// Gaussian `A` then `C`, `D`.
pub fn init_merged(
    config: &AdapterConfig,
    d: usize,
    k: usize,
    enabled: &[Channel],
    rng: &mut Rng,
) -> Result<MergedAdapterParams> {
    config.validate()?;
    let enabled = normalize_enabled(enabled)?;
    let r = config.rank;
    let joint = r * enabled.len();
    if joint >= (d * enabled.len()).min(k) {
        return Err(config_err(format!(
            "rank {r} with {} channels needs r*|E| = {joint} < min(d*|E|, k) = {}",
            enabled.len(),
            (d * enabled.len()).min(k)
        )));
    }
    let a = gaussian(rng, joint, k, config.init_std)?;
    let transform = Transform::init(config.variant, joint, config.init_std, rng)?;
    Ok(MergedAdapterParams {
        b_blocks: vec![Matrix::zeros(d, r); enabled.len()],
        enabled,
        a,
        transform,
        config: config.clone(),
        d,
    })
}

impl MergedAdapterParams {
    pub fn k(&self) -> usize {
        self.a.cols()
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn scaling(&self) -> f64 {
        self.config.scaling()
    }

    pub fn transform_matrix(&self) -> Result<Matrix> {
        self.transform.matrix()
    }

    /// Named tensors in canonical order: `A`, `C`, `D`, then `B{channel}`.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("A".to_string(), &self.a)];
        if let Some(c) = &self.transform.c {
            out.push(("C".to_string(), c));
        }
        if let Some(d) = &self.transform.d {
            out.push(("D".to_string(), d));
        }
        for (ch, b) in self.enabled.iter().zip(&self.b_blocks) {
            out.push((format!("B{}", ch.index()), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("A".to_string(), &mut self.a)];
        if let Some(c) = &mut self.transform.c {
            out.push(("C".to_string(), c));
        }
        if let Some(d) = &mut self.transform.d {
            out.push(("D".to_string(), d));
        }
        for (ch, b) in self.enabled.iter().zip(&mut self.b_blocks) {
            out.push((format!("B{}", ch.index()), b));
        }
        out
    }

    pub fn stored_entries(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

pub fn forward_merged(params: &MergedAdapterParams, x: &Matrix) -> Result<Matrix> {
    Ok(forward_merged_with_cache(params, x, None)?.0)
}

pub fn forward_merged_with_cache(
    params: &MergedAdapterParams,
    x: &Matrix,
    dropout_rng: Option<&mut Rng>,
) -> Result<(Matrix, MergedCache)> {
    if x.rows() != params.k() {
        return Err(Error::Shape {
            op: "forward_merged",
            lhs: params.a.shape(),
            rhs: x.shape(),
        });
    }
    let p = params.config.dropout;
    let (input, mask) = match dropout_rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Matrix::from_fn(x.rows(), x.cols(), |_, _| if rng.uniform() < p { 0.0 } else { keep })?;
            (x.hadamard(&mask)?, Some(mask))
        }
        _ => (x.clone(), None),
    };
    let r = params.rank();
    let s = params.scaling();
    let m = params.transform_matrix()?;
    let ax = matmul(&params.a, &input)?;
    let mixed = matmul(&m, &ax)?;
    let mut out = Matrix::zeros(3 * params.d, x.cols());
    for (i, (ch, b)) in params.enabled.iter().zip(&params.b_blocks).enumerate() {
        let slice = mixed.slice_rows(i * r, (i + 1) * r)?;
        let contrib = linalg::scale(&matmul(b, &slice)?, s)?;
        out.write_rows(ch.index() * params.d, &contrib)?;
    }
    Ok((out, MergedCache { input, mask, ax, mixed, m }))
}

/// `ΔW` for the fused weight, zero on disabled channel rows.
pub fn delta_weight_merged(params: &MergedAdapterParams) -> Result<Matrix> {
    let r = params.rank();
    let s = params.scaling();
    let mixed_a = matmul(&params.transform_matrix()?, &params.a)?;
    let mut out = Matrix::zeros(3 * params.d, params.k());
    for (i, (ch, b)) in params.enabled.iter().zip(&params.b_blocks).enumerate() {
        let block = linalg::scale(&matmul(b, &mixed_a.slice_rows(i * r, (i + 1) * r)?)?, s)?;
        out.write_rows(ch.index() * params.d, &block)?;
    }
    Ok(out)
}

pub fn backward_merged(params: &MergedAdapterParams, x: &Matrix, g: &Matrix) -> Result<MergedGrads> {
    let (_, cache) = forward_merged_with_cache(params, x, None)?;
    Ok(backward_merged_with_cache(params, &cache, g)?.0)
}

/// Factor gradients plus the gradient with respect to the input `x`.
pub fn backward_merged_with_cache(
    params: &MergedAdapterParams,
    cache: &MergedCache,
    g: &Matrix,
) -> Result<(MergedGrads, Matrix)> {
    if g.rows() != 3 * params.d || g.cols() != cache.input.cols() {
        return Err(Error::Shape {
            op: "backward_merged",
            lhs: (3 * params.d, cache.input.cols()),
            rhs: g.shape(),
        });
    }
    let r = params.rank();
    let s = params.scaling();
    let mut b_grads = Vec::with_capacity(params.enabled.len());
    let mut g_mixed_parts = Vec::with_capacity(params.enabled.len());
    for (i, (ch, b)) in params.enabled.iter().zip(&params.b_blocks).enumerate() {
        let g_ch = g.slice_rows(ch.index() * params.d, (ch.index() + 1) * params.d)?;
        let mixed_i = cache.mixed.slice_rows(i * r, (i + 1) * r)?;
        b_grads.push(linalg::scale(&matmul_nt(&g_ch, &mixed_i)?, s)?);
        g_mixed_parts.push(linalg::scale(&matmul_tn(b, &g_ch)?, s)?);
    }
    let g_mixed = Matrix::vstack(&g_mixed_parts.iter().collect::<Vec<_>>())?;
    let grad_m = matmul_nt(&g_mixed, &cache.ax)?;
    let g_ax = matmul_tn(&cache.m, &g_mixed)?;
    let grad_a = matmul_nt(&g_ax, &cache.input)?;
    let tg = params.transform.backward(&grad_m)?;
    let mut grad_x = matmul_tn(&params.a, &g_ax)?;
    if let Some(mask) = &cache.mask {
        grad_x = grad_x.hadamard(mask)?;
    }
    Ok((
        MergedGrads {
            a: grad_a,
            b_blocks: b_grads,
            c: tg.c,
            d: tg.d,
        },
        grad_x,
    ))
}

/// Trainable entries of a merged adapter with `n_enabled` channels on a fused
/// `3d × k` weight.
pub fn param_count_merged(config: &AdapterConfig, d: usize, k: usize, n_enabled: usize) -> usize {
    let joint = config.rank * n_enabled;
    joint * k + n_enabled * d * config.rank + config.variant.n_factors() * joint * joint
}
