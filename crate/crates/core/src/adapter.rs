//! Low-rank adapters with an `r × r` transformation between the factors.
//!
//! An adapted layer computes `h = W₀x + s·B·M·A·x` with `s = alpha / r`.
//! `M` is realized from the transformation factors according to the variant:
//!
//! | variant | factors | `M`      |
//! |---------|---------|----------|
//! | LORA    | none    | `I`      |
//! | SHIM    | C       | `C`      |
//! | ICFM    | C       | `C·Cᵀ`   |
//! | CTCM    | C, D    | `C·D`    |
//! | DTSM    | C, D    | `C + D`  |
//!
//! `B` starts at zero so a freshly attached adapter leaves its host layer
//! unchanged; `A`, `C` and `D` are Gaussian.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::linalg::{self, gaussian, matmul, matmul_nt, matmul_tn, transpose, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AdapterVariant {
    Lora,
    Shim,
    Icfm,
    Ctcm,
    Dtsm,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 5] = [
        AdapterVariant::Lora,
        AdapterVariant::Shim,
        AdapterVariant::Icfm,
        AdapterVariant::Ctcm,
        AdapterVariant::Dtsm,
    ];

    pub fn has_c(self) -> bool {
        self != AdapterVariant::Lora
    }

    pub fn has_d(self) -> bool {
        matches!(self, AdapterVariant::Ctcm | AdapterVariant::Dtsm)
    }

    /// Number of `r × r` factors stored.
    pub fn n_factors(self) -> usize {
        usize::from(self.has_c()) + usize::from(self.has_d())
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Lora => "LORA",
            AdapterVariant::Shim => "SHIM",
            AdapterVariant::Icfm => "ICFM",
            AdapterVariant::Ctcm => "CTCM",
            AdapterVariant::Dtsm => "DTSM",
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err(format!("unknown adapter variant {s:?}")))
    }
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub variant: AdapterVariant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl AdapterConfig {
    pub fn new(variant: AdapterVariant, rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            variant,
            init_std: default_init_std(),
            dropout: 0.0,
        }
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("adapter rank must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(config_err(format!("init_std must be positive, got {}", self.init_std)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Validates the config against a host layer of shape `d × k`.
    pub fn validate_for(&self, d: usize, k: usize) -> Result<()> {
        self.validate()?;
        if self.rank >= d.min(k) {
            return Err(config_err(format!(
                "rank {} must be smaller than min(d, k) = {} for a {d}x{k} layer",
                self.rank,
                d.min(k)
            )));
        }
        Ok(())
    }
}

/// The transformation factors `C`, `D` of one adapter and the rule combining
/// them into `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub variant: AdapterVariant,
    pub size: usize,
    pub c: Option<Matrix>,
    pub d: Option<Matrix>,
}

/// Gradients of the transformation factors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TransformGrads {
    pub c: Option<Matrix>,
    pub d: Option<Matrix>,
}

impl Transform {
    pub fn init(variant: AdapterVariant, size: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let c = if variant.has_c() {
            Some(gaussian(rng, size, size, std)?)
        } else {
            None
        };
        let d = if variant.has_d() {
            Some(gaussian(rng, size, size, std)?)
        } else {
            None
        };
        Ok(Self { variant, size, c, d })
    }

    fn factor<'a>(m: &'a Option<Matrix>, name: &str) -> Result<&'a Matrix> {
        m.as_ref()
            .ok_or_else(|| Error::State(format!("transform factor {name} missing")))
    }

    /// The `size × size` matrix `M`.
    pub fn matrix(&self) -> Result<Matrix> {
        match self.variant {
            AdapterVariant::Lora => Ok(Matrix::identity(self.size)),
            AdapterVariant::Shim => Ok(Self::factor(&self.c, "C")?.clone()),
            AdapterVariant::Icfm => {
                let c = Self::factor(&self.c, "C")?;
                matmul_nt(c, c)
            }
            AdapterVariant::Ctcm => matmul(Self::factor(&self.c, "C")?, Self::factor(&self.d, "D")?),
            AdapterVariant::Dtsm => linalg::add(Self::factor(&self.c, "C")?, Self::factor(&self.d, "D")?),
        }
    }

    /// Pulls the gradient with respect to `M` back onto `C` and `D`.
    pub fn backward(&self, grad_m: &Matrix) -> Result<TransformGrads> {
        Ok(match self.variant {
            AdapterVariant::Lora => TransformGrads::default(),
            AdapterVariant::Shim => TransformGrads {
                c: Some(grad_m.clone()),
                d: None,
            },
            AdapterVariant::Icfm => {
                let c = Self::factor(&self.c, "C")?;
                let sym = linalg::add(grad_m, &transpose(grad_m))?;
                TransformGrads {
                    c: Some(matmul(&sym, c)?),
                    d: None,
                }
            }
            AdapterVariant::Ctcm => {
                let c = Self::factor(&self.c, "C")?;
                let d = Self::factor(&self.d, "D")?;
                TransformGrads {
                    c: Some(matmul_nt(grad_m, d)?),
                    d: Some(matmul_tn(c, grad_m)?),
                }
            }
            AdapterVariant::Dtsm => TransformGrads {
                c: Some(grad_m.clone()),
                d: Some(grad_m.clone()),
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `r × k`
    pub a: Matrix,
    /// `d × r`
    pub b: Matrix,
    pub transform: Transform,
    pub config: AdapterConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Option<Matrix>,
    pub d: Option<Matrix>,
}

impl AdapterGrads {
    pub fn max_abs(&self) -> f64 {
        [Some(&self.a), Some(&self.b), self.c.as_ref(), self.d.as_ref()]
            .into_iter()
            .flatten()
            .fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Intermediates of a training-mode forward pass needed by
/// [`backward_with_cache`].
#[derive(Clone, Debug)]
pub struct AdapterCache {
    /// Adapter-path input after dropout.
    input: Matrix,
    /// Dropout multipliers (`0` or `1/(1-p)`), absent when dropout is off.
    mask: Option<Matrix>,
    /// `A·x`
    ax: Matrix,
    /// `M·A·x`
    max: Matrix,
    m: Matrix,
}

/// Fresh adapter for a `d × k` host weight: `B = 0`, Gaussian `A`, `C`, `D`
/// (drawn in that order).
pub fn init_adapter(config: &AdapterConfig, d: usize, k: usize, rng: &mut Rng) -> Result<AdapterParams> {
    config.validate_for(d, k)?;
    let r = config.rank;
    let a = gaussian(rng, r, k, config.init_std)?;
    let transform = Transform::init(config.variant, r, config.init_std, rng)?;
    Ok(AdapterParams {
        a,
        b: Matrix::zeros(d, r),
        transform,
        config: config.clone(),
    })
}

impl AdapterParams {
    pub fn d(&self) -> usize {
        self.b.rows()
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn c(&self) -> Option<&Matrix> {
        self.transform.c.as_ref()
    }

    pub fn d_factor(&self) -> Option<&Matrix> {
        self.transform.d.as_ref()
    }

    pub fn scaling(&self) -> f64 {
        self.config.scaling()
    }

    /// `M` for this adapter.
    pub fn transform_matrix(&self) -> Result<Matrix> {
        self.transform.matrix()
    }

    /// Named tensors in canonical order: `A`, `B`, then `C`, `D` when present.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("A", &self.a), ("B", &self.b)];
        if let Some(c) = &self.transform.c {
            out.push(("C", c));
        }
        if let Some(d) = &self.transform.d {
            out.push(("D", d));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![("A", &mut self.a), ("B", &mut self.b)];
        if let Some(c) = &mut self.transform.c {
            out.push(("C", c));
        }
        if let Some(d) = &mut self.transform.d {
            out.push(("D", d));
        }
        out
    }

    /// Count of stored trainable entries.
    pub fn stored_entries(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Eval-mode adapter contribution `s·B·M·A·x`.
pub fn forward_adapter(params: &AdapterParams, x: &Matrix) -> Result<Matrix> {
    Ok(forward_with_cache(params, x, None)?.0)
}

/// Forward pass that keeps what the backward pass needs. Dropout on the
/// adapter input is applied only when `dropout_rng` is given and the
/// configured probability is positive.
pub fn forward_with_cache(
    params: &AdapterParams,
    x: &Matrix,
    dropout_rng: Option<&mut Rng>,
) -> Result<(Matrix, AdapterCache)> {
    if x.rows() != params.k() {
        return Err(Error::Shape {
            op: "forward_adapter",
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
    let m = params.transform_matrix()?;
    let ax = matmul(&params.a, &input)?;
    let max = matmul(&m, &ax)?;
    let out = linalg::scale(&matmul(&params.b, &max)?, params.scaling())?;
    Ok((out, AdapterCache { input, mask, ax, max, m }))
}

/// `ΔW = s·B·M·A`, the `d × k` increment folded into the host weight on merge.
pub fn delta_weight(params: &AdapterParams) -> Result<Matrix> {
    let m = params.transform_matrix()?;
    let ma = matmul(&m, &params.a)?;
    linalg::scale(&matmul(&params.b, &ma)?, params.scaling())
}

/// Gradients of all adapter factors given the upstream gradient `g`
/// (`d × n`) of the adapter output for input `x` (`k × n`), dropout off.
pub fn backward_adapter(params: &AdapterParams, x: &Matrix, g: &Matrix) -> Result<AdapterGrads> {
    let (_, cache) = forward_with_cache(params, x, None)?;
    Ok(backward_with_cache(params, &cache, g)?.0)
}

/// Returns the factor gradients and the gradient with respect to the
/// adapter-path input `x` (before dropout).
pub fn backward_with_cache(
    params: &AdapterParams,
    cache: &AdapterCache,
    g: &Matrix,
) -> Result<(AdapterGrads, Matrix)> {
    if g.rows() != params.d() || g.cols() != cache.input.cols() {
        return Err(Error::Shape {
            op: "backward_adapter",
            lhs: (params.d(), cache.input.cols()),
            rhs: g.shape(),
        });
    }
    let s = params.scaling();
    let grad_b = linalg::scale(&matmul_nt(g, &cache.max)?, s)?;
    // gradient at M·A·x
    let g_max = linalg::scale(&matmul_tn(&params.b, g)?, s)?;
    let grad_m = matmul_nt(&g_max, &cache.ax)?;
    let g_ax = matmul_tn(&cache.m, &g_max)?;
    let grad_a = matmul_nt(&g_ax, &cache.input)?;
    let tg = params.transform.backward(&grad_m)?;
    let mut grad_x = matmul_tn(&params.a, &g_ax)?;
    if let Some(mask) = &cache.mask {
        grad_x = grad_x.hadamard(mask)?;
    }
    Ok((
        AdapterGrads {
            a: grad_a,
            b: grad_b,
            c: tg.c,
            d: tg.d,
        },
        grad_x,
    ))
}

/// Trainable entries of one adapter on a `d × k` layer.
pub fn param_count(config: &AdapterConfig, d: usize, k: usize) -> usize {
    let r = config.rank;
    r * (d + k) + config.variant.n_factors() * r * r
}
