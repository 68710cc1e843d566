//! Central finite-difference checks of the analytic gradients.
//!
//! Relative error per entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, 1e-6)`; the floor keeps entries that are zero up to rounding
//! from dominating the report.

use std::collections::BTreeMap;

use crate::adapter::{
    backward_adapter, forward_adapter, init_adapter, AdapterConfig, AdapterGrads, AdapterParams, AdapterVariant,
};
use crate::error::Result;
use crate::linalg::{gaussian, Matrix, Rng};
use crate::merged_qkv::{backward_merged, forward_merged, init_merged, Channel, MergedAdapterParams, MergedGrads};
use crate::model::{HeadKind, Mode, Model, ModelSpec, Placement};
use crate::train::cross_entropy;

pub const STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest per-entry relative error between an analytic gradient and
/// central differences of `loss` with respect to `param`.
pub fn check_tensor(
    param: &mut Matrix,
    analytic: &Matrix,
    h: f64,
    mut loss: impl FnMut(&Matrix) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for idx in 0..param.len() {
        let orig = param.data()[idx];
        param.data_mut()[idx] = orig + h;
        let plus = loss(param)?;
        param.data_mut()[idx] = orig - h;
        let minus = loss(param)?;
        param.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[idx], numeric));
    }
    Ok(worst)
}

fn half_sq(m: &Matrix) -> f64 {
    0.5 * m.data().iter().map(|v| v * v).sum::<f64>()
}

pub type AdapterBackward = dyn Fn(&AdapterParams, &Matrix, &Matrix) -> Result<AdapterGrads>;

/// Checks every factor of a plain adapter under `L = ½‖forward(x)‖²`.
/// Returns the worst relative error per tensor name.
pub fn check_adapter(params: &AdapterParams, x: &Matrix, backward: &AdapterBackward) -> Result<BTreeMap<String, f64>> {
    let out = forward_adapter(params, x)?;
    let grads = backward(params, x, &out)?;
    let mut report = BTreeMap::new();
    let mut work = params.clone();
    let analytic: Vec<(&str, Option<&Matrix>)> = vec![
        ("A", Some(&grads.a)),
        ("B", Some(&grads.b)),
        ("C", grads.c.as_ref()),
        ("D", grads.d.as_ref()),
    ];
    for (name, g) in analytic {
        let Some(g) = g else { continue };
        let mut tensor = match name {
            "A" => work.a.clone(),
            "B" => work.b.clone(),
            "C" => work.transform.c.clone().expect("C grad implies C"),
            _ => work.transform.d.clone().expect("D grad implies D"),
        };
        let err = check_tensor(&mut tensor, g, STEP, |t| {
            match name {
                "A" => work.a = t.clone(),
                "B" => work.b = t.clone(),
                "C" => work.transform.c = Some(t.clone()),
                _ => work.transform.d = Some(t.clone()),
            }
            Ok(half_sq(&forward_adapter(&work, x)?))
        })?;
        work = params.clone();
        report.insert(name.to_string(), err);
    }
    Ok(report)
}

pub type MergedBackward = dyn Fn(&MergedAdapterParams, &Matrix, &Matrix) -> Result<MergedGrads>;

pub fn check_merged(params: &MergedAdapterParams, x: &Matrix, backward: &MergedBackward) -> Result<BTreeMap<String, f64>> {
    let out = forward_merged(params, x)?;
    let grads = backward(params, x, &out)?;
    let mut report = BTreeMap::new();
    let mut analytic = vec![("A".to_string(), grads.a.clone())];
    if let Some(c) = grads.c {
        analytic.push(("C".into(), c));
    }
    if let Some(d) = grads.d {
        analytic.push(("D".into(), d));
    }
    for (ch, b) in params.enabled.iter().zip(grads.b_blocks) {
        analytic.push((format!("B{}", ch.index()), b));
    }
    for (name, g) in analytic {
        let mut work = params.clone();
        let mut tensor = work
            .tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m.clone())
            .expect("named tensor exists");
        let err = check_tensor(&mut tensor, &g, STEP, |t| {
            for (n, m) in work.tensors_mut() {
                if n == name {
                    *m = t.clone();
                }
            }
            Ok(half_sq(&forward_merged(&work, x)?))
        })?;
        report.insert(name, err);
    }
    Ok(report)
}

/// Gives an adapter nonzero `B` so every factor carries gradient.
pub fn randomize_b(params: &mut AdapterParams, rng: &mut Rng, std: f64) -> Result<()> {
    params.b = gaussian(rng, params.b.rows(), params.b.cols(), std)?;
    Ok(())
}

pub fn random_adapter_case(variant: AdapterVariant, rng: &mut Rng) -> Result<(AdapterParams, Matrix)> {
    let r = 1 + rng.below(3);
    let d = r + 1 + rng.below(5);
    let k = r + 1 + rng.below(5);
    let n = 1 + rng.below(4);
    let cfg = AdapterConfig {
        init_std: 0.5,
        ..AdapterConfig::new(variant, r, 2.0 * r as f64)
    };
    let mut p = init_adapter(&cfg, d, k, rng)?;
    randomize_b(&mut p, rng, 0.5)?;
    let x = gaussian(rng, k, n, 1.0)?;
    Ok((p, x))
}

pub fn random_merged_case(variant: AdapterVariant, n_enabled: usize, rng: &mut Rng) -> Result<(MergedAdapterParams, Matrix)> {
    let r = 1 + rng.below(2);
    let d = r + 1 + rng.below(3);
    let k = r * n_enabled + 1 + rng.below(4);
    let n = 1 + rng.below(3);
    let mut channels = Channel::ALL.to_vec();
    rng.shuffle(&mut channels);
    channels.truncate(n_enabled);
    let cfg = AdapterConfig {
        init_std: 0.5,
        ..AdapterConfig::new(variant, r, 2.0 * r as f64)
    };
    let mut p = init_merged(&cfg, d, k, &channels, rng)?;
    for b in &mut p.b_blocks {
        *b = gaussian(rng, d, r, 0.5)?;
    }
    let x = gaussian(rng, k, n, 1.0)?;
    Ok((p, x))
}

/// Checks every trainable tensor of `model` under mean cross-entropy on
/// `batch`/`targets`. Returns the worst relative error per tensor name.
pub fn check_model(model: &Model, batch: &[Vec<u32>], targets: &[usize]) -> Result<BTreeMap<String, f64>> {
    let loss_of = |m: &Model| -> Result<f64> {
        let logits = m.forward(batch, Mode::Eval)?.logits;
        Ok(cross_entropy(&logits, targets, 0.0)?.0)
    };
    let fwd = model.forward(batch, Mode::Eval)?;
    let (_, dlogits) = cross_entropy(&fwd.logits, targets, 0.0)?;
    let grads = model.backward(&fwd.cache, &dlogits)?;
    let mut report = BTreeMap::new();
    for (name, g) in &grads {
        let mut work = model.clone();
        let mut tensor = model.tensor(name).expect("gradient names exist").clone();
        let err = check_tensor(&mut tensor, g, STEP, |t| {
            work.set_tensor(name, t.clone())?;
            loss_of(&work)
        })?;
        report.insert(name.clone(), err);
    }
    Ok(report)
}

/// Tiny model used by the model-level checks (`d_model = 8`).
pub fn tiny_spec(fused: bool, head: HeadKind) -> ModelSpec {
    ModelSpec {
        vocab_size: 10,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_ff: 12,
        max_seq_len: 6,
        fused_qkv: fused,
        head,
        init_std: 0.3,
    }
}

/// A tiny adapted model whose adapters all have nonzero `B`.
pub fn tiny_adapted_model(variant: AdapterVariant, placement: &Placement, fused: bool, seed: u64) -> Result<Model> {
    let mut rng = Rng::new(seed);
    let mut model = Model::build(&tiny_spec(fused, HeadKind::Classifier { n_classes: 3 }), &mut rng)?;
    let cfg = AdapterConfig {
        init_std: 0.3,
        ..AdapterConfig::new(variant, 2, 4.0)
    };
    model.attach_adapters(placement, &cfg, &mut rng)?;
    let names: Vec<String> = model
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.contains(".B"))
        .collect();
    for n in names {
        let shape = model.tensor(&n).expect("listed").shape();
        model.set_tensor(&n, gaussian(&mut rng, shape.0, shape.1, 0.3)?)?;
    }
    Ok(model)
}

pub fn random_batch(rng: &mut Rng, n: usize, len: usize, vocab: usize, n_classes: usize) -> (Vec<Vec<u32>>, Vec<usize>) {
    let batch = (0..n)
        .map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect())
        .collect();
    let targets = (0..n).map(|_| rng.below(n_classes)).collect();
    (batch, targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub component: String,
    pub tensor: String,
    pub max_rel_err: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn fold_rows(component: &str, report: BTreeMap<String, f64>, key: impl Fn(&str) -> String, rows: &mut Vec<GradCheckRow>) {
    let mut grouped: BTreeMap<String, f64> = BTreeMap::new();
    for (name, err) in report {
        let e = grouped.entry(key(&name)).or_insert(0.0);
        *e = e.max(err);
    }
    rows.extend(grouped.into_iter().map(|(tensor, max_rel_err)| GradCheckRow {
        component: component.to_string(),
        tensor,
        max_rel_err,
    }));
}

/// Adapter tensors group by factor letter; base tensors keep their name.
fn model_key(name: &str) -> String {
    match name.rsplit_once(".adapter.").or_else(|| name.rsplit_once(".merged.")) {
        Some((_, factor)) => factor.to_string(),
        None => name.to_string(),
    }
}

/// Runs the full suite: plain adapters, merged adapters for 1–3 channels,
/// adapted tiny models, and a fully trainable tiny model. `cases` random
/// shape/seed draws per plain-adapter variant.
pub fn run_suite(variants: &[AdapterVariant], cases: usize, seed: u64, backward: &AdapterBackward) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let mut rng = Rng::new(seed);
    for &v in variants {
        let mut worst = BTreeMap::new();
        for _ in 0..cases {
            let (p, x) = random_adapter_case(v, &mut rng)?;
            for (name, err) in check_adapter(&p, &x, backward)? {
                let e = worst.entry(name).or_insert(0.0f64);
                *e = e.max(err);
            }
        }
        fold_rows(&format!("adapter/{v}"), worst, str::to_string, &mut rows);
    }
    for &v in variants {
        let mut worst = BTreeMap::new();
        for n_enabled in 1..=3 {
            for _ in 0..cases.div_ceil(3).max(1) {
                let (p, x) = random_merged_case(v, n_enabled, &mut rng)?;
                for (name, err) in check_merged(&p, &x, &backward_merged)? {
                    // B blocks fold together
                    let key = if name.starts_with('B') { "B".to_string() } else { name };
                    let e = worst.entry(key).or_insert(0.0f64);
                    *e = e.max(err);
                }
            }
        }
        fold_rows(&format!("merged/{v}"), worst, str::to_string, &mut rows);
    }
    for &v in variants {
        let model = tiny_adapted_model(v, &Placement::nlu(), false, rng.next_u64())?;
        let (batch, targets) = random_batch(&mut rng, 3, 5, 10, 3);
        fold_rows(&format!("model-nlu/{v}"), check_model(&model, &batch, &targets)?, model_key, &mut rows);
        let model = tiny_adapted_model(v, &Placement::nlg(), true, rng.next_u64())?;
        fold_rows(&format!("model-nlg/{v}"), check_model(&model, &batch, &targets)?, model_key, &mut rows);
    }
    let full = Model::build(&tiny_spec(false, HeadKind::Classifier { n_classes: 3 }), &mut Rng::new(seed ^ 0x5eed))?;
    let (batch, targets) = random_batch(&mut rng, 3, 5, 10, 3);
    let report = check_model(&full, &batch, &targets)?;
    let worst = report.values().cloned().fold(0.0, f64::max);
    rows.push(GradCheckRow {
        component: "model/full".into(),
        tensor: "all".into(),
        max_rel_err: worst,
    });
    Ok(rows)
}

/// The shipped analytic backward, for use as the default in [`run_suite`].
pub fn default_backward(p: &AdapterParams, x: &Matrix, g: &Matrix) -> Result<AdapterGrads> {
    backward_adapter(p, x, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(rel_err(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn corrupted_c_gradient_is_flagged() {
        let corrupt = |p: &AdapterParams, x: &Matrix, g: &Matrix| -> Result<AdapterGrads> {
            let mut grads = backward_adapter(p, x, g)?;
            if let Some(c) = &mut grads.c {
                *c = crate::linalg::scale(c, 1.5)?;
            }
            Ok(grads)
        };
        let rows = run_suite(&[AdapterVariant::Shim], 2, 1, &corrupt).unwrap();
        let bad: Vec<_> = rows.iter().filter(|r| !r.passed()).collect();
        assert!(!bad.is_empty());
        assert!(bad.iter().all(|r| r.tensor == "C" && r.component == "adapter/SHIM"));
    }

    #[test]
    fn lora_suite_has_no_transform_rows() {
        let rows = run_suite(&[AdapterVariant::Lora], 2, 3, &default_backward).unwrap();
        assert!(rows.iter().all(|r| r.tensor != "C" && r.tensor != "D"));
        assert!(rows.iter().all(GradCheckRow::passed), "{rows:?}");
    }
}
