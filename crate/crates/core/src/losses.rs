//! Focal loss, the weak coupling penalty between the branches' final taps,
//! and the per-phase composite objectives.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::{Mask, Tensor};

/// Lower clamp on `p_t` inside the logarithm.
pub const MIN_PROB: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Coupling penalty coefficient.
    pub lambda: f64,
    /// Weight of the aggregated (main) segmentation term.
    pub main_weight: f64,
    /// Weight of the local branch's auxiliary term.
    pub local_weight: f64,
    /// Weight of the global branch's auxiliary term.
    pub global_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 6.0,
            lambda: 0.15,
            main_weight: 1.0,
            local_weight: 1.0,
            global_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.lambda >= 0.0
            && self.main_weight > 0.0
            && self.local_weight > 0.0
            && self.global_weight > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid loss config {:?}", self)))
        }
    }
}

/// Mean focal loss over pixels and its gradient towards the logits.
///
/// `logits` is `K×H×W`, `target` holds class indices in `[0, K)`. The loss
/// per pixel is `−(1−p_t)^γ · log p_t` with `p_t` the softmax probability of
/// the true class; `γ = 0` is plain cross-entropy.
pub fn focal_loss<T: Real>(logits: &Tensor<T>, target: &Mask, gamma: f64) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.h != target.h || s.w != target.w {
        return Err(Error::Shape(alloc::format!(
            "logits {} against target {}x{}",
            s,
            target.h,
            target.w
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite);
    }
    if let Some(&bad) = target.data.iter().find(|&&t| t as usize >= s.c) {
        return Err(Error::InvalidClass {
            index: bad as usize,
            classes: s.c,
        });
    }
    let k = s.c;
    let plane = s.plane();
    let inv_n = 1.0 / plane.max(1) as f64;
    let log_floor = Float::ln(MIN_PROB);
    let data = logits.data();
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0f64;
    let mut e = vec![0.0f64; k];
    for (p, &t) in target.data.iter().enumerate() {
        let t = t as usize;
        let m = (0..k)
            .map(|c| data[c * plane + p].to_f64().unwrap_or(0.0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, ec) in e.iter_mut().enumerate() {
            *ec = Float::exp(data[c * plane + p].to_f64().unwrap_or(0.0) - m);
            sum += *ec;
        }
        let rest: f64 = e.iter().enumerate().filter(|&(c, _)| c != t).map(|(_, v)| v).sum();
        let q = rest / sum; // 1 − p_t without cancellation
        let pt = e[t] / sum;
        let raw_log = data[t * plane + p].to_f64().unwrap_or(0.0) - m - Float::ln(sum);
        let clamped = raw_log < log_floor;
        let log_pt = if clamped { log_floor } else { raw_log };
        let qg = if gamma == 0.0 { 1.0 } else { Float::powf(q, gamma) };
        total += -qg * log_pt;

        if q == 0.0 {
            continue;
        }
        // dL/dz_j = (δ_jt − p_j) · [γ p_t q^(γ−1) log p_t − q^γ]
        let focus = if gamma == 0.0 {
            0.0
        } else {
            gamma * pt * Float::powf(q, gamma - 1.0) * log_pt
        };
        let factor = if clamped { focus } else { focus - qg };
        for (c, &ec) in e.iter().enumerate() {
            let pj = ec / sum;
            let delta = if c == t { 1.0 } else { 0.0 };
            let g = (delta - pj) * factor * inv_n;
            grad.data_mut()[c * plane + p] = T::lit(g);
        }
    }
    Ok((T::lit(total * inv_n), grad))
}

/// `λ‖local − global‖₂` (Frobenius norm) and its gradient towards `local`.
///
/// The global side is a constant: no gradient is returned for it.
pub fn coupling_penalty<T: Real>(local: &Tensor<T>, global: &Tensor<T>, lambda: f64) -> Result<(T, Tensor<T>)> {
    if local.shape() != global.shape() {
        return Err(Error::Shape(alloc::format!(
            "penalty between {} and {}",
            local.shape(),
            global.shape()
        )));
    }
    let mut diff = local.clone();
    for (d, g) in diff.data_mut().iter_mut().zip(global.data()) {
        *d -= *g;
    }
    let norm = diff
        .data()
        .iter()
        .map(|v| {
            let v = v.to_f64().unwrap_or(0.0);
            v * v
        })
        .sum::<f64>();
    let norm = Float::sqrt(norm);
    if norm == 0.0 {
        return Ok((T::zero(), Tensor::zeros(local.shape())));
    }
    diff.scale(T::lit(lambda / norm));
    Ok((T::lit(lambda * norm), diff))
}

/// Records a focal loss node.
pub fn focal<T: Real>(g: &mut Graph<T>, logits: Var, target: &Mask, gamma: f64) -> Result<Var> {
    let (value, grad) = focal_loss(g.value(logits), target, gamma)?;
    Ok(g.scalar(value, vec![(logits, grad)]))
}

/// Records a coupling penalty node; gradients flow into `local` only.
pub fn coupling<T: Real>(g: &mut Graph<T>, local: Var, global: Var, lambda: f64) -> Result<Var> {
    let (value, grad) = coupling_penalty(g.value(local), g.value(global), lambda)?;
    Ok(g.scalar(value, vec![(local, grad)]))
}

/// Global branch alone on a downsampled pair.
pub fn phase1_objective<T: Real>(g: &mut Graph<T>, global_logits: Var, target_lr: &Mask, cfg: &LossConfig) -> Result<Var> {
    focal(g, global_logits, target_lr, cfg.gamma)
}

/// Local auxiliary term + aggregated term + coupling penalty, all in the
/// patch frame.
#[allow(clippy::too_many_arguments)]
pub fn phase2_objective<T: Real>(
    g: &mut Graph<T>,
    local_logits: Var,
    agg_logits: Var,
    target_hr: &Mask,
    global_last: Var,
    local_last: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let local = focal(g, local_logits, target_hr, cfg.gamma)?;
    let agg = focal(g, agg_logits, target_hr, cfg.gamma)?;
    let mut terms = vec![(local, T::lit(cfg.local_weight)), (agg, T::lit(cfg.main_weight))];
    if cfg.lambda > 0.0 {
        let pen = coupling(g, local_last, global_last, cfg.lambda)?;
        terms.push((pen, T::one()));
    }
    Ok(g.weighted_sum(&terms))
}

/// Global auxiliary term (global logits resampled to the patch frame) +
/// aggregated term.
pub fn phase3_objective<T: Real>(
    g: &mut Graph<T>,
    global_logits_at_patch: Var,
    agg_logits: Var,
    target_hr: &Mask,
    cfg: &LossConfig,
) -> Result<Var> {
    let global = focal(g, global_logits_at_patch, target_hr, cfg.gamma)?;
    let agg = focal(g, agg_logits, target_hr, cfg.gamma)?;
    Ok(g.weighted_sum(&[(global, T::lit(cfg.global_weight)), (agg, T::lit(cfg.main_weight))]))
}

/// Mean of per-item scalar objectives.
pub fn batch_mean<T: Real>(g: &mut Graph<T>, items: &[Var]) -> Var {
    let w = T::one() / T::from_usize(items.len().max(1)).expect("batch size fits");
    let terms: Vec<(Var, T)> = items.iter().map(|&v| (v, w)).collect();
    g.weighted_sum(&terms)
}
