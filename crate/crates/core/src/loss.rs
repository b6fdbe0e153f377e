//! Training objective: image losses (L2 against HR, L2 consistency against
//! LR after re-degradation), detector-feature losses (L1 on the deep and out
//! taps) and Dynamic Weight Averaging across the enabled components.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::detector::{DetectionOutput, DetectorPass};
use crate::error::{Error, Result};
use crate::resample::Resampler;
use crate::types::{LossComponentId, ScaleFactor};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
/// Epoch means are floored here before ratios are taken (guard on).
pub const LOSS_FLOOR: f64 = 1e-12;

fn same_shape(a: &Array3<f64>, b: &Array3<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Mean squared error between `sr` and `hr`.
pub fn l2_hr(sr: &Array3<f64>, hr: &Array3<f64>) -> Result<f64> {
    Ok(l2_hr_with_grad(sr, hr)?.0)
}

pub fn l2_hr_with_grad(sr: &Array3<f64>, hr: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    same_shape(sr, hr, "L2_HR operands differ in shape")?;
    let diff = sr - hr;
    let n = diff.len() as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

fn lr_resampler(sr: &Array3<f64>, lr: &Array3<f64>, scale: ScaleFactor) -> Result<Resampler> {
    let s = scale.get();
    let (h, w, c) = sr.dim();
    if (lr.dim().0 * s, lr.dim().1 * s, lr.dim().2) != (h, w, c) {
        return Err(Error::Shape(format!(
            "L2_LR needs sr = lr x {s}, got sr {:?} and lr {:?}",
            sr.dim(),
            lr.dim()
        )));
    }
    Ok(Resampler::new((h, w), (h / s, w / s)))
}

/// Mean squared error between the bicubic downsampling of `sr` and `lr`.
pub fn l2_lr(sr: &Array3<f64>, lr: &Array3<f64>, scale: ScaleFactor) -> Result<f64> {
    Ok(l2_lr_with_grad(sr, lr, scale)?.0)
}

pub fn l2_lr_with_grad(sr: &Array3<f64>, lr: &Array3<f64>, scale: ScaleFactor) -> Result<(f64, Array3<f64>)> {
    let down = lr_resampler(sr, lr, scale)?;
    let (value, g) = l2_hr_with_grad(&down.apply(sr), lr)?;
    Ok((value, down.apply_transpose(&g)))
}

/// Mean absolute difference between feature maps.
pub fn task_l1(features_sr: &Array3<f64>, features_target: &Array3<f64>) -> Result<f64> {
    same_shape(features_sr, features_target, "feature maps differ in shape")?;
    let n = features_sr.len() as f64;
    Ok(Zip::from(features_sr).and(features_target).fold(0.0, |acc, a, b| acc + (a - b).abs()) / n)
}

/// Subgradient of [`task_l1`] with respect to `features_sr` (zero at ties).
pub fn task_l1_grad(features_sr: &Array3<f64>, features_target: &Array3<f64>) -> Result<Array3<f64>> {
    same_shape(features_sr, features_target, "feature maps differ in shape")?;
    let n = features_sr.len() as f64;
    let mut g = features_sr - features_target;
    g.mapv_inplace(|d| if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 });
    Ok(g)
}

/// Coordinates and scores stacked along channels, the TASK_OUT feature space.
pub fn out_features(coords: &Array3<f64>, scores: &Array3<f64>) -> Result<Array3<f64>> {
    ndarray::concatenate(Axis(2), &[coords.view(), scores.view()])
        .map_err(|e| Error::Shape(format!("out taps do not stack: {e}")))
}

/// Which components DWA balances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwaScope {
    /// Every enabled component.
    #[default]
    All,
    /// Task components only; image components keep weight 1.
    TaskOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwaConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub scope: DwaScope,
    /// Floor epoch means at [`LOSS_FLOOR`] instead of failing on zero losses.
    #[serde(default = "default_guard")]
    pub guard: bool,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_guard() -> bool {
    true
}

impl Default for DwaConfig {
    fn default() -> Self {
        DwaConfig { temperature: DEFAULT_TEMPERATURE, scope: DwaScope::All, guard: true }
    }
}

/// `N exp(r_x / T) / sum_i exp(r_i / T)` for every x.
pub fn dwa_weights(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let n = ratios.len() as f64;
    // Shifting by the max leaves the softmax unchanged and cannot overflow.
    let top = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = ratios.iter().map(|r| ((r - top) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| n * v / sum).collect()
}

/// Per-component loss history and current weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    pub config: DwaConfig,
    pub enabled: BTreeSet<LossComponentId>,
    pub history: BTreeMap<LossComponentId, Vec<f64>>,
    pub weights: BTreeMap<LossComponentId, f64>,
}

impl DwaState {
    pub fn new(enabled: &BTreeSet<LossComponentId>, config: DwaConfig) -> Result<Self> {
        if enabled.is_empty() {
            return Err(Error::config("enabled_losses", "at least one loss component must be enabled"));
        }
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(Error::config("dwa.temperature", "must be a positive number"));
        }
        Ok(DwaState {
            config,
            enabled: enabled.clone(),
            history: enabled.iter().map(|&id| (id, Vec::new())).collect(),
            weights: enabled.iter().map(|&id| (id, 1.0)).collect(),
        })
    }

    /// Components whose weights DWA sets.
    pub fn balanced(&self) -> Vec<LossComponentId> {
        self.enabled
            .iter()
            .copied()
            .filter(|id| self.config.scope == DwaScope::All || id.is_task())
            .collect()
    }

    /// Number of balanced components; their weights sum to this.
    pub fn n_tasks(&self) -> usize {
        self.balanced().len()
    }

    pub fn weight(&self, id: LossComponentId) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    pub fn epochs_seen(&self) -> usize {
        self.history.values().map(Vec::len).min().unwrap_or(0)
    }

    /// Appends one epoch of mean losses and recomputes the weights used for
    /// the next epoch.
    pub fn update(&mut self, epoch_means: &BTreeMap<LossComponentId, f64>) -> Result<()> {
        let mut row = BTreeMap::new();
        for &id in &self.enabled {
            let v = *epoch_means
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("epoch means lack enabled component {id}")))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(id));
            }
            let v = if self.config.guard {
                v.max(LOSS_FLOOR)
            } else if v <= 0.0 {
                return Err(Error::DegenerateHistory(format!("{id} has epoch mean {v}; enable the guard to floor it")));
            } else {
                v
            };
            row.insert(id, v);
        }
        for (id, v) in row {
            self.history.get_mut(&id).expect("enabled ids have histories").push(v);
        }
        let balanced = self.balanced();
        let ratios: Vec<f64> = balanced
            .iter()
            .map(|id| {
                let h = &self.history[id];
                match h.len() {
                    0 | 1 => 1.0,
                    n => h[n - 1] / h[n - 2],
                }
            })
            .collect();
        for (id, w) in balanced.iter().zip(dwa_weights(&ratios, self.config.temperature)) {
            self.weights.insert(*id, w);
        }
        Ok(())
    }
}

/// Functional form of [`DwaState::update`].
pub fn dwa_update(state: &DwaState, epoch_means: &BTreeMap<LossComponentId, f64>) -> Result<DwaState> {
    let mut next = state.clone();
    next.update(epoch_means)?;
    Ok(next)
}

/// Component values, the weights applied and their weighted sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub values: BTreeMap<LossComponentId, f64>,
    pub weights: BTreeMap<LossComponentId, f64>,
    pub enabled: BTreeSet<LossComponentId>,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(values: BTreeMap<LossComponentId, f64>, state: &DwaState) -> Result<Self> {
        for (&id, &v) in &values {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss(id));
            }
        }
        let weights: BTreeMap<_, _> = state.enabled.iter().map(|&id| (id, state.weight(id))).collect();
        let total = state.enabled.iter().map(|id| weights[id] * values[id]).sum();
        Ok(LossBreakdown { values, weights, enabled: state.enabled.clone(), total })
    }
}

fn need_task_inputs<T>(x: Option<T>, state: &DwaState) -> Result<Option<T>> {
    if state.enabled.iter().any(|id| id.is_task()) && x.is_none() {
        return Err(Error::InvalidArgument("task losses are enabled but no detections were supplied".into()));
    }
    Ok(x)
}

/// Values of every enabled component and the weighted total. No gradients.
pub fn composite_loss(
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    lr: &Array3<f64>,
    scale: ScaleFactor,
    detections: Option<(&DetectionOutput, &DetectionOutput)>,
    state: &DwaState,
) -> Result<LossBreakdown> {
    let detections = need_task_inputs(detections, state)?;
    let mut values = BTreeMap::new();
    for &id in &state.enabled {
        let v = match id {
            LossComponentId::L2Hr => l2_hr(sr, hr)?,
            LossComponentId::L2Lr => l2_lr(sr, lr, scale)?,
            LossComponentId::TaskDeep => {
                let (d_sr, d_t) = detections.expect("checked above");
                task_l1(&d_sr.deep_features, &d_t.deep_features)?
            }
            LossComponentId::TaskOut => {
                let (d_sr, d_t) = detections.expect("checked above");
                task_l1(
                    &out_features(&d_sr.out_coords, &d_sr.out_scores)?,
                    &out_features(&d_t.out_coords, &d_t.out_scores)?,
                )?
            }
        };
        values.insert(id, v);
    }
    LossBreakdown::assemble(values, state)
}

/// The breakdown plus the gradient of its total with respect to `sr`.
#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub breakdown: LossBreakdown,
    pub grad_sr: Array3<f64>,
}

/// [`composite_loss`] with gradients. `det_sr` is a recorded detector pass
/// over `sr`; the target is plain data, so nothing flows back into it, and
/// the detector pass propagates to its input only.
pub fn composite_loss_with_grad(
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    lr: &Array3<f64>,
    scale: ScaleFactor,
    detections: Option<(DetectorPass<'_>, &DetectionOutput)>,
    state: &DwaState,
) -> Result<CompositeLoss> {
    let detections = need_task_inputs(detections, state)?;
    let mut values = BTreeMap::new();
    let mut grad = Array3::<f64>::zeros(sr.dim());
    for &id in &state.enabled {
        let w = state.weight(id);
        match id {
            LossComponentId::L2Hr => {
                let (v, g) = l2_hr_with_grad(sr, hr)?;
                values.insert(id, v);
                grad.scaled_add(w, &g);
            }
            LossComponentId::L2Lr => {
                let (v, g) = l2_lr_with_grad(sr, lr, scale)?;
                values.insert(id, v);
                grad.scaled_add(w, &g);
            }
            LossComponentId::TaskDeep | LossComponentId::TaskOut => {}
        }
    }
    if let Some((pass, target)) = detections {
        let mut d_deep = None;
        let (mut d_coords, mut d_scores) = (None, None);
        if state.enabled.contains(&LossComponentId::TaskDeep) {
            let v = task_l1(pass.deep(), &target.deep_features)?;
            values.insert(LossComponentId::TaskDeep, v);
            d_deep = Some(task_l1_grad(pass.deep(), &target.deep_features)? * state.weight(LossComponentId::TaskDeep));
        }
        if state.enabled.contains(&LossComponentId::TaskOut) {
            let f_sr = out_features(pass.coords(), pass.scores())?;
            let f_t = out_features(&target.out_coords, &target.out_scores)?;
            values.insert(LossComponentId::TaskOut, task_l1(&f_sr, &f_t)?);
            let g = task_l1_grad(&f_sr, &f_t)? * state.weight(LossComponentId::TaskOut);
            let split = pass.coords().dim().2;
            d_coords = Some(g.slice(ndarray::s![.., .., ..split]).to_owned());
            d_scores = Some(g.slice(ndarray::s![.., .., split..]).to_owned());
        }
        if state.enabled.iter().any(|id| id.is_task()) {
            grad += &pass.input_gradient(d_deep, d_coords, d_scores);
        }
    }
    let breakdown = LossBreakdown::assemble(values, state)?;
    Ok(CompositeLoss { breakdown, grad_sr: grad })
}
