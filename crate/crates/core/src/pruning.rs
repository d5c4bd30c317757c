//! Structured masks and the three pruning policies.
//!
//! A unit is an output neuron of a dense layer or a filter of a conv layer.
//! [`MaskRegistry`] keeps one keep/drop flag per unit of every prunable layer
//! and expands it into elementwise masks on demand. Masks are monotone: a
//! dropped unit never comes back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{LayerMask, Mode, Model, ModelSpec, RateClass};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Smallest weight L1 norm first.
    Ilp,
    /// Fixed fraction with the smallest mean activation.
    Iap,
    /// Everything at or below an adaptive activation threshold.
    Aiap,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Ilp => "ilp",
            Policy::Iap => "iap",
            Policy::Aiap => "aiap",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ilp" => Ok(Policy::Ilp),
            "iap" => Ok(Policy::Iap),
            "aiap" => Ok(Policy::Aiap),
            other => Err(Error::Config(format!("unknown policy {other:?}"))),
        }
    }
}

/// How the per-unit activation sum is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MeanMode {
    /// Divide by `batch * h * w` (true per-element mean).
    #[default]
    PerElement,
    /// Divide by `batch` only.
    PerBatch,
}

/// Per-class pruning fractions for ILP / IAP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub dense: f64,
    pub conv: f64,
}

impl Rates {
    pub fn for_class(&self, c: RateClass) -> f64 {
        match c {
            RateClass::Dense => self.dense,
            RateClass::Conv => self.conv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRegistry {
    /// `Some(alive flags)` for prunable weighted layers, `None` otherwise.
    units: Vec<Option<Vec<bool>>>,
    /// Also mask consumer weights that read from dropped units.
    pub cascade: bool,
}

impl MaskRegistry {
    pub fn new(spec: &ModelSpec, cascade: bool) -> Self {
        let units = spec
            .weighted_specs()
            .iter()
            .map(|l| l.prunable.then(|| vec![true; l.units()]))
            .collect();
        Self { units, cascade }
    }

    pub fn layers(&self) -> usize {
        self.units.len()
    }

    pub fn is_prunable(&self, wl: usize) -> bool {
        matches!(self.units.get(wl), Some(Some(_)))
    }

    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&l| self.is_prunable(l)).collect()
    }

    pub fn unit_mask(&self, wl: usize) -> Option<&[bool]> {
        self.units.get(wl).and_then(|u| u.as_deref())
    }

    /// Whether unit `u` of weighted layer `wl` is kept. Units of
    /// non-prunable layers are always kept.
    pub fn is_alive(&self, wl: usize, u: usize) -> bool {
        match &self.units[wl] {
            Some(m) => m[u],
            None => true,
        }
    }

    pub fn alive_units(&self, wl: usize, spec: &ModelSpec) -> Vec<usize> {
        let n = spec.weighted_specs()[wl].units();
        (0..n).filter(|&u| self.is_alive(wl, u)).collect()
    }

    pub fn alive_count(&self, wl: usize, spec: &ModelSpec) -> usize {
        match &self.units[wl] {
            Some(m) => m.iter().filter(|&&a| a).count(),
            None => spec.weighted_specs()[wl].units(),
        }
    }

    /// True once every prunable layer is down to a single unit.
    pub fn exhausted(&self) -> bool {
        self.units
            .iter()
            .flatten()
            .all(|m| m.iter().filter(|&&a| a).count() <= 1)
    }

    /// Per weight element of one unit of `wl`: does it read from a live
    /// producer unit? All true without cascade.
    pub fn input_mask(&self, spec: &ModelSpec, wl: usize) -> Result<Vec<bool>> {
        let layer = spec.weighted_specs()[wl];
        let n = layer.unit_len();
        let src = if self.cascade {
            spec.input_source(wl)?
        } else {
            None
        };
        let Some(src) = src else {
            return Ok(vec![true; n]);
        };
        let per_channel = match layer.kind {
            crate::models::LayerKind::Conv2d { k, .. } => k * k,
            _ => 1,
        };
        Ok((0..n)
            .map(|i| self.is_alive(src.layer, i / per_channel / src.elems_per_unit))
            .collect())
    }

    /// Elementwise 0/1 masks for every weighted layer.
    pub fn element_masks(&self, spec: &ModelSpec) -> Result<Vec<LayerMask>> {
        let layers = spec.weighted_specs();
        let mut out = Vec::with_capacity(layers.len());
        for (wl, l) in layers.iter().enumerate() {
            let input = self.input_mask(spec, wl)?;
            let mut w = Vec::with_capacity(l.units() * input.len());
            let mut b = Vec::with_capacity(l.units());
            for u in 0..l.units() {
                let alive = self.is_alive(wl, u);
                w.extend(input.iter().map(|&ia| if alive && ia { 1.0 } else { 0.0 }));
                b.push(if alive { 1.0 } else { 0.0 });
            }
            out.push(LayerMask {
                weight: Tensor::new(l.weight_shape(), w)?,
                bias: Tensor::new(vec![l.units()], b)?,
            });
        }
        Ok(out)
    }

    /// Forces every masked parameter element of `model` to exactly zero.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let masks = self.element_masks(&model.spec)?;
        for (wl, m) in masks.iter().enumerate() {
            zero_where_masked(&mut model.params[2 * wl], &m.weight);
            zero_where_masked(&mut model.params[2 * wl + 1], &m.bias);
        }
        Ok(())
    }

    /// Applies a decision. Fails without changing anything if it names an
    /// already-dropped unit or would empty a layer.
    pub fn apply_decision(&mut self, d: &PruneDecision) -> Result<()> {
        let mut next = self.units.clone();
        for &(wl, u) in &d.units {
            let layer = next
                .get_mut(wl)
                .and_then(Option::as_mut)
                .ok_or_else(|| Error::Usage(format!("layer {wl} is not prunable")))?;
            match layer.get_mut(u) {
                Some(alive @ true) => *alive = false,
                Some(false) => return Err(Error::Usage(format!("unit {u} of layer {wl} already pruned"))),
                None => return Err(Error::Usage(format!("unit {u} outside layer {wl}"))),
            }
        }
        if let Some(wl) = next
            .iter()
            .position(|m| m.as_ref().is_some_and(|m| !m.iter().any(|&a| a)))
        {
            return Err(Error::Policy(format!("decision would empty layer {wl}")));
        }
        self.units = next;
        Ok(())
    }

    /// Remaining parameters of the prunable layers (weights + biases).
    pub fn prunable_params(&self, spec: &ModelSpec) -> Result<usize> {
        let report = metrics::count_params(spec, self)?;
        Ok(self
            .prunable_layers()
            .iter()
            .map(|&wl| report.layers[wl].total)
            .sum())
    }
}

fn zero_where_masked(p: &mut Tensor, mask: &Tensor) {
    for (v, &m) in p.data_mut().iter_mut().zip(mask.data()) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
}

/// Units to drop in one round, as `(weighted layer, unit)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub policy: Policy,
    pub round: usize,
    pub units: Vec<(usize, usize)>,
}

impl PruneDecision {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn count_in(&self, wl: usize) -> usize {
        self.units.iter().filter(|&&(l, _)| l == wl).count()
    }
}

/// L1 norm of every unit's weight slice (biases excluded).
pub fn unit_l1_norms(model: &Model, wl: usize) -> Vec<f64> {
    let l = model.spec.weighted_specs()[wl];
    model
        .weight(wl)
        .data()
        .chunks(l.unit_len())
        .map(|c| c.iter().map(|&v| f64::from(v).abs()).sum())
        .collect()
}

fn ascending(scores: &[f64], alive: &[usize]) -> Vec<usize> {
    let mut order = alive.to_vec();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Live units of a prunable layer, ascending by weight L1 norm (ties by
/// lower index).
pub fn l1_rank(model: &Model, masks: &MaskRegistry, wl: usize) -> Result<Vec<usize>> {
    if !masks.is_prunable(wl) {
        return Err(Error::Usage(format!("layer {wl} is not prunable")));
    }
    let alive = masks.alive_units(wl, &model.spec);
    if alive.is_empty() {
        return Err(Error::Policy(format!("layer {wl} has no live units")));
    }
    Ok(ascending(&unit_l1_norms(model, wl), &alive))
}

/// Mean post-ReLU activation of every unit of every prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub means: Vec<Option<Vec<f64>>>,
}

impl ActivationStats {
    pub fn layer(&self, wl: usize) -> Option<&[f64]> {
        self.means.get(wl).and_then(|m| m.as_deref())
    }
}

/// Mean of one unit's slice of a captured activation tensor
/// (`[b, units]` or `[b, units, h, w]`).
pub fn activation_mean(act: &Tensor, unit: usize, mode: MeanMode) -> Result<f64> {
    let s = act.shape();
    if s.len() < 2 || unit >= s[1] {
        return Err(Error::Usage(format!(
            "unit {unit} not in activation of shape {s:?}"
        )));
    }
    let (b, units) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let mut sum = 0.0f64;
    for n in 0..b {
        let start = (n * units + unit) * spatial;
        sum += act.data()[start..start + spatial]
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>();
    }
    Ok(match mode {
        MeanMode::PerElement => sum / (b * spatial) as f64,
        MeanMode::PerBatch => sum / b as f64,
    })
}

/// Runs the stats batch through the masked model (eval mode) and averages
/// each live unit's activation. Dropped units report exactly 0.
pub fn collect_activation_stats(
    model: &Model,
    masks: &MaskRegistry,
    batch: &Tensor,
    mode: MeanMode,
) -> Result<ActivationStats> {
    let em = masks.element_masks(&model.spec)?;
    let fwd = model.forward(batch.clone(), Some(&em), Mode::Eval, true)?;
    let mut means: Vec<Option<Vec<f64>>> = vec![None; masks.layers()];
    for &(wl, var) in &fwd.activations {
        if !masks.is_prunable(wl) {
            continue;
        }
        let act = fwd.tape.value(var);
        let units = model.spec.weighted_specs()[wl].units();
        let m = (0..units)
            .map(|u| {
                if masks.is_alive(wl, u) {
                    activation_mean(act, u, mode)
                } else {
                    Ok(0.0)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        means[wl] = Some(m);
    }
    for wl in masks.prunable_layers() {
        if means[wl].is_none() {
            return Err(Error::Usage(format!("no activation captured for layer {wl}")));
        }
    }
    Ok(ActivationStats { means })
}

/// Drops `floor(rate * m)` live units with the smallest score from every
/// prunable layer, `m` being the current live count. At least one unit
/// always survives.
fn select_fraction(
    policy: Policy,
    round: usize,
    spec: &ModelSpec,
    masks: &MaskRegistry,
    rates: Rates,
    score: impl Fn(usize) -> Result<Vec<f64>>,
) -> Result<PruneDecision> {
    for r in [rates.dense, rates.conv] {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("pruning rate {r} outside (0, 1)")));
        }
    }
    let layers = spec.weighted_specs();
    let mut units = Vec::new();
    for wl in masks.prunable_layers() {
        let alive = masks.alive_units(wl, spec);
        let class = layers[wl].rate_class().expect("weighted layer");
        let m = alive.len();
        let n = ((rates.for_class(class) * m as f64).floor() as usize).min(m.saturating_sub(1));
        if n == 0 {
            continue;
        }
        let scores = score(wl)?;
        units.extend(ascending(&scores, &alive).into_iter().take(n).map(|u| (wl, u)));
    }
    Ok(PruneDecision { policy, round, units })
}

/// IAP: per layer, the `floor(p * m)` live units with the smallest mean
/// activation.
pub fn iap_select(
    stats: &ActivationStats,
    spec: &ModelSpec,
    masks: &MaskRegistry,
    rates: Rates,
    round: usize,
) -> Result<PruneDecision> {
    select_fraction(Policy::Iap, round, spec, masks, rates, |wl| {
        stats
            .layer(wl)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Usage(format!("no activation stats for layer {wl}")))
    })
}

/// ILP: per layer, the `floor(p * m)` live units with the smallest weight L1.
pub fn ilp_select(model: &Model, masks: &MaskRegistry, rates: Rates, round: usize) -> Result<PruneDecision> {
    select_fraction(Policy::Ilp, round, &model.spec, masks, rates, |wl| {
        Ok(unit_l1_norms(model, wl))
    })
}

/// Adaptive threshold state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiapState {
    pub lambda: f64,
    /// `thresholds[r]` is `T[r]`; `T[0] = 0`.
    pub thresholds: Vec<f64>,
    /// `history[r]` is the remaining prunable-parameter count after round
    /// `r`; `history[0]` is the original count.
    pub history: Vec<usize>,
}

/// Fraction of the original prunable parameters that must go in a round
/// for the threshold to hold still.
pub const AIAP_PROGRESS: f64 = 0.01;

impl AiapState {
    pub fn new(lambda: f64, original: usize) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(Self {
            lambda,
            thresholds: vec![0.0],
            history: vec![original],
        })
    }

    pub fn threshold(&self) -> f64 {
        *self.thresholds.last().expect("T[0] always present")
    }

    pub fn record_remaining(&mut self, remaining: usize) {
        self.history.push(remaining);
    }

    /// Computes and stores `T[r]`:
    /// `0` for `r <= 3`; otherwise with `d = (P[r-2] - P[r-1]) / P[0]`,
    /// `T[r-1] + lambda` when `d < 1%`, else `T[r-1]`.
    pub fn update_threshold(&mut self, r: usize) -> Result<f64> {
        if r == 0 || self.thresholds.len() != r {
            return Err(Error::Usage(format!(
                "threshold for round {r} requested with {} thresholds recorded",
                self.thresholds.len()
            )));
        }
        let t = if r <= 3 {
            0.0
        } else {
            if self.history.len() < r {
                return Err(Error::Usage(format!(
                    "round {r} needs P[{}] and P[{}], history has {} entries",
                    r - 2,
                    r - 1,
                    self.history.len()
                )));
            }
            let p0 = self.history[0] as f64;
            let d = (self.history[r - 2] as f64 - self.history[r - 1] as f64) / p0;
            let prev = self.thresholds[r - 1];
            if d < AIAP_PROGRESS {
                prev + self.lambda
            } else {
                prev
            }
        };
        self.thresholds.push(t);
        Ok(t)
    }
}

/// AIAP: every live unit whose mean activation is `<= threshold`. When a
/// whole layer falls below, its largest-mean unit (lowest index on ties) is
/// kept.
pub fn aiap_select(
    stats: &ActivationStats,
    spec: &ModelSpec,
    masks: &MaskRegistry,
    threshold: f64,
    round: usize,
) -> Result<PruneDecision> {
    let mut units = Vec::new();
    for wl in masks.prunable_layers() {
        let means = stats
            .layer(wl)
            .ok_or_else(|| Error::Usage(format!("no activation stats for layer {wl}")))?;
        let alive = masks.alive_units(wl, spec);
        let mut chosen: Vec<usize> = alive.iter().copied().filter(|&u| means[u] <= threshold).collect();
        if chosen.len() == alive.len() {
            let keep = *ascending(means, &alive)
                .iter()
                .rev()
                .reduce(|best, u| if means[*u] == means[*best] { u } else { best })
                .expect("live units");
            chosen.retain(|&u| u != keep);
        }
        units.extend(chosen.into_iter().map(|u| (wl, u)));
    }
    Ok(PruneDecision {
        policy: Policy::Aiap,
        round,
        units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec::lenet300(0)
    }

    fn stats_for(means_fc1: Vec<f64>, means_fc2: Vec<f64>) -> ActivationStats {
        ActivationStats {
            means: vec![Some(means_fc1), Some(means_fc2), None],
        }
    }

    #[test]
    fn l1_of_filter() {
        let v = [1.0f64, -2.0, 0.5, 0.0];
        assert_eq!(v.iter().map(|x| x.abs()).sum::<f64>(), 3.5);
        assert_eq!(ascending(&[3.5, 0.1, 2.0], &[0, 1, 2]), vec![1, 2, 0]);
        assert_eq!(ascending(&[1.0, 1.0, 0.5], &[0, 1, 2]), vec![2, 0, 1]);
    }

    #[test]
    fn l1_rank_skips_dead_units() {
        let model = Model::lenet300(1);
        let mut masks = MaskRegistry::new(&model.spec, false);
        masks
            .apply_decision(&PruneDecision {
                policy: Policy::Ilp,
                round: 1,
                units: vec![(1, 5)],
            })
            .unwrap();
        let r = l1_rank(&model, &masks, 1).unwrap();
        assert_eq!(r.len(), 99);
        assert!(!r.contains(&5));
        assert!(l1_rank(&model, &masks, 2).is_err());
    }

    #[test]
    fn iap_prunes_smallest_mean() {
        let spec = ModelSpec {
            id: crate::models::ModelId::Lenet300,
            input: (1, 1, 4),
            layers: vec![
                crate::models::LayerSpec {
                    name: "flatten".into(),
                    kind: crate::models::LayerKind::Flatten,
                    prunable: false,
                },
                crate::models::LayerSpec {
                    name: "fc1".into(),
                    kind: crate::models::LayerKind::Dense { inp: 4, out: 4 },
                    prunable: true,
                },
                crate::models::LayerSpec {
                    name: "fc2".into(),
                    kind: crate::models::LayerKind::Dense { inp: 4, out: 2 },
                    prunable: false,
                },
            ],
            seed: 0,
        };
        let masks = MaskRegistry::new(&spec, false);
        let stats = ActivationStats {
            means: vec![Some(vec![0.5, 0.0, 0.3, 0.1]), None],
        };
        let rates = Rates {
            dense: 0.25,
            conv: 0.1,
        };
        let d = iap_select(&stats, &spec, &masks, rates, 1).unwrap();
        assert_eq!(d.units, vec![(0, 1)]);
    }

    #[test]
    fn floor_rule_counts() {
        let s = spec();
        let masks = MaskRegistry::new(&s, false);
        let stats = stats_for(vec![1.0; 300], vec![1.0; 100]);
        let d = iap_select(
            &stats,
            &s,
            &masks,
            Rates {
                dense: 0.2,
                conv: 0.1,
            },
            1,
        )
        .unwrap();
        assert_eq!(d.count_in(0), 60);
        assert_eq!(d.count_in(1), 20);
        // ties go to the lowest indices
        assert_eq!(d.units[0], (0, 0));
        assert_eq!(d.units[59], (0, 59));
    }

    #[test]
    fn floor_of_small_layer_is_zero() {
        assert_eq!((0.1f64 * 3.0).floor() as usize, 0);
        assert_eq!((0.2f64 * 10.0).floor() as usize, 2);
    }

    #[test]
    fn aiap_threshold_branches() {
        let mut st = AiapState::new(0.01, 1000).unwrap();
        for (r, p) in [(1, 900), (2, 800), (3, 795)] {
            assert_eq!(st.update_threshold(r).unwrap(), 0.0);
            st.record_remaining(p);
        }
        // d = (800 - 795) / 1000 = 0.5% -> increment
        assert!((st.update_threshold(4).unwrap() - 0.01).abs() < 1e-15);
        st.record_remaining(775);
        // d = (795 - 775) / 1000 = 2% -> hold
        assert!((st.update_threshold(5).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn aiap_threshold_needs_history() {
        let mut st = AiapState::new(0.01, 1000).unwrap();
        for r in 1..=3 {
            st.update_threshold(r).unwrap();
        }
        assert!(matches!(st.update_threshold(4), Err(Error::Usage(_))));
        assert!(AiapState::new(0.0, 10).is_err());
    }

    #[test]
    fn aiap_select_boundary_and_keep_one() {
        let s = spec();
        let masks = MaskRegistry::new(&s, false);
        let mut fc1 = vec![0.5; 300];
        fc1[3] = 0.0;
        fc1[7] = 0.0;
        let stats = stats_for(fc1, vec![0.05; 100]);
        let d = aiap_select(&stats, &s, &masks, 0.0, 1).unwrap();
        assert_eq!(d.units, vec![(0, 3), (0, 7)]);

        let mut fc2 = vec![0.01; 100];
        fc2[42] = 0.02;
        let stats = stats_for([0.05, 0.2].repeat(150), fc2);
        let d = aiap_select(&stats, &s, &masks, 0.1, 1).unwrap();
        assert_eq!(d.count_in(0), 150);
        assert!(d.units.iter().all(|&(l, u)| l != 0 || u % 2 == 0));
        assert_eq!(d.count_in(1), 99);
        assert!(!d.units.contains(&(1, 42)));
    }

    #[test]
    fn apply_decision_rejects_double_prune() {
        let s = spec();
        let mut masks = MaskRegistry::new(&s, false);
        let d = PruneDecision {
            policy: Policy::Iap,
            round: 1,
            units: vec![(0, 1)],
        };
        masks.apply_decision(&d).unwrap();
        assert!(matches!(masks.apply_decision(&d), Err(Error::Usage(_))));
        let before = masks.clone();
        let empty = PruneDecision {
            units: vec![],
            ..d.clone()
        };
        masks.apply_decision(&empty).unwrap();
        assert_eq!(masks, before);
    }

    #[test]
    fn apply_decision_never_empties_layer() {
        let s = spec();
        let mut masks = MaskRegistry::new(&s, false);
        let all: Vec<_> = (0..100).map(|u| (1, u)).collect();
        let d = PruneDecision {
            policy: Policy::Aiap,
            round: 1,
            units: all,
        };
        assert!(matches!(masks.apply_decision(&d), Err(Error::Policy(_))));
        assert_eq!(masks.alive_count(1, &s), 100);
    }

    #[test]
    fn activation_mean_modes() {
        let act = Tensor::from_f64(&[2, 2, 1, 2], &[1., 3., 0., 0., 5., 7., 0., 0.]).unwrap();
        assert_eq!(activation_mean(&act, 0, MeanMode::PerElement).unwrap(), 4.0);
        assert_eq!(activation_mean(&act, 0, MeanMode::PerBatch).unwrap(), 8.0);
        assert_eq!(activation_mean(&act, 1, MeanMode::PerElement).unwrap(), 0.0);
        let c = Tensor::full(&[3, 4], 2.5f32);
        assert_eq!(activation_mean(&c, 2, MeanMode::PerElement).unwrap(), 2.5);
        assert!(activation_mean(&c, 4, MeanMode::PerElement).is_err());
    }
}
