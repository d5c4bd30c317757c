//! Parameter and flop accounting over masks, compression-at-drop extraction,
//! stability to pruning, and an SVG accuracy chart.
//!
//! Flop convention: one multiply-accumulate is 2 flops; bias adds are not
//! counted. ReLU and max-pool count 1 flop per surviving output element and
//! are reported separately from the multiply-accumulate total. All counts are
//! for a single sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::PruneRoundRecord;
use crate::models::{LayerKind, Model, ModelSpec};
use crate::pruning::MaskRegistry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
    pub total: usize,
    pub original: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    /// One entry per weighted layer.
    pub layers: Vec<LayerFootprint>,
    pub remaining: usize,
    pub original: usize,
}

impl FootprintReport {
    pub fn compression(&self) -> f64 {
        self.original as f64 / self.remaining as f64
    }

    pub fn remaining_pct(&self) -> f64 {
        100.0 * self.remaining as f64 / self.original as f64
    }
}

/// Number of weight elements per unit of `wl` that read from a live input.
fn live_inputs(spec: &ModelSpec, masks: &MaskRegistry, wl: usize) -> Result<usize> {
    Ok(masks.input_mask(spec, wl)?.iter().filter(|&&a| a).count())
}

/// Unmasked weights plus the biases of surviving units.
pub fn count_params(spec: &ModelSpec, masks: &MaskRegistry) -> Result<FootprintReport> {
    let mut layers = Vec::new();
    for (wl, l) in spec.weighted_specs().into_iter().enumerate() {
        let units = masks.alive_count(wl, spec);
        let weights = units * live_inputs(spec, masks, wl)?;
        layers.push(LayerFootprint {
            name: l.name.clone(),
            weights,
            biases: units,
            total: weights + units,
            original: l.param_count(),
        });
    }
    Ok(FootprintReport {
        remaining: layers.iter().map(|l| l.total).sum(),
        original: layers.iter().map(|l| l.original).sum(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopKind {
    Mac,
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub kind: FlopKind,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    /// Dense and conv layers (2 per MAC).
    pub mac: u64,
    /// ReLU and max-pool.
    pub elementwise: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.mac + self.elementwise
    }
}

/// Flops of one inference on a `(c, h, w)` input.
pub fn count_flops(
    spec: &ModelSpec,
    masks: &MaskRegistry,
    input: (usize, usize, usize),
) -> Result<FlopReport> {
    let mut s = spec.clone();
    s.input = input;
    let shapes = s.shapes()?;
    let mut layers = Vec::new();
    let (mut mac, mut elementwise) = (0u64, 0u64);
    // live channels (or features) of the current activation and the size of
    // each one
    let (mut live_ch, mut per_ch) = (input.0, input.1 * input.2);
    let mut wl = 0;
    for (i, l) in s.layers.iter().enumerate() {
        let out = &shapes[i];
        let flops = match l.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
                let units = masks.alive_count(wl, &s) as u64;
                let inputs = live_inputs(&s, masks, wl)? as u64;
                let spatial: usize = out[1..].iter().product();
                let f = 2 * units * inputs * spatial as u64;
                live_ch = units as usize;
                per_ch = spatial;
                wl += 1;
                mac += f;
                f
            }
            LayerKind::Relu => {
                let f = (live_ch * per_ch) as u64;
                elementwise += f;
                f
            }
            LayerKind::MaxPool { .. } => {
                per_ch = out[1..].iter().product();
                let f = (live_ch * per_ch) as u64;
                elementwise += f;
                f
            }
            LayerKind::Flatten => continue,
        };
        layers.push(LayerFlops {
            name: l.name.clone(),
            kind: if l.has_weights() {
                FlopKind::Mac
            } else {
                FlopKind::Elementwise
            },
            flops,
        });
    }
    Ok(FlopReport {
        layers,
        mac,
        elementwise,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub l2: f64,
    pub entries: usize,
}

/// L2 distance between the unmasked parameters (weights and biases) of a
/// retrained pruned model and a reference model.
pub fn stability(pruned: &Model, original: &Model, masks: &MaskRegistry) -> Result<StabilityReport> {
    if pruned.param_shapes() != original.param_shapes() {
        return Err(Error::Integrity(format!(
            "parameter shapes differ: {:?} vs {:?}",
            pruned.param_shapes(),
            original.param_shapes()
        )));
    }
    let em = masks.element_masks(&pruned.spec)?;
    if em.len() * 2 != pruned.params.len() {
        return Err(Error::Integrity("mask registry does not match the model".into()));
    }
    let (mut sum, mut entries) = (0.0f64, 0usize);
    for (wl, m) in em.iter().enumerate() {
        for (k, mask) in [(2 * wl, &m.weight), (2 * wl + 1, &m.bias)] {
            let a = pruned.params[k].data();
            let b = original.params[k].data();
            for ((&x, &y), &keep) in a.iter().zip(b).zip(mask.data()) {
                if keep != 0.0 {
                    let d = f64::from(x) - f64::from(y);
                    sum += d * d;
                    entries += 1;
                }
            }
        }
    }
    Ok(StabilityReport {
        l2: sum.sqrt(),
        entries,
    })
}

/// Tolerance when comparing accuracies (percent) that went through text.
const ACC_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropResult {
    pub ratio: f64,
    /// Round achieving the ratio; `None` when no pruned round qualified.
    pub round: Option<usize>,
    /// Flops of that round (of round 0 when none qualified).
    pub flops: u64,
    pub qualified: bool,
}

/// Largest compression among pruned rounds whose accuracy (percent) is at
/// least `baseline_acc - drop`. Falls back to 1.0 with `qualified = false`.
/// The original parameter count is taken from the round-0 record.
pub fn compression_at_drop(records: &[PruneRoundRecord], baseline_acc: f64, drop: f64) -> Result<DropResult> {
    let base = records
        .iter()
        .find(|r| r.round == 0)
        .ok_or_else(|| Error::Usage("records have no round 0".into()))?;
    let original = base.remaining_params as f64;
    let mut best = DropResult {
        ratio: 1.0,
        round: None,
        flops: base.flops,
        qualified: false,
    };
    for r in records.iter().filter(|r| r.round > 0) {
        if r.top1_acc + ACC_EPS < baseline_acc - drop {
            continue;
        }
        let ratio = original / r.remaining_params as f64;
        if !best.qualified || ratio > best.ratio {
            best = DropResult {
                ratio,
                round: Some(r.round),
                flops: r.flops,
                qualified: true,
            };
        }
    }
    Ok(best)
}

/// Fewest flops among rounds (including round 0) meeting the accuracy bar.
pub fn flops_at_drop(records: &[PruneRoundRecord], baseline_acc: f64, drop: f64) -> Option<u64> {
    records
        .iter()
        .filter(|r| r.round == 0 || r.top1_acc + ACC_EPS >= baseline_acc - drop)
        .map(|r| r.flops)
        .min()
}

/// Accuracy at `pct` remaining, interpolated linearly in log(remaining %)
/// between the two bracketing rounds. `None` when out of range.
pub fn accuracy_at_remaining(records: &[PruneRoundRecord], pct: f64) -> Option<f64> {
    records.windows(2).find_map(|w| {
        let (a, b) = (&w[0], &w[1]);
        if a.remaining_pct >= pct && pct >= b.remaining_pct {
            if a.remaining_pct == b.remaining_pct {
                return Some(b.top1_acc);
            }
            let t = (a.remaining_pct.ln() - pct.ln()) / (a.remaining_pct.ln() - b.remaining_pct.ln());
            Some(a.top1_acc + t * (b.top1_acc - a.top1_acc))
        } else {
            None
        }
    })
}

/// Accuracy (percent) against remaining parameters (percent, log axis,
/// decreasing to the right), one polyline per series.
pub fn svg_chart(title: &str, series: &[(&str, &[PruneRoundRecord])]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let pts = series.iter().flat_map(|(_, r)| r.iter());
    let min_pct = pts
        .clone()
        .map(|r| r.remaining_pct)
        .fold(100.0f64, f64::min)
        .max(1e-3);
    let (lo, hi) = (min_pct.log10().floor(), 2.0f64);
    let acc_lo = pts.map(|r| r.top1_acc).fold(100.0f64, f64::min).min(90.0);
    let acc_lo = (acc_lo / 10.0).floor() * 10.0;
    let x = |pct: f64| M + (hi - pct.max(1e-3).log10()) / (hi - lo).max(1e-9) * (W - 2.0 * M);
    let y = |acc: f64| H - M - (acc - acc_lo) / (100.0 - acc_lo) * (H - 2.0 * M);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - M,
        W - M,
        H - M,
        H - M
    );
    let mut e = hi;
    while e >= lo {
        let pct = 10f64.powf(e);
        s += &format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}%</text>\n",
            x(pct),
            H - M + 16.0,
            pct
        );
        e -= 1.0;
    }
    let mut a = acc_lo;
    while a <= 100.0 {
        s += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{a}</text>\n",
            M - 6.0,
            y(a) + 4.0
        );
        a += 10.0;
    }
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">remaining parameters</text>\n",
        W / 2.0,
        H - 10.0
    );
    s += &format!(
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">top-1 accuracy (%)</text>\n",
        H / 2.0,
        H / 2.0
    );
    for (i, (name, recs)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = recs
            .iter()
            .map(|r| format!("{:.1},{:.1}", x(r.remaining_pct), y(r.top1_acc)))
            .collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        );
        s += &format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - M - 80.0,
            M + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s += "</svg>\n";
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
