//! Calibration, segmentation and OOD metrics. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One equal-width confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    /// Zero for empty bins.
    pub mean_conf: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Σ_b (n_b / N) |acc_b − conf_b|.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.mean_conf).abs())
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,mean_conf,accuracy,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{},{}\n", b.low, b.high, b.mean_conf, b.accuracy, b.count));
        }
        out
    }
}

/// Bin index of a confidence; 1.0 falls in the last bin.
fn bin_of(conf: f64, n_bins: usize) -> usize {
    ((conf * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn reliability_bins(confidence: &[f64], correct: &[bool], n_bins: usize) -> Result<ReliabilityBins> {
    if confidence.is_empty() {
        return Err(CoreError::metric("ece", "empty input"));
    }
    if confidence.len() != correct.len() {
        return Err(CoreError::metric(
            "ece",
            format!("length mismatch: {} confidences, {} outcomes", confidence.len(), correct.len()),
        ));
    }
    if n_bins == 0 {
        return Err(CoreError::metric("ece", "n_bins must be at least 1"));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(CoreError::metric("ece", format!("confidence {c} outside [0, 1]")));
        }
        let b = bin_of(c, n_bins);
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
        counts[b] += 1;
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = counts[b];
            let (mean_conf, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / n as f64, hits[b] as f64 / n as f64)
            };
            Bin {
                low: b as f64 / n_bins as f64,
                high: (b + 1) as f64 / n_bins as f64,
                mean_conf,
                accuracy,
                count: n,
            }
        })
        .collect();
    Ok(ReliabilityBins { n_bins, bins })
}

/// Expected calibration error with equal-width bins.
pub fn ece(confidence: &[f64], correct: &[bool], n_bins: usize) -> Result<f64> {
    Ok(reliability_bins(confidence, correct, n_bins)?.ece())
}

/// Plug-in mutual information (nats) of two discrete label sequences.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::metric("mi", "inputs must be non-empty and of equal length"));
    }
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; na * nb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * nb + y] += 1;
    }
    let n = a.len() as f64;
    let row: Vec<usize> = (0..na).map(|x| joint[x * nb..][..nb].iter().sum()).collect();
    let col: Vec<usize> = (0..nb).map(|y| (0..na).map(|x| joint[x * nb + y]).sum()).collect();
    let mut mi = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let c = joint[x * nb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy / (row[x] as f64 / n * col[y] as f64 / n)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Quantile levels: cut points at the `j/L` empirical quantiles, duplicates
/// merged, so tied values always share a level. A cut at the minimum would
/// leave level 0 empty and is dropped, so non-constant input always spans
/// at least two levels.
pub fn quantile_levels(values: &[f64], n_levels: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..n_levels).map(|j| sorted[j * n / n_levels]).collect();
    edges.dedup();
    edges.retain(|&e| e > sorted[0]);
    if edges.is_empty() {
        edges.extend(sorted.iter().copied().find(|&v| v > sorted[0]));
    }
    values
        .iter()
        .map(|v| edges.partition_point(|e| e <= v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub nats: f64,
    /// Set when the uncertainty is constant and the estimate is forced to 0.
    pub degenerate: bool,
}

impl MiEstimate {
    /// The ×100-nats reporting convention.
    pub fn scaled(&self) -> f64 {
        100.0 * self.nats
    }
}

/// Mutual information between quantile-discretized uncertainty and the
/// binary error indicator.
pub fn uncertainty_error_mi(uncertainty: &[f64], error: &[bool], n_levels: usize) -> Result<MiEstimate> {
    if uncertainty.len() != error.len() || uncertainty.is_empty() {
        return Err(CoreError::metric("mi", "inputs must be non-empty and of equal length"));
    }
    if n_levels < 2 {
        return Err(CoreError::metric("mi", "n_levels must be at least 2"));
    }
    if uncertainty.iter().all(|&u| u == uncertainty[0]) {
        return Ok(MiEstimate {
            nats: 0.0,
            degenerate: true,
        });
    }
    let levels = quantile_levels(uncertainty, n_levels);
    let err: Vec<usize> = error.iter().map(|&e| usize::from(e)).collect();
    Ok(MiEstimate {
        nats: discrete_mi(&levels, &err)?,
        degenerate: false,
    })
}

/// Per-class intersection and set sizes, accumulated over any number of maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceCounts {
    intersection: Vec<usize>,
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

impl DiceCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::metric("dice", "label maps differ in size"));
        }
        let k = self.truth.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= k || g >= k {
                return Err(CoreError::LabelOutOfRange { label: p.max(g), classes: k });
            }
            self.predicted[p] += 1;
            self.truth[g] += 1;
            if p == g {
                self.intersection[p] += 1;
            }
        }
        Ok(())
    }

    pub fn class_dice(&self, class: usize) -> f64 {
        let denom = self.predicted[class] + self.truth[class];
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection[class] as f64 / denom as f64
        }
    }

    pub fn per_class(&self) -> Vec<f64> {
        (0..self.truth.len()).map(|c| self.class_dice(c)).collect()
    }

    pub fn mean_dice(&self) -> f64 {
        let d = self.per_class();
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// 2|P ∩ G| / (|P| + |G|) for one class; 1 when both sets are empty.
pub fn dice(pred: &[usize], gt: &[usize], class_id: usize, classes: usize) -> Result<f64> {
    if class_id >= classes {
        return Err(CoreError::metric("dice", format!("class {class_id} not in 0..{classes}")));
    }
    let mut counts = DiceCounts::new(classes);
    counts.add(pred, gt)?;
    Ok(counts.class_dice(class_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodRatios {
    pub pr: f64,
    pub br: f64,
}

fn patch_maxima(map: &[f64], height: usize, width: usize, patch: usize) -> impl Iterator<Item = f64> + '_ {
    (0..height / patch).flat_map(move |py| {
        (0..width / patch).map(move |px| {
            let mut m = f64::NEG_INFINITY;
            for y in py * patch..(py + 1) * patch {
                for &v in &map[y * width + px * patch..][..patch] {
                    m = m.max(v);
                }
            }
            m
        })
    })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Pixel ratio (mean uncertainty) and box ratio (mean of per-patch maxima),
/// OOD over ID, for paired maps of size `height × width`.
pub fn ood_ratios(
    ood_maps: &[Vec<f64>],
    id_maps: &[Vec<f64>],
    height: usize,
    width: usize,
    patch: usize,
) -> Result<OodRatios> {
    if ood_maps.is_empty() || ood_maps.len() != id_maps.len() {
        return Err(CoreError::metric("ood_ratios", "need equally many, non-zero, paired maps"));
    }
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(CoreError::metric(
            "ood_ratios",
            format!("patch {patch} does not divide {height}x{width}"),
        ));
    }
    if ood_maps.iter().chain(id_maps).any(|m| m.len() != height * width) {
        return Err(CoreError::metric("ood_ratios", "map size does not match height x width"));
    }
    let pixel = |maps: &[Vec<f64>]| mean(maps.iter().flat_map(|m| m.iter().copied()));
    let boxed = |maps: &[Vec<f64>]| mean(maps.iter().flat_map(|m| patch_maxima(m, height, width, patch)));
    let (id_pixel, id_box) = (pixel(id_maps), boxed(id_maps));
    if id_pixel == 0.0 || id_box == 0.0 {
        return Err(CoreError::metric("ood_ratios", "in-distribution uncertainty is zero"));
    }
    Ok(OodRatios {
        pr: pixel(ood_maps) / id_pixel,
        br: boxed(ood_maps) / id_box,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    Aleatoric,
    Epistemic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub ece_bins: usize,
    pub mi_levels: usize,
    pub patch: usize,
    /// Map used for PR/BR.
    pub ood_uncertainty: UncertaintyKind,
    /// Map correlated with errors for MI.
    pub mi_uncertainty: UncertaintyKind,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            ece_bins: 15,
            mi_levels: 10,
            patch: 8,
            ood_uncertainty: UncertaintyKind::Epistemic,
            mi_uncertainty: UncertaintyKind::Aleatoric,
        }
    }
}

impl MetricSettings {
    pub fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(CoreError::config("metrics.ece_bins", "must be at least 1"));
        }
        if self.mi_levels < 2 {
            return Err(CoreError::config("metrics.mi_levels", "must be at least 2"));
        }
        if self.patch == 0 {
            return Err(CoreError::config("metrics.patch", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    /// Uncertainty-error MI in nats ×100.
    pub mi: f64,
    pub mi_nats: f64,
    pub mi_degenerate: bool,
    pub mi_estimator: String,
    pub dice_per_class: Vec<f64>,
    pub dice: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub br: Option<f64>,
    pub reliability: ReliabilityBins,
    pub images: usize,
    pub pixels: usize,
    pub settings: MetricSettings,
    pub config_hash: String,
    pub seed: u64,
}
