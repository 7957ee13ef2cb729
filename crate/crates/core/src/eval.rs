//! Batched inference and report assembly.

use fgrm_tensor::ParameterSet;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::{
    self, CalibrationReport, DiceCounts, MetricSettings, OodRatios, UncertaintyKind,
};
use crate::model::{self, ModelConfig};
use crate::scenes::SceneSample;

const CHUNK: usize = 32;

/// Per-pixel outputs over a set of images, image-major.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelOutputs {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub confidence: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

impl PixelOutputs {
    pub fn correct(&self) -> Vec<bool> {
        self.predicted.iter().zip(&self.truth).map(|(p, t)| p == t).collect()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn uncertainty(&self, kind: UncertaintyKind) -> &[f64] {
        match kind {
            UncertaintyKind::Aleatoric => &self.aleatoric,
            UncertaintyKind::Epistemic => &self.epistemic,
        }
    }

    /// One map per image.
    pub fn maps(&self, kind: UncertaintyKind) -> Vec<Vec<f64>> {
        self.uncertainty(kind)
            .chunks(self.plane())
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn dice(&self, classes: usize) -> Result<DiceCounts> {
        let mut d = DiceCounts::new(classes);
        d.add(&self.predicted, &self.truth)?;
        Ok(d)
    }
}

/// Runs the model over `samples` without building a graph.
pub fn infer(cfg: &ModelConfig, params: &ParameterSet, samples: &[&SceneSample]) -> Result<PixelOutputs> {
    let mut out = PixelOutputs {
        images: samples.len(),
        height: cfg.height,
        width: cfg.width,
        ..PixelOutputs::default()
    };
    let bound = params.bind_frozen();
    for chunk in samples.chunks(CHUNK) {
        let pred = model::forward(cfg, &bound, &model::batch_input(cfg, chunk)?)?;
        let u = model::uncertainty_maps(&pred);
        out.predicted.extend(pred.labels());
        out.confidence.extend(pred.confidence());
        out.aleatoric.extend(u.aleatoric);
        out.epistemic.extend(u.epistemic);
        for s in chunk {
            out.truth.extend_from_slice(&s.mask);
        }
    }
    Ok(out)
}

pub fn ood_ratios(id: &PixelOutputs, ood: &PixelOutputs, settings: &MetricSettings) -> Result<OodRatios> {
    if id.images != ood.images {
        return Err(CoreError::metric("ood_ratios", "ID and OOD sets are not paired"));
    }
    metrics::ood_ratios(
        &ood.maps(settings.ood_uncertainty),
        &id.maps(settings.ood_uncertainty),
        id.height,
        id.width,
        settings.patch,
    )
}

pub fn build_report(
    id: &PixelOutputs,
    ood: Option<&PixelOutputs>,
    classes: usize,
    settings: &MetricSettings,
    config_hash: &str,
    seed: u64,
) -> Result<CalibrationReport> {
    let correct = id.correct();
    let reliability = metrics::reliability_bins(&id.confidence, &correct, settings.ece_bins)?;
    let errors: Vec<bool> = correct.iter().map(|c| !c).collect();
    let mi = metrics::uncertainty_error_mi(id.uncertainty(settings.mi_uncertainty), &errors, settings.mi_levels)?;
    let dice = id.dice(classes)?;
    let ratios = ood.map(|o| ood_ratios(id, o, settings)).transpose()?;
    Ok(CalibrationReport {
        ece: reliability.ece(),
        mi: mi.scaled(),
        mi_nats: mi.nats,
        mi_degenerate: mi.degenerate,
        mi_estimator: format!("plug-in histogram, {} quantile levels", settings.mi_levels),
        dice_per_class: dice.per_class(),
        dice: dice.mean_dice(),
        pr: ratios.map(|r| r.pr),
        br: ratios.map(|r| r.br),
        reliability,
        images: id.images,
        pixels: id.confidence.len(),
        settings: settings.clone(),
        config_hash: config_hash.to_string(),
        seed,
    })
}
