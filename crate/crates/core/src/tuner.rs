//! Fisher-weighted fine-grained policy-gradient tuning.
//!
//! Each step draws stochastic actions from the evidential policy, scores them
//! with a calibration reward, and moves the policy along
//! `F ⊙ A ∇ log π(a) − β ∇ KL(policy ‖ reference)`, where `F` is a diagonal
//! Fisher weighting computed on the same batch and `A` the reward minus a
//! baseline.

use fgrm_tensor::{BoundParams, ParameterSet, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval;
use crate::metrics::{self, MetricSettings};
use crate::model::{self, DirichletPrediction, ModelConfig};
use crate::scenes::{self, mix_seed, Corruption, SceneSample};

pub const ECE_FLOOR: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Id,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// g², the usual diagonal Fisher importance.
    Squared,
    /// 1 / (g² + ε).
    Reciprocal,
    /// All ones: plain REINFORCE.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherNorm {
    UnitMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlKind {
    /// Between per-pixel categorical predictive means.
    Categorical,
    /// Between per-pixel Dirichlet distributions.
    Dirichlet,
}

/// The sampled action behind the ID reward. The reward always scores the
/// argmax label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdAction {
    /// ŷ_s ~ Categorical(p̄_s) with the deterministic confidence max p̄.
    /// The reward does not depend on the draw, so the expected update is
    /// zero.
    Labels,
    /// The reported confidence is drawn from the Dirichlet marginal of the
    /// argmax class, c_s ~ Beta(α_ŷ, S − α_ŷ), whose mean is max p̄.
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardGranularity {
    /// One reward for the whole batch.
    Batch,
    /// One reward per image (per ID/OOD pair in OOD mode).
    Image,
}

/// How the uncertainty enters the OOD policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyAction {
    /// K / S as is, with ŷ_s ~ Categorical(p̄_s) as the only action. As
    /// with [`IdAction::Labels`] the expected update is zero.
    Deterministic,
    /// One reported uncertainty level per image, v ~ LogNormal(ln ū, σ²)
    /// with ū the image's mean K / S; the reward is the OOD/ID ratio of v.
    LogNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    pub reward: RewardMode,
    /// KL penalty strength β.
    pub beta: f64,
    /// Learning rate η.
    pub lr: f64,
    pub fisher: FisherMode,
    pub fisher_norm: FisherNorm,
    /// Stabilizer for the reciprocal mode.
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kl: KlKind,
    pub id_action: IdAction,
    pub granularity: RewardGranularity,
    pub uncertainty_action: UncertaintyAction,
    /// σ of the log-normal uncertainty level.
    pub uncertainty_noise: f64,
    /// Action samples per image. With more than one, each sample's reward
    /// is baselined by the mean reward of the other samples.
    pub samples: usize,
    /// Decay of a running-mean reward baseline, used when `samples == 1`;
    /// `None` uses raw rewards.
    pub baseline_decay: Option<f64>,
    pub ece_bins: usize,
    /// OOD counterparts for the OOD reward.
    pub corruption: Corruption,
    /// Validation images used for the per-step ECE / Dice / PR log.
    pub monitor_images: usize,
    /// Log monitor metrics every this many steps (and at the first and last step).
    pub monitor_every: usize,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            reward: RewardMode::Id,
            beta: 30.0,
            lr: 3e-3,
            fisher: FisherMode::Uniform,
            fisher_norm: FisherNorm::UnitMean,
            epsilon: 1e-8,
            epochs: 40,
            batch_size: 4,
            seed: 0,
            kl: KlKind::Categorical,
            id_action: IdAction::Confidence,
            granularity: RewardGranularity::Image,
            uncertainty_action: UncertaintyAction::LogNormal,
            uncertainty_noise: 0.1,
            samples: 16,
            baseline_decay: None,
            ece_bins: 15,
            corruption: Corruption::default(),
            monitor_images: 16,
            monitor_every: 1,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CoreError::config("tuner.beta", "must be a non-negative number"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::config("tuner.lr", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(CoreError::config("tuner.epsilon", "must be positive"));
        }
        if !(self.uncertainty_noise > 0.0 && self.uncertainty_noise.is_finite()) {
            return Err(CoreError::config("tuner.uncertainty_noise", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("tuner.batch_size", "must be positive"));
        }
        if self.samples == 0 {
            return Err(CoreError::config("tuner.samples", "must be at least 1"));
        }
        if self.ece_bins == 0 {
            return Err(CoreError::config("tuner.ece_bins", "must be at least 1"));
        }
        if self.monitor_every == 0 {
            return Err(CoreError::config("tuner.monitor_every", "must be positive"));
        }
        if let Some(d) = self.baseline_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(CoreError::config("tuner.baseline_decay", "must lie in [0, 1)"));
            }
        }
        self.corruption
            .validate()
            .map_err(|_| CoreError::config("tuner.corruption.severity", "must be in 1..=5"))
    }
}

/// −ln(ECE), with ECE floored at 1e-6.
pub fn reward_id(ece: f64) -> f64 {
    if ece < ECE_FLOOR {
        log::debug!("ECE {ece} clamped to {ECE_FLOOR} for the reward");
    }
    -ece.max(ECE_FLOOR).ln()
}

/// Mean OOD uncertainty over mean ID uncertainty.
pub fn reward_ood(ood: &[f64], id: &[f64]) -> Result<f64> {
    if ood.is_empty() || id.is_empty() {
        return Err(CoreError::metric("reward_ood", "empty batch"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let denom = mean(id);
    if denom == 0.0 {
        return Err(CoreError::metric("reward_ood", "ID uncertainty is zero"));
    }
    Ok(mean(ood) / denom)
}

/// Per-pixel actions drawn from the predictive mean.
pub struct ActionSample {
    /// Image-major labels `[B * H * W]`.
    pub labels: Vec<usize>,
    /// `[B, 1, H, W]` log p̄_s(ŷ_s), attached to the policy graph.
    pub log_lik: Tensor,
    pub total_log_lik: f64,
}

/// Draws ŷ_s ~ Categorical(p̄_s) independently per pixel.
pub fn sample_actions(pred: &DirichletPrediction, rng: &mut impl Rng) -> Result<ActionSample> {
    let labels = sample_labels(pred, rng);
    let log_lik = label_log_lik(pred, &labels)?;
    let total_log_lik = log_lik.values().iter().sum();
    Ok(ActionSample {
        labels,
        log_lik,
        total_log_lik,
    })
}

/// `[B, 1, H, W]` log p̄_s(label_s).
pub fn label_log_lik(pred: &DirichletPrediction, labels: &[usize]) -> Result<Tensor> {
    let s = pred.alpha.shape();
    let mask = model::one_hot(labels, s[1], s[0], s[2], s[3])?;
    Ok(pred.mean.log().mul(&mask)?.sum_axis(1)?)
}

/// Per-parameter importance weights aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub weights: Vec<Vec<f64>>,
    pub mode: FisherMode,
    pub norm: FisherNorm,
    /// Mean of the weights before normalization.
    pub raw_mean: f64,
}

impl FisherDiagonal {
    pub fn uniform(params: &ParameterSet) -> Self {
        Self {
            weights: params.iter().map(|p| vec![1.0; p.values.len()]).collect(),
            mode: FisherMode::Uniform,
            norm: FisherNorm::None,
            raw_mean: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Weights from a gradient vector; see [`FisherMode`].
pub fn fisher_weights(g: &[f64], mode: FisherMode, norm: FisherNorm, epsilon: f64) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = match mode {
        FisherMode::Squared => g.iter().map(|v| v * v).collect(),
        FisherMode::Reciprocal => g.iter().map(|v| 1.0 / (v * v + epsilon)).collect(),
        FisherMode::Uniform => vec![1.0; g.len()],
    };
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    let weights = match norm {
        FisherNorm::UnitMean if mean > 0.0 => raw.iter().map(|w| w / mean).collect(),
        _ => raw,
    };
    (weights, mean)
}

/// Fisher diagonal from the batch-mean gradient of the argmax log-likelihood.
pub fn fisher_from_prediction(
    pred: &DirichletPrediction,
    bound: &BoundParams,
    config: &TunerConfig,
) -> Result<FisherDiagonal> {
    let shapes: Vec<usize> = bound.tensors().iter().map(Tensor::numel).collect();
    let g = if config.fisher == FisherMode::Uniform {
        vec![0.0; shapes.iter().sum()]
    } else {
        bound.zero_grad();
        let ll = label_log_lik(pred, &pred.labels())?;
        ll.sum().scale(1.0 / pred.batch() as f64).backward()?;
        let grads = bound.grads();
        check_finite(&grads, bound.names())?;
        bound.zero_grad();
        grads.concat()
    };
    let (flat, raw_mean) = fisher_weights(&g, config.fisher, config.fisher_norm, config.epsilon);
    let mut weights = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for n in shapes {
        weights.push(flat[at..at + n].to_vec());
        at += n;
    }
    Ok(FisherDiagonal {
        weights,
        mode: config.fisher,
        norm: config.fisher_norm,
        raw_mean,
    })
}

/// Fisher diagonal of `policy` on a batch of images.
pub fn fisher_diagonal(
    model_cfg: &ModelConfig,
    policy: &ParameterSet,
    batch: &[&SceneSample],
    config: &TunerConfig,
) -> Result<FisherDiagonal> {
    let bound = policy.bind();
    let pred = model::forward(model_cfg, &bound, &model::batch_input(model_cfg, batch)?)?;
    fisher_from_prediction(&pred, &bound, config)
}

fn check_finite(grads: &[Vec<f64>], names: &[String]) -> Result<()> {
    for (g, name) in grads.iter().zip(names) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteGradient { name: name.clone() });
        }
    }
    Ok(())
}

/// Mean over pixels of KL(policy ‖ reference). The reference is detached.
pub fn kl_penalty(policy: &DirichletPrediction, reference: &DirichletPrediction, kind: KlKind) -> Result<Tensor> {
    if policy.alpha.shape() != reference.alpha.shape() {
        return Err(CoreError::InputShape {
            expected: policy.alpha.shape().to_vec(),
            got: reference.alpha.shape().to_vec(),
        });
    }
    let r = reference.detach();
    let per_pixel = match kind {
        KlKind::Categorical => {
            let p = policy.mean.clamp_min(PROB_FLOOR);
            let q = r.mean.clamp_min(PROB_FLOOR);
            p.mul(&p.log().sub(&q.log())?)?.sum_axis(1)?
        }
        KlKind::Dirichlet => {
            // ln Γ(S_p) − Σ ln Γ(α_p) − ln Γ(S_q) + Σ ln Γ(α_q)
            //   + Σ (α_p − α_q)(ψ(α_p) − ψ(S_p))
            let (a, s) = (&policy.alpha, &policy.strength);
            let norm = s
                .ln_gamma()?
                .sub(&a.ln_gamma()?.sum_axis(1)?)?
                .sub(&r.strength.ln_gamma()?)?
                .add(&r.alpha.ln_gamma()?.sum_axis(1)?)?;
            let cross = a.sub(&r.alpha)?.mul(&a.digamma()?.sub(&s.digamma()?)?)?.sum_axis(1)?;
            norm.add(&cross)?
        }
    };
    Ok(per_pixel.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub reward: f64,
    pub kl: f64,
    /// L2 norm of the Fisher-weighted policy-gradient term.
    pub grad_norm: f64,
    pub kl_grad_norm: f64,
    pub max_drift: f64,
    pub lr: f64,
    pub ece: Option<f64>,
    pub dice: Option<f64>,
    pub pr: Option<f64>,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,reward,ece,dice,pr,kl,grad_norm,kl_grad_norm,max_drift,lr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.reward,
            opt(self.ece),
            opt(self.dice),
            opt(self.pr),
            self.kl,
            self.grad_norm,
            self.kl_grad_norm,
            self.max_drift,
            self.lr
        )
    }
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = format!("{}\n", StepLog::CSV_HEADER);
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

/// Mutable state carried across steps.
#[derive(Debug, Clone)]
pub struct TunerState {
    pub lr: f64,
    pub baseline: Option<f64>,
    pub step: usize,
}

impl TunerState {
    pub fn new(config: &TunerConfig) -> Self {
        Self {
            lr: config.lr,
            baseline: None,
            step: 0,
        }
    }
}

/// One tuning batch: ID images, and their corrupted counterparts in OOD mode.
pub struct Batch<'a> {
    pub id: Vec<&'a SceneSample>,
    pub ood: Vec<&'a SceneSample>,
}

pub struct StepOutcome {
    pub reward: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub kl_grad_norm: f64,
}

/// The stochastic part of the policy for one step, with its graph-linked
/// parameters.
enum Policy {
    Labels,
    /// Beta shapes `(α_ŷ, S − α_ŷ)` of the argmax class, `[B, 1, H, W]`.
    Confidence(Tensor, Tensor),
    /// ln ū per image, `[B]`.
    Levels(Tensor),
}

/// One joint draw of the actions.
enum Draw {
    /// ŷ_s ~ Categorical(p̄_s).
    Labels(Vec<usize>),
    /// c_s ~ Beta(α_ŷ, S − α_ŷ), image-major.
    Confidence(Vec<f64>),
    /// ln v per image.
    Levels(Vec<f64>),
}

const CONF_CLAMP: f64 = 1e-12;

/// Shape parameters `(α_ŷ, S − α_ŷ)` of the argmax class's Beta marginal.
fn beta_marginal(pred: &DirichletPrediction, argmax: &[usize]) -> Result<(Tensor, Tensor)> {
    let s = pred.alpha.shape();
    let mask = model::one_hot(argmax, s[1], s[0], s[2], s[3])?;
    let a = pred.alpha.mul(&mask)?.sum_axis(1)?;
    let b = pred.strength.sub(&a)?;
    Ok((a, b))
}

fn sample_confidence(a: &Tensor, b: &Tensor, rng: &mut impl Rng) -> Result<Vec<f64>> {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&a, &b)| {
            let dist = BetaDist::new(a, b).map_err(|e| CoreError::metric("sample_confidence", e.to_string()))?;
            Ok(dist.sample(rng).clamp(CONF_CLAMP, 1.0 - CONF_CLAMP))
        })
        .collect()
}

fn draw(policy: &Policy, pred: &DirichletPrediction, sigma: f64, rng: &mut impl Rng) -> Result<Draw> {
    Ok(match policy {
        Policy::Labels => Draw::Labels(sample_labels(pred, rng)),
        Policy::Confidence(a, b) => Draw::Confidence(sample_confidence(a, b, rng)?),
        Policy::Levels(lu) => Draw::Levels(
            lu.values()
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ),
    })
}

/// Rewards of one draw, one per forward-batch image.
fn image_rewards(
    config: &TunerConfig,
    batch: &Batch,
    plane: usize,
    argmax: &[usize],
    confidence: &[f64],
    epistemic: &[f64],
    draw: &Draw,
) -> Result<Vec<f64>> {
    let n_id = batch.id.len();
    let groups = match config.granularity {
        RewardGranularity::Batch => vec![(0..n_id).collect::<Vec<_>>()],
        RewardGranularity::Image => (0..n_id).map(|i| vec![i]).collect(),
    };
    let pixels = |g: &[usize], v: &[f64], offset: usize| -> Vec<f64> {
        g.iter()
            .flat_map(|&i| v[(i + offset) * plane..(i + offset + 1) * plane].iter().copied())
            .collect()
    };
    let per_group: Vec<f64> = match config.reward {
        RewardMode::Id => {
            let conf = match draw {
                Draw::Confidence(c) => c.as_slice(),
                _ => confidence,
            };
            groups
                .iter()
                .map(|g| {
                    let ok: Vec<bool> = g
                        .iter()
                        .flat_map(|&i| {
                            let range = i * plane..(i + 1) * plane;
                            argmax[range].iter().zip(&batch.id[i].mask).map(|(a, b)| a == b)
                        })
                        .collect();
                    Ok(reward_id(metrics::ece(&pixels(g, conf, 0), &ok, config.ece_bins)?))
                })
                .collect::<Result<_>>()?
        }
        // images [0, n) are ID, [n, 2n) their OOD counterparts
        RewardMode::Ood => match draw {
            Draw::Levels(lv) => groups
                .iter()
                .map(|g| {
                    let sum = |offset: usize| g.iter().map(|&i| lv[i + offset].exp()).sum::<f64>();
                    sum(n_id) / sum(0)
                })
                .collect(),
            _ => groups
                .iter()
                .map(|g| reward_ood(&pixels(g, epistemic, n_id), &pixels(g, epistemic, 0)))
                .collect::<Result<_>>()?,
        },
    };
    let per_image: Vec<f64> = (0..n_id)
        .map(|i| match config.granularity {
            RewardGranularity::Batch => per_group[0],
            RewardGranularity::Image => per_group[i],
        })
        .collect();
    Ok(match config.reward {
        RewardMode::Id => per_image,
        RewardMode::Ood => [per_image.clone(), per_image].concat(),
    })
}

/// Draws ŷ_s ~ Categorical(p̄_s) per pixel, values only.
fn sample_labels(pred: &DirichletPrediction, rng: &mut impl Rng) -> Vec<usize> {
    let (k, plane) = (pred.classes(), pred.plane());
    let m = pred.mean.values();
    (0..pred.batch() * plane)
        .map(|i| {
            let base = (i / plane) * k * plane + i % plane;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for c in 0..k {
                acc += m[base + c * plane];
                if u < acc {
                    return c;
                }
            }
            // u landed in the round-off gap above the last cumulative sum
            (0..k).rev().find(|&c| m[base + c * plane] > 0.0).unwrap_or(k - 1)
        })
        .collect()
}

/// ln of each image's mean K / S, `[B]`.
fn log_mean_uncertainty(u: &Tensor) -> Result<Tensor> {
    let s = u.shape().to_vec();
    Ok(u.reshape(&[s[0], s[2] * s[3]])?.mean_axis(1)?.reshape(&[s[0]])?.log())
}

/// K / S per pixel, `[B, 1, H, W]`, attached to the policy graph.
fn epistemic(pred: &DirichletPrediction) -> Result<Tensor> {
    Ok(Tensor::scalar(pred.classes() as f64).div(&pred.strength)?)
}

fn l2(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leave-one-out advantages for rewards `[sample][image]`: each sample is
/// compared with the mean of the other samples of the same image.
pub fn leave_one_out(rewards: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = rewards.len();
    let images = rewards.first().map_or(0, Vec::len);
    let totals: Vec<f64> = (0..images).map(|i| rewards.iter().map(|r| r[i]).sum()).collect();
    rewards
        .iter()
        .map(|r| {
            r.iter()
                .zip(&totals)
                .map(|(ri, t)| ri - (t - ri) / (m - 1) as f64)
                .collect()
        })
        .collect()
}

/// Per-sample advantages from rewards `[sample][image]`.
fn advantages(config: &TunerConfig, state: &mut TunerState, rewards: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if rewards.len() > 1 {
        return leave_one_out(rewards);
    }
    let r = &rewards[0];
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let adv = match state.baseline {
        Some(b) => r.iter().map(|v| v - b).collect(),
        None => r.clone(),
    };
    if let Some(decay) = config.baseline_decay {
        state.baseline = Some(state.baseline.map_or(mean, |b| decay * b + (1.0 - decay) * mean));
    }
    vec![adv]
}

/// Σ_m A_m log π(a^m) / M. Every log-likelihood is linear in per-draw
/// statistics, so the draws are folded into weights and share one graph.
fn surrogate(
    policy: &Policy,
    pred: &DirichletPrediction,
    draws: &[Draw],
    adv: &[Vec<f64>],
    sigma: f64,
) -> Result<Tensor> {
    let shape = pred.alpha.shape().to_vec();
    let (b, k, plane) = (shape[0], shape[1], pred.plane());
    let plane_shape = [b, 1, shape[2], shape[3]];
    let scale = 1.0 / draws.len() as f64;
    match policy {
        Policy::Labels => {
            let mut w = vec![0.0; b * k * plane];
            for (d, a) in draws.iter().zip(adv) {
                if let Draw::Labels(labels) = d {
                    for (i, &l) in labels.iter().enumerate() {
                        w[(i / plane) * k * plane + l * plane + i % plane] += scale * a[i / plane];
                    }
                }
            }
            Ok(pred.mean.log().mul(&Tensor::new(&shape, w)?)?.sum())
        }
        Policy::Confidence(alpha, beta) => {
            // log Beta(c; a, b) = ln Γ(a + b) − ln Γ(a) − ln Γ(b) + (a − 1) ln c + (b − 1) ln(1 − c)
            let (mut w, mut w_c, mut w_1mc) = (vec![0.0; b * plane], vec![0.0; b * plane], vec![0.0; b * plane]);
            for (d, a) in draws.iter().zip(adv) {
                if let Draw::Confidence(c) = d {
                    for (i, &ci) in c.iter().enumerate() {
                        let wi = scale * a[i / plane];
                        w[i] += wi;
                        w_c[i] += wi * ci.ln();
                        w_1mc[i] += wi * (1.0 - ci).ln();
                    }
                }
            }
            let t = |v: Vec<f64>| Tensor::new(&plane_shape, v);
            let norm = pred.strength.ln_gamma()?.sub(&alpha.ln_gamma()?)?.sub(&beta.ln_gamma()?)?;
            Ok(norm
                .mul(&t(w)?)?
                .add(&alpha.add_scalar(-1.0).mul(&t(w_c)?)?)?
                .add(&beta.add_scalar(-1.0).mul(&t(w_1mc)?)?)?
                .sum())
        }
        Policy::Levels(lu) => {
            // log N(ln v; ln ū, σ²) = (ln v · ln ū − (ln ū)² / 2) / σ² + const
            let (mut w, mut w_v) = (vec![0.0; b], vec![0.0; b]);
            for (d, a) in draws.iter().zip(adv) {
                if let Draw::Levels(lv) = d {
                    for (i, &l) in lv.iter().enumerate() {
                        w[i] += scale * a[i];
                        w_v[i] += scale * a[i] * l;
                    }
                }
            }
            Ok(lu
                .mul(&Tensor::new(&[b], w_v)?)?
                .sub(&lu.mul(lu)?.mul(&Tensor::new(&[b], w)?)?.scale(0.5))?
                .sum()
                .scale(1.0 / (sigma * sigma)))
        }
    }
}

/// One update of `policy` in place. `reference` is the frozen pretrained
/// parameter set θ̂.
pub fn fgrm_step(
    model_cfg: &ModelConfig,
    policy: &mut ParameterSet,
    reference: &ParameterSet,
    batch: &Batch,
    config: &TunerConfig,
    state: &mut TunerState,
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    fgrm_step_with_fisher(model_cfg, policy, reference, batch, config, state, rng, None)
}

/// [`fgrm_step`] with fixed importance weights in place of the ones
/// computed from the batch.
#[allow(clippy::too_many_arguments)]
pub fn fgrm_step_with_fisher(
    model_cfg: &ModelConfig,
    policy: &mut ParameterSet,
    reference: &ParameterSet,
    batch: &Batch,
    config: &TunerConfig,
    state: &mut TunerState,
    rng: &mut impl Rng,
    fisher: Option<&FisherDiagonal>,
) -> Result<StepOutcome> {
    if batch.id.is_empty() {
        return Err(CoreError::config("tuner.batch", "empty batch"));
    }
    if config.reward == RewardMode::Ood && batch.ood.len() != batch.id.len() {
        return Err(CoreError::config("tuner.batch", "OOD mode needs one corrupted image per ID image"));
    }
    let images: Vec<&SceneSample> = batch.id.iter().chain(&batch.ood).copied().collect();
    let input = model::batch_input(model_cfg, &images)?;
    let bound = policy.bind();
    let pred = model::forward(model_cfg, &bound, &input)?;
    let ref_pred = model::forward(model_cfg, &reference.bind_frozen(), &input)?;

    let fisher = match fisher {
        Some(f) if f.weights.iter().map(Vec::len).eq(bound.tensors().iter().map(Tensor::numel)) => f.clone(),
        Some(_) => return Err(CoreError::config("fisher", "weights do not match the parameter layout")),
        None => fisher_from_prediction(&pred, &bound, config)?,
    };

    let argmax = pred.labels();
    let confidence = pred.confidence();
    let u = epistemic(&pred)?;
    let kind = match (config.reward, config.id_action, config.uncertainty_action) {
        (RewardMode::Id, IdAction::Confidence, _) => {
            let (a, b) = beta_marginal(&pred, &argmax)?;
            Policy::Confidence(a, b)
        }
        (RewardMode::Ood, _, UncertaintyAction::LogNormal) => Policy::Levels(log_mean_uncertainty(&u)?),
        _ => Policy::Labels,
    };
    let sigma = config.uncertainty_noise;
    let mut draws = Vec::with_capacity(config.samples);
    let mut rewards = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let d = draw(&kind, &pred, sigma, rng)?;
        rewards.push(image_rewards(config, batch, pred.plane(), &argmax, &confidence, u.values(), &d)?);
        draws.push(d);
    }
    let reward = rewards.iter().flatten().sum::<f64>() / (rewards.len() * rewards[0].len()) as f64;
    let adv = advantages(config, state, &rewards);

    let objective = surrogate(&kind, &pred, &draws, &adv, sigma)?;
    bound.zero_grad();
    objective.backward()?;
    let pg = bound.grads();
    check_finite(&pg, bound.names())?;

    let kl = kl_penalty(&pred, &ref_pred, config.kl)?;
    bound.zero_grad();
    kl.backward()?;
    let kl_grad = bound.grads();
    check_finite(&kl_grad, bound.names())?;

    let weighted: Vec<Vec<f64>> = pg
        .iter()
        .zip(&fisher.weights)
        .map(|(g, f)| g.iter().zip(f).map(|(a, b)| a * b).collect())
        .collect();
    apply_update(policy, &weighted, &kl_grad, config.beta, state)?;
    state.step += 1;
    Ok(StepOutcome {
        reward,
        kl: kl.item(),
        grad_norm: l2(&weighted),
        kl_grad_norm: l2(&kl_grad),
    })
}

/// φ ← φ + η (pg − β kl_grad). A non-finite result halves η once and
/// retries; a second failure is an error and leaves `policy` untouched.
pub fn apply_update(
    policy: &mut ParameterSet,
    pg: &[Vec<f64>],
    kl_grad: &[Vec<f64>],
    beta: f64,
    state: &mut TunerState,
) -> Result<()> {
    for attempt in 0..2 {
        let mut next = policy.clone();
        for ((p, g), k) in next.iter_mut().zip(pg).zip(kl_grad) {
            for ((v, gi), ki) in p.values.iter_mut().zip(g).zip(k) {
                *v += state.lr * (gi - beta * ki);
            }
        }
        if next.iter().all(|p| p.values.iter().all(|v| v.is_finite())) {
            *policy = next;
            return Ok(());
        }
        if attempt == 0 {
            log::warn!("non-finite update at step {}, halving lr to {}", state.step, state.lr / 2.0);
            state.lr /= 2.0;
        }
    }
    Err(CoreError::NonFiniteUpdate { step: state.step })
}

fn monitor(
    model_cfg: &ModelConfig,
    params: &ParameterSet,
    id: &[&SceneSample],
    ood: &[&SceneSample],
    config: &TunerConfig,
) -> Result<(f64, f64, Option<f64>)> {
    let out = eval::infer(model_cfg, params, id)?;
    let ece = metrics::ece(&out.confidence, &out.correct(), config.ece_bins)?;
    let dice = out.dice(model_cfg.classes)?.mean_dice();
    let pr = if config.reward == RewardMode::Ood {
        let o = eval::infer(model_cfg, params, ood)?;
        Some(eval::ood_ratios(&out, &o, &MetricSettings::default())?.pr)
    } else {
        None
    };
    Ok((ece, dice, pr))
}

/// Runs `config.epochs` passes of [`fgrm_step`] over `val`, starting from
/// `reference`.
pub fn tune(
    model_cfg: &ModelConfig,
    reference: &ParameterSet,
    val: &[&SceneSample],
    config: &TunerConfig,
) -> Result<(ParameterSet, Vec<StepLog>)> {
    config.validate()?;
    model_cfg.check_params(reference)?;
    if val.is_empty() {
        return Err(CoreError::config("val", "validation split is empty"));
    }
    let ood_val: Vec<SceneSample> = match config.reward {
        RewardMode::Ood => val
            .iter()
            .map(|s| scenes::corrupt(s, config.corruption))
            .collect::<Result<_>>()?,
        RewardMode::Id => Vec::new(),
    };
    let n_mon = config.monitor_images.min(val.len());
    let mon_id = &val[..n_mon];
    let mon_ood: Vec<&SceneSample> = ood_val.iter().take(n_mon).collect();

    let mut policy = reference.clone();
    let mut state = TunerState::new(config);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..val.len()).collect();
    let steps_per_epoch = val.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                id: chunk.iter().map(|&i| val[i]).collect(),
                ood: if ood_val.is_empty() {
                    Vec::new()
                } else {
                    chunk.iter().map(|&i| &ood_val[i]).collect()
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed ^ 0x7475_6e65, state.step as u64));
            let step = state.step;
            let out = fgrm_step(model_cfg, &mut policy, reference, &batch, config, &mut state, &mut rng)?;
            let (ece, dice, pr) = if n_mon > 0 && (step == 0 || (step + 1).is_multiple_of(config.monitor_every) || step + 1 == total) {
                let (e, d, p) = monitor(model_cfg, &policy, mon_id, &mon_ood, config)?;
                (Some(e), Some(d), p)
            } else {
                (None, None, None)
            };
            log.push(StepLog {
                step,
                epoch,
                reward: out.reward,
                kl: out.kl,
                grad_norm: out.grad_norm,
                kl_grad_norm: out.kl_grad_norm,
                max_drift: policy.max_abs_diff(reference)?,
                lr: state.lr,
                ece,
                dice,
                pr,
            });
        }
        if let Some(last) = log.last() {
            log::info!(
                "tune epoch {epoch}: reward {:.4} drift {:.3e} ece {:?} dice {:?} pr {:?}",
                last.reward,
                last.max_drift,
                last.ece,
                last.dice,
                last.pr
            );
        }
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred_from(k: usize, values: Vec<f64>) -> DirichletPrediction {
        let n = values.len() / k;
        DirichletPrediction::from_alpha(Tensor::new(&[1, k, 1, n], values).unwrap()).unwrap()
    }

    #[test]
    fn id_reward_examples() {
        assert_eq!(reward_id(1.0), 0.0);
        assert!((reward_id((-2f64).exp()) - 2.0).abs() < 1e-12);
        assert!((reward_id(0.0963) - 2.340_286_960_178_057).abs() < 1e-9);
        assert!((reward_id(0.0) - 13.815_510_557_964_274).abs() < 1e-9);
    }

    #[test]
    fn ood_reward_examples() {
        let id = [0.1, 0.2, 0.3];
        assert_eq!(reward_ood(&id, &id).unwrap(), 1.0);
        assert!((reward_ood(&[0.3, 0.6, 0.9], &id).unwrap() - 3.0).abs() < 1e-12);
        assert!((reward_ood(&[0.09; 4], &[0.05; 4]).unwrap() - 1.8).abs() < 1e-12);
        assert!(reward_ood(&[0.1], &[0.0]).is_err());
    }

    #[test]
    fn one_hot_mean_samples_its_class() {
        // α = (1e12, 1, 1): p̄ is one-hot to within 2e-12
        let pred = pred_from(3, vec![1e12, 1.0, 1.0, 1.0, 1.0, 1e12]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_actions(&pred, &mut rng).unwrap();
        assert_eq!(a.labels, vec![0, 2]);
        assert!(a.total_log_lik.abs() < 1e-10);
        assert!(a.log_lik.values().iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let n = 100_000;
        let pred = pred_from(4, vec![2.0; 4 * n]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_actions(&pred, &mut rng).unwrap();
        for c in 0..4 {
            let f = a.labels.iter().filter(|&&l| l == c).count() as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "class {c}: {f}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let pred = pred_from(3, (0..300).map(|i| 1.0 + (i % 7) as f64).collect());
        let draw = || sample_actions(&pred, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().labels;
        assert_eq!(draw(), draw());
    }

    #[test]
    fn fisher_weight_examples() {
        let (w, _) = fisher_weights(&[1.0, 2.0], FisherMode::Squared, FisherNorm::UnitMean, 1e-8);
        assert!((w[0] - 0.4).abs() < 1e-12 && (w[1] - 1.6).abs() < 1e-12);
        let (w, _) = fisher_weights(&[1.0, 2.0], FisherMode::Reciprocal, FisherNorm::UnitMean, 1e-15);
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        let (w, _) = fisher_weights(&[0.0, 3.0], FisherMode::Squared, FisherNorm::None, 1e-8);
        assert_eq!(w, vec![0.0, 9.0]);
        let (w, _) = fisher_weights(&[0.5, 3.0], FisherMode::Uniform, FisherNorm::UnitMean, 1e-8);
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn kl_examples() {
        let p = pred_from(2, vec![9.0, 1.0]);
        let q = pred_from(2, vec![3.0, 3.0]);
        let kl = kl_penalty(&p, &q, KlKind::Categorical).unwrap().item();
        assert!((kl - 0.368_064_207_168_497_1).abs() < 1e-12);
        assert!(kl_penalty(&p, &p, KlKind::Categorical).unwrap().item().abs() < 1e-15);
        assert!(kl_penalty(&p, &p, KlKind::Dirichlet).unwrap().item().abs() < 1e-12);
        assert!(kl_penalty(&p, &q, KlKind::Dirichlet).unwrap().item() > 0.0);
    }

    #[test]
    fn update_rule() {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        let before = ps.clone();
        let mut state = TunerState::new(&TunerConfig {
            lr: 0.5,
            ..TunerConfig::default()
        });
        apply_update(&mut ps, &[vec![0.0, 0.0]], &[vec![3.0, 3.0]], 0.0, &mut state).unwrap();
        assert_eq!(ps, before);
        apply_update(&mut ps, &[vec![1.0, -1.0]], &[vec![2.0, 0.0]], 0.25, &mut state).unwrap();
        assert_eq!(ps.get("w").unwrap().values, vec![1.25, 1.5]);
    }

    #[test]
    fn non_finite_update_halves_then_aborts() {
        let mut ps = ParameterSet::new();
        ps.insert("w", &[1], vec![0.5 * f64::MAX]).unwrap();
        let mut state = TunerState::new(&TunerConfig {
            lr: 1.0,
            ..TunerConfig::default()
        });
        // overflows at lr = 1 but not at lr = 0.5
        let g = 0.4 * f64::MAX;
        apply_update(&mut ps, &[vec![g]], &[vec![-g]], 1.0, &mut state).unwrap();
        assert_eq!(state.lr, 0.5);
        let r = apply_update(&mut ps, &[vec![f64::NAN]], &[vec![0.0]], 0.0, &mut state);
        assert!(matches!(r, Err(CoreError::NonFiniteUpdate { .. })));
        assert!(ps.get("w").unwrap().values[0].is_finite());
    }
}
