//! Constant-resolution conv network with a softplus evidence head.
//!
//! Tensors are channel-first: images `[B, C, H, W]`, concentrations
//! `[B, K, H, W]`.

use fgrm_tensor::{BoundParams, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scenes::SceneSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of each hidden conv layer.
    pub widths: Vec<usize>,
    /// Odd square kernel size of the hidden layers.
    pub kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            height: 32,
            width: 32,
            in_channels: 1,
            widths: vec![8, 8, 8],
            kernel: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoreError::config("model.classes", "must be at least 2"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(CoreError::config("model.height/width", "must be at least 8"));
        }
        if self.in_channels == 0 {
            return Err(CoreError::config("model.in_channels", "must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CoreError::config("model.widths", "must be a non-empty list of positive widths"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(CoreError::config("model.kernel", "must be odd"));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in iteration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("conv{i}.weight"), vec![w, c_in, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![1, w, 1, 1]));
            c_in = w;
        }
        out.push(("head.weight".into(), vec![self.classes, c_in, 1, 1]));
        out.push(("head.bias".into(), vec![1, self.classes, 1, 1]));
        out
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.in_channels, self.height, self.width]
    }

    /// Errors unless `params` has exactly this architecture's names and shapes.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let want = self.layout();
        let got: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if want != got {
            return Err(CoreError::Architecture(format!(
                "expected {}, found {}",
                describe(&want),
                describe(&got)
            )));
        }
        Ok(())
    }
}

fn describe(layout: &[(String, Vec<usize>)]) -> String {
    let parts: Vec<String> = layout.iter().map(|(n, s)| format!("{n}{s:?}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Glorot-uniform weights and zero biases, seeded by `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParameterSet::new();
    for (name, shape) in config.layout() {
        let n: usize = shape.iter().product();
        let values = if name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let field = shape[2] * shape[3];
            let bound = (6.0 / ((shape[0] + shape[1]) * field) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.insert(&name, &shape, values)?;
    }
    Ok(params)
}

/// Per-pixel Dirichlet concentrations and the quantities derived from them.
#[derive(Clone)]
pub struct DirichletPrediction {
    /// `[B, K, H, W]`, every entry ≥ 1.
    pub alpha: Tensor,
    /// `[B, 1, H, W]`, Σ_k α_k.
    pub strength: Tensor,
    /// `[B, K, H, W]`, α / S.
    pub mean: Tensor,
}

impl DirichletPrediction {
    pub fn from_alpha(alpha: Tensor) -> Result<Self> {
        let strength = alpha.sum_axis(1)?;
        let mean = alpha.div(&strength)?;
        Ok(Self {
            alpha,
            strength,
            mean,
        })
    }

    pub fn batch(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.alpha.shape()[1]
    }

    /// Pixels per image.
    pub fn plane(&self) -> usize {
        self.alpha.shape()[2] * self.alpha.shape()[3]
    }

    /// Graph-free copy, for use as a frozen reference.
    pub fn detach(&self) -> Self {
        Self {
            alpha: self.alpha.detach(),
            strength: self.strength.detach(),
            mean: self.mean.detach(),
        }
    }

    /// Argmax label per pixel, `[B * H * W]` in image-major order.
    pub fn labels(&self) -> Vec<usize> {
        let (k, plane) = (self.classes(), self.plane());
        let m = self.mean.values();
        let mut out = Vec::with_capacity(self.batch() * plane);
        for b in 0..self.batch() {
            let base = b * k * plane;
            for p in 0..plane {
                let mut best = 0;
                for c in 1..k {
                    if m[base + c * plane + p] > m[base + best * plane + p] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        out
    }

    /// Max predictive probability per pixel.
    pub fn confidence(&self) -> Vec<f64> {
        let (k, plane) = (self.classes(), self.plane());
        let m = self.mean.values();
        (0..self.batch() * plane)
            .map(|i| {
                let (b, p) = (i / plane, i % plane);
                (0..k)
                    .map(|c| m[b * k * plane + c * plane + p])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

/// Stacks samples into a `[B, C, H, W]` constant tensor.
pub fn batch_input(config: &ModelConfig, samples: &[&SceneSample]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * config.in_channels * config.height * config.width);
    for s in samples {
        let got = vec![s.channels, s.height, s.width];
        let want = config.input_shape(1)[1..].to_vec();
        if got != want {
            return Err(CoreError::InputShape { expected: want, got });
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::new(&config.input_shape(samples.len()), data)?)
}

/// Evidence network: tanh conv layers, then a 1×1 head through softplus + 1.
pub fn forward(config: &ModelConfig, params: &BoundParams, image: &Tensor) -> Result<DirichletPrediction> {
    let expected = config.input_shape(image.shape().first().copied().unwrap_or(0));
    if image.rank() != 4 || image.shape() != expected.as_slice() || expected[0] == 0 {
        return Err(CoreError::InputShape {
            expected,
            got: image.shape().to_vec(),
        });
    }
    let pad = config.kernel / 2;
    let mut h = image.clone();
    for i in 0..config.widths.len() {
        h = h
            .conv2d(params.get(&format!("conv{i}.weight"))?, pad)?
            .add(params.get(&format!("conv{i}.bias"))?)?
            .tanh();
    }
    let logits = h
        .conv2d(params.get("head.weight")?, 0)?
        .add(params.get("head.bias")?)?;
    DirichletPrediction::from_alpha(logits.softplus().add_scalar(1.0))
}

/// Convenience forward without a graph.
pub fn predict(config: &ModelConfig, params: &ParameterSet, samples: &[&SceneSample]) -> Result<DirichletPrediction> {
    forward(config, &params.bind_frozen(), &batch_input(config, samples)?)
}

/// One-hot `[B, K, H, W]` encoding of image-major labels.
pub fn one_hot(labels: &[usize], classes: usize, batch: usize, height: usize, width: usize) -> Result<Tensor> {
    let plane = height * width;
    if labels.len() != batch * plane {
        return Err(CoreError::InputShape {
            expected: vec![batch, height, width],
            got: vec![labels.len()],
        });
    }
    let mut data = vec![0.0; batch * classes * plane];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(CoreError::LabelOutOfRange { label: l, classes });
        }
        data[(i / plane) * classes * plane + l * plane + i % plane] = 1.0;
    }
    Ok(Tensor::new(&[batch, classes, height, width], data)?)
}

fn check_one_hot(mask: &Tensor, k: usize, plane: usize) -> Result<()> {
    let v = mask.values();
    for b in 0..mask.shape()[0] {
        for p in 0..plane {
            let mut ones = 0;
            for c in 0..k {
                let y = v[b * k * plane + c * plane + p];
                if y == 1.0 {
                    ones += 1;
                } else if y != 0.0 {
                    ones = 2;
                }
            }
            if ones != 1 {
                return Err(CoreError::NotOneHot { pixel: b * plane + p });
            }
        }
    }
    Ok(())
}

/// Expected cross-entropy under the Dirichlet, Σ_k y_k (ψ(S) − ψ(α_k)),
/// averaged over pixels and batch.
pub fn evidential_loss(pred: &DirichletPrediction, mask: &Tensor) -> Result<Tensor> {
    if mask.shape() != pred.alpha.shape() {
        return Err(CoreError::InputShape {
            expected: pred.alpha.shape().to_vec(),
            got: mask.shape().to_vec(),
        });
    }
    check_one_hot(mask, pred.classes(), pred.plane())?;
    let true_term = pred.alpha.digamma()?.mul(mask)?.sum_axis(1)?;
    Ok(pred.strength.digamma()?.sub(&true_term)?.mean())
}

/// Per-pixel uncertainty, image-major `[B * H * W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    /// Normalized entropy of p̄, in [0, 1].
    pub aleatoric: Vec<f64>,
    /// K / S, in (0, 1].
    pub epistemic: Vec<f64>,
}

pub fn uncertainty_maps(pred: &DirichletPrediction) -> UncertaintyMaps {
    let (k, plane) = (pred.classes(), pred.plane());
    let (m, s) = (pred.mean.values(), pred.strength.values());
    let ln_k = (k as f64).ln();
    let n = pred.batch() * plane;
    let mut aleatoric = Vec::with_capacity(n);
    let mut epistemic = Vec::with_capacity(n);
    for i in 0..n {
        let (b, p) = (i / plane, i % plane);
        let h: f64 = (0..k)
            .map(|c| m[b * k * plane + c * plane + p])
            .filter(|&q| q > 0.0)
            .map(|q| -q * q.ln())
            .sum();
        aleatoric.push((h / ln_k).clamp(0.0, 1.0));
        epistemic.push(k as f64 / s[i]);
    }
    UncertaintyMaps {
        aleatoric,
        epistemic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha_pred(k: usize, values: Vec<f64>) -> DirichletPrediction {
        let n = values.len() / k;
        DirichletPrediction::from_alpha(Tensor::new(&[1, k, 1, n], values).unwrap()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_logits_give_uniform_prediction() {
        let cfg = ModelConfig::default();
        let mut params = init_params(&cfg).unwrap();
        for p in params.iter_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::full(&cfg.input_shape(1), 0.3);
        let pred = forward(&cfg, &params.bind_frozen(), &x).unwrap();
        let a = 1.0 + 2f64.ln();
        assert!(pred.alpha.values().iter().all(|v| close(*v, a, 1e-12)));
        assert!(pred.mean.values().iter().all(|v| close(*v, 1.0 / 3.0, 1e-12)));
    }

    #[test]
    fn large_logit_example() {
        let logits = Tensor::new(&[1, 3, 1, 1], vec![10.0, 0.0, 0.0]).unwrap();
        let pred = DirichletPrediction::from_alpha(logits.softplus().add_scalar(1.0)).unwrap();
        let a = pred.alpha.values();
        assert!(close(a[0], 11.0000, 1e-4) && close(a[1], 1.6931, 1e-4) && close(a[2], 1.6931, 1e-4));
        let m = pred.mean.values();
        assert!(close(m[0], 0.7646, 1e-4) && close(m[1], 0.1177, 1e-4) && close(m[2], 0.1177, 1e-4));
    }

    #[test]
    fn loss_closed_form_examples() {
        let y = one_hot(&[0], 2, 1, 1, 1).unwrap();
        let l = evidential_loss(&alpha_pred(2, vec![2.0, 1.0]), &y).unwrap().item();
        assert!(close(l, 0.5, 1e-12));
        let l = evidential_loss(&alpha_pred(2, vec![1.0, 1.0]), &y).unwrap().item();
        assert!(close(l, 1.0, 1e-12));
    }

    #[test]
    fn loss_rejects_soft_masks() {
        let soft = Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            evidential_loss(&alpha_pred(2, vec![2.0, 1.0]), &soft),
            Err(CoreError::NotOneHot { pixel: 0 })
        ));
        assert!(matches!(one_hot(&[3], 3, 1, 1, 1), Err(CoreError::LabelOutOfRange { .. })));
    }

    #[test]
    fn uncertainty_examples() {
        let u = uncertainty_maps(&alpha_pred(3, vec![2.0, 2.0, 2.0]));
        assert!(close(u.aleatoric[0], 1.0, 1e-12));
        let u = uncertainty_maps(&alpha_pred(3, vec![101.0, 1.0, 1.0]));
        assert!(close(u.aleatoric[0], 0.099_418_569_347_215, 1e-12));
        assert!(close(u.epistemic[0], 3.0 / 103.0, 1e-12));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(
            forward(&cfg, &params.bind_frozen(), &x),
            Err(CoreError::InputShape { .. })
        ));
    }

    #[test]
    fn architecture_mismatch_names_shapes() {
        let cfg = ModelConfig::default();
        let other = ModelConfig {
            widths: vec![4],
            ..cfg.clone()
        };
        let err = cfg.check_params(&init_params(&other).unwrap()).unwrap_err();
        assert!(err.to_string().contains("conv0.weight[4, 1, 3, 3]"));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }
}
