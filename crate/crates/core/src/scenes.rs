//! Deterministic synthetic segmentation scenes.
//!
//! A scene is a background (class 0) with overlapping elliptical regions of
//! the foreground classes. Each class has its own mean intensity; pixels
//! within `ambiguity_width` of a class boundary blend linearly toward the
//! neighbouring class so the boundary band is intrinsically ambiguous.
//! Corrupted copies (noise, blur) move the images off the training
//! distribution without touching the labels.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

const MAX_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Number of elliptical regions drawn over the background.
    pub primitives: usize,
    /// Pixels over which intensities blend across a class boundary.
    pub ambiguity_width: f64,
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
    /// Every class must cover at least this fraction of the image.
    pub min_class_fraction: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            classes: 3,
            primitives: 4,
            ambiguity_width: 2.0,
            noise: 0.05,
            min_class_fraction: 0.03,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(CoreError::config(field, reason));
        if self.height < 8 || self.width < 8 {
            return bad("height/width", "must be at least 8");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes");
        }
        if self.primitives + 1 < self.classes {
            return bad("primitives", "need at least one primitive per foreground class");
        }
        let half = self.height.min(self.width) as f64 / 2.0;
        if !(self.ambiguity_width >= 0.0 && self.ambiguity_width < half) {
            return bad("ambiguity_width", "must lie in [0, min(H, W) / 2)");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a non-negative number");
        }
        if !(0.0..1.0 / self.classes as f64).contains(&self.min_class_fraction) {
            return bad("min_class_fraction", "must lie in [0, 1/K)");
        }
        Ok(())
    }

    /// Mean intensity of class `k`, evenly spaced in [0.15, 0.85].
    pub fn class_intensity(&self, k: usize) -> f64 {
        0.15 + 0.7 * k as f64 / (self.classes - 1) as f64
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 2] = [CorruptionKind::GaussianNoise, CorruptionKind::GaussianBlur];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
        }
    }

    /// Noise standard deviation or blur sigma for severity 1..=5.
    pub fn strength(self, severity: u8) -> f64 {
        let table = match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionKind::GaussianBlur => [0.6, 1.0, 1.5, 2.0, 3.0],
        };
        table[usize::from(severity.clamp(1, 5)) - 1]
    }

    fn salt(self) -> u64 {
        match self {
            CorruptionKind::GaussianNoise => 0x6e6f_6973_65,
            CorruptionKind::GaussianBlur => 0x626c_7572,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::UnknownCorruption(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            kind: CorruptionKind::GaussianNoise,
            severity: 3,
        }
    }
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        if (1..=5).contains(&self.severity) {
            Ok(())
        } else {
            Err(CoreError::config("severity", "must be in 1..=5"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub index: usize,
    pub corruption: Option<Corruption>,
}

impl Provenance {
    pub fn is_ood(&self) -> bool {
        self.corruption.is_some()
    }
}

/// One image with its label mask. Images are stored channel-first
/// (`[C, H, W]`, row-major) with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub image: Vec<f64>,
    pub mask: Vec<usize>,
    /// Pixels inside the ambiguity band.
    pub band: Vec<bool>,
    pub provenance: Provenance,
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Fraction of pixels per class.
    pub fn class_fractions(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for &l in &self.mask {
            counts[l] += 1;
        }
        counts
            .iter()
            .map(|&c| c as f64 / self.mask.len() as f64)
            .collect()
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    class: usize,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn draw_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let shapes: Vec<Ellipse> = (0..spec.primitives)
        .map(|i| Ellipse {
            cy: rng.random_range(0.15 * h..0.85 * h),
            cx: rng.random_range(0.15 * w..0.85 * w),
            ry: rng.random_range(h / 8.0..h / 3.0),
            rx: rng.random_range(w / 8.0..w / 3.0),
            class: 1 + i % (spec.classes - 1),
        })
        .collect();
    let mut mask = vec![0usize; spec.pixels()];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if let Some(e) = shapes.iter().rev().find(|e| e.contains(py, px)) {
                mask[y * spec.width + x] = e.class;
            }
        }
    }
    mask
}

/// For each pixel: distance to the nearest pixel of another class (minus
/// half a pixel, so neighbours across a boundary sit at 0.5) and that class.
fn boundary_distances(spec: &SceneSpec, mask: &[usize]) -> Vec<(f64, usize)> {
    let (h, w) = (spec.height as isize, spec.width as isize);
    let reach = spec.ambiguity_width.ceil() as isize + 1;
    let mut out = Vec::with_capacity(mask.len());
    for y in 0..h {
        for x in 0..w {
            let own = mask[(y * w + x) as usize];
            let mut best = (f64::INFINITY, own);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h || nx >= w {
                        continue;
                    }
                    let other = mask[(ny * w + nx) as usize];
                    if other == own {
                        continue;
                    }
                    let d = ((dy * dy + dx * dx) as f64).sqrt() - 0.5;
                    if d < best.0 {
                        best = (d, other);
                    }
                }
            }
            out.push(best);
        }
    }
    out
}

fn balanced(spec: &SceneSpec, mask: &[usize]) -> bool {
    let mut counts = vec![0usize; spec.classes];
    for &l in mask {
        counts[l] += 1;
    }
    let min = (spec.min_class_fraction * mask.len() as f64).ceil() as usize;
    counts.iter().all(|&c| c >= min.max(1))
}

/// Sample `index` of the scene family described by `spec`. The result is a
/// pure function of `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> SceneSample {
    let base = mix_seed(spec.seed, index as u64);
    let mut attempt = 0;
    let mask = loop {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, attempt));
        let mask = draw_labels(spec, &mut rng);
        attempt += 1;
        if balanced(spec, &mask) {
            break mask;
        }
        if attempt == MAX_ATTEMPTS {
            log::warn!("scene {index}: class balance not reached after {MAX_ATTEMPTS} attempts");
            break mask;
        }
    };

    let dist = boundary_distances(spec, &mask);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base, 0x7465_7874));
    let mut image = vec![0.0; spec.channels * spec.pixels()];
    let mut band = vec![false; spec.pixels()];
    for (p, &(d, other)) in dist.iter().enumerate() {
        let own = spec.class_intensity(mask[p]);
        let mean = if spec.ambiguity_width > 0.0 && d < spec.ambiguity_width {
            band[p] = true;
            let t = 0.5 + 0.5 * d / spec.ambiguity_width;
            t * own + (1.0 - t) * spec.class_intensity(other)
        } else {
            own
        };
        for c in 0..spec.channels {
            let z: f64 = rng.sample(StandardNormal);
            image[c * spec.pixels() + p] = (mean + spec.noise * z).clamp(0.0, 1.0);
        }
    }

    SceneSample {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        image,
        mask,
        band,
        provenance: Provenance {
            seed: spec.seed,
            index,
            corruption: None,
        },
    }
}

pub fn generate_dataset(spec: &SceneSpec, count: usize) -> Vec<SceneSample> {
    (0..count).map(|i| generate_scene(spec, i)).collect()
}

/// Corrupted copy of `sample`; the mask and band are unchanged.
pub fn corrupt(sample: &SceneSample, corruption: Corruption) -> Result<SceneSample> {
    corruption.validate()?;
    let strength = corruption.kind.strength(corruption.severity);
    let plane = sample.pixels();
    let image = match corruption.kind {
        CorruptionKind::GaussianNoise => {
            // The same draws serve every severity so distortion grows monotonically.
            let seed = mix_seed(
                mix_seed(sample.provenance.seed, sample.provenance.index as u64),
                corruption.kind.salt(),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample
                .image
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    (v + strength * z).clamp(0.0, 1.0)
                })
                .collect()
        }
        CorruptionKind::GaussianBlur => sample
            .image
            .chunks(plane)
            .flat_map(|ch| gaussian_blur(ch, sample.height, sample.width, strength))
            .collect(),
    };
    let mut out = sample.clone();
    out.image = image;
    out.provenance.corruption = Some(corruption);
    Ok(out)
}

/// Parses `kind` before corrupting; convenience for string-driven callers.
pub fn corrupt_named(sample: &SceneSample, kind: &str, severity: u8) -> Result<SceneSample> {
    corrupt(
        sample,
        Corruption {
            kind: kind.parse()?,
            severity,
        },
    )
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Index lists of a random train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 20% held out for testing, then 20% of the rest for validation
/// (64 / 16 / 20 overall). Shares round up.
pub fn split(count: usize, seed: u64) -> Result<Splits> {
    if count < 10 {
        return Err(CoreError::config("count", "need at least 10 samples to split"));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7370_6c69_74)));
    let n_test = count.div_ceil(5);
    let n_val = (count - n_test).div_ceil(5);
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SceneSpec::default().validate().unwrap();
    }

    #[test]
    fn rejects_wide_ambiguity_band() {
        let spec = SceneSpec {
            ambiguity_width: 16.0,
            ..SceneSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 11), generate_scene(&spec, 11));
        assert_ne!(generate_scene(&spec, 11).image, generate_scene(&spec, 12).image);
    }

    #[test]
    fn every_class_present() {
        let spec = SceneSpec::default();
        for i in 0..40 {
            let s = generate_scene(&spec, i);
            let fr = s.class_fractions(spec.classes);
            assert!(fr.iter().all(|&f| f >= spec.min_class_fraction), "{i}: {fr:?}");
        }
    }

    #[test]
    fn band_follows_width() {
        let sharp = SceneSpec {
            ambiguity_width: 0.0,
            ..SceneSpec::default()
        };
        assert!(!generate_scene(&sharp, 0).band.iter().any(|b| *b));
        let soft = generate_scene(&SceneSpec::default(), 0);
        let n = soft.band.iter().filter(|b| **b).count();
        assert!(n > 0 && n < soft.pixels());
    }

    #[test]
    fn unknown_corruption_kind() {
        let s = generate_scene(&SceneSpec::default(), 0);
        assert!(matches!(
            corrupt_named(&s, "jpeg", 2),
            Err(CoreError::UnknownCorruption(_))
        ));
        assert!(corrupt_named(&s, "gaussian_blur", 6).is_err());
        assert!(corrupt_named(&s, "gaussian_blur", 2).is_ok());
    }

    #[test]
    fn split_sizes() {
        let s = split(100, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (64, 16, 20));
        let s = split(782, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 125, 157));
        assert!(split(9, 1).is_err());
    }
}
