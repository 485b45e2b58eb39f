//! Harm score aggregation over the digit distribution, the 10-dimensional
//! feature vector, and a small fully-connected classifier head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_FEATURES: usize = 10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("probability vector must be finite and non-negative")]
    Negative,
    #[error("probability vector sums to zero; score is undefined")]
    ZeroMass,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid head parameters: {0}")]
    Head(String),
    #[error("head file parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A harm probability in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HarmScore(f64);

impl HarmScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_mass(p: &[f64; N_FEATURES]) -> Result<f64, FeatureError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(FeatureError::Negative);
    }
    let sum: f64 = p.iter().sum();
    if sum <= 0.0 {
        return Err(FeatureError::ZeroMass);
    }
    Ok(sum)
}

/// Expected digit divided by nine, computed on the unnormalized vector:
/// `sum(p_i * i) / (9 * sum(p_i))`. Scaling `p` leaves it unchanged, so
/// raw full-vocabulary probabilities and renormalized ones score alike.
///
/// Evaluated as `1/2 + sum_{i>=5} (p_i - p_{9-i}) (i - 4.5) / (9 * sum(p))`,
/// the same quantity centred on the midpoint, so symmetric inputs such as
/// the uniform distribution land on exactly 0.5.
pub fn aggregate_score(p: &[f64; N_FEATURES]) -> Result<HarmScore, FeatureError> {
    let sum = check_mass(p)?;
    let centred: f64 = (5..N_FEATURES).map(|i| (p[i] - p[9 - i]) * (i as f64 - 4.5)).sum();
    Ok(HarmScore((0.5 + centred / (9.0 * sum)).clamp(0.0, 1.0)))
}

pub fn extract_features(p: &[f64; N_FEATURES]) -> Result<[f64; N_FEATURES], FeatureError> {
    let sum = check_mass(p)?;
    Ok(p.map(|v| v / sum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_width: 16,
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), FeatureError> {
        if self.hidden_width == 0 {
            return Err(FeatureError::Config("hidden_width must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FeatureError::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(FeatureError::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// 10 -> H (ReLU) -> 1 (sigmoid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnHead {
    pub hidden_width: usize,
    /// `hidden_width` rows of 10 input weights.
    pub w1: Vec<[f64; N_FEATURES]>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub seed: u64,
}

/// Parameter-shaped gradient of the mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub w1: Vec<[f64; N_FEATURES]>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl FcnHead {
    pub fn zeros(hidden_width: usize) -> Self {
        FcnHead {
            hidden_width,
            w1: vec![[0.0; N_FEATURES]; hidden_width],
            b1: vec![0.0; hidden_width],
            w2: vec![0.0; hidden_width],
            b2: 0.0,
            seed: 0,
        }
    }

    /// Uniform in +-1/sqrt(fan_in) per layer, drawn from ChaCha8 seeded with
    /// `seed`.
    pub fn init(hidden_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (N_FEATURES as f64).sqrt();
        let a2 = 1.0 / (hidden_width as f64).sqrt();
        let mut head = Self::zeros(hidden_width);
        head.seed = seed;
        for row in &mut head.w1 {
            for w in row.iter_mut() {
                *w = rng.random_range(-a1..=a1);
            }
        }
        for b in &mut head.b1 {
            *b = rng.random_range(-a1..=a1);
        }
        for w in &mut head.w2 {
            *w = rng.random_range(-a2..=a2);
        }
        head.b2 = rng.random_range(-a2..=a2);
        head
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let h = self.hidden_width;
        if h == 0 || self.w1.len() != h || self.b1.len() != h || self.w2.len() != h {
            return Err(FeatureError::Head(format!(
                "shape mismatch for hidden_width {h}: w1 {}, b1 {}, w2 {}",
                self.w1.len(),
                self.b1.len(),
                self.w2.len()
            )));
        }
        let finite = self.w1.iter().flatten().all(|v| v.is_finite())
            && self.b1.iter().chain(&self.w2).all(|v| v.is_finite())
            && self.b2.is_finite();
        if !finite {
            return Err(FeatureError::Head("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, FeatureError> {
        let head: FcnHead = serde_json::from_str(s)?;
        head.validate()?;
        Ok(head)
    }

    pub fn to_json(&self) -> Result<String, FeatureError> {
        Ok(serde_json::to_string(self)?)
    }

    fn hidden(&self, x: &[f64; N_FEATURES]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn output_logit(&self, pre: &[f64]) -> f64 {
        pre.iter().zip(&self.w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>() + self.b2
    }

    /// Mean binary cross-entropy over the batch.
    pub fn loss(&self, features: &[[f64; N_FEATURES]], labels: &[u8]) -> f64 {
        let total: f64 = features
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.output_logit(&self.hidden(x));
                softplus(z) - f64::from(y) * z
            })
            .sum();
        total / features.len() as f64
    }

    /// Mean loss and its gradient by backpropagation.
    pub fn loss_and_gradient(&self, features: &[[f64; N_FEATURES]], labels: &[u8]) -> (f64, HeadGradient) {
        let h = self.hidden_width;
        let mut g = HeadGradient {
            w1: vec![[0.0; N_FEATURES]; h],
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: 0.0,
        };
        let n = features.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let pre = self.hidden(x);
            let z = self.output_logit(&pre);
            let y = f64::from(y);
            loss += softplus(z) - y * z;
            let dz = (sigmoid(z) - y) / n;
            g.b2 += dz;
            for j in 0..h {
                if pre[j] > 0.0 {
                    g.w2[j] += dz * pre[j];
                    let da = dz * self.w2[j];
                    g.b1[j] += da;
                    for (gw, xv) in g.w1[j].iter_mut().zip(x) {
                        *gw += da * xv;
                    }
                }
            }
        }
        (loss / n, g)
    }

    fn step(&mut self, g: &HeadGradient, lr: f64) {
        for (row, grow) in self.w1.iter_mut().zip(&g.w1) {
            for (w, d) in row.iter_mut().zip(grow) {
                *w -= lr * d;
            }
        }
        for (b, d) in self.b1.iter_mut().zip(&g.b1) {
            *b -= lr * d;
        }
        for (w, d) in self.w2.iter_mut().zip(&g.w2) {
            *w -= lr * d;
        }
        self.b2 -= lr * g.b2;
    }
}

/// Largest f64 below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Head probability, kept strictly inside (0, 1) even when the logit
/// saturates the sigmoid in floating point.
pub fn predict_head(head: &FcnHead, features: &[f64; N_FEATURES]) -> HarmScore {
    let z = head.output_logit(&head.hidden(features));
    HarmScore(sigmoid(z).clamp(f64::MIN_POSITIVE, BELOW_ONE))
}

/// Result of [`train_head`]: the head plus its loss before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: FcnHead,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full-batch gradient descent on mean binary cross-entropy.
pub fn train_head(
    features: &[[f64; N_FEATURES]],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<TrainedHead, FeatureError> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(FeatureError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < 2 {
        return Err(FeatureError::TooFewSamples(features.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(FeatureError::BadLabel(bad));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(FeatureError::SingleClass);
    }
    let mut head = FcnHead::init(config.hidden_width, config.seed);
    let mut initial_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let (loss, grad) = head.loss_and_gradient(features, labels);
        if !loss.is_finite() {
            return Err(FeatureError::NonFiniteLoss(epoch));
        }
        if epoch == 0 {
            initial_loss = loss;
        }
        head.step(&grad, config.learning_rate);
    }
    let final_loss = head.loss(features, labels);
    if !final_loss.is_finite() {
        return Err(FeatureError::NonFiniteLoss(config.epochs));
    }
    Ok(TrainedHead {
        head,
        initial_loss,
        final_loss,
    })
}
