use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, log_sum_exp, softmax, softmax_into, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadOptimizer {
    /// Plain mini-batch steps scaled by `1 / (1 + median |x|²)`.
    Sgd,
    /// Per-coordinate adaptive steps (β = 0.9, 0.999).
    Adam,
}

impl std::str::FromStr for HeadOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::invalid(format!("unknown head optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadOptimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Optimizer settings for the Ω-way softmax layers (stacking head, early
/// fusion head) and the optional end-to-end refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub mu: f64,
    pub optimizer: HeadOptimizer,
    /// Base step. Under `Sgd` it is divided by `1 + median |x|²` of the
    /// training features.
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Run the refinement that pushes head gradients back into the expert heads.
    pub end_to_end: bool,
    pub end_to_end_epochs: usize,
    pub end_to_end_learning_rate: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            optimizer: HeadOptimizer::Sgd,
            learning_rate: 1.0,
            lr_decay: 0.5,
            lr_decay_every: 30,
            epochs: 100,
            batch_size: 32,
            end_to_end: false,
            end_to_end_epochs: 5,
            end_to_end_learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.end_to_end_learning_rate > 0.0) {
            return Err(Error::invalid("head scalars must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid("head epochs, batch size and decay period must be >= 1"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Linear layer plus softmax over all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxHead<F> {
    /// `classes × inputs`.
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient<F> {
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> SoftmaxHead<F> {
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self { weights: Matrix::zeros(classes, inputs), bias: vec![F::zero(); classes] }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self, x: &[F]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!("head expects {} inputs, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[F]) -> Result<Vec<F>> {
        self.check(x)?;
        Ok((0..self.n_classes()).map(|h| dot(self.weights.row(h), x) + self.bias[h]).collect())
    }

    pub fn probabilities(&self, x: &[F]) -> Result<Vec<F>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// `−μ Σ_m log softmax(x_m)[y_m]`, the negated log-likelihood.
    pub fn loss(&self, features: &[&[F]], labels: &[usize], mu: f64) -> Result<F> {
        let mut total = F::zero();
        for (x, &y) in features.iter().zip(labels) {
            let z = self.logits(x)?;
            if y >= z.len() {
                return Err(Error::InvalidLabel { label: y, max: z.len() - 1 });
            }
            total += log_sum_exp(&z) - z[y];
        }
        Ok(F::of(mu) * total)
    }

    pub fn gradient(&self, features: &[&[F]], labels: &[usize], mu: f64) -> Result<HeadGradient<F>> {
        let mut g = HeadGradient {
            weights: Matrix::zeros(self.n_classes(), self.input_dim()),
            bias: vec![F::zero(); self.n_classes()],
        };
        let mut probs = Vec::new();
        for (x, &y) in features.iter().zip(labels) {
            softmax_into(&self.logits(x)?, &mut probs);
            if y >= probs.len() {
                return Err(Error::InvalidLabel { label: y, max: probs.len() - 1 });
            }
            for (h, &p) in probs.iter().enumerate() {
                let d = F::of(mu) * if h == y { p - F::one() } else { p };
                g.bias[h] += d;
                if d != F::zero() {
                    for (w, &xv) in g.weights.row_mut(h).iter_mut().zip(x.iter()) {
                        *w += d * xv;
                    }
                }
            }
        }
        Ok(g)
    }

    /// `∂loss/∂x` for one sample.
    pub fn input_gradient(&self, x: &[F], label: usize, mu: f64) -> Result<Vec<F>> {
        let probs = self.probabilities(x)?;
        let dz: Vec<F> =
            probs.iter().enumerate().map(|(h, &p)| F::of(mu) * if h == label { p - F::one() } else { p }).collect();
        Ok(self.weights.tr_mul_vec(&dz))
    }

    pub(crate) fn apply(&mut self, grad: &HeadGradient<F>, step: F) {
        for (w, &g) in self.weights.as_mut_slice().iter_mut().zip(grad.weights.as_slice()) {
            *w -= step * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= step * g;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// `1 + median |x|²`, used to normalize the step across feature scales.
pub fn feature_scale<F: Scalar>(features: &[&[F]]) -> F {
    let mut norms: Vec<F> = features.iter().map(|x| dot(x, x)).collect();
    if norms.is_empty() {
        return F::one();
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    F::one() + norms[norms.len() / 2]
}

/// Mini-batch gradient descent on the negated log-likelihood from a zero start.
pub fn train_softmax_head<F: Scalar>(
    features: &[&[F]],
    labels: &[usize],
    n_classes: usize,
    cfg: &HeadConfig,
) -> Result<SoftmaxHead<F>> {
    cfg.validate()?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid("head training needs one label per feature vector"));
    }
    let inputs = features[0].len();
    let mut head = SoftmaxHead::zeros(n_classes, inputs);
    let scale = match cfg.optimizer {
        HeadOptimizer::Sgd => feature_scale(features),
        HeadOptimizer::Adam => F::one(),
    };
    let mut adam = Adam::new(head.weights.as_slice().len() + head.bias.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = F::of(cfg.learning_rate_at(epoch)) / scale;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[F]> = chunk.iter().map(|&i| features[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grad = head.gradient(&xs, &ys, cfg.mu)?;
            let n = F::of_usize(chunk.len());
            match cfg.optimizer {
                HeadOptimizer::Sgd => head.apply(&grad, lr / n),
                HeadOptimizer::Adam => {
                    let g = grad.weights.as_slice().iter().chain(&grad.bias).map(|&v| v / n);
                    let params = head.weights.as_mut_slice().iter_mut().chain(head.bias.iter_mut());
                    adam.step(params, g, lr);
                }
            }
        }
        if !head.all_finite() {
            return Err(Error::TrainingFailure { epoch, reason: "non-finite stacking head parameters".into() });
        }
    }
    Ok(head)
}

struct Adam<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![F::zero(); n], v: vec![F::zero(); n], t: 0 }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut F>, grad: impl Iterator<Item = F>, lr: F) {
        self.t += 1;
        let (b1, b2) = (F::of(Self::BETA1), F::of(Self::BETA2));
        let c1 = F::one() - b1.powi(self.t);
        let c2 = F::one() - b2.powi(self.t);
        for (((p, g), m), v) in params.zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (F::one() - b1) * g;
            *v = b2 * *v + (F::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + F::of(Self::EPS));
        }
    }
}

/// Top-`k` `(class, score)` pairs, descending, ties to the lower class id.
pub fn rank<F: Scalar>(scores: &[F], k: usize) -> Result<Vec<(usize, F)>> {
    if k > scores.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} classes", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|c| (c, scores[c])).collect())
}
