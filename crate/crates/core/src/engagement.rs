//! The trainable engagement head.
//!
//! `embedding -> Dense(1024, ReLU) -> Dense(2, softmax)`, trained with
//! categorical cross-entropy and SGD with momentum and per-step learning
//! rate decay `lr_t = lr0 / (1 + decay * t)`.
//!
//! Parameters are stored as `T` (`f32` in production, `f64` for numerical
//! checks); every reduction accumulates in `f64`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::macro_f1;
use crate::features::Embedding;
use crate::labeling::EngagementLabel;

pub const HIDDEN_UNITS: usize = 1024;

/// Smallest probability fed to the log in [`loss`].
pub const PROB_FLOOR: f64 = 1e-12;

pub trait Real: Copy + Send + Sync + PartialEq + std::fmt::Debug + Into<f64> + 'static {
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Binary engagement class. Index 0 is `High`, index 1 is `Low`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    High,
    Low,
}

impl Class {
    pub fn index(self) -> usize {
        match self {
            Class::High => 0,
            Class::Low => 1,
        }
    }

    pub fn from_label(label: EngagementLabel) -> Option<Class> {
        match label {
            EngagementLabel::High => Some(Class::High),
            EngagementLabel::Low => Some(Class::Low),
            _ => None,
        }
    }

    pub fn label(self) -> EngagementLabel {
        match self {
            Class::High => EngagementLabel::High,
            Class::Low => EngagementLabel::Low,
        }
    }

    pub fn flipped(self) -> Class {
        match self {
            Class::High => Class::Low,
            Class::Low => Class::High,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T: Real = f32> {
    pub dim: usize,
    pub hidden: usize,
    /// `hidden x dim`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `2 x hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: [T; 2],
}

/// He-uniform weights (bound `sqrt(6 / fan_in)` on both layers), zero biases.
pub fn init_head<T: Real>(dim: usize, seed: u64) -> Result<HeadParams<T>> {
    init_head_with_hidden(dim, HIDDEN_UNITS, seed)
}

pub fn init_head_with_hidden<T: Real>(dim: usize, hidden: usize, seed: u64) -> Result<HeadParams<T>> {
    if dim == 0 || hidden == 0 {
        return Err(Error::Invalid("head dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect()
    };
    let w1 = uniform(hidden * dim, dim);
    let w2 = uniform(2 * hidden, hidden);
    Ok(HeadParams {
        dim,
        hidden,
        w1,
        b1: vec![T::from_f64(0.0); hidden],
        w2,
        b2: [T::from_f64(0.0); 2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_high: f64,
    pub p_low: f64,
}

impl Prediction {
    pub fn prob(&self, class: Class) -> f64 {
        match class {
            Class::High => self.p_high,
            Class::Low => self.p_low,
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: [f64; 2],
    pub prediction: Prediction,
}

/// Softmax over two logits with max-subtraction.
pub fn softmax(logits: [f64; 2]) -> Prediction {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let sum = e0 + e1;
    Prediction {
        p_high: e0 / sum,
        p_low: e1 / sum,
    }
}

/// Categorical cross-entropy of the true class, with the probability
/// clamped at [`PROB_FLOOR`].
pub fn loss(pred: &Prediction, class: Class) -> f64 {
    -pred.prob(class).max(PROB_FLOOR).ln()
}

fn dot<T: Real, X: Copy + Into<f64>>(w: &[T], x: &[X]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a.into() * b.into()).sum()
}

impl<T: Real> HeadParams<T> {
    pub fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimMismatch(format!(
                "head expects {}-dimensional embeddings, got {got}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn forward_pass<X: Copy + Into<f64>>(&self, x: &[X]) -> Result<ForwardPass> {
        self.check_dim(x.len())?;
        let pre_activation: Vec<f64> = self
            .w1
            .chunks_exact(self.dim)
            .zip(&self.b1)
            .map(|(row, &b)| dot(row, x) + b.into())
            .collect();
        let hidden: Vec<f64> = pre_activation.iter().map(|&a| a.max(0.0)).collect();
        let logits = [
            dot(&self.w2[..self.hidden], &hidden) + self.b2[0].into(),
            dot(&self.w2[self.hidden..], &hidden) + self.b2[1].into(),
        ];
        Ok(ForwardPass {
            pre_activation,
            hidden,
            logits,
            prediction: softmax(logits),
        })
    }

    pub fn forward(&self, e: &Embedding) -> Result<Prediction> {
        Ok(self.forward_pass(&e.values)?.prediction)
    }

    pub fn to_f64(&self) -> HeadParams<f64> {
        let conv = |v: &[T]| v.iter().map(|&x| x.into()).collect::<Vec<f64>>();
        HeadParams {
            dim: self.dim,
            hidden: self.hidden,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: [self.b2[0].into(), self.b2[1].into()],
        }
    }

    pub fn is_finite(&self) -> bool {
        let finite = |v: &T| (*v).into().is_finite();
        self.w1.iter().all(finite)
            && self.b1.iter().all(finite)
            && self.w2.iter().all(finite)
            && self.b2.iter().all(finite)
    }
}

/// Label by argmax; exact ties resolve to `Low`.
pub fn predict<T: Real>(head: &HeadParams<T>, e: &Embedding) -> Result<(Class, Prediction)> {
    let pred = head.forward(e)?;
    Ok((decide(&pred), pred))
}

pub fn decide(pred: &Prediction) -> Class {
    if pred.p_high > pred.p_low {
        Class::High
    } else {
        Class::Low
    }
}

/// Mean-over-batch gradients, laid out like [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: [f64; 2],
}

impl Gradients {
    fn zeros(dim: usize, hidden: usize) -> Self {
        Gradients {
            w1: vec![0.0; hidden * dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; 2 * hidden],
            b2: [0.0; 2],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Backpropagation through softmax-cross-entropy (logit gradient
/// `p - onehot`), the output layer, ReLU (derivative 0 at 0) and the hidden
/// layer.
pub fn gradients<T: Real, X: Copy + Into<f64>>(head: &HeadParams<T>, batch: &[(&[X], Class)]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Invalid("gradient of an empty batch".into()));
    }
    let (dim, hidden) = (head.dim, head.hidden);
    let mut g = Gradients::zeros(dim, hidden);
    let mut dpre = vec![0.0f64; hidden];
    for &(x, class) in batch {
        let pass = head.forward_pass(x)?;
        let mut dz = [pass.prediction.p_high, pass.prediction.p_low];
        dz[class.index()] -= 1.0;
        for (k, &dzk) in dz.iter().enumerate() {
            g.b2[k] += dzk;
            let row = &mut g.w2[k * hidden..(k + 1) * hidden];
            for (acc, h) in row.iter_mut().zip(&pass.hidden) {
                *acc += dzk * h;
            }
        }
        for (i, d) in dpre.iter_mut().enumerate() {
            *d = if pass.pre_activation[i] > 0.0 {
                dz[0] * head.w2[i].into() + dz[1] * head.w2[hidden + i].into()
            } else {
                0.0
            };
        }
        for (i, &d) in dpre.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.b1[i] += d;
            let row = &mut g.w1[i * dim..(i + 1) * dim];
            for (acc, &xj) in row.iter_mut().zip(x) {
                *acc += d * xj.into();
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for v in g.w1.iter_mut().chain(&mut g.b1).chain(&mut g.w2).chain(&mut g.b2) {
        *v *= scale;
    }
    Ok(g)
}

fn default_lr() -> f64 {
    0.005
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    1e-6
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: default_lr(),
            momentum: default_momentum(),
            decay: default_decay(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.decay >= 0.0
            && self.epochs >= 1
            && self.batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid training config {self:?}")))
        }
    }

    /// `lr0 / (1 + decay * t)` after `t` optimizer steps.
    pub fn learning_rate(&self, t: u64) -> f64 {
        self.lr0 / (1.0 + self.decay * t as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub v_w1: Vec<T>,
    pub v_b1: Vec<T>,
    pub v_w2: Vec<T>,
    pub v_b2: [T; 2],
    /// Optimizer steps taken so far.
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(head: &HeadParams<T>) -> Self {
        let zero = T::from_f64(0.0);
        OptimizerState {
            v_w1: vec![zero; head.w1.len()],
            v_b1: vec![zero; head.b1.len()],
            v_w2: vec![zero; head.w2.len()],
            v_b2: [zero; 2],
            t: 0,
        }
    }
}

fn momentum_update<T: Real>(w: &mut [T], v: &mut [T], g: &[f64], mu: f64, lr: f64) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        let vel = mu * (*v).into() - lr * g;
        *v = T::from_f64(vel);
        *w = T::from_f64((*w).into() + vel);
    }
}

/// `v <- mu v - lr_t g; w <- w + v; t <- t + 1`.
pub fn sgd_step<T: Real>(
    head: &mut HeadParams<T>,
    grads: &Gradients,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) {
    let lr = cfg.learning_rate(state.t);
    let mu = cfg.momentum;
    momentum_update(&mut head.w1, &mut state.v_w1, &grads.w1, mu, lr);
    momentum_update(&mut head.b1, &mut state.v_b1, &grads.b1, mu, lr);
    momentum_update(&mut head.w2, &mut state.v_w2, &grads.w2, mu, lr);
    momentum_update(&mut head.b2, &mut state.v_b2, &grads.b2, mu, lr);
    state.t += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the training set after the epoch.
    pub loss: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub head: HeadParams<f32>,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
}

/// Mean loss and macro F1 of `head` over `dataset`.
pub fn evaluate<T: Real>(head: &HeadParams<T>, dataset: &[(Embedding, Class)]) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(dataset.len());
    for (e, class) in dataset {
        let pred = head.forward(e)?;
        total += loss(&pred, *class);
        preds.push(decide(&pred));
    }
    let truths: Vec<Class> = dataset.iter().map(|(_, c)| *c).collect();
    Ok((total / dataset.len() as f64, macro_f1(&preds, &truths)?))
}

/// Trains a fresh head for `cfg.epochs` epochs of `ceil(n / batch_size)`
/// steps. Initialization and shuffling derive only from `cfg.seed`.
pub fn train(dataset: &[(Embedding, Class)], cfg: &TrainConfig) -> Result<TrainedHead> {
    cfg.validate()?;
    let Some((first, _)) = dataset.first() else {
        return Err(Error::Insufficient("training set is empty".into()));
    };
    let has = |c: Class| dataset.iter().any(|(_, k)| *k == c);
    if !(has(Class::High) && has(Class::Low)) {
        return Err(Error::Insufficient(
            "training set must contain both High and Low examples".into(),
        ));
    }
    let dim = first.dim();
    for (e, _) in dataset {
        if e.dim() != dim {
            return Err(Error::DimMismatch(format!(
                "training embeddings mix dimensions {dim} and {}",
                e.dim()
            )));
        }
    }

    let mut head: HeadParams<f32> = init_head(dim, cfg.seed)?;
    let mut state = OptimizerState::new(&head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f32], Class)> = chunk
                .iter()
                .map(|&i| (dataset[i].0.values.as_slice(), dataset[i].1))
                .collect();
            let grads = gradients(&head, &batch)?;
            sgd_step(&mut head, &grads, &mut state, cfg);
        }
        if !head.is_finite() {
            return Err(Error::Model(format!("training diverged in epoch {}", epoch + 1)));
        }
        let (loss, macro_f1) = evaluate(&head, dataset)?;
        log::info!("epoch {}: loss {loss:.6} macro F1 {macro_f1:.4}", epoch + 1);
        history.push(EpochStats {
            epoch: epoch + 1,
            loss,
            macro_f1,
        });
    }

    Ok(TrainedHead {
        head,
        config: cfg.clone(),
        history,
    })
}

pub const HEAD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeadFile {
    version: u32,
    embedding_dim: usize,
    w1: Vec<Vec<f32>>,
    b1: Vec<f32>,
    w2: Vec<Vec<f32>>,
    b2: Vec<f32>,
    train_config: TrainConfig,
    history: Vec<EpochStats>,
}

impl TrainedHead {
    pub fn to_json(&self) -> String {
        let h = &self.head;
        let file = HeadFile {
            version: HEAD_FORMAT_VERSION,
            embedding_dim: h.dim,
            w1: h.w1.chunks(h.dim).map(<[f32]>::to_vec).collect(),
            b1: h.b1.clone(),
            w2: h.w2.chunks(h.hidden).map(<[f32]>::to_vec).collect(),
            b2: h.b2.to_vec(),
            train_config: self.config.clone(),
            history: self.history.clone(),
        };
        serde_json::to_string(&file).expect("head serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Artifact {
            path: path.to_path_buf(),
            message,
        };
        let file: HeadFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if file.version != HEAD_FORMAT_VERSION {
            return Err(bad(format!("unsupported head version {}", file.version)));
        }
        let dim = file.embedding_dim;
        let hidden = file.b1.len();
        let shapes_ok = dim > 0
            && hidden > 0
            && file.w1.len() == hidden
            && file.w1.iter().all(|r| r.len() == dim)
            && file.w2.len() == 2
            && file.w2.iter().all(|r| r.len() == hidden)
            && file.b2.len() == 2;
        if !shapes_ok {
            return Err(bad("inconsistent weight shapes".into()));
        }
        let head = HeadParams {
            dim,
            hidden,
            w1: file.w1.concat(),
            b1: file.b1,
            w2: file.w2.concat(),
            b2: [file.b2[0], file.b2[1]],
        };
        if !head.is_finite() {
            return Err(bad("non-finite weights".into()));
        }
        Ok(TrainedHead {
            head,
            config: file.train_config,
            history: file.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn zero_head(dim: usize, hidden: usize) -> HeadParams<f64> {
        HeadParams {
            dim,
            hidden,
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; 2 * hidden],
            b2: [0.0; 2],
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a: HeadParams<f32> = init_head(16, 7).unwrap();
        let b: HeadParams<f32> = init_head(16, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_head::<f32>(16, 8).unwrap());
        assert_eq!(a.w1.len(), 16384);
        let bound = (6.0f32 / 16.0).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() <= bound));
        let bound2 = (6.0f32 / 1024.0).sqrt();
        assert!(a.w2.iter().all(|w| w.abs() <= bound2));
        assert!(a.b1.iter().all(|&b| b == 0.0) && a.b2 == [0.0, 0.0]);
        assert!(init_head::<f32>(0, 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax([0.0, 0.0]);
        assert_eq!((p.p_high, p.p_low), (0.5, 0.5));
        let p = softmax([3f64.ln(), 0.0]);
        assert!((p.p_high - 0.75).abs() < 1e-15 && (p.p_low - 0.25).abs() < 1e-15);
        for z in [1e4, -1e4, 9999.5] {
            let p = softmax([z, -z]);
            assert!((p.p_high + p.p_low - 1.0).abs() < 1e-6);
            assert!(p.p_high.is_finite() && p.p_low.is_finite());
        }
    }

    #[test]
    fn relu_zeroes_negative_pre_activations() {
        let mut head = zero_head(2, 3);
        head.w1 = vec![-1.0, 0.0, 1.0, 0.0, 0.0, -2.0];
        let pass = head.forward_pass(&[1.0f64, 1.0]).unwrap();
        assert_eq!(pass.pre_activation, vec![-1.0, 1.0, -2.0]);
        assert_eq!(pass.hidden, vec![0.0, 1.0, 0.0]);
        assert!(head.forward_pass(&[1.0f64]).is_err());
    }

    #[test]
    fn loss_examples() {
        let half = Prediction {
            p_high: 0.5,
            p_low: 0.5,
        };
        assert!((loss(&half, Class::High) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(format!("{:.6}", loss(&half, Class::Low)), "0.693147");
        assert_eq!(
            loss(
                &Prediction {
                    p_high: 1.0,
                    p_low: 0.0
                },
                Class::High
            ),
            0.0
        );
        let tiny = Prediction {
            p_high: 1e-20,
            p_low: 1.0,
        };
        assert_eq!(loss(&tiny, Class::High), -(1e-12f64).ln());
    }

    #[test]
    fn logit_gradient_is_p_minus_onehot() {
        // with w2 = 0 and a single hidden unit h = 1, dL/dw2[k] = dz[k]
        let mut head = zero_head(1, 1);
        head.b1 = vec![1.0];
        let g = gradients(&head, &[(&[0.0f64][..], Class::High)]).unwrap();
        assert_eq!(g.b2, [-0.5, 0.5]);
        assert_eq!(g.w2, vec![-0.5, 0.5]);
        assert!(gradients::<f64, f64>(&head, &[]).is_err());
    }

    #[test]
    fn saturated_batch_has_vanishing_gradients() {
        let mut head = zero_head(1, 1);
        head.b1 = vec![1.0];
        head.b2 = [60.0, -60.0];
        let g = gradients(&head, &[(&[0.3f64][..], Class::High), (&[-2.0][..], Class::High)]).unwrap();
        assert!(g.l2_norm() <= 1e-6, "{}", g.l2_norm());
    }

    #[test]
    fn sgd_step_examples() {
        let cfg = TrainConfig {
            momentum: 0.0,
            decay: 0.0,
            ..Default::default()
        };
        let mut head = zero_head(1, 1);
        head.w1 = vec![1.0];
        let mut state = OptimizerState::new(&head);
        let g = Gradients {
            w1: vec![2.0],
            b1: vec![0.0],
            w2: vec![0.0; 2],
            b2: [0.0; 2],
        };
        sgd_step(&mut head, &g, &mut state, &cfg);
        assert_eq!(head.w1[0], 1.0 - 0.005 * 2.0);
        assert_eq!(state.t, 1);

        let cfg = TrainConfig {
            momentum: 0.9,
            decay: 0.0,
            ..Default::default()
        };
        let mut head = zero_head(1, 1);
        let mut state = OptimizerState::new(&head);
        let g = Gradients {
            w1: vec![1.0],
            b1: vec![0.0],
            w2: vec![0.0; 2],
            b2: [0.0; 2],
        };
        sgd_step(&mut head, &g, &mut state, &cfg);
        sgd_step(&mut head, &g, &mut state, &cfg);
        assert!((head.w1[0] + 0.0145).abs() < 1e-12);

        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.005);
        assert!((cfg.learning_rate(10_000) - 0.005 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn predict_tie_breaks_low() {
        let head = zero_head(3, 4);
        let head32 = HeadParams::<f32> {
            dim: 3,
            hidden: 4,
            w1: vec![0.0; 12],
            b1: vec![0.0; 4],
            w2: vec![0.0; 8],
            b2: [0.0; 2],
        };
        let e = Embedding::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(predict(&head, &e).unwrap().0, Class::Low);
        assert_eq!(predict(&head32, &e).unwrap().0, Class::Low);
        let mut high = head;
        high.b2 = [(9.0f64).ln(), 0.0];
        let (class, pred) = predict(&high, &e).unwrap();
        assert_eq!(class, Class::High);
        assert!((pred.p_high - 0.9).abs() < 1e-12);
        // a shared additive constant on the logits changes nothing
        let mut shifted = high.clone();
        shifted.b2 = [high.b2[0] + 123.0, 123.0];
        let (c2, p2) = predict(&shifted, &e).unwrap();
        assert_eq!(c2, class);
        assert!((p2.p_high - pred.p_high).abs() < 1e-12);
    }

    fn gaussian_clusters(n_per_class: usize, dim: usize, seed: u64) -> Vec<(Embedding, Class)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut out = Vec::new();
        for i in 0..2 * n_per_class {
            let (class, center) = if i % 2 == 0 {
                (Class::High, 1.0)
            } else {
                (Class::Low, -1.0)
            };
            let values = (0..dim).map(|_| center + noise.sample(&mut rng)).collect();
            out.push((Embedding::new(values), class));
        }
        out
    }

    #[test]
    fn training_batches_and_determinism() {
        let data = gaussian_clusters(5, 4, 1);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 5,
            ..Default::default()
        };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history.len(), 3);
        let bits = |h: &HeadParams<f32>| h.w1.iter().chain(&h.w2).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.head), bits(&b.head));
        assert_eq!(a.to_json(), b.to_json());

        // n = 10 with batch 64: exactly one step per epoch
        let mut head: HeadParams<f32> = init_head(4, 5).unwrap();
        let mut state = OptimizerState::new(&head);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..10).collect();
        for _ in 0..3 {
            order.shuffle(&mut rng);
            let batch: Vec<(&[f32], Class)> = order
                .iter()
                .map(|&i| (data[i].0.values.as_slice(), data[i].1))
                .collect();
            let g = gradients(&head, &batch).unwrap();
            sgd_step(&mut head, &g, &mut state, &cfg);
        }
        assert_eq!(state.t, 3);
        assert_eq!(bits(&head), bits(&a.head));
    }

    #[test]
    fn training_rejects_bad_datasets() {
        let mut data = gaussian_clusters(3, 4, 2);
        data.retain(|(_, c)| *c == Class::High);
        assert!(matches!(
            train(&data, &TrainConfig::default()),
            Err(Error::Insufficient(_))
        ));
        assert!(matches!(
            train(&[], &TrainConfig::default()),
            Err(Error::Insufficient(_))
        ));
        let bad = TrainConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(train(&gaussian_clusters(3, 4, 2), &bad).is_err());
    }

    #[test]
    fn loss_is_non_increasing_on_two_points_without_momentum() {
        let data = vec![
            (Embedding::new(vec![1.0, 0.5, -0.2]), Class::High),
            (Embedding::new(vec![-1.0, -0.3, 0.4]), Class::Low),
        ];
        let cfg = TrainConfig {
            momentum: 0.0,
            epochs: 25,
            seed: 3,
            ..Default::default()
        };
        let trained = train(&data, &cfg).unwrap();
        for w in trained.history.windows(2) {
            assert!(w[1].loss <= w[0].loss, "{:?}", trained.history);
        }
    }

    #[test]
    fn head_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trained = train(
            &gaussian_clusters(8, 5, 3),
            &TrainConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let path = dir.path().join("head.json");
        trained.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "version",
            "embedding_dim",
            "w1",
            "b1",
            "w2",
            "b2",
            "train_config",
            "history",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back = TrainedHead::load(&path).unwrap();
        assert_eq!(back, trained);

        fs::write(&path, text.replace("\"embedding_dim\":5", "\"embedding_dim\":6")).unwrap();
        assert!(matches!(TrainedHead::load(&path), Err(Error::Artifact { .. })));
    }
}
