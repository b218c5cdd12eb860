//! Standardization and the two small classifiers: a one-hidden-layer MLP and
//! a linear SVM.
//!
//! Labels are `bool`, `true` being the positive (depressed) class. Score ties
//! at the decision threshold go to the positive class.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Per-column mean and population standard deviation. Zero-variance columns
/// get std 1 so they map to 0.
pub fn fit_standardizer(rows: &[Vec<f64>]) -> Result<Standardizer> {
    if rows.len() < 2 {
        return Err(Error::TooFewRows(rows.len()));
    }
    let d = check_rows(rows)?;
    let n = rows.len() as f64;
    let mut means = Vec::with_capacity(d);
    let mut stds = Vec::with_capacity(d);
    for j in 0..d {
        let first = rows[0][j];
        if rows.iter().all(|r| r[j] == first) {
            means.push(first);
            stds.push(1.0);
            continue;
        }
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    Ok(Standardizer { means, stds })
}

impl Standardizer {
    pub fn dims(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.dims(), x.len())?;
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

pub fn standardize(s: &Standardizer, x: &[f64]) -> Result<Vec<f64>> {
    s.transform(x)
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    for r in rows {
        check_dims(d, r.len())?;
    }
    Ok(d)
}

fn check_training(x: &[Vec<f64>], y: &[bool]) -> Result<usize> {
    check_dims(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::TooFewRows(x.len()));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::SingleClassData);
    }
    check_rows(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Adam step size for the MLP. The SVM uses the 1/(λt) schedule instead.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on weights (MLP) or λ (SVM).
    pub l2: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            l2: 1e-4,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be non-negative");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// MLP

/// One ReLU hidden layer and a logistic output.
///
/// Parameters live in one flat vector: `w1` (hidden x input, row-major),
/// `b1` (hidden), `w2` (hidden), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl MlpModel {
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        hidden_dim * input_dim + 2 * hidden_dim + 1
    }

    /// Uniform(±1/√fan_in) weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &["mlp", "init"]);
        let mut params = vec![0.0; Self::param_count(input_dim, hidden_dim)];
        let a1 = 1.0 / (input_dim.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden_dim as f64).sqrt();
        let (w1, rest) = params.split_at_mut(hidden_dim * input_dim);
        for w in w1 {
            *w = rng.gen_range(-a1..=a1);
        }
        for w in &mut rest[hidden_dim..2 * hidden_dim] {
            *w = rng.gen_range(-a2..=a2);
        }
        Self {
            input_dim,
            hidden_dim,
            params,
            seed,
        }
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.hidden_dim * self.input_dim]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden_dim * self.input_dim;
        &self.params[o..o + self.hidden_dim]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden_dim * (self.input_dim + 1);
        &self.params[o..o + self.hidden_dim]
    }

    fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Range of weight (not bias) parameters, for the L2 penalty.
    fn is_weight(&self, k: usize) -> bool {
        let h = self.hidden_dim;
        let o = h * self.input_dim;
        k < o || (o + h..o + 2 * h).contains(&k)
    }

    /// Hidden activations and output logit.
    fn forward(&self, x: &[f64], hidden: &mut [f64]) -> f64 {
        let d = self.input_dim;
        let w1 = self.w1();
        for (k, (h, b)) in hidden.iter_mut().zip(self.b1()).enumerate() {
            let z = b + dot(&w1[k * d..(k + 1) * d], x);
            *h = z.max(0.0);
        }
        self.b2() + dot(self.w2(), hidden)
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dims(self.input_dim, x.len())?;
        let mut hidden = vec![0.0; self.hidden_dim];
        Ok(self.forward(x, &mut hidden))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let score = sigmoid(self.logit(x)?);
        Ok(Prediction {
            score,
            label: score >= 0.5,
        })
    }

    /// Mean binary cross-entropy plus `l2/2 · ‖weights‖²`, and its gradient
    /// with respect to every parameter.
    pub fn loss_and_grad(&self, x: &[&[f64]], y: &[bool], l2: f64) -> (f64, Vec<f64>) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut grad = vec![0.0; self.params.len()];
        let mut hidden = vec![0.0; h];
        let mut loss = 0.0;
        let o_b1 = h * d;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h;
        let w2 = self.w2().to_vec();
        for (xi, &yi) in x.iter().zip(y) {
            let s = self.forward(xi, &mut hidden);
            let t = if yi { 1.0 } else { 0.0 };
            loss += softplus(s) - t * s;
            let ds = sigmoid(s) - t;
            grad[o_b2] += ds;
            for k in 0..h {
                grad[o_w2 + k] += ds * hidden[k];
                if hidden[k] > 0.0 {
                    let dz = ds * w2[k];
                    grad[o_b1 + k] += dz;
                    for (g, v) in grad[k * d..(k + 1) * d].iter_mut().zip(xi.iter()) {
                        *g += dz * v;
                    }
                }
            }
        }
        let n = x.len() as f64;
        loss /= n;
        for g in &mut grad {
            *g /= n;
        }
        if l2 > 0.0 {
            for (k, (g, p)) in grad.iter_mut().zip(&self.params).enumerate() {
                if self.is_weight(k) {
                    *g += l2 * p;
                    loss += 0.5 * l2 * p * p;
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, x: &[&[f64]], y: &[bool], l2: f64) -> f64 {
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut loss = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let s = self.forward(xi, &mut hidden);
            loss += softplus(s) - if yi { s } else { 0.0 };
        }
        loss /= x.len() as f64;
        let penalty: f64 = self
            .params
            .iter()
            .enumerate()
            .filter(|(k, _)| self.is_weight(*k))
            .map(|(_, p)| p * p)
            .sum();
        loss + 0.5 * l2 * penalty
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^s) without overflow.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// Largest relative disagreement between analytic and central-difference
/// gradients (step 1e-5) over all parameters.
pub fn mlp_gradient_check(model: &MlpModel, x: &[&[f64]], y: &[bool], l2: f64) -> f64 {
    const STEP: f64 = 1e-5;
    let (_, analytic) = model.loss_and_grad(x, y, l2);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in 0..model.params.len() {
        let p = model.params[k];
        probe.params[k] = p + STEP;
        let up = probe.loss(x, y, l2);
        probe.params[k] = p - STEP;
        let down = probe.loss(x, y, l2);
        probe.params[k] = p;
        let numeric = (up - down) / (2.0 * STEP);
        let ga = analytic[k];
        let err = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn train_mlp(x: &[Vec<f64>], y: &[bool], cfg: &TrainConfig) -> Result<MlpModel> {
    let d = check_training(x, y)?;
    let init = MlpModel::init(d, cfg.hidden_dim, cfg.seed);
    train_mlp_from(init, x, y, cfg).map(|(m, _)| m)
}

/// Trains from a given starting model. Returns the model and the mean
/// training loss before the first epoch and after each epoch.
///
/// Mini-batches come from a seeded shuffle each epoch; steps use Adam.
pub fn train_mlp_from(
    mut model: MlpModel,
    x: &[Vec<f64>],
    y: &[bool],
    cfg: &TrainConfig,
) -> Result<(MlpModel, Vec<f64>)> {
    cfg.validate()?;
    let d = check_training(x, y)?;
    check_dims(model.input_dim, d)?;
    let mut rng = rng::stream(cfg.seed, &["mlp", "shuffle"]);
    let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let mut order: Vec<usize> = (0..x.len()).collect();
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut step = 0i32;
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(model.loss(&rows, y, cfg.l2));
    let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    let mut by = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            bx.extend(chunk.iter().map(|&i| rows[i]));
            by.extend(chunk.iter().map(|&i| y[i]));
            let (_, g) = model.loss_and_grad(&bx, &by, cfg.l2);
            step += 1;
            let c1 = 1.0 - ADAM_B1.powi(step);
            let c2 = 1.0 - ADAM_B2.powi(step);
            for k in 0..g.len() {
                m[k] = ADAM_B1 * m[k] + (1.0 - ADAM_B1) * g[k];
                v[k] = ADAM_B2 * v[k] + (1.0 - ADAM_B2) * g[k] * g[k];
                model.params[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
        }
        curve.push(model.loss(&rows, y, cfg.l2));
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteValue(
            model.params.iter().position(|p| !p.is_finite()).unwrap(),
        ));
    }
    model.seed = cfg.seed;
    Ok((model, curve))
}

// ---------------------------------------------------------------------------
// SVM

/// Linear SVM, decision `w·x + b ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl SvmModel {
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        check_dims(self.w.len(), x.len())?;
        Ok(dot(&self.w, x) + self.b)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let score = self.score(x)?;
        Ok(Prediction {
            score,
            label: score >= 0.0,
        })
    }
}

/// Pegasos: mini-batch hinge subgradient with step 1/(λt). The bias is the
/// weight of a constant 1 feature and is regularised with the rest.
pub fn train_svm(x: &[Vec<f64>], y: &[bool], cfg: &TrainConfig) -> Result<SvmModel> {
    cfg.validate()?;
    let d = check_training(x, y)?;
    let lambda = cfg.l2;
    if lambda <= 0.0 {
        return Err(Error::InvalidConfig("SVM needs l2 > 0".into()));
    }
    let signs: Vec<f64> = y.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect();
    let mut rng = rng::stream(cfg.seed, &["svm", "shuffle"]);
    let mut order: Vec<usize> = (0..x.len()).collect();
    // w[d] is the bias
    let mut w = vec![0.0; d + 1];
    let mut acc = vec![0.0; d + 1];
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &i in chunk {
                let margin = signs[i] * (dot(&w[..d], &x[i]) + w[d]);
                if margin < 1.0 {
                    for (a, v) in acc[..d].iter_mut().zip(&x[i]) {
                        *a += signs[i] * v;
                    }
                    acc[d] += signs[i];
                }
            }
            let shrink = 1.0 - eta * lambda;
            let scale = eta / chunk.len() as f64;
            for (wk, a) in w.iter_mut().zip(&acc) {
                *wk = shrink * *wk + scale * a;
            }
        }
    }
    let b = w.pop().unwrap();
    Ok(SvmModel {
        w,
        b,
        lambda,
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// common surface

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Svm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Svm => "svm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "svm" => Ok(ModelKind::Svm),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpModel),
    Svm(SvmModel),
}

impl Model {
    pub fn train(kind: ModelKind, x: &[Vec<f64>], y: &[bool], cfg: &TrainConfig) -> Result<Self> {
        Ok(match kind {
            ModelKind::Mlp => Model::Mlp(train_mlp(x, y, cfg)?),
            ModelKind::Svm => Model::Svm(train_svm(x, y, cfg)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mlp(_) => ModelKind::Mlp,
            Model::Svm(_) => ModelKind::Svm,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        match self {
            Model::Mlp(m) => m.predict(x),
            Model::Svm(m) => m.predict(x),
        }
    }

    /// JSON header with the parameters as a base64 little-endian f32 blob.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<String> {
        let (input_dim, hidden_dim, params, seed): (usize, Option<usize>, Vec<f64>, u64) =
            match self {
                Model::Mlp(m) => (m.input_dim, Some(m.hidden_dim), m.params.clone(), m.seed),
                Model::Svm(m) => {
                    let mut p = m.w.clone();
                    p.push(m.b);
                    (m.w.len(), None, p, m.seed)
                }
            };
        let blob: Vec<u8> = params
            .iter()
            .flat_map(|p| (*p as f32).to_le_bytes())
            .collect();
        let ck = Checkpoint {
            version: 1,
            kind: self.kind(),
            input_dim,
            hidden_dim,
            hyperparameters: cfg.clone(),
            seed,
            params: B64.encode(blob),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, TrainConfig)> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        let blob = B64
            .decode(ck.params.as_bytes())
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        if blob.len() % 4 != 0 {
            return Err(Error::BadCheckpoint("parameter blob is not f32-aligned".into()));
        }
        let params: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let model = match ck.kind {
            ModelKind::Mlp => {
                let h = ck
                    .hidden_dim
                    .ok_or_else(|| Error::BadCheckpoint("mlp checkpoint lacks hidden_dim".into()))?;
                let want = MlpModel::param_count(ck.input_dim, h);
                if params.len() != want {
                    return Err(Error::BadCheckpoint(format!(
                        "expected {want} parameters, found {}",
                        params.len()
                    )));
                }
                Model::Mlp(MlpModel {
                    input_dim: ck.input_dim,
                    hidden_dim: h,
                    params,
                    seed: ck.seed,
                })
            }
            ModelKind::Svm => {
                if params.len() != ck.input_dim + 1 {
                    return Err(Error::BadCheckpoint(format!(
                        "expected {} parameters, found {}",
                        ck.input_dim + 1,
                        params.len()
                    )));
                }
                let mut w = params;
                let b = w.pop().unwrap();
                Model::Svm(SvmModel {
                    w,
                    b,
                    lambda: ck.hyperparameters.l2,
                    seed: ck.seed,
                })
            }
        };
        Ok((model, ck.hyperparameters))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    #[serde(rename = "type")]
    kind: ModelKind,
    input_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden_dim: Option<usize>,
    hyperparameters: TrainConfig,
    seed: u64,
    params: String,
}
