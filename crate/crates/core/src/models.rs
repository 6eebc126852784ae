//! Regressors over feature rows: closed-form linear and ridge regression and
//! a two-hidden-layer ReLU perceptron trained with dropout, decoupled weight
//! decay and early stopping.

use crate::features::TargetScaler;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RIDGE_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const RIDGE_INNER_FOLDS: usize = 3;
/// Ridge strength used when the unregularized normal matrix is singular.
pub const SINGULAR_FALLBACK_LAMBDA: f64 = 1e-8;
pub const CHECKPOINT_VERSION: &str = "mlp-checkpoint/v1";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("cannot fit on an empty design matrix")]
    Empty,
    #[error("{0}")]
    Domain(String),
    #[error("row {row} has {got} features, expected {expected}")]
    Width { row: usize, expected: usize, got: usize },
    #[error("linear system could not be solved: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn check_design<R: AsRef<[f64]>>(x: &[R], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(ModelError::Empty);
    }
    if x.len() != y.len() {
        return Err(ModelError::Domain(format!(
            "{} rows but {} targets",
            x.len(),
            y.len()
        )));
    }
    let width = x[0].as_ref().len();
    for (row, r) in x.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != width {
            return Err(ModelError::Width {
                row,
                expected: width,
                got: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Domain(format!("row {row} has non-finite values")));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Domain("targets contain non-finite values".into()));
    }
    Ok(width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict<R: AsRef<[f64]>>(&self, x: &[R]) -> Result<Vec<f64>> {
        x.iter()
            .enumerate()
            .map(|(row, r)| {
                let r = r.as_ref();
                if r.len() != self.weights.len() {
                    return Err(ModelError::Width {
                        row,
                        expected: self.weights.len(),
                        got: r.len(),
                    });
                }
                Ok(self.predict_row(r))
            })
            .collect()
    }

    /// Mean squared training error.
    pub fn mse<R: AsRef<[f64]>>(&self, x: &[R], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(r, t)| (self.predict_row(r.as_ref()) - t).powi(2))
            .sum::<f64>()
            / y.len() as f64
    }
}

/// Minimum pivot ratio of a Cholesky factor below which the system is
/// treated as singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-12;

fn cholesky_solve(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let chol = a.cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d * d), hi.max(d * d)));
    if !(hi > 0.0) || lo / hi < PIVOT_RATIO_FLOOR {
        return None;
    }
    Some(chol.solve(&b))
}

/// Fits on the columns that are not identically zero and gives the rest
/// weight 0; those columns cannot change the fit and only make the normal
/// matrix singular.
fn on_active_columns<R: AsRef<[f64]>>(
    x: &[R],
    d: usize,
    fit: impl FnOnce(&[Vec<f64>]) -> Result<LinearModel>,
) -> Option<Result<LinearModel>> {
    let active: Vec<usize> = (0..d).filter(|&j| x.iter().any(|r| r.as_ref()[j] != 0.0)).collect();
    if active.len() == d {
        return None;
    }
    let compact: Vec<Vec<f64>> = x
        .iter()
        .map(|r| active.iter().map(|&j| r.as_ref()[j]).collect())
        .collect();
    Some(fit(&compact).map(|m| {
        let mut weights = vec![0.0; d];
        for (&j, w) in active.iter().zip(m.weights) {
            weights[j] = w;
        }
        LinearModel { weights, bias: m.bias }
    }))
}

/// Least squares with an intercept via the normal equations of `[X 1]`.
/// A singular normal matrix falls back to ridge with λ = 1e−8.
pub fn fit_linear<R: AsRef<[f64]>>(x: &[R], y: &[f64]) -> Result<LinearModel> {
    let d = check_design(x, y)?;
    if let Some(m) = on_active_columns(x, d, |xc| fit_linear(xc, y)) {
        return m;
    }
    let n = x.len();
    let mut a = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut b = DVector::<f64>::zeros(d + 1);
    let mut aug = vec![0.0; d + 1];
    for (r, &t) in x.iter().zip(y) {
        aug[..d].copy_from_slice(r.as_ref());
        aug[d] = 1.0;
        for i in 0..=d {
            if aug[i] == 0.0 {
                continue;
            }
            b[i] += aug[i] * t;
            for j in i..=d {
                a[(i, j)] += aug[i] * aug[j];
            }
        }
    }
    for i in 0..=d {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    match (n > d).then(|| cholesky_solve(a, b)).flatten() {
        Some(sol) => Ok(LinearModel {
            weights: sol.as_slice()[..d].to_vec(),
            bias: sol[d],
        }),
        None => {
            log::warn!(
                "normal matrix is singular ({n} rows, {d} features); using ridge with lambda {SINGULAR_FALLBACK_LAMBDA}"
            );
            ridge_centered(x, y, SINGULAR_FALLBACK_LAMBDA, d)
        }
    }
}

fn ridge_centered<R: AsRef<[f64]>>(x: &[R], y: &[f64], lambda: f64, d: usize) -> Result<LinearModel> {
    let n = x.len() as f64;
    let mut x_mean = vec![0.0; d];
    for r in x {
        x_mean.iter_mut().zip(r.as_ref()).for_each(|(m, v)| *m += v);
    }
    x_mean.iter_mut().for_each(|m| *m /= n);
    let y_mean = y.iter().sum::<f64>() / n;
    let (w, _) = ridge_solve(x, y, lambda, d, Some((&x_mean, y_mean)))?;
    let bias = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(LinearModel { weights: w, bias })
}

/// Solves `(XcᵀXc + λI) w = Xcᵀ yc`, where `Xc`, `yc` are centered by
/// `center` (or left as-is when `None`).
fn ridge_solve<R: AsRef<[f64]>>(
    x: &[R],
    y: &[f64],
    lambda: f64,
    d: usize,
    center: Option<(&[f64], f64)>,
) -> Result<(Vec<f64>, ())> {
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    let mut row = vec![0.0; d];
    for (r, &t) in x.iter().zip(y) {
        let (xm, ym) = center.unwrap_or((&[], 0.0));
        for (j, v) in r.as_ref().iter().enumerate() {
            row[j] = v - xm.get(j).copied().unwrap_or(0.0);
        }
        let t = t - ym;
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            b[i] += row[i] * t;
            for j in i..d {
                a[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        a[(i, i)] += lambda;
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| ModelError::Numerical(format!("ridge system not positive definite (lambda {lambda})")))?;
    Ok((chol.solve(&b).as_slice().to_vec(), ()))
}

/// Minimizes ‖Xw + b − y‖² + λ‖w‖²; the intercept is not penalized.
pub fn fit_ridge<R: AsRef<[f64]>>(x: &[R], y: &[f64], lambda: f64) -> Result<LinearModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(ModelError::Domain(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let d = check_design(x, y)?;
    if lambda == 0.0 {
        return fit_linear(x, y);
    }
    if let Some(m) = on_active_columns(x, d, |xc| fit_ridge(xc, y, lambda)) {
        return m;
    }
    ridge_centered(x, y, lambda, d)
}

/// Ridge without an intercept: `w = (XᵀX + λI)⁻¹ Xᵀy`.
pub fn fit_ridge_through_origin<R: AsRef<[f64]>>(x: &[R], y: &[f64], lambda: f64) -> Result<LinearModel> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(ModelError::Domain(format!(
            "through-origin ridge needs lambda > 0, got {lambda}"
        )));
    }
    let d = check_design(x, y)?;
    let (w, _) = ridge_solve(x, y, lambda, d, None)?;
    Ok(LinearModel { weights: w, bias: 0.0 })
}

/// Picks λ from `grid` by seeded k-fold validation MSE; ties go to the
/// earlier grid entry.
pub fn select_ridge_lambda<R: AsRef<[f64]>>(
    x: &[R],
    y: &[f64],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    check_design(x, y)?;
    if grid.is_empty() {
        return Err(ModelError::Domain("empty lambda grid".into()));
    }
    if folds < 2 || folds > x.len() {
        return Err(ModelError::Domain(format!(
            "cannot run {folds}-fold selection on {} rows",
            x.len()
        )));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; x.len()];
        for (k, &i) in order.iter().enumerate() {
            f[i] = k % folds;
        }
        f
    };
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let mut sse = 0.0;
        for k in 0..folds {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if fold_of[i] == k {
                    vx.push(x[i].as_ref());
                    vy.push(y[i]);
                } else {
                    tx.push(x[i].as_ref());
                    ty.push(y[i]);
                }
            }
            let m = fit_ridge(&tx, &ty, lambda)?;
            sse += m.mse(&vx, &vy) * vy.len() as f64;
        }
        let mse = sse / x.len() as f64;
        if mse < best.0 {
            best = (mse, lambda);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Adam moments with decoupled weight decay (AdamW).
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpHyperParams {
    pub hidden: [usize; 2],
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub optimizer: Optimizer,
    /// Rows per update; `None` is full-batch.
    pub batch_size: Option<usize>,
}

impl Default for MlpHyperParams {
    fn default() -> Self {
        Self {
            hidden: [64, 64],
            dropout: 0.2,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            max_epochs: 250,
            patience: 20,
            min_delta: 1e-6,
            validation_fraction: 0.1,
            optimizer: Optimizer::Adam,
            batch_size: Some(16),
        }
    }
}

/// One dense layer; `weights[i * out + o]` connects input `i` to output `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// `out = W·input + b`, skipping zero inputs.
    fn forward(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.biases);
        for (i, &v) in input.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let w = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            out.iter_mut().zip(w).for_each(|(o, w)| *o += v * w);
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub version: String,
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub hyper: MlpHyperParams,
    pub seed: u64,
    /// Maps network outputs back to target units.
    pub target: TargetScaler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_schema: Option<String>,
    #[serde(default)]
    pub history: TrainingHistory,
}

const IDENTITY_TARGET: TargetScaler = TargetScaler { mean: 0.0, sd: 1.0 };

/// Per-sample activations kept for backpropagation.
struct Trace {
    /// Post-activation (and post-dropout) outputs of each hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit: 0 or 1/keep (1 without dropout).
    masks: Vec<Vec<f64>>,
    output: f64,
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases for `[inputs, h1, h2, 1]`.
    pub fn init(inputs: usize, hyper: MlpHyperParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = vec![inputs, hyper.hidden[0], hyper.hidden[1], 1];
        let layers = sizes
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        Self::from_layers(sizes, layers, hyper, seed)
    }

    /// All-zero weights with the given output bias.
    pub fn zeros(inputs: usize, hyper: MlpHyperParams, output_bias: f64) -> Self {
        let sizes = vec![inputs, hyper.hidden[0], hyper.hidden[1], 1];
        let mut layers: Vec<Dense> = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        layers[2].biases[0] = output_bias;
        Self::from_layers(sizes, layers, hyper, 0)
    }

    fn from_layers(layer_sizes: Vec<usize>, layers: Vec<Dense>, hyper: MlpHyperParams, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION.into(),
            layer_sizes,
            layers,
            hyper,
            seed,
            target: IDENTITY_TARGET,
            feature_schema: None,
            history: TrainingHistory::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn forward_trace(&self, row: &[f64], dropout: Option<(&mut ChaCha8Rng, f64)>) -> Trace {
        let mut hidden = Vec::with_capacity(2);
        let mut masks = Vec::with_capacity(2);
        let mut dropout = dropout;
        let mut input: &[f64] = row;
        let mut buf;
        for layer in &self.layers[..2] {
            buf = vec![0.0; layer.outputs];
            layer.forward(input, &mut buf);
            let mask: Vec<f64> = match dropout.as_mut() {
                Some((rng, p)) if *p > 0.0 => {
                    let keep = 1.0 - *p;
                    (0..layer.outputs)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                }
                _ => vec![1.0; layer.outputs],
            };
            buf.iter_mut()
                .zip(&mask)
                .for_each(|(v, m)| *v = v.max(0.0) * m);
            hidden.push(buf);
            masks.push(mask);
            input = hidden.last().unwrap();
        }
        let mut out = [0.0];
        self.layers[2].forward(input, &mut out);
        Trace {
            hidden,
            masks,
            output: out[0],
        }
    }

    /// Network output (standardized target units), dropout off.
    pub fn forward(&self, row: &[f64]) -> f64 {
        self.forward_trace(row, None).output
    }

    /// Pre-activations of both hidden layers, dropout off.
    pub fn preactivations(&self, row: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut input = row.to_vec();
        for layer in &self.layers[..2] {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&input, &mut z);
            input = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
        out
    }

    /// Predictions in target units.
    pub fn predict<R: AsRef<[f64]>>(&self, x: &[R]) -> Result<Vec<f64>> {
        x.iter()
            .enumerate()
            .map(|(row, r)| {
                let r = r.as_ref();
                if r.len() != self.input_dim() {
                    return Err(ModelError::Width {
                        row,
                        expected: self.input_dim(),
                        got: r.len(),
                    });
                }
                Ok(self.target.inverse(self.forward(r)))
            })
            .collect()
    }

    /// Mean squared error of network outputs against `y` (network units).
    pub fn loss<R: AsRef<[f64]>>(&self, x: &[R], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(r, t)| (self.forward(r.as_ref()) - t).powi(2))
            .sum::<f64>()
            / y.len() as f64
    }

    /// Accumulates d(mean squared error)/d(params) over `rows` into `grads`
    /// (same layout as `layers`); returns the batch loss.
    fn accumulate_gradients<R: AsRef<[f64]>>(
        &self,
        x: &[R],
        y: &[f64],
        rows: &[usize],
        mut dropout: Option<(&mut ChaCha8Rng, f64)>,
        grads: &mut [Dense],
    ) -> f64 {
        let scale = 1.0 / rows.len() as f64;
        let mut loss = 0.0;
        for &i in rows {
            let input = x[i].as_ref();
            let trace = self.forward_trace(
                input,
                dropout.as_mut().map(|(rng, p)| (&mut **rng, *p)),
            );
            let err = trace.output - y[i];
            loss += err * err * scale;
            // Output layer.
            let d_out = 2.0 * err * scale;
            let g2 = &mut grads[2];
            g2.biases[0] += d_out;
            let h2 = &trace.hidden[1];
            for (k, &h) in h2.iter().enumerate() {
                g2.weights[k] += d_out * h;
            }
            // Hidden layer 2: delta through dropout mask and ReLU.
            let l2 = &self.layers[2];
            let delta2: Vec<f64> = (0..h2.len())
                .map(|k| {
                    if h2[k] > 0.0 {
                        d_out * l2.weights[k] * trace.masks[1][k]
                    } else {
                        0.0
                    }
                })
                .collect();
            let h1 = &trace.hidden[0];
            let g1 = &mut grads[1];
            let out1 = g1.outputs;
            for (j, &a) in h1.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let gw = &mut g1.weights[j * out1..(j + 1) * out1];
                gw.iter_mut().zip(&delta2).for_each(|(g, d)| *g += a * d);
            }
            g1.biases.iter_mut().zip(&delta2).for_each(|(g, d)| *g += d);
            // Hidden layer 1.
            let l1 = &self.layers[1];
            let delta1: Vec<f64> = (0..h1.len())
                .map(|j| {
                    if h1[j] > 0.0 {
                        let w = &l1.weights[j * out1..(j + 1) * out1];
                        w.iter().zip(&delta2).map(|(w, d)| w * d).sum::<f64>() * trace.masks[0][j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let g0 = &mut grads[0];
            let out0 = g0.outputs;
            for (i_in, &v) in input.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let gw = &mut g0.weights[i_in * out0..(i_in + 1) * out0];
                gw.iter_mut().zip(&delta1).for_each(|(g, d)| *g += v * d);
            }
            g0.biases.iter_mut().zip(&delta1).for_each(|(g, d)| *g += d);
        }
        loss
    }

    fn zero_grads(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect()
    }

    /// Analytic gradient of the dropout-free MSE, flattened layer by layer
    /// (weights then biases).
    pub fn gradient<R: AsRef<[f64]>>(&self, x: &[R], y: &[f64]) -> Vec<f64> {
        let mut grads = self.zero_grads();
        let rows: Vec<usize> = (0..y.len()).collect();
        self.accumulate_gradients(x, y, &rows, None, &mut grads);
        flatten(&grads)
    }

    pub fn parameters(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_parameter(&mut self, index: usize, value: f64) {
        let mut idx = index;
        for l in &mut self.layers {
            if idx < l.weights.len() {
                l.weights[idx] = value;
                return;
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                l.biases[idx] = value;
                return;
            }
            idx -= l.biases.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn to_checkpoint(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable model")
    }

    pub fn from_checkpoint(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json).map_err(|e| ModelError::Domain(e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(ModelError::Domain(format!("unsupported checkpoint version {}", m.version)));
        }
        Ok(m)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
        .collect()
}

struct AdamState {
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(model: &mut MlpModel, grads: &[Dense], adam: Option<&mut AdamState>) {
    let lr = model.hyper.learning_rate;
    let decay = lr * model.hyper.weight_decay;
    match adam {
        None => {
            for (l, g) in model.layers.iter_mut().zip(grads) {
                for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                    *w -= lr * gw + decay * *w;
                }
                for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                    *b -= lr * gb;
                }
            }
        }
        Some(state) => {
            state.step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(state.step);
            let c2 = 1.0 - ADAM_BETA2.powi(state.step);
            let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p -= lr * update + decay * *p;
            };
            for (((l, g), m), v) in model
                .layers
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
            {
                for i in 0..l.weights.len() {
                    step(&mut l.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i], decay);
                }
                for i in 0..l.biases.len() {
                    step(&mut l.biases[i], g.biases[i], &mut m.biases[i], &mut v.biases[i], 0.0);
                }
            }
        }
    }
}

/// Trains on standardized features. Targets are standardized internally;
/// [`MlpModel::predict`] returns target units.
///
/// A seeded 90/10 split provides the early-stopping set: training stops once
/// validation MSE fails to improve by `min_delta` for `patience` epochs, and
/// the best-validation weights are restored.
pub fn mlp_train<R: AsRef<[f64]>>(
    x: &[R],
    y: &[f64],
    hyper: MlpHyperParams,
    seed: u64,
) -> Result<MlpModel> {
    let d = check_design(x, y)?;
    if x.len() < 10 {
        return Err(ModelError::Domain(format!("MLP training needs >= 10 rows, got {}", x.len())));
    }
    if !(0.0..1.0).contains(&hyper.dropout) {
        return Err(ModelError::Domain(format!("dropout {} outside [0, 1)", hyper.dropout)));
    }
    let scaler = TargetScaler::fit(y).map_err(|e| ModelError::Domain(e.to_string()))?;
    let ys: Vec<f64> = y.iter().map(|&v| scaler.transform(v)).collect();

    let mut model = MlpModel::init(d, hyper, seed);
    model.target = scaler;
    // Separate stream so the split does not depend on the layer sizes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((x.len() as f64 * hyper.validation_fraction).ceil() as usize).clamp(1, x.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_x: Vec<&[f64]> = val_idx.iter().map(|&i| x[i].as_ref()).collect();
    let val_y: Vec<f64> = val_idx.iter().map(|&i| ys[i]).collect();
    let mut train_idx = train_idx.to_vec();

    let mut adam = (hyper.optimizer == Optimizer::Adam).then(|| AdamState {
        m: model.zero_grads(),
        v: model.zero_grads(),
        step: 0,
    });
    let batch = hyper.batch_size.unwrap_or(train_idx.len()).clamp(1, train_idx.len());
    let mut best_layers = model.layers.clone();
    let mut best_val = model.loss(&val_x, &val_y);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = TrainingHistory::default();

    for epoch in 1..=hyper.max_epochs {
        if batch < train_idx.len() {
            train_idx.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in train_idx.chunks(batch) {
            let mut grads = model.zero_grads();
            let loss = model.accumulate_gradients(
                x,
                &ys,
                chunk,
                Some((&mut rng, hyper.dropout)),
                &mut grads,
            );
            if !loss.is_finite() {
                return Err(ModelError::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            apply_update(&mut model, &grads, adam.as_mut());
        }
        let val = model.loss(&val_x, &val_y);
        if !val.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        history.train_loss.push(epoch_loss / train_idx.len() as f64);
        history.validation_loss.push(val);
        if val < best_val - hyper.min_delta {
            best_val = val;
            best_epoch = epoch;
            best_layers.clone_from(&model.layers);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    model.layers = best_layers;
    history.best_epoch = best_epoch;
    history.best_validation_loss = best_val;
    model.history = history;
    Ok(model)
}

/// Largest relative deviation between analytic and central-difference
/// gradients of the dropout-free MSE, over every parameter.
///
/// Relative deviation is `|a − n| / max(|a|, |n|, 1e-7)`: the floor keeps
/// parameters with vanishing gradients (dead units) from dividing by zero.
pub fn gradient_check<R: AsRef<[f64]>>(model: &MlpModel, x: &[R], y: &[f64]) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-7;
    let analytic = model.gradient(x, y);
    let params = model.parameters();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, (&p, &a)) in params.iter().zip(&analytic).enumerate() {
        probe.set_parameter(i, p + H);
        let up = probe.loss(x, y);
        probe.set_parameter(i, p - H);
        let down = probe.loss(x, y);
        probe.set_parameter(i, p);
        let numeric = (up - down) / (2.0 * H);
        let dev = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(dev);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_problem(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = x
            .iter()
            .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 + rng.gen_range(-0.1..0.1))
            .collect();
        (x, y)
    }

    #[test]
    fn exact_line() {
        let m = fit_linear(&[vec![1.0], vec![2.0], vec![3.0]], &[2.0, 4.0, 6.0]).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-9);
        assert!(m.bias.abs() < 1e-9);
    }

    #[test]
    fn constant_target() {
        let m = fit_linear(&[vec![1.0], vec![2.0], vec![3.0]], &[5.0, 5.0, 5.0]).unwrap();
        assert!(m.weights[0].abs() < 1e-9);
        assert!((m.bias - 5.0).abs() < 1e-9);
    }

    #[test]
    fn residuals_orthogonal_to_columns() {
        let (x, y) = random_problem(50, 5, 3);
        let m = fit_linear(&x, &y).unwrap();
        let resid: Vec<f64> = x.iter().zip(&y).map(|(r, t)| t - m.predict_row(r)).collect();
        for j in 0..5 {
            let dot: f64 = x.iter().zip(&resid).map(|(r, e)| r[j] * e).sum();
            assert!(dot.abs() < 1e-8, "column {j}: {dot}");
        }
        assert!(resid.iter().sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn singular_design_falls_back() {
        // Duplicate column makes XᵀX singular.
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| 3.0 * i as f64 + 1.0).collect();
        let m = fit_linear(&x, &y).unwrap();
        assert!((m.weights[0] - m.weights[1]).abs() < 1e-6);
        assert!((m.weights[0] + m.weights[1] - 3.0).abs() < 1e-6);
        assert!(fit_linear::<Vec<f64>>(&[], &[]).is_err());
    }

    #[test]
    fn zero_columns_get_zero_weight() {
        let (x, y) = random_problem(30, 3, 4);
        let padded: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], 0.0, r[1], r[2], 0.0]).collect();
        let a = fit_linear(&x, &y).unwrap();
        let b = fit_linear(&padded, &y).unwrap();
        assert_eq!(b.weights, vec![a.weights[0], 0.0, a.weights[1], a.weights[2], 0.0]);
        let r = fit_ridge(&padded, &y, 1.0).unwrap();
        assert_eq!((r.weights[1], r.weights[4]), (0.0, 0.0));
    }

    #[test]
    fn ridge_zero_equals_linear() {
        let (x, y) = random_problem(40, 4, 11);
        let a = fit_linear(&x, &y).unwrap();
        let b = fit_ridge(&x, &y, 0.0).unwrap();
        assert_eq!(a, b);
        let c = ridge_centered(&x, &y, 0.0, 4).unwrap();
        for (u, v) in a.weights.iter().zip(&c.weights) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!((a.bias - c.bias).abs() < 1e-8);
    }

    #[test]
    fn ridge_hand_values() {
        let x = [vec![1.0], vec![2.0]];
        let y = [1.0, 2.0];
        // Unpenalized intercept: centered Σxy / (Σx² + λ) = 0.5 / 1.5.
        let m = fit_ridge(&x, &y, 1.0).unwrap();
        assert!((m.weights[0] - 1.0 / 3.0).abs() < 1e-9);
        assert!((m.bias - 1.0).abs() < 1e-9);
        // Through the origin: Σxy / (Σx² + λ) = 5 / 6.
        let m = fit_ridge_through_origin(&x, &y, 1.0).unwrap();
        assert!((m.weights[0] - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn ridge_limit_and_domain() {
        let (x, y) = random_problem(30, 3, 5);
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
        assert!(matches!(fit_ridge(&x, &y, -1.0), Err(ModelError::Domain(_))));
    }

    #[test]
    fn lambda_selection_prefers_small_on_clean_data() {
        let (x, y) = random_problem(60, 3, 8);
        let l = select_ridge_lambda(&x, &y, &RIDGE_GRID, RIDGE_INNER_FOLDS, 1).unwrap();
        assert!(l <= 1.0, "{l}");
    }

    #[test]
    fn zero_model_predicts_bias() {
        let m = MlpModel::zeros(3, MlpHyperParams::default(), 2.5);
        let p = m.predict(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap();
        assert_eq!(p, vec![2.5, 2.5]);
        assert!(matches!(m.predict(&[vec![1.0]]), Err(ModelError::Width { .. })));
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let (x, y) = random_problem(30, 4, 2);
        let hyper = MlpHyperParams {
            learning_rate: 0.0,
            max_epochs: 5,
            ..Default::default()
        };
        let m = mlp_train(&x, &y, hyper, 7).unwrap();
        assert_eq!(m.layers, MlpModel::init(4, hyper, 7).layers);
    }

    #[test]
    fn same_seed_same_weights() {
        let (x, y) = random_problem(40, 4, 2);
        let hyper = MlpHyperParams {
            max_epochs: 10,
            ..Default::default()
        };
        let a = mlp_train(&x, &y, hyper, 3).unwrap();
        let b = mlp_train(&x, &y, hyper, 3).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }

    #[test]
    fn learns_linear_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gen = |rng: &mut ChaCha8Rng, n: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.gen_range(-1.7..1.7)).collect()).collect();
            let y = x
                .iter()
                .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.gen_range(-0.02..0.02))
                .collect();
            (x, y)
        };
        let (x, y) = gen(&mut rng, 200);
        let (tx, ty) = gen(&mut rng, 200);
        let m = mlp_train(&x, &y, MlpHyperParams::default(), 1).unwrap();
        let pred = m.predict(&tx).unwrap();
        let r2 = crate::eval::r_squared(&ty, &pred).unwrap();
        assert!(r2 >= 0.95, "held-out R² {r2}");
    }

    #[test]
    fn best_validation_is_restored() {
        let (x, y) = random_problem(50, 3, 9);
        let hyper = MlpHyperParams {
            max_epochs: 60,
            ..Default::default()
        };
        let m = mlp_train(&x, &y, hyper, 4).unwrap();
        let h = &m.history;
        assert!(h.train_loss.iter().all(|l| l.is_finite()));
        for v in &h.validation_loss[..h.best_epoch] {
            assert!(h.best_validation_loss <= *v);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_problem(12, 4, 21);
        let hyper = MlpHyperParams {
            hidden: [6, 5],
            ..Default::default()
        };
        let m = MlpModel::init(4, hyper, 5);
        let dev = gradient_check(&m, &x, &y);
        assert!(dev < 1e-4, "{dev}");
    }

    #[test]
    fn zero_input_bias_gradients_exact() {
        let hyper = MlpHyperParams {
            hidden: [4, 4],
            ..Default::default()
        };
        let mut m = MlpModel::init(3, hyper, 1);
        for l in &mut m.layers {
            l.biases.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * (i as f64 + 1.0));
        }
        let x = vec![vec![0.0; 3]; 5];
        let y = vec![0.0; 5];
        let analytic = m.gradient(&x, &y);
        let mut idx = 0;
        for l in &m.layers {
            idx += l.weights.len();
            for k in 0..l.biases.len() {
                let i = idx + k;
                let p = m.parameters()[i];
                let mut probe = m.clone();
                probe.set_parameter(i, p + 1e-5);
                let up = probe.loss(&x, &y);
                probe.set_parameter(i, p - 1e-5);
                let down = probe.loss(&x, &y);
                let fd = (up - down) / 2e-5;
                assert!((fd - analytic[i]).abs() < 1e-7, "bias {i}: {fd} vs {}", analytic[i]);
            }
            idx += l.biases.len();
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MlpModel::init(3, MlpHyperParams::default(), 9);
        let back = MlpModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(m, back);
    }
}
