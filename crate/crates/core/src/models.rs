//! Predictive models with hand-written backpropagation and the dataset-average
//! loss `L(D, w)`.
//!
//! Parameters are flat vectors. Flattening order:
//!
//! * [`LinearModel`]: weight grid row-major (`W[o][i]` at `o * in_dim + i`),
//!   then the `out_dim` biases.
//! * [`MlpModel`]: for each layer in order, its weight grid row-major
//!   (`out_l × in_l`) followed by its biases.

use std::fmt::Debug;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, ensure_same_dim, finite_diff_hvp, Matrix, Rng, Vector, HVP_EPS};
use crate::tasks::{Dataset, QuadraticTask};

/// Pointwise loss applied to the model output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// `‖y - h(x; w)‖²`.
    SquaredError,
    /// Softmax cross-entropy on logits against `(1 - ε)·y + ε/C`.
    CrossEntropy { label_smoothing: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::CrossEntropy { label_smoothing } = *self {
            if !(0.0..1.0).contains(&label_smoothing) {
                return Err(Error::param(format!(
                    "label smoothing must lie in [0, 1), got {label_smoothing}"
                )));
            }
        }
        Ok(())
    }
}

/// Mixes a one-hot target with the uniform distribution over its classes.
pub fn smoothed_targets(one_hot: &Vector, eps: f64) -> Result<Vector> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param(format!("smoothing eps must lie in [0, 1), got {eps}")));
    }
    let ones = one_hot.iter().filter(|&&v| v == 1.0).count();
    let zeros = one_hot.iter().filter(|&&v| v == 0.0).count();
    if one_hot.len() < 2 || ones != 1 || ones + zeros != one_hot.len() {
        return Err(Error::param("smoothed_targets: input is not a one-hot vector"));
    }
    let c = one_hot.len() as f64;
    Ok(one_hot.map(|v| (1.0 - eps) * v + eps / c))
}

/// Loss of a single output and its gradient with respect to that output.
fn head(loss: LossKind, out: &[f64], y: &[f64], dout: &mut [f64]) -> f64 {
    match loss {
        LossKind::SquaredError => {
            let mut l = 0.0;
            for k in 0..out.len() {
                let r = y[k] - out[k];
                l += r * r;
                dout[k] = -2.0 * r;
            }
            l
        }
        LossKind::CrossEntropy { label_smoothing: eps } => {
            let c = out.len() as f64;
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = out.iter().map(|o| (o - max).exp()).sum();
            let lse = max + sum.ln();
            let mut l = lse;
            for k in 0..out.len() {
                let t = (1.0 - eps) * y[k] + eps / c;
                l -= t * out[k];
                dout[k] = (out[k] - lse).exp() - t;
            }
            l
        }
    }
}

/// A differentiable predictor `h(x; w)` over flat parameters.
pub trait Model: Debug + Send + Sync {
    fn param_len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// Random initial parameters.
    fn init(&self, rng: &mut Rng) -> Vector;

    fn predict(&self, w: &[f64], x: &[f64]) -> Vec<f64>;

    /// Pointwise loss; accumulates its parameter gradient into `grad`.
    fn loss_grad_point(&self, w: &[f64], x: &[f64], y: &[f64], loss: LossKind, grad: &mut [f64]) -> f64;

    /// Exact Hessian-vector product of the average loss, when available.
    fn exact_hvp(&self, _loss: LossKind, _data: &Dataset, _w: &Vector, _v: &Vector) -> Option<Vector> {
        None
    }
}

fn check_data(model: &dyn Model, data: &Dataset, w: &Vector) -> Result<()> {
    if data.is_empty() {
        return Err(Error::state("average loss over an empty dataset"));
    }
    ensure_same_dim(w.len(), model.param_len(), "model parameters")?;
    for (x, y) in data.iter() {
        ensure_same_dim(x.len(), model.input_dim(), "model input")?;
        ensure_same_dim(y.len(), model.output_dim(), "model target")?;
    }
    Ok(())
}

/// Mean pointwise loss over the dataset.
pub fn avg_loss(model: &dyn Model, loss: LossKind, data: &Dataset, w: &Vector) -> Result<f64> {
    Ok(avg_loss_and_grad(model, loss, data, w)?.0)
}

/// Gradient of [`avg_loss`].
pub fn avg_loss_grad(model: &dyn Model, loss: LossKind, data: &Dataset, w: &Vector) -> Result<Vector> {
    Ok(avg_loss_and_grad(model, loss, data, w)?.1)
}

pub fn avg_loss_and_grad(model: &dyn Model, loss: LossKind, data: &Dataset, w: &Vector) -> Result<(f64, Vector)> {
    check_data(model, data, w)?;
    let mut grad = vec![0.0; w.len()];
    let mut total = 0.0;
    for (x, y) in data.iter() {
        total += model.loss_grad_point(w.as_slice(), x.as_slice(), y.as_slice(), loss, &mut grad);
    }
    let n = data.len() as f64;
    let grad = Vector::from_vec(grad) / n;
    Ok((total / n, grad))
}

/// Hessian-vector product of the average loss: exact where the model
/// provides it, otherwise central differences of [`avg_loss_grad`].
pub fn loss_hvp(model: &dyn Model, loss: LossKind, data: &Dataset, w: &Vector, v: &Vector) -> Result<Vector> {
    check_data(model, data, w)?;
    ensure_same_dim(v.len(), w.len(), "loss_hvp direction")?;
    if !(v.norm() > 0.0) {
        return Err(Error::param("loss_hvp: zero direction"));
    }
    if let Some(hv) = model.exact_hvp(loss, data, w, v) {
        ensure_finite(&hv, "loss_hvp")?;
        return Ok(hv);
    }
    let g = |p: &Vector| -> Vector {
        avg_loss_grad(model, loss, data, p).unwrap_or_else(|_| Vector::from_element(p.len(), f64::NAN))
    };
    finite_diff_hvp(g, w, v, HVP_EPS)
}

/// Classification accuracy of argmax predictions against argmax targets.
pub fn accuracy(model: &dyn Model, data: &Dataset, w: &Vector) -> Result<f64> {
    check_data(model, data, w)?;
    let hits = data
        .iter()
        .filter(|(x, y)| {
            let out = Vector::from_vec(model.predict(w.as_slice(), x.as_slice()));
            out.argmax().0 == y.argmax().0
        })
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Affine map `h(x) = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearModel {
    pub fn new(in_dim: usize, out_dim: usize) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::param("LinearModel: dimensions must be at least 1"));
        }
        Ok(Self { in_dim, out_dim })
    }

    pub fn flatten(&self, weights: &Matrix, bias: &Vector) -> Result<Vector> {
        if weights.shape() != (self.out_dim, self.in_dim) || bias.len() != self.out_dim {
            return Err(Error::param("LinearModel::flatten: shape mismatch"));
        }
        let mut out = Vec::with_capacity(self.param_len());
        for o in 0..self.out_dim {
            out.extend(weights.row(o).iter());
        }
        out.extend(bias.iter());
        Ok(Vector::from_vec(out))
    }

    pub fn unflatten(&self, w: &Vector) -> Result<(Matrix, Vector)> {
        ensure_same_dim(w.len(), self.param_len(), "LinearModel::unflatten")?;
        let split = self.in_dim * self.out_dim;
        let weights = Matrix::from_row_slice(self.out_dim, self.in_dim, &w.as_slice()[..split]);
        let bias = Vector::from_column_slice(&w.as_slice()[split..]);
        Ok((weights, bias))
    }

    /// Squared-error average loss as an explicit quadratic
    /// `½ wᵀAw + wᵀb + const`; the constant is returned separately.
    pub fn least_squares_quadratic(&self, data: &Dataset) -> Result<(QuadraticTask, f64)> {
        check_data(self, data, &Vector::zeros(self.param_len()))?;
        let p = self.param_len();
        let split = self.in_dim * self.out_dim;
        let n = data.len() as f64;
        let mut a = Matrix::zeros(p, p);
        let mut b = Vector::zeros(p);
        let mut c = 0.0;
        let index = |o: usize, i: usize| if i < self.in_dim { o * self.in_dim + i } else { split + o };
        for (x, y) in data.iter() {
            let xt: Vec<f64> = x.iter().cloned().chain(std::iter::once(1.0)).collect();
            for o in 0..self.out_dim {
                for (i, xi) in xt.iter().enumerate() {
                    for (j, xj) in xt.iter().enumerate() {
                        a[(index(o, i), index(o, j))] += 2.0 * xi * xj / n;
                    }
                    b[index(o, i)] -= 2.0 * y[o] * xi / n;
                }
                c += y[o] * y[o] / n;
            }
        }
        Ok((QuadraticTask::from_matrix(a, b)?, c))
    }
}

impl Model for LinearModel {
    fn param_len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    fn input_dim(&self) -> usize {
        self.in_dim
    }

    fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn init(&self, rng: &mut Rng) -> Vector {
        let scale = (1.0 / self.in_dim as f64).sqrt();
        let split = self.in_dim * self.out_dim;
        Vector::from_fn(self.param_len(), |i, _| if i < split { scale * rng.normal() } else { 0.0 })
    }

    fn predict(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let split = self.in_dim * self.out_dim;
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[split + o]
            })
            .collect()
    }

    fn loss_grad_point(&self, w: &[f64], x: &[f64], y: &[f64], loss: LossKind, grad: &mut [f64]) -> f64 {
        let out = self.predict(w, x);
        let mut dout = vec![0.0; self.out_dim];
        let l = head(loss, &out, y, &mut dout);
        let split = self.in_dim * self.out_dim;
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                grad[o * self.in_dim + i] += dout[o] * x[i];
            }
            grad[split + o] += dout[o];
        }
        l
    }

    fn exact_hvp(&self, loss: LossKind, data: &Dataset, _w: &Vector, v: &Vector) -> Option<Vector> {
        if loss != LossKind::SquaredError {
            return None;
        }
        // H = (2/|D|) Σ x̃x̃ᵀ per output block, x̃ = (x, 1).
        let split = self.in_dim * self.out_dim;
        let n = data.len() as f64;
        let mut out = Vector::zeros(v.len());
        for x in &data.inputs {
            for o in 0..self.out_dim {
                let row = &v.as_slice()[o * self.in_dim..(o + 1) * self.in_dim];
                let s = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + v[split + o];
                for i in 0..self.in_dim {
                    out[o * self.in_dim + i] += 2.0 * s * x[i] / n;
                }
                out[split + o] += 2.0 * s / n;
            }
        }
        Some(out)
    }
}

/// Fully connected network with tanh hidden units and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
}

impl MlpModel {
    /// `widths = [in, h_1, ..., out]`, at least one hidden layer.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 || widths.contains(&0) {
            return Err(Error::param(format!(
                "MlpModel: need [in, hidden.., out] with positive widths, got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    /// The 1-40-40-1 regression network.
    pub fn sinusoid_default() -> Self {
        Self { widths: vec![1, 40, 40, 1] }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out)
        let mut offset = 0;
        self.widths.windows(2).map(move |p| {
            let start = offset;
            offset += p[0] * p[1] + p[1];
            (start, p[0], p[1])
        })
    }

    pub fn unflatten(&self, w: &Vector) -> Result<Vec<(Matrix, Vector)>> {
        ensure_same_dim(w.len(), self.param_len(), "MlpModel::unflatten")?;
        Ok(self
            .layers()
            .map(|(off, fi, fo)| {
                let wm = Matrix::from_row_slice(fo, fi, &w.as_slice()[off..off + fi * fo]);
                let b = Vector::from_column_slice(&w.as_slice()[off + fi * fo..off + fi * fo + fo]);
                (wm, b)
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[(Matrix, Vector)]) -> Result<Vector> {
        let shapes: Vec<_> = self.layers().collect();
        if layers.len() != shapes.len() {
            return Err(Error::param("MlpModel::flatten: layer count mismatch"));
        }
        let mut out = Vec::with_capacity(self.param_len());
        for ((wm, b), (_, fi, fo)) in layers.iter().zip(shapes) {
            if wm.shape() != (fo, fi) || b.len() != fo {
                return Err(Error::param("MlpModel::flatten: shape mismatch"));
            }
            for r in 0..fo {
                out.extend(wm.row(r).iter());
            }
            out.extend(b.iter());
        }
        Ok(Vector::from_vec(out))
    }

    /// Forward pass keeping every layer's activations (input first).
    fn forward_all(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.widths.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for (l, (off, fi, fo)) in self.layers().enumerate() {
            let input = &acts[l];
            let weights = &w[off..off + fi * fo];
            let bias = &w[off + fi * fo..off + fi * fo + fo];
            let mut z: Vec<f64> = (0..fo)
                .map(|r| {
                    let row = &weights[r * fi..(r + 1) * fi];
                    row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias[r]
                })
                .collect();
            if l + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }
}

impl Model for MlpModel {
    fn param_len(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    fn init(&self, rng: &mut Rng) -> Vector {
        let mut w = vec![0.0; self.param_len()];
        for (off, fi, fo) in self.layers() {
            let scale = (1.0 / fi as f64).sqrt();
            for v in &mut w[off..off + fi * fo] {
                *v = scale * rng.normal();
            }
        }
        Vector::from_vec(w)
    }

    fn predict(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward_all(w, x).pop().expect("output layer")
    }

    fn loss_grad_point(&self, w: &[f64], x: &[f64], y: &[f64], loss: LossKind, grad: &mut [f64]) -> f64 {
        let acts = self.forward_all(w, x);
        let out = acts.last().expect("output layer");
        let mut delta = vec![0.0; out.len()];
        let l = head(loss, out, y, &mut delta);
        let layers: Vec<_> = self.layers().collect();
        for (idx, &(off, fi, fo)) in layers.iter().enumerate().rev() {
            let input = &acts[idx];
            for r in 0..fo {
                let d = delta[r];
                let g_row = &mut grad[off + r * fi..off + (r + 1) * fi];
                for (g, a) in g_row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + fi * fo + r] += d;
            }
            if idx > 0 {
                let weights = &w[off..off + fi * fo];
                let mut prev = vec![0.0; fi];
                for r in 0..fo {
                    let d = delta[r];
                    for (p, wv) in prev.iter_mut().zip(&weights[r * fi..(r + 1) * fi]) {
                        *p += wv * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        l
    }
}

const PARAMS_HEADER: &str = "ftml-params v1";

/// Writes `ftml-params v1 <len>` followed by one value per line.
pub fn write_params<W: Write>(w: &Vector, mut out: W) -> Result<()> {
    writeln!(out, "{PARAMS_HEADER} {}", w.len())?;
    for v in w.iter() {
        writeln!(out, "{v:.16e}")?;
    }
    Ok(())
}

pub fn read_params<R: BufRead>(input: R) -> Result<Vector> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::param("parameter file is empty"))??;
    let len: usize = header
        .strip_prefix(PARAMS_HEADER)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::param(format!("unrecognized parameter header {header:?}")))?;
    let mut values = Vec::with_capacity(len);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        values.push(
            line.trim()
                .parse::<f64>()
                .map_err(|e| Error::param(format!("parameter value: {e}")))?,
        );
    }
    if values.len() != len {
        return Err(Error::param(format!("expected {len} parameters, found {}", values.len())));
    }
    Ok(Vector::from_vec(values))
}
