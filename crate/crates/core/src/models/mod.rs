//! Numeric layer: parameter containers, the three model families, and their
//! analytic loss gradients.

mod params;

pub mod gradcheck;

pub use params::{axpy, ParamSet};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    LinearRegression,
    LogisticClassification,
    Mlp1Hidden,
}

impl ModelFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" | "linear_regression" | "linear-regression" => Some(Self::LinearRegression),
            "logistic" | "logistic_classification" | "logistic-classification" => Some(Self::LogisticClassification),
            "mlp" | "mlp_1hidden" | "mlp-1hidden" => Some(Self::Mlp1Hidden),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearRegression => "linear",
            Self::LogisticClassification => "logistic",
            Self::Mlp1Hidden => "mlp",
        }
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, Self::LinearRegression)
    }
}

/// Architecture description. The MLP is a classifier with a `tanh` hidden
/// layer; the linear model regresses `output_dim` real targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self { family: ModelFamily::LinearRegression, input_dim, output_dim, hidden_dim: 0 }
    }

    pub fn logistic(input_dim: usize, n_classes: usize) -> Self {
        Self { family: ModelFamily::LogisticClassification, input_dim, output_dim: n_classes, hidden_dim: 0 }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self { family: ModelFamily::Mlp1Hidden, input_dim, output_dim: n_classes, hidden_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidDimension(format!(
                "input_dim={} output_dim={} must be >= 1",
                self.input_dim, self.output_dim
            )));
        }
        if self.family == ModelFamily::Mlp1Hidden && self.hidden_dim == 0 {
            return Err(Error::InvalidDimension("mlp hidden_dim must be >= 1".into()));
        }
        if self.family.is_classifier() && self.output_dim < 2 {
            return Err(Error::InvalidDimension(format!(
                "classifier needs at least 2 classes, got {}",
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Layer shapes in storage order. Weight matrices are `fan_in x fan_out`
    /// so the first layer has one row per input feature.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.family {
            ModelFamily::LinearRegression | ModelFamily::LogisticClassification => {
                vec![(self.input_dim, self.output_dim), (1, self.output_dim)]
            }
            ModelFamily::Mlp1Hidden => vec![
                (self.input_dim, self.hidden_dim),
                (1, self.hidden_dim),
                (self.hidden_dim, self.output_dim),
                (1, self.output_dim),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `n x output_dim` real targets.
    Real(Array2<f64>),
    /// Class labels in `0..n_classes`.
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.nrows(),
            Targets::Class(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feature rows with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Array2<f64>,
    pub y: Targets,
}

impl Samples {
    pub fn new(x: Array2<f64>, y: Targets) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Consistency(format!("{} feature rows vs {} targets", x.nrows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn gather(&self, idx: &[usize]) -> Samples {
        let x = self.x.select(Axis(0), idx);
        let y = match &self.y {
            Targets::Real(t) => Targets::Real(t.select(Axis(0), idx)),
            Targets::Class(t) => Targets::Class(idx.iter().map(|&i| t[i]).collect()),
        };
        Samples { x, y }
    }

    /// Concatenates sample sets with identical feature and target layouts.
    pub fn concat(parts: &[Samples]) -> Result<Samples> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("nothing to concatenate".into()))?;
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.x.view()).collect();
        let x =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(format!("feature concat: {e}")))?;
        let y = match &first.y {
            Targets::Real(_) => {
                let mut tv = Vec::with_capacity(parts.len());
                for p in parts {
                    match &p.y {
                        Targets::Real(t) => tv.push(t.view()),
                        Targets::Class(_) => return Err(Error::Consistency("mixed target kinds".into())),
                    }
                }
                Targets::Real(
                    ndarray::concatenate(Axis(0), &tv)
                        .map_err(|e| Error::ShapeMismatch(format!("target concat: {e}")))?,
                )
            }
            Targets::Class(_) => {
                let mut all = Vec::with_capacity(x.nrows());
                for p in parts {
                    match &p.y {
                        Targets::Class(t) => all.extend_from_slice(t),
                        Targets::Real(_) => return Err(Error::Consistency("mixed target kinds".into())),
                    }
                }
                Targets::Class(all)
            }
        };
        Samples::new(x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub grad: ParamSet,
    pub loss: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Real(Array2<f64>),
    Class(Vec<usize>),
}

/// Glorot-uniform initialization: every layer drawn from `U(-s, s)` with
/// `s = sqrt(6 / (rows + cols))`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_shapes()
        .into_iter()
        .map(|(r, c)| {
            let s = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-s..s))
        })
        .collect();
    ParamSet::new(layers, 0)
}

fn check_inputs(spec: &ModelSpec, params: &ParamSet, batch: &Samples) -> Result<()> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_and_grad needs a non-empty batch".into()));
    }
    if batch.dim() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} features, model expects {}",
            batch.dim(),
            spec.input_dim
        )));
    }
    if params.shape_signature() != spec.layer_shapes() {
        return Err(Error::ShapeMismatch(format!(
            "params {:?} vs spec {:?}",
            params.shape_signature(),
            spec.layer_shapes()
        )));
    }
    match (&batch.y, spec.family.is_classifier()) {
        (Targets::Real(y), false) if y.ncols() == spec.output_dim => Ok(()),
        (Targets::Class(y), true) => match y.iter().find(|&&c| c >= spec.output_dim) {
            Some(c) => Err(Error::ShapeMismatch(format!("label {c} out of range for {} classes", spec.output_dim))),
            None => Ok(()),
        },
        _ => Err(Error::ShapeMismatch("target layout does not match model family".into())),
    }
}

/// Row-wise softmax in place with max subtraction. Returns the per-row
/// log-sum-exp so callers can form log-probabilities.
fn softmax_rows(z: &mut Array2<f64>) -> Vec<f64> {
    let mut lse = Vec::with_capacity(z.nrows());
    for mut row in z.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
        lse.push(m + sum.ln());
    }
    lse
}

/// Mean cross-entropy of `logits` against `labels`; leaves `dlogits = (P - Y) / n`
/// in place of the logits.
fn cross_entropy(mut logits: Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    // ln(sum_j e^{z_j - z_c}) with the dominant term pulled out so confident
    // predictions keep their tiny losses
    let mut loss = 0.0;
    for (row, &c) in logits.rows().into_iter().zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let zc = row[c];
        let mut rest = 0.0;
        let mut skipped = false;
        for &v in row.iter() {
            if !skipped && v == m {
                skipped = true;
                continue;
            }
            rest += (v - m).exp();
        }
        loss += (m - zc) + rest.ln_1p();
    }
    softmax_rows(&mut logits);
    for (i, &c) in labels.iter().enumerate() {
        logits[[i, c]] -= 1.0;
    }
    logits.mapv_inplace(|v| v / n);
    ((loss / n).max(0.0), logits)
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut z = x.dot(w);
    z += &b.row(0);
    z
}

/// Mean loss over the batch and its exact gradient. Regression uses
/// `0.5 * ||pred - y||^2` per sample, classification uses softmax
/// cross-entropy.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamSet, batch: &Samples) -> Result<GradResult> {
    check_inputs(spec, params, batch)?;
    let n = batch.len();
    let x = batch.x.view();
    let l = params.layers();
    let (grad_layers, loss) = match (&spec.family, &batch.y) {
        (ModelFamily::LinearRegression, Targets::Real(y)) => {
            let mut r = affine(&x, &l[0], &l[1]);
            r -= y;
            let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>() / n as f64;
            r.mapv_inplace(|v| v / n as f64);
            let gw = x.t().dot(&r);
            let gb = r.sum_axis(Axis(0)).insert_axis(Axis(0));
            (vec![gw, gb], loss)
        }
        (ModelFamily::LogisticClassification, Targets::Class(y)) => {
            let z = affine(&x, &l[0], &l[1]);
            let (loss, dz) = cross_entropy(z, y);
            let gw = x.t().dot(&dz);
            let gb = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            (vec![gw, gb], loss)
        }
        (ModelFamily::Mlp1Hidden, Targets::Class(y)) => {
            let mut h = affine(&x, &l[0], &l[1]);
            h.mapv_inplace(f64::tanh);
            let z = affine(&h.view(), &l[2], &l[3]);
            let (loss, dz) = cross_entropy(z, y);
            let gw2 = h.t().dot(&dz);
            let gb2 = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut dh = dz.dot(&l[2].t());
            ndarray::Zip::from(&mut dh).and(&h).for_each(|d, &hv| *d *= 1.0 - hv * hv);
            let gw1 = x.t().dot(&dh);
            let gb1 = dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            (vec![gw1, gb1, gw2, gb2], loss)
        }
        _ => unreachable!("target layout checked"),
    };
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, detail: "non-finite loss".into() });
    }
    Ok(GradResult { grad: ParamSet::new(grad_layers, params.first_layer_index())?, loss, n_samples: n })
}

/// Mean loss only; same definition as [`loss_and_grad`].
pub fn loss(spec: &ModelSpec, params: &ParamSet, batch: &Samples) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    let x = batch.x.view();
    let l = params.layers();
    let n = batch.len() as f64;
    Ok(match (&spec.family, &batch.y) {
        (ModelFamily::LinearRegression, Targets::Real(y)) => {
            let mut r = affine(&x, &l[0], &l[1]);
            r -= y;
            0.5 * r.iter().map(|v| v * v).sum::<f64>() / n
        }
        (_, Targets::Class(y)) => {
            let z = logits(spec, params, &x);
            cross_entropy(z, y).0
        }
        _ => unreachable!("target layout checked"),
    })
}

fn logits(spec: &ModelSpec, params: &ParamSet, x: &ArrayView2<f64>) -> Array2<f64> {
    let l = params.layers();
    match spec.family {
        ModelFamily::LinearRegression | ModelFamily::LogisticClassification => affine(x, &l[0], &l[1]),
        ModelFamily::Mlp1Hidden => {
            let mut h = affine(x, &l[0], &l[1]);
            h.mapv_inplace(f64::tanh);
            affine(&h.view(), &l[2], &l[3])
        }
    }
}

/// Point predictions: real outputs for regression, argmax class otherwise.
/// Large inputs are processed in chunks to bound temporary memory.
pub fn predict(spec: &ModelSpec, params: &ParamSet, x: &Array2<f64>) -> Result<Predictions> {
    spec.validate()?;
    if x.ncols() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!("{} features, model expects {}", x.ncols(), spec.input_dim)));
    }
    const CHUNK: usize = 4096;
    let n = x.nrows();
    if spec.family.is_classifier() {
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let view = x.slice(s![start..(start + CHUNK).min(n), ..]);
            let z = logits(spec, params, &view);
            out.extend(z.rows().into_iter().map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            }));
        }
        Ok(Predictions::Class(out))
    } else {
        Ok(Predictions::Real(logits(spec, params, &x.view())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = ModelSpec::linear(3, 1);
        assert_eq!(init_params(&spec, 7).unwrap(), init_params(&spec, 7).unwrap());
    }

    #[test]
    fn init_differs_across_seeds() {
        let spec = ModelSpec::logistic(2, 2);
        assert_ne!(init_params(&spec, 1).unwrap(), init_params(&spec, 2).unwrap());
    }

    #[test]
    fn init_rejects_zero_hidden() {
        let spec = ModelSpec::mlp(4, 0, 3);
        assert!(matches!(init_params(&spec, 0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let spec = ModelSpec::mlp(20, 8, 4);
        let p = init_params(&spec, 3).unwrap();
        for l in p.layers() {
            let (r, c) = l.dim();
            let s = (6.0 / (r + c) as f64).sqrt();
            assert!(l.iter().all(|v| v.abs() < s));
        }
    }

    #[test]
    fn zero_residual_gives_zero_loss_and_grad() {
        let spec = ModelSpec::linear(2, 1);
        let p = ParamSet::new(vec![Array2::zeros((2, 1)), Array2::zeros((1, 1))], 0).unwrap();
        let batch = Samples::new(array![[1.0, 2.0], [-3.0, 0.5]], Targets::Real(Array2::zeros((2, 1)))).unwrap();
        let g = loss_and_grad(&spec, &p, &batch).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.grad.norm_sq(), 0.0);
        assert_eq!(g.n_samples, 2);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let spec = ModelSpec::linear(2, 1);
        let p = init_params(&spec, 0).unwrap();
        let batch = Samples::new(Array2::zeros((0, 2)), Targets::Real(Array2::zeros((0, 1)))).unwrap();
        assert!(matches!(loss_and_grad(&spec, &p, &batch), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let spec = ModelSpec::logistic(3, 2);
        let p = init_params(&spec, 0).unwrap();
        let batch = Samples::new(array![[1.0, 2.0]], Targets::Class(vec![1])).unwrap();
        assert!(matches!(loss_and_grad(&spec, &p, &batch), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let spec = ModelSpec::logistic(2, 2);
        let p = init_params(&spec, 0).unwrap();
        let batch = Samples::new(array![[1.0, 2.0]], Targets::Class(vec![2])).unwrap();
        assert!(loss_and_grad(&spec, &p, &batch).is_err());
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_cross_entropy() {
        let spec = ModelSpec::logistic(1, 2);
        let batch = Samples::new(array![[1.0]], Targets::Class(vec![1])).unwrap();
        let mut prev = f64::INFINITY;
        for scale in [1.0, 5.0, 20.0, 50.0] {
            let p = ParamSet::new(vec![array![[-scale, scale]], array![[0.0, 0.0]]], 0).unwrap();
            let l = loss(&spec, &p, &batch).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-40);
    }

    #[test]
    fn loss_and_grad_is_pure() {
        let spec = ModelSpec::mlp(5, 4, 3);
        let p = init_params(&spec, 11).unwrap();
        let x = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64).sin());
        let batch = Samples::new(x, Targets::Class(vec![0, 1, 2, 0, 1, 2])).unwrap();
        let a = loss_and_grad(&spec, &p, &batch).unwrap();
        let b = loss_and_grad(&spec, &p, &batch).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn loss_matches_loss_and_grad() {
        let spec = ModelSpec::mlp(3, 2, 2);
        let p = init_params(&spec, 4).unwrap();
        let batch = Samples::new(array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]], Targets::Class(vec![1, 0])).unwrap();
        assert_eq!(loss(&spec, &p, &batch).unwrap(), loss_and_grad(&spec, &p, &batch).unwrap().loss);
    }

    #[test]
    fn predict_argmax() {
        let spec = ModelSpec::logistic(1, 3);
        let p = ParamSet::new(vec![array![[1.0, 0.0, -1.0]], array![[0.0, 0.5, 0.0]]], 0).unwrap();
        let pr = predict(&spec, &p, &array![[2.0], [0.0], [-2.0]]).unwrap();
        assert_eq!(pr, Predictions::Class(vec![0, 1, 2]));
    }
}
