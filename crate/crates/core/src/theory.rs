//! Numerical checks of the convergence analysis: gradient dissimilarity,
//! curvature constants, the strong-convexity gradient inequality, and the
//! convex and non-convex convergence bounds on synthetic federations.
//!
//! Step sizes in the bounds are the effective steps that move the central
//! model, `m = eta * n_k / N'`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::ProbeConfig;
use crate::data::{synth_quadratic, SynthFederation};
use crate::error::{Error, Result};
use crate::models::{init_params, loss_and_grad, ModelSpec, ParamSet, Samples, Targets};

/// Gradients below this norm are treated as stationary.
pub const GRAD_TOL: f64 = 1e-10;

/// A central objective `F = sum_k p_k f_k` over clients.
pub trait FederatedObjective {
    fn dim(&self) -> usize;
    fn n_clients(&self) -> usize;
    /// Client weights `p_k`, summing to one. Also the client selection law.
    fn weights(&self) -> Vec<f64>;
    fn client_value(&self, k: usize, w: &[f64]) -> f64;
    fn client_grad(&self, k: usize, w: &[f64]) -> Vec<f64>;

    fn value(&self, w: &[f64]) -> f64 {
        self.weights().iter().enumerate().map(|(k, p)| p * self.client_value(k, w)).sum()
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for (k, p) in self.weights().iter().enumerate() {
            axpy(&mut g, *p, &self.client_grad(k, w));
        }
        g
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `F(w) = 0.5 (w - c)^T A (w - c) + f_star` with symmetric positive definite `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub center: Vec<f64>,
    pub f_star: f64,
    /// Smallest eigenvalue of `A`, known by construction.
    pub mu: f64,
}

impl Quadratic {
    /// `0.5 ||w||^2`.
    pub fn isotropic(dim: usize) -> Self {
        Self { a: DMatrix::identity(dim, dim), center: vec![0.0; dim], f_star: 0.0, mu: 1.0 }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            a: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            center: vec![0.0; n],
            f_star: 0.0,
            mu: d.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// `A = Q diag(d) Q^T` with a random orthogonal `Q` and `d ~ U[lo, hi]`.
    pub fn random(dim: usize, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let d: Vec<f64> = (0..dim).map(|_| rng.gen_range(lo..=hi)).collect();
        let a: DMatrix<f64> = &q * DMatrix::from_diagonal(&DVector::from_column_slice(&d)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let center = gaussian(&mut rng, dim);
        let f_star = rng.gen_range(-1.0..1.0);
        let mu = d.iter().copied().fold(f64::INFINITY, f64::min);
        Self { a, center, f_star, mu }
    }
}

impl FederatedObjective for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn n_clients(&self) -> usize {
        1
    }
    fn weights(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn client_value(&self, _k: usize, w: &[f64]) -> f64 {
        let d: Vec<f64> = w.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        0.5 * dot(&d, &self.client_grad(0, w)) + self.f_star
    }
    fn client_grad(&self, _k: usize, w: &[f64]) -> Vec<f64> {
        let d = DVector::from_iterator(w.len(), w.iter().zip(&self.center).map(|(a, b)| a - b));
        (&self.a * d).iter().copied().collect()
    }
}

/// Clients `f_k(w) = 0.5 ||w - delta u_k||^2` with `sum_k u_k = 0`, so
/// `grad F(w) = w` and `E||grad f_k||^2 = ||w||^2 + delta^2 E||u_k||^2`.
#[derive(Debug, Clone)]
pub struct ShiftedQuadratics {
    pub shifts: Vec<Vec<f64>>,
}

impl ShiftedQuadratics {
    pub fn new(dim: usize, n_clients: usize, delta: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<Vec<f64>> = (0..n_clients).map(|_| gaussian(&mut rng, dim)).collect();
        let mut mean = vec![0.0; dim];
        for v in &u {
            axpy(&mut mean, 1.0 / n_clients as f64, v);
        }
        for v in u.iter_mut() {
            axpy(v, -1.0, &mean);
            v.iter_mut().for_each(|x| *x *= delta);
        }
        Self { shifts: u }
    }
}

impl FederatedObjective for ShiftedQuadratics {
    fn dim(&self) -> usize {
        self.shifts[0].len()
    }
    fn n_clients(&self) -> usize {
        self.shifts.len()
    }
    fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.shifts.len() as f64; self.shifts.len()]
    }
    fn client_value(&self, k: usize, w: &[f64]) -> f64 {
        0.5 * w.iter().zip(&self.shifts[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }
    fn client_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.shifts[k]).map(|(a, b)| a - b).collect()
    }
}

/// Linear-regression clients over their full train splits; parameters are
/// the flattened `(weights, bias)` of a one-output linear model.
#[derive(Debug, Clone)]
pub struct LeastSquaresFederation {
    spec: ModelSpec,
    template: ParamSet,
    clients: Vec<Samples>,
    weights: Vec<f64>,
}

impl LeastSquaresFederation {
    pub fn from_synth(fed: &SynthFederation) -> Result<Self> {
        let clients: Vec<Samples> = fed.shards.iter().map(|s| s.train_samples()).collect();
        let dim = clients.first().ok_or_else(|| Error::EmptyInput("no clients".into()))?.dim();
        let spec = ModelSpec::linear(dim, 1);
        let template = init_params(&spec, 0)?;
        let total: usize = clients.iter().map(Samples::len).sum();
        let weights = clients.iter().map(|c| c.len() as f64 / total as f64).collect();
        Ok(Self { spec, template, clients, weights })
    }

    fn params(&self, w: &[f64]) -> ParamSet {
        self.template.with_flat(w).expect("dimension checked by caller")
    }

    fn design(&self, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let c = &self.clients[k];
        let n = c.len();
        let d = c.dim();
        let x = DMatrix::from_fn(n, d + 1, |i, j| if j < d { c.x[[i, j]] } else { 1.0 });
        let y = match &c.y {
            Targets::Real(t) => DVector::from_iterator(n, t.column(0).iter().copied()),
            Targets::Class(_) => unreachable!("regression federation"),
        };
        (x, y)
    }

    /// Closed-form Hessian `sum_k p_k X_k^T X_k / n_k` of the central loss.
    pub fn hessian(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for k in 0..self.clients.len() {
            let (x, _) = self.design(k);
            h += x.transpose() * &x * (self.weights[k] / self.clients[k].len() as f64);
        }
        h
    }

    /// Minimizer of the central loss.
    pub fn optimum(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut rhs = DVector::zeros(d);
        for k in 0..self.clients.len() {
            let (x, y) = self.design(k);
            rhs += x.transpose() * y * (self.weights[k] / self.clients[k].len() as f64);
        }
        let sol = self
            .hessian()
            .cholesky()
            .ok_or_else(|| Error::Precondition("central Hessian is not positive definite".into()))?
            .solve(&rhs);
        Ok(sol.iter().copied().collect())
    }
}

impl FederatedObjective for LeastSquaresFederation {
    fn dim(&self) -> usize {
        self.template.num_params()
    }
    fn n_clients(&self) -> usize {
        self.clients.len()
    }
    fn weights(&self) -> Vec<f64> {
        self.weights.clone()
    }
    fn client_value(&self, k: usize, w: &[f64]) -> f64 {
        loss_and_grad(&self.spec, &self.params(w), &self.clients[k]).expect("shapes fixed at construction").loss
    }
    fn client_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        loss_and_grad(&self.spec, &self.params(w), &self.clients[k])
            .expect("shapes fixed at construction")
            .grad
            .to_flat()
    }
}

/// Two-well quartic `q(w) = sum_i (w_i^2 - 1)^2 / 4` shared by all clients
/// with client-specific scales: `f_k = a_k q`, `sum_k p_k a_k = 1`.
/// Global minimum 0 at every `w` with entries `+-1`.
#[derive(Debug, Clone)]
pub struct ScaledQuartic {
    pub dim: usize,
    pub scales: Vec<f64>,
}

impl ScaledQuartic {
    /// Scales spread linearly over `[1 - spread, 1 + spread]`.
    pub fn new(dim: usize, n_clients: usize, spread: f64) -> Self {
        let scales = (0..n_clients)
            .map(|k| if n_clients == 1 { 1.0 } else { 1.0 - spread + 2.0 * spread * k as f64 / (n_clients - 1) as f64 })
            .collect();
        Self { dim, scales }
    }

    pub fn q(w: &[f64]) -> f64 {
        w.iter().map(|x| (x * x - 1.0).powi(2) / 4.0).sum()
    }

    /// Smoothness constant of `q` on the box `|w_i| <= bound`.
    pub fn smoothness_on_box(bound: f64) -> f64 {
        (3.0 * bound * bound - 1.0).max(2.0)
    }

    /// `sqrt(E a_k^2)`, the dissimilarity at every non-stationary point.
    pub fn exact_v(&self) -> f64 {
        let n = self.scales.len() as f64;
        (self.scales.iter().map(|a| a * a).sum::<f64>() / n).sqrt()
    }
}

impl FederatedObjective for ScaledQuartic {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_clients(&self) -> usize {
        self.scales.len()
    }
    fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.scales.len() as f64; self.scales.len()]
    }
    fn client_value(&self, k: usize, w: &[f64]) -> f64 {
        self.scales[k] * Self::q(w)
    }
    fn client_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        w.iter().map(|x| self.scales[k] * (x * x * x - x)).collect()
    }
}

/// Multiplies every client loss by `c`.
pub struct Scaled<'a, O: FederatedObjective>(pub &'a O, pub f64);

impl<O: FederatedObjective> FederatedObjective for Scaled<'_, O> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn n_clients(&self) -> usize {
        self.0.n_clients()
    }
    fn weights(&self) -> Vec<f64> {
        self.0.weights()
    }
    fn client_value(&self, k: usize, w: &[f64]) -> f64 {
        self.1 * self.0.client_value(k, w)
    }
    fn client_grad(&self, k: usize, w: &[f64]) -> Vec<f64> {
        self.0.client_grad(k, w).into_iter().map(|g| self.1 * g).collect()
    }
}

/// `V(w)^2 = E_k ||grad f_k(w)||^2 / ||grad F(w)||^2`, or `None` where the
/// central gradient vanishes.
pub fn local_dissimilarity<O: FederatedObjective + ?Sized>(obj: &O, w: &[f64]) -> Option<f64> {
    let g = obj.grad(w);
    let gn = norm_sq(&g);
    if gn.sqrt() <= GRAD_TOL {
        return None;
    }
    let num: f64 = obj.weights().iter().enumerate().map(|(k, p)| p * norm_sq(&obj.client_grad(k, w))).sum();
    Some((num / gn).sqrt())
}

/// Tightest dissimilarity constant over the probe points.
pub fn estimate_v<O: FederatedObjective + ?Sized>(obj: &O, probes: &[Vec<f64>]) -> Result<f64> {
    probes
        .iter()
        .filter_map(|w| local_dissimilarity(obj, w))
        .reduce(f64::max)
        .ok_or_else(|| Error::UndefinedDissimilarity("central gradient vanishes at every probe point".into()))
}

/// `min_w grad F . E[grad f_k] / ||grad F||^2`, clipped to `(0, 1]`, together
/// with whether `||E[grad f_k]|| <= ||grad F||` held at every point.
pub fn estimate_eps<O: FederatedObjective + ?Sized>(obj: &O, points: &[Vec<f64>]) -> Result<(f64, bool)> {
    let p = obj.weights();
    let mut eps = f64::INFINITY;
    let mut norm_ok = true;
    for w in points {
        let g = obj.grad(w);
        let gn = norm_sq(&g);
        if gn.sqrt() <= GRAD_TOL {
            continue;
        }
        let mut mean = vec![0.0; obj.dim()];
        for (k, pk) in p.iter().enumerate() {
            axpy(&mut mean, *pk, &obj.client_grad(k, w));
        }
        norm_ok &= norm_sq(&mean).sqrt() <= gn.sqrt() * (1.0 + 1e-9);
        eps = eps.min(dot(&g, &mean) / gn);
    }
    if !eps.is_finite() {
        return Err(Error::UndefinedDissimilarity("central gradient vanishes at every point".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Precondition(format!("expected local gradient is not a descent direction (eps = {eps})")));
    }
    Ok((eps.min(1.0), norm_ok))
}

fn mat_vec(h: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (h * DVector::from_column_slice(v)).iter().copied().collect()
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
pub fn power_iteration(h: &DMatrix<f64>, seed: u64) -> f64 {
    let n = h.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = gaussian(&mut rng, n);
    let nv = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let hv = mat_vec(h, &v);
        let next = dot(&v, &hv);
        let norm = norm_sq(&hv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = hv.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-15 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Hessian of `F` at `w` by central differences of the gradient.
pub fn numeric_hessian<O: FederatedObjective + ?Sized>(obj: &O, w: &[f64], h: f64) -> DMatrix<f64> {
    let n = obj.dim();
    let mut hess = DMatrix::zeros(n, n);
    let mut wp = w.to_vec();
    for j in 0..n {
        wp[j] = w[j] + h;
        let gp = obj.grad(&wp);
        wp[j] = w[j] - h;
        let gm = obj.grad(&wp);
        wp[j] = w[j];
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// `(mu, L)`: extreme eigenvalues of the numeric Hessian at `w`, found by
/// power iteration (the smallest through the shift `L I - H`).
pub fn estimate_curvature<O: FederatedObjective + ?Sized>(obj: &O, w: &[f64]) -> (f64, f64) {
    let h = numeric_hessian(obj, w, 1e-3);
    let l = power_iteration(&h, 7);
    let shifted = DMatrix::identity(h.nrows(), h.nrows()) * l - &h;
    let mu = l - power_iteration(&shifted, 11);
    (mu, l)
}

/// Constants of one probed objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryProbe {
    /// Strong-convexity constant; `<= 0` when the objective is not strongly convex.
    pub mu: f64,
    pub l: f64,
    pub v_hat: f64,
    pub eps_hat: f64,
    pub f_star: f64,
    pub w_star: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma1Point {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `2 mu (F(w) - F*) <= ||grad F(w)||^2` at every point, up to
/// `1e-9 * max(1, rhs)`.
pub fn check_lemma1<O: FederatedObjective + ?Sized>(
    probe: &TheoryProbe,
    obj: &O,
    points: &[Vec<f64>],
) -> Result<Vec<Lemma1Point>> {
    if !(probe.mu > 0.0) {
        return Err(Error::Precondition("objective is not strongly convex (mu <= 0)".into()));
    }
    Ok(points
        .iter()
        .map(|w| {
            let lhs = 2.0 * probe.mu * (obj.value(w) - probe.f_star);
            let rhs = norm_sq(&obj.grad(w));
            Lemma1Point { lhs, rhs, holds: lhs <= rhs + 1e-9 * rhs.max(1.0) }
        })
        .collect())
}

/// Mean and variance accumulator that can be merged across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n.max(1) as f64).sqrt()
    }
}

/// Central-model iterates of the analyzed update: each step a client drawn
/// from the weight law reports its gradient at the current model and the
/// server moves by `m * grad f_k(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub grad_sq: Vec<f64>,
}

pub fn sample_trajectory<O: FederatedObjective + ?Sized>(
    obj: &O,
    w0: &[f64],
    step: f64,
    iterations: usize,
    seed: u64,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = obj.weights();
    let mut w = w0.to_vec();
    let mut points = Vec::with_capacity(iterations + 1);
    let mut values = Vec::with_capacity(iterations + 1);
    let mut grad_sq = Vec::with_capacity(iterations + 1);
    for t in 0..=iterations {
        points.push(w.clone());
        values.push(obj.value(&w));
        grad_sq.push(norm_sq(&obj.grad(&w)));
        if t == iterations {
            break;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = p.len() - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                k = i;
                break;
            }
        }
        let g = obj.client_grad(k, &w);
        axpy(&mut w, -step, &g);
    }
    Trajectory { points, values, grad_sq }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub t: usize,
    pub observed_mean: f64,
    pub observed_se: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub kind: String,
    pub probe: TheoryProbe,
    pub step: f64,
    pub max_step: f64,
    pub gamma_prime: f64,
    /// Per-step contraction factor of the convex bound; 0 for the non-convex one.
    pub contraction: f64,
    pub binding: bool,
    pub seeds: usize,
    pub rows: Vec<BoundRow>,
    /// Rows whose bound fell below floating-point resolution of the gap.
    pub unresolved_rows: usize,
    pub passed: bool,
}

/// `(1 - 2 mu gamma' eta)^T * gap0` and whether the factor contracts.
pub fn theorem1_bound(mu: f64, gamma_prime: f64, eta: f64, t: usize, gap0: f64) -> (f64, bool) {
    let factor = 1.0 - 2.0 * mu * gamma_prime * eta;
    let binding = gamma_prime > 0.0 && (0.0..1.0).contains(&factor);
    (factor.powi(t as i32) * gap0, binding)
}

fn ensure_trajectories(trajs: &[Trajectory]) -> Result<usize> {
    let first = trajs.first().ok_or_else(|| Error::EmptyInput("no trajectories".into()))?;
    let len = first.values.len();
    if trajs.iter().any(|t| t.values.len() != len || t.grad_sq.len() != len) {
        return Err(Error::ShapeMismatch("trajectories differ in length".into()));
    }
    Ok(len)
}

/// Compares the mean optimality gap of the trajectories against the
/// strongly convex rate. `step` is the (constant) effective server step.
pub fn check_theorem1(trajs: &[Trajectory], probe: &TheoryProbe, step: f64) -> Result<BoundReport> {
    let len = ensure_trajectories(trajs)?;
    if !(probe.mu > 0.0) {
        return Err(Error::Precondition("objective is not strongly convex".into()));
    }
    let max_step = 2.0 * probe.eps_hat / (probe.l * probe.v_hat * probe.v_hat);
    if !(step > 0.0 && step < max_step) {
        return Err(Error::Precondition(format!("step {step} outside (0, {max_step})")));
    }
    let gamma_prime = probe.eps_hat - probe.l * step * probe.v_hat * probe.v_hat / 2.0;
    let gap0 = trajs[0].values[0] - probe.f_star;
    let (_, binding) = theorem1_bound(probe.mu, gamma_prime, step, 1, gap0);
    let mut rows = Vec::with_capacity(len);
    let mut unresolved = 0;
    for t in 0..len {
        let mut s = RunningStats::default();
        for tr in trajs {
            s.push(tr.values[t] - probe.f_star);
        }
        let (bound, _) = theorem1_bound(probe.mu, gamma_prime, step, t, gap0);
        if bound < 1e-12 * gap0.abs() {
            unresolved += 1;
            continue;
        }
        let slack = 2.0 * s.std_error() + 1e-12 * gap0.abs();
        rows.push(BoundRow {
            t,
            observed_mean: s.mean(),
            observed_se: s.std_error(),
            bound,
            holds: s.mean() - slack <= bound,
        });
    }
    let passed = rows.iter().all(|r| r.holds);
    Ok(BoundReport {
        kind: "theorem1".into(),
        probe: probe.clone(),
        step,
        max_step,
        gamma_prime,
        contraction: 1.0 - 2.0 * probe.mu * gamma_prime * step,
        binding,
        seeds: trajs.len(),
        rows,
        unresolved_rows: unresolved,
        passed,
    })
}

/// Compares the accumulated `sum_t (step / 2) E||grad F(w^t)||^2` against
/// `F(w^0) - F_min` at every prefix length.
pub fn check_theorem2(trajs: &[Trajectory], probe: &TheoryProbe, step: f64) -> Result<BoundReport> {
    let len = ensure_trajectories(trajs)?;
    if !(probe.eps_hat > 0.5) {
        return Err(Error::Precondition(format!("eps = {} must exceed 1/2", probe.eps_hat)));
    }
    let max_step = (2.0 * probe.eps_hat - 1.0) / (probe.l * probe.v_hat * probe.v_hat);
    if !(step > 0.0 && step < max_step) {
        return Err(Error::Precondition(format!("step {step} outside (0, {max_step})")));
    }
    let gap0 = trajs[0].values[0] - probe.f_star;
    let mut sums = vec![0.0; trajs.len()];
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let mut s = RunningStats::default();
        for (acc, tr) in sums.iter_mut().zip(trajs) {
            s.push(*acc);
            *acc += step / 2.0 * tr.grad_sq[t];
        }
        let slack = 2.0 * s.std_error() + 1e-12 * gap0.abs().max(1.0);
        rows.push(BoundRow {
            t,
            observed_mean: s.mean(),
            observed_se: s.std_error(),
            bound: gap0,
            holds: s.mean() - slack <= gap0,
        });
    }
    let passed = rows.iter().all(|r| r.holds);
    Ok(BoundReport {
        kind: "theorem2".into(),
        probe: probe.clone(),
        step,
        max_step,
        gamma_prime: probe.eps_hat - probe.l * step * probe.v_hat * probe.v_hat / 2.0,
        contraction: 0.0,
        binding: true,
        seeds: trajs.len(),
        rows,
        unresolved_rows: 0,
        passed,
    })
}

fn random_points(rng: &mut ChaCha8Rng, center: &[f64], scale: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|c| c + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng))
                .collect()
        })
        .collect()
}

/// Constants of `obj` measured over `points`, plus curvature at `w_curv`.
fn measure<O: FederatedObjective + ?Sized>(obj: &O, points: &[Vec<f64>]) -> Result<(f64, f64)> {
    let v = estimate_v(obj, points)?;
    let (eps, _) = estimate_eps(obj, points)?;
    Ok((v, eps))
}

/// Runs `seeds` trajectories with a step set to `fraction` of the largest
/// admissible one, re-measuring the constants on the visited points and
/// shrinking the step until it is admissible for them.
fn admissible_trajectories<O, F>(
    obj: &O,
    w0: &[f64],
    pilot: &[Vec<f64>],
    cfg: &ProbeConfig,
    seed: u64,
    max_step: F,
) -> Result<(Vec<Trajectory>, f64, f64, f64)>
where
    O: FederatedObjective + ?Sized,
    F: Fn(f64, f64) -> f64,
{
    let (mut v, mut eps) = measure(obj, pilot)?;
    let mut step = cfg.step_fraction * max_step(v, eps);
    for _ in 0..20 {
        if !(step > 0.0) {
            break;
        }
        let trajs: Vec<Trajectory> = (0..cfg.seeds as u64)
            .map(|s| sample_trajectory(obj, w0, step, cfg.iterations, seed.wrapping_add(s)))
            .collect();
        let mut visited: Vec<Vec<f64>> = pilot.to_vec();
        for t in &trajs {
            visited.extend(t.points.iter().cloned());
        }
        let (v2, eps2) = measure(obj, &visited)?;
        v = v2;
        eps = eps2;
        if step < max_step(v, eps) {
            return Ok((trajs, step, v, eps));
        }
        step = cfg.step_fraction * max_step(v, eps);
    }
    Err(Error::Precondition("no admissible step size found".into()))
}

/// Convex bound on a synthetic least-squares federation.
pub fn theorem1_report(cfg: &ProbeConfig, seed: u64) -> Result<BoundReport> {
    let fed = synth_quadratic(cfg.dim, cfg.n_clients, cfg.dissimilarity, seed)?;
    let obj = LeastSquaresFederation::from_synth(&fed)?;
    let w_star = obj.optimum()?;
    let f_star = obj.value(&w_star);
    let (mu, l) = estimate_curvature(&obj, &w_star);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7731);
    let w0: Vec<f64> = w_star
        .iter()
        .map(|c| c + 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let pilot = random_points(&mut rng, &w0, 1.0, 32);
    let (trajs, step, v, eps) = admissible_trajectories(&obj, &w0, &pilot, cfg, seed, |v, e| 2.0 * e / (l * v * v))?;
    let probe = TheoryProbe { mu, l, v_hat: v, eps_hat: eps, f_star, w_star };
    check_theorem1(&trajs, &probe, step)
}

/// Radius of the box on which the quartic's smoothness constant is computed.
pub const QUARTIC_BOX: f64 = 2.0;

/// Non-convex bound on the scaled two-well quartic.
pub fn theorem2_report(cfg: &ProbeConfig, seed: u64) -> Result<BoundReport> {
    let obj = ScaledQuartic::new(cfg.dim, cfg.n_clients, 0.5);
    let l = ScaledQuartic::smoothness_on_box(QUARTIC_BOX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4A27);
    let w0: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let pilot: Vec<Vec<f64>> = (0..32).map(|_| (0..cfg.dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let (trajs, step, v, eps) =
        admissible_trajectories(&obj, &w0, &pilot, cfg, seed, |v, e| (2.0 * e - 1.0) / (l * v * v))?;
    if trajs.iter().flat_map(|t| t.points.iter().flatten()).any(|x| x.abs() > QUARTIC_BOX) {
        return Err(Error::Precondition(format!("trajectory left the box |w| <= {QUARTIC_BOX} where L holds")));
    }
    let w_star: Vec<f64> = w0.iter().map(|x| if *x >= 0.0 { 1.0 } else { -1.0 }).collect();
    let probe = TheoryProbe { mu: 0.0, l, v_hat: v, eps_hat: eps, f_star: 0.0, w_star };
    check_theorem2(&trajs, &probe, step)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub objectives: usize,
    pub points: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` seen (1 means equality).
    pub max_ratio: f64,
    pub equality_case_holds: bool,
    pub passed: bool,
}

/// Lemma check on random strongly convex quadratics plus `0.5 ||w||^2`.
pub fn lemma1_report(cfg: &ProbeConfig, seed: u64) -> Result<Lemma1Report> {
    let per = cfg.n_points.div_ceil(cfg.n_objectives);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1E44);
    let mut points = 0;
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for i in 0..cfg.n_objectives {
        let q = Quadratic::random(cfg.dim, 0.5, 5.0, seed.wrapping_add(i as u64));
        let probe =
            TheoryProbe { mu: q.mu, l: 0.0, v_hat: 1.0, eps_hat: 1.0, f_star: q.f_star, w_star: q.center.clone() };
        let mut ws = random_points(&mut rng, &q.center, 3.0, per);
        ws[0] = q.center.clone();
        for r in check_lemma1(&probe, &q, &ws)? {
            points += 1;
            violations += usize::from(!r.holds);
            if r.rhs > 0.0 {
                max_ratio = max_ratio.max(r.lhs / r.rhs);
            }
        }
    }
    let iso = Quadratic::isotropic(1);
    let probe = TheoryProbe { mu: 1.0, l: 1.0, v_hat: 1.0, eps_hat: 1.0, f_star: 0.0, w_star: vec![0.0] };
    let eq = check_lemma1(&probe, &iso, &[vec![2.0]])?[0];
    let equality_case_holds = eq.holds && (eq.lhs - eq.rhs).abs() <= 1e-12;
    Ok(Lemma1Report {
        objectives: cfg.n_objectives,
        points,
        violations,
        max_ratio,
        equality_case_holds,
        passed: violations == 0 && equality_case_holds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DissimilarityReport {
    pub dissimilarity: f64,
    pub n_clients: usize,
    pub probes: usize,
    pub v_hat: f64,
    pub eps_hat: f64,
    /// Whether `||E grad f_k|| <= ||grad F||` held at every probe.
    pub mean_gradient_norm_bounded: bool,
}

/// Dissimilarity constants of a synthetic least-squares federation at
/// random points around its optimum.
pub fn dissimilarity_report(cfg: &ProbeConfig, seed: u64) -> Result<DissimilarityReport> {
    let fed = synth_quadratic(cfg.dim, cfg.n_clients, cfg.dissimilarity, seed)?;
    let obj = LeastSquaresFederation::from_synth(&fed)?;
    let w_star = obj.optimum()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD155);
    let probes = random_points(&mut rng, &w_star, 1.0, cfg.n_points.min(200));
    let v_hat = estimate_v(&obj, &probes)?;
    let (eps_hat, ok) = estimate_eps(&obj, &probes)?;
    Ok(DissimilarityReport {
        dissimilarity: cfg.dissimilarity,
        n_clients: cfg.n_clients,
        probes: probes.len(),
        v_hat,
        eps_hat,
        mean_gradient_norm_bounded: ok,
    })
}
