//! Server-side aggregation: asynchronous sample-weighted deltas, first-layer
//! feature re-weighting, synchronous FedAvg averaging, and the FedAsync
//! staleness-weighted mixing baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::Algorithm;
use crate::error::{Error, Result};
use crate::models::ParamSet;

/// Axis along which the re-weighting softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightAxis {
    /// Each row sums to one across its columns.
    Rows,
    /// Each column sums to one across its rows.
    Columns,
}

/// What the asynchronous update subtracts the client's new model from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaReference {
    /// The exact model dispatched to that client.
    Dispatched,
    /// Whatever the central model is when the update arrives.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub feature_reweight: bool,
    pub reweight_axis: ReweightAxis,
    pub delta_reference: DeltaReference,
    pub fedasync_alpha: f64,
    pub fedasync_a: f64,
    /// Fraction `C` of clients sampled per synchronous round.
    pub fedavg_fraction: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            feature_reweight: true,
            reweight_axis: ReweightAxis::Rows,
            delta_reference: DeltaReference::Dispatched,
            fedasync_alpha: 0.6,
            fedasync_a: 0.5,
            fedavg_fraction: 0.2,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fedavg_fraction > 0.0 && self.fedavg_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("fedavg fraction {} must be in (0, 1]", self.fedavg_fraction)));
        }
        if !(self.fedasync_alpha > 0.0 && self.fedasync_alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("fedasync alpha {} must be in (0, 1]", self.fedasync_alpha)));
        }
        if !(self.fedasync_a >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fedasync staleness exponent {} must be >= 0",
                self.fedasync_a
            )));
        }
        Ok(())
    }
}

/// `ceil(C * K)`, at least one client.
pub fn subset_size(fraction: f64, n_clients: usize) -> usize {
    ((fraction * n_clients as f64 - 1e-9).ceil() as usize).clamp(1, n_clients.max(1))
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub w: ParamSet,
    /// Global iteration counter.
    pub t: u64,
    registry: BTreeMap<usize, usize>,
    n_total: usize,
    pub strategy: Algorithm,
    pub config: ServerConfig,
}

impl ServerState {
    pub fn new(w: ParamSet, strategy: Algorithm, config: ServerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { w, t: 0, registry: BTreeMap::new(), n_total: 0, strategy, config })
    }

    /// Records (or refreshes) a client's current sample count.
    pub fn register(&mut self, client_id: usize, n_samples: usize) {
        let old = self.registry.insert(client_id, n_samples).unwrap_or(0);
        self.n_total = self.n_total - old + n_samples;
    }

    pub fn registry(&self) -> &BTreeMap<usize, usize> {
        &self.registry
    }

    /// `N'`, the sum of registered sample counts.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn is_registered(&self, client_id: usize) -> bool {
        self.registry.contains_key(&client_id)
    }
}

/// Asynchronous update `w <- w - (n'_k / N') (w_k_sent - w_k_new)`.
///
/// The registry is refreshed with `n_k_now` before the weight is computed.
/// Returns the new central model, before any re-weighting.
pub fn aggregate_async(
    server: &mut ServerState,
    client_id: usize,
    w_k_new: &ParamSet,
    w_k_sent: &ParamSet,
    n_k_now: usize,
) -> Result<ParamSet> {
    if !server.is_registered(client_id) {
        return Err(Error::UnknownClient(client_id));
    }
    server.w.check_same_shape(w_k_new)?;
    server.w.check_same_shape(w_k_sent)?;
    if n_k_now == 0 {
        return Err(Error::RejectedUpdate { client: client_id, reason: "zero visible samples".into() });
    }
    server.register(client_id, n_k_now);
    let weight = n_k_now as f64 / server.n_total() as f64;
    let delta = w_k_sent.sub(w_k_new)?;
    server.w.axpy_assign(-weight, &delta)?;
    server.t += 1;
    Ok(server.w.clone())
}

/// Softmax of `|w|` along `axis`, computed with max subtraction.
pub fn attention_weights(layer: &ndarray::Array2<f64>, axis: ReweightAxis) -> ndarray::Array2<f64> {
    let mut alpha = layer.mapv(f64::abs);
    let lanes = match axis {
        ReweightAxis::Rows => alpha.rows_mut().into_iter().collect::<Vec<_>>(),
        ReweightAxis::Columns => alpha.columns_mut().into_iter().collect::<Vec<_>>(),
    };
    for mut lane in lanes {
        let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    alpha
}

/// Feature re-weighting of the first layer: `w[i,j] <- alpha[i,j] * w[i,j]`
/// with `alpha[i, .] = softmax(|w[i, .]|)` (row-wise by default). Other
/// layers are returned unchanged.
pub fn reweight_first_layer(w: &ParamSet, axis: ReweightAxis) -> ParamSet {
    let mut out = w.clone();
    let alpha = attention_weights(w.first_layer(), axis);
    *out.first_layer_mut() *= &alpha;
    out
}

/// Sample-weighted average of the returned models; replaces the central
/// model and advances the round counter.
pub fn aggregate_sync_fedavg(server: &mut ServerState, updates: &[(usize, ParamSet, usize)]) -> Result<ParamSet> {
    if updates.is_empty() {
        return Err(Error::EmptyInput("synchronous round without updates".into()));
    }
    let total: usize = updates.iter().map(|u| u.2).sum();
    if total == 0 {
        return Err(Error::RejectedUpdate { client: updates[0].0, reason: "round carries zero samples".into() });
    }
    let mut acc = ParamSet::zeros_like(&server.w);
    for (id, w_k, n_k) in updates {
        acc.axpy_assign(*n_k as f64 / total as f64, w_k)?;
        server.register(*id, *n_k);
    }
    server.w = acc;
    server.t += 1;
    Ok(server.w.clone())
}

/// FedAsync mixing `w <- (1 - a_t) w + a_t w_k_new` with
/// `a_t = alpha (staleness + 1)^(-a)`.
pub fn aggregate_fedasync(server: &mut ServerState, w_k_new: &ParamSet, staleness: i64) -> Result<ParamSet> {
    if staleness < 0 {
        return Err(Error::InvalidArgument(format!("negative staleness {staleness}")));
    }
    let alpha_t = fedasync_mixing(server.config.fedasync_alpha, server.config.fedasync_a, staleness as u64);
    server.w.lincomb_assign(1.0 - alpha_t, alpha_t, w_k_new)?;
    server.t += 1;
    Ok(server.w.clone())
}

pub fn fedasync_mixing(alpha: f64, a: f64, staleness: u64) -> f64 {
    alpha * ((staleness + 1) as f64).powf(-a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamSet {
        ParamSet::from_vec(vec![v])
    }

    fn server_with(w: ParamSet, clients: &[(usize, usize)]) -> ServerState {
        let mut s = ServerState::new(w, Algorithm::AsoFed, ServerConfig::default()).unwrap();
        for &(id, n) in clients {
            s.register(id, n);
        }
        s
    }

    #[test]
    fn zero_delta_leaves_model() {
        let mut s = server_with(scalar(1.3), &[(0, 10), (1, 5)]);
        let w = aggregate_async(&mut s, 0, &scalar(4.0), &scalar(4.0), 10).unwrap();
        assert_eq!(w.to_flat(), vec![1.3]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn single_client_takes_full_delta() {
        let mut s = server_with(scalar(1.0), &[(0, 7)]);
        let w = aggregate_async(&mut s, 0, &scalar(-0.2), &scalar(0.0), 7).unwrap();
        assert!((w.to_flat()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn half_weight_client() {
        let mut s = server_with(scalar(1.0), &[(0, 5), (1, 5)]);
        // client step of size 0.2 folded into the delta
        let w = aggregate_async(&mut s, 1, &scalar(0.3), &scalar(0.5), 5).unwrap();
        assert!((w.to_flat()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn async_errors() {
        let mut s = server_with(scalar(1.0), &[(0, 5)]);
        assert!(matches!(aggregate_async(&mut s, 9, &scalar(0.0), &scalar(0.0), 1), Err(Error::UnknownClient(9))));
        assert!(matches!(aggregate_async(&mut s, 0, &scalar(0.0), &scalar(0.0), 0), Err(Error::RejectedUpdate { .. })));
        assert!(matches!(
            aggregate_async(&mut s, 0, &ParamSet::from_vec(vec![0.0, 1.0]), &scalar(0.0), 3),
            Err(Error::ShapeMismatch(_))
        ));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn registry_tracks_growing_counts() {
        let mut s = server_with(scalar(0.0), &[(0, 5), (1, 5)]);
        aggregate_async(&mut s, 0, &scalar(0.0), &scalar(0.0), 8).unwrap();
        assert_eq!(s.n_total(), 13);
        assert_eq!(s.registry()[&0], 8);
    }

    #[test]
    fn reweight_symmetric_row() {
        let w = ParamSet::new(vec![array![[0.8, 0.8], [-1.5, -1.5]]], 0).unwrap();
        let out = reweight_first_layer(&w, ReweightAxis::Rows);
        assert_eq!(out.layer(0), &array![[0.4, 0.4], [-0.75, -0.75]]);
    }

    #[test]
    fn reweight_zero_row_is_fixed_point() {
        let w = ParamSet::new(vec![array![[0.0, 0.0]]], 0).unwrap();
        assert_eq!(reweight_first_layer(&w, ReweightAxis::Rows).layer(0), &array![[0.0, 0.0]]);
    }

    #[test]
    fn reweight_hand_evaluation() {
        let ln3 = 3f64.ln();
        let w = ParamSet::new(vec![array![[ln3, 0.0]]], 0).unwrap();
        let alpha = attention_weights(w.first_layer(), ReweightAxis::Rows);
        assert!((alpha[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((alpha[[0, 1]] - 0.25).abs() < 1e-15);
        let out = reweight_first_layer(&w, ReweightAxis::Rows);
        assert!((out.layer(0)[[0, 0]] - 3.0 * ln3 / 4.0).abs() < 1e-15);
        assert_eq!(out.layer(0)[[0, 1]], 0.0);
    }

    #[test]
    fn reweight_touches_only_first_layer() {
        let w = ParamSet::new(vec![array![[1.0, 2.0]], array![[3.0, 4.0]]], 1).unwrap();
        let out = reweight_first_layer(&w, ReweightAxis::Rows);
        assert_eq!(out.layer(0), w.layer(0));
        assert_ne!(out.layer(1), w.layer(1));
    }

    #[test]
    fn reweight_columns_normalizes_columns() {
        let w = ParamSet::new(vec![array![[1.0, 5.0], [1.0, -2.0], [1.0, 0.0]]], 0).unwrap();
        let alpha = attention_weights(w.first_layer(), ReweightAxis::Columns);
        for c in alpha.columns() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
        assert!((alpha[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reweight_large_entries_do_not_overflow() {
        let w = ParamSet::new(vec![array![[1000.0, 999.0, -1000.0]]], 0).unwrap();
        let out = reweight_first_layer(&w, ReweightAxis::Rows);
        assert!(out.is_finite());
    }

    #[test]
    fn fedavg_equal_models() {
        let mut s = server_with(scalar(0.0), &[]);
        let w = aggregate_sync_fedavg(&mut s, &[(0, scalar(2.5), 3), (1, scalar(2.5), 9)]).unwrap();
        assert_eq!(w.to_flat(), vec![2.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn fedavg_weighted_mean() {
        let mut s = server_with(scalar(0.0), &[]);
        let w = aggregate_sync_fedavg(&mut s, &[(0, scalar(0.0), 1), (1, scalar(4.0), 3)]).unwrap();
        assert_eq!(w.to_flat(), vec![3.0]);
        assert_eq!(s.n_total(), 4);
    }

    #[test]
    fn fedavg_empty_round() {
        let mut s = server_with(scalar(0.0), &[]);
        assert!(matches!(aggregate_sync_fedavg(&mut s, &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn subset_size_of_fraction() {
        assert_eq!(subset_size(0.2, 30), 6);
        assert_eq!(subset_size(0.2, 20), 4);
        assert_eq!(subset_size(0.1, 3), 1);
        assert_eq!(subset_size(1.0, 7), 7);
    }

    #[test]
    fn fedasync_fresh_update() {
        let mut s = server_with(scalar(0.0), &[]);
        let w = aggregate_fedasync(&mut s, &scalar(1.0), 0).unwrap();
        assert!((w.to_flat()[0] - 0.6).abs() < 1e-15);

        let mut s = server_with(scalar(2.0), &[]);
        let w = aggregate_fedasync(&mut s, &scalar(7.0), 0).unwrap();
        assert!((w.to_flat()[0] - (0.4 * 2.0 + 0.6 * 7.0)).abs() < 1e-15);
    }

    #[test]
    fn fedasync_stale_update_barely_moves() {
        assert!(fedasync_mixing(0.6, 0.5, 1_000_000) < 1e-3);
        let mut s = server_with(scalar(0.0), &[]);
        let w = aggregate_fedasync(&mut s, &scalar(1.0), 1_000_000).unwrap();
        assert!(w.to_flat()[0] < 1e-3);
    }

    #[test]
    fn fedasync_negative_staleness() {
        let mut s = server_with(scalar(0.0), &[]);
        assert!(matches!(aggregate_fedasync(&mut s, &scalar(1.0), -1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn async_sweep_equals_fedavg_round() {
        // two clients, both start from w0; after a full sweep of async updates
        // the model equals the FedAvg weighted average.
        let w0 = ParamSet::new(vec![array![[0.3, -1.2], [2.0, 0.5]], array![[0.1, 0.0]]], 0).unwrap();
        let w1 = ParamSet::new(vec![array![[0.1, -1.0], [2.5, 0.4]], array![[0.0, 0.2]]], 0).unwrap();
        let w2 = ParamSet::new(vec![array![[0.9, -1.4], [1.0, 0.7]], array![[0.3, -0.1]]], 0).unwrap();
        let (n1, n2) = (30, 70);
        let mut a = server_with(w0.clone(), &[(1, n1), (2, n2)]);
        aggregate_async(&mut a, 1, &w1, &w0, n1).unwrap();
        aggregate_async(&mut a, 2, &w2, &w0, n2).unwrap();
        let mut f = server_with(w0.clone(), &[]);
        aggregate_sync_fedavg(&mut f, &[(1, w1, n1), (2, w2, n2)]).unwrap();
        assert!(a.w.max_abs_diff(&f.w).unwrap() <= 1e-12);
    }

    proptest! {
        #[test]
        fn reweight_properties(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let layer = ndarray::Array2::from_shape_vec((3, 4), vals).unwrap();
            let w = ParamSet::new(vec![layer.clone()], 0).unwrap();
            let alpha = attention_weights(&layer, ReweightAxis::Rows);
            for row in alpha.rows() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
            let out = reweight_first_layer(&w, ReweightAxis::Rows);
            prop_assert_eq!(out.shape_signature(), w.shape_signature());
            for (o, i) in out.layer(0).iter().zip(layer.iter()) {
                prop_assert!(o.abs() <= i.abs());
                prop_assert!(*i == 0.0 || o.signum() == i.signum() || *o == 0.0);
            }
        }

        #[test]
        fn registry_sum_invariant(updates in proptest::collection::vec((0usize..5, 1usize..100), 1..40)) {
            let mut s = server_with(scalar(0.0), &[(0, 1), (1, 1), (2, 1), (3, 1), (4, 1)]);
            for (id, n) in updates {
                aggregate_async(&mut s, id, &scalar(0.5), &scalar(0.25), n).unwrap();
                prop_assert_eq!(s.n_total(), s.registry().values().sum::<usize>());
            }
        }
    }
}
