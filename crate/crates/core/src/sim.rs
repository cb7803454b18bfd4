//! Deterministic discrete-event simulation of a federation: client compute
//! and network delays, dropouts, streaming data and server aggregation, all
//! processed in `(time, seq)` order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{run_round, update_multiplier, Algorithm, ClientState, LocalOutcome};
use crate::config::{DataSource, RunConfig};
use crate::data::idx::{fashion_mnist_paths, load_idx};
use crate::data::{partition_noniid, synth_classification, synth_regression, ClientShard};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, regression_metrics, RunRecord};
use crate::models::{init_params, predict, ModelFamily, ModelSpec, ParamSet, Predictions, Samples, Targets};
use crate::server::{
    aggregate_async, aggregate_fedasync, aggregate_sync_fedavg, reweight_first_layer, subset_size, DeltaReference,
    ServerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Dispatch,
    ClientFinish,
    UpdateArrive,
    DataTick,
    DropoutOn,
    DropoutOff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub client_id: usize,
    pub seq: u64,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-queue of events with sequence numbers assigned at scheduling time.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<std::cmp::Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind, client_id: usize) {
        let ev = Event { time, kind, client_id, seq: self.next_seq };
        self.next_seq += 1;
        self.heap.push(std::cmp::Reverse(ev));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|r| r.0)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModel {
    pub base_delay: f64,
    pub jitter: f64,
    pub compute_time_per_sample: f64,
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_delay > 0.0) || !(0.0..1.0).contains(&self.jitter) || !(self.compute_time_per_sample >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid delay model {self:?}")));
        }
        Ok(())
    }

    fn network<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.jitter > 0.0 {
            self.base_delay * rng.gen_range(1.0 - self.jitter..1.0 + self.jitter)
        } else {
            self.base_delay
        }
    }

    fn compute(&self, n_samples: usize) -> f64 {
        self.compute_time_per_sample * n_samples as f64
    }
}

/// `base * U(1 - jitter, 1 + jitter) + compute_per_sample * n_samples`.
pub fn sample_delay<R: Rng>(model: &DelayModel, n_samples: usize, rng: &mut R) -> Result<f64> {
    model.validate()?;
    Ok(model.network(rng) + model.compute(n_samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    pub permanent_fraction: f64,
    pub periodic_rate: f64,
    silent: BTreeSet<usize>,
}

impl DropoutPlan {
    /// Picks exactly `round(permanent_fraction * n_clients)` silent clients.
    pub fn new<R: Rng>(permanent_fraction: f64, periodic_rate: f64, n_clients: usize, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&permanent_fraction) || !(0.0..=1.0).contains(&periodic_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout fractions ({permanent_fraction}, {periodic_rate}) must lie in [0, 1]"
            )));
        }
        let n_silent = ((permanent_fraction * n_clients as f64).round() as usize).min(n_clients);
        let silent = sample(rng, n_clients, n_silent).into_iter().collect();
        Ok(Self { permanent_fraction, periodic_rate, silent })
    }

    pub fn is_silent(&self, client_id: usize) -> bool {
        self.silent.contains(&client_id)
    }

    pub fn silent(&self) -> &BTreeSet<usize> {
        &self.silent
    }
}

/// Whether the client takes part in its next round. Periodic dropouts consume
/// one draw per decision; permanent ones consume none.
pub fn apply_dropout<R: Rng>(plan: &DropoutPlan, client_id: usize, rng: &mut R) -> bool {
    if plan.is_silent(client_id) {
        return false;
    }
    if plan.periodic_rate > 0.0 {
        return rng.gen::<f64>() >= plan.periodic_rate;
    }
    true
}

/// Client shards plus the pooled test set of every client.
#[derive(Debug, Clone)]
pub struct Federation {
    pub spec: ModelSpec,
    pub shards: Vec<ClientShard>,
    pub test: Samples,
    pub n_classes: usize,
}

/// Loads the Fashion-MNIST training file pair.
pub fn load_fashion_mnist(cfg: &RunConfig) -> Result<Arc<Samples>> {
    let (img, lbl) = fashion_mnist_paths(&cfg.data.dir, true);
    Ok(Arc::new(load_idx(&img, &lbl)?))
}

fn data_seed(cfg: &RunConfig) -> u64 {
    cfg.data.seed.wrapping_add(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Federation {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let base = match cfg.data.source {
            DataSource::FashionMnist => Some(load_fashion_mnist(cfg)?),
            _ => None,
        };
        Self::build_with(cfg, base)
    }

    /// Like [`Federation::build`], reusing an already loaded Fashion-MNIST set.
    pub fn build_with(cfg: &RunConfig, base: Option<Arc<Samples>>) -> Result<Self> {
        let d = &cfg.data;
        let seed = data_seed(cfg);
        let (shards, n_classes, input_dim) = match d.source {
            DataSource::FashionMnist => {
                let data = match base {
                    Some(b) => b,
                    None => load_fashion_mnist(cfg)?,
                };
                let labels = match &data.y {
                    Targets::Class(l) => l.clone(),
                    Targets::Real(_) => return Err(Error::Consistency("image labels must be classes".into())),
                };
                let plan = partition_noniid(&labels, d.n_clients, seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shards = plan
                    .client_indices()
                    .into_iter()
                    .map(|idx| ClientShard::new(Arc::clone(&data), idx, &d.stream, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
                let dim = data.dim();
                (shards, n_classes, dim)
            }
            DataSource::SynthRegression | DataSource::SynthQuadratic => {
                let stream = if d.source == DataSource::SynthQuadratic {
                    crate::data::StreamSettings::static_full()
                } else {
                    d.stream
                };
                let fed = synth_regression(
                    d.synth_dim,
                    d.n_clients,
                    d.dissimilarity,
                    (d.synth_samples_min, d.synth_samples_max),
                    d.synth_noise,
                    &stream,
                    seed,
                )?;
                (fed.shards, 0, d.synth_dim)
            }
            DataSource::SynthClassification => {
                let fed = synth_classification(
                    d.synth_dim,
                    d.synth_classes,
                    d.n_clients,
                    d.label_skew,
                    (d.synth_samples_min, d.synth_samples_max),
                    &d.stream,
                    seed,
                )?;
                (fed.shards, d.synth_classes, d.synth_dim)
            }
        };
        let spec = match cfg.model.family {
            ModelFamily::LinearRegression => ModelSpec::linear(input_dim, 1),
            ModelFamily::LogisticClassification => ModelSpec::logistic(input_dim, n_classes),
            ModelFamily::Mlp1Hidden => ModelSpec::mlp(input_dim, cfg.model.hidden_dim, n_classes),
        };
        spec.validate()?;
        let parts: Vec<Samples> = shards.iter().map(ClientShard::test_samples).collect();
        let test = Samples::concat(&parts)?;
        Ok(Self { spec, shards, test, n_classes })
    }
}

/// Test metrics of `params` on `test`, keyed by lowercase metric name.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamSet,
    test: &Samples,
    n_classes: usize,
) -> Result<BTreeMap<String, f64>> {
    match (predict(spec, params, &test.x)?, &test.y) {
        (Predictions::Class(p), Targets::Class(y)) => Ok(classification_metrics(&p, y, n_classes)?.to_map()),
        (Predictions::Real(p), Targets::Real(y)) => {
            let p: Vec<f64> = p.iter().copied().collect();
            let y: Vec<f64> = y.iter().copied().collect();
            Ok(regression_metrics(&p, &y)?.to_map())
        }
        _ => Err(Error::Consistency("prediction kind does not match targets".into())),
    }
}

/// Knobs tests use to pin parts of the schedule.
#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    /// Per-client mean network delay, replacing the uniform draw.
    pub base_delays: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub final_params: ParamSet,
    pub silent_clients: Vec<usize>,
    /// Updates applied per client.
    pub updates_per_client: Vec<u64>,
}

struct Engine<'a> {
    cfg: &'a RunConfig,
    fed: &'a Federation,
    shards: Vec<ClientShard>,
    clients: Vec<ClientState>,
    server: ServerState,
    queue: EventQueue,
    delays: Vec<DelayModel>,
    delay_rngs: Vec<ChaCha8Rng>,
    dropout_rng: ChaCha8Rng,
    select_rng: ChaCha8Rng,
    plan: DropoutPlan,
    w_sent: Vec<Option<ParamSet>>,
    t_sent: Vec<u64>,
    network_part: Vec<f64>,
    round_duration: Vec<f64>,
    outcomes: Vec<Option<LocalOutcome>>,
    round_members: Vec<usize>,
    round_pending: usize,
    round_updates: Vec<(usize, ParamSet, usize, f64)>,
    records: Vec<RunRecord>,
    updates_per_client: Vec<u64>,
    now: f64,
    last_eval: f64,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a RunConfig, fed: &'a Federation, overrides: &RunOverrides) -> Result<Self> {
        let k = fed.shards.len();
        let init = init_params(&fed.spec, cfg.seed)?;
        let client_cfg = cfg.client_config();
        let clients = (0..k).map(|id| ClientState::new(id, &init, client_cfg, cfg.seed)).collect::<Result<Vec<_>>>()?;
        let mut server = ServerState::new(init, cfg.strategy, cfg.server)?;
        let mut run_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_DE1A);
        let bases: Vec<f64> = match &overrides.base_delays {
            Some(b) => {
                if b.len() != k {
                    return Err(Error::InvalidArgument(format!("{} base delays for {k} clients", b.len())));
                }
                b.clone()
            }
            None => (0..k)
                .map(|_| {
                    if cfg.sim.delay_max > cfg.sim.delay_min {
                        run_rng.gen_range(cfg.sim.delay_min..=cfg.sim.delay_max)
                    } else {
                        cfg.sim.delay_min
                    }
                })
                .collect(),
        };
        let delays: Vec<DelayModel> = bases
            .iter()
            .map(|&b| DelayModel {
                base_delay: b,
                jitter: cfg.sim.jitter,
                compute_time_per_sample: cfg.sim.compute_per_sample,
            })
            .collect();
        for d in &delays {
            d.validate()?;
        }
        let plan = DropoutPlan::new(cfg.sim.dropout_permanent, cfg.sim.dropout_periodic, k, &mut run_rng)?;
        for (id, shard) in fed.shards.iter().enumerate() {
            if !plan.is_silent(id) {
                server.register(id, shard.visible_count);
            }
        }
        let stream_rng = |tag: u64, id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag);
            r.set_stream(id);
            r
        };
        Ok(Self {
            cfg,
            fed,
            shards: fed.shards.clone(),
            clients,
            server,
            queue: EventQueue::default(),
            delays,
            delay_rngs: (0..k as u64).map(|id| stream_rng(0xDE1A, id)).collect(),
            dropout_rng: stream_rng(0xD0, 0),
            select_rng: stream_rng(0x5E1, 0),
            plan,
            w_sent: vec![None; k],
            t_sent: vec![0; k],
            network_part: vec![0.0; k],
            round_duration: vec![0.0; k],
            outcomes: vec![None; k],
            round_members: Vec::new(),
            round_pending: 0,
            round_updates: Vec::new(),
            records: Vec::new(),
            updates_per_client: vec![0; k],
            now: 0.0,
            last_eval: 0.0,
        })
    }

    fn synchronous(&self) -> bool {
        self.cfg.strategy.is_synchronous()
    }

    fn live_clients(&self) -> Vec<usize> {
        (0..self.shards.len()).filter(|&k| !self.plan.is_silent(k)).collect()
    }

    fn start(&mut self) {
        if self.synchronous() {
            self.start_round();
        } else {
            for k in self.live_clients() {
                self.queue.push(0.0, EventKind::Dispatch, k);
            }
        }
    }

    /// Draws the synchronous subset from live, currently participating clients.
    fn start_round(&mut self) {
        let live = self.live_clients();
        if live.is_empty() {
            return;
        }
        let available: Vec<usize> =
            live.into_iter().filter(|&k| apply_dropout(&self.plan, k, &mut self.dropout_rng)).collect();
        if available.is_empty() {
            // nobody answered; try again after the shortest mean delay
            let wait = self.delays.iter().map(|d| d.base_delay).fold(f64::INFINITY, f64::min);
            self.queue.push(self.now + wait, EventKind::DataTick, usize::MAX);
            return;
        }
        let m = subset_size(self.cfg.server.fedavg_fraction, self.shards.len()).min(available.len());
        let mut members: Vec<usize> =
            sample(&mut self.select_rng, available.len(), m).into_iter().map(|i| available[i]).collect();
        members.sort_unstable();
        self.round_pending = members.len();
        self.round_updates.clear();
        for &k in &members {
            self.queue.push(self.now, EventKind::Dispatch, k);
        }
        self.round_members = members;
    }

    fn dispatch(&mut self, k: usize) -> Result<()> {
        if !self.synchronous() && !apply_dropout(&self.plan, k, &mut self.dropout_rng) {
            self.queue.push(self.now, EventKind::DropoutOn, k);
            return Ok(());
        }
        self.w_sent[k] = Some(self.server.w.clone());
        self.t_sent[k] = self.server.t;
        let model = self.delays[k];
        let n = self.shards[k].visible_count * self.cfg.client.epochs;
        let network = model.network(&mut self.delay_rngs[k]);
        let compute = model.compute(n);
        self.network_part[k] = network;
        self.round_duration[k] = network + compute;
        self.queue.push(self.now + compute, EventKind::ClientFinish, k);
        Ok(())
    }

    fn client_finish(&mut self, k: usize) -> Result<()> {
        let w_sent = self.w_sent[k].as_ref().expect("finish follows dispatch");
        let outcome =
            run_round(&mut self.clients[k], w_sent, &self.fed.spec, &self.shards[k]).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { iteration: self.server.t + 1, detail },
                other => other,
            })?;
        self.outcomes[k] = Some(outcome);
        self.queue.push(self.now + self.network_part[k], EventKind::UpdateArrive, k);
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.server.w.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence { iteration: self.server.t, detail: "non-finite central model".into() })
        }
    }

    fn update_arrive(&mut self, k: usize) -> Result<()> {
        let outcome = self.outcomes[k].take().expect("arrival follows finish");
        let (params, loss, n_visible) = match outcome {
            LocalOutcome::Skipped => {
                if self.synchronous() {
                    self.round_pending -= 1;
                    if self.round_pending == 0 {
                        self.finish_round()?;
                    }
                } else {
                    self.queue.push(self.now, EventKind::Dispatch, k);
                }
                return Ok(());
            }
            LocalOutcome::Update { params, loss, n_visible, .. } => (params, loss, n_visible),
        };
        let duration = self.round_duration[k];
        if self.synchronous() {
            self.round_updates.push((k, params, n_visible, loss));
            self.round_pending -= 1;
            if self.round_pending == 0 {
                self.finish_round()?;
            }
            return Ok(());
        }
        match self.cfg.strategy {
            Algorithm::FedAsync => {
                let staleness = (self.server.t - self.t_sent[k]) as i64;
                aggregate_fedasync(&mut self.server, &params, staleness)?;
                self.server.register(k, n_visible);
            }
            _ => {
                let reference = match self.cfg.server.delta_reference {
                    DeltaReference::Dispatched => self.w_sent[k].take().expect("dispatched model retained"),
                    DeltaReference::Current => self.server.w.clone(),
                };
                aggregate_async(&mut self.server, k, &params, &reference, n_visible)?;
                if self.cfg.server.feature_reweight {
                    self.server.w = reweight_first_layer(&self.server.w, self.cfg.server.reweight_axis);
                }
            }
        }
        self.check_finite()?;
        update_multiplier(&mut self.clients[k], duration)?;
        self.updates_per_client[k] += 1;
        self.record(loss)?;
        self.shards[k].advance();
        self.queue.push(self.now, EventKind::Dispatch, k);
        Ok(())
    }

    fn finish_round(&mut self) -> Result<()> {
        let updates: Vec<(usize, ParamSet, usize)> =
            self.round_updates.iter().map(|(k, p, n, _)| (*k, p.clone(), *n)).collect();
        if updates.is_empty() {
            self.start_round();
            return Ok(());
        }
        let total: usize = updates.iter().map(|u| u.2).sum();
        let loss = self.round_updates.iter().map(|(_, _, n, l)| *n as f64 * l).sum::<f64>() / total as f64;
        aggregate_sync_fedavg(&mut self.server, &updates)?;
        self.check_finite()?;
        for (k, _, _) in &updates {
            let d = self.round_duration[*k];
            update_multiplier(&mut self.clients[*k], d)?;
            self.updates_per_client[*k] += 1;
        }
        self.record(loss)?;
        for k in std::mem::take(&mut self.round_members) {
            self.shards[k].advance();
        }
        self.start_round();
        Ok(())
    }

    fn record(&mut self, train_loss: f64) -> Result<()> {
        let interval = self.cfg.sim.eval_interval;
        let test_metric = if interval <= 0.0 || self.now >= self.last_eval + interval {
            self.last_eval = self.now;
            evaluate(&self.fed.spec, &self.server.w, &self.fed.test, self.fed.n_classes)?
        } else {
            BTreeMap::new()
        };
        self.records.push(RunRecord {
            sim_time: self.now,
            global_iter: self.server.t,
            train_loss,
            test_metric,
            strategy: self.cfg.strategy.name().to_string(),
            seed: self.cfg.seed,
        });
        Ok(())
    }

    fn run(mut self) -> Result<RunOutput> {
        self.start();
        while let Some(ev) = self.queue.pop() {
            if ev.time > self.cfg.sim.max_time {
                break;
            }
            debug_assert!(ev.time >= self.now, "clock went backwards");
            self.now = ev.time;
            match ev.kind {
                EventKind::Dispatch => self.dispatch(ev.client_id)?,
                EventKind::ClientFinish => self.client_finish(ev.client_id)?,
                EventKind::UpdateArrive => self.update_arrive(ev.client_id)?,
                EventKind::DataTick => self.start_round(),
                EventKind::DropoutOn => {
                    let k = ev.client_id;
                    let wait = self.delays[k].network(&mut self.delay_rngs[k]);
                    self.queue.push(self.now + wait, EventKind::DropoutOff, k);
                }
                EventKind::DropoutOff => self.queue.push(self.now, EventKind::Dispatch, ev.client_id),
            }
            if self.server.t >= self.cfg.sim.max_iter {
                break;
            }
        }
        if let Some(last) = self.records.last_mut() {
            if last.test_metric.is_empty() {
                last.test_metric = evaluate(&self.fed.spec, &self.server.w, &self.fed.test, self.fed.n_classes)?;
            }
        }
        Ok(RunOutput {
            records: self.records,
            final_params: self.server.w,
            silent_clients: self.plan.silent().iter().copied().collect(),
            updates_per_client: self.updates_per_client,
        })
    }
}

/// Runs one simulation on a prepared federation.
pub fn run_with(cfg: &RunConfig, fed: &Federation, overrides: &RunOverrides) -> Result<RunOutput> {
    cfg.validate_values()?;
    if fed.shards.len() != cfg.data.n_clients {
        return Err(Error::InvalidArgument(format!(
            "federation has {} clients, config expects {}",
            fed.shards.len(),
            cfg.data.n_clients
        )));
    }
    Engine::new(cfg, fed, overrides)?.run()
}

/// Builds the federation from `cfg` and runs it.
pub fn run(cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let fed = Federation::build(cfg)?;
    Ok(run_with(cfg, &fed, &RunOverrides::default())?.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{local_step_fedavg, BalanceOrder, ClientConfig};

    fn synth_cfg(strategy: Algorithm, k: usize) -> RunConfig {
        let mut cfg = RunConfig { strategy, ..RunConfig::default() };
        cfg.data.source = DataSource::SynthClassification;
        cfg.data.n_clients = k;
        cfg.data.synth_samples_min = 60;
        cfg.data.synth_samples_max = 120;
        cfg.model.family = ModelFamily::LogisticClassification;
        cfg.client.base_lr = 0.05;
        cfg.sim.max_time = 500.0;
        cfg.sim.max_iter = 10_000;
        cfg
    }

    #[test]
    fn events_pop_in_time_then_seq_order() {
        let mut q = EventQueue::default();
        q.push(5.0, EventKind::Dispatch, 0);
        q.push(1.0, EventKind::UpdateArrive, 1);
        q.push(5.0, EventKind::ClientFinish, 2);
        q.push(1.0, EventKind::Dispatch, 3);
        let order: Vec<usize> = std::iter::from_fn(|| q.pop()).map(|e| e.client_id).collect();
        assert_eq!(order, vec![1, 3, 0, 2]);
    }

    #[test]
    fn delay_without_jitter_or_compute_is_base() {
        let m = DelayModel { base_delay: 42.0, jitter: 0.0, compute_time_per_sample: 0.0 };
        assert_eq!(sample_delay(&m, 500, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 42.0);
    }

    #[test]
    fn delay_substitution() {
        let m = DelayModel { base_delay: 10.0, jitter: 0.0, compute_time_per_sample: 0.001 };
        let d = sample_delay(&m, 1000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((d - 11.0).abs() < 1e-12);
    }

    #[test]
    fn jittered_delays_stay_in_range() {
        let m = DelayModel { base_delay: 10.0, jitter: 0.5, compute_time_per_sample: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = sample_delay(&m, 0, &mut rng).unwrap();
            assert!(d > 5.0 && d < 15.0);
        }
    }

    #[test]
    fn base_delays_drawn_in_configured_range() {
        let cfg = synth_cfg(Algorithm::AsoFed, 8);
        let fed = Federation::build(&cfg).unwrap();
        let eng = Engine::new(&cfg, &fed, &RunOverrides::default()).unwrap();
        for d in &eng.delays {
            assert!((10.0..=100.0).contains(&d.base_delay));
        }
    }

    #[test]
    fn no_dropout_means_everyone_participates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = DropoutPlan::new(0.0, 0.0, 20, &mut rng).unwrap();
        assert!((0..20).all(|k| apply_dropout(&plan, k, &mut rng)));
    }

    #[test]
    fn permanent_dropout_count_is_exact() {
        let plan = DropoutPlan::new(0.5, 0.0, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(plan.silent().len(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in plan.silent() {
            assert!(!apply_dropout(&plan, *k, &mut rng));
        }
    }

    #[test]
    fn dropout_fraction_out_of_range() {
        assert!(DropoutPlan::new(1.5, 0.0, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn periodic_rate_is_respected() {
        let plan = DropoutPlan::new(0.0, 0.3, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let skipped = (0..20_000).filter(|_| !apply_dropout(&plan, 0, &mut rng)).count();
        assert!((skipped as f64 / 20_000.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn same_seed_same_records() {
        let cfg = synth_cfg(Algorithm::AsoFed, 4);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn clock_and_iterations_are_monotone() {
        for strategy in [Algorithm::AsoFed, Algorithm::FedAvg, Algorithm::FedAsync, Algorithm::FedProx] {
            let recs = run(&synth_cfg(strategy, 5)).unwrap();
            for w in recs.windows(2) {
                assert!(w[1].sim_time >= w[0].sim_time);
                assert_eq!(w[1].global_iter, w[0].global_iter + 1);
            }
            assert!(recs.last().unwrap().sim_time <= 500.0);
        }
    }

    #[test]
    fn max_iter_stops_the_run() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 4);
        cfg.sim.max_iter = 7;
        let recs = run(&cfg).unwrap();
        assert_eq!(recs.len(), 7);
        assert!(!recs.last().unwrap().test_metric.is_empty());
    }

    #[test]
    fn eval_interval_thins_evaluations_but_final_is_evaluated() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 4);
        cfg.sim.eval_interval = 100.0;
        let recs = run(&cfg).unwrap();
        let evaluated = recs.iter().filter(|r| !r.test_metric.is_empty()).count();
        assert!(evaluated <= 6, "{evaluated}");
        assert!(!recs.last().unwrap().test_metric.is_empty());
    }

    #[test]
    fn fedavg_round_waits_for_slowest_while_asofed_keeps_going() {
        let delays = vec![10.0, 10.0, 100.0];
        let window = 100.0;
        let mut cfg = synth_cfg(Algorithm::FedAvg, 3);
        cfg.server.fedavg_fraction = 1.0;
        cfg.sim.jitter = 0.0;
        cfg.sim.max_time = window;
        let fed = Federation::build(&cfg).unwrap();
        let ov = RunOverrides { base_delays: Some(delays) };
        let avg = run_with(&cfg, &fed, &ov).unwrap();
        assert_eq!(avg.records.len(), 1);
        assert_eq!(avg.records[0].sim_time, 100.0);

        cfg.strategy = Algorithm::AsoFed;
        let aso = run_with(&cfg, &fed, &ov).unwrap();
        // two fast clients report at 10, 20, ..., 100 and the slow one once
        assert_eq!(aso.records.len(), 21);
        assert_eq!(aso.updates_per_client, vec![10, 10, 1]);
    }

    #[test]
    fn permanent_dropouts_never_report_or_register() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 10);
        cfg.sim.dropout_permanent = 0.3;
        let fed = Federation::build(&cfg).unwrap();
        let out = run_with(&cfg, &fed, &RunOverrides::default()).unwrap();
        assert_eq!(out.silent_clients.len(), 3);
        for &k in &out.silent_clients {
            assert_eq!(out.updates_per_client[k], 0);
        }
        let mut eng = Engine::new(&cfg, &fed, &RunOverrides::default()).unwrap();
        eng.start();
        for &k in &out.silent_clients {
            assert!(!eng.server.is_registered(k));
        }
        cfg.strategy = Algorithm::FedAvg;
        let out = run_with(&cfg, &fed, &RunOverrides::default()).unwrap();
        for &k in &out.silent_clients {
            assert_eq!(out.updates_per_client[k], 0);
        }
        assert!(!out.records.is_empty());
    }

    #[test]
    fn periodic_dropout_still_progresses() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 5);
        cfg.sim.dropout_periodic = 0.5;
        let recs = run(&cfg).unwrap();
        assert!(recs.len() > 10);
        cfg.strategy = Algorithm::FedAvg;
        assert!(!run(&cfg).unwrap().is_empty());
    }

    #[test]
    fn test_set_covers_every_client() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 6);
        cfg.sim.dropout_permanent = 0.5;
        let fed = Federation::build(&cfg).unwrap();
        let total: usize = fed.shards.iter().map(|s| s.test_indices().len()).sum();
        assert_eq!(fed.test.len(), total);
    }

    #[test]
    fn single_client_matches_centralized_sgd() {
        let mut cfg = synth_cfg(Algorithm::AsoFed, 1);
        cfg.client.lambda = 0.0;
        cfg.client.beta = 0.0;
        cfg.client.dynamic_lr = false;
        cfg.client.balance_order = BalanceOrder::BeforeUse;
        cfg.server.feature_reweight = false;
        cfg.sim.delay_min = 1e-3;
        cfg.sim.delay_max = 1e-3;
        cfg.sim.max_iter = 15;
        let fed = Federation::build(&cfg).unwrap();
        let out = run_with(&cfg, &fed, &RunOverrides::default()).unwrap();

        let init = init_params(&fed.spec, cfg.seed).unwrap();
        let sgd_cfg = ClientConfig { algorithm: Algorithm::FedAvg, ..cfg.client_config() };
        let mut state = ClientState::new(0, &init, sgd_cfg, cfg.seed).unwrap();
        let mut shard = fed.shards[0].clone();
        let mut w = init;
        for _ in 0..15 {
            match local_step_fedavg(&mut state, &w, &fed.spec, &shard).unwrap() {
                LocalOutcome::Update { params, .. } => w = params,
                LocalOutcome::Skipped => unreachable!(),
            }
            shard.advance();
        }
        let diff = out.final_params.max_abs_diff(&w).unwrap();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut cfg = synth_cfg(Algorithm::FedAvg, 3);
        cfg.client.base_lr = 1e12;
        cfg.data.source = DataSource::SynthRegression;
        cfg.model.family = ModelFamily::LinearRegression;
        cfg.metrics.primary = "mae".into();
        match run(&cfg) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
