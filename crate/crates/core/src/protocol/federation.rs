use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{stack_entries, CachePool};
use super::cost::CostLedger;
use super::message::{BatchId, LedgerOptions, Message, MessageLedger, Role, SnapshotKind};
use super::{OrderPolicy, Scheme, SchemeConfig};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::nn::{
    average_parameters, init_parameters, sgd_step, softmax_cross_entropy, NetworkSpec,
    ParameterSet, SplitModelSpec, Tensor,
};
use crate::seed::{derive_seed, rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub scheduler: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// Client-part weights u_i.
    pub params: ParameterSet,
    pub shard: Vec<usize>,
    /// Epochs this client has trained in.
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerInstance {
    pub instance_id: usize,
    /// Server-part weights w_j.
    pub params: ParameterSet,
    pub busy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub id: BatchId,
    pub indices: Vec<usize>,
}

/// Messages and cost counters produced by a run or a single session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recorder {
    pub ledger: MessageLedger,
    pub costs: CostLedger,
}

impl Recorder {
    pub fn new(options: LedgerOptions) -> Self {
        Recorder {
            ledger: MessageLedger::new(options),
            costs: CostLedger::default(),
        }
    }

    pub fn absorb(&mut self, other: Recorder) {
        self.ledger.absorb(other.ledger);
        self.costs.absorb(other.costs);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerStep {
    /// Loss over the (possibly concatenated) server batch.
    pub loss: f64,
    /// d loss / d smashed data for the incoming rows only.
    pub gradients: Tensor,
    pub cached_rows: usize,
}

/// Immutable context shared by every step of a run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub split: &'a SplitModelSpec,
    pub client_spec: NetworkSpec,
    pub server_spec: NetworkSpec,
    pub dataset: &'a Dataset,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule_seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        split: &'a SplitModelSpec,
        dataset: &'a Dataset,
        learning_rate: f64,
        batch_size: usize,
        schedule_seed: u64,
    ) -> Result<Self> {
        split.validate()?;
        if dataset.sample_shape() != split.network.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "dataset samples are {:?}, model expects {:?}",
                dataset.sample_shape(),
                split.network.input_shape
            )));
        }
        Ok(Trainer {
            split,
            client_spec: split.client_spec(),
            server_spec: split.server_spec()?,
            dataset,
            learning_rate,
            batch_size,
            schedule_seed,
        })
    }

    /// The client's shard, shuffled for `epoch` and cut into batches (last may be short).
    pub fn batches(&self, client: &ClientState, epoch: usize) -> Vec<Batch> {
        let mut idx = client.shard.clone();
        idx.shuffle(&mut rng_for(
            self.schedule_seed,
            &[tag::SHUFFLE, client.client_id as u64, epoch as u64],
        ));
        idx.chunks(self.batch_size)
            .enumerate()
            .map(|(seq, chunk)| Batch {
                id: BatchId {
                    epoch,
                    client: client.client_id,
                    seq,
                },
                indices: chunk.to_vec(),
            })
            .collect()
    }

    fn check_labels(activations: &Tensor, labels: &[usize]) -> Result<()> {
        if activations.batch() != labels.len() {
            return Err(Error::protocol(format!(
                "smashed batch has {} rows but {} labels",
                activations.batch(),
                labels.len()
            )));
        }
        Ok(())
    }

    /// Server forward/backward/update on one smashed batch.
    pub fn server_step(
        &self,
        server: &mut ServerInstance,
        activations: &Tensor,
        labels: &[usize],
    ) -> Result<ServerStep> {
        Self::check_labels(activations, labels)?;
        let (out, mut tape) = self
            .server_spec
            .forward(&server.params, activations)
            .map_err(|e| Error::protocol(format!("smashed data rejected by server part: {e}")))?;
        let (loss, g) = softmax_cross_entropy(&out, labels)?;
        let (gw, gz) = self.server_spec.backward(&server.params, &mut tape, &g)?;
        server.params = sgd_step(&server.params, &gw, self.learning_rate)?;
        Ok(ServerStep {
            loss,
            gradients: gz,
            cached_rows: 0,
        })
    }

    /// Cache-based server step: cached rows are sampled from the pool, appended
    /// after the incoming rows, trained on jointly, and the gradient is sliced
    /// back to the incoming rows. The incoming batch is cached afterwards.
    pub fn server_step_cached<R: Rng + ?Sized>(
        &self,
        server: &mut ServerInstance,
        pool: &mut CachePool,
        sample_count: usize,
        rng: &mut R,
        client_id: usize,
        activations: &Tensor,
        labels: &[usize],
    ) -> Result<ServerStep> {
        Self::check_labels(activations, labels)?;
        let sampled = pool.sample(sample_count, rng);
        let step = if sampled.is_empty() {
            self.server_step(server, activations, labels)?
        } else {
            let (cached, cached_labels) = stack_entries(&sampled, &activations.shape()[1..])?;
            let joined = Tensor::concat_rows(&[activations, &cached])?;
            let mut joined_labels = labels.to_vec();
            joined_labels.extend_from_slice(&cached_labels);
            let (out, mut tape) = self.server_spec.forward(&server.params, &joined)?;
            let (loss, g) = softmax_cross_entropy(&out, &joined_labels)?;
            let (gw, gz) = self.server_spec.backward(&server.params, &mut tape, &g)?;
            server.params = sgd_step(&server.params, &gw, self.learning_rate)?;
            ServerStep {
                loss,
                gradients: gz.slice_rows(0, activations.batch())?,
                cached_rows: cached.batch(),
            }
        };
        pool.insert_batch(client_id, activations, labels)?;
        Ok(step)
    }

    /// One split iteration of `client` against `server` on `batch`.
    ///
    /// `cache` selects the cache-based server step with the given sample count.
    pub fn client_step(
        &self,
        client: &mut ClientState,
        server: &mut ServerInstance,
        batch: &Batch,
        cache: Option<(&mut CachePool, usize)>,
        rec: &mut Recorder,
    ) -> Result<f64> {
        if server.busy {
            return Err(Error::State(format!(
                "server instance {} is already serving a client",
                server.instance_id
            )));
        }
        let epoch = batch.id.epoch;
        let client_role = Role::Client(client.client_id);
        let server_role = Role::Server(server.instance_id);
        let (x, y) = self.dataset.batch(&batch.indices)?;
        let (z, mut tape) = self.client_spec.forward(&client.params, &x)?;
        let smashed = Message::SmashedBatch {
            batch: batch.id,
            activations: z,
            labels: y,
        };
        rec.ledger.record(
            &smashed,
            client_role,
            server_role,
            epoch,
            Some(&batch.indices),
        );
        let Message::SmashedBatch {
            activations,
            labels,
            ..
        } = smashed
        else {
            unreachable!()
        };
        let cost = rec.costs.entry(epoch, client.client_id);
        cost.items += labels.len() as u64;
        cost.smashed_up += activations.len() as u64;

        server.busy = true;
        let step = match cache {
            Some((pool, count)) => {
                let mut rng = rng_for(
                    self.schedule_seed,
                    &[
                        tag::CACHE,
                        epoch as u64,
                        client.client_id as u64,
                        batch.id.seq as u64,
                    ],
                );
                self.server_step_cached(
                    server,
                    pool,
                    count,
                    &mut rng,
                    client.client_id,
                    &activations,
                    &labels,
                )
            }
            None => self.server_step(server, &activations, &labels),
        };
        server.busy = false;
        let step = step?;
        if step.gradients.shape() != activations.shape() {
            return Err(Error::protocol(format!(
                "split gradients {:?} do not match smashed batch {:?}",
                step.gradients.shape(),
                activations.shape()
            )));
        }

        let reply = Message::SplitGradients {
            batch: batch.id,
            gradients: step.gradients,
        };
        rec.ledger
            .record(&reply, server_role, client_role, epoch, None);
        let Message::SplitGradients { gradients, .. } = reply else {
            unreachable!()
        };
        rec.costs.entry(epoch, client.client_id).gradients_down += gradients.len() as u64;
        let (gu, _) = self
            .client_spec
            .backward(&client.params, &mut tape, &gradients)?;
        client.params = sgd_step(&client.params, &gu, self.learning_rate)?;
        Ok(step.loss)
    }

    /// Trains `client` over its whole shard for `epoch`; returns the mean batch loss.
    pub fn train_session(
        &self,
        client: &mut ClientState,
        server: &mut ServerInstance,
        epoch: usize,
        mut cache: Option<(&mut CachePool, usize)>,
        rec: &mut Recorder,
    ) -> Result<f64> {
        let batches = self.batches(client, epoch);
        let mut total = 0.0;
        for b in &batches {
            let c = cache.as_mut().map(|(p, n)| (&mut **p, *n));
            total += self.client_step(client, server, b, c, rec)?;
        }
        client.epochs_trained += 1;
        Ok(if batches.is_empty() {
            0.0
        } else {
            total / batches.len() as f64
        })
    }

    /// Top-1 accuracy of the composed model on `data`.
    pub fn accuracy(
        &self,
        client: &ParameterSet,
        server: &ParameterSet,
        data: &Dataset,
    ) -> Result<f64> {
        let whole = self.split.join_params(client, server);
        let indices: Vec<usize> = (0..data.len()).collect();
        let mut correct = 0usize;
        for chunk in indices.chunks(256) {
            let (x, y) = data.batch(chunk)?;
            let logits = self.split.network.predict(&whole, &x)?;
            correct += y
                .iter()
                .enumerate()
                .filter(|&(i, &label)| argmax(logits.row(i)) == label)
                .count();
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Training order of the participating clients.
    pub order: Vec<usize>,
    /// Mean batch loss per participating client.
    pub train_loss: BTreeMap<usize, f64>,
    /// Server snapshot aggregations (parallel P-SL).
    #[serde(default)]
    pub aggregations: usize,
    /// Test accuracy per client after the epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub epochs: Vec<EpochReport>,
}

impl RunReport {
    pub fn final_accuracy(&self) -> Option<&[f64]> {
        self.epochs.last()?.accuracy.as_deref()
    }
}

/// All state of one multi-client run.
#[derive(Debug)]
pub struct Federation<'a> {
    pub trainer: Trainer<'a>,
    pub config: SchemeConfig,
    pub seeds: Seeds,
    pub clients: Vec<ClientState>,
    pub servers: Vec<ServerInstance>,
    pub cache: Option<CachePool>,
    pub recorder: Recorder,
    /// Run parallel sessions on one thread.
    pub deterministic: bool,
    epoch: usize,
    /// Round-robin: (holder of the latest weights, receiver of the carry).
    rr_tail: Option<(usize, usize)>,
    finished: bool,
}

impl<'a> Federation<'a> {
    pub fn new(
        split: &'a SplitModelSpec,
        dataset: &'a Dataset,
        shards: &[ClientShard],
        config: SchemeConfig,
        seeds: Seeds,
        ledger: LedgerOptions,
    ) -> Result<Self> {
        config.validate(shards.len())?;
        for (k, s) in shards.iter().enumerate() {
            if s.client_id != k {
                return Err(Error::config(
                    "partition",
                    format!("shard {k} carries client id {}", s.client_id),
                ));
            }
            if let Some(&bad) = s.indices.iter().find(|&&i| i >= dataset.len()) {
                return Err(Error::domain(format!(
                    "shard {k} references sample {bad} of {}",
                    dataset.len()
                )));
            }
        }
        let trainer = Trainer::new(
            split,
            dataset,
            config.learning_rate,
            config.batch_size,
            seeds.scheduler,
        )?;
        let clients = shards
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let stream = if config.scheme.shares_client_init() {
                    0
                } else {
                    k as u64
                };
                Ok(ClientState {
                    client_id: k,
                    params: init_parameters(
                        &trainer.client_spec,
                        derive_seed(seeds.init, &[tag::CLIENT, stream]),
                    )?,
                    shard: s.indices.clone(),
                    epochs_trained: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let server_count = match config.scheme {
            Scheme::Msl => shards.len(),
            Scheme::PslParallel => config.parallel.map_or(1, |p| p.instances),
            _ => 1,
        };
        let servers = (0..server_count)
            .map(|j| {
                let stream = if config.scheme == Scheme::Msl {
                    j as u64
                } else {
                    0
                };
                Ok(ServerInstance {
                    instance_id: j,
                    params: init_parameters(
                        &trainer.server_spec,
                        derive_seed(seeds.init, &[tag::SERVER, stream]),
                    )?,
                    busy: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = match config.cache {
            Some(c) => {
                let total: usize = shards.iter().map(ClientShard::len).sum();
                Some(CachePool::new(
                    c.capacity.unwrap_or(total.max(1)),
                    split.split_size()?,
                ))
            }
            None => None,
        };
        Ok(Federation {
            trainer,
            config,
            seeds,
            clients,
            servers,
            cache,
            recorder: Recorder::new(ledger),
            deterministic: false,
            epoch: 0,
            rr_tail: None,
            finished: false,
        })
    }

    /// Index of the next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Client-part parameter count |U|.
    pub fn client_param_count(&self) -> usize {
        self.clients.first().map_or(0, |c| c.params.scalar_count())
    }

    /// Training order of `participants` for `epoch`.
    pub fn order_for(&self, epoch: usize, participants: &[usize]) -> Vec<usize> {
        let mut order = participants.to_vec();
        if self.config.order == OrderPolicy::RandomPerEpoch {
            order.shuffle(&mut rng_for(
                self.seeds.scheduler,
                &[tag::ORDER, epoch as u64],
            ));
        }
        order
    }

    fn all_clients(&self) -> Vec<usize> {
        (0..self.clients.len()).collect()
    }

    /// Server instance used to evaluate `client`.
    pub fn server_for(&self, client: usize) -> &ServerInstance {
        if self.config.scheme == Scheme::Msl {
            &self.servers[client]
        } else {
            &self.servers[0]
        }
    }

    /// Runs one global epoch of the configured scheme over all clients.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        if self.finished {
            return Err(Error::State("run already finished".into()));
        }
        match self.config.scheme {
            Scheme::SlVanilla | Scheme::Psl | Scheme::PslCache => {
                let all = self.all_clients();
                self.run_psl_epoch(&all)
            }
            Scheme::SlRoundrobin => self.run_sl_roundrobin_epoch(),
            Scheme::Sfl => self.run_sfl_epoch(),
            Scheme::Msl => self.run_msl_epoch(),
            Scheme::PslParallel => self.run_psl_parallel_epoch(),
        }
    }

    fn start_epoch(&mut self) -> usize {
        let e = self.epoch;
        self.recorder.ledger.begin_epoch(e);
        e
    }

    fn cache_samples(&self) -> usize {
        self.config
            .cache
            .map_or(0, |c| c.sample_count(self.config.batch_size))
    }

    /// Sequential training of `participants` against the shared server;
    /// uses the cache-based server step when a cache is configured.
    pub fn run_psl_epoch(&mut self, participants: &[usize]) -> Result<EpochReport> {
        for &c in participants {
            if c >= self.clients.len() {
                return Err(Error::config("clients", format!("unknown client {c}")));
            }
        }
        let e = self.start_epoch();
        let order = self.order_for(e, participants);
        let samples = self.cache_samples();
        let mut train_loss = BTreeMap::new();
        for &c in &order {
            let cache = self.cache.as_mut().map(|p| (p, samples));
            let loss = self.trainer.train_session(
                &mut self.clients[c],
                &mut self.servers[0],
                e,
                cache,
                &mut self.recorder,
            )?;
            train_loss.insert(c, loss);
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: e,
            order,
            train_loss,
            aggregations: 0,
            accuracy: None,
        })
    }

    fn hand_off(&mut self, from: usize, to: usize, kind: SnapshotKind, epoch: usize) {
        let params = self.clients[from].params.clone();
        let n = params.scalar_count() as u64;
        let msg = Message::WeightSnapshot {
            kind,
            params: params.clone(),
        };
        self.recorder
            .ledger
            .record(&msg, Role::Client(from), Role::Client(to), epoch, None);
        let costs = &mut self.recorder.costs;
        if kind == SnapshotKind::Broadcast {
            costs.entry(epoch, from).broadcast_up += n;
            costs.entry(epoch, to).broadcast_down += n;
        } else {
            costs.entry(epoch, from).weights_up += n;
            let r = costs.entry(epoch, to);
            r.weights_down += n;
            r.weight_updates += 1;
        }
        self.clients[to].params = params;
    }

    /// Round-robin SL: each client starts from its predecessor's weights.
    /// The last client of the epoch carries the weights to the first client of
    /// the next epoch's order.
    pub fn run_sl_roundrobin_epoch(&mut self) -> Result<EpochReport> {
        let e = self.start_epoch();
        let all = self.all_clients();
        let order = self.order_for(e, &all);
        let mut train_loss = BTreeMap::new();
        for (p, &c) in order.iter().enumerate() {
            if p > 0 {
                self.hand_off(order[p - 1], c, SnapshotKind::Relay, e);
            }
            let loss = self.trainer.train_session(
                &mut self.clients[c],
                &mut self.servers[0],
                e,
                None,
                &mut self.recorder,
            )?;
            train_loss.insert(c, loss);
        }
        let last = *order.last().expect("at least one client");
        let next_first = self.order_for(e + 1, &all)[0];
        if next_first != last {
            self.hand_off(last, next_first, SnapshotKind::Carry, e);
        }
        self.rr_tail = Some((last, next_first));
        self.epoch += 1;
        Ok(EpochReport {
            epoch: e,
            order,
            train_loss,
            aggregations: 0,
            accuracy: None,
        })
    }

    /// SFL: batches of all clients interleaved against the shared server, then
    /// client weights averaged by the aggregator and synced back.
    pub fn run_sfl_epoch(&mut self) -> Result<EpochReport> {
        let e = self.start_epoch();
        let all = self.all_clients();
        let mut order = self.order_for(e, &all);
        let start = rng_for(self.seeds.scheduler, &[tag::INTERLEAVE, e as u64])
            .random_range(0..order.len());
        order.rotate_left(start);
        let mut queues: Vec<(usize, VecDeque<Batch>)> = order
            .iter()
            .map(|&c| (c, self.trainer.batches(&self.clients[c], e).into()))
            .collect();
        let mut sums: BTreeMap<usize, (f64, usize)> =
            order.iter().map(|&c| (c, (0.0, 0))).collect();
        loop {
            let mut progressed = false;
            for (c, q) in queues.iter_mut() {
                if let Some(b) = q.pop_front() {
                    let loss = self.trainer.client_step(
                        &mut self.clients[*c],
                        &mut self.servers[0],
                        &b,
                        None,
                        &mut self.recorder,
                    )?;
                    let s = sums.get_mut(c).expect("client in order");
                    s.0 += loss;
                    s.1 += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        for c in &mut self.clients {
            c.epochs_trained += 1;
        }
        if self.clients.len() > 1 {
            let n = self.client_param_count() as u64;
            for c in 0..self.clients.len() {
                let msg = Message::WeightSnapshot {
                    kind: SnapshotKind::Upload,
                    params: self.clients[c].params.clone(),
                };
                self.recorder
                    .ledger
                    .record(&msg, Role::Client(c), Role::FedServer, e, None);
                self.recorder.costs.entry(e, c).weights_up += n;
            }
            let sets: Vec<ParameterSet> = self.clients.iter().map(|c| c.params.clone()).collect();
            let avg = average_parameters(&sets)?;
            for c in 0..self.clients.len() {
                let msg = Message::WeightSnapshot {
                    kind: SnapshotKind::Sync,
                    params: avg.clone(),
                };
                self.recorder
                    .ledger
                    .record(&msg, Role::FedServer, Role::Client(c), e, None);
                let r = self.recorder.costs.entry(e, c);
                r.weights_down += n;
                r.weight_updates += 1;
                self.clients[c].params = avg.clone();
            }
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: e,
            order,
            train_loss: sums
                .into_iter()
                .map(|(c, (s, k))| (c, if k == 0 { 0.0 } else { s / k as f64 }))
                .collect(),
            aggregations: 0,
            accuracy: None,
        })
    }

    /// mSL: client k trains only with its private server k.
    pub fn run_msl_epoch(&mut self) -> Result<EpochReport> {
        let e = self.start_epoch();
        let all = self.all_clients();
        let order = self.order_for(e, &all);
        let mut train_loss = BTreeMap::new();
        for &c in &order {
            let loss = self.trainer.train_session(
                &mut self.clients[c],
                &mut self.servers[c],
                e,
                None,
                &mut self.recorder,
            )?;
            train_loss.insert(c, loss);
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: e,
            order,
            train_loss,
            aggregations: 0,
            accuracy: None,
        })
    }

    fn aggregate(&mut self, buffer: &mut Vec<ParameterSet>) -> Result<()> {
        let avg = average_parameters(buffer)?;
        for s in &mut self.servers {
            s.params = avg.clone();
        }
        buffer.clear();
        Ok(())
    }

    /// Parallel P-SL: clients are served in rounds of up to m concurrent
    /// sessions, one instance per session. Each finished session contributes a
    /// snapshot of its instance; every K snapshots are averaged and adopted by
    /// all instances, and leftovers are averaged at the end of the epoch.
    pub fn run_psl_parallel_epoch(&mut self) -> Result<EpochReport> {
        let e = self.start_epoch();
        let all = self.all_clients();
        let order = self.order_for(e, &all);
        let m = self.servers.len();
        let k = self.config.parallel.map_or(m, |p| p.k());
        let options = self.recorder.ledger.options;
        let mut buffer = Vec::new();
        let mut aggregations = 0;
        let mut train_loss = BTreeMap::new();
        for round in order.chunks(m) {
            let mut picked: Vec<(usize, &mut ClientState)> = self
                .clients
                .iter_mut()
                .filter_map(|c| {
                    round
                        .iter()
                        .position(|&id| id == c.client_id)
                        .map(|p| (p, c))
                })
                .collect();
            picked.sort_by_key(|p| p.0);
            let mut sessions: Vec<(&mut ClientState, &mut ServerInstance)> = picked
                .into_iter()
                .map(|(_, c)| c)
                .zip(self.servers.iter_mut())
                .collect();
            let trainer = &self.trainer;
            let run = |(c, s): &mut (&mut ClientState, &mut ServerInstance)| -> Result<(usize, f64, Recorder)> {
                let mut rec = Recorder::new(options);
                let loss = trainer.train_session(c, s, e, None, &mut rec)?;
                Ok((c.client_id, loss, rec))
            };
            let results: Vec<Result<(usize, f64, Recorder)>> = if self.deterministic {
                sessions.iter_mut().map(run).collect()
            } else {
                sessions.par_iter_mut().map(run).collect()
            };
            drop(sessions);
            for r in results {
                let (c, loss, rec) = r?;
                train_loss.insert(c, loss);
                self.recorder.absorb(rec);
            }
            let snapshots: Vec<ParameterSet> = self.servers[..round.len()]
                .iter()
                .map(|s| s.params.clone())
                .collect();
            for snap in snapshots {
                buffer.push(snap);
                if buffer.len() == k {
                    self.aggregate(&mut buffer)?;
                    aggregations += 1;
                }
            }
        }
        if !buffer.is_empty() {
            self.aggregate(&mut buffer)?;
            aggregations += 1;
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: e,
            order,
            train_loss,
            aggregations,
            accuracy: None,
        })
    }

    /// Ends the run: round-robin SL broadcasts the final weights to every
    /// client that does not hold them yet. Idempotent.
    pub fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        if self.config.scheme != Scheme::SlRoundrobin {
            return;
        }
        if let Some((holder, carried)) = self.rr_tail {
            let e = self.epoch.saturating_sub(1);
            for c in 0..self.clients.len() {
                if c != holder && c != carried {
                    self.hand_off(holder, c, SnapshotKind::Broadcast, e);
                }
            }
        }
    }

    /// Test accuracy of every client's composed model, each scored on the test
    /// samples whose class occurs in the client's shard.
    pub fn evaluate(&self, test: &Dataset) -> Result<Vec<f64>> {
        self.clients
            .iter()
            .map(|c| {
                let mut held = vec![false; test.class_count.max(self.trainer.dataset.class_count)];
                for &i in &c.shard {
                    held[self.trainer.dataset.labels[i]] = true;
                }
                let local: Vec<usize> = (0..test.len()).filter(|&i| held[test.labels[i]]).collect();
                let server = &self.server_for(c.client_id).params;
                if local.len() == test.len() {
                    self.trainer.accuracy(&c.params, server, test)
                } else if local.is_empty() {
                    Ok(0.0)
                } else {
                    self.trainer
                        .accuracy(&c.params, server, &test.subset(&local)?)
                }
            })
            .collect()
    }

    /// Runs all configured epochs, evaluating on `test` after each, then finishes.
    pub fn run(&mut self, test: Option<&Dataset>) -> Result<RunReport> {
        let mut epochs = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let mut report = self.run_epoch()?;
            if let Some(t) = test {
                report.accuracy = Some(self.evaluate(t)?);
            }
            epochs.push(report);
        }
        self.finish();
        Ok(RunReport {
            scheme: self.config.scheme,
            epochs,
        })
    }
}
