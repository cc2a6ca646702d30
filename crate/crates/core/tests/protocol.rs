mod common;

use common::{monolithic_step, normal_vec, rng};
use psl_core::data::{
    partition, synth_classification, synth_series, ClientShard, Dataset, PartitionMode,
    PartitionSpec,
};
use psl_core::nn::{init_parameters, softmax_cross_entropy, ParameterSet, SplitModelSpec, Tensor};
use psl_core::presets::preset;
use psl_core::protocol::{
    cost_report, Batch, BatchId, CacheEntry, CachePool, ClientState, CostModel, Federation,
    LedgerOptions, MessageKind, OrderPolicy, ParallelConfig, Recorder, Role, Scheme, SchemeConfig,
    Seeds, ServerInstance, SnapshotKind, Trainer,
};
use psl_core::Error;
use rand::Rng;

const SEEDS: Seeds = Seeds {
    init: 3,
    scheduler: 5,
};

fn data(seed: u64, n: usize, shape: &[usize]) -> Dataset {
    synth_classification(n, 10, shape, seed).unwrap()
}

fn shards(ds: &Dataset, n: usize) -> Vec<ClientShard> {
    let spec = PartitionSpec {
        mode: PartitionMode::Balanced,
        client_count: n,
        seed: 1,
    };
    partition(ds, &spec).unwrap()
}

fn federation<'a>(
    split: &'a SplitModelSpec,
    ds: &'a Dataset,
    shards: &[ClientShard],
    config: SchemeConfig,
) -> Federation<'a> {
    Federation::new(split, ds, shards, config, SEEDS, LedgerOptions::default()).unwrap()
}

fn client_params(f: &Federation) -> Vec<ParameterSet> {
    f.clients.iter().map(|c| c.params.clone()).collect()
}

fn all_bitwise_eq(a: &[ParameterSet], b: &[ParameterSet]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

#[test]
fn split_step_equals_monolithic_step() {
    let images = data(1, 40, &[1, 8, 8]);
    let series = synth_series(40, 4, 32, 2).unwrap();
    for (name, ds) in [
        ("tiny-mlp", &images),
        ("tiny-conv2", &images),
        ("tiny-conv1d", &series),
    ] {
        let split = preset(name, ds.sample_shape(), ds.class_count).unwrap();
        let trainer = Trainer::new(&split, ds, 0.1, 8, 0).unwrap();
        let mut client = ClientState {
            client_id: 0,
            params: init_parameters(&trainer.client_spec, 11).unwrap(),
            shard: (0..40).collect(),
            epochs_trained: 0,
        };
        let mut server = ServerInstance {
            instance_id: 0,
            params: init_parameters(&trainer.server_spec, 12).unwrap(),
            busy: false,
        };
        let mut rec = Recorder::new(LedgerOptions::default());
        for seq in 0..3 {
            let indices: Vec<usize> = (seq * 8..seq * 8 + 8).collect();
            let (x, y) = ds.batch(&indices).unwrap();
            let (want_c, want_s) =
                monolithic_step(&split, &client.params, &server.params, &x, &y, 0.1);
            let batch = Batch {
                id: BatchId {
                    epoch: 0,
                    client: 0,
                    seq,
                },
                indices,
            };
            trainer
                .client_step(&mut client, &mut server, &batch, None, &mut rec)
                .unwrap();
            assert!(
                client.params.bitwise_eq(&want_c),
                "{name} client part, step {seq}"
            );
            assert!(
                server.params.bitwise_eq(&want_s),
                "{name} server part, step {seq}"
            );
        }
    }
}

#[test]
fn cached_step_returns_the_incoming_rows_gradient() {
    let ds = data(2, 16, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let trainer = Trainer::new(&split, &ds, 0.05, 8, 0).unwrap();
    let s = split.split_size().unwrap();
    let mut r = rng(77);
    for case in 0..60 {
        let capacity = r.random_range(1..40);
        let mut pool = CachePool::new(capacity, s);
        for _ in 0..r.random_range(0..50) {
            pool.insert(CacheEntry {
                client_id: r.random_range(0..4),
                activations: normal_vec(&mut r, s),
                label: r.random_range(0..10),
            })
            .unwrap();
        }
        let b = r.random_range(1..9);
        let count = r.random_range(0..16);
        let z = Tensor::new(vec![b, s], normal_vec(&mut r, b * s)).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..10)).collect();
        let mut server = ServerInstance {
            instance_id: 0,
            params: init_parameters(&trainer.server_spec, case).unwrap(),
            busy: false,
        };
        let before = server.params.clone();
        let pool_len = pool.len();

        let (out, mut tape) = trainer.server_spec.forward(&before, &z).unwrap();
        let (_, g) = softmax_cross_entropy(&out, &labels).unwrap();
        let (_, alone) = trainer
            .server_spec
            .backward(&before, &mut tape, &g)
            .unwrap();

        let mut sampler = rng(case);
        let step = trainer
            .server_step_cached(&mut server, &mut pool, count, &mut sampler, 9, &z, &labels)
            .unwrap();
        let m = count.min(pool_len);
        assert_eq!(step.cached_rows, m);
        assert_eq!(step.gradients.shape(), z.shape());
        // Row gradients of a mean loss scale with the batch size.
        let scale = b as f64 / (b + m) as f64;
        for (got, want) in step.gradients.data().iter().zip(alone.data()) {
            assert!(
                (got - want * scale).abs() <= 1e-12 * (1.0 + want.abs()),
                "case {case}"
            );
        }
        assert_eq!(pool.len(), (pool_len + b).min(capacity));
        let tail: Vec<&CacheEntry> = pool.entries().collect();
        for i in 0..b.min(capacity) {
            let e = tail[tail.len() - b.min(capacity) + i];
            let row = b - b.min(capacity) + i;
            assert_eq!(e.client_id, 9);
            assert_eq!(e.activations, z.row(row));
            assert_eq!(e.label, labels[row]);
        }
    }
}

#[test]
fn busy_server_and_bad_messages_are_rejected() {
    let ds = data(2, 16, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let trainer = Trainer::new(&split, &ds, 0.05, 8, 0).unwrap();
    let mut server = ServerInstance {
        instance_id: 0,
        params: init_parameters(&trainer.server_spec, 1).unwrap(),
        busy: true,
    };
    let mut client = ClientState {
        client_id: 0,
        params: init_parameters(&trainer.client_spec, 1).unwrap(),
        shard: (0..16).collect(),
        epochs_trained: 0,
    };
    let batch = Batch {
        id: BatchId {
            epoch: 0,
            client: 0,
            seq: 0,
        },
        indices: vec![0, 1],
    };
    let mut rec = Recorder::new(LedgerOptions::default());
    assert!(matches!(
        trainer.client_step(&mut client, &mut server, &batch, None, &mut rec),
        Err(Error::State(_))
    ));
    server.busy = false;
    let z = Tensor::zeros(&[2, 7]);
    assert!(matches!(
        trainer.server_step(&mut server, &z, &[0, 1]),
        Err(Error::Protocol(_))
    ));
    let z = Tensor::zeros(&[2, 64]);
    assert!(matches!(
        trainer.server_step(&mut server, &z, &[0]),
        Err(Error::Protocol(_))
    ));
}

#[test]
fn zero_learning_rate_changes_nothing_but_still_talks() {
    let ds = data(3, 120, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let sh = shards(&ds, 3);
    let mut f = federation(&split, &ds, &sh, SchemeConfig::new(Scheme::Psl, 1, 16, 0.0));
    let before = client_params(&f);
    let server = f.servers[0].params.clone();
    f.run_epoch().unwrap();
    assert!(all_bitwise_eq(&before, &client_params(&f)));
    assert!(f.servers[0].params.bitwise_eq(&server));
    // 40 samples per client in batches of 16: 3 batches each.
    assert_eq!(f.recorder.ledger.count(MessageKind::SmashedBatch), 9);
    assert_eq!(f.recorder.ledger.count(MessageKind::SplitGradients), 9);
}

#[test]
fn smashed_uplink_carries_batch_times_split_size() {
    let ds = data(4, 64, &[1, 8, 8]);
    let split = preset("tiny-conv2", &[1, 8, 8], 10).unwrap();
    let s = split.split_size().unwrap();
    assert_eq!(s, 4 * 8 * 8);
    let sh = shards(&ds, 1);
    let mut f = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::SlVanilla, 1, 32, 0.1),
    );
    f.run_epoch().unwrap();
    let smashed: Vec<_> = f
        .recorder
        .ledger
        .entries()
        .iter()
        .filter(|e| e.variant == MessageKind::SmashedBatch)
        .collect();
    assert_eq!(smashed.len(), 2);
    for e in smashed {
        assert_eq!(e.scalars, 32 * s);
        assert_eq!(e.sender, Role::Client(0));
        assert_eq!(e.receiver, Role::Server(0));
    }
}

fn run_scheme(
    scheme: Scheme,
    clients: usize,
    epochs: usize,
) -> (Vec<ParameterSet>, Federation<'static>) {
    let ds = data(5, 240, &[1, 4, 4]);
    let ds: &'static Dataset = Box::leak(Box::new(ds));
    let split: &'static SplitModelSpec =
        Box::leak(Box::new(preset("tiny-mlp", &[1, 4, 4], 10).unwrap()));
    let sh = shards(ds, clients);
    let mut config = SchemeConfig::new(scheme, epochs, 16, 0.05);
    if scheme == Scheme::PslParallel {
        config.parallel = Some(ParallelConfig {
            instances: 3,
            snapshots_per_aggregation: Some(2),
        });
    }
    let mut f = federation(split, ds, &sh, config);
    for _ in 0..epochs {
        f.run_epoch().unwrap();
    }
    f.finish();
    (client_params(&f), f)
}

#[test]
fn weight_exchange_audit() {
    for scheme in [
        Scheme::Psl,
        Scheme::PslParallel,
        Scheme::PslCache,
        Scheme::Msl,
        Scheme::Sfl,
    ] {
        let (_, f) = run_scheme(scheme, 6, 2);
        assert!(
            f.recorder.ledger.audit_no_client_weight_exchange().is_ok(),
            "{scheme}"
        );
        if scheme.is_psl_family() || scheme == Scheme::Msl {
            assert_eq!(
                f.recorder.ledger.count(MessageKind::WeightSnapshot),
                0,
                "{scheme}"
            );
        }
    }
    let (_, f) = run_scheme(Scheme::Sfl, 6, 2);
    let fed = |e: &&psl_core::protocol::Envelope| {
        e.sender == Role::FedServer || e.receiver == Role::FedServer
    };
    assert_eq!(f.recorder.ledger.entries().iter().filter(fed).count(), 24);

    let (_, f) = run_scheme(Scheme::SlRoundrobin, 6, 2);
    assert!(matches!(
        f.recorder.ledger.audit_no_client_weight_exchange(),
        Err(Error::Audit(_))
    ));
    let kinds: Vec<SnapshotKind> = f
        .recorder
        .ledger
        .client_to_client_snapshots()
        .map(|e| e.snapshot.unwrap())
        .collect();
    let n = |k| kinds.iter().filter(|&&x| x == k).count();
    assert_eq!(n(SnapshotKind::Relay), 10);
    assert_eq!(n(SnapshotKind::Carry), 2);
    assert_eq!(n(SnapshotKind::Broadcast), 4);
    // After the broadcast every client holds the final weights.
    let p = client_params(&f);
    assert!(p.iter().all(|x| x.bitwise_eq(&p[5])));
}

#[test]
fn measured_costs_match_the_closed_form() {
    for scheme in Scheme::ALL {
        let clients = if scheme == Scheme::SlVanilla { 1 } else { 6 };
        let (_, f) = run_scheme(scheme, clients, 2);
        let model = CostModel {
            clients,
            dataset_items: 240,
            split_size: 64,
            client_params: f.client_param_count(),
        };
        let rows = cost_report(&f.recorder.costs, scheme, &model);
        assert_eq!(rows.len(), 2 * clients, "{scheme}");
        for row in rows {
            assert_eq!(row.measured_items, row.predicted_items, "{scheme} {row:?}");
            assert_eq!(
                row.measured_weight_updates, row.predicted_weight_updates,
                "{scheme} {row:?}"
            );
            assert_eq!(row.communication_delta, 0, "{scheme} {row:?}");
        }
    }
}

#[test]
fn single_instance_parallel_is_plain_psl() {
    let ds = data(6, 180, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let sh = shards(&ds, 4);
    let mut a = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::Psl, 2, 16, 0.05),
    );
    let mut config = SchemeConfig::new(Scheme::PslParallel, 2, 16, 0.05);
    config.parallel = Some(ParallelConfig {
        instances: 1,
        snapshots_per_aggregation: Some(1),
    });
    let mut b = federation(&split, &ds, &sh, config);
    for _ in 0..2 {
        a.run_epoch().unwrap();
        let r = b.run_epoch().unwrap();
        assert_eq!(r.aggregations, 4);
    }
    assert!(all_bitwise_eq(&client_params(&a), &client_params(&b)));
    assert!(a.servers[0].params.bitwise_eq(&b.servers[0].params));
    assert_eq!(a.recorder.ledger.digest(), b.recorder.ledger.digest());
}

#[test]
fn single_client_psl_is_vanilla_sl() {
    let ds = data(7, 100, &[1, 8, 8]);
    let split = preset("tiny-conv2", &[1, 8, 8], 10).unwrap();
    let sh = shards(&ds, 1);
    let mut a = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::Psl, 2, 16, 0.05),
    );
    let mut b = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::SlVanilla, 2, 16, 0.05),
    );
    a.run(None).unwrap();
    b.run(None).unwrap();
    assert!(all_bitwise_eq(&client_params(&a), &client_params(&b)));
    assert!(a.servers[0].params.bitwise_eq(&b.servers[0].params));
}

#[test]
fn sfl_clients_agree_after_sync() {
    let (p, f) = run_scheme(Scheme::Sfl, 6, 1);
    assert!(p.iter().all(|x| x.bitwise_eq(&p[0])));
    assert_eq!(f.recorder.ledger.count(MessageKind::WeightSnapshot), 12);
    // Shared init: every client starts from the same weights.
    let ds = data(5, 240, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let sh = shards(&ds, 6);
    let fresh = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::Sfl, 1, 16, 0.05),
    );
    let q = client_params(&fresh);
    assert!(q.iter().all(|x| x.bitwise_eq(&q[0])));
    let fresh = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::Psl, 1, 16, 0.05),
    );
    let q = client_params(&fresh);
    assert!(!q[0].bitwise_eq(&q[1]));
}

#[test]
fn msl_results_do_not_depend_on_client_order() {
    let ds = data(8, 150, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let sh = shards(&ds, 5);
    let mut fixed = federation(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::Msl, 2, 16, 0.05),
    );
    let mut config = SchemeConfig::new(Scheme::Msl, 2, 16, 0.05);
    config.order = OrderPolicy::RandomPerEpoch;
    let mut shuffled = federation(&split, &ds, &sh, config);
    let mut orders = Vec::new();
    for _ in 0..2 {
        fixed.run_epoch().unwrap();
        orders.push(shuffled.run_epoch().unwrap().order);
    }
    assert!(orders.iter().any(|o| o != &[0, 1, 2, 3, 4]));
    assert!(all_bitwise_eq(
        &client_params(&fixed),
        &client_params(&shuffled)
    ));
    for (a, b) in fixed.servers.iter().zip(&shuffled.servers) {
        assert!(a.params.bitwise_eq(&b.params));
    }
}

#[test]
fn parallel_sessions_match_sequential_execution() {
    let ds = data(9, 210, &[1, 8, 8]);
    let split = preset("tiny-conv2", &[1, 8, 8], 10).unwrap();
    let sh = shards(&ds, 7);
    let mut config = SchemeConfig::new(Scheme::PslParallel, 2, 16, 0.05);
    config.parallel = Some(ParallelConfig {
        instances: 3,
        snapshots_per_aggregation: Some(2),
    });
    let mut seq = federation(&split, &ds, &sh, config.clone());
    seq.deterministic = true;
    let mut par = federation(&split, &ds, &sh, config);
    for _ in 0..2 {
        let a = seq.run_epoch().unwrap();
        let b = par.run_epoch().unwrap();
        // 7 snapshots per epoch: three full buffers of 2, one leftover.
        assert_eq!(a.aggregations, 4);
        assert_eq!(a, b);
    }
    assert!(all_bitwise_eq(&client_params(&seq), &client_params(&par)));
    for (a, b) in seq.servers.iter().zip(&par.servers) {
        assert!(a.params.bitwise_eq(&b.params));
    }
    assert_eq!(seq.recorder.ledger, par.recorder.ledger);
}

#[test]
fn finish_is_idempotent_and_final() {
    let (_, mut f) = run_scheme(Scheme::SlRoundrobin, 3, 1);
    let n = f.recorder.ledger.len();
    f.finish();
    assert_eq!(f.recorder.ledger.len(), n);
    assert!(matches!(f.run_epoch(), Err(Error::State(_))));
}

#[test]
fn verbose_ledger_round_trips_and_prunes_payloads() {
    let ds = data(10, 60, &[1, 4, 4]);
    let split = preset("tiny-mlp", &[1, 4, 4], 10).unwrap();
    let sh = shards(&ds, 2);
    let options = LedgerOptions {
        verbose: true,
        payload_epochs: Some(1),
    };
    let mut f = Federation::new(
        &split,
        &ds,
        &sh,
        SchemeConfig::new(Scheme::SlRoundrobin, 2, 16, 0.05),
        SEEDS,
        options,
    )
    .unwrap();
    f.run(None).unwrap();
    let entries = f.recorder.ledger.entries();
    assert!(entries
        .iter()
        .filter(|e| e.epoch == 0)
        .all(|e| e.payload.is_none()));
    assert!(entries
        .iter()
        .filter(|e| e.epoch == 1)
        .all(|e| e.payload.is_some()));
    let mut buf = Vec::new();
    f.recorder.ledger.write_jsonl(&mut buf).unwrap();
    let back = psl_core::protocol::MessageLedger::read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, entries);
}
