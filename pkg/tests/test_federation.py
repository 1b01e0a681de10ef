import numpy as np
import pytest

from flesd.contrastive import ContrastiveConfig, train_simclr_local
from flesd.data import (
    AugmentationConfig,
    PartitionConfig,
    dirichlet_partition,
    split_dataset,
    synth_gaussian_blobs,
)
from flesd.encoder import EncoderConfig, init_encoder, serialize_params
from flesd.errors import ConfigError, ParameterError, ShapeError
from flesd.esd import EsdConfig
from flesd.federation import (
    CommunicationLedger,
    FederationConfig,
    comm_cost_check,
    derive_seed,
    run_fedavg,
    run_fedprox,
    run_flesd,
    run_min_local,
    sample_clients,
    weight_average,
)
from flesd.probe import ProbeConfig
from flesd.similarity import rep_matrix_num_bytes

from testutil import params_equal


class TestSampleClients:
    def test_full_fraction_canonical_order(self):
        assert sample_clients(5, 1.0, round_seed=99) == [0, 1, 2, 3, 4]

    def test_half_of_six(self):
        ids = sample_clients(6, 0.5, round_seed=3)
        assert len(ids) == 3
        assert len(set(ids)) == 3
        assert all(0 <= i < 6 for i in ids)

    def test_deterministic(self):
        assert sample_clients(10, 0.3, 7) == sample_clients(10, 0.3, 7)

    def test_ceil_size(self):
        assert len(sample_clients(5, 0.5, 0)) == 3  # ceil(2.5)


class TestWeightAverage:
    def test_identical_params_any_weights(self):
        p = init_encoder(EncoderConfig((3, 4, 2), init_seed=1))
        out = weight_average([p, p.clone(), p.clone()], [0.2, 0.5, 0.3])
        assert params_equal(out, p)

    def test_degenerate_weights_pick_first(self):
        a = init_encoder(EncoderConfig((3, 4, 2), init_seed=1))
        b = init_encoder(EncoderConfig((3, 4, 2), init_seed=2))
        out = weight_average([a, b], [1.0, 0.0])
        assert params_equal(out, a)

    def test_matches_entrywise_oracle(self):
        params = [init_encoder(EncoderConfig((3, 4, 2), init_seed=s))
                  for s in (1, 2, 3)]
        sizes = np.array([10.0, 30.0, 60.0])
        weights = (sizes / sizes.sum()).tolist()
        out = weight_average(params, weights)
        for layer in range(2):
            expected = sum(w * p.weights[layer].value
                           for w, p in zip(weights, params))
            assert np.abs(out.weights[layer].value - expected).max() < 1e-12

    def test_heterogeneous_architectures_rejected(self):
        a = init_encoder(EncoderConfig((3, 4, 2)))
        b = init_encoder(EncoderConfig((3, 5, 2)))
        with pytest.raises(ShapeError):
            weight_average([a, b], [0.5, 0.5])

    def test_bad_weights_rejected(self):
        p = init_encoder(EncoderConfig((3, 4, 2)))
        with pytest.raises(ParameterError):
            weight_average([p, p.clone()], [0.7, 0.7])
        with pytest.raises(ParameterError):
            weight_average([p, p.clone()], [1.5, -0.5])


class TestCommCostCheck:
    def test_reference_example(self):
        out = comm_cost_check(1.0, 1.0, 10000, 512, 11_000_000)
        assert out["lhs"] == 5_120_000.0
        assert out["rhs"] == 11_000_000.0
        assert out["flesd_cheaper"] is True

    def test_boundary_not_cheaper(self):
        out = comm_cost_check(2.0, 1.0, 100, 10, 1000)
        assert out["lhs"] == 2000.0 and out["rhs"] == 1000.0
        assert out["flesd_cheaper"] is False

    def test_zero_frequency_always_cheaper(self):
        out = comm_cost_check(0.0, 1.0, 100, 10, 1)
        assert out["flesd_cheaper"] is True

    def test_nonpositive_sizes_rejected(self):
        with pytest.raises(ParameterError):
            comm_cost_check(1.0, 1.0, 0, 10, 100)


class TestFederationConfig:
    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            FederationConfig("weightless", num_clients=2)

    def test_cc_forces_single_round(self):
        cfg = FederationConfig("flesd_cc", num_clients=2, rounds=7,
                               epochs_local=5, epochs_total=5)
        assert cfg.rounds == 1

    def test_epoch_consistency(self):
        with pytest.raises(ConfigError):
            FederationConfig("fedavg", num_clients=2, rounds=4,
                             epochs_local=10, epochs_total=100)
        cfg = FederationConfig("fedavg", num_clients=2, rounds=4,
                               epochs_local=10, epochs_total=40)
        assert cfg.epochs_total == 40

    def test_min_local_needs_budget(self):
        with pytest.raises(ConfigError):
            FederationConfig("min_local", num_clients=2, rounds=0)

    def test_fraction_range(self):
        with pytest.raises(ConfigError):
            FederationConfig("fedavg", num_clients=2, sample_fraction=0.0)


def tiny_world(seed=4, public=True, num_clients=3, n_classes=4,
               per_class=60):
    ds = synth_gaussian_blobs(n_classes, per_class, 6, 0.6, seed=seed)
    train, test = split_dataset(ds, 0.8, 5)
    shards = dirichlet_partition(train, PartitionConfig(
        num_clients=num_clients, alpha=1.0, public_shard=public, seed=13,
        min_shard_size=8))
    enc = EncoderConfig((6, 10, 3), init_seed=3)
    local = ContrastiveConfig(temperature=0.4, batch_size=16, epochs=1,
                              lr=1e-3,
                              aug=AugmentationConfig(0.1, 0.05, (0.9, 1.1)))
    esd = EsdConfig(tau_s=0.1, tau_t=0.1, momentum=0.9, anchor_capacity=32,
                    batch_size=16, epochs=3, lr=1e-3)
    return train, test, shards, enc, local, esd


class TestRunFlesd:
    def test_zero_rounds(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd", num_clients=3, rounds=0,
                               epochs_local=2)
        w, record, ledger = run_flesd(cfg, shards, enc, local, esd)
        assert params_equal(w, init_encoder(enc))
        assert len(ledger) == 0

    def test_uplink_bytes_formula(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd", num_clients=3, rounds=2,
                               epochs_local=2, seed=21)
        _, record, ledger = run_flesd(cfg, shards, enc, local, esd)
        n_pub = len(shards[0])
        expected = rep_matrix_num_bytes(3, n_pub)
        ups = [e for e in ledger.entries if e.direction == "up"]
        assert len(ups) == 2 * 3  # rounds x clients
        assert all(e.num_bytes == expected for e in ups)
        assert all(e.payload_kind == "representations" for e in ups)

    def test_public_data_shipped_once(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd", num_clients=3, rounds=3,
                               epochs_local=1, seed=1)
        _, _, ledger = run_flesd(cfg, shards, enc, local, esd)
        pub = [e for e in ledger.entries if e.payload_kind == "public_data"]
        assert len(pub) == 1
        assert pub[0].num_bytes == 8 * len(shards[0]) * shards[0].in_dim

    def test_public_retransmission_flag(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd", num_clients=3, rounds=3,
                               epochs_local=1, seed=1,
                               retransmit_public=True)
        _, _, ledger = run_flesd(cfg, shards, enc, local, esd)
        pub = [e for e in ledger.entries if e.payload_kind == "public_data"]
        assert len(pub) == 3

    def test_single_client_holding_public_data(self):
        # one client whose shard IS the public set: the distilled model
        # should roughly recover that client's purely local quality
        ds = synth_gaussian_blobs(4, 80, 6, 0.6, seed=9)
        train, test = split_dataset(ds, 0.8, 5)
        shards = [train, train]
        enc = EncoderConfig((6, 10, 3), init_seed=3)
        local = ContrastiveConfig(temperature=0.4, batch_size=32, epochs=1,
                                  lr=1e-3,
                                  aug=AugmentationConfig(0.1, 0.05,
                                                         (0.9, 1.1)))
        esd = EsdConfig(tau_s=0.1, tau_t=0.1, momentum=0.9,
                        anchor_capacity=128, batch_size=32, epochs=40,
                        lr=3e-3)
        probe = ProbeConfig(epochs=40, seed=5)
        fed = FederationConfig("flesd", num_clients=1, rounds=2,
                               epochs_local=10, seed=37)
        _, rec_f, _ = run_flesd(fed, shards, enc, local, esd,
                                (probe, train, test))
        fed = FederationConfig("min_local", num_clients=1, epochs_total=20,
                               seed=37)
        _, rec_m, _ = run_min_local(fed, [train], enc, local,
                                    (probe, train, test))
        assert rec_f.final_probe_acc >= rec_m.final_probe_acc - 0.02

    def test_determinism(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd", num_clients=3, rounds=2,
                               epochs_local=2, seed=5)
        w1, r1, l1 = run_flesd(cfg, shards, enc, local, esd)
        w2, r2, l2 = run_flesd(cfg, shards, enc, local, esd)
        assert params_equal(w1, w2)
        assert r1.local_losses == r2.local_losses
        assert r1.distill_losses == r2.distill_losses
        assert len(r1.local_losses) == cfg.rounds
        assert all(len(row) == cfg.epochs_local for row in r1.local_losses)
        assert len(r1.distill_losses) == cfg.rounds
        assert [e.num_bytes for e in l1.entries] == \
               [e.num_bytes for e in l2.entries]

    def test_needs_public_shard(self):
        _, _, shards, enc, local, esd = tiny_world(public=False)
        cfg = FederationConfig("flesd", num_clients=3, rounds=1,
                               epochs_local=1)
        with pytest.raises(ConfigError):
            run_flesd(cfg, shards, enc, local, esd)

    def test_cc_is_single_round(self):
        _, _, shards, enc, local, esd = tiny_world()
        cfg = FederationConfig("flesd_cc", num_clients=3, rounds=5,
                               epochs_local=2, epochs_total=2)
        _, record, ledger = run_flesd(cfg, shards, enc, local, esd)
        assert record.rounds == 1
        assert max(e.round for e in ledger.entries) == 1


class TestRunFedavg:
    def test_single_client_single_round_equals_local_training(self):
        ds = synth_gaussian_blobs(3, 40, 6, 0.6, seed=2)
        shards = dirichlet_partition(ds, PartitionConfig(
            num_clients=1, alpha=1.0, public_shard=False, seed=0))
        enc = EncoderConfig((6, 8, 3), init_seed=7)
        local = ContrastiveConfig(temperature=0.4, batch_size=16, epochs=3,
                                  lr=1e-3,
                                  aug=AugmentationConfig(0.05, 0.0,
                                                         (1.0, 1.0)))
        cfg = FederationConfig("fedavg", num_clients=1, rounds=1,
                               epochs_local=3, seed=11)
        w, _, _ = run_fedavg(cfg, shards, enc, local)
        manual, _ = train_simclr_local(
            init_encoder(enc), shards[0], local,
            seed=derive_seed(11, 2, 1, 0))
        assert params_equal(w, manual)

    def test_fedprox_zero_mu_matches_fedavg(self):
        _, _, shards, enc, local, _ = tiny_world()
        avg_cfg = FederationConfig("fedavg", num_clients=3, rounds=2,
                                   epochs_local=1, seed=3)
        prox_cfg = FederationConfig("fedprox", num_clients=3, rounds=2,
                                    epochs_local=1, prox_mu=0.0, seed=3)
        wa, _, _ = run_fedavg(avg_cfg, shards, enc, local)
        wp, _, _ = run_fedprox(prox_cfg, shards, enc, local)
        assert params_equal(wa, wp)

    def test_fedprox_positive_mu_differs(self):
        _, _, shards, enc, local, _ = tiny_world()
        avg_cfg = FederationConfig("fedavg", num_clients=3, rounds=1,
                                   epochs_local=2, seed=3)
        prox_cfg = FederationConfig("fedprox", num_clients=3, rounds=1,
                                    epochs_local=2, prox_mu=1.0, seed=3)
        wa, _, _ = run_fedavg(avg_cfg, shards, enc, local)
        wp, _, _ = run_fedprox(prox_cfg, shards, enc, local)
        assert not params_equal(wa, wp)

    def test_ledger_two_weight_payloads_per_client_round(self):
        _, _, shards, enc, local, _ = tiny_world()
        cfg = FederationConfig("fedavg", num_clients=3, rounds=2,
                               epochs_local=1, seed=4)
        w0_bytes = len(serialize_params(init_encoder(enc)))
        _, record, ledger = run_fedavg(cfg, shards, enc, local)
        n_clients = len(shards)
        assert len(ledger.entries) == 2 * 2 * n_clients
        per_round_client = {}
        for e in ledger.entries:
            assert e.payload_kind == "weights"
            assert e.num_bytes == w0_bytes  # fixed architecture
            per_round_client.setdefault((e.round, e.client_id), []).append(
                e.direction)
        assert all(sorted(v) == ["down", "up"]
                   for v in per_round_client.values())

    def test_identical_shards_same_seed_average_equals_client(self):
        ds = synth_gaussian_blobs(3, 40, 6, 0.6, seed=6)
        enc = EncoderConfig((6, 8, 3), init_seed=1)
        local = ContrastiveConfig(temperature=0.4, batch_size=16, epochs=2,
                                  lr=1e-3,
                                  aug=AugmentationConfig(0.1, 0.0,
                                                         (1.0, 1.0)))
        w0 = init_encoder(enc)
        c1, _ = train_simclr_local(w0.clone(), ds, local, seed=123)
        c2, _ = train_simclr_local(w0.clone(), ds, local, seed=123)
        assert params_equal(c1, c2)
        avg = weight_average([c1, c2], [0.5, 0.5])
        assert params_equal(avg, c1)


class TestRunMinLocal:
    def test_empty_ledger_and_probe_mean(self):
        train, test, shards, enc, local, _ = tiny_world()
        cfg = FederationConfig("min_local", num_clients=3, epochs_total=2,
                               seed=8)
        probe = ProbeConfig(epochs=10, seed=5)
        params_list, record, ledger = run_min_local(
            cfg, shards, enc, local, (probe, train, test))
        assert len(ledger) == 0
        assert len(params_list) == len(shards)
        assert record.final_probe_acc == pytest.approx(
            np.mean(list(record.client_probe_accs.values())))
        assert record.final_probe_acc > 1.0 / train.n_classes

    def test_matches_fedavg_round_one_clients(self):
        _, _, shards, enc, local, _ = tiny_world()
        cfg = FederationConfig("min_local", num_clients=3, epochs_total=2,
                               seed=9)
        params_list, _, _ = run_min_local(cfg, shards, enc, local)
        w0 = init_encoder(enc)
        for cid, shard in enumerate(shards):
            manual, _ = train_simclr_local(
                w0.clone(), shard,
                ContrastiveConfig(temperature=local.temperature,
                                  batch_size=local.batch_size, epochs=2,
                                  lr=local.lr, aug=local.aug),
                seed=derive_seed(9, 2, 1, cid))
            assert params_equal(params_list[cid], manual)


class TestLedger:
    def test_uplink_direction_matches_comm_cost_check(self):
        # same rounds grid for both schemes: the measured per-client uplink
        # must agree in direction with the scalar-count check
        _, _, shards, enc, local, esd = tiny_world()
        n_pub, d, f = len(shards[0]), 3, init_encoder(enc).param_count()
        rounds = 2
        cfg = FederationConfig("flesd", num_clients=3, rounds=rounds,
                               epochs_local=1, seed=6)
        _, _, led_f = run_flesd(cfg, shards, enc, local, esd)
        cfg = FederationConfig("fedavg", num_clients=3, rounds=rounds,
                               epochs_local=1, seed=6)
        _, _, led_a = run_fedavg(cfg, shards, enc, local)
        flesd_up_per_client = led_f.uplink_bytes / 3
        fedavg_up_per_client = led_a.uplink_bytes / len(shards)
        check = comm_cost_check(rounds, rounds, n_pub, d, f)
        assert check["flesd_cheaper"] == \
               (flesd_up_per_client < fedavg_up_per_client)

    def test_totals_are_conserved(self):
        led = CommunicationLedger()
        led.add(1, "up", "weights", 100, 0)
        led.add(1, "down", "weights", 250, 0)
        led.add(2, "up", "representations", 50, 1)
        assert led.uplink_bytes == 150
        assert led.downlink_bytes == 250
        assert led.uplink_bytes + led.downlink_bytes == \
               sum(e.num_bytes for e in led.entries)

    def test_direction_validated(self):
        led = CommunicationLedger()
        with pytest.raises(ParameterError):
            led.add(0, "sideways", "weights", 1)
