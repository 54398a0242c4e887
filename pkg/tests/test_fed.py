import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedflow import synth
from fedflow.features import FeatureVector, build_schema, fit_scaler, scale_matrix
from fedflow.fed import (
    ClientState,
    ClientUpdate,
    FeaturizedCorpus,
    FedConfig,
    FifoBuffer,
    aggregate_adaptive,
    aggregate_fedavg,
    centralized_split,
    ingest_round,
    local_round,
    read_report,
    run_experiment,
    ServerState,
    write_report,
)
from fedflow.metrics import confusion_matrix, macro_f1
from fedflow.nn import (
    ModelParams,
    TrainConfig,
    fresh_train_config,
    init_params,
    predict,
    train_local,
)
from fedflow.rng import derive_seed, substream

DIM1 = build_schema(1).dimension  # smallest schema: 40 features

FAST_FED = TrainConfig(learning_rate=0.01, batch_size=32, epochs=2,
                       dropout_p=0.0, early_stop_patience=2, seed=0)
FAST_CENTRAL = TrainConfig(learning_rate=0.01, batch_size=128, epochs=3,
                           dropout_p=0.0, early_stop_patience=3, seed=0)


def fake_vectors(n, dim=3, client_id=0, round_index=0, seed=0):
    rng = np.random.default_rng(seed)
    return [
        FeatureVector(rng.random(dim), int(rng.integers(0, 7)),
                      client_id, round_index)
        for _ in range(n)
    ]


def scalar_params(value, run_mean=0.0):
    """One-weight model: enough structure to exercise the aggregators."""
    return ModelParams(input_dim=1, tensors={
        "w0": np.array([float(value)]),
        "run_mean0": np.array([float(run_mean)]),
    })


def scalar_update(client_id, n_train, value, run_mean=0.0):
    return ClientUpdate(client_id=client_id, participated=True, n_train=n_train,
                        params=scalar_params(value, run_mean))


@pytest.fixture(scope="module")
def tiny_corpus():
    """Three flat-volume clients, six rounds, smallest feature schema."""
    gen = synth.GenConfig(seed=17, n_clients=3, n_rounds=6,
                          rate_low=70.0, rate_high=90.0,
                          night_floor_low=1.0, night_floor_high=1.0)
    flows = synth.generate(gen)
    schema = build_schema(1)
    return FeaturizedCorpus.from_flows(flows, schema, gen.n_clients,
                                       gen.n_rounds, gen.round_seconds)


def small_fed_cfg(**overrides):
    base = dict(train_capacity=40, val_capacity=10, test_capacity=12)
    base.update(overrides)
    return FedConfig(**base)


def test_fifo_buffer_evicts_oldest():
    buf = FifoBuffer(3)
    buf.push(["a"])
    assert len(buf) == 1 and not buf.full
    buf.push(["b", "c"])
    assert buf.full
    buf.push(["d"])
    assert buf.snapshot() == ["b", "c", "d"]
    assert len(buf) == 3


def test_fifo_buffer_large_overflow():
    buf = FifoBuffer(640)
    for i in range(700):
        buf.push([i])
    assert buf.snapshot() == list(range(60, 700))
    with pytest.raises(ValueError):
        FifoBuffer(0)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=1, max_value=8),
    st.lists(st.lists(st.integers(0, 99), max_size=6), max_size=20),
)
def test_fifo_buffer_matches_suffix(capacity, chunks):
    buf = FifoBuffer(capacity)
    everything = []
    for chunk in chunks:
        buf.push(chunk)
        everything.extend(chunk)
    assert buf.snapshot() == everything[-capacity:]


def test_unbuffered_split_sizes():
    client = ClientState.fresh(0, small_fed_cfg())
    cfg = small_fed_cfg()
    ing = ingest_round(client, fake_vectors(10), "fed-unbuffered",
                       substream(0, "ingest", 0, 0), cfg, 3)
    assert (len(ing.train_y), len(ing.val_y), len(ing.test_y)) == (7, 1, 2)
    assert ing.ready
    # Unbuffered never touches the buffers.
    assert len(client.train_buf) == 0 and len(client.test_buf) == 0

    ing3 = ingest_round(client, fake_vectors(3), "fed-unbuffered",
                        substream(0, "ingest", 0, 1), cfg, 3)
    assert (len(ing3.train_y), len(ing3.val_y), len(ing3.test_y)) == (2, 0, 1)
    assert ing3.ready

    ing2 = ingest_round(client, fake_vectors(2), "fed-unbuffered",
                        substream(0, "ingest", 0, 2), cfg, 3)
    assert len(ing2.train_y) == 1 and not ing2.ready

    ing0 = ingest_round(client, [], "fed-unbuffered",
                        substream(0, "ingest", 0, 3), cfg, 3)
    assert not ing0.ready
    assert ing0.train_x.shape == (0, 3)


def test_unbuffered_split_partitions_exactly():
    vectors = fake_vectors(37, seed=4)
    client = ClientState.fresh(0, small_fed_cfg())
    ing = ingest_round(client, vectors, "fed-unbuffered",
                       substream(9, "ingest", 0, 0), small_fed_cfg(), 3)
    rebuilt = np.concatenate([ing.train_x, ing.val_x, ing.test_x])
    original = np.array([fv.values for fv in vectors])
    assert rebuilt.shape == original.shape
    # Same multiset of rows: sort both lexicographically and compare.
    key = lambda m: m[np.lexsort(m.T)]
    assert np.allclose(key(rebuilt), key(original))


def test_unbuffered_split_deterministic():
    vectors = fake_vectors(25, seed=2)
    cfg = small_fed_cfg()
    a = ingest_round(ClientState.fresh(0, cfg), vectors, "fed-unbuffered",
                     substream(3, "ingest", 0, 5), cfg, 3)
    b = ingest_round(ClientState.fresh(0, cfg), vectors, "fed-unbuffered",
                     substream(3, "ingest", 0, 5), cfg, 3)
    assert np.array_equal(a.train_x, b.train_x)
    assert np.array_equal(a.test_y, b.test_y)


def test_buffered_routing_and_readiness():
    cfg = small_fed_cfg(train_capacity=70, val_capacity=64, test_capacity=20)
    client = ClientState.fresh(0, cfg)
    ing = ingest_round(client, fake_vectors(30), "fed-buffered",
                       substream(0, "ingest", 0, 0), cfg, 3)
    assert not ing.ready  # train buffer not yet at capacity
    assert len(ing.val_y) == 0  # below the early-stop minimum, withheld

    ing = ingest_round(client, fake_vectors(1000, seed=1), "fed-buffered",
                       substream(0, "ingest", 0, 1), cfg, 3)
    assert ing.ready
    assert len(client.train_buf) == 70
    assert len(ing.train_y) == 70
    assert len(ing.val_y) == 64  # buffer capacity reached the minimum
    assert len(ing.test_y) == 20


def test_buffered_routing_ratios():
    cfg = small_fed_cfg(train_capacity=5000, val_capacity=5000,
                        test_capacity=5000, min_val_for_early_stop=1)
    client = ClientState.fresh(0, cfg)
    ingest_round(client, fake_vectors(4000, seed=3), "fed-buffered",
                 substream(1, "ingest", 0, 0), cfg, 3)
    total = 4000
    assert len(client.train_buf) / total == pytest.approx(0.7, abs=0.03)
    assert len(client.val_buf) / total == pytest.approx(0.1, abs=0.02)
    assert len(client.test_buf) / total == pytest.approx(0.2, abs=0.03)


def test_buffered_keeps_newest_when_full():
    cfg = small_fed_cfg(train_capacity=10, val_capacity=5, test_capacity=5)
    client = ClientState.fresh(0, cfg)
    old = [FeatureVector(np.zeros(3), 0, 0, 0) for _ in range(200)]
    new = [FeatureVector(np.ones(3), 1, 0, 1) for _ in range(200)]
    ingest_round(client, old, "fed-buffered", substream(0, "ingest", 0, 0), cfg, 3)
    ing = ingest_round(client, new, "fed-buffered",
                       substream(0, "ingest", 0, 1), cfg, 3)
    assert np.all(ing.train_x == 1.0)  # all old rows were evicted
    assert np.all(ing.test_x == 1.0)


def test_ingest_rejects_unknown_strategy():
    cfg = small_fed_cfg()
    with pytest.raises(ValueError, match="unknown strategy"):
        ingest_round(ClientState.fresh(0, cfg), [], "nope",
                     substream(0, "ingest", 0, 0), cfg, 3)


def test_fed_config_validation():
    with pytest.raises(ValueError):
        FedConfig(train_capacity=0)
    with pytest.raises(ValueError):
        FedConfig(server_tau=0.0)
    with pytest.raises(ValueError):
        FedConfig(prox_mu=-0.1)


def test_local_round_survives_divergence():
    params = init_params(DIM1, seed=0)
    params.tensors["w4"][:] = np.nan
    x = np.random.default_rng(0).random((8, DIM1))
    y = np.arange(8) % 7
    update = local_round(1, params, x, y, np.zeros((0, DIM1)),
                         np.zeros(0, dtype=int), FAST_FED)
    assert not update.participated
    assert update.client_id == 1
    assert "non-finite" in update.failure
    assert update.params is None


def test_fedavg_single_client_identity():
    global_params = scalar_params(0.0)
    update = scalar_update(0, 5, 3.25, run_mean=1.5)
    merged = aggregate_fedavg([update], global_params)
    assert merged.tensors["w0"][0] == 3.25
    assert merged.tensors["run_mean0"][0] == 1.5


def test_fedavg_hand_weighted_mean():
    # Weights 1/4 and 3/4 over values 1 and 5: exactly 4.0.
    merged = aggregate_fedavg(
        [scalar_update(0, 1, 1.0), scalar_update(1, 3, 5.0)],
        scalar_params(0.0),
    )
    assert merged.tensors["w0"][0] == 4.0


def test_fedavg_order_invariant_and_convex():
    updates = [scalar_update(2, 7, 2.0), scalar_update(0, 2, -1.0),
               scalar_update(1, 1, 9.0)]
    a = aggregate_fedavg(updates, scalar_params(0.0))
    b = aggregate_fedavg(list(reversed(updates)), scalar_params(0.0))
    assert a.tensors["w0"][0] == b.tensors["w0"][0]
    assert -1.0 <= a.tensors["w0"][0] <= 9.0


def test_fedavg_averages_full_models():
    pa, pb = init_params(DIM1, seed=1), init_params(DIM1, seed=2)
    merged = aggregate_fedavg(
        [ClientUpdate(0, True, n_train=3, params=pa),
         ClientUpdate(1, True, n_train=1, params=pb)],
        init_params(DIM1, seed=3),
    )
    expected = 0.75 * pa.tensors["w0"] + 0.25 * pb.tensors["w0"]
    assert np.allclose(merged.tensors["w0"], expected)
    expected_rv = 0.75 * pa.tensors["run_var0"] + 0.25 * pb.tensors["run_var0"]
    assert np.allclose(merged.tensors["run_var0"], expected_rv)


def test_aggregate_rejects_bad_updates():
    good = scalar_update(0, 1, 1.0)
    with pytest.raises(ValueError, match="at least one"):
        aggregate_fedavg([ClientUpdate(0, False)], scalar_params(0.0))
    mismatched = ClientUpdate(1, True, n_train=1,
                              params=ModelParams(1, {"w0": np.zeros(2)}))
    with pytest.raises(ValueError, match="shape mismatch"):
        aggregate_fedavg([good, mismatched], scalar_params(0.0))
    with pytest.raises(ValueError, match="no training samples"):
        aggregate_fedavg([scalar_update(0, 0, 1.0)], scalar_params(0.0))


def adaptive_cfg():
    return FedConfig(server_eta=0.01, server_beta1=0.9, server_beta2=0.99,
                     server_tau=1e-3)


@pytest.mark.parametrize("kind,expected", [
    ("fedadam", 0.01 * 0.1 / (0.1 + 1e-3)),
    ("fedyogi", 0.01 * 0.1 / (0.1 + 1e-3)),
    ("fedadagrad", 0.01 * 0.1 / (1.0 + 1e-3)),
])
def test_adaptive_first_step_oracles(kind, expected):
    # Single client, delta = 1: m = 0.1; v = 0.01 (adam/yogi) or 1 (adagrad).
    g = scalar_params(0.0)
    server = ServerState.fresh(kind, g, adaptive_cfg())
    merged = aggregate_adaptive([scalar_update(0, 4, 1.0)], g, server)
    assert merged.tensors["w0"][0] == pytest.approx(expected, rel=1e-12)


def test_adaptive_zero_delta_is_identity():
    for kind in ("fedadam", "fedyogi", "fedadagrad"):
        g = scalar_params(1.25, run_mean=0.5)
        server = ServerState.fresh(kind, g, adaptive_cfg())
        merged = aggregate_adaptive([scalar_update(0, 4, 1.25, run_mean=0.5)],
                                    g, server)
        assert merged.tensors["w0"][0] == 1.25
        assert merged.tensors["run_mean0"][0] == 0.5


def test_adaptive_stats_bypass_optimizer():
    g = scalar_params(0.0, run_mean=0.0)
    server = ServerState.fresh("fedadam", g, adaptive_cfg())
    merged = aggregate_adaptive(
        [scalar_update(0, 1, 0.0, run_mean=2.0),
         scalar_update(1, 3, 0.0, run_mean=4.0)],
        g, server,
    )
    # Running stats take the plain weighted mean even under FedOpt.
    assert merged.tensors["run_mean0"][0] == pytest.approx(3.5)
    assert merged.tensors["w0"][0] == 0.0


def test_adaptive_second_step_recursions():
    cfg = adaptive_cfg()
    g = scalar_params(0.0)

    adagrad = ServerState.fresh("fedadagrad", g, cfg)
    aggregate_adaptive([scalar_update(0, 1, 1.0)], g, adagrad)
    merged = aggregate_adaptive([scalar_update(0, 1, 1.0)], g, adagrad)
    m2 = 0.9 * 0.1 + 0.1 * 1.0
    v2 = 1.0 + 1.0
    assert merged.tensors["w0"][0] == pytest.approx(
        0.01 * m2 / (math.sqrt(v2) + 1e-3), rel=1e-12)

    yogi = ServerState.fresh("fedyogi", g, cfg)
    aggregate_adaptive([scalar_update(0, 1, 1.0)], g, yogi)
    # Second delta 0.05: d^2 < v so the Yogi sign flips the decay branch.
    merged_y = aggregate_adaptive([scalar_update(0, 1, 0.05)], g, yogi)
    v2y = 0.01 - 0.01 * 0.05 ** 2  # v - (1-b2) d^2 sign(v - d^2), sign = +1
    m2y = 0.9 * 0.1 + 0.1 * 0.05
    assert yogi.v["w0"][0] == pytest.approx(v2y, rel=1e-12)
    assert merged_y.tensors["w0"][0] == pytest.approx(
        0.01 * m2y / (math.sqrt(v2y) + 1e-3), rel=1e-12)

    adam = ServerState.fresh("fedadam", g, cfg)
    aggregate_adaptive([scalar_update(0, 1, 1.0)], g, adam)
    aggregate_adaptive([scalar_update(0, 1, 0.05)], g, adam)
    assert adam.v["w0"][0] == pytest.approx(0.99 * 0.01 + 0.01 * 0.05 ** 2)
    assert adam.v["w0"][0] != pytest.approx(yogi.v["w0"][0])


def test_adaptive_weights_deltas_by_samples():
    g = scalar_params(0.0)
    server = ServerState.fresh("fedadam", g, adaptive_cfg())
    merged = aggregate_adaptive(
        [scalar_update(0, 1, 1.0), scalar_update(1, 3, 5.0)], g, server)
    d = 4.0  # weighted mean delta: (1*1 + 3*5) / 4
    expected = 0.01 * (0.1 * d) / (math.sqrt(0.01 * d * d) + 1e-3)
    assert merged.tensors["w0"][0] == pytest.approx(expected, rel=1e-12)


def test_corpus_from_flows(tiny_corpus):
    assert tiny_corpus.n_clients == 3 and tiny_corpus.n_rounds == 6
    assert all(0 <= r < 6 and 0 <= c < 3 for r, c in tiny_corpus.cells)
    x, y = tiny_corpus.cells[(0, 0)]
    assert x.shape[1] == tiny_corpus.schema.dimension
    assert x.shape[0] == y.shape[0] > 0
    assert y.dtype.kind == "i"


def test_corpus_rejects_out_of_range_clients():
    gen = synth.GenConfig(seed=3, n_clients=2, n_rounds=2, rate_low=20.0,
                          rate_high=20.0, night_floor_low=1.0,
                          night_floor_high=1.0)
    flows = synth.generate(gen)
    schema = build_schema(1)
    with pytest.raises(ValueError, match="client_id"):
        FeaturizedCorpus.from_flows(flows, schema, 1, 2, gen.round_seconds)
    # Extra rounds are silently dropped instead.
    trimmed = FeaturizedCorpus.from_flows(flows, schema, 2, 1, gen.round_seconds)
    assert all(r == 0 for r, _ in trimmed.cells)


def test_single_client_round_reproduction():
    gen = synth.GenConfig(seed=5, n_clients=1, n_rounds=1, rate_low=150.0,
                          rate_high=150.0, night_floor_low=1.0,
                          night_floor_high=1.0)
    flows = synth.generate(gen)
    schema = build_schema(1)
    corpus = FeaturizedCorpus.from_flows(flows, schema, 1, 1, gen.round_seconds)
    fed_cfg = small_fed_cfg()
    seed = 5

    result = run_experiment(corpus, "fed-unbuffered", "fedavg",
                            fed_cfg=fed_cfg, fed_train=FAST_FED,
                            central_train=FAST_CENTRAL, seed=seed)

    # Replay the round by hand: scale, split, train from the seeded init.
    x_raw, _ = corpus.cells[(0, 0)]
    scaler = fit_scaler(x_raw)
    vectors = [
        FeatureVector(scale_matrix(x_raw[i : i + 1], scaler)[0],
                      int(corpus.cells[(0, 0)][1][i]), 0, 0)
        for i in range(len(x_raw))
    ]
    ing = ingest_round(ClientState.fresh(0, fed_cfg), vectors, "fed-unbuffered",
                       substream(seed, "ingest", 0, 0), fed_cfg, schema.dimension)
    assert ing.ready
    init = init_params(schema.dimension, derive_seed(seed, "init"))
    cfg = fresh_train_config(FAST_FED, derive_seed(seed, "train", 0, 0))
    trained = train_local(init, ing.train_x, ing.train_y, ing.val_x, ing.val_y, cfg)

    for name in trained.params.tensors:
        assert np.array_equal(result.final_params.tensors[name],
                              trained.params.tensors[name]), name
    expected_f1 = macro_f1(confusion_matrix(
        ing.test_y, predict(trained.params, ing.test_x)))
    assert result.reports[0].system_f1 == pytest.approx(expected_f1, abs=1e-12)


def test_run_experiment_report_integrity(tiny_corpus):
    result = run_experiment(tiny_corpus, "fed-buffered", "fedavg",
                            fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                            central_train=FAST_CENTRAL, seed=11)
    assert len(result.reports) == 6
    for report in result.reports:
        assert len(report.entries) == 3
        participants = [e for e in report.entries if e.participated]
        assert report.n_participants == len(participants)
        assert report.total_train == sum(e.n_train for e in participants)
        for entry in report.entries:
            if not entry.participated:
                assert entry.n_train == 0 and entry.n_test == 0
    series = result.f1_series()
    assert len(series) == 6
    assert any(math.isfinite(v) for v in series[1:])


def test_run_experiment_rejects_unknown_names(tiny_corpus):
    with pytest.raises(ValueError, match="fed-buffered"):
        run_experiment(tiny_corpus, "bogus", "fedavg",
                       fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                       central_train=FAST_CENTRAL, seed=0)
    with pytest.raises(ValueError, match="fedyogi"):
        run_experiment(tiny_corpus, "fed-buffered", "bogus",
                       fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                       central_train=FAST_CENTRAL, seed=0)


def test_report_round_trip(tmp_path, tiny_corpus):
    result = run_experiment(tiny_corpus, "fed-unbuffered", "fedavg",
                            fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                            central_train=FAST_CENTRAL, seed=23)
    path = tmp_path / "rounds.csv"
    write_report(str(path), result)

    lines = path.read_text().strip().splitlines()
    assert lines[0] == "round,scenario,aggregator,client_id,participated,n_train,n_test,macro_f1,loss"
    assert len(lines) == 1 + 6 * (3 + 1)  # per-client rows plus aggregate row

    series = read_report(str(path))
    assert series.scenario == "fed-unbuffered"
    assert series.aggregator == "fedavg"
    assert sorted(series.f1_by_round) == list(range(6))
    for report in result.reports:
        parsed = series.f1_by_round[report.round_index]
        if math.isnan(report.system_f1):
            assert math.isnan(parsed)
        else:
            assert parsed == pytest.approx(report.system_f1, abs=5e-7)


def test_read_report_rejects_other_csv(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="not a round-report CSV"):
        read_report(str(path))


def test_workers_do_not_change_results(tiny_corpus):
    kwargs = dict(fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                  central_train=FAST_CENTRAL, seed=29)
    serial = run_experiment(tiny_corpus, "fed-buffered", "fedavg",
                            workers=1, **kwargs)
    parallel = run_experiment(tiny_corpus, "fed-buffered", "fedavg",
                              workers=2, **kwargs)
    for name in serial.final_params.tensors:
        assert np.array_equal(serial.final_params.tensors[name],
                              parallel.final_params.tensors[name]), name
    for a, b in zip(serial.f1_series(), parallel.f1_series()):
        assert (math.isnan(a) and math.isnan(b)) or a == b


def test_empty_corpus_stalls_every_round():
    schema = build_schema(1)
    corpus = FeaturizedCorpus(schema=schema, n_clients=2, n_rounds=3,
                              round_seconds=10800.0, cells={})
    result = run_experiment(corpus, "fed-buffered", "fedavg",
                            fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                            central_train=FAST_CENTRAL, seed=31)
    assert all(r.n_participants == 0 for r in result.reports)
    assert all(math.isnan(v) for v in result.f1_series())
    init = init_params(schema.dimension, derive_seed(31, "init"))
    for name in init.tensors:
        assert np.array_equal(result.final_params.tensors[name],
                              init.tensors[name])


def test_centralized_split_shares(tiny_corpus):
    (tx, ty), (vx, vy), (sx, sy), scaler = centralized_split(tiny_corpus, seed=7)
    total = sum(len(y) for _, y in tiny_corpus.cells.values())
    assert len(ty) == int(0.7 * total)
    assert len(vy) == int(0.1 * total)
    assert len(sy) == total - len(ty) - len(vy)
    for m in (tx, vx, sx):
        assert m.min() >= 0.0 and m.max() <= 1.0
    # Scaler bounds come from the training rows only.
    again = centralized_split(tiny_corpus, seed=7)
    assert np.array_equal(again[0][0], tx)
    assert np.array_equal(again[3].mins, scaler.mins)
    shuffled = centralized_split(tiny_corpus, seed=8)
    assert not np.array_equal(shuffled[0][1], ty)


def test_centralized_run_summary(tiny_corpus):
    result = run_experiment(tiny_corpus, "centralized", "fedavg",
                            fed_cfg=small_fed_cfg(), fed_train=FAST_FED,
                            central_train=FAST_CENTRAL, seed=13)
    assert result.aggregator == "none"
    assert len(result.reports) == 1
    assert set(result.summary) >= {"train_macro_f1", "val_macro_f1",
                                   "test_macro_f1", "epochs_run"}
    assert 0.0 <= result.summary["test_macro_f1"] <= 1.0
    assert result.reports[0].system_f1 == result.summary["test_macro_f1"]
