"""Federated round engine.

Runs the synchronous loop broadcast -> ingest -> local train -> aggregate
-> evaluate over a round-partitioned corpus, under two client data
strategies:

* unbuffered: each round a client trains on exactly the flows that arrived
  in that round (70/10/20 split), then discards them;
* buffered: arrivals are routed into bounded FIFO train/val/test buffers
  and the client trains on full buffer snapshots once its training buffer
  has filled, decoupling training-set size from arrival volume.

Aggregation is sample-weighted averaging (FedAvg, also used by FedProx,
whose proximal term acts client-side) or a server-side adaptive step on
the averaged client delta (FedAdagrad / FedYogi / FedAdam).  All client
and server randomness derives from the experiment seed via named
substreams, so runs are bit-reproducible for any worker count.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .features import (
    FeatureSchema,
    FeatureVector,
    Scaler,
    extract_values,
    fit_scaler,
    scale_matrix,
)
from .flows import FlowRecord, partition_by_round
from .metrics import confusion_matrix, macro_f1
from .nn import (
    ModelParams,
    TrainConfig,
    TrainingDiverged,
    fresh_train_config,
    init_params,
    predict,
    train_local,
)
from .rng import derive_seed, substream

logger = logging.getLogger(__name__)

SCENARIO_CENTRALIZED = "centralized"
SCENARIO_UNBUFFERED = "fed-unbuffered"
SCENARIO_BUFFERED = "fed-buffered"
SCENARIOS = (SCENARIO_CENTRALIZED, SCENARIO_UNBUFFERED, SCENARIO_BUFFERED)

AGG_FEDAVG = "fedavg"
AGG_FEDPROX = "fedprox"
AGG_FEDADAGRAD = "fedadagrad"
AGG_FEDYOGI = "fedyogi"
AGG_FEDADAM = "fedadam"
AGGREGATORS = (AGG_FEDAVG, AGG_FEDPROX, AGG_FEDADAGRAD, AGG_FEDYOGI, AGG_FEDADAM)
_ADAPTIVE = (AGG_FEDADAGRAD, AGG_FEDYOGI, AGG_FEDADAM)

TRAIN_SHARE = 0.7
VAL_SHARE = 0.1


@dataclass
class FedConfig:
    """Federation-level settings shared by all scenarios."""

    prox_mu: float = 0.01
    server_eta: float = 0.01
    server_beta1: float = 0.9
    server_beta2: float = 0.99
    server_tau: float = 1e-3
    train_capacity: int = 6400
    val_capacity: int = 914
    test_capacity: int = 1828
    min_val_for_early_stop: int = 64

    def __post_init__(self) -> None:
        if min(self.train_capacity, self.val_capacity, self.test_capacity) < 1:
            raise ValueError("buffer capacities must be positive")
        if self.server_tau <= 0:
            raise ValueError("server_tau must be > 0")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")


class FifoBuffer:
    """Bounded FIFO of feature vectors; pushing past capacity evicts the
    oldest entries."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque = deque(maxlen=capacity)

    def push(self, items) -> None:
        self._entries.extend(items)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.capacity

    def snapshot(self) -> list:
        """Entries oldest-first."""
        return list(self._entries)


@dataclass
class ClientState:
    client_id: int
    train_buf: FifoBuffer
    val_buf: FifoBuffer
    test_buf: FifoBuffer
    scaler: Scaler | None = None

    @classmethod
    def fresh(cls, client_id: int, cfg: FedConfig) -> "ClientState":
        return cls(
            client_id=client_id,
            train_buf=FifoBuffer(cfg.train_capacity),
            val_buf=FifoBuffer(cfg.val_capacity),
            test_buf=FifoBuffer(cfg.test_capacity),
        )


_EMPTY_SET = (np.zeros((0, 0)), np.zeros(0, dtype=int))


def _as_sets(vectors: list[FeatureVector], dim: int):
    if not vectors:
        return np.zeros((0, dim)), np.zeros(0, dtype=int)
    x = np.array([fv.values for fv in vectors])
    y = np.array([int(fv.label) for fv in vectors], dtype=int)
    return x, y


@dataclass
class IngestResult:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    ready: bool


def ingest_round(client: ClientState, new_vectors: list[FeatureVector],
                 strategy: str, rng: np.random.Generator,
                 cfg: FedConfig, dim: int) -> IngestResult:
    """Feed one round of scaled arrivals through the client's data strategy.

    Unbuffered: shuffle the arrivals, split 70/10/20 by count (train =
    floor(0.7 n), val = floor(0.1 n), test = remainder); the sets live for
    this round only; ready requires >= 2 training rows.

    Buffered: route each arrival to train/val/test with probability
    0.7/0.1/0.2 and push into the FIFO buffers; the returned sets are full
    buffer snapshots and ready means the training buffer is at capacity.
    The validation set is withheld until it reaches the early-stop minimum.
    """
    if strategy == SCENARIO_UNBUFFERED:
        n = len(new_vectors)
        order = rng.permutation(n)
        n_train = int(TRAIN_SHARE * n)
        n_val = int(VAL_SHARE * n)
        train = [new_vectors[i] for i in order[:n_train]]
        val = [new_vectors[i] for i in order[n_train : n_train + n_val]]
        test = [new_vectors[i] for i in order[n_train + n_val :]]
        return IngestResult(
            *_as_sets(train, dim), *_as_sets(val, dim), *_as_sets(test, dim),
            ready=n_train >= 2,
        )
    if strategy == SCENARIO_BUFFERED:
        for fv in new_vectors:
            u = rng.random()
            if u < TRAIN_SHARE:
                client.train_buf.push([fv])
            elif u < TRAIN_SHARE + VAL_SHARE:
                client.val_buf.push([fv])
            else:
                client.test_buf.push([fv])
        val_vectors = (
            client.val_buf.snapshot()
            if len(client.val_buf) >= cfg.min_val_for_early_stop
            else []
        )
        return IngestResult(
            *_as_sets(client.train_buf.snapshot(), dim),
            *_as_sets(val_vectors, dim),
            *_as_sets(client.test_buf.snapshot(), dim),
            ready=client.train_buf.full,
        )
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class ClientUpdate:
    client_id: int
    participated: bool
    n_train: int = 0
    n_test: int = 0
    params: ModelParams | None = None
    train_loss: float = math.nan
    val_loss: float = math.nan
    epochs_run: int = 0
    failure: str | None = None


def local_round(client_id: int, global_params: ModelParams,
                train_x, train_y, val_x, val_y,
                cfg: TrainConfig, prox_mu: float = 0.0) -> ClientUpdate:
    """Train a copy of the global model on one client's round data.

    Training divergence is not fatal: it yields a non-participating update
    with the reason recorded.
    """
    try:
        result = train_local(
            global_params, train_x, train_y, val_x, val_y, cfg,
            prox_mu=prox_mu, prox_ref=global_params if prox_mu > 0 else None,
        )
    except TrainingDiverged as exc:
        return ClientUpdate(client_id=client_id, participated=False, failure=str(exc))
    return ClientUpdate(
        client_id=client_id,
        participated=True,
        n_train=len(train_y),
        params=result.params,
        train_loss=result.train_loss,
        val_loss=result.val_loss,
        epochs_run=result.epochs_run,
    )


def _participants(updates: list[ClientUpdate], global_params: ModelParams):
    parts = sorted(
        (u for u in updates if u.participated), key=lambda u: u.client_id
    )
    if not parts:
        raise ValueError("aggregation requires at least one participating update")
    signature = global_params.shape_signature()
    for u in parts:
        if u.params.shape_signature() != signature:
            raise ValueError(f"client {u.client_id} params shape mismatch")
    total = sum(u.n_train for u in parts)
    if total <= 0:
        raise ValueError("participating updates carry no training samples")
    return parts, total


def aggregate_fedavg(updates: list[ClientUpdate],
                     global_params: ModelParams) -> ModelParams:
    """Sample-weighted average of every tensor, running stats included."""
    parts, total = _participants(updates, global_params)
    out = {name: np.zeros_like(t) for name, t in global_params.tensors.items()}
    for u in parts:
        weight = u.n_train / total
        for name, tensor in u.params.tensors.items():
            out[name] += weight * tensor
    return ModelParams(global_params.input_dim, out)


@dataclass
class ServerState:
    """Adaptive server-optimizer state for the FedOpt aggregators."""

    kind: str
    eta: float
    beta1: float
    beta2: float
    tau: float
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, kind: str, global_params: ModelParams, cfg: FedConfig) -> "ServerState":
        trainable = global_params.trainable_names
        return cls(
            kind=kind,
            eta=cfg.server_eta,
            beta1=cfg.server_beta1,
            beta2=cfg.server_beta2,
            tau=cfg.server_tau,
            m={n: np.zeros_like(global_params.tensors[n]) for n in trainable},
            v={n: np.zeros_like(global_params.tensors[n]) for n in trainable},
        )


def aggregate_adaptive(updates: list[ClientUpdate], global_params: ModelParams,
                       server: ServerState) -> ModelParams:
    """Server-side adaptive step on the weighted mean client delta.

    Trainable tensors follow m/v recursions with no bias correction (the
    usual server-side formulation); batch-norm running statistics bypass
    the optimizer and are averaged like FedAvg.
    """
    parts, total = _participants(updates, global_params)
    g = global_params.tensors
    delta = {n: np.zeros_like(g[n]) for n in server.m}
    stats = {
        n: np.zeros_like(g[n]) for n in g if n not in server.m
    }
    for u in parts:
        weight = u.n_train / total
        for name in delta:
            delta[name] += weight * (u.params.tensors[name] - g[name])
        for name in stats:
            stats[name] += weight * u.params.tensors[name]

    out = {}
    for name in g:
        if name not in delta:
            out[name] = stats[name]
            continue
        d = delta[name]
        server.m[name] = server.beta1 * server.m[name] + (1.0 - server.beta1) * d
        d2 = d * d
        if server.kind == AGG_FEDADAGRAD:
            server.v[name] = server.v[name] + d2
        elif server.kind == AGG_FEDADAM:
            server.v[name] = server.beta2 * server.v[name] + (1.0 - server.beta2) * d2
        elif server.kind == AGG_FEDYOGI:
            v = server.v[name]
            server.v[name] = v - (1.0 - server.beta2) * d2 * np.sign(v - d2)
        else:
            raise ValueError(f"not an adaptive aggregator: {server.kind}")
        out[name] = g[name] + server.eta * server.m[name] / (
            np.sqrt(server.v[name]) + server.tau
        )
    ordered = {name: out[name] for name in g}
    return ModelParams(global_params.input_dim, ordered)


@dataclass
class FeaturizedCorpus:
    """Raw (unscaled) per-(round, client) feature matrices."""

    schema: FeatureSchema
    n_clients: int
    n_rounds: int
    round_seconds: float
    cells: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_flows(cls, flows: list[FlowRecord], schema: FeatureSchema,
                   n_clients: int, n_rounds: int,
                   round_seconds: float = 10800.0) -> "FeaturizedCorpus":
        """Extract every in-horizon flow; rounds >= n_rounds are dropped."""
        cells: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for r, by_client in partition_by_round(flows, round_seconds).items():
            if r >= n_rounds:
                continue
            for c, flow_list in by_client.items():
                if c >= n_clients:
                    raise ValueError(
                        f"flow client_id {c} outside configured 0..{n_clients - 1}"
                    )
                x = np.array([extract_values(f, schema) for f in flow_list])
                y = np.array([int(f.label) for f in flow_list], dtype=int)
                cells[(r, c)] = (x, y)
        return cls(
            schema=schema,
            n_clients=n_clients,
            n_rounds=n_rounds,
            round_seconds=round_seconds,
            cells=cells,
        )


@dataclass
class ClientEntry:
    client_id: int
    participated: bool
    n_train: int
    n_test: int
    macro_f1: float
    loss: float


@dataclass
class RoundReport:
    round_index: int
    scenario: str
    aggregator: str
    entries: list[ClientEntry]
    n_participants: int
    total_train: int
    total_test: int
    system_f1: float
    mean_loss: float


@dataclass
class ExperimentResult:
    scenario: str
    aggregator: str
    seed: int
    input_dim: int
    reports: list[RoundReport]
    final_params: ModelParams
    summary: dict

    def f1_series(self) -> list[float]:
        """Per-round system macro F1 (nan where no client was evaluated)."""
        return [r.system_f1 for r in self.reports]


def _train_task(payload) -> ClientUpdate:
    (client_id, global_params, train_x, train_y, val_x, val_y, cfg, prox_mu) = payload
    return local_round(
        client_id, global_params, train_x, train_y, val_x, val_y, cfg, prox_mu
    )


def _scale_cell(client: ClientState, corpus: FeaturizedCorpus,
                round_index: int) -> list[FeatureVector]:
    """Scaled FeatureVectors for one client's arrivals this round.

    The client's scaler is fitted on its first non-empty round and frozen.
    """
    cell = corpus.cells.get((round_index, client.client_id))
    if cell is None:
        return []
    x_raw, y = cell
    if client.scaler is None:
        client.scaler = fit_scaler(x_raw)
    x = scale_matrix(x_raw, client.scaler)
    return [
        FeatureVector(x[i], y[i], client.client_id, round_index)
        for i in range(len(y))
    ]


def _client_entry(update: ClientUpdate, n_test: int, f1: float) -> ClientEntry:
    return ClientEntry(
        client_id=update.client_id,
        participated=update.participated,
        n_train=update.n_train,
        n_test=n_test,
        macro_f1=f1,
        loss=update.train_loss,
    )


def _run_federated(corpus: FeaturizedCorpus, scenario: str, aggregator: str,
                   fed_cfg: FedConfig, fed_train: TrainConfig, seed: int,
                   workers: int, on_round) -> ExperimentResult:
    dim = corpus.schema.dimension
    global_params = init_params(dim, derive_seed(seed, "init"))
    server = (
        ServerState.fresh(aggregator, global_params, fed_cfg)
        if aggregator in _ADAPTIVE
        else None
    )
    prox_mu = fed_cfg.prox_mu if aggregator == AGG_FEDPROX else 0.0
    clients = [ClientState.fresh(c, fed_cfg) for c in range(corpus.n_clients)]

    pool = None
    if workers > 1:
        pool = get_context("fork").Pool(workers)
    reports: list[RoundReport] = []
    try:
        for r in range(corpus.n_rounds):
            ingests: dict[int, IngestResult] = {}
            for client in clients:
                vectors = _scale_cell(client, corpus, r)
                ingests[client.client_id] = ingest_round(
                    client, vectors, scenario,
                    substream(seed, "ingest", client.client_id, r),
                    fed_cfg, dim,
                )

            payloads = []
            for client in clients:
                ing = ingests[client.client_id]
                if not ing.ready:
                    continue
                cfg = fresh_train_config(
                    fed_train, derive_seed(seed, "train", client.client_id, r)
                )
                payloads.append(
                    (client.client_id, global_params, ing.train_x, ing.train_y,
                     ing.val_x, ing.val_y, cfg, prox_mu)
                )
            if pool is not None:
                trained = pool.map(_train_task, payloads, chunksize=1)
            else:
                trained = [_train_task(p) for p in payloads]

            updates = {u.client_id: u for u in trained}
            for client in clients:
                if client.client_id not in updates:
                    updates[client.client_id] = ClientUpdate(
                        client_id=client.client_id, participated=False
                    )
            for u in updates.values():
                if u.failure:
                    logger.warning(
                        "round %d client %d dropped: %s", r, u.client_id, u.failure
                    )

            participants = [u for u in updates.values() if u.participated]
            stalled = not participants
            if not stalled:
                if aggregator in _ADAPTIVE:
                    global_params = aggregate_adaptive(
                        participants, global_params, server
                    )
                else:
                    global_params = aggregate_fedavg(participants, global_params)

            # Evaluate the freshly aggregated model on participants' test sets.
            entries = []
            weighted_f1 = 0.0
            weighted_loss = 0.0
            total_test = 0
            total_train = 0
            for client in clients:
                u = updates[client.client_id]
                ing = ingests[client.client_id]
                n_test = len(ing.test_y) if u.participated else 0
                f1 = math.nan
                if u.participated and n_test >= 1:
                    cm = confusion_matrix(ing.test_y, predict(global_params, ing.test_x))
                    f1 = macro_f1(cm)
                    weighted_f1 += f1 * n_test
                    total_test += n_test
                if u.participated:
                    total_train += u.n_train
                    weighted_loss += u.train_loss * u.n_train
                entries.append(_client_entry(u, n_test if u.participated else 0, f1))

            system_f1 = weighted_f1 / total_test if total_test else math.nan
            mean_loss = weighted_loss / total_train if total_train else math.nan
            reports.append(
                RoundReport(
                    round_index=r,
                    scenario=scenario,
                    aggregator=aggregator,
                    entries=entries,
                    n_participants=len(participants),
                    total_train=total_train,
                    total_test=total_test,
                    system_f1=system_f1,
                    mean_loss=mean_loss,
                )
            )
            if on_round is not None:
                on_round(r, global_params)
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    return ExperimentResult(
        scenario=scenario,
        aggregator=aggregator,
        seed=seed,
        input_dim=dim,
        reports=reports,
        final_params=global_params,
        summary={},
    )


def centralized_split(corpus: FeaturizedCorpus, seed: int):
    """Pooled 70/10/20 split used by the centralized scenario.

    Rows are pooled over cells in (round, client) order, permuted by the
    seeded "split" stream, and min-max scaled with bounds fitted on the
    training rows.  Returns ((train_x, train_y), (val_x, val_y),
    (test_x, test_y), scaler).
    """
    keys = sorted(corpus.cells)
    if not keys:
        raise ValueError("corpus contains no flows")
    x_all = np.concatenate([corpus.cells[k][0] for k in keys])
    y_all = np.concatenate([corpus.cells[k][1] for k in keys])
    n = len(y_all)
    order = substream(seed, "split").permutation(n)
    n_train = int(TRAIN_SHARE * n)
    n_val = int(VAL_SHARE * n)
    idx_train = order[:n_train]
    idx_val = order[n_train : n_train + n_val]
    idx_test = order[n_train + n_val :]
    scaler = fit_scaler(x_all[idx_train])
    sets = [
        (scale_matrix(x_all[idx], scaler), y_all[idx])
        for idx in (idx_train, idx_val, idx_test)
    ]
    return sets[0], sets[1], sets[2], scaler


def _run_centralized(corpus: FeaturizedCorpus, central_train: TrainConfig,
                     seed: int, on_round) -> ExperimentResult:
    (train_x, train_y), (val_x, val_y), (test_x, test_y), _ = centralized_split(
        corpus, seed
    )
    dim = corpus.schema.dimension
    params = init_params(dim, derive_seed(seed, "init"))
    cfg = fresh_train_config(central_train, derive_seed(seed, "train", "centralized"))
    result = train_local(params, train_x, train_y, val_x, val_y, cfg)

    def split_f1(x, y):
        if len(y) == 0:
            return math.nan
        return macro_f1(confusion_matrix(y, predict(result.params, x)))

    f1_train = split_f1(train_x, train_y)
    f1_val = split_f1(val_x, val_y)
    f1_test = split_f1(test_x, test_y)
    report = RoundReport(
        round_index=0,
        scenario=SCENARIO_CENTRALIZED,
        aggregator="none",
        entries=[],
        n_participants=1,
        total_train=len(train_y),
        total_test=len(test_y),
        system_f1=f1_test,
        mean_loss=result.train_loss,
    )
    if on_round is not None:
        on_round(0, result.params)
    return ExperimentResult(
        scenario=SCENARIO_CENTRALIZED,
        aggregator="none",
        seed=seed,
        input_dim=dim,
        reports=[report],
        final_params=result.params,
        summary={
            "train_macro_f1": f1_train,
            "val_macro_f1": f1_val,
            "test_macro_f1": f1_test,
            "epochs_run": result.epochs_run,
        },
    )


def run_experiment(corpus: FeaturizedCorpus, scenario: str, aggregator: str,
                   fed_cfg: FedConfig, fed_train: TrainConfig,
                   central_train: TrainConfig, seed: int, workers: int = 1,
                   on_round=None) -> ExperimentResult:
    """Run one scenario over the corpus and return per-round reports.

    ``on_round(round_index, global_params)`` is invoked after each round's
    aggregation (once for centralized), letting callers checkpoint.
    """
    if scenario not in SCENARIOS:
        raise ValueError(
            f"unknown scenario {scenario!r}; valid: {', '.join(SCENARIOS)}"
        )
    if scenario != SCENARIO_CENTRALIZED and aggregator not in AGGREGATORS:
        raise ValueError(
            f"unknown aggregator {aggregator!r}; valid: {', '.join(AGGREGATORS)}"
        )
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if scenario == SCENARIO_CENTRALIZED:
        return _run_centralized(corpus, central_train, seed, on_round)
    return _run_federated(
        corpus, scenario, aggregator, fed_cfg, fed_train, seed, workers, on_round
    )


def _fmt(value: float) -> str:
    return f"{value:.6f}" if math.isfinite(value) else "nan"


REPORT_HEADER = [
    "round", "scenario", "aggregator", "client_id", "participated",
    "n_train", "n_test", "macro_f1", "loss",
]


def write_report(path: str, result: ExperimentResult) -> None:
    """Per-round CSV: one row per client plus an aggregate row (client_id
    -1, participated = participant count)."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_HEADER)
        for report in result.reports:
            for e in report.entries:
                writer.writerow([
                    report.round_index, report.scenario, report.aggregator,
                    e.client_id, int(e.participated), e.n_train, e.n_test,
                    _fmt(e.macro_f1), _fmt(e.loss),
                ])
            writer.writerow([
                report.round_index, report.scenario, report.aggregator,
                -1, report.n_participants, report.total_train,
                report.total_test, _fmt(report.system_f1), _fmt(report.mean_loss),
            ])


@dataclass
class ReportSeries:
    """Aggregate rows of a report CSV, as parsed back for comparison."""

    scenario: str
    aggregator: str
    f1_by_round: dict[int, float]


def read_report(path: str) -> ReportSeries:
    """Parse the aggregate rows back out of a report CSV."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise ValueError(f"{path}: not a round-report CSV")
        scenario = aggregator = None
        f1_by_round: dict[int, float] = {}
        for row in reader:
            if scenario is None:
                scenario, aggregator = row[1], row[2]
            if int(row[3]) == -1:
                f1_by_round[int(row[0])] = float(row[7])
    if not f1_by_round:
        raise ValueError(f"{path}: report contains no aggregate rows")
    return ReportSeries(scenario=scenario, aggregator=aggregator, f1_by_round=f1_by_round)
