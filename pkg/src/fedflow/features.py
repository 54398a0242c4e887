"""Fixed-width feature vectors from flow records.

The schema disaggregates the initial-packet metadata by direction and adds
per-direction statistics, whole-flow statistics, and base flow counters.
For a packet window of K packets the layout is, in order:

* ``PS_1..PS_K``, ``IAT_1..IAT_K`` — bidirectional size and inter-arrival
  sequences (2K);
* ``DIR_1..DIR_K`` — direction flags, F→0 and B→1 (K);
* ``SRC_PS_1..K``, ``DST_PS_1..K``, ``SRC_IAT_1..K``, ``DST_IAT_1..K`` —
  per-direction sequences, zero-padded past that direction's count (4K);
* 16 per-direction statistics {mean, std, min, max} over sizes and IATs;
* 8 whole-flow statistics {mean, std, min, max} over sizes and IATs;
* 9 base fields: duration, whole-flow packet and byte totals per direction,
  packet counts within the window (total and per direction), and the
  forward share of whole-flow bytes.

Total dimension N = 7K + 33 (243 for the default K = 30).  SRC denotes the
client-to-server direction, DST the server-to-client direction.
Statistics are computed over populated entries only; a direction with no
packets yields all-zero statistics; std is population std, defined for a
single sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .flows import DIR_BWD, MAX_PACKETS, FlowRecord, ServiceLabel, round_of

_STAT_SUFFIXES = ("MEAN", "STD", "MIN", "MAX")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names for a packet window of ``max_packets``."""

    max_packets: int
    names: tuple[str, ...]

    @property
    def dimension(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None


@dataclass(frozen=True)
class FeatureVector:
    """One flow's feature values plus its provenance."""

    values: np.ndarray
    label: ServiceLabel
    client_id: int
    round_index: int


@dataclass(frozen=True)
class Scaler:
    """Per-feature min/max bounds fitted on a reference population."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self) -> None:
        if self.mins.shape != self.maxs.shape or self.mins.ndim != 1:
            raise ValueError("scaler bounds must be 1-d arrays of equal length")
        if np.any(self.mins > self.maxs):
            raise ValueError("scaler requires min <= max per feature")


def build_schema(max_packets: int = MAX_PACKETS) -> FeatureSchema:
    """Build the feature schema for a window of ``max_packets`` packets."""
    if not 1 <= max_packets <= MAX_PACKETS:
        raise ValueError(f"max_packets must be in 1..{MAX_PACKETS}")
    k = max_packets
    names: list[str] = []
    names += [f"PS_{i}" for i in range(1, k + 1)]
    names += [f"IAT_{i}" for i in range(1, k + 1)]
    names += [f"DIR_{i}" for i in range(1, k + 1)]
    for prefix in ("SRC_PS", "DST_PS", "SRC_IAT", "DST_IAT"):
        names += [f"{prefix}_{i}" for i in range(1, k + 1)]
    for prefix in ("SRC_PS", "DST_PS", "SRC_IAT", "DST_IAT"):
        names += [f"{prefix}_{s}" for s in _STAT_SUFFIXES]
    for prefix in ("PS", "IAT"):
        names += [f"{prefix}_{s}" for s in _STAT_SUFFIXES]
    names += [
        "DURATION",
        "TOTAL_PACKETS_FWD",
        "TOTAL_PACKETS_BWD",
        "TOTAL_BYTES_FWD",
        "TOTAL_BYTES_BWD",
        "PPI_PACKET_COUNT",
        "SRC_PACKET_COUNT",
        "DST_PACKET_COUNT",
        "BYTES_RATIO",
    ]
    return FeatureSchema(max_packets=k, names=tuple(names))


def _stats4(values: np.ndarray) -> tuple[float, float, float, float]:
    # Population stats over populated entries; empty -> all zeros.
    if values.size == 0:
        return 0.0, 0.0, 0.0, 0.0
    return (
        float(values.mean()),
        float(values.std()),
        float(values.min()),
        float(values.max()),
    )


def extract_values(flow: FlowRecord, schema: FeatureSchema) -> np.ndarray:
    """Raw (unscaled) feature values for one flow."""
    k = schema.max_packets
    packets = flow.packets[:k]
    n = len(packets)
    sizes = np.array([p.size for p in packets], dtype=float)
    iats = np.array([p.inter_arrival for p in packets], dtype=float)
    is_dst = np.array([p.direction == DIR_BWD for p in packets], dtype=bool)

    v = np.zeros(schema.dimension)
    v[0:n] = sizes
    v[k : k + n] = iats
    v[2 * k : 2 * k + n] = is_dst.astype(float)

    src_sizes, dst_sizes = sizes[~is_dst], sizes[is_dst]
    src_iats, dst_iats = iats[~is_dst], iats[is_dst]
    offset = 3 * k
    for seq in (src_sizes, dst_sizes, src_iats, dst_iats):
        v[offset : offset + seq.size] = seq
        offset += k
    for seq in (src_sizes, dst_sizes, src_iats, dst_iats, sizes, iats):
        v[offset : offset + 4] = _stats4(seq)
        offset += 4

    total_bytes = flow.total_bytes_fwd + flow.total_bytes_bwd
    ratio = flow.total_bytes_fwd / total_bytes if total_bytes > 0 else 0.0
    v[offset : offset + 9] = (
        flow.duration,
        flow.total_packets_fwd,
        flow.total_packets_bwd,
        flow.total_bytes_fwd,
        flow.total_bytes_bwd,
        n,
        int((~is_dst).sum()),
        int(is_dst.sum()),
        ratio,
    )
    return v


def extract(flow: FlowRecord, schema: FeatureSchema,
            round_seconds: float = 10800.0) -> FeatureVector:
    """Extract one flow into a raw FeatureVector (pure, unscaled)."""
    return FeatureVector(
        values=extract_values(flow, schema),
        label=flow.label,
        client_id=flow.client_id,
        round_index=round_of(flow, round_seconds),
    )


def fit_scaler(vectors) -> Scaler:
    """Fit per-feature min/max bounds.

    Accepts a list of FeatureVector or a 2-d array of raw values.
    """
    if isinstance(vectors, np.ndarray):
        matrix = vectors
    else:
        matrix = np.array([fv.values for fv in vectors])
    if matrix.size == 0:
        raise ValueError("cannot fit a scaler on an empty population")
    return Scaler(mins=matrix.min(axis=0), maxs=matrix.max(axis=0))


def scale_matrix(matrix: np.ndarray, scaler: Scaler) -> np.ndarray:
    """Min-max scale rows into [0,1], clamping out-of-range values.

    Degenerate features (min = max at fit time) map to 0.
    """
    if matrix.shape[-1] != scaler.mins.shape[0]:
        raise ValueError(
            f"dimension mismatch: data has {matrix.shape[-1]} features, "
            f"scaler has {scaler.mins.shape[0]}"
        )
    span = scaler.maxs - scaler.mins
    degenerate = span == 0
    safe_span = np.where(degenerate, 1.0, span)
    scaled = np.clip((matrix - scaler.mins) / safe_span, 0.0, 1.0)
    if scaled.ndim == 1:
        scaled[degenerate] = 0.0
    else:
        scaled[:, degenerate] = 0.0
    return scaled


def apply_scaler(vector: FeatureVector, scaler: Scaler) -> FeatureVector:
    """Return a scaled copy of one FeatureVector."""
    return FeatureVector(
        values=scale_matrix(vector.values, scaler),
        label=vector.label,
        client_id=vector.client_id,
        round_index=vector.round_index,
    )


def write_feature_matrix(path: str, matrix: np.ndarray, labels: np.ndarray,
                         schema: FeatureSchema) -> None:
    """Dump a feature matrix as CSV: schema names as header, label last."""
    if matrix.shape[0] != len(labels):
        raise ValueError("matrix and labels must have equal row counts")
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(schema.names) + ["label"])
        for row, label in zip(matrix, labels):
            writer.writerow([repr(float(x)) for x in row] + [int(label)])
