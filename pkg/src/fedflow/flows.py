"""Flow records and their CSV interchange format.

A flow is one client-observed QUIC connection summarised by whole-flow
counters plus per-packet metadata for at most the first ``MAX_PACKETS``
packets (sizes, inter-arrival times, directions).  Direction ``F`` is
client to server, ``B`` is server to client.

The native CSV layout is one flow per row::

    flow_id,client_id,start_time,duration,
    total_packets_fwd,total_packets_bwd,total_bytes_fwd,total_bytes_bwd,
    label,ps_1..ps_30,iat_1..iat_30,dir_1..dir_30

Packet columns beyond the flow's packet count are left empty.  Floats are
written with ``repr`` so a write/load cycle is bit-exact.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

MAX_PACKETS = 30

DIR_FWD = "F"
DIR_BWD = "B"


class ServiceLabel(enum.IntEnum):
    """Class codes for the seven modelled services."""

    DISCORD = 0
    FACEBOOK_GRAPH = 1
    GOOGLE_WWW = 2
    INSTAGRAM = 3
    SNAPCHAT = 4
    SPOTIFY = 5
    YOUTUBE = 6


LABEL_NAMES = (
    "Discord",
    "FacebookGraph",
    "GoogleWWW",
    "Instagram",
    "Snapchat",
    "Spotify",
    "YouTube",
)

N_CLASSES = len(LABEL_NAMES)

_NAME_TO_LABEL = {name: ServiceLabel(i) for i, name in enumerate(LABEL_NAMES)}


def label_name(label: int) -> str:
    return LABEL_NAMES[int(label)]


def label_from_name(name: str) -> ServiceLabel:
    try:
        return _NAME_TO_LABEL[name]
    except KeyError:
        raise ValueError(
            f"unknown service label {name!r}; valid: {', '.join(LABEL_NAMES)}"
        ) from None


@dataclass(frozen=True, slots=True)
class PacketMeta:
    """One packet inside a flow's initial-packet window.

    ``inter_arrival`` is milliseconds since the previous packet; the first
    packet of a flow carries 0.  ``direction`` is ``F`` or ``B``.
    """

    size: int
    inter_arrival: float
    direction: str


@dataclass(slots=True)
class FlowRecord:
    """One observed flow with whole-flow counters and a packet prefix.

    ``start_time`` is seconds from the start of the observation window and
    places the flow in a collection round.  ``packets`` holds metadata for
    at most the first MAX_PACKETS packets; the whole-flow totals may exceed
    the directional counts within that prefix but never fall below them.
    """

    flow_id: str
    client_id: int
    start_time: float
    duration: float
    total_packets_fwd: int
    total_packets_bwd: int
    total_bytes_fwd: int
    total_bytes_bwd: int
    label: ServiceLabel
    packets: list[PacketMeta] = field(default_factory=list)


def csv_header() -> list[str]:
    cols = [
        "flow_id",
        "client_id",
        "start_time",
        "duration",
        "total_packets_fwd",
        "total_packets_bwd",
        "total_bytes_fwd",
        "total_bytes_bwd",
        "label",
    ]
    for prefix in ("ps", "iat", "dir"):
        cols += [f"{prefix}_{k}" for k in range(1, MAX_PACKETS + 1)]
    return cols


def round_of(flow: FlowRecord, round_seconds: float) -> int:
    """Collection round a flow belongs to: floor(start_time / round_seconds)."""
    if round_seconds <= 0:
        raise ValueError("round_seconds must be positive")
    return int(flow.start_time // round_seconds)


def partition_by_round(
    flows: list[FlowRecord], round_seconds: float
) -> dict[int, dict[int, list[FlowRecord]]]:
    """Bucket flows by (round, client_id), both levels in ascending order.

    Empty buckets are simply absent.  Flow order within a bucket follows the
    input order, so a corpus sorted by start time stays sorted per bucket.
    """
    buckets: dict[int, dict[int, list[FlowRecord]]] = {}
    for flow in flows:
        r = round_of(flow, round_seconds)
        buckets.setdefault(r, {}).setdefault(flow.client_id, []).append(flow)
    return {
        r: {c: by_client[c] for c in sorted(by_client)}
        for r, by_client in sorted(buckets.items())
    }


def write_flows(path: str, flows: list[FlowRecord]) -> None:
    """Write flows to ``path`` in the native CSV layout."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(csv_header())
        for flow in flows:
            row = [
                flow.flow_id,
                flow.client_id,
                repr(float(flow.start_time)),
                repr(float(flow.duration)),
                flow.total_packets_fwd,
                flow.total_packets_bwd,
                flow.total_bytes_fwd,
                flow.total_bytes_bwd,
                label_name(flow.label),
            ]
            pad = MAX_PACKETS - len(flow.packets)
            row += [p.size for p in flow.packets] + [""] * pad
            row += [repr(float(p.inter_arrival)) for p in flow.packets] + [""] * pad
            row += [p.direction for p in flow.packets] + [""] * pad
            writer.writerow(row)


class FlowFormatError(ValueError):
    """Raised when a corpus file violates the native CSV layout."""


def _row_error(row_num: int, message: str) -> FlowFormatError:
    return FlowFormatError(f"row {row_num}: {message}")


def _parse_int(cell: str, row_num: int, col: str, minimum: int = 0) -> int:
    try:
        value = int(cell)
    except ValueError:
        raise _row_error(row_num, f"field {col!r} is not an integer: {cell!r}") from None
    if value < minimum:
        raise _row_error(row_num, f"field {col!r} must be >= {minimum}, got {value}")
    return value


def _parse_float(cell: str, row_num: int, col: str, minimum: float = 0.0) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise _row_error(row_num, f"field {col!r} is not a number: {cell!r}") from None
    if not value >= minimum:
        raise _row_error(row_num, f"field {col!r} must be >= {minimum}, got {cell!r}")
    return value


def load_flows(path: str) -> list[FlowRecord]:
    """Load a corpus written by :func:`write_flows`.

    Raises FlowFormatError naming the first offending row and field.
    """
    expected = csv_header()
    flows: list[FlowRecord] = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != expected:
            raise FlowFormatError(
                f"bad header: expected {len(expected)} columns starting with "
                f"{expected[:3]}, got {header[:3] if header else header}"
            )
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise _row_error(
                    row_num, f"expected {len(expected)} fields, got {len(row)}"
                )
            client_id = _parse_int(row[1], row_num, "client_id")
            start_time = _parse_float(row[2], row_num, "start_time")
            duration = _parse_float(row[3], row_num, "duration")
            tp_fwd = _parse_int(row[4], row_num, "total_packets_fwd")
            tp_bwd = _parse_int(row[5], row_num, "total_packets_bwd")
            tb_fwd = _parse_int(row[6], row_num, "total_bytes_fwd")
            tb_bwd = _parse_int(row[7], row_num, "total_bytes_bwd")
            try:
                label = label_from_name(row[8])
            except ValueError as exc:
                raise _row_error(row_num, str(exc)) from None

            packets: list[PacketMeta] = []
            ended = False
            for k in range(MAX_PACKETS):
                ps_cell = row[9 + k]
                iat_cell = row[9 + MAX_PACKETS + k]
                dir_cell = row[9 + 2 * MAX_PACKETS + k]
                cells = (ps_cell, iat_cell, dir_cell)
                if all(c == "" for c in cells):
                    ended = True
                    continue
                if any(c == "" for c in cells):
                    raise _row_error(
                        row_num, f"packet {k + 1}: ps/iat/dir cells must be all set or all empty"
                    )
                if ended:
                    raise _row_error(
                        row_num, f"packet {k + 1}: gap in packet columns"
                    )
                size = _parse_int(ps_cell, row_num, f"ps_{k + 1}", minimum=1)
                iat = _parse_float(iat_cell, row_num, f"iat_{k + 1}")
                if dir_cell not in (DIR_FWD, DIR_BWD):
                    raise _row_error(
                        row_num,
                        f"field 'dir_{k + 1}' must be {DIR_FWD!r} or {DIR_BWD!r}, got {dir_cell!r}",
                    )
                packets.append(PacketMeta(size, iat, dir_cell))
            if not packets:
                raise _row_error(row_num, "flow has no packets")
            n_fwd = sum(1 for p in packets if p.direction == DIR_FWD)
            n_bwd = len(packets) - n_fwd
            if tp_fwd < n_fwd or tp_bwd < n_bwd:
                raise _row_error(
                    row_num,
                    "whole-flow packet totals fall below directional counts in the packet columns",
                )
            flows.append(
                FlowRecord(
                    flow_id=row[0],
                    client_id=client_id,
                    start_time=start_time,
                    duration=duration,
                    total_packets_fwd=tp_fwd,
                    total_packets_bwd=tp_bwd,
                    total_bytes_fwd=tb_fwd,
                    total_bytes_bwd=tb_bwd,
                    label=label,
                    packets=packets,
                )
            )
    return flows
