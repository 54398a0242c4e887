"""Command-line front end.

Verbs:

* ``generate``  — write the synthetic corpus CSV plus a JSON manifest;
* ``run``       — execute one scenario over the corpus and write per-round
  reports, a summary, and model checkpoints;
* ``compare``   — stability statistics and pairwise ratios across report
  CSVs over a round window;
* ``importance``— permutation feature importance of a checkpointed model
  on the centralized test split.

On failure every verb exits nonzero after printing a single line of the
form ``fedflow: error [category]: message`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys

from .config import ConfigError, EvalConfig, ExperimentConfig, load_config
from .features import build_schema
from .fed import (
    AGGREGATORS,
    SCENARIO_CENTRALIZED,
    SCENARIOS,
    ExperimentResult,
    FeaturizedCorpus,
    centralized_split,
    read_report,
    run_experiment,
    write_report,
)
from .flows import FlowFormatError, load_flows, write_flows
from .metrics import permutation_importance, stability, write_importance_report
from .nn import load_checkpoint, save_checkpoint
from .rng import derive_seed
from .synth import generate


class CliError(Exception):
    """User-facing failure with a machine-readable category."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise CliError("usage", message)


def _load_config(args) -> ExperimentConfig:
    try:
        return load_config(args.config)
    except ConfigError as exc:
        raise CliError("config", str(exc)) from None


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seed


def _out_dir(args, cfg: ExperimentConfig) -> str:
    out = args.out if args.out else cfg.io.out_dir
    os.makedirs(out, exist_ok=True)
    return out


def _load_corpus(cfg: ExperimentConfig) -> FeaturizedCorpus:
    if not os.path.exists(cfg.io.corpus):
        raise CliError(
            "corpus",
            f"corpus file {cfg.io.corpus!r} not found; run `fedflow generate` first",
        )
    try:
        flows = load_flows(cfg.io.corpus)
        return FeaturizedCorpus.from_flows(
            flows,
            build_schema(cfg.max_packets),
            n_clients=cfg.gen.n_clients,
            n_rounds=cfg.gen.n_rounds,
            round_seconds=cfg.gen.round_seconds,
        )
    except (FlowFormatError, ValueError) as exc:
        raise CliError("corpus", str(exc)) from None


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    gen_cfg = dataclasses.replace(cfg.gen, seed=seed)
    flows = generate(gen_cfg)
    corpus_dir = os.path.dirname(cfg.io.corpus)
    if corpus_dir:
        os.makedirs(corpus_dir, exist_ok=True)
    try:
        write_flows(cfg.io.corpus, flows)
    except OSError as exc:
        raise CliError("io", f"cannot write corpus: {exc}") from None

    per_client = [0] * gen_cfg.n_clients
    per_round = [0] * gen_cfg.n_rounds
    for flow in flows:
        per_client[flow.client_id] += 1
        per_round[int(flow.start_time // gen_cfg.round_seconds)] += 1
    manifest = {
        "seed": seed,
        "n_clients": gen_cfg.n_clients,
        "n_rounds": gen_cfg.n_rounds,
        "flow_count": len(flows),
        "per_client_counts": per_client,
        "per_round_counts": per_round,
    }
    with open(cfg.io.corpus + ".manifest.json", "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"wrote {len(flows)} flows to {cfg.io.corpus}")
    return 0


def _summary(result: ExperimentResult, evaluation: EvalConfig) -> dict:
    summary = {
        "scenario": result.scenario,
        "aggregator": result.aggregator,
        "seed": result.seed,
        "input_dim": result.input_dim,
        "rounds": len(result.reports),
    }
    summary.update(result.summary)
    if result.scenario != SCENARIO_CENTRALIZED:
        series = result.f1_series()
        start = min(evaluation.window_start, len(series) - 1)
        stop = min(evaluation.window_stop, len(series))
        try:
            stats = stability(series, start, stop)
            summary["stability"] = {
                "window_start": start,
                "window_stop": stop,
                "mean": stats.mean,
                "std": stats.std,
                "min": stats.min,
                "rounds_evaluated": stats.n_rounds,
            }
        except ValueError:
            summary["stability"] = None
        finite = [v for v in series if math.isfinite(v)]
        summary["overall_mean_f1"] = sum(finite) / len(finite) if finite else None
    return summary


def cmd_run(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    if args.scenario not in SCENARIOS:
        raise CliError(
            "scenario",
            f"unknown scenario {args.scenario!r}; valid: {', '.join(SCENARIOS)}",
        )
    aggregator = args.aggregator if args.aggregator else cfg.aggregator
    if args.scenario == SCENARIO_CENTRALIZED:
        aggregator = "none"
    elif aggregator not in AGGREGATORS:
        raise CliError(
            "aggregator",
            f"unknown aggregator {aggregator!r}; valid: {', '.join(AGGREGATORS)}",
        )
    corpus = _load_corpus(cfg)
    out = _out_dir(args, cfg)
    tag = f"{args.scenario}_{aggregator}"

    every = cfg.io.checkpoint_every
    on_round = None
    if every > 0:
        def on_round(round_index, params):
            if (round_index + 1) % every == 0:
                save_checkpoint(
                    os.path.join(out, f"checkpoint_{tag}_r{round_index:04d}.ckpt"),
                    params,
                )

    result = run_experiment(
        corpus,
        args.scenario,
        aggregator,
        fed_cfg=cfg.fed,
        fed_train=cfg.train_federated,
        central_train=cfg.train_centralized,
        seed=seed,
        workers=args.workers,
        on_round=on_round,
    )

    report_path = os.path.join(out, f"rounds_{tag}.csv")
    write_report(report_path, result)
    save_checkpoint(os.path.join(out, f"checkpoint_{tag}.ckpt"), result.final_params)
    summary = _summary(result, cfg.evaluation)
    with open(os.path.join(out, f"summary_{tag}.json"), "w") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write("\n")
    print(f"wrote {report_path}")
    return 0


def _parse_window(raw: str) -> tuple[int, int]:
    try:
        start_text, stop_text = raw.split(":")
        start, stop = int(start_text), int(stop_text)
    except ValueError:
        raise CliError("usage", f"--window must be START:STOP, got {raw!r}") from None
    if not 0 <= start < stop:
        raise CliError("usage", "--window requires 0 <= start < stop")
    return start, stop


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise CliError("usage", "compare requires at least 2 report paths")
    cfg = _load_config(args)
    if args.window:
        start, stop = _parse_window(args.window)
    else:
        start, stop = cfg.evaluation.window_start, cfg.evaluation.window_stop
    out = _out_dir(args, cfg)

    rows = []
    for path in args.reports:
        try:
            series = read_report(path)
        except (OSError, ValueError) as exc:
            raise CliError("report", str(exc)) from None
        if series.scenario == SCENARIO_CENTRALIZED and len(series.f1_by_round) == 1:
            # A centralized report is a single round; treat its score as
            # constant across the window for gap comparisons.
            values = [next(iter(series.f1_by_round.values()))] * (stop - start)
        else:
            missing = [r for r in range(start, stop) if r not in series.f1_by_round]
            if missing:
                raise CliError(
                    "window",
                    f"{path}: rounds {missing[0]}..{missing[-1]} absent from report; "
                    f"window [{start}, {stop}) incompatible",
                )
            values = [series.f1_by_round[r] for r in range(start, stop)]
        try:
            stats = stability(values, 0, len(values))
        except ValueError:
            raise CliError(
                "window", f"{path}: no evaluated rounds inside window [{start}, {stop})"
            ) from None
        rows.append((path, series.scenario, series.aggregator, stats))

    def fmt(x: float) -> str:
        if math.isinf(x):
            return "inf"
        return f"{x:.6f}" if math.isfinite(x) else "nan"

    pair_rows = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            path_a, scen_a, agg_a, a = rows[i]
            path_b, scen_b, agg_b, b = rows[j]
            if a.std == b.std:
                ratio = 1.0
            elif b.std == 0:
                ratio = math.inf
            else:
                ratio = a.std / b.std
            pair_rows.append(
                [
                    path_a, path_b, scen_a, agg_a, scen_b, agg_b,
                    fmt(a.mean), fmt(a.std), fmt(a.min),
                    fmt(b.mean), fmt(b.std), fmt(b.min),
                    fmt(ratio), fmt(a.mean - b.mean),
                ]
            )

    header = [
        "report_a", "report_b", "scenario_a", "aggregator_a", "scenario_b",
        "aggregator_b", "mean_a", "std_a", "min_a", "mean_b", "std_b",
        "min_b", "std_ratio", "mean_gap",
    ]
    compare_path = os.path.join(out, "compare.csv")
    with open(compare_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(pair_rows)

    print(f"window [{start}, {stop})")
    for path, scenario, aggregator, stats in rows:
        print(
            f"{path} ({scenario}/{aggregator}): mean={stats.mean:.6f} "
            f"std={stats.std:.6f} min={stats.min:.6f}"
        )
    for row in pair_rows:
        print(f"{row[0]} vs {row[1]}: std_ratio={row[12]} mean_gap={row[13]}")
    return 0


def cmd_importance(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    corpus = _load_corpus(cfg)
    out = _out_dir(args, cfg)
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise CliError("checkpoint", str(exc)) from None
    schema = corpus.schema
    if params.input_dim != schema.dimension:
        raise CliError(
            "checkpoint",
            f"checkpoint input dim {params.input_dim} does not match "
            f"schema dimension {schema.dimension}",
        )
    _, _, (test_x, test_y), _ = centralized_split(corpus, seed)
    try:
        ranking = permutation_importance(
            params, test_x, test_y, schema,
            repeats=cfg.evaluation.importance_repeats,
            seed=derive_seed(seed, "importance"),
            max_samples=cfg.evaluation.importance_max_samples,
        )
    except ValueError as exc:
        raise CliError("report", str(exc)) from None
    path = os.path.join(out, "importance.csv")
    write_importance_report(path, ranking)
    for name, drop in ranking[:10]:
        print(f"{name}: {drop:.6f}")
    print(f"wrote {path}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", default=None, help="INI config path (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory override")
        if workers:
            p.add_argument("--workers", type=int, default=1,
                           help="max parallel client trainers")

    p_gen = sub.add_parser("generate", help="write the synthetic corpus")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run one scenario over the corpus")
    common(p_run, workers=True)
    p_run.add_argument("--scenario", required=True,
                       help=f"one of: {', '.join(SCENARIOS)}")
    p_run.add_argument("--aggregator", default=None,
                       help=f"one of: {', '.join(AGGREGATORS)} (config default if omitted)")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare report CSVs over a window")
    common(p_cmp)
    p_cmp.add_argument("reports", nargs="+", help="round-report CSV paths")
    p_cmp.add_argument("--window", default=None, help="round window START:STOP")
    p_cmp.set_defaults(func=cmd_compare)

    p_imp = sub.add_parser("importance", help="permutation feature importance")
    common(p_imp)
    p_imp.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p_imp.set_defaults(func=cmd_importance)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"fedflow: error [{exc.category}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
