"""Command-line entry point: ingest, synth, train, explain, oracle-check.

Every command reads one JSON run config (``--config``), applies ``--set``
overrides, validates, and only then computes. Outputs land in the run's
output directory together with ``config.used.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data.asm import asm_interpolate
from .data.files import export_heatmap, read_tensor_csv, write_tensor_csv
from .data.rds import GridExtent, bin_to_grid, load_rds_csv
from .data.synth import synth_breakdown
from .errors import ConfigError, DataError, NumericalError, StgshapError, StorageError, TooLargeError
from .explainer import (
    CoalitionDataset,
    ExplanationTarget,
    MaskedValue,
    exact_shapley,
    explain,
    fit_wlr,
    rank_players,
    save_explanation,
    spatial_phi_grid,
)
from .graph import build_lattice_graph, spectral_operators
from .masking import coalition_matrix, neighbourhood_player_map
from .predictor import NodeValueFunction, load_params, save_params
from .tensor import TrafficTensor
from .training import evaluate, fit, make_windows

log = logging.getLogger("stgshap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5
ORACLE_PLAYER_LIMIT = 12
ORACLE_TOLERANCE = 1e-8


def _write_json(path: Path, doc) -> None:
    try:
        path.write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_tensor(cfg: RunConfig) -> TrafficTensor:
    path = Path(cfg.paths.output_dir) / "tensor.csv"
    if not path.exists():
        raise StorageError(f"{path} not found; run 'synth' or 'ingest' first")
    return read_tensor_csv(path, cfg.grid.dt_seconds, cfg.grid.cell_miles)


def cmd_synth(cfg: RunConfig) -> int:
    g, s = cfg.grid, cfg.synth
    trig = (s.trigger.lane, s.trigger.cell, s.trigger.step)
    if g.num_cells is None:
        raise ConfigError("grid.num_cells is required for synth")
    try:
        tensor, record = synth_breakdown(g.num_lanes, g.num_cells, g.num_steps, s.seed, trig, cfg.synth_params())
    except DataError:
        raise
    except StgshapError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg)
    write_tensor_csv(tensor, out / "tensor.csv")
    _write_json(out / "trigger.json", record.to_dict())
    _write_json(out / "config.used.json", cfg.to_dict())
    print(f"synthetic tensor {tensor.values.shape} written to {out / 'tensor.csv'}; trigger at node {record.node}")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig) -> int:
    g = cfg.grid
    if cfg.paths.input_csv is None:
        raise ConfigError("paths.input_csv is required for ingest")
    if g.milepost_start is None or g.milepost_end is None:
        raise ConfigError("grid.milepost_start and grid.milepost_end are required for ingest")
    if not Path(cfg.paths.input_csv).exists():
        raise ConfigError(f"input file {cfg.paths.input_csv} does not exist")
    loaded = load_rds_csv(cfg.paths.input_csv)
    ts = [r.timestamp for r in loaded.records]
    t0 = g.time_start if g.time_start is not None else min(ts)
    t1 = g.time_end if g.time_end is not None else max(ts) + g.record_seconds
    extent = GridExtent(g.milepost_start, g.milepost_end, t0, t1, g.num_lanes, g.milepost_increasing)
    n_cells = extent.num_cells(g.cell_miles)
    if g.num_cells != n_cells:
        log.info("milepost extent spans %d cells; grid.num_cells=%s is replaced", n_cells, g.num_cells)
        g.num_cells = n_cells
    grid = bin_to_grid(loaded.records, extent, g.cell_miles, g.dt_seconds, g.record_seconds,
                       g.vehicles_per_mile_full)
    tensor = asm_interpolate(grid, cfg.asm_params())
    out = _out_dir(cfg)
    write_tensor_csv(tensor, out / "tensor.csv")
    observed = int(grid.observed.sum())
    report = {
        "rows_read": loaded.rows_read,
        "dropped": loaded.dropped,
        "dropped_lines": loaded.dropped_lines,
        "num_lanes": tensor.num_lanes,
        "num_cells": tensor.num_cells,
        "num_nodes": tensor.num_nodes,
        "num_steps": tensor.num_steps,
        "bins_total": int(grid.counts.size),
        "bins_observed": observed,
        "bins_filled_by_asm": int(grid.counts.size - observed),
    }
    _write_json(out / "report.json", report)
    _write_json(out / "config.used.json", cfg.to_dict())
    print(f"ingested {loaded.rows_read} rows ({loaded.dropped} dropped) into {tensor.num_nodes} nodes "
          f"x {tensor.num_steps} steps")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    p = cfg.predictor
    tensor = _load_tensor(cfg)
    hyper = p.hyper(len(tensor.feature_names))
    graph = build_lattice_graph(tensor.num_lanes, tensor.num_cells, cfg.grid.lateral_edges)
    ops = spectral_operators(graph)
    x, y = make_windows(tensor, hyper.window, hyper.horizon)
    n_val = int(round(len(x) * p.val_fraction))
    n_train = len(x) - n_val
    if n_train < 1:
        raise DataError("no training windows left after the validation split")
    result = fit((x[:n_train], y[:n_train]), ops, hyper, p.train_config())
    params = result.params
    train_mse, train_naive = evaluate(params, x[:n_train], y[:n_train], ops)
    val_mse, val_naive = evaluate(params, x[n_train:], y[n_train:], ops) if n_val else (None, None)
    params.meta.update(train_mse=train_mse, train_persistence_mse=train_naive,
                       val_mse=val_mse, val_persistence_mse=val_naive,
                       num_lanes=tensor.num_lanes, num_cells=tensor.num_cells,
                       feature_names=list(tensor.feature_names))
    out = _out_dir(cfg)
    save_params(params, out / "params.json")
    try:
        with open(out / "loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss"])
            for epoch, loss in enumerate(result.losses, start=1):
                writer.writerow([epoch, repr(float(loss))])
    except OSError as exc:
        raise StorageError(f"cannot write loss curve: {exc}") from exc
    _write_json(out / "config.used.json", cfg.to_dict())
    print(f"final train MSE {train_mse:.6g} (persistence {train_naive:.6g}, ratio {train_mse / train_naive:.3f})")
    if n_val:
        print(f"final validation MSE {val_mse:.6g} (persistence {val_naive:.6g}, ratio {val_mse / val_naive:.3f})")
    return EXIT_OK


def _explain_setup(cfg: RunConfig, hops: int | None, temporal_steps: int | None):
    tensor = _load_tensor(cfg)
    params_path = Path(cfg.paths.output_dir) / "params.json"
    if not params_path.exists():
        raise StorageError(f"{params_path} not found; run 'train' first")
    params = load_params(params_path)
    graph = build_lattice_graph(tensor.num_lanes, tensor.num_cells, cfg.grid.lateral_edges)
    ops = spectral_operators(graph)
    t = cfg.explainer.target
    try:
        v = t.node if t.node is not None else graph.node_index(t.lane, t.cell)
        graph.node_coords(v)
        feature = tensor.feature_index(t.feature)
    except StgshapError as exc:
        raise ConfigError(f"invalid explainer target: {exc}") from exc
    window = params.hyper.window
    end = tensor.num_steps - 1 if t.window_end is None else t.window_end
    if not window - 1 <= end < tensor.num_steps:
        raise ConfigError(f"explainer.target.window_end={end} outside [{window - 1}, {tensor.num_steps - 1}]")
    x = tensor.window(end, window)
    hops = params.hyper.cheb_order - 1 if hops is None else hops
    pmap = neighbourhood_player_map(graph, v, hops, window, temporal_steps)
    baseline = None if cfg.explainer.baseline == "zero" else np.broadcast_to(params.mean, x.shape)
    model = NodeValueFunction(params, ops, v, feature, t.step)
    target = ExplanationTarget(v, feature=feature, step=t.step, window_end=end)
    return tensor, graph, model, x, pmap, baseline, target


def cmd_explain(cfg: RunConfig, threads: int = 1) -> int:
    e_cfg = cfg.explainer
    tensor, graph, model, x, pmap, baseline, target = _explain_setup(cfg, e_cfg.hops, e_cfg.temporal_steps)
    e = explain(model, x, graph, pmap, e_cfg.n_samples, e_cfg.seed, baseline, threads=threads, target=target)
    out = _out_dir(cfg)
    save_explanation(e, out / "explanation.json")
    grid = np.abs(spatial_phi_grid(e, graph.num_lanes, graph.num_cells))
    export_heatmap(grid, out / "heatmap.csv", corner="lane")
    _write_json(out / "config.used.json", cfg.to_dict())
    print(f"target node {target.node} (lane {e.target.lane}, cell {e.target.cell}), "
          f"feature {tensor.feature_names[target.feature]}, window end {target.window_end}")
    print(f"phi0 = {e.phi0:.6g}; {e.num_players} players; {e.diagnostics['mode']} with "
          f"{e.diagnostics['n_samples']} coalitions")
    print(f"top {e_cfg.top_k} spatial players by |phi|:")
    for rank, (c, phi) in enumerate(rank_players(e, e_cfg.top_k, kind="spatial"), start=1):
        print(f"  {rank}. lane {c.lane} cell {c.cell}: phi = {phi:+.6g}")
    print(f"top {e_cfg.top_k} temporal players by |phi|:")
    for rank, (c, phi) in enumerate(rank_players(e, e_cfg.top_k, kind="temporal"), start=1):
        print(f"  {rank}. offset {c.time_offset}: phi = {phi:+.6g}")
    return EXIT_OK


def cmd_oracle_check(cfg: RunConfig) -> int:
    e_cfg = cfg.explainer
    tensor, graph, model, x, pmap, baseline, target = _explain_setup(
        cfg, e_cfg.oracle_hops, e_cfg.oracle_temporal_steps)
    m = pmap.num_players
    if m > ORACLE_PLAYER_LIMIT:
        raise TooLargeError(
            f"oracle check needs at most {ORACLE_PLAYER_LIMIT} players, the configured target has {m} "
            f"({pmap.num_spatial} spatial + {pmap.num_temporal} temporal); shrink explainer.oracle_hops "
            "or explainer.oracle_temporal_steps")
    value = MaskedValue(model, x, pmap, baseline)
    z = coalition_matrix(m)
    y = value.batch(z)
    table = {row.tobytes(): val for row, val in zip(z, y)}
    exact = exact_shapley(lambda row: table[np.asarray(row, dtype=np.uint8).tobytes()], m)
    fitted = fit_wlr(CoalitionDataset(z, y))
    deviation = float(np.max(np.abs(exact - fitted.phi))) if m else 0.0
    passed = deviation <= ORACLE_TOLERANCE
    out = _out_dir(cfg)
    _write_json(out / "oracle.json", {
        "target": {"node": target.node, "feature": target.feature, "step": target.step,
                   "window_end": target.window_end},
        "num_players": m, "max_abs_deviation": deviation, "tolerance": ORACLE_TOLERANCE,
        "passed": passed, "exact_phi": exact.tolist(), "fitted_phi": fitted.phi.tolist(),
    })
    _write_json(out / "config.used.json", cfg.to_dict())
    print(f"oracle check on {m} players: max |exact - fitted| = {deviation:.3e} -> {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_NUMERICAL


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "explain": cmd_explain,
    "oracle-check": cmd_oracle_check,
}


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # the copies on each subcommand must not clobber values given before it
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", metavar="PATH", default=d(None),
                        help="JSON run config (built-in defaults apply when omitted)")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=d([]), dest="overrides",
                        help="override one config field by dotted path, e.g. explainer.seed=7 (repeatable)")
    parser.add_argument("--threads", type=int, default=d(1), metavar="N",
                        help="worker cap for coalition evaluation")
    parser.add_argument("--out", metavar="DIR", default=d(None), help="output directory (sets paths.output_dir)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


HELP = {
    "ingest": "bin an RDS CSV onto the lane-cell grid and fill gaps (tensor.csv, report.json)",
    "synth": "write a synthetic breakdown tensor and its trigger record (tensor.csv, trigger.json)",
    "train": "fit the spatio-temporal graph forecaster (params.json, loss.csv)",
    "explain": "attribute one node's prediction to spatial and temporal players (explanation.json, heatmap.csv); "
               "masked entries take explainer.baseline, 'zero' by default or 'mean' for the training mean",
    "oracle-check": "compare exact Shapley values with the enumerated surrogate on a small target (oracle.json)",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgshap", description=__doc__.splitlines()[0])
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        child = sub.add_parser(name, help=HELP[name], description=HELP[name])
        _add_common(child, suppress=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"paths.output_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.command == "explain":
            return cmd_explain(cfg, threads=args.threads)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (StorageError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
