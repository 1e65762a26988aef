"""CSV interchange: traffic tensors and 2-D heatmaps."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import DataError, SchemaError, StorageError
from ..tensor import TrafficTensor

_TENSOR_KEYS = ("node", "lane", "cell", "step")


def write_tensor_csv(tensor: TrafficTensor, path: str | Path) -> None:
    """Long format, one row per (node, step); floats at full precision."""
    n, t, _ = tensor.values.shape
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(_TENSOR_KEYS) + list(tensor.feature_names))
            for node in range(n):
                lane, cell = divmod(node, tensor.num_cells)
                for step in range(t):
                    writer.writerow([node, lane, cell, step] + [repr(float(v)) for v in tensor.values[node, step]])
    except OSError as exc:
        raise StorageError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor_csv(path: str | Path, dt_seconds: float = 10.0, cell_miles: float = 0.1) -> TrafficTensor:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise StorageError(f"cannot read tensor from {path}: {exc}") from exc
    if header is None or tuple(header[:4]) != _TENSOR_KEYS or len(header) < 5:
        raise SchemaError(f"{path}: expected header {','.join(_TENSOR_KEYS)},<features...>")
    if not rows:
        raise DataError(f"{path}: tensor file has no rows")
    data = np.array(rows, dtype=np.float64)
    keys = data[:, :4].astype(np.int64)
    num_lanes, num_cells = keys[:, 1].max() + 1, keys[:, 2].max() + 1
    steps = keys[:, 3].max() + 1
    values = np.full((num_lanes * num_cells, steps, len(header) - 4), np.nan)
    values[keys[:, 0], keys[:, 3]] = data[:, 4:]
    return TrafficTensor(values, int(num_lanes), int(num_cells), tuple(header[4:]), dt_seconds, cell_miles)


def export_heatmap(field, path: str | Path, row_labels=None, col_labels=None, corner: str = "row") -> None:
    """Write a 2-D field as CSV: a header of column labels, then one labelled row each.

    Values carry 9 significant digits.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise DataError(f"heatmap needs a 2-D field, got shape {field.shape}")
    if not np.all(np.isfinite(field)):
        raise DataError("heatmap field has non-finite values")
    rows = range(field.shape[0]) if row_labels is None else row_labels
    cols = range(field.shape[1]) if col_labels is None else col_labels
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([corner] + [str(c) for c in cols])
            for label, values in zip(rows, field):
                writer.writerow([str(label)] + [f"{v:.9g}" for v in values])
    except OSError as exc:
        raise StorageError(f"cannot write heatmap to {path}: {exc}") from exc


def read_heatmap(path: str | Path) -> tuple[np.ndarray, list[str], list[str]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise StorageError(f"cannot read heatmap from {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty heatmap file")
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(labels), len(cols))
    return values, labels, cols
