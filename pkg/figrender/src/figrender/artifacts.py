"""Readers for the run-directory artifact formats.

These parse the documented interchange formats only: comma-delimited logs
with fixed headers, and binary P5/P6 pixmaps.  Schema violations fail fast
with the offending file named.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

LOSSES_HEADER = ["step", "q_c", "q_z", "q_tr", "q_idA", "q_idB", "q_cyc", "q_trc",
                 "total", "d_x", "d_y", "d_z"]
EMBEDDINGS_HEADER = ["domain", "label", "pc1", "pc2"]
METRICS_HEADER = ["step", "split", "accuracy", "probe"]


class SchemaError(Exception):
    pass


def read_table(path, expected_header) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    if header != expected_header:
        raise SchemaError(f"{path}: header {header} does not match expected {expected_header}")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}:{i}: {len(cells)} cells for {len(header)} columns")
        rows.append(dict(zip(header, cells)))
    return rows


def read_losses(path) -> dict:
    """Columns of the per-step loss log as float arrays keyed by name."""
    rows = read_table(path, LOSSES_HEADER)
    out = {h: np.array([float(r[h]) for r in rows]) for h in LOSSES_HEADER}
    out["step"] = out["step"].astype(int)
    return out


def read_embeddings(path) -> dict:
    """Projected latents split by domain: {'source': (N,2), 'target': (M,2), labels...}."""
    rows = read_table(path, EMBEDDINGS_HEADER)
    out = {}
    for domain in ("source", "target"):
        sel = [r for r in rows if r["domain"] == domain]
        out[domain] = np.array([[float(r["pc1"]), float(r["pc2"])] for r in sel]).reshape(-1, 2)
        out[f"{domain}_labels"] = np.array([int(r["label"]) for r in sel], dtype=int)
    unknown = {r["domain"] for r in rows} - {"source", "target"}
    if unknown:
        raise SchemaError(f"{path}: unknown domain tags {sorted(unknown)}")
    return out


def read_metrics(path) -> list[dict]:
    rows = read_table(path, METRICS_HEADER)
    return [{"step": int(r["step"]), "split": r["split"],
             "accuracy": float(r["accuracy"]), "probe": float(r["probe"])} for r in rows]


def read_pixmap(path) -> np.ndarray:
    """Binary P5 -> (H,W) grayscale, P6 -> (H,W,3) color, uint8."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise SchemaError(f"{path}: not a binary P5/P6 pixmap")
    try:
        w, h = (int(x) for x in parts[1].split())
        maxval = int(parts[2])
    except ValueError as e:
        raise SchemaError(f"{path}: malformed pixmap header") from e
    if maxval != 255:
        raise SchemaError(f"{path}: unsupported max value {maxval}")
    depth = 1 if parts[0] == b"P5" else 3
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * depth)
    if data.size != w * h * depth:
        raise SchemaError(f"{path}: truncated pixmap payload")
    if depth == 1:
        return data.reshape(h, w)
    return data.reshape(h, w, 3)
