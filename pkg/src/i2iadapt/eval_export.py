"""Metrics, latent projections, delimited/pixmap export, and checkpoints.

Everything here is a pure reader or writer: metrics take arrays and return
numbers, exporters write deterministic bytes (sorted tensor tables,
canonical JSON trailers, repr-precision floats) so identical runs produce
byte-identical artifacts.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import ParamStore
from .trainer import TrainState

CHECKPOINT_MAGIC = b"I2IA"
CHECKPOINT_VERSION = 1

LOSSES_HEADER = ["step", "q_c", "q_z", "q_tr", "q_idA", "q_idB", "q_cyc", "q_trc",
                 "total", "d_x", "d_y", "d_z"]
EMBEDDINGS_HEADER = ["domain", "label", "pc1", "pc2"]
METRICS_HEADER = ["step", "split", "accuracy", "probe"]


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"accuracy: {preds.shape} predictions vs {labels.shape} labels")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels), np.asarray(preds)), 1)
    return m


def miou(pred_mask, true_mask, num_classes: int) -> float:
    """Mean IoU over the classes present in either mask."""
    pred_mask, true_mask = np.asarray(pred_mask), np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"miou: {pred_mask.shape} vs {true_mask.shape}")
    for m in (pred_mask, true_mask):
        if m.min() < 0 or m.max() >= num_classes:
            raise ValueError(f"miou: class id outside [0, {num_classes})")
    ious = []
    for k in range(num_classes):
        p, t = pred_mask == k, true_mask == k
        union = np.logical_or(p, t).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def domain_probe(latents_source, latents_target, seed: int = 0, iters: int = 300) -> float:
    """Held-out accuracy of a fresh logistic probe separating the domains.

    0.5 means the features are domain agnostic, 1.0 fully separable.
    """
    a = np.asarray(latents_source, dtype=np.float64).reshape(len(latents_source), -1)
    b = np.asarray(latents_target, dtype=np.float64).reshape(len(latents_target), -1)
    if len(a) < 5 or len(b) < 5:
        raise ValueError("domain_probe needs at least 5 samples per domain")

    def split(x):
        # split depends only on (seed, size): identical domains cancel exactly
        idx = np.random.default_rng([seed, len(x)]).permutation(len(x))
        cut = max(1, int(round(0.2 * len(x))))
        return x[idx[cut:]], x[idx[:cut]]

    a_tr, a_te = split(a)
    b_tr, b_te = split(b)
    xtr = np.concatenate([a_tr, b_tr])
    ytr = np.concatenate([np.zeros(len(a_tr)), np.ones(len(b_tr))])
    xte = np.concatenate([a_te, b_te])
    yte = np.concatenate([np.zeros(len(a_te)), np.ones(len(b_te))])

    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-8
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd

    w = np.zeros(xtr.shape[1])
    bias = 0.0
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    mb = vb = 0.0
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    for t in range(1, iters + 1):
        z = xtr @ w + bias
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -30, 30)))
        err = p - ytr
        gw = xtr.T @ err / len(ytr)
        gb = err.mean()
        m = b1 * m + (1 - b1) * gw
        v = b2 * v + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb
        vb = b2 * vb + (1 - b2) * gb * gb
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        bias -= lr * (mb / (1 - b1 ** t)) / (np.sqrt(vb / (1 - b2 ** t)) + eps)
    pred = (xte @ w + bias > 0).astype(np.float64)
    return accuracy(pred, yte)


def pca_axes(latents, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top principal directions (rows) and their explained variances.

    Deterministic sign: the largest-magnitude loading of each component is
    positive.  Degenerate rank pads with zero components and warns.
    """
    x = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    if len(x) < dims:
        raise ValueError(f"pca needs at least {dims} points, got {len(x)}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2 / max(len(x) - 1, 1)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    comps = np.zeros((dims, x.shape[1]))
    take = min(dims, rank, vt.shape[0])
    if take < dims:
        warnings.warn(f"pca: data rank {rank} below requested {dims} dims; zero-padding")
    comps[:take] = vt[:take]
    variances = np.zeros(dims)
    variances[:take] = var[:take]
    for i in range(take):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return comps, variances


def pca_project(latents, dims: int = 2) -> np.ndarray:
    x = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    comps, _ = pca_axes(x, dims)
    return (x - x.mean(axis=0)) @ comps.T


@dataclass
class EvalReport:
    step: int
    overall_accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray
    probe_accuracy: Optional[float] = None
    loss_snapshot: dict = field(default_factory=dict)
    split: str = "target"

    def format_table(self) -> str:
        lines = [f"step {self.step}  split {self.split}",
                 f"accuracy       {self.overall_accuracy:.4f}"]
        if self.probe_accuracy is not None:
            lines.append(f"domain probe   {self.probe_accuracy:.4f}")
        lines.append("class  accuracy  " + "  ".join(f"{i:>5d}" for i in range(self.confusion.shape[0])))
        for i, acc in enumerate(self.per_class_accuracy):
            row = "  ".join(f"{int(c):>5d}" for c in self.confusion[i])
            lines.append(f"{i:>5d}  {acc:>8.4f}  {row}")
        return "\n".join(lines)


def eval_report(preds, labels, num_classes: int, step: int = 0, split: str = "target",
                probe: Optional[float] = None, losses: Optional[dict] = None) -> EvalReport:
    cm = confusion_matrix(preds, labels, num_classes)
    denom = np.maximum(cm.sum(axis=1), 1)
    return EvalReport(step=step,
                      overall_accuracy=accuracy(preds, labels),
                      per_class_accuracy=(np.diag(cm) / denom).tolist(),
                      confusion=cm,
                      probe_accuracy=probe,
                      loss_snapshot=dict(losses or {}),
                      split=split)


# ---------------------------------------------------------------------------
# delimited + pixmap export
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def export_csv(records, path, header) -> None:
    """Write rows (dicts keyed by header) at full decimal precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for rec in records:
        lines.append(",".join(_fmt(rec[h]) for h in header))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> list[dict]:
    text = Path(path).read_text().strip()
    if not text:
        raise ValueError(f"empty CSV {path}")
    lines = text.split("\n")
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def grid_shape(count: int, cols: int = 8) -> tuple[int, int]:
    cols = min(cols, count) if count else cols
    return ((count + cols - 1) // cols, cols)


def export_image_grid(images: np.ndarray, path, cols: int = 8) -> None:
    """Tile (B,C,H,W) images in [-1,1] into a binary P5/P6 pixmap."""
    images = np.asarray(images)
    b, c, h, w = images.shape
    if c not in (1, 3):
        raise ValueError(f"image grid needs 1 or 3 channels, got {c}")
    rows, cols = grid_shape(b, cols)
    canvas = np.full((c, rows * h, cols * w), -1.0, dtype=np.float32)
    for i in range(b):
        r, k = divmod(i, cols)
        canvas[:, r * h:(r + 1) * h, k * w:(k + 1) * w] = images[i]
    payload = np.clip(np.round((canvas + 1.0) * 127.5), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = b"P5" if c == 1 else b"P6"
    body = payload[0] if c == 1 else payload.transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n255\n" % (cols * w, rows * h))
        f.write(body.tobytes())


def read_pixmap(path) -> np.ndarray:
    """Parse a binary P5/P6 file back to (C,H,W) uint8."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise ValueError(f"not a binary pixmap: {path}")
    w, h = (int(x) for x in parts[1].split())
    depth = 1 if parts[0] == b"P5" else 3
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * depth)
    if depth == 1:
        return data.reshape(1, h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    tensors: dict                      # name -> float32 array
    meta: dict                         # train state, aliases, lambdas, config hash


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, store: ParamStore, state: TrainState, meta: dict) -> None:
    """Binary layout: magic, u32 version, u32 tensor count, per tensor
    (u16 name length, name, u8 rank, u32 dims..., f32 payload), then a
    u32-length canonical JSON trailer.  Tied parameters appear once."""
    tensors: dict[str, np.ndarray] = {}
    for cid in store.canonical_ids():
        tensors[f"param/{cid}"] = store.get(cid).data
    for cid, m in state.adam_m.items():
        tensors[f"opt.m/{cid}"] = m
        tensors[f"opt.v/{cid}"] = state.adam_v[cid]

    trailer = dict(meta)
    trailer["train_state"] = state.to_dict()
    trailer["alias"] = {s: store.canonical(s) for s in store.slots()}
    trailer["trainable"] = {c: store.is_trainable(c) for c in store.canonical_ids()}
    trailer["buffer"] = {c: store.is_buffer(c) for c in store.canonical_ids()}

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        blob = _canonical_json(trailer)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = raw[off:off + n]
        off += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size, f"tensor {name}"), dtype="<f4").reshape(dims)
        tensors[name] = arr.copy()
    (jlen,) = struct.unpack("<I", take(4, "trailer length"))
    meta = json.loads(take(jlen, "trailer").decode())
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after checkpoint trailer")
    return Checkpoint(version=version, tensors=tensors, meta=meta)


def restore_store(ck: Checkpoint) -> ParamStore:
    """Rebuild the parameter registry, including tie groups, from a checkpoint."""
    store = ParamStore()
    alias = ck.meta["alias"]
    trainable = ck.meta["trainable"]
    buffer = ck.meta["buffer"]
    for cid in sorted(trainable):
        key = f"param/{cid}"
        if key not in ck.tensors:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        # copy so training a restored store never mutates the Checkpoint
        store.register(cid, ck.tensors[key].copy(), trainable=trainable[cid], buffer=buffer[cid])
    for slot, cid in alias.items():
        if slot not in store._alias:
            store._alias[slot] = cid
    return store


def restore_train_state(ck: Checkpoint) -> TrainState:
    state = TrainState.from_dict(ck.meta["train_state"])
    for name, arr in ck.tensors.items():
        if name.startswith("opt.m/"):
            state.adam_m[name[len("opt.m/"):]] = arr.copy()
        elif name.startswith("opt.v/"):
            state.adam_v[name[len("opt.v/"):]] = arr.copy()
    return state
