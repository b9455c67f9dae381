"""Parameterized layers over a registry that supports exact weight tying.

Every parameter lives in a ``ParamStore`` under a canonical id.  Layers
address parameters through slot names (``"f_x.0.w"``); tying makes two
slots resolve to one canonical tensor, so gradient contributions from both
uses accumulate into a single ``.grad`` and the optimizer sees one
parameter.  Untying snapshots value-equal copies under fresh ids.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class ParamStoreError(Exception):
    pass


def _slot_seed(seed: int, slot: str) -> int:
    return (int(seed) * 2654435761 + zlib.crc32(slot.encode())) % (2**63)


def fan_in_uniform(shape: tuple, fan_in: int, seed: int) -> np.ndarray:
    """Uniform init with std exactly 1/sqrt(fan_in)."""
    bound = np.sqrt(3.0 / fan_in)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ParamStore:
    """Registry of named tensors with tie groups and trainability flags."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}      # canonical id -> tensor
        self._alias: dict[str, str] = {}           # slot -> canonical id
        self._trainable: dict[str, bool] = {}      # canonical id -> flag
        self._buffer: dict[str, bool] = {}         # canonical id -> is non-gradient state

    # -- registration / resolution -------------------------------------------------

    def register(self, slot: str, value: np.ndarray, trainable: bool = True, buffer: bool = False) -> str:
        if slot in self._alias:
            raise ParamStoreError(f"slot {slot!r} already registered")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=trainable and not buffer)
        self._tensors[slot] = t
        self._alias[slot] = slot
        self._trainable[slot] = trainable and not buffer
        self._buffer[slot] = buffer
        return slot

    def canonical(self, slot: str) -> str:
        try:
            return self._alias[slot]
        except KeyError:
            raise ParamStoreError(f"unknown slot {slot!r}") from None

    def get(self, slot: str) -> Tensor:
        return self._tensors[self.canonical(slot)]

    def slots(self) -> list[str]:
        return sorted(self._alias)

    def canonical_ids(self) -> list[str]:
        return sorted(self._tensors)

    def is_trainable(self, cid: str) -> bool:
        return self._trainable[cid]

    def is_buffer(self, cid: str) -> bool:
        return self._buffer[cid]

    def tie_group(self, slot: str) -> list[str]:
        cid = self.canonical(slot)
        return sorted(s for s, c in self._alias.items() if c == cid)

    # -- tying ---------------------------------------------------------------------

    def tie(self, keep_slot: str, drop_slot: str):
        """Alias ``drop_slot`` (and its whole group) onto ``keep_slot``'s tensor."""
        keep = self.canonical(keep_slot)
        drop = self.canonical(drop_slot)
        if keep == drop:
            return
        if self._tensors[keep].shape != self._tensors[drop].shape:
            raise ShapeError(
                f"cannot tie {keep_slot!r} {self._tensors[keep].shape} to {drop_slot!r} {self._tensors[drop].shape}")
        for s, c in list(self._alias.items()):
            if c == drop:
                self._alias[s] = keep
        del self._tensors[drop]
        del self._trainable[drop]
        del self._buffer[drop]

    def untie(self, slot: str) -> tuple[str, str]:
        """Split ``slot`` out of its tie group with a value-equal copy.

        Returns (remaining canonical id, new canonical id).
        """
        cid = self.canonical(slot)
        group = self.tie_group(slot)
        if len(group) < 2:
            raise ParamStoreError(f"slot {slot!r} is not tied to anything")
        src = self._tensors[cid]
        t = Tensor(src.data.copy(), requires_grad=src.requires_grad)
        self._tensors[slot] = t
        self._trainable[slot] = self._trainable[cid]
        self._buffer[slot] = self._buffer[cid]
        self._alias[slot] = slot
        return cid, slot

    # -- training support ----------------------------------------------------------

    def freeze(self, cids):
        """Stop optimizer updates; gradients remain computable."""
        for cid in cids:
            if cid not in self._tensors:
                raise ParamStoreError(f"unknown parameter id {cid!r}")
            self._trainable[cid] = False

    def unfreeze(self, cids):
        for cid in cids:
            if cid not in self._tensors:
                raise ParamStoreError(f"unknown parameter id {cid!r}")
            if not self._buffer[cid]:
                self._trainable[cid] = True

    def trainable_ids(self, prefix: Optional[str] = None) -> list[str]:
        ids = [c for c in self.canonical_ids() if self._trainable[c]]
        if prefix is not None:
            ids = [c for c in ids if c.startswith(prefix)]
        return ids

    def ids_for_prefixes(self, prefixes) -> list[str]:
        """Canonical ids of all slots whose name starts with any prefix."""
        out = set()
        for s, c in self._alias.items():
            if any(s.startswith(p) for p in prefixes):
                out.add(c)
        return sorted(out)

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {cid: t.data for cid, t in sorted(self._tensors.items())}


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class LayerSpec:
    """Declarative description of one layer; validated on construction."""

    kind: str                     # conv | conv_t | dense
    fan_in: int
    fan_out: int
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    norm: str = "none"            # none | batch | instance
    act: str = "none"             # none | relu | leaky_relu | tanh | sigmoid
    slope: float = 0.2
    bias: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "conv_t", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "conv_t") and self.kernel <= 0:
            raise ValueError(f"{self.kind} layer needs a positive kernel, got {self.kernel}")
        if self.norm not in ("none", "batch", "instance"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.act not in ("none", "relu", "leaky_relu", "tanh", "sigmoid"):
            raise ValueError(f"unknown activation {self.act!r}")
        if self.kind == "dense" and self.norm != "none":
            raise ValueError("dense layers do not take normalization here")


class Layer:
    """One parameterized layer bound to store slots under ``name``."""

    def __init__(self, name: str, spec: LayerSpec):
        self.name = name
        self.spec = spec

    # slots ------------------------------------------------------------------

    def param_slots(self) -> list[str]:
        s = self.spec
        slots = [f"{self.name}.w"]
        if s.bias:
            slots.append(f"{self.name}.b")
        if s.norm == "batch":
            slots += [f"{self.name}.bn_g", f"{self.name}.bn_b", f"{self.name}.bn_rm", f"{self.name}.bn_rv"]
        return slots

    def init(self, store: ParamStore, seed: int):
        s = self.spec
        if s.kind == "dense":
            wshape = (s.fan_out, s.fan_in)
            fan = s.fan_in
        elif s.kind == "conv":
            wshape = (s.fan_out, s.fan_in, s.kernel, s.kernel)
            fan = s.fan_in * s.kernel * s.kernel
        else:
            wshape = (s.fan_in, s.fan_out, s.kernel, s.kernel)
            fan = s.fan_in * s.kernel * s.kernel
        store.register(f"{self.name}.w", fan_in_uniform(wshape, fan, _slot_seed(seed, f"{self.name}.w")))
        if s.bias:
            store.register(f"{self.name}.b", np.zeros(s.fan_out, dtype=np.float32))
        if s.norm == "batch":
            store.register(f"{self.name}.bn_g", np.ones(s.fan_out, dtype=np.float32))
            store.register(f"{self.name}.bn_b", np.zeros(s.fan_out, dtype=np.float32))
            store.register(f"{self.name}.bn_rm", np.zeros(s.fan_out, dtype=np.float32), buffer=True)
            store.register(f"{self.name}.bn_rv", np.ones(s.fan_out, dtype=np.float32), buffer=True)

    def forward(self, store: ParamStore, x: Tensor, train: bool = True,
                update_stats: bool = True) -> Tensor:
        s = self.spec
        w = store.get(f"{self.name}.w")
        b = store.get(f"{self.name}.b") if s.bias else None
        if s.kind == "dense":
            y = ad.linear(x, w, b)
        elif s.kind == "conv":
            y = ad.conv2d(x, w, b, stride=s.stride, pad=s.pad)
        else:
            y = ad.conv_transpose2d(x, w, b, stride=s.stride, pad=s.pad)
        if s.norm == "batch":
            y = ad.batchnorm2d(y, store.get(f"{self.name}.bn_g"), store.get(f"{self.name}.bn_b"),
                               store.get(f"{self.name}.bn_rm").data, store.get(f"{self.name}.bn_rv").data,
                               training=train, update_stats=update_stats)
        elif s.norm == "instance":
            y = ad.instancenorm2d(y)
        if s.act == "relu":
            y = ad.relu(y)
        elif s.act == "leaky_relu":
            y = ad.leaky_relu(y, slope=s.slope)
        elif s.act == "tanh":
            y = ad.tanh(y)
        elif s.act == "sigmoid":
            y = ad.sigmoid(y)
        return y


@dataclass
class Network:
    """Named stack of layers plus structural ops (flatten, pooling)."""

    name: str
    layers: list = field(default_factory=list)   # Layer | "flatten" | "global_avg_pool"

    def init(self, store: ParamStore, seed: int):
        for layer in self.layers:
            if isinstance(layer, Layer):
                layer.init(store, seed)

    def forward(self, store: ParamStore, x: Tensor, train: bool = True,
                update_stats: bool = True) -> Tensor:
        for layer in self.layers:
            if layer == "flatten":
                x = ad.flatten(x)
            elif layer == "global_avg_pool":
                x = ad.global_avg_pool(x)
            else:
                x = layer.forward(store, x, train=train, update_stats=update_stats)
        return x

    def __call__(self, store: ParamStore, x: Tensor, train: bool = True,
                 update_stats: bool = True) -> Tensor:
        return self.forward(store, x, train=train, update_stats=update_stats)

    def param_slots(self) -> list[str]:
        out = []
        for layer in self.layers:
            if isinstance(layer, Layer):
                out += layer.param_slots()
        return out

    def layer_prefixes(self) -> list[str]:
        return [layer.name for layer in self.layers if isinstance(layer, Layer)]


def init_params(spec: LayerSpec, seed: int, name: str = "layer") -> dict[str, np.ndarray]:
    """Standalone deterministic initialization for one LayerSpec."""
    store = ParamStore()
    Layer(name, spec).init(store, seed)
    return {s: store.get(s).data for s in Layer(name, spec).param_slots()}


def tie_parameters(store: ParamStore, slot_a: str, slot_b: str):
    store.tie(slot_a, slot_b)


def untie_parameters(store: ParamStore, slot: str) -> tuple[str, str]:
    return store.untie(slot)
