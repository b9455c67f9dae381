"""Reverse-mode automatic differentiation over a fixed operation catalogue.

The engine is deliberately small: a ``Tensor`` wraps a numpy array, a
``Tape`` records every operation whose inputs require gradients, and
``backward`` replays the tape in reverse.  The one non-standard feature is
``input_gradient``, which re-expresses the reverse sweep itself as recorded
operations so that the L2-norm of an input gradient (the Wasserstein
gradient penalty) can be differentiated with respect to network parameters.
That second-order path is only defined for piecewise-linear subgraphs;
activation second derivatives are taken to be zero everywhere.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError", "ShapeError", "CatalogueError", "ContractError",
    "NumericError", "DoubleBackpropError",
    "Tensor", "OpRecord", "Tape", "no_grad",
    "forward_eval", "backward", "input_gradient", "stop_gradient",
    "finite_difference_gradient",
    "linear", "conv2d", "conv_transpose2d", "batchnorm2d", "instancenorm2d",
    "relu", "leaky_relu", "tanh", "sigmoid", "add", "sub", "mul", "scale",
    "concat", "flatten", "global_avg_pool", "bilinear_resize",
    "l1_loss", "mse_loss", "softmax_cross_entropy",
    "reduce_sum", "reduce_mean", "sqrt", "norm2",
    "bilinear_resize_array",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class CatalogueError(AutodiffError):
    pass


class ContractError(AutodiffError):
    pass


class NumericError(AutodiffError):
    pass


class DoubleBackpropError(AutodiffError):
    pass


_FLOAT_DTYPES = (np.float32, np.float64)
_ids = itertools.count()


class Tensor:
    """N-dimensional float array plus a gradient slot.

    ``data`` is always a C-contiguous float32/float64 array.  Tensors are
    treated as immutable once they have been consumed by an operation; the
    only sanctioned in-place mutation is the optimizer updating parameters
    between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class OpRecord:
    """One recorded operation: kind, inputs, output and saved intermediates."""

    __slots__ = ("kind", "inputs", "output", "attrs", "saved")

    def __init__(self, kind: str, inputs: Sequence[Tensor], output: Tensor, attrs: dict, saved: dict):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.output = output
        self.attrs = attrs
        self.saved = saved

    @property
    def input_ids(self):
        return tuple(t.id for t in self.inputs)

    @property
    def output_id(self):
        return self.output.id


class Tape:
    """Ordered operation log; record order is the topological order."""

    def __init__(self):
        self.records: list[OpRecord] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.records)

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward on its recorded input values.

        Returns the recomputed output arrays in record order without touching
        the live tensors; normalization buffers are left untouched.
        """
        out = []
        for rec in self.records:
            arrs = [t.data for t in rec.inputs]
            out.append(_FORWARD[rec.kind](arrs, rec.attrs, rec.saved, replay=True))
        return out


_ACTIVE_TAPE: Optional[Tape] = None
_GRAD_ENABLED = True


class no_grad:
    """Context manager suppressing tape recording (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, attrs: dict, saved: dict) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and _ACTIVE_TAPE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPE.records.append(OpRecord(kind, inputs, out, attrs, saved))
    return out


def _check_same_dtype(*tensors: Tensor):
    d = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != d:
            raise ShapeError(f"mixed dtypes {d} vs {t.dtype}")
    return d


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(grad.shape, shape)) if s == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


# ---------------------------------------------------------------------------
# convolution kernels (shared by forward, vjp, and the transposed op)
# ---------------------------------------------------------------------------

def _conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv output size {oh}x{ow} <= 0 for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return oh, ow


def _pad_nhwc(x_nchw: np.ndarray, pad: int) -> np.ndarray:
    """One fused permute-and-pad copy: NCHW in, padded NHWC out."""
    n, c, h, w = x_nchw.shape
    buf = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x_nchw.dtype)
    buf[:, pad:pad + h, pad:pad + w, :] = x_nchw.transpose(0, 2, 3, 1)
    return buf


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> (N*OH*OW, KH*KW*C); one strided-view copy."""
    n, hp, wp, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, oh, ow, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc))
    return view.reshape(n * oh * ow, kh * kw * c)


def _kernel_matrix(k: np.ndarray) -> np.ndarray:
    """(CO, CI, KH, KW) -> (CO, KH*KW*CI) matching the im2col minor order."""
    co = k.shape[0]
    return np.ascontiguousarray(k.transpose(0, 2, 3, 1)).reshape(co, -1)


def _conv2d_fwd_arr(x: np.ndarray, k: np.ndarray, stride: int, pad: int,
                    cols_out: Optional[dict] = None) -> np.ndarray:
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = k.shape
    if ci != ci_k:
        raise ShapeError(f"conv2d channels: input has {ci}, kernel expects {ci_k}")
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    cols = _im2col_nhwc(_pad_nhwc(x, pad), kh, kw, stride, oh, ow)
    if cols_out is not None:
        cols_out["cols"] = cols
    y = cols @ _kernel_matrix(k).T
    return np.ascontiguousarray(y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2))


def _conv2d_input_grad_arr(g: np.ndarray, k: np.ndarray, stride: int, pad: int, hw: tuple) -> np.ndarray:
    n, co, oh, ow = g.shape
    co_k, ci, kh, kw = k.shape
    if co != co_k:
        raise ShapeError(f"conv input-grad channels: grad has {co}, kernel has {co_k}")
    h, w = hw
    hp, wp = h + 2 * pad, w + 2 * pad
    if stride == 2 and hp % 2 == 0 and wp % 2 == 0 and kh % 2 == 0 and kw % 2 == 0:
        # gather form: each parity plane of the result is a small stride-1
        # correlation of the upstream gradient, so the whole adjoint becomes
        # one im2col plus four dense matmuls (no strided scatter-adds)
        dh, dw = kh // 2, kw // 2
        ph, pw = hp // 2, wp // 2
        gpad = np.zeros((n, oh + 2 * (dh - 1), ow + 2 * (dw - 1), co), dtype=g.dtype)
        gpad[:, dh - 1:dh - 1 + oh, dw - 1:dw - 1 + ow, :] = g.transpose(0, 2, 3, 1)
        cols = _im2col_nhwc(gpad, dh, dw, 1, ph, pw)
        buf = np.empty((n, hp, wp, ci), dtype=g.dtype)
        v = buf.reshape(n, ph, 2, pw, 2, ci)
        for pa in range(2):
            for pb in range(2):
                # tap (i, j) of the correlation reads g[u-(dh-1-i), v-(dw-1-j)]
                ksub = np.empty((dh, dw, co, ci), dtype=k.dtype)
                for i in range(dh):
                    for j in range(dw):
                        ksub[i, j] = k[:, :, 2 * (dh - 1 - i) + pa, 2 * (dw - 1 - j) + pb]
                plane = cols @ ksub.reshape(dh * dw * co, ci)
                v[:, :, pa, :, pb, :] = plane.reshape(n, ph, pw, ci)
    else:
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        dcols = (gr @ _kernel_matrix(k)).reshape(n, oh, ow, kh, kw, ci)
        buf = np.zeros((n, hp, wp, ci), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                buf[:, i:i + stride * (oh - 1) + 1:stride,
                    j:j + stride * (ow - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        buf = buf[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(buf.transpose(0, 3, 1, 2))


def _conv2d_filter_grad_arr(x: np.ndarray, g: np.ndarray, stride: int, pad: int, khw: tuple,
                            cols: Optional[np.ndarray] = None) -> np.ndarray:
    n, ci, h, w = x.shape
    n2, co, oh, ow = g.shape
    kh, kw = khw
    if cols is None:
        cols = _im2col_nhwc(_pad_nhwc(x, pad), kh, kw, stride, oh, ow)
    gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
    dw = (gr.T @ cols).reshape(co, kh, kw, ci)
    return np.ascontiguousarray(dw.transpose(0, 3, 1, 2))


def _resize_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Aligned-corners bilinear interpolation matrix (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    for o in range(n_out):
        pos = o * scale
        lo = min(int(np.floor(pos)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Aligned-corners bilinear resize of (..., H, W) without recording."""
    rh = _resize_weights(x.shape[-2], out_h, x.dtype)
    rw = _resize_weights(x.shape[-1], out_w, x.dtype)
    return np.einsum("oh,pw,...hw->...op", rh, rw, x, optimize=True).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# forward implementations (shared by the public ops and Tape.replay)
# ---------------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fwd_linear(arrs, attrs, saved, replay=False):
    x, w = arrs[0], arrs[1]
    y = x @ w.T
    if len(arrs) > 2:
        y = y + arrs[2]
    return y


def _fwd_conv2d(arrs, attrs, saved, replay=False):
    y = _conv2d_fwd_arr(arrs[0], arrs[1], attrs["stride"], attrs["pad"],
                        cols_out=None if replay else saved)
    if len(arrs) > 2:
        y += arrs[2].reshape(1, -1, 1, 1)
    return y


def _fwd_conv_transpose2d(arrs, attrs, saved, replay=False):
    x, k = arrs[0], arrs[1]
    s, p = attrs["stride"], attrs["pad"]
    kh, kw = k.shape[2], k.shape[3]
    oh = (x.shape[2] - 1) * s - 2 * p + kh
    ow = (x.shape[3] - 1) * s - 2 * p + kw
    y = _conv2d_input_grad_arr(x, k, s, p, (oh, ow))
    if len(arrs) > 2:
        y = y + arrs[2].reshape(1, -1, 1, 1)
    return y


def _fwd_batchnorm2d(arrs, attrs, saved, replay=False):
    x, gamma, beta = arrs[0], arrs[1], arrs[2]
    eps = x.dtype.type(attrs["eps"])
    if attrs["training"]:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if attrs.get("update_stats", True) and not replay:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mom = attrs["momentum"]
            unbiased = var * (m / max(m - 1, 1))
            rm, rv = attrs["running_mean"], attrs["running_var"]
            rm *= 1.0 - mom
            rm += mom * mu.astype(rm.dtype)
            rv *= 1.0 - mom
            rv += mom * unbiased.astype(rv.dtype)
    else:
        mu = attrs["running_mean"].astype(x.dtype)
        var = attrs["running_var"].astype(x.dtype)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = x - mu.reshape(1, -1, 1, 1)
    xhat *= invstd.reshape(1, -1, 1, 1)
    if not replay:
        saved["xhat"] = xhat
        saved["invstd"] = invstd
    y = xhat * gamma.reshape(1, -1, 1, 1)
    y += beta.reshape(1, -1, 1, 1)
    return y


def _fwd_instancenorm2d(arrs, attrs, saved, replay=False):
    x = arrs[0]
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    invstd = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = (x - mu) * invstd
    if not replay:
        saved["xhat"] = xhat
        saved["invstd"] = invstd
    return xhat


def _fwd_relu(arrs, attrs, saved, replay=False):
    return np.maximum(arrs[0], 0)


def _fwd_leaky_relu(arrs, attrs, saved, replay=False):
    x = arrs[0]
    y = x * x.dtype.type(attrs["slope"])   # slope < 1: leaky = max(x, slope*x)
    np.maximum(x, y, out=y)
    return y


def _fwd_tanh(arrs, attrs, saved, replay=False):
    y = np.tanh(arrs[0])
    if not replay:
        saved["y"] = y
    return y


def _fwd_sigmoid(arrs, attrs, saved, replay=False):
    x = arrs[0]
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    if not replay:
        saved["y"] = y
    return y


def _fwd_add(arrs, attrs, saved, replay=False):
    return arrs[0] + arrs[1]


def _fwd_mul(arrs, attrs, saved, replay=False):
    return arrs[0] * arrs[1]


def _fwd_scale(arrs, attrs, saved, replay=False):
    return arrs[0] * arrs[0].dtype.type(attrs["c"])


def _fwd_concat(arrs, attrs, saved, replay=False):
    return np.concatenate(arrs, axis=attrs["axis"])


def _fwd_flatten(arrs, attrs, saved, replay=False):
    x = arrs[0]
    return x.reshape(x.shape[0], -1)


def _fwd_global_avg_pool(arrs, attrs, saved, replay=False):
    return arrs[0].mean(axis=(2, 3))


def _fwd_bilinear_resize(arrs, attrs, saved, replay=False):
    return bilinear_resize_array(arrs[0], attrs["out_h"], attrs["out_w"])


def _fwd_l1_loss(arrs, attrs, saved, replay=False):
    return np.asarray(np.abs(arrs[0] - arrs[1]).mean(), dtype=arrs[0].dtype)


def _fwd_mse_loss(arrs, attrs, saved, replay=False):
    d = arrs[0] - arrs[1]
    return np.asarray((d * d).mean(), dtype=arrs[0].dtype)


def _fwd_softmax_cross_entropy(arrs, attrs, saved, replay=False):
    logits = arrs[0]
    labels = attrs["labels"]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = lse - z[np.arange(len(labels)), labels]
    return np.asarray(ce.mean(), dtype=logits.dtype)


def _fwd_sum(arrs, attrs, saved, replay=False):
    return np.asarray(arrs[0].sum(axis=attrs["axes"], keepdims=attrs["keepdims"]), dtype=arrs[0].dtype)


def _fwd_mean(arrs, attrs, saved, replay=False):
    return np.asarray(arrs[0].mean(axis=attrs["axes"], keepdims=attrs["keepdims"]), dtype=arrs[0].dtype)


def _fwd_sqrt(arrs, attrs, saved, replay=False):
    y = np.sqrt(arrs[0])
    if not replay:
        saved["y"] = y
    return y


def _fwd_norm2(arrs, attrs, saved, replay=False):
    x = arrs[0]
    y = np.sqrt((x * x).sum(axis=attrs["axes"], keepdims=attrs["keepdims"]))
    if not replay:
        saved["y"] = y
    return np.asarray(y, dtype=x.dtype)


def _fwd_matmul(arrs, attrs, saved, replay=False):
    return arrs[0] @ arrs[1]


def _fwd_conv2d_input_grad(arrs, attrs, saved, replay=False):
    return _conv2d_input_grad_arr(arrs[0], arrs[1], attrs["stride"], attrs["pad"], attrs["hw"])


def _fwd_broadcast_to(arrs, attrs, saved, replay=False):
    return np.ascontiguousarray(np.broadcast_to(arrs[0], attrs["shape"]))


def _fwd_reshape(arrs, attrs, saved, replay=False):
    return arrs[0].reshape(attrs["shape"])


_FORWARD: dict[str, Callable] = {
    "linear": _fwd_linear,
    "conv2d": _fwd_conv2d,
    "conv_transpose2d": _fwd_conv_transpose2d,
    "batchnorm2d": _fwd_batchnorm2d,
    "instancenorm2d": _fwd_instancenorm2d,
    "relu": _fwd_relu,
    "leaky_relu": _fwd_leaky_relu,
    "tanh": _fwd_tanh,
    "sigmoid": _fwd_sigmoid,
    "add": _fwd_add,
    "mul": _fwd_mul,
    "scale": _fwd_scale,
    "concat": _fwd_concat,
    "flatten": _fwd_flatten,
    "global_avg_pool": _fwd_global_avg_pool,
    "bilinear_resize": _fwd_bilinear_resize,
    "l1_loss": _fwd_l1_loss,
    "mse_loss": _fwd_mse_loss,
    "softmax_cross_entropy": _fwd_softmax_cross_entropy,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "sqrt": _fwd_sqrt,
    "norm2": _fwd_norm2,
    "_matmul": _fwd_matmul,
    "_conv2d_input_grad": _fwd_conv2d_input_grad,
    "_broadcast_to": _fwd_broadcast_to,
    "_reshape": _fwd_reshape,
}


# ---------------------------------------------------------------------------
# public ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight fan-in {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*inputs)
    out = _fwd_linear([t.data for t in inputs], {}, {})
    return _record("linear", inputs, out, {}, {})


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*inputs)
    attrs = {"stride": int(stride), "pad": int(pad)}
    out = _fwd_conv2d([t.data for t in inputs], attrs, {})
    return _record("conv2d", inputs, out, attrs, {})


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input channels {x.shape[1]} != kernel in-channels {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({w.shape[1]},)")
    inputs = (x, w) if b is None else (x, w, b)
    _check_same_dtype(*inputs)
    attrs = {"stride": int(stride), "pad": int(pad)}
    out = _fwd_conv_transpose2d([t.data for t in inputs], attrs, {})
    return _record("conv_transpose2d", inputs, out, attrs, {})


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool = True,
                momentum: float = 0.1, eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    attrs = {"training": bool(training), "momentum": float(momentum), "eps": float(eps),
             "update_stats": bool(update_stats),
             "running_mean": running_mean, "running_var": running_var}
    saved: dict = {}
    inputs = (x, gamma, beta)
    out = _fwd_batchnorm2d([t.data for t in inputs], attrs, saved)
    return _record("batchnorm2d", inputs, out, attrs, saved)


def instancenorm2d(x: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"instancenorm2d expects 4-d input, got {x.shape}")
    attrs = {"eps": float(eps)}
    saved: dict = {}
    out = _fwd_instancenorm2d([x.data], attrs, saved)
    return _record("instancenorm2d", (x,), out, attrs, saved)


def relu(x: Tensor) -> Tensor:
    return _record("relu", (x,), _fwd_relu([x.data], {}, {}), {}, {})


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    attrs = {"slope": float(slope)}
    return _record("leaky_relu", (x,), _fwd_leaky_relu([x.data], attrs, {}), attrs, {})


def tanh(x: Tensor) -> Tensor:
    saved: dict = {}
    return _record("tanh", (x,), _fwd_tanh([x.data], {}, saved), {}, saved)


def sigmoid(x: Tensor) -> Tensor:
    saved: dict = {}
    return _record("sigmoid", (x,), _fwd_sigmoid([x.data], {}, saved), {}, saved)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _record("add", (a, b), out, {}, {})


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(_as_tensor(b, a), -1.0))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from e
    return _record("mul", (a, b), out, {}, {})


def scale(x: Tensor, c: float) -> Tensor:
    attrs = {"c": float(c)}
    return _record("scale", (x,), _fwd_scale([x.data], attrs, {}), attrs, {})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*tensors)
    attrs = {"axis": int(axis)}
    try:
        out = _fwd_concat([t.data for t in tensors], attrs, {})
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    return _record("concat", tuple(tensors), out, attrs, {})


def flatten(x: Tensor) -> Tensor:
    return _record("flatten", (x,), _fwd_flatten([x.data], {}, {}), {}, {})


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return _record("global_avg_pool", (x,), _fwd_global_avg_pool([x.data], {}, {}), {}, {})


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects 4-d input, got {x.shape}")
    attrs = {"out_h": int(out_h), "out_w": int(out_w)}
    return _record("bilinear_resize", (x,), _fwd_bilinear_resize([x.data], attrs, {}), attrs, {})


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return _record("l1_loss", (a, b), _fwd_l1_loss([a.data, b.data], {}, {}), {}, {})


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return _record("mse_loss", (a, b), _fwd_mse_loss([a.data, b.data], {}, {}), {}, {})


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {logits.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    attrs = {"labels": labels.astype(np.int64)}
    return _record("softmax_cross_entropy", (logits,), _fwd_softmax_cross_entropy([logits.data], attrs, {}), attrs, {})


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    attrs = {"axes": _norm_axes(axes, x.ndim), "keepdims": bool(keepdims)}
    return _record("sum", (x,), _fwd_sum([x.data], attrs, {}), attrs, {})


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    attrs = {"axes": _norm_axes(axes, x.ndim), "keepdims": bool(keepdims)}
    return _record("mean", (x,), _fwd_mean([x.data], attrs, {}), attrs, {})


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative value")
    saved: dict = {}
    return _record("sqrt", (x,), _fwd_sqrt([x.data], {}, saved), {}, saved)


def norm2(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    attrs = {"axes": _norm_axes(axes, x.ndim), "keepdims": bool(keepdims)}
    saved: dict = {}
    return _record("norm2", (x,), _fwd_norm2([x.data], attrs, saved), attrs, saved)


_CATALOGUE = {
    "linear": linear, "conv2d": conv2d, "conv_transpose2d": conv_transpose2d,
    "batchnorm2d": batchnorm2d, "instancenorm2d": instancenorm2d,
    "relu": relu, "leaky_relu": leaky_relu, "tanh": tanh, "sigmoid": sigmoid,
    "add": add, "mul": mul, "scale": scale, "concat": concat,
    "flatten": flatten, "global_avg_pool": global_avg_pool,
    "bilinear_resize": bilinear_resize,
    "l1_loss": l1_loss, "mse_loss": mse_loss,
    "softmax_cross_entropy": softmax_cross_entropy,
    "sum": reduce_sum, "mean": reduce_mean, "sqrt": sqrt, "norm2": norm2,
}


def forward_eval(op_kind: str, inputs, attrs: Optional[dict] = None) -> Tensor:
    """Dispatch into the public op catalogue by name."""
    fn = _CATALOGUE.get(op_kind)
    if fn is None:
        raise CatalogueError(f"unknown op kind {op_kind!r}; catalogue: {sorted(_CATALOGUE)}")
    if op_kind == "concat":
        attrs = attrs or {}
        return fn(list(inputs), **attrs)
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# numpy vjps: rec, upstream grad  ->  per-input gradient arrays (or None)
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _vjp_linear(rec, g):
    x, w = rec.inputs[0].data, rec.inputs[1].data
    out = [g @ w, g.T @ x]
    if len(rec.inputs) > 2:
        out.append(g.sum(axis=0))
    return out


def _vjp_conv2d(rec, g):
    x, w = rec.inputs[0].data, rec.inputs[1].data
    s, p = rec.attrs["stride"], rec.attrs["pad"]
    out = [
        _conv2d_input_grad_arr(g, w, s, p, (x.shape[2], x.shape[3])),
        _conv2d_filter_grad_arr(x, g, s, p, (w.shape[2], w.shape[3]),
                                cols=rec.saved.get("cols")),
    ]
    if len(rec.inputs) > 2:
        out.append(g.sum(axis=(0, 2, 3)))
    return out


def _vjp_conv_transpose2d(rec, g):
    x, w = rec.inputs[0].data, rec.inputs[1].data
    s, p = rec.attrs["stride"], rec.attrs["pad"]
    shared: dict = {}   # both outputs im2col the same upstream gradient
    out = [
        _conv2d_fwd_arr(g, w, s, p, cols_out=shared),
        _conv2d_filter_grad_arr(g, x, s, p, (w.shape[2], w.shape[3]),
                                cols=shared["cols"]),
    ]
    if len(rec.inputs) > 2:
        out.append(g.sum(axis=(0, 2, 3)))
    return out


def _vjp_batchnorm2d(rec, g):
    xhat, invstd = rec.saved["xhat"], rec.saved["invstd"]
    gamma = rec.inputs[1].data
    gx = g * xhat
    dgamma = gx.sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    if rec.attrs["training"]:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        dx = xhat * (dgamma / m).reshape(1, -1, 1, 1)
        dx += (dbeta / m).reshape(1, -1, 1, 1)
        np.subtract(g, dx, out=dx)
        dx *= (gamma * invstd).reshape(1, -1, 1, 1)
    else:
        dx = g * (gamma * invstd).reshape(1, -1, 1, 1)
    return [dx, dgamma, dbeta]


def _vjp_instancenorm2d(rec, g):
    xhat, invstd = rec.saved["xhat"], rec.saved["invstd"]
    gm = g.mean(axis=(2, 3), keepdims=True)
    gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
    return [invstd * (g - gm - xhat * gxm)]


def _vjp_relu(rec, g):
    return [g * (rec.inputs[0].data > 0)]


def _vjp_leaky_relu(rec, g):
    x = rec.inputs[0].data
    s = x.dtype.type(rec.attrs["slope"])
    out = g * s
    np.copyto(out, g, where=x > 0)
    return [out]


def _vjp_tanh(rec, g):
    y = rec.saved["y"]
    return [g * (1 - y * y)]


def _vjp_sigmoid(rec, g):
    y = rec.saved["y"]
    return [g * y * (1 - y)]


def _vjp_add(rec, g):
    a, b = rec.inputs
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _vjp_mul(rec, g):
    a, b = rec.inputs
    return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]


def _vjp_scale(rec, g):
    return [g * g.dtype.type(rec.attrs["c"])]


def _vjp_concat(rec, g):
    axis = rec.attrs["axis"]
    sizes = [t.shape[axis] for t in rec.inputs]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _vjp_flatten(rec, g):
    return [g.reshape(rec.inputs[0].shape)]


def _vjp_global_avg_pool(rec, g):
    n, c, h, w = rec.inputs[0].shape
    return [np.broadcast_to(g.reshape(n, c, 1, 1), (n, c, h, w)) / g.dtype.type(h * w)]


def _vjp_bilinear_resize(rec, g):
    x = rec.inputs[0].data
    rh = _resize_weights(x.shape[2], rec.attrs["out_h"], x.dtype)
    rw = _resize_weights(x.shape[3], rec.attrs["out_w"], x.dtype)
    return [np.einsum("oh,pw,ncop->nchw", rh, rw, g, optimize=True)]


def _vjp_l1_loss(rec, g):
    a, b = rec.inputs[0].data, rec.inputs[1].data
    d = np.sign(a - b) * (g / a.size)
    return [d, -d]


def _vjp_mse_loss(rec, g):
    a, b = rec.inputs[0].data, rec.inputs[1].data
    d = (a - b) * (2.0 * g / a.size)
    return [d, -d]


def _vjp_softmax_cross_entropy(rec, g):
    logits = rec.inputs[0].data
    labels = rec.attrs["labels"]
    p = _softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return [p * (g / len(labels))]


def _vjp_sum(rec, g):
    return [np.ascontiguousarray(_expand_reduced(g, rec.inputs[0].shape, rec.attrs["axes"], rec.attrs["keepdims"]))]


def _vjp_mean(rec, g):
    x = rec.inputs[0]
    count = int(np.prod([x.shape[a] for a in rec.attrs["axes"]])) or 1
    e = _expand_reduced(g, x.shape, rec.attrs["axes"], rec.attrs["keepdims"])
    return [e / x.dtype.type(count)]


def _vjp_sqrt(rec, g):
    y = rec.saved["y"]
    return [g / (2.0 * np.maximum(y, np.finfo(y.dtype).tiny))]


def _vjp_norm2(rec, g):
    x = rec.inputs[0].data
    y = rec.saved["y"]
    safe = np.where(y > 0, y, 1.0)
    gy = _expand_reduced(g / safe * (y > 0), x.shape, rec.attrs["axes"], rec.attrs["keepdims"])
    return [gy * x]


def _vjp_matmul(rec, g):
    a, b = rec.inputs[0].data, rec.inputs[1].data
    return [g @ b.T, a.T @ g]


def _vjp_conv2d_input_grad(rec, g):
    # u = adjoint-conv(go, k); <gg, u> = <conv(gg, k), go>
    go, k = rec.inputs[0].data, rec.inputs[1].data
    s, p = rec.attrs["stride"], rec.attrs["pad"]
    shared: dict = {}
    return [
        _conv2d_fwd_arr(g, k, s, p, cols_out=shared),
        _conv2d_filter_grad_arr(g, go, s, p, (k.shape[2], k.shape[3]),
                                cols=shared["cols"]),
    ]


def _vjp_broadcast_to(rec, g):
    return [_unbroadcast(g, rec.inputs[0].shape)]


def _vjp_reshape(rec, g):
    return [g.reshape(rec.inputs[0].shape)]


_VJP: dict[str, Callable] = {
    "linear": _vjp_linear,
    "conv2d": _vjp_conv2d,
    "conv_transpose2d": _vjp_conv_transpose2d,
    "batchnorm2d": _vjp_batchnorm2d,
    "instancenorm2d": _vjp_instancenorm2d,
    "relu": _vjp_relu,
    "leaky_relu": _vjp_leaky_relu,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "add": _vjp_add,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "concat": _vjp_concat,
    "flatten": _vjp_flatten,
    "global_avg_pool": _vjp_global_avg_pool,
    "bilinear_resize": _vjp_bilinear_resize,
    "l1_loss": _vjp_l1_loss,
    "mse_loss": _vjp_mse_loss,
    "softmax_cross_entropy": _vjp_softmax_cross_entropy,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "sqrt": _vjp_sqrt,
    "norm2": _vjp_norm2,
    "_matmul": _vjp_matmul,
    "_conv2d_input_grad": _vjp_conv2d_input_grad,
    "_broadcast_to": _vjp_broadcast_to,
    "_reshape": _vjp_reshape,
}


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; accumulates into leaf ``.grad`` slots.

    Returns a map of leaf tensor id to its gradient array.  Intermediate
    cotangents are dropped as soon as the sweep passes them.
    """
    tape = tape if tape is not None else _ACTIVE_TAPE
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if tape is None or not tape.records:
        raise ContractError("backward on an empty tape")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss value")
    produced = {rec.output_id for rec in tape.records}
    cot: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for idx in range(len(tape.records) - 1, -1, -1):
        rec = tape.records[idx]
        g = cot.pop(rec.output_id, None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at op #{idx} ({rec.kind})")
        grads = _VJP[rec.kind](rec, g)
        for inp, ga in zip(rec.inputs, grads):
            if ga is None or not inp.requires_grad:
                continue
            if inp.id in produced:
                acc = cot.get(inp.id)
                cot[inp.id] = ga if acc is None else acc + ga
            else:
                inp.grad = ga.copy() if inp.grad is None else inp.grad + ga
                leaves[inp.id] = inp.grad
    return leaves


# ops through which the recorded reverse sweep of input_gradient may pass;
# everything here is linear or piecewise-linear in the swept input
_DOUBLE_BACKPROP_OPS = frozenset({
    "linear", "conv2d", "add", "scale", "sum", "mean",
    "relu", "leaky_relu", "flatten", "global_avg_pool", "mul",
})


def _graph_linear(rec, g, live):
    out = [None] * len(rec.inputs)
    if live[0]:
        out[0] = _record("_matmul", (g, rec.inputs[1]), _fwd_matmul([g.data, rec.inputs[1].data], {}, {}), {}, {})
    return out


def _graph_conv2d(rec, g, live):
    out = [None] * len(rec.inputs)
    if live[0]:
        x, w = rec.inputs[0], rec.inputs[1]
        attrs = {"stride": rec.attrs["stride"], "pad": rec.attrs["pad"], "hw": (x.shape[2], x.shape[3])}
        out[0] = _record("_conv2d_input_grad", (g, w), _fwd_conv2d_input_grad([g.data, w.data], attrs, {}), attrs, {})
    return out


def _graph_add(rec, g, live):
    out = []
    for i, inp in enumerate(rec.inputs):
        if not live[i]:
            out.append(None)
        elif inp.shape == g.shape:
            out.append(g)
        else:
            out.append(_reduce_like(g, inp.shape))
    return out


def _graph_scale(rec, g, live):
    return [scale(g, rec.attrs["c"]) if live[0] else None]


def _graph_sum(rec, g, live):
    if not live[0]:
        return [None]
    x = rec.inputs[0]
    shp = x.shape
    kd = [1 if a in rec.attrs["axes"] else shp[a] for a in range(len(shp))]
    t = g
    if not rec.attrs["keepdims"]:
        t = _record("_reshape", (t,), _fwd_reshape([t.data], {"shape": tuple(kd)}, {}), {"shape": tuple(kd)}, {})
    return [_record("_broadcast_to", (t,), _fwd_broadcast_to([t.data], {"shape": shp}, {}), {"shape": shp}, {})]


def _graph_mean(rec, g, live):
    if not live[0]:
        return [None]
    b = _graph_sum(rec, g, live)[0]
    count = int(np.prod([rec.inputs[0].shape[a] for a in rec.attrs["axes"]])) or 1
    return [scale(b, 1.0 / count)]


def _graph_relu(rec, g, live):
    if not live[0]:
        return [None]
    mask = Tensor((rec.inputs[0].data > 0).astype(g.dtype))
    return [mul(g, mask)]


def _graph_leaky_relu(rec, g, live):
    if not live[0]:
        return [None]
    x = rec.inputs[0].data
    mask = Tensor(np.where(x > 0, x.dtype.type(1), x.dtype.type(rec.attrs["slope"])))
    return [mul(g, mask)]


def _graph_flatten(rec, g, live):
    if not live[0]:
        return [None]
    shp = rec.inputs[0].shape
    return [_record("_reshape", (g,), _fwd_reshape([g.data], {"shape": shp}, {}), {"shape": shp}, {})]


def _graph_global_avg_pool(rec, g, live):
    if not live[0]:
        return [None]
    n, c, h, w = rec.inputs[0].shape
    t = _record("_reshape", (g,), _fwd_reshape([g.data], {"shape": (n, c, 1, 1)}, {}), {"shape": (n, c, 1, 1)}, {})
    t = _record("_broadcast_to", (t,), _fwd_broadcast_to([t.data], {"shape": (n, c, h, w)}, {}), {"shape": (n, c, h, w)}, {})
    return [scale(t, 1.0 / (h * w))]


def _graph_mul(rec, g, live):
    if live[0] and live[1]:
        raise DoubleBackpropError("mul with both operands on the differentiated path is not piecewise-linear")
    a, b = rec.inputs
    out = [None, None]
    if live[0]:
        t = mul(g, b)
        out[0] = t if t.shape == a.shape else _reduce_like(t, a.shape)
    if live[1]:
        t = mul(g, a)
        out[1] = t if t.shape == b.shape else _reduce_like(t, b.shape)
    return out


def _reduce_like(t: Tensor, shape: tuple) -> Tensor:
    if t.ndim == len(shape):
        axes = tuple(a for a in range(t.ndim) if shape[a] == 1 and t.shape[a] != 1)
        r = reduce_sum(t, axes=axes, keepdims=True)
    else:
        lead = tuple(range(t.ndim - len(shape)))
        r = reduce_sum(t, axes=lead, keepdims=False)
        axes = tuple(a for a in range(len(shape)) if shape[a] == 1 and r.shape[a] != 1)
        if axes:
            r = reduce_sum(r, axes=axes, keepdims=True)
    if r.shape != shape:
        r = _record("_reshape", (r,), _fwd_reshape([r.data], {"shape": shape}, {}), {"shape": shape}, {})
    return r


_GRAPH_VJP: dict[str, Callable] = {
    "linear": _graph_linear,
    "conv2d": _graph_conv2d,
    "add": _graph_add,
    "scale": _graph_scale,
    "sum": _graph_sum,
    "mean": _graph_mean,
    "relu": _graph_relu,
    "leaky_relu": _graph_leaky_relu,
    "flatten": _graph_flatten,
    "global_avg_pool": _graph_global_avg_pool,
    "mul": _graph_mul,
}


def input_gradient(output: Tensor, wrt: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Gradient of a per-sample scalar output w.r.t. ``wrt`` as a graph node.

    The subgraph between ``wrt`` and ``output`` must be piecewise-linear
    (see ``_DOUBLE_BACKPROP_OPS``); a later ``backward`` then differentiates
    any function of the returned gradient with respect to parameters used
    inside that subgraph.
    """
    tape = tape if tape is not None else _ACTIVE_TAPE
    if tape is None:
        raise ContractError("input_gradient requires an active tape")
    if output.ndim not in (1, 2) or (output.ndim == 2 and output.shape[1] != 1):
        raise ContractError(f"input_gradient expects per-sample scalar output, got shape {output.shape}")

    # live = descendants of wrt, in record order
    live_ids = {wrt.id}
    rec_live: list[tuple[OpRecord, tuple[bool, ...]]] = []
    for rec in tape.records:
        mask = tuple(t.id in live_ids for t in rec.inputs)
        if any(mask):
            live_ids.add(rec.output_id)
            rec_live.append((rec, mask))

    # needed = ancestors of output among live records
    needed_ids = {output.id}
    chain: list[tuple[OpRecord, tuple[bool, ...]]] = []
    for rec, mask in reversed(rec_live):
        if rec.output_id in needed_ids:
            chain.append((rec, mask))
            for t, m in zip(rec.inputs, mask):
                if m:
                    needed_ids.add(t.id)
    chain.reverse()

    for rec, _ in chain:
        if rec.kind not in _DOUBLE_BACKPROP_OPS:
            raise DoubleBackpropError(
                f"op {rec.kind!r} on the path from the input to the critic output does not support double backprop")

    seed = Tensor(np.ones(output.shape, dtype=output.dtype))
    cot: dict[int, Tensor] = {output.id: seed}
    for rec, mask in reversed(chain):
        g = cot.pop(rec.output_id, None)
        if g is None:
            continue
        grads = _GRAPH_VJP[rec.kind](rec, g, mask)
        for inp, m, gt in zip(rec.inputs, mask, grads):
            if not m or gt is None:
                continue
            acc = cot.get(inp.id)
            cot[inp.id] = gt if acc is None else add(acc, gt)
    result = cot.get(wrt.id)
    if result is None:
        return Tensor(np.zeros(wrt.shape, dtype=wrt.dtype))
    return result


def stop_gradient(t: Tensor) -> Tensor:
    """Value-identical tensor with all reverse flow blocked."""
    return Tensor(t.data)


def finite_difference_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar-valued ``f`` at ``x``.

    Each probe runs inside a throwaway tape (rather than ``no_grad``) so
    that functions built on ``input_gradient`` remain evaluable.
    """
    if h <= 0:
        raise ContractError("finite_difference_gradient: h must be positive")

    def _eval() -> float:
        with Tape():
            out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval()
        flat[i] = orig - h
        fm = _eval()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape).astype(x.dtype if x.dtype == np.float64 else np.float64))
