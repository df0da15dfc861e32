"""Hyper-Connections: n-stream generalised residual connections.

A hyper-hidden state holds ``n`` parallel copies of a token feature map,
laid out as (batch, tokens, streams, channels). Each wrapped layer reads an
``A_m``-weighted combination of the streams, writes its output back to every
stream scaled by the gate ``B``, and carries the streams forward through the
width matrix ``A_r``::

    H' = B^T . T(H A_m) + A_r^T H

Static mode learns ``A_m``, ``A_r`` and ``B`` directly. Dynamic mode adds a
scaled ``tanh`` correction computed from spatially pooled, RMS-normalised
stream features, one set of matrices per sample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODES = ("baseline", "static", "dynamic")
RMS_EPS = 1e-6
DYN_SCALE_INIT = 0.01
DYN_WEIGHT_STD = 0.01


@dataclass
class HyperState:
    """Hyper-hidden state of shape (B, L, n, C)."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"hyper state must be 4-D (B, L, n, C), got {self.data.shape}")

    @property
    def n(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def stream(self, i):
        return self.data[:, :, i, :]


@dataclass
class HCParams:
    """Connection weights for one wrapped layer.

    Static matrices are always present (and learnable). The dynamic
    projections ``w_am`` (n, C), ``w_ar`` (n, C, n), ``w_b`` (n, C) and the
    scalar ``dyn_scale`` only exist in dynamic mode.
    """

    mode: str
    n: int
    a_m: Tensor
    a_r: Tensor
    b: Tensor
    layer_index: int = 0
    w_am: Tensor | None = None
    w_ar: Tensor | None = None
    w_b: Tensor | None = None
    dyn_scale: Tensor | None = None

    def tensors(self):
        """Learnable tensors by name (empty for baseline)."""
        if self.mode == "baseline":
            return {}
        out = {"a_m": self.a_m, "a_r": self.a_r, "b": self.b}
        if self.mode == "dynamic":
            out.update(w_am=self.w_am, w_ar=self.w_ar, w_b=self.w_b, dyn_scale=self.dyn_scale)
        return out


@dataclass
class BetaRecord:
    layer_index: int
    epoch: int
    beta: np.ndarray = field(repr=True)


def _check_n(n):
    if int(n) != n or n < 1:
        raise ValueError(f"stream count must be a positive integer, got {n}")


def expand(x: Tensor, n: int) -> HyperState:
    """Replicate a (B, L, C) token map into ``n`` identical streams."""
    _check_n(n)
    if x.ndim != 3:
        raise ShapeError(f"expected (B, L, C) tokens, got {x.shape}")
    b, l, c = x.shape
    return HyperState(T.broadcast_to(T.reshape(x, (b, l, 1, c)), (b, l, n, c)))


def collapse(h: HyperState) -> Tensor:
    """Average the streams back into a (B, L, C) token map."""
    return T.mean(h.data, axis=2)


def init_params(mode: str, n: int, channels: int, layer_index: int = 0, seed=0,
                dtype="f32") -> HCParams:
    """Identity-preserving initialisation.

    ``A_r = I``, ``B = 1``, and ``A_m`` is the one-hot vector selecting stream
    ``layer_index mod n``, so a freshly wrapped network computes exactly its
    plain residual counterpart. Dynamic projections start small and random.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    _check_n(n)
    if mode == "baseline" and n != 1:
        raise ValueError("baseline mode requires n == 1")
    a_m = np.zeros(n)
    a_m[layer_index % n] = 1.0
    p = HCParams(
        mode=mode, n=n, layer_index=layer_index,
        a_m=Tensor(a_m, dtype=dtype, requires_grad=mode != "baseline"),
        a_r=Tensor(np.eye(n), dtype=dtype, requires_grad=mode != "baseline"),
        b=Tensor(np.ones(n), dtype=dtype, requires_grad=mode != "baseline"),
    )
    if mode == "dynamic":
        rng = np.random.default_rng(seed if isinstance(seed, np.random.SeedSequence)
                                    else np.random.SeedSequence([int(seed), layer_index]))
        p.w_am = Tensor(rng.normal(0, DYN_WEIGHT_STD, (n, channels)), dtype=dtype, requires_grad=True)
        p.w_ar = Tensor(rng.normal(0, DYN_WEIGHT_STD, (n, channels, n)), dtype=dtype, requires_grad=True)
        p.w_b = Tensor(rng.normal(0, DYN_WEIGHT_STD, (n, channels)), dtype=dtype, requires_grad=True)
        p.dyn_scale = Tensor(np.array(DYN_SCALE_INIT), dtype=dtype, requires_grad=True)
    return p


def compute_dynamic_mats(h: HyperState, p: HCParams):
    """Per-sample mixing matrices ``(A_m (B, n), A_r (B, n, n), B (B, n))``."""
    if p.mode != "dynamic":
        raise ValueError("compute_dynamic_mats requires a dynamic HCParams")
    bsz, _, n, c = h.shape
    if n != p.n or p.w_am.shape != (n, c):
        raise ShapeError(f"state {h.shape} does not match params (n={p.n}, C={p.w_am.shape[1]})")
    pooled = T.mean(h.data, axis=1)  # (B, n, C)
    rms = T.sqrt(T.mean(pooled * pooled, axis=2, keepdims=True) + RMS_EPS)
    pooled = pooled / rms

    am_dyn = T.tanh(T.sum(pooled * p.w_am, axis=2))  # (B, n)
    ar_dyn = T.matmul(T.reshape(pooled, (bsz, n, 1, c)), p.w_ar)  # (B, n, 1, n)
    ar_dyn = T.tanh(T.reshape(ar_dyn, (bsz, n, n)))
    b_dyn = T.tanh(T.sum(pooled * p.w_b, axis=2))

    a_m = p.a_m + p.dyn_scale * am_dyn
    a_r = p.a_r + p.dyn_scale * ar_dyn
    b_out = p.b + p.dyn_scale * b_dyn
    return a_m, a_r, b_out


def _tokens_layer(layer, x_in, expected):
    y = layer(x_in)
    if y.shape != expected:
        raise ShapeError(f"layer output {y.shape} does not match stream slice {expected}")
    return y


def shc_update(h: HyperState, p: HCParams, layer) -> HyperState:
    """Static update with input-independent ``A_m``, ``A_r``, ``B``."""
    if p.mode != "static":
        raise ValueError("shc_update requires a static HCParams")
    bsz, l, n, c = h.shape
    x_in = T.matmul(T.reshape(p.a_m, (1, n)), h.data)  # (B, L, 1, C)
    y = _tokens_layer(layer, T.reshape(x_in, (bsz, l, c)), (bsz, l, c))
    depth = T.matmul(T.reshape(p.b, (n, 1)), T.reshape(y, (bsz, l, 1, c)))
    width = T.matmul(T.transpose(p.a_r, (1, 0)), h.data)
    return HyperState(depth + width)


def dhc_update(h: HyperState, p: HCParams, layer) -> HyperState:
    """Dynamic update: the same algebra with per-sample matrices."""
    if p.mode != "dynamic":
        raise ValueError("dhc_update requires a dynamic HCParams")
    bsz, l, n, c = h.shape
    a_m, a_r, b_out = compute_dynamic_mats(h, p)
    x_in = T.matmul(T.reshape(a_m, (bsz, 1, 1, n)), h.data)
    y = _tokens_layer(layer, T.reshape(x_in, (bsz, l, c)), (bsz, l, c))
    depth = T.matmul(T.reshape(b_out, (bsz, 1, n, 1)), T.reshape(y, (bsz, l, 1, c)))
    width = T.matmul(T.reshape(T.transpose(a_r, (0, 2, 1)), (bsz, 1, n, n)), h.data)
    return HyperState(depth + width)


def hc_update(h: HyperState, p: HCParams, layer) -> HyperState:
    if p.mode == "static":
        return shc_update(h, p, layer)
    if p.mode == "dynamic":
        return dhc_update(h, p, layer)
    raise ValueError("baseline params do not define a hyper-connection update")


def extract_beta(p: HCParams, h: HyperState | None = None, epoch: int = 0) -> BetaRecord:
    """Depth gate row ``B`` for a layer; batch-averaged in dynamic mode."""
    if p.mode == "dynamic":
        if h is None:
            raise ValueError("dynamic mode needs a hyper state to evaluate beta")
        with T.no_grad():
            _, _, b_out = compute_dynamic_mats(h, p)
        beta = b_out.data.mean(axis=0)
    else:
        beta = np.array(p.b.data)
    return BetaRecord(layer_index=p.layer_index, epoch=epoch, beta=np.asarray(beta, dtype=np.float64))


def count_hc_params(p: HCParams, channels: int | None = None) -> int:
    """Learnable scalars a wrapping adds: n^2 + 2n static, plus nC + n^2 C + nC + 1 dynamic."""
    if p.mode == "baseline":
        return 0
    n = p.n
    total = n * n + 2 * n
    if p.mode == "dynamic":
        c = channels if channels is not None else p.w_am.shape[1]
        total += n * c + n * n * c + n * c + 1
    return total


def hc_param_formula(mode: str, n: int, channels: int) -> int:
    """Closed-form count without building parameters."""
    if mode == "baseline":
        return 0
    total = n * n + 2 * n
    if mode == "dynamic":
        total += 2 * n * channels + n * n * channels + 1
    return total


BETA_HEADER = ["epoch", "layer_index", "stream", "beta_value"]


def write_beta_csv(records, path):
    """Write beta records as rows of (epoch, layer_index, stream, beta_value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BETA_HEADER)
        for rec in records:
            for i, v in enumerate(rec.beta):
                w.writerow([rec.epoch, rec.layer_index, i, f"{float(v):.9g}"])
