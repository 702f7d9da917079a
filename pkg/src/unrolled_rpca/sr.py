"""Per-stream super-resolution tail: conv head, residual block, convolutional
LSTM over frames, and a sub-pixel (pixel shuffle) x2 upscale."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .tensor import ContractViolation, Tensor, concat, relu, sigmoid, stack, tanh

GATES = ("i", "f", "c", "o")


def uniform_kernel(rng: np.random.Generator, shape, fan_in: Optional[int] = None) -> np.ndarray:
    """Zero-mean uniform init with bound ``1/sqrt(fan_in)``."""
    fan_in = fan_in or int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class ClstmState:
    """Cell memory ``c`` and hidden map ``h``; ``None`` means all-zero (sequence start)."""

    c: Optional[Tensor] = None
    h: Optional[Tensor] = None


class SrParams:
    """Named tensors of one SR tail.

    Names: ``head.*``, ``res1.*``, ``res2.*``, ``clstm.w_x{i,f,c,o}``,
    ``clstm.w_h{i,f,c,o}``, ``clstm.w_c{i,f,o}`` (Hadamard maps of shape
    ``(F, h, w)``), ``clstm.b_{i,f,c,o}``, ``tail.*``; with the CLSTM ablated
    the ``clstm.*`` block is replaced by a plain ``bypass.*`` conv.
    """

    def __init__(self, features: int, field_hw: tuple, rng: np.random.Generator, ablate_clstm: bool = False):
        nf = features
        fh, fw = field_hw
        self.features = nf
        self.field_hw = (fh, fw)
        self.ablate_clstm = ablate_clstm
        t = OrderedDict()
        t["head.weight"] = uniform_kernel(rng, (nf, 1, 3, 3))
        t["head.bias"] = np.zeros(nf, np.float32)
        for name in ("res1", "res2"):
            t[f"{name}.weight"] = uniform_kernel(rng, (nf, nf, 3, 3))
            t[f"{name}.bias"] = np.zeros(nf, np.float32)
        if ablate_clstm:
            t["bypass.weight"] = uniform_kernel(rng, (nf, nf, 3, 3))
            t["bypass.bias"] = np.zeros(nf, np.float32)
        else:
            for g in GATES:
                t[f"clstm.w_x{g}"] = uniform_kernel(rng, (nf, nf, 3, 3))
            for g in GATES:
                t[f"clstm.w_h{g}"] = uniform_kernel(rng, (nf, nf, 3, 3))
            for g in ("i", "f", "o"):
                t[f"clstm.w_c{g}"] = np.zeros((nf, fh, fw), np.float32)
            for g in GATES:
                t[f"clstm.b_{g}"] = np.zeros(nf, np.float32)
        t["tail.weight"] = uniform_kernel(rng, (4, nf, 3, 3))
        t["tail.bias"] = np.zeros(4, np.float32)
        self.tensors = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in t.items())

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]

    def x_kernel(self):
        """Input-to-gate kernels stacked as one ``(4F, F, 3, 3)`` conv plus biases."""
        w = concat([self[f"clstm.w_x{g}"] for g in GATES], axis=0)
        b = concat([self[f"clstm.b_{g}"] for g in GATES], axis=0)
        return w, b

    def h_kernel(self) -> Tensor:
        return concat([self[f"clstm.w_h{g}"] for g in GATES], axis=0)


def _gates(xg: Tensor, state: ClstmState, p: SrParams, wh: Tensor):
    """Gate algebra for one frame given the precomputed input part ``xg``
    (``W_x* * x + b_*`` stacked over the four gates)."""
    nf = p.features
    if xg.shape[-2:] != p.field_hw:
        raise ContractViolation(
            f"CLSTM field {xg.shape[-2:]} does not match the peephole resolution {p.field_hw}"
        )
    z = xg
    if state.h is not None:
        z = z + F.conv2d(state.h, wh, None, padding=1)
    ax = z.ndim - 3
    sl = lambda k: (slice(None),) * ax + (slice(k * nf, (k + 1) * nf),)  # noqa: E731
    zi, zf, zc, zo = (z[sl(k)] for k in range(4))
    if state.c is None:
        i = sigmoid(zi)
        c = i * tanh(zc)
    else:
        i = sigmoid(zi + p["clstm.w_ci"] * state.c)
        f = sigmoid(zf + p["clstm.w_cf"] * state.c)
        c = f * state.c + i * tanh(zc)
    o = sigmoid(zo + p["clstm.w_co"] * c)
    h = o * tanh(c)
    return h, ClstmState(c=c, h=h)


def clstm_step(x: Tensor, state: ClstmState, p: SrParams):
    """One ConvLSTM update on a ``(F, h, w)`` (or ``(B, F, h, w)``) feature map.

    Returns ``(h_out, new_state)``.
    """
    wx, bx = p.x_kernel()
    xg = F.conv2d(x, wx, bx, padding=1)
    return _gates(xg, state, p, p.h_kernel())


def sr_forward(stream: Tensor, p: SrParams, state: Optional[ClstmState] = None):
    """Refine and upscale a ``(B, T, 1, h, w)`` (or ``(T, 1, h, w)``) stream by 2.

    Per frame: ``f = relu(head(x))``, ``f' = f + res2(relu(res1(f)))``, the
    ConvLSTM runs over frames in temporal order, and the tail conv feeds a
    pixel shuffle with ``r = 2``.  Returns ``(upscaled, final_state)``.
    """
    squeeze = stream.ndim == 4
    if squeeze:
        stream = stream.reshape((1,) + stream.shape)
    b, t, c, h, w = stream.shape
    if c != 1:
        raise ContractViolation(f"sr_forward: expected 1-channel stream, got {c} channels")
    nf = p.features
    x = stream.reshape(b * t, 1, h, w)
    f = relu(F.conv2d(x, p["head.weight"], p["head.bias"], padding=1))
    r = F.conv2d(relu(F.conv2d(f, p["res1.weight"], p["res1.bias"], padding=1)), p["res2.weight"], p["res2.bias"], padding=1)
    f = f + r
    state = state or ClstmState()
    if p.ablate_clstm:
        hseq = F.conv2d(f, p["bypass.weight"], p["bypass.bias"], padding=1)
    else:
        wx, bx = p.x_kernel()
        wh = p.h_kernel()
        xg = F.conv2d(f, wx, bx, padding=1).reshape(b, t, 4 * nf, h, w)
        hs = []
        for ti in range(t):
            hcur, state = _gates(xg[:, ti], state, p, wh)
            hs.append(hcur)
        hseq = stack(hs, axis=1).reshape(b * t, nf, h, w)
    y = F.pixel_shuffle(F.conv2d(hseq, p["tail.weight"], p["tail.bias"], padding=1), 2)
    y = y.reshape(b, t, 1, 2 * h, 2 * w)
    if squeeze:
        y = y.reshape(t, 1, 2 * h, 2 * w)
    return y, state
