"""Unrolled low-rank + sparse network.

Each layer pools the data and both streams by 2, applies a learned
proximal-gradient update

    L' = SVT_lambda1(P5 * L + P3 * S + P1 * D)
    S' = psi_lambda2(P6 * S + P4 * L + P2 * D)

on the pixels x frames reshape of every patch, and sends each stream through
its own super-resolution tail back to full resolution.  With the reference
kernels (``P1 = P2 = P5 = P6 = delta/2``, ``P3 = P4 = -delta/2``), pooling
bypassed and pass-through tails, a layer is exactly one fixed ISTA iteration
with step ``1/2``.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import functional as F
from . import io as urtf_io
from .ista import DecompResult
from .linalg import thin_svd
from .prox import SPARSITY_MODES, SVT_GRAD_MODES, sparse_prox, svt
from .sr import ClstmState, SrParams, sr_forward, uniform_kernel
from .tensor import ContractViolation, NonFiniteError, Tensor, concat, no_grad

P_NAMES = ("p1", "p2", "p3", "p4", "p5", "p6")
P_INITS = ("ista", "uniform")


def layer_kernel_size(index: int) -> int:
    """5x5 kernels for the first two layers, 3x3 afterwards (0-based index)."""
    return 5 if index < 2 else 3


@dataclass
class NetworkConfig:
    k_layers: int = 4
    features: int = 12
    patch_hw: Tuple[int, int] = (64, 64)
    sparsity: str = "group"
    svt_grad: str = "exact"
    ablate_clstm: bool = False
    ablate_sr: bool = False
    p_init: str = "ista"
    p_init_noise: float = 0.01
    # test hooks
    bypass_pool: bool = False
    sr_passthrough: bool = False

    def __post_init__(self):
        self.patch_hw = tuple(int(v) for v in self.patch_hw)
        if self.k_layers < 1:
            raise ContractViolation("k_layers must be >= 1")
        if self.features < 1:
            raise ContractViolation("features must be >= 1")
        if any(v < 2 or v % 2 for v in self.patch_hw):
            raise ContractViolation(f"patch_hw must be even and >= 2, got {self.patch_hw}")
        if self.sparsity not in SPARSITY_MODES:
            raise ContractViolation(f"sparsity must be one of {SPARSITY_MODES}")
        if self.svt_grad not in SVT_GRAD_MODES:
            raise ContractViolation(f"svt_grad must be one of {SVT_GRAD_MODES}")
        if self.p_init not in P_INITS:
            raise ContractViolation(f"p_init must be one of {P_INITS}")

    @property
    def pooled(self) -> bool:
        return not (self.bypass_pool or self.ablate_sr)

    @property
    def uses_sr(self) -> bool:
        return not (self.ablate_sr or self.sr_passthrough)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_hw"] = list(self.patch_hw)
        return d


def reference_kernel(name: str, k: int) -> np.ndarray:
    """``+-delta/2`` kernel that makes the layer a plain ISTA step."""
    w = np.zeros((1, 1, k, k), np.float32)
    w[0, 0, k // 2, k // 2] = -0.5 if name in ("p3", "p4") else 0.5
    return w


class LayerParams:
    """Parameters of one unrolled layer: six 1->1 kernels with biases, two
    thresholds, and the two SR tails (absent when the SR module is ablated)."""

    def __init__(self, index: int, cfg: NetworkConfig, rng: np.random.Generator):
        self.index = index
        self.k = layer_kernel_size(index)
        k = self.k
        t: "OrderedDict[str, Tensor]" = OrderedDict()
        for name in P_NAMES:
            if cfg.p_init == "ista":
                noise = rng.uniform(-cfg.p_init_noise, cfg.p_init_noise, size=(1, 1, k, k)).astype(np.float32)
                w = reference_kernel(name, k) + noise
            else:
                w = uniform_kernel(rng, (1, 1, k, k))
            t[f"{name}.weight"] = Tensor(w, requires_grad=True)
            t[f"{name}.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
        t["lambda1"] = Tensor(np.float32(0.0), requires_grad=True)
        t["lambda2"] = Tensor(np.float32(0.0), requires_grad=True)
        self.tensors = t
        self.sr_s: Optional[SrParams] = None
        self.sr_l: Optional[SrParams] = None
        if cfg.uses_sr:
            field_hw = (cfg.patch_hw[0] // 2, cfg.patch_hw[1] // 2)
            self.sr_s = SrParams(cfg.features, field_hw, rng, cfg.ablate_clstm)
            self.sr_l = SrParams(cfg.features, field_hw, rng, cfg.ablate_clstm)

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]

    def named(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.tensors)
        for tag, sr in (("sr_s", self.sr_s), ("sr_l", self.sr_l)):
            if sr is not None:
                out.update((f"{tag}.{k}", v) for k, v in sr.tensors.items())
        return out

    def fused_kernel(self) -> Tuple[Tensor, Tensor]:
        """All six convolutions as one ``(2, 3, k, k)`` conv over ``[D, L, S]``.

        Output channel 0 is the low-rank update ``P1*D + P5*L + P3*S``, channel 1
        the sparse update ``P2*D + P4*L + P6*S``.
        """
        w = lambda n: self[f"{n}.weight"]  # noqa: E731
        b = lambda n: self[f"{n}.bias"]  # noqa: E731
        row_l = concat([w("p1"), w("p5"), w("p3")], axis=1)
        row_s = concat([w("p2"), w("p4"), w("p6")], axis=1)
        kernel = concat([row_l, row_s], axis=0)
        bias = concat([b("p1") + b("p5") + b("p3"), b("p2") + b("p4") + b("p6")], axis=0)
        return kernel, bias


class NetworkParams:
    """Ordered list of layer parameters plus the configuration that built them."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.layers: List[LayerParams] = [LayerParams(i, cfg, rng) for i in range(cfg.k_layers)]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        """Checkpoint names ``layer{i}.{p1..p6|lambda1|lambda2|sr_s.*|sr_l.*}``, 1-based ``i``."""
        out = OrderedDict()
        for i, layer in enumerate(self.layers, start=1):
            out.update((f"layer{i}.{k}", v) for k, v in layer.named().items())
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ContractViolation(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in named.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ContractViolation(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def clamp_thresholds(self) -> None:
        for layer in self.layers:
            for name in ("lambda1", "lambda2"):
                t = layer[name]
                t.data = np.maximum(t.data, 0).astype(np.float32)

    def set_thresholds(self, lambda1: float, lambda2: float) -> None:
        for layer in self.layers:
            layer["lambda1"].data = np.asarray(lambda1, np.float32)
            layer["lambda2"].data = np.asarray(lambda2, np.float32)


def save_network(path, params: NetworkParams, meta: Optional[dict] = None) -> None:
    info = {"config": params.cfg.to_dict()}
    info.update(meta or {})
    urtf_io.save_checkpoint(path, params.state_dict(), info)


def load_network(path) -> Tuple[NetworkParams, dict]:
    state, meta = urtf_io.load_checkpoint(path)
    if "config" not in meta:
        raise ContractViolation(f"{path}: checkpoint has no network config")
    cfg = NetworkConfig(**meta["config"])
    params = NetworkParams(cfg)
    params.load_state_dict(state)
    return params, meta


# -- forward pass -------------------------------------------------------------


def _to_matrix(stream: Tensor) -> Tensor:
    # (B, T, 1, h, w) -> (B, h*w, T)
    b, t, _, h, w = stream.shape
    return stream.reshape(b, t, h * w).transpose(0, 2, 1)


def _from_matrix(m: Tensor, t: int, h: int, w: int) -> Tensor:
    b = m.shape[0]
    return m.transpose(0, 2, 1).reshape(b, t, 1, h, w)


def _upsample_nearest(stream: Tensor) -> Tensor:
    b, t, c, h, w = stream.shape
    x = stream.reshape(b * t, 1, h, w)
    x = concat([x, x, x, x], axis=1)
    return F.pixel_shuffle(x, 2).reshape(b, t, c, 2 * h, 2 * w)


@dataclass
class LayerStates:
    s: ClstmState = field(default_factory=ClstmState)
    l: ClstmState = field(default_factory=ClstmState)


def layer_forward(
    d: Tensor,
    l_in: Tensor,
    s_in: Tensor,
    layer: LayerParams,
    cfg: NetworkConfig,
    states: Optional[LayerStates] = None,
):
    """One unrolled iteration on ``(B, T, 1, H, W)`` streams.

    Returns ``(l_out, s_out, states)`` with outputs of the input shape.
    """
    if not (d.shape == l_in.shape == s_in.shape) or d.ndim != 5 or d.shape[2] != 1:
        raise ContractViolation(f"layer_forward: need matching (B,T,1,H,W) inputs, got {d.shape}, {l_in.shape}, {s_in.shape}")
    b, t, _, hh, ww = d.shape
    if hh % 2 or ww % 2:
        raise ContractViolation(f"layer_forward: spatial dims must be even, got {hh}x{ww}")
    states = states or LayerStates()
    if cfg.pooled:
        d, l_in, s_in = (F.avg_pool2(x) for x in (d, l_in, s_in))
    h, w = d.shape[-2:]
    x = concat([d, l_in, s_in], axis=2).reshape(b * t, 3, h, w)
    kernel, bias = layer.fused_kernel()
    z = F.conv2d(x, kernel, bias, padding=(layer.k - 1) // 2).reshape(b, t, 2, h, w)
    zl = z[:, :, 0:1]
    zs = z[:, :, 1:2]
    l_mid = _from_matrix(svt(_to_matrix(zl), layer["lambda1"], cfg.svt_grad), t, h, w)
    s_mid = _from_matrix(sparse_prox(_to_matrix(zs), layer["lambda2"], cfg.sparsity), t, h, w)
    if cfg.uses_sr:
        s_out, st_s = sr_forward(s_mid, layer.sr_s, states.s)
        l_out, st_l = sr_forward(l_mid, layer.sr_l, states.l)
        states = LayerStates(s=st_s, l=st_l)
    elif cfg.pooled:
        s_out, l_out = _upsample_nearest(s_mid), _upsample_nearest(l_mid)
    else:
        s_out, l_out = s_mid, l_mid
    return l_out, s_out, states


def forward(d, params: NetworkParams) -> Tuple[Tensor, Tensor]:
    """Run all layers from ``L = S = 0`` with fresh recurrent state.

    ``d`` is a ``(T, 1, H, W)`` patch or a ``(B, T, 1, H, W)`` batch (array or
    Tensor).  Returns ``(l, s)`` Tensors in the input layout.
    """
    d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=np.float32))
    squeeze = d.ndim == 4
    if squeeze:
        d = d.reshape((1,) + d.shape)
    if d.ndim != 5:
        raise ContractViolation(f"forward: expected (T,1,H,W) or (B,T,1,H,W), got shape {d.shape}")
    zeros = Tensor(np.zeros(d.shape, dtype=d.dtype))
    l, s = zeros, zeros
    for i, layer in enumerate(params.layers, start=1):
        try:
            l, s, _ = layer_forward(d, l, s, layer, params.cfg)
        except NonFiniteError as exc:
            raise NonFiniteError(f"layer {i}: {exc}") from exc
    if squeeze:
        l = l.reshape(l.shape[1:])
        s = s.reshape(s.shape[1:])
    return l, s


def decompose(d: np.ndarray, params: NetworkParams) -> DecompResult:
    """Inference wrapper returning numpy streams in a :class:`DecompResult`."""
    with no_grad():
        l, s = forward(d, params)
    return DecompResult(s=s.data, l=l.data, iters_run=len(params.layers))


def init_thresholds(params: NetworkParams, batch: np.ndarray, scale: float = 0.1) -> Tuple[float, float]:
    """Set every layer's thresholds from a warm-up batch.

    ``lambda1 = scale * mean singular value`` and ``lambda2 = scale * mean row
    norm`` of the (pooled) pixels x frames matrices; for elementwise sparsity
    the row norm is divided by ``sqrt(T)`` so the threshold is per entry.
    """
    d = np.asarray(batch, dtype=np.float32)
    if d.ndim == 4:
        d = d[None]
    if params.cfg.pooled:
        b, t, c, h, w = d.shape
        d = d.reshape(b, t, c, h // 2, 2, w // 2, 2).mean(axis=(4, 6))
    b, t = d.shape[:2]
    m = d.reshape(b, t, -1).transpose(0, 2, 1).astype(np.float64)
    lam1 = scale * float(thin_svd(m).s.mean())
    rows = np.linalg.norm(m, axis=-1).mean()
    if params.cfg.sparsity == "elementwise":
        rows = rows / np.sqrt(t)
    lam2 = scale * float(rows)
    params.set_thresholds(lam1, lam2)
    return lam1, lam2


def ista_reference_params(k_layers: int, lambda1: float, lambda2: float, sparsity: str = "group", patch_hw=(64, 64)) -> NetworkParams:
    """Network configured as ``k_layers`` plain ISTA iterations (step 1/2).

    ``lambda1``/``lambda2`` are the ISTA penalties; the layer thresholds are
    half of them.  Pooling is bypassed and the SR tails are pass-through.
    """
    cfg = NetworkConfig(
        k_layers=k_layers, patch_hw=patch_hw, sparsity=sparsity, bypass_pool=True, sr_passthrough=True, p_init="ista", p_init_noise=0.0
    )
    params = NetworkParams(cfg)
    for layer in params.layers:
        for name in P_NAMES:
            layer[f"{name}.weight"].data = reference_kernel(name, layer.k)
            layer[f"{name}.bias"].data = np.zeros(1, np.float32)
    params.set_thresholds(lambda1 / 2.0, lambda2 / 2.0)
    return params
