"""Fixed (non-learned) ISTA for low-rank + sparse video decomposition.

Solves ``min 1/2 ||D - L - S||_F^2 + lambda1 ||L||_* + lambda2 ||S||_{1,2}``
on the pixels x frames matrix of a video.  Both blocks take a proximal
gradient step from the same iterate:

    L <- SVT_{lambda1/Lf}((1 - 1/Lf) L - S/Lf + D/Lf)
    S <- psi_{lambda2/Lf}((1 - 1/Lf) S - L/Lf + D/Lf)

with ``Lf = 2`` (the spectral norm of ``A^T A`` for ``A = [I, I]``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import prox
from .linalg import thin_svd
from .tensor import ContractViolation


class DivergenceError(RuntimeError):
    pass


@dataclass
class IstaConfig:
    lambda1: float
    lambda2: float
    max_iters: int = 300
    tol: float = 1e-6
    lipschitz: float = 2.0
    sparsity: str = "group"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolation("lambda1 and lambda2 must be >= 0")
        if self.max_iters < 1:
            raise ContractViolation("max_iters must be >= 1")
        if self.tol <= 0 or self.lipschitz <= 0:
            raise ContractViolation("tol and lipschitz must be > 0")
        if self.sparsity not in prox.SPARSITY_MODES:
            raise ContractViolation(f"sparsity must be one of {prox.SPARSITY_MODES}")


@dataclass
class DecompResult:
    s: np.ndarray
    l: np.ndarray
    iters_run: int = 0
    residual_history: List[float] = field(default_factory=list)
    objective_history: List[float] = field(default_factory=list)


def video_to_matrix(video: np.ndarray) -> np.ndarray:
    """(T, [1,] H, W) video -> (H*W, T) matrix, one row per pixel."""
    v = np.asarray(video)
    if v.ndim == 4:
        if v.shape[1] != 1:
            raise ContractViolation(f"expected a single-channel video, got shape {v.shape}")
        v = v[:, 0]
    if v.ndim != 3:
        raise ContractViolation(f"expected a (T,1,H,W) or (T,H,W) video, got shape {v.shape}")
    t = v.shape[0]
    return v.reshape(t, -1).T


def matrix_to_video(m: np.ndarray, shape: tuple) -> np.ndarray:
    t = shape[0]
    return np.ascontiguousarray(m.T).reshape(shape)


def objective(d, l, s, cfg: IstaConfig) -> float:
    """``1/2 ||D - L - S||_F^2 + lambda1 ||L||_* + lambda2 ||S||``.

    Accepts videos or pixel x frame matrices (all three in the same layout).
    """
    d, l, s = (np.asarray(x, dtype=np.float64) for x in (d, l, s))
    if not (d.shape == l.shape == s.shape):
        raise ContractViolation(f"objective: shape mismatch {d.shape}, {l.shape}, {s.shape}")
    if d.ndim != 2:
        d, l, s = (video_to_matrix(x) for x in (d, l, s))
    fit = 0.5 * float(np.sum((d - l - s) ** 2))
    return fit + cfg.lambda1 * prox.nuclear_norm(l) + cfg.lambda2 * _sparse_norm(s, cfg.sparsity)


def _sparse_norm(s: np.ndarray, sparsity: str) -> float:
    return prox.l12_norm(s) if sparsity == "group" else prox.l1_norm(s)


def ista_step(d: np.ndarray, l: np.ndarray, s: np.ndarray, cfg: IstaConfig):
    """One joint proximal-gradient update on pixel x frame matrices.

    Returns ``(l_next, s_next, nuclear_norm_of_l_next)``.
    """
    inv = 1.0 / cfg.lipschitz
    zl = (1.0 - inv) * l - inv * s + inv * d
    zs = (1.0 - inv) * s - inv * l + inv * d
    u, sig, v = thin_svd(zl)
    shrunk = np.maximum(sig - cfg.lambda1 * inv, 0.0)
    l_next = (u * shrunk) @ v.T
    s_next = np.asarray(prox.sparse_prox_array(zs, cfg.lambda2 * inv, cfg.sparsity), dtype=np.float64)
    return l_next, s_next, float(shrunk.sum())


def ista_solve(d, cfg: IstaConfig, divergence_window: int = 10) -> DecompResult:
    """Decompose video ``d`` (T x 1 x H x W) into low-rank ``l`` and sparse ``s``.

    Starts from ``L = S = 0`` and stops when the relative change of ``(L, S)``
    drops below ``cfg.tol`` or after ``cfg.max_iters`` iterations.  Raises
    :class:`DivergenceError` if the objective rises for ``divergence_window``
    consecutive iterations.
    """
    d = np.asarray(d)
    if not np.isfinite(d).all():
        raise ContractViolation("ista_solve: input contains non-finite values")
    shape = d.shape
    dm = video_to_matrix(d).astype(np.float64)
    l = np.zeros_like(dm)
    s = np.zeros_like(dm)
    result = DecompResult(s=None, l=None)
    prev_obj = 0.5 * float(np.sum(dm**2))
    rising = 0
    for k in range(cfg.max_iters):
        l_next, s_next, nuc = ista_step(dm, l, s, cfg)
        step = float(np.sqrt(np.sum((l_next - l) ** 2) + np.sum((s_next - s) ** 2)))
        size = float(np.sqrt(np.sum(l_next**2) + np.sum(s_next**2)))
        l, s = l_next, s_next
        obj = 0.5 * float(np.sum((dm - l - s) ** 2)) + cfg.lambda1 * nuc + cfg.lambda2 * _sparse_norm(s, cfg.sparsity)
        result.residual_history.append(step)
        result.objective_history.append(obj)
        result.iters_run = k + 1
        rising = rising + 1 if obj > prev_obj * (1 + 1e-12) + 1e-12 else 0
        if rising >= divergence_window:
            raise DivergenceError(
                f"objective increased for {rising} consecutive iterations (iteration {k + 1}, value {obj:.6g})"
            )
        prev_obj = obj
        if step <= cfg.tol * max(size, np.finfo(np.float64).tiny):
            break
    result.l = matrix_to_video(l, shape).astype(np.float32)
    result.s = matrix_to_video(s, shape).astype(np.float32)
    return result


def tune_lambda2_by_support(d, lambda1: float, target_support: int, cfg_kwargs=None, lo=None, hi=None, steps=30):
    """Bisect ``lambda2`` (on a log scale) so the number of nonzero entries of
    the recovered ``s`` matches ``target_support``.

    Larger ``lambda2`` means fewer nonzeros, so the count is monotone enough in
    practice for bisection.  Returns ``(lambda2, result)``.
    """
    cfg_kwargs = dict(cfg_kwargs or {})
    dm = video_to_matrix(np.asarray(d))
    lo = lo if lo is not None else lambda1 * 1e-3
    hi = hi if hi is not None else float(np.linalg.norm(dm, axis=1).max()) * 2
    best = None
    for _ in range(steps):
        mid = float(np.sqrt(lo * hi))
        res = ista_solve(d, IstaConfig(lambda1=lambda1, lambda2=mid, **cfg_kwargs))
        count = int(np.count_nonzero(res.s))
        best = (mid, res)
        if count > target_support:
            lo = mid
        elif count < target_support:
            hi = mid
        else:
            break
    return best
