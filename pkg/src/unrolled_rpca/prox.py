"""Proximal operators of the nuclear norm and of the sparsity penalties.

Each operator exists in two flavours: a plain numpy function (used by the
fixed ISTA solver) and a differentiable :class:`Tensor` op (used inside the
unrolled network).  Matrices are laid out pixels x frames, i.e. rows are
pixels and columns are frames, possibly with leading batch axes.
"""

from __future__ import annotations

import numpy as np

from .linalg import thin_svd
from .tensor import ContractViolation, Tensor

SVT_GRAD_MODES = ("exact", "fixed_vectors")
SPARSITY_MODES = ("group", "elementwise")


def _threshold_value(tau) -> float:
    val = float(tau.data) if isinstance(tau, Tensor) else float(tau)
    if not np.isfinite(val) or val < 0:
        raise ContractViolation(f"threshold must be a finite value >= 0, got {val}")
    return val


# -- plain numpy versions ----------------------------------------------------


def svt_array(m: np.ndarray, tau: float) -> np.ndarray:
    """``U diag(max(s - tau, 0)) V^T`` of the thin SVD of ``m``."""
    tau = _threshold_value(tau)
    u, s, v = thin_svd(m)
    shrunk = np.maximum(s - tau, 0.0)
    out = (u * shrunk[..., None, :]) @ np.swapaxes(v, -1, -2)
    return out.astype(np.result_type(m, np.float32), copy=False)


def row_soft_threshold_array(m: np.ndarray, lam: float) -> np.ndarray:
    """Shrink each row ``x`` to ``x * max(0, 1 - lam / ||x||)``; zero rows stay zero."""
    lam = _threshold_value(lam)
    m64 = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m64, axis=-1, keepdims=True)
    scale = np.where(norms > lam, 1.0 - lam / np.where(norms > 0, norms, 1.0), 0.0)
    return (m64 * scale).astype(np.result_type(m, np.float32), copy=False)


def soft_threshold_array(m: np.ndarray, lam: float) -> np.ndarray:
    lam = _threshold_value(lam)
    return (np.sign(m) * np.maximum(np.abs(m) - lam, 0)).astype(np.result_type(m, np.float32), copy=False)


def sparse_prox_array(m: np.ndarray, lam: float, sparsity: str = "group") -> np.ndarray:
    if sparsity == "group":
        return row_soft_threshold_array(m, lam)
    if sparsity == "elementwise":
        return soft_threshold_array(m, lam)
    raise ContractViolation(f"unknown sparsity mode {sparsity!r}; expected one of {SPARSITY_MODES}")


def nuclear_norm(m: np.ndarray) -> float:
    return float(thin_svd(m).s.sum())


def l12_norm(m: np.ndarray) -> float:
    """Sum over rows of the row Euclidean norms."""
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64), axis=-1).sum())


def l1_norm(m: np.ndarray) -> float:
    return float(np.abs(np.asarray(m, dtype=np.float64)).sum())


# -- differentiable versions -------------------------------------------------


def _as_threshold_tensor(tau, like: Tensor) -> Tensor:
    return tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=like.dtype))


def svt(m: Tensor, tau, grad_mode: str = "exact") -> Tensor:
    """Singular-value thresholding of ``(..., n, t)`` matrices.

    ``grad_mode="exact"`` back-propagates the true derivative of the
    thresholded spectral map using the divided-difference form, which stays
    bounded for clustered singular values.  ``grad_mode="fixed_vectors"``
    treats U and V as constants so only the shrunk singular values carry
    gradient.
    """
    if grad_mode not in SVT_GRAD_MODES:
        raise ContractViolation(f"unknown svt grad_mode {grad_mode!r}")
    tau_t = _as_threshold_tensor(tau, m)
    tval = _threshold_value(tau_t)
    u, s, v = thin_svd(m.data)
    fs = np.maximum(s - tval, 0.0)
    vt = np.swapaxes(v, -1, -2)
    out = ((u * fs[..., None, :]) @ vt).astype(m.dtype)
    active = (s > tval) | (tval <= 0.0)
    fp = active.astype(np.float64)

    def backward(g):
        g64 = g.astype(np.float64)
        gv = g64 @ v
        gb = np.swapaxes(u, -1, -2) @ gv  # U^T G V
        diag_gb = np.diagonal(gb, axis1=-2, axis2=-1)
        gtau = -(fp * diag_gb).sum()
        if grad_mode == "fixed_vectors":
            core = fp * diag_gb
            gm = (u * core[..., None, :]) @ vt
        else:
            gm = (u @ _svt_core(s, fs, fp, gb)) @ vt
            # component of G V orthogonal to range(U)
            perp = gv - u @ gb
            ratio = np.where(s > 0, fs / np.where(s > 0, s, 1.0), fp)
            gm = gm + (perp * ratio[..., None, :]) @ vt
        return gm.astype(m.dtype), np.asarray(gtau, dtype=tau_t.dtype)

    return Tensor._from_op(out, (m, tau_t), backward, "svt")


def _svt_core(s, fs, fp, gb):
    si, sj = s[..., :, None], s[..., None, :]
    fi, fj = fs[..., :, None], fs[..., None, :]
    pi, pj = fp[..., :, None], fp[..., None, :]
    scale = np.maximum(s[..., :1, None], 1.0) * 1e-9
    dif = si - sj
    tot = si + sj
    a = np.where(np.abs(dif) > scale, (fi - fj) / np.where(np.abs(dif) > scale, dif, 1.0), 0.5 * (pi + pj))
    b = np.where(tot > scale, (fi + fj) / np.where(tot > scale, tot, 1.0), 0.5 * (pi + pj))
    gbt = np.swapaxes(gb, -1, -2)
    core = a * 0.5 * (gb + gbt) + b * 0.5 * (gb - gbt)
    t = s.shape[-1]
    idx = np.arange(t)
    core[..., idx, idx] = fp * np.diagonal(gb, axis1=-2, axis2=-1)
    return core


def row_soft_threshold(m: Tensor, lam) -> Tensor:
    """Group soft-thresholding of the rows of ``(..., n, t)`` matrices.

    Exact almost-everywhere derivative; rows sitting exactly on the kink
    (``||x|| == lam``) get the zero subgradient.
    """
    lam_t = _as_threshold_tensor(lam, m)
    lval = _threshold_value(lam_t)
    x = m.data.astype(np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    alive = r > lval
    rsafe = np.where(r > 0, r, 1.0)
    scale = np.where(alive, 1.0 - lval / rsafe, 0.0)
    out = (x * scale).astype(m.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        xg = (x * g64).sum(axis=-1, keepdims=True)
        gx = np.where(alive, scale * g64 + lval * xg / rsafe**3 * x, 0.0)
        glam = -np.where(alive, xg / rsafe, 0.0).sum()
        return gx.astype(m.dtype), np.asarray(glam, dtype=lam_t.dtype)

    return Tensor._from_op(out, (m, lam_t), backward, "row_soft_threshold")


def soft_threshold(m: Tensor, lam) -> Tensor:
    """Elementwise soft-thresholding ``sign(x) * max(|x| - lam, 0)``."""
    lam_t = _as_threshold_tensor(lam, m)
    lval = _threshold_value(lam_t)
    x = m.data
    alive = np.abs(x) > lval
    sign = np.sign(x)
    out = np.where(alive, x - sign * lval, 0).astype(m.dtype)

    def backward(g):
        return (g * alive).astype(m.dtype), np.asarray(-(g * sign * alive).sum(dtype=np.float64), dtype=lam_t.dtype)

    return Tensor._from_op(out, (m, lam_t), backward, "soft_threshold")


def sparse_prox(m: Tensor, lam, sparsity: str = "group") -> Tensor:
    if sparsity == "group":
        return row_soft_threshold(m, lam)
    if sparsity == "elementwise":
        return soft_threshold(m, lam)
    raise ContractViolation(f"unknown sparsity mode {sparsity!r}; expected one of {SPARSITY_MODES}")
