"""Thin SVD for tall matrices through the eigendecomposition of the Gram matrix."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import ContractViolation, Tensor

# singular values below this fraction of the largest are treated as null
NULL_RTOL = 1e-7


class ThinSVD(NamedTuple):
    u: np.ndarray  # (..., n, t)
    s: np.ndarray  # (..., t), descending
    v: np.ndarray  # (..., t, t)


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` by an orthonormal
    completion (Gram-Schmidt against the standard basis), then polish the
    whole set with a sign-fixed QR."""
    n, t = u.shape
    basis = [u[:, j] for j in range(t) if keep[j]]
    fill = []
    candidate = 0
    while len(basis) + len(fill) < t:
        e = np.zeros(n)
        e[candidate % n] = 1.0
        candidate += 1
        for q in basis + fill:
            e -= (q @ e) * q
        for q in basis + fill:
            e -= (q @ e) * q
        norm = np.linalg.norm(e)
        if norm > 0.5:
            fill.append(e / norm)
    out = u.copy()
    it = iter(fill)
    for j in range(t):
        if not keep[j]:
            out[:, j] = next(it)
    q, r = np.linalg.qr(out)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def thin_svd(m) -> ThinSVD:
    """Thin SVD ``m = U diag(s) V^T`` of a tall ``(n, t)`` matrix (or a stack
    of them), computed in float64.

    The ``t x t`` Gram matrix ``m^T m`` is eigendecomposed; left vectors are
    recovered as ``m V / s`` for non-negligible ``s`` and completed to an
    orthonormal set otherwise.  Cheap when ``n >> t``.
    """
    a = m.data if isinstance(m, Tensor) else np.asarray(m)
    if a.ndim < 2:
        raise ContractViolation(f"thin_svd: need a matrix, got shape {a.shape}")
    n, t = a.shape[-2:]
    if n < t:
        raise ContractViolation(f"thin_svd: need n >= t, got {n}x{t}")
    if not np.isfinite(a).all():
        raise ContractViolation("thin_svd: input contains non-finite values")
    a = a.astype(np.float64)
    gram = np.swapaxes(a, -1, -2) @ a
    evals, evecs = np.linalg.eigh(gram)
    evals = evals[..., ::-1]
    v = evecs[..., ::-1]
    s = np.sqrt(np.clip(evals, 0.0, None))
    smax = s[..., :1]
    keep = s > NULL_RTOL * np.maximum(smax, np.finfo(np.float64).tiny)
    safe = np.where(keep, s, 1.0)
    u = (a @ v) / safe[..., None, :]

    flat_u = u.reshape(-1, n, t)
    flat_keep = keep.reshape(-1, t)
    flat_s = s.reshape(-1, t)
    for b in range(flat_u.shape[0]):
        flat_u[b] = _complete_basis(flat_u[b], flat_keep[b])
        # null directions carry exactly zero weight
        flat_s[b][~flat_keep[b]] = 0.0
    return ThinSVD(flat_u.reshape(u.shape), flat_s.reshape(s.shape), v)
