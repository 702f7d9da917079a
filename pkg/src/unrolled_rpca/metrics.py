"""Evaluation metrics: contrast-to-noise ratio, detection rate / precision /
F-measure, Otsu binarisation and MSE, gathered into a JSON-friendly report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy.ndimage import binary_dilation

from .tensor import ContractViolation

BAND_RADIUS = 7
CNR_MODES = ("global", "local")
GLOBAL_BG_MODES = ("complement", "exclude_band")


def dilation_band(mask: np.ndarray, radius: int = BAND_RADIUS) -> np.ndarray:
    """Pixels within Chebyshev distance ``radius`` of the mask, minus the mask."""
    mask = np.asarray(mask, dtype=bool)
    square = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return binary_dilation(mask, structure=square) & ~mask


@dataclass
class RegionSpec:
    vessel_mask: np.ndarray
    local_band: np.ndarray
    global_bg: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray, radius: int = BAND_RADIUS, global_mode: str = "complement") -> "RegionSpec":
        """Regions of one 2-D frame.

        ``global_mode="complement"`` takes every non-vessel pixel as global
        background; ``"exclude_band"`` also leaves out the local band.
        """
        if global_mode not in GLOBAL_BG_MODES:
            raise ContractViolation(f"global_mode must be one of {GLOBAL_BG_MODES}")
        mask = np.asarray(mask, dtype=bool)
        band = dilation_band(mask, radius)
        bg = ~mask if global_mode == "complement" else ~(mask | band)
        return cls(mask, band, bg)


def cnr(image: np.ndarray, regions: RegionSpec, mode: str = "global") -> float:
    """``|mu_V - mu_B| / sqrt(sigma_B^2 + sigma_V^2)`` with population std.

    Returns ``+inf`` when both regions are constant with different means.
    """
    if mode not in CNR_MODES:
        raise ContractViolation(f"cnr mode must be one of {CNR_MODES}")
    img = np.asarray(image, dtype=np.float64)
    bg_mask = regions.global_bg if mode == "global" else regions.local_band
    if img.shape != regions.vessel_mask.shape:
        raise ContractViolation(f"cnr: image shape {img.shape} != mask shape {regions.vessel_mask.shape}")
    v = img[regions.vessel_mask]
    b = img[bg_mask]
    if v.size == 0:
        raise ContractViolation("cnr: vessel region is empty")
    if b.size == 0:
        raise ContractViolation(f"cnr: {mode} background region is empty")
    diff = abs(v.mean() - b.mean())
    spread = math.sqrt(v.var() + b.var())
    if spread == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(diff / spread)


def frame_cnrs(video: np.ndarray, mask: np.ndarray, mode: str = "global", global_mode: str = "complement") -> List[Optional[float]]:
    """Per-frame CNR of a ``(T, [1,] H, W)`` video; ``None`` where the frame has no vessel or no background."""
    video, mask = _frames(video), _frames(mask).astype(bool)
    out: List[Optional[float]] = []
    for img, m in zip(video, mask):
        if not m.any() or m.all():
            out.append(None)
            continue
        regions = RegionSpec.from_mask(m, global_mode=global_mode)
        if mode == "local" and not regions.local_band.any():
            out.append(None)
            continue
        out.append(cnr(img, regions, mode))
    return out


def sequence_cnr(video, mask, mode: str = "global", global_mode: str = "complement") -> float:
    """Mean of the defined per-frame CNRs."""
    vals = [v for v in frame_cnrs(video, mask, mode, global_mode) if v is not None]
    if not vals:
        raise ContractViolation("no frame has both vessel and background pixels")
    return float(np.mean(vals))


def _frames(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ContractViolation(f"expected single-channel video, got {x.shape}")
        x = x[:, 0]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractViolation(f"expected (T,[1,]H,W) video, got {x.shape}")
    return x


def seg_metrics(pred_mask, gt_mask):
    """``(DR, P, F)``; every ratio with an empty denominator is 0."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractViolation(f"seg_metrics: shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    dr = tp / (tp + fn) if tp + fn else 0.0
    p = tp / (tp + fp) if tp + fp else 0.0
    f = 2 * dr * p / (dr + p) if dr + p else 0.0
    return dr, p, f


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising between-class variance on a ``bins``-bin histogram over [0, 1].

    The value returned is the upper edge of the last background bin, so the
    foreground is ``values >= threshold`` (bin membership, as in the
    histogram).  Ties go to the lowest threshold.
    """
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    hist, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centres)
    mu0 = np.where(w0 > 0, m0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (m0[-1] - m0) / np.maximum(w1, 1), 0.0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between))
    # split after bin k
    return float(edges[k + 1])


def binarize(layer: np.ndarray, method: str = "otsu", threshold: float = 0.5) -> np.ndarray:
    """``layer > threshold`` (fixed) or ``layer >= otsu_threshold(layer)``."""
    layer = np.asarray(layer, dtype=np.float64)
    if method == "fixed":
        return layer > threshold
    if method == "otsu":
        return np.clip(layer, 0.0, 1.0) >= otsu_threshold(layer)
    raise ContractViolation(f"unknown binarize method {method!r}")


def parse_binarize(spec: str):
    """``"otsu"`` or ``"fixed:x"`` -> ``(method, threshold)``."""
    if spec == "otsu":
        return "otsu", 0.5
    if spec.startswith("fixed:"):
        try:
            return "fixed", float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ContractViolation(f"bad binarize spec {spec!r}") from exc
    raise ContractViolation(f"bad binarize spec {spec!r}; use otsu or fixed:<value>")


def mse(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"mse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def distal_mask(mask: np.ndarray, width_map: np.ndarray) -> np.ndarray:
    """Mask pixels whose vessel width is in the thinnest tercile of the mask's widths."""
    m = _frames(mask).astype(bool)
    wm = np.asarray(width_map, dtype=np.float64)
    widths = np.broadcast_to(wm, m.shape)[m]
    if widths.size == 0:
        return np.zeros_like(m)
    cut = np.quantile(widths, 1.0 / 3.0)
    return m & (wm <= cut)


def distal_dr(pred_mask, gt_mask, width_map) -> float:
    """Detection rate restricted to the thinnest-width tercile of ground-truth vessels."""
    pred = _frames(pred_mask).astype(bool)
    thin = distal_mask(gt_mask, width_map)
    n = int(thin.sum())
    return float((pred & thin).sum() / n) if n else 0.0


@dataclass
class EvalReport:
    cnr_global: float
    cnr_local: float
    dr: float
    p: float
    f: float
    mse: Optional[float] = None
    binarize: str = "otsu"
    threshold: Optional[float] = None
    distal_dr: Optional[float] = None
    input_cnr_global: Optional[float] = None
    input_cnr_local: Optional[float] = None
    sec_per_frame: Optional[float] = None
    per_frame: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)


def evaluate(
    pred_s: np.ndarray,
    truth_mask: np.ndarray,
    truth_vessel: Optional[np.ndarray] = None,
    binarize_spec: str = "otsu",
    width_map: Optional[np.ndarray] = None,
    noisy: Optional[np.ndarray] = None,
    global_mode: str = "complement",
) -> EvalReport:
    """Score a predicted vessel layer against ground truth."""
    pred = _frames(pred_s).astype(np.float64)
    mask = _frames(truth_mask).astype(bool)
    if pred.shape != mask.shape:
        raise ContractViolation(f"prediction shape {pred.shape} != mask shape {mask.shape}")
    method, thr = parse_binarize(binarize_spec)
    bin_mask = binarize(pred, method, thr)
    if method == "otsu":
        thr = otsu_threshold(pred)
    dr, p, f = seg_metrics(bin_mask, mask)
    g = frame_cnrs(pred, mask, "global", global_mode)
    loc = frame_cnrs(pred, mask, "local", global_mode)
    mean = lambda xs: float(np.mean([x for x in xs if x is not None])) if any(x is not None for x in xs) else float("nan")  # noqa: E731
    rep = EvalReport(cnr_global=mean(g), cnr_local=mean(loc), dr=dr, p=p, f=f, binarize=method, threshold=float(thr))
    rep.per_frame = {
        "cnr_global": g,
        "cnr_local": loc,
        "f": [seg_metrics(bm, m)[2] for bm, m in zip(bin_mask, mask)],
    }
    if truth_vessel is not None:
        rep.mse = mse(pred, _frames(truth_vessel))
    if width_map is not None:
        rep.distal_dr = distal_dr(bin_mask, mask, width_map)
    if noisy is not None:
        rep.input_cnr_global = sequence_cnr(noisy, mask, "global", global_mode)
        rep.input_cnr_local = sequence_cnr(noisy, mask, "local", global_mode)
    return rep
