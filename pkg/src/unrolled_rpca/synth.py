"""Synthetic angiography-like sequences with exact ground truth.

A sequence is ``D = clip(alpha * Poisson((L + S) / alpha) + N(0, sigma^2))``
where ``L`` is an exactly rank-``r`` background (sum of ``r`` separable
space x time products) and ``S`` is a tree of tubular vessels that fills with
contrast along its arc length over time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as urtf_io
from .seeding import derive_seed, rng_for
from .tensor import ContractViolation

MASK_RULES = ("lumen", "threshold")
# Gaussian cross-section with FWHM w has sigma = w / FWHM_PER_SIGMA
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
# splats are cut where the profile falls below this fraction of the peak
SPLAT_CUTOFF = 0.05


@dataclass
class SceneSpec:
    h: int = 128
    w: int = 128
    t: int = 20
    rank: int = 2
    n_branches: int = 7
    vessel_width_px: Tuple[float, float] = (2.0, 6.0)
    vessel_peak: float = 0.4
    flow_speed: float = 0.08
    gauss_sigma: float = 0.1
    poisson_alpha: float = 0.01
    seed: int = 0
    background_mean: float = 0.4
    background_contrast: float = 0.08
    mask_rule: str = "lumen"
    mask_threshold: float = 0.05
    label_coarseness: float = 0.0

    def __post_init__(self):
        self.vessel_width_px = tuple(float(v) for v in self.vessel_width_px)
        lo, hi = self.vessel_width_px
        if min(self.h, self.w, self.t) < 1 or self.rank < 1 or self.n_branches < 1:
            raise ContractViolation("extents, rank and n_branches must be >= 1")
        if not 0 < lo <= hi:
            raise ContractViolation(f"vessel_width_px must satisfy 0 < lo <= hi, got {self.vessel_width_px}")
        if self.gauss_sigma < 0 or self.poisson_alpha < 0 or self.flow_speed < 0:
            raise ContractViolation("noise levels and flow_speed must be >= 0")
        if self.mask_rule not in MASK_RULES:
            raise ContractViolation(f"mask_rule must be one of {MASK_RULES}")
        if not 0.0 <= self.label_coarseness <= 1.0:
            raise ContractViolation("label_coarseness must be in [0, 1]")
        # |u_i| <= contrast and |v_i| <= 1 (1.03 for the mean term) bound the background
        swing = self.background_contrast * (self.rank + 0.03) + 0.03 * self.background_mean
        if self.background_contrast < 0 or self.background_mean - swing < 0 or self.background_mean + swing + self.vessel_peak > 1:
            raise ContractViolation("background_mean, background_contrast and vessel_peak leave the [0, 1] intensity range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vessel_width_px"] = list(self.vessel_width_px)
        return d


@dataclass
class LabeledSequence:
    noisy: np.ndarray
    background_gt: np.ndarray
    vessel_gt: np.ndarray
    mask_gt: np.ndarray
    width_map: np.ndarray
    vessel_label: Optional[np.ndarray] = None
    spec: Optional[SceneSpec] = None

    @property
    def label_s(self) -> np.ndarray:
        """Training target for the sparse stream (coarsened when requested)."""
        return self.vessel_gt if self.vessel_label is None else self.vessel_label


# -- background ---------------------------------------------------------------


def smooth_field(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    """Zero-mean random field in [-1, 1] (max-normalised) with correlation length ``scale`` pixels."""
    f = gaussian_filter(rng.standard_normal((h, w)), scale, mode="wrap")
    f -= f.mean()
    return f / max(np.abs(f).max(), 1e-12)


def make_background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """``L[t, y, x] = sum_i u_i(y, x) v_i(t)`` with exactly ``rank`` terms.

    ``u_1 v_1`` carries the mean grey level with a slow global drift; the
    other terms add smooth spatial structure that brightens and dims slowly.
    """
    h, w, t = spec.h, spec.w, spec.t
    tt = np.arange(t) / max(t, 1)
    scale = 0.15 * min(h, w)
    us, vs = [], []
    for i in range(spec.rank):
        field_i = smooth_field(rng, h, w, scale)
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.3, 1.0)
        if i == 0:
            us.append(spec.background_mean + spec.background_contrast * field_i)
            vs.append(1.0 + 0.03 * np.sin(2 * np.pi * freq * tt + phase))
        else:
            us.append(spec.background_contrast * field_i)
            vs.append(np.cos(2 * np.pi * freq * tt + phase))
    u = np.stack(us, axis=-1)  # (h, w, r)
    v = np.stack(vs, axis=-1)  # (t, r)
    return np.einsum("yxr,tr->tyx", u, v)


# -- vessel tree --------------------------------------------------------------


@dataclass
class Segment:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    width: float
    arc0: float
    depth: int
    children: List[int] = field(default_factory=list)

    def sample(self, step: float = 0.25):
        """Points along the quadratic Bezier curve about ``step`` px apart, with arc positions."""
        chord = np.linalg.norm(self.p2 - self.p0) + np.linalg.norm(self.p1 - self.p0) + np.linalg.norm(self.p2 - self.p1)
        n = max(2, int(np.ceil(chord / step)))
        s = np.linspace(0.0, 1.0, n)[:, None]
        pts = (1 - s) ** 2 * self.p0 + 2 * (1 - s) * s * self.p1 + s**2 * self.p2
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = self.arc0 + np.concatenate([[0.0], np.cumsum(seg)])
        return pts, arc


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def grow_tree(spec: SceneSpec, rng: np.random.Generator) -> List[Segment]:
    """Random binary tree of quadratic Bezier segments, grown breadth-first.

    The root enters from a random image border and heads roughly to the
    centre; every segment spawns two thinner, shorter children until
    ``n_branches`` segments exist.
    """
    h, w = spec.h, spec.w
    lo, hi = spec.vessel_width_px
    side = rng.integers(4)
    along = rng.uniform(0.25, 0.75)
    start = {0: (0.0, along * w), 1: (h - 1.0, along * w), 2: (along * h, 0.0), 3: (along * h, w - 1.0)}[int(side)]
    start = np.array(start)
    centre = np.array([h / 2, w / 2]) + rng.uniform(-0.1, 0.1, 2) * np.array([h, w])
    direction = (centre - start) / np.linalg.norm(centre - start)
    length = 0.5 * min(h, w)
    segments: List[Segment] = []
    queue = [(start, direction, length, hi, 0.0, 0, None)]
    while queue and len(segments) < spec.n_branches:
        p0, d, ln, width, arc0, depth, parent = queue.pop(0)
        bend = rng.uniform(-0.25, 0.25) * ln
        normal = np.array([-d[1], d[0]])
        p1 = p0 + 0.5 * ln * d + bend * normal
        p2 = p0 + ln * _rotate(d, rng.uniform(-0.3, 0.3))
        seg = Segment(p0, p1, p2, width, arc0, depth)
        pts, arc = seg.sample()
        segments.append(seg)
        idx = len(segments) - 1
        if parent is not None:
            segments[parent].children.append(idx)
        end_dir = (p2 - p1) / max(np.linalg.norm(p2 - p1), 1e-9)
        child_w = max(lo, width * 0.7)
        for sign in (-1.0, 1.0):
            angle = sign * rng.uniform(np.deg2rad(20), np.deg2rad(45))
            queue.append((p2, _rotate(end_dir, angle), ln * 0.7, child_w, arc[-1], depth + 1, idx))
    return segments


def vessel_amplitude(width: float, spec: SceneSpec) -> float:
    """Peak contrast of a vessel; thinner vessels are fainter."""
    lo, hi = spec.vessel_width_px
    frac = 1.0 if hi == lo else (width - lo) / (hi - lo)
    return spec.vessel_peak * (0.55 + 0.45 * frac)


def _centerline(segments: List[Segment], spec: SceneSpec, min_width: float = 0.0):
    pts, arcs, widths = [], [], []
    for seg in segments:
        if seg.width < min_width:
            continue
        p, a = seg.sample()
        pts.append(p)
        arcs.append(a)
        widths.append(np.full(len(a), seg.width))
    if not pts:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0)
    pts, arcs, widths = (np.concatenate(x) for x in (pts, arcs, widths))
    order = np.argsort(arcs, kind="stable")
    return pts[order], arcs[order], widths[order]


def _splat_max(img: np.ndarray, lumen: np.ndarray, wmap: np.ndarray, pt, width: float, amp: float) -> None:
    h, w = img.shape
    sigma = width / FWHM_PER_SIGMA
    radius = sigma * np.sqrt(2.0 * np.log(1.0 / SPLAT_CUTOFF))
    y0, y1 = max(0, int(np.floor(pt[0] - radius))), min(h, int(np.ceil(pt[0] + radius)) + 1)
    x0, x1 = max(0, int(np.floor(pt[1] - radius))), min(w, int(np.ceil(pt[1] + radius)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (yy - pt[0]) ** 2 + (xx - pt[1]) ** 2
    val = amp * np.exp(-d2 / (2 * sigma**2))
    val[d2 > radius**2] = 0.0
    np.maximum(img[y0:y1, x0:x1], val, out=img[y0:y1, x0:x1])
    inside = d2 <= (width / 2.0) ** 2
    lum = lumen[y0:y1, x0:x1]
    wm = wmap[y0:y1, x0:x1]
    # thinnest vessel wins where lumens overlap, so distal pixels stay distal
    wm[inside] = np.where(lum[inside], np.minimum(wm[inside], width), width)
    lum |= inside


def render_vessels(segments: List[Segment], spec: SceneSpec, min_width: float = 0.0):
    """Rasterise the tree frame by frame.

    Frame ``k`` shows every centreline point with arc position
    ``<= min(1, flow_speed * (k + 1)) * total_arc``; the splat is the max of
    Gaussian cross-sections.  Returns ``(vessel, lumen, width_map)`` where
    ``lumen`` marks pixels within half a width of a revealed centreline point
    and ``width_map`` (static) holds the local vessel width of lumen pixels.
    """
    h, w, t = spec.h, spec.w, spec.t
    vessel = np.zeros((t, h, w))
    lumen = np.zeros((t, h, w), dtype=bool)
    pts, arcs, widths = _centerline(segments, spec, min_width)
    img = np.zeros((h, w))
    lum = np.zeros((h, w), dtype=bool)
    wmap = np.zeros((h, w))
    total = float(arcs.max()) if len(arcs) else 0.0
    cursor = 0
    for k in range(t):
        reach = min(1.0, spec.flow_speed * (k + 1)) * total
        while cursor < len(arcs) and arcs[cursor] <= reach:
            _splat_max(img, lum, wmap, pts[cursor], widths[cursor], vessel_amplitude(widths[cursor], spec))
            cursor += 1
        vessel[k] = img
        lumen[k] = lum
    # the width map covers the whole tree, not just the part revealed so far
    while cursor < len(arcs):
        _splat_max(img, lum, wmap, pts[cursor], widths[cursor], vessel_amplitude(widths[cursor], spec))
        cursor += 1
    return vessel, lumen, wmap


# -- noise --------------------------------------------------------------------


def add_noise(clean: np.ndarray, gauss_sigma: float, poisson_alpha: float, rng: np.random.Generator) -> np.ndarray:
    """``clip(alpha * Poisson(clean / alpha) + N(0, sigma^2), 0, 1)``; ``alpha = 0`` skips the Poisson part."""
    x = np.asarray(clean, dtype=np.float64)
    if poisson_alpha > 0:
        x = poisson_alpha * rng.poisson(x / poisson_alpha)
    if gauss_sigma > 0:
        x = x + rng.normal(0.0, gauss_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


# -- public API ---------------------------------------------------------------


def generate(spec: SceneSpec) -> LabeledSequence:
    """Build one labelled sequence; identical specs give bit-identical output."""
    background = make_background(spec, rng_for(spec.seed, "background"))
    lo_b, hi_b = background.min(), background.max()
    segments = grow_tree(spec, rng_for(spec.seed, "tree"))
    vessel, lumen, wmap = render_vessels(segments, spec)
    clean = background + vessel
    if lo_b < 0 or clean.max() > 1:
        raise ContractViolation(
            f"scene intensities leave [0, 1] (background min {lo_b:.3g}, max {hi_b:.3g}, peak {clean.max():.3g})"
        )
    if spec.mask_rule == "lumen":
        mask = lumen
    else:
        mask = vessel > spec.mask_threshold * spec.vessel_peak
    noisy = add_noise(clean, spec.gauss_sigma, spec.poisson_alpha, rng_for(spec.seed, "noise"))
    label = None
    if spec.label_coarseness > 0:
        label = coarse_label(segments, spec)
    as_video = lambda a: a[:, None].astype(np.float32)  # noqa: E731
    return LabeledSequence(
        noisy=as_video(noisy),
        background_gt=as_video(background),
        vessel_gt=as_video(vessel),
        mask_gt=as_video(mask),
        width_map=wmap.astype(np.float32),
        vessel_label=None if label is None else as_video(label),
        spec=spec,
    )


def coarse_label(segments: List[Segment], spec: SceneSpec) -> np.ndarray:
    """Vessel label with the thinnest branches removed.

    ``label_coarseness = c`` drops segments thinner than
    ``lo + c * (hi - lo)``, the way a coarse annotation misses distal vessels.
    """
    lo, hi = spec.vessel_width_px
    cut = lo + spec.label_coarseness * (hi - lo)
    # keep anything at least as wide as the cut; the root is always kept
    cut = min(cut, max(s.width for s in segments))
    vessel, _, _ = render_vessels(segments, spec, min_width=cut)
    return vessel


def global_cnr(seq: LabeledSequence, image: Optional[np.ndarray] = None) -> float:
    """Mean over frames with a nonempty mask of the global CNR of ``image`` (default: the noisy input)."""
    from .metrics import sequence_cnr

    return sequence_cnr(seq.noisy if image is None else image, seq.mask_gt, mode="global")


def calibrate_noise(spec: SceneSpec, target_cnr: float = 1.0, poisson_share: float = 0.3, steps: int = 25) -> SceneSpec:
    """Pick noise levels so the noisy input's global CNR is ``target_cnr``.

    Gaussian sigma is bisected (log scale); the Poisson scale follows as
    ``alpha = poisson_share * sigma^2 / background_mean`` so Poisson noise
    contributes ``poisson_share`` of the Gaussian variance at mean grey level.
    """
    base = replace(spec, gauss_sigma=0.0, poisson_alpha=0.0)
    clean_cnr = global_cnr(generate(base))
    if clean_cnr <= target_cnr:
        raise ContractViolation(f"noise-free CNR {clean_cnr:.3g} is already below the target {target_cnr}")
    lo, hi = 1e-3, 1.0
    best = spec
    for _ in range(steps):
        mid = float(np.sqrt(lo * hi))
        cand = replace(spec, gauss_sigma=mid, poisson_alpha=poisson_share * mid**2 / spec.background_mean)
        val = global_cnr(generate(cand))
        best = cand
        if val > target_cnr:
            lo = mid
        else:
            hi = mid
    return best


def split_counts(n: int, ratios=(0.6, 0.2, 0.2)) -> Tuple[int, int, int]:
    """Train/val/test sizes; val and test round to nearest, train takes the rest."""
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


SEQ_FILES = ("noisy", "bg", "vessel", "mask", "width")


def make_dataset(out_dir, n_sequences: int, spec: SceneSpec, seed: int = 0, calibrate: bool = False) -> dict:
    """Generate ``n_sequences`` scenes into ``out_dir`` with a seeded 0.6/0.2/0.2 split.

    Scene ``i`` uses ``spec`` with its seed replaced by a sub-seed of
    ``(seed, "scene-i")``.  Writes ``seqNNN_{noisy,bg,vessel,mask,width}.urtf``
    (plus ``seqNNN_label.urtf`` for coarse labels) and ``manifest.json``.
    """
    if n_sequences < 5:
        raise ContractViolation(f"make_dataset needs n >= 5 sequences, got {n_sequences}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc.strerror}") from exc
    if calibrate:
        spec = calibrate_noise(replace(spec, seed=derive_seed(seed, "calibration")))
    ids = [f"seq{i:03d}" for i in range(n_sequences)]
    order = rng_for(seed, "split").permutation(n_sequences)
    n_train, n_val, _ = split_counts(n_sequences)
    split = {
        "train": sorted(ids[i] for i in order[:n_train]),
        "val": sorted(ids[i] for i in order[n_train : n_train + n_val]),
        "test": sorted(ids[i] for i in order[n_train + n_val :]),
    }
    scenes = {}
    for i, sid in enumerate(ids):
        sspec = replace(spec, seed=derive_seed(seed, f"scene-{i}"))
        seq = generate(sspec)
        arrays = {
            "noisy": seq.noisy,
            "bg": seq.background_gt,
            "vessel": seq.vessel_gt,
            "mask": seq.mask_gt,
            "width": seq.width_map,
        }
        if seq.vessel_label is not None:
            arrays["label"] = seq.vessel_label
        for tag, arr in arrays.items():
            path = out / f"{sid}_{tag}.urtf"
            try:
                urtf_io.save_urtf(path, arr)
            except OSError as exc:
                raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        scenes[sid] = sspec.to_dict()
    manifest = {"format": "urtf-dataset", "version": 1, "seed": int(seed), "ids": ids, "split": split, "spec": spec.to_dict(), "scenes": scenes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_sequence(data_dir, sid: str) -> LabeledSequence:
    d = Path(data_dir)
    arrs = {tag: urtf_io.load_urtf(d / f"{sid}_{tag}.urtf") for tag in SEQ_FILES}
    label_path = d / f"{sid}_label.urtf"
    label = urtf_io.load_urtf(label_path) if label_path.exists() else None
    return LabeledSequence(
        noisy=arrs["noisy"],
        background_gt=arrs["bg"],
        vessel_gt=arrs["vessel"],
        mask_gt=arrs["mask"],
        width_map=arrs["width"],
        vessel_label=label,
    )


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc.strerror}") from exc
