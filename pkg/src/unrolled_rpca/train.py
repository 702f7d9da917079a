"""Training loop for the unrolled network: dual-stream MSE, Adam, best-validation
checkpointing and a JSON-lines log."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .network import NetworkConfig, NetworkParams, forward, init_thresholds, save_network
from .patches import PatchGrid, extract
from .seeding import derive_seed, rng_for
from .synth import load_manifest, load_sequence
from .tensor import ContractViolation, NonFiniteError, Tensor, mse, no_grad


class TrainingDiverged(RuntimeError):
    pass


def loss(pred_s, pred_l, label_s, label_l) -> Tensor:
    """``MSE(pred_s, label_s) + MSE(pred_l, label_l)``."""
    pred_s = pred_s if isinstance(pred_s, Tensor) else Tensor(pred_s)
    pred_l = pred_l if isinstance(pred_l, Tensor) else Tensor(pred_l)
    return mse(pred_s, np.asarray(label_s, dtype=pred_s.dtype)) + mse(pred_l, np.asarray(label_l, dtype=pred_l.dtype))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch: int = 4
    k_layers: int = 4
    ablate_clstm: bool = False
    ablate_sr: bool = False
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    features: int = 12
    sparsity: str = "group"
    patch: int = 64
    patch_frames: int = 20
    overlap: float = 0.5
    max_train_patches: Optional[int] = None
    max_val_patches: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractViolation("lr must be > 0")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if self.batch < 1:
            raise ContractViolation("batch must be >= 1")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            k_layers=self.k_layers,
            features=self.features,
            patch_hw=(self.patch, self.patch),
            sparsity=self.sparsity,
            ablate_clstm=self.ablate_clstm,
            ablate_sr=self.ablate_sr,
        )


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update of every parameter with a gradient, in place.

    Parameters without a gradient (``grad is None``) are treated as having a
    zero gradient.  Threshold parameters (names ending in ``lambda1`` or
    ``lambda2``) are clamped to ``>= 0`` afterwards.
    """
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, np.float64)
            v = np.zeros(p.shape, np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = cfg.lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = p.data.astype(np.float64) - upd
        if name.endswith("lambda1") or name.endswith("lambda2"):
            new = np.maximum(new, 0.0)
        p.data = new.astype(p.dtype)


# -- data ---------------------------------------------------------------------


@dataclass
class PatchSet:
    d: np.ndarray  # (N, T, 1, H, W)
    s: np.ndarray
    l: np.ndarray

    def __len__(self) -> int:
        return len(self.d)


def patches_from_sequences(seqs, grid: PatchGrid, limit: Optional[int] = None, rng=None) -> PatchSet:
    """Stack aligned input / vessel-label / background-label patches of every sequence."""
    ds, ss, ls = [], [], []
    for seq in seqs:
        g = grid.fit(seq.noisy.shape)
        ds += extract(seq.noisy, g)
        ss += extract(seq.label_s, g)
        ls += extract(seq.background_gt, g)
    if not ds:
        raise ContractViolation("no patches: empty split")
    idx = np.arange(len(ds))
    if limit is not None and limit < len(ds):
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(len(ds), size=limit, replace=False))
    stack = lambda xs: np.stack([xs[i] for i in idx]).astype(np.float32)  # noqa: E731
    return PatchSet(stack(ds), stack(ss), stack(ls))


def load_split(data_dir, split: str, cfg: TrainConfig, limit: Optional[int] = None) -> PatchSet:
    manifest = load_manifest(data_dir)
    ids = manifest["split"][split]
    seqs = [load_sequence(data_dir, sid) for sid in ids]
    grid = PatchGrid.with_overlap(cfg.patch, cfg.patch_frames, cfg.overlap)
    return patches_from_sequences(seqs, grid, limit, rng_for(cfg.seed, f"subsample-{split}"))


# -- loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    params: NetworkParams
    history: List[dict]
    best_val: float
    best_epoch: int
    grad_audit: Dict[str, bool]


def evaluate_loss(params: NetworkParams, data: PatchSet, batch: int) -> float:
    """Mean over patches of the dual-stream MSE."""
    total = 0.0
    with no_grad():
        for i in range(0, len(data), batch):
            sl = slice(i, i + batch)
            l, s = forward(data.d[sl], params)
            n = len(data.d[sl])
            # per-patch loss averaged: batch MSE times batch size
            total += float(loss(s, l, data.s[sl], data.l[sl]).data) * n
    return total / len(data)


def train(
    train_set: PatchSet,
    val_set: PatchSet,
    cfg: TrainConfig,
    checkpoint: Optional[str] = None,
    log_path: Optional[str] = None,
    verbose: bool = False,
) -> TrainResult:
    """Train a fresh network; returns the best-validation parameters.

    Every epoch is one pass over the training patches in an order drawn from
    ``(seed, epoch)``; the log gets an epoch-0 line with the untrained losses.
    """
    ncfg = cfg.network_config()
    if train_set.d.shape[-2:] != ncfg.patch_hw:
        raise ContractViolation(f"patch size {train_set.d.shape[-2:]} does not match config {ncfg.patch_hw}")
    params = NetworkParams(ncfg, seed=derive_seed(cfg.seed, "init") % (2**32))
    init_thresholds(params, train_set.d[: max(cfg.batch, 1)])
    named = params.named_parameters()
    state = AdamState()
    audit = {name: False for name in named}
    history: List[dict] = []
    log = open(log_path, "w") if log_path else None

    def record(entry):
        history.append(entry)
        if log:
            log.write(json.dumps(entry) + "\n")
            log.flush()
        if verbose:
            print(json.dumps(entry))

    try:
        t0 = time.perf_counter()
        best_val = evaluate_loss(params, val_set, cfg.batch)
        best_epoch = 0
        best_state = params.state_dict()
        record({"epoch": 0, "train_loss": evaluate_loss(params, train_set, cfg.batch), "val_loss": best_val, "wall_sec": time.perf_counter() - t0})
        if checkpoint:
            save_network(checkpoint, params, {"epoch": 0, "val_loss": best_val, "train": _cfg_meta(cfg)})
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng_for(cfg.seed, f"epoch-{epoch}").permutation(len(train_set))
            total = 0.0
            for i in range(0, len(order), cfg.batch):
                idx = np.sort(order[i : i + cfg.batch])
                params.zero_grad()
                l, s = forward(train_set.d[idx], params)
                batch_loss = loss(s, l, train_set.s[idx], train_set.l[idx])
                if not np.isfinite(batch_loss.data):
                    raise TrainingDiverged(f"epoch {epoch}: non-finite training loss")
                batch_loss.backward()
                if epoch == 1:
                    for name, p in named.items():
                        if p.grad is not None and np.any(p.grad):
                            audit[name] = True
                adam_step(named, state, cfg)
                total += float(batch_loss.data) * len(idx)
            val = evaluate_loss(params, val_set, cfg.batch)
            record({"epoch": epoch, "train_loss": total / len(train_set), "val_loss": val, "wall_sec": time.perf_counter() - t0})
            if not np.isfinite(val):
                raise TrainingDiverged(f"epoch {epoch}: validation loss is {val}; last good checkpoint kept")
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_state = params.state_dict()
                if checkpoint:
                    save_network(checkpoint, params, {"epoch": epoch, "val_loss": val, "train": _cfg_meta(cfg)})
    except NonFiniteError as exc:
        raise TrainingDiverged(f"{exc}; last good checkpoint kept") from exc
    finally:
        if log:
            log.close()
    params.load_state_dict(best_state)
    return TrainResult(params, history, best_val, best_epoch, audit)


def _cfg_meta(cfg: TrainConfig) -> dict:
    return {k: v for k, v in asdict(cfg).items()}


def train_from_dir(data_dir, cfg: TrainConfig, checkpoint=None, log_path=None, verbose=False) -> TrainResult:
    tr = load_split(data_dir, "train", cfg, cfg.max_train_patches)
    va = load_split(data_dir, "val", cfg, cfg.max_val_patches)
    return train(tr, va, cfg, checkpoint, log_path, verbose)
