"""Train a small unrolled network on calibrated synthetic data and compare it
with its untrained start and with fixed ISTA on the test split.

Run: python demos/train_unrolled.py [workdir]   (a few minutes on one core)
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from unrolled_rpca.cli import infer_sequence
from unrolled_rpca.ista import IstaConfig, ista_solve
from unrolled_rpca.metrics import evaluate
from unrolled_rpca.patches import PatchGrid
from unrolled_rpca.synth import SceneSpec, load_sequence, make_dataset
from unrolled_rpca.train import TrainConfig, load_split, train


def score(name, s, seq):
    rep = evaluate(s, seq.mask_gt, seq.vessel_gt, "otsu", seq.width_map, seq.noisy)
    print(
        f"  {name:10s} CNR global {rep.cnr_global:5.2f} (input {rep.input_cnr_global:.2f})  "
        f"local {rep.cnr_local:5.2f}  F {rep.f:.3f}  distal DR {rep.distal_dr:.3f}"
    )


def main(workdir):
    data = Path(workdir) / "data"
    spec = SceneSpec(h=64, w=64, t=20, n_branches=5, vessel_width_px=(2.0, 5.0))
    manifest = make_dataset(data, 8, spec, seed=1, calibrate=True)
    print(f"dataset in {data}: split {({k: len(v) for k, v in manifest['split'].items()})}")

    cfg = TrainConfig(lr=1e-3, epochs=4, k_layers=2, features=6, patch=32, patch_frames=10, seed=0)
    tr, va = load_split(data, "train", cfg), load_split(data, "val", cfg)
    print(f"{len(tr)} training patches, {len(va)} validation patches")
    res = train(tr, va, cfg, verbose=True)
    print(f"best validation loss {res.best_val:.4e} at epoch {res.best_epoch}")

    grid = PatchGrid.with_overlap(cfg.patch, cfg.patch_frames, cfg.overlap)
    for sid in manifest["split"]["test"]:
        seq = load_sequence(data, sid)
        print(sid)
        s, _, secs, n = infer_sequence(res.params, seq.noisy, grid)
        score("network", s, seq)
        lam1 = 0.1 * np.linalg.svd(seq.noisy.reshape(20, -1), compute_uv=False).mean()
        score("ISTA", ista_solve(seq.noisy, IstaConfig(lambda1=lam1, lambda2=0.03)).s, seq)
        print(f"  network inference: {n} patches in {secs:.1f}s")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(sys.argv[1])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(tmp)
