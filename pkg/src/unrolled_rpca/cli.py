"""Command-line entry point: ``python -m unrolled_rpca <command> ...``.

Exit codes: 0 on success, 1 on a contract violation (bad arguments, shape
mismatch, divergence), 2 on an I/O error (missing or malformed file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import gradcheck as gc
from . import io as urtf_io
from .ista import DivergenceError, IstaConfig, ista_solve
from .metrics import evaluate
from .network import decompose, load_network
from .patches import PatchGrid, extract, splice
from .synth import SceneSpec, make_dataset
from .tensor import ContractViolation
from .train import TrainConfig, TrainingDiverged, train_from_dir

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class UsageError(ContractViolation):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _video(path) -> np.ndarray:
    arr = urtf_io.load_urtf(path)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ContractViolation(f"{path}: expected a (T,1,H,W) or (T,H,W) tensor, got shape {arr.shape}")
    return arr


# -- commands -----------------------------------------------------------------


def cmd_synth(a) -> int:
    spec = SceneSpec(
        h=a.size[0],
        w=a.size[1],
        t=a.frames,
        rank=a.rank,
        n_branches=a.branches,
        gauss_sigma=a.noise_gauss,
        poisson_alpha=a.noise_poisson,
        mask_rule=a.mask_rule,
        label_coarseness=a.label_coarseness,
    )
    manifest = make_dataset(a.out, a.n, spec, seed=a.seed, calibrate=a.calibrate)
    print(json.dumps({"out": str(a.out), "split": {k: len(v) for k, v in manifest["split"].items()}}))
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = TrainConfig(
        lr=a.lr,
        epochs=a.epochs,
        batch=a.batch,
        k_layers=a.layers,
        ablate_clstm=a.ablate_clstm,
        ablate_sr=a.ablate_sr,
        seed=a.seed,
        features=a.features,
        sparsity=a.sparsity,
        patch=a.patch,
        patch_frames=a.patch_frames,
        overlap=a.overlap,
        max_train_patches=a.max_train_patches,
    )
    log = a.log or str(Path(a.out).with_suffix(".log.jsonl"))
    res = train_from_dir(a.data, cfg, checkpoint=a.out, log_path=log, verbose=a.verbose)
    print(json.dumps({"checkpoint": a.out, "log": log, "best_val": res.best_val, "best_epoch": res.best_epoch}))
    return EXIT_OK


def infer_sequence(params, seq: np.ndarray, grid: PatchGrid, threads: int = 1):
    """Patch, decompose and splice one sequence; returns ``(s, l, seconds)``."""
    ph, pw = params.cfg.patch_hw
    if (grid.patch_h, grid.patch_w) != (ph, pw) and params.cfg.uses_sr:
        raise ContractViolation(f"--patch {grid.patch_h} does not match the model's training patch size {ph}")
    t0 = time.perf_counter()
    grid = grid.fit(seq.shape)
    patches = extract(seq, grid)
    # extra workers beyond the core count only add contention
    workers = min(threads, os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(lambda p: decompose(p, params), patches))
    else:
        outs = [decompose(p, params) for p in patches]
    s = splice([o.s for o in outs], grid, seq.shape)
    l = splice([o.l for o in outs], grid, seq.shape)
    return s, l, time.perf_counter() - t0, len(patches)


def cmd_infer(a) -> int:
    params, _ = load_network(a.model)
    seq = _video(a.input)
    patch = a.patch or params.cfg.patch_hw[0]
    grid = PatchGrid.with_overlap(patch, a.patch_frames, a.overlap)
    s, l, secs, n = infer_sequence(params, seq, grid, a.threads)
    urtf_io.save_urtf(a.out_s, s)
    urtf_io.save_urtf(a.out_l, l)
    timing = {"patches": n, "frames": int(seq.shape[0]), "seconds": secs, "sec_per_frame": secs / seq.shape[0], "threads": a.threads}
    if a.timing_out:
        Path(a.timing_out).write_text(json.dumps(timing))
    print(json.dumps(timing))
    return EXIT_OK


def cmd_rpca(a) -> int:
    seq = _video(a.input)
    cfg = IstaConfig(lambda1=a.lambda1, lambda2=a.lambda2, max_iters=a.iters, tol=a.tol, sparsity=a.sparsity)
    res = ista_solve(seq, cfg)
    urtf_io.save_urtf(a.out_s, res.s)
    urtf_io.save_urtf(a.out_l, res.l)
    print(json.dumps({"iters_run": res.iters_run, "objective": res.objective_history[-1]}))
    return EXIT_OK


def cmd_eval(a) -> int:
    pred = _video(a.pred)
    mask = _video(a.truth_mask)
    vessel = _video(a.truth_vessel)
    width = urtf_io.load_urtf(a.width_map) if a.width_map else None
    noisy = _video(a.input) if a.input else None
    rep = evaluate(pred, mask, vessel, a.binarize, width, noisy, a.global_bg)
    if a.timing:
        try:
            rep.sec_per_frame = json.loads(Path(a.timing).read_text())["sec_per_frame"]
        except (KeyError, json.JSONDecodeError) as exc:
            raise urtf_io.FormatError(f"{a.timing}: not an infer timing file") from exc
    Path(a.report).write_text(rep.to_json())
    print(json.dumps({k: getattr(rep, k) for k in ("cnr_global", "cnr_local", "dr", "p", "f", "mse")}))
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    try:
        results = gc.run(a.op)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed and not r.exempt]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (tolerance {gc.TOL:g}, eps {gc.EPS:g}, float64)")
    return EXIT_CONTRACT if failed else EXIT_OK


def cmd_export(a) -> int:
    seq = _video(a.input)
    if not 0 <= a.frame < seq.shape[0]:
        raise ContractViolation(f"--frame {a.frame} out of range for {seq.shape[0]} frames")
    urtf_io.write_pgm(a.png_out, seq[a.frame, 0])
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unrolled-rpca", description="Low-rank + sparse video decomposition: classic ISTA and an unrolled network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--rank", type=int, default=2)
    s.add_argument("--branches", type=int, default=7)
    s.add_argument("--noise-gauss", type=float, default=0.1)
    s.add_argument("--noise-poisson", type=float, default=0.01)
    s.add_argument("--calibrate", action="store_true", help="override noise so the input global CNR is about 1")
    s.add_argument("--mask-rule", choices=("lumen", "threshold"), default="lumen")
    s.add_argument("--label-coarseness", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the unrolled network")
    t.add_argument("--data", required=True)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--out", required=True)
    abl = t.add_mutually_exclusive_group()
    abl.add_argument("--ablate-clstm", action="store_true")
    abl.add_argument("--ablate-sr", action="store_true")
    t.add_argument("--features", type=int, default=12)
    t.add_argument("--sparsity", choices=("group", "elementwise"), default="group")
    t.add_argument("--patch", type=int, default=64)
    t.add_argument("--patch-frames", type=int, default=20)
    t.add_argument("--overlap", type=float, default=0.5)
    t.add_argument("--max-train-patches", type=int, default=None)
    t.add_argument("--log", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="decompose a sequence with a trained network")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out-s", required=True)
    i.add_argument("--out-l", required=True)
    i.add_argument("--patch", type=int, default=None, help="defaults to the model's training patch size")
    i.add_argument("--patch-frames", type=int, default=20)
    i.add_argument("--overlap", type=float, default=0.5)
    i.add_argument("--threads", type=int, default=1)
    i.add_argument("--timing-out", default=None)
    i.set_defaults(func=cmd_infer)

    r = sub.add_parser("rpca", help="classic ISTA decomposition")
    r.add_argument("--input", required=True)
    r.add_argument("--lambda1", type=float, required=True)
    r.add_argument("--lambda2", type=float, required=True)
    r.add_argument("--iters", type=int, default=300)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--sparsity", choices=("group", "elementwise"), default="group")
    r.add_argument("--out-s", required=True)
    r.add_argument("--out-l", required=True)
    r.set_defaults(func=cmd_rpca)

    e = sub.add_parser("eval", help="score a vessel layer against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth-vessel", required=True)
    e.add_argument("--truth-mask", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--binarize", default="otsu", help="otsu or fixed:<threshold>")
    e.add_argument("--width-map", default=None, help="enables distal-vessel detection rate")
    e.add_argument("--input", default=None, help="noisy input, to report its CNR alongside")
    e.add_argument("--global-bg", choices=("complement", "exclude_band"), default="complement")
    e.add_argument("--timing", default=None, help="timing JSON written by infer --timing-out")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--op", default=None, choices=sorted(gc.CASES))
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export", help="write one frame as 8-bit PGM")
    x.add_argument("--input", required=True)
    x.add_argument("--frame", type=int, default=0)
    x.add_argument("--png-out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, urtf_io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractViolation, DivergenceError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
