import json

import numpy as np
import pytest

from unrolled_rpca.synth import SceneSpec, generate
from unrolled_rpca.patches import PatchGrid
from unrolled_rpca.tensor import ContractViolation, Tensor
from unrolled_rpca.train import (
    AdamState,
    PatchSet,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    loss,
    patches_from_sequences,
    train,
)


def test_loss_examples():
    a = np.zeros((2, 1, 2, 2))
    assert float(loss(a, a, a, a).data) == 0.0
    assert float(loss(a + 1, a, a, a).data) == pytest.approx(1.0)
    assert float(loss(a + 1, a + 2, a, a).data) == pytest.approx(5.0)


def test_loss_gradient_matches_formula(rng):
    ps, pl, ts, tl = (rng.standard_normal((3, 4)) for _ in range(4))
    s, l = Tensor(ps, requires_grad=True), Tensor(pl, requires_grad=True)
    loss(s, l, ts, tl).backward()
    np.testing.assert_allclose(s.grad, 2 * (ps - ts) / ps.size)
    np.testing.assert_allclose(l.grad, 2 * (pl - tl) / pl.size)


def test_adam_first_step_moves_by_about_lr(rng):
    cfg = TrainConfig(lr=1e-3)
    p = Tensor(rng.standard_normal(50).astype(np.float32), requires_grad=True)
    p.grad = rng.standard_normal(50)
    before = p.data.copy()
    adam_step({"w": p}, AdamState(), cfg)
    step = np.abs(p.data - before)
    assert np.all(step <= cfg.lr * (1 + 1e-3)) and np.all(step >= 0.9 * cfg.lr)


def test_adam_zero_gradient_is_no_move():
    p = Tensor(np.ones(3, np.float32), requires_grad=True)
    q = Tensor(np.ones(3, np.float32), requires_grad=True)
    p.grad = np.zeros(3)
    adam_step({"p": p, "q": q}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(p.data, 1.0)
    np.testing.assert_array_equal(q.data, 1.0)


def test_adam_three_step_trace_matches_oracle():
    cfg = TrainConfig(lr=0.1)
    grads = [np.array([1.0, -2.0]), np.array([0.5, 0.5]), np.array([-1.0, 3.0])]
    # oracle: textbook bias-corrected Adam, written out step by step
    x = np.array([0.3, -0.7])
    m = np.zeros(2)
    v = np.zeros(2)
    trace = []
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        x = x - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        trace.append(x.copy())
    p = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    state = AdamState()
    for g, want in zip(grads, trace):
        p.grad = g
        adam_step({"w": p}, state, cfg)
        np.testing.assert_allclose(p.data, want, rtol=1e-12)


def test_thresholds_are_clamped_nonnegative():
    lam = Tensor(np.float64(1e-4), requires_grad=True)
    lam.grad = np.float64(1.0)
    adam_step({"layer1.lambda1": lam}, AdamState(), TrainConfig(lr=1.0))
    assert float(lam.data) == 0.0


def test_config_contracts():
    for kw in ({"lr": 0.0}, {"epochs": 0}, {"batch": 0}):
        with pytest.raises(ContractViolation):
            TrainConfig(**kw)


def tiny_sets():
    spec = SceneSpec(h=32, w=32, t=8, n_branches=3, vessel_width_px=(2.0, 4.0))
    grid = PatchGrid.with_overlap(16, 4, 0.5)
    tr = patches_from_sequences([generate(spec), generate(SceneSpec(**{**spec.to_dict(), "seed": 1}))], grid, limit=20)
    va = patches_from_sequences([generate(SceneSpec(**{**spec.to_dict(), "seed": 2}))], grid, limit=6)
    return tr, va


def tiny_cfg(**kw):
    base = dict(lr=1e-3, epochs=2, batch=4, k_layers=2, features=2, patch=16, patch_frames=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_training_logs_and_checkpoints(tmp_path):
    tr, va = tiny_sets()
    assert len(tr) == 20
    ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
    res = train(tr, va, tiny_cfg(), checkpoint=str(ckpt), log_path=str(log))
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [0, 1, 2]
    assert all(set(e) == {"epoch", "train_loss", "val_loss", "wall_sec"} for e in lines)
    assert res.best_val == min(e["val_loss"] for e in lines)
    assert ckpt.exists()
    assert res.history == lines


def test_epoch_one_losses_are_bit_reproducible():
    tr, va = tiny_sets()
    a = train(tr, va, tiny_cfg(epochs=1))
    b = train(tr, va, tiny_cfg(epochs=1))
    assert a.history[1]["train_loss"] == b.history[1]["train_loss"]
    assert a.history[1]["val_loss"] == b.history[1]["val_loss"]
    c = train(tr, va, tiny_cfg(epochs=1, seed=1))
    assert c.history[1]["train_loss"] != a.history[1]["train_loss"]


def test_non_finite_value_mid_epoch_raises_divergence():
    tr, va = tiny_sets()
    d = tr.d.copy()
    d[10, 0, 0, 0, 0] = np.nan  # outside the threshold warm-up batch
    with pytest.raises(TrainingDiverged):
        train(PatchSet(d, tr.s, tr.l), va, tiny_cfg(epochs=1))


def test_patch_size_must_match_config():
    tr, va = tiny_sets()
    with pytest.raises(ContractViolation, match="patch size"):
        train(tr, va, tiny_cfg(patch=32))
