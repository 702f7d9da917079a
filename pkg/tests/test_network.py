import numpy as np
import pytest

from unrolled_rpca.ista import IstaConfig, ista_solve
from unrolled_rpca.network import (
    NetworkConfig,
    NetworkParams,
    decompose,
    forward,
    init_thresholds,
    ista_reference_params,
    layer_forward,
    load_network,
    save_network,
)
from unrolled_rpca.tensor import ContractViolation, NonFiniteError, Tensor

# Layer-1 P3..P6 act on the all-zero initial streams, so their weight gradients are identically zero.
DEAD_AT_ZERO_START = {f"layer1.p{i}.weight" for i in (3, 4, 5, 6)}


def small_cfg(**kw):
    base = dict(k_layers=2, features=2, patch_hw=(8, 8))
    base.update(kw)
    return NetworkConfig(**base)


@pytest.mark.parametrize("k", [1, 2, 4])
@pytest.mark.parametrize("sparsity", ["group", "elementwise"])
def test_reference_network_equals_ista_iterations(k, sparsity, rng):
    d = rng.random((6, 1, 8, 8)).astype(np.float32)
    lam1, lam2 = 0.3, 0.2
    params = ista_reference_params(k, lam1, lam2, sparsity, patch_hw=(8, 8))
    l, s = forward(d, params)
    ref = ista_solve(d, IstaConfig(lam1, lam2, max_iters=k, tol=1e-300, sparsity=sparsity))
    for got, want in ((l.data, ref.l), (s.data, ref.s)):
        assert np.linalg.norm(got - want) <= 1e-4 * max(np.linalg.norm(want), 1e-12)


def test_zero_network_outputs_zero(rng):
    params = NetworkParams(small_cfg(), seed=0)
    for p in params.parameters():
        p.data = np.zeros_like(p.data)
    l, s = forward(rng.random((4, 1, 8, 8)), params)
    assert not l.data.any() and not s.data.any()


@pytest.mark.parametrize("cfg_kw", [{}, {"ablate_clstm": True}, {"ablate_sr": True}, {"sparsity": "elementwise"}])
def test_output_shapes_follow_input(cfg_kw, rng):
    params = NetworkParams(small_cfg(**cfg_kw), seed=1)
    init_thresholds(params, rng.random((4, 1, 8, 8)))
    l, s = forward(rng.random((4, 1, 8, 8)), params)
    assert l.shape == s.shape == (4, 1, 8, 8)
    l, s = forward(rng.random((3, 4, 1, 8, 8)), params)
    assert l.shape == (3, 4, 1, 8, 8)


def test_ablate_sr_has_no_tail_parameters():
    names = NetworkParams(small_cfg(ablate_sr=True)).named_parameters()
    assert not any(".sr_" in n for n in names)
    names = NetworkParams(small_cfg(ablate_clstm=True)).named_parameters()
    assert any("bypass" in n for n in names) and not any("clstm" in n for n in names)


def test_same_seed_same_network_and_output(rng):
    d = rng.random((4, 1, 8, 8))
    a, b = NetworkParams(small_cfg(), seed=5), NetworkParams(small_cfg(), seed=5)
    for x, y in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x.data, y.data)
    init_thresholds(a, d)
    init_thresholds(b, d)
    np.testing.assert_array_equal(decompose(d, a).s, decompose(d, b).s)
    c = NetworkParams(small_cfg(), seed=6)
    assert any(not np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), c.parameters()))


def test_gradient_reaches_every_parameter(rng):
    params = NetworkParams(small_cfg(k_layers=3), seed=2)
    d = rng.random((2, 4, 1, 8, 8)).astype(np.float32)
    init_thresholds(params, d)
    l, s = forward(d, params)
    ((l * l).sum() + (s * s).sum()).backward()
    for name, p in params.named_parameters().items():
        if name in DEAD_AT_ZERO_START:
            assert p.grad is None or not np.any(p.grad), name
        else:
            assert p.grad is not None and np.any(p.grad), name


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    params = NetworkParams(small_cfg(sparsity="elementwise"), seed=3)
    init_thresholds(params, rng.random((4, 1, 8, 8)))
    path = tmp_path / "net.ckpt"
    save_network(path, params, {"epoch": 7})
    loaded, meta = load_network(path)
    assert meta["epoch"] == 7 and loaded.cfg == params.cfg
    for (n1, p1), (n2, p2) in zip(params.named_parameters().items(), loaded.named_parameters().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    save_network(tmp_path / "again.ckpt", loaded, {"epoch": 7})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    d = rng.random((4, 1, 8, 8))
    np.testing.assert_array_equal(decompose(d, params).s, decompose(d, loaded).s)


def test_load_state_rejects_mismatch():
    params = NetworkParams(small_cfg())
    state = params.state_dict()
    state.pop("layer1.lambda1")
    with pytest.raises(ContractViolation, match="missing"):
        params.load_state_dict(state)


def test_parameter_names_are_one_based():
    names = list(NetworkParams(small_cfg()).named_parameters())
    assert names[0] == "layer1.p1.weight"
    assert "layer2.lambda2" in names and not any(n.startswith("layer0") for n in names)


def test_layer_kernel_sizes():
    params = NetworkParams(small_cfg(k_layers=4))
    assert [layer["p1.weight"].shape[-1] for layer in params.layers] == [5, 5, 3, 3]


def test_odd_spatial_dims_rejected():
    params = NetworkParams(small_cfg())
    z = Tensor(np.zeros((1, 2, 1, 7, 8)))
    with pytest.raises(ContractViolation, match="even"):
        layer_forward(z, z, z, params.layers[0], params.cfg)
    with pytest.raises(ContractViolation):
        NetworkConfig(patch_hw=(7, 8))


def test_non_finite_input_names_the_layer():
    params = NetworkParams(small_cfg())
    d = np.zeros((4, 1, 8, 8), np.float32)
    params.layers[1]["p1.bias"].data = np.array([np.inf], np.float32)
    with pytest.raises(NonFiniteError, match="layer 2"):
        forward(d, params)


def test_thresholds_from_warmup_batch(rng):
    params = NetworkParams(small_cfg(ablate_sr=True))
    d = rng.random((4, 1, 8, 8))
    lam1, lam2 = init_thresholds(params, d, scale=0.1)
    m = d.reshape(4, -1).T
    assert lam1 == pytest.approx(0.1 * np.linalg.svd(m, compute_uv=False).mean(), rel=1e-5)
    assert lam2 == pytest.approx(0.1 * np.linalg.norm(m, axis=1).mean(), rel=1e-5)
    assert float(params.layers[1]["lambda1"].data) == pytest.approx(lam1)
