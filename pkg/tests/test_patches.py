import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unrolled_rpca.patches import PatchGrid, axis_origins, coverage, extract, splice
from unrolled_rpca.tensor import ContractViolation


@pytest.mark.parametrize("hw,count", [(128, 9), (512, 225), (64, 1)])
def test_default_grid_counts(hw, count):
    assert len(PatchGrid().fit((20, 1, hw, hw)).origins) == count


def test_origins_clamp_the_last_window():
    assert axis_origins(100, 64, 32) == [0, 32, 36]
    assert axis_origins(64, 64, 32) == [0]
    with pytest.raises(ContractViolation):
        axis_origins(10, 64, 32)


def test_too_small_input_names_the_axis():
    with pytest.raises(ContractViolation, match="along H"):
        PatchGrid().fit((20, 1, 32, 128))
    with pytest.raises(ContractViolation, match="along T"):
        PatchGrid().fit((10, 1, 128, 128))


def test_round_trip_is_exact(rng):
    seq = rng.random((30, 1, 100, 90)).astype(np.float32)
    grid = PatchGrid().fit(seq.shape)
    np.testing.assert_array_equal(splice(extract(seq, grid), grid, seq.shape), seq)


def test_two_patch_overlap_is_averaged():
    grid = PatchGrid(patch_h=2, patch_w=4, patch_t=1, stride_h=1, stride_w=4, stride_t=1).fit((1, 1, 3, 4))
    assert len(grid.origins) == 2
    out = splice([np.zeros((1, 1, 2, 4)), np.ones((1, 1, 2, 4))], grid, (1, 1, 3, 4))
    np.testing.assert_array_equal(out[0, 0, :, 0], [0.0, 0.5, 1.0])


def splice_oracle(patches, grid, shape):
    """Voxel-by-voxel mean over every patch containing the voxel."""
    t, _, h, w = shape
    out = np.zeros(shape)
    for ti in range(t):
        for y in range(h):
            for x in range(w):
                vals = [
                    p[ti - o[0], 0, y - o[1], x - o[2]]
                    for p, o in zip(patches, grid.origins)
                    if 0 <= ti - o[0] < grid.patch_t and 0 <= y - o[1] < grid.patch_h and 0 <= x - o[2] < grid.patch_w
                ]
                out[ti, 0, y, x] = np.mean(vals)
    return out


def test_splice_matches_voxel_oracle(rng):
    grid = PatchGrid(3, 4, 2, 2, 3, 1).fit((4, 1, 7, 9))
    patches = [rng.random((2, 1, 3, 4)) for _ in grid.origins]
    np.testing.assert_allclose(splice(patches, grid, (4, 1, 7, 9)), splice_oracle(patches, grid, (4, 1, 7, 9)), rtol=1e-6)


def test_interior_coverage_with_half_overlap():
    grid = PatchGrid().fit((20, 1, 128, 128))
    cov = coverage(grid, (20, 1, 128, 128))
    assert cov[:, :, 32:96, 32:96].min() == 4
    assert cov.min() == 1


def test_splice_contracts(rng):
    grid = PatchGrid().fit((20, 1, 64, 64))
    with pytest.raises(ContractViolation, match="patches"):
        splice([], grid, (20, 1, 64, 64))
    with pytest.raises(ContractViolation, match="shape"):
        splice([np.zeros((20, 1, 32, 32))], grid, (20, 1, 64, 64))


@settings(max_examples=40, deadline=None)
@given(
    t=st.integers(2, 8), h=st.integers(4, 20), w=st.integers(4, 20),
    pt=st.integers(1, 4), ph=st.integers(1, 8), pw=st.integers(1, 8),
    overlap=st.sampled_from([0.0, 0.25, 0.5, 0.75]), seed=st.integers(0, 99),
)
def test_round_trip_property(t, h, w, pt, ph, pw, overlap, seed):
    pt, ph, pw = min(pt, t), min(ph, h), min(pw, w)
    s = lambda n: max(1, int(round(n * (1 - overlap))))  # noqa: E731
    grid = PatchGrid(ph, pw, pt, s(ph), s(pw), s(pt)).fit((t, 1, h, w))
    seq = np.random.default_rng(seed).random((t, 1, h, w)).astype(np.float32)
    np.testing.assert_array_equal(splice(extract(seq, grid), grid, seq.shape), seq)
    assert coverage(grid, seq.shape).min() >= 1
