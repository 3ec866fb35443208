import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsssl import augment as A
from tsssl.data import TimeSeriesSample
from tsssl.errors import ConfigError, ContractError, ReconstructionError, TilingError


def _sample(c=3, d=200, seed=0, label=2):
    return TimeSeriesSample(np.random.default_rng(seed).normal(size=(c, d)), label)


# --- jitter ----------------------------------------------------------------

def test_jitter_zero_sigma_is_identity():
    x = _sample()
    out = A.jitter(x, 0.0, seed=1)
    np.testing.assert_array_equal(out.values, x.values)
    assert out.label == 2


def test_jitter_default_sigma_is_standard_normal():
    import inspect

    assert inspect.signature(A.jitter).parameters["sigma"].default == 1.0


def test_jitter_moments():
    x = TimeSeriesSample(np.zeros((1, 100_000)))
    sigma = 0.7
    noise = A.jitter(x, sigma, seed=3).values - x.values
    n = noise.size
    assert abs(noise.mean()) < 3 * sigma / np.sqrt(n)
    assert abs(noise.std() - sigma) / sigma < 0.02


def test_jitter_seeded_and_validated():
    x = _sample()
    np.testing.assert_array_equal(A.jitter(x, 1.0, 5).values, A.jitter(x, 1.0, 5).values)
    with pytest.raises(ConfigError):
        A.jitter(x, -0.1, 0)


# --- patching --------------------------------------------------------------

def test_patchify_har_example():
    grid = A.patchify(_sample(), 10)
    assert grid.n_patches == 20 and grid.patches.shape[1:] == (3, 10)
    np.testing.assert_array_equal(grid.patches[3], _sample().values[:, 30:40])


def test_patchify_single_patch_and_error():
    x = _sample(d=12)
    grid = A.patchify(x, 12)
    assert grid.n_patches == 1
    np.testing.assert_array_equal(grid.patches[0], x.values)
    np.testing.assert_array_equal(A.unpatchify(grid).values, x.values)
    with pytest.raises(TilingError, match="200.*7"):
        A.patchify(_sample(), 7)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 8), st.integers(0, 1000))
def test_patchify_round_trip_bit_exact(c, n, p, seed):
    x = _sample(c, n * p, seed)
    back = A.unpatchify(A.patchify(x, p)).values
    assert back.tobytes() == x.values.tobytes()
    tokens = A.patchify_array(x.values[None], p)
    assert tokens.shape == (1, n, c * p)
    assert A.unpatchify_array(tokens, c, p)[0].tobytes() == x.values.tobytes()


def test_permute_then_unpermute():
    x = _sample()
    grid = A.patchify(x, 10)
    perm = np.random.default_rng(4).permutation(20)
    scrambled = grid.patches[perm]
    plan = A.sample_mask(20, 0.0, 0)
    rebuilt = A.scatter_reconstruction(scrambled, plan, indices=perm)
    assert A.unpatchify(rebuilt).values.tobytes() == x.values.tobytes()


def test_unpatchify_missing_patch():
    grid = A.patchify(_sample(), 10)
    broken = A.PatchGrid(grid.patches[:-1], 10, grid.source_shape)
    with pytest.raises(ReconstructionError):
        A.unpatchify(broken)


# --- masks -----------------------------------------------------------------

def test_mask_counts_match_worked_example():
    plan = A.sample_mask(20, 0.75, seed=0)
    assert len(plan.masked_idx) == 15 and len(plan.visible_idx) == 5
    assert sorted(plan.order.tolist()) == list(range(20))


def test_mask_ratio_zero_and_errors():
    plan = A.sample_mask(20, 0.0, seed=0)
    assert plan.masked_idx.size == 0 and plan.visible_idx.tolist() == list(range(20))
    with pytest.raises(ConfigError):
        A.sample_mask(20, 1.0, 0)
    with pytest.raises(ConfigError):
        A.sample_mask(2, 0.9, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(0.0, 0.95), st.integers(0, 10**6))
def test_mask_partition_property(n, ratio, seed):
    k = A.n_masked(n, ratio)
    if k >= n:
        with pytest.raises(ConfigError):
            A.sample_mask(n, ratio, seed)
        return
    plan = A.sample_mask(n, ratio, seed)
    assert len(plan.masked_idx) == k
    assert not set(plan.visible_idx) & set(plan.masked_idx)
    assert set(plan.visible_idx) | set(plan.masked_idx) == set(range(n))
    assert list(plan.visible_idx) == sorted(plan.visible_idx)


def test_mask_frequency_uniform():
    counts = np.zeros(20)
    for s in range(10_000):
        counts[A.sample_mask(20, 0.75, s).masked_idx] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.75) <= 0.02)


def test_masks_differ_across_samples_and_epochs():
    plans = A.sample_masks(20, 0.75, base_seed=41, epoch=0, sample_ids=range(8))
    assert len({tuple(p.masked_idx) for p in plans}) > 1
    again = A.sample_masks(20, 0.75, base_seed=41, epoch=0, sample_ids=range(8))
    assert all(np.array_equal(a.masked_idx, b.masked_idx) for a, b in zip(plans, again))
    nxt = A.sample_masks(20, 0.75, base_seed=41, epoch=1, sample_ids=range(8))
    assert any(not np.array_equal(a.masked_idx, b.masked_idx) for a, b in zip(plans, nxt))


# --- gather / scatter ------------------------------------------------------

def test_gather_all_visible_and_ordering():
    grid = A.patchify(_sample(), 10)
    vis, _ = A.gather_visible(grid, A.sample_mask(20, 0.0, 0))
    np.testing.assert_array_equal(vis, grid.patches)
    plan = A.MaskPlan(np.array([0, 19]), np.arange(1, 19), 0.9)
    vis, _ = A.gather_visible(grid, plan)
    np.testing.assert_array_equal(vis, grid.patches[[0, 19]])


def test_gather_out_of_range():
    grid = A.patchify(_sample(d=40), 10)
    with pytest.raises(ContractError):
        A.gather_visible(grid, A.MaskPlan(np.array([0, 7]), np.array([1, 2]), 0.5))


def test_gather_scatter_zero_fill_positional():
    x = _sample()
    grid = A.patchify(x, 10)
    plan = A.sample_mask(20, 0.75, seed=9)
    vis, _ = A.gather_visible(grid, plan)
    pred = np.concatenate([vis, np.zeros((15, 3, 10))])
    rebuilt = A.scatter_reconstruction(pred, plan, indices=plan.order)
    np.testing.assert_array_equal(rebuilt.patches[plan.visible_idx], grid.patches[plan.visible_idx])
    assert np.all(rebuilt.patches[plan.masked_idx] == 0.0)


def test_scatter_identity_and_count_error():
    grid = A.patchify(_sample(), 10)
    plan = A.sample_mask(20, 0.75, seed=1)
    out = A.scatter_reconstruction(grid.patches, plan)
    np.testing.assert_array_equal(out.patches, grid.patches)
    with pytest.raises(ContractError):
        A.scatter_reconstruction(grid.patches[:19], plan)


def test_gather_then_scatter_with_truth_is_identity():
    grid = A.patchify(_sample(seed=3), 10)
    plan = A.sample_mask(20, 0.5, seed=2)
    vis, _ = A.gather_visible(grid, plan)
    pred = np.concatenate([vis, grid.patches[plan.masked_idx]])
    out = A.scatter_reconstruction(pred, plan, indices=plan.order)
    assert out.patches.tobytes() == grid.patches.tobytes()
