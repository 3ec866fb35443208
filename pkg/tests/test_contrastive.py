import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsssl import contrastive as C
from tsssl import data as D
from tsssl import nn
from tsssl.autodiff import Tensor, grad_check
from tsssl.errors import ConfigError, ContractError, NumericError

SMALL = nn.ArchConfig(patch_len=5, model_dim=8, n_heads=2, mlp_dim=16)


def nt_xent_bruteforce(za, zp, tau, originals_only=False):
    """Double loop over anchors and candidates, straight from the definition."""
    z = list(za) + list(zp)
    n = len(za)
    terms = []
    for i in range(2 * n):
        pos = i + n if i < n else i - n

        def sim(u, v):
            return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

        num = math.exp(sim(z[i], z[pos]) / tau)
        den = 0.0
        for j in range(2 * n):
            if j != i:
                den += math.exp(sim(z[i], z[j]) / tau)
        terms.append(-math.log(num / den))
    if originals_only:
        terms = terms[:n]
    return sum(terms) / len(terms)


def _loss(za, zp, tau=0.5, **kw):
    return C.nt_xent_loss(C.ContrastiveBatch(Tensor(za), Tensor(zp)), tau, **kw).item()


# --- NT-Xent values --------------------------------------------------------

def test_degenerate_all_identical_is_ln3():
    e = np.tile([0.3, -1.0, 2.0], (2, 1))
    assert abs(_loss(e, e) - math.log(3)) <= 1e-9


def test_orthonormal_pairs_closed_form():
    e = np.eye(2)
    closed = -math.log(math.e / (math.e + 2))
    assert abs(closed - 0.5514) < 1e-4
    assert abs(_loss(e, e, tau=1.0) - closed) < 1e-12
    assert abs(nt_xent_bruteforce(e, e, 1.0) - closed) < 1e-12


def test_random_batches_match_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        za, zp = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
        tau = float(rng.uniform(0.1, 2.0))
        assert abs(_loss(za, zp, tau) - nt_xent_bruteforce(za, zp, tau)) <= 1e-10


def test_originals_only_mode_matches_bruteforce():
    rng = np.random.default_rng(1)
    za, zp = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    got = _loss(za, zp, 0.7, anchors="originals_only")
    assert abs(got - nt_xent_bruteforce(za, zp, 0.7, originals_only=True)) <= 1e-10


def test_errors():
    with pytest.raises(ContractError):
        _loss(np.ones((1, 3)), np.ones((1, 3)))
    with pytest.raises(NumericError):
        _loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones((2, 2)))
    with pytest.raises(ConfigError):
        _loss(np.ones((2, 2)), np.ones((2, 2)), tau=0.0)


# --- NT-Xent invariants ----------------------------------------------------

batches = st.integers(2, 8).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**32 - 1), st.floats(0.1, 2.0)))


@settings(max_examples=40, deadline=None)
@given(batches)
def test_scale_invariance(args):
    n, seed, tau = args
    rng = np.random.default_rng(seed)
    za, zp = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    base = _loss(za, zp, tau)
    za2 = za.copy()
    za2[int(rng.integers(n))] *= 2.0
    assert abs(_loss(za2, zp, tau) - base) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(batches)
def test_rotation_invariance(args):
    n, seed, tau = args
    rng = np.random.default_rng(seed)
    za, zp = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    assert abs(_loss(za @ q, zp @ q, tau) - _loss(za, zp, tau)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(batches)
def test_pair_permutation_invariance_and_bound(args):
    n, seed, tau = args
    rng = np.random.default_rng(seed)
    za, zp = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    perm = rng.permutation(n)
    value = _loss(za, zp, tau)
    assert abs(_loss(za[perm], zp[perm], tau) - value) <= 1e-12
    assert value >= math.log(2 * n - 1) - 2.0 / tau - 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_nt_xent_gradient(seed):
    rng = np.random.default_rng(seed)
    za = Tensor(rng.uniform(-2, 2, size=(4, 6)), requires_grad=True)
    zp = Tensor(rng.uniform(-2, 2, size=(4, 6)), requires_grad=True)
    f = lambda: C.nt_xent_loss(C.ContrastiveBatch(za, zp), 0.5)
    assert grad_check(f, [za, zp], max_coords=None) <= 1e-4


# --- views and encoding ----------------------------------------------------

def test_make_views():
    ds = D.synth_generate(2, n_classes=2, c=2, d=10, seed=0)
    orig, views = C.make_views(ds.samples, 0.0, seed=1)
    np.testing.assert_array_equal(orig, views)
    orig, views = C.make_views(ds.values, 1.0, seed=1)
    assert orig.shape == views.shape == (4, 2, 10)
    _, again = C.make_views(ds.values, 1.0, seed=1)
    np.testing.assert_array_equal(views, again)
    with pytest.raises(ContractError):
        C.make_views(np.zeros((0, 2, 10)), 1.0, 0)


def test_encode_series_shapes_and_determinism():
    cfg = C.ContrastiveConfig(arch=SMALL, projection_dim=6)
    p = C.init_contrastive(2, cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 20))
    z1 = C.encode_series(D.TimeSeriesSample(x), p, cfg)
    assert z1.shape == (1, 6)
    np.testing.assert_array_equal(z1.data, C.encode_series(x, p, cfg).data)
    cfg2 = C.ContrastiveConfig(arch=SMALL, use_projection_head=False)
    p2 = C.init_contrastive(2, cfg2, 0)
    assert C.encode_series(x, p2, cfg2).shape == (1, 8)
    assert not any(k.startswith("projection") for k in p2)


def test_identity_encoder_reduction():
    cfg = C.ContrastiveConfig(arch=SMALL, use_projection_head=False)
    p = C.init_contrastive(2, cfg, 3)
    for name, t in p.items():
        if name.endswith((".attn.wo", ".attn.bo", ".mlp.w2", ".mlp.b2")):
            t.data = np.zeros_like(t.data)
    p["encoder.embed.b"].data = np.random.default_rng(1).normal(size=8)
    x = np.random.default_rng(2).normal(size=(2, 20))
    tokens = np.stack([x[:, i * 5:(i + 1) * 5].reshape(-1) for i in range(4)])
    pe = nn.positional_encoding(4, 8)
    expected = (tokens @ p["encoder.embed.w"].data + p["encoder.embed.b"].data + pe).mean(axis=0)
    np.testing.assert_allclose(C.encode_series(x, p, cfg).data[0], expected, atol=1e-13)


@pytest.mark.parametrize("seed", range(10))
def test_composite_gradient_through_encoder_and_projection(seed):
    cfg = C.ContrastiveConfig(arch=SMALL, projection_dim=4)
    p = C.init_contrastive(2, cfg, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(3, 2, 10))
    xv = x + 0.5 * rng.normal(size=x.shape)
    f = lambda: C.nt_xent_loss(C.ContrastiveBatch(C.encode_series(x, p, cfg), C.encode_series(xv, p, cfg)), 0.5)
    assert grad_check(f, p, h=1e-5, max_coords=4, seed=seed) <= 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        C.ContrastiveConfig(temperature=0)
    with pytest.raises(ConfigError):
        C.ContrastiveConfig(batch_size=1)
    with pytest.raises(ConfigError):
        C.ContrastiveConfig(anchors="both")


# --- pretraining -----------------------------------------------------------

def test_pretrain_zero_epochs():
    ds = D.synth_generate(4, n_classes=2, c=2, d=20, seed=0)
    cfg = C.ContrastiveConfig(arch=SMALL, epochs=0)
    res = C.pretrain_contrastive(ds, cfg, seed=5)
    assert res.loss_history == [] and res.best_epoch is None
    assert res.params.equal(C.init_contrastive(2, cfg, 5))


def test_pretrain_is_deterministic():
    ds = D.synth_generate(6, n_classes=3, c=2, d=20, seed=0)
    cfg = C.ContrastiveConfig(arch=SMALL, epochs=3, batch_size=8)
    a, b = C.pretrain_contrastive(ds, cfg, 7), C.pretrain_contrastive(ds, cfg, 7)
    assert a.loss_history == b.loss_history
    assert a.encoder.equal(b.encoder)
    assert all(k.startswith("encoder.") for k in a.encoder)


def test_pretrain_loss_decreases_on_synthetic():
    ds = D.synth_generate(60, noise_std=0.5, seed=0)
    ds = D.zscore_normalize(ds, D.compute_stats(ds))
    res = C.pretrain_contrastive(ds, C.ContrastiveConfig(epochs=30, batch_size=64), seed=41)
    assert len(res.loss_history) == 30
    assert res.loss_history[-1] < res.loss_history[0]
    assert res.loss_history[res.best_epoch] == min(res.loss_history)
