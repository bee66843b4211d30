import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fuzzyalign.errors import NoPositive, ShapeMismatch, ZeroNorm
from fuzzyalign.numeric import kl_weighted_sum
from fuzzyalign.sdm import LabeledBatch, label_distribution, pairwise_cosine, sdm, sdm_loss, sdm_rows


def test_pairwise_cosine_examples():
    eye = np.eye(3)
    np.testing.assert_allclose(np.diag(pairwise_cosine(eye, eye)), 1.0)
    s = pairwise_cosine(np.eye(2), np.eye(2)[::-1])
    assert s[0, 0] == 0.0 and s[1, 1] == 0.0


def test_pairwise_cosine_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    ref = [[oracles.cos(x, y) for y in b] for x in a]
    np.testing.assert_allclose(pairwise_cosine(a, b), ref, rtol=1e-14, atol=1e-15)


def test_pairwise_cosine_errors():
    with pytest.raises(ZeroNorm):
        pairwise_cosine(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        pairwise_cosine(np.ones((2, 3)), np.ones((2, 4)))


def test_label_distribution():
    q = label_distribution(np.array([0, 0, 1]))
    np.testing.assert_allclose(q, [[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])
    with pytest.raises(NoPositive):
        label_distribution(np.array([0, 1]), np.array([0, 0]))


def test_loss_vanishes_when_p_matches_q():
    # distinct identities, orthogonal features, sharp temperature: p -> one-hot q
    value = sdm_loss(np.eye(2), np.eye(2), np.array([0, 1]), tau=1e-3, eps=0.0).item()
    assert 0.0 <= value < 1e-100


def test_shared_identity_identical_rows():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    value = sdm_loss(x, x, np.array([7, 7]), tau=0.02, eps=1e-8).item()
    assert abs(value) <= 2 * 2 * 1e-8  # only the eps slack in log(q + eps)


@pytest.mark.parametrize("seed", range(10))
def test_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    b, d = 3, int(rng.integers(2, 9))
    a, f = rng.normal(size=(b, d)), rng.normal(size=(b, d))
    ids = rng.integers(0, 2, size=b)
    tau = float(rng.uniform(0.02, 1.0))
    got = sdm_loss(a, f, ids, tau, 1e-8).item()
    ref = oracles.sdm(a.tolist(), f.tolist(), ids.tolist(), tau, 1e-8)
    assert got == pytest.approx(ref, rel=1e-10)
    rows = sdm_rows(pairwise_cosine(a, f), ids, tau, 1e-8).value
    np.testing.assert_allclose(rows, oracles.sdm_rows(a.tolist(), f.tolist(), ids.tolist(), tau, 1e-8), rtol=1e-10)


def test_bidirectional_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    ids = np.array([0, 1, 0, 2])
    assert sdm_loss(a, b, ids).item() == pytest.approx(sdm_loss(b, a, ids).item(), rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0), st.floats(0.1, 10.0))
def test_nonnegative_and_scale_invariant(seed, tau, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    ids = rng.integers(0, 3, size=4)
    v = sdm_loss(a, b, ids, tau, 1e-8).item()
    assert v >= -2 * 4 * 1e-8  # eps slack only
    assert sdm_loss(a * scale, b, ids, tau, 1e-8).item() == pytest.approx(v, rel=1e-9, abs=1e-12)


def test_uniform_similarity_reduces_to_kl_of_uniform():
    ids = np.array([0, 0, 1])
    value = sdm_rows(np.zeros((3, 3)), ids, 0.02, 1e-8).value.sum()
    uniform = np.full((3, 3), 1 / 3)
    assert value == pytest.approx(kl_weighted_sum(uniform, label_distribution(ids), 1e-8), rel=1e-13)


def test_sdm_returns_gradients():
    rng = np.random.default_rng(2)
    batch = LabeledBatch(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.array([0, 1, 2]))
    value, grads = sdm(batch, tau=0.1)
    assert value == pytest.approx(sdm_loss(batch.features_a, batch.features_b, batch.identities, 0.1).item())
    assert grads["features_a"].shape == (3, 4) and grads["features_b"].shape == (3, 4)


def test_batch_validation():
    with pytest.raises(ShapeMismatch):
        LabeledBatch(np.ones((1, 3)), np.ones((1, 3)), np.array([0]))
    with pytest.raises(ShapeMismatch):
        LabeledBatch(np.ones((2, 3)), np.ones((3, 3)), np.array([0, 1]))


def test_sharp_temperature_gradcheck_error_is_truncation():
    from fuzzyalign.gradcheck import grad_check

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    ids = np.array([0, 1, 0, 2])
    f = lambda x, y: sdm_loss(x, y, ids, tau=0.02)
    coarse, fine = grad_check(f, [a, b], step=1e-4), grad_check(f, [a, b], step=1e-5)
    # central differences: a 10x smaller step cuts the error about 100x
    assert fine < coarse / 20
    assert fine <= 1e-5
