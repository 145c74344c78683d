import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import atdfuse.tensor as T
from atdfuse.guide import GuideModule, ModalityId, guide_calibrate
from atdfuse.tensor import ContractError, Tensor, grad_check, make_rng


def zeroed_guide(d=4, seed=0):
    g = GuideModule(d, make_rng(seed))
    for p in g.parameters():
        p.data[...] = 0.0
    return g


def scalar_mean_std(col):
    n = len(col)
    m = sum(col) / n
    return m, (sum((v - m) ** 2 for v in col) / n) ** 0.5


def test_constant_batch_gives_zeros():
    g = zeroed_guide()
    f = Tensor(np.tile([0.3, -1.7, 2.2, 5.0], (6, 1)))
    out = g(f, ModalityId(0), train=True).features.data
    assert np.all(out == 0.0)


def test_two_point_batch():
    g = zeroed_guide(d=3)
    f = Tensor([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    out = g(f, ModalityId(1), train=True).features.data
    np.testing.assert_allclose(out, f.data, atol=1e-15)


def test_random_batch_matches_scalar_statistics():
    g = zeroed_guide(d=5)
    f = make_rng(1).normal(3.0, 2.0, (16, 5))
    res = g(Tensor(f), ModalityId(0), train=True)
    for j in range(5):
        m, s = scalar_mean_std(f[:, j].tolist())
        assert res.stats.mean[j] == pytest.approx(m, abs=1e-12)
        assert res.stats.std[j] == pytest.approx(s, abs=1e-12)
        col = res.features.data[:, j]
        om, os_ = scalar_mean_std(col.tolist())
        assert abs(om) < 1e-9
        assert abs(os_ - 1.0) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_train_mode_statistics_with_live_network(b, seed):
    rng = make_rng(seed)
    g = GuideModule(6, rng)
    for p in g.parameters():
        p.data[...] = rng.normal(0, 0.3, p.shape)
    f = rng.normal(rng.uniform(-3, 3), rng.uniform(0.5, 3), (b, 6))
    out = g(Tensor(f), ModalityId(seed % 2), train=True).features.data
    assert np.all(np.abs(out.mean(axis=0)) <= 1e-6)
    assert np.all(np.abs(out.std(axis=0) - 1.0) <= 1e-4)


def test_permutation_equivariance():
    rng = make_rng(2)
    g = GuideModule(4, rng)
    f = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    a = g(Tensor(f), 0, train=True).features.data
    b = g(Tensor(f[perm]), 0, train=True).features.data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_batch_of_one_rejected_in_train_mode():
    with pytest.raises(ContractError, match="at least 2"):
        zeroed_guide()(Tensor(np.ones((1, 4))), 0, train=True)


def test_unknown_modality():
    with pytest.raises(ContractError):
        zeroed_guide()(Tensor(np.ones((2, 4))), 2, train=True)
    with pytest.raises(ContractError):
        ModalityId(-1)


def test_eval_mode_is_per_sample():
    rng = make_rng(3)
    g = GuideModule(4, rng)
    for _ in range(5):
        g(Tensor(rng.normal(size=(8, 4))), 1, train=True)
    f = rng.normal(size=(5, 4))
    whole = guide_calibrate(g, Tensor(f), ModalityId(1), mode="eval").features.data
    rows = np.vstack([g(Tensor(f[i:i + 1]), 1, train=False).features.data for i in range(5)])
    np.testing.assert_allclose(rows, whole, atol=1e-14)


def test_running_stats_ema():
    g = zeroed_guide(d=2)
    f = Tensor([[0.0, 2.0], [2.0, 6.0]])
    g(f, 0, train=True)
    np.testing.assert_allclose(g.running_mean[0], 0.1 * np.array([1.0, 4.0]))
    np.testing.assert_allclose(g.running_std[0], 0.9 + 0.1 * np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g.running_mean[1], [0.0, 0.0])


def test_modality_conditioning_after_one_step():
    rng = make_rng(4)
    g = GuideModule(4, rng)
    f = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 4))
    out = g(Tensor(f), 0, train=True).features
    loss = T.reduce_sum(T.square(out - Tensor(target)))
    loss.backward()
    for p in g.parameters():
        p.data -= 0.1 * p.grad
    a = g(Tensor(f), 0, train=True).features.data
    b = g(Tensor(f), 1, train=True).features.data
    assert np.max(np.abs(a - b)) > 0


def test_guide_gradient_check_through_statistics():
    rng = make_rng(5)
    g = GuideModule(3, rng, d_emb=2)
    for p in g.parameters():
        p.data[...] = rng.normal(0, 0.5, p.shape)
    f = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (4, 3)))
    report = grad_check(lambda: T.reduce_sum(g(f, 1, train=True).features * w),
                        [f] + g.parameters())
    assert report.passed, report.max_rel_error


def test_bad_mode():
    with pytest.raises(ContractError):
        guide_calibrate(zeroed_guide(), Tensor(np.ones((2, 4))), 0, mode="infer")
